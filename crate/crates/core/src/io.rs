//! Bit-exact on-disk formats: volume files, checkpoints, dataset
//! directories and CSV metric reports.
//!
//! Volume file layout (all little-endian):
//!   magic "BMDSVOL1" | version u32 | dtype u32 (0 = f64) | ndim u32 |
//!   dims u64 x ndim | payload f64 x product(dims), row-major.
//!
//! Checkpoint layout:
//!   magic "BMDSCKP1" | version u32 | config_hash u64 | seed u64 |
//!   epoch u32 | best_metric f64 | n_params u32 | per parameter:
//!   name_len u32, name bytes, ndim u32, dims u64 x ndim, data f64 x n.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 8] = b"BMDSVOL1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BMDSCKP1";
pub const FORMAT_VERSION: u32 = 1;

// ── little-endian primitives ─────────────────────────────────────────

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::io(format!("truncated file while reading {what}")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

// ── volume files ─────────────────────────────────────────────────────

pub fn volume_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + t.shape().len() * 8 + t.numel() * 8);
    buf.extend_from_slice(VOLUME_MAGIC);
    push_u32(&mut buf, FORMAT_VERSION);
    push_u32(&mut buf, 0); // dtype 0 = f64
    push_u32(&mut buf, t.shape().len() as u32);
    for &d in t.shape() {
        push_u64(&mut buf, d as u64);
    }
    t.with_data(|d| {
        for &v in d {
            push_f64(&mut buf, v);
        }
    });
    buf
}

pub fn volume_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8, "magic")?;
    if magic != VOLUME_MAGIC {
        return Err(Error::io(format!("bad volume magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::io(format!("unsupported volume version {version}")));
    }
    let dtype = r.u32("dtype")?;
    if dtype != 0 {
        return Err(Error::io(format!("unsupported dtype tag {dtype}")));
    }
    let ndim = r.u32("ndim")? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        dims.push(r.u64(&format!("dim {i}"))? as usize);
    }
    let n: usize = dims.iter().product();
    let data = r.f64_vec(n, "payload")?;
    if !r.done() {
        return Err(Error::io("trailing bytes after volume payload".to_string()));
    }
    Tensor::from_vec(&dims, data)
}

pub fn write_volume(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, volume_to_bytes(t))
        .map_err(|e| Error::io(format!("writing {}: {e}", path.display())))
}

pub fn read_volume(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}: {e}", path.display())))?;
    volume_from_bytes(&bytes)
}

// ── checkpoints ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: u64,
    pub seed: u64,
    pub epoch: u32,
    pub best_metric: f64,
    /// Ordered (name, shape, raster) entries.
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_named(
        named: &[(String, Tensor)],
        config_hash: u64,
        seed: u64,
        epoch: u32,
        best_metric: f64,
    ) -> Checkpoint {
        Checkpoint {
            version: FORMAT_VERSION,
            config_hash,
            seed,
            epoch,
            best_metric,
            params: named
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.to_vec()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.params
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    /// True when the stored head is variational (mu/rho pairs).
    pub fn is_bayesian(&self) -> bool {
        self.get("head.mu_weight").is_some()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        push_u32(&mut buf, self.version);
        push_u64(&mut buf, self.config_hash);
        push_u64(&mut buf, self.seed);
        push_u32(&mut buf, self.epoch);
        push_f64(&mut buf, self.best_metric);
        push_u32(&mut buf, self.params.len() as u32);
        for (name, shape, data) in &self.params {
            push_u32(&mut buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            push_u32(&mut buf, shape.len() as u32);
            for &d in shape {
                push_u64(&mut buf, d as u64);
            }
            for &v in data {
                push_f64(&mut buf, v);
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader::new(bytes);
        let magic = r.take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::checkpoint(format!("bad checkpoint magic {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.u64("config hash")?;
        let seed = r.u64("seed")?;
        let epoch = r.u32("epoch")?;
        let best_metric = r.f64("best metric")?;
        let n = r.u32("param count")? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| Error::checkpoint("non-utf8 parameter name".to_string()))?;
            let ndim = r.u32("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f64_vec(numel, &name)?;
            params.push((name, shape, data));
        }
        if !r.done() {
            return Err(Error::checkpoint("trailing bytes after parameters".to_string()));
        }
        Ok(Checkpoint { version, config_hash, seed, epoch, best_metric, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}

// ── dataset directories ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::io(format!("unknown split label '{other}' in manifest"))),
        }
    }
}

/// One `<id>.vol` per sample holding modalities and label channels stacked
/// along the leading axis, plus `manifest.txt` with `<id> <split>` lines.
pub fn write_dataset(dir: &Path, samples: &[(Sample, Split)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}: {e}", dir.display())))?;
    let mut manifest = String::new();
    for (sample, split) in samples {
        let c_vol = sample.volume.shape()[0];
        let c_lab = sample.label.shape()[0];
        let s = sample.volume.shape()[1];
        let mut stacked = sample.volume.to_vec();
        stacked.extend(sample.label.to_vec());
        let t = Tensor::from_vec(&[c_vol + c_lab, s, s, s], stacked)?;
        write_volume(&dir.join(format!("{}.vol", sample.id)), &t)?;
        manifest.push_str(&format!("{} {}\n", sample.id, split.as_str()));
    }
    fs::write(dir.join("manifest.txt"), manifest)
        .map_err(|e| Error::io(format!("writing manifest: {e}")))?;
    Ok(())
}

/// Reads a dataset directory; `modalities` says how many leading channels
/// belong to the volume (the rest are label channels).
pub fn load_dataset(dir: &Path, modalities: usize) -> Result<Vec<(Sample, Split)>> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| Error::io(format!("reading {}/manifest.txt: {e}", dir.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id = parts
            .next()
            .ok_or_else(|| Error::io(format!("manifest line {}: missing id", lineno + 1)))?;
        let split = Split::parse(
            parts
                .next()
                .ok_or_else(|| Error::io(format!("manifest line {}: missing split", lineno + 1)))?,
        )?;
        let t = read_volume(&dir.join(format!("{id}.vol")))?;
        if t.shape().len() != 4 || t.shape()[0] <= modalities {
            return Err(Error::io(format!(
                "{id}.vol has shape {:?}, expected more than {modalities} stacked channels",
                t.shape()
            )));
        }
        let s = t.shape()[1];
        let sp = s * s * s;
        let regions = t.shape()[0] - modalities;
        let data = t.to_vec();
        let volume = Tensor::from_vec(&[modalities, s, s, s], data[..modalities * sp].to_vec())?;
        let label = Tensor::from_vec(&[regions, s, s, s], data[modalities * sp..].to_vec())?;
        out.push((Sample { volume, label, id: id.to_string() }, split));
    }
    Ok(out)
}

// ── CSV reports ──────────────────────────────────────────────────────

/// Round to 6 significant digits, print the shortest representation.
pub fn format_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("scientific notation round-trip");
    format!("{rounded}")
}

pub const REPORT_HEADER: &str =
    "scenario,region,dice_mean,dice_std,hd95_mean,hd95_std,ece,nll,unc_auc,n_cases";

fn opt_g6(v: Option<f64>) -> String {
    v.map(format_g6).unwrap_or_default()
}

/// Render rows in deterministic (scenario, region) order.
pub fn report_to_string(rows: &[MetricReport]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::config("report needs at least one row".to_string()));
    }
    let mut sorted: Vec<&MetricReport> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (a.scenario.as_str(), a.region.as_str()).cmp(&(b.scenario.as_str(), b.region.as_str()))
    });
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in sorted {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.scenario,
            r.region,
            format_g6(r.dice_mean),
            format_g6(r.dice_std),
            opt_g6(r.hd95_mean),
            opt_g6(r.hd95_std),
            format_g6(r.ece),
            format_g6(r.nll),
            opt_g6(r.unc_auc),
            r.n_cases
        ));
    }
    Ok(out)
}

pub fn write_report(rows: &[MetricReport], path: &Path) -> Result<()> {
    let text = report_to_string(rows)?;
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}: {e}", path.display())))
}

/// Plain text file writer used for logs and auxiliary CSVs.
pub fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {}: {e}", parent.display())))?;
        }
    }
    fs::write(path, content).map_err(|e| Error::io(format!("writing {}: {e}", path.display())))
}
