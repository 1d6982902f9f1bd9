//! Synthetic multi-modal phantom volumes with nested tumor-analog regions.
//!
//! Each sample holds three nested random ellipsoids. Labels are cumulative
//! binary masks (channel 2 implies channel 1 implies channel 0). Modality
//! intensities depend on the deepest region containing a voxel; only the
//! designated informative channel carries contrast for the outermost
//! region, so dropping that channel genuinely destroys the outer boundary
//! signal.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PhantomSpec {
    /// Cubic edge length in voxels.
    pub size: usize,
    pub num_modalities: usize,
    pub num_regions: usize,
    pub noise_std: f64,
    /// Modality carrying the outermost-region contrast.
    pub informative_channel: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 32,
            num_modalities: 4,
            num_regions: 3,
            noise_std: 0.1,
            informative_channel: 3,
            seed: 42,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_modalities != 4 {
            return Err(Error::config(format!("num_modalities must be 4, got {}", self.num_modalities)));
        }
        if self.num_regions != 3 {
            return Err(Error::config(format!("num_regions must be 3, got {}", self.num_regions)));
        }
        if self.informative_channel >= self.num_modalities {
            return Err(Error::config(format!(
                "informative_channel {} out of range for {} modalities",
                self.informative_channel, self.num_modalities
            )));
        }
        if self.size < 16 {
            return Err(Error::config(format!("size must be >= 16, got {}", self.size)));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// `[num_modalities, S, S, S]`
    pub volume: Tensor,
    /// Binary `[num_regions, S, S, S]`, channels nested.
    pub label: Tensor,
    pub id: String,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut q = 0.0;
        for d in 0..3 {
            let t = (p[d] - self.center[d]) / self.semi[d];
            q += t * t;
        }
        q <= 1.0
    }
}

fn voxel_mask(e: &Ellipsoid, s: usize) -> Vec<bool> {
    let mut m = vec![false; s * s * s];
    let lo = |c: f64, a: f64| ((c - a).floor().max(0.0)) as usize;
    let hi = |c: f64, a: f64| ((c + a).ceil().min(s as f64 - 1.0)) as usize;
    for x in lo(e.center[0], e.semi[0])..=hi(e.center[0], e.semi[0]) {
        for y in lo(e.center[1], e.semi[1])..=hi(e.center[1], e.semi[1]) {
            for z in lo(e.center[2], e.semi[2])..=hi(e.center[2], e.semi[2]) {
                if e.contains([x as f64, y as f64, z as f64]) {
                    m[(x * s + y) * s + z] = true;
                }
            }
        }
    }
    m
}

fn subset(inner: &[bool], outer: &[bool]) -> bool {
    inner.iter().zip(outer).all(|(i, o)| !*i || *o)
}

fn count(m: &[bool]) -> usize {
    m.iter().filter(|v| **v).count()
}

/// Intensity per (deepest-region level, channel role).
/// Level 0 = background, 1 = outer region only, 2 = middle, 3 = inner.
const INFORMATIVE_PROFILE: [f64; 4] = [0.0, 1.0, 1.5, 2.0];
const OTHER_PROFILES: [[f64; 4]; 3] = [
    [0.0, 0.0, 0.6, 1.0],
    [0.0, 0.0, 0.3, 1.2],
    [0.0, 0.0, 0.8, 0.8],
];

fn channel_profile(spec: &PhantomSpec, channel: usize) -> [f64; 4] {
    if channel == spec.informative_channel {
        INFORMATIVE_PROFILE
    } else {
        // non-informative channels take the remaining profiles in order
        let rank = (0..channel).filter(|&c| c != spec.informative_channel).count();
        OTHER_PROFILES[rank % OTHER_PROFILES.len()]
    }
}

const MAX_ATTEMPTS: usize = 100;

fn draw_regions(spec: &PhantomSpec, rng: &mut Rng) -> Result<[Vec<bool>; 3]> {
    let s = spec.size as f64;
    let (min_a, max_a) = (s / 8.0, s / 3.0);
    let total = spec.size.pow(3) as f64;
    for _attempt in 0..MAX_ATTEMPTS {
        let mut semi = [0.0; 3];
        let mut center = [0.0; 3];
        let mut feasible = true;
        for d in 0..3 {
            semi[d] = rng.uniform_in((0.55 * max_a).max(min_a), max_a);
            let lo = semi[d] + 1.0;
            let hi = s - 1.0 - semi[d];
            if hi <= lo {
                feasible = false;
                break;
            }
            center[d] = rng.uniform_in(lo, hi);
        }
        if !feasible {
            continue;
        }
        let e0 = Ellipsoid { center, semi };
        let m0 = voxel_mask(&e0, spec.size);
        let frac = count(&m0) as f64 / total;
        if !(0.025..=0.38).contains(&frac) {
            continue;
        }
        let inner = |parent: &Ellipsoid, lo_scale: f64, hi_scale: f64, rng: &mut Rng| {
            let mut semi = [0.0; 3];
            let mut center = [0.0; 3];
            for d in 0..3 {
                semi[d] = (parent.semi[d] * rng.uniform_in(lo_scale, hi_scale)).max(min_a * 0.999);
                let slack = (parent.semi[d] - semi[d]).max(0.0);
                center[d] = parent.center[d] + rng.uniform_in(-0.25, 0.25) * slack;
            }
            Ellipsoid { center, semi }
        };
        let e1 = inner(&e0, 0.55, 0.75, rng);
        let m1 = voxel_mask(&e1, spec.size);
        if count(&m1) == 0 || !subset(&m1, &m0) {
            continue;
        }
        let e2 = inner(&e1, 0.5, 0.7, rng);
        let m2 = voxel_mask(&e2, spec.size);
        if count(&m2) == 0 || !subset(&m2, &m1) {
            continue;
        }
        return Ok([m0, m1, m2]);
    }
    Err(Error::generation(format!("no admissible nested ellipsoids after {MAX_ATTEMPTS} retries")))
}

/// Deterministic phantom set: sample `i` only depends on `(spec.seed, i)`.
pub fn generate(spec: &PhantomSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("n must be >= 1".to_string()));
    }
    (0..n).map(|i| generate_one(spec, i)).collect()
}

fn generate_one(spec: &PhantomSpec, index: usize) -> Result<Sample> {
    let mut rng = Rng::derived(spec.seed, index as u64);
    let masks = draw_regions(spec, &mut rng)?;
    let s3 = spec.size.pow(3);

    let mut level = vec![0usize; s3];
    for v in 0..s3 {
        level[v] = if masks[2][v] {
            3
        } else if masks[1][v] {
            2
        } else if masks[0][v] {
            1
        } else {
            0
        };
    }

    let mut vol = vec![0.0; spec.num_modalities * s3];
    for c in 0..spec.num_modalities {
        let profile = channel_profile(spec, c);
        let chan = &mut vol[c * s3..][..s3];
        for (v, lv) in chan.iter_mut().zip(&level) {
            *v = profile[*lv];
        }
        if spec.noise_std > 0.0 {
            for v in chan.iter_mut() {
                *v += spec.noise_std * rng.normal();
            }
        }
    }

    let mut lab = vec![0.0; spec.num_regions * s3];
    for r in 0..spec.num_regions {
        for (l, m) in lab[r * s3..][..s3].iter_mut().zip(&masks[r]) {
            *l = if *m { 1.0 } else { 0.0 };
        }
    }

    let s = spec.size;
    Ok(Sample {
        volume: Tensor::from_vec(&[spec.num_modalities, s, s, s], vol)?,
        label: Tensor::from_vec(&[spec.num_regions, s, s, s], lab)?,
        id: format!("s{index:04}"),
    })
}

/// Z-score normalization per leading-axis channel: mean 0, population std 1.
pub fn znorm(volume: &Tensor) -> Result<Tensor> {
    let c = volume.shape()[0];
    let sp: usize = volume.shape()[1..].iter().product();
    let mut out = volume.to_vec();
    for ci in 0..c {
        let chan = &mut out[ci * sp..][..sp];
        let mean = chan.iter().sum::<f64>() / sp as f64;
        let var = chan.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / sp as f64;
        if var == 0.0 {
            return Err(Error::domain("znorm", format!("channel {ci} has zero variance")));
        }
        let std = var.sqrt();
        for v in chan.iter_mut() {
            *v = (*v - mean) / std;
        }
    }
    Tensor::from_vec(volume.shape(), out)
}

pub fn znorm_sample(sample: &Sample) -> Result<Sample> {
    Ok(Sample {
        volume: znorm(&sample.volume)?,
        label: sample.label.clone(),
        id: sample.id.clone(),
    })
}

/// Voxel index permutation shared by volume and label.
#[derive(Debug, Clone, Copy)]
struct CubeTransform {
    flips: [bool; 3],
    rot_axis: usize,
    rot_quarter: usize,
}

impl CubeTransform {
    /// Destination of a source voxel: flips first, then quarter turns.
    fn apply(&self, s: usize, p: [usize; 3]) -> [usize; 3] {
        let mut q = p;
        for d in 0..3 {
            if self.flips[d] {
                q[d] = s - 1 - q[d];
            }
        }
        let (i, j) = match self.rot_axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for _ in 0..self.rot_quarter {
            let (a, b) = (q[i], q[j]);
            q[i] = b;
            q[j] = s - 1 - a;
        }
        q
    }

    fn is_identity(&self) -> bool {
        !self.flips[0] && !self.flips[1] && !self.flips[2] && self.rot_quarter == 0
    }
}

fn permute_channels(data: &[f64], channels: usize, s: usize, t: &CubeTransform) -> Vec<f64> {
    let sp = s * s * s;
    let mut out = vec![0.0; data.len()];
    for c in 0..channels {
        let src = &data[c * sp..][..sp];
        let dst = &mut out[c * sp..][..sp];
        for x in 0..s {
            for y in 0..s {
                for z in 0..s {
                    let q = t.apply(s, [x, y, z]);
                    dst[(q[0] * s + q[1]) * s + q[2]] = src[(x * s + y) * s + z];
                }
            }
        }
    }
    out
}

/// Random flips (p=0.5 per axis) plus a random multiple-of-90° rotation
/// about a random axis; volume and label are permuted identically.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    let mut rng = Rng::derived(seed, 0xA06);
    let t = CubeTransform {
        flips: [rng.flip(), rng.flip(), rng.flip()],
        rot_axis: rng.below(3),
        rot_quarter: rng.below(4),
    };
    if t.is_identity() {
        return sample.clone();
    }
    let s = sample.volume.shape()[1];
    let vol = sample.volume.with_data(|d| permute_channels(d, sample.volume.shape()[0], s, &t));
    let lab = sample.label.with_data(|d| permute_channels(d, sample.label.shape()[0], s, &t));
    Sample {
        volume: Tensor::from_vec(sample.volume.shape(), vol).expect("shape unchanged"),
        label: Tensor::from_vec(sample.label.shape(), lab).expect("shape unchanged"),
        id: sample.id.clone(),
    }
}

/// Uniformly random cubic crop applied identically to volume and label.
pub fn crop(sample: &Sample, size: usize, seed: u64) -> Result<Sample> {
    let s = sample.volume.shape()[1];
    if size > s {
        return Err(Error::config(format!("crop size {size} exceeds volume size {s}")));
    }
    if size == s {
        return Ok(sample.clone());
    }
    let mut rng = Rng::derived(seed, 0xC207);
    let corner = [rng.below(s - size + 1), rng.below(s - size + 1), rng.below(s - size + 1)];
    let take = |t: &Tensor| -> Tensor {
        let c = t.shape()[0];
        let sp = s * s * s;
        let mut out = vec![0.0; c * size * size * size];
        t.with_data(|d| {
            let mut di = 0;
            for ci in 0..c {
                let chan = &d[ci * sp..][..sp];
                for x in 0..size {
                    for y in 0..size {
                        let base = ((corner[0] + x) * s + corner[1] + y) * s + corner[2];
                        out[di..di + size].copy_from_slice(&chan[base..base + size]);
                        di += size;
                    }
                }
            }
        });
        Tensor::from_vec(&[c, size, size, size], out).expect("consistent crop shape")
    };
    Ok(Sample { volume: take(&sample.volume), label: take(&sample.label), id: sample.id.clone() })
}

/// Train/val/test counts at the 80/15/5 split.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = n * 80 / 100;
    let val = n * 15 / 100;
    (train, val, n - train - val)
}

/// Check label nesting: channel r+1 implies channel r.
pub fn nesting_holds(label: &Tensor) -> bool {
    let c = label.shape()[0];
    let sp: usize = label.shape()[1..].iter().product();
    label.with_data(|d| {
        for r in 0..c.saturating_sub(1) {
            let outer = &d[r * sp..][..sp];
            let inner = &d[(r + 1) * sp..][..sp];
            if inner.iter().zip(outer).any(|(i, o)| *i > 0.5 && *o < 0.5) {
                return false;
            }
        }
        true
    })
}
