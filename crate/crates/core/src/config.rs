//! Line-oriented experiment configuration: `key = value` with `#`
//! comments and dotted section keys. Unknown keys are rejected; every
//! default is visible in the generated dump.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::format_g6;
use crate::losses::LossWeights;
use crate::rng::fnv1a;

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Full,
    MissingModality(usize),
    GaussianNoise(f64),
}

impl Scenario {
    pub fn label(&self) -> String {
        match self {
            Scenario::Full => "full".to_string(),
            Scenario::MissingModality(i) => format!("missing_m{i}"),
            Scenario::GaussianNoise(s) => format!("noise_{}", format_g6(*s)),
        }
    }

    fn parse(text: &str) -> Result<Scenario> {
        if text == "full" {
            return Ok(Scenario::Full);
        }
        if let Some(idx) = text.strip_prefix("missing:") {
            let i: usize = idx
                .parse()
                .map_err(|_| Error::config(format!("bad modality index in scenario '{text}'")))?;
            return Ok(Scenario::MissingModality(i));
        }
        if let Some(std) = text.strip_prefix("noise:") {
            let s: f64 = std
                .parse()
                .map_err(|_| Error::config(format!("bad noise std in scenario '{text}'")))?;
            return Ok(Scenario::GaussianNoise(s));
        }
        Err(Error::config(format!(
            "unknown scenario '{text}' (expected full, missing:<idx> or noise:<std>)"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub size: usize,
    pub n_samples: usize,
    pub num_modalities: usize,
    pub num_regions: usize,
    pub noise_std: f64,
    pub informative_channel: usize,
    pub seed: u64,
    /// When set, samples are loaded from this directory instead of being
    /// generated in memory.
    pub dir: Option<PathBuf>,
    pub crop: usize,
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub use_mmcf: bool,
    pub use_dds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub val_interval: usize,
    pub early_stop_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    pub epochs: usize,
    pub lr: f64,
    pub kl_beta: f64,
    pub rho_init: f64,
    pub t_train: usize,
    pub t_infer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub ece_bins: usize,
    pub threshold: f64,
    pub noise_std: f64,
    pub scenarios: Vec<Scenario>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub alpha_values: Vec<f64>,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub n_models: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub threads: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub losses: LossWeights,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub ensemble: EnsembleConfig,
}

impl PartialEq for LossWeights {
    fn eq(&self, other: &Self) -> bool {
        self.lambda1 == other.lambda1
            && self.lambda2 == other.lambda2
            && self.distill_weight == other.distill_weight
            && self.dice_smooth == other.dice_smooth
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            threads: 1,
            data: DataConfig {
                size: 32,
                n_samples: 50,
                num_modalities: 4,
                num_regions: 3,
                noise_std: 0.1,
                informative_channel: 3,
                seed: 42,
                dir: None,
                crop: 24,
                augment: true,
            },
            model: ModelConfig { use_mmcf: true, use_dds: true },
            stage1: Stage1Config {
                epochs: 200,
                lr: 1e-3,
                weight_decay: 1e-4,
                batch_size: 2,
                val_interval: 5,
                early_stop_dice: None,
            },
            losses: LossWeights::default(),
            stage2: Stage2Config {
                epochs: 30,
                lr: 1e-4,
                kl_beta: 1e-5,
                rho_init: -5.0,
                t_train: 1,
                t_infer: 20,
            },
            eval: EvalConfig {
                ece_bins: 10,
                threshold: 0.5,
                noise_std: 0.1,
                scenarios: vec![Scenario::Full],
            },
            sweep: SweepConfig { alpha_values: vec![0.5, 1.0, 1.5, 2.0], n_seeds: 3 },
            ensemble: EnsembleConfig { n_models: 3 },
        }
    }
}

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

impl ExperimentConfig {
    /// Canonical dump; parses back to an identical config.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# experiment configuration (all keys shown with their values)");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(s, "\n# synthetic dataset");
        let _ = writeln!(s, "data.size = {}", self.data.size);
        let _ = writeln!(s, "data.n_samples = {}", self.data.n_samples);
        let _ = writeln!(s, "data.num_modalities = {}", self.data.num_modalities);
        let _ = writeln!(s, "data.num_regions = {}", self.data.num_regions);
        let _ = writeln!(s, "data.noise_std = {}", format_g6(self.data.noise_std));
        let _ = writeln!(s, "data.informative_channel = {}", self.data.informative_channel);
        let _ = writeln!(s, "data.seed = {}", self.data.seed);
        let _ = writeln!(
            s,
            "data.dir = {}",
            self.data.dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        );
        let _ = writeln!(s, "data.crop = {}", self.data.crop);
        let _ = writeln!(s, "data.augment = {}", fmt_bool(self.data.augment));
        let _ = writeln!(s, "\n# model wiring");
        let _ = writeln!(s, "model.use_mmcf = {}", fmt_bool(self.model.use_mmcf));
        let _ = writeln!(s, "model.use_dds = {}", fmt_bool(self.model.use_dds));
        let _ = writeln!(s, "\n# deterministic training stage");
        let _ = writeln!(s, "stage1.epochs = {}", self.stage1.epochs);
        let _ = writeln!(s, "stage1.lr = {}", format_g6(self.stage1.lr));
        let _ = writeln!(s, "stage1.weight_decay = {}", format_g6(self.stage1.weight_decay));
        let _ = writeln!(s, "stage1.batch_size = {}", self.stage1.batch_size);
        let _ = writeln!(s, "stage1.val_interval = {}", self.stage1.val_interval);
        let _ = writeln!(
            s,
            "stage1.early_stop_dice = {}",
            self.stage1.early_stop_dice.map(format_g6).unwrap_or_default()
        );
        let _ = writeln!(s, "\n# loss weights");
        let _ = writeln!(s, "losses.lambda1 = {}", format_g6(self.losses.lambda1));
        let _ = writeln!(s, "losses.lambda2 = {}", format_g6(self.losses.lambda2));
        let _ = writeln!(s, "losses.distill_weight = {}", format_g6(self.losses.distill_weight));
        let _ = writeln!(s, "losses.dice_smooth = {}", format_g6(self.losses.dice_smooth));
        let _ = writeln!(s, "\n# variational fine-tuning stage");
        let _ = writeln!(s, "stage2.epochs = {}", self.stage2.epochs);
        let _ = writeln!(s, "stage2.lr = {}", format_g6(self.stage2.lr));
        let _ = writeln!(s, "stage2.kl_beta = {}", format_g6(self.stage2.kl_beta));
        let _ = writeln!(s, "stage2.rho_init = {}", format_g6(self.stage2.rho_init));
        let _ = writeln!(s, "stage2.T_train = {}", self.stage2.t_train);
        let _ = writeln!(s, "stage2.T_infer = {}", self.stage2.t_infer);
        let _ = writeln!(s, "\n# evaluation");
        let _ = writeln!(s, "eval.ece_bins = {}", self.eval.ece_bins);
        let _ = writeln!(s, "eval.threshold = {}", format_g6(self.eval.threshold));
        let _ = writeln!(s, "eval.noise_std = {}", format_g6(self.eval.noise_std));
        let scenarios: Vec<String> = self
            .eval
            .scenarios
            .iter()
            .map(|sc| match sc {
                Scenario::Full => "full".to_string(),
                Scenario::MissingModality(i) => format!("missing:{i}"),
                Scenario::GaussianNoise(v) => format!("noise:{}", format_g6(*v)),
            })
            .collect();
        let _ = writeln!(s, "eval.scenarios = {}", scenarios.join(","));
        let _ = writeln!(s, "\n# sensitivity sweep");
        let alphas: Vec<String> = self.sweep.alpha_values.iter().map(|a| format_g6(*a)).collect();
        let _ = writeln!(s, "sweep.alpha_values = {}", alphas.join(","));
        let _ = writeln!(s, "sweep.n_seeds = {}", self.sweep.n_seeds);
        let _ = writeln!(s, "\n# deep ensemble comparison");
        let _ = writeln!(s, "ensemble.n_models = {}", self.ensemble.n_models);
        s
    }

    /// Hash of the architecture- and data-defining keys; checked when a
    /// checkpoint is loaded back for further work.
    pub fn compat_hash(&self) -> u64 {
        let mut s = String::new();
        let _ = write!(
            s,
            "size={};n={};noise={};info={};dseed={};dir={};mmcf={};dds={}",
            self.data.size,
            self.data.n_samples,
            format_g6(self.data.noise_std),
            self.data.informative_channel,
            self.data.seed,
            self.data.dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            self.model.use_mmcf,
            self.model.use_dds
        );
        fnv1a(s.as_bytes())
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {lineno}: expected 'key = value', got '{line}'"))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.assign(key, value)
                .map_err(|e| Error::config(format!("line {lineno}, key '{key}': {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("config file {}: {e}", path.display())))?;
        ExperimentConfig::parse(&text)
    }

    fn assign(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
            v.parse::<T>().map_err(|_| format!("cannot parse '{v}' as {what}"))
        }
        fn boolean(v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(format!("cannot parse '{v}' as bool (true/false)")),
            }
        }
        match key {
            "seed" => self.seed = num(value, "u64")?,
            "threads" => self.threads = num(value, "usize")?,
            "data.size" => self.data.size = num(value, "usize")?,
            "data.n_samples" => self.data.n_samples = num(value, "usize")?,
            "data.num_modalities" => self.data.num_modalities = num(value, "usize")?,
            "data.num_regions" => self.data.num_regions = num(value, "usize")?,
            "data.noise_std" => self.data.noise_std = num(value, "f64")?,
            "data.informative_channel" => self.data.informative_channel = num(value, "usize")?,
            "data.seed" => self.data.seed = num(value, "u64")?,
            "data.dir" => {
                self.data.dir = if value.is_empty() { None } else { Some(PathBuf::from(value)) }
            }
            "data.crop" => self.data.crop = num(value, "usize")?,
            "data.augment" => self.data.augment = boolean(value)?,
            "model.use_mmcf" => self.model.use_mmcf = boolean(value)?,
            "model.use_dds" => self.model.use_dds = boolean(value)?,
            "stage1.epochs" => self.stage1.epochs = num(value, "usize")?,
            "stage1.lr" => self.stage1.lr = num(value, "f64")?,
            "stage1.weight_decay" => self.stage1.weight_decay = num(value, "f64")?,
            "stage1.batch_size" => self.stage1.batch_size = num(value, "usize")?,
            "stage1.val_interval" => self.stage1.val_interval = num(value, "usize")?,
            "stage1.early_stop_dice" => {
                self.stage1.early_stop_dice =
                    if value.is_empty() { None } else { Some(num(value, "f64")?) }
            }
            "losses.lambda1" => self.losses.lambda1 = num(value, "f64")?,
            "losses.lambda2" => self.losses.lambda2 = num(value, "f64")?,
            "losses.distill_weight" => self.losses.distill_weight = num(value, "f64")?,
            "losses.dice_smooth" => self.losses.dice_smooth = num(value, "f64")?,
            "stage2.epochs" => self.stage2.epochs = num(value, "usize")?,
            "stage2.lr" => self.stage2.lr = num(value, "f64")?,
            "stage2.kl_beta" => self.stage2.kl_beta = num(value, "f64")?,
            "stage2.rho_init" => self.stage2.rho_init = num(value, "f64")?,
            "stage2.T_train" => self.stage2.t_train = num(value, "usize")?,
            "stage2.T_infer" => self.stage2.t_infer = num(value, "usize")?,
            "eval.ece_bins" => self.eval.ece_bins = num(value, "usize")?,
            "eval.threshold" => self.eval.threshold = num(value, "f64")?,
            "eval.noise_std" => self.eval.noise_std = num(value, "f64")?,
            "eval.scenarios" => {
                let mut out = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    if part.is_empty() {
                        continue;
                    }
                    out.push(Scenario::parse(part).map_err(|e| e.to_string())?);
                }
                if out.is_empty() {
                    return Err("scenario list is empty".to_string());
                }
                self.eval.scenarios = out;
            }
            "sweep.alpha_values" => {
                let mut out = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    if part.is_empty() {
                        continue;
                    }
                    out.push(num::<f64>(part, "f64")?);
                }
                if out.is_empty() {
                    return Err("alpha list is empty".to_string());
                }
                self.sweep.alpha_values = out;
            }
            "sweep.n_seeds" => self.sweep.n_seeds = num(value, "usize")?,
            "ensemble.n_models" => self.ensemble.n_models = num(value, "usize")?,
            _ => return Err("unknown key".to_string()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.threads == 0 {
            return fail("threads must be >= 1".to_string());
        }
        if self.data.num_modalities != 4 {
            return fail(format!("data.num_modalities must be 4, got {}", self.data.num_modalities));
        }
        if self.data.num_regions != 3 {
            return fail(format!("data.num_regions must be 3, got {}", self.data.num_regions));
        }
        if self.data.size < 16 || self.data.size % 8 != 0 {
            return fail(format!("data.size must be >= 16 and divisible by 8, got {}", self.data.size));
        }
        if self.data.crop == 0 || self.data.crop % 8 != 0 || self.data.crop > self.data.size {
            return fail(format!(
                "data.crop must be divisible by 8 and <= data.size, got {}",
                self.data.crop
            ));
        }
        if self.data.informative_channel >= self.data.num_modalities {
            return fail(format!(
                "data.informative_channel must be < {}, got {}",
                self.data.num_modalities, self.data.informative_channel
            ));
        }
        if self.data.noise_std < 0.0 || self.eval.noise_std < 0.0 {
            return fail("noise std values must be >= 0".to_string());
        }
        if self.data.n_samples < 3 {
            return fail(format!("data.n_samples must be >= 3, got {}", self.data.n_samples));
        }
        if self.stage1.lr <= 0.0 {
            return fail(format!("stage1.lr must be > 0, got {}", self.stage1.lr));
        }
        if self.stage1.weight_decay < 0.0 {
            return fail("stage1.weight_decay must be >= 0".to_string());
        }
        if self.stage1.batch_size == 0 {
            return fail("stage1.batch_size must be >= 1".to_string());
        }
        if self.stage1.val_interval == 0 {
            return fail("stage1.val_interval must be >= 1".to_string());
        }
        if let Some(t) = self.stage1.early_stop_dice {
            if !(0.0..=1.0).contains(&t) {
                return fail(format!("stage1.early_stop_dice must be in [0,1], got {t}"));
            }
        }
        if self.losses.dice_smooth <= 0.0 {
            return fail("losses.dice_smooth must be > 0".to_string());
        }
        if self.stage2.t_train == 0 {
            return fail("stage2.T_train must be >= 1".to_string());
        }
        if self.stage2.t_infer == 0 {
            return fail("stage2.T_infer must be >= 1".to_string());
        }
        if self.stage2.lr >= self.stage1.lr {
            return fail(format!(
                "stage2.lr ({}) must be lower than stage1.lr ({})",
                self.stage2.lr, self.stage1.lr
            ));
        }
        if self.stage2.kl_beta < 0.0 {
            return fail("stage2.kl_beta must be >= 0".to_string());
        }
        if self.eval.ece_bins == 0 {
            return fail("eval.ece_bins must be >= 1".to_string());
        }
        if !(0.0 < self.eval.threshold && self.eval.threshold < 1.0) {
            return fail(format!("eval.threshold must be in (0,1), got {}", self.eval.threshold));
        }
        for sc in &self.eval.scenarios {
            match sc {
                Scenario::MissingModality(i) if *i >= self.data.num_modalities => {
                    return fail(format!("scenario missing:{i} exceeds modality count"));
                }
                Scenario::GaussianNoise(s) if *s < 0.0 => {
                    return fail("scenario noise std must be >= 0".to_string());
                }
                _ => {}
            }
        }
        if self.sweep.n_seeds == 0 {
            return fail("sweep.n_seeds must be >= 1".to_string());
        }
        if self.ensemble.n_models < 2 {
            return fail(format!("ensemble.n_models must be >= 2, got {}", self.ensemble.n_models));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.stage2.t_infer, 20);
        assert_eq!(cfg.stage2.t_train, 1);
        assert_eq!(cfg.losses.lambda1, 0.4);
        assert_eq!(cfg.losses.lambda2, 0.2);
        assert_eq!(cfg.stage1.weight_decay, 1e-4);
    }

    #[test]
    fn dump_round_trips() {
        let cfg = ExperimentConfig::default();
        let dump = cfg.dump();
        assert!(dump.contains("losses.lambda1 = 0.4"), "{dump}");
        assert!(dump.contains("stage2.T_infer = 20"));
        let back = ExperimentConfig::parse(&dump).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = ExperimentConfig::parse("\nstage1.lr = 1e-3\nbogus.key = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("bogus.key"), "{msg}");
    }

    #[test]
    fn bad_value_names_key_and_line() {
        let err = ExperimentConfig::parse("stage1.lr = fast").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1") && msg.contains("stage1.lr"), "{msg}");
    }

    #[test]
    fn t_train_zero_is_constraint_error() {
        let err = ExperimentConfig::parse("stage2.T_train = 0").unwrap_err();
        assert!(err.to_string().contains("T_train"), "{err}");
    }

    #[test]
    fn stage2_lr_must_be_below_stage1() {
        let err = ExperimentConfig::parse("stage2.lr = 1e-2").unwrap_err();
        assert!(err.to_string().contains("stage2.lr"), "{err}");
    }

    #[test]
    fn comments_and_overrides() {
        let text = "# comment\nstage1.epochs = 7  # trailing\nstage1.epochs = 9\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.stage1.epochs, 9);
    }

    #[test]
    fn scenario_grammar() {
        let cfg =
            ExperimentConfig::parse("eval.scenarios = full, missing:2, noise:0.3").unwrap();
        assert_eq!(
            cfg.eval.scenarios,
            vec![Scenario::Full, Scenario::MissingModality(2), Scenario::GaussianNoise(0.3)]
        );
        assert!(ExperimentConfig::parse("eval.scenarios = missing:9").is_err());
        assert_eq!(Scenario::GaussianNoise(0.1).label(), "noise_0.1");
        assert_eq!(Scenario::MissingModality(3).label(), "missing_m3");
    }

    #[test]
    fn compat_hash_tracks_data_and_model_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.stage1.epochs = 3;
        assert_eq!(a.compat_hash(), b.compat_hash());
        let mut c = a.clone();
        c.model.use_dds = false;
        assert_ne!(a.compat_hash(), c.compat_hash());
        let mut d = a.clone();
        d.data.seed = 7;
        assert_ne!(a.compat_hash(), d.compat_hash());
    }

    #[test]
    fn crop_must_divide_by_8() {
        assert!(ExperimentConfig::parse("data.crop = 20").is_err());
        assert!(ExperimentConfig::parse("data.crop = 16").is_ok());
    }
}
