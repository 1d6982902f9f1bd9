//! Experiment orchestration: two-stage training, scenario perturbations,
//! test-set evaluation, the ablation table, the alpha-initialization
//! sweep, the deep-ensemble comparison and the gradient-check suite.
//!
//! Every run derives all randomness from config seeds, so any command
//! rerun with the same config produces byte-identical artifacts.

use std::fmt::Write as _;

use crate::backbone::{Model, ModelFlags, MODALITIES, REGIONS};
use crate::bayes::{self, VariationalHead};
use crate::config::{ExperimentConfig, Scenario};
use crate::datagen::{self, PhantomSpec, Sample};
use crate::error::{Error, Result};
use crate::io::{format_g6, Checkpoint, Split};
use crate::losses::{self, LossWeights};
use crate::metrics::{self, MetricReport};
use crate::rng::Rng;
use crate::tensor::{concat, cosine_lr, grad_check, grad_check_above, no_grad, AdamW, Tensor};

// ── dataset assembly ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn volume_size(&self) -> usize {
        self.train.first().or(self.val.first()).or(self.test.first()).map_or(0, |s| s.volume.shape()[1])
    }
}

fn phantom_spec(cfg: &ExperimentConfig) -> PhantomSpec {
    PhantomSpec {
        size: cfg.data.size,
        num_modalities: cfg.data.num_modalities,
        num_regions: cfg.data.num_regions,
        noise_std: cfg.data.noise_std,
        informative_channel: cfg.data.informative_channel,
        seed: cfg.data.seed,
    }
}

/// Normalized samples with their split tags, generated in memory or read
/// from `data.dir`.
pub fn build_samples(cfg: &ExperimentConfig) -> Result<Vec<(Sample, Split)>> {
    if let Some(dir) = &cfg.data.dir {
        return crate::io::load_dataset(dir, cfg.data.num_modalities);
    }
    let raw = datagen::generate(&phantom_spec(cfg), cfg.data.n_samples)?;
    let (n_train, n_val, _) = datagen::split_counts(raw.len());
    raw.into_iter()
        .enumerate()
        .map(|(i, s)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            Ok((datagen::znorm_sample(&s)?, split))
        })
        .collect()
}

pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let mut ds = Dataset { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (sample, split) in build_samples(cfg)? {
        match split {
            Split::Train => ds.train.push(sample),
            Split::Val => ds.val.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    if ds.train.is_empty() {
        return Err(Error::config("dataset has no training samples".to_string()));
    }
    Ok(ds)
}

fn stack(tensors: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![tensors.len()];
    shape.extend_from_slice(tensors[0].shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    for t in tensors {
        t.with_data(|d| data.extend_from_slice(d));
    }
    Tensor::from_vec(&shape, data)
}

fn model_flags(cfg: &ExperimentConfig) -> ModelFlags {
    ModelFlags { use_fusion: cfg.model.use_mmcf, use_gates: cfg.model.use_dds }
}

// ── scenarios ────────────────────────────────────────────────────────

/// Perturb a normalized volume: missing modalities become all-zero
/// channels (the per-modality z-scored mean); noise adds seeded
/// Gaussians to every channel.
pub fn apply_scenario(volume: &Tensor, scenario: &Scenario, seed: u64) -> Tensor {
    match scenario {
        Scenario::Full => volume.detach(),
        Scenario::MissingModality(i) => {
            let sp: usize = volume.shape()[1..].iter().product();
            let mut data = volume.to_vec();
            data[i * sp..(i + 1) * sp].fill(0.0);
            Tensor::from_vec(volume.shape(), data).expect("shape unchanged")
        }
        Scenario::GaussianNoise(std) => {
            if *std == 0.0 {
                return volume.detach();
            }
            let mut rng = Rng::derived(seed, 0x5CE2);
            let mut data = volume.to_vec();
            for v in data.iter_mut() {
                *v += std * rng.normal();
            }
            Tensor::from_vec(volume.shape(), data).expect("shape unchanged")
        }
    }
}

// ── stage 1 training ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub best_val_dice: f64,
    pub best_epoch: u32,
    pub epochs_run: usize,
    pub final_alpha: Option<f64>,
    pub final_gamma: Option<f64>,
    pub log_csv: String,
}

/// Mean foreground Dice at the configured threshold over a sample list.
pub fn mean_dice(model: &Model, samples: &[Sample], threshold: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::config("validation requires at least one sample".to_string()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let x = stack(&[&s.volume])?;
        let out = no_grad(|| model.forward(&x))?;
        let probs = no_grad(|| out.logits_main.sigmoid()).to_vec();
        let labels = s.label.to_vec();
        let sp: usize = s.label.shape()[1..].iter().product();
        for r in 0..REGIONS {
            let pred: Vec<bool> = probs[r * sp..(r + 1) * sp].iter().map(|p| *p > threshold).collect();
            let gt: Vec<bool> = labels[r * sp..(r + 1) * sp].iter().map(|v| *v > 0.5).collect();
            total += metrics::dice_score(&pred, &gt);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn train_stage1(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let dataset = prepare_dataset(cfg)?;
    train_stage1_with(cfg, &dataset, cfg.seed, 0.0)
}

/// Stage-1 loop with an explicit run seed and alpha initialization
/// (reused by the sweep and ensemble harnesses).
pub fn train_stage1_with(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    run_seed: u64,
    alpha_init: f64,
) -> Result<TrainOutcome> {
    let flags = model_flags(cfg);
    let model = Model::with_alpha(flags, run_seed, alpha_init);
    let params = model.params();
    let named = model.named_params();
    let mut opt = AdamW::new(&params, cfg.stage1.lr, cfg.stage1.weight_decay);
    let hash = cfg.compat_hash();

    let mut log = String::from("epoch,lr,loss,seg,distill,unc_mean,alpha,gamma,val_dice\n");
    let mut best_dice = f64::NEG_INFINITY;
    let mut best_epoch = 0u32;
    let mut best: Option<Checkpoint> = None;
    let mut epochs_run = 0usize;

    if cfg.stage1.epochs == 0 {
        let dice = if dataset.val.is_empty() { 0.0 } else { mean_dice(&model, &dataset.val, cfg.eval.threshold)? };
        let ckpt = Checkpoint::from_named(&named, hash, run_seed, 0, dice);
        return Ok(TrainOutcome {
            checkpoint: ckpt,
            best_val_dice: dice,
            best_epoch: 0,
            epochs_run: 0,
            final_alpha: model.alpha(),
            final_gamma: model.gamma(),
            log_csv: log,
        });
    }

    let n_train = dataset.train.len();
    'epochs: for epoch in 0..cfg.stage1.epochs {
        let lr = cosine_lr(cfg.stage1.lr, epoch, cfg.stage1.epochs);
        opt.lr = lr;
        let mut order: Vec<usize> = (0..n_train).collect();
        Rng::derived(run_seed, 0x54F0 + epoch as u64).shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut seg_sum = 0.0;
        let mut distill_sum = 0.0;
        let mut unc_sum = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.stage1.batch_size).enumerate() {
            let mut volumes = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let salt = ((epoch as u64) << 24) ^ (idx as u64);
                let sample_seed = Rng::derived(run_seed, 0xDA7A ^ salt).next_u64();
                let mut s = datagen::crop(&dataset.train[idx], cfg.data.crop, sample_seed)?;
                if cfg.data.augment {
                    s = datagen::augment(&s, sample_seed.wrapping_add(1));
                }
                volumes.push(s.volume);
                labels.push(s.label);
            }
            let x = stack(&volumes.iter().collect::<Vec<_>>())?;
            let y = stack(&labels.iter().collect::<Vec<_>>())?;
            let out = model.forward(&x)?;
            let parts = losses::total_loss(&out, &y, &cfg.losses)?;
            let loss_val = parts.total.item();
            if !loss_val.is_finite() {
                return Err(Error::domain(
                    "train_stage1",
                    format!(
                        "non-finite loss at epoch {epoch} step {step}: total={loss_val} seg={} distill={:?}",
                        parts.seg, parts.distill
                    ),
                ));
            }
            AdamW::zero_grads(&params);
            crate::tensor::backward(&parts.total)?;
            opt.step(&params);

            loss_sum += loss_val;
            seg_sum += parts.seg;
            distill_sum += parts.distill.unwrap_or(0.0);
            if let Some(unc) = &out.unc_map {
                unc_sum += unc.with_data(|d| d.iter().sum::<f64>() / d.len() as f64);
            }
            batches += 1;
        }
        epochs_run = epoch + 1;

        let do_validate = (epoch + 1) % cfg.stage1.val_interval == 0 || epoch + 1 == cfg.stage1.epochs;
        let mut dice_cell = String::new();
        if do_validate && !dataset.val.is_empty() {
            let dice = mean_dice(&model, &dataset.val, cfg.eval.threshold)?;
            dice_cell = format_g6(dice);
            if dice > best_dice {
                best_dice = dice;
                best_epoch = (epoch + 1) as u32;
                best = Some(Checkpoint::from_named(&named, hash, run_seed, best_epoch, dice));
            }
            if let Some(target) = cfg.stage1.early_stop_dice {
                if dice >= target {
                    let _ = writeln!(
                        log,
                        "{},{},{},{},{},{},{},{},{}",
                        epoch + 1,
                        format_g6(lr),
                        format_g6(loss_sum / batches as f64),
                        format_g6(seg_sum / batches as f64),
                        format_g6(distill_sum / batches as f64),
                        format_g6(unc_sum / batches.max(1) as f64),
                        model.alpha().map(format_g6).unwrap_or_default(),
                        model.gamma().map(format_g6).unwrap_or_default(),
                        dice_cell
                    );
                    break 'epochs;
                }
            }
        }
        let _ = writeln!(
            log,
            "{},{},{},{},{},{},{},{},{}",
            epoch + 1,
            format_g6(lr),
            format_g6(loss_sum / batches as f64),
            format_g6(seg_sum / batches as f64),
            format_g6(distill_sum / batches as f64),
            format_g6(unc_sum / batches.max(1) as f64),
            model.alpha().map(format_g6).unwrap_or_default(),
            model.gamma().map(format_g6).unwrap_or_default(),
            dice_cell
        );
    }

    let final_alpha = model.alpha();
    let final_gamma = model.gamma();
    let checkpoint = match best {
        Some(c) => c,
        // never validated (no val split): final state is the artifact
        None => Checkpoint::from_named(&named, hash, run_seed, epochs_run as u32, f64::NAN),
    };
    Ok(TrainOutcome {
        checkpoint,
        best_val_dice: best_dice,
        best_epoch,
        epochs_run,
        final_alpha,
        final_gamma,
        log_csv: log,
    })
}

// ── checkpoint loading ───────────────────────────────────────────────

pub enum LoadedModel {
    Deterministic(Model),
    Bayesian { body: Model, head: VariationalHead },
}

fn copy_into(model: &Model, ckpt: &Checkpoint, skip_main_head: bool) -> Result<()> {
    for (name, tensor) in model.named_params() {
        if skip_main_head && name.starts_with("backbone.main_head") {
            continue;
        }
        let (shape, data) = ckpt.get(&name).ok_or_else(|| {
            Error::checkpoint(format!("parameter '{name}' missing from checkpoint"))
        })?;
        if shape != tensor.shape() {
            return Err(Error::checkpoint(format!(
                "parameter '{name}' has shape {:?} in checkpoint, model expects {:?}",
                shape,
                tensor.shape()
            )));
        }
        tensor.set_data(data);
    }
    Ok(())
}

/// Rebuild a model (deterministic or Bayesian-headed) from a checkpoint.
pub fn load_model(ckpt: &Checkpoint, cfg: &ExperimentConfig, allow_hash_mismatch: bool) -> Result<LoadedModel> {
    if !allow_hash_mismatch && ckpt.config_hash != cfg.compat_hash() {
        return Err(Error::checkpoint(format!(
            "config hash mismatch: checkpoint {:#x} vs current {:#x} (use force to override)",
            ckpt.config_hash,
            cfg.compat_hash()
        )));
    }
    let model = Model::new(model_flags(cfg), ckpt.seed);
    if ckpt.is_bayesian() {
        copy_into(&model, ckpt, true)?;
        let fetch = |name: &str| -> Result<Tensor> {
            let (shape, data) = ckpt
                .get(name)
                .ok_or_else(|| Error::checkpoint(format!("missing '{name}' in Bayesian checkpoint")))?;
            Tensor::param(shape, data.to_vec())
        };
        let head = VariationalHead {
            mu_w: fetch("head.mu_weight")?,
            mu_b: fetch("head.mu_bias")?,
            rho_w: fetch("head.rho_weight")?,
            rho_b: fetch("head.rho_bias")?,
        };
        // point the deterministic head at the posterior mean so plain
        // forwards of the body remain meaningful
        model.backbone.main_head.weight.set_data(&head.mu_w.to_vec());
        model.backbone.main_head.bias.set_data(&head.mu_b.to_vec());
        Ok(LoadedModel::Bayesian { body: model, head })
    } else {
        copy_into(&model, ckpt, false)?;
        Ok(LoadedModel::Deterministic(model))
    }
}

// ── stage 2 fine-tuning ──────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub log_csv: String,
    /// Mean KL per epoch, in order.
    pub kl_per_epoch: Vec<f64>,
}

pub fn finetune_stage2(
    cfg: &ExperimentConfig,
    stage1: &Checkpoint,
    allow_hash_mismatch: bool,
) -> Result<FinetuneOutcome> {
    let model = match load_model(stage1, cfg, allow_hash_mismatch)? {
        LoadedModel::Deterministic(m) => m,
        LoadedModel::Bayesian { .. } => {
            return Err(Error::checkpoint("stage-2 input must be a deterministic checkpoint".to_string()))
        }
    };
    let dataset = prepare_dataset(cfg)?;
    let run_seed = cfg.seed;

    // The body is frozen, so per-sample head inputs are computed once.
    let mut features = Vec::with_capacity(dataset.train.len());
    let mut targets = Vec::with_capacity(dataset.train.len());
    for s in &dataset.train {
        let x = stack(&[&s.volume])?;
        let out = no_grad(|| model.forward(&x))?;
        features.push(out.head_input.detach());
        targets.push(stack(&[&s.label])?);
    }

    let head = VariationalHead::from_deterministic(
        &model.backbone.main_head.weight,
        &model.backbone.main_head.bias,
        cfg.stage2.rho_init,
    )?;
    let hparams = head.all_params();
    let mut opt = AdamW::new(&hparams, cfg.stage2.lr, 0.0);

    let mut log = String::from("epoch,lr,elbo,seg,kl\n");
    let mut kl_per_epoch = Vec::with_capacity(cfg.stage2.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.stage2.epochs {
        let lr = cosine_lr(cfg.stage2.lr, epoch, cfg.stage2.epochs);
        opt.lr = lr;
        let mut order: Vec<usize> = (0..features.len()).collect();
        Rng::derived(run_seed, 0x57A2 + epoch as u64).shuffle(&mut order);
        let (mut elbo_sum, mut seg_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        for &idx in &order {
            let draw_seed = Rng::derived(run_seed, 0xE1B0 ^ step).next_u64();
            let parts = bayes::elbo_loss(
                &head,
                &features[idx],
                &targets[idx],
                cfg.stage2.kl_beta,
                cfg.losses.dice_smooth,
                cfg.stage2.t_train,
                draw_seed,
            )?;
            let v = parts.total.item();
            if !v.is_finite() {
                return Err(Error::domain(
                    "finetune_stage2",
                    format!("non-finite ELBO at epoch {epoch}: seg={} kl={}", parts.seg, parts.kl),
                ));
            }
            AdamW::zero_grads(&hparams);
            crate::tensor::backward(&parts.total)?;
            opt.step(&hparams);
            elbo_sum += v;
            seg_sum += parts.seg;
            kl_sum += parts.kl;
            step += 1;
        }
        let n = order.len().max(1) as f64;
        kl_per_epoch.push(kl_sum / n);
        let _ = writeln!(
            log,
            "{},{},{},{},{}",
            epoch + 1,
            format_g6(lr),
            format_g6(elbo_sum / n),
            format_g6(seg_sum / n),
            format_g6(kl_sum / n)
        );
    }

    let mut named: Vec<(String, Tensor)> = model
        .named_params()
        .into_iter()
        .filter(|(n, _)| !n.starts_with("backbone.main_head"))
        .collect();
    named.extend(head.params());
    let checkpoint = Checkpoint::from_named(
        &named,
        cfg.compat_hash(),
        run_seed,
        cfg.stage2.epochs as u32,
        stage1.best_metric,
    );
    Ok(FinetuneOutcome { checkpoint, log_csv: log, kl_per_epoch })
}

// ── evaluation ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub t_infer: usize,
    pub ece_bins: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl EvalOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> EvalOptions {
        EvalOptions {
            t_infer: cfg.stage2.t_infer,
            ece_bins: cfg.eval.ece_bins,
            threshold: cfg.eval.threshold,
            seed: cfg.seed,
        }
    }
}

/// Per-case metric record prior to aggregation.
#[derive(Debug, Clone)]
pub struct CaseMetrics {
    pub scenario: String,
    pub case_id: String,
    pub dice: Vec<f64>,
    pub hd95: Vec<Option<f64>>,
    pub ece: f64,
    pub nll: f64,
    pub unc_auc: Option<f64>,
}

pub enum Predictor<'a> {
    Deterministic(&'a Model),
    Bayesian { body: &'a Model, head: &'a VariationalHead },
    Ensemble(&'a [Model]),
    /// Test hook: probabilities equal the ground-truth labels.
    Oracle,
}

impl Predictor<'_> {
    /// Probabilities (and optional per-voxel variance) for one case.
    fn predict(&self, x: &Tensor, label: &Tensor, opts: &EvalOptions, case_seed: u64) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        match self {
            Predictor::Deterministic(model) => {
                let out = no_grad(|| model.forward(x))?;
                Ok((no_grad(|| out.logits_main.sigmoid()).to_vec(), None))
            }
            Predictor::Bayesian { body, head } => {
                let out = no_grad(|| body.forward(x))?;
                let pred = bayes::mc_predict(head, &out.head_input, opts.t_infer, case_seed)?;
                Ok((pred.mean_prob, Some(pred.variance)))
            }
            Predictor::Ensemble(models) => {
                let mut draws = Vec::with_capacity(models.len());
                for m in models.iter() {
                    let out = no_grad(|| m.forward(x))?;
                    draws.push(no_grad(|| out.logits_main.sigmoid()).to_vec());
                }
                let (mean, var) = bayes::population_mean_var(&draws);
                Ok((mean, Some(var)))
            }
            Predictor::Oracle => Ok((label.to_vec(), None)),
        }
    }
}

/// Evaluate a predictor over every (scenario, test case) pair.
pub fn evaluate_cases(
    predictor: &Predictor,
    test: &[Sample],
    scenarios: &[Scenario],
    opts: &EvalOptions,
) -> Result<Vec<CaseMetrics>> {
    if test.is_empty() {
        return Err(Error::config("test split is empty".to_string()));
    }
    let mut out = Vec::new();
    for (si, scenario) in scenarios.iter().enumerate() {
        for (ci, sample) in test.iter().enumerate() {
            let case_seed = Rng::derived(opts.seed, ((si as u64) << 32) | ci as u64).next_u64();
            let perturbed = apply_scenario(&sample.volume, scenario, case_seed);
            let x = stack(&[&perturbed])?;
            let (probs, variance) = predictor.predict(&x, &sample.label, opts, case_seed)?;
            let labels = sample.label.to_vec();
            let s = sample.label.shape()[1];
            let sp = s * s * s;

            let mut dice = Vec::with_capacity(REGIONS);
            let mut hd = Vec::with_capacity(REGIONS);
            let mut pred_mask = vec![false; REGIONS * sp];
            let mut gt_mask = vec![false; REGIONS * sp];
            for r in 0..REGIONS {
                for v in 0..sp {
                    pred_mask[r * sp + v] = probs[r * sp + v] > opts.threshold;
                    gt_mask[r * sp + v] = labels[r * sp + v] > 0.5;
                }
                let p = &pred_mask[r * sp..(r + 1) * sp];
                let g = &gt_mask[r * sp..(r + 1) * sp];
                dice.push(metrics::dice_score(p, g));
                hd.push(metrics::hd95(p, g, [s, s, s]));
            }

            let label_bits: Vec<bool> = labels.iter().map(|v| *v > 0.5).collect();
            let ece = metrics::ece(&probs, &label_bits, opts.ece_bins)?;
            let nll = metrics::nll(&probs, &label_bits);
            let unc_auc = variance.as_ref().and_then(|var| {
                let errors: Vec<bool> =
                    pred_mask.iter().zip(&gt_mask).map(|(p, g)| p != g).collect();
                metrics::uncertainty_error_auc(var, &errors).ok()
            });
            out.push(CaseMetrics {
                scenario: scenario.label(),
                case_id: sample.id.clone(),
                dice,
                hd95: hd,
                ece,
                nll,
                unc_auc,
            });
        }
    }
    Ok(out)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregate case metrics into one report row per (scenario, region).
pub fn aggregate_reports(cases: &[CaseMetrics]) -> Vec<MetricReport> {
    let mut scenario_order: Vec<String> = Vec::new();
    for c in cases {
        if !scenario_order.contains(&c.scenario) {
            scenario_order.push(c.scenario.clone());
        }
    }
    let mut rows = Vec::new();
    for scenario in &scenario_order {
        let group: Vec<&CaseMetrics> = cases.iter().filter(|c| &c.scenario == scenario).collect();
        for r in 0..REGIONS {
            let dices: Vec<f64> = group.iter().map(|c| c.dice[r]).collect();
            let (dice_mean, dice_std) = mean_std(&dices);
            let hds: Vec<f64> = group.iter().filter_map(|c| c.hd95[r]).collect();
            let (hd95_mean, hd95_std) = if hds.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&hds);
                (Some(m), Some(s))
            };
            let eces: Vec<f64> = group.iter().map(|c| c.ece).collect();
            let nlls: Vec<f64> = group.iter().map(|c| c.nll).collect();
            let aucs: Vec<f64> = group.iter().filter_map(|c| c.unc_auc).collect();
            rows.push(MetricReport {
                scenario: scenario.clone(),
                region: format!("region{r}"),
                dice_mean,
                dice_std,
                hd95_mean,
                hd95_std,
                ece: mean_std(&eces).0,
                nll: mean_std(&nlls).0,
                unc_auc: if aucs.is_empty() { None } else { Some(mean_std(&aucs).0) },
                n_cases: group.len(),
            });
        }
    }
    rows
}

/// Collapse case metrics to a single row (regions averaged per case).
pub fn aggregate_single_row(cases: &[CaseMetrics], scenario: &str, region: &str) -> MetricReport {
    let per_case_dice: Vec<f64> =
        cases.iter().map(|c| c.dice.iter().sum::<f64>() / c.dice.len() as f64).collect();
    let (dice_mean, dice_std) = mean_std(&per_case_dice);
    let per_case_hd: Vec<f64> = cases
        .iter()
        .filter_map(|c| {
            let defined: Vec<f64> = c.hd95.iter().flatten().copied().collect();
            if defined.is_empty() {
                None
            } else {
                Some(defined.iter().sum::<f64>() / defined.len() as f64)
            }
        })
        .collect();
    let (hd95_mean, hd95_std) = if per_case_hd.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&per_case_hd);
        (Some(m), Some(s))
    };
    let eces: Vec<f64> = cases.iter().map(|c| c.ece).collect();
    let nlls: Vec<f64> = cases.iter().map(|c| c.nll).collect();
    let aucs: Vec<f64> = cases.iter().filter_map(|c| c.unc_auc).collect();
    MetricReport {
        scenario: scenario.to_string(),
        region: region.to_string(),
        dice_mean,
        dice_std,
        hd95_mean,
        hd95_std,
        ece: mean_std(&eces).0,
        nll: mean_std(&nlls).0,
        unc_auc: if aucs.is_empty() { None } else { Some(mean_std(&aucs).0) },
        n_cases: cases.len(),
    }
}

/// The canonical robustness scenario set: full, every missing modality,
/// and additive noise at the configured test std.
pub fn robustness_scenarios(cfg: &ExperimentConfig) -> Vec<Scenario> {
    let mut scenarios = vec![Scenario::Full];
    for i in 0..cfg.data.num_modalities {
        scenarios.push(Scenario::MissingModality(i));
    }
    scenarios.push(Scenario::GaussianNoise(cfg.eval.noise_std));
    scenarios
}

// ── experiment drivers ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct RobustnessOutcome {
    pub per_seed: Vec<(u64, Vec<CaseMetrics>)>,
    pub combined: Vec<MetricReport>,
}

/// Trains one model per seed and evaluates the scenario battery.
pub fn run_robustness(cfg: &ExperimentConfig) -> Result<RobustnessOutcome> {
    let scenarios = robustness_scenarios(cfg);
    let mut per_seed = Vec::new();
    let mut all_cases = Vec::new();
    for k in 0..cfg.sweep.n_seeds {
        let run_seed = Rng::derived(cfg.seed, 0x20B0 + k as u64).next_u64();
        let mut cfg_k = cfg.clone();
        cfg_k.data.seed = Rng::derived(run_seed, 1).next_u64();
        let dataset = prepare_dataset(&cfg_k)?;
        let outcome = train_stage1_with(&cfg_k, &dataset, run_seed, 0.0)?;
        let model = match load_model(&outcome.checkpoint, &cfg_k, false)? {
            LoadedModel::Deterministic(m) => m,
            _ => unreachable!("stage-1 checkpoints are deterministic"),
        };
        let opts = EvalOptions { seed: run_seed, ..EvalOptions::from_config(cfg) };
        let cases = evaluate_cases(&Predictor::Deterministic(&model), &dataset.test, &scenarios, &opts)?;
        all_cases.extend(cases.clone());
        per_seed.push((run_seed, cases));
    }
    let combined = aggregate_reports(&all_cases);
    Ok(RobustnessOutcome { per_seed, combined })
}

/// All four wiring variants trained and evaluated; one row per variant.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<MetricReport>> {
    let variants = [
        ModelFlags::baseline(),
        ModelFlags { use_fusion: true, use_gates: false },
        ModelFlags { use_fusion: false, use_gates: true },
        ModelFlags::full(),
    ];
    let mut rows = Vec::with_capacity(4);
    for flags in variants {
        let mut cfg_v = cfg.clone();
        cfg_v.model.use_mmcf = flags.use_fusion;
        cfg_v.model.use_dds = flags.use_gates;
        let dataset = prepare_dataset(&cfg_v)?;
        let outcome = train_stage1_with(&cfg_v, &dataset, cfg.seed, 0.0)?;
        let model = match load_model(&outcome.checkpoint, &cfg_v, false)? {
            LoadedModel::Deterministic(m) => m,
            _ => unreachable!("stage-1 checkpoints are deterministic"),
        };
        let opts = EvalOptions::from_config(cfg);
        let cases =
            evaluate_cases(&Predictor::Deterministic(&model), &dataset.test, &[Scenario::Full], &opts)?;
        rows.push(aggregate_single_row(&cases, flags.label(), "mean"));
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub alpha_init: f64,
    pub zero_init: bool,
    pub dice_per_seed: Vec<f64>,
    pub alpha_final_per_seed: Vec<f64>,
}

/// Per-seed run used by the sweep; seed `k` fixes both the dataset and
/// the model stream, so every alpha value trains under paired conditions
/// and the zero-init cell coincides with a default training run.
pub fn sweep_seed_run(cfg: &ExperimentConfig, k: usize, alpha: f64) -> Result<TrainOutcome> {
    let run_seed = Rng::derived(cfg.seed, 0xA1F0 + k as u64).next_u64();
    let mut cfg_k = cfg.clone();
    cfg_k.data.seed = Rng::derived(run_seed, 2).next_u64();
    cfg_k.model.use_mmcf = true; // the sweep varies the fusion scale
    let dataset = prepare_dataset(&cfg_k)?;
    train_stage1_with(&cfg_k, &dataset, run_seed, alpha)
}

/// One full training per (alpha value, seed), plus the zero-init row.
pub fn run_alpha_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let mut values = vec![(0.0, true)];
    values.extend(cfg.sweep.alpha_values.iter().map(|a| (*a, false)));
    let mut rows = Vec::with_capacity(values.len());
    for (alpha, zero_init) in values {
        let mut dice_per_seed = Vec::new();
        let mut alpha_final = Vec::new();
        for k in 0..cfg.sweep.n_seeds {
            let outcome = sweep_seed_run(cfg, k, alpha)?;
            dice_per_seed.push(outcome.best_val_dice);
            alpha_final.push(outcome.final_alpha.unwrap_or(f64::NAN));
        }
        rows.push(SweepRow { alpha_init: alpha, zero_init, dice_per_seed, alpha_final_per_seed: alpha_final });
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha_init,zero_init,dice_mean,dice_std,alpha_final_mean,alpha_final_std,n_seeds\n");
    for r in rows {
        let (dm, ds) = mean_std(&r.dice_per_seed);
        let (am, asd) = mean_std(&r.alpha_final_per_seed);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            format_g6(r.alpha_init),
            r.zero_init,
            format_g6(dm),
            format_g6(ds),
            format_g6(am),
            format_g6(asd),
            r.dice_per_seed.len()
        );
    }
    out
}

/// Deterministic / deep-ensemble / variational rows on the clean test set.
pub fn run_ensemble(cfg: &ExperimentConfig) -> Result<Vec<MetricReport>> {
    let dataset = prepare_dataset(cfg)?;
    let mut members = Vec::with_capacity(cfg.ensemble.n_models);
    let mut first_ckpt: Option<Checkpoint> = None;
    for k in 0..cfg.ensemble.n_models {
        let run_seed = Rng::derived(cfg.seed, 0xE5B1 + k as u64).next_u64();
        let outcome = train_stage1_with(cfg, &dataset, run_seed, 0.0)?;
        if first_ckpt.is_none() {
            first_ckpt = Some(outcome.checkpoint.clone());
        }
        match load_model(&outcome.checkpoint, cfg, false)? {
            LoadedModel::Deterministic(m) => members.push(m),
            _ => unreachable!("stage-1 checkpoints are deterministic"),
        }
    }
    let opts = EvalOptions::from_config(cfg);
    let scenarios = [Scenario::Full];

    let det_cases =
        evaluate_cases(&Predictor::Deterministic(&members[0]), &dataset.test, &scenarios, &opts)?;
    let ens_cases = evaluate_cases(&Predictor::Ensemble(&members), &dataset.test, &scenarios, &opts)?;

    let ft = finetune_stage2(cfg, first_ckpt.as_ref().expect("at least one member"), false)?;
    let (body, head) = match load_model(&ft.checkpoint, cfg, false)? {
        LoadedModel::Bayesian { body, head } => (body, head),
        _ => unreachable!("stage-2 checkpoints carry a variational head"),
    };
    let bayes_cases =
        evaluate_cases(&Predictor::Bayesian { body: &body, head: &head }, &dataset.test, &scenarios, &opts)?;

    Ok(vec![
        aggregate_single_row(&det_cases, "deterministic", "mean"),
        aggregate_single_row(&ens_cases, "ensemble", "mean"),
        aggregate_single_row(&bayes_cases, "bayesian", "mean"),
    ])
}

// ── gradient-check suite ─────────────────────────────────────────────

/// Named max-relative-error results for every differentiable primitive
/// plus the composite stage-1 objective.
pub fn gradcheck_report() -> Result<Vec<(String, f64)>> {
    let mut rng = Rng::new(0x6AD5);
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, err: f64| out.push((name.to_string(), err));

    let rand = |shape: &[usize], rng: &mut Rng, lo: f64, hi: f64| -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::param(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).expect("consistent shape")
    };

    {
        let a = rand(&[3, 3], &mut rng, 0.5, 2.0);
        let b = rand(&[3, 3], &mut rng, 0.5, 2.0);
        let (ac, bc) = (a.clone(), b.clone());
        let f = move || ac.add(&bc)?.mul(&ac)?.log()?.sum_all().add(&Tensor::scalar(0.0));
        push("elementwise_add_mul_log", grad_check(&f, &[a, b], 1e-5)?);
    }
    {
        let a = rand(&[2, 4], &mut rng, 0.5, 2.0);
        let b = rand(&[2, 4], &mut rng, 0.5, 2.0);
        let (ac, bc) = (a.clone(), b.clone());
        let f = move || {
            let d = ac.sub(&bc)?.div(&bc)?;
            Ok(d.exp().sum_all())
        };
        push("elementwise_sub_div_exp", grad_check(&f, &[a, b], 1e-5)?);
    }
    {
        let a = rand(&[3, 4], &mut rng, -2.0, 2.0);
        let ac = a.clone();
        let f = move || Ok(ac.sigmoid().mul(&ac.softplus())?.sum_all());
        push("sigmoid_softplus", grad_check(&f, &[a], 1e-5)?);
    }
    {
        let a = Tensor::param(&[6], vec![-1.7, -0.9, -0.2, 0.4, 1.1, 1.9]).expect("consistent shape");
        let ac = a.clone();
        let f = move || Ok(ac.relu().mul(&ac)?.sum_all());
        push("relu", grad_check(&f, &[a], 1e-5)?);
    }
    {
        let x = rand(&[1, 2, 4, 4, 4], &mut rng, -1.0, 1.0);
        let w = rand(&[3, 2, 3, 3, 3], &mut rng, -1.0, 1.0);
        let b = rand(&[3], &mut rng, -0.5, 0.5);
        let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
        let f = move || Ok(crate::tensor::conv3d(&xc, &wc, Some(&bc), 1, 1)?.sigmoid().sum_all());
        push("conv3d", grad_check(&f, &[x, w, b], 1e-5)?);
    }
    {
        let x = rand(&[1, 1, 4, 4, 4], &mut rng, -1.0, 1.0);
        let w = rand(&[2, 1, 3, 3, 3], &mut rng, -1.0, 1.0);
        let (xc, wc) = (x.clone(), w.clone());
        let f = move || Ok(crate::tensor::conv3d(&xc, &wc, None, 2, 1)?.sum_all());
        push("conv3d_stride2", grad_check(&f, &[x, w], 1e-5)?);
    }
    {
        let x = rand(&[1, 2, 3, 3, 3], &mut rng, -1.0, 1.0);
        let xc = x.clone();
        let f = move || {
            let up = xc.interp3d([4, 4, 4], crate::tensor::InterpMode::Trilinear)?;
            Ok(up.mul(&up)?.sum_all())
        };
        push("interp_trilinear", grad_check(&f, &[x], 1e-5)?);
    }
    {
        let x = rand(&[1, 1, 2, 2, 2], &mut rng, -1.0, 1.0);
        let xc = x.clone();
        let f = move || {
            let up = xc.interp3d([4, 4, 4], crate::tensor::InterpMode::Nearest)?;
            Ok(up.mul(&up)?.sum_all())
        };
        push("interp_nearest", grad_check(&f, &[x], 1e-5)?);
    }
    {
        let x = rand(&[2, 3, 4], &mut rng, -1.0, 1.0);
        let xc = x.clone();
        let f = move || {
            let s = xc.sum_axes(&[1], false)?;
            let m = xc.mean_axes(&[0], true)?;
            Ok(s.mul(&s)?.sum_all().add(&m.mul(&m)?.sum_all())?)
        };
        push("reduce_sum_mean", grad_check(&f, &[x], 1e-5)?);
    }
    {
        let x = rand(&[2, 3, 4], &mut rng, -1.0, 1.0);
        let xc = x.clone();
        let f = move || Ok(xc.var_axes(&[1, 2], false)?.sum_all());
        push("reduce_var", grad_check(&f, &[x], 1e-5)?);
    }
    {
        let x = rand(&[2, 8], &mut rng, -1.0, 1.0);
        let xc = x.clone();
        let f = move || {
            let lo = xc.min_axes(&[1], false)?;
            let hi = xc.max_axes(&[1], false)?;
            Ok(hi.sub(&lo)?.sum_all())
        };
        push("reduce_min_max", grad_check(&f, &[x], 1e-5)?);
    }
    {
        let x = rand(&[1, 3, 2, 2, 2], &mut rng, 0.3, 1.5);
        let xc = x.clone();
        let f = move || Ok(xc.channel_l2_norm()?.sum_all());
        push("channel_l2_norm", grad_check(&f, &[x], 1e-5)?);
    }
    {
        let x = rand(&[1, 4, 2, 2, 2], &mut rng, -1.5, 1.5);
        let xc = x.clone();
        let f = move || {
            let p = xc.channel_softmax()?;
            Ok(p.mul(&p)?.sum_all())
        };
        push("channel_softmax", grad_check(&f, &[x], 1e-5)?);
    }
    {
        let x = rand(&[2, 8], &mut rng, -1.0, 1.0);
        let xc = x.clone();
        let f = move || {
            let n = xc.minmax_norm(1e-6)?;
            Ok(n.mul(&n)?.sum_all())
        };
        push("minmax_norm", grad_check(&f, &[x], 1e-5)?);
    }
    {
        let a = rand(&[1, 2, 3], &mut rng, -1.0, 1.0);
        let b = rand(&[1, 3, 3], &mut rng, -1.0, 1.0);
        let (ac, bc) = (a.clone(), b.clone());
        let f = move || {
            let c = concat(&[ac.clone(), bc.clone()], 1)?;
            Ok(c.mul(&c)?.sum_all())
        };
        push("concat", grad_check(&f, &[a, b], 1e-5)?);
    }

    // composite stage-1 objective on a small volume, sampling large
    // parameter tensors; alpha and gamma are checked exhaustively
    {
        let model = Model::with_alpha(ModelFlags::full(), 0xC0FFEE, 0.25);
        let n = MODALITIES * 8 * 8 * 8;
        let x = Tensor::from_vec(&[1, MODALITIES, 8, 8, 8], {
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(rng.uniform_in(-1.0, 1.0));
            }
            data
        })
        .expect("consistent shape");
        let y = Tensor::from_vec(&[1, REGIONS, 8, 8, 8], {
            let sp = 8 * 8 * 8;
            let mut data = vec![0.0; REGIONS * sp];
            for v in data.iter_mut() {
                if rng.uniform() < 0.3 {
                    *v = 1.0;
                }
            }
            data
        })
        .expect("consistent shape");
        let weights = LossWeights::default();
        let f = {
            let (model, x, y) = (model.clone(), x.clone(), y.clone());
            move || {
                let out = model.forward(&x)?;
                Ok(losses::total_loss(&out, &y, &weights)?.total)
            }
        };
        let alpha = model.fusion.as_ref().expect("full wiring").alpha.clone();
        let gamma = model.gates.as_ref().expect("full wiring").gamma.clone();
        push("stage1_total_wrt_alpha_gamma", grad_check(&f, &[alpha, gamma], 1e-5)?);

        // exhaustive over the main head, whose gradients all sit clearly
        // above the finite-difference noise floor
        let heads = [
            model.backbone.main_head.weight.clone(),
            model.backbone.main_head.bias.clone(),
        ];
        push("stage1_total_wrt_main_head", grad_check(&f, &heads, 1e-5)?);

        // body and aux weights: verify elements whose gradients finite
        // differences can actually resolve at h=1e-5
        let sampled = [
            model.backbone.aux_head_deep.weight.clone(),
            model.backbone.aux_head_shallow.weight.clone(),
            model.fusion.as_ref().expect("full wiring").att_head.weight.clone(),
            model.fusion.as_ref().expect("full wiring").enc1.weight.clone(),
            model.gates.as_ref().expect("full wiring").projs[0].weight.clone(),
            model.backbone.enc[0].c1.weight.clone(),
            model.backbone.dec[2].c2.weight.clone(),
            model.backbone.bottleneck.c1.weight.clone(),
        ];
        push(
            "stage1_total_sampled_weights",
            grad_check_above(&f, &sampled, 1e-5, 1e-4, 6, &mut Rng::new(0x5EED))?,
        );
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.size = 16;
        cfg.data.crop = 16;
        cfg.data.n_samples = 8; // 6 train / 1 val / 1 test
        cfg.stage1.epochs = 2;
        cfg.stage1.batch_size = 2;
        cfg.stage1.val_interval = 1;
        cfg.stage2.epochs = 2;
        cfg.sweep.n_seeds = 1;
        cfg.sweep.alpha_values = vec![0.5];
        cfg
    }

    #[test]
    fn scenario_full_is_identity() {
        let v = Tensor::from_vec(&[2, 2, 2, 2], (0..16).map(|i| i as f64).collect()).unwrap();
        assert!(apply_scenario(&v, &Scenario::Full, 1).bit_eq(&v));
        assert!(apply_scenario(&v, &Scenario::GaussianNoise(0.0), 1).bit_eq(&v));
    }

    #[test]
    fn scenario_missing_zeroes_only_that_channel() {
        let v = Tensor::full(&[4, 2, 2, 2], 1.5);
        let out = apply_scenario(&v, &Scenario::MissingModality(2), 1);
        let d = out.to_vec();
        for c in 0..4 {
            for i in 0..8 {
                let expect = if c == 2 { 0.0 } else { 1.5 };
                assert_eq!(d[c * 8 + i], expect);
            }
        }
    }

    #[test]
    fn scenario_noise_is_seeded() {
        let v = Tensor::full(&[1, 2, 2, 2], 0.0);
        let a = apply_scenario(&v, &Scenario::GaussianNoise(0.5), 7);
        let b = apply_scenario(&v, &Scenario::GaussianNoise(0.5), 7);
        let c = apply_scenario(&v, &Scenario::GaussianNoise(0.5), 8);
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn zero_epochs_checkpoint_equals_initialization() {
        let mut cfg = tiny_config();
        cfg.stage1.epochs = 0;
        let outcome = train_stage1(&cfg).unwrap();
        let fresh = Model::new(ModelFlags::full(), cfg.seed);
        for (name, tensor) in fresh.named_params() {
            let (shape, data) = outcome.checkpoint.get(&name).unwrap();
            assert_eq!(shape, tensor.shape());
            let t = tensor.to_vec();
            assert!(data.iter().zip(&t).all(|(a, b)| a.to_bits() == b.to_bits()), "{name} differs");
        }
        let (_, alpha) = outcome.checkpoint.get("fusion.alpha").unwrap();
        assert_eq!(alpha, &[0.0]);
    }

    #[test]
    fn initial_loss_is_finite_and_positive() {
        let mut cfg = tiny_config();
        cfg.stage1.epochs = 1;
        let outcome = train_stage1(&cfg).unwrap();
        let first = outcome.log_csv.lines().nth(1).unwrap();
        let loss: f64 = first.split(',').nth(2).unwrap().parse().unwrap();
        assert!(loss.is_finite() && loss > 0.0, "{loss}");
    }

    #[test]
    fn training_is_bit_reproducible() {
        let cfg = tiny_config();
        let a = train_stage1(&cfg).unwrap();
        let b = train_stage1(&cfg).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.log_csv, b.log_csv);
    }

    #[test]
    fn checkpoint_roundtrips_through_model_loader() {
        let cfg = tiny_config();
        let outcome = train_stage1(&cfg).unwrap();
        let model = match load_model(&outcome.checkpoint, &cfg, false).unwrap() {
            LoadedModel::Deterministic(m) => m,
            _ => panic!("expected deterministic"),
        };
        let again = Checkpoint::from_named(
            &model.named_params(),
            cfg.compat_hash(),
            outcome.checkpoint.seed,
            outcome.checkpoint.epoch,
            outcome.checkpoint.best_metric,
        );
        assert_eq!(again.to_bytes(), outcome.checkpoint.to_bytes());
    }

    #[test]
    fn hash_mismatch_is_rejected_unless_forced() {
        let cfg = tiny_config();
        let outcome = train_stage1(&cfg).unwrap();
        let mut other = cfg.clone();
        other.data.seed = 12345;
        assert!(load_model(&outcome.checkpoint, &other, false).is_err());
        assert!(load_model(&outcome.checkpoint, &other, true).is_ok());
    }

    #[test]
    fn oracle_predictor_scores_perfectly() {
        let cfg = tiny_config();
        let dataset = prepare_dataset(&cfg).unwrap();
        let opts = EvalOptions::from_config(&cfg);
        let cases =
            evaluate_cases(&Predictor::Oracle, &dataset.test, &[Scenario::Full], &opts).unwrap();
        for c in &cases {
            for r in 0..REGIONS {
                assert_eq!(c.dice[r], 1.0);
                assert_eq!(c.hd95[r], Some(0.0));
            }
            assert!(c.unc_auc.is_none());
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let cfg = tiny_config();
        let dataset = prepare_dataset(&cfg).unwrap();
        let outcome = train_stage1(&cfg).unwrap();
        let model = match load_model(&outcome.checkpoint, &cfg, false).unwrap() {
            LoadedModel::Deterministic(m) => m,
            _ => panic!("expected deterministic"),
        };
        let opts = EvalOptions::from_config(&cfg);
        let scenarios = robustness_scenarios(&cfg);
        let a = evaluate_cases(&Predictor::Deterministic(&model), &dataset.test, &scenarios, &opts).unwrap();
        let b = evaluate_cases(&Predictor::Deterministic(&model), &dataset.test, &scenarios, &opts).unwrap();
        let ra = aggregate_reports(&a);
        let rb = aggregate_reports(&b);
        assert_eq!(ra, rb);
        assert_eq!(ra.len(), scenarios.len() * REGIONS);
    }

    #[test]
    fn stage2_keeps_point_predictions_near_stage1() {
        let mut cfg = tiny_config();
        cfg.stage1.epochs = 4;
        let dataset = prepare_dataset(&cfg).unwrap();
        let outcome = train_stage1(&cfg).unwrap();
        let det_model = match load_model(&outcome.checkpoint, &cfg, false).unwrap() {
            LoadedModel::Deterministic(m) => m,
            _ => panic!("expected deterministic"),
        };
        let det_dice = mean_dice(&det_model, &dataset.val, cfg.eval.threshold).unwrap();

        let ft = finetune_stage2(&cfg, &outcome.checkpoint, false).unwrap();
        assert_eq!(ft.kl_per_epoch.len(), cfg.stage2.epochs);
        let (body, head) = match load_model(&ft.checkpoint, &cfg, false).unwrap() {
            LoadedModel::Bayesian { body, head } => (body, head),
            _ => panic!("expected bayesian"),
        };
        // immediate neutrality: re-init from stage 1 without training
        let fresh = VariationalHead::from_deterministic(
            &det_model.backbone.main_head.weight,
            &det_model.backbone.main_head.bias,
            cfg.stage2.rho_init,
        )
        .unwrap();
        let opts = EvalOptions::from_config(&cfg);
        let mut bayes_dice_sum = 0.0;
        let mut count = 0;
        for s in &dataset.val {
            let x = stack(&[&s.volume]).unwrap();
            let out = no_grad(|| det_model.forward(&x)).unwrap();
            let pred = bayes::mc_predict(&fresh, &out.head_input, opts.t_infer, 11).unwrap();
            let sp: usize = s.label.shape()[1..].iter().product();
            let labels = s.label.to_vec();
            for r in 0..REGIONS {
                let pm: Vec<bool> =
                    pred.mean_prob[r * sp..(r + 1) * sp].iter().map(|p| *p > 0.5).collect();
                let gm: Vec<bool> = labels[r * sp..(r + 1) * sp].iter().map(|v| *v > 0.5).collect();
                bayes_dice_sum += metrics::dice_score(&pm, &gm);
                count += 1;
            }
        }
        let bayes_dice = bayes_dice_sum / count as f64;
        assert!(
            (bayes_dice - det_dice).abs() <= 0.01,
            "neutrality violated: {bayes_dice} vs {det_dice}"
        );
        // the fine-tuned head still predicts
        let cases = evaluate_cases(
            &Predictor::Bayesian { body: &body, head: &head },
            &dataset.test,
            &[Scenario::Full],
            &opts,
        )
        .unwrap();
        assert!(!cases.is_empty());
    }

    #[test]
    fn stronger_kl_weight_shrinks_final_kl() {
        let mut cfg = tiny_config();
        cfg.stage1.epochs = 3;
        cfg.stage2.epochs = 6;
        let outcome = train_stage1(&cfg).unwrap();
        let mut finals = Vec::new();
        for beta in [1e-6, 1e-5, 1e-4] {
            let mut c = cfg.clone();
            c.stage2.kl_beta = beta;
            let ft = finetune_stage2(&c, &outcome.checkpoint, false).unwrap();
            finals.push(*ft.kl_per_epoch.last().unwrap());
        }
        assert!(
            finals[0] > finals[1] && finals[1] > finals[2],
            "KL not monotone in beta: {finals:?}"
        );
    }

    #[test]
    fn sweep_zero_row_matches_default_training() {
        let mut cfg = tiny_config();
        cfg.sweep.alpha_values = vec![0.7];
        let rows = run_alpha_sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 2); // zero-init row + one value
        assert!(rows[0].zero_init && rows[0].alpha_init == 0.0);
        assert!(rows.iter().all(|r| r.alpha_final_per_seed.iter().all(|a| a.is_finite())));
        // the zero-init cell is exactly a default training run of seed 0
        let direct = sweep_seed_run(&cfg, 0, 0.0).unwrap();
        assert_eq!(rows[0].dice_per_seed[0], direct.best_val_dice);
        assert_eq!(rows[0].alpha_final_per_seed[0], direct.final_alpha.unwrap());
        let csv = sweep_to_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn ensemble_of_identical_models_degenerates() {
        let cfg = tiny_config();
        let dataset = prepare_dataset(&cfg).unwrap();
        let outcome = train_stage1(&cfg).unwrap();
        let model = match load_model(&outcome.checkpoint, &cfg, false).unwrap() {
            LoadedModel::Deterministic(m) => m,
            _ => panic!("expected deterministic"),
        };
        let opts = EvalOptions::from_config(&cfg);
        let copies = vec![model.clone(), model.clone(), model];
        let ens = evaluate_cases(&Predictor::Ensemble(&copies), &dataset.test, &[Scenario::Full], &opts)
            .unwrap();
        let det = evaluate_cases(
            &Predictor::Deterministic(&copies[0]),
            &dataset.test,
            &[Scenario::Full],
            &opts,
        )
        .unwrap();
        for (e, d) in ens.iter().zip(&det) {
            assert_eq!(e.dice, d.dice);
            assert_eq!(e.ece, d.ece);
            // identical members leave only ulp-level variance residue
            // (x+x+x rounds), which ranks errors at chance level
            let auc = e.unc_auc.unwrap();
            assert!((auc - 0.5).abs() < 0.05, "degenerate ensemble auc {auc}");
        }
    }

    #[test]
    fn gradcheck_suite_all_below_tolerance() {
        let report = gradcheck_report().unwrap();
        assert!(report.len() >= 15);
        for (name, err) in &report {
            assert!(*err < 1e-5, "{name}: {err}");
        }
    }
}
