//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured values (run with `--nocapture` to see them).
//!
//! Criteria 7 and 8 share three trained seed models built once; all runs
//! are fully seeded, so every margin asserted here is bit-reproducible.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use bmds_core::backbone::{Model, ModelFlags, MODALITIES};
use bmds_core::bayes::{self, VariationalHead};
use bmds_core::config::{ExperimentConfig, Scenario};
use bmds_core::harness::{self, EvalOptions, LoadedModel, Predictor};
use bmds_core::io::Checkpoint;
use bmds_core::metrics;
use bmds_core::rng::Rng;
use bmds_core::Tensor;

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("bmds_accept_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// ── criterion 1: gradient suite ──────────────────────────────────────

#[test]
fn c01_gradient_suite() {
    let start = Instant::now();
    let report = harness::gradcheck_report().unwrap();
    let elapsed = start.elapsed();
    let mut worst: f64 = 0.0;
    for (name, err) in &report {
        assert!(*err < 1e-5, "C1 FAIL: {name} rel err {err}");
        worst = worst.max(*err);
    }
    assert!(
        report.iter().any(|(n, _)| n.contains("alpha_gamma")),
        "C1 FAIL: composite loss must cover the fusion scalars"
    );
    assert!(elapsed.as_secs() < 120, "C1 FAIL: took {elapsed:?} (budget 2 min)");
    println!(
        "C1 PASS: {} gradient checks, worst rel err {worst:.3e}, {:.1}s",
        report.len(),
        elapsed.as_secs_f64()
    );
}

// ── criterion 2: zero-init identity ──────────────────────────────────

#[test]
fn c02_zero_init_identity() {
    let model = Model::new(ModelFlags::full(), 0xACCE97);
    assert_eq!(model.fusion.as_ref().unwrap().alpha.item(), 0.0);
    model.gates.as_ref().unwrap().gamma.set_data(&[0.0]);
    let plain = model.ablation_view(ModelFlags::baseline()).unwrap();
    let mut rng = Rng::new(0x1D);
    for trial in 0..10 {
        let n = MODALITIES * 16 * 16 * 16;
        let x = Tensor::from_vec(
            &[1, MODALITIES, 16, 16, 16],
            (0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect(),
        )
        .unwrap();
        let a = model.forward(&x).unwrap();
        let b = plain.forward(&x).unwrap();
        assert!(a.logits_main.bit_eq(&b.logits_main), "C2 FAIL: trial {trial} main logits differ");
        assert!(a.logits_aux[0].bit_eq(&b.logits_aux[0]), "C2 FAIL: trial {trial} deep aux differs");
        assert!(a.logits_aux[1].bit_eq(&b.logits_aux[1]), "C2 FAIL: trial {trial} shallow aux differs");
    }
    println!("C2 PASS: 10 random inputs bit-identical to the plain backbone");
}

// ── criterion 3: metric oracles ──────────────────────────────────────

fn hd95_oracle(pred: &[bool], gt: &[bool], dims: [usize; 3]) -> Option<f64> {
    let extract = |m: &[bool]| -> Vec<(i64, i64, i64)> {
        let (h, w, d) = (dims[0] as i64, dims[1] as i64, dims[2] as i64);
        let at = |x: i64, y: i64, z: i64| -> bool {
            if x < 0 || y < 0 || z < 0 || x >= h || y >= w || z >= d {
                return false;
            }
            m[((x * w + y) * d + z) as usize]
        };
        let mut out = Vec::new();
        for x in 0..h {
            for y in 0..w {
                for z in 0..d {
                    if at(x, y, z)
                        && (!at(x - 1, y, z)
                            || !at(x + 1, y, z)
                            || !at(x, y - 1, z)
                            || !at(x, y + 1, z)
                            || !at(x, y, z - 1)
                            || !at(x, y, z + 1))
                    {
                        out.push((x, y, z));
                    }
                }
            }
        }
        out
    };
    let pa = extract(pred);
    let pb = extract(gt);
    if pa.is_empty() && pb.is_empty() {
        return Some(0.0);
    }
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |from: &[(i64, i64, i64)], to: &[(i64, i64, i64)]| -> f64 {
        let mut ds: Vec<f64> = from
            .iter()
            .map(|&(x, y, z)| {
                let mut best = f64::INFINITY;
                for &(a, b, c) in to {
                    let d = (((x - a).pow(2) + (y - b).pow(2) + (z - c).pow(2)) as f64).sqrt();
                    if d < best {
                        best = d;
                    }
                }
                best
            })
            .collect();
        ds.sort_by(f64::total_cmp);
        let rank = ((0.95 * ds.len() as f64).ceil() as usize).clamp(1, ds.len());
        ds[rank - 1]
    };
    Some(directed(&pa, &pb).max(directed(&pb, &pa)))
}

fn dice_oracle(pred: &[bool], gt: &[bool]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    let total = pred.iter().filter(|p| **p).count() + gt.iter().filter(|g| **g).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn auc_oracle(scores: &[f64], errors: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        if !errors[i] {
            continue;
        }
        for j in 0..scores.len() {
            if errors[j] {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

#[test]
fn c03_metric_oracles() {
    let start = Instant::now();
    let mut rng = Rng::new(0x0C3);
    let mut auc_checked = 0;
    for case in 0..200 {
        let s = 4 + (case % 5); // sizes 4..8
        let dims = [s, s, s];
        let n = s * s * s;
        let fill_a = rng.uniform_in(0.05, 0.5);
        let fill_b = rng.uniform_in(0.05, 0.5);
        let a: Vec<bool> = (0..n).map(|_| rng.uniform() < fill_a).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.uniform() < fill_b).collect();

        assert_eq!(metrics::dice_score(&a, &b), dice_oracle(&a, &b), "C3 FAIL: dice case {case}");
        assert_eq!(
            metrics::hd95(&a, &b, dims),
            hd95_oracle(&a, &b, dims),
            "C3 FAIL: hd95 case {case}"
        );

        // tied scores included deliberately
        let scores: Vec<f64> = (0..n).map(|_| (rng.uniform() * 16.0).floor() / 16.0).collect();
        let errors: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.3).collect();
        let n_err = errors.iter().filter(|e| **e).count();
        if n_err > 0 && n_err < n {
            let got = metrics::uncertainty_error_auc(&scores, &errors).unwrap();
            let want = auc_oracle(&scores, &errors);
            assert!((got - want).abs() < 1e-12, "C3 FAIL: auc case {case}: {got} vs {want}");
            auc_checked += 1;
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "C3 FAIL: took {elapsed:?} (budget 1 min)");
    println!(
        "C3 PASS: 200 mask pairs match dice/hd95 oracles exactly, {auc_checked} auc cases, {:.1}s",
        elapsed.as_secs_f64()
    );
}

// ── criterion 4: KL correctness ──────────────────────────────────────

#[test]
fn c04_kl_closed_form() {
    // exact zero at the prior
    let rho_unit = (std::f64::consts::E - 1.0).ln();
    let w = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![0.0]).unwrap();
    let b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
    let head = VariationalHead::from_deterministic(&w, &b, rho_unit).unwrap();
    let kl0 = head.kl_to_prior().unwrap().item();
    assert!(kl0.abs() < 1e-12, "C4 FAIL: KL at (mu=0, sigma=1) is {kl0}");

    // closed form vs 1e5-draw Monte Carlo on 20 settings
    let softplus = |x: f64| if x > 30.0 { x } else { x.exp().ln_1p() };
    let mut rng = Rng::new(0x0C4);
    let mut worst_rel: f64 = 0.0;
    for trial in 0..20 {
        let mu = rng.uniform_in(1.0, 2.0) * if rng.flip() { 1.0 } else { -1.0 };
        let rho = rng.uniform_in(-2.0, -0.3);
        let w = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![mu]).unwrap();
        let b = Tensor::from_vec(&[1], vec![mu]).unwrap();
        let head = VariationalHead::from_deterministic(&w, &b, rho).unwrap();
        let closed = head.kl_to_prior().unwrap().item() / 2.0;
        let sigma = softplus(rho);
        let mut mc = 0.0;
        let mut nrng = Rng::derived(7000 + trial, 0);
        for _ in 0..100_000 {
            let wv = mu + sigma * nrng.normal();
            let log_q = -sigma.ln() - (wv - mu) * (wv - mu) / (2.0 * sigma * sigma);
            let log_p = -wv * wv / 2.0;
            mc += log_q - log_p;
        }
        mc /= 100_000.0;
        let rel = (closed - mc).abs() / closed.abs();
        worst_rel = worst_rel.max(rel);
        assert!(rel < 0.02, "C4 FAIL: trial {trial}: closed {closed} vs MC {mc} (rel {rel})");
    }
    println!("C4 PASS: KL(0,1)={kl0:.2e}, worst closed-vs-MC rel err {worst_rel:.4}");
}

// ── criterion 5: predictive variance ─────────────────────────────────

#[test]
fn c05_predictive_variance() {
    // collapsed posterior: variance vanishes everywhere
    let mut rng = Rng::new(0x0C5);
    let w = Tensor::from_vec(&[3, 16, 1, 1, 1], (0..48).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
        .unwrap();
    let b = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
    let head = VariationalHead::from_deterministic(&w, &b, -40.0).unwrap();
    let feats =
        Tensor::from_vec(&[1, 16, 4, 4, 4], (0..1024).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .unwrap();
    let pred = bayes::mc_predict(&head, &feats, 20, 9).unwrap();
    let max_var = pred.variance.iter().cloned().fold(0.0, f64::max);
    assert!(max_var <= 1e-12, "C5 FAIL: collapsed variance reached {max_var}");

    // hand-built three-sample case, exact up to one ulp of f64 rounding
    let (mean, var) = bayes::population_mean_var(&[vec![0.2], vec![0.5], vec![0.8]]);
    assert!((mean[0] - 0.5).abs() <= 1e-12, "C5 FAIL: mean {}", mean[0]);
    assert!((var[0] - 0.06).abs() <= 1e-12, "C5 FAIL: variance {}", var[0]);
    // population variance stays inside [0, 0.25] for probabilities
    assert!(pred.variance.iter().all(|v| (0.0..=0.25).contains(v)));
    println!(
        "C5 PASS: collapsed max variance {max_var:.2e}; 3-sample case mean {} var {}",
        mean[0], var[0]
    );
}

// ── criterion 6: end-to-end stage 1 ──────────────────────────────────

#[test]
fn c06_stage1_end_to_end() {
    // default phantom protocol: 50 volumes at 32^3 -> 40 train volumes
    let mut cfg = ExperimentConfig::default();
    cfg.stage1.epochs = 200;
    cfg.stage1.early_stop_dice = Some(0.80);
    assert_eq!(cfg.data.n_samples, 50);
    assert_eq!(cfg.data.size, 32);

    let start = Instant::now();
    let outcome = harness::train_stage1(&cfg).unwrap();
    let elapsed = start.elapsed();

    assert!(
        outcome.best_val_dice >= 0.80,
        "C6 FAIL: best validation dice {} after {} epochs",
        outcome.best_val_dice,
        outcome.epochs_run
    );
    assert!(outcome.epochs_run <= 200, "C6 FAIL: {} epochs", outcome.epochs_run);
    assert!(
        elapsed.as_secs() < 1800,
        "C6 FAIL: wall clock {:.0}s exceeds 30 min",
        elapsed.as_secs_f64()
    );
    println!(
        "C6 PASS: validation dice {:.4} at epoch {} in {:.0}s (single thread)",
        outcome.best_val_dice,
        outcome.best_epoch,
        elapsed.as_secs_f64()
    );
}

// ── shared fixture for criteria 7 and 8 ──────────────────────────────

struct SeedBundle {
    seed: u64,
    cfg: ExperimentConfig,
    stage1: Checkpoint,
    bayes: Checkpoint,
}

fn seven_eight_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.data.seed = seed;
    cfg.data.size = 24;
    cfg.data.crop = 16;
    cfg.data.n_samples = 30;
    // harder phantom so the noisy test set genuinely stresses calibration
    cfg.data.noise_std = 0.45;
    cfg.stage1.epochs = 100;
    cfg.stage1.early_stop_dice = Some(0.88);
    cfg
}

static SEED_BUNDLES: OnceLock<Vec<SeedBundle>> = OnceLock::new();

fn seed_bundles() -> &'static Vec<SeedBundle> {
    SEED_BUNDLES.get_or_init(|| {
        [101u64, 202, 303]
            .into_iter()
            .map(|seed| {
                let cfg = seven_eight_config(seed);
                let stage1 = harness::train_stage1(&cfg).unwrap();
                let ft = harness::finetune_stage2(&cfg, &stage1.checkpoint, false).unwrap();
                SeedBundle { seed, cfg, stage1: stage1.checkpoint, bayes: ft.checkpoint }
            })
            .collect()
    })
}

fn scenario_mean_dice(cases: &[harness::CaseMetrics], scenario: &str) -> f64 {
    let rows: Vec<&harness::CaseMetrics> =
        cases.iter().filter(|c| c.scenario == scenario).collect();
    let total: f64 =
        rows.iter().map(|c| c.dice.iter().sum::<f64>() / c.dice.len() as f64).sum();
    total / rows.len() as f64
}

fn scenario_mean_ece(cases: &[harness::CaseMetrics], scenario: &str) -> f64 {
    let rows: Vec<&harness::CaseMetrics> =
        cases.iter().filter(|c| c.scenario == scenario).collect();
    rows.iter().map(|c| c.ece).sum::<f64>() / rows.len() as f64
}

// ── criterion 7: stage-2 neutrality + calibration direction ─────────

#[test]
fn c07_stage2_neutrality_and_calibration() {
    let scenarios = vec![Scenario::Full, Scenario::GaussianNoise(0.3)];
    let mut ece_wins = 0usize;
    for bundle in seed_bundles() {
        let dataset = harness::prepare_dataset(&bundle.cfg).unwrap();
        let opts = EvalOptions::from_config(&bundle.cfg);
        let det = match harness::load_model(&bundle.stage1, &bundle.cfg, false).unwrap() {
            LoadedModel::Deterministic(m) => m,
            _ => panic!("stage-1 checkpoint must be deterministic"),
        };
        let (body, head) = match harness::load_model(&bundle.bayes, &bundle.cfg, false).unwrap() {
            LoadedModel::Bayesian { body, head } => (body, head),
            _ => panic!("stage-2 checkpoint must be Bayesian"),
        };
        let det_cases =
            harness::evaluate_cases(&Predictor::Deterministic(&det), &dataset.test, &scenarios, &opts)
                .unwrap();
        let bay_cases = harness::evaluate_cases(
            &Predictor::Bayesian { body: &body, head: &head },
            &dataset.test,
            &scenarios,
            &opts,
        )
        .unwrap();

        // (a) point-estimate neutrality on the clean test split
        let det_dice = scenario_mean_dice(&det_cases, "full");
        let bay_dice = scenario_mean_dice(&bay_cases, "full");
        assert!(
            (det_dice - bay_dice).abs() <= 0.02,
            "C7 FAIL: seed {}: test dice moved from {det_dice:.4} to {bay_dice:.4}",
            bundle.seed
        );

        // (b) calibration direction on the noisy test set
        let det_ece = scenario_mean_ece(&det_cases, "noise_0.3");
        let bay_ece = scenario_mean_ece(&bay_cases, "noise_0.3");
        if bay_ece <= det_ece {
            ece_wins += 1;
        }
        println!(
            "  seed {}: dice det {det_dice:.4} bay {bay_dice:.4} | noisy ece det {det_ece:.5} bay {bay_ece:.5}",
            bundle.seed
        );
    }
    assert!(ece_wins >= 2, "C7 FAIL: Bayesian ECE at most deterministic in only {ece_wins}/3 seeds");
    println!("C7 PASS: neutrality within 0.02 on 3/3 seeds; ECE ordering holds on {ece_wins}/3 seeds");
}

// ── criterion 8: robustness ordering ─────────────────────────────────

#[test]
fn c08_missing_modality_collapse() {
    for bundle in seed_bundles() {
        let dataset = harness::prepare_dataset(&bundle.cfg).unwrap();
        let opts = EvalOptions::from_config(&bundle.cfg);
        let det = match harness::load_model(&bundle.stage1, &bundle.cfg, false).unwrap() {
            LoadedModel::Deterministic(m) => m,
            _ => panic!("stage-1 checkpoint must be deterministic"),
        };
        let scenarios = vec![
            Scenario::Full,
            Scenario::MissingModality(bundle.cfg.data.informative_channel),
        ];
        let cases =
            harness::evaluate_cases(&Predictor::Deterministic(&det), &dataset.test, &scenarios, &opts)
                .unwrap();
        let full = scenario_mean_dice(&cases, "full");
        let missing = scenario_mean_dice(
            &cases,
            &format!("missing_m{}", bundle.cfg.data.informative_channel),
        );
        assert!(
            missing < full - 0.05,
            "C8 FAIL: seed {}: full {full:.4} vs missing informative {missing:.4}",
            bundle.seed
        );
        println!("  seed {}: full {full:.4} -> missing informative {missing:.4}", bundle.seed);
    }
    println!("C8 PASS: informative-channel drop exceeds 0.05 on every seed");
}

// ── criterion 9: byte-level reproducibility ──────────────────────────

fn bmds_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bmds"))
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().to_string(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    entries
}

#[test]
fn c09_cli_reruns_are_byte_identical() {
    let dir = tmpdir("c9");
    let cfg_path = dir.join("cfg.txt");
    std::fs::write(
        &cfg_path,
        "data.size = 16\ndata.crop = 16\ndata.n_samples = 8\nstage1.epochs = 2\nstage1.val_interval = 1\nstage2.epochs = 2\neval.scenarios = full, missing:3, noise:0.2\n",
    )
    .unwrap();

    for sub in ["a", "b"] {
        run_ok(bmds_bin()
            .args(["gen-data", "--seed", "7"])
            .args(["--config".as_ref(), cfg_path.as_os_str()])
            .args(["--out".as_ref(), dir.join(format!("data_{sub}")).as_os_str()]));
        run_ok(bmds_bin()
            .args(["train"])
            .args(["--config".as_ref(), cfg_path.as_os_str()])
            .args(["--out".as_ref(), dir.join(format!("train_{sub}")).as_os_str()]));
        run_ok(bmds_bin()
            .args(["finetune-bayes"])
            .args(["--config".as_ref(), cfg_path.as_os_str()])
            .args(["--ckpt".as_ref(), dir.join(format!("train_{sub}/stage1.ckpt")).as_os_str()])
            .args(["--out".as_ref(), dir.join(format!("ft_{sub}")).as_os_str()]));
        run_ok(bmds_bin()
            .args(["eval"])
            .args(["--config".as_ref(), cfg_path.as_os_str()])
            .args(["--ckpt".as_ref(), dir.join(format!("ft_{sub}/bayes.ckpt")).as_os_str()])
            .args(["--out".as_ref(), dir.join(format!("eval_{sub}")).as_os_str()]));
        run_ok(bmds_bin()
            .args(["ablation"])
            .args(["--config".as_ref(), cfg_path.as_os_str()])
            .args(["--out".as_ref(), dir.join(format!("abl_{sub}")).as_os_str()]));
    }
    for what in ["data", "train", "ft", "eval", "abl"] {
        let a = read_dir_bytes(&dir.join(format!("{what}_a")));
        let b = read_dir_bytes(&dir.join(format!("{what}_b")));
        assert!(!a.is_empty(), "C9 FAIL: {what} produced no files");
        assert_eq!(a.len(), b.len(), "C9 FAIL: {what} file sets differ");
        for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
            assert_eq!(na, nb, "C9 FAIL: {what} names differ");
            assert_eq!(ba, bb, "C9 FAIL: {what}/{na} bytes differ between reruns");
        }
    }
    println!("C9 PASS: gen-data, train, finetune-bayes, eval and ablation rerun byte-identically");
    let _ = std::fs::remove_dir_all(&dir);
}

// ── criterion 10: ablation harness ───────────────────────────────────

#[test]
fn c10_ablation_four_variants() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.size = 16;
    cfg.data.crop = 16;
    cfg.data.n_samples = 10;
    cfg.stage1.epochs = 3;
    cfg.stage1.val_interval = 1;
    let rows = harness::run_ablation(&cfg).unwrap();
    assert_eq!(rows.len(), 4, "C10 FAIL: expected 4 variant rows");
    let names: Vec<&str> = rows.iter().map(|r| r.scenario.as_str()).collect();
    assert_eq!(names, vec!["baseline", "fusion_only", "gates_only", "full"]);
    for r in &rows {
        assert!(r.dice_mean.is_finite(), "C10 FAIL: {} dice not finite", r.scenario);
    }
    let text = bmds_core::io::report_to_string(&rows).unwrap();
    assert_eq!(text.lines().count(), 5, "C10 FAIL: header + 4 rows expected");
    println!("C10 PASS: four wiring variants trained and evaluated\n{text}");
}
