//! Command-line interface over the pipeline: dataset generation, the two
//! training stages, evaluation and the experiment harnesses.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Every
//! successful command prints `OK <subcommand>` as its last stdout line.

use std::path::{Path, PathBuf};

use bmds_core::config::ExperimentConfig;
use bmds_core::error::{Error, Result};
use bmds_core::harness::{self, LoadedModel, Predictor};
use bmds_core::io::{self, Checkpoint, Split};
use bmds_core::datagen;

const USAGE: &str = "usage: bmds <subcommand> [flags]

subcommands:
  gen-data        write a synthetic dataset directory        (needs --out)
  train           stage-1 deterministic training             (needs --out)
  finetune-bayes  stage-2 variational fine-tuning            (needs --ckpt, --out)
  eval            evaluate a checkpoint on the test split    (needs --ckpt, --out)
  robustness      scenario battery over fresh seeds          (needs --out)
  sweep-alpha     fusion-scale initialization sweep          (needs --out)
  ensemble        deterministic / ensemble / bayesian rows   (needs --out)
  ablation        all four wiring variants                   (needs --out)
  gradcheck       finite-difference gradient suite
  report <csv..>  print metric CSVs as aligned tables

flags:
  --config <path>   experiment configuration file
  --seed <u64>      override the config seed
  --out <dir>       output directory
  --threads <n>     worker threads (BMDS_THREADS env overrides)
  --ckpt <path>     checkpoint to load
  --force           ignore config-hash mismatch on checkpoint load
  --print-default-config   dump every key with its default and exit";

/// stdout writes must not panic when the consumer closes the pipe early
/// (e.g. `bmds report ... | head`).
fn emit(line: std::fmt::Arguments) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{line}");
}

macro_rules! say {
    ($($t:tt)*) => { emit(format_args!($($t)*)) };
}

#[derive(Debug, Default)]
struct Cli {
    subcommand: String,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    threads: Option<usize>,
    ckpt: Option<PathBuf>,
    force: bool,
    positional: Vec<String>,
}

fn parse_args(args: &[String]) -> std::result::Result<Cli, String> {
    let mut cli = Cli::default();
    let mut it = args.iter();
    cli.subcommand = match it.next() {
        Some(s) => s.clone(),
        None => return Err("missing subcommand".to_string()),
    };
    while let Some(arg) = it.next() {
        let mut value_of = |flag: &str| -> std::result::Result<String, String> {
            it.next().cloned().ok_or_else(|| format!("flag {flag} needs a value"))
        };
        match arg.as_str() {
            "--config" => cli.config = Some(PathBuf::from(value_of("--config")?)),
            "--seed" => {
                let v = value_of("--seed")?;
                cli.seed = Some(v.parse().map_err(|_| format!("bad --seed value '{v}'"))?);
            }
            "--out" => cli.out = Some(PathBuf::from(value_of("--out")?)),
            "--threads" => {
                let v = value_of("--threads")?;
                cli.threads = Some(v.parse().map_err(|_| format!("bad --threads value '{v}'"))?);
            }
            "--ckpt" => cli.ckpt = Some(PathBuf::from(value_of("--ckpt")?)),
            "--force" => cli.force = true,
            other if other.starts_with("--") => return Err(format!("unknown flag {other}")),
            other => cli.positional.push(other.to_string()),
        }
    }
    Ok(cli)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Ok(env_threads) = std::env::var("BMDS_THREADS") {
        cfg.threads = env_threads
            .parse()
            .map_err(|_| Error::config(format!("BMDS_THREADS value '{env_threads}' is not a count")))?;
    }
    if cfg.threads == 0 {
        return Err(Error::config("threads must be >= 1".to_string()));
    }
    Ok(cfg)
}

fn require_out(cli: &Cli) -> std::result::Result<PathBuf, String> {
    cli.out.clone().ok_or_else(|| format!("{} needs --out <dir>", cli.subcommand))
}

fn require_ckpt(cli: &Cli) -> std::result::Result<PathBuf, String> {
    cli.ckpt.clone().ok_or_else(|| format!("{} needs --ckpt <path>", cli.subcommand))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}: {e}", dir.display())))
}

pub fn cli_dispatch(args: &[String]) -> i32 {
    if args.iter().any(|a| a == "--print-default-config") {
        print!("{}", ExperimentConfig::default().dump());
        say!("OK print-default-config");
        return 0;
    }
    let cli = match parse_args(args) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("error: {msg}\n{USAGE}");
            return 1;
        }
    };
    let known = [
        "gen-data",
        "train",
        "finetune-bayes",
        "eval",
        "robustness",
        "sweep-alpha",
        "ensemble",
        "ablation",
        "gradcheck",
        "report",
    ];
    if !known.contains(&cli.subcommand.as_str()) {
        eprintln!("error: unknown subcommand '{}'\n{USAGE}", cli.subcommand);
        return 1;
    }
    let usage_check: std::result::Result<(), String> = match cli.subcommand.as_str() {
        "gen-data" | "train" | "robustness" | "sweep-alpha" | "ensemble" | "ablation" => {
            require_out(&cli).map(|_| ())
        }
        "finetune-bayes" | "eval" => require_out(&cli).and(require_ckpt(&cli)).map(|_| ()),
        "report" => {
            if cli.positional.is_empty() {
                Err("report needs at least one CSV path".to_string())
            } else {
                Ok(())
            }
        }
        _ => Ok(()),
    };
    if let Err(msg) = usage_check {
        eprintln!("error: {msg}\n{USAGE}");
        return 1;
    }
    match run(&cli) {
        Ok(()) => {
            say!("OK {}", cli.subcommand);
            0
        }
        Err(Error::Io { message }) if message.contains("config file") => {
            // a missing or unreadable config file is a usage-level mistake
            eprintln!("error: {message}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match cli.subcommand.as_str() {
        "gen-data" => gen_data(&cfg, &cli.out.clone().expect("usage-checked")),
        "train" => train(&cfg, &cli.out.clone().expect("usage-checked")),
        "finetune-bayes" => finetune(
            &cfg,
            &cli.ckpt.clone().expect("usage-checked"),
            &cli.out.clone().expect("usage-checked"),
            cli.force,
        ),
        "eval" => eval_cmd(
            &cfg,
            &cli.ckpt.clone().expect("usage-checked"),
            &cli.out.clone().expect("usage-checked"),
            cli.force,
        ),
        "robustness" => robustness(&cfg, &cli.out.clone().expect("usage-checked")),
        "sweep-alpha" => sweep_alpha(&cfg, &cli.out.clone().expect("usage-checked")),
        "ensemble" => ensemble(&cfg, &cli.out.clone().expect("usage-checked")),
        "ablation" => ablation(&cfg, &cli.out.clone().expect("usage-checked")),
        "gradcheck" => gradcheck(),
        "report" => report(&cli.positional),
        _ => unreachable!("subcommand validated"),
    }
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let spec = datagen::PhantomSpec {
        size: cfg.data.size,
        num_modalities: cfg.data.num_modalities,
        num_regions: cfg.data.num_regions,
        noise_std: cfg.data.noise_std,
        informative_channel: cfg.data.informative_channel,
        seed: cfg.data.seed,
    };
    let raw = datagen::generate(&spec, cfg.data.n_samples)?;
    let (n_train, n_val, _) = datagen::split_counts(raw.len());
    let tagged: Vec<(datagen::Sample, Split)> = raw
        .into_iter()
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
        .collect::<Result<_>>()?;
    io::write_dataset(out, &tagged)?;
    say!("wrote {} samples to {}", tagged.len(), out.display());
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let outcome = harness::train_stage1(cfg)?;
    outcome.checkpoint.save(&out.join("stage1.ckpt"))?;
    io::write_text(&out.join("train_log.csv"), &outcome.log_csv)?;
    say!(
        "stage-1 done: epochs_run={} best_val_dice={} best_epoch={} alpha={} gamma={}",
        outcome.epochs_run,
        io::format_g6(outcome.best_val_dice),
        outcome.best_epoch,
        outcome.final_alpha.map(io::format_g6).unwrap_or_else(|| "-".to_string()),
        outcome.final_gamma.map(io::format_g6).unwrap_or_else(|| "-".to_string()),
    );
    Ok(())
}

fn finetune(cfg: &ExperimentConfig, ckpt: &Path, out: &Path, force: bool) -> Result<()> {
    ensure_dir(out)?;
    let stage1 = Checkpoint::load(ckpt)?;
    let outcome = harness::finetune_stage2(cfg, &stage1, force)?;
    outcome.checkpoint.save(&out.join("bayes.ckpt"))?;
    io::write_text(&out.join("stage2_log.csv"), &outcome.log_csv)?;
    say!(
        "stage-2 done: epochs={} final_kl={}",
        cfg.stage2.epochs,
        outcome.kl_per_epoch.last().map(|k| io::format_g6(*k)).unwrap_or_else(|| "-".to_string())
    );
    Ok(())
}

fn eval_cmd(cfg: &ExperimentConfig, ckpt_path: &Path, out: &Path, force: bool) -> Result<()> {
    ensure_dir(out)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let dataset = harness::prepare_dataset(cfg)?;
    let opts = harness::EvalOptions::from_config(cfg);
    let loaded = harness::load_model(&ckpt, cfg, force)?;
    let cases = match &loaded {
        LoadedModel::Deterministic(m) => harness::evaluate_cases(
            &Predictor::Deterministic(m),
            &dataset.test,
            &cfg.eval.scenarios,
            &opts,
        )?,
        LoadedModel::Bayesian { body, head } => harness::evaluate_cases(
            &Predictor::Bayesian { body, head },
            &dataset.test,
            &cfg.eval.scenarios,
            &opts,
        )?,
    };
    let rows = harness::aggregate_reports(&cases);
    io::write_report(&rows, &out.join("eval.csv"))?;
    say!("evaluated {} cases over {} scenarios", dataset.test.len(), cfg.eval.scenarios.len());
    Ok(())
}

fn robustness(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let outcome = harness::run_robustness(cfg)?;
    io::write_report(&outcome.combined, &out.join("robustness.csv"))?;
    for (k, (_seed, cases)) in outcome.per_seed.iter().enumerate() {
        let rows = harness::aggregate_reports(cases);
        io::write_report(&rows, &out.join(format!("robustness_seed{k}.csv")))?;
    }
    say!("robustness battery over {} seeds written", outcome.per_seed.len());
    Ok(())
}

fn sweep_alpha(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let rows = harness::run_alpha_sweep(cfg)?;
    io::write_text(&out.join("alpha_sensitivity.csv"), &harness::sweep_to_csv(&rows))?;
    for row in &rows {
        say!(
            "alpha_init={} dice={:?} alpha_final={:?}",
            io::format_g6(row.alpha_init),
            row.dice_per_seed.iter().map(|d| io::format_g6(*d)).collect::<Vec<_>>(),
            row.alpha_final_per_seed.iter().map(|a| io::format_g6(*a)).collect::<Vec<_>>(),
        );
    }
    Ok(())
}

fn ensemble(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let rows = harness::run_ensemble(cfg)?;
    io::write_report(&rows, &out.join("uncertainty_comparison.csv"))?;
    say!("uncertainty comparison rows: {}", rows.len());
    Ok(())
}

fn ablation(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let rows = harness::run_ablation(cfg)?;
    io::write_report(&rows, &out.join("ablation.csv"))?;
    say!("ablation rows: {}", rows.len());
    Ok(())
}

const GRADCHECK_TOLERANCE: f64 = 1e-5;

fn gradcheck() -> Result<()> {
    let report = harness::gradcheck_report()?;
    let mut all_ok = true;
    for (name, err) in &report {
        let ok = *err < GRADCHECK_TOLERANCE;
        all_ok &= ok;
        say!("{name}: max_rel_err={err:.3e} {}", if ok { "PASS" } else { "FAIL" });
    }
    if !all_ok {
        return Err(Error::domain("gradcheck", format!("some checks exceeded {GRADCHECK_TOLERANCE}")));
    }
    Ok(())
}

fn report(paths: &[String]) -> Result<()> {
    for p in paths {
        let text =
            std::fs::read_to_string(p).map_err(|e| Error::io(format!("report file {p}: {e}")))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::io(format!("{p} is empty")))?;
        if header != io::REPORT_HEADER {
            return Err(Error::io(format!("{p} does not carry the metric report header")));
        }
        let rows: Vec<Vec<String>> = std::iter::once(header)
            .chain(lines)
            .map(|l| {
                l.split(',')
                    .map(|c| if c.is_empty() { "-".to_string() } else { c.to_string() })
                    .collect()
            })
            .collect();
        let cols = rows[0].len();
        let mut widths = vec![0usize; cols];
        for row in &rows {
            for (i, cell) in row.iter().enumerate() {
                widths[i] = widths[i].max(cell.len());
            }
        }
        say!("{p}:");
        for row in &rows {
            let line: Vec<String> =
                row.iter().enumerate().map(|(i, c)| format!("{c:>w$}", w = widths[i])).collect();
            say!("  {}", line.join("  "));
        }
    }
    Ok(())
}
