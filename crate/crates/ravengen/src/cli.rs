//! Command-line entry points: dataset synthesis, training, evaluation,
//! sample generation (montages), ablation sweeps, and report formatting.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::data::{self, ProblemSource, RPMProblem, RuleSpec, SynthDataset};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, format_ablation_table, format_report_table, Baseline, EvalOptions, EvalReport,
};
use crate::nets::RES;
use crate::pipeline::{forward_generation, generation_noise_dim};
use crate::trainer::{checkpoint_load, checkpoint_save, run_training, AblationKind};

#[derive(Parser)]
#[command(
    name = "ravengen",
    version,
    about = "Generate answers to Raven-style progressive matrices"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset manifest (optionally materialized records)
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Comma-separated rule specs, e.g. "shape.number.constant"
        #[arg(long)]
        rules: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the records as an archive in the public format
        #[arg(long, default_value_t = false)]
        materialize: bool,
    },
    /// Train a model from a config file
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// key=value config overrides
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Print a progress line every N steps (0 = quiet)
        #[arg(long, default_value_t = 50)]
        progress_every: u64,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest (.cfg/.manifest) or record archive (.zip)
        #[arg(long)]
        data: PathBuf,
        /// Baseline candidate source, or "all"
        #[arg(long, default_value = "generated")]
        baseline: String,
        #[arg(long)]
        problems: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate answer samples for one problem as a montage image
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        problem: usize,
        #[arg(long, default_value_t = 3)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate ablation variants from scratch
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variant names (see trainer docs), or "all"
        #[arg(long, default_value = "full")]
        variants: String,
        /// Comma-separated seeds; every variant runs once per seed
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Merge evaluation logs into a summary table
    Report {
        /// eval_report.jsonl files
        #[arg(long, required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Parses argv and executes; returns the process exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::SynthData {
            out,
            count,
            rules,
            seed,
            materialize,
        } => synth_data(&out, count, &rules, seed, materialize),
        Command::Train {
            config,
            out,
            seed,
            overrides,
            progress_every,
        } => train(&config, &out, seed, &overrides, progress_every),
        Command::Eval {
            checkpoint,
            data,
            baseline,
            problems,
            seed,
            out,
        } => eval_cmd(&checkpoint, &data, &baseline, problems, seed, &out),
        Command::Generate {
            checkpoint,
            data,
            problem,
            samples,
            seed,
            out,
        } => generate_cmd(&checkpoint, &data, problem, samples, seed, &out),
        Command::Ablate {
            config,
            variants,
            seeds,
            out,
            overrides,
        } => ablate(&config, &variants, seeds.as_deref(), &out, &overrides),
        Command::Report { inputs } => report(&inputs),
    }
}

fn draw_seed() -> u64 {
    use rand::Rng;
    rand::rng().random::<u64>()
}

/// Every run records what it ran: the verb, the seed, the crate version,
/// a content hash, and the effective config snapshot.
fn write_manifest(dir: &Path, verb: &str, seed: u64, config_snapshot: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let version = env!("CARGO_PKG_VERSION");
    let mut hasher = Sha256::new();
    hasher.update(version.as_bytes());
    hasher.update(config_snapshot.as_bytes());
    hasher.update(seed.to_le_bytes());
    let hash = hex_string(&hasher.finalize());
    let text = format!(
        "format = ravengen-run-manifest-v1\nverb = {verb}\nseed = {seed}\nversion = {version}\ncontent_hash = sha256:{hash}\n# --- effective config ---\n{config_snapshot}"
    );
    std::fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn synth_data(out: &Path, count: usize, rules: &str, seed: Option<u64>, materialize: bool) -> Result<()> {
    let specs = rules
        .split(',')
        .map(|s| s.trim().parse::<RuleSpec>())
        .collect::<Result<Vec<_>>>()?;
    let seed = seed.unwrap_or_else(draw_seed);
    let ds = SynthDataset::new(specs, count, seed)?;
    std::fs::create_dir_all(out)?;
    let manifest_path = out.join("dataset.manifest");
    ds.save(&manifest_path)?;
    write_manifest(out, "synth-data", seed, &ds.to_manifest())?;
    println!("wrote {}", manifest_path.display());
    if materialize {
        let archive_path = out.join("records.zip");
        let problems: Vec<RPMProblem> = (0..count).map(|i| ds.get(i)).collect::<Result<Vec<_>>>()?;
        let n = data::write_archive(problems.iter(), &archive_path)?;
        println!("wrote {} records to {}", n, archive_path.display());
    }
    Ok(())
}

fn resolve_seed(flag: Option<u64>, cfg: &mut ExperimentConfig) {
    if let Some(s) = flag {
        cfg.trainer.seed = s;
        if let crate::config::DataConfig::Synth(ds) = &mut cfg.data {
            if !cfg.seed_specified {
                ds.seed = s;
            }
        }
    } else if !cfg.seed_specified {
        cfg.trainer.seed = draw_seed();
    }
}

fn train(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    overrides: &[String],
    progress_every: u64,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load_with_overrides(config_path, overrides)?;
    resolve_seed(seed, &mut cfg);
    let data = cfg.open_data()?;
    std::fs::create_dir_all(out)?;
    write_manifest(out, "train", cfg.trainer.seed, &cfg.snapshot())?;

    let t0 = std::time::Instant::now();
    let state = run_training(&cfg.trainer, data.as_ref(), Some(out), |m| {
        if progress_every > 0 && m.iteration % progress_every == 0 {
            println!(
                "iter {:>6} epoch {:>2} phase {} total {:.4} margin {:.4}",
                m.iteration, m.epoch, m.phase, m.total, m.margin
            );
        }
    })?;
    println!(
        "trained {} iterations in {:.1}s; checkpoint at {}",
        state.iteration,
        t0.elapsed().as_secs_f64(),
        out.join("checkpoint.ckpt").display()
    );
    Ok(())
}

fn open_source(path: &Path) -> Result<Box<dyn ProblemSource>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("zip") => Ok(Box::new(data::load_archive_index(path)?)),
        _ => Ok(Box::new(SynthDataset::load(path)?)),
    }
}

fn eval_cmd(
    checkpoint: &Path,
    data_path: &Path,
    baseline: &str,
    problems: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let state = checkpoint_load(checkpoint)?;
    let source = open_source(data_path)?;
    let seed = seed.unwrap_or(state.config.seed);
    let opts = EvalOptions {
        problems: problems.unwrap_or(500),
        batch_size: 16,
        seed,
        with_fid: true,
    };

    let baselines: Vec<Baseline> = if baseline == "all" {
        Baseline::ALL.to_vec()
    } else {
        vec![baseline.parse()?]
    };

    std::fs::create_dir_all(out)?;
    let mut log = String::new();
    let mut reports = Vec::new();
    for b in baselines {
        let report = evaluate(&state.model, source.as_ref(), b, &opts)?;
        log.push_str(&serde_json::to_string(&report).map_err(|e| Error::Eval(e.to_string()))?);
        log.push('\n');
        reports.push(report);
    }
    std::fs::write(out.join("eval_report.jsonl"), &log)?;
    write_manifest(
        out,
        "eval",
        seed,
        &format!(
            "checkpoint = {}\ndata = {}\nproblems = {}\n",
            checkpoint.display(),
            data_path.display(),
            opts.problems
        ),
    )?;
    print!("{}", format_report_table(&reports));
    Ok(())
}

fn to_gray(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Montage: the 3x3 context grid (missing cell left dark) with the
/// sampled answers in a row beneath.
fn montage(problem: &RPMProblem, samples: &[Vec<f32>]) -> image::GrayImage {
    let pad = 2u32;
    let cell = RES as u32;
    let cols = 3.max(samples.len() as u32);
    let width = cols * cell + (cols + 1) * pad;
    let height = 4 * cell + 6 * pad;
    let mut img = image::GrayImage::from_pixel(width, height, image::Luma([32u8]));

    let mut blit = |data: &[f32], cx: u32, cy: u32| {
        for y in 0..cell {
            for x in 0..cell {
                let v = data[(y * cell + x) as usize];
                img.put_pixel(cx + x, cy + y, image::Luma([to_gray(v)]));
            }
        }
    };

    for (i, panel) in problem.context.iter().enumerate() {
        let (r, c) = (i / 3, i % 3);
        blit(
            &panel.data,
            pad + c as u32 * (cell + pad),
            pad + r as u32 * (cell + pad),
        );
    }
    let sample_row = 3 * (cell + pad) + 3 * pad;
    for (i, s) in samples.iter().enumerate() {
        blit(s, pad + i as u32 * (cell + pad), sample_row);
    }
    img
}

fn generate_cmd(
    checkpoint: &Path,
    data_path: &Path,
    problem_index: usize,
    samples: usize,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    if samples == 0 {
        return Err(Error::config("--samples must be at least 1"));
    }
    let state = checkpoint_load(checkpoint)?;
    let source = open_source(data_path)?;
    let problem = source.get(problem_index)?;
    let seed = seed.unwrap_or(state.config.seed);

    // One batched pass: the context repeated per sample, distinct noise.
    let mut ctx = Vec::with_capacity(samples * 8 * RES * RES);
    for _ in 0..samples {
        for img in &problem.context {
            ctx.extend_from_slice(&img.data);
        }
    }
    let context = candle_core::Tensor::from_vec(
        ctx,
        (samples, 8, 1, RES, RES),
        &candle_core::Device::Cpu,
    )
    .map_err(Error::from)?;
    let dim = generation_noise_dim(&state.model);
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ problem_index as u64);
    let noise: Vec<f32> = (0..samples * dim)
        .map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal))
        .collect();
    let noise = candle_core::Tensor::from_vec(noise, (samples, dim), &candle_core::Device::Cpu)
        .map_err(Error::from)?;
    let trace = forward_generation(&state.model, &context, &noise, crate::nn::Mode::Eval)?;
    let images = trace.image.reshape((samples, RES * RES)).map_err(Error::from)?;
    let sample_data = images.to_vec2::<f32>().map_err(Error::from)?;

    std::fs::create_dir_all(out)?;
    let png = montage(&problem, &sample_data);
    let path = out.join(format!("problem_{problem_index:05}_samples.png"));
    png.save(&path)
        .map_err(|e| Error::config(format!("montage write failed: {e}")))?;
    write_manifest(
        out,
        "generate",
        seed,
        &format!(
            "checkpoint = {}\ndata = {}\nproblem = {problem_index}\nsamples = {samples}\n",
            checkpoint.display(),
            data_path.display()
        ),
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct AblationRow {
    variant: String,
    label: String,
    seeds: Vec<u64>,
    accuracy_per_seed: Vec<f64>,
    accuracy_mean: f64,
    fid_mean: Option<f64>,
}

fn ablate(
    config_path: &Path,
    variants: &str,
    seeds: Option<&str>,
    out: &Path,
    overrides: &[String],
) -> Result<()> {
    let base = ExperimentConfig::load_with_overrides(config_path, overrides)?;
    let variant_list: Vec<AblationKind> = if variants.trim() == "all" {
        AblationKind::ALL.to_vec()
    } else {
        variants
            .split(',')
            .map(|v| v.trim().parse::<AblationKind>())
            .collect::<Result<Vec<_>>>()?
    };
    let seed_list: Vec<u64> = match seeds {
        Some(s) => s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<u64>()
                    .map_err(|e| Error::config(format!("bad seed {v:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?,
        None => vec![base.trainer.seed],
    };

    std::fs::create_dir_all(out)?;
    write_manifest(
        out,
        "ablate",
        seed_list[0],
        &format!(
            "{}ablate.variants = {}\nablate.seeds = {}\n",
            base.snapshot(),
            variant_list
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
            seed_list
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ),
    )?;

    let mut rows = Vec::new();
    let mut table_rows = Vec::new();
    for variant in &variant_list {
        let mut accs = Vec::new();
        let mut fids = Vec::new();
        for seed in &seed_list {
            let mut cfg = base.clone();
            cfg.trainer.ablation = *variant;
            cfg.trainer.seed = *seed;
            cfg.trainer.epoch_checkpoints = false;
            let data = cfg.open_data()?;
            let run_dir = out.join(format!("{variant}_seed{seed}"));
            let state = run_training(&cfg.trainer, data.as_ref(), Some(&run_dir), |_| {})?;
            let report = evaluate(
                &state.model,
                data.as_ref(),
                Baseline::Generated,
                &EvalOptions {
                    problems: cfg.eval.problems,
                    batch_size: cfg.eval.batch_size,
                    seed: *seed,
                    with_fid: true,
                },
            )?;
            println!(
                "{} seed {}: acc {:.3} fid {:?}",
                variant, seed, report.accuracy, report.fid
            );
            accs.push(report.accuracy);
            if let Some(f) = report.fid {
                fids.push(f);
            }
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let fid_mean = if fids.is_empty() {
            None
        } else {
            Some(fids.iter().sum::<f64>() / fids.len() as f64)
        };
        table_rows.push((*variant, mean, fid_mean));
        rows.push(AblationRow {
            variant: variant.to_string(),
            label: variant.label().to_string(),
            seeds: seed_list.clone(),
            accuracy_per_seed: accs,
            accuracy_mean: mean,
            fid_mean,
        });
    }

    let mut log = String::new();
    for row in &rows {
        log.push_str(&serde_json::to_string(row).map_err(|e| Error::Eval(e.to_string()))?);
        log.push('\n');
    }
    std::fs::write(out.join("ablation_report.jsonl"), &log)?;
    print!("{}", format_ablation_table(&table_rows));
    Ok(())
}

fn report(inputs: &[PathBuf]) -> Result<()> {
    let mut reports: Vec<EvalReport> = Vec::new();
    for path in inputs {
        for line in std::fs::read_to_string(path)?.lines() {
            if line.trim().is_empty() {
                continue;
            }
            reports.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::Eval(format!("{}: {e}", path.display())))?,
            );
        }
    }
    reports.sort_by_key(|r| {
        Baseline::ALL
            .iter()
            .position(|b| *b == r.baseline)
            .unwrap_or(usize::MAX)
    });
    print!("{}", format_report_table(&reports));
    for r in &reports {
        if r.per_rule.len() > 1 {
            println!("\nper-rule ({}):", r.baseline);
            for rule in &r.per_rule {
                let fid_s = rule
                    .fid
                    .map(|f| format!("{f:.4}"))
                    .unwrap_or_else(|| "-".to_string());
                println!(
                    "  {:<24} acc {:>6.1}%  fid {:>10}  n={}",
                    rule.rule,
                    100.0 * rule.accuracy,
                    fid_s,
                    rule.problems
                );
            }
        }
    }
    Ok(())
}

/// Re-export for integration tests: saves a fresh checkpoint so other
/// commands can pick it up.
pub fn save_state_checkpoint(state: &crate::trainer::TrainState, path: &Path) -> Result<()> {
    checkpoint_save(state, path)
}
