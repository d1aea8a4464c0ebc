//! Command-line entry points: train, eval, predict, explain, bench,
//! gen-data.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
//! failure. Logs go to stderr; machine-readable output to stdout or files
//! under --out.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use malconv::bench;
use malconv::checkpoint;
use malconv::data::{generate_synthetic, load_index, SyntheticSpec, SyntheticTask, TokenSource};
use malconv::error::Error;
use malconv::models::{Arch, LowmemOpts, Mode, Model, ModelConfig};
use malconv::optim::{AdamW, AdamWConfig};
use malconv::train::{evaluate, train, TrainConfig};

/// Inputs longer than this refuse dense mode unless --force.
const DENSE_GUARD_BYTES: usize = 1 << 24;

#[derive(Parser)]
#[command(name = "malconv", version, about = "Byte-level sequence classifiers with length-invariant training memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Malconv,
    #[value(name = "malconv-gcg")]
    MalconvGcg,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Arch {
        match a {
            ArchArg::Malconv => Arch::Malconv,
            ArchArg::MalconvGcg => Arch::MalconvGcg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dense,
    Lowmem,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Dense => Mode::Dense,
            ModeArg::Lowmem => Mode::Lowmem,
        }
    }
}

#[derive(Args)]
struct RunOpts {
    /// Execution path.
    #[arg(long, value_enum, default_value = "lowmem")]
    mode: ModeArg,
    /// Worker threads for the chunked scan.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Coalesce nearby winner regions before recomputation.
    #[arg(long)]
    merge_regions: bool,
    /// Concatenate winner regions instead of exact per-region computation.
    #[arg(long)]
    concat_regions: bool,
    /// Allow dense mode on inputs longer than 2^24 bytes.
    #[arg(long)]
    force: bool,
}

impl RunOpts {
    fn lowmem(&self) -> LowmemOpts {
        LowmemOpts {
            merge: self.merge_regions,
            concat: self.concat_regions,
            workers: self.workers.max(1),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a labeled dataset index (CSV of path,label).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "malconv")]
        model: ArchArg,
        /// JSON file overriding the built-in model config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1e-2)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Override model channels.
        #[arg(long)]
        channels: Option<usize>,
        /// Override kernel width (receptive field in bytes).
        #[arg(long)]
        kernel_width: Option<usize>,
        /// Override convolution stride.
        #[arg(long)]
        stride: Option<usize>,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Evaluate a checkpoint on a labeled dataset index.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Score one or more files.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Show per-channel winner offsets, gate values, and winner regions.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        file: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Measure forward-pass time and peak activation memory vs length.
    Bench {
        #[arg(long, value_enum, default_value = "malconv")]
        model: ArchArg,
        /// Comma-separated lengths; accepts 2^N.
        #[arg(long, default_value = "2^16,2^18,2^20,2^22")]
        lengths: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Generate a synthetic labeled corpus.
    GenData {
        /// JSON spec file; flags below override nothing when given.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "b")]
        task: String,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value = "2^15")]
        len_min: String,
        #[arg(long, default_value = "2^17")]
        len_max: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Copies of each planted motif per file (labels are presence-based).
        #[arg(long, default_value_t = 1)]
        copies: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: u64,
    build: String,
    started_at: String,
    finished_at: String,
    outputs: Vec<String>,
}

fn manifest(
    command: &str,
    config: serde_json::Value,
    seed: u64,
    started_at: chrono::DateTime<chrono::Utc>,
    outputs: &[&Path],
) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        config,
        seed,
        build: format!("malconv {}", env!("CARGO_PKG_VERSION")),
        started_at: started_at.to_rfc3339(),
        finished_at: chrono::Utc::now().to_rfc3339(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    }
}

fn emit_manifest(m: &RunManifest, out_dir: Option<&Path>) -> malconv::Result<()> {
    let text = serde_json::to_string_pretty(m)?;
    match out_dir {
        Some(dir) => {
            let path = dir.join("manifest.json");
            std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        None => eprintln!("{text}"),
    }
    Ok(())
}

fn parse_len(s: &str) -> malconv::Result<usize> {
    let s = s.trim();
    if let Some(exp) = s.strip_prefix("2^") {
        let e: u32 = exp
            .parse()
            .map_err(|_| Error::Config(format!("bad length {s}")))?;
        return Ok(1usize << e);
    }
    s.parse()
        .map_err(|_| Error::Config(format!("bad length {s}")))
}

fn guard_dense(mode: Mode, len: usize, force: bool) -> malconv::Result<()> {
    if mode == Mode::Dense && len > DENSE_GUARD_BYTES && !force {
        return Err(Error::Config(format!(
            "dense mode on a {len}-byte input would materialize all activations \
             (> {DENSE_GUARD_BYTES} bytes); pass --force to proceed or use --mode lowmem"
        )));
    }
    Ok(())
}

fn exit_for(e: &Error) -> ExitCode {
    let code = match e {
        Error::Config(_) => 1u8,
        Error::NonFinite(_) => 3,
        _ => 2,
    };
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version on stdout with success status
            let benign = e.use_stderr();
            e.print().ok();
            return if benign { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}

fn run(cli: Cli) -> malconv::Result<()> {
    let started = chrono::Utc::now();
    match cli.command {
        Command::Train {
            data,
            model,
            config,
            epochs,
            batch,
            lr,
            weight_decay,
            seed,
            out,
            channels,
            kernel_width,
            stride,
            run,
        } => {
            let mut model_cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| Error::io(path.display().to_string(), e))?;
                    serde_json::from_str::<ModelConfig>(&text)?
                }
                None => ModelConfig::for_arch(model.into()),
            };
            if let Some(c) = channels {
                model_cfg.channels = c;
            }
            if let Some(k) = kernel_width {
                model_cfg.kernel_width = k;
            }
            if let Some(s) = stride {
                model_cfg.stride = s;
            }
            model_cfg.validate()?;
            let index = load_index(&data)?;
            if run.force || matches!(Mode::from(run.mode), Mode::Lowmem) {
                // no guard needed
            } else {
                for rec in &index.records {
                    let len = std::fs::metadata(&rec.path)
                        .map_err(|e| Error::io(rec.path.display().to_string(), e))?
                        .len() as usize;
                    guard_dense(run.mode.into(), len, run.force)?;
                }
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            let train_cfg = TrainConfig {
                batch_size: batch,
                epochs,
                seed,
                mode: run.mode.into(),
                merge_regions: run.merge_regions,
                concat_regions: run.concat_regions,
                workers: run.workers,
            };
            let adamw = AdamWConfig {
                lr,
                weight_decay,
                ..Default::default()
            };
            let mut model = Model::new(&model_cfg, seed)?;
            let mut opt = AdamW::new(adamw);
            let log_path = out.join("train_log.jsonl");
            let mut log = std::fs::File::create(&log_path)
                .map_err(|e| Error::io(log_path.display().to_string(), e))?;
            let out_dir = out.clone();
            let records = train(&mut model, &mut opt, &index, &train_cfg, &mut |rec| {
                use std::io::Write;
                let line = serde_json::to_string(rec).expect("epoch record serializes");
                println!("{line}");
                let _ = writeln!(log, "{line}");
                true
            })?;
            let ckpt_path = out.join("model.ckpt");
            checkpoint::save(&ckpt_path, &mut model, Some(&opt))?;
            let m = manifest(
                "train",
                json!({
                    "model": model_cfg,
                    "train": train_cfg,
                    "optim": adamw,
                    "data": data.display().to_string(),
                    "epochs_run": records.len(),
                }),
                seed,
                started,
                &[&ckpt_path, &log_path],
            );
            emit_manifest(&m, Some(&out_dir))?;
        }
        Command::Eval { data, ckpt, out, run } => {
            let (model, _) = checkpoint::load(&ckpt)?;
            let index = load_index(&data)?;
            if matches!(Mode::from(run.mode), Mode::Dense) && !run.force {
                for rec in &index.records {
                    let len = std::fs::metadata(&rec.path)
                        .map_err(|e| Error::io(rec.path.display().to_string(), e))?
                        .len() as usize;
                    guard_dense(run.mode.into(), len, run.force)?;
                }
            }
            let report = evaluate(&model, &index, run.mode.into(), &run.lowmem())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            let m = manifest(
                "eval",
                json!({"ckpt": ckpt.display().to_string(), "data": data.display().to_string(), "report": report}),
                0,
                started,
                &[],
            );
            emit_manifest(&m, out.as_deref())?;
        }
        Command::Predict { ckpt, files, out, run } => {
            let (model, _) = checkpoint::load(&ckpt)?;
            let mut scores = Vec::new();
            for file in &files {
                let src = TokenSource::open(file, model.min_token_len())?;
                guard_dense(run.mode.into(), src.len(), run.force)?;
                let logit = model.predict(&src, run.mode.into(), &run.lowmem())?;
                let prob = 1.0 / (1.0 + (-logit as f64).exp());
                println!("{prob:.6}\t{logit:.6}\t{}", file.display());
                scores.push(json!({"file": file.display().to_string(), "logit": logit, "prob": prob}));
            }
            let m = manifest(
                "predict",
                json!({"ckpt": ckpt.display().to_string(), "scores": scores}),
                0,
                started,
                &[],
            );
            emit_manifest(&m, out.as_deref())?;
        }
        Command::Explain { ckpt, file, out, run } => {
            let (model, _) = checkpoint::load(&ckpt)?;
            let src = TokenSource::open(&file, model.min_token_len())?;
            let exp = model.explain(&src, &run.lowmem())?;
            println!("channel  pre_off      pre_val   pre_gate  post_off     post_val  post_gate");
            for c in &exp.channels {
                println!(
                    "{:7}  {:10}  {:9.4}  {:9.4}  {:10}  {:9.4}  {:9.4}",
                    c.channel,
                    c.pre_gate_offset,
                    c.pre_gate_value,
                    c.pre_gate_gate,
                    c.post_gate_offset,
                    c.post_gate_value,
                    c.post_gate_gate
                );
            }
            println!();
            println!("region_start  region_len  channels");
            for r in &exp.regions {
                println!("{:12}  {:10}  {:8}", r.byte_start, r.byte_len, r.channels);
            }
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
                let path = dir.join("explanation.json");
                std::fs::write(&path, serde_json::to_string_pretty(&exp)?)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
            }
            let m = manifest(
                "explain",
                json!({"ckpt": ckpt.display().to_string(), "file": file.display().to_string()}),
                0,
                started,
                &[],
            );
            emit_manifest(&m, out.as_deref())?;
        }
        Command::Bench { model, lengths, seed, out, run } => {
            let lengths: Vec<usize> = lengths
                .split(',')
                .map(parse_len)
                .collect::<malconv::Result<_>>()?;
            let cfg = ModelConfig::for_arch(model.into());
            let net = Model::new(&cfg, seed)?;
            let dir = tempfile::tempdir().map_err(|e| Error::io("tempdir", e))?;
            let points = bench::run(&net, dir.path(), &lengths, seed, run.mode.into(), &run.lowmem())?;
            println!("length        seconds      peak_bytes   bytes_per_sec");
            for p in &points {
                println!(
                    "{:12}  {:11.3}  {:12}  {:13.0}",
                    p.len,
                    p.wall_seconds,
                    p.peak_activation_bytes,
                    p.len as f64 / p.wall_seconds
                );
            }
            let xs: Vec<f64> = points.iter().map(|p| p.len as f64).collect();
            let ys: Vec<f64> = points.iter().map(|p| p.wall_seconds).collect();
            if points.len() >= 2 {
                let (slope, intercept, r2) = bench::linear_fit(&xs, &ys);
                println!(
                    "fit: seconds = {slope:.3e} * bytes + {intercept:.3}, r2 = {r2:.4}"
                );
                let peaks: Vec<usize> =
                    points.iter().map(|p| p.peak_activation_bytes).collect();
                let spread = *peaks.iter().max().unwrap() as f64
                    / (*peaks.iter().min().unwrap()).max(1) as f64;
                println!("peak activation spread across lengths: {spread:.3}x");
            }
            let m = manifest(
                "bench",
                json!({"model": cfg, "lengths": lengths, "mode": Mode::from(run.mode), "points": points}),
                seed,
                started,
                &[],
            );
            emit_manifest(&m, out.as_deref())?;
        }
        Command::GenData { spec, task, n, len_min, len_max, seed, copies, out } => {
            let spec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| Error::io(path.display().to_string(), e))?;
                    serde_json::from_str::<SyntheticSpec>(&text)?
                }
                None => SyntheticSpec {
                    task: match task.as_str() {
                        "a" | "A" => SyntheticTask::A,
                        "b" | "B" => SyntheticTask::B,
                        other => {
                            return Err(Error::Config(format!("unknown task {other}")))
                        }
                    },
                    n_samples: n,
                    len_min: parse_len(&len_min)?,
                    len_max: parse_len(&len_max)?,
                    seed,
                    motifs: Vec::new(),
                    sep_min: 2560,
                    key_window: 1024,
                    copies,
                },
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            let index = generate_synthetic(&spec, &out)?;
            println!(
                "wrote {} samples to {} (labels.csv included)",
                index.records.len(),
                out.display()
            );
            let m = manifest("gen-data", json!({"spec": spec}), spec.seed, started, &[&out]);
            emit_manifest(&m, Some(&out))?;
        }
    }
    Ok(())
}
