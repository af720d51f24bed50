//! Command-line front end: dataset generation, training, evaluation,
//! strategy benchmarking, and attention diagnostics.
//!
//! Exit codes: 0 on success, 2 for usage and configuration mistakes (bad
//! flags, malformed config files, missing input paths), 1 for failures at
//! runtime (numerical blow-ups, unreadable data). Progress goes to stderr
//! through the `LRTI_LOG` filter (`error`, `info`, `debug`; default `error`);
//! results go to stdout.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use lrti::config::{self, ConfigDoc};
use lrti::data::{
    bicubic_upsample, generate, load_dataset, save_manifest, save_ppm, save_sequence,
    SyntheticSpec, VideoSequence,
};
use lrti::error::{Error, Result};
use lrti::metrics::{psnr_rgb, ssim_rgb, write_eval_csv, EvalRow};
use lrti::model::{
    attention_statistics, forward_full, load_checkpoint, ModelConfig, ModelWeights,
};
use lrti::rng::SplitRng;
use lrti::tensor::Tensor;
use lrti::training::{
    clamp01, compare_strategies, train_loop, write_metrics_csv, Arm, TrainConfig,
};

#[derive(Parser)]
#[command(name = "lrti", version, about = "Recurrent video super-resolution")]
struct Cli {
    /// Seed for everything random in the invoked command.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a flat `key = value` spec file.
    Gen {
        /// Spec file (keys: count, frames, height, width, sprites,
        /// background, scale).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory; receives one subdirectory per sequence plus a
        /// `dataset.txt` manifest.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads across sequences.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Train a model and write its checkpoint.
    Train {
        /// Dataset manifest produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Config file with `model.*` and `train.*` keys.
        #[arg(long)]
        config: PathBuf,
        /// Override the config file's training strategy
        /// (`truncated` or `vanilla`).
        #[arg(long)]
        strategy: Option<String>,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV path (default: checkpoint path with `.metrics.csv`).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Measure PSNR/SSIM of a checkpoint (or the bicubic baseline) on a
    /// dataset.
    Eval {
        /// Checkpoint to evaluate (omit when using `--baseline`).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Per-frame CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write the restored frames as PPM files under this directory.
        #[arg(long)]
        dump_frames: Option<PathBuf>,
        /// Evaluate a reference upscaler instead of a checkpoint; the only
        /// baseline is `bicubic`.
        #[arg(long)]
        baseline: Option<String>,
        /// Worker threads across sequences.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Train one arm per strategy/clip-length combination and compare
    /// memory, speed, and quality.
    Bench {
        /// Dataset manifest; the last sequence is held out for evaluation
        /// when there are at least two.
        #[arg(long)]
        data: PathBuf,
        /// Config file with `model.*` and `train.*` keys shared by all arms.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated arms, each `strategy:clip_len` or
        /// `strategy:clip_len:samples` (e.g. `vanilla:8,truncated:8:4`).
        #[arg(long)]
        arms: String,
        /// Report CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure attention sparsity and concentration for every block of a
    /// checkpoint, under both score activations on identical inputs.
    AttnStats {
        /// Checkpoint to inspect.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset manifest; the first sequence provides the input frames.
        #[arg(long)]
        data: PathBuf,
        /// Per-block, per-frame CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("LRTI_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { spec, out, threads } => cmd_gen(cli.seed, &spec, &out, threads),
        Command::Train {
            data,
            config,
            strategy,
            out,
            metrics,
        } => cmd_train(cli.seed, &data, &config, strategy.as_deref(), &out, metrics),
        Command::Eval {
            ckpt,
            data,
            out,
            dump_frames,
            baseline,
            threads,
        } => cmd_eval(
            ckpt.as_deref(),
            &data,
            &out,
            dump_frames.as_deref(),
            baseline.as_deref(),
            threads,
        ),
        Command::Bench {
            data,
            config,
            arms,
            out,
        } => cmd_bench(cli.seed, &data, &config, &arms, &out),
        Command::AttnStats { ckpt, data, out } => cmd_attn_stats(&ckpt, &data, &out),
    }
}

/// Missing input paths are invocation mistakes: name the path, exit 2.
fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

/// Reject a model whose upscaling factor disagrees with the dataset's
/// high-/low-resolution ratio, naming the offending field.
fn check_scale(videos: &[VideoSequence<f32>], cfg: &ModelConfig) -> Result<()> {
    for v in videos {
        let hr = v.hr[0].shape()[1];
        let lr = v.lr[0].shape()[1];
        if lr * cfg.scale != hr {
            return Err(Error::Config(format!(
                "field \"scale\": model upscales by {} but sequence {:?} is {}x \
                 over its low-resolution frames",
                cfg.scale,
                v.name,
                hr / lr
            )));
        }
    }
    Ok(())
}

/// Run `f(0..n)` on up to `threads` workers, preserving index order in the
/// returned values and reporting the first failure.
fn map_indexed<T, F>(threads: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if threads == 0 {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    if threads == 1 || n <= 1 {
        return (0..n).map(&f).collect();
    }
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let stop = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n || stop.load(Ordering::Relaxed) != 0 {
                    break;
                }
                let r = f(i);
                if r.is_err() {
                    stop.store(1, Ordering::Relaxed);
                }
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    let mut out = Vec::with_capacity(n);
    for slot in slots {
        match slot.into_inner().unwrap() {
            Some(Ok(v)) => out.push(v),
            Some(Err(e)) => return Err(e),
            // A worker bailed early after another failed; surface that
            // failure instead (it was already returned above) — reaching
            // here means indices past the failure point, which only happens
            // when an earlier slot held the error.
            None => return Err(Error::Input("worker stopped before finishing".into())),
        }
    }
    Ok(out)
}

fn cmd_gen(seed: u64, spec_path: &Path, out: &Path, threads: usize) -> Result<()> {
    require_file(spec_path, "spec file")?;
    let mut doc = ConfigDoc::load(spec_path)?;
    let spec = config::gen_spec(&mut doc)?;
    doc.finish()?;
    if spec.count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let root = SplitRng::new(seed);
    let recipe = |i: usize| SyntheticSpec {
        frames: spec.frames,
        height: spec.height,
        width: spec.width,
        sprites: spec.sprites,
        background: spec.background,
        seed: root.split(i as u64).next_u64(),
        scale: spec.scale,
    };
    recipe(0).validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let names: Vec<String> = (0..spec.count).map(|i| format!("seq{i:03}")).collect();
    map_indexed(threads, spec.count, |i| {
        let video = generate::<f32>(&recipe(i))?;
        log::debug!("generated {} ({} frames)", names[i], video.len());
        save_sequence(&out.join(&names[i]), &video)
    })?;
    save_manifest(&out.join("dataset.txt"), &names)?;
    println!("{} sequences written to {}", spec.count, out.display());
    Ok(())
}

fn cmd_train(
    seed: u64,
    data: &Path,
    config_path: &Path,
    strategy: Option<&str>,
    out: &Path,
    metrics: Option<PathBuf>,
) -> Result<()> {
    require_file(data, "dataset manifest")?;
    require_file(config_path, "config file")?;
    let mut doc = ConfigDoc::load(config_path)?;
    let model_cfg = config::model_config(&mut doc)?;
    let mut train_cfg: TrainConfig = config::train_config(&mut doc, seed)?;
    doc.finish()?;
    if let Some(s) = strategy {
        train_cfg.strategy = s.parse()?;
    }
    let videos = load_dataset(data)?;
    check_scale(&videos, &model_cfg)?;
    log::info!(
        "training: {} iters, strategy {}, clip length {}, {} sequences",
        train_cfg.iters,
        train_cfg.strategy,
        train_cfg.clip_len,
        videos.len()
    );
    let outcome = train_loop(&videos, &model_cfg, &train_cfg, Some(out))?;
    let metrics_path = metrics.unwrap_or_else(|| out.with_extension("metrics.csv"));
    write_metrics_csv(&metrics_path, &outcome.metrics)?;
    match outcome.metrics.last() {
        Some(last) => println!(
            "trained {} steps, final loss {:.6e}; checkpoint {}, metrics {}",
            outcome.metrics.len(),
            last.loss,
            out.display(),
            metrics_path.display()
        ),
        None => println!(
            "initialization checkpoint written to {} (0 steps)",
            out.display()
        ),
    }
    Ok(())
}

/// Upscaling factor implied by a sequence's frame shapes.
fn sequence_scale(v: &VideoSequence<f32>) -> Result<usize> {
    let hr = v.hr[0].shape()[1];
    let lr = v.lr[0].shape()[1];
    if lr == 0 || hr % lr != 0 {
        return Err(Error::Input(format!(
            "sequence {:?}: high resolution {hr} is not a multiple of low resolution {lr}",
            v.name
        )));
    }
    Ok(hr / lr)
}

fn cmd_eval(
    ckpt: Option<&Path>,
    data: &Path,
    out: &Path,
    dump_frames: Option<&Path>,
    baseline: Option<&str>,
    threads: usize,
) -> Result<()> {
    require_file(data, "dataset manifest")?;
    let model: Option<(ModelConfig, ModelWeights<f32>)> = match (ckpt, baseline) {
        (Some(_), Some(_)) => {
            return Err(Error::Usage(
                "pass either --ckpt or --baseline, not both".into(),
            ))
        }
        (None, None) => {
            return Err(Error::Usage(
                "one of --ckpt or --baseline is required".into(),
            ))
        }
        (Some(path), None) => {
            require_file(path, "checkpoint")?;
            Some(load_checkpoint::<f32>(path)?)
        }
        (None, Some("bicubic")) => None,
        (None, Some(other)) => {
            return Err(Error::Usage(format!(
                "unknown baseline {other:?}; only \"bicubic\" is supported"
            )))
        }
    };
    let videos = load_dataset(data)?;
    if videos.is_empty() {
        return Err(Error::Input("dataset manifest lists no sequences".into()));
    }
    if let Some((cfg, _)) = &model {
        check_scale(&videos, cfg)?;
    }
    if let Some(dir) = dump_frames {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let per_sequence = map_indexed(threads, videos.len(), |i| {
        let video = &videos[i];
        let outputs: Vec<Tensor<f32>> = match &model {
            Some((cfg, w)) => forward_full(video, w, cfg, false)?.0,
            None => {
                let s = sequence_scale(video)?;
                video
                    .lr
                    .iter()
                    .map(|lr| bicubic_upsample(lr, s))
                    .collect::<Result<_>>()?
            }
        };
        let mut rows = Vec::with_capacity(outputs.len());
        for (t, raw) in outputs.iter().enumerate() {
            let sr = clamp01(raw);
            rows.push(EvalRow {
                sequence: video.name.clone(),
                frame: t,
                psnr_db: psnr_rgb(&sr, &video.hr[t])?,
                ssim: ssim_rgb(&sr, &video.hr[t])?,
            });
            if let Some(dir) = dump_frames {
                let seq_dir = dir.join(&video.name);
                std::fs::create_dir_all(&seq_dir).map_err(|e| Error::io(&seq_dir, e))?;
                save_ppm(&seq_dir.join(format!("{t:06}.ppm")), &sr)?;
            }
        }
        log::debug!("evaluated {} ({} frames)", video.name, rows.len());
        Ok(rows)
    })?;

    let rows: Vec<EvalRow> = per_sequence.iter().flatten().cloned().collect();
    write_eval_csv(out, &rows)?;
    for seq_rows in &per_sequence {
        let n = seq_rows.len() as f64;
        let psnr: f64 = seq_rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        let ssim: f64 = seq_rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        println!(
            "{}: psnr {:.3} dB, ssim {:.4} ({} frames)",
            seq_rows[0].sequence,
            psnr,
            ssim,
            seq_rows.len()
        );
    }
    let n = rows.len() as f64;
    println!(
        "overall: psnr {:.3} dB, ssim {:.4} ({} frames, {} sequences); rows written to {}",
        rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows.len(),
        per_sequence.len(),
        out.display()
    );
    Ok(())
}

fn cmd_bench(seed: u64, data: &Path, config_path: &Path, arms: &str, out: &Path) -> Result<()> {
    require_file(data, "dataset manifest")?;
    require_file(config_path, "config file")?;
    let mut doc = ConfigDoc::load(config_path)?;
    let model_cfg = config::model_config(&mut doc)?;
    let base = config::train_config(&mut doc, seed)?;
    doc.finish()?;
    let arms: Vec<Arm> = arms
        .split(',')
        .map(|a| a.trim().parse())
        .collect::<Result<_>>()?;
    let videos = load_dataset(data)?;
    check_scale(&videos, &model_cfg)?;
    let (train_videos, eval_videos) = if videos.len() >= 2 {
        videos.split_at(videos.len() - 1)
    } else {
        (&videos[..], &videos[..])
    };
    let reports = compare_strategies(train_videos, eval_videos, &model_cfg, &base, &arms)?;
    let mut csv = String::from("arm,peak_tape_bytes,wall_ms_per_iter,final_psnr_db\n");
    for r in &reports {
        csv.push_str(&format!(
            "{},{},{:.3},{:.6}\n",
            r.arm.label(),
            r.peak_tape_bytes,
            r.wall_ms_per_iter(),
            r.final_psnr_db
        ));
        println!(
            "{}: peak tape {} bytes, {:.1} ms/iter, {:.3} dB",
            r.arm.label(),
            r.peak_tape_bytes,
            r.wall_ms_per_iter(),
            r.final_psnr_db
        );
    }
    std::fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_attn_stats(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    require_file(ckpt, "checkpoint")?;
    require_file(data, "dataset manifest")?;
    let (cfg, w) = load_checkpoint::<f32>(ckpt)?;
    let videos = load_dataset(data)?;
    if videos.is_empty() {
        return Err(Error::Input("dataset manifest lists no sequences".into()));
    }
    check_scale(&videos[..1], &cfg)?;
    let rows = attention_statistics(&videos[0], &w, &cfg)?;
    let mut csv = String::from(
        "module,block,frame,relu2_zero_fraction,relu2_top50_mass,\
         softmax_zero_fraction,softmax_top50_mass\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.module,
            r.block,
            r.frame,
            r.relu2.zero_fraction,
            r.relu2.top50_mass,
            r.softmax.zero_fraction,
            r.softmax.top50_mass
        ));
    }
    std::fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    let frames = rows.iter().map(|r| r.frame).max().map_or(0, |m| m + 1);
    for m in 0..cfg.modules {
        for n in 0..cfg.blocks_per_module {
            let block: Vec<_> = rows
                .iter()
                .filter(|r| r.module == m && r.block == n)
                .collect();
            let len = block.len() as f64;
            let zero: f64 = block.iter().map(|r| r.relu2.zero_fraction).sum::<f64>() / len;
            let sharper = block
                .iter()
                .filter(|r| r.relu2.top50_mass >= r.softmax.top50_mass)
                .count();
            println!(
                "module {m} block {n}: mean zero fraction {:.3}, sharper than softmax on {}/{} frames",
                zero,
                sharper,
                block.len()
            );
        }
    }
    println!(
        "{} rows ({} blocks x {} frames) written to {}",
        rows.len(),
        cfg.modules * cfg.blocks_per_module,
        frames,
        out.display()
    );
    Ok(())
}
