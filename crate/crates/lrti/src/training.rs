//! Clip-based recurrent training with frozen boundary states.
//!
//! The strategy: run the whole sequence once with gradient recording
//! disabled to cache every module's hidden states, then repeatedly sample a
//! short clip, re-run only that clip with the cached states entering at its
//! edges as constants, and backpropagate. The gradient tape — the memory
//! that dominates recurrent training — therefore scales with the clip
//! length while the model still sees information propagated across the full
//! sequence. The vanilla baseline trains on the same clips without the
//! cached boundaries, so its reach ends at the clip edge.
//!
//! Also here: the Adam-style optimizer, the cosine learning-rate schedule,
//! the metrics log, and a side-by-side harness that trains both strategies
//! at several clip lengths and reports peak tape bytes, wall time, and
//! evaluation PSNR per arm.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::data::VideoSequence;
use crate::error::{Error, Result};
use crate::metrics::psnr_rgb;
use crate::model::{
    forward_clip, forward_full, save_checkpoint, ModelConfig, ModelWeights,
};
use crate::propagation::{HiddenStateCache, ModuleBoundary};
use crate::rng::SplitRng;
use crate::tensor::{Elem, Gradients, Recording, Tensor};

/// Learning-rate floor the cosine schedule decays to.
pub const LR_FLOOR: f64 = 1e-7;
/// First-moment decay.
pub const ADAM_BETA1: f64 = 0.9;
/// Second-moment decay.
pub const ADAM_BETA2: f64 = 0.99;
/// Denominator stabilizer.
pub const ADAM_EPS: f64 = 1e-8;

/// How clips are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Clips seeded with hidden states cached by a full-sequence pass.
    Truncated,
    /// Clips seeded with zeros: plain backpropagation through the clip only.
    Vanilla,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Truncated => "truncated",
            Strategy::Vanilla => "vanilla",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truncated" => Ok(Strategy::Truncated),
            "vanilla" => Ok(Strategy::Vanilla),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?}; expected \"truncated\" or \"vanilla\""
            ))),
        }
    }
}

/// Training hyper-parameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Frames per sampled clip (L).
    pub clip_len: usize,
    /// Clips trained per video visit before the cache is rebuilt (N_s).
    pub samples_per_video: usize,
    /// Total optimizer steps; 0 performs no updates, which is how an
    /// untouched initialization checkpoint is materialized.
    pub iters: usize,
    /// Cosine-schedule starting learning rate.
    pub base_lr: f64,
    pub seed: u64,
    pub strategy: Strategy,
    /// Videos per step; only 1 is supported.
    pub batch: usize,
    /// Write a checkpoint every this many steps (0 = only on completion).
    pub save_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 {
            return Err(Error::Config("clip_len must be at least 1".into()));
        }
        if self.samples_per_video == 0 {
            return Err(Error::Config("samples_per_video must be at least 1".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!(
                "base_lr must be positive and finite, got {}",
                self.base_lr
            )));
        }
        if self.batch != 1 {
            return Err(Error::Config(format!(
                "only batch size 1 is supported, got {}",
                self.batch
            )));
        }
        Ok(())
    }
}

/// Cosine decay from `base_lr` down to [`LR_FLOOR`], hitting the base at
/// step 0 and the floor at the final step.
pub fn cosine_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    if cfg.iters <= 1 {
        return cfg.base_lr;
    }
    let x = iter.min(cfg.iters - 1) as f64 / (cfg.iters - 1) as f64;
    LR_FLOOR + (cfg.base_lr - LR_FLOOR) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// One training clip: its frame range, the frames themselves, the matching
/// high-resolution targets, and per-module boundary states (constants).
#[derive(Clone, Debug)]
pub struct ClipSample<E: Elem> {
    pub t_start: usize,
    pub frames: Vec<Tensor<E>>,
    pub targets: Vec<Tensor<E>>,
    pub boundaries: Vec<ModuleBoundary<E>>,
}

impl<E: Elem> ClipSample<E> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Draw a clip start uniformly over every feasible position and assemble
/// the sample. With a cache the boundary states come from it value-only;
/// without one they stay empty (zeros) — the vanilla baseline.
pub fn sample_clip<E: Elem>(
    video: &VideoSequence<E>,
    cache: Option<&HiddenStateCache<E>>,
    clip_len: usize,
    modules: usize,
    rng: &mut SplitRng,
) -> Result<ClipSample<E>> {
    let t = video.len();
    if clip_len == 0 || clip_len > t {
        return Err(Error::Config(format!(
            "clip length {clip_len} does not fit a {t}-frame sequence"
        )));
    }
    if let Some(c) = cache {
        if !c.is_complete() || c.t_len() != t || c.n_modules() != modules {
            return Err(Error::Config(format!(
                "hidden-state cache ({} modules, {} frames) does not match \
                 {modules} modules over {t} frames",
                c.n_modules(),
                c.t_len()
            )));
        }
    }
    let t_start = rng.below((t - clip_len + 1) as u64) as usize;
    let boundaries = match cache {
        Some(c) => c.clip_boundary(t_start, clip_len),
        None => (0..modules).map(|_| ModuleBoundary::empty()).collect(),
    };
    Ok(ClipSample {
        t_start,
        frames: video.lr[t_start..t_start + clip_len].to_vec(),
        targets: video.hr[t_start..t_start + clip_len].to_vec(),
        boundaries,
    })
}

/// Mean Charbonnier distance between reconstructed and target frames.
fn clip_loss<E: Elem>(sr: &[Tensor<E>], targets: &[Tensor<E>]) -> Result<Tensor<E>> {
    let mut acc = sr[0].charbonnier_loss(&targets[0])?;
    for (out, hr) in sr.iter().zip(targets).skip(1) {
        acc = acc.add(&out.charbonnier_loss(hr)?)?;
    }
    Ok(acc.scale(1.0 / sr.len() as f64))
}

/// Forward the clip under a fresh recording and return the loss value, the
/// tape size the forward pass retained, and the parameter gradients.
pub fn clip_gradients<E: Elem>(
    video: &VideoSequence<E>,
    sample: &ClipSample<E>,
    weights: &ModelWeights<E>,
    cfg: &ModelConfig,
) -> Result<(f64, usize, Gradients<E>)> {
    let rec = Recording::<E>::start()?;
    let sr = forward_clip(
        video,
        sample.t_start,
        sample.len(),
        &sample.boundaries,
        weights,
        cfg,
    )?;
    let loss = clip_loss(&sr, &sample.targets)?;
    let loss_val = loss.data()[0].to64();
    if !loss_val.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss {loss_val} on clip [{}, {})",
            sample.t_start,
            sample.t_start + sample.len()
        )));
    }
    let tape_bytes = rec.stats().bytes;
    let grads = rec.backward(&loss)?;
    Ok((loss_val, tape_bytes, grads))
}

/// Adam-style optimizer with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam<E: Elem> {
    steps: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Elem> Adam<E> {
    pub fn new(params: &[Tensor<E>]) -> Self {
        Adam {
            steps: 0,
            m: params.iter().map(|p| vec![E::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![E::zero(); p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. Parameters missing from `grads` are treated as having a
    /// zero gradient (their moments still decay).
    pub fn apply(
        &mut self,
        params: &mut [Tensor<E>],
        grads: &Gradients<E>,
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.steps as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.steps as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads.get(p);
            let mut data = Vec::with_capacity(p.numel());
            for (j, &pv) in p.data().iter().enumerate() {
                let gj = g.map_or(0.0, |g| g[j].to64());
                let mj = ADAM_BETA1 * self.m[i][j].to64() + (1.0 - ADAM_BETA1) * gj;
                let vj = ADAM_BETA2 * self.v[i][j].to64() + (1.0 - ADAM_BETA2) * gj * gj;
                self.m[i][j] = E::from64(mj);
                self.v[i][j] = E::from64(vj);
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
                data.push(E::from64(pv.to64() - update));
            }
            *p = Tensor::from_vec(p.shape(), data)?.requiring_grad();
        }
        Ok(())
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepResult {
    pub loss: f64,
    pub tape_bytes: usize,
}

/// One gradient step on a sampled clip: forward, Charbonnier loss against
/// the clip's targets, backward, parameter update. The tape covers only the
/// clip; whatever the boundary states summarize costs no gradient memory.
pub fn train_step_truncated<E: Elem>(
    video: &VideoSequence<E>,
    sample: &ClipSample<E>,
    params: &mut [Tensor<E>],
    opt: &mut Adam<E>,
    cfg: &ModelConfig,
    lr: f64,
) -> Result<StepResult> {
    let weights = ModelWeights::from_params(cfg, params)?;
    let (loss, tape_bytes, grads) = clip_gradients(video, sample, &weights, cfg)?;
    opt.apply(params, &grads, lr)?;
    Ok(StepResult { loss, tape_bytes })
}

/// One metrics-log line per optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct MetricsRow {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub tape_bytes_peak: usize,
    pub wall_ms: f64,
}

/// Write the metrics log as CSV.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from("iter,loss,lr,tape_bytes_peak,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.8e},{:.8e},{},{:.3}\n",
            r.iter, r.loss, r.lr, r.tape_bytes_peak, r.wall_ms
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Everything a finished run hands back.
pub struct TrainOutcome<E: Elem> {
    pub weights: ModelWeights<E>,
    pub metrics: Vec<MetricsRow>,
    /// Full-sequence cache passes performed (one per video visit when
    /// training truncated; zero for vanilla).
    pub cache_builds: usize,
}

/// The training loop. Per video visit: one recording-disabled full pass to
/// cache hidden states (truncated strategy only), then up to
/// `samples_per_video` clip steps. Deterministic given the seed — weight
/// initialization and sampling use independent streams split from it, so
/// runs differing only in strategy or clip length start from identical
/// weights.
pub fn train_loop<E: Elem>(
    videos: &[VideoSequence<E>],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome<E>> {
    model_cfg.validate()?;
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::Input("training requires at least one sequence".into()));
    }
    let root = SplitRng::new(cfg.seed);
    let mut wrng = root.split(0);
    let mut srng = root.split(1);

    let init = ModelWeights::<E>::init(model_cfg, &mut wrng);
    let mut params: Vec<Tensor<E>> =
        init.params().into_iter().map(|(_, t)| t.clone()).collect();
    let mut opt = Adam::new(&params);

    let mut metrics = Vec::with_capacity(cfg.iters);
    let mut cache_builds = 0usize;
    let mut iter = 0usize;
    while iter < cfg.iters {
        let video = &videos[srng.below(videos.len() as u64) as usize];
        let mut mark = Instant::now();
        let cache = match cfg.strategy {
            Strategy::Truncated => {
                let w = ModelWeights::from_params(model_cfg, &params)?;
                let (_, cache) = forward_full(video, &w, model_cfg, true)?;
                cache_builds += 1;
                cache
            }
            Strategy::Vanilla => None,
        };
        for _ in 0..cfg.samples_per_video {
            if iter >= cfg.iters {
                break;
            }
            let sample =
                sample_clip(video, cache.as_ref(), cfg.clip_len, model_cfg.modules, &mut srng)?;
            let lr = cosine_lr(iter, cfg);
            let step = match train_step_truncated(video, &sample, &mut params, &mut opt, model_cfg, lr)
            {
                Ok(step) => step,
                Err(e) => {
                    // A failed step never touched the parameters, so they are
                    // the last good state — keep them on disk for recovery.
                    if let Some(path) = checkpoint_path {
                        if let Ok(w) = ModelWeights::from_params(model_cfg, &params) {
                            let _ = save_checkpoint(path, model_cfg, &w);
                        }
                    }
                    return Err(e);
                }
            };
            metrics.push(MetricsRow {
                iter,
                loss: step.loss,
                lr,
                tape_bytes_peak: step.tape_bytes,
                wall_ms: mark.elapsed().as_secs_f64() * 1e3,
            });
            mark = Instant::now();
            iter += 1;
            if let Some(path) = checkpoint_path {
                if cfg.save_every > 0 && iter % cfg.save_every == 0 && iter < cfg.iters {
                    let w = ModelWeights::from_params(model_cfg, &params)?;
                    save_checkpoint(path, model_cfg, &w)?;
                }
            }
        }
    }
    let weights = ModelWeights::from_params(model_cfg, &params)?;
    if let Some(path) = checkpoint_path {
        save_checkpoint(path, model_cfg, &weights)?;
    }
    Ok(TrainOutcome {
        weights,
        metrics,
        cache_builds,
    })
}

/// Clamp to the displayable range — evaluation and image export only; the
/// training loss sees unclamped values.
pub fn clamp01<E: Elem>(t: &Tensor<E>) -> Tensor<E> {
    let data: Vec<E> = t
        .data()
        .iter()
        .map(|&v| v.max(E::zero()).min(E::one()))
        .collect();
    Tensor::from_vec(t.shape(), data).expect("same shape")
}

/// Mean PSNR of full-sequence inference over held-out videos, with outputs
/// clamped to [0, 1] as at export.
pub fn eval_psnr<E: Elem>(
    videos: &[VideoSequence<E>],
    weights: &ModelWeights<E>,
    cfg: &ModelConfig,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for video in videos {
        let (sr, _) = forward_full(video, weights, cfg, false)?;
        for (out, hr) in sr.iter().zip(&video.hr) {
            sum += psnr_rgb(&clamp01(out), hr)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Input("evaluation requires at least one frame".into()));
    }
    Ok(sum / n as f64)
}

/// One arm of the strategy comparison: a strategy, its clip length, and an
/// optional override of the per-visit sample count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arm {
    pub strategy: Strategy,
    pub clip_len: usize,
    /// `None` inherits the base configuration's `samples_per_video`.
    pub samples_per_video: Option<usize>,
}

impl Arm {
    pub const fn new(strategy: Strategy, clip_len: usize) -> Arm {
        Arm {
            strategy,
            clip_len,
            samples_per_video: None,
        }
    }

    /// Compact label: `vanilla:8` or `truncated:8:4` (with sample override).
    pub fn label(&self) -> String {
        match self.samples_per_video {
            Some(n) => format!("{}:{}:{}", self.strategy, self.clip_len, n),
            None => format!("{}:{}", self.strategy, self.clip_len),
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    /// Parses `strategy:clip_len` or `strategy:clip_len:samples`.
    fn from_str(s: &str) -> Result<Arm> {
        let mut parts = s.split(':');
        let bad = || Error::Config(format!("arm {s:?} is not strategy:clip_len[:samples]"));
        let strategy: Strategy = parts.next().ok_or_else(bad)?.parse()?;
        let clip_len: usize = parts
            .next()
            .and_then(|p| p.parse().ok())
            .filter(|&l| l > 0)
            .ok_or_else(bad)?;
        let samples_per_video = match parts.next() {
            None => None,
            Some(p) => Some(p.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(bad)?),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Arm {
            strategy,
            clip_len,
            samples_per_video,
        })
    }
}

/// Outcome of one comparison arm.
#[derive(Clone, Debug)]
pub struct ArmReport {
    pub arm: Arm,
    pub iters: usize,
    /// Largest gradient tape any step retained, in bytes.
    pub peak_tape_bytes: usize,
    pub total_wall_ms: f64,
    pub final_psnr_db: f64,
}

impl ArmReport {
    pub fn wall_ms_per_iter(&self) -> f64 {
        if self.iters == 0 {
            0.0
        } else {
            self.total_wall_ms / self.iters as f64
        }
    }
}

/// The default comparison grid: matched clip length for both strategies,
/// plus longer vanilla clips to expose the memory trend.
pub const COMPARISON_ARMS: [Arm; 4] = [
    Arm::new(Strategy::Vanilla, 8),
    Arm::new(Strategy::Truncated, 8),
    Arm::new(Strategy::Vanilla, 24),
    Arm::new(Strategy::Vanilla, 40),
];

/// Train every arm from identical seeds and initial weights, then evaluate
/// on held-out videos. Reports peak tape bytes (the memory that scales with
/// clip length), wall time, and final PSNR per arm.
pub fn compare_strategies<E: Elem>(
    train_videos: &[VideoSequence<E>],
    eval_videos: &[VideoSequence<E>],
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    arms: &[Arm],
) -> Result<Vec<ArmReport>> {
    let mut reports = Vec::with_capacity(arms.len());
    for &arm in arms {
        let cfg = TrainConfig {
            strategy: arm.strategy,
            clip_len: arm.clip_len,
            samples_per_video: arm.samples_per_video.unwrap_or(base.samples_per_video),
            ..base.clone()
        };
        let outcome = train_loop(train_videos, model_cfg, &cfg, None)?;
        reports.push(ArmReport {
            arm,
            iters: cfg.iters,
            peak_tape_bytes: outcome
                .metrics
                .iter()
                .map(|r| r.tape_bytes_peak)
                .max()
                .unwrap_or(0),
            total_wall_ms: outcome.metrics.iter().map(|r| r.wall_ms).sum(),
            final_psnr_db: eval_psnr(eval_videos, &outcome.weights, model_cfg)?,
        });
    }
    Ok(reports)
}
