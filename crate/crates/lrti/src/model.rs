//! Full network assembly and checkpointing.
//!
//! A shallow 3×3 convolution lifts each low-resolution frame into feature
//! space, a grid of alternating-direction propagation modules refines the
//! features recurrently, and a pixel-shuffle head reconstructs each frame at
//! the target scale on top of a bicubic-upsampled copy of the input (global
//! residual), so zero weights already reproduce plain bicubic upscaling.
//!
//! Two entry points mirror the two phases of truncated training:
//! [`forward_full`] runs a whole sequence and can return every module's
//! hidden state for later clip runs; [`forward_clip`] runs a short window
//! seeded with frozen boundary states so the gradient tape scales with the
//! clip length rather than the video length.

use std::fs;
use std::path::Path;

use crate::data::{bicubic_upsample, VideoSequence};
use crate::error::{Error, Result};
use crate::propagation::{
    grid_clip, grid_forward, grid_forward_observed, HiddenStateCache, ModuleBoundary,
    PropagationModuleWeights,
};
use crate::ritb::{attention_stats, Activation, AttnStats, RitbConfig};
use crate::rng::SplitRng;
use crate::tensor::{Elem, Tensor};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Propagation modules M; directions alternate starting forward.
    pub modules: usize,
    /// Transformer blocks N inside each module.
    pub blocks_per_module: usize,
    /// Feature channels.
    pub dim: usize,
    /// Attention heads.
    pub heads: usize,
    /// Attention window and alignment patch edge, in feature pixels.
    pub window: usize,
    /// Upscaling factor (2 or 4).
    pub scale: usize,
    /// Attention activation.
    pub activation: Activation,
}

impl ModelConfig {
    /// Small configuration used throughout the test suite: minutes-scale on
    /// a CPU while keeping every architectural element live.
    pub fn toy() -> Self {
        ModelConfig {
            modules: 2,
            blocks_per_module: 2,
            dim: 32,
            heads: 4,
            window: 8,
            scale: 4,
            activation: Activation::Relu2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modules == 0 || self.blocks_per_module == 0 {
            return Err(Error::Config(
                "need at least one module and one block per module".into(),
            ));
        }
        if self.scale != 2 && self.scale != 4 {
            return Err(Error::Config(format!(
                "scale must be 2 or 4, got {}",
                self.scale
            )));
        }
        self.ritb().validate()
    }

    /// Per-block configuration slice of this model.
    pub fn ritb(&self) -> RitbConfig {
        RitbConfig {
            dim: self.dim,
            heads: self.heads,
            window: self.window,
            activation: self.activation,
        }
    }
}

/// Every learnable tensor of the network, each reachable under a unique
/// dotted name (stable across runs) for checkpoints and gradient maps.
#[derive(Clone, Debug)]
pub struct ModelWeights<E: Elem> {
    /// `[dim, 3, 3, 3]` shallow feature extractor.
    pub shallow: Tensor<E>,
    pub modules: Vec<PropagationModuleWeights<E>>,
    /// `[3·scale², dim, 3, 3]` expansion feeding the pixel shuffle.
    pub recon_up: Tensor<E>,
    /// `[3, 3, 3, 3]` refinement after the shuffle.
    pub recon_out: Tensor<E>,
}

impl<E: Elem> ModelWeights<E> {
    /// Canonical (name, shape) list; definition order is the serialization
    /// order.
    pub fn shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let r = cfg.ritb();
        let mut out = vec![("shallow.w".to_string(), vec![cfg.dim, 3, 3, 3])];
        for m in 0..cfg.modules {
            for (name, shape) in
                PropagationModuleWeights::<E>::shapes(&r, cfg.blocks_per_module)
            {
                out.push((format!("module{m}.{name}"), shape));
            }
        }
        out.push((
            "recon.up.w".to_string(),
            vec![3 * cfg.scale * cfg.scale, cfg.dim, 3, 3],
        ));
        out.push(("recon.out.w".to_string(), vec![3, 3, 3, 3]));
        out
    }

    /// Total learnable scalar count.
    pub fn param_count(cfg: &ModelConfig) -> usize {
        Self::shapes(cfg)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn init(cfg: &ModelConfig, rng: &mut SplitRng) -> Self {
        let r = cfg.ritb();
        ModelWeights {
            shallow: Tensor::randn(&[cfg.dim, 3, 3, 3], 0.1, rng).requiring_grad(),
            modules: (0..cfg.modules)
                .map(|_| PropagationModuleWeights::init(&r, cfg.blocks_per_module, rng))
                .collect(),
            recon_up: Tensor::randn(&[3 * cfg.scale * cfg.scale, cfg.dim, 3, 3], 0.05, rng)
                .requiring_grad(),
            recon_out: Tensor::randn(&[3, 3, 3, 3], 0.05, rng).requiring_grad(),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let r = cfg.ritb();
        ModelWeights {
            shallow: Tensor::zeros(&[cfg.dim, 3, 3, 3]).requiring_grad(),
            modules: (0..cfg.modules)
                .map(|_| PropagationModuleWeights::zeros(&r, cfg.blocks_per_module))
                .collect(),
            recon_up: Tensor::zeros(&[3 * cfg.scale * cfg.scale, cfg.dim, 3, 3])
                .requiring_grad(),
            recon_out: Tensor::zeros(&[3, 3, 3, 3]).requiring_grad(),
        }
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = vec![("shallow.w".to_string(), &self.shallow)];
        for (m, module) in self.modules.iter().enumerate() {
            for (name, t) in module.params() {
                out.push((format!("module{m}.{name}"), t));
            }
        }
        out.push(("recon.up.w".to_string(), &self.recon_up));
        out.push(("recon.out.w".to_string(), &self.recon_out));
        out
    }

    /// Rebuild from tensors in canonical order, validating shapes.
    pub fn from_params(cfg: &ModelConfig, params: &[Tensor<E>]) -> Result<Self> {
        let shapes = Self::shapes(cfg);
        if params.len() != shapes.len() {
            return Err(Error::Dimension(format!(
                "model expects {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(params) {
            if t.shape() != &shape[..] {
                return Err(Error::Dimension(format!(
                    "parameter {name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let r = cfg.ritb();
        let per_module =
            PropagationModuleWeights::<E>::shapes(&r, cfg.blocks_per_module).len();
        let mut modules = Vec::with_capacity(cfg.modules);
        for m in 0..cfg.modules {
            let lo = 1 + m * per_module;
            modules.push(PropagationModuleWeights::from_slice(
                &r,
                cfg.blocks_per_module,
                &params[lo..lo + per_module],
            )?);
        }
        Ok(ModelWeights {
            shallow: params[0].clone(),
            modules,
            recon_up: params[params.len() - 2].clone(),
            recon_out: params[params.len() - 1].clone(),
        })
    }
}

fn check_finite<E: Elem>(video: &VideoSequence<E>) -> Result<()> {
    for (t, f) in video.lr.iter().enumerate() {
        if !f.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Input(format!(
                "sequence {}: non-finite value in frame {t}",
                video.name
            )));
        }
    }
    Ok(())
}

pub fn shallow_features<E: Elem>(
    frames: &[Tensor<E>],
    w: &ModelWeights<E>,
) -> Result<Vec<Tensor<E>>> {
    frames.iter().map(|f| f.conv2d(&w.shallow)).collect()
}

/// Upscale one refined feature map: channel expansion, pixel shuffle,
/// 3-channel refinement, plus the bicubic-upsampled input frame. The output
/// is intentionally unclamped; clamping belongs to image export only.
pub fn reconstruct<E: Elem>(
    feature: &Tensor<E>,
    lr_frame: &Tensor<E>,
    w: &ModelWeights<E>,
    cfg: &ModelConfig,
) -> Result<Tensor<E>> {
    let up = feature.conv2d(&w.recon_up)?.pixel_shuffle(cfg.scale)?;
    let refined = up.conv2d(&w.recon_out)?;
    let base = bicubic_upsample(lr_frame, cfg.scale)?;
    refined.add(&base)
}

/// Whole-sequence inference. With `record_cache`, also returns every
/// module's per-frame hidden states (detached) for later clip runs. Callers
/// that only want the cache for clip training should invoke this without an
/// active gradient recording; nothing here requires one.
pub fn forward_full<E: Elem>(
    video: &VideoSequence<E>,
    w: &ModelWeights<E>,
    cfg: &ModelConfig,
    record_cache: bool,
) -> Result<(Vec<Tensor<E>>, Option<HiddenStateCache<E>>)> {
    cfg.validate()?;
    check_finite(video)?;
    let feats = shallow_features(&video.lr, w)?;
    let (refined, cache) = grid_forward(&feats, &video.flows, &w.modules, &cfg.ritb())?;
    let sr = refined
        .iter()
        .zip(&video.lr)
        .map(|(f, lr)| reconstruct(f, lr, w, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok((sr, record_cache.then_some(cache)))
}

/// Attention behaviour of one block on one frame, measured under both score
/// activations on identical pre-activation scores.
#[derive(Clone, Copy, Debug)]
pub struct AttnStatRow {
    pub module: usize,
    pub block: usize,
    pub frame: usize,
    pub relu2: AttnStats,
    pub softmax: AttnStats,
}

/// Run a full sequence and measure every block's attention maps: the
/// fraction of exactly-zero weights and the mass captured by the 50 largest
/// weights per map, under both activations fed the same scores. Rows come
/// back sorted by (module, block, frame), one row per block per frame.
pub fn attention_statistics<E: Elem>(
    video: &VideoSequence<E>,
    w: &ModelWeights<E>,
    cfg: &ModelConfig,
) -> Result<Vec<AttnStatRow>> {
    cfg.validate()?;
    check_finite(video)?;
    let rcfg = cfg.ritb();
    let feats = shallow_features(&video.lr, w)?;
    let mut rows = Vec::new();
    grid_forward_observed(&feats, &video.flows, &w.modules, &rcfg, &mut |m,
                                                                         n,
                                                                         t,
                                                                         x,
                                                                         pair| {
        let block = &w.modules[m].blocks[n];
        rows.push(AttnStatRow {
            module: m,
            block: n,
            frame: t,
            relu2: attention_stats(x, pair, block, &rcfg, Activation::Relu2)?,
            softmax: attention_stats(x, pair, block, &rcfg, Activation::Softmax)?,
        });
        Ok(())
    })?;
    rows.sort_by_key(|r| (r.module, r.block, r.frame));
    Ok(rows)
}

/// Clip inference over frames `[start, start + len)`, seeded with one
/// boundary set per module. Boundary tensors enter as constants; the
/// gradient tape therefore grows with `len`, never with the video length.
pub fn forward_clip<E: Elem>(
    video: &VideoSequence<E>,
    start: usize,
    len: usize,
    boundaries: &[ModuleBoundary<E>],
    w: &ModelWeights<E>,
    cfg: &ModelConfig,
) -> Result<Vec<Tensor<E>>> {
    cfg.validate()?;
    check_finite(video)?;
    if len == 0 || start + len > video.len() {
        return Err(Error::Config(format!(
            "clip [{start}, {}) out of range for {} frames",
            start + len,
            video.len()
        )));
    }
    let feats = shallow_features(&video.lr[start..start + len], w)?;
    let refined = grid_clip(
        &feats,
        &video.flows,
        start,
        boundaries,
        &w.modules,
        &cfg.ritb(),
    )?;
    refined
        .iter()
        .zip(&video.lr[start..start + len])
        .map(|(f, lr)| reconstruct(f, lr, w, cfg))
        .collect()
}

/// One empty boundary set per module — forward_clip over the whole sequence
/// with these reproduces forward_full.
pub fn empty_boundaries<E: Elem>(cfg: &ModelConfig) -> Vec<ModuleBoundary<E>> {
    (0..cfg.modules).map(|_| ModuleBoundary::empty()).collect()
}

// ---------------------------------------------------------------------------
// Checkpoint format: "LRTI" magic, a format version, the architecture
// record, then every parameter as (name, dtype, shape, raw little-endian
// values) in canonical order. Round-trips must be bit-exact.
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"LRTI";
const CHECKPOINT_VERSION: u32 = 1;

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Relu2 => 0,
        Activation::Softmax => 1,
    }
}

fn push_f<E: Elem>(buf: &mut Vec<u8>, v: E) {
    match E::BYTES {
        4 => buf.extend_from_slice(&(v.to64() as f32).to_le_bytes()),
        _ => buf.extend_from_slice(&v.to64().to_le_bytes()),
    }
}

pub fn save_checkpoint<E: Elem>(
    path: &Path,
    cfg: &ModelConfig,
    w: &ModelWeights<E>,
) -> Result<()> {
    cfg.validate()?;
    let params = w.params();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for field in [
        cfg.modules,
        cfg.blocks_per_module,
        cfg.dim,
        cfg.heads,
        cfg.window,
        cfg.scale,
    ] {
        buf.extend_from_slice(&(field as u32).to_le_bytes());
    }
    buf.push(activation_tag(cfg.activation));
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in &params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(E::BYTES as u8);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            push_f(&mut buf, v);
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Byte cursor that reports the offset of whatever it failed to read.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn fail(&self, offset: usize, msg: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset,
            msg,
        }
    }
}

pub fn load_checkpoint<E: Elem>(path: &Path) -> Result<(ModelConfig, ModelWeights<E>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        buf: &buf,
        pos: 0,
        path,
    };
    let magic = c.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(c.fail(0, format!("bad magic {magic:?}")));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(c.fail(4, format!("unsupported format version {version}")));
    }
    let fields: Vec<usize> = (0..6)
        .map(|_| c.u32("architecture field").map(|v| v as usize))
        .collect::<Result<_>>()?;
    let act_pos = c.pos;
    let activation = match c.u8("activation tag")? {
        0 => Activation::Relu2,
        1 => Activation::Softmax,
        other => return Err(c.fail(act_pos, format!("unknown activation tag {other}"))),
    };
    let cfg = ModelConfig {
        modules: fields[0],
        blocks_per_module: fields[1],
        dim: fields[2],
        heads: fields[3],
        window: fields[4],
        scale: fields[5],
        activation,
    };
    cfg.validate()?;

    let expected = ModelWeights::<E>::shapes(&cfg);
    let count = c.u32("parameter count")? as usize;
    if count != expected.len() {
        return Err(c.fail(
            c.pos - 4,
            format!("{count} parameters stored, architecture has {}", expected.len()),
        ));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let name_len = c.u32("name length")? as usize;
        let name_pos = c.pos;
        let name = std::str::from_utf8(c.take(name_len, "parameter name")?)
            .map_err(|_| c.fail(name_pos, "parameter name is not UTF-8".into()))?;
        if name != want_name {
            return Err(c.fail(
                name_pos,
                format!("parameter {name:?} where {want_name:?} was expected"),
            ));
        }
        let dtype_pos = c.pos;
        let dtype = c.u8("dtype tag")? as usize;
        if dtype != E::BYTES {
            return Err(c.fail(
                dtype_pos,
                format!(
                    "parameter {name}: stored with {dtype}-byte elements, \
                     requested {}-byte",
                    E::BYTES
                ),
            ));
        }
        let rank = c.u32("shape rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("shape extent")? as usize);
        }
        if &shape != want_shape {
            return Err(c.fail(
                dtype_pos,
                format!("parameter {name}: shape {shape:?}, expected {want_shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * E::BYTES, "parameter values")?;
        let data: Vec<E> = match E::BYTES {
            4 => raw
                .chunks_exact(4)
                .map(|b| E::from64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
                .collect(),
            _ => raw
                .chunks_exact(8)
                .map(|b| E::from64(f64::from_le_bytes(b.try_into().unwrap())))
                .collect(),
        };
        tensors.push(Tensor::from_vec(&shape, data)?.requiring_grad());
    }
    if c.pos != buf.len() {
        return Err(c.fail(c.pos, "trailing bytes after last parameter".into()));
    }
    let weights = ModelWeights::from_params(&cfg, &tensors)?;
    Ok((cfg, weights))
}
