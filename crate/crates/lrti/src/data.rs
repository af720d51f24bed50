//! Synthetic video data, bicubic resampling, and on-disk formats.
//!
//! Generated sequences are textured sprites translating at constant,
//! generally sub-pixel velocity over a static background, so consecutive
//! low-resolution frames sample the scene at different phases — the signal a
//! recurrent super-resolver can exploit. Ground-truth motion is known
//! exactly, and each sequence carries per-frame-pair flow fields at LR
//! resolution.
//!
//! On disk, a sequence directory holds `hr/%06d.ppm`, `lr/%06d.ppm`
//! (binary PPM, 8-bit) and `flow/%06d.f32` (raw little-endian f32, dx plane
//! then dy plane). A dataset is a `dataset.txt` manifest listing sequence
//! directories, one per line, relative to the manifest's location.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::tensor::{reflect_index, Elem, Tensor};

/// Dense per-pixel displacement between a frame and its successor, at LR
/// resolution, in LR pixels. Plane 0 is horizontal (dx), plane 1 vertical.
#[derive(Clone, Debug)]
pub struct FlowField {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            h,
            w,
            data: vec![0.0; 2 * h * w],
        }
    }

    pub fn from_planes(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 2 * h * w {
            return Err(Error::Dimension(format!(
                "flow field {h}x{w} needs {} values, got {}",
                2 * h * w,
                data.len()
            )));
        }
        Ok(FlowField { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dx(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    pub fn dy(&self, y: usize, x: usize) -> f32 {
        self.data[self.h * self.w + y * self.w + x]
    }

    pub fn planes(&self) -> &[f32] {
        &self.data
    }

    /// Elementwise scale — used to approximate two-step motion as twice the
    /// one-step motion (exact for constant-velocity content).
    pub fn scaled(&self, c: f32) -> FlowField {
        FlowField {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }
}

/// One video: high-resolution frames, their bicubic low-resolution
/// counterparts, and ground-truth LR flow between consecutive frames.
/// `flows[t]` maps frame `t` to frame `t + 1` (so there are `T - 1` fields).
#[derive(Clone, Debug)]
pub struct VideoSequence<E: Elem> {
    pub name: String,
    pub hr: Vec<Tensor<E>>,
    pub lr: Vec<Tensor<E>>,
    pub flows: Vec<FlowField>,
}

impl<E: Elem> VideoSequence<E> {
    pub fn len(&self) -> usize {
        self.lr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr.is_empty()
    }

    /// `(height, width)` of the low-resolution frames.
    pub fn lr_dims(&self) -> (usize, usize) {
        let s = self.lr[0].shape();
        (s[1], s[2])
    }

    pub fn cast<F: Elem>(&self) -> VideoSequence<F> {
        VideoSequence {
            name: self.name.clone(),
            hr: self.hr.iter().map(Tensor::cast).collect(),
            lr: self.lr.iter().map(Tensor::cast).collect(),
            flows: self.flows.clone(),
        }
    }

    /// Same frames with all motion information dropped — the fallback for
    /// data without known flow.
    pub fn with_zero_flows(&self) -> VideoSequence<E> {
        let (h, w) = self.lr_dims();
        VideoSequence {
            name: self.name.clone(),
            hr: self.hr.clone(),
            lr: self.lr.clone(),
            flows: vec![FlowField::zeros(h, w); self.len().saturating_sub(1)],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lr.is_empty() {
            return Err(Error::Input(format!("sequence {} has no frames", self.name)));
        }
        if self.hr.len() != self.lr.len() {
            return Err(Error::Input(format!(
                "sequence {}: {} HR frames vs {} LR frames",
                self.name,
                self.hr.len(),
                self.lr.len()
            )));
        }
        if self.flows.len() + 1 != self.lr.len() {
            return Err(Error::Input(format!(
                "sequence {}: {} frames need {} flow fields, found {}",
                self.name,
                self.lr.len(),
                self.lr.len() - 1,
                self.flows.len()
            )));
        }
        Ok(())
    }
}

/// Background styles for the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    /// Sum of a few low-frequency sinusoids — smooth, static.
    Smooth,
    /// Single mid-gray tone.
    Flat,
}

/// Recipe for one synthetic sequence.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    /// Frame count T.
    pub frames: usize,
    /// High-resolution extents; both must be divisible by 32 so the LR grid
    /// tiles into 8-pixel attention windows at scale 4.
    pub height: usize,
    pub width: usize,
    pub sprites: usize,
    pub background: Background,
    /// Downsampling factor between HR and LR.
    pub scale: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("synthetic spec: frames must be >= 1".into()));
        }
        if self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::Config(format!(
                "synthetic spec: extents {}x{} must be divisible by 32",
                self.height, self.width
            )));
        }
        if self.scale == 0 || 32 % self.scale != 0 {
            return Err(Error::Config(format!(
                "synthetic spec: scale {} must divide 32",
                self.scale
            )));
        }
        Ok(())
    }
}

struct Sprite {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
    period: f64,
    phase: f64,
    horizontal: bool,
    c1: [f64; 3],
    c2: [f64; 3],
}

impl Sprite {
    /// Top-left corner at frame t.
    fn pos(&self, t: usize) -> (f64, f64) {
        (self.x0 + self.vx * t as f64, self.y0 + self.vy * t as f64)
    }

    fn color_at(&self, lx: f64, ly: f64) -> [f64; 3] {
        let d = if self.horizontal { ly } else { lx };
        let m = 0.5 + 0.5 * (std::f64::consts::TAU * d / self.period + self.phase).sin();
        [
            self.c1[0] + (self.c2[0] - self.c1[0]) * m,
            self.c1[1] + (self.c2[1] - self.c1[1]) * m,
            self.c1[2] + (self.c2[2] - self.c1[2]) * m,
        ]
    }
}

fn sample_sprite(spec: &SyntheticSpec, rng: &mut SplitRng) -> Sprite {
    let (hf, wf) = (spec.height as f64, spec.width as f64);
    let t = spec.frames.max(2) as f64;
    let sw = rng.uniform_in(wf * 0.25, wf * 0.45);
    let sh = rng.uniform_in(hf * 0.25, hf * 0.45);
    // Bound each velocity component so the whole path stays in frame with a
    // one-pixel margin, then place the start anywhere the path fits.
    let cap_x = ((wf - sw - 2.0) / t).max(0.0);
    let cap_y = ((hf - sh - 2.0) / t).max(0.0);
    let vx = rng.uniform_in(-cap_x, cap_x) * 0.9;
    let vy = rng.uniform_in(-cap_y, cap_y) * 0.9;
    let span_x = vx * (t - 1.0);
    let span_y = vy * (t - 1.0);
    let x_lo = 1.0 + (-span_x).max(0.0);
    let x_hi = wf - sw - 1.0 - span_x.max(0.0);
    let y_lo = 1.0 + (-span_y).max(0.0);
    let y_hi = hf - sh - 1.0 - span_y.max(0.0);
    let x0 = rng.uniform_in(x_lo, x_hi.max(x_lo + 1e-9));
    let y0 = rng.uniform_in(y_lo, y_hi.max(y_lo + 1e-9));
    let mut color = || {
        [
            rng.uniform_in(0.05, 0.95),
            rng.uniform_in(0.05, 0.95),
            rng.uniform_in(0.05, 0.95),
        ]
    };
    let c1 = color();
    let c2 = color();
    Sprite {
        x0,
        y0,
        w: sw,
        h: sh,
        vx,
        vy,
        // Stripe periods sit below the LR Nyquist limit at the supported
        // scales (>= 2.5 LR pixels at scale 4), so the texture survives
        // anti-aliased downsampling and is recoverable from the inputs —
        // bicubic upsampling blurs it, which is the error a trained
        // restorer must be able to win back.
        period: rng.uniform_in(10.0, 24.0),
        phase: rng.uniform_in(0.0, std::f64::consts::TAU),
        horizontal: rng.below(2) == 0,
        c1,
        c2,
    }
}

fn smooth_background(h: usize, w: usize, rng: &mut SplitRng) -> Vec<f64> {
    let mut img = vec![0.5; 3 * h * w];
    for c in 0..3 {
        for _ in 0..3 {
            let amp = rng.uniform_in(0.04, 0.10);
            let fx = rng.uniform_in(-3.0, 3.0) / w as f64;
            let fy = rng.uniform_in(-3.0, 3.0) / h as f64;
            let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
            for y in 0..h {
                for x in 0..w {
                    let v = amp
                        * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin();
                    img[(c * h + y) * w + x] += v;
                }
            }
        }
    }
    img
}

/// Render one synthetic sequence: HR frames, their bicubic LR frames, and
/// exact LR flow fields.
pub fn generate<E: Elem>(spec: &SyntheticSpec) -> Result<VideoSequence<E>> {
    spec.validate()?;
    let rng = SplitRng::new(spec.seed);
    let (h, w, s) = (spec.height, spec.width, spec.scale);

    let background = match spec.background {
        Background::Smooth => smooth_background(h, w, &mut rng.split(1)),
        Background::Flat => vec![0.5; 3 * h * w],
    };
    let mut sprite_rng = rng.split(2);
    let sprites: Vec<Sprite> = (0..spec.sprites)
        .map(|_| sample_sprite(spec, &mut sprite_rng))
        .collect();

    let (lh, lw) = (h / s, w / s);
    let mut hr_frames = Vec::with_capacity(spec.frames);
    let mut lr_frames = Vec::with_capacity(spec.frames);
    let mut flows = Vec::with_capacity(spec.frames.saturating_sub(1));

    for t in 0..spec.frames {
        let mut img = background.clone();
        for sp in &sprites {
            let (sx, sy) = sp.pos(t);
            let px0 = sx.floor().max(0.0) as usize;
            let py0 = sy.floor().max(0.0) as usize;
            let px1 = ((sx + sp.w).ceil() as usize).min(w);
            let py1 = ((sy + sp.h).ceil() as usize).min(h);
            for py in py0..py1 {
                let oy = (py as f64 + 1.0).min(sy + sp.h) - (py as f64).max(sy);
                if oy <= 0.0 {
                    continue;
                }
                for px in px0..px1 {
                    let ox = (px as f64 + 1.0).min(sx + sp.w) - (px as f64).max(sx);
                    if ox <= 0.0 {
                        continue;
                    }
                    let cov = (ox * oy).clamp(0.0, 1.0);
                    let color =
                        sp.color_at(px as f64 + 0.5 - sx, py as f64 + 0.5 - sy);
                    for c in 0..3 {
                        let p = &mut img[(c * h + py) * w + px];
                        *p = *p * (1.0 - cov) + color[c] * cov;
                    }
                }
            }
        }
        let hr_data: Vec<E> = img.iter().map(|&v| E::from64(v.clamp(0.0, 1.0))).collect();
        let hr = Tensor::from_vec(&[3, h, w], hr_data)?;
        let lr = bicubic_downsample(&hr, s)?;
        hr_frames.push(hr);
        lr_frames.push(lr);

        if t + 1 < spec.frames {
            // Flow t -> t+1 on the LR grid: the sprite's velocity where an LR
            // pixel centre falls inside a sprite at frame t, zero elsewhere.
            // Later sprites are painted on top, so they win.
            let mut flow = vec![0.0f32; 2 * lh * lw];
            for sp in &sprites {
                let (sx, sy) = sp.pos(t);
                for ly in 0..lh {
                    let cy = (ly as f64 + 0.5) * s as f64;
                    if cy < sy || cy > sy + sp.h {
                        continue;
                    }
                    for lx in 0..lw {
                        let cx = (lx as f64 + 0.5) * s as f64;
                        if cx >= sx && cx <= sx + sp.w {
                            flow[ly * lw + lx] = (sp.vx / s as f64) as f32;
                            flow[lh * lw + ly * lw + lx] = (sp.vy / s as f64) as f32;
                        }
                    }
                }
            }
            flows.push(FlowField::from_planes(lh, lw, flow)?);
        }
    }

    let seq = VideoSequence {
        name: format!("synthetic-{}", spec.seed),
        hr: hr_frames,
        lr: lr_frames,
        flows,
    };
    seq.validate()?;
    Ok(seq)
}

// ---------------------------------------------------------------------------
// Bicubic resampling
// ---------------------------------------------------------------------------

/// Keys cubic kernel with a = -0.5.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Resample the trailing axis pair of a `[C, H, W]` image separably.
fn resample_image<E: Elem>(
    img: &Tensor<E>,
    oh: usize,
    ow: usize,
    ratio: f64,
    widen: f64,
) -> Result<Tensor<E>> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "resample expects [C, H, W], got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let src: Vec<f64> = img.data().iter().map(|v| v.to64()).collect();

    // Horizontal pass: [C, H, W] -> [C, H, ow].
    let htaps = axis_taps(ow, ratio, widen);
    let mut mid = vec![0.0f64; c * h * ow];
    for ci in 0..c {
        for y in 0..h {
            let row = &src[(ci * h + y) * w..(ci * h + y + 1) * w];
            let dst = &mut mid[(ci * h + y) * ow..(ci * h + y + 1) * ow];
            for (x, (j0, ws)) in htaps.iter().enumerate() {
                let mut acc = 0.0;
                for (k, &wv) in ws.iter().enumerate() {
                    acc += wv * row[reflect_index(j0 + k as i64, w as i64)];
                }
                dst[x] = acc;
            }
        }
    }

    // Vertical pass: [C, H, ow] -> [C, oh, ow].
    let vtaps = axis_taps(oh, ratio, widen);
    let mut out = vec![E::zero(); c * oh * ow];
    for ci in 0..c {
        for (y, (j0, ws)) in vtaps.iter().enumerate() {
            for x in 0..ow {
                let mut acc = 0.0;
                for (k, &wv) in ws.iter().enumerate() {
                    acc += wv * mid[(ci * h + reflect_index(j0 + k as i64, h as i64)) * ow + x];
                }
                out[(ci * oh + y) * ow + x] = E::from64(acc);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Tap start index (possibly negative) and normalised weights per output
/// position along one axis. Reflection happens when the taps are applied.
fn axis_taps(n_out: usize, ratio: f64, widen: f64) -> Vec<(i64, Vec<f64>)> {
    let mut taps = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let center = (i as f64 + 0.5) * ratio - 0.5;
        let radius = 2.0 * widen;
        let j0 = (center - radius).ceil() as i64;
        let j1 = (center + radius).floor() as i64;
        let mut ws = Vec::with_capacity((j1 - j0 + 1).max(0) as usize);
        let mut total = 0.0;
        for j in j0..=j1 {
            let wv = cubic((j as f64 - center) / widen);
            ws.push(wv);
            total += wv;
        }
        for wv in ws.iter_mut() {
            *wv /= total;
        }
        taps.push((j0, ws));
    }
    taps
}

/// Anti-aliased bicubic downsampling by an integer factor: the kernel
/// support widens by the factor and weights are renormalised per output
/// pixel. Edges reflect.
pub fn bicubic_downsample<E: Elem>(img: &Tensor<E>, s: usize) -> Result<Tensor<E>> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "bicubic_downsample expects [C, H, W], got {shape:?}"
        )));
    }
    if s == 0 || shape[1] % s != 0 || shape[2] % s != 0 {
        return Err(Error::Dimension(format!(
            "bicubic_downsample: extents {}x{} not divisible by factor {s}",
            shape[1], shape[2]
        )));
    }
    resample_image(img, shape[1] / s, shape[2] / s, s as f64, s as f64)
}

/// Bicubic upsampling by an integer factor (no kernel widening). Edges
/// reflect.
pub fn bicubic_upsample<E: Elem>(img: &Tensor<E>, s: usize) -> Result<Tensor<E>> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "bicubic_upsample expects [C, H, W], got {shape:?}"
        )));
    }
    if s == 0 {
        return Err(Error::Dimension("bicubic_upsample: factor must be >= 1".into()));
    }
    resample_image(img, shape[1] * s, shape[2] * s, 1.0 / s as f64, 1.0)
}

// ---------------------------------------------------------------------------
// PPM and flow I/O
// ---------------------------------------------------------------------------

/// Write a `[3, H, W]` frame as binary PPM, clamping to [0, 1] and rounding
/// to 8 bits.
pub fn save_ppm<E: Elem>(path: &Path, frame: &Tensor<E>) -> Result<()> {
    let shape = frame.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Dimension(format!(
            "save_ppm expects [3, H, W], got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut bytes = Vec::with_capacity(32 + 3 * h * w);
    bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    let data = frame.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[(c * h + y) * w + x].to64().clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a binary PPM written by [`save_ppm`] (or any maxval-255 P6 file).
pub fn load_ppm<E: Elem>(path: &Path) -> Result<Tensor<E>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let fail = |pos: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        offset: pos,
        msg: msg.to_string(),
    };

    let token = |pos: &mut usize| -> Result<String> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(fail(start, "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    if token(&mut pos)? != "P6" {
        return Err(fail(0, "not a binary PPM (expected magic P6)"));
    }
    let w: usize = token(&mut pos)?
        .parse()
        .map_err(|_| fail(pos, "invalid width"))?;
    let h: usize = token(&mut pos)?
        .parse()
        .map_err(|_| fail(pos, "invalid height"))?;
    let maxval = token(&mut pos)?;
    if maxval != "255" {
        return Err(fail(pos, "unsupported max value (expected 255)"));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail(pos, "missing separator after header"));
    }
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() - pos < need {
        return Err(fail(
            bytes.len(),
            &format!("pixel data truncated: need {need} bytes"),
        ));
    }
    let px = &bytes[pos..pos + need];
    let mut data = vec![E::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] =
                    E::from64(px[(y * w + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

fn save_flow(path: &Path, flow: &FlowField) -> Result<()> {
    let mut bytes = Vec::with_capacity(flow.planes().len() * 4);
    for v in flow.planes() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_flow(path: &Path, h: usize, w: usize) -> Result<FlowField> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let need = 2 * h * w * 4;
    if bytes.len() != need {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len().min(need),
            msg: format!("flow file holds {} bytes, expected {need}", bytes.len()),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FlowField::from_planes(h, w, data)
}

/// Write a sequence directory: `hr/`, `lr/`, `flow/`.
pub fn save_sequence<E: Elem>(dir: &Path, seq: &VideoSequence<E>) -> Result<()> {
    seq.validate()?;
    for sub in ["hr", "lr", "flow"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for (t, frame) in seq.hr.iter().enumerate() {
        save_ppm(&dir.join(format!("hr/{t:06}.ppm")), frame)?;
    }
    for (t, frame) in seq.lr.iter().enumerate() {
        save_ppm(&dir.join(format!("lr/{t:06}.ppm")), frame)?;
    }
    for (t, flow) in seq.flows.iter().enumerate() {
        save_flow(&dir.join(format!("flow/{t:06}.f32")), flow)?;
    }
    Ok(())
}

/// Load a sequence directory written by [`save_sequence`]. Frame count is
/// inferred from the `lr/` listing; a missing companion file is an error
/// naming its path.
pub fn load_sequence(dir: &Path) -> Result<VideoSequence<f32>> {
    let lr_dir = dir.join("lr");
    let mut frames = 0usize;
    while lr_dir.join(format!("{frames:06}.ppm")).exists() {
        frames += 1;
    }
    if frames == 0 {
        return Err(Error::Input(format!(
            "no frames found under {}",
            lr_dir.display()
        )));
    }
    let mut hr = Vec::with_capacity(frames);
    let mut lr = Vec::with_capacity(frames);
    for t in 0..frames {
        let hp = dir.join(format!("hr/{t:06}.ppm"));
        let lp = dir.join(format!("lr/{t:06}.ppm"));
        for p in [&hp, &lp] {
            if !p.exists() {
                return Err(Error::Input(format!("missing frame file {}", p.display())));
            }
        }
        hr.push(load_ppm::<f32>(&hp)?);
        lr.push(load_ppm::<f32>(&lp)?);
    }
    let s = lr[0].shape();
    let (h, w) = (s[1], s[2]);
    let mut flows = Vec::with_capacity(frames - 1);
    for t in 0..frames - 1 {
        let fp = dir.join(format!("flow/{t:06}.f32"));
        if !fp.exists() {
            return Err(Error::Input(format!("missing flow file {}", fp.display())));
        }
        flows.push(load_flow(&fp, h, w)?);
    }
    let seq = VideoSequence {
        name: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string()),
        hr,
        lr,
        flows,
    };
    seq.validate()?;
    Ok(seq)
}

/// Write a `dataset.txt` manifest listing sequence directories relative to
/// the manifest's parent directory.
pub fn save_manifest(path: &Path, seq_dirs: &[String]) -> Result<()> {
    let mut out = String::new();
    for d in seq_dirs {
        out.push_str(d);
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Read a manifest and load every sequence it lists.
pub fn load_dataset(manifest: &Path) -> Result<Vec<VideoSequence<f32>>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().map(PathBuf::from).unwrap_or_default();
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(load_sequence(&base.join(line))?);
    }
    if out.is_empty() {
        return Err(Error::Input(format!(
            "manifest {} lists no sequences",
            manifest.display()
        )));
    }
    Ok(out)
}
