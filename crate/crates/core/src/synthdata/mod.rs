//! Deterministic synthetic clips with independently controllable action and
//! privacy content. The action signal is a bright blob translating along a
//! class-indexed direction; the privacy signal is a static per-channel hue
//! offset plus corner glyphs indexed by attribute bits. Every frame is
//! `clip01(action_component + privacy_component)`.

pub mod oracle;

use crate::error::{Error, Result};
use crate::rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GenConfig {
    pub k_action: usize,
    pub k_privacy: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train_clips: usize,
    pub eval_clips: usize,
    pub train_privacy: usize,
    pub eval_privacy: usize,
    pub noise_sigma: f64,
    pub background: f64,
    pub blob_amp: f64,
    pub hue_amp: f64,
    pub glyph_amp: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            k_action: 4,
            k_privacy: 3,
            frames: 8,
            channels: 3,
            height: 16,
            width: 16,
            train_clips: 512,
            eval_clips: 128,
            train_privacy: 512,
            eval_privacy: 128,
            noise_sigma: 0.05,
            background: 0.25,
            blob_amp: 0.6,
            hue_amp: 0.15,
            glyph_amp: 0.4,
        }
    }
}

impl GenConfig {
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// A clip (or a still image when `t == 1`) with its action class and
/// multi-hot privacy attributes.
#[derive(Debug, Clone)]
pub struct Clip {
    /// `t * c * h * w`, row-major, values in [0, 1].
    pub frames: Vec<f64>,
    pub t: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub y_t: usize,
    pub y_b: Vec<bool>,
    pub seed: u64,
}

impl Clip {
    pub fn frame(&self, i: usize) -> &[f64] {
        let len = self.channels * self.height * self.width;
        &self.frames[i * len..(i + 1) * len]
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Clip>,
    pub eval: Vec<Clip>,
}

impl DatasetSplit {
    /// SHA-256 over every frame byte and label; a pure function of
    /// (config, seed).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for clip in self.train.iter().chain(&self.eval) {
            for v in &clip.frames {
                h.update(v.to_le_bytes());
            }
            h.update((clip.y_t as u64).to_le_bytes());
            for &b in &clip.y_b {
                h.update([b as u8]);
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub action: DatasetSplit,
    pub privacy: DatasetSplit,
}

const BLOB_STAMP: [[f64; 3]; 3] =
    [[0.5, 0.8, 0.5], [0.8, 1.0, 0.8], [0.5, 0.8, 0.5]];

/// Direction (dy, dx) and speed for an action class.
fn class_motion(y_t: usize) -> ((isize, isize), usize) {
    const DIRS: [(isize, isize); 4] = [(0, 1), (0, -1), (1, 0), (-1, 0)];
    (DIRS[y_t % 4], 1 + y_t / 4)
}

/// Noiseless blob trajectory for class `y_t`, identical on every channel.
/// Returned as `t * h * w` (single channel); positions wrap toroidally.
pub fn blob_track(cfg: &GenConfig, y_t: usize, t_frames: usize) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let ((dy, dx), speed) = class_motion(y_t);
    let mut out = vec![0.0; t_frames * h * w];
    let (cy, cx) = (h as isize / 2, w as isize / 2);
    for f in 0..t_frames {
        let py = cy + dy * (f * speed) as isize;
        let px = cx + dx * (f * speed) as isize;
        let frame = &mut out[f * h * w..(f + 1) * h * w];
        for (sy, row) in BLOB_STAMP.iter().enumerate() {
            for (sx, &v) in row.iter().enumerate() {
                let y = (py + sy as isize - 1).rem_euclid(h as isize) as usize;
                let x = (px + sx as isize - 1).rem_euclid(w as isize) as usize;
                frame[y * w + x] += cfg.blob_amp * v;
            }
        }
    }
    out
}

/// Action component: background + class-indexed moving blob + pixel noise.
/// Depends only on (y_t, seed).
pub fn action_component(cfg: &GenConfig, y_t: usize, seed: u64, t_frames: usize) -> Vec<f64> {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let track = blob_track(cfg, y_t, t_frames);
    let mut rng = rng::stream_rng(seed, 0x6e6f697365, 0); // per-clip noise stream
    let mut out = vec![0.0; t_frames * c * h * w];
    for f in 0..t_frames {
        for ci in 0..c {
            for i in 0..h * w {
                out[(f * c + ci) * h * w + i] = cfg.background
                    + track[f * h * w + i]
                    + cfg.noise_sigma * rng::normal(&mut rng);
            }
        }
    }
    out
}

const GLYPHS: [[u8; 16]; 3] = [
    // solid square
    [1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
    // X
    [1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 0, 1, 0, 0, 1],
    // stripes
    [1, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0],
];

/// Static privacy component for one frame (`c * h * w`). Each set bit adds a
/// hue offset on one channel and a glyph in one corner. The all-zeros label
/// gives the zero tensor. Depends only on y_b.
pub fn privacy_component(cfg: &GenConfig, y_b: &[bool]) -> Vec<f64> {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let mut out = vec![0.0; c * h * w];
    for (bit, &set) in y_b.iter().enumerate() {
        if !set {
            continue;
        }
        let ch = bit % c;
        for v in out[ch * h * w..(ch + 1) * h * w].iter_mut() {
            *v += cfg.hue_amp;
        }
        let (y0, x0) = match bit % 4 {
            0 => (0, 0),
            1 => (0, w - 4),
            2 => (h - 4, 0),
            _ => (h - 4, w - 4),
        };
        let glyph = &GLYPHS[bit % GLYPHS.len()];
        for ci in 0..c {
            for gy in 0..4 {
                for gx in 0..4 {
                    if glyph[gy * 4 + gx] == 1 {
                        out[ci * h * w + (y0 + gy) * w + x0 + gx] += cfg.glyph_amp;
                    }
                }
            }
        }
    }
    out
}

fn check_labels(cfg: &GenConfig, y_t: usize, y_b: &[bool]) -> Result<()> {
    if y_t >= cfg.k_action {
        return Err(Error::invalid(
            "make-clip",
            format!("action class {y_t} out of range for {}", cfg.k_action),
        ));
    }
    if y_b.len() != cfg.k_privacy {
        return Err(Error::invalid(
            "make-clip",
            format!("expected {} attribute bits, got {}", cfg.k_privacy, y_b.len()),
        ));
    }
    Ok(())
}

fn make_clip_with_frames(
    cfg: &GenConfig,
    y_t: usize,
    y_b: &[bool],
    seed: u64,
    t_frames: usize,
) -> Result<Clip> {
    check_labels(cfg, y_t, y_b)?;
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let action = action_component(cfg, y_t, seed, t_frames);
    let privacy = privacy_component(cfg, y_b);
    let mut frames = vec![0.0; t_frames * c * h * w];
    let flen = c * h * w;
    for f in 0..t_frames {
        for i in 0..flen {
            frames[f * flen + i] = (action[f * flen + i] + privacy[i]).clamp(0.0, 1.0);
        }
    }
    Ok(Clip { frames, t: t_frames, channels: c, height: h, width: w, y_t, y_b: y_b.to_vec(), seed })
}

/// Full clip of `cfg.frames` frames.
pub fn make_clip(cfg: &GenConfig, y_t: usize, y_b: &[bool], seed: u64) -> Result<Clip> {
    make_clip_with_frames(cfg, y_t, y_b, seed, cfg.frames)
}

/// Still image (one frame), the privacy-set analog.
pub fn make_still(cfg: &GenConfig, y_t: usize, y_b: &[bool], seed: u64) -> Result<Clip> {
    make_clip_with_frames(cfg, y_t, y_b, seed, 1)
}

fn draw_labels(
    cfg: &GenConfig,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<Vec<bool>>) {
    // Stratified classes (uniform within +-1), independent attribute bits.
    let mut classes: Vec<usize> = (0..n).map(|i| i % cfg.k_action).collect();
    rng::shuffle(rng, &mut classes);
    let bits: Vec<Vec<bool>> =
        (0..n).map(|_| (0..cfg.k_privacy).map(|_| rng::coin(rng)).collect()).collect();
    (classes, bits)
}

/// Builds the action split (clips labeled y_t) and the privacy split
/// (stills labeled y_b). Label draws are independent between the splits and
/// per-clip seeds are disjoint between train and eval.
pub fn make_splits(cfg: &GenConfig, seed: u64) -> Result<Splits> {
    let build = |tag: u64, n_train: usize, n_eval: usize, still: bool| -> Result<DatasetSplit> {
        let mut label_rng = rng::stream_rng(seed, tag, u64::MAX);
        // Stratify train and eval separately so each subset is balanced.
        let (mut classes, mut bits) = draw_labels(cfg, n_train, &mut label_rng);
        let (eval_classes, eval_bits) = draw_labels(cfg, n_eval, &mut label_rng);
        classes.extend(eval_classes);
        bits.extend(eval_bits);
        let mut clips = Vec::with_capacity(n_train + n_eval);
        for i in 0..n_train + n_eval {
            let clip_seed = rng::derive(seed, tag, i as u64);
            clips.push(if still {
                make_still(cfg, classes[i], &bits[i], clip_seed)?
            } else {
                make_clip(cfg, classes[i], &bits[i], clip_seed)?
            });
        }
        let eval = clips.split_off(n_train);
        Ok(DatasetSplit { train: clips, eval })
    };
    Ok(Splits {
        action: build(rng::stream::DATA_ACTION, cfg.train_clips, cfg.eval_clips, false)?,
        privacy: build(rng::stream::DATA_PRIVACY, cfg.train_privacy, cfg.eval_privacy, true)?,
    })
}

/// Positive-pair sampler.
///
/// For a video clip this returns frames `(t, t + skip)` with `t` drawn
/// uniformly from the valid range. For a still (`t == 1`, `skip == 0`) it
/// returns two stochastic augmentations: random crop-and-resize to 0.8
/// scale, horizontal flip, per-channel jitter of +-0.1.
pub fn sample_frame_pair(
    clip: &Clip,
    skip: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if skip >= clip.t {
        return Err(Error::invalid(
            "frame-pair",
            format!("skip {skip} out of range for {} frames", clip.t),
        ));
    }
    if clip.t == 1 {
        let a = augment_still(clip, rng);
        let b = augment_still(clip, rng);
        return Ok((a, b));
    }
    let t = rng::index(rng, clip.t - skip);
    Ok((clip.frame(t).to_vec(), clip.frame(t + skip).to_vec()))
}

fn augment_still(clip: &Clip, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (c, h, w) = (clip.channels, clip.height, clip.width);
    let src = clip.frame(0);
    let ch = ((h as f64) * 0.8).round() as usize;
    let cw = ((w as f64) * 0.8).round() as usize;
    let top = rng::index(rng, h - ch + 1);
    let left = rng::index(rng, w - cw + 1);
    let flip = rng::coin(rng);
    let jitter: Vec<f64> = (0..c).map(|_| rng::uniform_in(rng, -0.1, 0.1)).collect();

    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            let sy = top + y * ch / h;
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = left + xx * cw / w;
                out[ci * h * w + y * w + x] =
                    (src[ci * h * w + sy * w + sx] + jitter[ci]).clamp(0.0, 1.0);
            }
        }
    }
    out
}
