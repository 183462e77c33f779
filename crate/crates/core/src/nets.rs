//! The three tiny networks: an encoder-decoder anonymizer (image to image),
//! a clip classifier for the utility branch, and a frame encoder with either
//! a projection head (contrastive budget branch) or a multi-label head
//! (privacy probe). Widths are configurable; shapes are desk scale.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng;
use crate::tensor::{concat, Tape, Tensor};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    /// Final activation squashes into [0, 1].
    Sigmoid,
    /// No range constraint on the output.
    Linear,
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let s = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng::uniform_in(rng, -s, s)).collect()
}

fn conv_param(set: &mut ParamSet, name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) {
    let fan_in = c_in * k * k;
    set.push(format!("{name}.w"), vec![c_out, c_in, k, k], uniform_fan_in(rng, c_out * fan_in, fan_in));
    set.push(format!("{name}.b"), vec![c_out], vec![0.0; c_out]);
}

fn linear_param(set: &mut ParamSet, name: &str, in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) {
    set.push(format!("{name}.w"), vec![in_f, out_f], uniform_fan_in(rng, in_f * out_f, in_f));
    set.push(format!("{name}.b"), vec![out_f], vec![0.0; out_f]);
}

fn conv_block(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.conv2d(w)?.bias_add_chan(b)
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.bias_add_row(b)
}

/// Constant `[groups, groups*per]` matrix averaging consecutive blocks of
/// `per` rows; used for the temporal mean over a clip's frames.
fn group_mean_matrix(tape: &Tape, groups: usize, per: usize) -> Result<Tensor> {
    let mut m = vec![0.0; groups * groups * per];
    for g in 0..groups {
        for t in 0..per {
            m[g * (groups * per) + g * per + t] = 1.0 / per as f64;
        }
    }
    tape.constant(m, &[groups, groups * per])
}

// ---------------------------------------------------------------------------
// Anonymizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AnonymizerCfg {
    pub in_ch: usize,
    pub width: usize,
    pub output: OutputMode,
    /// Adds encoder-to-decoder concat skips. Off by default: at this scale a
    /// skip makes the identity trivially representable and weakens the
    /// anonymization pressure.
    pub skip: bool,
}

impl Default for AnonymizerCfg {
    fn default() -> Self {
        AnonymizerCfg { in_ch: 3, width: 8, output: OutputMode::Sigmoid, skip: false }
    }
}

/// Encoder-decoder image transform: two conv+relu+pool stages down, a
/// bottleneck conv, two upsample+conv stages back to the input shape.
#[derive(Debug, Clone)]
pub struct Anonymizer {
    pub cfg: AnonymizerCfg,
    pub params: ParamSet,
}

impl Anonymizer {
    pub fn init(cfg: AnonymizerCfg, seed: u64) -> Self {
        let mut rng = rng::stream_rng(seed, rng::stream::INIT_ANONYMIZER, 0);
        let (c, w) = (cfg.in_ch, cfg.width);
        let mut set = ParamSet::default();
        conv_param(&mut set, "enc1", w, c, 3, &mut rng);
        conv_param(&mut set, "enc2", 2 * w, w, 3, &mut rng);
        conv_param(&mut set, "mid", 2 * w, 2 * w, 3, &mut rng);
        let dec1_in = if cfg.skip { 4 * w } else { 2 * w };
        let dec2_in = if cfg.skip { 2 * w } else { w };
        conv_param(&mut set, "dec1", w, dec1_in, 3, &mut rng);
        conv_param(&mut set, "dec2", c, dec2_in, 3, &mut rng);
        Anonymizer { cfg, params: set }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<BoundAnonymizer> {
        Ok(BoundAnonymizer { cfg: self.cfg, t: self.params.bind(tape, trainable)? })
    }

    /// Forward pass without recording anything the caller keeps: builds a
    /// throwaway tape and returns plain data.
    pub fn apply(&self, frames: &[f64], shape: &[usize]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let x = tape.constant(frames.to_vec(), shape)?;
        let out = self.bind(&tape, false)?.forward(&x)?;
        Ok(out.data())
    }
}

pub struct BoundAnonymizer {
    cfg: AnonymizerCfg,
    t: Vec<Tensor>,
}

impl BoundAnonymizer {
    pub fn tensors(&self) -> &[Tensor] {
        &self.t
    }

    /// `[batch, c, h, w]` to the same shape; h and w must be divisible by 4.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.cfg.in_ch {
            return Err(Error::invalid(
                "anonymize",
                format!("need [batch, {}, h, w], got {shape:?}", self.cfg.in_ch),
            ));
        }
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(Error::invalid(
                "anonymize",
                format!("spatial extents must be divisible by 4, got {shape:?}"),
            ));
        }
        let [e1w, e1b, e2w, e2b, mw, mb, d1w, d1b, d2w, d2b] = &self.t[..] else {
            return Err(Error::invalid("anonymize", "unexpected parameter count"));
        };
        let a1 = conv_block(x, e1w, e1b)?.relu(); // [b, w, h, w]
        let p1 = a1.mean_pool2x2()?;
        let a2 = conv_block(&p1, e2w, e2b)?.relu(); // [b, 2w, h/2, w/2]
        let p2 = a2.mean_pool2x2()?;
        let mid = conv_block(&p2, mw, mb)?.relu(); // [b, 2w, h/4, w/4]

        let u1 = mid.upsample2x()?;
        let d1_in = if self.cfg.skip { concat(&[&u1, &a2], 1)? } else { u1 };
        let d1 = conv_block(&d1_in, d1w, d1b)?.relu();
        let u2 = d1.upsample2x()?;
        let d2_in = if self.cfg.skip { concat(&[&u2, &a1], 1)? } else { u2 };
        let out = conv_block(&d2_in, d2w, d2b)?;
        Ok(match self.cfg.output {
            OutputMode::Sigmoid => out.sigmoid(),
            OutputMode::Linear => out,
        })
    }
}

// ---------------------------------------------------------------------------
// Utility classifier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityArch {
    /// Per-frame conv+relu+pool stack, temporal mean, linear head.
    Conv,
    /// Single linear layer over the flattened temporal-mean frame.
    Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct UtilityCfg {
    pub in_ch: usize,
    pub width: usize,
    pub classes: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub arch: UtilityArch,
}

#[derive(Debug, Clone)]
pub struct UtilityNet {
    pub cfg: UtilityCfg,
    pub params: ParamSet,
}

impl UtilityNet {
    pub fn init(cfg: UtilityCfg, seed: u64, stream: u64) -> Self {
        let mut rng = rng::stream_rng(seed, stream, 0);
        let mut set = ParamSet::default();
        match cfg.arch {
            UtilityArch::Conv => {
                let w = cfg.width;
                conv_param(&mut set, "conv1", w, cfg.in_ch, 3, &mut rng);
                conv_param(&mut set, "conv2", 2 * w, w, 3, &mut rng);
                let feat = 2 * w * (cfg.frame_h / 4) * (cfg.frame_w / 4);
                linear_param(&mut set, "head", feat, cfg.classes, &mut rng);
            }
            UtilityArch::Linear => {
                let feat = cfg.in_ch * cfg.frame_h * cfg.frame_w;
                linear_param(&mut set, "head", feat, cfg.classes, &mut rng);
            }
        }
        UtilityNet { cfg, params: set }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<BoundUtility> {
        Ok(BoundUtility { cfg: self.cfg, t: self.params.bind(tape, trainable)? })
    }
}

pub struct BoundUtility {
    cfg: UtilityCfg,
    t: Vec<Tensor>,
}

impl BoundUtility {
    pub fn tensors(&self) -> &[Tensor] {
        &self.t
    }

    /// Pre-head clip features: per-frame stack then temporal mean,
    /// `[clips, feat]`.
    pub fn features(&self, frames: &Tensor, clips: usize, t_frames: usize) -> Result<Tensor> {
        if t_frames == 0 || clips == 0 {
            return Err(Error::invalid("classify", "empty clip batch"));
        }
        let shape = frames.shape();
        if shape.len() != 4 || shape[0] != clips * t_frames {
            return Err(Error::invalid(
                "classify",
                format!("expected {} stacked frames, got {shape:?}", clips * t_frames),
            ));
        }
        let tape = frames.tape();
        let per_frame = match self.cfg.arch {
            UtilityArch::Conv => {
                let [c1w, c1b, c2w, c2b, ..] = &self.t[..] else {
                    return Err(Error::invalid("classify", "unexpected parameter count"));
                };
                let a1 = conv_block(frames, c1w, c1b)?.relu().mean_pool2x2()?;
                conv_block(&a1, c2w, c2b)?.relu().mean_pool2x2()?
            }
            UtilityArch::Linear => frames.clone(),
        };
        let feat = per_frame.numel() / (clips * t_frames);
        let flat = per_frame.reshape(&[clips * t_frames, feat])?;
        group_mean_matrix(&tape, clips, t_frames)?.matmul(&flat)
    }

    /// Classifies `clips` clips of `t_frames` frames each, supplied as a
    /// stacked `[clips * t_frames, c, h, w]` tensor. Returns
    /// `[clips, classes]` logits.
    pub fn forward(&self, frames: &Tensor, clips: usize, t_frames: usize) -> Result<Tensor> {
        let pooled = self.features(frames, clips, t_frames)?;
        let (hw, hb) = match self.cfg.arch {
            UtilityArch::Conv => (&self.t[4], &self.t[5]),
            UtilityArch::Linear => (&self.t[0], &self.t[1]),
        };
        linear(&pooled, hw, hb)
    }
}

// ---------------------------------------------------------------------------
// Budget encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetHead {
    /// Non-linear projection head producing `dim`-dimensional projections.
    Projection { dim: usize, hidden: usize },
    /// Multi-label logit head for `k` private attributes (probe variant).
    MultiLabel { k: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct BudgetCfg {
    pub in_ch: usize,
    pub width: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub feat: usize,
    pub head: BudgetHead,
}

#[derive(Debug, Clone)]
pub struct BudgetNet {
    pub cfg: BudgetCfg,
    pub params: ParamSet,
}

impl BudgetNet {
    pub fn init(cfg: BudgetCfg, seed: u64, stream: u64) -> Self {
        let mut rng = rng::stream_rng(seed, stream, 0);
        let w = cfg.width;
        let mut set = ParamSet::default();
        conv_param(&mut set, "conv1", w, cfg.in_ch, 3, &mut rng);
        conv_param(&mut set, "conv2", 2 * w, w, 3, &mut rng);
        let conv_feat = 2 * w * (cfg.frame_h / 4) * (cfg.frame_w / 4);
        linear_param(&mut set, "embed", conv_feat, cfg.feat, &mut rng);
        match cfg.head {
            BudgetHead::Projection { dim, hidden } => {
                linear_param(&mut set, "proj1", cfg.feat, hidden, &mut rng);
                linear_param(&mut set, "proj2", hidden, dim, &mut rng);
            }
            BudgetHead::MultiLabel { k } => {
                linear_param(&mut set, "head", cfg.feat, k, &mut rng);
            }
        }
        BudgetNet { cfg, params: set }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<BoundBudget> {
        Ok(BoundBudget { cfg: self.cfg, t: self.params.bind(tape, trainable)? })
    }
}

pub struct BoundBudget {
    cfg: BudgetCfg,
    t: Vec<Tensor>,
}

impl BoundBudget {
    pub fn tensors(&self) -> &[Tensor] {
        &self.t
    }

    /// Maps `[batch, c, h, w]` frames to projections or attribute logits,
    /// depending on the configured head.
    pub fn forward(&self, frames: &Tensor) -> Result<Tensor> {
        let shape = frames.shape();
        if shape.len() != 4 || shape[1] != self.cfg.in_ch {
            return Err(Error::invalid(
                "embed",
                format!("need [batch, {}, h, w], got {shape:?}", self.cfg.in_ch),
            ));
        }
        let batch = shape[0];
        let (c1w, c1b, c2w, c2b, ew, eb, rest) = match &self.t[..] {
            [c1w, c1b, c2w, c2b, ew, eb, rest @ ..] => (c1w, c1b, c2w, c2b, ew, eb, rest),
            _ => return Err(Error::invalid("embed", "unexpected parameter count")),
        };
        let a1 = conv_block(frames, c1w, c1b)?.relu().mean_pool2x2()?;
        let a2 = conv_block(&a1, c2w, c2b)?.relu().mean_pool2x2()?;
        let feat = a2.numel() / batch;
        let emb = linear(&a2.reshape(&[batch, feat])?, ew, eb)?;
        match (self.cfg.head, rest) {
            (BudgetHead::Projection { .. }, [p1w, p1b, p2w, p2b]) => {
                linear(&linear(&emb, p1w, p1b)?.relu(), p2w, p2b)
            }
            (BudgetHead::MultiLabel { .. }, [hw, hb]) => linear(&emb, hw, hb),
            _ => Err(Error::invalid("embed", "head parameters do not match configured head")),
        }
    }
}

#[cfg(test)]
mod tests;
