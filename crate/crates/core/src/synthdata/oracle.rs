//! Closed-form decoders that know the generator. They calibrate the
//! benchmark (a probe can only be judged against data that is decodable at
//! all) and stay independent of every trained network.

use super::{blob_track, privacy_component, Clip, GenConfig};

/// Matched-filter action decoder: correlates the clip against the noiseless
/// blob trajectory of every class and picks the best. Ties break to the
/// lowest class id.
pub fn action_predict(cfg: &GenConfig, clip: &Clip) -> usize {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for k in 0..cfg.k_action {
        let track = blob_track(cfg, k, clip.t);
        let mut score = 0.0;
        for f in 0..clip.t {
            let frame = clip.frame(f);
            let tframe = &track[f * h * w..(f + 1) * h * w];
            for ci in 0..c {
                let plane = &frame[ci * h * w..(ci + 1) * h * w];
                for i in 0..h * w {
                    score += plane[i] * tframe[i];
                }
            }
        }
        if score > best.0 {
            best = (score, k);
        }
    }
    best.1
}

/// Per-attribute matched-filter scores for one frame: the dot product with
/// each bit's isolated signature (hue plus glyph), normalized by the
/// signature energy.
pub fn privacy_scores(cfg: &GenConfig, frame: &[f64]) -> Vec<f64> {
    (0..cfg.k_privacy)
        .map(|bit| {
            let mut only = vec![false; cfg.k_privacy];
            only[bit] = true;
            let sig = privacy_component(cfg, &only);
            let energy: f64 = sig.iter().map(|v| v * v).sum();
            let dot: f64 =
                frame.iter().zip(&sig).map(|(&x, &s)| (x - cfg.background) * s).sum();
            dot / energy
        })
        .collect()
}
