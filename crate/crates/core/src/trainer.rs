//! Two-step minimax training: identity pretraining of the anonymizer, the
//! alternating anonymization loop (step 1 updates the anonymizer against
//! frozen branches, step 2 updates the branches against the frozen
//! anonymizer), and the fresh-probe retraining phases used for evaluation.

use crate::checkpoint::NamedArray;
use crate::config::{LrSchedule, PenaltySpace, TrainConfig};
use crate::error::{Error, Result};
use crate::losses;
use crate::metrics;
use crate::nets::{
    Anonymizer, AnonymizerCfg, BudgetCfg, BudgetHead, BudgetNet, UtilityArch, UtilityCfg,
    UtilityNet,
};
use crate::params::Optimizer;
use crate::rng;
use crate::synthdata::{sample_frame_pair, Clip, DatasetSplit, Splits};
use crate::tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Network construction from config
// ---------------------------------------------------------------------------

pub fn build_anonymizer(cfg: &TrainConfig) -> Anonymizer {
    Anonymizer::init(
        AnonymizerCfg {
            in_ch: cfg.gen.channels,
            width: cfg.width_anonymizer,
            output: cfg.anonymizer_output,
            skip: cfg.anonymizer_skip,
        },
        cfg.seed,
    )
}

pub fn build_utility(cfg: &TrainConfig, arch: UtilityArch, stream: u64) -> UtilityNet {
    UtilityNet::init(
        UtilityCfg {
            in_ch: cfg.gen.channels,
            width: cfg.width_utility,
            classes: cfg.gen.k_action,
            frame_h: cfg.gen.height,
            frame_w: cfg.gen.width,
            arch,
        },
        cfg.seed,
        stream,
    )
}

pub fn build_budget(cfg: &TrainConfig) -> BudgetNet {
    BudgetNet::init(
        BudgetCfg {
            in_ch: cfg.gen.channels,
            width: cfg.width_budget,
            frame_h: cfg.gen.height,
            frame_w: cfg.gen.width,
            feat: cfg.budget_feat,
            head: BudgetHead::Projection { dim: cfg.proj_dim, hidden: cfg.proj_hidden },
        },
        cfg.seed,
        rng::stream::INIT_BUDGET,
    )
}

pub fn build_privacy_probe(cfg: &TrainConfig) -> BudgetNet {
    BudgetNet::init(
        BudgetCfg {
            in_ch: cfg.gen.channels,
            width: cfg.width_budget,
            frame_h: cfg.gen.height,
            frame_w: cfg.gen.width,
            feat: cfg.budget_feat,
            head: BudgetHead::MultiLabel { k: cfg.gen.k_privacy },
        },
        cfg.seed,
        rng::stream::INIT_PRIVACY_PROBE,
    )
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

pub struct ActionBatch {
    pub frames: Vec<f64>,
    pub labels: Vec<usize>,
    pub clips: usize,
    pub t: usize,
}

pub struct PrivacyBatch {
    pub view_a: Vec<f64>,
    pub view_b: Vec<f64>,
    pub n: usize,
}

pub fn gather_action_batch(clips: &[Clip], indices: &[usize]) -> ActionBatch {
    let t = clips[indices[0]].t;
    let flen = clips[indices[0]].frames.len();
    let mut frames = Vec::with_capacity(indices.len() * flen);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        frames.extend_from_slice(&clips[i].frames);
        labels.push(clips[i].y_t);
    }
    ActionBatch { frames, labels, clips: indices.len(), t }
}

pub fn gather_privacy_batch(
    clips: &[Clip],
    indices: &[usize],
    skip: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<PrivacyBatch> {
    let mut view_a = Vec::new();
    let mut view_b = Vec::new();
    for &i in indices {
        let clip = &clips[i];
        let eff_skip = if clip.t == 1 { 0 } else { skip };
        let (a, b) = sample_frame_pair(clip, eff_skip, rng)?;
        view_a.extend_from_slice(&a);
        view_b.extend_from_slice(&b);
    }
    Ok(PrivacyBatch { view_a, view_b, n: indices.len() })
}

// ---------------------------------------------------------------------------
// Identity pretraining (anonymizer initialization)
// ---------------------------------------------------------------------------

/// Trains the anonymizer to reconstruct its input under the summed L1 loss.
/// Returns per-epoch mean losses. Aborts on divergence.
pub fn pretrain_anonymizer(
    anon: &mut Anonymizer,
    frames: &[&[f64]],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Vec<f64>> {
    let (c, h, w) = (cfg.gen.channels, cfg.gen.height, cfg.gen.width);
    let mut opt = Optimizer::new(cfg.optimizer, &anon.params);
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..frames.len()).collect();
        rng::shuffle(
            &mut rng::stream_rng(cfg.seed, rng::stream::SHUFFLE_PRETRAIN, epoch as u64),
            &mut order,
        );
        let mut total = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_action) {
            let mut data = Vec::with_capacity(batch.len() * c * h * w);
            for &i in batch {
                data.extend_from_slice(frames[i]);
            }
            let tape = Tape::new();
            let x = tape.constant(data, &[batch.len(), c, h, w])?;
            let bound = anon.bind(&tape, true)?;
            let out = bound.forward(&x)?;
            let loss = losses::l1_recon_loss(&x, &out)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "pretraining diverged at epoch {epoch} (loss {value})"
                )));
            }
            tape.backward(&loss)?;
            let grads = anon.params.grads(bound.tensors());
            opt.step(&mut anon.params, &grads, cfg.lr_anonymizer)?;
            total += value;
            steps += 1;
        }
        curve.push(total / steps.max(1) as f64);
    }
    Ok(curve)
}

/// Mean |x - f_A(x)| over the given frames.
pub fn mean_abs_error(anon: &Anonymizer, frames: &[&[f64]], cfg: &TrainConfig) -> Result<f64> {
    let (c, h, w) = (cfg.gen.channels, cfg.gen.height, cfg.gen.width);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in frames.chunks(256) {
        let mut data = Vec::with_capacity(chunk.len() * c * h * w);
        for f in chunk {
            data.extend_from_slice(f);
        }
        let out = anon.apply(&data, &[chunk.len(), c, h, w])?;
        total += data.iter().zip(&out).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += data.len();
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Step 1 / Step 2
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_t: f64,
    pub l_b: f64,
    pub l_penalty: f64,
    pub l_a: f64,
    pub rms: f64,
}

/// The full step-1 computation graph, exposed so instrumentation and tests
/// can backprop through individual terms.
pub struct Step1Graph {
    pub tape: Tape,
    pub anon_tensors: Vec<Tensor>,
    pub l_t: Tensor,
    pub l_b: Tensor,
    pub l_penalty: Tensor,
    pub l_a: Tensor,
    pub rms: Tensor,
    /// Node ids of the privacy views; the penalty term must never reach them.
    pub privacy_input_ids: Vec<usize>,
}

pub fn build_step1_graph(
    anonymizer: &Anonymizer,
    utility: &UtilityNet,
    budget: &BudgetNet,
    ab: &ActionBatch,
    pb: &PrivacyBatch,
    cfg: &TrainConfig,
    include_utility: bool,
) -> Result<Step1Graph> {
    let (c, h, w) = (cfg.gen.channels, cfg.gen.height, cfg.gen.width);
    let tape = Tape::new();
    let anon = anonymizer.bind(&tape, true)?;
    let util = utility.bind(&tape, false)?;
    let budg = budget.bind(&tape, false)?;

    let x_action = tape.constant(ab.frames.clone(), &[ab.clips * ab.t, c, h, w])?;
    let fa_action = anon.forward(&x_action)?;
    let l_t = if include_utility {
        losses::cross_entropy(&util.forward(&fa_action, ab.clips, ab.t)?, &ab.labels)?
    } else {
        tape.constant(vec![0.0], &[1])?
    };

    let x_va = tape.constant(pb.view_a.clone(), &[pb.n, c, h, w])?;
    let x_vb = tape.constant(pb.view_b.clone(), &[pb.n, c, h, w])?;
    let za = budg.forward(&anon.forward(&x_va)?)?;
    let zb = budg.forward(&anon.forward(&x_vb)?)?;
    let l_b = losses::nt_xent(&za, &zb, cfg.tau)?;

    // The limiter sees the action batch only; privacy inputs stay free.
    let rms = match cfg.penalty_space {
        PenaltySpace::Pixel => losses::rms_diff(&x_action, &fa_action)?,
        PenaltySpace::Feature => {
            let f_clean = util.features(&x_action, ab.clips, ab.t)?;
            let f_anon = util.features(&fa_action, ab.clips, ab.t)?;
            losses::rms_diff(&f_clean, &f_anon)?
        }
    };
    let l_penalty = losses::hinge(&rms, cfg.b)?;
    let l_a = losses::anonymizer_loss(&l_t, &l_b, &l_penalty, cfg.lambda_penalty, cfg.mu)?;

    Ok(Step1Graph {
        tape,
        anon_tensors: anon.tensors().to_vec(),
        l_t,
        l_b,
        l_penalty,
        l_a,
        rms,
        privacy_input_ids: vec![x_va.id(), x_vb.id()],
    })
}

fn assert_penalty_scope(graph: &Step1Graph) {
    let ancestors = graph.l_penalty.ancestor_ids();
    for id in &graph.privacy_input_ids {
        assert!(
            !ancestors.contains(id),
            "privacy batch leaked into the penalty term (node {id})"
        );
    }
}

// ---------------------------------------------------------------------------
// Minimax state and the alternating loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_t: f64,
    pub l_b: f64,
    pub l_penalty: f64,
    pub l_a: f64,
    pub wall: f64,
}

pub struct MinimaxState {
    pub anonymizer: Anonymizer,
    pub utility: UtilityNet,
    pub budget: BudgetNet,
    pub opt_a: Optimizer,
    pub opt_t: Optimizer,
    pub opt_b: Optimizer,
    pub epoch: usize,
    pub curves: Vec<EpochLog>,
    /// How many frozen-parameter checks have run (step isolation audit).
    pub isolation_checks_run: u64,
}

impl MinimaxState {
    pub fn new(cfg: &TrainConfig, pretrained: Anonymizer, utility: UtilityNet) -> Self {
        let budget = build_budget(cfg);
        MinimaxState {
            opt_a: Optimizer::new(cfg.optimizer, &pretrained.params),
            opt_t: Optimizer::new(cfg.optimizer, &utility.params),
            opt_b: Optimizer::new(cfg.optimizer, &budget.params),
            anonymizer: pretrained,
            utility,
            budget,
            epoch: 0,
            curves: Vec::new(),
            isolation_checks_run: 0,
        }
    }

    /// One anonymizer update against frozen branches.
    pub fn step1(
        &mut self,
        ab: &ActionBatch,
        pb: &PrivacyBatch,
        cfg: &TrainConfig,
    ) -> Result<StepLosses> {
        self.step1_with_opts(ab, pb, cfg, true)
    }

    /// Step 1 with the utility term optionally detached (instrumentation:
    /// isolates the budget-ascent component of the update).
    pub fn step1_with_opts(
        &mut self,
        ab: &ActionBatch,
        pb: &PrivacyBatch,
        cfg: &TrainConfig,
        include_utility: bool,
    ) -> Result<StepLosses> {
        let (pre_t, pre_b) = if cfg.isolation_checks {
            (Some(self.utility.params.digest()), Some(self.budget.params.digest()))
        } else {
            (None, None)
        };

        let graph = build_step1_graph(
            &self.anonymizer,
            &self.utility,
            &self.budget,
            ab,
            pb,
            cfg,
            include_utility,
        )?;
        let snap = StepLosses {
            l_t: graph.l_t.item(),
            l_b: graph.l_b.item(),
            l_penalty: graph.l_penalty.item(),
            l_a: graph.l_a.item(),
            rms: graph.rms.item(),
        };
        if !snap.l_a.is_finite() {
            return Err(Error::Numerical(format!("step-1 loss is not finite: {snap:?}")));
        }
        if cfg.isolation_checks {
            assert_penalty_scope(&graph);
        }
        graph.tape.backward(&graph.l_a)?;
        let grads = self.anonymizer.params.grads(&graph.anon_tensors);
        self.opt_a.step(&mut self.anonymizer.params, &grads, cfg.lr_anonymizer)?;

        if let (Some(pre_t), Some(pre_b)) = (pre_t, pre_b) {
            assert_eq!(pre_t, self.utility.params.digest(), "step-1 touched utility parameters");
            assert_eq!(pre_b, self.budget.params.digest(), "step-1 touched budget parameters");
            self.isolation_checks_run += 1;
        }
        Ok(snap)
    }

    /// One utility + budget update against the frozen anonymizer.
    pub fn step2(
        &mut self,
        ab: &ActionBatch,
        pb: &PrivacyBatch,
        cfg: &TrainConfig,
    ) -> Result<(f64, f64)> {
        let (c, h, w) = (cfg.gen.channels, cfg.gen.height, cfg.gen.width);
        let pre_a = cfg.isolation_checks.then(|| self.anonymizer.params.digest());

        // utility branch
        let tape = Tape::new();
        let anon = self.anonymizer.bind(&tape, false)?;
        let util = self.utility.bind(&tape, true)?;
        let x = tape.constant(ab.frames.clone(), &[ab.clips * ab.t, c, h, w])?;
        let logits = util.forward(&anon.forward(&x)?, ab.clips, ab.t)?;
        let l_t = losses::cross_entropy(&logits, &ab.labels)?;
        let l_t_val = l_t.item();
        if !l_t_val.is_finite() {
            return Err(Error::Numerical(format!("step-2 utility loss is not finite: {l_t_val}")));
        }
        tape.backward(&l_t)?;
        let grads = self.utility.params.grads(util.tensors());
        self.opt_t.step(&mut self.utility.params, &grads, cfg.lr_utility)?;

        // budget branch
        let tape = Tape::new();
        let anon = self.anonymizer.bind(&tape, false)?;
        let budg = self.budget.bind(&tape, true)?;
        let va = tape.constant(pb.view_a.clone(), &[pb.n, c, h, w])?;
        let vb = tape.constant(pb.view_b.clone(), &[pb.n, c, h, w])?;
        let za = budg.forward(&anon.forward(&va)?)?;
        let zb = budg.forward(&anon.forward(&vb)?)?;
        let l_b = losses::nt_xent(&za, &zb, cfg.tau)?;
        let l_b_val = l_b.item();
        if !l_b_val.is_finite() {
            return Err(Error::Numerical(format!("step-2 budget loss is not finite: {l_b_val}")));
        }
        tape.backward(&l_b)?;
        let grads = self.budget.params.grads(budg.tensors());
        self.opt_b.step(&mut self.budget.params, &grads, cfg.lr_budget)?;

        if let Some(pre_a) = pre_a {
            assert_eq!(pre_a, self.anonymizer.params.digest(), "step-2 touched anonymizer parameters");
            self.isolation_checks_run += 1;
        }
        Ok((l_t_val, l_b_val))
    }

    /// Runs alternating epochs until `state.epoch == until`. Each pairing of
    /// one action batch with one privacy batch does step 1 then step 2 on
    /// the same batches and views. Resuming from a checkpointed epoch
    /// consumes exactly the streams of an uninterrupted run.
    pub fn run_epochs(&mut self, cfg: &TrainConfig, splits: &Splits, until: usize) -> Result<()> {
        let n_action = splits.action.train.len();
        let n_privacy = splits.privacy.train.len();
        while self.epoch < until {
            let epoch = self.epoch;
            let started = std::time::Instant::now();
            let mut order: Vec<usize> = (0..n_action).collect();
            rng::shuffle(
                &mut rng::stream_rng(cfg.seed, rng::stream::SHUFFLE, epoch as u64),
                &mut order,
            );
            let mut priv_order: Vec<usize> = (0..n_privacy).collect();
            rng::shuffle(
                &mut rng::stream_rng(cfg.seed, rng::stream::SHUFFLE_PRIVACY, epoch as u64),
                &mut priv_order,
            );

            let mut sums = (0.0, 0.0, 0.0, 0.0);
            let mut steps = 0usize;
            for (step, batch) in order.chunks(cfg.batch_action).enumerate() {
                let ab = gather_action_batch(&splits.action.train, batch);
                let pidx: Vec<usize> = (0..cfg.batch_privacy)
                    .map(|j| priv_order[(step * cfg.batch_privacy + j) % n_privacy])
                    .collect();
                let mut aug_rng = rng::stream_rng(
                    cfg.seed,
                    rng::stream::AUGMENT,
                    ((epoch as u64) << 32) | step as u64,
                );
                let pb =
                    gather_privacy_batch(&splits.privacy.train, &pidx, cfg.skip, &mut aug_rng)?;

                let losses1 = self.step1(&ab, &pb, cfg)?;
                self.step2(&ab, &pb, cfg)?;

                sums.0 += losses1.l_t;
                sums.1 += losses1.l_b;
                sums.2 += losses1.l_penalty;
                sums.3 += losses1.l_a;
                steps += 1;
            }
            let n = steps.max(1) as f64;
            self.curves.push(EpochLog {
                epoch,
                l_t: sums.0 / n,
                l_b: sums.1 / n,
                l_penalty: sums.2 / n,
                l_a: sums.3 / n,
                wall: if cfg.deterministic_timing { 0.0 } else { started.elapsed().as_secs_f64() },
            });
            self.epoch += 1;
        }
        Ok(())
    }

    /// Serializes parameters, optimizer state, epoch and curves.
    pub fn to_arrays(&self, cfg: &TrainConfig) -> (serde_json::Value, Vec<NamedArray>) {
        let mut arrays = Vec::new();
        for (prefix, set) in [
            ("anonymizer", &self.anonymizer.params),
            ("utility", &self.utility.params),
            ("budget", &self.budget.params),
        ] {
            for p in &set.entries {
                arrays.push(NamedArray {
                    name: format!("{prefix}/{}", p.name),
                    shape: p.shape.clone(),
                    data: p.data.clone(),
                });
            }
        }
        for (tag, opt, set) in [
            ("a", &self.opt_a, &self.anonymizer.params),
            ("t", &self.opt_t, &self.utility.params),
            ("b", &self.opt_b, &self.budget.params),
        ] {
            for (i, p) in set.entries.iter().enumerate() {
                if !opt.m.is_empty() {
                    arrays.push(NamedArray {
                        name: format!("opt/{tag}/m/{}", p.name),
                        shape: p.shape.clone(),
                        data: opt.m[i].clone(),
                    });
                    arrays.push(NamedArray {
                        name: format!("opt/{tag}/v/{}", p.name),
                        shape: p.shape.clone(),
                        data: opt.v[i].clone(),
                    });
                }
            }
        }
        let meta = serde_json::json!({
            "kind": "minimax-state",
            "epoch": self.epoch,
            "curves": self.curves,
            "config_digest": cfg.digest(),
            "opt_steps": [self.opt_a.step_count, self.opt_t.step_count, self.opt_b.step_count],
        });
        (meta, arrays)
    }

    /// Rebuilds a state saved by [`MinimaxState::to_arrays`]. The config must
    /// match the one the checkpoint was written with.
    pub fn from_arrays(
        cfg: &TrainConfig,
        meta: &serde_json::Value,
        arrays: &[NamedArray],
    ) -> Result<Self> {
        let stored = meta["config_digest"].as_str().unwrap_or_default();
        if stored != cfg.digest() {
            return Err(Error::Config(format!(
                "checkpoint was written with config {stored}, current is {}",
                cfg.digest()
            )));
        }
        let mut state = MinimaxState::new(
            cfg,
            build_anonymizer(cfg),
            build_utility(cfg, UtilityArch::Conv, rng::stream::INIT_UTILITY),
        );
        let lookup = |name: &str| -> Option<&NamedArray> {
            arrays.iter().find(|a| a.name == name)
        };
        for (prefix, set) in [
            ("anonymizer", &mut state.anonymizer.params),
            ("utility", &mut state.utility.params),
            ("budget", &mut state.budget.params),
        ] {
            for p in set.entries.iter_mut() {
                let a = lookup(&format!("{prefix}/{}", p.name)).ok_or_else(|| {
                    Error::Checkpoint(format!("missing array {prefix}/{}", p.name))
                })?;
                if a.shape != p.shape {
                    return Err(Error::Checkpoint(format!(
                        "array {prefix}/{}: shape {:?} vs expected {:?}",
                        p.name, a.shape, p.shape
                    )));
                }
                p.data = a.data.clone();
            }
        }
        let opt_steps = meta["opt_steps"].as_array().cloned().unwrap_or_default();
        for (i, (tag, opt, set)) in [
            ("a", &mut state.opt_a, &state.anonymizer.params),
            ("t", &mut state.opt_t, &state.utility.params),
            ("b", &mut state.opt_b, &state.budget.params),
        ]
        .into_iter()
        .enumerate()
        {
            opt.step_count = opt_steps.get(i).and_then(|v| v.as_u64()).unwrap_or(0);
            if !opt.m.is_empty() {
                for (j, p) in set.entries.iter().enumerate() {
                    let m = lookup(&format!("opt/{tag}/m/{}", p.name)).ok_or_else(|| {
                        Error::Checkpoint(format!("missing optimizer array for {}", p.name))
                    })?;
                    let v = lookup(&format!("opt/{tag}/v/{}", p.name)).ok_or_else(|| {
                        Error::Checkpoint(format!("missing optimizer array for {}", p.name))
                    })?;
                    opt.m[j] = m.data.clone();
                    opt.v[j] = v.data.clone();
                }
            }
        }
        state.epoch = meta["epoch"].as_u64().unwrap_or(0) as usize;
        state.curves = serde_json::from_value(meta["curves"].clone()).unwrap_or_default();
        Ok(state)
    }
}

/// Initializes the utility branch by brief supervised training on clean
/// synthetic clips, the desk-scale stand-in for pretrained weights.
pub fn init_utility(cfg: &TrainConfig, splits: &Splits) -> Result<UtilityNet> {
    let mut net = build_utility(cfg, UtilityArch::Conv, rng::stream::INIT_UTILITY);
    let frames: Vec<Vec<f64>> =
        splits.action.train.iter().map(|c| c.frames.clone()).collect();
    let labels: Vec<usize> = splits.action.train.iter().map(|c| c.y_t).collect();
    train_action_classifier(
        &mut net,
        &frames,
        &labels,
        cfg,
        cfg.lr_utility,
        cfg.epochs_utility_init,
        0,
    )?;
    Ok(net)
}

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

/// Applies the anonymizer (or the exact identity bypass when `None`) to every
/// clip, returning per-clip transformed frames.
pub fn anonymized_frames(
    anon: Option<&Anonymizer>,
    clips: &[Clip],
    cfg: &TrainConfig,
) -> Result<Vec<Vec<f64>>> {
    let Some(anon) = anon else {
        return Ok(clips.iter().map(|c| c.frames.clone()).collect());
    };
    let (c, h, w) = (cfg.gen.channels, cfg.gen.height, cfg.gen.width);
    let flen = c * h * w;
    let mut out = Vec::with_capacity(clips.len());
    // batch whole clips together for throughput
    for chunk in clips.chunks(256 / clips.first().map(|c| c.t).unwrap_or(1).max(1)) {
        let total_frames: usize = chunk.iter().map(|c| c.t).sum();
        let mut data = Vec::with_capacity(total_frames * flen);
        for clip in chunk {
            data.extend_from_slice(&clip.frames);
        }
        let transformed = anon.apply(&data, &[total_frames, c, h, w])?;
        let mut off = 0;
        for clip in chunk {
            let len = clip.t * flen;
            out.push(transformed[off..off + len].to_vec());
            off += len;
        }
    }
    Ok(out)
}

fn schedule_lr(
    schedule: LrSchedule,
    base: f64,
    epoch: usize,
    epochs: usize,
    history: &[f64],
    current: f64,
) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::WarmupStep => {
            let warmup = (epochs / 10).max(1);
            if epoch < warmup {
                return base * (epoch + 1) as f64 / warmup as f64;
            }
            // divide by 5 when the loss has stagnated over the last 3 epochs
            let k = history.len();
            if k >= 3 && history[k - 1] > history[k - 3] * 0.999 {
                (current / 5.0).max(1e-6)
            } else {
                current
            }
        }
    }
}

/// Cross-entropy training of a clip classifier on fixed (possibly
/// anonymized) frames. Returns per-epoch mean losses.
pub fn train_action_classifier(
    net: &mut UtilityNet,
    frames: &[Vec<f64>],
    labels: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    epochs: usize,
    shuffle_salt: u64,
) -> Result<Vec<f64>> {
    let (c, h, w) = (cfg.gen.channels, cfg.gen.height, cfg.gen.width);
    let flen = c * h * w;
    let mut opt = Optimizer::new(cfg.optimizer, &net.params);
    let mut curve: Vec<f64> = Vec::with_capacity(epochs);
    let mut current_lr = lr;
    for epoch in 0..epochs {
        current_lr =
            schedule_lr(cfg.probe_lr_schedule, lr, epoch, epochs, &curve, current_lr);
        let mut order: Vec<usize> = (0..frames.len()).collect();
        rng::shuffle(
            &mut rng::stream_rng(
                cfg.seed,
                rng::stream::SHUFFLE_PROBE,
                (shuffle_salt << 32) | epoch as u64,
            ),
            &mut order,
        );
        let mut total = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_action) {
            let t = frames[batch[0]].len() / flen;
            let mut data = Vec::with_capacity(batch.len() * t * flen);
            let mut batch_labels = Vec::with_capacity(batch.len());
            for &i in batch {
                data.extend_from_slice(&frames[i]);
                batch_labels.push(labels[i]);
            }
            let tape = Tape::new();
            let x = tape.constant(data, &[batch.len() * t, c, h, w])?;
            let bound = net.bind(&tape, true)?;
            let logits = bound.forward(&x, batch.len(), t)?;
            let loss = losses::cross_entropy(&logits, &batch_labels)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "classifier training diverged at epoch {epoch}"
                )));
            }
            tape.backward(&loss)?;
            let grads = net.params.grads(bound.tensors());
            opt.step(&mut net.params, &grads, current_lr)?;
            total += value;
            steps += 1;
        }
        curve.push(total / steps.max(1) as f64);
    }
    Ok(curve)
}

/// Top-1 of a trained classifier over fixed frames.
pub fn eval_action(
    net: &UtilityNet,
    frames: &[Vec<f64>],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let (c, h, w) = (cfg.gen.channels, cfg.gen.height, cfg.gen.width);
    let flen = c * h * w;
    let mut logit_rows = Vec::with_capacity(frames.len());
    for chunk_start in (0..frames.len()).step_by(64) {
        let chunk = &frames[chunk_start..(chunk_start + 64).min(frames.len())];
        let t = chunk[0].len() / flen;
        let mut data = Vec::new();
        for f in chunk {
            data.extend_from_slice(f);
        }
        let tape = Tape::new();
        let x = tape.constant(data, &[chunk.len() * t, c, h, w])?;
        let logits = net.bind(&tape, false)?.forward(&x, chunk.len(), t)?;
        let d = logits.data();
        let k = d.len() / chunk.len();
        for r in 0..chunk.len() {
            logit_rows.push(d[r * k..(r + 1) * k].to_vec());
        }
    }
    metrics::top1(&logit_rows, labels)
}

pub struct ActionProbeOutcome {
    pub net: UtilityNet,
    pub top1: f64,
    pub losses: Vec<f64>,
}

/// Trains a fresh action classifier on the frozen anonymizer's output and
/// reports eval top-1 ("known data" protocol unless an override eval set is
/// supplied).
pub fn train_action_probe(
    anon: Option<&Anonymizer>,
    arch: UtilityArch,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<ActionProbeOutcome> {
    let frozen_digest = anon.map(|a| a.params.digest());
    let train_frames = anonymized_frames(anon, &split.train, cfg)?;
    let eval_frames = anonymized_frames(anon, &split.eval, cfg)?;
    let train_labels: Vec<usize> = split.train.iter().map(|c| c.y_t).collect();
    let eval_labels: Vec<usize> = split.eval.iter().map(|c| c.y_t).collect();

    let mut net = build_utility(cfg, arch, rng::stream::INIT_ACTION_PROBE);
    let losses = train_action_classifier(
        &mut net,
        &train_frames,
        &train_labels,
        cfg,
        cfg.lr_utility,
        cfg.epochs_action,
        1,
    )?;
    let top1 = eval_action(&net, &eval_frames, &eval_labels, cfg)?;
    if let (Some(before), Some(a)) = (frozen_digest, anon) {
        assert_eq!(before, a.params.digest(), "probe training touched the anonymizer");
    }
    Ok(ActionProbeOutcome { net, top1, losses })
}

#[derive(Debug, Clone)]
pub struct PrivacyEval {
    pub per_attribute_ap: Vec<f64>,
    pub cmap: f64,
    pub f1: f64,
    pub excluded: Vec<usize>,
}

/// Multi-label BCE training of a privacy probe on fixed frames.
pub fn train_privacy_classifier(
    net: &mut BudgetNet,
    frames: &[Vec<f64>],
    labels: &[Vec<bool>],
    cfg: &TrainConfig,
    lr: f64,
    epochs: usize,
) -> Result<Vec<f64>> {
    let (c, h, w) = (cfg.gen.channels, cfg.gen.height, cfg.gen.width);
    let k = cfg.gen.k_privacy;
    let mut opt = Optimizer::new(cfg.optimizer, &net.params);
    let mut curve: Vec<f64> = Vec::with_capacity(epochs);
    let mut current_lr = lr;
    for epoch in 0..epochs {
        current_lr =
            schedule_lr(cfg.probe_lr_schedule, lr, epoch, epochs, &curve, current_lr);
        let mut order: Vec<usize> = (0..frames.len()).collect();
        rng::shuffle(
            &mut rng::stream_rng(
                cfg.seed,
                rng::stream::SHUFFLE_PROBE,
                (2u64 << 32) | epoch as u64,
            ),
            &mut order,
        );
        let mut total = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_privacy) {
            let mut data = Vec::with_capacity(batch.len() * c * h * w);
            let mut targets = Vec::with_capacity(batch.len() * k);
            for &i in batch {
                data.extend_from_slice(&frames[i]);
                targets.extend(labels[i].iter().map(|&b| b as u8 as f64));
            }
            let tape = Tape::new();
            let x = tape.constant(data, &[batch.len(), c, h, w])?;
            let y = tape.constant(targets, &[batch.len(), k])?;
            let bound = net.bind(&tape, true)?;
            let logits = bound.forward(&x)?;
            let loss = losses::bce_with_logits(&logits, &y)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "privacy probe training diverged at epoch {epoch}"
                )));
            }
            tape.backward(&loss)?;
            let grads = net.params.grads(bound.tensors());
            opt.step(&mut net.params, &grads, current_lr)?;
            total += value;
            steps += 1;
        }
        curve.push(total / steps.max(1) as f64);
    }
    Ok(curve)
}

/// Per-attribute AP, cMAP and macro-F1 of a privacy probe on fixed frames.
pub fn eval_privacy(
    net: &BudgetNet,
    frames: &[Vec<f64>],
    labels: &[Vec<bool>],
    cfg: &TrainConfig,
) -> Result<PrivacyEval> {
    let (c, h, w) = (cfg.gen.channels, cfg.gen.height, cfg.gen.width);
    let k = cfg.gen.k_privacy;
    let mut scores = vec![Vec::with_capacity(frames.len()); k];
    for chunk_start in (0..frames.len()).step_by(128) {
        let chunk = &frames[chunk_start..(chunk_start + 128).min(frames.len())];
        let mut data = Vec::new();
        for f in chunk {
            data.extend_from_slice(f);
        }
        let tape = Tape::new();
        let x = tape.constant(data, &[chunk.len(), c, h, w])?;
        let probs = net.bind(&tape, false)?.forward(&x)?.sigmoid().data();
        for r in 0..chunk.len() {
            for attr in 0..k {
                scores[attr].push(probs[r * k + attr]);
            }
        }
    }
    let out = metrics::cmap(&scores, labels)?;
    let f1 = metrics::macro_f1(&scores, labels, 0.5)?;
    Ok(PrivacyEval {
        per_attribute_ap: out.per_attribute,
        cmap: out.cmap,
        f1,
        excluded: out.excluded,
    })
}

pub struct PrivacyProbeOutcome {
    pub net: BudgetNet,
    /// Evaluation on the anonymized eval set (or raw when `anon` is None).
    pub eval: PrivacyEval,
    pub losses: Vec<f64>,
}

/// Trains a fresh privacy probe. With `raw_pretrained` the probe is trained
/// on raw frames and only evaluated on the anonymizer's output.
pub fn train_privacy_probe(
    anon: Option<&Anonymizer>,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    raw_pretrained: bool,
) -> Result<PrivacyProbeOutcome> {
    let train_frames = if raw_pretrained {
        split.train.iter().map(|c| c.frames.clone()).collect::<Vec<_>>()
    } else {
        anonymized_frames(anon, &split.train, cfg)?
    };
    let eval_frames = anonymized_frames(anon, &split.eval, cfg)?;
    let train_labels: Vec<Vec<bool>> = split.train.iter().map(|c| c.y_b.clone()).collect();
    let eval_labels: Vec<Vec<bool>> = split.eval.iter().map(|c| c.y_b.clone()).collect();

    let mut net = build_privacy_probe(cfg);
    let losses = train_privacy_classifier(
        &mut net,
        &train_frames,
        &train_labels,
        cfg,
        cfg.lr_budget,
        cfg.epochs_privacy,
    )?;
    let eval = eval_privacy(&net, &eval_frames, &eval_labels, cfg)?;
    Ok(PrivacyProbeOutcome { net, eval, losses })
}

#[cfg(test)]
mod tests;
