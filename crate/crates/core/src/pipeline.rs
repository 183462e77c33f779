//! End-to-end orchestration: dataset preparation, identity pretraining,
//! anonymization training, probe retraining and metric reports. The sweep
//! harness and the CLI are thin layers over these functions.
//!
//! Pretraining and the utility-branch initialization do not depend on
//! (B, lambda), so one prepared bundle is shared across sweep cells; the
//! result is bit-identical to recomputing them per cell.

use crate::config::TrainConfig;
use crate::error::Result;
use crate::metrics::{MetricsReport, Protocol};
use crate::nets::{Anonymizer, UtilityNet};
use crate::rng;
use crate::synthdata::{make_splits, Splits};
use crate::trainer::{
    self, init_utility, mean_abs_error, pretrain_anonymizer, EpochLog, MinimaxState,
};

/// Everything the (B, lambda)-dependent part of the pipeline consumes.
pub struct Prepared {
    pub splits: Splits,
    pub pretrained: Anonymizer,
    pub pretrain_curve: Vec<f64>,
    pub holdout_mae: f64,
    pub utility_init: UtilityNet,
}

pub fn prepare(cfg: &TrainConfig) -> Result<Prepared> {
    let splits = make_splits(&cfg.gen, cfg.seed)?;
    let (pretrained, pretrain_curve, holdout_mae) = pretrain(cfg, &splits)?;
    let utility_init = init_utility(cfg, &splits)?;
    Ok(Prepared { splits, pretrained, pretrain_curve, holdout_mae, utility_init })
}

/// Identity pretraining on two frames of each training clip (the first and
/// the middle one), with the held-out mean absolute error measured on
/// eval-clip frames.
pub fn pretrain(
    cfg: &TrainConfig,
    splits: &Splits,
) -> Result<(Anonymizer, Vec<f64>, f64)> {
    let mut anon = trainer::build_anonymizer(cfg);
    let mid = cfg.gen.frames / 2;
    let mut train_frames: Vec<&[f64]> = Vec::new();
    for c in &splits.action.train {
        train_frames.push(c.frame(0));
        if mid > 0 {
            train_frames.push(c.frame(mid));
        }
    }
    let curve = pretrain_anonymizer(&mut anon, &train_frames, cfg, cfg.epochs_pretrain)?;
    let eval_frames: Vec<&[f64]> = splits.action.eval.iter().map(|c| c.frame(0)).collect();
    let holdout_mae = mean_abs_error(&anon, &eval_frames, cfg)?;
    Ok((anon, curve, holdout_mae))
}

/// Full anonymization training from a prepared bundle, honoring cfg's B and
/// lambda.
pub fn train_anonymization(cfg: &TrainConfig, prepared: &Prepared) -> Result<MinimaxState> {
    let mut state =
        MinimaxState::new(cfg, prepared.pretrained.clone(), prepared.utility_init.clone());
    state.run_epochs(cfg, &prepared.splits, cfg.epochs_anon)?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Action,
    Privacy,
    PrivacyRawPretrained,
}

impl std::str::FromStr for ProbeKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "action" => Ok(ProbeKind::Action),
            "privacy" => Ok(ProbeKind::Privacy),
            "privacy-raw-pretrained" => Ok(ProbeKind::PrivacyRawPretrained),
            _ => Err(crate::Error::Config(format!("unknown probe kind: {s}"))),
        }
    }
}

/// Trains the requested fresh probe against a frozen anonymizer (`None` is
/// the exact identity bypass) and reports metrics. With `novel_eval` the
/// probe is evaluated on a freshly generated split instead of the standard
/// eval split.
pub fn run_probe(
    cfg: &TrainConfig,
    anon: Option<&Anonymizer>,
    kind: ProbeKind,
    novel_eval: bool,
    splits: &Splits,
) -> Result<MetricsReport> {
    let protocol = if novel_eval {
        Protocol::NovelData
    } else if kind == ProbeKind::PrivacyRawPretrained {
        Protocol::RawPretrainedProbe
    } else {
        Protocol::KnownData
    };
    let novel = if novel_eval {
        Some(make_splits(&cfg.gen, rng::derive(cfg.seed, rng::stream::NOVEL_EVAL, 0))?)
    } else {
        None
    };

    match kind {
        ProbeKind::Action => {
            let out =
                trainer::train_action_probe(anon, cfg.probe_arch, &splits.action, cfg)?;
            let (eval_clips, labels): (Vec<_>, Vec<usize>) = match &novel {
                Some(n) => (
                    n.action.eval.clone(),
                    n.action.eval.iter().map(|c| c.y_t).collect(),
                ),
                None => (
                    splits.action.eval.clone(),
                    splits.action.eval.iter().map(|c| c.y_t).collect(),
                ),
            };
            let frames = trainer::anonymized_frames(anon, &eval_clips, cfg)?;
            let top1 = trainer::eval_action(&out.net, &frames, &labels, cfg)?;
            Ok(MetricsReport {
                protocol,
                top1: Some(top1),
                per_attribute_ap: Vec::new(),
                cmap: None,
                f1: None,
                n_eval: labels.len(),
                config_digest: cfg.digest(),
                excluded_attributes: Vec::new(),
            })
        }
        ProbeKind::Privacy | ProbeKind::PrivacyRawPretrained => {
            let raw = kind == ProbeKind::PrivacyRawPretrained;
            let out = trainer::train_privacy_probe(anon, &splits.privacy, cfg, raw)?;
            let (eval, n_eval) = match &novel {
                Some(n) => {
                    let frames = trainer::anonymized_frames(anon, &n.privacy.eval, cfg)?;
                    let labels: Vec<Vec<bool>> =
                        n.privacy.eval.iter().map(|c| c.y_b.clone()).collect();
                    (trainer::eval_privacy(&out.net, &frames, &labels, cfg)?, labels.len())
                }
                None => {
                    let n = splits.privacy.eval.len();
                    (out.eval, n)
                }
            };
            Ok(MetricsReport {
                protocol,
                top1: None,
                per_attribute_ap: eval.per_attribute_ap,
                cmap: Some(eval.cmap),
                f1: Some(eval.f1),
                n_eval,
                config_digest: cfg.digest(),
                excluded_attributes: eval.excluded,
            })
        }
    }
}

/// Writes an anonymizer-only checkpoint (the pretraining artifact).
pub fn save_anonymizer_checkpoint(
    path: &std::path::Path,
    anon: &Anonymizer,
    cfg: &TrainConfig,
    extra_meta: serde_json::Value,
) -> Result<()> {
    let arrays: Vec<crate::checkpoint::NamedArray> = anon
        .params
        .entries
        .iter()
        .map(|p| crate::checkpoint::NamedArray {
            name: format!("anonymizer/{}", p.name),
            shape: p.shape.clone(),
            data: p.data.clone(),
        })
        .collect();
    let meta = serde_json::json!({
        "kind": "anonymizer",
        "config_digest": cfg.digest(),
        "extra": extra_meta,
    });
    crate::checkpoint::save(path, &meta, &arrays)
}

/// Loads the anonymizer parameters out of either an anonymizer-only or a
/// full training-state checkpoint. Shapes must match the configured
/// architecture.
pub fn load_anonymizer_checkpoint(
    path: &std::path::Path,
    cfg: &TrainConfig,
) -> Result<Anonymizer> {
    let (_, arrays) = crate::checkpoint::load(path).map_err(|e| match e {
        crate::Error::Io(io) => crate::Error::Config(format!(
            "cannot read checkpoint {}: {io}",
            path.display()
        )),
        other => other,
    })?;
    let mut anon = trainer::build_anonymizer(cfg);
    for p in anon.params.entries.iter_mut() {
        let name = format!("anonymizer/{}", p.name);
        let a = arrays.iter().find(|a| a.name == name).ok_or_else(|| {
            crate::Error::Config(format!("checkpoint lacks array {name}"))
        })?;
        if a.shape != p.shape {
            return Err(crate::Error::Config(format!(
                "checkpoint incompatible with configured widths: {name} has shape {:?}, expected {:?}",
                a.shape, p.shape
            )));
        }
        p.data = a.data.clone();
    }
    Ok(anon)
}

/// Raw-data reference points: probes trained and evaluated with the identity
/// bypass, plus the raw-trained privacy probe reused by the raw-pretrained
/// protocol.
pub struct RawBaselines {
    pub top1: f64,
    pub privacy: trainer::PrivacyEval,
    pub raw_privacy_probe: crate::nets::BudgetNet,
}

pub fn raw_baselines(cfg: &TrainConfig, splits: &Splits) -> Result<RawBaselines> {
    let action = trainer::train_action_probe(None, cfg.probe_arch, &splits.action, cfg)?;
    let privacy = trainer::train_privacy_probe(None, &splits.privacy, cfg, false)?;
    Ok(RawBaselines { top1: action.top1, privacy: privacy.eval, raw_privacy_probe: privacy.net })
}

/// One full pipeline cell at the given (B, lambda): anonymization training
/// from shared pretrained weights, then both fresh probes.
pub struct CellOutcome {
    pub b: f64,
    pub lambda: f64,
    pub top1: f64,
    pub privacy: trainer::PrivacyEval,
    pub curves: Vec<EpochLog>,
    pub l_penalty_final: f64,
    pub state: MinimaxState,
    pub wall_seconds: f64,
}

pub fn run_cell(
    base: &TrainConfig,
    b: f64,
    lambda: f64,
    prepared: &Prepared,
) -> Result<CellOutcome> {
    let started = std::time::Instant::now();
    let mut cfg = base.clone();
    cfg.b = b;
    cfg.lambda_penalty = lambda;
    cfg.validate()?;
    let state = train_anonymization(&cfg, prepared)?;
    let action =
        trainer::train_action_probe(Some(&state.anonymizer), cfg.probe_arch, &prepared.splits.action, &cfg)?;
    let privacy =
        trainer::train_privacy_probe(Some(&state.anonymizer), &prepared.splits.privacy, &cfg, false)?;
    let l_penalty_final = state.curves.last().map(|c| c.l_penalty).unwrap_or(0.0);
    Ok(CellOutcome {
        b,
        lambda,
        top1: action.top1,
        privacy: privacy.eval,
        curves: state.curves.clone(),
        l_penalty_final,
        state,
        wall_seconds: if cfg.deterministic_timing {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        },
    })
}
