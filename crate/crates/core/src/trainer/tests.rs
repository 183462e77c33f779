use super::*;
use crate::config::TrainConfig;
use crate::synthdata::make_splits;
use crate::tensor::Tape;

/// Small config for mechanics tests: shapes shrink, dynamics stay.
fn mini_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.gen.height = 8;
    cfg.gen.width = 8;
    cfg.gen.frames = 4;
    cfg.gen.train_clips = 32;
    cfg.gen.eval_clips = 16;
    cfg.gen.train_privacy = 32;
    cfg.gen.eval_privacy = 16;
    cfg.width_anonymizer = 4;
    cfg.width_utility = 4;
    cfg.width_budget = 4;
    cfg.proj_dim = 8;
    cfg.proj_hidden = 16;
    cfg.budget_feat = 16;
    cfg.batch_action = 8;
    cfg.batch_privacy = 8;
    cfg.skip = 2;
    cfg.epochs_utility_init = 2;
    cfg
}

/// Mid-size config used by the convergence-flavored tests.
fn probe_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.gen.train_clips = 128;
    cfg.gen.eval_clips = 64;
    cfg.gen.train_privacy = 128;
    cfg.gen.eval_privacy = 64;
    cfg.width_utility = 4;
    cfg.width_budget = 4;
    cfg.lr_utility = 0.1;
    cfg.lr_budget = 0.2;
    cfg.epochs_action = 50;
    cfg.epochs_privacy = 50;
    cfg
}

fn frame_refs(clips: &[crate::synthdata::Clip]) -> Vec<&[f64]> {
    clips.iter().map(|c| c.frame(0)).collect()
}

#[test]
fn pretrain_zero_epochs_leaves_params_untouched() {
    let cfg = mini_cfg();
    let splits = make_splits(&cfg.gen, cfg.seed).unwrap();
    let mut anon = build_anonymizer(&cfg);
    let before = anon.params.digest();
    let curve =
        pretrain_anonymizer(&mut anon, &frame_refs(&splits.action.train), &cfg, 0).unwrap();
    assert!(curve.is_empty());
    assert_eq!(anon.params.digest(), before);
}

#[test]
fn pretrain_reduces_reconstruction_error_monotonically() {
    let cfg = mini_cfg();
    let splits = make_splits(&cfg.gen, cfg.seed).unwrap();
    let mut anon = build_anonymizer(&cfg);
    let frames = frame_refs(&splits.action.train);
    let before = mean_abs_error(&anon, &frames, &cfg).unwrap();
    let curve = pretrain_anonymizer(&mut anon, &frames, &cfg, 12).unwrap();
    let after = mean_abs_error(&anon, &frames, &cfg).unwrap();
    assert!(after < before, "MAE {before} -> {after}");
    for pair in curve.windows(2) {
        assert!(pair[1] <= pair[0] * 1.05, "loss bounced: {:?}", pair);
    }
}

#[test]
fn step1_freezes_branches_and_step2_freezes_anonymizer() {
    let cfg = mini_cfg();
    let splits = make_splits(&cfg.gen, cfg.seed).unwrap();
    let mut anon = build_anonymizer(&cfg);
    let frames = frame_refs(&splits.action.train);
    pretrain_anonymizer(&mut anon, &frames, &cfg, 3).unwrap();
    let utility = init_utility(&cfg, &splits).unwrap();
    let mut state = MinimaxState::new(&cfg, anon, utility);

    let ab = gather_action_batch(&splits.action.train, &[0, 1, 2, 3]);
    let mut rng = rng::stream_rng(cfg.seed, rng::stream::AUGMENT, 0);
    let pb = gather_privacy_batch(&splits.privacy.train, &[0, 1, 2, 3], cfg.skip, &mut rng).unwrap();

    let t_before = state.utility.params.digest();
    let b_before = state.budget.params.digest();
    let a_before = state.anonymizer.params.digest();
    state.step1(&ab, &pb, &cfg).unwrap();
    assert_eq!(state.utility.params.digest(), t_before);
    assert_eq!(state.budget.params.digest(), b_before);
    assert_ne!(state.anonymizer.params.digest(), a_before, "step-1 must move the anonymizer");

    let a_mid = state.anonymizer.params.digest();
    state.step2(&ab, &pb, &cfg).unwrap();
    assert_eq!(state.anonymizer.params.digest(), a_mid);
    assert_ne!(state.utility.params.digest(), t_before);
    assert_ne!(state.budget.params.digest(), b_before);
    assert_eq!(state.isolation_checks_run, 2);
}

#[test]
fn inactive_limiter_contributes_no_gradient() {
    // With b = 1.0 and a near-identity anonymizer on [0,1] inputs the hinge
    // is inactive: l_penalty == 0 and the lambda term changes nothing.
    let mut cfg = mini_cfg();
    cfg.b = 1.0;
    let splits = make_splits(&cfg.gen, cfg.seed).unwrap();
    let mut anon = build_anonymizer(&cfg);
    pretrain_anonymizer(&mut anon, &frame_refs(&splits.action.train), &cfg, 3).unwrap();
    let utility = init_utility(&cfg, &splits).unwrap();
    let budget = build_budget(&cfg);

    let ab = gather_action_batch(&splits.action.train, &[0, 1, 2, 3]);
    let mut rng = rng::stream_rng(cfg.seed, rng::stream::AUGMENT, 1);
    let pb = gather_privacy_batch(&splits.privacy.train, &[0, 1, 2, 3], cfg.skip, &mut rng).unwrap();

    let grads_at = |lambda: f64| {
        let mut c = cfg.clone();
        c.lambda_penalty = lambda;
        let g = build_step1_graph(&anon, &utility, &budget, &ab, &pb, &c, true).unwrap();
        assert_eq!(g.l_penalty.item(), 0.0);
        g.tape.backward(&g.l_a).unwrap();
        anon.params
            .grads(&g.anon_tensors)
            .concat()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(grads_at(1.0), grads_at(0.0));
}

#[test]
fn budget_term_update_has_reversed_sign() {
    // The anonymizer step on -min(l_b, mu) must be the exact negation of a
    // descent step on min(l_b, mu).
    let mut cfg = mini_cfg();
    cfg.mu = 10.0; // keep the cap inactive so gradients are non-trivial
    cfg.lambda_penalty = 0.0;
    let splits = make_splits(&cfg.gen, cfg.seed).unwrap();
    let mut anon = build_anonymizer(&cfg);
    pretrain_anonymizer(&mut anon, &frame_refs(&splits.action.train), &cfg, 2).unwrap();
    let utility = init_utility(&cfg, &splits).unwrap();
    let budget = build_budget(&cfg);

    let ab = gather_action_batch(&splits.action.train, &[0, 1, 2, 3]);
    let mut rng = rng::stream_rng(cfg.seed, rng::stream::AUGMENT, 2);
    let pb = gather_privacy_batch(&splits.privacy.train, &[0, 1, 2, 3], cfg.skip, &mut rng).unwrap();

    // l_a with the utility term detached and lambda = 0 is exactly -min(l_b, mu)
    let g1 = build_step1_graph(&anon, &utility, &budget, &ab, &pb, &cfg, false).unwrap();
    g1.tape.backward(&g1.l_a).unwrap();
    let ascent = anon.params.grads(&g1.anon_tensors).concat();

    let g2 = build_step1_graph(&anon, &utility, &budget, &ab, &pb, &cfg, false).unwrap();
    let capped = g2.l_b.min_scalar(cfg.mu);
    g2.tape.backward(&capped).unwrap();
    let descent = anon.params.grads(&g2.anon_tensors).concat();

    assert!(ascent.iter().any(|&v| v != 0.0), "budget gradient must be non-trivial");
    for (a, d) in ascent.iter().zip(&descent) {
        // +0.0 normalization: negating an exact zero flips only the sign bit
        assert_eq!((a + 0.0).to_bits(), (-d + 0.0).to_bits());
    }
}

#[test]
fn budget_ascent_does_not_decrease_l_b_in_most_steps() {
    let mut cfg = mini_cfg();
    cfg.lambda_penalty = 0.0;
    cfg.lr_budget = 0.02;
    let splits = make_splits(&cfg.gen, cfg.seed).unwrap();
    let mut anon = build_anonymizer(&cfg);
    pretrain_anonymizer(&mut anon, &frame_refs(&splits.action.train), &cfg, 3).unwrap();
    let utility = init_utility(&cfg, &splits).unwrap();
    let mut state = MinimaxState::new(&cfg, anon, utility);

    let ab = gather_action_batch(&splits.action.train, &[0, 1, 2, 3]);
    let mut rng = rng::stream_rng(cfg.seed, rng::stream::AUGMENT, 3);
    let indices: Vec<usize> = (0..8).collect();
    let pb = gather_privacy_batch(&splits.privacy.train, &indices, cfg.skip, &mut rng).unwrap();

    // Warm the budget branch on the fixed batch until it is a competent
    // adversary (l_b under the margin), then ascend.
    for _ in 0..200 {
        state.step2(&ab, &pb, &cfg).unwrap();
        let g = build_step1_graph(&state.anonymizer, &state.utility, &state.budget, &ab, &pb, &cfg, false)
            .unwrap();
        if g.l_b.item() < cfg.mu * 0.9 {
            break;
        }
    }

    let eval_l_b = |state: &MinimaxState| {
        build_step1_graph(&state.anonymizer, &state.utility, &state.budget, &ab, &pb, &cfg, false)
            .unwrap()
            .l_b
            .item()
    };
    let mut non_decreasing = 0;
    let steps = 200;
    for _ in 0..steps {
        let before = eval_l_b(&state);
        state.step1_with_opts(&ab, &pb, &cfg, false).unwrap();
        let after = eval_l_b(&state);
        if after >= before - 1e-12 {
            non_decreasing += 1;
        }
    }
    assert!(
        non_decreasing as f64 / steps as f64 >= 0.8,
        "budget ascent failed: {non_decreasing}/{steps}"
    );
}

#[test]
fn repeated_step2_is_stable_on_fixed_data() {
    let cfg = mini_cfg();
    let splits = make_splits(&cfg.gen, cfg.seed).unwrap();
    let mut anon = build_anonymizer(&cfg);
    pretrain_anonymizer(&mut anon, &frame_refs(&splits.action.train), &cfg, 3).unwrap();
    let utility = init_utility(&cfg, &splits).unwrap();
    let mut state = MinimaxState::new(&cfg, anon, utility);

    let ab = gather_action_batch(&splits.action.train, &(0..8).collect::<Vec<_>>());
    let mut rng = rng::stream_rng(cfg.seed, rng::stream::AUGMENT, 4);
    let pb = gather_privacy_batch(&splits.privacy.train, &(0..8).collect::<Vec<_>>(), cfg.skip, &mut rng)
        .unwrap();

    let mut curve = Vec::new();
    for _ in 0..30 {
        let (_, l_b) = state.step2(&ab, &pb, &cfg).unwrap();
        curve.push(l_b);
    }
    for pair in curve.windows(2) {
        assert!(pair[1] <= pair[0] * 1.05, "budget loss bounced: {:?}", pair);
    }
}

#[test]
fn zero_anon_epochs_returns_pretrained_weights() {
    let cfg = mini_cfg();
    let splits = make_splits(&cfg.gen, cfg.seed).unwrap();
    let mut anon = build_anonymizer(&cfg);
    pretrain_anonymizer(&mut anon, &frame_refs(&splits.action.train), &cfg, 2).unwrap();
    let digest = anon.params.digest();
    let utility = init_utility(&cfg, &splits).unwrap();
    let mut state = MinimaxState::new(&cfg, anon, utility);
    state.run_epochs(&cfg, &splits, 0).unwrap();
    assert_eq!(state.anonymizer.params.digest(), digest);
    assert!(state.curves.is_empty());
}

#[test]
fn training_is_deterministic_and_resumable() {
    let mut cfg = mini_cfg();
    cfg.epochs_anon = 4;
    let splits = make_splits(&cfg.gen, cfg.seed).unwrap();
    let mut anon = build_anonymizer(&cfg);
    pretrain_anonymizer(&mut anon, &frame_refs(&splits.action.train), &cfg, 2).unwrap();
    let utility = init_utility(&cfg, &splits).unwrap();

    let run_full = || {
        let mut state = MinimaxState::new(&cfg, anon.clone(), utility.clone());
        state.run_epochs(&cfg, &splits, 4).unwrap();
        state
    };
    let a = run_full();
    let b = run_full();
    assert_eq!(a.anonymizer.params.digest(), b.anonymizer.params.digest());
    assert_eq!(a.utility.params.digest(), b.utility.params.digest());
    assert_eq!(a.budget.params.digest(), b.budget.params.digest());
    assert_eq!(
        serde_json::to_string(&a.curves).unwrap(),
        serde_json::to_string(&b.curves).unwrap()
    );

    // save at epoch 2, reload, continue: identical to the uninterrupted run
    let mut partial = MinimaxState::new(&cfg, anon.clone(), utility.clone());
    partial.run_epochs(&cfg, &splits, 2).unwrap();
    let (meta, arrays) = partial.to_arrays(&cfg);
    let mut resumed = MinimaxState::from_arrays(&cfg, &meta, &arrays).unwrap();
    assert_eq!(resumed.epoch, 2);
    resumed.run_epochs(&cfg, &splits, 4).unwrap();
    assert_eq!(resumed.anonymizer.params.digest(), a.anonymizer.params.digest());
    assert_eq!(resumed.utility.params.digest(), a.utility.params.digest());
    assert_eq!(resumed.budget.params.digest(), b.budget.params.digest());
    assert_eq!(
        serde_json::to_string(&resumed.curves).unwrap(),
        serde_json::to_string(&a.curves).unwrap()
    );
}

#[test]
fn checkpoint_rejects_mismatched_config() {
    let cfg = mini_cfg();
    let splits = make_splits(&cfg.gen, cfg.seed).unwrap();
    let anon = build_anonymizer(&cfg);
    let utility = init_utility(&cfg, &splits).unwrap();
    let state = MinimaxState::new(&cfg, anon, utility);
    let (meta, arrays) = state.to_arrays(&cfg);
    let mut other = cfg.clone();
    other.width_anonymizer = 2;
    assert!(MinimaxState::from_arrays(&other, &meta, &arrays).is_err());
}

#[test]
fn raw_action_probe_hits_calibration_bar() {
    let cfg = probe_cfg();
    let splits = make_splits(&cfg.gen, cfg.seed).unwrap();
    let out = train_action_probe(None, UtilityArch::Conv, &splits.action, &cfg).unwrap();
    assert!(out.top1 >= 0.95, "raw-data probe top1 {}", out.top1);
}

#[test]
fn raw_linear_probes_decode_both_label_sets() {
    // Decodability gate: linear models on raw frames must read out both the
    // action class and every attribute bit.
    let cfg = probe_cfg();
    let splits = make_splits(&cfg.gen, cfg.seed).unwrap();
    let out = train_action_probe(None, UtilityArch::Linear, &splits.action, &cfg).unwrap();
    assert!(out.top1 >= 0.9, "linear action probe top1 {}", out.top1);

    // linear multi-label readout per attribute, trained directly
    let (c, h, w) = (cfg.gen.channels, cfg.gen.height, cfg.gen.width);
    let d = c * h * w;
    let k = cfg.gen.k_privacy;
    let mut weights = vec![0.0; d * k];
    let mut bias = vec![0.0; k];
    for epoch in 0..40 {
        let mut order: Vec<usize> = (0..splits.privacy.train.len()).collect();
        rng::shuffle(&mut rng::stream_rng(cfg.seed, 0x999, epoch), &mut order);
        for batch in order.chunks(16) {
            let tape = Tape::new();
            let mut data = Vec::new();
            let mut targets = Vec::new();
            for &i in batch {
                data.extend_from_slice(splits.privacy.train[i].frame(0));
                targets.extend(splits.privacy.train[i].y_b.iter().map(|&b| b as u8 as f64));
            }
            let x = tape.constant(data, &[batch.len(), d]).unwrap();
            let y = tape.constant(targets, &[batch.len(), k]).unwrap();
            let wt = tape.leaf(weights.clone(), &[d, k]).unwrap();
            let bt = tape.leaf(bias.clone(), &[k]).unwrap();
            let logits = x.matmul(&wt).unwrap().bias_add_row(&bt).unwrap();
            let loss = losses::bce_with_logits(&logits, &y).unwrap();
            tape.backward(&loss).unwrap();
            for (wv, g) in weights.iter_mut().zip(wt.grad().unwrap()) {
                *wv -= 0.1 * g;
            }
            for (bv, g) in bias.iter_mut().zip(bt.grad().unwrap()) {
                *bv -= 0.1 * g;
            }
        }
    }
    let mut scores = vec![Vec::new(); k];
    let mut labels = Vec::new();
    for clip in &splits.privacy.eval {
        for attr in 0..k {
            let dot: f64 =
                clip.frame(0).iter().enumerate().map(|(i, &v)| v * weights[i * k + attr]).sum();
            scores[attr].push(dot + bias[attr]);
        }
        labels.push(clip.y_b.clone());
    }
    let out = crate::metrics::cmap(&scores, &labels).unwrap();
    for (attr, &ap) in out.per_attribute.iter().enumerate() {
        assert!(ap >= 0.9, "attribute {attr} AP {ap}");
    }
}

#[test]
fn raw_privacy_probe_hits_calibration_bar() {
    let cfg = probe_cfg();
    let splits = make_splits(&cfg.gen, cfg.seed).unwrap();
    let out = train_privacy_probe(None, &splits.privacy, &cfg, false).unwrap();
    assert!(out.eval.cmap >= 0.9, "raw-data privacy probe cMAP {}", out.eval.cmap);
    assert!(out.eval.excluded.is_empty());
}

#[test]
#[ignore]
fn calibrate_probe_hyperparams() {
    let mut base = TrainConfig::default();
    base.gen.train_clips = 128;
    base.gen.eval_clips = 64;
    base.gen.train_privacy = 128;
    base.gen.eval_privacy = 64;
    base.width_utility = 4;
    base.width_budget = 4;
    let splits = make_splits(&base.gen, base.seed).unwrap();
    for lr in [0.02, 0.05, 0.1, 0.2] {
        for epochs in [25usize, 50] {
            let mut cfg = base.clone();
            cfg.lr_utility = lr;
            cfg.epochs_action = epochs;
            let t0 = std::time::Instant::now();
            let out = train_action_probe(None, UtilityArch::Conv, &splits.action, &cfg).unwrap();
            println!(
                "action lr={lr} epochs={epochs} top1={:.3} loss_first={:.3} loss_last={:.4} secs={:.1}",
                out.top1, out.losses[0], out.losses.last().unwrap(), t0.elapsed().as_secs_f64()
            );
        }
    }
    for lr in [0.02, 0.05, 0.1, 0.2] {
        for epochs in [25usize, 50] {
            let mut cfg = base.clone();
            cfg.lr_budget = lr;
            cfg.epochs_privacy = epochs;
            let t0 = std::time::Instant::now();
            let out = train_privacy_probe(None, &splits.privacy, &cfg, false).unwrap();
            println!(
                "privacy lr={lr} epochs={epochs} cmap={:.3} f1={:.3} loss_last={:.4} secs={:.1}",
                out.eval.cmap, out.eval.f1, out.losses.last().unwrap(), t0.elapsed().as_secs_f64()
            );
        }
    }
}
