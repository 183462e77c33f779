use super::*;
use crate::checkpoint::{self, NamedArray};
use crate::losses;
use crate::rng::{stream_rng, uniform};
use crate::synthdata::{make_still, GenConfig};

fn random_frames(seed: u64, n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, 0x7465, 0);
    (0..n * c * h * w).map(|_| uniform(&mut rng)).collect()
}

#[test]
fn anonymizer_preserves_shape_and_range_across_widths() {
    for width in [2, 4, 8] {
        for (h, w) in [(8, 8), (16, 16), (8, 16), (12, 20)] {
            let cfg = AnonymizerCfg { width, ..Default::default() };
            let net = Anonymizer::init(cfg, 5);
            let tape = Tape::new();
            let x = tape.constant(random_frames(width as u64, 2, 3, h, w), &[2, 3, h, w]).unwrap();
            let y = net.bind(&tape, false).unwrap().forward(&x).unwrap();
            assert_eq!(y.shape(), vec![2, 3, h, w]);
            assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn anonymizer_with_skip_connections_keeps_contract() {
    let cfg = AnonymizerCfg { skip: true, ..Default::default() };
    let net = Anonymizer::init(cfg, 6);
    let tape = Tape::new();
    let x = tape.constant(random_frames(1, 2, 3, 16, 16), &[2, 3, 16, 16]).unwrap();
    let y = net.bind(&tape, false).unwrap().forward(&x).unwrap();
    assert_eq!(y.shape(), vec![2, 3, 16, 16]);
}

#[test]
fn anonymizer_rejects_indivisible_spatial_size() {
    let net = Anonymizer::init(AnonymizerCfg::default(), 5);
    let tape = Tape::new();
    let x = tape.constant(random_frames(2, 1, 3, 10, 16), &[1, 3, 10, 16]).unwrap();
    assert!(net.bind(&tape, false).unwrap().forward(&x).is_err());
}

#[test]
fn anonymizer_is_deterministic_on_identical_inputs() {
    let net = Anonymizer::init(AnonymizerCfg::default(), 9);
    let frame = random_frames(3, 1, 3, 16, 16);
    let mut doubled = frame.clone();
    doubled.extend_from_slice(&frame);
    let out = net.apply(&doubled, &[2, 3, 16, 16]).unwrap();
    let (a, b) = out.split_at(out.len() / 2);
    assert_eq!(a, b);
}

#[test]
fn utility_zero_head_gives_zero_logits() {
    let cfg = UtilityCfg {
        in_ch: 3,
        width: 4,
        classes: 4,
        frame_h: 16,
        frame_w: 16,
        arch: UtilityArch::Conv,
    };
    let mut net = UtilityNet::init(cfg, 7, crate::rng::stream::INIT_UTILITY);
    for p in net.params.entries.iter_mut().filter(|p| p.name.starts_with("head")) {
        p.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let tape = Tape::new();
    let x = tape.constant(random_frames(4, 8, 3, 16, 16), &[8, 3, 16, 16]).unwrap();
    let logits = net.bind(&tape, false).unwrap().forward(&x, 2, 4).unwrap();
    assert_eq!(logits.shape(), vec![2, 4]);
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn utility_temporal_mean_ignores_frame_duplication() {
    for arch in [UtilityArch::Conv, UtilityArch::Linear] {
        let cfg = UtilityCfg {
            in_ch: 3,
            width: 4,
            classes: 4,
            frame_h: 16,
            frame_w: 16,
            arch,
        };
        let net = UtilityNet::init(cfg, 11, crate::rng::stream::INIT_UTILITY);
        let frame = random_frames(5, 1, 3, 16, 16);
        let tape = Tape::new();
        let one = tape.constant(frame.clone(), &[1, 3, 16, 16]).unwrap();
        let mut four = frame.clone();
        for _ in 0..3 {
            four.extend_from_slice(&frame);
        }
        let four = tape.constant(four, &[4, 3, 16, 16]).unwrap();
        let bound = net.bind(&tape, false).unwrap();
        let l1 = bound.forward(&one, 1, 1).unwrap().data();
        let l4 = bound.forward(&four, 1, 4).unwrap().data();
        for (a, b) in l1.iter().zip(&l4) {
            assert!((a - b).abs() < 1e-12, "{arch:?}: {a} vs {b}");
        }
    }
}

#[test]
fn utility_rejects_empty_clip() {
    let cfg = UtilityCfg {
        in_ch: 3,
        width: 4,
        classes: 4,
        frame_h: 16,
        frame_w: 16,
        arch: UtilityArch::Conv,
    };
    let net = UtilityNet::init(cfg, 7, crate::rng::stream::INIT_UTILITY);
    let tape = Tape::new();
    let x = tape.constant(random_frames(4, 1, 3, 16, 16), &[1, 3, 16, 16]).unwrap();
    assert!(net.bind(&tape, false).unwrap().forward(&x, 1, 0).is_err());
}

#[test]
fn budget_projection_has_configured_dim_and_is_deterministic() {
    let cfg = BudgetCfg {
        in_ch: 3,
        width: 4,
        frame_h: 16,
        frame_w: 16,
        feat: 32,
        head: BudgetHead::Projection { dim: 16, hidden: 32 },
    };
    let net = BudgetNet::init(cfg, 13, crate::rng::stream::INIT_BUDGET);
    let frame = random_frames(6, 1, 3, 16, 16);
    let mut two = frame.clone();
    two.extend_from_slice(&frame);
    let tape = Tape::new();
    let x = tape.constant(two, &[2, 3, 16, 16]).unwrap();
    let z = net.bind(&tape, false).unwrap().forward(&x).unwrap();
    assert_eq!(z.shape(), vec![2, 16]);
    let d = z.data();
    assert_eq!(d[..16], d[16..]);
    assert!(d.iter().all(|v| v.is_finite()));
}

#[test]
fn every_parameter_receives_gradient() {
    // anonymizer
    let anon = Anonymizer::init(AnonymizerCfg::default(), 17);
    let tape = Tape::new();
    let x = tape.constant(random_frames(7, 4, 3, 16, 16), &[4, 3, 16, 16]).unwrap();
    let bound = anon.bind(&tape, true).unwrap();
    let loss = bound.forward(&x).unwrap().square().mean_all().unwrap();
    tape.backward(&loss).unwrap();
    for (p, g) in anon.params.entries.iter().zip(anon.params.grads(bound.tensors())) {
        assert!(g.iter().any(|&v| v != 0.0), "dead parameter slice {}", p.name);
    }

    // utility (conv arch)
    let ucfg = UtilityCfg {
        in_ch: 3,
        width: 4,
        classes: 4,
        frame_h: 16,
        frame_w: 16,
        arch: UtilityArch::Conv,
    };
    let unet = UtilityNet::init(ucfg, 18, crate::rng::stream::INIT_UTILITY);
    let tape = Tape::new();
    let x = tape.constant(random_frames(8, 8, 3, 16, 16), &[8, 3, 16, 16]).unwrap();
    let bound = unet.bind(&tape, true).unwrap();
    let logits = bound.forward(&x, 2, 4).unwrap();
    let loss = losses::cross_entropy(&logits, &[0, 2]).unwrap();
    tape.backward(&loss).unwrap();
    for (p, g) in unet.params.entries.iter().zip(unet.params.grads(bound.tensors())) {
        assert!(g.iter().any(|&v| v != 0.0), "dead parameter slice {}", p.name);
    }

    // budget (projection head) through nt-xent
    let bcfg = BudgetCfg {
        in_ch: 3,
        width: 4,
        frame_h: 16,
        frame_w: 16,
        feat: 32,
        head: BudgetHead::Projection { dim: 8, hidden: 16 },
    };
    let bnet = BudgetNet::init(bcfg, 19, crate::rng::stream::INIT_BUDGET);
    let tape = Tape::new();
    let a = tape.constant(random_frames(9, 3, 3, 16, 16), &[3, 3, 16, 16]).unwrap();
    let b = tape.constant(random_frames(10, 3, 3, 16, 16), &[3, 3, 16, 16]).unwrap();
    let bound = bnet.bind(&tape, true).unwrap();
    let za = bound.forward(&a).unwrap();
    let zb = bound.forward(&b).unwrap();
    let loss = losses::nt_xent(&za, &zb, 0.1).unwrap();
    tape.backward(&loss).unwrap();
    for (p, g) in bnet.params.entries.iter().zip(bnet.params.grads(bound.tensors())) {
        assert!(g.iter().any(|&v| v != 0.0), "dead parameter slice {}", p.name);
    }
}

#[test]
fn privacy_only_differences_perturb_projections() {
    // Two stills sharing the action component and differing only in the
    // privacy signal should not collapse to the same projection direction.
    let gen = GenConfig::default();
    let clean = make_still(&gen, 0, &[false, false, false], 400).unwrap();
    let marked = make_still(&gen, 0, &[true, false, true], 400).unwrap();
    let mut below = 0;
    for seed in 0..100u64 {
        let cfg = BudgetCfg {
            in_ch: 3,
            width: 4,
            frame_h: 16,
            frame_w: 16,
            feat: 32,
            head: BudgetHead::Projection { dim: 16, hidden: 32 },
        };
        let net = BudgetNet::init(cfg, seed, crate::rng::stream::INIT_BUDGET);
        let tape = Tape::new();
        let mut both = clean.frames.clone();
        both.extend_from_slice(&marked.frames);
        let x = tape.constant(both, &[2, 3, 16, 16]).unwrap();
        let z = net.bind(&tape, false).unwrap().forward(&x).unwrap().data();
        let (za, zb) = z.split_at(16);
        let dot: f64 = za.iter().zip(zb).map(|(a, b)| a * b).sum();
        let na: f64 = za.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = zb.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dot / (na * nb) < 0.99 {
            below += 1;
        }
    }
    assert!(below >= 80, "only {below}/100 random inits kept cos < 0.99");
}

#[test]
fn params_round_trip_through_checkpoint_bit_exactly() {
    let net = Anonymizer::init(AnonymizerCfg::default(), 23);
    let dir = std::env::temp_dir().join(format!("nets-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("anon.ckpt");
    let arrays: Vec<NamedArray> = net
        .params
        .entries
        .iter()
        .map(|p| NamedArray { name: p.name.clone(), shape: p.shape.clone(), data: p.data.clone() })
        .collect();
    checkpoint::save(&path, &serde_json::json!({}), &arrays).unwrap();
    let (_, loaded) = checkpoint::load(&path).unwrap();
    let mut restored = net.clone();
    for (p, l) in restored.params.entries.iter_mut().zip(&loaded) {
        assert_eq!(p.name, l.name);
        p.data = l.data.clone();
    }
    assert_eq!(net.params.digest(), restored.params.digest());
    std::fs::remove_dir_all(&dir).ok();
}
