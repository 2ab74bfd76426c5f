use emgup::autodiff::{Tape, Tensor};
use emgup::data::{reverse_view, Window, WindowOrigin};
use emgup::model::{head_weight, Backbone, BackboneConfig};
use emgup::seed::stream_rng;
use emgup::ssa::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> BackboneConfig {
    let mut c = BackboneConfig::standard(3, 32, 8, 4);
    c.context_window = 4;
    c.horizons = 2;
    c
}

fn windows(c: &BackboneConfig, n: usize, seed: u64) -> Vec<Window> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let data = (0..c.channels * c.window_length)
                .map(|t| (t as f64 * 0.2 + i as f64).sin() + 0.3 * rng.gen_range(-1.0..1.0))
                .collect();
            let origin = WindowOrigin {
                record_id: "u/s".into(),
                start: i * c.window_length,
            };
            Window::new(c.channels, c.window_length, data, origin).unwrap()
        })
        .collect()
}

fn ssa_cfg(epochs: usize, lr: f64) -> SsaConfig {
    SsaConfig {
        epochs,
        lr,
        batch_size: 8,
        context_window: 4,
        seed: 3,
        ..SsaConfig::default()
    }
}

#[test]
fn views_per_mode() {
    let c = tiny_config();
    let w = &windows(&c, 1, 0)[0];
    let mut rng = stream_rng(0, "t");
    let (a, b) = build_views(w, ViewMode::Inversion, 0.25, &mut rng).unwrap();
    assert_eq!(&a, w);
    assert_eq!(b, reverse_view(w));
    let (a, b) = build_views(w, ViewMode::None, 0.25, &mut rng).unwrap();
    assert_eq!(a, b);
    let (_, b) = build_views(w, ViewMode::Mask, 0.25, &mut rng).unwrap();
    let zeroed = (0..c.window_length)
        .filter(|&t| (0..c.channels).all(|ch| b.channel(ch)[t] == 0.0))
        .count();
    assert_eq!(zeroed, 8);
}

#[test]
fn direction_with_identity_head_matches_hand_value() {
    let mut c = tiny_config();
    c.horizons = 1;
    let mut m = Backbone::init(c, 1).unwrap();
    *m.param_mut(&head_weight(1)) = Tensor::identity(8);
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, false);
    let mut e0 = vec![0.0; 8];
    e0[0] = 1.0;
    let mut e1 = vec![0.0; 8];
    e1[1] = 1.0;
    let ctx = tape.constant(Tensor::vector(e0.clone()).unwrap());
    let pos = tape.constant(Tensor::vector(e0.iter().map(|v| v * 4.0).collect()).unwrap());
    let neg = tape.constant(Tensor::vector(e1).unwrap());
    let loss = info_nce_direction(&m, &mut tape, &bound, ctx, &[pos], &[vec![neg]]).unwrap();
    let e = std::f64::consts::E;
    assert!((tape.value(loss).item().unwrap() - (-(e / (e + 1.0)).ln())).abs() < 1e-12);

    let alone = info_nce_direction(&m, &mut tape, &bound, ctx, &[pos], &[vec![]]).unwrap();
    assert_eq!(tape.value(alone).item().unwrap(), 0.0);
    assert!(info_nce_direction(&m, &mut tape, &bound, ctx, &[], &[])
        .unwrap_err()
        .is_config());
}

#[test]
fn singleton_batch_has_zero_loss() {
    let c = tiny_config();
    let m = Backbone::init(c.clone(), 2).unwrap();
    let w = windows(&c, 1, 1);
    let mut rng = stream_rng(0, "t");
    let pairs = vec![build_views(&w[0], ViewMode::Inversion, 0.0, &mut rng).unwrap()];
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, true);
    let v = encode_views(&m, &mut tape, &bound, &pairs, 4).unwrap();
    let loss = cross_view_loss(&m, &mut tape, &bound, &v, 4).unwrap();
    assert_eq!(tape.value(loss).item().unwrap(), 0.0);
}

#[test]
fn cross_view_loss_is_symmetric_under_view_swap() {
    let c = tiny_config();
    let m = Backbone::init(c.clone(), 4).unwrap();
    let ws = windows(&c, 6, 2);
    let mut rng = stream_rng(0, "t");
    let pairs: Vec<_> = ws
        .iter()
        .map(|w| build_views(w, ViewMode::Inversion, 0.0, &mut rng).unwrap())
        .collect();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, false);
    let v = encode_views(&m, &mut tape, &bound, &pairs, 4).unwrap();
    let loss = cross_view_loss(&m, &mut tape, &bound, &v, 4).unwrap();
    let swapped = ViewLatents {
        z: v.z_alt.clone(),
        z_alt: v.z.clone(),
        c: v.c_alt.clone(),
        c_alt: v.c.clone(),
    };
    let loss2 = cross_view_loss(&m, &mut tape, &bound, &swapped, 4).unwrap();
    let (a, b) = (tape.value(loss).item().unwrap(), tape.value(loss2).item().unwrap());
    assert!(a > 0.0);
    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
}

#[test]
fn short_latent_sequence_is_config_error() {
    let c = tiny_config();
    let m = Backbone::init(c.clone(), 4).unwrap();
    let ws = windows(&c, 2, 2);
    let mut cfg = ssa_cfg(1, 1e-3);
    cfg.context_window = 6;
    let err = ssa_adapt(&m, &ws, &cfg).unwrap_err();
    assert!(err.is_config());
    let msg = err.to_string();
    assert!(msg.contains("T=6") && msg.contains("K=2"), "{msg}");
    assert!(ssa_adapt(&m, &[], &ssa_cfg(1, 1e-3)).unwrap_err().is_config());
}

#[test]
fn zero_epochs_is_identity() {
    let c = tiny_config();
    let m = Backbone::init(c.clone(), 5).unwrap();
    let (out, trace) = ssa_adapt(&m, &windows(&c, 4, 0), &ssa_cfg(0, 1e-3)).unwrap();
    assert_eq!(out.params, m.params);
    assert!(trace.is_empty());
}

#[test]
fn adaptation_is_deterministic() {
    let c = tiny_config();
    let m = Backbone::init(c.clone(), 5).unwrap();
    let ws = windows(&c, 10, 0);
    for mode in [ViewMode::Inversion, ViewMode::Mask] {
        let cfg = SsaConfig {
            view_mode: mode,
            ..ssa_cfg(2, 1e-3)
        };
        let (a, ta) = ssa_adapt(&m, &ws, &cfg).unwrap();
        let (b, tb) = ssa_adapt(&m, &ws, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }
}

#[test]
fn loss_trends_down_on_fixed_batch() {
    let c = tiny_config();
    let m = Backbone::init(c.clone(), 6).unwrap();
    let ws = windows(&c, 8, 9);
    let (_, trace) = ssa_adapt(&m, &ws, &ssa_cfg(50, 1e-3)).unwrap();
    assert_eq!(trace.len(), 50);
    let losses: Vec<f64> = trace.iter().map(|p| p.loss).collect();
    let ma: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for pair in ma.iter().step_by(10).collect::<Vec<_>>().windows(2) {
        assert!(pair[1] < pair[0], "moving average rose: {ma:?}");
    }
    assert!(ma.last().unwrap() < &ma[0]);
    let csv = trace_csv(&trace);
    assert!(csv.starts_with("epoch,step,loss\n1,0,"));
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn one_step_reaches_every_contrastive_parameter_group() {
    let c = tiny_config();
    let m = Backbone::init(c.clone(), 7).unwrap();
    let ws = windows(&c, 6, 4);
    let mut rng = stream_rng(0, "t");
    let pairs: Vec<_> = ws
        .iter()
        .map(|w| build_views(w, ViewMode::Inversion, 0.0, &mut rng).unwrap())
        .collect();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, true);
    let v = encode_views(&m, &mut tape, &bound, &pairs, 4).unwrap();
    let loss = cross_view_loss(&m, &mut tape, &bound, &v, 4).unwrap();
    tape.backward(loss).unwrap();
    let grads = bound.grads(&tape);
    for (name, g) in &grads {
        if name.starts_with("classifier") {
            continue;
        }
        let nonzero = g.iter().any(|v| *v != 0.0);
        assert!(nonzero, "no gradient reached {name}");
    }
}

fn loss_of(sims_pos: f64, negs: &[f64]) -> f64 {
    // build unit vectors in 2D with prescribed cosine to the prediction (1, 0)
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
    let mut rows = vec![sims_pos, (1.0 - sims_pos * sims_pos).sqrt()];
    for &s in negs {
        rows.extend([s, (1.0 - s * s).sqrt()]);
    }
    let cands = tape.constant(Tensor::matrix(1 + negs.len(), 2, rows).unwrap());
    let l = info_nce(&mut tape, &[p], &[cands]).unwrap();
    tape.value(l).item().unwrap()
}

proptest! {
    #[test]
    fn info_nce_is_nonnegative_and_zero_only_for_singletons(
        pos in -1.0f64..1.0,
        negs in prop::collection::vec(-1.0f64..1.0, 0..6),
    ) {
        let l = loss_of(pos, &negs);
        prop_assert!(l >= 0.0);
        if negs.is_empty() {
            prop_assert_eq!(l, 0.0);
        } else {
            prop_assert!(l > 0.0);
        }
    }

    #[test]
    fn raising_positive_similarity_lowers_loss(
        pos in -0.99f64..0.9,
        bump in 0.01f64..0.09,
        negs in prop::collection::vec(-1.0f64..1.0, 1..6),
    ) {
        prop_assert!(loss_of(pos + bump, &negs) < loss_of(pos, &negs));
    }

    #[test]
    fn adding_a_negative_never_lowers_loss(
        pos in -1.0f64..1.0,
        negs in prop::collection::vec(-1.0f64..1.0, 0..6),
        extra in -1.0f64..1.0,
    ) {
        let mut more = negs.clone();
        more.push(extra);
        prop_assert!(loss_of(pos, &more) >= loss_of(pos, &negs));
    }
}
