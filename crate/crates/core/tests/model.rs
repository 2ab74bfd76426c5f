use emgup::autodiff::{softmax, Tape, Tensor};
use emgup::data::{Window, WindowOrigin};
use emgup::model::*;
use emgup::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> BackboneConfig {
    let mut c = BackboneConfig::standard(3, 32, 8, 4);
    c.context_window = 4;
    c.horizons = 2;
    c
}

fn random_window(c: &BackboneConfig, seed: u64) -> Window {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c.channels * c.window_length)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Window::new(c.channels, c.window_length, data, WindowOrigin::default()).unwrap()
}

fn zero_params(m: &mut Backbone, pred: impl Fn(&str) -> bool) {
    let names: Vec<String> = m.params.keys().filter(|n| pred(n)).cloned().collect();
    for n in names {
        m.param_mut(&n).values_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn latent_shape_follows_conv_arithmetic() {
    let c = small_config();
    let m = Backbone::init(c.clone(), 1).unwrap();
    let z = m.latents(&random_window(&c, 2)).unwrap();
    // 32 -> 13 -> 9 -> 7
    assert_eq!(z.shape(), &[7, 8]);
    assert_eq!(m.latent_len(), 7);
}

#[test]
fn wrong_window_shape_is_dimension_error() {
    let c = small_config();
    let m = Backbone::init(c.clone(), 1).unwrap();
    let w = Window::new(2, 32, vec![0.0; 64], WindowOrigin::default()).unwrap();
    assert!(matches!(m.latents(&w), Err(Error::Dimension(_))));
    assert!(matches!(m.logits(&[&w]), Err(Error::Dimension(_))));
}

#[test]
fn zero_input_and_zero_biases_give_zero_latents() {
    let c = small_config();
    let mut m = Backbone::init(c.clone(), 3).unwrap();
    zero_params(&mut m, |n| n.starts_with("extractor") && n.ends_with("bias"));
    let w = Window::new(3, 32, vec![0.0; 96], WindowOrigin::default()).unwrap();
    assert!(m.latents(&w).unwrap().values().iter().all(|&v| v == 0.0));
}

#[test]
fn identical_windows_identical_latents() {
    let c = small_config();
    let m = Backbone::init(c.clone(), 3).unwrap();
    let w = random_window(&c, 5);
    let a = m.latents(&w).unwrap();
    let b = m.latents(&w.clone()).unwrap();
    assert_eq!(a.values(), b.values());
}

fn context_of(m: &Backbone, z: &Tensor, upto: usize) -> Vec<f64> {
    let mut tape = Tape::no_grad();
    let bound = m.bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let c = m.encode_context(&mut tape, &bound, zv, upto).unwrap();
    tape.value(c).values().to_vec()
}

fn random_latents(rows: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, d, (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn context_is_causal() {
    let c = small_config();
    let m = Backbone::init(c, 4).unwrap();
    let z = random_latents(7, 8, 1);
    for upto in 1..=7 {
        let base = context_of(&m, &z, upto);
        let mut perturbed = z.clone();
        for r in upto..7 {
            for j in 0..8 {
                perturbed.values_mut()[r * 8 + j] += 3.0;
            }
        }
        assert_eq!(base, context_of(&m, &perturbed, upto), "upto={upto}");
    }
    // upto=1: perturbing z2 changes nothing, perturbing z1 does
    let base = context_of(&m, &z, 1);
    let mut p = z.clone();
    p.values_mut()[0] += 1.0;
    assert_ne!(base, context_of(&m, &p, 1));
}

#[test]
fn context_index_errors() {
    let c = small_config();
    let m = Backbone::init(c, 4).unwrap();
    let z = random_latents(7, 8, 1);
    let mut tape = Tape::no_grad();
    let bound = m.bind(&mut tape, false);
    let zv = tape.constant(z);
    assert!(matches!(m.encode_context(&mut tape, &bound, zv, 0), Err(Error::Index(_))));
    assert!(matches!(m.encode_context(&mut tape, &bound, zv, 8), Err(Error::Index(_))));
}

#[test]
fn single_head_identity_encoder_matches_attention_formula() {
    let mut c = small_config();
    c.encoder_layers = 1;
    c.encoder_heads = 1;
    let d = c.latent_dim;
    let mut m = Backbone::init(c, 6).unwrap();
    zero_params(&mut m, |n| {
        n.starts_with("encoder") && (n.ends_with("bias") || n.contains("ffn") || n == POS_EMBEDDING)
    });
    for p in ["q", "k", "v", "o"] {
        *m.param_mut(&format!("encoder.layer0.attn.{p}.weight")) = Tensor::identity(d);
    }
    let z = random_latents(7, d, 9);
    for upto in 1..=7 {
        let got = context_of(&m, &z, upto);
        // oracle: residual plus causal scaled dot-product attention at the last row
        let rows: Vec<&[f64]> = (0..upto).map(|r| z.row(r).unwrap()).collect();
        let q = rows[upto - 1];
        let scores: Vec<f64> = rows
            .iter()
            .map(|k| q.iter().zip(*k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let w = softmax(&scores);
        for j in 0..d {
            let attn: f64 = rows.iter().zip(&w).map(|(r, wi)| wi * r[j]).sum();
            let want = q[j] + attn;
            assert!((got[j] - want).abs() < 1e-10, "upto={upto} j={j}");
        }
    }
}

fn head_output(m: &Backbone, ctx: &[f64], k: usize) -> Vec<f64> {
    let mut tape = Tape::no_grad();
    let bound = m.bind(&mut tape, false);
    let cv = tape.constant(Tensor::vector(ctx.to_vec()).unwrap());
    let out = m.predict_future(&mut tape, &bound, cv, k).unwrap();
    tape.value(out).values().to_vec()
}

#[test]
fn prediction_heads() {
    let c = small_config();
    let mut m = Backbone::init(c, 8).unwrap();
    let ctx: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
    assert_ne!(head_output(&m, &ctx, 1), head_output(&m, &ctx, 2));
    *m.param_mut(&head_weight(1)) = Tensor::identity(8);
    assert_eq!(head_output(&m, &ctx, 1), ctx);
    zero_params(&mut m, |n| n == head_weight(2));
    assert!(head_output(&m, &ctx, 2).iter().all(|&v| v == 0.0));

    let mut tape = Tape::no_grad();
    let bound = m.bind(&mut tape, false);
    let cv = tape.constant(Tensor::vector(ctx).unwrap());
    assert!(matches!(m.predict_future(&mut tape, &bound, cv, 0), Err(Error::Index(_))));
    assert!(matches!(m.predict_future(&mut tape, &bound, cv, 3), Err(Error::Index(_))));
}

#[test]
fn classifier_properties() {
    let c = small_config();
    let mut m = Backbone::init(c.clone(), 10).unwrap();
    let w = random_window(&c, 11);
    let logits = m.logits(&[&w]).unwrap().remove(0);
    assert_eq!(logits.len(), 4);

    // permuting classifier rows permutes logits
    let perm = [2usize, 0, 3, 1];
    let mut p = m.clone();
    let (wt, bt) = (m.param(CLASSIFIER_WEIGHT).clone(), m.param(CLASSIFIER_BIAS).clone());
    for (i, &src) in perm.iter().enumerate() {
        p.param_mut(CLASSIFIER_WEIGHT).values_mut()[i * 8..(i + 1) * 8]
            .copy_from_slice(&wt.values()[src * 8..(src + 1) * 8]);
        p.param_mut(CLASSIFIER_BIAS).values_mut()[i] = bt.values()[src];
    }
    let permuted = p.logits(&[&w]).unwrap().remove(0);
    for (i, &src) in perm.iter().enumerate() {
        assert_eq!(permuted[i], logits[src]);
    }

    zero_params(&mut m, |n| n.starts_with("classifier"));
    let probs = softmax(&m.logits(&[&w]).unwrap()[0]);
    assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
}

#[test]
fn batched_and_single_logits_agree() {
    let c = small_config();
    let m = Backbone::init(c.clone(), 12).unwrap();
    let ws: Vec<Window> = (0..5).map(|s| random_window(&c, s)).collect();
    let refs: Vec<&Window> = ws.iter().collect();
    let batch = m.logits(&refs).unwrap();
    for (w, row) in ws.iter().zip(&batch) {
        assert_eq!(&m.logits(&[w]).unwrap()[0], row);
    }
}

#[test]
fn checkpoint_round_trip_preserves_forward_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config();
    let mut m = Backbone::init(c.clone(), 13).unwrap();
    m.norm.mean = vec![0.1, -0.2, 0.3];
    m.norm.std = vec![1.5, 0.7, 2.0];
    m.provenance.stage = "pretrain".into();
    m.provenance.epoch = 7;
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    for s in 0..10 {
        let w = random_window(&c, 100 + s);
        assert_eq!(m.logits(&[&w]).unwrap(), back.logits(&[&w]).unwrap());
        assert_eq!(m.latents(&w).unwrap().values(), back.latents(&w).unwrap().values());
    }
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn init_is_seeded_and_bounded() {
    let c = small_config();
    let a = Backbone::init(c.clone(), 1).unwrap();
    assert_eq!(a, Backbone::init(c.clone(), 1).unwrap());
    assert_ne!(a.params, Backbone::init(c.clone(), 2).unwrap().params);
    for (name, shape, fan_in) in param_manifest(&c) {
        let t = a.param(&name);
        assert_eq!(t.shape(), shape.as_slice());
        let bound = 1.0 / (fan_in as f64).sqrt();
        assert!(t.values().iter().all(|v| v.abs() <= bound), "{name}");
    }
}
