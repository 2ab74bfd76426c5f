//! Test-side oracles shared by several integration targets.
#![allow(dead_code)]

use emgup::autodiff::{ParamSet, Tape, Tensor, Var};
use emgup::data::{Window, WindowOrigin};
use emgup::model::{Backbone, BackboneConfig, Bound};
use emgup::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Relative error with a floor of 1e-2 on the denominator, so gradients
/// near zero are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Scalarizes a non-scalar output with fixed pseudo-random weights so
/// every output entry contributes to the checked gradient.
fn scalarize(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Worst relative error between backward gradients and central
/// differences, over every entry of every input.
pub fn check_op<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        let s = scalarize(&mut tape, out).unwrap();
        tape.value(s).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(x.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars).unwrap();
    let s = scalarize(&mut tape, out).unwrap();
    tape.backward(s).unwrap();

    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[i].values_mut()[j] += FD_STEP;
            let up = eval(&xs);
            xs[i].values_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

pub struct ParamCheck {
    pub worst: f64,
    pub worst_param: String,
    pub checked: usize,
    /// Parameters whose analytic gradient is identically zero.
    pub zero_grad_params: Vec<String>,
}

/// Checks the gradient of `loss` with respect to every parameter of
/// `model` whose name passes `include`.
pub fn check_model<F, P>(model: &Backbone, include: P, loss: F) -> ParamCheck
where
    F: Fn(&Backbone, &mut Tape, &Bound) -> Result<Var>,
    P: Fn(&str) -> bool,
{
    let eval = |params: &ParamSet| -> f64 {
        let mut m = model.clone();
        m.params = params.clone();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false);
        let l = loss(&m, &mut tape, &bound).unwrap();
        tape.value(l).item().unwrap()
    };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let l = loss(model, &mut tape, &bound).unwrap();
    tape.backward(l).unwrap();
    let grads = bound.grads(&tape);

    let mut out = ParamCheck {
        worst: 0.0,
        worst_param: String::new(),
        checked: 0,
        zero_grad_params: Vec::new(),
    };
    for (name, tensor) in &model.params {
        if !include(name) {
            continue;
        }
        let g = &grads[name];
        if g.iter().all(|&v| v == 0.0) {
            out.zero_grad_params.push(name.clone());
        }
        for j in 0..tensor.len() {
            let mut params = model.params.clone();
            params.get_mut(name).unwrap().values_mut()[j] += FD_STEP;
            let up = eval(&params);
            params.get_mut(name).unwrap().values_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&params);
            let e = rel_err(g[j], (up - down) / (2.0 * FD_STEP));
            if e > out.worst {
                out.worst = e;
                out.worst_param = format!("{name}[{j}]");
            }
            out.checked += 1;
        }
    }
    out
}

/// 3 channels, L = 32, d = 8, T = 4, K = 2, 4 classes.
pub fn tiny_config() -> BackboneConfig {
    let mut c = BackboneConfig::standard(3, 32, 8, 4);
    c.context_window = 4;
    c.horizons = 2;
    c
}

pub fn tiny_windows(c: &BackboneConfig, n: usize, seed: u64) -> Vec<Window> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let data = (0..c.channels * c.window_length)
                .map(|t| (t as f64 * 0.2 + i as f64).sin() + 0.3 * rng.gen_range(-1.0..1.0))
                .collect();
            let origin = WindowOrigin {
                record_id: format!("u/s{}", i % 2),
                start: i * c.window_length,
            };
            Window::new(c.channels, c.window_length, data, origin).unwrap()
        })
        .collect()
}

/// Reference metrics straight from the definitions, for 2-D count tables
/// indexed `[true][predicted]`.
pub fn brute_accuracy(cm: &[Vec<u64>]) -> f64 {
    let mut hit = 0u64;
    let mut total = 0u64;
    for (t, row) in cm.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            total += n;
            if t == p {
                hit += n;
            }
        }
    }
    hit as f64 / total as f64
}

pub fn brute_macro_f1(cm: &[Vec<u64>]) -> f64 {
    let k = cm.len();
    let mut total = 0.0;
    for c in 0..k {
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (t, row) in cm.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                match (t == c, p == c) {
                    (true, true) => tp += n,
                    (false, true) => fp += n,
                    (true, false) => fneg += n,
                    _ => {}
                }
            }
        }
        // F1 = 2TP / (2TP + FP + FN), zero when there is no true positive
        if tp > 0 {
            total += 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
        }
    }
    total / k as f64
}

fn plain_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Contrastive loss written out term by term: for each horizon k the
/// prediction is `heads[k] * context` (row-major d x d), scored by cosine
/// similarity against the positive and the negatives at temperature 1,
/// and the negative log-probability of the positive is averaged over k.
pub fn reference_info_nce(heads: &[Vec<f64>], context: &[f64], positives: &[Vec<f64>], negatives: &[Vec<Vec<f64>>]) -> f64 {
    let d = context.len();
    let mut total = 0.0;
    for k in 0..positives.len() {
        let pred: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|j| heads[k][i * d + j] * context[j]).sum())
            .collect();
        let num = plain_cosine(&pred, &positives[k]).exp();
        let mut den = num;
        for z in &negatives[k] {
            den += plain_cosine(&pred, z).exp();
        }
        total += -(num / den).ln();
    }
    total / positives.len() as f64
}
