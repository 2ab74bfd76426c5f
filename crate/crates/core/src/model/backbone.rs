//! The recognition network: conv feature extractor, causal self-attention
//! temporal encoder, per-horizon prediction heads and a linear classifier
//! over the temporal mean of the latents.

use std::collections::BTreeMap;

use rand::Rng;

use super::config::BackboneConfig;
use crate::autodiff::{GradSet, ParamSet, Tape, Tensor, Var};
use crate::data::{ChannelStats, Window};
use crate::error::{Error, Result};
use crate::seed::stream_rng;

/// Where a set of weights came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub stage: String,
    pub epoch: usize,
    pub seed: u64,
    /// `student` or `teacher`.
    pub role: String,
    pub fingerprint: String,
}

impl Default for Provenance {
    fn default() -> Self {
        Self {
            stage: "init".into(),
            epoch: 0,
            seed: 0,
            role: "student".into(),
            fingerprint: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    /// Input z-scoring, fixed after pretraining.
    pub norm: ChannelStats,
    pub params: ParamSet,
    pub provenance: Provenance,
}

/// Parameters of one model placed on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    /// Gradients of every bound parameter, zero-filled where none arrived.
    pub fn grads(&self, tape: &Tape) -> GradSet {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = tape
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

pub fn conv_weight(i: usize) -> String {
    format!("extractor.conv{i}.weight")
}
pub fn conv_bias(i: usize) -> String {
    format!("extractor.conv{i}.bias")
}
pub fn head_weight(k: usize) -> String {
    format!("heads.k{k}.weight")
}
pub const POS_EMBEDDING: &str = "encoder.pos";
pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

fn layer_param(l: usize, part: &str) -> String {
    format!("encoder.layer{l}.{part}")
}

/// Expected `(name, shape, fan_in)` for every parameter of `config`.
pub fn param_manifest(config: &BackboneConfig) -> Vec<(String, Vec<usize>, usize)> {
    let d = config.latent_dim;
    let hidden = 2 * d;
    let mut out = Vec::new();
    let mut in_ch = config.channels;
    for (i, b) in config.conv_blocks.iter().enumerate() {
        let fan = in_ch * b.kernel_width;
        out.push((conv_weight(i), vec![b.out_channels, in_ch, b.kernel_width], fan));
        out.push((conv_bias(i), vec![b.out_channels], fan));
        in_ch = b.out_channels;
    }
    let lz = config.latent_len().unwrap_or(1).max(1);
    out.push((POS_EMBEDDING.to_string(), vec![lz, d], d));
    for l in 0..config.encoder_layers {
        for p in ["q", "k", "v", "o"] {
            out.push((layer_param(l, &format!("attn.{p}.weight")), vec![d, d], d));
            out.push((layer_param(l, &format!("attn.{p}.bias")), vec![d], d));
        }
        out.push((layer_param(l, "ffn.in.weight"), vec![hidden, d], d));
        out.push((layer_param(l, "ffn.in.bias"), vec![hidden], d));
        out.push((layer_param(l, "ffn.out.weight"), vec![d, hidden], hidden));
        out.push((layer_param(l, "ffn.out.bias"), vec![d], hidden));
    }
    for k in 1..=config.horizons {
        out.push((head_weight(k), vec![d, d], d));
    }
    out.push((CLASSIFIER_WEIGHT.to_string(), vec![config.num_classes, d], d));
    out.push((CLASSIFIER_BIAS.to_string(), vec![config.num_classes], d));
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

impl Backbone {
    /// Fresh weights drawn from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, "model/init");
        let mut params = ParamSet::new();
        for (name, shape, fan_in) in param_manifest(&config) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            params.insert(name, Tensor::new(shape, values)?);
        }
        let norm = ChannelStats::identity(config.channels);
        Ok(Self {
            config,
            norm,
            params,
            provenance: Provenance {
                seed,
                ..Provenance::default()
            },
        })
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn latent_len(&self) -> usize {
        self.config.latent_len().expect("validated config")
    }

    /// Places all parameters on `tape`; with `trainable` they collect
    /// gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let t = t.clone().with_requires_grad(trainable);
                (name.clone(), tape.leaf(t))
            })
            .collect();
        Bound { vars }
    }

    fn check_window(&self, window: &Window) -> Result<()> {
        if window.channels() != self.config.channels || window.len() != self.config.window_length {
            return Err(Error::Dimension(format!(
                "window is {}x{}, model expects {}x{}",
                window.channels(),
                window.len(),
                self.config.channels,
                self.config.window_length
            )));
        }
        Ok(())
    }

    fn normalized_input(&self, window: &Window) -> Result<Tensor> {
        self.check_window(window)?;
        let len = window.len();
        let mut data = window.data().to_vec();
        for c in 0..window.channels() {
            let (m, s) = (self.norm.mean[c], self.norm.std[c]);
            data[c * len..(c + 1) * len]
                .iter_mut()
                .for_each(|v| *v = (*v - m) / s);
        }
        Tensor::matrix(window.channels(), len, data)
    }

    /// Latent sequence `Z` of one window, shape `L_z x d`.
    pub fn extract_features(&self, tape: &mut Tape, bound: &Bound, window: &Window) -> Result<Var> {
        let input = self.normalized_input(window)?;
        let mut h = tape.constant(input);
        for (i, b) in self.config.conv_blocks.iter().enumerate() {
            h = tape.conv1d(h, bound.var(&conv_weight(i)), Some(bound.var(&conv_bias(i))), b.stride)?;
            h = tape.relu(h)?;
        }
        tape.transpose(h)
    }

    /// Context vector of `Z[0..upto]` (the causal encoder output at the last
    /// position).
    pub fn encode_context(&self, tape: &mut Tape, bound: &Bound, z: Var, upto: usize) -> Result<Var> {
        self.encode_span(tape, bound, z, 0, upto)
    }

    /// Context vector of the latent rows `start..start+len`. Positional
    /// embeddings are indexed relative to `start`.
    pub fn encode_span(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: Var,
        start: usize,
        len: usize,
    ) -> Result<Var> {
        let (rows, d) = tape.value(z).dims2()?;
        if d != self.config.latent_dim {
            return Err(Error::Dimension(format!(
                "latents have width {d}, encoder expects {}",
                self.config.latent_dim
            )));
        }
        let positions = tape.shape(bound.var(POS_EMBEDDING))[0];
        if len == 0 || start + len > rows || len > positions {
            return Err(Error::Index(format!(
                "context span {start}..{} outside 1..={rows} latent positions",
                start + len
            )));
        }
        let span = tape.slice_rows(z, start, len)?;
        let pos = tape.slice_rows(bound.var(POS_EMBEDDING), 0, len)?;
        let mut h = tape.add(span, pos)?;
        for l in 0..self.config.encoder_layers {
            h = self.encoder_layer(tape, bound, l, h)?;
        }
        tape.row(h, len - 1)
    }

    fn linear(&self, tape: &mut Tape, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let y = tape.matmul_bt(x, bound.var(&format!("{prefix}.weight")))?;
        tape.add_row_bias(y, bound.var(&format!("{prefix}.bias")))
    }

    fn encoder_layer(&self, tape: &mut Tape, bound: &Bound, l: usize, h: Var) -> Result<Var> {
        let q = self.linear(tape, bound, h, &layer_param(l, "attn.q"))?;
        let k = self.linear(tape, bound, h, &layer_param(l, "attn.k"))?;
        let v = self.linear(tape, bound, h, &layer_param(l, "attn.v"))?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.encoder_heads);
        for head in 0..self.config.encoder_heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores, true)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let attn_out = self.linear(tape, bound, merged, &layer_param(l, "attn.o"))?;
        let h = tape.add(h, attn_out)?;
        let f = self.linear(tape, bound, h, &layer_param(l, "ffn.in"))?;
        let f = tape.relu(f)?;
        let f = self.linear(tape, bound, f, &layer_param(l, "ffn.out"))?;
        tape.add(h, f)
    }

    /// `W_k * context` for horizon `k` in `1..=K`.
    pub fn predict_future(&self, tape: &mut Tape, bound: &Bound, context: Var, k: usize) -> Result<Var> {
        if k == 0 || k > self.config.horizons {
            return Err(Error::Index(format!(
                "horizon {k} outside 1..={}",
                self.config.horizons
            )));
        }
        let d = self.config.latent_dim;
        let c = tape.reshape(context, vec![1, d])?;
        let out = tape.matmul_bt(c, bound.var(&head_weight(k)))?;
        tape.reshape(out, vec![d])
    }

    /// Class logits for a batch of windows, `B x num_classes`.
    pub fn classify_batch(&self, tape: &mut Tape, bound: &Bound, windows: &[&Window]) -> Result<Var> {
        if windows.is_empty() {
            return Err(Error::Dimension("cannot classify an empty batch".into()));
        }
        let mut pooled = Vec::with_capacity(windows.len());
        for w in windows {
            let z = self.extract_features(tape, bound, w)?;
            pooled.push(tape.mean_rows(z)?);
        }
        let x = tape.stack_rows(&pooled)?;
        let y = tape.matmul_bt(x, bound.var(CLASSIFIER_WEIGHT))?;
        tape.add_row_bias(y, bound.var(CLASSIFIER_BIAS))
    }

    /// Logits of one window as a length-`num_classes` vector.
    pub fn classify(&self, tape: &mut Tape, bound: &Bound, window: &Window) -> Result<Var> {
        let logits = self.classify_batch(tape, bound, &[window])?;
        tape.reshape(logits, vec![self.config.num_classes])
    }

    /// Inference-only logits; nothing is recorded for differentiation.
    pub fn logits(&self, windows: &[&Window]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(64) {
            let mut tape = Tape::no_grad();
            let bound = self.bind(&mut tape, false);
            let l = self.classify_batch(&mut tape, &bound, chunk)?;
            let t = tape.value(l);
            let (b, _) = t.dims2()?;
            for i in 0..b {
                out.push(t.row(i)?.to_vec());
            }
        }
        Ok(out)
    }

    /// Predicted class (lowest index on ties) per window.
    pub fn predict(&self, windows: &[&Window]) -> Result<Vec<usize>> {
        Ok(self.logits(windows)?.iter().map(|l| argmax(l)).collect())
    }

    /// Latents as plain values, for inspection and tests.
    pub fn latents(&self, window: &Window) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape, false);
        let z = self.extract_features(&mut tape, &bound, window)?;
        Ok(tape.value(z).clone())
    }

    /// Whether two models share parameter names and shapes.
    pub fn same_manifest(&self, other: &Backbone) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
