//! Sequence-cross contrastive alignment.
//!
//! Each target window is paired with a second view (time-reversed by
//! default). The context of one view predicts future latents of the other
//! through the per-horizon heads, scored by InfoNCE against the same
//! positions of the other windows in the batch.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tape, Var};
use crate::data::{random_mask_view, reverse_view, Window};
use crate::error::{Error, Result};
use crate::model::{Backbone, Bound, DEFAULT_CONTEXT_WINDOW};
use crate::seed::{stream_rng, StreamRng};

pub const DEFAULT_SSA_EPOCHS: usize = 5;
pub const DEFAULT_SSA_LR: f64 = 1e-7;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_MASK_FRACTION: f64 = 0.25;

/// How the second view of a window is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ViewMode {
    #[default]
    Inversion,
    /// The second view is the window itself.
    None,
    /// One random contiguous block is zeroed.
    Mask,
}

impl fmt::Display for ViewMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViewMode::Inversion => "inversion",
            ViewMode::None => "none",
            ViewMode::Mask => "mask",
        })
    }
}

impl FromStr for ViewMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inversion" => Ok(ViewMode::Inversion),
            "none" => Ok(ViewMode::None),
            "mask" => Ok(ViewMode::Mask),
            other => Err(Error::Config(format!(
                "unknown view mode `{other}` (expected inversion, none or mask)"
            ))),
        }
    }
}

impl Serialize for ViewMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ViewMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsaConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub context_window: usize,
    pub view_mode: ViewMode,
    pub mask_fraction: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for SsaConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_SSA_EPOCHS,
            lr: DEFAULT_SSA_LR,
            batch_size: DEFAULT_BATCH_SIZE,
            context_window: DEFAULT_CONTEXT_WINDOW,
            view_mode: ViewMode::Inversion,
            mask_fraction: DEFAULT_MASK_FRACTION,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// The window and its second view.
pub fn build_views(
    window: &Window,
    mode: ViewMode,
    mask_fraction: f64,
    rng: &mut StreamRng,
) -> Result<(Window, Window)> {
    let second = match mode {
        ViewMode::Inversion => reverse_view(window),
        ViewMode::None => window.clone(),
        ViewMode::Mask => random_mask_view(window, mask_fraction, rng)?,
    };
    Ok((window.clone(), second))
}

/// InfoNCE of already-computed predictions. `candidates[k]` is an `n x d`
/// matrix whose row 0 is the positive for `predictions[k]`. Returns the mean
/// over horizons.
pub fn info_nce(tape: &mut Tape, predictions: &[Var], candidates: &[Var]) -> Result<Var> {
    if predictions.is_empty() || predictions.len() != candidates.len() {
        return Err(Error::Config(format!(
            "info_nce needs one candidate set per prediction ({} vs {})",
            predictions.len(),
            candidates.len()
        )));
    }
    let mut terms = Vec::with_capacity(predictions.len());
    for (&p, &c) in predictions.iter().zip(candidates) {
        let sims = tape.cosine_rows(p, c)?;
        let n = tape.shape(sims)[0];
        let logits = tape.reshape(sims, vec![1, n])?;
        terms.push(tape.softmax_cross_entropy(logits, &[0])?);
    }
    let total = tape.add_all(&terms)?;
    tape.scale(total, 1.0 / predictions.len() as f64)
}

/// One direction of the contrastive objective for a single context: the
/// heads predict `positives[k-1]` for k = 1..=K, each scored against itself
/// plus `negatives[k-1]` (vectors of length d).
pub fn info_nce_direction(
    model: &Backbone,
    tape: &mut Tape,
    bound: &Bound,
    context: Var,
    positives: &[Var],
    negatives: &[Vec<Var>],
) -> Result<Var> {
    if positives.is_empty() {
        return Err(Error::Config("empty candidate set".into()));
    }
    if negatives.len() != positives.len() {
        return Err(Error::Config(format!(
            "{} positives but {} negative lists",
            positives.len(),
            negatives.len()
        )));
    }
    let mut preds = Vec::with_capacity(positives.len());
    let mut cands = Vec::with_capacity(positives.len());
    for (k, (&pos, negs)) in positives.iter().zip(negatives).enumerate() {
        preds.push(model.predict_future(tape, bound, context, k + 1)?);
        let mut rows = vec![pos];
        rows.extend(negs.iter().copied());
        cands.push(tape.stack_rows(&rows)?);
    }
    info_nce(tape, &preds, &cands)
}

/// Latents and contexts of both views for a batch of windows.
pub struct ViewLatents {
    /// Latents of the original views, one `L_z x d` per window.
    pub z: Vec<Var>,
    /// Latents of the second views.
    pub z_alt: Vec<Var>,
    /// Context of the first T original latents.
    pub c: Vec<Var>,
    /// Context of the last T latents of the second view.
    pub c_alt: Vec<Var>,
}

pub fn check_context_fits(model: &Backbone, context_window: usize) -> Result<()> {
    let lz = model.latent_len();
    let k = model.config.horizons;
    if context_window == 0 || lz < context_window + k {
        return Err(Error::Config(format!(
            "latent length {lz} is shorter than context window T={context_window} plus horizons K={k}"
        )));
    }
    Ok(())
}

pub fn encode_views(
    model: &Backbone,
    tape: &mut Tape,
    bound: &Bound,
    pairs: &[(Window, Window)],
    context_window: usize,
) -> Result<ViewLatents> {
    check_context_fits(model, context_window)?;
    let lz = model.latent_len();
    let mut out = ViewLatents {
        z: Vec::new(),
        z_alt: Vec::new(),
        c: Vec::new(),
        c_alt: Vec::new(),
    };
    for (w, alt) in pairs {
        let z = model.extract_features(tape, bound, w)?;
        let z_alt = model.extract_features(tape, bound, alt)?;
        out.c.push(model.encode_span(tape, bound, z, 0, context_window)?);
        out.c_alt
            .push(model.encode_span(tape, bound, z_alt, lz - context_window, context_window)?);
        out.z.push(z);
        out.z_alt.push(z_alt);
    }
    Ok(out)
}

/// Batch-mean loss of contexts predicting latent positions T+1..T+K of the
/// paired targets; negatives are the same positions in the other windows.
pub fn direction_loss(
    model: &Backbone,
    tape: &mut Tape,
    bound: &Bound,
    contexts: &[Var],
    targets: &[Var],
    context_window: usize,
) -> Result<Var> {
    let b = contexts.len();
    if b == 0 || targets.len() != b {
        return Err(Error::Config(format!(
            "{b} contexts for {} target sequences",
            targets.len()
        )));
    }
    let horizons = model.config.horizons;
    let mut terms = Vec::with_capacity(horizons);
    for k in 1..=horizons {
        // row T+k in 1-based latent positions
        let pos = context_window + k - 1;
        let rows: Vec<Var> = targets
            .iter()
            .map(|&z| tape.row(z, pos))
            .collect::<Result<_>>()?;
        let cands = tape.stack_rows(&rows)?;
        let mut sims = Vec::with_capacity(b);
        for &c in contexts {
            let pred = model.predict_future(tape, bound, c, k)?;
            sims.push(tape.cosine_rows(pred, cands)?);
        }
        let logits = tape.stack_rows(&sims)?;
        let labels: Vec<usize> = (0..b).collect();
        terms.push(tape.softmax_cross_entropy(logits, &labels)?);
    }
    let total = tape.add_all(&terms)?;
    tape.scale(total, 1.0 / horizons as f64)
}

/// Second-view context predicting original latents plus original context
/// predicting second-view latents, averaged over the batch.
pub fn cross_view_loss(
    model: &Backbone,
    tape: &mut Tape,
    bound: &Bound,
    views: &ViewLatents,
    context_window: usize,
) -> Result<Var> {
    let forward = direction_loss(model, tape, bound, &views.c_alt, &views.z, context_window)?;
    let backward = direction_loss(model, tape, bound, &views.c, &views.z_alt, context_window)?;
    tape.add(forward, backward)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    /// 1-based.
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub fn trace_csv(trace: &[LossPoint]) -> String {
    let mut out = String::from("epoch,step,loss\n");
    for p in trace {
        out.push_str(&format!("{},{},{}\n", p.epoch, p.step, p.loss));
    }
    out
}

/// Runs contrastive adaptation of every parameter on one user's label-free
/// windows. Returns the adapted model and the per-step loss trace.
pub fn ssa_adapt(model: &Backbone, windows: &[Window], config: &SsaConfig) -> Result<(Backbone, Vec<LossPoint>)> {
    if windows.is_empty() {
        return Err(Error::Config("contrastive adaptation needs at least one window".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    check_context_fits(model, config.context_window)?;
    let mut model = model.clone();
    if config.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let mut adam = AdamState::new(config.adam, &model.params);
    let mut order_rng = stream_rng(config.seed, "ssa/order");
    let mut view_rng = stream_rng(config.seed, "ssa/views");
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut trace = Vec::new();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(config.batch_size) {
            let pairs: Vec<(Window, Window)> = batch
                .iter()
                .map(|&i| build_views(&windows[i], config.view_mode, config.mask_fraction, &mut view_rng))
                .collect::<Result<_>>()?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let views = encode_views(&model, &mut tape, &bound, &pairs, config.context_window)?;
            let loss = cross_view_loss(&model, &mut tape, &bound, &views, config.context_window)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Data(format!(
                    "contrastive loss became {value} at epoch {epoch}, step {step}"
                )));
            }
            tape.backward(loss)?;
            let grads = bound.grads(&tape);
            adam.step(&mut model.params, &grads, config.lr)?;
            trace.push(LossPoint {
                epoch,
                step,
                loss: value,
            });
            step += 1;
        }
    }
    model.provenance.stage = "ssa".into();
    model.provenance.epoch = config.epochs;
    model.provenance.seed = config.seed;
    Ok((model, trace))
}
