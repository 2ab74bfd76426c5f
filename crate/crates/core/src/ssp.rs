//! Pseudo-label fine-tuning with an EMA teacher.
//!
//! Every epoch the teacher labels all target windows. Windows whose
//! confidence clears the threshold are kept, but only from recordings that
//! keep at least `min_per_record` of them. The student is trained with
//! cross-entropy on the kept windows and the teacher follows the student by
//! exponential moving average after every optimizer step.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;

use crate::autodiff::{softmax, AdamConfig, AdamState, ParamSet, Tape};
use crate::data::Window;
use crate::error::{Error, Result};
use crate::model::{argmax, Backbone};
use crate::seed::stream_rng;
use crate::ssa::DEFAULT_BATCH_SIZE;

pub const DEFAULT_SSP_EPOCHS: usize = 10;
pub const DEFAULT_SSP_LR: f64 = 1e-7;
pub const DEFAULT_EMA_DECAY: f64 = 0.996;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.8;
pub const DEFAULT_MIN_PER_RECORD: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct SspConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub confidence_threshold: f64,
    pub min_per_record: usize,
    pub filtering: bool,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for SspConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_SSP_EPOCHS,
            lr: DEFAULT_SSP_LR,
            batch_size: DEFAULT_BATCH_SIZE,
            ema_decay: DEFAULT_EMA_DECAY,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            min_per_record: DEFAULT_MIN_PER_RECORD,
            filtering: true,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Teacher weights, moved only by [`TeacherState::ema_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub model: Backbone,
    pub alpha: f64,
    pub update_count: u64,
}

impl TeacherState {
    pub fn new(student: &Backbone, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1], got {alpha}")));
        }
        let mut model = student.clone();
        model.provenance.role = "teacher".into();
        Ok(Self {
            model,
            alpha,
            update_count: 0,
        })
    }

    /// `teacher = alpha * teacher + (1 - alpha) * student`, per parameter.
    pub fn ema_update(&mut self, student: &ParamSet) -> Result<()> {
        check_manifests(&self.model.params, student)?;
        let a = self.alpha;
        for (name, t) in self.model.params.iter_mut() {
            let s = student[name].values();
            for (p, &q) in t.values_mut().iter_mut().zip(s) {
                *p = a * *p + (1.0 - a) * q;
            }
        }
        self.update_count += 1;
        Ok(())
    }
}

fn check_manifests(teacher: &ParamSet, student: &ParamSet) -> Result<()> {
    for (name, t) in teacher {
        match student.get(name) {
            None => {
                return Err(Error::Dimension(format!(
                    "parameter `{name}` missing from student"
                )))
            }
            Some(s) if s.shape() != t.shape() => {
                return Err(Error::Dimension(format!(
                    "parameter `{name}`: teacher {:?} vs student {:?}",
                    t.shape(),
                    s.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = student.keys().find(|k| !teacher.contains_key(*k)) {
        return Err(Error::Dimension(format!(
            "parameter `{extra}` missing from teacher"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub predicted: usize,
    pub confidence: f64,
    pub record_id: String,
    pub retained: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordRetention {
    pub retained_windows: usize,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub labels: Vec<PseudoLabel>,
    pub records: BTreeMap<String, RecordRetention>,
}

impl PseudoLabelSet {
    /// Indices of windows that both clear the threshold and belong to a
    /// retained record.
    pub fn training_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.retained && self.records[&l.record_id].retained)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().map(|l| l.confidence).sum::<f64>() / self.labels.len() as f64
    }

    pub fn records_retained(&self) -> usize {
        self.records.values().filter(|r| r.retained).count()
    }
}

/// Prediction and max-softmax confidence for one logit vector.
pub fn confidence_of(logits: &[f64]) -> (usize, f64) {
    let p = softmax(logits);
    let k = argmax(&p);
    (k, p[k])
}

/// Teacher labels for every window, before any filtering (all flags set).
pub fn infer_pseudolabels(teacher: &Backbone, windows: &[Window]) -> Result<PseudoLabelSet> {
    let refs: Vec<&Window> = windows.iter().collect();
    let logits = teacher.logits(&refs)?;
    let labels = logits
        .iter()
        .zip(windows)
        .map(|(l, w)| {
            let (predicted, confidence) = confidence_of(l);
            PseudoLabel {
                predicted,
                confidence,
                record_id: w.origin.record_id.clone(),
                retained: true,
            }
        })
        .collect();
    Ok(tally_records(labels, 0))
}

fn tally_records(labels: Vec<PseudoLabel>, min_per_record: usize) -> PseudoLabelSet {
    let mut records: BTreeMap<String, RecordRetention> = BTreeMap::new();
    for l in &labels {
        let r = records.entry(l.record_id.clone()).or_insert(RecordRetention {
            retained_windows: 0,
            retained: false,
        });
        r.retained_windows += usize::from(l.retained);
    }
    for r in records.values_mut() {
        r.retained = r.retained_windows >= min_per_record;
    }
    PseudoLabelSet { labels, records }
}

/// Window flags become `confidence > xi`; records are kept when at least
/// `min_per_record` of their windows are. Disabled filtering keeps all.
pub fn filter_confidence(set: &PseudoLabelSet, xi: f64, min_per_record: usize, enabled: bool) -> PseudoLabelSet {
    let labels = set
        .labels
        .iter()
        .map(|l| PseudoLabel {
            retained: !enabled || l.confidence > xi,
            ..l.clone()
        })
        .collect();
    tally_records(labels, if enabled { min_per_record } else { 0 })
}

/// One Adam step on the mean cross-entropy of the student against the
/// pseudo-labels. `None` when there is nothing to train on.
pub fn finetune_step(
    student: &mut Backbone,
    adam: &mut AdamState,
    windows: &[&Window],
    labels: &[usize],
    lr: f64,
) -> Result<Option<f64>> {
    if windows.is_empty() {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape, true);
    let logits = student.classify_batch(&mut tape, &bound, windows)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = tape.value(loss).item()?;
    tape.backward(loss)?;
    let grads = bound.grads(&tape);
    adam.step(&mut student.params, &grads, lr)?;
    Ok(Some(value))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SspEpochReport {
    /// 1-based.
    pub epoch: usize,
    pub n_windows: usize,
    pub n_retained: usize,
    pub n_records_retained: usize,
    pub mean_conf: f64,
    /// Mean batch loss; `None` when the epoch had nothing to train on.
    pub loss: Option<f64>,
}

pub fn report_csv(reports: &[SspEpochReport]) -> String {
    let mut out = String::from("epoch,n_windows,n_retained,n_records_retained,mean_conf,loss\n");
    for r in reports {
        let loss = r.loss.map(|l| l.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.n_windows, r.n_retained, r.n_records_retained, r.mean_conf, loss
        ));
    }
    out
}

pub struct SspOutcome {
    pub student: Backbone,
    pub teacher: TeacherState,
    pub reports: Vec<SspEpochReport>,
}

/// Pseudo-label fine-tuning of every parameter on one user's label-free
/// windows. The student is the personalized model.
pub fn ssp_adapt(model: &Backbone, windows: &[Window], config: &SspConfig) -> Result<SspOutcome> {
    if windows.is_empty() {
        return Err(Error::Config("pseudo-label fine-tuning needs at least one window".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut student = model.clone();
    let mut teacher = TeacherState::new(model, config.ema_decay)?;
    let mut adam = AdamState::new(config.adam, &student.params);
    let mut rng = stream_rng(config.seed, "ssp/order");
    let mut reports = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let raw = infer_pseudolabels(&teacher.model, windows)?;
        let set = filter_confidence(
            &raw,
            config.confidence_threshold,
            config.min_per_record,
            config.filtering,
        );
        let mut idx = set.training_indices();
        idx.shuffle(&mut rng);
        let mut losses = Vec::new();
        for batch in idx.chunks(config.batch_size) {
            let ws: Vec<&Window> = batch.iter().map(|&i| &windows[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| set.labels[i].predicted).collect();
            if let Some(l) = finetune_step(&mut student, &mut adam, &ws, &ys, config.lr)? {
                losses.push(l);
                teacher.ema_update(&student.params)?;
            }
        }
        if idx.is_empty() {
            warn!("pseudo-label epoch {epoch}: no window retained, parameters unchanged");
        }
        reports.push(SspEpochReport {
            epoch,
            n_windows: windows.len(),
            n_retained: idx.len(),
            n_records_retained: set.records_retained(),
            mean_conf: raw.mean_confidence(),
            loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
        });
    }
    student.provenance.stage = "ssp".into();
    student.provenance.epoch = config.epochs;
    student.provenance.seed = config.seed;
    Ok(SspOutcome {
        student,
        teacher,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_examples() {
        let (k, c) = confidence_of(&[0.1, 2.3, -1.0]);
        assert_eq!(k, 1);
        let e = |x: f64| x.exp();
        let want = e(2.3) / (e(0.1) + e(2.3) + e(-1.0));
        assert!((c - want).abs() < 1e-15);
        assert!((c - 0.8713).abs() < 1e-4);
        assert_eq!(confidence_of(&[0.5; 4]), (0, 0.25));
    }

    fn set_from(confs: &[(f64, &str)]) -> PseudoLabelSet {
        let labels = confs
            .iter()
            .map(|&(confidence, r)| PseudoLabel {
                predicted: 0,
                confidence,
                record_id: r.into(),
                retained: true,
            })
            .collect();
        tally_records(labels, 0)
    }

    #[test]
    fn threshold_is_strict() {
        let s = set_from(&[(0.9, "a"), (0.7, "a"), (0.85, "a"), (0.8, "a")]);
        let f = filter_confidence(&s, 0.8, 1, true);
        assert_eq!(f.training_indices(), vec![0, 2]);
        let all = filter_confidence(&s, 0.0, 1, true);
        assert_eq!(all.training_indices().len(), 4);
        let off = filter_confidence(&s, 0.99, 100, false);
        assert_eq!(off.training_indices().len(), 4);
    }

    #[test]
    fn sequence_gate() {
        let mut confs = vec![(0.95, "short"); 14];
        confs.extend(vec![(0.95, "long"); 15]);
        let f = filter_confidence(&set_from(&confs), 0.8, 15, true);
        assert!(!f.records["short"].retained);
        assert_eq!(f.records["short"].retained_windows, 14);
        assert!(f.records["long"].retained);
        assert!(f.training_indices().iter().all(|&i| i >= 14));
        assert_eq!(f.records_retained(), 1);
    }
}
