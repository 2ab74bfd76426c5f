use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::evaluate_user;
use super::pretrain::{pretrain, PretrainConfig};
use crate::data::{
    make_cross_user_splits, segment_all, synth_generate, DataStore, EmgRecord, SynthConfig, Window,
    WindowedSample,
};
use crate::error::{Error, Result, ResultExt};
use crate::model::{encode_checkpoint, Backbone, BackboneConfig};
use crate::seed::derive_seed;
use crate::ssa::{ssa_adapt, LossPoint, SsaConfig, ViewMode};
use crate::ssp::{ssp_adapt, SspConfig, SspEpochReport};

/// Anything that can hand out one user's records at a time.
pub trait UserSource {
    fn users(&self) -> Result<Vec<String>>;
    fn load_user(&self, user: &str) -> Result<Vec<EmgRecord>>;
}

impl UserSource for DataStore {
    fn users(&self) -> Result<Vec<String>> {
        DataStore::users(self)
    }

    fn load_user(&self, user: &str) -> Result<Vec<EmgRecord>> {
        DataStore::load_user(self, user)
    }
}

/// Records held in memory, grouped by user.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    by_user: BTreeMap<String, Vec<EmgRecord>>,
}

impl MemorySource {
    pub fn new(records: Vec<EmgRecord>) -> Self {
        let mut by_user: BTreeMap<String, Vec<EmgRecord>> = BTreeMap::new();
        for r in records {
            by_user.entry(r.user_id.clone()).or_default().push(r);
        }
        Self { by_user }
    }
}

impl UserSource for MemorySource {
    fn users(&self) -> Result<Vec<String>> {
        Ok(self.by_user.keys().cloned().collect())
    }

    fn load_user(&self, user: &str) -> Result<Vec<EmgRecord>> {
        self.by_user.get(user).cloned().ok_or_else(|| Error::UnknownUser {
            user: user.to_string(),
            known: self.by_user.keys().cloned().collect(),
        })
    }
}

/// Which adaptation stages run on a target user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    None,
    Ssa,
    Ssp,
    Full,
}

impl AdaptMode {
    pub fn from_stages(use_ssa: bool, use_ssp: bool) -> Self {
        match (use_ssa, use_ssp) {
            (false, false) => AdaptMode::None,
            (true, false) => AdaptMode::Ssa,
            (false, true) => AdaptMode::Ssp,
            (true, true) => AdaptMode::Full,
        }
    }

    pub fn uses_ssa(self) -> bool {
        matches!(self, AdaptMode::Ssa | AdaptMode::Full)
    }

    pub fn uses_ssp(self) -> bool {
        matches!(self, AdaptMode::Ssp | AdaptMode::Full)
    }
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaptMode::None => "none",
            AdaptMode::Ssa => "ssa",
            AdaptMode::Ssp => "ssp",
            AdaptMode::Full => "full",
        })
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AdaptMode::None),
            "ssa" => Ok(AdaptMode::Ssa),
            "ssp" => Ok(AdaptMode::Ssp),
            "full" => Ok(AdaptMode::Full),
            other => Err(Error::Config(format!(
                "unknown adaptation mode `{other}` (expected none, ssa, ssp or full)"
            ))),
        }
    }
}

pub struct AdaptOutcome {
    pub model: Backbone,
    pub ssa_trace: Vec<LossPoint>,
    pub ssp_reports: Vec<SspEpochReport>,
}

/// Adapts a source model to one user's label-free windows.
pub fn adapt_user(
    source: &Backbone,
    windows: &[Window],
    mode: AdaptMode,
    ssa: &SsaConfig,
    ssp: &SspConfig,
) -> Result<AdaptOutcome> {
    let mut model = source.clone();
    let mut ssa_trace = Vec::new();
    let mut ssp_reports = Vec::new();
    if mode.uses_ssa() {
        let (m, trace) = ssa_adapt(&model, windows, ssa).context(|| "contrastive alignment".into())?;
        model = m;
        ssa_trace = trace;
    }
    if mode.uses_ssp() {
        let out = ssp_adapt(&model, windows, ssp).context(|| "pseudo-label fine-tuning".into())?;
        model = out.student;
        ssp_reports = out.reports;
    }
    Ok(AdaptOutcome {
        model,
        ssa_trace,
        ssp_reports,
    })
}

/// One cell of an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub use_ssa: bool,
    pub use_ssp: bool,
    pub filtering: bool,
    pub view_mode: ViewMode,
    pub context_window: usize,
}

impl Variant {
    /// Whether two variants run exactly the same computation.
    pub fn same_settings(&self, other: &Variant) -> bool {
        self.use_ssa == other.use_ssa
            && self.use_ssp == other.use_ssp
            && self.filtering == other.filtering
            && self.view_mode == other.view_mode
            && self.context_window == other.context_window
    }

    pub fn new(name: &str, mode: AdaptMode, context_window: usize) -> Self {
        Self {
            name: name.to_string(),
            use_ssa: mode.uses_ssa(),
            use_ssp: mode.uses_ssp(),
            filtering: true,
            view_mode: ViewMode::Inversion,
            context_window,
        }
    }

    pub fn mode(&self) -> AdaptMode {
        AdaptMode::from_stages(self.use_ssa, self.use_ssp)
    }
}

/// Named groups of variants mirroring the stage, filtering, context-window
/// and view ablations.
pub fn grid_group(group: &str, context_window: usize, t_values: &[usize]) -> Result<Vec<Variant>> {
    let t = context_window;
    Ok(match group {
        "stages" => vec![
            Variant::new("so", AdaptMode::None, t),
            Variant::new("so+ssa", AdaptMode::Ssa, t),
            Variant::new("so+ssp", AdaptMode::Ssp, t),
            Variant::new("full", AdaptMode::Full, t),
        ],
        "filtering" => vec![
            Variant::new("so+ssp", AdaptMode::Ssp, t),
            Variant {
                filtering: false,
                ..Variant::new("so+ssp/nofilter", AdaptMode::Ssp, t)
            },
        ],
        "context" => {
            if t_values.is_empty() {
                return Err(Error::Config("context sweep needs at least one T value".into()));
            }
            t_values
                .iter()
                .map(|&v| Variant::new(&format!("so+ssa/T{v}"), AdaptMode::Ssa, v))
                .collect()
        }
        "views" => [ViewMode::Inversion, ViewMode::None, ViewMode::Mask]
            .into_iter()
            .map(|m| Variant {
                view_mode: m,
                ..Variant::new(&format!("so+ssa/{m}"), AdaptMode::Ssa, t)
            })
            .collect(),
        other => {
            if let Ok(mode) = other.parse::<AdaptMode>() {
                vec![Variant::new(other, mode, t)]
            } else {
                return Err(Error::Config(format!(
                    "unknown ablation group `{other}` (expected stages, filtering, context, views or a mode)"
                )));
            }
        }
    })
}

/// Variants of several groups; a name listed twice is kept once.
pub fn build_grid(groups: &[String], context_window: usize, t_values: &[usize]) -> Result<Vec<Variant>> {
    let mut out: Vec<Variant> = Vec::new();
    for g in groups {
        for v in grid_group(g, context_window, t_values)? {
            if !out.iter().any(|o| o.name == v.name) {
                out.push(v);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    Ok(out)
}

/// Settings shared by every cell of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: BackboneConfig,
    pub stride: usize,
    pub folds: usize,
    pub pretrain: PretrainConfig,
    pub ssa: SsaConfig,
    pub ssp: SspConfig,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold_index: usize,
    pub train_users: Vec<String>,
    pub val_users: Vec<String>,
    pub test_users: Vec<String>,
    pub pretrain_best_epoch: usize,
    pub pretrain_val_acc: f64,
    /// SHA-256 of the source checkpoint every variant of this fold starts from.
    pub source_checkpoint_sha256: String,
    pub mean_acc: f64,
    pub mean_mf1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserResult {
    pub user: String,
    pub fold: usize,
    pub acc: f64,
    pub mf1: f64,
    pub n_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_fingerprint: String,
    pub seed: u64,
    pub variant: Variant,
    pub folds: Vec<FoldSummary>,
    pub per_user: Vec<UserResult>,
    pub mean_acc: f64,
    pub mean_mf1: f64,
    pub std_acc: f64,
    pub std_mf1: f64,
    pub wallclock_s: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON with the wall-clock field zeroed, for comparing runs.
    pub fn to_json_without_timing(&self) -> String {
        Self {
            wallclock_s: 0.0,
            ..self.clone()
        }
        .to_json()
    }
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn load_samples(source: &dyn UserSource, users: &[String], cfg: &ExperimentConfig) -> Result<Vec<WindowedSample>> {
    let mut out = Vec::new();
    for u in users {
        let records = source.load_user(u)?;
        out.extend(segment_all(&records, cfg.model.window_length, cfg.stride)?);
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs the cross-user protocol for one seed and every variant, pretraining
/// once per fold. Returns one report per variant, in variant order.
pub fn run_seed(
    source: &dyn UserSource,
    cfg: &ExperimentConfig,
    variants: &[Variant],
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    if variants.is_empty() {
        return Err(Error::Config("no variants to run".into()));
    }
    let users = source.users()?;
    let splits = make_cross_user_splits(&users, cfg.folds, seed)?;
    let mut folds: Vec<Vec<FoldSummary>> = vec![Vec::new(); variants.len()];
    let mut per_user: Vec<Vec<UserResult>> = vec![Vec::new(); variants.len()];
    let mut clock = vec![0.0f64; variants.len()];

    for split in &splits {
        let f = split.fold_index;
        let started = Instant::now();
        let train = load_samples(source, &split.train_users, cfg).context(|| format!("fold {f}"))?;
        let val = load_samples(source, &split.val_users, cfg).context(|| format!("fold {f}"))?;
        let pre_cfg = PretrainConfig {
            seed: derive_seed(seed, &format!("pretrain/fold{f}")),
            ..cfg.pretrain.clone()
        };
        let pre = pretrain(&cfg.model, &train, &val, &pre_cfg).context(|| format!("pretraining fold {f}"))?;
        let mut source_model = pre.model;
        source_model.provenance.fingerprint = cfg.fingerprint.clone();
        let digest = sha256_hex(&encode_checkpoint(&source_model)?);
        let pretrain_s = started.elapsed().as_secs_f64();
        clock.iter_mut().for_each(|c| *c += pretrain_s);

        let mut fold_users: Vec<Vec<UserResult>> = vec![Vec::new(); variants.len()];
        for user in &split.test_users {
            let records = source.load_user(user).context(|| format!("fold {f}"))?;
            let labeled = segment_all(&records, cfg.model.window_length, cfg.stride)?;
            // adaptation only ever sees the label-free windows
            let unlabeled: Vec<Window> = labeled.iter().map(|s| s.window.clone()).collect();
            for (vi, v) in variants.iter().enumerate() {
                if let Some(prev) = variants[..vi].iter().position(|o| o.same_settings(v)) {
                    let reused = fold_users[prev].last().expect("computed above").clone();
                    fold_users[vi].push(reused);
                    continue;
                }
                let started = Instant::now();
                let ssa = SsaConfig {
                    context_window: v.context_window,
                    view_mode: v.view_mode,
                    seed: derive_seed(seed, &format!("ssa/{user}")),
                    ..cfg.ssa.clone()
                };
                let ssp = SspConfig {
                    filtering: v.filtering,
                    seed: derive_seed(seed, &format!("ssp/{user}")),
                    ..cfg.ssp.clone()
                };
                let adapted = adapt_user(&source_model, &unlabeled, v.mode(), &ssa, &ssp)
                    .context(|| format!("fold {f}, user {user}, variant {}", v.name))?;
                let eval = evaluate_user(&adapted.model, &labeled)
                    .context(|| format!("evaluating user {user}"))?;
                fold_users[vi].push(UserResult {
                    user: user.clone(),
                    fold: f,
                    acc: eval.acc,
                    mf1: eval.mf1,
                    n_windows: eval.n_windows,
                });
                clock[vi] += started.elapsed().as_secs_f64();
            }
        }
        for (vi, results) in fold_users.into_iter().enumerate() {
            let accs: Vec<f64> = results.iter().map(|r| r.acc).collect();
            let mf1s: Vec<f64> = results.iter().map(|r| r.mf1).collect();
            folds[vi].push(FoldSummary {
                fold_index: f,
                train_users: split.train_users.clone(),
                val_users: split.val_users.clone(),
                test_users: split.test_users.clone(),
                pretrain_best_epoch: pre.best_epoch,
                pretrain_val_acc: pre.best_val_acc,
                source_checkpoint_sha256: digest.clone(),
                mean_acc: mean_std(&accs).0,
                mean_mf1: mean_std(&mf1s).0,
            });
            per_user[vi].extend(results);
        }
    }

    Ok(variants
        .iter()
        .enumerate()
        .map(|(vi, v)| {
            let mut users = std::mem::take(&mut per_user[vi]);
            users.sort_by(|a, b| a.user.cmp(&b.user));
            let (mean_acc, std_acc) = mean_std(&users.iter().map(|u| u.acc).collect::<Vec<_>>());
            let (mean_mf1, std_mf1) = mean_std(&users.iter().map(|u| u.mf1).collect::<Vec<_>>());
            MetricsReport {
                config_fingerprint: cfg.fingerprint.clone(),
                seed,
                variant: v.clone(),
                folds: std::mem::take(&mut folds[vi]),
                per_user: users,
                mean_acc,
                mean_mf1,
                std_acc,
                std_mf1,
                wallclock_s: clock[vi],
            }
        })
        .collect())
}

/// The cross-user protocol with the stages, view mode and filtering set in
/// `cfg`.
pub fn run_cross_validation(source: &dyn UserSource, cfg: &ExperimentConfig, mode: AdaptMode, seed: u64) -> Result<MetricsReport> {
    let variant = Variant {
        filtering: cfg.ssp.filtering,
        view_mode: cfg.ssa.view_mode,
        ..Variant::new(&mode.to_string(), mode, cfg.ssa.context_window)
    };
    Ok(run_seed(source, cfg, &[variant], seed)?.remove(0))
}

/// Where each seed's users come from.
pub enum DatasetSource<'a> {
    Fixed(&'a dyn UserSource),
    /// A fresh synthetic population per seed (the seed replaces `cfg.seed`).
    Synthetic(SynthConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub context_window: usize,
    pub view_mode: ViewMode,
    pub filtering: bool,
    pub mean_acc: f64,
    pub mean_mf1: f64,
    pub std_acc: f64,
    pub std_mf1: f64,
    pub seeds: Vec<u64>,
}

pub struct AblationResult {
    /// Reports grouped by seed, each in variant order.
    pub reports: Vec<MetricsReport>,
    pub summary: Vec<SummaryRow>,
}

impl AblationResult {
    pub fn row(&self, variant: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == variant)
    }
}

/// Every variant for every seed. Summary means are over seeds of the
/// per-seed user means, and deviations are across seeds.
pub fn run_ablation(data: &DatasetSource<'_>, cfg: &ExperimentConfig, grid: &AblationConfig) -> Result<AblationResult> {
    if grid.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut reports = Vec::new();
    for &seed in &grid.seeds {
        let seed_reports = match data {
            DatasetSource::Fixed(src) => run_seed(*src, cfg, &grid.variants, seed)?,
            DatasetSource::Synthetic(sc) => {
                let sc = SynthConfig { seed, ..sc.clone() };
                let ds = synth_generate(&sc)?;
                run_seed(&MemorySource::new(ds.records), cfg, &grid.variants, seed)?
            }
        };
        reports.extend(seed_reports);
    }
    let summary = grid
        .variants
        .iter()
        .map(|v| {
            let mine: Vec<&MetricsReport> = reports.iter().filter(|r| r.variant == *v).collect();
            let (mean_acc, std_acc) = mean_std(&mine.iter().map(|r| r.mean_acc).collect::<Vec<_>>());
            let (mean_mf1, std_mf1) = mean_std(&mine.iter().map(|r| r.mean_mf1).collect::<Vec<_>>());
            SummaryRow {
                variant: v.name.clone(),
                context_window: v.context_window,
                view_mode: v.view_mode,
                filtering: v.filtering,
                mean_acc,
                mean_mf1,
                std_acc,
                std_mf1,
                seeds: grid.seeds.clone(),
            }
        })
        .collect();
    Ok(AblationResult { reports, summary })
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("variant,T,view_mode,filtering,mean_acc,mean_mf1,std_acc,std_mf1,seeds\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.context_window,
            r.view_mode,
            r.filtering,
            r.mean_acc,
            r.mean_mf1,
            r.std_acc,
            r.std_mf1,
            seeds.join(";")
        ));
    }
    out
}
