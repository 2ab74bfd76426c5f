use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use emgup::config::RunConfig;
use emgup::data::{make_cross_user_splits, segment_all, synth_generate, DataStore, EmgRecord, Window};
use emgup::eval::{
    adapt_user, build_grid, evaluate_user, log_csv, pretrain, run_ablation, sha256_hex, summary_csv,
    AblationConfig, AblationResult, AdaptMode, ConfusionMatrix, DatasetSource, MemorySource,
    PretrainConfig, UserSource,
};
use emgup::model::{encode_checkpoint, load_checkpoint};
use emgup::seed::derive_seed;
use emgup::ssa::{trace_csv, SsaConfig};
use emgup::ssp::{report_csv, SspConfig};
use emgup::{Error, Result};

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn stamp(cfg: &RunConfig, seed: u64) -> String {
    format!("# fingerprint={} seed={seed}\n", cfg.fingerprint())
}

/// Writes the canonical config next to the outputs.
pub fn write_config(cfg: &RunConfig, seed: u64, out: &Path) -> Result<PathBuf> {
    let path = out.join(format!("config__{}.txt", cfg.fingerprint()));
    write(&path, format!("{}{}", stamp(cfg, seed), cfg.canonical_text()))?;
    Ok(path)
}

/// The user data named by the config: a record directory, or synthetic
/// users generated from `seed`.
pub fn open_source(cfg: &RunConfig, seed: u64) -> Result<Box<dyn UserSource>> {
    match &cfg.data_dir {
        Some(dir) => Ok(Box::new(DataStore::open(dir)?)),
        None => Ok(Box::new(MemorySource::new(synth_generate(&cfg.synth_for(seed))?.records))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserCount {
    pub user: String,
    pub records: usize,
    /// Samples per class index.
    pub class_samples: Vec<usize>,
    pub samples: usize,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub config_fingerprint: String,
    pub seed: u64,
    pub users: Vec<String>,
    pub classes: usize,
    pub channels: usize,
    pub window_length: usize,
    pub sample_rate_hz: u32,
    pub counts: Vec<UserCount>,
    pub total_samples: usize,
    pub total_windows: usize,
}

pub fn cmd_synth(cfg: &RunConfig, seed: u64, out: &Path) -> Result<Manifest> {
    let sc = cfg.synth_for(seed);
    let ds = synth_generate(&sc)?;
    DataStore::write(out, &ds.records)?;
    let users = ds.user_ids();
    let counts: Vec<UserCount> = users
        .iter()
        .map(|u| {
            let mine: Vec<&EmgRecord> = ds.records.iter().filter(|r| &r.user_id == u).collect();
            let mut class_samples = vec![0; sc.num_classes];
            for r in &mine {
                class_samples[r.gesture_label.expect("synthetic records are labeled")] += r.samples();
            }
            let samples: usize = class_samples.iter().sum();
            UserCount {
                user: u.clone(),
                records: mine.len(),
                windows: samples / sc.window_length,
                class_samples,
                samples,
            }
        })
        .collect();
    let manifest = Manifest {
        config_fingerprint: cfg.fingerprint(),
        seed,
        classes: sc.num_classes,
        channels: sc.channels,
        window_length: sc.window_length,
        sample_rate_hz: sc.sample_rate_hz,
        total_samples: counts.iter().map(|c| c.samples).sum(),
        total_windows: counts.iter().map(|c| c.windows).sum(),
        users,
        counts,
    };
    write(&out.join("manifest.json"), to_json(&manifest)?)?;
    Ok(manifest)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainSummary {
    pub config_fingerprint: String,
    pub seed: u64,
    pub fold: usize,
    pub train_users: Vec<String>,
    pub val_users: Vec<String>,
    pub test_users: Vec<String>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
}

pub fn cmd_pretrain(cfg: &RunConfig, source: &dyn UserSource, seed: u64, fold: usize, out: &Path) -> Result<PretrainSummary> {
    let splits = make_cross_user_splits(&source.users()?, cfg.folds, seed)?;
    let split = splits.get(fold).ok_or_else(|| {
        Error::Config(format!("fold {fold} does not exist (eval.folds={})", cfg.folds))
    })?;
    let load = |users: &[String]| -> Result<_> {
        let mut recs = Vec::new();
        for u in users {
            recs.extend(source.load_user(u)?);
        }
        segment_all(&recs, cfg.model.window_length, cfg.stride)
    };
    let train = load(&split.train_users)?;
    let val = load(&split.val_users)?;
    let pre_cfg = PretrainConfig {
        seed: derive_seed(seed, &format!("pretrain/fold{fold}")),
        ..cfg.pretrain.clone()
    };
    let outcome = pretrain(&cfg.model, &train, &val, &pre_cfg)?;
    let mut model = outcome.model;
    let fp = cfg.fingerprint();
    model.provenance.fingerprint = fp.clone();
    model.provenance.seed = seed;
    let bytes = encode_checkpoint(&model)?;
    let ckpt = out.join(format!("source__fold{fold}__{fp}.ckpt"));
    write(&ckpt, &bytes)?;
    write(
        &out.join(format!("pretrain__fold{fold}__{fp}.csv")),
        format!("{}{}", stamp(cfg, seed), log_csv(&outcome.log)),
    )?;
    let summary = PretrainSummary {
        config_fingerprint: fp.clone(),
        seed,
        fold,
        train_users: split.train_users.clone(),
        val_users: split.val_users.clone(),
        test_users: split.test_users.clone(),
        best_epoch: outcome.best_epoch,
        best_val_acc: outcome.best_val_acc,
        checkpoint: ckpt,
        checkpoint_sha256: sha256_hex(&bytes),
    };
    write(&out.join(format!("pretrain__fold{fold}__{fp}.json")), to_json(&summary)?)?;
    Ok(summary)
}

/// Name of a personalized checkpoint, without extension.
pub fn adapted_name(user: &str, mode: AdaptMode, fingerprint: &str) -> String {
    format!("{user}__{mode}__{fingerprint}")
}

/// Adapts `checkpoint` to one user. Only that user's records are read, and
/// their labels are dropped before anything else sees them.
pub fn cmd_adapt(
    cfg: &RunConfig,
    source: &dyn UserSource,
    seed: u64,
    checkpoint: &Path,
    user: &str,
    mode: AdaptMode,
    out: &Path,
) -> Result<PathBuf> {
    let fp = cfg.fingerprint();
    let stem = adapted_name(user, mode, &fp);
    let dest = out.join(format!("{stem}.ckpt"));
    let model = load_checkpoint(checkpoint)?;
    let records: Vec<EmgRecord> = source.load_user(user)?.iter().map(EmgRecord::without_label).collect();
    if mode == AdaptMode::None {
        fs::copy(checkpoint, &dest).map_err(|e| Error::io(&dest, e))?;
        return Ok(dest);
    }
    let windows: Vec<Window> = segment_all(&records, model.config.window_length, cfg.stride)?
        .into_iter()
        .map(|s| s.strip_label())
        .collect();
    let ssa = SsaConfig {
        seed: derive_seed(seed, &format!("ssa/{user}")),
        ..cfg.ssa.clone()
    };
    let ssp = SspConfig {
        seed: derive_seed(seed, &format!("ssp/{user}")),
        ..cfg.ssp.clone()
    };
    log::info!("adapting {user} with mode {mode} on {} windows", windows.len());
    let outcome = adapt_user(&model, &windows, mode, &ssa, &ssp)?;
    let mut adapted = outcome.model;
    adapted.provenance.fingerprint = fp;
    adapted.provenance.seed = seed;
    write(&dest, encode_checkpoint(&adapted)?)?;
    if mode.uses_ssa() {
        write(
            &out.join(format!("{stem}.ssa.csv")),
            format!("{}{}", stamp(cfg, seed), trace_csv(&outcome.ssa_trace)),
        )?;
    }
    if mode.uses_ssp() {
        write(
            &out.join(format!("{stem}.ssp.csv")),
            format!("{}{}", stamp(cfg, seed), report_csv(&outcome.ssp_reports)),
        )?;
    }
    Ok(dest)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    pub seed: u64,
    pub user: String,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub acc: f64,
    pub mf1: f64,
    pub n_windows: usize,
    pub confusion: ConfusionMatrix,
}

pub fn cmd_eval(cfg: &RunConfig, source: &dyn UserSource, seed: u64, checkpoint: &Path, user: &str, out: &Path) -> Result<EvalReport> {
    let bytes = fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let model = emgup::model::decode_checkpoint(&bytes)?;
    let samples = segment_all(&source.load_user(user)?, model.config.window_length, cfg.stride)?;
    let e = evaluate_user(&model, &samples)?;
    let report = EvalReport {
        config_fingerprint: cfg.fingerprint(),
        seed,
        user: user.to_string(),
        checkpoint: checkpoint.to_path_buf(),
        checkpoint_sha256: sha256_hex(&bytes),
        acc: e.acc,
        mf1: e.mf1,
        n_windows: e.n_windows,
        confusion: e.confusion,
    };
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    write(&out.join(format!("eval__{user}__{stem}.json")), to_json(&report)?)?;
    Ok(report)
}

/// Variant names contain `+` and `/`; file names get `-` instead.
pub fn cell_file_name(variant: &str, seed: u64, fingerprint: &str) -> String {
    let safe: String = variant
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' })
        .collect();
    format!("{safe}__seed{seed}__{fingerprint}.json")
}

pub fn cmd_ablate(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<AblationResult> {
    let variants = build_grid(&cfg.ablate_groups, cfg.ssa.context_window, &cfg.ablate_t_values)?;
    let store = cfg.data_dir.as_ref().map(DataStore::open).transpose()?;
    let data = match &store {
        Some(s) => DatasetSource::Fixed(s),
        None => DatasetSource::Synthetic(cfg.synth.clone()),
    };
    let grid = AblationConfig {
        variants,
        seeds: seeds.to_vec(),
    };
    let result = run_ablation(&data, &cfg.experiment(), &grid)?;
    let fp = cfg.fingerprint();
    let cells = out.join("cells");
    fs::create_dir_all(&cells).map_err(|e| Error::io(&cells, e))?;
    for r in &result.reports {
        write(&cells.join(cell_file_name(&r.variant.name, r.seed, &fp)), r.to_json())?;
    }
    let seeds_text: Vec<String> = seeds.iter().map(u64::to_string).collect();
    write(
        &out.join(format!("summary__{fp}.csv")),
        format!("# fingerprint={fp} seeds={}\n{}", seeds_text.join(";"), summary_csv(&result.summary)),
    )?;
    Ok(result)
}
