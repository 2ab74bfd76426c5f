//! Synthetic multi-user EMG generator.
//!
//! Every gesture class owns a template: a sum of 2–4 burst-modulated
//! sinusoids, each spread over a neighbourhood of electrodes. Each user
//! distorts all templates the same way (per-electrode gain, cyclic electrode
//! shift, time warp, noise and baseline drift), which makes every user a
//! separate domain with the same underlying classes.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::record::EmgRecord;
use crate::error::{Error, Result};
use crate::seed::{stream_rng, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUserProfile {
    pub user_id: String,
    pub channel_gain: Vec<f64>,
    pub channel_rotation: usize,
    pub time_warp: f64,
    pub noise_std: f64,
    pub baseline_drift_amp: f64,
}

impl SyntheticUserProfile {
    /// Profile that leaves templates untouched.
    pub fn identity(user_id: impl Into<String>, channels: usize) -> Self {
        Self {
            user_id: user_id.into(),
            channel_gain: vec![1.0; channels],
            channel_rotation: 0,
            time_warp: 1.0,
            noise_std: 0.0,
            baseline_drift_amp: 0.0,
        }
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let finite = self.channel_gain.iter().all(|g| g.is_finite() && *g > 0.0)
            && self.time_warp.is_finite()
            && self.noise_std.is_finite()
            && self.baseline_drift_amp.is_finite();
        if !finite || self.channel_gain.len() != channels {
            return Err(Error::Config(format!(
                "invalid synthetic profile for `{}`",
                self.user_id
            )));
        }
        if !(0.8..=1.25).contains(&self.time_warp) || self.noise_std < 0.0 || self.baseline_drift_amp < 0.0 {
            return Err(Error::Config(format!(
                "profile for `{}` out of range (warp {}, noise {}, drift {})",
                self.user_id, self.time_warp, self.noise_std, self.baseline_drift_amp
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_classes: usize,
    pub windows_per_class: usize,
    pub channels: usize,
    pub window_length: usize,
    pub seed: u64,
    pub sample_rate_hz: u32,
    pub gain_range: (f64, f64),
    pub max_rotation: usize,
    pub warp_range: (f64, f64),
    pub noise_range: (f64, f64),
    pub drift_range: (f64, f64),
}

impl SynthConfig {
    pub fn new(
        num_users: usize,
        num_classes: usize,
        windows_per_class: usize,
        channels: usize,
        window_length: usize,
        seed: u64,
    ) -> Self {
        Self {
            num_users,
            num_classes,
            windows_per_class,
            channels,
            window_length,
            seed,
            sample_rate_hz: 2000,
            gain_range: (0.6, 1.5),
            max_rotation: 2,
            warp_range: (0.8, 1.25),
            noise_range: (0.1, 0.4),
            drift_range: (0.0, 0.3),
        }
    }

    fn validate(&self) -> Result<()> {
        let counts = [
            ("num_users", self.num_users),
            ("num_classes", self.num_classes),
            ("windows_per_class", self.windows_per_class),
            ("channels", self.channels),
            ("window_length", self.window_length),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synthetic `{name}` must be at least 1")));
        }
        Ok(())
    }
}

/// One burst-modulated sinusoid of a class template.
#[derive(Debug, Clone, PartialEq)]
struct Component {
    amplitude: f64,
    freq: f64,
    phase: f64,
    center: f64,
    attack: f64,
    decay: f64,
    spatial: Vec<f64>,
}

impl Component {
    fn value(&self, ch: usize, t: f64) -> f64 {
        let width = if t < self.center { self.attack } else { self.decay };
        let z = (t - self.center) / width;
        self.amplitude * self.spatial[ch] * (-z * z).exp() * (2.0 * PI * self.freq * t + self.phase).sin()
    }
}

/// Rendered class template, `channels x window_length`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTemplate {
    pub class: usize,
    pub channels: usize,
    pub len: usize,
    pub values: Vec<f64>,
}

impl ClassTemplate {
    fn sample(class: usize, channels: usize, len: usize, rng: &mut StreamRng) -> Self {
        let n_comp = rng.gen_range(2..=4);
        let l = len as f64;
        let comps: Vec<Component> = (0..n_comp)
            .map(|_| {
                let mu = rng.gen_range(0.0..channels as f64);
                let spread = rng.gen_range(0.8..2.0);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let spatial = (0..channels)
                    .map(|c| {
                        let raw = (c as f64 - mu).abs();
                        let d = raw.min(channels as f64 - raw);
                        sign * (-d * d / (2.0 * spread * spread)).exp()
                    })
                    .collect();
                Component {
                    amplitude: rng.gen_range(0.6..1.5),
                    freq: rng.gen_range(0.03..0.18),
                    phase: rng.gen_range(0.0..2.0 * PI),
                    center: rng.gen_range(0.25 * l..0.75 * l),
                    attack: rng.gen_range(0.04 * l..0.12 * l),
                    decay: rng.gen_range(0.12 * l..0.3 * l),
                    spatial,
                }
            })
            .collect();
        let mut values = vec![0.0; channels * len];
        for ch in 0..channels {
            for t in 0..len {
                values[ch * len + t] = comps.iter().map(|c| c.value(ch, t as f64)).sum();
            }
        }
        Self {
            class,
            channels,
            len,
            values,
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.len..(c + 1) * self.len]
    }
}

/// Records plus everything needed to audit them. Labels are kept on each
/// record and in `labels` (parallel to `records`) as hidden ground truth.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub records: Vec<EmgRecord>,
    pub labels: Vec<usize>,
    pub templates: Vec<ClassTemplate>,
    pub profiles: Vec<SyntheticUserProfile>,
}

impl SynthDataset {
    pub fn user_ids(&self) -> Vec<String> {
        self.profiles.iter().map(|p| p.user_id.clone()).collect()
    }
}

pub fn user_id(index: usize) -> String {
    format!("u{index:03}")
}

pub fn class_templates(cfg: &SynthConfig) -> Vec<ClassTemplate> {
    let mut rng = stream_rng(cfg.seed, "synth/templates");
    (0..cfg.num_classes)
        .map(|c| ClassTemplate::sample(c, cfg.channels, cfg.window_length, &mut rng))
        .collect()
}

pub fn sample_profile(cfg: &SynthConfig, user: &str, rng: &mut StreamRng) -> SyntheticUserProfile {
    let (wlo, whi) = cfg.warp_range;
    SyntheticUserProfile {
        user_id: user.to_string(),
        channel_gain: (0..cfg.channels)
            .map(|_| rng.gen_range(cfg.gain_range.0..=cfg.gain_range.1))
            .collect(),
        channel_rotation: rng.gen_range(0..=cfg.max_rotation),
        time_warp: rng.gen_range(wlo.ln()..=whi.ln()).exp(),
        noise_std: rng.gen_range(cfg.noise_range.0..=cfg.noise_range.1),
        baseline_drift_amp: rng.gen_range(cfg.drift_range.0..=cfg.drift_range.1),
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let templates = class_templates(cfg);
    let mut profiles = Vec::with_capacity(cfg.num_users);
    let mut records = Vec::new();
    for u in 0..cfg.num_users {
        let id = user_id(u);
        let profile = sample_profile(cfg, &id, &mut stream_rng(cfg.seed, &format!("synth/profile/{id}")));
        records.extend(render_user(cfg, &templates, &profile)?);
        profiles.push(profile);
    }
    let labels = records.iter().map(|r| r.gesture_label.unwrap()).collect();
    Ok(SynthDataset {
        records,
        labels,
        templates,
        profiles,
    })
}

/// One record per class for `profile`, holding `windows_per_class`
/// back-to-back trials of `window_length` samples each.
pub fn render_user(
    cfg: &SynthConfig,
    templates: &[ClassTemplate],
    profile: &SyntheticUserProfile,
) -> Result<Vec<EmgRecord>> {
    cfg.validate()?;
    profile.validate(cfg.channels)?;
    let (channels, len) = (cfg.channels, cfg.window_length);
    let mut rng = stream_rng(cfg.seed, &format!("synth/trials/{}", profile.user_id));
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let total = len * cfg.windows_per_class;
    let drift_period = 4.0 * len as f64;
    let drift_phase: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();

    let mut out = Vec::with_capacity(templates.len());
    for tpl in templates {
        let user_tpl = distort(tpl, profile);
        let mut data = vec![0f64; channels * total];
        for trial in 0..cfg.windows_per_class {
            let noise = profile.noise_std;
            let shift = noise * 0.1 * len as f64 * std_normal.sample(&mut rng);
            let amp = 1.0 + 0.5 * noise * std_normal.sample(&mut rng);
            for ch in 0..channels {
                let src = &user_tpl[ch * len..(ch + 1) * len];
                for t in 0..len {
                    let mut v = amp * interp(src, t as f64 - shift);
                    if noise > 0.0 {
                        v += noise * std_normal.sample(&mut rng);
                    }
                    data[ch * total + trial * len + t] = v;
                }
            }
        }
        if profile.baseline_drift_amp > 0.0 {
            for ch in 0..channels {
                for t in 0..total {
                    data[ch * total + t] += profile.baseline_drift_amp
                        * (2.0 * PI * t as f64 / drift_period + drift_phase[ch]).sin();
                }
            }
        }
        out.push(EmgRecord::new(
            profile.user_id.clone(),
            format!("g{}", tpl.class),
            Some(tpl.class),
            cfg.sample_rate_hz,
            channels,
            data.into_iter().map(|v| v as f32).collect(),
        )?);
    }
    Ok(out)
}

/// Applies warp, electrode shift and gain to a template.
fn distort(tpl: &ClassTemplate, p: &SyntheticUserProfile) -> Vec<f64> {
    let (channels, len) = (tpl.channels, tpl.len);
    let mut out = vec![0.0; channels * len];
    for ch in 0..channels {
        let dest = (ch + p.channel_rotation) % channels;
        let src = tpl.channel(ch);
        for t in 0..len {
            let v = if p.time_warp == 1.0 {
                src[t]
            } else {
                interp(src, t as f64 / p.time_warp)
            };
            out[dest * len + t] = v * p.channel_gain[dest];
        }
    }
    out
}

/// Linear interpolation, zero outside the signal.
fn interp(signal: &[f64], pos: f64) -> f64 {
    if pos < 0.0 || pos > (signal.len() - 1) as f64 {
        return 0.0;
    }
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if frac == 0.0 || i + 1 >= signal.len() {
        return signal[i];
    }
    signal[i] * (1.0 - frac) + signal[i + 1] * frac
}
