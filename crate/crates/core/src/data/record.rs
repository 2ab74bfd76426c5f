use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One multichannel EMG recording.
///
/// Samples are stored channel-major as `f32`, which is also the on-disk
/// precision, so every save/load cycle is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct EmgRecord {
    pub user_id: String,
    pub session_id: String,
    pub gesture_label: Option<usize>,
    pub sample_rate_hz: u32,
    channels: usize,
    samples: usize,
    data: Vec<f32>,
}

impl EmgRecord {
    pub fn new(
        user_id: impl Into<String>,
        session_id: impl Into<String>,
        gesture_label: Option<usize>,
        sample_rate_hz: u32,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Data("a record needs at least one channel".into()));
        }
        if data.is_empty() || data.len() % channels != 0 {
            return Err(Error::Data(format!(
                "{} values cannot form {channels} non-empty channels",
                data.len()
            )));
        }
        if sample_rate_hz == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        Ok(Self {
            user_id: user_id.into(),
            session_id: session_id.into(),
            gesture_label,
            sample_rate_hz,
            channels,
            samples: data.len() / channels,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    /// `user/session`, unique within a dataset.
    pub fn record_id(&self) -> String {
        format!("{}/{}", self.user_id, self.session_id)
    }

    /// Copy with the gesture label removed.
    pub fn without_label(&self) -> Self {
        Self {
            gesture_label: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowOrigin {
    pub record_id: String,
    pub start: usize,
}

/// A fixed-length, label-free slice of a record: the only sample type the
/// adaptation stages accept.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    channels: usize,
    len: usize,
    data: Vec<f64>,
    pub origin: WindowOrigin,
}

impl Window {
    pub fn new(channels: usize, len: usize, data: Vec<f64>, origin: WindowOrigin) -> Result<Self> {
        if channels == 0 || len == 0 || data.len() != channels * len {
            return Err(Error::Dimension(format!(
                "window of {channels}x{len} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            len,
            data,
            origin,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Channel-major values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.channels, self.len, self.data.clone())
            .expect("window invariants guarantee a valid matrix")
    }
}

/// A window together with its (optional) gesture label.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    pub window: Window,
    pub label: Option<usize>,
}

impl WindowedSample {
    pub fn strip_label(self) -> Window {
        self.window
    }
}

/// Cuts `record` into windows of `len` samples starting every `stride`
/// samples. Incomplete tail windows are dropped; a record shorter than `len`
/// yields nothing.
pub fn segment_windows(record: &EmgRecord, len: usize, stride: usize) -> Result<Vec<WindowedSample>> {
    if len == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window length and stride must be positive (got {len}, {stride})"
        )));
    }
    if len > record.samples {
        return Ok(Vec::new());
    }
    let record_id = record.record_id();
    let count = (record.samples - len) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for start in (0..count).map(|i| i * stride) {
        let mut data = Vec::with_capacity(record.channels * len);
        for c in 0..record.channels {
            data.extend(record.channel(c)[start..start + len].iter().map(|&v| v as f64));
        }
        let window = Window::new(
            record.channels,
            len,
            data,
            WindowOrigin {
                record_id: record_id.clone(),
                start,
            },
        )?;
        out.push(WindowedSample {
            window,
            label: record.gesture_label,
        });
    }
    Ok(out)
}

/// Windows from many records, in record order.
pub fn segment_all(records: &[EmgRecord], len: usize, stride: usize) -> Result<Vec<WindowedSample>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(segment_windows(r, len, stride)?);
    }
    Ok(out)
}

/// Per-channel mean and standard deviation used to z-score model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Statistics over every sample of every window. Channels with (near)
    /// zero variance get unit scale.
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a Window>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for w in windows {
            if sum.is_empty() {
                sum = vec![0.0; w.channels()];
                sq = vec![0.0; w.channels()];
            } else if sum.len() != w.channels() {
                return Err(Error::Dimension(format!(
                    "windows disagree on channel count ({} vs {})",
                    sum.len(),
                    w.channels()
                )));
            }
            for c in 0..w.channels() {
                for &v in w.channel(c) {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += w.len();
        }
        if count == 0 {
            return Err(Error::Data("cannot compute channel statistics of no data".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var.sqrt() < 1e-8 {
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}
