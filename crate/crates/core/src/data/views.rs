use rand::Rng;

use super::record::Window;
use crate::error::{Error, Result};

/// Time-reversed copy of a window; channels are left in place.
pub fn reverse_view(window: &Window) -> Window {
    let mut out = window.clone();
    let len = window.len();
    for c in 0..window.channels() {
        out.data_mut()[c * len..(c + 1) * len].reverse();
    }
    out
}

/// Zeroes one contiguous block of `round(mask_fraction * len)` time steps
/// across all channels, at a start drawn from `rng`.
pub fn random_mask_view<R: Rng + ?Sized>(
    window: &Window,
    mask_fraction: f64,
    rng: &mut R,
) -> Result<Window> {
    if !(0.0..=1.0).contains(&mask_fraction) {
        return Err(Error::Config(format!(
            "mask fraction must lie in [0, 1], got {mask_fraction}"
        )));
    }
    let len = window.len();
    let masked = (mask_fraction * len as f64).round() as usize;
    let mut out = window.clone();
    if masked == 0 {
        return Ok(out);
    }
    let start = rng.gen_range(0..=len - masked);
    for c in 0..window.channels() {
        out.data_mut()[c * len + start..c * len + start + masked].fill(0.0);
    }
    Ok(out)
}
