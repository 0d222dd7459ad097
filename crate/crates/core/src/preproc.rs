//! Intensity conversion and contrast enhancement applied before supervoxel
//! generation. Every operation returns a new volume with the same dims and
//! spacing.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volgrid::{BinaryMask, Volume4D};

pub const DEFAULT_BINS: usize = 256;
pub const DEFAULT_GAMMA: f64 = 1.2;

/// Linear rescale of stored values to Hounsfield units.
pub fn hu_rescale(v: &Volume4D, slope: f64, intercept: f64) -> Result<Volume4D> {
    if !slope.is_finite() || !intercept.is_finite() {
        return Err(Error::InvalidParam(format!(
            "slope/intercept must be finite, got {slope}/{intercept}"
        )));
    }
    v.map_channels(|_, ch| {
        Ok(ch
            .iter()
            .map(|&x| (x as f64 * slope + intercept) as f32)
            .collect())
    })
}

/// Power-law mapping on the window `[lo, hi]`; values outside are clamped.
pub fn gamma_correct(v: &Volume4D, gamma: f64, lo: f64, hi: f64) -> Result<Volume4D> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidParam(format!("gamma must be > 0, got {gamma}")));
    }
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::InvalidParam(format!(
            "window requires hi > lo, got [{lo}, {hi}]"
        )));
    }
    let span = hi - lo;
    v.map_channels(|_, ch| {
        Ok(ch
            .iter()
            .map(|&x| {
                let u = ((x as f64 - lo) / span).clamp(0.0, 1.0);
                (lo + span * u.powf(gamma)) as f32
            })
            .collect())
    })
}

fn masked_values<'a>(ch: &'a [f32], mask: &'a BinaryMask) -> impl Iterator<Item = f32> + 'a {
    ch.iter()
        .zip(mask.bits())
        .filter_map(|(&x, &m)| m.then_some(x))
}

fn check_mask(v: &Volume4D, mask: &BinaryMask) -> Result<()> {
    mask.check_dims(v.dims())?;
    if mask.is_empty() {
        return Err(Error::EmptyMask("brain mask"));
    }
    Ok(())
}

/// Histogram equalization per channel over the masked voxels.
///
/// The histogram spans the masked min..max of each channel with `bins` equal
/// bins. Masked voxels are replaced by `(cdf(x) - cdf_min) / (1 - cdf_min)`,
/// which lies in `[0, 1]`; voxels outside the mask are left untouched. A
/// channel that is constant inside the mask is returned unchanged.
pub fn hist_equalize(v: &Volume4D, mask: &BinaryMask, bins: usize) -> Result<Volume4D> {
    if bins < 2 {
        return Err(Error::InvalidParam(format!("bins must be >= 2, got {bins}")));
    }
    check_mask(v, mask)?;
    let channels: Vec<Vec<f32>> = (0..v.channels())
        .into_par_iter()
        .map(|m| equalize_channel(v.channel(m), mask, bins))
        .collect();
    v.map_channels(|m, _| Ok(channels[m].clone()))
}

fn equalize_channel(ch: &[f32], mask: &BinaryMask, bins: usize) -> Vec<f32> {
    let (lo, hi) = masked_values(ch, mask).fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    if hi <= lo {
        return ch.to_vec();
    }
    let (lo, hi) = (lo as f64, hi as f64);
    let bin_of = |x: f32| -> usize {
        let t = (x as f64 - lo) / (hi - lo) * bins as f64;
        (t.max(0.0) as usize).min(bins - 1)
    };
    let mut hist = vec![0usize; bins];
    let mut total = 0usize;
    for x in masked_values(ch, mask) {
        hist[bin_of(x)] += 1;
        total += 1;
    }
    let mut cdf = Vec::with_capacity(bins);
    let mut acc = 0usize;
    for h in &hist {
        acc += h;
        cdf.push(acc as f64 / total as f64);
    }
    let cdf_min = cdf[hist.iter().position(|&h| h > 0).unwrap_or(0)];
    ch.iter()
        .zip(mask.bits())
        .map(|(&x, &inside)| {
            if inside {
                ((cdf[bin_of(x)] - cdf_min) / (1.0 - cdf_min)) as f32
            } else {
                x
            }
        })
        .collect()
}

/// Standardizes each channel to zero mean and unit (population) standard
/// deviation over the masked voxels. The same affine map is applied outside
/// the mask. Constant channels become 0 inside the mask.
pub fn zscore_channels(v: &Volume4D, mask: &BinaryMask) -> Result<Volume4D> {
    check_mask(v, mask)?;
    let n = mask.count() as f64;
    v.map_channels(|_, ch| {
        let mean = masked_values(ch, mask).map(|x| x as f64).sum::<f64>() / n;
        let var = masked_values(ch, mask)
            .map(|x| (x as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        Ok(ch
            .iter()
            .map(|&x| {
                if std > 0.0 {
                    ((x as f64 - mean) / std) as f32
                } else {
                    (x as f64 - mean) as f32
                }
            })
            .collect())
    })
}

/// Separable Gaussian smoothing of every channel. `sigma_xy` and `sigma_z` are
/// in voxels; a zero sigma skips that axis. Kernels are truncated at 3 sigma
/// and renormalized at the volume border.
pub fn gaussian_smooth(v: &Volume4D, sigma_xy: f64, sigma_z: f64) -> Result<Volume4D> {
    if !(sigma_xy >= 0.0 && sigma_z >= 0.0 && sigma_xy.is_finite() && sigma_z.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "smoothing sigmas must be >= 0, got {sigma_xy}/{sigma_z}"
        )));
    }
    let d = v.dims();
    let strides = [1, d.width, d.width * d.height];
    let lens = [d.width, d.height, d.depth];
    let sigmas = [sigma_xy, sigma_xy, sigma_z];
    let channels: Vec<Vec<f32>> = (0..v.channels())
        .into_par_iter()
        .map(|m| {
            let mut cur: Vec<f64> = v.channel(m).iter().map(|&x| x as f64).collect();
            for axis in 0..3 {
                if sigmas[axis] > 0.0 && lens[axis] > 1 {
                    cur = smooth_axis(&cur, d.len(), strides[axis], lens[axis], sigmas[axis]);
                }
            }
            cur.into_iter().map(|x| x as f32).collect()
        })
        .collect();
    v.map_channels(|m, _| Ok(channels[m].clone()))
}

fn smooth_axis(src: &[f64], n: usize, stride: usize, len: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = ((i / stride) % len) as i64;
        let (mut acc, mut wsum) = (0.0, 0.0);
        for (j, w) in kernel.iter().enumerate() {
            let q = pos + j as i64 - radius;
            if q < 0 || q >= len as i64 {
                continue;
            }
            let idx = (i as i64 + (q - pos) * stride as i64) as usize;
            acc += w * src[idx];
            wsum += w;
        }
        *o = acc / wsum;
    }
    out
}

/// Replaces every voxel outside the mask with `fill` in all channels.
pub fn fill_outside(v: &Volume4D, mask: &BinaryMask, fill: f32) -> Result<Volume4D> {
    mask.check_dims(v.dims())?;
    v.map_channels(|_, ch| {
        Ok(ch
            .iter()
            .zip(mask.bits())
            .map(|(&x, &m)| if m { x } else { fill })
            .collect())
    })
}
