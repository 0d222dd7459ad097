//! Parametric maps from perfusion time series, and a synthetic CTP phantom.
//!
//! The maps are textbook surrogates computed directly from each voxel's
//! time-attenuation curve, without an arterial input function:
//!
//! | channel | definition |
//! |---------|------------|
//! | CBV  | trapezoidal area under the positive baseline-subtracted curve |
//! | CBF  | steepest forward difference of the baseline-subtracted curve, per second |
//! | TTP  | time of the first maximum |
//! | TMax | TTP minus the TTP of the mean curve over the mask |
//! | MIP  | maximum over time |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{BinaryMask, Dims3, Spacing, Volume4D};

pub const PM_CHANNELS: usize = 5;
pub const PM_NAMES: [&str; PM_CHANNELS] = ["CBV", "CBF", "TTP", "TMax", "MIP"];
pub const CBV: usize = 0;
pub const CBF: usize = 1;
pub const TTP: usize = 2;
pub const TMAX: usize = 3;
pub const MIP: usize = 4;

const MIN_FRAMES: usize = 4;
const BASELINE_FRAMES: usize = 2;

/// Index of the first maximum.
fn first_argmax(c: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in c.iter().enumerate().skip(1) {
        if v > c[best] {
            best = i;
        }
    }
    best
}

/// Per-curve maps except TMax, which needs the reference curve.
fn curve_maps(c: &[f64], dt: f64) -> [f64; PM_CHANNELS] {
    let baseline = c[..BASELINE_FRAMES].iter().sum::<f64>() / BASELINE_FRAMES as f64;
    let e: Vec<f64> = c.iter().map(|v| v - baseline).collect();
    let cbv = e
        .windows(2)
        .map(|w| 0.5 * dt * (w[0].max(0.0) + w[1].max(0.0)))
        .sum();
    let cbf = e
        .windows(2)
        .map(|w| (w[1] - w[0]) / dt)
        .fold(f64::NEG_INFINITY, f64::max);
    let ttp = dt * first_argmax(c) as f64;
    let mip = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [cbv, cbf, ttp, 0.0, mip]
}

/// Five-channel parametric map volume `[CBV, CBF, TTP, TMax, MIP]`.
/// Voxels outside `mask` are 0 in every channel.
pub fn compute_pms(ctp: &Volume4D, mask: &BinaryMask) -> Result<Volume4D> {
    let frames = ctp.channels();
    if frames < MIN_FRAMES {
        return Err(Error::InvalidParam(format!(
            "need at least {MIN_FRAMES} frames, got {frames}"
        )));
    }
    let dt = ctp.frame_interval_s();
    if dt <= 0.0 {
        return Err(Error::InvalidParam(format!(
            "frame interval must be > 0, got {dt}"
        )));
    }
    mask.check_dims(ctp.dims())?;
    let masked: Vec<usize> = mask
        .bits()
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect();
    if masked.is_empty() {
        return Err(Error::EmptyMask("brain mask"));
    }

    let n = ctp.dims().len();
    let curve = |idx: usize| -> Vec<f64> { (0..frames).map(|t| ctp.channel(t)[idx] as f64).collect() };

    let mut reference = vec![0.0f64; frames];
    for &idx in &masked {
        for (t, r) in reference.iter_mut().enumerate() {
            *r += ctp.channel(t)[idx] as f64;
        }
    }
    for r in &mut reference {
        *r /= masked.len() as f64;
    }
    let ref_ttp = dt * first_argmax(&reference) as f64;

    let per_voxel: Vec<[f64; PM_CHANNELS]> = masked
        .par_iter()
        .map(|&idx| {
            let mut maps = curve_maps(&curve(idx), dt);
            maps[TMAX] = maps[TTP] - ref_ttp;
            maps
        })
        .collect();

    let mut data = vec![0.0f32; n * PM_CHANNELS];
    for (&idx, maps) in masked.iter().zip(&per_voxel) {
        for (m, v) in maps.iter().enumerate() {
            data[m * n + idx] = *v as f32;
        }
    }
    Volume4D::new(ctp.dims(), PM_CHANNELS, ctp.spacing(), 0.0, data)
}

/// Generation parameters for a synthetic CTP study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub frames: usize,
    pub frame_interval_s: f64,
    pub lesion_count: usize,
    /// Ellipsoid semi-axis range in millimetres.
    pub lesion_radius_range_mm: [f64; 2],
    /// Extra bolus arrival delay inside lesions.
    pub lesion_delay_s: f64,
    /// Multiplier on the enhancement amplitude inside lesions, in (0, 1).
    pub lesion_amplitude_factor: f64,
    pub noise_sigma: f64,
    /// Pre-contrast tissue attenuation (HU).
    pub baseline_hu: f64,
    /// Peak enhancement of healthy tissue above baseline (HU).
    pub peak_enhancement_hu: f64,
    /// Bolus arrival time of healthy tissue (s).
    pub onset_s: f64,
    /// Gamma-variate shape and scale of the bolus.
    pub gamma_alpha: f64,
    pub gamma_beta_s: f64,
    /// Relative amplitude of the smooth spatial jitter of healthy parameters.
    pub tissue_jitter: f64,
    /// Enhancement of the second ("white matter") tissue class relative to
    /// the first; 1 disables the two-tissue pattern.
    pub white_matter_ratio: f64,
    /// Extra bolus arrival delay of the second tissue class (s).
    pub white_matter_delay_s: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: [64, 64, 16],
            spacing_mm: [1.0, 1.0, 5.0],
            frames: 16,
            frame_interval_s: 2.0,
            lesion_count: 1,
            lesion_radius_range_mm: [6.0, 12.0],
            lesion_delay_s: 4.0,
            lesion_amplitude_factor: 0.5,
            noise_sigma: 10.0,
            baseline_hu: 40.0,
            peak_enhancement_hu: 50.0,
            onset_s: 4.0,
            gamma_alpha: 3.0,
            gamma_beta_s: 1.5,
            tissue_jitter: 0.2,
            white_matter_ratio: 0.45,
            white_matter_delay_s: 1.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParam(msg));
        if self.dims.contains(&0) {
            return bad(format!("dims must be >= 1, got {:?}", self.dims));
        }
        if self.frames < MIN_FRAMES {
            return bad(format!("frames must be >= {MIN_FRAMES}, got {}", self.frames));
        }
        if !(self.frame_interval_s > 0.0) {
            return bad("frame interval must be > 0".into());
        }
        if !(self.lesion_amplitude_factor > 0.0 && self.lesion_amplitude_factor < 1.0) {
            return bad(format!(
                "lesion amplitude factor must lie in (0, 1), got {}",
                self.lesion_amplitude_factor
            ));
        }
        let [rmin, rmax] = self.lesion_radius_range_mm;
        if !(rmin > 0.0 && rmax >= rmin) {
            return bad(format!("invalid lesion radius range {rmin}..{rmax}"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.lesion_delay_s >= 0.0) {
            return bad("noise sigma and lesion delay must be >= 0".into());
        }
        if !(self.gamma_alpha > 0.0 && self.gamma_beta_s > 0.0) {
            return bad("gamma-variate shape and scale must be > 0".into());
        }
        if !(self.white_matter_ratio > 0.0) || !(self.white_matter_delay_s >= 0.0) {
            return bad("white matter ratio must be > 0 and its delay >= 0".into());
        }
        if !(0.0..1.0).contains(&self.tissue_jitter) {
            return bad("tissue jitter must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn spacing(&self) -> Spacing {
        Spacing::new(self.spacing_mm[0], self.spacing_mm[1], self.spacing_mm[2])
    }

    pub fn grid(&self) -> Dims3 {
        Dims3::new(self.dims[0], self.dims[1], self.dims[2])
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub ctp: Volume4D,
    pub brain_mask: BinaryMask,
    pub lesion_mask: BinaryMask,
}

/// Gamma-variate bolus normalized to a peak of 1 at `tau = alpha * beta`.
pub fn gamma_variate(tau: f64, alpha: f64, beta: f64) -> f64 {
    if tau <= 0.0 {
        return 0.0;
    }
    let peak = alpha * beta;
    (tau / peak).powf(alpha) * (alpha - tau / beta).exp()
}

/// Low-frequency random field in roughly [-1, 1].
struct SmoothField {
    waves: Vec<([f64; 3], f64)>,
}

impl SmoothField {
    /// `cycles` bounds the in-plane spatial frequency in cycles per field of view.
    fn sample<R: Rng>(rng: &mut R, dims: Dims3, cycles: f64) -> Self {
        let waves = (0..3)
            .map(|_| {
                let k = [
                    rng.random_range(-cycles..cycles) / dims.width as f64,
                    rng.random_range(-cycles..cycles) / dims.height as f64,
                    rng.random_range(0.0..1.0) / dims.depth as f64,
                ];
                (k, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        let p = [x as f64, y as f64, z as f64];
        self.waves
            .iter()
            .map(|(k, phase)| {
                (std::f64::consts::TAU * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2]) + phase).cos()
            })
            .sum::<f64>()
            / self.waves.len() as f64
    }
}

fn ellipsoid_brain(dims: Dims3) -> BinaryMask {
    let c = [
        (dims.width as f64 - 1.0) / 2.0,
        (dims.height as f64 - 1.0) / 2.0,
        (dims.depth as f64 - 1.0) / 2.0,
    ];
    let r = [
        0.44 * dims.width as f64,
        0.46 * dims.height as f64,
        0.62 * dims.depth as f64,
    ];
    let mut mask = BinaryMask::empty(dims);
    for z in 0..dims.depth {
        for y in 0..dims.height {
            for x in 0..dims.width {
                let d = ((x as f64 - c[0]) / r[0]).powi(2)
                    + ((y as f64 - c[1]) / r[1]).powi(2)
                    + ((z as f64 - c[2]) / r[2]).powi(2);
                mask.set(x, y, z, d <= 1.0);
            }
        }
    }
    mask
}

const LESION_RETRIES: usize = 200;

fn place_lesion<R: Rng>(
    rng: &mut R,
    spec: &PhantomSpec,
    brain: &BinaryMask,
    lesions: &mut BinaryMask,
) -> Result<()> {
    let dims = brain.dims();
    let sp = spec.spacing().as_array();
    let [rmin, rmax] = spec.lesion_radius_range_mm;
    for _ in 0..LESION_RETRIES {
        let radii_mm: [f64; 3] = std::array::from_fn(|_| {
            if rmax > rmin {
                rng.random_range(rmin..=rmax)
            } else {
                rmin
            }
        });
        let r: [f64; 3] = std::array::from_fn(|a| radii_mm[a] / sp[a]);
        let c = [
            rng.random_range(0.0..dims.width as f64),
            rng.random_range(0.0..dims.height as f64),
            rng.random_range(0.0..dims.depth as f64),
        ];
        let lo: [usize; 3] = std::array::from_fn(|a| (c[a] - r[a]).floor().max(0.0) as usize);
        let hi = [
            ((c[0] + r[0]).ceil() as usize).min(dims.width - 1),
            ((c[1] + r[1]).ceil() as usize).min(dims.height - 1),
            ((c[2] + r[2]).ceil() as usize).min(dims.depth - 1),
        ];
        let mut voxels = Vec::new();
        let mut fits = true;
        'scan: for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let d = ((x as f64 - c[0]) / r[0]).powi(2)
                        + ((y as f64 - c[1]) / r[1]).powi(2)
                        + ((z as f64 - c[2]) / r[2]).powi(2);
                    if d <= 1.0 {
                        if !brain.get(x, y, z) {
                            fits = false;
                            break 'scan;
                        }
                        voxels.push((x, y, z));
                    }
                }
            }
        }
        if fits && !voxels.is_empty() {
            for (x, y, z) in voxels {
                lesions.set(x, y, z, true);
            }
            return Ok(());
        }
    }
    Err(Error::LesionPlacement(LESION_RETRIES))
}

/// Synthetic CTP study: an ellipsoidal brain split into two tissue classes
/// whose voxels carry gamma-variate bolus curves with smoothly varying
/// amplitude, arrival and width, plus ellipsoidal lesions with delayed,
/// damped curves. Deterministic in `spec.seed`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let brain = ellipsoid_brain(dims);
    let mut lesions = BinaryMask::empty(dims);
    for _ in 0..spec.lesion_count {
        place_lesion(&mut rng, spec, &brain, &mut lesions)?;
    }

    let amp_field = SmoothField::sample(&mut rng, dims, 2.0);
    let onset_field = SmoothField::sample(&mut rng, dims, 2.0);
    let width_field = SmoothField::sample(&mut rng, dims, 2.0);
    let tissue_field = SmoothField::sample(&mut rng, dims, 4.0);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidParam(format!("noise sigma: {e}")))?;

    let n = dims.len();
    let frames = spec.frames;
    let dt = spec.frame_interval_s;
    let j = spec.tissue_jitter;
    let mut data = vec![0.0f32; n * frames];
    for idx in 0..n {
        if !brain.bits()[idx] {
            continue;
        }
        let (x, y, z) = dims.coords(idx);
        let mut amp = spec.peak_enhancement_hu * (1.0 + j * amp_field.at(x, y, z));
        let mut onset = spec.onset_s * (1.0 + j * onset_field.at(x, y, z));
        let beta = spec.gamma_beta_s * (1.0 + 0.5 * j * width_field.at(x, y, z));
        if tissue_field.at(x, y, z) < 0.0 {
            amp *= spec.white_matter_ratio;
            onset += spec.white_matter_delay_s;
        }
        if lesions.bits()[idx] {
            amp *= spec.lesion_amplitude_factor;
            onset += spec.lesion_delay_s;
        }
        for t in 0..frames {
            let clean =
                spec.baseline_hu + amp * gamma_variate(t as f64 * dt - onset, spec.gamma_alpha, beta);
            let v = if spec.noise_sigma > 0.0 {
                clean + noise.sample(&mut rng)
            } else {
                clean
            };
            data[t * n + idx] = v as f32;
        }
    }
    let ctp = Volume4D::new(dims, frames, spec.spacing(), dt, data)?;
    Ok(Phantom {
        ctp,
        brain_mask: brain,
        lesion_mask: lesions,
    })
}
