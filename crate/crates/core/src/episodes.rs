//! Self-supervised support/query episodes built from supervoxels.
//!
//! One supervoxel is drawn as the foreground class; two distinct slices it
//! covers become the support and query images, and its footprint on each
//! slice is the pseudolabel. With probability `apply_probability` one side,
//! picked by a fair coin, receives a random affine warp and intensity jitter.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supervox::{segment_stats, SegmentStats};
use crate::volgrid::{
    extract_slice, save_mask, save_slice, BinaryMask, Dims3, LabelVolume, SliceTW, Volume4D,
};

pub const DEFAULT_MIN_SLICES: usize = 2;
pub const DEFAULT_MIN_PIXELS_PER_SLICE: usize = 25;
const TRANSFORM_RETRIES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformParams {
    /// Rotation drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Translation per axis drawn uniformly from `[-translation_px, translation_px]`.
    pub translation_px: f64,
    pub scale_range: [f64; 2],
    /// Exponent range for the intensity power-law jitter.
    pub gamma_range: [f64; 2],
    pub apply_probability: f64,
}

impl Default for TransformParams {
    fn default() -> Self {
        Self {
            rotation_deg: 15.0,
            translation_px: 10.0,
            scale_range: [0.9, 1.1],
            gamma_range: [0.8, 1.25],
            apply_probability: 0.5,
        }
    }
}

impl TransformParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translation_px: 0.0,
            scale_range: [1.0, 1.0],
            gamma_range: [1.0, 1.0],
            apply_probability: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.apply_probability)
            && self.rotation_deg >= 0.0
            && self.translation_px >= 0.0
            && self.scale_range[0] > 0.0
            && self.scale_range[0] <= 1.0
            && self.scale_range[1] >= 1.0
            && self.gamma_range[0] > 0.0
            && self.gamma_range[0] <= 1.0
            && self.gamma_range[1] >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!(
                "transform ranges must bracket the identity: {self:?}"
            )))
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> TransformRecord {
        let pick = |rng: &mut R, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        TransformRecord {
            rotation_deg: pick(rng, -self.rotation_deg, self.rotation_deg),
            scale: pick(rng, self.scale_range[0], self.scale_range[1]),
            translation_px: [
                pick(rng, -self.translation_px, self.translation_px),
                pick(rng, -self.translation_px, self.translation_px),
            ],
            gamma: pick(rng, self.gamma_range[0], self.gamma_range[1]),
        }
    }
}

/// A concrete draw from [`TransformParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub rotation_deg: f64,
    pub scale: f64,
    pub translation_px: [f64; 2],
    pub gamma: f64,
}

impl TransformRecord {
    pub const IDENTITY: TransformRecord = TransformRecord {
        rotation_deg: 0.0,
        scale: 1.0,
        translation_px: [0.0, 0.0],
        gamma: 1.0,
    };

    fn is_geometric_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.scale == 1.0 && self.translation_px == [0.0, 0.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformedSide {
    None,
    Support,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub min_slices: usize,
    pub min_pixels_per_slice: usize,
    pub transform: TransformParams,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            min_slices: DEFAULT_MIN_SLICES,
            min_pixels_per_slice: DEFAULT_MIN_PIXELS_PER_SLICE,
            transform: TransformParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: SliceTW,
    pub support_label: BinaryMask,
    pub query: SliceTW,
    pub query_label: BinaryMask,
    pub supervoxel_id: u32,
    pub volume_id: String,
    pub support_z: usize,
    pub query_z: usize,
    pub transformed_side: TransformedSide,
    pub transform: Option<TransformRecord>,
    pub seed: u64,
    pub index: u64,
}

/// Labels covering at least `min_pixels_per_slice` voxels on each of at least
/// `min_slices` distinct slices.
pub fn eligible_supervoxels(
    stats: &SegmentStats,
    min_slices: usize,
    min_pixels_per_slice: usize,
) -> Vec<u32> {
    stats
        .segments
        .iter()
        .filter(|s| s.slices_with_at_least(min_pixels_per_slice).len() >= min_slices.max(1))
        .map(|s| s.label)
        .collect()
}

/// Random stream for episode `index` of run `seed`. Streams are independent,
/// so episodes can be generated in any order or in parallel.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Samples episodes from one volume and its supervoxel labelling.
#[derive(Debug)]
pub struct EpisodeSampler<'a> {
    volume: &'a Volume4D,
    labels: &'a LabelVolume,
    config: EpisodeConfig,
    volume_id: String,
    /// Eligible label with the slices it may be sampled from.
    candidates: Vec<(u32, Vec<usize>)>,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(
        volume: &'a Volume4D,
        labels: &'a LabelVolume,
        config: EpisodeConfig,
        volume_id: impl Into<String>,
    ) -> Result<Self> {
        config.transform.validate()?;
        if volume.dims() != labels.dims() {
            return Err(Error::DimMismatch(format!(
                "volume {:?} vs labels {:?}",
                volume.dims(),
                labels.dims()
            )));
        }
        let stats = segment_stats(labels);
        let candidates: Vec<(u32, Vec<usize>)> =
            eligible_supervoxels(&stats, config.min_slices.max(2), config.min_pixels_per_slice)
                .into_iter()
                .map(|l| {
                    let slices = stats
                        .get(l)
                        .expect("eligible labels come from stats")
                        .slices_with_at_least(config.min_pixels_per_slice);
                    (l, slices)
                })
                .collect();
        if candidates.is_empty() {
            return Err(Error::NoEligibleSupervoxel);
        }
        Ok(Self {
            volume,
            labels,
            config,
            volume_id: volume_id.into(),
            candidates,
        })
    }

    pub fn eligible_labels(&self) -> Vec<u32> {
        self.candidates.iter().map(|c| c.0).collect()
    }

    pub fn sample(&self, seed: u64, index: u64) -> Result<Episode> {
        let mut rng = episode_rng(seed, index);
        let (label, slices) = &self.candidates[rng.random_range(0..self.candidates.len())];
        let first = rng.random_range(0..slices.len());
        let mut second = rng.random_range(0..slices.len() - 1);
        if second >= first {
            second += 1;
        }
        let (support_z, query_z) = (slices[first], slices[second]);

        let cut = |z: usize| -> Result<(SliceTW, BinaryMask)> {
            let img = extract_slice(self.volume, z)?.with_volume_id(self.volume_id.clone());
            Ok((img, footprint(self.labels, *label, z)))
        };
        let (mut support, mut support_label) = cut(support_z)?;
        let (mut query, mut query_label) = cut(query_z)?;

        let tp = &self.config.transform;
        let mut side = TransformedSide::None;
        let mut record = None;
        if rng.random_bool(tp.apply_probability) {
            side = if rng.random_bool(0.5) {
                TransformedSide::Support
            } else {
                TransformedSide::Query
            };
            let (img, lbl) = match side {
                TransformedSide::Support => (&mut support, &mut support_label),
                _ => (&mut query, &mut query_label),
            };
            let (wi, wl, rec) = apply_transform(img, lbl, tp, &mut rng)?;
            *img = wi;
            *lbl = wl;
            record = Some(rec);
        }

        Ok(Episode {
            support,
            support_label,
            query,
            query_label,
            supervoxel_id: *label,
            volume_id: self.volume_id.clone(),
            support_z,
            query_z,
            transformed_side: side,
            transform: record,
            seed,
            index,
        })
    }
}

/// Single episode from `volume`, equivalent to `EpisodeSampler::sample(seed, 0)`.
pub fn build_episode(
    volume: &Volume4D,
    labels: &LabelVolume,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<Episode> {
    EpisodeSampler::new(volume, labels, config.clone(), "")?.sample(seed, 0)
}

/// 2D mask of `label` on slice `z`.
pub fn footprint(labels: &LabelVolume, label: u32, z: usize) -> BinaryMask {
    let d = labels.dims();
    let n = d.slice_len();
    let bits = labels.labels()[z * n..(z + 1) * n]
        .iter()
        .map(|&l| l == label)
        .collect();
    BinaryMask::new(Dims3::new(d.width, d.height, 1), bits).expect("slice dims")
}

/// Draws a transform and warps image and label together. Draws that empty
/// the label are rejected and redrawn a bounded number of times.
pub fn apply_transform<R: Rng>(
    img: &SliceTW,
    lbl: &BinaryMask,
    tp: &TransformParams,
    rng: &mut R,
) -> Result<(SliceTW, BinaryMask, TransformRecord)> {
    check_pair(img, lbl)?;
    for _ in 0..TRANSFORM_RETRIES {
        let rec = tp.sample(rng);
        let (wi, wl) = warp(img, lbl, &rec)?;
        if !wl.is_empty() {
            return Ok((wi, wl, rec));
        }
    }
    Err(Error::TransformFailed(TRANSFORM_RETRIES))
}

fn check_pair(img: &SliceTW, lbl: &BinaryMask) -> Result<()> {
    lbl.check_dims(Dims3::new(img.width, img.height, 1))
}

/// Applies a fixed transform: rotation and scaling about the slice centre
/// followed by translation. The image is resampled bilinearly, the label by
/// nearest neighbour; samples from outside the slice are 0. The intensity
/// jitter maps each slice's value range through `u^gamma`.
pub fn warp(img: &SliceTW, lbl: &BinaryMask, rec: &TransformRecord) -> Result<(SliceTW, BinaryMask)> {
    check_pair(img, lbl)?;
    let (w, h) = (img.width, img.height);
    let (mut out, label) = if rec.is_geometric_identity() {
        (img.clone(), lbl.clone())
    } else {
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let theta = rec.rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let mut data = vec![0.0f32; img.data.len()];
        let mut bits = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                // inverse map: output pixel -> source position
                let dx = x as f64 - cx - rec.translation_px[0];
                let dy = y as f64 - cy - rec.translation_px[1];
                let sx = (cos * dx + sin * dy) / rec.scale + cx;
                let sy = (-sin * dx + cos * dy) / rec.scale + cy;
                let i = x + w * y;
                let (nx, ny) = (sx.round(), sy.round());
                if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                    bits[i] = lbl.get(nx as usize, ny as usize, 0);
                }
                for m in 0..img.channels {
                    data[i + m * w * h] = bilinear(img, m, sx, sy);
                }
            }
        }
        let mut out = img.clone();
        out.data = data;
        (out, BinaryMask::new_2d(w, h, bits)?)
    };
    if rec.gamma != 1.0 {
        intensity_gamma(&mut out, rec.gamma);
    }
    Ok((out, label))
}

fn bilinear(img: &SliceTW, m: usize, x: f64, y: f64) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let tap = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi as usize >= img.width || yi as usize >= img.height {
            0.0
        } else {
            img.get(xi as usize, yi as usize, m) as f64
        }
    };
    let v = tap(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + tap(x0 + 1.0, y0) * fx * (1.0 - fy)
        + tap(x0, y0 + 1.0) * (1.0 - fx) * fy
        + tap(x0 + 1.0, y0 + 1.0) * fx * fy;
    v as f32
}

fn intensity_gamma(img: &mut SliceTW, gamma: f64) {
    let (lo, hi) = img
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if hi <= lo {
        return;
    }
    let (lo, span) = (lo as f64, (hi - lo) as f64);
    for v in &mut img.data {
        let u = ((*v as f64 - lo) / span).clamp(0.0, 1.0);
        *v = (lo + span * u.powf(gamma)) as f32;
    }
}

/// Provenance written next to the four slice files of an exported episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub volume_id: String,
    pub supervoxel_id: u32,
    pub support_z: usize,
    pub query_z: usize,
    pub seed: u64,
    pub index: u64,
    pub transformed_side: TransformedSide,
    pub transform: Option<TransformRecord>,
    pub files: EpisodeFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFiles {
    pub support: String,
    pub support_label: String,
    pub query: String,
    pub query_label: String,
}

impl Default for EpisodeFiles {
    fn default() -> Self {
        Self {
            support: "support".into(),
            support_label: "support_label".into(),
            query: "query".into(),
            query_label: "query_label".into(),
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes an episode as four volgrid file pairs plus `manifest.json` into `dir`.
pub fn export_episode(ep: &Episode, source: &Volume4D, dir: &Path) -> Result<EpisodeManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = EpisodeFiles::default();
    let sp = source.spacing();
    let dt = source.frame_interval_s();
    save_slice(&ep.support, sp, dt, &dir.join(&files.support))?;
    save_mask(&ep.support_label, sp, &dir.join(&files.support_label))?;
    save_slice(&ep.query, sp, dt, &dir.join(&files.query))?;
    save_mask(&ep.query_label, sp, &dir.join(&files.query_label))?;
    let manifest = EpisodeManifest {
        volume_id: ep.volume_id.clone(),
        supervoxel_id: ep.supervoxel_id,
        support_z: ep.support_z,
        query_z: ep.query_z,
        seed: ep.seed,
        index: ep.index,
        transformed_side: ep.transformed_side,
        transform: ep.transform,
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads an episode written by [`export_episode`].
pub fn import_episode(dir: &Path) -> Result<Episode> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: EpisodeManifest = serde_json::from_slice(&text)?;
    let slice = |name: &str, z: usize| -> Result<SliceTW> {
        let v = crate::volgrid::load_volume(&dir.join(name))?;
        let d = v.dims();
        if d.depth != 1 {
            return Err(Error::Format(format!("{name}: expected a single slice")));
        }
        Ok(SliceTW {
            width: d.width,
            height: d.height,
            channels: v.channels(),
            data: v.into_data(),
            source_z: z,
            volume_id: m.volume_id.clone(),
        })
    };
    let support = slice(&m.files.support, m.support_z)?;
    let query = slice(&m.files.query, m.query_z)?;
    let (support_label, _) = crate::volgrid::load_mask(&dir.join(&m.files.support_label))?;
    let (query_label, _) = crate::volgrid::load_mask(&dir.join(&m.files.query_label))?;
    Ok(Episode {
        support,
        support_label,
        query,
        query_label,
        supervoxel_id: m.supervoxel_id,
        volume_id: m.volume_id,
        support_z: m.support_z,
        query_z: m.query_z,
        transformed_side: m.transformed_side,
        transform: m.transform,
        seed: m.seed,
        index: m.index,
    })
}
