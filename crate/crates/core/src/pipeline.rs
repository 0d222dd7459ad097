//! End-to-end experiment wiring: smoothing, perfusion maps, supervoxels,
//! episodes, head training, inference and evaluation for the three arms.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episodes::{Episode, EpisodeConfig, EpisodeSampler};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, RunMetrics, SweepRow};
use crate::perfusion::{compute_pms, make_phantom, PhantomSpec};
use crate::preproc::{fill_outside, gaussian_smooth, zscore_channels};
use crate::proto::{
    infer_volume, train, EncoderConfig, HeadParams, PreparedEpisode, Projection,
    ThresholdParams, TrainConfig,
};
use crate::supervox::{felzenszwalb_4d, SupervoxelParams};
use crate::volgrid::{
    extract_slice, load_mask, load_volume, save_mask, save_volume, BinaryMask, LabelVolume,
    SliceTW, Volume4D,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Proposed,
    CtpBaseline,
    PmsBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channels {
    Pms,
    Ctp,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Proposed, Arm::CtpBaseline, Arm::PmsBaseline];

    pub fn supervoxel_source(self) -> Channels {
        match self {
            Arm::Proposed | Arm::PmsBaseline => Channels::Pms,
            Arm::CtpBaseline => Channels::Ctp,
        }
    }

    pub fn model_input(self) -> Channels {
        match self {
            Arm::Proposed | Arm::CtpBaseline => Channels::Ctp,
            Arm::PmsBaseline => Channels::Pms,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Proposed => "proposed",
            Arm::CtpBaseline => "ctp-baseline",
            Arm::PmsBaseline => "pms-baseline",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown arm {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub arm: Arm,
    /// Filled from `arm` when absent; must agree with it when present.
    pub supervoxel_source: Option<Channels>,
    pub model_input: Option<Channels>,
    /// In-plane Gaussian sigma (voxels) applied to the CTP before anything else; 0 disables.
    pub smooth_sigma_xy: f64,
    pub supervoxel: SupervoxelParams,
    pub episodes: EpisodeConfig,
    pub episodes_per_volume: usize,
    /// Crop training episodes to the in-plane bounding box of the brain mask.
    pub crop_to_brain: bool,
    pub encoder: EncoderConfig,
    pub threshold: ThresholdParams,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            arm: Arm::Proposed,
            supervoxel_source: None,
            model_input: None,
            smooth_sigma_xy: 1.0,
            supervoxel: SupervoxelParams {
                rho: 30.0,
                ..Default::default()
            },
            episodes: EpisodeConfig::default(),
            episodes_per_volume: 10,
            crop_to_brain: true,
            encoder: EncoderConfig::default(),
            threshold: ThresholdParams {
                kappa: 10.0,
                ..Default::default()
            },
            train: TrainConfig {
                steps: 300,
                step_size: 0.2,
                batch_size: 4,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn for_arm(arm: Arm) -> Self {
        Self {
            arm,
            ..Default::default()
        }
        .effective()
        .expect("presets are consistent")
    }

    /// Validates and fills the arm-derived channel choices.
    pub fn effective(&self) -> Result<Self> {
        let mut c = self.clone();
        for (given, want, what) in [
            (&mut c.supervoxel_source, self.arm.supervoxel_source(), "supervoxel_source"),
            (&mut c.model_input, self.arm.model_input(), "model_input"),
        ] {
            match given {
                Some(g) if *g != want => {
                    return Err(Error::InvalidParam(format!(
                        "arm {} requires {what} {want:?}, config has {g:?}",
                        self.arm
                    )))
                }
                _ => *given = Some(want),
            }
        }
        if !(c.smooth_sigma_xy >= 0.0 && c.smooth_sigma_xy.is_finite()) {
            return Err(Error::InvalidParam("smooth_sigma_xy must be >= 0".into()));
        }
        if c.episodes_per_volume == 0 {
            return Err(Error::InvalidParam("episodes_per_volume must be >= 1".into()));
        }
        c.supervoxel.validate()?;
        c.episodes.transform.validate()?;
        c.encoder.recipe.validate()?;
        c.threshold.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    /// Parses a JSON config. Keys that are left out keep their
    /// [`PipelineConfig::default`] values at every nesting level, so
    /// `{"train": {"steps": 50}}` leaves the other training settings alone.
    pub fn from_json(text: &[u8]) -> Result<Self> {
        let user: serde_json::Value = serde_json::from_slice(text)?;
        let mut merged = serde_json::to_value(Self::default())?;
        merge_json(&mut merged, user);
        Ok(serde_json::from_value(merged)?)
    }

    fn source(&self) -> Channels {
        self.supervoxel_source.unwrap_or(self.arm.supervoxel_source())
    }

    fn input(&self) -> Channels {
        self.model_input.unwrap_or(self.arm.model_input())
    }
}

fn merge_json(base: &mut serde_json::Value, over: serde_json::Value) {
    use serde_json::Value;
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// One CTP study with its brain mask and, when known, the lesion mask.
#[derive(Debug, Clone)]
pub struct Study {
    pub id: String,
    pub group: String,
    pub ctp: Volume4D,
    pub brain_mask: BinaryMask,
    pub lesion_mask: Option<BinaryMask>,
}

pub const CTP_FILE: &str = "ctp";
pub const BRAIN_FILE: &str = "brain_mask";
pub const LESION_FILE: &str = "lesion_mask";
pub const GROUP_WIS: &str = "wis";
pub const GROUP_LESION: &str = "lesion";

/// Phantom `spec` as a study; lesion-free phantoms are tagged as the
/// without-stroke group.
pub fn phantom_study(spec: &PhantomSpec) -> Result<Study> {
    let p = make_phantom(spec)?;
    let group = if p.lesion_mask.is_empty() {
        GROUP_WIS
    } else {
        GROUP_LESION
    };
    Ok(Study {
        id: format!("phantom_{:04}", spec.seed),
        group: group.into(),
        ctp: p.ctp,
        brain_mask: p.brain_mask,
        lesion_mask: Some(p.lesion_mask),
    })
}

/// `count` phantoms sharing `base` except for consecutive seeds from `base.seed`.
pub fn phantom_cohort(base: &PhantomSpec, count: usize) -> Result<Vec<Study>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            phantom_study(&PhantomSpec {
                seed: base.seed + i,
                ..base.clone()
            })
        })
        .collect()
}

/// Writes `ctp`, `brain_mask` and, when present, `lesion_mask` into `dir`.
pub fn save_study(study: &Study, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sp = study.ctp.spacing();
    save_volume(&study.ctp, &dir.join(CTP_FILE))?;
    save_mask(&study.brain_mask, sp, &dir.join(BRAIN_FILE))?;
    if let Some(l) = &study.lesion_mask {
        save_mask(l, sp, &dir.join(LESION_FILE))?;
    }
    Ok(())
}

/// Reads a study written by [`save_study`]; its id is the directory name.
pub fn load_study(dir: &Path, group: &str) -> Result<Study> {
    let ctp = load_volume(&dir.join(CTP_FILE))?;
    let (brain_mask, _) = load_mask(&dir.join(BRAIN_FILE))?;
    let lesion = dir.join(LESION_FILE);
    let lesion_mask = if crate::volgrid::file_pair(&lesion).0.exists() {
        Some(load_mask(&lesion)?.0)
    } else {
        None
    };
    Ok(Study {
        id: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        group: group.into(),
        ctp,
        brain_mask,
        lesion_mask,
    })
}

/// Study subdirectories of `root` (those holding a CTP header), sorted by name.
pub fn study_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| crate::volgrid::file_pair(&p.join(CTP_FILE)).0.exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Studies under `root`, or a default phantom cohort seeded from `seed` when
/// no directory is given. Loaded studies are grouped by whether their lesion
/// mask is empty.
pub fn load_studies_or_synth(root: Option<&Path>, count: usize, seed: u64) -> Result<Vec<Study>> {
    match root {
        None => phantom_cohort(
            &PhantomSpec {
                seed,
                ..Default::default()
            },
            count,
        ),
        Some(r) => study_dirs(r)?
            .iter()
            .map(|d| {
                let mut s = load_study(d, GROUP_LESION)?;
                if s.lesion_mask.as_ref().is_none_or(|l| l.is_empty()) {
                    s.group = GROUP_WIS.into();
                }
                Ok(s)
            })
            .collect(),
    }
}

/// A study after smoothing, with its perfusion maps.
#[derive(Debug, Clone)]
pub struct PreparedStudy {
    pub id: String,
    pub group: String,
    pub ctp: Volume4D,
    pub pms: Volume4D,
    pub brain_mask: BinaryMask,
    pub lesion_mask: Option<BinaryMask>,
}

impl PreparedStudy {
    pub fn channels(&self, c: Channels) -> &Volume4D {
        match c {
            Channels::Ctp => &self.ctp,
            Channels::Pms => &self.pms,
        }
    }
}

pub fn prepare_study(study: &Study, cfg: &PipelineConfig) -> Result<PreparedStudy> {
    study.brain_mask.check_dims(study.ctp.dims())?;
    if let Some(l) = &study.lesion_mask {
        l.check_dims(study.ctp.dims())?;
    }
    let ctp = if cfg.smooth_sigma_xy > 0.0 {
        gaussian_smooth(&study.ctp, cfg.smooth_sigma_xy, 0.0)?
    } else {
        study.ctp.clone()
    };
    let pms = compute_pms(&ctp, &study.brain_mask)?;
    Ok(PreparedStudy {
        id: study.id.clone(),
        group: study.group.clone(),
        ctp,
        pms,
        brain_mask: study.brain_mask.clone(),
        lesion_mask: study.lesion_mask.clone(),
    })
}

pub fn supervoxels(study: &PreparedStudy, cfg: &PipelineConfig) -> Result<LabelVolume> {
    felzenszwalb_4d(study.channels(cfg.source()), &cfg.supervoxel, &study.brain_mask)
}

/// Model input channels z-scored inside the brain and zero outside.
pub fn model_input(study: &PreparedStudy, cfg: &PipelineConfig) -> Result<Volume4D> {
    normalize_input(study.channels(cfg.input()), &study.brain_mask)
}

pub fn normalize_input(v: &Volume4D, brain: &BinaryMask) -> Result<Volume4D> {
    fill_outside(&zscore_channels(v, brain)?, brain, 0.0)
}

/// Episodes `first_index..first_index + n` of the run seeded by `seed`.
pub fn sample_episodes(
    input: &Volume4D,
    labels: &LabelVolume,
    cfg: &PipelineConfig,
    volume_id: &str,
    first_index: u64,
    n: usize,
) -> Result<Vec<Episode>> {
    let sampler = EpisodeSampler::new(input, labels, cfg.episodes.clone(), volume_id)?;
    (first_index..first_index + n as u64)
        .into_par_iter()
        .map(|i| sampler.sample(cfg.seed, i))
        .collect()
}

/// Encoder the trainer starts from: the configured one, with an identity
/// projection added when the projection is trained but none is given.
pub fn initial_encoder(cfg: &PipelineConfig, channels: usize) -> EncoderConfig {
    let mut enc = cfg.encoder.clone();
    if cfg.train.train_projection && enc.projection.is_none() {
        enc.projection = Some(Projection::identity(enc.recipe.len(channels)));
    }
    enc
}

pub fn train_head(episodes: &[Episode], cfg: &PipelineConfig) -> Result<(HeadParams, Vec<f64>)> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::InvalidParam("no training episodes".into()))?;
    let enc = initial_encoder(cfg, first.support.channels);
    let prepared: Vec<PreparedEpisode> = episodes
        .par_iter()
        .map(|e| PreparedEpisode::new(e, &enc))
        .collect::<Result<_>>()?;
    let r = train(&prepared, &enc, &cfg.threshold, &cfg.train)?;
    Ok((
        HeadParams {
            encoder: r.encoder,
            threshold: r.threshold,
        },
        r.losses,
    ))
}

/// Support image and label on slice `z` (the middle slice when `None`).
pub fn support_pair(
    input: &Volume4D,
    label: &BinaryMask,
    z: Option<usize>,
) -> Result<(SliceTW, BinaryMask)> {
    let z = z.unwrap_or(input.dims().depth / 2);
    let img = extract_slice(input, z)?;
    let lbl = label.slice(z)?;
    if lbl.is_empty() {
        return Err(Error::EmptyMask("support label"));
    }
    Ok((img, lbl))
}

/// Prediction for one query, restricted to its brain mask.
pub fn segment(
    support: (&SliceTW, &BinaryMask),
    query: &Volume4D,
    brain: &BinaryMask,
    head: &HeadParams,
) -> Result<BinaryMask> {
    infer_volume(support, query, &head.encoder, &head.threshold)?.and(brain)
}

/// In-plane bounding box `[x0, y0, x1, y1]` (exclusive ends) of the mask over all slices.
pub fn brain_box(mask: &BinaryMask) -> Option<[usize; 4]> {
    let d = mask.dims();
    let mut bx: Option<[usize; 4]> = None;
    for (i, _) in mask.bits().iter().enumerate().filter(|(_, &b)| b) {
        let (x, y, _) = d.coords(i);
        let b = bx.get_or_insert([x, y, x + 1, y + 1]);
        b[0] = b[0].min(x);
        b[1] = b[1].min(y);
        b[2] = b[2].max(x + 1);
        b[3] = b[3].max(y + 1);
    }
    bx
}

fn crop_slice(s: &SliceTW, [x0, y0, x1, y1]: [usize; 4]) -> SliceTW {
    let (w, h) = (x1 - x0, y1 - y0);
    let mut data = Vec::with_capacity(w * h * s.channels);
    for m in 0..s.channels {
        for y in y0..y1 {
            for x in x0..x1 {
                data.push(s.get(x, y, m));
            }
        }
    }
    SliceTW {
        width: w,
        height: h,
        channels: s.channels,
        data,
        source_z: s.source_z,
        volume_id: s.volume_id.clone(),
    }
}

fn crop_mask(m: &BinaryMask, [x0, y0, x1, y1]: [usize; 4]) -> Result<BinaryMask> {
    let w = m.dims().width;
    let bits = (y0..y1)
        .flat_map(|y| (x0..x1).map(move |x| x + w * y))
        .map(|i| m.bits()[i])
        .collect();
    BinaryMask::new_2d(x1 - x0, y1 - y0, bits)
}

/// Restricts both sides of an episode to an in-plane box.
pub fn crop_episode(ep: &Episode, bx: [usize; 4]) -> Result<Episode> {
    let support_label = crop_mask(&ep.support_label, bx)?;
    if support_label.is_empty() {
        return Ok(ep.clone());
    }
    Ok(Episode {
        support: crop_slice(&ep.support, bx),
        support_label,
        query: crop_slice(&ep.query, bx),
        query_label: crop_mask(&ep.query_label, bx)?,
        ..ep.clone()
    })
}

/// Index of the first study whose lesion crosses its middle slice.
pub fn pick_support(studies: &[Study]) -> Option<usize> {
    studies.iter().position(|s| {
        s.lesion_mask
            .as_ref()
            .and_then(|l| l.slice(l.dims().depth / 2).ok())
            .is_some_and(|m| !m.is_empty())
    })
}

#[derive(Debug, Clone)]
pub struct CohortResult {
    /// One row per query study, in study order.
    pub runs: Vec<RunMetrics>,
    pub predictions: Vec<BinaryMask>,
    /// Supervoxel count of every study, support included.
    pub supervoxel_counts: Vec<usize>,
    pub head: HeadParams,
    pub losses: Vec<f64>,
}

impl CohortResult {
    pub fn mean_dice(&self) -> f64 {
        mean_std(&self.runs.iter().map(|r| r.dice).collect::<Vec<_>>()).map_or(0.0, |m| m.0)
    }
}

/// Self-supervised training on episodes pooled from every study, then
/// segmentation of every other study from the middle slice of
/// `studies[support]`. Only the support study needs a lesion mask for
/// inference; queries without one are not scored.
pub fn run_cohort(studies: &[Study], support: usize, cfg: &PipelineConfig) -> Result<CohortResult> {
    let cfg = cfg.effective()?;
    if support >= studies.len() {
        return Err(Error::OutOfRange {
            index: support,
            len: studies.len(),
        });
    }
    let prepared: Vec<PreparedStudy> = studies
        .par_iter()
        .map(|s| prepare_study(s, &cfg))
        .collect::<Result<_>>()?;
    run_prepared(&prepared, support, &cfg)
}

pub fn run_prepared(
    prepared: &[PreparedStudy],
    support: usize,
    cfg: &PipelineConfig,
) -> Result<CohortResult> {
    let inputs: Vec<Volume4D> = prepared
        .par_iter()
        .map(|s| model_input(s, cfg))
        .collect::<Result<_>>()?;
    let labels: Vec<LabelVolume> = prepared
        .par_iter()
        .map(|s| supervoxels(s, cfg))
        .collect::<Result<_>>()?;

    let per = cfg.episodes_per_volume;
    let batches: Vec<Option<Vec<Episode>>> = (0..prepared.len())
        .into_par_iter()
        .map(|k| {
            match sample_episodes(&inputs[k], &labels[k], cfg, &prepared[k].id, (k * per) as u64, per) {
                Ok(e) => Ok(Some(e)),
                Err(Error::NoEligibleSupervoxel) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    // interleave volumes so that consecutive steps see different studies
    let boxes: Vec<Option<[usize; 4]>> = prepared.iter().map(|s| brain_box(&s.brain_mask)).collect();
    let mut episodes = Vec::new();
    for j in 0..per {
        for (k, b) in batches.iter().enumerate() {
            if let Some(b) = b {
                let ep = match (cfg.crop_to_brain, boxes[k]) {
                    (true, Some(bx)) => crop_episode(&b[j], bx)?,
                    _ => b[j].clone(),
                };
                episodes.push(ep);
            }
        }
    }
    if episodes.is_empty() {
        return Err(Error::NoEligibleSupervoxel);
    }
    let (head, losses) = train_head(&episodes, cfg)?;

    let s = &prepared[support];
    let lesion = s
        .lesion_mask
        .as_ref()
        .ok_or(Error::EmptyMask("support lesion"))?;
    let (s_img, s_lbl) = support_pair(&inputs[support], lesion, None)?;

    let queries: Vec<usize> = (0..prepared.len()).filter(|&k| k != support).collect();
    let predictions: Vec<BinaryMask> = queries
        .par_iter()
        .map(|&k| segment((&s_img, &s_lbl), &inputs[k], &prepared[k].brain_mask, &head))
        .collect::<Result<_>>()?;
    let mut runs = Vec::new();
    for (&k, pred) in queries.iter().zip(&predictions) {
        if let Some(gt) = &prepared[k].lesion_mask {
            runs.push(RunMetrics::evaluate(
                prepared[k].id.clone(),
                prepared[k].group.clone(),
                pred,
                gt,
                prepared[k].ctp.spacing(),
            )?);
        }
    }
    Ok(CohortResult {
        runs,
        predictions,
        supervoxel_counts: labels.iter().map(|l| l.num_labels()).collect(),
        head,
        losses,
    })
}

/// Runs the cohort once per rho. Rows follow the order of `rhos`.
pub fn rho_sweep(
    studies: &[Study],
    support: usize,
    rhos: &[f64],
    cfg: &PipelineConfig,
) -> Result<Vec<SweepRow>> {
    if rhos.len() < 2 {
        return Err(Error::InvalidParam("a sweep needs at least two rho values".into()));
    }
    let cfg = cfg.effective()?;
    let prepared: Vec<PreparedStudy> = studies
        .par_iter()
        .map(|s| prepare_study(s, &cfg))
        .collect::<Result<_>>()?;
    rhos.iter()
        .map(|&rho| {
            let mut c = cfg.clone();
            c.supervoxel.rho = rho;
            c.supervoxel.validate()?;
            let r = run_prepared(&prepared, support, &c)?;
            let ds: Vec<f64> = r.runs.iter().map(|m| m.dice).collect();
            let dv: Vec<f64> = r.runs.iter().map(|m| m.delta_v_ml).collect();
            let (mean_ds, std_ds) = mean_std(&ds).unwrap_or((0.0, 0.0));
            let (mean_dv, std_dv) = mean_std(&dv).unwrap_or((0.0, 0.0));
            let counts: Vec<f64> = r.supervoxel_counts.iter().map(|&c| c as f64).collect();
            Ok(SweepRow {
                rho,
                mean_ds,
                std_ds,
                mean_dv,
                std_dv,
                mean_svx_count: mean_std(&counts).map_or(0.0, |m| m.0),
            })
        })
        .collect()
}

/// Mean supervoxel count over `volumes` at `params`.
pub fn mean_supervoxel_count(
    volumes: &[(&Volume4D, &BinaryMask)],
    params: &SupervoxelParams,
) -> Result<f64> {
    let counts: Vec<usize> = volumes
        .par_iter()
        .map(|(v, m)| felzenszwalb_4d(v, params, m).map(|l| l.num_labels()))
        .collect::<Result<_>>()?;
    Ok(counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64)
}

/// Bisects rho on a log scale within `[lo, hi]` so that the mean supervoxel
/// count over `volumes` comes closest to `target`.
pub fn tune_rho(
    volumes: &[(&Volume4D, &BinaryMask)],
    params: &SupervoxelParams,
    target: f64,
    (lo, hi): (f64, f64),
    iterations: usize,
) -> Result<f64> {
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidParam(format!("bad rho bracket [{lo}, {hi}]")));
    }
    let count = |rho: f64| {
        mean_supervoxel_count(
            volumes,
            &SupervoxelParams {
                rho,
                ..params.clone()
            },
        )
    };
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut best = (f64::INFINITY, lo);
    for _ in 0..iterations {
        let mid = 0.5 * (a + b);
        let c = count(mid.exp())?;
        if (c - target).abs() < best.0 {
            best = ((c - target).abs(), mid.exp());
        }
        // counts fall as rho grows
        if c > target {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(best.1)
}
