//! Prototype segmentation head.
//!
//! A slice is encoded into per-pixel feature vectors (handcrafted local
//! statistics followed by an optional trainable linear projection). The
//! support foreground is pooled into a prototype, every query pixel is scored
//! by negative cosine similarity to it, and pixels scoring below a learned
//! threshold `T` are foreground. Training uses a sigmoid relaxation
//! `sigmoid(-kappa * (S - T))` of that threshold.

mod train;

pub use train::{
    loss_gradients, train, Gradients, PreparedEpisode, TrainConfig, TrainResult,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{extract_slice, BinaryMask, Dims3, SliceTW, Volume4D};

/// Norms below this are treated as zero vectors; their score is 0.
pub const NORM_EPS: f64 = 1e-12;
/// Probability clamp inside the loss.
pub const PROB_EPS: f64 = 1e-7;

/// Per-pixel feature vectors, stored pixel-major (`d` values per pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn scaled(&self, c: f64) -> FeatureMap {
        FeatureMap {
            data: self.data.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }
}

/// Which handcrafted features are stacked, block by block, for every input channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureRecipe {
    pub raw: bool,
    pub mean_windows: Vec<usize>,
    pub std_windows: Vec<usize>,
}

impl Default for FeatureRecipe {
    fn default() -> Self {
        Self {
            raw: true,
            mean_windows: vec![3, 7],
            std_windows: vec![3],
        }
    }
}

impl FeatureRecipe {
    pub fn raw_only() -> Self {
        Self {
            raw: true,
            mean_windows: Vec::new(),
            std_windows: Vec::new(),
        }
    }

    fn blocks(&self) -> usize {
        self.raw as usize + self.mean_windows.len() + self.std_windows.len()
    }

    /// Feature length for `channels` input channels.
    pub fn len(&self, channels: usize) -> usize {
        self.blocks() * channels
    }

    pub fn is_empty(&self) -> bool {
        self.blocks() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidParam("feature recipe selects no features".into()));
        }
        if let Some(w) = self
            .mean_windows
            .iter()
            .chain(&self.std_windows)
            .find(|&&w| w == 0 || w % 2 == 0)
        {
            return Err(Error::InvalidParam(format!("window sizes must be odd, got {w}")));
        }
        Ok(())
    }
}

/// Affine map `W·φ + b` from recipe features to the embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub d_out: usize,
    pub d_in: usize,
    /// Row-major `d_out × d_in`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Projection {
    pub fn identity(d: usize) -> Self {
        let mut weights = vec![0.0; d * d];
        for i in 0..d {
            weights[i * d + i] = 1.0;
        }
        Self {
            d_out: d,
            d_in: d,
            weights,
            bias: vec![0.0; d],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_out == 0
            || self.weights.len() != self.d_out * self.d_in
            || self.bias.len() != self.d_out
        {
            return Err(Error::InvalidParam(format!(
                "projection shape {}x{} with {} weights and {} biases",
                self.d_out,
                self.d_in,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("projection holds non-finite values".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn apply_into(&self, phi: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * self.d_in..(r + 1) * self.d_in];
            *o = self.bias[r] + row.iter().zip(phi).map(|(w, p)| w * p).sum::<f64>();
        }
    }

    pub fn apply(&self, features: &FeatureMap) -> Result<FeatureMap> {
        if features.dim != self.d_in {
            return Err(Error::DimMismatch(format!(
                "projection expects {} features, got {}",
                self.d_in, features.dim
            )));
        }
        let mut data = vec![0.0; features.pixels() * self.d_out];
        data.par_chunks_mut(self.d_out)
            .enumerate()
            .for_each(|(i, out)| self.apply_into(features.pixel(i), out));
        Ok(FeatureMap {
            width: features.width,
            height: features.height,
            dim: self.d_out,
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub recipe: FeatureRecipe,
    pub projection: Option<Projection>,
}

impl EncoderConfig {
    /// Recipe with an identity projection sized for `channels` inputs.
    pub fn with_identity_projection(recipe: FeatureRecipe, channels: usize) -> Self {
        let d = recipe.len(channels);
        Self {
            recipe,
            projection: Some(Projection::identity(d)),
        }
    }

    pub fn output_dim(&self, channels: usize) -> usize {
        self.projection
            .as_ref()
            .map_or_else(|| self.recipe.len(channels), |p| p.d_out)
    }
}

/// Handcrafted features only, before any projection.
pub fn base_features(x: &SliceTW, recipe: &FeatureRecipe) -> Result<FeatureMap> {
    recipe.validate()?;
    let (w, h, m) = (x.width, x.height, x.channels);
    let dim = recipe.len(m);
    let n = w * h;
    let mut data = vec![0.0; n * dim];
    let mut block = 0;
    let mut put = |block: usize, ch: usize, values: &[f64]| {
        for (i, v) in values.iter().enumerate() {
            data[i * dim + block * m + ch] = *v;
        }
    };
    if recipe.raw {
        for c in 0..m {
            let vals: Vec<f64> = x.channel(c).iter().map(|&v| v as f64).collect();
            put(block, c, &vals);
        }
        block += 1;
    }
    for &win in &recipe.mean_windows {
        for c in 0..m {
            put(block, c, &window_stat(x.channel(c), w, h, win, false));
        }
        block += 1;
    }
    for &win in &recipe.std_windows {
        for c in 0..m {
            put(block, c, &window_stat(x.channel(c), w, h, win, true));
        }
        block += 1;
    }
    Ok(FeatureMap {
        width: w,
        height: h,
        dim,
        data,
    })
}

/// Local mean or population standard deviation over a `win × win` window
/// clipped to the slice. Windows holding a single repeated value have std 0.
fn window_stat(ch: &[f32], w: usize, h: usize, win: usize, std: bool) -> Vec<f64> {
    let r = win / 2;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut sum = 0.0;
            let mut count = 0.0;
            let first = ch[x0 + w * y0];
            let mut uniform = true;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    let v = ch[xx + w * yy];
                    uniform &= v == first;
                    sum += v as f64;
                    count += 1.0;
                }
            }
            let mean = sum / count;
            out[x + w * y] = if !std {
                mean
            } else if uniform {
                0.0
            } else {
                let mut ss = 0.0;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        ss += (ch[xx + w * yy] as f64 - mean).powi(2);
                    }
                }
                (ss / count).sqrt()
            };
        }
    }
    out
}

/// Encodes a slice with the recipe and, when present, the projection.
pub fn encode(x: &SliceTW, cfg: &EncoderConfig) -> Result<FeatureMap> {
    let phi = base_features(x, &cfg.recipe)?;
    match &cfg.projection {
        Some(p) => {
            p.validate()?;
            p.apply(&phi)
        }
        None => Ok(phi),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype(pub Vec<f64>);

impl Prototype {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn check_plane(width: usize, height: usize, mask: &BinaryMask) -> Result<()> {
    mask.check_dims(Dims3::new(width, height, 1))
}

/// Masked average pooling of support features.
pub fn map_prototype(features: &FeatureMap, mask: &BinaryMask) -> Result<Prototype> {
    check_plane(features.width, features.height, mask)?;
    let mut p = vec![0.0; features.dim];
    let mut n = 0usize;
    for (i, &fg) in mask.bits().iter().enumerate() {
        if fg {
            n += 1;
            for (acc, v) in p.iter_mut().zip(features.pixel(i)) {
                *acc += v;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask("support label"));
    }
    p.iter_mut().for_each(|v| *v /= n as f64);
    Ok(Prototype(p))
}

/// A scalar per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Negative cosine similarity; lower means more similar to the prototype.
pub type ScoreMap = Plane;
/// Foreground probability in (0, 1).
pub type SoftMask = Plane;

#[inline]
pub(crate) fn cosine(f: &[f64], p: &[f64], p_norm: f64) -> Option<(f64, f64)> {
    let f_norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if f_norm < NORM_EPS || p_norm < NORM_EPS {
        return None;
    }
    let dot: f64 = f.iter().zip(p).map(|(a, b)| a * b).sum();
    Some(((dot / (f_norm * p_norm)).clamp(-1.0, 1.0), f_norm))
}

pub fn anomaly_scores(query: &FeatureMap, p: &Prototype) -> Result<ScoreMap> {
    if query.dim != p.0.len() {
        return Err(Error::DimMismatch(format!(
            "prototype has {} features, query {}",
            p.0.len(),
            query.dim
        )));
    }
    let pn = p.norm();
    let data = (0..query.pixels())
        .into_par_iter()
        .map(|i| cosine(query.pixel(i), &p.0, pn).map_or(0.0, |(c, _)| -c))
        .collect();
    Ok(Plane {
        width: query.width,
        height: query.height,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdParams {
    #[serde(rename = "T")]
    pub t: f64,
    pub kappa: f64,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self { t: -0.4, kappa: 0.5 }
    }
}

impl ThresholdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa.is_finite() && self.kappa > 0.0 && self.t.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "threshold needs finite T and kappa > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn soft_mask(scores: &ScoreMap, tp: &ThresholdParams) -> Result<SoftMask> {
    tp.validate()?;
    Ok(Plane {
        width: scores.width,
        height: scores.height,
        data: scores
            .data
            .iter()
            .map(|s| sigmoid(-tp.kappa * (s - tp.t)))
            .collect(),
    })
}

/// Foreground where `S < T`, the zero-crossing of the soft mask.
pub fn hard_mask(scores: &ScoreMap, tp: &ThresholdParams) -> BinaryMask {
    BinaryMask::new_2d(
        scores.width,
        scores.height,
        scores.data.iter().map(|&s| s < tp.t).collect(),
    )
    .expect("plane dims")
}

/// Class weights `(w_fg, w_bg)`; both 1 when either class is absent.
pub(crate) fn class_weights(label: &BinaryMask) -> (f64, f64) {
    let n = label.bits().len() as f64;
    let fg = label.count() as f64;
    let bg = n - fg;
    if fg == 0.0 || bg == 0.0 {
        (1.0, 1.0)
    } else {
        (n / (2.0 * fg), n / (2.0 * bg))
    }
}

/// Class-balanced binary cross-entropy with probabilities clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub fn episode_loss(pred: &SoftMask, label: &BinaryMask) -> Result<f64> {
    check_plane(pred.width, pred.height, label)?;
    let (w_fg, w_bg) = class_weights(label);
    let n = pred.data.len() as f64;
    let total: f64 = pred
        .data
        .iter()
        .zip(label.bits())
        .map(|(&y, &l)| {
            let y = y.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if l {
                w_fg * y.ln()
            } else {
                w_bg * (1.0 - y).ln()
            }
        })
        .sum();
    Ok(-total / n)
}

/// Learned head parameters as serialized to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub encoder: EncoderConfig,
    pub threshold: ThresholdParams,
}

/// Segments every slice of `query` against the prototype of the support pair.
pub fn infer_volume(
    support: (&SliceTW, &BinaryMask),
    query: &Volume4D,
    cfg: &EncoderConfig,
    tp: &ThresholdParams,
) -> Result<BinaryMask> {
    tp.validate()?;
    let (s_img, s_lbl) = support;
    if s_lbl.is_empty() {
        return Err(Error::EmptyMask("support label"));
    }
    if s_img.channels != query.channels() {
        return Err(Error::DimMismatch(format!(
            "support has {} channels, query {}",
            s_img.channels,
            query.channels()
        )));
    }
    let d = query.dims();
    if (s_img.width, s_img.height) != (d.width, d.height) {
        return Err(Error::DimMismatch("support and query slice sizes differ".into()));
    }
    let proto = map_prototype(&encode(s_img, cfg)?, s_lbl)?;
    let slices: Vec<BinaryMask> = (0..d.depth)
        .into_par_iter()
        .map(|z| {
            let f = encode(&extract_slice(query, z)?, cfg)?;
            Ok(hard_mask(&anomaly_scores(&f, &proto)?, tp))
        })
        .collect::<Result<_>>()?;
    BinaryMask::stack(&slices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn slice(w: usize, h: usize, m: usize, data: Vec<f32>) -> SliceTW {
        SliceTW {
            width: w,
            height: h,
            channels: m,
            data,
            source_z: 0,
            volume_id: String::new(),
        }
    }

    fn fmap(w: usize, h: usize, dim: usize, data: Vec<f64>) -> FeatureMap {
        FeatureMap {
            width: w,
            height: h,
            dim,
            data,
        }
    }

    #[test]
    fn identity_encoder_returns_input_channels() {
        let x = slice(3, 2, 2, (0..12).map(|v| v as f32 * 1.5).collect());
        let cfg = EncoderConfig::with_identity_projection(FeatureRecipe::raw_only(), 2);
        let f = encode(&x, &cfg).unwrap();
        for i in 0..6 {
            assert_eq!(f.pixel(i), &[x.data[i] as f64, x.data[i + 6] as f64]);
        }
    }

    #[test]
    fn constant_image_has_zero_local_std() {
        let x = slice(5, 4, 2, vec![0.1; 40]);
        let recipe = FeatureRecipe {
            raw: false,
            mean_windows: vec![],
            std_windows: vec![3, 5],
        };
        let f = base_features(&x, &recipe).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_mean_matches_hand_average() {
        let x = slice(8, 8, 3, (0..192).map(|i| ((i * 37) % 23) as f32 - 7.0).collect());
        let f = base_features(&x, &FeatureRecipe::default()).unwrap();
        let (px, py) = (4, 3);
        for c in 0..3 {
            let mut s = 0.0;
            for dy in [-1i32, 0, 1] {
                for dx in [-1i32, 0, 1] {
                    s += x.get((px + dx) as usize, (py + dy) as usize, c) as f64;
                }
            }
            let got = f.pixel(px as usize + 8 * py as usize)[3 + c];
            assert!((got - s / 9.0).abs() < 1e-12);
        }
        assert_eq!(f.dim, 12);
    }

    #[test]
    fn recipe_validation() {
        let bad = FeatureRecipe {
            mean_windows: vec![4],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let x = slice(2, 2, 1, vec![0.0; 4]);
        let cfg = EncoderConfig {
            projection: Some(Projection::identity(3)),
            ..Default::default()
        };
        assert!(matches!(encode(&x, &cfg), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn prototype_examples() {
        let f = fmap(2, 1, 2, vec![1.0, 3.0, 3.0, 5.0]);
        let both = BinaryMask::new_2d(2, 1, vec![true, true]).unwrap();
        assert_eq!(map_prototype(&f, &both).unwrap().0, vec![2.0, 4.0]);
        let one = BinaryMask::new_2d(2, 1, vec![false, true]).unwrap();
        assert_eq!(map_prototype(&f, &one).unwrap().0, vec![3.0, 5.0]);
        let none = BinaryMask::new_2d(2, 1, vec![false, false]).unwrap();
        assert!(matches!(map_prototype(&f, &none), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn score_examples() {
        let p = Prototype(vec![1.0, 2.0]);
        let q = fmap(4, 1, 2, vec![1.0, 2.0, -2.0, 1.0, -1.0, -2.0, 0.0, 0.0]);
        let s = anomaly_scores(&q, &p).unwrap();
        assert!((s.data[0] + 1.0).abs() < 1e-15);
        assert!(s.data[1].abs() < 1e-15);
        assert!((s.data[2] - 1.0).abs() < 1e-15);
        assert_eq!(s.data[3], 0.0);
    }

    #[test]
    fn soft_mask_examples() {
        let tp = ThresholdParams { t: 0.3, kappa: 0.5 };
        let s = Plane {
            width: 3,
            height: 1,
            data: vec![0.3, 2.3, -1.0],
        };
        let y = soft_mask(&s, &tp).unwrap();
        assert_eq!(y.data[0], 0.5);
        assert!((y.data[1] - 0.2689414213699951).abs() < 1e-15);
        let sharp = soft_mask(&s, &ThresholdParams { t: 0.0, kappa: 200.0 }).unwrap();
        assert!(sharp.data[2] > 1.0 - 1e-12);
        assert!(soft_mask(&s, &ThresholdParams { t: 0.0, kappa: 0.0 }).is_err());
    }

    #[test]
    fn loss_examples() {
        let lbl = BinaryMask::new_2d(4, 1, vec![true, false, false, false]).unwrap();
        let perfect = Plane {
            width: 4,
            height: 1,
            data: vec![1.0, 0.0, 0.0, 0.0],
        };
        let l = episode_loss(&perfect, &lbl).unwrap();
        assert!((l - (-(1.0 - PROB_EPS).ln())).abs() < 1e-12);
        let half = Plane {
            data: vec![0.5; 4],
            ..perfect.clone()
        };
        assert!((episode_loss(&half, &lbl).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let anti = Plane {
            data: vec![0.2, 0.9, 0.7, 0.6],
            ..perfect.clone()
        };
        assert!(episode_loss(&anti, &lbl).unwrap() >= std::f64::consts::LN_2);
        let all_bg = BinaryMask::new_2d(4, 1, vec![false; 4]).unwrap();
        assert!((episode_loss(&half, &all_bg).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn inference_on_replicated_slice() {
        let d = Dims3::new(6, 5, 4);
        let base: Vec<f32> = (0..30 * 2).map(|i| ((i * 13) % 11) as f32 - 5.0).collect();
        let mut data = Vec::new();
        for m in 0..2 {
            for _ in 0..d.depth {
                data.extend_from_slice(&base[m * 30..(m + 1) * 30]);
            }
        }
        let vol = Volume4D::new(d, 2, crate::volgrid::Spacing::default(), 1.0, data).unwrap();
        let support = extract_slice(&vol, 0).unwrap();
        let lbl = BinaryMask::new_2d(6, 5, (0..30).map(|i| i % 4 == 0).collect()).unwrap();
        let cfg = EncoderConfig::default();
        let tp = ThresholdParams::default();
        let pred = infer_volume((&support, &lbl), &vol, &cfg, &tp).unwrap();
        let first = pred.slice(0).unwrap();
        for z in 1..d.depth {
            assert_eq!(pred.slice(z).unwrap(), first);
        }
        let empty = BinaryMask::new_2d(6, 5, vec![false; 30]).unwrap();
        assert!(infer_volume((&support, &empty), &vol, &cfg, &tp).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scores_bounded_and_scale_invariant(
            data in prop::collection::vec(-10.0f64..10.0, 36),
            proto in prop::collection::vec(-10.0f64..10.0, 3),
            c in 0.01f64..100.0,
        ) {
            let f = fmap(4, 3, 3, data);
            let p = Prototype(proto);
            let s = anomaly_scores(&f, &p).unwrap();
            prop_assert!(s.data.iter().all(|v| (-1.0..=1.0).contains(v)));
            let tp = ThresholdParams { t: -0.2, kappa: 3.0 };
            let scaled = anomaly_scores(&f.scaled(c), &Prototype(p.0.iter().map(|v| v * c).collect())).unwrap();
            prop_assert_eq!(hard_mask(&s, &tp), hard_mask(&scaled, &tp));
            let y = soft_mask(&s, &tp).unwrap();
            prop_assert!(y.data.iter().all(|v| *v > 0.0 && *v < 1.0));
        }

        #[test]
        fn hard_mask_matches_soft_midpoint(
            scores in prop::collection::vec(-1.0f64..1.0, 20),
            t in -1.0f64..1.0,
            kappa in 0.01f64..100.0,
        ) {
            prop_assume!(scores.iter().all(|s| (s - t).abs() > 1e-9));
            let s = Plane { width: 20, height: 1, data: scores };
            let tp = ThresholdParams { t, kappa };
            let soft = soft_mask(&s, &tp).unwrap();
            let hard = hard_mask(&s, &tp);
            for (y, h) in soft.data.iter().zip(hard.bits()) {
                prop_assert_eq!(*y > 0.5, *h);
            }
        }

        #[test]
        fn prototype_is_masked_mean(
            data in prop::collection::vec(-5.0f64..5.0, 40),
            bits in prop::collection::vec(any::<bool>(), 20),
        ) {
            prop_assume!(bits.iter().any(|&b| b));
            let f = fmap(5, 4, 2, data.clone());
            let m = BinaryMask::new_2d(5, 4, bits.clone()).unwrap();
            let p = map_prototype(&f, &m).unwrap();
            for k in 0..2 {
                let sel: Vec<f64> = (0..20).filter(|&i| bits[i]).map(|i| data[i * 2 + k]).collect();
                let mean = sel.iter().sum::<f64>() / sel.len() as f64;
                prop_assert!((p.0[k] - mean).abs() < 1e-12);
            }
        }
    }
}
