use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    base_features, class_weights, cosine, sigmoid, EncoderConfig, FeatureMap, Projection,
    ThresholdParams, PROB_EPS,
};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::volgrid::{BinaryMask, Dims3};

/// An episode with its handcrafted features computed once. Training only
/// touches the projection and threshold, so these never change.
#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    pub support: FeatureMap,
    pub support_label: BinaryMask,
    pub query: FeatureMap,
    pub query_label: BinaryMask,
}

impl PreparedEpisode {
    pub fn new(ep: &Episode, cfg: &EncoderConfig) -> Result<Self> {
        Self::from_features(
            base_features(&ep.support, &cfg.recipe)?,
            ep.support_label.clone(),
            base_features(&ep.query, &cfg.recipe)?,
            ep.query_label.clone(),
        )
    }

    pub fn from_features(
        support: FeatureMap,
        support_label: BinaryMask,
        query: FeatureMap,
        query_label: BinaryMask,
    ) -> Result<Self> {
        if support.dim != query.dim {
            return Err(Error::DimMismatch("support and query feature dims differ".into()));
        }
        support_label.check_dims(Dims3::new(support.width, support.height, 1))?;
        query_label.check_dims(Dims3::new(query.width, query.height, 1))?;
        if support_label.is_empty() {
            return Err(Error::EmptyMask("support label"));
        }
        Ok(Self {
            support,
            support_label,
            query,
            query_label,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub d_t: f64,
    /// Row-major like the projection weights; `None` without a projection.
    pub d_weights: Option<Vec<f64>>,
    pub d_bias: Option<Vec<f64>>,
}

fn masked_mean(f: &FeatureMap, mask: &BinaryMask) -> Vec<f64> {
    let mut p = vec![0.0; f.dim];
    let mut n = 0.0;
    for (i, _) in mask.bits().iter().enumerate().filter(|(_, &b)| b) {
        n += 1.0;
        for (a, v) in p.iter_mut().zip(f.pixel(i)) {
            *a += v;
        }
    }
    p.iter_mut().for_each(|v| *v /= n);
    p
}

/// Per-block partial sums; blocks are fixed so the reduction order is too.
struct Partial {
    loss: f64,
    d_t: f64,
    d_w: Vec<f64>,
    d_b: Vec<f64>,
    g_p: Vec<f64>,
}

const ROWS_PER_BLOCK: usize = 8;

/// Episode loss and its gradients with respect to `T` and, when the encoder
/// has a projection, its weights and bias.
pub fn loss_gradients(
    ep: &PreparedEpisode,
    cfg: &EncoderConfig,
    tp: &ThresholdParams,
) -> Result<(f64, Gradients)> {
    tp.validate()?;
    let proj = cfg.projection.as_ref();
    if let Some(p) = proj {
        p.validate()?;
        if p.d_in != ep.query.dim {
            return Err(Error::DimMismatch(format!(
                "projection expects {} features, episode has {}",
                p.d_in, ep.query.dim
            )));
        }
    }
    let (fs, fq) = match proj {
        Some(p) => (p.apply(&ep.support)?, p.apply(&ep.query)?),
        None => (ep.support.clone(), ep.query.clone()),
    };
    let d = fq.dim;
    let d_in = ep.query.dim;
    let phi_bar = masked_mean(&ep.support, &ep.support_label);
    let p = masked_mean(&fs, &ep.support_label);
    let p_norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w_fg, w_bg) = class_weights(&ep.query_label);
    let n = fq.pixels() as f64;
    let kappa = tp.kappa;
    let with_proj = proj.is_some();
    let labels = ep.query_label.bits();
    let row = fq.width;

    let partials: Vec<Partial> = (0..fq.height)
        .step_by(ROWS_PER_BLOCK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|y0| {
            let mut part = Partial {
                loss: 0.0,
                d_t: 0.0,
                d_w: if with_proj { vec![0.0; d * d_in] } else { Vec::new() },
                d_b: vec![0.0; if with_proj { d } else { 0 }],
                g_p: vec![0.0; d],
            };
            let mut g_f = vec![0.0; d];
            let y1 = (y0 + ROWS_PER_BLOCK).min(fq.height);
            for i in y0 * row..y1 * row {
                let f = fq.pixel(i);
                let cos = cosine(f, &p, p_norm);
                let s = cos.map_or(0.0, |(c, _)| -c);
                let yh = sigmoid(-kappa * (s - tp.t));
                let yc = yh.clamp(PROB_EPS, 1.0 - PROB_EPS);
                let (l, g_y) = if labels[i] {
                    (w_fg * yc.ln(), -w_fg / yc)
                } else {
                    (w_bg * (1.0 - yc).ln(), w_bg / (1.0 - yc))
                };
                part.loss -= l;
                if yh != yc {
                    continue;
                }
                let g_y = g_y / n;
                // dy/dS = -kappa y (1 - y), dy/dT = -dy/dS
                let g_s = -g_y * kappa * yh * (1.0 - yh);
                part.d_t -= g_s;
                let Some((c, f_norm)) = cos else { continue };
                let g_c = -g_s;
                let inv = 1.0 / (f_norm * p_norm);
                for k in 0..d {
                    g_f[k] = g_c * (p[k] * inv - c * f[k] / (f_norm * f_norm));
                    part.g_p[k] += g_c * (f[k] * inv - c * p[k] / (p_norm * p_norm));
                }
                if with_proj {
                    let phi = ep.query.pixel(i);
                    for (r, &g) in g_f.iter().enumerate() {
                        part.d_b[r] += g;
                        let dw = &mut part.d_w[r * d_in..(r + 1) * d_in];
                        for (acc, x) in dw.iter_mut().zip(phi) {
                            *acc += g * x;
                        }
                    }
                }
            }
            part
        })
        .collect();

    let mut loss = 0.0;
    let mut d_t = 0.0;
    let mut d_w = vec![0.0; if with_proj { d * d_in } else { 0 }];
    let mut d_b = vec![0.0; if with_proj { d } else { 0 }];
    let mut g_p = vec![0.0; d];
    for part in partials {
        loss += part.loss;
        d_t += part.d_t;
        add(&mut d_w, &part.d_w);
        add(&mut d_b, &part.d_b);
        add(&mut g_p, &part.g_p);
    }
    // p = W·phi_bar + b
    if with_proj {
        for (r, &g) in g_p.iter().enumerate() {
            d_b[r] += g;
            for (acc, x) in d_w[r * d_in..(r + 1) * d_in].iter_mut().zip(&phi_bar) {
                *acc += g * x;
            }
        }
    }
    Ok((
        loss / n,
        Gradients {
            d_t,
            d_weights: with_proj.then_some(d_w),
            d_bias: with_proj.then_some(d_b),
        },
    ))
}

fn add(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Episodes averaged per step.
    pub batch_size: usize,
    /// Step size multiplier for the projection relative to `T`.
    pub projection_scale: f64,
    pub train_projection: bool,
    pub train_threshold: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            step_size: 0.5,
            batch_size: 1,
            projection_scale: 1.0,
            train_projection: true,
            train_threshold: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParam("training needs steps >= 1 and batch_size >= 1".into()));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite())
            || !(self.projection_scale >= 0.0 && self.projection_scale.is_finite())
        {
            return Err(Error::InvalidParam(format!(
                "step size must be finite and non-negative, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub encoder: EncoderConfig,
    pub threshold: ThresholdParams,
    /// Mean batch loss at each step, before that step's update.
    pub losses: Vec<f64>,
}

/// Plain gradient descent. Step `k` averages the gradients of
/// `batch_size` consecutive episodes, cycling through `episodes` in order.
pub fn train(
    episodes: &[PreparedEpisode],
    encoder: &EncoderConfig,
    threshold: &ThresholdParams,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(Error::InvalidParam("no training episodes".into()));
    }
    let mut enc = encoder.clone();
    let mut tp = *threshold;
    let mut losses = Vec::with_capacity(cfg.steps);
    let b = cfg.batch_size;
    for step in 0..cfg.steps {
        let (loss, g) = batch_gradients(episodes, step * b, b, &enc, &tp)?;
        if !loss.is_finite() || !g.d_t.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(loss);
        if cfg.train_threshold {
            tp.t -= cfg.step_size * g.d_t;
        }
        if cfg.train_projection {
            if let (Some(p), Some(dw), Some(db)) = (enc.projection.as_mut(), g.d_weights, g.d_bias)
            {
                let lr = cfg.step_size * cfg.projection_scale;
                step_params(p, &dw, &db, lr);
                if p.weights.iter().chain(&p.bias).any(|v| !v.is_finite()) {
                    return Err(Error::Diverged { step });
                }
            }
        }
        if !tp.t.is_finite() {
            return Err(Error::Diverged { step });
        }
    }
    Ok(TrainResult {
        encoder: enc,
        threshold: tp,
        losses,
    })
}

fn batch_gradients(
    episodes: &[PreparedEpisode],
    start: usize,
    size: usize,
    enc: &EncoderConfig,
    tp: &ThresholdParams,
) -> Result<(f64, Gradients)> {
    let mut loss = 0.0;
    let mut acc: Option<Gradients> = None;
    for j in 0..size {
        let (l, g) = loss_gradients(&episodes[(start + j) % episodes.len()], enc, tp)?;
        loss += l;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => {
                a.d_t += g.d_t;
                if let (Some(x), Some(y)) = (a.d_weights.as_mut(), &g.d_weights) {
                    add(x, y);
                }
                if let (Some(x), Some(y)) = (a.d_bias.as_mut(), &g.d_bias) {
                    add(x, y);
                }
            }
        }
    }
    let mut g = acc.expect("batch_size >= 1");
    let inv = 1.0 / size as f64;
    g.d_t *= inv;
    for v in g.d_weights.iter_mut().chain(g.d_bias.iter_mut()) {
        v.iter_mut().for_each(|x| *x *= inv);
    }
    Ok((loss * inv, g))
}

fn step_params(p: &mut Projection, dw: &[f64], db: &[f64], lr: f64) {
    p.weights.iter_mut().zip(dw).for_each(|(w, g)| *w -= lr * g);
    p.bias.iter_mut().zip(db).for_each(|(b, g)| *b -= lr * g);
}
