//! Graph-based supervoxels over multi-channel volumes.
//!
//! This is Felzenszwalb-Huttenlocher segmentation lifted to 3D grids where
//! each voxel carries an M-dimensional vector (time frames or parametric
//! maps). Edge weights are Euclidean distances between voxel vectors, and
//! two components merge when the joining edge is no heavier than either
//! component's internal difference plus `rho / |C|`.

mod stats;
mod union_find;

pub use stats::{
    achievable_dice, segment_stats, write_stats_csv, AchievableDice, SegmentInfo, SegmentStats,
};
pub use union_find::DisjointSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preproc::zscore_channels;
use crate::volgrid::{BinaryMask, Dims3, LabelVolume, Spacing, Volume4D};

/// Voxel neighbourhood used for graph edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    /// Offsets that point to a larger linear index; each undirected edge is
    /// generated once.
    pub fn forward_offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let forward = dz > 0 || (dz == 0 && (dy > 0 || (dy == 0 && dx > 0)));
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan >= 1,
                    };
                    if forward && keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }

    pub fn all_offsets(self) -> Vec<[i64; 3]> {
        let fwd = self.forward_offsets();
        fwd.iter()
            .copied()
            .chain(fwd.iter().map(|o| [-o[0], -o[1], -o[2]]))
            .collect()
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervoxelParams {
    pub rho: f64,
    pub min_size: usize,
    pub connectivity: Connectivity,
    /// Z-score each channel inside the mask before measuring distances.
    pub normalize_channels: bool,
    /// Divide edge weights by the physical length of the edge.
    pub spacing_weighted: bool,
}

impl Default for SupervoxelParams {
    fn default() -> Self {
        Self {
            rho: 1000.0,
            min_size: 100,
            connectivity: Connectivity::Six,
            normalize_channels: true,
            spacing_weighted: false,
        }
    }
}

impl SupervoxelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::InvalidParam(format!("rho must be > 0, got {}", self.rho)));
        }
        if self.min_size == 0 {
            return Err(Error::InvalidParam("min_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Edge {
    weight: f64,
    a: u32,
    b: u32,
}

fn build_edges(v: &Volume4D, mask: &BinaryMask, params: &SupervoxelParams) -> Vec<Edge> {
    let d = v.dims();
    let sp = v.spacing();
    let offsets: Vec<([i64; 3], i64, f64)> = params
        .connectivity
        .forward_offsets()
        .into_iter()
        .map(|o| {
            let step = o[0] + d.width as i64 * (o[1] + d.height as i64 * o[2]);
            (o, step, edge_length(o, sp))
        })
        .collect();
    let channels: Vec<&[f32]> = (0..v.channels()).map(|m| v.channel(m)).collect();
    let bits = mask.bits();

    (0..d.depth)
        .into_par_iter()
        .flat_map_iter(|z| {
            let mut local = Vec::new();
            for y in 0..d.height {
                for x in 0..d.width {
                    let a = d.index(x, y, z);
                    if !bits[a] {
                        continue;
                    }
                    for &(o, step, len) in &offsets {
                        let (nx, ny, nz) = (x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]);
                        if nx < 0
                            || ny < 0
                            || nx >= d.width as i64
                            || ny >= d.height as i64
                            || nz >= d.depth as i64
                        {
                            continue;
                        }
                        let b = (a as i64 + step) as usize;
                        if !bits[b] {
                            continue;
                        }
                        let mut sq = 0.0f64;
                        for ch in &channels {
                            let diff = ch[a] as f64 - ch[b] as f64;
                            sq += diff * diff;
                        }
                        let mut weight = sq.sqrt();
                        if params.spacing_weighted {
                            weight /= len;
                        }
                        local.push(Edge {
                            weight,
                            a: a as u32,
                            b: b as u32,
                        });
                    }
                }
            }
            local
        })
        .collect()
}

fn edge_length(o: [i64; 3], sp: Spacing) -> f64 {
    let dx = o[0] as f64 * sp.sx;
    let dy = o[1] as f64 * sp.sy;
    let dz = o[2] as f64 * sp.sz;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Partitions the masked voxels of `volume` into connected supervoxels.
///
/// Voxels outside `mask` get label 0; supervoxels are numbered `1..=K` in
/// the order their first voxel appears in x-fastest traversal.
pub fn felzenszwalb_4d(
    volume: &Volume4D,
    params: &SupervoxelParams,
    mask: &BinaryMask,
) -> Result<LabelVolume> {
    params.validate()?;
    mask.check_dims(volume.dims())?;
    if mask.is_empty() {
        return Err(Error::EmptyMask("supervoxel mask"));
    }
    let normalized;
    let v = if params.normalize_channels {
        normalized = zscore_channels(volume, mask)?;
        &normalized
    } else {
        volume
    };

    let mut edges = build_edges(v, mask, params);
    edges.par_sort_unstable_by(|p, q| {
        p.weight
            .total_cmp(&q.weight)
            .then(p.a.cmp(&q.a))
            .then(p.b.cmp(&q.b))
    });

    let n = v.dims().len();
    let mut sets = DisjointSet::new(n);
    for e in &edges {
        let ra = sets.find(e.a as usize);
        let rb = sets.find(e.b as usize);
        if ra == rb {
            continue;
        }
        let ta = sets.internal(ra) + params.rho / sets.size(ra) as f64;
        let tb = sets.internal(rb) + params.rho / sets.size(rb) as f64;
        if e.weight <= ta.min(tb) {
            sets.union_roots(ra, rb, e.weight);
        }
    }

    if params.min_size > 1 {
        for e in &edges {
            let ra = sets.find(e.a as usize);
            let rb = sets.find(e.b as usize);
            if ra != rb && (sets.size(ra) < params.min_size || sets.size(rb) < params.min_size) {
                sets.union_roots(ra, rb, e.weight);
            }
        }
    }

    Ok(relabel(&mut sets, mask, v.dims(), v.spacing()))
}

fn relabel(sets: &mut DisjointSet, mask: &BinaryMask, dims: Dims3, spacing: Spacing) -> LabelVolume {
    let mut root_label = vec![0u32; dims.len()];
    let mut next = 0u32;
    let mut labels = vec![0u32; dims.len()];
    for (idx, &inside) in mask.bits().iter().enumerate() {
        if !inside {
            continue;
        }
        let r = sets.find(idx);
        if root_label[r] == 0 {
            next += 1;
            root_label[r] = next;
        }
        labels[idx] = root_label[r];
    }
    LabelVolume::new(dims, spacing, labels).expect("dims come from a validated volume")
}
