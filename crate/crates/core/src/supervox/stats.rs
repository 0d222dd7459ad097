use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::volgrid::{BinaryMask, LabelVolume};

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentInfo {
    pub label: u32,
    pub count: usize,
    /// Inclusive `[x, y, z]` corners.
    pub bbox_min: [usize; 3],
    pub bbox_max: [usize; 3],
    /// Voxel count of the segment on each slice it touches.
    pub slice_counts: BTreeMap<usize, usize>,
    pub centroid: [f64; 3],
}

impl SegmentInfo {
    pub fn zmin(&self) -> usize {
        self.bbox_min[2]
    }

    pub fn zmax(&self) -> usize {
        self.bbox_max[2]
    }

    /// Slices holding at least `min_pixels` voxels of the segment.
    pub fn slices_with_at_least(&self, min_pixels: usize) -> Vec<usize> {
        self.slice_counts
            .iter()
            .filter_map(|(&z, &c)| (c >= min_pixels).then_some(z))
            .collect()
    }
}

/// Per-label geometry, ordered by label. Label 0 is not reported.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentStats {
    pub segments: Vec<SegmentInfo>,
}

impl SegmentStats {
    pub fn get(&self, label: u32) -> Option<&SegmentInfo> {
        self.segments
            .binary_search_by_key(&label, |s| s.label)
            .ok()
            .map(|i| &self.segments[i])
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_voxels(&self) -> usize {
        self.segments.iter().map(|s| s.count).sum()
    }
}

pub fn segment_stats(labels: &LabelVolume) -> SegmentStats {
    let d = labels.dims();
    let mut acc: BTreeMap<u32, (SegmentInfo, [f64; 3])> = BTreeMap::new();
    for (idx, &l) in labels.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (x, y, z) = d.coords(idx);
        let p = [x, y, z];
        let (info, sum) = acc.entry(l).or_insert_with(|| {
            (
                SegmentInfo {
                    label: l,
                    count: 0,
                    bbox_min: p,
                    bbox_max: p,
                    slice_counts: BTreeMap::new(),
                    centroid: [0.0; 3],
                },
                [0.0; 3],
            )
        });
        info.count += 1;
        for a in 0..3 {
            info.bbox_min[a] = info.bbox_min[a].min(p[a]);
            info.bbox_max[a] = info.bbox_max[a].max(p[a]);
            sum[a] += p[a] as f64;
        }
        *info.slice_counts.entry(z).or_default() += 1;
    }
    SegmentStats {
        segments: acc
            .into_values()
            .map(|(mut info, sum)| {
                info.centroid = sum.map(|s| s / info.count as f64);
                info
            })
            .collect(),
    }
}

/// CSV with header `label,count,zmin,zmax,x0,y0,z0,x1,y1,z1` (bbox corners inclusive).
pub fn write_stats_csv<W: Write>(stats: &SegmentStats, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "count", "zmin", "zmax", "x0", "y0", "z0", "x1", "y1", "z1"])?;
    for s in &stats.segments {
        let mut row = vec![s.label, s.count as u32, s.zmin() as u32, s.zmax() as u32];
        row.extend(s.bbox_min.iter().chain(&s.bbox_max).map(|&v| v as u32));
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Best Dice any union of supervoxels can reach against `gt`.
#[derive(Debug, Clone, PartialEq)]
pub struct AchievableDice {
    pub dice: f64,
    /// Selected labels in ascending order.
    pub selected: Vec<u32>,
}

/// Upper bound on pseudolabel quality: the maximum Dice between `gt` and a
/// union of whole supervoxels.
///
/// Dice of a union is `2·ΣI / (ΣS + G)`, a ratio of sums, so the optimum is a
/// prefix of the supervoxels sorted by purity `I/S`; every prefix is scanned.
pub fn achievable_dice(labels: &LabelVolume, gt: &BinaryMask) -> Result<AchievableDice> {
    gt.check_dims(labels.dims())?;
    let g = gt.count();
    if g == 0 {
        return Ok(AchievableDice {
            dice: 0.0,
            selected: Vec::new(),
        });
    }
    // label -> (overlap, size)
    let mut counts: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    for (&l, &t) in labels.labels().iter().zip(gt.bits()) {
        if l == 0 {
            continue;
        }
        let e = counts.entry(l).or_default();
        e.1 += 1;
        if t {
            e.0 += 1;
        }
    }
    let mut order: Vec<(u32, u64, u64)> = counts
        .into_iter()
        .filter(|(_, (i, _))| *i > 0)
        .map(|(l, (i, s))| (l, i, s))
        .collect();
    // purity descending, compared exactly as i_a * s_b vs i_b * s_a
    order.sort_by(|a, b| (b.1 * a.2).cmp(&(a.1 * b.2)).then(a.0.cmp(&b.0)));

    let mut best = 0.0;
    let mut best_len = 0;
    let (mut inter, mut size) = (0u64, 0u64);
    for (k, &(_, i, s)) in order.iter().enumerate() {
        inter += i;
        size += s;
        let d = dice_from_counts(inter, size, g as u64);
        if d > best {
            best = d;
            best_len = k + 1;
        }
    }
    let mut selected: Vec<u32> = order[..best_len].iter().map(|o| o.0).collect();
    selected.sort_unstable();
    Ok(AchievableDice {
        dice: best,
        selected,
    })
}

pub(crate) fn dice_from_counts(intersection: u64, pred: u64, gt: u64) -> f64 {
    2.0 * intersection as f64 / (pred + gt) as f64
}
