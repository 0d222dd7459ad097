//! Volume containers and the `.vh.json` + `.raw` file pair.
//!
//! Every dense array in the crate uses one layout: x varies fastest, then y,
//! then z, then the channel index m.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical voxel size in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
}

impl Spacing {
    pub const fn new(sx: f64, sy: f64, sz: f64) -> Self {
        Self { sx, sy, sz }
    }

    pub fn voxel_mm3(&self) -> f64 {
        self.sx * self.sy * self.sz
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.sx, self.sy, self.sz]
    }

    fn validate(&self) -> Result<()> {
        if self
            .as_array()
            .iter()
            .all(|s| s.is_finite() && *s > 0.0)
        {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!(
                "spacing must be positive, got {:?}",
                self.as_array()
            )))
        }
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self::new(1.0, 1.0, 5.0)
    }
}

/// Spatial extent shared by every volume-shaped type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims3 {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
}

impl Dims3 {
    pub const fn new(width: usize, height: usize, depth: usize) -> Self {
        Self {
            width,
            height,
            depth,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.width * self.height * self.depth
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn slice_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.width * (y + self.height * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.width;
        let rest = idx / self.width;
        (x, rest % self.height, rest / self.height)
    }
}

/// Dense `W×H×Z×M` tensor of finite `f32` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    dims: Dims3,
    channels: usize,
    spacing: Spacing,
    frame_interval_s: f64,
    data: Vec<f32>,
}

impl Volume4D {
    pub fn new(
        dims: Dims3,
        channels: usize,
        spacing: Spacing,
        frame_interval_s: f64,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.is_empty() || channels == 0 {
            return Err(Error::InvalidParam(format!(
                "volume dims must be >= 1, got {}x{}x{}x{}",
                dims.width, dims.height, dims.depth, channels
            )));
        }
        spacing.validate()?;
        if !(frame_interval_s.is_finite() && frame_interval_s >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "frame interval must be finite and >= 0, got {frame_interval_s}"
            )));
        }
        let expected = dims.len() * channels;
        if data.len() != expected {
            return Err(Error::DimMismatch(format!(
                "expected {expected} samples, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite sample at index {pos}")));
        }
        Ok(Self {
            dims,
            channels,
            spacing,
            frame_interval_s,
            data,
        })
    }

    pub fn zeros(dims: Dims3, channels: usize, spacing: Spacing, frame_interval_s: f64) -> Result<Self> {
        Self::new(
            dims,
            channels,
            spacing,
            frame_interval_s,
            vec![0.0; dims.len() * channels],
        )
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn frame_interval_s(&self) -> f64 {
        self.frame_interval_s
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, m: usize) -> f32 {
        self.data[self.dims.index(x, y, z) + m * self.dims.len()]
    }

    /// All voxels of channel `m` in x-fastest order.
    pub fn channel(&self, m: usize) -> &[f32] {
        let n = self.dims.len();
        &self.data[m * n..(m + 1) * n]
    }

    /// Time curve (or modality vector) of the voxel at linear spatial index `idx`.
    pub fn voxel_vector(&self, idx: usize) -> Vec<f32> {
        let n = self.dims.len();
        (0..self.channels).map(|m| self.data[idx + m * n]).collect()
    }

    /// Rebuilds the volume channel by channel; `f` receives the channel index
    /// and its samples and must return the same number of samples.
    pub fn map_channels<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &[f32]) -> Result<Vec<f32>>,
    {
        let mut data = Vec::with_capacity(self.data.len());
        for m in 0..self.channels {
            let out = f(m, self.channel(m))?;
            if out.len() != self.dims.len() {
                return Err(Error::DimMismatch(format!(
                    "channel {m}: expected {} samples, got {}",
                    self.dims.len(),
                    out.len()
                )));
            }
            data.extend(out);
        }
        Self::new(
            self.dims,
            self.channels,
            self.spacing,
            self.frame_interval_s,
            data,
        )
    }
}

/// Integer supervoxel labelling. Label 0 marks voxels outside the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims3,
    spacing: Spacing,
    labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(dims: Dims3, spacing: Spacing, labels: Vec<u32>) -> Result<Self> {
        spacing.validate()?;
        if labels.len() != dims.len() || dims.is_empty() {
            return Err(Error::DimMismatch(format!(
                "expected {} labels, got {}",
                dims.len(),
                labels.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            labels,
        })
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u32 {
        self.labels[self.dims.index(x, y, z)]
    }

    /// Largest label value, which equals the supervoxel count for dense labellings.
    pub fn num_labels(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    /// Mask of voxels carrying `label`.
    pub fn select(&self, label: u32) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            bits: self.labels.iter().map(|&l| l == label).collect(),
        }
    }
}

/// One bit per voxel; 2D masks have depth 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    dims: Dims3,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims3, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.len() || dims.is_empty() {
            return Err(Error::DimMismatch(format!(
                "expected {} mask bits, got {}",
                dims.len(),
                bits.len()
            )));
        }
        Ok(Self { dims, bits })
    }

    pub fn new_2d(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        Self::new(Dims3::new(width, height, 1), bits)
    }

    pub fn empty(dims: Dims3) -> Self {
        Self {
            dims,
            bits: vec![false; dims.len()],
        }
    }

    pub fn full(dims: Dims3) -> Self {
        Self {
            dims,
            bits: vec![true; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.dims.index(x, y, z);
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_dims(other.dims)?;
        Ok(BinaryMask {
            dims: self.dims,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    /// The depth-1 mask at slice `z`.
    pub fn slice(&self, z: usize) -> Result<BinaryMask> {
        if z >= self.dims.depth {
            return Err(Error::OutOfRange {
                index: z,
                len: self.dims.depth,
            });
        }
        let n = self.dims.slice_len();
        Ok(BinaryMask {
            dims: Dims3::new(self.dims.width, self.dims.height, 1),
            bits: self.bits[z * n..(z + 1) * n].to_vec(),
        })
    }

    /// Stacks depth-1 masks along z.
    pub fn stack(slices: &[BinaryMask]) -> Result<BinaryMask> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidParam("cannot stack zero slices".into()))?;
        let d = first.dims;
        let mut bits = Vec::with_capacity(d.slice_len() * slices.len());
        for s in slices {
            if s.dims != d || d.depth != 1 {
                return Err(Error::DimMismatch("stacked slices must be equal 2D masks".into()));
            }
            bits.extend_from_slice(&s.bits);
        }
        BinaryMask::new(Dims3::new(d.width, d.height, slices.len()), bits)
    }

    pub fn check_dims(&self, dims: Dims3) -> Result<()> {
        if self.dims == dims {
            Ok(())
        } else {
            Err(Error::DimMismatch(format!(
                "mask is {:?}, expected {:?}",
                self.dims, dims
            )))
        }
    }
}

/// A single 2D+time (or 2D+modality) slice cut from a [`Volume4D`].
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTW {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// x-fastest, then y, then channel.
    pub data: Vec<f32>,
    pub source_z: usize,
    pub volume_id: String,
}

impl SliceTW {
    #[inline]
    pub fn get(&self, x: usize, y: usize, m: usize) -> f32 {
        self.data[x + self.width * (y + self.height * m)]
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn channel(&self, m: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[m * n..(m + 1) * n]
    }

    pub fn with_volume_id(mut self, id: impl Into<String>) -> Self {
        self.volume_id = id.into();
        self
    }
}

/// Copies depth `z` of every channel into a [`SliceTW`].
pub fn extract_slice(v: &Volume4D, z: usize) -> Result<SliceTW> {
    let d = v.dims();
    if z >= d.depth {
        return Err(Error::OutOfRange {
            index: z,
            len: d.depth,
        });
    }
    let n = d.slice_len();
    let mut data = Vec::with_capacity(n * v.channels());
    for m in 0..v.channels() {
        let ch = v.channel(m);
        data.extend_from_slice(&ch[z * n..(z + 1) * n]);
    }
    Ok(SliceTW {
        width: d.width,
        height: d.height,
        channels: v.channels(),
        data,
        source_z: z,
        volume_id: String::new(),
    })
}

/// Volume of the set voxels in millilitres.
pub fn mask_volume_ml(mask: &BinaryMask, spacing: Spacing) -> f64 {
    mask.count() as f64 * spacing.voxel_mm3() / 1000.0
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

pub const DTYPE_F32: &str = "f32le";
pub const DTYPE_U32: &str = "u32le";
pub const ORDER_X_FASTEST: &str = "x-fastest";

/// JSON sidecar describing a `.raw` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 4],
    pub spacing_mm: [f64; 3],
    pub frame_interval_s: f64,
    pub dtype: String,
    pub order: String,
}

/// Header and payload paths for a base path. `scan/ctp` and
/// `scan/ctp.vh.json` both resolve to `scan/ctp.vh.json` + `scan/ctp.raw`.
pub fn file_pair(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.to_string_lossy();
    let stem = s
        .strip_suffix(".vh.json")
        .or_else(|| s.strip_suffix(".raw"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{stem}.vh.json")),
        PathBuf::from(format!("{stem}.raw")),
    )
}

fn write_pair(base: &Path, header: &VolumeHeader, payload: &[u8]) -> Result<()> {
    let (hp, rp) = file_pair(base);
    if let Some(parent) = hp.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let json = serde_json::to_vec_pretty(header)?;
    fs::write(&hp, json).map_err(|e| Error::io(&hp, e))?;
    fs::write(&rp, payload).map_err(|e| Error::io(&rp, e))?;
    Ok(())
}

fn read_pair(base: &Path) -> Result<(VolumeHeader, Vec<u8>)> {
    let (hp, rp) = file_pair(base);
    let text = fs::read(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: VolumeHeader = serde_json::from_slice(&text).map_err(|source| Error::Header {
        path: hp.clone(),
        source,
    })?;
    if header.order != ORDER_X_FASTEST {
        return Err(Error::Format(format!(
            "unsupported order {:?}, expected {ORDER_X_FASTEST:?}",
            header.order
        )));
    }
    if header.dims.contains(&0) {
        return Err(Error::Format(format!("zero dimension in {:?}", header.dims)));
    }
    let payload = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
    let expected = header.dims.iter().product::<usize>() * 4;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{}: raw size {} bytes, header dims {:?} require {expected}",
            rp.display(),
            payload.len(),
            header.dims
        )));
    }
    Ok((header, payload))
}

fn spacing_of(h: &VolumeHeader) -> Spacing {
    Spacing::new(h.spacing_mm[0], h.spacing_mm[1], h.spacing_mm[2])
}

fn u32_words(payload: &[u8]) -> impl Iterator<Item = u32> + '_ {
    payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
}

pub fn save_volume(v: &Volume4D, base: &Path) -> Result<()> {
    let d = v.dims();
    let header = VolumeHeader {
        dims: [d.width, d.height, d.depth, v.channels()],
        spacing_mm: v.spacing().as_array(),
        frame_interval_s: v.frame_interval_s(),
        dtype: DTYPE_F32.into(),
        order: ORDER_X_FASTEST.into(),
    };
    let payload: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_pair(base, &header, &payload)
}

pub fn load_volume(base: &Path) -> Result<Volume4D> {
    let (h, payload) = read_pair(base)?;
    if h.dtype != DTYPE_F32 {
        return Err(Error::Format(format!(
            "unsupported dtype {:?} for an intensity volume",
            h.dtype
        )));
    }
    let data = u32_words(&payload).map(f32::from_bits).collect();
    Volume4D::new(
        Dims3::new(h.dims[0], h.dims[1], h.dims[2]),
        h.dims[3],
        spacing_of(&h),
        h.frame_interval_s,
        data,
    )
}

fn save_u32(base: &Path, dims: Dims3, spacing: Spacing, words: impl Iterator<Item = u32>) -> Result<()> {
    let header = VolumeHeader {
        dims: [dims.width, dims.height, dims.depth, 1],
        spacing_mm: spacing.as_array(),
        frame_interval_s: 0.0,
        dtype: DTYPE_U32.into(),
        order: ORDER_X_FASTEST.into(),
    };
    let payload: Vec<u8> = words.flat_map(|w| w.to_le_bytes()).collect();
    write_pair(base, &header, &payload)
}

fn load_u32(base: &Path) -> Result<(Dims3, Spacing, Vec<u32>)> {
    let (h, payload) = read_pair(base)?;
    if h.dtype != DTYPE_U32 {
        return Err(Error::Format(format!(
            "unsupported dtype {:?} for a label volume",
            h.dtype
        )));
    }
    if h.dims[3] != 1 {
        return Err(Error::Format(format!(
            "label volumes have one channel, header says {}",
            h.dims[3]
        )));
    }
    let spacing = spacing_of(&h);
    spacing.validate()?;
    Ok((
        Dims3::new(h.dims[0], h.dims[1], h.dims[2]),
        spacing,
        u32_words(&payload).collect(),
    ))
}

pub fn save_labels(labels: &LabelVolume, base: &Path) -> Result<()> {
    save_u32(
        base,
        labels.dims(),
        labels.spacing(),
        labels.labels().iter().copied(),
    )
}

pub fn load_labels(base: &Path) -> Result<LabelVolume> {
    let (dims, spacing, words) = load_u32(base)?;
    LabelVolume::new(dims, spacing, words)
}

/// Masks are stored as `u32le` volumes holding 0 or 1.
pub fn save_mask(mask: &BinaryMask, spacing: Spacing, base: &Path) -> Result<()> {
    save_u32(base, mask.dims(), spacing, mask.bits().iter().map(|&b| b as u32))
}

pub fn load_mask(base: &Path) -> Result<(BinaryMask, Spacing)> {
    let (dims, spacing, words) = load_u32(base)?;
    let mut bits = Vec::with_capacity(words.len());
    for (i, w) in words.into_iter().enumerate() {
        match w {
            0 => bits.push(false),
            1 => bits.push(true),
            other => {
                return Err(Error::Format(format!(
                    "mask value {other} at index {i}; masks hold 0 or 1"
                )))
            }
        }
    }
    Ok((BinaryMask::new(dims, bits)?, spacing))
}

/// Writes a slice as a depth-1 volume so it can be reloaded with [`load_volume`].
pub fn save_slice(s: &SliceTW, spacing: Spacing, frame_interval_s: f64, base: &Path) -> Result<()> {
    let v = Volume4D::new(
        Dims3::new(s.width, s.height, 1),
        s.channels,
        spacing,
        frame_interval_s,
        s.data.clone(),
    )?;
    save_volume(&v, base)
}
