//! Volume containers, intensity preprocessing, slice-window extraction and
//! run-length mask persistence.
//!
//! Voxels are stored as `[z, y, x]` with `x` varying fastest. A slice taken
//! along an axis is a 2D image whose rows/columns are the two remaining axes
//! in that order, e.g. a `z` slice is `(y, x)` and an `x` slice is `(z, y)`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, Axis as NdAxis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops;

/// Minimum fraction of the central slice an instance must cover for its
/// window to be kept.
pub const MIN_CENTRAL_AREA_FRACTION: f64 = 0.0014;

pub type Mask2 = Array2<bool>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Ct,
    Mri,
    Synth,
}

impl Modality {
    /// Fixed clipping window applied before mapping to `[0, 255]`.
    pub fn clip_range(self) -> Option<(f64, f64)> {
        match self {
            Modality::Ct => Some((-200.0, 400.0)),
            Modality::Mri => Some((0.0, 600.0)),
            Modality::Synth => None,
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CT" => Ok(Modality::Ct),
            "MRI" | "MR" => Ok(Modality::Mri),
            "SYNTH" => Ok(Modality::Synth),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn nd(self) -> NdAxis {
        match self {
            Axis::Z => NdAxis(0),
            Axis::Y => NdAxis(1),
            Axis::X => NdAxis(2),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::InvalidInput(format!("unknown axis '{other}'"))),
        }
    }
}

/// Physical voxel size in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing { x: 1.0, y: 1.0, z: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    /// `[z, y, x]` intensities.
    pub voxels: Array3<f32>,
    pub spacing: Spacing,
    pub modality: Modality,
    /// Set once intensities have been mapped to `[0, 255]`.
    pub normalized: bool,
}

impl Volume {
    pub fn new(
        id: impl Into<String>,
        voxels: Array3<f32>,
        spacing: Spacing,
        modality: Modality,
    ) -> Result<Self> {
        let v = Volume {
            id: id.into(),
            voxels,
            spacing,
            modality,
            normalized: false,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.voxels.dim();
        if d < 3 || h < 3 || w < 3 {
            return Err(Error::InvalidInput(format!(
                "volume {} has shape {:?}; every dimension must be at least 3",
                self.id,
                self.voxels.dim()
            )));
        }
        let Spacing { x, y, z } = self.spacing;
        if !(x > 0.0 && y > 0.0 && z > 0.0) || !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "spacing must be strictly positive, got {:?}",
                self.spacing
            )));
        }
        Ok(())
    }

    /// `(depth, height, width)` = `(z, y, x)` extents.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    pub fn dim(&self, axis: Axis) -> usize {
        self.voxels.len_of(axis.nd())
    }

    pub fn slice(&self, axis: Axis, index: usize) -> ArrayView2<'_, f32> {
        self.voxels.index_axis(axis.nd(), index)
    }

    /// Shape of a slice taken along `axis`.
    pub fn slice_shape(&self, axis: Axis) -> (usize, usize) {
        let (d, h, w) = self.shape();
        match axis {
            Axis::Z => (h, w),
            Axis::Y => (d, w),
            Axis::X => (d, h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    GroundTruth,
    Pseudo,
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub name: String,
    pub source: LabelSource,
}

/// Instance-labeled mask aligned with a [`Volume`]. Label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMask {
    pub labels: Array3<u32>,
    pub instances: BTreeMap<u32, InstanceInfo>,
}

impl VolumeMask {
    pub fn empty(shape: (usize, usize, usize)) -> Self {
        VolumeMask {
            labels: Array3::zeros(shape),
            instances: BTreeMap::new(),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    pub fn check_aligned(&self, volume: &Volume) -> Result<()> {
        if self.shape() != volume.shape() {
            return Err(Error::InvalidInput(format!(
                "mask shape {:?} does not match volume shape {:?}",
                self.shape(),
                volume.shape()
            )));
        }
        Ok(())
    }

    pub fn slice(&self, axis: Axis, index: usize) -> ArrayView2<'_, u32> {
        self.labels.index_axis(axis.nd(), index)
    }

    /// Binary mask of one instance on one slice.
    pub fn instance_slice(&self, axis: Axis, index: usize, id: u32) -> Mask2 {
        self.slice(axis, index).mapv(|l| l == id)
    }

    /// Binary foreground (any instance) of the whole volume.
    pub fn foreground(&self) -> Array3<bool> {
        self.labels.mapv(|l| l != 0)
    }

    pub fn instance(&self, id: u32) -> Array3<bool> {
        self.labels.mapv(|l| l == id)
    }

    /// Ids actually present in the label grid, ascending.
    pub fn present_ids(&self) -> Vec<u32> {
        let mut seen = std::collections::BTreeSet::new();
        for &l in self.labels.iter() {
            if l != 0 {
                seen.insert(l);
            }
        }
        seen.into_iter().collect()
    }

    /// Writes `id` wherever `mask` is set and the voxel is still background.
    pub fn paint_slice(&mut self, axis: Axis, index: usize, mask: ArrayView2<bool>, id: u32) {
        let mut view = self.labels.index_axis_mut(axis.nd(), index);
        ndarray::Zip::from(&mut view).and(&mask).for_each(|l, &m| {
            if m && *l == 0 {
                *l = id;
            }
        });
    }

    pub fn labeled_slice_count(&self, axis: Axis) -> usize {
        self.labels
            .axis_iter(axis.nd())
            .filter(|s| s.iter().any(|&l| l != 0))
            .count()
    }
}

/// Three adjacent slices (`[slice, row, col]`, values in `[0, 255]`) centred
/// on `center_index` along `axis`, with optional per-slice labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceWindow {
    pub pixels: Array3<f32>,
    pub axis: Axis,
    pub center_index: usize,
    pub labels: Option<Array3<bool>>,
    pub indicator: [u8; 3],
    /// Instance id the labels were taken from, when built from a volume mask.
    pub instance: Option<u32>,
}

impl SliceWindow {
    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    /// Unlabeled window centred on `center` (which must be an interior index).
    pub fn from_volume(volume: &Volume, axis: Axis, center: usize) -> Result<Self> {
        let dim = volume.dim(axis);
        if dim < 3 {
            return Err(Error::InvalidInput(format!(
                "axis {axis} has {dim} slices; a window needs 3"
            )));
        }
        if center == 0 || center + 1 >= dim {
            return Err(Error::InvalidInput(format!(
                "window centre {center} must lie in [1, {}]",
                dim - 2
            )));
        }
        let (h, w) = volume.slice_shape(axis);
        let mut pixels = Array3::zeros((3, h, w));
        for (i, idx) in (center - 1..=center + 1).enumerate() {
            pixels.index_axis_mut(NdAxis(0), i).assign(&volume.slice(axis, idx));
        }
        Ok(SliceWindow {
            pixels,
            axis,
            center_index: center,
            labels: None,
            indicator: [0, 0, 0],
            instance: None,
        })
    }
}

/// Clamps to the modality window and maps affinely onto `[0, 255]`, rounding
/// to the nearest integer with ties away from zero. Synthetic or already
/// normalized volumes pass through unchanged.
pub fn clip_and_normalize(volume: &Volume) -> Volume {
    let mut out = volume.clone();
    if volume.normalized {
        return out;
    }
    out.normalized = true;
    let Some((lo, hi)) = volume.modality.clip_range() else {
        return out;
    };
    out.voxels.mapv_inplace(|v| {
        let c = (v as f64).clamp(lo, hi);
        ((c - lo) / (hi - lo) * 255.0).round() as f32
    });
    out
}

/// Emits one window per (interior centre, instance) whose instance covers at
/// least [`MIN_CENTRAL_AREA_FRACTION`] of the central slice. Windows carry the
/// instance's binary labels on all three slices and indicator `(1, 1, 1)`.
pub fn extract_windows(volume: &Volume, mask: &VolumeMask, axis: Axis) -> Result<Vec<SliceWindow>> {
    mask.check_aligned(volume)?;
    let dim = volume.dim(axis);
    if dim < 3 {
        return Err(Error::InvalidInput(format!(
            "axis {axis} has {dim} slices; a window needs 3"
        )));
    }
    let (h, w) = volume.slice_shape(axis);
    let min_area = MIN_CENTRAL_AREA_FRACTION * (h * w) as f64;
    let mut windows = Vec::new();
    for center in 1..dim - 1 {
        let central = mask.slice(axis, center);
        let mut areas: BTreeMap<u32, usize> = BTreeMap::new();
        for &l in central.iter() {
            if l != 0 {
                *areas.entry(l).or_default() += 1;
            }
        }
        for (id, area) in areas {
            if (area as f64) < min_area {
                continue;
            }
            let mut window = SliceWindow::from_volume(volume, axis, center)?;
            let mut labels = Array3::from_elem((3, h, w), false);
            for (i, idx) in (center - 1..=center + 1).enumerate() {
                labels
                    .index_axis_mut(NdAxis(0), i)
                    .assign(&mask.instance_slice(axis, idx, id));
            }
            window.labels = Some(labels);
            window.indicator = [1, 1, 1];
            window.instance = Some(id);
            windows.push(window);
        }
    }
    Ok(windows)
}

/// Resamples pixels bilinearly and labels by nearest neighbour.
pub fn resize_window(window: &SliceWindow, target: (usize, usize)) -> Result<SliceWindow> {
    let (th, tw) = target;
    if th < 16 || tw < 16 {
        return Err(Error::InvalidInput(format!(
            "resize target {th}x{tw} is below the 16x16 minimum"
        )));
    }
    if (th, tw) == (window.height(), window.width()) {
        return Ok(window.clone());
    }
    let mut pixels = Array3::zeros((3, th, tw));
    for i in 0..3 {
        pixels
            .index_axis_mut(NdAxis(0), i)
            .assign(&imgops::resize_bilinear(window.pixels.index_axis(NdAxis(0), i), th, tw));
    }
    let labels = window.labels.as_ref().map(|l| {
        let mut out = Array3::from_elem((3, th, tw), false);
        for i in 0..3 {
            out.index_axis_mut(NdAxis(0), i)
                .assign(&imgops::resize_nearest(l.index_axis(NdAxis(0), i), th, tw));
        }
        out
    });
    Ok(SliceWindow {
        pixels,
        labels,
        ..window.clone()
    })
}

/// Row-major run-length encoding of a binary mask. Runs alternate
/// background/foreground and always start with a (possibly empty)
/// background run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<u32>,
}

impl RleMask {
    pub fn area(&self) -> usize {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as usize).sum()
    }
}

pub fn rle_encode(mask: ArrayView2<bool>) -> RleMask {
    let (height, width) = mask.dim();
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0u32;
    for &v in mask.iter() {
        if v != current {
            runs.push(count);
            count = 0;
            current = v;
        }
        count += 1;
    }
    runs.push(count);
    RleMask { height, width, runs }
}

pub fn rle_decode(rle: &RleMask) -> Result<Mask2> {
    let total: u64 = rle.runs.iter().map(|&r| r as u64).sum();
    let expected = (rle.height * rle.width) as u64;
    if total != expected {
        return Err(Error::CorruptData(format!(
            "run lengths sum to {total}, expected {}x{} = {expected}",
            rle.height, rle.width
        )));
    }
    let mut flat = Vec::with_capacity(expected as usize);
    for (i, &run) in rle.runs.iter().enumerate() {
        flat.extend(std::iter::repeat_n(i % 2 == 1, run as usize));
    }
    Ok(Array2::from_shape_vec((rle.height, rle.width), flat).expect("length checked above"))
}

// ---------------------------------------------------------------------------
// On-disk formats
// ---------------------------------------------------------------------------

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelDtype {
    U8,
    I16,
    U16,
    I32,
    F32,
    F64,
}

impl VoxelDtype {
    pub fn size(self) -> usize {
        match self {
            VoxelDtype::U8 => 1,
            VoxelDtype::I16 | VoxelDtype::U16 => 2,
            VoxelDtype::I32 | VoxelDtype::F32 => 4,
            VoxelDtype::F64 => 8,
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f32> {
        let n = self.size();
        bytes
            .chunks_exact(n)
            .map(|c| match self {
                VoxelDtype::U8 => c[0] as f32,
                VoxelDtype::I16 => i16::from_le_bytes([c[0], c[1]]) as f32,
                VoxelDtype::U16 => u16::from_le_bytes([c[0], c[1]]) as f32,
                VoxelDtype::I32 => i32::from_le_bytes(c.try_into().unwrap()) as f32,
                VoxelDtype::F32 => f32::from_le_bytes(c.try_into().unwrap()),
                VoxelDtype::F64 => f64::from_le_bytes(c.try_into().unwrap()) as f32,
            })
            .collect()
    }
}

/// JSON sidecar of `<id>.vol.raw`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub version: u32,
    pub id: String,
    /// `[depth, height, width]`; the raw file is row-major with x fastest.
    pub shape: [usize; 3],
    pub spacing: Spacing,
    pub modality: String,
    pub dtype: VoxelDtype,
    #[serde(default)]
    pub normalized: bool,
}

impl VolumeSidecar {
    pub fn for_volume(volume: &Volume) -> Self {
        let (d, h, w) = volume.shape();
        VolumeSidecar {
            version: FORMAT_VERSION,
            id: volume.id.clone(),
            shape: [d, h, w],
            spacing: volume.spacing,
            modality: match volume.modality {
                Modality::Ct => "CT",
                Modality::Mri => "MRI",
                Modality::Synth => "SYNTH",
            }
            .to_string(),
            dtype: VoxelDtype::F32,
            normalized: volume.normalized,
        }
    }
}

pub fn volume_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.vol.raw")), dir.join(format!("{id}.vol.json")))
}

pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.mask.rle.json"))
}

/// Raw little-endian f32 payload of a volume.
pub fn volume_raw_bytes(volume: &Volume) -> Vec<u8> {
    volume.voxels.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Builds a volume from a sidecar and its raw payload.
pub fn volume_from_parts(sidecar: &VolumeSidecar, raw: &[u8]) -> Result<Volume> {
    if sidecar.version != FORMAT_VERSION {
        return Err(Error::CorruptData(format!(
            "unsupported volume format version {}",
            sidecar.version
        )));
    }
    let modality: Modality = sidecar.modality.parse()?;
    let [d, h, w] = sidecar.shape;
    let expected = d * h * w * sidecar.dtype.size();
    if raw.len() != expected {
        return Err(Error::CorruptData(format!(
            "raw payload has {} bytes, sidecar declares {expected}",
            raw.len()
        )));
    }
    let voxels = Array3::from_shape_vec((d, h, w), sidecar.dtype.decode(raw))
        .map_err(|e| Error::CorruptData(e.to_string()))?;
    let mut volume = Volume::new(sidecar.id.clone(), voxels, sidecar.spacing, modality)?;
    volume.normalized = sidecar.normalized;
    Ok(volume)
}

/// Writes `<id>.vol.raw` and `<id>.vol.json` into `dir`; returns the sidecar path.
pub fn write_volume(volume: &Volume, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let (raw_path, json_path) = volume_paths(dir, &volume.id);
    fs::write(&raw_path, volume_raw_bytes(volume))?;
    let sidecar = VolumeSidecar::for_volume(volume);
    fs::write(&json_path, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(json_path)
}

/// Reads a volume given either its sidecar (`.vol.json`) or raw (`.vol.raw`) path.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let name = path.to_string_lossy();
    let json_path = if let Some(stem) = name.strip_suffix(".vol.raw") {
        PathBuf::from(format!("{stem}.vol.json"))
    } else {
        path.to_path_buf()
    };
    let sidecar: VolumeSidecar = serde_json::from_slice(&fs::read(&json_path)?)?;
    let raw_path = PathBuf::from(
        json_path
            .to_string_lossy()
            .strip_suffix(".vol.json")
            .map(|s| format!("{s}.vol.raw"))
            .ok_or_else(|| Error::InvalidInput(format!("{} is not a .vol.json path", json_path.display())))?,
    );
    volume_from_parts(&sidecar, &fs::read(raw_path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRle {
    pub index: usize,
    pub rle: RleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: u32,
    pub name: String,
    pub source: LabelSource,
    /// Non-empty z slices only.
    pub slices: Vec<SliceRle>,
}

/// Serialized form of `<id>.mask.rle.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub version: u32,
    pub volume_id: String,
    pub shape: [usize; 3],
    pub instances: Vec<InstanceRecord>,
}

impl MaskFile {
    pub fn from_mask(volume_id: &str, mask: &VolumeMask) -> Self {
        let (d, h, w) = mask.shape();
        let mut ids: Vec<u32> = mask.instances.keys().copied().collect();
        for id in mask.present_ids() {
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        ids.sort_unstable();
        let instances = ids
            .into_iter()
            .map(|id| {
                let info = mask.instances.get(&id).cloned().unwrap_or(InstanceInfo {
                    name: format!("instance-{id}"),
                    source: LabelSource::Predicted,
                });
                let slices = (0..d)
                    .filter_map(|z| {
                        let m = mask.instance_slice(Axis::Z, z, id);
                        m.iter().any(|&v| v).then(|| SliceRle {
                            index: z,
                            rle: rle_encode(m.view()),
                        })
                    })
                    .collect();
                InstanceRecord {
                    id,
                    name: info.name,
                    source: info.source,
                    slices,
                }
            })
            .collect();
        MaskFile {
            version: FORMAT_VERSION,
            volume_id: volume_id.to_string(),
            shape: [d, h, w],
            instances,
        }
    }

    pub fn to_mask(&self) -> Result<VolumeMask> {
        if self.version != FORMAT_VERSION {
            return Err(Error::CorruptData(format!(
                "unsupported mask format version {}",
                self.version
            )));
        }
        let [d, h, w] = self.shape;
        let mut mask = VolumeMask::empty((d, h, w));
        for inst in &self.instances {
            if inst.id == 0 {
                return Err(Error::CorruptData("instance id 0 is reserved for background".into()));
            }
            mask.instances.insert(
                inst.id,
                InstanceInfo {
                    name: inst.name.clone(),
                    source: inst.source,
                },
            );
            for s in &inst.slices {
                if s.index >= d || s.rle.height != h || s.rle.width != w {
                    return Err(Error::CorruptData(format!(
                        "slice {} of instance {} does not fit shape {:?}",
                        s.index, inst.id, self.shape
                    )));
                }
                let m = rle_decode(&s.rle)?;
                mask.paint_slice(Axis::Z, s.index, m.view(), inst.id);
            }
        }
        Ok(mask)
    }
}

/// Deterministic JSON bytes of a mask file.
pub fn mask_file_bytes(volume_id: &str, mask: &VolumeMask) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(&MaskFile::from_mask(volume_id, mask))?)
}

pub fn write_mask(volume_id: &str, mask: &VolumeMask, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, mask_file_bytes(volume_id, mask)?)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<VolumeMask> {
    let file: MaskFile = serde_json::from_slice(&fs::read(path)?)?;
    file.to_mask()
}

/// Copies a 2D mask into a window-sized 3-slice stack at slice `i`.
pub fn stack_slice(target: &mut Array3<bool>, i: usize, mask: ArrayView2<bool>) {
    target.slice_mut(s![i, .., ..]).assign(&mask);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn ct_volume(value: f32) -> Volume {
        Volume::new("ct", Array3::from_elem((3, 3, 3), value), Spacing::default(), Modality::Ct).unwrap()
    }

    #[test]
    fn ct_normalization_matches_hand_values() {
        assert_eq!(clip_and_normalize(&ct_volume(-500.0)).voxels[[0, 0, 0]], 0.0);
        assert_eq!(clip_and_normalize(&ct_volume(400.0)).voxels[[0, 0, 0]], 255.0);
        // (100 + 200) / 600 * 255 = 127.5, ties away from zero
        assert_eq!(clip_and_normalize(&ct_volume(100.0)).voxels[[0, 0, 0]], 128.0);
    }

    #[test]
    fn mri_uses_its_own_window() {
        let v = Volume::new("mr", Array3::from_elem((3, 3, 3), 700.0), Spacing::default(), Modality::Mri).unwrap();
        assert_eq!(clip_and_normalize(&v).voxels[[1, 1, 1]], 255.0);
        let v = Volume::new("mr", Array3::from_elem((3, 3, 3), 300.0), Spacing::default(), Modality::Mri).unwrap();
        assert_eq!(clip_and_normalize(&v).voxels[[1, 1, 1]], 128.0);
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut voxels = Array3::zeros((4, 4, 4));
        for (i, v) in voxels.iter_mut().enumerate() {
            *v = i as f32 * 13.0 - 300.0;
        }
        let v = Volume::new("ct", voxels, Spacing::default(), Modality::Ct).unwrap();
        let once = clip_and_normalize(&v);
        assert_eq!(clip_and_normalize(&once), once);
    }

    #[test]
    fn unknown_modality_is_a_configuration_error() {
        assert!(matches!("PET".parse::<Modality>(), Err(Error::Config(_))));
    }

    #[test]
    fn volume_rejects_thin_shapes_and_bad_spacing() {
        assert!(Volume::new("a", Array3::zeros((2, 5, 5)), Spacing::default(), Modality::Synth).is_err());
        let bad = Spacing { x: 1.0, y: 0.0, z: 1.0 };
        assert!(Volume::new("a", Array3::zeros((3, 5, 5)), bad, Modality::Synth).is_err());
    }

    fn mask_with_central_area(area: usize) -> (Volume, VolumeMask) {
        let volume = Volume::new("v", Array3::zeros((3, 128, 128)), Spacing::default(), Modality::Synth).unwrap();
        let mut mask = VolumeMask::empty((3, 128, 128));
        for i in 0..area {
            mask.labels[[1, i / 10, i % 10]] = 1;
        }
        (volume, mask)
    }

    #[test]
    fn area_filter_drops_small_central_instances() {
        // 20 / 16384 = 0.122% < 0.14%
        let (v, m) = mask_with_central_area(20);
        assert!(extract_windows(&v, &m, Axis::Z).unwrap().is_empty());
        // 30 / 16384 = 0.183%
        let (v, m) = mask_with_central_area(30);
        let w = extract_windows(&v, &m, Axis::Z).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].center_index, 1);
        assert_eq!(w[0].indicator, [1, 1, 1]);
    }

    #[test]
    fn windows_are_emitted_per_instance() {
        let volume = Volume::new("v", Array3::zeros((5, 20, 20)), Spacing::default(), Modality::Synth).unwrap();
        let mut mask = VolumeMask::empty((5, 20, 20));
        mask.labels.slice_mut(s![.., 0..5, 0..5]).fill(1);
        mask.labels.slice_mut(s![.., 10..15, 10..15]).fill(2);
        let windows = extract_windows(&volume, &mask, Axis::Z).unwrap();
        assert_eq!(windows.len(), 3 * 2);
        for w in &windows {
            let labels = w.labels.as_ref().unwrap();
            let id = w.instance.unwrap();
            let expected = mask.instance_slice(Axis::Z, w.center_index, id);
            assert_eq!(labels.index_axis(NdAxis(0), 1), expected);
        }
    }

    #[test]
    fn x_axis_windows_use_zy_slices() {
        let mut voxels = Array3::zeros((4, 5, 6));
        voxels[[2, 3, 1]] = 9.0;
        let v = Volume::new("v", voxels, Spacing::default(), Modality::Synth).unwrap();
        let w = SliceWindow::from_volume(&v, Axis::X, 2).unwrap();
        assert_eq!(w.pixels.dim(), (3, 4, 5));
        assert_eq!(w.pixels[[0, 2, 3]], 9.0);
    }

    #[test]
    fn resize_identity_and_nearest_labels() {
        let mut w = SliceWindow {
            pixels: Array3::from_elem((3, 2, 2), 5.0),
            axis: Axis::Z,
            center_index: 1,
            labels: None,
            indicator: [0, 0, 0],
            instance: None,
        };
        let checker = array![[true, false], [false, true]];
        let mut labels = Array3::from_elem((3, 2, 2), false);
        for i in 0..3 {
            stack_slice(&mut labels, i, checker.view());
        }
        w.labels = Some(labels);
        w.indicator = [1, 1, 1];
        assert!(resize_window(&w, (8, 8)).is_err());
        let big = resize_window(&w, (16, 16)).unwrap();
        assert!(big.pixels.iter().all(|&p| (p - 5.0).abs() < 1e-6));
        assert_eq!(big.indicator, [1, 1, 1]);
        let l = big.labels.as_ref().unwrap();
        assert!(l[[0, 0, 0]] && l[[0, 7, 7]] && !l[[0, 0, 8]] && l[[0, 15, 15]]);
        assert_eq!(resize_window(&big, (16, 16)).unwrap(), big);
    }

    #[test]
    fn rle_hand_examples() {
        assert_eq!(rle_encode(Array2::from_elem((4, 4), false).view()).runs, vec![16]);
        assert_eq!(rle_encode(Array2::from_elem((4, 4), true).view()).runs, vec![0, 16]);
        let m = array![[false, false, true, true], [false, false, false, false]];
        assert_eq!(rle_encode(m.view()).runs, vec![2, 2, 4]);
    }

    #[test]
    fn rle_decode_rejects_bad_run_sum() {
        let rle = RleMask { height: 2, width: 2, runs: vec![1, 1] };
        assert!(matches!(rle_decode(&rle), Err(Error::CorruptData(_))));
    }

    proptest! {
        #[test]
        fn rle_round_trips(h in 1usize..12, w in 1usize..12, bits in proptest::collection::vec(any::<bool>(), 144)) {
            let m = Array2::from_shape_fn((h, w), |(y, x)| bits[y * 12 + x]);
            let rle = rle_encode(m.view());
            prop_assert_eq!(rle.runs.iter().map(|&r| r as usize).sum::<usize>(), h * w);
            prop_assert_eq!(rle.area(), m.iter().filter(|&&b| b).count());
            prop_assert_eq!(rle_decode(&rle).unwrap(), m);
        }

        #[test]
        fn window_count_is_bounded(seed in 0u64..1000) {
            let mut mask = VolumeMask::empty((6, 16, 16));
            let mut s = seed;
            for l in mask.labels.iter_mut() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *l = ((s >> 60) % 3) as u32;
            }
            let volume = Volume::new("v", Array3::zeros((6, 16, 16)), Spacing::default(), Modality::Synth).unwrap();
            let windows = extract_windows(&volume, &mask, Axis::Z).unwrap();
            prop_assert!(windows.len() <= (6 - 2) * 2);
            prop_assert!(windows.iter().all(|w| w.indicator[1] == 1));
        }
    }

    #[test]
    fn volume_and_mask_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut voxels = Array3::zeros((3, 4, 5));
        voxels[[1, 2, 3]] = -12.5;
        let v = Volume::new("vol-a", voxels, Spacing { x: 0.5, y: 0.5, z: 2.0 }, Modality::Ct).unwrap();
        let sidecar = write_volume(&v, dir.path()).unwrap();
        assert_eq!(read_volume(&sidecar).unwrap(), v);

        let mut mask = VolumeMask::empty((3, 4, 5));
        mask.labels[[0, 1, 1]] = 2;
        mask.labels[[2, 3, 4]] = 1;
        mask.instances.insert(1, InstanceInfo { name: "a".into(), source: LabelSource::GroundTruth });
        mask.instances.insert(2, InstanceInfo { name: "b".into(), source: LabelSource::Predicted });
        let path = mask_path(dir.path(), "vol-a");
        write_mask("vol-a", &mask, &path).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
    }

    #[test]
    fn truncated_raw_payload_is_corrupt() {
        let v = Volume::new("t", Array3::zeros((3, 3, 3)), Spacing::default(), Modality::Synth).unwrap();
        let sidecar = VolumeSidecar::for_volume(&v);
        let raw = volume_raw_bytes(&v);
        assert!(matches!(volume_from_parts(&sidecar, &raw[..raw.len() - 4]), Err(Error::CorruptData(_))));
    }
}
