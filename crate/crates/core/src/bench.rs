//! Synthetic phantoms with analytic ground truth, overlap metrics and the
//! evaluation harnesses (prompt efficiency, noisy box prompts, z spacing).

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, ArrayView, Axis as NdAxis, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops;
use crate::inference::{segment_volume, InferenceConfig, WindowPredictor};
use crate::postprocess::{best_hypothesis, filter_predictions, tight_bbox};
use crate::prompt::Prompt;
use crate::volume::{Axis, InstanceInfo, LabelSource, Modality, SliceWindow, Spacing, Volume, VolumeMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    Sphere,
    Ellipsoid,
    Tube,
    TwoBlob,
}

impl PhantomKind {
    pub const ALL: [PhantomKind; 4] = [
        PhantomKind::Sphere,
        PhantomKind::Ellipsoid,
        PhantomKind::Tube,
        PhantomKind::TwoBlob,
    ];
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhantomKind::Sphere => "sphere",
            PhantomKind::Ellipsoid => "ellipsoid",
            PhantomKind::Tube => "tube",
            PhantomKind::TwoBlob => "two_blob",
        })
    }
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(PhantomKind::Sphere),
            "ellipsoid" => Ok(PhantomKind::Ellipsoid),
            "tube" => Ok(PhantomKind::Tube),
            "two_blob" => Ok(PhantomKind::TwoBlob),
            other => Err(Error::Config(format!("unknown phantom kind {other:?}"))),
        }
    }
}

/// Geometry and intensity of a phantom, in voxel units `[z, y, x]`.
///
/// * sphere: `radii[0]` is the radius.
/// * ellipsoid: axis-aligned semi-axes `radii`.
/// * tube: cylinder parallel to z of radius `radii[1]` and half-length `radii[0]`.
/// * two_blob: two spheres of radius `radii[0]` offset by `±radii[2]` along x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub background: f32,
    pub foreground: f32,
    pub noise_sigma: f32,
}

impl PhantomParams {
    /// Centred default geometry for a `(d, h, w)` volume.
    pub fn centered(kind: PhantomKind, shape: (usize, usize, usize)) -> Self {
        let (d, h, w) = shape;
        let c = [d as f64 / 2.0, h as f64 / 2.0, w as f64 / 2.0];
        let m = d.min(h).min(w) as f64;
        let radii = match kind {
            PhantomKind::Sphere => [m * 0.25; 3],
            PhantomKind::Ellipsoid => [m * 0.3, m * 0.2, m * 0.25],
            PhantomKind::Tube => [m * 0.3, m * 0.12, 0.0],
            PhantomKind::TwoBlob => [m * 0.15, 0.0, m * 0.22],
        };
        PhantomParams {
            center: c,
            radii,
            ..Default::default()
        }
    }

    /// Randomized geometry that stays clear of the volume faces.
    pub fn random<R: Rng + ?Sized>(kind: PhantomKind, shape: (usize, usize, usize), rng: &mut R) -> Self {
        let (d, h, w) = shape;
        let m = d.min(h).min(w) as f64;
        let radii = match kind {
            PhantomKind::Sphere => {
                let r = rng.gen_range(m * 0.14..m * 0.24);
                [r; 3]
            }
            PhantomKind::Ellipsoid => [
                rng.gen_range(m * 0.12..m * 0.26),
                rng.gen_range(m * 0.12..m * 0.26),
                rng.gen_range(m * 0.12..m * 0.26),
            ],
            PhantomKind::Tube => [rng.gen_range(m * 0.2..m * 0.3), rng.gen_range(m * 0.08..m * 0.14), 0.0],
            PhantomKind::TwoBlob => [rng.gen_range(m * 0.1..m * 0.15), 0.0, rng.gen_range(m * 0.2..m * 0.26)],
        };
        let reach = match kind {
            PhantomKind::TwoBlob => [radii[0], radii[0], radii[0] + radii[2]],
            PhantomKind::Tube => [radii[0], radii[1], radii[1]],
            _ => radii,
        };
        let dims = [d as f64, h as f64, w as f64];
        let mut center = [0.0; 3];
        for a in 0..3 {
            let margin = reach[a] + 3.0;
            let lo = margin;
            let hi = (dims[a] - margin).max(lo + 1e-9);
            center[a] = rng.gen_range(lo..hi);
        }
        PhantomParams {
            center,
            radii,
            ..Default::default()
        }
    }
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            center: [0.0; 3],
            radii: [1.0; 3],
            background: 40.0,
            foreground: 180.0,
            noise_sigma: 10.0,
        }
    }
}

/// Label of voxel centre `(z, y, x)`; 0 is background.
pub fn phantom_label(kind: PhantomKind, p: &PhantomParams, z: f64, y: f64, x: f64) -> u32 {
    let [cz, cy, cx] = p.center;
    let (dz, dy, dx) = (z - cz, y - cy, x - cx);
    let r = p.radii;
    let inside = match kind {
        PhantomKind::Sphere => dz * dz + dy * dy + dx * dx <= r[0] * r[0],
        PhantomKind::Ellipsoid => (dz / r[0]).powi(2) + (dy / r[1]).powi(2) + (dx / r[2]).powi(2) <= 1.0,
        PhantomKind::Tube => dz.abs() <= r[0] && dy * dy + dx * dx <= r[1] * r[1],
        PhantomKind::TwoBlob => {
            let a = dz * dz + dy * dy + (dx + r[2]).powi(2) <= r[0] * r[0];
            let b = dz * dz + dy * dy + (dx - r[2]).powi(2) <= r[0] * r[0];
            return if a {
                1
            } else if b {
                2
            } else {
                0
            };
        }
    };
    inside as u32
}

/// Builds a phantom volume (`SYNTH`, already in `[0, 255]`) and its exact
/// instance mask. Deterministic for a given seed.
pub fn make_phantom(
    kind: PhantomKind,
    shape: (usize, usize, usize),
    params: &PhantomParams,
    seed: u64,
) -> Result<(Volume, VolumeMask)> {
    let (d, h, w) = shape;
    if d < 16 || h < 16 || w < 16 {
        return Err(Error::InvalidParameters(format!("phantom shape {shape:?} is below 16^3")));
    }
    if params.noise_sigma < 0.0 || !params.noise_sigma.is_finite() {
        return Err(Error::InvalidParameters("noise sigma must be non-negative".into()));
    }
    let labels = Array3::from_shape_fn(shape, |(z, y, x)| phantom_label(kind, params, z as f64, y as f64, x as f64));
    let touched = labels
        .axis_iter(NdAxis(0))
        .filter(|s| s.iter().any(|&l| l != 0))
        .count();
    if touched < 3 {
        return Err(Error::InvalidParameters(format!(
            "{kind} phantom covers {touched} slices; at least 3 are required"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, params.noise_sigma.max(f32::MIN_POSITIVE)).expect("valid sigma");
    let voxels = labels.mapv(|l| {
        let base = if l != 0 { params.foreground } else { params.background };
        let n = if params.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        (base + n).clamp(0.0, 255.0)
    });
    let mut volume = Volume::new(format!("{kind}_{seed}"), voxels, Spacing::default(), Modality::Synth)?;
    volume.normalized = true;
    let mut mask = VolumeMask {
        labels,
        instances: Default::default(),
    };
    for id in mask.present_ids() {
        mask.instances.insert(
            id,
            InstanceInfo {
                name: format!("{kind}_{id}"),
                source: LabelSource::GroundTruth,
            },
        );
    }
    Ok((volume, mask))
}

/// `2|p & g| / (|p| + |g|)`, 1 when both are empty.
pub fn dice<D: Dimension>(pred: ArrayView<bool, D>, gt: ArrayView<bool, D>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::InvalidInput(format!(
            "dice of shapes {:?} and {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (mut inter, mut ps, mut gs) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += (p && g) as usize;
        ps += p as usize;
        gs += g as usize;
    }
    if ps + gs == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (ps + gs) as f64)
}

/// Intersection over union, 1 when both are empty.
pub fn iou<D: Dimension>(pred: ArrayView<bool, D>, gt: ArrayView<bool, D>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::InvalidInput(format!(
            "iou of shapes {:?} and {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Outcome of annotating one image: prompts spent and Dice reached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub prompts_used: usize,
    pub dice: f64,
}

/// Walks `results` in order, spending each image's prompts from `budget`
/// while enough remain, and counts the images whose Dice exceeds `dice_min`.
pub fn prompt_efficiency(results: &[AnnotationResult], budget: usize, dice_min: f64) -> usize {
    let mut remaining = budget;
    let mut count = 0;
    for r in results {
        let cost = r.prompts_used.max(1);
        if cost > remaining {
            break;
        }
        remaining -= cost;
        if r.dice > dice_min {
            count += 1;
        }
    }
    count
}

/// Resamples along z to `round(depth / ratio)` slices: linear interpolation
/// for intensities, nearest neighbour for labels.
pub fn resample_z(volume: &Volume, mask: &VolumeMask, ratio: f64) -> Result<(Volume, VolumeMask)> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidParameters(format!("resample ratio must be positive, got {ratio}")));
    }
    mask.check_aligned(volume)?;
    let (d, h, w) = volume.shape();
    let nd = (d as f64 / ratio).round() as usize;
    if nd < 3 {
        return Err(Error::InvalidParameters(format!(
            "resampling depth {d} by {ratio} leaves {nd} slices"
        )));
    }
    let mut out = volume.clone();
    out.spacing.z *= ratio;
    if nd == d {
        return Ok((out, mask.clone()));
    }
    let mut voxels = Array3::zeros((nd, h, w));
    let mut labels = Array3::zeros((nd, h, w));
    for z in 0..nd {
        let (lo, hi, f) = imgops::linear_axis_taps(z, d, nd);
        let a = volume.voxels.index_axis(NdAxis(0), lo);
        let b = volume.voxels.index_axis(NdAxis(0), hi);
        let f = f as f32;
        voxels
            .index_axis_mut(NdAxis(0), z)
            .assign(&(&a * (1.0 - f) + &b * f));
        labels
            .index_axis_mut(NdAxis(0), z)
            .assign(&mask.labels.index_axis(NdAxis(0), imgops::nearest_index(z, d, nd)));
    }
    out.voxels = voxels;
    Ok((
        out,
        VolumeMask {
            labels,
            instances: mask.instances.clone(),
        },
    ))
}

/// Slice with the largest area of `id` along `axis`, restricted to interior
/// slices (a window must fit around it).
pub fn equator_slice(mask: &VolumeMask, axis: Axis, id: u32) -> Option<usize> {
    let dim = mask.labels.len_of(axis.nd());
    (1..dim.saturating_sub(1))
        .map(|i| (i, mask.slice(axis, i).iter().filter(|&&l| l == id).count()))
        .filter(|&(_, a)| a > 0)
        .fold(None, |best: Option<(usize, usize)>, (i, a)| match best {
            Some((_, ba)) if ba >= a => best,
            _ => Some((i, a)),
        })
        .map(|(i, _)| i)
}

/// Result of segmenting one instance of a volume from a single box prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeEvaluation {
    pub dice: f64,
    pub start_index: usize,
    pub result: crate::inference::SegmentationResult,
}

/// One tight box on the equator slice of instance `id`, then propagation.
pub fn evaluate_volume<P: WindowPredictor + ?Sized>(
    predictor: &P,
    volume: &Volume,
    gt: &VolumeMask,
    axis: Axis,
    id: u32,
    config: &InferenceConfig,
) -> Result<VolumeEvaluation> {
    let start = equator_slice(gt, axis, id)
        .ok_or_else(|| Error::InvalidInput(format!("instance {id} not present on an interior slice")))?;
    let bbox = tight_bbox(gt.instance_slice(axis, start, id).view()).expect("equator slice is non-empty");
    let result = segment_volume(predictor, volume, axis, start, &Prompt::Box(bbox), config, None)?;
    let pred = result.mask.foreground();
    let d = dice(pred.view(), gt.instance(id).view())?;
    Ok(VolumeEvaluation {
        dice: d,
        start_index: start,
        result,
    })
}

/// Per-slice baseline: every slice containing the target receives its own
/// tight box, the window centred there is predicted, and only its middle
/// slice is kept. Returns the Dice and the number of prompts spent.
pub fn per_slice_baseline<P: WindowPredictor + ?Sized>(
    predictor: &P,
    volume: &Volume,
    gt: &VolumeMask,
    axis: Axis,
    id: u32,
    config: &InferenceConfig,
) -> Result<AnnotationResult> {
    let dim = volume.dim(axis);
    let mut pred = VolumeMask::empty(volume.shape());
    let mut prompts = 0;
    for i in 0..dim {
        let truth = gt.instance_slice(axis, i, id);
        let Some(bbox) = tight_bbox(truth.view()) else { continue };
        prompts += 1;
        let center = i.clamp(1, dim - 2);
        let slot = i + 1 - center;
        let window = SliceWindow::from_volume(volume, axis, center)?;
        let out = predictor.predict_window(&window.pixels, &Prompt::Box(bbox))?;
        if let Some(h) = best_hypothesis(filter_predictions(&out, &config.filter)) {
            pred.paint_slice(axis, i, h.slice(slot), 1);
        }
    }
    Ok(AnnotationResult {
        prompts_used: prompts.max(1),
        dice: dice(pred.foreground().view(), gt.instance(id).view())?,
    })
}

pub const NOISY_TRANSLATIONS: [f64; 5] = [-0.10, -0.05, 0.0, 0.05, 0.10];
pub const NOISY_SCALES: [f64; 5] = [0.9, 1.0, 1.1, 1.25, 1.5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyCell {
    pub translation: f64,
    pub scale: f64,
    pub dice: f64,
}

/// Window-level sensitivity to box perturbations: the equator window of
/// instance `id` is prompted with its tight box translated (along both axes,
/// as a fraction of the side) and scaled about its centre; the Dice of the
/// best surviving hypothesis over all three slices is recorded per cell.
pub fn noisy_prompt_suite<P: WindowPredictor + ?Sized>(
    predictor: &P,
    volume: &Volume,
    gt: &VolumeMask,
    axis: Axis,
    id: u32,
    config: &InferenceConfig,
) -> Result<Vec<NoisyCell>> {
    let center = equator_slice(gt, axis, id)
        .ok_or_else(|| Error::InvalidInput(format!("instance {id} not present on an interior slice")))?;
    let window = SliceWindow::from_volume(volume, axis, center)?;
    let (h, w) = (window.height(), window.width());
    let mut truth = Array3::from_elem((3, h, w), false);
    for (slot, i) in (center - 1..=center + 1).enumerate() {
        truth.index_axis_mut(NdAxis(0), slot).assign(&gt.instance_slice(axis, i, id));
    }
    let bbox = tight_bbox(truth.index_axis(NdAxis(0), 1)).expect("equator slice is non-empty");
    let mut cells = Vec::with_capacity(NOISY_TRANSLATIONS.len() * NOISY_SCALES.len());
    for &t in &NOISY_TRANSLATIONS {
        for &s in &NOISY_SCALES {
            let prompt = Prompt::Box(bbox.perturbed(s, t, h, w));
            let out = predictor.predict_window(&window.pixels, &prompt)?;
            let pred = best_hypothesis(filter_predictions(&out, &config.filter))
                .map(|hm| hm.masks)
                .unwrap_or_else(|| Array3::from_elem((3, h, w), false));
            cells.push(NoisyCell {
                translation: t,
                scale: s,
                dice: dice(pred.view(), truth.view())?,
            });
        }
    }
    Ok(cells)
}

/// Flat `metric,value,config_hash` table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchTable {
    pub rows: Vec<(String, f64)>,
}

impl BenchTable {
    pub fn push(&mut self, metric: impl Into<String>, value: f64) {
        self.rows.push((metric.into(), value));
    }

    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut out = String::from("metric,value,config_hash\n");
        for (m, v) in &self.rows {
            out.push_str(&format!("{m},{v},{config_hash}\n"));
        }
        out
    }
}

/// Short stable digest of a serializable configuration.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::IntensityPredictor;
    use proptest::prelude::*;

    #[test]
    fn sphere_volume_matches_analytic_volume() {
        for r in [8.0, 10.0, 12.5] {
            let p = PhantomParams {
                center: [20.0, 20.0, 20.0],
                radii: [r; 3],
                ..Default::default()
            };
            let (_, m) = make_phantom(PhantomKind::Sphere, (40, 40, 40), &p, 0).unwrap();
            let count = m.labels.iter().filter(|&&l| l != 0).count() as f64;
            let exact = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
            assert!((count - exact).abs() / exact < 0.05, "r {r}: {count} vs {exact}");
        }
    }

    #[test]
    fn phantoms_are_seed_deterministic() {
        let p = PhantomParams::centered(PhantomKind::Ellipsoid, (24, 24, 24));
        let a = make_phantom(PhantomKind::Ellipsoid, (24, 24, 24), &p, 7).unwrap();
        let b = make_phantom(PhantomKind::Ellipsoid, (24, 24, 24), &p, 7).unwrap();
        assert_eq!(a, b);
        let c = make_phantom(PhantomKind::Ellipsoid, (24, 24, 24), &p, 8).unwrap();
        assert_ne!(a.0.voxels, c.0.voxels);
        assert!(a.0.voxels.iter().all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn two_blob_has_two_components() {
        let p = PhantomParams::centered(PhantomKind::TwoBlob, (32, 32, 32));
        let (_, m) = make_phantom(PhantomKind::TwoBlob, (32, 32, 32), &p, 0).unwrap();
        assert_eq!(m.present_ids(), vec![1, 2]);
        let z = m.labels.index_axis(NdAxis(0), 16).mapv(|l| l != 0);
        let (_, sizes) = imgops::label_components(z.view(), imgops::Connectivity::Eight);
        assert_eq!(sizes.len(), 2);
    }

    #[test]
    fn phantom_parameter_errors() {
        let p = PhantomParams::centered(PhantomKind::Sphere, (16, 16, 16));
        assert!(matches!(
            make_phantom(PhantomKind::Sphere, (8, 16, 16), &p, 0),
            Err(Error::InvalidParameters(_))
        ));
        let flat = PhantomParams {
            center: [8.0, 8.0, 8.0],
            radii: [0.5, 6.0, 6.0],
            ..Default::default()
        };
        assert!(make_phantom(PhantomKind::Ellipsoid, (16, 16, 16), &flat, 0).is_err());
    }

    #[test]
    fn random_phantoms_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in PhantomKind::ALL {
            for s in 0..10 {
                let p = PhantomParams::random(kind, (48, 48, 48), &mut rng);
                let (_, m) = make_phantom(kind, (48, 48, 48), &p, s).unwrap();
                for face in [0usize, 47] {
                    for a in 0..3 {
                        assert!(m.labels.index_axis(NdAxis(a), face).iter().all(|&l| l == 0), "{kind}");
                    }
                }
            }
        }
    }

    #[test]
    fn dice_examples() {
        let mut p = Array3::from_elem((1, 2, 5), false);
        let mut g = Array3::from_elem((1, 2, 5), false);
        for i in 0..6 {
            p[[0, i / 5, i % 5]] = true;
        }
        for i in 3..7 {
            g[[0, i / 5, i % 5]] = true;
        }
        assert!((dice(p.view(), g.view()).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(dice(g.view(), g.view()).unwrap(), 1.0);
        assert_eq!(dice(p.view(), p.mapv(|v| !v).view()).unwrap(), 0.0);
        let e = Array3::from_elem((2, 2, 2), false);
        assert_eq!(dice(e.view(), e.view()).unwrap(), 1.0);
        assert!(dice(e.view(), p.view()).is_err());
    }

    proptest! {
        #[test]
        fn dice_is_symmetric(a in proptest::collection::vec(any::<bool>(), 64), b in proptest::collection::vec(any::<bool>(), 64)) {
            let a = Array3::from_shape_vec((4, 4, 4), a).unwrap();
            let b = Array3::from_shape_vec((4, 4, 4), b).unwrap();
            prop_assert_eq!(dice(a.view(), b.view()).unwrap(), dice(b.view(), a.view()).unwrap());
            prop_assert_eq!(dice(a.view(), a.view()).unwrap(), 1.0);
        }
    }

    #[test]
    fn prompt_efficiency_examples() {
        let ok = |p| AnnotationResult { prompts_used: p, dice: 1.0 };
        assert_eq!(prompt_efficiency(&vec![ok(1); 1000], 1000, 0.9), 1000);
        assert_eq!(prompt_efficiency(&vec![ok(5); 1000], 1000, 0.9), 200);
        let bad = AnnotationResult { prompts_used: 1, dice: 0.5 };
        assert_eq!(prompt_efficiency(&vec![bad; 1000], 1000, 0.9), 0);
    }

    #[test]
    fn resample_examples() {
        let p = PhantomParams::centered(PhantomKind::Sphere, (64, 32, 32));
        let (v, m) = make_phantom(PhantomKind::Sphere, (64, 32, 32), &p, 1).unwrap();
        let (same_v, same_m) = resample_z(&v, &m, 1.0).unwrap();
        assert_eq!(same_v.voxels, v.voxels);
        assert_eq!(same_m, m);
        let (half_v, half_m) = resample_z(&v, &m, 2.0).unwrap();
        assert_eq!(half_v.shape(), (32, 32, 32));
        assert_eq!(half_m.shape(), (32, 32, 32));
        assert_eq!(half_v.spacing.z, 2.0);
        assert!(resample_z(&v, &m, 30.0).is_err());
        assert!(resample_z(&v, &m, 0.0).is_err());
    }

    #[test]
    fn resample_round_trip_preserves_smooth_shapes() {
        for kind in [PhantomKind::Sphere, PhantomKind::Ellipsoid] {
            let p = PhantomParams::centered(kind, (48, 32, 32));
            let (v, m) = make_phantom(kind, (48, 32, 32), &p, 0).unwrap();
            for r in [1.5, 2.0] {
                let (v2, m2) = resample_z(&v, &m, r).unwrap();
                let (_, back) = resample_z(&v2, &m2, v2.shape().0 as f64 / 48.0).unwrap();
                assert_eq!(back.shape(), m.shape());
                let d = dice(back.foreground().view(), m.foreground().view()).unwrap();
                assert!(d >= 0.95, "{kind} ratio {r}: {d}");
            }
        }
    }

    #[test]
    fn noisy_suite_has_identity_cell() {
        let p = PhantomParams::centered(PhantomKind::Sphere, (32, 32, 32));
        let (v, m) = make_phantom(PhantomKind::Sphere, (32, 32, 32), &p, 2).unwrap();
        let cfg = InferenceConfig::default();
        let cells = noisy_prompt_suite(&IntensityPredictor::default(), &v, &m, Axis::Z, 1, &cfg).unwrap();
        assert_eq!(cells.len(), 25);
        let identity = cells.iter().find(|c| c.scale == 1.0 && c.translation == 0.0).unwrap();
        let center = equator_slice(&m, Axis::Z, 1).unwrap();
        let window = SliceWindow::from_volume(&v, Axis::Z, center).unwrap();
        let bbox = tight_bbox(m.instance_slice(Axis::Z, center, 1).view()).unwrap();
        let out = IntensityPredictor::default().predict_window(&window.pixels, &Prompt::Box(bbox)).unwrap();
        let h = best_hypothesis(filter_predictions(&out, &cfg.filter)).unwrap();
        let mut truth = Array3::from_elem(h.masks.dim(), false);
        for (slot, i) in (center - 1..=center + 1).enumerate() {
            truth.index_axis_mut(NdAxis(0), slot).assign(&m.instance_slice(Axis::Z, i, 1));
        }
        assert_eq!(identity.dice, dice(h.masks.view(), truth.view()).unwrap());
    }

    #[test]
    fn oracle_predictor_segments_phantoms() {
        let p = PhantomParams::centered(PhantomKind::Sphere, (32, 32, 32));
        let (v, m) = make_phantom(PhantomKind::Sphere, (32, 32, 32), &p, 3).unwrap();
        let eval = evaluate_volume(&IntensityPredictor::default(), &v, &m, Axis::Z, 1, &InferenceConfig::default()).unwrap();
        assert!(eval.dice > 0.97, "{}", eval.dice);
        let base = per_slice_baseline(&IntensityPredictor::default(), &v, &m, Axis::Z, 1, &InferenceConfig::default()).unwrap();
        assert!(base.prompts_used > 10);
    }

    #[test]
    fn csv_table_and_hash() {
        let mut t = BenchTable::default();
        t.push("dice_mean", 0.5);
        let h = config_hash(&InferenceConfig::default()).unwrap();
        assert_eq!(h.len(), 12);
        assert_eq!(h, config_hash(&InferenceConfig::default()).unwrap());
        assert_eq!(t.to_csv(&h), format!("metric,value,config_hash\ndice_mean,0.5,{h}\n"));
    }
}
