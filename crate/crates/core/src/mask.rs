//! Synthetic face-mask overlays: the lower face (nose tip, mouth, chin and
//! cheeks) is painted over with a solid polygon.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::fusion::StreamMask;
use crate::geometry::{detect_face, write_sidecar, DetectedFace, FaceBox, FaceDetector, FaceMesh, Keypoint, Vec2};
use crate::manifest::{DatasetManifest, SampleRecord, Split};
use crate::raster::{PixelMask, Raster};
use crate::training::{evaluate, train, FeaturePipeline};

/// Keypoints whose convex hull is covered.
pub const MASK_KEYPOINTS: [Keypoint; 8] = [
    Keypoint::NoseTip,
    Keypoint::LipCornerLeft,
    Keypoint::LipCornerRight,
    Keypoint::UpperLipCenter,
    Keypoint::LowerLipCenter,
    Keypoint::ChinCenter,
    Keypoint::CheekCenterLeft,
    Keypoint::CheekCenterRight,
];

/// Half a pixel diagonal: guarantees the pixel holding each hull vertex is covered.
const PIXEL_PAD: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskStyle {
    pub color: [f32; 3],
    pub opacity: f32,
    /// Extra padding around the hull as a fraction of the interocular distance.
    pub margin: f64,
}

impl Default for MaskStyle {
    fn default() -> Self {
        MaskStyle {
            color: [0.92, 0.94, 0.96],
            opacity: 1.0,
            margin: 0.1,
        }
    }
}

impl MaskStyle {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Config(format!("mask opacity {} outside [0, 1]", self.opacity)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("mask margin {} must be finite and non-negative", self.margin)));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("mask color channels must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn hull_vertices(mesh: &FaceMesh, face_box: &FaceBox) -> Result<Vec<Vec2>> {
    let missing: Vec<String> = MASK_KEYPOINTS
        .iter()
        .filter(|k| mesh.index_of(**k).is_none())
        .map(|k| k.name().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingKeypoints(missing));
    }
    MASK_KEYPOINTS
        .iter()
        .map(|k| mesh.keypoint(*k).map(|p| face_box.to_pixels(p)))
        .collect()
}

/// Monotone-chain hull, counter-clockwise in a y-down frame's math sense.
/// Collinear input yields the two extreme points.
pub fn convex_hull(points: &[Vec2]) -> Vec<Vec2> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let turn = |o: Vec2, a: Vec2, b: Vec2| (a - o).cross(b - o);
    let mut lower: Vec<Vec2> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && turn(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Vec2> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && turn(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

/// Distance from `p` to the hull; zero inside.
pub fn hull_distance(hull: &[Vec2], p: Vec2) -> f64 {
    match hull.len() {
        0 => f64::INFINITY,
        1 => p.dist(hull[0]),
        n => {
            let inside = n >= 3 && (0..n).all(|i| (hull[(i + 1) % n] - hull[i]).cross(p - hull[i]) >= 0.0);
            if inside {
                return 0.0;
            }
            (0..n)
                .map(|i| segment_distance(p, hull[i], hull[(i + 1) % n]))
                .fold(f64::INFINITY, f64::min)
        }
    }
}

/// Pixels whose centers lie within the padded hull.
pub fn mask_coverage(width: usize, height: usize, face: &DetectedFace, style: &MaskStyle) -> Result<PixelMask> {
    style.validate()?;
    let hull = convex_hull(&hull_vertices(&face.mesh, &face.face_box)?);
    let (l, r) = face.mesh.eye_centers()?;
    let iod_px = face.face_box.to_pixels(l).dist(face.face_box.to_pixels(r));
    let pad = style.margin * iod_px + PIXEL_PAD;
    Ok(Array2::from_shape_fn((height, width), |(y, x)| {
        hull_distance(&hull, Vec2::new(x as f64 + 0.5, y as f64 + 0.5)) <= pad
    }))
}

/// Paints the mask polygon onto a copy of `image`.
pub fn overlay_mask(image: &Raster, face: &DetectedFace, style: &MaskStyle) -> Result<Raster> {
    let cover = mask_coverage(image.width(), image.height(), face, style)?;
    let mut out = image.clone();
    let a = style.opacity;
    for ((y, x), &on) in cover.indexed_iter() {
        if on {
            let src = out.get(x, y);
            out.set(x, y, std::array::from_fn(|c| (1.0 - a) * src[c] + a * style.color[c]));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MaskedDataset {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    /// Ids left out because no usable landmarks were available.
    pub skipped: Vec<String>,
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn mask_record(
    manifest: &DatasetManifest,
    rec: &SampleRecord,
    style: &MaskStyle,
    out_dir: &Path,
    detector: &dyn FaceDetector,
) -> Result<Option<SampleRecord>> {
    let Some(lm) = &rec.landmark_path else {
        return Ok(None);
    };
    let image = Raster::load(manifest.resolve(&rec.image_path))?;
    let faces = detect_face(&image, Some(&manifest.resolve(lm)), detector)?;
    let Some(face) = faces.first() else {
        return Ok(None);
    };
    let masked = match overlay_mask(&image, face, style) {
        Ok(m) => m,
        Err(Error::MissingKeypoints(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let id = format!("{}_m", rec.id);
    let stem = file_stem(&id);
    let image_rel = PathBuf::from("images").join(format!("{stem}.png"));
    let lm_rel = PathBuf::from("landmarks").join(format!("{stem}.landmarks.json"));
    masked.save_png(out_dir.join(&image_rel))?;
    write_sidecar(&out_dir.join(&lm_rel), &faces)?;
    let person_mask_path = match &rec.person_mask_path {
        Some(p) => {
            let rel = PathBuf::from("masks").join(format!("{stem}.png"));
            let dst = out_dir.join(&rel);
            fs::copy(manifest.resolve(p), &dst).map_err(|e| Error::io(&dst, e))?;
            Some(rel)
        }
        None => None,
    };
    Ok(Some(SampleRecord {
        id,
        image_path: image_rel,
        label: rec.label,
        split: rec.split,
        landmark_path: Some(lm_rel),
        person_mask_path,
        demographic_tags: rec.demographic_tags.clone(),
        masked: true,
    }))
}

/// Writes a masked copy of every record (ids suffixed `_m`, splits kept)
/// and a manifest at `out_dir/manifest.jsonl`.
pub fn build_masked_manifest(
    manifest: &DatasetManifest,
    style: &MaskStyle,
    out_dir: &Path,
    detector: &dyn FaceDetector,
) -> Result<MaskedDataset> {
    style.validate()?;
    for sub in ["images", "landmarks", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(manifest.records().len());
    let mut skipped = Vec::new();
    for rec in manifest.records() {
        match mask_record(manifest, rec, style, out_dir, detector)? {
            Some(r) => records.push(r),
            None => {
                log::warn!("skipping `{}`: no usable landmarks for masking", rec.id);
                skipped.push(rec.id.clone());
            }
        }
    }
    if !skipped.is_empty() {
        log::warn!("{} record(s) skipped while masking `{}`", skipped.len(), manifest.name());
    }
    let masked = DatasetManifest::new(format!("{}_masked", manifest.name()), records)?.with_base_dir(out_dir);
    let manifest_path = out_dir.join("manifest.jsonl");
    masked.save(&manifest_path)?;
    Ok(MaskedDataset {
        manifest: masked,
        manifest_path,
        skipped,
    })
}

/// Test accuracies for the three train/test combinations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStudy {
    pub train_unmasked_test_unmasked: f64,
    pub train_unmasked_test_masked: f64,
    pub train_masked_test_masked: f64,
}

pub fn mask_study(
    cfg: &PipelineConfig,
    unmasked: &DatasetManifest,
    masked: &DatasetManifest,
    pipeline: &dyn FeaturePipeline,
    mask: StreamMask,
    workers: usize,
) -> Result<MaskStudy> {
    let plain = train(cfg, unmasked, pipeline, mask, workers)?;
    let covered = train(cfg, masked, pipeline, mask, workers)?;
    let acc = |outcome: &crate::training::TrainOutcome, m: &DatasetManifest| {
        evaluate(&outcome.params, m, Split::Test, pipeline, mask, outcome.face_backbone.as_ref(), workers)
            .map(|r| r.accuracy)
    };
    Ok(MaskStudy {
        train_unmasked_test_unmasked: acc(&plain, unmasked)?,
        train_unmasked_test_masked: acc(&plain, masked)?,
        train_masked_test_masked: acc(&covered, masked)?,
    })
}
