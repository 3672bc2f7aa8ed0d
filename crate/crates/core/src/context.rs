//! Scene context: subject removal, background CNN features and place
//! (scene category/attribute) features. Both context streams consume only a
//! [`BackgroundImage`], which can only be produced by [`remove_subject`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneHandle;
use crate::config::FillMode;
use crate::error::{Error, Result};
use crate::geometry::FaceBox;
use crate::raster::{PixelMask, Raster};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceInfo {
    pub category: String,
    pub attributes: Vec<String>,
    pub confidence: f64,
}

impl PlaceInfo {
    pub fn new(category: impl Into<String>, attributes: Vec<String>, confidence: f64) -> Result<Self> {
        let category = category.into();
        if category.is_empty() {
            return Err(Error::Invalid("place category must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Invalid(format!("place confidence {confidence} outside [0, 1]")));
        }
        Ok(PlaceInfo {
            category,
            attributes,
            confidence,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemovalOptions {
    /// Face-box width/height multipliers used when no person mask is given.
    pub body_expansion: [f64; 2],
    pub fill_mode: FillMode,
    /// Fill color for [`FillMode::ConstantFill`].
    pub constant: [f32; 3],
}

impl Default for RemovalOptions {
    fn default() -> Self {
        RemovalOptions {
            body_expansion: [3.0, 6.0],
            fill_mode: FillMode::MeanFill,
            constant: [0.0; 3],
        }
    }
}

/// A scene with its subject blanked out.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundImage {
    image: Raster,
    removed_region: PixelMask,
    fill_mode: FillMode,
    fill_value: [f32; 3],
    source_id: String,
}

impl BackgroundImage {
    pub fn image(&self) -> &Raster {
        &self.image
    }

    pub fn removed_region(&self) -> &PixelMask {
        &self.removed_region
    }

    pub fn fill_mode(&self) -> FillMode {
        self.fill_mode
    }

    pub fn fill_value(&self) -> [f32; 3] {
        self.fill_value
    }

    /// Identifier of the sample this background was derived from.
    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Same background resampled to `size × size`; the removed region is
    /// resampled nearest-neighbour.
    pub fn resized(&self, size: usize) -> BackgroundImage {
        if self.image.width() == size && self.image.height() == size {
            return self.clone();
        }
        self.map_image(|img| img.resize(size, size))
    }

    /// Applies a pixel transform (e.g. augmentation), keeping provenance.
    /// The removed region is carried over, resampled if the size changes.
    pub fn map_image(&self, f: impl FnOnce(&Raster) -> Raster) -> BackgroundImage {
        let image = f(&self.image);
        let (oh, ow) = (image.height(), image.width());
        let (h, w) = self.removed_region.dim();
        let region = if (oh, ow) == (h, w) {
            self.removed_region.clone()
        } else {
            Array2::from_shape_fn((oh, ow), |(y, x)| {
                let sy = ((y as f64 + 0.5) * h as f64 / oh as f64) as usize;
                let sx = ((x as f64 + 0.5) * w as f64 / ow as f64) as usize;
                self.removed_region[[sy.min(h - 1), sx.min(w - 1)]]
            })
        };
        BackgroundImage {
            image,
            removed_region: region,
            fill_mode: self.fill_mode,
            fill_value: self.fill_value,
            source_id: self.source_id.clone(),
        }
    }
}

/// Pixels whose centers fall inside the (clamped) box.
pub fn box_region(b: &FaceBox, width: usize, height: usize) -> PixelMask {
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        cx >= b.x && cx < b.x + b.w && cy >= b.y && cy < b.y + b.h
    })
}

/// Blanks the subject: the person mask when given, otherwise the face box
/// expanded by the body heuristic and clamped to the image.
pub fn remove_subject(
    image: &Raster,
    person_mask: Option<&PixelMask>,
    face_box: &FaceBox,
    opts: &RemovalOptions,
    source_id: &str,
) -> Result<BackgroundImage> {
    let (h, w) = (image.height(), image.width());
    if image.is_empty() {
        return Err(Error::Invalid("cannot remove subject from an empty image".into()));
    }
    let region = match person_mask {
        Some(m) => {
            if m.dim() != (h, w) {
                return Err(Error::Shape {
                    expected: format!("person mask {h}×{w}"),
                    actual: format!("{}×{}", m.dim().0, m.dim().1),
                });
            }
            m.clone()
        }
        None => {
            let [sx, sy] = opts.body_expansion;
            match face_box.expanded(sx, sy).clamped(w, h) {
                Some(b) => box_region(&b, w, h),
                None => Array2::from_elem((h, w), false),
            }
        }
    };

    let kept = region.iter().filter(|r| !**r).count();
    if kept == 0 {
        return Err(Error::NoBackground);
    }
    let fill_value = match opts.fill_mode {
        FillMode::ConstantFill => opts.constant,
        FillMode::MeanFill => {
            let mut sum = [0f64; 3];
            for ((y, x), removed) in region.indexed_iter() {
                if !removed {
                    let p = image.get(x, y);
                    for c in 0..3 {
                        sum[c] += p[c] as f64;
                    }
                }
            }
            sum.map(|s| (s / kept as f64) as f32)
        }
    };
    let mut out = image.clone();
    for ((y, x), removed) in region.indexed_iter() {
        if *removed {
            out.set(x, y, fill_value);
        }
    }
    Ok(BackgroundImage {
        image: out,
        removed_region: region,
        fill_mode: opts.fill_mode,
        fill_value,
        source_id: source_id.to_string(),
    })
}

/// Background stream features; the CNN input is resized to the backbone's size.
pub fn background_features(bg: &BackgroundImage, cnn: &BackboneHandle, dim: usize) -> Result<Vec<f64>> {
    let out = cnn.forward(bg.image())?;
    if out.len() != dim {
        return Err(Error::Shape {
            expected: format!("background features of length {dim}"),
            actual: out.len().to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneOutput {
    pub features: Vec<f64>,
    pub info: PlaceInfo,
}

/// A scene classifier exposing its last max-pooled activation and its top
/// category/attributes.
pub trait SceneBackend: Send + Sync {
    fn name(&self) -> &str;

    fn reentrant(&self) -> bool;

    fn classify(&self, bg: &BackgroundImage, dim: usize) -> Result<SceneOutput>;
}

/// Max over a grid of cells per RGB channel, flattened cell-major and cut
/// to `dim`.
pub fn pooled_scene_features(image: &Raster, dim: usize) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let cells = dim.div_ceil(3).max(1);
    let rows = ((cells as f64).sqrt().floor() as usize).max(1);
    let cols = cells.div_ceil(rows);
    let mut out = Vec::with_capacity(rows * cols * 3);
    for r in 0..rows {
        let y0 = (r * h / rows).min(h - 1);
        let y1 = ((r + 1) * h / rows).max(y0 + 1).min(h);
        for c in 0..cols {
            let x0 = (c * w / cols).min(w - 1);
            let x1 = ((c + 1) * w / cols).max(x0 + 1).min(w);
            let mut m = [f32::NEG_INFINITY; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = image.get(x, y);
                    for ch in 0..3 {
                        m[ch] = m[ch].max(p[ch]);
                    }
                }
            }
            out.extend(m.iter().map(|v| *v as f64));
        }
    }
    out.truncate(dim);
    out
}

/// Brightness-threshold scene classifier for offline use.
#[derive(Debug, Default, Clone)]
pub struct StubSceneBackend;

impl SceneBackend for StubSceneBackend {
    fn name(&self) -> &str {
        "stub"
    }

    fn reentrant(&self) -> bool {
        true
    }

    fn classify(&self, bg: &BackgroundImage, dim: usize) -> Result<SceneOutput> {
        let mean = bg.image().mean();
        let (category, attributes) = if mean > 0.5 {
            ("bright_room", vec!["enclosed_area".to_string(), "natural_light".to_string()])
        } else {
            ("dim_room", vec!["enclosed_area".to_string(), "no_horizon".to_string()])
        };
        let confidence = ((mean - 0.5).abs() * 2.0).clamp(0.0, 1.0);
        Ok(SceneOutput {
            features: pooled_scene_features(bg.image(), dim),
            info: PlaceInfo::new(category, attributes, confidence)?,
        })
    }
}

/// Looks scene labels up by sample id in a JSON table.
#[derive(Debug, Clone)]
pub struct FixtureSceneBackend {
    table: BTreeMap<String, PlaceInfo>,
}

impl FixtureSceneBackend {
    pub fn new(table: BTreeMap<String, PlaceInfo>) -> Self {
        FixtureSceneBackend { table }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: BTreeMap<String, PlaceInfo> = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        for info in table.values() {
            PlaceInfo::new(info.category.clone(), info.attributes.clone(), info.confidence)?;
        }
        Ok(FixtureSceneBackend { table })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_vec_pretty(&self.table).expect("table serializes");
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

impl SceneBackend for FixtureSceneBackend {
    fn name(&self) -> &str {
        "fixture"
    }

    fn reentrant(&self) -> bool {
        true
    }

    fn classify(&self, bg: &BackgroundImage, dim: usize) -> Result<SceneOutput> {
        let info = self
            .table
            .get(bg.source_id())
            .cloned()
            .ok_or_else(|| Error::SceneBackend {
                name: self.name().into(),
                message: format!("no table entry for sample `{}`", bg.source_id()),
            })?;
        Ok(SceneOutput {
            features: pooled_scene_features(bg.image(), dim),
            info,
        })
    }
}

/// Builds the configured backend ("stub", or "fixture" with a table path).
pub fn scene_backend_from_config(name: &str, table: Option<&Path>) -> Result<Arc<dyn SceneBackend>> {
    match (name, table) {
        ("stub", _) => Ok(Arc::new(StubSceneBackend)),
        ("fixture", Some(p)) => Ok(Arc::new(FixtureSceneBackend::load(p)?)),
        ("fixture", None) => Err(Error::Config("fixture scene backend needs scene_table".into())),
        (other, _) => Err(Error::SceneBackend {
            name: other.into(),
            message: "not registered (available: stub, fixture)".into(),
        }),
    }
}

pub fn place_features(
    bg: &BackgroundImage,
    backend: &dyn SceneBackend,
    dim: usize,
) -> Result<(Vec<f64>, PlaceInfo)> {
    let out = backend.classify(bg, dim).map_err(|e| match e {
        e @ Error::SceneBackend { .. } => e,
        other => Error::SceneBackend {
            name: backend.name().into(),
            message: other.to_string(),
        },
    })?;
    if out.features.len() != dim {
        return Err(Error::SceneBackend {
            name: backend.name().into(),
            message: format!("returned {} features, expected {dim}", out.features.len()),
        });
    }
    Ok((out.features, out.info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::SmallCnnParams;

    fn constant_opts(v: f32) -> RemovalOptions {
        RemovalOptions {
            fill_mode: FillMode::ConstantFill,
            constant: [v; 3],
            ..RemovalOptions::default()
        }
    }

    #[test]
    fn mask_left_half_constant_fill() {
        let img = Raster::from_fn(10, 10, |x, y| [0.1 * x as f32, 0.05 * y as f32, 0.7]);
        let mask = Array2::from_shape_fn((10, 10), |(_, x)| x < 5);
        let fb = FaceBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let bg = remove_subject(&img, Some(&mask), &fb, &constant_opts(0.0), "s").unwrap();
        for y in 0..10 {
            for x in 0..10 {
                if x < 5 {
                    assert_eq!(bg.image().get(x, y), [0.0; 3]);
                } else {
                    assert_eq!(bg.image().get(x, y), img.get(x, y));
                }
            }
        }
    }

    #[test]
    fn mean_fill_uses_unmasked_mean() {
        let img = Raster::from_fn(8, 8, |x, _| if x < 4 { [0.9, 0.1, 0.3] } else { [0.5; 3] });
        let mask = Array2::from_shape_fn((8, 8), |(_, x)| x < 4);
        let fb = FaceBox::full(8, 8);
        let bg = remove_subject(&img, Some(&mask), &fb, &RemovalOptions::default(), "s").unwrap();
        assert_eq!(bg.fill_value(), [0.5; 3]);
        assert_eq!(bg.image().get(0, 0), [0.5; 3]);
    }

    #[test]
    fn face_box_heuristic_region() {
        let img = Raster::filled(224, 224, 0.3);
        let fb = FaceBox::new(102.0, 97.0, 20.0, 30.0).unwrap();
        let bg = remove_subject(&img, None, &fb, &constant_opts(1.0), "s").unwrap();
        let region = bg.removed_region();
        assert_eq!(region.iter().filter(|r| **r).count(), 60 * 180);
        assert!(region[[22, 82]] && region[[201, 141]]);
        assert!(!region[[21, 82]] && !region[[22, 81]] && !region[[202, 141]] && !region[[201, 142]]);
    }

    #[test]
    fn errors() {
        let img = Raster::filled(6, 6, 0.3);
        let fb = FaceBox::full(6, 6);
        let wrong = Array2::from_elem((5, 6), true);
        assert!(matches!(
            remove_subject(&img, Some(&wrong), &fb, &RemovalOptions::default(), "s"),
            Err(Error::Shape { .. })
        ));
        let all = Array2::from_elem((6, 6), true);
        assert!(matches!(
            remove_subject(&img, Some(&all), &fb, &RemovalOptions::default(), "s"),
            Err(Error::NoBackground)
        ));
        assert!(matches!(
            remove_subject(&img, None, &fb, &RemovalOptions::default(), "s"),
            Err(Error::NoBackground)
        ));
    }

    #[test]
    fn background_features_shape_and_zero_case() {
        let mut p = SmallCnnParams::init(3, 16, [2, 3, 4], 5);
        p.zero_biases();
        let cnn = BackboneHandle::small_cnn(p);
        let img = Raster::filled(20, 20, 0.0);
        let mask = Array2::from_shape_fn((20, 20), |(y, _)| y < 3);
        let bg = remove_subject(&img, Some(&mask), &FaceBox::full(20, 20), &RemovalOptions::default(), "z").unwrap();
        assert_eq!(background_features(&bg, &cnn, 5).unwrap(), vec![0.0; 5]);
        assert!(background_features(&bg, &cnn, 6).is_err());
    }

    #[test]
    fn stub_backend_is_deterministic() {
        let img = Raster::filled(12, 12, 0.8);
        let mask = Array2::from_shape_fn((12, 12), |(y, x)| y < 2 && x < 2);
        let bg = remove_subject(&img, Some(&mask), &FaceBox::full(12, 12), &RemovalOptions::default(), "s").unwrap();
        let (f1, i1) = place_features(&bg, &StubSceneBackend, 10).unwrap();
        let (f2, i2) = place_features(&bg, &StubSceneBackend, 10).unwrap();
        assert_eq!((f1.clone(), i1.clone()), (f2, i2));
        assert_eq!(f1.len(), 10);
        assert_eq!(i1.category, "bright_room");
    }

    #[test]
    fn fixture_backend_lookup() {
        let table = BTreeMap::from([(
            "kinder".to_string(),
            PlaceInfo::new(
                "day care play room",
                vec!["no_horizon".into(), "enclosed_area".into()],
                0.9,
            )
            .unwrap(),
        )]);
        let backend = FixtureSceneBackend::new(table);
        let img = Raster::filled(8, 8, 0.4);
        let mask = Array2::from_shape_fn((8, 8), |(y, _)| y > 5);
        let fb = FaceBox::full(8, 8);
        let bg = remove_subject(&img, Some(&mask), &fb, &RemovalOptions::default(), "kinder").unwrap();
        let (_, info) = place_features(&bg, &backend, 4).unwrap();
        assert_eq!(info.category, "day care play room");
        let other = remove_subject(&img, Some(&mask), &fb, &RemovalOptions::default(), "nope").unwrap();
        match place_features(&other, &backend, 4) {
            Err(Error::SceneBackend { name, .. }) => assert_eq!(name, "fixture"),
            r => panic!("unexpected {r:?}"),
        }
    }
}
