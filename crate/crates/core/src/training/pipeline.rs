//! Sources of [`FeatureBundle`]s for training and evaluation: the full image
//! pipeline, or a table of precomputed features.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{apply_draw, AugmentDraw};
use crate::backbone::BackboneHandle;
use crate::config::PipelineConfig;
use crate::context::{
    background_features, place_features, remove_subject, scene_backend_from_config, BackgroundImage,
    RemovalOptions, SceneBackend,
};
use crate::error::{Error, Result};
use crate::fusion::{FeatureBundle, FeatureDims};
use crate::geometry::{
    au_features, detect_face, interocular_distance, select_au_centers, visible_features, DetectedFace,
    DetectorRegistry, FaceDetector,
};
use crate::label::EmotionLabel;
use crate::manifest::{DatasetManifest, SampleRecord};
use crate::raster::{load_mask, Raster};

/// A labeled sample ready for the fusion head.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub label: EmotionLabel,
    pub bundle: FeatureBundle,
    /// Face crop at backbone input size, kept when the face CNN is trained.
    pub face_crop: Option<Raster>,
}

pub trait FeaturePipeline: Sync {
    fn dims(&self) -> FeatureDims;

    fn extract(&self, manifest: &DatasetManifest, record: &SampleRecord) -> Result<FeatureBundle>;

    /// Features of augmented copy `copy`; `None` when the source cannot augment.
    fn extract_augmented(
        &self,
        _manifest: &DatasetManifest,
        _record: &SampleRecord,
        _copy: usize,
    ) -> Result<Option<(FeatureBundle, Option<Raster>)>> {
        Ok(None)
    }

    /// Face crop fed to the face backbone, for fine-tuning.
    fn face_crop(&self, _manifest: &DatasetManifest, _record: &SampleRecord) -> Result<Option<Raster>> {
        Ok(None)
    }

    fn face_backbone(&self) -> Option<&BackboneHandle> {
        None
    }
}

/// Intermediate products of one image, exposed for explanation and masking.
#[derive(Debug, Clone)]
pub struct ImageAnalysis {
    pub image: Raster,
    pub face: DetectedFace,
    pub face_crop: Raster,
    pub background: BackgroundImage,
}

/// Image → detector → geometry, face CNN, background CNN and scene backend.
pub struct ImagePipeline {
    cfg: PipelineConfig,
    detector: Arc<dyn FaceDetector>,
    face_cnn: BackboneHandle,
    background_cnn: BackboneHandle,
    scene: Arc<dyn SceneBackend>,
    serial: Mutex<()>,
}

fn stable_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

impl ImagePipeline {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let detector = DetectorRegistry::default().get(&cfg.detector)?;
        let scene = scene_backend_from_config(&cfg.scene_backend, cfg.scene_table.as_deref())?;
        Ok(ImagePipeline {
            cfg: cfg.clone(),
            detector,
            face_cnn: BackboneHandle::face_from_config(cfg)?,
            background_cnn: BackboneHandle::background_from_config(cfg),
            scene,
            serial: Mutex::new(()),
        })
    }

    pub fn with_detector(mut self, detector: Arc<dyn FaceDetector>) -> Self {
        self.detector = detector;
        self
    }

    pub fn with_scene_backend(mut self, scene: Arc<dyn SceneBackend>) -> Self {
        self.scene = scene;
        self
    }

    pub fn with_face_backbone(mut self, face_cnn: BackboneHandle) -> Result<Self> {
        if face_cnn.output_dim() != self.cfg.deep_face_dim {
            return Err(Error::Config(format!(
                "face backbone produces {} features, expected {}",
                face_cnn.output_dim(),
                self.cfg.deep_face_dim
            )));
        }
        self.face_cnn = face_cnn;
        Ok(self)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn scene_backend(&self) -> &dyn SceneBackend {
        self.scene.as_ref()
    }

    pub fn background_cnn(&self) -> &BackboneHandle {
        &self.background_cnn
    }

    fn guarded<T>(&self, reentrant: bool, f: impl FnOnce() -> T) -> T {
        if reentrant {
            f()
        } else {
            let _g = self.serial.lock().unwrap_or_else(|e| e.into_inner());
            f()
        }
    }

    pub fn analyze(&self, manifest: &DatasetManifest, record: &SampleRecord) -> Result<ImageAnalysis> {
        let image = Raster::load(manifest.resolve(&record.image_path))?;
        let landmarks = record.landmark_path.as_ref().map(|p| manifest.resolve(p));
        let faces = self.guarded(self.detector.reentrant(), || {
            detect_face(&image, landmarks.as_deref(), self.detector.as_ref())
        })?;
        if faces.len() > 1 {
            log::warn!("{}: {} faces detected, using the first", record.id, faces.len());
        }
        let face = faces.into_iter().next().ok_or_else(|| Error::Detector {
            name: self.detector.name().into(),
            message: format!("no face found in `{}`", record.id),
        })?;
        let size = self.cfg.image_size;
        let b = face.face_box;
        let face_crop = image.resize_region((b.x, b.y, b.w, b.h), size, size);
        let person_mask = match &record.person_mask_path {
            Some(p) => Some(load_mask(manifest.resolve(p))?),
            None => None,
        };
        let opts = RemovalOptions {
            body_expansion: self.cfg.body_expansion,
            fill_mode: self.cfg.fill_mode,
            constant: [0.0; 3],
        };
        let background = remove_subject(&image, person_mask.as_ref(), &face.face_box, &opts, &record.id)?.resized(size);
        Ok(ImageAnalysis {
            image,
            face,
            face_crop,
            background,
        })
    }

    fn bundle_from(&self, a: &ImageAnalysis, face_crop: &Raster, background: &BackgroundImage) -> Result<FeatureBundle> {
        let mesh = &a.face.mesh;
        let au = au_features(&select_au_centers(mesh)?, interocular_distance(mesh)?)?;
        let visible = visible_features(mesh)?;
        let face_deep = self.face_cnn.forward(face_crop)?;
        let bg = background_features(background, &self.background_cnn, self.cfg.background_dim)?;
        let (place, place_info) = self.guarded(self.scene.reentrant(), || {
            place_features(background, self.scene.as_ref(), self.cfg.place_dim)
        })?;
        let bundle = FeatureBundle {
            face_deep,
            au: au.0,
            visible: visible.values.to_vec(),
            background: bg,
            place,
            place_info,
        };
        bundle.validate(&self.dims())?;
        Ok(bundle)
    }
}

impl FeaturePipeline for ImagePipeline {
    fn dims(&self) -> FeatureDims {
        self.cfg.feature_dims()
    }

    fn extract(&self, manifest: &DatasetManifest, record: &SampleRecord) -> Result<FeatureBundle> {
        let a = self.analyze(manifest, record)?;
        self.bundle_from(&a, &a.face_crop, &a.background)
    }

    /// The same random draw is applied to the face crop and the background.
    /// Geometric features are similarity-invariant and reuse the original mesh.
    fn extract_augmented(
        &self,
        manifest: &DatasetManifest,
        record: &SampleRecord,
        copy: usize,
    ) -> Result<Option<(FeatureBundle, Option<Raster>)>> {
        let a = self.analyze(manifest, record)?;
        let seed = self.cfg.seed ^ stable_hash(&record.id) ^ (copy as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = AugmentDraw::sample(&self.cfg.augmentation, &mut rng);
        let size = self.cfg.image_size;
        let crop = apply_draw(&a.face_crop, &draw, size);
        let bg = a.background.map_image(|img| apply_draw(img, &draw, size));
        Ok(Some((self.bundle_from(&a, &crop, &bg)?, Some(crop))))
    }

    fn face_crop(&self, manifest: &DatasetManifest, record: &SampleRecord) -> Result<Option<Raster>> {
        Ok(Some(self.analyze(manifest, record)?.face_crop))
    }

    fn face_backbone(&self) -> Option<&BackboneHandle> {
        Some(&self.face_cnn)
    }
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    schema: u32,
    dims: FeatureDims,
}

#[derive(Serialize, Deserialize)]
struct TableRow {
    id: String,
    #[serde(flatten)]
    bundle: FeatureBundle,
}

/// Precomputed bundles keyed by sample id (JSON-Lines: a header line with
/// the dimensions, then one bundle per line).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dims: FeatureDims,
    rows: BTreeMap<String, FeatureBundle>,
}

impl FeatureTable {
    pub fn new(dims: FeatureDims) -> Self {
        FeatureTable {
            dims,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, bundle: FeatureBundle) -> Result<()> {
        bundle.validate(&self.dims)?;
        self.rows.insert(id.into(), bundle);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&FeatureBundle> {
        self.rows.get(id)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = TableHeader {
            schema: 1,
            dims: self.dims,
        };
        let mut write = |line: Vec<u8>| -> std::io::Result<()> {
            w.write_all(&line)?;
            w.write_all(b"\n")
        };
        write(serde_json::to_vec(&header).expect("header")).map_err(|e| Error::io(path, e))?;
        for (id, bundle) in &self.rows {
            let row = TableRow {
                id: id.clone(),
                bundle: bundle.clone(),
            };
            write(serde_json::to_vec(&row).expect("row")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| perr(1, "empty feature file".into()))?
            .map_err(|e| Error::io(path, e))?;
        let header: TableHeader = serde_json::from_str(&first).map_err(|e| perr(1, e.to_string()))?;
        if header.schema != 1 {
            return Err(perr(1, format!("unsupported schema {}", header.schema)));
        }
        let mut table = FeatureTable::new(header.dims);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: TableRow = serde_json::from_str(&line).map_err(|e| perr(i + 2, e.to_string()))?;
            table.insert(row.id, row.bundle).map_err(|e| perr(i + 2, e.to_string()))?;
        }
        Ok(table)
    }
}

impl FeaturePipeline for FeatureTable {
    fn dims(&self) -> FeatureDims {
        self.dims
    }

    fn extract(&self, _manifest: &DatasetManifest, record: &SampleRecord) -> Result<FeatureBundle> {
        self.rows
            .get(&record.id)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("no precomputed features for `{}`", record.id)))
    }
}

/// Order-preserving parallel map over `workers` threads.
pub fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let results: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Builds examples for labeled `records`, plus `copies` augmented variants
/// of each when `copies > 0` and the pipeline supports it.
pub fn extract_examples(
    pipeline: &dyn FeaturePipeline,
    manifest: &DatasetManifest,
    records: &[&SampleRecord],
    copies: usize,
    keep_crops: bool,
    workers: usize,
) -> Result<Vec<Example>> {
    let labeled: Vec<&SampleRecord> = records.iter().copied().filter(|r| r.label.is_some()).collect();
    let per_record = parallel_map(&labeled, workers, |r| {
        let label = r.label.expect("filtered");
        let crop = if keep_crops {
            pipeline.face_crop(manifest, r)?
        } else {
            None
        };
        let mut out = vec![Example {
            id: r.id.clone(),
            label,
            bundle: pipeline.extract(manifest, r)?,
            face_crop: crop,
        }];
        for k in 0..copies {
            match pipeline.extract_augmented(manifest, r, k)? {
                Some((bundle, crop)) => out.push(Example {
                    id: format!("{}#aug{k}", r.id),
                    label,
                    bundle,
                    face_crop: if keep_crops { crop } else { None },
                }),
                None => break,
            }
        }
        Ok(out)
    })?;
    Ok(per_record.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::PlaceInfo;
    use crate::geometry::synth::SyntheticFace;
    use crate::geometry::write_sidecar;
    use crate::manifest::Split;

    fn write_sample(dir: &Path, id: &str, label: EmotionLabel) -> SampleRecord {
        let face_box = crate::geometry::FaceBox::new(22.0, 8.0, 20.0, 20.0).unwrap();
        let (img, det, person) = SyntheticFace::for_label(label).render_scene(64, 64, face_box, |x, y| {
            [0.2, 0.5 * y as f32 / 64.0, 0.7 * x as f32 / 64.0]
        });
        img.save_png(dir.join(format!("{id}.png"))).unwrap();
        write_sidecar(&dir.join(format!("{id}.json")), &[det]).unwrap();
        crate::raster::save_gray_png(&person.mapv(|v| if v { 1.0 } else { 0.0 }), dir.join(format!("{id}_mask.png")))
            .unwrap();
        let mut r = SampleRecord::new(id, format!("{id}.png")).with_label(label);
        r.landmark_path = Some(format!("{id}.json").into());
        r.person_mask_path = Some(format!("{id}_mask.png").into());
        r
    }

    #[test]
    fn image_pipeline_produces_valid_bundles() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            write_sample(dir.path(), "a", EmotionLabel::Happiness),
            write_sample(dir.path(), "b", EmotionLabel::Sadness),
        ];
        let m = DatasetManifest::new("t", recs).unwrap().with_base_dir(dir.path());
        let mut cfg = PipelineConfig::desk_scale();
        cfg.augmentation.copies = 2;
        let p = ImagePipeline::from_config(&cfg).unwrap();
        let refs: Vec<&SampleRecord> = m.records().iter().collect();
        let ex = extract_examples(&p, &m, &refs, 2, true, 2).unwrap();
        assert_eq!(ex.len(), 6);
        assert_eq!(ex[1].id, "a#aug0");
        for e in &ex {
            e.bundle.validate(&cfg.feature_dims()).unwrap();
            assert_eq!(e.face_crop.as_ref().unwrap().width(), 32);
        }
        // geometric slots are shared by augmented copies
        assert_eq!(ex[0].bundle.au, ex[1].bundle.au);
        let serial = extract_examples(&p, &m, &refs, 2, true, 1).unwrap();
        assert_eq!(ex, serial);
    }

    #[test]
    fn missing_sidecar_is_detector_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = write_sample(dir.path(), "a", EmotionLabel::Fear);
        r.landmark_path = None;
        let m = DatasetManifest::new("t", vec![r.clone()]).unwrap().with_base_dir(dir.path());
        let p = ImagePipeline::from_config(&PipelineConfig::desk_scale()).unwrap();
        assert!(matches!(p.extract(&m, &r), Err(Error::Detector { .. })));
    }

    #[test]
    fn feature_table_round_trip() {
        let dims = FeatureDims {
            face_deep: 2,
            background: 1,
            place: 1,
        };
        let mut t = FeatureTable::new(dims);
        let b = FeatureBundle {
            face_deep: vec![0.1, 1.0 / 3.0],
            au: vec![0.5; 66],
            visible: vec![0.25; 14],
            background: vec![2.0],
            place: vec![-1.0],
            place_info: PlaceInfo::new("dim_room", vec!["enclosed_area".into()], 0.3).unwrap(),
        };
        t.insert("x", b.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.jsonl");
        t.save(&p).unwrap();
        let back = FeatureTable::load(&p).unwrap();
        assert_eq!(back, t);
        let m = DatasetManifest::new("m", vec![SampleRecord::new("x", "x.png")
            .with_label(EmotionLabel::Anger)
            .with_split(Split::Train)])
        .unwrap();
        assert_eq!(back.extract(&m, &m.records()[0]).unwrap(), b);
        assert!(t.insert("y", FeatureBundle { place: vec![], ..b }).is_err());
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<usize> = (0..37).collect();
        let out = parallel_map(&items, 4, |x| Ok(x * 2)).unwrap();
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        let err = parallel_map(&items, 3, |x| if *x == 20 { Err(Error::NoLabels) } else { Ok(*x) });
        assert!(err.is_err());
    }
}
