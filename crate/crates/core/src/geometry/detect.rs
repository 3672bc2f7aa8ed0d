//! Pluggable face detection. Real detector models live outside this crate;
//! the fixture detector replays landmark sidecar files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{FaceBox, FaceMesh, Landmark};
use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectedFace {
    pub face_box: FaceBox,
    pub mesh: FaceMesh,
}

pub struct DetectionInput<'a> {
    pub image: &'a Raster,
    /// Sidecar landmark file, consulted by replay-style detectors.
    pub landmark_path: Option<&'a Path>,
}

pub trait FaceDetector: Send + Sync {
    fn name(&self) -> &str;

    /// Whether `detect` may be called concurrently on one instance.
    fn reentrant(&self) -> bool;

    fn detect(&self, input: &DetectionInput<'_>) -> Result<Vec<DetectedFace>>;
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarFace {
    points: Vec<Vec<f64>>,
    semantic_index: BTreeMap<String, usize>,
    /// `[x, y, w, h]` in image pixels; defaults to the whole image.
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    face_box: Option<[f64; 4]>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Sidecar {
    Many { faces: Vec<SidecarFace> },
    One(SidecarFace),
}

fn convert_face(face: SidecarFace, width: usize, height: usize) -> std::result::Result<DetectedFace, String> {
    let mut points = Vec::with_capacity(face.points.len());
    for (i, p) in face.points.iter().enumerate() {
        let lm = match p.as_slice() {
            [x, y] => Landmark { x: *x, y: *y, z: None },
            [x, y, z] => Landmark { x: *x, y: *y, z: Some(*z) },
            _ => return Err(format!("point {i} must have 2 or 3 coordinates")),
        };
        points.push(lm);
    }
    let mesh = FaceMesh::new(points, face.semantic_index).map_err(|e| e.to_string())?;
    let face_box = match face.face_box {
        Some([x, y, w, h]) => FaceBox::new(x, y, w, h)
            .map_err(|e| e.to_string())?
            .clamped(width, height)
            .ok_or_else(|| "face box lies outside the image".to_string())?,
        None => FaceBox::full(width, height),
    };
    Ok(DetectedFace { face_box, mesh })
}

/// Parses a landmark sidecar. Accepts a single face object, `{"faces": [...]}`,
/// or an empty document (no faces).
pub fn parse_sidecar(path: &Path, width: usize, height: usize) -> Result<Vec<DetectedFace>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| perr(e.line(), e.to_string()))?;
    let faces = match sidecar {
        Sidecar::Many { faces } => faces,
        Sidecar::One(f) => vec![f],
    };
    faces
        .into_iter()
        .map(|f| convert_face(f, width, height).map_err(|m| perr(0, m)))
        .collect()
}

pub fn write_sidecar(path: &Path, faces: &[DetectedFace]) -> Result<()> {
    let faces: Vec<SidecarFace> = faces
        .iter()
        .map(|f| SidecarFace {
            points: f
                .mesh
                .points()
                .iter()
                .map(|p| match p.z {
                    Some(z) => vec![p.x, p.y, z],
                    None => vec![p.x, p.y],
                })
                .collect(),
            semantic_index: f.mesh.semantic_index().clone(),
            face_box: Some([f.face_box.x, f.face_box.y, f.face_box.w, f.face_box.h]),
        })
        .collect();
    let body = serde_json::json!({ "faces": faces });
    fs::write(path, serde_json::to_vec(&body).expect("sidecar serializes"))
        .map_err(|e| Error::io(path, e))
}

/// Replays landmarks from the sidecar file next to each image.
#[derive(Debug, Default, Clone)]
pub struct FixtureDetector;

impl FaceDetector for FixtureDetector {
    fn name(&self) -> &str {
        "fixture"
    }

    fn reentrant(&self) -> bool {
        true
    }

    fn detect(&self, input: &DetectionInput<'_>) -> Result<Vec<DetectedFace>> {
        let Some(path) = input.landmark_path else {
            return Err(Error::Detector {
                name: self.name().into(),
                message: "no landmark sidecar for image".into(),
            });
        };
        parse_sidecar(path, input.image.width(), input.image.height())
    }
}

/// Detector backends by name.
#[derive(Clone)]
pub struct DetectorRegistry {
    backends: BTreeMap<String, Arc<dyn FaceDetector>>,
}

impl Default for DetectorRegistry {
    fn default() -> Self {
        let mut r = DetectorRegistry {
            backends: BTreeMap::new(),
        };
        r.register(Arc::new(FixtureDetector));
        r
    }
}

impl DetectorRegistry {
    pub fn register(&mut self, detector: Arc<dyn FaceDetector>) {
        self.backends.insert(detector.name().to_string(), detector);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn FaceDetector>> {
        self.backends.get(name).cloned().ok_or_else(|| Error::Detector {
            name: name.into(),
            message: format!(
                "not registered (available: {})",
                self.backends.keys().cloned().collect::<Vec<_>>().join(", ")
            ),
        })
    }
}

pub fn detect_face(
    image: &Raster,
    landmark_path: Option<&Path>,
    detector: &dyn FaceDetector,
) -> Result<Vec<DetectedFace>> {
    if image.is_empty() {
        return Err(Error::Invalid("cannot detect faces in an empty image".into()));
    }
    detector
        .detect(&DetectionInput {
            image,
            landmark_path,
        })
        .map_err(|e| match e {
            e @ (Error::Detector { .. } | Error::Parse { .. }) => e,
            other => Error::Detector {
                name: detector.name().into(),
                message: other.to_string(),
            },
        })
}

#[cfg(test)]
mod tests {
    use super::super::synth::{Expression, Pose, SyntheticFace};
    use super::super::{Keypoint, Vec2};
    use super::*;

    #[test]
    fn fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Raster::filled(64, 64, 0.2);
        let face = SyntheticFace::neutral();
        let det = DetectedFace {
            face_box: FaceBox::full(64, 64),
            mesh: face.mesh(),
        };
        let p = dir.path().join("a.landmarks.json");
        write_sidecar(&p, std::slice::from_ref(&det)).unwrap();
        let got = detect_face(&img, Some(&p), &FixtureDetector).unwrap();
        assert_eq!(got, vec![det]);
    }

    #[test]
    fn single_face_format_and_empty_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let img = Raster::filled(10, 10, 0.0);
        let empty = dir.path().join("e.json");
        fs::write(&empty, "").unwrap();
        assert!(detect_face(&img, Some(&empty), &FixtureDetector).unwrap().is_empty());
        let empty_list = dir.path().join("f.json");
        fs::write(&empty_list, r#"{"faces": []}"#).unwrap();
        assert!(detect_face(&img, Some(&empty_list), &FixtureDetector).unwrap().is_empty());

        let mesh = SyntheticFace::neutral().mesh();
        let one = serde_json::json!({
            "points": mesh.points().iter().map(|p| [p.x, p.y]).collect::<Vec<_>>(),
            "semantic_index": mesh.semantic_index(),
        });
        let p = dir.path().join("one.json");
        fs::write(&p, one.to_string()).unwrap();
        let got = detect_face(&img, Some(&p), &FixtureDetector).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].mesh, mesh);
        assert_eq!(got[0].face_box, FaceBox::full(10, 10));
    }

    #[test]
    fn malformed_sidecar_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        fs::write(&p, r#"{"points": [[0.1]], "semantic_index": {}}"#).unwrap();
        let img = Raster::filled(4, 4, 0.0);
        assert!(matches!(
            detect_face(&img, Some(&p), &FixtureDetector),
            Err(Error::Parse { .. })
        ));
        fs::write(&p, "{oops").unwrap();
        assert!(matches!(
            detect_face(&img, Some(&p), &FixtureDetector),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn registry_lookup() {
        let r = DetectorRegistry::default();
        assert!(r.get("fixture").unwrap().reentrant());
        match r.get("blazeface") {
            Err(Error::Detector { name, .. }) => assert_eq!(name, "blazeface"),
            _ => panic!("expected detector error"),
        }
    }

    #[test]
    fn synthetic_pose_recovers_eye_corners() {
        let dir = tempfile::tempdir().unwrap();
        let face = SyntheticFace {
            pose: Pose {
                center: Vec2::new(0.48, 0.52),
                interocular: 0.35,
                roll: -0.15,
            },
            expression: Expression::default(),
        };
        let (img, det) = face.render(96, [0.3, 0.5, 0.4]);
        let p = dir.path().join("s.json");
        write_sidecar(&p, std::slice::from_ref(&det)).unwrap();
        let got = detect_face(&img, Some(&p), &FixtureDetector).unwrap();
        for (kp, expected) in [
            (Keypoint::EyeOuterLeft, face.pose_point(Vec2::new(-0.7, 0.0))),
            (Keypoint::EyeInnerLeft, face.pose_point(Vec2::new(-0.3, 0.0))),
            (Keypoint::EyeInnerRight, face.pose_point(Vec2::new(0.3, 0.0))),
            (Keypoint::EyeOuterRight, face.pose_point(Vec2::new(0.7, 0.0))),
        ] {
            let p = got[0].mesh.keypoint(kp).unwrap();
            assert!(p.dist(expected) < 1e-12, "{kp}: {p:?} vs {expected:?}");
        }
    }
}
