//! Facial landmark geometry: meshes, action-unit centers and the
//! scale-normalized distance/angle feature sets derived from them.

mod au;
mod detect;
pub mod synth;
mod visible;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use au::{au_features, select_au_centers, AuCenters, AuFeatureVector, AU_FEATURE_LEN, AU_IDS};
pub use detect::{
    write_sidecar,
    detect_face, parse_sidecar, DetectedFace, DetectionInput, DetectorRegistry, FaceDetector,
    FixtureDetector,
};
pub use visible::{
    visible_features, VisibleFeatureVector, ANGLE_LEFT_EYE, MOUTH_WIDTH, VISIBLE_FEATURE_LEN, VISIBLE_NAMES,
};

/// Minimum number of landmarks a mesh must carry.
pub const MIN_LANDMARKS: usize = 68;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn midpoint(self, o: Vec2) -> Vec2 {
        Vec2::new((self.x + o.x) * 0.5, (self.y + o.y) * 0.5)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

/// Named facial keypoints resolved through a mesh's semantic index.
///
/// `Left`/`Right` follow the mesh producer's convention; the synthetic
/// generator uses image-left / image-right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Keypoint {
    InnerBrowLeft,
    InnerBrowRight,
    OuterBrowLeft,
    OuterBrowRight,
    BrowCenterLeft,
    BrowCenterRight,
    EyeInnerLeft,
    EyeOuterLeft,
    EyeInnerRight,
    EyeOuterRight,
    UpperEyelidLeft,
    LowerEyelidLeft,
    UpperEyelidRight,
    LowerEyelidRight,
    CheekCenterLeft,
    CheekCenterRight,
    NoseTip,
    UpperLipCenter,
    LowerLipCenter,
    LipCornerLeft,
    LipCornerRight,
    BelowLipCornerLeft,
    BelowLipCornerRight,
    ChinCenter,
    /// Optional; defaults to the midpoint of the eye corners.
    EyeCenterLeft,
    /// Optional; defaults to the midpoint of the eye corners.
    EyeCenterRight,
}

impl Keypoint {
    pub const REQUIRED: [Keypoint; 24] = [
        Keypoint::InnerBrowLeft,
        Keypoint::InnerBrowRight,
        Keypoint::OuterBrowLeft,
        Keypoint::OuterBrowRight,
        Keypoint::BrowCenterLeft,
        Keypoint::BrowCenterRight,
        Keypoint::EyeInnerLeft,
        Keypoint::EyeOuterLeft,
        Keypoint::EyeInnerRight,
        Keypoint::EyeOuterRight,
        Keypoint::UpperEyelidLeft,
        Keypoint::LowerEyelidLeft,
        Keypoint::UpperEyelidRight,
        Keypoint::LowerEyelidRight,
        Keypoint::CheekCenterLeft,
        Keypoint::CheekCenterRight,
        Keypoint::NoseTip,
        Keypoint::UpperLipCenter,
        Keypoint::LowerLipCenter,
        Keypoint::LipCornerLeft,
        Keypoint::LipCornerRight,
        Keypoint::BelowLipCornerLeft,
        Keypoint::BelowLipCornerRight,
        Keypoint::ChinCenter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Keypoint::InnerBrowLeft => "inner_brow_left",
            Keypoint::InnerBrowRight => "inner_brow_right",
            Keypoint::OuterBrowLeft => "outer_brow_left",
            Keypoint::OuterBrowRight => "outer_brow_right",
            Keypoint::BrowCenterLeft => "brow_center_left",
            Keypoint::BrowCenterRight => "brow_center_right",
            Keypoint::EyeInnerLeft => "eye_inner_left",
            Keypoint::EyeOuterLeft => "eye_outer_left",
            Keypoint::EyeInnerRight => "eye_inner_right",
            Keypoint::EyeOuterRight => "eye_outer_right",
            Keypoint::UpperEyelidLeft => "upper_eyelid_left",
            Keypoint::LowerEyelidLeft => "lower_eyelid_left",
            Keypoint::UpperEyelidRight => "upper_eyelid_right",
            Keypoint::LowerEyelidRight => "lower_eyelid_right",
            Keypoint::CheekCenterLeft => "cheek_center_left",
            Keypoint::CheekCenterRight => "cheek_center_right",
            Keypoint::NoseTip => "nose_tip",
            Keypoint::UpperLipCenter => "upper_lip_center",
            Keypoint::LowerLipCenter => "lower_lip_center",
            Keypoint::LipCornerLeft => "lip_corner_left",
            Keypoint::LipCornerRight => "lip_corner_right",
            Keypoint::BelowLipCornerLeft => "below_lip_corner_left",
            Keypoint::BelowLipCornerRight => "below_lip_corner_right",
            Keypoint::ChinCenter => "chin_center",
            Keypoint::EyeCenterLeft => "eye_center_left",
            Keypoint::EyeCenterRight => "eye_center_right",
        }
    }
}

impl fmt::Display for Keypoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub z: Option<f64>,
}

impl Landmark {
    pub fn xy(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Landmarks normalized to the face crop plus a name → index map.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceMesh {
    points: Vec<Landmark>,
    semantic_index: BTreeMap<String, usize>,
}

impl FaceMesh {
    pub fn new(points: Vec<Landmark>, semantic_index: BTreeMap<String, usize>) -> Result<Self> {
        if points.len() < MIN_LANDMARKS {
            return Err(Error::Mesh(format!(
                "mesh has {} landmarks, at least {MIN_LANDMARKS} required",
                points.len()
            )));
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p.xy().is_finite() || p.z.is_some_and(|z| !z.is_finite()))
        {
            return Err(Error::Mesh(format!("landmark {i} has non-finite coordinates")));
        }
        for (name, idx) in &semantic_index {
            if *idx >= points.len() {
                return Err(Error::Mesh(format!(
                    "keypoint `{name}` maps to index {idx}, mesh has {} points",
                    points.len()
                )));
            }
        }
        Ok(FaceMesh {
            points,
            semantic_index,
        })
    }

    pub fn from_xy(points: &[Vec2], semantic_index: BTreeMap<String, usize>) -> Result<Self> {
        let pts = points
            .iter()
            .map(|p| Landmark {
                x: p.x,
                y: p.y,
                z: None,
            })
            .collect();
        FaceMesh::new(pts, semantic_index)
    }

    pub fn points(&self) -> &[Landmark] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Vec2 {
        self.points[i].xy()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn semantic_index(&self) -> &BTreeMap<String, usize> {
        &self.semantic_index
    }

    pub fn index_of(&self, kp: Keypoint) -> Option<usize> {
        self.semantic_index.get(kp.name()).copied()
    }

    pub fn keypoint(&self, kp: Keypoint) -> Result<Vec2> {
        match kp {
            Keypoint::EyeCenterLeft | Keypoint::EyeCenterRight => self.eye_center(kp),
            _ => self
                .index_of(kp)
                .map(|i| self.point(i))
                .ok_or_else(|| Error::Mesh(format!("missing semantic keypoint `{kp}`"))),
        }
    }

    fn eye_center(&self, kp: Keypoint) -> Result<Vec2> {
        if let Some(i) = self.index_of(kp) {
            return Ok(self.point(i));
        }
        let (inner, outer) = if kp == Keypoint::EyeCenterLeft {
            (Keypoint::EyeInnerLeft, Keypoint::EyeOuterLeft)
        } else {
            (Keypoint::EyeInnerRight, Keypoint::EyeOuterRight)
        };
        Ok(self.keypoint(inner)?.midpoint(self.keypoint(outer)?))
    }

    pub fn eye_centers(&self) -> Result<(Vec2, Vec2)> {
        Ok((
            self.keypoint(Keypoint::EyeCenterLeft)?,
            self.keypoint(Keypoint::EyeCenterRight)?,
        ))
    }

    pub fn mouth_center(&self) -> Result<Vec2> {
        Ok(self
            .keypoint(Keypoint::UpperLipCenter)?
            .midpoint(self.keypoint(Keypoint::LowerLipCenter)?))
    }

    /// Applies `f` to every landmark's (x, y), keeping depth and index map.
    pub fn map_points(&self, f: impl Fn(Vec2) -> Vec2) -> FaceMesh {
        let points = self
            .points
            .iter()
            .map(|p| {
                let q = f(p.xy());
                Landmark {
                    x: q.x,
                    y: q.y,
                    z: p.z,
                }
            })
            .collect();
        FaceMesh {
            points,
            semantic_index: self.semantic_index.clone(),
        }
    }

    pub fn with_point(&self, i: usize, p: Vec2) -> FaceMesh {
        let mut m = self.clone();
        m.points[i].x = p.x;
        m.points[i].y = p.y;
        m
    }
}

/// Distance between the two eye centers.
pub fn interocular_distance(mesh: &FaceMesh) -> Result<f64> {
    let (l, r) = mesh.eye_centers()?;
    let d = l.dist(r);
    if d > 0.0 {
        Ok(d)
    } else {
        Err(Error::DegenerateEyes)
    }
}

/// Face rectangle in source-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl FaceBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::Invalid(format!("face box needs positive size, got {w}×{h}")));
        }
        Ok(FaceBox { x, y, w, h })
    }

    pub fn full(width: usize, height: usize) -> Self {
        FaceBox {
            x: 0.0,
            y: 0.0,
            w: width as f64,
            h: height as f64,
        }
    }

    /// Intersection with the image rectangle; `None` when nothing remains.
    pub fn clamped(&self, width: usize, height: usize) -> Option<FaceBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width as f64);
        let y1 = (self.y + self.h).min(height as f64);
        (x1 > x0 && y1 > y0).then(|| FaceBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    /// Same center, sides multiplied by the given factors.
    pub fn expanded(&self, sx: f64, sy: f64) -> FaceBox {
        let cx = self.x + self.w / 2.0;
        let cy = self.y + self.h / 2.0;
        let w = self.w * sx;
        let h = self.h * sy;
        FaceBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    /// Maps crop-normalized mesh coordinates to image pixels.
    pub fn to_pixels(&self, p: Vec2) -> Vec2 {
        Vec2::new(self.x + p.x * self.w, self.y + p.y * self.h)
    }
}

#[cfg(test)]
mod tests {
    use super::synth::{SyntheticFace, Expression, Pose};
    use super::*;

    #[test]
    fn interocular_simple_cases() {
        let base = SyntheticFace::neutral().mesh();
        let (l, r) = base.eye_centers().unwrap();
        let mut m = base.clone();
        let li = m.index_of(Keypoint::EyeCenterLeft);
        assert!(li.is_none());
        // move the eyes by overriding the corner pairs
        let shift = |m: &FaceMesh, inner: Keypoint, outer: Keypoint, target: Vec2, c: Vec2| {
            let d = target - c;
            let a = m.index_of(inner).unwrap();
            let b = m.index_of(outer).unwrap();
            m.with_point(a, m.point(a) + d).with_point(b, m.point(b) + d)
        };
        m = shift(&m, Keypoint::EyeInnerLeft, Keypoint::EyeOuterLeft, Vec2::new(0.3, 0.4), l);
        m = shift(&m, Keypoint::EyeInnerRight, Keypoint::EyeOuterRight, Vec2::new(0.7, 0.4), r);
        assert!((interocular_distance(&m).unwrap() - 0.4).abs() < 1e-12);

        let (l, r) = m.eye_centers().unwrap();
        m = shift(&m, Keypoint::EyeInnerLeft, Keypoint::EyeOuterLeft, Vec2::new(0.0, 0.0), l);
        m = shift(&m, Keypoint::EyeInnerRight, Keypoint::EyeOuterRight, Vec2::new(3.0, 4.0), r);
        assert!((interocular_distance(&m).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_eyes_error() {
        let m = SyntheticFace::neutral().mesh();
        let c = Vec2::new(0.5, 0.5);
        let collapsed = m.map_points(|_| c);
        assert!(matches!(interocular_distance(&collapsed), Err(Error::DegenerateEyes)));
    }

    #[test]
    fn interocular_scales_with_similarity() {
        let face = SyntheticFace {
            pose: Pose {
                center: Vec2::new(0.5, 0.45),
                interocular: 0.3,
                roll: 0.2,
            },
            expression: Expression::default(),
        };
        let m = face.mesh();
        let d = interocular_distance(&m).unwrap();
        let (s, th) = (2.5, 1.1_f64);
        let t = m.map_points(|p| {
            Vec2::new(
                s * (th.cos() * p.x - th.sin() * p.y) + 3.0,
                s * (th.sin() * p.x + th.cos() * p.y) - 1.0,
            )
        });
        assert!((interocular_distance(&t).unwrap() - s * d).abs() < 1e-12);
        assert!((d - 0.3).abs() < 1e-12);
    }

    #[test]
    fn mesh_validation() {
        let pts = vec![Vec2::new(0.0, 0.0); 10];
        assert!(FaceMesh::from_xy(&pts, BTreeMap::new()).is_err());
        let mut pts = vec![Vec2::new(0.1, 0.1); MIN_LANDMARKS];
        assert!(FaceMesh::from_xy(&pts, BTreeMap::from([("nose_tip".into(), 99)])).is_err());
        pts[3].x = f64::NAN;
        assert!(FaceMesh::from_xy(&pts, BTreeMap::new()).is_err());
    }

    #[test]
    fn face_box_expansion_and_clamp() {
        let b = FaceBox::new(102.0, 97.0, 20.0, 30.0).unwrap();
        let e = b.expanded(3.0, 6.0);
        assert_eq!((e.w, e.h), (60.0, 180.0));
        let c = e.clamped(224, 224).unwrap();
        assert_eq!((c.x, c.y, c.w, c.h), (82.0, 22.0, 60.0, 180.0));
        assert!(FaceBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(FaceBox::new(300.0, 0.0, 5.0, 5.0).unwrap().clamped(224, 224).is_none());
    }
}
