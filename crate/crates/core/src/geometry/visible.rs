use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{interocular_distance, FaceMesh, Keypoint};
use crate::error::Result;

/// Three widths, three heights, five distances, three angles.
pub const VISIBLE_FEATURE_LEN: usize = 14;

pub const VISIBLE_NAMES: [&str; VISIBLE_FEATURE_LEN] = [
    "left_eye_width",
    "right_eye_width",
    "mouth_width",
    "left_eye_height",
    "right_eye_height",
    "mouth_height",
    "eye_to_eye",
    "eyes_to_brows",
    "eyes_to_mouth",
    "eyes_to_nose",
    "nose_to_mouth",
    "angle_left_eye",
    "angle_right_eye",
    "angle_mouth",
];

pub const MOUTH_WIDTH: usize = 2;
pub const ANGLE_LEFT_EYE: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleFeatureVector {
    pub values: [f64; VISIBLE_FEATURE_LEN],
    /// Set when eyes and mouth are collinear; angles then read (0, 0, π).
    pub degenerate_triangle: bool,
}

impl VisibleFeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Interior angle at `a` of triangle (a, b, c).
fn angle_at(a: super::Vec2, b: super::Vec2, c: super::Vec2) -> f64 {
    let u = b - a;
    let v = c - a;
    u.cross(v).abs().atan2(u.dot(v))
}

pub fn visible_features(mesh: &FaceMesh) -> Result<VisibleFeatureVector> {
    let iod = interocular_distance(mesh)?;
    let kp = |k: Keypoint| mesh.keypoint(k);
    let d = |a: Keypoint, b: Keypoint| -> Result<f64> { Ok(kp(a)?.dist(kp(b)?) / iod) };

    let (left_eye, right_eye) = mesh.eye_centers()?;
    let eyes_mid = left_eye.midpoint(right_eye);
    let mouth = mesh.mouth_center()?;
    let nose = kp(Keypoint::NoseTip)?;
    let brows = kp(Keypoint::BrowCenterLeft)?.midpoint(kp(Keypoint::BrowCenterRight)?);

    let mut v = [0.0; VISIBLE_FEATURE_LEN];
    v[0] = d(Keypoint::EyeInnerLeft, Keypoint::EyeOuterLeft)?;
    v[1] = d(Keypoint::EyeInnerRight, Keypoint::EyeOuterRight)?;
    v[2] = d(Keypoint::LipCornerLeft, Keypoint::LipCornerRight)?;
    v[3] = d(Keypoint::UpperEyelidLeft, Keypoint::LowerEyelidLeft)?;
    v[4] = d(Keypoint::UpperEyelidRight, Keypoint::LowerEyelidRight)?;
    v[5] = d(Keypoint::UpperLipCenter, Keypoint::LowerLipCenter)?;
    v[6] = left_eye.dist(right_eye) / iod;
    v[7] = eyes_mid.dist(brows) / iod;
    v[8] = eyes_mid.dist(mouth) / iod;
    v[9] = eyes_mid.dist(nose) / iod;
    v[10] = nose.dist(mouth) / iod;

    // collinearity judged relative to the triangle's scale
    let area2 = (right_eye - left_eye).cross(mouth - left_eye).abs();
    let scale2 = iod * iod.max(left_eye.dist(mouth)).max(right_eye.dist(mouth));
    let degenerate = area2 <= 1e-12 * scale2;
    if degenerate {
        v[11] = 0.0;
        v[12] = 0.0;
        v[13] = PI;
    } else {
        v[11] = angle_at(left_eye, right_eye, mouth);
        v[12] = angle_at(right_eye, left_eye, mouth);
        v[13] = angle_at(mouth, left_eye, right_eye);
    }
    Ok(VisibleFeatureVector {
        values: v,
        degenerate_triangle: degenerate,
    })
}
