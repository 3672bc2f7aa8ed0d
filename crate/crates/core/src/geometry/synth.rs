//! Parametric synthetic faces: a 72-point mesh with a full semantic index,
//! rendered to a raster with a matching person mask. Used for fixtures and
//! as a ground-truth oracle for the geometric pipeline.
//!
//! Faces are built in a template frame where the eye centers sit at
//! (-0.5, 0) and (0.5, 0) and y grows downward, then rotated, scaled by the
//! inter-ocular distance and translated into crop-normalized coordinates.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;

use super::{DetectedFace, FaceBox, FaceMesh, Keypoint, Vec2};
use crate::label::EmotionLabel;
use crate::raster::{PixelMask, Raster};

pub const SYNTH_LANDMARKS: usize = 72;

const MOUTH_Y: f64 = 0.85;
const HALF_MOUTH: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Midpoint between the eyes, crop-normalized.
    pub center: Vec2,
    pub interocular: f64,
    /// In-plane rotation in radians.
    pub roll: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Pose {
            center: Vec2::new(0.5, 0.4),
            interocular: 0.3,
            roll: 0.0,
        }
    }
}

/// Expression shape parameters, all in template (inter-ocular) units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expression {
    pub mouth_width: f64,
    pub mouth_open: f64,
    pub eye_open: f64,
    pub brow_raise: f64,
    /// Upward lift of the lip corners; negative pulls them down.
    pub smile: f64,
}

impl Default for Expression {
    fn default() -> Self {
        Expression {
            mouth_width: 1.0,
            mouth_open: 0.0,
            eye_open: 1.0,
            brow_raise: 0.0,
            smile: 0.0,
        }
    }
}

impl Expression {
    /// Stereotyped shape for each basic emotion.
    pub fn for_label(label: EmotionLabel) -> Self {
        let base = Expression::default();
        match label {
            EmotionLabel::Anger => Expression {
                eye_open: 0.7,
                brow_raise: -0.08,
                mouth_width: 0.9,
                ..base
            },
            EmotionLabel::Disgust => Expression {
                mouth_width: 0.85,
                mouth_open: 0.05,
                smile: -0.05,
                eye_open: 0.8,
                ..base
            },
            EmotionLabel::Fear => Expression {
                eye_open: 1.5,
                brow_raise: 0.06,
                mouth_width: 1.15,
                mouth_open: 0.12,
                ..base
            },
            EmotionLabel::Happiness => Expression {
                mouth_width: 1.3,
                smile: 0.12,
                mouth_open: 0.06,
                ..base
            },
            EmotionLabel::Sadness => Expression {
                smile: -0.1,
                brow_raise: 0.03,
                eye_open: 0.85,
                ..base
            },
            EmotionLabel::Surprise => Expression {
                eye_open: 1.6,
                brow_raise: 0.12,
                mouth_open: 0.3,
                mouth_width: 0.95,
                ..base
            },
            EmotionLabel::Neutral => base,
        }
    }

    pub fn jittered(self, rng: &mut impl Rng, amount: f64) -> Self {
        let mut j = |v: f64, scale: f64| v + rng.random_range(-amount..=amount) * scale;
        Expression {
            mouth_width: j(self.mouth_width, 1.0),
            mouth_open: j(self.mouth_open, 0.3).max(0.0),
            eye_open: j(self.eye_open, 1.0).max(0.2),
            brow_raise: j(self.brow_raise, 0.3),
            smile: j(self.smile, 0.3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SyntheticFace {
    pub pose: Pose,
    pub expression: Expression,
}

fn lip_point(k: usize, e: &Expression) -> Vec2 {
    let phi = PI - k as f64 * PI / 6.0;
    let mw = HALF_MOUTH * e.mouth_width;
    let s = phi.sin();
    let lip = if s > 1e-12 {
        -(e.mouth_open / 2.0 + 0.06) * s
    } else if s < -1e-12 {
        (e.mouth_open / 2.0 + 0.08) * -s
    } else {
        0.0
    };
    let c = phi.cos();
    Vec2::new(mw * c, MOUTH_Y - e.smile * c * c + lip)
}

fn brow_point(x: f64, center_x: f64, e: &Expression) -> Vec2 {
    let t = (x - center_x) / 0.35;
    Vec2::new(x, -0.35 - 0.08 * (1.0 - t * t) - e.brow_raise)
}

/// Template-frame landmarks, indexed as in [`semantic_index`].
pub fn template_points(e: &Expression) -> Vec<Vec2> {
    let mut pts = Vec::with_capacity(SYNTH_LANDMARKS);
    // 0..=16 jaw, chin center at 8
    for k in 0..17 {
        let th = PI - PI * k as f64 / 16.0;
        pts.push(Vec2::new(1.0 * th.cos(), 0.35 + 1.05 * th.sin()));
    }
    // 17..=21 left brow outer -> inner, 22..=26 right brow inner -> outer
    for k in 0..5 {
        pts.push(brow_point(-0.85 + 0.175 * k as f64, -0.5, e));
    }
    for k in 0..5 {
        pts.push(brow_point(0.15 + 0.175 * k as f64, 0.5, e));
    }
    // 27..=29 nose bridge, 30 nose tip
    for y in [-0.15, 0.0, 0.15, 0.45] {
        pts.push(Vec2::new(0.0, y));
    }
    // 31..=35 nose base
    for (x, y) in [(-0.18, 0.55), (-0.09, 0.58), (0.0, 0.6), (0.09, 0.58), (0.18, 0.55)] {
        pts.push(Vec2::new(x, y));
    }
    // 36..=43 left eye, 44..=51 right eye; 8 points from the outer corner
    let eh = 0.08 * e.eye_open;
    for k in 0..8 {
        let phi = PI - k as f64 * PI / 4.0;
        pts.push(Vec2::new(-0.5 + 0.2 * phi.cos(), -eh * phi.sin()));
    }
    for k in 0..8 {
        let phi = PI - k as f64 * PI / 4.0;
        pts.push(Vec2::new(0.5 - 0.2 * phi.cos(), -eh * phi.sin()));
    }
    // 52..=63 outer lip from the left corner, over the top
    for k in 0..12 {
        pts.push(lip_point(k, e));
    }
    // 64..=67 inner lip
    let mw = HALF_MOUTH * e.mouth_width;
    pts.push(Vec2::new(-0.6 * mw, MOUTH_Y - 0.36 * e.smile));
    pts.push(Vec2::new(0.0, MOUTH_Y - e.mouth_open / 2.0));
    pts.push(Vec2::new(0.6 * mw, MOUTH_Y - 0.36 * e.smile));
    pts.push(Vec2::new(0.0, MOUTH_Y + e.mouth_open / 2.0));
    // 68, 69 cheeks; 70, 71 below the lip corners
    pts.push(Vec2::new(-0.6, 0.5));
    pts.push(Vec2::new(0.6, 0.5));
    pts.push(Vec2::new(-mw, MOUTH_Y - e.smile + 0.15));
    pts.push(Vec2::new(mw, MOUTH_Y - e.smile + 0.15));
    debug_assert_eq!(pts.len(), SYNTH_LANDMARKS);
    pts
}

pub fn semantic_index() -> BTreeMap<String, usize> {
    [
        (Keypoint::ChinCenter, 8),
        (Keypoint::OuterBrowLeft, 17),
        (Keypoint::BrowCenterLeft, 19),
        (Keypoint::InnerBrowLeft, 21),
        (Keypoint::InnerBrowRight, 22),
        (Keypoint::BrowCenterRight, 24),
        (Keypoint::OuterBrowRight, 26),
        (Keypoint::NoseTip, 30),
        (Keypoint::EyeOuterLeft, 36),
        (Keypoint::UpperEyelidLeft, 38),
        (Keypoint::EyeInnerLeft, 40),
        (Keypoint::LowerEyelidLeft, 42),
        (Keypoint::EyeOuterRight, 44),
        (Keypoint::UpperEyelidRight, 46),
        (Keypoint::EyeInnerRight, 48),
        (Keypoint::LowerEyelidRight, 50),
        (Keypoint::LipCornerLeft, 52),
        (Keypoint::UpperLipCenter, 55),
        (Keypoint::LipCornerRight, 58),
        (Keypoint::LowerLipCenter, 61),
        (Keypoint::CheekCenterLeft, 68),
        (Keypoint::CheekCenterRight, 69),
        (Keypoint::BelowLipCornerLeft, 70),
        (Keypoint::BelowLipCornerRight, 71),
    ]
    .into_iter()
    .map(|(k, i)| (k.name().to_string(), i))
    .collect()
}

fn point_in_polygon(p: Vec2, poly: &[Vec2]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn dist_to_segment(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 { ((p - a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    p.dist(a + ab * t)
}

impl SyntheticFace {
    pub fn neutral() -> Self {
        SyntheticFace::default()
    }

    pub fn for_label(label: EmotionLabel) -> Self {
        SyntheticFace {
            pose: Pose::default(),
            expression: Expression::for_label(label),
        }
    }

    /// Maps a template-frame point into crop-normalized coordinates.
    pub fn pose_point(&self, t: Vec2) -> Vec2 {
        let (s, c) = self.pose.roll.sin_cos();
        let r = Vec2::new(c * t.x - s * t.y, s * t.x + c * t.y);
        self.pose.center + r * self.pose.interocular
    }

    fn to_template(&self, p: Vec2) -> Vec2 {
        let d = (p - self.pose.center) * (1.0 / self.pose.interocular);
        let (s, c) = self.pose.roll.sin_cos();
        Vec2::new(c * d.x + s * d.y, -s * d.x + c * d.y)
    }

    pub fn mesh(&self) -> FaceMesh {
        let pts: Vec<Vec2> = template_points(&self.expression)
            .into_iter()
            .map(|t| self.pose_point(t))
            .collect();
        FaceMesh::from_xy(&pts, semantic_index()).expect("synthetic mesh is valid")
    }

    /// Per-point color in crop-normalized coordinates; `None` off the face.
    fn shader(&self) -> impl Fn(Vec2) -> Option<[f32; 3]> + '_ {
        let tpl = template_points(&self.expression);
        let eh = (0.08 * self.expression.eye_open).max(1e-3);
        move |p: Vec2| {
            let outer_lip = &tpl[52..64];
            let inner_lip = &tpl[64..68];
            let q = self.to_template(p);
            let on_brow = tpl[17..22]
                .windows(2)
                .chain(tpl[22..27].windows(2))
                .any(|w| dist_to_segment(q, w[0], w[1]) < 0.05);
            if on_brow {
                return Some([0.25, 0.15, 0.1]);
            }
            for cx in [-0.5, 0.5] {
                let ex = (q.x - cx) / 0.2;
                let ey = q.y / eh;
                if ex * ex + ey * ey <= 1.0 {
                    let pupil = Vec2::new(cx, 0.0).dist(q) < 0.05 * self.expression.eye_open.min(1.0);
                    return Some(if pupil { [0.1, 0.1, 0.15] } else { [0.95, 0.95, 0.92] });
                }
            }
            if self.expression.mouth_open > 0.0 && point_in_polygon(q, inner_lip) {
                return Some([0.2, 0.05, 0.05]);
            }
            if point_in_polygon(q, outer_lip) {
                return Some([0.75, 0.25, 0.3]);
            }
            if q.dist(Vec2::new(0.0, 0.45)) < 0.07 {
                return Some([0.78, 0.6, 0.5]);
            }
            let fx = q.x / 1.05;
            let fy = (q.y - 0.4) / 1.15;
            if fx * fx + fy * fy <= 1.0 {
                return Some([0.88, 0.72, 0.6]);
            }
            None
        }
    }

    /// Renders the face over a flat background into a `size × size` crop.
    /// Returns the image and the detection (whole-image box, exact mesh).
    pub fn render(&self, size: usize, background: [f32; 3]) -> (Raster, DetectedFace) {
        let shade = self.shader();
        let img = Raster::from_fn(size, size, |x, y| {
            let p = Vec2::new((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            shade(p).unwrap_or(background)
        });
        let det = DetectedFace {
            face_box: FaceBox::full(size, size),
            mesh: self.mesh(),
        };
        (img, det)
    }

    /// Composites the face, framed by `face_box`, into a `width × height`
    /// scene painted by `scene(x, y)`. Returns the image, the detection and
    /// the person mask (head and torso) in scene pixels.
    pub fn render_scene(
        &self,
        width: usize,
        height: usize,
        face_box: FaceBox,
        scene: impl Fn(usize, usize) -> [f32; 3],
    ) -> (Raster, DetectedFace, PixelMask) {
        let shade = self.shader();
        let local = |x: usize, y: usize| {
            Vec2::new(
                (x as f64 + 0.5 - face_box.x) / face_box.w,
                (y as f64 + 0.5 - face_box.y) / face_box.h,
            )
        };
        let img = Raster::from_fn(height, width, |x, y| shade(local(x, y)).unwrap_or_else(|| scene(x, y)));
        let mask = Array2::from_shape_fn((height, width), |(y, x)| self.person_at(local(x, y)));
        let det = DetectedFace {
            face_box,
            mesh: self.mesh(),
        };
        (img, det, mask)
    }

    fn person_at(&self, p: Vec2) -> bool {
        let q = self.to_template(p);
        let fx = q.x / 1.1;
        let fy = (q.y - 0.4) / 1.2;
        let head = fx * fx + fy * fy <= 1.0;
        let torso = q.y >= 1.3 && q.x.abs() <= 1.4;
        head || torso
    }

    /// Head plus a torso below it, in template-frame terms.
    pub fn person_mask(&self, size: usize) -> PixelMask {
        Array2::from_shape_fn((size, size), |(y, x)| {
            self.person_at(Vec2::new((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{interocular_distance, select_au_centers, visible_features};

    #[test]
    fn mesh_has_full_semantic_index() {
        let m = SyntheticFace::neutral().mesh();
        assert_eq!(m.len(), SYNTH_LANDMARKS);
        for k in Keypoint::REQUIRED {
            assert!(m.index_of(k).is_some(), "missing {k}");
        }
        let (l, r) = m.eye_centers().unwrap();
        let p = Pose::default();
        assert!(l.dist(p.center + Vec2::new(-0.5 * p.interocular, 0.0)) < 1e-12);
        assert!(r.dist(p.center + Vec2::new(0.5 * p.interocular, 0.0)) < 1e-12);
        assert!((interocular_distance(&m).unwrap() - p.interocular).abs() < 1e-12);
    }

    #[test]
    fn expressions_move_the_right_features() {
        let neutral = visible_features(&SyntheticFace::neutral().mesh()).unwrap();
        let happy = visible_features(&SyntheticFace::for_label(EmotionLabel::Happiness).mesh()).unwrap();
        let surprise = visible_features(&SyntheticFace::for_label(EmotionLabel::Surprise).mesh()).unwrap();
        assert!(happy.values[2] > neutral.values[2] * 1.2);
        assert!(surprise.values[3] > neutral.values[3] * 1.4);
        assert!(surprise.values[5] > neutral.values[5]);
    }

    #[test]
    fn au_centers_land_on_the_rule_keypoints() {
        let m = SyntheticFace::for_label(EmotionLabel::Fear).mesh();
        let c = select_au_centers(&m).unwrap();
        assert_eq!(c.landmark_indices, [21, 17, 19, 68, 38, 55, 52, 70, 52, 8, 61, 61]);
    }

    #[test]
    fn render_draws_face_and_mask_covers_it() {
        let face = SyntheticFace::for_label(EmotionLabel::Happiness);
        let (img, det) = face.render(64, [0.1, 0.4, 0.2]);
        assert_eq!(img.get(0, 0), [0.1, 0.4, 0.2]);
        let nose = det.face_box.to_pixels(det.mesh.keypoint(Keypoint::NoseTip).unwrap());
        assert_ne!(img.get(nose.x as usize, nose.y as usize), [0.1, 0.4, 0.2]);
        let mask = face.person_mask(64);
        assert!(mask[[nose.y as usize, nose.x as usize]]);
        assert!(!mask[[0, 0]]);
    }
}
