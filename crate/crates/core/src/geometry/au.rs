use serde::{Deserialize, Serialize};

use super::{FaceMesh, Keypoint, Vec2};
use crate::error::{Error, Result};

/// Action units whose centers are located on the face, ascending.
pub const AU_IDS: [u8; 12] = [1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24];

/// C(12, 2)
pub const AU_FEATURE_LEN: usize = 66;

/// Upward offset, in inter-ocular units, for the "above brow" rules.
const ABOVE_OFFSET: f64 = 0.05;

/// Location rule for one AU center: a keypoint, optionally shifted upward
/// along the face's vertical axis before snapping to the nearest landmark.
#[derive(Debug, Clone, Copy)]
struct AuRule {
    au: u8,
    anchor: Keypoint,
    above: bool,
}

const RULES: [AuRule; 12] = [
    AuRule { au: 1, anchor: Keypoint::InnerBrowLeft, above: true },
    AuRule { au: 2, anchor: Keypoint::OuterBrowLeft, above: true },
    AuRule { au: 4, anchor: Keypoint::BrowCenterLeft, above: false },
    AuRule { au: 6, anchor: Keypoint::CheekCenterLeft, above: false },
    AuRule { au: 7, anchor: Keypoint::UpperEyelidLeft, above: false },
    AuRule { au: 10, anchor: Keypoint::UpperLipCenter, above: false },
    AuRule { au: 12, anchor: Keypoint::LipCornerLeft, above: false },
    AuRule { au: 14, anchor: Keypoint::BelowLipCornerLeft, above: false },
    AuRule { au: 15, anchor: Keypoint::LipCornerLeft, above: false },
    AuRule { au: 17, anchor: Keypoint::ChinCenter, above: false },
    AuRule { au: 23, anchor: Keypoint::LowerLipCenter, above: false },
    AuRule { au: 24, anchor: Keypoint::LowerLipCenter, above: false },
];

/// The 12 AU centers in [`AU_IDS`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuCenters {
    pub points: [Vec2; 12],
    /// Mesh landmark each center was snapped to.
    pub landmark_indices: [usize; 12],
}

impl AuCenters {
    pub fn get(&self, au: u8) -> Option<Vec2> {
        AU_IDS.iter().position(|a| *a == au).map(|i| self.points[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuFeatureVector(pub Vec<f64>);

impl AuFeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Unit vector perpendicular to the eye axis, pointing from the mouth
/// toward the brows.
fn face_up(mesh: &FaceMesh) -> Result<Vec2> {
    let (l, r) = mesh.eye_centers()?;
    let axis = r - l;
    let len = axis.norm();
    if len == 0.0 {
        return Err(Error::DegenerateEyes);
    }
    let mut up = Vec2::new(-axis.y, axis.x) * (1.0 / len);
    let toward_brows = l.midpoint(r) - mesh.mouth_center()?;
    if up.dot(toward_brows) < 0.0 {
        up = up * -1.0;
    }
    Ok(up)
}

fn nearest_landmark(mesh: &FaceMesh, target: Vec2) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in mesh.points().iter().enumerate() {
        let d = p.xy().dist(target);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Resolves each AU rule to the nearest mesh landmark.
pub fn select_au_centers(mesh: &FaceMesh) -> Result<AuCenters> {
    for rule in &RULES {
        if mesh.index_of(rule.anchor).is_none() {
            return Err(Error::MissingKeypoint {
                keypoint: rule.anchor.name().to_string(),
                au: rule.au,
            });
        }
    }
    let iod = super::interocular_distance(mesh)?;
    let up = face_up(mesh)?;

    let mut points = [Vec2::default(); 12];
    let mut landmark_indices = [0usize; 12];
    for (slot, rule) in RULES.iter().enumerate() {
        let anchor = mesh.keypoint(rule.anchor)?;
        let target = if rule.above {
            anchor + up * (ABOVE_OFFSET * iod)
        } else {
            anchor
        };
        let idx = nearest_landmark(mesh, target);
        points[slot] = mesh.point(idx);
        landmark_indices[slot] = idx;
    }
    Ok(AuCenters {
        points,
        landmark_indices,
    })
}

/// All pairwise center distances over `interocular`, pairs ordered by
/// (AU_i, AU_j) with i < j.
pub fn au_features(centers: &AuCenters, interocular: f64) -> Result<AuFeatureVector> {
    if !(interocular > 0.0) {
        return Err(Error::NonPositiveInterocular(interocular));
    }
    let mut out = Vec::with_capacity(AU_FEATURE_LEN);
    for i in 0..AU_IDS.len() {
        for j in (i + 1)..AU_IDS.len() {
            out.push(centers.points[i].dist(centers.points[j]) / interocular);
        }
    }
    Ok(AuFeatureVector(out))
}

#[cfg(test)]
mod tests {
    use super::super::synth::SyntheticFace;
    use super::*;

    #[test]
    fn rule_table_covers_face_regions() {
        assert_eq!(RULES.len(), 12);
        assert!(RULES.iter().map(|r| r.au).eq(AU_IDS.iter().copied()));
        let brows = RULES
            .iter()
            .filter(|r| {
                matches!(
                    r.anchor,
                    Keypoint::InnerBrowLeft | Keypoint::OuterBrowLeft | Keypoint::BrowCenterLeft
                )
            })
            .count();
        let lips = RULES
            .iter()
            .filter(|r| {
                matches!(
                    r.anchor,
                    Keypoint::UpperLipCenter
                        | Keypoint::LowerLipCenter
                        | Keypoint::LipCornerLeft
                        | Keypoint::BelowLipCornerLeft
                )
            })
            .count();
        assert_eq!((brows, lips), (3, 6));
    }

    #[test]
    fn shared_rules_resolve_to_same_landmark() {
        let mesh = SyntheticFace::neutral().mesh();
        let c = select_au_centers(&mesh).unwrap();
        assert_eq!(c.get(12), c.get(15));
        assert_eq!(c.get(23), c.get(24));
        let chin = mesh.index_of(Keypoint::ChinCenter).unwrap();
        assert_eq!(c.get(17), Some(mesh.point(chin)));
    }

    #[test]
    fn missing_keypoint_names_au() {
        let mesh = SyntheticFace::neutral().mesh();
        let mut idx = mesh.semantic_index().clone();
        idx.remove("chin_center");
        let m = FaceMesh::new(mesh.points().to_vec(), idx).unwrap();
        match select_au_centers(&m) {
            Err(Error::MissingKeypoint { keypoint, au }) => {
                assert_eq!(keypoint, "chin_center");
                assert_eq!(au, 17);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn coincident_centers_give_zero_vector() {
        let c = AuCenters {
            points: [Vec2::new(0.3, 0.3); 12],
            landmark_indices: [0; 12],
        };
        let v = au_features(&c, 0.5).unwrap();
        assert_eq!(v.0.len(), AU_FEATURE_LEN);
        assert!(v.0.iter().all(|d| *d == 0.0));
        assert!(au_features(&c, 0.0).is_err());
        assert!(au_features(&c, -1.0).is_err());
    }

    #[test]
    fn scale_cancels() {
        let mesh = SyntheticFace::neutral().mesh();
        let c = select_au_centers(&mesh).unwrap();
        let a = au_features(&c, 0.4).unwrap();
        let scaled = AuCenters {
            points: c.points.map(|p| p * 3.0),
            landmark_indices: c.landmark_indices,
        };
        let b = au_features(&scaled, 1.2).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
