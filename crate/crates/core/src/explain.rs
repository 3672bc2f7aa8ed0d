//! Template explanations built from the predicted emotion, visible-feature
//! deviations from a neutral baseline, and the scene description.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::PlaceInfo;
use crate::error::{Error, Result};
use crate::geometry::VISIBLE_FEATURE_LEN;
use crate::label::{EmotionLabel, NUM_CLASSES};

pub const DEFAULT_THRESHOLD: f64 = 0.15;
pub const NO_EVIDENCE: &str = "no strong facial deviation";

/// Below this magnitude the baseline is treated as zero and the absolute
/// deviation is used.
const BASELINE_EPS: f64 = 1e-12;

/// (above baseline, below baseline) per visible feature.
const CLAUSES: [(&str, &str); VISIBLE_FEATURE_LEN] = [
    ("left eye wider than neutral", "left eye narrower than neutral"),
    ("right eye wider than neutral", "right eye narrower than neutral"),
    ("mouth width above neutral baseline", "mouth width below neutral baseline"),
    ("left eye opened wide", "left eye partly closed"),
    ("right eye opened wide", "right eye partly closed"),
    ("mouth open", "lips pressed together"),
    ("eyes set wider than neutral", "eyes set closer than neutral"),
    ("brows raised", "brows lowered"),
    ("mouth lowered from the eyes", "mouth drawn up toward the eyes"),
    ("nose lowered from the eyes", "nose drawn up toward the eyes"),
    ("mouth dropped below the nose", "mouth pulled up toward the nose"),
    ("left eye corner angle widened", "left eye corner angle narrowed"),
    ("right eye corner angle widened", "right eye corner angle narrowed"),
    ("mouth corner angle widened", "mouth corner angle narrowed"),
];

/// Mean visible features of Neutral-labeled training samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeutralBaseline {
    pub visible: [f64; VISIBLE_FEATURE_LEN],
    pub samples: usize,
}

impl NeutralBaseline {
    pub fn new(visible: [f64; VISIBLE_FEATURE_LEN]) -> Self {
        NeutralBaseline { visible, samples: 1 }
    }

    /// Averages the visible vectors whose label is Neutral.
    pub fn from_labeled<'a>(items: impl IntoIterator<Item = (EmotionLabel, &'a [f64])>) -> Result<Self> {
        let mut sum = [0.0; VISIBLE_FEATURE_LEN];
        let mut n = 0usize;
        for (label, v) in items {
            if label != EmotionLabel::Neutral {
                continue;
            }
            if v.len() != VISIBLE_FEATURE_LEN {
                return Err(Error::Shape {
                    expected: format!("visible vector of length {VISIBLE_FEATURE_LEN}"),
                    actual: v.len().to_string(),
                });
            }
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::MissingBaseline);
        }
        Ok(NeutralBaseline {
            visible: sum.map(|s| s / n as f64),
            samples: n,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self).expect("baseline serializes")).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingBaseline,
            _ => Error::io(path, e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Relative deviation, or absolute when the baseline is (near) zero.
pub fn deviation(value: f64, baseline: f64) -> f64 {
    if baseline.abs() < BASELINE_EPS {
        value - baseline
    } else {
        (value - baseline) / baseline.abs()
    }
}

/// One clause per feature whose deviation magnitude exceeds `threshold`,
/// in feature order.
pub fn face_evidence(visible: &[f64], baseline: Option<&NeutralBaseline>, threshold: f64) -> Result<Vec<String>> {
    let baseline = baseline.ok_or(Error::MissingBaseline)?;
    if visible.len() != VISIBLE_FEATURE_LEN {
        return Err(Error::Shape {
            expected: format!("visible vector of length {VISIBLE_FEATURE_LEN}"),
            actual: visible.len().to_string(),
        });
    }
    Ok(visible
        .iter()
        .zip(&baseline.visible)
        .zip(CLAUSES)
        .filter_map(|((v, b), (up, down))| {
            let d = deviation(*v, *b);
            (d.abs() > threshold).then(|| if d > 0.0 { up } else { down }.to_string())
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub emotion: EmotionLabel,
    pub face_evidence: Vec<String>,
    pub place_category: String,
    pub place_attributes: Vec<String>,
    pub rendered: String,
}

pub fn render(emotion: EmotionLabel, evidence: &[String], place: &PlaceInfo) -> Explanation {
    let clauses = if evidence.is_empty() {
        NO_EVIDENCE.to_string()
    } else {
        evidence.join(", ")
    };
    let scene = if place.attributes.is_empty() {
        place.category.clone()
    } else {
        format!("{} ({})", place.category, place.attributes.join(", "))
    };
    Explanation {
        emotion,
        face_evidence: evidence.to_vec(),
        place_category: place.category.clone(),
        place_attributes: place.attributes.clone(),
        rendered: format!("The subject appears {emotion}: {clauses}; the scene suggests {scene}."),
    }
}

/// JSON record emitted next to each prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub sample_id: String,
    pub emotion: EmotionLabel,
    pub probabilities: [f64; NUM_CLASSES],
    pub evidence: Vec<String>,
    pub place: PlaceInfo,
    pub rendered: String,
}

impl ExplanationRecord {
    pub fn new(sample_id: &str, probabilities: [f64; NUM_CLASSES], explanation: Explanation, place: PlaceInfo) -> Self {
        ExplanationRecord {
            sample_id: sample_id.to_string(),
            emotion: explanation.emotion,
            probabilities,
            evidence: explanation.face_evidence,
            place,
            rendered: explanation.rendered,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MOUTH_WIDTH;

    fn base() -> NeutralBaseline {
        NeutralBaseline::new([1.0, 1.0, 1.2, 0.3, 0.3, 0.05, 1.0, 0.4, 0.9, 0.45, 0.4, 0.9, 0.9, 1.3])
    }

    #[test]
    fn equal_to_baseline_gives_nothing() {
        let b = base();
        assert!(face_evidence(&b.visible, Some(&b), DEFAULT_THRESHOLD).unwrap().is_empty());
    }

    #[test]
    fn widened_mouth() {
        let b = base();
        let mut v = b.visible;
        v[MOUTH_WIDTH] *= 1.3;
        let e = face_evidence(&v, Some(&b), DEFAULT_THRESHOLD).unwrap();
        assert_eq!(e, vec!["mouth width above neutral baseline".to_string()]);
        v[MOUTH_WIDTH] = b.visible[MOUTH_WIDTH] * 1.15;
        assert!(face_evidence(&v, Some(&b), DEFAULT_THRESHOLD).unwrap().is_empty());
    }

    #[test]
    fn zero_baseline_uses_absolute_deviation() {
        assert_eq!(deviation(0.2, 0.0), 0.2);
        assert_eq!(deviation(1.5, -1.0), 2.5);
    }

    #[test]
    fn missing_baseline() {
        assert!(matches!(face_evidence(&[0.0; 14], None, 0.15), Err(Error::MissingBaseline)));
        let items = [(EmotionLabel::Happiness, &[0.0; 14][..])];
        assert!(matches!(NeutralBaseline::from_labeled(items), Err(Error::MissingBaseline)));
    }

    #[test]
    fn baseline_is_neutral_mean() {
        let a = [1.0; 14];
        let b = [3.0; 14];
        let c = [100.0; 14];
        let items = [
            (EmotionLabel::Neutral, &a[..]),
            (EmotionLabel::Neutral, &b[..]),
            (EmotionLabel::Anger, &c[..]),
        ];
        let nb = NeutralBaseline::from_labeled(items).unwrap();
        assert_eq!(nb.visible, [2.0; 14]);
        assert_eq!(nb.samples, 2);
    }

    #[test]
    fn render_template() {
        let place = PlaceInfo::new(
            "day care play room",
            vec!["no_horizon".into(), "enclosed_area".into()],
            0.9,
        )
        .unwrap();
        let e = render(EmotionLabel::Happiness, &["smiling mouth shape".to_string()], &place);
        assert_eq!(
            e.rendered,
            "The subject appears Happiness: smiling mouth shape; the scene suggests day care play room (no_horizon, enclosed_area)."
        );
        assert_eq!(e, render(EmotionLabel::Happiness, &["smiling mouth shape".to_string()], &place));
        let empty = render(EmotionLabel::Sadness, &[], &place);
        assert!(empty.rendered.contains(NO_EVIDENCE));
        let bare = PlaceInfo::new("office", vec![], 0.5).unwrap();
        assert_eq!(
            render(EmotionLabel::Fear, &[], &bare).rendered,
            "The subject appears Fear: no strong facial deviation; the scene suggests office."
        );
    }
}
