use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::label::EmotionLabel;

pub const DEFAULT_MIN_AGREEMENT: usize = 4;
pub const DEFAULT_IRRELEVANT_QUORUM: usize = 4;

/// An annotator's answer for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verdict {
    Emotion(EmotionLabel),
    Irrelevant,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Emotion(l) => l.fmt(f),
            Verdict::Irrelevant => f.write_str("Irrelevant"),
        }
    }
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("irrelevant") {
            Ok(Verdict::Irrelevant)
        } else {
            s.parse().map(Verdict::Emotion)
        }
    }
}

impl Serialize for Verdict {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Verdict {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub annotator_id: String,
    pub verdict: Verdict,
    pub timestamp: DateTime<Utc>,
}

impl AnnotationRecord {
    pub fn now(image_id: impl Into<String>, annotator_id: impl Into<String>, verdict: Verdict) -> Self {
        AnnotationRecord {
            image_id: image_id.into(),
            annotator_id: annotator_id.into(),
            verdict,
            timestamp: Utc::now(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "label", rename_all = "snake_case")]
pub enum Decision {
    Keep(EmotionLabel),
    RejectNoConsensus,
    RejectIrrelevant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusRule {
    pub min_agreement: usize,
    pub irrelevant_quorum: usize,
}

impl Default for ConsensusRule {
    fn default() -> Self {
        ConsensusRule {
            min_agreement: DEFAULT_MIN_AGREEMENT,
            irrelevant_quorum: DEFAULT_IRRELEVANT_QUORUM,
        }
    }
}

impl ConsensusRule {
    pub fn new(min_agreement: usize, irrelevant_quorum: usize) -> Result<Self> {
        if min_agreement < 1 {
            return Err(Error::Config("min_agreement must be at least 1".into()));
        }
        if irrelevant_quorum < 1 {
            return Err(Error::Config("irrelevant_quorum must be at least 1".into()));
        }
        Ok(ConsensusRule {
            min_agreement,
            irrelevant_quorum,
        })
    }

    /// Irrelevant votes at quorum reject first; otherwise the most-voted
    /// emotion is kept when it reaches `min_agreement` and is not tied.
    pub fn decide(&self, verdicts: &[Verdict]) -> Decision {
        let hist = histogram(verdicts);
        if hist.get(&Verdict::Irrelevant).copied().unwrap_or(0) >= self.irrelevant_quorum {
            return Decision::RejectIrrelevant;
        }
        let top = hist
            .iter()
            .filter_map(|(v, n)| match v {
                Verdict::Emotion(l) => Some((*l, *n)),
                Verdict::Irrelevant => None,
            })
            .map(|(_, n)| n)
            .max()
            .unwrap_or(0);
        if top < self.min_agreement {
            return Decision::RejectNoConsensus;
        }
        let leaders: Vec<EmotionLabel> = hist
            .iter()
            .filter_map(|(v, n)| match v {
                Verdict::Emotion(l) if *n == top => Some(*l),
                _ => None,
            })
            .collect();
        match leaders.as_slice() {
            [only] => Decision::Keep(*only),
            _ => Decision::RejectNoConsensus,
        }
    }
}

pub fn histogram(verdicts: &[Verdict]) -> BTreeMap<Verdict, usize> {
    let mut h = BTreeMap::new();
    for v in verdicts {
        *h.entry(*v).or_insert(0) += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub image_id: String,
    #[serde(flatten)]
    pub decision: Decision,
    pub vote_histogram: BTreeMap<String, usize>,
    pub annotators: usize,
}

/// Latest verdict per annotator, in first-submission order.
pub fn latest_verdicts<'a>(records: impl IntoIterator<Item = &'a AnnotationRecord>) -> Vec<(&'a str, Verdict)> {
    let mut out: Vec<(&str, Verdict)> = Vec::new();
    for r in records {
        match out.iter_mut().find(|(a, _)| *a == r.annotator_id) {
            Some(slot) => slot.1 = r.verdict,
            None => out.push((&r.annotator_id, r.verdict)),
        }
    }
    out
}

/// Decides one image from its annotation log (later submissions by the
/// same annotator replace earlier ones).
pub fn consensus(image_id: &str, records: &[AnnotationRecord], rule: ConsensusRule) -> Result<ConsensusResult> {
    let own: Vec<&AnnotationRecord> = records.iter().filter(|r| r.image_id == image_id).collect();
    if own.is_empty() {
        return Err(Error::Invalid(format!("no annotations for image `{image_id}`")));
    }
    let verdicts: Vec<Verdict> = latest_verdicts(own).into_iter().map(|(_, v)| v).collect();
    Ok(ConsensusResult {
        image_id: image_id.to_string(),
        decision: rule.decide(&verdicts),
        vote_histogram: histogram(&verdicts).into_iter().map(|(v, n)| (v.to_string(), n)).collect(),
        annotators: verdicts.len(),
    })
}

/// One result per annotated image, ordered by image id.
pub fn consensus_all(records: &[AnnotationRecord], rule: ConsensusRule) -> Vec<ConsensusResult> {
    let mut by_image: BTreeMap<&str, Vec<AnnotationRecord>> = BTreeMap::new();
    for r in records {
        by_image.entry(&r.image_id).or_default().push(r.clone());
    }
    by_image
        .into_iter()
        .map(|(id, recs)| consensus(id, &recs, rule).expect("group is non-empty"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use EmotionLabel::*;

    fn v(s: &str) -> Vec<Verdict> {
        s.chars()
            .map(|c| match c {
                'H' => Verdict::Emotion(Happiness),
                'S' => Verdict::Emotion(Sadness),
                'N' => Verdict::Emotion(Neutral),
                'A' => Verdict::Emotion(Anger),
                'I' => Verdict::Irrelevant,
                _ => unreachable!(),
            })
            .collect()
    }

    #[test]
    fn default_rule_cases() {
        let r = ConsensusRule::default();
        assert_eq!(r.decide(&v("HHHHSSNN")), Decision::Keep(Happiness));
        assert_eq!(r.decide(&v("HHHSSSNN")), Decision::RejectNoConsensus);
        assert_eq!(r.decide(&v("HHHHSSSS")), Decision::RejectNoConsensus);
        assert_eq!(r.decide(&v("IIIIHHHH")), Decision::RejectIrrelevant);
        assert_eq!(r.decide(&v("IIIHHHHA")), Decision::Keep(Happiness));
        assert_eq!(r.decide(&[]), Decision::RejectNoConsensus);
    }

    #[test]
    fn rule_validation() {
        assert!(ConsensusRule::new(0, 4).is_err());
        assert!(ConsensusRule::new(1, 0).is_err());
        let r = ConsensusRule::new(1, 4).unwrap();
        assert_eq!(r.decide(&v("A")), Decision::Keep(Anger));
    }

    #[test]
    fn verdict_strings() {
        assert_eq!("irrelevant".parse::<Verdict>().unwrap(), Verdict::Irrelevant);
        assert_eq!("happy".parse::<Verdict>().unwrap(), Verdict::Emotion(Happiness));
        assert_eq!(serde_json::to_string(&Verdict::Emotion(Fear)).unwrap(), "\"Fear\"");
        assert!("bored".parse::<Verdict>().is_err());
    }

    #[test]
    fn later_submission_replaces_earlier() {
        let mut recs: Vec<AnnotationRecord> = (0..4)
            .map(|i| AnnotationRecord::now("img", format!("a{i}"), Verdict::Emotion(Happiness)))
            .collect();
        let c = consensus("img", &recs, ConsensusRule::default()).unwrap();
        assert_eq!(c.decision, Decision::Keep(Happiness));
        recs.push(AnnotationRecord::now("img", "a0", Verdict::Emotion(Sadness)));
        let c = consensus("img", &recs, ConsensusRule::default()).unwrap();
        assert_eq!(c.decision, Decision::RejectNoConsensus);
        assert_eq!(c.annotators, 4);
        assert_eq!(c.vote_histogram["Happiness"], 3);
        assert!(consensus("other", &recs, ConsensusRule::default()).is_err());
    }

    #[test]
    fn result_json_shape() {
        let recs: Vec<AnnotationRecord> = (0..4)
            .map(|i| AnnotationRecord::now("x", format!("a{i}"), Verdict::Emotion(Anger)))
            .collect();
        let c = consensus_all(&recs, ConsensusRule::default());
        let j = serde_json::to_value(&c[0]).unwrap();
        assert_eq!(j["decision"], "keep");
        assert_eq!(j["label"], "Anger");
        let back: ConsensusResult = serde_json::from_value(j).unwrap();
        assert_eq!(back, c[0]);
    }
}
