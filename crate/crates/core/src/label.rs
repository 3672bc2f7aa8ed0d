use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const NUM_CLASSES: usize = 7;

/// The seven basic emotions. Discriminants are the stable integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmotionLabel {
    Anger = 0,
    Disgust = 1,
    Fear = 2,
    Happiness = 3,
    Sadness = 4,
    Surprise = 5,
    Neutral = 6,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; NUM_CLASSES] = [
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Happiness,
        EmotionLabel::Sadness,
        EmotionLabel::Surprise,
        EmotionLabel::Neutral,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Anger => "Anger",
            EmotionLabel::Disgust => "Disgust",
            EmotionLabel::Fear => "Fear",
            EmotionLabel::Happiness => "Happiness",
            EmotionLabel::Sadness => "Sadness",
            EmotionLabel::Surprise => "Surprise",
            EmotionLabel::Neutral => "Neutral",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    /// Accepts the canonical name (case-insensitive), the common dataset
    /// aliases (`angry`, `happy`, `sad`, ...) or the integer code.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        if let Ok(code) = lower.parse::<usize>() {
            return Self::from_code(code)
                .ok_or_else(|| Error::Invalid(format!("emotion code {code} out of range 0-6")));
        }
        let label = match lower.as_str() {
            "anger" | "angry" => EmotionLabel::Anger,
            "disgust" | "disgusted" => EmotionLabel::Disgust,
            "fear" | "afraid" | "scared" => EmotionLabel::Fear,
            "happiness" | "happy" => EmotionLabel::Happiness,
            "sadness" | "sad" => EmotionLabel::Sadness,
            "surprise" | "surprised" => EmotionLabel::Surprise,
            "neutral" => EmotionLabel::Neutral,
            _ => return Err(Error::Invalid(format!("unknown emotion label `{s}`"))),
        };
        Ok(label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_stable() {
        for (i, l) in EmotionLabel::ALL.iter().enumerate() {
            assert_eq!(l.code(), i);
            assert_eq!(EmotionLabel::from_code(i), Some(*l));
        }
        assert_eq!(EmotionLabel::from_code(7), None);
        assert_eq!(EmotionLabel::Happiness.code(), 3);
    }

    #[test]
    fn parses_aliases() {
        assert_eq!("happy".parse::<EmotionLabel>().unwrap(), EmotionLabel::Happiness);
        assert_eq!("Angry".parse::<EmotionLabel>().unwrap(), EmotionLabel::Anger);
        assert_eq!("6".parse::<EmotionLabel>().unwrap(), EmotionLabel::Neutral);
        assert!("contempt".parse::<EmotionLabel>().is_err());
    }
}
