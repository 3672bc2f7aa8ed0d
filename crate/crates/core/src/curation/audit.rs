use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::label::EmotionLabel;
use crate::manifest::DatasetManifest;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasRow {
    pub label: EmotionLabel,
    pub key: String,
    pub value: String,
    pub count: usize,
    /// Share of all records of `label`, in percent.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasAudit {
    pub class_totals: BTreeMap<EmotionLabel, usize>,
    /// Records of each class with no demographic tags at all.
    pub untagged: BTreeMap<EmotionLabel, usize>,
    pub rows: Vec<BiasRow>,
}

/// Cross-tabulates labels against every demographic tag key/value.
pub fn bias_audit(manifest: &DatasetManifest) -> Result<BiasAudit> {
    let mut tallies: BTreeMap<(EmotionLabel, String, String), usize> = BTreeMap::new();
    let mut untagged: BTreeMap<EmotionLabel, usize> = BTreeMap::new();
    let mut any_tags = false;
    for rec in manifest.records() {
        let Some(label) = rec.label else { continue };
        match rec.demographic_tags.as_ref().filter(|t| !t.is_empty()) {
            Some(tags) => {
                any_tags = true;
                for (k, v) in tags {
                    *tallies.entry((label, k.clone(), v.clone())).or_insert(0) += 1;
                }
            }
            None => *untagged.entry(label).or_insert(0) += 1,
        }
    }
    if !any_tags {
        return Err(Error::NoTags);
    }
    let class_totals = manifest.class_counts().clone();
    let rows = tallies
        .into_iter()
        .map(|((label, key, value), count)| BiasRow {
            label,
            key,
            value,
            count,
            percent: 100.0 * count as f64 / class_totals[&label] as f64,
        })
        .collect();
    Ok(BiasAudit {
        class_totals,
        untagged,
        rows,
    })
}

impl BiasAudit {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,key,value,count,percent\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{:.2}", r.label, r.key, r.value, r.count, r.percent).unwrap();
        }
        s
    }

    pub fn percent(&self, label: EmotionLabel, key: &str, value: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.label == label && r.key == key && r.value == value)
            .map(|r| r.percent)
    }
}
