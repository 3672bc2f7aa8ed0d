use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pipeline::{extract_examples, Example, FeaturePipeline};
use super::train::train_examples;
use crate::backbone::BackboneHandle;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::fusion::{predict, ClassifierParams, FeatureDims, StreamMask};
use crate::label::{EmotionLabel, NUM_CLASSES};
use crate::manifest::{DatasetManifest, Split};

/// Rows are true labels, columns predicted labels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn record(&mut self, truth: EmotionLabel, predicted: EmotionLabel) {
        self.counts[truth.code()][predicted.code()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> [u64; NUM_CLASSES] {
        self.counts.map(|r| r.iter().sum())
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }

    /// Rows must match the per-class counts of the evaluated split.
    pub fn check(&self, class_counts: &[u64; NUM_CLASSES]) -> Result<()> {
        if &self.row_sums() != class_counts {
            return Err(Error::Invalid(format!(
                "confusion rows {:?} disagree with class counts {:?}",
                self.row_sums(),
                class_counts
            )));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for l in EmotionLabel::ALL {
            write!(s, ",{l}").unwrap();
        }
        s.push('\n');
        for l in EmotionLabel::ALL {
            s.push_str(l.name());
            for c in self.counts[l.code()] {
                write!(s, ",{c}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Row-normalized heat map, `cell` pixels per entry, white to dark blue.
    pub fn save_heatmap(&self, path: &Path, cell: u32) -> Result<()> {
        let n = NUM_CLASSES as u32;
        let rows = self.row_sums();
        let img = image::RgbImage::from_fn(n * cell, n * cell, |x, y| {
            let (i, j) = ((y / cell) as usize, (x / cell) as usize);
            let frac = if rows[i] == 0 {
                0.0
            } else {
                self.counts[i][j] as f64 / rows[i] as f64
            };
            let mix = |from: f64, to: f64| (from + (to - from) * frac).round() as u8;
            image::Rgb([mix(255.0, 8.0), mix(255.0, 48.0), mix(255.0, 107.0)])
        });
        img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub truth: EmotionLabel,
    pub predicted: EmotionLabel,
    pub probabilities: [f64; NUM_CLASSES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<Prediction>,
}

/// Accuracy is `correct / total`; the returned matrix is checked against
/// the split's class counts.
pub fn evaluate_examples(params: &ClassifierParams, examples: &[Example], mask: StreamMask) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::EmptySplit("evaluation split is empty".into()));
    }
    let mut confusion = ConfusionMatrix::default();
    let mut class_counts = [0u64; NUM_CLASSES];
    let mut predictions = Vec::with_capacity(examples.len());
    for e in examples {
        let (predicted, probabilities) = predict(params, &e.bundle, mask)?;
        confusion.record(e.label, predicted);
        class_counts[e.label.code()] += 1;
        predictions.push(Prediction {
            sample_id: e.id.clone(),
            truth: e.label,
            predicted,
            probabilities,
        });
    }
    confusion.check(&class_counts)?;
    let correct = predictions.iter().filter(|p| p.truth == p.predicted).count();
    let accuracy = correct as f64 / examples.len() as f64;
    debug_assert_eq!(accuracy, confusion.accuracy());
    Ok(EvalReport {
        accuracy,
        confusion,
        predictions,
    })
}

/// With `face_backbone`, the deep face slot is recomputed from face crops
/// (used after fine-tuning).
pub fn evaluate(
    params: &ClassifierParams,
    manifest: &DatasetManifest,
    split: Split,
    pipeline: &dyn FeaturePipeline,
    mask: StreamMask,
    face_backbone: Option<&BackboneHandle>,
    workers: usize,
) -> Result<EvalReport> {
    let recs = manifest.split_records(split);
    if recs.is_empty() {
        return Err(Error::EmptySplit(format!("split `{split}` of `{}` is empty", manifest.name())));
    }
    let mut examples = extract_examples(pipeline, manifest, &recs, 0, face_backbone.is_some(), workers)?;
    if let Some(cnn) = face_backbone {
        for e in &mut examples {
            if let Some(crop) = e.face_crop.take() {
                e.bundle.face_deep = cnn.forward(&crop)?;
            }
        }
    }
    evaluate_examples(params, &examples, mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: StreamMask,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Columns `F,B,P,<dataset>`: stream flags as 0/1, then accuracy.
    pub fn to_csv(&self) -> String {
        let mut s = format!("F,B,P,{}\n", self.dataset);
        for r in &self.rows {
            let b = |v: bool| u8::from(v);
            writeln!(s, "{},{},{},{:.6}", b(r.mask.face), b(r.mask.background), b(r.mask.place), r.accuracy).unwrap();
        }
        s
    }

    pub fn accuracy_of(&self, mask: StreamMask) -> Option<f64> {
        self.rows.iter().find(|r| r.mask == mask).map(|r| r.accuracy)
    }
}

/// Trains one model per mask with the shared seed and evaluates each on `test`.
pub fn ablation_from_examples(
    cfg: &PipelineConfig,
    dataset: &str,
    dims: FeatureDims,
    train: &[Example],
    val: &[Example],
    test: &[Example],
    masks: &[StreamMask],
) -> Result<AblationReport> {
    if masks.is_empty() {
        return Err(Error::Config("ablation needs at least one stream mask".into()));
    }
    let mut rows = Vec::with_capacity(masks.len());
    for &mask in masks {
        let outcome = train_examples(cfg, dims, train, val, mask, None)?;
        let report = evaluate_examples(&outcome.params, test, mask)?;
        rows.push(AblationRow {
            mask,
            accuracy: report.accuracy,
        });
    }
    Ok(AblationReport {
        dataset: dataset.to_string(),
        rows,
    })
}

pub fn ablation_run(
    cfg: &PipelineConfig,
    manifest: &DatasetManifest,
    pipeline: &dyn FeaturePipeline,
    masks: &[StreamMask],
    workers: usize,
) -> Result<AblationReport> {
    if cfg.fine_tune_backbone {
        return Err(Error::Config("ablation runs with frozen backbones; disable fine_tune_backbone".into()));
    }
    let mut sets: BTreeMap<Split, Vec<Example>> = BTreeMap::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let recs = manifest.split_records(split);
        if recs.is_empty() {
            return Err(Error::EmptySplit(format!("split `{split}` of `{}` is empty", manifest.name())));
        }
        let copies = if split == Split::Train { cfg.augmentation.copies } else { 0 };
        sets.insert(split, extract_examples(pipeline, manifest, &recs, copies, false, workers)?);
    }
    ablation_from_examples(
        cfg,
        manifest.name(),
        pipeline.dims(),
        &sets[&Split::Train],
        &sets[&Split::Val],
        &sets[&Split::Test],
        masks,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_formula_and_invariants() {
        let mut c = ConfusionMatrix::default();
        for _ in 0..91 {
            c.record(EmotionLabel::Happiness, EmotionLabel::Happiness);
        }
        for _ in 0..9 {
            c.record(EmotionLabel::Happiness, EmotionLabel::Neutral);
        }
        assert_eq!(c.accuracy(), 0.91);
        let mut counts = [0; 7];
        counts[3] = 100;
        c.check(&counts).unwrap();
        counts[3] = 99;
        assert!(c.check(&counts).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut c = ConfusionMatrix::default();
        c.record(EmotionLabel::Anger, EmotionLabel::Disgust);
        let csv = c.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 8);
        assert_eq!(lines[0], "true\\predicted,Anger,Disgust,Fear,Happiness,Sadness,Surprise,Neutral");
        assert_eq!(lines[1], "Anger,0,1,0,0,0,0,0");
    }

    #[test]
    fn heatmap_png_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.png");
        let mut c = ConfusionMatrix::default();
        c.record(EmotionLabel::Fear, EmotionLabel::Fear);
        c.save_heatmap(&p, 10).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (70, 70));
        assert_eq!(img.get_pixel(25, 25).0, [8, 48, 107]);
        assert_eq!(img.get_pixel(0, 0).0, [255, 255, 255]);
    }

    #[test]
    fn ablation_csv_layout() {
        let r = AblationReport {
            dataset: "toy".into(),
            rows: vec![
                AblationRow {
                    mask: StreamMask::FACE,
                    accuracy: 0.5,
                },
                AblationRow {
                    mask: StreamMask::ALL,
                    accuracy: 0.75,
                },
            ],
        };
        assert_eq!(r.to_csv(), "F,B,P,toy\n1,0,0,0.500000\n1,1,1,0.750000\n");
        assert_eq!(r.accuracy_of(StreamMask::ALL), Some(0.75));
    }
}
