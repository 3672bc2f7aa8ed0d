use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pipeline::{extract_examples, Example, FeaturePipeline};
use crate::backbone::{BackboneHandle, Network, SmallCnnGrads, SmallCnnParams};
use crate::config::{BackboneKind, PipelineConfig};
use crate::error::{Error, Result};
use crate::fusion::{
    accumulate_backward, argmax, assemble, backward, forward, loss, ClassifierGrads, ClassifierParams, FeatureDims, StreamMask};
use crate::manifest::{DatasetManifest, Split};

const HEAD_SEED_SALT: u64 = 0x00f0_5e00;

/// Adam over a fixed list of parameter slices.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Halves (by `decay`) the rate when validation accuracy has not improved
/// for `patience` epochs, never going below `floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub decay: f64,
    pub patience: usize,
    pub floor: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, decay: f64, patience: usize, floor: f64) -> Self {
        PlateauScheduler {
            lr,
            decay,
            patience,
            floor,
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    /// Records one epoch's metric; returns whether it improved.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.stale = 0;
            return true;
        }
        self.stale += 1;
        if self.stale >= self.patience.max(1) {
            self.lr = (self.lr * self.decay).max(self.floor);
            self.stale = 0;
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub seed: u64,
    pub mask: StreamMask,
    pub checkpoint: Option<PathBuf>,
}

impl TrainHistory {
    pub fn learning_rates(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.learning_rate).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ClassifierParams,
    pub history: TrainHistory,
    /// Best-epoch face CNN when fine-tuning was enabled.
    pub face_backbone: Option<BackboneHandle>,
}

fn flatten_cnn_grads(g: &SmallCnnGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in &g.convs {
        out.extend(w.iter());
        out.extend(b.iter());
    }
    out.extend(g.fc.0.iter());
    out.extend(g.fc.1.iter());
    out
}

/// Mutable state for fine-tuning the small face CNN alongside the head.
struct FaceTuner {
    params: SmallCnnParams,
    flat: Vec<f64>,
    adam: Adam,
}

impl FaceTuner {
    fn new(handle: &BackboneHandle) -> Result<Self> {
        match handle.network() {
            Network::SmallCnn(p) => {
                let flat: Vec<f64> = p.flatten().iter().map(|v| *v as f64).collect();
                Ok(FaceTuner {
                    params: p.clone(),
                    adam: Adam::new(&[flat.len()]),
                    flat,
                })
            }
            Network::Residual(_) => Err(Error::Config(
                "fine_tune_backbone is supported for the small CNN only".into(),
            )),
        }
    }

    fn handle(&self) -> BackboneHandle {
        BackboneHandle::small_cnn(self.params.clone())
    }
}

fn crop_of(e: &Example) -> Result<&crate::raster::Raster> {
    e.face_crop
        .as_ref()
        .ok_or_else(|| Error::Config(format!("fine-tuning needs the face crop of `{}`", e.id)))
}

/// Fused input vectors, recomputing the deep face slot when fine-tuning.
fn inputs(examples: &[Example], mask: StreamMask, tuner: Option<&FaceTuner>) -> Result<Vec<Vec<f64>>> {
    examples
        .iter()
        .map(|e| match tuner {
            Some(t) => {
                let mut b = e.bundle.clone();
                b.face_deep = t.params.trace(crop_of(e)?)?.output;
                assemble(&b, mask)
            }
            None => assemble(&e.bundle, mask),
        })
        .collect()
}

fn accuracy_of(params: &ClassifierParams, xs: &[Vec<f64>], examples: &[Example]) -> Result<f64> {
    let mut correct = 0usize;
    for (x, e) in xs.iter().zip(examples) {
        if argmax(&forward(params, x)?.probs) == e.label.code() {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Minibatch Adam on cross-entropy with reduce-on-plateau scheduling;
/// returns the parameters of the best validation epoch.
pub fn train_examples(
    cfg: &PipelineConfig,
    dims: FeatureDims,
    train: &[Example],
    val: &[Example],
    mask: StreamMask,
    face_backbone: Option<&BackboneHandle>,
) -> Result<TrainOutcome> {
    if !mask.any() {
        return Err(Error::Config("stream mask disables every stream".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptySplit("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation split is empty".into()));
    }
    let mut tuner = match (cfg.fine_tune_backbone, face_backbone) {
        (false, _) => None,
        (true, Some(h)) => Some(FaceTuner::new(h)?),
        (true, None) => {
            return Err(Error::Config("fine_tune_backbone needs a face backbone from the pipeline".into()))
        }
    };
    if cfg.fine_tune_backbone && cfg.backbone_kind != BackboneKind::SmallCnn {
        return Err(Error::Config("fine_tune_backbone is supported for the small CNN only".into()));
    }

    let mut params = ClassifierParams::init(dims.total(), cfg.hidden_dim, cfg.seed ^ HEAD_SEED_SALT);
    let sizes: Vec<usize> = params.slices().iter().map(|s| s.len()).collect();
    let mut adam = Adam::new(&sizes);
    let mut sched = PlateauScheduler::new(cfg.initial_lr, cfg.lr_decay, cfg.plateau_patience, cfg.min_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let deep = dims.deep_range();

    let mut train_x = inputs(train, mask, tuner.as_ref())?;
    let mut best = (params.clone(), tuner.as_ref().map(|t| t.handle()));
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        seed: cfg.seed,
        mask,
        checkpoint: None,
    };

    for epoch in 1..=cfg.epochs {
        let lr = sched.lr;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc = ClassifierGrads::zeros(&params);
            let mut cnn_acc: Option<Vec<f64>> = tuner.as_ref().map(|t| vec![0.0; t.flat.len()]);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let e = &train[i];
                let trace = match &tuner {
                    Some(t) => {
                        let tr = t.params.trace(crop_of(e)?)?;
                        if mask.face {
                            train_x[i][deep.clone()].copy_from_slice(&tr.output);
                        }
                        Some(tr)
                    }
                    None => None,
                };
                let x = &train_x[i];
                let pass = forward(&params, x)?;
                let l = loss(&pass.logits, e.label);
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: bi,
                        detail: format!("sample `{}`, logits {:?}", e.id, pass.logits),
                    });
                }
                loss_sum += l;
                if argmax(&pass.probs) == e.label.code() {
                    correct += 1;
                }
                if let (Some(t), Some(tr), Some(cacc)) = (&tuner, &trace, cnn_acc.as_mut()) {
                    let g = backward(&params, x, &pass, e.label);
                    if mask.face {
                        let cg = t.params.backward(tr, &g.input[deep.clone()]);
                        for (a, v) in cacc.iter_mut().zip(flatten_cnn_grads(&cg)) {
                            *a += scale * v;
                        }
                    }
                    acc.add_scaled(&g, scale);
                } else {
                    accumulate_backward(&params, x, &pass, e.label, scale, &mut acc);
                }
            }
            let grads = acc.slices();
            if !grads.iter().all(|g| g.iter().all(|v| v.is_finite())) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: "non-finite gradient".into(),
                });
            }
            let mut slices = params.slices_mut();
            adam.step(&mut slices, &grads, lr);
            if let (Some(t), Some(cacc)) = (tuner.as_mut(), cnn_acc) {
                t.adam.step(&mut [t.flat.as_mut_slice()], &[&cacc], lr);
                let as_f32: Vec<f32> = t.flat.iter().map(|v| *v as f32).collect();
                t.params.unflatten(&as_f32)?;
            }
        }
        if tuner.is_some() {
            train_x = inputs(train, mask, tuner.as_ref())?;
        }
        let val_x = inputs(val, mask, tuner.as_ref())?;
        let val_accuracy = accuracy_of(&params, &val_x, val)?;
        // running accuracy of the pre-update predictions seen during the epoch
        let train_accuracy = correct as f64 / train.len() as f64;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy,
            val_accuracy,
            learning_rate: lr,
        });
        if sched.observe(val_accuracy) {
            history.best_epoch = epoch;
            history.best_val_accuracy = val_accuracy;
            best = (params.clone(), tuner.as_ref().map(|t| t.handle()));
        }
        log::debug!("epoch {epoch}: loss {:.4} val {:.4} lr {lr:e}", loss_sum / train.len() as f64, val_accuracy);
    }
    Ok(TrainOutcome {
        params: best.0,
        history,
        face_backbone: best.1,
    })
}

/// Extracts train/val examples from `manifest` and trains the head.
pub fn train(
    cfg: &PipelineConfig,
    manifest: &DatasetManifest,
    pipeline: &dyn FeaturePipeline,
    mask: StreamMask,
    workers: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_recs = manifest.split_records(Split::Train);
    let val_recs = manifest.split_records(Split::Val);
    if train_recs.is_empty() || val_recs.is_empty() {
        return Err(Error::EmptySplit(format!(
            "manifest `{}` needs non-empty train and val splits (train {}, val {})",
            manifest.name(),
            train_recs.len(),
            val_recs.len()
        )));
    }
    let crops = cfg.fine_tune_backbone;
    let train_ex = extract_examples(pipeline, manifest, &train_recs, cfg.augmentation.copies, crops, workers)?;
    let val_ex = extract_examples(pipeline, manifest, &val_recs, 0, crops, workers)?;
    train_examples(cfg, pipeline.dims(), &train_ex, &val_ex, mask, pipeline.face_backbone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::PlaceInfo;
    use crate::fusion::FeatureBundle;
    use crate::label::EmotionLabel;
    use rand::Rng;

    fn toy(dims: FeatureDims, per_class: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for label in EmotionLabel::ALL {
            for i in 0..per_class {
                let mut v = |n: usize, k: usize| -> Vec<f64> {
                    (0..n)
                        .map(|j| if j % 7 == k { 2.0 } else { 0.0 } + rng.random_range(-0.1..0.1))
                        .collect()
                };
                let c = label.code();
                out.push(Example {
                    id: format!("{label}-{i}"),
                    label,
                    bundle: FeatureBundle {
                        face_deep: v(dims.face_deep, c),
                        au: v(66, c),
                        visible: v(14, c),
                        background: v(dims.background, c),
                        place: v(dims.place, c),
                        place_info: PlaceInfo::new("room", vec![], 1.0).unwrap(),
                    },
                    face_crop: None,
                });
            }
        }
        out
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(&[2]);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            adam.step(&mut [x.as_mut_slice()], &[&g], 0.05);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn plateau_halves_and_floors() {
        let mut s = PlateauScheduler::new(1e-5, 0.5, 2, 3e-6);
        assert!(s.observe(0.5));
        assert!(!s.observe(0.5));
        assert_eq!(s.lr, 1e-5);
        s.observe(0.4);
        assert_eq!(s.lr, 5e-6);
        s.observe(0.4);
        s.observe(0.4);
        assert_eq!(s.lr, 3e-6);
    }

    #[test]
    fn trains_toy_set_deterministically() {
        let mut cfg = PipelineConfig::desk_scale();
        cfg.epochs = 40;
        cfg.initial_lr = 1e-3;
        let dims = cfg.feature_dims();
        let data = toy(dims, 4, 1);
        let a = train_examples(&cfg, dims, &data, &data, StreamMask::ALL, None).unwrap();
        let b = train_examples(&cfg, dims, &data, &data, StreamMask::ALL, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.history.epochs[0].learning_rate, 1e-3);
        assert_eq!(a.history.best_val_accuracy, 1.0);
    }

    #[test]
    fn empty_splits_rejected() {
        let cfg = PipelineConfig::desk_scale();
        let dims = cfg.feature_dims();
        let data = toy(dims, 1, 1);
        assert!(matches!(
            train_examples(&cfg, dims, &[], &data, StreamMask::ALL, None),
            Err(Error::EmptySplit(_))
        ));
        assert!(matches!(
            train_examples(&cfg, dims, &data, &[], StreamMask::ALL, None),
            Err(Error::EmptySplit(_))
        ));
    }

    #[test]
    fn non_finite_features_abort() {
        let mut cfg = PipelineConfig::desk_scale();
        cfg.epochs = 1;
        let dims = cfg.feature_dims();
        let mut data = toy(dims, 1, 1);
        let b = &mut data[0].bundle;
        for v in b.face_deep.iter_mut().chain(b.au.iter_mut()) {
            *v = f64::MAX;
        }
        let r = train_examples(&cfg, dims, &data, &data, StreamMask::ALL, None);
        assert!(matches!(r, Err(Error::NonFiniteLoss { epoch: 1, .. })), "{r:?}");
    }
}
