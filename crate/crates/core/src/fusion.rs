//! Feature fusion and the two-layer classification head.
//!
//! The fused vector has a fixed layout:
//! `visible (14) ++ AU (66) ++ deep face (D_f) ++ background (D_b) ++ place (D_l)`.
//! Disabled streams are zeroed in place.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::PlaceInfo;
use crate::error::{Error, Result};
use crate::geometry::{AU_FEATURE_LEN, VISIBLE_FEATURE_LEN};
use crate::label::{EmotionLabel, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub face_deep: usize,
    pub background: usize,
    pub place: usize,
}

impl FeatureDims {
    pub fn face_total(&self) -> usize {
        VISIBLE_FEATURE_LEN + AU_FEATURE_LEN + self.face_deep
    }

    pub fn total(&self) -> usize {
        self.face_total() + self.background + self.place
    }

    pub fn visible_range(&self) -> Range<usize> {
        0..VISIBLE_FEATURE_LEN
    }

    pub fn au_range(&self) -> Range<usize> {
        VISIBLE_FEATURE_LEN..VISIBLE_FEATURE_LEN + AU_FEATURE_LEN
    }

    pub fn deep_range(&self) -> Range<usize> {
        VISIBLE_FEATURE_LEN + AU_FEATURE_LEN..self.face_total()
    }

    pub fn background_range(&self) -> Range<usize> {
        self.face_total()..self.face_total() + self.background
    }

    pub fn place_range(&self) -> Range<usize> {
        self.face_total() + self.background..self.total()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamMask {
    pub face: bool,
    pub background: bool,
    pub place: bool,
}

impl StreamMask {
    pub const ALL: StreamMask = StreamMask {
        face: true,
        background: true,
        place: true,
    };
    pub const FACE: StreamMask = StreamMask {
        face: true,
        background: false,
        place: false,
    };

    pub fn new(face: bool, background: bool, place: bool) -> Result<Self> {
        let m = StreamMask {
            face,
            background,
            place,
        };
        if !m.any() {
            return Err(Error::Config("stream mask must enable at least one stream".into()));
        }
        Ok(m)
    }

    pub fn any(&self) -> bool {
        self.face || self.background || self.place
    }

    /// The four ablation rows: F, F+B, F+P, F+B+P.
    pub fn ablation_rows() -> Vec<StreamMask> {
        ["F", "FB", "FP", "FBP"].iter().map(|s| s.parse().unwrap()).collect()
    }
}

impl Default for StreamMask {
    fn default() -> Self {
        StreamMask::ALL
    }
}

impl fmt::Display for StreamMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        for (on, c) in [(self.face, 'F'), (self.background, 'B'), (self.place, 'P')] {
            if on {
                s.push(c);
            }
        }
        f.write_str(&s)
    }
}

/// Parses letter sets such as `F`, `FB`, `F+B+P` (case-insensitive).
impl FromStr for StreamMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mut face, mut background, mut place) = (false, false, false);
        for c in s.chars() {
            match c.to_ascii_uppercase() {
                'F' => face = true,
                'B' => background = true,
                'P' => place = true,
                '+' | ' ' => {}
                _ => return Err(Error::Config(format!("invalid stream mask `{s}` (use letters F, B, P)"))),
            }
        }
        StreamMask::new(face, background, place)
    }
}

/// Per-sample features from all three streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub face_deep: Vec<f64>,
    pub au: Vec<f64>,
    pub visible: Vec<f64>,
    pub background: Vec<f64>,
    pub place: Vec<f64>,
    pub place_info: PlaceInfo,
}

impl FeatureBundle {
    pub fn validate(&self, dims: &FeatureDims) -> Result<()> {
        for (name, v, n) in [
            ("face_deep", &self.face_deep, dims.face_deep),
            ("au", &self.au, AU_FEATURE_LEN),
            ("visible", &self.visible, VISIBLE_FEATURE_LEN),
            ("background", &self.background, dims.background),
            ("place", &self.place, dims.place),
        ] {
            if v.len() != n {
                return Err(Error::Shape {
                    expected: format!("{name} of length {n}"),
                    actual: v.len().to_string(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("non-finite value in {name} features")));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            face_deep: self.face_deep.len(),
            background: self.background.len(),
            place: self.place.len(),
        }
    }
}

pub fn assemble(bundle: &FeatureBundle, mask: StreamMask) -> Result<Vec<f64>> {
    let dims = bundle.dims();
    bundle.validate(&dims)?;
    let mut out = vec![0.0; dims.total()];
    if mask.face {
        out[dims.visible_range()].copy_from_slice(&bundle.visible);
        out[dims.au_range()].copy_from_slice(&bundle.au);
        out[dims.deep_range()].copy_from_slice(&bundle.face_deep);
    }
    if mask.background {
        out[dims.background_range()].copy_from_slice(&bundle.background);
    }
    if mask.place {
        out[dims.place_range()].copy_from_slice(&bundle.place);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// (H, total)
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// (7, H)
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: [f64; NUM_CLASSES],
    pub probs: [f64; NUM_CLASSES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// Gradient with respect to the fused input vector.
    pub input: Vec<f64>,
}

impl ClassifierGrads {
    pub fn zeros(params: &ClassifierParams) -> Self {
        ClassifierGrads {
            w1: Array2::zeros(params.w1.dim()),
            b1: Array1::zeros(params.b1.len()),
            w2: Array2::zeros(params.w2.dim()),
            b2: Array1::zeros(NUM_CLASSES),
            input: vec![0.0; params.input_dim()],
        }
    }

    pub fn add_scaled(&mut self, other: &ClassifierGrads, s: f64) {
        self.w1.scaled_add(s, &other.w1);
        self.b1.scaled_add(s, &other.b1);
        self.w2.scaled_add(s, &other.w2);
        self.b2.scaled_add(s, &other.b2);
        for (a, b) in self.input.iter_mut().zip(&other.input) {
            *a += s * b;
        }
    }
}

impl ClassifierParams {
    /// Uniform He-style initialization.
    pub fn init(total_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b1_bound = (6.0 / total_dim as f64).sqrt();
        let b2_bound = (6.0 / hidden as f64).sqrt();
        ClassifierParams {
            w1: Array2::from_shape_simple_fn((hidden, total_dim), || rng.random_range(-b1_bound..b1_bound)),
            b1: Array1::zeros(hidden),
            w2: Array2::from_shape_simple_fn((NUM_CLASSES, hidden), || rng.random_range(-b2_bound..b2_bound)),
            b2: Array1::zeros(NUM_CLASSES),
        }
    }

    pub fn zeros(total_dim: usize, hidden: usize) -> Self {
        ClassifierParams {
            w1: Array2::zeros((hidden, total_dim)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((NUM_CLASSES, hidden)),
            b2: Array1::zeros(NUM_CLASSES),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.dim().1
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.dim().0
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameter slices in checkpoint order (w1, b1, w2, b2).
    pub fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn slices(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }
}

impl ClassifierGrads {
    pub fn slices(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let lse = log_sum_exp(logits);
    logits.map(|l| (l - lse).exp())
}

pub fn forward(params: &ClassifierParams, input: &[f64]) -> Result<ForwardPass> {
    if input.len() != params.input_dim() {
        return Err(Error::Shape {
            expected: format!("fused vector of length {}", params.input_dim()),
            actual: input.len().to_string(),
        });
    }
    let w1 = params.w1.as_slice().expect("standard layout");
    let hidden_pre: Vec<f64> = w1
        .chunks_exact(input.len().max(1))
        .take(params.hidden_dim())
        .zip(params.b1.iter())
        .map(|(row, b)| row.iter().zip(input).fold(*b, |acc, (w, x)| acc + w * x))
        .collect();
    let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
    let mut logits = [0.0; NUM_CLASSES];
    for (k, row) in params.w2.outer_iter().enumerate() {
        logits[k] = row.iter().zip(&hidden).fold(params.b2[k], |acc, (w, h)| acc + w * h);
    }
    Ok(ForwardPass {
        probs: softmax(&logits),
        hidden_pre,
        hidden,
        logits,
    })
}

/// Cross-entropy of the true class, from logits via log-sum-exp.
pub fn loss(logits: &[f64; NUM_CLASSES], label: EmotionLabel) -> f64 {
    (log_sum_exp(logits) - logits[label.code()]).max(0.0)
}

/// Loss and analytic gradients for one sample.
pub fn gradient(params: &ClassifierParams, input: &[f64], label: EmotionLabel) -> Result<(f64, ClassifierGrads)> {
    let pass = forward(params, input)?;
    Ok((loss(&pass.logits, label), backward(params, input, &pass, label)))
}

pub fn backward(params: &ClassifierParams, input: &[f64], pass: &ForwardPass, label: EmotionLabel) -> ClassifierGrads {
    let mut g = ClassifierGrads::zeros(params);
    accumulate_backward(params, input, pass, label, 1.0, &mut g);
    g
}

/// Adds `scale ×` the sample's gradients into `acc`.
pub fn accumulate_backward(
    params: &ClassifierParams,
    input: &[f64],
    pass: &ForwardPass,
    label: EmotionLabel,
    scale: f64,
    acc: &mut ClassifierGrads,
) {
    let h = params.hidden_dim();
    let mut d_logits = pass.probs;
    d_logits[label.code()] -= 1.0;

    let mut d_hidden = vec![0.0; h];
    for k in 0..NUM_CLASSES {
        let g = d_logits[k];
        acc.b2[k] += scale * g;
        let mut grow = acc.w2.row_mut(k);
        let prow = params.w2.row(k);
        for j in 0..h {
            grow[j] += scale * g * pass.hidden[j];
            d_hidden[j] += g * prow[j];
        }
    }
    for j in 0..h {
        let g = if pass.hidden_pre[j] > 0.0 { d_hidden[j] } else { 0.0 };
        if g == 0.0 {
            continue;
        }
        acc.b1[j] += scale * g;
        let grow = acc.w1.row_mut(j).into_slice().expect("contiguous row");
        let prow = params.w1.row(j);
        let prow = prow.as_slice().expect("contiguous row");
        let sg = scale * g;
        for i in 0..input.len() {
            grow[i] += sg * input[i];
            acc.input[i] += sg * prow[i];
        }
    }
}

/// Index of the largest probability; ties go to the lowest code.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

pub fn predict(
    params: &ClassifierParams,
    bundle: &FeatureBundle,
    mask: StreamMask,
) -> Result<(EmotionLabel, [f64; NUM_CLASSES])> {
    let x = assemble(bundle, mask)?;
    let pass = forward(params, &x)?;
    let label = EmotionLabel::from_code(argmax(&pass.probs)).expect("7 classes");
    Ok((label, pass.probs))
}

const CKPT_MAGIC: &[u8; 8] = b"SAFERCKP";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub dims: FeatureDims,
    pub hidden: usize,
    pub mask: StreamMask,
    pub seed: u64,
}

/// Writes the header as length-prefixed JSON followed by w1, b1, w2, b2 as
/// little-endian f32.
pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &ClassifierParams) -> Result<()> {
    if header.dims.total() != params.input_dim() || header.hidden != params.hidden_dim() {
        return Err(Error::Checkpoint("header does not match parameter shapes".into()));
    }
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * params.num_params());
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for s in params.slices() {
        for v in s {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ClassifierParams)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(&format!("bad header: {e}")))?;
    let mut params = ClassifierParams::zeros(header.dims.total(), header.hidden);
    let data = &bytes[16 + hlen..];
    if data.len() != 4 * params.num_params() {
        return Err(bad(&format!(
            "expected {} parameters, found {} bytes",
            params.num_params(),
            data.len()
        )));
    }
    let mut values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    for s in params.slices_mut() {
        for v in s.iter_mut() {
            *v = values.next().unwrap();
        }
    }
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(dims: FeatureDims, seed: u64) -> FeatureBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        FeatureBundle {
            face_deep: v(dims.face_deep),
            au: v(AU_FEATURE_LEN),
            visible: v(VISIBLE_FEATURE_LEN),
            background: v(dims.background),
            place: v(dims.place),
            place_info: PlaceInfo::new("room", vec![], 0.5).unwrap(),
        }
    }

    const DIMS: FeatureDims = FeatureDims {
        face_deep: 3,
        background: 2,
        place: 4,
    };

    #[test]
    fn mask_parse_and_display() {
        assert_eq!("FBP".parse::<StreamMask>().unwrap(), StreamMask::ALL);
        assert_eq!("f+b".parse::<StreamMask>().unwrap().to_string(), "FB");
        assert!("".parse::<StreamMask>().is_err());
        assert!("FX".parse::<StreamMask>().is_err());
        let rows: Vec<String> = StreamMask::ablation_rows().iter().map(|m| m.to_string()).collect();
        assert_eq!(rows, ["F", "FB", "FP", "FBP"]);
    }

    #[test]
    fn assemble_layout_and_masking() {
        let b = bundle(DIMS, 1);
        assert_eq!(DIMS.total(), 3 + 66 + 14 + 2 + 4);
        let all = assemble(&b, StreamMask::ALL).unwrap();
        let expected: Vec<f64> = [&b.visible, &b.au, &b.face_deep, &b.background, &b.place]
            .into_iter()
            .flatten()
            .copied()
            .collect();
        assert_eq!(all, expected);
        let f = assemble(&b, StreamMask::FACE).unwrap();
        assert_eq!(&f[..DIMS.face_total()], &all[..DIMS.face_total()]);
        assert!(f[DIMS.face_total()..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn assemble_rejects_bad_bundles() {
        let mut b = bundle(DIMS, 2);
        b.au.pop();
        assert!(assemble(&b, StreamMask::ALL).is_err());
        let mut b = bundle(DIMS, 2);
        b.place[0] = f64::NAN;
        assert!(assemble(&b, StreamMask::ALL).is_err());
    }

    #[test]
    fn zero_params_give_uniform() {
        let p = ClassifierParams::zeros(DIMS.total(), 5);
        let pass = forward(&p, &vec![0.3; DIMS.total()]).unwrap();
        for q in pass.probs {
            assert!((q - 1.0 / 7.0).abs() < 1e-15);
        }
        assert!((loss(&pass.logits, EmotionLabel::Fear) - 7f64.ln()).abs() < 1e-12);
        assert!(forward(&p, &[1.0]).is_err());
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let p = softmax(&[1000.0, 1000.0, -1000.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let l = loss(&[1000.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], EmotionLabel::Anger);
        assert!(l >= 0.0 && l < 1e-300_f64.max(1e-12));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.4, 0.0, 0.0, 0.4, 0.1, 0.05, 0.05]), 0);
        assert_eq!(argmax(&[0.1, 0.0, 0.0, 0.6, 0.1, 0.1, 0.1]), 3);
    }

    #[test]
    fn bias2_gradient_is_p_minus_onehot() {
        let p = ClassifierParams::init(DIMS.total(), 6, 3);
        let x = assemble(&bundle(DIMS, 4), StreamMask::ALL).unwrap();
        let (_, g) = gradient(&p, &x, EmotionLabel::Sadness).unwrap();
        let pass = forward(&p, &x).unwrap();
        for k in 0..7 {
            let one = if k == EmotionLabel::Sadness.code() { 1.0 } else { 0.0 };
            assert!((g.b2[k] - (pass.probs[k] - one)).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let p = ClassifierParams::init(DIMS.total(), 4, 9);
        let header = CheckpointHeader {
            config_hash: "abc".into(),
            dims: DIMS,
            hidden: 4,
            mask: "FB".parse().unwrap(),
            seed: 9,
        };
        save_checkpoint(&path, &header, &p).unwrap();
        let (h2, q) = load_checkpoint(&path).unwrap();
        assert_eq!(h2, header);
        for (a, b) in p.slices().iter().zip(q.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
