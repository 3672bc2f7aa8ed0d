use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{max_pool2, max_pool2_backward, relu_inplace, Conv2d, Linear};
use crate::error::{Error, Result};
use crate::raster::Raster;

pub const KERNEL: usize = 2;

const MAGIC: &[u8; 8] = b"SAFERCNN";
const VERSION: u32 = 1;

/// Three 2×2 stride-1 valid convolutions, each followed by ReLU and a 2×2
/// max-pool, then one fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallCnnParams {
    pub input_size: usize,
    pub convs: [Conv2d; 3],
    pub fc: Linear,
}

/// Spatial side after each conv and pool for a square input.
pub fn shape_trace(input_size: usize) -> [usize; 6] {
    let mut out = [0; 6];
    let mut s = input_size;
    for stage in 0..3 {
        s -= KERNEL - 1;
        out[2 * stage] = s;
        s /= 2;
        out[2 * stage + 1] = s;
    }
    out
}

/// Per-layer activations of one forward pass. Layers are numbered 1..=6:
/// conv1, pool1, conv2, pool2, conv3, pool3 (conv outputs are post-ReLU).
pub struct SmallCnnTrace {
    pub input: Array3<f64>,
    pub layers: Vec<Array3<f64>>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SmallCnnGrads {
    pub convs: Vec<(Array4<f64>, Array1<f64>)>,
    pub fc: (Array2<f64>, Array1<f64>),
}

pub fn image_to_chw(image: &Raster) -> Array3<f64> {
    image
        .array()
        .view()
        .permuted_axes([2, 0, 1])
        .mapv(|v| v as f64)
        .as_standard_layout()
        .into_owned()
}

impl SmallCnnParams {
    pub fn init(seed: u64, input_size: usize, channels: [usize; 3], output_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = [
            Conv2d::init(&mut rng, 3, channels[0], KERNEL, 0),
            Conv2d::init(&mut rng, channels[0], channels[1], KERNEL, 0),
            Conv2d::init(&mut rng, channels[1], channels[2], KERNEL, 0),
        ];
        let side = shape_trace(input_size)[5];
        let fc = Linear::init(&mut rng, channels[2] * side * side, output_dim);
        SmallCnnParams {
            input_size,
            convs,
            fc,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.fc.weight.dim().0
    }

    pub fn zero_biases(&mut self) {
        for c in &mut self.convs {
            c.bias.fill(0.0);
        }
        self.fc.bias.fill(0.0);
    }

    fn check_input(&self, image: &Raster) -> Result<()> {
        let s = self.input_size;
        if image.height() != s || image.width() != s {
            return Err(Error::Shape {
                expected: format!("{s}×{s}×3"),
                actual: format!("{}×{}×3", image.height(), image.width()),
            });
        }
        Ok(())
    }

    pub fn trace(&self, image: &Raster) -> Result<SmallCnnTrace> {
        self.check_input(image)?;
        let input = image_to_chw(image);
        let mut layers = Vec::with_capacity(6);
        let mut x = input.clone();
        for conv in &self.convs {
            let mut c = conv.forward(&x);
            relu_inplace(&mut c);
            let p = max_pool2(&c);
            layers.push(c);
            layers.push(p.clone());
            x = p;
        }
        let flat: Vec<f64> = x.iter().copied().collect();
        let output = self.fc.forward(&flat);
        Ok(SmallCnnTrace {
            input,
            layers,
            output,
        })
    }

    /// Gradients of `dot(grad_output, forward(image))` with respect to every
    /// parameter.
    pub fn backward(&self, trace: &SmallCnnTrace, grad_output: &[f64]) -> SmallCnnGrads {
        let pooled = &trace.layers[5];
        let flat: Vec<f64> = pooled.iter().copied().collect();
        let (g_flat, g_fc_w, g_fc_b) = self.fc.backward(&flat, grad_output);
        let mut g = Array3::from_shape_vec(pooled.dim(), g_flat).expect("pooled shape");
        let mut convs = vec![(Array4::zeros((0, 0, 0, 0)), Array1::zeros(0)); 3];
        for stage in (0..3).rev() {
            let conv_out = &trace.layers[2 * stage];
            let mut g_conv = max_pool2_backward(conv_out, &g);
            g_conv.zip_mut_with(conv_out, |gv, a| {
                if *a <= 0.0 {
                    *gv = 0.0;
                }
            });
            let conv_in = if stage == 0 {
                &trace.input
            } else {
                &trace.layers[2 * stage - 1]
            };
            let grads = self.convs[stage].backward(conv_in, &g_conv);
            convs[stage] = (grads.weight, grads.bias);
            g = grads.input;
        }
        SmallCnnGrads {
            convs,
            fc: (g_fc_w, g_fc_b),
        }
    }

    /// Plain gradient step on every parameter.
    pub fn apply_sgd(&mut self, grads: &SmallCnnGrads, lr: f64) {
        for (conv, (gw, gb)) in self.convs.iter_mut().zip(&grads.convs) {
            conv.weight.zip_mut_with(gw, |w, g| *w -= (lr * g) as f32);
            conv.bias.zip_mut_with(gb, |b, g| *b -= (lr * g) as f32);
        }
        self.fc.weight.zip_mut_with(&grads.fc.0, |w, g| *w -= (lr * g) as f32);
        self.fc.bias.zip_mut_with(&grads.fc.1, |b, g| *b -= (lr * g) as f32);
    }

    pub fn layer_shape(&self, layer: usize) -> Option<(usize, usize, usize)> {
        let trace = shape_trace(self.input_size);
        let side = *trace.get(layer.checked_sub(1)?)?;
        let ch = self.convs[(layer - 1) / 2].out_channels();
        Some((ch, side, side))
    }

    /// Flattened parameter vector in a fixed order (conv w, b ×3, fc w, b).
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.extend(c.weight.iter());
            out.extend(c.bias.iter());
        }
        out.extend(self.fc.weight.iter());
        out.extend(self.fc.bias.iter());
        out
    }

    pub fn unflatten(&mut self, data: &[f32]) -> Result<()> {
        let total: usize = self
            .convs
            .iter()
            .map(|c| c.weight.len() + c.bias.len())
            .sum::<usize>()
            + self.fc.weight.len()
            + self.fc.bias.len();
        if data.len() != total {
            return Err(Error::Weights(format!(
                "expected {total} small-CNN parameters, found {}",
                data.len()
            )));
        }
        let mut it = data.iter().copied();
        for c in &mut self.convs {
            c.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            c.bias.iter_mut().for_each(|w| *w = it.next().unwrap());
        }
        self.fc.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
        self.fc.bias.iter_mut().for_each(|w| *w = it.next().unwrap());
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SmallCnnHeader {
    input_size: usize,
    channels: [usize; 3],
    output_dim: usize,
}

impl SmallCnnParams {
    pub fn channels(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| self.convs[i].weight.dim().0)
    }

    /// Magic, version, JSON shape header, then little-endian f32 parameters.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&SmallCnnHeader {
            input_size: self.input_size,
            channels: self.channels(),
            output_dim: self.output_dim(),
        })
        .expect("header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for v in self.flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Weights(format!("cannot read {}: {e}", path.display())))?;
        let corrupt = |m: &str| Error::Weights(format!("{}: {m}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let h: SmallCnnHeader = serde_json::from_slice(body).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        let data = &bytes[16 + hlen..];
        if data.len() % 4 != 0 {
            return Err(corrupt("parameter block is not a whole number of f32"));
        }
        let values: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut p = SmallCnnParams::init(0, h.input_size, h.channels, h.output_dim);
        p.unflatten(&values).map_err(|e| corrupt(&e.to_string()))?;
        Ok(p)
    }
}

pub fn small_cnn_forward(params: &SmallCnnParams, image: &Raster) -> Result<Vec<f64>> {
    Ok(params.trace(image)?.output)
}
