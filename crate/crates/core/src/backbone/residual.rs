//! Residual convolutional backbone used through transfer learning. Weights
//! come from an external file; [`ResidualNet::random`] and
//! [`ResidualNet::stub`] provide deterministic stand-ins.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{global_avg_pool, max_pool2, relu_inplace, Conv2d, Linear};
use crate::error::{Error, Result};
use crate::raster::Raster;

const MAGIC: &[u8; 8] = b"SAFERRES";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSpec {
    pub stem_kernel: usize,
    pub width: usize,
    pub blocks: usize,
    /// Max-pool after the stem and after every `pool_every` blocks (0 = never).
    pub pool_every: usize,
    pub stem_pool: bool,
    /// `None` when global-average-pooled channels are the output directly.
    pub head_dim: Option<usize>,
}

/// Stem conv + ReLU, then `blocks` residual blocks of two 3×3 convs:
/// `relu(x + conv_b(relu(conv_a(x))))`. Conv layers are numbered from 1 in
/// execution order; global average pooling and an optional linear head
/// produce the feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualNet {
    pub spec: ResidualSpec,
    pub stem: Conv2d,
    pub blocks: Vec<(Conv2d, Conv2d)>,
    pub head: Option<Linear>,
}

impl ResidualNet {
    /// At least `min_layers` conv layers (rounded up to 1 + 2·blocks).
    pub fn random(seed: u64, min_layers: usize, width: usize, output_dim: usize) -> Self {
        let blocks = min_layers.saturating_sub(1).div_ceil(2);
        let spec = ResidualSpec {
            stem_kernel: 3,
            width,
            blocks,
            pool_every: 8,
            stem_pool: true,
            head_dim: Some(output_dim),
        };
        Self::init(seed, spec)
    }

    /// A 1×1 stem followed directly by global average pooling.
    pub fn stub(seed: u64, output_dim: usize) -> Self {
        let mut net = Self::init(
            seed,
            ResidualSpec {
                stem_kernel: 1,
                width: output_dim,
                blocks: 0,
                pool_every: 0,
                stem_pool: false,
                head_dim: None,
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        net.stem.bias.mapv_inplace(|_| rng.random_range(0.0..0.5));
        net
    }

    pub fn init(seed: u64, spec: ResidualSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::init(&mut rng, 3, spec.width, spec.stem_kernel, spec.stem_kernel / 2);
        let blocks = (0..spec.blocks)
            .map(|_| {
                let a = Conv2d::init(&mut rng, spec.width, spec.width, 3, 1);
                let mut b = Conv2d::init(&mut rng, spec.width, spec.width, 3, 1);
                // keep deep stacks well-conditioned
                b.weight.mapv_inplace(|w| w * 0.25);
                (a, b)
            })
            .collect();
        let head = spec.head_dim.map(|d| Linear::init(&mut rng, spec.width, d));
        ResidualNet {
            spec,
            stem,
            blocks,
            head,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.spec.head_dim.unwrap_or(self.spec.width)
    }

    pub fn num_layers(&self) -> usize {
        1 + 2 * self.blocks.len()
    }

    /// Runs the network, handing each numbered conv layer's activation
    /// (post-ReLU for block outputs) to `visit`.
    fn run(&self, image: &Raster, mut visit: impl FnMut(usize, &Array3<f64>)) -> Vec<f64> {
        let input = super::small_cnn::image_to_chw(image);
        let mut x = self.stem.forward(&input);
        relu_inplace(&mut x);
        visit(1, &x);
        if self.spec.stem_pool && x.dim().1 >= 2 && x.dim().2 >= 2 {
            x = max_pool2(&x);
        }
        for (bi, (a, b)) in self.blocks.iter().enumerate() {
            let mut h = a.forward(&x);
            relu_inplace(&mut h);
            visit(2 + 2 * bi, &h);
            let mut y = b.forward(&h);
            y += &x;
            relu_inplace(&mut y);
            visit(3 + 2 * bi, &y);
            x = y;
            let pool_now = self.spec.pool_every > 0 && (bi + 1) % self.spec.pool_every == 0;
            if pool_now && x.dim().1 >= 2 && x.dim().2 >= 2 {
                x = max_pool2(&x);
            }
        }
        let pooled = global_avg_pool(&x);
        match &self.head {
            Some(h) => h.forward(&pooled),
            None => pooled,
        }
    }

    pub fn forward(&self, image: &Raster) -> Vec<f64> {
        self.run(image, |_, _| {})
    }

    pub fn activations(&self, image: &Raster, layers: &[usize]) -> Vec<(usize, Array3<f64>)> {
        let mut out = Vec::new();
        self.run(image, |id, act| {
            if layers.contains(&id) {
                out.push((id, act.clone()));
            }
        });
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.spec).expect("spec serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for v in self.flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Weights(format!("cannot read {}: {e}", path.display())))?;
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
        let spec: ResidualSpec =
            serde_json::from_slice(body).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        let data = &bytes[16 + hlen..];
        if data.len() % 4 != 0 {
            return Err(corrupt("parameter block is not a whole number of f32"));
        }
        let values: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut net = ResidualNet::init(0, spec);
        net.unflatten(&values).map_err(|e| corrupt(&e.to_string()))?;
        Ok(net)
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        std::iter::once(&self.stem).chain(self.blocks.iter().flat_map(|(a, b)| [a, b]))
    }

    fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for c in self.convs() {
            out.extend(c.weight.iter());
            out.extend(c.bias.iter());
        }
        if let Some(h) = &self.head {
            out.extend(h.weight.iter());
            out.extend(h.bias.iter());
        }
        out
    }

    fn unflatten(&mut self, data: &[f32]) -> Result<()> {
        let expected = self.flatten().len();
        if data.len() != expected {
            return Err(Error::Weights(format!(
                "expected {expected} parameters, found {}",
                data.len()
            )));
        }
        let mut it = data.iter().copied();
        let mut fill = |a: &mut dyn Iterator<Item = &mut f32>| a.for_each(|w| *w = it.next().unwrap());
        fill(&mut self.stem.weight.iter_mut());
        fill(&mut self.stem.bias.iter_mut());
        for (a, b) in &mut self.blocks {
            fill(&mut a.weight.iter_mut());
            fill(&mut a.bias.iter_mut());
            fill(&mut b.weight.iter_mut());
            fill(&mut b.bias.iter_mut());
        }
        if let Some(h) = &mut self.head {
            fill(&mut h.weight.iter_mut());
            fill(&mut h.bias.iter_mut());
        }
        Ok(())
    }
}
