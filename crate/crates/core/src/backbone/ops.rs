//! Dense layer primitives over channel-major (C, H, W) activations.
//!
//! Parameters are stored as `f32`; activations and accumulation use `f64`.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;

/// Square-kernel, stride-1 convolution with symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub padding: usize,
}

pub struct ConvGrads {
    pub input: Array3<f64>,
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn init(rng: &mut impl Rng, in_ch: usize, out_ch: usize, kernel: usize, padding: usize) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt() as f32;
        let weight = Array4::from_shape_simple_fn((out_ch, in_ch, kernel, kernel), || {
            rng.random_range(-bound..=bound)
        });
        Conv2d {
            weight,
            bias: Array1::zeros(out_ch),
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (h + 2 * self.padding + 1 - k, w + 2 * self.padding + 1 - k)
    }

    /// Range of output columns whose input column `o + k - p` is in bounds.
    fn valid_range(out_len: usize, in_len: usize, k: usize, p: usize) -> (usize, usize) {
        let lo = p.saturating_sub(k);
        let hi = (in_len + p).saturating_sub(k).min(out_len);
        (lo, hi.max(lo))
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (cin, h, w) = x.dim();
        assert_eq!(cin, self.in_channels(), "conv input channels");
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel();
        let p = self.padding;
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let mut out = Array3::<f64>::zeros((self.out_channels(), oh, ow));
        for o in 0..self.out_channels() {
            let mut plane = out.index_axis_mut(ndarray::Axis(0), o);
            let plane = plane.as_slice_mut().expect("contiguous plane");
            plane.fill(self.bias[o] as f64);
            for i in 0..cin {
                let base = i * h * w;
                for ky in 0..k {
                    let (y0, y1) = Self::valid_range(oh, h, ky, p);
                    for kx in 0..k {
                        let wv = self.weight[[o, i, ky, kx]] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = Self::valid_range(ow, w, kx, p);
                        for oy in y0..y1 {
                            let iy = oy + ky - p;
                            let src = &xs[base + iy * w + x0 + kx - p..base + iy * w + x1 + kx - p];
                            let dst = &mut plane[oy * ow + x0..oy * ow + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, x: &Array3<f64>, grad_out: &Array3<f64>) -> ConvGrads {
        let (cin, h, w) = x.dim();
        let (cout, oh, ow) = grad_out.dim();
        let k = self.kernel();
        let p = self.padding;
        let mut gx = Array3::<f64>::zeros((cin, h, w));
        let mut gw = Array4::<f64>::zeros(self.weight.dim());
        let mut gb = Array1::<f64>::zeros(cout);
        for o in 0..cout {
            gb[o] = grad_out.index_axis(ndarray::Axis(0), o).sum();
            for i in 0..cin {
                for ky in 0..k {
                    let (y0, y1) = Self::valid_range(oh, h, ky, p);
                    for kx in 0..k {
                        let (x0, x1) = Self::valid_range(ow, w, kx, p);
                        let wv = self.weight[[o, i, ky, kx]] as f64;
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy + ky - p;
                            for ox in x0..x1 {
                                let ix = ox + kx - p;
                                let g = grad_out[[o, oy, ox]];
                                acc += g * x[[i, iy, ix]];
                                gx[[i, iy, ix]] += g * wv;
                            }
                        }
                        gw[[o, i, ky, kx]] = acc;
                    }
                }
            }
        }
        ConvGrads {
            input: gx,
            weight: gw,
            bias: gb,
        }
    }
}

pub fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// 2×2 window, stride 2, floor on odd sizes.
pub fn max_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    Array3::from_shape_fn((c, oh, ow), |(ch, y, xx)| {
        let (y0, x0) = (2 * y, 2 * xx);
        x[[ch, y0, x0]]
            .max(x[[ch, y0, x0 + 1]])
            .max(x[[ch, y0 + 1, x0]])
            .max(x[[ch, y0 + 1, x0 + 1]])
    })
}

/// Routes each pooled gradient to the first maximal input in its window.
pub fn max_pool2_backward(x: &Array3<f64>, grad_out: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut gx = Array3::zeros((c, h, w));
    let (_, oh, ow) = grad_out.dim();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let (y0, x0) = (2 * y, 2 * xx);
                let mut best = (y0, x0);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    if x[[ch, y0 + dy, x0 + dx]] > x[[ch, best.0, best.1]] {
                        best = (y0 + dy, x0 + dx);
                    }
                }
                gx[[ch, best.0, best.1]] += grad_out[[ch, y, xx]];
            }
        }
    }
    gx
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// (out, in)
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    pub fn init(rng: &mut impl Rng, inputs: usize, outputs: usize) -> Self {
        let bound = (6.0 / inputs as f64).sqrt() as f32;
        Linear {
            weight: Array2::from_shape_simple_fn((outputs, inputs), || rng.random_range(-bound..=bound)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.weight.dim().1, "linear input length");
        self.weight
            .outer_iter()
            .zip(self.bias.iter())
            .map(|(row, b)| {
                row.iter().zip(x).fold(*b as f64, |acc, (w, v)| acc + *w as f64 * v)
            })
            .collect()
    }

    /// Returns (grad input, grad weight, grad bias).
    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> (Vec<f64>, Array2<f64>, Array1<f64>) {
        let (out, inp) = self.weight.dim();
        let mut gx = vec![0.0; inp];
        let mut gw = Array2::zeros((out, inp));
        for o in 0..out {
            let g = grad_out[o];
            if g == 0.0 {
                continue;
            }
            for i in 0..inp {
                gw[[o, i]] = g * x[i];
                gx[i] += g * self.weight[[o, i]] as f64;
            }
        }
        (gx, gw, Array1::from(grad_out.to_vec()))
    }
}

/// Global average over each channel's spatial plane.
pub fn global_avg_pool(x: &Array3<f64>) -> Vec<f64> {
    let (_, h, w) = x.dim();
    let n = (h * w) as f64;
    x.outer_iter().map(|plane| plane.sum() / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(c: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (cin, h, w) = x.dim();
        let (oh, ow) = c.output_size(h, w);
        let k = c.kernel() as isize;
        let p = c.padding as isize;
        Array3::from_shape_fn((c.out_channels(), oh, ow), |(o, y, xx)| {
            let mut s = c.bias[o] as f64;
            for i in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = y as isize + ky - p;
                        let ix = xx as isize + kx - p;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            s += c.weight[[o, i, ky as usize, kx as usize]] as f64
                                * x[[i, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_naive_with_and_without_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, p) in [(2, 0), (3, 1), (1, 0), (3, 0)] {
            let mut c = Conv2d::init(&mut rng, 2, 3, k, p);
            c.bias = Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0));
            let x = Array3::from_shape_simple_fn((2, 7, 6), || rng.random_range(-1.0..1.0));
            let a = c.forward(&x);
            let b = naive_conv(&c, &x);
            assert_eq!(a.dim(), b.dim());
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = Conv2d::init(&mut rng, 2, 2, 3, 1);
        let x = Array3::from_shape_simple_fn((2, 5, 4), || rng.random_range(-1.0..1.0));
        let g_out = Array3::from_shape_simple_fn((2, 5, 4), || rng.random_range(-1.0..1.0));
        let loss = |x: &Array3<f64>| (c.forward(x) * &g_out).sum();
        let grads = c.backward(&x, &g_out);
        let eps = 1e-6;
        for idx in [(0, 0, 0), (1, 2, 3), (0, 4, 1)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!((fd - grads.input[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_floors_odd_sizes() {
        let x = Array3::from_shape_fn((1, 5, 5), |(_, y, x)| (y * 5 + x) as f64);
        let p = max_pool2(&x);
        assert_eq!(p.dim(), (1, 2, 2));
        assert_eq!(p[[0, 0, 0]], 6.0);
        assert_eq!(p[[0, 1, 1]], 18.0);
        let g = max_pool2_backward(&x, &Array3::ones((1, 2, 2)));
        assert_eq!(g.sum(), 4.0);
        assert_eq!(g[[0, 1, 1]], 1.0);
    }
}
