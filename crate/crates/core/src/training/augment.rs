use rand::Rng;

use crate::config::AugmentParams;
use crate::raster::Raster;

/// One concrete augmentation, drawn from [`AugmentParams`] ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    /// Crop origin as a fraction of width/height.
    pub crop_x: f64,
    pub crop_y: f64,
    /// Kept fraction of each side.
    pub crop_keep: f64,
    pub angle_degrees: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        crop_x: 0.0,
        crop_y: 0.0,
        crop_keep: 1.0,
        angle_degrees: 0.0,
        brightness: 0.0,
        contrast: 1.0,
    };

    pub fn sample(params: &AugmentParams, rng: &mut impl Rng) -> Self {
        let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let cut = if params.crop_fraction > 0.0 {
            rng.random_range(0.0..=params.crop_fraction)
        } else {
            0.0
        };
        let (crop_x, crop_y) = if cut > 0.0 {
            (rng.random_range(0.0..=cut), rng.random_range(0.0..=cut))
        } else {
            (0.0, 0.0)
        };
        AugmentDraw {
            crop_x,
            crop_y,
            crop_keep: 1.0 - cut,
            angle_degrees: sym(rng, params.rotation_degrees),
            brightness: sym(rng, params.brightness_delta),
            contrast: 1.0 + sym(rng, params.contrast_delta),
        }
    }
}

/// Crop, rotate about the image center, resize to `out_size`, then adjust
/// brightness and contrast (about mid-gray) and clamp to [0, 1].
pub fn apply_draw(image: &Raster, draw: &AugmentDraw, out_size: usize) -> Raster {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let (cx, cy) = (w / 2.0, h / 2.0);
    let (sin, cos) = (-draw.angle_degrees.to_radians()).sin_cos();
    let photometric = |v: f32| {
        let v = (v as f64 - 0.5) * draw.contrast + 0.5 + draw.brightness;
        v.clamp(0.0, 1.0) as f32
    };
    Raster::from_fn(out_size, out_size, |u, v| {
        let px = (draw.crop_x + (u as f64 + 0.5) / out_size as f64 * draw.crop_keep) * w;
        let py = (draw.crop_y + (v as f64 + 0.5) / out_size as f64 * draw.crop_keep) * h;
        let (dx, dy) = (px - cx, py - cy);
        let sx = cx + cos * dx - sin * dy;
        let sy = cy + sin * dx + cos * dy;
        image.sample_bilinear(sx, sy).map(photometric)
    })
}

pub fn augment(image: &Raster, params: &AugmentParams, rng: &mut impl Rng) -> Raster {
    let draw = AugmentDraw::sample(params, rng);
    apply_draw(image, &draw, image.width().max(image.height()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn smooth(s: usize) -> Raster {
        Raster::from_fn(s, s, |x, y| {
            let (fx, fy) = (x as f32 / s as f32, y as f32 / s as f32);
            [0.5 + 0.4 * (3.0 * fx).sin() * fy, fx * fy, 0.3 + 0.2 * fx]
        })
    }

    #[test]
    fn zero_ranges_are_identity() {
        let img = smooth(24);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&img, &AugmentParams::identity(), &mut rng), img);
    }

    #[test]
    fn brightness_shift_on_constant() {
        let img = Raster::filled(8, 8, 0.5);
        let d = AugmentDraw {
            brightness: 0.1,
            ..AugmentDraw::IDENTITY
        };
        let out = apply_draw(&img, &d, 8);
        assert!(out.array().iter().all(|v| (*v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn rotation_matches_reference_warp() {
        let s = 48;
        let img = smooth(s);
        let d = AugmentDraw {
            angle_degrees: 10.0,
            ..AugmentDraw::IDENTITY
        };
        let out = apply_draw(&img, &d, s);
        // reference: rotate the continuous image function directly
        let theta = 10f64.to_radians();
        let c = s as f64 / 2.0;
        let mut checked = 0;
        for y in 12..36 {
            for x in 12..36 {
                let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
                let sx = c + theta.cos() * dx + theta.sin() * dy;
                let sy = c - theta.sin() * dx + theta.cos() * dy;
                let (ix, iy) = ((sx - 0.5).floor() as usize, (sy - 0.5).floor() as usize);
                let (tx, ty) = (sx - 0.5 - ix as f64, sy - 0.5 - iy as f64);
                for ch in 0..3 {
                    let g = |x: usize, y: usize| img.get(x, y)[ch] as f64;
                    let r = g(ix, iy) * (1.0 - tx) * (1.0 - ty)
                        + g(ix + 1, iy) * tx * (1.0 - ty)
                        + g(ix, iy + 1) * (1.0 - tx) * ty
                        + g(ix + 1, iy + 1) * tx * ty;
                    assert!((out.get(x, y)[ch] as f64 - r).abs() < 1e-3);
                }
                checked += 1;
            }
        }
        assert_eq!(checked, 24 * 24);
    }

    #[test]
    fn draws_stay_in_range_and_output_clamped() {
        let p = AugmentParams {
            crop_fraction: 0.2,
            rotation_degrees: 15.0,
            brightness_delta: 0.3,
            contrast_delta: 0.5,
            copies: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let d = AugmentDraw::sample(&p, &mut rng);
            assert!(d.crop_keep >= 0.8 && d.crop_x <= 1.0 - d.crop_keep + 1e-12);
            assert!(d.angle_degrees.abs() <= 15.0 && d.brightness.abs() <= 0.3);
            assert!((d.contrast - 1.0).abs() <= 0.5);
        }
        let out = augment(&smooth(16), &p, &mut rng);
        assert_eq!((out.width(), out.height()), (16, 16));
        assert!(out.array().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
