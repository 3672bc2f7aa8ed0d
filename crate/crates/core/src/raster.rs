//! Float RGB rasters in height × width × channel layout, values in [0, 1].

use std::path::Path;

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    data: Array3<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize) -> Self {
        Raster {
            data: Array3::zeros((height, width, 3)),
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Raster {
            data: Array3::from_elem((height, width, 3), value),
        }
    }

    pub fn from_array(data: Array3<f32>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::Shape {
                expected: "H×W×3".into(),
                actual: format!("{:?}", data.dim()),
            });
        }
        Ok(Raster { data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut r = Raster::new(height, width);
        for y in 0..height {
            for x in 0..width {
                r.set(x, y, f(x, y));
            }
        }
        r
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn array(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn array_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_array(self) -> Array3<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        [
            self.data[[y, x, 0]],
            self.data[[y, x, 1]],
            self.data[[y, x, 2]],
        ]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[[y, x, c]] = v;
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| *v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer + 0.5). Samples outside the raster clamp to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f32; 3] {
        let (h, w) = (self.height(), self.width());
        let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let mut out = [0f32; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let p00 = self.data[[y0, x0, c]] as f64;
            let p10 = self.data[[y0, x1, c]] as f64;
            let p01 = self.data[[y1, x0, c]] as f64;
            let p11 = self.data[[y1, x1, c]] as f64;
            let top = p00 + (p10 - p00) * tx;
            let bottom = p01 + (p11 - p01) * tx;
            *o = (top + (bottom - top) * ty) as f32;
        }
        out
    }

    /// Bilinear resize of the sub-rectangle `(x, y, w, h)` to `out_w × out_h`.
    pub fn resize_region(
        &self,
        region: (f64, f64, f64, f64),
        out_w: usize,
        out_h: usize,
    ) -> Raster {
        let (rx, ry, rw, rh) = region;
        let sx = rw / out_w as f64;
        let sy = rh / out_h as f64;
        Raster::from_fn(out_h, out_w, |x, y| {
            let src_x = rx + (x as f64 + 0.5) * sx;
            let src_y = ry + (y as f64 + 0.5) * sy;
            self.sample_bilinear(src_x, src_y)
        })
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Raster {
        if out_w == self.width() && out_h == self.height() {
            return self.clone();
        }
        self.resize_region(
            (0.0, 0.0, self.width() as f64, self.height() as f64),
            out_w,
            out_h,
        )
    }

    pub fn to_gray(&self) -> Array2<f32> {
        self.data
            .map_axis(Axis(2), |px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Raster::from_fn(h as usize, w as usize, |x, y| {
            let p = img.get_pixel(x as u32, y as u32).0;
            [
                p[0] as f32 / 255.0,
                p[1] as f32 / 255.0,
                p[2] as f32 / 255.0,
            ]
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = self.get(x as usize, y as usize);
            image::Rgb(p.map(to_u8))
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary pixel mask (true = selected), indexed `[y, x]`.
pub type PixelMask = Array2<bool>;

pub fn load_mask(path: impl AsRef<Path>) -> Result<PixelMask> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] != 0
    }))
}

pub fn save_gray_png(grid: &Array2<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = grid.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(grid[[y as usize, x as usize]])])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hits_pixel_centers_exactly() {
        let r = Raster::from_fn(4, 5, |x, y| [x as f32 * 0.1, y as f32 * 0.2, 0.5]);
        for y in 0..4 {
            for x in 0..5 {
                let s = r.sample_bilinear(x as f64 + 0.5, y as f64 + 0.5);
                assert_eq!(s, r.get(x, y));
            }
        }
        let mid = r.sample_bilinear(1.0, 0.5);
        assert!((mid[0] - 0.05).abs() < 1e-6);
    }

    #[test]
    fn identity_resize_is_exact() {
        let r = Raster::from_fn(6, 6, |x, y| [(x * y) as f32 / 36.0, 0.0, 1.0]);
        assert_eq!(r.resize(6, 6), r);
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let r = Raster::from_fn(3, 2, |x, y| [x as f32 / 2.0, y as f32 / 3.0, 1.0]);
        r.save_png(&p).unwrap();
        let back = Raster::load(&p).unwrap();
        assert_eq!(back.width(), 2);
        assert_eq!(back.height(), 3);
        for (a, b) in back.array().iter().zip(r.array().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
