//! Fixed-rate frame sampling from animated GIF clips.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use image::codecs::gif::{GifDecoder, GifEncoder, Repeat};
use image::{AnimationDecoder, Delay, Frame, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{to_u8, Raster};

/// Browsers show zero-delay GIF frames for 100 ms; we do the same.
const ZERO_DELAY_MS: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct ExtractedFrame {
    pub image: Raster,
    /// Index of the source frame shown at `timestamp`.
    pub source_frame: usize,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameProvenance {
    pub path: PathBuf,
    pub source: PathBuf,
    pub source_frame: usize,
    pub timestamp: f64,
}

#[derive(Debug, Clone)]
pub struct DecodedClip {
    pub frames: Vec<RgbaImage>,
    /// Display start of each frame in seconds.
    pub starts: Vec<f64>,
    pub duration: f64,
}

pub fn decode_gif(path: &Path) -> Result<DecodedClip> {
    let decode_err = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| decode_err(e.to_string()))?;
    let decoder = GifDecoder::new(BufReader::new(file)).map_err(|e| decode_err(e.to_string()))?;
    let mut frames = Vec::new();
    let mut starts = Vec::new();
    let mut t_ms = 0.0;
    for frame in decoder.into_frames() {
        let frame = frame.map_err(|e| decode_err(e.to_string()))?;
        let (num, den) = frame.delay().numer_denom_ms();
        let ms = if num == 0 { ZERO_DELAY_MS } else { num as f64 / den as f64 };
        starts.push(t_ms / 1000.0);
        t_ms += ms;
        frames.push(frame.into_buffer());
    }
    if frames.is_empty() {
        return Err(decode_err("clip contains no frames".into()));
    }
    Ok(DecodedClip {
        frames,
        starts,
        duration: t_ms / 1000.0,
    })
}

/// Frame indices shown at times `k / fps` for every `k / fps < duration`.
pub fn sample_times(starts: &[f64], duration: f64, fps: f64) -> Result<Vec<(f64, usize)>> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::Config(format!("fps must be positive, got {fps}")));
    }
    const EPS: f64 = 1e-9;
    let mut out = Vec::new();
    let mut idx = 0;
    for k in 0.. {
        let t = k as f64 / fps;
        if t >= duration - EPS {
            break;
        }
        while idx + 1 < starts.len() && starts[idx + 1] <= t + EPS {
            idx += 1;
        }
        out.push((t, idx));
    }
    Ok(out)
}

fn to_raster(img: &RgbaImage) -> Raster {
    Raster::from_fn(img.height() as usize, img.width() as usize, |x, y| {
        let p = img.get_pixel(x as u32, y as u32).0;
        [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0]
    })
}

pub fn extract_frames(path: &Path, fps: f64) -> Result<Vec<ExtractedFrame>> {
    let clip = decode_gif(path)?;
    Ok(sample_times(&clip.starts, clip.duration, fps)?
        .into_iter()
        .map(|(timestamp, i)| ExtractedFrame {
            image: to_raster(&clip.frames[i]),
            source_frame: i,
            timestamp,
        })
        .collect())
}

/// Writes `<stem>_<k>.png` per frame into `out_dir`.
pub fn save_frames(frames: &[ExtractedFrame], source: &Path, out_dir: &Path) -> Result<Vec<FrameProvenance>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = source.file_stem().and_then(|s| s.to_str()).unwrap_or("clip");
    frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let p = out_dir.join(format!("{stem}_{k:05}.png"));
            f.image.save_png(&p)?;
            Ok(FrameProvenance {
                path: p,
                source: source.to_path_buf(),
                source_frame: f.source_frame,
                timestamp: f.timestamp,
            })
        })
        .collect()
}

/// Encodes frames with per-frame delays in centiseconds.
pub fn write_gif(path: &Path, frames: &[(Raster, u32)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let img_err = |e: image::ImageError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut enc = GifEncoder::new(std::io::BufWriter::new(file));
    enc.set_repeat(Repeat::Infinite).map_err(img_err)?;
    for (r, cs) in frames {
        let buf = RgbaImage::from_fn(r.width() as u32, r.height() as u32, |x, y| {
            let [cr, cg, cb] = r.get(x as usize, y as usize);
            image::Rgba([to_u8(cr), to_u8(cg), to_u8(cb), 255])
        });
        let delay = Delay::from_numer_denom_ms(cs * 10, 1);
        enc.encode_frame(Frame::from_parts(buf, 0, 0, delay)).map_err(img_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(n: usize, cs: u32) -> Vec<(Raster, u32)> {
        (0..n).map(|i| (Raster::filled(4, 4, i as f32 / n as f32), cs)).collect()
    }

    #[test]
    fn native_rate_returns_every_frame() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.gif");
        write_gif(&p, &clip(6, 10)).unwrap();
        let frames = extract_frames(&p, 10.0).unwrap();
        let idx: Vec<usize> = frames.iter().map(|f| f.source_frame).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn count_matches_duration_times_rate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.gif");
        write_gif(&p, &clip(20, 5)).unwrap();
        let frames = extract_frames(&p, 4.0).unwrap();
        assert_eq!(frames.len(), 4);
        assert_eq!(frames.iter().map(|f| f.source_frame).collect::<Vec<_>>(), vec![0, 5, 10, 15]);
        let saved = save_frames(&frames, &p, &dir.path().join("out")).unwrap();
        assert!(saved[3].path.ends_with("c_00003.png"));
    }

    #[test]
    fn interval_lookup_with_uneven_delays() {
        let starts = [0.0, 0.3, 0.35, 1.0];
        let got = sample_times(&starts, 1.2, 5.0).unwrap();
        let idx: Vec<usize> = got.iter().map(|(_, i)| *i).collect();
        assert_eq!(idx, vec![0, 0, 2, 2, 2, 3]);
        assert!(sample_times(&starts, 1.2, 0.0).is_err());
    }

    #[test]
    fn undecodable_is_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.gif");
        fs::write(&p, b"not a gif").unwrap();
        assert!(matches!(extract_frames(&p, 1.0), Err(Error::Decode { .. })));
    }
}
