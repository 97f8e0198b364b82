//! Grayscale rasters and the pixel operations the pipeline needs.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Row-major single-channel image, nominal intensity range `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width, "pixel count mismatch");
        Image { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel coordinates where pixel `(i, j)`
    /// has its center at `(i + 0.5, j + 0.5)`. Outside the frame reads `0`.
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = (fx - x0) as f32;
        let ty = (fy - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let px = |xx: i64, yy: i64| -> f32 {
            if xx < 0 || yy < 0 || xx >= self.width as i64 || yy >= self.height as i64 {
                0.0
            } else {
                self.data[yy as usize * self.width + xx as usize]
            }
        };
        let top = px(x0, y0) * (1.0 - tx) + px(x0 + 1, y0) * tx;
        let bot = px(x0, y0 + 1) * (1.0 - tx) + px(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }

    /// Bilinear sample with edge clamping instead of zero fill.
    pub fn sample_clamped(&self, x: f64, y: f64) -> f32 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = (fx - x0 as f64) as f32;
        let ty = (fy - y0 as f64) as f32;
        let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
        let bot = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
        top * (1.0 - ty) + bot * ty
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop outside image");
        Image::from_fn(h, w, |x, y| self.get(x0 + x, y0 + y))
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, |x, y| self.get(self.width - 1 - x, y))
    }
}

/// Resamples to `(h, w)`. Area averaging when shrinking an axis by an integer
/// factor, bilinear otherwise. Same size returns a copy.
pub fn resize(img: &Image, h: usize, w: usize) -> Image {
    if (h, w) == (img.height, img.width) {
        return img.clone();
    }
    if img.height % h == 0 && img.width % w == 0 {
        let (fy, fx) = (img.height / h, img.width / w);
        let norm = 1.0 / (fx * fy) as f32;
        let mut out = Image::filled(h, w, 0.0);
        for y in 0..img.height {
            let row = &img.data[y * img.width..(y + 1) * img.width];
            let orow = &mut out.data[(y / fy) * w..(y / fy + 1) * w];
            for (x, &v) in row.iter().enumerate() {
                orow[x / fx] += v;
            }
        }
        out.data.iter_mut().for_each(|v| *v *= norm);
        return out;
    }
    let sx = img.width as f64 / w as f64;
    let sy = img.height as f64 / h as f64;
    if sx > 1.0 || sy > 1.0 {
        // Non-integer shrink: supersample bilinear taps over each output cell.
        let kx = sx.ceil().max(1.0) as usize;
        let ky = sy.ceil().max(1.0) as usize;
        return Image::from_fn(h, w, |x, y| {
            let mut acc = 0.0;
            for j in 0..ky {
                for i in 0..kx {
                    let px = (x as f64 + (i as f64 + 0.5) / kx as f64) * sx;
                    let py = (y as f64 + (j as f64 + 0.5) / ky as f64) * sy;
                    acc += img.sample_clamped(px, py);
                }
            }
            acc / (kx * ky) as f32
        });
    }
    Image::from_fn(h, w, |x, y| img.sample_clamped((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy))
}

/// Rotates content by `degrees` in image coordinates (x right, y down) about
/// the image center. Positive turns content clockwise on screen. Bilinear,
/// zero fill; `0` is an exact copy.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = img.width as f64 / 2.0;
    let cy = img.height as f64 / 2.0;
    Image::from_fn(img.height, img.width, |x, y| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        // Inverse map: R(-φ) applied to the output position.
        let sx = c * dx + s * dy + cx;
        let sy = -s * dx + c * dy + cy;
        img.sample(sx, sy)
    })
}

/// Applies the forward map of [`rotate`] to a point.
pub fn rotate_point(p: (f64, f64), degrees: f64, width: usize, height: usize) -> (f64, f64) {
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = width as f64 / 2.0;
    let cy = height as f64 / 2.0;
    let (dx, dy) = (p.0 - cx, p.1 - cy);
    (c * dx - s * dy + cx, s * dx + c * dy + cy)
}

/// Median filter with a `k × k` window, edges replicated. `k` must be odd.
pub fn median_filter(img: &Image, k: usize) -> Image {
    assert!(k % 2 == 1, "median kernel must be odd");
    if k == 1 {
        return img.clone();
    }
    let r = (k / 2) as i64;
    let mut window = Vec::with_capacity(k * k);
    let mut out = Image::filled(img.height, img.width, 0.0);
    for y in 0..img.height as i64 {
        for x in 0..img.width as i64 {
            window.clear();
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, img.height as i64 - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, img.width as i64 - 1) as usize;
                    window.push(img.get(xx, yy));
                }
            }
            let mid = window.len() / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
            out.set(x as usize, y as usize, *m);
        }
    }
    out
}

/// Percentile with linear interpolation at rank `p/100 · (n − 1)` of the
/// sorted values.
pub fn percentile(sorted: &[f32], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let t = rank - lo as f64;
    sorted[lo] as f64 * (1.0 - t) + sorted[hi] as f64 * t
}

/// Maps the `(low, high)` percentile window onto `[0, 1]` with clipping.
/// A degenerate window yields a constant `0.5` image.
pub fn percentile_window(img: &Image, low: f64, high: f64) -> Image {
    let mut sorted = img.data.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = percentile(&sorted, low);
    let hi = percentile(&sorted, high);
    if !(hi > lo) {
        return img.map(|_| 0.5);
    }
    let span = hi - lo;
    img.map(|v| ((v as f64 - lo) / span).clamp(0.0, 1.0) as f32)
}

/// Shape header stored next to raw rasters as `<path>.json`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawHeader {
    pub height: usize,
    pub width: usize,
    /// 8 or 16; samples are little-endian unsigned integers.
    pub bits: u8,
}

fn raw_sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Loads an 8/16-bit grayscale PNG, or a `.raw` file with its JSON sidecar.
pub fn load_image(path: &Path) -> Result<Image> {
    let is_raw = path.extension().map(|e| e.eq_ignore_ascii_case("raw")).unwrap_or(false);
    if is_raw {
        return load_raw(path);
    }
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => CoreError::io(path, io),
        other => CoreError::Integrity(format!("{}: {other}", path.display())),
    })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let data: Vec<f32> = match dynimg {
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        other => other.into_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
    };
    Ok(Image::from_vec(h, w, data))
}

fn load_raw(path: &Path) -> Result<Image> {
    let side = raw_sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| CoreError::io(&side, e))?;
    let hdr: RawHeader = serde_json::from_str(&text).map_err(|e| CoreError::Integrity(format!("{}: {e}", side.display())))?;
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let n = hdr.height * hdr.width;
    let data: Vec<f32> = match hdr.bits {
        8 if bytes.len() == n => bytes.iter().map(|&v| v as f32 / 255.0).collect(),
        16 if bytes.len() == 2 * n => bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as f32 / 65535.0).collect(),
        8 | 16 => return Err(CoreError::Integrity(format!("{}: size does not match sidecar shape", path.display()))),
        b => return Err(CoreError::Integrity(format!("{}: unsupported bit depth {b}", side.display()))),
    };
    Ok(Image::from_vec(hdr.height, hdr.width, data))
}

fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes a 16-bit grayscale PNG (or raw + sidecar for a `.raw` path).
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    let is_raw = path.extension().map(|e| e.eq_ignore_ascii_case("raw")).unwrap_or(false);
    if is_raw {
        let bytes: Vec<u8> = img.data.iter().flat_map(|&v| quantize16(v).to_le_bytes()).collect();
        fs::write(path, bytes).map_err(|e| CoreError::io(path, e))?;
        let hdr = RawHeader { height: img.height, width: img.width, bits: 16 };
        let side = raw_sidecar(path);
        fs::write(&side, serde_json::to_vec(&hdr).unwrap()).map_err(|e| CoreError::io(&side, e))?;
        return Ok(());
    }
    let raw: Vec<u16> = img.data.iter().map(|&v| quantize16(v)).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(img.width as u32, img.height as u32, raw).expect("buffer sized from image");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => CoreError::io(path, io),
        other => CoreError::Integrity(format!("{}: {other}", path.display())),
    })
}
