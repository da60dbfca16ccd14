//! RGB frames and the Siamese crop.

use std::path::Path;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "degenerate frame {width}x{height} with {} bytes",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = std::iter::repeat(rgb).take(width * height).flatten().collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = ::image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    /// Writes the frame; the encoding follows the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| Error::Input("image buffer size mismatch".into()))?;
        buf.save(path)?;
        Ok(())
    }

    pub fn channel_mean(&self) -> [f64; 3] {
        let mut sum = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height) as f64;
        sum.map(|s| s / n)
    }

    /// Bilinear sample at index-space coordinates (pixel centers at integers).
    /// Caller guarantees `0 <= x <= w-1` and `0 <= y <= h-1`.
    fn bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let mut out = [0.0; 3];
        let (p00, p01, p10, p11) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
            let bot = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }
}

/// Square window of the frame that a crop was resampled from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub out_size: usize,
}

impl CropWindow {
    pub fn centered(cx: f64, cy: f64, side: f64, out_size: usize) -> Self {
        Self {
            x0: cx - side / 2.0,
            y0: cy - side / 2.0,
            side,
            out_size,
        }
    }

    /// Frame pixels per crop pixel.
    pub fn scale(&self) -> f64 {
        self.side / self.out_size as f64
    }

    pub fn to_frame(&self, x: f64, y: f64) -> (f64, f64) {
        (self.x0 + x * self.scale(), self.y0 + y * self.scale())
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) / self.scale(), (y - self.y0) / self.scale())
    }

    /// Maps a frame box into crop coordinates.
    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.to_crop(b.cx, b.cy);
        let s = self.scale();
        BBox {
            cx,
            cy,
            w: b.w / s,
            h: b.h / s,
        }
    }

    pub fn box_to_frame(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.to_frame(b.cx, b.cy);
        let s = self.scale();
        BBox {
            cx,
            cy,
            w: b.w * s,
            h: b.h * s,
        }
    }

    /// Index-space source coordinate sampled by crop pixel `u`.
    fn source(&self, origin: f64, u: usize) -> f64 {
        origin + (u as f64 + 0.5) * self.scale() - 0.5
    }
}

/// A resampled square patch.
#[derive(Debug, Clone)]
pub struct Crop {
    /// `[out, out, 3]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub window: CropWindow,
    /// Number of output pixels that fell outside the frame and were filled
    /// with the frame's channel mean.
    pub fill_pixels: usize,
}

/// Side of the context square around a target: `sqrt((w + p)(h + p))` with
/// `p = (w + h) / 2`.
pub fn context_side(bbox: &BBox) -> f64 {
    let p = (bbox.w + bbox.h) / 2.0;
    ((bbox.w + p) * (bbox.h + p)).sqrt()
}

/// Crops a square of side `context_factor * context_side(bbox)` centered on
/// the box and bilinearly resizes it to `out_size`.
pub fn crop_patch(frame: &Image, bbox: &BBox, context_factor: f64, out_size: usize) -> Result<Crop> {
    bbox.validate()?;
    if out_size == 0 || !(context_factor > 0.0) {
        return Err(Error::Input(format!(
            "invalid crop request: out_size {out_size}, context {context_factor}"
        )));
    }
    let side = context_factor * context_side(bbox);
    let window = CropWindow::centered(bbox.cx, bbox.cy, side, out_size);
    crop_window(frame, window)
}

pub fn crop_window(frame: &Image, window: CropWindow) -> Result<Crop> {
    let out = window.out_size;
    let mean = frame.channel_mean();
    let (wmax, hmax) = ((frame.width - 1) as f64, (frame.height - 1) as f64);
    let xs: Vec<f64> = (0..out).map(|u| window.source(window.x0, u)).collect();
    let ys: Vec<f64> = (0..out).map(|v| window.source(window.y0, v)).collect();
    let mut data = Vec::with_capacity(out * out * 3);
    let mut fill = 0;
    for &sy in &ys {
        for &sx in &xs {
            let inside = (0.0..=wmax).contains(&sx) && (0.0..=hmax).contains(&sy);
            let px = if inside {
                frame.bilinear(sx, sy)
            } else {
                fill += 1;
                mean
            };
            data.extend(px.iter().map(|v| v / 255.0));
        }
    }
    Ok(Crop {
        pixels: Tensor::new(&[out, out, 3], data)?,
        window,
        fill_pixels: fill,
    })
}
