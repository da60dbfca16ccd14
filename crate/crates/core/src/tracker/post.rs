use crate::bbox::BBox;
use crate::error::{dim_err, Result};
use crate::image::CropWindow;
use crate::tensor::Tensor;

use super::TrackerConfig;

/// Symmetric Hann window of length `n` (a single sample is 1).
pub fn hanning(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Box in crop coordinates predicted at grid cell `(row, col)` from its
/// `(l, t, r, b)` offsets. Zero offsets give a zero-sized box.
pub fn decode_cell(cfg: &TrackerConfig, row: usize, col: usize, ltrb: [f64; 4]) -> BBox {
    let (cx, cy) = (cfg.cell_center(col), cfg.cell_center(row));
    let [l, t, r, b] = ltrb;
    BBox {
        cx: cx + (r - l) / 2.0,
        cy: cy + (b - t) / 2.0,
        w: l + r,
        h: t + b,
    }
}

/// Picks the best cell and converts its box to frame coordinates.
///
/// The cell score is `(1 - w) * sigmoid(cls) + w * hann`, the first maximum
/// in row-major order wins. The box center is taken as predicted, its size
/// is smoothed towards `prev`, and the result is clamped into the frame.
/// Returns the box and the raw logit of the chosen cell.
pub fn select_target(
    cls: &Tensor,
    reg: &Tensor,
    window: &CropWindow,
    prev: &BBox,
    cfg: &TrackerConfig,
    frame_size: (usize, usize),
) -> Result<(BBox, f64)> {
    let cs = cls.shape();
    if cs.len() != 3 || cs[2] != 1 || reg.shape() != [cs[0], cs[1], 4] {
        return Err(dim_err(
            "select_target",
            format!("cls {:?} and reg {:?} are not aligned", cls.shape(), reg.shape()),
        ));
    }
    let (h, w) = (cs[0], cs[1]);
    let (hy, hx) = (hanning(h), hanning(w));
    let wi = cfg.window_influence;
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let logit = cls.data()[y * w + x];
            let p = 1.0 / (1.0 + (-logit).exp());
            let s = (1.0 - wi) * p + wi * hy[y] * hx[x];
            if s > best.0 {
                best = (s, y, x);
            }
        }
    }
    let (_, row, col) = best;
    let o = (row * w + col) * 4;
    let ltrb = [reg.data()[o], reg.data()[o + 1], reg.data()[o + 2], reg.data()[o + 3]];
    let pred = window.box_to_frame(&decode_cell(cfg, row, col, ltrb));
    let lambda = cfg.smoothing;
    let smoothed = BBox {
        cx: pred.cx,
        cy: pred.cy,
        w: lambda * pred.w + (1.0 - lambda) * prev.w,
        h: lambda * pred.h + (1.0 - lambda) * prev.h,
    };
    let boxed = smoothed.clamp_to(frame_size.0 as f64, frame_size.1 as f64, cfg.min_box);
    Ok((boxed, cls.data()[row * w + col]))
}
