//! Deterministic PNG rendering without text dependencies: grayscale
//! slice overlays with mask contours, and training-curve charts drawn
//! with integer Bresenham lines. Identical inputs produce identical
//! bytes, so plots are safe to diff in CI.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::trainer::LogEvent;

/// Ground-truth contours.
pub const GT_COLOR: Rgb<u8> = Rgb([40, 220, 40]);
/// Prediction contours.
pub const PRED_COLOR: Rgb<u8> = Rgb([230, 60, 60]);
const CURVE_COLORS: [Rgb<u8>; 4] = [
    Rgb([0, 0, 0]),      // total
    Rgb([60, 100, 220]), // segmentation
    Rgb([220, 150, 40]), // compactness
    Rgb([150, 60, 200]), // divergence
];
const DICE_COLOR: Rgb<u8> = Rgb([40, 160, 40]);

fn save(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Min–max normalize to 0..=255; constant slices map to mid-gray.
fn to_gray(slice: ArrayView2<f32>) -> Array2<u8> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in slice.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    slice.map(|&v| {
        if span > 0.0 {
            (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            128
        }
    })
}

/// Foreground pixels with at least one 4-neighbor outside the mask
/// (image border counts as outside).
fn contour(mask: ArrayView2<'_, u8>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if mask[(y, x)] == 0 {
            return false;
        }
        let neighbors = [
            (y.wrapping_sub(1), x),
            (y + 1, x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
        ];
        neighbors.iter().any(|&(ny, nx)| ny >= h || nx >= w || mask[(ny, nx)] == 0)
    })
}

/// Render one slice with ground-truth (green) and prediction (red)
/// contours; overlapping contour pixels come out yellow. Small slices
/// are integer-upscaled to at least 256 px.
pub fn overlay_png(
    path: &Path,
    slice: ArrayView2<'_, f32>,
    gt: ArrayView2<'_, u8>,
    pred: ArrayView2<'_, u8>,
) -> Result<()> {
    let (h, w) = slice.dim();
    if gt.dim() != (h, w) || pred.dim() != (h, w) {
        return Err(Error::Data(format!(
            "overlay shapes differ: image {h}x{w}, gt {:?}, pred {:?}",
            gt.dim(),
            pred.dim()
        )));
    }
    let gray = to_gray(slice);
    let gt_c = contour(gt);
    let pred_c = contour(pred);
    let k = (256 / h.max(w).max(1)).max(1);
    let mut img = RgbImage::new((w * k) as u32, (h * k) as u32);
    for y in 0..h {
        for x in 0..w {
            let color = match (gt_c[(y, x)], pred_c[(y, x)]) {
                (true, true) => Rgb([
                    ((GT_COLOR.0[0] as u16 + PRED_COLOR.0[0] as u16) / 2) as u8,
                    ((GT_COLOR.0[1] as u16 + PRED_COLOR.0[1] as u16) / 2) as u8,
                    ((GT_COLOR.0[2] as u16 + PRED_COLOR.0[2] as u16) / 2) as u8,
                ]),
                (true, false) => GT_COLOR,
                (false, true) => PRED_COLOR,
                (false, false) => {
                    let g = gray[(y, x)];
                    Rgb([g, g, g])
                }
            };
            for dy in 0..k {
                for dx in 0..k {
                    img.put_pixel((x * k + dx) as u32, (y * k + dy) as u32, color);
                }
            }
        }
    }
    save(path, &img)
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

struct Panel {
    x0: i64,
    y0: i64,
    w: i64,
    h: i64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Panel {
    fn map(&self, x: f64, y: f64) -> (i64, i64) {
        let px = self.x0 + ((x / self.xmax) * (self.w - 1) as f64).round() as i64;
        let frac = ((y - self.ymin) / (self.ymax - self.ymin)).clamp(0.0, 1.0);
        let py = self.y0 + self.h - 1 - (frac * (self.h - 1) as f64).round() as i64;
        (px, py)
    }

    fn frame(&self, img: &mut RgbImage) {
        let c = Rgb([120, 120, 120]);
        draw_line(img, (self.x0, self.y0), (self.x0 + self.w - 1, self.y0), c);
        draw_line(
            img,
            (self.x0, self.y0 + self.h - 1),
            (self.x0 + self.w - 1, self.y0 + self.h - 1),
            c,
        );
        draw_line(img, (self.x0, self.y0), (self.x0, self.y0 + self.h - 1), c);
        draw_line(
            img,
            (self.x0 + self.w - 1, self.y0),
            (self.x0 + self.w - 1, self.y0 + self.h - 1),
            c,
        );
    }

    fn polyline(&self, img: &mut RgbImage, pts: &[(f64, f64)], color: Rgb<u8>) {
        for pair in pts.windows(2) {
            draw_line(img, self.map(pair[0].0, pair[0].1), self.map(pair[1].0, pair[1].1), color);
        }
    }
}

/// Chart a training log: top panel shows loss components over iterations
/// (black total, blue segmentation, orange compactness, purple
/// divergence; legend swatches top-left in that order), bottom panel the
/// validation mean Dice in green on a fixed 0–100 axis.
pub fn curves_png(path: &Path, events: &[LogEvent]) -> Result<()> {
    let mut losses: Vec<(f64, [f64; 4])> = Vec::new();
    let mut vals: Vec<(f64, f64)> = Vec::new();
    for e in events {
        match e {
            LogEvent::Loss { iteration, values } => losses.push((
                *iteration as f64,
                [values.l_total, values.l_seg, values.l_comp, values.l_div],
            )),
            LogEvent::Val { iteration, mean_dice, .. } => {
                vals.push((*iteration as f64, *mean_dice));
            }
            _ => {}
        }
    }
    if losses.is_empty() {
        return Err(Error::Data("training log holds no loss entries to plot".into()));
    }
    let xmax = losses.last().unwrap().0.max(1.0);
    let ymax = losses
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max)
        .max(1e-9);

    let (width, height) = (800u32, 600u32);
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let top =
        Panel { x0: 40, y0: 20, w: 740, h: 330, xmax, ymin: 0.0, ymax: ymax * 1.05 };
    let bottom = Panel { x0: 40, y0: 390, w: 740, h: 190, xmax, ymin: 0.0, ymax: 100.0 };
    top.frame(&mut img);
    bottom.frame(&mut img);

    for (ci, color) in CURVE_COLORS.iter().enumerate() {
        let pts: Vec<(f64, f64)> = losses.iter().map(|(x, v)| (*x, v[ci])).collect();
        top.polyline(&mut img, &pts, *color);
        // Legend swatch.
        for dx in 0..18 {
            for dy in 0..3 {
                img.put_pixel(50 + dx + 30 * ci as u32, 30 + dy, *color);
            }
        }
    }
    if !vals.is_empty() {
        bottom.polyline(&mut img, &vals, DICE_COLOR);
        for (x, y) in &vals {
            let (px, py) = bottom.map(*x, *y);
            for (dx, dy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (qx, qy) = (px + dx, py + dy);
                if qx >= 0 && qy >= 0 && (qx as u32) < width && (qy as u32) < height {
                    img.put_pixel(qx as u32, qy as u32, DICE_COLOR);
                }
            }
        }
    }
    save(path, &img)
}
