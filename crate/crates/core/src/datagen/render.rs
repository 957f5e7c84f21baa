use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::KeyedRng;

/// Subsamples per pixel along each axis.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Cross,
    Ring,
    Triangle,
    Stripes,
}

pub const SHAPE_KINDS: [ShapeKind; 6] = [
    ShapeKind::Disk,
    ShapeKind::Square,
    ShapeKind::Cross,
    ShapeKind::Ring,
    ShapeKind::Triangle,
    ShapeKind::Stripes,
];

/// A class of the corpus: contiguous id plus the shape it renders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeClass {
    pub id: usize,
    pub kind: ShapeKind,
}

/// The default `C` classes, ids `0..C`, one per shape kind.
pub fn default_classes(count: usize) -> Result<Vec<ShapeClass>> {
    if count == 0 || count > SHAPE_KINDS.len() {
        return Err(Error::InvalidArgument(format!(
            "class count must be in 1..={}, got {count}",
            SHAPE_KINDS.len()
        )));
    }
    Ok(SHAPE_KINDS[..count]
        .iter()
        .enumerate()
        .map(|(id, &kind)| ShapeClass { id, kind })
        .collect())
}

/// Rendering parameters for one image. Offsets are in pixels from the
/// image centre; `size` is the radius (or half-extent) of the shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub offset_x: f64,
    pub offset_y: f64,
    pub size: f64,
    pub intensity: f64,
    pub noise: f64,
}

impl ShapeParams {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidArgument(format!("{what} {v} out of range")));
        if !(self.offset_x.abs() <= width as f64 / 2.0) {
            return bad("offset_x", self.offset_x);
        }
        if !(self.offset_y.abs() <= height as f64 / 2.0) {
            return bad("offset_y", self.offset_y);
        }
        if !(self.size > 0.0 && self.size <= height.max(width) as f64) {
            return bad("size", self.size);
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return bad("intensity", self.intensity);
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise", self.noise);
        }
        Ok(())
    }
}

fn inside(kind: ShapeKind, dx: f64, dy: f64, s: f64) -> bool {
    match kind {
        ShapeKind::Disk => dx * dx + dy * dy <= s * s,
        ShapeKind::Square => dx.abs() <= 0.85 * s && dy.abs() <= 0.85 * s,
        ShapeKind::Cross => {
            let arm = s / 3.0;
            (dx.abs() <= s && dy.abs() <= arm) || (dy.abs() <= s && dx.abs() <= arm)
        }
        ShapeKind::Ring => {
            let r2 = dx * dx + dy * dy;
            r2 <= s * s && r2 >= (0.55 * s) * (0.55 * s)
        }
        ShapeKind::Triangle => dy >= -s && dy <= 0.7 * s && dx.abs() <= (dy + s) / 1.7,
        ShapeKind::Stripes => {
            dx.abs() <= s && dy.abs() <= s && (((dx + s) / (0.4 * s)).floor() as i64) % 2 == 0
        }
    }
}

/// Anti-aliased rendering (4×4 supersampling) of one shape on a black
/// background, plus i.i.d. Gaussian pixel noise, clamped to `[0, 1]`.
///
/// Pixel `(row, col)` covers `[col, col+1) × [row, row+1)`; the shape centre
/// sits at `(width/2 + offset_x, height/2 + offset_y)`.
pub fn render_shape(
    class: &ShapeClass,
    params: &ShapeParams,
    height: usize,
    width: usize,
    rng: &mut KeyedRng,
) -> Result<Vec<f32>> {
    params.validate(height, width)?;
    let cx = width as f64 / 2.0 + params.offset_x;
    let cy = height as f64 / 2.0 + params.offset_y;
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut out = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = col as f64 + (sx as f64 + 0.5) * step;
                    let y = row as f64 + (sy as f64 + 0.5) * step;
                    if inside(class.kind, x - cx, y - cy, params.size) {
                        hits += 1;
                    }
                }
            }
            let coverage = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let noise = if params.noise > 0.0 { params.noise * rng.normal() } else { 0.0 };
            out.push((params.intensity * coverage + noise).clamp(0.0, 1.0) as f32);
        }
    }
    Ok(out)
}
