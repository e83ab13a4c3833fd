//! User and simulated prompts. All coordinates are integer pixel positions on
//! the central slice of a window: `x` is the column, `y` the row.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box with inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        debug_assert!(x0 <= x1 && y0 <= y1);
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }

    /// Builds a box from continuous corner coordinates, rounding and
    /// clamping into a `height x width` image. Corners are re-ordered so the
    /// result always has sides of at least one pixel.
    pub fn from_f64_clamped(x0: f64, y0: f64, x1: f64, y1: f64, height: usize, width: usize) -> Self {
        let cx = |v: f64| v.round().clamp(0.0, (width - 1) as f64) as usize;
        let cy = |v: f64| v.round().clamp(0.0, (height - 1) as f64) as usize;
        let (a, b) = (cx(x0), cx(x1));
        let (c, d) = (cy(y0), cy(y1));
        BBox {
            x0: a.min(b),
            x1: a.max(b),
            y0: c.min(d),
            y1: c.max(d),
        }
    }

    /// Scales the box about its centre and shifts it by a fraction of its
    /// side lengths.
    pub fn perturbed(&self, scale: f64, shift: f64, height: usize, width: usize) -> Self {
        let (cx, cy) = self.center();
        let hw = self.width() as f64 * scale / 2.0;
        let hh = self.height() as f64 * scale / 2.0;
        let dx = shift * self.width() as f64;
        let dy = shift * self.height() as f64;
        // half-extent measured to pixel edges, bounds are inclusive pixel centres
        BBox::from_f64_clamped(
            cx + dx - hw + 0.5,
            cy + dy - hh + 0.5,
            cx + dx + hw - 0.5,
            cy + dy + hh - 0.5,
            height,
            width,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: usize,
    pub y: usize,
    /// Foreground (`true`) or background click.
    pub foreground: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prompt {
    Points(Vec<PointPrompt>),
    Box(BBox),
    /// Coarse mask for all three slices, `[slice, row, col]`, values in `[0, 1]`.
    Mask(Array3<f32>),
}

impl Prompt {
    pub fn point(x: usize, y: usize) -> Self {
        Prompt::Points(vec![PointPrompt { x, y, foreground: true }])
    }

    /// Checks coordinates against a `height x width` slice.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        match self {
            Prompt::Points(points) => {
                if points.is_empty() {
                    return Err(Error::InvalidPrompt("point prompt without points".into()));
                }
                for p in points {
                    if p.x >= width || p.y >= height {
                        return Err(Error::InvalidPrompt(format!(
                            "point ({}, {}) outside {width}x{height} slice",
                            p.x, p.y
                        )));
                    }
                }
            }
            Prompt::Box(b) => {
                if b.x0 > b.x1 || b.y0 > b.y1 {
                    return Err(Error::InvalidPrompt(format!("box {b:?} has inverted corners")));
                }
                if b.x1 >= width || b.y1 >= height {
                    return Err(Error::InvalidPrompt(format!(
                        "box {b:?} outside {width}x{height} slice"
                    )));
                }
            }
            Prompt::Mask(m) => {
                if m.dim() != (3, height, width) {
                    return Err(Error::InvalidPrompt(format!(
                        "mask prompt has shape {:?}, expected (3, {height}, {width})",
                        m.dim()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Maps the prompt from a `from` slice size to a `to` slice size.
    pub fn rescaled(&self, from: (usize, usize), to: (usize, usize)) -> Prompt {
        if from == to {
            return self.clone();
        }
        let sy = to.0 as f64 / from.0 as f64;
        let sx = to.1 as f64 / from.1 as f64;
        let map = |v: usize, s: f64, len: usize| (((v as f64 + 0.5) * s - 0.5).round().max(0.0) as usize).min(len - 1);
        match self {
            Prompt::Points(points) => Prompt::Points(
                points
                    .iter()
                    .map(|p| PointPrompt {
                        x: map(p.x, sx, to.1),
                        y: map(p.y, sy, to.0),
                        foreground: p.foreground,
                    })
                    .collect(),
            ),
            Prompt::Box(b) => Prompt::Box(BBox::from_f64_clamped(
                b.x0 as f64 * sx,
                b.y0 as f64 * sy,
                (b.x1 + 1) as f64 * sx - 1.0,
                (b.y1 + 1) as f64 * sy - 1.0,
                to.0,
                to.1,
            )),
            Prompt::Mask(m) => {
                let mut out = Array3::zeros((3, to.0, to.1));
                for i in 0..3 {
                    out.index_axis_mut(ndarray::Axis(0), i).assign(&crate::imgops::resize_bilinear(
                        m.index_axis(ndarray::Axis(0), i),
                        to.0,
                        to.1,
                    ));
                }
                Prompt::Mask(out)
            }
        }
    }
}
