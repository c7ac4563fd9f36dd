use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// A crop in original-image coordinates and the feature grid it produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewGeometry {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl ViewGeometry {
    pub fn new(x: f64, y: f64, w: f64, h: f64, grid_h: usize, grid_w: usize) -> Result<Self> {
        let finite = [x, y, w, h].iter().all(|v| v.is_finite());
        if !finite || w <= 0.0 || h <= 0.0 || grid_h == 0 || grid_w == 0 {
            return Err(Error::Invalid(
                "view needs a finite positive crop and grid".into(),
            ));
        }
        Ok(Self {
            x,
            y,
            w,
            h,
            grid_h,
            grid_w,
        })
    }

    /// Original-image position of the center of feature cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x + (col as f64 + 0.5) * self.w / self.grid_w as f64,
            self.y + (row as f64 + 0.5) * self.h / self.grid_h as f64,
        )
    }

    fn nearest_cell(&self, px: f64, py: f64) -> (usize, usize) {
        (
            nearest_index((py - self.y) * self.grid_h as f64 / self.h, self.grid_h),
            nearest_index((px - self.x) * self.grid_w as f64 / self.w, self.grid_w),
        )
    }
}

/// Index whose center `k + 0.5` is nearest to `u`; exact midpoints go to the
/// smaller index.
fn nearest_index(u: f64, n: usize) -> usize {
    let k = u.ceil() - 1.0;
    k.clamp(0.0, (n - 1) as f64) as usize
}

/// Cell pairs `(view-1 index, view-2 index)`, both row-major, for every
/// view-1 cell whose center lies inside the crop intersection.
pub fn overlap_indices(g1: &ViewGeometry, g2: &ViewGeometry) -> Vec<(usize, usize)> {
    let (x0, x1) = (g1.x.max(g2.x), (g1.x + g1.w).min(g2.x + g2.w));
    let (y0, y1) = (g1.y.max(g2.y), (g1.y + g1.h).min(g2.y + g2.h));
    if x0 >= x1 || y0 >= y1 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for row in 0..g1.grid_h {
        for col in 0..g1.grid_w {
            let (cx, cy) = g1.cell_center(row, col);
            if (x0..=x1).contains(&cx) && (y0..=y1).contains(&cy) {
                let (r2, c2) = g2.nearest_cell(cx, cy);
                out.push((row * g1.grid_w + col, r2 * g2.grid_w + c2));
            }
        }
    }
    out
}

/// Aligned feature vectors of the overlapping cells of two views.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPairs {
    pub indices: Vec<(usize, usize)>,
    pub features: Vec<(Vec<f64>, Vec<f64>)>,
}

pub fn overlap_extract(
    g1: &ViewGeometry,
    g2: &ViewGeometry,
    z1: &DenseArray,
    z2: &DenseArray,
) -> Result<PixelPairs> {
    let (l1, h1, w1) = z1.dims3()?;
    let (l2, h2, w2) = z2.dims3()?;
    if (h1, w1) != (g1.grid_h, g1.grid_w) || (h2, w2) != (g2.grid_h, g2.grid_w) {
        return Err(Error::Shape(
            "feature maps do not match their view grids".into(),
        ));
    }
    if l1 != l2 {
        return Err(Error::Shape(format!("views have {l1} and {l2} channels")));
    }
    let indices = overlap_indices(g1, g2);
    let features = indices
        .iter()
        .map(|&(a, b)| (z1.pixel(a), z2.pixel(b)))
        .collect();
    Ok(PixelPairs { indices, features })
}
