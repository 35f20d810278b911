//! Mask post-processing and compositing of generated content into a source image.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Zip};

/// Largest feather radius; binomial weights for larger radii overflow `u64`.
pub const MAX_BLEND_RADIUS: usize = 15;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ComposeError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("blend radius {0} exceeds {MAX_BLEND_RADIUS}")]
    Radius(usize),
    #[error("invalid box {0:?}")]
    BBox([f64; 4]),
}

/// Morphological dilation by a `(2r+1) × (2r+1)` square.
pub fn dilate_mask(mask: ArrayView2<'_, bool>, radius: usize) -> Array2<bool> {
    if radius == 0 {
        return mask.to_owned();
    }
    let (h, w) = mask.dim();
    // separable: a square is the product of a row and a column segment
    let mut rows = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            rows[[y, x]] = (lo..=hi).any(|k| mask[[y, k]]);
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        for x in 0..w {
            out[[y, x]] = (lo..=hi).any(|k| rows[[k, x]]);
        }
    }
    out
}

fn binomial_row(radius: usize) -> Vec<u64> {
    let n = 2 * radius;
    let mut row = vec![1u64; n + 1];
    for k in 1..n {
        row[k] = row[k - 1] * (n - k + 1) as u64 / k as u64;
    }
    row
}

/// Binary mask smoothed by a separable binomial kernel of the given radius,
/// borders replicated. Values are exactly 0 wherever no mask pixel lies within
/// Chebyshev distance `radius`, and exactly 1 wherever the whole window is masked.
pub fn feather_mask(mask: ArrayView2<'_, bool>, radius: usize) -> Result<Array2<f64>, ComposeError> {
    if radius > MAX_BLEND_RADIUS {
        return Err(ComposeError::Radius(radius));
    }
    let (h, w) = mask.dim();
    let kernel = binomial_row(radius);
    let r = radius as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut horiz = Array2::<u64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            horiz[[y, x]] = kernel
                .iter()
                .enumerate()
                .filter(|&(k, _)| mask[[y, clamp(x as isize + k as isize - r, w)]])
                .map(|(_, &wt)| wt)
                .sum();
        }
    }
    let total = (1u64 << (2 * radius)) as f64 * (1u64 << (2 * radius)) as f64;
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let s: u64 = kernel
                .iter()
                .enumerate()
                .map(|(k, &wt)| wt * horiz[[clamp(y as isize + k as isize - r, h), x]])
                .sum();
            out[[y, x]] = s as f64 / total;
        }
    }
    Ok(out)
}

/// `soft·generated + (1 − soft)·original` with `soft` the feathered mask.
/// Images are `[C, H, W]`; the mask is `[H, W]`.
pub fn blend(
    original: ArrayView3<'_, f64>,
    generated: ArrayView3<'_, f64>,
    mask: ArrayView2<'_, bool>,
    radius: usize,
) -> Result<Array3<f64>, ComposeError> {
    if original.dim() != generated.dim() {
        return Err(ComposeError::Shape(format!(
            "original {:?} vs generated {:?}",
            original.dim(),
            generated.dim()
        )));
    }
    let (_, h, w) = original.dim();
    if mask.dim() != (h, w) {
        return Err(ComposeError::Shape(format!("mask {:?} vs image {:?}", mask.dim(), (h, w))));
    }
    let soft = feather_mask(mask, radius)?;
    let mut out = original.to_owned();
    for (mut plane, gen) in out.outer_iter_mut().zip(generated.outer_iter()) {
        Zip::from(&mut plane).and(&gen).and(&soft).for_each(|o, &g, &s| {
            if s == 1.0 {
                *o = g;
            } else if s > 0.0 {
                *o = s * g + (1.0 - s) * *o;
            }
        });
    }
    Ok(out)
}

/// Rasterises a normalised `[x0, y0, x1, y1]` box into an `h × w` mask. Any
/// pixel the box touches is set, so a valid box always covers at least one pixel.
pub fn rasterize_bbox(bbox: [f64; 4], h: usize, w: usize) -> Result<Array2<bool>, ComposeError> {
    let [x0, y0, x1, y1] = bbox;
    let valid = bbox.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) && x0 < x1 && y0 < y1;
    if !valid {
        return Err(ComposeError::BBox(bbox));
    }
    let span = |a: f64, b: f64, n: usize| {
        let lo = ((a * n as f64).floor() as usize).min(n - 1);
        let hi = ((b * n as f64).ceil() as usize).clamp(lo + 1, n);
        lo..hi
    };
    let (cols, rows) = (span(x0, x1, w), span(y0, y1, h));
    Ok(Array2::from_shape_fn((h, w), |(y, x)| rows.contains(&y) && cols.contains(&x)))
}
