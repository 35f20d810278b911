//! Bilinear resizing between the working resolution of a model and the
//! resolution of the user's image.

use image::imageops::{resize, FilterType};
use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

pub fn resize_rgb(img: ArrayView3<'_, f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, ih, iw) = img.dim();
    if (ih, iw) == (h, w) {
        return img.to_owned();
    }
    assert_eq!(c, 3, "expected an RGB image");
    let buf = ImageBuffer::<Rgb<f32>, _>::from_fn(iw as u32, ih as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|ch| img[[ch, y, x]] as f32))
    });
    let out = resize(&buf, w as u32, h as u32, FilterType::Triangle);
    Array3::from_shape_fn((3, h, w), |(ch, y, x)| out.get_pixel(x as u32, y as u32)[ch].clamp(0.0, 1.0) as f64)
}

pub fn resize_soft(mask: ArrayView2<'_, f64>, h: usize, w: usize) -> Array2<f64> {
    let (ih, iw) = mask.dim();
    if (ih, iw) == (h, w) {
        return mask.to_owned();
    }
    let buf = ImageBuffer::<Luma<f32>, _>::from_fn(iw as u32, ih as u32, |x, y| Luma([mask[[y as usize, x as usize]] as f32]));
    let out = resize(&buf, w as u32, h as u32, FilterType::Triangle);
    Array2::from_shape_fn((h, w), |(y, x)| out.get_pixel(x as u32, y as u32)[0] as f64)
}

/// A pixel of the result is set when any overlapping source pixel is set.
pub fn resize_mask(mask: ArrayView2<'_, bool>, h: usize, w: usize) -> Array2<bool> {
    let (ih, iw) = mask.dim();
    if (ih, iw) == (h, w) {
        return mask.to_owned();
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let y0 = y * ih / h;
        let y1 = ((y + 1) * ih).div_ceil(h).max(y0 + 1);
        let x0 = x * iw / w;
        let x1 = ((x + 1) * iw).div_ceil(w).max(x0 + 1);
        (y0..y1.min(ih)).any(|yy| (x0..x1.min(iw)).any(|xx| mask[[yy, xx]]))
    })
}
