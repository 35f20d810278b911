//! PNG reading and writing for `[C, H, W]` float images and binary masks.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("expected 3 channels, got {0}")]
    Channels(usize),
    #[error("non-finite pixel value")]
    NonFinite,
}

fn codec(path: &Path) -> impl FnOnce(image::ImageError) -> ImageError + '_ {
    move |source| ImageError::Codec {
        path: path.display().to_string(),
        source,
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f64 {
    f64::from(v) / 255.0
}

pub fn rgb_from_image(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        from_u8(img.get_pixel(x as u32, y as u32)[c])
    })
}

pub fn rgb_to_image(data: ArrayView3<'_, f64>) -> Result<RgbImage, ImageError> {
    let (c, h, w) = data.dim();
    if c != 3 {
        return Err(ImageError::Channels(c));
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(ImageError::NonFinite);
    }
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(data[[0, y, x]]), to_u8(data[[1, y, x]]), to_u8(data[[2, y, x]])])
    }))
}

/// Loads any supported image as RGB with values in `[0, 1]`.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Array3<f64>, ImageError> {
    let path = path.as_ref();
    let img = image::open(path).map_err(codec(path))?.to_rgb8();
    Ok(rgb_from_image(&img))
}

pub fn save_rgb(path: impl AsRef<Path>, data: ArrayView3<'_, f64>) -> Result<(), ImageError> {
    let path = path.as_ref();
    rgb_to_image(data)?.save(path).map_err(codec(path))
}

pub fn encode_png(data: ArrayView3<'_, f64>) -> Result<Vec<u8>, ImageError> {
    let img = rgb_to_image(data)?;
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(codec(Path::new("<memory>")))?;
    Ok(buf.into_inner())
}

/// Loads a mask; any gray level above 127 counts as set.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Array2<bool>, ImageError> {
    let path = path.as_ref();
    let img = image::open(path).map_err(codec(path))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] > 127
    }))
}

pub fn save_mask(path: impl AsRef<Path>, mask: ArrayView2<'_, bool>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let (h, w) = mask.dim();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    img.save(path).map_err(codec(path))
}

/// Image dimensions `(height, width)` without decoding pixel data.
pub fn dimensions(path: impl AsRef<Path>) -> Result<(usize, usize), ImageError> {
    let path = path.as_ref();
    let (w, h) = image::image_dimensions(path).map_err(codec(path))?;
    Ok((h as usize, w as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((3, 5, 7), |(c, y, x)| from_u8(((c * 50 + y * 7 + x * 3) % 256) as u8));
        let path = dir.path().join("a.png");
        save_rgb(&path, img.view()).unwrap();
        assert_eq!(load_rgb(&path).unwrap(), img);
        assert_eq!(dimensions(&path).unwrap(), (5, 7));

        let mask = Array2::from_shape_fn((5, 7), |(y, x)| (x + y) % 3 == 0);
        let mpath = dir.path().join("m.png");
        save_mask(&mpath, mask.view()).unwrap();
        assert_eq!(load_mask(&mpath).unwrap(), mask);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        assert!(matches!(rgb_to_image(Array3::zeros((1, 2, 2)).view()), Err(ImageError::Channels(1))));
    }
}
