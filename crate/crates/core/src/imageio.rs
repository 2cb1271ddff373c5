//! Image decode/encode between files and `[0,1]` tensors.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageError, Rgb32FImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

fn map_image_error(path: &Path, err: ImageError) -> Error {
    match err {
        ImageError::IoError(e) => Error::io(path, e),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| map_image_error(path, e))
}

fn rgb32f_to_tensor(img: &Rgb32FImage) -> ImageTensor {
    let (w, h) = img.dimensions();
    ImageTensor::from_fn(3, h as usize, w as usize, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c]
    })
}

/// Decodes any supported file to a 3-channel tensor at native resolution.
/// Grayscale inputs are replicated across channels.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = open(path)?.to_rgb8();
    Ok(rgb8_to_tensor(&img))
}

pub fn rgb8_to_tensor(img: &RgbImage) -> ImageTensor {
    let (w, h) = img.dimensions();
    ImageTensor::from_fn(3, h as usize, w as usize, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

/// Decodes and bilinearly resizes to `size × size`; same-size inputs are not resampled.
pub fn load_training_image(path: &Path, size: usize) -> Result<ImageTensor> {
    let img = open(path)?;
    if img.width() as usize == size && img.height() as usize == size {
        return Ok(rgb8_to_tensor(&img.to_rgb8()));
    }
    let rgb = DynamicImage::ImageRgb8(img.to_rgb8()).to_rgb32f();
    let resized = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    Ok(rgb32f_to_tensor(&resized))
}

/// `[0,1] → u8` with round-half-up; out-of-range values saturate.
#[inline]
pub fn quantize(v: f32) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes a 1-channel (grayscale) or 3-channel (RGB) tensor as an 8-bit PNG.
pub fn save_png(t: &ImageTensor, path: &Path) -> Result<()> {
    let (w, h) = (t.width() as u32, t.height() as u32);
    let res = match t.channels() {
        1 => GrayImage::from_fn(w, h, |x, y| image::Luma([quantize(t.get(0, y as usize, x as usize))])).save(path),
        3 => RgbImage::from_fn(w, h, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([
                quantize(t.get(0, y, x)),
                quantize(t.get(1, y, x)),
                quantize(t.get(2, y, x)),
            ])
        })
        .save(path),
        c => return Err(Error::shape(format!("cannot write a {c}-channel tensor as PNG"))),
    };
    res.map_err(|e| map_image_error(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_survives_resize() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        GrayImage::from_pixel(512, 512, image::Luma([128])).save(&path).unwrap();
        let t = load_training_image(&path, 256).unwrap();
        assert_eq!((t.channels(), t.height(), t.width()), (3, 256, 256));
        assert!(t.data().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-5));
    }

    #[test]
    fn native_size_is_direct_division() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let img = RgbImage::from_fn(256, 256, |x, y| {
            image::Rgb([(x % 256) as u8, (y % 256) as u8, ((x * 7 + y) % 256) as u8])
        });
        img.save(&path).unwrap();
        let t = load_training_image(&path, 256).unwrap();
        for (x, y) in [(0u32, 0u32), (13, 200), (255, 255)] {
            for c in 0..3 {
                let expected = img.get_pixel(x, y)[c] as f32 / 255.0;
                assert!((t.get(c, y as usize, x as usize) - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn grayscale_replicates_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        GrayImage::from_fn(8, 5, |x, y| image::Luma([(x * 30 + y) as u8]))
            .save(&path)
            .unwrap();
        let t = load_image(&path).unwrap();
        assert_eq!(t.plane(0), t.plane(1));
        assert_eq!(t.plane(1), t.plane(2));
    }

    #[test]
    fn errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        assert!(matches!(load_image(&missing), Err(Error::Io { .. })));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"definitely not an image").unwrap();
        let err = load_image(&junk).unwrap_err();
        assert!(err.to_string().contains("junk.png"), "{err}");
    }

    #[test]
    fn png_quantization_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.png");
        let t = ImageTensor::from_fn(3, 4, 4, |c, y, x| ((c * 16 + y * 4 + x) * 5) as f32 / 255.0);
        save_png(&t, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), t);
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
    }
}
