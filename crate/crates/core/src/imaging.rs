//! Image decoding, model input tensors and mask I/O.

use std::io::Cursor;
use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, ImageFormat, Luma, RgbImage};
use ndarray::Array2;

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("empty image data")]
    Empty,
    #[error("cannot decode image: {0}")]
    Decode(#[from] image::ImageError),
    #[error("cannot read {path}: {cause}")]
    Io { path: String, cause: std::io::Error },
    #[error("mask is {found:?} but its image is {expected:?} (width x height)")]
    MaskSize { expected: (u32, u32), found: (u32, u32) },
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, ImagingError> {
    if bytes.is_empty() {
        return Err(ImagingError::Empty);
    }
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

pub fn load_image(path: &Path) -> Result<RgbImage, ImagingError> {
    let bytes = std::fs::read(path).map_err(|cause| ImagingError::Io { path: path.display().to_string(), cause })?;
    decode_image(&bytes)
}

pub fn encode_png_rgb(image: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    image.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

/// Resizes to `size x size` and returns `(size * size) x 3` rows, row-major
/// over pixels, standardized to roughly zero mean and unit scale.
pub fn image_tensor<F: Scalar>(image: &RgbImage, size: u32) -> Array2<F> {
    let resized = resize_rgb(image, size, size);
    let n = (size * size) as usize;
    let mut out = Array2::zeros((n, 3));
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            out[[i, c]] = standardize(px.0[c]);
        }
    }
    out
}

/// Resizes to `size x size` and cuts non-overlapping `patch x patch` tiles,
/// one flattened `(patch * patch * 3)` row per tile in raster order.
pub fn image_patches<F: Scalar>(image: &RgbImage, size: u32, patch: u32) -> Array2<F> {
    assert!(size % patch == 0, "image size must be a multiple of the patch size");
    let resized = resize_rgb(image, size, size);
    let grid = size / patch;
    let width = (patch * patch * 3) as usize;
    let mut out = Array2::zeros(((grid * grid) as usize, width));
    for gy in 0..grid {
        for gx in 0..grid {
            let row = (gy * grid + gx) as usize;
            let mut col = 0;
            for y in 0..patch {
                for x in 0..patch {
                    let px = resized.get_pixel(gx * patch + x, gy * patch + y);
                    for c in 0..3 {
                        out[[row, col]] = standardize(px.0[c]);
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

fn standardize<F: Scalar>(v: u8) -> F {
    F::of((f64::from(v) / 255.0 - 0.5) / 0.25)
}

pub fn resize_rgb(image: &RgbImage, width: u32, height: u32) -> RgbImage {
    if image.dimensions() == (width, height) {
        image.clone()
    } else {
        image::imageops::resize(image, width, height, FilterType::Triangle)
    }
}

/// Binary mask indexed `[row, col]`.
pub type BinaryMask = Array2<bool>;

/// Reads an 8-bit mask; any value of 128 or more counts as tampered.
pub fn load_mask(path: &Path) -> Result<BinaryMask, ImagingError> {
    let bytes = std::fs::read(path).map_err(|cause| ImagingError::Io { path: path.display().to_string(), cause })?;
    decode_mask(&bytes)
}

pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask, ImagingError> {
    if bytes.is_empty() {
        return Err(ImagingError::Empty);
    }
    let gray = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| gray.get_pixel(c as u32, r as u32).0[0] >= 128))
}

/// Single-channel 8-bit PNG, 255 for tampered pixels and 0 elsewhere.
pub fn encode_mask_png(mask: &BinaryMask) -> Vec<u8> {
    let (h, w) = mask.dim();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }]));
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

/// Lossless 16-bit single-channel PNG of a probability map in `[0, 1]`.
pub fn encode_probability_png<F: Scalar>(probs: &Array2<F>) -> Vec<u8> {
    let (h, w) = probs.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = probs[[y as usize, x as usize]].as_f64().clamp(0.0, 1.0);
        Luma([(p * 65535.0).round() as u16])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

/// Inverse of [`encode_probability_png`], up to 16-bit quantization.
pub fn decode_probability_png(bytes: &[u8]) -> Result<Array2<f64>, ImagingError> {
    let gray = image::load_from_memory(bytes)?.to_luma16();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        f64::from(gray.get_pixel(c as u32, r as u32).0[0]) / 65535.0
    }))
}

pub fn resize_mask_nearest(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    let (h, w) = mask.dim();
    if (h, w) == (height, width) {
        return mask.clone();
    }
    Array2::from_shape_fn((height, width), |(r, c)| {
        let sr = ((r as f64 + 0.5) * h as f64 / height as f64).floor() as usize;
        let sc = ((c as f64 + 0.5) * w as f64 / width as f64).floor() as usize;
        mask[[sr.min(h - 1), sc.min(w - 1)]]
    })
}

pub fn mask_to_float<F: Scalar>(mask: &BinaryMask) -> Array2<F> {
    mask.mapv(|m| if m { F::one() } else { F::zero() })
}

/// `out x input` bilinear interpolation matrix (half-pixel centres, clamped
/// edges). `R X C^T` resamples a map `X`; rows of every matrix sum to one.
pub fn bilinear_matrix<F: Scalar>(output: usize, input: usize) -> Array2<F> {
    let mut m = Array2::zeros((output, input));
    let ratio = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(input - 1);
        let frac = src - lo as f64;
        m[[o, lo]] += F::of(1.0 - frac);
        m[[o, hi]] += F::of(frac);
    }
    m
}

/// Bilinear resampling of a single-channel map.
pub fn resize_bilinear<F: Scalar>(map: &Array2<F>, height: usize, width: usize) -> Array2<F> {
    let (h, w) = map.dim();
    if (h, w) == (height, width) {
        return map.clone();
    }
    let rows = bilinear_matrix::<F>(height, h);
    let cols = bilinear_matrix::<F>(width, w);
    rows.dot(map).dot(&cols.t())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_bytes_are_rejected() {
        assert!(matches!(decode_image(&[]), Err(ImagingError::Empty)));
        assert!(matches!(decode_image(b"not an image"), Err(ImagingError::Decode(_))));
    }

    #[test]
    fn mask_png_round_trip() {
        let mask = Array2::from_shape_fn((5, 7), |(r, c)| (r + c) % 3 == 0);
        let png = encode_mask_png(&mask);
        assert_eq!(decode_mask(&png).unwrap(), mask);
        let gray = image::load_from_memory(&png).unwrap();
        assert_eq!(gray.color(), image::ColorType::L8);
    }

    #[test]
    fn probability_png_is_16_bit() {
        let probs = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64 / 15.0);
        let png = encode_probability_png(&probs);
        assert_eq!(image::load_from_memory(&png).unwrap().color(), image::ColorType::L16);
        let back = decode_probability_png(&png).unwrap();
        assert!(back.iter().zip(probs.iter()).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn bilinear_rows_sum_to_one_and_identity_when_equal() {
        let m = bilinear_matrix::<f64>(8, 3);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let eye = bilinear_matrix::<f64>(4, 4);
        assert_eq!(eye, Array2::<f64>::eye(4));
    }

    #[test]
    fn nearest_resize_keeps_binary_blocks() {
        let mask = Array2::from_shape_fn((2, 2), |(r, c)| r == 0 && c == 0);
        let up = resize_mask_nearest(&mask, 4, 4);
        assert_eq!(up.iter().filter(|&&v| v).count(), 4);
        assert!(up[[0, 0]] && up[[1, 1]] && !up[[2, 2]]);
    }
}
