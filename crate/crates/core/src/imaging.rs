//! Pixel-level helpers: square cropping, resampling, and conversion between
//! `RgbImage` and `(3, H, W)` tensors in `[-1, 1]`.

use candle_core::{DType, Device, Tensor};
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// Largest centered square. Odd margins put the extra pixel on the
/// right/bottom.
pub fn center_crop_square(image: &RgbImage) -> RgbImage {
    let (w, h) = image.dimensions();
    let side = w.min(h);
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;
    image::imageops::crop_imm(image, x0, y0, side, side).to_image()
}

/// Bilinear resampling with pixel-center alignment: output pixel `i` samples
/// source coordinate `(i + 0.5) * in / out - 0.5`, clamped to the border.
/// Equal sizes reproduce the input; an exact 2x reduction averages 2x2 blocks.
pub fn resize_bilinear(image: &RgbImage, out_w: u32, out_h: u32) -> RgbImage {
    let (in_w, in_h) = image.dimensions();
    let sx = in_w as f64 / out_w as f64;
    let sy = in_h as f64 / out_h as f64;
    let axis = |i: u32, scale: f64, len: u32| -> (u32, u32, f64) {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as u32;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    RgbImage::from_fn(out_w, out_h, |x, y| {
        let (x0, x1, fx) = axis(x, sx, in_w);
        let (y0, y1, fy) = axis(y, sy, in_h);
        let mut px = [0u8; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let p = |xx: u32, yy: u32| image.get_pixel(xx, yy).0[c] as f64;
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            *out = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

/// Center-crop to a square, then bilinear-resize to `size x size`.
pub fn crop_and_resize(image: &RgbImage, size: u32) -> Result<RgbImage> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Validation("image has zero extent".into()));
    }
    let square = center_crop_square(image);
    if square.width() == size {
        return Ok(square);
    }
    Ok(resize_bilinear(&square, size, size))
}

/// Block-average downscale by an integer factor; falls back to bilinear when
/// the sizes do not divide.
pub fn downscale(image: &RgbImage, size: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    if w == size && h == size {
        return image.clone();
    }
    if w != h || w % size != 0 {
        return resize_bilinear(image, size, size);
    }
    let f = w / size;
    let area = (f * f) as f64;
    RgbImage::from_fn(size, size, |x, y| {
        let mut acc = [0.0f64; 3];
        for dy in 0..f {
            for dx in 0..f {
                let p = image.get_pixel(x * f + dx, y * f + dy).0;
                for c in 0..3 {
                    acc[c] += p[c] as f64;
                }
            }
        }
        Rgb(acc.map(|v| (v / area).round() as u8))
    })
}

/// `(3, H, W)` tensor with values `pixel / 127.5 - 1`.
pub fn image_to_tensor(image: &RgbImage, dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = image.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in image.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), device)?.to_dtype(dtype)?)
}

/// Inverse of [`image_to_tensor`], clamping to the valid range.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Validation(format!("expected 3 channels, got {c}")));
    }
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| {
            let v = data[ch * h * w + y as usize * w + x as usize];
            ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
        };
        Rgb([at(0), at(1), at(2)])
    }))
}

pub fn save_png(image: &RgbImage, path: &std::path::Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(path, e))
}

/// Mean squared difference over all channels, in `[0, 255]` units.
pub fn pixel_mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Validation(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    let n = a.as_raw().len() as f64;
    Ok(a.as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n)
}
