//! PNG I/O and small pixel utilities shared across the pipeline.

use std::io::Cursor;
use std::path::Path;

use base64::Engine;
use image::{imageops, DynamicImage, GrayImage, ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::mask::{BBox, BinaryMask};

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    Ok(reader.decode()?.to_rgb8())
}

pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    Ok(reader.decode()?.to_luma8())
}

pub fn save_rgb(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    img.save_with_format(path.as_ref(), ImageFormat::Png)?;
    Ok(())
}

pub fn save_gray(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    img.save_with_format(path.as_ref(), ImageFormat::Png)?;
    Ok(())
}

pub fn encode_png(img: &DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn png_base64(img: &DynamicImage) -> Result<String> {
    Ok(base64::engine::general_purpose::STANDARD.encode(encode_png(img)?))
}

pub fn decode_base64_image(data: &str) -> Result<DynamicImage> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(data.trim())
        .map_err(|e| Error::Parse {
            record: "base64 image".into(),
            message: e.to_string(),
        })?;
    Ok(image::load_from_memory(&bytes)?)
}

/// Center-crops to a square and resizes to `size × size`.
pub fn square_resize(img: &RgbImage, size: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if w == size && h == size {
        return img.clone();
    }
    let side = w.min(h);
    let cropped = imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    imageops::resize(&cropped, size, size, imageops::FilterType::Triangle)
}

pub fn crop(img: &RgbImage, bbox: &BBox) -> RgbImage {
    imageops::crop_imm(img, bbox.x as u32, bbox.y as u32, bbox.w as u32, bbox.h as u32).to_image()
}

/// Crop of `img` at `bbox` where pixels outside `mask` are set to `fill`.
pub fn crop_masked(img: &RgbImage, mask: &BinaryMask, bbox: &BBox, fill: Rgb<u8>) -> RgbImage {
    RgbImage::from_fn(bbox.w as u32, bbox.h as u32, |x, y| {
        let (sx, sy) = (bbox.x + x as usize, bbox.y + y as usize);
        if mask.get(sx, sy) {
            *img.get_pixel(sx as u32, sy as u32)
        } else {
            fill
        }
    })
}

pub fn check_same_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::contract(format!(
            "image dimensions differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    Ok(())
}

pub fn check_mask_dims(img: &RgbImage, mask: &BinaryMask) -> Result<()> {
    if (img.width() as usize, img.height() as usize) != mask.dims() {
        return Err(Error::contract(format!(
            "mask {:?} does not match image {:?}",
            mask.dims(),
            img.dimensions()
        )));
    }
    Ok(())
}

/// RGB in `[0, 255]` to HSV with hue in degrees and s, v in `[0, 1]`.
pub fn rgb_to_hsv(p: Rgb<u8>) -> (f32, f32, f32) {
    let [r, g, b] = p.0.map(|c| c as f32 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue, sat, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> Rgb<u8> {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    Rgb([r, g, b].map(|ch| ((ch + m) * 255.0).round().clamp(0.0, 255.0) as u8))
}

/// Hex digest of the raw pixel bytes plus dimensions.
pub fn image_digest(img: &RgbImage) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(img.width().to_le_bytes());
    h.update(img.height().to_le_bytes());
    h.update(img.as_raw());
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip_on_primaries() {
        for p in [Rgb([255, 0, 0]), Rgb([0, 255, 0]), Rgb([20, 40, 200]), Rgb([128, 128, 128])] {
            let (h, s, v) = rgb_to_hsv(p);
            assert_eq!(hsv_to_rgb(h, s, v), p);
        }
    }

    #[test]
    fn masked_crop_fills_background() {
        let img = RgbImage::from_pixel(4, 4, Rgb([10, 20, 30]));
        let mask = BinaryMask::from_fn(4, 4, |x, _| x == 1);
        let bbox = BBox { x: 0, y: 0, w: 2, h: 1 };
        let c = crop_masked(&img, &mask, &bbox, Rgb([128, 128, 128]));
        assert_eq!(c.get_pixel(0, 0), &Rgb([128, 128, 128]));
        assert_eq!(c.get_pixel(1, 0), &Rgb([10, 20, 30]));
    }
}
