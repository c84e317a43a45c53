//! Image ↔ latent codecs. The default is a fixed affine map to `[-1, 1]` in
//! pixel space; a learned autoencoder plugs in behind the same trait.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSpace {
    Pixel,
    Encoded,
}

/// A single `C × H × W` latent.
#[derive(Debug)]
pub struct Latent {
    pub data: Tensor,
    pub space: LatentSpace,
}

impl Latent {
    pub fn shape(&self) -> Vec<i64> {
        self.data.size()
    }
}

pub trait LatentCodec: Send + Sync {
    /// Expected image `(width, height)`.
    fn resolution(&self) -> (u32, u32);
    fn encode(&self, image: &RgbImage) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<RgbImage>;
}

fn check_resolution(image: &RgbImage, expected: (u32, u32)) -> Result<()> {
    if image.dimensions() != expected {
        return Err(Error::contract(format!(
            "image is {:?}, codec expects {:?}",
            image.dimensions(),
            expected
        )));
    }
    Ok(())
}

/// `[N, 3, H, W]` float tensor in `[-1, 1]` from 8-bit images.
pub fn images_to_tensor(images: &[&RgbImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::contract("no images to stack"))?;
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(images.len() * 3 * (w * h) as usize);
    for img in images {
        check_resolution(img, (w, h))?;
        for c in 0..3 {
            data.extend(img.pixels().map(|p| p[c] as f32 / 127.5 - 1.0));
        }
    }
    Ok(Tensor::from_slice(&data).view([images.len() as i64, 3, h as i64, w as i64]))
}

/// Inverse of [`images_to_tensor`], rounding to the nearest 8-bit value.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<RgbImage>> {
    let size = t.size();
    if size.len() != 4 || size[1] != 3 {
        return Err(Error::contract(format!("expected [N, 3, H, W], got {size:?}")));
    }
    let (n, h, w) = (size[0] as usize, size[2] as usize, size[3] as usize);
    let flat = t.to_kind(Kind::Float).contiguous().view([-1]);
    let values: Vec<f32> = Vec::<f32>::try_from(&flat).map_err(Error::Torch)?;
    let plane = h * w;
    Ok((0..n)
        .map(|i| {
            let base = i * 3 * plane;
            RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let idx = y as usize * w + x as usize;
                Rgb([0, 1, 2].map(|c| {
                    let v = values[base + c * plane + idx];
                    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
                }))
            })
        })
        .collect())
}

/// Fixed invertible rescaling `v / 127.5 − 1`.
#[derive(Debug, Clone, Copy)]
pub struct PixelCodec {
    pub size: u32,
}

impl LatentCodec for PixelCodec {
    fn resolution(&self) -> (u32, u32) {
        (self.size, self.size)
    }

    fn encode(&self, image: &RgbImage) -> Result<Latent> {
        check_resolution(image, self.resolution())?;
        Ok(Latent {
            data: images_to_tensor(&[image])?.squeeze_dim(0),
            space: LatentSpace::Pixel,
        })
    }

    fn decode(&self, latent: &Latent) -> Result<RgbImage> {
        let s = latent.data.size();
        if s != [3, self.size as i64, self.size as i64] {
            return Err(Error::contract(format!("latent shape {s:?} does not match codec")));
        }
        Ok(tensor_to_images(&latent.data.unsqueeze(0))?.remove(0))
    }
}

/// Placeholder occupying the learned-autoencoder slot: identity on the
/// normalized pixels, tagged as an encoded latent.
#[derive(Debug, Clone, Copy)]
pub struct IdentityAutoencoder {
    pub size: u32,
}

impl LatentCodec for IdentityAutoencoder {
    fn resolution(&self) -> (u32, u32) {
        (self.size, self.size)
    }

    fn encode(&self, image: &RgbImage) -> Result<Latent> {
        let mut l = PixelCodec { size: self.size }.encode(image)?;
        l.space = LatentSpace::Encoded;
        Ok(l)
    }

    fn decode(&self, latent: &Latent) -> Result<RgbImage> {
        if latent.space != LatentSpace::Encoded {
            return Err(Error::contract("identity autoencoder decodes encoded latents only"));
        }
        PixelCodec { size: self.size }.decode(latent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(seed: u64, size: u32) -> RgbImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(size, size, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
    }

    #[test]
    fn pixel_round_trip_is_exact() {
        let codec = PixelCodec { size: 16 };
        for seed in 0..4 {
            let img = random_image(seed, 16);
            assert_eq!(codec.decode(&codec.encode(&img).unwrap()).unwrap(), img);
        }
        // Every 8-bit level survives the round trip.
        let ramp = RgbImage::from_fn(16, 16, |x, y| {
            let v = (y * 16 + x) as u8;
            Rgb([v, 255 - v, v])
        });
        assert_eq!(codec.decode(&codec.encode(&ramp).unwrap()).unwrap(), ramp);
    }

    #[test]
    fn black_encodes_to_minus_one() {
        let codec = PixelCodec { size: 8 };
        let l = codec.encode(&RgbImage::new(8, 8)).unwrap();
        assert_eq!(l.space, LatentSpace::Pixel);
        assert_eq!(l.data.min().double_value(&[]), -1.0);
        assert_eq!(l.data.max().double_value(&[]), -1.0);
    }

    #[test]
    fn identity_stub_round_trip() {
        let codec = IdentityAutoencoder { size: 12 };
        let img = random_image(7, 12);
        let l = codec.encode(&img).unwrap();
        assert_eq!(l.space, LatentSpace::Encoded);
        assert_eq!(codec.decode(&l).unwrap(), img);
    }

    #[test]
    fn resolution_mismatch_is_contract_error() {
        let codec = PixelCodec { size: 8 };
        assert!(matches!(codec.encode(&RgbImage::new(9, 8)), Err(Error::Contract(_))));
    }
}
