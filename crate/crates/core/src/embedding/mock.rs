use image::imageops::FilterType;

use super::{EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};
use crate::types::ImageRef;

/// Buckets each feature is spread over. Distinct tokens only collide if all of their
/// buckets coincide.
const BUCKETS_PER_FEATURE: u64 = 4;

/// Side length images are resampled to before hashing.
const THUMBNAIL_SIDE: u32 = 16;

/// Intensity levels per channel after quantization.
const INTENSITY_LEVELS: u32 = 16;

/// Deterministic feature-hashing embedder.
///
/// Text is lowercased and split on anything that is not alphanumeric; every token adds
/// weight to a few seeded hash buckets. Images are decoded, resampled to a 16x16 RGB
/// thumbnail and every (x, y, channel, quantized intensity) cell is hashed the same way.
/// All weights are non-negative, so cosine similarities between mock vectors lie in
/// [0, 1].
#[derive(Debug, Clone)]
pub struct MockProvider {
    seed: u64,
    dimension: usize,
    id: String,
}

impl MockProvider {
    pub fn new(seed: u64, dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(MockProvider {
            seed,
            dimension,
            id: format!("mock-hash/seed={seed}/d={dimension}"),
        })
    }

    fn accumulate(&self, raw: &mut [f64], feature: &[u8]) {
        let base = fnv1a(self.seed, feature);
        for k in 0..BUCKETS_PER_FEATURE {
            let bucket = splitmix64(base ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15)) % self.dimension as u64;
            raw[bucket as usize] += 1.0;
        }
    }
}

pub(crate) fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

impl EmbeddingProvider for MockProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("cannot embed empty text".into()));
        }
        let mut raw = vec![0.0; self.dimension];
        for token in tokenize(text) {
            self.accumulate(&mut raw, token.as_bytes());
        }
        EmbeddingVector::normalized(raw, self.id.as_str())
    }

    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector> {
        let bytes = image.load()?;
        let decoded = image::load_from_memory(&bytes)
            .map_err(|e| Error::ImageDecode(format!("{}: {e}", image.describe())))?;
        let thumb = decoded
            .resize_exact(THUMBNAIL_SIDE, THUMBNAIL_SIDE, FilterType::Triangle)
            .to_rgb8();
        let mut raw = vec![0.0; self.dimension];
        let mut feature = [0u8; 8];
        for (x, y, pixel) in thumb.enumerate_pixels() {
            for (channel, value) in pixel.0.iter().enumerate() {
                let level = u32::from(*value) * INTENSITY_LEVELS / 256;
                feature[..2].copy_from_slice(&(x as u16).to_le_bytes());
                feature[2..4].copy_from_slice(&(y as u16).to_le_bytes());
                feature[4] = channel as u8;
                feature[5] = level as u8;
                feature[6] = b'i';
                feature[7] = b'm';
                self.accumulate(&mut raw, &feature);
            }
        }
        EmbeddingVector::normalized(raw, self.id.as_str())
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64 ^ splitmix64(seed);
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::cosine;

    fn png(seed: u8) -> Vec<u8> {
        let img = image::RgbImage::from_fn(16, 16, |x, y| {
            image::Rgb([(x * 16) as u8 ^ seed, (y * 16) as u8, seed.wrapping_mul(37)])
        });
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    #[test]
    fn text_is_unit_norm_and_deterministic() {
        let p = MockProvider::new(7, 256).unwrap();
        let a = p.embed_text("hello").unwrap();
        let b = p.embed_text("hello").unwrap();
        assert!((a.norm() - 1.0).abs() <= 1e-6);
        assert_eq!(a.dimension(), 256);
        let bits = |v: &EmbeddingVector| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn distinct_words_point_in_distinct_directions() {
        let p = MockProvider::new(7, 256).unwrap();
        let hello = p.embed_text("hello").unwrap();
        let bye = p.embed_text("goodbye").unwrap();
        assert!(cosine(&hello, &bye).unwrap() < 0.999);
    }

    #[test]
    fn seed_changes_vectors() {
        let a = MockProvider::new(1, 64).unwrap().embed_text("open the door").unwrap();
        let b = MockProvider::new(2, 64).unwrap().embed_text("open the door").unwrap();
        assert_ne!(a.values(), b.values());
    }

    #[test]
    fn punctuation_only_text_has_no_direction() {
        let p = MockProvider::new(7, 32).unwrap();
        assert!(p.embed_text("?!").is_err());
        assert!(p.embed_text("   ").is_err());
    }

    #[test]
    fn images_are_deterministic_unit_vectors() {
        let p = MockProvider::new(7, 128).unwrap();
        let img = ImageRef::Bytes(png(3));
        let a = p.embed_image(&img).unwrap();
        let b = p.embed_image(&ImageRef::Bytes(png(3))).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() <= 1e-6);
        let c = p.embed_image(&ImageRef::Bytes(png(200))).unwrap();
        assert!(cosine(&a, &c).unwrap() < 0.999);
    }

    #[test]
    fn undecodable_image_errors() {
        let p = MockProvider::new(7, 128).unwrap();
        let err = p.embed_image(&ImageRef::Bytes(b"not an image".to_vec())).unwrap_err();
        assert!(matches!(err, Error::ImageDecode(_)));
        let err = p
            .embed_image(&ImageRef::Path("/definitely/missing.png".into()))
            .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
