//! Fixed linear pixel↔latent map.
//!
//! Stands in for a pretrained multi-scale VAE: non-overlapping 16×16×3
//! pixel blocks are projected to d latent channels through a seeded matrix
//! with orthonormal rows, and decoded through its transpose. Decode∘encode
//! is therefore an orthogonal projection — applying it twice equals
//! applying it once — and the ×16 downsampling and latent channel count
//! match the generation pipeline's shape contract. Nothing here is
//! trainable.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::PIXEL_DOWNSAMPLE;

const BLOCK: usize = PIXEL_DOWNSAMPLE;
const BLOCK_VALUES: usize = 3 * BLOCK * BLOCK;

#[derive(Debug, Clone)]
pub struct PixelLatentMap {
    dim: usize,
    /// [dim, 768] with orthonormal rows.
    enc: Vec<f64>,
}

impl PixelLatentMap {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(
            (1..=BLOCK_VALUES).contains(&dim),
            "latent dim must lie in 1..={BLOCK_VALUES}"
        );
        let mut rng = rng::stream(seed, 0x70_69_78_6d);
        let mut enc = Tensor::randn(vec![dim, BLOCK_VALUES], 1.0, &mut rng).data().to_vec();
        // modified Gram-Schmidt; Gaussian rows are independent almost surely
        for r in 0..dim {
            for p in 0..r {
                let dot: f64 = (0..BLOCK_VALUES)
                    .map(|j| enc[r * BLOCK_VALUES + j] * enc[p * BLOCK_VALUES + j])
                    .sum();
                for j in 0..BLOCK_VALUES {
                    enc[r * BLOCK_VALUES + j] -= dot * enc[p * BLOCK_VALUES + j];
                }
            }
            let norm: f64 = (0..BLOCK_VALUES)
                .map(|j| enc[r * BLOCK_VALUES + j].powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(norm > 1e-8, "degenerate row in pixel-latent basis");
            for j in 0..BLOCK_VALUES {
                enc[r * BLOCK_VALUES + j] /= norm;
            }
        }
        PixelLatentMap { dim, enc }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// [3, H, W] pixels → [dim, H/16, W/16] latents. H and W must be
    /// divisible by 16.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        if image.rank() != 3 || image.shape()[0] != 3 {
            return Err(Error::ShapeMismatch {
                context: "pixel_latent_map encode",
                expected: vec![3, 0, 0],
                got: image.shape().to_vec(),
            });
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if h % BLOCK != 0 || w % BLOCK != 0 {
            return Err(Error::InvalidArgument {
                context: "pixel_latent_map encode",
                message: format!("{h}×{w} not divisible by {BLOCK}"),
            });
        }
        let (lh, lw) = (h / BLOCK, w / BLOCK);
        let plane = h * w;
        let lplane = lh * lw;
        let mut out = vec![0.0; self.dim * lplane];
        let mut block = vec![0.0; BLOCK_VALUES];
        for by in 0..lh {
            for bx in 0..lw {
                for c in 0..3 {
                    for y in 0..BLOCK {
                        for x in 0..BLOCK {
                            block[c * BLOCK * BLOCK + y * BLOCK + x] =
                                image.data()[c * plane + (by * BLOCK + y) * w + (bx * BLOCK + x)];
                        }
                    }
                }
                for ch in 0..self.dim {
                    let row = &self.enc[ch * BLOCK_VALUES..(ch + 1) * BLOCK_VALUES];
                    out[ch * lplane + by * lw + bx] =
                        row.iter().zip(&block).map(|(a, b)| a * b).sum();
                }
            }
        }
        Ok(Tensor::new(vec![self.dim, lh, lw], out))
    }

    /// [dim, h, w] latents → [3, 16h, 16w] pixels through the transpose map.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        if latent.rank() != 3 || latent.shape()[0] != self.dim {
            return Err(Error::ShapeMismatch {
                context: "pixel_latent_map decode",
                expected: vec![self.dim, 0, 0],
                got: latent.shape().to_vec(),
            });
        }
        let (lh, lw) = (latent.shape()[1], latent.shape()[2]);
        let (h, w) = (lh * BLOCK, lw * BLOCK);
        let plane = h * w;
        let lplane = lh * lw;
        let mut out = vec![0.0; 3 * plane];
        for by in 0..lh {
            for bx in 0..lw {
                for ch in 0..self.dim {
                    let v = latent.data()[ch * lplane + by * lw + bx];
                    if v == 0.0 {
                        continue;
                    }
                    let row = &self.enc[ch * BLOCK_VALUES..(ch + 1) * BLOCK_VALUES];
                    for c in 0..3 {
                        for y in 0..BLOCK {
                            for x in 0..BLOCK {
                                out[c * plane + (by * BLOCK + y) * w + (bx * BLOCK + x)] +=
                                    v * row[c * BLOCK * BLOCK + y * BLOCK + x];
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(vec![3, h, w], out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn shape_contract_at_paper_width() {
        let map = PixelLatentMap::new(32, 7);
        let img = Tensor::zeros(vec![3, 256, 256]);
        let latent = map.encode(&img).unwrap();
        assert_eq!(latent.shape(), &[32, 16, 16]);
    }

    #[test]
    fn zero_image_gives_zero_latent() {
        let map = PixelLatentMap::new(16, 7);
        let latent = map.encode(&Tensor::zeros(vec![3, 32, 32])).unwrap();
        assert!(latent.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_encode_is_an_idempotent_projection() {
        let mut rng = seeded(31);
        for dim in [16, 32] {
            let map = PixelLatentMap::new(dim, 7);
            let img = Tensor::randn(vec![3, 32, 32], 1.0, &mut rng);
            let once = map.decode(&map.encode(&img).unwrap()).unwrap();
            let twice = map.decode(&map.encode(&once).unwrap()).unwrap();
            assert!(once.max_abs_diff(&twice) < 1e-9, "dim {dim}");
        }
    }

    #[test]
    fn rejects_indivisible_dimensions() {
        let map = PixelLatentMap::new(16, 7);
        assert!(map.encode(&Tensor::zeros(vec![3, 30, 32])).is_err());
    }
}
