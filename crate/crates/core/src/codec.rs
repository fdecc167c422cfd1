//! Exactly invertible image/latent codec.
//!
//! Stands in for a learned autoencoder: space-to-depth rearrangement with
//! factor `f` followed by a fixed orthogonal channel mixing. Orthogonality
//! makes the map an isometry, so decode(encode(x)) is identity up to float
//! roundoff and reconstruction tests are hard assertions.

use crate::error::{Error, Result};
use crate::imagebuf::{ImageTensor, IMAGE_CHANNELS};
use crate::rng::derive_rng;
use crate::tensor::Tensor;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Latent grid: shape [H/f, W/f, 3·f²], channels last.
pub type LatentTensor = Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CodecConfig {
    /// Spatial compression factor.
    pub factor: usize,
    /// Seed for the orthogonal channel-mixing matrix.
    pub mixing_seed: u64,
    /// Uniform latent scale, divided back out on decode. Lets training run
    /// on roughly unit-variance latents without breaking exact inversion.
    #[serde(default = "default_gain")]
    pub gain: f32,
}

fn default_gain() -> f32 {
    1.0
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            factor: 2,
            mixing_seed: 0,
            gain: 1.0,
        }
    }
}

impl CodecConfig {
    pub fn latent_channels(&self) -> usize {
        IMAGE_CHANNELS * self.factor * self.factor
    }
}

pub struct Codec {
    cfg: CodecConfig,
    /// Orthogonal c x c mixing matrix, row-major.
    mixing: Vec<f32>,
    channels: usize,
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Self {
        let c = cfg.latent_channels();
        let mut rng = derive_rng(cfg.mixing_seed, &["codec-mixing"]);
        let gauss = DMatrix::<f64>::from_fn(c, c, |_, _| rng.sample(StandardNormal));
        let qr = gauss.qr();
        let mut q = qr.q();
        let r = qr.r();
        // fix the sign ambiguity so the matrix is unique given the seed
        for j in 0..c {
            if r[(j, j)] < 0.0 {
                for i in 0..c {
                    q[(i, j)] = -q[(i, j)];
                }
            }
        }
        let mixing = (0..c)
            .flat_map(|i| (0..c).map(move |j| (i, j)))
            .map(|(i, j)| q[(i, j)] as f32)
            .collect();
        Self {
            cfg,
            mixing,
            channels: c,
        }
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    /// QᵀQ deviation from identity, for the orthogonality invariant.
    pub fn mixing_orthogonality_error(&self) -> f64 {
        let c = self.channels;
        let mut worst = 0.0f64;
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0f64;
                for k in 0..c {
                    acc += (self.mixing[k * c + i] as f64) * (self.mixing[k * c + j] as f64);
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((acc - target).abs());
            }
        }
        worst
    }

    pub fn encode(&self, img: &ImageTensor) -> Result<LatentTensor> {
        let f = self.cfg.factor;
        if img.height() % f != 0 || img.width() % f != 0 {
            return Err(Error::InvalidDims(format!(
                "image {}x{} not divisible by codec factor {f}",
                img.height(),
                img.width()
            )));
        }
        let (lh, lw) = (img.height() / f, img.width() / f);
        let c = self.channels;
        let mut raw = vec![0.0f32; lh * lw * c];
        for ly in 0..lh {
            for lx in 0..lw {
                for dy in 0..f {
                    for dx in 0..f {
                        let px = img.pixel(ly * f + dy, lx * f + dx);
                        let base = (ly * lw + lx) * c + (dy * f + dx) * IMAGE_CHANNELS;
                        raw[base..base + 3].copy_from_slice(&px);
                    }
                }
            }
        }
        // per-position channel mixing: out = gain · Q · raw
        let g = self.cfg.gain as f64;
        let mut out = vec![0.0f32; lh * lw * c];
        for pos in 0..lh * lw {
            for i in 0..c {
                let mut acc = 0.0f64;
                for k in 0..c {
                    acc += (self.mixing[i * c + k] as f64) * (raw[pos * c + k] as f64);
                }
                out[pos * c + i] = (acc * g) as f32;
            }
        }
        Tensor::new(&[lh, lw, c], out)
    }

    pub fn decode(&self, lat: &LatentTensor) -> Result<ImageTensor> {
        let f = self.cfg.factor;
        let c = self.channels;
        let s = lat.shape();
        if s.len() != 3 || s[2] != c {
            return Err(Error::ShapeMismatch {
                context: format!("latent for codec with factor {f}"),
                lhs: s.to_vec(),
                rhs: vec![0, 0, c],
            });
        }
        let (lh, lw) = (s[0], s[1]);
        // unmix with Qᵀ after dividing the gain back out
        let g = self.cfg.gain as f64;
        let mut raw = vec![0.0f32; lh * lw * c];
        for pos in 0..lh * lw {
            for i in 0..c {
                let mut acc = 0.0f64;
                for k in 0..c {
                    acc += (self.mixing[k * c + i] as f64) * (lat.data()[pos * c + k] as f64 / g);
                }
                raw[pos * c + i] = acc as f32;
            }
        }
        let mut img = ImageTensor::zeros(lh * f, lw * f);
        for ly in 0..lh {
            for lx in 0..lw {
                for dy in 0..f {
                    for dx in 0..f {
                        let base = (ly * lw + lx) * c + (dy * f + dx) * IMAGE_CHANNELS;
                        img.set_pixel(
                            ly * f + dy,
                            lx * f + dx,
                            [raw[base], raw[base + 1], raw[base + 2]],
                        );
                    }
                }
            }
        }
        Ok(img)
    }

    /// Per-image reconstruction PSNR over a corpus.
    pub fn reconstruction_psnr_report(&self, corpus: &[ImageTensor]) -> Result<Vec<f64>> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("psnr report corpus".into()));
        }
        corpus
            .iter()
            .map(|img| {
                let rec = self.decode(&self.encode(img)?)?;
                crate::metrics::psnr(img, &rec, 1.0)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = derive_rng(seed, &["test-img"]);
        let data = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn encode_shape() {
        let codec = Codec::new(CodecConfig::default());
        let lat = codec.encode(&random_image(4, 4, 1)).unwrap();
        assert_eq!(lat.shape(), &[2, 2, 12]);
    }

    #[test]
    fn constant_image_gives_spatially_constant_latent() {
        let codec = Codec::new(CodecConfig::default());
        let img = ImageTensor::new(8, 8, vec![0.4; 8 * 8 * 3]).unwrap();
        let lat = codec.encode(&img).unwrap();
        let c = 12;
        for pos in 1..(4 * 4) {
            for ch in 0..c {
                assert!((lat.data()[pos * c + ch] - lat.data()[ch]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn encode_preserves_l2_norm() {
        let codec = Codec::new(CodecConfig::default());
        let img = random_image(8, 8, 2);
        let lat = codec.encode(&img).unwrap();
        let n_img = img.as_tensor().l2_norm();
        let n_lat = lat.l2_norm();
        assert!((n_img - n_lat).abs() / n_img < 1e-4);
    }

    #[test]
    fn decode_encode_is_identity() {
        let codec = Codec::new(CodecConfig::default());
        let img = random_image(8, 8, 3);
        let rec = codec.decode(&codec.encode(&img).unwrap()).unwrap();
        assert!(img.as_tensor().max_abs_diff(&rec.as_tensor()) < 1e-5);
    }

    #[test]
    fn zero_latent_decodes_to_zero_image() {
        let codec = Codec::new(CodecConfig::default());
        let lat = Tensor::zeros(&[2, 2, 12]);
        let img = codec.decode(&lat).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_dims_error_names_divisibility() {
        let codec = Codec::new(CodecConfig::default());
        let img = random_image(5, 4, 4);
        let err = codec.encode(&img).unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
    }

    #[test]
    fn same_seed_same_mixing() {
        let a = Codec::new(CodecConfig::default());
        let b = Codec::new(CodecConfig::default());
        assert_eq!(a.mixing, b.mixing);
        assert!(a.mixing_orthogonality_error() < 1e-5);
    }

    #[test]
    fn psnr_report_all_high() {
        let codec = Codec::new(CodecConfig::default());
        let corpus: Vec<_> = (0..3).map(|i| random_image(8, 8, 10 + i)).collect();
        let report = codec.reconstruction_psnr_report(&corpus).unwrap();
        assert_eq!(report.len(), 3);
        for db in report {
            assert!(db >= 90.0, "psnr {db}");
        }
    }

    #[test]
    fn empty_corpus_errors() {
        let codec = Codec::new(CodecConfig::default());
        assert!(codec.reconstruction_psnr_report(&[]).is_err());
    }
}
