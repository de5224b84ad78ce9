//! Image corruption suite for robustness sweeps. Every corruption is a pure
//! function of (image, spec, seed); level 0 is the identity and returns the
//! input bit-exactly. Level-to-parameter tables live here and nowhere else.

use super::edge::{dct2, idct2};
use super::{gaussian_blur_plane, Image};
use crate::error::ImageError;
use crate::rng::{stream_hash, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    Saturation,
    Contrast,
    Blockwise,
    GaussianNoise,
    Blur,
    Pixelation,
    CompressionProxy,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::Saturation,
        CorruptionKind::Contrast,
        CorruptionKind::Blockwise,
        CorruptionKind::GaussianNoise,
        CorruptionKind::Blur,
        CorruptionKind::Pixelation,
        CorruptionKind::CompressionProxy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::Saturation => "saturation",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Blockwise => "blockwise",
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Pixelation => "pixelation",
            CorruptionKind::CompressionProxy => "compression_proxy",
        }
    }
}

/// One corruption at an intensity level. Level 0 is the identity baseline;
/// levels 1..=5 index the tables below.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub intensity_level: u32,
}

// Level -> parameter tables (index level-1).
pub const SATURATION_FACTOR: [f64; 5] = [0.7, 0.5, 0.3, 0.15, 0.0];
pub const CONTRAST_FACTOR: [f64; 5] = [0.85, 0.7, 0.55, 0.4, 0.25];
pub const BLOCKWISE_COUNT: [usize; 5] = [2, 4, 8, 16, 32];
pub const BLOCKWISE_SIZE: usize = 8;
pub const NOISE_SIGMA: [f64; 5] = [0.02, 0.04, 0.08, 0.12, 0.18];
pub const BLUR_SIGMA: [f64; 5] = [0.6, 1.0, 1.6, 2.4, 3.2];
pub const PIXELATION_BLOCK: [usize; 5] = [2, 4, 8, 16, 32];
pub const COMPRESSION_QSTEP: [f64; 5] = [0.02, 0.04, 0.08, 0.16, 0.32];

/// Desaturate toward the luma gray by blending with `factor` (1.0 keeps the
/// input bit-exactly, 0.0 is fully gray).
pub fn saturate(img: &Image, factor: f64) -> Image {
    if img.channels == 1 || factor == 1.0 {
        return img.clone();
    }
    let gray = img.to_gray();
    let hw = img.height * img.width;
    let mut out = img.clone();
    for c in 0..3 {
        for i in 0..hw {
            let v = gray[i] + factor * (img.pixels[c * hw + i] - gray[i]);
            out.pixels[c * hw + i] = v.clamp(0.0, 1.0);
        }
    }
    out
}

fn contrast(img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    for v in &mut out.pixels {
        *v = (0.5 + factor * (*v - 0.5)).clamp(0.0, 1.0);
    }
    out
}

fn blockwise(img: &Image, count: usize, rng: &mut Rng) -> Image {
    let mut out = img.clone();
    let hw = img.height * img.width;
    for _ in 0..count {
        let by = rng.below(img.height.saturating_sub(BLOCKWISE_SIZE).max(1));
        let bx = rng.below(img.width.saturating_sub(BLOCKWISE_SIZE).max(1));
        let color: Vec<f64> = (0..img.channels).map(|_| rng.uniform()).collect();
        for c in 0..img.channels {
            for y in by..(by + BLOCKWISE_SIZE).min(img.height) {
                for x in bx..(bx + BLOCKWISE_SIZE).min(img.width) {
                    out.pixels[c * hw + y * img.width + x] = color[c];
                }
            }
        }
    }
    out
}

fn gaussian_noise(img: &Image, sigma: f64, rng: &mut Rng) -> Image {
    let mut out = img.clone();
    for v in &mut out.pixels {
        *v = (*v + sigma * rng.normal()).clamp(0.0, 1.0);
    }
    out
}

fn blur(img: &Image, sigma: f64) -> Image {
    let mut out = img.clone();
    let hw = img.height * img.width;
    for c in 0..img.channels {
        let plane = gaussian_blur_plane(img.plane(c), img.height, img.width, sigma);
        out.pixels[c * hw..(c + 1) * hw].copy_from_slice(&plane);
    }
    out.clamp_in_place();
    out
}

/// Replace each block with its average (partial border blocks average over
/// their own extent).
pub fn pixelate(img: &Image, block: usize) -> Image {
    let mut out = img.clone();
    let hw = img.height * img.width;
    for c in 0..img.channels {
        for by in (0..img.height).step_by(block) {
            for bx in (0..img.width).step_by(block) {
                let y_end = (by + block).min(img.height);
                let x_end = (bx + block).min(img.width);
                let mut sum = 0.0;
                let mut n = 0usize;
                for y in by..y_end {
                    for x in bx..x_end {
                        sum += img.pixels[c * hw + y * img.width + x];
                        n += 1;
                    }
                }
                let avg = sum / n as f64;
                for y in by..y_end {
                    for x in bx..x_end {
                        out.pixels[c * hw + y * img.width + x] = avg;
                    }
                }
            }
        }
    }
    out
}

/// JPEG-style proxy: 8x8 blockwise DCT, uniform coefficient quantization,
/// inverse transform. Stands in for video-codec compression on stills.
fn compression_proxy(img: &Image, qstep: f64) -> Image {
    const B: usize = 8;
    let mut out = img.clone();
    let hw = img.height * img.width;
    for c in 0..img.channels {
        for by in (0..img.height).step_by(B) {
            for bx in (0..img.width).step_by(B) {
                let bh = (img.height - by).min(B);
                let bw = (img.width - bx).min(B);
                if bh < 2 || bw < 2 {
                    continue;
                }
                let mut block = vec![0.0; bh * bw];
                for y in 0..bh {
                    for x in 0..bw {
                        block[y * bw + x] =
                            img.pixels[c * hw + (by + y) * img.width + bx + x];
                    }
                }
                let mut coeffs = dct2(&block, bh, bw);
                for v in &mut coeffs {
                    *v = (*v / qstep).round() * qstep;
                }
                let back = idct2(&coeffs, bh, bw);
                for y in 0..bh {
                    for x in 0..bw {
                        out.pixels[c * hw + (by + y) * img.width + bx + x] =
                            back[y * bw + x].clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    out
}

/// Apply a corruption. Pure in (img, spec, seed); level 0 returns the input
/// unchanged, bit-exactly.
pub fn corrupt(img: &Image, spec: CorruptionSpec, seed: u64) -> Result<Image, ImageError> {
    if spec.intensity_level > 5 {
        return Err(ImageError::BadLevel {
            level: spec.intensity_level,
        });
    }
    if spec.intensity_level == 0 {
        return Ok(img.clone());
    }
    let idx = (spec.intensity_level - 1) as usize;
    let mut rng = Rng::derive(
        seed,
        stream_hash(spec.kind.name()) ^ u64::from(spec.intensity_level),
    );
    Ok(match spec.kind {
        CorruptionKind::Saturation => saturate(img, SATURATION_FACTOR[idx]),
        CorruptionKind::Contrast => contrast(img, CONTRAST_FACTOR[idx]),
        CorruptionKind::Blockwise => blockwise(img, BLOCKWISE_COUNT[idx], &mut rng),
        CorruptionKind::GaussianNoise => gaussian_noise(img, NOISE_SIGMA[idx], &mut rng),
        CorruptionKind::Blur => blur(img, BLUR_SIGMA[idx]),
        CorruptionKind::Pixelation => pixelate(img, PIXELATION_BLOCK[idx]),
        CorruptionKind::CompressionProxy => compression_proxy(img, COMPRESSION_QSTEP[idx]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noisy_image(seed: u64) -> Image {
        let mut rng = Rng::from_seed(seed);
        let pixels: Vec<f64> = (0..3 * 24 * 24).map(|_| rng.uniform()).collect();
        Image::new(3, 24, 24, pixels)
    }

    #[test]
    fn level_zero_is_bit_exact_identity() {
        let img = noisy_image(1);
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec {
                kind,
                intensity_level: 0,
            };
            assert_eq!(corrupt(&img, spec, 99).unwrap(), img, "{kind:?}");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let img = noisy_image(2);
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec {
                kind,
                intensity_level: 3,
            };
            let a = corrupt(&img, spec, 7).unwrap();
            let b = corrupt(&img, spec, 7).unwrap();
            assert_eq!(a, b, "{kind:?} not reproducible");
            if !matches!(
                kind,
                CorruptionKind::Saturation | CorruptionKind::Contrast | CorruptionKind::Blur
            ) {
                // stochastic kinds must actually depend on the seed
                if matches!(kind, CorruptionKind::Blockwise | CorruptionKind::GaussianNoise) {
                    let c = corrupt(&img, spec, 8).unwrap();
                    assert_ne!(a, c, "{kind:?} ignored the seed");
                }
            }
        }
    }

    #[test]
    fn saturation_factor_one_identity() {
        let img = noisy_image(3);
        assert_eq!(saturate(&img, 1.0), img);
    }

    #[test]
    fn pixelation_matches_block_average_oracle() {
        let img = noisy_image(4);
        for level in 1..=5u32 {
            let block = PIXELATION_BLOCK[(level - 1) as usize];
            let out = corrupt(
                &img,
                CorruptionSpec {
                    kind: CorruptionKind::Pixelation,
                    intensity_level: level,
                },
                0,
            )
            .unwrap();
            // direct block-average oracle
            let hw = img.height * img.width;
            for c in 0..3 {
                for by in (0..img.height).step_by(block) {
                    for bx in (0..img.width).step_by(block) {
                        let y_end = (by + block).min(img.height);
                        let x_end = (bx + block).min(img.width);
                        let mut sum = 0.0;
                        let mut n = 0;
                        for y in by..y_end {
                            for x in bx..x_end {
                                sum += img.pixels[c * hw + y * img.width + x];
                                n += 1;
                            }
                        }
                        let avg = sum / n as f64;
                        for y in by..y_end {
                            for x in bx..x_end {
                                assert!(
                                    (out.pixels[c * hw + y * img.width + x] - avg).abs() < 1e-12
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn bad_level_rejected() {
        let img = noisy_image(5);
        let err = corrupt(
            &img,
            CorruptionSpec {
                kind: CorruptionKind::Blur,
                intensity_level: 6,
            },
            0,
        )
        .unwrap_err();
        assert!(matches!(err, ImageError::BadLevel { level: 6 }));
    }

    #[test]
    fn severity_increases_distortion() {
        let img = noisy_image(6);
        let mut last = 0.0;
        for level in 1..=5u32 {
            let out = corrupt(
                &img,
                CorruptionSpec {
                    kind: CorruptionKind::Contrast,
                    intensity_level: level,
                },
                0,
            )
            .unwrap();
            let dist: f64 = img
                .pixels
                .iter()
                .zip(&out.pixels)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!(dist > last, "level {level} not more distorted");
            last = dist;
        }
    }
}
