//! Procedural stand-in corpus for the hierarchical forgery benchmark.
//!
//! Five families with known, controllable artifacts:
//!   smooth_real            smooth radial gradients plus low-frequency noise
//!   grid_artifact_gan      real base + periodic checkerboard residual
//!   low_artifact_diffusion real base + very weak broadband high-freq noise
//!   patch_edit_am          real base with one rectangle re-synthesized
//!   blend_boundary_fs      two reals blended inside an elliptical mask
//!
//! Generation is a pure function of (config, seed): every entry derives its
//! own stream, so corpora are byte-identical across runs and machines.

use super::{ForgeryType, ManifestEntry, MethodFamily, SplitKind, TaxonomyLabel};
use crate::config::GenConfig;
use crate::error::CaelError;
use crate::image::{gaussian_blur_plane, write_image, Image};
use crate::rng::{stream_hash, Rng};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SyntheticFamily {
    SmoothReal,
    GridArtifactGan,
    LowArtifactDiffusion,
    PatchEditAm,
    BlendBoundaryFs,
}

impl SyntheticFamily {
    pub const ALL: [SyntheticFamily; 5] = [
        SyntheticFamily::SmoothReal,
        SyntheticFamily::GridArtifactGan,
        SyntheticFamily::LowArtifactDiffusion,
        SyntheticFamily::PatchEditAm,
        SyntheticFamily::BlendBoundaryFs,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SyntheticFamily::SmoothReal => "smooth_real",
            SyntheticFamily::GridArtifactGan => "grid_artifact_gan",
            SyntheticFamily::LowArtifactDiffusion => "low_artifact_diffusion",
            SyntheticFamily::PatchEditAm => "patch_edit_am",
            SyntheticFamily::BlendBoundaryFs => "blend_boundary_fs",
        }
    }

    /// The taxonomy template this family instantiates.
    pub fn label(&self) -> TaxonomyLabel {
        match self {
            SyntheticFamily::SmoothReal => TaxonomyLabel::REAL,
            SyntheticFamily::GridArtifactGan => {
                TaxonomyLabel::fake(ForgeryType::Efs, MethodFamily::Gan, "gridgan")
            }
            SyntheticFamily::LowArtifactDiffusion => {
                TaxonomyLabel::fake(ForgeryType::Efs, MethodFamily::Diffusion, "smoothdiff")
            }
            SyntheticFamily::PatchEditAm => {
                TaxonomyLabel::fake(ForgeryType::Am, MethodFamily::Gan, "patchedit")
            }
            SyntheticFamily::BlendBoundaryFs => {
                TaxonomyLabel::fake(ForgeryType::Fs, MethodFamily::Gan, "blendswap")
            }
        }
    }

    /// The level-4 generator name under this family.
    pub fn generator(&self) -> Option<&'static str> {
        match self.label().forgery {
            None => None,
            Some((_, _, _)) => Some(match self {
                SyntheticFamily::GridArtifactGan => "gridgan",
                SyntheticFamily::LowArtifactDiffusion => "smoothdiff",
                SyntheticFamily::PatchEditAm => "patchedit",
                SyntheticFamily::BlendBoundaryFs => "blendswap",
                SyntheticFamily::SmoothReal => unreachable!(),
            }),
        }
    }
}

fn family_rng(seed: u64, family: SyntheticFamily, index: usize) -> Rng {
    Rng::derive(seed, stream_hash(family.name()) ^ (index as u64).wrapping_mul(0x9E37))
}

/// Smooth synthetic "real": radial gradient blobs plus a few low-frequency
/// cosines per channel.
pub fn smooth_real(h: usize, w: usize, rng: &mut Rng) -> Image {
    let mut pixels = vec![0.0; 3 * h * w];
    let base: [f64; 3] = [
        rng.range(0.3, 0.7),
        rng.range(0.3, 0.7),
        rng.range(0.3, 0.7),
    ];
    // shared blob geometry so channels stay correlated like a photograph
    let blobs: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.range(0.0, h as f64),
                rng.range(0.0, w as f64),
                rng.range(0.25, 0.6) * h as f64,
            )
        })
        .collect();
    let blob_gain: Vec<[f64; 3]> = (0..blobs.len())
        .map(|_| {
            [
                rng.range(-0.25, 0.25),
                rng.range(-0.25, 0.25),
                rng.range(-0.25, 0.25),
            ]
        })
        .collect();
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                rng.range(-2.5, 2.5),
                rng.range(-2.5, 2.5),
                rng.range(0.0, std::f64::consts::TAU),
                [
                    rng.range(-0.06, 0.06),
                    rng.range(-0.06, 0.06),
                    rng.range(-0.06, 0.06),
                ],
            )
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let mut v = base;
            for (bi, (cy, cx, r)) in blobs.iter().enumerate() {
                let d2 = (y as f64 - cy) * (y as f64 - cy) + (x as f64 - cx) * (x as f64 - cx);
                let g = (-d2 / (2.0 * r * r)).exp();
                for c in 0..3 {
                    v[c] += blob_gain[bi][c] * g;
                }
            }
            for (fy, fx, phase, amp) in &waves {
                let arg = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                    + phase;
                let s = arg.sin();
                for c in 0..3 {
                    v[c] += amp[c] * s;
                }
            }
            for c in 0..3 {
                pixels[c * h * w + y * w + x] = v[c].clamp(0.0, 1.0);
            }
        }
    }
    Image::new(3, h, w, pixels)
}

/// Checkerboard residual with the given cell period (4..=8 px), the classic
/// upsampling artifact signature.
fn add_grid_artifact(img: &mut Image, strength: f64, rng: &mut Rng) {
    if strength == 0.0 {
        return;
    }
    let period = 4 + rng.below(5); // 4..=8
    let half = (period / 2).max(1);
    let (oy, ox) = (rng.below(period), rng.below(period));
    let hw = img.height * img.width;
    for y in 0..img.height {
        for x in 0..img.width {
            let sign = if (((y + oy) / half) + ((x + ox) / half)) % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            for c in 0..3 {
                let i = c * hw + y * img.width + x;
                img.pixels[i] = (img.pixels[i] + strength * sign).clamp(0.0, 1.0);
            }
        }
    }
}

/// Weak broadband high-frequency residual: white noise minus its own blur,
/// so only frequencies above the smoothing scale survive.
fn add_highfreq_residual(img: &mut Image, strength: f64, rng: &mut Rng) {
    if strength == 0.0 {
        return;
    }
    let (h, w) = (img.height, img.width);
    let noise: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
    let low = gaussian_blur_plane(&noise, h, w, 1.0);
    let hw = h * w;
    for y in 0..h {
        for x in 0..w {
            let r = strength * (noise[y * w + x] - low[y * w + x]);
            for c in 0..3 {
                let i = c * hw + y * w + x;
                img.pixels[i] = (img.pixels[i] + r).clamp(0.0, 1.0);
            }
        }
    }
}

/// Replace one rectangle with freshly synthesized content, hard-edged.
fn patch_edit(img: &mut Image, strength: f64, rng: &mut Rng) {
    let (h, w) = (img.height, img.width);
    let ph = h / 4 + rng.below(h / 4);
    let pw = w / 4 + rng.below(w / 4);
    let y0 = rng.below(h - ph);
    let x0 = rng.below(w - pw);
    let donor = smooth_real(h, w, rng);
    let hw = h * w;
    for y in y0..y0 + ph {
        for x in x0..x0 + pw {
            for c in 0..3 {
                let i = c * hw + y * w + x;
                img.pixels[i] =
                    (1.0 - strength) * img.pixels[i] + strength * donor.pixels[i];
            }
        }
    }
}

/// Alpha-blend a donor face region inside an ellipse, leaving a visible
/// boundary ring.
fn blend_swap(base: &mut Image, donor: &Image, strength: f64, rng: &mut Rng) {
    let (h, w) = (base.height, base.width);
    let cy = h as f64 * rng.range(0.4, 0.6);
    let cx = w as f64 * rng.range(0.4, 0.6);
    let ry = h as f64 * rng.range(0.25, 0.35);
    let rx = w as f64 * rng.range(0.25, 0.35);
    let ring = 0.12; // relative width of the boundary ring
    let hw = h * w;
    for y in 0..h {
        for x in 0..w {
            let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
            let m = if d <= 1.0 { strength } else { 0.0 };
            let on_ring = ((1.0 - ring)..=1.0).contains(&d);
            for c in 0..3 {
                let i = c * hw + y * w + x;
                let mut v = (1.0 - m) * base.pixels[i] + m * donor.pixels[i];
                if on_ring {
                    v += 0.5 * strength * 0.15;
                }
                base.pixels[i] = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// Synthesize one corpus image. Pure in (cfg, seed, family, index).
pub fn synth_image(cfg: &GenConfig, seed: u64, family: SyntheticFamily, index: usize) -> Image {
    let (h, w) = (cfg.size, cfg.size);
    let mut rng = family_rng(seed, family, index);
    match family {
        SyntheticFamily::SmoothReal => smooth_real(h, w, &mut rng),
        SyntheticFamily::GridArtifactGan => {
            let mut img = smooth_real(h, w, &mut rng);
            add_grid_artifact(&mut img, cfg.gan_strength, &mut rng);
            img
        }
        SyntheticFamily::LowArtifactDiffusion => {
            // much fainter traces of the same upsampling-grid family as the
            // GAN images, buried in broadband high-frequency noise; closer
            // to the reals than the GAN family by construction
            let mut img = smooth_real(h, w, &mut rng);
            add_grid_artifact(&mut img, 0.7 * cfg.diffusion_strength, &mut rng);
            add_highfreq_residual(&mut img, 0.3 * cfg.diffusion_strength, &mut rng);
            img
        }
        SyntheticFamily::PatchEditAm => {
            // base real shared with the corpus entry of the same identity
            let base_index = index % cfg.count_real.max(1);
            let mut base_rng = family_rng(seed, SyntheticFamily::SmoothReal, base_index);
            let mut img = smooth_real(h, w, &mut base_rng);
            patch_edit(&mut img, cfg.am_strength, &mut rng);
            img
        }
        SyntheticFamily::BlendBoundaryFs => {
            let base_index = index % cfg.count_real.max(1);
            let donor_index = (index + 1 + cfg.count_real / 2) % cfg.count_real.max(1);
            let mut base_rng = family_rng(seed, SyntheticFamily::SmoothReal, base_index);
            let mut donor_rng = family_rng(seed, SyntheticFamily::SmoothReal, donor_index);
            let mut img = smooth_real(h, w, &mut base_rng);
            let donor = smooth_real(h, w, &mut donor_rng);
            blend_swap(&mut img, &donor, cfg.fs_strength, &mut rng);
            img
        }
    }
}

/// The manifest-entry skeletons for a generation config (before splitting).
/// Attribute-manipulation and face-swap entries inherit the identity of
/// their base real; entire-face-synthesis families are identity-free.
pub fn plan_entries(cfg: &GenConfig) -> Vec<(SyntheticFamily, usize, ManifestEntry)> {
    let mut out = Vec::new();
    let mut push = |family: SyntheticFamily, count: usize| {
        for i in 0..count {
            let identity = match family {
                SyntheticFamily::SmoothReal => Some(i as u64),
                SyntheticFamily::PatchEditAm | SyntheticFamily::BlendBoundaryFs => {
                    Some((i % cfg.count_real.max(1)) as u64)
                }
                _ => None,
            };
            out.push((
                family,
                i,
                ManifestEntry {
                    path: format!("images/{}_{i:05}.ppm", family.name()),
                    label: family.label(),
                    split: SplitKind::Train,
                    identity,
                },
            ));
        }
    };
    push(SyntheticFamily::SmoothReal, cfg.count_real);
    push(SyntheticFamily::GridArtifactGan, cfg.count_gan);
    push(SyntheticFamily::LowArtifactDiffusion, cfg.count_diffusion);
    push(SyntheticFamily::PatchEditAm, cfg.count_am);
    push(SyntheticFamily::BlendBoundaryFs, cfg.count_fs);
    out
}

/// Generate the corpus on disk: images under `out_dir/images/` plus
/// `out_dir/manifest.tsv` with identity-exclusive splits.
pub fn generate_corpus(
    cfg: &GenConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>, CaelError> {
    let planned = plan_entries(cfg);
    let mut entries: Vec<ManifestEntry> = planned.iter().map(|(_, _, e)| e.clone()).collect();
    super::split_corpus(
        &mut entries,
        (cfg.train_ratio, cfg.val_ratio, cfg.test_ratio),
        seed,
    )
    .map_err(CaelError::Data)?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| CaelError::io(img_dir.display().to_string(), e))?;
    for ((family, index, _), entry) in planned.iter().zip(&entries) {
        let img = synth_image(cfg, seed, *family, *index);
        write_image(&out_dir.join(&entry.path), &img).map_err(CaelError::Image)?;
    }
    let manifest_path = out_dir.join("manifest.tsv");
    super::write_manifest(&manifest_path, &entries).map_err(CaelError::Data)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::spectrum::{annulus_mean, mean_spectrum, ARTIFACT_BAND};

    fn small_cfg() -> GenConfig {
        GenConfig {
            count_real: 12,
            count_gan: 8,
            count_diffusion: 8,
            count_am: 6,
            count_fs: 6,
            size: 32,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_pure_in_seed() {
        let cfg = small_cfg();
        let a = synth_image(&cfg, 5, SyntheticFamily::GridArtifactGan, 3);
        let b = synth_image(&cfg, 5, SyntheticFamily::GridArtifactGan, 3);
        assert_eq!(a, b);
        let c = synth_image(&cfg, 6, SyntheticFamily::GridArtifactGan, 3);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_strength_gan_equals_base_bit_exactly() {
        let mut cfg = small_cfg();
        cfg.gan_strength = 0.0;
        let fake = synth_image(&cfg, 5, SyntheticFamily::GridArtifactGan, 3);
        let mut rng = family_rng(5, SyntheticFamily::GridArtifactGan, 3);
        let base = smooth_real(cfg.size, cfg.size, &mut rng);
        assert_eq!(fake, base);
    }

    #[test]
    fn gan_family_has_elevated_annulus_energy() {
        let cfg = small_cfg();
        let reals: Vec<Image> = (0..8)
            .map(|i| synth_image(&cfg, 2, SyntheticFamily::SmoothReal, i))
            .collect();
        let fakes: Vec<Image> = (0..8)
            .map(|i| synth_image(&cfg, 2, SyntheticFamily::GridArtifactGan, i))
            .collect();
        let real_spec = mean_spectrum(&reals).unwrap();
        let fake_spec = mean_spectrum(&fakes).unwrap();
        let (lo, hi) = ARTIFACT_BAND;
        let real_e = annulus_mean(&real_spec, cfg.size, cfg.size, lo, hi);
        let fake_e = annulus_mean(&fake_spec, cfg.size, cfg.size, lo, hi);
        assert!(
            fake_e > real_e,
            "annulus energy fake {fake_e} vs real {real_e}"
        );
    }

    #[test]
    fn am_and_fs_share_identity_with_base() {
        let cfg = small_cfg();
        let planned = plan_entries(&cfg);
        for (family, index, entry) in &planned {
            match family {
                SyntheticFamily::PatchEditAm | SyntheticFamily::BlendBoundaryFs => {
                    assert_eq!(entry.identity, Some((*index % cfg.count_real) as u64));
                }
                SyntheticFamily::SmoothReal => assert_eq!(entry.identity, Some(*index as u64)),
                _ => assert_eq!(entry.identity, None),
            }
        }
    }

    #[test]
    fn labels_stay_inside_taxonomy_closure() {
        for family in SyntheticFamily::ALL {
            let label = family.label();
            match label.forgery {
                None => {}
                Some((ty, fam, _)) => {
                    // every fake combination is one of EFS/AM/FS x diffusion/gan
                    let ok = matches!(
                        (ty, fam),
                        (ForgeryType::Efs, MethodFamily::Gan)
                            | (ForgeryType::Efs, MethodFamily::Diffusion)
                            | (ForgeryType::Am, MethodFamily::Gan)
                            | (ForgeryType::Am, MethodFamily::Diffusion)
                            | (ForgeryType::Fs, MethodFamily::Gan)
                            | (ForgeryType::Fs, MethodFamily::Diffusion)
                    );
                    assert!(ok);
                }
            }
        }
    }

    #[test]
    fn corpus_written_and_loadable() {
        let dir = std::env::temp_dir().join("cael_synth_test");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let mut cfg = small_cfg();
        cfg.count_real = 8;
        cfg.count_gan = 4;
        cfg.count_diffusion = 0;
        cfg.count_am = 4;
        cfg.count_fs = 0;
        let entries = generate_corpus(&cfg, 11, &dir).unwrap();
        assert_eq!(entries.len(), 16);
        let loaded =
            super::super::load_manifest(&dir.join("manifest.tsv"), Some(&dir)).unwrap();
        assert_eq!(loaded, entries);
    }

    #[test]
    fn empty_counts_give_empty_valid_manifest() {
        let dir = std::env::temp_dir().join("cael_synth_empty");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = GenConfig {
            count_real: 0,
            count_gan: 0,
            count_diffusion: 0,
            count_am: 0,
            count_fs: 0,
            ..GenConfig::default()
        };
        let entries = generate_corpus(&cfg, 1, &dir).unwrap();
        assert!(entries.is_empty());
        let loaded =
            super::super::load_manifest(&dir.join("manifest.tsv"), Some(&dir)).unwrap();
        assert!(loaded.is_empty());
    }
}
