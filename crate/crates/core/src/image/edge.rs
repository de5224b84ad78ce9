//! Edge and frequency operators feeding the edge branch: Sobel, Canny,
//! Laplacian-of-Gaussian, Marr-Hildreth zero crossings, and a 2D DCT
//! magnitude map. Convolutions use reflect padding; outputs are min-max
//! normalized single-channel maps.

use super::{convolve_reflect, gaussian_blur_plane, min_max_normalize, Image};
use crate::error::ImageError;
use crate::tensor::linalg::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OperatorKind {
    Sobel,
    Canny,
    LoG,
    MarrHildreth,
    Dct,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 5] = [
        OperatorKind::Sobel,
        OperatorKind::Canny,
        OperatorKind::LoG,
        OperatorKind::MarrHildreth,
        OperatorKind::Dct,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::Sobel => "sobel",
            OperatorKind::Canny => "canny",
            OperatorKind::LoG => "log",
            OperatorKind::MarrHildreth => "marr_hildreth",
            OperatorKind::Dct => "dct",
        }
    }

    pub fn parse(s: &str) -> Option<OperatorKind> {
        match s {
            "sobel" => Some(OperatorKind::Sobel),
            "canny" => Some(OperatorKind::Canny),
            "log" => Some(OperatorKind::LoG),
            "marr_hildreth" | "mh" => Some(OperatorKind::MarrHildreth),
            "dct" => Some(OperatorKind::Dct),
            _ => None,
        }
    }
}

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Canny thresholds as fractions of the max gradient magnitude, and the
/// Gaussian pre-smooth sigma.
pub const CANNY_LOW_FRAC: f64 = 0.1;
pub const CANNY_HIGH_FRAC: f64 = 0.2;
pub const CANNY_SIGMA: f64 = 1.4;
/// Sigma of the Laplacian-of-Gaussian kernel (7x7 support).
pub const LOG_SIGMA: f64 = 1.0;

/// Raw directional Sobel responses (cross-correlation convention) and the
/// gradient magnitude, before any normalization.
pub fn sobel_raw(gray: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let gx = convolve_reflect(gray, h, w, &SOBEL_X, 3, 3);
    let gy = convolve_reflect(gray, h, w, &SOBEL_Y, 3, 3);
    let mag = gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .collect();
    (gx, gy, mag)
}

/// Centered Laplacian-of-Gaussian kernel with the given sigma, zero-sum.
pub fn log_kernel(sigma: f64) -> (Vec<f64>, usize) {
    let radius = (3.0 * sigma).ceil() as isize;
    let size = (2 * radius + 1) as usize;
    let mut k = vec![0.0; size * size];
    let s2 = sigma * sigma;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let r2 = (dx * dx + dy * dy) as f64;
            let v = (r2 - 2.0 * s2) / (s2 * s2) * (-r2 / (2.0 * s2)).exp();
            k[((dy + radius) as usize) * size + (dx + radius) as usize] = v;
        }
    }
    // enforce zero DC response so constant images map to exactly zero
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    for v in &mut k {
        *v -= mean;
    }
    (k, size)
}

/// Raw LoG response before normalization.
pub fn log_raw(gray: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (k, size) = log_kernel(LOG_SIGMA);
    convolve_reflect(gray, h, w, &k, size, size)
}

fn check_support(img: &Image, support: usize) -> Result<(), ImageError> {
    if img.height < support || img.width < support {
        return Err(ImageError::TooSmall {
            height: img.height,
            width: img.width,
            support,
        });
    }
    Ok(())
}

/// Orthonormal 2D DCT-II of one plane: C = T · X · Tᵀ.
pub fn dct2(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let t_h = dct_matrix(h);
    let t_w = dct_matrix(w);
    let mut tmp = vec![0.0; h * w];
    gemm(h, h, w, 1.0, &t_h, false, plane, false, 0.0, &mut tmp);
    let mut out = vec![0.0; h * w];
    gemm(h, w, w, 1.0, &tmp, false, &t_w, true, 0.0, &mut out);
    out
}

/// Inverse of the orthonormal 2D DCT-II: X = Tᵀ · C · T.
pub fn idct2(coeffs: &[f64], h: usize, w: usize) -> Vec<f64> {
    let t_h = dct_matrix(h);
    let t_w = dct_matrix(w);
    let mut tmp = vec![0.0; h * w];
    gemm(h, h, w, 1.0, &t_h, true, coeffs, false, 0.0, &mut tmp);
    let mut out = vec![0.0; h * w];
    gemm(h, w, w, 1.0, &tmp, false, &t_w, false, 0.0, &mut out);
    out
}

fn dct_matrix(n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    let norm0 = (1.0 / n as f64).sqrt();
    let norm = (2.0 / n as f64).sqrt();
    for k in 0..n {
        for x in 0..n {
            let c = (std::f64::consts::PI * (2 * x + 1) as f64 * k as f64 / (2.0 * n as f64)).cos();
            t[k * n + x] = if k == 0 { norm0 * c } else { norm * c };
        }
    }
    t
}

/// Apply one operator to an RGB image, producing a normalized
/// single-channel map.
pub fn edge_transform(img: &Image, op: OperatorKind) -> Result<Image, ImageError> {
    if img.channels != 3 {
        return Err(ImageError::ChannelMismatch {
            expected: 3,
            got: img.channels,
        });
    }
    let gray = img.to_gray();
    let (h, w) = (img.height, img.width);
    let mut map = match op {
        OperatorKind::Sobel => {
            check_support(img, 3)?;
            sobel_raw(&gray, h, w).2
        }
        OperatorKind::Canny => {
            check_support(img, 3)?;
            canny(&gray, h, w)
        }
        OperatorKind::LoG => {
            let (_, size) = log_kernel(LOG_SIGMA);
            check_support(img, size)?;
            log_raw(&gray, h, w)
        }
        OperatorKind::MarrHildreth => {
            let (_, size) = log_kernel(LOG_SIGMA);
            check_support(img, size)?;
            let resp = log_raw(&gray, h, w);
            zero_crossings(&resp, h, w)
        }
        OperatorKind::Dct => {
            check_support(img, 3)?;
            dct2(&gray, h, w).iter().map(|c| (1.0 + c.abs()).ln()).collect()
        }
    };
    min_max_normalize(&mut map);
    Ok(Image::new(1, h, w, map))
}

/// Relative gate below which a sign flip counts as floating-point noise
/// rather than a zero crossing.
pub const ZERO_CROSSING_GATE: f64 = 1e-6;

/// Binary map of sign changes in a response field: a pixel is a crossing
/// when its horizontal or vertical neighbors have opposite signs and both
/// exceed the noise gate (relative to the response peak).
pub fn zero_crossings(resp: &[f64], h: usize, w: usize) -> Vec<f64> {
    let gate = ZERO_CROSSING_GATE * resp.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    let crossing = |a: f64, b: f64| a * b < 0.0 && a.abs().min(b.abs()) > gate;
    let mut out = vec![0.0; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let horiz = crossing(resp[y * w + x - 1], resp[y * w + x + 1]);
            let vert = crossing(resp[(y - 1) * w + x], resp[(y + 1) * w + x]);
            if horiz || vert {
                out[y * w + x] = 1.0;
            }
        }
    }
    out
}

fn canny(gray: &[f64], h: usize, w: usize) -> Vec<f64> {
    let smooth = gaussian_blur_plane(gray, h, w, CANNY_SIGMA);
    let (gx, gy, mag) = sobel_raw(&smooth, h, w);
    let max_mag = mag.iter().cloned().fold(0.0f64, f64::max);
    if max_mag <= 0.0 {
        return vec![0.0; h * w];
    }
    // non-max suppression along the quantized gradient direction
    let mut thin = vec![0.0; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let m = mag[y * w + x];
            if m <= 0.0 {
                continue;
            }
            let angle = gy[y * w + x].atan2(gx[y * w + x]).to_degrees();
            let a = ((angle + 180.0) % 180.0 + 180.0) % 180.0;
            let (n1, n2) = if !(22.5..157.5).contains(&a) {
                (mag[y * w + x - 1], mag[y * w + x + 1])
            } else if a < 67.5 {
                (mag[(y - 1) * w + x + 1], mag[(y + 1) * w + x - 1])
            } else if a < 112.5 {
                (mag[(y - 1) * w + x], mag[(y + 1) * w + x])
            } else {
                (mag[(y - 1) * w + x - 1], mag[(y + 1) * w + x + 1])
            };
            if m >= n1 && m >= n2 {
                thin[y * w + x] = m;
            }
        }
    }
    let low = CANNY_LOW_FRAC * max_mag;
    let high = CANNY_HIGH_FRAC * max_mag;
    // hysteresis: strong pixels seed a flood fill through weak neighbors
    let mut state = vec![0u8; h * w]; // 0 none, 1 weak, 2 strong
    let mut stack = Vec::new();
    for i in 0..h * w {
        if thin[i] >= high {
            state[i] = 2;
            stack.push(i);
        } else if thin[i] >= low {
            state[i] = 1;
        }
    }
    let mut out = vec![0.0; h * w];
    while let Some(i) = stack.pop() {
        out[i] = 1.0;
        let (y, x) = (i / w, i % w);
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                if ny >= 0 && ny < h as i32 && nx >= 0 && nx < w as i32 {
                    let j = ny as usize * w + nx as usize;
                    if state[j] == 1 {
                        state[j] = 2;
                        stack.push(j);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_sobel_all_zero_raw() {
        let img = Image::constant(3, 8, 8, 0.4);
        let (_, _, mag) = sobel_raw(&img.to_gray(), 8, 8);
        assert!(mag.iter().all(|&v| v.abs() < 1e-12));
        // and the normalized output collapses to zeros
        let out = edge_transform(&img, OperatorKind::Sobel).unwrap();
        assert!(out.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_sobel_x_interior_response() {
        // I(x,y) = x/W: cross-correlation with the Sobel-x kernel sums
        // (1+2+1) * ((x+1)-(x-1))/W = 8/W on the interior.
        let w = 16usize;
        let h = 8usize;
        let pixels: Vec<f64> = (0..h)
            .flat_map(|_| (0..w).map(|x| x as f64 / w as f64))
            .collect();
        let (gx, _, _) = sobel_raw(&pixels, h, w);
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                assert!(
                    (gx[y * w + x] - 8.0 / w as f64).abs() < 1e-12,
                    "at ({y},{x}): {}",
                    gx[y * w + x]
                );
            }
        }
    }

    #[test]
    fn marr_hildreth_step_crossings_confined() {
        // 8x8 with a vertical step between columns 3 and 4: crossings may
        // appear only in the band {3,4,5} around the step. The expected
        // support is derived independently from raw LoG sign changes.
        let (h, w) = (8usize, 8usize);
        let step_col = 4usize;
        let pixels: Vec<f64> = (0..h)
            .flat_map(|_| (0..w).map(|x| if x >= step_col { 1.0 } else { 0.0 }))
            .collect();
        let img = Image::new(3, h, w, [pixels.clone(), pixels.clone(), pixels.clone()].concat());
        let out = edge_transform(&img, OperatorKind::MarrHildreth).unwrap();

        // independent oracle: direct LoG evaluation + gated sign-change scan
        let (k, size) = log_kernel(LOG_SIGMA);
        let gray = img.to_gray();
        let resp = convolve_reflect(&gray, h, w, &k, size, size);
        let gate =
            ZERO_CROSSING_GATE * resp.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let opposite = |a: f64, b: f64| a * b < 0.0 && a.abs().min(b.abs()) > gate;
        let mut any = false;
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let horiz = opposite(resp[y * w + x - 1], resp[y * w + x + 1]);
                let vert = opposite(resp[(y - 1) * w + x], resp[(y + 1) * w + x]);
                let expect = if horiz || vert { 1.0 } else { 0.0 };
                assert_eq!(out.get(0, y, x), expect, "mismatch at ({y},{x})");
                if expect > 0.0 {
                    any = true;
                    assert!(
                        (step_col as isize - 1..=step_col as isize + 1)
                            .contains(&(x as isize)),
                        "crossing outside step band at ({y},{x})"
                    );
                }
            }
        }
        assert!(any, "no zero crossings detected along the step");
    }

    #[test]
    fn dct_roundtrip() {
        let mut rng = crate::rng::Rng::from_seed(9);
        let (h, w) = (8, 12);
        let plane: Vec<f64> = (0..h * w).map(|_| rng.uniform()).collect();
        let c = dct2(&plane, h, w);
        let back = idct2(&c, h, w);
        for (a, b) in plane.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn canny_finds_step_edge() {
        let (h, w) = (16usize, 16usize);
        let pixels: Vec<f64> = (0..h)
            .flat_map(|_| (0..w).map(|x| if x >= 8 { 0.9 } else { 0.1 }))
            .collect();
        let img = Image::new(3, h, w, [pixels.clone(), pixels.clone(), pixels].concat());
        let out = edge_transform(&img, OperatorKind::Canny).unwrap();
        let edge_cols: Vec<usize> = (0..w)
            .filter(|&x| (2..h - 2).any(|y| out.get(0, y, x) > 0.5))
            .collect();
        assert!(!edge_cols.is_empty());
        assert!(edge_cols.iter().all(|&x| (6..=9).contains(&x)), "{edge_cols:?}");
    }

    #[test]
    fn too_small_image_rejected() {
        let img = Image::constant(3, 4, 4, 0.5);
        assert!(matches!(
            edge_transform(&img, OperatorKind::LoG),
            Err(ImageError::TooSmall { .. })
        ));
    }

    #[test]
    fn operators_produce_unit_range_single_channel() {
        let mut rng = crate::rng::Rng::from_seed(20);
        let pixels: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.uniform()).collect();
        let img = Image::new(3, 16, 16, pixels);
        for op in OperatorKind::ALL {
            let out = edge_transform(&img, op).unwrap();
            assert_eq!(out.channels, 1);
            assert!(out.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)), "{op:?}");
        }
    }
}
