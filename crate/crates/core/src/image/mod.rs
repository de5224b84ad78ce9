//! Images, edge/frequency operators, corruptions, and spectrum analysis.
//!
//! Pixels are f64 in [0,1], stored planar (channel, row, column). Files are
//! binary PPM (P6) for RGB and PGM (P5) for grayscale, 8-bit.

pub mod corrupt;
pub mod edge;
pub mod spectrum;

use crate::error::ImageError;
use std::fs;
use std::io::Write as _;
use std::path::Path;

/// Luma weights for RGB -> gray conversion.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Planar layout: pixels[c*H*W + y*W + x].
    pub pixels: Vec<f64>,
}

impl Image {
    /// Construct, clamping values into [0,1]. Panics on inconsistent sizes;
    /// callers construct images from known-good dimensions.
    pub fn new(channels: usize, height: usize, width: usize, mut pixels: Vec<f64>) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        assert!(height >= 3 && width >= 3, "image must be at least 3x3");
        assert_eq!(pixels.len(), channels * height * width);
        for v in &mut pixels {
            *v = v.clamp(0.0, 1.0);
        }
        Image {
            channels,
            height,
            width,
            pixels,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn constant(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Image::new(channels, height, width, vec![v; channels * height * width])
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.pixels[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    /// Single grayscale plane via the fixed luma weights.
    pub fn to_gray(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.pixels.clone();
        }
        let hw = self.height * self.width;
        let (r, g, b) = (&self.pixels[..hw], &self.pixels[hw..2 * hw], &self.pixels[2 * hw..]);
        (0..hw)
            .map(|i| LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i])
            .collect()
    }

    pub fn clamp_in_place(&mut self) {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Reflect an out-of-range index back into [0, n): (dcba|abcd|dcba).
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Convolve one plane with a centered odd kernel, reflect padding.
pub fn convolve_reflect(
    plane: &[f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    debug_assert_eq!(kernel.len(), kh * kw);
    debug_assert!(kh % 2 == 1 && kw % 2 == 1);
    let (ry, rx) = (kh as isize / 2, kw as isize / 2);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -ry..=ry {
                let sy = reflect_index(y as isize + dy, h);
                for dx in -rx..=rx {
                    let sx = reflect_index(x as isize + dx, w);
                    acc += plane[sy * w + sx]
                        * kernel[((dy + ry) as usize) * kw + (dx + rx) as usize];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Separable Gaussian blur of one plane, reflect padding.
pub fn gaussian_blur_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k = Vec::with_capacity((2 * radius + 1) as usize);
    for d in -radius..=radius {
        k.push((-((d * d) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    // horizontal then vertical
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = reflect_index(x as isize + i as isize - radius, w);
                acc += plane[y * w + sx] * kv;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = reflect_index(y as isize + i as isize - radius, h);
                acc += tmp[sy * w + x] * kv;
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Min-max normalize into [0,1]; constant maps become all zeros.
pub fn min_max_normalize(values: &mut [f64]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    if span <= 0.0 {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v = (*v - lo) / span);
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write binary PPM (P6) for RGB or PGM (P5) for grayscale.
pub fn write_image(path: &Path, img: &Image) -> Result<(), ImageError> {
    let mut buf = Vec::with_capacity(img.pixels.len() + 32);
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    write!(buf, "{magic}\n{} {}\n255\n", img.width, img.height).expect("in-memory write");
    let hw = img.height * img.width;
    for i in 0..hw {
        for c in 0..img.channels {
            buf.push(quantize(img.pixels[c * hw + i]));
        }
    }
    fs::write(path, buf).map_err(|e| ImageError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_image(path: &Path) -> Result<Image, ImageError> {
    let bytes = fs::read(path).map_err(|e| ImageError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let fail = |reason: &str| ImageError::Decode {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Option<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(&bytes).ok_or_else(|| fail("missing magic"))?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        _ => return Err(fail("expected P5 or P6")),
    };
    let width: usize = token(&bytes)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| fail("bad width"))?;
    let height: usize = token(&bytes)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| fail("bad height"))?;
    let maxval: usize = token(&bytes)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| fail("bad maxval"))?;
    if maxval != 255 {
        return Err(fail("only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err(fail("truncated pixel data"));
    }
    let raw = &bytes[pos..pos + need];
    let hw = height * width;
    let mut pixels = vec![0.0; need];
    for i in 0..hw {
        for c in 0..channels {
            pixels[c * hw + i] = raw[i * channels + c] as f64 / 255.0;
        }
    }
    Ok(Image::new(channels, height, width, pixels))
}
