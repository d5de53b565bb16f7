//! Image ingestion and preprocessing: PGM/PNG loading, projection-profile
//! deskew, cursive deslant, the resize-pad-standardize step that feeds the
//! models, and seeded affine augmentation.
//!
//! Pixels are luminance in `[0,1]` with 0 = ink and 1 = paper; operations
//! that reason about "ink mass" use `1 - pixel`.

use crate::numerics::Tensor;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

/// 2-D luminance raster in `[0,1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new_white(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![1.0; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch {
                op: "image pixels",
                left: vec![width, height],
                right: vec![pixels.len()],
            });
        }
        if pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Contract("pixel outside [0,1]".into()));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Ink mass at a pixel: 1 for black, 0 for paper.
    pub fn ink(&self, x: usize, y: usize) -> f64 {
        1.0 - self.get(x, y)
    }

    pub fn total_ink(&self) -> f64 {
        self.pixels.iter().map(|p| 1.0 - p).sum()
    }

    /// Bilinear sample at a fractional position; outside reads as paper.
    pub fn sample(&self, fx: f64, fy: f64) -> f64 {
        if fx < -1.0 || fy < -1.0 || fx > self.width as f64 || fy > self.height as f64 {
            return 1.0;
        }
        let x0 = fx.floor();
        let y0 = fy.floor();
        let dx = fx - x0;
        let dy = fy - y0;
        let px = |xi: i64, yi: i64| -> f64 {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                1.0
            } else {
                self.pixels[yi as usize * self.width + xi as usize]
            }
        };
        let (x0, y0) = (x0 as i64, y0 as i64);
        px(x0, y0) * (1.0 - dx) * (1.0 - dy)
            + px(x0 + 1, y0) * dx * (1.0 - dy)
            + px(x0, y0 + 1) * (1.0 - dx) * dy
            + px(x0 + 1, y0 + 1) * dx * dy
    }
}

// ── file formats ─────────────────────────────────────────────────────

/// Writes binary PGM (P5, maxval 255). Byte-exact: the same image always
/// produces the same file.
pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(img.width * img.height + 32);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", img.width, img.height).as_bytes());
    out.extend(img.pixels.iter().map(|&p| (p * 255.0).round() as u8));
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let parse_err = |msg: &str| Error::Parse {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };

    let mut magic = [0u8; 2];
    reader.read_exact(&mut magic)?;
    if &magic != b"P5" {
        return Err(parse_err("not a binary PGM (expected P5)"));
    }
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        let mut token = Vec::new();
        loop {
            let mut byte = [0u8; 1];
            reader.read_exact(&mut byte)?;
            match byte[0] {
                b'#' => {
                    let mut comment = Vec::new();
                    reader.read_until(b'\n', &mut comment)?;
                }
                b' ' | b'\t' | b'\r' | b'\n' => {
                    if !token.is_empty() {
                        break;
                    }
                }
                d => token.push(d),
            }
        }
        let text = String::from_utf8(token).map_err(|_| parse_err("bad header token"))?;
        fields.push(
            text.parse::<usize>()
                .map_err(|_| parse_err("bad header number"))?,
        );
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(parse_err("only maxval 255 is supported"));
    }
    let mut data = vec![0u8; width * height];
    reader.read_exact(&mut data)?;
    GrayImage::from_pixels(
        width,
        height,
        data.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

/// Reads an 8-bit grayscale PNG.
pub fn read_png(path: &Path) -> Result<GrayImage> {
    let parse_err = |msg: String| Error::Parse {
        path: path.display().to_string(),
        msg,
    };
    let file = std::fs::File::open(path)?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| parse_err(format!("png: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| parse_err(format!("png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight || info.color_type != png::ColorType::Grayscale {
        return Err(parse_err(format!(
            "expected 8-bit grayscale, got {:?} {:?}",
            info.bit_depth, info.color_type
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    GrayImage::from_pixels(w, h, buf[..w * h].iter().map(|&b| b as f64 / 255.0).collect())
}

/// Dispatches on the file extension: `.pgm` or `.png`.
pub fn read_image(path: &Path) -> Result<GrayImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") | Some("PGM") => read_pgm(path),
        Some("png") | Some("PNG") => read_png(path),
        other => Err(Error::Parse {
            path: path.display().to_string(),
            msg: format!("unsupported image extension {other:?}"),
        }),
    }
}

// ── geometry ─────────────────────────────────────────────────────────

/// Rotates about the center by `degrees` (counterclockwise positive in the
/// usual top-left-origin raster sense), bilinear sampling, white fill.
pub fn rotate(img: &GrayImage, degrees: f64) -> GrayImage {
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut out = GrayImage::new_white(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // inverse rotation of the destination point
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            out.set(x, y, img.sample(sx, sy));
        }
    }
    out
}

/// Horizontal shear about the vertical center: rows above the middle shift
/// right by `factor` times their distance from it.
pub fn shear_x(img: &GrayImage, factor: f64) -> GrayImage {
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut out = GrayImage::new_white(img.width, img.height);
    for y in 0..img.height {
        let shift = factor * (cy - y as f64);
        for x in 0..img.width {
            out.set(x, y, img.sample(x as f64 - shift, y as f64));
        }
    }
    out
}

/// Estimates the skew of text by sweeping rotations in 0.5° steps within
/// `±max_angle_deg` and maximizing the variance of the horizontal ink
/// projection. Returns the corrected image and the estimated angle that had
/// been applied (the correction rotates by its negation). Blank images come
/// back unchanged with angle 0.
pub fn deskew(img: &GrayImage, max_angle_deg: f64) -> Result<(GrayImage, f64)> {
    if !(0.0..=45.0).contains(&max_angle_deg) {
        return Err(Error::Config(format!(
            "deskew max angle {max_angle_deg} outside [0, 45]"
        )));
    }
    if img.total_ink() <= 1e-9 {
        return Ok((img.clone(), 0.0));
    }
    let steps = (max_angle_deg / 0.5).floor() as i64;
    let mut best_theta = 0.0;
    let mut best_var = rotated_profile_variance(img, 0.0);
    for i in 1..=steps {
        for sign in [1.0, -1.0] {
            let theta = sign * i as f64 * 0.5;
            let var = rotated_profile_variance(img, theta);
            if var > best_var {
                best_var = var;
                best_theta = theta;
            }
        }
    }
    Ok((rotate(img, best_theta), -best_theta))
}

/// Variance of the row-ink histogram the image would have after rotating
/// by `theta`, via forward binning (no resampling).
fn rotated_profile_variance(img: &GrayImage, theta: f64) -> f64 {
    let rad = theta.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut profile = vec![0.0f64; img.height];
    for y in 0..img.height {
        for x in 0..img.width {
            let ink = 1.0 - img.pixels[y * img.width + x];
            if ink <= 0.0 {
                continue;
            }
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let dest_y = cy + sin * dx + cos * dy;
            let row = dest_y.round();
            if row >= 0.0 && (row as usize) < img.height {
                profile[row as usize] += ink;
            }
        }
    }
    variance(&profile)
}

fn variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Shear correction for cursive slant: sweeps factors in `[-1, 1]` step 0.1
/// and keeps the one maximizing the contiguous-ink-run statistic.
pub fn deslant(img: &GrayImage) -> GrayImage {
    deslant_with_shear(img).0
}

/// As [`deslant`], also returning the selected shear factor.
pub fn deslant_with_shear(img: &GrayImage) -> (GrayImage, f64) {
    if img.total_ink() <= 1e-9 {
        return (img.clone(), 0.0);
    }
    let mut best_factor = 0.0;
    let mut best_score = column_run_score(img);
    for i in 1..=10 {
        for sign in [1.0, -1.0] {
            let factor = sign * i as f64 * 0.1;
            let candidate = shear_x(img, factor);
            let score = column_run_score(&candidate);
            if score > best_score {
                best_score = score;
                best_factor = factor;
            }
        }
    }
    (shear_x(img, best_factor), best_factor)
}

/// Deslant statistic: per column, the squared ink-pixel count when the
/// column's ink forms one contiguous vertical run, else zero. Upright
/// strokes concentrate ink in few tall unbroken columns.
pub fn column_run_score(img: &GrayImage) -> f64 {
    let mut score = 0.0;
    for x in 0..img.width {
        let mut count = 0usize;
        let mut first = None;
        let mut last = 0usize;
        for y in 0..img.height {
            if img.get(x, y) < 0.5 {
                count += 1;
                if first.is_none() {
                    first = Some(y);
                }
                last = y;
            }
        }
        if count > 0 {
            let span = last - first.unwrap() + 1;
            if span == count {
                score += (count * count) as f64;
            }
        }
    }
    score
}

/// Aspect-preserving scale into a `target_w`×`target_h` white canvas,
/// pasted at the top-left.
pub fn resize_pad(img: &GrayImage, target_w: usize, target_h: usize) -> GrayImage {
    let fx = target_w as f64 / img.width as f64;
    let fy = target_h as f64 / img.height as f64;
    let f = fx.min(fy);
    let new_w = ((img.width as f64 * f).round() as usize).clamp(1, target_w);
    let new_h = ((img.height as f64 * f).round() as usize).clamp(1, target_h);
    let mut out = GrayImage::new_white(target_w, target_h);
    for y in 0..new_h {
        for x in 0..new_w {
            let sx = (x as f64 + 0.5) / f - 0.5;
            let sy = (y as f64 + 0.5) / f - 0.5;
            out.set(x, y, img.sample(sx, sy));
        }
    }
    out
}

/// Standardizes gray values to zero mean and unit variance, as a
/// `[height, width]` tensor. A uniform image maps to all zeros.
pub fn standardize(img: &GrayImage) -> Tensor {
    let n = img.pixels.len() as f64;
    let mean = img.pixels.iter().sum::<f64>() / n;
    let var = img.pixels.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    Tensor::from_vec(
        vec![img.height, img.width],
        img.pixels.iter().map(|p| (p - mean) / std).collect(),
    )
    .unwrap()
}

/// The full model input transform: fit into the target canvas, then
/// standardize.
pub fn normalize_to_model(img: &GrayImage, target_w: usize, target_h: usize) -> Tensor {
    standardize(&resize_pad(img, target_w, target_h))
}

/// Random affine augmentation emulating handwriting variation, fully
/// determined by `seed`: horizontal scale in [0.75, 1.25], vertical scale
/// in [0.9, 1.1], shear in [-0.3, 0.3], translation within ±2 px.
pub fn augment(img: &GrayImage, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sx: f64 = rng.gen_range(0.75..=1.25);
    let sy: f64 = rng.gen_range(0.9..=1.1);
    let shear: f64 = rng.gen_range(-0.3..=0.3);
    let tx: f64 = rng.gen_range(-2.0..=2.0);
    let ty: f64 = rng.gen_range(-2.0..=2.0);
    affine(img, sx, sy, shear, tx, ty)
}

/// Forward map: `x' = sx·dx + shear·dy + tx`, `y' = sy·dy + ty` about the
/// image center; sampled by its inverse with white fill.
pub fn affine(img: &GrayImage, sx: f64, sy: f64, shear: f64, tx: f64, ty: f64) -> GrayImage {
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut out = GrayImage::new_white(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let dy = (y as f64 - cy - ty) / sy;
            let dx = (x as f64 - cx - tx - shear * dy) / sx;
            out.set(x, y, img.sample(cx + dx, cy + dy));
        }
    }
    out
}

/// 3×3 median filter for impulse noise; not part of the default pipeline.
pub fn median_filter_3x3(img: &GrayImage) -> GrayImage {
    let mut out = GrayImage::new_white(img.width, img.height);
    let mut window = [0.0f64; 9];
    for y in 0..img.height {
        for x in 0..img.width {
            let mut n = 0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (sx, sy) = (x as i64 + dx, y as i64 + dy);
                    window[n] = if sx < 0 || sy < 0 || sx >= img.width as i64 || sy >= img.height as i64
                    {
                        1.0
                    } else {
                        img.get(sx as usize, sy as usize)
                    };
                    n += 1;
                }
            }
            window.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out.set(x, y, window[4]);
        }
    }
    out
}

/// Sum of ink per row.
pub fn row_ink_profile(img: &GrayImage) -> Vec<f64> {
    (0..img.height)
        .map(|y| (0..img.width).map(|x| img.ink(x, y)).sum())
        .collect()
}

/// Sum of ink per column.
pub fn col_ink_profile(img: &GrayImage) -> Vec<f64> {
    (0..img.width)
        .map(|x| (0..img.height).map(|y| img.ink(x, y)).sum())
        .collect()
}
