//! Histogram-projection segmentation: a deskewed text block is cut into
//! line boxes by the horizontal ink profile, and each line into word boxes
//! by the vertical profile. Rows or columns whose ink falls below a small
//! fraction of the maximum count as gaps; gap runs shorter than the minimum
//! do not split.

use crate::imaging::{col_ink_profile, row_ink_profile, GrayImage};

/// Axis-aligned pixel rectangle, `w`/`h` at least 1, within image bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// Intersection-over-union with another box.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = self.x.max(other.x);
        let iy = self.y.max(other.y);
        let ix2 = self.right().min(other.right());
        let iy2 = self.bottom().min(other.bottom());
        if ix2 <= ix || iy2 <= iy {
            return 0.0;
        }
        let inter = ((ix2 - ix) * (iy2 - iy)) as f64;
        inter / ((self.area() + other.area()) as f64 - inter)
    }
}

/// Thresholds for the projection segmentation. `ink_threshold_frac` is the
/// fraction of the peak profile value below which a row/column is a gap.
#[derive(Debug, Clone, Copy)]
pub struct SegmentConfig {
    pub ink_threshold_frac: f64,
    pub min_gap_rows: usize,
    pub min_gap_cols: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            ink_threshold_frac: 0.02,
            min_gap_rows: 3,
            min_gap_cols: 6,
        }
    }
}

/// Splits a page into line boxes, top to bottom. Blank images produce none.
pub fn segment_lines(img: &GrayImage, min_gap_rows: usize) -> Vec<BoundingBox> {
    segment_lines_with(
        img,
        &SegmentConfig {
            min_gap_rows,
            ..SegmentConfig::default()
        },
    )
}

pub fn segment_lines_with(img: &GrayImage, cfg: &SegmentConfig) -> Vec<BoundingBox> {
    let profile = row_ink_profile(img);
    let bands = profile_bands(&profile, cfg.ink_threshold_frac, cfg.min_gap_rows);
    bands
        .into_iter()
        .filter_map(|(y0, y1)| {
            // trim to the ink's column extent within the band
            let (x0, x1) = ink_extent_cols(img, y0, y1)?;
            Some(BoundingBox {
                x: x0,
                y: y0,
                w: x1 - x0 + 1,
                h: y1 - y0 + 1,
            })
        })
        .collect()
}

/// Splits a single line image into word boxes, left to right.
pub fn segment_words(line: &GrayImage, min_gap_cols: usize) -> Vec<BoundingBox> {
    segment_words_with(
        line,
        &SegmentConfig {
            min_gap_cols,
            ..SegmentConfig::default()
        },
    )
}

pub fn segment_words_with(line: &GrayImage, cfg: &SegmentConfig) -> Vec<BoundingBox> {
    let profile = col_ink_profile(line);
    let bands = profile_bands(&profile, cfg.ink_threshold_frac, cfg.min_gap_cols);
    bands
        .into_iter()
        .filter_map(|(x0, x1)| {
            let (y0, y1) = ink_extent_rows(line, x0, x1)?;
            Some(BoundingBox {
                x: x0,
                y: y0,
                w: x1 - x0 + 1,
                h: y1 - y0 + 1,
            })
        })
        .collect()
}

/// Lines, then words within each line, with word boxes in page coordinates.
pub fn segment_page(img: &GrayImage, cfg: &SegmentConfig) -> Vec<(BoundingBox, Vec<BoundingBox>)> {
    segment_lines_with(img, cfg)
        .into_iter()
        .map(|line_box| {
            let line_img = crop(img, &line_box);
            let words = segment_words_with(&line_img, cfg)
                .into_iter()
                .map(|w| BoundingBox {
                    x: w.x + line_box.x,
                    y: w.y + line_box.y,
                    w: w.w,
                    h: w.h,
                })
                .collect();
            (line_box, words)
        })
        .collect()
}

pub fn crop(img: &GrayImage, b: &BoundingBox) -> GrayImage {
    let mut out = GrayImage::new_white(b.w, b.h);
    for y in 0..b.h {
        for x in 0..b.w {
            out.set(x, y, img.get(b.x + x, b.y + y));
        }
    }
    out
}

/// Maximal runs of above-threshold profile entries; runs separated by gap
/// runs shorter than `min_gap` are merged.
fn profile_bands(profile: &[f64], threshold_frac: f64, min_gap: usize) -> Vec<(usize, usize)> {
    let max = profile.iter().cloned().fold(0.0, f64::max);
    if max <= 1e-9 {
        return Vec::new();
    }
    let threshold = threshold_frac * max;
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for (i, &v) in profile.iter().enumerate() {
        if v > threshold {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            runs.push((s, i - 1));
        }
    }
    if let Some(s) = start {
        runs.push((s, profile.len() - 1));
    }
    // merge runs split by gaps shorter than min_gap
    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(runs.len());
    for run in runs {
        match merged.last_mut() {
            Some(last) if run.0 - last.1 - 1 < min_gap => last.1 = run.1,
            _ => merged.push(run),
        }
    }
    merged
}

fn ink_extent_cols(img: &GrayImage, y0: usize, y1: usize) -> Option<(usize, usize)> {
    let mut first = None;
    let mut last = 0;
    for x in 0..img.width() {
        let ink: f64 = (y0..=y1).map(|y| img.ink(x, y)).sum();
        if ink > 1e-6 {
            if first.is_none() {
                first = Some(x);
            }
            last = x;
        }
    }
    first.map(|f| (f, last))
}

fn ink_extent_rows(img: &GrayImage, x0: usize, x1: usize) -> Option<(usize, usize)> {
    let mut first = None;
    let mut last = 0;
    for y in 0..img.height() {
        let ink: f64 = (x0..=x1).map(|x| img.ink(x, y)).sum();
        if ink > 1e-6 {
            if first.is_none() {
                first = Some(y);
            }
            last = y;
        }
    }
    first.map(|f| (f, last))
}
