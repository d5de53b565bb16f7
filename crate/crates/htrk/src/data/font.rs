//! Embedded polyline stroke font for the 33 Russian + 9 Kazakh letters.
//!
//! Glyphs are coarse skeletons in a unit box (x right, y down, baseline at
//! y = 1) rasterized with ~2 px strokes. Uppercase renders at full cap
//! height and lowercase at 70% in small-caps style; both cases of every
//! letter share one skeleton. Coarse on purpose: the font exists to
//! exercise rendering, augmentation, segmentation and recognition, not to
//! look like handwriting.

use crate::imaging::GrayImage;

type Stroke = Vec<(f64, f64)>;

struct Glyph {
    strokes: Vec<Stroke>,
    /// Advance width as a fraction of the glyph height.
    width: f64,
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Stroke {
    let n = 14;
    (0..=n)
        .map(|i| {
            let a = i as f64 / n as f64 * std::f64::consts::TAU;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

fn glyph(ch: char) -> Option<Glyph> {
    let s = |strokes: Vec<Stroke>, width: f64| Some(Glyph { strokes, width });
    match ch {
        'а' => s(
            vec![
                vec![(0.05, 1.0), (0.5, 0.0), (0.95, 1.0)],
                vec![(0.22, 0.62), (0.78, 0.62)],
            ],
            0.95,
        ),
        'б' => s(
            vec![
                vec![(0.12, 1.0), (0.12, 0.0), (0.85, 0.0)],
                vec![
                    (0.12, 0.45),
                    (0.62, 0.45),
                    (0.86, 0.6),
                    (0.86, 0.85),
                    (0.62, 1.0),
                    (0.12, 1.0),
                ],
            ],
            0.9,
        ),
        'в' => s(
            vec![
                vec![(0.12, 0.0), (0.12, 1.0)],
                vec![
                    (0.12, 0.0),
                    (0.62, 0.0),
                    (0.8, 0.12),
                    (0.8, 0.36),
                    (0.62, 0.48),
                    (0.12, 0.48),
                ],
                vec![
                    (0.12, 0.5),
                    (0.68, 0.5),
                    (0.87, 0.64),
                    (0.87, 0.86),
                    (0.68, 1.0),
                    (0.12, 1.0),
                ],
            ],
            0.9,
        ),
        'г' => s(vec![vec![(0.85, 0.0), (0.12, 0.0), (0.12, 1.0)]], 0.8),
        'д' => s(
            vec![
                vec![(0.38, 0.0), (0.72, 0.0), (0.78, 0.78)],
                vec![(0.38, 0.0), (0.26, 0.78)],
                vec![(0.08, 0.78), (0.92, 0.78)],
                vec![(0.08, 0.78), (0.08, 0.98)],
                vec![(0.92, 0.78), (0.92, 0.98)],
            ],
            1.0,
        ),
        'е' => s(
            vec![
                vec![(0.85, 0.0), (0.12, 0.0), (0.12, 1.0), (0.85, 1.0)],
                vec![(0.12, 0.5), (0.68, 0.5)],
            ],
            0.85,
        ),
        'ё' => s(
            vec![
                vec![(0.85, 0.22), (0.12, 0.22), (0.12, 1.0), (0.85, 1.0)],
                vec![(0.12, 0.58), (0.68, 0.58)],
                vec![(0.3, 0.0), (0.3, 0.08)],
                vec![(0.62, 0.0), (0.62, 0.08)],
            ],
            0.85,
        ),
        'ж' => s(
            vec![
                vec![(0.5, 0.0), (0.5, 1.0)],
                vec![(0.08, 0.0), (0.5, 0.5), (0.08, 1.0)],
                vec![(0.92, 0.0), (0.5, 0.5), (0.92, 1.0)],
            ],
            1.05,
        ),
        'з' => s(
            vec![
                vec![
                    (0.15, 0.12),
                    (0.3, 0.0),
                    (0.68, 0.0),
                    (0.84, 0.14),
                    (0.84, 0.32),
                    (0.62, 0.46),
                    (0.45, 0.47),
                ],
                vec![
                    (0.45, 0.53),
                    (0.66, 0.54),
                    (0.87, 0.68),
                    (0.87, 0.86),
                    (0.68, 1.0),
                    (0.3, 1.0),
                    (0.13, 0.86),
                ],
            ],
            0.9,
        ),
        'и' => s(
            vec![
                vec![(0.12, 0.0), (0.12, 1.0)],
                vec![(0.88, 0.0), (0.88, 1.0)],
                vec![(0.12, 1.0), (0.88, 0.0)],
            ],
            0.95,
        ),
        'й' => s(
            vec![
                vec![(0.12, 0.2), (0.12, 1.0)],
                vec![(0.88, 0.2), (0.88, 1.0)],
                vec![(0.12, 1.0), (0.88, 0.2)],
                vec![(0.3, 0.0), (0.5, 0.1), (0.7, 0.0)],
            ],
            0.95,
        ),
        'к' => s(
            vec![
                vec![(0.12, 0.0), (0.12, 1.0)],
                vec![(0.82, 0.0), (0.16, 0.52)],
                vec![(0.34, 0.44), (0.85, 1.0)],
            ],
            0.9,
        ),
        'л' => s(vec![vec![(0.08, 1.0), (0.3, 0.0), (0.85, 0.0), (0.85, 1.0)]], 0.9),
        'м' => s(
            vec![vec![
                (0.08, 1.0),
                (0.08, 0.0),
                (0.5, 0.62),
                (0.92, 0.0),
                (0.92, 1.0),
            ]],
            1.05,
        ),
        'н' => s(
            vec![
                vec![(0.12, 0.0), (0.12, 1.0)],
                vec![(0.88, 0.0), (0.88, 1.0)],
                vec![(0.12, 0.5), (0.88, 0.5)],
            ],
            0.95,
        ),
        'о' => s(vec![ellipse(0.5, 0.5, 0.38, 0.48)], 0.95),
        'п' => s(
            vec![vec![(0.12, 1.0), (0.12, 0.0), (0.88, 0.0), (0.88, 1.0)]],
            0.95,
        ),
        'р' => s(
            vec![
                vec![(0.12, 1.0), (0.12, 0.0)],
                vec![
                    (0.12, 0.0),
                    (0.64, 0.0),
                    (0.84, 0.13),
                    (0.84, 0.37),
                    (0.64, 0.5),
                    (0.12, 0.5),
                ],
            ],
            0.9,
        ),
        'с' => s(
            vec![vec![
                (0.82, 0.16),
                (0.62, 0.0),
                (0.32, 0.02),
                (0.13, 0.26),
                (0.13, 0.74),
                (0.32, 0.98),
                (0.62, 1.0),
                (0.82, 0.84),
            ]],
            0.85,
        ),
        'т' => s(
            vec![vec![(0.06, 0.0), (0.94, 0.0)], vec![(0.5, 0.0), (0.5, 1.0)]],
            0.9,
        ),
        'у' => s(
            vec![vec![(0.1, 0.0), (0.52, 0.56)], vec![(0.9, 0.0), (0.2, 1.0)]],
            0.9,
        ),
        'ф' => s(
            vec![vec![(0.5, 0.0), (0.5, 1.0)], ellipse(0.5, 0.5, 0.36, 0.3)],
            1.05,
        ),
        'х' => s(
            vec![vec![(0.1, 0.0), (0.9, 1.0)], vec![(0.9, 0.0), (0.1, 1.0)]],
            0.9,
        ),
        'ц' => s(
            vec![
                vec![(0.12, 0.0), (0.12, 0.92)],
                vec![(0.8, 0.0), (0.8, 0.92)],
                vec![(0.12, 0.92), (0.92, 0.92)],
                vec![(0.92, 0.92), (0.92, 1.0)],
            ],
            0.95,
        ),
        'ч' => s(
            vec![
                vec![(0.12, 0.0), (0.12, 0.4), (0.3, 0.52), (0.84, 0.48)],
                vec![(0.84, 0.0), (0.84, 1.0)],
            ],
            0.9,
        ),
        'ш' => s(
            vec![
                vec![(0.08, 0.0), (0.08, 1.0), (0.92, 1.0), (0.92, 0.0)],
                vec![(0.5, 0.0), (0.5, 1.0)],
            ],
            1.05,
        ),
        'щ' => s(
            vec![
                vec![(0.06, 0.0), (0.06, 0.92)],
                vec![(0.48, 0.0), (0.48, 0.92)],
                vec![(0.88, 0.0), (0.88, 0.92)],
                vec![(0.06, 0.92), (0.94, 0.92)],
                vec![(0.94, 0.92), (0.94, 1.0)],
            ],
            1.1,
        ),
        'ъ' => s(
            vec![
                vec![(0.04, 0.0), (0.3, 0.0)],
                vec![(0.3, 0.0), (0.3, 1.0)],
                vec![
                    (0.3, 0.5),
                    (0.6, 0.5),
                    (0.8, 0.62),
                    (0.8, 0.86),
                    (0.6, 1.0),
                    (0.3, 1.0),
                ],
            ],
            0.9,
        ),
        'ы' => s(
            vec![
                vec![(0.08, 0.0), (0.08, 1.0)],
                vec![
                    (0.08, 0.5),
                    (0.4, 0.5),
                    (0.56, 0.62),
                    (0.56, 0.86),
                    (0.4, 1.0),
                    (0.08, 1.0),
                ],
                vec![(0.92, 0.0), (0.92, 1.0)],
            ],
            1.0,
        ),
        'ь' => s(
            vec![
                vec![(0.16, 0.0), (0.16, 1.0)],
                vec![
                    (0.16, 0.5),
                    (0.53, 0.5),
                    (0.7, 0.62),
                    (0.7, 0.86),
                    (0.53, 1.0),
                    (0.16, 1.0),
                ],
            ],
            0.8,
        ),
        'э' => s(
            vec![
                vec![
                    (0.16, 0.16),
                    (0.34, 0.0),
                    (0.66, 0.0),
                    (0.86, 0.24),
                    (0.86, 0.76),
                    (0.66, 1.0),
                    (0.34, 1.0),
                    (0.16, 0.84),
                ],
                vec![(0.44, 0.5), (0.86, 0.5)],
            ],
            0.9,
        ),
        'ю' => s(
            vec![
                vec![(0.08, 0.0), (0.08, 1.0)],
                vec![(0.08, 0.5), (0.32, 0.5)],
                ellipse(0.64, 0.5, 0.28, 0.48),
            ],
            1.05,
        ),
        'я' => s(
            vec![
                vec![
                    (0.86, 1.0),
                    (0.86, 0.0),
                    (0.3, 0.0),
                    (0.14, 0.13),
                    (0.14, 0.37),
                    (0.3, 0.5),
                    (0.86, 0.5),
                ],
                vec![(0.44, 0.5), (0.1, 1.0)],
            ],
            0.9,
        ),
        // Kazakh letters
        'ә' => s(
            vec![
                vec![
                    (0.82, 0.16),
                    (0.62, 0.0),
                    (0.32, 0.02),
                    (0.13, 0.26),
                    (0.13, 0.74),
                    (0.32, 0.98),
                    (0.62, 1.0),
                    (0.82, 0.84),
                ],
                vec![(0.13, 0.5), (0.62, 0.5)],
            ],
            0.9,
        ),
        'ғ' => s(
            vec![
                vec![(0.85, 0.0), (0.12, 0.0), (0.12, 1.0)],
                vec![(0.0, 0.5), (0.45, 0.5)],
            ],
            0.8,
        ),
        'қ' => s(
            vec![
                vec![(0.12, 0.0), (0.12, 1.0)],
                vec![(0.82, 0.0), (0.16, 0.52)],
                vec![(0.34, 0.44), (0.85, 1.0)],
                vec![(0.85, 1.0), (0.98, 1.0)],
            ],
            0.95,
        ),
        'ң' => s(
            vec![
                vec![(0.12, 0.0), (0.12, 1.0)],
                vec![(0.88, 0.0), (0.88, 1.0)],
                vec![(0.12, 0.5), (0.88, 0.5)],
                vec![(0.88, 1.0), (0.98, 1.0)],
            ],
            1.0,
        ),
        'ө' => s(
            vec![ellipse(0.5, 0.5, 0.38, 0.48), vec![(0.14, 0.5), (0.86, 0.5)]],
            0.95,
        ),
        'ұ' => s(
            vec![
                vec![(0.1, 0.0), (0.5, 0.5)],
                vec![(0.9, 0.0), (0.5, 0.5)],
                vec![(0.5, 0.5), (0.5, 1.0)],
                vec![(0.24, 0.76), (0.76, 0.76)],
            ],
            0.9,
        ),
        'ү' => s(
            vec![
                vec![(0.1, 0.0), (0.5, 0.5)],
                vec![(0.9, 0.0), (0.5, 0.5)],
                vec![(0.5, 0.5), (0.5, 1.0)],
            ],
            0.9,
        ),
        'һ' => s(
            vec![
                vec![(0.14, 0.0), (0.14, 1.0)],
                vec![(0.14, 0.48), (0.5, 0.38), (0.8, 0.52), (0.82, 1.0)],
            ],
            0.9,
        ),
        'і' => s(
            vec![
                vec![(0.5, 0.3), (0.5, 1.0)],
                vec![(0.5, 0.05), (0.5, 0.14)],
            ],
            0.45,
        ),
        _ => None,
    }
}

/// Every letter the font can draw, lowercase.
pub fn covered_letters() -> Vec<char> {
    let mut all: Vec<char> = super::RUSSIAN_LETTERS.chars().collect();
    all.extend(super::KAZAKH_LETTERS.chars());
    all
}

fn stamp_disc(img: &mut GrayImage, cx: f64, cy: f64, radius: f64) {
    let x0 = ((cx - radius).floor().max(0.0)) as usize;
    let y0 = ((cy - radius).floor().max(0.0)) as usize;
    let x1 = ((cx + radius).ceil() as usize).min(img.width().saturating_sub(1));
    let y1 = ((cy + radius).ceil() as usize).min(img.height().saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if dx * dx + dy * dy <= radius * radius {
                img.set(x, y, 0.0);
            }
        }
    }
}

fn draw_stroke(img: &mut GrayImage, stroke: &[(f64, f64)], radius: f64) {
    for pair in stroke.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
        let steps = (len / 0.25).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            stamp_disc(img, x0 + t * (x1 - x0), y0 + t * (y1 - y0), radius);
        }
    }
}

/// Renders text on a white canvas with the embedded font. `cap_height` is
/// the uppercase glyph height in pixels; lowercase runs at 70% of it.
/// Spaces advance without ink. Characters outside the font render as a
/// small filled box so missing glyphs are visible rather than silent.
pub fn render_word(text: &str, cap_height: usize) -> GrayImage {
    let ch_f = cap_height as f64;
    let margin = (ch_f * 0.25).ceil();
    let spacing = ch_f * 0.12;
    let lower_scale = 0.7;

    // measure
    let mut width = margin;
    for ch in text.chars() {
        width += advance(ch, ch_f, lower_scale) + spacing;
    }
    width += margin - spacing.min(width);
    let height = (ch_f + 2.0 * margin).ceil() as usize;
    let mut img = GrayImage::new_white(width.ceil().max(ch_f) as usize, height);

    let baseline = margin + ch_f;
    let radius = (ch_f / 32.0).max(0.8) * 1.1;
    let mut x = margin;
    for ch in text.chars() {
        let adv = advance(ch, ch_f, lower_scale);
        if ch != ' ' {
            let upper = ch.is_uppercase();
            let scale = if upper { ch_f } else { ch_f * lower_scale };
            let base = ch.to_lowercase().next().unwrap_or(ch);
            match glyph(base) {
                Some(g) => {
                    for stroke in &g.strokes {
                        let placed: Vec<(f64, f64)> = stroke
                            .iter()
                            .map(|&(gx, gy)| (x + gx * g.width * scale, baseline - scale + gy * scale))
                            .collect();
                        draw_stroke(&mut img, &placed, radius);
                    }
                }
                None => {
                    let box_stroke = vec![
                        (x, baseline - scale),
                        (x + adv, baseline - scale),
                        (x + adv, baseline),
                        (x, baseline),
                        (x, baseline - scale),
                    ];
                    draw_stroke(&mut img, &box_stroke, radius);
                }
            }
        }
        x += adv + spacing;
    }
    img
}

fn advance(ch: char, cap_height: f64, lower_scale: f64) -> f64 {
    if ch == ' ' {
        return cap_height * 0.55;
    }
    let base = ch.to_lowercase().next().unwrap_or(ch);
    let width = glyph(base).map(|g| g.width).unwrap_or(0.9);
    let scale = if ch.is_uppercase() {
        cap_height
    } else {
        cap_height * lower_scale
    };
    width * scale
}
