//! Procedural scene rendering.
//!
//! Geometry is laid out on a canonical 16x16 grid and sampled at pixel
//! centres, so any image size renders the same scene. Colours are composed
//! in `[0, 1]` and mapped to `[-1, 1]` at the end.

use crate::error::Result;
use crate::rng::{gaussian, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::grammar::{Accessory, Attribute, Caption, Category, CoarseColor, Context, Skill, Style};
use super::subject::{SubjectSpec, SIGNATURE_LEN};
use super::WorldConfig;

const CANON: f64 = 16.0;
const CENTER: f64 = 8.0;
const MAX_RADIUS: f64 = 7.0;

// Signature block: 4 columns x 2 rows of 2x2 cells.
const SIG_LEFT: f64 = 4.0;
const SIG_TOP: f64 = 6.0;
const SIG_CELL: f64 = 2.0;
const SIG_COLS: usize = 4;

type Rgb = [f64; 3];

fn subject_rgb(color: CoarseColor) -> Rgb {
    match color {
        CoarseColor::Red => [0.9, 0.1, 0.1],
        CoarseColor::Orange => [1.0, 0.5, 0.0],
        CoarseColor::Yellow => [0.95, 0.9, 0.1],
        CoarseColor::Green => [0.1, 0.8, 0.3],
        CoarseColor::Blue => [0.15, 0.3, 0.95],
        CoarseColor::Purple => [0.6, 0.15, 0.8],
    }
}

fn edited(c: Rgb, attr: Option<Attribute>) -> Rgb {
    match attr {
        None => c,
        Some(Attribute::Shiny) => c.map(|v| v + (1.0 - v) * 0.45),
        Some(Attribute::Dark) => c.map(|v| v * 0.45),
        Some(Attribute::Faded) => c.map(|v| v * 0.4 + 0.3),
    }
}

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn background(ctx: Context, u: f64, v: f64) -> Rgb {
    const SKY: Rgb = [0.55, 0.8, 1.0];
    let (iu, iv) = (u.floor() as i64, v.floor() as i64);
    match ctx {
        Context::Beach => if v < 8.0 { SKY } else { [0.95, 0.85, 0.55] },
        Context::Grass => if v < 8.0 { SKY } else { [0.2, 0.65, 0.2] },
        Context::Snow => if v < 5.0 { [0.8, 0.85, 0.9] } else { [0.97, 0.97, 1.0] },
        Context::Night => [0.05, 0.05, 0.2],
        Context::Desert => if v < 6.0 { [0.98, 0.9, 0.7] } else { [0.9, 0.55, 0.25] },
        Context::Forest => if iu % 4 == 0 { [0.4, 0.25, 0.1] } else { [0.05, 0.35, 0.12] },
        Context::City => {
            if (iu / 2 + iv / 2) % 2 == 0 { [0.55, 0.55, 0.6] } else { [0.3, 0.3, 0.35] }
        }
        Context::River => if iv % 3 == 0 { [0.35, 0.6, 0.95] } else { [0.1, 0.3, 0.75] },
        Context::Sunset => lerp([1.0, 0.55, 0.2], [0.45, 0.15, 0.5], v / CANON),
        Context::Room => if v < 12.0 { [0.85, 0.75, 0.6] } else { [0.55, 0.4, 0.25] },
        Context::Space => {
            if (iu * 7 + iv * 13) % 11 == 0 { [0.9, 0.9, 0.9] } else { [0.02, 0.02, 0.05] }
        }
        Context::Kitchen => {
            if (iu / 4 + iv / 4) % 2 == 0 { [0.95, 0.95, 0.95] } else { [0.7, 0.7, 0.75] }
        }
    }
}

fn in_shape(category: Category, scale: f64, u: f64, v: f64) -> bool {
    let r = scale * MAX_RADIUS;
    let (dx, dy) = (u - CENTER, v - CENTER);
    match category {
        Category::Circle => dx * dx + dy * dy <= r * r,
        Category::Square => dx.abs().max(dy.abs()) <= 0.8 * r,
        Category::Triangle => dy >= -r && dy <= 0.7 * r && dx.abs() <= (dy + r) / 1.7,
        Category::Star => {
            let theta = dy.atan2(dx);
            let reach = r * (0.5 + 0.5 * (2.5 * theta).cos().abs());
            (dx * dx + dy * dy).sqrt() <= reach
        }
        Category::Cross => (dx.abs() <= 0.3 * r || dy.abs() <= 0.3 * r) && dx.abs().max(dy.abs()) <= r,
        Category::Diamond => dx.abs() + dy.abs() <= r,
    }
}

fn in_signature(u: f64, v: f64) -> bool {
    (SIG_LEFT..SIG_LEFT + SIG_CELL * SIG_COLS as f64).contains(&u)
        && (SIG_TOP..SIG_TOP + SIG_CELL * (SIGNATURE_LEN / SIG_COLS) as f64).contains(&v)
}

/// Colour of the signature pattern at a canonical point inside the block.
fn signature_rgb(signature: &[u8; SIGNATURE_LEN], base: Rgb, u: f64, v: f64) -> Rgb {
    let (cu, cv) = (u - SIG_LEFT, v - SIG_TOP);
    let col = (cu / SIG_CELL).floor() as usize;
    let row = (cv / SIG_CELL).floor() as usize;
    let symbol = signature[row * SIG_COLS + col];
    let top = cv - row as f64 * SIG_CELL < SIG_CELL / 2.0;
    let left = cu - col as f64 * SIG_CELL < SIG_CELL / 2.0;
    let dark = match symbol {
        0 => true,
        1 => false,
        2 => top,
        _ => left,
    };
    if dark {
        base.map(|c| c * 0.25)
    } else {
        base.map(|c| c + (1.0 - c) * 0.7)
    }
}

fn accessory_rgb(acc: Accessory, u: f64, v: f64) -> Option<Rgb> {
    let inside = |u0: f64, u1: f64, v0: f64, v1: f64| (u0..u1).contains(&u) && (v0..v1).contains(&v);
    match acc {
        Accessory::Hat => inside(5.0, 11.0, 1.0, 3.5).then_some([0.1, 0.1, 0.1]),
        Accessory::Scarf => inside(3.0, 13.0, 10.5, 12.5).then_some([0.95, 0.95, 0.95]),
        Accessory::Bow => inside(11.5, 14.5, 2.5, 5.5).then_some([1.0, 0.4, 0.7]),
    }
}

fn canonical(px: usize, size: usize) -> f64 {
    (px as f64 + 0.5) * CANON / size as f64
}

/// Pixels (row-major) covered by the subject itself: its shape plus its
/// signature block.
pub fn subject_mask(subject: &SubjectSpec, size: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (canonical(x, size), canonical(y, size));
            mask.push(in_signature(u, v) || in_shape(subject.category, subject.scale as f64, u, v));
        }
    }
    mask
}

fn apply_style(pixels: &mut [Rgb], size: usize, style: Style) {
    match style {
        Style::Sketch => {
            for p in pixels.iter_mut() {
                let l = 0.3 * p[0] + 0.59 * p[1] + 0.11 * p[2];
                *p = [l, l, l];
            }
        }
        Style::Neon => {
            for p in pixels.iter_mut() {
                *p = p.map(|c| 1.0 - c);
            }
        }
        Style::Mosaic => {
            let block = (size / 8).max(1);
            for by in (0..size).step_by(block) {
                for bx in (0..size).step_by(block) {
                    let mut acc = [0.0; 3];
                    let mut n = 0.0;
                    for y in by..(by + block).min(size) {
                        for x in bx..(bx + block).min(size) {
                            let p = pixels[y * size + x];
                            acc = [acc[0] + p[0], acc[1] + p[1], acc[2] + p[2]];
                            n += 1.0;
                        }
                    }
                    let mean = acc.map(|a| a / n);
                    for y in by..(by + block).min(size) {
                        for x in bx..(bx + block).min(size) {
                            pixels[y * size + x] = mean;
                        }
                    }
                }
            }
        }
    }
}

/// Renders `subject` in the scene described by `caption`.
///
/// The per-pixel jitter comes from `seed` alone, so two captions rendered
/// with the same seed differ only where their productions differ.
pub fn render_scene<S: Scalar>(subject: &SubjectSpec, caption: &Caption, seed: u64, cfg: &WorldConfig) -> Result<Tensor<S>> {
    let trace = caption.trace()?;
    let size = cfg.image_size;
    let attr = match trace.skill {
        Some(Skill::Attribute(a)) => Some(a),
        _ => None,
    };
    let base = edited(subject_rgb(subject.color), attr);
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (canonical(x, size), canonical(y, size));
            let mut rgb = if in_signature(u, v) {
                signature_rgb(&subject.signature, base, u, v)
            } else if in_shape(subject.category, subject.scale as f64, u, v) {
                base
            } else {
                background(trace.context, u, v)
            };
            if let Some(Skill::Accessory(a)) = trace.skill {
                if let Some(c) = accessory_rgb(a, u, v) {
                    rgb = c;
                }
            }
            pixels.push(rgb);
        }
    }
    let mut rng = stream(seed);
    for p in pixels.iter_mut() {
        for c in p.iter_mut() {
            *c += cfg.pixel_noise * gaussian::<f64>(&mut rng);
        }
    }
    if let Some(Skill::Style(style)) = trace.skill {
        apply_style(&mut pixels, size, style);
    }
    let data = pixels.iter().flat_map(|p| p.iter().map(|&c| S::lit(c.clamp(0.0, 1.0) * 2.0 - 1.0))).collect();
    Ok(Tensor::from_parts(vec![size, size, 3], data))
}
