//! Procedural ten-class image set: five shapes and five textures with
//! random placement, scale and colors. Class identity never depends on
//! color, so the classifier has to rely on spatial structure, which is what
//! the noise corruptions destroy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{rng_for, Dataset};

pub const CLASS_NAMES: [&str; 10] = [
    "disk", "square", "ring", "plus", "cross", "h_stripes", "v_stripes", "checker", "triangle",
    "frame",
];

const PURPOSE_SYNTHETIC: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Side length in pixels.
    pub size: usize,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            size: 16,
            per_class: 500,
            seed: 0,
        }
    }
}

struct Params {
    cx: f64,
    cy: f64,
    radius: f64,
    period: f64,
    phase_x: f64,
    phase_y: f64,
    fg: [f64; 3],
    bg: [f64; 3],
}

fn luminance(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn sample_params(size: usize, rng: &mut impl Rng) -> Params {
    let s = size as f64;
    let (fg, bg) = loop {
        let fg = [rng.random(), rng.random(), rng.random()];
        let bg = [rng.random(), rng.random(), rng.random()];
        if (luminance(&fg) - luminance(&bg)).abs() >= 0.3 {
            break (fg, bg);
        }
    };
    Params {
        cx: s / 2.0 + rng.random_range(-0.125..0.125) * s,
        cy: s / 2.0 + rng.random_range(-0.125..0.125) * s,
        radius: s * rng.random_range(0.28..0.40),
        period: rng.random_range(3.0..5.0),
        phase_x: rng.random_range(0.0..5.0),
        phase_y: rng.random_range(0.0..5.0),
        fg,
        bg,
    }
}

/// Whether the point `(x, y)` (pixel units) lies in the foreground.
fn inside(class: usize, p: &Params, x: f64, y: f64) -> bool {
    let u = (x - p.cx) / p.radius;
    let v = (y - p.cy) / p.radius;
    let r = (u * u + v * v).sqrt();
    let box_norm = u.abs().max(v.abs());
    let stripe = |t: f64| (t / p.period).rem_euclid(1.0) < 0.5;
    match class {
        0 => r <= 1.0,
        1 => box_norm <= 0.85,
        2 => (0.55..=1.0).contains(&r),
        3 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        4 => box_norm <= 1.0 && ((u - v).abs() <= 0.4 || (u + v).abs() <= 0.4),
        5 => stripe(y + p.phase_y),
        6 => stripe(x + p.phase_x),
        7 => stripe(x + p.phase_x) != stripe(y + p.phase_y),
        8 => v <= 0.9 && u.abs() <= (v + 0.9) / 1.8,
        9 => (0.6..=0.95).contains(&box_norm),
        _ => unreachable!("ten classes"),
    }
}

/// Renders one image (HWC, 2x2 supersampled).
fn render(class: usize, size: usize, rng: &mut impl Rng) -> Vec<f32> {
    let p = sample_params(size, rng);
    let mut img = Vec::with_capacity(size * size * 3);
    for py in 0..size {
        for px in 0..size {
            let mut cover = 0.0;
            for (dx, dy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                if inside(class, &p, px as f64 + dx, py as f64 + dy) {
                    cover += 0.25;
                }
            }
            for ch in 0..3 {
                img.push((p.bg[ch] + (p.fg[ch] - p.bg[ch]) * cover) as f32);
            }
        }
    }
    img
}

/// Generates `per_class` images of each class, interleaved by class.
pub fn generate(spec: &SyntheticSpec) -> Dataset {
    let n = spec.per_class * CLASS_NAMES.len();
    let mut images = Vec::with_capacity(n * spec.size * spec.size * 3);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % CLASS_NAMES.len();
        let mut rng = rng_for(spec.seed, PURPOSE_SYNTHETIC, i as u64);
        images.extend(render(class, spec.size, &mut rng));
        labels.push(class);
    }
    Dataset::new(
        [spec.size, spec.size, 3],
        images,
        labels,
        CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    )
    .expect("generated dataset is consistent")
}
