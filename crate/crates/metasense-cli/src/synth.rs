//! Deterministic synthetic handwritten-digit corpus in the IDX file format.
//!
//! Each sample rasterizes a per-class stroke skeleton under a random affine
//! deformation (rotation, anisotropic scale, shear, translation), random
//! control-point jitter and random stroke width, onto a 28x28 grayscale
//! canvas (white digit on black, MNIST convention). Useful wherever the
//! real MNIST files are not available; the emitted files parse with any
//! IDX reader.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use metasense::data::{write_idx_images, write_idx_labels};
use metasense::error::Result;

pub const SIDE: usize = 28;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

/// Stroke skeletons per digit class in unit coordinates (x right, y up).
fn skeleton(digit: u8) -> Vec<Vec<(f64, f64)>> {
    fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Vec<(f64, f64)> {
        (0..=14)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / 14.0;
                (cx + rx * t.cos(), cy + ry * t.sin())
            })
            .collect()
    }
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.24, 0.37)],
        1 => vec![vec![(0.34, 0.7), (0.52, 0.9), (0.52, 0.1)]],
        2 => vec![vec![
            (0.27, 0.72),
            (0.34, 0.87),
            (0.5, 0.92),
            (0.66, 0.86),
            (0.71, 0.7),
            (0.6, 0.48),
            (0.28, 0.1),
            (0.74, 0.1),
        ]],
        3 => vec![vec![
            (0.3, 0.85),
            (0.5, 0.93),
            (0.68, 0.84),
            (0.69, 0.68),
            (0.52, 0.55),
            (0.68, 0.44),
            (0.72, 0.26),
            (0.55, 0.09),
            (0.3, 0.14),
        ]],
        4 => vec![
            vec![(0.58, 0.9), (0.24, 0.38), (0.78, 0.38)],
            vec![(0.6, 0.62), (0.6, 0.08)],
        ],
        5 => vec![vec![
            (0.7, 0.9),
            (0.32, 0.9),
            (0.3, 0.56),
            (0.52, 0.6),
            (0.68, 0.5),
            (0.71, 0.3),
            (0.58, 0.12),
            (0.34, 0.09),
            (0.26, 0.18),
        ]],
        6 => vec![vec![
            (0.64, 0.9),
            (0.45, 0.74),
            (0.33, 0.52),
            (0.31, 0.3),
            (0.41, 0.12),
            (0.6, 0.09),
            (0.71, 0.22),
            (0.69, 0.38),
            (0.54, 0.46),
            (0.37, 0.38),
        ]],
        7 => vec![
            vec![(0.26, 0.9), (0.74, 0.9), (0.44, 0.08)],
            vec![(0.36, 0.5), (0.62, 0.5)],
        ],
        8 => vec![ellipse(0.5, 0.7, 0.17, 0.19), ellipse(0.5, 0.3, 0.2, 0.21)],
        9 => vec![
            ellipse(0.48, 0.68, 0.18, 0.2),
            vec![(0.66, 0.68), (0.64, 0.4), (0.54, 0.1)],
        ],
        _ => unreachable!("digit classes are 0..=9"),
    }
}

struct Deformation {
    a: [[f64; 2]; 2],
    t: [f64; 2],
    jitter: f64,
    half_width: f64,
}

impl Deformation {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let angle: f64 = rng.random_range(-0.22..0.22);
        let (sx, sy) = (rng.random_range(0.82..1.1), rng.random_range(0.82..1.1));
        let shear: f64 = rng.random_range(-0.18..0.18);
        let (c, s) = (angle.cos(), angle.sin());
        // rotation * shear * scale, about the glyph center.
        let a = [
            [sx * (c + shear * -s), sy * -s],
            [sx * (s + shear * c), sy * c],
        ];
        Self {
            a,
            t: [rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06)],
            jitter: 0.016,
            half_width: rng.random_range(0.026..0.046),
        }
    }

    fn apply(&self, p: (f64, f64), rng: &mut ChaCha8Rng) -> (f64, f64) {
        let (x, y) = (p.0 - 0.5, p.1 - 0.5);
        let jx: f64 = rng.sample::<f64, _>(StandardNormal) * self.jitter;
        let jy: f64 = rng.sample::<f64, _>(StandardNormal) * self.jitter;
        (
            0.5 + self.a[0][0] * x + self.a[0][1] * y + self.t[0] + jx,
            0.5 + self.a[1][0] * x + self.a[1][1] * y + self.t[1] + jy,
        )
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len_sq).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Rasterize one digit instance to a 28x28 grayscale image.
pub fn render_digit(digit: u8, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let deform = Deformation::sample(rng);
    let strokes: Vec<Vec<(f64, f64)>> = skeleton(digit)
        .into_iter()
        .map(|stroke| stroke.into_iter().map(|p| deform.apply(p, rng)).collect())
        .collect();
    let antialias = 0.02;
    let mut pixels = vec![0u8; SIDE * SIDE];
    for row in 0..SIDE {
        for col in 0..SIDE {
            // Image row 0 is the top; unit y points up.
            let px = (col as f64 + 0.5) / SIDE as f64;
            let py = 1.0 - (row as f64 + 0.5) / SIDE as f64;
            let mut dist = f64::INFINITY;
            for stroke in &strokes {
                for seg in stroke.windows(2) {
                    dist = dist.min(segment_distance((px, py), seg[0], seg[1]));
                }
            }
            let intensity =
                ((deform.half_width + antialias - dist) / (2.0 * antialias)).clamp(0.0, 1.0);
            pixels[row * SIDE + col] = (intensity * 255.0).round() as u8;
        }
    }
    pixels
}

/// Generate a labeled corpus and write the four IDX files into `dir` with
/// the canonical MNIST names. Deterministic given the seed.
pub fn generate_corpus(
    dir: &Path,
    seed: u64,
    n_train: usize,
    n_test: usize,
) -> Result<CorpusPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = CorpusPaths {
        train_images: dir.join("train-images-idx3-ubyte"),
        train_labels: dir.join("train-labels-idx1-ubyte"),
        test_images: dir.join("t10k-images-idx3-ubyte"),
        test_labels: dir.join("t10k-labels-idx1-ubyte"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (count, images_path, labels_path) in [
        (n_train, &paths.train_images, &paths.train_labels),
        (n_test, &paths.test_images, &paths.test_labels),
    ] {
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let digit = rng.random_range(0..10u8);
            images.push(render_digit(digit, &mut rng));
            labels.push(digit);
        }
        std::fs::write(images_path, write_idx_images(SIDE, SIDE, &images))?;
        std::fs::write(labels_path, write_idx_labels(&labels))?;
    }
    Ok(paths)
}
