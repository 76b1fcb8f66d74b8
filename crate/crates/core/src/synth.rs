//! Procedural 28x28 handwritten-style digit glyphs in ten classes, used where
//! no real dataset is available on disk.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 28;
pub const CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlyphConfig {
    pub per_class: usize,
    /// Max rotation in degrees.
    pub rotation: f64,
    /// Max translation in pixels.
    pub shift: f64,
    pub stroke_min: f64,
    pub stroke_max: f64,
    /// Std of the additive pixel noise.
    pub noise: f64,
    /// Stray strokes drawn at low intensity.
    pub clutter: usize,
    /// Per-control-point jitter in glyph units.
    pub wobble: f64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        GlyphConfig {
            per_class: 200,
            rotation: 14.0,
            shift: 2.5,
            stroke_min: 1.6,
            stroke_max: 3.0,
            noise: 12.0,
            clutter: 2,
            wobble: 0.035,
        }
    }
}

type Stroke = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64) -> Stroke {
    let n = 14;
    (0..=n)
        .map(|i| {
            let t = (from + (to - from) * i as f64 / n as f64) * PI / 180.0;
            (cx + rx * t.cos(), cy - ry * t.sin())
        })
        .collect()
}

/// Glyph skeletons on the unit square, y pointing down.
fn skeleton(class: usize) -> Vec<Stroke> {
    match class {
        0 => vec![arc(0.5, 0.5, 0.26, 0.36, 0.0, 360.0)],
        1 => vec![
            vec![(0.36, 0.28), (0.52, 0.14), (0.52, 0.86)],
            vec![(0.38, 0.86), (0.66, 0.86)],
        ],
        2 => {
            let mut top = arc(0.5, 0.34, 0.22, 0.2, 160.0, -20.0);
            top.extend([(0.28, 0.84), (0.76, 0.84)]);
            vec![top]
        }
        3 => vec![
            arc(0.48, 0.32, 0.22, 0.18, 150.0, -90.0),
            arc(0.48, 0.67, 0.24, 0.19, 90.0, -150.0),
        ],
        4 => vec![
            vec![(0.62, 0.14), (0.24, 0.62), (0.78, 0.62)],
            vec![(0.62, 0.3), (0.62, 0.88)],
        ],
        5 => {
            let mut s = vec![(0.74, 0.16), (0.34, 0.16), (0.3, 0.46)];
            s.extend(arc(0.5, 0.64, 0.24, 0.21, 140.0, -150.0));
            vec![s]
        }
        6 => vec![
            arc(0.56, 0.5, 0.26, 0.36, 70.0, 180.0),
            arc(0.5, 0.66, 0.21, 0.19, 0.0, 360.0),
        ],
        7 => vec![
            vec![(0.24, 0.16), (0.76, 0.16), (0.42, 0.86)],
            vec![(0.38, 0.5), (0.66, 0.5)],
        ],
        8 => vec![
            arc(0.5, 0.3, 0.18, 0.16, 0.0, 360.0),
            arc(0.5, 0.67, 0.23, 0.2, 0.0, 360.0),
        ],
        9 => vec![
            arc(0.5, 0.34, 0.21, 0.19, 0.0, 360.0),
            vec![(0.71, 0.34), (0.66, 0.86)],
        ],
        _ => unreachable!("ten glyph classes"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn draw(canvas: &mut [f64], strokes: &[Stroke], width: f64, intensity: f64) {
    for y in 0..SIDE {
        for x in 0..SIDE {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let mut d = f64::INFINITY;
            for s in strokes {
                for w in s.windows(2) {
                    d = d.min(segment_distance(p, w[0], w[1]));
                }
            }
            let cover = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
            let v = &mut canvas[y * SIDE + x];
            *v = v.max(cover * intensity);
        }
    }
}

fn render(class: usize, cfg: &GlyphConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let rot = rng.random_range(-cfg.rotation..=cfg.rotation) * PI / 180.0;
    let scale = rng.random_range(0.82..1.08) * SIDE as f64 * 0.86;
    let aspect = rng.random_range(0.85..1.15);
    let shear = rng.random_range(-0.18..0.18);
    let tx = rng.random_range(-cfg.shift..=cfg.shift);
    let ty = rng.random_range(-cfg.shift..=cfg.shift);
    let (sin, cos) = rot.sin_cos();
    let wobble = Normal::new(0.0, cfg.wobble.max(1e-9)).expect("positive std");
    let strokes: Vec<Stroke> = skeleton(class)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(u, v)| {
                    let u = u - 0.5 + wobble.sample(rng);
                    let v = v - 0.5 + wobble.sample(rng);
                    let u = (u + shear * v) * aspect;
                    let (ru, rv) = (cos * u - sin * v, sin * u + cos * v);
                    (
                        SIDE as f64 / 2.0 + tx + ru * scale,
                        SIDE as f64 / 2.0 + ty + rv * scale,
                    )
                })
                .collect()
        })
        .collect();
    let mut canvas = vec![0.0f64; SIDE * SIDE];
    let width = rng.random_range(cfg.stroke_min..=cfg.stroke_max);
    draw(&mut canvas, &strokes, width, rng.random_range(190.0..255.0));
    for _ in 0..cfg.clutter {
        let a = (
            rng.random_range(0.0..SIDE as f64),
            rng.random_range(0.0..SIDE as f64),
        );
        let b = (
            a.0 + rng.random_range(-6.0..6.0),
            a.1 + rng.random_range(-6.0..6.0),
        );
        draw(
            &mut canvas,
            &[vec![a, b]],
            1.2,
            rng.random_range(40.0..110.0),
        );
    }
    let noise = Normal::new(0.0, cfg.noise.max(1e-9)).expect("positive std");
    canvas
        .into_iter()
        .map(|v| (v + noise.sample(rng)).round().clamp(0.0, 255.0) as f32)
        .collect()
}

/// `per_class` images of every class, interleaved by class.
pub fn glyphs(cfg: &GlyphConfig, seed: u64) -> Result<LabeledDataset> {
    if cfg.per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    if !(cfg.stroke_min > 0.0 && cfg.stroke_min <= cfg.stroke_max) {
        return Err(Error::Config("stroke width range is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.per_class * CLASSES;
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % CLASSES;
        pixels.extend(render(class, cfg, &mut rng));
        labels.push(class);
    }
    LabeledDataset::new(Tensor::new(&[n, 1, SIDE, SIDE], pixels)?, labels, CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_balance() {
        let cfg = GlyphConfig {
            per_class: 3,
            ..Default::default()
        };
        let ds = glyphs(&cfg, 1).unwrap();
        assert_eq!(ds.len(), 30);
        assert_eq!(ds.image_shape(), [1, 28, 28]);
        assert_eq!(ds.class_counts(), vec![3; 10]);
        assert_eq!(ds, glyphs(&cfg, 1).unwrap());
        assert_ne!(ds, glyphs(&cfg, 2).unwrap());
    }

    #[test]
    fn glyphs_have_ink() {
        let cfg = GlyphConfig {
            per_class: 1,
            noise: 0.0,
            clutter: 0,
            ..Default::default()
        };
        let ds = glyphs(&cfg, 0).unwrap();
        for i in 0..10 {
            let img = &ds.images().data()[i * 784..(i + 1) * 784];
            let ink = img.iter().filter(|&&v| v > 128.0).count();
            assert!(ink > 30 && ink < 400, "class {i} has {ink} inked pixels");
        }
    }
}
