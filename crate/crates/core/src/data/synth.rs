//! Procedural stand-in for a small image classification benchmark.
//!
//! Class `c` draws a Gaussian bump at its own grid cell and a bar at its own
//! orientation, then per-sample jitter and pixel noise (σ = 0.1) are added.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { n_classes: 5, train_per_class: 400, val_per_class: 100, test_per_class: 100, image_size: 16, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Copy, Debug)]
struct Jitter {
    dx: f64,
    dy: f64,
    bump_amp: f64,
    angle: f64,
    offset: f64,
    bar_amp: f64,
}

const CLEAN: Jitter = Jitter { dx: 0.0, dy: 0.0, bump_amp: 0.1, angle: 0.0, offset: 0.0, bar_amp: 0.75 };
const NOISE_STD: f64 = 0.1;

fn bump_center(c: usize, n_classes: usize, h: usize) -> (f64, f64) {
    let g = (n_classes as f64).sqrt().ceil() as usize;
    let step = h as f64 / (g + 1) as f64;
    (((c % g) + 1) as f64 * step, ((c / g) + 1) as f64 * step)
}

fn render(c: usize, n_classes: usize, h: usize, j: Jitter) -> Vec<f64> {
    let (cx, cy) = bump_center(c, n_classes, h);
    let (cx, cy) = (cx + j.dx, cy + j.dy);
    let sigma = h as f64 / 8.0;
    let theta = std::f64::consts::PI * c as f64 / n_classes as f64 + j.angle;
    let (dir_x, dir_y) = (theta.cos(), theta.sin());
    let mid = (h as f64 - 1.0) / 2.0;
    let half_len = 0.45 * h as f64;
    let width = 1.0;
    let mut img = Vec::with_capacity(h * h);
    for y in 0..h {
        for x in 0..h {
            let (px, py) = (x as f64, y as f64);
            let r2 = (px - cx).powi(2) + (py - cy).powi(2);
            let bump = j.bump_amp * (-r2 / (2.0 * sigma * sigma)).exp();
            let (rx, ry) = (px - mid, py - mid);
            let along = rx * dir_x + ry * dir_y;
            let across = -rx * dir_y + ry * dir_x - j.offset;
            let bar = if along.abs() <= half_len {
                j.bar_amp * (-across * across / (2.0 * width * width)).exp()
            } else {
                0.0
            };
            img.push(bump + bar);
        }
    }
    img
}

/// Noise- and jitter-free rendering of every class, `[N_c, 1, H, H]`.
pub fn synth_prototypes(n_classes: usize, image_size: usize) -> Tensor {
    let mut data = Vec::with_capacity(n_classes * image_size * image_size);
    for c in 0..n_classes {
        data.extend(render(c, n_classes, image_size, CLEAN).into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Tensor::from_parts(vec![n_classes, 1, image_size, image_size], data)
}

fn generate(spec: &SynthSpec, per_class: usize, split: Split, stream: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let (k, h) = (spec.n_classes, spec.image_size);
    let n = per_class * k;
    let mut data = Vec::with_capacity(n * h * h);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        let j = Jitter {
            dx: rng.gen_range(-1.0..1.0),
            dy: rng.gen_range(-1.0..1.0),
            bump_amp: rng.gen_range(0.05..0.15),
            angle: rng.gen_range(-0.1..0.1),
            offset: rng.gen_range(-1.0..1.0),
            bar_amp: rng.gen_range(0.6..0.9),
        };
        let img = render(c, k, h, j);
        data.extend(img.into_iter().map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)));
        labels.push(c);
    }
    Dataset::new(Tensor::from_parts(vec![n, 1, h, h], data), labels, k, split)
}

/// Generate train/val/test splits. Fully determined by `spec` (including its seed);
/// each split draws from its own random stream.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthSplits> {
    if spec.n_classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", spec.n_classes)));
    }
    if spec.image_size < 8 {
        return Err(Error::InvalidArgument(format!("image size must be >= 8, got {}", spec.image_size)));
    }
    Ok(SynthSplits {
        train: generate(spec, spec.train_per_class, Split::Train, 1)?,
        val: generate(spec, spec.val_per_class, Split::Val, 2)?,
        test: generate(spec, spec.test_per_class, Split::Test, 3)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec { n_classes: 5, train_per_class: 100, val_per_class: 20, test_per_class: 20, image_size: 16, seed: 42 }
    }

    #[test]
    fn split_sizes() {
        let s = synth_dataset(&small()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (500, 100, 100));
        assert_eq!(s.train.class_counts(), vec![100; 5]);
        assert_eq!(s.test.split(), Split::Test);
    }

    #[test]
    fn same_seed_identical() {
        let a = synth_dataset(&small()).unwrap();
        let b = synth_dataset(&small()).unwrap();
        assert_eq!(a.train.images(), b.train.images());
        assert_eq!(a.val.labels(), b.val.labels());
        let mut other = small();
        other.seed = 43;
        let c = synth_dataset(&other).unwrap();
        assert_ne!(a.train.images(), c.train.images());
    }

    #[test]
    fn pixels_in_unit_range() {
        let s = synth_dataset(&small()).unwrap();
        assert!(s.train.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn nearest_centroid_on_prototypes_separates_classes() {
        let mut spec = small();
        spec.test_per_class = 200;
        let s = synth_dataset(&spec).unwrap();
        let protos = synth_prototypes(5, 16);
        let px = 16 * 16;
        let mut correct = 0;
        for i in 0..s.test.len() {
            let img = &s.test.images().data()[i * px..][..px];
            let best = (0..5)
                .map(|c| {
                    let p = &protos.data()[c * px..][..px];
                    let d: f64 = img.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                    (c, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            correct += usize::from(best == s.test.labels()[i]);
        }
        let acc = correct as f64 / s.test.len() as f64;
        assert!(acc >= 0.99, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn rejects_degenerate_specs() {
        let mut s = small();
        s.n_classes = 1;
        assert!(synth_dataset(&s).is_err());
        let mut s = small();
        s.image_size = 7;
        assert!(synth_dataset(&s).is_err());
    }
}
