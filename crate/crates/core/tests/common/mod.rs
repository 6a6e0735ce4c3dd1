#![allow(dead_code)]

use ar_core::datasets::{ImageSet, LabelSet, Labeled};
use ar_core::gmm::{AnnealMode, AnnealingState, GmmParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Clusters at (0,0), (4,0), (0,4) with spread 0.3, mapped into the unit
/// square by `x -> 0.2 + 0.15 x`.
pub const CENTERS: [[f32; 2]; 3] = [[0.2, 0.2], [0.8, 0.2], [0.2, 0.8]];
pub const SPREAD: f32 = 0.045;

pub fn clusters(per_cluster: usize, seed: u64) -> (ImageSet, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, SPREAD).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in CENTERS.iter().enumerate() {
        for _ in 0..per_cluster {
            rows.push(vec![
                (center[0] + noise.sample(&mut rng)).clamp(0.0, 1.0),
                (center[1] + noise.sample(&mut rng)).clamp(0.0, 1.0),
            ]);
            labels.push(c);
        }
    }
    (ImageSet::from_rows(&rows, 2).unwrap(), labels)
}

pub fn nearest_center<T: Into<f64> + Copy>(mu: &[T]) -> usize {
    let d = |c: usize| {
        (mu[0].into() - CENTERS[c][0] as f64).powi(2)
            + (mu[1].into() - CENTERS[c][1] as f64).powi(2)
    };
    (0..3).min_by(|&a, &b| d(a).total_cmp(&d(b))).unwrap()
}

/// Nine components at the data mean with stddev 0.06: as narrow relative to
/// the clusters as the default init is on data five times wider.
pub fn narrow_start(data: &ImageSet, seed: u64) -> GmmParams<f64> {
    let p = GmmParams::<f64>::init(9, 2, seed, data).unwrap();
    GmmParams::from_parts(
        9,
        2,
        p.weight_logits().to_vec(),
        p.centroids().to_vec(),
        vec![0.06f64.ln(); 18],
    )
    .unwrap()
}

/// Radius shrinking by 0.9 every epoch from `sqrt(0.125 * 9)`.
pub fn epoch_decay() -> AnnealingState {
    AnnealingState::new((0.125f64 * 9.0).sqrt(), 0.9, 0.01)
        .unwrap()
        .with_mode(AnnealMode::Epoch)
}

/// 4x4 images; each class lights a fixed set of pixels at 0.9 over a 0.1
/// background, plus Gaussian noise of 0.05.
pub const PATTERNS: [&[usize]; 4] = [
    &[0, 1, 2, 3],
    &[0, 1, 2, 3, 4, 5, 6, 7],
    &[12, 13, 14, 15],
    &[0, 4, 8, 12],
];

pub fn pattern_task(classes: &[usize], per_class: usize, seed: u64) -> Labeled {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.05).unwrap();
    let mut v = Vec::new();
    let mut labels = Vec::new();
    for &c in classes {
        for _ in 0..per_class {
            for px in 0..16 {
                let base = if PATTERNS[c].contains(&px) { 0.9 } else { 0.1 };
                v.push((base + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Labeled::new(
        ImageSet::new(v, 16).unwrap(),
        LabelSet::new(labels, Some(PATTERNS.len())).unwrap(),
    )
    .unwrap()
}

/// Nearest class prototype of a 16-pixel vector.
pub fn nearest_pattern(x: &[f32]) -> usize {
    let d = |c: usize| -> f32 {
        (0..16)
            .map(|px| {
                let base = if PATTERNS[c].contains(&px) { 0.9 } else { 0.1 };
                (x[px] - base).powi(2)
            })
            .sum()
    };
    (0..PATTERNS.len())
        .min_by(|&a, &b| d(a).total_cmp(&d(b)))
        .unwrap()
}
