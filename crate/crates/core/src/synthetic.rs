//! Seeded synthetic data with a known two-level label hierarchy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::metadata_column_names;
use crate::matrix::{FeatureMatrix, LabelColumn, Scaler};

#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub width: usize,
    pub n_mid: usize,
    /// Mid class `m` belongs to top class `m % n_top`.
    pub n_top: usize,
    /// Per-feature noise standard deviation around the class centroid.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { rows: 1000, width: 121, n_mid: 4, n_top: 2, noise: 0.5, seed: 0 }
    }
}

pub fn mid_name(m: usize) -> String {
    format!("mid{m}")
}

pub fn top_name(t: usize) -> String {
    format!("top{t}")
}

pub fn parent(spec: &SyntheticSpec, mid: usize) -> usize {
    mid % spec.n_top
}

/// Balanced classes, each a Gaussian blob around a random ±1 centroid, then
/// standardized. With the default noise the classes are linearly separable
/// with overwhelming margin.
pub fn hierarchical(spec: &SyntheticSpec) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centroids: Vec<Vec<f64>> = (0..spec.n_mid)
        .map(|_| (0..spec.width).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect())
        .collect();
    let mut classes: Vec<usize> = (0..spec.rows).map(|i| i % spec.n_mid).collect();
    classes.shuffle(&mut rng);
    let mut data = Vec::with_capacity(spec.rows * spec.width);
    for &c in &classes {
        for j in 0..spec.width {
            // Box-Muller
            let (u1, u2): (f64, f64) = (rng.random_range(f64::EPSILON..1.0), rng.random());
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            data.push(centroids[c][j] + spec.noise * z);
        }
    }
    let mids: Vec<String> = classes.iter().map(|&c| mid_name(c)).collect();
    let tops: Vec<String> = classes.iter().map(|&c| top_name(parent(spec, c))).collect();
    let column_names = if spec.width == 121 {
        metadata_column_names()
    } else {
        (0..spec.width).map(|j| format!("x{j}")).collect()
    };
    let mut m = FeatureMatrix {
        column_names,
        data,
        row_ids: (0..spec.rows as u64).collect(),
        labels: vec![
            LabelColumn::from_values("top", tops.iter().map(|s| Some(s.as_str()))),
            LabelColumn::from_values("mid", mids.iter().map(|s| Some(s.as_str()))),
        ],
        scaler: None,
    };
    let scaler = Scaler::fit(&m, "synthetic");
    scaler.apply(&mut m).expect("widths agree");
    m.scaler = Some(scaler);
    m
}
