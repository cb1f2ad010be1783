//! Seeded Gaussian-blob classification data for tests, benches and demos.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    /// Pairwise distance between class centers, in units of `stddev`.
    pub separation: f64,
    pub stddev: f64,
    /// Probability that a label is replaced by a different class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            samples: 5000,
            dim: 32,
            classes: 10,
            separation: 4.0,
            stddev: 1.0,
            label_noise: 0.05,
            seed: 0,
        }
    }
}

fn standard_normal(rng: &mut RngState) -> f64 {
    // Box-Muller; 1 - u keeps the log argument in (0, 1]
    let u1 = 1.0 - rng.uniform();
    let u2 = rng.uniform();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Class `c` is centered at `separation * stddev / sqrt(2)` along axis `c`,
/// so every pair of centers is `separation * stddev` apart. Sample `i`
/// belongs to class `i % classes` before label noise.
pub fn gaussian_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.classes > spec.dim {
        return Err(Error::InvalidConfig(format!(
            "blobs need 2 <= classes <= dim, got {} classes in {} dims",
            spec.classes, spec.dim
        )));
    }
    if !(0.0..1.0).contains(&spec.label_noise) {
        return Err(Error::InvalidConfig(format!("label noise {}", spec.label_noise)));
    }
    let mut rng = RngState::new(spec.seed);
    let offset = spec.separation * spec.stddev / std::f64::consts::SQRT_2;
    let mut data = Vec::with_capacity(spec.samples * spec.dim);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let class = i % spec.classes;
        for d in 0..spec.dim {
            let center = if d == class { offset } else { 0.0 };
            data.push(center + spec.stddev * standard_normal(&mut rng));
        }
        let label = if rng.uniform() < spec.label_noise {
            let other = rng.below(spec.classes - 1);
            if other >= class {
                other + 1
            } else {
                other
            }
        } else {
            class
        };
        labels.push(label);
    }
    Dataset::new(Matrix::from_vec(spec.samples, spec.dim, data)?, labels, spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_noise_rate() {
        let spec = BlobSpec {
            samples: 4000,
            label_noise: 0.1,
            ..BlobSpec::default()
        };
        let ds = gaussian_blobs(&spec).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.num_classes()), (4000, 32, 10));
        let flipped = ds.labels().iter().enumerate().filter(|(i, &y)| y != i % 10).count();
        let rate = flipped as f64 / 4000.0;
        assert!((0.08..0.12).contains(&rate), "noise rate {rate}");
        assert_eq!(gaussian_blobs(&spec).unwrap(), ds);
    }

    #[test]
    fn centers_are_separated() {
        let spec = BlobSpec { samples: 2000, label_noise: 0.0, ..BlobSpec::default() };
        let ds = gaussian_blobs(&spec).unwrap();
        let mut means = vec![vec![0.0; 32]; 10];
        for i in 0..ds.len() {
            for (m, v) in means[ds.labels()[i]].iter_mut().zip(ds.features().row(i)) {
                *m += v / 200.0;
            }
        }
        let d01: f64 = means[0].iter().zip(&means[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!((d01 - 4.0).abs() < 0.6, "center distance {d01}");
    }
}
