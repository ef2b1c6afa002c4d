use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::quantize::io::VectorSet;
use crate::rng::stream;

/// Distribution of synthetic vectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MixtureSpec {
    /// Standard normal in every coordinate.
    Isotropic,
    /// `components` unit-variance Gaussians whose centers are drawn from
    /// `N(0, spread²·I)`; each sample picks a component uniformly.
    Mixture { components: usize, spread: f32 },
}

pub fn gen_vectors(seed: u64, count: usize, dim: usize, spec: MixtureSpec) -> VectorSet {
    assert!(dim >= 1, "vector dim must be positive");
    let mut rng = stream(seed, "vectors", 0);
    let centers: Vec<f32> = match spec {
        MixtureSpec::Isotropic => Vec::new(),
        MixtureSpec::Mixture { components, spread } => (0..components.max(1) * dim)
            .map(|_| spread * rng.sample::<f32, _>(StandardNormal))
            .collect(),
    };
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let center = match spec {
            MixtureSpec::Isotropic => None,
            MixtureSpec::Mixture { components, .. } => {
                let c = rng.random_range(0..components.max(1));
                Some(&centers[c * dim..(c + 1) * dim])
            }
        };
        for j in 0..dim {
            let z: f32 = rng.sample(StandardNormal);
            data.push(z + center.map_or(0.0, |c| c[j]));
        }
    }
    VectorSet::new(dim, data).expect("rows of width dim")
}
