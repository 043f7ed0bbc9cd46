//! Seeded synthetic attention instances.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::TokenMatrix;

/// One attention problem: queries, keys and values, all `· × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub q: TokenMatrix,
    pub k: TokenMatrix,
    pub v: TokenMatrix,
}

impl Instance {
    pub fn new(q: TokenMatrix, k: TokenMatrix, v: TokenMatrix) -> Result<Self> {
        if q.cols() != k.cols() || k.cols() != v.cols() || k.rows() != v.rows() {
            return Err(Error::DimensionMismatch {
                op: "Instance::new",
                left_rows: q.rows(),
                left_cols: q.cols(),
                right_rows: k.rows(),
                right_cols: k.cols(),
            });
        }
        if q.rows() == 0 || k.rows() == 0 || q.cols() == 0 {
            return Err(Error::Empty("instance"));
        }
        Ok(Self { q, k, v })
    }

    pub fn n_q(&self) -> usize {
        self.q.rows()
    }

    pub fn n_k(&self) -> usize {
        self.k.rows()
    }

    pub fn d(&self) -> usize {
        self.q.cols()
    }
}

/// Gaussian blob mixture.
///
/// Blob centers are drawn from `N(0, center_scale²)` per coordinate and each
/// token from `N(center, sigma²)`. Every token picks its blob uniformly.
/// Values follow the key blobs: a per-blob center from `N(0, 1)` plus
/// `N(0, value_sigma²)` noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub n_q: usize,
    pub n_k: usize,
    pub d: usize,
    pub q_blobs: usize,
    pub k_blobs: usize,
    pub sigma: f64,
    pub center_scale: f64,
    pub value_sigma: f64,
}

impl BlobSpec {
    pub fn new(n_q: usize, n_k: usize, d: usize) -> Self {
        Self {
            n_q,
            n_k,
            d,
            q_blobs: 2,
            k_blobs: 4,
            sigma: 0.1,
            center_scale: 1.0,
            value_sigma: 0.5,
        }
    }

    pub fn blobs(mut self, q_blobs: usize, k_blobs: usize) -> Self {
        self.q_blobs = q_blobs;
        self.k_blobs = k_blobs;
        self
    }

    pub fn sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn center_scale(mut self, scale: f64) -> Self {
        self.center_scale = scale;
        self
    }

    pub fn value_sigma(mut self, sigma: f64) -> Self {
        self.value_sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_q == 0 || self.n_k == 0 || self.d == 0 || self.q_blobs == 0 || self.k_blobs == 0 {
            return Err(Error::InvalidParameter(
                "token counts, dimension and blob counts must be positive".into(),
            ));
        }
        for (name, x) in [
            ("sigma", self.sigma),
            ("center_scale", self.center_scale),
            ("value_sigma", self.value_sigma),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::InvalidParameter(alloc::format!(
                    "{name} must be finite and non-negative, got {x}"
                )));
            }
        }
        Ok(())
    }

    pub fn generate(&self, seed: u64) -> Result<Instance> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let d = self.d;
        let q_centers = gaussian(&mut rng, &unit, self.q_blobs * d, self.center_scale);
        let k_centers = gaussian(&mut rng, &unit, self.k_blobs * d, self.center_scale);
        let v_centers = gaussian(&mut rng, &unit, self.k_blobs * d, 1.0);

        let mut q = Vec::with_capacity(self.n_q * d);
        for _ in 0..self.n_q {
            let c = rng.random_range(0..self.q_blobs);
            for t in 0..d {
                q.push(q_centers[c * d + t] + self.sigma * unit.sample(&mut rng));
            }
        }
        let mut k = Vec::with_capacity(self.n_k * d);
        let mut v = Vec::with_capacity(self.n_k * d);
        for _ in 0..self.n_k {
            let c = rng.random_range(0..self.k_blobs);
            for t in 0..d {
                k.push(k_centers[c * d + t] + self.sigma * unit.sample(&mut rng));
            }
            for t in 0..d {
                v.push(v_centers[c * d + t] + self.value_sigma * unit.sample(&mut rng));
            }
        }
        Instance::new(
            TokenMatrix::new(self.n_q, d, q)?,
            TokenMatrix::new(self.n_k, d, k)?,
            TokenMatrix::new(self.n_k, d, v)?,
        )
    }
}

fn gaussian(rng: &mut ChaCha8Rng, unit: &Normal<f64>, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * unit.sample(rng)).collect()
}

/// Unstructured instance: every coordinate from `N(0, scale²)`.
pub fn gaussian_instance(n_q: usize, n_k: usize, d: usize, scale: f64, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    Instance::new(
        TokenMatrix::new(n_q, d, gaussian(&mut rng, &unit, n_q * d, scale))?,
        TokenMatrix::new(n_k, d, gaussian(&mut rng, &unit, n_k * d, scale))?,
        TokenMatrix::new(n_k, d, gaussian(&mut rng, &unit, n_k * d, 1.0))?,
    )
}

/// An instance whose tokens come in exact copies, with the cluster labels
/// that group the copies.
#[derive(Debug, Clone, PartialEq)]
pub struct DuplicatedInstance {
    pub instance: Instance,
    pub q_labels: Vec<usize>,
    pub k_labels: Vec<usize>,
}

/// `distinct_q` query prototypes and `distinct_k` key/value prototypes, each
/// repeated `copies` times in a seeded shuffled order. A key's copies share
/// its value row too, so the clustering by label has zero error everywhere.
pub fn duplicated_instance(
    distinct_q: usize,
    distinct_k: usize,
    copies: usize,
    d: usize,
    scale: f64,
    seed: u64,
) -> Result<DuplicatedInstance> {
    if distinct_q == 0 || distinct_k == 0 || copies == 0 || d == 0 {
        return Err(Error::InvalidParameter("counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let qp = gaussian(&mut rng, &unit, distinct_q * d, scale);
    let kp = gaussian(&mut rng, &unit, distinct_k * d, scale);
    let vp = gaussian(&mut rng, &unit, distinct_k * d, 1.0);
    let q_labels = shuffled_labels(&mut rng, distinct_q, copies);
    let k_labels = shuffled_labels(&mut rng, distinct_k, copies);
    let expand = |proto: &[f64], labels: &[usize]| -> Vec<f64> {
        labels
            .iter()
            .flat_map(|&l| proto[l * d..(l + 1) * d].iter().copied())
            .collect()
    };
    let instance = Instance::new(
        TokenMatrix::new(q_labels.len(), d, expand(&qp, &q_labels))?,
        TokenMatrix::new(k_labels.len(), d, expand(&kp, &k_labels))?,
        TokenMatrix::new(k_labels.len(), d, expand(&vp, &k_labels))?,
    )?;
    Ok(DuplicatedInstance {
        instance,
        q_labels,
        k_labels,
    })
}

fn shuffled_labels(rng: &mut ChaCha8Rng, distinct: usize, copies: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut labels: Vec<usize> = (0..distinct * copies).map(|i| i % distinct).collect();
    labels.shuffle(rng);
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::ClusterModel;

    #[test]
    fn generation_is_deterministic() {
        let blobs = BlobSpec::new(16, 24, 4);
        assert_eq!(blobs.generate(5).unwrap(), blobs.generate(5).unwrap());
        assert_ne!(blobs.generate(5).unwrap(), blobs.generate(6).unwrap());
    }

    #[test]
    fn zero_sigma_collapses_onto_centers() {
        let blobs = BlobSpec::new(40, 40, 3).blobs(1, 2).sigma(0.0);
        let inst = blobs.generate(1).unwrap();
        for i in 1..40 {
            assert_eq!(inst.q.row(i), inst.q.row(0));
        }
    }

    #[test]
    fn duplicates_have_zero_cluster_error() {
        let dup = duplicated_instance(3, 5, 4, 6, 1.0, 2).unwrap();
        let inst = &dup.instance;
        assert_eq!(inst.n_q(), 12);
        assert_eq!(inst.n_k(), 20);
        let km = ClusterModel::from_assignments(&inst.k, dup.k_labels.clone(), 5).unwrap();
        assert_eq!(km.quality(&inst.k).delta_sq, 0.0);
        let vbar = km.means_of(&inst.v).unwrap();
        for j in 0..20 {
            assert_eq!(vbar.row(dup.k_labels[j]), inst.v.row(j));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(BlobSpec::new(0, 4, 2).generate(0).is_err());
        assert!(BlobSpec::new(4, 4, 2).sigma(-1.0).generate(0).is_err());
        assert!(duplicated_instance(0, 1, 1, 1, 1.0, 0).is_err());
    }
}
