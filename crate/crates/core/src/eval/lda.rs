//! Gaussian linear discriminant analysis with a shared covariance.

use super::linalg::{cholesky, cholesky_solve};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LdaModel {
    pub classes: Vec<u8>,
    /// Σ⁻¹·μ_k per class.
    weights: Vec<Vec<f64>>,
    /// −½·μ_kᵀΣ⁻¹μ_k + ln π_k per class.
    offsets: Vec<f64>,
}

/// Fits class means, priors and the pooled maximum-likelihood covariance of
/// the rows of `features` (`n × dim`), adding a ridge of 1e-6·trace/dim.
pub fn lda_fit(features: &[f64], dim: usize, labels: &[u8]) -> Result<LdaModel> {
    let n = labels.len();
    if dim == 0 || features.len() != n * dim {
        return Err(Error::dim("lda_fit", format!("{} values for {n} × {dim}", features.len())));
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::contract("LDA needs at least two classes"));
    }
    let counts: Vec<usize> = classes.iter().map(|c| labels.iter().filter(|&l| l == c).count()).collect();
    if counts.iter().any(|&c| c < 2) {
        return Err(Error::contract("every LDA class needs two or more samples"));
    }
    let mut means = vec![vec![0.0; dim]; classes.len()];
    for (row, l) in features.chunks(dim).zip(labels) {
        let k = classes.binary_search(l).expect("class");
        for (m, v) in means[k].iter_mut().zip(row) {
            *m += v / counts[k] as f64;
        }
    }
    let mut cov = vec![0.0; dim * dim];
    for (row, l) in features.chunks(dim).zip(labels) {
        let mu = &means[classes.binary_search(l).expect("class")];
        for i in 0..dim {
            let di = row[i] - mu[i];
            for j in 0..dim {
                cov[i * dim + j] += di * (row[j] - mu[j]) / n as f64;
            }
        }
    }
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    let ridge = (1e-6 * trace / dim as f64).max(1e-12);
    for i in 0..dim {
        cov[i * dim + i] += ridge;
    }
    let l = cholesky(dim, &cov)?;
    let mut weights = Vec::with_capacity(classes.len());
    let mut offsets = Vec::with_capacity(classes.len());
    for (mu, &count) in means.iter().zip(&counts) {
        let w = cholesky_solve(dim, &l, mu);
        let quad: f64 = w.iter().zip(mu).map(|(a, b)| a * b).sum();
        offsets.push(-0.5 * quad + (count as f64 / n as f64).ln());
        weights.push(w);
    }
    Ok(LdaModel {
        classes,
        weights,
        offsets,
    })
}

impl LdaModel {
    pub fn dim(&self) -> usize {
        self.weights[0].len()
    }

    /// Class with the largest discriminant per row; ties go to the lower label.
    pub fn predict(&self, features: &[f64]) -> Result<Vec<u8>> {
        let dim = self.dim();
        if !features.len().is_multiple_of(dim) {
            return Err(Error::dim("lda_predict", format!("{} values for dim {dim}", features.len())));
        }
        Ok(features
            .chunks(dim)
            .map(|x| {
                let mut best = (f64::NEG_INFINITY, self.classes[0]);
                for ((w, b), &c) in self.weights.iter().zip(&self.offsets).zip(&self.classes) {
                    let score = w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b;
                    if score > best.0 {
                        best = (score, c);
                    }
                }
                best.1
            })
            .collect())
    }
}
