//! Classification, distribution and pitch metrics.

use std::collections::BTreeSet;

use super::linalg::{matmul, sym_matrix_sqrt};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unweighted mean of per-class F1 over every class that occurs in either
/// `pred` or `truth`. A class with no true positives scores 0.
pub fn macro_f1(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::contract("macro F1 of an empty prediction set"));
    }
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let classes: BTreeSet<u8> = pred.iter().chain(truth).copied().collect();
    let mut total = 0.0;
    for &c in &classes {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        if tp > 0 {
            total += 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
        }
    }
    Ok(total / classes.len() as f64)
}

/// Mean vector and full covariance (divided by N) of a point set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Statistics of the rows of `points` ([N, dim]).
    pub fn from_rows(points: &Tensor) -> Result<Self> {
        if points.rank() != 2 {
            return Err(Error::dim("gaussian_stats", format!("need [N, dim], got {:?}", points.shape())));
        }
        let (n, d) = (points.shape()[0], points.shape()[1]);
        let mut mean = vec![0.0; d];
        for row in points.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for row in points.data().chunks(d) {
            for i in 0..d {
                let di = row[i] - mean[i];
                for j in 0..d {
                    cov[i * d + j] += di * (row[j] - mean[j]) / n as f64;
                }
            }
        }
        Ok(GaussianStats { mean, cov })
    }
}

/// Fréchet distance between two Gaussians:
/// ‖μa − μb‖² + Tr(Σa + Σb − 2·(Σa^½ Σb Σa^½)^½).
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let n = a.dim();
    if b.dim() != n || a.cov.len() != n * n || b.cov.len() != n * n {
        return Err(Error::contract(format!("Fréchet distance of {n}-d and {}-d statistics", b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let ra = sym_matrix_sqrt(n, &a.cov)?;
    let mut inner = matmul(n, &matmul(n, &ra, &b.cov), &ra);
    // Symmetrise away rounding before the second square root.
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (inner[i * n + j] + inner[j * n + i]);
            inner[i * n + j] = s;
            inner[j * n + i] = s;
        }
    }
    let root = sym_matrix_sqrt(n, &inner)?;
    let trace = |m: &[f64]| (0..n).map(|i| m[i * n + i]).sum::<f64>();
    Ok(mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * trace(&root))
}

/// Per-frame argmax bin of a [T, D] spectrogram; ties go to the lower bin.
pub fn extract_pitch_contour(x: &Tensor) -> Vec<usize> {
    let d = x.shape()[1];
    x.data()
        .chunks(d)
        .map(|frame| {
            let mut best = 0;
            for (i, &v) in frame.iter().enumerate() {
                if v > frame[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Fraction of frames whose bins differ by at most `tol`.
pub fn raw_pitch_accuracy(pred: &[usize], truth: &[usize], tol: usize) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::contract(format!(
            "pitch contours of lengths {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p.abs_diff(**t) <= tol).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn f1_hand_values() {
        assert_eq!(macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        let v = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert!(macro_f1(&[], &[]).is_err());
        assert!(macro_f1(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        let a = GaussianStats {
            mean: vec![1.0, 2.0],
            cov: vec![2.0, 0.3, 0.3, 1.0],
        };
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        let b = GaussianStats {
            mean: vec![4.0, -2.0],
            ..a.clone()
        };
        assert!((frechet_distance(&a, &b).unwrap() - 25.0).abs() < 1e-8);
        let s1 = GaussianStats { mean: vec![0.0], cov: vec![1.0] };
        let s4 = GaussianStats { mean: vec![0.0], cov: vec![4.0] };
        assert!((frechet_distance(&s1, &s4).unwrap() - 1.0).abs() < 1e-8);
        assert!(frechet_distance(&s1, &a).is_err());
    }

    #[test]
    fn frechet_is_symmetric() {
        let mut rng = Rng::seed_from_u64(4);
        let mut pts = |n: usize| {
            let data = (0..n * 4).map(|_| rng.normal()).collect();
            GaussianStats::from_rows(&Tensor::new(&[n, 4], data).unwrap()).unwrap()
        };
        let (a, b) = (pts(50), pts(70));
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-8, "{ab} {ba}");
    }

    #[test]
    fn contour_rules() {
        let x = Tensor::new(&[2, 3], vec![0.5, 0.5, 0.5, 0.1, 0.9, 0.2]).unwrap();
        assert_eq!(extract_pitch_contour(&x), vec![0, 1]);
    }

    #[test]
    fn rpa_counting() {
        assert_eq!(raw_pitch_accuracy(&[3, 4], &[3, 4], 0).unwrap(), 1.0);
        assert_eq!(raw_pitch_accuracy(&[1, 2], &[3, 4], 1).unwrap(), 0.0);
        assert_eq!(raw_pitch_accuracy(&[4, 4], &[3, 4], 1).unwrap(), 1.0);
        assert_eq!(raw_pitch_accuracy(&[4, 4], &[3, 4], 0).unwrap(), 0.5);
        assert!(raw_pitch_accuracy(&[1], &[1, 2], 0).is_err());
    }
}
