use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

pub const PCA_TOL: f64 = 1e-9;
pub const PCA_MAX_ITER: usize = 10_000;

/// Leading principal axis of a spots × genes matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca1d {
    pub mean: Vec<f64>,
    /// Unit loading vector; its largest-magnitude entry is positive.
    pub loading: Vec<f64>,
    /// Variance along `loading` (population covariance).
    pub eigenvalue: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn shape(x: &[Vec<f64>]) -> Result<usize> {
    if x.len() < 2 {
        return Err(Error::InvalidInput(format!("PCA needs at least 2 rows, got {}", x.len())));
    }
    let k = x[0].len();
    if k == 0 || x.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidInput("PCA rows must be non-empty and of equal length".into()));
    }
    Ok(k)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|a| *a /= n);
    }
    n
}

/// Population covariance of the columns of `x`, row-major `k × k`.
pub fn covariance(x: &[Vec<f64>], mean: &[f64]) -> Vec<f64> {
    let k = mean.len();
    let mut cov = vec![0.0; k * k];
    let mut c = vec![0.0; k];
    for row in x {
        for ((ci, xi), mi) in c.iter_mut().zip(row).zip(mean) {
            *ci = xi - mi;
        }
        for i in 0..k {
            let ci = c[i];
            for (out, cj) in cov[i * k..(i + 1) * k].iter_mut().zip(&c) {
                *out += ci * cj;
            }
        }
    }
    let n = x.len() as f64;
    cov.iter_mut().for_each(|v| *v /= n);
    cov
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    m.chunks(v.len()).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Fits the leading principal axis by power iteration from a seeded start.
pub fn fit_pca_1d(x: &[Vec<f64>], seed: u64) -> Result<Pca1d> {
    let k = shape(x)?;
    let n = x.len() as f64;
    let mut mean = vec![0.0; k];
    for row in x {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
    }
    let cov = covariance(x, &mean);
    if cov.iter().step_by(k + 1).all(|&d| d == 0.0) {
        return Err(Error::InvalidInput("every column is constant; covariance is zero".into()));
    }

    let mut rng = stream(seed, Stream::Probe);
    let mut v: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    let (mut iterations, mut converged) = (0, false);
    while iterations < PCA_MAX_ITER {
        iterations += 1;
        let mut next = mat_vec(&cov, &v);
        if normalize(&mut next) == 0.0 {
            // Start landed in the null space; restart along the largest-variance column.
            let j = (0..k).max_by(|&a, &b| cov[a * k + a].total_cmp(&cov[b * k + b])).unwrap_or(0);
            next = vec![0.0; k];
            next[j] = 1.0;
        }
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = next;
        if delta < PCA_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("power iteration stopped after {PCA_MAX_ITER} iterations without reaching tolerance");
    }
    let pivot = (0..k).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|a| *a = -*a);
    }
    let av = mat_vec(&cov, &v);
    let eigenvalue = av.iter().zip(&v).map(|(a, b)| a * b).sum();
    Ok(Pca1d {
        mean,
        loading: v,
        eigenvalue,
        iterations,
        converged,
    })
}

impl Pca1d {
    /// Score of one row on the fitted axis.
    pub fn project(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.mean).zip(&self.loading).map(|((x, m), l)| (x - m) * l).sum()
    }

    pub fn scores(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        if x.iter().any(|r| r.len() != self.mean.len()) {
            return Err(Error::InvalidInput(format!(
                "rows must have {} columns to project",
                self.mean.len()
            )));
        }
        Ok(x.iter().map(|r| self.project(r)).collect())
    }
}

/// One-dimensional PCA scores of the rows of `x`.
pub fn pca_1d(x: &[Vec<f64>], seed: u64) -> Result<Vec<f64>> {
    fit_pca_1d(x, seed)?.scores(x)
}
