//! Least-squares polynomial regression for conditional expectations.
//!
//! Regressors are standardized and both the design columns and the targets
//! are centered, so the constant basis function is handled by the sample
//! mean. A constant target is therefore reproduced exactly.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

const CHUNK: usize = 512;
/// Smallest admissible ratio of extreme eigenvalues of the design Gram matrix.
const RANK_TOL: f64 = 1e-10;

/// Evaluated polynomial basis (without the constant) on every sample row.
#[derive(Clone, Debug)]
pub struct Design {
    phi: DMatrix<f64>,
    /// Centered Gram matrix and column means over all rows.
    full_gram: (DMatrix<f64>, DVector<f64>),
    degree: usize,
    requested: usize,
    varying_features: usize,
}

impl Design {
    /// Builds monomials of total degree `1..=max_degree` in the standardized
    /// columns of `features` (one row per sample). Features that do not vary
    /// over the sample are dropped. When the Gram matrix is numerically
    /// singular the degree is lowered until it is not; degree 0 (mean only)
    /// always succeeds.
    pub fn build(features: &DMatrix<f64>, max_degree: usize) -> Self {
        let n = features.nrows();
        let mut cols = Vec::new();
        for j in 0..features.ncols() {
            let c = features.column(j);
            let mean = c.sum() / n as f64;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            if sd > 1e-13 * (1.0 + mean.abs()) {
                cols.push(c.map(|v| (v - mean) / sd));
            }
        }
        let varying_features = cols.len();
        let mut degree = if cols.is_empty() { 0 } else { max_degree };
        loop {
            let exps = monomials(cols.len(), degree);
            let mut phi = DMatrix::zeros(n, exps.len());
            for (k, e) in exps.iter().enumerate() {
                for r in 0..n {
                    phi[(r, k)] = e.iter().enumerate().map(|(j, p)| cols[j][r].powi(*p as i32)).product();
                }
            }
            let rows: Vec<usize> = (0..n).collect();
            let full_gram = centered_gram(&phi, &rows);
            let design = Self {
                phi,
                full_gram,
                degree,
                requested: max_degree,
                varying_features,
            };
            if degree == 0 || design.full_rank() {
                return design;
            }
            degree -= 1;
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn requested_degree(&self) -> usize {
        self.requested
    }

    /// Number of regressors that vary over the sample.
    pub fn varying_features(&self) -> usize {
        self.varying_features
    }

    pub fn n_rows(&self) -> usize {
        self.phi.nrows()
    }

    pub fn n_basis(&self) -> usize {
        self.phi.ncols()
    }

    fn full_rank(&self) -> bool {
        let eig = self.full_gram.0.clone().symmetric_eigen().eigenvalues;
        let max = eig.iter().fold(0.0_f64, |m, v| m.max(*v));
        let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        max > 0.0 && min >= RANK_TOL * max
    }

    /// Least-squares solver on a subset of rows.
    pub fn projector(&self, rows: Vec<usize>) -> Projector {
        let (gram, mean) = centered_gram(&self.phi, &rows);
        self.projector_from(rows, gram, mean)
    }

    fn projector_from(&self, rows: Vec<usize>, gram: DMatrix<f64>, mean: DVector<f64>) -> Projector {
        let (svd, cutoff) = if self.n_basis() == 0 {
            (None, 0.0)
        } else {
            let svd = gram.svd(true, true);
            let top = svd.singular_values.iter().fold(0.0_f64, |m, v| m.max(*v));
            (Some(svd), RANK_TOL * top)
        };
        Projector {
            rows,
            mean,
            svd,
            cutoff,
        }
    }

    pub fn full_projector(&self) -> Projector {
        let (gram, mean) = self.full_gram.clone();
        self.projector_from((0..self.n_rows()).collect(), gram, mean)
    }
}

/// Exponent vectors of all monomials in `d` variables with total degree
/// between 1 and `degree`, in graded order.
fn monomials(d: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for total in 1..=degree {
        let mut cur = vec![0; d];
        fill(&mut out, &mut cur, 0, total);
    }
    out
}

fn fill(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, pos: usize, left: usize) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for k in (0..=left).rev() {
        cur[pos] = k;
        fill(out, cur, pos + 1, left - k);
    }
    cur[pos] = 0;
}

fn column_means(m: &DMatrix<f64>, rows: &[usize]) -> DVector<f64> {
    let mut mean = DVector::zeros(m.ncols());
    for &r in rows {
        for c in 0..m.ncols() {
            mean[c] += m[(r, c)];
        }
    }
    mean / rows.len().max(1) as f64
}

/// Target means, with exactly-constant columns returning their common value.
fn target_means(t: &DMatrix<f64>, rows: &[usize]) -> DVector<f64> {
    let mut mean = column_means(t, rows);
    for c in 0..t.ncols() {
        if let Some(&first) = rows.first() {
            let v = t[(first, c)];
            if rows.iter().all(|&r| t[(r, c)] == v) {
                mean[c] = v;
            }
        }
    }
    mean
}

fn gather_centered(m: &DMatrix<f64>, rows: &[usize], mean: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, c| m[(rows[i], c)] - mean[c])
}

/// `Σ (a_r - ā)(b_r - b̄)ᵀ` over `rows`, accumulated in fixed-size chunks in
/// parallel and summed in chunk order.
fn cross(
    a: &DMatrix<f64>,
    a_mean: &DVector<f64>,
    b: &DMatrix<f64>,
    b_mean: &DVector<f64>,
    rows: &[usize],
) -> DMatrix<f64> {
    let parts: Vec<DMatrix<f64>> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let ac = gather_centered(a, chunk, a_mean);
            let bc = gather_centered(b, chunk, b_mean);
            ac.tr_mul(&bc)
        })
        .collect();
    let mut acc = DMatrix::zeros(a.ncols(), b.ncols());
    for p in parts {
        acc += p;
    }
    acc
}

fn centered_gram(phi: &DMatrix<f64>, rows: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let mean = column_means(phi, rows);
    let gram = cross(phi, &mean, phi, &mean, rows) / rows.len().max(1) as f64;
    (gram, mean)
}

pub struct Projector {
    rows: Vec<usize>,
    mean: DVector<f64>,
    svd: Option<nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    cutoff: f64,
}

/// Fitted coefficients: prediction is `t̄ + (φ - φ̄) β`.
pub struct Fit {
    phi_mean: DVector<f64>,
    target_mean: DVector<f64>,
    beta: DMatrix<f64>,
}

impl Projector {
    /// Regresses the rows of `targets` (one row per sample) on the design.
    pub fn fit(&self, design: &Design, targets: &DMatrix<f64>) -> Fit {
        let t_mean = target_means(targets, &self.rows);
        let k = design.n_basis();
        let beta = match &self.svd {
            None => DMatrix::zeros(0, targets.ncols()),
            Some(svd) => {
                let rhs = cross(&design.phi, &self.mean, targets, &t_mean, &self.rows) / self.rows.len() as f64;
                svd.solve(&rhs, self.cutoff)
                    .unwrap_or_else(|_| DMatrix::zeros(k, targets.ncols()))
            }
        };
        Fit {
            phi_mean: self.mean.clone(),
            target_mean: t_mean,
            beta,
        }
    }
}

impl Fit {
    /// Predictions on every row of the design.
    pub fn predict(&self, design: &Design) -> DMatrix<f64> {
        let n = design.n_rows();
        let m = self.target_mean.len();
        let mut out = DMatrix::from_fn(n, m, |_, c| self.target_mean[c]);
        if design.n_basis() > 0 {
            let centered = DMatrix::from_fn(n, design.n_basis(), |r, c| design.phi[(r, c)] - self.phi_mean[c]);
            out += centered * &self.beta;
        }
        out
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.beta
    }
}

/// Fitted values of `targets` on the design using all rows.
pub fn regress(design: &Design, targets: &DMatrix<f64>) -> DMatrix<f64> {
    design.full_projector().fit(design, targets).predict(design)
}

/// Two-fold cross-validated standard error of the fitted values: fits on even
/// and odd rows, and returns `RMS|f_A - f_B| / 2` over all rows and columns.
/// The two half-sample fits are independent, each with twice the variance of
/// the full fit.
pub fn cross_validated_error(design: &Design, targets: &DMatrix<f64>) -> f64 {
    let n = design.n_rows();
    if n < 4 {
        return 0.0;
    }
    let even: Vec<usize> = (0..n).step_by(2).collect();
    let odd: Vec<usize> = (1..n).step_by(2).collect();
    let fa = design.projector(even).fit(design, targets).predict(design);
    let fb = design.projector(odd).fit(design, targets).predict(design);
    let diff = fa - fb;
    let ms = diff.iter().map(|v| v * v).sum::<f64>() / diff.len().max(1) as f64;
    ms.sqrt() / 2.0
}
