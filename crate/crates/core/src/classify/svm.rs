//! Gaussian-kernel soft-margin SVM trained by sequential minimal optimisation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximal KKT violation at termination.
pub const SMO_TOLERANCE: f64 = 1e-5;
const TAU: f64 = 1e-12;

pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

/// Dense symmetric kernel matrix of `rows`.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    n: usize,
    k: Vec<f64>,
}

impl KernelMatrix {
    pub fn rbf(rows: &[Vec<f64>], gamma: f64) -> Self {
        let n = rows.len();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            k[i * n + i] = 1.0;
            for j in 0..i {
                let v = rbf(&rows[i], &rows[j], gamma);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        Self { n, k }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.k[i * self.n + j]
    }
}

/// Solution of one binary dual problem over a subset of kernel rows.
#[derive(Debug, Clone)]
pub struct BinarySolution {
    /// `alpha_i`, aligned with the subset indices.
    pub alpha: Vec<f64>,
    /// Offset `b` of `f(x) = sum alpha_i y_i K(x_i, x) + b`.
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves `min 1/2 a'Qa - e'a` s.t. `0 <= a <= c`, `y'a = 0`, with
/// `Q_ij = y_i y_j K(idx_i, idx_j)`, using maximal-violating-pair selection
/// refined by second-order gain.
pub fn smo_solve(kernel: &KernelMatrix, idx: &[usize], y: &[f64], c: f64) -> Result<BinarySolution> {
    let n = idx.len();
    if n != y.len() {
        return Err(Error::Structural("label and index lengths differ".into()));
    }
    if !y.iter().any(|&v| v > 0.0) || !y.iter().any(|&v| v < 0.0) {
        return Err(Error::Training("binary problem needs both classes".into()));
    }
    if !(c > 0.0) {
        return Err(Error::Parameter(format!("C must be positive, got {c}")));
    }
    let k = |a: usize, b: usize| kernel.get(idx[a], idx[b]);
    let qd: Vec<f64> = (0..n).map(|a| k(a, a)).collect();
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let max_iter = 100_000.max(100 * n);
    let mut iter = 0;
    let mut converged = false;
    let up = |a: f64, yt: f64| if yt > 0.0 { a < c } else { a > 0.0 };
    let low = |a: f64, yt: f64| if yt > 0.0 { a > 0.0 } else { a < c };
    while iter < max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if up(alpha[t], y[t]) && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !low(alpha[t], y[t]) {
                continue;
            }
            let v = -y[t] * grad[t];
            gmin = gmin.min(v);
            if i == usize::MAX {
                continue;
            }
            let b = gmax - v;
            if b > 0.0 {
                let a = (qd[i] + qd[t] - 2.0 * k(i, t)).max(TAU);
                let gain = -(b * b) / a;
                if gain <= best {
                    best = gain;
                    j = t;
                }
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < SMO_TOLERANCE {
            converged = true;
            break;
        }
        iter += 1;
        let (ai, aj) = (alpha[i], alpha[j]);
        let qij = y[i] * y[j] * k(i, j);
        if y[i] != y[j] {
            let quad = (qd[i] + qd[j] + 2.0 * qij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (qd[i] + qd[j] - 2.0 * qij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * k(t, i) * di + y[j] * k(t, j) * dj);
        }
    }
    // offset from free vectors, or the midpoint of the feasible interval
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            sum_free += yg;
            n_free += 1;
        } else if (alpha[t] >= c && y[t] < 0.0) || (alpha[t] <= 0.0 && y[t] > 0.0) {
            ub = ub.min(yg);
        } else {
            lb = lb.max(yg);
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { (ub + lb) / 2.0 };
    Ok(BinarySolution {
        alpha,
        bias: -rho,
        iterations: iter,
        converged,
    })
}

/// One pairwise machine; class `positive` has label +1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySvm {
    pub positive: usize,
    pub negative: usize,
    /// Training-row indices of the support vectors.
    pub support_indices: Vec<usize>,
    pub support_vectors: Vec<Vec<f64>>,
    /// `alpha_i y_i` per support vector.
    pub dual_coefs: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl BinarySvm {
    pub fn decision(&self, x: &[f64], gamma: f64) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.dual_coefs)
            .map(|(sv, a)| a * rbf(sv, x, gamma))
            .sum::<f64>()
            + self.bias
    }
}

/// One-vs-one ensemble of pairwise machines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub n_classes: usize,
    pub c: f64,
    pub gamma: f64,
    pub machines: Vec<BinarySvm>,
}

impl SvmModel {
    /// Distinct training rows that are support vectors of some machine.
    pub fn n_support(&self) -> usize {
        let mut all: Vec<usize> = self.machines.iter().flat_map(|m| m.support_indices.iter().copied()).collect();
        all.sort_unstable();
        all.dedup();
        all.len()
    }

    /// Pairwise votes and the summed signed decision values per class.
    pub fn votes(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut votes = vec![0.0; self.n_classes];
        let mut sums = vec![0.0; self.n_classes];
        for m in &self.machines {
            let f = m.decision(x, self.gamma);
            if f > 0.0 {
                votes[m.positive] += 1.0;
            } else {
                votes[m.negative] += 1.0;
            }
            sums[m.positive] += f;
            sums[m.negative] -= f;
        }
        (votes, sums)
    }

    pub fn predict(&self, x: &[f64]) -> (usize, Vec<f64>) {
        let (votes, sums) = self.votes(x);
        (argmax_with_tiebreak(&votes, &sums), votes)
    }
}

/// Highest `primary`; ties by highest `secondary`, then lowest index.
pub(crate) fn argmax_with_tiebreak(primary: &[f64], secondary: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..primary.len() {
        if primary[i] > primary[best] || (primary[i] == primary[best] && secondary[i] > secondary[best]) {
            best = i;
        }
    }
    best
}

/// Trains one-vs-one machines on `rows` (indices into the kernel matrix).
/// Pairs where either class is absent from `rows` are skipped.
pub fn train_ovo(
    kernel: &KernelMatrix,
    x: &[Vec<f64>],
    labels: &[usize],
    rows: &[usize],
    n_classes: usize,
    c: f64,
    gamma: f64,
) -> Result<SvmModel> {
    let mut present = vec![false; n_classes];
    for &r in rows {
        present[labels[r]] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Training("SVM training needs at least two classes".into()));
    }
    let mut machines = Vec::new();
    for a in 0..n_classes {
        for b in a + 1..n_classes {
            if !present[a] || !present[b] {
                continue;
            }
            let idx: Vec<usize> = rows.iter().copied().filter(|&r| labels[r] == a || labels[r] == b).collect();
            let y: Vec<f64> = idx.iter().map(|&r| if labels[r] == a { 1.0 } else { -1.0 }).collect();
            let sol = smo_solve(kernel, &idx, &y, c)?;
            let mut m = BinarySvm {
                positive: a,
                negative: b,
                support_indices: Vec::new(),
                support_vectors: Vec::new(),
                dual_coefs: Vec::new(),
                bias: sol.bias,
                iterations: sol.iterations,
                converged: sol.converged,
            };
            for (t, &al) in sol.alpha.iter().enumerate() {
                if al > 0.0 {
                    m.support_indices.push(idx[t]);
                    m.support_vectors.push(x[idx[t]].clone());
                    m.dual_coefs.push(al * y[t]);
                }
            }
            machines.push(m);
        }
    }
    Ok(SvmModel {
        n_classes,
        c,
        gamma,
        machines,
    })
}

/// Exponent grids for `C` and `gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmGrid {
    pub c: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Default for SvmGrid {
    fn default() -> Self {
        Self {
            c: (-5..=25).step_by(2).map(|e| 2f64.powi(e)).collect(),
            gamma: (-15..=3).step_by(2).map(|e| 2f64.powi(e)).collect(),
        }
    }
}

impl SvmGrid {
    /// Powers of two with the given exponents.
    pub fn from_exponents(c: &[i32], gamma: &[i32]) -> Self {
        Self {
            c: c.iter().map(|&e| 2f64.powi(e)).collect(),
            gamma: gamma.iter().map(|&e| 2f64.powi(e)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c.is_empty() || self.gamma.is_empty() {
            return Err(Error::Parameter("SVM grid must be non-empty".into()));
        }
        if self.c.iter().chain(&self.gamma).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Parameter("SVM grid values must be positive".into()));
        }
        Ok(())
    }
}

/// Assigns rows to `folds` folds, stratified by label, deterministically.
pub fn stratified_folds(labels: &[usize], rows: &[usize], folds: usize) -> Vec<usize> {
    let mut fold = vec![0; rows.len()];
    let n_classes = rows.iter().map(|&r| labels[r] + 1).max().unwrap_or(0);
    for c in 0..n_classes {
        for (k, pos) in (0..rows.len()).filter(|&p| labels[rows[p]] == c).enumerate() {
            fold[pos] = k % folds;
        }
    }
    fold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub c: f64,
    pub gamma: f64,
    pub cv_accuracy: f64,
}

/// Inner cross-validated grid search over `rows`. Ties go to the smaller `C`,
/// then the smaller `gamma`.
pub fn grid_search(
    x: &[Vec<f64>],
    labels: &[usize],
    rows: &[usize],
    n_classes: usize,
    grid: &SvmGrid,
    folds: usize,
) -> Result<GridResult> {
    grid.validate()?;
    if folds < 2 {
        return Err(Error::Parameter(format!("inner CV needs at least 2 folds, got {folds}")));
    }
    let fold = stratified_folds(labels, rows, folds);
    let mut gammas: Vec<f64> = grid.gamma.clone();
    gammas.sort_by(f64::total_cmp);
    let mut cs: Vec<f64> = grid.c.clone();
    cs.sort_by(f64::total_cmp);
    let sub_x: Vec<Vec<f64>> = rows.iter().map(|&r| x[r].clone()).collect();
    let sub_labels: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    // accuracy[gamma][c]
    let acc: Vec<Vec<f64>> = gammas
        .par_iter()
        .map(|&g| -> Result<Vec<f64>> {
            let km = KernelMatrix::rbf(&sub_x, g);
            cs.iter()
                .map(|&c| {
                    let mut correct = 0usize;
                    for f in 0..folds {
                        let train: Vec<usize> = (0..rows.len()).filter(|&p| fold[p] != f).collect();
                        let test: Vec<usize> = (0..rows.len()).filter(|&p| fold[p] == f).collect();
                        if test.is_empty() {
                            continue;
                        }
                        let model = match train_ovo(&km, &sub_x, &sub_labels, &train, n_classes, c, g) {
                            Ok(m) => m,
                            Err(Error::Training(_)) => continue,
                            Err(e) => return Err(e),
                        };
                        for &t in &test {
                            if model.predict(&sub_x[t]).0 == sub_labels[t] {
                                correct += 1;
                            }
                        }
                    }
                    Ok(correct as f64 / rows.len() as f64)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut best = GridResult {
        c: cs[0],
        gamma: gammas[0],
        cv_accuracy: f64::NEG_INFINITY,
    };
    for (ci, &c) in cs.iter().enumerate() {
        for (gi, &g) in gammas.iter().enumerate() {
            if acc[gi][ci] > best.cv_accuracy {
                best = GridResult {
                    c,
                    gamma: g,
                    cv_accuracy: acc[gi][ci],
                };
            }
        }
    }
    Ok(best)
}

/// Grid search followed by a final fit on all `rows`.
pub fn train_svm_grid(
    x: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    grid: &SvmGrid,
    folds: usize,
) -> Result<(SvmModel, GridResult)> {
    let rows: Vec<usize> = (0..x.len()).collect();
    let best = if grid.c.len() == 1 && grid.gamma.len() == 1 {
        GridResult {
            c: grid.c[0],
            gamma: grid.gamma[0],
            cv_accuracy: f64::NAN,
        }
    } else {
        grid_search(x, labels, &rows, n_classes, grid, folds)?
    };
    let km = KernelMatrix::rbf(x, best.gamma);
    let model = train_ovo(&km, x, labels, &rows, n_classes, best.c, best.gamma)?;
    Ok((model, best))
}
