//! Quadrature rules generated from moments.
//!
//! The Gram matrix is factored as `L Lᵀ`, each coordinate multiplication
//! operator is expressed in the resulting orthonormal basis as
//! `L⁻¹ H_i L⁻ᵀ`, and the rule is assembled from the eigenpairs of those
//! matrices: nodes are all Cartesian combinations of the per-coordinate
//! eigenvalues, and the weight of `(n_1, …, n_d)` is
//! `⟨e₀, u_{n_1}⟩ · ∏ ⟨u_{n_i}, u_{n_{i+1}}⟩ · ⟨u_{n_d}, e₀⟩`.
//! For `d = 1` this is the Golub–Welsch rule built from the Jacobi matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::momentspace::{BasisLayout, GramMatrix, HankelStack, MomentSet};

const SYMMETRY_TOL: f64 = 1e-8;
const TRIDIAGONAL_TOL: f64 = 1e-8;
const EIG_MAX_ITER: usize = 10_000;
const PIVOT_TOL: f64 = 16.0 * f64::EPSILON;

/// Lower Cholesky factor with a strictly positive diagonal.
///
/// Fails on the first pivot that is not positive relative to round-off in
/// the corresponding diagonal entry.
pub fn cholesky_pd(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = g.nrows();
    if g.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: g.ncols(),
        });
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut pivot = g[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        // a pivot lost to cancellation counts as zero
        if !(pivot > PIVOT_TOL * g[(j, j)].abs()) || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: pivot });
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = g[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// `L·sqrt(D)` from an LDLᵀ factorization in which every entry of `D` below
/// `epsilon` has been replaced by `epsilon`.
///
/// Always succeeds; the product of the factor with its transpose is a
/// positive-definite matrix close to `g`.
pub fn ldl_clipped(g: &DMatrix<f64>, epsilon: f64) -> DMatrix<f64> {
    let n = g.nrows();
    let mut l = DMatrix::<f64>::identity(n, n);
    let mut diag = vec![0.0; n];
    for j in 0..n {
        let mut dj = g[(j, j)];
        for k in 0..j {
            dj -= l[(j, k)] * l[(j, k)] * diag[k];
        }
        if !(dj >= epsilon) {
            dj = epsilon;
        }
        diag[j] = dj;
        for i in j + 1..n {
            let mut s = g[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)] * diag[k];
            }
            l[(i, j)] = s / dj;
        }
    }
    for j in 0..n {
        let r = diag[j].sqrt();
        for i in j..n {
            l[(i, j)] *= r;
        }
    }
    l
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// `L⁻¹ H L⁻ᵀ` for a supplied lower factor `L`, symmetrized.
pub fn orthonormalize_with_factor(l: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let x = l
        .solve_lower_triangular(h)
        .ok_or_else(|| Error::NonFinite("singular triangular factor".into()))?;
    let y = l
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(|| Error::NonFinite("singular triangular factor".into()))?;
    let asym = max_abs(&(&y - y.transpose()));
    let scale = max_abs(&y).max(1.0);
    if !asym.is_finite() || asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym / scale));
    }
    Ok((&y + y.transpose()) * 0.5)
}

/// Multiplication operators in the orthonormal basis induced by the Gram matrix.
pub fn orthonormalized_hankels(g: &GramMatrix, h: &HankelStack) -> Result<Vec<DMatrix<f64>>> {
    let l = cholesky_pd(&g.0)?;
    h.matrices.iter().map(|hi| orthonormalize_with_factor(&l, hi)).collect()
}

/// Three-term recurrence coefficients of the orthonormal polynomials.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobiMatrix {
    /// Diagonal, `N` entries.
    pub alpha: Vec<f64>,
    /// Off-diagonal, `N - 1` entries.
    pub beta: Vec<f64>,
}

impl JacobiMatrix {
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.alpha.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.alpha[i];
            if i + 1 < n {
                m[(i, i + 1)] = self.beta[i];
                m[(i + 1, i)] = self.beta[i];
            }
        }
        m
    }

    /// Golub–Welsch nodes and weights.
    pub fn rule(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let eig = sym_eig(&self.to_matrix())?;
        let weights = (0..eig.eigenvalues.len())
            .map(|k| eig.eigenvectors[(0, k)].powi(2))
            .collect();
        Ok((eig.eigenvalues.as_slice().to_vec(), weights))
    }
}

/// Jacobi matrix of a one-dimensional moment set, in the frame of the stored moments.
pub fn jacobi_matrix_1d(m: &MomentSet) -> Result<JacobiMatrix> {
    if m.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: m.dim(),
        });
    }
    let layout = BasisLayout::get(1, m.order());
    let j = orthonormalized_hankels(&layout.gram(m.values()), &layout.hankels(m.values()))?
        .pop()
        .expect("one coordinate");
    let n = j.nrows();
    let mut off = 0.0f64;
    for r in 0..n {
        for c in 0..n {
            if r.abs_diff(c) > 1 {
                off = off.max(j[(r, c)].abs());
            }
        }
    }
    if off > TRIDIAGONAL_TOL {
        return Err(Error::NotTridiagonal(off));
    }
    Ok(JacobiMatrix {
        alpha: (0..n).map(|i| j[(i, i)]).collect(),
        beta: (0..n.saturating_sub(1)).map(|i| j[(i, i + 1)]).collect(),
    })
}

/// Eigenpairs of a symmetric matrix: ascending eigenvalues, orthonormal
/// eigenvectors in matching columns, each with its first nonzero component positive.
#[derive(Debug, Clone, PartialEq)]
pub struct EigDecomposition {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

pub fn sym_eig(a: &DMatrix<f64>) -> Result<EigDecomposition> {
    let n = a.nrows();
    let scale = max_abs(a).max(f64::MIN_POSITIVE);
    let asym = max_abs(&(a - a.transpose()));
    if asym > 1e-10 * scale.max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix entry".into()));
    }
    let eig =
        SymmetricEigen::try_new(a.clone(), f64::EPSILON, EIG_MAX_ITER).ok_or(Error::NoConvergence(EIG_MAX_ITER))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let norm = col.norm();
        col /= norm;
        let tiny = 1e-12 * col.amax();
        if let Some(first) = col.iter().find(|v| v.abs() > tiny) {
            if *first < 0.0 {
                col = -col;
            }
        }
        eigenvectors.set_column(dst, &col);
    }
    Ok(EigDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// What to do when the Gram matrix is not positive definite.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Repair {
    #[default]
    FailFast,
    LdlClip {
        epsilon: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QuadratureOptions {
    pub repair: Repair,
    /// Nodes with `|w| <= weight_threshold` are dropped when the threshold is positive.
    pub weight_threshold: f64,
}

/// `S^d` nodes (state coordinates) and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    dim: usize,
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    repaired: bool,
}

impl QuadratureRule {
    pub fn new(dim: usize, order: usize, nodes: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if nodes.len() != dim * weights.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * weights.len(),
                found: nodes.len(),
            });
        }
        Ok(QuadratureRule {
            dim,
            order,
            nodes,
            weights,
            repaired: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[f64]> {
        self.nodes.chunks_exact(self.dim)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Whether the Gram factor came from the clipped LDL repair.
    pub fn repaired(&self) -> bool {
        self.repaired
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Total magnitude of the negative weights.
    pub fn negative_mass(&self) -> f64 {
        self.weights.iter().filter(|w| **w < 0.0).map(|w| -w).sum()
    }

    /// `Σ w f(λ)` accumulated in node order.
    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> Result<f64> {
        let mut acc = 0.0;
        for (x, w) in self.nodes().zip(&self.weights) {
            let v = f(x);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("integrand at {x:?}")));
            }
            acc += w * v;
        }
        Ok(acc)
    }

    fn filtered(mut self, threshold: f64) -> Self {
        if threshold > 0.0 {
            let dim = self.dim;
            let keep: Vec<usize> = (0..self.len()).filter(|&i| self.weights[i].abs() > threshold).collect();
            self.nodes = keep
                .iter()
                .flat_map(|&i| self.nodes[i * dim..(i + 1) * dim].to_vec())
                .collect();
            self.weights = keep.iter().map(|&i| self.weights[i]).collect();
        }
        self
    }
}

/// See [`QuadratureRule::integrate`].
pub fn integrate(rule: &QuadratureRule, f: impl FnMut(&[f64]) -> f64) -> Result<f64> {
    rule.integrate(f)
}

/// Quadrature rule of order `N` from a moment set (fail-fast on invalid Gram).
pub fn moment_quadrature(m: &MomentSet) -> Result<QuadratureRule> {
    moment_quadrature_with(m, &QuadratureOptions::default())
}

pub fn moment_quadrature_with(m: &MomentSet, opts: &QuadratureOptions) -> Result<QuadratureRule> {
    let d = m.dim();
    let layout = BasisLayout::get(d, m.order());
    let gram = layout.gram(m.values());
    let hankels = layout.hankels(m.values());

    let (l, repaired) = match cholesky_pd(&gram.0) {
        Ok(l) => (l, false),
        Err(e @ Error::NotPositiveDefinite { .. }) => match opts.repair {
            Repair::FailFast => return Err(e),
            Repair::LdlClip { epsilon } => (ldl_clipped(&gram.0, epsilon), true),
        },
        Err(e) => return Err(e),
    };

    let eigs = hankels
        .matrices
        .iter()
        .map(|h| orthonormalize_with_factor(&l, h).and_then(|o| sym_eig(&o)))
        .collect::<Result<Vec<_>>>()?;

    let s = layout.size;
    // overlaps[i] = U_iᵀ U_{i+1}
    let overlaps: Vec<DMatrix<f64>> = eigs
        .windows(2)
        .map(|w| w[0].eigenvectors.transpose() * &w[1].eigenvectors)
        .collect();

    let total = s.pow(d as u32);
    let mut nodes = Vec::with_capacity(total * d);
    let mut weights = Vec::with_capacity(total);
    let mut tuple = vec![0usize; d];
    for _ in 0..total {
        let mut w = eigs[0].eigenvectors[(0, tuple[0])];
        for i in 0..d - 1 {
            w *= overlaps[i][(tuple[i], tuple[i + 1])];
        }
        w *= eigs[d - 1].eigenvectors[(0, tuple[d - 1])];
        weights.push(w);
        for i in 0..d {
            let lam = eigs[i].eigenvalues[tuple[i]];
            nodes.push(m.center()[i] + m.scale()[i] * lam);
        }
        // last coordinate varies fastest
        for i in (0..d).rev() {
            tuple[i] += 1;
            if tuple[i] < s {
                break;
            }
            tuple[i] = 0;
        }
    }
    if nodes.iter().chain(&weights).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quadrature node or weight".into()));
    }
    let mut rule = QuadratureRule::new(d, m.order(), nodes, weights)?;
    rule.repaired = repaired;
    Ok(rule.filtered(opts.weight_threshold))
}

/// Probabilists' Gauss–Hermite rule with `n` points for the standard normal.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one node".into()));
    }
    JacobiMatrix {
        alpha: vec![0.0; n],
        beta: (1..n).map(|k| (k as f64).sqrt()).collect(),
    }
    .rule()
}
