//! Multi-index bookkeeping, moment storage and the moment matrices built from it.
//!
//! Moments are stored densely, indexed by the graded-lexicographic rank of
//! their multi-index. A [`MomentSet`] may live in a standardized frame: it then
//! holds the moments of `(X - center) / scale` (element-wise), and the frame is
//! carried along so quadrature nodes can be mapped back to state coordinates.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Process-wide cache of layouts keyed by `(d, degree)`.
pub(crate) type LayoutCache<T> = OnceLock<Mutex<HashMap<(usize, usize), Arc<T>>>>;

/// Binomial coefficient `n choose k`.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// Exponent vector over the state coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(exponents: Vec<u32>) -> Self {
        assert!(!exponents.is_empty(), "multi-index needs at least one coordinate");
        MultiIndex(exponents)
    }

    pub fn zeros(d: usize) -> Self {
        MultiIndex::new(vec![0; d])
    }

    /// Unit multi-index `e_i`.
    pub fn unit(d: usize, i: usize) -> Self {
        let mut e = vec![0; d];
        e[i] = 1;
        MultiIndex::new(e)
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        debug_assert_eq!(self.dim(), other.dim());
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// Graded-lexicographic rank, i.e. the position in [`graded_lex_indices`].
    pub fn rank(&self) -> usize {
        rank_of(&self.0)
    }

    /// Evaluates the monomial `x^n`.
    pub fn monomial(&self, x: &[f64]) -> f64 {
        self.0.iter().zip(x).map(|(&e, &xi)| xi.powi(e as i32)).product()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, ")")
    }
}

pub(crate) fn rank_of(exps: &[u32]) -> usize {
    let d = exps.len();
    let deg: usize = exps.iter().map(|&e| e as usize).sum();
    let mut r = if deg == 0 { 0 } else { binomial(deg - 1 + d, d) };
    let mut rem = deg;
    for (j, &e) in exps.iter().enumerate().take(d - 1) {
        let parts = d - j - 1;
        for v in 0..e as usize {
            r += binomial(rem - v + parts - 1, parts - 1);
        }
        rem -= e as usize;
    }
    r
}

/// All multi-indices of dimension `d` with degree at most `max_degree`,
/// sorted by degree and then lexicographically.
pub fn graded_lex_indices(d: usize, max_degree: usize) -> Vec<MultiIndex> {
    assert!(d >= 1, "dimension must be at least one");
    let mut out = Vec::with_capacity(binomial(max_degree + d, d));
    let mut buf = vec![0u32; d];
    for deg in 0..=max_degree {
        push_compositions(&mut buf, 0, deg as u32, &mut out);
    }
    out
}

fn push_compositions(buf: &mut [u32], pos: usize, rem: u32, out: &mut Vec<MultiIndex>) {
    if pos + 1 == buf.len() {
        buf[pos] = rem;
        out.push(MultiIndex(buf.to_vec()));
        return;
    }
    for v in 0..=rem {
        buf[pos] = v;
        push_compositions(buf, pos + 1, rem - v, out);
    }
}

/// Graded-lex index table for `(d, max_degree)` together with a parent map used
/// to evaluate all monomials at a point with one multiplication each.
#[derive(Debug, PartialEq)]
pub struct MomentLayout {
    d: usize,
    max_degree: usize,
    indices: Vec<MultiIndex>,
    // (rank of n - e_i, i) for every rank > 0
    parents: Vec<(usize, usize)>,
}

impl MomentLayout {
    fn build(d: usize, max_degree: usize) -> Self {
        let indices = graded_lex_indices(d, max_degree);
        let mut parents = Vec::with_capacity(indices.len());
        parents.push((0, 0));
        for idx in indices.iter().skip(1) {
            let i = idx.0.iter().position(|&e| e > 0).unwrap();
            let mut p = idx.0.clone();
            p[i] -= 1;
            parents.push((rank_of(&p), i));
        }
        MomentLayout {
            d,
            max_degree,
            indices,
            parents,
        }
    }

    /// Shared, cached layout.
    pub fn get(d: usize, max_degree: usize) -> Arc<MomentLayout> {
        static CACHE: LayoutCache<MomentLayout> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        guard
            .entry((d, max_degree))
            .or_insert_with(|| Arc::new(MomentLayout::build(d, max_degree)))
            .clone()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    /// Writes `x^n` for every multi-index in the layout into `out`.
    pub fn monomials_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.d);
        out[0] = 1.0;
        for r in 1..self.indices.len() {
            let (p, i) = self.parents[r];
            out[r] = out[p] * x[i];
        }
    }

    pub fn monomials(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.monomials_into(x, &mut out);
        out
    }
}

/// Rank tables for the Gram and Hankel matrices of order `N` in dimension `d`.
#[derive(Debug)]
pub struct BasisLayout {
    pub d: usize,
    pub order: usize,
    /// Number of basis monomials, `binom(N - 1 + d, N - 1)`.
    pub size: usize,
    pub gram_ranks: Vec<usize>,
    pub hankel_ranks: Vec<Vec<usize>>,
}

impl BasisLayout {
    fn build(d: usize, order: usize) -> Self {
        let basis = graded_lex_indices(d, order - 1);
        let size = basis.len();
        let mut gram_ranks = Vec::with_capacity(size * size);
        for u in &basis {
            for v in &basis {
                gram_ranks.push(u.add(v).rank());
            }
        }
        let hankel_ranks = (0..d)
            .map(|i| {
                let e = MultiIndex::unit(d, i);
                let mut ranks = Vec::with_capacity(size * size);
                for u in &basis {
                    for v in &basis {
                        ranks.push(u.add(v).add(&e).rank());
                    }
                }
                ranks
            })
            .collect();
        BasisLayout {
            d,
            order,
            size,
            gram_ranks,
            hankel_ranks,
        }
    }

    pub fn get(d: usize, order: usize) -> Arc<BasisLayout> {
        static CACHE: LayoutCache<BasisLayout> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        guard
            .entry((d, order))
            .or_insert_with(|| Arc::new(BasisLayout::build(d, order)))
            .clone()
    }

    pub fn gram(&self, values: &[f64]) -> GramMatrix {
        let s = self.size;
        GramMatrix(DMatrix::from_fn(s, s, |i, j| values[self.gram_ranks[i * s + j]]))
    }

    pub fn hankels(&self, values: &[f64]) -> HankelStack {
        let s = self.size;
        HankelStack {
            matrices: self
                .hankel_ranks
                .iter()
                .map(|ranks| DMatrix::from_fn(s, s, |i, j| values[ranks[i * s + j]]))
                .collect(),
        }
    }
}

/// Gram matrix of monomial basis functions, `G[i][j] = m_{n_i + n_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(pub DMatrix<f64>);

/// Matrices of the coordinate multiplication operators in the monomial basis.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelStack {
    pub matrices: Vec<DMatrix<f64>>,
}

/// All moments of degree at most `2N - 1` of a `d`-dimensional measure.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    order: usize,
    values: Vec<f64>,
    center: Vec<f64>,
    scale: Vec<f64>,
    layout: Arc<MomentLayout>,
}

impl MomentSet {
    /// Raw moments (center 0, scale 1), ordered by graded-lex rank.
    pub fn new(d: usize, order: usize, values: Vec<f64>) -> Result<Self> {
        Self::with_frame(d, order, values, vec![0.0; d], vec![1.0; d])
    }

    /// Moments of `(X - center) / scale`.
    pub fn with_frame(d: usize, order: usize, mut values: Vec<f64>, center: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if d == 0 || order == 0 {
            return Err(Error::InvalidArgument("dimension and order must be positive".into()));
        }
        let layout = MomentLayout::get(d, 2 * order - 1);
        if values.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                expected: layout.len(),
                found: values.len(),
            });
        }
        if center.len() != d || scale.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: center.len().min(scale.len()),
            });
        }
        if scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("scale must be positive".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("moment value {v}")));
        }
        if (values[0] - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "zeroth moment must be 1, found {}",
                values[0]
            )));
        }
        values[0] = 1.0;
        Ok(MomentSet {
            order,
            values,
            center,
            scale,
            layout,
        })
    }

    pub fn from_fn(d: usize, order: usize, f: impl Fn(&MultiIndex) -> f64) -> Result<Self> {
        let layout = MomentLayout::get(d, 2 * order - 1);
        let values = layout.indices().iter().map(f).collect();
        Self::new(d, order, values)
    }

    /// Moments of a point mass at `c`.
    pub fn dirac(c: &[f64], order: usize) -> Self {
        Self::from_fn(c.len(), order, |n| n.monomial(c)).expect("finite dirac moments")
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Maximum stored degree, `2N - 1`.
    pub fn max_degree(&self) -> usize {
        2 * self.order - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn layout(&self) -> &Arc<MomentLayout> {
        &self.layout
    }

    pub fn is_raw(&self) -> bool {
        self.center.iter().all(|&c| c == 0.0) && self.scale.iter().all(|&s| s == 1.0)
    }

    pub fn get(&self, index: &MultiIndex) -> Option<f64> {
        if index.dim() != self.dim() || index.degree() as usize > self.max_degree() {
            return None;
        }
        Some(self.values[index.rank()])
    }

    /// Mean of `X` in state coordinates.
    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.center[i] + self.scale[i] * self.values[1 + self.unit_offset(i)])
            .collect()
    }

    /// Per-coordinate variances of `X` in state coordinates.
    pub fn variances(&self) -> Vec<f64> {
        let cov = self.covariance();
        (0..self.dim()).map(|i| cov[(i, i)]).collect()
    }

    /// Covariance of `X` in state coordinates (needs `N >= 2`).
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        assert!(self.order >= 2, "covariance needs moments of degree two");
        let m1: Vec<f64> = (0..d).map(|i| self.values[1 + self.unit_offset(i)]).collect();
        DMatrix::from_fn(d, d, |i, j| {
            let mut e = vec![0u32; d];
            e[i] += 1;
            e[j] += 1;
            let second = self.values[rank_of(&e)];
            self.scale[i] * self.scale[j] * (second - m1[i] * m1[j])
        })
    }

    // rank of e_i minus one: degree-one block is reverse coordinate order
    fn unit_offset(&self, i: usize) -> usize {
        self.dim() - 1 - i
    }

    /// Moments of `(X - mu) / sigma` with a common scale for every coordinate.
    pub fn standardize(&self, mu: &[f64], sigma: f64) -> Result<MomentSet> {
        self.standardize_diag(mu, &vec![sigma; self.dim()])
    }

    /// Moments of `(X - mu) / sigma` with a per-coordinate scale.
    ///
    /// Works from any frame; the result always refers to state coordinates.
    pub fn standardize_diag(&self, mu: &[f64], sigma: &[f64]) -> Result<MomentSet> {
        let d = self.dim();
        if mu.len() != d || sigma.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: mu.len().min(sigma.len()),
            });
        }
        if sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("sigma must be positive".into()));
        }
        // (X - mu)/sigma = a * Y + b with Y the currently stored variable
        let a: Vec<f64> = (0..d).map(|i| self.scale[i] / sigma[i]).collect();
        let b: Vec<f64> = (0..d).map(|i| (self.center[i] - mu[i]) / sigma[i]).collect();
        let values = affine_moments(&self.layout, &self.values, &a, &b);
        MomentSet::with_frame(d, self.order, values, mu.to_vec(), sigma.to_vec())
    }

    /// Re-centres at the mean and rescales each coordinate by its standard deviation.
    /// At order 1 there is no variance and only the centre moves.
    pub fn standardize_at_mean(&self) -> Result<MomentSet> {
        let mean = self.mean();
        if self.order < 2 {
            return self.standardize_diag(&mean, &self.scale.clone());
        }
        let var = self.variances();
        if let Some(v) = var.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("non-positive variance {v}")));
        }
        let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        self.standardize_diag(&mean, &sd)
    }

    /// Raw moments in state coordinates.
    pub fn to_raw(&self) -> Result<MomentSet> {
        let d = self.dim();
        self.standardize_diag(&vec![0.0; d], &vec![1.0; d])
    }

    /// Moments with a degree at most `2 * order - 1` for a smaller order.
    pub fn truncate(&self, order: usize) -> Result<MomentSet> {
        if order > self.order || order == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate order {} to {order}",
                self.order
            )));
        }
        let len = binomial(2 * order - 1 + self.dim(), self.dim());
        MomentSet::with_frame(
            self.dim(),
            order,
            self.values[..len].to_vec(),
            self.center.clone(),
            self.scale.clone(),
        )
    }

    pub fn to_json(&self) -> MomentSetJson {
        MomentSetJson {
            d: self.dim(),
            order: self.order,
            center: self.center.clone(),
            scale: self.scale.clone(),
            moments: self
                .layout
                .indices()
                .iter()
                .zip(&self.values)
                .map(|(index, &value)| MomentEntry {
                    index: index.clone(),
                    value,
                })
                .collect(),
        }
    }

    pub fn from_json(json: &MomentSetJson) -> Result<MomentSet> {
        let d = json.d;
        if d == 0 || json.order == 0 {
            return Err(Error::InvalidArgument("dimension and order must be positive".into()));
        }
        let layout = MomentLayout::get(d, 2 * json.order - 1);
        let mut values = vec![f64::NAN; layout.len()];
        let mut seen = vec![false; layout.len()];
        for entry in &json.moments {
            if entry.index.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: entry.index.dim(),
                });
            }
            if entry.index.degree() as usize > layout.max_degree() {
                continue;
            }
            let r = entry.index.rank();
            values[r] = entry.value;
            seen[r] = true;
        }
        if let Some(r) = seen.iter().position(|s| !s) {
            return Err(Error::MissingMoment {
                index: layout.indices()[r].exponents().to_vec(),
            });
        }
        let center = if json.center.is_empty() {
            vec![0.0; d]
        } else {
            json.center.clone()
        };
        let scale = match json.scale.len() {
            0 => vec![1.0; d],
            1 => vec![json.scale[0]; d],
            _ => json.scale.clone(),
        };
        MomentSet::with_frame(d, json.order, values, center, scale)
    }
}

/// Moments of `a * Y + b` (element-wise) from the moments of `Y`.
pub(crate) fn affine_moments(layout: &MomentLayout, values: &[f64], a: &[f64], b: &[f64]) -> Vec<f64> {
    let d = layout.dim();
    let deg = layout.max_degree();
    let pow = |base: f64| -> Vec<f64> {
        let mut p = vec![1.0; deg + 1];
        for k in 1..=deg {
            p[k] = p[k - 1] * base;
        }
        p
    };
    let apow: Vec<Vec<f64>> = a.iter().map(|&x| pow(x)).collect();
    let bpow: Vec<Vec<f64>> = b.iter().map(|&x| pow(x)).collect();
    let mut binom = vec![vec![0.0; deg + 1]; deg + 1];
    for n in 0..=deg {
        for k in 0..=n {
            binom[n][k] = binomial(n, k) as f64;
        }
    }
    let mut out = Vec::with_capacity(layout.len());
    let mut k = vec![0u32; d];
    for n in layout.indices() {
        let n = n.exponents();
        k.iter_mut().for_each(|x| *x = 0);
        let mut acc = 0.0;
        loop {
            let mut coeff = 1.0;
            for i in 0..d {
                let (ni, ki) = (n[i] as usize, k[i] as usize);
                coeff *= binom[ni][ki] * apow[i][ki] * bpow[i][ni - ki];
            }
            if coeff != 0.0 {
                acc += coeff * values[rank_of(&k)];
            }
            // odometer over the box 0 <= k <= n
            let mut done = true;
            for pos in (0..d).rev() {
                if k[pos] < n[pos] {
                    k[pos] += 1;
                    done = false;
                    break;
                }
                k[pos] = 0;
            }
            if done {
                break;
            }
        }
        out.push(acc);
    }
    out
}

/// Gram matrix `G[i][j] = m_{n_i + n_j}` over the basis of degree `N - 1`.
pub fn build_gram(m: &MomentSet) -> GramMatrix {
    BasisLayout::get(m.dim(), m.order()).gram(m.values())
}

/// One Hankel matrix per coordinate, `H_i[u][v] = m_{n_u + n_v + e_i}`.
pub fn build_hankels(m: &MomentSet) -> HankelStack {
    BasisLayout::get(m.dim(), m.order()).hankels(m.values())
}

/// JSON form of a [`MomentSet`]; `moments` refer to the standardized frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSetJson {
    pub d: usize,
    #[serde(rename = "N")]
    pub order: usize,
    #[serde(default)]
    pub center: Vec<f64>,
    #[serde(default)]
    pub scale: Vec<f64>,
    pub moments: Vec<MomentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub index: MultiIndex,
    pub value: f64,
}
