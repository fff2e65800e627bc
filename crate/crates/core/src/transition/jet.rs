//! Truncated multivariate Taylor polynomials.
//!
//! A [`Jet`] of order `K` in `d` variables stores the coefficients of
//! `f(x + δ)` for all monomials `δ^β` with `|β| <= K`, in graded-lex order.
//! Arithmetic truncates at order `K`, so evaluating a model's drift on jets
//! yields its Taylor coefficients at `x` exactly up to round-off.

use std::collections::HashMap;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::{Arc, Mutex, OnceLock};

use crate::momentspace::{graded_lex_indices, rank_of, LayoutCache, MultiIndex};

const NONE: u32 = u32::MAX;

/// Index tables shared by all jets with the same `(d, K)`.
#[derive(Debug, PartialEq)]
pub struct JetLayout {
    d: usize,
    order: usize,
    indices: Vec<MultiIndex>,
    degrees: Vec<usize>,
    // add[a * size + b] = rank(n_a + n_b), or NONE past the truncation order
    add: Vec<u32>,
    // (a, b, rank(n_a + n_b)) for every pair that survives truncation
    pairs: Vec<(u32, u32, u32)>,
}

impl JetLayout {
    fn build(d: usize, order: usize) -> Self {
        let indices = graded_lex_indices(d, order);
        let size = indices.len();
        let degrees: Vec<usize> = indices.iter().map(|n| n.degree() as usize).collect();
        let mut add = vec![NONE; size * size];
        let mut pairs = Vec::new();
        for a in 0..size {
            for b in 0..size {
                if degrees[a] + degrees[b] <= order {
                    let c = indices[a].add(&indices[b]).rank() as u32;
                    add[a * size + b] = c;
                    pairs.push((a as u32, b as u32, c));
                }
            }
        }
        JetLayout {
            d,
            order,
            indices,
            degrees,
            add,
            pairs,
        }
    }

    pub fn get(d: usize, order: usize) -> Arc<JetLayout> {
        static CACHE: LayoutCache<JetLayout> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        guard
            .entry((d, order))
            .or_insert_with(|| Arc::new(JetLayout::build(d, order)))
            .clone()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn order(&self) -> usize {
        self.order
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

    pub fn degree(&self, rank: usize) -> usize {
        self.degrees[rank]
    }

    /// Rank of `n_a + n_b`, if within the truncation order.
    pub fn add_rank(&self, a: usize, b: usize) -> Option<usize> {
        let r = self.add[a * self.len() + b];
        (r != NONE).then_some(r as usize)
    }

    /// Rank of `n_a - e_i`, if that index is non-negative.
    pub fn sub_unit_rank(&self, a: usize, i: usize) -> Option<usize> {
        let e = self.indices[a].exponents();
        if e[i] == 0 {
            return None;
        }
        let mut p = e.to_vec();
        p[i] -= 1;
        Some(rank_of(&p))
    }
}

/// Truncated Taylor polynomial around an implicit expansion point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    layout: Arc<JetLayout>,
    coeffs: Vec<f64>,
}

impl Jet {
    pub fn constant(layout: &Arc<JetLayout>, c: f64) -> Jet {
        let mut coeffs = vec![0.0; layout.len()];
        coeffs[0] = c;
        Jet {
            layout: layout.clone(),
            coeffs,
        }
    }

    /// The independent variables `x_i + δ_i` for `i = 0..d`.
    pub fn variables(x: &[f64], order: usize) -> Vec<Jet> {
        let layout = JetLayout::get(x.len(), order);
        let d = x.len();
        (0..d)
            .map(|i| {
                let mut j = Jet::constant(&layout, x[i]);
                if order >= 1 {
                    // degree-one block is in reverse coordinate order
                    j.coeffs[d - i] = 1.0;
                }
                j
            })
            .collect()
    }

    pub fn layout(&self) -> &Arc<JetLayout> {
        &self.layout
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Coefficient of `δ^n`.
    pub fn coeff(&self, n: &[u32]) -> f64 {
        let deg: u32 = n.iter().sum();
        if deg as usize > self.layout.order {
            return 0.0;
        }
        self.coeffs[rank_of(n)]
    }

    fn zeros_like(&self) -> Jet {
        Jet {
            layout: self.layout.clone(),
            coeffs: vec![0.0; self.coeffs.len()],
        }
    }

    /// `Σ_k c_k (self - self(0))^k` for the given coefficients.
    fn compose(&self, series: &[f64]) -> Jet {
        let mut tail = self.clone();
        tail.coeffs[0] = 0.0;
        let mut out = Jet::constant(&self.layout, series[0]);
        let mut power = Jet::constant(&self.layout, 1.0);
        for c in series.iter().skip(1) {
            power = power * tail.clone();
            for (o, p) in out.coeffs.iter_mut().zip(&power.coeffs) {
                *o += c * p;
            }
        }
        out
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(mut self, rhs: Jet) -> Jet {
        for (a, b) in self.coeffs.iter_mut().zip(&rhs.coeffs) {
            *a += b;
        }
        self
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(mut self, rhs: Jet) -> Jet {
        for (a, b) in self.coeffs.iter_mut().zip(&rhs.coeffs) {
            *a -= b;
        }
        self
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        let mut out = self.zeros_like();
        for &(a, b, c) in &self.layout.pairs {
            out.coeffs[c as usize] += self.coeffs[a as usize] * rhs.coeffs[b as usize];
        }
        out
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(mut self) -> Jet {
        self.coeffs.iter_mut().for_each(|c| *c = -*c);
        self
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(mut self, rhs: f64) -> Jet {
        self.coeffs[0] += rhs;
        self
    }
}

impl Sub<f64> for Jet {
    type Output = Jet;
    fn sub(mut self, rhs: f64) -> Jet {
        self.coeffs[0] -= rhs;
        self
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(mut self, rhs: f64) -> Jet {
        self.coeffs.iter_mut().for_each(|c| *c *= rhs);
        self
    }
}

/// Numbers that model coefficients can be evaluated on: plain floats for
/// values, jets for derivatives.
pub trait Scalar:
    Clone
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    /// A constant carrying the same shape as `self`.
    fn constant_like(&self, c: f64) -> Self;
    /// Value at the expansion point.
    fn value(&self) -> f64;
    fn tanh(&self) -> Self;
    fn exp(&self) -> Self;
}

impl Scalar for f64 {
    fn constant_like(&self, c: f64) -> f64 {
        c
    }
    fn value(&self) -> f64 {
        *self
    }
    fn tanh(&self) -> f64 {
        f64::tanh(*self)
    }
    fn exp(&self) -> f64 {
        f64::exp(*self)
    }
}

fn factorials(k: usize) -> Vec<f64> {
    let mut f = vec![1.0; k + 1];
    for i in 1..=k {
        f[i] = f[i - 1] * i as f64;
    }
    f
}

impl Scalar for Jet {
    fn constant_like(&self, c: f64) -> Jet {
        Jet::constant(&self.layout, c)
    }

    fn value(&self) -> f64 {
        self.coeffs[0]
    }

    fn tanh(&self) -> Jet {
        let k = self.layout.order;
        let t = self.coeffs[0].tanh();
        // P_0(t) = t, P_{j+1}(t) = P_j'(t) (1 - t^2)
        let mut poly = vec![0.0, 1.0];
        let fact = factorials(k);
        let mut series = Vec::with_capacity(k + 1);
        for j in 0..=k {
            let v = poly.iter().rev().fold(0.0, |acc, c| acc * t + c);
            series.push(v / fact[j]);
            let deriv: Vec<f64> = poly.iter().enumerate().skip(1).map(|(p, c)| p as f64 * c).collect();
            let mut next = vec![0.0; deriv.len() + 2];
            for (p, c) in deriv.iter().enumerate() {
                next[p] += c;
                next[p + 2] -= c;
            }
            poly = next;
        }
        self.compose(&series)
    }

    fn exp(&self) -> Jet {
        let e = self.coeffs[0].exp();
        let series: Vec<f64> = factorials(self.layout.order).iter().map(|f| e / f).collect();
        self.compose(&series)
    }
}
