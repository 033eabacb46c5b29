//! Weighted sequence norms, majorants, operator norms and the vector-field norm.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{HamiltonianPoly, Monomial, PhasePoint};
use crate::scalar::{cabs, cre, Cx, Real};

#[derive(Debug, Error, PartialEq)]
pub enum NormError {
    #[error("norm context requires q > p and positive s, r (got p={p}, q={q}, s={s}, r={r})")]
    Context { p: f64, q: f64, s: f64, r: f64 },
    #[error("vector-field norm needs at least one sample point")]
    EmptyGrid,
    #[error("site weights have length {0}, polynomial has {1} sites")]
    Weights(usize, usize),
}

/// Exponents and domain sizes every norm in a KAM step is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormContext {
    pub p: f64,
    pub q: f64,
    pub s: f64,
    pub r: f64,
}

impl NormContext {
    pub fn new(p: f64, kappa: f64, s: f64, r: f64) -> Result<Self, NormError> {
        let ctx = Self { p, q: p + kappa, s, r };
        if !(ctx.q > ctx.p && s > 0.0 && r > 0.0) {
            return Err(NormError::Context { p, q: ctx.q, s, r });
        }
        Ok(ctx)
    }

    pub fn with_domain(self, s: f64, r: f64) -> Self {
        Self { s, r, ..self }
    }
}

/// `sqrt(sum |z_j|^2 |j|^{2p})`.
pub fn hp_norm<T: Real>(z: &[Cx<T>], weights: &[f64], p: f64) -> T {
    z.iter()
        .zip(weights)
        .map(|(v, w)| v.norm_sqr() * T::lit(w.powf(2.0 * p)))
        .fold(T::zero(), |a, b| a + b)
        .sqrt()
}

/// Coefficientwise / entrywise modulus.
pub trait Majorant {
    fn majorant(&self) -> Self;
}

impl<T: Real> Majorant for DMatrix<Cx<T>> {
    fn majorant(&self) -> Self {
        self.map(|v| cre(cabs(v)))
    }
}

impl<T: Real> Majorant for DVector<Cx<T>> {
    fn majorant(&self) -> Self {
        self.map(|v| cre(cabs(v)))
    }
}

impl<T: Real> Majorant for Vec<Cx<T>> {
    fn majorant(&self) -> Self {
        self.iter().map(|v| cre(cabs(*v))).collect()
    }
}

impl<T: Real> Majorant for HamiltonianPoly<T> {
    fn majorant(&self) -> Self {
        HamiltonianPoly::majorant(self)
    }
}

/// `|| diag(|i|^q) A diag(|j|^{-p}) ||_2`: the induced norm `h_p -> h_q`.
pub fn op_norm<T: Real>(a: &DMatrix<Cx<T>>, row_w: &[f64], col_w: &[f64], p: f64, q: f64) -> T {
    if a.nrows() == 0 || a.ncols() == 0 {
        return T::zero();
    }
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)].scale(T::lit(row_w[i].powf(q) * col_w[j].powf(-p))));
    scaled.singular_values().max()
}

/// Complex matrix over retained sites, with radius thresholds defining block views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeOperator<T: Real> {
    pub entries: DMatrix<Cx<T>>,
    pub weights: Vec<f64>,
    pub marks: Vec<f64>,
}

impl<T: Real> LatticeOperator<T> {
    pub fn new(entries: DMatrix<Cx<T>>, weights: Vec<f64>) -> Self {
        assert_eq!(entries.nrows(), weights.len());
        assert_eq!(entries.ncols(), weights.len());
        Self { entries, weights, marks: Vec::new() }
    }

    pub fn with_marks(mut self, mut marks: Vec<f64>) -> Self {
        marks.sort_by(f64::total_cmp);
        self.marks = marks;
        self
    }

    /// Site indices of each block: block `b` holds sites with `marks[b-1] <= |j| < marks[b]`.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        partition_by_marks(&self.weights, &self.marks)
    }

    pub fn block(&self, a: usize, b: usize) -> DMatrix<Cx<T>> {
        let bl = self.blocks();
        submatrix(&self.entries, &bl[a], &bl[b])
    }

    pub fn op_norm(&self, p: f64, q: f64) -> T {
        op_norm(&self.entries, &self.weights, &self.weights, p, q)
    }

    pub fn block_op_norm(&self, a: usize, b: usize, p: f64, q: f64) -> T {
        let bl = self.blocks();
        let rw: Vec<f64> = bl[a].iter().map(|&i| self.weights[i]).collect();
        let cw: Vec<f64> = bl[b].iter().map(|&i| self.weights[i]).collect();
        op_norm(&submatrix(&self.entries, &bl[a], &bl[b]), &rw, &cw, p, q)
    }

    pub fn majorant(&self) -> Self {
        Self { entries: self.entries.majorant(), ..self.clone() }
    }
}

pub fn partition_by_marks(weights: &[f64], marks: &[f64]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); marks.len() + 1];
    for (i, &w) in weights.iter().enumerate() {
        let b = marks.iter().take_while(|&&m| m <= w).count();
        out[b].push(i);
    }
    out
}

pub fn submatrix<T: Real>(a: &DMatrix<Cx<T>>, rows: &[usize], cols: &[usize]) -> DMatrix<Cx<T>> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

/// Sample points for the sup over `|y| < r^2, ||z||_p < r`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleGrid {
    pub draws: usize,
    pub seed: u64,
}

impl Default for SampleGrid {
    fn default() -> Self {
        Self { draws: 16, seed: 7 }
    }
}

impl SampleGrid {
    /// Nonnegative boundary points: `y_i = r^2` (sup norm on actions) and random
    /// directions `z` scaled to `||z||_p = r`; the first `n_sites` draws are the
    /// coordinate directions when `draws` allows.
    pub fn points(&self, n_angles: usize, weights: &[f64], ctx: &NormContext) -> Vec<PhasePoint<f64>> {
        let n = weights.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let y = vec![ctx.r * ctx.r; n_angles];
        (0..self.draws)
            .map(|d| {
                let mut z: Vec<f64> = if n == 0 {
                    Vec::new()
                } else if d < n && self.draws > 2 * n {
                    (0..n).map(|i| if i == d { 1.0 } else { 0.0 }).collect()
                } else {
                    (0..n).map(|_| rng.random::<f64>()).collect()
                };
                let norm: f64 = z.iter().zip(weights).map(|(v, w)| v * v * w.powf(2.0 * ctx.p)).sum::<f64>().sqrt();
                if norm > 0.0 {
                    z.iter_mut().for_each(|v| *v *= ctx.r / norm);
                }
                let zc: Vec<Cx<f64>> = z.iter().map(|&v| cre(v)).collect();
                PhasePoint::real(&vec![0.0; n_angles], &y, &zc)
            })
            .collect()
    }
}

/// Sampled triple norm of the Hamiltonian vector field of the majorant of `h`.
///
/// Fourier sums are exact; the sup over `(y, z)` is taken over `grid`.
pub fn vf_triple_norm<T: Real>(
    h: &HamiltonianPoly<T>,
    weights: &[f64],
    ctx: &NormContext,
    grid: &SampleGrid,
) -> Result<f64, NormError> {
    if weights.len() != h.n_sites() {
        return Err(NormError::Weights(weights.len(), h.n_sites()));
    }
    let pts = grid.points(h.n_angles(), weights, ctx);
    if pts.is_empty() {
        return Err(NormError::EmptyGrid);
    }
    let maj = h.cast::<f64>().majorant();
    let mut groups: FxHashMap<Vec<i32>, HamiltonianPoly<f64>> = FxHashMap::default();
    for (m, c) in maj.sorted_terms() {
        groups
            .entry(m.k.to_vec())
            .or_insert_with(|| HamiltonianPoly::new(h.n_angles(), h.n_sites()))
            .add_term(m.without_k(), c);
    }
    let mut keys: Vec<_> = groups.keys().cloned().collect();
    keys.sort();
    let wq: Vec<f64> = weights.iter().map(|w| w.powf(2.0 * ctx.q)).collect();
    let mut sup: f64 = 0.0;
    for pt in &pts {
        let mut total = 0.0;
        for k in &keys {
            let g = groups[k].gradient(pt);
            let kabs: f64 = k.iter().map(|c| (*c as f64).abs()).sum();
            let e = (2.0 * kabs * ctx.s).exp();
            let xs: f64 = g.dy.iter().map(|v| v.norm_sqr()).sum();
            let ys: f64 = k.iter().map(|c| (*c as f64).powi(2)).sum::<f64>() * g.value.norm_sqr();
            let zs: f64 = g.dzb.iter().zip(&wq).map(|(v, w)| v.norm_sqr() * w).sum();
            let zbs: f64 = g.dz.iter().zip(&wq).map(|(v, w)| v.norm_sqr() * w).sum();
            total += e * (xs + ys + zs + zbs);
        }
        sup = sup.max(total.sqrt());
    }
    Ok(sup)
}

/// `||F||_{p,s} = sqrt(sum_k e^{2|k|s} ||F(k)||_p^2)` for a lattice-valued Fourier series.
pub fn fourier_vector_norm<'a, T: Real + 'a>(
    modes: impl IntoIterator<Item = (&'a [i32], &'a DVector<Cx<T>>)>,
    weights: &[f64],
    p: f64,
    s: f64,
) -> f64 {
    modes
        .into_iter()
        .map(|(k, v)| {
            let kabs: f64 = k.iter().map(|c| (*c as f64).abs()).sum();
            (2.0 * kabs * s).exp() * hp_norm(v.as_slice(), weights, p).to_f64_lossy().powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Helper for tests and diagnostics: the constant-field polynomial `y . c`.
pub fn linear_in_y<T: Real>(n_angles: usize, n_sites: usize, c: &[T]) -> HamiltonianPoly<T> {
    let mut h = HamiltonianPoly::new(n_angles, n_sites);
    for (i, &ci) in c.iter().enumerate() {
        let mut y = vec![0u8; n_angles];
        y[i] = 1;
        h.add_term(Monomial::one(n_angles).with_y(&y), cre(ci));
    }
    h
}

/// Random matrix helper shared by tests of this and downstream modules.
pub fn random_complex_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<Cx<f64>> {
    DMatrix::from_fn(rows, cols, |_, _| Cx::new(rng.random_range(-1.0..1.0) * scale, rng.random_range(-1.0..1.0) * scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::cx;

    #[test]
    fn single_site_weight() {
        let w = [1.0, 2.0, 3.0];
        let z = [cre(0.0), cre(1.0), cre(0.0)];
        assert!((hp_norm(&z, &w, 1.5) - 2f64.powf(1.5)).abs() < 1e-14);
        assert_eq!(hp_norm::<f64>(&[cre(0.0); 3], &w, 1.0), 0.0);
    }

    #[test]
    fn diagonal_operator_norm() {
        let lam = [0.5, 0.4, 0.3];
        let a = DMatrix::from_diagonal(&DVector::from_iterator(3, lam.iter().map(|&l| cre(l))));
        let w = [1.0, 2.0, 3.0];
        assert!((op_norm(&a, &w, &w, 1.0, 1.0) - 0.5f64).abs() < 1e-14);
        // h_p -> h_{p+1}: weights multiply entry j by |j|.
        assert!((op_norm(&a, &w, &w, 1.0, 2.0) - 0.9f64).abs() < 1e-12);
    }

    #[test]
    fn constant_field_has_unit_norm() {
        // H = y_1 gives X = (1, 0, 0, 0).
        let h = linear_in_y::<f64>(2, 3, &[1.0, 0.0]);
        let ctx = NormContext::new(1.0, 1.0, 0.2, 0.1).unwrap();
        let n = vf_triple_norm(&h, &[1.0, 2.0, 3.0], &ctx, &SampleGrid::default()).unwrap();
        assert!((n - 1.0).abs() < 1e-14);
        let h3 = h.scale(cx(0.0, -3.0));
        let n3 = vf_triple_norm(&h3, &[1.0, 2.0, 3.0], &ctx, &SampleGrid::default()).unwrap();
        assert!((n3 - 3.0).abs() < 1e-13);
    }

    #[test]
    fn empty_grid_is_an_error() {
        let h = linear_in_y::<f64>(1, 1, &[1.0]);
        let ctx = NormContext::new(1.0, 1.0, 0.2, 0.1).unwrap();
        let g = SampleGrid { draws: 0, seed: 1 };
        assert_eq!(vf_triple_norm(&h, &[1.0], &ctx, &g), Err(NormError::EmptyGrid));
    }

    #[test]
    fn blocks_cover_disjointly() {
        let w: Vec<f64> = (1..=10).map(|j| j as f64).collect();
        let b = partition_by_marks(&w, &[3.0, 7.0]);
        assert_eq!(b, vec![vec![0, 1], vec![2, 3, 4, 5], vec![6, 7, 8, 9]]);
    }
}
