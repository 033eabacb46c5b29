//! Truncated homological equations: the first-Melnikov vector equation
//! `(varpi - (k,omega) + Lambda + B) F = R` and the second-Melnikov Sylvester
//! equation `M F + F N = R`, each with a structured path and a dense oracle.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::HamiltonianPoly;
use crate::scalar::{cabs, cre, Cx, Real};

pub type ModeKey = Vec<i32>;

pub fn mode_abs(k: &[i32]) -> i64 {
    k.iter().map(|c| (*c as i64).abs()).sum()
}

pub fn mode_dot(k: &[i32], omega: &[f64]) -> f64 {
    k.iter().zip(omega).map(|(&c, w)| c as f64 * w).sum()
}

#[derive(Debug, Error, PartialEq)]
pub enum HomologyError {
    #[error("{} divisor(s) below floor, smallest {:.3e} at k = {:?}", .0.len(), .0.first().map_or(0.0, |w| w.value), .0.first().map(|w| w.k.clone()))]
    SmallDivisor(Vec<DivisorWitness>),
    #[error("resonant diagonal at k = {k:?}: right-hand side has entry {value:.3e} on site {site}")]
    Resonant { k: ModeKey, site: usize, value: f64 },
    #[error("contraction condition fails: measured ratio {ratio:.3e}")]
    Contraction { ratio: f64 },
    #[error("integral representation not applicable: spectral lower bound {mu:.3e}")]
    NotApplicable { mu: f64 },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("singular system at k = {0:?}")]
    Singular(ModeKey),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivisorWitness {
    pub k: ModeKey,
    pub sites: Vec<usize>,
    pub value: f64,
    pub threshold: f64,
}

/// `k -> lattice vector`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierVectorSeries<T: Real> {
    pub n_angles: usize,
    pub n_sites: usize,
    pub modes: BTreeMap<ModeKey, DVector<Cx<T>>>,
}

impl<T: Real> FourierVectorSeries<T> {
    pub fn new(n_angles: usize, n_sites: usize) -> Self {
        Self { n_angles, n_sites, modes: BTreeMap::new() }
    }

    pub fn insert(&mut self, k: ModeKey, v: DVector<Cx<T>>) {
        assert_eq!(k.len(), self.n_angles);
        assert_eq!(v.len(), self.n_sites);
        self.modes.insert(k, v);
    }

    pub fn get(&self, k: &[i32]) -> Option<&DVector<Cx<T>>> {
        self.modes.get(k)
    }

    /// `sum_k |F(k)|_{h_p} e^{|k| s}`.
    pub fn weighted_norm(&self, weights: &[f64], p: f64, s: f64) -> f64 {
        self.modes
            .iter()
            .map(|(k, v)| crate::norms::hp_norm(v.as_slice(), weights, p).to_f64_lossy() * (mode_abs(k) as f64 * s).exp())
            .sum()
    }

    pub fn max_k(&self) -> i64 {
        self.modes.keys().map(|k| mode_abs(k)).max().unwrap_or(0)
    }
}

/// `k -> lattice operator`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierOperatorSeries<T: Real> {
    pub n_angles: usize,
    pub n_sites: usize,
    pub modes: BTreeMap<ModeKey, DMatrix<Cx<T>>>,
}

impl<T: Real> FourierOperatorSeries<T> {
    pub fn new(n_angles: usize, n_sites: usize) -> Self {
        Self { n_angles, n_sites, modes: BTreeMap::new() }
    }

    pub fn insert(&mut self, k: ModeKey, m: DMatrix<Cx<T>>) {
        assert_eq!(k.len(), self.n_angles);
        assert_eq!((m.nrows(), m.ncols()), (self.n_sites, self.n_sites));
        self.modes.insert(k, m);
    }

    pub fn get(&self, k: &[i32]) -> Option<&DMatrix<Cx<T>>> {
        self.modes.get(k)
    }
}

/// Projection onto angle modes `|k| <= K`.
pub trait Cutoff {
    fn cutoff(&self, k_max: f64) -> Self;
}

impl<T: Real> Cutoff for FourierVectorSeries<T> {
    fn cutoff(&self, k_max: f64) -> Self {
        let modes = self.modes.iter().filter(|(k, _)| mode_abs(k) as f64 <= k_max).map(|(k, v)| (k.clone(), v.clone())).collect();
        Self { modes, ..*self }
    }
}

impl<T: Real> Cutoff for FourierOperatorSeries<T> {
    fn cutoff(&self, k_max: f64) -> Self {
        let modes = self.modes.iter().filter(|(k, _)| mode_abs(k) as f64 <= k_max).map(|(k, v)| (k.clone(), v.clone())).collect();
        Self { modes, ..*self }
    }
}

impl<T: Real> Cutoff for HamiltonianPoly<T> {
    fn cutoff(&self, k_max: f64) -> Self {
        self.filter(|m| m.kabs() as f64 <= k_max)
    }
}

/// Exponent constants of the small-divisor thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentProfile {
    pub name: String,
    pub y: f64,
    pub c: f64,
    pub c20: f64,
    pub c21: f64,
    /// Prefactor in the first/second Melnikov threshold `scale * K^{-c}`.
    pub scale: f64,
    /// Prefactor in the tangent threshold `tangent_scale * K^{-c21}`.
    pub tangent_scale: f64,
    pub kappa: f64,
}

impl ExponentProfile {
    /// The inequality-constrained constants: `y = 3d/kappa + 3`, `c` minimal with
    /// `c/y > 100 N (1+kappa+d)` and `c (1 - 3d/(y kappa)) > 100 N (1+kappa+d)`.
    pub fn asymptotic(d: usize, kappa: f64, n: usize) -> Self {
        let d = d as f64;
        let y = 3.0 * d / kappa + 3.0;
        let base = 100.0 * n as f64 * (1.0 + kappa + d);
        let c = (base * y).max(base / (1.0 - 3.0 * d / (y * kappa))) * (1.0 + 1e-9);
        let c20 = 1.0;
        Self { name: "asymptotic".into(), y, c, c20, c21: c20 + n as f64, scale: 0.5, tangent_scale: 1.0, kappa }
    }

    /// Desk-scale profile: polynomial thresholds with exponent `N + 1`, scaled to the
    /// width of the parameter box so excision is visible but small at `K = 8`.
    pub fn desk(d: usize, kappa: f64, n: usize, scale: f64) -> Self {
        let y = 3.0 * d as f64 / kappa + 3.0;
        let c = n as f64 + 1.0;
        Self { name: "desk".into(), y, c, c20: 1.0, c21: n as f64 + 1.0, scale, tangent_scale: scale, kappa }
    }

    pub fn tangent_threshold(&self, k: f64) -> f64 {
        self.tangent_scale * k.powf(-self.c21)
    }

    pub fn melnikov_threshold(&self, k: f64) -> f64 {
        self.scale * k.powf(-self.c)
    }

    /// `c22` with `K^{-kappa c22} = 1e-2 K^{-c21}`.
    pub fn c22(&self, k: f64) -> f64 {
        (self.c21 + 100f64.ln() / k.ln()) / self.kappa
    }

    /// First-solver head/tail threshold `K^{c22}`.
    pub fn first_threshold(&self, k: f64) -> f64 {
        k.powf(self.c22(k))
    }

    /// `K2 = (2 K^{c/y})^{3/kappa}`.
    pub fn k2(&self, k: f64) -> f64 {
        (2.0 * k.powf(self.c / self.y)).powf(3.0 / self.kappa)
    }

    /// Second-solver threshold `K3 = K2^{100 (N+1) kappa y}`, saturated to `f64::MAX`.
    pub fn k3(&self, k: f64, n: usize) -> f64 {
        let e = 100.0 * (n as f64 + 1.0) * self.kappa * self.y;
        let v = self.k2(k).ln() * e;
        if v > 700.0 {
            f64::MAX
        } else {
            v.exp()
        }
    }
}

/// Head/tail split of the lattice by a radius threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub threshold: f64,
    pub head: Vec<usize>,
    pub tail: Vec<usize>,
}

impl BlockPartition {
    pub fn new(weights: &[f64], threshold: f64) -> Self {
        let (head, tail) = (0..weights.len()).partition(|&i| weights[i] < threshold);
        Self { threshold, head, tail }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Structured,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub strategy: Strategy,
    pub divisor_floor: f64,
    /// Head/tail radius; sites with `|j| >= threshold` form the tail.
    pub threshold: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { strategy: Strategy::Structured, divisor_floor: 1e-10, threshold: f64::INFINITY, tol: 1e-15, max_iter: 400 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeTrace {
    pub k: ModeKey,
    pub strategy: Strategy,
    pub fell_back: bool,
    pub min_divisor: f64,
    pub residual: f64,
    pub iterations: usize,
}

fn matrix_is_hermitian<T: Real>(a: &DMatrix<Cx<T>>) -> bool {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(cabs(*v).to_f64_lossy()));
    (a - a.adjoint()).iter().all(|v| cabs(*v).to_f64_lossy() <= 1e-13 * scale.max(1e-300))
}

/// Smallest eigenvalue modulus for Hermitian `a`, smallest singular value otherwise,
/// with the site carrying the largest weight of the corresponding vector.
pub fn smallest_divisor<T: Real>(a: &DMatrix<Cx<T>>) -> (f64, usize) {
    if a.nrows() == 0 {
        return (f64::INFINITY, 0);
    }
    if matrix_is_hermitian(a) {
        let e = a.clone().symmetric_eigen();
        let (idx, val) = e.eigenvalues.iter().enumerate().map(|(i, v)| (i, v.abs().to_f64_lossy())).min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        (val, argmax_abs(e.eigenvectors.column(idx).iter()))
    } else {
        let svd = a.clone().svd(false, true);
        let (idx, val) = svd.singular_values.iter().enumerate().map(|(i, v)| (i, v.to_f64_lossy())).min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        let site = svd.v_t.as_ref().map_or(0, |vt| argmax_abs(vt.row(idx).iter()));
        (val, site)
    }
}

fn argmax_abs<'a, T: Real + 'a>(it: impl Iterator<Item = &'a Cx<T>>) -> usize {
    it.enumerate().max_by(|a, b| a.1.norm_sqr().partial_cmp(&b.1.norm_sqr()).unwrap()).map_or(0, |(i, _)| i)
}

fn vec_norm<T: Real>(v: impl Iterator<Item = Cx<T>>) -> f64 {
    v.map(|c| c.norm_sqr().to_f64_lossy()).sum::<f64>().sqrt()
}

fn rel_residual<T: Real>(res: impl Iterator<Item = Cx<T>>, rhs: impl Iterator<Item = Cx<T>>) -> f64 {
    let r = vec_norm(rhs);
    let e = vec_norm(res);
    if r == 0.0 {
        e
    } else {
        e / r
    }
}

fn first_matrix<T: Real>(shift: f64, lam: &[f64], b: &DMatrix<Cx<T>>) -> DMatrix<Cx<T>> {
    let mut a = b.clone();
    for (i, l) in lam.iter().enumerate() {
        a[(i, i)] += cre(T::lit(shift + l));
    }
    a
}

/// One Fourier mode of the first-Melnikov equation `(shift + Lambda + B) F = R`,
/// where `shift = varpi - (k,omega)`.
pub fn solve_first_mode<T: Real>(
    k: &[i32],
    shift: f64,
    lam: &[f64],
    b: &DMatrix<Cx<T>>,
    weights: &[f64],
    r: &DVector<Cx<T>>,
    opts: &SolverOptions,
) -> Result<(DVector<Cx<T>>, ModeTrace), HomologyError> {
    let n = lam.len();
    if b.nrows() != n || b.ncols() != n || r.len() != n || weights.len() != n {
        return Err(HomologyError::Shape(format!("first solver: {n} sites, B {}x{}, R {}", b.nrows(), b.ncols(), r.len())));
    }
    let a = first_matrix(shift, lam, b);
    let mut trace = ModeTrace { k: k.to_vec(), strategy: opts.strategy, fell_back: false, min_divisor: 0.0, residual: 0.0, iterations: 0 };
    let sol = match opts.strategy {
        Strategy::Dense => dense_first(k, &a, r, opts, &mut trace)?,
        Strategy::Structured => {
            let part = BlockPartition::new(weights, opts.threshold);
            match structured_first(k, shift, lam, b, &part, r, opts, &mut trace) {
                Ok(v) => v,
                Err(HomologyError::Contraction { .. }) => {
                    trace.fell_back = true;
                    dense_first(k, &a, r, opts, &mut trace)?
                }
                Err(e) => return Err(e),
            }
        }
    };
    trace.residual = rel_residual((&a * &sol - r).iter().copied(), r.iter().copied());
    Ok((sol, trace))
}

fn divisor_check<T: Real>(k: &[i32], a: &DMatrix<Cx<T>>, sites: &[usize], opts: &SolverOptions, trace: &mut ModeTrace) -> Result<(), HomologyError> {
    let (d, site) = smallest_divisor(a);
    trace.min_divisor = trace.min_divisor.min(d);
    if d < opts.divisor_floor {
        return Err(HomologyError::SmallDivisor(vec![DivisorWitness {
            k: k.to_vec(),
            sites: vec![sites.get(site).copied().unwrap_or(site)],
            value: d,
            threshold: opts.divisor_floor,
        }]));
    }
    Ok(())
}

fn dense_first<T: Real>(k: &[i32], a: &DMatrix<Cx<T>>, r: &DVector<Cx<T>>, opts: &SolverOptions, trace: &mut ModeTrace) -> Result<DVector<Cx<T>>, HomologyError> {
    trace.min_divisor = f64::INFINITY;
    let all: Vec<usize> = (0..a.nrows()).collect();
    divisor_check(k, a, &all, opts, trace)?;
    a.clone().lu().solve(r).ok_or_else(|| HomologyError::Singular(k.to_vec()))
}

fn sub<T: Real>(a: &DMatrix<Cx<T>>, rows: &[usize], cols: &[usize]) -> DMatrix<Cx<T>> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

fn spectral_norm<T: Real>(a: &DMatrix<Cx<T>>) -> f64 {
    if a.is_empty() {
        0.0
    } else {
        a.clone().singular_values().max().to_f64_lossy()
    }
}

/// Tail block inverted by a Neumann series around the scalar `shift`, head block
/// by its Schur complement.
#[allow(clippy::too_many_arguments)]
fn structured_first<T: Real>(
    k: &[i32],
    shift: f64,
    lam: &[f64],
    b: &DMatrix<Cx<T>>,
    part: &BlockPartition,
    r: &DVector<Cx<T>>,
    opts: &SolverOptions,
    trace: &mut ModeTrace,
) -> Result<DVector<Cx<T>>, HomologyError> {
    let (h, t) = (&part.head, &part.tail);
    trace.min_divisor = f64::INFINITY;
    if t.is_empty() {
        let a = first_matrix(shift, lam, b);
        return dense_first(k, &a, r, opts, trace);
    }
    let mut pert = sub(b, t, t);
    for (i, &j) in t.iter().enumerate() {
        pert[(i, i)] += cre(T::lit(lam[j]));
    }
    let ratio = spectral_norm(&pert) / shift.abs();
    if !(ratio < 0.9) {
        return Err(HomologyError::Contraction { ratio });
    }
    // X = (shift + P)^{-1} [B21 | R2]
    let b21 = sub(b, t, h);
    let mut rhs = DMatrix::zeros(t.len(), h.len() + 1);
    rhs.columns_mut(0, h.len()).copy_from(&b21);
    for (i, &j) in t.iter().enumerate() {
        rhs[(i, h.len())] = r[j];
    }
    let inv_shift = cre(T::lit(1.0 / shift));
    let mut x = rhs.scale(T::lit(1.0 / shift));
    let mut iters = 0;
    for it in 0..opts.max_iter {
        let next = (&rhs - &pert * &x) * inv_shift;
        let delta = vec_norm((&next - &x).iter().copied());
        let size = vec_norm(next.iter().copied());
        x = next;
        iters = it + 1;
        if delta <= opts.tol * size.max(1e-300) {
            break;
        }
    }
    trace.iterations = iters;
    let xb = x.columns(0, h.len()).into_owned();
    let xr = x.column(h.len()).into_owned();
    let b12 = sub(b, h, t);
    let mut schur = sub(b, h, h) - &b12 * &xb;
    for (i, &j) in h.iter().enumerate() {
        schur[(i, i)] += cre(T::lit(shift + lam[j]));
    }
    divisor_check(k, &schur, h, opts, trace)?;
    let r1 = DVector::from_iterator(h.len(), h.iter().map(|&j| r[j]));
    let rhs1 = r1 - &b12 * &xr;
    let f1 = if h.is_empty() { DVector::zeros(0) } else { schur.lu().solve(&rhs1).ok_or_else(|| HomologyError::Singular(k.to_vec()))? };
    let f2 = xr - &xb * &f1;
    let mut f = DVector::zeros(lam.len());
    for (i, &j) in h.iter().enumerate() {
        f[j] = f1[i];
    }
    for (i, &j) in t.iter().enumerate() {
        f[j] = f2[i];
    }
    Ok(f)
}

/// Solve every mode of `(varpi - (k,omega) + Lambda + B) F(k) = R(k)` in parallel.
#[allow(clippy::too_many_arguments)]
pub fn solve_first_melnikov<T: Real>(
    omega: &[f64],
    lam: &[f64],
    b: &DMatrix<Cx<T>>,
    weights: &[f64],
    r: &FourierVectorSeries<T>,
    k_max: f64,
    varpi: f64,
    opts: &SolverOptions,
) -> Result<(FourierVectorSeries<T>, Vec<ModeTrace>), HomologyError> {
    let modes: Vec<_> = r.modes.iter().filter(|(k, _)| mode_abs(k) as f64 <= k_max).collect();
    let results: Vec<_> = modes
        .par_iter()
        .map(|(k, rk)| solve_first_mode(k, varpi - mode_dot(k, omega), lam, b, weights, rk, opts).map(|(f, t)| ((*k).clone(), f, t)))
        .collect();
    collect_results(results, r.n_angles, r.n_sites, |out: &mut FourierVectorSeries<T>, k, f| out.insert(k, f))
}

fn collect_results<S, V>(
    results: Vec<Result<(ModeKey, V, ModeTrace), HomologyError>>,
    n_angles: usize,
    n_sites: usize,
    mut put: impl FnMut(&mut S, ModeKey, V),
) -> Result<(S, Vec<ModeTrace>), HomologyError>
where
    S: SeriesNew,
{
    let mut out = S::empty(n_angles, n_sites);
    let mut traces = Vec::new();
    let mut witnesses = Vec::new();
    for res in results {
        match res {
            Ok((k, v, t)) => {
                put(&mut out, k, v);
                traces.push(t);
            }
            Err(HomologyError::SmallDivisor(w)) => witnesses.extend(w),
            Err(e) => return Err(e),
        }
    }
    if !witnesses.is_empty() {
        witnesses.sort_by(|a, b| a.value.total_cmp(&b.value));
        return Err(HomologyError::SmallDivisor(witnesses));
    }
    Ok((out, traces))
}

trait SeriesNew {
    fn empty(n_angles: usize, n_sites: usize) -> Self;
}

impl<T: Real> SeriesNew for FourierVectorSeries<T> {
    fn empty(n_angles: usize, n_sites: usize) -> Self {
        Self::new(n_angles, n_sites)
    }
}

impl<T: Real> SeriesNew for FourierOperatorSeries<T> {
    fn empty(n_angles: usize, n_sites: usize) -> Self {
        Self::new(n_angles, n_sites)
    }
}

/// Sign pattern of the second-Melnikov equation for one mode with `a = (k,omega)`:
/// `Plus`: `(a + L) F + F L'`, `Minus`: `(a - L) F - F L'`, `Difference`: `(a + L) F - F L'`,
/// where `L = Lambda + B` and `L' = Lambda + B'`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondSign {
    Plus,
    Minus,
    Difference,
}

/// Left and right factors `M`, `N` of `M F + F N = R`.
pub fn sylvester_factors<T: Real>(
    kw: f64,
    sign: SecondSign,
    lam: &[f64],
    b: &DMatrix<Cx<T>>,
    b_right: &DMatrix<Cx<T>>,
) -> (DMatrix<Cx<T>>, DMatrix<Cx<T>>) {
    let (s1, s2) = match sign {
        SecondSign::Plus => (1.0, 1.0),
        SecondSign::Minus => (-1.0, -1.0),
        SecondSign::Difference => (1.0, -1.0),
    };
    let n = lam.len();
    let mut m = b.scale(T::lit(s1));
    let mut nn = b_right.scale(T::lit(s2));
    for i in 0..n {
        m[(i, i)] += cre(T::lit(kw + s1 * lam[i]));
        nn[(i, i)] += cre(T::lit(s2 * lam[i]));
    }
    (m, nn)
}

pub fn sylvester_apply<T: Real>(m: &DMatrix<Cx<T>>, n: &DMatrix<Cx<T>>, f: &DMatrix<Cx<T>>) -> DMatrix<Cx<T>> {
    m * f + f * n
}

/// `I (x) M + N^T (x) I`, acting on column-stacked `Vec F`.
pub fn kron_operator<T: Real>(m: &DMatrix<Cx<T>>, n: &DMatrix<Cx<T>>) -> DMatrix<Cx<T>> {
    let id_r = DMatrix::<Cx<T>>::identity(n.nrows(), n.nrows());
    let id_l = DMatrix::<Cx<T>>::identity(m.nrows(), m.nrows());
    id_r.kronecker(m) + n.transpose().kronecker(&id_l)
}

/// Dense Kronecker solve of `M F + F N = R`; entries listed in `pinned` are fixed to
/// zero and their equations dropped.
pub fn sylvester_kron<T: Real>(
    m: &DMatrix<Cx<T>>,
    n: &DMatrix<Cx<T>>,
    r: &DMatrix<Cx<T>>,
    pinned: &[(usize, usize)],
) -> Option<DMatrix<Cx<T>>> {
    let (rows, cols) = (m.nrows(), n.nrows());
    let op = kron_operator(m, n);
    let keep: Vec<usize> = (0..rows * cols).filter(|&v| !pinned.contains(&(v % rows, v / rows))).collect();
    let reduced = DMatrix::from_fn(keep.len(), keep.len(), |i, j| op[(keep[i], keep[j])]);
    let rhs = DVector::from_iterator(keep.len(), keep.iter().map(|&v| r[(v % rows, v / rows)]));
    let sol = reduced.lu().solve(&rhs)?;
    let mut f = DMatrix::zeros(rows, cols);
    for (i, &v) in keep.iter().enumerate() {
        f[(v % rows, v / rows)] = sol[i];
    }
    Some(f)
}

/// One Fourier mode of the second-Melnikov equation.
#[allow(clippy::too_many_arguments)]
pub fn solve_second_mode<T: Real>(
    k: &[i32],
    kw: f64,
    sign: SecondSign,
    lam: &[f64],
    b: &DMatrix<Cx<T>>,
    b_right: &DMatrix<Cx<T>>,
    weights: &[f64],
    r: &DMatrix<Cx<T>>,
    opts: &SolverOptions,
) -> Result<(DMatrix<Cx<T>>, ModeTrace), HomologyError> {
    let n = lam.len();
    if b.shape() != (n, n) || b_right.shape() != (n, n) || r.shape() != (n, n) || weights.len() != n {
        return Err(HomologyError::Shape(format!("second solver: {n} sites")));
    }
    let (m, nn) = sylvester_factors(kw, sign, lam, b, b_right);
    let mut trace = ModeTrace { k: k.to_vec(), strategy: opts.strategy, fell_back: false, min_divisor: f64::INFINITY, residual: 0.0, iterations: 0 };
    let resonant = sign == SecondSign::Difference && k.iter().all(|&c| c == 0);
    let pinned: Vec<(usize, usize)> = if resonant { (0..n).map(|i| (i, i)).collect() } else { Vec::new() };
    if resonant {
        let scale = vec_norm(r.iter().copied());
        for i in 0..n {
            let v = cabs(r[(i, i)]).to_f64_lossy();
            if v > 1e-12 * scale.max(1e-300) {
                return Err(HomologyError::Resonant { k: k.to_vec(), site: i, value: v });
            }
        }
    }
    let sol = match (opts.strategy, resonant) {
        (Strategy::Dense, _) | (Strategy::Structured, true) => {
            trace.fell_back = resonant && opts.strategy == Strategy::Structured;
            dense_second(k, &m, &nn, r, &pinned, opts, &mut trace)?
        }
        (Strategy::Structured, false) => {
            let part = BlockPartition::new(weights, opts.threshold);
            match structured_second(k, &m, &nn, &part, r, opts, &mut trace) {
                Ok(f) => f,
                Err(HomologyError::Contraction { .. }) => {
                    trace.fell_back = true;
                    dense_second(k, &m, &nn, r, &pinned, opts, &mut trace)?
                }
                Err(e) => return Err(e),
            }
        }
    };
    let mut res = sylvester_apply(&m, &nn, &sol) - r;
    for &(i, j) in &pinned {
        res[(i, j)] = Cx::new(T::zero(), T::zero());
    }
    trace.residual = rel_residual(res.iter().copied(), r.iter().copied());
    Ok((sol, trace))
}

fn dense_second<T: Real>(
    k: &[i32],
    m: &DMatrix<Cx<T>>,
    n: &DMatrix<Cx<T>>,
    r: &DMatrix<Cx<T>>,
    pinned: &[(usize, usize)],
    opts: &SolverOptions,
    trace: &mut ModeTrace,
) -> Result<DMatrix<Cx<T>>, HomologyError> {
    // eigenvalues of I(x)M + N^T(x)I are sums mu_i + nu_j
    let (dm, _) = eig_moduli(m);
    let (dn, _) = eig_moduli(n);
    let mut best = (f64::INFINITY, 0, 0);
    for (i, a) in dm.iter().enumerate() {
        for (j, b) in dn.iter().enumerate() {
            let v = (a + b).norm();
            let skip = !pinned.is_empty() && v < opts.divisor_floor && i == j;
            if !skip && v < best.0 {
                best = (v, i, j);
            }
        }
    }
    trace.min_divisor = trace.min_divisor.min(best.0);
    if best.0 < opts.divisor_floor && pinned.is_empty() {
        return Err(HomologyError::SmallDivisor(vec![DivisorWitness { k: k.to_vec(), sites: vec![best.1, best.2], value: best.0, threshold: opts.divisor_floor }]));
    }
    sylvester_kron(m, n, r, pinned).ok_or_else(|| HomologyError::Singular(k.to_vec()))
}

/// Eigenvalues as `f64` complex numbers (Hermitian input uses the symmetric solver).
fn eig_moduli<T: Real>(a: &DMatrix<Cx<T>>) -> (Vec<num_complex::Complex<f64>>, bool) {
    let c = a.map(|v| num_complex::Complex::new(v.re.to_f64_lossy(), v.im.to_f64_lossy()));
    if matrix_is_hermitian(&c) {
        (c.symmetric_eigen().eigenvalues.iter().map(|v| num_complex::Complex::new(*v, 0.0)).collect(), true)
    } else {
        (c.schur().eigenvalues().map(|v| v.iter().copied().collect()).unwrap_or_default(), false)
    }
}

/// Tail Green function by diagonally preconditioned Picard iteration, then the
/// head equation by an exact Schur complement over the head entries.
fn structured_second<T: Real>(
    k: &[i32],
    m: &DMatrix<Cx<T>>,
    n: &DMatrix<Cx<T>>,
    part: &BlockPartition,
    r: &DMatrix<Cx<T>>,
    opts: &SolverOptions,
    trace: &mut ModeTrace,
) -> Result<DMatrix<Cx<T>>, HomologyError> {
    let size = m.nrows();
    if part.tail.is_empty() {
        return dense_second(k, m, n, r, &[], opts, trace);
    }
    let is_head: Vec<bool> = (0..size).map(|i| part.head.contains(&i)).collect();
    let green = TailGreen::new(m, n, &is_head, opts)?;
    let h = &part.head;
    let hh = h.len() * h.len();
    let (f_r, it) = green.apply(r)?;
    trace.iterations += it;
    let base = sylvester_apply(m, n, &f_r);
    let mut rhs = DVector::zeros(hh);
    let mut schur = DMatrix::zeros(hh, hh);
    let mut responses = Vec::with_capacity(hh);
    for (col, (a, b)) in h.iter().flat_map(|&a| h.iter().map(move |&b| (a, b))).enumerate() {
        let mut e = DMatrix::zeros(size, size);
        e[(a, b)] = cre(T::one());
        let (tau, it) = green.apply(&sylvester_apply(m, n, &e))?;
        trace.iterations += it;
        let full = e - tau;
        let img = sylvester_apply(m, n, &full);
        for (row, (c, d)) in h.iter().flat_map(|&c| h.iter().map(move |&d| (c, d))).enumerate() {
            schur[(row, col)] = img[(c, d)];
            if col == 0 {
                rhs[row] = r[(c, d)] - base[(c, d)];
            }
        }
        responses.push(full);
    }
    let head_sites: Vec<usize> = h.clone();
    let mut local = ModeTrace { min_divisor: f64::INFINITY, ..trace.clone() };
    divisor_check(k, &schur, &head_sites.iter().flat_map(|&a| std::iter::repeat_n(a, h.len())).collect::<Vec<_>>(), opts, &mut local)?;
    trace.min_divisor = trace.min_divisor.min(local.min_divisor);
    let u = if hh == 0 { DVector::zeros(0) } else { schur.lu().solve(&rhs).ok_or_else(|| HomologyError::Singular(k.to_vec()))? };
    let mut f = f_r;
    for (i, resp) in responses.iter().enumerate() {
        f += resp * u[i];
    }
    Ok(f)
}

struct TailGreen<'a, T: Real> {
    m_off: DMatrix<Cx<T>>,
    n_off: DMatrix<Cx<T>>,
    diag_m: Vec<Cx<T>>,
    diag_n: Vec<Cx<T>>,
    is_head: &'a [bool],
    opts: &'a SolverOptions,
}

impl<'a, T: Real> TailGreen<'a, T> {
    fn new(m: &DMatrix<Cx<T>>, n: &DMatrix<Cx<T>>, is_head: &'a [bool], opts: &'a SolverOptions) -> Result<Self, HomologyError> {
        let size = m.nrows();
        let diag_m: Vec<_> = (0..size).map(|i| m[(i, i)]).collect();
        let diag_n: Vec<_> = (0..size).map(|i| n[(i, i)]).collect();
        let mut m_off = m.clone();
        let mut n_off = n.clone();
        for i in 0..size {
            m_off[(i, i)] = Cx::new(T::zero(), T::zero());
            n_off[(i, i)] = Cx::new(T::zero(), T::zero());
        }
        // contraction estimate: off-diagonal couplings relative to the smallest tail divisor
        let mut dmin = f64::INFINITY;
        for a in 0..size {
            for b in 0..size {
                if !(is_head[a] && is_head[b]) {
                    dmin = dmin.min(cabs(diag_m[a] + diag_n[b]).to_f64_lossy());
                }
            }
        }
        if dmin < opts.divisor_floor {
            return Err(HomologyError::Contraction { ratio: f64::INFINITY });
        }
        Ok(Self { m_off, n_off, diag_m, diag_n, is_head, opts })
    }

    /// `F` with zero head entries and `(M F + F N)` matching `x` on tail entries.
    fn apply(&self, x: &DMatrix<Cx<T>>) -> Result<(DMatrix<Cx<T>>, usize), HomologyError> {
        let size = x.nrows();
        let precondition = |y: &DMatrix<Cx<T>>| {
            DMatrix::from_fn(size, size, |a, b| if self.is_head[a] && self.is_head[b] { Cx::new(T::zero(), T::zero()) } else { y[(a, b)] / (self.diag_m[a] + self.diag_n[b]) })
        };
        let mut f = precondition(x);
        let mut prev_delta = f64::INFINITY;
        for it in 0..self.opts.max_iter {
            let next = precondition(&(x - (&self.m_off * &f + &f * &self.n_off)));
            let delta = vec_norm((&next - &f).iter().copied());
            let size_f = vec_norm(next.iter().copied());
            f = next;
            if delta <= self.opts.tol * size_f.max(1e-300) || delta == 0.0 {
                return Ok((f, it + 1));
            }
            if it > 4 && delta > 0.95 * prev_delta {
                return Err(HomologyError::Contraction { ratio: delta / prev_delta });
            }
            prev_delta = delta;
        }
        Err(HomologyError::Contraction { ratio: 1.0 })
    }
}

/// Solve every mode of the second-Melnikov equation in parallel.
#[allow(clippy::too_many_arguments)]
pub fn solve_second_melnikov<T: Real>(
    omega: &[f64],
    lam: &[f64],
    b: &DMatrix<Cx<T>>,
    b_right: &DMatrix<Cx<T>>,
    weights: &[f64],
    r: &FourierOperatorSeries<T>,
    k_max: f64,
    sign: SecondSign,
    opts: &SolverOptions,
) -> Result<(FourierOperatorSeries<T>, Vec<ModeTrace>), HomologyError> {
    let modes: Vec<_> = r.modes.iter().filter(|(k, _)| mode_abs(k) as f64 <= k_max).collect();
    let results: Vec<_> = modes
        .par_iter()
        .map(|(k, rk)| solve_second_mode(k, mode_dot(k, omega), sign, lam, b, b_right, weights, rk, opts).map(|(f, t)| ((*k).clone(), f, t)))
        .collect();
    collect_results(results, r.n_angles, r.n_sites, |out: &mut FourierOperatorSeries<T>, k, f| out.insert(k, f))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegralReport {
    pub horizon: f64,
    pub panels: usize,
    pub spectral_floor: f64,
    pub residual: f64,
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, t);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * t * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (t * p1 - p0) / (t * t - 1.0);
            let dt = p1 / dp;
            t -= dt;
            if dt.abs() < 1e-16 {
                let (mut q0, mut q1) = (1.0, t);
                for j in 2..=n {
                    let q2 = ((2 * j - 1) as f64 * t * q1 - (j - 1) as f64 * q0) / j as f64;
                    q0 = q1;
                    q1 = q2;
                }
                let dq = n as f64 * (t * q1 - q0) / (t * t - 1.0);
                w[i] = 2.0 / ((1.0 - t * t) * dq * dq);
                break;
            }
        }
        x[i] = t;
    }
    (x, w)
}

fn hermitian_floor<T: Real>(a: &DMatrix<Cx<T>>) -> f64 {
    let h = (a + a.adjoint()).scale(T::lit(0.5));
    h.symmetric_eigen().eigenvalues.iter().map(|v| v.to_f64_lossy()).fold(f64::INFINITY, f64::min)
}

/// `X = int_0^inf e^{-tM} Y e^{-tN} dt`, solving `M X + X N = Y` when the Hermitian
/// parts of `M` and `N` are bounded below with positive sum.
pub fn sylvester_integral<T: Real>(
    m: &DMatrix<Cx<T>>,
    n: &DMatrix<Cx<T>>,
    y: &DMatrix<Cx<T>>,
    tol: f64,
) -> Result<(DMatrix<Cx<T>>, IntegralReport), HomologyError> {
    let mu = hermitian_floor(m) + hermitian_floor(n);
    if !(mu > 0.0) {
        return Err(HomologyError::NotApplicable { mu });
    }
    let ynorm = vec_norm(y.iter().copied());
    if ynorm == 0.0 {
        return Ok((y.clone(), IntegralReport { horizon: 0.0, panels: 0, spectral_floor: mu, residual: 0.0 }));
    }
    let horizon = (ynorm / (tol * 1e-3)).ln().max(1.0) / mu;
    let (gx, gw) = gauss_legendre(12);
    let scale = spectral_norm(m).max(spectral_norm(n)).max(mu);
    let mut panels = ((horizon * scale).ceil() as usize).max(4);
    let mut last: Option<DMatrix<Cx<T>>> = None;
    for _ in 0..12 {
        let h = horizon / panels as f64;
        let node_m: Vec<_> = gx.iter().map(|&x| (m * cre(T::lit(-h * (1.0 + x) / 2.0))).exp()).collect();
        let node_n: Vec<_> = gx.iter().map(|&x| (n * cre(T::lit(-h * (1.0 + x) / 2.0))).exp()).collect();
        let step_m = (m * cre(T::lit(-h))).exp();
        let step_n = (n * cre(T::lit(-h))).exp();
        let mut left = DMatrix::<Cx<T>>::identity(m.nrows(), m.nrows());
        let mut right = DMatrix::<Cx<T>>::identity(n.nrows(), n.nrows());
        let mut x = DMatrix::zeros(y.nrows(), y.ncols());
        for _ in 0..panels {
            let ly = &left * y;
            for q in 0..gx.len() {
                x += (&node_m[q] * &ly * &right * &node_n[q]) * cre(T::lit(gw[q] * h / 2.0));
            }
            left = &step_m * &left;
            right = &right * &step_n;
        }
        let residual = rel_residual((sylvester_apply(m, n, &x) - y).iter().copied(), y.iter().copied());
        let stable = last.as_ref().is_some_and(|p| vec_norm((p - &x).iter().copied()) <= tol * vec_norm(x.iter().copied()));
        if residual <= tol || stable {
            return Ok((x, IntegralReport { horizon, panels, spectral_floor: mu, residual }));
        }
        last = Some(x);
        panels *= 2;
    }
    let x = last.unwrap();
    let residual = rel_residual((sylvester_apply(m, n, &x) - y).iter().copied(), y.iter().copied());
    Ok((x, IntegralReport { horizon, panels, spectral_floor: mu, residual }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardReport {
    /// Frobenius norm of the running defect, starting with `|R0|`.
    pub defects: Vec<f64>,
    /// `max(||Lambda^{-1} B||, ||Lambda^{-1} B'||)` in the spectral norm.
    pub contraction: f64,
}

impl PicardReport {
    /// Largest consecutive defect ratio above round-off.
    pub fn max_ratio(&self) -> f64 {
        let floor = self.defects[0] * 1e-13;
        self.defects.windows(2).filter(|w| w[1] > floor).map(|w| w[1] / w[0]).fold(0.0, f64::max)
    }
}

/// `(Lambda + B) X + X (Lambda + B') = R0` by corrections `X += g(defect)` with
/// `g(Y)_ij = Y_ij / (lambda_i + lambda_j)`.
pub fn sylvester_picard_k0<T: Real>(
    lam: &[f64],
    b: &DMatrix<Cx<T>>,
    b_right: &DMatrix<Cx<T>>,
    r0: &DMatrix<Cx<T>>,
    tol: f64,
) -> Result<(DMatrix<Cx<T>>, PicardReport), HomologyError> {
    let n = lam.len();
    let inv = DMatrix::from_fn(n, n, |i, j| if i == j { cre(T::lit(1.0 / lam[i])) } else { Cx::new(T::zero(), T::zero()) });
    let contraction = spectral_norm(&(&inv * b).map(|v| cre(cabs(v)))).max(spectral_norm(&(&inv * b_right).map(|v| cre(cabs(v)))));
    if contraction >= 0.5 {
        return Err(HomologyError::Contraction { ratio: contraction });
    }
    let (m, nn) = sylvester_factors(0.0, SecondSign::Plus, lam, b, b_right);
    let g = |y: &DMatrix<Cx<T>>| DMatrix::from_fn(n, n, |i, j| y[(i, j)] / cre(T::lit(lam[i] + lam[j])));
    let mut x = DMatrix::zeros(n, n);
    let mut defect = r0.clone();
    let r0n = vec_norm(r0.iter().copied());
    let mut defects = vec![r0n];
    for _ in 0..500 {
        if *defects.last().unwrap() <= tol * r0n.max(1e-300) {
            break;
        }
        x += g(&defect);
        defect = r0 - sylvester_apply(&m, &nn, &x);
        let d = vec_norm(defect.iter().copied());
        if d >= *defects.last().unwrap() {
            defects.push(d);
            break;
        }
        defects.push(d);
    }
    Ok((x, PicardReport { defects, contraction }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KronReport {
    pub norm_product: f64,
    pub mixed_product: f64,
    pub inverse: f64,
    pub adjoint: f64,
    pub vec_identity: f64,
}

impl KronReport {
    pub fn max_error(&self) -> f64 {
        [self.norm_product, self.mixed_product, self.inverse, self.adjoint, self.vec_identity].into_iter().fold(0.0, f64::max)
    }
}

/// Column-stacked `Vec`.
pub fn vec_of<T: Real>(a: &DMatrix<Cx<T>>) -> DVector<Cx<T>> {
    DVector::from_column_slice(a.as_slice())
}

fn rel_diff(a: &DMatrix<Cx<f64>>, b: &DMatrix<Cx<f64>>) -> f64 {
    vec_norm((a - b).iter().copied()) / vec_norm(b.iter().copied()).max(1e-300)
}

/// Kronecker identities on given square complex matrices (`X`, `Y` invertible).
pub fn kron_identities(x: &DMatrix<Cx<f64>>, y: &DMatrix<Cx<f64>>, u: &DMatrix<Cx<f64>>, v: &DMatrix<Cx<f64>>) -> KronReport {
    let xy = x.kronecker(y);
    let nx = spectral_norm(x);
    let ny = spectral_norm(y);
    let norm_product = (spectral_norm(&xy) - nx * ny).abs() / (nx * ny).max(1e-300);
    let mixed_product = rel_diff(&(&xy * u.kronecker(v)), &(x * u).kronecker(&(y * v)));
    let inverse = match (xy.clone().try_inverse(), x.clone().try_inverse(), y.clone().try_inverse()) {
        (Some(a), Some(b), Some(c)) => rel_diff(&a, &b.kronecker(&c)),
        _ => f64::INFINITY,
    };
    let adjoint = rel_diff(&xy.adjoint(), &x.adjoint().kronecker(&y.adjoint()));
    // Vec(X U Y) = (Y^T (x) X) Vec U with U sized to fit
    let lhs = vec_of(&(x * u.view((0, 0), (x.ncols(), y.nrows())).into_owned() * y));
    let rhs = y.transpose().kronecker(x) * vec_of(&u.view((0, 0), (x.ncols(), y.nrows())).into_owned());
    let vec_identity = vec_norm((&lhs - &rhs).iter().copied()) / vec_norm(rhs.iter().copied()).max(1e-300);
    KronReport { norm_product, mixed_product, inverse, adjoint, vec_identity }
}

/// The identities on random `size x size` complex matrices.
pub fn kron_identities_check(rng: &mut impl Rng, size: usize) -> KronReport {
    let mut draw = || crate::norms::random_complex_matrix(rng, size, size, 1.0) + DMatrix::identity(size, size) * cre(2.0);
    let (x, y, u, v) = (draw(), draw(), draw(), draw());
    kron_identities(&x, &y, &u, &v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn herm(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<Cx<f64>> {
        let a = crate::norms::random_complex_matrix(rng, n, n, scale);
        (&a + a.adjoint()) * cre(0.5)
    }

    #[test]
    fn diagonal_first_mode() {
        let lam = [0.5, 0.4, 0.3];
        let b = DMatrix::zeros(3, 3);
        let mut r = DVector::zeros(3);
        r[1] = cre(1.0);
        let (f, _) = solve_first_mode(&[1], -0.2, &lam, &b, &[1.0, 2.0, 3.0], &r, &SolverOptions::default()).unwrap();
        assert!((f[1] - cre(1.0 / 0.2)).norm() < 1e-14);
    }

    #[test]
    fn structured_first_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30;
        let lam: Vec<f64> = (1..=n).map(|j| j as f64 / (1.0 + (j * j) as f64)).collect();
        let w: Vec<f64> = (1..=n).map(|j| j as f64).collect();
        let b = herm(&mut rng, n, 1e-3);
        let r = DVector::from_fn(n, |_, _| Cx::new(rng.random::<f64>(), rng.random::<f64>()));
        let s = SolverOptions { threshold: 10.0, ..Default::default() };
        let d = SolverOptions { strategy: Strategy::Dense, ..Default::default() };
        let (fs, ts) = solve_first_mode(&[2], -0.93, &lam, &b, &w, &r, &s).unwrap();
        let (fd, _) = solve_first_mode(&[2], -0.93, &lam, &b, &w, &r, &d).unwrap();
        assert!(!ts.fell_back);
        assert!((&fs - &fd).norm() / fd.norm() < 1e-10);
        assert!(ts.residual < 1e-12);
    }

    #[test]
    fn second_sum_diagonal_closed_form() {
        let lam = [0.5, 0.25];
        let z = DMatrix::zeros(2, 2);
        let r = DMatrix::from_element(2, 2, cre(1.0));
        let (f, _) = solve_second_mode(&[0], 0.0, SecondSign::Plus, &lam, &z, &z, &[1.0, 2.0], &r, &SolverOptions::default()).unwrap();
        assert!((f[(0, 1)] - cre(1.0 / 0.75)).norm() < 1e-14);
        assert!((f[(1, 1)] - cre(2.0)).norm() < 1e-14);
    }

    #[test]
    fn difference_rejects_diagonal() {
        let lam = [0.5, 0.25];
        let z = DMatrix::zeros(2, 2);
        let r = DMatrix::from_element(2, 2, cre(1.0));
        let res = solve_second_mode(&[0], 0.0, SecondSign::Difference, &lam, &z, &z, &[1.0, 2.0], &r, &SolverOptions::default());
        assert!(matches!(res, Err(HomologyError::Resonant { .. })));
    }

    #[test]
    fn structured_second_matches_kron() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 12;
        let lam: Vec<f64> = (1..=n).map(|j| 1.0 / (1.0 + j as f64)).collect();
        let w: Vec<f64> = (1..=n).map(|j| j as f64).collect();
        let b = herm(&mut rng, n, 1e-3);
        let b2 = herm(&mut rng, n, 1e-3);
        let r = crate::norms::random_complex_matrix(&mut rng, n, n, 1.0);
        let s = SolverOptions { threshold: 5.0, ..Default::default() };
        let d = SolverOptions { strategy: Strategy::Dense, ..Default::default() };
        for sign in [SecondSign::Plus, SecondSign::Minus, SecondSign::Difference] {
            let (fs, ts) = solve_second_mode(&[1, -1], 0.71, sign, &lam, &b, &b2, &w, &r, &s).unwrap();
            let (fd, td) = solve_second_mode(&[1, -1], 0.71, sign, &lam, &b, &b2, &w, &r, &d).unwrap();
            assert!(!ts.fell_back, "{sign:?}");
            assert!((&fs - &fd).norm() / fd.norm() < 1e-9, "{sign:?}");
            assert!(ts.residual < 1e-10 && td.residual < 1e-10);
        }
    }

    #[test]
    fn integral_identity_gives_half() {
        let id = DMatrix::<Cx<f64>>::identity(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = crate::norms::random_complex_matrix(&mut rng, 3, 3, 1.0);
        let (x, rep) = sylvester_integral(&id, &id, &y, 1e-12).unwrap();
        assert!((&x - &y * cre(0.5)).norm() < 1e-11 * y.norm(), "{rep:?}");
    }

    #[test]
    fn integral_rejects_indefinite() {
        let m = DMatrix::<Cx<f64>>::identity(2, 2) * cre(-1.0);
        let y = DMatrix::identity(2, 2);
        assert!(matches!(sylvester_integral(&m, &m, &y, 1e-10), Err(HomologyError::NotApplicable { .. })));
    }

    #[test]
    fn picard_zero_perturbation_is_one_step() {
        let lam = [0.5, 0.2];
        let z = DMatrix::zeros(2, 2);
        let r = DMatrix::from_element(2, 2, cre(1.0));
        let (x, rep) = sylvester_picard_k0(&lam, &z, &z, &r, 1e-14).unwrap();
        assert_eq!(rep.defects.len(), 2);
        assert!((x[(0, 1)] - cre(1.0 / 0.7)).norm() < 1e-15);
    }

    #[test]
    fn kron_identity_matrices_exact() {
        let id = DMatrix::<Cx<f64>>::identity(3, 3);
        assert_eq!(kron_identities(&id, &id, &id, &id).max_error(), 0.0);
    }

    #[test]
    fn kron_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(kron_identities_check(&mut rng, 4).max_error() < 1e-12);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert!((s - 2.0 / 15.0).abs() < 1e-14);
    }

    #[test]
    fn cutoff_is_idempotent() {
        let mut f = FourierVectorSeries::<f64>::new(1, 1);
        for k in -5..=5 {
            f.insert(vec![k], DVector::from_element(1, cre(1.0)));
        }
        let g = f.cutoff(2.0);
        assert_eq!(g.modes.len(), 5);
        assert_eq!(g.cutoff(2.0), g);
        assert_eq!(f.cutoff(9.0), f);
    }
}
