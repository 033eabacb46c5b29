//! KAM iteration on `H = N + R + P` with `N = (omega, y) + <(Lambda + B) z, zbar>`.
//!
//! One step solves the homological equations block by block (`F^x`, then
//! `F^z, F^zbar`, then `F^y` and the quadratic blocks), with the low-weight
//! corrections `R_+` coming from `{P, F}` fed into the later blocks, and
//! conjugates the full Hamiltonian by the Lie series of `F`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::homology::{
    mode_abs, mode_dot, solve_first_melnikov, solve_second_melnikov, ExponentProfile, FourierOperatorSeries,
    FourierVectorSeries, HomologyError, ModeTrace, SecondSign, SolverOptions,
};
use crate::melnikov::{excise_first, excise_second, excise_tangent, FrequencyMap, ParameterBox};
use crate::model::AffineFrequencies;
use crate::norms::{op_norm, vf_triple_norm, NormContext, NormError, SampleGrid};
use crate::poly::{Caps, Evaluator, HamiltonianPoly, LieOptions, Monomial, PhasePoint, PolyError};
use crate::scalar::{cre, cx, Cx};

type Poly = HamiltonianPoly<f64>;
type C = Cx<f64>;

#[derive(Debug, Error)]
pub enum KamError {
    #[error(transparent)]
    Homology(#[from] HomologyError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error("tangent divisor {value:.3e} below floor at k = {k:?}")]
    TangentDivisor { k: Vec<i32>, value: f64 },
    #[error("parameter box emptied at step {step}")]
    EmptyBox { step: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

// ---------------------------------------------------------------------------
// schedule

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub epsilon0: f64,
    pub rho0: f64,
    pub s0: f64,
    pub r0: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { epsilon0: 1e-4, rho0: 0.3, s0: 0.5, r0: 0.05 }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<(), KamError> {
        if !(self.epsilon0 > 0.0 && self.epsilon0 < 1.0) {
            return Err(KamError::Schedule(format!("epsilon0 = {} not in (0,1)", self.epsilon0)));
        }
        if !(self.rho0 > 0.0) {
            return Err(KamError::Schedule(format!("rho0 = {} not positive", self.rho0)));
        }
        if !(self.s0 > 0.0 && self.r0 > 0.0) {
            return Err(KamError::Schedule(format!("s0 = {}, r0 = {} must be positive", self.s0, self.r0)));
        }
        Ok(())
    }
}

/// Per-step constants of the iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KamSchedule {
    pub m: usize,
    pub epsilon: f64,
    pub e: f64,
    pub s: f64,
    pub r: f64,
    /// `s_m^j` and `r_m^j` for `j = 0..=10`, linearly bridging step `m` to `m+1`.
    pub s_bridges: Vec<f64>,
    pub r_bridges: Vec<f64>,
    pub k: f64,
}

const BASEL: f64 = PI * PI / 6.0;

/// `e_m = (1^-2 + ... + m^-2) / (2 zeta(2))`, so `e_m < 1/2`.
pub fn schedule_e(m: usize) -> f64 {
    (1..=m).map(|n| 1.0 / (n as f64).powi(2)).sum::<f64>() / (2.0 * BASEL)
}

pub fn schedule(m: usize, params: &ScheduleParams) -> KamSchedule {
    let growth = (1.0 + params.rho0).powi(m as i32);
    let log_eps = params.epsilon0.ln() * growth;
    let (e, e_next) = (schedule_e(m), schedule_e(m + 1));
    let (s, s_next) = (params.s0 * (1.0 - e), params.s0 * (1.0 - e_next));
    let (r, r_next) = (params.r0 * (1.0 - e), params.r0 * (1.0 - e_next));
    let bridge = |a: f64, b: f64| (0..=10).map(|j| a - j as f64 * (a - b) / 10.0).collect::<Vec<_>>();
    let s_bridges = bridge(s, s_next);
    let r_bridges = bridge(r, r_next);
    let k = 2.0 * log_eps.abs() / (s_bridges[5] - s_bridges[6]);
    KamSchedule { m, epsilon: params.epsilon0.powf(growth), e, s, r, s_bridges, r_bridges, k }
}

// ---------------------------------------------------------------------------
// splitting

/// The seven low-weight blocks of the perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowBlock {
    X,
    Y,
    Z,
    Zb,
    ZZ,
    ZbZb,
    ZZb,
}

impl LowBlock {
    pub const ALL: [LowBlock; 7] = [Self::X, Self::Y, Self::Z, Self::Zb, Self::ZZ, Self::ZbZb, Self::ZZb];

    pub fn of(m: &Monomial) -> Option<Self> {
        match (m.ydeg(), m.z.len(), m.zb.len()) {
            (0, 0, 0) => Some(Self::X),
            (1, 0, 0) => Some(Self::Y),
            (0, 1, 0) => Some(Self::Z),
            (0, 0, 1) => Some(Self::Zb),
            (0, 2, 0) => Some(Self::ZZ),
            (0, 0, 2) => Some(Self::ZbZb),
            (0, 1, 1) => Some(Self::ZZb),
            _ => None,
        }
    }
}

/// `2|gamma| + deg_z >= 3`: the terms of size `O(|y|^2 + |y| ||z|| + ||z||^3)`.
pub fn is_high(m: &Monomial) -> bool {
    m.weight() >= 3
}

fn is_average(m: &Monomial) -> bool {
    m.weight() == 0 && m.kabs() == 0
}

#[derive(Clone, Debug)]
pub struct Split {
    pub low: Poly,
    pub high: Poly,
    /// The angle average of `R^x`, dropped as a gauge constant.
    pub average: C,
}

pub fn split_perturbation(r: &Poly) -> Split {
    let average = r.coeff(&Monomial::one(r.n_angles()));
    let (high, low) = r.partition(is_high);
    Split { low: low.filter(|m| !is_average(m)), high, average }
}

pub fn block(p: &Poly, b: LowBlock) -> Poly {
    p.filter(|m| LowBlock::of(m) == Some(b))
}

// ---------------------------------------------------------------------------
// brackets and Lie transforms

/// `{f, g}`.
pub fn poisson_bracket(f: &Poly, g: &Poly) -> Poly {
    f.bracket(g)
}

/// `H o phi_F` by the Lie series, truncated to `caps` and pruned.
pub fn lie_transform(h: &Poly, f: &Poly, opts: &LieOptions) -> Result<(Poly, crate::poly::LieReport), KamError> {
    Ok(h.lie_transform(f, opts)?)
}

fn low_part(p: &Poly) -> Poly {
    p.filter(|m| !is_high(m))
}

/// Low-weight part of `{P, F}` assembled from the partial derivatives of `P`:
/// `-P_y . F_x + P_x . F_y + i (P_z . F_zbar - P_zbar . F_z)`, with each
/// derivative of `P` cut to weight `<= 2` before multiplying.
pub fn bracket_corrections(f: &Poly, p: &Poly) -> Poly {
    let (na, ns) = (p.n_angles(), p.n_sites());
    let mut out = Poly::new(na, ns);
    let iu = cx(0.0, 1.0);
    for i in 0..na {
        let fx = f.d_dx(i);
        if !fx.is_zero() {
            let py = p.d_dy(i).filter(|m| m.weight() <= 2);
            out.add_assign_scaled(&low_part(&py.mul(&fx)), cre(-1.0));
        }
        let fy = f.d_dy(i);
        if !fy.is_zero() {
            let px = p.d_dx(i).filter(|m| m.weight() <= 2);
            out.add_assign_scaled(&low_part(&px.mul(&fy)), cre(1.0));
        }
    }
    for j in 0..ns as u16 {
        let fzb = f.d_dzb(j);
        if !fzb.is_zero() {
            let pz = p.d_dz(j).filter(|m| m.weight() <= 2);
            out.add_assign_scaled(&low_part(&pz.mul(&fzb)), iu);
        }
        let fz = f.d_dz(j);
        if !fz.is_zero() {
            let pzb = p.d_dzb(j).filter(|m| m.weight() <= 2);
            out.add_assign_scaled(&low_part(&pzb.mul(&fz)), -iu);
        }
    }
    out.filter(|m| !is_average(m))
}

/// Low-weight part of `{P, F}` by bracketing first and truncating after.
pub fn bracket_corrections_oracle(f: &Poly, p: &Poly) -> Poly {
    low_part(&p.bracket(f)).filter(|m| !is_average(m))
}

// ---------------------------------------------------------------------------
// state

/// `(omega, y) + sum_ij (lambda_i delta_ij + B_ij) zbar_i z_j`.
pub fn normal_part(omega: &[f64], lam: &[f64], b: &DMatrix<C>) -> Poly {
    let (na, ns) = (omega.len(), lam.len());
    let mut n = Poly::new(na, ns);
    for (i, &w) in omega.iter().enumerate() {
        let mut y = vec![0u8; na];
        y[i] = 1;
        n.add_term(Monomial::one(na).with_y(&y), cre(w));
    }
    for i in 0..ns {
        for j in 0..ns {
            let v = b[(i, j)] + if i == j { cre(lam[i]) } else { cre(0.0) };
            if v != cre(0.0) {
                n.add_term(Monomial::one(na).with_z(&[j as u16]).with_zb(&[i as u16]), v);
            }
        }
    }
    n
}

#[derive(Clone, Debug)]
pub struct KamState {
    pub step: usize,
    pub omega: Vec<f64>,
    pub lam: Vec<f64>,
    pub b: DMatrix<C>,
    pub r: Poly,
    pub p: Poly,
    pub weights: Vec<f64>,
    pub limit_point: f64,
}

impl KamState {
    /// Read `omega` and `diag(B) = Omega - lambda` off the angle-independent
    /// quadratic part of `h`; everything else becomes `R + P`.
    pub fn from_hamiltonian(h: &Poly, lam: Vec<f64>, weights: Vec<f64>, limit_point: f64) -> Result<Self, KamError> {
        let (na, ns) = (h.n_angles(), h.n_sites());
        if lam.len() != ns || weights.len() != ns {
            return Err(KamError::Shape(format!("{ns} sites, {} frequencies, {} weights", lam.len(), weights.len())));
        }
        let omega: Vec<f64> = (0..na)
            .map(|i| {
                let mut y = vec![0u8; na];
                y[i] = 1;
                h.coeff(&Monomial::one(na).with_y(&y)).re
            })
            .collect();
        let b = DMatrix::from_fn(ns, ns, |i, j| {
            if i == j {
                cre(h.coeff(&Monomial::one(na).with_z(&[i as u16]).with_zb(&[i as u16])).re - lam[i])
            } else {
                cre(0.0)
            }
        });
        let rest = h.sub(&normal_part(&omega, &lam, &b));
        let split = split_perturbation(&rest);
        Ok(Self { step: 0, omega, lam, b, r: split.low, p: split.high, weights, limit_point })
    }

    pub fn normal_part(&self) -> Poly {
        normal_part(&self.omega, &self.lam, &self.b)
    }

    pub fn hamiltonian(&self) -> Poly {
        self.normal_part().add(&self.r).add(&self.p)
    }

    pub fn n_angles(&self) -> usize {
        self.omega.len()
    }

    pub fn n_sites(&self) -> usize {
        self.lam.len()
    }
}

// ---------------------------------------------------------------------------
// block <-> series

fn vector_series(p: &Poly, blk: LowBlock, k_cap: f64) -> FourierVectorSeries<f64> {
    let (na, ns) = (p.n_angles(), p.n_sites());
    let mut s = FourierVectorSeries::new(na, ns);
    for (m, c) in p.sorted_terms() {
        if LowBlock::of(m) != Some(blk) || mode_abs(&m.k) as f64 > k_cap {
            continue;
        }
        let site = (if blk == LowBlock::Z { m.z[0] } else { m.zb[0] }) as usize;
        s.modes.entry(m.k.to_vec()).or_insert_with(|| DVector::zeros(ns))[site] += c;
    }
    s
}

fn vector_poly(s: &FourierVectorSeries<f64>, blk: LowBlock) -> Poly {
    let mut out = Poly::new(s.n_angles, s.n_sites);
    for (k, v) in &s.modes {
        for (site, &c) in v.iter().enumerate() {
            if c != cre(0.0) {
                let m = Monomial::one(s.n_angles).with_k(k);
                let m = if blk == LowBlock::Z { m.with_z(&[site as u16]) } else { m.with_zb(&[site as u16]) };
                out.add_term(m, c);
            }
        }
    }
    out
}

/// `ZZ`/`ZbZb` blocks as symmetric matrices (`c z_i z_j = S_ij z_i z_j + S_ji z_j z_i`);
/// `ZZb` as `S` with `c zbar_i z_j = S_ij zbar_i z_j`.
fn operator_series(p: &Poly, blk: LowBlock, k_cap: f64, skip_zero: bool) -> FourierOperatorSeries<f64> {
    let (na, ns) = (p.n_angles(), p.n_sites());
    let mut s = FourierOperatorSeries::new(na, ns);
    for (m, c) in p.sorted_terms() {
        if LowBlock::of(m) != Some(blk) || mode_abs(&m.k) as f64 > k_cap || (skip_zero && m.kabs() == 0) {
            continue;
        }
        let e = s.modes.entry(m.k.to_vec()).or_insert_with(|| DMatrix::zeros(ns, ns));
        match blk {
            LowBlock::ZZb => e[(m.zb[0] as usize, m.z[0] as usize)] += c,
            _ => {
                let v = if blk == LowBlock::ZZ { &m.z } else { &m.zb };
                let (i, j) = (v[0] as usize, v[1] as usize);
                if i == j {
                    e[(i, i)] += c;
                } else {
                    e[(i, j)] += c.scale(0.5);
                    e[(j, i)] += c.scale(0.5);
                }
            }
        }
    }
    s
}

fn operator_poly(s: &FourierOperatorSeries<f64>, blk: LowBlock) -> Poly {
    let mut out = Poly::new(s.n_angles, s.n_sites);
    let n = s.n_sites;
    for (k, q) in &s.modes {
        let base = Monomial::one(s.n_angles).with_k(k);
        for i in 0..n {
            for j in 0..n {
                let c = q[(i, j)];
                if c == cre(0.0) {
                    continue;
                }
                let (a, b) = (i as u16, j as u16);
                let m = match blk {
                    LowBlock::ZZb => base.clone().with_zb(&[a]).with_z(&[b]),
                    LowBlock::ZZ => base.clone().with_z(&[a, b]),
                    _ => base.clone().with_zb(&[a, b]),
                };
                out.add_term(m, c);
            }
        }
    }
    out
}

fn scale_vector_series(s: &FourierVectorSeries<f64>, a: C) -> FourierVectorSeries<f64> {
    let mut out = s.clone();
    out.modes.values_mut().for_each(|v| *v *= a);
    out
}

fn scale_operator_series(s: &FourierOperatorSeries<f64>, a: C) -> FourierOperatorSeries<f64> {
    let mut out = s.clone();
    out.modes.values_mut().for_each(|v| *v *= a);
    out
}

// ---------------------------------------------------------------------------
// homological equations

/// Divisor minima and solver traces of one step.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct HomologicalTrace {
    pub min_tangent_divisor: f64,
    pub min_first_divisor: f64,
    pub min_second_divisor: f64,
    pub fallbacks: usize,
    pub max_mode_residual: f64,
    pub modes: Vec<ModeTrace>,
}

impl HomologicalTrace {
    fn absorb(&mut self, traces: Vec<ModeTrace>, second: bool) {
        for t in &traces {
            if second {
                self.min_second_divisor = self.min_second_divisor.min(t.min_divisor);
            } else {
                self.min_first_divisor = self.min_first_divisor.min(t.min_divisor);
            }
            self.fallbacks += t.fell_back as usize;
            self.max_mode_residual = self.max_mode_residual.max(t.residual);
        }
        self.modes.extend(traces);
    }
}

/// The generator split by block.
#[derive(Clone, Debug)]
pub struct Generator {
    pub fx: Poly,
    pub fy: Poly,
    pub fz: Poly,
    pub fzb: Poly,
    pub fzz: Poly,
    pub fzbzb: Poly,
    pub fzzb: Poly,
}

impl Generator {
    pub fn total(&self) -> Poly {
        [&self.fy, &self.fz, &self.fzb, &self.fzz, &self.fzbzb, &self.fzzb].iter().fold(self.fx.clone(), |acc, p| acc.add(p))
    }
}

/// Linear operator data shared by the homological equations of one step.
pub struct Homological<'a> {
    pub omega: &'a [f64],
    pub lam: &'a [f64],
    pub b: &'a DMatrix<C>,
    pub weights: &'a [f64],
    pub limit_point: f64,
    pub k_cap: f64,
    pub opts: &'a SolverOptions,
}

impl Homological<'_> {
    /// `omega . d_x F = R` on `0 < |k| <= K` for the `X` or `Y` block:
    /// `F(k) = -i R(k) / (k, omega)`.
    pub fn solve_tangent(&self, r: &Poly, blk: LowBlock, trace: &mut HomologicalTrace) -> Result<Poly, KamError> {
        let mut out = Poly::new(r.n_angles(), r.n_sites());
        let mut worst: Option<(Vec<i32>, f64)> = None;
        for (m, c) in r.sorted_terms() {
            if LowBlock::of(m) != Some(blk) || m.kabs() == 0 || mode_abs(&m.k) as f64 > self.k_cap {
                continue;
            }
            let d = mode_dot(&m.k, self.omega);
            trace.min_tangent_divisor = trace.min_tangent_divisor.min(d.abs());
            if d.abs() < self.opts.divisor_floor {
                if worst.as_ref().is_none_or(|w| d.abs() < w.1) {
                    worst = Some((m.k.to_vec(), d.abs()));
                }
                continue;
            }
            out.add_term(m.clone(), c * cx(0.0, -1.0 / d));
        }
        match worst {
            Some((k, value)) => Err(KamError::TangentDivisor { k, value }),
            None => Ok(out),
        }
    }

    fn shifted_lam(&self) -> Vec<f64> {
        self.lam.iter().map(|l| l - self.limit_point).collect()
    }

    /// `((k,omega) + Lambda + B^T) f = -i R^z` and `(-(k,omega) + Lambda + B) g = i R^zbar`.
    pub fn solve_linear(&self, r: &Poly, blk: LowBlock, trace: &mut HomologicalTrace) -> Result<Poly, KamError> {
        let series = vector_series(r, blk, self.k_cap);
        if series.modes.is_empty() {
            return Ok(Poly::new(r.n_angles(), r.n_sites()));
        }
        let lam = self.shifted_lam();
        let (omega, b, rhs): (Vec<f64>, DMatrix<C>, _) = match blk {
            LowBlock::Z => (self.omega.iter().map(|w| -w).collect(), self.b.transpose(), scale_vector_series(&series, cx(0.0, -1.0))),
            LowBlock::Zb => (self.omega.to_vec(), self.b.clone(), scale_vector_series(&series, cx(0.0, 1.0))),
            _ => return Err(KamError::Shape(format!("{blk:?} is not a linear block"))),
        };
        let (f, traces) = solve_first_melnikov(&omega, &lam, &b, self.weights, &rhs, self.k_cap, self.limit_point, self.opts)?;
        trace.absorb(traces, false);
        Ok(vector_poly(&f, blk))
    }

    /// Quadratic blocks:
    /// `((k,omega) + L^T) Q + Q L = -i S` (zz),
    /// `((k,omega) - L) Q - Q L^T = -i S` (zbar zbar),
    /// `(-(k,omega) + L) Q - Q L = i S`, `k != 0` (z zbar), with `L = Lambda + B`.
    pub fn solve_quadratic(&self, r: &Poly, blk: LowBlock, trace: &mut HomologicalTrace) -> Result<Poly, KamError> {
        let series = operator_series(r, blk, self.k_cap, blk == LowBlock::ZZb);
        if series.modes.is_empty() {
            return Ok(Poly::new(r.n_angles(), r.n_sites()));
        }
        let bt = self.b.transpose();
        let neg: Vec<f64> = self.omega.iter().map(|w| -w).collect();
        let (omega, b, b_right, sign, a) = match blk {
            LowBlock::ZZ => (self.omega, &bt, self.b, SecondSign::Plus, cx(0.0, -1.0)),
            LowBlock::ZbZb => (self.omega, self.b, &bt, SecondSign::Minus, cx(0.0, -1.0)),
            LowBlock::ZZb => (neg.as_slice(), self.b, self.b, SecondSign::Difference, cx(0.0, 1.0)),
            _ => return Err(KamError::Shape(format!("{blk:?} is not a quadratic block"))),
        };
        let rhs = scale_operator_series(&series, a);
        let (q, traces) = solve_second_melnikov(omega, self.lam, b, b_right, self.weights, &rhs, self.k_cap, sign, self.opts)?;
        trace.absorb(traces, true);
        Ok(operator_poly(&q, blk))
    }
}

// ---------------------------------------------------------------------------
// one step

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KamOptions {
    pub schedule: ScheduleParams,
    pub steps: usize,
    /// Stop once the ledger falls below this.
    pub target: f64,
    /// Practical bound on the solved Fourier modes, applied on top of `K_m`.
    pub fourier_cap: i64,
    pub caps: Caps,
    pub lie_order: usize,
    /// Weighted-size pruning threshold for the transformed Hamiltonian.
    pub prune: f64,
    pub solver: SolverOptions,
    pub p: f64,
    pub kappa: f64,
    pub grid: SampleGrid,
}

impl Default for KamOptions {
    fn default() -> Self {
        Self {
            schedule: ScheduleParams::default(),
            steps: 4,
            target: 1e-15,
            fourier_cap: 12,
            caps: Caps { zdeg: 5, ydeg: 2, fourier: 40, weight: 4 },
            lie_order: 6,
            prune: 1e-19,
            solver: SolverOptions::default(),
            p: 1.0,
            kappa: 1.0,
            grid: SampleGrid::default(),
        }
    }
}

/// Parameter samples carried through the iteration and the thresholds used to excise them.
#[derive(Clone, Debug)]
pub struct ExcisionSetup {
    pub map: AffineFrequencies,
    pub bx: ParameterBox,
    pub profile: ExponentProfile,
    pub second_sites: Vec<usize>,
}

/// `map` shifted by the accumulated frequency and diagonal operator updates.
struct Shifted<'a> {
    map: &'a AffineFrequencies,
    d_omega: &'a [f64],
    d_normal: &'a [f64],
}

impl FrequencyMap for Shifted<'_> {
    fn tangent(&self, xi: &[f64]) -> Vec<f64> {
        self.map.omega(xi).iter().zip(self.d_omega).map(|(a, b)| a + b).collect()
    }

    fn normal(&self, xi: &[f64]) -> Vec<f64> {
        self.map.normal(xi).iter().zip(self.d_normal).map(|(a, b)| a + b).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub schedule: KamSchedule,
    pub k_cut: f64,
    /// `|| |X_R| ||` and `|| |X_P| ||` before the step.
    pub ledger_r: f64,
    pub ledger_p: f64,
    pub r_terms: usize,
    pub p_terms: usize,
    pub omega_update: Vec<f64>,
    /// `|| B~ - B ||_{h_p -> h_q}`.
    pub b_update: f64,
    pub min_tangent_divisor: f64,
    pub min_first_divisor: f64,
    pub min_second_divisor: f64,
    pub fallbacks: usize,
    pub max_mode_residual: f64,
    /// Low part of `{N, F} + Gamma R + R_+ - <R + R_+>`, relative to `R`.
    pub homological_residual: f64,
    pub generator_norm: f64,
    pub generator_terms: usize,
    pub lie_remainder: f64,
    pub reality_violation: f64,
    pub b_hermitian_defect: f64,
    pub alive_fraction: Option<f64>,
    pub excised: Option<usize>,
}

pub struct StepOutcome {
    pub state: KamState,
    pub record: StepRecord,
    pub generator: Generator,
    pub trace: HomologicalTrace,
}

fn zero_mode_y(r: &Poly) -> Vec<f64> {
    let na = r.n_angles();
    (0..na)
        .map(|i| {
            let mut y = vec![0u8; na];
            y[i] = 1;
            r.coeff(&Monomial::one(na).with_y(&y)).re
        })
        .collect()
}

fn zero_mode_zzb(r: &Poly) -> DMatrix<C> {
    let ns = r.n_sites();
    let mut out = DMatrix::zeros(ns, ns);
    for (m, c) in r.sorted_terms() {
        if m.kabs() == 0 && LowBlock::of(m) == Some(LowBlock::ZZb) {
            out[(m.zb[0] as usize, m.z[0] as usize)] += c;
        }
    }
    out
}

pub fn hermitian_defect(b: &DMatrix<C>) -> f64 {
    (b - b.adjoint()).iter().map(|v| v.norm()).fold(0.0, f64::max)
}

pub fn ledger_norm(r: &Poly, weights: &[f64], opts: &KamOptions, s: f64, rr: f64) -> Result<f64, KamError> {
    if r.is_zero() {
        return Ok(0.0);
    }
    let ctx = NormContext::new(opts.p, opts.kappa, s, rr)?;
    Ok(vf_triple_norm(r, weights, &ctx, &opts.grid)?)
}

/// The homological part of a step: the generator and the averaged updates.
pub struct StepPlan {
    pub generator: Generator,
    pub omega_update: Vec<f64>,
    pub b_delta: DMatrix<C>,
    /// Low part of `{N, F} + Gamma(R + R_+) - <R + R_+>`, relative to `max |R|`.
    pub homological_residual: f64,
    pub trace: HomologicalTrace,
    pub k_cut: f64,
}

pub fn plan_step(state: &KamState, opts: &KamOptions) -> Result<StepPlan, KamError> {
    let k_cut = schedule(state.step, &opts.schedule).k.min(opts.fourier_cap as f64);
    let hom = Homological {
        omega: &state.omega,
        lam: &state.lam,
        b: &state.b,
        weights: &state.weights,
        limit_point: state.limit_point,
        k_cap: k_cut,
        opts: &opts.solver,
    };
    let mut trace = HomologicalTrace {
        min_tangent_divisor: f64::INFINITY,
        min_first_divisor: f64::INFINITY,
        min_second_divisor: f64::INFINITY,
        ..Default::default()
    };

    let fx = hom.solve_tangent(&state.r, LowBlock::X, &mut trace)?;
    let plus1 = bracket_corrections(&fx, &state.p);
    let r1 = state.r.add(&plus1.filter(|m| m.weight() == 1));
    let fz = hom.solve_linear(&r1, LowBlock::Z, &mut trace)?;
    let fzb = hom.solve_linear(&r1, LowBlock::Zb, &mut trace)?;
    let partial = fx.add(&fz).add(&fzb);
    let plus = bracket_corrections(&partial, &state.p);
    let r2 = state.r.add(&plus.filter(|m| m.weight() == 2));

    let omega_update = zero_mode_y(&r2);
    let b_delta = zero_mode_zzb(&r2);
    let fy = hom.solve_tangent(&r2, LowBlock::Y, &mut trace)?;
    let fzz = hom.solve_quadratic(&r2, LowBlock::ZZ, &mut trace)?;
    let fzbzb = hom.solve_quadratic(&r2, LowBlock::ZbZb, &mut trace)?;
    let fzzb = hom.solve_quadratic(&r2, LowBlock::ZZb, &mut trace)?;
    let generator = Generator { fx, fy, fz, fzb, fzz, fzbzb, fzzb };

    let rhs = state.r.add(&plus).filter(|m| mode_abs(&m.k) as f64 <= k_cut);
    let averaged = rhs.filter(|m| m.kabs() == 0 && matches!(LowBlock::of(m), Some(LowBlock::Y | LowBlock::ZZb)));
    let residual = low_part(&state.normal_part().bracket(&generator.total())).add(&rhs).sub(&averaged);
    let homological_residual = residual.max_abs_coeff() / state.r.max_abs_coeff().max(f64::MIN_POSITIVE);
    Ok(StepPlan { generator, omega_update, b_delta, homological_residual, trace, k_cut })
}

pub fn kam_step(state: &KamState, opts: &KamOptions, excision: Option<&mut ExcisionSetup>, d_omega: &[f64], d_normal: &[f64]) -> Result<StepOutcome, KamError> {
    let sched = schedule(state.step, &opts.schedule);
    let k_cut = sched.k.min(opts.fourier_cap as f64);
    let ledger_r = ledger_norm(&state.r, &state.weights, opts, sched.s, sched.r)?;
    let ledger_p = ledger_norm(&state.p.filter(|m| m.weight() <= 4), &state.weights, opts, sched.s, sched.r)?;

    let (alive_fraction, excised) = match excision {
        Some(ex) => {
            let map = Shifted { map: &ex.map, d_omega, d_normal };
            let k = k_cut as i64;
            let t = excise_tangent(&mut ex.bx, &map, k, ex.profile.tangent_threshold(k_cut));
            let f = excise_first(&mut ex.bx, &map, &state.weights, k, ex.profile.melnikov_threshold(k_cut), f64::INFINITY, f64::INFINITY);
            let s = excise_second(&mut ex.bx, &map, k, ex.profile.melnikov_threshold(k_cut), &ex.second_sites);
            if ex.bx.alive_count() == 0 {
                return Err(KamError::EmptyBox { step: state.step });
            }
            (Some(ex.bx.alive_fraction()), Some(t.killed + f.killed + s.killed))
        }
        None => (None, None),
    };

    let plan = plan_step(state, opts)?;
    let f = plan.generator.total().prune(opts.prune, sched.s, sched.r);
    let omega_new: Vec<f64> = state.omega.iter().zip(&plan.omega_update).map(|(a, b)| a + b).collect();
    let b_new = &state.b + &plan.b_delta;
    let q = opts.p + opts.kappa;
    let b_update = op_norm(&plan.b_delta, &state.weights, &state.weights, opts.p, q);

    let lie = LieOptions { order: opts.lie_order, caps: opts.caps, prune: opts.prune, s: sched.s, r: sched.r };
    let h = state.hamiltonian();
    let (h_new, report) = lie_transform(&h, &f, &lie)?;
    let n_new = normal_part(&omega_new, &state.lam, &b_new);
    let split = split_perturbation(&h_new.sub(&n_new));

    let next = KamState { step: state.step + 1, omega: omega_new, lam: state.lam.clone(), b: b_new, r: split.low, p: split.high, weights: state.weights.clone(), limit_point: state.limit_point };
    let record = StepRecord {
        step: state.step,
        schedule: sched.clone(),
        k_cut,
        ledger_r,
        ledger_p,
        r_terms: state.r.len(),
        p_terms: state.p.len(),
        omega_update: plan.omega_update,
        b_update,
        min_tangent_divisor: plan.trace.min_tangent_divisor,
        min_first_divisor: plan.trace.min_first_divisor,
        min_second_divisor: plan.trace.min_second_divisor,
        fallbacks: plan.trace.fallbacks,
        max_mode_residual: plan.trace.max_mode_residual,
        homological_residual: plan.homological_residual,
        generator_norm: f.weighted_norm(sched.s, sched.r),
        generator_terms: f.len(),
        lie_remainder: report.remainder,
        reality_violation: h_new.reality_violation(),
        b_hermitian_defect: hermitian_defect(&next.b),
        alive_fraction,
        excised,
    };
    Ok(StepOutcome { state: next, record, generator: plan.generator, trace: plan.trace })
}

// ---------------------------------------------------------------------------
// driver

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KamRun {
    pub records: Vec<StepRecord>,
    /// `|| |X_R| ||` of every iterate, including the last.
    pub ledger: Vec<f64>,
    pub omega0: Vec<f64>,
    pub omega: Vec<f64>,
    pub b0: DMatrix<C>,
    pub b: DMatrix<C>,
    pub omega_shift: f64,
    /// `|| B^final - B^0 ||_{h_p -> h_q}`.
    pub b_shift: f64,
    /// Schedule `epsilon_M` for the number of steps taken.
    pub epsilon_final: f64,
    pub alive_fraction: Option<f64>,
    #[serde(skip)]
    pub generators: Vec<Poly>,
    #[serde(skip)]
    pub traces: Vec<HomologicalTrace>,
    #[serde(skip)]
    pub final_state: Option<KamState>,
}

impl KamRun {
    /// `log ||R_{m+1}|| / log ||R_m||` for consecutive ledger entries.
    pub fn log_ratios(&self) -> Vec<f64> {
        self.ledger.windows(2).map(|w| w[1].ln() / w[0].ln()).collect()
    }
}

pub fn run_kam(state0: KamState, opts: &KamOptions, mut excision: Option<ExcisionSetup>) -> Result<KamRun, KamError> {
    opts.schedule.validate()?;
    let mut state = state0.clone();
    let mut records = Vec::new();
    let mut generators = Vec::new();
    let mut traces = Vec::new();
    let mut ledger = Vec::new();
    for _ in 0..opts.steps {
        let sched = schedule(state.step, &opts.schedule);
        let eps = ledger_norm(&state.r, &state.weights, opts, sched.s, sched.r)?;
        ledger.push(eps);
        if eps < opts.target {
            break;
        }
        let d_omega: Vec<f64> = state.omega.iter().zip(&state0.omega).map(|(a, b)| a - b).collect();
        let d_normal: Vec<f64> = (0..state.n_sites()).map(|j| (state.b[(j, j)] - state0.b[(j, j)]).re).collect();
        let out = kam_step(&state, opts, excision.as_mut(), &d_omega, &d_normal)?;
        records.push(out.record);
        generators.push(out.generator.total());
        traces.push(out.trace);
        state = out.state;
    }
    if ledger.len() == records.len() {
        let sched = schedule(state.step, &opts.schedule);
        ledger.push(ledger_norm(&state.r, &state.weights, opts, sched.s, sched.r)?);
    }
    let omega_shift = state.omega.iter().zip(&state0.omega).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let q = opts.p + opts.kappa;
    let b_shift = op_norm(&(&state.b - &state0.b), &state.weights, &state.weights, opts.p, q);
    let epsilon_final = schedule(records.len(), &opts.schedule).epsilon;
    Ok(KamRun {
        records,
        ledger,
        omega0: state0.omega.clone(),
        omega: state.omega.clone(),
        b0: state0.b.clone(),
        b: state.b.clone(),
        omega_shift,
        b_shift,
        epsilon_final,
        alive_fraction: excision.as_ref().map(|e| e.bx.alive_fraction()),
        generators,
        traces,
        final_state: Some(state),
    })
}

// ---------------------------------------------------------------------------
// transforms

/// How a Lie map is applied to points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum LieMapMethod {
    /// Time-one flow of `X_F` by RK4.
    Flow { steps: usize },
    /// Coordinate Lie series `sum_{n <= order} ad_F^n(q) / n!`.
    Series { order: usize },
}

/// `Phi = Phi_{F_0} o Phi_{F_1} o ... o Phi_{F_{M-1}}`.
#[derive(Clone, Debug)]
pub struct ComposedTransform {
    pub generators: Vec<Poly>,
    pub method: LieMapMethod,
}

enum Prepared<'a> {
    Flow(Vec<Evaluator<'a, f64>>, usize),
    Series(Vec<CoordinateSeries>),
}

impl ComposedTransform {
    fn prepare(&self) -> Prepared<'_> {
        match self.method {
            LieMapMethod::Flow { steps } => Prepared::Flow(self.generators.iter().map(Evaluator::new).collect(), steps),
            LieMapMethod::Series { order } => Prepared::Series(self.generators.iter().map(|f| CoordinateSeries::new(f, order)).collect()),
        }
    }

    pub fn apply(&self, p: &PhasePoint<f64>) -> PhasePoint<f64> {
        self.apply_with(p, &self.prepare())
    }

    fn apply_with(&self, p: &PhasePoint<f64>, prep: &Prepared) -> PhasePoint<f64> {
        match prep {
            Prepared::Flow(evals, steps) => evals.iter().rev().fold(p.clone(), |q, e| rk4_time_one(e, &q, *steps)),
            Prepared::Series(series) => series.iter().rev().fold(p.clone(), |q, s| s.apply(&q)),
        }
    }

    /// Apply to many points in parallel.
    pub fn apply_all(&self, pts: &[PhasePoint<f64>]) -> Vec<PhasePoint<f64>> {
        let prep = self.prepare();
        pts.par_iter().map(|p| self.apply_with(p, &prep)).collect()
    }
}

/// RK4 integration of `X_F` over `[0, 1]`.
pub fn time_one_map(f: &Poly, p: &PhasePoint<f64>, steps: usize) -> PhasePoint<f64> {
    rk4_time_one(&Evaluator::new(f), p, steps)
}

fn rk4_time_one(f: &Evaluator<f64>, p: &PhasePoint<f64>, steps: usize) -> PhasePoint<f64> {
    let h = 1.0 / steps.max(1) as f64;
    let mut q = p.clone();
    for _ in 0..steps.max(1) {
        let k1 = f.vector_field(&q);
        let k2 = f.vector_field(&q.axpy(0.5 * h, &k1));
        let k3 = f.vector_field(&q.axpy(0.5 * h, &k2));
        let k4 = f.vector_field(&q.axpy(h, &k3));
        q = q.axpy(h / 6.0, &k1).axpy(h / 3.0, &k2).axpy(h / 3.0, &k3).axpy(h / 6.0, &k4);
    }
    q
}

/// Lie series of the coordinate functions under one generator.
struct CoordinateSeries {
    x: Vec<Poly>,
    y: Vec<Poly>,
    z: Vec<Poly>,
    zb: Vec<Poly>,
}

impl CoordinateSeries {
    /// Series minus the identity: `sum_{1 <= n <= order} ad_F^n(q)/n!`, using
    /// `{x,F} = F_y`, `{y,F} = -F_x`, `{z,F} = i F_zbar`, `{zbar,F} = -i F_z`.
    fn new(f: &Poly, order: usize) -> Self {
        let iu = cx(0.0, 1.0);
        let tail = |first: Poly| -> Poly {
            let mut sum = first.clone();
            let mut term = first;
            for n in 2..=order {
                term = term.bracket(f).scale(cre(1.0 / n as f64));
                sum = sum.add(&term);
            }
            if order == 0 {
                Poly::new(f.n_angles(), f.n_sites())
            } else {
                sum
            }
        };
        let na = f.n_angles();
        let ns = f.n_sites();
        Self {
            x: (0..na).map(|i| tail(f.d_dy(i))).collect(),
            y: (0..na).map(|i| tail(f.d_dx(i).scale(cre(-1.0)))).collect(),
            z: (0..ns as u16).map(|j| tail(f.d_dzb(j).scale(iu))).collect(),
            zb: (0..ns as u16).map(|j| tail(f.d_dz(j).scale(-iu))).collect(),
        }
    }

    fn apply(&self, p: &PhasePoint<f64>) -> PhasePoint<f64> {
        let add = |base: &[C], polys: &[Poly]| base.iter().zip(polys).map(|(b, q)| b + q.eval(p)).collect();
        PhasePoint { x: add(&p.x, &self.x), y: add(&p.y, &self.y), z: add(&p.z, &self.z), zb: add(&p.zb, &self.zb) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homology::Strategy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_c(rng: &mut impl Rng, scale: f64) -> C {
        cx(scale * (rng.random::<f64>() - 0.5), scale * (rng.random::<f64>() - 0.5))
    }

    /// Real polynomial with random terms of the given weights, `|k| <= kmax`.
    fn random_real(rng: &mut impl Rng, na: usize, ns: usize, terms: usize, weights: &[usize], kmax: i32, scale: f64) -> Poly {
        let mut p = Poly::new(na, ns);
        for _ in 0..terms {
            let w = weights[rng.random_range(0..weights.len())];
            let ydeg = rng.random_range(0..=w / 2);
            let zdeg = w - 2 * ydeg;
            let mut y = vec![0u8; na];
            for _ in 0..ydeg {
                y[rng.random_range(0..na)] += 1;
            }
            let nz = rng.random_range(0..=zdeg);
            let z: Vec<u16> = (0..nz).map(|_| rng.random_range(0..ns as u16)).collect();
            let zb: Vec<u16> = (0..zdeg - nz).map(|_| rng.random_range(0..ns as u16)).collect();
            let k: Vec<i32> = (0..na).map(|_| rng.random_range(-kmax..=kmax)).collect();
            p.add_term(Monomial::one(na).with_k(&k).with_y(&y).with_z(&z).with_zb(&zb), rand_c(rng, scale));
        }
        p.realify()
    }

    #[test]
    fn schedule_base_case_and_floors() {
        let p = ScheduleParams::default();
        let s0 = schedule(0, &p);
        assert_eq!(s0.epsilon, p.epsilon0);
        assert_eq!((s0.s, s0.r), (p.s0, p.r0));
        let k0 = 2.0 * p.epsilon0.ln().abs() / (s0.s_bridges[5] - s0.s_bridges[6]);
        assert!((s0.k - k0).abs() < 1e-9 * k0);
        for m in 0..=50 {
            let s = schedule(m, &p);
            assert!(s.s > p.s0 / 2.0 && s.r > p.r0 / 2.0);
        }
        let q = ScheduleParams { epsilon0: 1e-3, rho0: 0.5, ..p };
        let e3 = schedule(3, &q).epsilon;
        assert!((e3 / 1e-3f64.powf(3.375) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cubic = random_real(&mut rng, 2, 4, 20, &[3], 2, 1.0);
        let s = split_perturbation(&cubic);
        assert!(s.low.is_zero());
        assert_eq!(s.high, cubic);
        let quad = random_real(&mut rng, 2, 4, 20, &[2], 2, 1.0).filter(|m| m.ydeg() == 0 && m.z.len() == 1);
        let s = split_perturbation(&quad);
        assert_eq!(s.low, quad);
        assert!(s.high.is_zero());
        let mixed = random_real(&mut rng, 2, 4, 60, &[0, 1, 2, 3, 4], 2, 1.0);
        let s = split_perturbation(&mixed);
        let back = s.low.add(&s.high).with_term(Monomial::one(2), s.average);
        assert!(back.distance(&mixed) == 0.0);
        assert!(s.high.iter().all(|(m, _)| m.weight() >= 3));
        assert!(s.low.iter().all(|(m, _)| LowBlock::of(m).is_some()));
    }

    #[test]
    fn bracket_corrections_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let p = random_real(&mut rng, 2, 4, 80, &[3, 4, 5], 2, 1.0);
            let f = random_real(&mut rng, 2, 4, 30, &[0, 1, 2], 2, 1e-2).filter(|m| m.ydeg() == 0 || m.weight() == 2);
            let a = bracket_corrections(&f, &p);
            let b = bracket_corrections_oracle(&f, &p);
            assert!(a.distance(&b) < 1e-10, "{}", a.distance(&b));
        }
        let p = Poly::new(2, 4);
        let f = random_real(&mut rng, 2, 4, 10, &[0, 1], 2, 1.0);
        assert!(bracket_corrections(&f, &p).is_zero());
    }

    fn toy_state(rng: &mut impl Rng, complex_b: bool, eps: f64) -> KamState {
        let (na, ns) = (2, 5);
        let omega = vec![1.0, 0.5f64.sqrt()];
        let lam: Vec<f64> = (1..=ns).map(|j| 0.37 + 1.0 / (j as f64 + 2.3)).collect();
        let mut b = DMatrix::from_fn(ns, ns, |i, j| if i == j { cre(0.01 * (i as f64 + 1.0)) } else { cre(0.0) });
        if complex_b {
            for i in 0..ns {
                for j in 0..i {
                    let v = rand_c(rng, 0.01);
                    b[(i, j)] = v;
                    b[(j, i)] = v.conj();
                }
            }
        }
        let r = random_real(rng, na, ns, 40, &[0, 1, 2], 3, eps);
        let r = split_perturbation(&r).low;
        let p = random_real(rng, na, ns, 12, &[3, 4], 1, 0.1);
        KamState { step: 0, omega, lam, b, r, p, weights: (1..=ns).map(|j| j as f64).collect(), limit_point: 0.0 }
    }

    #[test]
    fn homological_residual_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for complex_b in [false, true] {
            let state = toy_state(&mut rng, complex_b, 1e-3);
            for strategy in [Strategy::Dense, Strategy::Structured] {
                let opts = KamOptions { solver: SolverOptions { strategy, ..Default::default() }, fourier_cap: 20, ..Default::default() };
                let plan = plan_step(&state, &opts).unwrap();
                assert!(plan.homological_residual < 1e-9, "{complex_b} {strategy:?}: {}", plan.homological_residual);
                let b_new = &state.b + &plan.b_delta;
                assert!(hermitian_defect(&b_new) < 1e-10);
            }
        }
    }

    #[test]
    fn step_contracts_and_stays_real() {
        // the error left after one step is quadratic: shrinking R tenfold shrinks it about a hundredfold
        let opts = KamOptions { fourier_cap: 6, lie_order: 4, caps: Caps { fourier: 8, ..KamOptions::default().caps }, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut base = toy_state(&mut rng, true, 1e-5);
        base.r = base.r.filter(|m| m.kabs() <= 2);
        let mut pairs = Vec::new();
        for scale in [1.0, 0.1] {
            let mut state = base.clone();
            state.r = base.r.scale(cre(scale));
            let out = kam_step(&state, &opts, None, &[0.0; 2], &[0.0; 5]).unwrap();
            let after = ledger_norm(&out.state.r, &out.state.weights, &opts, out.record.schedule.s, out.record.schedule.r).unwrap();
            assert!(after < 0.1 * out.record.ledger_r);
            assert!(out.record.reality_violation < 1e-11);
            pairs.push((out.record.ledger_r, after));
        }
        let order = (pairs[1].1 / pairs[0].1).ln() / (pairs[1].0 / pairs[0].0).ln();
        assert!(order > 1.8, "{pairs:?} order {order}");
    }

    #[test]
    fn zero_perturbation_is_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = toy_state(&mut rng, false, 1e-3);
        state.r = Poly::new(2, 5);
        let out = kam_step(&state, &KamOptions::default(), None, &[0.0; 2], &[0.0; 5]).unwrap();
        assert!(out.generator.total().is_zero());
        assert_eq!(out.state.omega, state.omega);
        assert_eq!(out.state.b, state.b);
        assert!(out.state.r.is_zero());
        assert_eq!(out.record.ledger_r, 0.0);
    }

    #[test]
    fn gauge_constant_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let state = toy_state(&mut rng, false, 1e-3);
        let h = state.hamiltonian();
        let shifted = h.add(&Poly::new(2, 5).with_term(Monomial::one(2), cre(3.5)));
        let a = KamState::from_hamiltonian(&h, state.lam.clone(), state.weights.clone(), 0.0).unwrap();
        let b = KamState::from_hamiltonian(&shifted, state.lam.clone(), state.weights.clone(), 0.0).unwrap();
        let opts = KamOptions::default();
        let fa = plan_step(&a, &opts).unwrap().generator.total();
        let fb = plan_step(&b, &opts).unwrap().generator.total();
        assert_eq!(fa, fb);
    }

    #[test]
    fn frequency_update_from_constant_ry() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut state = toy_state(&mut rng, false, 1e-3);
        state.p = Poly::new(2, 5);
        state.r = Poly::new(2, 5).with_term(Monomial::one(2).with_y(&[1, 0]), cre(2e-3)).with_term(Monomial::one(2).with_y(&[0, 1]), cre(-1e-3));
        let out = kam_step(&state, &KamOptions::default(), None, &[0.0; 2], &[0.0; 5]).unwrap();
        assert!((out.state.omega[0] - state.omega[0] - 2e-3).abs() < 1e-15);
        assert!((out.state.omega[1] - state.omega[1] + 1e-3).abs() < 1e-15);
    }

    #[test]
    fn bracket_examples() {
        let one = Monomial::one(1);
        let y = Poly::new(1, 1).with_term(one.clone().with_y(&[1]), cre(1.0));
        let action = Poly::new(1, 1).with_term(one.clone().with_z(&[0]).with_zb(&[0]), cre(1.0));
        let h0 = normal_part(&[0.7], &[0.3], &DMatrix::zeros(1, 1));
        assert!(poisson_bracket(&action, &h0).is_zero());
        // {y, e^{ix}} = -i e^{ix}: the x-derivative pairs with y
        let e = Poly::new(1, 1).with_term(one.clone().with_k(&[1]), cre(1.0));
        let br = poisson_bracket(&e, &y);
        assert!((br.coeff(&one.clone().with_k(&[1])) - cx(0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn linear_lie_transform_matches_exponential() {
        // H0 = lam |z|^2 and F = a z^2 + conj: Lie series vs the exact linear conjugation
        let (lam, a) = (0.8, cx(0.02, 0.01));
        let one = Monomial::one(1);
        let h0 = Poly::new(1, 1).with_term(one.clone().with_z(&[0]).with_zb(&[0]), cre(lam));
        let f = Poly::new(1, 1).with_term(one.clone().with_z(&[0, 0]), a).with_term(one.clone().with_zb(&[0, 0]), a.conj());
        let opts = LieOptions { order: 30, ..Default::default() };
        let (h, _) = lie_transform(&h0, &f, &opts).unwrap();
        // flow of F: d/dt (z, zb) = (2i conj(a) zb, -2i a z)
        let gen = DMatrix::from_row_slice(2, 2, &[cre(0.0), cx(0.0, 2.0) * a.conj(), cx(0.0, -2.0) * a, cre(0.0)]);
        let e = gen.exp();
        // H0(phi(z, zb)) = lam (e00 z + e01 zb)(e10 z + e11 zb)
        let zz = cre(lam) * e[(0, 0)] * e[(1, 0)];
        let zzb = cre(lam) * (e[(0, 0)] * e[(1, 1)] + e[(0, 1)] * e[(1, 0)]);
        let zbzb = cre(lam) * e[(0, 1)] * e[(1, 1)];
        assert!((h.coeff(&one.clone().with_z(&[0, 0])) - zz).norm() < 1e-9);
        assert!((h.coeff(&one.clone().with_z(&[0]).with_zb(&[0])) - zzb).norm() < 1e-9);
        assert!((h.coeff(&one.clone().with_zb(&[0, 0])) - zbzb).norm() < 1e-9);
    }

    #[test]
    fn flow_and_series_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_real(&mut rng, 2, 3, 20, &[0, 1, 2, 3], 2, 1e-3);
        let x = [0.3, 1.1];
        let z = [cx(0.02, 0.01), cx(-0.01, 0.0), cx(0.0, 0.015)];
        let p = PhasePoint::real(&x, &[1e-3, 2e-3], &z);
        let flow = ComposedTransform { generators: vec![f.clone()], method: LieMapMethod::Flow { steps: 40 } }.apply(&p);
        let series = ComposedTransform { generators: vec![f], method: LieMapMethod::Series { order: 5 } }.apply(&p);
        let d: f64 = flow.x.iter().chain(&flow.y).chain(&flow.z).zip(series.x.iter().chain(&series.y).chain(&series.z)).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(d < 1e-12, "{d}");
    }
}
