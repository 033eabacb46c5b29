//! BBM and gPC spectral Hamiltonians, their frequency data and the standing
//! assumptions checked on them.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::lattice::{Lattice, SiteLabel};
use crate::norms::{op_norm, Majorant};
use crate::poly::{HamiltonianPoly, Monomial, PhasePoint};
use crate::scalar::{cre, Cx, Real};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("the zero mode is excluded from the phase space")]
    ZeroMode,
    #[error("tau must be positive, got {0}")]
    Tau(f64),
    #[error("tau = {tau} does not match 2pi/T for T = {period}")]
    Period { tau: f64, period: f64 },
    #[error("lattice radius {0} too small")]
    Radius(usize),
    #[error("tangent site {0:?} is not a retained site")]
    UnknownSite(Vec<i32>),
    #[error("tangent site {0:?} listed twice")]
    DuplicateSite(Vec<i32>),
    #[error("tangent site {site:?} has |j| = {abs} <= L = {l}")]
    BelowThreshold { site: Vec<i32>, abs: f64, l: f64 },
    #[error("expected {expected} tangent sites, got {got}")]
    TangentCount { expected: usize, got: usize },
    #[error("tau component {0} outside (1, 2)")]
    TauRange(f64),
    #[error("parameter box must have positive volume")]
    EmptyBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Equation {
    Bbm,
    Gpc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, ModelError> {
        if lower.len() != upper.len() || lower.is_empty() || lower.iter().zip(&upper).any(|(a, b)| !(b > a)) {
            return Err(ModelError::EmptyBox);
        }
        Ok(Self { lower, upper })
    }

    /// Amplitude box `[sqrt(eps0), 2 sqrt(eps0)]^n`.
    pub fn amplitude(n: usize, eps0: f64) -> Self {
        let a = eps0.sqrt();
        Self { lower: vec![a; n], upper: vec![2.0 * a; n] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn diameter(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt()
    }

    pub fn corners(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| (0..n).map(|i| if mask >> i & 1 == 1 { self.upper[i] } else { self.lower[i] }).collect())
            .collect()
    }
}

/// Spectral data of a truncated model before the normal-form reduction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyModel {
    pub equation: Equation,
    pub dim_d: usize,
    pub tau: Vec<f64>,
    pub period: Vec<f64>,
    pub limit_point: f64,
    pub kappa: f64,
    pub lattice_radius: usize,
    pub lattice: Lattice,
    /// Indices into `lattice` of the excited sites `J`, in the order given.
    pub tangent_sites: Vec<usize>,
    /// Linear frequency of each lattice site.
    pub frequencies: Vec<f64>,
    pub param_box: ParamBox,
}

impl FrequencyModel {
    pub fn n_tangent(&self) -> usize {
        self.tangent_sites.len()
    }

    pub fn normal_sites(&self) -> Vec<usize> {
        (0..self.lattice.len()).filter(|i| !self.tangent_sites.contains(i)).collect()
    }

    pub fn tangent_frequencies(&self) -> Vec<f64> {
        self.tangent_sites.iter().map(|&i| self.frequencies[i]).collect()
    }

    pub fn normal_frequencies(&self) -> Vec<f64> {
        self.normal_sites().iter().map(|&i| self.frequencies[i]).collect()
    }

    /// Product of the periods (the domain volume).
    pub fn volume(&self) -> f64 {
        self.period.iter().product()
    }

    /// Power-law fit of `|lambda_j - varpi|` against `|j|` over the normal sites.
    pub fn decay_fit(&self) -> DecayFit {
        let pts: Vec<(f64, f64)> = self
            .normal_sites()
            .iter()
            .map(|&i| (self.lattice.weight(i), (self.frequencies[i] - self.limit_point).abs()))
            .collect();
        fit_power_decay(&pts)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = Vec::new();
        for &t in &self.tangent_sites {
            if t >= self.lattice.len() {
                return Err(ModelError::UnknownSite(vec![]));
            }
            if seen.contains(&t) {
                return Err(ModelError::DuplicateSite(self.lattice.sites[t].to_vec()));
            }
            seen.push(t);
        }
        ParamBox::new(self.param_box.lower.clone(), self.param_box.upper.clone())?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub kappa: f64,
    /// `min |lambda_j - varpi| |j|^kappa` over the fitted sites.
    pub c_lower: f64,
    pub c_upper: f64,
}

/// Least-squares slope of `log v` against `log |j|`, reported as `kappa = -slope`,
/// with the envelope constants at that exponent.
pub fn fit_power_decay(points: &[(f64, f64)]) -> DecayFit {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(_, v)| *v > 0.0).map(|(j, v)| (j.ln(), v.ln())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return DecayFit { kappa: f64::NAN, c_lower: 0.0, c_upper: 0.0 };
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let kappa = -sxy / sxx;
    let scaled = points.iter().filter(|(_, v)| *v > 0.0).map(|(j, v)| v * j.powf(kappa));
    let (lo, hi) = scaled.fold((f64::INFINITY, 0.0f64), |(lo, hi), c| (lo.min(c), hi.max(c)));
    DecayFit { kappa, c_lower: lo, c_upper: hi }
}

fn check_tau(tau: f64) -> Result<(), ModelError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ModelError::Tau(tau));
    }
    Ok(())
}

/// `tau j / (1 + tau^2 j^2)`.
pub fn bbm_normal_frequency(j: i64, tau: f64) -> Result<f64, ModelError> {
    if j == 0 {
        return Err(ModelError::ZeroMode);
    }
    check_tau(tau)?;
    let j = j as f64;
    Ok(tau * j / (1.0 + tau * tau * j * j))
}

/// Fourier weight `sqrt(tau |j| / (1 + tau^2 j^2))` with `tau = 2 pi / T`.
pub fn bbm_weight(j: i64, tau: f64, period: f64) -> Result<f64, ModelError> {
    if ((2.0 * PI / period) - tau).abs() > 1e-12 * tau.max(1.0) {
        return Err(ModelError::Period { tau, period });
    }
    Ok(bbm_normal_frequency(j.abs(), tau)?.sqrt())
}

pub fn period_of(tau: f64) -> f64 {
    2.0 * PI / tau
}

/// Cubic BBM coefficients over ordered zero-sum triples of nonzero integers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CubicCoeffs {
    pub entries: BTreeMap<(i32, i32, i32), f64>,
}

impl CubicCoeffs {
    pub fn get(&self, j: i32, k: i32, l: i32) -> Option<f64> {
        self.entries.get(&(j, k, l)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn bbm_cubic_table(radius: usize, tau: f64, period: f64) -> Result<CubicCoeffs, ModelError> {
    if radius < 2 {
        return Err(ModelError::Radius(radius));
    }
    let r = radius as i32;
    let norm = 6.0 * period.sqrt();
    let mut entries = BTreeMap::new();
    for j in -r..=r {
        for k in -r..=r {
            let l = -j - k;
            if j == 0 || k == 0 || l == 0 || l.abs() > r {
                continue;
            }
            let d = bbm_weight(j as i64, tau, period)? * bbm_weight(k as i64, tau, period)? * bbm_weight(l as i64, tau, period)?;
            entries.insert((j, k, l), d / norm);
        }
    }
    Ok(CubicCoeffs { entries })
}

/// Lattice index of BBM site `j != 0`: `|j| - 1`, with `j < 0` living on `zbar`.
pub fn bbm_slot(j: i32) -> (u16, bool) {
    ((j.unsigned_abs() - 1) as u16, j > 0)
}

/// Monomial `prod z_{j_i}` in paired coordinates (`z_{-j} = zbar_j`).
pub fn bbm_monomial(n_angles: usize, js: &[i32]) -> Monomial {
    let mut z: SmallVec<[u16; 6]> = SmallVec::new();
    let mut zb: SmallVec<[u16; 6]> = SmallVec::new();
    for &j in js {
        let (s, pos) = bbm_slot(j);
        if pos {
            z.push(s)
        } else {
            zb.push(s)
        }
    }
    Monomial::one(n_angles).with_z(&z).with_zb(&zb)
}

pub fn bbm_model(radius: usize, tau: f64, tangent: &[i32], eps0: f64) -> Result<FrequencyModel, ModelError> {
    check_tau(tau)?;
    if radius < 2 {
        return Err(ModelError::Radius(radius));
    }
    let lattice = Lattice::line(radius);
    let tangent_sites = resolve_tangent(&lattice, tangent.iter().map(|&j| SmallVec::from_slice(&[j])))?;
    let frequencies = (1..=radius as i64).map(|j| bbm_normal_frequency(j, tau)).collect::<Result<_, _>>()?;
    let model = FrequencyModel {
        equation: Equation::Bbm,
        dim_d: 1,
        tau: vec![tau],
        period: vec![period_of(tau)],
        limit_point: 0.0,
        kappa: 1.0,
        lattice_radius: radius,
        lattice,
        tangent_sites,
        frequencies,
        param_box: ParamBox::amplitude(tangent.len(), eps0),
    };
    model.validate()?;
    Ok(model)
}

fn resolve_tangent(lattice: &Lattice, labels: impl Iterator<Item = SiteLabel>) -> Result<Vec<usize>, ModelError> {
    let mut out = Vec::new();
    for l in labels {
        let i = lattice.index_of(&l).ok_or_else(|| ModelError::UnknownSite(l.to_vec()))?;
        if out.contains(&i) {
            return Err(ModelError::DuplicateSite(l.to_vec()));
        }
        out.push(i);
    }
    Ok(out)
}

/// `H = sum lambda_j z_j zbar_j + sum_{j+k+l=0} G_jkl z_j z_k z_l` over the paired lattice.
pub fn bbm_hamiltonian<T: Real>(model: &FrequencyModel, cubic: &CubicCoeffs) -> HamiltonianPoly<T> {
    let n = model.lattice.len();
    let mut h = quadratic_part(model);
    for (&(j, k, l), &g) in &cubic.entries {
        let m = bbm_monomial(0, &[j, k, l]);
        if m.z.iter().chain(&m.zb).all(|&s| (s as usize) < n) {
            h.add_term(m, cre(T::lit(g)));
        }
    }
    h
}

fn quadratic_part<T: Real>(model: &FrequencyModel) -> HamiltonianPoly<T> {
    let n = model.lattice.len();
    let mut h = HamiltonianPoly::new(0, n);
    for (i, &w) in model.frequencies.iter().enumerate() {
        h.add_term(Monomial::one(0).with_z(&[i as u16]).with_zb(&[i as u16]), cre(T::lit(w)));
    }
    h
}

/// Quartic gPC coefficients `C_mnlk` keyed by sorted lattice-index quadruples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuarticCoeffs {
    pub entries: BTreeMap<[u32; 4], f64>,
}

impl QuarticCoeffs {
    pub fn get(&self, idx: [u32; 4]) -> f64 {
        let mut k = idx;
        k.sort_unstable();
        self.entries.get(&k).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `||k||^2 = sum tau_i^2 k_i^2`.
pub fn gpc_norm_sq(k: &[i32], tau: &[f64]) -> f64 {
    k.iter().zip(tau).map(|(&c, t)| (t * c as f64).powi(2)).sum()
}

/// `lambda_k = ||k||^2 / (1 + ||k||^2)`; the linear frequency is its square root.
pub fn gpc_lambda(k: &[i32], tau: &[f64]) -> f64 {
    let n = gpc_norm_sq(k, tau);
    n / (1.0 + n)
}

/// `int_Omega prod_a sin(k^a_i tau_i x_i) dx` in closed form: per axis
/// `(T/16) sum_{s in {+-1}^4} (prod s) [sum s_a n_a = 0]`.
pub fn sine_product_integral(labels: [&[i32]; 4], periods: &[f64]) -> f64 {
    let mut total = 1.0;
    for (axis, &t) in periods.iter().enumerate() {
        let n: [i32; 4] = [labels[0][axis], labels[1][axis], labels[2][axis], labels[3][axis]];
        let mut acc = 0i32;
        for mask in 0..16u32 {
            let (mut sum, mut sign) = (0i32, 1i32);
            for (a, &na) in n.iter().enumerate() {
                if mask >> a & 1 == 1 {
                    sum -= na;
                    sign = -sign;
                } else {
                    sum += na;
                }
            }
            if sum == 0 {
                acc += sign;
            }
        }
        if acc == 0 {
            return 0.0;
        }
        total *= t * acc as f64 / 16.0;
    }
    total
}

/// Whether some sign pattern of `m +- n +- l +- k` vanishes componentwise.
pub fn gpc_selection(labels: [&[i32]; 4]) -> bool {
    (0..8u32).any(|mask| {
        (0..labels[0].len()).all(|axis| {
            let mut s = labels[0][axis];
            for a in 1..4 {
                s += if mask >> (a - 1) & 1 == 1 { -labels[a][axis] } else { labels[a][axis] };
            }
            s == 0
        })
    })
}

pub fn gpc_model(
    radius: usize,
    tau_vec: &[f64],
    n: usize,
    tangent: &[SiteLabel],
    l_threshold: f64,
    eps0: f64,
) -> Result<(FrequencyModel, QuarticCoeffs), ModelError> {
    for &t in tau_vec {
        if !(t > 1.0 && t < 2.0) {
            return Err(ModelError::TauRange(t));
        }
    }
    if tangent.len() != n {
        return Err(ModelError::TangentCount { expected: n, got: tangent.len() });
    }
    if radius < 1 {
        return Err(ModelError::Radius(radius));
    }
    let d = tau_vec.len();
    let lattice = Lattice::orthant(d, radius);
    for t in tangent {
        let abs = crate::lattice::site_abs(t);
        if abs <= l_threshold {
            return Err(ModelError::BelowThreshold { site: t.to_vec(), abs, l: l_threshold });
        }
    }
    let tangent_sites = resolve_tangent(&lattice, tangent.iter().cloned())?;
    let lam: Vec<f64> = lattice.sites.iter().map(|s| gpc_lambda(s, tau_vec)).collect();
    let period: Vec<f64> = tau_vec.iter().map(|&t| period_of(t)).collect();
    let model = FrequencyModel {
        equation: Equation::Gpc,
        dim_d: d,
        tau: tau_vec.to_vec(),
        period: period.clone(),
        limit_point: 1.0,
        kappa: 2.0,
        lattice_radius: radius,
        frequencies: lam.iter().map(|l| l.sqrt()).collect(),
        lattice,
        tangent_sites,
        param_box: ParamBox::amplitude(n, eps0),
    };
    model.validate()?;
    let quartic = gpc_quartic_table(&model.lattice, &lam, &period);
    Ok((model, quartic))
}

/// `C_mnlk = (sum lambda) / (4 (prod lambda)^{1/4}) int phi_m phi_n phi_l phi_k`.
pub fn gpc_quartic_table(lattice: &Lattice, lam: &[f64], period: &[f64]) -> QuarticCoeffs {
    let n = lattice.len() as u32;
    let mut entries = BTreeMap::new();
    for a in 0..n {
        for b in a..n {
            for c in b..n {
                for e in c..n {
                    let idx = [a, b, c, e];
                    let labels = idx.map(|i| lattice.sites[i as usize].as_slice());
                    let integral = sine_product_integral(labels, period);
                    if integral == 0.0 {
                        continue;
                    }
                    let ls = idx.map(|i| lam[i as usize]);
                    let sum: f64 = ls.iter().sum();
                    let prod: f64 = ls.iter().product();
                    entries.insert(idx, sum / (4.0 * prod.powf(0.25)) * integral);
                }
            }
        }
    }
    QuarticCoeffs { entries }
}

/// Number of distinct orderings of a sorted quadruple.
pub fn orderings(idx: &[u32; 4]) -> f64 {
    let mut mult = 1.0;
    let mut run = 1;
    for i in 1..4 {
        if idx[i] == idx[i - 1] {
            run += 1;
            mult *= run as f64;
        } else {
            run = 1;
        }
    }
    24.0 / mult
}

/// `H = sum sqrt(lambda_k) z_k zbar_k + sum_{ordered} (1/4) C_mnlk prod (z + zbar)`.
pub fn gpc_hamiltonian<T: Real>(model: &FrequencyModel, quartic: &QuarticCoeffs) -> HamiltonianPoly<T> {
    let mut h = quadratic_part(model);
    for (idx, &c) in &quartic.entries {
        let coeff = 0.25 * c * orderings(idx);
        for mask in 0..16u32 {
            let mut z = SmallVec::<[u16; 6]>::new();
            let mut zb = SmallVec::<[u16; 6]>::new();
            for (a, &i) in idx.iter().enumerate() {
                if mask >> a & 1 == 1 {
                    zb.push(i as u16)
                } else {
                    z.push(i as u16)
                }
            }
            h.add_term(Monomial::one(0).with_z(&z).with_zb(&zb), cre(T::lit(coeff)));
        }
    }
    h
}

/// `X_H = (H_y, -H_x, i H_zbar, -i H_z)` at a point.
pub fn hamiltonian_vector_field<T: Real>(h: &HamiltonianPoly<T>, point: &PhasePoint<T>) -> PhasePoint<T> {
    h.vector_field(point)
}

/// Tangent and normal frequencies as affine functions of the amplitude parameter:
/// `omega(zeta) = tangent_base + twist zeta`, `Omega(zeta) = normal_base + coupling zeta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineFrequencies {
    pub tangent_base: Vec<f64>,
    pub twist: DMatrix<f64>,
    pub normal_base: Vec<f64>,
    pub coupling: DMatrix<f64>,
    /// `|j|` of each normal site, in the order of `normal_base`.
    pub normal_weights: Vec<f64>,
    pub limit_point: f64,
    pub kappa: f64,
    pub param_box: ParamBox,
}

impl AffineFrequencies {
    pub fn n(&self) -> usize {
        self.tangent_base.len()
    }

    pub fn omega(&self, zeta: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(&self.tangent_base) + &self.twist * DVector::from_column_slice(zeta);
        v.as_slice().to_vec()
    }

    pub fn normal(&self, zeta: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(&self.normal_base) + &self.coupling * DVector::from_column_slice(zeta);
        v.as_slice().to_vec()
    }

    /// Parameter `zeta` whose tangent frequency is `omega` (exact linear solve).
    pub fn zeta_of(&self, omega: &[f64]) -> Option<Vec<f64>> {
        let rhs = DVector::from_column_slice(omega) - DVector::from_column_slice(&self.tangent_base);
        self.twist.clone().lu().solve(&rhs).map(|v| v.as_slice().to_vec())
    }

    /// Central-difference Jacobian of `omega` at `zeta`.
    pub fn jacobian(&self, zeta: &[f64], h: f64) -> DMatrix<f64> {
        let n = self.n();
        let mut jac = DMatrix::zeros(n, n);
        for c in 0..n {
            let mut zp = zeta.to_vec();
            let mut zm = zeta.to_vec();
            zp[c] += h;
            zm[c] -= h;
            let (wp, wm) = (self.omega(&zp), self.omega(&zm));
            for r in 0..n {
                jac[(r, c)] = (wp[r] - wm[r]) / (2.0 * h);
            }
        }
        jac
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub min_abs_det: f64,
    pub max_jacobian_norm: f64,
    pub nondegenerate: bool,
    pub decay: DecayFit,
    pub decay_ok: bool,
    pub directional_margin: f64,
    pub directional_ok: bool,
    pub h0_reality_violation: f64,
    pub r0_reality_violation: f64,
    pub reality_ok: bool,
    /// `|| |B0| ||_{h_p -> h_q}`.
    pub operator_bound: f64,
    pub passed: bool,
}

/// Runtime predicates for nondegeneracy, decay, directional derivatives, reality
/// and the size of `B0`. Failures are reported, never thrown.
pub fn check_assumptions(
    freq: &AffineFrequencies,
    h0: &HamiltonianPoly<f64>,
    r0: &HamiltonianPoly<f64>,
    b0: &DMatrix<Cx<f64>>,
    p: f64,
    k_max: i64,
) -> AssumptionReport {
    let bx = &freq.param_box;
    let step = 1e-5 * bx.diameter().max(1e-300);
    let mut min_det = f64::INFINITY;
    let mut max_jac: f64 = 0.0;
    let grid = grid_points(bx, 5);
    for z in &grid {
        let j = freq.jacobian(z, step);
        min_det = min_det.min(j.determinant().abs());
        max_jac = max_jac.max(j.norm());
    }
    let scale = max_jac.powi(freq.n() as i32);
    let nondegenerate = min_det > 1e-10 * scale.max(1e-300);

    let center = bx.center();
    let pts: Vec<(f64, f64)> = freq
        .normal(&center)
        .iter()
        .zip(&freq.normal_weights)
        .map(|(l, w)| (*w, (l - freq.limit_point).abs()))
        .collect();
    let decay = fit_power_decay(&pts);
    let decay_ok = decay.c_lower > 0.0 && (decay.kappa - freq.kappa).abs() <= 0.25 * freq.kappa;

    let directional_margin = bx
        .corners()
        .iter()
        .map(|z| directional_margin(freq, z, k_max, step))
        .fold(f64::INFINITY, f64::min);

    let h0v = h0.reality_violation();
    let r0v = r0.reality_violation();
    let reality_ok = h0v <= 1e-12 && r0v <= 1e-12;
    let weights = &freq.normal_weights;
    let operator_bound = if b0.nrows() == weights.len() { op_norm(&b0.majorant(), weights, weights, p, p + freq.kappa) } else { f64::NAN };
    let directional_ok = directional_margin > 0.0;
    AssumptionReport {
        min_abs_det: min_det,
        max_jacobian_norm: max_jac,
        nondegenerate,
        decay,
        decay_ok,
        directional_margin,
        directional_ok,
        h0_reality_violation: h0v,
        r0_reality_violation: r0v,
        reality_ok,
        operator_bound,
        passed: nondegenerate && decay_ok && directional_ok && reality_ok && operator_bound.is_finite(),
    }
}

/// Minimum over `0 < |k| <= k_max` of the derivative of `(k,omega) +- Omega_i` and
/// `(k,omega) +- (Omega_i +- Omega_j)` along `omega`-direction `k/|k|`, by central
/// differences in `zeta`.
fn directional_margin(freq: &AffineFrequencies, zeta: &[f64], k_max: i64, h: f64) -> f64 {
    let n = freq.n();
    let Some(tinv) = freq.twist.clone().try_inverse() else {
        return f64::NEG_INFINITY;
    };
    let mut best = f64::INFINITY;
    for k in crate::melnikov::k_ball(n, k_max) {
        let kn = k.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt();
        let u = DVector::from_iterator(n, k.iter().map(|&c| c as f64 / kn));
        let dz = &tinv * &u;
        let zp: Vec<f64> = zeta.iter().zip(dz.iter()).map(|(a, b)| a + h * b).collect();
        let zm: Vec<f64> = zeta.iter().zip(dz.iter()).map(|(a, b)| a - h * b).collect();
        let dl: Vec<f64> = freq.normal(&zp).iter().zip(freq.normal(&zm)).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let dmax = dl.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        best = best.min(kn - dmax).min(kn - 2.0 * dmax);
    }
    best
}

/// Tensor grid with `per_dim` points per axis (endpoints included).
pub fn grid_points(bx: &ParamBox, per_dim: usize) -> Vec<Vec<f64>> {
    let n = bx.dim();
    let per = per_dim.max(2);
    let total = per.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            (0..n)
                .map(|i| {
                    let t = (idx % per) as f64 / (per - 1) as f64;
                    idx /= per;
                    bx.lower[i] + t * (bx.upper[i] - bx.lower[i])
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbm_frequency_values() {
        assert_eq!(bbm_normal_frequency(1, 1.0).unwrap(), 0.5);
        assert_eq!(bbm_normal_frequency(-1, 1.0).unwrap(), -0.5);
        assert_eq!(bbm_normal_frequency(0, 1.0), Err(ModelError::ZeroMode));
    }

    #[test]
    fn bbm_weight_values() {
        let t = period_of(1.0);
        assert!((bbm_weight(1, 1.0, t).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((bbm_weight(2, 1.0, t).unwrap() - 0.4f64.sqrt()).abs() < 1e-15);
        assert!(bbm_weight(2, 1.0, 3.0).is_err());
    }

    #[test]
    fn cubic_entry() {
        let t = 2.0 * PI;
        let c = bbm_cubic_table(3, 1.0, t).unwrap();
        let expect = 0.5 * 0.4f64.sqrt() / (6.0 * t.sqrt());
        assert!((c.get(1, 1, -2).unwrap() - expect).abs() < 1e-15);
        assert!(c.get(1, 1, 1).is_none());
    }

    #[test]
    fn sine_integrals() {
        let t = [3.0];
        assert!((sine_product_integral([&[2], &[2], &[2], &[2]], &t) - 3.0 * 3.0 / 8.0).abs() < 1e-15);
        assert!((sine_product_integral([&[1], &[1], &[2], &[2]], &t) - 3.0 / 4.0).abs() < 1e-15);
        assert_eq!(sine_product_integral([&[1], &[1], &[1], &[4]], &t), 0.0);
    }

    #[test]
    fn orderings_count() {
        assert_eq!(orderings(&[0, 1, 2, 3]), 24.0);
        assert_eq!(orderings(&[0, 0, 2, 3]), 12.0);
        assert_eq!(orderings(&[0, 0, 2, 2]), 6.0);
        assert_eq!(orderings(&[1, 1, 1, 1]), 1.0);
        assert_eq!(orderings(&[1, 1, 1, 2]), 4.0);
    }

    #[test]
    fn gpc_unit_site() {
        let l = gpc_lambda(&[1, 1], &[1.0, 1.0]);
        assert!((l.sqrt() - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
