//! Third- and fourth-order Birkhoff normal forms for the BBM and gPC lattices and
//! the action-angle reduction feeding the KAM driver.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::model::{bbm_normal_frequency, AffineFrequencies, CubicCoeffs, Equation, FrequencyModel, ModelError, ParamBox, QuarticCoeffs};
use crate::poly::{Caps, HamiltonianPoly, LieOptions, Monomial, PolyError};
use crate::scalar::{cre, cx, Cx, Real};

#[derive(Debug, Error)]
pub enum BirkhoffError {
    #[error("selection rule violated: {0:?} does not sum to zero or contains 0")]
    Selection(Vec<i32>),
    #[error("{} divisor(s) below floor {floor:e}; smallest {:.3e} on {:?}", .witnesses.len(), .witnesses[0].1, .witnesses[0].0)]
    SmallDivisor { floor: f64, witnesses: Vec<(String, f64)> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("amplitude vector has length {got}, expected {expected}")]
    Amplitude { expected: usize, got: usize },
    #[error("twist matrix is singular")]
    SingularTwist,
}

/// `lambda_j + lambda_k + lambda_l` for a zero-sum triple of nonzero integers.
pub fn cubic_divisor(j: i32, k: i32, l: i32, tau: f64) -> Result<f64, BirkhoffError> {
    if j + k + l != 0 || j == 0 || k == 0 || l == 0 {
        return Err(BirkhoffError::Selection(vec![j, k, l]));
    }
    Ok(bbm_normal_frequency(j as i64, tau)? + bbm_normal_frequency(k as i64, tau)? + bbm_normal_frequency(l as i64, tau)?)
}

/// Product form `-sgn(jkl) delta_j^2 delta_k^2 delta_l^2 (3 + tau^2 (k^2 + kl + l^2))`.
pub fn cubic_divisor_product(j: i32, k: i32, l: i32, tau: f64) -> Result<f64, BirkhoffError> {
    if j + k + l != 0 || j == 0 || k == 0 || l == 0 {
        return Err(BirkhoffError::Selection(vec![j, k, l]));
    }
    let d2 = |m: i32| bbm_normal_frequency(m.abs() as i64, tau);
    let sign = -((j as i64 * k as i64 * l as i64).signum() as f64);
    let (kf, lf) = (k as f64, l as f64);
    Ok(sign * d2(j)? * d2(k)? * d2(l)? * (3.0 + tau * tau * (kf * kf + kf * lf + lf * lf)))
}

/// `Lambda(m) = sum_s lambda_s (#z_s - #zbar_s)`: `{H0, m} = -i Lambda(m) m` for
/// `H0 = sum lambda_s z_s zbar_s`.
pub fn monomial_divisor(m: &Monomial, freqs: &[f64]) -> f64 {
    m.z.iter().map(|&s| freqs[s as usize]).sum::<f64>() - m.zb.iter().map(|&s| freqs[s as usize]).sum::<f64>()
}

/// Whether `m` has equal `z` and `zbar` multisets (divisor identically zero).
pub fn is_resonant(m: &Monomial) -> bool {
    m.z == m.zb
}

/// `F` with `R + {H0, F} = 0`: each coefficient is `R_m / (i Lambda(m))`.
pub fn third_order_generator<T: Real>(r: &HamiltonianPoly<T>, freqs: &[f64], floor: f64) -> Result<HamiltonianPoly<T>, BirkhoffError> {
    solve_diagonal_homology(r, freqs, floor)
}

fn solve_diagonal_homology<T: Real>(r: &HamiltonianPoly<T>, freqs: &[f64], floor: f64) -> Result<HamiltonianPoly<T>, BirkhoffError> {
    let mut f = HamiltonianPoly::new(r.n_angles(), r.n_sites());
    let mut bad = Vec::new();
    for (m, c) in r.sorted_terms() {
        let d = monomial_divisor(m, freqs);
        if d.abs() < floor {
            bad.push((m.to_string(), d.abs()));
            continue;
        }
        f.add_term(m.clone(), c / cx(T::zero(), T::lit(d)));
    }
    if !bad.is_empty() {
        bad.sort_by(|a, b| a.1.total_cmp(&b.1));
        return Err(BirkhoffError::SmallDivisor { floor, witnesses: bad });
    }
    Ok(f)
}

/// `H0 = sum freqs_s z_s zbar_s`.
pub fn diagonal_quadratic<T: Real>(n_angles: usize, freqs: &[f64]) -> HamiltonianPoly<T> {
    let mut h = HamiltonianPoly::new(n_angles, freqs.len());
    for (i, &w) in freqs.iter().enumerate() {
        h.add_term(Monomial::one(n_angles).with_z(&[i as u16]).with_zb(&[i as u16]), cre(T::lit(w)));
    }
    h
}

/// Resonant BBM quartic coefficient: `1/(12 T (tau^2 k^2 + 1))` on the diagonal and
/// `-(1/T) tau^2 k l / ((tau^2 (k^2+kl+l^2) + 3)(tau^2 (k^2-kl+l^2) + 3))` otherwise.
pub fn resonant_quartic_bbm(k: i64, l: i64, tau: f64, period: f64) -> f64 {
    let (kf, lf) = (k as f64, l as f64);
    let t2 = tau * tau;
    if k == l {
        1.0 / (12.0 * period * (t2 * kf * kf + 1.0))
    } else {
        -(t2 * kf * lf) / (period * ((t2 * (kf * kf + kf * lf + lf * lf) + 3.0) * (t2 * (kf * kf - kf * lf + lf * lf) + 3.0)))
    }
}

/// Parts of a homogeneous quartic after the fourth-order step.
#[derive(Clone, Debug)]
pub struct QuarticSplit<T: Real> {
    /// Resonant terms `|z_k|^2 |z_l|^2` touching the tangent sites.
    pub resonant: HamiltonianPoly<T>,
    pub generator: HamiltonianPoly<T>,
    /// Terms free of tangent sites.
    pub tail: HamiltonianPoly<T>,
    /// Non-resonant terms touching tangent sites whose divisor is below the floor.
    pub kept: HamiltonianPoly<T>,
    pub min_divisor: f64,
}

/// Route each term of `r4`: resonant and touching `tangent` -> normal form; free of
/// `tangent` -> tail; otherwise eliminated by a generator with divisor `Lambda(m)`.
pub fn fourth_order_reduction<T: Real>(r4: &HamiltonianPoly<T>, freqs: &[f64], tangent: &[usize], floor: f64) -> QuarticSplit<T> {
    let touches = |m: &Monomial| m.z.iter().chain(&m.zb).any(|&s| tangent.contains(&(s as usize)));
    let (na, ns) = (r4.n_angles(), r4.n_sites());
    let mut out = QuarticSplit {
        resonant: HamiltonianPoly::new(na, ns),
        generator: HamiltonianPoly::new(na, ns),
        tail: HamiltonianPoly::new(na, ns),
        kept: HamiltonianPoly::new(na, ns),
        min_divisor: f64::INFINITY,
    };
    for (m, c) in r4.sorted_terms() {
        if !touches(m) {
            out.tail.add_term(m.clone(), c);
        } else if is_resonant(m) {
            out.resonant.add_term(m.clone(), c);
        } else {
            let d = monomial_divisor(m, freqs);
            out.min_divisor = out.min_divisor.min(d.abs());
            if d.abs() < floor {
                out.kept.add_term(m.clone(), c);
            } else {
                out.generator.add_term(m.clone(), c / cx(T::zero(), T::lit(d)));
            }
        }
    }
    out
}

/// `(a, b) = ((3/8)^d, (5/8)^d - (3/8)^d)`.
pub fn gpc_constants(d: u32) -> (f64, f64) {
    let a = 0.375f64.powi(d as i32);
    (a, 0.625f64.powi(d as i32) - a)
}

/// Twist matrix with `a` on the diagonal and `b (sqrt(l_k/l_l) + sqrt(l_l/l_k)) / 2` off it.
pub fn gpc_model_twist(d: u32, lambdas: &[f64]) -> DMatrix<f64> {
    let (a, b) = gpc_constants(d);
    let n = lambdas.len();
    DMatrix::from_fn(n, n, |i, j| if i == j { a } else { 0.5 * b * ((lambdas[i] / lambdas[j]).sqrt() + (lambdas[j] / lambdas[i]).sqrt()) })
}

/// `(a - b)^{N-1} (a + 4 b)`.
pub fn gpc_det_formula(d: u32, n: usize) -> f64 {
    let (a, b) = gpc_constants(d);
    (a - b).powi(n as i32 - 1) * (a + 4.0 * b)
}

/// Generalized binomial coefficient `C(p, n)`.
fn binom(p: f64, n: u32) -> f64 {
    (0..n).fold(1.0, |acc, i| acc * (p - i as f64) / (i as f64 + 1.0))
}

/// Result of substituting `z_{j_k} = sqrt(zeta_k + y_k) e^{i x_k}` for the tangent sites.
#[derive(Clone, Debug)]
pub struct ActionAngle<T: Real> {
    pub hamiltonian: HamiltonianPoly<T>,
    /// Lattice indices of the remaining (normal) sites, in their new order.
    pub normal_sites: Vec<usize>,
    /// Sum of coefficient moduli of the first omitted order in `y`.
    pub sqrt_remainder: f64,
    pub in_annulus: bool,
}

/// Substitute action-angle variables on `tangent`, expanding `(zeta + y)^{p}` in `y`
/// up to degree `ydeg`. Constants are dropped.
pub fn action_angle_reduce<T: Real>(h: &HamiltonianPoly<T>, tangent: &[usize], zeta: &[f64], ydeg: u32, eps0: Option<f64>) -> Result<ActionAngle<T>, BirkhoffError> {
    let n = tangent.len();
    if zeta.len() != n {
        return Err(BirkhoffError::Amplitude { expected: n, got: zeta.len() });
    }
    let normal_sites: Vec<usize> = (0..h.n_sites()).filter(|s| !tangent.contains(s)).collect();
    let mut relabel = vec![u16::MAX; h.n_sites()];
    for (new, &old) in normal_sites.iter().enumerate() {
        relabel[old] = new as u16;
    }
    let mut out = HamiltonianPoly::new(n, normal_sites.len());
    let mut remainder = 0.0;
    for (m, c) in h.sorted_terms() {
        let mut k = vec![0i32; n];
        let mut p = vec![0f64; n];
        for (t, &site) in tangent.iter().enumerate() {
            let a = m.z.iter().filter(|&&s| s as usize == site).count() as i32;
            let b = m.zb.iter().filter(|&&s| s as usize == site).count() as i32;
            k[t] = a - b;
            p[t] = 0.5 * (a + b) as f64;
        }
        let z: SmallVec<[u16; 6]> = m.z.iter().filter(|&&s| relabel[s as usize] != u16::MAX).map(|&s| relabel[s as usize]).collect();
        let zb: SmallVec<[u16; 6]> = m.zb.iter().filter(|&&s| relabel[s as usize] != u16::MAX).map(|&s| relabel[s as usize]).collect();
        // enumerate y-exponents with total degree <= ydeg + 1; the top layer is the remainder
        let mut stack: Vec<(usize, Vec<u32>, f64)> = vec![(0, Vec::new(), 1.0)];
        while let Some((pos, ex, acc)) = stack.pop() {
            if pos == n {
                let total: u32 = ex.iter().sum();
                let base = c.scale(T::lit(acc));
                if total > ydeg {
                    remainder += crate::scalar::cabs(base).to_f64_lossy();
                    continue;
                }
                if z.is_empty() && zb.is_empty() && total == 0 && k.iter().all(|&v| v == 0) {
                    continue;
                }
                let y: Vec<u8> = ex.iter().map(|&e| e as u8).collect();
                let mono = Monomial::one(n).with_k(&k).with_y(&y).with_z(&z).with_zb(&zb);
                out.add_term(mono, base);
                continue;
            }
            let used: u32 = ex.iter().sum();
            for e in 0..=(ydeg + 1 - used) {
                let coef = binom(p[pos], e);
                if coef == 0.0 {
                    break;
                }
                let factor = coef * zeta[pos].powf(p[pos] - e as f64);
                let mut ex2 = ex.clone();
                ex2.push(e);
                stack.push((pos + 1, ex2, acc * factor));
            }
        }
    }
    let in_annulus = eps0.is_none_or(|e| zeta.iter().all(|&z| z >= e.sqrt() * (1.0 - 1e-12) && z <= 2.0 * e.sqrt() * (1.0 + 1e-12)));
    Ok(ActionAngle { hamiltonian: out, normal_sites, sqrt_remainder: remainder, in_annulus })
}

/// Affine frequency maps read off the quadratic and resonant quartic parts: a term
/// `c |z_a|^2 |z_b|^2` with both sites tangent adds to the twist, with one tangent
/// and one normal site adds to the coupling.
pub fn affine_from_resonant(
    lam: &[f64],
    resonant: &HamiltonianPoly<f64>,
    tangent: &[usize],
    weights: &[f64],
    limit_point: f64,
    kappa: f64,
    param_box: ParamBox,
) -> AffineFrequencies {
    let n = tangent.len();
    let normal: Vec<usize> = (0..lam.len()).filter(|s| !tangent.contains(s)).collect();
    let mut twist = DMatrix::zeros(n, n);
    let mut coupling = DMatrix::zeros(normal.len(), n);
    let pos_t = |s: usize| tangent.iter().position(|&t| t == s);
    let pos_n = |s: usize| normal.iter().position(|&t| t == s);
    for (m, c) in resonant.sorted_terms() {
        if m.z.len() != 2 || !is_resonant(m) {
            continue;
        }
        let c = c.re;
        let (a, b) = (m.z[0] as usize, m.z[1] as usize);
        match (pos_t(a), pos_t(b)) {
            (Some(i), Some(j)) if i == j => twist[(i, i)] += 2.0 * c,
            (Some(i), Some(j)) => {
                twist[(i, j)] += c;
                twist[(j, i)] += c;
            }
            (Some(i), None) => coupling[(pos_n(b).unwrap(), i)] += c,
            (None, Some(j)) => coupling[(pos_n(a).unwrap(), j)] += c,
            (None, None) => {}
        }
    }
    AffineFrequencies {
        tangent_base: tangent.iter().map(|&t| lam[t]).collect(),
        twist,
        normal_base: normal.iter().map(|&s| lam[s]).collect(),
        coupling,
        normal_weights: normal.iter().map(|&s| weights[s]).collect(),
        limit_point,
        kappa,
        param_box,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalFormOptions {
    pub divisor_floor: f64,
    pub lie_order: usize,
    pub zdeg_cap: usize,
    pub ydeg_cap: u32,
    /// Representative amplitude; `None` uses the center of the parameter box.
    pub zeta: Option<Vec<f64>>,
    pub eps0: f64,
}

impl Default for NormalFormOptions {
    fn default() -> Self {
        Self { divisor_floor: 1e-10, lie_order: 6, zdeg_cap: 5, ydeg_cap: 2, zeta: None, eps0: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalFormPackage {
    pub equation: Equation,
    pub tangent_sites: Vec<usize>,
    pub zeta: Vec<f64>,
    /// Resonant quartic coefficients `(k, l, coefficient of |z_k|^2 |z_l|^2)` over lattice indices.
    pub resonant_table: Vec<(usize, usize, f64)>,
    pub frequencies: AffineFrequencies,
    pub twist_det: f64,
    pub twist_condition: f64,
    pub cubic_cancellation: f64,
    pub quartic_cancellation: f64,
    pub min_cubic_divisor: f64,
    pub min_quartic_divisor: f64,
    pub sqrt_remainder: f64,
    pub in_annulus: bool,
    pub f3: HamiltonianPoly<f64>,
    pub f4: HamiltonianPoly<f64>,
    /// Tangent-free quartic tail.
    pub tail: HamiltonianPoly<f64>,
    /// Normal form at `zeta` in action-angle variables, constants dropped.
    pub reduced: HamiltonianPoly<f64>,
}

fn resonant_table(p: &HamiltonianPoly<f64>) -> Vec<(usize, usize, f64)> {
    p.sorted_terms().into_iter().filter(|(m, _)| m.z.len() == 2 && is_resonant(m)).map(|(m, c)| (m.z[0] as usize, m.z[1] as usize, c.re)).collect()
}

fn twist_stats(t: &DMatrix<f64>) -> (f64, f64) {
    let det = t.determinant();
    let sv = t.clone().singular_values();
    let cond = sv.max() / sv.min();
    (det, cond)
}

fn max_coeff(p: &HamiltonianPoly<f64>) -> f64 {
    p.max_abs_coeff()
}

/// Cubic elimination, quartic reduction and action-angle substitution for BBM.
pub fn bbm_normal_form(model: &FrequencyModel, cubic: &CubicCoeffs, opts: &NormalFormOptions) -> Result<NormalFormPackage, BirkhoffError> {
    let lam = &model.frequencies;
    let h: HamiltonianPoly<f64> = crate::model::bbm_hamiltonian(model, cubic);
    let (h2, h3) = h.partition(|m| m.zdeg() <= 2);
    let f3 = third_order_generator(&h3, lam, opts.divisor_floor)?;
    let cubic_cancellation = max_coeff(&h3.add(&h2.bracket(&f3)));
    let min_cubic_divisor = h3.sorted_terms().iter().map(|(m, _)| monomial_divisor(m, lam).abs()).fold(f64::INFINITY, f64::min);
    let lie = LieOptions { order: opts.lie_order, caps: Caps { zdeg: opts.zdeg_cap, ..Caps::default() }, prune: 0.0, s: 0.0, r: 0.1 };
    let (h_a, _) = h.lie_transform(&f3, &lie)?;
    finish_normal_form(model, h2, h_a, f3, cubic_cancellation, min_cubic_divisor, opts, &lie)
}

/// Quartic reduction and action-angle substitution for gPC (no cubic part).
pub fn gpc_normal_form(model: &FrequencyModel, quartic: &QuarticCoeffs, opts: &NormalFormOptions) -> Result<NormalFormPackage, BirkhoffError> {
    let h: HamiltonianPoly<f64> = crate::model::gpc_hamiltonian(model, quartic);
    let (h2, _) = h.partition(|m| m.zdeg() <= 2);
    let lie = LieOptions { order: opts.lie_order, caps: Caps { zdeg: opts.zdeg_cap, ..Caps::default() }, prune: 0.0, s: 0.0, r: 0.1 };
    let zero = HamiltonianPoly::new(0, h.n_sites());
    finish_normal_form(model, h2, h, zero, 0.0, f64::INFINITY, opts, &lie)
}

#[allow(clippy::too_many_arguments)]
fn finish_normal_form(
    model: &FrequencyModel,
    h2: HamiltonianPoly<f64>,
    h_a: HamiltonianPoly<f64>,
    f3: HamiltonianPoly<f64>,
    cubic_cancellation: f64,
    min_cubic_divisor: f64,
    opts: &NormalFormOptions,
    lie: &LieOptions,
) -> Result<NormalFormPackage, BirkhoffError> {
    let lam = &model.frequencies;
    let tangent = &model.tangent_sites;
    let q4 = h_a.filter(|m| m.zdeg() == 4);
    let split = fourth_order_reduction(&q4, lam, tangent, opts.divisor_floor);
    let killed = q4.filter(|m| split.generator.coeff(m) != Cx::new(0.0, 0.0));
    let quartic_cancellation = max_coeff(&killed.add(&h2.bracket(&split.generator)));
    let (h_b, _) = h_a.lie_transform(&split.generator, lie)?;
    let zeta = opts.zeta.clone().unwrap_or_else(|| model.param_box.center());
    let aa = action_angle_reduce(&h_b, tangent, &zeta, opts.ydeg_cap, Some(opts.eps0))?;
    let weights = model.lattice.weights();
    let freqs = affine_from_resonant(lam, &split.resonant, tangent, &weights, model.limit_point, model.kappa, model.param_box.clone());
    let (twist_det, twist_condition) = twist_stats(&freqs.twist);
    if twist_det == 0.0 || !twist_det.is_finite() {
        return Err(BirkhoffError::SingularTwist);
    }
    Ok(NormalFormPackage {
        equation: model.equation,
        tangent_sites: tangent.clone(),
        zeta,
        resonant_table: resonant_table(&split.resonant),
        frequencies: freqs,
        twist_det,
        twist_condition,
        cubic_cancellation,
        quartic_cancellation,
        min_cubic_divisor,
        min_quartic_divisor: split.min_divisor,
        sqrt_remainder: aa.sqrt_remainder,
        in_annulus: aa.in_annulus,
        f3,
        f4: split.generator,
        tail: split.tail,
        reduced: aa.hamiltonian,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonresonanceReport {
    pub min_cubic: f64,
    pub cubic_tuple: Vec<i32>,
    pub min_quartic: f64,
    pub quartic_tuple: Vec<i32>,
    /// `max |lambda_j|` beyond the scan radius, standing in for the tail.
    pub tail_bound: f64,
    pub floor: f64,
    pub passed: bool,
}

/// Exhaustive BBM scan of `|lambda_j + lambda_k + lambda_l|` over zero-sum triples and
/// `|lambda_j + lambda_k + lambda_l + lambda_m|` over non-resonant zero-sum quadruples
/// with `min |.| <= n_tilde`, all entries bounded by `radius`.
pub fn nonresonance_scan(tau: f64, radius: i32, n_tilde: i32, floor: f64) -> Result<NonresonanceReport, BirkhoffError> {
    let lam = |j: i32| bbm_normal_frequency(j as i64, tau);
    let mut min_cubic = (f64::INFINITY, vec![]);
    for j in -radius..=radius {
        for k in -radius..=radius {
            let l = -j - k;
            if j == 0 || k == 0 || l == 0 || l.abs() > radius {
                continue;
            }
            let d = (lam(j)? + lam(k)? + lam(l)?).abs();
            if d < min_cubic.0 {
                min_cubic = (d, vec![j, k, l]);
            }
        }
    }
    let mut min_quartic = (f64::INFINITY, vec![]);
    for j in -radius..=radius {
        for k in -radius..=radius {
            for l in -radius..=radius {
                let m = -j - k - l;
                if j == 0 || k == 0 || l == 0 || m == 0 || m.abs() > radius {
                    continue;
                }
                if (j + k) * (j + l) * (j + m) == 0 {
                    continue;
                }
                if [j, k, l, m].iter().map(|v| v.abs()).min().unwrap() > n_tilde {
                    continue;
                }
                let d = (lam(j)? + lam(k)? + lam(l)? + lam(m)?).abs();
                if d < min_quartic.0 {
                    min_quartic = (d, vec![j, k, l, m]);
                }
            }
        }
    }
    let tail_bound = lam(radius + 1)?.abs();
    Ok(NonresonanceReport {
        passed: min_cubic.0 >= floor && min_quartic.0 >= floor,
        min_cubic: min_cubic.0,
        cubic_tuple: min_cubic.1,
        min_quartic: min_quartic.0,
        quartic_tuple: min_quartic.1,
        tail_bound,
        floor,
    })
}

/// Default tail threshold `max(radius, 4 max J)`.
pub fn default_n_tilde(radius: usize, tangent: &[i32]) -> i32 {
    (radius as i32).max(4 * tangent.iter().map(|j| j.abs()).max().unwrap_or(0))
}
