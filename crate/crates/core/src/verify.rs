//! Residual-based verification: invariance of the composed-transform torus in the
//! truncated equations of motion, norm conservation of the reduced linear flow,
//! reality and symplecticity audits.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kam::{hermitian_defect, ComposedTransform};
use crate::norms::hp_norm;
use crate::poly::{Evaluator, HamiltonianPoly, PhasePoint};
use crate::scalar::{cre, cx, Cx};

type C = Cx<f64>;
type Poly = HamiltonianPoly<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum VerifyError {
    #[error("grid of {grid} points per angle cannot resolve Fourier support {support}")]
    Grid { grid: usize, support: i32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// One angle-Fourier mode of the embedding; `x` holds the coefficients of `x(theta) - theta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMode {
    pub k: Vec<i32>,
    pub x: Vec<C>,
    pub y: Vec<C>,
    pub z: Vec<C>,
    pub zb: Vec<C>,
}

/// `theta -> (theta + X(theta), Y(theta), Z(theta), Zbar(theta))` as a trigonometric polynomial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusEmbedding {
    pub omega: Vec<f64>,
    pub n_sites: usize,
    pub modes: Vec<EmbeddingMode>,
}

fn grid_angles(n_angles: usize, grid: usize) -> Vec<Vec<f64>> {
    let total = grid.pow(n_angles as u32);
    (0..total)
        .map(|mut idx| {
            (0..n_angles)
                .map(|_| {
                    let i = idx % grid;
                    idx /= grid;
                    2.0 * PI * i as f64 / grid as f64
                })
                .collect()
        })
        .collect()
}

fn mode_box(n_angles: usize, kmax: i32) -> Vec<Vec<i32>> {
    let side = (2 * kmax + 1) as usize;
    (0..side.pow(n_angles as u32))
        .map(|mut idx| {
            (0..n_angles)
                .map(|_| {
                    let k = (idx % side) as i32 - kmax;
                    idx /= side;
                    k
                })
                .collect()
        })
        .collect()
}

fn phase(k: &[i32], theta: &[f64]) -> C {
    let a: f64 = k.iter().zip(theta).map(|(&k, t)| k as f64 * t).sum();
    cx(a.cos(), a.sin())
}

impl TorusEmbedding {
    /// The unperturbed torus `(theta, 0, 0, 0)`.
    pub fn trivial(omega: Vec<f64>, n_sites: usize) -> Self {
        Self { omega, n_sites, modes: Vec::new() }
    }

    pub fn n_angles(&self) -> usize {
        self.omega.len()
    }

    /// Samples `transform(theta, 0, 0, 0)` on a uniform grid and keeps the modes
    /// `|k_i| < grid / 2` of its discrete Fourier transform.
    pub fn from_transform(omega: Vec<f64>, n_sites: usize, transform: &ComposedTransform, grid: usize) -> Result<Self, VerifyError> {
        if grid < 2 {
            return Err(VerifyError::Grid { grid, support: 0 });
        }
        let na = omega.len();
        let thetas = grid_angles(na, grid);
        let base: Vec<PhasePoint<f64>> = thetas
            .iter()
            .map(|t| {
                let x: Vec<f64> = t.clone();
                PhasePoint::real(&x, &vec![0.0; na], &vec![cre(0.0); n_sites])
            })
            .collect();
        let images = transform.apply_all(&base);
        let shifted: Vec<PhasePoint<f64>> = images
            .into_iter()
            .zip(&thetas)
            .map(|(mut p, t)| {
                for (x, t) in p.x.iter_mut().zip(t) {
                    *x -= cre(*t);
                }
                p
            })
            .collect();
        let kmax = (grid as i32 - 1) / 2;
        let norm = 1.0 / thetas.len() as f64;
        let modes = mode_box(na, kmax)
            .into_par_iter()
            .map(|k| {
                let mut m = EmbeddingMode { k: k.clone(), x: vec![cre(0.0); na], y: vec![cre(0.0); na], z: vec![cre(0.0); n_sites], zb: vec![cre(0.0); n_sites] };
                for (p, t) in shifted.iter().zip(&thetas) {
                    let e = phase(&k, t).conj() * norm;
                    let acc = |dst: &mut [C], src: &[C]| dst.iter_mut().zip(src).for_each(|(d, s)| *d += s * e);
                    acc(&mut m.x, &p.x);
                    acc(&mut m.y, &p.y);
                    acc(&mut m.z, &p.z);
                    acc(&mut m.zb, &p.zb);
                }
                m
            })
            .collect();
        Ok(Self { omega, n_sites, modes })
    }

    /// Drops modes whose largest coefficient is at most `tol`.
    pub fn pruned(mut self, tol: f64) -> Self {
        self.modes.retain(|m| m.x.iter().chain(&m.y).chain(&m.z).chain(&m.zb).any(|c| c.norm() > tol));
        self
    }

    pub fn max_support(&self) -> i32 {
        self.modes.iter().flat_map(|m| m.k.iter().map(|k| k.abs())).max().unwrap_or(0)
    }

    pub fn eval(&self, theta: &[f64]) -> PhasePoint<f64> {
        let mut p = PhasePoint::real(theta, &vec![0.0; self.n_angles()], &vec![cre(0.0); self.n_sites]);
        for m in &self.modes {
            let e = phase(&m.k, theta);
            let acc = |dst: &mut [C], src: &[C]| dst.iter_mut().zip(src).for_each(|(d, s)| *d += s * e);
            acc(&mut p.x, &m.x);
            acc(&mut p.y, &m.y);
            acc(&mut p.z, &m.z);
            acc(&mut p.zb, &m.zb);
        }
        p
    }

    /// `(omega . d/dtheta) E(theta)`, exact from the coefficients.
    pub fn derivative(&self, theta: &[f64]) -> PhasePoint<f64> {
        let mut p = PhasePoint::zeros(self.n_angles(), self.n_sites);
        for (x, w) in p.x.iter_mut().zip(&self.omega) {
            *x = cre(*w);
        }
        for m in &self.modes {
            let kw: f64 = m.k.iter().zip(&self.omega).map(|(&k, w)| k as f64 * w).sum();
            let e = phase(&m.k, theta) * cx(0.0, kw);
            let acc = |dst: &mut [C], src: &[C]| dst.iter_mut().zip(src).for_each(|(d, s)| *d += s * e);
            acc(&mut p.x, &m.x);
            acc(&mut p.y, &m.y);
            acc(&mut p.z, &m.z);
            acc(&mut p.zb, &m.zb);
        }
        p
    }

    /// Largest failure of `X_{-k} = conj(X_k)`, `Y_{-k} = conj(Y_k)`, `Zbar_{-k} = conj(Z_k)`.
    pub fn reality_defect(&self) -> f64 {
        let index: std::collections::HashMap<&[i32], &EmbeddingMode> = self.modes.iter().map(|m| (m.k.as_slice(), m)).collect();
        let zero = |n: usize| vec![cre(0.0); n];
        let mut worst = 0.0f64;
        for m in &self.modes {
            let neg: Vec<i32> = m.k.iter().map(|k| -k).collect();
            let (x, y, zb) = match index.get(neg.as_slice()) {
                Some(o) => (o.x.clone(), o.y.clone(), o.zb.clone()),
                None => (zero(m.x.len()), zero(m.y.len()), zero(m.zb.len())),
            };
            let d = |a: &[C], b: &[C]| a.iter().zip(b).map(|(u, v)| (u.conj() - v).norm()).fold(0.0, f64::max);
            worst = worst.max(d(&m.x, &x)).max(d(&m.y, &y)).max(d(&m.z, &zb));
        }
        worst
    }
}

/// `sqrt(|dx|^2 + |dy|^2 + max(|dz|_p, |dzbar|_p)^2)`.
pub fn product_norm(d: &PhasePoint<f64>, weights: &[f64], p: f64) -> f64 {
    let flat = |v: &[C]| v.iter().map(|c| c.norm_sqr()).sum::<f64>();
    let z = hp_norm(&d.z, weights, p).max(hp_norm(&d.zb, weights, p));
    (flat(&d.x) + flat(&d.y) + z * z).sqrt()
}

/// Sup over a uniform angle grid of `|| (omega . d_theta) E - X_H(E) ||` in the h_p product norm.
pub fn torus_residual(emb: &TorusEmbedding, h: &Poly, weights: &[f64], p: f64, grid: usize) -> Result<f64, VerifyError> {
    if h.n_angles() != emb.n_angles() || h.n_sites() != emb.n_sites || weights.len() != emb.n_sites {
        return Err(VerifyError::Shape(format!(
            "embedding ({}, {}), hamiltonian ({}, {}), {} weights",
            emb.n_angles(),
            emb.n_sites,
            h.n_angles(),
            h.n_sites(),
            weights.len()
        )));
    }
    let support = emb.max_support();
    if grid < 2 * support.max(1) as usize {
        return Err(VerifyError::Grid { grid, support });
    }
    let field = Evaluator::new(h);
    let worst = grid_angles(emb.n_angles(), grid)
        .par_iter()
        .map(|t| {
            let e = emb.eval(t);
            let lhs = emb.derivative(t);
            let rhs = field.vector_field(&e);
            product_norm(&lhs.axpy(-1.0, &rhs), weights, p)
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

/// Residual of the torus built from the first `m` generators, for `m = 0..=generators.len()`,
/// each paired with the frequency of that iterate.
pub fn iterate_residuals(
    h: &Poly,
    generators: &[Poly],
    omegas: &[Vec<f64>],
    weights: &[f64],
    p: f64,
    method: crate::kam::LieMapMethod,
    grid: usize,
) -> Result<Vec<f64>, VerifyError> {
    if omegas.len() != generators.len() + 1 {
        return Err(VerifyError::Shape(format!("{} frequencies for {} generators", omegas.len(), generators.len())));
    }
    (0..=generators.len())
        .map(|m| {
            let t = ComposedTransform { generators: generators[..m].to_vec(), method };
            let emb = TorusEmbedding::from_transform(omegas[m].clone(), h.n_sites(), &t, grid)?;
            torus_residual(&emb, h, weights, p, grid)
        })
        .collect()
}

/// Max over `t = n dt <= horizon` of `| ||z(t)||_p - ||z(0)||_p |` for `z' = i (Lambda + B) z`.
/// Hermitian generators are diagonalised once; anything else is stepped with `exp(i A dt)`.
pub fn norm_conservation(b: &DMatrix<C>, lam: &[f64], z0: &[C], weights: &[f64], p: f64, horizon: f64, dt: f64) -> f64 {
    let n = lam.len();
    let a = DMatrix::from_fn(n, n, |i, j| b[(i, j)] + if i == j { cre(lam[i]) } else { cre(0.0) });
    let steps = (horizon / dt).ceil() as usize;
    let norm0 = hp_norm(z0, weights, p);
    let z0 = DVector::from_column_slice(z0);
    let scale = a.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1.0);
    let mut worst = 0.0f64;
    if hermitian_defect(&a) <= 1e-14 * scale {
        let eig = SymmetricEigen::new(a);
        let c = eig.eigenvectors.adjoint() * &z0;
        for s in 1..=steps {
            let t = s as f64 * dt;
            let rotated = DVector::from_iterator(n, c.iter().zip(eig.eigenvalues.iter()).map(|(c, d)| c * cx((d * t).cos(), (d * t).sin())));
            let z = &eig.eigenvectors * rotated;
            worst = worst.max((hp_norm(z.as_slice(), weights, p) - norm0).abs());
        }
    } else {
        let step = (a * cx(0.0, dt)).exp();
        let mut z = z0;
        for _ in 0..steps {
            z = &step * z;
            worst = worst.max((hp_norm(z.as_slice(), weights, p) - norm0).abs());
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealityReport {
    pub passed: bool,
    /// Max `|Im H|` over real sample points.
    pub max_imag: f64,
    /// Max coefficient defect of `conj(H(x,y,z,zbar)) = H(x,y,zbar,z)`.
    pub coefficient_defect: f64,
}

/// Samples real `x, y` and `zbar = conj(z)` with `|y_i| <= radius^2`, `|z_j| <= radius`.
pub fn reality_audit(h: &Poly, samples: usize, radius: f64, tol: f64, seed: u64) -> RealityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<PhasePoint<f64>> = (0..samples).map(|_| random_real_point(&mut rng, h.n_angles(), h.n_sites(), radius)).collect();
    let ev = Evaluator::new(h);
    let max_imag = points.par_iter().map(|pt| ev.eval(pt).im.abs()).reduce(|| 0.0, f64::max);
    let coefficient_defect = h.reality_violation();
    RealityReport { passed: max_imag <= tol && coefficient_defect <= tol, max_imag, coefficient_defect }
}

pub fn random_real_point(rng: &mut impl Rng, n_angles: usize, n_sites: usize, radius: f64) -> PhasePoint<f64> {
    let x: Vec<f64> = (0..n_angles).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let y: Vec<f64> = (0..n_angles).map(|_| radius * radius * rng.random_range(-1.0..1.0)).collect();
    let z: Vec<C> = (0..n_sites)
        .map(|_| {
            let (r, a) = (radius * rng.random::<f64>().sqrt(), rng.random_range(0.0..2.0 * PI));
            cx(r * a.cos(), r * a.sin())
        })
        .collect();
    PhasePoint::real(&x, &y, &z)
}

fn flatten(p: &PhasePoint<f64>) -> Vec<C> {
    p.x.iter().chain(&p.y).chain(&p.z).chain(&p.zb).copied().collect()
}

fn unflatten(v: &[C], na: usize, ns: usize) -> PhasePoint<f64> {
    PhasePoint { x: v[..na].to_vec(), y: v[na..2 * na].to_vec(), z: v[2 * na..2 * na + ns].to_vec(), zb: v[2 * na + ns..].to_vec() }
}

/// Poisson tensor `{q_a, q_b}` in the order `(x, y, z, zbar)`.
pub fn poisson_tensor(na: usize, ns: usize) -> DMatrix<C> {
    let n = 2 * na + 2 * ns;
    let mut j = DMatrix::from_element(n, n, cre(0.0));
    for i in 0..na {
        j[(i, na + i)] = cre(1.0);
        j[(na + i, i)] = cre(-1.0);
    }
    for s in 0..ns {
        let (z, zb) = (2 * na + s, 2 * na + ns + s);
        j[(z, zb)] = cx(0.0, 1.0);
        j[(zb, z)] = cx(0.0, -1.0);
    }
    j
}

/// Central-difference Jacobian of the transform; the map is holomorphic in every coordinate,
/// so real steps give the complex derivative.
pub fn jacobian(t: &ComposedTransform, at: &PhasePoint<f64>, h: f64) -> DMatrix<C> {
    let (na, ns) = (at.x.len(), at.z.len());
    let base = flatten(at);
    let n = base.len();
    let cols: Vec<Vec<C>> = (0..n)
        .into_par_iter()
        .map(|c| {
            let shift = |sgn: f64| {
                let mut v = base.clone();
                v[c] += cre(sgn * h);
                flatten(&t.apply(&unflatten(&v, na, ns)))
            };
            let (plus, minus) = (shift(1.0), shift(-1.0));
            plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        })
        .collect();
    DMatrix::from_fn(n, n, |r, c| cols[c][r])
}

/// Max over sample points of `max |D Phi J D Phi^T - J|`.
pub fn symplectic_audit(t: &ComposedTransform, n_angles: usize, n_sites: usize, samples: usize, radius: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = poisson_tensor(n_angles, n_sites);
    (0..samples)
        .map(|_| random_real_point(&mut rng, n_angles, n_sites, radius))
        .collect::<Vec<_>>()
        .iter()
        .map(|pt| {
            let d = jacobian(t, pt, 1e-5);
            (&d * &j * d.transpose() - &j).iter().map(|v| v.norm()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kam::LieMapMethod;
    use crate::poly::Monomial;

    fn linear_h(omega: &[f64], lam: &[f64]) -> Poly {
        let (na, ns) = (omega.len(), lam.len());
        let mut h = Poly::new(na, ns);
        for (i, w) in omega.iter().enumerate() {
            let mut y = vec![0u8; na];
            y[i] = 1;
            h.add_term(Monomial::one(na).with_y(&y), cre(*w));
        }
        for (j, l) in lam.iter().enumerate() {
            h.add_term(Monomial::one(na).with_z(&[j as u16]).with_zb(&[j as u16]), cre(*l));
        }
        h
    }

    #[test]
    fn trivial_torus_has_no_residual() {
        let h = linear_h(&[1.0, 2f64.sqrt()], &[0.4, 0.7, 0.9]);
        let emb = TorusEmbedding::trivial(vec![1.0, 2f64.sqrt()], 3);
        let r = torus_residual(&emb, &h, &[1.0, 2.0, 3.0], 1.0, 8).unwrap();
        assert!(r <= 1e-12, "{r}");
        // the identity transform samples back to the trivial torus
        let id = ComposedTransform { generators: vec![], method: LieMapMethod::Flow { steps: 4 } };
        let emb2 = TorusEmbedding::from_transform(emb.omega.clone(), 3, &id, 8).unwrap();
        assert!(torus_residual(&emb2, &h, &[1.0, 2.0, 3.0], 1.0, 8).unwrap() <= 1e-12);
        assert_eq!(emb2.reality_defect(), 0.0);
    }

    #[test]
    fn perturbed_torus_residual_tracks_perturbation() {
        let omega = vec![1.0, 2f64.sqrt()];
        let h = linear_h(&omega, &[0.4, 0.7]);
        let mut last = 0.0;
        for amp in [1e-6, 1e-5, 1e-4, 1e-3] {
            let mut emb = TorusEmbedding::trivial(omega.clone(), 2);
            let z = vec![cx(amp, 0.0), cre(0.0)];
            emb.modes.push(EmbeddingMode { k: vec![1, 0], x: vec![cre(0.0); 2], y: vec![cre(0.0); 2], z: z.clone(), zb: vec![cre(0.0); 2] });
            emb.modes.push(EmbeddingMode { k: vec![-1, 0], x: vec![cre(0.0); 2], y: vec![cre(0.0); 2], z: vec![cre(0.0); 2], zb: z });
            assert!(emb.reality_defect() < 1e-18);
            // z = a e^{i theta_1} solves z' = i omega_1 z, not z' = i 0.4 z
            let r = torus_residual(&emb, &h, &[1.0, 1.0], 0.0, 8).unwrap();
            let expect = (1.0 - 0.4) * amp;
            assert!((r - expect).abs() < 1e-9 * expect.max(1e-12), "{r} vs {expect}");
            assert!(r > last);
            last = r;
        }
    }

    #[test]
    fn grid_must_resolve_support() {
        let mut emb = TorusEmbedding::trivial(vec![1.0], 1);
        emb.modes.push(EmbeddingMode { k: vec![5], x: vec![cre(0.0)], y: vec![cre(0.0)], z: vec![cre(1e-3)], zb: vec![cre(0.0)] });
        let h = linear_h(&[1.0], &[0.5]);
        assert_eq!(torus_residual(&emb, &h, &[1.0], 1.0, 8), Err(VerifyError::Grid { grid: 8, support: 5 }));
    }

    #[test]
    fn sheared_torus_residual_is_exact() {
        // F = c sin(x_1) y_2 shears x_2 by c sin(theta_1); the sheared torus moves at
        // omega_2 + c omega_1 cos(theta_1) while the linear flow keeps omega_2
        let omega = vec![1.0, 0.5f64.sqrt()];
        let h = linear_h(&omega, &[0.3]);
        let c = 1e-3;
        let mut f = Poly::new(2, 1);
        f.add_term(Monomial::one(2).with_k(&[1, 0]).with_y(&[0, 1]), cx(0.0, -c / 2.0));
        f.add_term(Monomial::one(2).with_k(&[-1, 0]).with_y(&[0, 1]), cx(0.0, c / 2.0));
        let t = ComposedTransform { generators: vec![f], method: LieMapMethod::Flow { steps: 32 } };
        let emb = TorusEmbedding::from_transform(omega.clone(), 1, &t, 16).unwrap();
        assert!(emb.reality_defect() < 1e-15);
        let r = torus_residual(&emb, &h, &[1.0], 1.0, 16).unwrap();
        assert!((r - c * omega[0]).abs() < 1e-9, "{r}");
    }

    #[test]
    fn conservation_exact_for_diagonal_flow() {
        let lam = [0.3, 0.7, 1.1];
        let z0 = [cx(0.1, 0.2), cx(-0.3, 0.0), cx(0.0, 0.05)];
        let b = DMatrix::from_element(3, 3, cre(0.0));
        let d = norm_conservation(&b, &lam, &z0, &[1.0, 2.0, 3.0], 1.0, 1e3, 1e-2);
        assert!(d <= 1e-12, "{d}");
    }

    #[test]
    fn conservation_for_random_hermitian_and_negative_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 6;
        let lam: Vec<f64> = (1..=n).map(|j| 0.5 + 1.0 / j as f64).collect();
        let mut b = DMatrix::from_fn(n, n, |_, _| cx(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3)));
        b = (&b + b.adjoint()) * cre(0.5);
        let z0: Vec<C> = (0..n).map(|_| cx(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1))).collect();
        let ones = vec![1.0; n];
        let d = norm_conservation(&b, &lam, &z0, &ones, 0.0, 1e3, 1e-2);
        assert!(d <= 1e-9, "{d}");
        // the stepped exponential must agree with the eigen route on the same flow
        let mut b_off = b.clone();
        b_off[(0, 1)] += cx(1e-15, 0.0);
        let stepped = norm_conservation(&b_off, &lam, &z0, &ones, 0.0, 10.0, 1e-2);
        assert!(stepped <= 1e-11, "{stepped}");
        let mut bad = b.clone();
        bad[(0, 1)] += cre(1e-3);
        let grow = norm_conservation(&bad, &lam, &z0, &ones, 0.0, 1e3, 1e-2);
        assert!(grow > 1e-4, "{grow}");
    }

    #[test]
    fn reality_audit_examples() {
        let h = linear_h(&[1.0, 1.5], &[0.2, 0.4]);
        let mut h2 = h.clone();
        h2.add_term(Monomial::one(2).with_z(&[0]).with_zb(&[1]).with_k(&[1, -1]), cx(0.1, 0.05));
        h2 = h2.realify();
        let rep = reality_audit(&h2, 200, 0.1, 1e-12, 1);
        assert!(rep.passed, "{rep:?}");
        let bad = Poly::new(2, 2).with_term(Monomial::one(2).with_z(&[0]), cx(0.0, 1.0));
        let rep = reality_audit(&bad, 200, 0.1, 1e-12, 1);
        assert!(!rep.passed);
        assert!(rep.max_imag > 0.05 && rep.max_imag <= 0.1, "{rep:?}");
        assert!((rep.coefficient_defect - 1.0).abs() < 1e-15);
    }

    fn quadratic_generator(rng: &mut impl Rng, na: usize, ns: usize, size: f64) -> Poly {
        let mut f = Poly::new(na, ns);
        for i in 0..ns as u16 {
            for j in 0..ns as u16 {
                f.add_term(Monomial::one(na).with_z(&[i]).with_zb(&[j]), cx(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * size);
                f.add_term(Monomial::one(na).with_z(&[i, j]), cx(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * size);
            }
        }
        for i in 0..na {
            let mut y = vec![0u8; na];
            y[i] = 1;
            f.add_term(Monomial::one(na).with_y(&y), cre(size));
        }
        f.realify()
    }

    #[test]
    fn symplectic_audit_examples() {
        let (na, ns) = (1, 3);
        let id = ComposedTransform { generators: vec![], method: LieMapMethod::Flow { steps: 1 } };
        assert!(symplectic_audit(&id, na, ns, 4, 0.1, 2) < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = quadratic_generator(&mut rng, na, ns, 1e-3);
        let flow = ComposedTransform { generators: vec![f.clone()], method: LieMapMethod::Flow { steps: 8 } };
        let d = symplectic_audit(&flow, na, ns, 4, 0.1, 2);
        assert!(d <= 1e-8, "{d}");
        // a first-order series drops ad_F^2 / 2, whose size is about |F|^2
        let mut last = 0.0;
        for size in [1e-3, 1e-2] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let f = quadratic_generator(&mut rng, na, ns, size);
            let cut = ComposedTransform { generators: vec![f], method: LieMapMethod::Series { order: 1 } };
            let d = symplectic_audit(&cut, na, ns, 4, 0.1, 2);
            assert!(d > 0.1 * size * size && d < 100.0 * size * size, "{size}: {d}");
            assert!(d > last);
            last = d;
        }
    }

    #[test]
    fn poisson_tensor_is_antisymmetric() {
        let j = poisson_tensor(2, 3);
        assert_eq!(&j + j.transpose(), DMatrix::from_element(10, 10, cre(0.0)));
    }
}
