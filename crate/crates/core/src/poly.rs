//! Sparse polynomials in `(e^{ikx}, y, z, zbar)` with complex coefficients.
//!
//! Poisson bracket `{f,g} = f_x g_y - f_y g_x + i (f_z g_zbar - f_zbar g_z)`;
//! the vector field of `H` is `(H_y, -H_x, i H_zbar, -i H_z)` and the flow of
//! `F` satisfies `d/dt G(phi_t) = {G, F}`.

use std::fmt;

use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use smallvec::SmallVec;
use thiserror::Error;

use crate::scalar::{cabs, cexp, cpow, cre, cx, imag_unit, Cx, Real};

pub type KVec = SmallVec<[i32; 4]>;
pub type YVec = SmallVec<[u8; 4]>;
pub type Sites = SmallVec<[u16; 6]>;

/// `e^{i(k,x)} y^gamma z^alpha zbar^beta`, with `alpha`/`beta` stored as sorted
/// multisets of site indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Monomial {
    pub k: KVec,
    pub y: YVec,
    pub z: Sites,
    pub zb: Sites,
}

impl Monomial {
    pub fn one(n_angles: usize) -> Self {
        Self {
            k: SmallVec::from_elem(0, n_angles),
            y: SmallVec::from_elem(0, n_angles),
            z: SmallVec::new(),
            zb: SmallVec::new(),
        }
    }

    pub fn with_k(mut self, k: &[i32]) -> Self {
        self.k = SmallVec::from_slice(k);
        self
    }

    pub fn with_y(mut self, y: &[u8]) -> Self {
        self.y = SmallVec::from_slice(y);
        self
    }

    pub fn with_z(mut self, z: &[u16]) -> Self {
        self.z = SmallVec::from_slice(z);
        self.z.sort_unstable();
        self
    }

    pub fn with_zb(mut self, zb: &[u16]) -> Self {
        self.zb = SmallVec::from_slice(zb);
        self.zb.sort_unstable();
        self
    }

    pub fn ydeg(&self) -> usize {
        self.y.iter().map(|&e| e as usize).sum()
    }

    pub fn zdeg(&self) -> usize {
        self.z.len() + self.zb.len()
    }

    /// `2|gamma| + |alpha| + |beta|`: the size order on the domain `|y| < r^2, |z| < r`.
    pub fn weight(&self) -> usize {
        2 * self.ydeg() + self.zdeg()
    }

    pub fn kabs(&self) -> i64 {
        self.k.iter().map(|&c| (c as i64).abs()).sum()
    }

    pub fn z_count(&self, site: u16) -> u32 {
        count_sorted(&self.z, site)
    }

    pub fn zb_count(&self, site: u16) -> u32 {
        count_sorted(&self.zb, site)
    }

    pub fn mul(&self, other: &Self) -> Self {
        Self {
            k: self.k.iter().zip(&other.k).map(|(a, b)| a + b).collect(),
            y: self.y.iter().zip(&other.y).map(|(a, b)| a + b).collect(),
            z: merge_sorted(&self.z, &other.z),
            zb: merge_sorted(&self.zb, &other.zb),
        }
    }

    /// Image under the reality involution `(k, gamma, alpha, beta) -> (-k, gamma, beta, alpha)`.
    pub fn conj(&self) -> Self {
        Self {
            k: self.k.iter().map(|c| -c).collect(),
            y: self.y.clone(),
            z: self.zb.clone(),
            zb: self.z.clone(),
        }
    }

    /// Same monomial without its angle factor.
    pub fn without_k(&self) -> Self {
        let mut m = self.clone();
        m.k.iter_mut().for_each(|c| *c = 0);
        m
    }

    fn drop_y(&self, i: usize) -> Self {
        let mut m = self.clone();
        m.y[i] -= 1;
        m
    }

    fn drop_pair(&self, site: u16) -> Self {
        let mut m = self.clone();
        remove_one(&mut m.z, site);
        remove_one(&mut m.zb, site);
        m
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e^i{:?} y{:?} z{:?} zb{:?}", self.k.as_slice(), self.y.as_slice(), self.z.as_slice(), self.zb.as_slice())
    }
}

fn count_sorted(v: &[u16], site: u16) -> u32 {
    let lo = v.partition_point(|&s| s < site);
    let hi = v.partition_point(|&s| s <= site);
    (hi - lo) as u32
}

fn merge_sorted(a: &[u16], b: &[u16]) -> Sites {
    let mut out = Sites::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

fn remove_one(v: &mut Sites, site: u16) {
    if let Ok(p) = v.binary_search(&site) {
        v.remove(p);
    }
}

fn distinct(v: &[u16]) -> impl Iterator<Item = (u16, u32)> + '_ {
    let mut i = 0;
    std::iter::from_fn(move || {
        if i >= v.len() {
            return None;
        }
        let s = v[i];
        let mut n = 0;
        while i < v.len() && v[i] == s {
            n += 1;
            i += 1;
        }
        Some((s, n))
    })
}

/// Degree and Fourier truncation applied after every product.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Caps {
    pub zdeg: usize,
    pub ydeg: usize,
    pub fourier: i64,
    /// Bound on `2 deg_y + deg_z`.
    pub weight: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Self { zdeg: usize::MAX, ydeg: usize::MAX, fourier: i64::MAX, weight: usize::MAX }
    }
}

impl Caps {
    pub fn admits(&self, m: &Monomial) -> bool {
        m.zdeg() <= self.zdeg && m.ydeg() <= self.ydeg && m.kabs() <= self.fourier && m.weight() <= self.weight
    }
}

#[derive(Debug, Error)]
pub enum PolyError {
    #[error("Lie series diverging: term {order} has norm {next:e} > previous {prev:e}")]
    NonConvergent { order: usize, prev: f64, next: f64 },
    #[error("shape mismatch: ({0} angles, {1} sites) vs ({2} angles, {3} sites)")]
    Shape(usize, usize, usize, usize),
}

/// Phase-space point, complexified: `zb` is independent of `z` unless built by [`PhasePoint::real`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint<T: Real> {
    pub x: Vec<Cx<T>>,
    pub y: Vec<Cx<T>>,
    pub z: Vec<Cx<T>>,
    pub zb: Vec<Cx<T>>,
}

impl<T: Real> PhasePoint<T> {
    pub fn zeros(n_angles: usize, n_sites: usize) -> Self {
        let o = Cx::new(T::zero(), T::zero());
        Self { x: vec![o; n_angles], y: vec![o; n_angles], z: vec![o; n_sites], zb: vec![o; n_sites] }
    }

    /// Real `x, y` and `zb = conj(z)`.
    pub fn real(x: &[T], y: &[T], z: &[Cx<T>]) -> Self {
        Self {
            x: x.iter().map(|&v| cre(v)).collect(),
            y: y.iter().map(|&v| cre(v)).collect(),
            z: z.to_vec(),
            zb: z.iter().map(|v| v.conj()).collect(),
        }
    }

    pub fn axpy(&self, a: T, d: &Self) -> Self {
        let f = |u: &[Cx<T>], v: &[Cx<T>]| u.iter().zip(v).map(|(p, q)| *p + q.scale(a)).collect();
        Self { x: f(&self.x, &d.x), y: f(&self.y, &d.y), z: f(&self.z, &d.z), zb: f(&self.zb, &d.zb) }
    }
}

/// Partial derivatives of a polynomial at a point.
#[derive(Clone, Debug)]
pub struct Gradient<T: Real> {
    pub value: Cx<T>,
    pub dx: Vec<Cx<T>>,
    pub dy: Vec<Cx<T>>,
    pub dz: Vec<Cx<T>>,
    pub dzb: Vec<Cx<T>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LieOptions {
    pub order: usize,
    pub caps: Caps,
    /// Terms whose weighted size `|c| e^{|k|s} r^weight` falls below this are
    /// dropped, and the series stops once a whole term does.
    pub prune: f64,
    pub s: f64,
    pub r: f64,
}

impl Default for LieOptions {
    fn default() -> Self {
        Self { order: 6, caps: Caps::default(), prune: 0.0, s: 0.0, r: 1.0 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LieReport {
    /// Weighted norms of `ad_F^n H / n!` for `n = 0..=order`.
    pub term_norms: Vec<f64>,
    /// Weighted norm of the first omitted term.
    pub remainder: f64,
}

#[derive(Clone, PartialEq)]
pub struct HamiltonianPoly<T: Real> {
    n_angles: usize,
    n_sites: usize,
    terms: FxHashMap<Monomial, Cx<T>>,
}

impl<T: Real> fmt::Debug for HamiltonianPoly<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_map();
        for (m, c) in self.sorted_terms() {
            d.entry(&m.to_string(), &(c.re.to_f64_lossy(), c.im.to_f64_lossy()));
        }
        d.finish()
    }
}

impl<T: Real> HamiltonianPoly<T> {
    pub fn new(n_angles: usize, n_sites: usize) -> Self {
        Self { n_angles, n_sites, terms: FxHashMap::default() }
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn monomial(&self) -> Monomial {
        Monomial::one(self.n_angles)
    }

    /// Accumulate `c * m`; entries that cancel exactly are removed.
    pub fn add_term(&mut self, m: Monomial, c: Cx<T>) {
        debug_assert_eq!(m.k.len(), self.n_angles);
        debug_assert!(m.z.iter().chain(&m.zb).all(|&s| (s as usize) < self.n_sites));
        if c.re == T::zero() && c.im == T::zero() {
            return;
        }
        use std::collections::hash_map::Entry;
        match self.terms.entry(m) {
            Entry::Occupied(mut e) => {
                let v = *e.get() + c;
                if v.re == T::zero() && v.im == T::zero() {
                    e.remove();
                } else {
                    *e.get_mut() = v;
                }
            }
            Entry::Vacant(e) => {
                e.insert(c);
            }
        }
    }

    pub fn with_term(mut self, m: Monomial, c: Cx<T>) -> Self {
        self.add_term(m, c);
        self
    }

    pub fn coeff(&self, m: &Monomial) -> Cx<T> {
        self.terms.get(m).copied().unwrap_or_else(|| cre(T::zero()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Monomial, &Cx<T>)> {
        self.terms.iter()
    }

    /// Terms in canonical (monomial) order.
    pub fn sorted_terms(&self) -> Vec<(&Monomial, Cx<T>)> {
        let mut v: Vec<_> = self.terms.iter().map(|(m, c)| (m, *c)).collect();
        v.sort_unstable_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn check_shape(&self, other: &Self) -> Result<(), PolyError> {
        if self.n_angles != other.n_angles || self.n_sites != other.n_sites {
            return Err(PolyError::Shape(self.n_angles, self.n_sites, other.n_angles, other.n_sites));
        }
        Ok(())
    }

    pub fn add_assign_scaled(&mut self, other: &Self, a: Cx<T>) {
        for (m, c) in other.sorted_terms() {
            self.add_term(m.clone(), c * a);
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_assign_scaled(other, cre(T::one()));
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_assign_scaled(other, cre(-T::one()));
        out
    }

    pub fn scale(&self, a: Cx<T>) -> Self {
        let mut out = Self::new(self.n_angles, self.n_sites);
        for (m, c) in self.sorted_terms() {
            out.add_term(m.clone(), c * a);
        }
        out
    }

    pub fn map_coeffs(&self, f: impl Fn(&Monomial, Cx<T>) -> Cx<T>) -> Self {
        let mut out = Self::new(self.n_angles, self.n_sites);
        for (m, c) in self.sorted_terms() {
            out.add_term(m.clone(), f(m, c));
        }
        out
    }

    pub fn filter(&self, keep: impl Fn(&Monomial) -> bool) -> Self {
        Self {
            n_angles: self.n_angles,
            n_sites: self.n_sites,
            terms: self.terms.iter().filter(|(m, _)| keep(m)).map(|(m, c)| (m.clone(), *c)).collect(),
        }
    }

    /// `(terms satisfying pred, the rest)`.
    pub fn partition(&self, pred: impl Fn(&Monomial) -> bool) -> (Self, Self) {
        (self.filter(&pred), self.filter(|m| !pred(m)))
    }

    pub fn truncate(&self, caps: &Caps) -> Self {
        self.filter(|m| caps.admits(m))
    }

    /// Drop terms with `|c| e^{|k|s} r^weight < tol`.
    pub fn prune(&self, tol: f64, s: f64, r: f64) -> Self {
        if tol <= 0.0 {
            return self.clone();
        }
        self.filter_coeff(|m, c| weighted_size(m, c, s, r) >= tol)
    }

    fn filter_coeff(&self, keep: impl Fn(&Monomial, Cx<T>) -> bool) -> Self {
        Self {
            n_angles: self.n_angles,
            n_sites: self.n_sites,
            terms: self.terms.iter().filter(|(m, c)| keep(m, **c)).map(|(m, c)| (m.clone(), *c)).collect(),
        }
    }

    /// Coefficientwise modulus.
    pub fn majorant(&self) -> Self {
        self.map_coeffs(|_, c| cre(cabs(c)))
    }

    /// `sum |c| e^{|k|s} r^weight`: the sup of the majorant on the polydisc of
    /// radii `(r^2, r)` and strip width `s`.
    pub fn weighted_norm(&self, s: f64, r: f64) -> f64 {
        self.sorted_terms().iter().map(|(m, c)| weighted_size(m, *c, s, r)).sum()
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().map(|c| cabs(*c).to_f64_lossy()).fold(0.0, f64::max)
    }

    /// The reality involution applied coefficientwise; fixed points are real Hamiltonians.
    pub fn reality_conjugate(&self) -> Self {
        let mut out = Self::new(self.n_angles, self.n_sites);
        for (m, c) in self.sorted_terms() {
            out.add_term(m.conj(), c.conj());
        }
        out
    }

    /// `max |c_{conj(m)} - conj(c_m)|`.
    pub fn reality_violation(&self) -> f64 {
        self.sorted_terms()
            .iter()
            .map(|(m, c)| cabs(self.coeff(&m.conj()) - c.conj()).to_f64_lossy())
            .fold(0.0, f64::max)
    }

    /// Average `(H + conj H)/2`, the nearest real polynomial.
    pub fn realify(&self) -> Self {
        self.add(&self.reality_conjugate()).scale(cre(T::lit(0.5)))
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Self::new(self.n_angles, self.n_sites);
        let b = other.sorted_terms();
        for (ma, ca) in self.sorted_terms() {
            for (mb, cb) in &b {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        out
    }

    /// Poisson bracket `{self, g}`.
    pub fn bracket(&self, g: &Self) -> Self {
        self.bracket_capped(g, &Caps::default())
    }

    /// `{self, g}` keeping only monomials admitted by `caps`.
    pub fn bracket_capped(&self, g: &Self, caps: &Caps) -> Self {
        assert_eq!((self.n_angles, self.n_sites), (g.n_angles, g.n_sites), "bracket shape mismatch");
        let fa = self.sorted_terms();
        let gb = g.sorted_terms();
        if fa.is_empty() || gb.is_empty() {
            return Self::new(self.n_angles, self.n_sites);
        }
        let idx = BracketIndex::build(&gb, self.n_angles, self.n_sites);
        let iu = imag_unit::<T>();
        let mut out = Self::new(self.n_angles, self.n_sites);
        // bounded batches keep memory flat; merging in chunk order keeps sums deterministic
        for batch in fa.chunks(128 * 64) {
            let sorted: Vec<Vec<(Monomial, Cx<T>)>> = batch
                .par_chunks(128)
                .map(|chunk| {
                    let mut acc: FxHashMap<Monomial, Cx<T>> = FxHashMap::default();
                    let mut cand: Vec<u32> = Vec::new();
                    for (ma, ca) in chunk {
                        cand.clear();
                        for i in 0..self.n_angles {
                            if ma.k[i] != 0 {
                                cand.extend_from_slice(&idx.by_y[i]);
                            }
                            if ma.y[i] != 0 {
                                cand.extend_from_slice(&idx.by_k[i]);
                            }
                        }
                        for (s, _) in distinct(&ma.z) {
                            cand.extend_from_slice(&idx.by_zb[s as usize]);
                        }
                        for (s, _) in distinct(&ma.zb) {
                            cand.extend_from_slice(&idx.by_z[s as usize]);
                        }
                        cand.sort_unstable();
                        cand.dedup();
                        for &bi in &cand {
                            let (mb, cb) = &gb[bi as usize];
                            pair_bracket(ma, *ca, mb, *cb, iu, caps, &mut acc);
                        }
                    }
                    let mut v: Vec<_> = acc.into_iter().collect();
                    v.sort_unstable_by(|a, b| a.0.cmp(&b.0));
                    v
                })
                .collect();
            for v in sorted {
                for (m, c) in v {
                    out.add_term(m, c);
                }
            }
        }
        out
    }

    /// `ad^n`-series `sum_{n<=order} ad_F^n H / n!` with `ad_F H = {H, F}`, i.e. `H o phi_F`.
    pub fn lie_transform(&self, f: &Self, opts: &LieOptions) -> Result<(Self, LieReport), PolyError> {
        self.check_shape(f)?;
        let trim = |p: Self| p.truncate(&opts.caps).prune(opts.prune, opts.s, opts.r);
        let mut sum = trim(self.clone());
        let mut term = sum.clone();
        let mut report = LieReport { term_norms: vec![term.weighted_norm(opts.s, opts.r)], remainder: 0.0 };
        for n in 1..=opts.order + 1 {
            if term.is_zero() {
                if n <= opts.order {
                    report.term_norms.push(0.0);
                }
                continue;
            }
            term = trim(term.bracket_capped(f, &opts.caps).scale(cre(T::one() / T::lit(n as f64))));
            let norm = term.weighted_norm(opts.s, opts.r);
            if n > opts.order {
                report.remainder = norm;
                break;
            }
            let prev = *report.term_norms.last().unwrap();
            if n >= 2 && prev > 0.0 && norm > prev {
                return Err(PolyError::NonConvergent { order: n, prev, next: norm });
            }
            report.term_norms.push(norm);
            sum.add_assign_scaled(&term, cre(T::one()));
            if opts.prune > 0.0 && norm < opts.prune {
                break;
            }
        }
        Ok((sum, report))
    }

    pub fn d_dx(&self, i: usize) -> Self {
        let mut out = Self::new(self.n_angles, self.n_sites);
        for (m, c) in self.sorted_terms() {
            if m.k[i] != 0 {
                out.add_term(m.clone(), c * cx(T::zero(), T::lit(m.k[i] as f64)));
            }
        }
        out
    }

    pub fn d_dy(&self, i: usize) -> Self {
        let mut out = Self::new(self.n_angles, self.n_sites);
        for (m, c) in self.sorted_terms() {
            if m.y[i] != 0 {
                out.add_term(m.drop_y(i), c.scale(T::lit(m.y[i] as f64)));
            }
        }
        out
    }

    pub fn d_dz(&self, site: u16) -> Self {
        let mut out = Self::new(self.n_angles, self.n_sites);
        for (m, c) in self.sorted_terms() {
            let e = m.z_count(site);
            if e != 0 {
                let mut d = m.clone();
                remove_one(&mut d.z, site);
                out.add_term(d, c.scale(T::lit(e as f64)));
            }
        }
        out
    }

    pub fn d_dzb(&self, site: u16) -> Self {
        let mut out = Self::new(self.n_angles, self.n_sites);
        for (m, c) in self.sorted_terms() {
            let e = m.zb_count(site);
            if e != 0 {
                let mut d = m.clone();
                remove_one(&mut d.zb, site);
                out.add_term(d, c.scale(T::lit(e as f64)));
            }
        }
        out
    }

    /// Angle-dependent coefficient of the `(y, z, zbar)` monomial `shape`.
    pub fn coefficient_of(&self, shape: &Monomial) -> Self {
        let mut out = Self::new(self.n_angles, self.n_sites);
        for (m, c) in self.sorted_terms() {
            if m.y == shape.y && m.z == shape.z && m.zb == shape.zb {
                out.add_term(Monomial::one(self.n_angles).with_k(&m.k), c);
            }
        }
        out
    }

    pub fn eval(&self, p: &PhasePoint<T>) -> Cx<T> {
        Evaluator::new(self).eval(p)
    }

    pub fn gradient(&self, p: &PhasePoint<T>) -> Gradient<T> {
        Evaluator::new(self).gradient(p)
    }

    /// `X_H = (H_y, -H_x, i H_zbar, -i H_z)`.
    pub fn vector_field(&self, p: &PhasePoint<T>) -> PhasePoint<T> {
        Evaluator::new(self).vector_field(p)
    }

    /// Terms of weight `<= w` and the rest.
    pub fn split_weight(&self, w: usize) -> (Self, Self) {
        self.partition(|m| m.weight() <= w)
    }

    /// Largest `|k|`, `(y,z)` degrees present.
    pub fn support(&self) -> Caps {
        let mut c = Caps { zdeg: 0, ydeg: 0, fourier: 0, weight: 0 };
        for m in self.terms.keys() {
            c.weight = c.weight.max(m.weight());
            c.zdeg = c.zdeg.max(m.zdeg());
            c.ydeg = c.ydeg.max(m.ydeg());
            c.fourier = c.fourier.max(m.kabs());
        }
        c
    }

    /// Conversion to another scalar type via `f64`.
    pub fn cast<U: Real>(&self) -> HamiltonianPoly<U> {
        let mut out = HamiltonianPoly::new(self.n_angles, self.n_sites);
        for (m, c) in self.sorted_terms() {
            out.add_term(m.clone(), cx(U::lit(c.re.to_f64_lossy()), U::lit(c.im.to_f64_lossy())));
        }
        out
    }

    /// Max coefficient distance to `other`.
    pub fn distance(&self, other: &Self) -> f64 {
        self.sub(other).max_abs_coeff()
    }
}

fn weighted_size<T: Real>(m: &Monomial, c: Cx<T>, s: f64, r: f64) -> f64 {
    cabs(c).to_f64_lossy() * (m.kabs() as f64 * s).exp() * r.powi(m.weight() as i32)
}

/// Sorted terms kept for repeated evaluation at many points.
pub struct Evaluator<'a, T: Real> {
    n_angles: usize,
    n_sites: usize,
    terms: Vec<(&'a Monomial, Cx<T>)>,
    kmax: Vec<usize>,
}

impl<'a, T: Real> Evaluator<'a, T> {
    pub fn new(h: &'a HamiltonianPoly<T>) -> Self {
        let terms = h.sorted_terms();
        let mut kmax = vec![0usize; h.n_angles];
        for (m, _) in &terms {
            for (k, &ki) in kmax.iter_mut().zip(&m.k) {
                *k = (*k).max(ki.unsigned_abs() as usize);
            }
        }
        Self { n_angles: h.n_angles, n_sites: h.n_sites, terms, kmax }
    }

    /// `e^{i j x_a}` for `|j| <= kmax_a`, indexed by `j + kmax_a`.
    fn phases(&self, x: &[Cx<T>]) -> Vec<Vec<Cx<T>>> {
        self.kmax
            .iter()
            .zip(x)
            .map(|(&km, &xa)| {
                let e = cexp(xa * imag_unit::<T>());
                let einv = cexp(-(xa * imag_unit::<T>()));
                let mut row = vec![cre(T::one()); 2 * km + 1];
                for j in 1..=km {
                    row[km + j] = row[km + j - 1] * e;
                    row[km - j] = row[km - j + 1] * einv;
                }
                row
            })
            .collect()
    }

    fn angle(&self, tab: &[Vec<Cx<T>>], k: &[i32]) -> Cx<T> {
        let mut out = cre(T::one());
        for ((row, &km), &ki) in tab.iter().zip(&self.kmax).zip(k) {
            if ki != 0 {
                out *= row[(km as i64 + ki as i64) as usize];
            }
        }
        out
    }

    pub fn eval(&self, p: &PhasePoint<T>) -> Cx<T> {
        let tab = self.phases(&p.x);
        let mut acc = cre(T::zero());
        for (m, c) in &self.terms {
            acc += *c * self.angle(&tab, &m.k) * monomial_powers(m, p).into_iter().fold(cre(T::one()), |a, f| a * f.pow);
        }
        acc
    }

    pub fn gradient(&self, p: &PhasePoint<T>) -> Gradient<T> {
        let o = cre(T::zero());
        let mut g = Gradient {
            value: o,
            dx: vec![o; self.n_angles],
            dy: vec![o; self.n_angles],
            dz: vec![o; self.n_sites],
            dzb: vec![o; self.n_sites],
        };
        let tab = self.phases(&p.x);
        let mut prefix: SmallVec<[Cx<T>; 13]> = SmallVec::new();
        for (m, c) in &self.terms {
            let base = *c * self.angle(&tab, &m.k);
            let factors = monomial_powers(m, p);
            let n = factors.len();
            prefix.clear();
            prefix.push(cre(T::one()));
            for i in 0..n {
                let next = prefix[i] * factors[i].pow;
                prefix.push(next);
            }
            let mut suffix = cre(T::one());
            for i in (0..n).rev() {
                let f = &factors[i];
                let d = base * prefix[i] * suffix * cpow(f.base, f.exp - 1).scale(T::lit(f.exp as f64));
                match f.var {
                    Var::Y(a) => g.dy[a] += d,
                    Var::Z(s) => g.dz[s] += d,
                    Var::Zb(s) => g.dzb[s] += d,
                }
                suffix *= f.pow;
            }
            let v = base * prefix[n];
            g.value += v;
            for (i, &ki) in m.k.iter().enumerate() {
                if ki != 0 {
                    g.dx[i] += v * cx(T::zero(), T::lit(ki as f64));
                }
            }
        }
        g
    }

    /// `X_H = (H_y, -H_x, i H_zbar, -i H_z)`.
    pub fn vector_field(&self, p: &PhasePoint<T>) -> PhasePoint<T> {
        let g = self.gradient(p);
        let iu = imag_unit::<T>();
        PhasePoint {
            x: g.dy,
            y: g.dx.into_iter().map(|v| -v).collect(),
            z: g.dzb.into_iter().map(|v| iu * v).collect(),
            zb: g.dz.into_iter().map(|v| -(iu * v)).collect(),
        }
    }
}

#[derive(Clone, Copy)]
enum Var {
    Y(usize),
    Z(usize),
    Zb(usize),
}

struct Factor<T: Real> {
    var: Var,
    base: Cx<T>,
    exp: u32,
    pow: Cx<T>,
}

fn monomial_powers<T: Real>(m: &Monomial, p: &PhasePoint<T>) -> SmallVec<[Factor<T>; 12]> {
    let mut out = SmallVec::new();
    for (i, &e) in m.y.iter().enumerate() {
        if e != 0 {
            out.push(Factor { var: Var::Y(i), base: p.y[i], exp: e as u32, pow: cpow(p.y[i], e as u32) });
        }
    }
    for (s, e) in distinct(&m.z) {
        let b = p.z[s as usize];
        out.push(Factor { var: Var::Z(s as usize), base: b, exp: e, pow: cpow(b, e) });
    }
    for (s, e) in distinct(&m.zb) {
        let b = p.zb[s as usize];
        out.push(Factor { var: Var::Zb(s as usize), base: b, exp: e, pow: cpow(b, e) });
    }
    out
}

struct BracketIndex {
    by_y: Vec<Vec<u32>>,
    by_k: Vec<Vec<u32>>,
    by_z: Vec<Vec<u32>>,
    by_zb: Vec<Vec<u32>>,
}

impl BracketIndex {
    fn build<T: Real>(terms: &[(&Monomial, Cx<T>)], n_angles: usize, n_sites: usize) -> Self {
        let mut idx = Self {
            by_y: vec![Vec::new(); n_angles],
            by_k: vec![Vec::new(); n_angles],
            by_z: vec![Vec::new(); n_sites],
            by_zb: vec![Vec::new(); n_sites],
        };
        for (t, (m, _)) in terms.iter().enumerate() {
            let t = t as u32;
            for i in 0..n_angles {
                if m.y[i] != 0 {
                    idx.by_y[i].push(t);
                }
                if m.k[i] != 0 {
                    idx.by_k[i].push(t);
                }
            }
            for (s, _) in distinct(&m.z) {
                idx.by_z[s as usize].push(t);
            }
            for (s, _) in distinct(&m.zb) {
                idx.by_zb[s as usize].push(t);
            }
        }
        idx
    }
}

fn pair_bracket<T: Real>(
    ma: &Monomial,
    ca: Cx<T>,
    mb: &Monomial,
    cb: Cx<T>,
    iu: Cx<T>,
    caps: &Caps,
    acc: &mut FxHashMap<Monomial, Cx<T>>,
) {
    let prod = ma.mul(mb);
    let base = iu * ca * cb;
    let mut push = |m: Monomial, w: i64| {
        if w != 0 && caps.admits(&m) {
            *acc.entry(m).or_insert_with(|| cre(T::zero())) += base.scale(T::lit(w as f64));
        }
    };
    for i in 0..ma.k.len() {
        let w = ma.k[i] as i64 * mb.y[i] as i64 - ma.y[i] as i64 * mb.k[i] as i64;
        if w != 0 {
            push(prod.drop_y(i), w);
        }
    }
    // Sites where a has z and b has zbar, or the reverse.
    let mut sites: SmallVec<[u16; 8]> = SmallVec::new();
    for (s, _) in distinct(&ma.z).chain(distinct(&ma.zb)) {
        if !sites.contains(&s) {
            sites.push(s);
        }
    }
    for s in sites {
        let w = ma.z_count(s) as i64 * mb.zb_count(s) as i64 - ma.zb_count(s) as i64 * mb.z_count(s) as i64;
        if w != 0 {
            push(prod.drop_pair(s), w);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PolyWire {
    n_angles: usize,
    n_sites: usize,
    terms: Vec<(Monomial, [f64; 2])>,
}

impl<T: Real> Serialize for HamiltonianPoly<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PolyWire {
            n_angles: self.n_angles,
            n_sites: self.n_sites,
            terms: self
                .sorted_terms()
                .into_iter()
                .map(|(m, c)| (m.clone(), [c.re.to_f64_lossy(), c.im.to_f64_lossy()]))
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de, T: Real> Deserialize<'de> for HamiltonianPoly<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = PolyWire::deserialize(d)?;
        let mut p = Self::new(w.n_angles, w.n_sites);
        for (m, [re, im]) in w.terms {
            if m.k.len() != w.n_angles || m.y.len() != w.n_angles {
                return Err(serde::de::Error::custom("monomial arity does not match n_angles"));
            }
            p.add_term(m, cx(T::lit(re), T::lit(im)));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type P = HamiltonianPoly<f64>;

    fn c(re: f64, im: f64) -> Cx<f64> {
        cx(re, im)
    }

    fn action(n_sites: usize, lam: &[f64]) -> P {
        let mut h = P::new(1, n_sites);
        for (j, &l) in lam.iter().enumerate() {
            h.add_term(Monomial::one(1).with_z(&[j as u16]).with_zb(&[j as u16]), c(l, 0.0));
        }
        h
    }

    #[test]
    fn canonical_pair_sign() {
        // {e^{ix}, y} = i e^{ix}: the x-y part is f_x g_y - f_y g_x.
        let ex = P::new(1, 0).with_term(Monomial::one(1).with_k(&[1]), c(1.0, 0.0));
        let y = P::new(1, 0).with_term(Monomial::one(1).with_y(&[1]), c(1.0, 0.0));
        let b = ex.bracket(&y);
        assert_eq!(b.coeff(&Monomial::one(1).with_k(&[1])), c(0.0, 1.0));
        assert_eq!(y.bracket(&ex).coeff(&Monomial::one(1).with_k(&[1])), c(0.0, -1.0));
    }

    #[test]
    fn z_zbar_pair() {
        // {z, zbar} = i
        let z = P::new(1, 1).with_term(Monomial::one(1).with_z(&[0]), c(1.0, 0.0));
        let zb = P::new(1, 1).with_term(Monomial::one(1).with_zb(&[0]), c(1.0, 0.0));
        assert_eq!(z.bracket(&zb).coeff(&Monomial::one(1)), c(0.0, 1.0));
    }

    #[test]
    fn actions_commute_with_diagonal_h0() {
        let h0 = action(3, &[0.5, 0.4, 0.3]);
        let i1 = action(3, &[0.0, 1.0, 0.0]);
        assert!(i1.bracket(&h0).is_zero());
    }

    #[test]
    fn diagonal_flow() {
        let h = action(2, &[0.5, 0.2]);
        let p = PhasePoint::real(&[0.0], &[0.0], &[c(1.0, 0.0), c(0.0, 0.0)]);
        let v = h.vector_field(&p);
        assert_eq!(v.z[0], c(0.0, 0.5));
        assert_eq!(v.zb[0], c(0.0, -0.5));
    }

    #[test]
    fn derivatives_agree_with_gradient() {
        let mut h = P::new(1, 2);
        h.add_term(Monomial::one(1).with_k(&[2]).with_y(&[1]).with_z(&[0, 0]).with_zb(&[1]), c(0.3, -0.1));
        h.add_term(Monomial::one(1).with_k(&[-1]).with_z(&[1]).with_zb(&[0, 1]), c(1.1, 0.4));
        let p = PhasePoint {
            x: vec![c(0.4, 0.0)],
            y: vec![c(0.2, 0.0)],
            z: vec![c(0.3, 0.1), c(-0.2, 0.5)],
            zb: vec![c(0.7, -0.3), c(0.1, 0.2)],
        };
        let g = h.gradient(&p);
        assert!(cabs(g.value - h.eval(&p)) < 1e-14);
        assert!(cabs(g.dy[0] - h.d_dy(0).eval(&p)) < 1e-14);
        assert!(cabs(g.dx[0] - h.d_dx(0).eval(&p)) < 1e-14);
        for s in 0..2u16 {
            assert!(cabs(g.dz[s as usize] - h.d_dz(s).eval(&p)) < 1e-14);
            assert!(cabs(g.dzb[s as usize] - h.d_dzb(s).eval(&p)) < 1e-14);
        }
    }

    #[test]
    fn reality_involution() {
        let mut h = P::new(1, 2);
        h.add_term(Monomial::one(1).with_k(&[1]).with_z(&[0]), c(0.2, 0.7));
        assert!(h.reality_violation() > 0.5);
        let r = h.realify();
        assert!(r.reality_violation() < 1e-15);
        let p = PhasePoint::real(&[0.3], &[0.1], &[c(0.4, -0.2), c(0.1, 0.9)]);
        assert!(r.eval(&p).im.abs() < 1e-15);
    }

    #[test]
    fn lie_transform_of_zero_generator() {
        let h = action(2, &[0.5, 0.2]);
        let (t, rep) = h.lie_transform(&P::new(1, 2), &LieOptions::default()).unwrap();
        assert_eq!(t, h);
        assert_eq!(rep.remainder, 0.0);
    }

    #[test]
    fn serde_roundtrip() {
        let mut h = P::new(2, 3);
        h.add_term(Monomial::one(2).with_k(&[1, -2]).with_y(&[0, 1]).with_z(&[2]).with_zb(&[0]), c(0.25, -1.5));
        let s = serde_json::to_string(&h).unwrap();
        let back: P = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
    }
}
