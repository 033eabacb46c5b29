//! Parameter excision for the tangent, first and second Melnikov conditions, and
//! sample-fraction measure estimates.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::AffineFrequencies;

/// Nonzero `k in Z^n` with `|k|_1 <= k_max`, one representative per `+-k` pair
/// (first nonzero component positive).
pub fn k_ball(n: usize, k_max: i64) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    let mut cur = vec![0i64; n];
    fn rec(pos: usize, left: i64, cur: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
        if pos == cur.len() {
            if let Some(first) = cur.iter().find(|&&c| c != 0) {
                if *first > 0 {
                    out.push(cur.clone());
                }
            }
            return;
        }
        for c in -left..=left {
            cur[pos] = c;
            rec(pos + 1, left - c.abs(), cur, out);
        }
        cur[pos] = 0;
    }
    rec(0, k_max, &mut cur, &mut out);
    out
}

/// Representatives `k` (as in [`k_ball`]) with `|(k, omega)| <= bound`. The last
/// component is solved for on an interval, so the cost is `O(K^{n-1})`.
pub fn near_resonant_modes(omega: &[f64], k_max: i64, bound: f64) -> Vec<(Vec<i64>, f64)> {
    let n = omega.len();
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let last = omega[n - 1];
    let mut cur = vec![0i64; n];
    #[allow(clippy::too_many_arguments)]
    fn rec(pos: usize, left: i64, partial: f64, omega: &[f64], last: f64, bound: f64, cur: &mut Vec<i64>, out: &mut Vec<(Vec<i64>, f64)>) {
        let n = omega.len();
        if pos == n - 1 {
            let range: Vec<i64> = if last.abs() < 1e-300 {
                (-left..=left).collect()
            } else {
                let a = (-bound - partial) / last;
                let b = (bound - partial) / last;
                let (lo, hi) = (a.min(b).ceil() as i64, a.max(b).floor() as i64);
                (lo.max(-left)..=hi.min(left)).collect()
            };
            for c in range {
                cur[pos] = c;
                let dot = partial + c as f64 * last;
                if dot.abs() <= bound && cur.iter().find(|&&v| v != 0).is_some_and(|&f| f > 0) {
                    out.push((cur.clone(), dot));
                }
            }
            cur[pos] = 0;
            return;
        }
        for c in -left..=left {
            cur[pos] = c;
            rec(pos + 1, left - c.abs(), partial + c as f64 * omega[pos], omega, last, bound, cur, out);
        }
        cur[pos] = 0;
    }
    rec(0, k_max, 0.0, omega, last, bound, &mut cur, &mut out);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleScheme {
    Grid,
    Halton,
}

/// Sampled parameter set with a per-sample alive mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub scheme: SampleScheme,
    pub samples: Vec<Vec<f64>>,
    pub alive: Vec<bool>,
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [usize; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

impl ParameterBox {
    /// Cell-centered tensor grid for `N <= 3` (about `count` points), Halton beyond.
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, count: usize) -> Self {
        let n = lower.len();
        assert!(n > 0 && n == upper.len() && count > 0);
        let unit: Vec<Vec<f64>>;
        let scheme;
        if n <= 3 {
            scheme = SampleScheme::Grid;
            let per = ((count as f64).powf(1.0 / n as f64).round() as usize).max(1);
            let total = per.pow(n as u32);
            unit = (0..total)
                .map(|mut idx| {
                    (0..n)
                        .map(|_| {
                            let t = (idx % per) as f64;
                            idx /= per;
                            (t + 0.5) / per as f64
                        })
                        .collect()
                })
                .collect();
        } else {
            scheme = SampleScheme::Halton;
            unit = (1..=count).map(|i| (0..n).map(|d| radical_inverse(i, PRIMES[d % PRIMES.len()])).collect()).collect();
        }
        let samples: Vec<Vec<f64>> = unit.into_iter().map(|u| u.iter().enumerate().map(|(d, t)| lower[d] + t * (upper[d] - lower[d])).collect()).collect();
        let alive = vec![true; samples.len()];
        Self { lower, upper, scheme, samples, alive }
    }

    /// Halton points in any dimension; free of the lattice alignments a tensor grid has
    /// with resonance lines of rational slope.
    pub fn halton(lower: Vec<f64>, upper: Vec<f64>, count: usize) -> Self {
        let n = lower.len();
        assert!(n > 0 && n == upper.len() && count > 0);
        let samples: Vec<Vec<f64>> = (1..=count)
            .map(|i| (0..n).map(|d| lower[d] + radical_inverse(i, PRIMES[d % PRIMES.len()]) * (upper[d] - lower[d])).collect())
            .collect();
        let alive = vec![true; samples.len()];
        Self { lower, upper, scheme: SampleScheme::Halton, samples, alive }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|a| **a).count()
    }

    pub fn alive_fraction(&self) -> f64 {
        self.alive_count() as f64 / self.len() as f64
    }

    pub fn reset(&mut self) {
        self.alive.iter_mut().for_each(|a| *a = true);
    }
}

/// Tangent and normal frequencies at a parameter sample.
pub trait FrequencyMap: Sync {
    fn tangent(&self, xi: &[f64]) -> Vec<f64>;
    fn normal(&self, xi: &[f64]) -> Vec<f64>;
}

impl FrequencyMap for AffineFrequencies {
    fn tangent(&self, xi: &[f64]) -> Vec<f64> {
        self.omega(xi)
    }

    fn normal(&self, xi: &[f64]) -> Vec<f64> {
        AffineFrequencies::normal(self, xi)
    }
}

/// `omega(xi) = xi` with parameter-independent normal frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityTangent {
    pub normal: Vec<f64>,
}

impl FrequencyMap for IdentityTangent {
    fn tangent(&self, xi: &[f64]) -> Vec<f64> {
        xi.to_vec()
    }

    fn normal(&self, _xi: &[f64]) -> Vec<f64> {
        self.normal.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WitnessKind {
    Tangent,
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcisionWitness {
    pub sample: usize,
    pub kind: WitnessKind,
    pub k: Vec<i64>,
    /// `(j)` for first-Melnikov, `(i, j)` for second-Melnikov witnesses.
    pub sites: Vec<usize>,
    /// Signs applied to the normal frequencies in `sites`.
    pub signs: Vec<i8>,
    pub value: f64,
    pub threshold: f64,
}

impl ExcisionWitness {
    /// The divisor recomputed from the frequency map.
    pub fn recompute(&self, map: &dyn FrequencyMap, xi: &[f64]) -> f64 {
        let omega = map.tangent(xi);
        let lam = map.normal(xi);
        let dot: f64 = self.k.iter().zip(&omega).map(|(&c, w)| c as f64 * w).sum();
        let shift: f64 = self.sites.iter().zip(&self.signs).map(|(&j, &s)| s as f64 * lam[j]).sum();
        (dot + shift).abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcisionOutcome {
    pub kind: WitnessKind,
    pub k_max: i64,
    pub threshold: f64,
    pub killed: usize,
    pub witnesses: Vec<ExcisionWitness>,
    /// Sites skipped by the tail argument (`|j| >= K2`) and whether the bound held.
    pub tail_sites: usize,
    pub tail_bound_holds: bool,
    /// Largest `|d mu / d xi|` observed by central differences (second kind).
    pub max_mu_derivative: f64,
}

fn excise(
    bx: &mut ParameterBox,
    kind: WitnessKind,
    k_max: i64,
    threshold: f64,
    scan: impl Fn(&[f64]) -> Option<ExcisionWitness> + Sync,
) -> ExcisionOutcome {
    let found: Vec<Option<ExcisionWitness>> = bx
        .samples
        .par_iter()
        .zip(bx.alive.par_iter())
        .enumerate()
        .map(|(i, (xi, alive))| if *alive { scan(xi).map(|w| ExcisionWitness { sample: i, ..w }) } else { None })
        .collect();
    let mut witnesses = Vec::new();
    for w in found.into_iter().flatten() {
        bx.alive[w.sample] = false;
        witnesses.push(w);
    }
    ExcisionOutcome { kind, k_max, threshold, killed: witnesses.len(), witnesses, tail_sites: 0, tail_bound_holds: true, max_mu_derivative: 0.0 }
}

/// Kill samples with `|(k, omega)| < threshold` for some `0 < |k| <= K`.
pub fn excise_tangent(bx: &mut ParameterBox, map: &dyn FrequencyMap, k_max: i64, threshold: f64) -> ExcisionOutcome {
    excise(bx, WitnessKind::Tangent, k_max, threshold, |xi| {
        let omega = map.tangent(xi);
        near_resonant_modes(&omega, k_max, threshold)
            .into_iter()
            .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .filter(|(_, d)| d.abs() < threshold)
            .map(|(k, d)| ExcisionWitness { sample: 0, kind: WitnessKind::Tangent, k, sites: vec![], signs: vec![], value: d.abs(), threshold })
    })
}

/// Kill samples with `|(k, omega) +- lambda_j| < threshold`, `0 < |k| <= K`, scanning
/// sites with `|j| < K2` and checking `|lambda_j| < tail_bound` on the rest.
pub fn excise_first(
    bx: &mut ParameterBox,
    map: &dyn FrequencyMap,
    weights: &[f64],
    k_max: i64,
    threshold: f64,
    k2: f64,
    tail_bound: f64,
) -> ExcisionOutcome {
    let head: Vec<usize> = (0..weights.len()).filter(|&j| weights[j] < k2).collect();
    let tail: Vec<usize> = (0..weights.len()).filter(|&j| weights[j] >= k2).collect();
    let tail_ok = bx.samples.par_iter().all(|xi| {
        let lam = map.normal(xi);
        tail.iter().all(|&j| lam[j].abs() < tail_bound)
    });
    let mut out = excise(bx, WitnessKind::First, k_max, threshold, |xi| {
        let omega = map.tangent(xi);
        let lam = map.normal(xi);
        let reach = head.iter().map(|&j| lam[j].abs()).fold(0.0, f64::max) + threshold;
        let mut best: Option<ExcisionWitness> = None;
        for (k, dot) in near_resonant_modes(&omega, k_max, reach) {
            for &j in &head {
                for sign in [1i8, -1] {
                    let d = (dot + sign as f64 * lam[j]).abs();
                    if d < threshold && best.as_ref().is_none_or(|b| d < b.value) {
                        best = Some(ExcisionWitness { sample: 0, kind: WitnessKind::First, k: k.clone(), sites: vec![j], signs: vec![sign], value: d, threshold });
                    }
                }
            }
        }
        best
    });
    out.tail_sites = tail.len();
    out.tail_bound_holds = tail_ok;
    out
}

/// Kill samples with `|(k, omega) + s_i lambda_i + s_j lambda_j| < threshold` for
/// `0 < |k| <= K`, all sign pairs, `i <= j` (differences with `i = j` excluded).
pub fn excise_second(bx: &mut ParameterBox, map: &dyn FrequencyMap, k_max: i64, threshold: f64, sites: &[usize]) -> ExcisionOutcome {
    let mut out = excise(bx, WitnessKind::Second, k_max, threshold, |xi| {
        let omega = map.tangent(xi);
        let lam = map.normal(xi);
        let reach = 2.0 * sites.iter().map(|&j| lam[j].abs()).fold(0.0, f64::max) + threshold;
        let mut best: Option<ExcisionWitness> = None;
        for (k, dot) in near_resonant_modes(&omega, k_max, reach) {
            for (a, &i) in sites.iter().enumerate() {
                for &j in &sites[a..] {
                    for (si, sj) in [(1i8, 1i8), (1, -1), (-1, 1), (-1, -1)] {
                        if i == j && si != sj {
                            continue;
                        }
                        let d = (dot + si as f64 * lam[i] + sj as f64 * lam[j]).abs();
                        if d < threshold && best.as_ref().is_none_or(|b| d < b.value) {
                            best = Some(ExcisionWitness { sample: 0, kind: WitnessKind::Second, k: k.clone(), sites: vec![i, j], signs: vec![si, sj], value: d, threshold });
                        }
                    }
                }
            }
        }
        best
    });
    out.max_mu_derivative = mu_derivative(bx, map, sites);
    out
}

/// Largest central-difference derivative of `lambda_i +- lambda_j` over the box center.
fn mu_derivative(bx: &ParameterBox, map: &dyn FrequencyMap, sites: &[usize]) -> f64 {
    let center: Vec<f64> = bx.lower.iter().zip(&bx.upper).map(|(a, b)| 0.5 * (a + b)).collect();
    let diam = bx.lower.iter().zip(&bx.upper).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt();
    let h = 1e-5 * diam.max(1e-300);
    let mut best: f64 = 0.0;
    for d in 0..center.len() {
        let mut p = center.clone();
        let mut m = center.clone();
        p[d] += h;
        m[d] -= h;
        let (lp, lm) = (map.normal(&p), map.normal(&m));
        let dl: Vec<f64> = sites.iter().map(|&j| (lp[j] - lm[j]) / (2.0 * h)).collect();
        let top = dl.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        best = best.max(2.0 * top);
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub k_max: i64,
    pub samples: usize,
    pub alive: usize,
    pub excised_tangent: usize,
    pub excised_first: usize,
    pub excised_second: usize,
}

impl ScaleRecord {
    pub fn alive_fraction(&self) -> f64 {
        self.alive as f64 / self.samples as f64
    }

    pub fn first_fraction(&self) -> f64 {
        self.excised_first as f64 / self.samples as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    pub rows: Vec<ScaleRecord>,
    /// Log-log slope of the first-Melnikov excised fraction against `K`.
    pub first_slope: f64,
    /// Log-log slope of the total excised fraction against `K`.
    pub total_slope: f64,
    pub min_alive_fraction: f64,
}

/// Least-squares slope of `log y` on `log x`, skipping nonpositive `y`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().filter(|p| p.0 > 0.0 && p.1 > 0.0).map(|p| (p.0.ln(), p.1.ln())).collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn measure_report(rows: Vec<ScaleRecord>) -> MeasureReport {
    let first: Vec<(f64, f64)> = rows.iter().map(|r| (r.k_max as f64, r.first_fraction())).collect();
    let total: Vec<(f64, f64)> = rows.iter().map(|r| (r.k_max as f64, 1.0 - r.alive_fraction())).collect();
    let min_alive_fraction = rows.iter().map(|r| r.alive_fraction()).fold(1.0, f64::min);
    MeasureReport { first_slope: loglog_slope(&first), total_slope: loglog_slope(&total), min_alive_fraction, rows }
}

impl MeasureReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k_max,samples,alive,alive_fraction,excised_tangent,excised_first,excised_second,first_fraction\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.9},{},{},{},{:.9}",
                r.k_max,
                r.samples,
                r.alive,
                r.alive_fraction(),
                r.excised_tangent,
                r.excised_first,
                r.excised_second,
                r.first_fraction()
            );
        }
        s
    }
}

/// Independent excision at each scale `K` on a fresh copy of `bx`.
pub fn scale_scan(
    bx: &ParameterBox,
    map: &dyn FrequencyMap,
    weights: &[f64],
    scales: &[i64],
    tangent_threshold: impl Fn(f64) -> f64,
    melnikov_threshold: impl Fn(f64) -> f64,
    second_sites: Option<&[usize]>,
) -> MeasureReport {
    let rows = scales
        .iter()
        .map(|&k| {
            let kf = k as f64;
            let mut b = bx.clone();
            let t = excise_tangent(&mut b, map, k, tangent_threshold(kf));
            let f = excise_first(&mut b, map, weights, k, melnikov_threshold(kf), f64::INFINITY, f64::INFINITY);
            let s = second_sites.map_or(0, |sites| excise_second(&mut b, map, k, melnikov_threshold(kf), sites).killed);
            ScaleRecord { k_max: k, samples: b.len(), alive: b.alive_count(), excised_tangent: t.killed, excised_first: f.killed, excised_second: s }
        })
        .collect();
    measure_report(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_counts() {
        // |k|_1 <= 2 in Z^2 has 13 points; 6 representatives
        assert_eq!(k_ball(2, 2).len(), 6);
        assert_eq!(k_ball(1, 3), vec![vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn near_resonant_agrees_with_ball() {
        let omega = [0.37, -1.13, 0.59];
        let bound = 0.2;
        let mut direct: Vec<Vec<i64>> = k_ball(3, 7)
            .into_iter()
            .filter(|k| k.iter().zip(&omega).map(|(&c, w)| c as f64 * w).sum::<f64>().abs() <= bound)
            .collect();
        let mut fast: Vec<Vec<i64>> = near_resonant_modes(&omega, 7, bound).into_iter().map(|p| p.0).collect();
        direct.sort();
        fast.sort();
        assert_eq!(direct, fast);
    }

    #[test]
    fn grid_size() {
        let b = ParameterBox::new(vec![0.0, 0.0], vec![1.0, 1.0], 10_000);
        assert_eq!(b.len(), 10_000);
        let h = ParameterBox::new(vec![0.0; 4], vec![1.0; 4], 100);
        assert_eq!(h.scheme, SampleScheme::Halton);
        assert_eq!(h.len(), 100);
    }

    #[test]
    fn constructed_resonance_is_excised() {
        let map = IdentityTangent { normal: vec![0.25] };
        let mut b = ParameterBox::new(vec![0.2], vec![0.3], 1);
        // single sample at 0.25: (1, omega) - lambda = 0
        let out = excise_first(&mut b, &map, &[1.0], 1, 1e-6, f64::INFINITY, 0.0);
        assert_eq!(out.killed, 1);
        assert!(out.witnesses[0].recompute(&map, &b.samples[0]) < 1e-12);
    }

    #[test]
    fn excision_is_monotone_and_idempotent() {
        let map = IdentityTangent { normal: vec![0.3, 0.1] };
        let mut b = ParameterBox::new(vec![1.0], vec![2.0], 2000);
        excise_tangent(&mut b, &map, 4, 1e-2);
        let first = b.alive.clone();
        let again = excise_tangent(&mut b, &map, 4, 1e-2);
        assert_eq!(again.killed, 0);
        assert_eq!(first, b.alive);
        excise_first(&mut b, &map, &[1.0, 2.0], 4, 1e-2, f64::INFINITY, 0.0);
        assert!(b.alive.iter().zip(&first).all(|(a, f)| !a || *f));
    }

    #[test]
    fn half_excised_fraction() {
        let rows = vec![ScaleRecord { k_max: 8, samples: 10, alive: 5, excised_tangent: 0, excised_first: 5, excised_second: 0 }];
        assert_eq!(measure_report(rows).min_alive_fraction, 0.5);
    }
}
