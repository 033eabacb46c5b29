use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use kamtori::birkhoff::{bbm_normal_form, default_n_tilde, gpc_normal_form, nonresonance_scan, NonresonanceReport, NormalFormOptions, NormalFormPackage};
use kamtori::kam::{run_kam, ComposedTransform, ExcisionSetup, KamRun, KamState, LieMapMethod, StepRecord};
use kamtori::melnikov::{k_ball, scale_scan, IdentityTangent, MeasureReport, ParameterBox};
use kamtori::model::{bbm_cubic_table, bbm_model, check_assumptions, gpc_model, period_of, AssumptionReport, FrequencyModel};
use kamtori::verify::{iterate_residuals, norm_conservation, reality_audit, symplectic_audit, torus_residual, TorusEmbedding};
use kamtori::{Cx, HamiltonianPoly};
use log::{debug, info};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelKind};
use crate::CliError;

type C = Cx<f64>;
type Poly = HamiltonianPoly<f64>;

pub const MODEL_FILE: &str = "model.json";
pub const NORMAL_FORM_FILE: &str = "normal_form.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const TORUS_FILE: &str = "torus.json";
pub const AUDITS_FILE: &str = "audits.json";
pub const MEASURE_FILE: &str = "measure.csv";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metadata {
    pub created_unix: u64,
    pub tool_version: String,
}

impl Metadata {
    fn now() -> Self {
        let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self { created_unix, tool_version: env!("CARGO_PKG_VERSION").to_string() }
    }
}

/// Every JSON artifact: provenance, payload, and a metadata block holding anything time-dependent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub data: T,
    pub metadata: Metadata,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub model: FrequencyModel,
}

/// Everything the audits need, so replay never re-solves.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TorusArtifact {
    pub omega0: Vec<f64>,
    pub omega: Vec<f64>,
    /// Frequency of every iterate, `omega0` first.
    pub iterate_omegas: Vec<Vec<f64>>,
    pub lam: Vec<f64>,
    pub b0: DMatrix<C>,
    pub b: DMatrix<C>,
    pub weights: Vec<f64>,
    pub epsilon_final: f64,
    pub ledger: Vec<f64>,
    pub omega_shift: f64,
    pub b_shift: f64,
    pub alive_fraction: Option<f64>,
    pub flow_steps: usize,
    pub grid: usize,
    /// The truncated Hamiltonian the torus is checked against.
    pub hamiltonian: Poly,
    pub generators: Vec<Poly>,
    pub embedding: TorusEmbedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// `None` when there is nothing to measure; such checks pass.
    pub value: Option<f64>,
    pub bound: Bound,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: &str, value: Option<f64>, bound: Bound, threshold: f64) -> Self {
        let passed = match (value, bound) {
            (None, _) => true,
            (Some(v), Bound::AtMost) => v <= threshold,
            (Some(v), Bound::AtLeast) => v >= threshold,
        };
        Self { name: name.to_string(), value, bound, threshold, passed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub enabled: bool,
    pub checks: Vec<Check>,
    pub iterate_residuals: Vec<f64>,
    pub frequency_measure: Option<MeasureReport>,
    pub parameter_measure: Option<MeasureReport>,
    pub passed: bool,
}

impl AuditReport {
    fn disabled() -> Self {
        Self { enabled: false, checks: Vec::new(), iterate_residuals: Vec::new(), frequency_measure: None, parameter_measure: None, passed: true }
    }
}

pub struct Prepared {
    pub model: FrequencyModel,
    pub package: NormalFormPackage,
}

pub fn build_normal_form(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let m = &cfg.model;
    let opts = NormalFormOptions { eps0: cfg.schedule.epsilon0, ..NormalFormOptions::default() };
    match m.equation {
        ModelKind::Bbm => {
            let tangent: Vec<i32> = m.tangent.iter().map(|t| t[0]).collect();
            let tau = m.tau[0];
            let model = bbm_model(m.radius, tau, &tangent, cfg.schedule.epsilon0).map_err(|e| CliError::Config(e.to_string()))?;
            let cubic = bbm_cubic_table(m.radius, tau, period_of(tau)).map_err(|e| CliError::Config(e.to_string()))?;
            info!("bbm model: {} sites, tangent {:?}", model.frequencies.len(), tangent);
            let package = bbm_normal_form(&model, &cubic, &opts).map_err(|e| CliError::Numerical(e.to_string()))?;
            Ok(Prepared { model, package })
        }
        ModelKind::Gpc => {
            let labels: Vec<_> = m.tangent.iter().map(|t| t.iter().copied().collect()).collect();
            let (model, quartic) =
                gpc_model(m.radius, &m.tau, m.tangent.len(), &labels, m.l_threshold, cfg.schedule.epsilon0).map_err(|e| CliError::Config(e.to_string()))?;
            info!("gpc model: {} sites, {} quartic coefficients", model.frequencies.len(), quartic.len());
            let package = gpc_normal_form(&model, &quartic, &opts).map_err(|e| CliError::Numerical(e.to_string()))?;
            Ok(Prepared { model, package })
        }
    }
}

pub fn initial_state(cfg: &ExperimentConfig, pkg: &NormalFormPackage) -> Result<KamState, CliError> {
    let fr = &pkg.frequencies;
    let mut state = KamState::from_hamiltonian(&pkg.reduced, fr.normal_base.clone(), fr.normal_weights.clone(), fr.limit_point)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    if cfg.model.zero_perturbation {
        state.r = Poly::new(state.n_angles(), state.n_sites());
    }
    Ok(state)
}

fn envelope<T>(cfg: &ExperimentConfig, data: T) -> Envelope<T> {
    Envelope { config_hash: cfg.hash(), config: cfg.clone(), data, metadata: Metadata::now() }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, cfg: &ExperimentConfig, data: T) -> Result<(), CliError> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(&envelope(cfg, data)).map_err(|e| io_err(&path, e))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

pub fn read_json<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<Envelope<T>, CliError> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct TraceHeader<'a> {
    config_hash: String,
    config: &'a ExperimentConfig,
    metadata: Metadata,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    record: &'a StepRecord,
}

fn write_trace(dir: &Path, cfg: &ExperimentConfig, run: &KamRun) -> Result<(), CliError> {
    let path = dir.join(TRACE_FILE);
    let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    let hash = cfg.hash();
    let header = TraceHeader { config_hash: hash.clone(), config: cfg, metadata: Metadata::now() };
    writeln!(f, "{}", serde_json::to_string(&header).map_err(|e| io_err(&path, e))?).map_err(|e| io_err(&path, e))?;
    for record in &run.records {
        let line = TraceLine { config_hash: &hash, record };
        writeln!(f, "{}", serde_json::to_string(&line).map_err(|e| io_err(&path, e))?).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

fn write_measure(dir: &Path, cfg: &ExperimentConfig, report: &AuditReport) -> Result<(), CliError> {
    let path = dir.join(MEASURE_FILE);
    let mut out = format!("# config_hash={}\nbox,", cfg.hash());
    let mut header_done = false;
    for (label, m) in [("frequency", &report.frequency_measure), ("parameter", &report.parameter_measure)] {
        let Some(m) = m else { continue };
        let csv = m.to_csv();
        let mut lines = csv.lines();
        let header = lines.next().unwrap_or_default();
        if !header_done {
            out.push_str(header);
            out.push('\n');
            header_done = true;
        }
        for l in lines {
            out.push_str(label);
            out.push(',');
            out.push_str(l);
            out.push('\n');
        }
    }
    if !header_done {
        out.push_str("k_max,samples,alive,alive_fraction,excised_tangent,excised_first,excised_second,first_fraction\n");
    }
    fs::write(&path, out).map_err(|e| io_err(&path, e))
}

pub struct RunOutcome {
    pub report: AuditReport,
    pub dir: std::path::PathBuf,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    let dir = cfg.output_path();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let prep = build_normal_form(cfg)?;
    write_json(&dir, MODEL_FILE, cfg, ModelArtifact { model: prep.model.clone() })?;
    write_json(&dir, NORMAL_FORM_FILE, cfg, &prep.package)?;

    let state0 = initial_state(cfg, &prep.package)?;
    let fr = &prep.package.frequencies;
    let opts = cfg.kam_options(fr.kappa);
    let excision = ExcisionSetup {
        map: fr.clone(),
        bx: ParameterBox::halton(fr.param_box.lower.clone(), fr.param_box.upper.clone(), cfg.sampling.parameter_samples),
        profile: cfg.profile(prep.model.dim_d, fr.kappa),
        second_sites: (0..state0.n_sites()).collect(),
    };
    let run = run_kam(state0.clone(), &opts, Some(excision)).map_err(|e| CliError::Numerical(e.to_string()))?;
    for (rec, trace) in run.records.iter().zip(&run.traces) {
        info!(
            "step {}: ledger {:.3e}, K {:.0}, divisors {:.2e}/{:.2e}/{:.2e}, homological residual {:.1e}",
            rec.step, rec.ledger_r, rec.k_cut, rec.min_tangent_divisor, rec.min_first_divisor, rec.min_second_divisor, rec.homological_residual
        );
        for m in &trace.modes {
            debug!("  mode {:?}: {:?} divisor {:.3e} residual {:.1e}", m.k, m.strategy, m.min_divisor, m.residual);
        }
    }
    info!("ledger {:?}", run.ledger);
    write_trace(&dir, cfg, &run)?;

    let mut iterate_omegas = vec![run.omega0.clone()];
    for r in &run.records {
        let last = iterate_omegas.last().expect("nonempty");
        iterate_omegas.push(last.iter().zip(&r.omega_update).map(|(a, b)| a + b).collect());
    }
    let transform = ComposedTransform { generators: run.generators.clone(), method: LieMapMethod::Flow { steps: cfg.sampling.flow_steps } };
    let embedding = TorusEmbedding::from_transform(run.omega.clone(), state0.n_sites(), &transform, cfg.sampling.torus_grid)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let torus = TorusArtifact {
        omega0: run.omega0.clone(),
        omega: run.omega.clone(),
        iterate_omegas,
        lam: state0.lam.clone(),
        b0: run.b0.clone(),
        b: run.b.clone(),
        weights: state0.weights.clone(),
        epsilon_final: run.epsilon_final,
        ledger: run.ledger.clone(),
        omega_shift: run.omega_shift,
        b_shift: run.b_shift,
        alive_fraction: run.alive_fraction,
        flow_steps: cfg.sampling.flow_steps,
        grid: cfg.sampling.torus_grid,
        hamiltonian: state0.hamiltonian(),
        generators: run.generators,
        embedding,
    };
    write_json(&dir, TORUS_FILE, cfg, &torus)?;

    let report = compute_audits(cfg, &prep.package, &torus)?;
    write_json(&dir, AUDITS_FILE, cfg, &report)?;
    write_measure(&dir, cfg, &report)?;
    Ok(RunOutcome { report, dir })
}

fn min_log_ratio(seq: &[f64]) -> Option<f64> {
    let live: Vec<f64> = seq.iter().copied().filter(|v| *v > 0.0).collect();
    if live.len() != seq.len() || live.len() < 2 {
        return None;
    }
    live.windows(2).map(|w| w[1].ln() / w[0].ln()).reduce(f64::min)
}

/// Every audit, from persisted data only.
pub fn compute_audits(cfg: &ExperimentConfig, pkg: &NormalFormPackage, torus: &TorusArtifact) -> Result<AuditReport, CliError> {
    if !cfg.verify {
        return Ok(AuditReport::disabled());
    }
    let num = |e: kamtori::verify::VerifyError| CliError::Numerical(e.to_string());
    let p = cfg.norms.p;
    let eps0 = cfg.schedule.epsilon0;
    let h = &torus.hamiltonian;
    let mut checks = Vec::new();

    let residual = torus_residual(&torus.embedding, h, &torus.weights, p, torus.grid).map_err(num)?;
    info!("torus residual {residual:.3e} (bound {:.3e})", 10.0 * torus.epsilon_final);
    checks.push(Check::new("torus_residual", Some(residual), Bound::AtMost, 10.0 * torus.epsilon_final));
    checks.push(Check::new("embedding_reality", Some(torus.embedding.reality_defect()), Bound::AtMost, 1e-12));

    let method = LieMapMethod::Flow { steps: torus.flow_steps };
    let iterates = iterate_residuals(h, &torus.generators, &torus.iterate_omegas, &torus.weights, p, method, torus.grid).map_err(num)?;
    let decreasing = iterates.windows(2).all(|w| w[1] < w[0]);
    let decay = min_log_ratio(&iterates).map(|r| if decreasing { r } else { 0.0 });
    checks.push(Check::new("iterate_residual_superlinear", decay, Bound::AtLeast, 1.0));

    checks.push(Check::new("ledger_superlinear", min_log_ratio(&torus.ledger), Bound::AtLeast, 1.3));
    checks.push(Check::new("omega_shift", Some(torus.omega_shift), Bound::AtMost, 10.0 * eps0));
    checks.push(Check::new("b_shift", Some(torus.b_shift), Bound::AtMost, 10.0 * eps0));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r0 = cfg.schedule.r0;
    let z0: Vec<C> = torus.lam.iter().map(|_| C::new(r0 * rng.random_range(-1.0..1.0), r0 * rng.random_range(-1.0..1.0))).collect();
    let drift = norm_conservation(&torus.b, &torus.lam, &z0, &torus.weights, p, cfg.sampling.horizon, cfg.sampling.dt);
    checks.push(Check::new("norm_conservation", Some(drift), Bound::AtMost, 1e-9));

    let reality = reality_audit(h, cfg.sampling.audit_samples, r0, 1e-12, cfg.seed);
    checks.push(Check::new("hamiltonian_reality", Some(reality.max_imag.max(reality.coefficient_defect)), Bound::AtMost, 1e-12));

    let transform = ComposedTransform { generators: torus.generators.clone(), method };
    let na = torus.omega.len();
    let distortion = symplectic_audit(&transform, na, torus.lam.len(), cfg.sampling.symplectic_samples, r0, cfg.seed);
    checks.push(Check::new("symplectic_distortion", Some(distortion), Bound::AtMost, 1e-8));

    let (freq_measure, param_measure) = measure_scans(cfg, pkg);
    let n = na as f64;
    checks.push(Check::new("excision_slope", finite(freq_measure.first_slope), Bound::AtMost, -(n - 0.5)));
    checks.push(Check::new("surviving_fraction", Some(param_measure.min_alive_fraction), Bound::AtLeast, 0.9));

    for c in &checks {
        debug!("{:<30} {} {:?} {:?} {:e}", c.name, if c.passed { "pass" } else { "FAIL" }, c.value, c.bound, c.threshold);
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(AuditReport { enabled: true, checks, iterate_residuals: iterates, frequency_measure: Some(freq_measure), parameter_measure: Some(param_measure), passed })
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Excision trend over a frequency box around `omega0` (tangent frequency as the
/// parameter) and survival over the amplitude box of the run.
pub fn measure_scans(cfg: &ExperimentConfig, pkg: &NormalFormPackage) -> (MeasureReport, MeasureReport) {
    let fr = &pkg.frequencies;
    let n = fr.n();
    let profile = cfg.profile(dim_of(cfg), fr.kappa);
    let hw = cfg.sampling.frequency_halfwidth;
    let samples = cfg.sampling.parameter_samples;
    let fbox = ParameterBox::halton(fr.tangent_base.iter().map(|w| w - hw).collect(), fr.tangent_base.iter().map(|w| w + hw).collect(), samples);
    let map = IdentityTangent { normal: fr.normal_base.clone() };
    let scales = &cfg.sampling.scales;
    let tangent = |k: f64| profile.tangent_threshold(k);
    let melnikov = |k: f64| profile.melnikov_threshold(k);
    let freq = scale_scan(&fbox, &map, &fr.normal_weights, scales, tangent, melnikov, None);
    let pbox = ParameterBox::halton(fr.param_box.lower.clone(), fr.param_box.upper.clone(), samples);
    let param = scale_scan(&pbox, fr, &fr.normal_weights, scales, tangent, melnikov, None);
    debug!("measure over {n} angles: frequency slope {:.3}, parameter survival {:.4}", freq.first_slope, param.min_alive_fraction);
    (freq, param)
}

fn dim_of(cfg: &ExperimentConfig) -> usize {
    match cfg.model.equation {
        ModelKind::Bbm => 1,
        ModelKind::Gpc => cfg.model.tau.len(),
    }
}

/// Re-runs the audits on a finished artifact directory.
pub fn replay(dir: &Path, verify: Option<bool>) -> Result<(ExperimentConfig, AuditReport), CliError> {
    let torus: Envelope<TorusArtifact> = read_json(dir, TORUS_FILE)?;
    let nf: Envelope<NormalFormPackage> = read_json(dir, NORMAL_FORM_FILE)?;
    let model: Envelope<ModelArtifact> = read_json(dir, MODEL_FILE)?;
    if torus.config_hash != nf.config_hash || torus.config_hash != model.config_hash {
        return Err(CliError::Artifact("artifacts come from different configurations".into()));
    }
    let mut cfg = torus.config;
    if cfg.hash() != torus.config_hash {
        return Err(CliError::Artifact("embedded configuration does not match its hash".into()));
    }
    if let Some(v) = verify {
        cfg.verify = v;
    }
    let report = compute_audits(&cfg, &nf.data, &torus.data)?;
    Ok((cfg, report))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DivisorRow {
    pub k_max: i64,
    pub min_tangent: f64,
    pub tangent_mode: Vec<i64>,
    pub min_first: f64,
    pub first_mode: Vec<i64>,
    pub first_site: usize,
    pub min_second: f64,
    pub second_mode: Vec<i64>,
    pub second_sites: (usize, usize),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DivisorScan {
    pub omega: Vec<f64>,
    pub rows: Vec<DivisorRow>,
    /// BBM only: cubic and quartic Birkhoff divisors over the lattice.
    pub nonresonance: Option<NonresonanceReport>,
}

/// Smallest tangent, first and second Melnikov divisors at the unperturbed frequencies.
pub fn scan_divisors(cfg: &ExperimentConfig) -> Result<DivisorScan, CliError> {
    let prep = build_normal_form(cfg)?;
    let fr = &prep.package.frequencies;
    let omega = fr.tangent_base.clone();
    let lam = fr.normal_base.clone();
    let rows = cfg
        .sampling
        .scales
        .iter()
        .map(|&k_max| {
            let mut row = DivisorRow {
                k_max,
                min_tangent: f64::MAX,
                tangent_mode: vec![],
                min_first: f64::MAX,
                first_mode: vec![],
                first_site: 0,
                min_second: f64::MAX,
                second_mode: vec![],
                second_sites: (0, 0),
            };
            for k in k_ball(omega.len(), k_max) {
                let dot: f64 = k.iter().zip(&omega).map(|(&c, w)| c as f64 * w).sum();
                if dot.abs() < row.min_tangent {
                    (row.min_tangent, row.tangent_mode) = (dot.abs(), k.clone());
                }
                for (j, l) in lam.iter().enumerate() {
                    let d = (dot.abs() - l.abs()).abs();
                    if d < row.min_first {
                        (row.min_first, row.first_mode, row.first_site) = (d, k.clone(), j);
                    }
                }
                for (i, li) in lam.iter().enumerate() {
                    for (j, lj) in lam.iter().enumerate().skip(i) {
                        for d in [dot + li + lj, dot + li - lj, dot - li + lj, dot - li - lj] {
                            if i == j && (d - dot).abs() < 0.5 * li.abs() {
                                continue;
                            }
                            if d.abs() < row.min_second {
                                (row.min_second, row.second_mode, row.second_sites) = (d.abs(), k.clone(), (i, j));
                            }
                        }
                    }
                }
            }
            row
        })
        .collect();
    let nonresonance = match cfg.model.equation {
        ModelKind::Bbm => {
            let tangent: Vec<i32> = cfg.model.tangent.iter().map(|t| t[0]).collect();
            let n_tilde = default_n_tilde(cfg.model.radius, &tangent);
            Some(nonresonance_scan(cfg.model.tau[0], cfg.model.radius as i32, n_tilde, cfg.solver.divisor_floor).map_err(|e| CliError::Numerical(e.to_string()))?)
        }
        ModelKind::Gpc => None,
    };
    Ok(DivisorScan { omega, rows, nonresonance })
}

pub fn assumptions(cfg: &ExperimentConfig) -> Result<(Prepared, AssumptionReport), CliError> {
    let prep = build_normal_form(cfg)?;
    let state = initial_state(cfg, &prep.package)?;
    let k_max = cfg.sampling.scales.iter().copied().max().unwrap_or(8);
    let report = check_assumptions(&prep.package.frequencies, &state.normal_part(), &state.r, &state.b, cfg.norms.p, k_max);
    Ok((prep, report))
}

