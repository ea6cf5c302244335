//! Named experiment suites with pinned pass thresholds.
//!
//! Each suite derives every random stream from `(seed, suite)` and collects
//! scalar metrics into an ordered map, so a rerun with the same seed emits
//! byte-identical canonical JSON whatever the worker count. Wall-clock data
//! never enters the canonical payload.

use super::{compare_to_gd, stationarity_check, structure_check, VerifyError};
use crate::estimators::{
    check_isotropy, check_loss_constancy, check_odd_even_moments, check_trace_identity,
    estimate_eta_linear, estimate_eta_nonlinear, estimate_eta_skewed, isotropy_statistic,
    EtaEstimate, IsotropyKind, MIN_SAMPLES,
};
use crate::model::{
    construct_gd_minimizer, construct_preconditioned_minimizer, reduce, LsaParams,
};
use crate::numerics::{sample_spd, RngStream, SpdMatrix};
use crate::tasks::{Activation, MlpTargetSpec, TaskSpec};
use crate::training::{default_init_scale, empirical_loss, train, Optimizer, TrainConfig};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// The six experiment suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteId {
    LemmasLinear,
    LemmasNonlinear,
    TrainIsotropic,
    TrainSkewed,
    TrainNonlinear,
    Constructions,
}

impl SuiteId {
    pub const ALL: [SuiteId; 6] = [
        SuiteId::LemmasLinear,
        SuiteId::LemmasNonlinear,
        SuiteId::TrainIsotropic,
        SuiteId::TrainSkewed,
        SuiteId::TrainNonlinear,
        SuiteId::Constructions,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SuiteId::LemmasLinear => "lemmas-linear",
            SuiteId::LemmasNonlinear => "lemmas-nonlinear",
            SuiteId::TrainIsotropic => "train-isotropic",
            SuiteId::TrainSkewed => "train-skewed",
            SuiteId::TrainNonlinear => "train-nonlinear",
            SuiteId::Constructions => "constructions",
        }
    }

    fn index(&self) -> u64 {
        SuiteId::ALL.iter().position(|s| s == self).unwrap() as u64
    }
}

impl fmt::Display for SuiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SuiteId {
    type Err = VerifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SuiteId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| VerifyError::UnknownSuite(s.to_string()))
    }
}

/// Result-affecting suite knobs. Worker counts are deliberately absent: they
/// must not change any output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub eta_samples: usize,
    pub isotropy_samples: usize,
    pub constancy_samples: usize,
    pub stationarity_samples: usize,
    pub probes: usize,
    pub train_steps: usize,
    pub train_batch_size: usize,
    pub train_step_size: f64,
    /// Step size for the skewed suite; the `S^{-1}` target needs larger
    /// parameter magnitudes, so it trades more jitter for more travel.
    pub train_step_size_skewed: f64,
    pub eval_prompts: usize,
}

impl SuiteConfig {
    /// Full acceptance budgets.
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            eta_samples: 200_000,
            isotropy_samples: 1_000_000,
            constancy_samples: 100_000,
            stationarity_samples: 100_000,
            probes: 8,
            // Adam at 1e-4: small enough that the optimizer's stationary
            // jitter clears the r^2 >= 0.999 gate, large enough to converge
            // in 5000 steps from the default init
            train_steps: 5000,
            train_batch_size: 256,
            train_step_size: 1e-4,
            train_step_size_skewed: 2e-4,
            eval_prompts: 10_000,
        }
    }

    /// Reduced budgets for smoke and determinism runs; results stay above
    /// the precision floor but the statistical gates are not meaningful.
    pub fn smoke(seed: u64) -> Self {
        Self {
            seed,
            eta_samples: 2000,
            isotropy_samples: 2000,
            constancy_samples: 2000,
            stationarity_samples: 2000,
            probes: 8,
            train_steps: 50,
            train_batch_size: 32,
            train_step_size: 1e-3,
            train_step_size_skewed: 1e-3,
            eval_prompts: 1000,
        }
    }

    fn sufficient_precision(&self) -> bool {
        self.eta_samples >= MIN_SAMPLES
            && self.isotropy_samples >= MIN_SAMPLES
            && self.constancy_samples >= MIN_SAMPLES
            && self.stationarity_samples >= MIN_SAMPLES
            && self.eval_prompts >= 1000
            && self.probes >= 8
    }
}

/// Outcome of one suite run; `metrics` is ordered so serialization is
/// canonical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub pass: bool,
    pub metrics: BTreeMap<String, f64>,
    pub seed: u64,
    pub config: SuiteConfig,
}

impl SuiteResult {
    /// Deterministic JSON payload; timestamps and wall times live outside it.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("suite result serializes")
    }

    /// `"{suite}-{seed}"`, the result file stem.
    pub fn file_stem(&self) -> String {
        format!("{}-{}", self.name, self.seed)
    }
}

struct Scorer {
    pass: bool,
    metrics: BTreeMap<String, f64>,
}

impl Scorer {
    fn new() -> Self {
        Self { pass: true, metrics: BTreeMap::new() }
    }

    fn note(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }

    fn at_most(&mut self, key: &str, value: f64, limit: f64) {
        self.note(key, value);
        self.pass &= value <= limit;
    }

    fn at_least(&mut self, key: &str, value: f64, limit: f64) {
        self.note(key, value);
        self.pass &= value >= limit;
    }

    fn finish(self, id: SuiteId, cfg: &SuiteConfig) -> SuiteResult {
        SuiteResult {
            name: id.as_str().to_string(),
            pass: self.pass,
            metrics: self.metrics,
            seed: cfg.seed,
            config: cfg.clone(),
        }
    }
}

// pass thresholds, pinned
const STDERR_GATE: f64 = 4.0;
const CLOSED_FORM_GATE: f64 = 3.0;
const SENSITIVITY_GATE: f64 = 10.0;
const NEGATIVE_CONTROL_GATE: f64 = 10.0;
const CONSTANCY_SPREAD_GATE: f64 = 0.02;
const CONSTANCY_PERTURBED_GATE: f64 = 0.10;
const JOINT_AGREEMENT_GATE: f64 = 3.0;
const R2_GATE_LINEAR: f64 = 0.999;
const STRUCTURE_GATE_LINEAR: f64 = 0.05;
const R2_GATE_NONLINEAR: f64 = 0.99;
const STRUCTURE_GATE_NONLINEAR: f64 = 0.10;
const LOSS_GAP_GATE: f64 = 0.02;

/// Execute one named suite.
pub fn run_suite(id: SuiteId, cfg: &SuiteConfig) -> Result<SuiteResult, VerifyError> {
    if !cfg.sufficient_precision() {
        let mut s = Scorer::new();
        s.pass = false;
        s.note("insufficient_precision", 1.0);
        return Ok(s.finish(id, cfg));
    }
    let base = RngStream::new(cfg.seed).split(id.index());
    match id {
        SuiteId::LemmasLinear => lemmas_linear(cfg, &base),
        SuiteId::LemmasNonlinear => lemmas_nonlinear(cfg, &base),
        SuiteId::TrainIsotropic => train_isotropic(cfg, &base),
        SuiteId::TrainSkewed => train_skewed(cfg, &base),
        SuiteId::TrainNonlinear => train_nonlinear(cfg, &base),
        SuiteId::Constructions => constructions(cfg, &base),
    }
    .map(|s| s.finish(id, cfg))
}

fn joint_deviation(a: &EtaEstimate, b: &EtaEstimate) -> f64 {
    (a.value - b.value).abs() / (a.stderr * a.stderr + b.stderr * b.stderr).sqrt()
}

fn lemmas_linear(cfg: &SuiteConfig, base: &RngStream) -> Result<Scorer, VerifyError> {
    let mut s = Scorer::new();

    // closed-form eta at sigma = 0: eta = 1 / (n + d + 1)
    for (i, (d, n)) in [(1usize, 1usize), (2, 4), (5, 20)].into_iter().enumerate() {
        let est = estimate_eta_linear(d, n, 0.0, cfg.eta_samples, &base.split(10 + i as u64))?;
        s.note(&format!("eta_d{d}_n{n}"), est.value);
        s.at_most(
            &format!("eta_closed_form_dev_se_d{d}_n{n}"),
            est.deviation_from(1.0 / (n + d + 1) as f64),
            CLOSED_FORM_GATE,
        );
        s.note(&format!("eta_negative_flag_d{d}_n{n}"), est.negative_beyond(4.0) as u8 as f64);
    }

    // cross-moment isotropy at (d = 2, n = 5, sigma = 1)
    let iso = TaskSpec::isotropic(2, 5, 1.0)?;
    for (i, kind, label) in
        [(0u64, IsotropyKind::Yyt, "yyt"), (1, IsotropyKind::Yridge, "yridge")]
    {
        let rep = check_isotropy(&iso, kind, cfg.isotropy_samples, &base.split(20 + i))?;
        s.at_most(
            &format!("isotropy_{label}_offdiag_se"),
            rep.max_offdiag_stderr_units(),
            STDERR_GATE,
        );
        s.at_most(
            &format!("isotropy_{label}_diag_spread_se"),
            rep.max_diag_spread_stderr_units(),
            STDERR_GATE,
        );
        s.note(&format!("isotropy_{label}_c"), rep.c_estimate);
    }

    // negative control: the same statistic on skewed data (condition 4)
    let skewed_sigma =
        SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5])))?;
    let skewed = TaskSpec::skewed(skewed_sigma, 5, 1.0)?;
    let control =
        isotropy_statistic(&skewed, IsotropyKind::Yyt, cfg.isotropy_samples, &base.split(22))?;
    s.at_least(
        "isotropy_negative_control_violation_se",
        control.max_violation_stderr_units(),
        NEGATIVE_CONTROL_GATE,
    );

    // loss-difference constancy; the base gate at the reference (d = 3)
    // configuration, the x1.5 sensitivity where the diagnostic has power
    // (d = 1: the spread-to-scale ceiling decays like 1/(sqrt(d)(d+1)))
    let con3 = TaskSpec::isotropic(3, 10, 0.5)?;
    let eta3 = estimate_eta_linear(3, 10, 0.5, cfg.eta_samples, &base.split(30))?.value;
    let c3 = check_loss_constancy(&con3, cfg.probes, cfg.constancy_samples, &base.split(31), Some(eta3))?;
    s.at_most("constancy_spread_ratio_d3", c3.relative_spread(), CONSTANCY_SPREAD_GATE);
    let c3p = check_loss_constancy(
        &con3,
        cfg.probes,
        cfg.constancy_samples,
        &base.split(31),
        Some(1.5 * eta3),
    )?;
    s.note("constancy_spread_ratio_d3_perturbed", c3p.relative_spread());

    let con1 = TaskSpec::isotropic(1, 10, 0.5)?;
    let eta1 = estimate_eta_linear(1, 10, 0.5, cfg.eta_samples, &base.split(32))?.value;
    let c1 = check_loss_constancy(&con1, cfg.probes, cfg.constancy_samples, &base.split(35), Some(eta1))?;
    s.at_most("constancy_spread_ratio_d1", c1.relative_spread(), CONSTANCY_SPREAD_GATE);
    let c1p = check_loss_constancy(
        &con1,
        cfg.probes,
        cfg.constancy_samples,
        &base.split(35),
        Some(1.5 * eta1),
    )?;
    s.at_least(
        "constancy_spread_ratio_d1_perturbed",
        c1p.relative_spread(),
        CONSTANCY_PERTURBED_GATE,
    );

    // trace identity at the closed-form rate
    let tr_spec = TaskSpec::isotropic(5, 20, 0.0)?;
    let tr = check_trace_identity(&tr_spec, Some(1.0 / 26.0), cfg.constancy_samples, &base.split(40))?;
    s.at_most("trace_identity_residual_se", tr, STDERR_GATE);
    let tr_bad = check_trace_identity(
        &tr_spec,
        Some(1.2 / 26.0),
        cfg.constancy_samples,
        &base.split(40),
    )?;
    s.at_least("trace_identity_perturbed_se", tr_bad, SENSITIVITY_GATE);

    // odd-moment cancellation
    let mom = check_odd_even_moments(&iso, cfg.constancy_samples, &base.split(50))?;
    s.at_most("moment_y1_se", mom.mean_y1.zero_deviation(), STDERR_GATE);
    s.at_most("moment_y1_cubed_se", mom.mean_y1_cubed.zero_deviation(), STDERR_GATE);
    s.at_most("moment_y1_y2_se", mom.mean_y1_y2.zero_deviation(), STDERR_GATE);
    s.note("moment_y1_sq", mom.mean_y1_sq.value);
    Ok(s)
}

fn lemmas_nonlinear(cfg: &SuiteConfig, base: &RngStream) -> Result<Scorer, VerifyError> {
    let mut s = Scorer::new();
    let target3 = MlpTargetSpec::new(vec![3, 16, 1], Activation::Tanh)?;
    let spec3 = TaskSpec::nonlinear(target3.clone(), 10, 0.5)?;

    for (i, kind, label) in
        [(0u64, IsotropyKind::Yyt, "yyt"), (1, IsotropyKind::Yubar, "yubar")]
    {
        let rep = check_isotropy(&spec3, kind, cfg.isotropy_samples, &base.split(10 + i))?;
        s.at_most(
            &format!("isotropy_{label}_offdiag_se"),
            rep.max_offdiag_stderr_units(),
            STDERR_GATE,
        );
        s.at_most(
            &format!("isotropy_{label}_diag_spread_se"),
            rep.max_diag_spread_stderr_units(),
            STDERR_GATE,
        );
    }

    // odd/even moment vanishing with the predictor surrogate
    let mom = check_odd_even_moments(&spec3, cfg.constancy_samples, &base.split(20))?;
    s.at_most("moment_y1_se", mom.mean_y1.zero_deviation(), STDERR_GATE);
    s.at_most("moment_y1_cubed_se", mom.mean_y1_cubed.zero_deviation(), STDERR_GATE);
    let worst_ubar = mom
        .mean_y1sq_ubar
        .iter()
        .map(|m| m.zero_deviation())
        .fold(0.0, f64::max);
    s.at_most("moment_y1sq_ubar_worst_se", worst_ubar, STDERR_GATE);

    // loss-difference constancy carries over to nonlinear targets
    let cn = check_loss_constancy(&spec3, cfg.probes, cfg.constancy_samples, &base.split(30), None)?;
    s.at_most("constancy_spread_ratio", cn.relative_spread(), CONSTANCY_SPREAD_GATE);

    // trace identity with the tower-property numerator
    let tr = check_trace_identity(&spec3, None, cfg.constancy_samples, &base.split(40))?;
    s.at_most("trace_identity_residual_se", tr, STDERR_GATE);

    // the degenerate linear family reproduces the linear rate
    let degenerate = MlpTargetSpec::new(vec![5, 1], Activation::Tanh)?;
    let eta_deg = estimate_eta_nonlinear(&degenerate, 20, 0.1, cfg.eta_samples, &base.split(50))?;
    let eta_lin = estimate_eta_linear(5, 20, 0.1, cfg.eta_samples, &base.split(51))?;
    s.note("eta_degenerate", eta_deg.value);
    s.note("eta_linear_reference", eta_lin.value);
    s.at_most(
        "eta_degenerate_vs_linear_joint_se",
        joint_deviation(&eta_deg, &eta_lin),
        JOINT_AGREEMENT_GATE,
    );

    // stderr obeys CLT scaling: 4x the samples halves it
    let clt_small = (cfg.eta_samples / 20).max(MIN_SAMPLES);
    let target5 = MlpTargetSpec::new(vec![5, 16, 1], Activation::Tanh)?;
    let small = estimate_eta_nonlinear(&target5, 20, 0.1, clt_small, &base.split(60))?;
    let large = estimate_eta_nonlinear(&target5, 20, 0.1, 4 * clt_small, &base.split(61))?;
    let ratio = small.stderr / large.stderr;
    s.note("eta_nonlinear", large.value);
    s.note("eta_negative_flag", large.negative_beyond(4.0) as u8 as f64);
    s.at_most("clt_stderr_ratio_high", ratio, 2.4);
    s.at_least("clt_stderr_ratio_low", ratio, 1.6);
    Ok(s)
}

fn constructions(cfg: &SuiteConfig, base: &RngStream) -> Result<Scorer, VerifyError> {
    let mut s = Scorer::new();
    let (d, n, sigma) = (5usize, 20usize, 0.5f64);
    let iso = TaskSpec::isotropic(d, n, sigma)?;

    let eta = estimate_eta_linear(d, n, sigma, cfg.eta_samples, &base.split(0))?;
    s.note("eta_hat", eta.value);
    s.note("eta_hat_stderr", eta.stderr);
    s.note("eta_negative_flag", eta.negative_beyond(4.0) as u8 as f64);

    let good = construct_gd_minimizer(d, eta.value);
    let ratio =
        stationarity_check(&good, &iso, cfg.stationarity_samples, &base.split(1))?;
    s.at_most("stationarity_isotropic_se", ratio, STDERR_GATE);

    let perturbed = construct_gd_minimizer(d, 1.5 * eta.value);
    let ratio_bad =
        stationarity_check(&perturbed, &iso, cfg.stationarity_samples, &base.split(1))?;
    s.at_least("stationarity_perturbed_se", ratio_bad, SENSITIVITY_GATE);

    // structural identities of the construction itself
    let st = structure_check(&reduce(&good), eta.value, None)?;
    s.at_most("construction_wx_ratio", st.wx_ratio, 1e-12);
    s.at_most("construction_ay_ratio", st.ay_ratio, 1e-12);
    s.at_most("construction_gd_matrix_err", st.gd_matrix_target_err, 1e-12);

    // preconditioned analogue on a random covariance
    let sigma_mat = sample_spd(d, 0.25, 4.0, &base.split(2))?;
    let skewed = TaskSpec::skewed(sigma_mat.clone(), n, sigma)?;
    let eta_skew = estimate_eta_skewed(&sigma_mat, n, sigma, cfg.eta_samples, &base.split(3))?;
    s.note("eta_hat_skewed", eta_skew.value);
    let precond_construction = construct_preconditioned_minimizer(&sigma_mat, eta_skew.value)?;
    let ratio_skew = stationarity_check(
        &precond_construction,
        &skewed,
        cfg.stationarity_samples,
        &base.split(4),
    )?;
    s.at_most("stationarity_skewed_se", ratio_skew, STDERR_GATE);

    let inv = sigma_mat.inverse()?;
    let stp = structure_check(&reduce(&precond_construction), eta_skew.value, Some(&inv))?;
    s.at_most("preconditioned_gd_matrix_err", stp.gd_matrix_target_err, 1e-10);
    Ok(s)
}

struct TrainOutcome {
    r_squared: f64,
    max_rel_err: f64,
    wx_ratio: f64,
    ay_ratio: f64,
    gd_matrix_target_err: f64,
    eta_implied: f64,
    model_loss: f64,
    construction_loss: f64,
    loss_gap: f64,
    final_train_loss: f64,
    construction_stationarity_se: f64,
}

impl TrainOutcome {
    /// Disambiguate a failed fit: a model whose loss sits above the
    /// construction's is an optimization gap; one that matches the optimal
    /// loss while predicting differently would contradict the theory.
    fn diagnose(&self, r2_gate: f64, s: &mut Scorer) {
        let below = self.r_squared < r2_gate;
        let loss_explains = self.loss_gap > LOSS_GAP_GATE;
        s.note("optimization_gap_flag", (below && loss_explains) as u8 as f64);
        s.note("theory_violation_flag", (below && !loss_explains) as u8 as f64);
    }
}

fn train_and_score(
    spec: &TaskSpec,
    eta: f64,
    preconditioner: Option<&SpdMatrix>,
    construction: &LsaParams,
    cfg: &SuiteConfig,
    step_size: f64,
    base: &RngStream,
) -> Result<TrainOutcome, VerifyError> {
    let tc = TrainConfig {
        optimizer: Optimizer::Adam,
        step_size,
        steps: cfg.train_steps,
        batch_size: cfg.train_batch_size,
        init_scale: default_init_scale(spec.d),
        seed: base.split(100).stream_id(),
        reduced: false,
    };
    let report = train(spec, &tc)?;
    let fit = compare_to_gd(
        &report.final_reduced,
        eta,
        preconditioner,
        spec,
        cfg.eval_prompts,
        &base.split(101),
    )?;
    let st = structure_check(&report.final_reduced, eta, preconditioner)?;

    // shared evaluation batch for the loss comparison
    let eval = crate::tasks::sample_batch(spec, cfg.eval_prompts, &base.split(102))?;
    let model_loss = empirical_loss(&report.final_reduced, &eval);
    let construction_loss = empirical_loss(&reduce(construction), &eval);
    // the full pipeline also re-checks stationarity of the closed form
    let construction_stationarity_se =
        stationarity_check(construction, spec, cfg.stationarity_samples, &base.split(103))?;
    Ok(TrainOutcome {
        r_squared: fit.r_squared,
        max_rel_err: fit.max_rel_err,
        wx_ratio: st.wx_ratio,
        ay_ratio: st.ay_ratio,
        gd_matrix_target_err: st.gd_matrix_target_err,
        eta_implied: st.eta_implied,
        model_loss,
        construction_loss,
        loss_gap: (model_loss / construction_loss - 1.0).abs(),
        final_train_loss: report.final_loss(),
        construction_stationarity_se,
    })
}

fn train_isotropic(cfg: &SuiteConfig, base: &RngStream) -> Result<Scorer, VerifyError> {
    let mut s = Scorer::new();
    let (d, n, sigma) = (5usize, 20usize, 0.5f64);
    let spec = TaskSpec::isotropic(d, n, sigma)?;
    let eta = estimate_eta_linear(d, n, sigma, cfg.eta_samples, &base.split(0))?;
    s.note("eta_hat", eta.value);
    let construction = construct_gd_minimizer(d, eta.value);
    let out = train_and_score(&spec, eta.value, None, &construction, cfg, cfg.train_step_size, base)?;
    s.at_least("r_squared", out.r_squared, R2_GATE_LINEAR);
    s.at_most("wx_ratio", out.wx_ratio, STRUCTURE_GATE_LINEAR);
    s.at_most("ay_ratio", out.ay_ratio, STRUCTURE_GATE_LINEAR);
    s.at_most("gd_matrix_target_err", out.gd_matrix_target_err, STRUCTURE_GATE_LINEAR);
    s.at_most("loss_gap", out.loss_gap, LOSS_GAP_GATE);
    s.note("eta_implied", out.eta_implied);
    s.note("model_loss", out.model_loss);
    s.note("construction_loss", out.construction_loss);
    s.note("final_train_loss", out.final_train_loss);
    s.note("max_rel_err", out.max_rel_err);
    s.at_most("construction_stationarity_se", out.construction_stationarity_se, STDERR_GATE);
    out.diagnose(R2_GATE_LINEAR, &mut s);
    Ok(s)
}

fn train_skewed(cfg: &SuiteConfig, base: &RngStream) -> Result<Scorer, VerifyError> {
    let mut s = Scorer::new();
    let (d, n, sigma) = (5usize, 20usize, 0.5f64);
    let sigma_mat = sample_spd(d, 0.25, 4.0, &base.split(200))?;
    let spec = TaskSpec::skewed(sigma_mat.clone(), n, sigma)?;
    let eta = estimate_eta_skewed(&sigma_mat, n, sigma, cfg.eta_samples, &base.split(0))?;
    s.note("eta_hat", eta.value);
    let inv = sigma_mat.inverse()?;
    let construction = construct_preconditioned_minimizer(&sigma_mat, eta.value)?;
    let out = train_and_score(&spec, eta.value, Some(&inv), &construction, cfg, cfg.train_step_size_skewed, base)?;
    s.at_least("r_squared", out.r_squared, R2_GATE_LINEAR);
    s.at_most("gd_matrix_target_err", out.gd_matrix_target_err, STRUCTURE_GATE_LINEAR);
    s.at_most("loss_gap", out.loss_gap, LOSS_GAP_GATE);
    s.note("wx_ratio", out.wx_ratio);
    s.note("ay_ratio", out.ay_ratio);
    s.note("eta_implied", out.eta_implied);
    s.note("model_loss", out.model_loss);
    s.note("construction_loss", out.construction_loss);
    s.note("sigma_condition", sigma_mat.condition_estimate());
    s.at_most("construction_stationarity_se", out.construction_stationarity_se, STDERR_GATE);
    out.diagnose(R2_GATE_LINEAR, &mut s);
    Ok(s)
}

fn train_nonlinear(cfg: &SuiteConfig, base: &RngStream) -> Result<Scorer, VerifyError> {
    let mut s = Scorer::new();
    let (n, sigma) = (20usize, 0.1f64);
    let target = MlpTargetSpec::new(vec![5, 16, 1], Activation::Tanh)?;
    let spec = TaskSpec::nonlinear(target.clone(), n, sigma)?;
    let eta = estimate_eta_nonlinear(&target, n, sigma, cfg.eta_samples, &base.split(0))?;
    s.note("eta_hat", eta.value);
    let construction = construct_gd_minimizer(5, eta.value);
    let out = train_and_score(&spec, eta.value, None, &construction, cfg, cfg.train_step_size, base)?;
    s.at_least("r_squared", out.r_squared, R2_GATE_NONLINEAR);
    s.at_most("wx_ratio", out.wx_ratio, STRUCTURE_GATE_NONLINEAR);
    s.at_most("ay_ratio", out.ay_ratio, STRUCTURE_GATE_NONLINEAR);
    s.at_most("gd_matrix_target_err", out.gd_matrix_target_err, STRUCTURE_GATE_NONLINEAR);
    s.note("loss_gap", out.loss_gap);
    s.note("eta_implied", out.eta_implied);
    s.note("model_loss", out.model_loss);
    s.note("construction_loss", out.construction_loss);
    s.at_most("construction_stationarity_se", out.construction_stationarity_se, STDERR_GATE);
    out.diagnose(R2_GATE_NONLINEAR, &mut s);

    // degenerate-family cross-check at the same (n, sigma)
    let degenerate = MlpTargetSpec::new(vec![5, 1], Activation::Tanh)?;
    let eta_deg = estimate_eta_nonlinear(&degenerate, n, sigma, cfg.eta_samples, &base.split(300))?;
    let eta_lin = estimate_eta_linear(5, n, sigma, cfg.eta_samples, &base.split(301))?;
    s.at_most(
        "eta_degenerate_vs_linear_joint_se",
        joint_deviation(&eta_deg, &eta_lin),
        JOINT_AGREEMENT_GATE,
    );
    Ok(s)
}
