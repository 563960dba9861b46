//! The asynchronous broadcast coordinate-descent engine.
//!
//! Time is modeled by a global clock: at each tick one agent, drawn uniformly
//! at random (the i.i.d. Poisson-clock model), updates its own block and
//! broadcasts it. Broadcast is simulated with shared-state semantics: the
//! waking agent always reads the latest blocks of its neighbors, with no
//! message delay or loss. A run is a single logical thread; independent runs
//! (different seeds) can execute in parallel over shared immutable specs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{fit_local_model, LossModel, ModelPropagationLoss};
use crate::objective::{ModelStack, ObjectiveSpec};
use crate::privacy::{sample_laplace, sample_noise, NoiseMechanism, PrivacyLedger};
use crate::vecops;

/// The realized sequence of agent wake-ups for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    n: usize,
    wakeups: Vec<usize>,
}

impl Schedule {
    /// T i.i.d. uniform draws over the agents, reproducible from the rng.
    pub fn draw(n: usize, t: usize, rng: &mut impl Rng) -> Self {
        assert!(n >= 1);
        let wakeups = (0..t).map(|_| rng.gen_range(0..n)).collect();
        Schedule { n, wakeups }
    }

    pub fn from_wakeups(n: usize, wakeups: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = wakeups.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, n });
        }
        Ok(Schedule { n, wakeups })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.wakeups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wakeups.is_empty()
    }

    pub fn wakeups(&self) -> &[usize] {
        &self.wakeups
    }

    /// Global ticks at which `agent` wakes up, ascending.
    pub fn ticks_for(&self, agent: usize) -> Vec<usize> {
        self.wakeups
            .iter()
            .enumerate()
            .filter(|&(_, &i)| i == agent)
            .map(|(t, _)| t)
            .collect()
    }
}

/// Solver mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    NonPrivate,
    PrivateLaplace,
    PrivateGaussian,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non-private" => Ok(Mode::NonPrivate),
            "private-laplace" => Ok(Mode::PrivateLaplace),
            "private-gaussian" => Ok(Mode::PrivateGaussian),
            other => Err(Error::InvalidInput(format!("unknown mode {other:?}"))),
        }
    }
}

/// Initial stack policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WarmStart {
    Zeros,
    Constant(f64),
    /// Each agent starts from its fitted local model.
    LocalModels,
    /// Perturbed local models smoothed by non-private model propagation.
    /// `lambda_floor` raises the pre-training regularizer to
    /// `max(lambda_i, lambda_floor)` so the released anchor's sensitivity
    /// shrinks with the dataset size; 0 keeps each agent's own lambda_i.
    PrivatePropagation { eps: f64, lambda_floor: f64 },
}

impl std::str::FromStr for WarmStart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |e: std::num::ParseFloatError| Error::InvalidInput(format!("{e}"));
        if s == "zeros" {
            Ok(WarmStart::Zeros)
        } else if s == "local-models" {
            Ok(WarmStart::LocalModels)
        } else if let Some(v) = s.strip_prefix("constant:") {
            Ok(WarmStart::Constant(v.parse().map_err(bad)?))
        } else if let Some(v) = s.strip_prefix("private-propagation:") {
            let (eps, floor) = v.split_once(':').unwrap_or((v, "0"));
            Ok(WarmStart::PrivatePropagation {
                eps: eps.parse().map_err(bad)?,
                lambda_floor: floor.parse().map_err(bad)?,
            })
        } else {
            Err(Error::InvalidInput(format!("unknown warm start {s:?}")))
        }
    }
}

/// How per-update budgets are planned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Allocation {
    /// Equal allocations inverted through the composition bound.
    Uniform,
    /// Schedule-aware allocation decaying with the contraction factor.
    Optimal,
}

impl std::str::FromStr for Allocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Allocation::Uniform),
            "optimal" => Ok(Allocation::Optimal),
            other => Err(Error::InvalidInput(format!("unknown allocation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stopping {
    /// Run all ticks; exhausted agents go silent individually.
    TickCount,
    /// Additionally stop the whole run once every agent is exhausted.
    BudgetExhausted,
}

/// Everything one run needs beyond the objective itself.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub total_ticks: usize,
    pub seed: u64,
    pub warm_start: WarmStart,
    pub allocation: Allocation,
    pub stopping: Stopping,
    pub eps_bar: f64,
    pub delta_bar: f64,
    /// T_i; defaults to total_ticks / n (at least 1). Ignored by the
    /// optimal allocation, which spends on the realized schedule.
    pub updates_per_agent: Option<usize>,
    /// Per-update delta for the Gaussian mechanism.
    pub gaussian_delta_step: f64,
    /// Record metrics every this many ticks; 0 means every n ticks.
    pub metrics_stride: usize,
    pub record_trajectory: bool,
    /// Tolerance and iteration cap for local-model fits in warm starts.
    pub fit_tol: f64,
    pub fit_max_iters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::NonPrivate,
            total_ticks: 0,
            seed: 0,
            warm_start: WarmStart::Zeros,
            allocation: Allocation::Uniform,
            stopping: Stopping::TickCount,
            eps_bar: 1.0,
            delta_bar: 0.0,
            updates_per_agent: None,
            gaussian_delta_step: 1e-5,
            metrics_stride: 0,
            record_trajectory: false,
            fit_tol: 1e-8,
            fit_max_iters: 200_000,
        }
    }
}

impl RunConfig {
    /// Flat `key = value` lines, the on-disk config format.
    pub fn to_key_values(&self) -> String {
        let mode = match self.mode {
            Mode::NonPrivate => "non-private",
            Mode::PrivateLaplace => "private-laplace",
            Mode::PrivateGaussian => "private-gaussian",
        };
        let warm = match self.warm_start {
            WarmStart::Zeros => "zeros".to_string(),
            WarmStart::Constant(v) => format!("constant:{v}"),
            WarmStart::LocalModels => "local-models".to_string(),
            WarmStart::PrivatePropagation { eps, lambda_floor } => {
                format!("private-propagation:{eps}:{lambda_floor}")
            }
        };
        let allocation = match self.allocation {
            Allocation::Uniform => "uniform",
            Allocation::Optimal => "optimal",
        };
        let stopping = match self.stopping {
            Stopping::TickCount => "tick-count",
            Stopping::BudgetExhausted => "budget-exhausted",
        };
        let updates = match self.updates_per_agent {
            Some(t) => t.to_string(),
            None => "auto".to_string(),
        };
        format!(
            "mode = {mode}\nticks = {}\nseed = {}\nwarm_start = {warm}\n\
             allocation = {allocation}\nstopping = {stopping}\neps_bar = {}\n\
             delta_bar = {}\nupdates_per_agent = {updates}\ngaussian_delta_step = {}\n\
             metrics_stride = {}\nrecord_trajectory = {}\nfit_tol = {}\nfit_max_iters = {}\n",
            self.total_ticks,
            self.seed,
            self.eps_bar,
            self.delta_bar,
            self.gaussian_delta_step,
            self.metrics_stride,
            self.record_trajectory,
            self.fit_tol,
            self.fit_max_iters,
        )
    }

    /// Parses the format written by [`Self::to_key_values`]. Unknown keys are
    /// rejected; missing keys keep their defaults.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            let parse_err = |msg: String| Error::Parse { line: lineno, msg };
            match key {
                "mode" => {
                    config.mode = value.parse().map_err(|e| parse_err(format!("{e}")))?
                }
                "ticks" => {
                    config.total_ticks =
                        value.parse().map_err(|e| parse_err(format!("{e}")))?
                }
                "seed" => config.seed = value.parse().map_err(|e| parse_err(format!("{e}")))?,
                "warm_start" => {
                    config.warm_start = value.parse().map_err(|e| parse_err(format!("{e}")))?
                }
                "allocation" => {
                    config.allocation = value.parse().map_err(|e| parse_err(format!("{e}")))?
                }
                "stopping" => {
                    config.stopping = match value {
                        "tick-count" => Stopping::TickCount,
                        "budget-exhausted" => Stopping::BudgetExhausted,
                        other => return Err(parse_err(format!("unknown stopping {other:?}"))),
                    }
                }
                "eps_bar" => {
                    config.eps_bar = value.parse().map_err(|e| parse_err(format!("{e}")))?
                }
                "delta_bar" => {
                    config.delta_bar = value.parse().map_err(|e| parse_err(format!("{e}")))?
                }
                "updates_per_agent" => {
                    config.updates_per_agent = if value == "auto" {
                        None
                    } else {
                        Some(value.parse().map_err(|e| parse_err(format!("{e}")))?)
                    }
                }
                "gaussian_delta_step" => {
                    config.gaussian_delta_step =
                        value.parse().map_err(|e| parse_err(format!("{e}")))?
                }
                "metrics_stride" => {
                    config.metrics_stride =
                        value.parse().map_err(|e| parse_err(format!("{e}")))?
                }
                "record_trajectory" => {
                    config.record_trajectory =
                        value.parse().map_err(|e| parse_err(format!("{e}")))?
                }
                "fit_tol" => {
                    config.fit_tol = value.parse().map_err(|e| parse_err(format!("{e}")))?
                }
                "fit_max_iters" => {
                    config.fit_max_iters =
                        value.parse().map_err(|e| parse_err(format!("{e}")))?
                }
                other => return Err(parse_err(format!("unknown key {other:?}"))),
            }
        }
        Ok(config)
    }
}

/// One metrics checkpoint of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub tick: usize,
    pub objective: f64,
    pub mean_test_metric: Option<f64>,
    pub transmissions_cumulative: u64,
    pub budget_spent_max: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
    pub transmissions_total: u64,
    pub updates_per_agent: Vec<usize>,
    pub skipped_isolated: Vec<usize>,
}

impl RunMetrics {
    /// CSV columns `(tick, objective, mean_test_metric,
    /// transmissions_cumulative, budget_spent_max)`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(
            "tick,objective,mean_test_metric,transmissions_cumulative,budget_spent_max\n",
        );
        for row in &self.rows {
            let metric = row
                .mean_test_metric
                .map(|m| format!("{m}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.tick, row.objective, metric, row.transmissions_cumulative, row.budget_spent_max
            ));
        }
        out
    }
}

/// Everything a finished run hands back.
pub struct RunOutput {
    pub final_stack: ModelStack,
    pub trajectory: Option<Vec<ModelStack>>,
    pub metrics: RunMetrics,
    pub ledgers: Option<Vec<PrivacyLedger>>,
    pub schedule: Schedule,
}

/// The contraction factor 1 - sigma / (n L_max) of the expected suboptimality
/// gap per tick.
pub fn contraction_factor(spec: &ObjectiveSpec) -> f64 {
    let denom = spec.n() as f64 * spec.l_max();
    if denom == 0.0 {
        return 1.0;
    }
    1.0 - spec.sigma_bound() / denom
}

/// Expected-gap bound after `t` ticks from an initial gap.
pub fn prop1_bound(spec: &ObjectiveSpec, q0_gap: f64, t: usize) -> f64 {
    contraction_factor(spec).powi(t as i32) * q0_gap
}

/// Which reading of the utility-loss noise term to evaluate.
///
/// The nominal bound charges `(mu D_ii c_i s_i(t))^2` per agent per tick.
/// The derivation behind it uses the expected squared norm of p-dimensional
/// per-coordinate noise, which carries an extra factor p. The two readings
/// are exposed side by side rather than silently reconciled; empirical
/// checks compare against the larger and flag when the smaller is violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundVariant {
    Nominal,
    DerivationFaithful,
}

/// Per-agent noise scales for bound evaluation.
pub enum NoiseScales {
    /// `scales[i]` constant over ticks.
    Uniform(Vec<f64>),
    /// `scales[i][t]`.
    PerTick(Vec<Vec<f64>>),
}

impl NoiseScales {
    fn at(&self, agent: usize, tick: usize) -> f64 {
        match self {
            NoiseScales::Uniform(s) => s[agent],
            NoiseScales::PerTick(s) => s[agent][tick],
        }
    }
}

/// Utility-loss bound after `t` ticks: optimization term plus the
/// noise term accumulated over ticks.
pub fn thm2_bound(
    spec: &ObjectiveSpec,
    q0_gap: f64,
    t: usize,
    scales: &NoiseScales,
    variant: BoundVariant,
) -> f64 {
    let c = contraction_factor(spec);
    let n = spec.n() as f64;
    let graph = spec.graph();
    let mut noise = 0.0;
    let mut c_pow = 1.0;
    for tick in 0..t {
        let mut inner = 0.0;
        for i in 0..spec.n() {
            let s = scales.at(i, tick);
            let scaled = spec.mu() * graph.degree(i) * graph.confidence(i) * s;
            inner += scaled * scaled;
        }
        noise += c_pow * inner;
        c_pow *= c;
    }
    let mut noise_term = noise / (n * spec.l_min());
    if variant == BoundVariant::DerivationFaithful {
        noise_term *= spec.p() as f64;
    }
    prop1_bound(spec, q0_gap, t) + noise_term
}

/// Closed form of the noise term when every agent keeps a constant scale:
/// (a / rho) * (1 - (1 - rho)^t).
pub fn thm2_noise_term_closed_form(
    spec: &ObjectiveSpec,
    t: usize,
    per_agent_scales: &[f64],
    variant: BoundVariant,
) -> f64 {
    let graph = spec.graph();
    let n = spec.n() as f64;
    let mut a = 0.0;
    for i in 0..spec.n() {
        let scaled = spec.mu() * graph.degree(i) * graph.confidence(i) * per_agent_scales[i];
        a += scaled * scaled;
    }
    a /= n * spec.l_min();
    if variant == BoundVariant::DerivationFaithful {
        a *= spec.p() as f64;
    }
    let rho = 1.0 - contraction_factor(spec);
    a / rho * (1.0 - (1.0 - rho).powi(t as i32))
}

/// One block coordinate update of agent `i`:
/// `Theta_i <- Theta_i - (1/L_i) [grad Q(Theta)]_i`.
pub fn cd_step_in_place(spec: &ObjectiveSpec, theta: &mut ModelStack, i: usize) -> Result<()> {
    cd_step_with_gradient_noise_in_place(spec, theta, i, None)
}

/// Functional form of [`cd_step_in_place`]; only block `i` changes.
pub fn cd_step(spec: &ObjectiveSpec, theta: &ModelStack, i: usize) -> Result<ModelStack> {
    let mut out = theta.clone();
    cd_step_in_place(spec, &mut out, i)?;
    Ok(out)
}

/// The update with an explicit noise vector added to the local-loss gradient
/// (deterministic given the noise). `None` is the non-private update.
pub fn cd_step_with_gradient_noise_in_place(
    spec: &ObjectiveSpec,
    theta: &mut ModelStack,
    i: usize,
    noise: Option<&[f64]>,
) -> Result<()> {
    if i >= spec.n() {
        return Err(Error::IndexOutOfRange { index: i, n: spec.n() });
    }
    let d = spec.graph().degree(i);
    if d == 0.0 {
        return Err(Error::InvalidInput(format!(
            "agent {i} is isolated (zero degree); its block of the objective is constant"
        )));
    }
    let mut grad = spec.partial_gradient(theta, i)?;
    if let Some(eta) = noise {
        if eta.len() != spec.p() {
            return Err(Error::DimensionMismatch { expected: spec.p(), got: eta.len() });
        }
        // noise on the local gradient enters the block gradient scaled by
        // mu * c_i * D_ii
        let factor = spec.mu() * spec.graph().confidence(i) * d;
        vecops::axpy(factor, eta, &mut grad);
    }
    let step = 1.0 / spec.block_lipschitz(i);
    vecops::axpy(-step, &grad, theta.block_mut(i));
    Ok(())
}

pub fn cd_step_with_gradient_noise(
    spec: &ObjectiveSpec,
    theta: &ModelStack,
    i: usize,
    noise: &[f64],
) -> Result<ModelStack> {
    let mut out = theta.clone();
    cd_step_with_gradient_noise_in_place(spec, &mut out, i, Some(noise))?;
    Ok(out)
}

/// Samples mechanism noise at the given scale and applies the perturbed
/// update.
pub fn noisy_cd_step_in_place(
    spec: &ObjectiveSpec,
    theta: &mut ModelStack,
    i: usize,
    scale: f64,
    mechanism: NoiseMechanism,
    rng: &mut impl Rng,
) -> Result<()> {
    let eta = sample_noise(mechanism, scale, spec.p(), rng);
    cd_step_with_gradient_noise_in_place(spec, theta, i, Some(&eta))
}

/// Outcome of a ledger-driven private step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Updated,
    /// Budget exhausted: no update, nothing broadcast.
    SkippedExhausted,
}

/// Consumes one allocation from the agent's ledger and applies the perturbed
/// update; exhausted agents skip silently.
pub fn private_cd_step_in_place(
    spec: &ObjectiveSpec,
    theta: &mut ModelStack,
    i: usize,
    tick: usize,
    ledger: &mut PrivacyLedger,
    rng: &mut impl Rng,
) -> Result<StepOutcome> {
    match ledger.begin_update(tick)? {
        None => Ok(StepOutcome::SkippedExhausted),
        Some(scale) => {
            noisy_cd_step_in_place(spec, theta, i, scale, ledger.mechanism(), rng)?;
            Ok(StepOutcome::Updated)
        }
    }
}

/// Fits every agent's local model; the purely-local baseline and the
/// standard warm start.
pub fn fit_all_local_models(
    losses: &[Box<dyn LossModel>],
    tol: f64,
    max_iters: usize,
) -> Result<ModelStack> {
    let p = losses[0].dim();
    let mut stack = ModelStack::zeros(losses.len(), p);
    for (i, loss) in losses.iter().enumerate() {
        if loss.data_size() == 0 {
            continue;
        }
        let theta = fit_local_model(loss.as_ref(), tol, max_iters)?;
        stack.set_block(i, &theta)?;
    }
    Ok(stack)
}

/// Private warm start: fit each local model, perturb it once by output
/// perturbation (Laplace scale `2 L0 / (lambda m_i eps_ws)` with
/// `lambda = max(lambda_i, lambda_floor)`), then smooth the perturbed
/// anchors to convergence with non-private model-propagation updates. The
/// smoothing consumes no privacy budget. Agents without data contribute a
/// zero anchor unperturbed.
///
/// With the common choice lambda_i = 1/m_i the raw minimizer's sensitivity
/// does not shrink with m_i; a positive `lambda_floor` pre-trains the
/// anchors with heavier shrinkage so the released model's sensitivity decays
/// like 1/m_i, at the cost of anchors biased toward zero (their direction is
/// what the smoothing propagates).
pub fn warm_start_private_propagation(
    spec: &ObjectiveSpec,
    eps_ws: f64,
    lambda_floor: f64,
    fit_tol: f64,
    fit_max_iters: usize,
    rng: &mut impl Rng,
) -> Result<ModelStack> {
    if eps_ws <= 0.0 {
        return Err(Error::InvalidInput(format!("eps_ws {eps_ws} must be positive")));
    }
    if lambda_floor < 0.0 {
        return Err(Error::InvalidInput(format!(
            "lambda_floor {lambda_floor} must be nonnegative"
        )));
    }
    let n = spec.n();
    let p = spec.p();
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let loss = spec.loss(i);
        let m = loss.data_size();
        if m == 0 {
            anchors.push(vec![0.0; p]);
            continue;
        }
        let lambda = loss.regularizer().max(lambda_floor);
        if lambda <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "agent {i}: output perturbation needs lambda > 0"
            )));
        }
        let l0 = loss.point_lipschitz_l1().ok_or_else(|| {
            Error::InvalidInput(format!("agent {i}: loss declares no per-point L1 bound"))
        })?;
        let mut theta = if lambda > loss.regularizer() {
            let heavy = loss.reregularized(lambda).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "agent {i}: loss cannot be refitted under the floored regularizer"
                ))
            })?;
            fit_local_model(heavy.as_ref(), fit_tol, fit_max_iters)?
        } else {
            fit_local_model(loss, fit_tol, fit_max_iters)?
        };
        let scale = 2.0 * l0 / (lambda * m as f64 * eps_ws);
        let noise = sample_laplace(scale, p, rng);
        vecops::axpy(1.0, &noise, &mut theta);
        anchors.push(theta);
    }
    smooth_by_model_propagation(spec.graph().clone(), anchors, spec.mu())
}

/// Round-robin model-propagation sweeps until the full gradient is
/// negligible; for the quadratic propagation objective each block update is
/// the exact per-block minimizer, so this converges fast.
fn smooth_by_model_propagation(
    graph: crate::graph::NetworkGraph,
    anchors: Vec<Vec<f64>>,
    mu: f64,
) -> Result<ModelStack> {
    let losses: Vec<Box<dyn LossModel>> = anchors
        .iter()
        .map(|a| Ok(Box::new(ModelPropagationLoss::new(a.clone())?) as Box<dyn LossModel>))
        .collect::<Result<_>>()?;
    let mp_spec = ObjectiveSpec::new(graph, losses, mu)?;
    let mut stack = ModelStack::from_blocks(&anchors)?;
    let active: Vec<usize> =
        (0..mp_spec.n()).filter(|&i| mp_spec.graph().degree(i) > 0.0).collect();
    for _ in 0..5_000 {
        for &i in &active {
            cd_step_in_place(&mp_spec, &mut stack, i)?;
        }
        let grad = mp_spec.full_gradient_norm(&stack)?;
        if grad <= 1e-8 * (1.0 + stack.l2_norm()) {
            return Ok(stack);
        }
    }
    let grad = mp_spec.full_gradient_norm(&stack)?;
    Err(Error::NoConvergence { grad_norm: grad, iters: 5_000 })
}

fn build_ledgers(
    spec: &ObjectiveSpec,
    config: &RunConfig,
    schedule: &Schedule,
) -> Result<Vec<PrivacyLedger>> {
    let mechanism = match config.mode {
        Mode::PrivateLaplace => NoiseMechanism::LaplaceL1,
        Mode::PrivateGaussian => NoiseMechanism::GaussianL2,
        Mode::NonPrivate => unreachable!("ledgers are only built for private modes"),
    };
    let n = spec.n();
    let mut ledgers = Vec::with_capacity(n);
    for i in 0..n {
        let loss = spec.loss(i);
        let l0 = match mechanism {
            NoiseMechanism::LaplaceL1 => loss.point_lipschitz_l1(),
            NoiseMechanism::GaussianL2 => loss.point_lipschitz_l2(),
        }
        .ok_or_else(|| {
            Error::InvalidInput(format!(
                "agent {i}: loss declares no per-point bound for the chosen mechanism"
            ))
        })?;
        let ledger = match config.allocation {
            Allocation::Uniform => {
                let t_i = config
                    .updates_per_agent
                    .unwrap_or_else(|| (config.total_ticks / n).max(1));
                PrivacyLedger::new_uniform(
                    i,
                    config.eps_bar,
                    config.delta_bar,
                    mechanism,
                    l0,
                    loss.data_size(),
                    t_i,
                    config.gaussian_delta_step,
                )?
            }
            Allocation::Optimal => {
                let ticks = schedule.ticks_for(i);
                PrivacyLedger::new_optimal(
                    i,
                    config.eps_bar,
                    config.delta_bar,
                    mechanism,
                    l0,
                    loss.data_size(),
                    config.total_ticks,
                    contraction_factor(spec),
                    &ticks,
                    config.gaussian_delta_step,
                )?
            }
        };
        ledgers.push(ledger);
    }
    Ok(ledgers)
}

/// Simulates one run: draws the schedule, prepares the warm start and the
/// ledgers, then iterates update+broadcast ticks recording metrics.
pub fn run(
    spec: &ObjectiveSpec,
    config: &RunConfig,
    evaluator: Option<&dyn Fn(&ModelStack) -> f64>,
) -> Result<RunOutput> {
    let n = spec.n();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let schedule = Schedule::draw(n, config.total_ticks, &mut rng);

    let mut theta = match config.warm_start {
        WarmStart::Zeros => ModelStack::zeros(n, spec.p()),
        WarmStart::Constant(v) => ModelStack::constant(n, spec.p(), v),
        WarmStart::LocalModels => {
            fit_all_local_models(spec.losses(), config.fit_tol, config.fit_max_iters)?
        }
        WarmStart::PrivatePropagation { eps, lambda_floor } => warm_start_private_propagation(
            spec,
            eps,
            lambda_floor,
            config.fit_tol,
            config.fit_max_iters,
            &mut rng,
        )?,
    };

    let mut ledgers = match config.mode {
        Mode::NonPrivate => None,
        _ => {
            let mut ledgers = build_ledgers(spec, config, &schedule)?;
            if let WarmStart::PrivatePropagation { eps, .. } = config.warm_start {
                for (ledger, loss) in ledgers.iter_mut().zip(spec.losses()) {
                    if loss.data_size() > 0 {
                        ledger.charge_warm_start(eps);
                    }
                }
            }
            Some(ledgers)
        }
    };

    let stride = if config.metrics_stride == 0 { n } else { config.metrics_stride };
    let mut metrics = RunMetrics {
        updates_per_agent: vec![0; n],
        ..Default::default()
    };
    let mut trajectory = config.record_trajectory.then(|| vec![theta.clone()]);
    let mut transmissions: u64 = 0;

    let record =
        |metrics: &mut RunMetrics, tick: usize, theta: &ModelStack, tx: u64,
         ledgers: &Option<Vec<PrivacyLedger>>|
         -> Result<()> {
            let budget_spent_max = match ledgers {
                None => 0.0,
                Some(ls) => {
                    let mut worst = 0.0f64;
                    for l in ls {
                        worst = worst.max(l.composed_spent()?);
                    }
                    worst
                }
            };
            metrics.rows.push(MetricsRow {
                tick,
                objective: spec.objective_value(theta)?,
                mean_test_metric: evaluator.map(|f| f(theta)),
                transmissions_cumulative: tx,
                budget_spent_max,
            });
            Ok(())
        };

    record(&mut metrics, 0, &theta, 0, &ledgers)?;

    let mut isolated_seen = vec![false; n];
    for (tick, &agent) in schedule.wakeups().iter().enumerate() {
        if spec.graph().degree(agent) == 0.0 {
            if !isolated_seen[agent] {
                isolated_seen[agent] = true;
                metrics.skipped_isolated.push(agent);
            }
        } else {
            let updated = match (&config.mode, &mut ledgers) {
                (Mode::NonPrivate, _) => {
                    cd_step_in_place(spec, &mut theta, agent)?;
                    true
                }
                (_, Some(ledgers)) => matches!(
                    private_cd_step_in_place(
                        spec,
                        &mut theta,
                        agent,
                        tick,
                        &mut ledgers[agent],
                        &mut rng,
                    )?,
                    StepOutcome::Updated
                ),
                (_, None) => unreachable!(),
            };
            if updated {
                metrics.updates_per_agent[agent] += 1;
                transmissions += spec.graph().neighbors(agent)?.len() as u64;
            }
        }
        if let Some(t) = trajectory.as_mut() {
            t.push(theta.clone());
        }
        let done = tick + 1 == schedule.len();
        if (tick + 1) % stride == 0 || done {
            record(&mut metrics, tick + 1, &theta, transmissions, &ledgers)?;
        }
        if config.stopping == Stopping::BudgetExhausted {
            if let Some(ls) = &ledgers {
                if ls.iter().all(|l| l.is_exhausted()) {
                    if !((tick + 1) % stride == 0 || done) {
                        record(&mut metrics, tick + 1, &theta, transmissions, &ledgers)?;
                    }
                    break;
                }
            }
        }
    }
    metrics.transmissions_total = transmissions;

    Ok(RunOutput {
        final_stack: theta,
        trajectory,
        metrics,
        ledgers,
        schedule,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NetworkGraph;
    use crate::losses::{LocalDataset, LogisticLoss, ModelPropagationLoss};
    use crate::privacy::composed_epsilon;

    fn mp_spec(n: usize, p: usize, mu: f64, seed: u64) -> ObjectiveSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if j == i + 1 || rng.gen_bool(0.5) {
                    edges.push((i, j, rng.gen_range(0.3..1.2)));
                }
            }
        }
        let graph = NetworkGraph::from_edges(n, &edges).unwrap();
        let conf: Vec<f64> = (0..n).map(|_| rng.gen_range(0.3..1.0)).collect();
        let graph = graph.with_confidences(conf).unwrap();
        let losses: Vec<Box<dyn LossModel>> = (0..n)
            .map(|_| {
                let anchor: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Box::new(ModelPropagationLoss::new(anchor).unwrap()) as Box<dyn LossModel>
            })
            .collect();
        ObjectiveSpec::new(graph, losses, mu).unwrap()
    }

    fn logistic_spec(n: usize, p: usize, mu: f64, seed: u64) -> ObjectiveSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if j == i + 1 || rng.gen_bool(0.5) {
                    edges.push((i, j, rng.gen_range(0.3..1.2)));
                }
            }
        }
        let graph = NetworkGraph::from_edges(n, &edges).unwrap();
        let losses: Vec<Box<dyn LossModel>> = (0..n)
            .map(|_| {
                let m = rng.gen_range(5..12);
                let points: Vec<(Vec<f64>, f64)> = (0..m)
                    .map(|_| {
                        let x: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let y = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                        (x, y)
                    })
                    .collect();
                let lambda = 1.0 / m as f64;
                Box::new(LogisticLoss::new(LocalDataset::new(points, lambda).unwrap()).unwrap())
                    as Box<dyn LossModel>
            })
            .collect();
        ObjectiveSpec::new(graph, losses, mu).unwrap()
    }

    /// The averaged form of the update:
    /// (1-alpha) Theta_i + alpha (sum_j W_ij/D_ii Theta_j - mu c_i grad L_i).
    fn cd_step_averaged_form(spec: &ObjectiveSpec, theta: &ModelStack, i: usize) -> Vec<f64> {
        let g = spec.graph();
        let d = g.degree(i);
        let c = g.confidence(i);
        let alpha = 1.0 / (1.0 + spec.mu() * c * spec.loss(i).lipschitz_grad());
        let mut avg = vec![0.0; spec.p()];
        for &(j, w) in g.neighbors(i).unwrap() {
            vecops::axpy(w / d, theta.block(j), &mut avg);
        }
        let lg = spec.loss(i).gradient(theta.block(i));
        theta
            .block(i)
            .iter()
            .zip(avg.iter().zip(&lg))
            .map(|(t, (a, lgk))| (1.0 - alpha) * t + alpha * (a - spec.mu() * c * lgk))
            .collect()
    }

    #[test]
    fn schedule_single_agent_always_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = Schedule::draw(1, 25, &mut rng);
        assert!(s.wakeups().iter().all(|&i| i == 0));
    }

    #[test]
    fn schedule_frequencies_near_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 4;
        let t = 100_000;
        let s = Schedule::draw(n, t, &mut rng);
        let expected = t as f64 / n as f64;
        let se = (t as f64 * (1.0 / n as f64) * (1.0 - 1.0 / n as f64)).sqrt();
        for agent in 0..n {
            let count = s.ticks_for(agent).len() as f64;
            assert!(
                (count - expected).abs() <= 3.0 * se,
                "agent {agent}: {count} vs {expected}"
            );
        }
    }

    #[test]
    fn schedule_is_deterministic_from_seed() {
        let a = Schedule::draw(7, 500, &mut ChaCha8Rng::seed_from_u64(9));
        let b = Schedule::draw(7, 500, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn cd_step_is_fixed_point_at_minimizer() {
        let spec = mp_spec(5, 3, 1.0, 2);
        let star = spec.solve_model_propagation_exact().unwrap();
        for i in 0..5 {
            let after = cd_step(&spec, &star, i).unwrap();
            assert!(star.linf_distance(&after) < 1e-9);
        }
    }

    #[test]
    fn cd_step_two_forms_agree() {
        let spec = logistic_spec(4, 3, 0.7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..20 {
            let blocks: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect())
                .collect();
            let theta = ModelStack::from_blocks(&blocks).unwrap();
            let i = rng.gen_range(0..4);
            let gradient_form = cd_step(&spec, &theta, i).unwrap();
            let averaged = cd_step_averaged_form(&spec, &theta, i);
            for (a, b) in gradient_form.block(i).iter().zip(&averaged) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn cd_step_only_touches_block_i() {
        let spec = mp_spec(5, 2, 1.0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let blocks: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let theta = ModelStack::from_blocks(&blocks).unwrap();
        let after = cd_step(&spec, &theta, 2).unwrap();
        for i in 0..5 {
            if i != 2 {
                assert_eq!(theta.block(i), after.block(i));
            }
        }
    }

    #[test]
    fn model_propagation_step_ignores_own_block() {
        let spec = mp_spec(4, 2, 0.8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let blocks: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let theta1 = ModelStack::from_blocks(&blocks).unwrap();
        let mut theta2 = theta1.clone();
        theta2.set_block(1, &[5.0, -7.0]).unwrap();
        let after1 = cd_step(&spec, &theta1, 1).unwrap();
        let after2 = cd_step(&spec, &theta2, 1).unwrap();
        for (a, b) in after1.block(1).iter().zip(after2.block(1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cd_step_descends_by_gradient_quota() {
        let spec = logistic_spec(5, 3, 0.5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..20 {
            let blocks: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let theta = ModelStack::from_blocks(&blocks).unwrap();
            let i = rng.gen_range(0..5);
            let g = spec.partial_gradient(&theta, i).unwrap();
            let before = spec.objective_value(&theta).unwrap();
            let after = spec.objective_value(&cd_step(&spec, &theta, i).unwrap()).unwrap();
            let quota = vecops::dot(&g, &g) / (2.0 * spec.block_lipschitz(i));
            assert!(after <= before - quota + 1e-10);
        }
    }

    #[test]
    fn cd_step_rejects_isolated_agent() {
        let graph = NetworkGraph::from_edges(1, &[]).unwrap();
        let losses: Vec<Box<dyn LossModel>> =
            vec![Box::new(ModelPropagationLoss::new(vec![1.0]).unwrap())];
        let spec = ObjectiveSpec::new(graph, losses, 1.0).unwrap();
        let mut theta = ModelStack::zeros(1, 1);
        assert!(cd_step_in_place(&spec, &mut theta, 0).is_err());
    }

    #[test]
    fn noise_scale_zero_matches_plain_step() {
        let spec = mp_spec(4, 3, 1.0, 7);
        let theta = ModelStack::constant(4, 3, 0.4);
        let plain = cd_step(&spec, &theta, 2).unwrap();
        let mut noisy = theta.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        noisy_cd_step_in_place(
            &spec,
            &mut noisy,
            2,
            0.0,
            NoiseMechanism::LaplaceL1,
            &mut rng,
        )
        .unwrap();
        assert_eq!(plain, noisy);
    }

    #[test]
    fn forced_unit_noise_shifts_block_by_known_amount() {
        let spec = mp_spec(4, 3, 0.9, 8);
        let theta = ModelStack::constant(4, 3, -0.2);
        let i = 1;
        let eta = vec![1.0; 3];
        let plain = cd_step(&spec, &theta, i).unwrap();
        let noisy = cd_step_with_gradient_noise(&spec, &theta, i, &eta).unwrap();
        let g = spec.graph();
        let factor = spec.mu() * g.confidence(i) * g.degree(i) / spec.block_lipschitz(i);
        for (p, q) in plain.block(i).iter().zip(noisy.block(i)) {
            assert!((q - (p - factor)).abs() < 1e-12);
        }
    }

    #[test]
    fn private_step_mean_matches_plain_step() {
        let spec = mp_spec(4, 2, 1.0, 9);
        let theta = ModelStack::constant(4, 2, 0.3);
        let i = 2;
        let scale = 0.2;
        let plain = cd_step(&spec, &theta, i).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let reps = 10_000;
        let mut mean = vec![0.0; 2];
        for _ in 0..reps {
            let mut t = theta.clone();
            noisy_cd_step_in_place(&spec, &mut t, i, scale, NoiseMechanism::LaplaceL1, &mut rng)
                .unwrap();
            vecops::axpy(1.0 / reps as f64, t.block(i), &mut mean);
        }
        let g = spec.graph();
        let factor = spec.mu() * g.confidence(i) * g.degree(i) / spec.block_lipschitz(i);
        // per-coordinate noise on the block is factor * Laplace(scale)
        let se = factor * scale * 2.0f64.sqrt() / (reps as f64).sqrt();
        for (m, p) in mean.iter().zip(plain.block(i)) {
            assert!((m - p).abs() <= 5.0 * se, "bias {} exceeds 5 se {se}", (m - p).abs());
        }
    }

    #[test]
    fn per_step_descent_plus_noise_inequality() {
        let spec = logistic_spec(5, 3, 0.6, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let mut theta = ModelStack::zeros(5, 3);
        for tick in 0..200 {
            let i = rng.gen_range(0..5);
            let scale = 0.1;
            let eta = sample_laplace(scale, 3, &mut rng);
            let g = spec.partial_gradient(&theta, i).unwrap();
            let before = spec.objective_value(&theta).unwrap();
            cd_step_with_gradient_noise_in_place(&spec, &mut theta, i, Some(&eta)).unwrap();
            let after = spec.objective_value(&theta).unwrap();
            let gr = spec.graph();
            let scaled_eta: Vec<f64> = eta
                .iter()
                .map(|e| spec.mu() * gr.degree(i) * gr.confidence(i) * e)
                .collect();
            let bound = before - vecops::dot(&g, &g) / (2.0 * spec.l_max())
                + vecops::dot(&scaled_eta, &scaled_eta) / (2.0 * spec.l_min());
            assert!(after <= bound + 1e-10, "tick {tick}");
        }
    }

    #[test]
    fn run_zero_ticks_returns_warm_start() {
        let spec = mp_spec(4, 2, 1.0, 11);
        let config = RunConfig {
            total_ticks: 0,
            warm_start: WarmStart::Constant(0.7),
            ..RunConfig::default()
        };
        let out = run(&spec, &config, None).unwrap();
        assert_eq!(out.final_stack, ModelStack::constant(4, 2, 0.7));
        assert_eq!(out.metrics.rows.len(), 1);
        assert_eq!(out.metrics.rows[0].tick, 0);
    }

    #[test]
    fn run_converges_to_exact_model_propagation_solution() {
        let spec = mp_spec(6, 2, 1.0, 12);
        let star = spec.solve_model_propagation_exact().unwrap();
        let config = RunConfig {
            total_ticks: 200 * 6,
            seed: 123,
            ..RunConfig::default()
        };
        let out = run(&spec, &config, None).unwrap();
        assert!(out.final_stack.linf_distance(&star) <= 1e-6);
    }

    #[test]
    fn run_counts_broadcasts_per_neighborhood_size() {
        let spec = mp_spec(5, 2, 1.0, 13);
        let config = RunConfig { total_ticks: 40, seed: 5, ..RunConfig::default() };
        let out = run(&spec, &config, None).unwrap();
        let expected: u64 = out
            .schedule
            .wakeups()
            .iter()
            .map(|&i| spec.graph().neighbors(i).unwrap().len() as u64)
            .sum();
        assert_eq!(out.metrics.transmissions_total, expected);
    }

    #[test]
    fn run_is_bit_deterministic() {
        let spec = logistic_spec(5, 3, 0.9, 14);
        let config = RunConfig {
            mode: Mode::PrivateLaplace,
            total_ticks: 120,
            seed: 77,
            eps_bar: 1.0,
            delta_bar: (-5.0f64).exp(),
            updates_per_agent: Some(8),
            record_trajectory: true,
            ..RunConfig::default()
        };
        let a = run(&spec, &config, None).unwrap();
        let b = run(&spec, &config, None).unwrap();
        assert_eq!(a.final_stack, b.final_stack);
        assert_eq!(a.metrics.rows, b.metrics.rows);
        assert_eq!(
            a.trajectory.as_ref().unwrap().len(),
            b.trajectory.as_ref().unwrap().len()
        );
        assert_eq!(a.metrics.to_csv_string(), b.metrics.to_csv_string());
    }

    #[test]
    fn private_run_goes_silent_after_quota() {
        // model-propagation losses declare no L0, so use logistic ones
        let spec = logistic_spec(3, 2, 1.0, 16);
        let t_i = 4;
        let config = RunConfig {
            mode: Mode::PrivateLaplace,
            total_ticks: 600,
            seed: 3,
            eps_bar: 0.8,
            delta_bar: (-5.0f64).exp(),
            updates_per_agent: Some(t_i),
            ..RunConfig::default()
        };
        let out = run(&spec, &config, None).unwrap();
        let ledgers = out.ledgers.unwrap();
        for (i, ledger) in ledgers.iter().enumerate() {
            let wakeups = out.schedule.ticks_for(i).len();
            assert_eq!(ledger.spent().len(), wakeups.min(t_i));
            assert_eq!(out.metrics.updates_per_agent[i], wakeups.min(t_i));
            ledger.verify_budget_safety(1e-9).unwrap();
            let eps: Vec<f64> = ledger.spent().iter().map(|e| e.epsilon).collect();
            assert!(
                composed_epsilon(&eps, config.delta_bar).unwrap() <= config.eps_bar + 1e-9
            );
        }
    }

    #[test]
    fn budget_exhausted_stopping_ends_early() {
        let spec = logistic_spec(3, 2, 1.0, 17);
        let config = RunConfig {
            mode: Mode::PrivateLaplace,
            total_ticks: 5_000,
            seed: 21,
            eps_bar: 0.5,
            delta_bar: 0.0,
            updates_per_agent: Some(2),
            stopping: Stopping::BudgetExhausted,
            ..RunConfig::default()
        };
        let out = run(&spec, &config, None).unwrap();
        let last = out.metrics.rows.last().unwrap();
        assert!(last.tick < 5_000);
        assert!(out.ledgers.unwrap().iter().all(|l| l.is_exhausted()));
    }

    #[test]
    fn optimal_allocation_spends_full_budget_on_realized_schedule() {
        let spec = logistic_spec(4, 2, 0.8, 18);
        let config = RunConfig {
            mode: Mode::PrivateLaplace,
            total_ticks: 200,
            seed: 8,
            eps_bar: 0.9,
            delta_bar: (-5.0f64).exp(),
            allocation: Allocation::Optimal,
            ..RunConfig::default()
        };
        let out = run(&spec, &config, None).unwrap();
        for ledger in out.ledgers.unwrap() {
            assert!((ledger.naive_spent() - 0.9).abs() < 1e-9);
            ledger.verify_budget_safety(1e-9).unwrap();
        }
    }

    #[test]
    fn warm_start_private_propagation_zero_noise_limit() {
        let spec = logistic_spec(4, 2, 0.8, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(190);
        let private = warm_start_private_propagation(&spec, 1e12, 0.0, 1e-10, 200_000, &mut rng)
            .unwrap();
        // with effectively no noise this equals plain model propagation of
        // the exact local models
        let anchors: Vec<Vec<f64>> = (0..4)
            .map(|i| fit_local_model(spec.loss(i), 1e-10, 200_000).unwrap())
            .collect();
        let losses: Vec<Box<dyn LossModel>> = anchors
            .iter()
            .map(|a| Box::new(ModelPropagationLoss::new(a.clone()).unwrap()) as Box<dyn LossModel>)
            .collect();
        let mp = ObjectiveSpec::new(spec.graph().clone(), losses, spec.mu()).unwrap();
        let star = mp.solve_model_propagation_exact().unwrap();
        assert!(private.linf_distance(&star) <= 1e-5);
    }

    #[test]
    fn prop1_bound_basics() {
        let spec = mp_spec(5, 2, 1.0, 20);
        assert_eq!(prop1_bound(&spec, 3.5, 0), 3.5);
        let c = contraction_factor(&spec);
        assert!(c > 0.0 && c < 1.0);
        let mut last = f64::INFINITY;
        for t in [1, 5, 20, 100] {
            let b = prop1_bound(&spec, 3.5, t);
            assert!(b < last);
            last = b;
        }
    }

    #[test]
    fn thm2_bound_reduces_to_prop1_without_noise() {
        let spec = mp_spec(5, 2, 1.0, 22);
        let scales = NoiseScales::Uniform(vec![0.0; 5]);
        for t in [0, 3, 10, 50] {
            let a = thm2_bound(&spec, 2.0, t, &scales, BoundVariant::Nominal);
            let b = prop1_bound(&spec, 2.0, t);
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn thm2_uniform_noise_term_matches_closed_form() {
        let spec = mp_spec(6, 3, 1.0, 23);
        let per_agent: Vec<f64> = (0..6).map(|i| 0.02 + 0.01 * i as f64).collect();
        let scales = NoiseScales::Uniform(per_agent.clone());
        for variant in [BoundVariant::Nominal, BoundVariant::DerivationFaithful] {
            for t in [1, 7, 40, 200] {
                let series = thm2_bound(&spec, 0.0, t, &scales, variant);
                let closed = thm2_noise_term_closed_form(&spec, t, &per_agent, variant);
                assert!(
                    (series - closed).abs() <= 1e-12 * closed.abs().max(1.0),
                    "t={t}: {series} vs {closed}"
                );
            }
        }
    }

    #[test]
    fn thm2_noise_term_monotone_and_bounded() {
        let spec = mp_spec(5, 2, 1.0, 24);
        let per_agent = vec![0.1; 5];
        let scales = NoiseScales::Uniform(per_agent.clone());
        let rho = 1.0 - contraction_factor(&spec);
        let graph = spec.graph();
        let mut a = 0.0;
        for i in 0..5 {
            let s = spec.mu() * graph.degree(i) * graph.confidence(i) * 0.1;
            a += s * s;
        }
        a /= 5.0 * spec.l_min();
        let cap = a / rho;
        let mut last = 0.0;
        for t in [1, 5, 25, 125, 625] {
            let noise = thm2_bound(&spec, 0.0, t, &scales, BoundVariant::Nominal);
            assert!(noise >= last - 1e-15);
            assert!(noise <= cap + 1e-12);
            last = noise;
        }
    }

    #[test]
    fn derivation_variant_scales_nominal_by_dimension() {
        let spec = mp_spec(4, 3, 1.0, 25);
        let scales = NoiseScales::Uniform(vec![0.05; 4]);
        let nominal = thm2_bound(&spec, 0.0, 20, &scales, BoundVariant::Nominal);
        let faithful = thm2_bound(&spec, 0.0, 20, &scales, BoundVariant::DerivationFaithful);
        assert!((faithful - 3.0 * nominal).abs() < 1e-12 * faithful.max(1.0));
    }

    #[test]
    fn gaussian_mode_runs_and_accounts_delta() {
        let spec = logistic_spec(4, 2, 0.8, 44);
        let config = RunConfig {
            mode: Mode::PrivateGaussian,
            total_ticks: 80,
            seed: 10,
            eps_bar: 1.0,
            delta_bar: 1e-3,
            gaussian_delta_step: 1e-4,
            updates_per_agent: Some(4),
            ..RunConfig::default()
        };
        let out = run(&spec, &config, None).unwrap();
        for ledger in out.ledgers.unwrap() {
            ledger.verify_budget_safety(1e-9).unwrap();
            let spent = ledger.spent().len();
            assert!(spent <= 4);
            let expect = 1.0 - (1.0 - 1e-3) * (1.0 - 1e-4f64).powi(spent as i32);
            assert!((ledger.composed_delta() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_budget_recovers_nonprivate_run() {
        let spec = logistic_spec(5, 3, 0.9, 33);
        let base = RunConfig {
            total_ticks: 200,
            seed: 4,
            warm_start: WarmStart::LocalModels,
            ..RunConfig::default()
        };
        let nonprivate = run(&spec, &base, None).unwrap();
        let private_config = RunConfig {
            mode: Mode::PrivateLaplace,
            eps_bar: 1e12,
            delta_bar: 0.0,
            updates_per_agent: Some(200),
            ..base
        };
        let private = run(&spec, &private_config, None).unwrap();
        assert!(nonprivate.final_stack.linf_distance(&private.final_stack) < 1e-9);
    }

    #[test]
    fn config_key_value_round_trip() {
        let config = RunConfig {
            mode: Mode::PrivateGaussian,
            total_ticks: 512,
            seed: 99,
            warm_start: WarmStart::PrivatePropagation { eps: 0.05, lambda_floor: 0.5 },
            allocation: Allocation::Optimal,
            stopping: Stopping::BudgetExhausted,
            eps_bar: 0.25,
            delta_bar: 1e-5,
            updates_per_agent: Some(16),
            gaussian_delta_step: 1e-6,
            metrics_stride: 64,
            record_trajectory: true,
            fit_tol: 1e-9,
            fit_max_iters: 50_000,
        };
        let text = config.to_key_values();
        let parsed = RunConfig::from_key_values(&text).unwrap();
        assert_eq!(config, parsed);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(RunConfig::from_key_values("bogus = 1\n").is_err());
    }
}
