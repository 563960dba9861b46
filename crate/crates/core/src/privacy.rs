//! Noise calibration, per-agent budget accounting and allocation policies.
//!
//! An agent publishing one perturbed update with parameter `eps` spends that
//! much budget; the accumulated loss over an agent's published updates is the
//! minimum of three composition expressions (naive sum and two advanced
//! bounds), evaluated exactly as written, with no algebraic simplification.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::LocalDataset;

/// Which mechanism perturbs the local gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMechanism {
    /// Per-coordinate Laplace noise calibrated to an L1 bound.
    LaplaceL1,
    /// Per-coordinate Gaussian noise calibrated to an L2 bound.
    GaussianL2,
}

/// Laplace scale s = 2 L0 / (eps * m).
pub fn noise_scale_laplace(l0: f64, eps: f64, m: usize) -> Result<f64> {
    if l0 <= 0.0 {
        return Err(Error::InvalidInput(format!("L0 {l0} must be positive")));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidInput(format!("eps {eps} must be positive")));
    }
    if m == 0 {
        return Err(Error::InvalidInput(
            "agent with no data must not participate in private mode".into(),
        ));
    }
    Ok(2.0 * l0 / (eps * m as f64))
}

/// Gaussian scale s = 2 L0* sqrt(2 ln(2/delta)) / (eps * m); the 1/m factor
/// carries over from the same sensitivity argument as the Laplace case.
pub fn noise_scale_gaussian(l0_l2: f64, eps: f64, delta: f64, m: usize) -> Result<f64> {
    if l0_l2 <= 0.0 {
        return Err(Error::InvalidInput(format!("L0 {l0_l2} must be positive")));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidInput(format!("eps {eps} must be positive")));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "delta {delta} must lie in (0,1] for the Gaussian mechanism"
        )));
    }
    if m == 0 {
        return Err(Error::InvalidInput(
            "agent with no data must not participate in private mode".into(),
        ));
    }
    Ok(2.0 * l0_l2 * (2.0 * (2.0 / delta).ln()).sqrt() / (eps * m as f64))
}

/// p independent Laplace(0, scale) draws; scale 0 returns exact zeros.
pub fn sample_laplace(scale: f64, p: usize, rng: &mut impl Rng) -> Vec<f64> {
    assert!(scale >= 0.0, "noise scale must be nonnegative");
    if scale == 0.0 {
        return vec![0.0; p];
    }
    (0..p)
        .map(|_| {
            // inverse CDF from u in (-1/2, 1/2)
            let u: f64 = rng.gen::<f64>() - 0.5;
            -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
        })
        .collect()
}

/// p independent N(0, scale^2) draws; scale 0 returns exact zeros.
pub fn sample_gaussian(scale: f64, p: usize, rng: &mut impl Rng) -> Vec<f64> {
    assert!(scale >= 0.0, "noise scale must be nonnegative");
    if scale == 0.0 {
        return vec![0.0; p];
    }
    // Box-Muller, one draw per pair
    let mut out = Vec::with_capacity(p);
    while out.len() < p {
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        out.push(scale * r * c);
        if out.len() < p {
            out.push(scale * r * s);
        }
    }
    out
}

pub fn sample_noise(
    mechanism: NoiseMechanism,
    scale: f64,
    p: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    match mechanism {
        NoiseMechanism::LaplaceL1 => sample_laplace(scale, p, rng),
        NoiseMechanism::GaussianL2 => sample_gaussian(scale, p, rng),
    }
}

/// Total epsilon consumed by a sequence of per-update allocations: the
/// minimum of the naive sum and the two advanced composition expressions.
/// With `delta_bar = 0` only the naive sum applies. Zero entries are
/// no-ops and are skipped; negative entries are rejected.
pub fn composed_epsilon(allocations: &[f64], delta_bar: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&delta_bar) {
        return Err(Error::InvalidInput(format!(
            "delta_bar {delta_bar} must lie in [0,1]"
        )));
    }
    if let Some(bad) = allocations.iter().find(|&&e| e < 0.0 || !e.is_finite()) {
        return Err(Error::InvalidInput(format!("invalid allocation {bad}")));
    }
    let eps: Vec<f64> = allocations.iter().copied().filter(|&e| e > 0.0).collect();
    if eps.is_empty() {
        return Ok(0.0);
    }
    let naive: f64 = eps.iter().sum();
    if delta_bar == 0.0 {
        return Ok(naive);
    }
    let common: f64 = eps
        .iter()
        .map(|&e| (e.exp() - 1.0) * e / (e.exp() + 1.0))
        .sum();
    let sum_sq: f64 = eps.iter().map(|&e| e * e).sum();
    let advanced_e = common
        + (eps.iter().map(|&e| 2.0 * e * e).sum::<f64>()
            * (std::f64::consts::E + sum_sq.sqrt() / delta_bar).ln())
        .sqrt();
    let advanced_plain = common
        + (eps.iter().map(|&e| 2.0 * e * e).sum::<f64>() * (1.0 / delta_bar).ln()).sqrt();
    Ok(naive.min(advanced_e).min(advanced_plain))
}

/// Overall delta of a Gaussian-mechanism sequence:
/// 1 - (1 - delta_bar) * prod_t (1 - delta_t).
pub fn composed_delta(delta_bar: f64, per_step_deltas: &[f64]) -> f64 {
    let product: f64 = per_step_deltas.iter().map(|d| 1.0 - d).product();
    1.0 - (1.0 - delta_bar) * product
}

/// Splits `eps_bar` into `t_i` equal per-update allocations such that their
/// composition equals `eps_bar`, by monotone bisection.
pub fn allocate_uniform(eps_bar: f64, t_i: usize, delta_bar: f64) -> Result<Vec<f64>> {
    if eps_bar <= 0.0 {
        return Err(Error::InvalidInput(format!("eps_bar {eps_bar} must be positive")));
    }
    if t_i == 0 {
        return Err(Error::InvalidInput("t_i must be at least 1".into()));
    }
    if delta_bar == 0.0 || t_i == 1 {
        return Ok(vec![eps_bar / t_i as f64; t_i]);
    }
    let composed = |e: f64| -> Result<f64> { composed_epsilon(&vec![e; t_i], delta_bar) };
    // composed is monotone increasing in the per-step value; the naive sum
    // guarantees composed(eps_bar / t_i) <= eps_bar
    let mut lo = eps_bar / t_i as f64;
    if composed(lo)? >= eps_bar {
        return Ok(vec![lo; t_i]);
    }
    let mut hi = eps_bar;
    let mut guard = 0;
    while composed(hi)? < eps_bar {
        hi *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(Error::NoConvergence { grad_norm: hi, iters: guard });
        }
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let v = composed(mid)?;
        if (v - eps_bar).abs() <= 1e-12 * eps_bar.max(1.0) {
            return Ok(vec![mid; t_i]);
        }
        if v < eps_bar {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let v = composed(mid)?;
    if (v - eps_bar).abs() <= 1e-9 {
        Ok(vec![mid; t_i])
    } else {
        Err(Error::NoConvergence { grad_norm: (v - eps_bar).abs(), iters: 200 })
    }
}

/// Budget allocation minimizing the utility-loss noise term for a known
/// wake-up schedule: eps_i(t) proportional to C^(t/3) on the schedule's
/// ticks, renormalized so the nonzero entries sum to eps_bar. Returns a
/// length-`t_total` vector with zeros off the schedule.
pub fn allocate_optimal(
    eps_bar: f64,
    t_total: usize,
    contraction: f64,
    schedule_ticks: &[usize],
) -> Result<Vec<f64>> {
    if eps_bar <= 0.0 {
        return Err(Error::InvalidInput(format!("eps_bar {eps_bar} must be positive")));
    }
    if !(contraction > 0.0 && contraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "contraction factor {contraction} must lie in (0,1)"
        )));
    }
    if schedule_ticks.is_empty() {
        return Err(Error::InvalidInput("empty wake-up schedule".into()));
    }
    if let Some(&t) = schedule_ticks.iter().find(|&&t| t >= t_total) {
        return Err(Error::IndexOutOfRange { index: t, n: t_total });
    }
    let c = contraction;
    let front = (c.powf(1.0 / 3.0) - 1.0) / (c.powf(t_total as f64 / 3.0) - 1.0);
    let rate = |t: usize| front * c.powf(t as f64 / 3.0);
    let lambda: f64 = schedule_ticks.iter().map(|&t| rate(t)).sum();
    let mut out = vec![0.0; t_total];
    for &t in schedule_ticks {
        if out[t] != 0.0 {
            return Err(Error::InvalidInput(format!("duplicate schedule tick {t}")));
        }
        out[t] = rate(t) * eps_bar / lambda;
    }
    Ok(out)
}

/// The schedule-weighted noise objective sum_t C^t / eps(t)^2 that the
/// optimal allocation minimizes (zero entries are skipped).
pub fn allocation_noise_objective(contraction: f64, allocations: &[f64]) -> f64 {
    allocations
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > 0.0)
        .map(|(t, &e)| contraction.powi(t as i32) / (e * e))
        .sum()
}

/// Local-DP baseline: perturbs every feature coordinate with Laplace noise of
/// scale (coordinate range * p) / eps, leaving labels untouched.
pub fn perturb_dataset_local_dp(
    dataset: &LocalDataset,
    eps: f64,
    feature_bounds: &[(f64, f64)],
    rng: &mut impl Rng,
) -> Result<LocalDataset> {
    if eps <= 0.0 {
        return Err(Error::InvalidInput(format!("eps {eps} must be positive")));
    }
    let p = feature_bounds.len();
    if let Some(dim) = dataset.dim() {
        if dim != p {
            return Err(Error::DimensionMismatch { expected: dim, got: p });
        }
    }
    let mut points = Vec::with_capacity(dataset.size());
    for (x, y) in dataset.points() {
        let mut noisy = Vec::with_capacity(p);
        for (k, (&xi, &(lo, hi))) in x.iter().zip(feature_bounds).enumerate() {
            if xi < lo || xi > hi {
                return Err(Error::InvalidInput(format!(
                    "feature coordinate {k} value {xi} outside declared bounds [{lo}, {hi}]"
                )));
            }
            let scale = (hi - lo) * p as f64 / eps;
            noisy.push(xi + sample_laplace(scale, 1, rng)[0]);
        }
        points.push((noisy, *y));
    }
    LocalDataset::new(points, dataset.lambda())
}

/// One realized private update in an agent's ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct SpentEvent {
    pub tick: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub noise_scale: f64,
}

#[derive(Debug, Clone)]
enum Plan {
    /// Consumed in wake-up order regardless of the global tick.
    Sequential { allocations: Vec<f64>, next: usize },
    /// Keyed by global tick (requires the schedule known in advance).
    ByTick { allocations: HashMap<usize, f64> },
}

/// Per-agent privacy budget: the overall (eps_bar, delta_bar), the planned
/// per-update allocations, and the realized spending history.
#[derive(Debug, Clone)]
pub struct PrivacyLedger {
    agent: usize,
    eps_bar: f64,
    delta_bar: f64,
    mechanism: NoiseMechanism,
    l0: f64,
    data_size: usize,
    /// Per-update delta for the Gaussian mechanism (0 for Laplace).
    delta_step: f64,
    plan: Plan,
    spent: Vec<SpentEvent>,
    warm_start_epsilon: f64,
}

impl PrivacyLedger {
    /// Uniform plan: `t_i` equal allocations found by inverting the
    /// composition bound.
    pub fn new_uniform(
        agent: usize,
        eps_bar: f64,
        delta_bar: f64,
        mechanism: NoiseMechanism,
        l0: f64,
        data_size: usize,
        t_i: usize,
        delta_step: f64,
    ) -> Result<Self> {
        let allocations = allocate_uniform(eps_bar, t_i, delta_bar)?;
        Self::validate_mechanism(mechanism, delta_step)?;
        Ok(PrivacyLedger {
            agent,
            eps_bar,
            delta_bar,
            mechanism,
            l0,
            data_size,
            delta_step,
            plan: Plan::Sequential { allocations, next: 0 },
            spent: Vec::new(),
            warm_start_epsilon: 0.0,
        })
    }

    /// Optimal plan for a known schedule of global wake-up ticks.
    pub fn new_optimal(
        agent: usize,
        eps_bar: f64,
        delta_bar: f64,
        mechanism: NoiseMechanism,
        l0: f64,
        data_size: usize,
        t_total: usize,
        contraction: f64,
        schedule_ticks: &[usize],
        delta_step: f64,
    ) -> Result<Self> {
        let full = allocate_optimal(eps_bar, t_total, contraction, schedule_ticks)?;
        Self::validate_mechanism(mechanism, delta_step)?;
        let allocations: HashMap<usize, f64> = schedule_ticks
            .iter()
            .map(|&t| (t, full[t]))
            .collect();
        Ok(PrivacyLedger {
            agent,
            eps_bar,
            delta_bar,
            mechanism,
            l0,
            data_size,
            delta_step,
            plan: Plan::ByTick { allocations },
            spent: Vec::new(),
            warm_start_epsilon: 0.0,
        })
    }

    fn validate_mechanism(mechanism: NoiseMechanism, delta_step: f64) -> Result<()> {
        if mechanism == NoiseMechanism::GaussianL2 && !(delta_step > 0.0 && delta_step <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "gaussian mechanism needs a per-update delta in (0,1], got {delta_step}"
            )));
        }
        Ok(())
    }

    pub fn agent(&self) -> usize {
        self.agent
    }

    pub fn eps_bar(&self) -> f64 {
        self.eps_bar
    }

    pub fn delta_bar(&self) -> f64 {
        self.delta_bar
    }

    pub fn mechanism(&self) -> NoiseMechanism {
        self.mechanism
    }

    pub fn spent(&self) -> &[SpentEvent] {
        &self.spent
    }

    /// Planned updates not yet consumed.
    pub fn remaining_updates(&self) -> usize {
        match &self.plan {
            Plan::Sequential { allocations, next } => allocations.len() - next,
            Plan::ByTick { allocations } => allocations.len(),
        }
    }

    pub fn is_exhausted(&self) -> bool {
        self.remaining_updates() == 0
    }

    /// Consumes the allocation for a wake-up at `tick` and returns the noise
    /// scale to apply, or `None` when the budget is exhausted (the agent
    /// skips the update and broadcasts nothing).
    pub fn begin_update(&mut self, tick: usize) -> Result<Option<f64>> {
        let eps = match &mut self.plan {
            Plan::Sequential { allocations, next } => {
                if *next >= allocations.len() {
                    return Ok(None);
                }
                let eps = allocations[*next];
                *next += 1;
                eps
            }
            Plan::ByTick { allocations } => match allocations.remove(&tick) {
                Some(eps) => eps,
                None => return Ok(None),
            },
        };
        let (scale, delta) = match self.mechanism {
            NoiseMechanism::LaplaceL1 => {
                (noise_scale_laplace(self.l0, eps, self.data_size)?, 0.0)
            }
            NoiseMechanism::GaussianL2 => (
                noise_scale_gaussian(self.l0, eps, self.delta_step, self.data_size)?,
                self.delta_step,
            ),
        };
        self.spent.push(SpentEvent { tick, epsilon: eps, delta, noise_scale: scale });
        Ok(Some(scale))
    }

    /// One-off charge for a private warm start, tracked separately from the
    /// per-update budget.
    pub fn charge_warm_start(&mut self, eps: f64) {
        self.warm_start_epsilon += eps;
    }

    pub fn warm_start_epsilon(&self) -> f64 {
        self.warm_start_epsilon
    }

    pub fn naive_spent(&self) -> f64 {
        self.spent.iter().map(|e| e.epsilon).sum()
    }

    /// Composition minimum over everything spent so far.
    pub fn composed_spent(&self) -> Result<f64> {
        let eps: Vec<f64> = self.spent.iter().map(|e| e.epsilon).collect();
        composed_epsilon(&eps, self.delta_bar)
    }

    /// Overall delta: delta_bar for Laplace, the product form for Gaussian.
    pub fn composed_delta(&self) -> f64 {
        let deltas: Vec<f64> = self.spent.iter().map(|e| e.delta).collect();
        composed_delta(self.delta_bar, &deltas)
    }

    /// Checks that the composed spent epsilon never exceeded the budget at
    /// any point of the run.
    pub fn verify_budget_safety(&self, tolerance: f64) -> Result<()> {
        let eps: Vec<f64> = self.spent.iter().map(|e| e.epsilon).collect();
        for k in 1..=eps.len() {
            let composed = composed_epsilon(&eps[..k], self.delta_bar)?;
            if composed > self.eps_bar + tolerance {
                return Err(Error::InvalidInput(format!(
                    "agent {} composed epsilon {composed} exceeds budget {} after {k} updates",
                    self.agent, self.eps_bar
                )));
            }
        }
        Ok(())
    }

    /// CSV rows `(agent, tick, epsilon_spent, noise_scale, cumulative_naive,
    /// cumulative_composed)`, one per realized update.
    pub fn csv_rows(&self) -> Result<String> {
        let mut out = String::new();
        let mut prefix: Vec<f64> = Vec::with_capacity(self.spent.len());
        for event in &self.spent {
            prefix.push(event.epsilon);
            let naive: f64 = prefix.iter().sum();
            let composed = composed_epsilon(&prefix, self.delta_bar)?;
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.agent, event.tick, event.epsilon, event.noise_scale, naive, composed
            ));
        }
        Ok(out)
    }
}

/// Header plus rows for a set of ledgers.
pub fn ledgers_to_csv(ledgers: &[PrivacyLedger]) -> Result<String> {
    let mut out =
        String::from("agent,tick,epsilon_spent,noise_scale,cumulative_naive,cumulative_composed\n");
    for ledger in ledgers {
        out.push_str(&ledger.csv_rows()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn laplace_scale_formula() {
        assert_eq!(noise_scale_laplace(1.0, 0.1, 20).unwrap(), 1.0);
        assert_eq!(noise_scale_laplace(1.0, 1.0, 1).unwrap(), 2.0);
        // doubling m halves the scale
        let s1 = noise_scale_laplace(1.0, 0.3, 10).unwrap();
        let s2 = noise_scale_laplace(1.0, 0.3, 20).unwrap();
        assert!((s1 - 2.0 * s2).abs() < 1e-15);
    }

    #[test]
    fn laplace_scale_rejects_bad_inputs() {
        assert!(noise_scale_laplace(1.0, 0.0, 5).is_err());
        assert!(noise_scale_laplace(1.0, -0.1, 5).is_err());
        assert!(noise_scale_laplace(1.0, 0.5, 0).is_err());
        assert!(noise_scale_laplace(0.0, 0.5, 5).is_err());
    }

    #[test]
    fn gaussian_scale_formula() {
        // eps = 1, delta = 2 e^-5 so ln(2/delta) = 5, L0 = 1, m = 1
        let delta = 2.0 * (-5.0f64).exp();
        let s = noise_scale_gaussian(1.0, 1.0, delta, 1).unwrap();
        assert!((s - 2.0 * 10.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_scale_monotonicity_and_domain() {
        assert!(noise_scale_gaussian(1.0, 1.0, 0.0, 1).is_err());
        assert!(noise_scale_gaussian(1.0, 1.0, 2.0, 1).is_err());
        let s1 = noise_scale_gaussian(1.0, 1.0, 0.01, 5).unwrap();
        let s2 = noise_scale_gaussian(1.0, 2.0, 0.01, 5).unwrap();
        let s3 = noise_scale_gaussian(1.0, 1.0, 0.1, 5).unwrap();
        assert!(s2 < s1);
        assert!(s3 < s1);
    }

    #[test]
    fn scale_zero_noise_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_laplace(0.0, 8, &mut rng), vec![0.0; 8]);
        assert_eq!(sample_gaussian(0.0, 8, &mut rng), vec![0.0; 8]);
    }

    #[test]
    fn composed_epsilon_single_allocation_is_tight() {
        for delta in [0.0, 1e-3, (-5.0f64).exp()] {
            let composed = composed_epsilon(&[0.37], delta).unwrap();
            assert!((composed - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn composed_epsilon_naive_only_at_delta_zero() {
        let eps = vec![0.1; 7];
        assert!((composed_epsilon(&eps, 0.0).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn composed_epsilon_advanced_beats_naive_for_many_small_steps() {
        let eps = vec![0.01; 50];
        let composed = composed_epsilon(&eps, (-5.0f64).exp()).unwrap();
        assert!(composed < 0.5);
        assert!(composed > 0.0);
    }

    #[test]
    fn composed_epsilon_never_exceeds_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let k = rng.gen_range(1..30);
            let eps: Vec<f64> = (0..k).map(|_| rng.gen_range(0.001..0.5)).collect();
            let delta = rng.gen_range(0.0..1.0);
            let naive: f64 = eps.iter().sum();
            assert!(composed_epsilon(&eps, delta).unwrap() <= naive + 1e-12);
        }
    }

    #[test]
    fn composed_epsilon_monotone_under_append() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let k = rng.gen_range(1..20);
            let mut eps: Vec<f64> = (0..k).map(|_| rng.gen_range(0.001..0.3)).collect();
            let delta = rng.gen_range(1e-6..0.5);
            let before = composed_epsilon(&eps, delta).unwrap();
            eps.push(rng.gen_range(0.001..0.3));
            let after = composed_epsilon(&eps, delta).unwrap();
            assert!(after >= before - 1e-12);
        }
    }

    #[test]
    fn composed_epsilon_rejects_negative() {
        assert!(composed_epsilon(&[0.1, -0.2], 0.1).is_err());
    }

    #[test]
    fn allocate_uniform_naive_split_at_delta_zero() {
        let alloc = allocate_uniform(0.6, 3, 0.0).unwrap();
        assert_eq!(alloc, vec![0.6 / 3.0; 3]);
        assert_eq!(allocate_uniform(0.6, 1, 0.5).unwrap(), vec![0.6]);
    }

    #[test]
    fn allocate_uniform_round_trips_the_budget() {
        let delta = (-5.0f64).exp();
        let alloc = allocate_uniform(0.5, 20, delta).unwrap();
        assert!(alloc.iter().all(|&e| (e - alloc[0]).abs() < 1e-15));
        assert!(alloc[0] >= 0.5 / 20.0);
        let composed = composed_epsilon(&alloc, delta).unwrap();
        assert!((composed - 0.5).abs() <= 1e-9);
    }

    #[test]
    fn allocate_optimal_full_schedule_sums_to_budget() {
        let t = 40;
        let ticks: Vec<usize> = (0..t).collect();
        let alloc = allocate_optimal(0.8, t, 0.9, &ticks).unwrap();
        let total: f64 = alloc.iter().sum();
        assert!((total - 0.8).abs() < 1e-12);
        // geometric series: with the full schedule, lambda = 1 and the raw
        // rates already sum to eps_bar
        let c: f64 = 0.9;
        let front = (c.powf(1.0 / 3.0) - 1.0) / (c.powf(t as f64 / 3.0) - 1.0);
        let raw: f64 = (0..t).map(|k| front * c.powf(k as f64 / 3.0) * 0.8).sum();
        assert!((raw - 0.8).abs() < 1e-12);
    }

    #[test]
    fn allocate_optimal_ratio_follows_contraction() {
        let ticks = vec![2, 7, 19];
        let c: f64 = 0.95;
        let alloc = allocate_optimal(1.0, 25, c, &ticks).unwrap();
        let ratio = alloc[7] / alloc[2];
        assert!((ratio - c.powf((7.0 - 2.0) / 3.0)).abs() < 1e-12);
        let ratio = alloc[19] / alloc[7];
        assert!((ratio - c.powf((19.0 - 7.0) / 3.0)).abs() < 1e-12);
        // allocations shrink with t for contraction < 1
        assert!(alloc[2] > alloc[7] && alloc[7] > alloc[19]);
        // off-schedule entries are zero
        assert_eq!(alloc[0], 0.0);
    }

    #[test]
    fn allocate_optimal_tends_to_uniform_as_contraction_approaches_one() {
        let t = 50;
        let ticks: Vec<usize> = (0..t).collect();
        let alloc = allocate_optimal(1.0, t, 1.0 - 1e-6, &ticks).unwrap();
        let uniform = 1.0 / t as f64;
        for &e in &alloc {
            assert!((e - uniform).abs() / uniform < 1e-4);
        }
    }

    #[test]
    fn allocate_optimal_rejects_bad_inputs() {
        assert!(allocate_optimal(1.0, 10, 1.0, &[0]).is_err());
        assert!(allocate_optimal(1.0, 10, 0.0, &[0]).is_err());
        assert!(allocate_optimal(1.0, 10, 0.5, &[]).is_err());
        assert!(allocate_optimal(1.0, 10, 0.5, &[10]).is_err());
    }

    #[test]
    fn optimal_allocation_minimizes_noise_objective() {
        for c in [0.9, 0.99, 0.999] {
            let t = 30;
            let ticks: Vec<usize> = (0..t).collect();
            let optimal = allocate_optimal(1.0, t, c, &ticks).unwrap();
            let uniform = vec![1.0 / t as f64; t];
            let opt_obj = allocation_noise_objective(c, &optimal);
            let uni_obj = allocation_noise_objective(c, &uniform);
            assert!(opt_obj < uni_obj);
        }
    }

    #[test]
    fn local_dp_perturbation_scale_and_bounds() {
        let data = LocalDataset::new(
            vec![(vec![0.5, -0.5], 1.0), (vec![0.0, 0.9], -1.0)],
            0.1,
        )
        .unwrap();
        let bounds = vec![(-1.0, 1.0), (-1.0, 1.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy = perturb_dataset_local_dp(&data, 1.0, &bounds, &mut rng).unwrap();
        assert_eq!(noisy.size(), 2);
        assert_eq!(noisy.lambda(), 0.1);
        // labels untouched
        assert_eq!(noisy.points()[0].1, 1.0);
        assert_eq!(noisy.points()[1].1, -1.0);

        // out-of-bounds feature faults
        let bad_bounds = vec![(-0.1, 0.1), (-1.0, 1.0)];
        assert!(perturb_dataset_local_dp(&data, 1.0, &bad_bounds, &mut rng).is_err());
    }

    #[test]
    fn local_dp_large_eps_changes_little() {
        let data = LocalDataset::new(vec![(vec![0.3, 0.3], 1.0)], 0.0).unwrap();
        let bounds = vec![(-1.0, 1.0), (-1.0, 1.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noisy = perturb_dataset_local_dp(&data, 1e12, &bounds, &mut rng).unwrap();
        for (orig, pert) in data.points()[0].0.iter().zip(&noisy.points()[0].0) {
            assert!((orig - pert).abs() < 1e-9);
        }
    }

    #[test]
    fn ledger_uniform_plan_spends_then_exhausts() {
        let mut ledger = PrivacyLedger::new_uniform(
            3,
            0.5,
            (-5.0f64).exp(),
            NoiseMechanism::LaplaceL1,
            1.0,
            40,
            5,
            0.0,
        )
        .unwrap();
        for tick in 0..5 {
            let scale = ledger.begin_update(tick * 7).unwrap();
            assert!(scale.is_some());
        }
        assert!(ledger.is_exhausted());
        assert_eq!(ledger.begin_update(99).unwrap(), None);
        assert_eq!(ledger.spent().len(), 5);
        ledger.verify_budget_safety(1e-9).unwrap();
        assert!(ledger.composed_spent().unwrap() <= 0.5 + 1e-9);
    }

    #[test]
    fn ledger_by_tick_plan_only_fires_on_schedule() {
        let ticks = vec![1, 4, 9];
        let mut ledger = PrivacyLedger::new_optimal(
            0,
            1.0,
            0.0,
            NoiseMechanism::LaplaceL1,
            1.0,
            10,
            12,
            0.9,
            &ticks,
            0.0,
        )
        .unwrap();
        assert_eq!(ledger.begin_update(0).unwrap(), None);
        assert!(ledger.begin_update(1).unwrap().is_some());
        assert!(ledger.begin_update(4).unwrap().is_some());
        assert!(ledger.begin_update(9).unwrap().is_some());
        assert!(ledger.is_exhausted());
        let total: f64 = ledger.spent().iter().map(|e| e.epsilon).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ledger_csv_has_expected_shape() {
        let mut ledger = PrivacyLedger::new_uniform(
            1,
            0.2,
            0.0,
            NoiseMechanism::LaplaceL1,
            1.0,
            10,
            2,
            0.0,
        )
        .unwrap();
        ledger.begin_update(5).unwrap();
        ledger.begin_update(11).unwrap();
        let csv = ledgers_to_csv(&[ledger]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("agent,tick"));
        assert!(lines[1].starts_with("1,5,0.1,"));
    }

    #[test]
    fn gaussian_ledger_composes_delta_product_form() {
        let mut ledger = PrivacyLedger::new_uniform(
            0,
            1.0,
            1e-3,
            NoiseMechanism::GaussianL2,
            1.0,
            10,
            3,
            1e-4,
        )
        .unwrap();
        for tick in 0..3 {
            ledger.begin_update(tick).unwrap();
        }
        let expect = 1.0 - (1.0 - 1e-3) * (1.0 - 1e-4f64).powi(3);
        assert!((ledger.composed_delta() - expect).abs() < 1e-15);
    }

    #[test]
    fn laplace_moments_match_over_many_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let scale = 1.3;
        let n = 1_000_000usize;
        let draws = sample_laplace(scale, n, &mut rng);
        let mean: f64 = draws.iter().sum::<f64>() / n as f64;
        let var: f64 = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let true_var = 2.0 * scale * scale;
        let se_mean = (true_var / n as f64).sqrt();
        assert!(mean.abs() <= 5.0 * se_mean, "mean {mean} vs se {se_mean}");
        assert!((var - true_var).abs() <= 0.05 * true_var);
    }
}
