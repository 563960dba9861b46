//! Experiment runners: non-private convergence, privacy/utility trade-offs,
//! the recommendation task, the local-DP baseline, and Monte-Carlo
//! verification of the convergence bounds.
//!
//! Every experiment is a pure function of its config and seeds; reports
//! regenerate bit-identically (wall time is kept out of the CSV payload).

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    evaluate_rmse, evaluate_synthetic, generate_synthetic, load_or_make_features, load_ratings,
    SyntheticTask, TestLabels, DEFAULT_FLIP_PROB,
};
use crate::error::{Error, Result};
use crate::graph::{build_knn_cosine_graph, NetworkGraph, DEFAULT_CONFIDENCE_FLOOR};
use crate::losses::{ClippedQuadraticLoss, LogisticLoss, LossModel, ModelPropagationLoss,
    DEFAULT_GRADIENT_CLIP};
use crate::objective::{ModelStack, ObjectiveSpec};
use crate::privacy::perturb_dataset_local_dp;
use crate::solver::{
    cd_step_in_place, contraction_factor, fit_all_local_models, noisy_cd_step_in_place,
    prop1_bound, run, thm2_bound, Allocation, BoundVariant, Mode, NoiseScales, RunConfig,
    Schedule, WarmStart,
};
use crate::privacy::NoiseMechanism;

/// A finished experiment: checkpoint rows, per-agent rows, and a flat
/// summary. Everything in the CSV payloads regenerates bit-identically from
/// (config, seeds).
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub name: String,
    pub config_echo: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub per_agent_columns: Vec<String>,
    pub per_agent: Vec<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub summary: Vec<(String, f64)>,
    pub wall_time_secs: f64,
}

impl ExperimentReport {
    pub fn to_csv_string(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn per_agent_csv_string(&self) -> String {
        let mut out = self.per_agent_columns.join(",");
        out.push('\n');
        for row in &self.per_agent {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = format!("# {}\n", self.name);
        out.push_str(&self.config_echo);
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        out.push_str(&format!("seeds = {}\n", seeds.join(",")));
        for (key, value) in &self.summary {
            out.push_str(&format!("{key} = {value}\n"));
        }
        out.push_str(&format!("wall_time_secs = {:.3}\n", self.wall_time_secs));
        out
    }

    fn summary_value(&self, key: &str) -> Option<f64> {
        self.summary.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }

    /// Convenience lookup used by tests and the CLI.
    pub fn get_summary(&self, key: &str) -> Result<f64> {
        self.summary_value(key)
            .ok_or_else(|| Error::InvalidInput(format!("no summary entry {key:?}")))
    }
}

/// Common knobs for the synthetic linear-classification experiments.
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub n: usize,
    pub p: usize,
    pub gamma: f64,
    pub mu: f64,
    pub flip_prob: f64,
    pub fit_tol: f64,
    pub fit_max_iters: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 100,
            p: 10,
            gamma: 0.1,
            mu: 0.16,
            flip_prob: DEFAULT_FLIP_PROB,
            fit_tol: 1e-8,
            fit_max_iters: 200_000,
        }
    }
}

impl SyntheticConfig {
    fn echo(&self) -> String {
        format!(
            "n = {}\np = {}\ngamma = {}\nmu = {}\nflip_prob = {}\nfit_tol = {}\nfit_max_iters = {}\n",
            self.n, self.p, self.gamma, self.mu, self.flip_prob, self.fit_tol, self.fit_max_iters
        )
    }
}

fn logistic_losses(task: &SyntheticTask) -> Result<Vec<Box<dyn LossModel>>> {
    task.train
        .iter()
        .map(|d| {
            Ok(Box::new(LogisticLoss::new(d.clone())?) as Box<dyn LossModel>)
        })
        .collect()
}

struct SyntheticInstance {
    task: SyntheticTask,
    spec: ObjectiveSpec,
    local_accuracy: f64,
    local_per_agent: Vec<f64>,
}

fn build_synthetic_instance(config: &SyntheticConfig, seed: u64) -> Result<SyntheticInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (task, graph) =
        generate_synthetic(config.n, config.p, config.gamma, config.flip_prob, &mut rng)?;
    let losses = logistic_losses(&task)?;
    let local_stack = fit_all_local_models(&losses, config.fit_tol, config.fit_max_iters)?;
    let spec = ObjectiveSpec::new(graph, losses, config.mu)?;
    let (local_per_agent, local_accuracy) =
        evaluate_synthetic(&local_stack, &task, TestLabels::Clean)?;
    Ok(SyntheticInstance { task, spec, local_accuracy, local_per_agent })
}

/// Non-private coordinate descent from the local-model warm start, tracking
/// objective and test accuracy against ticks and transmissions.
pub fn exp_nonprivate_convergence(
    config: &SyntheticConfig,
    total_ticks: usize,
    seeds: &[u64],
) -> Result<ExperimentReport> {
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut per_agent = Vec::new();
    let mut final_acc_sum = 0.0;
    let mut local_acc_sum = 0.0;
    for &seed in seeds {
        let instance = build_synthetic_instance(config, seed)?;
        let task = &instance.task;
        let evaluator =
            |stack: &ModelStack| evaluate_synthetic(stack, task, TestLabels::Clean).unwrap().1;
        let run_config = RunConfig {
            mode: Mode::NonPrivate,
            total_ticks,
            seed,
            warm_start: WarmStart::LocalModels,
            fit_tol: config.fit_tol,
            fit_max_iters: config.fit_max_iters,
            ..RunConfig::default()
        };
        let out = run(&instance.spec, &run_config, Some(&evaluator))?;
        for row in &out.metrics.rows {
            rows.push(vec![
                seed as f64,
                row.tick as f64,
                row.objective,
                row.mean_test_metric.unwrap_or(f64::NAN),
                row.transmissions_cumulative as f64,
            ]);
        }
        let (final_per_agent, final_acc) =
            evaluate_synthetic(&out.final_stack, task, TestLabels::Clean)?;
        for i in 0..config.n {
            per_agent.push(vec![
                seed as f64,
                i as f64,
                task.train[i].size() as f64,
                instance.local_per_agent[i],
                final_per_agent[i],
            ]);
        }
        final_acc_sum += final_acc;
        local_acc_sum += instance.local_accuracy;
    }
    let mean_final = final_acc_sum / seeds.len() as f64;
    let mean_local = local_acc_sum / seeds.len() as f64;
    Ok(ExperimentReport {
        name: "synth-convergence".into(),
        config_echo: format!("{}total_ticks = {total_ticks}\n", config.echo()),
        columns: vec![
            "seed".into(),
            "tick".into(),
            "objective".into(),
            "mean_accuracy".into(),
            "transmissions".into(),
        ],
        rows,
        per_agent_columns: vec![
            "seed".into(),
            "agent".into(),
            "dataset_size".into(),
            "local_accuracy".into(),
            "final_accuracy".into(),
        ],
        per_agent,
        seeds: seeds.to_vec(),
        summary: vec![
            ("mean_local_accuracy".into(), mean_local),
            ("mean_final_accuracy".into(), mean_final),
            ("mean_accuracy_gain".into(), mean_final - mean_local),
        ],
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Private runs over a grid of budgets and iteration counts, averaged over
/// seeds. delta_bar defaults to exp(-5) in [`PrivateTradeoffConfig`].
#[derive(Debug, Clone)]
pub struct PrivateTradeoffConfig {
    pub base: SyntheticConfig,
    pub eps_grid: Vec<f64>,
    pub ticks_grid: Vec<usize>,
    pub delta_bar: f64,
    pub warm_start: WarmStart,
    pub allocation: Allocation,
}

impl Default for PrivateTradeoffConfig {
    fn default() -> Self {
        PrivateTradeoffConfig {
            base: SyntheticConfig::default(),
            eps_grid: vec![0.15, 0.5, 1.0],
            ticks_grid: vec![400],
            delta_bar: (-5.0f64).exp(),
            warm_start: WarmStart::PrivatePropagation { eps: 0.05, lambda_floor: 0.5 },
            allocation: Allocation::Uniform,
        }
    }
}

/// Final objective and accuracy for every (eps_bar, ticks, seed) cell.
pub fn exp_private_tradeoff(
    config: &PrivateTradeoffConfig,
    seeds: &[u64],
) -> Result<ExperimentReport> {
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut per_agent = Vec::new();
    let mut summary = Vec::new();
    let mut local_acc_sum = 0.0;
    let mut instances = Vec::new();
    for &seed in seeds {
        let instance = build_synthetic_instance(&config.base, seed)?;
        local_acc_sum += instance.local_accuracy;
        instances.push((seed, instance));
    }
    summary.push((
        "mean_local_accuracy".to_string(),
        local_acc_sum / seeds.len() as f64,
    ));
    for &eps_bar in &config.eps_grid {
        for &ticks in &config.ticks_grid {
            let mut acc_sum = 0.0;
            let mut obj_sum = 0.0;
            for (seed, instance) in &instances {
                let task = &instance.task;
                let run_config = RunConfig {
                    mode: Mode::PrivateLaplace,
                    total_ticks: ticks,
                    seed: *seed,
                    warm_start: config.warm_start,
                    allocation: config.allocation,
                    eps_bar,
                    delta_bar: config.delta_bar,
                    fit_tol: config.base.fit_tol,
                    fit_max_iters: config.base.fit_max_iters,
                    ..RunConfig::default()
                };
                let out = run(&instance.spec, &run_config, None)?;
                for ledger in out.ledgers.as_ref().unwrap() {
                    ledger.verify_budget_safety(1e-9)?;
                }
                let (final_per_agent, acc) =
                    evaluate_synthetic(&out.final_stack, task, TestLabels::Clean)?;
                let objective = instance.spec.objective_value(&out.final_stack)?;
                rows.push(vec![eps_bar, ticks as f64, *seed as f64, objective, acc]);
                for i in 0..config.base.n {
                    per_agent.push(vec![
                        eps_bar,
                        ticks as f64,
                        *seed as f64,
                        i as f64,
                        task.train[i].size() as f64,
                        instance.local_per_agent[i],
                        final_per_agent[i],
                    ]);
                }
                acc_sum += acc;
                obj_sum += objective;
            }
            let cells = seeds.len() as f64;
            summary.push((
                format!("eps={eps_bar},ticks={ticks}:mean_accuracy"),
                acc_sum / cells,
            ));
            summary.push((
                format!("eps={eps_bar},ticks={ticks}:mean_objective"),
                obj_sum / cells,
            ));
        }
    }
    Ok(ExperimentReport {
        name: "synth-private".into(),
        config_echo: format!(
            "{}eps_grid = {:?}\nticks_grid = {:?}\ndelta_bar = {}\nwarm_start = {:?}\nallocation = {:?}\n",
            config.base.echo(),
            config.eps_grid,
            config.ticks_grid,
            config.delta_bar,
            config.warm_start,
            config.allocation
        ),
        columns: vec![
            "eps_bar".into(),
            "ticks".into(),
            "seed".into(),
            "final_objective".into(),
            "final_accuracy".into(),
        ],
        rows,
        per_agent_columns: vec![
            "eps_bar".into(),
            "ticks".into(),
            "seed".into(),
            "agent".into(),
            "dataset_size".into(),
            "local_accuracy".into(),
            "final_accuracy".into(),
        ],
        per_agent,
        seeds: seeds.to_vec(),
        summary,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Recommendation pipeline configuration (10-NN cosine graph, clipped
/// quadratic loss, mu = 0.04, lambda_i = 1/m_i, p = 20 features).
#[derive(Debug, Clone)]
pub struct RecommendationConfig {
    pub p: usize,
    pub k_nn: usize,
    pub mu: f64,
    pub clip: f64,
    pub min_ratings: usize,
    pub eps_grid: Vec<f64>,
    /// Per-eps updates per agent (parallel to `eps_grid`).
    pub private_updates_per_agent: Vec<usize>,
    pub delta_bar: f64,
    pub nonprivate_updates_per_agent: usize,
    pub fit_tol: f64,
    pub fit_max_iters: usize,
}

impl Default for RecommendationConfig {
    fn default() -> Self {
        RecommendationConfig {
            p: 20,
            k_nn: 10,
            mu: 0.04,
            clip: DEFAULT_GRADIENT_CLIP,
            min_ratings: 20,
            eps_grid: vec![1.0, 0.5, 0.1],
            // equal update counts keep the noise scale monotone in the
            // budget, so accuracy orders by eps_bar even when the feature
            // space carries little signal
            private_updates_per_agent: vec![10, 10, 10],
            delta_bar: (-5.0f64).exp(),
            nonprivate_updates_per_agent: 40,
            fit_tol: 1e-7,
            fit_max_iters: 100_000,
        }
    }
}

/// Variant codes in the recommendation report rows.
pub const VARIANT_LOCAL: f64 = 0.0;
pub const VARIANT_NONPRIVATE: f64 = 1.0;
pub const VARIANT_PRIVATE: f64 = 2.0;

/// Local baseline, non-private CD and private CD over the budget grid;
/// per-user test RMSE averaged over seeds.
pub fn exp_recommendation(
    config: &RecommendationConfig,
    ratings_text: &str,
    features_csv: Option<&str>,
    seeds: &[u64],
) -> Result<ExperimentReport> {
    let start = Instant::now();
    if config.private_updates_per_agent.len() != config.eps_grid.len() {
        return Err(Error::InvalidInput(
            "private_updates_per_agent must parallel eps_grid".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut per_agent = Vec::new();
    let mut local_sum = 0.0;
    let mut nonpriv_sum = 0.0;
    let mut priv_sums = vec![0.0; config.eps_grid.len()];
    for &seed in seeds {
        let task = load_ratings(ratings_text, config.min_ratings, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        let features =
            load_or_make_features(features_csv, task.n_items, config.p, &mut rng)?;
        let graph = build_knn_cosine_graph(&task.raw_train_vectors(), config.k_nn)?;
        let graph = graph.set_confidences(&task.train_sizes(), DEFAULT_CONFIDENCE_FLOOR)?;
        let datasets = task.feature_datasets(&features)?;
        let losses: Vec<Box<dyn LossModel>> = datasets
            .into_iter()
            .map(|d| Ok(Box::new(ClippedQuadraticLoss::new(d, config.clip)?) as Box<dyn LossModel>))
            .collect::<Result<_>>()?;
        let spec = ObjectiveSpec::new(graph, losses, config.mu)?;
        let n = spec.n();

        let local = fit_all_local_models(spec.losses(), config.fit_tol, config.fit_max_iters)?;
        let (local_per_user, local_rmse, _) = evaluate_rmse(&local, &task, &features)?;
        rows.push(vec![VARIANT_LOCAL, 0.0, seed as f64, local_rmse]);
        local_sum += local_rmse;

        let nonpriv_config = RunConfig {
            mode: Mode::NonPrivate,
            total_ticks: config.nonprivate_updates_per_agent * n,
            seed,
            warm_start: WarmStart::LocalModels,
            fit_tol: config.fit_tol,
            fit_max_iters: config.fit_max_iters,
            ..RunConfig::default()
        };
        let out = run(&spec, &nonpriv_config, None)?;
        let (nonpriv_per_user, nonpriv_rmse, _) =
            evaluate_rmse(&out.final_stack, &task, &features)?;
        rows.push(vec![VARIANT_NONPRIVATE, 0.0, seed as f64, nonpriv_rmse]);
        nonpriv_sum += nonpriv_rmse;
        for i in 0..n {
            per_agent.push(vec![
                seed as f64,
                i as f64,
                task.users[i].train.len() as f64,
                local_per_user[i].unwrap_or(f64::NAN),
                nonpriv_per_user[i].unwrap_or(f64::NAN),
            ]);
        }

        for (g, (&eps_bar, &t_i)) in config
            .eps_grid
            .iter()
            .zip(&config.private_updates_per_agent)
            .enumerate()
        {
            let private_config = RunConfig {
                mode: Mode::PrivateLaplace,
                total_ticks: t_i * n,
                seed,
                warm_start: WarmStart::Zeros,
                eps_bar,
                delta_bar: config.delta_bar,
                updates_per_agent: Some(t_i),
                fit_tol: config.fit_tol,
                fit_max_iters: config.fit_max_iters,
                ..RunConfig::default()
            };
            let out = run(&spec, &private_config, None)?;
            for ledger in out.ledgers.as_ref().unwrap() {
                ledger.verify_budget_safety(1e-9)?;
            }
            let (_, rmse, _) = evaluate_rmse(&out.final_stack, &task, &features)?;
            rows.push(vec![VARIANT_PRIVATE, eps_bar, seed as f64, rmse]);
            priv_sums[g] += rmse;
        }
    }
    let cells = seeds.len() as f64;
    let mut summary = vec![
        ("mean_rmse_local".to_string(), local_sum / cells),
        ("mean_rmse_nonprivate".to_string(), nonpriv_sum / cells),
    ];
    for (g, &eps) in config.eps_grid.iter().enumerate() {
        summary.push((format!("mean_rmse_private_eps={eps}"), priv_sums[g] / cells));
    }
    Ok(ExperimentReport {
        name: "recsys".into(),
        config_echo: format!(
            "p = {}\nk_nn = {}\nmu = {}\nclip = {}\nmin_ratings = {}\neps_grid = {:?}\n\
             private_updates_per_agent = {:?}\ndelta_bar = {}\nnonprivate_updates_per_agent = {}\n",
            config.p,
            config.k_nn,
            config.mu,
            config.clip,
            config.min_ratings,
            config.eps_grid,
            config.private_updates_per_agent,
            config.delta_bar,
            config.nonprivate_updates_per_agent
        ),
        columns: vec!["variant".into(), "eps_bar".into(), "seed".into(), "rmse".into()],
        rows,
        per_agent_columns: vec![
            "seed".into(),
            "user".into(),
            "train_size".into(),
            "local_rmse".into(),
            "nonprivate_rmse".into(),
        ],
        per_agent,
        seeds: seeds.to_vec(),
        summary,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Local-DP baseline grid: fit purely local models on perturbed data.
#[derive(Debug, Clone)]
pub struct LocalDpConfig {
    pub n: usize,
    pub dims: Vec<usize>,
    pub eps_grid: Vec<f64>,
    pub gamma: f64,
    pub flip_prob: f64,
    pub fit_tol: f64,
    pub fit_max_iters: usize,
}

impl Default for LocalDpConfig {
    fn default() -> Self {
        LocalDpConfig {
            n: 100,
            dims: vec![2, 5, 10, 20],
            eps_grid: vec![1.0, 5.0, 25.0],
            gamma: 0.1,
            flip_prob: DEFAULT_FLIP_PROB,
            fit_tol: 1e-8,
            fit_max_iters: 200_000,
        }
    }
}

/// Accuracy of purely local models fitted on locally perturbed data, against
/// the unperturbed local baseline.
pub fn exp_local_dp_baseline(config: &LocalDpConfig, seeds: &[u64]) -> Result<ExperimentReport> {
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &p in &config.dims {
        for &eps in &config.eps_grid {
            let mut perturbed_sum = 0.0;
            let mut clean_sum = 0.0;
            for &seed in seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (task, _) =
                    generate_synthetic(config.n, p, config.gamma, config.flip_prob, &mut rng)?;
                let bounds = vec![(-1.0, 1.0); p];
                let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ce);
                let clean_losses = logistic_losses(&task)?;
                let clean_stack =
                    fit_all_local_models(&clean_losses, config.fit_tol, config.fit_max_iters)?;
                let (_, clean_acc) =
                    evaluate_synthetic(&clean_stack, &task, TestLabels::Clean)?;
                let perturbed_losses: Vec<Box<dyn LossModel>> = task
                    .train
                    .iter()
                    .map(|d| {
                        let noisy = perturb_dataset_local_dp(d, eps, &bounds, &mut noise_rng)?;
                        Ok(Box::new(LogisticLoss::new(noisy)?) as Box<dyn LossModel>)
                    })
                    .collect::<Result<_>>()?;
                let perturbed_stack = fit_all_local_models(
                    &perturbed_losses,
                    config.fit_tol,
                    config.fit_max_iters,
                )?;
                let (_, perturbed_acc) =
                    evaluate_synthetic(&perturbed_stack, &task, TestLabels::Clean)?;
                rows.push(vec![p as f64, eps, seed as f64, perturbed_acc, clean_acc]);
                perturbed_sum += perturbed_acc;
                clean_sum += clean_acc;
            }
            let cells = seeds.len() as f64;
            summary.push((
                format!("p={p},eps={eps}:mean_perturbed_accuracy"),
                perturbed_sum / cells,
            ));
            summary.push((format!("p={p},eps={eps}:mean_clean_accuracy"), clean_sum / cells));
        }
    }
    Ok(ExperimentReport {
        name: "local-dp".into(),
        config_echo: format!(
            "n = {}\ndims = {:?}\neps_grid = {:?}\ngamma = {}\nflip_prob = {}\n",
            config.n, config.dims, config.eps_grid, config.gamma, config.flip_prob
        ),
        columns: vec![
            "p".into(),
            "eps".into(),
            "seed".into(),
            "perturbed_accuracy".into(),
            "clean_accuracy".into(),
        ],
        rows,
        per_agent_columns: vec![],
        per_agent: vec![],
        seeds: seeds.to_vec(),
        summary,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Monte-Carlo verification setup for the convergence bounds: a fixed
/// model-propagation instance, many seeded runs, mean suboptimality gaps at
/// checkpoints compared against the closed-form bounds.
#[derive(Debug, Clone)]
pub struct BoundsCheckConfig {
    pub n: usize,
    pub p: usize,
    pub mu: f64,
    pub instance_seed: u64,
    pub runs: usize,
    pub checkpoints: Vec<usize>,
    /// Uniform per-agent Laplace scale for the private phase.
    pub noise_scale: f64,
}

impl Default for BoundsCheckConfig {
    fn default() -> Self {
        BoundsCheckConfig {
            n: 10,
            p: 3,
            mu: 1.0,
            instance_seed: 2024,
            runs: 2000,
            checkpoints: vec![10, 50, 100, 500],
            noise_scale: 0.05,
        }
    }
}

/// Builds the fixed strongly convex instance used by the bounds check.
pub fn bounds_check_instance(config: &BoundsCheckConfig) -> Result<ObjectiveSpec> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(config.instance_seed);
    let n = config.n;
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if j == i + 1 || rng.gen_bool(0.35) {
                edges.push((i, j, rng.gen_range(0.3..1.2)));
            }
        }
    }
    let graph = NetworkGraph::from_edges(n, &edges)?;
    let conf: Vec<f64> = (0..n).map(|_| rng.gen_range(0.4..1.0)).collect();
    let graph = graph.with_confidences(conf)?;
    let losses: Vec<Box<dyn LossModel>> = (0..n)
        .map(|_| {
            let anchor: Vec<f64> = (0..config.p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Ok(Box::new(ModelPropagationLoss::new(anchor)?) as Box<dyn LossModel>)
        })
        .collect::<Result<_>>()?;
    ObjectiveSpec::new(graph, losses, config.mu)
}

/// Phase codes in the bounds-check report rows.
pub const PHASE_NONPRIVATE: f64 = 0.0;
pub const PHASE_PRIVATE: f64 = 1.0;

/// Runs the Monte-Carlo bound verification. Row columns:
/// (phase, checkpoint, mean_gap, std_error, bound_nominal,
/// bound_derivation). In the non-private phase both bound columns hold the
/// non-private rate bound.
pub fn exp_bounds_check(config: &BoundsCheckConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let spec = bounds_check_instance(config)?;
    let star = spec.solve_model_propagation_exact()?;
    let q_star = spec.objective_value(&star)?;
    let theta0 = ModelStack::zeros(config.n, config.p);
    let q0_gap = spec.objective_value(&theta0)? - q_star;
    let t_max = *config.checkpoints.iter().max().unwrap_or(&0);

    let mut rows = Vec::new();
    let mut summary = vec![
        ("q0_gap".to_string(), q0_gap),
        ("contraction".to_string(), contraction_factor(&spec)),
    ];

    for phase in [PHASE_NONPRIVATE, PHASE_PRIVATE] {
        let mut gaps: Vec<Vec<f64>> =
            vec![Vec::with_capacity(config.runs); config.checkpoints.len()];
        for run_idx in 0..config.runs {
            let seed = config.instance_seed
                ^ (run_idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
                ^ ((phase as u64) << 60);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let schedule = Schedule::draw(config.n, t_max, &mut rng);
            let mut theta = theta0.clone();
            for (tick, &agent) in schedule.wakeups().iter().enumerate() {
                if phase == PHASE_NONPRIVATE {
                    cd_step_in_place(&spec, &mut theta, agent)?;
                } else {
                    noisy_cd_step_in_place(
                        &spec,
                        &mut theta,
                        agent,
                        config.noise_scale,
                        NoiseMechanism::LaplaceL1,
                        &mut rng,
                    )?;
                }
                if let Some(pos) = config.checkpoints.iter().position(|&c| c == tick + 1) {
                    gaps[pos].push(spec.objective_value(&theta)? - q_star);
                }
            }
        }
        let scales = vec![config.noise_scale; config.n];
        for (pos, &checkpoint) in config.checkpoints.iter().enumerate() {
            let samples = &gaps[pos];
            let mean: f64 = samples.iter().sum::<f64>() / samples.len() as f64;
            let var: f64 = samples.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>()
                / (samples.len() - 1) as f64;
            let se = (var / samples.len() as f64).sqrt();
            let (nominal, derivation) = if phase == PHASE_NONPRIVATE {
                let b = prop1_bound(&spec, q0_gap, checkpoint);
                (b, b)
            } else {
                let noise = NoiseScales::Uniform(scales.clone());
                (
                    thm2_bound(&spec, q0_gap, checkpoint, &noise, BoundVariant::Nominal),
                    thm2_bound(&spec, q0_gap, checkpoint, &noise, BoundVariant::DerivationFaithful),
                )
            };
            rows.push(vec![phase, checkpoint as f64, mean, se, nominal, derivation]);
            let tag = if phase == PHASE_NONPRIVATE { "nonprivate" } else { "private" };
            summary.push((format!("{tag},T={checkpoint}:margin_vs_larger_bound"),
                nominal.max(derivation) + 3.0 * se - mean));
            if phase == PHASE_PRIVATE && mean > nominal + 3.0 * se {
                // the nominal bound can undercount p-dimensional noise; flag
                // without failing
                summary.push((format!("{tag},T={checkpoint}:nominal_bound_violated"), 1.0));
            }
        }
    }
    Ok(ExperimentReport {
        name: "bounds-check".into(),
        config_echo: format!(
            "n = {}\np = {}\nmu = {}\ninstance_seed = {}\nruns = {}\ncheckpoints = {:?}\nnoise_scale = {}\n",
            config.n, config.p, config.mu, config.instance_seed, config.runs,
            config.checkpoints, config.noise_scale
        ),
        columns: vec![
            "phase".into(),
            "checkpoint".into(),
            "mean_gap".into(),
            "std_error".into(),
            "bound_nominal".into(),
            "bound_derivation".into(),
        ],
        rows,
        per_agent_columns: vec![],
        per_agent: vec![],
        seeds: vec![config.instance_seed],
        summary,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Validation tuning of mu on held-out problem instances: returns the grid
/// accuracy table and the best entry.
pub fn tune_mu(
    base: &SyntheticConfig,
    grid: &[f64],
    total_ticks: usize,
    validation_seeds: &[u64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut table = Vec::with_capacity(grid.len());
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for &mu in grid {
        let config = SyntheticConfig { mu, ..base.clone() };
        let report = exp_nonprivate_convergence(&config, total_ticks, validation_seeds)?;
        let acc = report.get_summary("mean_final_accuracy")?;
        table.push((mu, acc));
        if acc > best.1 {
            best = (mu, acc);
        }
    }
    Ok((best.0, table))
}
