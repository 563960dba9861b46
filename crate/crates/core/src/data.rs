//! Experiment data: synthetic linear-classification tasks and
//! recommendation-data ingestion, with train/test splitting and metrics.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{build_angle_graph, NetworkGraph, DEFAULT_CONFIDENCE_FLOOR,
    DEFAULT_WEIGHT_THRESHOLD};
use crate::losses::LocalDataset;
use crate::objective::ModelStack;
use crate::vecops;

/// Probability of flipping a synthetic training label.
pub const DEFAULT_FLIP_PROB: f64 = 0.05;

/// Test points generated per synthetic agent.
pub const SYNTHETIC_TEST_POINTS: usize = 100;

/// Angular clusters the synthetic targets are drawn around. Independent
/// targets give neighbors nothing to share; a small number of clusters puts
/// genuinely related agents next to each other in the angle graph.
pub const DEFAULT_TARGET_CLUSTERS: usize = 5;

/// Per-coordinate Gaussian spread added to a cluster center before
/// normalizing an agent's target.
pub const DEFAULT_TARGET_SPREAD: f64 = 0.1;

/// A generated linear-classification task: per-agent target separators,
/// train sets of 10..=100 points with label noise, clean 100-point test sets
/// (a noisy-label variant of the test labels is kept alongside).
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub n: usize,
    pub p: usize,
    pub targets: Vec<Vec<f64>>,
    /// lambda_i = 1 / m_i.
    pub train: Vec<LocalDataset>,
    /// Clean test points (feature, label from the target separator).
    pub test: Vec<Vec<(Vec<f64>, f64)>>,
    /// Test labels after applying the same flip probability as training.
    pub test_labels_noisy: Vec<Vec<f64>>,
    pub flip_prob: f64,
}

impl SyntheticTask {
    pub fn dataset_sizes(&self) -> Vec<usize> {
        self.train.iter().map(|d| d.size()).collect()
    }
}

fn random_unit_vector(p: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..p)
            .map(|_| {
                // Box-Muller
                let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let norm = vecops::norm2(&v);
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws the synthetic task: clustered unit-vector targets, hypercube
/// features in [-1,1]^p labeled by the target separator with `flip_prob`
/// label noise, and the angle-based similarity graph with confidences
/// proportional to dataset size.
pub fn generate_synthetic(
    n: usize,
    p: usize,
    gamma: f64,
    flip_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(SyntheticTask, NetworkGraph)> {
    if n < 2 || p < 2 {
        return Err(Error::InvalidInput(format!(
            "need n >= 2 and p >= 2, got n={n}, p={p}"
        )));
    }
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::InvalidInput(format!(
            "flip probability {flip_prob} outside [0,1]"
        )));
    }
    let clusters = DEFAULT_TARGET_CLUSTERS.min(n);
    let centers: Vec<Vec<f64>> = (0..clusters).map(|_| random_unit_vector(p, rng)).collect();
    let targets: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let center = &centers[rng.gen_range(0..clusters)];
            let mut t: Vec<f64> = center
                .iter()
                .map(|c| {
                    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                    let u2: f64 = rng.gen();
                    let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    c + DEFAULT_TARGET_SPREAD * g
                })
                .collect();
            let norm = vecops::norm2(&t);
            vecops::scale(&mut t, 1.0 / norm);
            t
        })
        .collect();
    let mut train = Vec::with_capacity(n);
    let mut test = Vec::with_capacity(n);
    let mut test_noisy = Vec::with_capacity(n);
    for target in &targets {
        let m = rng.gen_range(10..=100usize);
        let mut points = Vec::with_capacity(m);
        for _ in 0..m {
            let x: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut y = if vecops::dot(target, &x) >= 0.0 { 1.0 } else { -1.0 };
            if rng.gen::<f64>() < flip_prob {
                y = -y;
            }
            points.push((x, y));
        }
        train.push(LocalDataset::new(points, 1.0 / m as f64)?);
        let mut test_points = Vec::with_capacity(SYNTHETIC_TEST_POINTS);
        let mut noisy_labels = Vec::with_capacity(SYNTHETIC_TEST_POINTS);
        for _ in 0..SYNTHETIC_TEST_POINTS {
            let x: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = if vecops::dot(target, &x) >= 0.0 { 1.0 } else { -1.0 };
            let noisy = if rng.gen::<f64>() < flip_prob { -y } else { y };
            test_points.push((x, y));
            noisy_labels.push(noisy);
        }
        test.push(test_points);
        test_noisy.push(noisy_labels);
    }
    let graph = build_angle_graph(&targets, gamma, DEFAULT_WEIGHT_THRESHOLD)?;
    let sizes: Vec<usize> = train.iter().map(|d| d.size()).collect();
    let graph = graph.set_confidences(&sizes, DEFAULT_CONFIDENCE_FLOOR)?;
    let task = SyntheticTask {
        n,
        p,
        targets,
        train,
        test,
        test_labels_noisy: test_noisy,
        flip_prob,
    };
    Ok((task, graph))
}

/// One user's ratings split into train/test, already mean-centered by the
/// training mean.
#[derive(Debug, Clone)]
pub struct UserRatings {
    /// Original dataset user id.
    pub user_id: u32,
    /// (item index, centered rating) training pairs.
    pub train: Vec<(usize, f64)>,
    /// (item index, centered rating) held-out pairs.
    pub test: Vec<(usize, f64)>,
    /// Mean of the raw training ratings.
    pub train_mean: f64,
    /// Raw (uncentered) training ratings by item index, for similarity
    /// graphs.
    pub raw_train: Vec<(usize, f64)>,
}

/// Ratings for all users plus the item universe.
#[derive(Debug, Clone)]
pub struct RatingsTask {
    pub users: Vec<UserRatings>,
    pub n_items: usize,
    /// Users whose total rating count fell below the requested minimum
    /// (retained, reported).
    pub below_min_ratings: Vec<usize>,
}

impl RatingsTask {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn train_sizes(&self) -> Vec<usize> {
        self.users.iter().map(|u| u.train.len()).collect()
    }

    /// Sparse raw training-rating vectors over the item universe, the rows
    /// the similarity graph is built from.
    pub fn raw_train_vectors(&self) -> Vec<Vec<f64>> {
        self.users
            .iter()
            .map(|u| {
                let mut row = vec![0.0; self.n_items];
                for &(item, r) in &u.raw_train {
                    row[item] = r;
                }
                row
            })
            .collect()
    }

    /// Per-user regularized training datasets in feature space:
    /// points (phi_item, centered rating), lambda_i = 1 / m_i.
    pub fn feature_datasets(&self, features: &[Vec<f64>]) -> Result<Vec<LocalDataset>> {
        if features.len() != self.n_items {
            return Err(Error::DimensionMismatch {
                expected: self.n_items,
                got: features.len(),
            });
        }
        self.users
            .iter()
            .map(|u| {
                let points: Vec<(Vec<f64>, f64)> = u
                    .train
                    .iter()
                    .map(|&(item, r)| (features[item].clone(), r))
                    .collect();
                let lambda = if points.is_empty() { 0.0 } else { 1.0 / points.len() as f64 };
                LocalDataset::new(points, lambda)
            })
            .collect()
    }
}

/// Parses tab-separated `user item rating timestamp` lines, mean-centers
/// ratings user-wise on the training portion only, and splits 80/20 per user
/// with a per-user seeded shuffle (adding a user never reshuffles others).
pub fn load_ratings(text: &str, min_ratings: usize, seed: u64) -> Result<RatingsTask> {
    let mut per_user: BTreeMap<u32, Vec<(u32, f64)>> = BTreeMap::new();
    let mut max_item: u32 = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut fields = line.split_whitespace();
        let mut field = |name: &str| {
            fields.next().ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("missing {name}"),
            })
        };
        let user: u32 = field("user")?
            .parse()
            .map_err(|e| Error::Parse { line: lineno, msg: format!("user: {e}") })?;
        let item: u32 = field("item")?
            .parse()
            .map_err(|e| Error::Parse { line: lineno, msg: format!("item: {e}") })?;
        let rating: f64 = field("rating")?
            .parse()
            .map_err(|e| Error::Parse { line: lineno, msg: format!("rating: {e}") })?;
        // timestamp ignored
        if item == 0 {
            return Err(Error::Parse { line: lineno, msg: "item ids are 1-based".into() });
        }
        max_item = max_item.max(item);
        per_user.entry(user).or_default().push((item - 1, rating));
    }
    if per_user.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_items = max_item as usize;
    let mut users = Vec::with_capacity(per_user.len());
    let mut below_min = Vec::new();
    for (agent_index, (user_id, ratings)) in per_user.into_iter().enumerate() {
        if ratings.len() < min_ratings {
            below_min.push(agent_index);
        }
        // per-user shuffle keyed by (seed, user id)
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(user_id) << 20));
        let mut order: Vec<usize> = (0..ratings.len()).collect();
        for k in (1..order.len()).rev() {
            order.swap(k, rng.gen_range(0..=k));
        }
        let n_test = ratings.len() / 5;
        let test_idx = &order[..n_test];
        let train_idx = &order[n_test..];
        let raw_train: Vec<(usize, f64)> = train_idx
            .iter()
            .map(|&k| (ratings[k].0 as usize, ratings[k].1))
            .collect();
        let train_mean = if raw_train.is_empty() {
            0.0
        } else {
            raw_train.iter().map(|&(_, r)| r).sum::<f64>() / raw_train.len() as f64
        };
        let train: Vec<(usize, f64)> =
            raw_train.iter().map(|&(item, r)| (item, r - train_mean)).collect();
        let test: Vec<(usize, f64)> = test_idx
            .iter()
            .map(|&k| (ratings[k].0 as usize, ratings[k].1 - train_mean))
            .collect();
        users.push(UserRatings { user_id, train, test, train_mean, raw_train });
    }
    Ok(RatingsTask { users, n_items, below_min_ratings: below_min })
}

/// Loads an item-feature matrix from CSV (one row per item, `p` columns) or
/// builds the documented substitute: standard-normal rows scaled to unit L2
/// norm.
pub fn load_or_make_features(
    csv: Option<&str>,
    n_items: usize,
    p: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    if p == 0 {
        return Err(Error::InvalidInput("feature dimension must be positive".into()));
    }
    match csv {
        Some(text) => {
            let mut rows = Vec::new();
            for (idx, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let row: std::result::Result<Vec<f64>, _> =
                    line.split(',').map(|t| t.trim().parse::<f64>()).collect();
                let row =
                    row.map_err(|e| Error::Parse { line: idx + 1, msg: format!("{e}") })?;
                if row.len() != p {
                    return Err(Error::DimensionMismatch { expected: p, got: row.len() });
                }
                rows.push(row);
            }
            if rows.len() != n_items {
                return Err(Error::DimensionMismatch { expected: n_items, got: rows.len() });
            }
            Ok(rows)
        }
        None => Ok((0..n_items)
            .map(|_| {
                let row = random_unit_vector(p, rng);
                debug_assert!((vecops::norm2(&row) - 1.0).abs() < 1e-12);
                row
            })
            .collect()),
    }
}

/// Serializes a feature matrix as CSV; values round-trip exactly.
pub fn features_to_csv(features: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in features {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Which synthetic test labels to score against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestLabels {
    Clean,
    Noisy,
}

/// Per-agent accuracies on the synthetic test sets plus their unweighted
/// mean.
pub fn evaluate_synthetic(
    theta: &ModelStack,
    task: &SyntheticTask,
    labels: TestLabels,
) -> Result<(Vec<f64>, f64)> {
    if theta.n() != task.n || theta.p() != task.p {
        return Err(Error::DimensionMismatch { expected: task.n * task.p, got: theta.n() * theta.p() });
    }
    let mut per_agent = Vec::with_capacity(task.n);
    for i in 0..task.n {
        let block = theta.block(i);
        let mut correct = 0usize;
        for (k, (x, clean_label)) in task.test[i].iter().enumerate() {
            let label = match labels {
                TestLabels::Clean => *clean_label,
                TestLabels::Noisy => task.test_labels_noisy[i][k],
            };
            let pred = if vecops::dot(block, x) >= 0.0 { 1.0 } else { -1.0 };
            if pred == label {
                correct += 1;
            }
        }
        per_agent.push(correct as f64 / task.test[i].len() as f64);
    }
    let mean = per_agent.iter().sum::<f64>() / per_agent.len() as f64;
    Ok((per_agent, mean))
}

/// Per-user test RMSE on held-out centered ratings plus the unweighted mean
/// over users with nonempty test sets; users without test ratings are
/// excluded and reported.
pub fn evaluate_rmse(
    theta: &ModelStack,
    task: &RatingsTask,
    features: &[Vec<f64>],
) -> Result<(Vec<Option<f64>>, f64, Vec<usize>)> {
    if theta.n() != task.n_users() {
        return Err(Error::DimensionMismatch { expected: task.n_users(), got: theta.n() });
    }
    let mut per_user = Vec::with_capacity(task.n_users());
    let mut excluded = Vec::new();
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (i, user) in task.users.iter().enumerate() {
        if user.test.is_empty() {
            per_user.push(None);
            excluded.push(i);
            continue;
        }
        let block = theta.block(i);
        let mse: f64 = user
            .test
            .iter()
            .map(|&(item, r)| {
                let pred = vecops::dot(block, &features[item]);
                (pred - r) * (pred - r)
            })
            .sum::<f64>()
            / user.test.len() as f64;
        let rmse = mse.sqrt();
        per_user.push(Some(rmse));
        sum += rmse;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok((per_user, sum / counted as f64, excluded))
}
