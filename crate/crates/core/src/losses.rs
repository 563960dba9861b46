//! Per-agent local losses: value, gradient and the constants that drive step
//! sizes, convergence bounds and noise calibration.
//!
//! Every loss works on the regularized empirical form
//! `(1/m) sum_j l(theta; x_j, y_j) + lambda * ||theta||^2`, so the
//! regularizer's strong convexity is `2 * lambda`.

use crate::error::{Error, Result};
use crate::vecops;

/// One agent's training data plus its L2 regularization strength.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    points: Vec<(Vec<f64>, f64)>,
    lambda: f64,
}

impl LocalDataset {
    pub fn new(points: Vec<(Vec<f64>, f64)>, lambda: f64) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::InvalidInput(format!(
                "regularizer lambda {lambda} must be finite and nonnegative"
            )));
        }
        if let Some(p) = points.first().map(|(x, _)| x.len()) {
            if let Some(bad) = points.iter().position(|(x, _)| x.len() != p) {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: points[bad].0.len(),
                });
            }
        }
        Ok(LocalDataset { points, lambda })
    }

    pub fn size(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(|(x, _)| x.len())
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn points(&self) -> &[(Vec<f64>, f64)] {
        &self.points
    }

    /// Same points under a different regularization strength.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        LocalDataset::new(self.points.clone(), lambda)
    }
}

/// A pluggable local loss: value, gradient and curvature constants.
///
/// `value` and `gradient` are pure functions of `theta`; implementations
/// panic on a dimension mismatch (callers validate sizes at the stack level).
pub trait LossModel: Send + Sync {
    fn dim(&self) -> usize;

    /// m_i, the number of training points behind this loss (0 when the loss
    /// is not empirical, e.g. model propagation).
    fn data_size(&self) -> usize;

    /// The L2 regularization strength lambda_i.
    fn regularizer(&self) -> f64;

    fn value(&self, theta: &[f64]) -> f64;

    fn gradient(&self, theta: &[f64]) -> Vec<f64>;

    /// L_i^loc, a Lipschitz constant of the gradient. Conservative bounds are
    /// fine: they only shrink step sizes.
    fn lipschitz_grad(&self) -> f64;

    /// sigma_i^loc, a strong convexity lower bound (0 when none is known).
    fn strong_convexity(&self) -> f64;

    /// L_0: bound used to calibrate L1 (Laplace) noise, when the loss
    /// declares one.
    fn point_lipschitz_l1(&self) -> Option<f64>;

    /// L_0^*: bound used to calibrate L2 (Gaussian) noise, when declared.
    fn point_lipschitz_l2(&self) -> Option<f64> {
        None
    }

    /// Per-point gradient of the unregularized loss, as it enters the
    /// empirical average (clipped losses return the clipped gradient).
    fn point_gradient(&self, _theta: &[f64], _point: usize) -> Option<Vec<f64>> {
        None
    }

    /// The anchor of a quadratic model-propagation loss, when this is one.
    fn anchor(&self) -> Option<&[f64]> {
        None
    }

    /// The same empirical loss under a different regularization strength
    /// (used to pre-train warm-start anchors with heavier shrinkage than the
    /// run itself). Losses without data return `None`.
    fn reregularized(&self, _lambda: f64) -> Option<Box<dyn LossModel>> {
        None
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(z)) without overflow.
fn log1pexp(z: f64) -> f64 {
    if z > 33.0 {
        z
    } else if z > -37.0 {
        z.exp().ln_1p()
    } else {
        0.0
    }
}

/// Regularized logistic loss `log(1 + exp(-y theta^T x))`, labels in {-1,+1}.
///
/// The per-point Lipschitz bound L_0 is a declared property of the data
/// scaling (default 1, matching features with sup-norm at most 1); it is
/// validated empirically by [`max_point_gradient_norm`] probes.
#[derive(Debug, Clone)]
pub struct LogisticLoss {
    data: LocalDataset,
    l0_l1: f64,
    lipschitz: f64,
}

impl LogisticLoss {
    pub fn new(data: LocalDataset) -> Result<Self> {
        Self::with_point_lipschitz(data, 1.0)
    }

    pub fn with_point_lipschitz(data: LocalDataset, l0_l1: f64) -> Result<Self> {
        if data.size() == 0 {
            return Err(Error::EmptyDataset);
        }
        if let Some((_, y)) = data.points().iter().find(|(_, y)| *y != 1.0 && *y != -1.0) {
            return Err(Error::InvalidInput(format!(
                "logistic label {y} outside {{-1,+1}}"
            )));
        }
        if l0_l1 <= 0.0 {
            return Err(Error::InvalidInput(format!("L0 {l0_l1} must be positive")));
        }
        // hessian of one point is sigma(1-sigma) x x^T <= ||x||^2 / 4
        let max_sq = data
            .points()
            .iter()
            .map(|(x, _)| vecops::dot(x, x))
            .fold(0.0f64, f64::max);
        let lipschitz = 0.25 * max_sq + 2.0 * data.lambda();
        Ok(LogisticLoss { data, l0_l1, lipschitz })
    }

    pub fn data(&self) -> &LocalDataset {
        &self.data
    }
}

impl LossModel for LogisticLoss {
    fn dim(&self) -> usize {
        self.data.dim().unwrap()
    }

    fn data_size(&self) -> usize {
        self.data.size()
    }

    fn regularizer(&self) -> f64 {
        self.data.lambda()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        assert_eq!(theta.len(), self.dim());
        let m = self.data.size() as f64;
        let data_term: f64 = self
            .data
            .points()
            .iter()
            .map(|(x, y)| log1pexp(-y * vecops::dot(theta, x)))
            .sum::<f64>()
            / m;
        data_term + self.data.lambda() * vecops::dot(theta, theta)
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        assert_eq!(theta.len(), self.dim());
        let m = self.data.size() as f64;
        let mut grad = vec![0.0; theta.len()];
        for (x, y) in self.data.points() {
            let s = sigmoid(-y * vecops::dot(theta, x));
            vecops::axpy(-y * s / m, x, &mut grad);
        }
        vecops::axpy(2.0 * self.data.lambda(), theta, &mut grad);
        grad
    }

    fn lipschitz_grad(&self) -> f64 {
        self.lipschitz
    }

    fn strong_convexity(&self) -> f64 {
        2.0 * self.data.lambda()
    }

    fn point_lipschitz_l1(&self) -> Option<f64> {
        Some(self.l0_l1)
    }

    fn point_lipschitz_l2(&self) -> Option<f64> {
        Some(self.l0_l1)
    }

    fn point_gradient(&self, theta: &[f64], point: usize) -> Option<Vec<f64>> {
        let (x, y) = self.data.points().get(point)?;
        let s = sigmoid(-y * vecops::dot(theta, x));
        Some(x.iter().map(|xi| -y * s * xi).collect())
    }

    fn reregularized(&self, lambda: f64) -> Option<Box<dyn LossModel>> {
        let data = self.data.with_lambda(lambda).ok()?;
        LogisticLoss::with_point_lipschitz(data, self.l0_l1)
            .ok()
            .map(|l| Box::new(l) as Box<dyn LossModel>)
    }
}

/// Quadratic loss `(theta^T phi - r)^2` with per-point gradient clipping.
///
/// Each per-point gradient `2 (theta^T phi - r) phi` is rescaled to L2 norm
/// at most `clip` before averaging; the regularizer gradient is added
/// unclipped. The clipping bound replaces L_0 in the noise calibration.
#[derive(Debug, Clone)]
pub struct ClippedQuadraticLoss {
    data: LocalDataset,
    clip: f64,
    lipschitz: f64,
}

/// Default gradient clipping bound, large enough that clipping almost never
/// triggers on unit-norm features.
pub const DEFAULT_GRADIENT_CLIP: f64 = 10.0;

impl ClippedQuadraticLoss {
    pub fn new(data: LocalDataset, clip: f64) -> Result<Self> {
        if data.size() == 0 {
            return Err(Error::EmptyDataset);
        }
        if clip <= 0.0 {
            return Err(Error::InvalidInput(format!("clip {clip} must be positive")));
        }
        // per-point hessian is 2 phi phi^T
        let max_sq = data
            .points()
            .iter()
            .map(|(x, _)| vecops::dot(x, x))
            .fold(0.0f64, f64::max);
        let lipschitz = 2.0 * max_sq + 2.0 * data.lambda();
        Ok(ClippedQuadraticLoss { data, clip, lipschitz })
    }

    pub fn data(&self) -> &LocalDataset {
        &self.data
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    fn clipped_point_gradient(&self, theta: &[f64], x: &[f64], r: f64) -> Vec<f64> {
        let resid = vecops::dot(theta, x) - r;
        let mut g: Vec<f64> = x.iter().map(|xi| 2.0 * resid * xi).collect();
        let norm = vecops::norm2(&g);
        if norm > self.clip {
            vecops::scale(&mut g, self.clip / norm);
        }
        g
    }
}

impl LossModel for ClippedQuadraticLoss {
    fn dim(&self) -> usize {
        self.data.dim().unwrap()
    }

    fn data_size(&self) -> usize {
        self.data.size()
    }

    fn regularizer(&self) -> f64 {
        self.data.lambda()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        assert_eq!(theta.len(), self.dim());
        let m = self.data.size() as f64;
        let data_term: f64 = self
            .data
            .points()
            .iter()
            .map(|(x, r)| {
                let resid = vecops::dot(theta, x) - r;
                resid * resid
            })
            .sum::<f64>()
            / m;
        data_term + self.data.lambda() * vecops::dot(theta, theta)
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        assert_eq!(theta.len(), self.dim());
        let m = self.data.size() as f64;
        let mut grad = vec![0.0; theta.len()];
        for (x, r) in self.data.points() {
            let g = self.clipped_point_gradient(theta, x, *r);
            vecops::axpy(1.0 / m, &g, &mut grad);
        }
        vecops::axpy(2.0 * self.data.lambda(), theta, &mut grad);
        grad
    }

    fn lipschitz_grad(&self) -> f64 {
        self.lipschitz
    }

    fn strong_convexity(&self) -> f64 {
        2.0 * self.data.lambda()
    }

    fn point_lipschitz_l1(&self) -> Option<f64> {
        Some(self.clip)
    }

    fn point_lipschitz_l2(&self) -> Option<f64> {
        Some(self.clip)
    }

    fn point_gradient(&self, theta: &[f64], point: usize) -> Option<Vec<f64>> {
        let (x, r) = self.data.points().get(point)?;
        Some(self.clipped_point_gradient(theta, x, *r))
    }

    fn reregularized(&self, lambda: f64) -> Option<Box<dyn LossModel>> {
        let data = self.data.with_lambda(lambda).ok()?;
        ClippedQuadraticLoss::new(data, self.clip)
            .ok()
            .map(|l| Box::new(l) as Box<dyn LossModel>)
    }
}

/// Quadratic pull toward a pre-trained local model:
/// `0.5 * ||theta - anchor||^2`, 1-strongly convex with 1-Lipschitz gradient.
#[derive(Debug, Clone)]
pub struct ModelPropagationLoss {
    anchor: Vec<f64>,
}

impl ModelPropagationLoss {
    pub fn new(anchor: Vec<f64>) -> Result<Self> {
        if anchor.is_empty() {
            return Err(Error::InvalidInput("empty anchor".into()));
        }
        Ok(ModelPropagationLoss { anchor })
    }
}

impl LossModel for ModelPropagationLoss {
    fn dim(&self) -> usize {
        self.anchor.len()
    }

    fn data_size(&self) -> usize {
        0
    }

    fn regularizer(&self) -> f64 {
        0.0
    }

    fn value(&self, theta: &[f64]) -> f64 {
        assert_eq!(theta.len(), self.anchor.len());
        0.5 * theta
            .iter()
            .zip(&self.anchor)
            .map(|(t, a)| (t - a) * (t - a))
            .sum::<f64>()
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        assert_eq!(theta.len(), self.anchor.len());
        vecops::sub(theta, &self.anchor)
    }

    fn lipschitz_grad(&self) -> f64 {
        1.0
    }

    fn strong_convexity(&self) -> f64 {
        1.0
    }

    fn point_lipschitz_l1(&self) -> Option<f64> {
        None
    }

    fn anchor(&self) -> Option<&[f64]> {
        Some(&self.anchor)
    }
}

/// Deterministic full-gradient descent with backtracking line search from the
/// zero vector, run until the gradient norm drops below `tol`.
///
/// Backtracking halves the step while the Armijo test fails; at 1/L the
/// descent lemma guarantees progress even once floating-point value
/// comparisons can no longer certify it, so the step never shrinks further.
pub fn fit_local_model(loss: &dyn LossModel, tol: f64, max_iters: usize) -> Result<Vec<f64>> {
    let p = loss.dim();
    let base_step = 1.0 / loss.lipschitz_grad().max(f64::MIN_POSITIVE);
    let mut theta = vec![0.0; p];
    let mut step = base_step;
    for _ in 0..max_iters {
        let grad = loss.gradient(&theta);
        let grad_norm = vecops::norm2(&grad);
        if grad_norm <= tol {
            return Ok(theta);
        }
        let value = loss.value(&theta);
        step = (step * 2.0).min(1e6 * base_step);
        let mut accepted = false;
        while step > base_step {
            let mut candidate = theta.clone();
            vecops::axpy(-step, &grad, &mut candidate);
            if loss.value(&candidate) <= value - 0.25 * step * grad_norm * grad_norm {
                theta = candidate;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            step = base_step;
            vecops::axpy(-step, &grad, &mut theta);
        }
    }
    let grad = loss.gradient(&theta);
    let grad_norm = vecops::norm2(&grad);
    if grad_norm <= tol {
        return Ok(theta);
    }
    Err(Error::NoConvergence { grad_norm, iters: max_iters })
}

/// Norm used when probing per-point gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeNorm {
    L1,
    L2,
    LInf,
}

/// Largest per-point gradient norm over all data points and all probe
/// parameter vectors. Feeds the empirical validation of a declared L_0.
pub fn max_point_gradient_norm(
    loss: &dyn LossModel,
    probes: &[Vec<f64>],
    norm: ProbeNorm,
) -> f64 {
    let mut worst = 0.0f64;
    for theta in probes {
        for idx in 0..loss.data_size() {
            if let Some(g) = loss.point_gradient(theta, idx) {
                let v = match norm {
                    ProbeNorm::L1 => vecops::norm1(&g),
                    ProbeNorm::L2 => vecops::norm2(&g),
                    ProbeNorm::LInf => vecops::norm_inf(&g),
                };
                worst = worst.max(v);
            }
        }
    }
    worst
}

/// Central finite differences of `f` around `theta`; the shared oracle for
/// gradient checks.
pub fn finite_difference_gradient(f: &dyn Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; theta.len()];
    let mut probe = theta.to_vec();
    for k in 0..theta.len() {
        let step = h * (1.0 + theta[k].abs());
        probe[k] = theta[k] + step;
        let plus = f(&probe);
        probe[k] = theta[k] - step;
        let minus = f(&probe);
        probe[k] = theta[k];
        grad[k] = (plus - minus) / (2.0 * step);
    }
    grad
}
