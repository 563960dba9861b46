//! The global graph-regularized objective: stacked models, per-block partial
//! gradients, block Lipschitz constants and the strong convexity bound.
//!
//! The objective is
//! `Q(Theta) = 0.5 * sum_{i<j} W_ij ||Theta_i - Theta_j||^2
//!           + mu * sum_i D_ii c_i Loss_i(Theta_i)`
//! with per-block gradient
//! `[grad Q]_i = D_ii (Theta_i + mu c_i grad Loss_i(Theta_i))
//!             - sum_{j in N_i} W_ij Theta_j`.

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::losses::LossModel;
use crate::vecops;

/// The stacked parameter vector: `n` blocks of `p` scalars, block `i` holding
/// agent `i`'s model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStack {
    n: usize,
    p: usize,
    data: Vec<f64>,
}

impl ModelStack {
    pub fn zeros(n: usize, p: usize) -> Self {
        ModelStack { n, p, data: vec![0.0; n * p] }
    }

    pub fn constant(n: usize, p: usize, value: f64) -> Self {
        ModelStack { n, p, data: vec![value; n * p] }
    }

    pub fn from_blocks(blocks: &[Vec<f64>]) -> Result<Self> {
        let n = blocks.len();
        if n == 0 {
            return Err(Error::InvalidInput("no blocks".into()));
        }
        let p = blocks[0].len();
        let mut data = Vec::with_capacity(n * p);
        for b in blocks {
            if b.len() != p {
                return Err(Error::DimensionMismatch { expected: p, got: b.len() });
            }
            data.extend_from_slice(b);
        }
        Ok(ModelStack { n, p, data })
    }

    pub fn from_flat(n: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * p {
            return Err(Error::DimensionMismatch { expected: n * p, got: data.len() });
        }
        Ok(ModelStack { n, p, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn set_block(&mut self, i: usize, values: &[f64]) -> Result<()> {
        if i >= self.n {
            return Err(Error::IndexOutOfRange { index: i, n: self.n });
        }
        if values.len() != self.p {
            return Err(Error::DimensionMismatch { expected: self.p, got: values.len() });
        }
        self.block_mut(i).copy_from_slice(values);
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn l2_norm(&self) -> f64 {
        vecops::norm2(&self.data)
    }

    pub fn linf_distance(&self, other: &ModelStack) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// CSV with one row per agent, `p` columns. Values round-trip exactly.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row: Vec<String> = self.block(i).iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut blocks = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|t| t.trim().parse::<f64>()).collect();
            blocks.push(row.map_err(|e| Error::Parse { line: idx + 1, msg: format!("{e}") })?);
        }
        Self::from_blocks(&blocks)
    }

    /// File forms of the CSV serialization, for warm-start handoff.
    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }
}

/// The assembled problem: graph, per-agent losses, trade-off `mu`, and the
/// cached constants `L_i = D_ii (1 + mu c_i L_i^loc)`,
/// `sigma >= mu min_i D_ii c_i sigma_i^loc`, `L_min`, `L_max`.
pub struct ObjectiveSpec {
    graph: NetworkGraph,
    losses: Vec<Box<dyn LossModel>>,
    mu: f64,
    p: usize,
    block_lipschitz: Vec<f64>,
    sigma_bound: f64,
    l_min: f64,
    l_max: f64,
}

impl ObjectiveSpec {
    pub fn new(graph: NetworkGraph, losses: Vec<Box<dyn LossModel>>, mu: f64) -> Result<Self> {
        if mu <= 0.0 || !mu.is_finite() {
            return Err(Error::InvalidInput(format!("mu {mu} must be positive")));
        }
        if losses.len() != graph.n() {
            return Err(Error::DimensionMismatch { expected: graph.n(), got: losses.len() });
        }
        let p = losses[0].dim();
        if let Some(bad) = losses.iter().position(|l| l.dim() != p) {
            return Err(Error::DimensionMismatch { expected: p, got: losses[bad].dim() });
        }
        let block_lipschitz: Vec<f64> = (0..graph.n())
            .map(|i| {
                graph.degree(i) * (1.0 + mu * graph.confidence(i) * losses[i].lipschitz_grad())
            })
            .collect();
        let sigma_bound = mu
            * (0..graph.n())
                .map(|i| graph.degree(i) * graph.confidence(i) * losses[i].strong_convexity())
                .fold(f64::INFINITY, f64::min);
        let active: Vec<f64> = block_lipschitz.iter().copied().filter(|&l| l > 0.0).collect();
        let l_min = active.iter().copied().fold(f64::INFINITY, f64::min);
        let l_max = active.iter().copied().fold(0.0, f64::max);
        Ok(ObjectiveSpec {
            graph,
            losses,
            mu,
            p,
            block_lipschitz,
            sigma_bound,
            l_min: if l_min.is_finite() { l_min } else { 0.0 },
            l_max,
        })
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn losses(&self) -> &[Box<dyn LossModel>] {
        &self.losses
    }

    pub fn loss(&self, i: usize) -> &dyn LossModel {
        self.losses[i].as_ref()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// L_i = D_ii (1 + mu c_i L_i^loc).
    pub fn block_lipschitz(&self, i: usize) -> f64 {
        self.block_lipschitz[i]
    }

    pub fn sigma_bound(&self) -> f64 {
        self.sigma_bound
    }

    pub fn l_min(&self) -> f64 {
        self.l_min
    }

    pub fn l_max(&self) -> f64 {
        self.l_max
    }

    fn check_stack(&self, theta: &ModelStack) -> Result<()> {
        if theta.n() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), got: theta.n() });
        }
        if theta.p() != self.p {
            return Err(Error::DimensionMismatch { expected: self.p, got: theta.p() });
        }
        Ok(())
    }

    /// Q(Theta). The smoothness term visits each unordered pair once.
    pub fn objective_value(&self, theta: &ModelStack) -> Result<f64> {
        self.check_stack(theta)?;
        let mut smooth = 0.0;
        for i in 0..self.n() {
            let ti = theta.block(i);
            for &(j, w) in self.graph.neighbors(i)? {
                if j > i {
                    let tj = theta.block(j);
                    let sq: f64 = ti.iter().zip(tj).map(|(a, b)| (a - b) * (a - b)).sum();
                    smooth += w * sq;
                }
            }
        }
        let mut local = 0.0;
        for i in 0..self.n() {
            local += self.graph.degree(i)
                * self.graph.confidence(i)
                * self.losses[i].value(theta.block(i));
        }
        Ok(0.5 * smooth + self.mu * local)
    }

    /// [grad Q]_i.
    pub fn partial_gradient(&self, theta: &ModelStack, i: usize) -> Result<Vec<f64>> {
        self.check_stack(theta)?;
        if i >= self.n() {
            return Err(Error::IndexOutOfRange { index: i, n: self.n() });
        }
        let d = self.graph.degree(i);
        let c = self.graph.confidence(i);
        let loss_grad = self.losses[i].gradient(theta.block(i));
        let mut g: Vec<f64> = theta
            .block(i)
            .iter()
            .zip(&loss_grad)
            .map(|(t, lg)| d * (t + self.mu * c * lg))
            .collect();
        for &(j, w) in self.graph.neighbors(i)? {
            vecops::axpy(-w, theta.block(j), &mut g);
        }
        Ok(g)
    }

    /// ||grad Q(Theta)||_2 assembled from all blocks.
    pub fn full_gradient_norm(&self, theta: &ModelStack) -> Result<f64> {
        self.check_stack(theta)?;
        let mut sq = 0.0;
        for i in 0..self.n() {
            let g = self.partial_gradient(theta, i)?;
            sq += vecops::dot(&g, &g);
        }
        Ok(sq.sqrt())
    }

    /// Agents with zero degree; their block of Q is constant and the solver
    /// skips them.
    pub fn isolated_agents(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.graph.degree(i) == 0.0).collect()
    }

    /// Closed-form minimizer when every loss is model propagation. The
    /// quadratic objective separates along the `p` dimensions into `p`
    /// linear systems sharing one symmetric positive definite matrix.
    pub fn solve_model_propagation_exact(&self) -> Result<ModelStack> {
        let n = self.n();
        let anchors: Vec<&[f64]> = self
            .losses
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.anchor().ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "agent {i} does not use a model-propagation loss"
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if self.sigma_bound <= 0.0 {
            return Err(Error::SingularSystem(format!(
                "strong convexity bound {} is not positive",
                self.sigma_bound
            )));
        }
        // M[i][i] = D_ii (1 + mu c_i), M[i][j] = -W_ij
        let mut m = vec![vec![0.0f64; n]; n];
        for i in 0..n {
            m[i][i] = self.graph.degree(i) * (1.0 + self.mu * self.graph.confidence(i));
            for &(j, w) in self.graph.neighbors(i)? {
                m[i][j] = -w;
            }
        }
        let chol = cholesky(&m)?;
        let mut solution = ModelStack::zeros(n, self.p);
        let mut rhs = vec![0.0f64; n];
        for d in 0..self.p {
            for i in 0..n {
                rhs[i] =
                    self.mu * self.graph.degree(i) * self.graph.confidence(i) * anchors[i][d];
            }
            let x = cholesky_solve(&chol, &rhs);
            for i in 0..n {
                solution.block_mut(i)[d] = x[i];
            }
        }
        let residual = self.full_gradient_norm(&solution)?;
        if residual > 1e-8 * (1.0 + solution.l2_norm()) {
            return Err(Error::SingularSystem(format!(
                "exact solve residual {residual:e} too large"
            )));
        }
        Ok(solution)
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
fn cholesky(m: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = m.len();
    let mut l = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::SingularSystem(format!(
                        "non-positive pivot {sum:e} at row {i}"
                    )));
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    x
}
