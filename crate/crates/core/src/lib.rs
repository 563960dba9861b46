//! Fully decentralized, asynchronous peer-to-peer learning of personalized
//! models over a similarity graph, with an optional differentially private
//! mode.
//!
//! Agents hold local datasets and personal models; a graph-regularized
//! objective ties neighboring models together. A simulated asynchronous
//! clock drives block coordinate-descent updates in which one agent at a
//! time refreshes its own model from its neighbors' latest broadcasts. In
//! private mode each update perturbs the local gradient with calibrated
//! noise and a per-agent ledger accounts for the consumed budget.
//!
//! Module map:
//! - [`graph`]: similarity graphs (weights, degrees, confidences)
//! - [`losses`]: pluggable local losses and their curvature constants
//! - [`objective`]: the stacked objective, block gradients, exact
//!   model-propagation solve
//! - [`privacy`]: noise calibration, composition accounting, allocations
//! - [`solver`]: the asynchronous simulation engine and theoretical bounds
//! - [`data`]: synthetic task generation and ratings ingestion
//! - [`experiments`]: reproducible experiment runners and reports

pub mod data;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod losses;
pub mod objective;
pub mod privacy;
pub mod solver;

mod vecops;

pub use error::{Error, Result};
pub use graph::{build_angle_graph, build_knn_cosine_graph, NetworkGraph};
pub use losses::{
    fit_local_model, ClippedQuadraticLoss, LocalDataset, LogisticLoss, LossModel,
    ModelPropagationLoss,
};
pub use objective::{ModelStack, ObjectiveSpec};
pub use privacy::{
    allocate_optimal, allocate_uniform, composed_epsilon, noise_scale_gaussian,
    noise_scale_laplace, NoiseMechanism, PrivacyLedger,
};
pub use solver::{
    cd_step, prop1_bound, run, thm2_bound, Allocation, Mode, RunConfig, RunOutput, Schedule,
    WarmStart,
};
