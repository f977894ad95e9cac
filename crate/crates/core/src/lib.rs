//! Budget-aware tree speculative decoding over block-diffusion drafter marginals.
//!
//! A drafter emits independent per-position marginals for a block of future
//! tokens. [`lattice`] truncates them to a candidate lattice, [`draft_tree`]
//! grows surrogate-optimal trees over it best-first, [`cost_model`] predicts
//! what verifying a tree of a given size costs, and [`controller`] picks the
//! budget that maximizes the estimated speedup. [`verify_sim`] closes the
//! loop against a synthetic target and [`harness`] runs experiments.
//! [`oracle`] holds brute-force references for all of the above.

pub mod controller;
pub mod cost_model;
pub mod draft_tree;
pub mod error;
pub mod harness;
pub mod lattice;
pub mod oracle;
pub mod real;
pub mod verify_sim;

pub use controller::{replay_trace, run_cycle, BudgetTrace, ControllerConfig, ControllerDecision, StopReason};
pub use cost_model::{
    bytes, ema_update, estimate_verify_latency, fit_static_calibration, flops, roofline_latency, CalibrationFit,
    CostModelParams, CycleLatencies, EmaBias, EstimatorVariant, LatencyEstimator, LatencyQuery, VerifyLatencyModel,
};
pub use draft_tree::{beam_expand, best_first_expand, marginal_gains, surrogate_of, DraftTree, NodeId};
pub use error::{Error, Result};
pub use lattice::{
    generate_synthetic_pair, sample_continuation, top_k_truncate, CandidateLattice, MarginalBlock, SyntheticPair,
    SyntheticPairConfig, TokenId,
};
pub use real::Real;
pub use verify_sim::{decode, realized_speedup, CycleRecord, DecodeConfig, Policy, TargetRule};

pub type MarginalBlockF64 = MarginalBlock<f64>;
pub type MarginalBlockF32 = MarginalBlock<f32>;
pub type CandidateLatticeF64 = CandidateLattice<f64>;
pub type CandidateLatticeF32 = CandidateLattice<f32>;
pub type DraftTreeF64 = DraftTree<f64>;
pub type DraftTreeF32 = DraftTree<f32>;
pub type CostModelParamsF64 = CostModelParams<f64>;
pub type CostModelParamsF32 = CostModelParams<f32>;
pub type ControllerDecisionF64 = ControllerDecision<f64>;
pub type ControllerDecisionF32 = ControllerDecision<f32>;
