//! Decision-making and motion planning for forced highway merging under
//! bounded, online-estimated surrounding-vehicle acceleration uncertainty.
//!
//! The pipeline, executed once per control step by the closed-loop simulator
//! in [`sim`]:
//!
//! 1. [`estimator`] — maintain per-vehicle acceleration bounds from observed
//!    accelerations and predict forward occupancy by polytope reachability;
//! 2. [`decision`] — pick a lane/velocity reference by scoring velocity-tracking
//!    maneuvers, each with a safe reference velocity from a univariate QP;
//! 3. [`planner`] — track the reference with a nonlinear MPC whose collision
//!    constraints are the dual (multiplier) form of polytope distance.
//!
//! [`polytope`] supplies exact 2-D convex polygon arithmetic and [`models`]
//! the vehicle dynamics. Robust (`Rmpc`) and deterministic (`Dmpc`) baselines
//! reuse the same pipeline with the input set swapped out.

pub mod decision;
pub mod estimator;
pub mod models;
pub mod planner;
pub mod polytope;
pub mod sim;

pub use models::{EvControl, EvState, SvState, VehicleGeometry};
pub use polytope::Polytope2;
pub use sim::{PlannerKind, ScenarioConfig};
