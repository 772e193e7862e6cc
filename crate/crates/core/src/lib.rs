//! Simulator and distributed resource-allocation stack for multi-cell
//! wirelessly powered communication networks.
//!
//! A slotted environment models hybrid access points (H-APs) that charge
//! their users over the air before collecting data from them; time and
//! power splits are chosen per slot either by per-cell actor-critic
//! agents trained from local observations only, or by centralized
//! baselines (equal split, alternating projected gradient, grid search).
//!
//! Modules:
//! - [`channel`]: Gauss-Markov fading, geometry, path gains, dBm helpers.
//! - [`env`]: per-slot physics (intervals, interference, rates, harvested
//!   energy, price-based rewards).
//! - [`nn`]: dense networks with manual backprop and plain SGD.
//! - [`agent`]: local state construction, action sampling, and the
//!   per-slot actor/critic updates.
//! - [`baselines`]: centralized reference solvers.
//! - [`runner`]: experiment orchestration, metrics, checkpoints.

pub mod agent;
pub mod baselines;
pub mod channel;
pub mod env;
pub mod error;
pub mod nn;
pub mod runner;

pub use channel::{FadingProcess, Geometry, LinkGains};
pub use env::{EhModel, SlotOutcome, SlotSchedule};
pub use error::{Error, Result};
pub use nn::{DenseNet, TwoHeadActorNet};
