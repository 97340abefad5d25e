//! Neural auction mechanisms trained under an explicit regret budget.
//!
//! Three network families map bid profiles to randomized allocations and
//! individually rational payments: a fully-connected RegretNet, a
//! permutation-equivariant EquivariantNet and the attention-based
//! RegretFormer. Training alternates an inner gradient search for each
//! bidder's most profitable misreport with an outer update that maximizes
//! revenue while a dual multiplier holds regret at a chosen fraction of
//! revenue.

pub mod architectures;
pub mod auction;
pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod params;
pub mod training;
pub mod validation;

pub use error::{Error, Result};
