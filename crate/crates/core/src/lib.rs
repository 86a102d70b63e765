//! Discrete-time simulator and analysis toolkit for affinity scheduling in
//! clusters with N levels of data locality: the GB-PANDAS load balancer and
//! its baselines, the LP-defined capacity region, and runtime checks of the
//! workload/unused-service identities the stability analysis relies on.

pub mod analysis;
pub mod capacity;
pub mod config;
pub mod engine;
pub mod experiment;
pub mod policies;
pub mod simplex;
pub mod stochastic;
pub mod topology;

pub use capacity::{
    brute_force_membership, capacity_membership, coarsen_decomposition, refine_decomposition,
    CapacityResult, Decomposition, RefinedDecomposition,
};
pub use engine::{Engine, SlotLedger, SlotOutcome, Task};
pub use policies::{policy_by_name, Policy, POLICY_NAMES};
pub use stochastic::{
    replication_rng, ArrivalModel, Popularity, RateVector, ServiceFamily, ServiceModel, SimRng,
};
pub use topology::{ClusterTopology, TaskType, TypeCatalog, TypeId};
