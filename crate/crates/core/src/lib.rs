//! Hashing-based importance sampling for high-dimensional kernel density
//! estimation: geometric weight levels driving a data-independent Euclidean
//! LSH estimator, a data-dependent spherical-LSH recursion tree, and the
//! numerical machinery for the query-exponent bound.

pub mod annkde;
pub mod counters;
pub mod dataset;
pub mod ddtree;
pub mod error;
pub mod kernels;
pub mod lsh;
pub mod numeric;
pub mod pseudorandom;
pub mod scalar;
pub mod sphere;

pub use annkde::{baseline_random_sampling, kde_exact, median_of_means, mu_search, preprocess, DiIndex, DiParams, Estimate};
pub use counters::WorkCounters;
pub use dataset::Dataset;
pub use ddtree::{dd_estimate_kde, dd_preprocess, dd_scale, DdParams, DdTree};
pub use error::{Error, Result};
pub use kernels::{build_level_plan, kernel_cost, weight_level_of, Kernel, LevelPlan, LevelPlanConfig};
pub use lsh::{build_table, jl_project, probe, sample_family, BucketTable, LshFamily, LshMode, LshModeSpec};
pub use pseudorandom::{certify, pseudorandomify, CertifyOutcome, PrParams, SphereShell};
pub use scalar::Real;
pub use sphere::{cap_f, cap_g, cap_g_sym, project_dist, smallest_enclosing_ball, solve_eta, Ball, CapParams};

/// Concrete aliases for the common instantiation.
pub type Kernel64 = Kernel<f64>;
pub type LevelPlan64 = LevelPlan<f64>;
pub type Dataset64 = Dataset<f64>;
pub type LshFamily64 = LshFamily<f64>;
