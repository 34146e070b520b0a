//! Exhaustive-enumeration checks of the entropy, residual and duality claims,
//! synthetic sources and workloads, and the consolidated claim matrix.

pub mod asymptotic;
pub mod claims;
pub mod duality;
pub mod entropy;
pub mod metric;
pub mod residual;
pub mod workload;

pub use asymptotic::{
    model_trace, running_mean, verify_asymptotic, EntropySource, ExplicitSource, MarkovSource,
};
pub use claims::{verify_all, ClaimMatrix, ClaimRow, VerifyOptions};
pub use duality::{verify_duality, DualityReport};
pub use entropy::{
    conditional_entropies, verify_injectivity, verify_sequential_bound, EnumerationReport,
};
pub use metric::{verify_metric_inequalities, MetricReport};
pub use residual::{verify_residual_bounds, BoundCheck, ResidualBoundsReport};
pub use workload::{
    generate_workload, read_workload, write_workload, Workload, WorkloadFile, WorkloadSpec,
};
