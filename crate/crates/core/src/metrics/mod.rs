//! Parameter and multiply accounting, false-accept metrics, the
//! training-time profiler, and per-width run reports.

mod count;
mod fa;
mod profile;
mod report;

pub use count::{
    cost_breakdown, count_multiplies, count_params, instrumented_multiplies, CostBreakdown, LayerCost, LayerKind,
    NormSets,
};
pub use fa::{false_accepts_at_miss_rate, relative_fa, FaResult};
pub use profile::{profile_time_per_step, ProfileConfig, ProfileRow, ProfileTable, MIN_RELIABLE_MS};
pub use report::{FaSettings, ReportRow, RunReport};

#[cfg(test)]
mod tests;
