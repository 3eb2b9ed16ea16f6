//! Simulator and cost model for depthwise convolution with duplicated kernels
//! on a tiled compute-in-memory macro.
//!
//! - [`schedule`]: shift schedules and their partition property
//! - [`engine`]: bit-exact functional execution and reference convolutions
//! - [`mapping`]: BIG/LITTLE placement onto tiles
//! - [`cost`]: traffic, latency and energy accounting
//! - [`baselines`]: weight- and input-stationary comparison dataflows
//! - [`workload`]: built-in networks and layer files
//! - [`report`]: network reports and comparison tables
//! - [`verify`]: self-check suite

pub mod baselines;
pub mod cost;
pub mod engine;
pub mod error;
pub mod mapping;
pub mod report;
pub mod schedule;
pub mod verify;
pub mod workload;

pub use baselines::{plan_for, plan_is_baseline, plan_is_convdk, plan_ws_baseline, DataflowId};
pub use cost::{
    dram_overlap_check, energy_total, latency_rules, simulate_layer, CostError, CostReport, EnergyModel, EnergyReport,
    LatencyBreakdown, TrafficLedger,
};
pub use engine::{
    conv1d_convdk, dwconv_multichannel, dwconv_tile, reference_conv1d, reference_dwconv, AccumTensor, EnableMask,
    EngineError, IntTensor,
};
pub use error::{Error, ErrorClass};
pub use mapping::{
    compute_tw, duplication_count, execute, plan_big, plan_little, plan_ws_convdk, select_scheduler, utilization,
    LayerSpec, MacroConfig, MappingError, MappingPlan, Scheduler,
};
pub use report::{run_network, ComparisonRow, ComparisonTable, NetworkReport};
pub use schedule::{
    check_conditions, find_m1_n1, full_schedule, index_sets, verify_partition, ConditionReport, KernelGeometry,
    ScheduleError, ScheduleParams, ShiftSchedule, Step,
};
pub use workload::{builtin, builtin_models, load_network, NetworkSpec, WorkloadError};
