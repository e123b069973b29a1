//! Bubble ratios in closed form and from timelines, and peak memory.

mod analytic;
mod memory;
mod report;
mod sim;

pub use analytic::{bubble_ratio_analytic, throughput_gain};
pub use memory::{peak_memory, MemoryModel, MemoryPeaks};
pub use report::{join_units, rows_to_csv, rows_to_json, BubbleReport, ReportRow};
pub use sim::{
    bubble_ratio_from_timeline, bubble_ratio_from_trace, simulate_timeline, CostModel, RankCosts, TickEvent, Timeline,
};
