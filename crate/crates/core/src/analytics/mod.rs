//! Expert attribution and routing diagnostics over recorded gate traces.

mod affinity;
mod calibration;
mod interference;
mod selection;
mod stats;
mod trace;

pub use affinity::{affinity_scores, token_assignment_proportion, top_k_sets, AffinitySummary};
pub use calibration::{sample_disjoint, sample_subset};
pub use interference::{gradient_interference, ExpertGradNorm, InterferenceReport, PairCosine};
pub use selection::{random_plan, rank_and_select, Anchor, PlanEntry, SelectionPlan, Strategy};
pub use stats::{
    average_ranks, gini, long_tail_stats, overlap_ratio, spearman, weighted_norm_rank_check, LongTail,
    RankCheck,
};
pub use trace::{RoutingTrace, TraceRecord};
