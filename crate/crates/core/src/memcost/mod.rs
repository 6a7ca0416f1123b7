//! HBM traffic accounting and fusion planning for operator graphs.

mod cost;
mod exec;
mod graph;
mod plan;

pub use cost::{baseline_cost, fused_cost, group_cost, MemCost};
pub use exec::{
    check_equivalence, execute_reference, random_graph, random_inputs, relative_diff,
    EquivalenceReport, ExecInputs, Tensor, DEFAULT_RTOL, MAX_SPATIAL,
};
pub use graph::{adaln_projections, vae_block, Graph, OpKind, OpNode, TensorSpec};
pub use plan::{
    choose_tile, plan_fusion, plan_horizontal_fusion, plan_vertical_fusion, working_set,
    FusionGroup, FusionPlan, GroupKind, GroupSummary, HorizontalFusion, TileGeometry, WorkingSet,
    MIN_TILE,
};
