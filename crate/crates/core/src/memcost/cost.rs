use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::graph::{Graph, OpKind};
use super::plan::{FusionPlan, GroupKind};
use crate::error::{Error, Result};

/// HBM traffic of a schedule. Transactions count whole-tensor accesses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemCost {
    pub activation_bytes: u64,
    pub activation_transactions: u64,
    /// Weights loaded once per group execution (SRAM-resident across tiles).
    pub weight_bytes: u64,
    pub weight_transactions: u64,
    /// Weights reloaded for every tile.
    pub weight_bytes_per_tile: u64,
    /// Statistics sweep of fused groups containing a group_norm.
    pub stats_bytes: u64,
    pub stats_reads: u64,
}

impl MemCost {
    /// Activation, resident-weight and statistics bytes.
    pub fn bytes(&self) -> u64 {
        self.activation_bytes + self.weight_bytes + self.stats_bytes
    }

    pub fn transactions(&self) -> u64 {
        self.activation_transactions + self.weight_transactions
    }

    fn add(&mut self, other: &MemCost) {
        self.activation_bytes += other.activation_bytes;
        self.activation_transactions += other.activation_transactions;
        self.weight_bytes += other.weight_bytes;
        self.weight_transactions += other.weight_transactions;
        self.weight_bytes_per_tile += other.weight_bytes_per_tile;
        self.stats_bytes += other.stats_bytes;
        self.stats_reads += other.stats_reads;
    }
}

fn node_cost(graph: &Graph, idx: usize) -> MemCost {
    let node = &graph.nodes()[idx];
    let reads: u64 = node
        .inputs
        .iter()
        .map(|t| graph.tensor(t).size_bytes())
        .sum();
    let weight = node.weight.as_ref().map_or(0, |w| w.size_bytes());
    MemCost {
        activation_bytes: reads + graph.tensor(&node.output).size_bytes(),
        activation_transactions: node.inputs.len() as u64 + 1,
        weight_bytes: weight,
        weight_transactions: u64::from(node.weight.is_some()),
        weight_bytes_per_tile: weight,
        stats_bytes: 0,
        stats_reads: 0,
    }
}

/// Every operator reads its inputs from and writes its output to HBM.
pub fn baseline_cost(graph: &Graph) -> MemCost {
    let mut total = MemCost::default();
    for i in 0..graph.nodes().len() {
        total.add(&node_cost(graph, i));
    }
    total
}

/// Cost of one group given as node indices.
pub fn group_cost(graph: &Graph, members: &[usize], kind: GroupKind, n_tiles: u64) -> MemCost {
    if members.len() == 1 {
        let mut c = node_cost(graph, members[0]);
        c.weight_bytes_per_tile = c.weight_bytes * n_tiles.max(1);
        return c;
    }
    let inside: HashSet<usize> = members.iter().copied().collect();
    let produced: HashSet<&str> = members
        .iter()
        .map(|&i| graph.nodes()[i].output.as_str())
        .collect();

    let mut ext_in = BTreeSet::new();
    let mut ext_out = BTreeSet::new();
    let mut cost = MemCost::default();
    for &i in members {
        let node = &graph.nodes()[i];
        for t in &node.inputs {
            if !produced.contains(t.as_str()) {
                ext_in.insert(t.as_str());
            }
        }
        let out = node.output.as_str();
        let escapes =
            graph.is_output(out) || graph.consumers(out).iter().any(|c| !inside.contains(c));
        if escapes {
            ext_out.insert(out);
        }
        if let Some(w) = &node.weight {
            cost.weight_bytes += w.size_bytes();
            cost.weight_transactions += 1;
        }
        // one statistics sweep per group, reading the first group_norm's input
        if node.kind == OpKind::GroupNorm && cost.stats_reads == 0 {
            cost.stats_bytes = graph.tensor(&node.inputs[0]).size_bytes();
            cost.stats_reads = 1;
        }
    }
    cost.activation_bytes = ext_in
        .iter()
        .map(|t| graph.tensor(t).size_bytes())
        .sum::<u64>()
        + ext_out
            .iter()
            .map(|t| graph.tensor(t).size_bytes())
            .sum::<u64>();
    cost.activation_transactions = match kind {
        // one fused read of the shared input, one write of the concatenated result
        GroupKind::Horizontal => 2,
        _ => (ext_in.len() + ext_out.len()) as u64,
    };
    if kind == GroupKind::Horizontal {
        cost.weight_transactions = 1;
    }
    cost.weight_bytes_per_tile = cost.weight_bytes * n_tiles.max(1);
    cost
}

/// One read of each group's external inputs and one write of its external
/// outputs; intermediates stay on chip.
pub fn fused_cost(graph: &Graph, plan: &FusionPlan) -> Result<MemCost> {
    plan.validate(graph)?;
    let mut total = MemCost::default();
    for g in &plan.groups {
        let members = g
            .nodes
            .iter()
            .map(|id| {
                graph
                    .position(id)
                    .ok_or_else(|| Error::Plan(format!("unknown node {id:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let tiles = g.tile.as_ref().map_or(1, |t| t.n_tiles);
        total.add(&group_cost(graph, &members, g.kind, tiles));
    }
    Ok(total)
}
