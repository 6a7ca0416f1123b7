use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::cost::group_cost;
use super::graph::{Graph, OpKind, TensorSpec};
use crate::error::{Error, Result};

pub const MIN_TILE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Single,
    Vertical,
    Horizontal,
}

impl GroupKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupKind::Single => "single",
            GroupKind::Vertical => "vertical",
            GroupKind::Horizontal => "horizontal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGeometry {
    /// Output tile extent.
    pub tile_h: usize,
    pub tile_w: usize,
    /// Border rows/cols the input tile carries on each side (one per conv3x3).
    pub halo: usize,
    /// Extent of the group's input tile, halo included, clamped to the tensor.
    pub input_tile_h: usize,
    pub input_tile_w: usize,
    pub n_tiles: u64,
    pub working_set_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub baseline_bytes: u64,
    pub fused_bytes: u64,
    pub transactions_before: u64,
    pub transactions_after: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionGroup {
    pub kind: GroupKind,
    /// Execution order within the group.
    pub nodes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile: Option<TileGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<GroupSummary>,
}

impl FusionGroup {
    pub fn single(id: impl Into<String>) -> Self {
        Self {
            kind: GroupKind::Single,
            nodes: vec![id.into()],
            tile: None,
            summary: None,
        }
    }

    pub fn vertical(nodes: Vec<String>, tile: Option<TileGeometry>) -> Self {
        let kind = if nodes.len() == 1 {
            GroupKind::Single
        } else {
            GroupKind::Vertical
        };
        Self {
            kind,
            nodes,
            tile,
            summary: None,
        }
    }

    pub fn horizontal(nodes: Vec<String>) -> Self {
        Self {
            kind: GroupKind::Horizontal,
            nodes,
            tile: None,
            summary: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionPlan {
    pub s_sram: u64,
    pub groups: Vec<FusionGroup>,
    /// Infeasible-fusion reports, one per node that does not fit on chip.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl FusionPlan {
    pub fn from_groups(groups: Vec<FusionGroup>, s_sram: u64) -> Self {
        Self {
            s_sram,
            groups,
            notes: Vec::new(),
        }
    }

    /// One group per node, in topological order.
    pub fn singletons(graph: &Graph, s_sram: u64) -> Self {
        let groups = graph
            .nodes()
            .iter()
            .map(|n| FusionGroup::single(&n.id))
            .collect();
        Self::from_groups(groups, s_sram)
    }

    fn indices(&self, graph: &Graph, group: &FusionGroup) -> Result<Vec<usize>> {
        group
            .nodes
            .iter()
            .map(|id| {
                graph
                    .position(id)
                    .ok_or_else(|| Error::Plan(format!("unknown node {id:?}")))
            })
            .collect()
    }

    /// Checks partition, group shapes, execution order and tile feasibility.
    pub fn validate(&self, graph: &Graph) -> Result<()> {
        let mut seen = HashSet::new();
        let mut available: HashSet<String> = graph.inputs().into_iter().collect();
        for (gi, group) in self.groups.iter().enumerate() {
            if group.nodes.is_empty() {
                return Err(Error::Plan(format!("group {gi} is empty")));
            }
            let members = self.indices(graph, group)?;
            for id in &group.nodes {
                if !seen.insert(id.clone()) {
                    return Err(Error::Plan(format!(
                        "node {id:?} appears in more than one group"
                    )));
                }
            }
            let nodes: Vec<_> = members.iter().map(|&i| &graph.nodes()[i]).collect();
            match group.kind {
                GroupKind::Single if nodes.len() != 1 => {
                    return Err(Error::Plan(format!(
                        "group {gi}: single group with {} nodes",
                        nodes.len()
                    )))
                }
                GroupKind::Vertical => {
                    for pair in nodes.windows(2) {
                        if pair[1].inputs[0] != pair[0].output {
                            return Err(Error::Plan(format!(
                                "group {gi}: {} does not consume {}",
                                pair[1].id, pair[0].id
                            )));
                        }
                    }
                    let produced: HashSet<&str> = nodes.iter().map(|n| n.output.as_str()).collect();
                    for n in &nodes {
                        if !n.kind.is_spatial() {
                            return Err(Error::Plan(format!(
                                "group {gi}: {} cannot be tiled",
                                n.id
                            )));
                        }
                        if n.inputs[1..].iter().any(|t| produced.contains(t.as_str())) {
                            return Err(Error::Plan(format!(
                                "group {gi}: {} reads a group-internal tensor as a side input",
                                n.id
                            )));
                        }
                    }
                }
                GroupKind::Horizontal => {
                    let first = nodes[0];
                    for n in &nodes {
                        if n.kind != OpKind::Matmul {
                            return Err(Error::Plan(format!(
                                "group {gi}: {} is not a matmul",
                                n.id
                            )));
                        }
                        if n.inputs[0] != first.inputs[0] || n.weight != first.weight {
                            return Err(Error::Plan(format!(
                                "group {gi}: {} does not match the shared input and weight shape",
                                n.id
                            )));
                        }
                    }
                }
                GroupKind::Single => {}
            }
            let produced: HashSet<&str> = nodes.iter().map(|n| n.output.as_str()).collect();
            for n in &nodes {
                for t in &n.inputs {
                    if !produced.contains(t.as_str()) && !available.contains(t) {
                        return Err(Error::Plan(format!(
                            "group {gi}: {} needs {t:?} before it is produced",
                            n.id
                        )));
                    }
                }
            }
            available.extend(nodes.iter().map(|n| n.output.clone()));
            if let Some(tile) = &group.tile {
                if group.kind == GroupKind::Horizontal {
                    return Err(Error::Plan(format!(
                        "group {gi}: horizontal groups are not tiled"
                    )));
                }
                let ws = working_set(graph, &members, tile.tile_h)?;
                if ws.bytes != tile.working_set_bytes {
                    return Err(Error::Plan(format!(
                        "group {gi}: recorded working set {} B, recomputed {} B",
                        tile.working_set_bytes, ws.bytes
                    )));
                }
                if ws.bytes > self.s_sram {
                    return Err(Error::Plan(format!(
                        "group {gi}: working set {} B exceeds SRAM {} B",
                        ws.bytes, self.s_sram
                    )));
                }
            }
        }
        if seen.len() != graph.nodes().len() {
            let missing: Vec<_> = graph
                .nodes()
                .iter()
                .filter(|n| !seen.contains(&n.id))
                .map(|n| n.id.as_str())
                .collect();
            return Err(Error::Plan(format!(
                "nodes not covered by the plan: {missing:?}"
            )));
        }
        Ok(())
    }

    /// Fills in each group's cost summary.
    pub fn summarize(&mut self, graph: &Graph) -> Result<()> {
        for i in 0..self.groups.len() {
            let members = self.indices(graph, &self.groups[i])?;
            let group = &self.groups[i];
            let tiles = group.tile.map_or(1, |t| t.n_tiles);
            let fused = group_cost(graph, &members, group.kind, tiles);
            let (mut bytes, mut tx) = (0, 0);
            for &m in &members {
                let c = group_cost(graph, &[m], GroupKind::Single, 1);
                bytes += c.bytes();
                tx += c.transactions();
            }
            self.groups[i].summary = Some(GroupSummary {
                baseline_bytes: bytes,
                fused_bytes: fused.bytes(),
                transactions_before: tx,
                transactions_after: fused.transactions(),
            });
        }
        Ok(())
    }

    /// Per-group CSV: `group,kind,nodes,tile_h,tile_w,halo,n_tiles,working_set_bytes,baseline_bytes,fused_bytes,transactions_before,transactions_after`.
    pub fn report_csv(&self) -> String {
        let mut out = String::from(
            "group,kind,nodes,tile_h,tile_w,halo,n_tiles,working_set_bytes,baseline_bytes,fused_bytes,transactions_before,transactions_after\n",
        );
        for (i, g) in self.groups.iter().enumerate() {
            let (th, tw, halo, nt, ws) = g.tile.map_or_else(Default::default, |t| {
                (
                    t.tile_h.to_string(),
                    t.tile_w.to_string(),
                    t.halo.to_string(),
                    t.n_tiles.to_string(),
                    t.working_set_bytes.to_string(),
                )
            });
            let s = g.summary.unwrap_or(GroupSummary {
                baseline_bytes: 0,
                fused_bytes: 0,
                transactions_before: 0,
                transactions_after: 0,
            });
            let _ = writeln!(
                out,
                "{i},{},{},{th},{tw},{halo},{nt},{ws},{},{},{},{}",
                g.kind.as_str(),
                g.nodes.join("+"),
                s.baseline_bytes,
                s.fused_bytes,
                s.transactions_before,
                s.transactions_after
            );
        }
        out
    }
}

/// On-chip footprint of a tiled chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkingSet {
    pub bytes: u64,
    pub input_tile_h: usize,
    pub input_tile_w: usize,
    pub halo: usize,
}

fn tile_bytes(spec: &TensorSpec, h: usize, w: usize) -> u64 {
    let (n, c, _, _) = spec.nchw().expect("spatial tensor");
    (n * c * h * w * spec.elem_bytes) as u64
}

/// Working set of a vertical chain (node indices in execution order) for a
/// `tile × tile` output tile: every tensor's tile (halo included) plus all
/// group weights.
pub fn working_set(graph: &Graph, chain: &[usize], tile: usize) -> Result<WorkingSet> {
    if tile == 0 || chain.is_empty() {
        return Err(Error::Plan("empty chain or zero tile".into()));
    }
    let last = &graph.nodes()[*chain.last().expect("non-empty")];
    let (_, _, out_h, out_w) = graph
        .tensor(&last.output)
        .nchw()
        .ok_or_else(|| Error::Plan(format!("{} has no spatial output", last.id)))?;
    let (mut eh, mut ew) = (tile.min(out_h), tile.min(out_w));
    let mut bytes = 0u64;
    let mut halo = 0;
    for (pos, &i) in chain.iter().enumerate().rev() {
        let node = &graph.nodes()[i];
        if !node.kind.is_spatial() {
            return Err(Error::Plan(format!("{} cannot be tiled", node.id)));
        }
        bytes += tile_bytes(graph.tensor(&node.output), eh, ew);
        bytes += node.weight.as_ref().map_or(0, |w| w.size_bytes());
        for side in &node.inputs[1..] {
            bytes += tile_bytes(graph.tensor(side), eh, ew);
        }
        let input = graph.tensor(&node.inputs[0]);
        let (_, _, in_h, in_w) = input.nchw().expect("spatial input");
        (eh, ew) = match node.kind {
            OpKind::Conv3x3 => {
                halo += 1;
                (eh + 2, ew + 2)
            }
            OpKind::UpsampleNearest2x => (eh / 2 + 1, ew / 2 + 1),
            _ => (eh, ew),
        };
        (eh, ew) = (eh.min(in_h), ew.min(in_w));
        if pos == 0 {
            bytes += tile_bytes(input, eh, ew);
        }
    }
    Ok(WorkingSet {
        bytes,
        input_tile_h: eh,
        input_tile_w: ew,
        halo,
    })
}

/// Largest square power-of-two tile (at least [`MIN_TILE`]) whose working set
/// fits `s_sram`.
pub fn choose_tile(graph: &Graph, chain: &[usize], s_sram: u64) -> Result<Option<TileGeometry>> {
    let last = &graph.nodes()[*chain.last().expect("non-empty")];
    let (_, _, h, w) = graph.tensor(&last.output).nchw().expect("spatial");
    let mut candidates = vec![MIN_TILE];
    while *candidates.last().expect("non-empty") < h.max(w) {
        let next = candidates.last().expect("non-empty") * 2;
        candidates.push(next);
    }
    for &t in candidates.iter().rev() {
        let ws = working_set(graph, chain, t)?;
        if ws.bytes <= s_sram {
            let n_tiles = (h.div_ceil(t) * w.div_ceil(t)) as u64;
            return Ok(Some(TileGeometry {
                tile_h: t,
                tile_w: t,
                halo: ws.halo,
                input_tile_h: ws.input_tile_h,
                input_tile_w: ws.input_tile_w,
                n_tiles,
                working_set_bytes: ws.bytes,
            }));
        }
    }
    Ok(None)
}

/// Greedy longest-chain grouping under an SRAM budget.
pub fn plan_vertical_fusion(graph: &Graph, s_sram: u64) -> Result<FusionPlan> {
    if s_sram == 0 {
        return Err(Error::InvalidArgument("s_sram must be > 0".into()));
    }
    let nodes = graph.nodes();
    let mut assigned = vec![false; nodes.len()];
    let mut groups = Vec::new();
    let mut notes = Vec::new();
    for start in 0..nodes.len() {
        if assigned[start] {
            continue;
        }
        assigned[start] = true;
        let node = &nodes[start];
        if !node.kind.is_spatial() {
            groups.push(FusionGroup::single(&node.id));
            continue;
        }
        let Some(mut tile) = choose_tile(graph, &[start], s_sram)? else {
            let ws = working_set(graph, &[start], MIN_TILE)?;
            notes.push(format!(
                "infeasible-fusion: {} needs {} B at {MIN_TILE}x{MIN_TILE}, SRAM is {s_sram} B; runs unfused",
                node.id, ws.bytes
            ));
            groups.push(FusionGroup::single(&node.id));
            continue;
        };
        let mut chain = vec![start];
        loop {
            let tail = &nodes[*chain.last().expect("non-empty")];
            let consumers = graph.consumers(&tail.output);
            if graph.is_output(&tail.output) || consumers.len() != 1 {
                break;
            }
            let next = consumers[0];
            let cand = &nodes[next];
            let side_ready = cand.inputs[1..].iter().all(|t| match graph.producer(t) {
                Some(p) => assigned[p] && !chain.contains(&p),
                None => true,
            });
            if assigned[next]
                || !cand.kind.is_spatial()
                || cand.inputs[0] != tail.output
                || cand.inputs[1..].contains(&tail.output)
                || !side_ready
            {
                break;
            }
            let mut extended = chain.clone();
            extended.push(next);
            match choose_tile(graph, &extended, s_sram)? {
                Some(t) => {
                    chain = extended;
                    tile = t;
                    assigned[next] = true;
                }
                None => break,
            }
        }
        let ids = chain.iter().map(|&i| nodes[i].id.clone()).collect();
        groups.push(FusionGroup::vertical(ids, Some(tile)));
    }
    let mut plan = FusionPlan {
        s_sram,
        groups,
        notes,
    };
    plan.summarize(graph)?;
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizontalFusion {
    pub nodes: Vec<String>,
    pub input: String,
    /// Column-concatenated weight `[K, ΣN]`.
    pub fused_weight: TensorSpec,
    pub fused_output: TensorSpec,
    pub launches_before: usize,
    pub launches_after: usize,
    pub input_reads_before: usize,
    pub input_reads_after: usize,
    /// Arithmetic intensity (flop per byte) of each original matmul.
    pub intensity_each: Vec<f64>,
    pub intensity_before: f64,
    pub intensity_after: f64,
    pub bytes_before: u64,
    pub bytes_after: u64,
}

/// Merges sibling matmuls that read one input with identically shaped weights.
pub fn plan_horizontal_fusion(graph: &Graph, ids: &[String]) -> Result<HorizontalFusion> {
    let first_id = ids
        .first()
        .ok_or_else(|| Error::Plan("horizontal fusion needs at least one matmul".into()))?;
    let first = graph.node(first_id)?;
    let mut seen = HashSet::new();
    let mut intensity_each = Vec::new();
    let (mut flops, mut weights, mut outputs, mut bytes_before) = (0.0, 0u64, 0u64, 0u64);
    let mut cols = 0;
    for id in ids {
        let n = graph.node(id)?;
        if !seen.insert(id) {
            return Err(Error::Plan(format!("{id:?} listed twice")));
        }
        if n.kind != OpKind::Matmul {
            return Err(Error::Plan(format!("{id} is a {}, not a matmul", n.kind)));
        }
        if n.inputs[0] != first.inputs[0] {
            return Err(Error::Plan(format!(
                "{id} reads {:?}, {} reads {:?}",
                n.inputs[0], first.id, first.inputs[0]
            )));
        }
        if n.weight != first.weight {
            return Err(Error::Plan(format!(
                "{id} weight {:?} differs from {:?}",
                n.weight.as_ref().map(|w| &w.dims),
                first.weight.as_ref().map(|w| &w.dims)
            )));
        }
        let w = n.weight.as_ref().expect("matmul weight");
        let input = graph.tensor(&n.inputs[0]).size_bytes();
        let out = graph.tensor(&n.output).size_bytes();
        let f = n.flops.expect("derived flops");
        let b = input + w.size_bytes() + out;
        intensity_each.push(f / b as f64);
        flops += f;
        weights += w.size_bytes();
        outputs += out;
        bytes_before += b;
        cols += w.dims[1];
    }
    let w0 = first.weight.as_ref().expect("matmul weight");
    let input = graph.tensor(&first.inputs[0]);
    let mut out_dims = input.dims.clone();
    *out_dims.last_mut().expect("non-empty") = cols;
    let bytes_after = input.size_bytes() + weights + outputs;
    Ok(HorizontalFusion {
        nodes: ids.to_vec(),
        input: first.inputs[0].clone(),
        fused_weight: TensorSpec::new([w0.dims[0], cols], w0.elem_bytes),
        fused_output: TensorSpec::new(out_dims, input.elem_bytes),
        launches_before: ids.len(),
        launches_after: 1,
        input_reads_before: ids.len(),
        input_reads_after: 1,
        intensity_before: intensity_each.iter().copied().fold(f64::MIN, f64::max),
        intensity_each,
        intensity_after: flops / bytes_after as f64,
        bytes_before,
        bytes_after,
    })
}

/// Vertical fusion followed by horizontal merging of sibling matmuls.
pub fn plan_fusion(graph: &Graph, s_sram: u64) -> Result<FusionPlan> {
    let mut plan = plan_vertical_fusion(graph, s_sram)?;
    let mut buckets: BTreeMap<(String, Vec<usize>), Vec<usize>> = BTreeMap::new();
    for (gi, g) in plan.groups.iter().enumerate() {
        if g.kind != GroupKind::Single {
            continue;
        }
        let n = graph.node(&g.nodes[0])?;
        if n.kind == OpKind::Matmul {
            let key = (
                n.inputs[0].clone(),
                n.weight.as_ref().expect("matmul weight").dims.clone(),
            );
            buckets.entry(key).or_default().push(gi);
        }
    }
    let mut drop = HashSet::new();
    for members in buckets.values().filter(|m| m.len() > 1) {
        let ids: Vec<String> = members
            .iter()
            .map(|&gi| plan.groups[gi].nodes[0].clone())
            .collect();
        plan.groups[members[0]] = FusionGroup::horizontal(ids);
        drop.extend(members[1..].iter().copied());
    }
    plan.groups = plan
        .groups
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, g)| g)
        .collect();
    plan.summarize(graph)?;
    plan.validate(graph)?;
    Ok(plan)
}
