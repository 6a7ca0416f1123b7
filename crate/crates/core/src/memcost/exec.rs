//! Desk-scale f32 executor. The unfused path works on whole tensors and is
//! the oracle; the fused path runs vertical groups tile by tile with halos.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, OpKind, OpNode, TensorSpec};
use super::plan::{FusionPlan, GroupKind};
use crate::error::{Error, Result};

pub const MAX_SPATIAL: usize = 128;
pub const DEFAULT_RTOL: f64 = 1e-5;
const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "{} values for dims {dims:?}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    fn nchw(&self) -> (usize, usize, usize, usize) {
        match self.dims[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected NCHW, got {:?}", self.dims),
        }
    }

    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let (_, cc, h, w) = self.nchw();
        self.data[((n * cc + c) * h + y) * w + x]
    }
}

/// Activation inputs keyed by tensor name, parameters keyed by node id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExecInputs {
    pub tensors: BTreeMap<String, Tensor>,
    pub weights: BTreeMap<String, Tensor>,
}

/// Uniform values for every graph input and weight.
pub fn random_inputs(graph: &Graph, seed: u64) -> ExecInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |spec: &TensorSpec, lo: f32, hi: f32| Tensor {
        dims: spec.dims.clone(),
        data: (0..spec.elements())
            .map(|_| rng.gen_range(lo..hi))
            .collect(),
    };
    let mut out = ExecInputs::default();
    for name in graph.inputs() {
        out.tensors
            .insert(name.clone(), fill(graph.tensor(&name), -1.0, 1.0));
    }
    for node in graph.nodes() {
        if let Some(w) = &node.weight {
            let t = match node.kind {
                OpKind::GroupNorm => {
                    let mut t = fill(w, -0.5, 0.5);
                    let c = w.dims[1];
                    for g in &mut t.data[..c] {
                        *g += 1.0;
                    }
                    t
                }
                _ => fill(w, -0.5, 0.5),
            };
            out.weights.insert(node.id.clone(), t);
        }
    }
    out
}

fn check_inputs(graph: &Graph, inputs: &ExecInputs) -> Result<()> {
    for (name, spec) in graph.tensors() {
        if let Some((_, _, h, w)) = spec.nchw() {
            if h > MAX_SPATIAL || w > MAX_SPATIAL {
                return Err(Error::InvalidArgument(format!(
                    "{name}: {h}x{w} exceeds the {MAX_SPATIAL} desk-scale limit"
                )));
            }
        }
    }
    for name in graph.inputs() {
        let t = inputs
            .tensors
            .get(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing input tensor {name:?}")))?;
        if t.dims != graph.tensor(&name).dims {
            return Err(Error::InvalidArgument(format!(
                "{name}: expected {:?}, got {:?}",
                graph.tensor(&name).dims,
                t.dims
            )));
        }
    }
    for node in graph.nodes() {
        match (&node.weight, inputs.weights.get(&node.id)) {
            (Some(spec), Some(t)) if t.dims == spec.dims => {}
            (Some(spec), _) => {
                return Err(Error::InvalidArgument(format!(
                    "{}: missing or mis-shaped weight, expected {:?}",
                    node.id, spec.dims
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

// ---- whole-tensor operators (oracle) ----

fn dense_upsample(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.nchw();
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let mut i = 0;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.data[i] = x.at(b, ch, y / 2, xx / 2);
                    i += 1;
                }
            }
        }
    }
    out
}

fn dense_conv(x: &Tensor, wt: &Tensor) -> Tensor {
    let (n, c_in, h, w) = x.nchw();
    let c_out = wt.dims[0];
    let mut out = Tensor::zeros(&[n, c_out, h, w]);
    for b in 0..n {
        for o in 0..c_out {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0f32;
                    for ci in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (y + ky, xx + kx);
                                if iy < 1 || ix < 1 || iy > h || ix > w {
                                    continue;
                                }
                                let k = wt.data[((o * c_in + ci) * 3 + ky) * 3 + kx];
                                acc += k * x.at(b, ci, iy - 1, ix - 1);
                            }
                        }
                    }
                    out.data[((b * c_out + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

/// Per-(batch, group) mean and inverse standard deviation.
#[derive(Debug, Clone)]
struct GnStats {
    groups: usize,
    channels: usize,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

fn gn_stats(x: &Tensor, groups: usize) -> GnStats {
    let (n, c, h, w) = x.nchw();
    let per = c / groups;
    let mut mean = Vec::with_capacity(n * groups);
    let mut inv_std = Vec::with_capacity(n * groups);
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * per) * h * w;
            let vals = &x.data[start..start + per * h * w];
            let m = vals.iter().map(|&v| f64::from(v)).sum::<f64>() / vals.len() as f64;
            let var = vals
                .iter()
                .map(|&v| (f64::from(v) - m).powi(2))
                .sum::<f64>()
                / vals.len() as f64;
            mean.push(m);
            inv_std.push(1.0 / (var + GN_EPS).sqrt());
        }
    }
    GnStats {
        groups,
        channels: c,
        mean,
        inv_std,
    }
}

fn gn_apply(v: f32, b: usize, ch: usize, stats: &GnStats, affine: Option<&Tensor>) -> f32 {
    let idx = b * stats.groups + ch / (stats.channels / stats.groups);
    let norm = (f64::from(v) - stats.mean[idx]) * stats.inv_std[idx];
    let (gamma, beta) = affine.map_or((1.0, 0.0), |a| {
        (
            f64::from(a.data[ch]),
            f64::from(a.data[stats.channels + ch]),
        )
    });
    (norm * gamma + beta) as f32
}

fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

fn dense_group_norm(x: &Tensor, groups: usize, affine: Option<&Tensor>) -> Tensor {
    let stats = gn_stats(x, groups);
    let (n, c, h, w) = x.nchw();
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * h * w;
            for v in &mut out.data[start..start + h * w] {
                *v = gn_apply(*v, b, ch, &stats, affine);
            }
        }
    }
    out
}

fn dense_matmul(x: &Tensor, wt: &Tensor) -> Tensor {
    let k = *x.dims.last().expect("non-empty");
    let cols = wt.dims[1];
    let rows = x.data.len() / k;
    let mut dims = x.dims.clone();
    *dims.last_mut().expect("non-empty") = cols;
    let mut out = Tensor::zeros(&dims);
    for r in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0f32;
            for i in 0..k {
                acc += x.data[r * k + i] * wt.data[i * cols + j];
            }
            out.data[r * cols + j] = acc;
        }
    }
    out
}

fn dense_node(
    node: &OpNode,
    env: &BTreeMap<String, Tensor>,
    weights: &BTreeMap<String, Tensor>,
) -> Tensor {
    let x = &env[&node.inputs[0]];
    let wt = weights.get(&node.id);
    match node.kind {
        OpKind::UpsampleNearest2x => dense_upsample(x),
        OpKind::Conv3x3 => dense_conv(x, wt.expect("conv weight")),
        OpKind::GroupNorm => dense_group_norm(x, node.groups.expect("groups"), wt),
        OpKind::Silu => Tensor {
            dims: x.dims.clone(),
            data: x.data.iter().map(|&v| silu(v)).collect(),
        },
        OpKind::ElementwiseAdd => {
            let y = &env[&node.inputs[1]];
            Tensor {
                dims: x.dims.clone(),
                data: x.data.iter().zip(&y.data).map(|(a, b)| a + b).collect(),
            }
        }
        OpKind::Matmul => dense_matmul(x, wt.expect("matmul weight")),
    }
}

// ---- tiled operators ----

/// Half-open spatial window `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

impl Rect {
    fn h(&self) -> usize {
        self.y1 - self.y0
    }

    fn w(&self) -> usize {
        self.x1 - self.x0
    }
}

/// A rectangular window of an NCHW tensor held on chip.
#[derive(Debug, Clone)]
struct Region {
    n: usize,
    c: usize,
    rect: Rect,
    data: Vec<f32>,
}

impl Region {
    fn load(t: &Tensor, rect: Rect) -> Self {
        let (n, c, _, _) = t.nchw();
        let mut data = Vec::with_capacity(n * c * rect.h() * rect.w());
        for b in 0..n {
            for ch in 0..c {
                for y in rect.y0..rect.y1 {
                    for x in rect.x0..rect.x1 {
                        data.push(t.at(b, ch, y, x));
                    }
                }
            }
        }
        Self { n, c, rect, data }
    }

    fn at(&self, b: usize, ch: usize, y: usize, x: usize) -> f32 {
        debug_assert!(
            y >= self.rect.y0 && y < self.rect.y1 && x >= self.rect.x0 && x < self.rect.x1
        );
        let (h, w) = (self.rect.h(), self.rect.w());
        self.data[((b * self.c + ch) * h + (y - self.rect.y0)) * w + (x - self.rect.x0)]
    }

    fn store(&self, t: &mut Tensor) {
        let (_, c, h, w) = t.nchw();
        let mut i = 0;
        for b in 0..self.n {
            for ch in 0..self.c {
                for y in self.rect.y0..self.rect.y1 {
                    for x in self.rect.x0..self.rect.x1 {
                        t.data[((b * c + ch) * h + y) * w + x] = self.data[i];
                        i += 1;
                    }
                }
            }
        }
    }

    fn map(&self, rect: Rect, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Region {
        let mut data = Vec::with_capacity(self.n * self.c * rect.h() * rect.w());
        for b in 0..self.n {
            for ch in 0..self.c {
                for y in rect.y0..rect.y1 {
                    for x in rect.x0..rect.x1 {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Region {
            n: self.n,
            c: self.c,
            rect,
            data,
        }
    }
}

/// Input window needed to produce `out` for a spatial node.
fn input_rect(kind: OpKind, out: Rect, in_h: usize, in_w: usize) -> Rect {
    match kind {
        OpKind::Conv3x3 => Rect {
            y0: out.y0.saturating_sub(1),
            y1: (out.y1 + 1).min(in_h),
            x0: out.x0.saturating_sub(1),
            x1: (out.x1 + 1).min(in_w),
        },
        OpKind::UpsampleNearest2x => Rect {
            y0: out.y0 / 2,
            y1: (out.y1 - 1) / 2 + 1,
            x0: out.x0 / 2,
            x1: (out.x1 - 1) / 2 + 1,
        },
        _ => out,
    }
}

fn tiled_conv(x: &Region, wt: &Tensor, out: Rect, full_h: usize, full_w: usize) -> Region {
    let c_in = x.c;
    let c_out = wt.dims[0];
    let mut data = Vec::with_capacity(x.n * c_out * out.h() * out.w());
    for b in 0..x.n {
        for o in 0..c_out {
            for y in out.y0..out.y1 {
                for xx in out.x0..out.x1 {
                    let mut acc = 0.0f32;
                    for ci in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (y + ky, xx + kx);
                                if iy < 1 || ix < 1 || iy > full_h || ix > full_w {
                                    continue;
                                }
                                let k = wt.data[((o * c_in + ci) * 3 + ky) * 3 + kx];
                                acc += k * x.at(b, ci, iy - 1, ix - 1);
                            }
                        }
                    }
                    data.push(acc);
                }
            }
        }
    }
    Region {
        n: x.n,
        c: c_out,
        rect: out,
        data,
    }
}

fn run_vertical(
    graph: &Graph,
    members: &[&OpNode],
    tile: usize,
    env: &mut BTreeMap<String, Tensor>,
    weights: &BTreeMap<String, Tensor>,
) {
    // Global statistics pass for every group_norm in the chain.
    let mut stats: BTreeMap<&str, GnStats> = BTreeMap::new();
    if let Some(last_gn) = members.iter().rposition(|n| n.kind == OpKind::GroupNorm) {
        let mut scratch: BTreeMap<String, Tensor> = BTreeMap::new();
        for node in &members[..=last_gn] {
            let mut local = BTreeMap::new();
            for t in &node.inputs {
                let v = scratch
                    .get(t)
                    .or_else(|| env.get(t))
                    .expect("available input");
                local.insert(t.clone(), v.clone());
            }
            if node.kind == OpKind::GroupNorm {
                stats.insert(
                    node.id.as_str(),
                    gn_stats(&local[&node.inputs[0]], node.groups.expect("groups")),
                );
            }
            let out = dense_node(node, &local, weights);
            scratch.insert(node.output.clone(), out);
        }
    }

    let mut outputs: Vec<Tensor> = members
        .iter()
        .map(|n| Tensor::zeros(&graph.tensor(&n.output).dims))
        .collect();
    let last = members.last().expect("non-empty");
    let (_, _, out_h, out_w) = graph.tensor(&last.output).nchw().expect("spatial");
    let head_input = env[&members[0].inputs[0]].clone();
    for ty in (0..out_h).step_by(tile) {
        for tx in (0..out_w).step_by(tile) {
            let mut rects = vec![
                Rect {
                    y0: ty,
                    y1: (ty + tile).min(out_h),
                    x0: tx,
                    x1: (tx + tile).min(out_w),
                };
                members.len()
            ];
            for k in (1..members.len()).rev() {
                let (_, _, h, w) = graph.tensor(&members[k].inputs[0]).nchw().expect("spatial");
                rects[k - 1] = input_rect(members[k].kind, rects[k], h, w);
            }
            let (_, _, h0, w0) = head_input.nchw();
            let mut region =
                Region::load(&head_input, input_rect(members[0].kind, rects[0], h0, w0));
            for (k, node) in members.iter().enumerate() {
                let out = rects[k];
                region = match node.kind {
                    OpKind::UpsampleNearest2x => {
                        region.map(out, |b, c, y, x| region.at(b, c, y / 2, x / 2))
                    }
                    OpKind::Conv3x3 => {
                        let (_, _, h, w) = graph.tensor(&node.inputs[0]).nchw().expect("spatial");
                        tiled_conv(&region, &weights[&node.id], out, h, w)
                    }
                    OpKind::GroupNorm => {
                        let s = &stats[node.id.as_str()];
                        let affine = weights.get(&node.id);
                        region.map(out, |b, c, y, x| {
                            gn_apply(region.at(b, c, y, x), b, c, s, affine)
                        })
                    }
                    OpKind::Silu => region.map(out, |b, c, y, x| silu(region.at(b, c, y, x))),
                    OpKind::ElementwiseAdd => {
                        let side = &env[&node.inputs[1]];
                        region.map(out, |b, c, y, x| {
                            region.at(b, c, y, x) + side.at(b, c, y, x)
                        })
                    }
                    OpKind::Matmul => {
                        unreachable!("validated plan has no matmul in a vertical group")
                    }
                };
                region.store(&mut outputs[k]);
            }
        }
    }
    for (node, t) in members.iter().zip(outputs) {
        env.insert(node.output.clone(), t);
    }
}

fn run_horizontal(
    members: &[&OpNode],
    env: &mut BTreeMap<String, Tensor>,
    weights: &BTreeMap<String, Tensor>,
) {
    let x = &env[&members[0].inputs[0]];
    let k = weights[&members[0].id].dims[0];
    let widths: Vec<usize> = members.iter().map(|n| weights[&n.id].dims[1]).collect();
    let total: usize = widths.iter().sum();
    let mut fused = Tensor::zeros(&[k, total]);
    let mut offset = 0;
    for (n, &cols) in members.iter().zip(&widths) {
        let w = &weights[&n.id];
        for r in 0..k {
            fused.data[r * total + offset..r * total + offset + cols]
                .copy_from_slice(&w.data[r * cols..(r + 1) * cols]);
        }
        offset += cols;
    }
    let y = dense_matmul(x, &fused);
    let rows = y.data.len() / total;
    let mut offset = 0;
    for (n, &cols) in members.iter().zip(&widths) {
        let mut dims = y.dims.clone();
        *dims.last_mut().expect("non-empty") = cols;
        let mut part = Tensor::zeros(&dims);
        for r in 0..rows {
            part.data[r * cols..(r + 1) * cols]
                .copy_from_slice(&y.data[r * total + offset..r * total + offset + cols]);
        }
        env.insert(n.output.clone(), part);
        offset += cols;
    }
}

/// Runs the graph and returns its output tensors. Without a plan every node
/// runs on whole tensors; with one, vertical groups run tile by tile.
pub fn execute_reference(
    graph: &Graph,
    inputs: &ExecInputs,
    plan: Option<&FusionPlan>,
) -> Result<BTreeMap<String, Tensor>> {
    check_inputs(graph, inputs)?;
    let mut env: BTreeMap<String, Tensor> = inputs.tensors.clone();
    match plan {
        None => {
            for node in graph.nodes() {
                let out = dense_node(node, &env, &inputs.weights);
                env.insert(node.output.clone(), out);
            }
        }
        Some(plan) => {
            plan.validate(graph)?;
            for group in &plan.groups {
                let members = group
                    .nodes
                    .iter()
                    .map(|id| graph.node(id))
                    .collect::<Result<Vec<_>>>()?;
                match group.kind {
                    GroupKind::Horizontal => run_horizontal(&members, &mut env, &inputs.weights),
                    _ if !members[0].kind.is_spatial() => {
                        let out = dense_node(members[0], &env, &inputs.weights);
                        env.insert(members[0].output.clone(), out);
                    }
                    _ => {
                        let tile = group.tile.map_or(usize::MAX, |t| t.tile_h);
                        run_vertical(graph, &members, tile, &mut env, &inputs.weights);
                    }
                }
            }
        }
    }
    Ok(graph
        .outputs()
        .into_iter()
        .map(|name| {
            let t = env.remove(&name).expect("every output computed");
            (name, t)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub elements: usize,
    pub max_rel_diff: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub reference: f32,
    pub fused: f32,
}

/// `|a - b| / max(|a|, |b|)`, zero when both are zero.
pub fn relative_diff(a: f32, b: f32) -> f64 {
    let (a, b) = (f64::from(a), f64::from(b));
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares fused-tiled against unfused execution.
pub fn check_equivalence(
    graph: &Graph,
    inputs: &ExecInputs,
    plan: &FusionPlan,
    rtol: f64,
) -> Result<EquivalenceReport> {
    let reference = execute_reference(graph, inputs, None)?;
    let fused = execute_reference(graph, inputs, Some(plan))?;
    let mut report = EquivalenceReport {
        elements: 0,
        max_rel_diff: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        reference: 0.0,
        fused: 0.0,
    };
    for (name, r) in &reference {
        let f = &fused[name];
        if f.dims != r.dims {
            return Err(Error::Equivalence(format!(
                "{name}: shape {:?} vs {:?}",
                f.dims, r.dims
            )));
        }
        for (i, (&a, &b)) in r.data.iter().zip(&f.data).enumerate() {
            let d = match (a.is_nan(), b.is_nan()) {
                (true, true) => 0.0,
                (false, false) => relative_diff(a, b),
                _ => f64::INFINITY,
            };
            if report.worst_tensor.is_empty() || d > report.max_rel_diff {
                report.max_rel_diff = d;
                report.worst_tensor = name.clone();
                report.worst_index = i;
                report.reference = a;
                report.fused = b;
            }
        }
        report.elements += r.data.len();
    }
    if report.max_rel_diff > rtol {
        return Err(Error::Equivalence(format!(
            "max relative diff {:.3e} > {rtol:e} at {}[{}]: reference {}, fused {}",
            report.max_rel_diff,
            report.worst_tensor,
            report.worst_index,
            report.reference,
            report.fused
        )));
    }
    Ok(report)
}

/// Random spatial chain with optional skip inputs, all extents within
/// `max_spatial`. Used for property and acceptance testing.
pub fn random_graph(seed: u64, max_spatial: usize) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let elem = 4;
    let mut c = rng.gen_range(1..=8);
    let mut h = rng.gen_range(4..=(max_spatial / 2).max(4));
    let mut w = rng.gen_range(4..=(max_spatial / 2).max(4));
    let mut declared = BTreeMap::new();
    declared.insert("x".to_owned(), TensorSpec::new([1, c, h, w], elem));
    let mut nodes = Vec::new();
    let mut current = "x".to_owned();
    let n_ops = rng.gen_range(2..=6);
    for i in 0..n_ops {
        let output = format!("t{i}");
        let mut node = OpNode {
            id: format!("op{i}"),
            kind: OpKind::Silu,
            inputs: vec![current.clone()],
            output: output.clone(),
            weight: None,
            groups: None,
            flops: None,
        };
        match rng.gen_range(0..5) {
            0 if 2 * h <= max_spatial && 2 * w <= max_spatial => {
                node.kind = OpKind::UpsampleNearest2x;
                h *= 2;
                w *= 2;
            }
            0 | 1 => {
                let c_out = rng.gen_range(1..=8);
                node.kind = OpKind::Conv3x3;
                node.weight = Some(TensorSpec::new([c_out, c, 3, 3], elem));
                c = c_out;
            }
            2 => {
                let divisors: Vec<usize> = (1..=c).filter(|d| c % d == 0).collect();
                node.kind = OpKind::GroupNorm;
                node.groups = Some(divisors[rng.gen_range(0..divisors.len())]);
                if rng.gen_bool(0.5) {
                    node.weight = Some(TensorSpec::new([2, c], elem));
                }
            }
            3 => {
                let side = format!("skip{i}");
                declared.insert(side.clone(), TensorSpec::new([1, c, h, w], elem));
                node.kind = OpKind::ElementwiseAdd;
                node.inputs.push(side);
            }
            _ => {}
        }
        nodes.push(node);
        current = output;
    }
    Graph::new(declared, nodes).expect("generated graph is valid")
}
