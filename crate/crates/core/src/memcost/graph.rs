use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    /// `[N, C, H, W]` for activations, `[rows, cols]` for matmul operands.
    pub dims: Vec<usize>,
    pub elem_bytes: usize,
}

impl TensorSpec {
    pub fn new(dims: impl Into<Vec<usize>>, elem_bytes: usize) -> Self {
        Self {
            dims: dims.into(),
            elem_bytes,
        }
    }

    pub fn elements(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn size_bytes(&self) -> u64 {
        (self.elements() * self.elem_bytes) as u64
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.dims.is_empty() || self.dims.contains(&0) || self.elem_bytes == 0 {
            return Err(Error::Graph(format!(
                "{what}: extents and element size must be >= 1, got {:?} x {}B",
                self.dims, self.elem_bytes
            )));
        }
        Ok(())
    }

    /// `(N, C, H, W)` of a 4-d activation.
    pub fn nchw(&self) -> Option<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Some((n, c, h, w)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    UpsampleNearest2x,
    Conv3x3,
    GroupNorm,
    Silu,
    Matmul,
    ElementwiseAdd,
}

impl OpKind {
    /// Operates on spatial tiles and can join a vertical fusion chain.
    pub fn is_spatial(self) -> bool {
        !matches!(self, OpKind::Matmul)
    }

    fn arity(self) -> usize {
        match self {
            OpKind::ElementwiseAdd => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::UpsampleNearest2x => "upsample_nearest2x",
            OpKind::Conv3x3 => "conv3x3",
            OpKind::GroupNorm => "group_norm",
            OpKind::Silu => "silu",
            OpKind::Matmul => "matmul",
            OpKind::ElementwiseAdd => "elementwise_add",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpNode {
    pub id: String,
    pub kind: OpKind,
    pub inputs: Vec<String>,
    pub output: String,
    /// Conv `[C_out, C_in, 3, 3]`, matmul `[K, N]`, optional group-norm affine `[2, C]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<TensorSpec>,
    /// Group count for group_norm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<usize>,
    /// Operation count; derived from shapes when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    /// Shapes of graph inputs; other shapes are inferred (and checked when given).
    tensors: BTreeMap<String, TensorSpec>,
    nodes: Vec<OpNode>,
}

/// Validated operator DAG with every tensor shape resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<OpNode>,
    tensors: BTreeMap<String, TensorSpec>,
    declared: BTreeMap<String, TensorSpec>,
    producer: HashMap<String, usize>,
    consumers: HashMap<String, Vec<usize>>,
    index: HashMap<String, usize>,
}

impl Graph {
    /// Validates shapes and acyclicity; nodes are stored in a topological
    /// order that keeps the given order where possible.
    pub fn new(declared: BTreeMap<String, TensorSpec>, nodes: Vec<OpNode>) -> Result<Self> {
        for (name, spec) in &declared {
            spec.validate(name)?;
        }
        let mut ids = BTreeSet::new();
        let mut producer_of: HashMap<&str, usize> = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if !ids.insert(n.id.as_str()) {
                return Err(Error::Graph(format!("duplicate node id {:?}", n.id)));
            }
            if producer_of.insert(n.output.as_str(), i).is_some() {
                return Err(Error::Graph(format!(
                    "tensor {:?} produced twice",
                    n.output
                )));
            }
            if n.inputs.len() != n.kind.arity() {
                return Err(Error::Graph(format!(
                    "{}: {} takes {} input(s), got {}",
                    n.id,
                    n.kind,
                    n.kind.arity(),
                    n.inputs.len()
                )));
            }
        }
        for n in &nodes {
            for t in &n.inputs {
                if !producer_of.contains_key(t.as_str()) && !declared.contains_key(t) {
                    return Err(Error::Graph(format!(
                        "{}: input tensor {t:?} is neither declared nor produced",
                        n.id
                    )));
                }
            }
        }

        // Kahn's algorithm, always taking the lowest original index.
        let mut indegree: Vec<usize> = nodes
            .iter()
            .map(|n| {
                n.inputs
                    .iter()
                    .filter(|t| producer_of.contains_key(t.as_str()))
                    .count()
            })
            .collect();
        let mut ready: BTreeSet<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for (j, m) in nodes.iter().enumerate() {
                let uses = m.inputs.iter().filter(|t| **t == nodes[i].output).count();
                if uses > 0 {
                    indegree[j] -= uses;
                    if indegree[j] == 0 {
                        ready.insert(j);
                    }
                }
            }
        }
        if order.len() != nodes.len() {
            return Err(Error::Graph("graph contains a cycle".into()));
        }
        let nodes: Vec<OpNode> = order.into_iter().map(|i| nodes[i].clone()).collect();

        let mut tensors = declared.clone();
        for n in &nodes {
            let inputs: Vec<&TensorSpec> = n.inputs.iter().map(|t| &tensors[t]).collect();
            let out = infer_output(n, &inputs)?;
            if let Some(given) = declared.get(&n.output) {
                if *given != out {
                    return Err(Error::Graph(format!(
                        "{}: declared output {:?} does not match inferred {:?}",
                        n.id, given.dims, out.dims
                    )));
                }
            }
            tensors.insert(n.output.clone(), out);
        }

        let mut producer = HashMap::new();
        let mut consumers: HashMap<String, Vec<usize>> = HashMap::new();
        let mut index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            producer.insert(n.output.clone(), i);
            index.insert(n.id.clone(), i);
            for t in &n.inputs {
                let list = consumers.entry(t.clone()).or_default();
                if !list.contains(&i) {
                    list.push(i);
                }
            }
        }
        let mut nodes = nodes;
        for n in &mut nodes {
            if n.flops.is_none() {
                n.flops = Some(derive_flops(n, &tensors));
            }
        }
        Ok(Self {
            nodes,
            tensors,
            declared,
            producer,
            consumers,
            index,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GraphDoc = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<graph>".into(),
            message: e.to_string(),
        })?;
        Self::new(doc.tensors, doc.nodes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: GraphDoc = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::new(doc.tensors, doc.nodes)
    }

    pub fn to_json(&self) -> String {
        let doc = GraphDoc {
            tensors: self.declared.clone(),
            nodes: self.nodes.clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("graph serializes");
        s.push('\n');
        s
    }

    /// Nodes in topological order.
    pub fn nodes(&self) -> &[OpNode] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Result<&OpNode> {
        self.index
            .get(id)
            .map(|&i| &self.nodes[i])
            .ok_or_else(|| Error::Plan(format!("unknown node {id:?}")))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn tensor(&self, name: &str) -> &TensorSpec {
        &self.tensors[name]
    }

    pub fn tensors(&self) -> &BTreeMap<String, TensorSpec> {
        &self.tensors
    }

    /// Index of the node producing `tensor`, if any.
    pub fn producer(&self, tensor: &str) -> Option<usize> {
        self.producer.get(tensor).copied()
    }

    /// Indices of nodes reading `tensor`.
    pub fn consumers(&self, tensor: &str) -> &[usize] {
        self.consumers.get(tensor).map_or(&[], Vec::as_slice)
    }

    /// Tensors not produced by any node.
    pub fn inputs(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|t| !self.producer.contains_key(*t))
            .cloned()
            .collect()
    }

    /// Produced tensors nobody consumes.
    pub fn outputs(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| self.consumers(&n.output).is_empty())
            .map(|n| n.output.clone())
            .collect()
    }

    pub fn is_output(&self, tensor: &str) -> bool {
        self.producer.contains_key(tensor) && self.consumers(tensor).is_empty()
    }
}

fn spatial(node: &OpNode, t: &TensorSpec) -> Result<(usize, usize, usize, usize)> {
    t.nchw().ok_or_else(|| {
        Error::Graph(format!(
            "{}: {} expects an NCHW input, got {:?}",
            node.id, node.kind, t.dims
        ))
    })
}

fn infer_output(node: &OpNode, inputs: &[&TensorSpec]) -> Result<TensorSpec> {
    let x = inputs[0];
    let elem = x.elem_bytes;
    let weight = |expect: &str| {
        node.weight.as_ref().ok_or_else(|| {
            Error::Graph(format!(
                "{}: {} needs a weight {expect}",
                node.id, node.kind
            ))
        })
    };
    match node.kind {
        OpKind::UpsampleNearest2x => {
            let (n, c, h, w) = spatial(node, x)?;
            Ok(TensorSpec::new([n, c, 2 * h, 2 * w], elem))
        }
        OpKind::Conv3x3 => {
            let (n, c, h, w) = spatial(node, x)?;
            let wt = weight("[C_out, C_in, 3, 3]")?;
            wt.validate(&node.id)?;
            match wt.dims[..] {
                [c_out, c_in, 3, 3] if c_in == c => Ok(TensorSpec::new([n, c_out, h, w], elem)),
                _ => Err(Error::Graph(format!(
                    "{}: conv weight {:?} incompatible with {c} input channels",
                    node.id, wt.dims
                ))),
            }
        }
        OpKind::GroupNorm => {
            let (_, c, _, _) = spatial(node, x)?;
            let groups = node
                .groups
                .ok_or_else(|| Error::Graph(format!("{}: group_norm needs `groups`", node.id)))?;
            if groups == 0 || c % groups != 0 {
                return Err(Error::Graph(format!(
                    "{}: {groups} groups do not divide {c} channels",
                    node.id
                )));
            }
            if let Some(wt) = &node.weight {
                if wt.dims != [2, c] {
                    return Err(Error::Graph(format!(
                        "{}: group_norm affine must be [2, {c}], got {:?}",
                        node.id, wt.dims
                    )));
                }
            }
            Ok(x.clone())
        }
        OpKind::Silu => {
            spatial(node, x)?;
            Ok(x.clone())
        }
        OpKind::ElementwiseAdd => {
            spatial(node, x)?;
            if inputs[1].dims != x.dims {
                return Err(Error::Graph(format!(
                    "{}: add operands {:?} and {:?} differ",
                    node.id, x.dims, inputs[1].dims
                )));
            }
            Ok(x.clone())
        }
        OpKind::Matmul => {
            let wt = weight("[K, N]")?;
            wt.validate(&node.id)?;
            let k = *x.dims.last().expect("non-empty dims");
            match wt.dims[..] {
                [wk, n] if wk == k => {
                    let mut dims = x.dims.clone();
                    *dims.last_mut().expect("non-empty dims") = n;
                    Ok(TensorSpec::new(dims, elem))
                }
                _ => Err(Error::Graph(format!(
                    "{}: matmul weight {:?} incompatible with inner dimension {k}",
                    node.id, wt.dims
                ))),
            }
        }
    }
}

/// Approximate operation counts per kind.
fn derive_flops(node: &OpNode, tensors: &BTreeMap<String, TensorSpec>) -> f64 {
    let x = &tensors[&node.inputs[0]];
    let out = &tensors[&node.output];
    let out_elems = out.elements() as f64;
    match node.kind {
        OpKind::UpsampleNearest2x => 0.0,
        OpKind::Conv3x3 => 2.0 * 9.0 * x.dims[1] as f64 * out_elems,
        OpKind::GroupNorm => 5.0 * out_elems,
        OpKind::Silu => 4.0 * out_elems,
        OpKind::ElementwiseAdd => out_elems,
        OpKind::Matmul => 2.0 * *x.dims.last().expect("non-empty") as f64 * out_elems,
    }
}

/// `upsample -> conv3x3 -> group_norm -> silu` decoder block on a
/// `[1, channels, h, w]` input.
pub fn vae_block(
    channels: usize,
    h: usize,
    w: usize,
    groups: usize,
    elem_bytes: usize,
) -> Result<Graph> {
    let declared = [(
        "x".to_owned(),
        TensorSpec::new([1, channels, h, w], elem_bytes),
    )]
    .into();
    let nodes = vec![
        OpNode {
            id: "upsample".into(),
            kind: OpKind::UpsampleNearest2x,
            inputs: vec!["x".into()],
            output: "x_up".into(),
            weight: None,
            groups: None,
            flops: None,
        },
        OpNode {
            id: "conv".into(),
            kind: OpKind::Conv3x3,
            inputs: vec!["x_up".into()],
            output: "x_conv".into(),
            weight: Some(TensorSpec::new([channels, channels, 3, 3], elem_bytes)),
            groups: None,
            flops: None,
        },
        OpNode {
            id: "norm".into(),
            kind: OpKind::GroupNorm,
            inputs: vec!["x_conv".into()],
            output: "x_norm".into(),
            weight: None,
            groups: Some(groups),
            flops: None,
        },
        OpNode {
            id: "act".into(),
            kind: OpKind::Silu,
            inputs: vec!["x_norm".into()],
            output: "y".into(),
            weight: None,
            groups: None,
            flops: None,
        },
    ];
    Graph::new(declared, nodes)
}

/// Sibling matmuls reading one `[tokens, hidden]` input, each with a
/// `[hidden, hidden]` weight (the adaptive-norm shift/scale/gate projections).
pub fn adaln_projections(
    tokens: usize,
    hidden: usize,
    count: usize,
    elem_bytes: usize,
) -> Result<Graph> {
    let names = ["shift", "scale", "gate"];
    let declared = [(
        "cond".to_owned(),
        TensorSpec::new([tokens, hidden], elem_bytes),
    )]
    .into();
    let nodes = (0..count)
        .map(|i| {
            let name = names
                .get(i)
                .map_or_else(|| format!("proj{i}"), |s| s.to_string());
            OpNode {
                id: name.clone(),
                kind: OpKind::Matmul,
                inputs: vec!["cond".into()],
                output: format!("{name}_out"),
                weight: Some(TensorSpec::new([hidden, hidden], elem_bytes)),
                groups: None,
                flops: None,
            }
        })
        .collect();
    Graph::new(declared, nodes)
}
