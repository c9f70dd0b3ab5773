//! Kernel graph IR: CFMM blocks feeding per-output adder trees, with fold
//! multiplexing, multi-instance replication and netlist export.
//!
//! The kernel is input-stationary. Each clock group streams one activation
//! per (slot, instance) input into its CFMM block, and every nonzero weight
//! of that input becomes a tap on the tree of the output it feeds. With
//! `I` instances of an `fh x fw` filter the trees cover an
//! `fh x (fw + I - 1)` slice of output positions: instance `i` at filter
//! offset `(dy, dx)` feeds slice position `(fh - 1 - dy, i + fw - 1 - dx)`.
//! Overlapping instance contributions land in the same tree and are summed
//! there.
//!
//! Node ids are assigned in topological order, so every edge points from a
//! lower id to a higher one.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cfmm::{build_cfmm, decompose, AddSub, CfmmBlock, NodeRef, Sign, WeightDecomp};
use crate::error::{Error, Result};
use crate::model::{LayerSpec, QuantTensor};
use crate::tree::{build_tree, Tap, TapSource, TreeInput, TreePolicy, TreeSpec, COMPRESSOR_FAN_IN};
use crate::util::{bits_for, read, write_atomic};
use crate::Provenance;

pub const NETLIST_SCHEMA: &str = "bitforge-netlist";
pub const NETLIST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    /// Serial activation stream for one input slot of one instance.
    Input { slot: usize, instance: usize },
    /// CFMM chain adder producing `target * x` for its block.
    SerialAdd { block: usize, target: u32 },
    /// CFMM chain subtractor, port 0 minus port 1.
    SerialSub { block: usize, target: u32 },
    /// Delays a stream by `clocks`, i.e. multiplies by `2^clocks`.
    Delay { clocks: u32 },
    /// Bitwise inversion of a negative tap.
    Invert,
    /// Per fold phase, the port feeding the output (`None` streams zeros).
    FoldMux { select: Vec<Option<usize>> },
    /// Stage-0 unit: two 6:3 compressors and a 3-bit adder over up to twelve
    /// tree inputs.
    Compressor { tree: usize, inputs: usize },
    ParallelAdd { bits: u32 },
    Register { bits: u32 },
    /// Shift-right accumulator; its input arrives `latency` clocks late.
    Sra { tree: usize, word_clocks: u32, width: u32, latency: u32 },
    /// Tree result at a slice position, after adding `correction` (the
    /// tree's negative tap count) modulo `2^word_clocks`.
    Output { tree: usize, ofm: usize, row: usize, col: usize, correction: i64 },
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::SerialAdd { .. } => "serial_add",
            NodeKind::SerialSub { .. } => "serial_sub",
            NodeKind::Delay { .. } => "delay",
            NodeKind::Invert => "invert",
            NodeKind::FoldMux { .. } => "fold_mux",
            NodeKind::Compressor { .. } => "compressor",
            NodeKind::ParallelAdd { .. } => "parallel_add",
            NodeKind::Register { .. } => "register",
            NodeKind::Sra { .. } => "sra",
            NodeKind::Output { .. } => "output",
        }
    }

    fn is_tree_internal(&self) -> bool {
        matches!(
            self,
            NodeKind::Compressor { .. } | NodeKind::ParallelAdd { .. } | NodeKind::Register { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    #[serde(flatten)]
    pub kind: NodeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub port: usize,
}

/// Assignment of input feature maps to fold phases. Phase `p` streams IFM
/// `phase_assignment[p][j]` through input slot `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldConfig {
    pub factor: usize,
    pub phase_assignment: Vec<Vec<usize>>,
}

impl FoldConfig {
    pub fn unfolded(in_channels: usize) -> Self {
        FoldConfig {
            factor: 1,
            phase_assignment: vec![(0..in_channels).collect()],
        }
    }

    /// Contiguous balanced split: phase sizes differ by at most one, larger
    /// phases first.
    pub fn even(factor: usize, in_channels: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidFold("factor must be >= 1".into()));
        }
        if factor > in_channels {
            return Err(Error::InvalidFold(format!(
                "factor {factor} exceeds {in_channels} input maps"
            )));
        }
        let (base, extra) = (in_channels / factor, in_channels % factor);
        let start = |p: usize| p * base + p.min(extra);
        let phase_assignment = (0..factor).map(|p| (start(p)..start(p + 1)).collect()).collect();
        Ok(FoldConfig {
            factor,
            phase_assignment,
        })
    }

    /// Input slots: the size of the largest phase.
    pub fn slots(&self) -> usize {
        self.phase_assignment.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn is_uneven(&self) -> bool {
        self.phase_assignment.iter().any(|p| p.len() != self.slots())
    }

    pub fn ifm(&self, phase: usize, slot: usize) -> Option<usize> {
        self.phase_assignment.get(phase)?.get(slot).copied()
    }

    pub fn validate(&self, in_channels: usize) -> Result<()> {
        if self.factor == 0 || self.factor != self.phase_assignment.len() {
            return Err(Error::InvalidFold(format!(
                "factor {} but {} phases",
                self.factor,
                self.phase_assignment.len()
            )));
        }
        let mut seen = vec![false; in_channels];
        for &ifm in self.phase_assignment.iter().flatten() {
            if ifm >= in_channels || std::mem::replace(&mut seen[ifm], true) {
                return Err(Error::InvalidFold(format!("IFM {ifm} out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) || self.phase_assignment.iter().any(Vec::is_empty) {
            return Err(Error::InvalidFold("phases must partition the input maps".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub instances: usize,
    pub filter_h: usize,
    pub filter_w: usize,
    /// Output positions covered by one instance group, `(rows, cols)`.
    pub output_slice: (usize, usize),
}

impl InstanceConfig {
    pub fn new(instances: usize, filter_h: usize, filter_w: usize) -> Self {
        InstanceConfig {
            instances,
            filter_h,
            filter_w,
            output_slice: (filter_h, filter_w + instances.saturating_sub(1)),
        }
    }

    pub fn single(layer: &LayerSpec) -> Self {
        Self::new(1, layer.filter_h, layer.filter_w)
    }

    pub fn validate(&self, layer: &LayerSpec) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::InvalidInstances("instances must be >= 1".into()));
        }
        if (self.filter_h, self.filter_w) != (layer.filter_h, layer.filter_w) {
            return Err(Error::InvalidInstances(format!(
                "filter {}x{} does not match layer {}x{}",
                self.filter_h, self.filter_w, layer.filter_h, layer.filter_w
            )));
        }
        let expect = (self.filter_h, self.filter_w + self.instances - 1);
        if self.output_slice != expect {
            return Err(Error::InvalidInstances(format!(
                "{} instances of {}x{} cover a {}x{} slice, not {}x{}",
                self.instances, self.filter_h, self.filter_w, expect.0, expect.1, self.output_slice.0, self.output_slice.1
            )));
        }
        Ok(())
    }
}

/// Knobs that shape the graph without changing its function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelOptions {
    /// Copies of each CFMM block sharing the tap fan-out (cost only).
    pub cfmm_dupes: usize,
    pub policy: TreePolicy,
    pub seed: u64,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            cfmm_dupes: 1,
            policy: TreePolicy::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub layer: LayerSpec,
    pub fold: FoldConfig,
    pub instances: InstanceConfig,
    /// Serial word length shared by every stream in the kernel.
    pub word_clocks: u32,
    /// Pipeline registers between tree inputs and the deepest SRA.
    pub latency: u32,
    pub cfmm_dupes: usize,
    pub pipeline_every: usize,
    pub uneven_phases: bool,
    /// Trees with no nonzero tap; their outputs are constant zero.
    pub zero_trees: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub meta: GraphMeta,
}

impl KernelGraph {
    pub fn slots(&self) -> usize {
        self.meta.fold.slots()
    }

    pub fn instances(&self) -> usize {
        self.meta.instances.instances
    }

    pub fn slice(&self) -> (usize, usize) {
        self.meta.instances.output_slice
    }

    pub fn tree_count(&self) -> usize {
        let (r, c) = self.slice();
        self.meta.layer.out_channels * r * c
    }

    pub fn count(&self, pred: impl Fn(&NodeKind) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.kind)).count()
    }

    /// Node counts keyed by kind name.
    pub fn kind_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut m = BTreeMap::new();
        for n in &self.nodes {
            *m.entry(n.kind.name()).or_default() += 1;
        }
        m
    }

    /// Inputs of every node, ordered by port.
    pub fn fan_in(&self) -> Vec<Vec<usize>> {
        let mut ins: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            ins[e.to].push((e.port, e.from));
        }
        ins.into_iter()
            .map(|mut v| {
                v.sort_unstable();
                v.into_iter().map(|(_, f)| f).collect()
            })
            .collect()
    }

    /// Total tree inputs, i.e. compressor inputs plus single-input trees.
    pub fn tree_input_count(&self) -> usize {
        let fan_in = self.fan_in();
        self.nodes
            .iter()
            .map(|n| match n.kind {
                NodeKind::Compressor { inputs, .. } => inputs,
                NodeKind::Sra { .. } => {
                    let src = fan_in[n.id][0];
                    usize::from(!self.nodes[src].kind.is_tree_internal())
                }
                _ => 0,
            })
            .sum()
    }

    /// Checks ids, edge ordering and per-kind fan-in limits.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Netlist(m));
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return bad(format!("node {i} has id {}", n.id));
            }
        }
        for e in &self.edges {
            if e.to >= self.nodes.len() || e.from >= e.to {
                return bad(format!("edge {} -> {} is not forward", e.from, e.to));
            }
        }
        let mut ports: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            ports[e.to].push(e.port);
        }
        let fold = self.meta.fold.factor;
        for (n, p) in self.nodes.iter().zip(&mut ports) {
            p.sort_unstable();
            let dense = p.iter().enumerate().all(|(i, &q)| i == q);
            let want = match &n.kind {
                NodeKind::Input { .. } => Some(0),
                NodeKind::SerialAdd { .. } | NodeKind::SerialSub { .. } | NodeKind::ParallelAdd { .. } => Some(2),
                NodeKind::Delay { .. } | NodeKind::Invert | NodeKind::Register { .. } | NodeKind::Sra { .. } => Some(1),
                NodeKind::Output { .. } => (p.len() > 1).then_some(1),
                NodeKind::Compressor { inputs, .. } => {
                    (*inputs == 0 || *inputs > COMPRESSOR_FAN_IN).then_some(COMPRESSOR_FAN_IN)
                        .or(Some(*inputs))
                }
                NodeKind::FoldMux { select } => {
                    if select.len() != fold || select.iter().flatten().any(|&s| s >= p.len()) {
                        return bad(format!("fold mux {} selects outside its ports", n.id));
                    }
                    None
                }
            };
            if !dense || want.is_some_and(|w| w != p.len()) {
                return bad(format!("{} node {} has {} inputs", n.kind.name(), n.id, p.len()));
            }
        }
        Ok(())
    }
}

/// Builds the kernel graph for one layer with default options.
pub fn assemble_kernel(layer: &LayerSpec, weights: &QuantTensor, fold: &FoldConfig, inst: &InstanceConfig) -> Result<KernelGraph> {
    assemble_kernel_with(layer, weights, fold, inst, KernelOptions::default())
}

struct Builder {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

impl Builder {
    fn push(&mut self, kind: NodeKind, inputs: &[usize]) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node { id, kind });
        self.edges.extend(inputs.iter().enumerate().map(|(port, &from)| Edge { from, to: id, port }));
        id
    }
}

pub fn assemble_kernel_with(
    layer: &LayerSpec,
    weights: &QuantTensor,
    fold: &FoldConfig,
    inst: &InstanceConfig,
    opts: KernelOptions,
) -> Result<KernelGraph> {
    check_kernel_inputs(layer, weights, fold, inst, &opts)?;
    let n_inst = inst.instances;
    let slots = fold.slots();
    let (rows, cols) = inst.output_slice;
    let mut b = Builder {
        nodes: Vec::new(),
        edges: Vec::new(),
    };

    // CFMM blocks: block index = slot * instances + instance.
    let mut odd_node: Vec<HashMap<u32, usize>> = Vec::with_capacity(slots * n_inst);
    let mut delay_of: HashMap<(usize, u32), usize> = HashMap::new();
    for (slot, cfmm) in slot_cfmms(layer, weights, fold)?.iter().enumerate() {
        for instance in 0..n_inst {
            let block = slot * n_inst + instance;
            let input = b.push(NodeKind::Input { slot, instance }, &[]);
            let mut steps = Vec::with_capacity(cfmm.plan.steps.len());
            let mut odds = HashMap::from([(1u32, input)]);
            for step in &cfmm.plan.steps {
                let mut operand = |o: crate::cfmm::Operand, b: &mut Builder| {
                    let src = match o.node {
                        NodeRef::Input => input,
                        NodeRef::Step(k) => steps[k],
                    };
                    if o.shift == 0 {
                        src
                    } else {
                        *delay_of
                            .entry((src, o.shift))
                            .or_insert_with(|| b.push(NodeKind::Delay { clocks: o.shift }, &[src]))
                    }
                };
                let a = operand(step.a, &mut b);
                let c = operand(step.b, &mut b);
                let kind = match step.op {
                    AddSub::Add => NodeKind::SerialAdd { block, target: step.target },
                    AddSub::Sub => NodeKind::SerialSub { block, target: step.target },
                };
                let id = b.push(kind, &[a, c]);
                steps.push(id);
                odds.insert(step.target, id);
            }
            odd_node.push(odds);
        }
    }

    let specs = tree_specs(layer, weights, fold, inst, opts.policy)?;
    let word_clocks = specs.iter().flatten().map(|s| s.sra.word_clocks).max().unwrap_or(1);

    // Tap conditioning shared across trees: delay then invert.
    let mut tap_node: HashMap<(usize, u32, u32, Sign), usize> = HashMap::new();
    let mut tap = |t: &Tap, b: &mut Builder| -> usize {
        let key = (t.source.block, t.source.odd, t.shift, t.sign);
        if let Some(&id) = tap_node.get(&key) {
            return id;
        }
        let mut id = odd_node[t.source.block][&t.source.odd];
        if t.shift > 0 {
            id = *delay_of
                .entry((id, t.shift))
                .or_insert_with(|| b.push(NodeKind::Delay { clocks: t.shift }, &[id]));
        }
        if t.sign == Sign::Neg {
            id = b.push(NodeKind::Invert, &[id]);
        }
        tap_node.insert(key, id);
        id
    };

    let mut latency = 0;
    let mut zero_trees = 0;
    for (t, spec) in specs.iter().enumerate() {
        let (o, r, c) = (t / (rows * cols), t / cols % rows, t % cols);
        let Some(spec) = spec else {
            zero_trees += 1;
            b.push(NodeKind::Output { tree: t, ofm: o, row: r, col: c, correction: 0 }, &[]);
            continue;
        };
        let leaves: Vec<usize> = spec
            .inputs
            .iter()
            .map(|input| {
                let per_phase: Vec<Option<usize>> =
                    input.phases.iter().map(|p| p.as_ref().map(|t| tap(t, &mut b))).collect();
                if fold.factor == 1 || per_phase.iter().all(|p| p.is_some() && *p == per_phase[0]) {
                    return per_phase[0].expect("tree input has a tap");
                }
                let mut ports: Vec<usize> = per_phase.iter().flatten().copied().collect();
                ports.sort_unstable();
                ports.dedup();
                let select = per_phase
                    .iter()
                    .map(|p| p.map(|id| ports.binary_search(&id).expect("port present")))
                    .collect();
                b.push(NodeKind::FoldMux { select }, &ports)
            })
            .collect();
        let (root, tree_latency) = emit_tree(&mut b, t, spec, &leaves);
        latency = latency.max(tree_latency);
        let width = word_clocks + bits_for((spec.inputs.len() * spec.phases()) as u64);
        let sra = b.push(
            NodeKind::Sra { tree: t, word_clocks, width, latency: tree_latency },
            &[root],
        );
        b.push(
            NodeKind::Output { tree: t, ofm: o, row: r, col: c, correction: spec.neg_count as i64 },
            &[sra],
        );
    }

    Ok(KernelGraph {
        nodes: b.nodes,
        edges: b.edges,
        meta: GraphMeta {
            layer: layer.clone(),
            fold: fold.clone(),
            instances: inst.clone(),
            word_clocks,
            latency,
            cfmm_dupes: opts.cfmm_dupes,
            pipeline_every: opts.policy.pipeline_every,
            uneven_phases: fold.is_uneven(),
            zero_trees,
            seed: opts.seed,
        },
    })
}

pub(crate) fn check_kernel_inputs(
    layer: &LayerSpec,
    weights: &QuantTensor,
    fold: &FoldConfig,
    inst: &InstanceConfig,
    opts: &KernelOptions,
) -> Result<()> {
    layer.validate()?;
    weights.check_matches(layer)?;
    fold.validate(layer.in_channels)?;
    inst.validate(layer)?;
    if opts.cfmm_dupes == 0 {
        return Err(Error::Config("cfmm_dupes must be >= 1".into()));
    }
    if opts.policy.pipeline_every == 0 {
        return Err(Error::Config("pipeline_every must be >= 1".into()));
    }
    Ok(())
}

/// CFMM block of every input slot; the plan covers the odd factors of all
/// IFMs the slot carries across fold phases.
pub(crate) fn slot_cfmms(layer: &LayerSpec, weights: &QuantTensor, fold: &FoldConfig) -> Result<Vec<CfmmBlock>> {
    let (fh, fw) = (layer.filter_h, layer.filter_w);
    (0..fold.slots())
        .map(|slot| {
            let phase_weights: Vec<Vec<i32>> = (0..fold.factor)
                .map(|p| match fold.ifm(p, slot) {
                    Some(ifm) => (0..layer.out_channels)
                        .flat_map(|o| (0..fh).flat_map(move |dy| (0..fw).map(move |dx| (o, dy, dx))))
                        .map(|(o, dy, dx)| weights.get(o, ifm, dy, dx))
                        .collect(),
                    None => Vec::new(),
                })
                .collect();
            build_cfmm(slot, &phase_weights, fold.factor)
        })
        .collect()
}

/// Adder tree of every slice position, `(ofm, row, col)` row-major; `None`
/// marks a tree without nonzero taps.
///
/// Fold phases are packed: tree input `k` carries the `k`-th nonzero tap of
/// each phase (slot-major, then instance), so a folded tree has as many
/// inputs as its busiest phase has taps.
pub(crate) fn tree_specs(
    layer: &LayerSpec,
    weights: &QuantTensor,
    fold: &FoldConfig,
    inst: &InstanceConfig,
    policy: TreePolicy,
) -> Result<Vec<Option<TreeSpec>>> {
    let (fh, fw) = (layer.filter_h, layer.filter_w);
    let n_inst = inst.instances;
    let (rows, cols) = inst.output_slice;
    let mut specs = Vec::with_capacity(layer.out_channels * rows * cols);
    let mut per_phase: Vec<Vec<Tap>> = vec![Vec::new(); fold.factor];
    for o in 0..layer.out_channels {
        for r in 0..rows {
            let dy = fh - 1 - r;
            for c in 0..cols {
                for (p, taps) in per_phase.iter_mut().enumerate() {
                    taps.clear();
                    for (slot, &ifm) in fold.phase_assignment[p].iter().enumerate() {
                        for i in 0..n_inst {
                            let Some(dx) = (i + fw - 1).checked_sub(c).filter(|&dx| dx < fw) else {
                                continue;
                            };
                            if let WeightDecomp::Tap { sign, odd, shift } = decompose(weights.get(o, ifm, dy, dx))? {
                                taps.push(Tap {
                                    source: TapSource {
                                        block: slot * n_inst + i,
                                        odd,
                                    },
                                    shift,
                                    sign,
                                    filter_pos: (dy, dx),
                                });
                            }
                        }
                    }
                }
                let width = per_phase.iter().map(Vec::len).max().unwrap_or(0);
                specs.push(if width == 0 {
                    None
                } else {
                    let inputs = (0..width)
                        .map(|k| TreeInput {
                            phases: per_phase.iter().map(|t| t.get(k).copied()).collect(),
                        })
                        .collect();
                    Some(build_tree(o, inputs, policy)?)
                });
            }
        }
    }
    Ok(specs)
}

/// Emits compressors, adders and pipeline registers; returns the root node
/// and the number of registers on every leaf-to-root path.
fn emit_tree(b: &mut Builder, tree: usize, spec: &TreeSpec, leaves: &[usize]) -> (usize, u32) {
    if spec.stage0_groups.is_empty() {
        return (leaves[0], 0);
    }
    let levels = spec.levels();
    let registered = spec.register_levels();
    let mut values: Vec<usize> = leaves
        .chunks(COMPRESSOR_FAN_IN)
        .map(|g| b.push(NodeKind::Compressor { tree, inputs: g.len() }, g))
        .collect();
    let mut latency = 0;
    for (level, maxes) in levels.iter().enumerate() {
        if level > 0 {
            let prev = values;
            values = prev
                .chunks(2)
                .zip(maxes)
                .map(|(pair, &max)| match *pair {
                    [a, c] => b.push(NodeKind::ParallelAdd { bits: bits_for(max) }, &[a, c]),
                    [a] => a,
                    _ => unreachable!("chunks of two"),
                })
                .collect();
        }
        if registered.contains(&level) {
            latency += 1;
            values = values
                .iter()
                .zip(maxes)
                .map(|(&v, &max)| b.push(NodeKind::Register { bits: bits_for(max) }, &[v]))
                .collect();
        }
    }
    (values[0], latency)
}

/// Weight tensor implemented by a graph, recovered from its tap paths.
pub fn extract_weights(graph: &KernelGraph) -> Result<QuantTensor> {
    let layer = &graph.meta.layer;
    let fold = &graph.meta.fold;
    let n_inst = graph.instances();
    let fan_in = graph.fan_in();
    let mut out = QuantTensor::zeros(layer.weight_shape());
    let mut set = vec![false; out.weights.len()];
    let corrupt = |m: &str| Error::Netlist(m.to_owned());

    let resolve = |mut id: usize| -> Result<(usize, i32)> {
        let mut sign = 1;
        let mut shift = 0;
        loop {
            match &graph.nodes[id].kind {
                NodeKind::Invert if sign == 1 && shift == 0 => sign = -1,
                NodeKind::Delay { clocks } if shift == 0 => shift = *clocks,
                NodeKind::Input { slot, instance } => return Ok((slot * n_inst + instance, sign << shift)),
                NodeKind::SerialAdd { block, target } | NodeKind::SerialSub { block, target } => {
                    return Ok((*block, sign * ((*target as i32) << shift)))
                }
                _ => return Err(corrupt("unexpected node on a tap path")),
            }
            id = *fan_in[id].first().ok_or_else(|| corrupt("dangling tap path"))?;
        }
    };

    for n in &graph.nodes {
        let NodeKind::Output { row, col, ofm, .. } = n.kind else {
            continue;
        };
        let Some(&sra) = fan_in[n.id].first() else {
            continue;
        };
        let mut stack = vec![fan_in[sra][0]];
        while let Some(id) = stack.pop() {
            if graph.nodes[id].kind.is_tree_internal() {
                stack.extend(&fan_in[id]);
                continue;
            }
            let per_phase: Vec<Option<usize>> = match &graph.nodes[id].kind {
                NodeKind::FoldMux { select } => select.iter().map(|s| s.map(|p| fan_in[id][p])).collect(),
                _ => vec![Some(id); fold.factor],
            };
            for (phase, src) in per_phase.into_iter().enumerate() {
                let Some(src) = src else { continue };
                let (block, w) = resolve(src)?;
                let (slot, i) = (block / n_inst, block % n_inst);
                let dy = layer.filter_h - 1 - row;
                let dx = (i + layer.filter_w - 1)
                    .checked_sub(col)
                    .filter(|&dx| dx < layer.filter_w)
                    .ok_or_else(|| corrupt("instance does not reach slice column"))?;
                let ifm = fold.ifm(phase, slot).ok_or_else(|| corrupt("tap on an idle slot"))?;
                let k = out.index(ofm, ifm, dy, dx);
                if set[k] && out.weights[k] as i32 != w {
                    return Err(corrupt("conflicting weights across instances"));
                }
                out.weights[k] = i8::try_from(w).map_err(|_| Error::Int7Range(w))?;
                set[k] = true;
            }
        }
    }
    Ok(out)
}

fn options_of(graph: &KernelGraph) -> KernelOptions {
    KernelOptions {
        cfmm_dupes: graph.meta.cfmm_dupes,
        policy: TreePolicy {
            pipeline_every: graph.meta.pipeline_every,
        },
        seed: graph.meta.seed,
    }
}

/// Refolds a graph so its input maps are streamed over `factor` phases in
/// total. Folding by 1 yields an unfolded graph.
pub fn fold_kernel(graph: &KernelGraph, factor: usize) -> Result<KernelGraph> {
    let layer = &graph.meta.layer;
    if factor == graph.meta.fold.factor {
        return Ok(graph.clone());
    }
    let fold = FoldConfig::even(factor, layer.in_channels)?;
    let weights = extract_weights(graph)?;
    assemble_kernel_with(layer, &weights, &fold, &graph.meta.instances, options_of(graph))
}

/// Replicates the filter over `inst.instances` neighbouring output
/// columns, summing overlapping contributions inside the kernel.
pub fn build_multi_instance(graph: &KernelGraph, inst: &InstanceConfig) -> Result<KernelGraph> {
    let layer = &graph.meta.layer;
    inst.validate(layer)?;
    if *inst == graph.meta.instances {
        return Ok(graph.clone());
    }
    if inst.instances > 1 && layer.filter_area() == 1 {
        return Err(Error::InvalidInstances("overlapped instances need a filter larger than 1x1".into()));
    }
    let weights = extract_weights(graph)?;
    assemble_kernel_with(layer, &weights, &graph.meta.fold, inst, options_of(graph))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Netlist {
    pub schema: String,
    pub version: u32,
    pub provenance: Provenance,
    #[serde(flatten)]
    pub graph: KernelGraph,
}

impl Netlist {
    pub fn new(graph: KernelGraph) -> Self {
        Netlist {
            schema: NETLIST_SCHEMA.into(),
            version: NETLIST_VERSION,
            provenance: Provenance::new(graph.meta.seed, &graph.meta),
            graph,
        }
    }
}

pub fn netlist_to_json(graph: &KernelGraph) -> Result<Vec<u8>> {
    graph.validate()?;
    let mut bytes = serde_json::to_vec(&Netlist::new(graph.clone()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn netlist_from_json(bytes: &[u8]) -> Result<KernelGraph> {
    let n: Netlist = serde_json::from_slice(bytes).map_err(|e| Error::Netlist(e.to_string()))?;
    if n.schema != NETLIST_SCHEMA || n.version != NETLIST_VERSION {
        return Err(Error::Netlist(format!("unsupported schema {} v{}", n.schema, n.version)));
    }
    n.graph.validate()?;
    Ok(n.graph)
}

pub fn export_netlist(graph: &KernelGraph, path: &Path) -> Result<()> {
    write_atomic(path, &netlist_to_json(graph)?)
}

pub fn import_netlist(path: &Path) -> Result<KernelGraph> {
    netlist_from_json(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_layer;

    fn dense(layer: &LayerSpec, f: impl Fn(usize) -> i32) -> QuantTensor {
        QuantTensor::new(layer.weight_shape(), (0..layer.param_count()).map(|k| f(k) as i8).collect()).unwrap()
    }

    fn sparse(layer: &LayerSpec, sparsity: f64, seed: u64) -> QuantTensor {
        generate_layer(layer, sparsity, seed).unwrap().0
    }

    fn unfolded(layer: &LayerSpec, w: &QuantTensor) -> KernelGraph {
        assemble_kernel(layer, w, &FoldConfig::unfolded(layer.in_channels), &InstanceConfig::single(layer)).unwrap()
    }

    #[test]
    fn dense_1x1_structure() {
        let l = LayerSpec::new("l", 4, 2, 1, 1, 2);
        let g = unfolded(&l, &dense(&l, |k| k as i32 + 1));
        assert_eq!(g.count(|k| matches!(k, NodeKind::Input { .. })), 4);
        assert_eq!(g.count(|k| matches!(k, NodeKind::Output { .. })), 2);
        let fan: Vec<usize> = g
            .nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Compressor { inputs, .. } => Some(inputs),
                _ => None,
            })
            .collect();
        assert_eq!(fan, [4, 4]);
        g.validate().unwrap();
    }

    #[test]
    fn instance_slice_shape() {
        assert_eq!(InstanceConfig::new(4, 3, 3).output_slice, (3, 6));
        assert_eq!(InstanceConfig::new(1, 3, 3).output_slice, (3, 3));
        let l = LayerSpec::new("l", 1, 1, 3, 1, 4);
        let mut bad = InstanceConfig::new(4, 3, 3);
        bad.output_slice = (3, 5);
        assert!(matches!(bad.validate(&l), Err(Error::InvalidInstances(_))));
    }

    #[test]
    fn fold_phases() {
        let f = FoldConfig::even(2, 3).unwrap();
        assert_eq!(f.phase_assignment, vec![vec![0, 1], vec![2]]);
        assert!(f.is_uneven());
        assert!(!FoldConfig::even(4, 8).unwrap().is_uneven());
        assert!(FoldConfig::even(5, 4).is_err());
        let overlap = FoldConfig {
            factor: 2,
            phase_assignment: vec![vec![0, 1], vec![1]],
        };
        assert!(overlap.validate(2).is_err());
    }

    #[test]
    fn sparsity_elision() {
        let l = LayerSpec::new("l", 16, 8, 3, 1, 4);
        let w = sparse(&l, 0.8, 3);
        let g = unfolded(&l, &w);
        assert_eq!(g.tree_input_count(), w.nonzero_count());
        let d = unfolded(&l, &dense(&l, |k| (k % 60) as i32 + 2));
        assert!(g.nodes.len() < d.nodes.len());
        assert_eq!(d.tree_input_count(), l.param_count());
    }

    #[test]
    fn zero_layer_has_only_inputs_and_outputs() {
        let l = LayerSpec::new("l", 2, 3, 3, 1, 4);
        let g = unfolded(&l, &QuantTensor::zeros(l.weight_shape()));
        assert_eq!(g.meta.zero_trees, 27);
        assert_eq!(g.kind_counts().keys().copied().collect::<Vec<_>>(), ["input", "output"]);
    }

    #[test]
    fn fold_inserts_muxes_and_round_trips_weights() {
        let l = LayerSpec::new("l", 6, 4, 3, 1, 4);
        let w = sparse(&l, 0.5, 9);
        let g = unfolded(&l, &w);
        let f = fold_kernel(&g, 4).unwrap();
        assert!(f.count(|k| matches!(k, NodeKind::FoldMux { .. })) > 0);
        assert!(f.meta.uneven_phases);
        assert_eq!(f.slots(), 2);
        assert_eq!(extract_weights(&f).unwrap(), w);
        assert_eq!(fold_kernel(&f, 1).unwrap(), g);
        assert!(fold_kernel(&g, 7).is_err());
        f.validate().unwrap();
    }

    #[test]
    fn multi_instance_round_trips_weights() {
        let l = LayerSpec::new("l", 3, 2, 3, 1, 6);
        let w = sparse(&l, 0.3, 4);
        let g = unfolded(&l, &w);
        let m = build_multi_instance(&g, &InstanceConfig::new(4, 3, 3)).unwrap();
        assert_eq!(m.slice(), (3, 6));
        assert_eq!(m.tree_count(), 2 * 18);
        assert_eq!(extract_weights(&m).unwrap(), w);
        assert_eq!(build_multi_instance(&g, &InstanceConfig::single(&l)).unwrap(), g);
        let p = LayerSpec::new("p", 3, 2, 1, 1, 6);
        let gp = unfolded(&p, &sparse(&p, 0.3, 4));
        assert!(build_multi_instance(&gp, &InstanceConfig::new(4, 1, 1)).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let l = LayerSpec::new("l", 3, 2, 3, 1, 6);
        let w = QuantTensor::zeros([2, 3, 1, 1]);
        let r = assemble_kernel(&l, &w, &FoldConfig::unfolded(3), &InstanceConfig::single(&l));
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn netlist_round_trip_is_deterministic() {
        let l = LayerSpec::new("l", 4, 3, 3, 1, 4);
        let w = sparse(&l, 0.6, 1);
        let g = fold_kernel(&unfolded(&l, &w), 2).unwrap();
        let a = netlist_to_json(&g).unwrap();
        assert_eq!(a, netlist_to_json(&assemble_kernel(&l, &w, &g.meta.fold, &g.meta.instances).unwrap()).unwrap());
        let back = netlist_from_json(&a).unwrap();
        assert_eq!(back, g);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.netlist.json");
        export_netlist(&g, &p).unwrap();
        assert_eq!(import_netlist(&p).unwrap(), g);
        let text = String::from_utf8(a).unwrap().replace("\"kind\":\"invert\"", "\"kind\":\"lut\"");
        assert!(netlist_from_json(text.as_bytes()).is_err());
    }
}
