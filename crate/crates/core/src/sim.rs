//! Functional simulation of kernel graphs.
//!
//! [`SimMode::BitTrue`] clocks every node once per bit: activations stream
//! LSB first, serial adders keep a carry flop, delays and pipeline
//! registers hold state, compressors emit their 3-bit counts and each SRA
//! accumulates its tree's per-clock sums. [`SimMode::Fast`] evaluates the
//! same graph on whole words modulo `2^W`, which is algebraically identical
//! and roughly `W` times cheaper.
//!
//! A layer is driven by the feeder: one issue streams an input row segment
//! of `instances` columns through every fold phase, and the trees' slice
//! results are added into the output map at the positions they cover.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{FoldConfig, InstanceConfig, KernelGraph, KernelOptions, NodeKind};
use crate::model::{BlockSpec, LayerSpec, QuantTensor, ScaleBias};
use crate::reference::{collect, Accumulation, ActivationMap};
use crate::tree::{apply_correction, reduce12};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    #[default]
    BitTrue,
    Fast,
}

impl FromStr for SimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bit-true" => Ok(SimMode::BitTrue),
            "fast" => Ok(SimMode::Fast),
            _ => Err(Error::Config(format!("unknown simulation mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimResult {
    pub ofm_accumulations: Accumulation,
    pub cycles: u64,
    /// Per clock, the value entering every SRA (tree order). Bit-true
    /// window simulation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<Vec<u64>>>,
}

/// One feeder issue: an input row and the column streamed by each instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Issue {
    pub row: usize,
    pub cols: Vec<Option<usize>>,
}

/// Issue sequence for a layer. Pointwise filters only visit the rows and
/// columns that reach an output (stride subsampling); wider filters visit
/// every input pixel in contiguous groups of `instances` columns.
pub fn feeder_issues(layer: &LayerSpec, instances: usize) -> Vec<Issue> {
    let (rows, cols): (Vec<usize>, Vec<usize>) = if layer.filter_area() == 1 {
        let keep = |n: usize, out: usize| -> Vec<usize> {
            (0..n)
                .filter(|&v| (v + layer.padding) % layer.stride == 0 && (v + layer.padding) / layer.stride < out)
                .collect()
        };
        (keep(layer.in_height, layer.out_height()), keep(layer.in_width, layer.out_width()))
    } else {
        ((0..layer.in_height).collect(), (0..layer.in_width).collect())
    };
    let mut issues = Vec::new();
    for &row in &rows {
        if layer.filter_area() == 1 {
            for chunk in cols.chunks(instances) {
                let mut c: Vec<Option<usize>> = chunk.iter().copied().map(Some).collect();
                c.resize(instances, None);
                issues.push(Issue { row, cols: c });
            }
        } else {
            for ix0 in (0..layer.in_width).step_by(instances) {
                let c = (ix0..ix0 + instances).map(|x| (x < layer.in_width).then_some(x)).collect();
                issues.push(Issue { row, cols: c });
            }
        }
    }
    issues
}

/// Clocks to run a whole layer: `issues * fold * W + latency`.
pub fn cycle_count(graph: &KernelGraph) -> u64 {
    let m = &graph.meta;
    let issues = feeder_issues(&m.layer, m.instances.instances).len() as u64;
    issues * m.fold.factor as u64 * m.word_clocks as u64 + m.latency as u64
}

struct Prepared<'g> {
    graph: &'g KernelGraph,
    fan_in: Vec<Vec<usize>>,
    mask: u64,
    w: u32,
}

impl<'g> Prepared<'g> {
    fn new(graph: &'g KernelGraph) -> Self {
        let w = graph.meta.word_clocks;
        Prepared {
            graph,
            fan_in: graph.fan_in(),
            mask: if w >= 64 { u64::MAX } else { (1 << w) - 1 },
            w,
        }
    }

    fn input_index(&self, slot: usize, instance: usize) -> usize {
        slot * self.graph.instances() + instance
    }

    /// Tree results for one issue. `window[p][slot * instances + i]` is the
    /// activation on that input in phase `p`.
    fn run(&self, window: &[Vec<u8>], mode: SimMode, mut trace: Option<&mut Vec<Vec<u64>>>) -> Result<Vec<i64>> {
        let raw = match mode {
            SimMode::Fast => self.run_fast(window),
            SimMode::BitTrue => self.run_bits(window, &mut trace),
        };
        let g = self.graph;
        let mut out = vec![0i64; g.tree_count()];
        for n in &g.nodes {
            if let NodeKind::Output { tree, correction, .. } = n.kind {
                if let Some(&sra) = self.fan_in[n.id].first() {
                    let NodeKind::Sra { width, .. } = g.nodes[sra].kind else {
                        return Err(Error::Netlist("output not driven by an SRA".into()));
                    };
                    let acc = raw[sra];
                    if width < 128 && acc >> width != 0 {
                        return Err(Error::AccumulatorOverflow { width });
                    }
                    out[tree] = apply_correction(acc, correction as u64, self.w);
                }
            }
        }
        Ok(out)
    }

    fn run_fast(&self, window: &[Vec<u8>]) -> Vec<u128> {
        let g = self.graph;
        let m = self.mask;
        let mut sra = vec![0u128; g.nodes.len()];
        let mut v = vec![0u64; g.nodes.len()];
        for (phase, xs) in window.iter().enumerate() {
            for n in &g.nodes {
                let ins = &self.fan_in[n.id];
                v[n.id] = match &n.kind {
                    NodeKind::Input { slot, instance } => xs[self.input_index(*slot, *instance)] as u64,
                    NodeKind::SerialAdd { .. } => v[ins[0]].wrapping_add(v[ins[1]]) & m,
                    NodeKind::SerialSub { .. } => v[ins[0]].wrapping_sub(v[ins[1]]) & m,
                    NodeKind::Delay { clocks } => (v[ins[0]] << clocks) & m,
                    NodeKind::Invert => !v[ins[0]] & m,
                    NodeKind::FoldMux { select } => select[phase].map_or(0, |p| v[ins[p]]),
                    NodeKind::Compressor { .. } | NodeKind::ParallelAdd { .. } => ins.iter().map(|&i| v[i]).sum(),
                    NodeKind::Register { .. } => v[ins[0]],
                    NodeKind::Sra { .. } => {
                        sra[n.id] += v[ins[0]] as u128;
                        0
                    }
                    NodeKind::Output { .. } => 0,
                };
            }
        }
        sra
    }

    fn run_bits(&self, window: &[Vec<u8>], trace: &mut Option<&mut Vec<Vec<u64>>>) -> Vec<u128> {
        let g = self.graph;
        let n_nodes = g.nodes.len();
        let w = self.w;
        let clocks = w + g.meta.latency;
        let mut sra = vec![0u128; n_nodes];
        // Carry flops, delay shift registers and pipeline registers.
        let mut state = vec![0u64; n_nodes];
        let mut v = vec![0u64; n_nodes];
        for (phase, xs) in window.iter().enumerate() {
            for n in &g.nodes {
                state[n.id] = u64::from(matches!(n.kind, NodeKind::SerialSub { .. }));
            }
            for clk in 0..clocks {
                let mut sums = trace.is_some().then(|| vec![0u64; g.tree_count()]);
                for n in &g.nodes {
                    let ins = &self.fan_in[n.id];
                    let id = n.id;
                    v[id] = match &n.kind {
                        NodeKind::Input { slot, instance } => {
                            let x = xs[self.input_index(*slot, *instance)] as u64;
                            if clk < w { x >> clk & 1 } else { 0 }
                        }
                        NodeKind::SerialAdd { .. } | NodeKind::SerialSub { .. } => {
                            let b = if matches!(n.kind, NodeKind::SerialSub { .. }) { 1 - v[ins[1]] } else { v[ins[1]] };
                            let s = v[ins[0]] + b + state[id];
                            state[id] = s >> 1;
                            s & 1
                        }
                        NodeKind::Delay { clocks } => {
                            state[id] = state[id] << 1 | v[ins[0]];
                            state[id] >> clocks & 1
                        }
                        NodeKind::Invert => 1 - v[ins[0]],
                        NodeKind::FoldMux { select } => select[phase].map_or(0, |p| v[ins[p]]),
                        NodeKind::Compressor { .. } => {
                            let mut twelve = [false; 12];
                            for (b, &i) in twelve.iter_mut().zip(ins) {
                                *b = v[i] == 1;
                            }
                            reduce12(twelve) as u64
                        }
                        NodeKind::ParallelAdd { .. } => v[ins[0]] + v[ins[1]],
                        NodeKind::Register { .. } => std::mem::replace(&mut state[id], v[ins[0]]),
                        NodeKind::Sra { tree, latency, .. } => {
                            let s = v[ins[0]];
                            if let Some(sums) = sums.as_mut() {
                                sums[*tree] = s;
                            }
                            if clk >= *latency && clk - latency < w {
                                sra[id] += (s as u128) << (clk - latency);
                            }
                            0
                        }
                        NodeKind::Output { .. } => 0,
                    };
                }
                if let (Some(t), Some(s)) = (trace.as_mut(), sums) {
                    t.push(s);
                }
            }
        }
        sra
    }
}

fn slice_acc(graph: &KernelGraph, values: Vec<i64>) -> Accumulation {
    let (rows, cols) = graph.slice();
    Accumulation {
        channels: graph.meta.layer.out_channels,
        height: rows,
        width: cols,
        data: values,
    }
}

/// Runs one issue. `window` holds, phase-major, the activation on every
/// (slot, instance) input: `window[(p * slots + slot) * instances + i]`.
/// The result covers the instance slice, one value per tree.
pub fn simulate_window(graph: &KernelGraph, window: &[u8], mode: SimMode) -> Result<SimResult> {
    simulate_window_inner(graph, window, mode, false)
}

/// Bit-true window simulation that also records per-clock tree sums.
pub fn simulate_window_traced(graph: &KernelGraph, window: &[u8]) -> Result<SimResult> {
    simulate_window_inner(graph, window, SimMode::BitTrue, true)
}

fn simulate_window_inner(graph: &KernelGraph, window: &[u8], mode: SimMode, traced: bool) -> Result<SimResult> {
    let per_phase = graph.slots() * graph.instances();
    let fold = graph.meta.fold.factor;
    if window.len() != fold * per_phase {
        return Err(Error::ShapeMismatch(format!(
            "window needs {} activations, got {}",
            fold * per_phase,
            window.len()
        )));
    }
    let phases: Vec<Vec<u8>> = window.chunks(per_phase.max(1)).map(<[u8]>::to_vec).collect();
    let prepared = Prepared::new(graph);
    let mut trace = traced.then(Vec::new);
    let values = prepared.run(&phases, mode, trace.as_mut())?;
    Ok(SimResult {
        ofm_accumulations: slice_acc(graph, values),
        cycles: fold as u64 * graph.meta.word_clocks as u64 + graph.meta.latency as u64,
        trace,
    })
}

/// Runs a whole feature map through the kernel and the NK accumulator.
pub fn simulate_layer(graph: &KernelGraph, ifm: &ActivationMap, mode: SimMode) -> Result<SimResult> {
    let layer = &graph.meta.layer;
    ifm.check_input_of(layer)?;
    let fold = &graph.meta.fold;
    let n_inst = graph.instances();
    let slots = graph.slots();
    let (rows, cols) = graph.slice();
    let (fh, fw) = (layer.filter_h, layer.filter_w);
    let (pad, stride) = (layer.padding as isize, layer.stride as isize);
    let (oh, ow) = (layer.out_height() as isize, layer.out_width() as isize);
    let prepared = Prepared::new(graph);
    let mut acc = Accumulation::for_layer(layer);
    let issues = feeder_issues(layer, n_inst);
    let mut window = vec![vec![0u8; slots * n_inst]; fold.factor];
    for issue in &issues {
        for (p, xs) in window.iter_mut().enumerate() {
            for slot in 0..slots {
                for (i, col) in issue.cols.iter().enumerate() {
                    xs[slot * n_inst + i] = match (fold.ifm(p, slot), col) {
                        (Some(ifm_idx), Some(x)) => ifm.get(ifm_idx, issue.row, *x),
                        _ => 0,
                    };
                }
            }
        }
        let values = prepared.run(&window, mode, None)?;
        let ix0 = issue.cols[0].unwrap_or(0) as isize;
        for (t, &v) in values.iter().enumerate() {
            if v == 0 {
                continue;
            }
            let (o, r, c) = (t / (rows * cols), t / cols % rows, t % cols);
            let vy = issue.row as isize - (fh - 1 - r) as isize + pad;
            let vx = if fw == 1 {
                match issue.cols[c] {
                    Some(x) => x as isize + pad,
                    None => continue,
                }
            } else {
                ix0 + c as isize - (fw - 1) as isize + pad
            };
            if vy < 0 || vx < 0 || vy % stride != 0 || vx % stride != 0 {
                continue;
            }
            let (y, x) = (vy / stride, vx / stride);
            if y < oh && x < ow {
                acc.add(o, y as usize, x as usize, v);
            }
        }
    }
    let m = &graph.meta;
    Ok(SimResult {
        ofm_accumulations: acc,
        cycles: issues.len() as u64 * m.fold.factor as u64 * m.word_clocks as u64 + m.latency as u64,
        trace: None,
    })
}

/// Kernel configuration applied to every layer of a block. Folds larger
/// than a layer's input count are clamped; instances apply to every layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSimConfig {
    pub fold: usize,
    pub instances: usize,
    pub mode: SimMode,
    pub options: KernelOptions,
}

impl Default for BlockSimConfig {
    fn default() -> Self {
        BlockSimConfig {
            fold: 1,
            instances: 1,
            mode: SimMode::BitTrue,
            options: KernelOptions::default(),
        }
    }
}

/// Compiles and simulates one layer.
pub fn simulate_compiled_layer(
    layer: &LayerSpec,
    tensor: &QuantTensor,
    ifm: &ActivationMap,
    cfg: &BlockSimConfig,
) -> Result<Accumulation> {
    let graph = compile_layer(layer, tensor, cfg)?;
    Ok(simulate_layer(&graph, ifm, cfg.mode)?.ofm_accumulations)
}

fn compile_layer(layer: &LayerSpec, tensor: &QuantTensor, cfg: &BlockSimConfig) -> Result<KernelGraph> {
    let fold = FoldConfig::even(cfg.fold.clamp(1, layer.in_channels), layer.in_channels)?;
    let inst = InstanceConfig::new(cfg.instances, layer.filter_h, layer.filter_w);
    crate::kernel::assemble_kernel_with(layer, tensor, &fold, &inst, cfg.options)
}

/// A residual block compiled once and run on many inputs.
pub struct CompiledBlock<'a> {
    block: &'a BlockSpec,
    graphs: Vec<KernelGraph>,
    scale_bias: Vec<&'a ScaleBias>,
    mode: SimMode,
}

impl<'a> CompiledBlock<'a> {
    pub fn new(block: &'a BlockSpec, layers: &[(&QuantTensor, &'a ScaleBias)], cfg: &BlockSimConfig) -> Result<Self> {
        block.validate()?;
        let specs: Vec<&LayerSpec> = block.all_layers().collect();
        if specs.len() != layers.len() {
            return Err(Error::ShapeMismatch(format!("{}: layer count mismatch", block.name)));
        }
        let graphs = specs
            .iter()
            .zip(layers)
            .map(|(l, (t, _))| compile_layer(l, t, cfg))
            .collect::<Result<_>>()?;
        Ok(CompiledBlock {
            block,
            graphs,
            scale_bias: layers.iter().map(|(_, sb)| *sb).collect(),
            mode: cfg.mode,
        })
    }

    /// Same contract as [`crate::reference::residual_block_ref`].
    pub fn run(&self, ifm: &ActivationMap) -> Result<ActivationMap> {
        let main = self.block.layers.len();
        let sim = |k: usize, x: &ActivationMap| simulate_layer(&self.graphs[k], x, self.mode).map(|r| r.ofm_accumulations);
        let shortcut = match &self.block.shortcut {
            Some(_) => collect(&sim(main, ifm)?, self.scale_bias[main], &[], None)?,
            None => ifm.clone(),
        };
        let mut x = ifm.clone();
        for k in 0..main {
            let acc = sim(k, &x)?;
            x = collect(&acc, self.scale_bias[k], &[], (k + 1 == main).then_some(&shortcut))?;
        }
        Ok(x)
    }
}

/// A residual block executed on compiled kernels plus the collector. Same
/// contract as [`crate::reference::residual_block_ref`].
pub fn simulate_block(
    block: &BlockSpec,
    layers: &[(&QuantTensor, &ScaleBias)],
    ifm: &ActivationMap,
    cfg: &BlockSimConfig,
) -> Result<ActivationMap> {
    CompiledBlock::new(block, layers, cfg)?.run(ifm)
}
