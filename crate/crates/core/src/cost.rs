//! Resource estimation and the throughput model.
//!
//! ALM counting rules:
//!
//! * bit-serial add/sub: 1 ALM and a carry flop, times the CFMM dupe count;
//! * delay: one flop per clock; inversion: one flop;
//! * stage-0 compressors: 5 ALMs per 12 tree inputs (selectable: 10 per 27,
//!   or 3 per 6:3 block);
//! * parallel adders: 1 ALM per 2 output bits;
//! * fold muxes: a 2:1 mux is half an ALM, wider ones a tree of 4:1 muxes
//!   at one 6-input LUT (one ALM) each;
//! * SRA: 1 ALM per 2 accumulator bits plus one flop per bit;
//! * pipeline registers: flops only.
//!
//! DSPs count collector scalers shared by `dsp_sharing` outputs; M20Ks hold
//! the double-buffered input map at 2560 bytes per block.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cfmm::{NodeRef, Sign};
use crate::error::{Error, Result};
use crate::kernel::{check_kernel_inputs, slot_cfmms, tree_specs, FoldConfig, InstanceConfig, KernelGraph, KernelOptions, NodeKind};
use crate::model::{block_stats, BlockSpec, LayerSpec, QuantTensor};
use crate::tree::TreeSpec;
use crate::util::bits_for;

/// Serial word length of the throughput model. Calibrated, not measured:
/// it reproduces the reference throughput and TOPs figures.
pub const CALIBRATED_WORD_CLOCKS: u32 = 30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressorVariant {
    /// 5 ALMs per 12 inputs.
    #[default]
    Alm5Per12,
    /// 10 ALMs per 27 inputs.
    Alm10Per27,
    /// 3 ALMs per 6:3 compressor.
    Asymptotic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostRules {
    pub variant: CompressorVariant,
    /// Output channels (times instances) served by one DSP scaler.
    pub dsp_sharing: u64,
    pub m20k_bytes: u64,
    /// Input buffer copies (double buffering).
    pub buffer_factor: u64,
}

impl Default for CostRules {
    fn default() -> Self {
        CostRules {
            variant: CompressorVariant::default(),
            dsp_sharing: 16,
            m20k_bytes: 2560,
            buffer_factor: 2,
        }
    }
}

/// Stage-0 ALMs for a tree with `inputs` inputs.
pub fn stage0_alms(inputs: u64, variant: CompressorVariant) -> u64 {
    if inputs < 2 {
        return 0;
    }
    match variant {
        CompressorVariant::Alm5Per12 => (5 * inputs).div_ceil(12),
        CompressorVariant::Alm10Per27 => (10 * inputs).div_ceil(27),
        CompressorVariant::Asymptotic => 3 * inputs.div_ceil(6),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub alms: u64,
    pub flops: u64,
}

impl AddAssign for Category {
    fn add_assign(&mut self, o: Self) {
        self.alms += o.alms;
        self.flops += o.flops;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub cfmm: Category,
    pub tree_stage0: Category,
    pub tree_upper: Category,
    pub muxes: Category,
    pub sra: Category,
    pub registers: Category,
}

impl Breakdown {
    fn parts(&self) -> [Category; 6] {
        [self.cfmm, self.tree_stage0, self.tree_upper, self.muxes, self.sra, self.registers]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceEstimate {
    pub alms: u64,
    pub flops: u64,
    pub dsps: u64,
    pub m20ks: u64,
    pub breakdown: Breakdown,
}

impl ResourceEstimate {
    fn from_breakdown(breakdown: Breakdown, dsps: u64, m20ks: u64) -> Self {
        let parts = breakdown.parts();
        ResourceEstimate {
            alms: parts.iter().map(|c| c.alms).sum(),
            flops: parts.iter().map(|c| c.flops).sum(),
            dsps,
            m20ks,
            breakdown,
        }
    }
}

impl Add for ResourceEstimate {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        let mut b = self.breakdown;
        b.cfmm += o.breakdown.cfmm;
        b.tree_stage0 += o.breakdown.tree_stage0;
        b.tree_upper += o.breakdown.tree_upper;
        b.muxes += o.breakdown.muxes;
        b.sra += o.breakdown.sra;
        b.registers += o.breakdown.registers;
        ResourceEstimate::from_breakdown(b, self.dsps + o.dsps, self.m20ks + o.m20ks)
    }
}

impl std::iter::Sum for ResourceEstimate {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ResourceEstimate::default(), Add::add)
    }
}

fn nk_resources(layer: &LayerSpec, instances: usize, rules: &CostRules) -> (u64, u64) {
    let dsps = (layer.out_channels as u64 * instances as u64).div_ceil(rules.dsp_sharing.max(1));
    let bytes = (layer.in_channels * layer.in_height * layer.in_width) as u64 * rules.buffer_factor;
    (dsps, bytes.div_ceil(rules.m20k_bytes.max(1)))
}

pub fn estimate_kernel(graph: &KernelGraph) -> ResourceEstimate {
    estimate_kernel_with(graph, &CostRules::default())
}

/// ALMs for `consumers` single-bit `factor`:1 muxes.
pub fn mux_alms(consumers: u64, factor: usize) -> u64 {
    let halves = match factor {
        0 | 1 => 0,
        2 => 1,
        f => 2 * (f as u64 - 1).div_ceil(3),
    };
    (consumers * halves).div_ceil(2)
}

/// Applies the counting rules to every node of a graph.
pub fn estimate_kernel_with(graph: &KernelGraph, rules: &CostRules) -> ResourceEstimate {
    let dupes = graph.meta.cfmm_dupes as u64;
    let mut b = Breakdown::default();
    let mut tree_inputs: BTreeMap<usize, u64> = BTreeMap::new();
    let mut mux_consumers = 0u64;
    for n in &graph.nodes {
        match &n.kind {
            NodeKind::SerialAdd { .. } | NodeKind::SerialSub { .. } => b.cfmm += Category { alms: dupes, flops: dupes },
            NodeKind::Delay { clocks } => b.cfmm.flops += *clocks as u64 * dupes,
            NodeKind::Invert => b.cfmm.flops += dupes,
            NodeKind::FoldMux { .. } => mux_consumers += 1,
            NodeKind::Compressor { tree, inputs } => *tree_inputs.entry(*tree).or_default() += *inputs as u64,
            NodeKind::ParallelAdd { bits } => b.tree_upper.alms += (*bits as u64).div_ceil(2),
            NodeKind::Register { bits } => b.registers.flops += *bits as u64,
            NodeKind::Sra { width, .. } => b.sra += Category { alms: (*width as u64).div_ceil(2), flops: *width as u64 },
            NodeKind::Input { .. } | NodeKind::Output { .. } => {}
        }
    }
    b.tree_stage0.alms = tree_inputs.values().map(|&n| stage0_alms(n, rules.variant)).sum();
    b.muxes.alms = mux_alms(mux_consumers, graph.meta.fold.factor);
    let (dsps, m20ks) = nk_resources(&graph.meta.layer, graph.instances(), rules);
    ResourceEstimate::from_breakdown(b, dsps, m20ks)
}

/// Same counts as [`estimate_kernel_with`] on the assembled graph, derived
/// from the tree and CFMM plans without materialising nodes.
pub fn estimate_layer(
    layer: &LayerSpec,
    weights: &QuantTensor,
    fold: &FoldConfig,
    inst: &InstanceConfig,
    opts: KernelOptions,
    rules: &CostRules,
) -> Result<ResourceEstimate> {
    check_kernel_inputs(layer, weights, fold, inst, &opts)?;
    let dupes = opts.cfmm_dupes as u64;
    let n_inst = inst.instances as u64;
    let specs = tree_specs(layer, weights, fold, inst, opts.policy)?;
    let trees: Vec<&TreeSpec> = specs.iter().flatten().collect();
    let word_clocks = trees.iter().map(|t| t.sra.word_clocks).max().unwrap_or(1);
    let mut b = Breakdown::default();

    // Per slot: chain steps, distinct (odd, shift) delays and negated taps.
    // Every instance of a slot uses the same tap set.
    let mut used: Vec<BTreeSet<(u32, u32, Sign)>> = vec![BTreeSet::new(); fold.slots()];
    let mut mux_consumers = 0u64;
    for t in &trees {
        for input in &t.inputs {
            let taps: Vec<_> = input.phases.iter().map(|p| p.map(|t| (t.source, t.shift, t.sign))).collect();
            for &(src, shift, sign) in taps.iter().flatten() {
                used[src.block / inst.instances].insert((src.odd, shift, sign));
            }
            if fold.factor > 1 && !taps.iter().all(|p| p.is_some() && *p == taps[0]) {
                mux_consumers += 1;
            }
        }
    }
    for (slot, cfmm) in slot_cfmms(layer, weights, fold)?.iter().enumerate() {
        let odd_of = |r: NodeRef| match r {
            NodeRef::Input => 1,
            NodeRef::Step(k) => cfmm.plan.steps[k].target,
        };
        let mut delays: HashSet<(u32, u32)> = cfmm
            .plan
            .steps
            .iter()
            .flat_map(|s| [s.a, s.b])
            .filter(|o| o.shift > 0)
            .map(|o| (odd_of(o.node), o.shift))
            .collect();
        delays.extend(used[slot].iter().filter(|t| t.1 > 0).map(|t| (t.0, t.1)));
        let steps = cfmm.plan.steps.len() as u64;
        let inverts = used[slot].iter().filter(|t| t.2 == Sign::Neg).count() as u64;
        let delay_flops: u64 = delays.iter().map(|d| d.1 as u64).sum();
        b.cfmm += Category {
            alms: steps * n_inst * dupes,
            flops: (steps + inverts + delay_flops) * n_inst * dupes,
        };
    }

    for t in &trees {
        let n = t.inputs.len() as u64;
        if n >= 2 {
            b.tree_stage0.alms += stage0_alms(n, rules.variant);
        }
        let levels = t.levels();
        if !t.stage0_groups.is_empty() {
            // The odd value out of a level passes through without an adder.
            let mut prev = levels[0].len();
            for maxes in levels.iter().skip(1) {
                for (k, &max) in maxes.iter().enumerate() {
                    if 2 * k + 1 < prev {
                        b.tree_upper.alms += (bits_for(max) as u64).div_ceil(2);
                    }
                }
                prev = maxes.len();
            }
            for l in t.register_levels() {
                b.registers.flops += levels[l].iter().map(|&m| bits_for(m) as u64).sum::<u64>();
            }
        }
        let width = (word_clocks + bits_for(n * t.phases() as u64)) as u64;
        b.sra += Category { alms: width.div_ceil(2), flops: width };
    }
    b.muxes.alms = mux_alms(mux_consumers, fold.factor);
    let (dsps, m20ks) = nk_resources(layer, inst.instances, rules);
    Ok(ResourceEstimate::from_breakdown(b, dsps, m20ks))
}

/// Target device capacities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    pub alm_capacity: u64,
    pub dsp_capacity: u64,
    pub m20k_capacity: u64,
    #[serde(default = "default_usable")]
    pub usable_fraction: f64,
}

fn default_usable() -> f64 {
    0.76
}

impl DeviceSpec {
    /// Stratix 10 GX 2800 class device.
    pub fn gx280() -> Self {
        DeviceSpec {
            name: "gx280".into(),
            alm_capacity: 933_120,
            dsp_capacity: 5_760,
            m20k_capacity: 11_721,
            usable_fraction: 0.76,
        }
    }

    /// GX 5500 class device: the GX280 capacities scaled by 1.985.
    pub fn gx550() -> Self {
        let g = Self::gx280();
        let s = |v: u64| (v as f64 * 1.985).round() as u64;
        DeviceSpec {
            name: "gx550".into(),
            alm_capacity: s(g.alm_capacity),
            dsp_capacity: s(g.dsp_capacity),
            m20k_capacity: s(g.m20k_capacity),
            usable_fraction: 0.76,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alm_capacity == 0 || self.dsp_capacity == 0 || self.m20k_capacity == 0 {
            return Err(Error::Config(format!("{}: capacities must be positive", self.name)));
        }
        if !(self.usable_fraction > 0.0 && self.usable_fraction <= 1.0) {
            return Err(Error::Config(format!("{}: usable_fraction must be in (0, 1]", self.name)));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let d: DeviceSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::util::read(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn usable_alms(&self) -> f64 {
        self.alm_capacity as f64 * self.usable_fraction
    }

    /// Whether `r` fits within the usable fraction of every capacity.
    pub fn fits(&self, r: &ResourceEstimate) -> bool {
        let u = self.usable_fraction;
        r.alms as f64 <= self.alm_capacity as f64 * u
            && r.dsps as f64 <= self.dsp_capacity as f64 * u
            && r.m20ks as f64 <= self.m20k_capacity as f64 * u
    }
}

/// Fold and instance choice for one layer or block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelChoice {
    pub fold: usize,
    pub instances: usize,
}

impl Default for KernelChoice {
    fn default() -> Self {
        KernelChoice { fold: 1, instances: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputConfig {
    #[serde(default = "default_word_clocks")]
    pub word_clocks: u32,
    /// Clock per layer class (`conv2` .. `conv5`), in Hz.
    #[serde(default = "default_frequencies")]
    pub frequency_hz: BTreeMap<String, f64>,
    /// Fold/instance choice per layer or block name.
    #[serde(default)]
    pub choices: BTreeMap<String, KernelChoice>,
}

fn default_word_clocks() -> u32 {
    CALIBRATED_WORD_CLOCKS
}

fn default_frequencies() -> BTreeMap<String, f64> {
    [("conv2", 353e6), ("conv3", 353e6), ("conv4", 353e6), ("conv5", 156e6)]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
}

impl Default for ThroughputConfig {
    fn default() -> Self {
        ThroughputConfig {
            word_clocks: default_word_clocks(),
            frequency_hz: default_frequencies(),
            choices: BTreeMap::new(),
        }
    }
}

/// `conv5_2.b` -> `conv5`.
pub fn layer_class(name: &str) -> &str {
    name.split(['_', '.']).next().unwrap_or(name)
}

impl ThroughputConfig {
    pub fn frequency(&self, name: &str) -> Result<f64> {
        let f = self
            .frequency_hz
            .get(layer_class(name))
            .copied()
            .ok_or_else(|| Error::Config(format!("no frequency for layer class of `{name}`")))?;
        if !(f > 0.0) {
            return Err(Error::Config(format!("frequency for `{name}` must be positive")));
        }
        Ok(f)
    }

    /// Choice for a layer: its own entry, else its block's, else unfolded.
    pub fn choice(&self, name: &str) -> KernelChoice {
        let block = name.split('.').next().unwrap_or(name);
        self.choices
            .get(name)
            .or_else(|| self.choices.get(block))
            .copied()
            .unwrap_or_default()
    }
}

/// `frequency * instances / (positions * fold * word_clocks)`.
pub fn images_per_second(frequency_hz: f64, instances: usize, fold: usize, positions: usize, word_clocks: u32) -> Result<f64> {
    let denom = positions as f64 * fold as f64 * word_clocks as f64;
    if denom == 0.0 || !(frequency_hz > 0.0) {
        return Err(Error::Config("throughput needs positive frequency, positions, fold and word clocks".into()));
    }
    Ok(frequency_hz * instances as f64 / denom)
}

pub fn layer_throughput(layer: &LayerSpec, cfg: &ThroughputConfig) -> Result<f64> {
    let c = cfg.choice(&layer.name);
    images_per_second(cfg.frequency(&layer.name)?, c.instances, c.fold, layer.out_positions(), cfg.word_clocks)
}

/// Dense operations per image of a block: two per MAC, zero weights
/// included.
pub fn block_ops(block: &BlockSpec) -> Result<f64> {
    Ok(2.0 * block_stats(block, None)?.mac_count as f64)
}

/// Effective tera-operations per second of `dupes` copies of a block.
pub fn effective_tops(block: &BlockSpec, im_per_s: f64, dupes: usize) -> Result<f64> {
    Ok(im_per_s * dupes as f64 * block_ops(block)? / 1e12)
}

pub fn mops_per_alm(tops: f64, device: &DeviceSpec) -> f64 {
    if device.alm_capacity == 0 {
        return 0.0;
    }
    tops * 1e6 / device.alm_capacity as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{assemble_kernel_with, FoldConfig};
    use crate::model::{generate_layer, resnet50_blocks};
    use proptest::prelude::*;

    #[test]
    fn mux_sizes() {
        // A 4:1 mux fills one 6-LUT; wider ones are trees of them.
        let per_consumer = |f| mux_alms(2, f) as f64 / 2.0;
        assert_eq!(mux_alms(10, 1), 0);
        assert_eq!(per_consumer(2), 0.5);
        assert_eq!(per_consumer(4), 1.0);
        assert_eq!(per_consumer(7), 2.0);
        assert_eq!(per_consumer(16), 5.0);
        assert_eq!(mux_alms(3, 2), 2);
    }

    fn graph(l: &LayerSpec, w: &QuantTensor, fold: usize, inst: usize, dupes: usize) -> KernelGraph {
        let opts = KernelOptions { cfmm_dupes: dupes, ..Default::default() };
        assemble_kernel_with(l, w, &FoldConfig::even(fold, l.in_channels).unwrap(), &InstanceConfig::new(inst, l.filter_h, l.filter_w), opts).unwrap()
    }

    #[test]
    fn stage0_rules() {
        assert_eq!(stage0_alms(12, CompressorVariant::Alm5Per12), 5);
        assert_eq!(stage0_alms(27, CompressorVariant::Alm10Per27), 10);
        assert_eq!(stage0_alms(6, CompressorVariant::Asymptotic), 3);
        assert_eq!(stage0_alms(1, CompressorVariant::Alm5Per12), 0);
    }

    #[test]
    fn full_odd_cfmm_costs_31_alms() {
        let l = LayerSpec::new("l", 1, 127, 1, 1, 1);
        let w = QuantTensor::new([127, 1, 1, 1], (-64..=63).filter(|&v| v != 0).map(|v| v as i8).collect()).unwrap();
        let e = estimate_kernel(&graph(&l, &w, 1, 1, 1));
        assert_eq!(e.breakdown.cfmm.alms, 31);
    }

    #[test]
    fn totals_are_breakdown_sums() {
        let l = LayerSpec::new("l", 8, 4, 3, 1, 5);
        let (w, _) = generate_layer(&l, 0.5, 3).unwrap();
        let e = estimate_kernel(&graph(&l, &w, 2, 2, 2));
        let p = e.breakdown.parts();
        assert_eq!(e.alms, p.iter().map(|c| c.alms).sum::<u64>());
        assert_eq!(e.flops, p.iter().map(|c| c.flops).sum::<u64>());
        assert!(e.breakdown.muxes.alms > 0);
    }

    #[test]
    fn throughput_examples() {
        let w = 10;
        let a = images_per_second(353e6, 8, 1, 3136, w).unwrap() / 9.0;
        assert_eq!(a.round(), 10_006.0);
        let b = images_per_second(156e6, 1, 4, 49, w).unwrap() / 9.0;
        assert_eq!(b.round(), 8_844.0);
        assert!(images_per_second(1e6, 1, 0, 10, 10).is_err());
        let sys = images_per_second(156e6, 1, 2, 49, CALIBRATED_WORD_CLOCKS).unwrap();
        assert_eq!(sys.round(), 53_061.0);
    }

    #[test]
    fn matching_identity_is_exact() {
        // 8 instances at 2f against fold 4 at f, positions 64:1.
        let f = 156e6;
        let x = images_per_second(2.0 * f, 8, 1, 3136, 30).unwrap();
        let y = images_per_second(f, 1, 4, 49, 30).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn tops_and_mops() {
        let blocks = resnet50_blocks();
        let c2 = blocks.iter().find(|b| b.name == "conv2_2").unwrap();
        let c5 = blocks.iter().find(|b| b.name == "conv5_2").unwrap();
        let t2 = effective_tops(c2, images_per_second(353e6, 8, 1, 3136, 30).unwrap(), 5).unwrap();
        let t5 = effective_tops(c5, images_per_second(156e6, 1, 4, 49, 30).unwrap(), 1).unwrap();
        assert!((t2 - 65.5).abs() < 0.1, "{t2}");
        assert!((t5 - 11.6).abs() < 0.1, "{t5}");
        let d = DeviceSpec::gx280();
        assert!((mops_per_alm(t2, &d) - 70.2).abs() < 0.1);
        assert!((mops_per_alm(t5, &d) - 12.4).abs() < 0.1);
        assert_eq!(mops_per_alm(0.0, &d), 0.0);
        assert_eq!(effective_tops(c2, 2.0, 3).unwrap(), 6.0 * effective_tops(c2, 1.0, 1).unwrap());
    }

    #[test]
    fn device_toml() {
        let d = DeviceSpec::from_toml("name = \"x\"\nalm_capacity = 10\ndsp_capacity = 1\nm20k_capacity = 1\n").unwrap();
        assert_eq!(d.usable_fraction, 0.76);
        assert!(DeviceSpec::from_toml("name = \"x\"\nalm_capacity = 0\ndsp_capacity = 1\nm20k_capacity = 1\n").is_err());
        assert!(DeviceSpec::from_toml("name = 3").is_err());
        assert_eq!(DeviceSpec::gx550().alm_capacity, 1_852_243);
    }

    #[test]
    fn class_and_choice_lookup() {
        let mut cfg = ThroughputConfig::default();
        assert_eq!(layer_class("conv5_2.b"), "conv5");
        assert_eq!(cfg.frequency("conv5_2.b").unwrap(), 156e6);
        assert!(cfg.frequency("fc").is_err());
        cfg.choices.insert("conv5_2".into(), KernelChoice { fold: 4, instances: 1 });
        assert_eq!(cfg.choice("conv5_2.b").fold, 4);
        assert_eq!(cfg.choice("conv5_3.b").fold, 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn structural_estimate_matches_graph(
            cin in 1usize..10, cout in 1usize..6, f in prop::sample::select(vec![1usize, 3]),
            fold in 1usize..5, inst in 1usize..5, dupes in 1usize..4, sparsity in 0.0f64..0.95, seed in any::<u64>(),
        ) {
            let l = LayerSpec::new("l", cin, cout, f, 1, 4);
            let (w, _) = generate_layer(&l, sparsity, seed).unwrap();
            let fold = fold.min(cin);
            let g = graph(&l, &w, fold, inst, dupes);
            let rules = CostRules::default();
            let s = estimate_layer(&l, &w, &g.meta.fold, &g.meta.instances, KernelOptions { cfmm_dupes: dupes, ..Default::default() }, &rules).unwrap();
            prop_assert_eq!(s, estimate_kernel_with(&g, &rules));
        }

        #[test]
        fn adding_taps_never_lowers_alms(cin in 1usize..8, seed in any::<u64>(), fold in 1usize..4) {
            let l = LayerSpec::new("l", cin, 4, 3, 1, 4);
            let (mut w, _) = generate_layer(&l, 0.8, seed).unwrap();
            let fold = fold.min(cin);
            let before = estimate_kernel(&graph(&l, &w, fold, 1, 1)).alms;
            if let Some(k) = w.weights.iter().position(|&v| v == 0) {
                w.weights[k] = 37;
            }
            prop_assert!(estimate_kernel(&graph(&l, &w, fold, 1, 1)).alms >= before);
        }
    }
}
