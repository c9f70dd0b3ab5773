//! Multichip partition planning.
//!
//! Residual blocks are placed whole. The block sequence is cut into
//! contiguous segments; segment `s` is built `k_s` times, one copy per chip,
//! and each copy carries `1/k_s` of the image stream. Every chip of a
//! segment talks to every chip of the next one, so the feature map at a cut
//! is spread over `k_s * k_{s+1}` links.
//!
//! Each block in a segment gets the fold/instance choice with the fewest
//! instances, then the fewest ALMs, that sustains `target / k_s` images per
//! second without exceeding the balance tolerance. A dynamic program over
//! the cut points then minimises the chip count (ties: fewer total ALMs).

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cost::{
    estimate_layer, images_per_second, CostRules, DeviceSpec, KernelChoice, ResourceEstimate, ThroughputConfig,
};
use crate::error::{Error, Result};
use crate::kernel::{FoldConfig, InstanceConfig, KernelOptions};
use crate::model::{BlockSpec, QuantModel};
use crate::tree::TreePolicy;
use crate::Provenance;

pub const PLAN_SCHEMA: &str = "bitforge-plan";
pub const PLAN_VERSION: u32 = 1;

/// Gbps needed to move a `channels x height x width` map at `im_per_s`.
pub fn link_bandwidth(shape: (usize, usize, usize), activation_bits: u32, im_per_s: f64) -> f64 {
    let (c, h, w) = shape;
    (c * h * w) as f64 * activation_bits as f64 * im_per_s / 1e9
}

pub fn speedup_ratio(per_chip: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::Config("baseline throughput must be positive".into()));
    }
    Ok(per_chip / baseline)
}

/// Per-chip throughput of a plan relative to a baseline.
pub fn speedup_report(plan: &PartitionPlan, baseline_im_s_per_chip: f64) -> Result<f64> {
    speedup_ratio(plan.per_chip_throughput, baseline_im_s_per_chip)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub throughput: ThroughputConfig,
    /// System images/s to sustain; by default the rate of a 49-position
    /// layer folded twice at the conv5 clock.
    pub target_im_s: Option<f64>,
    pub link_limit_gbps: f64,
    pub activation_bits: u32,
    pub max_copies: usize,
    pub folds: Vec<usize>,
    pub instances: Vec<usize>,
    pub cfmm_dupes: usize,
    /// Largest allowed ratio of a block's throughput to the target.
    pub imbalance_tolerance: f64,
    pub rules: CostRules,
    pub pipeline_every: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            throughput: ThroughputConfig::default(),
            target_im_s: None,
            link_limit_gbps: 75.0,
            activation_bits: 8,
            max_copies: 4,
            folds: vec![1, 2, 4, 8],
            instances: vec![1, 2, 4, 8, 16],
            cfmm_dupes: 1,
            imbalance_tolerance: 1.25,
            rules: CostRules::default(),
            pipeline_every: TreePolicy::default().pipeline_every,
        }
    }
}

impl PartitionConfig {
    pub fn target(&self) -> Result<f64> {
        match self.target_im_s {
            Some(t) if t > 0.0 => Ok(t),
            Some(_) => Err(Error::Config("target_im_s must be positive".into())),
            None => images_per_second(self.throughput.frequency("conv5")?, 1, 2, 49, self.throughput.word_clocks),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAssignment {
    pub block: String,
    pub fold: usize,
    pub instances: usize,
    pub cfmm_dupes: usize,
    /// Images/s of this copy of the block.
    pub throughput_im_s: f64,
    pub resources: ResourceEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChipAssignment {
    pub chip: usize,
    pub segment: usize,
    pub copy: usize,
    pub blocks: Vec<BlockAssignment>,
    pub resources: ResourceEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub from_chip: usize,
    pub to_chip: usize,
    pub gbps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub schema: String,
    pub version: u32,
    pub provenance: Provenance,
    pub device: DeviceSpec,
    pub config: PartitionConfig,
    pub target_im_s: f64,
    /// Copies of each segment, in pipeline order.
    pub copies: Vec<usize>,
    pub chips: Vec<ChipAssignment>,
    pub links: Vec<Link>,
    pub system_throughput: f64,
    pub per_chip_throughput: f64,
}

struct Planner<'m> {
    model: &'m QuantModel,
    device: &'m DeviceSpec,
    cfg: &'m PartitionConfig,
    target: f64,
    costs: HashMap<(usize, usize, usize), ResourceEstimate>,
    choices: HashMap<(usize, usize), Option<BlockAssignment>>,
}

impl Planner<'_> {
    fn block_rate(&self, b: &BlockSpec, fold: usize, instances: usize) -> Result<f64> {
        let mut rate = f64::INFINITY;
        for l in b.all_layers() {
            let f = self.cfg.throughput.frequency(&l.name)?;
            let r = images_per_second(f, instances, fold.min(l.in_channels), l.out_positions(), self.cfg.throughput.word_clocks)?;
            rate = rate.min(r);
        }
        Ok(rate)
    }

    fn cost(&mut self, idx: usize, fold: usize, instances: usize) -> Result<ResourceEstimate> {
        if let Some(c) = self.costs.get(&(idx, fold, instances)) {
            return Ok(*c);
        }
        let b = &self.model.blocks[idx];
        let opts = KernelOptions {
            cfmm_dupes: self.cfg.cfmm_dupes,
            policy: TreePolicy {
                pipeline_every: self.cfg.pipeline_every,
            },
            seed: 0,
        };
        let mut total = ResourceEstimate::default();
        for (l, t, _) in self.model.block_layers(b)? {
            let f = FoldConfig::even(fold.min(l.in_channels), l.in_channels)?;
            let inst = InstanceConfig::new(instances, l.filter_h, l.filter_w);
            total = total + estimate_layer(l, t, &f, &inst, opts, &self.cfg.rules)?;
        }
        self.costs.insert((idx, fold, instances), total);
        Ok(total)
    }

    /// Cheapest admissible configuration of a block built `copies` times.
    fn choose(&mut self, idx: usize, copies: usize) -> Result<Option<BlockAssignment>> {
        if let Some(c) = self.choices.get(&(idx, copies)) {
            return Ok(c.clone());
        }
        let need = self.target / copies as f64;
        let cap = self.target * self.cfg.imbalance_tolerance / copies as f64;
        let b = self.model.blocks[idx].clone();
        let mut best: Option<BlockAssignment> = None;
        // Slowest configuration above the cap, for blocks too small to land
        // inside the band at all.
        let mut over: Option<(f64, usize, usize)> = None;
        for &instances in &self.cfg.instances {
            for &fold in &self.cfg.folds {
                let rate = self.block_rate(&b, fold, instances)?;
                if rate < need * (1.0 - 1e-9) {
                    continue;
                }
                if rate > cap * (1.0 + 1e-9) {
                    if over.is_none_or(|(r, _, _)| rate < r) {
                        over = Some((rate, fold, instances));
                    }
                    continue;
                }
                let r = self.cost(idx, fold, instances)?;
                if best.as_ref().is_none_or(|x| r.alms < x.resources.alms) {
                    best = Some(self.assignment(&b, fold, instances, rate, r));
                }
            }
            if best.is_some() {
                break;
            }
        }
        if best.is_none() {
            if let Some((rate, fold, instances)) = over {
                let r = self.cost(idx, fold, instances)?;
                best = Some(self.assignment(&b, fold, instances, rate, r));
            }
        }
        self.choices.insert((idx, copies), best.clone());
        Ok(best)
    }

    fn assignment(&self, b: &BlockSpec, fold: usize, instances: usize, rate: f64, resources: ResourceEstimate) -> BlockAssignment {
        BlockAssignment {
            block: b.name.clone(),
            fold,
            instances,
            cfmm_dupes: self.cfg.cfmm_dupes,
            throughput_im_s: rate,
            resources,
        }
    }

    fn infeasible(&mut self, idx: usize) -> Result<Error> {
        let max_fold = self.cfg.folds.iter().copied().max().unwrap_or(1);
        let mut min_fold = None;
        for &f in &self.cfg.folds {
            if self.device.fits(&self.cost(idx, f, 1)?) {
                min_fold = Some(f as u32);
                break;
            }
        }
        Ok(Error::Infeasible {
            block: self.model.blocks[idx].name.clone(),
            max_fold: max_fold as u32,
            min_feasible_fold: min_fold,
        })
    }
}

#[derive(Clone, Copy, PartialEq)]
struct State {
    chips: usize,
    alms: u64,
    prev: usize,
    prev_copies: usize,
}

/// Plans the model's blocks onto identical devices.
pub fn plan_partition(model: &QuantModel, device: &DeviceSpec, cfg: &PartitionConfig) -> Result<PartitionPlan> {
    device.validate()?;
    model.validate()?;
    if model.blocks.is_empty() {
        return Err(Error::Config("model has no blocks".into()));
    }
    let mut folds = cfg.folds.clone();
    folds.sort_unstable();
    let mut instances = cfg.instances.clone();
    instances.sort_unstable();
    if folds.first().is_none_or(|&f| f == 0) || instances.first().is_none_or(|&i| i == 0) || cfg.max_copies == 0 {
        return Err(Error::Config("fold, instance and copy options must be positive".into()));
    }
    let cfg = &PartitionConfig {
        folds,
        instances,
        ..cfg.clone()
    };
    let target = cfg.target()?;
    let mut p = Planner {
        model,
        device,
        cfg,
        target,
        costs: HashMap::new(),
        choices: HashMap::new(),
    };
    let n = model.blocks.len();
    let kmax = cfg.max_copies;
    // best[j][k]: blocks 0..j placed, last segment built k times.
    let mut best: Vec<Vec<Option<State>>> = vec![vec![None; kmax + 1]; n + 1];
    best[0][1] = Some(State {
        chips: 0,
        alms: 0,
        prev: 0,
        prev_copies: 0,
    });
    let mut any_fit = vec![false; n];
    for j in 1..=n {
        for i in (0..j).rev() {
            for k in 1..=kmax {
                let mut total = ResourceEstimate::default();
                let mut ok = true;
                for idx in i..j {
                    match p.choose(idx, k)? {
                        Some(a) => total = total + a.resources,
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                if !ok || !device.fits(&total) {
                    continue;
                }
                if j == i + 1 {
                    any_fit[i] = true;
                }
                for pk in 1..=kmax {
                    let Some(prev) = best[i][pk] else { continue };
                    if i > 0 {
                        let map = model.blocks[i - 1].output_shape();
                        let per_link = link_bandwidth(map, cfg.activation_bits, target) / (pk * k) as f64;
                        if per_link > cfg.link_limit_gbps {
                            continue;
                        }
                    }
                    let cand = State {
                        chips: prev.chips + k,
                        alms: prev.alms + total.alms * k as u64,
                        prev: i,
                        prev_copies: pk,
                    };
                    let slot = &mut best[j][k];
                    if slot.is_none_or(|s| (cand.chips, cand.alms) < (s.chips, s.alms)) {
                        *slot = Some(cand);
                    }
                }
            }
        }
    }
    if let Some(idx) = any_fit.iter().position(|f| !f) {
        return Err(p.infeasible(idx)?);
    }
    let (mut k, end) = (1..=kmax)
        .filter_map(|k| best[n][k].map(|s| (k, s)))
        .min_by_key(|(_, s)| (s.chips, s.alms))
        .ok_or_else(|| Error::InvalidPlan("no segmentation meets the link limit".into()))?;
    let mut segments = Vec::new();
    let (mut j, mut state) = (n, end);
    while j > 0 {
        segments.push((state.prev, j, k));
        j = state.prev;
        k = state.prev_copies;
        state = best[j][k].expect("back pointer");
    }
    segments.reverse();

    let mut chips = Vec::new();
    let mut copies = Vec::new();
    for (s, &(i, j, k)) in segments.iter().enumerate() {
        copies.push(k);
        let blocks: Vec<BlockAssignment> = (i..j).map(|idx| p.choose(idx, k).map(|a| a.expect("feasible"))).collect::<Result<_>>()?;
        let resources = blocks.iter().map(|b| b.resources).sum();
        for copy in 0..k {
            chips.push(ChipAssignment {
                chip: chips.len(),
                segment: s,
                copy,
                blocks: blocks.clone(),
                resources,
            });
        }
    }
    let links = plan_links(model, &segments, &chips, cfg.activation_bits, target);
    let system = segments
        .iter()
        .flat_map(|&(i, j, k)| (i..j).map(move |idx| (idx, k)))
        .map(|(idx, k)| p.choices[&(idx, k)].as_ref().expect("chosen").throughput_im_s * k as f64)
        .fold(f64::INFINITY, f64::min);
    let plan = PartitionPlan {
        schema: PLAN_SCHEMA.into(),
        version: PLAN_VERSION,
        provenance: Provenance::new(model.provenance.as_ref().map_or(0, |p| p.seed), &(device, cfg)),
        device: device.clone(),
        config: cfg.clone(),
        target_im_s: target,
        copies,
        per_chip_throughput: system / chips.len() as f64,
        system_throughput: system,
        chips,
        links,
    };
    validate_plan(&plan, &model.blocks)?;
    Ok(plan)
}

fn plan_links(model: &QuantModel, segments: &[(usize, usize, usize)], chips: &[ChipAssignment], bits: u32, im_s: f64) -> Vec<Link> {
    let mut links = Vec::new();
    for (s, w) in segments.windows(2).enumerate() {
        let (_, cut, k) = w[0];
        let k_next = w[1].2;
        let gbps = link_bandwidth(model.blocks[cut - 1].output_shape(), bits, im_s) / (k * k_next) as f64;
        for a in chips.iter().filter(|c| c.segment == s) {
            for b in chips.iter().filter(|c| c.segment == s + 1) {
                links.push(Link {
                    from_chip: a.chip,
                    to_chip: b.chip,
                    gbps,
                });
            }
        }
    }
    links
}

/// Independent check of every plan invariant against the block table.
pub fn validate_plan(plan: &PartitionPlan, blocks: &[BlockSpec]) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidPlan(m));
    if plan.schema != PLAN_SCHEMA || plan.version != PLAN_VERSION {
        return bad(format!("unsupported schema {} v{}", plan.schema, plan.version));
    }
    plan.device.validate()?;
    let cfg = &plan.config;
    let segs = plan.copies.len();
    if plan.chips.len() != plan.copies.iter().sum::<usize>() {
        return bad("chip count differs from the sum of segment copies".into());
    }
    // Blocks of every segment, from its first copy; every copy must match.
    let mut order: Vec<&str> = Vec::new();
    let mut seg_blocks: Vec<Option<&ChipAssignment>> = vec![None; segs];
    for (n, chip) in plan.chips.iter().enumerate() {
        if chip.chip != n || chip.segment >= segs {
            return bad(format!("chip {n} is mislabelled"));
        }
        match seg_blocks[chip.segment] {
            None => {
                seg_blocks[chip.segment] = Some(chip);
                order.extend(chip.blocks.iter().map(|b| b.block.as_str()));
            }
            Some(first) if first.blocks != chip.blocks => {
                return bad(format!("copies of segment {} differ", chip.segment));
            }
            Some(_) => {}
        }
        let sum: ResourceEstimate = chip.blocks.iter().map(|b| b.resources).sum();
        if sum != chip.resources {
            return bad(format!("chip {n} resources are not the sum of its blocks"));
        }
        if !plan.device.fits(&chip.resources) {
            return bad(format!("chip {n} exceeds the usable device capacity"));
        }
    }
    let expected: Vec<&str> = blocks.iter().map(|b| b.name.as_str()).collect();
    if order != expected {
        return bad("blocks are not each assigned exactly once, in pipeline order".into());
    }
    if plan.chips.iter().enumerate().any(|(n, c)| n > 0 && c.segment < plan.chips[n - 1].segment) {
        return bad("chips are not in segment order".into());
    }

    let by_name: HashMap<&str, &BlockSpec> = blocks.iter().map(|b| (b.name.as_str(), b)).collect();
    let block_rate = |b: &BlockSpec, fold: usize, instances: usize| -> Result<f64> {
        let mut rate = f64::INFINITY;
        for l in b.all_layers() {
            let f = cfg.throughput.frequency(&l.name)?;
            let r = images_per_second(f, instances, fold.min(l.in_channels), l.out_positions(), cfg.throughput.word_clocks)?;
            rate = rate.min(r);
        }
        Ok(rate)
    };
    let mut rates = Vec::new();
    // Blocks already at their slowest configuration may run ahead of the
    // rest without counting as imbalance.
    let mut bounded = Vec::new();
    for chip in plan.chips.iter().filter(|c| c.copy == 0) {
        let k = plan.copies[chip.segment] as f64;
        for a in &chip.blocks {
            let b = by_name[a.block.as_str()];
            let rate = block_rate(b, a.fold, a.instances)?;
            if (rate - a.throughput_im_s).abs() > 1e-6 * rate {
                return bad(format!("{}: recorded throughput does not match its configuration", a.block));
            }
            let mut slowest = f64::INFINITY;
            for &i in &cfg.instances {
                for &f in &cfg.folds {
                    slowest = slowest.min(block_rate(b, f, i)?);
                }
            }
            rates.push(rate * k);
            if rate > slowest * (1.0 + 1e-9) {
                bounded.push(rate * k);
            }
        }
    }
    let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let max = bounded.iter().copied().fold(min, f64::max);
    if max > min * cfg.imbalance_tolerance * (1.0 + 1e-9) {
        return bad(format!("throughput imbalance {:.3} exceeds {}", max / min, cfg.imbalance_tolerance));
    }
    if (plan.system_throughput - min).abs() > 1e-6 * min {
        return bad("system throughput is not the slowest block rate".into());
    }
    if (plan.per_chip_throughput * plan.chips.len() as f64 - min).abs() > 1e-6 * min {
        return bad("per-chip throughput inconsistent".into());
    }

    let mut expected_links = 0;
    for s in 1..segs {
        let last = seg_blocks[s - 1].and_then(|c| c.blocks.last()).expect("segment has blocks");
        let need = link_bandwidth(by_name[last.block.as_str()].output_shape(), cfg.activation_bits, plan.system_throughput)
            / (plan.copies[s - 1] * plan.copies[s]) as f64;
        for l in &plan.links {
            let (Some(a), Some(b)) = (plan.chips.get(l.from_chip), plan.chips.get(l.to_chip)) else {
                return bad("link references a missing chip".into());
            };
            if a.segment + 1 == s && b.segment == s && l.gbps + 1e-9 < need {
                return bad(format!("link {} -> {} understates its bandwidth", l.from_chip, l.to_chip));
            }
        }
        expected_links += plan.copies[s - 1] * plan.copies[s];
    }
    if plan.links.len() != expected_links {
        return bad("segments are not fully connected".into());
    }
    if let Some(l) = plan.links.iter().find(|l| l.gbps > cfg.link_limit_gbps) {
        return bad(format!("link {} -> {} needs {:.1} Gbps", l.from_chip, l.to_chip, l.gbps));
    }
    Ok(())
}

pub fn plan_to_json(plan: &PartitionPlan) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(plan)?;
    v.push(b'\n');
    Ok(v)
}

pub fn plan_from_json(bytes: &[u8]) -> Result<PartitionPlan> {
    let plan: PartitionPlan = serde_json::from_slice(bytes).map_err(|e| Error::InvalidPlan(e.to_string()))?;
    if plan.schema != PLAN_SCHEMA || plan.version != PLAN_VERSION {
        return Err(Error::InvalidPlan(format!("unsupported schema {} v{}", plan.schema, plan.version)));
    }
    Ok(plan)
}

/// Per-chip throughput of the best known GPU-class baseline (1544 im/s)
/// scaled by a 5x sparsity efficiency.
pub const BASELINE_IM_S_PER_CHIP: f64 = 1544.0 * 5.0;

/// Human-readable summary of a plan.
pub fn render_report(plan: &PartitionPlan) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "device            {}", plan.device.name);
    let _ = writeln!(s, "chips             {}", plan.chips.len());
    let _ = writeln!(s, "segment copies    {:?}", plan.copies);
    let _ = writeln!(s, "system im/s       {:.0}", plan.system_throughput);
    let _ = writeln!(s, "im/s per chip     {:.0}", plan.per_chip_throughput);
    if let Ok(r) = speedup_report(plan, BASELINE_IM_S_PER_CHIP) {
        let _ = writeln!(s, "speedup vs {:.0}  {:.3}x", BASELINE_IM_S_PER_CHIP, r);
    }
    let max_link = plan.links.iter().map(|l| l.gbps).fold(0.0, f64::max);
    let _ = writeln!(s, "max link Gbps     {max_link:.1}");
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<5} {:<4} {:>9} {:>6} {:>6}  blocks (fold x instances)", "chip", "seg", "ALM(k)", "util%", "DSP");
    for c in &plan.chips {
        let util = 100.0 * c.resources.alms as f64 / plan.device.alm_capacity as f64;
        let blocks: Vec<String> = c.blocks.iter().map(|b| format!("{} ({}x{})", b.block, b.fold, b.instances)).collect();
        let _ = writeln!(
            s,
            "{:<5} {:<4} {:>9.1} {:>6.1} {:>6}  {}",
            c.chip,
            c.segment,
            c.resources.alms as f64 / 1e3,
            util,
            c.resources.dsps,
            blocks.join(", ")
        );
    }
    s
}

/// Marker type so callers can name a block's chosen kernel shape.
pub fn choice_of(a: &BlockAssignment) -> KernelChoice {
    KernelChoice {
        fold: a.fold,
        instances: a.instances,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_model, LayerSpec};

    #[test]
    fn link_examples() {
        assert!((link_bandwidth((256, 56, 56), 8, 10_006.0) / 64.2 - 1.0).abs() < 0.01);
        assert!((link_bandwidth((2048, 7, 7), 8, 8_843.0) - 7.1).abs() < 0.05);
        assert_eq!(link_bandwidth((2048, 7, 7), 8, 0.0), 0.0);
    }

    #[test]
    fn speedup_examples() {
        assert!((speedup_ratio(10_612.0, BASELINE_IM_S_PER_CHIP).unwrap() - 1.374).abs() < 1e-3);
        assert_eq!(BASELINE_IM_S_PER_CHIP, 7_720.0);
        assert_eq!(speedup_ratio(5.0, 5.0).unwrap(), 1.0);
        assert!(speedup_ratio(1.0, 0.0).is_err());
    }

    fn tiny_model() -> QuantModel {
        let b = |name: &str| BlockSpec {
            name: name.into(),
            layers: vec![
                LayerSpec::new(format!("{name}.a"), 8, 4, 1, 1, 7),
                LayerSpec::new(format!("{name}.b"), 4, 4, 3, 1, 7),
                LayerSpec::new(format!("{name}.c"), 4, 8, 1, 1, 7),
            ],
            shortcut: None,
        };
        generate_model(&[b("conv5_1"), b("conv5_2")], 0.8, 2).unwrap()
    }

    fn huge() -> DeviceSpec {
        DeviceSpec {
            name: "huge".into(),
            alm_capacity: 1 << 40,
            dsp_capacity: 1 << 20,
            m20k_capacity: 1 << 20,
            usable_fraction: 0.76,
        }
    }

    #[test]
    fn tiny_model_on_huge_device() {
        let m = tiny_model();
        let plan = plan_partition(&m, &huge(), &PartitionConfig::default()).unwrap();
        assert_eq!(plan.chips.len(), 1);
        assert!(plan.links.is_empty());
        assert!(plan.system_throughput >= plan.target_im_s * (1.0 - 1e-9));
        let back = plan_from_json(&plan_to_json(&plan).unwrap()).unwrap();
        assert_eq!(back, plan);
        validate_plan(&back, &m.blocks).unwrap();
    }

    #[test]
    fn fast_blocks_do_not_buy_copies() {
        // 6x6 maps finish faster than the target even fully folded.
        let b = |name: &str| BlockSpec {
            name: name.into(),
            layers: vec![LayerSpec::new(format!("{name}.b"), 4, 4, 3, 1, 6)],
            shortcut: None,
        };
        let m = generate_model(&[b("conv5_1"), b("conv5_2")], 0.8, 2).unwrap();
        let cfg = PartitionConfig::default();
        let plan = plan_partition(&m, &huge(), &cfg).unwrap();
        assert_eq!(plan.copies, vec![1]);
        assert!(plan.system_throughput > cfg.target().unwrap() * cfg.imbalance_tolerance);
        validate_plan(&plan, &m.blocks).unwrap();
    }

    #[test]
    fn small_device_splits_and_links() {
        let m = tiny_model();
        let one = plan_partition(&m, &huge(), &PartitionConfig::default()).unwrap();
        let mut dev = huge();
        dev.alm_capacity = (one.chips[0].resources.alms as f64 / 0.76 * 0.6) as u64;
        let plan = plan_partition(&m, &dev, &PartitionConfig::default()).unwrap();
        assert_eq!(plan.chips.len(), 2);
        assert_eq!(plan.links.len(), 1);
        validate_plan(&plan, &m.blocks).unwrap();
    }

    #[test]
    fn infeasible_reports_block() {
        let m = tiny_model();
        let mut dev = huge();
        dev.alm_capacity = 10;
        match plan_partition(&m, &dev, &PartitionConfig::default()) {
            Err(Error::Infeasible { block, .. }) => assert_eq!(block, "conv5_1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validator_rejects_mutations() {
        let m = tiny_model();
        let mut dev = huge();
        let one = plan_partition(&m, &dev, &PartitionConfig::default()).unwrap();
        dev.alm_capacity = (one.chips[0].resources.alms as f64 / 0.76 * 0.6) as u64;
        let plan = plan_partition(&m, &dev, &PartitionConfig::default()).unwrap();
        let check = |f: &dyn Fn(&mut PartitionPlan)| {
            let mut p = plan.clone();
            f(&mut p);
            assert!(validate_plan(&p, &m.blocks).is_err());
        };
        check(&|p| p.chips[1].blocks.clear());
        check(&|p| p.chips[0].resources.alms += 1);
        check(&|p| p.device.alm_capacity /= 4);
        check(&|p| p.links[0].gbps = 1e6);
        check(&|p| p.links[0].gbps = 0.0);
        check(&|p| p.links.clear());
        check(&|p| p.chips[0].blocks[0].fold *= 2);
        check(&|p| p.system_throughput *= 2.0);
        check(&|p| p.chips.swap(0, 1));
        check(&|p| p.schema = "other".into());
    }
}
