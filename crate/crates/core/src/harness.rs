//! Acceptance suite: small exhaustive oracles, randomized simulation
//! campaigns and the published-figure anchors, with tolerance bookkeeping.
//!
//! Failures are recorded in the report, never returned as errors, so a
//! single run always yields one line per criterion.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfmm::{plan_mcm, required_odds, AddSub, McmPlan, NodeRef, Sign};
use crate::cost::{effective_tops, estimate_layer, images_per_second, mops_per_alm, CostRules, DeviceSpec, ResourceEstimate};
use crate::error::{Error, Result};
use crate::kernel::{assemble_kernel, build_multi_instance, extract_weights, fold_kernel, FoldConfig, InstanceConfig, KernelOptions};
use crate::model::{block_stats, generate_layer, generate_model, resnet50_blocks, BlockSpec, LayerSpec, QuantModel};
use crate::partition::{link_bandwidth, plan_partition, speedup_ratio, PartitionConfig, PartitionPlan, BASELINE_IM_S_PER_CHIP};
use crate::reference::{accumulate_steps, conv_ref, conv_step_ref, residual_block_ref, ActivationMap};
use crate::sim::{simulate_block, simulate_layer, BlockSimConfig, SimMode};
use crate::tree::{apply_correction, build_tree, compress6_3, encode_negative, reduce12, word_bits, Tap, TapSource, TreeInput, TreePolicy};
use crate::Provenance;

pub const REPORT_SCHEMA: &str = "bitforge-acceptance";
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceptanceConfig {
    pub seed: u64,
    pub sparsity: f64,
    /// Seeds in the bit-true simulation campaign.
    pub sim_seeds: usize,
    /// Random tap sets in the one's-complement check.
    pub tap_sets: usize,
    pub word_clocks: u32,
    pub link_limit_gbps: f64,
    pub gx280: DeviceSpec,
    pub gx550: DeviceSpec,
}

impl Default for AcceptanceConfig {
    fn default() -> Self {
        AcceptanceConfig {
            seed: 1,
            sparsity: 0.8,
            sim_seeds: 100,
            tap_sets: 1000,
            word_clocks: crate::cost::CALIBRATED_WORD_CLOCKS,
            link_limit_gbps: 75.0,
            gx280: DeviceSpec::gx280(),
            gx550: DeviceSpec::gx550(),
        }
    }
}

impl AcceptanceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: AcceptanceConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::InvalidSparsity(self.sparsity));
        }
        if self.word_clocks == 0 {
            return Err(Error::Config("word_clocks must be positive".into()));
        }
        if !(self.link_limit_gbps > 0.0) {
            return Err(Error::Config("link_limit_gbps must be positive".into()));
        }
        self.gx280.validate()?;
        self.gx550.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub expected: String,
    pub computed: String,
    pub tolerance: String,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub title: String,
    pub checks: Vec<Check>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub schema: String,
    pub version: u32,
    pub provenance: Provenance,
    pub criteria: Vec<CriterionResult>,
    pub pass: bool,
}

impl AcceptanceReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    /// One `PASS`/`FAIL` line per criterion.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.criteria {
            let _ = writeln!(s, "criterion {:>2} {}  {}", c.id, if c.pass { "PASS" } else { "FAIL" }, c.title);
        }
        s
    }

    /// Summary followed by every check.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.criteria {
            let _ = writeln!(s, "criterion {:>2} {}  {}", c.id, if c.pass { "PASS" } else { "FAIL" }, c.title);
            for k in &c.checks {
                let _ = writeln!(
                    s,
                    "    [{}] {}: computed {} (expected {}, tolerance {})",
                    if k.pass { "ok" } else { "xx" },
                    k.name,
                    k.computed,
                    k.expected,
                    k.tolerance
                );
            }
        }
        s
    }
}

#[derive(Default)]
struct Checks(Vec<Check>);

impl Checks {
    fn push(&mut self, name: impl Into<String>, expected: impl Into<String>, computed: impl Into<String>, tolerance: impl Into<String>, pass: bool) {
        self.0.push(Check {
            name: name.into(),
            expected: expected.into(),
            computed: computed.into(),
            tolerance: tolerance.into(),
            pass,
        });
    }

    fn exact<T: PartialEq + std::fmt::Display>(&mut self, name: &str, expected: T, computed: T) {
        let pass = expected == computed;
        self.push(name, expected.to_string(), computed.to_string(), "exact", pass);
    }

    fn rel(&mut self, name: &str, expected: f64, computed: f64, tol: f64) {
        let pass = ((computed - expected) / expected).abs() <= tol;
        self.push(name, fmt(expected), fmt(computed), format!("±{}%", tol * 100.0), pass);
    }

    fn abs(&mut self, name: &str, expected: f64, computed: f64, tol: f64) {
        let pass = (computed - expected).abs() <= tol;
        self.push(name, fmt(expected), fmt(computed), format!("±{tol}"), pass);
    }

    fn error(&mut self, name: &str, e: &Error) {
        self.push(name, "-", format!("error: {e}"), "-", false);
    }

    fn budget(&mut self, name: &str, elapsed: Duration, limit: Duration) {
        let pass = elapsed <= limit;
        self.push(name, format!("<= {}s", limit.as_secs()), if pass { "within budget" } else { "over budget" }, "-", pass);
    }
}

fn fmt(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn criterion(id: u32, title: &str, checks: Checks) -> CriterionResult {
    let pass = !checks.0.is_empty() && checks.0.iter().all(|c| c.pass);
    CriterionResult {
        id,
        title: title.into(),
        checks: checks.0,
        pass,
    }
}

/// Runs every criterion. Deterministic for a given config.
pub fn run_acceptance(cfg: &AcceptanceConfig) -> AcceptanceReport {
    let first = run_criteria(cfg);
    let second = run_criteria(cfg);
    let mut c = Checks::default();
    match (serde_json::to_vec(&first), serde_json::to_vec(&second)) {
        (Ok(a), Ok(b)) => c.push(
            "criteria 1-9 rerun byte-identical",
            "identical",
            if a == b { "identical" } else { "differs" },
            "exact",
            a == b,
        ),
        (Err(e), _) | (_, Err(e)) => c.error("serialize", &e.into()),
    }
    let mut criteria = first;
    criteria.push(criterion(10, "determinism", c));
    let pass = criteria.iter().all(|c| c.pass);
    AcceptanceReport {
        schema: REPORT_SCHEMA.into(),
        version: REPORT_VERSION,
        provenance: Provenance::new(cfg.seed, cfg),
        criteria,
        pass,
    }
}

fn run_criteria(cfg: &AcceptanceConfig) -> Vec<CriterionResult> {
    let model = generate_model(&resnet50_blocks(), cfg.sparsity, cfg.seed);
    vec![
        criterion(1, "per-block parameter and MAC counts", table_counts()),
        criterion(2, "unique INT7 products and MCM step count", unique_products()),
        criterion(3, "compressor exactness", compressors()),
        criterion(4, "one's-complement negative taps", ones_complement(cfg)),
        criterion(5, "bit-true kernel equivalence", bit_true_campaign(cfg)),
        criterion(6, "fold and instance equivalences", fold_instance(cfg)),
        criterion(7, "throughput and TOPs anchors", throughput_anchors(cfg)),
        criterion(8, "resource estimate sanity", cost_sanity(cfg, model.as_ref())),
        criterion(9, "multichip partition anchors", partition_anchors(cfg, model.as_ref())),
    ]
}

fn table_counts() -> Checks {
    let start = Instant::now();
    let mut c = Checks::default();
    let blocks = resnet50_blocks();
    let rows = [("conv2_2", 69_632u64, 69u64, 3136u64), ("conv3_2", 0, 279, 784), ("conv4_2", 0, 1114, 196), ("conv5_2", 4_456_448, 4456, 49)];
    for (name, exact_params, k_params, ratio) in rows {
        let Some(b) = blocks.iter().find(|b| b.name == name) else {
            c.push(name, "-", "missing block", "-", false);
            continue;
        };
        match block_stats(b, None) {
            Ok(s) => {
                if exact_params > 0 {
                    c.exact(&format!("{name} params"), exact_params, s.param_count);
                }
                // The table mixes truncation (69.6k -> 69) and rounding
                // (278.5k -> 279).
                let (floor, nearest) = (s.param_count / 1000, (s.param_count + 500) / 1000);
                c.push(
                    format!("{name} params (k)"),
                    k_params.to_string(),
                    format!("{:.1}", s.param_count as f64 / 1e3),
                    "k-rounding (floor or nearest)",
                    k_params == floor || k_params == nearest,
                );
                c.rel(&format!("{name} dense MACs (M)"), 218.4, s.mac_count as f64 / 1e6, 0.005);
                c.exact(&format!("{name} MAC/param"), ratio, s.macs_per_param);
            }
            Err(e) => c.error(name, &e),
        }
    }
    c.budget("runtime", start.elapsed(), Duration::from_secs(1));
    c
}

/// Node values of a plan for input 1, computed step by step without the
/// plan's own evaluator.
fn mcm_values(plan: &McmPlan) -> Option<Vec<i64>> {
    let mut vals: Vec<i64> = Vec::new();
    for s in &plan.steps {
        let get = |r: NodeRef| match r {
            NodeRef::Input => Some(1i64),
            NodeRef::Step(k) => vals.get(k).copied(),
        };
        let a = get(s.a.node)? << s.a.shift;
        let b = get(s.b.node)? << s.b.shift;
        vals.push(match s.op {
            AddSub::Add => a + b,
            AddSub::Sub => a - b,
        });
    }
    Some(vals)
}

fn unique_products() -> Checks {
    let mut c = Checks::default();
    let all: Vec<i32> = (-64..=63).filter(|&w| w != 0).collect();
    c.exact("nonzero INT7 values", 127, all.len());
    // Oracle: strip the sign and every factor of two, drop 1.
    let oracle: BTreeSet<u32> = all
        .iter()
        .map(|w| {
            let m = w.unsigned_abs();
            m >> m.trailing_zeros()
        })
        .filter(|&o| o != 1)
        .collect();
    match required_odds(all.iter().copied()) {
        Ok(odds) => {
            c.exact("required odd products", 31, odds.len());
            c.exact("matches odd-part oracle", true, odds == oracle);
            match plan_mcm(&odds) {
                Ok(plan) => {
                    c.exact("add/sub steps", 31, plan.steps.len());
                    let ok = mcm_values(&plan).is_some_and(|v| {
                        plan.steps.iter().zip(&v).all(|(s, &x)| x == s.target as i64)
                            && odds.iter().all(|o| v.contains(&(*o as i64)))
                    });
                    c.exact("every step yields its target, all odds covered", true, ok);
                }
                Err(e) => c.error("plan", &e),
            }
        }
        Err(e) => c.error("required odds", &e),
    }
    c
}

fn compressors() -> Checks {
    let mut c = Checks::default();
    let six = (0u32..64)
        .filter(|&m| {
            let bits = std::array::from_fn(|k| m >> k & 1 == 1);
            compress6_3(bits) as u32 != m.count_ones()
        })
        .count();
    c.exact("6:3 mismatches over 64 inputs", 0, six);
    let twelve = (0u32..4096)
        .filter(|&m| {
            let bits = std::array::from_fn(|k| m >> k & 1 == 1);
            reduce12(bits) as u32 != m.count_ones()
        })
        .count();
    c.exact("12-input mismatches over 4096 inputs", 0, twelve);
    c
}

fn ones_complement(cfg: &AcceptanceConfig) -> Checks {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0c0c);
    let mut word_fail = 0;
    let mut tree_fail = 0;
    for _ in 0..cfg.tap_sets {
        let n = rng.gen_range(1..=40);
        let taps: Vec<(Tap, u64)> = (0..n)
            .map(|k| {
                let tap = Tap {
                    source: TapSource {
                        block: k,
                        odd: 2 * rng.gen_range(0..32) + 1,
                    },
                    shift: rng.gen_range(0..7),
                    sign: if rng.gen_bool(0.5) { Sign::Neg } else { Sign::Pos },
                    filter_pos: (0, 0),
                };
                (tap, rng.gen_range(0..=255u64))
            })
            .collect();
        let signed: i64 = taps.iter().map(|(t, x)| t.sign.apply((t.magnitude() * x) as i64)).sum();
        let max_tap = taps.iter().map(|(t, _)| t.magnitude()).max().unwrap_or(1);
        let width = word_bits(max_tap, n as u64) + rng.gen_range(0..4);
        let modulus = 1u128 << width;
        let neg = taps.iter().filter(|(t, _)| t.sign == Sign::Neg).count() as u64;
        let raw = taps.iter().fold(0u128, |acc, (t, x)| {
            let v = t.magnitude() * x;
            let word = if t.sign == Sign::Neg { encode_negative(v, width) } else { v };
            (acc + word as u128) % modulus
        });
        if apply_correction(raw, neg, width) != signed {
            word_fail += 1;
        }
        let inputs = taps.iter().map(|(t, _)| TreeInput::direct(*t)).collect();
        let ok = build_tree(0, inputs, TreePolicy::default())
            .and_then(|tree| tree.evaluate(|_, t| t.source.odd as u64 * taps[t.source.block].1))
            .is_ok_and(|v| v == signed);
        if !ok {
            tree_fail += 1;
        }
    }
    c.exact(&format!("word-level mismatches over {} tap sets", cfg.tap_sets), 0, word_fail);
    c.exact(&format!("tree-level mismatches over {} tap sets", cfg.tap_sets), 0, tree_fail);
    c
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ActivationMap {
    let mut data = vec![0u8; c * h * w];
    rng.fill_bytes(&mut data);
    ActivationMap::from_bytes(c, h, w, data).expect("sized buffer")
}

/// Reduced-scale bottleneck with an identity shortcut.
fn proxy_block(rng: &mut ChaCha8Rng) -> BlockSpec {
    let ch = 4 * rng.gen_range(2..=4);
    let mid = ch / 2;
    let size = rng.gen_range(4..=7);
    let mut a = LayerSpec::new("proxy.a", ch, mid, 1, 1, size);
    a.padding = 0;
    BlockSpec {
        name: "proxy".into(),
        layers: vec![a, LayerSpec::new("proxy.b", mid, mid, 3, 1, size), LayerSpec::new("proxy.c", mid, ch, 1, 1, size)],
        shortcut: None,
    }
}

fn bit_true_campaign(cfg: &AcceptanceConfig) -> Checks {
    let start = Instant::now();
    let mut c = Checks::default();
    let mut layer_runs = 0usize;
    let mut layer_fail: Option<String> = None;
    let mut block_runs = 0usize;
    let mut block_fail: Option<String> = None;
    for s in 0..cfg.sim_seeds {
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(s as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cin = 4 * rng.gen_range(2..=8);
        let cout = rng.gen_range(2..=6);
        let size = rng.gen_range(4..=8);
        let mut pw = LayerSpec::new("proxy.pw", cin, cout, 1, rng.gen_range(1..=2), size);
        pw.padding = 0;
        let conv = LayerSpec::new("proxy.conv", cin, cout, 3, 1, size);
        let ifm = random_map(&mut rng, cin, size, size);
        for layer in [&pw, &conv] {
            let run = generate_layer(layer, cfg.sparsity, seed).and_then(|(w, _)| {
                let expect = conv_ref(layer, &w, &ifm)?;
                let mut bad = None;
                for fold in [1, 4] {
                    for inst in [1, 4] {
                        let g = assemble_kernel(layer, &w, &FoldConfig::even(fold, cin)?, &InstanceConfig::new(inst, layer.filter_h, layer.filter_w))?;
                        let got = simulate_layer(&g, &ifm, SimMode::BitTrue)?.ofm_accumulations;
                        if let Some(m) = expect.first_mismatch(&got) {
                            bad.get_or_insert(format!("seed {seed} {} fold {fold} instances {inst} at {m:?}", layer.name));
                        }
                    }
                }
                Ok(bad)
            });
            layer_runs += 4;
            match run {
                Ok(None) => {}
                Ok(Some(m)) => _ = layer_fail.get_or_insert(m),
                Err(e) => _ = layer_fail.get_or_insert(format!("seed {seed}: {e}")),
            }
        }
        let block = proxy_block(&mut rng);
        let (fold, inst) = [(1, 1), (4, 1), (1, 4), (4, 4)][s % 4];
        let run = generate_model(std::slice::from_ref(&block), cfg.sparsity, seed).and_then(|m| {
            let layers: Vec<_> = m.tensors.iter().zip(&m.scale_bias).collect();
            let (ch, h, w) = block.input_shape();
            let x = random_map(&mut rng, ch, h, w);
            let expect = residual_block_ref(&block, &layers, &x)?;
            let sim_cfg = BlockSimConfig {
                fold,
                instances: inst,
                mode: SimMode::BitTrue,
                options: KernelOptions::default(),
            };
            let got = simulate_block(&block, &layers, &x, &sim_cfg)?;
            Ok((expect.data != got.data).then(|| {
                let k = expect.data.iter().zip(&got.data).position(|(a, b)| a != b).unwrap_or(0);
                format!("seed {seed} fold {fold} instances {inst} at flat index {k}")
            }))
        });
        block_runs += 1;
        match run {
            Ok(None) => {}
            Ok(Some(m)) => _ = block_fail.get_or_insert(m),
            Err(e) => _ = block_fail.get_or_insert(format!("seed {seed}: {e}")),
        }
    }
    let seeds_ok = cfg.sim_seeds >= 100;
    c.push("seeds", ">= 100", cfg.sim_seeds.to_string(), "-", seeds_ok);
    c.push(
        format!("layer simulations = conv_ref ({layer_runs} runs, 1x1 and 3x3, fold 1/4 x instances 1/4)"),
        "all equal",
        layer_fail.clone().unwrap_or_else(|| "all equal".into()),
        "exact",
        layer_fail.is_none(),
    );
    c.push(
        format!("block simulations + collect = block reference ({block_runs} runs)"),
        "all equal",
        block_fail.clone().unwrap_or_else(|| "all equal".into()),
        "exact",
        block_fail.is_none(),
    );
    c.budget("runtime", start.elapsed(), Duration::from_secs(300));
    c
}

fn fold_instance(cfg: &AcceptanceConfig) -> Checks {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf01d);
    let layer = LayerSpec::new("proxy.conv", 16, 4, 3, 1, 8);
    let ifm = random_map(&mut rng, 16, 8, 8);
    let mut run = || -> Result<()> {
        let (w, _) = generate_layer(&layer, cfg.sparsity, cfg.seed)?;
        let base = assemble_kernel(&layer, &w, &FoldConfig::unfolded(16), &InstanceConfig::single(&layer))?;
        let base_acc = simulate_layer(&base, &ifm, SimMode::BitTrue)?.ofm_accumulations;

        let folded = fold_kernel(&base, 4)?;
        c.exact("fold 4 graph phases", 4, folded.meta.fold.factor);
        c.exact("fold 4 weights = original weights", true, extract_weights(&folded)? == w);
        let f_acc = simulate_layer(&folded, &ifm, SimMode::BitTrue)?.ofm_accumulations;
        c.exact("fold 4 output = unfolded output", true, f_acc == base_acc);

        let inst = InstanceConfig::new(4, 3, 3);
        let multi = build_multi_instance(&base, &inst)?;
        c.exact("4-instance output slice", "3x6".to_string(), format!("{}x{}", multi.slice().0, multi.slice().1));
        let m_acc = simulate_layer(&multi, &ifm, SimMode::BitTrue)?.ofm_accumulations;
        let steps: Vec<_> = (0..3)
            .flat_map(|dy| (0..3).map(move |dx| (dy, dx)))
            .map(|p| conv_step_ref(&layer, &w, &ifm, p).map(|a| (p, a)))
            .collect::<Result<_>>()?;
        let nk = accumulate_steps((3, 3), &steps)?;
        c.exact("4-instance output = accumulated 1-instance steps", true, m_acc == nk);
        c.exact("1-instance output = accumulated steps", true, base_acc == nk);
        Ok(())
    };
    if let Err(e) = run() {
        c.error("fold/instance run", &e);
    }
    c
}

fn throughput_anchors(cfg: &AcceptanceConfig) -> Checks {
    let mut c = Checks::default();
    let blocks = resnet50_blocks();
    let find = |n: &str| blocks.iter().find(|b| b.name == n).cloned();
    let (Some(conv2), Some(conv5)) = (find("conv2_2"), find("conv5_2")) else {
        c.push("blocks", "-", "missing", "-", false);
        return c;
    };
    let w = cfg.word_clocks;
    let mut run = || -> Result<()> {
        let im2 = images_per_second(353e6, 8, 1, 3136, w)?;
        let im5 = images_per_second(156e6, 1, 4, 49, w)?;
        let t2 = effective_tops(&conv2, im2, 5)?;
        let t5 = effective_tops(&conv5, im5, 1)?;
        c.rel("conv2_2 effective TOPs/chip (GX280)", 66.0, t2, 0.05);
        c.rel("conv5_2 effective TOPs/chip (GX280)", 12.0, t5, 0.05);
        let ratio = cfg.gx550.alm_capacity as f64 / cfg.gx280.alm_capacity as f64;
        c.rel("conv2_2 effective TOPs/chip (GX550)", 131.0, t2 * ratio, 0.05);
        c.rel("conv5_2 effective TOPs/chip (GX550)", 23.0, t5 * ratio, 0.05);
        c.rel("conv2_2 MOPs/ALM", 70.0, mops_per_alm(t2, &cfg.gx280), 0.05);
        c.rel("conv5_2 MOPs/ALM", 12.0, mops_per_alm(t5, &cfg.gx280), 0.05);
        let f = 156e6;
        let a = images_per_second(2.0 * f, 8, 1, 3136, w)?;
        let b = images_per_second(f, 1, 4, 49, w)?;
        c.push(
            "8 instances at 2f = fold 4 at f",
            "equal",
            format!("{} vs {}", fmt(a), fmt(b)),
            "1e-12 relative",
            ((a - b) / b).abs() <= 1e-12,
        );
        Ok(())
    };
    if let Err(e) = run() {
        c.error("throughput", &e);
    }
    c
}

fn block_estimate(model: &QuantModel, name: &str, fold: usize, instances: usize, dupes: usize) -> Result<ResourceEstimate> {
    let b = model.block(name)?;
    let opts = KernelOptions {
        cfmm_dupes: dupes,
        ..KernelOptions::default()
    };
    let mut total = ResourceEstimate::default();
    for (l, t, _) in model.block_layers(b)? {
        let f = FoldConfig::even(fold.min(l.in_channels), l.in_channels)?;
        let inst = InstanceConfig::new(instances, l.filter_h, l.filter_w);
        total = total + estimate_layer(l, t, &f, &inst, opts, &CostRules::default())?;
    }
    Ok(total)
}

fn cost_sanity(cfg: &AcceptanceConfig, model: Result<&QuantModel, &Error>) -> Checks {
    let mut c = Checks::default();
    let model = match model {
        Ok(m) => m,
        Err(e) => {
            c.error("model", e);
            return c;
        }
    };
    let mut factor2 = |name: &str, expected_k: f64, r: Result<ResourceEstimate>| match r {
        Ok(e) => {
            let k = e.alms as f64 / 1e3;
            let pass = k >= expected_k / 2.0 && k <= expected_k * 2.0;
            c.push(name, fmt(expected_k), fmt(k), "factor 2", pass);
        }
        Err(e) => c.error(name, &e),
    };
    factor2("conv5_2 ALMs (k), fold 4, dupes 2", 620.0, block_estimate(model, "conv5_2", 4, 1, 2));
    factor2("conv2_2 ALMs (k), 4 instances", 127.0, block_estimate(model, "conv2_2", 1, 4, 1));
    let run = || -> Result<(u64, u64, u64)> {
        let b = model.block("conv2_2")?.clone();
        let dense = generate_model(std::slice::from_ref(&b), 0.0, cfg.seed)?;
        let sparse = generate_model(std::slice::from_ref(&b), cfg.sparsity, cfg.seed)?;
        // Densify one tensor of the sparse model weight by weight.
        let mut denser = sparse.clone();
        let t = &mut denser.tensors[1];
        let mut added = 0;
        for v in t.weights.iter_mut().filter(|v| **v == 0).take(500) {
            *v = 17;
            added += 1;
        }
        debug_assert!(added > 0);
        let e = |m: &QuantModel| block_estimate(m, "conv2_2", 1, 1, 1).map(|r| r.alms);
        Ok((e(&dense)?, e(&denser)?, e(&sparse)?))
    };
    match run() {
        Ok((dense, denser, sparse)) => {
            c.push(
                "ALMs: sparsity 0 > sparse model",
                "strictly greater",
                format!("{dense} vs {sparse}"),
                "-",
                dense > sparse,
            );
            c.push("ALMs: adding nonzero weights never lowers the estimate", "non-decreasing", format!("{denser} vs {sparse}"), "-", denser >= sparse);
        }
        Err(e) => c.error("monotonicity", &e),
    }
    c
}

fn partition_anchors(cfg: &AcceptanceConfig, model: Result<&QuantModel, &Error>) -> Checks {
    let mut c = Checks::default();
    c.rel("56x56x256 boundary at 10,006 im/s (Gbps)", 64.2, link_bandwidth((256, 56, 56), 8, 10_006.0), 0.01);
    match speedup_ratio(10_612.0, BASELINE_IM_S_PER_CHIP) {
        Ok(r) => c.abs("speedup 10,612 vs 7,720", 1.37, r, 0.01),
        Err(e) => c.error("speedup", &e),
    }
    let model = match model {
        Ok(m) => m,
        Err(e) => {
            c.error("model", e);
            return c;
        }
    };
    let pcfg = PartitionConfig {
        link_limit_gbps: cfg.link_limit_gbps,
        throughput: crate::cost::ThroughputConfig {
            word_clocks: cfg.word_clocks,
            ..Default::default()
        },
        ..PartitionConfig::default()
    };
    for (dev, chips, per_chip) in [(&cfg.gx280, 9usize, 5896.0), (&cfg.gx550, 5, 10_612.0)] {
        let name = &dev.name;
        match plan_partition(model, dev, &pcfg) {
            Ok(plan) => partition_checks(&mut c, name, &plan, chips, per_chip, cfg.link_limit_gbps),
            Err(e) => c.error(&format!("{name} plan"), &e),
        }
    }
    c
}

fn partition_checks(c: &mut Checks, name: &str, plan: &PartitionPlan, chips: usize, per_chip: f64, limit: f64) {
    let n = plan.chips.len();
    c.push(format!("{name} chips"), chips.to_string(), n.to_string(), "±1", n.abs_diff(chips) <= 1);
    c.rel(&format!("{name} im/s per chip"), per_chip, plan.per_chip_throughput, 0.10);
    let max = plan.links.iter().map(|l| l.gbps).fold(0.0, f64::max);
    c.push(format!("{name} max link Gbps"), format!("<= {limit}"), fmt(max), "-", max <= limit);
}
