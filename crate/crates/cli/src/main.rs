//! `bitforge`: compile, simulate, verify, cost and partition compiled CNN
//! kernels.
//!
//! Exit status: 0 on success, 1 when a verification finds a mismatch (or an
//! acceptance criterion fails), 2 for usage and configuration errors.

mod config;
mod table;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use bitforge_core::cost::{estimate_kernel_with, CostRules};
use bitforge_core::kernel::{assemble_kernel_with, export_netlist, import_netlist, KernelOptions};
use bitforge_core::model::{block_stats, generate_model, layer_stats, load_model, resnet50_blocks, save_model};
use bitforge_core::partition::{plan_from_json, plan_partition, plan_to_json, render_report, speedup_report, BASELINE_IM_S_PER_CHIP};
use bitforge_core::reference::{conv_ref, residual_block_ref};
use bitforge_core::sim::{simulate_layer, BlockSimConfig, CompiledBlock};
use bitforge_core::{
    run_acceptance, write_atomic, AcceptanceConfig, ActivationMap, DeviceSpec, Error, FoldConfig, InstanceConfig, Provenance, SimMode,
};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "bitforge", version, about = "Compiled bit-serial CNN kernel toolchain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sparse INT7 Resnet50 model.
    Gen {
        #[arg(long, default_value_t = 0.8)]
        sparsity: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Comma-separated block names; all of conv2_1..conv5_3 by default.
        #[arg(long, value_delimiter = ',')]
        blocks: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-block parameter and MAC counts of a model.
    Stats {
        model: PathBuf,
        /// Also write the counts as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compile one layer (or a block's 3x3 layer) into a netlist.
    Compile {
        model: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long, default_value_t = 1)]
        fold: usize,
        #[arg(long, default_value_t = 1)]
        instances: usize,
        #[arg(long, default_value_t = 1)]
        dupes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a netlist over an input feature map.
    Simulate {
        netlist: PathBuf,
        /// Raw u8 activations, channel-major.
        #[arg(long)]
        ifm: PathBuf,
        #[arg(long, default_value = "bit-true")]
        mode: SimMode,
        /// Accumulations as little-endian i32, channel-major.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare compiled kernels against the reference on random inputs.
    Verify {
        model: PathBuf,
        /// Residual block to check through the kernel path and collector.
        #[arg(long, conflicts_with = "netlist")]
        block: Option<String>,
        /// Netlist to check against its layer's model weights.
        #[arg(long)]
        netlist: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 1)]
        fold: usize,
        #[arg(long, default_value_t = 1)]
        instances: usize,
        #[arg(long, default_value = "fast")]
        mode: SimMode,
    },
    /// Resource estimate of a netlist.
    Cost {
        netlist: PathBuf,
        #[arg(long)]
        device: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan the model's blocks onto devices.
    Partition {
        model: PathBuf,
        #[arg(long)]
        device: PathBuf,
        #[arg(long)]
        link_gbps: Option<f64>,
        /// Run configuration (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a partition plan, or the two corner blocks of a model
    /// directory.
    Report {
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance suite.
    Accept {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure outcome of a command.
enum Failure {
    /// Verification found a difference; the message names where.
    Mismatch(String),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Mismatch(m)) => {
            eprintln!("{m}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Gen { sparsity, seed, blocks, out } => gen(sparsity, seed, &blocks, &out),
        Command::Stats { model, out } => stats(&model, out.as_deref()),
        Command::Compile {
            model,
            layer,
            fold,
            instances,
            dupes,
            seed,
            out,
        } => compile(&model, &layer, fold, instances, dupes, seed, &out),
        Command::Simulate { netlist, ifm, mode, out } => simulate(&netlist, &ifm, mode, &out),
        Command::Verify {
            model,
            block,
            netlist,
            seeds,
            fold,
            instances,
            mode,
        } => match (block, netlist) {
            (Some(b), None) => verify_block(&model, &b, seeds, fold, instances, mode),
            (None, Some(n)) => verify_netlist(&model, &n, seeds, mode),
            _ => Err(Error::Config("verify needs --block or --netlist".into()).into()),
        },
        Command::Cost { netlist, device, out } => cost(&netlist, &device, out.as_deref()),
        Command::Partition {
            model,
            device,
            link_gbps,
            config,
            out,
        } => partition(&model, &device, link_gbps, config.as_deref(), &out),
        Command::Report { input, config, out } => report(&input, config.as_deref(), out.as_deref()),
        Command::Accept { config, out } => accept(config.as_deref(), out.as_deref()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_file(path: &Path) -> Result<Vec<u8>, Error> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

fn gen(sparsity: f64, seed: u64, names: &[String], out: &Path) -> Outcome {
    let all = resnet50_blocks();
    let blocks = if names.is_empty() {
        all
    } else {
        names
            .iter()
            .map(|n| all.iter().find(|b| &b.name == n).cloned().ok_or_else(|| Error::UnknownLayer(n.clone())))
            .collect::<Result<_, _>>()?
    };
    let model = generate_model(&blocks, sparsity, seed)?;
    save_model(&model, out)?;
    println!("wrote {} blocks, {} layers to {}", model.blocks.len(), model.tensors.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct StatsRow {
    name: String,
    params: u64,
    macs: u64,
    macs_per_param: u64,
    nonzero_fraction: f64,
}

#[derive(Serialize)]
struct StatsDoc {
    provenance: Provenance,
    blocks: Vec<StatsRow>,
    layers: Vec<StatsRow>,
}

fn stats(dir: &Path, out: Option<&Path>) -> Outcome {
    let model = load_model(dir)?;
    let mut blocks = Vec::new();
    let mut layers = Vec::new();
    for b in &model.blocks {
        let items = model.block_layers(b)?;
        let tensors: Vec<_> = items.iter().map(|(_, t, _)| *t).collect();
        let s = block_stats(b, Some(&tensors))?;
        blocks.push(StatsRow {
            name: b.name.clone(),
            params: s.param_count,
            macs: s.mac_count,
            macs_per_param: s.macs_per_param,
            nonzero_fraction: s.nonzero_fraction,
        });
        for (l, t, _) in items {
            let s = layer_stats(l, Some(t))?;
            layers.push(StatsRow {
                name: l.name.clone(),
                params: s.param_count,
                macs: s.mac_count,
                macs_per_param: s.macs_per_param,
                nonzero_fraction: s.nonzero_fraction,
            });
        }
    }
    print!("{}", table::stats(&blocks));
    if let Some(path) = out {
        let seed = model.provenance.as_ref().map_or(0, |p| p.seed);
        let doc = StatsDoc {
            provenance: Provenance::new(seed, &("stats", &model.provenance)),
            blocks,
            layers,
        };
        write_json(path, &doc)?;
    }
    Ok(())
}

fn compile(dir: &Path, name: &str, fold: usize, instances: usize, dupes: usize, seed: u64, out: &Path) -> Outcome {
    let model = load_model(dir)?;
    let spec = model.resolve_layer(name)?.clone();
    let (layer, tensor, _) = model.layer(&spec.name)?;
    let fold = FoldConfig::even(fold, layer.in_channels)?;
    let inst = InstanceConfig::new(instances, layer.filter_h, layer.filter_w);
    let opts = KernelOptions {
        cfmm_dupes: dupes,
        seed,
        ..KernelOptions::default()
    };
    let graph = assemble_kernel_with(layer, tensor, &fold, &inst, opts)?;
    export_netlist(&graph, out)?;
    let (h, w) = graph.slice();
    println!(
        "{}: {} nodes, {} edges, {} trees ({}x{} slice), word {} clocks, latency {}",
        layer.name,
        graph.nodes.len(),
        graph.edges.len(),
        graph.tree_count(),
        h,
        w,
        graph.meta.word_clocks,
        graph.meta.latency
    );
    Ok(())
}

#[derive(Serialize)]
struct SimDoc {
    provenance: Provenance,
    layer: String,
    mode: SimMode,
    shape: [usize; 3],
    cycles: u64,
    ifm_hash: String,
}

fn simulate(netlist: &Path, ifm_path: &Path, mode: SimMode, out: &Path) -> Outcome {
    let graph = import_netlist(netlist)?;
    let layer = &graph.meta.layer;
    let ifm = ActivationMap::from_bytes(layer.in_channels, layer.in_height, layer.in_width, read_file(ifm_path)?)?;
    let result = simulate_layer(&graph, &ifm, mode)?;
    let acc = &result.ofm_accumulations;
    write_atomic(out, &acc.to_le_i32_bytes()?)?;
    let doc = SimDoc {
        provenance: Provenance::new(graph.meta.seed, &(&graph.meta, mode)),
        layer: layer.name.clone(),
        mode,
        shape: [acc.channels, acc.height, acc.width],
        cycles: result.cycles,
        ifm_hash: bitforge_core::config_hash(&ifm.data),
    };
    write_json(&sidecar(out), &doc)?;
    println!("{}: {}x{}x{} outputs, {} cycles", layer.name, acc.channels, acc.height, acc.width, result.cycles);
    Ok(())
}

/// `ofm.bin` -> `ofm.bin.json`.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn random_map(seed: u64, (c, h, w): (usize, usize, usize)) -> ActivationMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0u8; c * h * w];
    rng.fill_bytes(&mut data);
    ActivationMap::from_bytes(c, h, w, data).expect("sized buffer")
}

fn verify_block(dir: &Path, name: &str, seeds: u64, fold: usize, instances: usize, mode: SimMode) -> Outcome {
    let model = load_model(dir)?;
    let block = model.block(name)?.clone();
    let layers: Vec<_> = model.block_layers(&block)?.into_iter().map(|(_, t, sb)| (t, sb)).collect();
    let cfg = BlockSimConfig {
        fold,
        instances,
        mode,
        options: KernelOptions::default(),
    };
    let compiled = CompiledBlock::new(&block, &layers, &cfg)?;
    for seed in 0..seeds {
        let ifm = random_map(seed, block.input_shape());
        let expect = residual_block_ref(&block, &layers, &ifm)?;
        let got = compiled.run(&ifm)?;
        if let Some(k) = expect.data.iter().zip(&got.data).position(|(a, b)| a != b) {
            let (c, y, x) = (k / (got.height * got.width), k / got.width % got.height, k % got.width);
            return Err(Failure::Mismatch(format!(
                "FAIL seed {seed}: first mismatch at channel {c} row {y} col {x}: expected {}, got {}",
                expect.data[k], got.data[k]
            )));
        }
    }
    println!("PASS {seeds}/{seeds} seeds");
    Ok(())
}

fn verify_netlist(dir: &Path, netlist: &Path, seeds: u64, mode: SimMode) -> Outcome {
    let model = load_model(dir)?;
    let graph = import_netlist(netlist)?;
    let (layer, tensor, _) = model.layer(&graph.meta.layer.name)?;
    if *layer != graph.meta.layer {
        return Err(Error::ShapeMismatch(format!("netlist layer {} differs from the model's", layer.name)).into());
    }
    for seed in 0..seeds {
        let ifm = random_map(seed, (layer.in_channels, layer.in_height, layer.in_width));
        let expect = conv_ref(layer, tensor, &ifm)?;
        let got = simulate_layer(&graph, &ifm, mode)?.ofm_accumulations;
        if let Some((c, y, x)) = expect.first_mismatch(&got) {
            return Err(Failure::Mismatch(format!(
                "FAIL seed {seed}: first mismatch at ofm {c} row {y} col {x}: expected {}, got {}",
                expect.get(c, y, x),
                got.get(c, y, x)
            )));
        }
    }
    println!("PASS {seeds}/{seeds} seeds");
    Ok(())
}

#[derive(Serialize)]
struct CostDoc {
    provenance: Provenance,
    layer: String,
    device: DeviceSpec,
    estimate: bitforge_core::ResourceEstimate,
    fits: bool,
}

fn cost(netlist: &Path, device: &Path, out: Option<&Path>) -> Outcome {
    let graph = import_netlist(netlist)?;
    let device = DeviceSpec::load(device)?;
    let rules = CostRules::default();
    let e = estimate_kernel_with(&graph, &rules);
    print!("{}", table::cost(&graph.meta.layer.name, &e, &device));
    if let Some(path) = out {
        let doc = CostDoc {
            provenance: Provenance::new(graph.meta.seed, &(&device, &rules)),
            layer: graph.meta.layer.name.clone(),
            fits: device.fits(&e),
            device,
            estimate: e,
        };
        write_json(path, &doc)?;
    }
    Ok(())
}

fn partition(dir: &Path, device: &Path, link: Option<f64>, config: Option<&Path>, out: &Path) -> Outcome {
    let model = load_model(dir)?;
    let device = DeviceSpec::load(device)?;
    let mut cfg = RunConfig::load(config)?.partition;
    if let Some(l) = link {
        if !(l > 0.0) {
            return Err(Error::Config("--link-gbps must be positive".into()).into());
        }
        cfg.link_limit_gbps = l;
    }
    let plan = plan_partition(&model, &device, &cfg)?;
    write_atomic(out, &plan_to_json(&plan)?)?;
    print!("{}", render_report(&plan));
    Ok(())
}

fn report(input: &Path, config: Option<&Path>, out: Option<&Path>) -> Outcome {
    if input.is_dir() {
        let model = load_model(input)?;
        let cfg = RunConfig::load(config)?;
        let t = table::corners(&model, &cfg)?;
        print!("{}", t.render());
        if let Some(path) = out {
            write_json(path, &t)?;
        }
        return Ok(());
    }
    let plan = plan_from_json(&read_file(input)?)?;
    print!("{}", render_report(&plan));
    println!();
    let per_chip = speedup_report(&plan, BASELINE_IM_S_PER_CHIP)?;
    println!("speedup over {BASELINE_IM_S_PER_CHIP:.0} im/s/chip: {per_chip:.3}x");
    Ok(())
}

fn accept(config: Option<&Path>, out: Option<&Path>) -> Outcome {
    let cfg = match config {
        Some(p) => {
            let bytes = read_file(p)?;
            let text = String::from_utf8(bytes).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            AcceptanceConfig::from_toml(&text)?
        }
        None => AcceptanceConfig::default(),
    };
    let report = run_acceptance(&cfg);
    print!("{}", report.summary());
    if let Some(path) = out {
        write_atomic(path, &report.to_json()?)?;
    }
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Mismatch(format!(
            "{} of {} criteria failed",
            report.criteria.iter().filter(|c| !c.pass).count(),
            report.criteria.len()
        )))
    }
}
