use std::fmt::Write as _;

use serde::Serialize;

use bitforge_core::cost::{effective_tops, estimate_layer, images_per_second, mops_per_alm, CostRules};
use bitforge_core::kernel::KernelOptions;
use bitforge_core::{DeviceSpec, Error, FoldConfig, InstanceConfig, Provenance, QuantModel, ResourceEstimate};

use crate::config::RunConfig;
use crate::StatsRow;

pub fn stats(rows: &[StatsRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>12} {:>14} {:>10} {:>9}", "block", "params", "MACs", "MAC/param", "nonzero");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>12} {:>14} {:>10} {:>8.1}%",
            r.name,
            r.params,
            r.macs,
            r.macs_per_param,
            100.0 * r.nonzero_fraction
        );
    }
    s
}

pub fn cost(layer: &str, e: &ResourceEstimate, device: &DeviceSpec) -> String {
    let mut s = String::new();
    let b = &e.breakdown;
    let _ = writeln!(s, "layer      {layer}");
    for (name, c) in [
        ("cfmm", b.cfmm),
        ("stage 0", b.tree_stage0),
        ("tree", b.tree_upper),
        ("muxes", b.muxes),
        ("sra", b.sra),
        ("registers", b.registers),
    ] {
        let _ = writeln!(s, "  {:<10} {:>10} ALMs {:>10} flops", name, c.alms, c.flops);
    }
    let pct = |v: u64, cap: u64| 100.0 * v as f64 / cap as f64;
    let _ = writeln!(s, "ALMs       {:>10} ({:.1}% of {})", e.alms, pct(e.alms, device.alm_capacity), device.name);
    let _ = writeln!(s, "flops      {:>10}", e.flops);
    let _ = writeln!(s, "DSPs       {:>10} ({:.1}%)", e.dsps, pct(e.dsps, device.dsp_capacity));
    let _ = writeln!(s, "M20Ks      {:>10} ({:.1}%)", e.m20ks, pct(e.m20ks, device.m20k_capacity));
    let _ = writeln!(
        s,
        "fits       {} (usable fraction {})",
        if device.fits(e) { "yes" } else { "no" },
        device.usable_fraction
    );
    s
}

/// One column of the corner-block table.
#[derive(Serialize)]
pub struct Corner {
    pub block: String,
    pub instances_per_kernel: usize,
    pub kernels: usize,
    pub fold: usize,
    pub frequency_mhz: f64,
    pub alms_per_kernel: u64,
    pub dsps_per_kernel: u64,
    pub m20ks_per_kernel: u64,
    pub cfmm_dupes: usize,
    pub block_copies: usize,
    pub im_per_s: f64,
    pub mops_per_alm: f64,
    pub gx280_tops: f64,
    pub gx550_tops: f64,
}

#[derive(Serialize)]
pub struct CornerTable {
    pub provenance: Provenance,
    pub word_clocks: u32,
    pub corners: Vec<Corner>,
}

/// (block, instances per kernel, kernels, fold, CFMM dupes, block copies)
const CORNERS: [(&str, usize, usize, usize, usize, usize); 2] = [("conv2_2", 4, 2, 1, 1, 5), ("conv5_2", 1, 1, 4, 2, 1)];

pub fn corners(model: &QuantModel, cfg: &RunConfig) -> Result<CornerTable, Error> {
    let tp = &cfg.partition.throughput;
    let rules = CostRules::default();
    let (gx280, gx550) = (DeviceSpec::gx280(), DeviceSpec::gx550());
    let mut out = Vec::new();
    for (name, inst, kernels, fold, dupes, copies) in CORNERS {
        let Ok(block) = model.block(name) else { continue };
        let opts = KernelOptions {
            cfmm_dupes: dupes,
            ..KernelOptions::default()
        };
        let mut e = ResourceEstimate::default();
        let mut im_s = f64::INFINITY;
        for (l, t, _) in model.block_layers(block)? {
            let f = FoldConfig::even(fold.min(l.in_channels), l.in_channels)?;
            let i = InstanceConfig::new(inst, l.filter_h, l.filter_w);
            e = e + estimate_layer(l, t, &f, &i, opts, &rules)?;
            let r = images_per_second(tp.frequency(&l.name)?, inst * kernels, f.factor, l.out_positions(), tp.word_clocks)?;
            im_s = im_s.min(r);
        }
        let tops = effective_tops(block, im_s, copies)?;
        out.push(Corner {
            block: name.into(),
            instances_per_kernel: inst,
            kernels,
            fold,
            frequency_mhz: tp.frequency(name)? / 1e6,
            alms_per_kernel: e.alms,
            dsps_per_kernel: e.dsps,
            m20ks_per_kernel: e.m20ks,
            cfmm_dupes: dupes,
            block_copies: copies,
            im_per_s: im_s,
            mops_per_alm: mops_per_alm(tops, &gx280),
            gx280_tops: tops,
            gx550_tops: tops * gx550.alm_capacity as f64 / gx280.alm_capacity as f64,
        });
    }
    if out.is_empty() {
        return Err(Error::UnknownLayer("conv2_2 or conv5_2".into()));
    }
    Ok(CornerTable {
        provenance: Provenance::new(cfg.seed, cfg),
        word_clocks: tp.word_clocks,
        corners: out,
    })
}

impl CornerTable {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let row = |s: &mut String, label: &str, f: &dyn Fn(&Corner) -> String| {
            let _ = write!(s, "{label:<28}");
            for c in &self.corners {
                let _ = write!(s, " {:>10}", f(c));
            }
            s.push('\n');
        };
        row(&mut s, "Layer", &|c| c.block.clone());
        row(&mut s, "Instances/Kernel", &|c| c.instances_per_kernel.to_string());
        row(&mut s, "Kernels", &|c| c.kernels.to_string());
        row(&mut s, "Folding", &|c| c.fold.to_string());
        row(&mut s, "Frequency(MHz)", &|c| format!("{:.0}", c.frequency_mhz));
        row(&mut s, "ALM/Kernel(k)", &|c| format!("{:.0}", c.alms_per_kernel as f64 / 1e3));
        row(&mut s, "DSP/Kernel", &|c| c.dsps_per_kernel.to_string());
        row(&mut s, "M20K/Kernel", &|c| c.m20ks_per_kernel.to_string());
        row(&mut s, "CFMM Dupe", &|c| c.cfmm_dupes.to_string());
        row(&mut s, "Block copies", &|c| c.block_copies.to_string());
        row(&mut s, "im/s", &|c| format!("{:.0}", c.im_per_s));
        row(&mut s, "Effective MOPs/ALM", &|c| format!("{:.1}", c.mops_per_alm));
        row(&mut s, "GX280 Effective TOPs/Chip", &|c| format!("{:.1}", c.gx280_tops));
        row(&mut s, "GX550 Effective TOPs/Chip", &|c| format!("{:.1}", c.gx550_tops));
        let _ = writeln!(s, "(word clocks {}, calibrated)", self.word_clocks);
        s
    }
}
