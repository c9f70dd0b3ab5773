//! Compiler, bit-true simulator and deployment planner for compiled CNN
//! kernels: convolution layers whose constant, sparse INT7 weights are
//! baked into a bit-serial hardware graph of shared constant multipliers
//! (CFMM blocks) feeding per-output compressor adder trees.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: quantized network description, Resnet50 block table,
//!   synthetic sparse model generation and the on-disk model format.
//! * [`cfmm`]: sign/odd/shift weight decomposition and add/sub chain planning.
//! * [`tree`]: compressor adder trees, the shift-right accumulator and the
//!   one's-complement negative tap scheme.
//! * [`kernel`]: the hardware graph IR, folding, multi-instance kernels and
//!   netlist export.
//! * [`sim`]: bit-true and fast functional simulation of kernel graphs.
//! * [`reference`]: the integer convolution oracle and non-kernel collector.
//! * [`cost`]: ALM/DSP/M20K estimation and the throughput model.
//! * [`partition`]: multichip partition planning.
//! * [`harness`]: the acceptance report.

pub mod cfmm;
pub mod cost;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod model;
pub mod partition;
pub mod reference;
pub mod sim;
pub mod tree;
mod util;

pub use cfmm::{decompose, plan_mcm, required_odds, CfmmBlock, McmPlan, Sign, WeightDecomp};
pub use error::{Error, Result};
pub use cost::{DeviceSpec, ResourceEstimate, ThroughputConfig};
pub use harness::{run_acceptance, AcceptanceConfig, AcceptanceReport};
pub use kernel::{FoldConfig, InstanceConfig, KernelGraph, NodeKind};
pub use model::{BlockSpec, FixedScale, LayerSpec, LayerStats, QuantModel, QuantTensor, ScaleBias};
pub use partition::{PartitionConfig, PartitionPlan};
pub use reference::{Accumulation, ActivationMap};
pub use sim::{SimMode, SimResult};
pub use util::write_atomic;

/// Tool version embedded in every emitted document.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Tool version, configuration hash and seed embedded in emitted documents.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    /// SHA-256 of the canonical JSON encoding of the run configuration.
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new<C: serde::Serialize + ?Sized>(seed: u64, config: &C) -> Self {
        Provenance {
            tool_version: TOOL_VERSION.to_owned(),
            config_hash: config_hash(config),
            seed,
        }
    }
}

/// Hex SHA-256 of `config`'s JSON encoding.
pub fn config_hash<C: serde::Serialize + ?Sized>(config: &C) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}
