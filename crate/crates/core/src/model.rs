//! Quantized network description.
//!
//! A [`QuantModel`] is a list of residual [`BlockSpec`]s together with one
//! INT7 [`QuantTensor`] and one [`ScaleBias`] per convolution layer. Layers
//! are addressed by name (`<block>.a`, `<block>.b`, `<block>.c` for the
//! 1x1/3x3/1x1 chain and `<block>.proj` for the projection shortcut).

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{read, shr_round_half_even, write_atomic};
use crate::Provenance;

pub const INT7_MIN: i32 = -64;
pub const INT7_MAX: i32 = 63;
pub const DEFAULT_ACTIVATION_BITS: u32 = 8;
/// Mantissa width used when importing floating-point scales.
pub const SCALE_MANTISSA_BITS: u32 = 16;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";
const MODEL_FORMAT: &str = "bitforge-model";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub filter_h: usize,
    pub filter_w: usize,
    pub stride: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub padding: usize,
}

impl LayerSpec {
    /// A square-filter layer with "same" padding for odd filters.
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        filter: usize,
        stride: usize,
        in_size: usize,
    ) -> Self {
        LayerSpec {
            name: name.into(),
            in_channels,
            out_channels,
            filter_h: filter,
            filter_w: filter,
            stride,
            in_height: in_size,
            in_width: in_size,
            padding: filter / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.in_channels,
            self.out_channels,
            self.filter_h,
            self.filter_w,
            self.stride,
            self.in_height,
            self.in_width,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidLayer(format!("{}: counts must be >= 1", self.name)));
        }
        if self.in_height + 2 * self.padding < self.filter_h
            || self.in_width + 2 * self.padding < self.filter_w
        {
            return Err(Error::InvalidLayer(format!(
                "{}: filter larger than padded input",
                self.name
            )));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * self.padding - self.filter_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * self.padding - self.filter_w) / self.stride + 1
    }

    pub fn out_positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn filter_area(&self) -> usize {
        self.filter_h * self.filter_w
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.filter_area()
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.filter_h, self.filter_w]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    /// The 1x1, 3x3, 1x1 chain.
    pub layers: Vec<LayerSpec>,
    /// Projection shortcut; `None` means identity shortcut.
    pub shortcut: Option<LayerSpec>,
}

impl BlockSpec {
    /// Main-path layers followed by the projection shortcut, if any.
    pub fn all_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().chain(self.shortcut.iter())
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        let first = &self.layers[0];
        (first.in_channels, first.in_height, first.in_width)
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        let last = self.layers.last().expect("validated block has layers");
        (last.out_channels, last.out_height(), last.out_width())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidLayer(format!("{}: block has no layers", self.name)));
        }
        for l in self.all_layers() {
            l.validate()?;
        }
        for pair in self.layers.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.out_channels != b.in_channels
                || a.out_height() != b.in_height
                || a.out_width() != b.in_width
            {
                return Err(Error::ShapeMismatch(format!(
                    "{} -> {}: incompatible chain",
                    a.name, b.name
                )));
            }
        }
        let input = self.input_shape();
        let output = self.output_shape();
        match &self.shortcut {
            Some(sc) => {
                if (sc.in_channels, sc.in_height, sc.in_width) != input
                    || (sc.out_channels, sc.out_height(), sc.out_width()) != output
                {
                    return Err(Error::ShapeMismatch(format!(
                        "{}: shortcut does not map block input to block output",
                        self.name
                    )));
                }
            }
            None => {
                if input != output {
                    return Err(Error::ShapeMismatch(format!(
                        "{}: identity shortcut needs equal input and output shapes",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Dense INT7 weights, `(out, in, fh, fw)` row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantTensor {
    pub shape: [usize; 4],
    pub weights: Vec<i8>,
}

impl QuantTensor {
    pub fn new(shape: [usize; 4], weights: Vec<i8>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if weights.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "tensor of shape {shape:?} needs {len} weights, got {}",
                weights.len()
            )));
        }
        if let Some(&w) = weights.iter().find(|&&w| !(INT7_MIN..=INT7_MAX).contains(&(w as i32))) {
            return Err(Error::Int7Range(w as i32));
        }
        Ok(QuantTensor { shape, weights })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        QuantTensor {
            shape,
            weights: vec![0; shape.iter().product()],
        }
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, dy: usize, dx: usize) -> usize {
        let [_, ci, fh, fw] = self.shape;
        ((o * ci + i) * fh + dy) * fw + dx
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, dy: usize, dx: usize) -> i32 {
        self.weights[self.index(o, i, dy, dx)] as i32
    }

    pub fn set(&mut self, o: usize, i: usize, dy: usize, dx: usize, w: i32) -> Result<()> {
        if !(INT7_MIN..=INT7_MAX).contains(&w) {
            return Err(Error::Int7Range(w));
        }
        let idx = self.index(o, i, dy, dx);
        self.weights[idx] = w as i8;
        Ok(())
    }

    pub fn nonzero_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0).count()
    }

    pub fn zero_fraction(&self) -> f64 {
        if self.weights.is_empty() {
            return 0.0;
        }
        1.0 - self.nonzero_count() as f64 / self.weights.len() as f64
    }

    pub fn check_matches(&self, spec: &LayerSpec) -> Result<()> {
        if self.shape != spec.weight_shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}: tensor shape {:?} vs layer shape {:?}",
                spec.name,
                self.shape,
                spec.weight_shape()
            )));
        }
        Ok(())
    }
}

/// Fixed-point scale `mantissa * 2^exponent`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedScale {
    pub mantissa: i32,
    pub exponent: i32,
}

impl FixedScale {
    pub const ONE: FixedScale = FixedScale {
        mantissa: 1,
        exponent: 0,
    };

    pub fn new(mantissa: i32, exponent: i32) -> Result<Self> {
        if mantissa == 0 {
            return Err(Error::Config("scale mantissa must be nonzero".into()));
        }
        Ok(FixedScale { mantissa, exponent })
    }

    /// Rounds a positive or negative finite float to a 16-bit mantissa.
    pub fn from_f64(v: f64) -> Result<Self> {
        if !v.is_finite() || v == 0.0 {
            return Err(Error::Config(format!("cannot represent scale {v}")));
        }
        let mag = v.abs();
        let mut exponent = mag.log2().floor() as i32 - (SCALE_MANTISSA_BITS as i32 - 1);
        let mut mantissa = (mag / 2f64.powi(exponent)).round() as i64;
        if mantissa >= 1 << SCALE_MANTISSA_BITS {
            mantissa >>= 1;
            exponent += 1;
        }
        let mantissa = mantissa as i32 * if v < 0.0 { -1 } else { 1 };
        Ok(FixedScale { mantissa, exponent })
    }

    pub fn to_f64(self) -> f64 {
        self.mantissa as f64 * 2f64.powi(self.exponent)
    }

    /// `round_half_even(v * mantissa * 2^exponent)`.
    pub fn apply(self, v: i64) -> i64 {
        let prod = v as i128 * self.mantissa as i128;
        let out = if self.exponent >= 0 {
            prod << self.exponent.min(64)
        } else {
            shr_round_half_even(prod, (-self.exponent) as u32)
        };
        out.clamp(i64::MIN as i128, i64::MAX as i128) as i64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleBias {
    pub scale: Vec<FixedScale>,
    pub bias: Vec<i32>,
}

impl ScaleBias {
    pub fn unit(channels: usize) -> Self {
        ScaleBias {
            scale: vec![FixedScale::ONE; channels],
            bias: vec![0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantLayer {
    pub spec: LayerSpec,
    pub tensor: QuantTensor,
    pub scale_bias: ScaleBias,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantModel {
    pub blocks: Vec<BlockSpec>,
    /// One entry per layer in [`QuantModel::layer_specs`] order.
    pub tensors: Vec<QuantTensor>,
    pub scale_bias: Vec<ScaleBias>,
    pub activation_bits: u32,
    pub provenance: Option<Provenance>,
}

impl QuantModel {
    pub fn new(blocks: Vec<BlockSpec>, tensors: Vec<QuantTensor>, scale_bias: Vec<ScaleBias>) -> Result<Self> {
        let model = QuantModel {
            blocks,
            tensors,
            scale_bias,
            activation_bits: DEFAULT_ACTIVATION_BITS,
            provenance: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Every layer in storage order: blocks in order, main path then shortcut.
    pub fn layer_specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.blocks.iter().flat_map(|b| b.all_layers())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layer_specs().count();
        if self.tensors.len() != n || self.scale_bias.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "model has {n} layers, {} tensors, {} scale/bias entries",
                self.tensors.len(),
                self.scale_bias.len()
            )));
        }
        for b in &self.blocks {
            b.validate()?;
        }
        for ((spec, t), sb) in self.layer_specs().zip(&self.tensors).zip(&self.scale_bias) {
            t.check_matches(spec)?;
            if sb.scale.len() != spec.out_channels || sb.bias.len() != spec.out_channels {
                return Err(Error::ShapeMismatch(format!(
                    "{}: scale/bias needs {} channels",
                    spec.name, spec.out_channels
                )));
            }
            if sb.scale.iter().any(|s| s.mantissa == 0) {
                return Err(Error::Manifest(format!("{}: zero scale mantissa", spec.name)));
            }
        }
        Ok(())
    }

    fn layer_index(&self, name: &str) -> Option<usize> {
        self.layer_specs().position(|l| l.name == name)
    }

    pub fn layer(&self, name: &str) -> Result<(&LayerSpec, &QuantTensor, &ScaleBias)> {
        let idx = self
            .layer_index(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_owned()))?;
        let spec = self.layer_specs().nth(idx).expect("index from position");
        Ok((spec, &self.tensors[idx], &self.scale_bias[idx]))
    }

    pub fn layer_mut(&mut self, name: &str) -> Result<&mut QuantTensor> {
        let idx = self
            .layer_index(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_owned()))?;
        Ok(&mut self.tensors[idx])
    }

    pub fn block(&self, name: &str) -> Result<&BlockSpec> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_owned()))
    }

    /// Resolves a layer name, or a block name to that block's widest-filter
    /// layer (the 3x3 for bottleneck blocks).
    pub fn resolve_layer(&self, name: &str) -> Result<&LayerSpec> {
        if let Some(l) = self.layer_specs().find(|l| l.name == name) {
            return Ok(l);
        }
        let block = self.block(name)?;
        Ok(block
            .layers
            .iter()
            .max_by_key(|l| (l.filter_area(), std::cmp::Reverse(l.name.clone())))
            .expect("validated block has layers"))
    }

    /// Tensors and scale/bias of a block, main path then shortcut.
    pub fn block_layers(&self, block: &BlockSpec) -> Result<Vec<(&LayerSpec, &QuantTensor, &ScaleBias)>> {
        block.all_layers().map(|l| self.layer(&l.name)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub param_count: u64,
    pub mac_count: u64,
    pub macs_per_param: u64,
    pub nonzero_fraction: f64,
}

pub fn layer_stats(spec: &LayerSpec, tensor: Option<&QuantTensor>) -> Result<LayerStats> {
    spec.validate()?;
    let nonzero_fraction = match tensor {
        Some(t) => {
            t.check_matches(spec)?;
            if t.weights.is_empty() {
                0.0
            } else {
                t.nonzero_count() as f64 / t.weights.len() as f64
            }
        }
        None => 1.0,
    };
    let param_count = spec.param_count() as u64;
    let macs_per_param = spec.out_positions() as u64;
    Ok(LayerStats {
        param_count,
        mac_count: param_count * macs_per_param,
        macs_per_param,
        nonzero_fraction,
    })
}

/// Totals over a block's main path (the shortcut projection is excluded, as
/// in the usual per-block parameter tables). `macs_per_param` is the
/// integer ratio of the totals.
pub fn block_stats(block: &BlockSpec, tensors: Option<&[&QuantTensor]>) -> Result<LayerStats> {
    let mut params = 0u64;
    let mut macs = 0u64;
    let mut nonzero = 0.0;
    for (k, l) in block.layers.iter().enumerate() {
        let s = layer_stats(l, tensors.map(|t| t[k]))?;
        params += s.param_count;
        macs += s.mac_count;
        nonzero += s.nonzero_fraction * s.param_count as f64;
    }
    Ok(LayerStats {
        param_count: params,
        mac_count: macs,
        macs_per_param: if params == 0 { 0 } else { macs / params },
        nonzero_fraction: if params == 0 { 0.0 } else { nonzero / params as f64 },
    })
}

fn bottleneck(name: &str, in_ch: usize, mid: usize, out: usize, stride: usize, in_size: usize, project: bool) -> BlockSpec {
    let out_size = (in_size - 1) / stride + 1;
    let mut a = LayerSpec::new(format!("{name}.a"), in_ch, mid, 1, stride, in_size);
    a.padding = 0;
    let b = LayerSpec::new(format!("{name}.b"), mid, mid, 3, 1, out_size);
    let c = LayerSpec::new(format!("{name}.c"), mid, out, 1, 1, out_size);
    let shortcut = project.then(|| {
        let mut p = LayerSpec::new(format!("{name}.proj"), in_ch, out, 1, stride, in_size);
        p.padding = 0;
        p
    });
    BlockSpec {
        name: name.to_owned(),
        layers: vec![a, b, c],
        shortcut,
    }
}

/// The 16 residual blocks conv2_1 .. conv5_3 of Resnet50 (224x224 input).
/// Downsampling blocks carry the stride on the entry 1x1 and the projection.
pub fn resnet50_blocks() -> Vec<BlockSpec> {
    const STAGES: [(usize, usize, usize, usize); 4] = [
        // (stage, blocks, mid channels, spatial size)
        (2, 3, 64, 56),
        (3, 4, 128, 28),
        (4, 6, 256, 14),
        (5, 3, 512, 7),
    ];
    let mut blocks = Vec::with_capacity(16);
    let mut in_ch = 64;
    let mut in_size = 56;
    for (stage, count, mid, size) in STAGES {
        let out = mid * 4;
        for k in 1..=count {
            let stride = if k == 1 && in_size != size { 2 } else { 1 };
            let project = k == 1;
            blocks.push(bottleneck(&format!("conv{stage}_{k}"), in_ch, mid, out, stride, in_size, project));
            in_ch = out;
            in_size = size;
        }
    }
    blocks
}

/// Generates a synthetic sparse INT7 model. Exactly `round(sparsity * len)`
/// weights of every tensor are zero; the rest are uniform over the 127
/// nonzero INT7 values. Scales are chosen so that typical accumulations land
/// inside the 8-bit output range.
pub fn generate_model(blocks: &[BlockSpec], sparsity: f64, seed: u64) -> Result<QuantModel> {
    if !(0.0..1.0).contains(&sparsity) || sparsity.is_nan() {
        return Err(Error::InvalidSparsity(sparsity));
    }
    for b in blocks {
        b.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    let mut scale_bias = Vec::new();
    for spec in blocks.iter().flat_map(|b| b.all_layers()) {
        let (t, sb) = layer_weights(spec, sparsity, &mut rng)?;
        tensors.push(t);
        scale_bias.push(sb);
    }
    let mut model = QuantModel::new(blocks.to_vec(), tensors, scale_bias)?;
    model.provenance = Some(Provenance::new(seed, &(sparsity.to_bits(), seed)));
    Ok(model)
}

/// Weights and scale/bias for a single layer, drawn like [`generate_model`]
/// does for each of its layers.
pub fn generate_layer(spec: &LayerSpec, sparsity: f64, seed: u64) -> Result<(QuantTensor, ScaleBias)> {
    if !(0.0..1.0).contains(&sparsity) || sparsity.is_nan() {
        return Err(Error::InvalidSparsity(sparsity));
    }
    spec.validate()?;
    layer_weights(spec, sparsity, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn layer_weights(spec: &LayerSpec, sparsity: f64, rng: &mut ChaCha8Rng) -> Result<(QuantTensor, ScaleBias)> {
    let shape = spec.weight_shape();
    let len: usize = shape.iter().product();
    let mut weights: Vec<i8> = (0..len)
        .map(|_| {
            let v = rng.gen_range(0..127i32) + INT7_MIN;
            (if v >= 0 { v + 1 } else { v }) as i8
        })
        .collect();
    let zeros = (sparsity * len as f64).round() as usize;
    for idx in sample(rng, len, zeros.min(len)) {
        weights[idx] = 0;
    }
    let tensor = QuantTensor { shape, weights };

    // Accumulation spread: sqrt(fan-in) * rms(weight) * rms(activation).
    let fan_in = ((spec.in_channels * spec.filter_area()) as f64 * (1.0 - sparsity)).max(1.0);
    let target = 48.0 / (fan_in.sqrt() * 37.0 * 147.0);
    let mut scale = Vec::with_capacity(spec.out_channels);
    let mut bias = Vec::with_capacity(spec.out_channels);
    for _ in 0..spec.out_channels {
        let s = target * rng.gen_range(0.75..1.25);
        scale.push(FixedScale::from_f64(s)?);
        let span = (16.0 / s).round() as i32;
        bias.push(rng.gen_range(-span..=span));
    }
    Ok((tensor, ScaleBias { scale, bias }))
}

#[derive(Serialize, Deserialize)]
struct ManifestLayer {
    name: String,
    scale: Vec<FixedScale>,
    bias: Vec<i32>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
    activation_bits: u32,
    blob: String,
    blob_len: usize,
    blocks: Vec<BlockSpec>,
    layers: Vec<ManifestLayer>,
}

/// Writes `manifest.json` and `weights.bin` into `dir` (created if absent).
pub fn save_model(model: &QuantModel, dir: &Path) -> Result<()> {
    model.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob: Vec<u8> = model
        .tensors
        .iter()
        .flat_map(|t| t.weights.iter().map(|&w| w as u8))
        .collect();
    let manifest = Manifest {
        format: MODEL_FORMAT.to_owned(),
        version: MODEL_VERSION,
        provenance: model.provenance.clone(),
        activation_bits: model.activation_bits,
        blob: BLOB_FILE.to_owned(),
        blob_len: blob.len(),
        blocks: model.blocks.clone(),
        layers: model
            .layer_specs()
            .zip(&model.scale_bias)
            .map(|(l, sb)| ManifestLayer {
                name: l.name.clone(),
                scale: sb.scale.clone(),
                bias: sb.bias.clone(),
            })
            .collect(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)
}

pub fn load_model(dir: &Path) -> Result<QuantModel> {
    let raw = read(&dir.join(MANIFEST_FILE))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| Error::Manifest(e.to_string()))?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::Manifest(format!("unknown format `{}`", manifest.format)));
    }
    if manifest.version != MODEL_VERSION {
        return Err(Error::Manifest(format!("unsupported version {}", manifest.version)));
    }
    let specs: Vec<&LayerSpec> = manifest.blocks.iter().flat_map(|b| b.all_layers()).collect();
    if specs.len() != manifest.layers.len() {
        return Err(Error::Manifest(format!(
            "{} layers in blocks but {} scale/bias entries",
            specs.len(),
            manifest.layers.len()
        )));
    }
    let expected: usize = specs.iter().map(|l| l.param_count()).sum();
    if manifest.blob_len != expected {
        return Err(Error::Manifest(format!(
            "blob_len {} disagrees with layer shapes ({expected})",
            manifest.blob_len
        )));
    }
    let blob = read(&dir.join(&manifest.blob))?;
    if blob.len() != expected {
        return Err(Error::BlobLength {
            expected,
            found: blob.len(),
        });
    }
    let mut tensors = Vec::with_capacity(specs.len());
    let mut offset = 0;
    for (spec, entry) in specs.iter().zip(&manifest.layers) {
        if entry.name != spec.name {
            return Err(Error::Manifest(format!(
                "scale/bias entry `{}` out of order (expected `{}`)",
                entry.name, spec.name
            )));
        }
        let len = spec.param_count();
        let weights = blob[offset..offset + len].iter().map(|&b| b as i8).collect();
        offset += len;
        tensors.push(QuantTensor::new(spec.weight_shape(), weights)?);
    }
    let scale_bias = manifest
        .layers
        .into_iter()
        .map(|l| ScaleBias {
            scale: l.scale,
            bias: l.bias,
        })
        .collect();
    let mut model = QuantModel {
        blocks: manifest.blocks,
        tensors,
        scale_bias,
        activation_bits: manifest.activation_bits,
        provenance: manifest.provenance,
    };
    model
        .validate()
        .map_err(|e| Error::Manifest(e.to_string()))?;
    if model.activation_bits == 0 {
        model.activation_bits = DEFAULT_ACTIVATION_BITS;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block<'a>(blocks: &'a [BlockSpec], name: &str) -> &'a BlockSpec {
        blocks.iter().find(|b| b.name == name).unwrap()
    }

    #[test]
    fn resnet50_has_sixteen_valid_blocks() {
        let blocks = resnet50_blocks();
        assert_eq!(blocks.len(), 16);
        for b in &blocks {
            b.validate().unwrap();
        }
        let proj: Vec<_> = blocks.iter().filter(|b| b.shortcut.is_some()).map(|b| b.name.as_str()).collect();
        assert_eq!(proj, ["conv2_1", "conv3_1", "conv4_1", "conv5_1"]);
    }

    #[test]
    fn conv2_2_shapes() {
        let blocks = resnet50_blocks();
        let b = block(&blocks, "conv2_2");
        let dims: Vec<_> = b
            .layers
            .iter()
            .map(|l| (l.in_channels, l.out_channels, l.filter_h, l.padding, l.in_height))
            .collect();
        assert_eq!(dims, [(256, 64, 1, 0, 56), (64, 64, 3, 1, 56), (64, 256, 1, 0, 56)]);
        assert!(b.shortcut.is_none());
    }

    #[test]
    fn conv5_2_and_conv3_1_shapes() {
        let blocks = resnet50_blocks();
        let b = block(&blocks, "conv5_2");
        let dims: Vec<_> = b.layers.iter().map(|l| (l.in_channels, l.out_channels, l.in_height)).collect();
        assert_eq!(dims, [(2048, 512, 7), (512, 512, 7), (512, 2048, 7)]);
        let c = block(&blocks, "conv3_1");
        assert_eq!(c.layers[0].stride, 2);
        assert_eq!(c.layers[0].in_height, 56);
        assert_eq!(c.layers[0].out_height(), 28);
        let p = c.shortcut.as_ref().unwrap();
        assert_eq!((p.in_channels, p.out_channels, p.stride), (256, 512, 2));
    }

    #[test]
    fn single_weight_stats() {
        let mut l = LayerSpec::new("t", 1, 1, 1, 1, 4);
        l.padding = 0;
        let s = layer_stats(&l, None).unwrap();
        assert_eq!((s.param_count, s.mac_count), (1, 16));
        assert_eq!(s.nonzero_fraction, 1.0);
    }

    #[test]
    fn stats_reject_mismatched_tensor() {
        let l = LayerSpec::new("t", 2, 3, 1, 1, 4);
        let t = QuantTensor::zeros([3, 3, 1, 1]);
        assert!(matches!(layer_stats(&l, Some(&t)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn macs_per_param_is_out_positions() {
        for b in resnet50_blocks() {
            for l in b.all_layers() {
                let s = layer_stats(l, None).unwrap();
                assert_eq!(s.macs_per_param, (l.out_height() * l.out_width()) as u64);
            }
        }
    }

    #[test]
    fn fixed_scale_import() {
        let s = FixedScale::from_f64(0.5).unwrap();
        assert_eq!(s.to_f64(), 0.5);
        assert!(s.mantissa >= 1 << 15 && s.mantissa < 1 << 16);
        let s = FixedScale::from_f64(1.0 / 3.0).unwrap();
        assert!((s.to_f64() - 1.0 / 3.0).abs() < 1e-5);
        assert_eq!(FixedScale::new(1, -1).unwrap().apply(128), 64);
        assert_eq!(FixedScale::new(1, -1).unwrap().apply(3), 2);
        assert_eq!(FixedScale::new(1, -1).unwrap().apply(5), 2);
        assert!(FixedScale::new(0, 0).is_err());
    }

    #[test]
    fn generation_sparsity_and_determinism() {
        let blocks = resnet50_blocks();
        let b = vec![block(&blocks, "conv2_2").clone()];
        let m = generate_model(&b, 0.8, 7).unwrap();
        for t in &m.tensors {
            let z = t.zero_fraction();
            assert!((0.79..=0.81).contains(&z), "zero fraction {z}");
        }
        assert_eq!(m, generate_model(&b, 0.8, 7).unwrap());
        assert_ne!(m.tensors, generate_model(&b, 0.8, 8).unwrap().tensors);
        let dense = generate_model(&b, 0.0, 7).unwrap();
        assert!(dense.tensors.iter().all(|t| t.nonzero_count() == t.weights.len()));
        assert!(m.scale_bias.iter().all(|sb| sb.scale.iter().all(|s| s.mantissa > 0)));
    }

    #[test]
    fn generation_rejects_bad_sparsity() {
        let b = resnet50_blocks()[..1].to_vec();
        assert!(generate_model(&b, 1.0, 0).is_err());
        assert!(generate_model(&b, -0.1, 0).is_err());
        assert!(generate_model(&b, f64::NAN, 0).is_err());
    }

    #[test]
    fn resolve_block_to_widest_layer() {
        let b = resnet50_blocks()[1..2].to_vec();
        let m = generate_model(&b, 0.8, 1).unwrap();
        assert_eq!(m.resolve_layer("conv2_2").unwrap().name, "conv2_2.b");
        assert_eq!(m.resolve_layer("conv2_2.c").unwrap().name, "conv2_2.c");
        assert!(m.resolve_layer("conv9_9").is_err());
    }

    fn small_model() -> QuantModel {
        let b = BlockSpec {
            name: "blk".into(),
            layers: vec![
                {
                    let mut l = LayerSpec::new("blk.a", 4, 2, 1, 1, 3);
                    l.padding = 0;
                    l
                },
                LayerSpec::new("blk.b", 2, 2, 3, 1, 3),
                {
                    let mut l = LayerSpec::new("blk.c", 2, 4, 1, 1, 3);
                    l.padding = 0;
                    l
                },
            ],
            shortcut: None,
        };
        generate_model(&[b], 0.5, 3).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_model();
        save_model(&m, dir.path()).unwrap();
        assert_eq!(load_model(dir.path()).unwrap(), m);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&small_model(), dir.path()).unwrap();
        let path = dir.path().join(BLOB_FILE);
        let mut blob = std::fs::read(&path).unwrap();
        blob.pop();
        std::fs::write(&path, blob).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(err.to_string().contains("blob length mismatch"), "{err}");
    }

    #[test]
    fn out_of_range_weight_byte_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&small_model(), dir.path()).unwrap();
        let path = dir.path().join(BLOB_FILE);
        let mut blob = std::fs::read(&path).unwrap();
        blob[0] = 70;
        std::fs::write(&path, blob).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(err.to_string().contains("INT7 range"), "{err}");
    }

    #[test]
    fn malformed_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&small_model(), dir.path()).unwrap();
        std::fs::write(dir.path().join(MANIFEST_FILE), b"{\"format\": 3}").unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Manifest(_))));
    }
}
