//! Integer reference pipeline: direct convolution, step accumulation and
//! the collector (bias, scale, shortcut add, ReLU, saturation).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockSpec, LayerSpec, QuantTensor, ScaleBias};

/// Unsigned 8-bit feature map, channel-major then row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ActivationMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ActivationMap {
            channels,
            height,
            width,
            data: vec![0; channels * height * width],
        }
    }

    pub fn from_bytes(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "feature map {channels}x{height}x{width} needs {} bytes, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(ActivationMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Value at a possibly out-of-bounds (padded) coordinate.
    #[inline]
    pub fn get_padded(&self, c: usize, y: isize, x: isize) -> i64 {
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            0
        } else {
            self.get(c, y as usize, x as usize) as i64
        }
    }

    pub fn check_input_of(&self, layer: &LayerSpec) -> Result<()> {
        if self.shape() != (layer.in_channels, layer.in_height, layer.in_width) {
            return Err(Error::ShapeMismatch(format!(
                "{}: input map {:?} vs layer input {:?}",
                layer.name,
                self.shape(),
                (layer.in_channels, layer.in_height, layer.in_width)
            )));
        }
        Ok(())
    }
}

/// Signed pre-collector sums per `(ofm, y, x)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accumulation {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<i64>,
}

impl Accumulation {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Accumulation {
            channels,
            height,
            width,
            data: vec![0; channels * height * width],
        }
    }

    pub fn for_layer(layer: &LayerSpec) -> Self {
        Self::zeros(layer.out_channels, layer.out_height(), layer.out_width())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> i64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn add(&mut self, c: usize, y: usize, x: usize, v: i64) {
        let i = self.index(c, y, x);
        self.data[i] += v;
    }

    /// First coordinate where `self` and `other` differ.
    pub fn first_mismatch(&self, other: &Accumulation) -> Option<(usize, usize, usize)> {
        if self.shape() != other.shape() {
            return Some((usize::MAX, usize::MAX, usize::MAX));
        }
        let i = self.data.iter().zip(&other.data).position(|(a, b)| a != b)?;
        let plane = self.height * self.width;
        Some((i / plane, i % plane / self.width, i % self.width))
    }

    /// Little-endian `i32` encoding, channel-major then row-major.
    pub fn to_le_i32_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            let v = i32::try_from(v)
                .map_err(|_| Error::ShapeMismatch(format!("accumulation {v} exceeds 32 bits")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }
}

fn check_layer(layer: &LayerSpec, tensor: &QuantTensor, ifm: &ActivationMap) -> Result<()> {
    layer.validate()?;
    tensor.check_matches(layer)?;
    ifm.check_input_of(layer)
}

/// Direct convolution with zero padding:
/// `out[o,y,x] = sum w[o,i,dy,dx] * in[i, y*s+dy-p, x*s+dx-p]`.
pub fn conv_ref(layer: &LayerSpec, tensor: &QuantTensor, ifm: &ActivationMap) -> Result<Accumulation> {
    check_layer(layer, tensor, ifm)?;
    let mut out = Accumulation::for_layer(layer);
    for dy in 0..layer.filter_h {
        for dx in 0..layer.filter_w {
            add_step(layer, tensor, ifm, (dy, dx), &mut out);
        }
    }
    Ok(out)
}

fn add_step(layer: &LayerSpec, tensor: &QuantTensor, ifm: &ActivationMap, (dy, dx): (usize, usize), out: &mut Accumulation) {
    let (s, p) = (layer.stride as isize, layer.padding as isize);
    for o in 0..layer.out_channels {
        for i in 0..layer.in_channels {
            let w = tensor.get(o, i, dy, dx) as i64;
            if w == 0 {
                continue;
            }
            for y in 0..out.height {
                let iy = y as isize * s + dy as isize - p;
                for x in 0..out.width {
                    let ix = x as isize * s + dx as isize - p;
                    out.add(o, y, x, w * ifm.get_padded(i, iy, ix));
                }
            }
        }
    }
}

/// Contribution of one filter position `(dy, dx)` to every output.
pub fn conv_step_ref(
    layer: &LayerSpec,
    tensor: &QuantTensor,
    ifm: &ActivationMap,
    offset: (usize, usize),
) -> Result<Accumulation> {
    check_layer(layer, tensor, ifm)?;
    if offset.0 >= layer.filter_h || offset.1 >= layer.filter_w {
        return Err(Error::ShapeMismatch(format!("step offset {offset:?} outside filter")));
    }
    let mut out = Accumulation::for_layer(layer);
    add_step(layer, tensor, ifm, offset, &mut out);
    Ok(out)
}

/// Sums per-step partial results. Each partial is tagged with the filter
/// offset that produced it; offsets must lie inside `filter`.
pub fn accumulate_steps(filter: (usize, usize), partials: &[((usize, usize), Accumulation)]) -> Result<Accumulation> {
    let Some((_, first)) = partials.first() else {
        return Err(Error::ShapeMismatch("no partial sums".into()));
    };
    let mut out = Accumulation::zeros(first.channels, first.height, first.width);
    for (offset, acc) in partials {
        if offset.0 >= filter.0 || offset.1 >= filter.1 {
            return Err(Error::ShapeMismatch(format!(
                "step offset {offset:?} outside {}x{} filter",
                filter.0, filter.1
            )));
        }
        if acc.shape() != out.shape() {
            return Err(Error::ShapeMismatch("partials differ in shape".into()));
        }
        for (o, v) in out.data.iter_mut().zip(&acc.data) {
            *o += v;
        }
    }
    Ok(out)
}

/// The collector: `acc + bias + correction`, fixed-point scaling with
/// round-half-even, optional shortcut add, then ReLU and saturation to 8
/// bits.
pub fn collect(
    acc: &Accumulation,
    scale_bias: &ScaleBias,
    neg_correction: &[i64],
    shortcut: Option<&ActivationMap>,
) -> Result<ActivationMap> {
    let c = acc.channels;
    if scale_bias.scale.len() != c || scale_bias.bias.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "scale/bias has {} channels, accumulation {c}",
            scale_bias.scale.len()
        )));
    }
    if !neg_correction.is_empty() && neg_correction.len() != c {
        return Err(Error::ShapeMismatch("correction length".into()));
    }
    if let Some(sc) = shortcut {
        if sc.shape() != acc.shape() {
            return Err(Error::ShapeMismatch(format!(
                "shortcut {:?} vs accumulation {:?}",
                sc.shape(),
                acc.shape()
            )));
        }
    }
    let mut out = ActivationMap::zeros(acc.channels, acc.height, acc.width);
    for (i, (&a, o)) in acc.data.iter().zip(out.data.iter_mut()).enumerate() {
        let ch = i / (acc.height * acc.width);
        let corr = neg_correction.get(ch).copied().unwrap_or(0);
        let mut v = scale_bias.scale[ch].apply(a + scale_bias.bias[ch] as i64 + corr);
        if let Some(sc) = shortcut {
            v += sc.data[i] as i64;
        }
        *o = v.clamp(0, 255) as u8;
    }
    Ok(out)
}

/// One residual block through the reference pipeline. `layers` holds the
/// tensor and scale/bias of every layer of `block.all_layers()`.
pub fn residual_block_ref(
    block: &BlockSpec,
    layers: &[(&QuantTensor, &ScaleBias)],
    ifm: &ActivationMap,
) -> Result<ActivationMap> {
    block.validate()?;
    let specs: Vec<&LayerSpec> = block.all_layers().collect();
    if specs.len() != layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} layers but {} tensors",
            block.name,
            specs.len(),
            layers.len()
        )));
    }
    let main = block.layers.len();
    let shortcut = match &block.shortcut {
        Some(proj) => {
            let (t, sb) = layers[main];
            let acc = conv_ref(proj, t, ifm)?;
            collect(&acc, sb, &[], None)?
        }
        None => ifm.clone(),
    };
    let mut x = ifm.clone();
    for (k, spec) in block.layers.iter().enumerate() {
        let (t, sb) = layers[k];
        let acc = conv_ref(spec, t, &x)?;
        let sc = (k + 1 == main).then_some(&shortcut);
        x = collect(&acc, sb, &[], sc)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FixedScale;
    use proptest::prelude::*;

    fn layer(cin: usize, cout: usize, f: usize, stride: usize, size: usize) -> LayerSpec {
        let mut l = LayerSpec::new("t", cin, cout, f, stride, size);
        if f == 1 {
            l.padding = 0;
        }
        l
    }

    fn naive(l: &LayerSpec, t: &QuantTensor, m: &ActivationMap) -> Vec<i64> {
        // Gather form, written independently of the step-major loop above.
        let mut out = vec![];
        for o in 0..l.out_channels {
            for y in 0..l.out_height() {
                for x in 0..l.out_width() {
                    let mut s = 0i64;
                    for i in 0..l.in_channels {
                        for dy in 0..l.filter_h {
                            for dx in 0..l.filter_w {
                                let iy = (y * l.stride + dy) as i64 - l.padding as i64;
                                let ix = (x * l.stride + dx) as i64 - l.padding as i64;
                                if iy >= 0 && ix >= 0 && (iy as usize) < l.in_height && (ix as usize) < l.in_width {
                                    s += t.weights[((o * l.in_channels + i) * l.filter_h + dy) * l.filter_w + dx] as i64
                                        * m.data[(i * l.in_height + iy as usize) * l.in_width + ix as usize] as i64;
                                }
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
        out
    }

    #[test]
    fn single_weight() {
        let l = layer(1, 1, 1, 1, 1);
        let t = QuantTensor::new([1, 1, 1, 1], vec![2]).unwrap();
        let m = ActivationMap::from_bytes(1, 1, 1, vec![3]).unwrap();
        assert_eq!(conv_ref(&l, &t, &m).unwrap().data, [6]);
    }

    #[test]
    fn window_counting() {
        let l = layer(1, 1, 3, 1, 5);
        let t = QuantTensor::new([1, 1, 3, 3], vec![1; 9]).unwrap();
        let m = ActivationMap::from_bytes(1, 5, 5, vec![1; 25]).unwrap();
        let acc = conv_ref(&l, &t, &m).unwrap();
        assert_eq!(acc.get(0, 2, 2), 9);
        assert_eq!(acc.get(0, 0, 0), 4);
        assert_eq!(acc.get(0, 0, 2), 6);
    }

    #[test]
    fn stride_two_subsamples() {
        let l = layer(1, 1, 1, 2, 4);
        let t = QuantTensor::new([1, 1, 1, 1], vec![3]).unwrap();
        let m = ActivationMap::from_bytes(1, 4, 4, (0..16).collect()).unwrap();
        let acc = conv_ref(&l, &t, &m).unwrap();
        assert_eq!(acc.shape(), (1, 2, 2));
        assert_eq!(acc.data, [0, 6, 24, 30]);
    }

    #[test]
    fn shape_mismatch() {
        let l = layer(2, 1, 1, 1, 3);
        let t = QuantTensor::zeros([1, 2, 1, 1]);
        let m = ActivationMap::zeros(3, 3, 3);
        assert!(matches!(conv_ref(&l, &t, &m), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn collector_examples() {
        let acc = |v| Accumulation { channels: 1, height: 1, width: 1, data: vec![v] };
        let half = ScaleBias { scale: vec![FixedScale::new(1, -1).unwrap()], bias: vec![28] };
        assert_eq!(collect(&acc(100), &half, &[], None).unwrap().data, [64]);
        let unit = ScaleBias::unit(1);
        assert_eq!(collect(&acc(1000), &unit, &[], None).unwrap().data, [255]);
        assert_eq!(collect(&acc(-50), &unit, &[], None).unwrap().data, [0]);
        assert_eq!(collect(&acc(-50), &unit, &[2], None).unwrap().data, [0]);
        assert_eq!(collect(&acc(10), &unit, &[2], None).unwrap().data, [12]);
        let sc = ActivationMap::from_bytes(1, 1, 1, vec![100]).unwrap();
        assert_eq!(collect(&acc(-50), &unit, &[], Some(&sc)).unwrap().data, [50]);
    }

    #[test]
    fn nine_steps_equal_one_shot() {
        let l = layer(3, 2, 3, 1, 5);
        let t = QuantTensor::new([2, 3, 3, 3], (0..54).map(|k| (k % 13) as i8 - 6).collect()).unwrap();
        let m = ActivationMap::from_bytes(3, 5, 5, (0..75).map(|k| (k * 37 % 256) as u8).collect()).unwrap();
        let partials: Vec<_> = (0..3)
            .flat_map(|dy| (0..3).map(move |dx| (dy, dx)))
            .map(|off| (off, conv_step_ref(&l, &t, &m, off).unwrap()))
            .collect();
        assert_eq!(accumulate_steps((3, 3), &partials).unwrap(), conv_ref(&l, &t, &m).unwrap());
        assert_eq!(accumulate_steps((3, 3), &partials[..1]).unwrap(), partials[0].1);
        assert!(accumulate_steps((1, 1), &partials[1..2]).is_err());
    }

    fn tiny_block(project: bool) -> BlockSpec {
        let cin = if project { 2 } else { 4 };
        BlockSpec {
            name: "b".into(),
            layers: vec![layer(cin, 2, 1, 1, 2), layer(2, 2, 3, 1, 2), layer(2, 4, 1, 1, 2)],
            shortcut: project.then(|| layer(cin, 4, 1, 1, 2)),
        }
    }

    #[test]
    fn zero_block_passes_shortcut() {
        let b = tiny_block(false);
        let tensors: Vec<_> = b.all_layers().map(|l| QuantTensor::zeros(l.weight_shape())).collect();
        let sbs: Vec<_> = b.all_layers().map(|l| ScaleBias::unit(l.out_channels)).collect();
        let layers: Vec<_> = tensors.iter().zip(&sbs).collect();
        let ifm = ActivationMap::from_bytes(4, 2, 2, (0..16).map(|k| k * 9).collect()).unwrap();
        assert_eq!(residual_block_ref(&b, &layers, &ifm).unwrap(), ifm);
    }

    #[test]
    fn identity_chain_by_hand() {
        // a: 4->2 picks channels 0,1; b: centre tap identity; c: 2->4 copies
        // into channels 0,1. Output = ifm + [x0, x1, 0, 0], saturated.
        let b = tiny_block(false);
        let mut ta = QuantTensor::zeros([2, 4, 1, 1]);
        ta.set(0, 0, 0, 0, 1).unwrap();
        ta.set(1, 1, 0, 0, 1).unwrap();
        let mut tb = QuantTensor::zeros([2, 2, 3, 3]);
        tb.set(0, 0, 1, 1, 1).unwrap();
        tb.set(1, 1, 1, 1, 1).unwrap();
        let mut tc = QuantTensor::zeros([4, 2, 1, 1]);
        tc.set(0, 0, 0, 0, 1).unwrap();
        tc.set(1, 1, 0, 0, 1).unwrap();
        let sbs: Vec<_> = [2, 2, 4].iter().map(|&c| ScaleBias::unit(c)).collect();
        let layers = [(&ta, &sbs[0]), (&tb, &sbs[1]), (&tc, &sbs[2])];
        let ifm = ActivationMap::from_bytes(4, 2, 2, vec![1, 2, 3, 4, 10, 20, 30, 40, 5, 5, 5, 5, 200, 200, 200, 200]).unwrap();
        let out = residual_block_ref(&b, &layers, &ifm).unwrap();
        assert_eq!(out.data, [2, 4, 6, 8, 20, 40, 60, 80, 5, 5, 5, 5, 200, 200, 200, 200]);
    }

    #[test]
    fn projection_block_composes_per_layer_calls() {
        let b = tiny_block(true);
        let model = crate::model::generate_model(std::slice::from_ref(&b), 0.5, 11).unwrap();
        let layers: Vec<_> = model.tensors.iter().zip(&model.scale_bias).collect();
        let ifm = ActivationMap::from_bytes(2, 2, 2, vec![10, 200, 30, 40, 0, 255, 7, 8]).unwrap();
        let out = residual_block_ref(&b, &layers, &ifm).unwrap();
        let specs: Vec<_> = b.all_layers().collect();
        let sc = collect(&conv_ref(specs[3], layers[3].0, &ifm).unwrap(), layers[3].1, &[], None).unwrap();
        let mut x = ifm.clone();
        for k in 0..3 {
            let acc = conv_ref(specs[k], layers[k].0, &x).unwrap();
            x = collect(&acc, layers[k].1, &[], (k == 2).then_some(&sc)).unwrap();
        }
        assert_eq!(out, x);
    }

    proptest! {
        #[test]
        fn conv_matches_naive(
            cin in 1usize..4, cout in 1usize..4, f in prop::sample::select(vec![1usize, 3]),
            stride in 1usize..3, size in 3usize..7, seed in any::<u64>(),
        ) {
            let l = layer(cin, cout, f, stride, size);
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 33) as i64 };
            let t = QuantTensor::new(l.weight_shape(), (0..l.param_count()).map(|_| (next() % 128 - 64) as i8).collect()).unwrap();
            let m = ActivationMap::from_bytes(cin, size, size, (0..cin * size * size).map(|_| (next() % 256) as u8).collect()).unwrap();
            prop_assert_eq!(conv_ref(&l, &t, &m).unwrap().data, naive(&l, &t, &m));
        }

        #[test]
        fn conv_is_linear_in_input(a in 1u8..4, seed in any::<u64>()) {
            let l = layer(2, 2, 3, 1, 4);
            let t = QuantTensor::new(l.weight_shape(), (0..36).map(|k| (((seed >> (k % 60)) % 127) as i64 - 63) as i8).collect()).unwrap();
            let base: Vec<u8> = (0..32).map(|k| ((seed >> (k % 56)) % 64) as u8).collect();
            let m = ActivationMap::from_bytes(2, 4, 4, base.clone()).unwrap();
            let ma = ActivationMap::from_bytes(2, 4, 4, base.iter().map(|&v| v * a).collect()).unwrap();
            let r = conv_ref(&l, &t, &m).unwrap();
            let ra = conv_ref(&l, &t, &ma).unwrap();
            prop_assert!(r.data.iter().zip(&ra.data).all(|(x, y)| x * a as i64 == *y));
        }

        #[test]
        fn collect_is_monotone(a in -100_000i64..100_000, d in 0i64..1000, m in 1i32..65536, e in -20i32..2) {
            let sb = ScaleBias { scale: vec![FixedScale::new(m, e).unwrap()], bias: vec![0] };
            let acc = |v| Accumulation { channels: 1, height: 1, width: 1, data: vec![v] };
            let lo = collect(&acc(a), &sb, &[], None).unwrap().data[0];
            let hi = collect(&acc(a + d), &sb, &[], None).unwrap().data[0];
            prop_assert!(lo <= hi);
        }
    }
}
