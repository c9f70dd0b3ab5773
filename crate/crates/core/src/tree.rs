//! Per-output bit-serial adder trees.
//!
//! Every clock the tree adds one bit from each of its input streams. The
//! first stage packs inputs twelve at a time into compressor units (two 6:3
//! blocks and a 3-bit adder giving a 4-bit count), later stages are ordinary parallel adders, and the shift-right
//! accumulator (SRA) rebuilds the full-width sum from the per-clock counts.
//!
//! Negative taps are fed as bitwise-inverted words. Over a `W`-bit word an
//! inverted value contributes `2^W - 1 - v`, i.e. `-v - 1` modulo `2^W`, so
//! adding the number of negative taps back (the bias correction) and reading
//! the result as a `W`-bit two's-complement number yields the signed sum.

use serde::{Deserialize, Serialize};

use crate::cfmm::Sign;
use crate::error::{Error, Result};
use crate::util::bits_for;

pub const COMPRESSOR_FAN_IN: usize = 12;
/// Largest activation value streamed into a kernel.
pub const ACTIVATION_MAX: u64 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TapSource {
    /// CFMM block index within the kernel.
    pub block: usize,
    pub odd: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tap {
    pub source: TapSource,
    pub shift: u32,
    pub sign: Sign,
    /// `(dy, dx)` within the filter window.
    pub filter_pos: (usize, usize),
}

impl Tap {
    pub fn magnitude(&self) -> u64 {
        (self.source.odd as u64) << self.shift
    }

    pub fn weight(&self) -> i64 {
        self.sign.apply(self.magnitude() as i64)
    }
}

/// One tree input. Unfolded trees have a single phase; folded trees select
/// a tap (or nothing) per fold phase through a mux.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeInput {
    pub phases: Vec<Option<Tap>>,
}

impl TreeInput {
    pub fn direct(tap: Tap) -> Self {
        TreeInput { phases: vec![Some(tap)] }
    }

    pub fn is_muxed(&self) -> bool {
        self.phases.len() > 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreePolicy {
    /// A register level is inserted after every `pipeline_every` stages.
    pub pipeline_every: usize,
}

impl Default for TreePolicy {
    fn default() -> Self {
        TreePolicy { pipeline_every: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SraSpec {
    pub word_clocks: u32,
    pub accumulator_width: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub ofm_index: usize,
    pub inputs: Vec<TreeInput>,
    /// Sizes of the stage-0 compressor groups, in input order. Empty for a
    /// single-input passthrough tree.
    pub stage0_groups: Vec<usize>,
    pub pipeline_every: usize,
    pub neg_count: u32,
    pub sra: SraSpec,
}

/// Counts the set bits of six inputs with the carry-save structure of a 6:3
/// reduction block: `A+B+C+D` becomes one sum bit and two weight-2 carries,
/// `E+F` is a plain half add, and the weight-2 column is then reduced.
pub fn compress6_3(bits: [bool; 6]) -> u8 {
    let [a, b, c, d, e, f] = bits;
    let s1 = a ^ b ^ c;
    let c1 = (a & b) | (a & c) | (b & c);
    let s = s1 ^ d;
    let c2 = s1 & d;
    let ef_sum = e ^ f;
    let ef_carry = e & f;
    let bit0 = s ^ ef_sum;
    let k0 = s & ef_sum;
    let t = c1 ^ c2 ^ ef_carry;
    let u = (c1 & c2) | (c1 & ef_carry) | (c2 & ef_carry);
    let bit1 = t ^ k0;
    let v = t & k0;
    let bit2 = u ^ v;
    bit0 as u8 | (bit1 as u8) << 1 | (bit2 as u8) << 2
}

fn full_add(a: bool, b: bool, c: bool) -> (bool, bool) {
    (a ^ b ^ c, (a & b) | (a & c) | (b & c))
}

/// Two 6:3 blocks followed by a 3-bit ripple adder: the popcount of 12 bits.
pub fn reduce12(bits: [bool; 12]) -> u8 {
    let lo = compress6_3(bits[..6].try_into().expect("six bits"));
    let hi = compress6_3(bits[6..].try_into().expect("six bits"));
    let mut carry = false;
    let mut out = 0u8;
    for k in 0..3 {
        let (s, c) = full_add(lo >> k & 1 == 1, hi >> k & 1 == 1, carry);
        out |= (s as u8) << k;
        carry = c;
    }
    out | (carry as u8) << 3
}

/// Bitwise inversion of `value` over `width` bits.
pub fn encode_negative(value: u64, width: u32) -> u64 {
    !value & mask(width)
}

fn mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

/// Constant the collector adds to undo the one's-complement deficit.
pub fn bias_correction(tree: &TreeSpec) -> i64 {
    tree.neg_count as i64
}

/// Adds the correction to a raw SRA value and reads the low `width` bits
/// as two's complement.
pub fn apply_correction(raw: u128, neg_count: u64, width: u32) -> i64 {
    let m = (1u128 << width) - 1;
    let v = (raw + neg_count as u128) & m;
    if v >> (width - 1) & 1 == 1 {
        (v as i128 - (1i128 << width)) as i64
    } else {
        v as i64
    }
}

/// Reconstructs `sum_n S_n * 2^n` from the per-clock tree outputs, LSB
/// first. Fails when the sum does not fit the accumulator.
pub fn sra_finalize(spec: &SraSpec, stage_sums: &[u64]) -> Result<u128> {
    if stage_sums.len() > spec.word_clocks as usize {
        return Err(Error::AccumulatorOverflow {
            width: spec.accumulator_width,
        });
    }
    let mut acc: u128 = 0;
    for (n, &s) in stage_sums.iter().enumerate() {
        acc += (s as u128) << n;
    }
    if spec.accumulator_width < 128 && acc >> spec.accumulator_width != 0 {
        return Err(Error::AccumulatorOverflow {
            width: spec.accumulator_width,
        });
    }
    Ok(acc)
}

/// Serial word length that keeps the signed sum of `taps` products of
/// 8-bit activations clear of modular wrap: magnitude bits of
/// `max|tap| * 255 * taps`, plus a sign bit.
pub fn word_bits(max_tap: u64, taps: u64) -> u32 {
    bits_for(max_tap.max(1) * ACTIVATION_MAX * taps.max(1)) + 1
}

pub fn build_tree(ofm_index: usize, inputs: Vec<TreeInput>, policy: TreePolicy) -> Result<TreeSpec> {
    if inputs.is_empty() {
        return Err(Error::EmptyTaps);
    }
    if policy.pipeline_every == 0 {
        return Err(Error::Config("pipeline_every must be >= 1".into()));
    }
    let phases = inputs.iter().map(|i| i.phases.len()).max().unwrap_or(1);
    let taps: Vec<&Tap> = inputs.iter().flat_map(|i| i.phases.iter().flatten()).collect();
    let neg_count = taps.iter().filter(|t| t.sign == Sign::Neg).count() as u32;
    let max_tap = taps.iter().map(|t| t.magnitude()).max().unwrap_or(1);
    let word_clocks = word_bits(max_tap, taps.len() as u64);
    let accumulator_width = word_clocks + bits_for((inputs.len() * phases) as u64);
    let n = inputs.len();
    let stage0_groups = if n == 1 {
        Vec::new()
    } else {
        (0..n)
            .step_by(COMPRESSOR_FAN_IN)
            .map(|start| COMPRESSOR_FAN_IN.min(n - start))
            .collect()
    };
    Ok(TreeSpec {
        ofm_index,
        inputs,
        stage0_groups,
        pipeline_every: policy.pipeline_every,
        neg_count,
        sra: SraSpec {
            word_clocks,
            accumulator_width,
        },
    })
}

impl TreeSpec {
    pub fn phases(&self) -> usize {
        self.inputs.iter().map(|i| i.phases.len()).max().unwrap_or(1)
    }

    pub fn tap_count(&self) -> usize {
        self.inputs.iter().map(|i| i.phases.iter().flatten().count()).sum()
    }

    pub fn compressor_count(&self) -> usize {
        self.stage0_groups.len()
    }

    /// Maximum value of every operand at each level: level 0 holds the
    /// stage-0 group counts, each later level adds neighbours pairwise
    /// (an odd value out passes through).
    pub fn levels(&self) -> Vec<Vec<u64>> {
        if self.stage0_groups.is_empty() {
            return vec![vec![1]];
        }
        let mut levels = vec![self.stage0_groups.iter().map(|&g| g as u64).collect::<Vec<_>>()];
        while levels.last().expect("non-empty").len() > 1 {
            let prev = levels.last().expect("non-empty");
            let next = prev.chunks(2).map(|c| c.iter().sum()).collect();
            levels.push(next);
        }
        levels
    }

    /// Number of adder stages (compressor stage included).
    pub fn depth(&self) -> usize {
        if self.stage0_groups.is_empty() {
            0
        } else {
            self.levels().len()
        }
    }

    /// Levels followed by a pipeline register.
    pub fn register_levels(&self) -> Vec<usize> {
        (0..self.depth())
            .filter(|l| (l + 1) % self.pipeline_every == 0)
            .collect()
    }

    /// One clock of the tree: the exact count of set input bits, computed
    /// through the compressor and adder structure.
    pub fn clock(&self, bits: &[bool]) -> u64 {
        debug_assert_eq!(bits.len(), self.inputs.len());
        if self.stage0_groups.is_empty() {
            return bits[0] as u64;
        }
        let mut values: Vec<u64> = bits
            .chunks(COMPRESSOR_FAN_IN)
            .map(|g| {
                let mut twelve = [false; 12];
                twelve[..g.len()].copy_from_slice(g);
                reduce12(twelve) as u64
            })
            .collect();
        while values.len() > 1 {
            values = values.chunks(2).map(|c| c.iter().sum()).collect();
        }
        values[0]
    }

    /// Signed result of the tree for the given tap products. `product`
    /// returns the unsigned CFMM output `odd * x` feeding a tap in a phase;
    /// the tree applies shift, inversion, compression, SRA and correction.
    pub fn evaluate(&self, mut product: impl FnMut(usize, &Tap) -> u64) -> Result<i64> {
        let w = self.sra.word_clocks;
        let mut raw: u128 = 0;
        for phase in 0..self.phases() {
            let words: Vec<u64> = self
                .inputs
                .iter()
                .map(|input| match input.phases.get(phase).copied().flatten() {
                    None => 0,
                    Some(tap) => {
                        let v = (product(phase, &tap) << tap.shift) & mask(w);
                        match tap.sign {
                            Sign::Pos => v,
                            Sign::Neg => encode_negative(v, w),
                        }
                    }
                })
                .collect();
            let sums: Vec<u64> = (0..w)
                .map(|n| {
                    let bits: Vec<bool> = words.iter().map(|word| word >> n & 1 == 1).collect();
                    self.clock(&bits)
                })
                .collect();
            raw += sra_finalize(&self.sra, &sums)?;
        }
        if self.sra.accumulator_width < 128 && raw >> self.sra.accumulator_width != 0 {
            return Err(Error::AccumulatorOverflow {
                width: self.sra.accumulator_width,
            });
        }
        Ok(apply_correction(raw, self.neg_count as u64, w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfmm::Sign::{Neg, Pos};

    fn tap(odd: u32, shift: u32, sign: Sign) -> Tap {
        Tap {
            source: TapSource { block: 0, odd },
            shift,
            sign,
            filter_pos: (0, 0),
        }
    }

    fn bits6(m: u32) -> [bool; 6] {
        std::array::from_fn(|k| m >> k & 1 == 1)
    }

    #[test]
    fn compressor_examples() {
        assert_eq!(compress6_3([true; 6]), 6);
        assert_eq!(compress6_3([true, true, true, true, false, false]), 4);
        assert_eq!(compress6_3([false; 6]), 0);
    }

    #[test]
    fn compressor_is_popcount() {
        for m in 0..64u32 {
            assert_eq!(compress6_3(bits6(m)) as u32, m.count_ones(), "{m:06b}");
        }
    }

    #[test]
    fn reduce12_is_popcount() {
        for m in 0..4096u32 {
            let bits = std::array::from_fn(|k| m >> k & 1 == 1);
            assert_eq!(reduce12(bits) as u32, m.count_ones());
        }
        assert_eq!(reduce12([true; 12]), 12);
    }

    #[test]
    fn negative_encoding() {
        assert_eq!(encode_negative(3, 8), 252);
        assert_eq!(encode_negative(0, 8), 255);
        let raw = (5 + encode_negative(3, 8)) as u128 % 256;
        assert_eq!(raw, 1);
        assert_eq!(apply_correction(raw, 1, 8), 2);
        assert_eq!(apply_correction(encode_negative(0, 8) as u128, 1, 8), 0);
    }

    #[test]
    fn correction_counts_negative_taps() {
        let signs = [Pos, Neg, Neg, Pos, Neg];
        let inputs = signs.iter().map(|&s| TreeInput::direct(tap(3, 0, s))).collect();
        let tree = build_tree(0, inputs, TreePolicy::default()).unwrap();
        assert_eq!(bias_correction(&tree), 3);
        let none = build_tree(0, vec![TreeInput::direct(tap(3, 0, Pos))], TreePolicy::default()).unwrap();
        assert_eq!(bias_correction(&none), 0);
    }

    #[test]
    fn sra_examples() {
        let spec = SraSpec { word_clocks: 3, accumulator_width: 5 };
        assert_eq!(sra_finalize(&spec, &[2, 1, 1]).unwrap(), 8);
        let narrow = SraSpec { word_clocks: 3, accumulator_width: 3 };
        assert!(matches!(sra_finalize(&narrow, &[2, 1, 1]), Err(Error::AccumulatorOverflow { .. })));
        assert!(sra_finalize(&spec, &[0, 0, 0, 1]).is_err());
        let single = SraSpec { word_clocks: 8, accumulator_width: 8 };
        let v = 0b1011_0110u64;
        let sums: Vec<u64> = (0..8).map(|n| v >> n & 1).collect();
        assert_eq!(sra_finalize(&single, &sums).unwrap(), v as u128);
    }

    #[test]
    fn tree_shapes() {
        let twelve = (0..12).map(|_| TreeInput::direct(tap(1, 0, Pos))).collect();
        let t = build_tree(0, twelve, TreePolicy::default()).unwrap();
        assert_eq!(t.stage0_groups, [12]);
        assert_eq!(t.levels(), vec![vec![12]]);
        assert_eq!(t.depth(), 1);
        assert!(t.register_levels().is_empty());

        let thirty = (0..30).map(|_| TreeInput::direct(tap(1, 0, Pos))).collect();
        let t = build_tree(0, thirty, TreePolicy::default()).unwrap();
        assert_eq!(t.stage0_groups, [12, 12, 6]);
        assert_eq!(t.levels(), vec![vec![12, 12, 6], vec![24, 6], vec![30]]);
        assert_eq!(t.register_levels(), [1]);

        let one = build_tree(0, vec![TreeInput::direct(tap(1, 0, Pos))], TreePolicy::default()).unwrap();
        assert!(one.stage0_groups.is_empty());
        assert_eq!(one.compressor_count(), 0);

        let many = (0..2304).map(|_| TreeInput::direct(tap(1, 0, Pos))).collect();
        let t = build_tree(0, many, TreePolicy::default()).unwrap();
        assert_eq!(t.compressor_count(), 192);
        assert!(t.stage0_groups.iter().all(|&g| g <= 12));
        assert_eq!(t.depth(), 1 + 8);

        assert!(matches!(build_tree(0, vec![], TreePolicy::default()), Err(Error::EmptyTaps)));
    }

    #[test]
    fn tree_clock_is_popcount() {
        let inputs = (0..17).map(|_| TreeInput::direct(tap(1, 0, Pos))).collect();
        let t = build_tree(0, inputs, TreePolicy::default()).unwrap();
        for m in [0u32, 1, 0x1ffff, 0x15555, 0x0f0f0] {
            let bits: Vec<bool> = (0..17).map(|k| m >> k & 1 == 1).collect();
            assert_eq!(t.clock(&bits), m.count_ones() as u64);
        }
    }

    #[test]
    fn evaluate_small_dot_product() {
        let inputs = vec![
            TreeInput::direct(tap(5, 0, Pos)),
            TreeInput::direct(tap(3, 0, Neg)),
        ];
        let t = build_tree(0, inputs, TreePolicy::default()).unwrap();
        // x = 1 on both streams: 5 - 3.
        assert_eq!(t.evaluate(|_, tap| tap.source.odd as u64).unwrap(), 2);
    }
}
