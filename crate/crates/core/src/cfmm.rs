//! Common factor mass multiplication.
//!
//! Every nonzero INT7 weight is split into a sign, an odd factor and a left
//! shift. The sign moves into the adder tree, the shift is a delay on the
//! serial stream, so one input stream only needs the 31 odd multiples
//! `3x, 5x, .., 63x` (`1x` is the stream itself). A [`McmPlan`] produces the
//! required odd multiples with one serial add or subtract each.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{INT7_MAX, INT7_MIN};

/// Largest odd factor of an INT7 magnitude.
pub const MAX_ODD: u32 = 63;
const MAX_STEP_SHIFT: u32 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Pos,
    Neg,
}

impl Sign {
    pub fn apply(self, v: i64) -> i64 {
        match self {
            Sign::Pos => v,
            Sign::Neg => -v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightDecomp {
    Zero,
    Tap { sign: Sign, odd: u32, shift: u32 },
}

impl WeightDecomp {
    pub fn value(self) -> i32 {
        match self {
            WeightDecomp::Zero => 0,
            WeightDecomp::Tap { sign, odd, shift } => sign.apply((odd << shift) as i64) as i32,
        }
    }
}

pub fn decompose(weight: i32) -> Result<WeightDecomp> {
    if !(INT7_MIN..=INT7_MAX).contains(&weight) {
        return Err(Error::Int7Range(weight));
    }
    if weight == 0 {
        return Ok(WeightDecomp::Zero);
    }
    let sign = if weight < 0 { Sign::Neg } else { Sign::Pos };
    let mag = weight.unsigned_abs();
    let shift = mag.trailing_zeros();
    Ok(WeightDecomp::Tap {
        sign,
        odd: mag >> shift,
        shift,
    })
}

/// Odd factors (other than 1) needed to realise `weights`.
pub fn required_odds<I>(weights: I) -> Result<BTreeSet<u32>>
where
    I: IntoIterator<Item = i32>,
{
    let mut odds = BTreeSet::new();
    for w in weights {
        if let WeightDecomp::Tap { odd, .. } = decompose(w)? {
            if odd != 1 {
                odds.insert(odd);
            }
        }
    }
    Ok(odds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRef {
    /// The input stream itself (odd value 1).
    Input,
    /// Output of an earlier step, by index.
    Step(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Operand {
    pub node: NodeRef,
    pub shift: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AddSub {
    Add,
    Sub,
}

/// `target = (a << a.shift) op (b << b.shift)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McmStep {
    pub target: u32,
    pub a: Operand,
    pub b: Operand,
    pub op: AddSub,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct McmPlan {
    pub steps: Vec<McmStep>,
}

impl McmPlan {
    pub fn targets(&self) -> impl Iterator<Item = u32> + '_ {
        self.steps.iter().map(|s| s.target)
    }

    /// Value of every node for input `x`, checking that each step's sources
    /// precede it.
    pub fn evaluate(&self, x: i64) -> Result<Vec<i64>> {
        let mut values: Vec<i64> = Vec::with_capacity(self.steps.len());
        let fetch = |values: &[i64], op: Operand, at: usize| -> Result<i64> {
            let v = match op.node {
                NodeRef::Input => x,
                NodeRef::Step(k) if k < at => values[k],
                NodeRef::Step(k) => {
                    return Err(Error::Config(format!("step {at} reads later step {k}")))
                }
            };
            Ok(v << op.shift)
        };
        for (i, s) in self.steps.iter().enumerate() {
            let a = fetch(&values, s.a, i)?;
            let b = fetch(&values, s.b, i)?;
            values.push(match s.op {
                AddSub::Add => a + b,
                AddSub::Sub => a - b,
            });
        }
        Ok(values)
    }

    /// Map from odd factor to its product with `x`, including `1 -> x`.
    pub fn products(&self, x: i64) -> Result<BTreeMap<u32, i64>> {
        let values = self.evaluate(x)?;
        let mut out = BTreeMap::from([(1, x)]);
        out.extend(self.targets().zip(values));
        Ok(out)
    }

    /// Checks every step against its declared target.
    pub fn verify(&self) -> Result<()> {
        let values = self.evaluate(1)?;
        let mut seen = BTreeSet::new();
        for (s, v) in self.steps.iter().zip(values) {
            if v != s.target as i64 || !seen.insert(s.target) {
                return Err(Error::Config(format!("step producing {} is unsound", s.target)));
            }
        }
        Ok(())
    }
}

type Available = BTreeMap<u32, NodeRef>;

/// Best single add/sub producing `target` from available values, preferring
/// the smallest shift and then the smallest source values.
fn one_step(avail: &Available, target: u32) -> Option<McmStep> {
    let t = target as i64;
    let mut best: Option<((u32, u32, u32, u8), McmStep)> = None;
    let mut consider = |key: (u32, u32, u32, u8), step: McmStep| {
        if best.as_ref().is_none_or(|(k, _)| key < *k) {
            best = Some((key, step));
        }
    };
    for (&av, &an) in avail {
        for (&bv, &bn) in avail {
            for s in 1..=MAX_STEP_SHIFT {
                let shifted = (av as i64) << s;
                let hi = av.max(bv);
                let lo = av.min(bv);
                let sa = Operand { node: an, shift: s };
                let sb = Operand { node: bn, shift: 0 };
                if shifted + bv as i64 == t {
                    consider(
                        (s, hi, lo, 0),
                        McmStep { target, a: sa, b: sb, op: AddSub::Add },
                    );
                }
                if shifted - bv as i64 == t {
                    consider(
                        (s, hi, lo, 1),
                        McmStep { target, a: sa, b: sb, op: AddSub::Sub },
                    );
                }
                if bv as i64 - shifted == t {
                    consider(
                        (s, hi, lo, 2),
                        McmStep { target, a: sb, b: sa, op: AddSub::Sub },
                    );
                }
            }
        }
    }
    best.map(|(_, s)| s)
}

fn push_step(steps: &mut Vec<McmStep>, avail: &mut Available, step: McmStep) {
    avail.insert(step.target, NodeRef::Step(steps.len()));
    steps.push(step);
}

fn extended(avail: &Available, value: u32) -> Available {
    let mut next = avail.clone();
    next.insert(value, NodeRef::Step(usize::MAX));
    next
}

/// Shortest chain (up to three steps) reaching `target`, with intermediates
/// restricted to odd values in `[3, 63]`. Returns the intermediates to
/// insert before `target`, smallest first.
fn find_chain(avail: &Available, target: u32) -> Option<Vec<u32>> {
    if one_step(avail, target).is_some() {
        return Some(vec![]);
    }
    let candidates: Vec<u32> = (3..=MAX_ODD).step_by(2).filter(|c| !avail.contains_key(c)).collect();
    let reachable = |set: &Available| -> Vec<u32> {
        candidates
            .iter()
            .copied()
            .filter(|&c| !set.contains_key(&c) && one_step(set, c).is_some())
            .collect()
    };
    let first = reachable(avail);
    for &c in &first {
        if c != target && one_step(&extended(avail, c), target).is_some() {
            return Some(vec![c]);
        }
    }
    for &c1 in &first {
        if c1 == target {
            continue;
        }
        let with1 = extended(avail, c1);
        for c2 in reachable(&with1) {
            if c2 != target && one_step(&extended(&with1, c2), target).is_some() {
                return Some(vec![c1, c2]);
            }
        }
    }
    None
}

/// Plans the add/sub chain producing every odd in `odds`.
///
/// Targets are realised in ascending order. A target that is one add/sub
/// away from the values produced so far costs one step; otherwise the
/// shortest chain through intermediate odd values is inserted. Because all
/// values stay odd and within `[3, 63]`, a plan never exceeds 31 steps.
pub fn plan_mcm(odds: &BTreeSet<u32>) -> Result<McmPlan> {
    if let Some(&bad) = odds.iter().find(|&&o| o % 2 == 0 || !(3..=MAX_ODD).contains(&o)) {
        return Err(Error::InvalidOdd(bad));
    }
    let mut avail: Available = BTreeMap::from([(1, NodeRef::Input)]);
    let mut steps = Vec::new();
    for &target in odds {
        if avail.contains_key(&target) {
            continue;
        }
        match find_chain(&avail, target) {
            Some(chain) => {
                for v in chain.into_iter().chain([target]) {
                    let step = one_step(&avail, v).expect("chain values are one step apart");
                    push_step(&mut steps, &mut avail, step);
                }
            }
            None => {
                // o = (o - 2) + (1 << 1), building o - 2 first if needed.
                let mut missing = vec![target];
                let mut v = target;
                while !avail.contains_key(&(v - 2)) {
                    v -= 2;
                    missing.push(v);
                }
                for v in missing.into_iter().rev() {
                    let step = McmStep {
                        target: v,
                        a: Operand { node: NodeRef::Input, shift: 1 },
                        b: Operand { node: avail[&(v - 2)], shift: 0 },
                        op: AddSub::Add,
                    };
                    push_step(&mut steps, &mut avail, step);
                }
            }
        }
    }
    Ok(McmPlan { steps })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfmmBlock {
    pub ifm_index: usize,
    pub plan: McmPlan,
    pub fold_ways: usize,
    pub taps_provided: BTreeSet<u32>,
}

impl CfmmBlock {
    pub fn provides(&self, odd: u32) -> bool {
        self.taps_provided.contains(&odd)
    }

    /// `odd * x` for a provided tap.
    pub fn tap(&self, odd: u32, x: i64) -> Option<i64> {
        if !self.provides(odd) {
            return None;
        }
        self.plan.products(x).ok()?.get(&odd).copied()
    }
}

/// Builds the CFMM block for one input stream. `phase_weights[p]` holds
/// every weight multiplying the stream during fold phase `p`; the plan
/// covers the union of their odd factors.
pub fn build_cfmm<W: AsRef<[i32]>>(ifm_index: usize, phase_weights: &[W], fold_ways: usize) -> Result<CfmmBlock> {
    if fold_ways == 0 {
        return Err(Error::InvalidFold("fold_ways must be >= 1".into()));
    }
    let mut odds = BTreeSet::new();
    for phase in phase_weights {
        odds.extend(required_odds(phase.as_ref().iter().copied())?);
    }
    let plan = plan_mcm(&odds)?;
    let mut taps_provided: BTreeSet<u32> = plan.targets().collect();
    taps_provided.insert(1);
    Ok(CfmmBlock {
        ifm_index,
        plan,
        fold_ways,
        taps_provided,
    })
}
