//! Shift schedules for convolution with duplicated kernels.
//!
//! A kernel of width `k` duplicated `N` times in the tile memory is applied to
//! an IA vector at shift offsets `a = 0..l`, where `l = lcm(k, s) / s`. For a
//! given shift only the blocks `n` with `m·s = n·k + a` produce an output,
//! and the outputs they produce (`m`) form one residue class modulo `l`. When
//! the three conditions below hold, the residue classes over all shifts
//! partition the non-negative integers, so every output is produced exactly
//! once.
//!
//! 1. `k` is odd and `s < k`.
//! 2. `m1·s = n1·k + 1` has a non-negative solution.
//! 3. `gcd(m1, l) = 1`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("invalid kernel geometry: k={k}, s={s} (both must be positive)")]
    InvalidGeometry { k: u64, s: u64 },
    #[error("kernel geometry k={}, s={} is not schedulable: {report}", report.geometry.k, report.geometry.s)]
    ConditionViolation { report: ConditionReport },
    #[error("shift amount a={a} out of range (must be < l={l})")]
    ShiftOutOfRange { a: u64, l: u64 },
    #[error("duplication count must be at least 1")]
    ZeroBlocks,
    #[error("integer overflow while computing {0}")]
    Overflow(&'static str),
}

/// Kernel width and stride along the shifted dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelGeometry {
    pub k: u64,
    pub s: u64,
}

impl KernelGeometry {
    pub fn new(k: u64, s: u64) -> Result<Self, ScheduleError> {
        if k == 0 || s == 0 {
            return Err(ScheduleError::InvalidGeometry { k, s });
        }
        Ok(Self { k, s })
    }

    pub fn lcm(&self) -> Result<u64, ScheduleError> {
        lcm(self.k, self.s)
    }

    /// Number of shift cycles, `lcm(k, s) / s`.
    pub fn shift_cycles(&self) -> Result<u64, ScheduleError> {
        Ok(self.lcm()? / self.s)
    }

    /// Period of the block index, `lcm(k, s) / k`.
    pub fn block_period(&self) -> Result<u64, ScheduleError> {
        Ok(self.lcm()? / self.k)
    }
}

pub fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

pub fn lcm(a: u64, b: u64) -> Result<u64, ScheduleError> {
    if a == 0 || b == 0 {
        return Ok(0);
    }
    (a / gcd(a, b))
        .checked_mul(b)
        .ok_or(ScheduleError::Overflow("lcm(k, s)"))
}

/// Solution of `m1·s = n1·k + 1` together with the derived periods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub geometry: KernelGeometry,
    /// Shift cycles, `lcm(k, s) / s`.
    pub l: u64,
    /// Block period, `lcm(k, s) / k`.
    pub period_n: u64,
    pub m1: u64,
    pub n1: u64,
}

impl ScheduleParams {
    /// Offsets of the first `(n, m)` pair for shift `a`:
    /// `(a·n1 mod period_n, a·m1 mod l)`.
    pub fn start_for_shift(&self, a: u64) -> Result<(u64, u64), ScheduleError> {
        let n = a
            .checked_mul(self.n1)
            .ok_or(ScheduleError::Overflow("a·n1"))?
            % self.period_n;
        let m = a
            .checked_mul(self.m1)
            .ok_or(ScheduleError::Overflow("a·m1"))?
            % self.l;
        Ok((n, m))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub geometry: KernelGeometry,
    /// `k` odd and `s < k`.
    pub cond1: bool,
    /// `m1·s = n1·k + 1` solvable.
    pub cond2: bool,
    /// `gcd(m1, l) = 1`.
    pub cond3: bool,
    pub params: Option<ScheduleParams>,
}

impl ConditionReport {
    pub fn all_hold(&self) -> bool {
        self.cond1 && self.cond2 && self.cond3
    }
}

impl fmt::Display for ConditionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |b: bool| if b { "ok" } else { "FAIL" };
        write!(
            f,
            "condition 1 (k odd, s < k): {}; condition 2 (m1·s = n1·k + 1 solvable): {}; condition 3 (gcd(m1, l) = 1): {}",
            mark(self.cond1),
            mark(self.cond2),
            mark(self.cond3)
        )?;
        if let Some(p) = &self.params {
            write!(f, " [l={}, period_n={}, m1={}, n1={}]", p.l, p.period_n, p.m1, p.n1)?;
        }
        Ok(())
    }
}

/// One compute step: at shift `a`, block `n` produces output `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub a: u64,
    pub n: u64,
    pub m: u64,
}

/// The full ordered execution plan for one kernel geometry and block count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSchedule {
    pub params: ScheduleParams,
    /// Kernel duplication count.
    pub blocks: u64,
    pub steps: Vec<Step>,
}

impl ShiftSchedule {
    /// Number of outputs, `⌊((N-1)k + l - 1)/s⌋ + 1`.
    pub fn output_len(&self) -> u64 {
        self.steps.len() as u64
    }

    /// Width of the IA vector the schedule reads, `N·k + l - 1`.
    pub fn input_len(&self) -> u64 {
        self.blocks * self.params.geometry.k + self.params.l - 1
    }

    pub fn geometry(&self) -> KernelGeometry {
        self.params.geometry
    }
}

/// Least `(m1, n1)` with `m1·s = n1·k + 1`, scanning `m` over `[0, lcm(k, s))`.
///
/// The least solution is automatically reduced: `m1 < l` and `n1 < period_n`.
pub fn find_m1_n1(geometry: KernelGeometry) -> Result<Option<(u64, u64)>, ScheduleError> {
    let KernelGeometry { k, s } = geometry;
    let bound = geometry.lcm()?;
    for m in 0..bound {
        let ms = m.checked_mul(s).ok_or(ScheduleError::Overflow("m·s"))?;
        if ms >= 1 && (ms - 1) % k == 0 {
            return Ok(Some((m, (ms - 1) / k)));
        }
    }
    Ok(None)
}

pub fn check_conditions(geometry: KernelGeometry) -> Result<ConditionReport, ScheduleError> {
    let KernelGeometry { k, s } = geometry;
    let cond1 = k % 2 == 1 && s < k;
    let l = geometry.shift_cycles()?;
    let period_n = geometry.block_period()?;
    let params = find_m1_n1(geometry)?.map(|(m1, n1)| ScheduleParams {
        geometry,
        l,
        period_n,
        m1,
        n1,
    });
    let cond2 = params.is_some();
    let cond3 = params.map(|p| gcd(p.m1, p.l) == 1).unwrap_or(false);
    Ok(ConditionReport {
        geometry,
        cond1,
        cond2,
        cond3,
        params,
    })
}

/// Parameters for a geometry that satisfies all three conditions.
pub fn schedulable_params(geometry: KernelGeometry) -> Result<ScheduleParams, ScheduleError> {
    let report = check_conditions(geometry)?;
    match (report.all_hold(), report.params) {
        (true, Some(p)) => Ok(p),
        _ => Err(ScheduleError::ConditionViolation { report }),
    }
}

/// Ordered `(n, m)` pairs produced at shift `a` with `blocks` duplicates.
pub fn index_sets(
    params: &ScheduleParams,
    a: u64,
    blocks: u64,
) -> Result<Vec<(u64, u64)>, ScheduleError> {
    if a >= params.l {
        return Err(ScheduleError::ShiftOutOfRange { a, l: params.l });
    }
    let (mut n, mut m) = params.start_for_shift(a)?;
    let mut out = Vec::new();
    while n < blocks {
        out.push((n, m));
        n = n
            .checked_add(params.period_n)
            .ok_or(ScheduleError::Overflow("block index"))?;
        m = m
            .checked_add(params.l)
            .ok_or(ScheduleError::Overflow("output index"))?;
    }
    Ok(out)
}

/// Outputs produced by `blocks` duplicates: `⌊((N-1)k + l - 1)/s⌋ + 1`.
pub fn output_len(geometry: KernelGeometry, blocks: u64) -> Result<u64, ScheduleError> {
    if blocks == 0 {
        return Err(ScheduleError::ZeroBlocks);
    }
    let l = geometry.shift_cycles()?;
    let span = (blocks - 1)
        .checked_mul(geometry.k)
        .and_then(|v| v.checked_add(l - 1))
        .ok_or(ScheduleError::Overflow("output length"))?;
    Ok(span / geometry.s + 1)
}

pub fn full_schedule(geometry: KernelGeometry, blocks: u64) -> Result<ShiftSchedule, ScheduleError> {
    let params = schedulable_params(geometry)?;
    schedule_from_params(params, blocks)
}

/// Builds the schedule from already-derived parameters without re-checking
/// the conditions. The verification suite uses this to run mutated params.
pub fn schedule_from_params(params: ScheduleParams, blocks: u64) -> Result<ShiftSchedule, ScheduleError> {
    if blocks == 0 {
        return Err(ScheduleError::ZeroBlocks);
    }
    let mut steps = Vec::new();
    for a in 0..params.l {
        for (n, m) in index_sets(&params, a, blocks)? {
            steps.push(Step { a, n, m });
        }
    }
    Ok(ShiftSchedule {
        params,
        blocks,
        steps,
    })
}

/// Executable form of the partition property: the sets
/// `M_a = {i·l + (a·m1 mod l)}` truncated below `bound` are pairwise disjoint
/// and cover `0..bound`. Unschedulable geometries yield `false`.
pub fn verify_partition(geometry: KernelGeometry, bound: u64) -> Result<bool, ScheduleError> {
    match schedulable_params(geometry) {
        Ok(p) => verify_partition_params(&p, bound),
        Err(ScheduleError::ConditionViolation { .. }) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Partition check on explicit parameters, which need not be valid.
pub fn verify_partition_params(params: &ScheduleParams, bound: u64) -> Result<bool, ScheduleError> {
    let mut seen = vec![false; usize::try_from(bound).map_err(|_| ScheduleError::Overflow("bound"))?];
    for a in 0..params.l {
        let (_, start) = params.start_for_shift(a)?;
        let mut m = start;
        while m < bound {
            let slot = &mut seen[m as usize];
            if *slot {
                return Ok(false);
            }
            *slot = true;
            m = m.checked_add(params.l).ok_or(ScheduleError::Overflow("partition member"))?;
        }
    }
    Ok(seen.into_iter().all(|b| b))
}

/// Checks a schedule against every structural invariant. Returns the first
/// violation found, described in words.
pub fn audit_schedule(schedule: &ShiftSchedule) -> Result<(), String> {
    let p = &schedule.params;
    let KernelGeometry { k, s } = p.geometry;
    let mut seen = BTreeSet::new();
    let mut prev: Option<Step> = None;
    for step in &schedule.steps {
        if step.m * s != step.n * k + step.a {
            return Err(format!(
                "step (a={}, n={}, m={}) violates m·s = n·k + a",
                step.a, step.n, step.m
            ));
        }
        if step.a >= p.l || step.n >= schedule.blocks {
            return Err(format!("step (a={}, n={}, m={}) out of range", step.a, step.n, step.m));
        }
        if !seen.insert(step.m) {
            return Err(format!("output m={} produced twice", step.m));
        }
        if let Some(q) = prev {
            if step.a < q.a {
                return Err("steps not grouped by ascending shift".into());
            }
            if step.a == q.a && (step.n != q.n + p.period_n || step.m != q.m + p.l) {
                return Err(format!(
                    "within shift {} consecutive steps do not advance by (period_n, l)",
                    step.a
                ));
            }
        }
        prev = Some(*step);
    }
    let expected = output_len(p.geometry, schedule.blocks).map_err(|e| e.to_string())?;
    if seen.len() as u64 != expected || seen.iter().next_back().map(|m| m + 1) != Some(expected) {
        return Err(format!(
            "outputs are not exactly 0..{expected} (got {} distinct)",
            seen.len()
        ));
    }
    Ok(())
}
