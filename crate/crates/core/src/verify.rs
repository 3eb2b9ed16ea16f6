//! Self-check suite: partition and schedule invariants over a kernel grid,
//! plus randomized plan-and-execute runs against the direct convolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{plan_for, DataflowId};
use crate::engine::{reference_dwconv, IntTensor};
use crate::mapping::{execute, LayerSpec, MacroConfig};
use crate::schedule::{
    audit_schedule, check_conditions, schedule_from_params, verify_partition_params, KernelGeometry, ScheduleParams,
};

/// Deliberate corruption used to prove the checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Replace m1 by `(m1 + 1) mod l`.
    M1,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyScope {
    pub kmax: u64,
    pub oracle_instances: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyScope {
    fn default() -> Self {
        Self {
            kmax: 7,
            oracle_instances: 200,
            seed: 0x5eed,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub checks: Vec<CheckResult>,
}

impl VerifySummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub const ORACLE_GEOMETRIES: [(u64, u64); 6] = [(3, 1), (3, 2), (5, 1), (5, 2), (5, 3), (7, 2)];

fn apply_fault(mut p: ScheduleParams, fault: Option<Fault>) -> ScheduleParams {
    if let Some(Fault::M1) = fault {
        p.m1 = (p.m1 + 1) % p.l;
    }
    p
}

/// Does `m·s = n·k + 1` have any solution with `m < lcm`? Checked by brute
/// force, independently of the schedule code.
fn brute_solvable(k: u64, s: u64) -> bool {
    let lcm = k * s / crate::schedule::gcd(k, s);
    (0..lcm).any(|m| m * s >= 1 && (m * s - 1).is_multiple_of(k))
}

fn grid_check(scope: &VerifyScope) -> CheckResult {
    let mut cases = 0;
    let mut failures = Vec::new();
    let mut k = 3;
    while k <= scope.kmax {
        for s in 1..k {
            let g = KernelGeometry { k, s };
            let report = match check_conditions(g) {
                Ok(r) => r,
                Err(e) => {
                    failures.push(format!("({k},{s}): {e}"));
                    continue;
                }
            };
            if report.cond2 != brute_solvable(k, s) {
                failures.push(format!("({k},{s}): condition 2 reported {}", report.cond2));
                continue;
            }
            let Some(params) = report.params.filter(|_| report.all_hold()) else {
                continue;
            };
            cases += 1;
            let p = apply_fault(params, scope.fault);
            let bound = 10 * g.lcm().unwrap_or(0);
            if !verify_partition_params(&p, bound).unwrap_or(false) {
                failures.push(format!("({k},{s}): partition fails below {bound}"));
                continue;
            }
            for n in 1..=8 {
                let audit = schedule_from_params(p, n)
                    .map_err(|e| e.to_string())
                    .and_then(|sch| audit_schedule(&sch));
                if let Err(e) = audit {
                    failures.push(format!("({k},{s}) N={n}: {e}"));
                    break;
                }
            }
        }
        k += 2;
    }
    CheckResult {
        name: format!("partition grid k<={}", scope.kmax),
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{cases} schedulable geometries verified")
        } else {
            failures.join("; ")
        },
    }
}

/// A random small layer for one geometry, wide enough for one kernel block.
pub fn random_layer<R: Rng + ?Sized>(rng: &mut R, k: u64, s: u64, name: String) -> LayerSpec {
    let l = KernelGeometry { k, s }.shift_cycles().unwrap_or(1);
    let padding = rng.gen_range(0..=k / 2);
    let min = (k + l - 1).saturating_sub(2 * padding).max(1);
    let hi = 32.max(min);
    LayerSpec {
        name,
        channels: rng.gen_range(1..=8),
        height: rng.gen_range(min..=hi),
        width: rng.gen_range(min..=hi),
        kernel_h: k,
        kernel_w: k,
        stride: s,
        padding,
    }
}

/// Small macro whose narrow TRF forces the BIG scheduler on modest widths.
pub fn narrow_macro() -> MacroConfig {
    MacroConfig {
        n_tiles: 8,
        tm_rows: 105,
        trf_words: 105,
        ..MacroConfig::default()
    }
}

fn oracle_check(scope: &VerifyScope) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(scope.seed);
    let macros = [MacroConfig::default(), narrow_macro()];
    let mut failures = Vec::new();
    let mut runs = 0;
    for i in 0..scope.oracle_instances {
        let (k, s) = ORACLE_GEOMETRIES[i % ORACLE_GEOMETRIES.len()];
        let layer = random_layer(&mut rng, k, s, format!("rand{i}"));
        let ifmap = IntTensor::random(&mut rng, layer.channels as usize, layer.height as usize, layer.width as usize);
        let kernels = IntTensor::random(&mut rng, layer.channels as usize, k as usize, k as usize);
        let expected = match reference_dwconv(&ifmap, &kernels, s as usize, layer.padding as usize) {
            Ok(r) => r,
            Err(e) => {
                failures.push(format!("{}: {e}", layer.name));
                continue;
            }
        };
        let macro_cfg = &macros[i % macros.len()];
        for df in DataflowId::ALL {
            let mut plan = match plan_for(df, &layer, macro_cfg) {
                Ok(p) => p,
                Err(e) => {
                    failures.push(format!("{} {df}: {e}", layer.name));
                    continue;
                }
            };
            if let Some(sch) = plan.schedule.as_mut() {
                let p = apply_fault(sch.params, scope.fault);
                sch.params = p;
            }
            runs += 1;
            match execute(&layer, &plan, &ifmap, &kernels) {
                Ok(out) if out == expected => {}
                Ok(_) => failures.push(format!("{} {df}: output differs from reference", layer.name)),
                Err(e) => failures.push(format!("{} {df}: {e}", layer.name)),
            }
        }
        if failures.len() > 10 {
            break;
        }
    }
    CheckResult {
        name: format!("oracle equivalence ({} layers)", scope.oracle_instances),
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{runs} plan executions bit-exact")
        } else {
            failures.join("; ")
        },
    }
}

pub fn run_verify(scope: &VerifyScope) -> VerifySummary {
    VerifySummary {
        checks: vec![grid_check(scope), oracle_check(scope)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scope_passes() {
        let scope = VerifyScope {
            oracle_instances: 24,
            ..VerifyScope::default()
        };
        let s = run_verify(&scope);
        assert!(s.passed(), "{:?}", s.checks);
    }

    #[test]
    fn mutated_m1_is_caught() {
        let scope = VerifyScope {
            oracle_instances: 12,
            fault: Some(Fault::M1),
            ..VerifyScope::default()
        };
        let s = run_verify(&scope);
        assert!(!s.checks[0].passed);
        assert!(!s.checks[1].passed);
    }
}
