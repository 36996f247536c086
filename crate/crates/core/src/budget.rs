//! Exit-probability modeling, confidence-threshold calibration on a
//! validation sweep, and solving the exit parameter q for a compute budget.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{GfError, Result};

/// Geometric-with-normalizer exit model: q_t = z * (1-q)^(t-1) * q.
///
/// Note the family is front-loaded (q_t is non-increasing in t), so its
/// expected cost ranges from C_1 (q -> 1) up to mean(C_t) (q -> 0). Budgets
/// above that use the q floor; budgets at or above C_T use the degenerate
/// all-mass-at-T plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitDistribution {
    pub q: f64,
    pub z: f64,
    pub probs: Vec<f64>,
}

pub const Q_FLOOR: f64 = 1e-9;
pub const Q_CEIL: f64 = 1.0 - 1e-9;

impl ExitDistribution {
    pub fn geometric(q: f64, t_max: usize) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(GfError::input(format!(
                "exit parameter q must lie in (0,1), got {q}"
            )));
        }
        if t_max == 0 {
            return Err(GfError::input("t_max must be >= 1".to_string()));
        }
        let unnorm: Vec<f64> = (0..t_max)
            .map(|t| (1.0 - q).powi(t as i32) * q)
            .collect();
        let sum: f64 = unnorm.iter().sum();
        let z = 1.0 / sum;
        let probs = unnorm.iter().map(|u| u * z).collect();
        Ok(ExitDistribution { q, z, probs })
    }

    /// Degenerate no-early-exit plan: all mass at step T. Used when the
    /// budget already covers running every sample to T.
    pub fn full_length(t_max: usize) -> Self {
        let mut probs = vec![0.0; t_max];
        probs[t_max - 1] = 1.0;
        ExitDistribution {
            q: 0.0,
            z: 1.0,
            probs,
        }
    }

    pub fn t_max(&self) -> usize {
        self.probs.len()
    }
}

/// Cumulative cost C_t of a sample that exits at step t (multiply-adds or
/// milliseconds); strictly increasing in t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub per_exit: Vec<f64>,
}

impl CostModel {
    pub fn new(per_exit: Vec<f64>) -> Result<Self> {
        if per_exit.is_empty() {
            return Err(GfError::input("cost model needs at least one step".to_string()));
        }
        if per_exit.windows(2).any(|w| w[1] <= w[0]) || per_exit[0] <= 0.0 {
            return Err(GfError::input(format!(
                "per-exit costs must be positive and strictly increasing, got {per_exit:?}"
            )));
        }
        Ok(CostModel { per_exit })
    }

    pub fn t_max(&self) -> usize {
        self.per_exit.len()
    }

    pub fn min_cost(&self) -> f64 {
        self.per_exit[0]
    }

    pub fn max_cost(&self) -> f64 {
        *self.per_exit.last().unwrap()
    }
}

/// Average per-sample cost sum_t q_t * C_t.
pub fn expected_cost(exit: &ExitDistribution, cost: &CostModel) -> Result<f64> {
    if exit.t_max() != cost.t_max() {
        return Err(GfError::input(format!(
            "exit distribution over {} steps vs cost model over {}",
            exit.t_max(),
            cost.t_max()
        )));
    }
    Ok(exit
        .probs
        .iter()
        .zip(cost.per_exit.iter())
        .map(|(q, c)| q * c)
        .sum())
}

/// Solve for the exit distribution whose expected cost meets the budget.
///
/// expected_cost is strictly decreasing in q, so bisection finds the
/// equality solution; that is also the smallest feasible q, the
/// accuracy-maximizing choice. Budgets below C_1 are infeasible; budgets
/// beyond the family's reach saturate as described on
/// [`ExitDistribution`].
pub fn solve_q(budget_per_sample: f64, cost: &CostModel, t_max: usize) -> Result<ExitDistribution> {
    if t_max != cost.t_max() {
        return Err(GfError::input(format!(
            "t_max {} vs cost model over {}",
            t_max,
            cost.t_max()
        )));
    }
    if t_max == 1 {
        // only one exit step; any budget >= C_1 is the same plan
        if budget_per_sample < cost.min_cost() * (1.0 - 1e-12) {
            return Err(GfError::InfeasibleBudget {
                budget: budget_per_sample,
                min_cost: cost.min_cost(),
                max_cost: cost.max_cost(),
            });
        }
        return Ok(ExitDistribution::full_length(1));
    }
    if budget_per_sample < cost.min_cost() * (1.0 - 1e-12) {
        return Err(GfError::InfeasibleBudget {
            budget: budget_per_sample,
            min_cost: cost.min_cost(),
            max_cost: cost.max_cost(),
        });
    }
    if budget_per_sample >= cost.max_cost() * (1.0 - 1e-12) {
        return Ok(ExitDistribution::full_length(t_max));
    }

    let cost_at = |q: f64| -> f64 {
        let d = ExitDistribution::geometric(q, t_max).expect("q in (0,1)");
        expected_cost(&d, cost).expect("lengths match")
    };
    let tol = 1e-6 * cost.max_cost();

    // cost(QF) ~ mean(C) is the family's ceiling; saturate above it
    if budget_per_sample >= cost_at(Q_FLOOR) {
        return ExitDistribution::geometric(Q_FLOOR, t_max);
    }
    if budget_per_sample <= cost_at(Q_CEIL) {
        return ExitDistribution::geometric(Q_CEIL, t_max);
    }

    let (mut lo, mut hi) = (Q_FLOOR, Q_CEIL); // cost(lo) > budget > cost(hi)
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let c = cost_at(mid);
        if (c - budget_per_sample).abs() < tol {
            return ExitDistribution::geometric(mid, t_max);
        }
        if c > budget_per_sample {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    ExitDistribution::geometric(0.5 * (lo + hi), t_max)
}

/// Sequential quantile calibration. `confidences[i][t]` is sample i's
/// max-softmax value at step t+1 from a full-T (no-exit) sweep. At each
/// step the threshold is set so the target fraction of remaining samples
/// exceeds it; eta_T = 0 so every survivor exits at the last step.
pub fn calibrate_thresholds(exit: &ExitDistribution, confidences: &[Vec<f64>]) -> Vec<f64> {
    let t_max = exit.t_max();
    let mut thresholds = vec![0.0f64; t_max];
    let mut survivors: Vec<usize> = (0..confidences.len()).collect();
    let mut mass_remaining = 1.0f64;

    for t in 0..t_max.saturating_sub(1) {
        if survivors.is_empty() {
            // leave remaining thresholds at 0
            break;
        }
        let target = (exit.probs[t] / mass_remaining.max(1e-300)).clamp(0.0, 1.0);
        let count = (target * survivors.len() as f64).round() as usize;
        let mut confs: Vec<f64> = survivors.iter().map(|&i| confidences[i][t]).collect();
        confs.sort_by(|a, b| b.partial_cmp(a).unwrap());

        let eta = if count == 0 {
            1.0
        } else if count >= confs.len() {
            // everyone exits: midpoint between the lowest confidence and 0
            confs[confs.len() - 1] / 2.0
        } else {
            0.5 * (confs[count - 1] + confs[count])
        };
        thresholds[t] = eta;
        survivors.retain(|&i| confidences[i][t] <= eta);
        mass_remaining -= exit.probs[t];
    }
    thresholds[t_max - 1] = 0.0;
    thresholds
}

/// Replay thresholds over a confidence corpus: exit counts per step.
/// Mirrors the engine's halt rule (strictly greater, eta_T forces exit).
pub fn replay_exits(thresholds: &[f64], confidences: &[Vec<f64>]) -> Vec<usize> {
    let t_max = thresholds.len();
    let mut counts = vec![0usize; t_max];
    for row in confidences {
        let mut exited = false;
        for t in 0..t_max - 1 {
            if row[t] > thresholds[t] {
                counts[t] += 1;
                exited = true;
                break;
            }
        }
        if !exited {
            counts[t_max - 1] += 1;
        }
    }
    counts
}

/// A solved and calibrated plan for one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSolution {
    pub exit: ExitDistribution,
    pub thresholds: Vec<f64>,
    pub cost: CostModel,
    pub expected_cost: f64,
    pub budget: f64,
}

impl BudgetSolution {
    /// Solve q for the budget and calibrate thresholds on the given
    /// validation confidence corpus.
    pub fn solve(
        budget_per_sample: f64,
        cost: &CostModel,
        confidences: &[Vec<f64>],
    ) -> Result<Self> {
        let exit = solve_q(budget_per_sample, cost, cost.t_max())?;
        let thresholds = calibrate_thresholds(&exit, confidences);
        let expected = expected_cost(&exit, cost)?;
        Ok(BudgetSolution {
            exit,
            thresholds,
            cost: cost.clone(),
            expected_cost: expected,
            budget: budget_per_sample,
        })
    }

    /// Canonical text record for audit and replay.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let _ = writeln!(s, "gf-budget-v1");
        let _ = writeln!(s, "budget = {}", self.budget);
        let _ = writeln!(s, "q = {}", self.exit.q);
        let _ = writeln!(s, "z = {}", self.exit.z);
        let _ = writeln!(s, "q_t = {}", join(&self.exit.probs));
        let _ = writeln!(s, "eta = {}", join(&self.thresholds));
        let _ = writeln!(s, "cost = {}", join(&self.cost.per_exit));
        let _ = writeln!(s, "expected_cost = {}", self.expected_cost);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("gf-budget-v1") {
            return Err(GfError::input("not a gf-budget-v1 record".to_string()));
        }
        let mut fields = std::collections::BTreeMap::new();
        for line in lines {
            if let Some((k, v)) = line.split_once('=') {
                fields.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| -> Result<String> {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| GfError::input(format!("budget record missing {k}")))
        };
        let f = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| GfError::input(format!("bad float for {k}")))
        };
        let vecf = |k: &str| -> Result<Vec<f64>> {
            get(k)?
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| GfError::input(format!("bad float list for {k}")))
                })
                .collect()
        };
        Ok(BudgetSolution {
            exit: ExitDistribution {
                q: f("q")?,
                z: f("z")?,
                probs: vecf("q_t")?,
            },
            thresholds: vecf("eta")?,
            cost: CostModel {
                per_exit: vecf("cost")?,
            },
            expected_cost: f("expected_cost")?,
            budget: f("budget")?,
        })
    }
}
