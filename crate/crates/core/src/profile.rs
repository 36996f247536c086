//! Analytic multiply-add accounting per step, wall-clock measurement, and
//! accuracy-versus-cost curve generation for budgeted and anytime settings.
//!
//! Counting convention: one multiply-add per MAC, biases and activations
//! excluded. The proposal network and the per-step auxiliary heads are
//! included in C_t.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::budget::{BudgetSolution, CostModel};
use crate::dataio::{Dataset, ImageF32};
use crate::engine::{Engine, InferenceConfig, InferenceMode, PolicyMode};
use crate::error::{GfError, Result};
use crate::model::{ClassifierKind, EncoderConfig, ModelConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub name: String,
    pub macs: u64,
}

/// Multiply-add totals per component plus the derived cumulative step costs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub layers: Vec<LayerCount>,
    pub global_encoder: u64,
    pub local_encoder: u64,
    /// Classifier MACs consumed at step t (index t-1).
    pub classifier_per_step: Vec<u64>,
    /// Auxiliary head MACs at step t (index t-1).
    pub aux_per_step: Vec<u64>,
    /// Proposal-network MACs per invocation.
    pub policy_step: u64,
    pub t_max: usize,
}

/// Per-layer and total encoder MACs for a square input side.
pub fn encoder_macs(cfg: &EncoderConfig, in_channels: usize, side: usize, prefix: &str) -> (Vec<LayerCount>, u64) {
    let mut layers = Vec::new();
    let mut total = 0u64;
    let mut c_in = in_channels;
    let mut s = side;
    for (i, stage) in cfg.stages.iter().enumerate() {
        let out = (s + 2 - 3) / stage.stride + 1;
        let macs =
            (stage.out_channels * c_in * 9 * out * out) as u64;
        layers.push(LayerCount {
            name: format!("{prefix}.stage{i}"),
            macs,
        });
        total += macs;
        c_in = stage.out_channels;
        s = out;
    }
    (layers, total)
}

pub fn count_ops(cfg: &ModelConfig) -> OpCount {
    let f = cfg.feature_dim();
    let c = cfg.num_classes;
    let side = cfg.patch_side;
    let (mut layers, enc_total) = encoder_macs(&cfg.encoder, cfg.in_channels, side, "g");
    let (local_layers, _) = encoder_macs(&cfg.encoder, cfg.in_channels, side, "l");
    layers.extend(local_layers);

    let classifier_per_step: Vec<u64> = match cfg.classifier {
        ClassifierKind::Gru { hidden } => {
            let per = (f * 3 * hidden + hidden * 3 * hidden + hidden * c) as u64;
            vec![per; cfg.t_max]
        }
        ClassifierKind::CascadedFc => (1..=cfg.t_max).map(|t| (t * f * c) as u64).collect(),
    };
    for (t, &m) in classifier_per_step.iter().enumerate() {
        layers.push(LayerCount {
            name: format!("c.step{}", t + 1),
            macs: m,
        });
    }
    let aux_per_step: Vec<u64> = vec![(f * c) as u64; cfg.t_max];
    for (t, &m) in aux_per_step.iter().enumerate() {
        layers.push(LayerCount {
            name: format!("c.aux{}", t + 1),
            macs: m,
        });
    }

    let e_side = cfg.encoder.out_side(side);
    let r = cfg.policy.reduce_channels;
    let h = cfg.policy.hidden;
    let gru_in = r * e_side * e_side;
    let policy_step = (r * f * e_side * e_side
        + gru_in * 3 * h
        + h * 3 * h
        + h * 2
        + h) as u64;
    layers.push(LayerCount {
        name: "p.step".to_string(),
        macs: policy_step,
    });

    OpCount {
        layers,
        global_encoder: enc_total,
        local_encoder: enc_total,
        classifier_per_step,
        aux_per_step,
        policy_step,
        t_max: cfg.t_max,
    }
}

impl OpCount {
    /// Cumulative cost of exiting at step t (1-based):
    /// glance + (t-1) focus steps, each with a patch encode and one
    /// proposal-network invocation, plus per-step classifier and aux heads.
    pub fn cumulative_cost(&self, t: usize) -> u64 {
        debug_assert!(t >= 1 && t <= self.t_max);
        let mut total = self.global_encoder;
        total += (t as u64 - 1) * (self.local_encoder + self.policy_step);
        for s in 0..t {
            total += self.classifier_per_step[s] + self.aux_per_step[s];
        }
        total
    }

    pub fn cost_model(&self) -> Result<CostModel> {
        CostModel::new(
            (1..=self.t_max)
                .map(|t| self.cumulative_cost(t) as f64)
                .collect(),
        )
    }

    pub fn component_totals(&self) -> Vec<(String, u64)> {
        vec![
            ("global_encoder".to_string(), self.global_encoder),
            ("local_encoder".to_string(), self.local_encoder),
            (
                "classifier".to_string(),
                self.classifier_per_step.iter().sum(),
            ),
            ("aux_heads".to_string(), self.aux_per_step.iter().sum()),
            ("policy".to_string(), self.policy_step),
        ]
    }
}

/// Median per-exit-length latency in milliseconds, single lane, batch of
/// one. Crop/resize are part of the measured step pipeline.
pub fn measure_latency(
    engine: &Engine,
    sample: &ImageF32,
    reps: usize,
) -> Result<Vec<f64>> {
    let t_max = engine.model.config.t_max;
    let mut per_step = Vec::with_capacity(t_max);
    for t_star in 1..=t_max {
        let config = InferenceConfig {
            mode: InferenceMode::Anytime { t_star },
            policy: PolicyMode::Learned,
        };
        // warmup
        for _ in 0..2 {
            engine.infer(sample, None, 0, &config)?;
        }
        let mut times = Vec::with_capacity(reps.max(1));
        for _ in 0..reps.max(1) {
            let t0 = Instant::now();
            engine.infer(sample, None, 0, &config)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        per_step.push(times[times.len() / 2]);
    }
    Ok(per_step)
}

/// Exit-count-weighted average of per-step latencies.
pub fn weighted_latency(latencies: &[f64], exit_counts: &[usize]) -> f64 {
    let n: usize = exit_counts.iter().sum();
    latencies
        .iter()
        .zip(exit_counts.iter())
        .map(|(&l, &k)| l * k as f64)
        .sum::<f64>()
        / n.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub budget: f64,
    pub realized_cost: f64,
    pub accuracy: f64,
    pub q: f64,
    pub thresholds: Vec<f64>,
    pub exit_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<CurvePoint>,
    /// Budgets that could not be solved, with the reason.
    pub skipped: Vec<(f64, String)>,
}

/// One calibrate-and-evaluate pass per budget; no retraining in between.
/// `confidences` is the full-T calibration corpus; evaluation runs on
/// `dataset` with the learned policy.
pub fn sweep_budgets(
    engine: &Engine,
    dataset: &Dataset,
    confidences: &[Vec<f64>],
    budgets: &[f64],
    concurrency: usize,
) -> Result<SweepResult> {
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for &budget in budgets {
        let solution = match BudgetSolution::solve(budget, &engine.cost, confidences) {
            Ok(s) => s,
            Err(e) => {
                skipped.push((budget, e.to_string()));
                continue;
            }
        };
        let config = InferenceConfig {
            mode: InferenceMode::Budgeted {
                thresholds: solution.thresholds.clone(),
            },
            policy: PolicyMode::Learned,
        };
        let (_, summary) = engine.batch_infer(dataset, &config, concurrency)?;
        points.push(CurvePoint {
            budget,
            realized_cost: summary.avg_cost,
            accuracy: summary.accuracy,
            q: solution.exit.q,
            thresholds: solution.thresholds,
            exit_counts: summary.exit_counts,
        });
    }
    points.sort_by(|a, b| a.budget.partial_cmp(&b.budget).unwrap());
    Ok(SweepResult { points, skipped })
}

/// Ten log-spaced budgets spanning [C_1, C_T].
pub fn auto_budgets(cost: &CostModel, n: usize) -> Vec<f64> {
    let lo = cost.min_cost().ln();
    let hi = cost.max_cost().ln();
    (0..n)
        .map(|i| {
            let f = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            (lo + f * (hi - lo)).exp()
        })
        .collect()
}

/// Export provenance recorded into curve files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_digest: String,
    pub config_digest: String,
    pub seed: u64,
}

/// CSV schema (fixed column count for a given T):
/// budget, realized_cost, accuracy, q, eta_1..eta_T, exit_1..exit_T
pub fn export_csv(points: &[CurvePoint], prov: &Provenance, path: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(GfError::input("no curve points to export".to_string()));
    }
    let t_max = points[0].thresholds.len();
    let mut s = String::new();
    s.push_str("# gf-curves-v1\n");
    s.push_str(&format!("# checkpoint = {}\n", prov.checkpoint_digest));
    s.push_str(&format!("# config = {}\n", prov.config_digest));
    s.push_str(&format!("# seed = {}\n", prov.seed));
    s.push_str("budget,realized_cost,accuracy,q");
    for t in 1..=t_max {
        s.push_str(&format!(",eta_{t}"));
    }
    for t in 1..=t_max {
        s.push_str(&format!(",exit_{t}"));
    }
    s.push('\n');
    for p in points {
        s.push_str(&format!(
            "{},{},{},{}",
            p.budget, p.realized_cost, p.accuracy, p.q
        ));
        for eta in &p.thresholds {
            s.push_str(&format!(",{eta}"));
        }
        for k in &p.exit_counts {
            s.push_str(&format!(",{k}"));
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn parse_csv(path: &Path) -> Result<(Vec<CurvePoint>, Provenance)> {
    let text = std::fs::read_to_string(path)?;
    let mut prov = Provenance {
        checkpoint_digest: String::new(),
        config_digest: String::new(),
        seed: 0,
    };
    let mut points = Vec::new();
    let mut t_max = 0usize;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                match k.trim() {
                    "checkpoint" => prov.checkpoint_digest = v.trim().to_string(),
                    "config" => prov.config_digest = v.trim().to_string(),
                    "seed" => {
                        prov.seed = v.trim().parse().map_err(|_| {
                            GfError::input("bad seed in curve header".to_string())
                        })?
                    }
                    _ => {}
                }
            }
            continue;
        }
        if line.starts_with("budget,") {
            t_max = line.matches(",eta_").count();
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 + 2 * t_max {
            return Err(GfError::input(format!(
                "curve row has {} cells, expected {}",
                cells.len(),
                4 + 2 * t_max
            )));
        }
        let f = |i: usize| -> Result<f64> {
            cells[i]
                .parse()
                .map_err(|_| GfError::input(format!("bad float {}", cells[i])))
        };
        let mut thresholds = Vec::with_capacity(t_max);
        for t in 0..t_max {
            thresholds.push(f(4 + t)?);
        }
        let mut exit_counts = Vec::with_capacity(t_max);
        for t in 0..t_max {
            exit_counts.push(cells[4 + t_max + t].parse().map_err(|_| {
                GfError::input(format!("bad count {}", cells[4 + t_max + t]))
            })?);
        }
        points.push(CurvePoint {
            budget: f(0)?,
            realized_cost: f(1)?,
            accuracy: f(2)?,
            q: f(3)?,
            thresholds,
            exit_counts,
        });
    }
    Ok((points, prov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvStage;
    use tempfile::tempdir;

    fn desk_cfg() -> ModelConfig {
        ModelConfig::desk_default()
    }

    #[test]
    fn quadratic_resolution_scaling_matches_claim() {
        let cfg = desk_cfg();
        let (_, at96) = encoder_macs(&cfg.encoder, 3, 96, "e");
        let (_, at224) = encoder_macs(&cfg.encoder, 3, 224, "e");
        let ratio = at96 as f64 / at224 as f64;
        assert!(
            (0.175..=0.19).contains(&ratio),
            "96/224 MAC ratio {ratio} should be about 0.18"
        );
    }

    #[test]
    fn doubling_channels_doubles_that_layer() {
        let mut cfg = desk_cfg();
        let (layers, _) = encoder_macs(&cfg.encoder, 3, 32, "e");
        let base = layers[1].macs;
        cfg.encoder.stages[1].out_channels *= 2;
        let (layers2, _) = encoder_macs(&cfg.encoder, 3, 32, "e");
        assert_eq!(layers2[1].macs, base * 2);
    }

    #[test]
    fn tiny_network_matches_hand_count() {
        // 3->4 channels on 8x8 stride 1 pad 1 (out 8x8), then 4->6 stride 2
        // (out 4x4): 4*3*9*64 = 6912 and 6*4*9*16 = 3456
        let cfg = EncoderConfig {
            stages: vec![
                ConvStage {
                    out_channels: 4,
                    stride: 1,
                },
                ConvStage {
                    out_channels: 6,
                    stride: 2,
                },
            ],
        };
        let (layers, total) = encoder_macs(&cfg, 3, 8, "e");
        assert_eq!(layers[0].macs, 6912);
        assert_eq!(layers[1].macs, 3456);
        assert_eq!(total, 6912 + 3456);
    }

    #[test]
    fn cumulative_costs_strictly_increase() {
        let counts = count_ops(&desk_cfg());
        let cm = counts.cost_model().unwrap();
        for w in cm.per_exit.windows(2) {
            assert!(w[1] > w[0]);
        }
        // glance-only cost excludes local encoder and policy
        assert_eq!(
            counts.cumulative_cost(1),
            counts.global_encoder + counts.classifier_per_step[0] + counts.aux_per_step[0]
        );
    }

    #[test]
    fn component_totals_sum_parts() {
        let counts = count_ops(&desk_cfg());
        let totals = counts.component_totals();
        let layer_sum: u64 = counts
            .layers
            .iter()
            .filter(|l| l.name.starts_with("g."))
            .map(|l| l.macs)
            .sum();
        assert_eq!(totals[0].1, layer_sum);
    }

    #[test]
    fn quarter_scaling_for_half_side() {
        let cfg = desk_cfg();
        let (_, small) = encoder_macs(&cfg.encoder, 3, 64, "e");
        let (_, big) = encoder_macs(&cfg.encoder, 3, 128, "e");
        let ratio = small as f64 / big as f64;
        assert!((0.24..=0.26).contains(&ratio), "half-side ratio {ratio}");
    }

    #[test]
    fn auto_budgets_span_cost_range() {
        let counts = count_ops(&desk_cfg());
        let cm = counts.cost_model().unwrap();
        let budgets = auto_budgets(&cm, 10);
        assert_eq!(budgets.len(), 10);
        assert!((budgets[0] - cm.min_cost()).abs() / cm.min_cost() < 1e-9);
        assert!((budgets[9] - cm.max_cost()).abs() / cm.max_cost() < 1e-9);
        for w in budgets.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        let points = vec![
            CurvePoint {
                budget: 100.5,
                realized_cost: 99.25,
                accuracy: 0.71,
                q: 0.4,
                thresholds: vec![0.9, 0.5, 0.0],
                exit_counts: vec![10, 20, 70],
            },
            CurvePoint {
                budget: 200.0,
                realized_cost: 180.0,
                accuracy: 0.825,
                q: 0.1,
                thresholds: vec![0.99, 0.6, 0.0],
                exit_counts: vec![1, 9, 90],
            },
        ];
        let prov = Provenance {
            checkpoint_digest: "abc123".to_string(),
            config_digest: "def456".to_string(),
            seed: 7,
        };
        export_csv(&points, &prov, &path).unwrap();
        let (back, prov2) = parse_csv(&path).unwrap();
        assert_eq!(points, back);
        assert_eq!(prov, prov2);
        // header carries the checkpoint checksum
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("# checkpoint = abc123"));
        // fixed column count: 4 + 2*T
        let header = text.lines().find(|l| l.starts_with("budget,")).unwrap();
        assert_eq!(header.split(',').count(), 4 + 2 * 3);
    }

    #[test]
    fn empty_export_is_error() {
        let dir = tempdir().unwrap();
        let prov = Provenance {
            checkpoint_digest: String::new(),
            config_digest: String::new(),
            seed: 0,
        };
        assert!(export_csv(&[], &prov, &dir.path().join("x.csv")).is_err());
    }
}
