//! The sequential adaptive inference loop: glance, confidence check, focus
//! steps at policy-proposed crops, early exit. Also anytime/full modes and
//! the baseline patch policies used for ablations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::budget::CostModel;
use crate::dataio::{crop_patch, normalize, patch_window, resize_glance, Dataset, ImageF32, Location};
use crate::error::{GfError, Result};
use crate::model::{
    Classifier, EncoderSel, GfModel, Policy, Trainable,
};
use crate::numcore::{softmax_row_f64, Tape, Tensor};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum InferenceMode {
    /// Early exit when confidence clears the step threshold.
    Budgeted { thresholds: Vec<f64> },
    /// Fixed exit at step t_star.
    Anytime { t_star: usize },
    /// Run all T steps.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum PolicyMode {
    Learned,
    Random { seed: u64 },
    CentreCorner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    pub policy: PolicyMode,
}

impl InferenceConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        match &self.mode {
            InferenceMode::Anytime { t_star } => {
                if *t_star == 0 || *t_star > t_max {
                    return Err(GfError::config(format!(
                        "anytime step {t_star} outside [1, {t_max}]"
                    )));
                }
            }
            InferenceMode::Budgeted { thresholds } => {
                if thresholds.len() != t_max {
                    return Err(GfError::config(format!(
                        "{} thresholds for T = {t_max}",
                        thresholds.len()
                    )));
                }
            }
            InferenceMode::Full => {}
        }
        Ok(())
    }
}

/// Fixed traversal baseline: centre first, then the four corners in order.
/// Steps beyond t = 6 wrap around the corner sequence.
pub fn centre_corner_policy(t: usize) -> Location {
    debug_assert!(t >= 2);
    if t == 2 {
        return Location::new(0.5, 0.5);
    }
    const CORNERS: [(f64, f64); 4] = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
    let (y, x) = CORNERS[(t - 3) % 4];
    Location::new(y, x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// None for the glance step; the (clamped) crop centre afterwards.
    pub location: Option<Location>,
    pub probs: Vec<f64>,
    pub confidence: f64,
    /// p_t,y - p_(t-1),y when the label is known; None at t = 1.
    pub reward: Option<f64>,
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub sample_id: usize,
    pub steps: Vec<StepRecord>,
    /// 1-based step at which the prediction was emitted.
    pub exit_step: usize,
    pub predicted: usize,
    pub label: Option<usize>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub exit_counts: Vec<usize>,
    pub avg_cost: f64,
}

/// Lowest-index argmax.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Read-only inference front end over a trained model.
pub struct Engine<'m> {
    pub model: &'m GfModel,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub cost: CostModel,
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m GfModel, mean: &[f64], std: &[f64], cost: CostModel) -> Result<Self> {
        if cost.t_max() != model.config.t_max {
            return Err(GfError::config(format!(
                "cost model over {} steps, model T = {}",
                cost.t_max(),
                model.config.t_max
            )));
        }
        Ok(Engine {
            model,
            mean: mean.to_vec(),
            std: std.to_vec(),
            cost,
        })
    }

    /// Run one episode. `image` is the raw [0,1] image; normalization with
    /// train-split statistics happens here, per step input.
    pub fn infer(
        &self,
        image: &ImageF32,
        label: Option<usize>,
        sample_id: usize,
        config: &InferenceConfig,
    ) -> Result<EpisodeTrace> {
        let t_max = self.model.config.t_max;
        config.validate(t_max)?;
        let spec = self.model.config.patch_spec();

        let mut tape = Tape::new();
        let ids = self.model.stage(&mut tape, Trainable::none());
        let mut cls_state = Classifier::init_state(&ids.classifier, &mut tape, 1);
        let mut pol_state = Policy::init_state(&ids.policy, &mut tape, 1);
        let mut rng = match config.policy {
            PolicyMode::Random { seed } => Some(stream(seed, "random-policy", sample_id as u64)),
            _ => None,
        };

        let mut steps: Vec<StepRecord> = Vec::with_capacity(t_max);
        let mut next_loc: Option<Location> = None;
        let mut exit_step = t_max;

        for t in 1..=t_max {
            let (input, which) = if t == 1 {
                (resize_glance(image, spec)?, EncoderSel::Global)
            } else {
                (
                    crop_patch(image, next_loc.expect("location set by previous step"), spec),
                    EncoderSel::Local,
                )
            };
            let normed = normalize(&input, &self.mean, &self.std);
            let x = tape.constant(Tensor::new(
                vec![1, input.c, input.h, input.w],
                normed.data,
            )?);
            let (e, ebar) = GfModel::encode(&ids, &mut tape, x, which)?;
            let (logits, new_state) =
                Classifier::step(&ids.classifier, &mut tape, ebar, cls_state, t, t_max)?;
            cls_state = new_state;

            let probs = softmax_row_f64(tape.value(logits).data());
            let confidence = probs.iter().copied().fold(0.0, f64::max);
            let reward = label.and_then(|y| {
                steps
                    .last()
                    .map(|prev: &StepRecord| probs[y] - prev.probs[y])
            });
            steps.push(StepRecord {
                location: if t == 1 { None } else { next_loc },
                probs: probs.clone(),
                confidence,
                reward,
                correct: label.map(|y| argmax(&probs) == y),
            });

            let halt = match &config.mode {
                InferenceMode::Full => t == t_max,
                InferenceMode::Anytime { t_star } => t == *t_star,
                InferenceMode::Budgeted { thresholds } => {
                    t == t_max || confidence > thresholds[t - 1]
                }
            };
            if halt {
                exit_step = t;
                break;
            }

            // propose the next location; the proposal network only runs on
            // non-exit steps, matching the cost model
            if t < t_max {
                let loc = match config.policy {
                    PolicyMode::Learned => {
                        let step = Policy::step(&ids.policy, &mut tape, e, pol_state)?;
                        pol_state = step.new_state;
                        let m = tape.value(step.mean).data();
                        Location::new(m[0] as f64, m[1] as f64)
                    }
                    PolicyMode::Random { .. } => {
                        let r = rng.as_mut().unwrap();
                        Location::new(r.gen_range(0.0..=1.0), r.gen_range(0.0..=1.0))
                    }
                    PolicyMode::CentreCorner => centre_corner_policy(t + 1),
                };
                next_loc = Some(loc);
            }
        }

        let exit_probs = &steps[exit_step - 1].probs;
        Ok(EpisodeTrace {
            sample_id,
            predicted: argmax(exit_probs),
            label,
            cost: self.cost.per_exit[exit_step - 1],
            exit_step,
            steps,
        })
    }

    /// Classify every sample; the summary is identical at any concurrency
    /// because per-sample work is independent and the reduction runs in
    /// sample order.
    pub fn batch_infer(
        &self,
        dataset: &Dataset,
        config: &InferenceConfig,
        concurrency: usize,
    ) -> Result<(Vec<EpisodeTrace>, InferSummary)> {
        let run = || -> Result<Vec<EpisodeTrace>> {
            use rayon::prelude::*;
            (0..dataset.len())
                .into_par_iter()
                .map(|i| {
                    self.infer(&dataset.image_f32(i), Some(dataset.label(i)), i, config)
                })
                .collect()
        };
        let traces = if concurrency == 0 {
            run()?
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(concurrency)
                .build()
                .map_err(|e| GfError::config(format!("thread pool: {e}")))?;
            pool.install(run)?
        };
        let summary = self.summarize(&traces);
        Ok((traces, summary))
    }

    pub fn summarize(&self, traces: &[EpisodeTrace]) -> InferSummary {
        let t_max = self.model.config.t_max;
        let mut exit_counts = vec![0usize; t_max];
        let mut correct = 0usize;
        for tr in traces {
            exit_counts[tr.exit_step - 1] += 1;
            if tr.label == Some(tr.predicted) {
                correct += 1;
            }
        }
        let n = traces.len();
        let avg_cost = exit_counts
            .iter()
            .zip(self.cost.per_exit.iter())
            .map(|(&k, &c)| k as f64 * c)
            .sum::<f64>()
            / n.max(1) as f64;
        InferSummary {
            n,
            correct,
            accuracy: correct as f64 / n.max(1) as f64,
            exit_counts,
            avg_cost,
        }
    }

    /// Full-T confidence corpus for threshold calibration: confidences[i][t]
    /// is sample i's max-softmax at step t+1 with early exit disabled.
    pub fn confidence_corpus(
        &self,
        dataset: &Dataset,
        policy: PolicyMode,
        concurrency: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let config = InferenceConfig {
            mode: InferenceMode::Full,
            policy,
        };
        let (traces, _) = self.batch_infer(dataset, &config, concurrency)?;
        Ok(traces
            .iter()
            .map(|tr| tr.steps.iter().map(|s| s.confidence).collect())
            .collect())
    }

    /// Pixel window of each focus step of a trace, for dump tooling.
    pub fn trace_windows(&self, trace: &EpisodeTrace, img_h: usize, img_w: usize) -> Vec<(usize, usize, usize, usize)> {
        let spec = self.model.config.patch_spec();
        trace
            .steps
            .iter()
            .filter_map(|s| s.location)
            .map(|loc| {
                let (top, left) = patch_window(loc, spec, img_h, img_w);
                (top, left, spec.h, spec.w)
            })
            .collect()
    }
}
