//! Clipped-surrogate policy optimization for the patch proposal network.
//!
//! Rewards are confidence increments on the true class, r_t = p_t,y -
//! p_(t-1),y for t in [2, T]. Returns are plain discounted reward tails,
//! advantages subtract the learned state value, and the update maximizes
//! mean[L_CLIP - c1 * L_VF + c2 * S] over minibatches of whole episodes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::ImageF32;
use crate::error::{GfError, Result};
use crate::model::{GfModel, Policy, Trainable};
use crate::numcore::{softmax_row_f64, Optimizer, Tape, Tensor, Tid};
use crate::trainer::{unroll, LocationSource};

/// Probability floor applied to the stored true-class probabilities.
/// With both operands at or above 2^-24, every f32 difference and every
/// partial sum of the telescoping series is exactly representable in f64,
/// so reward sums telescope bitwise.
pub const PROB_FLOOR: f32 = 5.960_464_5e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    /// Reward discount.
    pub gamma: f64,
    /// Clipped-surrogate epsilon.
    pub clip: f64,
    /// Value-loss coefficient.
    pub c1: f64,
    /// Entropy-bonus coefficient.
    pub c2: f64,
    pub lr: f32,
    /// Passes over each rollout buffer per update.
    pub update_epochs: usize,
    /// Episodes per update minibatch.
    pub minibatch: usize,
    /// Episodes collected per rollout buffer.
    pub rollout_batch: usize,
    /// Passes over the training set.
    pub epochs: usize,
    pub normalize_advantages: bool,
    pub seed: u64,
}

impl PpoConfig {
    pub fn default_with_seed(seed: u64) -> Self {
        PpoConfig {
            gamma: 0.7,
            clip: 0.2,
            c1: 0.5,
            c2: 0.01,
            lr: 3e-4,
            update_epochs: 4,
            minibatch: 256,
            rollout_batch: 256,
            epochs: 15,
            normalize_advantages: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(GfError::config(format!(
                "gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(GfError::config(format!(
                "clip epsilon must lie in (0,1), got {}",
                self.clip
            )));
        }
        Ok(())
    }
}

/// Flat per-(step, episode) rollout storage. Step index s corresponds to
/// the action l_(s+2) proposed after observing step s+1.
pub struct Rollout {
    pub batch: usize,
    pub t_max: usize,
    /// Feature-map shape (F, eh, ew) the policy consumes.
    pub feat_shape: (usize, usize, usize),
    /// feats[s] holds B flattened maps of e_(s+1).
    pub feats: Vec<Vec<f32>>,
    /// Unclipped sampled actions, [s][episode].
    pub raw_actions: Vec<Vec<(f64, f64)>>,
    pub old_log_probs: Vec<Vec<f64>>,
    pub old_values: Vec<Vec<f64>>,
    /// r_(s+2) = p_(s+2),y - p_(s+1),y.
    pub rewards: Vec<Vec<f64>>,
    /// True-class probabilities per step (floored), [t][episode].
    pub true_probs: Vec<Vec<f32>>,
    /// V_target(s_t): discounted reward tail.
    pub returns: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
}

impl Rollout {
    /// Fill returns and advantages from rewards and recorded values.
    pub fn finalize(&mut self, gamma: f64) {
        let steps = self.rewards.len();
        self.returns = vec![vec![0.0; self.batch]; steps];
        self.advantages = vec![vec![0.0; self.batch]; steps];
        for b in 0..self.batch {
            let mut tail = 0.0f64;
            for s in (0..steps).rev() {
                tail = self.rewards[s][b] + gamma * tail;
                self.returns[s][b] = tail;
                self.advantages[s][b] = tail - self.old_values[s][b];
            }
        }
    }

    /// Undiscounted reward sum of one episode; telescopes to
    /// p_T,y - p_1,y exactly.
    pub fn episode_reward(&self, b: usize) -> f64 {
        self.rewards.iter().map(|r| r[b]).sum()
    }

    pub fn mean_episode_reward(&self) -> f64 {
        (0..self.batch).map(|b| self.episode_reward(b)).sum::<f64>() / self.batch.max(1) as f64
    }
}

/// Run full-length stochastic episodes on the frozen model and package
/// the policy-relevant record. Early exit is off: every episode has
/// length exactly T.
pub fn collect_rollouts(
    model: &GfModel,
    images: &[ImageF32],
    labels: &[usize],
    stats: (&[f64], &[f64]),
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    cfg.validate()?;
    let t_max = model.config.t_max;
    let b = images.len();
    let c = model.config.num_classes;
    let f = model.config.feature_dim();
    let side = model.config.encoder.out_side(model.config.patch_side);

    let mut tape = Tape::new();
    let ids = model.stage(&mut tape, Trainable::none());
    let mut source = LocationSource::PolicyStochastic(rng);
    let unrolled = unroll(&mut tape, &ids, model, images, stats, &mut source)?;
    let sto = unrolled.stochastic.expect("stochastic source records actions");

    // true-class probabilities per step, floored for exact telescoping
    let mut true_probs = Vec::with_capacity(t_max);
    for &logits in &unrolled.logits {
        let data = tape.value(logits).data();
        let mut per = Vec::with_capacity(b);
        for (row, &y) in labels.iter().enumerate() {
            let probs = softmax_row_f64(&data[row * c..(row + 1) * c]);
            per.push((probs[y] as f32).max(PROB_FLOOR));
        }
        true_probs.push(per);
    }

    let mut rewards = Vec::with_capacity(t_max - 1);
    for t in 1..t_max {
        let per: Vec<f64> = (0..b)
            .map(|i| true_probs[t][i] as f64 - true_probs[t - 1][i] as f64)
            .collect();
        rewards.push(per);
    }

    let feats = unrolled.feats[..t_max - 1]
        .iter()
        .map(|&id| tape.value(id).data().to_vec())
        .collect();

    let mut rollout = Rollout {
        batch: b,
        t_max,
        feat_shape: (f, side, side),
        feats,
        raw_actions: sto.raw_actions,
        old_log_probs: sto.log_probs,
        old_values: sto.values,
        rewards,
        true_probs,
        returns: Vec::new(),
        advantages: Vec::new(),
    };
    rollout.finalize(cfg.gamma);
    Ok(rollout)
}

/// Build the PPO maximization objective over the given episode indices.
/// Returns the scalar tape node and its f64 value.
pub fn build_objective(
    tape: &mut Tape,
    ids: &crate::model::PolicyIds,
    model: &GfModel,
    rollout: &Rollout,
    advantages: &[Vec<f64>],
    cfg: &PpoConfig,
    indices: &[usize],
) -> Result<(Tid, f64)> {
    let bm = indices.len();
    let steps = rollout.t_max - 1;
    let (f, eh, ew) = rollout.feat_shape;
    let flat = f * eh * ew;

    let mut state = Policy::init_state(ids, tape, bm);
    let mut acc: Option<Tid> = None;
    let mut acc_f64 = 0.0f64;
    for s in 0..steps {
        let mut feat_data = Vec::with_capacity(bm * flat);
        for &i in indices {
            feat_data.extend_from_slice(&rollout.feats[s][i * flat..(i + 1) * flat]);
        }
        let feats = tape.constant(Tensor::new(vec![bm, f, eh, ew], feat_data)?);
        let step = Policy::step(ids, tape, feats, state)?;
        state = step.new_state;

        let mut action_data = Vec::with_capacity(bm * 2);
        let mut old_lp = Vec::with_capacity(bm);
        let mut adv = Vec::with_capacity(bm);
        let mut vt = Vec::with_capacity(bm);
        for &i in indices {
            let (ay, ax) = rollout.raw_actions[s][i];
            action_data.push(ay as f32);
            action_data.push(ax as f32);
            old_lp.push(rollout.old_log_probs[s][i] as f32);
            adv.push(advantages[s][i] as f32);
            vt.push(rollout.returns[s][i] as f32);
        }
        let actions = tape.constant(Tensor::new(vec![bm, 2], action_data)?);
        let lp_new = Policy::log_prob(ids, tape, step.mean, actions)?;
        let old = tape.constant(Tensor::new(vec![bm, 1], old_lp)?);
        let diff = tape.sub(lp_new, old)?;
        let ratio = tape.exp(diff);
        if tape.value(ratio).data().iter().any(|v| !v.is_finite()) {
            return Err(GfError::NonFinite(format!(
                "ppo ratio at proposal step {s} (old log-probs or policy output degenerate)"
            )));
        }

        let adv_t = tape.constant(Tensor::new(vec![bm, 1], adv)?);
        let surr1 = tape.mul(ratio, adv_t)?;
        let clipped = tape.clamp(ratio, (1.0 - cfg.clip) as f32, (1.0 + cfg.clip) as f32);
        let surr2 = tape.mul(clipped, adv_t)?;
        let l_clip = tape.min_elem(surr1, surr2)?;

        let vt_t = tape.constant(Tensor::new(vec![bm, 1], vt)?);
        let vd = tape.sub(step.value, vt_t)?;
        let l_vf = tape.mul(vd, vd)?;

        let scaled_vf = tape.scale(l_vf, cfg.c1 as f32);
        let term = tape.sub(l_clip, scaled_vf)?;
        let term_sum = tape.sum_all(term);
        acc_f64 += tape.scalar_f64(term_sum);
        acc = Some(match acc {
            Some(a) => tape.add(a, term_sum)?,
            None => term_sum,
        });
    }

    let denom = (bm * steps) as f32;
    let mean_terms = tape.scale(acc.expect("at least one proposal step"), 1.0 / denom);
    let entropy = Policy::entropy(ids, tape);
    let scaled_entropy = tape.scale(entropy, cfg.c2 as f32);
    let objective = tape.add(mean_terms, scaled_entropy)?;

    let sigma = model.policy.sigma();
    let entropy_f64 = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + 2.0 * sigma.ln();
    let objective_f64 = acc_f64 / denom as f64 + cfg.c2 * entropy_f64;
    Ok((objective, objective_f64))
}

/// One PPO update over a rollout buffer: `update_epochs` shuffled passes in
/// minibatches of whole episodes, maximizing the clipped objective with the
/// caller's Adam state.
pub fn ppo_update(
    model: &mut GfModel,
    rollout: &Rollout,
    cfg: &PpoConfig,
    opt: &mut Optimizer,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let advantages = if cfg.normalize_advantages {
        normalized_advantages(&rollout.advantages)
    } else {
        rollout.advantages.clone()
    };

    let mut order: Vec<usize> = (0..rollout.batch).collect();
    for _ in 0..cfg.update_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let mut tape = Tape::new();
            let ids = model.policy.stage(&mut tape, true);
            let (objective, _) =
                build_objective(&mut tape, &ids, model, rollout, &advantages, cfg, chunk)?;
            let loss = tape.scale(objective, -1.0);
            tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = ids
                .param_ids()
                .iter()
                .map(|&id| tape.grad_or_zeros(id))
                .collect();
            let mut params = model.policy.params_mut();
            opt.step(&mut params, &grads)?;
        }
    }
    Ok(())
}

/// Zero-mean unit-std advantages over the whole buffer.
pub fn normalized_advantages(adv: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let all: Vec<f64> = adv.iter().flatten().copied().collect();
    let n = all.len().max(1) as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter()
        .map(|row| row.iter().map(|a| (a - mean) / std).collect())
        .collect()
}

// ── synthetic corner-seeking bandit ──────────────────────────────────────

/// Outcome of the synthetic contextual-bandit run used to sanity-check the
/// optimizer: the state one-hot-encodes a target corner and the reward is
/// 1 - dist(action, corner)/sqrt(2).
pub struct BanditReport {
    pub rewards_per_update: Vec<f64>,
}

impl BanditReport {
    pub fn initial(&self) -> f64 {
        self.rewards_per_update[0]
    }

    pub fn final_reward(&self) -> f64 {
        *self.rewards_per_update.last().unwrap()
    }

    pub fn improvement(&self) -> f64 {
        (self.final_reward() - self.initial()) / self.initial().abs().max(1e-9)
    }
}

fn bandit_model(seed: u64) -> Result<GfModel> {
    use crate::model::{ClassifierKind, ConvStage, EncoderConfig, ModelConfig, PolicyConfig};
    let config = ModelConfig {
        in_channels: 3,
        image_side: 8,
        patch_side: 2,
        num_classes: 2,
        t_max: 2,
        encoder: EncoderConfig {
            stages: vec![ConvStage {
                out_channels: 4,
                stride: 2,
            }],
        },
        classifier: ClassifierKind::Gru { hidden: 8 },
        policy: PolicyConfig {
            reduce_channels: 4,
            hidden: 16,
            sigma: 0.1,
            learnable_sigma: false,
        },
    };
    GfModel::init(config, seed)
}

const CORNERS: [(f64, f64); 4] = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];

/// Train the proposal network on the corner bandit for `updates` rounds and
/// report the mean reward trajectory.
pub fn train_corner_bandit(seed: u64, updates: usize, batch: usize) -> Result<BanditReport> {
    let mut model = bandit_model(seed)?;
    // toy-scale optimizer settings; the tiny head needs a hot rate to move
    // its sigmoid output within 50 updates
    let cfg = PpoConfig {
        minibatch: batch,
        rollout_batch: batch,
        lr: 1e-2,
        update_epochs: 8,
        ..PpoConfig::default_with_seed(seed)
    };
    let mut opt = Optimizer::new(
        crate::numcore::OptimizerConfig::adam(cfg.lr),
        &model
            .policy
            .params_mut()
            .iter()
            .map(|p| p.numel())
            .collect::<Vec<_>>(),
    )?;

    let sigma = model.policy.sigma();
    let mut rewards_per_update = Vec::with_capacity(updates);
    for round in 0..updates {
        let mut rng = crate::rng::stream(seed, "bandit", round as u64);

        // collect one single-action rollout per episode
        let mut tape = Tape::new();
        let ids = model.policy.stage(&mut tape, false);
        let mut feats_flat = Vec::with_capacity(batch * 4);
        let mut corners = Vec::with_capacity(batch);
        for _ in 0..batch {
            let k = rng.gen_range(0..4usize);
            corners.push(k);
            let mut onehot = [0.0f32; 4];
            onehot[k] = 1.0;
            feats_flat.extend_from_slice(&onehot);
        }
        let feats = tape.constant(Tensor::new(vec![batch, 4, 1, 1], feats_flat.clone())?);
        let state = Policy::init_state(&ids, &mut tape, batch);
        let step = Policy::step(&ids, &mut tape, feats, state)?;
        let means = tape.value(step.mean).data().to_vec();
        let values = tape.value(step.value).data().to_vec();

        let mut raw_actions = Vec::with_capacity(batch);
        let mut log_probs = Vec::with_capacity(batch);
        let mut rewards = Vec::with_capacity(batch);
        for i in 0..batch {
            let mean = (means[2 * i] as f64, means[2 * i + 1] as f64);
            let (raw, loc) = crate::model::sample_action(mean, sigma, &mut rng);
            log_probs.push(crate::model::gaussian_log_prob(raw, mean, sigma));
            raw_actions.push(raw);
            let (cy, cx) = CORNERS[corners[i]];
            let dist = ((loc.y - cy).powi(2) + (loc.x - cx).powi(2)).sqrt();
            rewards.push(1.0 - dist / std::f64::consts::SQRT_2);
        }
        rewards_per_update.push(rewards.iter().sum::<f64>() / batch as f64);

        let mut rollout = Rollout {
            batch,
            t_max: 2,
            feat_shape: (4, 1, 1),
            feats: vec![feats_flat],
            raw_actions: vec![raw_actions],
            old_log_probs: vec![log_probs],
            old_values: vec![values.iter().map(|&v| v as f64).collect()],
            rewards: vec![rewards],
            true_probs: Vec::new(),
            returns: Vec::new(),
            advantages: Vec::new(),
        };
        rollout.finalize(cfg.gamma);

        let mut update_rng = crate::rng::stream(seed, "bandit-update", round as u64);
        ppo_update(&mut model, &rollout, &cfg, &mut opt, &mut update_rng)?;
    }
    Ok(BanditReport { rewards_per_update })
}
