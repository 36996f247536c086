//! Scratch probe: stage 0 + stage 1 on a small corpus, reporting per-step
//! accuracies under the random policy.

use std::time::Instant;

use gfnet_core::dataio::synth::{self, SynthSpec};
use gfnet_core::model::{GfModel, ModelConfig};
use gfnet_core::trainer::{
    eval_per_step_accuracy, stage0_pretrain, stage1_train, stage2_train, stage3_finetune,
    EvalPolicy, PpoConfig, SupervisedStageConfig,
};

fn main() {
    let t0 = Instant::now();
    let corpus = synth::generate(SynthSpec {
        n_train: 2000,
        n_val: 500,
        n_test: 500,
        seed: 7,
    })
    .unwrap();

    let mut config = ModelConfig::desk_default();
    config.t_max = 4;
    let mut model = GfModel::init(config, 7).unwrap();
    let mut log = Vec::new();

    let s0 = SupervisedStageConfig {
        epochs: 6,
        batch_size: 100,
        classifier_lr: 0.1,
        encoder_lr: 0.05,
        ..SupervisedStageConfig::stage1_default(7)
    };
    stage0_pretrain(&mut model, &corpus.train, &s0, &mut log).unwrap();
    println!("stage0 done at {:?}", t0.elapsed());
    let acc = eval_per_step_accuracy(&model, &corpus.val, EvalPolicy::Random { seed: 1 }, 100).unwrap();
    println!("after stage0 (random policy): {acc:?}");

    let s1 = SupervisedStageConfig {
        epochs: 15,
        batch_size: 100,
        ..SupervisedStageConfig::stage1_default(7)
    };
    stage1_train(&mut model, &corpus.train, &s1, &mut log).unwrap();
    println!("stage1 done at {:?}", t0.elapsed());
    let acc = eval_per_step_accuracy(&model, &corpus.val, EvalPolicy::Random { seed: 1 }, 100).unwrap();
    println!("after stage1 (random policy): {acc:?}");
    let last = log.iter().rev().find_map(|r| r.loss);
    println!("final stage1 loss: {last:?}");

    let ppo = PpoConfig {
        epochs: 8,
        rollout_batch: 250,
        minibatch: 250,
        ..PpoConfig::default_with_seed(7)
    };
    stage2_train(&mut model, &corpus.train, &corpus.val, &ppo, &mut log).unwrap();
    println!("stage2 done at {:?}", t0.elapsed());
    for rec in log.iter().filter(|r| r.stage == 2) {
        println!(
            "  s2 epoch {} reward {:.4} val_acc {:.3}",
            rec.epoch,
            rec.mean_reward.unwrap_or(0.0),
            rec.val_accuracy.unwrap_or(0.0)
        );
    }
    let acc_l = eval_per_step_accuracy(&model, &corpus.val, EvalPolicy::Learned, 100).unwrap();
    let acc_r = eval_per_step_accuracy(&model, &corpus.val, EvalPolicy::Random { seed: 1 }, 100).unwrap();
    println!("after stage2 learned: {acc_l:?}");
    println!("after stage2 random : {acc_r:?}");

    let s3 = SupervisedStageConfig {
        epochs: 6,
        batch_size: 100,
        ..SupervisedStageConfig::stage3_default(7)
    };
    stage3_finetune(&mut model, &corpus.train, &s3, &mut log).unwrap();
    println!("stage3 done at {:?}", t0.elapsed());
    let acc_l = eval_per_step_accuracy(&model, &corpus.val, EvalPolicy::Learned, 100).unwrap();
    let acc_r = eval_per_step_accuracy(&model, &corpus.val, EvalPolicy::Random { seed: 1 }, 100).unwrap();
    println!("after stage3 learned: {acc_l:?}");
    println!("after stage3 random : {acc_r:?}");

    let locs = gfnet_core::trainer::policy_mean_locations(&model, &corpus.val, 100).unwrap();
    let mut bins = [0usize; 16];
    for (y, x) in &locs {
        let by = ((y * 4.0) as usize).min(3);
        let bx = ((x * 4.0) as usize).min(3);
        bins[by * 4 + bx] += 1;
    }
    println!("policy location bins (4x4): {bins:?}");
}
