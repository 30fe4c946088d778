//! Toy restoration training on synthetic degradations.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::degrade::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, SsimParams};
use crate::model::{ModelConfig, TsFormer};
use crate::ops::loss::l1_loss;
use crate::optim::AdamW;
use crate::run::RunConfig;
use crate::tensor::Tensor;

const EVAL_STREAM: u64 = 0x5eed_0e7a_1000_0001;

/// A held-out `(degraded, clean)` pair that never overlaps the training stream.
pub fn eval_pair(cfg: &RunConfig, dataset: &Dataset) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_STREAM);
    let clean = dataset.sample(cfg.train.eval_batch, cfg.train.eval_size, &mut rng);
    let degraded = cfg.degradation.apply(&clean, rng.random());
    (degraded, clean)
}

pub fn dataset_for(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => Dataset::from_dir(dir, cfg.train.crop.max(cfg.train.eval_size)),
        None => Ok(Dataset::Procedural),
    }
}

#[derive(Clone, Debug)]
pub struct EvalStats {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

fn evaluate(model: &TsFormer, degraded: &Tensor, clean: &Tensor) -> Result<EvalStats> {
    let restored = model.infer(degraded)?;
    let clamped = restored.map(|v| v.clamp(0.0, 1.0));
    Ok(EvalStats {
        l1: l1_loss(&restored, clean)? as f64,
        psnr: psnr(&clamped, clean, 1.0)?,
        ssim: ssim(&clamped, clean, SsimParams::default())?,
    })
}

pub struct TrainOutcome {
    pub model: TsFormer,
    /// Training-batch L1 at every iteration, before the update.
    pub losses: Vec<f32>,
    pub initial: EvalStats,
    pub final_eval: EvalStats,
    /// PSNR of the held-out degraded input against its clean target.
    pub degraded_psnr: f64,
}

impl TrainOutcome {
    pub fn loss_csv(&self, cfg: &RunConfig) -> String {
        let mut s = cfg.csv_preamble();
        s.push_str("iteration,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(s, "{i},{l}").expect("string write");
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "held-out L1 {:.5} -> {:.5} (ratio {:.3}); PSNR degraded {:.2} dB, restored {:.2} dB (initial {:.2} dB)",
            self.initial.l1,
            self.final_eval.l1,
            self.final_eval.l1 / self.initial.l1,
            self.degraded_psnr,
            self.final_eval.psnr,
            self.initial.psnr
        )
    }
}

/// Trains a freshly initialised model of `model_cfg` with the settings in `cfg`.
pub fn train_toy(cfg: &RunConfig, model_cfg: &ModelConfig, iterations: usize) -> Result<TrainOutcome> {
    let dataset = dataset_for(cfg)?;
    let mut model = TsFormer::new(model_cfg.clone(), cfg.seed)?;
    let (eval_in, eval_gt) = eval_pair(cfg, &dataset);
    let degraded_psnr = psnr(&eval_in, &eval_gt, 1.0)?;
    let initial = evaluate(&model, &eval_in, &eval_gt)?;

    let mut opt = AdamW::new(cfg.train.adamw(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let clean = dataset.sample(cfg.train.batch, cfg.train.crop, &mut rng);
        let degraded = cfg.degradation.apply(&clean, rng.random());
        let tape = Tape::new();
        let x = tape.constant(degraded);
        let y = tape.constant(clean);
        let pred = model.forward(&tape, &x)?;
        let loss = tape.l1_loss(&pred, &y)?;
        let lv = loss.value().data()[0];
        if !lv.is_finite() {
            return Err(Error::Consistency(format!("training loss became {lv} at iteration {it}")));
        }
        losses.push(lv);
        model.params.zero_grad();
        tape.backward(&loss)?.apply_to(&mut model.params);
        opt.step(&mut model.params)?;
    }
    let final_eval = evaluate(&model, &eval_in, &eval_gt)?;
    Ok(TrainOutcome {
        model,
        losses,
        initial,
        final_eval,
        degraded_psnr,
    })
}
