//! Dense versus sparse throughput and FLOP comparison.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::metrics::{flops_report, FlopLedger, FlopReduction};
use crate::model::TsFormer;
use crate::msa::Strategy;
use crate::run::RunConfig;
use crate::tensor::Tensor;

/// Reference attention FLOP reduction quoted for the original architecture.
pub const REFERENCE_REDUCTION: f64 = 0.20;

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub name: String,
    pub seconds: f64,
    pub ledger: FlopLedger,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub size: usize,
    pub param_count: usize,
    pub dense: PipelineRun,
    pub sparse: PipelineRun,
    pub reduction: FlopReduction,
}

fn timed(model: &TsFormer, input: &Tensor, name: &str) -> Result<PipelineRun> {
    let tape = Tape::no_grad();
    let x = tape.constant(input.clone());
    let start = Instant::now();
    model.forward(&tape, &x)?;
    Ok(PipelineRun {
        name: name.to_string(),
        seconds: start.elapsed().as_secs_f64(),
        ledger: tape.ledger(),
    })
}

/// Runs the configured strategy and the dense pipeline on one random `bench_size` image.
pub fn run_bench(cfg: &RunConfig) -> Result<BenchReport> {
    let sparse_model = TsFormer::new(cfg.model.clone(), cfg.seed)?;
    let mut dense_model = sparse_model.clone();
    dense_model.config.sparsity.strategy = Strategy::Dense;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.bench_size;
    let input = Tensor::from_fn([1, 3, n, n], |_, _, _, _| rng.random::<f32>());
    let dense = timed(&dense_model, &input, "dense")?;
    let sparse = timed(&sparse_model, &input, cfg.model.sparsity.strategy.name())?;
    Ok(BenchReport {
        size: n,
        param_count: sparse_model.param_count(),
        reduction: flops_report(&sparse.ledger, &dense.ledger),
        dense,
        sparse,
    })
}

impl BenchReport {
    /// Deterministic FLOP ledger comparison.
    pub fn csv(&self, cfg: &RunConfig) -> String {
        let mut s = cfg.csv_preamble();
        s.push_str(
            "pipeline,conv_macs,fft_butterflies,attention_mults,attention_skipped,total_flops,\
             masked_fraction,attention_reduction,total_reduction,reference_attention_reduction,param_count\n",
        );
        for (run, red) in [(&self.dense, None), (&self.sparse, Some(self.reduction))] {
            let l = &run.ledger;
            writeln!(
                s,
                "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.2},{}",
                run.name,
                l.conv_macs,
                l.fft_butterflies,
                l.attention_mults,
                l.attention_skipped,
                l.total(),
                l.masked_fraction(),
                red.map_or(0.0, |r| r.attention),
                red.map_or(0.0, |r| r.total),
                REFERENCE_REDUCTION,
                self.param_count
            )
            .expect("string write");
        }
        s
    }

    /// Wall-clock timings, which vary between runs.
    pub fn timing_csv(&self, cfg: &RunConfig) -> String {
        let mut s = cfg.csv_preamble();
        s.push_str("pipeline,size,seconds,megapixels_per_second\n");
        for run in [&self.dense, &self.sparse] {
            let mp = (self.size * self.size) as f64 / 1e6;
            writeln!(s, "{},{},{:.6},{:.6}", run.name, self.size, run.seconds, mp / run.seconds.max(1e-12))
                .expect("string write");
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "{n}x{n}: dense {:.3} s, {} {:.3} s; attention FLOP reduction {:.2}% (masked fraction {:.2}%, reference {:.0}%), \
             total FLOP reduction {:.3}%; {} parameters",
            self.dense.seconds,
            self.sparse.name,
            self.sparse.seconds,
            100.0 * self.reduction.attention,
            100.0 * self.sparse.ledger.masked_fraction(),
            100.0 * REFERENCE_REDUCTION,
            100.0 * self.reduction.total,
            self.param_count,
            n = self.size
        )
    }
}
