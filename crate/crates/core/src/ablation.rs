//! Sampling-strategy ablation: planted-support recovery and toy restoration.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::msa::{strategy_masks, AttentionMap, SparsityConfig, Strategy};
use crate::run::{AblationConfig, RunConfig};
use crate::train::train_toy;

/// Histogram bins over `value / row max` in `[0, 1]`.
pub const HISTOGRAM_BINS: usize = 20;

/// The compared strategies, in report order.
pub fn strategies(cfg: &AblationConfig) -> Vec<Strategy> {
    vec![
        Strategy::TopK(cfg.support),
        Strategy::MinP,
        Strategy::MinPTrusted,
        Strategy::Fed,
        Strategy::Isa,
    ]
}

/// A square map with `support` planted entries per row (or `1..=support` when
/// `variable_support`),
/// amplitudes in `[amp_min, 1]`, plus Gaussian noise of std `noise`.
pub fn planted_map<R: Rng + ?Sized>(cfg: &AblationConfig, noise: f32, rng: &mut R) -> (AttentionMap, Vec<bool>) {
    let n = cfg.map_size;
    let mut values = vec![0.0f32; n * n];
    let mut truth = vec![false; n * n];
    for r in 0..n {
        let k = if cfg.variable_support { rng.random_range(1..=cfg.support) } else { cfg.support };
        for c in rand::seq::index::sample(rng, n, k) {
            truth[r * n + c] = true;
            values[r * n + c] = rng.random_range(cfg.amp_min..=1.0);
        }
    }
    if noise > 0.0 {
        let normal = Normal::new(0.0f32, noise).expect("finite noise");
        for v in &mut values {
            *v += normal.sample(rng);
        }
    }
    (AttentionMap::new(n, n, values).expect("square map"), truth)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn add(&mut self, predicted: &[bool], truth: &[bool]) {
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                _ => {}
            }
        }
    }

    /// Precision, recall and F1; an empty denominator counts as perfect.
    pub fn scores(&self) -> (f64, f64, f64) {
        let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportResult {
    pub strategy: Strategy,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Per-seed F1 values.
    pub seed_f1: Vec<f64>,
    /// Cumulative fraction of retained values with `value / row max` at or below each bin edge.
    pub cumulative: Vec<f64>,
}

/// Runs every strategy on the same maps for each seed; scores are averaged over seeds.
///
/// FED and ISA use the benchmark thresholds from the ablation config.
pub fn support_recovery(cfg: &RunConfig, noise: f32) -> Result<Vec<SupportResult>> {
    let a = &cfg.ablation;
    let mut results = Vec::new();
    for strategy in strategies(a) {
        let mut trust = cfg.model.sparsity.trust.clone();
        trust.fed_tau = a.fed_tau;
        trust.isa_initial_tau = a.fed_tau;
        trust.isa_alpha = a.isa_alpha;
        let sparsity = SparsityConfig {
            p_base: a.p_base,
            strategy,
            trust,
        };
        let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
        let mut seed_f1 = Vec::with_capacity(a.seeds);
        let mut hist = vec![0u64; HISTOGRAM_BINS];
        for s in 0..a.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(s as u64));
            let (maps, truths): (Vec<_>, Vec<_>) = (0..a.maps_per_seed).map(|_| planted_map(a, noise, &mut rng)).unzip();
            let masks = strategy_masks(&maps, &sparsity)?;
            let mut counts = Counts::default();
            for ((map, truth), mask) in maps.iter().zip(&truths).zip(&masks) {
                let predicted: Vec<bool> = mask.iter().zip(map.values()).map(|(&m, &v)| m && v != 0.0).collect();
                counts.add(&predicted, truth);
                accumulate_histogram(map, &predicted, &mut hist);
            }
            let (p, r, f) = counts.scores();
            sp += p;
            sr += r;
            sf += f;
            seed_f1.push(f);
        }
        let n = a.seeds as f64;
        let total: u64 = hist.iter().sum();
        let mut run = 0u64;
        let cumulative = hist
            .iter()
            .map(|&h| {
                run += h;
                if total == 0 { 0.0 } else { run as f64 / total as f64 }
            })
            .collect();
        results.push(SupportResult {
            strategy,
            precision: sp / n,
            recall: sr / n,
            f1: sf / n,
            seed_f1,
            cumulative,
        });
    }
    Ok(results)
}

fn accumulate_histogram(map: &AttentionMap, retained: &[bool], hist: &mut [u64]) {
    let w = map.width();
    for r in 0..map.height() {
        let row = map.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if !(max > 0.0) {
            continue;
        }
        for (c, &v) in row.iter().enumerate() {
            if retained[r * w + c] {
                let x = (v / max).clamp(0.0, 1.0) as f64;
                let bin = ((x * HISTOGRAM_BINS as f64).ceil() as usize).clamp(1, HISTOGRAM_BINS) - 1;
                hist[bin] += 1;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestorationResult {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub support: Vec<SupportResult>,
    /// One entry per strategy when `train_iterations > 0`.
    pub restoration: Option<Vec<RestorationResult>>,
}

pub fn run_ablation(cfg: &RunConfig) -> Result<AblationReport> {
    let support = support_recovery(cfg, cfg.ablation.noise)?;
    let restoration = if cfg.ablation.train_iterations > 0 {
        let mut rows = Vec::new();
        for s in &support {
            let mut model = cfg.model.clone();
            model.sparsity.strategy = s.strategy;
            let out = train_toy(cfg, &model, cfg.ablation.train_iterations)?;
            rows.push(RestorationResult {
                psnr: out.final_eval.psnr,
                ssim: out.final_eval.ssim,
            });
        }
        Some(rows)
    } else {
        None
    };
    Ok(AblationReport { support, restoration })
}

impl AblationReport {
    pub fn table_csv(&self, cfg: &RunConfig) -> String {
        let mut s = cfg.csv_preamble();
        s.push_str("strategy,precision,recall,f1,f1_std,restore_psnr,restore_ssim\n");
        for (i, r) in self.support.iter().enumerate() {
            let n = r.seed_f1.len().max(1) as f64;
            let std = (r.seed_f1.iter().map(|f| (f - r.f1).powi(2)).sum::<f64>() / n).sqrt();
            let (ps, ss) = match &self.restoration {
                Some(rows) => (format!("{:.4}", rows[i].psnr), format!("{:.4}", rows[i].ssim)),
                None => (String::new(), String::new()),
            };
            writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{ps},{ss}",
                r.strategy.name(),
                r.precision,
                r.recall,
                r.f1,
                std
            )
            .expect("string write");
        }
        s
    }

    pub fn histogram_csv(&self, cfg: &RunConfig) -> String {
        let mut s = cfg.csv_preamble();
        s.push_str("strategy,bin_upper,cumulative_probability\n");
        for r in &self.support {
            for (b, c) in r.cumulative.iter().enumerate() {
                writeln!(s, "{},{:.2},{:.6}", r.strategy.name(), (b + 1) as f64 / HISTOGRAM_BINS as f64, c)
                    .expect("string write");
            }
        }
        s
    }
}
