//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use crate::config::{parse_pairs, parse_value};
use crate::degrade::Degradation;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr: f32,
    pub weight_decay: f32,
    /// Side of the held-out evaluation crops.
    pub eval_size: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch: 4,
            crop: 32,
            lr: 2e-4,
            weight_decay: 1e-4,
            eval_size: 64,
            eval_batch: 4,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub seeds: usize,
    /// Side of the square planted-support maps.
    pub map_size: usize,
    pub maps_per_seed: usize,
    /// Entries per planted row; top_k is given this `k`.
    pub support: usize,
    /// Draw each row's support from `1..=support` instead, so the fixed `k` over-selects.
    pub variable_support: bool,
    /// Signal amplitudes are uniform in `[amp_min, 1]`.
    pub amp_min: f32,
    pub noise: f32,
    pub p_base: f32,
    /// FED threshold and ISA starting threshold used by the benchmark.
    pub fed_tau: f32,
    pub isa_alpha: f32,
    /// Toy restoration iterations per strategy; 0 skips the restoration table.
    pub train_iterations: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: 50,
            map_size: 16,
            maps_per_seed: 8,
            support: 4,
            variable_support: false,
            amp_min: 0.5,
            noise: 0.1,
            p_base: 0.5,
            fed_tau: 6.0,
            isa_alpha: 6.0,
            train_iterations: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub seed: u64,
    pub degradation: Degradation,
    pub data_dir: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub tile: usize,
    pub overlap: usize,
    pub bench_size: usize,
    pub grad_seeds: usize,
    pub grad_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
            seed: 42,
            degradation: Degradation::GaussianNoise { sigma: 0.1 },
            data_dir: None,
            out: PathBuf::from("out"),
            checkpoint: None,
            tile: 256,
            overlap: 32,
            bench_size: 256,
            grad_seeds: 5,
            grad_tolerance: 1e-3,
        }
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    /// Parses `text`, then applies `overrides` in order; an override replaces any
    /// earlier value of the same key.
    pub fn from_text_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        for (k, v) in overrides {
            match pairs.iter_mut().find(|(pk, _)| pk == k) {
                Some(slot) => slot.1 = v.clone(),
                None => pairs.push((k.clone(), v.clone())),
            }
        }
        Self::from_pairs(pairs)
    }

    pub fn from_pairs(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut strategy = None;
        let mut top_k = None;
        let mut degradation = None;
        let (mut sigma, mut gamma, mut haze_t, mut haze_a) = (0.1f32, 2.2f32, 0.6f32, 0.9f32);
        for (k, v) in pairs {
            let key = k.as_str();
            if cfg.model.apply(key, &v)? {
                continue;
            }
            let t = &mut cfg.train;
            let a = &mut cfg.ablation;
            match key {
                "strategy" => strategy = Some(v),
                "top_k" => top_k = Some(parse_value(key, &v)?),
                "iterations" => t.iterations = parse_value(key, &v)?,
                "batch" => t.batch = parse_value(key, &v)?,
                "crop" => t.crop = parse_value(key, &v)?,
                "lr" => t.lr = parse_value(key, &v)?,
                "weight_decay" => t.weight_decay = parse_value(key, &v)?,
                "eval_size" => t.eval_size = parse_value(key, &v)?,
                "eval_batch" => t.eval_batch = parse_value(key, &v)?,
                "seed" => cfg.seed = parse_value(key, &v)?,
                "degradation" => degradation = Some(v),
                "noise_sigma" => sigma = parse_value(key, &v)?,
                "gamma" => gamma = parse_value(key, &v)?,
                "haze_t" => haze_t = parse_value(key, &v)?,
                "haze_a" => haze_a = parse_value(key, &v)?,
                "data_dir" => cfg.data_dir = (!v.is_empty()).then(|| PathBuf::from(&v)),
                "out" => cfg.out = PathBuf::from(&v),
                "checkpoint" => cfg.checkpoint = (!v.is_empty()).then(|| PathBuf::from(&v)),
                "tile" => cfg.tile = parse_value(key, &v)?,
                "overlap" => cfg.overlap = parse_value(key, &v)?,
                "bench_size" => cfg.bench_size = parse_value(key, &v)?,
                "ablate_seeds" => a.seeds = parse_value(key, &v)?,
                "ablate_map_size" => a.map_size = parse_value(key, &v)?,
                "ablate_maps_per_seed" => a.maps_per_seed = parse_value(key, &v)?,
                "ablate_support" => a.support = parse_value(key, &v)?,
                "ablate_variable_support" => a.variable_support = parse_value(key, &v)?,
                "ablate_amp_min" => a.amp_min = parse_value(key, &v)?,
                "ablate_noise" => a.noise = parse_value(key, &v)?,
                "ablate_p_base" => a.p_base = parse_value(key, &v)?,
                "ablate_fed_tau" => a.fed_tau = parse_value(key, &v)?,
                "ablate_isa_alpha" => a.isa_alpha = parse_value(key, &v)?,
                "ablate_train_iterations" => a.train_iterations = parse_value(key, &v)?,
                "grad_seeds" => cfg.grad_seeds = parse_value(key, &v)?,
                "grad_tolerance" => cfg.grad_tolerance = parse_value(key, &v)?,
                _ => return Err(Error::UnknownKey(k)),
            }
        }
        cfg.model.set_strategy(strategy.as_deref(), top_k)?;
        cfg.degradation = match degradation.as_deref().unwrap_or("gaussian_noise") {
            "gaussian_noise" => Degradation::GaussianNoise { sigma },
            "gamma_darken" => Degradation::GammaDarken { gamma },
            "haze" => Degradation::Haze { t: haze_t, airlight: haze_a },
            other => return Err(Error::Config(format!("unknown degradation `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.degradation.validate()?;
        let t = &self.train;
        if t.batch == 0 || t.crop == 0 || t.eval_batch == 0 || t.eval_size == 0 {
            return Err(Error::Config("batch, crop, eval_batch and eval_size must be positive".into()));
        }
        if t.crop < self.model.min_size() {
            return Err(Error::Config(format!(
                "crop {} is smaller than the model minimum {}",
                t.crop,
                self.model.min_size()
            )));
        }
        if !(t.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be nonnegative, got {}", t.lr)));
        }
        if self.tile <= 2 * self.overlap {
            return Err(Error::Config(format!(
                "tile ({}) must exceed twice the overlap ({})",
                self.tile, self.overlap
            )));
        }
        let a = &self.ablation;
        if a.map_size < 2 || a.support == 0 || a.support > a.map_size || a.seeds == 0 || a.maps_per_seed == 0 {
            return Err(Error::Config("ablation sizes are inconsistent".into()));
        }
        if !(a.fed_tau > 0.0) || !(a.isa_alpha > 0.0) || !(0.0..=1.0).contains(&a.p_base) || !(a.amp_min > 0.0 && a.amp_min <= 1.0) {
            return Err(Error::Config("ablation thresholds are out of range".into()));
        }
        Ok(())
    }

    /// Every setting as `key = value` lines, in a fixed order.
    pub fn echo(&self) -> Vec<String> {
        let mut lines: Vec<String> = self.model.to_pairs().iter().map(|(k, v)| format!("{k} = {v}")).collect();
        let t = &self.train;
        let a = &self.ablation;
        let mut push = |k: &str, v: String| lines.push(format!("{k} = {v}"));
        push("iterations", t.iterations.to_string());
        push("batch", t.batch.to_string());
        push("crop", t.crop.to_string());
        push("lr", t.lr.to_string());
        push("weight_decay", t.weight_decay.to_string());
        push("eval_size", t.eval_size.to_string());
        push("eval_batch", t.eval_batch.to_string());
        push("seed", self.seed.to_string());
        push("degradation", self.degradation.name().to_string());
        match self.degradation {
            Degradation::GaussianNoise { sigma } => push("noise_sigma", sigma.to_string()),
            Degradation::GammaDarken { gamma } => push("gamma", gamma.to_string()),
            Degradation::Haze { t, airlight } => {
                push("haze_t", t.to_string());
                push("haze_a", airlight.to_string());
            }
        }
        push("data_dir", opt_path(&self.data_dir));
        push("out", self.out.display().to_string());
        push("checkpoint", opt_path(&self.checkpoint));
        push("tile", self.tile.to_string());
        push("overlap", self.overlap.to_string());
        push("bench_size", self.bench_size.to_string());
        push("ablate_seeds", a.seeds.to_string());
        push("ablate_map_size", a.map_size.to_string());
        push("ablate_maps_per_seed", a.maps_per_seed.to_string());
        push("ablate_support", a.support.to_string());
        push("ablate_variable_support", a.variable_support.to_string());
        push("ablate_amp_min", a.amp_min.to_string());
        push("ablate_noise", a.noise.to_string());
        push("ablate_p_base", a.p_base.to_string());
        push("ablate_fed_tau", a.fed_tau.to_string());
        push("ablate_isa_alpha", a.isa_alpha.to_string());
        push("ablate_train_iterations", a.train_iterations.to_string());
        push("grad_seeds", self.grad_seeds.to_string());
        push("grad_tolerance", self.grad_tolerance.to_string());
        lines
    }

    /// The echoed config as `# ` comment lines, for CSV preambles.
    pub fn csv_preamble(&self) -> String {
        self.echo().iter().map(|l| format!("# {l}\n")).collect()
    }
}
