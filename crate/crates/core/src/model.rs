//! Encoder-decoder restoration transformer built from trusted sparse blocks.

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{format_list, parse_list, parse_value};
use crate::error::{Error, Result};
use crate::msa::{Msa, SparsityConfig, Strategy};
use crate::nn::{Conv, LayerNorm, PRelu};
use crate::ops::conv::ConvSpec;
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Blocks per encoder level; the last level is the bottleneck.
    pub block_counts: Vec<usize>,
    pub expansion: f32,
    pub patch_size: usize,
    pub sparsity: SparsityConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            block_counts: vec![1, 2, 2, 4],
            expansion: 2.0,
            patch_size: 8,
            sparsity: SparsityConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.block_counts.len()
    }

    /// Spatial multiple every input is padded to.
    pub fn min_size(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn hidden_width(&self, channels: usize) -> usize {
        (self.expansion * channels as f32).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if self.block_counts.is_empty() {
            return Err(Error::Config("block_counts must not be empty".into()));
        }
        if !(self.expansion > 0.0) || self.hidden_width(self.base_channels) == 0 {
            return Err(Error::Config(format!(
                "expansion {} gives an empty hidden width",
                self.expansion
            )));
        }
        if self.patch_size == 0 || !self.patch_size.is_power_of_two() {
            return Err(Error::Config(format!("patch_size must be a power of two, got {}", self.patch_size)));
        }
        self.sparsity.validate()
    }

    /// Ordered `key, value` pairs as stored in checkpoints.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.sparsity.trust;
        let mut pairs = vec![
            ("base_channels", self.base_channels.to_string()),
            ("block_counts", format_list(&self.block_counts)),
            ("expansion", self.expansion.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("p_base", self.sparsity.p_base.to_string()),
            ("strategy", self.sparsity.strategy.name().to_string()),
        ];
        if let Strategy::TopK(k) = self.sparsity.strategy {
            pairs.push(("top_k", k.to_string()));
        }
        pairs.extend([
            ("spectral_size", t.spectral_size.to_string()),
            ("trust_beta", t.beta.to_string()),
            ("fed_tau", t.fed_tau.to_string()),
            ("isa_alpha", t.isa_alpha.to_string()),
            ("isa_initial_tau", t.isa_initial_tau.to_string()),
        ]);
        pairs
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies one key; returns `false` for keys this config does not own.
    ///
    /// `strategy` and `top_k` depend on each other and go through [`ModelConfig::set_strategy`].
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let t = &mut self.sparsity.trust;
        match key {
            "base_channels" => self.base_channels = parse_value(key, value)?,
            "block_counts" => self.block_counts = parse_list(key, value)?,
            "expansion" => self.expansion = parse_value(key, value)?,
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "p_base" => self.sparsity.p_base = parse_value(key, value)?,
            "spectral_size" => t.spectral_size = parse_value(key, value)?,
            "trust_beta" => t.beta = parse_value(key, value)?,
            "fed_tau" => t.fed_tau = parse_value(key, value)?,
            "isa_alpha" => t.isa_alpha = parse_value(key, value)?,
            "isa_initial_tau" => t.isa_initial_tau = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut top_k = None;
        let mut strategy = None;
        for (k, v) in crate::config::parse_pairs(text)? {
            match k.as_str() {
                "top_k" => top_k = Some(parse_value::<usize>(&k, &v)?),
                "strategy" => strategy = Some(v),
                _ => {
                    if !cfg.apply(&k, &v)? {
                        return Err(Error::UnknownKey(k));
                    }
                }
            }
        }
        cfg.set_strategy(strategy.as_deref(), top_k)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_strategy(&mut self, strategy: Option<&str>, top_k: Option<usize>) -> Result<()> {
        let name = strategy.unwrap_or(self.sparsity.strategy.name());
        let k = match (top_k, self.sparsity.strategy) {
            (Some(k), _) => k,
            (None, Strategy::TopK(k)) => k,
            (None, _) => 1,
        };
        if top_k.is_some() && name != "top_k" {
            return Err(Error::Config(format!("`top_k` is only meaningful with strategy top_k, not {name}")));
        }
        self.sparsity.strategy = Strategy::parse(name, k)?;
        Ok(())
    }

    /// Fails on the first field whose value differs from `expected`.
    pub fn check_matches(&self, expected: &ModelConfig) -> Result<()> {
        let ours = self.to_pairs();
        let theirs = expected.to_pairs();
        for (k, v) in &theirs {
            let found = ours.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
            if found.as_ref() != Some(v) {
                return Err(Error::ConfigMismatch {
                    field: k.to_string(),
                    expected: v.clone(),
                    found: found.unwrap_or_else(|| "<absent>".into()),
                });
            }
        }
        if let Some((k, v)) = ours.iter().find(|(k, _)| !theirs.iter().any(|(t, _)| t == k)) {
            return Err(Error::ConfigMismatch {
                field: k.to_string(),
                expected: "<absent>".into(),
                found: v.clone(),
            });
        }
        Ok(())
    }
}

/// Gated feed-forward: `project(GELU(dw(e)) * pw(e))` with `e = expand(x)`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub expand: Conv,
    pub depthwise: Conv,
    pub pointwise: Conv,
    pub project: Conv,
}

impl Ffn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            expand: Conv::new(store, &format!("{name}.expand"), channels, hidden, ConvSpec::POINTWISE, rng)?,
            depthwise: Conv::new(store, &format!("{name}.depthwise"), hidden, hidden, ConvSpec::DEPTHWISE, rng)?,
            pointwise: Conv::new(store, &format!("{name}.pointwise"), hidden, hidden, ConvSpec::POINTWISE, rng)?,
            project: Conv::new(store, &format!("{name}.project"), hidden, channels, ConvSpec::POINTWISE, rng)?,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let e = self.expand.forward(tape, store, x)?;
        let gate = tape.gelu(&self.depthwise.forward(tape, store, &e)?);
        let value = self.pointwise.forward(tape, store, &e)?;
        self.project.forward(tape, store, &tape.mul(&gate, &value)?)
    }
}

/// Trusted sparse block: `x' = x + MSA(LN(x))`, `out = x' + FFN(LN(x'))`.
#[derive(Clone, Debug)]
pub struct Tsb {
    pub norm1: LayerNorm,
    pub msa: Msa,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

impl Tsb {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), channels)?,
            msa: Msa::new(store, &format!("{name}.msa"), channels, cfg.patch_size, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), channels)?,
            ffn: Ffn::new(store, &format!("{name}.ffn"), channels, cfg.hidden_width(channels), rng)?,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var, cfg: &SparsityConfig) -> Result<Var> {
        let a = self.msa.forward(tape, store, &self.norm1.forward(tape, store, x)?, cfg)?;
        let x1 = tape.add(x, &a)?;
        let f = self.ffn.forward(tape, store, &self.norm2.forward(tape, store, &x1)?)?;
        tape.add(&x1, &f)
    }
}

/// Softmax-weighted fusion of an encoder skip `x` and a decoder feature `y`.
#[derive(Clone, Debug)]
pub struct Ffb {
    pub proj_x: Conv,
    pub act_x: PRelu,
    pub proj_y: Conv,
    pub act_y: PRelu,
    pub weights: Conv,
}

impl Ffb {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            proj_x: Conv::new(store, &format!("{name}.proj_x"), channels, channels, ConvSpec::POINTWISE, rng)?,
            act_x: PRelu::new(store, &format!("{name}.act_x"))?,
            proj_y: Conv::new(store, &format!("{name}.proj_y"), channels, channels, ConvSpec::POINTWISE, rng)?,
            act_y: PRelu::new(store, &format!("{name}.act_y"))?,
            weights: Conv::new(store, &format!("{name}.weights"), 2 * channels, 2 * channels, ConvSpec::POINTWISE, rng)?,
        })
    }

    /// Branch weights `(A_x, A_y)`, each `[B,C,H,W]`, summing to one.
    pub fn branch_weights(&self, tape: &Tape, store: &ParamStore, x: &Var, y: &Var) -> Result<(Var, Var)> {
        x.value().check_same_shape(y.value(), "ffb")?;
        let [b, c, h, w] = x.shape();
        let xf = self.act_x.forward(tape, store, &self.proj_x.forward(tape, store, x)?)?;
        let yf = self.act_y.forward(tape, store, &self.proj_y.forward(tape, store, y)?)?;
        let logits = self.weights.forward(tape, store, &tape.concat(&xf, &yf)?)?;
        let split = tape.reshape(&logits, [b, 2, c, h * w])?;
        let probs = tape.reshape(&tape.softmax(&split, 1)?, [b, 2 * c, h, w])?;
        Ok((tape.slice_channels(&probs, 0, c)?, tape.slice_channels(&probs, c, c)?))
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &Var, y: &Var) -> Result<Var> {
        let (ax, ay) = self.branch_weights(tape, store, x, y)?;
        tape.add(&tape.mul(&ax, x)?, &tape.mul(&ay, y)?)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub blocks: Vec<Tsb>,
    /// Stride-2 convolution doubling channels; absent at the bottleneck.
    pub down: Option<Conv>,
}

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    /// 1x1 convolution halving channels after nearest-neighbour upsampling.
    pub reduce: Conv,
    pub fuse: Ffb,
    pub blocks: Vec<Tsb>,
}

#[derive(Clone, Debug)]
pub struct TsFormer {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub tokenizer: Conv,
    pub encoder: Vec<EncoderLevel>,
    /// Ordered from the deepest non-bottleneck level up to level 0.
    pub decoder: Vec<DecoderLevel>,
    pub output: Conv,
}

impl TsFormer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.base_channels;
        let levels = config.levels();
        let tokenizer = Conv::new(&mut store, "tokenizer", 3, c, ConvSpec::STANDARD, &mut rng)?;

        let mut encoder = Vec::with_capacity(levels);
        for (i, &n) in config.block_counts.iter().enumerate() {
            let width = c << i;
            let blocks = (0..n)
                .map(|j| Tsb::new(&mut store, &format!("encoder.{i}.block.{j}"), width, &config, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let down = if i + 1 < levels {
                Some(Conv::new(&mut store, &format!("encoder.{i}.down"), width, 2 * width, ConvSpec::DOWNSAMPLE, &mut rng)?)
            } else {
                None
            };
            encoder.push(EncoderLevel { blocks, down });
        }

        let mut decoder = Vec::with_capacity(levels - 1);
        for i in (0..levels - 1).rev() {
            let width = c << i;
            let reduce = Conv::new(&mut store, &format!("decoder.{i}.reduce"), 2 * width, width, ConvSpec::POINTWISE, &mut rng)?;
            let fuse = Ffb::new(&mut store, &format!("decoder.{i}.fuse"), width, &mut rng)?;
            let blocks = (0..config.block_counts[i])
                .map(|j| Tsb::new(&mut store, &format!("decoder.{i}.block.{j}"), width, &config, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            decoder.push(DecoderLevel { reduce, fuse, blocks });
        }
        let output = Conv::new(&mut store, "output", c, 3, ConvSpec::STANDARD, &mut rng)?;

        let downs = encoder.iter().filter(|l| l.down.is_some()).count();
        if downs != decoder.len() {
            return Err(Error::Consistency(format!(
                "encoder has {downs} downsampling steps but decoder has {} levels",
                decoder.len()
            )));
        }
        Ok(Self {
            config,
            params: store,
            tokenizer,
            encoder,
            decoder,
            output,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// `F(x) + x` with reflection padding to a multiple of the downsampling factor.
    pub fn forward(&self, tape: &Tape, img: &Var) -> Result<Var> {
        let [_, c, h, w] = img.shape();
        if c != 3 {
            return Err(Error::shape("model_forward", "input channels", 3, c));
        }
        let min = self.config.min_size();
        if h < min || w < min {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} is smaller than the minimum size {min}x{min}"
            )));
        }
        let store = &self.params;
        let sparsity = &self.config.sparsity;
        let padded = tape.pad_reflect(img, h.next_multiple_of(min) - h, w.next_multiple_of(min) - w)?;

        let mut x = self.tokenizer.forward(tape, store, &padded)?;
        let mut skips = Vec::with_capacity(self.decoder.len());
        for level in &self.encoder {
            for blk in &level.blocks {
                x = blk.forward(tape, store, &x, sparsity)?;
            }
            if let Some(down) = &level.down {
                skips.push(x.clone());
                x = down.forward(tape, store, &x)?;
            }
        }
        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            x = level.reduce.forward(tape, store, &tape.upsample2x(&x))?;
            if x.shape() != skip.shape() {
                return Err(Error::Consistency(format!(
                    "decoder feature {:?} does not match encoder skip {:?}",
                    x.shape(),
                    skip.shape()
                )));
            }
            x = level.fuse.forward(tape, store, &skip, &x)?;
            for blk in &level.blocks {
                x = blk.forward(tape, store, &x, sparsity)?;
            }
        }
        let residual = self.output.forward(tape, store, &x)?;
        tape.add(&tape.crop(&residual, h, w)?, img)
    }

    /// Inference without recording gradients.
    pub fn infer(&self, img: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let x = tape.constant(img.clone());
        Ok(self.forward(&tape, &x)?.into_tensor())
    }
}
