//! Directional central finite-difference checks of every differentiable op.
//!
//! For a case `y = f(inputs, params)` and a random weight `w`, the scalar
//! `L = sum(w * y)` is differentiated analytically by the tape and numerically
//! along random directions with step `h`. Attention masks are recorded
//! on the analytic pass and replayed on every perturbed pass.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::Result;
use crate::model::{Ffb, Ffn, ModelConfig, Tsb};
use crate::msa::{SparsityConfig, Strategy};
use crate::ops::conv::ConvSpec;
use crate::param::ParamStore;
use crate::run::RunConfig;
use crate::tensor::{Shape, Tensor};

pub const STEP: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;
pub const DIRECTIONS: usize = 3;

type Forward = Box<dyn Fn(&Tape, &ParamStore, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    /// The op this case is registered for in the coverage list.
    pub kind: Option<OpKind>,
    pub inputs: Vec<Tensor>,
    pub params: ParamStore,
    forward: Forward,
}

impl Case {
    fn new(
        name: &'static str,
        kind: Option<OpKind>,
        inputs: Vec<Tensor>,
        forward: impl Fn(&Tape, &ParamStore, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name,
            kind,
            inputs,
            params: ParamStore::new(),
            forward: Box::new(forward),
        }
    }

    fn with_params(mut self, params: ParamStore) -> Self {
        self.params = params;
        self
    }
}

fn randn(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values of magnitude in `[0.2, 1]` with random sign, away from kinks at zero.
fn off_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.random_range(0.2f32..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn conv_case(name: &'static str, spec: ConvSpec, x: Shape, cout: usize, rng: &mut ChaCha8Rng) -> Case {
    let w = randn(spec.weight_shape(x[1], cout), rng);
    let b = randn([cout, 1, 1, 1], rng);
    Case::new(name, Some(OpKind::Conv2d), vec![randn(x, rng), w, b], move |t, _, v| {
        t.conv2d(&v[0], &v[1], &v[2], spec)
    })
}

fn small_model_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        block_counts: vec![1],
        patch_size: 8,
        sparsity: SparsityConfig {
            p_base: 0.3,
            strategy: Strategy::MinPTrusted,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Every registered case, freshly randomized from `rng`.
pub fn cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    use OpKind::*;
    let mut v = vec![
        conv_case("conv2d", ConvSpec::STANDARD, [1, 3, 6, 5], 4, rng),
        conv_case("conv2d_stride2", ConvSpec::DOWNSAMPLE, [1, 3, 7, 6], 4, rng),
        conv_case("conv2d_stride2_even", ConvSpec::DOWNSAMPLE, [1, 3, 6, 6], 4, rng),
        conv_case("conv2d_depthwise", ConvSpec::DEPTHWISE, [2, 4, 5, 6], 4, rng),
        conv_case("conv2d_pointwise", ConvSpec::POINTWISE, [2, 3, 4, 5], 4, rng),
        conv_case("conv2d_pointwise_narrow", ConvSpec::POINTWISE, [1, 12, 2, 3], 5, rng),
    ];
    v.push(Case::new(
        "layer_norm",
        Some(LayerNorm),
        vec![randn([2, 4, 3, 3], rng), randn([4, 1, 1, 1], rng), randn([4, 1, 1, 1], rng)],
        |t, _, v| t.layer_norm(&v[0], &v[1], &v[2]),
    ));
    v.push(Case::new("gelu", Some(Gelu), vec![randn([1, 2, 3, 4], rng)], |t, _, v| Ok(t.gelu(&v[0]))));
    v.push(Case::new("sigmoid", Some(Sigmoid), vec![randn([1, 2, 3, 4], rng)], |t, _, v| {
        Ok(t.sigmoid(&v[0]))
    }));
    v.push(Case::new(
        "prelu",
        Some(Prelu),
        vec![off_zero([1, 2, 3, 4], rng), Tensor::full([1, 1, 1, 1], 0.25)],
        |t, _, v| t.prelu(&v[0], &v[1]),
    ));
    v.push(Case::new("softmax", Some(Softmax), vec![randn([1, 3, 2, 2], rng)], |t, _, v| t.softmax(&v[0], 1)));
    v.push(Case::new("softmax_last_axis", None, vec![randn([1, 2, 2, 5], rng)], |t, _, v| {
        t.softmax(&v[0], 3)
    }));
    v.push(Case::new("bilinear_resize", Some(BilinearResize), vec![randn([1, 2, 3, 4], rng)], |t, _, v| {
        t.bilinear_resize(&v[0], 5, 7)
    }));
    v.push(Case::new("bilinear_resize_down", None, vec![randn([1, 2, 6, 6], rng)], |t, _, v| {
        t.bilinear_resize(&v[0], 4, 3)
    }));
    let pred = randn([1, 2, 3, 3], rng);
    let target = {
        let offset = off_zero([1, 2, 3, 3], rng);
        Tensor::from_fn([1, 2, 3, 3], |b, c, y, x| pred.at(b, c, y, x) + offset.at(b, c, y, x))
    };
    v.push(Case::new("l1_loss", Some(L1Loss), vec![pred, target], |t, _, v| t.l1_loss(&v[0], &v[1])));
    v.push(Case::new("add", Some(Add), vec![randn([1, 2, 3, 3], rng), randn([1, 2, 3, 3], rng)], |t, _, v| {
        t.add(&v[0], &v[1])
    }));
    v.push(Case::new("mul", Some(Mul), vec![randn([1, 2, 3, 3], rng), randn([1, 2, 3, 3], rng)], |t, _, v| {
        t.mul(&v[0], &v[1])
    }));
    v.push(Case::new("sum", Some(Sum), vec![randn([1, 2, 3, 3], rng)], |t, _, v| Ok(t.sum(&v[0]))));
    v.push(Case::new("concat", Some(Concat), vec![randn([1, 2, 3, 3], rng), randn([1, 3, 3, 3], rng)], |t, _, v| {
        t.concat(&v[0], &v[1])
    }));
    v.push(Case::new("slice", Some(Slice), vec![randn([1, 4, 2, 3], rng)], |t, _, v| {
        t.slice_channels(&v[0], 1, 2)
    }));
    v.push(Case::new("reshape", Some(Reshape), vec![randn([1, 4, 2, 3], rng)], |t, _, v| {
        t.reshape(&v[0], [1, 2, 4, 3])
    }));
    v.push(Case::new("upsample", Some(Upsample), vec![randn([1, 2, 3, 2], rng)], |t, _, v| {
        Ok(t.upsample2x(&v[0]))
    }));
    v.push(Case::new("pad_reflect", Some(PadReflect), vec![randn([1, 2, 5, 4], rng)], |t, _, v| {
        t.pad_reflect(&v[0], 2, 3)
    }));
    v.push(Case::new("crop", Some(Crop), vec![randn([1, 2, 6, 5], rng)], |t, _, v| t.crop(&v[0], 4, 3)));
    let sparsity = small_model_config().sparsity;
    v.push(Case::new(
        "sparse_attention",
        Some(SparseAttention),
        vec![randn([1, 2, 12, 10], rng), randn([1, 2, 12, 10], rng), randn([1, 2, 12, 10], rng)],
        move |t, _, v| t.sparse_attention(&v[0], &v[1], &v[2], &sparsity, 8),
    ));

    let mut store = ParamStore::new();
    let ffn = Ffn::new(&mut store, "ffn", 4, 8, rng)?;
    v.push(
        Case::new("ffn", None, vec![randn([1, 4, 6, 6], rng)], move |t, s, v| ffn.forward(t, s, &v[0]))
            .with_params(store),
    );

    let mut store = ParamStore::new();
    let ffb = Ffb::new(&mut store, "ffb", 4, rng)?;
    for conv in [&ffb.proj_x, &ffb.proj_y] {
        // Near-identity projections keep the PReLU inputs away from zero.
        let w = store.value_mut(conv.weight);
        for (i, val) in w.data_mut().iter_mut().enumerate() {
            *val = if i % 5 == 0 { 1.0 } else { 0.01 * *val };
        }
    }
    v.push(
        Case::new("ffb", None, vec![off_zero([1, 4, 5, 5], rng), off_zero([1, 4, 5, 5], rng)], move |t, s, v| {
            ffb.forward(t, s, &v[0], &v[1])
        })
        .with_params(store),
    );

    let cfg = small_model_config();
    let mut store = ParamStore::new();
    let tsb = Tsb::new(&mut store, "tsb", 4, &cfg, rng)?;
    v.push(
        Case::new("tsb", None, vec![randn([1, 4, 12, 12], rng)], move |t, s, v| {
            tsb.forward(t, s, &v[0], &cfg.sparsity)
        })
        .with_params(store),
    );
    Ok(v)
}

fn weighted_sum(y: &Tensor, w: &Tensor) -> f64 {
    y.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    weighted_sum(a, b)
}

fn axpy(x: &Tensor, h: f64, d: &Tensor) -> Tensor {
    let data = x.data().iter().zip(d.data()).map(|(&a, &b)| (a as f64 + h * b as f64) as f32).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Random magnitudes carrying the sign of the analytic gradient, so that the
/// directional derivative cannot cancel towards the `f32` noise floor.
/// Zero gradient entries get a random sign.
fn aligned_direction(g: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let data = g
        .data()
        .iter()
        .map(|&gv| {
            let m = rng.random_range(0.5f32..1.5);
            let positive = if gv == 0.0 { rng.random_bool(0.5) } else { gv > 0.0 };
            if positive { m } else { -m }
        })
        .collect();
    Tensor::new(g.shape(), data).expect("gradient shape")
}

/// `(plus - minus) / 2h`: the direction actually taken after rounding to `f32`.
fn realized(plus: &Tensor, minus: &Tensor) -> Tensor {
    let data = plus
        .data()
        .iter()
        .zip(minus.data())
        .map(|(&p, &m)| ((p as f64 - m as f64) / (2.0 * STEP)) as f32)
        .collect();
    Tensor::new(plus.shape(), data).expect("same shape")
}

fn evaluate(case: &Case, inputs: &[Tensor], params: &ParamStore, masks: &[Vec<bool>], w: &Tensor) -> Result<f64> {
    let tape = Tape::no_grad();
    tape.replay_masks(masks.to_vec());
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = (case.forward)(&tape, params, &vars)?;
    Ok(weighted_sum(y.value(), w))
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    let err = (analytic - numeric).abs() / denom;
    if err.is_finite() { err } else { f64::INFINITY }
}

/// Largest relative error of `case` over all directions for one seed.
fn check_case(case: &Case, rng: &mut ChaCha8Rng, fault: Option<(OpKind, f32)>) -> Result<f64> {
    let tape = Tape::new();
    if let Some((kind, factor)) = fault {
        tape.inject_fault(kind, factor);
    }
    tape.record_masks();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = (case.forward)(&tape, &case.params, &vars)?;
    let masks = tape.take_masks();
    let w = randn(y.shape(), rng);
    let grads = tape.backward_with(&y, &w)?;
    let mut param_grads = case.params.clone();
    param_grads.zero_grad();
    grads.apply_to(&mut param_grads);

    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let zero = Tensor::zeros(case.inputs[i].shape());
        let g = grads.wrt(var).unwrap_or(&zero);
        for _ in 0..DIRECTIONS {
            let d = aligned_direction(g, rng);
            let mut plus = case.inputs.clone();
            plus[i] = axpy(&case.inputs[i], STEP, &d);
            let mut minus = case.inputs.clone();
            minus[i] = axpy(&case.inputs[i], -STEP, &d);
            let numeric = (evaluate(case, &plus, &case.params, &masks, &w)?
                - evaluate(case, &minus, &case.params, &masks, &w)?)
                / (2.0 * STEP);
            let analytic = dot(g, &realized(&plus[i], &minus[i]));
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    if !case.params.is_empty() {
        let ids: Vec<_> = case.params.ids().collect();
        for _ in 0..DIRECTIONS {
            let dirs: Vec<Tensor> = ids.iter().map(|&id| aligned_direction(param_grads.grad(id), rng)).collect();
            let shifted = |h: f64| -> Result<ParamStore> {
                let mut s = case.params.clone();
                for (&id, d) in ids.iter().zip(&dirs) {
                    let value = axpy(case.params.value(id), h, d);
                    s.set_value(id, value)?;
                }
                Ok(s)
            };
            let (plus, minus) = (shifted(STEP)?, shifted(-STEP)?);
            let analytic: f64 = ids
                .iter()
                .map(|&id| dot(param_grads.grad(id), &realized(plus.value(id), minus.value(id))))
                .sum();
            let numeric = (evaluate(case, &case.inputs, &plus, &masks, &w)?
                - evaluate(case, &case.inputs, &minus, &masks, &w)?)
                / (2.0 * STEP);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub kind: Option<OpKind>,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub tolerance: f64,
    pub seeds: usize,
    pub cases: Vec<CaseResult>,
    /// Registered ops with no case.
    pub uncovered: Vec<OpKind>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.uncovered.is_empty() && self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.cases.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    /// Registered ops covered by at least one case, in registration order.
    pub fn covered(&self) -> Vec<OpKind> {
        OpKind::ALL
            .into_iter()
            .filter(|k| self.cases.iter().any(|c| c.kind == Some(*k)))
            .collect()
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            writeln!(
                s,
                "{:<26} max_rel_error {:.3e}  {}",
                c.name,
                c.max_rel_error,
                if c.passed { "PASS" } else { "FAIL" }
            )
            .expect("string write");
        }
        let covered: Vec<_> = self.covered().iter().map(|k| k.name()).collect();
        writeln!(s, "coverage: {}/{} ops: {}", covered.len(), OpKind::ALL.len(), covered.join(" ")).expect("string write");
        for k in &self.uncovered {
            writeln!(s, "uncovered op: {}", k.name()).expect("string write");
        }
        let verdict = if self.passed() {
            "all passed".to_string()
        } else {
            format!("FAILED: {}", self.failures().join(", "))
        };
        writeln!(s, "{} cases, {} seeds, tolerance {:e}: {verdict}", self.cases.len(), self.seeds, self.tolerance)
            .expect("string write");
        s
    }

    pub fn csv(&self, cfg: &RunConfig) -> String {
        let mut s = cfg.csv_preamble();
        s.push_str("case,op,max_rel_error,passed\n");
        for c in &self.cases {
            writeln!(
                s,
                "{},{},{:e},{}",
                c.name,
                c.kind.map_or("", |k| k.name()),
                c.max_rel_error,
                c.passed
            )
            .expect("string write");
        }
        s
    }
}

/// Runs every case for `seeds` seeds; `fault` scales one op's backward output.
pub fn run_grad_check(seed: u64, seeds: usize, tolerance: f64, fault: Option<(OpKind, f32)>) -> Result<GradReport> {
    let mut worst: Vec<f64> = Vec::new();
    let mut meta = Vec::new();
    for s in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64));
        let cases = cases(&mut rng)?;
        if worst.is_empty() {
            worst = vec![0.0; cases.len()];
            meta = cases.iter().map(|c| (c.name, c.kind)).collect();
        }
        for (i, case) in cases.iter().enumerate() {
            worst[i] = worst[i].max(check_case(case, &mut rng, fault)?);
        }
    }
    let cases: Vec<CaseResult> = meta
        .into_iter()
        .zip(worst)
        .map(|((name, kind), e)| CaseResult {
            name,
            kind,
            max_rel_error: e,
            passed: e <= tolerance,
        })
        .collect();
    let uncovered = OpKind::ALL
        .into_iter()
        .filter(|k| !cases.iter().any(|c| c.kind == Some(*k)))
        .collect();
    Ok(GradReport {
        tolerance,
        seeds,
        cases,
        uncovered,
    })
}
