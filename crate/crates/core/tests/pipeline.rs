//! End-to-end behaviour of training, benchmarking, ablation and the gradient suite.

use tsformer_core::ablation::{run_ablation, support_recovery};
use tsformer_core::bench::run_bench;
use tsformer_core::gradcheck::run_grad_check;
use tsformer_core::msa::Strategy;
use tsformer_core::run::RunConfig;
use tsformer_core::train::train_toy;
use tsformer_core::{Error, OpKind};

fn small_run() -> RunConfig {
    RunConfig::from_text(
        "base_channels = 4\n\
         block_counts = 1,1\n\
         iterations = 4\n\
         batch = 2\n\
         crop = 16\n\
         eval_size = 16\n\
         eval_batch = 1\n\
         bench_size = 32\n\
         ablate_seeds = 4\n\
         ablate_train_iterations = 0\n",
    )
    .unwrap()
}

fn data_lines(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn same_seed_gives_identical_loss_log() {
    let cfg = small_run();
    let a = train_toy(&cfg, &cfg.model, 4).unwrap();
    let b = train_toy(&cfg, &cfg.model, 4).unwrap();
    assert_eq!(a.loss_csv(&cfg), b.loss_csv(&cfg));
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(train_toy(&other, &other.model, 4).unwrap().losses, a.losses);
    let csv = a.loss_csv(&cfg);
    assert!(csv.starts_with("# base_channels = 4\n"));
    assert_eq!(data_lines(&csv)[0], "iteration,loss");
    assert_eq!(data_lines(&csv).len(), 5);
}

#[test]
fn zero_learning_rate_leaves_model_unchanged() {
    let mut cfg = small_run();
    cfg.train.lr = 0.0;
    let out = train_toy(&cfg, &cfg.model, 4).unwrap();
    let fresh = tsformer_core::model::TsFormer::new(cfg.model.clone(), cfg.seed).unwrap();
    for (a, b) in out.model.params.iter().zip(fresh.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    assert_eq!(out.initial.l1, out.final_eval.l1);
}

#[test]
fn empty_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run();
    cfg.data_dir = Some(dir.path().to_path_buf());
    assert!(matches!(train_toy(&cfg, &cfg.model, 1), Err(Error::Data(_))));
}

#[test]
fn training_reads_image_directories() {
    let dir = tempfile::tempdir().unwrap();
    let img = tsformer_core::Tensor::from_fn([1, 3, 20, 24], |_, c, y, x| ((c + y + x) % 7) as f32 / 7.0);
    tsformer_core::imageio::save_image(&img, dir.path().join("a.png")).unwrap();
    let mut cfg = small_run();
    cfg.data_dir = Some(dir.path().to_path_buf());
    let out = train_toy(&cfg, &cfg.model, 2).unwrap();
    assert_eq!(out.losses.len(), 2);
}

#[test]
fn bench_reduction_matches_masked_fraction() {
    let cfg = small_run();
    let report = run_bench(&cfg).unwrap();
    let masked = report.sparse.ledger.masked_fraction();
    assert!(report.reduction.attention > 0.0);
    // integer identity: the dense run multiplies every entry the sparse run sees
    assert_eq!(report.dense.ledger.attention_mults, report.sparse.ledger.attention_entries());
    assert!((report.reduction.attention - masked).abs() < 1e-12);
    assert!(report.reduction.total > 0.0);
    assert_eq!(report.dense.ledger.attention_skipped, 0);
    assert_eq!(report.dense.ledger.conv_macs, report.sparse.ledger.conv_macs);
    assert_eq!(report.param_count, tsformer_core::model::TsFormer::new(cfg.model.clone(), 0).unwrap().param_count());
    let csv = report.csv(&cfg);
    assert_eq!(csv, run_bench(&cfg).unwrap().csv(&cfg));
    assert_eq!(data_lines(&csv).len(), 3);
    assert!(csv.contains("# p_base = 0.1\n"));
}

#[test]
fn bench_at_zero_p_base_reports_no_reduction() {
    let mut cfg = small_run();
    cfg.model.sparsity.p_base = 0.0;
    let report = run_bench(&cfg).unwrap();
    assert_eq!(report.reduction.attention, 0.0);
    assert_eq!(report.sparse.ledger.attention_skipped, 0);
}

#[test]
fn ablation_table_has_one_row_per_strategy() {
    let cfg = small_run();
    let report = run_ablation(&cfg).unwrap();
    let table = report.table_csv(&cfg);
    let rows = data_lines(&table);
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0], "strategy,precision,recall,f1,f1_std,restore_psnr,restore_ssim");
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["top_k", "min_p", "min_p_trusted", "fed", "isa"]);
    let hist = report.histogram_csv(&cfg);
    assert_eq!(data_lines(&hist).len(), 1 + 5 * 20);
    for r in &report.support {
        assert!(r.cumulative.windows(2).all(|p| p[0] <= p[1]));
        assert!((r.cumulative.last().unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ablation_restoration_columns_are_filled() {
    let mut cfg = small_run();
    cfg.ablation.train_iterations = 1;
    let report = run_ablation(&cfg).unwrap();
    let rows = report.restoration.as_ref().unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.psnr.is_finite() && r.ssim.is_finite()));
    let table = report.table_csv(&cfg);
    assert!(data_lines(&table)[1..].iter().all(|r| !r.ends_with(",,")));
}

#[test]
fn noiseless_support_is_recovered_by_every_strategy() {
    let cfg = small_run();
    for r in support_recovery(&cfg, 0.0).unwrap() {
        assert_eq!(r.f1, 1.0, "{}", r.strategy.name());
    }
}

fn support_f1(cfg: &RunConfig) -> (f64, f64) {
    let res = support_recovery(cfg, cfg.ablation.noise).unwrap();
    let f1 = |s: Strategy| res.iter().find(|r| r.strategy.name() == s.name()).unwrap().f1;
    (f1(Strategy::MinPTrusted), f1(Strategy::TopK(1)))
}

#[test]
fn top_k_with_the_true_support_size_recovers_fixed_supports() {
    let mut cfg = small_run();
    cfg.ablation.seeds = 50;
    let (trusted, top_k) = support_f1(&cfg);
    assert!(top_k > 0.99, "{top_k}");
    assert!(trusted > 0.9, "{trusted}");
}

#[test]
fn trusted_min_p_beats_fixed_k_on_variable_supports() {
    let mut cfg = small_run();
    cfg.ablation.seeds = 50;
    cfg.ablation.variable_support = true;
    let (trusted, top_k) = support_f1(&cfg);
    assert!(trusted >= top_k, "{trusted} < {top_k}");
}

#[test]
fn grad_suite_names_the_faulty_op() {
    let clean = run_grad_check(7, 1, 1e-3, None).unwrap();
    assert!(clean.passed(), "{}", clean.text());
    assert!(clean.uncovered.is_empty());
    assert_eq!(clean.covered(), OpKind::ALL.to_vec());

    let broken = run_grad_check(7, 1, 1e-3, Some((OpKind::Gelu, 2.0))).unwrap();
    assert!(!broken.passed());
    let failures = broken.failures();
    assert!(failures.contains(&"gelu"), "{failures:?}");
    assert!(!failures.contains(&"conv2d"));
    assert!(broken.text().contains("FAILED: "));

    let broken = run_grad_check(7, 1, 1e-3, Some((OpKind::SparseAttention, 1.5))).unwrap();
    assert!(broken.failures().contains(&"sparse_attention"));
}

#[test]
fn config_rejects_unknown_keys_and_echoes_everything() {
    match RunConfig::from_text("base_channels = 4\nbogus = 1\n") {
        Err(Error::UnknownKey(k)) => assert_eq!(k, "bogus"),
        other => panic!("expected unknown key, got {other:?}"),
    }
    assert!(RunConfig::from_text("tile = 16\noverlap = 8\n").is_err());
    let cfg = small_run();
    let text = cfg.echo().join("\n");
    assert_eq!(RunConfig::from_text(&text).unwrap(), cfg);
    let over = RunConfig::from_text_with_overrides("seed = 1\n", &[("seed".into(), "9".into())]).unwrap();
    assert_eq!(over.seed, 9);
}

#[test]
fn shipped_configs_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = std::fs::read_to_string(root.join("default.cfg")).unwrap();
    assert_eq!(RunConfig::from_text(&default).unwrap(), RunConfig::default());
    let quick = std::fs::read_to_string(root.join("quick.cfg")).unwrap();
    assert_eq!(RunConfig::from_text(&quick).unwrap().model.base_channels, 8);
}
