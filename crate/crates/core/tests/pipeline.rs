mod common;

use common::fixtures::{end_to_end_grad_check, tiny_data, tiny_generator, tiny_model, tiny_train};
use hoi_core::cvae::LatentMode;
use hoi_core::data::generate_dataset;
use hoi_core::eval::{baselines, evaluate};
use hoi_core::experiments::{
    infer, median_row, run_ablation, run_latent_sweep, run_modification, train_and_evaluate, wins, EvalSettings, Site, ABLATION_ROWS,
    HEAD_METRICS,
};
use hoi_core::losses::LossWeights;
use hoi_core::model::{Model, ModelConfig};
use hoi_core::nn::Binding;
use hoi_core::train::{fit, Checkpoint, LogRecord, TrainArtifacts, Trainer};
use hoi_core::HoiError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn param_names(cfg: &ModelConfig) -> Vec<String> {
    Model::new(cfg, 0).unwrap().store.entries().iter().map(|e| e.name.clone()).collect()
}

fn toggles(cross: bool, deq: bool, res: bool) -> ModelConfig {
    ModelConfig {
        enable_cross: cross,
        enable_deq: deq,
        enable_res: res,
        ..tiny_model()
    }
}

#[test]
fn deterministic_prediction_repeats_exactly() {
    let data = tiny_data(0);
    let model = Model::new(&tiny_model(), 1).unwrap();
    let refs: Vec<_> = data.test.iter().collect();
    let batch = model.batch(&refs).unwrap();
    let a = model.predict(&batch, LatentMode::Deterministic, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = model.predict(&batch, LatentMode::Deterministic, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);
    let s1 = model.predict(&batch, LatentMode::Sampled, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let s2 = model.predict(&batch, LatentMode::Sampled, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(s1, s2);
    assert_ne!(s1, a);
}

#[test]
fn manipulation_starts_at_the_trend_endpoint() {
    let data = tiny_data(0);
    let model = Model::new(&tiny_model(), 0).unwrap();
    let refs: Vec<_> = data.test.iter().collect();
    for bundle in model.predict(&model.batch(&refs).unwrap(), LatentMode::Sampled, &mut ChaCha8Rng::seed_from_u64(0)).unwrap() {
        let end = bundle.trend[model.cfg.n_c];
        assert_eq!(bundle.contact_point, end);
        assert!((bundle.mani[0][0] - end[0]).abs() <= 1e-9 && (bundle.mani[0][1] - end[1]).abs() <= 1e-9);
        assert_eq!(bundle.trend.len(), model.cfg.n_c + 1);
        assert_eq!(bundle.mani.len(), model.cfg.n_m + 1);
        assert_eq!((bundle.joints21.len(), bundle.vertices.len(), bundle.contact_probs.len()), (21, 778, 778));
        let sum: f64 = bundle.hotspot.map.values.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn disabled_modules_own_no_parameters() {
    let full = param_names(&toggles(true, true, true));
    let off = param_names(&toggles(false, false, false));
    let has = |names: &[String], prefix: &str| names.iter().any(|n| n.starts_with(prefix));
    assert!(has(&full, "intention.") && has(&full, "fusion.cell.") && has(&full, "correct_t.") && has(&full, "correct_h."));
    assert!(!has(&off, "intention.") && !has(&off, "fusion.cell.") && !has(&off, "correct_"));
    // Without the equilibrium the streams meet in a concatenation projection.
    assert!(has(&off, "fusion.proj."));

    let count = |c: &ModelConfig| Model::new(c, 0).unwrap().num_params();
    let size = |prefix: &str| {
        let m = Model::new(&toggles(true, true, true), 0).unwrap();
        m.store.entries().iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.values.len()).sum::<usize>()
    };
    let n_full = count(&toggles(true, true, true));
    assert_eq!(n_full - count(&toggles(false, true, true)), size("intention."));
    assert_eq!(n_full - count(&toggles(true, true, false)), size("correct_"));
    let concat = Model::new(&toggles(true, false, true), 0).unwrap();
    let proj: usize = concat.store.entries().iter().filter(|e| e.name.starts_with("fusion.")).map(|e| e.values.len()).sum();
    assert_eq!(n_full - count(&toggles(true, false, true)), size("fusion.") - proj);
    // The other rows are sums of these differences.
    for [c, d, r] in ABLATION_ROWS {
        let expected = n_full - if c { 0 } else { size("intention.") } - if r { 0 } else { size("correct_") } - if d { 0 } else { size("fusion.") - proj };
        assert_eq!(count(&toggles(c, d, r)), expected);
    }
}

#[test]
fn all_modules_off_still_predicts_every_element() {
    let data = tiny_data(0);
    let model = Model::new(&toggles(false, false, false), 0).unwrap();
    let refs: Vec<_> = data.test.iter().collect();
    let out = model.predict(&model.batch(&refs).unwrap(), LatentMode::Sampled, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out.len(), data.test.len());
    let r = model.cfg.resolve();
    assert_eq!((r.intention, r.fusion.as_str(), r.correction), (None, "concat", None));
}

#[test]
fn unknown_strategy_names_the_known_ones() {
    let cfg = ModelConfig {
        fusion_strategy: "attention-pool".into(),
        ..tiny_model()
    };
    match Model::new(&cfg, 0).err().unwrap() {
        HoiError::UnknownStrategy { name, known, .. } => {
            assert_eq!(name, "attention-pool");
            for k in ["deq", "sum", "concat", "series-cross"] {
                assert!(known.split(", ").any(|n| n.trim_matches('`') == k), "{known}");
            }
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn non_equilibrium_fusion_records_the_ignored_toggle() {
    let cfg = ModelConfig {
        fusion_strategy: "sum".into(),
        enable_deq: false,
        ..tiny_model()
    };
    let r = cfg.resolve();
    assert_eq!(r.fusion, "sum");
    assert_eq!(r.overridden.len(), 1);
    assert!(r.overridden[0].contains("enable_deq"));
    assert!(ModelConfig { fusion_strategy: "sum".into(), ..tiny_model() }.resolve().overridden.is_empty());
}

#[test]
fn every_strategy_builds_and_trains_one_step() {
    let data = tiny_data(0);
    for site in Site::ALL {
        for strategy in ["sum", "concat", "series-cross", site.default_strategy()] {
            let cfg = site.apply(&tiny_model(), strategy);
            let mut t = Trainer::new(&cfg, &tiny_train(1)).unwrap();
            let refs: Vec<_> = data.train.iter().take(4).collect();
            let rec = t.train_step(&refs).unwrap();
            assert!(rec.loss_total.is_finite(), "{site:?}/{strategy}");
            assert_eq!(rec.deq_iters.is_some(), cfg.resolve().fusion == "deq");
        }
    }
}

#[test]
fn the_loss_gradient_reaches_the_used_embeddings() {
    let data = tiny_data(0);
    let model = Model::new(&tiny_model(), 0).unwrap();
    let batch = model.batch(&[&data.train[0]]).unwrap();
    let p = Binding::new(&model.store, true);
    let (loss, _) = model.loss(&p, &batch, &LossWeights::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    loss.backward().unwrap();
    let grads = p.grads();
    for (table, id) in [("stub.verbs", data.train[0].verb_id), ("stub.nouns", data.train[0].noun_id)] {
        let k = model.store.ids().position(|i| model.store.entry(i).name == table).unwrap();
        let g = grads[k].as_ref().unwrap();
        let d = model.cfg.d_model;
        let row = |r: usize| &g[r * d..(r + 1) * d];
        assert!(row(id).iter().any(|v| v.abs() > 0.0), "{table} row {id} has no gradient");
        for other in (0..g.len() / d).filter(|&r| r != id) {
            assert!(row(other).iter().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let worst = end_to_end_grad_check(7, 16);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let data = tiny_data(0);
    let mut t = Trainer::new(&tiny_model(), &tiny_train(2)).unwrap();
    t.opt.cfg.lr = 0.0;
    let before = t.model.store.entries().to_vec();
    fit(&mut t, &data.train, None).unwrap();
    assert_eq!(t.step, 6);
    for (a, b) in before.iter().zip(t.model.store.entries()) {
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()), "{} moved", a.name);
    }
}

#[test]
fn resuming_from_a_checkpoint_replays_the_straight_run() {
    let data = tiny_data(0);
    let dir = tempfile::tempdir().unwrap();

    let mut straight = Trainer::new(&tiny_model(), &tiny_train(3)).unwrap();
    fit(&mut straight, &data.train, None).unwrap();

    let mut first = Trainer::new(&tiny_model(), &tiny_train(1)).unwrap();
    fit(&mut first, &data.train, Some(dir.path())).unwrap();
    let ckpt = Checkpoint::load(&TrainArtifacts::in_dir(dir.path()).last).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ckpt).unwrap();
    resumed.cfg.epochs = 3;
    fit(&mut resumed, &data.train, Some(dir.path())).unwrap();

    assert_eq!(resumed.epoch_losses, straight.epoch_losses);
    assert_eq!(resumed.model.store.entries(), straight.model.store.entries());
    let tail: Vec<&LogRecord> = straight.log.iter().skip(first.log.len()).collect();
    assert_eq!(resumed.log.iter().collect::<Vec<_>>(), tail);

    // The log on disk holds both runs, one record per step.
    let text = std::fs::read_to_string(TrainArtifacts::in_dir(dir.path()).log).unwrap();
    let records: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records, straight.log);
    let first_line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["step", "epoch", "loss_total", "loss_t", "loss_h", "loss_p", "loss_c", "loss_m", "deq_iters", "deq_residual"] {
        assert!(first_line.get(key).is_some(), "log lacks {key}");
    }
}

#[test]
fn fit_writes_best_and_final_checkpoints() {
    let data = tiny_data(0);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&tiny_model(), &tiny_train(3)).unwrap();
    fit(&mut t, &data.train, Some(dir.path())).unwrap();
    let files = TrainArtifacts::in_dir(dir.path());
    let last = Checkpoint::load(&files.last).unwrap();
    let best = Checkpoint::load(&files.best).unwrap();
    assert_eq!(last.epochs_done, 3);
    let min = t.epoch_losses.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(best.epoch_losses.last().copied(), Some(min));
    // A restored model predicts exactly like the trained one.
    let restored = last.model().unwrap();
    let refs: Vec<_> = data.test.iter().collect();
    let batch = t.model.batch(&refs).unwrap();
    let mode = LatentMode::Sampled;
    assert_eq!(
        restored.predict(&batch, mode, &mut ChaCha8Rng::seed_from_u64(4)).unwrap(),
        t.model.predict(&batch, mode, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    );
}

/// Trains with a learning rate so large that one step overflows the next
/// forward pass; returns the error and the saved last good checkpoint.
fn blow_up(cfg: &ModelConfig) -> (HoiError, Checkpoint, Trainer) {
    let data = tiny_data(0);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg, &tiny_train(2)).unwrap();
    t.opt.cfg.lr = 1e300;
    let err = fit(&mut t, &data.train, Some(dir.path())).unwrap_err();
    let saved = Checkpoint::load(&TrainArtifacts::last_good(dir.path())).unwrap();
    (err, saved, t)
}

#[test]
fn a_non_finite_loss_aborts_with_the_last_good_checkpoint() {
    let (err, saved, t) = blow_up(&toggles(true, false, true));
    assert!(matches!(err, HoiError::NonFiniteLoss { step: 1 }), "{err:?}");
    assert_eq!(saved.step, 1);
    // The failing step left the parameters as the first step produced them.
    assert_eq!(saved.params, t.model.store.entries());
    assert!(saved.params.iter().all(|e| e.values.iter().all(|v| v.is_finite())));
}

#[test]
fn a_diverged_equilibrium_names_the_batch_and_keeps_the_last_good_state() {
    let (err, saved, t) = blow_up(&tiny_model());
    match err {
        HoiError::Diverged { sample: Some(ids), .. } => assert_eq!(ids.split(',').count(), 8),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert_eq!(saved.params, t.model.store.entries());
}

#[test]
fn a_checkpoint_for_another_configuration_is_rejected() {
    let t = Trainer::new(&tiny_model(), &tiny_train(1)).unwrap();
    let mut ckpt = t.checkpoint();
    ckpt.model_config.enable_res = false;
    assert!(matches!(ckpt.model(), Err(HoiError::Checkpoint(_))));
}

#[test]
fn evaluation_is_reproducible_and_averages_repeats() {
    let data = tiny_data(0);
    let mut t = Trainer::new(&tiny_model(), &tiny_train(1)).unwrap();
    fit(&mut t, &data.train, None).unwrap();
    let a = evaluate(&t.model, &data.test, 3, LatentMode::Sampled, 5).unwrap();
    let b = evaluate(&t.model, &data.test, 3, LatentMode::Sampled, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_repeat.len(), 3);
    let mean = hoi_core::eval::MetricRow::mean(&a.per_repeat);
    assert_eq!(mean, a.metrics);
    assert_ne!(a.per_repeat[0], a.per_repeat[1]);
    let det = evaluate(&t.model, &data.test, 3, LatentMode::Deterministic, 5).unwrap();
    assert!(det.per_repeat.iter().all(|r| *r == det.per_repeat[0]));
    assert!(a.metrics.values().iter().all(|v| v.is_finite()));
}

#[test]
fn baselines_use_training_means_and_the_rest_pose() {
    let data = tiny_data(0);
    let model = Model::new(&tiny_model(), 0).unwrap();
    let b = baselines(&data.train, &data.test, &model.hand).unwrap();
    assert!(b.trend_ade > 0.0 && b.mani_ade > 0.0 && b.pa_mpjpe > 0.0);
    // Predicting the test split's own mean can only do better on average.
    let own = baselines(&data.test, &data.test, &model.hand).unwrap();
    assert!(own.trend_ade <= b.trend_ade + 1e-12);
}

#[test]
fn ablation_report_has_every_toggle_row_and_identical_rows_agree() {
    let data = tiny_data(0);
    let eval = EvalSettings { repeats: 2, ..EvalSettings::default() };
    let report = run_ablation(&data, &tiny_model(), &tiny_train(1), &eval, &[0], &ABLATION_ROWS).unwrap();
    assert_eq!(report.rows.len(), 8);
    assert_eq!(report.columns.len(), 11);
    assert_eq!(report.rows.iter().filter(|r| r.cross && r.deq && r.res).count(), 1);
    let again = run_ablation(&data, &tiny_model(), &tiny_train(1), &eval, &[0], &[[true, true, true], [true, true, true]]).unwrap();
    assert_eq!(again.rows[0], again.rows[1]);
    assert_eq!(again.rows[0].metrics, report.rows[7].metrics);
    let md = report.to_markdown();
    assert_eq!(md.lines().count(), 10);
}

#[test]
fn median_and_wins_follow_column_direction() {
    use hoi_core::eval::MetricRow;
    let row = |x: f64| MetricRow::from_values([x; 11]);
    assert_eq!(median_row(&[row(3.0), row(1.0), row(2.0)]), row(2.0));
    assert_eq!(median_row(&[row(1.0), row(2.0)]), row(1.5));
    // Lower is better for the five error columns, higher for the rest.
    assert_eq!(wins(&row(2.0), &row(1.0)), 6);
    assert_eq!(wins(&row(1.0), &row(2.0)), 5);
    assert_eq!(wins(&row(1.0), &row(1.0)), 0);
}

#[test]
fn modification_report_covers_each_site_and_strategy() {
    let data = tiny_data(0);
    let eval = EvalSettings { repeats: 1, ..EvalSettings::default() };
    let report = run_modification(&data, &tiny_model(), &tiny_train(1), &eval).unwrap();
    assert_eq!(report.rows.len(), 12);
    let defaults: Vec<_> = report.rows.iter().filter(|r| r.strategy == r.site.default_strategy()).collect();
    assert_eq!(defaults.len(), 3);
    assert!(defaults.iter().all(|r| r.metrics == defaults[0].metrics));
    let (full, _) = train_and_evaluate(&data, &tiny_model(), &tiny_train(1), &eval).unwrap();
    assert_eq!(defaults[0].metrics, full);
    assert!(report.to_markdown().contains("| Deq | series-cross |"));
}

#[test]
fn single_dimension_sweep_equals_plain_training() {
    let data = tiny_data(0);
    let eval = EvalSettings { repeats: 1, ..EvalSettings::default() };
    let sweep = run_latent_sweep(&data, &tiny_model(), &tiny_train(1), &eval, &[4]).unwrap();
    let (plain, _) = train_and_evaluate(&data, &tiny_model(), &tiny_train(1), &eval).unwrap();
    assert_eq!(sweep.rows, vec![plain]);
    assert_eq!(sweep.curves.len(), HEAD_METRICS.len());
}

#[test]
fn sweep_curves_are_finite_and_plot_one_line_per_metric() {
    let data = tiny_data(0);
    let eval = EvalSettings { repeats: 1, ..EvalSettings::default() };
    let sweep = run_latent_sweep(&data, &tiny_model(), &tiny_train(1), &eval, &[2, 4, 8]).unwrap();
    for curve in &sweep.curves {
        for (_, points) in &curve.series {
            assert_eq!(points.iter().map(|p| p.dim).collect::<Vec<_>>(), vec![2, 4, 8]);
            assert!(points.iter().all(|p| p.value.is_finite()));
        }
        let svg = curve.to_svg();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), curve.series.len());
    }
}

#[test]
fn inference_spread_is_omitted_for_one_repeat_and_zero_when_deterministic() {
    let data = tiny_data(0);
    let model = Model::new(&tiny_model(), 0).unwrap();
    let one = infer(&model, &data.test[0], 1, LatentMode::Sampled, 0).unwrap();
    assert_eq!(one.bundles.len(), 1);
    assert!(one.spread.is_none());
    assert!(!serde_json::to_string(&one).unwrap().contains("spread"));

    let det = infer(&model, &data.test[0], 4, LatentMode::Deterministic, 0).unwrap();
    let s = det.spread.unwrap();
    assert_eq!((s.trend_std, s.mani_std, s.hotspot_dispersion, s.theta_std, s.contact_disagreement), (0.0, 0.0, 0.0, 0.0, 0));

    // Zero-initialised output layers ignore the latent until trained.
    let mut t = Trainer::new(&tiny_model(), &tiny_train(3)).unwrap();
    fit(&mut t, &data.train, None).unwrap();
    let sampled = infer(&t.model, &data.test[0], 8, LatentMode::Sampled, 0).unwrap().spread.unwrap();
    assert!(sampled.trend_std > 0.0 && sampled.theta_std > 0.0);
    assert_eq!(sampled.contact_votes.len(), 778);
    assert!(sampled.contact_votes.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn inference_rejects_samples_of_another_layout() {
    let model = Model::new(&tiny_model(), 0).unwrap();
    let other = generate_dataset(&hoi_core::data::GeneratorConfig { n_c: 5, ..tiny_generator() }, 0).unwrap();
    assert!(matches!(infer(&model, &other.test[0], 2, LatentMode::Sampled, 0), Err(HoiError::Schema { .. })));
}
