use std::collections::BTreeMap;

use lyt_core::dynamics::{SystemKind, SystemSpec};
use lyt_core::model::*;
use lyt_core::render::{Dataset, DistractorConfig, RenderConfig, VideoClip};
use lyt_core::trainer::*;
use lyt_numcore::{check_decomposed_gradients, Graph, LossTerm, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small enough to train for a few steps in milliseconds.
fn tiny() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        patch: 8,
        d_model: 16,
        depth: 1,
        heads: 2,
        d_z: 4,
        horizon: 2,
        context: 4,
        decoder_channels: 8,
        ..ModelConfig::default()
    }
}

fn dataset(count: usize, seed: u64) -> Vec<VideoClip> {
    let spec = SystemSpec::default_for(SystemKind::SinglePendulum);
    let render = RenderConfig { height: 16, width: 16, fps: 20.0, duration: 1.0 };
    Dataset::generate(&spec, &render, DistractorConfig::none(), count, seed, "test")
        .unwrap()
        .clips
}

fn quick(steps: u64) -> TrainConfig {
    TrainConfig { steps, batch: 2, lr: 1e-3, ..TrainConfig::default() }
}

// ----- Adam --------------------------------------------------------------

fn f32_params(rng: &mut ChaCha8Rng, n: usize) -> Params {
    let mut p = Params::new();
    p.insert("a".into(), Tensor::from_fn([n], |_| rng.random_range(-1.0f32..1.0) as f64));
    p
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = f32_params(&mut rng, 50);
    let before = params.clone();
    let mut state = AdamState::default();
    let grads = BTreeMap::from([("a".to_string(), vec![0.0; 50])]);
    for _ in 0..3 {
        adam_step(&mut params, &grads, &mut state, 1e-2).unwrap();
    }
    assert_eq!(params, before);
    assert_eq!(state.step, 3);
}

#[test]
fn first_step_moves_by_learning_rate_times_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = f32_params(&mut rng, 200);
    let before = params["a"].data().to_vec();
    let g: Vec<f64> = (0..200).map(|_| rng.random_range(-3.0..3.0)).collect();
    let lr = 1e-3;
    adam_step(&mut params, &BTreeMap::from([("a".to_string(), g.clone())]), &mut AdamState::default(), lr).unwrap();
    for i in 0..200 {
        // Bias correction makes m̂ = g and v̂ = g² on the first step.
        let exact = before[i] - lr * g[i] / (g[i].abs() + ADAM_EPS);
        assert_eq!(params["a"].data()[i], exact as f32 as f64);
        let moved = params["a"].data()[i] - before[i];
        let ulp = f32::EPSILON as f64 * before[i].abs().max(lr);
        assert!((moved + lr * g[i].signum()).abs() <= lr * ADAM_EPS / g[i].abs() + ulp);
    }
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = f32_params(&mut rng, 4);
    let mut state = AdamState::default();
    let bad = BTreeMap::from([("a".to_string(), vec![0.0; 3])]);
    assert!(adam_step(&mut params, &bad, &mut state, 1e-3).is_err());
    let unknown = BTreeMap::from([("b".to_string(), vec![0.0; 4])]);
    assert!(adam_step(&mut params, &unknown, &mut state, 1e-3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn adam_is_deterministic(seed in 0u64..10_000, lr in 1e-5f64..1e-1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = f32_params(&mut rng, 16);
        let grads: BTreeMap<String, Vec<f64>> =
            BTreeMap::from([("a".to_string(), (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())]);
        let run = || {
            let (mut p, mut s) = (params.clone(), AdamState::default());
            for _ in 0..4 {
                adam_step(&mut p, &grads, &mut s, lr).unwrap();
            }
            (p, s)
        };
        prop_assert_eq!(run(), run());
    }
}

// ----- phase 1 -----------------------------------------------------------

#[test]
fn training_is_deterministic_and_logs_every_step() {
    let data = dataset(3, 4);
    let cfg = TrainConfig { augment: DistractorConfig::standard(), ..quick(5) };
    let model = Model::new(tiny(), 4).unwrap();
    let (a, log_a) = train_phase1(&data, model.clone(), &cfg, "h").unwrap();
    let (b, log_b) = train_phase1(&data, model.clone(), &cfg, "h").unwrap();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert_ne!(a.params, model.params);
    let steps: Vec<u64> = log_a.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5]);
    for r in &log_a.records {
        assert!(r.l_rec.is_finite() && r.l_pred.is_finite() && r.gnorm.is_finite());
        assert_eq!(r.l_lyap, 0.0);
        assert_eq!(r.l_total, r.l_rec + r.l_pred);
    }
    let mut csv = Vec::new();
    log_a.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# config_hash=h");
    assert_eq!(lines[1], "step,l_rec,l_pred,l_lyap,l_total,gnorm,ms");
    assert_eq!(lines.len(), 7);
    assert!(lines[2].starts_with("1,") && lines[2].ends_with(",0"));
}

/// A hand-rolled loop on `L_rec` alone: same batches, same clipping, same
/// optimizer.
fn rec_only_run(data: &[VideoClip], mut model: Model, cfg: &TrainConfig) -> Model {
    let mc = model.config.clone();
    let mut state = AdamState::default();
    for step in 1..=cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step);
        let batch = sample_batch(data, mc.context + mc.horizon, cfg.batch, &cfg.augment, &mut rng).unwrap();
        let ctx: Vec<VideoClip> = batch.iter().map(|w| w.window(0, mc.context).unwrap()).collect();
        let refs: Vec<&VideoClip> = ctx.iter().collect();
        let mut g = Graph::new();
        let b = model.bind(&mut g, |_| true);
        let enc = encode(&mut g, &b, &mc, &refs).unwrap();
        let rows: Vec<usize> = (0..refs.len() * mc.context).map(|r| r / mc.context).collect();
        let skip = expand_skip(&mut g, enc.skip, &rows).unwrap();
        let recon = decode(&mut g, &b, &mc, enc.z, skip).unwrap();
        let target = g.constant(frames_tensor(&refs, 0..mc.context).unwrap());
        let loss = loss_rec(&mut g, recon, target).unwrap();
        g.backward(loss).unwrap();
        let mut grads: BTreeMap<String, Vec<f64>> = b
            .iter()
            .map(|(n, &v)| (n.clone(), g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()])))
            .collect();
        let norm = grad_norm(&grads);
        if let Some(c) = cfg.grad_clip.filter(|&c| norm > c) {
            grads.values_mut().flatten().for_each(|v| *v *= c / norm);
        }
        adam_step(&mut model.params, &grads, &mut state, cfg.lr).unwrap();
    }
    model
}

#[test]
fn zero_prediction_weight_matches_reconstruction_only_training() {
    let data = dataset(3, 5);
    let cfg = TrainConfig { lambda_pred: 0.0, augment: DistractorConfig::standard(), ..quick(4) };
    let model = Model::new(tiny(), 5).unwrap();
    let (trained, log) = train_phase1(&data, model.clone(), &cfg, "").unwrap();
    assert_eq!(trained.params, rec_only_run(&data, model.clone(), &cfg).params);
    assert!(log.records.iter().all(|r| r.l_pred > 0.0 && r.l_total == r.l_rec));
    // The transition only enters through L_pred, so it never moves.
    for (name, t) in &trained.params {
        if name.starts_with("trans.") {
            assert_eq!(t, model.param(name));
        }
    }
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let data = dataset(3, 6);
    let model = Model::new(tiny(), 6).unwrap();
    let full_cfg = quick(6);
    let (straight, full_log, _) = train(&data, model.clone(), &full_cfg, AdamState::default(), "h").unwrap();

    let (half, first_log, state) = train(&data, model, &quick(3), AdamState::default(), "h").unwrap();
    half.save_checkpoint(&path, 1, state.step, "h", &state.to_tensors()).unwrap();
    let (loaded, header, extra) = Model::load_checkpoint(&path).unwrap();
    let restored = AdamState::from_tensors(header.step, &extra);
    assert_eq!(restored, state);
    let (resumed, second_log, _) = train(&data, loaded, &full_cfg, restored, "h").unwrap();
    assert_eq!(resumed, straight);
    let joined: Vec<StepRecord> = first_log.records.into_iter().chain(second_log.records).collect();
    assert_eq!(joined, full_log.records);
}

#[test]
fn checkpoint_reproduces_forward_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let data = dataset(2, 7);
    let (model, _) = train_phase1(&data, Model::new(tiny(), 7).unwrap(), &quick(3), "").unwrap();
    model.save_checkpoint(&path, 1, 3, "", &BTreeMap::new()).unwrap();
    let (loaded, _, _) = Model::load_checkpoint(&path).unwrap();
    let probe = data[1].window(0, 4).unwrap();
    let (za, sa) = model.encode_window(&probe).unwrap();
    let (zb, sb) = loaded.encode_window(&probe).unwrap();
    assert_eq!((za.data.clone(), sa.clone()), (zb.data, sb));
    assert_eq!(model.decode(&za.data, Some(&sa)).unwrap(), loaded.decode(&za.data, Some(&sa)).unwrap());
}

#[test]
fn non_finite_loss_aborts_with_the_offending_record() {
    let data = dataset(2, 8);
    let mut model = Model::new(tiny(), 8).unwrap();
    model.params.get_mut("dec.up2.b").unwrap().data_mut()[0] = f64::NAN;
    match train_phase1(&data, model, &quick(3), "") {
        Err(TrainError::NonFinite { record }) => {
            assert_eq!(record.step, 1);
            assert!(record.l_rec.is_nan());
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn training_rejects_short_clips_and_bad_configs() {
    let data = dataset(2, 9);
    let short: Vec<VideoClip> = data.iter().map(|c| c.window(0, 5).unwrap()).collect();
    let model = Model::new(tiny(), 9).unwrap();
    assert!(matches!(train_phase1(&short, model.clone(), &quick(1), ""), Err(TrainError::Config(_))));
    let bad = TrainConfig { lr: -1.0, ..quick(1) };
    assert!(matches!(train_phase1(&data, model.clone(), &bad, ""), Err(TrainError::Config(_))));
    let p2 = TrainConfig { phase: Phase::Two, ..quick(1) };
    assert!(matches!(train(&data, model, &p2, AdamState::default(), ""), Err(TrainError::Config(_))));
}

// ----- phase 2 -----------------------------------------------------------

fn selection_for(model: &Model, data: &[VideoClip], dims: Vec<usize>) -> Selection {
    let mut center = vec![0.0; dims.len()];
    let mut n = 0.0;
    for c in data {
        let z = model.encode_clip(c).unwrap();
        for t in 0..z.frames {
            for (i, &d) in dims.iter().enumerate() {
                center[i] += z.row(t)[d];
            }
            n += 1.0;
        }
    }
    center.iter_mut().for_each(|v| *v /= n);
    Selection { dims, center }
}

#[test]
fn phase_two_without_lyapunov_weight_only_refines_the_transition() {
    let data = dataset(3, 10);
    let (base, _) = train_phase1(&data, Model::new(tiny(), 10).unwrap(), &quick(3), "").unwrap();
    let sel = selection_for(&base, &data, vec![0, 2]);
    let cfg = TrainConfig { lambda_lyap: 0.0, ..quick(4) };
    let (refined, log) = train_phase2(&data, base.clone(), sel.clone(), &cfg, "").unwrap();
    assert_eq!(refined.selection.as_ref(), Some(&sel));
    assert_eq!(refined.param("lyap.w"), &Tensor::eye(2));
    let mut moved = false;
    for (name, t) in &refined.params {
        match group_of(name) {
            Group::Transition => moved |= t != base.param(name),
            Group::Lyapunov => {}
            _ => assert_eq!(t, base.param(name), "{name} changed"),
        }
    }
    assert!(moved);
    for r in &log.records {
        assert!(r.l_lyap >= 0.0);
        assert_eq!(r.l_total, r.l_rec + r.l_pred);
    }
}

#[test]
fn full_selection_centered_at_zero_is_the_whole_latent() {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z = Tensor::from_fn([5, 4], |_| rng.random_range(-2.0..2.0));
    let zv = g.constant(z.clone());
    let sel = Selection { dims: vec![0, 1, 2, 3], center: vec![0.0; 4] };
    let zt = select_latent(&mut g, &sel, 4, zv).unwrap();
    assert_eq!(g.value(zt), &z);
    let w = g.constant(Tensor::eye(4));
    let v = lyapunov_v(&mut g, zt, w).unwrap();
    for (i, row) in z.data().chunks(4).enumerate() {
        assert_eq!(g.value(v).data()[i], row.iter().map(|x| x * x).sum::<f64>());
    }
}

#[test]
fn phase_two_does_not_raise_held_out_lyapunov_loss() {
    let data = dataset(4, 12);
    let held = dataset(3, 112);
    let held: Vec<VideoClip> = held.iter().map(|c| c.window(0, 6).unwrap()).collect();
    let (mut base, _) = train_phase1(&data, Model::new(tiny(), 12).unwrap(), &quick(5), "").unwrap();
    base.perturb_transition(0.2, 12);
    let sel = selection_for(&base, &data, vec![0, 1, 2, 3]);
    base.set_selection(sel.clone()).unwrap();
    let before = measured_lyap(&base, &held, 2).unwrap();
    assert!(before > 0.0);
    let cfg = TrainConfig { lambda_lyap: 10.0, ..quick(20) };
    let (after_model, _) = train_phase2(&data, base, sel, &cfg, "").unwrap();
    let after = measured_lyap(&after_model, &held, 2).unwrap();
    assert!(after <= before, "{after} > {before}");
}

// ----- hinge regimes -------------------------------------------------------

/// A model whose transition is the pure translation `z ↦ z + δ`, with a
/// Lyapunov head centered `distance` units along `δ` from the data (negative
/// distance puts the center behind the data, so every step moves away).
fn translating_model(distance: f64) -> (Model, VideoClip) {
    let mut model = Model::new(tiny(), 13).unwrap();
    let clip = dataset(1, 13).remove(0).window(0, 6).unwrap();
    let delta = [0.05, -0.03, 0.02, 0.04];
    let norm = delta.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
    model.params.get_mut("trans.fc2.w").unwrap().data_mut().fill(0.0);
    model.params.get_mut("trans.fc2.b").unwrap().data_mut().copy_from_slice(&delta);
    let z = model.encode_clip(&clip).unwrap();
    let center: Vec<f64> = (0..4).map(|d| z.row(0)[d] + distance * delta[d] / norm).collect();
    model.set_selection(Selection { dims: vec![0, 1, 2, 3], center }).unwrap();
    // A non-identity W so that its gradient is not trivially structured.
    let w = model.params.get_mut("lyap.w").unwrap().data_mut();
    for (i, v) in w.iter_mut().enumerate() {
        *v += 0.1 * ((i * 7 % 5) as f64 - 2.0);
    }
    (model, clip)
}

fn lyap_gradient(model: &Model, clip: &VideoClip) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let b = model.bind(&mut g, |n| n == "lyap.w");
    let v = objective(
        &mut g,
        &b,
        &model.config,
        &[clip],
        ObjectiveOptions {
            lambda_pred: 0.0,
            lambda_lyap: 1.0,
            starts: RolloutStarts::All,
            selection: model.selection.as_ref(),
        },
    )
    .unwrap();
    let lyap = v.lyap.unwrap();
    g.backward(lyap).unwrap();
    (g.value(v.hinges.unwrap()).data().to_vec(), g.grad(b["lyap.w"]).unwrap().to_vec())
}

#[test]
fn inactive_hinges_give_exactly_zero_head_gradient() {
    let (model, clip) = translating_model(10.0);
    let (hinges, grad) = lyap_gradient(&model, &clip);
    assert!(hinges.iter().all(|&h| h == 0.0));
    assert!(grad.iter().all(|&v| v == 0.0), "{grad:?}");
}

#[test]
fn active_hinges_match_finite_differences() {
    let (model, clip) = translating_model(-10.0);
    let (hinges, grad) = lyap_gradient(&model, &clip);
    assert!(hinges.iter().all(|&h| h > 0.0));
    assert!(grad.iter().any(|&v| v != 0.0));

    // Every head entry and every transition bias entry.
    let names: Vec<String> = model.params.keys().cloned().collect();
    let inputs: Vec<Tensor> = model.params.values().cloned().collect();
    let mut chosen = Vec::new();
    for (i, n) in names.iter().enumerate() {
        if n == "lyap.w" || n == "trans.fc2.b" {
            chosen.extend((0..inputs[i].len()).map(|e| (i, e)));
        }
    }
    let sel = model.selection.clone().unwrap();
    let report = check_decomposed_gradients(&inputs, GRADCHECK_STEP, Some(&chosen), |g, vars| {
        let b: Bound = names.iter().cloned().zip(vars.iter().copied()).collect();
        let opts = ObjectiveOptions { lambda_pred: 0.0, lambda_lyap: 1.0, starts: RolloutStarts::All, selection: Some(&sel) };
        let h = objective(g, &b, &model.config, &[&clip], opts).unwrap().hinges.unwrap();
        let n = g.value(h).len() as f64;
        Ok(vec![LossTerm::sum(h, 1.0 / n)])
    })
    .unwrap();
    assert_eq!(report.entries.len(), 20);
    assert!(report.passes(GRADCHECK_TOL), "{:?}", report.worst());

    let checks = gradcheck(&model, &clip, 64, 13).unwrap();
    let lyap = checks.iter().find(|c| c.loss == "l_lyap").unwrap();
    let worst = lyap.report.worst().unwrap();
    assert!(lyap.passes(GRADCHECK_TOL), "{:?} {worst:?}", lyap.worst());
}

#[test]
fn gradcheck_passes_at_defaults() {
    let mut model = Model::new(ModelConfig::default(), 0).unwrap();
    model.perturb_transition(0.02, 0);
    let spec = SystemSpec::default_for(SystemKind::SinglePendulum);
    let clip = Dataset::generate(&spec, &RenderConfig::default(), DistractorConfig::none(), 1, 0, "")
        .unwrap()
        .clips
        .remove(0);
    let checks = gradcheck(&model, &clip, 64, 0).unwrap();
    assert_eq!(checks.len(), 3);
    for c in &checks {
        assert!(c.report.entries.len() > 50, "{}", c.loss);
        assert!(c.passes(GRADCHECK_TOL), "{}: {:?}", c.loss, c.worst());
    }
}
