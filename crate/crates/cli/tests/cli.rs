use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lyt_cli::config::ExperimentConfig;
use lyt_cli::pipeline::{evaluate_model, generate_datasets, Layout};
use lyt_cli::plot;
use lyt_cli::report::{read_train_log, ExperimentReport, Table};
use lyt_core::dynamics::{energy, SystemKind, SystemSpec, StateTrajectory};
use lyt_core::model::{Model, ModelConfig};
use lyt_core::render::RenderConfig;
use tempfile::TempDir;

/// Pendulum experiment small enough that every subcommand takes well under
/// a second.
fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.render = RenderConfig { height: 16, width: 16, fps: 20.0, duration: 1.0 };
    cfg.data.train_clips = 4;
    cfg.data.eval_clips = 3;
    cfg.model = ModelConfig {
        height: 16,
        width: 16,
        d_model: 16,
        depth: 1,
        heads: 2,
        d_z: 4,
        horizon: 2,
        context: 4,
        decoder_channels: 8,
        ..ModelConfig::default()
    };
    for p in [&mut cfg.phase1, &mut cfg.phase2] {
        p.steps = 6;
        p.batch = 2;
        p.lr = 1e-3;
    }
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("experiment.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn lyt(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lyt"))
        .arg("--config")
        .arg(config)
        .arg("--quiet")
        .args(args)
        .output()
        .expect("run lyt")
}

#[track_caller]
fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "lyt failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A tiny experiment directory after `generate`.
fn generated() -> (TempDir, PathBuf, ExperimentConfig) {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(&dir.path().join("run"));
    let path = write_config(dir.path(), &cfg);
    ok(lyt(&path, &["generate"]));
    (dir, path, cfg)
}

/// Relative path and bytes of every file below `root`, except the resolved
/// `config.toml` files, which name their own output directory.
fn outputs(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut all = snapshot(root);
    all.retain(|p, _| !p.ends_with("config.toml"));
    all
}

/// Relative path and bytes of every file below `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

// ----- configuration ---------------------------------------------------------

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let pendulum = ExperimentConfig::load(&dir.join("single_pendulum.toml")).unwrap();
    assert_eq!(pendulum, ExperimentConfig::default());
    pendulum.validate().unwrap();
    let circle = ExperimentConfig::load(&dir.join("circular_motion.toml")).unwrap();
    circle.validate().unwrap();
    assert_eq!(circle.system.kind(), SystemKind::CircularMotion);
}

#[test]
fn toml_round_trip_preserves_hash() {
    let cfg = tiny(Path::new("x"));
    let back: ExperimentConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_eq!(cfg.hash().len(), 64);
}

#[test]
fn hash_tracks_settings_but_not_location() {
    let a = tiny(Path::new("a"));
    let b = tiny(Path::new("elsewhere"));
    assert_eq!(a.hash(), b.hash());
    let mut c = a.clone();
    c.seed = 1;
    assert_ne!(a.hash(), c.hash());
    let mut d = a.clone();
    d.model.lambda_lyap = 0.0;
    assert_ne!(a.hash(), d.hash());
}

#[test]
fn invalid_configs_are_rejected() {
    let base = tiny(Path::new("x"));
    let mut size = base.clone();
    size.render.height = 32;
    let mut short = base.clone();
    short.render.duration = 0.5;
    let mut patch = base.clone();
    patch.model.patch = 5;
    let mut select = base.clone();
    select.metrics.d_select = Some(9);
    let mut variants = base.clone();
    variants.distractors.eval.truncate(1);
    for bad in [size, short, patch, select, variants] {
        assert!(bad.validate().is_err(), "accepted {bad:?}");
    }
    base.validate().unwrap();
}

#[test]
fn unknown_keys_fail_with_config_exit_code() {
    let dir = TempDir::new().unwrap();
    let mut text = tiny(dir.path()).to_toml().unwrap();
    text.insert_str(0, "learning_rate = 1.0\n");
    let path = dir.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    assert_eq!(lyt(&path, &["generate"]).status.code(), Some(2));
}

#[test]
fn inconsistent_config_fails_with_config_exit_code() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny(&dir.path().join("run"));
    cfg.render.duration = 0.4;
    let path = write_config(dir.path(), &cfg);
    let out = lyt(&path, &["generate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn training_without_dataset_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let path = write_config(dir.path(), &tiny(&dir.path().join("run")));
    assert_eq!(lyt(&path, &["train"]).status.code(), Some(4));
}

#[test]
fn divergent_training_is_a_numeric_failure() {
    let (_dir, path, mut cfg) = generated();
    cfg.phase1.lr = 1e38;
    cfg.phase1.grad_clip = None;
    let path = write_config(path.parent().unwrap(), &cfg);
    assert_eq!(lyt(&path, &["train", "--steps", "20"]).status.code(), Some(3));
}

// ----- generate --------------------------------------------------------------

#[test]
fn generate_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let a = tiny(&dir.path().join("a"));
    let b = tiny(&dir.path().join("b"));
    ok(lyt(&write_config(dir.path(), &a), &["generate"]));
    ok(lyt(&write_config(dir.path(), &b), &["generate"]));
    let (sa, sb) = (outputs(&a.output_dir), outputs(&b.output_dir));
    assert!(!sa.is_empty());
    assert_eq!(sa, sb);
}

#[test]
fn manifest_lists_requested_clips_with_hash() {
    let (_dir, _path, cfg) = generated();
    let layout = Layout::new(&cfg.output_dir);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(layout.data_train().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["clips"].as_array().unwrap().len(), cfg.data.train_clips);
    assert_eq!(manifest["config_hash"], cfg.hash());
    let eval = lyt_core::render::Dataset::load(&layout.data_eval()).unwrap();
    assert_eq!(eval.clips.len(), cfg.data.eval_clips);
}

#[test]
fn generated_pendulum_truths_conserve_energy() {
    let (_dir, _path, cfg) = generated();
    let dir = Layout::new(&cfg.output_dir).data_train();
    let text = fs::read_to_string(dir.join("clip_00000_truth.csv")).unwrap();
    assert!(text.starts_with(&format!("# config_hash={}", cfg.hash())));
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let truth = StateTrajectory::read_csv(body.as_bytes()).unwrap();
    let e: Vec<f64> = (0..truth.len()).map(|i| energy(&cfg.system.system, truth.state(i)).unwrap()).collect();
    let drift = e.iter().map(|v| (v - e[0]).abs()).fold(0.0, f64::max) / e[0].abs();
    assert!(drift < 1e-6, "relative energy drift {drift}");
}

#[test]
fn no_overwrite_refuses_and_keeps_files() {
    let (_dir, path, cfg) = generated();
    let before = snapshot(&cfg.output_dir);
    let out = ok(lyt(&path, &["generate", "--no-overwrite"]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("exists"));
    assert_eq!(snapshot(&cfg.output_dir), before);
    ok(lyt(&path, &["generate"]));
    assert_eq!(snapshot(&cfg.output_dir), before);
}

// ----- train -----------------------------------------------------------------

#[test]
fn phase_one_smoke_writes_checkpoint_and_log() {
    let (_dir, path, cfg) = generated();
    ok(lyt(&path, &["train", "--phase", "1", "--steps", "10"]));
    let layout = Layout::new(&cfg.output_dir);
    let (model, header, extra) = Model::load_checkpoint(&layout.checkpoint("phase1")).unwrap();
    assert_eq!(header.phase, 1);
    assert_eq!(header.step, 10);
    assert_eq!(model.config, cfg.model);
    assert!(extra.keys().any(|k| k.starts_with("adam.m.")));
    let log = read_train_log(&layout.log("phase1")).unwrap();
    assert_eq!(log.records.len(), 10);
    assert_eq!(log.records.last().unwrap().step, 10);
    assert!(!layout.checkpoint("phase2").exists());
    Model::load_checkpoint(&layout.checkpoint("final")).unwrap();
}

#[test]
fn zero_lyapunov_weight_matches_phase_two_off() {
    let (dir, path, cfg) = generated();
    let other = tiny(&dir.path().join("other"));
    let other_path = dir.path().join("other.toml");
    fs::write(&other_path, other.to_toml().unwrap()).unwrap();
    ok(lyt(&other_path, &["generate"]));
    ok(lyt(&path, &["train", "--lyap", "0"]));
    ok(lyt(&other_path, &["train", "--phase", "1"]));
    let (a, ha, _) = Model::load_checkpoint(&Layout::new(&cfg.output_dir).checkpoint("final")).unwrap();
    let (b, hb, _) = Model::load_checkpoint(&Layout::new(&other.output_dir).checkpoint("final")).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.selection, b.selection);
    assert_eq!((ha.phase, hb.phase), (1, 1));
    assert!(!Layout::new(&cfg.output_dir).checkpoint("phase2").exists());
}

#[test]
fn full_training_runs_both_phases() {
    let (_dir, path, cfg) = generated();
    ok(lyt(&path, &["train"]));
    let layout = Layout::new(&cfg.output_dir);
    let (model, header, _) = Model::load_checkpoint(&layout.checkpoint("final")).unwrap();
    assert_eq!(header.phase, 2);
    assert_eq!(header.config_hash, cfg.hash());
    let sel = model.selection.expect("selection installed");
    assert_eq!(sel.dims.len(), cfg.d_select());
    let (p1, _, _) = Model::load_checkpoint(&layout.checkpoint("phase1")).unwrap();
    // Phase 2 leaves the encoder and decoder alone by default.
    for (name, t) in &p1.params {
        if !name.starts_with("trans.") {
            assert_eq!(t, &model.params[name], "{name} changed in phase 2");
        }
    }
    assert_eq!(read_train_log(&layout.log("phase2")).unwrap().records.len(), 6);
}

#[test]
fn resumed_phase_one_matches_uninterrupted_run() {
    let (dir, path, cfg) = generated();
    let resumed = tiny(&dir.path().join("resumed"));
    let rpath = dir.path().join("resumed.toml");
    fs::write(&rpath, resumed.to_toml().unwrap()).unwrap();
    ok(lyt(&rpath, &["generate"]));

    ok(lyt(&path, &["train"]));
    ok(lyt(&rpath, &["train", "--phase", "1", "--steps", "3"]));
    ok(lyt(&rpath, &["train", "--resume"]));

    let (a, b) = (Layout::new(&cfg.output_dir), Layout::new(&resumed.output_dir));
    for name in ["phase1", "phase2", "final"] {
        assert_eq!(fs::read(a.checkpoint(name)).unwrap(), fs::read(b.checkpoint(name)).unwrap(), "{name}");
    }
    for name in ["phase1", "phase2"] {
        assert_eq!(fs::read(a.log(name)).unwrap(), fs::read(b.log(name)).unwrap(), "{name} log");
    }
}

#[test]
fn resumed_phase_two_matches_uninterrupted_run() {
    let (dir, path, cfg) = generated();
    let mut partial = tiny(&dir.path().join("resumed"));
    partial.phase2.steps = 2;
    let ppath = dir.path().join("partial.toml");
    fs::write(&ppath, partial.to_toml().unwrap()).unwrap();
    ok(lyt(&ppath, &["generate"]));
    ok(lyt(&ppath, &["train"]));
    let full = tiny(&dir.path().join("resumed"));
    let fpath = dir.path().join("full.toml");
    fs::write(&fpath, full.to_toml().unwrap()).unwrap();
    ok(lyt(&fpath, &["train", "--resume"]));

    ok(lyt(&path, &["train"]));
    let (a, b) = (Layout::new(&cfg.output_dir), Layout::new(&full.output_dir));
    assert_eq!(fs::read(a.checkpoint("final")).unwrap(), fs::read(b.checkpoint("final")).unwrap());
    assert_eq!(fs::read(a.log("phase2")).unwrap(), fs::read(b.log("phase2")).unwrap());
}

// ----- evaluate --------------------------------------------------------------

#[test]
fn untrained_model_has_finite_metrics() {
    let cfg = tiny(Path::new("unused"));
    let (_, eval) = generate_datasets(&cfg).unwrap();
    let model = Model::new(cfg.model.clone(), 3).unwrap();
    let ev = evaluate_model(&cfg, &model, &eval, "untrained").unwrap();
    let r = &ev.row;
    for v in [r.mi_total, r.amse, r.r2_mean, r.id, r.id_mean, r.err_k, r.err_4k, r.overlap, r.measured_lyap] {
        assert!(v.is_finite(), "{r:?}");
    }
    assert_eq!(r.selected.len(), cfg.d_select());
    assert!(r.flops > 0 && r.params == model.parameter_count());
    assert_eq!(ev.latents.len(), cfg.data.eval_clips);
    assert_eq!(ev.latents[0].len(), 1 + cfg.distractors.eval.len());
}

#[test]
fn circular_motion_truth_has_dimension_one() {
    let mut cfg = tiny(Path::new("unused"));
    cfg.system = SystemSpec::default_for(SystemKind::CircularMotion);
    // Each clip samples half the circle on a regular grid; the nearest
    // neighbours only look like a 1-D continuum once many random phases
    // interleave.
    cfg.data.eval_clips = 128;
    let (_, eval) = generate_datasets(&cfg).unwrap();
    let model = Model::new(cfg.model.clone(), 0).unwrap();
    let ev = evaluate_model(&cfg, &model, &eval, "truth").unwrap();
    assert!((ev.row.id_truth - 1.0).abs() <= 0.3, "ID of the circle {}", ev.row.id_truth);
}

#[test]
fn evaluate_writes_report_with_three_id_splits() {
    let (_dir, path, cfg) = generated();
    ok(lyt(&path, &["train"]));
    ok(lyt(&path, &["evaluate"]));
    let layout = Layout::new(&cfg.output_dir);
    let report = ExperimentReport::load(&layout.eval("report")).unwrap();
    assert_eq!(report.config_hash, cfg.hash());
    assert_eq!(report.rows.len(), 1);
    let row = &report.rows[0];
    assert_eq!(row.config_hash, cfg.hash());
    assert_eq!(row.seed, cfg.seed);
    assert_eq!(row.id_splits.len(), 3);
    let mean = row.id_splits.iter().sum::<f64>() / 3.0;
    assert!((row.id_mean - mean).abs() < 1e-12);
    let var = row.id_splits.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
    assert!((row.id_std - var.sqrt()).abs() < 1e-12);
    for name in ["ranking", "mi_grid", "latents"] {
        let t = Table::load(&layout.eval(name)).unwrap();
        assert_eq!(t.config_hash, cfg.hash(), "{name}");
    }
    let grid = Table::load(&layout.eval("mi_grid")).unwrap();
    assert_eq!(grid.rows.len(), cfg.model.d_z);
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let mut snaps = Vec::new();
    for name in ["a", "b"] {
        let cfg = tiny(&dir.path().join(name));
        let path = dir.path().join(format!("{name}.toml"));
        fs::write(&path, cfg.to_toml().unwrap()).unwrap();
        for cmd in ["generate", "train", "evaluate", "plot"] {
            ok(lyt(&path, &[cmd]));
        }
        snaps.push(outputs(&cfg.output_dir));
    }
    assert_eq!(snaps[0], snaps[1]);
    assert!(snaps[0].keys().any(|p| p.ends_with("final.lytc")));
}

#[test]
fn rerun_with_unchanged_hash_reproduces_outputs() {
    let (_dir, path, cfg) = generated();
    ok(lyt(&path, &["train"]));
    ok(lyt(&path, &["evaluate"]));
    let before = snapshot(&cfg.output_dir);
    ok(lyt(&path, &["train"]));
    ok(lyt(&path, &["evaluate"]));
    assert_eq!(snapshot(&cfg.output_dir), before);
    let out = ok(lyt(&path, &["evaluate", "--no-overwrite"]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("exists"));
}

#[test]
fn text_outputs_carry_config_hash() {
    let (_dir, path, cfg) = generated();
    for cmd in ["train", "evaluate", "plot", "gradcheck"] {
        ok(lyt(&path, &[cmd]));
    }
    let hash = cfg.hash();
    for (rel, bytes) in snapshot(&cfg.output_dir) {
        let ext = rel.extension().and_then(|e| e.to_str()).unwrap_or("");
        if matches!(ext, "csv" | "json" | "svg" | "toml") {
            let text = String::from_utf8(bytes).unwrap();
            assert!(text.contains(&hash), "{} lacks the config hash", rel.display());
        }
    }
    let (_, header, _) = Model::load_checkpoint(&Layout::new(&cfg.output_dir).checkpoint("final")).unwrap();
    assert_eq!(header.config_hash, hash);
}

// ----- ablate ----------------------------------------------------------------

#[test]
fn ablation_grid_has_four_rows() {
    let (_dir, path, cfg) = generated();
    ok(lyt(&path, &["ablate"]));
    let dir = Layout::new(&cfg.output_dir).ablate();
    let grid = ExperimentReport::load(&dir.join("grid.csv")).unwrap();
    let names: Vec<&str> = grid.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["full_lyap", "full_nolyap", "lite_lyap", "lite_nolyap"]);

    // The unregularized cells report what the hinge measures, not zero.
    for r in [&grid.rows[1], &grid.rows[3]] {
        assert!(r.measured_lyap > 0.0, "{r:?}");
    }
    assert!(grid.rows[2].flops < grid.rows[0].flops);
    assert!(grid.rows[2].params < grid.rows[0].params);
    // Cells of one encoder share Phase 1, so Phase-1-only metrics agree.
    assert_eq!(grid.rows[0].amse, grid.rows[1].amse);
    assert_eq!(grid.rows[0].selected, grid.rows[1].selected);

    for name in ["lyapunov", "encoder"] {
        assert_eq!(Table::load(&dir.join(format!("{name}.csv"))).unwrap().rows.len(), 4);
    }
    let deltas = Table::load(&dir.join("deltas.csv")).unwrap();
    assert_eq!(deltas.rows.len(), 2);
    let d: f64 = deltas.float(0, "delta_long_horizon_error").unwrap();
    assert!((d - (grid.rows[0].err_4k - grid.rows[1].err_4k)).abs() < 1e-12);
}

#[test]
fn parallel_ablation_matches_serial() {
    let (dir, path, cfg) = generated();
    ok(lyt(&path, &["ablate"]));
    let other = tiny(&dir.path().join("parallel"));
    let opath = dir.path().join("parallel.toml");
    fs::write(&opath, other.to_toml().unwrap()).unwrap();
    ok(lyt(&opath, &["generate"]));
    let out = Command::new(env!("CARGO_BIN_EXE_lyt"))
        .args(["--quiet", "ablate", "--config"])
        .arg(&opath)
        .env("LYT_THREADS", "2")
        .output()
        .unwrap();
    ok(out);
    let a = outputs(&Layout::new(&cfg.output_dir).ablate());
    let b = outputs(&Layout::new(&other.output_dir).ablate());
    assert_eq!(a, b);
}

// ----- plot ------------------------------------------------------------------

fn svg_paths(text: &str) -> Vec<String> {
    let doc = roxmltree::Document::parse(text).expect("well-formed SVG");
    doc.descendants()
        .filter(|n| n.has_tag_name("path") && n.attribute("class") == Some("curve"))
        .map(|n| n.attribute("d").unwrap().to_string())
        .collect()
}

#[test]
fn plot_emits_one_overlay_per_selected_pair() {
    let (_dir, path, mut cfg) = generated();
    cfg.metrics.d_select = Some(3);
    let path = write_config(path.parent().unwrap(), &cfg);
    for cmd in ["train", "evaluate", "plot"] {
        ok(lyt(&path, &[cmd]));
    }
    let plots = Layout::new(&cfg.output_dir).plots();
    let overlays: Vec<PathBuf> = fs::read_dir(&plots)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("overlay_"))
        .collect();
    assert_eq!(overlays.len(), 3);
    for p in overlays {
        let curves = svg_paths(&fs::read_to_string(&p).unwrap());
        assert_eq!(curves.len(), cfg.distractors.eval.len());
    }
    for name in ["ranking.svg", "loss.svg"] {
        let text = fs::read_to_string(plots.join(name)).unwrap();
        roxmltree::Document::parse(&text).expect(name);
    }
}

#[test]
fn identical_runs_draw_identical_curves() {
    let run: Vec<(f64, f64)> = (0..30).map(|t| ((t as f64 * 0.3).sin(), (t as f64 * 0.3).cos())).collect();
    let svg = plot::overlay("t", "x", "y", &[("a".into(), run.clone()), ("b".into(), run)], "h");
    let paths = svg_paths(&svg);
    assert_eq!(paths.len(), 2);
    assert_eq!(paths[0], paths[1]);
    assert!(paths[0].starts_with('M'));
}

#[test]
fn labels_are_escaped() {
    let svg = plot::bar_chart("a < b & c", &[("z<0>".into(), 0.5, true)], "h");
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert!(doc.descendants().any(|n| n.text() == Some("a < b & c")));
}

// ----- gradcheck -------------------------------------------------------------

#[test]
fn gradcheck_command_passes_and_reports_each_loss() {
    let (_dir, path, cfg) = generated();
    let out = ok(lyt(&path, &["gradcheck"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches(" ok").count(), 3, "{stdout}");
    let t = Table::load(&Layout::new(&cfg.output_dir).gradcheck()).unwrap();
    let losses: Vec<&str> = (0..3).map(|r| t.get(r, "loss").unwrap()).collect();
    assert_eq!(losses, ["l_rec", "l_pred", "l_lyap"]);
    for r in 0..3 {
        assert_eq!(t.get(r, "pass").unwrap(), "1");
        assert!(t.float(r, "max_rel_error").unwrap() < 1e-4);
    }
}
