use std::fs;
use std::path::Path;
use std::process::Command;

use pips::cli::{self, RunConfig, TrackRecord};
use pips::data::{io, AugmentPolicy, SpriteSceneConfig};
use pips::train::TrainConfig;
use pips::{EncoderConfig, ModelConfig, StageConfig};

const BIN: &str = env!("CARGO_BIN_EXE_piptrack");

fn tiny_model() -> ModelConfig {
    ModelConfig {
        window: 8,
        channels: 16,
        iters: 2,
        radius: 2,
        levels: 2,
        gamma: 0.8,
        stride: 4,
        mixer_depth: 1,
        mixer_hidden: 32,
        token_expansion: 2,
        channel_expansion: 2,
        enc_freqs: 4,
        enc_scale: 48.0,
        encoder: EncoderConfig {
            stem_channels: 8,
            stages: vec![
                StageConfig { channels: 8, blocks: 1 },
                StageConfig { channels: 8, blocks: 1 },
                StageConfig { channels: 16, blocks: 1 },
            ],
        },
    }
}

fn tiny_scene(frames: usize) -> SpriteSceneConfig {
    SpriteSceneConfig {
        height: 32,
        width: 48,
        frames,
        sprites: [1, 3],
        size: [8.0, 16.0],
        speed: [0.5, 2.0],
        ..Default::default()
    }
}

fn tiny_run(steps: usize) -> RunConfig {
    let train = TrainConfig {
        steps,
        batch_size: 1,
        trajectories: 4,
        checkpoint_every: 3,
        scene: tiny_scene(8),
        augment: AugmentPolicy { crop: Some([24, 40]), ..Default::default() },
        ..Default::default()
    };
    RunConfig { model: tiny_model(), train }
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) {
    fs::write(path, serde_json::to_vec(v).unwrap()).unwrap();
}

#[test]
fn generate_writes_the_sequence_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    cli::cmd_generate(None, 5, &out, 1).unwrap();
    let seq = out.join("seq_00000");
    let names: Vec<String> = fs::read_dir(&seq).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    let count = |pre: &str, suf: &str| names.iter().filter(|n| n.starts_with(pre) && n.ends_with(suf)).count();
    assert_eq!(count("frame_", ".ppm"), 8);
    assert_eq!(count("flow_fwd_", ".flo"), 7);
    assert_eq!(count("flow_bwd_", ".flo"), 7);
    assert_eq!(count("masks_", ".pgm"), 8);
    assert!(seq.join("gt.json").is_file());
    assert_eq!(io::read_manifest(&out).unwrap().count, 1);

    let again = dir.path().join("again");
    cli::cmd_generate(None, 5, &again, 1).unwrap();
    assert_eq!(fs::read(seq.join("gt.json")).unwrap(), fs::read(again.join("seq_00000/gt.json")).unwrap());
}

#[test]
fn generate_zero_writes_only_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    cli::cmd_generate(None, 1, dir.path(), 0).unwrap();
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec!["manifest.json"]);
}

#[test]
fn unknown_config_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.json");
    let mut v = serde_json::to_value(SpriteSceneConfig::default()).unwrap();
    v["sprite_cnt"] = serde_json::json!(3);
    write_json(&path, &v);
    let out = run(&["generate", "--config", path.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[config]: "), "{err}");
    assert!(err.contains("sprite_cnt"));
    assert_eq!(err.trim_end().lines().count(), 1);

    let run_path = dir.path().join("run.json");
    let mut v = serde_json::to_value(tiny_run(2)).unwrap();
    v["train"]["lr_peak"] = serde_json::json!(1.0);
    write_json(&run_path, &v);
    let out = run(&["train", "--config", run_path.to_str().unwrap(), "--out", dir.path().join("t").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("lr_peak"));
}

#[test]
fn usage_errors_are_single_line() {
    let out = run(&["track", "--frames", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[usage]: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
    let out = run(&["track", "--frames", "x", "--queries", "q", "--weights", "w", "--out", "o", "--stride", "5"]);
    assert_eq!(out.status.code(), Some(2));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn training_checkpoints_and_resumes_on_the_same_curve() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    write_json(&config, &tiny_run(6));
    let full = dir.path().join("full");
    cli::cmd_train(Some(&config), None, &full, None).unwrap();
    assert!(full.join("ckpt_000003.pipw").is_file());
    assert!(full.join("ckpt_000003.json").is_file());
    assert!(full.join("weights.pipw").is_file());
    let header = fs::read_to_string(full.join("log.csv")).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "step,loss_main,loss_ce,loss_score,lr");
    let rows = csv_rows(&full.join("log.csv"));
    assert_eq!(rows.len(), 6);

    let resumed = dir.path().join("resumed");
    cli::cmd_train(None, None, &resumed, Some(&full.join("ckpt_000003.pipw"))).unwrap();
    let tail = csv_rows(&resumed.join("log.csv"));
    assert_eq!(tail, rows[3..]);
    assert_eq!(fs::read(resumed.join("weights.pipw")).unwrap(), fs::read(full.join("weights.pipw")).unwrap());
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run(2);
    cfg.train.dataset = Some(dir.path().join("nowhere"));
    let config = dir.path().join("run.json");
    write_json(&config, &cfg);
    let err = cli::cmd_train(Some(&config), None, &dir.path().join("o"), None).unwrap_err();
    assert!(err.message.contains("missing dataset"), "{}", err.message);
}

/// Untrained tiny weights plus a 16-frame sequence on disk.
fn track_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let config = dir.join("run.json");
    write_json(&config, &tiny_run(1));
    let model = dir.join("model");
    cli::cmd_train(Some(&config), None, &model, None).unwrap();
    let scene = dir.join("scene.json");
    write_json(&scene, &tiny_scene(16));
    let ds = dir.join("ds");
    cli::cmd_generate(Some(&scene), 3, &ds, 1).unwrap();
    (model.join("weights.pipw"), ds.join("seq_00000"))
}

fn track(dir: &Path, weights: &Path, frames: &Path, queries: &[[f32; 2]]) -> String {
    let qpath = dir.join("queries.json");
    write_json(&qpath, &queries);
    let out = dir.join("tracks.jsonl");
    let status = run(&[
        "track",
        "--frames",
        frames.to_str().unwrap(),
        "--queries",
        qpath.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--window",
        "8",
    ]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    fs::read_to_string(out).unwrap()
}

#[test]
fn track_output_is_ordered_and_canonical() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, frames) = track_fixture(dir.path());
    let text = track(dir.path(), &weights, &frames, &[[10.0, 12.5], [1000.0, 3.0], [30.25, 20.0]]);
    let records: Vec<TrackRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 16 + 1 + 16);
    let keys: Vec<(usize, usize)> = records
        .iter()
        .filter_map(|r| match r {
            TrackRecord::Point { q, t, .. } => Some((*q, *t)),
            TrackRecord::Failed { .. } => None,
        })
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert!(matches!(&records[16], TrackRecord::Failed { q: 1, error } if error.contains("outside")));
    for (line, rec) in text.lines().zip(&records) {
        assert_eq!(serde_json::to_string(rec).unwrap(), line);
    }
}

#[test]
fn full_window_video_gives_one_record_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, frames16) = track_fixture(dir.path());
    let frames8 = dir.path().join("eight");
    fs::create_dir(&frames8).unwrap();
    for t in 0..8 {
        fs::copy(io::frame_path(&frames16, t), io::frame_path(&frames8, t)).unwrap();
    }
    let text = track(dir.path(), &weights, &frames8, &[[5.0, 5.0]]);
    assert_eq!(text.lines().count(), 8);
    assert!(text.lines().all(|l| l.starts_with("{\"q\":0,")));
}

fn write_tracks(path: &Path, tracks: &[Vec<[f32; 2]>]) {
    let mut text = String::new();
    for (q, tr) in tracks.iter().enumerate() {
        for (t, p) in tr.iter().enumerate() {
            let rec = TrackRecord::Point { q, t, x: p[0], y: p[1], v: 1.0 };
            text += &serde_json::to_string(&rec).unwrap();
            text.push('\n');
        }
    }
    fs::write(path, text).unwrap();
}

#[test]
fn eval_reproduces_the_offset_fixture_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let gt_tracks: Vec<Vec<[f32; 2]>> = (0..3).map(|q| (0..8).map(|t| [t as f32 + q as f32, 2.0 * q as f32]).collect()).collect();
    let gt = io::GroundTruth { trajs: gt_tracks.clone(), vis: vec![vec![1; 8]; 3], area: Some(vec![100.0; 8]) };
    let gt_path = dir.path().join("gt.json");
    write_json(&gt_path, &gt);

    let same = dir.path().join("same.jsonl");
    write_tracks(&same, &gt_tracks);
    let report = cli::cmd_eval(&same, &gt_path, cli::Mode::Ate, None).unwrap();
    assert!(report.starts_with("{\"ate_visible\":0.0,"), "{report}");
    assert!(!report.contains("ate_occluded"));

    let shifted: Vec<Vec<[f32; 2]>> = gt_tracks.iter().map(|t| t.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect()).collect();
    let off = dir.path().join("off.jsonl");
    write_tracks(&off, &shifted);
    let report: serde_json::Value = serde_json::from_str(&cli::cmd_eval(&off, &gt_path, cli::Mode::Ate, None).unwrap()).unwrap();
    assert_eq!(report["ate_visible"], 5.0);

    let pck: serde_json::Value = serde_json::from_str(&cli::cmd_eval(&off, &gt_path, cli::Mode::Pck, None).unwrap()).unwrap();
    let frac = pck["pck"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&frac));

    let partial = dir.path().join("partial.jsonl");
    write_tracks(&partial, &gt_tracks[..2]);
    let err = cli::cmd_eval(&partial, &gt_path, cli::Mode::Ate, None).unwrap_err();
    assert!(err.message.contains("missing from predictions [2]"), "{}", err.message);
}

#[test]
fn eval_draws_an_overlay() {
    let dir = tempfile::tempdir().unwrap();
    cli::cmd_generate(None, 2, dir.path(), 1).unwrap();
    let seq = dir.path().join("seq_00000");
    let gt = io::read_ground_truth(&seq.join("gt.json")).unwrap();
    let pred = dir.path().join("pred.jsonl");
    write_tracks(&pred, &gt.trajs);
    let overlay = dir.path().join("overlay.ppm");
    cli::cmd_eval(&pred, &seq.join("gt.json"), cli::Mode::Ate, Some((&seq, &overlay))).unwrap();
    let (w, h, _) = io::read_ppm(&overlay).unwrap();
    assert_eq!((w, h), (104, 72));
}
