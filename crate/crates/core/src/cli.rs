//! `piptrack` subcommands.
//!
//! Failures print one line, `error[<kind>]: <message>`, and exit nonzero.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{io, DataError, SpriteSceneConfig};
use crate::eval::{self, EvalReport};
use crate::model::{encode_all, link_trajectories, FeatureWindows};
use crate::train::{self, derive_seed, RenderedScenes, SequenceSource, StoredScenes, TrainConfig, TrainError, Trainer};
use crate::{ModelConfig, Tensor, TensorError, Tracker};

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    /// `error[kind]: message` on a single line.
    pub fn line(&self) -> String {
        format!("error[{}]: {}", self.kind, self.message.replace('\n', " "))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let kind = match e {
            DataError::Config(_) => "config",
            DataError::Io(_) => "io",
            DataError::Json(_) => "format",
            _ => "data",
        };
        Self::new(kind, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => d.into(),
            TrainError::Config(_) => Self::new("config", e.to_string()),
            TrainError::Io(_) => Self::new("io", e.to_string()),
            TrainError::Json(_) => Self::new("config", e.to_string()),
            _ => Self::new("train", e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        Self::new("model", e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "piptrack", version, about = "Multi-frame point tracking through occlusions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render synthetic sequences to a dataset directory.
    Generate {
        /// Scene config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Train a model; writes checkpoints and `log.csv` into `--out`.
    Train {
        /// Run config JSON with `model` and `train` sections.
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint weights (`.pipw`) to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Track query points through a frame directory; writes JSON lines.
    Track {
        #[arg(long)]
        frames: PathBuf,
        /// JSON array of `[x, y]` frame-0 positions.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["4", "8"])]
        stride: Option<String>,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Score tracked output against ground truth.
    Eval {
        /// Output of `track`.
        #[arg(long)]
        pred: PathBuf,
        /// `gt.json`-style file; PCK needs its `area` list.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Ate)]
        mode: Mode,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Frame directory for the overlay image.
        #[arg(long, requires = "overlay")]
        frames: Option<PathBuf>,
        /// PPM path for predicted tracks drawn over the mean frame.
        #[arg(long, requires = "frames")]
        overlay: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Ate,
    Pck,
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> std::result::Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| {
        use clap::error::ErrorKind;
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => CliError::new("help", e.to_string()),
            _ => {
                let text = e.to_string();
                let first = text.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
                CliError::new("usage", first)
            }
        }
    })?;
    match cli.command {
        Command::Generate { config, seed, out, count } => cmd_generate(config.as_deref(), seed, &out, count),
        Command::Train { config, seed, out, resume } => cmd_train(config.as_deref(), seed, &out, resume.as_deref()),
        Command::Track { frames, queries, weights, out, stride, window } => {
            let stride = stride.map(|s| s.parse().expect("validated by clap"));
            cmd_track(&TrackRequest { frames, queries, weights, out, stride, window })
        }
        Command::Eval { pred, gt, mode, out, frames, overlay } => {
            let report = cmd_eval(&pred, &gt, mode, frames.as_deref().zip(overlay.as_deref()))?;
            match out {
                Some(path) => fs::write(path, report + "\n")?,
                None => println!("{report}"),
            }
            Ok(())
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| CliError::new("io", format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::new("config", format!("{what} {}: {e}", path.display())))
}

/// Renders `count` sequences (each with the config's occluders pasted on)
/// plus a manifest.
pub fn cmd_generate(config: Option<&Path>, seed: u64, out: &Path, count: usize) -> Result<()> {
    let scene: SpriteSceneConfig = match config {
        Some(p) => read_json(p, "scene config")?,
        None => SpriteSceneConfig::default(),
    };
    scene.validate()?;
    fs::create_dir_all(out).map_err(|e| CliError::new("io", format!("cannot create {}: {e}", out.display())))?;
    let source = RenderedScenes { scene: scene.clone(), seed };
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let s = train::compose_sequence(&source, scene.occluders, derive_seed(seed, &[i as u64]))?;
        let name = io::sequence_name(i);
        io::save_sample(&out.join(&name), &s)?;
        names.push(name);
    }
    io::write_manifest(out, &io::Manifest { count, seed, scene, sequences: names })?;
    Ok(())
}

/// `--config` file for `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn cmd_train(config: Option<&Path>, seed: Option<u64>, out: &Path, resume: Option<&Path>) -> Result<()> {
    let mut trainer = match resume {
        Some(ckpt) => train::resume(ckpt)?,
        None => {
            let path = config.ok_or_else(|| CliError::new("usage", "train needs --config or --resume"))?;
            let mut run: RunConfig = read_json(path, "run config")?;
            if let Some(s) = seed {
                run.train.seed = s;
            }
            run.model.validate().map_err(|e| CliError::new("config", e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.train.seed, &[u64::MAX]));
            let tracker = Tracker::new(run.model, &mut rng).map_err(|e| CliError::new("config", e.to_string()))?;
            Trainer::new(tracker, run.train)?
        }
    };
    let source: Arc<dyn SequenceSource> = match &trainer.config.dataset {
        Some(dir) => {
            if !dir.join("manifest.json").is_file() {
                return Err(CliError::new("data", format!("missing dataset: no manifest.json in {}", dir.display())));
            }
            Arc::new(StoredScenes::load(dir)?)
        }
        None => Arc::new(RenderedScenes { scene: trainer.config.scene.clone(), seed: trainer.config.seed }),
    };
    fs::create_dir_all(out)?;
    let log_path = out.join("log.csv");
    let fresh = !log_path.exists() || fs::metadata(&log_path)?.len() == 0;
    let mut log = BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(&log_path)?);
    if fresh {
        writeln!(log, "{}", train::StepLog::CSV_HEADER)?;
    }
    trainer.run(source, &mut log, Some(out))?;
    log.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackRequest {
    pub frames: PathBuf,
    pub queries: PathBuf,
    pub weights: PathBuf,
    pub out: PathBuf,
    pub stride: Option<usize>,
    pub window: Option<usize>,
}

/// One line of `track` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrackRecord {
    Point { q: usize, t: usize, x: f32, y: f32, v: f32 },
    Failed { q: usize, error: String },
}

pub fn cmd_track(req: &TrackRequest) -> Result<()> {
    let mut tracker = train::load_tracker(&req.weights)?;
    if let Some(w) = req.window {
        if w != tracker.config.window {
            return Err(CliError::new(
                "config",
                format!("--window {w} differs from the model's window of {}", tracker.config.window),
            ));
        }
    }
    if let Some(s) = req.stride {
        tracker.config.stride = s;
        tracker.config.validate().map_err(|e| CliError::new("config", e.to_string()))?;
    }
    let queries: Vec<[f32; 2]> = read_json(&req.queries, "query file")?;
    let (len, h, w, frames) = io::load_frames(&req.frames)?;
    let frames = Tensor::new(&[len, 3, h, w], frames)?;
    let feats = encode_all(&tracker, &frames)?;
    let mut out = BufWriter::new(fs::File::create(&req.out)?);
    for (q, &query) in queries.iter().enumerate() {
        let linked = FeatureWindows::from_features(&tracker, feats.clone(), query)
            .and_then(|fw| link_trajectories(&fw, len, query));
        match linked {
            Ok(track) => {
                for (t, (p, &v)) in track.positions.iter().zip(&track.visibility).enumerate() {
                    let rec = TrackRecord::Point { q, t, x: p[0], y: p[1], v };
                    writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
                }
            }
            Err(TensorError::Invalid { op: "init_target", msg }) => {
                let rec = TrackRecord::Failed { q, error: msg };
                writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
            }
            Err(e) => return Err(e.into()),
        }
    }
    out.flush()?;
    Ok(())
}

/// Parses `track` output into per-query tracks ordered by `t`.
pub fn read_tracks(path: &Path) -> Result<BTreeMap<usize, Vec<[f32; 2]>>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::new("io", format!("cannot read {}: {e}", path.display())))?;
    let mut tracks: BTreeMap<usize, Vec<(usize, [f32; 2])>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: TrackRecord = serde_json::from_str(line)
            .map_err(|e| CliError::new("format", format!("{} line {}: {e}", path.display(), i + 1)))?;
        if let TrackRecord::Point { q, t, x, y, .. } = rec {
            tracks.entry(q).or_default().push((t, [x, y]));
        }
    }
    Ok(tracks
        .into_iter()
        .map(|(q, mut pts)| {
            pts.sort_by_key(|&(t, _)| t);
            (q, pts.into_iter().map(|(_, p)| p).collect())
        })
        .collect())
}

#[derive(Serialize)]
struct PckReport {
    pck: Option<f64>,
    num_trajectories: usize,
}

/// Returns the report as a JSON string. `overlay = (frames dir, ppm path)`.
pub fn cmd_eval(pred: &Path, gt: &Path, mode: Mode, overlay: Option<(&Path, &Path)>) -> Result<String> {
    let tracks = read_tracks(pred)?;
    let truth = io::read_ground_truth(gt)?;
    let missing_pred: Vec<usize> = (0..truth.trajs.len()).filter(|q| !tracks.contains_key(q)).collect();
    let unknown: Vec<usize> = tracks.keys().copied().filter(|&q| q >= truth.trajs.len()).collect();
    if !missing_pred.is_empty() || !unknown.is_empty() {
        return Err(CliError::new(
            "eval",
            format!("id mismatch: missing from predictions {missing_pred:?}, missing from ground truth {unknown:?}"),
        ));
    }
    let pred: Vec<Vec<[f32; 2]>> = tracks.into_values().collect();
    let err = |e: eval::EvalError| CliError::new("eval", e.0);
    let report = match mode {
        Mode::Ate => {
            let r: EvalReport = eval::eval_ate(&pred, &truth.trajs, &truth.vis).map_err(err)?;
            serde_json::to_string(&r).expect("report serializes")
        }
        Mode::Pck => {
            let area = truth.area.as_ref().ok_or_else(|| CliError::new("eval", "pck mode needs an `area` list in the ground truth"))?;
            let pck = eval::eval_pck(&pred, &truth.trajs, &truth.vis, area).map_err(err)?;
            serde_json::to_string(&PckReport { pck, num_trajectories: pred.len() }).expect("report serializes")
        }
    };
    if let Some((frames, path)) = overlay {
        draw_overlay(frames, &pred, path)?;
    }
    Ok(report)
}

/// Draws each track as a coloured polyline over the per-pixel mean frame.
fn draw_overlay(frames: &Path, tracks: &[Vec<[f32; 2]>], path: &Path) -> Result<()> {
    let (len, h, w, data) = io::load_frames(frames)?;
    let px = h * w;
    let mut mean = vec![0.0f32; 3 * px];
    for t in 0..len {
        for (m, v) in mean.iter_mut().zip(&data[t * 3 * px..(t + 1) * 3 * px]) {
            *m += v / len as f32;
        }
    }
    let mut rgb: Vec<u8> = (0..px).flat_map(|i| (0..3).map(move |c| (c, i))).map(|(c, i)| (mean[c * px + i] * 255.0).round() as u8).collect();
    let mut plot = |x: f32, y: f32, color: [u8; 3]| {
        let (xi, yi) = (x.round(), y.round());
        if xi >= 0.0 && yi >= 0.0 && (xi as usize) < w && (yi as usize) < h {
            let i = (yi as usize * w + xi as usize) * 3;
            rgb[i..i + 3].copy_from_slice(&color);
        }
    };
    for (k, track) in tracks.iter().enumerate() {
        let color = hue(k as f32 * 0.618_034);
        for seg in track.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let steps = (b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let f = s as f32 / steps as f32;
                plot(a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f, color);
            }
        }
        if let Some(&start) = track.first() {
            for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
                plot(start[0] + dx, start[1] + dy, [255, 255, 255]);
            }
        }
    }
    io::write_ppm(path, w, h, &rgb)?;
    Ok(())
}

fn hue(h: f32) -> [u8; 3] {
    let h = h.fract() * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}
