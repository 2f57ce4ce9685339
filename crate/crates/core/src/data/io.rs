//! On-disk formats: binary PPM/PGM images, Middlebury `.flo` flow, and the
//! per-sequence `gt.json`.
//!
//! A sequence directory holds `frame_%03d.ppm`, `flow_fwd_%03d.flo`,
//! `flow_bwd_%03d.flo`, `masks_%03d.pgm` and `gt.json`. A dataset directory
//! holds `manifest.json` and one `seq_%05d` directory per sequence.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Result, SyntheticSample, SpriteSceneConfig};

pub const FLO_MAGIC: f32 = 202021.25;

fn format_err(what: &Path, msg: impl Into<String>) -> DataError {
    DataError::Format { what: what.display().to_string(), msg: msg.into() }
}

/// Splits a netpbm header into `count` integer fields, skipping comments,
/// and returns them with the offset of the first payload byte.
fn netpbm_header(bytes: &[u8], magic: &[u8], count: usize, path: &Path) -> Result<(Vec<usize>, usize)> {
    if !bytes.starts_with(magic) {
        return Err(format_err(path, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = magic.len();
    let mut fields = Vec::new();
    while fields.len() < count {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        fields.push(text.parse().map_err(|_| format_err(path, "truncated header"))?);
    }
    // exactly one whitespace byte separates the header from the payload
    Ok((fields, pos + 1))
}

/// Writes interleaved 8-bit RGB.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)?;
    w.flush()?;
    Ok(())
}

/// Returns `(width, height, interleaved rgb)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let (f, start) = netpbm_header(&bytes, b"P6", 3, path)?;
    let (w, h, max) = (f[0], f[1], f[2]);
    if max != 255 {
        return Err(format_err(path, format!("only 8-bit images are supported, maxval {max}")));
    }
    let payload = bytes.get(start..start + w * h * 3).ok_or_else(|| format_err(path, "truncated pixel data"))?;
    Ok((w, h, payload.to_vec()))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(gray)?;
    w.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let (f, start) = netpbm_header(&bytes, b"P5", 3, path)?;
    let (w, h, max) = (f[0], f[1], f[2]);
    if max != 255 {
        return Err(format_err(path, format!("only 8-bit images are supported, maxval {max}")));
    }
    let payload = bytes.get(start..start + w * h).ok_or_else(|| format_err(path, "truncated pixel data"))?;
    Ok((w, h, payload.to_vec()))
}

/// Writes planar `[2, H, W]` flow as interleaved `.flo`.
pub fn write_flo(path: &Path, width: usize, height: usize, planar: &[f32]) -> Result<()> {
    let px = width * height;
    let mut buf = Vec::with_capacity(12 + px * 8);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(width as i32).to_le_bytes());
    buf.extend_from_slice(&(height as i32).to_le_bytes());
    for i in 0..px {
        buf.extend_from_slice(&planar[i].to_le_bytes());
        buf.extend_from_slice(&planar[px + i].to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Returns `(width, height, planar [2, H, W])`.
pub fn read_flo(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(format_err(path, "truncated header"));
    }
    let word = |i: usize| <[u8; 4]>::try_from(&bytes[4 * i..4 * i + 4]).expect("4 bytes");
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let (w, h) = (i32::from_le_bytes(word(1)), i32::from_le_bytes(word(2)));
    if w <= 0 || h <= 0 {
        return Err(format_err(path, format!("bad size {w}x{h}")));
    }
    let px = (w * h) as usize;
    if bytes.len() != 12 + px * 8 {
        return Err(format_err(path, "payload size does not match the header"));
    }
    let mut planar = vec![0.0; 2 * px];
    for i in 0..px {
        planar[i] = f32::from_le_bytes(word(3 + 2 * i));
        planar[px + i] = f32::from_le_bytes(word(4 + 2 * i));
    }
    Ok((w as usize, h as usize, planar))
}

/// Ground-truth trajectories: `trajs` is `N x T x [x, y]`, `vis` is `N x T`.
/// `area`, when present, gives the target area per frame for PCK.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub trajs: Vec<Vec<[f32; 2]>>,
    pub vis: Vec<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<Vec<f64>>,
}

impl GroundTruth {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.trajs.len() != self.vis.len() {
            return Err(format!("{} trajectories but {} visibility rows", self.trajs.len(), self.vis.len()));
        }
        let t = self.trajs.first().map_or(0, Vec::len);
        for (n, (p, v)) in self.trajs.iter().zip(&self.vis).enumerate() {
            if p.len() != t || v.len() != t {
                return Err(format!("trajectory {n} has {} positions and {} labels, expected {t}", p.len(), v.len()));
            }
            if v.iter().any(|&x| x > 1) {
                return Err(format!("trajectory {n} has a visibility label other than 0 or 1"));
            }
        }
        Ok(())
    }
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let gt: GroundTruth = serde_json::from_slice(&fs::read(path)?)?;
    gt.validate().map_err(|m| format_err(path, m))?;
    Ok(gt)
}

pub fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:03}.ppm"))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes one sequence directory. Instance ids above 255 are rejected.
pub fn save_sample(dir: &Path, s: &SyntheticSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = (s.height, s.width);
    let px = h * w;
    for t in 0..s.len {
        let mut rgb = Vec::with_capacity(px * 3);
        for i in 0..px {
            for c in 0..3 {
                rgb.push(to_u8(s.frames[(t * 3 + c) * px + i]));
            }
        }
        write_ppm(&frame_path(dir, t), w, h, &rgb)?;
        let ids = &s.instance_ids[t * px..(t + 1) * px];
        let mask: Vec<u8> = ids
            .iter()
            .map(|&id| u8::try_from(id).map_err(|_| DataError::Invalid(format!("instance id {id} does not fit a PGM mask"))))
            .collect::<Result<_>>()?;
        write_pgm(&dir.join(format!("masks_{t:03}.pgm")), w, h, &mask)?;
    }
    for t in 0..s.len - 1 {
        write_flo(&dir.join(format!("flow_fwd_{t:03}.flo")), w, h, &s.fwd_flow[t * 2 * px..(t + 1) * 2 * px])?;
        write_flo(&dir.join(format!("flow_bwd_{t:03}.flo")), w, h, &s.bwd_flow[t * 2 * px..(t + 1) * 2 * px])?;
    }
    let gt = GroundTruth { trajs: s.trajs.clone(), vis: s.vis.clone(), area: None };
    fs::write(dir.join("gt.json"), serde_json::to_vec(&gt)?)?;
    Ok(())
}

/// Counts `frame_000.ppm, frame_001.ppm, ...` and rejects gaps.
pub fn count_frames(dir: &Path) -> Result<usize> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(idx) = name.strip_prefix("frame_").and_then(|r| r.strip_suffix(".ppm")) {
            let i: usize = idx.parse().map_err(|_| format_err(dir, format!("bad frame name {name}")))?;
            indices.push(i);
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(format_err(dir, "no frame_*.ppm files"));
    }
    if let Some((pos, _)) = indices.iter().enumerate().find(|(pos, &i)| *pos != i) {
        return Err(format_err(dir, format!("frame sequence has a gap at index {pos}")));
    }
    Ok(indices.len())
}

/// Reads a frame directory into `(len, height, width, frames [T, 3, H, W])`.
pub fn load_frames(dir: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let n = count_frames(dir)?;
    let mut dims = None;
    let mut frames = Vec::new();
    for t in 0..n {
        let path = frame_path(dir, t);
        let (w, h, rgb) = read_ppm(&path)?;
        if *dims.get_or_insert((w, h)) != (w, h) {
            return Err(format_err(&path, format!("size {w}x{h} differs from the first frame")));
        }
        let px = w * h;
        let base = frames.len();
        frames.resize(base + 3 * px, 0.0);
        for i in 0..px {
            for c in 0..3 {
                frames[base + c * px + i] = rgb[i * 3 + c] as f32 / 255.0;
            }
        }
    }
    let (w, h) = dims.expect("at least one frame");
    Ok((n, h, w, frames))
}

/// Inverse of [`save_sample`].
pub fn load_sample(dir: &Path) -> Result<SyntheticSample> {
    let (n, h, w, frames) = load_frames(dir)?;
    let mut s = SyntheticSample::empty(n, h, w);
    s.frames = frames;
    let px = h * w;
    for t in 0..n {
        let path = dir.join(format!("masks_{t:03}.pgm"));
        let (mw, mh, mask) = read_pgm(&path)?;
        if (mw, mh) != (w, h) {
            return Err(format_err(&path, "mask size differs from the frames"));
        }
        for (d, &m) in s.instance_ids[t * px..(t + 1) * px].iter_mut().zip(&mask) {
            *d = m as u32;
        }
    }
    for t in 0..n - 1 {
        for (name, field) in [("fwd", &mut s.fwd_flow), ("bwd", &mut s.bwd_flow)] {
            let path = dir.join(format!("flow_{name}_{t:03}.flo"));
            let (fw, fh, planar) = read_flo(&path)?;
            if (fw, fh) != (w, h) {
                return Err(format_err(&path, "flow size differs from the frames"));
            }
            field[t * 2 * px..(t + 1) * 2 * px].copy_from_slice(&planar);
        }
    }
    let gt = read_ground_truth(&dir.join("gt.json"))?;
    if gt.trajs.first().is_some_and(|p| p.len() != n) {
        return Err(format_err(dir, "gt.json trajectories do not span every frame"));
    }
    s.trajs = gt.trajs;
    s.vis = gt.vis;
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub count: usize,
    pub seed: u64,
    pub scene: SpriteSceneConfig,
    pub sequences: Vec<String>,
}

pub fn sequence_name(i: usize) -> String {
    format!("seq_{i:05}")
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(m)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| format_err(&path, format!("cannot read dataset manifest: {e}")))?;
    Ok(serde_json::from_slice(&bytes)?)
}
