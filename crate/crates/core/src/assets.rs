//! On-disk layout of a generated scene.
//!
//! ```text
//! spec.json  cameras.json
//! frame_000.ppm  depth_000.dep  mask_000.pgm        one per frame
//! flow_b_000.flo  flow_f_000.flo  motion_000.flo    one per frame pair
//! ```
//!
//! `flow_b_f` maps `I_{f+1}` back to `I_f`, `flow_f_f` maps `I_f` forward,
//! and `motion_f` is the analytic object motion on `I_f` used by `eval`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::flow::{FlowField, MotionMask};
use crate::image::Image;
use crate::io::{read_depth, read_flow, read_mask, read_ppm, write_depth, write_flow, write_mask, write_ppm, FormatError};
use crate::render::Camera;
use crate::scenegen::{SceneSpec, SyntheticScene};
use crate::train::TrainData;

#[derive(Debug, thiserror::Error)]
pub enum AssetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("inconsistent scene directory: {0}")]
    Inconsistent(String),
}

/// A scene read back from disk.
#[derive(Clone, Debug)]
pub struct SceneAssets {
    pub spec: SceneSpec,
    pub data: TrainData<f64>,
    pub motion_flow: Vec<FlowField<f64>>,
}

pub fn frame_name(kind: &str, f: usize) -> String {
    let ext = match kind {
        "frame" => "ppm",
        "depth" => "dep",
        "mask" => "pgm",
        _ => "flo",
    };
    format!("{kind}_{f:03}.{ext}")
}

fn create(path: &Path) -> Result<BufWriter<File>, AssetError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| AssetError::Io { path: path.into(), source })
}

fn open(path: &Path) -> Result<BufReader<File>, AssetError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| AssetError::Io { path: path.into(), source })
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), FormatError>) -> Result<(), AssetError> {
    let mut w = create(path)?;
    f(&mut w)
        .and_then(|_| w.flush().map_err(FormatError::from))
        .map_err(|source| AssetError::Format { path: path.into(), source })
}

fn read_file<R>(path: &Path, f: impl FnOnce(&mut BufReader<File>) -> Result<R, FormatError>) -> Result<R, AssetError> {
    f(&mut open(path)?).map_err(|source| AssetError::Format { path: path.into(), source })
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<(), AssetError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| AssetError::Json { path: path.into(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| AssetError::Io { path: path.into(), source })
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D, AssetError> {
    let text = fs::read_to_string(path).map_err(|source| AssetError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| AssetError::Json { path: path.into(), source })
}

pub fn write_scene(scene: &SyntheticScene, dir: &Path) -> Result<(), AssetError> {
    fs::create_dir_all(dir).map_err(|source| AssetError::Io { path: dir.into(), source })?;
    write_json(&dir.join("spec.json"), &scene.spec)?;
    write_json(&dir.join("cameras.json"), &scene.cameras)?;
    for f in 0..scene.frames() {
        write_file(&dir.join(frame_name("frame", f)), |w| Ok(write_ppm(w, &scene.images[f])?))?;
        write_file(&dir.join(frame_name("depth", f)), |w| write_depth(w, &scene.depths[f]))?;
        write_file(&dir.join(frame_name("mask", f)), |w| Ok(write_mask(w, &scene.masks[f])?))?;
    }
    for f in 0..scene.frames() - 1 {
        write_file(&dir.join(frame_name("flow_b", f)), |w| write_flow(w, &scene.flow_b[f]))?;
        write_file(&dir.join(frame_name("flow_f", f)), |w| write_flow(w, &scene.flow_f[f]))?;
        write_file(&dir.join(frame_name("motion", f)), |w| write_flow(w, &scene.motion_flow[f]))?;
    }
    Ok(())
}

pub fn read_scene(dir: &Path) -> Result<SceneAssets, AssetError> {
    let spec: SceneSpec = read_json(&dir.join("spec.json"))?;
    let cameras: Vec<Camera<f64>> = read_json(&dir.join("cameras.json"))?;
    let n = spec.frames;
    if cameras.len() != n {
        return Err(AssetError::Inconsistent(format!("{} cameras for {n} frames", cameras.len())));
    }
    let mut images: Vec<Image<f64>> = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    let mut masks: Vec<MotionMask> = Vec::with_capacity(n);
    for f in 0..n {
        images.push(read_file(&dir.join(frame_name("frame", f)), read_ppm)?);
        depths.push(read_file(&dir.join(frame_name("depth", f)), read_depth)?.data);
        masks.push(read_file(&dir.join(frame_name("mask", f)), read_mask)?);
    }
    let pairs = |kind: &str| -> Result<Vec<FlowField<f64>>, AssetError> {
        (0..n - 1).map(|f| read_file(&dir.join(frame_name(kind, f)), read_flow)).collect()
    };
    let (flow_b, flow_f, motion_flow) = (pairs("flow_b")?, pairs("flow_f")?, pairs("motion")?);
    let data = TrainData {
        images,
        cameras,
        depths,
        times: (0..n).map(|f| spec.time(f)).collect(),
        flow_b,
        flow_f,
        masks,
    };
    data.validate().map_err(|e| AssetError::Inconsistent(e.to_string()))?;
    Ok(SceneAssets { spec, data, motion_flow })
}
