//! On-disk formats: PPM/PGM images, flow and depth grids, checkpoints.
//!
//! Every multi-byte field is little-endian.

use std::io::{self, Read, Write};

use crate::ad::Tensor;
use crate::flow::{FlowField, MotionMask};
use crate::image::Image;
use crate::optim::AdamSlot;

pub const FLOW_MAGIC: &[u8; 8] = b"PIDGFLO1";
pub const DEPTH_MAGIC: &[u8; 8] = b"PIDGDEP1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PIDGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}")]
    Magic { expected: String },
    #[error("unsupported checkpoint version {0} (this build reads version {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("malformed file: {0}")]
    Malformed(String),
}

fn read_exact<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    Ok(f64::from_le_bytes(read_exact(r)?))
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 8]) -> Result<(), FormatError> {
    let got: [u8; 8] = read_exact(r)?;
    if &got != magic {
        return Err(FormatError::Magic {
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    Ok(())
}

fn dims_u32(w: usize, h: usize) -> Result<(u32, u32), FormatError> {
    let conv = |v: usize| u32::try_from(v).map_err(|_| FormatError::Malformed(format!("dimension {v} too large")));
    Ok((conv(w)?, conv(h)?))
}

// --- Netpbm -----------------------------------------------------------------

fn write_pnm(w: &mut impl Write, kind: &str, width: usize, height: usize, bytes: &[u8]) -> io::Result<()> {
    write!(w, "{kind}\n{width} {height}\n255\n")?;
    w.write_all(bytes)
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn pnm_token(r: &mut impl Read) -> Result<String, FormatError> {
    let mut tok = String::new();
    let mut comment = false;
    loop {
        let [b] = read_exact::<1>(r)?;
        if comment {
            comment = b != b'\n';
            continue;
        }
        match b {
            b'#' if tok.is_empty() => comment = true,
            b' ' | b'\t' | b'\n' | b'\r' => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            _ => tok.push(b as char),
        }
    }
}

fn read_pnm(r: &mut impl Read, kind: &str, channels: usize) -> Result<(usize, usize, Vec<u8>), FormatError> {
    let magic = pnm_token(r)?;
    if magic != kind {
        return Err(FormatError::Magic { expected: kind.into() });
    }
    let mut num = || -> Result<usize, FormatError> {
        let t = pnm_token(r)?;
        t.parse().map_err(|_| FormatError::Malformed(format!("bad header field {t:?}")))
    };
    let (width, height, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(FormatError::Malformed(format!("only 8-bit images are supported (maxval {maxval})")));
    }
    let mut bytes = vec![0u8; width * height * channels];
    r.read_exact(&mut bytes)?;
    Ok((width, height, bytes))
}

/// Binary PPM (P6), 8 bits per channel.
pub fn write_ppm<T: crate::scalar::Real>(w: &mut impl Write, img: &Image<T>) -> io::Result<()> {
    write_pnm(w, "P6", img.width, img.height, &img.to_bytes())
}

pub fn read_ppm(r: &mut impl Read) -> Result<Image<f64>, FormatError> {
    let (w, h, bytes) = read_pnm(r, "P6", 3)?;
    Ok(Image::from_bytes(w, h, &bytes))
}

/// Binary PGM (P5) with masked pixels at 255.
pub fn write_mask(w: &mut impl Write, mask: &MotionMask) -> io::Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_pnm(w, "P5", mask.width, mask.height, &bytes)
}

/// Any non-zero byte counts as masked.
pub fn read_mask(r: &mut impl Read) -> Result<MotionMask, FormatError> {
    let (width, height, bytes) = read_pnm(r, "P5", 1)?;
    Ok(MotionMask {
        width,
        height,
        data: bytes.iter().map(|&b| b != 0).collect(),
    })
}

// --- Flow and depth -----------------------------------------------------------

/// `PIDGFLO1`, u32 width, u32 height, row-major f32 `(du, dv)`, row-major u8 validity.
pub fn write_flow(w: &mut impl Write, flow: &FlowField<f64>) -> Result<(), FormatError> {
    let (fw, fh) = dims_u32(flow.width, flow.height)?;
    let mut buf = Vec::with_capacity(16 + flow.data.len() * 9);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&fw.to_le_bytes());
    buf.extend_from_slice(&fh.to_le_bytes());
    for d in &flow.data {
        buf.extend_from_slice(&(d[0] as f32).to_le_bytes());
        buf.extend_from_slice(&(d[1] as f32).to_le_bytes());
    }
    buf.extend(flow.valid.iter().map(|&v| v as u8));
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_flow(r: &mut impl Read) -> Result<FlowField<f64>, FormatError> {
    expect_magic(r, FLOW_MAGIC)?;
    let (width, height) = (read_u32(r)? as usize, read_u32(r)? as usize);
    let n = width * height;
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| {
            let u = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let v = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            [u as f64, v as f64]
        })
        .collect();
    let mut valid = vec![0u8; n];
    r.read_exact(&mut valid)?;
    Ok(FlowField {
        width,
        height,
        data,
        valid: valid.iter().map(|&b| b != 0).collect(),
    })
}

/// Depth grid with its dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// `PIDGDEP1`, u32 width, u32 height, row-major f64.
pub fn write_depth(w: &mut impl Write, depth: &DepthMap) -> Result<(), FormatError> {
    let (dw, dh) = dims_u32(depth.width, depth.height)?;
    let mut buf = Vec::with_capacity(16 + depth.data.len() * 8);
    buf.extend_from_slice(DEPTH_MAGIC);
    buf.extend_from_slice(&dw.to_le_bytes());
    buf.extend_from_slice(&dh.to_le_bytes());
    for d in &depth.data {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_depth(r: &mut impl Read) -> Result<DepthMap, FormatError> {
    expect_magic(r, DEPTH_MAGIC)?;
    let (width, height) = (read_u32(r)? as usize, read_u32(r)? as usize);
    let data = (0..width * height).map(|_| read_f64(r)).collect::<io::Result<_>>()?;
    Ok(DepthMap { width, height, data })
}

// --- Checkpoints --------------------------------------------------------------

/// Identity and motion class of one particle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParticleRecord {
    pub id: u64,
    pub dynamic: bool,
}

/// Everything needed to resume a run. Tensors are stored as f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Run configuration, verbatim JSON.
    pub config: String,
    pub iteration: u64,
    pub next_id: u64,
    pub particles: Vec<ParticleRecord>,
    pub tensors: Vec<(String, Tensor<f64>)>,
    pub optimizer: Vec<(String, AdamSlot<f64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn slot(&self, name: &str) -> Option<&AdamSlot<f64>> {
        self.optimizer.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn tensor(&mut self, t: &Tensor<f64>) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

const MAX_LEN: u64 = 1 << 40;

fn read_len(r: &mut impl Read) -> Result<usize, FormatError> {
    let n = read_u64(r)?;
    if n > MAX_LEN {
        return Err(FormatError::Malformed(format!("implausible length {n}")));
    }
    Ok(n as usize)
}

fn read_string(r: &mut impl Read) -> Result<String, FormatError> {
    let n = read_len(r)?;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| FormatError::Malformed("section name is not UTF-8".into()))
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor<f64>, FormatError> {
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(FormatError::Malformed(format!("tensor rank {rank}")));
    }
    let shape = (0..rank).map(|_| read_len(r)).collect::<Result<Vec<_>, _>>()?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| read_f64(r)).collect::<io::Result<_>>()?;
    Tensor::new(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))
}

pub fn write_checkpoint(w: &mut impl Write, ck: &Checkpoint) -> Result<(), FormatError> {
    let mut out = Writer(Vec::new());
    out.0.extend_from_slice(CHECKPOINT_MAGIC);
    out.u32(CHECKPOINT_VERSION);
    out.bytes(ck.config.as_bytes());
    out.u64(ck.iteration);
    out.u64(ck.next_id);
    out.u64(ck.particles.len() as u64);
    for p in &ck.particles {
        out.u64(p.id);
        out.0.push(p.dynamic as u8);
    }
    out.u64(ck.tensors.len() as u64);
    for (name, t) in &ck.tensors {
        out.bytes(name.as_bytes());
        out.tensor(t);
    }
    out.u64(ck.optimizer.len() as u64);
    for (name, s) in &ck.optimizer {
        out.bytes(name.as_bytes());
        out.u64(s.step);
        out.tensor(&s.m);
        out.tensor(&s.v);
    }
    w.write_all(&out.0)?;
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint, FormatError> {
    expect_magic(r, CHECKPOINT_MAGIC)?;
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version(version));
    }
    let config = read_string(r)?;
    let iteration = read_u64(r)?;
    let next_id = read_u64(r)?;
    let n = read_len(r)?;
    let mut particles = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let id = read_u64(r)?;
        let [d] = read_exact::<1>(r)?;
        particles.push(ParticleRecord { id, dynamic: d != 0 });
    }
    let n = read_len(r)?;
    let mut tensors = Vec::new();
    for _ in 0..n {
        let name = read_string(r)?;
        tensors.push((name, read_tensor(r)?));
    }
    let n = read_len(r)?;
    let mut optimizer = Vec::new();
    for _ in 0..n {
        let name = read_string(r)?;
        let step = read_u64(r)?;
        let m = read_tensor(r)?;
        let v = read_tensor(r)?;
        optimizer.push((name, AdamSlot { m, v, step }));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(FormatError::Malformed(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint {
        config,
        iteration,
        next_id,
        particles,
        tensors,
        optimizer,
    })
}
