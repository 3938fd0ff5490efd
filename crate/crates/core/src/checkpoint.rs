//! Binary model checkpoints.
//!
//! Little-endian layout: magic `NSMP`, `u32` format version, family tag,
//! background rate and bounds, the family payload (for spectral models the
//! network spec, the flat parameter vector and the raw spectrum), then an
//! optional Adam state. A JSON sidecar mirrors the header for inspection.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::kernel::{BasisKernel, BasisMatrix, CosineBasis, ExpHawkesKernel, IntensityBounds, KernelFamily, KernelModel};
use crate::kernel::SpectralKernel;
use crate::net::{NetSpec, ParamVector};
use crate::optim::{Adam, AdamConfig};

pub const MAGIC: &[u8; 4] = b"NSMP";
pub const FORMAT_VERSION: u32 = 1;

const TAG_SPECTRAL: u8 = 0;
const TAG_EXPONENTIAL: u8 = 1;
const TAG_BASIS: u8 = 2;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported by this build (version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match the requested model: expected {expected}, found {found}")]
    SpecMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: KernelModel,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn new(model: KernelModel) -> Self {
        Self { model, optimizer: None }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Enc(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        let m = &self.model;
        w.u8(match m.family() {
            KernelFamily::Spectral(_) => TAG_SPECTRAL,
            KernelFamily::Exponential(_) => TAG_EXPONENTIAL,
            KernelFamily::Basis(_) => TAG_BASIS,
        });
        w.f64(m.mu());
        w.u8(m.mu_trainable() as u8);
        match m.bounds() {
            Some(b) => {
                w.u8(1);
                w.f64(b.c1);
                w.f64(b.c2);
            }
            None => w.u8(0),
        }
        match m.family() {
            KernelFamily::Spectral(k) => {
                let s = k.spec();
                w.len(s.input_dim);
                w.lens(&s.trunk);
                w.len(s.branch_count);
                w.lens(&s.branch_hidden);
                w.f64(s.output_scale);
                w.f64s(&s.input_offset);
                w.f64s(&s.input_scale);
                w.f64s(k.net_params().as_slice());
                w.f64s(k.spectrum_raw());
            }
            KernelFamily::Exponential(k) => {
                w.f64(k.alpha);
                w.f64(k.beta);
            }
            KernelFamily::Basis(k) => {
                w.f64s(k.basis().lo());
                w.f64s(k.basis().extent());
                w.len(k.size());
                match k.matrix() {
                    BasisMatrix::Dense(a) => {
                        w.u8(0);
                        w.f64s(a);
                    }
                    BasisMatrix::Factored { psi, nu, phi } => {
                        w.u8(1);
                        w.f64s(psi);
                        w.f64s(nu);
                        w.f64s(phi);
                    }
                }
            }
        }
        match &self.optimizer {
            Some(a) => {
                w.u8(1);
                for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                    w.f64(v);
                }
                w.0.extend_from_slice(&a.t.to_le_bytes());
                w.f64s(&a.m);
                w.f64s(&a.v);
            }
            None => w.u8(0),
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Dec { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
        }
        let tag = r.u8()?;
        let mu = r.f64()?;
        let mu_trainable = r.flag()?;
        let bounds = if r.flag()? { Some(IntensityBounds { c1: r.f64()?, c2: r.f64()? }) } else { None };
        let bad = |e: crate::kernel::KernelError| CheckpointError::Corrupt(e.to_string());
        let model = match tag {
            TAG_SPECTRAL => {
                let spec = NetSpec {
                    input_dim: r.len()?,
                    trunk: r.lens()?,
                    branch_count: r.len()?,
                    branch_hidden: r.lens()?,
                    output_scale: r.f64()?,
                    input_offset: r.f64s()?,
                    input_scale: r.f64s()?,
                };
                let params = ParamVector(r.f64s()?);
                let raw = r.f64s()?;
                KernelModel::spectral(SpectralKernel::new(spec, params, raw).map_err(bad)?)
            }
            TAG_EXPONENTIAL => {
                let (alpha, beta) = (r.f64()?, r.f64()?);
                KernelModel::new(KernelFamily::Exponential(ExpHawkesKernel::new(alpha, beta).map_err(bad)?))
            }
            TAG_BASIS => {
                let lo = r.f64s()?;
                let extent = r.f64s()?;
                let size = r.len()?;
                if size == 0 || lo.is_empty() || lo.len() != extent.len() || extent.iter().any(|e| e.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)) {
                    return Err(CheckpointError::Corrupt("invalid basis ranges".into()));
                }
                let basis = CosineBasis::from_ranges(lo, extent, size);
                let k = match r.u8()? {
                    0 => BasisKernel::dense(basis, r.f64s()?),
                    1 => BasisKernel::factored(basis, r.f64s()?, r.f64s()?, r.f64s()?),
                    t => return Err(CheckpointError::Corrupt(format!("unknown basis matrix tag {t}"))),
                }
                .map_err(bad)?;
                KernelModel::basis(k)
            }
            t => return Err(CheckpointError::Corrupt(format!("unknown family tag {t}"))),
        };
        let model = model
            .with_mu(mu)
            .and_then(|m| m.with_trainable_mu(mu_trainable))
            .and_then(|m| m.with_bounds(bounds))
            .map_err(bad)?;
        let optimizer = if r.flag()? {
            let config = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
            let t = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
            let (m, v) = (r.f64s()?, r.f64s()?);
            if m.len() != model.param_count() || v.len() != m.len() {
                return Err(CheckpointError::Corrupt("optimizer state length does not match the model".into()));
            }
            Some(Adam { config, m, v, t })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { model, optimizer })
    }

    /// Writes the binary file and `<path>.json` next to it.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        fs::write(path, self.to_bytes()).map_err(io)?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&Sidecar::of(self)).expect("sidecar serializes");
        fs::write(&side, json + "\n").map_err(|source| CheckpointError::Io { path: side, source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the stored model has the same family and shape as `expected`.
    pub fn load_matching(path: &Path, expected: &KernelModel) -> Result<Self, CheckpointError> {
        let c = Self::load(path)?;
        let (want, got) = (shape(expected), shape(&c.model));
        if want != got {
            return Err(CheckpointError::SpecMismatch { expected: want, found: got });
        }
        Ok(c)
    }
}

pub fn save_checkpoint(model: &KernelModel, path: &Path) -> Result<(), CheckpointError> {
    Checkpoint::new(model.clone()).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<KernelModel, CheckpointError> {
    Checkpoint::load(path).map(|c| c.model)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// A one-line description of the model's family and parameter shape.
pub fn shape(m: &KernelModel) -> String {
    match m.family() {
        KernelFamily::Spectral(k) => {
            let s = k.spec();
            format!(
                "spectral(rank {}, input {}, trunk {:?}, heads {:?}, s {})",
                k.rank(),
                s.input_dim,
                s.trunk,
                s.branch_hidden,
                s.output_scale
            )
        }
        KernelFamily::Exponential(_) => "exponential".to_string(),
        KernelFamily::Basis(k) => format!("basis(size {}, axes {})", k.size(), k.basis().lo().len()),
    }
}

#[derive(Serialize)]
struct Sidecar {
    format_version: u32,
    family: &'static str,
    shape: String,
    param_count: usize,
    mu: f64,
    mu_trainable: bool,
    bounds: Option<IntensityBounds>,
    #[serde(skip_serializing_if = "Option::is_none")]
    net_spec: Option<NetSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spectrum: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    optimizer_steps: Option<u64>,
}

impl Sidecar {
    fn of(c: &Checkpoint) -> Self {
        let m = &c.model;
        let (net_spec, alpha, beta) = match m.family() {
            KernelFamily::Spectral(k) => (Some(k.spec().clone()), None, None),
            KernelFamily::Exponential(k) => (None, Some(k.alpha), Some(k.beta)),
            KernelFamily::Basis(_) => (None, None, None),
        };
        Self {
            format_version: FORMAT_VERSION,
            family: m.family().name(),
            shape: shape(m),
            param_count: m.param_count(),
            mu: m.mu(),
            mu_trainable: m.mu_trainable(),
            bounds: m.bounds(),
            net_spec,
            spectrum: m.spectrum(),
            alpha,
            beta,
            optimizer_steps: c.optimizer.as_ref().map(|a| a.t),
        }
    }
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("length fits in u32"));
    }
    fn lens(&mut self, v: &[usize]) {
        self.len(v.len());
        v.iter().for_each(|&x| self.len(x));
    }
    fn f64s(&mut self, v: &[f64]) {
        self.0.extend_from_slice(&(v.len() as u64).to_le_bytes());
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn flag(&mut self) -> Result<bool, CheckpointError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(CheckpointError::Corrupt(format!("bad flag byte {v}"))),
        }
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize, CheckpointError> {
        Ok(self.u32()? as usize)
    }
    fn lens(&mut self) -> Result<Vec<usize>, CheckpointError> {
        let n = self.len()?;
        (0..n).map(|_| self.len()).collect()
    }
    fn f64s(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(CheckpointError::Corrupt(format!("array of {n} values overruns the file")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}
