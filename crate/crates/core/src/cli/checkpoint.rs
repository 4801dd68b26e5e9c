//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DPMCKPT\0" | version u32 | entry count u32 | entries | sha256 of everything before
//! entry: name len u32 | name utf8 | tag u8 | ndim u32 | dims u64* | payload
//! ```
//!
//! Payloads are `f64` or `u64` arrays in row-major order, or UTF-8 text.

use std::path::Path;

use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 8] = b"DPMCKPT\0";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    KindMismatch { expected: String, found: String },
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Text(String),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Self::F64(_) => 0,
            Self::U64(_) => 1,
            Self::Text(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Self::F64(v) => v.len(),
            Self::U64(v) => v.len(),
            Self::Text(s) => s.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

/// An ordered collection of named arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, payload: Payload) {
        self.entries.retain(|e| e.name != name);
        self.entries.push(Entry {
            name: name.to_string(),
            shape,
            payload,
        });
    }

    pub fn put_f64(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "shape/length mismatch for {name}");
        self.push(name, shape.to_vec(), Payload::F64(values.to_vec()));
    }

    pub fn put_u64(&mut self, name: &str, values: &[u64]) {
        self.push(name, vec![values.len()], Payload::U64(values.to_vec()));
    }

    pub fn put_text(&mut self, name: &str, text: &str) {
        self.push(name, vec![text.len()], Payload::Text(text.to_string()));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing entry '{name}'")))
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.require(name)? {
            Entry {
                shape,
                payload: Payload::F64(v),
                ..
            } => Ok((shape, v)),
            _ => Err(CheckpointError::Malformed(format!("'{name}' is not an f64 array"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.require(name)?.payload {
            Payload::U64(v) => Ok(v),
            _ => Err(CheckpointError::Malformed(format!("'{name}' is not a u64 array"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.u64s(name)? {
            [v] => Ok(*v),
            _ => Err(CheckpointError::Malformed(format!("'{name}' is not a scalar"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match &self.require(name)?.payload {
            Payload::Text(s) => Ok(s),
            _ => Err(CheckpointError::Malformed(format!("'{name}' is not text"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.payload.tag());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.payload {
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::Text(s) => out.extend_from_slice(s.as_bytes()),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) {
                CheckpointError::Truncated
            } else {
                CheckpointError::BadMagic
            });
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        if bytes.len() < r.pos + 4 + DIGEST_LEN {
            return Err(CheckpointError::Truncated);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let count = r.u32()?;
        let mut container = Container::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("shape of '{name}' overflows")))?;
            let payload = match tag {
                0 => Payload::F64((0..len).map(|_| r.u64().map(f64::from_bits)).collect::<Result<_>>()?),
                1 => Payload::U64((0..len).map(|_| r.u64()).collect::<Result<_>>()?),
                2 => Payload::Text(
                    String::from_utf8(r.take(len)?.to_vec())
                        .map_err(|_| CheckpointError::Malformed(format!("'{name}' is not UTF-8")))?,
                ),
                other => return Err(CheckpointError::Malformed(format!("unknown payload tag {other}"))),
            };
            debug_assert_eq!(payload.len(), len);
            container.push(&name, shape, payload);
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes after the last entry".into()));
        }
        Ok(container)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(tmp, path)
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}


/// A trained model with its process, training position and data scale.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: crate::objective::DiffusionModel,
    pub step: u64,
    pub seed: u64,
    /// Standardization factor of the training data.
    pub factor: Option<f64>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let dm = &self.model;
        let cfg = dm.model.config();
        let mut c = Container::new();
        c.put_text("kind", &dm.kind().to_string());
        c.put_text("model", dm.model.name());
        c.put_u64("dim", &[dm.dim() as u64]);
        c.put_u64("steps", &[dm.steps() as u64]);
        c.put_u64("hidden", &cfg.hidden.iter().map(|&h| h as u64).collect::<Vec<_>>());
        c.put_text("readout", &cfg.readout.to_string());
        let beta = dm.spec.schedule.betas();
        c.put_f64("schedule/beta", &[beta.len()], beta);
        if let Some(l) = dm.spec.schedule.logits() {
            c.put_f64("schedule/logits", &[l.len()], l);
        }
        let params = dm.model.parameters();
        for (i, block) in params.layout().blocks().iter().enumerate() {
            c.put_f64(&format!("param/{}", block.name), &[block.rows, block.cols], params.block_values(i));
        }
        c.put_u64("train/step", &[self.step]);
        c.put_u64("train/seed", &[self.seed]);
        if let Some(f) = self.factor {
            c.put_f64("data/factor", &[1], &[f]);
        }
        c
    }

    pub fn from_container(c: &Container, registry: &crate::approximators::ModelRegistry) -> crate::Result<Self> {
        use crate::approximators::ModelConfig;
        use crate::kernels::{DiffusionSpec, Schedule};

        let malformed = |e: crate::Error| CheckpointError::Malformed(e.to_string());
        let kind: crate::kernels::DiffusionKind = c.text("kind")?.parse().map_err(malformed)?;
        let config = ModelConfig {
            kind,
            dim: c.u64("dim")? as usize,
            steps: c.u64("steps")? as usize,
            hidden: c.u64s("hidden")?.iter().map(|&h| h as usize).collect(),
            readout: c.text("readout")?.parse().map_err(malformed)?,
        };
        let beta = c.f64s("schedule/beta")?.1.to_vec();
        let logits = c.get("schedule/logits").map(|_| c.f64s("schedule/logits")).transpose()?;
        let schedule = Schedule::from_parts(kind, beta, logits.map(|(_, l)| l.to_vec())).map_err(malformed)?;
        let spec = DiffusionSpec::new(schedule, config.dim).map_err(malformed)?;

        let name = c.text("model")?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = registry.build(name, &config, None, &mut rng)?;
        let mut values = Vec::with_capacity(model.n_params());
        for block in model.parameters().layout().blocks() {
            let (shape, v) = c.f64s(&format!("param/{}", block.name))?;
            if shape != [block.rows, block.cols] {
                return Err(CheckpointError::Malformed(format!("block '{}' has shape {shape:?}", block.name)).into());
            }
            values.extend_from_slice(v);
        }
        model.parameters_mut().values_mut().copy_from_slice(&values);
        let factor = c.get("data/factor").map(|_| c.f64s("data/factor")).transpose()?.map(|(_, v)| v[0]);
        Ok(Self {
            model: crate::objective::DiffusionModel::new(spec, model)?,
            step: c.u64("train/step")?,
            seed: c.u64("train/seed")?,
            factor,
        })
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path, registry: &crate::approximators::ModelRegistry) -> crate::Result<Self> {
        Self::from_container(&Container::load(path)?, registry)
    }

    /// Fails with [`CheckpointError::KindMismatch`] unless the model is of `kind`.
    pub fn expect_kind(&self, kind: crate::kernels::DiffusionKind) -> crate::Result<()> {
        if self.model.kind() != kind {
            return Err(CheckpointError::KindMismatch {
                expected: kind.to_string(),
                found: self.model.kind().to_string(),
            }
            .into());
        }
        Ok(())
    }
}
