//! Binary checkpoints.
//!
//! ```text
//! "TFN1" | u32 version | u64 epoch | u64 len | config text (UTF-8)
//! u32 n_records | n × ( u32 len | name | u32 ndim | ndim × u64 | f64 × numel )
//! ```
//!
//! All integers and floats are little-endian. Records hold the trainable
//! parameters followed by the batch-norm running statistics, in the model's
//! declared order. Round trips are bitwise exact.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Result, TfnError};
use crate::layers::Mode;
use crate::model::{build_model, TfnModel};

pub const MAGIC: &[u8; 4] = b"TFN1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    /// The run configuration in `key = value` form.
    pub config_text: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn from_model(model: &TfnModel, config_text: &str, epoch: u64) -> Self {
        let records = model
            .named_params()
            .into_iter()
            .chain(model.named_buffers())
            .map(|(name, t)| Record {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Self {
            epoch,
            config_text: config_text.to_string(),
            records,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(TfnError::Load("bad magic: not a TFN1 checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TfnError::Load(format!("unsupported checkpoint version {version}")));
        }
        let epoch = r.u64()?;
        let n = r.len()?;
        let config_text = r.string(n)?;
        let n_records = r.u32()? as usize;
        let mut records = Vec::new();
        for _ in 0..n_records {
            let n = r.u32()? as usize;
            let name = r.string(n)?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| TfnError::Load(format!("record `{name}` overruns the file")))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            records.push(Record { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(TfnError::Load(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            epoch,
            config_text,
            records,
        })
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_text)
            .map_err(|e| TfnError::Load(format!("checkpoint config: {e}")))
    }

    /// Copies every record into `model`, checking names and shapes.
    pub fn apply_to(&self, model: &mut TfnModel) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .chain(model.named_buffers())
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if names.len() != self.records.len() {
            return Err(TfnError::Load(format!(
                "checkpoint has {} arrays, model expects {}",
                self.records.len(),
                names.len()
            )));
        }
        for ((name, shape), rec) in names.iter().zip(&self.records) {
            if *name != rec.name || *shape != rec.shape {
                return Err(TfnError::Load(format!(
                    "checkpoint array `{}` {:?} does not match model array `{name}` {shape:?}",
                    rec.name, rec.shape
                )));
            }
        }
        let (params, buffers) = self.records.split_at(model.named_params().len());
        for (t, rec) in model.params_mut().into_iter().zip(params) {
            t.data_mut().copy_from_slice(&rec.data);
        }
        for (t, rec) in model.buffers_mut().into_iter().zip(buffers) {
            t.data_mut().copy_from_slice(&rec.data);
        }
        Ok(())
    }

    /// Rebuilds the model described by the embedded config, in inference
    /// mode.
    pub fn to_model(&self) -> Result<TfnModel> {
        let cfg = self.config()?;
        let mut model = build_model(&cfg.model, cfg.train.seed)?;
        self.apply_to(&mut model)?;
        model.set_mode(Mode::Inference);
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(TfnError::Load("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| TfnError::Load("length overflow".into()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| TfnError::Load("invalid UTF-8 in checkpoint".into()))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &TfnModel, config_text: &str, epoch: u64) -> Result<()> {
    std::fs::write(path, Checkpoint::from_model(model, config_text, epoch).encode())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| TfnError::Load(format!("cannot read checkpoint {}: {e}", path.display())))?;
    Checkpoint::decode(&bytes)
}
