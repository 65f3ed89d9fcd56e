//! Binary checkpoints.
//!
//! ```text
//! "EBM1" | version: u32 LE | manifest length: u64 LE | manifest (TOML, UTF-8)
//! | parameters: f64 LE | [Adam: t u64, m..., v...] | [buffer: count u64,
//! samples f64 row-major, labels u64]
//! ```
//!
//! Parameters are written per layer as `W` (row-major), `b`, `γ`, `β`, `u`,
//! skipping absent tensors. Every blob length follows from the manifest, and
//! `load(save(x)) == x` bit for bit.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::DatasetSpec;
use crate::error::{EbmError, Result};
use crate::model::{layout_for, EnergyNet, Layer, Model, ModelSpec, ParamEnergy, Quadratic};
use crate::sampler::ReplayBuffer;
use crate::tensor::Tensor;
use crate::trainer::{AdamState, TrainConfig};

pub const MAGIC: &[u8; 4] = b"EBM1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferMeta {
    pub capacity: usize,
    pub dim: usize,
    pub uniform_prob: f64,
    pub labelled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub step: u64,
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub has_adam: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer: Option<BufferMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
    pub adam: Option<AdamState>,
    pub buffer: Option<ReplayBuffer>,
}

impl Checkpoint {
    /// Builds a checkpoint, filling the model and buffer descriptions of the
    /// manifest from the values themselves.
    pub fn new(
        seed: u64,
        step: u64,
        model: Model,
        train: Option<TrainConfig>,
        dataset: Option<DatasetSpec>,
        adam: Option<AdamState>,
        buffer: Option<ReplayBuffer>,
    ) -> Self {
        let manifest = Manifest {
            seed,
            step,
            model: model.spec(),
            train,
            dataset,
            has_adam: adam.is_some(),
            buffer: buffer.as_ref().map(|b| BufferMeta {
                capacity: b.capacity(),
                dim: b.dim(),
                uniform_prob: b.uniform_prob(),
                labelled: b.entries().next().is_some_and(|e| e.label.is_some()),
            }),
        };
        Self {
            manifest,
            model,
            adam,
            buffer,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest =
            toml::to_string(&self.manifest).map_err(|e| EbmError::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for t in stored_tensors(&self.model) {
            put_f64s(&mut out, t.data());
        }
        if let Some(adam) = &self.adam {
            out.extend_from_slice(&adam.t.to_le_bytes());
            for t in adam.m.iter().chain(&adam.v) {
                put_f64s(&mut out, t.data());
            }
        }
        if let (Some(buf), Some(meta)) = (&self.buffer, &self.manifest.buffer) {
            out.extend_from_slice(&(buf.len() as u64).to_le_bytes());
            for e in buf.entries() {
                put_f64s(&mut out, &e.sample);
            }
            if meta.labelled {
                for e in buf.entries() {
                    let l = e.label.ok_or_else(|| {
                        EbmError::Format("buffer mixes labelled and unlabelled entries".into())
                    })?;
                    out.extend_from_slice(&(l as u64).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(EbmError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(EbmError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = r.u64()? as usize;
        let text =
            std::str::from_utf8(r.take(len)?).map_err(|e| EbmError::Format(e.to_string()))?;
        let manifest: Manifest =
            toml::from_str(text).map_err(|e| EbmError::Format(e.to_string()))?;

        let model = match &manifest.model {
            ModelSpec::Mlp(cfg) => {
                cfg.validate()?;
                let mut layers = vec![];
                for shapes in layout_for(cfg) {
                    let [w, b, g, s, u] = shapes;
                    let mut read = |shape: Option<Vec<usize>>| -> Result<Option<Tensor>> {
                        shape.map(|sh| r.tensor(&sh)).transpose()
                    };
                    layers.push(Layer {
                        weight: read(w)?.expect("always present"),
                        bias: read(b)?.expect("always present"),
                        gain: read(g)?,
                        shift: read(s)?,
                        u: read(u)?,
                    });
                }
                Model::Net(EnergyNet::from_layers(cfg.clone(), layers)?)
            }
            ModelSpec::Quadratic { dim } => {
                let mut q = Quadratic::new(vec![0.0; *dim], 1.0);
                q.center = r.tensor(&[1, *dim])?;
                q.log_precision = r.tensor(&[1, 1])?;
                Model::Quadratic(q)
            }
        };
        let adam = if manifest.has_adam {
            let t = r.u64()?;
            let shapes: Vec<Vec<usize>> =
                model.params().iter().map(|p| p.shape().to_vec()).collect();
            let m = shapes
                .iter()
                .map(|s| r.tensor(s))
                .collect::<Result<Vec<_>>>()?;
            let v = shapes
                .iter()
                .map(|s| r.tensor(s))
                .collect::<Result<Vec<_>>>()?;
            Some(AdamState { m, v, t })
        } else {
            None
        };
        let buffer = match &manifest.buffer {
            Some(meta) => {
                let count = r.u64()? as usize;
                let samples = r.tensor(&[count, meta.dim])?;
                let labels = if meta.labelled {
                    Some(
                        (0..count)
                            .map(|_| r.u64().map(|v| v as usize))
                            .collect::<Result<Vec<_>>>()?,
                    )
                } else {
                    None
                };
                let mut buf = ReplayBuffer::new(meta.capacity, meta.dim, meta.uniform_prob)?;
                buf.insert(&samples, labels.as_deref())?;
                Some(buf)
            }
            None => None,
        };
        if r.pos != bytes.len() {
            return Err(EbmError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            manifest,
            model,
            adam,
            buffer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn stored_tensors(model: &Model) -> Vec<&Tensor> {
    match model {
        Model::Net(net) => net
            .layers()
            .iter()
            .flat_map(|l| {
                [
                    Some(&l.weight),
                    Some(&l.bias),
                    l.gain.as_ref(),
                    l.shift.as_ref(),
                    l.u.as_ref(),
                ]
                .into_iter()
                .flatten()
            })
            .collect(),
        Model::Quadratic(q) => q.params(),
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EbmError::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| EbmError::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| EbmError::Contract(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}
