//! Single-file binary checkpoint:
//!
//! ```text
//! magic "SIDRPOL\0" | u32 version | u64 header length | header JSON
//! | parameters as f64 LE | optional optimizer moments (m then v) as f64 LE
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Policy, PolicyConfig, PolicyError, Stage, VocabSpec};
use crate::numerics::{Optimizer, OptimizerState, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SIDRPOL\0";

#[derive(Serialize, Deserialize)]
struct Header {
    config: PolicyConfig,
    vocab: VocabSpec,
    stage: Stage,
    shapes: Vec<Vec<usize>>,
    /// Hyperparameters and step count; moments follow the parameters.
    optimizer: Option<Optimizer>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PolicyError + '_ {
    move |source| PolicyError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn put(buf: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes the checkpoint atomically (temporary file, then rename).
pub fn save_policy(path: &Path, policy: &Policy, optimizer: Option<&Optimizer>) -> Result<(), PolicyError> {
    let opt_header = optimizer.map(|o| {
        let mut o = o.clone();
        o.state.m.clear();
        o.state.v.clear();
        o
    });
    let header = Header {
        config: policy.config.clone(),
        vocab: policy.vocab.clone(),
        stage: policy.stage,
        shapes: policy.params.iter().map(|p| p.shape().to_vec()).collect(),
        optimizer: opt_header,
    };
    let json = serde_json::to_vec(&header).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(json.len() + 8 * policy.num_parameters() + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in &policy.params {
        put(&mut buf, p.data());
    }
    if let Some(o) = optimizer {
        let has = !o.state.m.is_empty();
        buf.push(u8::from(has));
        if has {
            for m in &o.state.m {
                put(&mut buf, m);
            }
            for v in &o.state.v {
                put(&mut buf, v);
            }
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&buf).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], PolicyError> {
        if self.pos + n > self.buf.len() {
            return Err(PolicyError::Checkpoint("file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, PolicyError> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Loads a checkpoint, refusing unknown magic or versions.
pub fn load_policy(path: &Path) -> Result<(Policy, Option<Optimizer>), PolicyError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err(path))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(PolicyError::Checkpoint(format!("{} is not a policy checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(PolicyError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
    let mut params = Vec::with_capacity(header.shapes.len());
    for shape in &header.shapes {
        let n = shape.iter().product();
        params.push(Tensor::new(shape.clone(), r.f64s(n)?)?);
    }
    let policy = Policy {
        config: header.config,
        vocab: header.vocab,
        stage: header.stage,
        params,
    };
    policy.check_shapes()?;
    let optimizer = match header.optimizer {
        Some(mut o) => {
            if r.take(1)?[0] == 1 {
                let lens: Vec<usize> = policy.params.iter().map(Tensor::len).collect();
                let m = lens.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>, _>>()?;
                let v = lens.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>, _>>()?;
                o.state = OptimizerState { step: o.state.step, m, v };
            }
            Some(o)
        }
        None => None,
    };
    if r.pos != buf.len() {
        return Err(PolicyError::Checkpoint("trailing bytes after checkpoint payload".into()));
    }
    Ok((policy, optimizer))
}
