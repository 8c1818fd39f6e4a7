//! `PGGA` checkpoint files: named f64 tensors, with batch-norm running
//! statistics under `bn/` and optimizer state under `opt/`.

use std::fs;
use std::path::Path;

use crate::autodiff::{BnState, OptimizerState};
use crate::error::{PggaError, Result};
use crate::network::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PGGA";
pub const VERSION: u32 = 1;

/// Name of the entry holding the number of completed epochs.
pub const EPOCH_ENTRY: &str = "opt/epoch";

pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let n = u16::try_from(name.len()).map_err(|_| PggaError::InvalidArgument(format!("entry name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| PggaError::InvalidArgument(format!("rank of `{name}` exceeds 255")))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| PggaError::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(PggaError::format("checkpoint", "missing PGGA magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(PggaError::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| PggaError::format("checkpoint", "entry name is not UTF-8"))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(8 * numel)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(PggaError::format("checkpoint", "trailing bytes"));
    }
    Ok(out)
}

/// Model parameters, populated batch-norm statistics, optimizer velocities
/// and the epoch counter, in a fixed order.
pub fn collect(model: &Model, opt: Option<&OptimizerState>, epoch: usize) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model.params.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
    for (name, st) in &model.bn {
        if st.populated {
            out.push((format!("bn/{name}/mean"), Tensor::from_vec(st.mean.clone())));
            out.push((format!("bn/{name}/var"), Tensor::from_vec(st.var.clone())));
        }
    }
    if let Some(opt) = opt {
        for (name, v) in &opt.velocity {
            out.push((format!("opt/{name}"), v.clone()));
        }
    }
    out.push((EPOCH_ENTRY.into(), Tensor::scalar(epoch as f64)));
    out
}

pub fn save(path: &Path, model: &Model, opt: Option<&OptimizerState>, epoch: usize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(&collect(model, opt, epoch))?)?;
    Ok(())
}

/// Loads parameters and statistics into `model` (whose architecture must
/// match) and velocities into `opt`; returns the stored epoch.
pub fn restore(entries: Vec<(String, Tensor)>, model: &mut Model, mut opt: Option<&mut OptimizerState>) -> Result<usize> {
    let mismatch = |name: &str, want: &[usize], got: &[usize]| {
        PggaError::Config(format!("checkpoint entry `{name}` has shape {got:?}, model expects {want:?}"))
    };
    let mut epoch = 0;
    let mut seen = 0;
    for (name, t) in entries {
        if name == EPOCH_ENTRY {
            epoch = t.item() as usize;
        } else if let Some(rest) = name.strip_prefix("opt/") {
            let p = model
                .params
                .get(rest)
                .ok_or_else(|| PggaError::Config(format!("checkpoint velocity for unknown parameter `{rest}`")))?;
            if p.shape() != t.shape() {
                return Err(mismatch(&name, p.shape(), t.shape()));
            }
            if let Some(o) = opt.as_deref_mut() {
                o.velocity.insert(rest.to_string(), t);
            }
        } else if let Some(rest) = name.strip_prefix("bn/") {
            let (layer, field) = rest
                .rsplit_once('/')
                .ok_or_else(|| PggaError::format("checkpoint", format!("bad entry `{name}`")))?;
            let st: &mut BnState = model
                .bn
                .get_mut(layer)
                .ok_or_else(|| PggaError::Config(format!("checkpoint has unknown batch norm `{layer}`")))?;
            if t.shape() != [st.mean.len()] {
                return Err(mismatch(&name, &[st.mean.len()], t.shape()));
            }
            match field {
                "mean" => st.mean = t.into_data(),
                "var" => st.var = t.into_data(),
                _ => return Err(PggaError::format("checkpoint", format!("bad entry `{name}`"))),
            }
            st.populated = true;
        } else {
            let p = model
                .params
                .get_mut(&name)
                .ok_or_else(|| PggaError::Config(format!("checkpoint has unknown parameter `{name}`")))?;
            if p.shape() != t.shape() {
                return Err(mismatch(&name, p.shape(), t.shape()));
            }
            *p = t;
            seen += 1;
        }
    }
    if seen != model.params.len() {
        return Err(PggaError::Config(format!(
            "checkpoint holds {seen} of the model's {} parameters",
            model.params.len()
        )));
    }
    Ok(epoch)
}

pub fn load(path: &Path, model: &mut Model, opt: Option<&mut OptimizerState>) -> Result<usize> {
    restore(decode(&fs::read(path)?)?, model, opt)
}
