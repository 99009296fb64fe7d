//! Binary training-state files.
//!
//! Layout: magic `HRSEG1`, format version (u32 LE), 32-byte spec digest, tensor count
//! (u32 LE), then per tensor the name length (u32 LE), UTF-8 name, rank (u32 LE), dims
//! (u32 LE each) and the values as little-endian `f32`. Model tensors come first in
//! store order, then `velocity.<name>` per trainable tensor, then `progress.epoch` and
//! `progress.iteration`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{NetModel, TrainState};
use crate::backbone::{NetworkSpec, NUM_SCALES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"HRSEG1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Segmentation,
    Classification,
}

/// Decoded file contents before they are bound to a model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn corrupt(msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(msg.to_string())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(format!("truncated file while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len(), "magic").ok() != Some(&MAGIC[..]) {
            return Err(corrupt("not a checkpoint file (bad magic bytes)"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
        }
        let digest: [u8; 32] = r.take(32, "spec digest")?.try_into().expect("32 bytes");
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| corrupt(format!("tensor {i} has a non-UTF-8 name")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n.checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?, &name)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(corrupt(format!("{} trailing bytes after the last tensor", buf.len() - r.pos)));
        }
        Ok(Self { digest, tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    fn find(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn dim(&self, name: &str, axis: usize) -> Result<usize> {
        self.find(name)
            .map(|t| t.shape()[axis])
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))
    }

    pub fn kind(&self) -> Result<ModelKind> {
        let has = |p: &str| self.tensors.iter().any(|(n, _)| n.starts_with(p));
        match (has("head."), has("cls_head.")) {
            (true, false) => Ok(ModelKind::Segmentation),
            (false, true) => Ok(ModelKind::Classification),
            _ => Err(corrupt("cannot tell whether this is a segmentation or classification model")),
        }
    }

    /// Network structure implied by the stored tensor names and shapes.
    pub fn spec(&self) -> Result<NetworkSpec> {
        let count = |prefix: &str| {
            (0..).take_while(|i| self.find(&format!("{prefix}.b{i}.conv1.weight")).is_some()).count()
        };
        let mut channels = [0; NUM_SCALES];
        let mut blocks = [0; NUM_SCALES];
        for s in 0..NUM_SCALES {
            channels[s] = self.dim(&format!("backbone.s{}.b0.conv1.weight", s + 1), 0)?;
            blocks[s] = count(&format!("backbone.s{}", s + 1));
        }
        let spec = match self.kind()? {
            ModelKind::Segmentation => NetworkSpec {
                head_blocks_per_scale: count("head.refine.s1"),
                merge_kernel: self.dim("head.merge1.s1.conv.weight", 2)?,
                ..NetworkSpec::from_widths(channels, blocks, self.dim("head.refine.s1.cls.weight", 0)?)
            },
            ModelKind::Classification => NetworkSpec::from_widths(channels, blocks, self.dim("cls_head.weight", 0)?),
        };
        spec.validate().map_err(|e| corrupt(format!("stored network is invalid: {e}")))?;
        if spec.digest() != self.digest {
            return Err(corrupt("spec digest does not match the stored tensors"));
        }
        Ok(spec)
    }
}

fn scalar(v: usize) -> Tensor<f32> {
    Tensor::from_vec(&[1], vec![v as f32]).expect("scalar")
}

/// Serialized training state: parameters, buffers, velocities and progress.
pub fn state_checkpoint<M: NetModel>(state: &TrainState<M>) -> Checkpoint {
    let store = state.model.store();
    let mut tensors: Vec<(String, Tensor<f32>)> =
        store.iter().map(|(_, e)| (e.name.clone(), e.tensor.clone().with_requires_grad(false))).collect();
    for (id, e) in store.iter().filter(|(_, e)| e.is_trainable()) {
        let v = state.optimizer.velocity(id.index()).to_vec();
        tensors.push((format!("velocity.{}", e.name), Tensor::from_vec(e.tensor.shape(), v).expect("velocity shape")));
    }
    tensors.push(("progress.epoch".into(), scalar(state.epoch)));
    tensors.push(("progress.iteration".into(), scalar(state.iteration)));
    Checkpoint { digest: state.model.spec().digest(), tensors }
}

pub fn save_checkpoint<M: NetModel>(path: &Path, state: &TrainState<M>) -> Result<()> {
    state_checkpoint(state).write(path)
}

/// Rebuilds the full training state; optimizer hyperparameters come from `momentum` and `weight_decay`.
pub fn restore_state<M: NetModel>(ck: &Checkpoint, momentum: f64, weight_decay: f64) -> Result<TrainState<M>> {
    let kind = ck.kind()?;
    if kind != M::KIND {
        return Err(corrupt(format!("checkpoint holds a {kind:?} model, expected {:?}", M::KIND)));
    }
    let spec = ck.spec()?;
    let mut model = M::build(&spec, 0)?;
    let by_name: HashMap<&str, &Tensor<f32>> = ck.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let model_tensors = ck
        .tensors
        .iter()
        .filter(|(n, _)| !n.starts_with("velocity.") && !n.starts_with("progress."))
        .count();
    if model_tensors != model.store().len() {
        return Err(corrupt(format!(
            "checkpoint holds {model_tensors} model tensors but the network needs {}",
            model.store().len()
        )));
    }
    let names: Vec<String> = model.store().iter().map(|(_, e)| e.name.clone()).collect();
    for name in &names {
        let t = by_name.get(name.as_str()).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        model.store_mut().assign(name, (*t).clone())?;
    }
    let mut state = TrainState::new(model, momentum, weight_decay);
    let trainable: Vec<(usize, String)> =
        state.model.store().iter().filter(|(_, e)| e.is_trainable()).map(|(id, e)| (id.index(), e.name.clone())).collect();
    for (index, name) in trainable {
        if let Some(v) = by_name.get(format!("velocity.{name}").as_str()) {
            state.optimizer.set_velocity(index, v.data().to_vec())?;
        }
    }
    let progress = |name: &str| by_name.get(name).map(|t| t.data()[0] as usize).unwrap_or(0);
    state.epoch = progress("progress.epoch");
    state.iteration = progress("progress.iteration");
    Ok(state)
}

pub fn load_checkpoint<M: NetModel>(path: &Path, momentum: f64, weight_decay: f64) -> Result<TrainState<M>> {
    restore_state(&Checkpoint::read(path)?, momentum, weight_decay)
}

/// Model parameters and buffers only.
pub fn load_model<M: NetModel>(path: &Path) -> Result<M> {
    Ok(load_checkpoint::<M>(path, 0.0, 0.0)?.model)
}
