//! GMCK files: architecture, training configuration, parameters and Adam
//! state of one checkpoint in a [`Container`].

use std::path::Path;

use gmoe_core::model::{Architecture, Model};
use gmoe_core::nn::ParamStore;
use gmoe_core::train::{AdamState, Checkpoint, TrainConfig};
use gmoe_core::{DType, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::container::{ArrayData, Container, ContainerError};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"GMCK0001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub iteration: usize,
    pub dtype: DType,
    /// Parameter names in store order.
    pub params: Vec<String>,
    pub adam_steps: u64,
}

/// A checkpoint together with what is needed to rebuild its model.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile<T: Scalar> {
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub checkpoint: Checkpoint<T>,
}

impl<T: Scalar> CheckpointFile<T> {
    /// Builds the architecture and loads the stored parameters into it.
    pub fn model(&self) -> gmoe_core::Result<Model<T>> {
        use gmoe_core::model::Classifier;
        let mut m = self.architecture.build::<T>(self.train.seed)?;
        m.params_mut().load_from(&self.checkpoint.params)?;
        Ok(m)
    }
}

fn array<T: Scalar>(t: &Tensor<T>) -> ArrayData {
    match T::DTYPE {
        DType::F32 => ArrayData::F32(t.cast::<f32>().into_data()),
        DType::F64 => ArrayData::F64(t.cast::<f64>().into_data()),
    }
}

fn tensor<T: Scalar>(c: &Container, name: &str) -> Result<Tensor<T>, ContainerError> {
    let bad = |e: gmoe_core::Error| ContainerError::Header(e.to_string());
    match T::DTYPE {
        DType::F32 => {
            let (s, v) = c.f32(name)?;
            Ok(Tensor::new(s.to_vec(), v.to_vec()).map_err(bad)?.cast())
        }
        DType::F64 => {
            let (s, v) = c.f64(name)?;
            Ok(Tensor::new(s.to_vec(), v.to_vec()).map_err(bad)?.cast())
        }
    }
}

pub fn checkpoint_to_container<T: Scalar>(architecture: &Architecture, train: &TrainConfig, ckpt: &Checkpoint<T>) -> Container {
    let meta = CheckpointMeta {
        architecture: architecture.clone(),
        train: train.clone(),
        iteration: ckpt.iteration,
        dtype: T::DTYPE,
        params: ckpt.params.iter().map(|(n, _)| n.to_string()).collect(),
        adam_steps: ckpt.optimizer.t,
    };
    let mut c = Container::new(CHECKPOINT_MAGIC, serde_json::to_value(meta).expect("checkpoint metadata is serializable"));
    for (i, (name, t)) in ckpt.params.iter().enumerate() {
        c.push(format!("param.{name}"), t.shape().to_vec(), array(t));
        let (m, v) = (&ckpt.optimizer.m[i], &ckpt.optimizer.v[i]);
        c.push(format!("adam.m.{name}"), m.shape().to_vec(), array(m));
        c.push(format!("adam.v.{name}"), v.shape().to_vec(), array(v));
    }
    c
}

pub fn checkpoint_meta(c: &Container) -> Result<CheckpointMeta, ContainerError> {
    serde_json::from_value(c.meta.clone()).map_err(|e| ContainerError::Header(e.to_string()))
}

/// Fails with [`ContainerError::Header`] when the stored precision is not `T`.
pub fn checkpoint_from_container<T: Scalar>(c: &Container) -> Result<CheckpointFile<T>, ContainerError> {
    let meta = checkpoint_meta(c)?;
    if meta.dtype != T::DTYPE {
        return Err(ContainerError::Header(format!(
            "checkpoint holds {} parameters, requested {}",
            meta.dtype.name(),
            T::DTYPE.name()
        )));
    }
    let mut params = ParamStore::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for name in &meta.params {
        params.add(name.clone(), tensor(c, &format!("param.{name}"))?);
        m.push(tensor(c, &format!("adam.m.{name}"))?);
        v.push(tensor(c, &format!("adam.v.{name}"))?);
    }
    Ok(CheckpointFile {
        architecture: meta.architecture,
        train: meta.train,
        checkpoint: Checkpoint {
            iteration: meta.iteration,
            params,
            optimizer: AdamState { m, v, t: meta.adam_steps },
        },
    })
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    architecture: &Architecture,
    train: &TrainConfig,
    ckpt: &Checkpoint<T>,
) -> Result<(), ContainerError> {
    checkpoint_to_container(architecture, train, ckpt).write(path)
}

pub fn read_checkpoint(path: &Path) -> Result<Container, ContainerError> {
    Container::read(path, &CHECKPOINT_MAGIC)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<CheckpointFile<T>, ContainerError> {
    checkpoint_from_container(&read_checkpoint(path)?)
}
