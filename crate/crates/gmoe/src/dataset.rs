//! GMDS files: a synthetic patch dataset in a [`Container`].

use std::path::Path;

use gmoe_core::synthetic::{Split, SplitKind, SyntheticDataset, SyntheticSpec};
use gmoe_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::container::{ArrayData, Container, ContainerError};

pub const DATASET_MAGIC: [u8; 8] = *b"GMDS0001";
/// File name `synth-gen` writes inside its output directory.
pub const DATASET_FILE: &str = "dataset.gmds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: SyntheticSpec,
    pub seed: u64,
}

pub fn dataset_to_container(ds: &SyntheticDataset) -> Container {
    let meta = DatasetMeta {
        spec: ds.spec.clone(),
        seed: ds.spec.seed,
    };
    let mut c = Container::new(DATASET_MAGIC, serde_json::to_value(meta).expect("spec is serializable"));
    c.push("basis", ds.basis.shape().to_vec(), ArrayData::F64(ds.basis.data().to_vec()));
    for split in ds.splits() {
        let name = split.kind.name();
        let idx = |v: &[usize]| ArrayData::U64(v.iter().map(|&x| x as u64).collect());
        c.push(format!("{name}.inputs"), split.inputs.shape().to_vec(), ArrayData::F64(split.inputs.data().to_vec()));
        c.push(format!("{name}.labels"), vec![split.len()], idx(&split.labels));
        c.push(format!("{name}.pixel_index"), vec![split.len()], idx(&split.pixel_index));
        c.push(format!("{name}.feature_patch"), vec![split.len()], idx(&split.feature_patch));
        c.push(format!("{name}.feature_class"), vec![split.len()], idx(&split.feature_class));
    }
    c
}

pub fn dataset_from_container(c: &Container) -> Result<SyntheticDataset, ContainerError> {
    let meta: DatasetMeta = serde_json::from_value(c.meta.clone()).map_err(|e| ContainerError::Header(e.to_string()))?;
    let tensor = |name: &str| -> Result<Tensor<f64>, ContainerError> {
        let (shape, data) = c.f64(name)?;
        Tensor::new(shape.to_vec(), data.to_vec()).map_err(|e| ContainerError::Header(e.to_string()))
    };
    let indices = |name: &str| -> Result<Vec<usize>, ContainerError> {
        let (_, v) = c.u64(name)?;
        v.iter()
            .map(|&x| usize::try_from(x).map_err(|_| ContainerError::Header(format!("{name}: index {x} out of range"))))
            .collect()
    };
    let split = |kind: SplitKind| -> Result<Split, ContainerError> {
        let n = kind.name();
        Ok(Split {
            kind,
            inputs: tensor(&format!("{n}.inputs"))?,
            labels: indices(&format!("{n}.labels"))?,
            pixel_index: indices(&format!("{n}.pixel_index"))?,
            feature_patch: indices(&format!("{n}.feature_patch"))?,
            feature_class: indices(&format!("{n}.feature_class"))?,
        })
    };
    Ok(SyntheticDataset {
        spec: meta.spec,
        basis: tensor("basis")?,
        train: split(SplitKind::Train)?,
        val: split(SplitKind::Val)?,
        test1: split(SplitKind::Test1)?,
        test2: split(SplitKind::Test2)?,
    })
}

pub fn save_dataset(ds: &SyntheticDataset, path: &Path) -> Result<(), ContainerError> {
    dataset_to_container(ds).write(path)
}

pub fn load_dataset(path: &Path) -> Result<SyntheticDataset, ContainerError> {
    dataset_from_container(&Container::read(path, &DATASET_MAGIC)?)
}

/// Reads only the metadata of a GMDS file (the whole file is still
/// checksummed).
pub fn read_dataset_meta(path: &Path) -> Result<DatasetMeta, ContainerError> {
    let c = Container::read(path, &DATASET_MAGIC)?;
    serde_json::from_value(c.meta).map_err(|e| ContainerError::Header(e.to_string()))
}
