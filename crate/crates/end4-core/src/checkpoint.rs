//! Self-describing checkpoint container.
//!
//! Layout: magic, format version, a JSON header (configs, seed, counters,
//! parameter names and shapes, dtype), then the raw little-endian tensor
//! data in header order. Weights restore bit-exactly; a train-state
//! checkpoint additionally carries the optimizer moments.

use crate::error::{Error, Result};
use crate::model::{JointModel, ModelConfig};
use crate::nn::ParamSet;
use crate::optim::{Adam, AdamConfig};
use crate::real::Real;
use crate::trainer::TrainConfig;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"E4CK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    kind: String,
    seed: u64,
    model: ModelConfig,
    #[serde(default)]
    train: Option<TrainConfig>,
    #[serde(default)]
    adam: Option<AdamConfig>,
    #[serde(default)]
    epoch: u64,
    #[serde(default)]
    step: u64,
    #[serde(default)]
    best_val_auc: Option<f64>,
    params: Vec<TensorInfo>,
    has_moments: bool,
}

fn write_tensor<T: Real, W: Write>(w: &mut W, data: &ArrayD<T>) -> Result<()> {
    for v in data.iter() {
        if T::DTYPE == "f32" {
            w.write_f32::<LittleEndian>(v.to_f() as f32)?;
        } else {
            w.write_f64::<LittleEndian>(v.to_f())?;
        }
    }
    Ok(())
}

fn read_tensor<T: Real, R: Read>(r: &mut R, shape: &[usize]) -> Result<ArrayD<T>> {
    let len: usize = shape.iter().product();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let v = if T::DTYPE == "f32" {
            T::from_f(r.read_f32::<LittleEndian>()? as f64)
        } else {
            T::from_f(r.read_f64::<LittleEndian>()?)
        };
        out.push(v);
    }
    Ok(ArrayD::from_shape_vec(IxDyn(shape), out).expect("shape/product checked"))
}

fn param_infos<T: Real>(params: &ParamSet<T>) -> Vec<TensorInfo> {
    params
        .ids()
        .map(|id| TensorInfo {
            name: params.name(id).to_string(),
            shape: params.get(id).shape().to_vec(),
        })
        .collect()
}

fn write_container<T: Real>(
    path: &Path,
    header: &Header,
    params: &ParamSet<T>,
    moments: Option<(&[ArrayD<T>], &[ArrayD<T>])>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let header_json = serde_json::to_vec(header)?;
    w.write_u64::<LittleEndian>(header_json.len() as u64)?;
    w.write_all(&header_json)?;
    for id in params.ids() {
        write_tensor(&mut w, params.get(id))?;
    }
    if let Some((m, v)) = moments {
        for t in m {
            write_tensor(&mut w, t)?;
        }
        for t in v {
            write_tensor(&mut w, t)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = r.read_u64::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; header_len];
    r.read_exact(&mut buf)?;
    Ok(serde_json::from_slice(&buf)?)
}

fn restore_params<T: Real, R: Read>(
    r: &mut R,
    params: &mut ParamSet<T>,
    infos: &[TensorInfo],
) -> Result<()> {
    if infos.len() != params.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} tensors, model expects {}",
            infos.len(),
            params.len()
        )));
    }
    for (id, info) in params.ids().collect::<Vec<_>>().into_iter().zip(infos) {
        if params.name(id) != info.name || params.get(id).shape() != info.shape.as_slice() {
            return Err(Error::Data(format!(
                "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                info.name,
                info.shape,
                params.name(id),
                params.get(id).shape()
            )));
        }
        let tensor = read_tensor(r, &info.shape)?;
        params.set(id, tensor);
    }
    Ok(())
}

fn check_dtype<T: Real>(header: &Header) -> Result<()> {
    if header.dtype != T::DTYPE {
        return Err(Error::Data(format!(
            "checkpoint dtype {} does not match requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    Ok(())
}

/// Save model weights plus configs.
pub fn save_model<T: Real>(path: impl AsRef<Path>, model: &JointModel<T>) -> Result<()> {
    let header = Header {
        dtype: T::DTYPE.to_string(),
        kind: "model".into(),
        seed: model.seed,
        model: model.config,
        train: None,
        adam: None,
        epoch: 0,
        step: 0,
        best_val_auc: None,
        params: param_infos(&model.params),
        has_moments: false,
    };
    write_container(path.as_ref(), &header, &model.params, None)
}

/// Rebuild a model from a checkpoint; weights restore bit-exactly.
pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<JointModel<T>> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let header = read_header(&mut r)?;
    check_dtype::<T>(&header)?;
    let mut model = JointModel::<T>::init(header.model, header.seed)?;
    restore_params(&mut r, &mut model.params, &header.params)?;
    Ok(model)
}

/// Full training state for exact resumption.
pub struct TrainStateCheckpoint<T: Real> {
    pub model: JointModel<T>,
    pub adam: Adam<T>,
    pub train: TrainConfig,
    pub epoch: u64,
    pub step: u64,
    pub best_val_auc: Option<f64>,
}

pub fn save_train_state<T: Real>(
    path: impl AsRef<Path>,
    model: &JointModel<T>,
    adam: &Adam<T>,
    train: &TrainConfig,
    epoch: u64,
    step: u64,
    best_val_auc: Option<f64>,
) -> Result<()> {
    let header = Header {
        dtype: T::DTYPE.to_string(),
        kind: "train_state".into(),
        seed: model.seed,
        model: model.config,
        train: Some(train.clone()),
        adam: Some(adam.config),
        epoch,
        step,
        best_val_auc,
        params: param_infos(&model.params),
        has_moments: true,
    };
    let (m, v) = adam.moments();
    write_container(path.as_ref(), &header, &model.params, Some((m, v)))
}

pub fn load_train_state<T: Real>(path: impl AsRef<Path>) -> Result<TrainStateCheckpoint<T>> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let header = read_header(&mut r)?;
    check_dtype::<T>(&header)?;
    if header.kind != "train_state" || !header.has_moments {
        return Err(Error::Data(
            "checkpoint does not contain training state".into(),
        ));
    }
    let train = header
        .train
        .clone()
        .ok_or_else(|| Error::Data("train_state checkpoint missing train config".into()))?;
    let adam_cfg = header
        .adam
        .ok_or_else(|| Error::Data("train_state checkpoint missing optimizer config".into()))?;
    let mut model = JointModel::<T>::init(header.model, header.seed)?;
    restore_params(&mut r, &mut model.params, &header.params)?;
    let mut m = Vec::with_capacity(header.params.len());
    for info in &header.params {
        m.push(read_tensor(&mut r, &info.shape)?);
    }
    let mut v = Vec::with_capacity(header.params.len());
    for info in &header.params {
        v.push(read_tensor(&mut r, &info.shape)?);
    }
    let adam = Adam::restore(adam_cfg, header.step, m, v);
    Ok(TrainStateCheckpoint {
        model,
        adam,
        train,
        epoch: header.epoch,
        step: header.step,
        best_val_auc: header.best_val_auc,
    })
}

/// Model config and seed without loading tensors.
pub fn peek_config(path: impl AsRef<Path>) -> Result<(ModelConfig, u64, String)> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let header = read_header(&mut r)?;
    Ok((header.model, header.seed, header.dtype))
}
