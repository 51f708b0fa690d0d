//! Parameter and optimizer state as named tensors.
//!
//! Parameters are stored under their own names. Training checkpoints add
//! `<name>#adam_m`, `<name>#adam_v`, `<name>#step` and a `#epoch` entry
//! holding the number of completed epochs.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::tensor::io::{load_checkpoint, save_checkpoint, AnyTensor, Checkpoint};
use crate::tensor::ParamStore;
use crate::{Error, Real, Tensor};

pub const EPOCH_KEY: &str = "#epoch";

/// Parameter values only.
pub fn params_to_checkpoint<R: Real>(store: &ParamStore<R>) -> Checkpoint
where
    AnyTensor: From<Tensor<R>>,
{
    store
        .iter_by_name()
        .map(|(n, p)| (n.to_string(), AnyTensor::from(p.value.clone())))
        .collect()
}

/// Parameter values, Adam state and the completed-epoch counter.
pub fn training_checkpoint<R: Real>(store: &ParamStore<R>, epochs_done: usize) -> Checkpoint
where
    AnyTensor: From<Tensor<R>>,
{
    let mut ck = params_to_checkpoint(store);
    for (n, p) in store.iter_by_name() {
        ck.insert(format!("{n}#adam_m"), p.adam_m.clone().into());
        ck.insert(format!("{n}#adam_v"), p.adam_v.clone().into());
        ck.insert(
            format!("{n}#step"),
            Tensor::<f64>::scalar(p.step_count as f64).into(),
        );
    }
    ck.insert(EPOCH_KEY.to_string(), Tensor::<f64>::scalar(epochs_done as f64).into());
    ck
}

fn take<R: Real>(ck: &Checkpoint, key: &str, shape: &[usize]) -> Result<Tensor<R>> {
    let t = ck
        .get(key)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
    if t.shape() != shape {
        return Err(Error::Format(format!(
            "checkpoint entry {key} has shape {:?}, model expects {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(t.clone().into_real())
}

/// Loads parameter values (and optimizer state, if present) into `store`.
/// Returns the completed-epoch counter, zero for a parameters-only file.
pub fn restore<R: Real>(store: &mut ParamStore<R>, ck: &Checkpoint) -> Result<usize> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let shape = store.value(id).shape().to_vec();
        let value = take(ck, &name, &shape)?;
        let p = store.get_mut(id);
        p.value = value;
        if ck.contains_key(&format!("{name}#adam_m")) {
            p.adam_m = take(ck, &format!("{name}#adam_m"), &shape)?;
            p.adam_v = take(ck, &format!("{name}#adam_v"), &shape)?;
            let step: Tensor<f64> = take(ck, &format!("{name}#step"), &[])?;
            p.step_count = step.item() as u64;
        }
        p.zero_grad();
    }
    let known = |k: &str| {
        let base = k.split('#').next().unwrap_or(k);
        k == EPOCH_KEY || store.id(base).is_some()
    };
    if let Some(extra) = ck.keys().find(|k| !known(k)) {
        return Err(Error::Format(format!("checkpoint has unknown entry {extra}")));
    }
    Ok(match ck.get(EPOCH_KEY) {
        Some(t) => t.clone().into_real::<f64>().item() as usize,
        None => 0,
    })
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

pub fn save<R: Real>(path: &Path, store: &ParamStore<R>, epochs_done: usize) -> Result<()>
where
    AnyTensor: From<Tensor<R>>,
{
    save_checkpoint(path, &training_checkpoint(store, epochs_done))
}

pub fn load<R: Real>(path: &Path, store: &mut ParamStore<R>) -> Result<usize> {
    restore(store, &load_checkpoint(path)?)
}
