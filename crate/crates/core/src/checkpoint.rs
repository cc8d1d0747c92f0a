//! Checkpoints: one AVM-FEAT `f64` tensor file per parameter and per Adam
//! moment, plus `state.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{read_tensor, write_tensor, Dtype};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::AvMaster;
use crate::optim::{Adam, Schedule};
use crate::params::{declare, ParameterStore};
use crate::tensor::Tensor;
use crate::train::{RunManifest, TrainConfig, Trainer};

pub const STATE_FILE: &str = "state.json";
const FORMAT: &str = "avm-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamState {
    beta1: f64,
    beta2: f64,
    eps: f64,
    schedule: Schedule,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct State {
    format: String,
    version: u32,
    config: ModelConfig,
    train: TrainConfig,
    /// Next epoch to run.
    epoch: usize,
    adam: AdamState,
    tensors: Vec<String>,
    manifest: Option<RunManifest>,
}

fn file_name(name: &str, suffix: &str) -> String {
    format!("{name}{suffix}.bin")
}

pub fn save_checkpoint(trainer: &Trainer, manifest: Option<&RunManifest>, dir: &Path) -> Result<()> {
    for sub in ["params", "adam"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let store = &trainer.model.params;
    let mut names = Vec::with_capacity(store.len());
    for (i, (_, p)) in store.iter().enumerate() {
        write_tensor(&dir.join("params").join(file_name(&p.name, "")), &p.value, Dtype::F64)?;
        write_tensor(&dir.join("adam").join(file_name(&p.name, ".m")), &trainer.opt.m[i], Dtype::F64)?;
        write_tensor(&dir.join("adam").join(file_name(&p.name, ".v")), &trainer.opt.v[i], Dtype::F64)?;
        names.push(p.name.clone());
    }
    let o = &trainer.opt;
    let state = State {
        format: FORMAT.into(),
        version: VERSION,
        config: trainer.model.config.clone(),
        train: trainer.train,
        epoch: trainer.epoch,
        adam: AdamState {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            schedule: o.schedule,
            step: o.step,
        },
        tensors: names,
        manifest: manifest.cloned(),
    };
    let path = dir.join(STATE_FILE);
    fs::write(&path, serde_json::to_string_pretty(&state)?).map_err(|e| Error::io(&path, e))
}

fn read_state(dir: &Path) -> Result<State> {
    let path = dir.join(STATE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let state: State = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{STATE_FILE}: {e}")))?;
    if state.format != FORMAT || state.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            state.format, state.version
        )));
    }
    Ok(state)
}

/// Reads every tensor the configuration declares from `sub`, checking
/// shapes before anything is assembled.
fn read_declared(dir: &Path, config: &ModelConfig, sub: &str, suffix: &str) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for spec in declare(config) {
        let name = file_name(&spec.name, suffix);
        let path = dir.join(sub).join(&name);
        if !path.exists() {
            return Err(Error::Checkpoint(format!("tensor {} is missing from the checkpoint", spec.name)));
        }
        let (t, _) = read_tensor(&path)?;
        if t.shape() != (spec.rows, spec.cols) {
            return Err(Error::Shape(format!(
                "tensor {} is {}x{} in the checkpoint, configuration expects {}x{}",
                spec.name,
                t.rows(),
                t.cols(),
                spec.rows,
                spec.cols
            )));
        }
        out.push(t);
    }
    Ok(out)
}

fn store_from(config: &ModelConfig, values: Vec<Tensor>) -> Result<ParameterStore> {
    let mut store = ParameterStore::from_specs(&declare(config), 0)?;
    for (id, v) in store.ids().collect::<Vec<_>>().into_iter().zip(values) {
        *store.value_mut(id) = v;
    }
    Ok(store)
}

/// Loads parameters into `config`'s architecture. Fails on the first
/// missing or mis-shaped tensor without building anything.
pub fn load_params(dir: &Path, config: &ModelConfig) -> Result<AvMaster> {
    config.validate()?;
    let state = read_state(dir)?;
    let declared: Vec<String> = declare(config).into_iter().map(|s| s.name).collect();
    if let Some(extra) = state.tensors.iter().find(|n| !declared.contains(n)) {
        return Err(Error::Shape(format!("checkpoint tensor {extra} is not part of this configuration")));
    }
    let values = read_declared(dir, config, "params", "")?;
    AvMaster::from_params(config.clone(), store_from(config, values)?)
}

/// Restores a trainer exactly as saved, with its run manifest if present.
pub fn load_checkpoint(dir: &Path) -> Result<(Trainer, Option<RunManifest>)> {
    let state = read_state(dir)?;
    let model = load_params(dir, &state.config)?;
    let m = read_declared(dir, &state.config, "adam", ".m")?;
    let v = read_declared(dir, &state.config, "adam", ".v")?;
    let a = state.adam;
    let opt = Adam {
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        schedule: a.schedule,
        step: a.step,
        m,
        v,
    };
    let trainer = Trainer {
        model,
        opt,
        train: state.train,
        epoch: state.epoch,
    };
    Ok((trainer, state.manifest))
}
