//! Trainable parameters, their registry, Adam updates, and checkpoint I/O.
//!
//! Parameters are owned by a [`ParamStore`] keyed by hierarchical names like
//! `entity/rgcn.0/rel.co_doc.w`. A [`Registry`] describes the full parameter
//! set for a model configuration (name, shape, initializer), so creation,
//! checkpoint validation, and parameter counting all share one source of
//! truth. Initialization is keyed by (seed, name), making it independent of
//! declaration order.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, NumError, Result};
use crate::num::{Tape, Tensor, Var};
use crate::util::{keyed_rng, uniform_sym};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// One trainable tensor plus its optimizer state.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
    step_count: u64,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One Adam update with bias correction. Rejects non-finite or
    /// wrongly-shaped gradients before touching any state.
    pub fn adam_step(&mut self, grad: &Tensor, cfg: &AdamConfig, name: &str) -> Result<(), NumError> {
        if grad.shape() != self.value.shape() {
            return Err(NumError::ParamShape {
                name: name.to_string(),
                expected: self.value.shape().to_vec(),
                got: grad.shape().to_vec(),
            });
        }
        if !grad.all_finite() {
            return Err(NumError::NonFiniteGrad {
                name: name.to_string(),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let m = self.first_moment.data_mut();
        let v = self.second_moment.data_mut();
        let x = self.value.data_mut();
        for ((g, (mi, vi)), xi) in grad.data().iter().zip(m.iter_mut().zip(v.iter_mut())).zip(x) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *xi -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        if !self.value.all_finite() {
            return Err(NumError::NonFinite { op: "adam_step" });
        }
        Ok(())
    }
}

/// How a registered parameter is filled at init time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
    Glorot,
    Zeros,
}

/// Declared parameter set of a model configuration.
#[derive(Clone, Debug, Default)]
pub struct Registry {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.entries.push((name.into(), shape.to_vec(), init));
    }

    pub fn entries(&self) -> &[(String, Vec<usize>, Init)] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, shape, _)| shape.iter().product::<usize>())
            .sum()
    }

    pub fn expected_shape(&self, name: &str) -> Option<&[usize]> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, _)| s.as_slice())
    }

    /// Materialize all parameters, deterministically from the seed.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, shape, init) in &self.entries {
            let value = match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Glorot => {
                    // fan_in/fan_out from the last two extents; vectors use
                    // their length for both.
                    let (fan_in, fan_out) = match shape.as_slice() {
                        [r, c] => (*r, *c),
                        [n] => (*n, *n),
                        _ => (shape.iter().product(), 1),
                    };
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let mut rng = keyed_rng(seed, name);
                    let numel: usize = shape.iter().product();
                    let data = (0..numel).map(|_| uniform_sym(&mut rng, bound)).collect();
                    Tensor::new(shape.clone(), data).expect("registry shape consistent")
                }
            };
            store.insert(name.clone(), value);
        }
        store
    }
}

/// Ordered, name-addressed parameter collection.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    order: Vec<String>,
    params: HashMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: String, value: Tensor) {
        if !self.params.contains_key(&name) {
            self.order.push(name.clone());
        }
        self.params.insert(name, Param::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Param, NumError> {
        self.params
            .get(name)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param, NumError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Names in declaration order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    /// Put every parameter value on a tape; returns name -> Var bindings.
    pub fn bind_all(&self, tape: &mut Tape) -> Result<BoundParams, NumError> {
        let mut vars = HashMap::new();
        for name in &self.order {
            let var = tape.leaf(self.params[name].value.clone())?;
            vars.insert(name.clone(), var);
        }
        Ok(BoundParams { vars })
    }

    /// Apply one Adam step per named gradient.
    pub fn apply_grads(
        &mut self,
        grads: &HashMap<String, Tensor>,
        cfg: &AdamConfig,
    ) -> Result<(), NumError> {
        for name in &self.order.clone() {
            if let Some(g) = grads.get(name) {
                self.get_mut(name)?.adam_step(g, cfg, name)?;
            }
        }
        Ok(())
    }
}

/// name -> Var bindings for one tape.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var, NumError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    /// Collect loss gradients for every bound parameter (zeros if unused).
    pub fn grads(
        &self,
        gradients: &crate::num::Gradients,
    ) -> Result<HashMap<String, Tensor>, NumError> {
        let mut out = HashMap::new();
        for (name, var) in &self.vars {
            out.insert(name.clone(), gradients.get_or_zeros(*var)?);
        }
        Ok(out)
    }
}

// ── checkpoint I/O ───────────────────────────────────────────────────────

pub const CHECKPOINT_VERSION: &str = "hopgraph.checkpoint.v1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile<M> {
    version: String,
    meta: M,
    params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Write a checkpoint: version header, caller-supplied metadata (typically a
/// model config), and every parameter as shape + row-major payload.
pub fn save_checkpoint<M: Serialize>(path: &Path, meta: &M, store: &ParamStore) -> Result<()> {
    let params: Vec<CheckpointParam> = store
        .order
        .iter()
        .map(|name| {
            let p = &store.params[name];
            CheckpointParam {
                name: name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            }
        })
        .collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION.to_string(),
        meta,
        params,
    };
    let f = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, &file).map_err(|e| DataError::json(path, e))?;
    w.write_all(b"\n").map_err(|e| DataError::io(path, e))?;
    w.flush().map_err(|e| DataError::io(path, e))?;
    Ok(())
}

/// Read a checkpoint and validate every stored shape against the registry
/// derived from the metadata's configuration.
pub fn load_checkpoint<M: for<'de> Deserialize<'de>>(
    path: &Path,
    registry_for: impl Fn(&M) -> Result<Registry>,
) -> Result<(M, ParamStore)> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let file: CheckpointFile<M> = serde_json::from_str(&text).map_err(|e| DataError::json(path, e))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Data(DataError::BadCheckpoint {
            path: path.display().to_string(),
            what: format!(
                "version {:?} not supported (expected {})",
                file.version, CHECKPOINT_VERSION
            ),
        }));
    }
    let registry = registry_for(&file.meta)?;
    if file.params.len() != registry.entries().len() {
        return Err(Error::Data(DataError::BadCheckpoint {
            path: path.display().to_string(),
            what: format!(
                "has {} parameters, config expects {}",
                file.params.len(),
                registry.entries().len()
            ),
        }));
    }
    let mut store = ParamStore::new();
    for cp in file.params {
        let expected = registry.expected_shape(&cp.name).ok_or_else(|| {
            Error::Data(DataError::BadCheckpoint {
                path: path.display().to_string(),
                what: format!("unexpected parameter {}", cp.name),
            })
        })?;
        if expected != cp.shape.as_slice() {
            return Err(Error::Num(NumError::ParamShape {
                name: cp.name,
                expected: expected.to_vec(),
                got: cp.shape,
            }));
        }
        let value = Tensor::new(cp.shape, cp.data).map_err(Error::Num)?;
        store.insert(cp.name, value);
    }
    Ok((file.meta, store))
}
