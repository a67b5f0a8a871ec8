//! Training loop, evaluation, and run configuration.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::{DataError, NumError, Result};
use crate::graph::{build_graph, normalize_token, GraphConfig, Instance, RelGraph};
use crate::harness::data::load_dataset;
use crate::models::{Model, ModelConfig};
use crate::num::{load_checkpoint, save_checkpoint, AdamConfig, ParamStore, Registry, Tape, Tensor};
use crate::util::{fnv1a64, keyed_rng};

/// One instance turned into model inputs: its graph, node features, query
/// token features, and the gold candidate index.
pub struct Prepared {
    pub id: String,
    pub graph: RelGraph,
    pub h0: Tensor,
    pub query: Tensor,
    pub gold: usize,
}

/// Build graphs and feature matrices for a whole dataset.
pub fn prepare(
    instances: &[Instance],
    graph_cfg: &GraphConfig,
    embedder: &Embedder,
) -> Result<Vec<Prepared>> {
    let mut out = Vec::with_capacity(instances.len());
    for inst in instances {
        let graph = build_graph(inst, graph_cfg)?;
        let h0 = embedder.node_features(inst, &graph)?;
        let query = embedder.query_features(inst)?;
        out.push(Prepared {
            id: inst.id.clone(),
            graph,
            h0,
            query,
            gold: inst.answer_index(),
        });
    }
    Ok(out)
}

fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-4
}
fn default_patience() -> usize {
    5
}

/// Everything one training run needs. Serializable so runs are launched from
/// config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Stop after this many epochs without a new best dev accuracy.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub dev_path: Option<PathBuf>,
    /// Report 0.0 wall seconds in metrics, so reruns are byte-identical.
    #[serde(default)]
    pub fixed_time: bool,
}

impl RunConfig {
    pub fn new(model: ModelConfig) -> RunConfig {
        RunConfig {
            model,
            epochs: default_epochs(),
            batch: default_batch(),
            lr: default_lr(),
            patience: default_patience(),
            out_dir: None,
            train_path: None,
            dev_path: None,
            fixed_time: false,
        }
    }

    /// Check the run-level settings only; `validate` also checks the model.
    pub fn validate_run(&self) -> Result<(), DataError> {
        if self.epochs == 0 {
            return Err(DataError::BadConfig("epochs must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(DataError::BadConfig("batch must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(DataError::BadConfig(format!(
                "learning rate must be a positive finite number, got {}",
                self.lr
            )));
        }
        if self.patience == 0 {
            return Err(DataError::BadConfig("patience must be >= 1".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_run()?;
        self.model.validate()?;
        Ok(())
    }
}

/// One line of the metrics log. Field order is the JSON key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub dev_acc: f64,
    /// Wall seconds since training started; 0.0 under `fixed_time`.
    pub seconds: f64,
}

/// What a finished run hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_dev_acc: f64,
    pub best_epoch: usize,
    /// Mean training loss under the initial parameters, before any update.
    pub initial_loss: f64,
    /// Parameters from the best-dev epoch.
    pub best_params: ParamStore,
}

/// Per-instance evaluation output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub gold: usize,
    pub predicted: usize,
    pub correct: bool,
    pub probabilities: Vec<f64>,
}

fn forward_loss(
    model: &Model,
    tape: &mut Tape,
    params: &crate::num::BoundParams,
    item: &Prepared,
) -> Result<(f64, bool, crate::num::Var)> {
    let out = model.forward(tape, params, &item.graph, &item.h0, &item.query)?;
    let loss = model.loss(tape, &out, item.gold)?;
    let value = tape.value(loss)?.data()[0];
    Ok((value, out.scores.predicted() == item.gold, loss))
}

/// Mean loss over a dataset without touching gradients.
fn mean_loss(model: &Model, store: &ParamStore, data: &[Prepared]) -> Result<f64> {
    let mut total = 0.0;
    for item in data {
        let mut tape = Tape::new();
        let params = store.bind_all(&mut tape)?;
        let (value, _, _) = forward_loss(model, &mut tape, &params, item)?;
        total += value;
    }
    Ok(total / data.len() as f64)
}

/// Accuracy and per-instance verdicts under the given parameters.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    data: &[Prepared],
) -> Result<(f64, Vec<Prediction>)> {
    if data.is_empty() {
        return Err(DataError::BadConfig("evaluation set is empty".into()).into());
    }
    let mut predictions = Vec::with_capacity(data.len());
    let mut correct = 0usize;
    for item in data {
        let mut tape = Tape::new();
        let params = store.bind_all(&mut tape)?;
        let out = model.forward(&mut tape, &params, &item.graph, &item.h0, &item.query)?;
        let predicted = out.scores.predicted();
        let hit = predicted == item.gold;
        correct += hit as usize;
        predictions.push(Prediction {
            id: item.id.clone(),
            gold: item.gold,
            predicted,
            correct: hit,
            probabilities: out.scores.probabilities,
        });
    }
    Ok((correct as f64 / data.len() as f64, predictions))
}

/// Run the full loop: minibatch Adam over `train_set`, dev evaluation after
/// every epoch, early stop on stalled dev accuracy, best-dev parameters kept.
///
/// With `out_dir` set, appends one metrics line per epoch to
/// `metrics.jsonl` (exactly as many lines as epochs actually run) and writes
/// the best parameters to `checkpoint.json` at the end.
pub fn train(cfg: &RunConfig, train_set: &[Prepared], dev_set: &[Prepared]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(DataError::BadConfig("training set is empty".into()).into());
    }
    let embed_dim = train_set[0].h0.dims2()?.1;
    let model = Model::new(cfg.model.clone(), embed_dim)?;
    let mut store = model.init_params();
    let adam = AdamConfig::with_lr(cfg.lr);

    let mut metrics_out = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            let file = std::fs::File::create(&path).map_err(|e| DataError::io(&path, e))?;
            Some((BufWriter::new(file), path))
        }
        None => None,
    };

    let initial_loss = mean_loss(&model, &store, train_set)?;
    let start = Instant::now();
    let mut records = Vec::new();
    let mut best_dev_acc = -1.0f64;
    let mut best_epoch = 0usize;
    let mut best_params = store.clone();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = keyed_rng(cfg.model.seed, &format!("shuffle epoch {epoch}"));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let params = store.bind_all(&mut tape)?;
            let mut batch_loss = None;
            for &ix in chunk {
                let item = &train_set[ix];
                let (value, hit, loss) = forward_loss(&model, &mut tape, &params, item)?;
                if !value.is_finite() {
                    eprintln!(
                        "aborting: non-finite training loss {value} at epoch {epoch} on instance {}",
                        item.id
                    );
                    return Err(NumError::NonFinite { op: "training loss" }.into());
                }
                loss_sum += value;
                correct += hit as usize;
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let total = batch_loss.expect("chunks are never empty");
            let mean = tape.scale(total, 1.0 / chunk.len() as f64)?;
            let grads = params.grads(&tape.backward(mean)?)?;
            store.apply_grads(&grads, &adam)?;
        }

        let (dev_acc, _) = evaluate(&model, &store, dev_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            dev_acc,
            seconds: if cfg.fixed_time {
                0.0
            } else {
                start.elapsed().as_secs_f64()
            },
        };
        if let Some((w, path)) = &mut metrics_out {
            let line = serde_json::to_string(&record).map_err(|e| DataError::json(&*path, e))?;
            w.write_all(line.as_bytes())
                .and_then(|_| w.write_all(b"\n"))
                .and_then(|_| w.flush())
                .map_err(|e| DataError::io(&*path, e))?;
        }
        records.push(record);

        if dev_acc > best_dev_acc {
            best_dev_acc = dev_acc;
            best_epoch = epoch;
            best_params = store.clone();
        }
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    if let Some(dir) = &cfg.out_dir {
        save_checkpoint(&dir.join("checkpoint.json"), &cfg.model, &best_params)?;
    }
    Ok(TrainOutcome {
        records,
        best_dev_acc,
        best_epoch,
        initial_loss,
        best_params,
    })
}

fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in predictions {
        let line = serde_json::to_string(p).map_err(|e| DataError::json(path, e))?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))?;
    Ok(())
}

/// Load the datasets named in the config, train, and (with `out_dir` set)
/// write dev predictions under the best parameters.
pub fn run_training(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_path = cfg
        .train_path
        .as_ref()
        .ok_or_else(|| DataError::BadConfig("train_path is required".into()))?;
    let dev_path = cfg
        .dev_path
        .as_ref()
        .ok_or_else(|| DataError::BadConfig("dev_path is required".into()))?;
    let train_insts = load_dataset(train_path)?;
    let dev_insts = load_dataset(dev_path)?;
    let embedder = Embedder::from_specs(&cfg.model.embed)?;
    let train_set = prepare(&train_insts, &cfg.model.graph, &embedder)?;
    let dev_set = prepare(&dev_insts, &cfg.model.graph, &embedder)?;
    let outcome = train(cfg, &train_set, &dev_set)?;
    if let Some(dir) = &cfg.out_dir {
        let embed_dim = embedder.total_dim();
        let model = Model::new(cfg.model.clone(), embed_dim)?;
        let (_, predictions) = evaluate(&model, &outcome.best_params, &dev_set)?;
        write_predictions(&dir.join("predictions.jsonl"), &predictions)?;
    }
    Ok(outcome)
}

fn registry_for(meta: &ModelConfig) -> Result<Registry> {
    let embedder = Embedder::from_specs(&meta.embed)?;
    Ok(Model::new(meta.clone(), embedder.total_dim())?.registry().clone())
}

/// Score a saved checkpoint against a dataset; optionally write per-instance
/// predictions.
pub fn run_eval(
    checkpoint: &Path,
    data_path: &Path,
    out: Option<&Path>,
) -> Result<(f64, Vec<Prediction>)> {
    let (meta, store): (ModelConfig, ParamStore) = load_checkpoint(checkpoint, registry_for)?;
    let embedder = Embedder::from_specs(&meta.embed)?;
    let model = Model::new(meta.clone(), embedder.total_dim())?;
    let instances = load_dataset(data_path)?;
    let data = prepare(&instances, &meta.graph, &embedder)?;
    let (acc, predictions) = evaluate(&model, &store, &data)?;
    if let Some(path) = out {
        write_predictions(path, &predictions)?;
    }
    Ok((acc, predictions))
}

/// Per-candidate hashed bag-of-words feature: token counts over the
/// documents that mention the candidate, scaled to frequencies.
fn bow_features(inst: &Instance, dim: usize) -> Vec<Vec<f64>> {
    let docs: Vec<Vec<String>> = inst
        .supports
        .iter()
        .map(|doc| doc.iter().flatten().map(|t| normalize_token(t)).collect())
        .collect();
    inst.candidates
        .iter()
        .map(|cand| {
            let cand_tokens: Vec<String> =
                cand.split_whitespace().map(normalize_token).collect();
            let mut phi = vec![0.0; dim];
            let mut total = 0usize;
            for doc in &docs {
                let mentioned = !cand_tokens.is_empty()
                    && doc
                        .windows(cand_tokens.len())
                        .any(|w| w == cand_tokens.as_slice());
                if !mentioned {
                    continue;
                }
                for tok in doc {
                    phi[(fnv1a64(tok.as_bytes()) % dim as u64) as usize] += 1.0;
                    total += 1;
                }
            }
            if total > 0 {
                for v in &mut phi {
                    *v /= total as f64;
                }
            }
            phi
        })
        .collect()
}

/// Relational-structure floor: a linear softmax scorer over per-candidate
/// hashed bag-of-words features, trained with plain gradient descent. It
/// sees which words surround each candidate but no cross-document structure.
pub fn bow_baseline_accuracy(
    train: &[Instance],
    dev: &[Instance],
    dim: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    if train.is_empty() || dev.is_empty() {
        return Err(DataError::BadConfig("bag-of-words baseline needs data".into()).into());
    }
    let train_feats: Vec<(Vec<Vec<f64>>, usize)> = train
        .iter()
        .map(|inst| (bow_features(inst, dim), inst.answer_index()))
        .collect();

    let mut rng = keyed_rng(seed, "bow baseline");
    let mut w: Vec<f64> = (0..dim)
        .map(|_| crate::util::uniform_sym(&mut rng, 0.01))
        .collect();
    let score = |w: &[f64], phi: &[f64]| -> f64 { w.iter().zip(phi).map(|(a, b)| a * b).sum() };

    for _ in 0..epochs {
        for (feats, gold) in &train_feats {
            let scores: Vec<f64> = feats.iter().map(|phi| score(&w, phi)).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, phi) in feats.iter().enumerate() {
                let grad = exps[j] / z - (j == *gold) as usize as f64;
                for (wk, pk) in w.iter_mut().zip(phi) {
                    *wk -= lr * grad * pk;
                }
            }
        }
    }

    let mut correct = 0usize;
    for inst in dev {
        let feats = bow_features(inst, dim);
        let scores: Vec<f64> = feats.iter().map(|phi| score(&w, phi)).collect();
        let predicted = (0..scores.len())
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
            .expect("validated: at least one candidate");
        correct += (predicted == inst.answer_index()) as usize;
    }
    Ok(correct as f64 / dev.len() as f64)
}
