//! Ablation grids: the cross product of graph settings, embedding stacks,
//! width scales, architectures, and convolution on/off, trained in parallel
//! and rendered as one table.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::embed::{EmbedSourceSpec, Embedder};
use crate::error::{DataError, Result};
use crate::graph::{GraphConfig, Instance};
use crate::harness::data::load_dataset;
use crate::harness::train::{prepare, train, RunConfig};
use crate::models::Arch;

fn default_workers() -> usize {
    2
}

/// A grid file: one run template plus the axes to vary. An empty axis means
/// "keep the template's value".
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub run: RunConfig,
    #[serde(default)]
    pub archs: Vec<Arch>,
    /// Convolution stack on/off.
    #[serde(default)]
    pub rgcn: Vec<bool>,
    #[serde(default)]
    pub graphs: Vec<GraphConfig>,
    #[serde(default)]
    pub embeds: Vec<Vec<EmbedSourceSpec>>,
    #[serde(default)]
    pub scales: Vec<u8>,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if self.workers == 0 {
            return Err(DataError::BadConfig("workers must be >= 1".into()).into());
        }
        for &s in &self.scales {
            if !matches!(s, 1 | 2) {
                return Err(
                    DataError::BadConfig(format!("scale must be 1 or 2, got {s}")).into(),
                );
            }
        }
        Ok(())
    }

    fn axis<T: Clone>(listed: &[T], template: &T) -> Vec<T> {
        if listed.is_empty() {
            vec![template.clone()]
        } else {
            listed.to_vec()
        }
    }

    /// The concrete runs, in a fixed order: graphs, then embeddings, then
    /// scales, then architectures, then convolution on/off.
    fn cells(&self) -> Vec<Cell> {
        let m = &self.run.model;
        let mut cells = Vec::new();
        for graph in Self::axis(&self.graphs, &m.graph) {
            for embed in Self::axis(&self.embeds, &m.embed) {
                for scale in Self::axis(&self.scales, &m.scale) {
                    for arch in Self::axis(&self.archs, &m.arch) {
                        for use_rgcn in Self::axis(&self.rgcn, &m.use_rgcn) {
                            let mut cfg = self.run.clone();
                            cfg.model.graph = graph.clone();
                            cfg.model.embed = embed.clone();
                            cfg.model.scale = scale;
                            cfg.model.arch = arch;
                            cfg.model.use_rgcn = use_rgcn;
                            let label = format!(
                                "{}__{}__{}",
                                graph_label(&graph),
                                embed_label(&embed),
                                model_label(arch, use_rgcn, scale)
                            );
                            if let Some(base) = &self.run.out_dir {
                                cfg.out_dir = Some(base.join(&label));
                            }
                            cells.push(Cell { label, cfg });
                        }
                    }
                }
            }
        }
        cells
    }
}

struct Cell {
    label: String,
    cfg: RunConfig,
}

/// Which base relations a graph setting adds.
pub fn graph_label(g: &GraphConfig) -> String {
    let mut s = String::from("base");
    if g.use_reasoning {
        s.push_str("+reason");
    }
    if g.use_sentences {
        s.push_str("+sents");
    }
    s
}

pub fn embed_label(specs: &[EmbedSourceSpec]) -> String {
    specs
        .iter()
        .map(EmbedSourceSpec::name)
        .collect::<Vec<_>>()
        .join("+")
}

pub fn model_label(arch: Arch, use_rgcn: bool, scale: u8) -> String {
    let head = match arch {
        Arch::Entity => "Entity",
        Arch::Path => "Path",
        Arch::Mashup => "Mashup",
    };
    format!(
        "{head}{}{}",
        if use_rgcn { "GCN" } else { "NoGCN" },
        if scale == 2 { "+" } else { "" }
    )
}

/// One finished (or failed) grid cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridResult {
    pub label: String,
    pub graph_label: String,
    pub embed_label: String,
    pub model_label: String,
    pub best_dev_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

fn run_cell(cell: &Cell, train_insts: &[Instance], dev_insts: &[Instance]) -> GridResult {
    let cfg = &cell.cfg;
    let mut result = GridResult {
        label: cell.label.clone(),
        graph_label: graph_label(&cfg.model.graph),
        embed_label: embed_label(&cfg.model.embed),
        model_label: model_label(cfg.model.arch, cfg.model.use_rgcn, cfg.model.scale),
        best_dev_acc: None,
        best_epoch: None,
        error: None,
    };
    let attempt = || -> Result<(f64, usize)> {
        let embedder = Embedder::from_specs(&cfg.model.embed)?;
        let train_set = prepare(train_insts, &cfg.model.graph, &embedder)?;
        let dev_set = prepare(dev_insts, &cfg.model.graph, &embedder)?;
        let outcome = train(cfg, &train_set, &dev_set)?;
        Ok((outcome.best_dev_acc, outcome.best_epoch))
    };
    match attempt() {
        Ok((acc, epoch)) => {
            result.best_dev_acc = Some(acc);
            result.best_epoch = Some(epoch);
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    result
}

/// Train every cell of the grid. Cell failures are recorded, not fatal; the
/// result order matches the cell order regardless of worker count.
pub fn run_grid(spec: &GridSpec) -> Result<Vec<GridResult>> {
    spec.validate()?;
    let train_path = spec
        .run
        .train_path
        .as_ref()
        .ok_or_else(|| DataError::BadConfig("train_path is required".into()))?;
    let dev_path = spec
        .run
        .dev_path
        .as_ref()
        .ok_or_else(|| DataError::BadConfig("dev_path is required".into()))?;
    let train_insts = load_dataset(train_path)?;
    let dev_insts = load_dataset(dev_path)?;

    let cells = spec.cells();
    let slots: Vec<Mutex<Option<GridResult>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..spec.workers.min(cells.len()) {
            scope.spawn(|| loop {
                let ix = next.fetch_add(1, Ordering::Relaxed);
                if ix >= cells.len() {
                    break;
                }
                let result = run_cell(&cells[ix], &train_insts, &dev_insts);
                *slots[ix].lock().unwrap() = Some(result);
            });
        }
    });
    Ok(slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every cell ran"))
        .collect())
}

/// Lay results out as a table: one row per (graph, embedding) pair, one
/// column per model variant, dev accuracy in the cells.
pub fn render_grid(results: &[GridResult]) -> String {
    let mut rows: Vec<(String, String)> = Vec::new();
    let mut cols: Vec<String> = Vec::new();
    for r in results {
        let row = (r.graph_label.clone(), r.embed_label.clone());
        if !rows.contains(&row) {
            rows.push(row);
        }
        if !cols.contains(&r.model_label) {
            cols.push(r.model_label.clone());
        }
    }
    let cell_text = |row: &(String, String), col: &str| -> String {
        let hit = results.iter().find(|r| {
            r.graph_label == row.0 && r.embed_label == row.1 && r.model_label == col
        });
        match hit {
            Some(r) => match (r.best_dev_acc, &r.error) {
                (Some(acc), _) => format!("{acc:.3}"),
                (None, _) => "ERR".to_string(),
            },
            None => "-".to_string(),
        }
    };

    let row_names: Vec<String> = rows
        .iter()
        .map(|(g, e)| format!("{g} / {e}"))
        .collect();
    let name_width = row_names
        .iter()
        .map(String::len)
        .chain(std::iter::once("setting".len()))
        .max()
        .unwrap_or(0);
    let col_widths: Vec<usize> = cols
        .iter()
        .map(|c| {
            rows.iter()
                .map(|row| cell_text(row, c).len())
                .chain(std::iter::once(c.len()))
                .max()
                .unwrap_or(0)
        })
        .collect();

    let mut out = String::new();
    out.push_str(&format!("{:name_width$}", "setting"));
    for (c, w) in cols.iter().zip(&col_widths) {
        out.push_str(&format!("  {c:>w$}"));
    }
    out.push('\n');
    for (row, name) in rows.iter().zip(&row_names) {
        out.push_str(&format!("{name:name_width$}"));
        for (c, w) in cols.iter().zip(&col_widths) {
            out.push_str(&format!("  {:>w$}", cell_text(row, c)));
        }
        out.push('\n');
    }
    out
}
