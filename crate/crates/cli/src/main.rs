//! Command-line front end: graph building, synthetic data, training,
//! evaluation, ablation grids, and corpus statistics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hopgraph::graph::{deserialize_graph, graph_stats, serialize_graph};
use hopgraph::harness::{
    gen_synthetic, load_dataset, render_grid, run_eval, run_grid, run_training, save_dataset,
    GridSpec, RunConfig, SyntheticSpec,
};
use hopgraph::{build_graph, DataError, Error, GraphConfig, GraphError, Result};

#[derive(Parser)]
#[command(name = "hopgraph", version, about = "Relational graphs and gated graph convolutions for multihop answer selection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build one relational graph per instance and write them to a directory.
    BuildGraphs {
        /// Line-delimited JSON instances.
        instances: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Add reasoning-entity nodes and their relations.
        #[arg(long)]
        reason: bool,
        /// Add sentence nodes and their relations.
        #[arg(long)]
        sents: bool,
    },
    /// Generate a synthetic multihop dataset from a spec file.
    GenSynthetic {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model as described by a run config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Record 0.0 wall seconds in metrics so reruns are byte-identical.
        #[arg(long)]
        fixed_time: bool,
    },
    /// Score a checkpoint against a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write per-instance predictions here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every cell of an ablation grid and print the result table.
    Grid {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Summarize a directory of serialized graphs.
    Stats { graph_dir: PathBuf },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(|e| DataError::json(path, e))?)
}

/// Instance ids become file names; keep only characters safe for that.
fn file_slug(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn build_graphs(instances: &Path, out: &Path, reason: bool, sents: bool) -> Result<()> {
    let data = load_dataset(instances)?;
    let config = GraphConfig {
        use_reasoning: reason,
        use_sentences: sents,
        ..GraphConfig::default()
    };
    std::fs::create_dir_all(out).map_err(|e| DataError::io(out, e))?;
    let mut edges = 0usize;
    for inst in &data {
        let graph = build_graph(inst, &config)?;
        edges += graph.edges.len();
        let path = out.join(format!("{}.graph.json", file_slug(&inst.id)));
        std::fs::write(&path, serialize_graph(&graph)).map_err(|e| DataError::io(&path, e))?;
    }
    println!(
        "built {} graphs ({} edges) into {}",
        data.len(),
        edges,
        out.display()
    );
    Ok(())
}

fn gen_synthetic_cmd(spec_path: &Path, out: &Path) -> Result<()> {
    let spec: SyntheticSpec = read_json(spec_path)?;
    let data = gen_synthetic(&spec)?;
    save_dataset(out, &data)?;
    println!("wrote {} instances to {}", data.len(), out.display());
    Ok(())
}

fn train_cmd(config_path: &Path, fixed_time: bool) -> Result<()> {
    let mut cfg: RunConfig = read_json(config_path)?;
    if fixed_time {
        cfg.fixed_time = true;
    }
    let outcome = run_training(&cfg)?;
    println!(
        "best dev accuracy {:.4} at epoch {} ({} epochs run)",
        outcome.best_dev_acc,
        outcome.best_epoch,
        outcome.records.len()
    );
    if let Some(dir) = &cfg.out_dir {
        println!("metrics, checkpoint, predictions under {}", dir.display());
    }
    Ok(())
}

fn eval_cmd(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let (acc, predictions) = run_eval(checkpoint, data, out)?;
    println!("accuracy {:.4} over {} instances", acc, predictions.len());
    Ok(())
}

fn grid_cmd(spec_path: &Path) -> Result<()> {
    let spec: GridSpec = read_json(spec_path)?;
    let results = run_grid(&spec)?;
    print!("{}", render_grid(&results));
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.label.as_str())
        .collect();
    if !failed.is_empty() {
        eprintln!("failed cells: {}", failed.join(", "));
    }
    Ok(())
}

fn stats_cmd(dir: &Path) -> Result<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DataError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().ends_with(".graph.json")))
        .collect();
    paths.sort();
    let mut graphs = Vec::with_capacity(paths.len());
    for path in &paths {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let graph = deserialize_graph(&text).map_err(|e| match e {
            GraphError::BadGraphFile { what, .. } => GraphError::BadGraphFile {
                path: path.display().to_string(),
                what,
            },
            other => other,
        })?;
        graphs.push(graph);
    }
    print!("{}", graph_stats(&graphs)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::BuildGraphs { instances, out, reason, sents } => {
            build_graphs(&instances, &out, reason, sents)
        }
        Cmd::GenSynthetic { spec, out } => gen_synthetic_cmd(&spec, &out),
        Cmd::Train { config, fixed_time } => train_cmd(&config, fixed_time),
        Cmd::Eval { checkpoint, data, out } => eval_cmd(&checkpoint, &data, out.as_deref()),
        Cmd::Grid { spec } => grid_cmd(&spec),
        Cmd::Stats { graph_dir } => stats_cmd(&graph_dir),
    }
}

fn main() -> ExitCode {
    // Usage problems are validation errors (exit 1); help/version exit 0.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(Error::exit_code(&e) as u8)
        }
    }
}
