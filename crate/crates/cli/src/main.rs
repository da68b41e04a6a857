use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use timme_core::checkpoint::{read_checkpoint, write_checkpoint};
use timme_core::config::ExperimentConfig;
use timme_core::experiment::{
    build_model, cross_relation, evaluate, link_probability, predictions, prepare, train, write_embeddings,
    write_predictions, Dataset,
};
use timme_core::graph::{load_counts, ThresholdRange};
use timme_core::io::write_string;
use timme_core::metrics::geo_aggregate;
use timme_core::model::lambda_readout;
use timme_core::split::save_labels;
use timme_core::synth::{generate, write_dataset, SynthConfig};

mod manifest;

use manifest::Manifest;

const RUN_CONFIG: &str = "run.conf";
const CHECKPOINT: &str = "model.ckpt";

#[derive(Parser)]
#[command(name = "timme", version, about = "Multi-relational GCN with multi-task decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-partition dataset and a config that points at it.
    Generate(GenerateArgs),
    /// Train a model and write its checkpoint, log, and test metrics.
    Train(TrainArgs),
    /// Recompute test metrics for a finished run.
    Evaluate(EvaluateArgs),
    /// Export class probabilities, embeddings, or single link probabilities.
    Predict(PredictArgs),
    /// Relation weights and regional aggregates for a finished run.
    Report(ReportArgs),
    /// Train one single-relation model per relation and score every
    /// relation's test set with each.
    Crossrel(ExperimentArgs),
    /// Keep seeds plus nodes whose follow count falls in a range.
    Filter(FilterArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    nodes: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 3)]
    relations: usize,
    #[arg(long, default_value_t = 0.05)]
    intra: f64,
    #[arg(long, default_value_t = 0.005)]
    inter: f64,
    #[arg(long, default_value_t = 0.1)]
    label_fraction: f64,
    #[arg(long, default_value_t = 0.8)]
    overlap: f64,
}

/// Settings shared by commands that build an experiment from a config.
#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// single_class, single_link(NAME), timme, or hierarchical.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated relation names to keep.
    #[arg(long)]
    relations: Option<String>,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    settings: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
}

#[derive(Args)]
struct RunArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Task {
    All,
    Classification,
    Links,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Metrics to report; asking for a task the run did not train is an error.
    #[arg(long, value_enum, default_value_t = Task::All)]
    task: Task,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Class probability table; defaults to `<run>/predictions.tsv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write final-layer embeddings here.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Print the probability of one link, given as `SRC,RELATION,DST`.
    #[arg(long)]
    link: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Region file; defaults to the one named in the run config.
    #[arg(long)]
    regions: Option<PathBuf>,
    /// Write only the λ relation weights (hierarchical runs only).
    #[arg(long)]
    lambda: bool,
    /// Write only the regional aggregate.
    #[arg(long)]
    geo: bool,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    config: PathBuf,
    /// Count range such as `[50,inf)`, `(1,5]`, or `{inf}`.
    #[arg(long)]
    range: String,
    /// Follow-count file; defaults to `counts` from the config.
    #[arg(long)]
    counts: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let path = fs::canonicalize(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg = ExperimentConfig::load(&path)?;
    let cwd = std::env::current_dir()?;
    for kv in &args.settings {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim(), &cwd)?;
    }
    if let Some(mode) = &args.mode {
        cfg.set("mode", mode, &cwd)?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string(), &cwd)?;
    }
    if let Some(epochs) = args.epochs {
        cfg.set("epochs", &epochs.to_string(), &cwd)?;
    }
    if let Some(rel) = &args.relations {
        cfg.set("relations", rel, &cwd)?;
    }
    if let Some(out) = &args.out {
        cfg.set("out_dir", &out.display().to_string(), &cwd)?;
    }
    Ok(cfg)
}

fn input_files(cfg: &ExperimentConfig) -> Vec<PathBuf> {
    let d = &cfg.data;
    let mut files = d.edges.clone();
    files.extend(
        [&d.node_map, &d.seeds, &d.labels, &d.features, &d.regions, &d.counts]
            .into_iter()
            .flatten()
            .cloned(),
    );
    files
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_string(path, &text)?;
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_nodes: args.nodes,
        blocks: args.blocks,
        relations: args.relations,
        intra_p: args.intra,
        inter_p: args.inter,
        label_fraction: args.label_fraction,
        overlap: args.overlap,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let data = generate(&cfg)?;
    let conf = write_dataset(&data, &args.out, args.seed)?;
    write_json(&args.out.join("blocks.json"), &data.blocks)?;
    let edges: Vec<usize> = (0..data.graph.num_relations()).map(|r| data.graph.num_edges(r)).collect();
    println!(
        "wrote {} nodes, edges per relation {:?}, {} labels; config {}",
        data.graph.num_nodes(),
        edges,
        data.labels.len(),
        conf.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(&args.experiment)?;
    let out = cfg
        .out_dir
        .clone()
        .context("no output directory (pass --out or set out_dir)")?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = Manifest::start("train", &cfg, &input_files(&cfg))?;

    let data = Dataset::load(&cfg.data)?;
    let model = build_model(&data, &cfg.train)?;
    let prep = prepare(&data, model.mode(), cfg.train.seed)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let outcome = train(&model, &data, &prep, &cfg.train, |entry| {
        let line = serde_json::to_string(entry).map_err(|e| timme_core::Error::Invalid(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| timme_core::Error::Invalid(format!("writing training log: {e}")))
    })?;
    log.flush()?;
    drop(log);

    write_string(&out.join(RUN_CONFIG), &cfg.to_conf_string())?;
    write_checkpoint(&out.join(CHECKPOINT), &outcome.params)?;
    let report = evaluate(&model, &data, &prep, &outcome.params)?;
    write_json(&out.join("metrics.json"), &report)?;
    let summary = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.log.len(),
    });
    write_json(&out.join("summary.json"), &summary)?;
    for name in [RUN_CONFIG, CHECKPOINT, "train_log.jsonl", "metrics.json", "summary.json"] {
        manifest.artifact(&out.join(name))?;
    }
    manifest.finish(&out.join("manifest.json"))?;

    if let Some(c) = &report.classification {
        println!("test accuracy {:.4}  macro-F1 {:.4}", c.accuracy, c.macro_f1);
    }
    for l in &report.links {
        println!("{}: ROC-AUC {:.4}  PR-AUC {:.4}", l.relation, l.roc_auc, l.pr_auc);
    }
    println!("best epoch {} of {}; outputs in {}", outcome.best_epoch, outcome.log.len(), out.display());
    Ok(())
}

/// A finished run: its config, data, model, and parameters.
struct Run {
    data: Dataset,
    model: timme_core::model::Model,
    prep: timme_core::experiment::Prepared,
    params: timme_core::autodiff::ParameterStore,
}

fn open_run(dir: &Path) -> Result<Run> {
    let cfg = ExperimentConfig::load(&dir.join(RUN_CONFIG))
        .with_context(|| format!("{} does not look like a training run", dir.display()))?;
    let data = Dataset::load(&cfg.data)?;
    let model = build_model(&data, &cfg.train)?;
    let params = read_checkpoint(&dir.join(CHECKPOINT))?;
    model.check_params(&data.features, &params)?;
    let prep = prepare(&data, model.mode(), cfg.train.seed)?;
    Ok(Run {
        data,
        model,
        prep,
        params,
    })
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let run = open_run(&args.run.run)?;
    let mut report = evaluate(&run.model, &run.data, &run.prep, &run.params)?;
    match args.task {
        Task::All => {}
        Task::Classification => {
            if report.classification.is_none() {
                bail!("run was trained as {} and has no classifier", report.mode);
            }
            report.links.clear();
        }
        Task::Links => {
            if report.links.is_empty() {
                bail!("run was trained as {} and has no link heads", report.mode);
            }
            report.classification = None;
        }
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let run = open_run(&args.run.run)?;
    let inference = run.model.infer(&run.prep.norm, &run.data.features, &run.params)?;
    if let Some(spec) = &args.link {
        let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
        let [src, rel, dst] = parts[..] else {
            bail!("--link expects SRC,RELATION,DST");
        };
        let g = &run.data.graph;
        let node = |id: &str| g.nodes().index_of(id).with_context(|| format!("unknown node {id:?}"));
        let r = g.relation_index(rel).with_context(|| format!("unknown relation {rel:?}"))?;
        let p = link_probability(&inference, &run.params, r, node(src)?, node(dst)?)?;
        println!("{p}");
        return Ok(());
    }
    let out = args.out.clone().unwrap_or_else(|| args.run.run.join("predictions.tsv"));
    let preds = predictions(&inference)?;
    write_predictions(&out, &run.data.graph, &preds)?;
    println!("wrote {} predictions to {}", preds.len(), out.display());
    if let Some(path) = &args.embeddings {
        write_embeddings(path, &run.data.graph, &inference.embeddings)?;
        println!("wrote embeddings to {}", path.display());
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let dir = &args.run.run;
    let run = open_run(dir)?;
    let inference = run.model.infer(&run.prep.norm, &run.data.features, &run.params)?;
    let everything = !args.lambda && !args.geo;
    if everything {
        write_json(&dir.join("alphas.json"), &inference.alphas)?;
        println!("wrote {}", dir.join("alphas.json").display());
    }
    if args.lambda || (everything && run.model.mode().is_hierarchical()) {
        let lambda: serde_json::Map<String, serde_json::Value> = lambda_readout(&inference, run.data.relation_names())?
            .into_iter()
            .map(|(name, w)| (name, w.into()))
            .collect();
        write_json(&dir.join("lambda.json"), &lambda)?;
        println!("wrote {}", dir.join("lambda.json").display());
    }
    if args.geo || everything {
        let regions = match &args.regions {
            Some(path) => Some(timme_core::metrics::load_regions(path, run.data.graph.nodes())?),
            None => run.data.regions.clone(),
        };
        let Some(regions) = regions else {
            if args.geo {
                bail!("no region file (pass --regions or set regions in the config)");
            }
            return Ok(());
        };
        let preds = match predictions(&inference) {
            Ok(p) => p,
            Err(e) if args.geo => return Err(e.into()),
            Err(_) => return Ok(()),
        };
        let labels: Vec<(usize, u8)> = preds.iter().map(|p| (p.node, p.label)).collect();
        let stats = geo_aggregate(&labels, &regions)?;
        write_json(&dir.join("geo.json"), &stats)?;
        let mut tsv = String::from("region\tusers\tliberal_fraction\tbin\n");
        for s in &stats {
            let frac = s.liberal_fraction.map_or("N/A".to_string(), |f| format!("{f:.4}"));
            let bin = s.bin.map_or("N/A".to_string(), |b| b.to_string());
            tsv.push_str(&format!("{}\t{}\t{frac}\t{bin}\n", s.region, s.users));
        }
        write_string(&dir.join("geo.tsv"), &tsv)?;
        println!("wrote {} regions to {}", stats.len(), dir.join("geo.tsv").display());
    }
    Ok(())
}

fn cmd_crossrel(args: &ExperimentArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let out = cfg
        .out_dir
        .clone()
        .context("no output directory (pass --out or set out_dir)")?;
    fs::create_dir_all(&out)?;
    let mut manifest = Manifest::start("crossrel", &cfg, &input_files(&cfg))?;
    let data = Dataset::load(&cfg.data)?;
    let table = cross_relation(&data, &cfg.train)?;
    write_json(&out.join("crossrel.json"), &table)?;
    let text = table.to_text();
    write_string(&out.join("crossrel.txt"), &text)?;
    manifest.artifact(&out.join("crossrel.json"))?;
    manifest.artifact(&out.join("crossrel.txt"))?;
    manifest.finish(&out.join("manifest.json"))?;
    print!("{text}");
    Ok(())
}

fn cmd_filter(args: &FilterArgs) -> Result<()> {
    let path = fs::canonicalize(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let cfg = ExperimentConfig::load(&path)?;
    let data = Dataset::load(&cfg.data)?;
    let counts_path = args
        .counts
        .clone()
        .or_else(|| cfg.data.counts.clone())
        .context("no follow-count file (pass --counts or set counts)")?;
    let counts = load_counts(&counts_path, data.graph.nodes())?;
    let range: ThresholdRange = args.range.parse()?;
    let sub = timme_core::graph::filter_subgroup(&data.graph, &counts, &range)?;

    let out = &args.out;
    fs::create_dir_all(out)?;
    let g = &sub.graph;
    g.nodes().save(&out.join("nodes.tsv"))?;
    let edge_files = g.save_edge_lists(out)?;
    g.save_seeds(&out.join("seeds.txt"))?;
    let mut remap = vec![None; data.graph.num_nodes()];
    for (new, &old) in sub.kept.iter().enumerate() {
        remap[old] = Some(new);
    }
    let mut conf = ExperimentConfig {
        train: cfg.train.clone(),
        ..ExperimentConfig::default()
    };
    conf.data.edges = edge_files;
    conf.data.node_map = Some(out.join("nodes.tsv"));
    conf.data.seeds = Some(out.join("seeds.txt"));
    let labels: Vec<(usize, u8)> = data
        .labels
        .iter()
        .filter_map(|&(i, l)| remap[i].map(|n| (n, l)))
        .collect();
    if cfg.data.labels.is_some() {
        save_labels(&out.join("labels.tsv"), g.nodes(), &labels)?;
        conf.data.labels = Some(out.join("labels.tsv"));
    }
    if let Some(regions) = &data.regions {
        let text: String = sub
            .kept
            .iter()
            .filter_map(|&old| regions[old].as_ref().map(|r| format!("{}\t{r}\n", data.graph.nodes().id(old))))
            .collect();
        write_string(&out.join("regions.tsv"), &text)?;
        conf.data.regions = Some(out.join("regions.tsv"));
    }
    write_string(&out.join("timme.conf"), &conf.to_conf_string())?;
    println!(
        "kept {} of {} nodes ({} labeled); config {}",
        g.num_nodes(),
        data.graph.num_nodes(),
        labels.len(),
        out.join("timme.conf").display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Report(a) => cmd_report(a),
        Command::Crossrel(a) => cmd_crossrel(a),
        Command::Filter(a) => cmd_filter(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
