mod config;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use demoret::container::{merge_containers, read_container, write_container, HiddenStateContainer};
use demoret::eval::{
    clusters_to_tsv, evaluate_retriever, generate_synthetic, layer_sweep, read_clusters, sweep_driver, ClusterMap,
    SweepParam,
};
use demoret::index::{build_index, load_index, save_index};
use demoret::model::{init_model, load_checkpoint, ModelConfig};
use demoret::proxy::{build_label_set, read_label_set, write_label_set};
use demoret::train::{train_loop, FINAL_CHECKPOINT};
use demoret::Error;
use log::info;
use serde::de::{value, DeserializeOwned, IntoDeserializer};

use config::RunConfig;

const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Parser, Debug)]
#[command(name = "demoret", version, about = "Train and query a layer-mixing demonstration retriever")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where outputs go and where inputs are looked up by default.
    #[arg(long, global = true, env = "DEMORET_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Top-level seed; label, init, shuffle and synth seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// -v for progress, -vv for per-step detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check container files and print a summary of each.
    Validate {
        #[arg(required = true)]
        containers: Vec<PathBuf>,
    },
    /// Generate planted-cluster train/dev containers.
    Synth(SynthArgs),
    /// Compute proxy positives and negatives for every training example.
    Label {
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        proxy: ProxyArgs,
    },
    /// Train the retriever on a label file.
    Train {
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Embed a candidate corpus with a checkpoint.
    Index {
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
    },
    /// Retrieve top-k demonstrations for every record of a query container.
    Retrieve {
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
    },
    /// Score retrievals against the proxy oracle.
    Eval {
        /// Retrieve with raw per-layer states instead of a checkpoint.
        #[arg(long)]
        layer_sweep: bool,
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        proxy: ProxyArgs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
    },
    /// Label, train and evaluate once per value of one hyperparameter.
    Sweep {
        /// n_pos, batch_size or target_mode.
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. `10,20,40` or `query_only,problem_plus_query`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        proxy: ProxyArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
    },
}

#[derive(Args, Debug, Default)]
struct InputArgs {
    /// Training/candidate containers (repeat or comma-separate to merge).
    #[arg(long, value_delimiter = ',')]
    train: Vec<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Query container for `retrieve` (defaults to the dev container).
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    /// `id<TAB>cluster` file for cluster recall.
    #[arg(long)]
    clusters: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct ProxyArgs {
    #[arg(long)]
    n_pos: Option<usize>,
    #[arg(long)]
    n_neg: Option<usize>,
    /// problem_plus_query or query_only.
    #[arg(long, value_parser = enum_value::<demoret::container::TargetMode>)]
    target_mode: Option<demoret::container::TargetMode>,
    #[arg(long, value_parser = enum_value::<demoret::container::Pooling>)]
    target_pooling: Option<demoret::container::Pooling>,
    /// Layer id of the target states (default: middle kept layer).
    #[arg(long)]
    target_layer: Option<u16>,
    /// Proxy-score similarity: dot or cosine.
    #[arg(long, value_parser = enum_value::<demoret::nn::Similarity>)]
    proxy_similarity: Option<demoret::nn::Similarity>,
    /// uniform or hard.
    #[arg(long, value_parser = enum_value::<demoret::proxy::NegativeSampling>)]
    negatives: Option<demoret::proxy::NegativeSampling>,
    #[arg(long)]
    allow_corpus_limited: Option<bool>,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Problem-state pooling: mean or eos.
    #[arg(long, value_parser = enum_value::<demoret::container::Pooling>)]
    pooling: Option<demoret::container::Pooling>,
    /// relu or gelu.
    #[arg(long, value_parser = enum_value::<demoret::nn::Activation>)]
    activation: Option<demoret::nn::Activation>,
    /// Comma-separated subset of the container's layer ids.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<u16>>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    normalize_embeddings: Option<bool>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct RetrievalArgs {
    #[arg(short, long)]
    k: Option<usize>,
    /// none, ood, in_domain or exclude_self.
    #[arg(long, value_parser = enum_value::<demoret::index::FilterMode>)]
    filter: Option<demoret::index::FilterMode>,
    /// Retrieval similarity: dot or cosine.
    #[arg(long, value_parser = enum_value::<demoret::nn::Similarity>)]
    similarity: Option<demoret::nn::Similarity>,
}

#[derive(Args, Debug, Default)]
struct SynthArgs {
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    train_per_cluster: Option<usize>,
    #[arg(long)]
    dev_queries: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    layer_stride: Option<u16>,
    /// Row index of the layer carrying the cluster signal.
    #[arg(long)]
    informative_layer: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    distractor_scale: Option<f64>,
    #[arg(long)]
    schemas: Option<usize>,
}

/// Parses a snake_case enum name through its serde representation.
fn enum_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    T::deserialize(IntoDeserializer::<value::Error>::into_deserializer(s)).map_err(|e| e.to_string())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl InputArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let p = &mut cfg.paths;
        if !self.train.is_empty() {
            p.train = self.train;
        }
        for (slot, v) in [
            (&mut p.dev, self.dev),
            (&mut p.queries, self.queries),
            (&mut p.labels, self.labels),
            (&mut p.checkpoint, self.checkpoint),
            (&mut p.index, self.index),
            (&mut p.clusters, self.clusters),
        ] {
            if v.is_some() {
                *slot = v;
            }
        }
    }
}

impl ProxyArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let p = &mut cfg.proxy;
        set(&mut p.n_pos, self.n_pos);
        set(&mut p.n_neg, self.n_neg);
        set(&mut p.target_mode, self.target_mode);
        set(&mut p.target_pooling, self.target_pooling);
        if self.target_layer.is_some() {
            p.target_layer = self.target_layer;
        }
        set(&mut p.similarity, self.proxy_similarity);
        set(&mut p.negative_sampling, self.negatives);
        set(&mut p.allow_corpus_limited, self.allow_corpus_limited);
    }
}

impl ModelArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let m = &mut cfg.model;
        set(&mut m.hidden_dim, self.hidden_dim);
        set(&mut m.embed_dim, self.embed_dim);
        set(&mut m.pooling, self.pooling);
        set(&mut m.activation, self.activation);
        if self.layers.is_some() {
            m.layers = self.layers;
        }
    }
}

impl TrainArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.total_steps, self.steps);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.temperature, self.temperature);
        set(&mut t.checkpoint_every, self.checkpoint_every);
        set(&mut t.normalize_embeddings, self.normalize_embeddings);
        let o = &mut t.optimizer;
        set(&mut o.lr, self.lr);
        set(&mut o.weight_decay, self.weight_decay);
        set(&mut o.beta1, self.beta1);
        set(&mut o.beta2, self.beta2);
        set(&mut o.epsilon, self.epsilon);
    }
}

impl RetrievalArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let r = &mut cfg.retrieval;
        set(&mut r.k, self.k);
        set(&mut r.filter, self.filter);
        set(&mut r.similarity, self.similarity);
    }
}

impl SynthArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let s = &mut cfg.synth;
        set(&mut s.clusters, self.clusters);
        set(&mut s.train_per_cluster, self.train_per_cluster);
        set(&mut s.dev_queries, self.dev_queries);
        set(&mut s.dim, self.dim);
        set(&mut s.n_layers, self.n_layers);
        set(&mut s.layer_stride, self.layer_stride);
        set(&mut s.informative_layer, self.informative_layer);
        set(&mut s.snr, self.snr);
        set(&mut s.distractor_scale, self.distractor_scale);
        set(&mut s.schemas, self.schemas);
    }
}

/// Resolved configuration plus the output directory.
struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn or_default(&self, path: &Option<PathBuf>, name: &str) -> PathBuf {
        path.clone().unwrap_or_else(|| self.out_file(name))
    }

    fn train_paths(&self) -> Vec<PathBuf> {
        if self.cfg.paths.train.is_empty() {
            vec![self.out_file("train.dtrv")]
        } else {
            self.cfg.paths.train.clone()
        }
    }

    fn train_container(&self) -> demoret::Result<HiddenStateContainer> {
        match self.train_paths().as_slice() {
            [one] => read_container(one),
            many => merge_containers(many),
        }
    }

    fn dev_container(&self) -> demoret::Result<HiddenStateContainer> {
        read_container(self.or_default(&self.cfg.paths.dev, "dev.dtrv"))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.cfg
            .paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT))
    }

    /// Explicit cluster files must exist; the default one is optional.
    fn clusters(&self) -> demoret::Result<Option<ClusterMap>> {
        match &self.cfg.paths.clusters {
            Some(p) => read_clusters(p).map(Some),
            None => {
                let p = self.out_file("clusters.tsv");
                if p.exists() {
                    read_clusters(p).map(Some)
                } else {
                    Ok(None)
                }
            }
        }
    }

    /// Applies the configured layer subset, if any.
    fn select(&self, c: HiddenStateContainer) -> demoret::Result<HiddenStateContainer> {
        match &self.cfg.model.layers {
            Some(layers) if *layers != c.header().layer_ids => c.select_layers(layers),
            _ => Ok(c),
        }
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> demoret::Result<PathBuf> {
        let path = self.out_file(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn echo_config(&self, command: &str) -> demoret::Result<()> {
        self.write(&format!("{command}.config.toml"), self.cfg.to_toml()?)?;
        Ok(())
    }
}

/// Reduces `c` to the checkpoint's layers when it carries more.
fn fit_to_model(c: HiddenStateContainer, model: &ModelConfig) -> demoret::Result<HiddenStateContainer> {
    if c.header().layer_ids != model.layer_ids && model.layer_ids.iter().all(|l| c.header().layer_index(*l).is_some()) {
        c.select_layers(&model.layer_ids)
    } else {
        Ok(c)
    }
}

fn validate(paths: &[PathBuf]) -> Result<()> {
    for path in paths {
        let c = read_container(path)?;
        let h = c.header();
        let join = |v: Vec<String>| if v.is_empty() { "none".to_string() } else { v.join(",") };
        let layers: Vec<String> = h.layer_ids.iter().map(u16::to_string).collect();
        let poolings: Vec<String> = h.poolings().iter().map(ToString::to_string).collect();
        let targets: Vec<String> = [
            demoret::container::TargetMode::ProblemPlusQuery,
            demoret::container::TargetMode::QueryOnly,
        ]
        .into_iter()
        .filter(|m| h.has_target(*m))
        .map(|m| m.to_string())
        .collect();
        println!(
            "ok\t{}\trecords={}\tlayers={}\tdim={}\tpooling={}\ttargets={}",
            path.display(),
            c.len(),
            join(layers),
            h.dim,
            join(poolings),
            join(targets)
        );
    }
    Ok(())
}

fn synth(run: &Run) -> Result<()> {
    let data = generate_synthetic(&run.cfg.synth)?;
    run.echo_config("synth")?;
    let train = run.out_file("train.dtrv");
    let dev = run.out_file("dev.dtrv");
    write_container(&data.train, &train)?;
    write_container(&data.dev, &dev)?;
    run.write("clusters.tsv", clusters_to_tsv(&data.clusters))?;
    println!("wrote {} train and {} dev records to {}", data.train.len(), data.dev.len(), run.out.display());
    Ok(())
}

fn label(run: &Run) -> Result<()> {
    let corpus = run.train_container()?;
    let labels = build_label_set(&corpus, &run.cfg.proxy)?;
    run.echo_config("label")?;
    let path = run.or_default(&run.cfg.paths.labels, "labels.json");
    write_label_set(&labels, &path)?;
    if labels.corpus_limited {
        log::warn!("corpus of {} records is smaller than n_pos + n_neg + 1", corpus.len());
    }
    println!("wrote labels for {} anchors to {}", labels.anchors.len(), path.display());
    Ok(())
}

fn train(run: &Run) -> Result<()> {
    let corpus = run.select(run.train_container()?)?;
    let labels = read_label_set(run.or_default(&run.cfg.paths.labels, "labels.json"))?;
    let model_cfg = run.cfg.model.settings().for_container(&corpus);
    let model = init_model(&model_cfg, run.cfg.seed)?;
    run.echo_config("train")?;
    let dir = run.out.join(CHECKPOINT_DIR);
    let (_, report) = train_loop(model, &corpus, &labels, &run.cfg.train, Some(&dir))?;
    println!(
        "trained {} steps, final loss {:.6}, {:.1}s; checkpoints in {}",
        report.final_step,
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.wall_clock_secs,
        dir.display()
    );
    Ok(())
}

fn index(run: &Run) -> Result<()> {
    let (model, _) = load_checkpoint(run.checkpoint_path())?;
    let corpus = fit_to_model(run.train_container()?, model.config())?;
    let index = build_index(&model, &corpus, run.cfg.retrieval.similarity)?;
    run.echo_config("index")?;
    let path = run.or_default(&run.cfg.paths.index, "index.dtri");
    save_index(&index, &path)?;
    println!("indexed {} candidates ({}) to {}", index.len(), index.similarity(), path.display());
    Ok(())
}

fn retrieve(run: &Run) -> Result<()> {
    let index = load_index(run.or_default(&run.cfg.paths.index, "index.dtri"))?;
    let (model, _) = load_checkpoint(run.checkpoint_path())?;
    if index.model_digest() != &model.config().digest() {
        return Err(Error::Compatibility("index was built with a different model configuration".into()).into());
    }
    let queries_path = run
        .cfg
        .paths
        .queries
        .clone()
        .unwrap_or_else(|| run.or_default(&run.cfg.paths.dev, "dev.dtrv"));
    let queries = fit_to_model(read_container(&queries_path)?, model.config())?;
    let embeddings = model.embed_batch(queries.records())?;
    let filters: Vec<_> = queries
        .records()
        .iter()
        .map(|q| run.cfg.retrieval.filter.for_query(&q.id, &q.schema_id))
        .collect();
    let results = index.retrieve_batch(&embeddings, run.cfg.retrieval.k, &filters)?;
    run.echo_config("retrieve")?;
    let mut table = String::from("query_id\trank\tid\tscore\n");
    for (q, res) in queries.records().iter().zip(&results) {
        for (rank, hit) in res.hits.iter().enumerate() {
            let _ = writeln!(table, "{}\t{}\t{}\t{}", q.id, rank + 1, hit.id, hit.score);
        }
    }
    run.write("retrievals.tsv", &table)?;
    print!("{table}");
    Ok(())
}

fn eval(run: &Run, sweep_layers: bool) -> Result<()> {
    let clusters = run.clusters()?;
    let options = run.cfg.eval_options();
    if sweep_layers {
        let train = run.select(run.train_container()?)?;
        let dev = run.select(run.dev_container()?)?;
        let sweep = layer_sweep(&train, &dev, run.cfg.model.pooling, &options, clusters.as_ref())?;
        run.echo_config("eval")?;
        let table = sweep.to_tsv();
        run.write("layer_sweep.tsv", &table)?;
        run.write("layer_sweep.json", to_json(&sweep)?)?;
        print!("{table}");
        if let Some(best) = sweep.best_layer() {
            println!("best layer: {best}");
        }
        return Ok(());
    }
    let (model, _) = load_checkpoint(run.checkpoint_path())?;
    let train = fit_to_model(run.train_container()?, model.config())?;
    let dev = fit_to_model(run.dev_container()?, model.config())?;
    let metrics = evaluate_retriever(&model, &train, &dev, &options, clusters.as_ref())?;
    run.echo_config("eval")?;
    let table = metrics.to_tsv();
    run.write("metrics.tsv", &table)?;
    run.write("metrics.json", to_json(&metrics)?)?;
    print!("{table}");
    Ok(())
}

fn sweep(run: &Run, param: &str, values: &[String]) -> Result<()> {
    let param = SweepParam::parse(param)?;
    let train = run.select(run.train_container()?)?;
    let dev = run.select(run.dev_container()?)?;
    let clusters = run.clusters()?;
    let table = sweep_driver(param, values, &run.cfg.experiment(), &train, &dev, clusters.as_ref())?;
    run.echo_config("sweep")?;
    let name = param.name();
    run.write(&format!("sweep_{name}.tsv"), table.to_tsv())?;
    run.write(&format!("sweep_{name}_timing.tsv"), table.timing_tsv())?;
    print!("{}", table.to_tsv());
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let out = cli
        .output_dir
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("demoret-out"));
    cfg.output_dir = Some(out.clone());

    let action = match cli.command {
        Command::Validate { containers } => return validate(&containers),
        Command::Synth(a) => {
            a.apply(&mut cfg);
            Action::Synth
        }
        Command::Label { inputs, proxy } => {
            inputs.apply(&mut cfg);
            proxy.apply(&mut cfg);
            Action::Label
        }
        Command::Train { inputs, model, train } => {
            inputs.apply(&mut cfg);
            model.apply(&mut cfg);
            train.apply(&mut cfg);
            Action::Train
        }
        Command::Index { inputs, retrieval } => {
            inputs.apply(&mut cfg);
            retrieval.apply(&mut cfg);
            Action::Index
        }
        Command::Retrieve { inputs, retrieval } => {
            inputs.apply(&mut cfg);
            retrieval.apply(&mut cfg);
            Action::Retrieve
        }
        Command::Eval {
            layer_sweep,
            inputs,
            model,
            proxy,
            retrieval,
        } => {
            inputs.apply(&mut cfg);
            model.apply(&mut cfg);
            proxy.apply(&mut cfg);
            retrieval.apply(&mut cfg);
            Action::Eval { layer_sweep }
        }
        Command::Sweep {
            param,
            values,
            inputs,
            model,
            proxy,
            train,
            retrieval,
        } => {
            inputs.apply(&mut cfg);
            model.apply(&mut cfg);
            proxy.apply(&mut cfg);
            train.apply(&mut cfg);
            retrieval.apply(&mut cfg);
            Action::Sweep { param, values }
        }
    };
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    info!("output directory {}", out.display());
    let run = Run { cfg, out };
    match action {
        Action::Synth => synth(&run),
        Action::Label => label(&run),
        Action::Train => train(&run),
        Action::Index => index(&run),
        Action::Retrieve => retrieve(&run),
        Action::Eval { layer_sweep } => eval(&run, layer_sweep),
        Action::Sweep { param, values } => sweep(&run, &param, &values),
    }
}

/// A subcommand whose flags have been folded into the run config.
enum Action {
    Synth,
    Label,
    Train,
    Index,
    Retrieve,
    Eval { layer_sweep: bool },
    Sweep { param: String, values: Vec<String> },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = match err.downcast_ref::<Error>() {
                Some(e) => format!("{}: {e}", e.kind()),
                None => format!("{err:#}"),
            };
            eprintln!("error: {}", line.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

