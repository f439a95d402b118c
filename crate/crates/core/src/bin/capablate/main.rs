//! Command-line front end: dataset generation, pretraining, ablation,
//! evaluation, analysis, baseline comparison and hyperparameter sweeps.
//!
//! Every command writes a `manifest.json` next to its outputs and reports
//! failures as one `error category=<name> message=<text>` line on stderr,
//! with the exit code taken from the error category.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use capablate::analysis::{
    cluster_report, layer_importance, matrix_csv, mds_embed, task_similarity, write_text,
};
use capablate::baselines::{compare, compare_csv, CompareConfig, Method};
use capablate::checkpoint::{load_adapters, load_model, save_adapters, save_model};
use capablate::data::{
    capability_set, default_tokenizer, generate_general_corpus, generate_task, read_corpus,
    read_dataset, write_corpus, write_dataset, DataLayout, Example, GeneralCorpus, Split,
    TaskDataset, TaskKind, CAPABILITY_SET_SIZE,
};
use capablate::eval::{evaluate, task_accuracy, write_reports_csv, EvalSuite, HeldOutTask};
use capablate::lora::LoraAdapterSet;
use capablate::model::TransformerModel;
use capablate::tensor::Scalar;
use capablate::train::{
    ablate, pretrain, rank_sweep_rows, sweep, sweep_csv, PretrainConfig, SweepGrid, SweepRow,
    TrainConfig,
};
use capablate::{util, Error, Result};

use manifest::RunManifest;

/// Default root for data, checkpoints and reports.
const ROOT_ENV: &str = "CAPABLATE_ROOT";

#[derive(Parser, Debug)]
#[command(
    name = "capablate",
    version,
    about = "Low-rank capability ablation on a toy transformer"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Overrides the seed of the command's config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Worker threads for the numeric kernels; 0 lets the runtime decide.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Base directory that relative default paths resolve against.
    #[arg(long, global = true, env = ROOT_ENV, default_value = ".")]
    root: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate task datasets and the general corpus.
    GenData(GenDataArgs),
    /// Train the base model on every task found in the data directory.
    Pretrain(PretrainArgs),
    /// Train adapters that remove one task from a pretrained model.
    Ablate(AblateArgs),
    /// Score a model, optionally with adapters, on one or more tasks.
    Eval(EvalArgs),
    /// Layer importance, task similarity and a 2-D embedding of adapter sets.
    Analyze(AnalyzeArgs),
    /// Compare the adapters against noise-corruption baselines.
    Compare(CompareArgs),
    /// Train one adapter set per grid cell and rank the cells.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Task kind to generate, or `all`.
    #[arg(long, default_value = "all")]
    kind: String,
    /// Examples per task.
    #[arg(long, default_value_t = 600)]
    size: usize,
    /// Approximate size of the general corpus in bytes.
    #[arg(long, default_value_t = 40_000)]
    corpus_bytes: usize,
    /// Output directory; defaults to a directory under the root.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// TOML file with pretraining settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by gen-data; defaults to `<root>/data`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output path; defaults to a file under the root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct TrainOverrides {
    /// TOML file with adapter training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the adapter rank.
    #[arg(long)]
    rank: Option<usize>,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Override the general-text regularizer weight.
    #[arg(long)]
    lambda_textreg: Option<f64>,
    /// Override the adapter norm regularizer weight.
    #[arg(long)]
    lambda_normreg: Option<f64>,
    /// Override the sparsity regularizer weight.
    #[arg(long)]
    lambda_sparsityreg: Option<f64>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Pretrained model; defaults to `<root>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Task to remove.
    #[arg(long)]
    task: String,
    /// Directory written by gen-data; defaults to `<root>/data`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
    /// Keep the final adapters instead of the best dev epoch.
    #[arg(long)]
    no_selection: bool,
    /// Output path; defaults to a file under the root.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Pretrained model; defaults to `<root>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Adapter file to apply.
    #[arg(long)]
    adapters: Option<PathBuf>,
    /// Comma-separated task names; defaults to every generated task.
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<String>,
    /// Data directory holding the tasks and the held-out corpus.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Split the target task is scored on.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Output path; defaults to a file under the root.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Adapter files; labels come from each file's task label.
    #[arg(long, num_args = 1.., required = true)]
    adapters: Vec<PathBuf>,
    /// Output directory; defaults to a directory under the root.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Pretrained model; defaults to `<root>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Adapter file trained on the task.
    #[arg(long)]
    adapters: PathBuf,
    /// Task the adapters were trained to remove.
    #[arg(long)]
    task: String,
    /// Comma-separated baseline methods.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "diffmean,logit-lens,integrated-gradients,probing"
    )]
    methods: Vec<String>,
    /// Directory written by gen-data; defaults to `<root>/data`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Number of components each method may touch.
    #[arg(long)]
    top_k: Option<usize>,
    /// Output path; defaults to a file under the root.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// TOML file listing `ranks`, `lambda_textreg`, `lambda_normreg`,
    /// `lambda_sparsityreg` and `seeds`.
    #[arg(long)]
    grid: PathBuf,
    /// Pretrained model; defaults to `<root>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Task to remove.
    #[arg(long)]
    task: String,
    /// Directory written by gen-data; defaults to `<root>/data`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
    /// Cells trained at once, each in its own process.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Internal: train only this cell and write its row as JSON.
    #[arg(long, hide = true, requires = "cell_out")]
    cell: Option<usize>,
    #[arg(long, hide = true)]
    cell_out: Option<PathBuf>,
    /// Output path; defaults to a file under the root.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            return fail(&Error::Config(
                first.trim_start_matches("error: ").to_string(),
            ));
        }
    };
    if cli.global.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.threads)
            .build_global()
        {
            return fail(&Error::Config(format!("thread pool: {e}")));
        }
    }
    let outcome = match cli.global.precision {
        Precision::F32 => run::<f32>(&cli),
        Precision::F64 => run::<f64>(&cli),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    let cat = e.category();
    let message = e.to_string().replace(['\n', '\r'], " ");
    eprintln!("error category={} message={message}", cat.as_str());
    ExitCode::from(cat.exit_code() as u8)
}

fn run<T: Scalar>(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(g, a),
        Command::Pretrain(a) => cmd_pretrain::<T>(g, a),
        Command::Ablate(a) => cmd_ablate::<T>(g, a),
        Command::Eval(a) => cmd_eval::<T>(g, a),
        Command::Analyze(a) => cmd_analyze::<T>(g, a),
        Command::Compare(a) => cmd_compare::<T>(g, a),
        Command::Sweep(a) => cmd_sweep::<T>(g, a),
    }
}

impl Global {
    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.root.join(default))
    }

    fn data_dir(&self, given: &Option<PathBuf>) -> PathBuf {
        self.path(given, "data")
    }

    fn checkpoint(&self, given: &Option<PathBuf>) -> PathBuf {
        self.path(given, "model.ckpt")
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Input(format!("{} does not exist", path.display())))
    }
}

/// Manifest path for a single-file output.
fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

/// Task names present in a data directory, in canonical order first.
fn discover_tasks(layout: &DataLayout) -> Result<Vec<String>> {
    let mut names: Vec<String> = Vec::new();
    let entries = std::fs::read_dir(&layout.root)
        .map_err(|e| Error::Input(format!("{}: {e}", layout.root.display())))?;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if layout.split_path(&name, Split::Train).is_file() {
            names.push(name);
        }
    }
    names.sort_by_key(|n| {
        let rank = TaskKind::ALL
            .iter()
            .position(|k| k.name() == n)
            .unwrap_or(usize::MAX);
        (rank, n.clone())
    });
    if names.is_empty() {
        return Err(Error::Input(format!(
            "no task datasets under {}",
            layout.root.display()
        )));
    }
    Ok(names)
}

/// Task files and corpus loaded from one data directory, plus their paths
/// for the manifest.
struct Workspace {
    datasets: Vec<TaskDataset>,
    /// Regenerated examples per dataset, disjoint from all of its splits,
    /// on which reported capability scores are measured.
    capability: Vec<Vec<Example>>,
    corpus: GeneralCorpus,
    inputs: Vec<PathBuf>,
}

impl Workspace {
    fn load(dir: &Path) -> Result<Self> {
        let layout = DataLayout::new(dir);
        let names = discover_tasks(&layout)?;
        let mut inputs = Vec::new();
        let mut datasets = Vec::new();
        for n in &names {
            datasets.push(read_dataset(&layout, n)?);
            inputs.extend(Split::ALL.iter().map(|&s| layout.split_path(n, s)));
        }
        let corpus = read_corpus(&layout)?;
        inputs.push(layout.textreg_path());
        inputs.push(layout.eval_path());
        let capability = datasets
            .iter()
            .map(|d| capability_set(d.task_name.parse()?, CAPABILITY_SET_SIZE, d))
            .collect::<Result<_>>()?;
        Ok(Workspace {
            datasets,
            capability,
            corpus,
            inputs,
        })
    }

    fn index(&self, task: &str) -> Result<usize> {
        self.datasets
            .iter()
            .position(|d| d.task_name == task)
            .ok_or_else(|| Error::Input(format!("task {task:?} not found in the data directory")))
    }

    /// Non-target tasks for the capability score. Dev selection reads the
    /// dev splits; test-time reports read the regenerated capability sets.
    fn held_out(&self, target: usize, split: Split) -> Vec<HeldOutTask<'_>> {
        self.datasets
            .iter()
            .zip(&self.capability)
            .enumerate()
            .filter(|(i, _)| *i != target)
            .map(|(_, (d, cap))| HeldOutTask {
                name: &d.task_name,
                examples: match split {
                    Split::Test => cap,
                    s => d.split(s),
                },
            })
            .collect()
    }
}

fn load_train_config(
    g: &Global,
    o: &TrainOverrides,
    inputs: &mut Vec<PathBuf>,
) -> Result<(TrainConfig, Option<String>)> {
    let (mut cfg, snapshot) = match &o.config {
        Some(p) => {
            let text = util::read_string(p)?;
            inputs.push(p.clone());
            (TrainConfig::from_toml(&text)?, Some(text))
        }
        None => (TrainConfig::default(), None),
    };
    if let Some(v) = o.rank {
        cfg.rank = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = o.lambda_textreg {
        cfg.lambda_textreg = v;
    }
    if let Some(v) = o.lambda_normreg {
        cfg.lambda_normreg = v;
    }
    if let Some(v) = o.lambda_sparsityreg {
        cfg.lambda_sparsityreg = v;
    }
    if let Some(v) = g.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok((cfg, snapshot))
}

fn cmd_gen_data(g: &Global, a: &GenDataArgs) -> Result<()> {
    let out_dir = g.data_dir(&a.out_dir);
    let seed = g.seed.unwrap_or(0);
    let kinds: Vec<TaskKind> = if a.kind == "all" {
        TaskKind::ALL.to_vec()
    } else {
        vec![a.kind.parse()?]
    };
    let layout = DataLayout::new(&out_dir);
    let tok = default_tokenizer();
    let mut outputs = Vec::new();
    for k in kinds {
        let ds = generate_task(k, a.size, seed)?;
        ds.check_tokenizer(&tok)?;
        write_dataset(&layout, &ds)?;
        outputs.extend(Split::ALL.iter().map(|&s| layout.split_path(k.name(), s)));
    }
    let corpus = generate_general_corpus(a.corpus_bytes, seed)?;
    write_corpus(&layout, &corpus)?;
    outputs.push(layout.textreg_path());
    outputs.push(layout.eval_path());
    let config = format!(
        "kind = {:?}\nsize = {}\ncorpus_bytes = {}\nseed = {seed}\n",
        a.kind, a.size, a.corpus_bytes
    );
    RunManifest::build("gen-data", config, &[], outputs)?.write(&out_dir.join("manifest.json"))
}

fn cmd_pretrain<T: Scalar>(g: &Global, a: &PretrainArgs) -> Result<()> {
    let ws = Workspace::load(&g.data_dir(&a.data_dir))?;
    let mut inputs = ws.inputs.clone();
    let (mut cfg, snapshot) = match &a.config {
        Some(p) => {
            let text = util::read_string(p)?;
            inputs.push(p.clone());
            let cfg: PretrainConfig = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("pretrain config: {e}")))?;
            (cfg, Some(text))
        }
        None => (PretrainConfig::default(), None),
    };
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = g.seed {
        cfg.seed = v;
        cfg.model.seed = v;
    }
    let tok = default_tokenizer();
    let (model, report) = pretrain::<T>(&cfg, &ws.datasets, &ws.corpus, &tok)?;
    let out = g.checkpoint(&a.out);
    save_model(&model, &out)?;
    let report_path = sibling(&out, ".report.json");
    let report_json = serde_json::to_string_pretty(&report).expect("plain report serializes");
    util::write_bytes(&report_path, report_json)?;
    for (task, acc) in &report.dev_accuracy {
        println!("{task}\tdev_acc={acc:.4}");
    }
    println!("general_ppl={:.4}", report.general_perplexity);
    let config = snapshot.unwrap_or_else(|| toml::to_string(&cfg).expect("flat config serializes"));
    RunManifest::build("pretrain", config, &inputs, vec![out.clone(), report_path])?
        .write(&manifest_path_for(&out))
}

fn cmd_ablate<T: Scalar>(g: &Global, a: &AblateArgs) -> Result<()> {
    let ckpt = g.checkpoint(&a.checkpoint);
    require_file(&ckpt)?;
    let ws = Workspace::load(&g.data_dir(&a.data_dir))?;
    let mut inputs = ws.inputs.clone();
    inputs.push(ckpt.clone());
    let (cfg, snapshot) = load_train_config(g, &a.train, &mut inputs)?;
    let model: TransformerModel<T> = load_model(&ckpt)?;
    let ti = ws.index(&a.task)?;
    let target = &ws.datasets[ti];
    let held = ws.held_out(ti, Split::Dev);
    let suite = EvalSuite {
        target_name: &target.task_name,
        target: &target.dev,
        base_accuracy: task_accuracy(&model, None, &target.dev)?,
        held_out: &held,
        corpus: &ws.corpus.eval,
    };
    let dev = (!a.no_selection).then_some(&suite);
    let (adapters, log) = ablate(&model, target, &ws.corpus.textreg, &cfg, dev)?;
    let out = g.path(&a.out, &format!("adapters/{}.lora", a.task));
    save_adapters(&adapters, &out)?;
    let steps = sibling(&out, ".steps.csv");
    let epochs = sibling(&out, ".epochs.csv");
    log.write_steps_csv(&steps)?;
    log.write_epochs_csv(&epochs)?;
    if let Some(b) = log.best_epoch {
        println!("selected epoch {b}");
    }
    let config = snapshot.unwrap_or_else(|| cfg.to_toml());
    RunManifest::build("ablate", config, &inputs, vec![out.clone(), steps, epochs])?
        .write(&manifest_path_for(&out))
}

fn cmd_eval<T: Scalar>(g: &Global, a: &EvalArgs) -> Result<()> {
    let ckpt = g.checkpoint(&a.checkpoint);
    require_file(&ckpt)?;
    let ws = Workspace::load(&g.data_dir(&a.data_dir))?;
    let mut inputs = ws.inputs.clone();
    inputs.push(ckpt.clone());
    let model: TransformerModel<T> = load_model(&ckpt)?;
    let adapters: Option<LoraAdapterSet<T>> = match &a.adapters {
        Some(p) => {
            inputs.push(p.clone());
            Some(load_adapters(p, Some(model.config()))?)
        }
        None => None,
    };
    let names: Vec<String> = if a.tasks.is_empty() {
        ws.datasets.iter().map(|d| d.task_name.clone()).collect()
    } else {
        a.tasks.clone()
    };
    let split = Split::from(a.split);
    let mut reports = Vec::new();
    for name in &names {
        let ti = ws.index(name)?;
        let d = &ws.datasets[ti];
        let held = ws.held_out(ti, split);
        let suite = EvalSuite {
            target_name: &d.task_name,
            target: d.split(split),
            base_accuracy: task_accuracy(&model, None, d.split(split))?,
            held_out: &held,
            corpus: &ws.corpus.eval,
        };
        let r = evaluate(&model, adapters.as_ref(), &suite)?;
        println!(
            "{}\tacc={:.4}\taccd={:.4}\tppl={:.4}\tcap={:.4}",
            r.task_name, r.accuracy, r.accuracy_drop, r.perplexity, r.overall_capability
        );
        reports.push(r);
    }
    let out = g.path(&a.out, "eval.csv");
    write_reports_csv(&out, &reports)?;
    let config = format!(
        "tasks = {:?}\nsplit = {:?}\nadapters = {}\n",
        names,
        split.name(),
        a.adapters.is_some()
    );
    RunManifest::build("eval", config, &inputs, vec![out.clone()])?.write(&manifest_path_for(&out))
}

fn cmd_analyze<T: Scalar>(g: &Global, a: &AnalyzeArgs) -> Result<()> {
    let out_dir = g.path(&a.out_dir, "analysis");
    let mut sets: Vec<LoraAdapterSet<T>> = Vec::new();
    for p in &a.adapters {
        sets.push(load_adapters(p, None)?);
    }
    let mut outputs = Vec::new();
    let mut names = Vec::new();
    for (p, set) in a.adapters.iter().zip(&sets) {
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| set.task_label().to_string());
        let imp = layer_importance(set);
        let csv_path = out_dir.join(format!("importance_{stem}.csv"));
        let svg_path = out_dir.join(format!("importance_{stem}.svg"));
        util::write_bytes(&csv_path, imp.to_csv()?)?;
        write_text(&svg_path, &imp.to_svg(&format!("layer importance: {stem}")))?;
        println!("{stem}\tpeak_layer={}", imp.peak_layer);
        outputs.push(csv_path);
        outputs.push(svg_path);
        names.push(stem);
    }
    if sets.len() >= 2 {
        let labelled: Vec<(&str, &LoraAdapterSet<T>)> =
            names.iter().map(String::as_str).zip(&sets).collect();
        let sim = task_similarity(&labelled)?;
        let dist = sim.distances();
        let sim_path = out_dir.join("similarity.csv");
        let dist_path = out_dir.join("distances.csv");
        util::write_bytes(&sim_path, sim.to_csv()?)?;
        util::write_bytes(&dist_path, matrix_csv(&names, &dist)?)?;
        outputs.push(sim_path);
        outputs.push(dist_path);
        let emb = mds_embed(&names, &dist)?;
        let mds_csv = out_dir.join("mds.csv");
        let mds_svg = out_dir.join("mds.svg");
        util::write_bytes(&mds_csv, emb.to_csv()?)?;
        write_text(&mds_svg, &emb.to_svg("task similarity (classical MDS)"))?;
        outputs.push(mds_csv);
        outputs.push(mds_svg);
        let labels: Vec<&str> = sets.iter().map(|s| s.task_label()).collect();
        let cluster = cluster_report(&dist, &labels)?;
        let cluster_path = out_dir.join("clusters.json");
        util::write_bytes(
            &cluster_path,
            serde_json::to_string_pretty(&cluster).expect("plain report serializes"),
        )?;
        outputs.push(cluster_path);
        println!("mds_stress={:.6}", emb.stress);
    }
    let config = format!("adapters = {:?}\n", a.adapters);
    RunManifest::build("analyze", config, &a.adapters, outputs)?
        .write(&out_dir.join("manifest.json"))
}

fn cmd_compare<T: Scalar>(g: &Global, a: &CompareArgs) -> Result<()> {
    let ckpt = g.checkpoint(&a.checkpoint);
    require_file(&ckpt)?;
    require_file(&a.adapters)?;
    let ws = Workspace::load(&g.data_dir(&a.data_dir))?;
    let mut inputs = ws.inputs.clone();
    inputs.push(ckpt.clone());
    inputs.push(a.adapters.clone());
    let model: TransformerModel<T> = load_model(&ckpt)?;
    let adapters: LoraAdapterSet<T> = load_adapters(&a.adapters, Some(model.config()))?;
    let methods: Vec<Method> = a.methods.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    let mut cfg = CompareConfig::default();
    if let Some(k) = a.top_k {
        cfg.top_k = k;
    }
    if let Some(s) = g.seed {
        cfg.noise_seed = s;
        cfg.probe.seed = s;
    }
    let ti = ws.index(&a.task)?;
    let d = &ws.datasets[ti];
    let held_dev = ws.held_out(ti, Split::Dev);
    let held_test = ws.held_out(ti, Split::Test);
    let dev = EvalSuite {
        target_name: &d.task_name,
        target: &d.dev,
        base_accuracy: task_accuracy(&model, None, &d.dev)?,
        held_out: &held_dev,
        corpus: &ws.corpus.eval,
    };
    let test = EvalSuite {
        target_name: &d.task_name,
        target: &d.test,
        base_accuracy: task_accuracy(&model, None, &d.test)?,
        held_out: &held_test,
        corpus: &ws.corpus.eval,
    };
    let rows = compare(&model, &adapters, &d.train, &dev, &test, &methods, &cfg)?;
    for r in &rows {
        println!(
            "{}\taccd={:.4}\tppl={:.4}\tcap={:.4}\tproduct={:.4}",
            r.method, r.accuracy_drop, r.perplexity, r.capability, r.product
        );
    }
    let out = g.path(&a.out, &format!("compare_{}.csv", a.task));
    util::write_bytes(&out, compare_csv(&rows)?)?;
    let config = toml::to_string(&cfg).expect("flat config serializes");
    RunManifest::build("compare", config, &inputs, vec![out.clone()])?
        .write(&manifest_path_for(&out))
}

fn cmd_sweep<T: Scalar>(g: &Global, a: &SweepArgs) -> Result<()> {
    let ckpt = g.checkpoint(&a.checkpoint);
    require_file(&ckpt)?;
    let grid_text = util::read_string(&a.grid)?;
    let grid = SweepGrid::from_toml(&grid_text)?;
    let ws = Workspace::load(&g.data_dir(&a.data_dir))?;
    let mut inputs = ws.inputs.clone();
    inputs.push(ckpt.clone());
    inputs.push(a.grid.clone());
    let (base, _) = load_train_config(g, &a.train, &mut inputs)?;
    let model: TransformerModel<T> = load_model(&ckpt)?;
    let ti = ws.index(&a.task)?;
    let target = &ws.datasets[ti];
    let held = ws.held_out(ti, Split::Dev);
    let suite = EvalSuite {
        target_name: &target.task_name,
        target: &target.dev,
        base_accuracy: task_accuracy(&model, None, &target.dev)?,
        held_out: &held,
        corpus: &ws.corpus.eval,
    };
    let cells = grid.cells(&base);

    if let Some(i) = a.cell {
        let cell = cells
            .get(i)
            .ok_or_else(|| Error::Config(format!("cell {i} outside a grid of {}", cells.len())))?;
        let rows = sweep(
            &model,
            target,
            &ws.corpus.textreg,
            cell,
            &SweepGrid::default(),
            &suite,
        )?;
        let path = a.cell_out.as_ref().expect("clap enforces cell_out");
        return util::write_bytes(path, serde_json::to_vec(&rows[0]).expect("row serializes"));
    }

    let out = g.path(&a.out, &format!("sweep_{}.csv", a.task));
    let rows = if a.jobs <= 1 {
        sweep(&model, target, &ws.corpus.textreg, &base, &grid, &suite)?
    } else {
        run_cells_in_subprocesses(a, &cells, &out)?
    };
    util::write_bytes(&out, sweep_csv(&rows)?)?;
    for (i, r) in rows.iter().enumerate() {
        match r.product() {
            Some(p) => println!("{i}\trank={}\tproduct={p:.4}", r.config.rank),
            None => println!("{i}\trank={}\tfailed", r.config.rank),
        }
    }
    RunManifest::build("sweep", grid_text, &inputs, vec![out.clone()])?
        .write(&manifest_path_for(&out))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs every cell as a child invocation of this binary, `jobs` at a time,
/// and collects their rows. Each child writes its row under `<out>.cells/`.
fn run_cells_in_subprocesses(
    a: &SweepArgs,
    cells: &[TrainConfig],
    out: &Path,
) -> Result<Vec<SweepRow>> {
    let exe = std::env::current_exe().map_err(|e| io_err(Path::new("current_exe"), e))?;
    let scratch = sibling(out, ".cells");
    std::fs::create_dir_all(&scratch).map_err(|e| io_err(&scratch, e))?;
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    if let Some(pos) = args.iter().position(|s| s == "--jobs") {
        args.drain(pos..(pos + 2).min(args.len()));
    }
    args.retain(|s| !s.starts_with("--jobs="));

    let mut rows: Vec<Option<SweepRow>> = vec![None; cells.len()];
    let mut running: Vec<(usize, PathBuf, std::process::Child)> = Vec::new();
    let mut next = 0;
    while next < cells.len() || !running.is_empty() {
        while next < cells.len() && running.len() < a.jobs {
            let cell_out = scratch.join(format!("cell{next}.json"));
            let child = std::process::Command::new(&exe)
                .args(&args)
                .arg("--cell")
                .arg(next.to_string())
                .arg("--cell-out")
                .arg(&cell_out)
                .stdout(std::process::Stdio::null())
                .spawn()
                .map_err(|e| io_err(&exe, e))?;
            running.push((next, cell_out, child));
            next += 1;
        }
        let (i, cell_out, mut child) = running.remove(0);
        let status = child.wait().map_err(|e| io_err(&exe, e))?;
        let parsed = if status.success() {
            serde_json::from_slice::<SweepRow>(&util::read_bytes(&cell_out)?)
                .map_err(|e| format!("unreadable cell output: {e}"))
        } else {
            Err(format!("cell process exited with {status}"))
        };
        rows[i] = Some(parsed.unwrap_or_else(|error| SweepRow {
            config: cells[i].clone(),
            report: None,
            error: Some(error),
        }));
    }
    let mut rows: Vec<SweepRow> = rows
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect();
    rank_sweep_rows(&mut rows);
    Ok(rows)
}
