use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use lsnn::codec::parse_key_values;
use lsnn::data::{generate, Dataset, GeneratorConfig, Mnist, Split, Task};
use lsnn::equiv::run_equivalence;
use lsnn::model::{init_network, ModelKind, Network, NetworkObjective};
use lsnn::train::gradcheck::{grad_check, GradCheckOptions};
use lsnn::train::{evaluate, train, TrainConfig};
use lsnn::viz::{heatmaps, save_heatmaps};
use lsnn::{Error, Rng, Tensor};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK: u8 = 3;

const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "lsnn", version, about = "Locally smoothed neural networks on MNIST variants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test datasets for a task.
    Gen(GenArgs),
    /// Train one model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of a model.
    Gradcheck(GradcheckArgs),
    /// Check the convolution and locally connected reductions.
    Equiv(EquivArgs),
    /// Export smoother heatmaps as PGM images.
    Viz(VizArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    task: Task,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory with the four uncompressed MNIST IDX files.
    #[arg(long, default_value = "data/mnist")]
    data: PathBuf,
    /// Output directory; receives train.lsds and test.lsds.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    /// key=value generator overrides.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: ModelKind,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// key=value training overrides (epochs, batch_size, lr, momentum, seed, eval_every).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or a single .lsds file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    model: ModelKind,
    #[arg(long, default_value = "cluttered")]
    task: Task,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    /// Multiplies analytic gradients; anything but 1 should fail.
    #[arg(long, default_value_t = 1.0, hide = true)]
    gradient_scale: f64,
}

#[derive(Args)]
struct EquivArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    instances: usize,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or a single .lsds file.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated sample indices.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    indices: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Failure with a chosen exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Config(_)) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn usage(msg: String) -> Failure {
    Failure { code: EXIT_USAGE, error: anyhow::anyhow!(msg) }
}

type CmdResult = Result<(), Failure>;

fn read_pairs(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_key_values(&text)?)
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let mut pairs = vec![("task".to_string(), a.task.to_string()), ("seed".to_string(), a.seed.to_string())];
    if let Some(p) = &a.config {
        pairs.extend(read_pairs(p)?);
    }
    let mut cfg = GeneratorConfig::from_pairs(&pairs)?;
    if cfg.task != a.task {
        return Err(usage(format!("config task {} contradicts --task {}", cfg.task, a.task)));
    }
    cfg.train_count = a.train_count.unwrap_or(cfg.train_count);
    cfg.test_count = a.test_count.unwrap_or(cfg.test_count);
    let mnist = Mnist::load(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for split in [Split::Train, Split::Test] {
        let ds = generate(&cfg, &mnist, split)?;
        let path = a.out.join(format!("{}.lsds", split.name()));
        ds.save(&path)?;
        let counts: Vec<String> = ds.class_counts().iter().map(|c| c.to_string()).collect();
        println!("{} {} samples={} class_counts={}", path.display(), split.name(), ds.len(), counts.join(","));
    }
    Ok(())
}

fn dataset_path(data: &Path, split: Split) -> PathBuf {
    if data.is_dir() {
        data.join(format!("{}.lsds", split.name()))
    } else {
        data.to_path_buf()
    }
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        cfg.apply(&read_pairs(p)?)?;
    }
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.base_lr = a.lr.unwrap_or(cfg.base_lr);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.validate()?;
    let train_set = load_dataset(&dataset_path(&a.data, Split::Train))?;
    let test_path = a.data.join("test.lsds");
    let test_set = if a.data.is_dir() && test_path.is_file() { Some(load_dataset(&test_path)?) } else { None };
    let task = train_set.task();
    let mut net = init_network(a.model, task, cfg.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let stem = format!("{task}-{}", a.model);
    fs::write(a.out.join(format!("{stem}.config")), cfg.to_text()).context("writing config")?;
    let log_path = a.out.join(format!("{stem}.log"));
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut tee = Tee(&mut log, std::io::stdout());
    let history = train(&mut net, &train_set, test_set.as_ref().map(|d| d as _), &cfg, &mut tee)?;
    let ckpt = a.out.join(format!("{stem}.ckpt"));
    net.save(&ckpt, Some(task))?;
    match history.last_eval().or(history.last_train()) {
        Some(r) => println!("final {task} {} error={} checkpoint={}", a.model, r.error, ckpt.display()),
        None => return Err(anyhow::anyhow!("training produced no records").into()),
    }
    Ok(())
}

struct Tee<'a, A: Write, B: Write>(&'a mut A, B);

impl<A: Write, B: Write> Write for Tee<'_, A, B> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.write_all(buf)?;
        self.1.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.flush()?;
        self.1.flush()
    }
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Network> {
    Ok(Network::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?.0)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let mut net = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&dataset_path(&a.data, Split::Test))?;
    let e = evaluate(&mut net, &ds, a.batch_size)?;
    println!("loss={} error={} predictions={}", e.loss, e.error, e.predictions);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let mut rng = Rng::new(a.seed);
    let mut net = init_network(a.model, a.task, a.seed)?;
    // move the smoothers off their symmetric start so every term is exercised
    for p in net.params_mut() {
        if p.name.contains("bias") || p.name.ends_with(".gaussian") {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.uniform(-0.1, 0.1));
        }
    }
    let (h, w) = net.config().in_hw;
    let images = Tensor::from_fn(&[2, 1, h, w], |_| rng.uniform(0.0, 1.0))?;
    let labels: Vec<Vec<u8>> = (0..2).map(|_| (0..a.task.arity()).map(|_| rng.below(10) as u8).collect()).collect();
    let refs: Vec<&[u8]> = labels.iter().map(Vec::as_slice).collect();
    let targets = net.targets(&refs)?;
    let mut obj = NetworkObjective { net, images, targets };
    let opts = GradCheckOptions {
        samples: Some(a.samples),
        seed: a.seed,
        gradient_scale: a.gradient_scale,
        ..Default::default()
    };
    let report = grad_check(&mut obj, &opts)?;
    println!(
        "model={} checked={} skipped={} max_rel_err={:e} mean_rel_err={:e}",
        a.model,
        report.entries.len(),
        report.skipped,
        report.max_rel_err(),
        report.mean_rel_err()
    );
    if report.passes(GRADCHECK_TOL) {
        println!("PASS");
        return Ok(());
    }
    for e in report.worst(5) {
        println!(
            "  {}[{}] analytic={:e} numeric={:e} rel_err={:e}",
            e.tensor, e.index, e.analytic, e.numeric, e.rel_err
        );
    }
    Err(Failure { code: EXIT_CHECK, error: anyhow::anyhow!("gradient check failed at tolerance {GRADCHECK_TOL:e}") })
}

fn cmd_equiv(a: EquivArgs) -> CmdResult {
    let r = run_equivalence(a.seed, a.instances)?;
    let worst = |v: &[(u64, f64)]| v.iter().map(|x| x.1).fold(0.0, f64::max);
    println!("ones-vs-conv instances={} max_abs_diff={:e}", r.ones_vs_conv.len(), worst(&r.ones_vs_conv));
    println!("rank1-local-vs-free instances={} max_abs_diff={:e}", r.rank1_vs_free.len(), worst(&r.rank1_vs_free));
    println!(
        "rank2-local-vs-best-rank1 weight_residual={:e} output_residual={:e}",
        r.rank2.weight_residual, r.rank2.output_residual
    );
    let failures = r.failures();
    if failures.is_empty() {
        println!("PASS");
        return Ok(());
    }
    for f in &failures {
        println!("  {f}");
    }
    Err(Failure { code: EXIT_CHECK, error: anyhow::anyhow!("{} equivalence failures", failures.len()) })
}

fn cmd_viz(a: VizArgs) -> CmdResult {
    let mut net = load_checkpoint(&a.checkpoint)?;
    if !net.config().model.is_lsnn() {
        return Err(usage(format!("viz needs an lsnn-* checkpoint, got {}", net.config().model)));
    }
    let ds = load_dataset(&dataset_path(&a.data, Split::Test))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for &i in &a.indices {
        let sample = ds
            .samples
            .get(i)
            .ok_or_else(|| usage(format!("index {i} out of range for {} samples", ds.len())))?;
        let maps = heatmaps(&mut net, &sample.pixels)?;
        let files = save_heatmaps(&a.out, &format!("sample{i:05}"), &maps)?;
        println!("sample {i}: wrote {} images", files.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Equiv(a) => cmd_equiv(a),
        Command::Viz(a) => cmd_viz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
