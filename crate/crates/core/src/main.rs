//! `otlid` command-line interface.
//!
//! Every subcommand writes its outputs plus a `manifest.json` under the
//! output directory. Exit status is 0 on success, 2 for usage or input
//! errors and 3 for numeric failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use otlid::adapt::{hyper_sweep, initial_model, run_adaptation, sweep_csv, AdaptConfig};
use otlid::data::{load_dataset, synth_domain_pair, write_dataset, BatchSampler, DataFormat, Dataset, DomainTag, SamplerPolicy, SynthSpec};
use otlid::manifest::{sha256_hex, write_atomic, RunManifest};
use otlid::metrics::{det_curve, evaluate, score_dataset};
use otlid::model::{load_checkpoint, pretrain_source, save_checkpoint, AdamState};
use otlid::ot::{OtSolver, SinkhornConfig};
use otlid::project::{mean_same_class_centroid_distance, project_datasets, projection_csv};
use otlid::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "otlid", version, about = "Optimal-transport domain adaptation for language-identification back-ends")]
struct Cli {
    /// Directory for all outputs of the command.
    #[arg(long, global = true, env = "OTLID_OUT_DIR", default_value = "otlid-out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic source/target pair with a known domain shift.
    Synth(SynthArgs),
    /// Source-only training of a back-end (uses `pretrain_epochs`).
    Train(TrainArgs),
    /// Pretrain on the source, then adapt to the unlabeled target.
    Adapt(AdaptArgs),
    /// Score a labeled dataset with a checkpoint and report EER and Cavg.
    Eval(EvalArgs),
    /// One adaptation run per (alpha, beta) cell of a grid.
    Sweep(SweepArgs),
    /// Two-dimensional PCA projection of one or more datasets.
    Project(ProjectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Raw,
}

impl From<FormatArg> for DataFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => DataFormat::Csv,
            FormatArg::Raw => DataFormat::RawF32,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SolverArg {
    Exact,
    Sinkhorn,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    DropLast,
    WrapAround,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// JSON file holding a SynthSpec, or a manifest whose `config` is one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    class_count: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    per_class_count: Option<usize>,
    #[arg(long)]
    class_center_scale: Option<f64>,
    #[arg(long)]
    within_class_stddev: Option<f64>,
    #[arg(long, visible_alias = "rotation")]
    rotation_angle: Option<f64>,
    #[arg(long, visible_alias = "shift")]
    shift_vector_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// File format; inferred from the extension when omitted (.csv, else raw).
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Number of classes; inferred from the source labels when omitted.
    #[arg(long)]
    class_count: Option<usize>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON file holding an AdaptConfig, or a manifest whose `config` is one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    /// Sinkhorn entropic regularization (on max-normalized costs).
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    marginal_tol: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    lda_init: Option<bool>,
    #[arg(long, value_enum)]
    sampler_policy: Option<PolicyArg>,
    #[arg(long)]
    p_target: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    source: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[arg(long)]
    source: PathBuf,
    /// Target embeddings. Labels, if present, are used for evaluation only.
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Also write the transport plan of the last adaptation batch as CSV.
    #[arg(long)]
    dump_plan: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    data_opts: DataArgs,
    #[arg(long, default_value_t = otlid::metrics::DEFAULT_P_TARGET)]
    p_target: f64,
    /// Also write the pooled DET operating points as CSV.
    #[arg(long)]
    det_csv: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated alpha values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    alphas: Vec<f64>,
    /// Comma-separated beta values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    betas: Vec<f64>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    /// Source-domain datasets.
    #[arg(long)]
    source: Vec<PathBuf>,
    /// Target-domain datasets.
    #[arg(long)]
    target: Vec<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Project the model's latents instead of the raw embeddings.
    #[arg(long)]
    model: Option<PathBuf>,
}

/// Reads a JSON config, accepting either the bare value or a run manifest.
fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("command").is_some() {
        value = value.get_mut("config").map(|v| v.take()).unwrap_or_default();
        // sweep manifests nest the shared config under `base`
        if let Some(base) = value.get_mut("base") {
            value = base.take();
        }
    }
    serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl SynthArgs {
    fn spec(&self) -> Result<SynthSpec> {
        let mut spec: SynthSpec = read_config(self.config.as_deref())?;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { spec.$f = v; })* };
        }
        set!(class_count, dim, per_class_count, class_center_scale, within_class_stddev, rotation_angle, shift_vector_norm, seed);
        spec.validate()?;
        Ok(spec)
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<AdaptConfig> {
        let mut cfg: AdaptConfig = read_config(self.config.as_deref())?;
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(alpha, beta, lambda, batch_size, epochs, pretrain_epochs, lr, seed, lda_init, p_target);
        if let Some(d) = self.latent_dim {
            cfg.latent_dim = Some(d);
        }
        if let Some(p) = self.sampler_policy {
            cfg.sampler_policy = match p {
                PolicyArg::DropLast => SamplerPolicy::DropLast,
                PolicyArg::WrapAround => SamplerPolicy::WrapAround,
            };
        }
        match self.solver {
            Some(SolverArg::Exact) => cfg.solver = OtSolver::Exact,
            Some(SolverArg::Sinkhorn) if !matches!(cfg.solver, OtSolver::Sinkhorn(_)) => {
                cfg.solver = OtSolver::Sinkhorn(SinkhornConfig::default());
            }
            _ => {}
        }
        let sinkhorn_flags = self.epsilon.is_some() || self.max_iters.is_some() || self.marginal_tol.is_some();
        match &mut cfg.solver {
            OtSolver::Sinkhorn(s) => {
                if let Some(v) = self.epsilon {
                    s.epsilon = v;
                }
                if let Some(v) = self.max_iters {
                    s.max_iters = v;
                }
                if let Some(v) = self.marginal_tol {
                    s.marginal_tol = v;
                }
            }
            OtSolver::Exact if sinkhorn_flags => {
                return Err(Error::Config("--epsilon, --max-iters and --marginal-tol need --solver sinkhorn".into()));
            }
            OtSolver::Exact => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn format_of(path: &Path, opt: Option<FormatArg>) -> DataFormat {
    opt.map(DataFormat::from).unwrap_or_else(|| DataFormat::from_path(path))
}

fn load(path: &Path, opts: &DataArgs, domain: DomainTag, classes: Option<usize>) -> Result<Dataset> {
    load_dataset(path, format_of(path, opts.format), domain, classes.or(opts.class_count))
}

struct Run {
    out_dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    fn new(out_dir: &Path, command: &str, config: &impl Serialize) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            manifest: RunManifest::new(command, serde_json::to_value(config)?),
            started: Instant::now(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        write_atomic(&path, bytes)?;
        self.manifest.outputs.push(name.into());
        Ok(path)
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        self.manifest.write_atomic(&self.out_dir.join("manifest.json"))
    }
}

fn config_hash(cfg: &impl Serialize) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(cfg)?))
}

fn record_adapt_config(run: &mut Run, cfg: &AdaptConfig) {
    run.manifest.seeds.insert("model".into(), cfg.seed);
    run.manifest.seeds.insert("pretrain_sampler".into(), cfg.pretrain_sampler_seed());
    run.manifest.seeds.insert("adapt_sampler".into(), cfg.adapt_sampler_seed());
    run.manifest.solver = Some(cfg.solver.name().into());
    run.manifest.notes.insert("cavg_rule".into(), otlid::metrics::CAVG_RULE.into());
}

fn cmd_synth(out_dir: &Path, args: &SynthArgs) -> Result<()> {
    let spec = args.spec()?;
    let mut run = Run::new(out_dir, "synth", &spec)?;
    run.manifest.seeds.insert("synth".into(), spec.seed);
    let (source, target) = synth_domain_pair(&spec)?;
    let format = DataFormat::from(args.format);
    let ext = match format {
        DataFormat::Csv => "csv",
        DataFormat::RawF32 => "f32",
    };
    for (name, ds) in [("source", &source), ("target", &target)] {
        let file = format!("{name}.{ext}");
        write_dataset(&run.path(&file), ds, format)?;
        run.manifest.outputs.push(file);
    }
    run.write_json("synth_spec.json", &spec)?;
    println!("wrote {} source and {} target rows to {}", source.len(), target.len(), out_dir.display());
    run.finish()
}

fn cmd_train(out_dir: &Path, args: &TrainArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let mut run = Run::new(out_dir, "train", &cfg)?;
    record_adapt_config(&mut run, &cfg);
    run.manifest.hash_input("source", &args.source)?;
    let source = load(&args.source, &args.data, DomainTag::Source, None)?;

    let mut model = initial_model(&source, &cfg)?;
    let mut adam = AdamState::for_model(&model, cfg.adam());
    let mut sampler = BatchSampler::new(cfg.batch_size, cfg.pretrain_sampler_seed(), cfg.sampler_policy)?;
    let report = pretrain_source(&mut model, &source, cfg.pretrain_epochs, &mut adam, &mut sampler)?;

    save_checkpoint(&run.path("model.ckpt"), &model, cfg.seed, &config_hash(&cfg)?)?;
    run.manifest.outputs.push("model.ckpt".into());
    run.write_json("pretrain.json", &report)?;
    println!(
        "trained {} epochs: source ce {:.4}, accuracy {:.4}",
        cfg.pretrain_epochs, report.final_ce, report.final_accuracy
    );
    run.finish()
}

fn cmd_adapt(out_dir: &Path, args: &AdaptArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let mut run = Run::new(out_dir, "adapt", &cfg)?;
    record_adapt_config(&mut run, &cfg);
    run.manifest.hash_input("source", &args.source)?;
    run.manifest.hash_input("target", &args.target)?;
    let source = load(&args.source, &args.data, DomainTag::Source, None)?;
    let target = load(&args.target, &args.data, DomainTag::Target, Some(source.class_count()))?;

    let result = run_adaptation(&source, &target, &cfg)?;
    let hash = config_hash(&cfg)?;
    save_checkpoint(&run.path("model.ckpt"), &result.model, cfg.seed, &hash)?;
    save_checkpoint(&run.path("baseline.ckpt"), &result.baseline, cfg.seed, &hash)?;
    run.manifest.outputs.extend(["model.ckpt".into(), "baseline.ckpt".into()]);
    run.write("train_log.jsonl", result.log.to_jsonl()?.as_bytes())?;
    run.write_json(
        "report.json",
        &serde_json::json!({
            "before": result.before,
            "after": result.after,
            "source_after": result.source_after,
            "pretrain": result.pretrain,
            "target_label_reads": result.target_label_reads,
            "epoch_mean_ot": result.log.epoch_mean_ot(),
        }),
    )?;
    if args.dump_plan {
        if let Some(plan) = &result.last_plan {
            let mut csv = String::from("i,j,gamma\n");
            for ((i, j), g) in plan.gamma.indexed_iter() {
                if *g != 0.0 {
                    csv.push_str(&format!("{i},{j},{g}\n"));
                }
            }
            run.write("plan.csv", csv.as_bytes())?;
        }
    }
    match (&result.before, &result.after) {
        (Some(b), Some(a)) => println!(
            "target eer {:.4} -> {:.4}, cavg {:.4} -> {:.4}",
            b.eer, a.eer, b.cavg, a.cavg
        ),
        _ => println!("adapted for {} epochs (target unlabeled, no evaluation)", cfg.epochs),
    }
    run.finish()
}

fn cmd_eval(out_dir: &Path, args: &EvalArgs) -> Result<()> {
    let mut run = Run::new(out_dir, "eval", &serde_json::json!({ "p_target": args.p_target }))?;
    run.manifest.notes.insert("cavg_rule".into(), otlid::metrics::CAVG_RULE.into());
    run.manifest.hash_input("model", &args.model)?;
    run.manifest.hash_input("data", &args.data)?;
    let (model, header) = load_checkpoint(&args.model)?;
    run.manifest.seeds.insert("model".into(), header.seed);
    let data = load(&args.data, &args.data_opts, DomainTag::Target, Some(model.class_count()))?;

    let report = evaluate(&model, &data, args.p_target)?;
    run.write_json("eval.json", &report)?;
    if args.det_csv {
        let (targets, nontargets) = score_dataset(&model, &data)?.split();
        let mut csv = String::from("threshold,p_miss,p_fa\n");
        for p in det_curve(&targets, &nontargets)? {
            csv.push_str(&format!("{},{},{}\n", p.threshold, p.p_miss, p.p_fa));
        }
        run.write("det.csv", csv.as_bytes())?;
    }
    println!("eer {:.4}, cavg {:.4}, accuracy {:.4}", report.eer, report.cavg, report.accuracy);
    run.finish()
}

fn cmd_sweep(out_dir: &Path, args: &SweepArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let grid: Vec<(f64, f64)> = args
        .alphas
        .iter()
        .flat_map(|&a| args.betas.iter().map(move |&b| (a, b)))
        .collect();
    let mut run = Run::new(
        out_dir,
        "sweep",
        &serde_json::json!({ "base": cfg, "alphas": args.alphas, "betas": args.betas }),
    )?;
    record_adapt_config(&mut run, &cfg);
    run.manifest.hash_input("source", &args.source)?;
    run.manifest.hash_input("target", &args.target)?;
    let source = load(&args.source, &args.data, DomainTag::Source, None)?;
    let target = load(&args.target, &args.data, DomainTag::Target, Some(source.class_count()))?;

    let rows = hyper_sweep(&source, &target, &grid, &cfg)?;
    run.write("sweep.csv", sweep_csv(&rows).as_bytes())?;
    run.write_json("sweep.json", &rows)?;
    print!("{}", sweep_csv(&rows));
    run.finish()
}

fn cmd_project(out_dir: &Path, args: &ProjectArgs) -> Result<()> {
    if args.source.is_empty() && args.target.is_empty() {
        return Err(Error::Config("give at least one --source or --target dataset".into()));
    }
    let mut run = Run::new(out_dir, "project", &serde_json::json!({ "model": args.model }))?;
    let model = match &args.model {
        Some(path) => {
            run.manifest.hash_input("model", path)?;
            Some(load_checkpoint(path)?.0)
        }
        None => None,
    };
    let classes = model.as_ref().map(|m| m.class_count()).or(args.data.class_count);
    let mut datasets = Vec::new();
    for (k, path) in args.source.iter().enumerate() {
        run.manifest.hash_input(&format!("source{k}"), path)?;
        datasets.push(load(path, &args.data, DomainTag::Source, classes)?);
    }
    for (k, path) in args.target.iter().enumerate() {
        run.manifest.hash_input(&format!("target{k}"), path)?;
        datasets.push(load(path, &args.data, DomainTag::Target, classes)?);
    }
    let refs: Vec<&Dataset> = datasets.iter().collect();
    let rows = project_datasets(&refs, model.as_ref())?;
    run.write("projection.csv", projection_csv(&rows).as_bytes())?;
    if let Some(d) = mean_same_class_centroid_distance(&rows) {
        run.manifest.notes.insert("mean_centroid_distance".into(), d.to_string());
        println!("mean same-class centroid distance {d:.6}");
    }
    run.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(&cli.out_dir, a),
        Command::Train(a) => cmd_train(&cli.out_dir, a),
        Command::Adapt(a) => cmd_adapt(&cli.out_dir, a),
        Command::Eval(a) => cmd_eval(&cli.out_dir, a),
        Command::Sweep(a) => cmd_sweep(&cli.out_dir, a),
        Command::Project(a) => cmd_project(&cli.out_dir, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
