use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use meim::data::{
    build_filter_index, load_dataset, load_triples, write_cache, FilterIndex, Split, Triple,
};
use meim::eval::{evaluate, EvalOptions, TiePolicy};
use meim::model::{
    count_params, CoreMode, Direction, ModelConfig, ModelParams, NormMode, Sampling,
};
use meim::objective::{build_targets, gradient_audit, LossWeights};
use meim::train::{load_checkpoint, Preset, RunConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "meim",
    version,
    about = "Train and evaluate MEIM link-prediction models"
)]
#[command(subcommand_required = true, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a dataset directory and write its binary triple cache.
    Preprocess {
        #[arg(long)]
        data_dir: PathBuf,
        /// Output file (default: <data-dir>/triples.bin).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (default: the one recorded in the checkpoint).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum)]
        tie_policy: Option<TieArg>,
        /// Also write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print the number of embedding and core parameters.
    ParamCount {
        /// Take vocabulary sizes from this dataset.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        entities: Option<usize>,
        #[arg(long)]
        relations: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients on a tiny random model.
    GradCheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 7)]
        entities: usize,
        #[arg(long, default_value_t = 3)]
        relations: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Args, Clone, Default)]
struct ModelArgs {
    /// Named hyperparameter set: wn18rr, fb15k-237 or yago3-10.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    ce: Option<usize>,
    #[arg(long)]
    cr: Option<usize>,
    #[arg(long, value_enum)]
    core_mode: Option<CoreModeArg>,
    #[arg(long, value_enum)]
    sampling: Option<SamplingArg>,
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    #[arg(long)]
    input_dropout: Option<f64>,
    #[arg(long)]
    hidden_dropout: Option<f64>,
    #[arg(long)]
    lambda_ortho: Option<f64>,
    #[arg(long)]
    lambda_unitnorm: Option<f64>,
    #[arg(long)]
    p_norm: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<u64>,
    /// Best checkpoint path; the latest state is kept at <path>.last.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Validate every N epochs (0 disables validation).
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long, value_enum)]
    tie_policy: Option<TieArg>,
    /// JSON-lines metrics log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a checkpoint; --epochs is the new total.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CoreModeArg {
    Shared,
    Independent,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingArg {
    #[value(name = "1vsall")]
    OneVsAll,
    #[value(name = "kvsall")]
    KVsAll,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Off,
    Flattened,
    PerPartition,
}

#[derive(Clone, Copy, ValueEnum)]
enum TieArg {
    Optimistic,
    Average,
    Pessimistic,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<TieArg> for TiePolicy {
    fn from(t: TieArg) -> Self {
        match t {
            TieArg::Optimistic => TiePolicy::Optimistic,
            TieArg::Average => TiePolicy::Average,
            TieArg::Pessimistic => TiePolicy::Pessimistic,
        }
    }
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

impl ModelArgs {
    fn preset(&self) -> Result<Option<Preset>> {
        self.preset
            .as_deref()
            .map(str::parse)
            .transpose()
            .map_err(Into::into)
    }

    /// Applies every flag that was given on top of `m`.
    fn apply(&self, m: &mut ModelConfig) {
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = self.$field { m.$field = v; } )* };
        }
        set!(
            k,
            ce,
            cr,
            input_dropout,
            hidden_dropout,
            lambda_ortho,
            lambda_unitnorm,
            p_norm,
            seed
        );
        if let Some(c) = self.core_mode {
            m.core_mode = match c {
                CoreModeArg::Shared => CoreMode::Shared,
                CoreModeArg::Independent => CoreMode::Independent,
            };
        }
        if let Some(s) = self.sampling {
            m.sampling = match s {
                SamplingArg::OneVsAll => Sampling::OneVsAll,
                SamplingArg::KVsAll => Sampling::KVsAll,
            };
        }
        if let Some(n) = self.norm {
            m.norm = match n {
                NormArg::Off => NormMode::Off,
                NormArg::Flattened => NormMode::Flattened,
                NormArg::PerPartition => NormMode::PerPartition,
            };
        }
    }
}

fn default_run(entities: usize, relations: usize, data_dir: &Path) -> RunConfig {
    RunConfig::new(ModelConfig::new(entities, relations, 3, 100, 100), data_dir)
}

fn preprocess(data_dir: &Path, output: Option<PathBuf>) -> Result<()> {
    let store = load_triples(data_dir)?;
    let out = output.unwrap_or_else(|| data_dir.join("triples.bin"));
    write_cache(&store, &out)?;
    println!(
        "{} entities, {} relations, {}/{}/{} train/valid/test triples -> {}",
        store.num_entities(),
        store.num_relations(),
        store.train.len(),
        store.valid.len(),
        store.test.len(),
        out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let (mut cfg, resume) = match &args.resume {
        Some(path) => {
            let ckpt =
                load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            (ckpt.config.clone(), Some(ckpt))
        }
        None => {
            let dir = args.data_dir.clone().context("--data-dir is required")?;
            (default_run(0, 0, &dir), None)
        }
    };
    if let Some(dir) = &args.data_dir {
        cfg.data_dir = dir.clone();
    }
    let store = load_dataset(&cfg.data_dir)
        .with_context(|| format!("loading {}", cfg.data_dir.display()))?;
    if resume.is_none() {
        cfg.model.num_entities = store.num_entities();
        cfg.model.num_relations = store.num_relations();
        if let Some(p) = args.model.preset()? {
            p.apply(&mut cfg);
        }
    } else if args.model.preset.is_some() {
        bail!("--preset cannot be combined with --resume");
    }
    args.model.apply(&mut cfg.model);
    if let Some(v) = args.lr {
        cfg.schedule.base_lr = v;
    }
    if let Some(v) = args.lr_decay {
        cfg.schedule.decay = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = args.tie_policy {
        cfg.tie_policy = v.into();
    }
    if args.checkpoint.is_some() {
        cfg.checkpoint = args.checkpoint.clone();
    }
    if args.log.is_some() {
        cfg.log_path = args.log.clone();
    }

    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(ckpt, cfg, store)?,
        None => Trainer::new(cfg, store)?,
    };
    eprintln!(
        "training {} parameters from epoch {} to {}",
        count_params(&trainer.config.model),
        trainer.epoch,
        trainer.config.epochs
    );
    trainer.run(|e| {
        let val = e
            .val_mrr
            .map_or(String::new(), |m| format!(" val_mrr {m:.4}"));
        eprintln!(
            "epoch {:>5} lr {:.3e} loss {:.5} ortho {:.5}{val}",
            e.epoch, e.lr, e.train_loss, e.ortho_loss
        );
    })?;
    if trainer.best_mrr.is_finite() {
        println!("best validation MRR {:.4}", trainer.best_mrr);
    }
    if !trainer.store.test.is_empty() {
        let best = trainer
            .best
            .clone()
            .unwrap_or_else(|| trainer.params.clone());
        let filter = build_filter_index(&trainer.store, &Split::ALL);
        let opts = EvalOptions {
            tie_policy: trainer.config.tie_policy,
            ..Default::default()
        };
        let report = evaluate(&best, &trainer.store, Split::Test, &filter, &opts)?;
        println!("test metrics of the retained model:");
        print!("{}", report.table(Some(&trainer.store.relations)));
    }
    Ok(())
}

fn eval(
    checkpoint: &Path,
    data_dir: Option<PathBuf>,
    split: SplitArg,
    tie: Option<TieArg>,
    json: Option<PathBuf>,
) -> Result<()> {
    let ckpt =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let dir = data_dir.unwrap_or_else(|| ckpt.config.data_dir.clone());
    let store = load_dataset(&dir).with_context(|| format!("loading {}", dir.display()))?;
    if store.num_entities() != ckpt.params.config.num_entities
        || store.num_relations() != ckpt.params.config.num_relations
    {
        bail!("dataset vocabulary does not match the checkpoint");
    }
    let filter = build_filter_index(&store, &Split::ALL);
    let opts = EvalOptions {
        tie_policy: tie.map_or(ckpt.config.tie_policy, Into::into),
        ..Default::default()
    };
    let report = evaluate(&ckpt.params, &store, split.into(), &filter, &opts)?;
    print!("{}", report.table(Some(&store.relations)));
    let text = report.to_json();
    match json {
        Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn param_count(
    data_dir: Option<PathBuf>,
    model: &ModelArgs,
    entities: Option<usize>,
    relations: Option<usize>,
) -> Result<()> {
    let preset = model.preset()?;
    let mut cfg = default_run(0, 0, Path::new(""));
    if let Some(p) = preset {
        let (e, r) = p.dataset_sizes();
        cfg.model.num_entities = e;
        cfg.model.num_relations = r;
        p.apply(&mut cfg);
    }
    if let Some(dir) = &data_dir {
        let store = load_dataset(dir).with_context(|| format!("loading {}", dir.display()))?;
        cfg.model.num_entities = store.num_entities();
        cfg.model.num_relations = store.num_relations();
    }
    if let Some(e) = entities {
        cfg.model.num_entities = e;
    }
    if let Some(r) = relations {
        cfg.model.num_relations = r;
    }
    model.apply(&mut cfg.model);
    if cfg.model.num_entities == 0 || cfg.model.num_relations == 0 {
        bail!("vocabulary sizes unknown: give --data-dir, --preset or --entities and --relations");
    }
    cfg.model.validate()?;
    println!("{}", count_params(&cfg.model));
    Ok(())
}

fn grad_check(
    model: &ModelArgs,
    entities: usize,
    relations: usize,
    step: f64,
    tolerance: f64,
) -> Result<bool> {
    let mut m = ModelConfig::new(entities, relations, 2, 3, 3);
    m.lambda_ortho = 0.1;
    m.lambda_unitnorm = 5e-4;
    if let Some(p) = model.preset()? {
        let mut cfg = RunConfig::new(m.clone(), "");
        p.apply(&mut cfg);
        m.sampling = cfg.model.sampling;
        m.lambda_ortho = cfg.model.lambda_ortho;
        m.lambda_unitnorm = cfg.model.lambda_unitnorm;
    }
    model.apply(&mut m);
    m.validate()?;
    let params = ModelParams::init(&m)?;
    let mut batch: Vec<Triple> = Vec::new();
    for i in 0..entities * relations {
        let t = Triple::new(
            i % entities,
            (3 * i + 1) % entities,
            (i / entities + i) % relations,
        );
        if batch.len() < 8 && !batch.contains(&t) {
            batch.push(t);
        }
    }
    let filter = FilterIndex::from_triples(&batch);
    let tt = build_targets(&batch, Direction::Tail, &filter, m.sampling, entities)?;
    let th = build_targets(&batch, Direction::Head, &filter, m.sampling, entities)?;
    let err = gradient_audit(
        &params,
        &batch,
        &tt,
        &th,
        &LossWeights::from_config(&m),
        step,
    )?;
    let ok = err <= tolerance;
    println!(
        "max relative gradient error {err:.3e} (tolerance {tolerance:.0e}): {}",
        if ok { "ok" } else { "FAILED" }
    );
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Preprocess { data_dir, output } => preprocess(&data_dir, output)?,
        Command::Train(args) => train(args)?,
        Command::Eval {
            checkpoint,
            data_dir,
            split,
            tie_policy,
            json,
        } => eval(&checkpoint, data_dir, split, tie_policy, json)?,
        Command::ParamCount {
            data_dir,
            model,
            entities,
            relations,
        } => param_count(data_dir, &model, entities, relations)?,
        Command::GradCheck {
            model,
            entities,
            relations,
            step,
            tolerance,
        } => return grad_check(&model, entities, relations, step, tolerance),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
