use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use sparsedense::checkpoint::Checkpoint;
use sparsedense::config::{ModelSpec, RunConfig};
use sparsedense::data::{self, learn_bpe, pack_sequences, read_corpus, split_train_val, Vocab, EOD};
use sparsedense::eval::{evaluate, LabelSpace};
use sparsedense::finetune::{
    epochs_csv, finetune_with_prompt, grid_search, preset_prompt_len, prompt_ablation, read_tasks,
    FinetuneJob, GridSpace, SoftPrompt, Stage, TaskExample, TaskRecord,
};
use sparsedense::flops::{self, forward_flops_at};
use sparsedense::model::{count_params, init_params, lm_loss, ModelConfig};
use sparsedense::sparsity::{build_masks, densify, sparse_size};
use sparsedense::training::{emit_loss_curves, parse_loss_curves, pretrain, TrainState};

/// Environment variable holding the default worker-thread count.
const THREADS_ENV: &str = "SPARSEDENSE_THREADS";

#[derive(Parser)]
#[command(name = "sparsedense", version, about = "Sparse pre-training and dense fine-tuning of GPT-style decoders")]
struct Cli {
    /// Worker threads for tensor kernels and evaluation [env: SPARSEDENSE_THREADS]
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a byte-level BPE vocabulary from a JSONL corpus
    Tokenizer(TokenizerArgs),
    /// Pre-train a (possibly sparse) model
    Pretrain(PretrainArgs),
    /// Drop the sparsity mask from a checkpoint; reactivated weights start at zero
    Densify(DensifyArgs),
    /// Fine-tune a dense checkpoint on task data
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a labelled task file
    Eval(EvalArgs),
    /// Training FLOPs for presets or a custom architecture
    Flops(FlopsArgs),
    /// Summarize and merge loss-curve CSVs
    Report(ReportArgs),
}

#[derive(Args)]
struct TokenizerArgs {
    /// JSONL corpus, one {id, title, abstract[, body]} object per line
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = data::bpe::DEFAULT_VOCAB_SIZE)]
    vocab_size: usize,
    /// Reserved virtual-token slots for soft prompts
    #[arg(long, default_value_t = data::bpe::DEFAULT_VIRTUAL)]
    virtual_tokens: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON run config; flags below override its keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset: med, large, xl or toy
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    msl: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Existing vocabulary; learned from the training split when absent
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    log_every: Option<u64>,
    /// Continue from a checkpoint written by an earlier run of the same config
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the resolved plan and exit without reading data or writing files
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct DensifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LabelArgs {
    /// Comma-separated candidate labels in tie-break order
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    /// File with one candidate label per line
    #[arg(long)]
    labels_file: Option<PathBuf>,
    /// Labels form sets (decoded by constrained generation)
    #[arg(long)]
    multi_label: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Dense checkpoint (run `densify` first on sparse ones)
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Stage as NAME=TRAIN.jsonl[:VAL.jsonl]; repeat for multi-stage runs
    #[arg(long = "stage", required = true)]
    stages: Vec<String>,
    #[command(flatten)]
    labels: LabelArgs,
    /// Task preset (pubmedqa, hoc): sets prompt length and grid space
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long)]
    patience: Option<usize>,
    /// Train only the soft prompt
    #[arg(long)]
    freeze_base: bool,
    /// Disable virtual tokens
    #[arg(long)]
    no_prompt: bool,
    /// Run both prompt arms and report them side by side
    #[arg(long)]
    ablation: bool,
    /// Grid-search batch size and learning rate, then train at the best point
    #[arg(long)]
    grid: bool,
    #[arg(long, value_delimiter = ',')]
    grid_batch: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    grid_lr: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    labels: LabelArgs,
    /// Exit with status 3 when the metric falls below this value
    #[arg(long)]
    min_metric: Option<f64>,
    /// Directory for metrics.csv
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    /// All nine preset/sparsity rows next to the published values
    #[arg(long)]
    paper_table: bool,
    /// Emit CSV instead of a text table
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    context: Option<usize>,
    /// Sequence length for the attention terms (defaults to the context window)
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    sparsity: f64,
    /// Training tokens; defaults to the full pre-training budget
    #[arg(long)]
    tokens: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Loss CSV files (columns run,step,loss)
    #[arg(required = true)]
    curves: Vec<PathBuf>,
    /// Write all runs into one CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A configured metric floor was not reached.
#[derive(Debug, thiserror::Error)]
#[error("metric {metric} = {value:.4} is below the floor {floor}")]
struct BelowFloor {
    metric: &'static str,
    value: f64,
    floor: f64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<BelowFloor>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<sparsedense::Error>() {
            return if e.is_contract() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a number"))?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if !sparsedense::tensor::set_threads(n) {
            warn!("thread pool already initialized; ignoring thread count {n}");
        }
    }
    match cli.command {
        Command::Tokenizer(a) => cmd_tokenizer(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Densify(a) => cmd_densify(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_tokenizer(a: TokenizerArgs) -> anyhow::Result<()> {
    let docs = data::filter_corpus(read_corpus(&a.corpus)?);
    let texts: Vec<String> = docs.iter().map(|d| d.text()).collect();
    let vocab = learn_bpe(&texts, a.vocab_size, a.virtual_tokens)?;
    vocab.save(&a.out)?;
    println!("{} documents, vocabulary of {} written to {}", docs.len(), vocab.len(), a.out.display());
    Ok(())
}

fn resolve_pretrain(a: &PretrainArgs) -> anyhow::Result<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &a.preset {
        c.model = ModelSpec::Preset(p.clone());
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = &a.$flag { c.$field = v.clone(); })*
        };
    }
    set!(label => label, sparsity => sparsity, seed => seed, steps => steps, batch_size => batch_size,
         grad_accum => grad_accum, lr => peak_lr, msl => msl, out => out_dir, log_every => log_every);
    if a.clip_norm.is_some() {
        c.clip_norm = a.clip_norm;
    }
    if a.vocab_size.is_some() {
        c.vocab_size = a.vocab_size;
    }
    if a.context.is_some() {
        c.context = a.context;
    }
    if a.corpus.is_some() {
        c.corpus = a.corpus.clone();
    }
    if a.vocab.is_some() {
        c.vocab = a.vocab.clone();
    }
    if a.checkpoint_every.is_some() {
        c.checkpoint_every = a.checkpoint_every;
    }
    if a.sparsity.is_some() {
        c.sparsity_levels = None;
    }
    c.validate()?;
    Ok(c)
}

fn print_plan(c: &RunConfig) -> anyhow::Result<()> {
    let m = c.model_config()?;
    let name = match &c.model {
        ModelSpec::Preset(p) => p.clone(),
        ModelSpec::Explicit(_) => "custom".into(),
    };
    println!(
        "model      {name}: {} layers, d_model {}, {} heads, d_ff {}, vocab {}, context {}",
        m.n_layers, m.d_model, m.n_heads, m.d_ff, m.vocab_size, m.context
    );
    let matrix = m.matrix_params();
    println!("matrices   {} ({matrix}) non-embedding weight parameters", flops::human_count(matrix));
    println!("total      {} parameters including embeddings", flops::human_count(count_params(&m, true)));
    let remaining = match c.sparsity_plan()? {
        Some(plan) => match &plan.levels {
            sparsedense::sparsity::Levels::Uniform(s) => {
                let r = sparse_size(&m, *s);
                println!(
                    "sparsity   {:.0}% uniform, seed {}: {} ({r}) matrix parameters remain",
                    s * 100.0,
                    plan.seed,
                    flops::human_count(r)
                );
                let zeros = (matrix - r) as f64;
                println!(
                    "           global S = {:.4} of matrix parameters, {:.4} of all parameters",
                    zeros / matrix as f64,
                    zeros / count_params(&m, true) as f64
                );
                *s
            }
            sparsedense::sparsity::Levels::PerPath(l) => {
                println!("sparsity   per-path levels on {} tensors, seed {}", l.len(), plan.seed);
                0.0
            }
        },
        None => {
            println!("sparsity   dense: {} ({matrix}) matrix parameters", flops::human_count(matrix));
            0.0
        }
    };
    let s = c.schedule();
    println!(
        "schedule   {} steps, warmup {}, peak lr {:.3e}, final lr {:.3e}",
        s.total_steps,
        s.warmup_steps(),
        s.peak_lr,
        s.min_lr()
    );
    let tokens = c.steps as f64 * (c.batch_size * c.grad_accum * c.msl) as f64;
    let seq = c.msl.min(m.context);
    let r = forward_flops_at(&m, seq, remaining)?;
    println!(
        "compute    {tokens:.4e} tokens, {:.4e} training FLOPs ({:.2}x dense)",
        r.train_total(tokens),
        r.ratio()
    );
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let c = resolve_pretrain(&a)?;
    print_plan(&c)?;
    if a.dry_run {
        return Ok(());
    }
    let corpus = c.corpus.clone().context("no corpus given (--corpus or \"corpus\" in the config)")?;
    let docs = data::filter_corpus(read_corpus(&corpus)?);
    anyhow::ensure!(!docs.is_empty(), "corpus {} has no usable documents", corpus.display());
    let (val_docs, train_docs) = split_train_val(docs, c.val_fraction, c.seed)?;
    let mut model = c.model_config()?;
    let vocab = match &c.vocab {
        Some(p) => Vocab::load(p)?,
        None => {
            let texts: Vec<String> = train_docs.iter().map(|d| d.text()).collect();
            learn_bpe(&texts, model.vocab_size, data::bpe::DEFAULT_VIRTUAL)?
        }
    };
    if vocab.len() > model.vocab_size {
        return Err(sparsedense::Error::Contract(format!(
            "vocabulary of {} exceeds model vocab size {}",
            vocab.len(),
            model.vocab_size
        ))
        .into());
    }
    model.vocab_size = model.vocab_size.max(vocab.len());
    let encode = |docs: &[data::Document]| {
        let texts: Vec<String> = docs.iter().map(|d| d.text()).collect();
        vocab.encode_all(&texts)
    };
    let train = pack_sequences(&encode(&train_docs), c.msl, EOD)?;
    info!("{} training sequences of {} tokens", train.len(), c.msl);

    std::fs::create_dir_all(&c.out_dir).with_context(|| format!("creating {}", c.out_dir.display()))?;
    c.write_resolved(&c.out_dir)?;
    vocab.save(c.out_dir.join("vocab.txt"))?;

    let mut state = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::<f32>::load(p)?;
            anyhow::ensure!(ck.config() == &model, "checkpoint {} has a different model config", p.display());
            ck.into_state()?
        }
        None => {
            let params = init_params::<f32>(&model, c.seed)?;
            let masks = c.sparsity_plan()?.map(|plan| build_masks(&params, &plan)).transpose()?;
            TrainState::new(params, masks, c.optimizer, c.seed, c.label.clone())?
        }
    };
    pretrain(&mut state, &train, &c.pretrain_config(), c.steps)?;

    write(&c.out_dir.join("loss.csv"), emit_loss_curves(std::slice::from_ref(&state.trace))?)?;
    Checkpoint::from_state(&state).save(c.out_dir.join("final.ckpt"))?;
    let smoothed = state.trace.final_smoothed().unwrap_or(f64::NAN);
    let mut line = format!("{}: {} steps, final smoothed loss {smoothed:.4}", c.label, state.step);
    if !val_docs.is_empty() {
        if let Ok(val) = pack_sequences(&encode(&val_docs), c.msl, EOD) {
            let seqs: Vec<Vec<u32>> = val.sequences().take(64).map(|s| s.to_vec()).collect();
            if !seqs.is_empty() {
                let l = lm_loss(&state.params, &seqs, state.masks.as_ref())?;
                line.push_str(&format!(", validation loss {l:.4}"));
            }
        }
    }
    println!("{line}");
    Ok(())
}

fn cmd_densify(a: DensifyArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let params = match ck.masks {
        Some(m) => {
            let reactivated = m.zeros();
            let p = densify(ck.params, m)?;
            println!("reactivated {reactivated} weights at zero");
            p
        }
        None => {
            warn!("{} carries no mask; writing the weights unchanged", a.checkpoint.display());
            ck.params
        }
    };
    Checkpoint::from_params(params).save(&a.out)?;
    println!("dense checkpoint written to {}", a.out.display());
    Ok(())
}

fn label_space(a: &LabelArgs, vocab: &Vocab) -> anyhow::Result<Option<LabelSpace>> {
    let mut names = a.labels.clone();
    if let Some(p) = &a.labels_file {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        names.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
    }
    if names.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    Ok(Some(LabelSpace::from_vocab(&refs, vocab, a.multi_label)?))
}

/// An empty target is replaced by the serialized gold labels.
fn encode_tasks(records: &[TaskRecord], vocab: &Vocab, space: Option<&LabelSpace>) -> anyhow::Result<Vec<TaskExample>> {
    records
        .iter()
        .map(|r| {
            let ex = if r.target.is_empty() {
                let space = space.context("task record has no target and no label space was given")?;
                TaskExample::new(vocab.encode(&r.source), space.serialize(&r.labels)?, r.labels.clone())?
            } else {
                TaskExample::encode(r, vocab)?
            };
            Ok(ex)
        })
        .collect()
}

fn load_prompt(ck: &Checkpoint<f32>) -> anyhow::Result<SoftPrompt<f32>> {
    Ok(SoftPrompt::from_tensor(ck.prompt.clone())?)
}

#[derive(Serialize)]
struct FinetuneSettings<'a> {
    checkpoint: &'a Path,
    vocab: &'a Path,
    stages: &'a [String],
    labels: Vec<String>,
    multi_label: bool,
    task: Option<&'a str>,
    prompt_len: usize,
    use_prompt: bool,
    freeze_base: bool,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    patience: Option<usize>,
    grid: Option<GridSpace>,
    seed: u64,
}

fn cmd_finetune(a: FinetuneArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    if ck.masks.is_some() {
        return Err(sparsedense::Error::Contract(format!(
            "{} still carries a sparsity mask; run `densify` first",
            a.checkpoint.display()
        ))
        .into());
    }
    let vocab = Vocab::load(&a.vocab)?;
    let space = label_space(&a.labels, &vocab)?;
    let prompt_len = match (a.prompt_len, &a.task) {
        (Some(n), _) => n,
        (None, Some(t)) => preset_prompt_len(t).with_context(|| format!("unknown task preset {t:?}"))?,
        (None, None) => 0,
    };
    anyhow::ensure!(
        prompt_len <= vocab.n_virtual() as usize,
        "prompt length {prompt_len} exceeds the {} virtual slots reserved in the vocabulary",
        vocab.n_virtual()
    );
    let mut stages = Vec::new();
    for spec in &a.stages {
        let (name, files) = spec.split_once('=').with_context(|| format!("stage {spec:?} is not NAME=TRAIN[:VAL]"))?;
        let (train, val) = match files.split_once(':') {
            Some((t, v)) => (t, Some(v)),
            None => (files, None),
        };
        let train = encode_tasks(&read_tasks(train)?, &vocab, space.as_ref())?;
        let val = match val {
            Some(v) => encode_tasks(&read_tasks(v)?, &vocab, space.as_ref())?,
            None => vec![],
        };
        let mut s = Stage::new(name, train, val);
        s.epochs = a.epochs;
        s.batch_size = a.batch_size;
        s.lr = a.lr;
        stages.push(s);
    }
    let mut job = FinetuneJob::new(stages, prompt_len, a.seed);
    job.use_prompt = !a.no_prompt;
    job.freeze_base = a.freeze_base;
    job.patience = a.patience;
    job.labels = space.clone();

    let grid = a.grid.then(|| {
        let mut g = match a.task.as_deref() {
            Some("hoc") => GridSpace::hoc(),
            _ => GridSpace::pubmedqa(),
        };
        if !a.grid_batch.is_empty() {
            g.batch_sizes = a.grid_batch.clone();
        }
        if !a.grid_lr.is_empty() {
            g.learning_rates = a.grid_lr.clone();
        }
        g
    });
    let settings = FinetuneSettings {
        checkpoint: &a.checkpoint,
        vocab: &a.vocab,
        stages: &a.stages,
        labels: space.as_ref().map(|s| s.names().to_vec()).unwrap_or_default(),
        multi_label: a.labels.multi_label,
        task: a.task.as_deref(),
        prompt_len,
        use_prompt: job.use_prompt,
        freeze_base: a.freeze_base,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        patience: a.patience,
        grid: grid.clone(),
        seed: a.seed,
    };
    write(&a.out.join("config.json"), serde_json::to_string_pretty(&settings)? + "\n")?;

    let stored = load_prompt(&ck)?;
    let base = ck.params;
    if let Some(space_g) = &grid {
        let result = grid_search(&base, &job, space_g)?;
        write(&a.out.join("grid.csv"), result.to_csv())?;
        let (b, lr) = result.best_point();
        println!("grid search: best batch size {b}, learning rate {lr:e}");
        for s in &mut job.stages {
            s.batch_size = b;
            s.lr = lr;
        }
    }
    if a.ablation {
        let (with, without) = prompt_ablation(&base, &job)?;
        let mut csv = String::from("arm,prompt_len,best_score\n");
        for (arm, out, n) in [("with_prompt", &with, job.prompt_len), ("without_prompt", &without, 0)] {
            let s = out.best_score.map(|v| v.to_string()).unwrap_or_default();
            csv.push_str(&format!("{arm},{n},{s}\n"));
            println!("{arm}: best validation score {s}");
        }
        write(&a.out.join("ablation.csv"), csv)?;
    }
    // a stored prompt of the right length is continued rather than replaced
    let prompt = if !stored.is_empty() && stored.len() == job.effective_prompt_len() {
        stored
    } else {
        SoftPrompt::init(job.effective_prompt_len(), base.config().d_model, job.seed)?
    };
    let out = finetune_with_prompt(base, prompt, &job)?;
    write(&a.out.join("finetune.csv"), epochs_csv(&out.epochs))?;
    let mut result = Checkpoint::from_params(out.params);
    result.prompt = out.prompt.embedding().cloned();
    result.save(a.out.join("model.ckpt"))?;
    match out.best_score {
        Some(s) => println!("fine-tuned; best validation score {s:.4}"),
        None => println!("fine-tuned; no validation split"),
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let vocab = Vocab::load(&a.vocab)?;
    let space = label_space(&a.labels, &vocab)?.context("no candidate labels (--labels or --labels-file)")?;
    let examples: Vec<TaskExample> = read_tasks(&a.data)?
        .iter()
        .map(|r| {
            let target = space.serialize(&r.labels).unwrap_or_else(|_| vec![EOD]);
            TaskExample::new(vocab.encode(&r.source), target, r.labels.clone())
        })
        .collect::<Result<_, _>>()?;
    let prompt = load_prompt(&ck)?;
    let report = evaluate(&ck.params, &prompt, &examples, &space)?;
    if let Some(dir) = &a.out {
        write(&dir.join("metrics.csv"), report.to_csv())?;
    }
    println!("{}", report.summary());
    if report.truncated() > 0 {
        warn!("{} generations hit the step limit", report.truncated());
    }
    if let Some(floor) = a.min_metric {
        if report.value < floor {
            return Err(BelowFloor {
                metric: report.metric,
                value: report.value,
                floor,
            }
            .into());
        }
    }
    Ok(())
}

fn cmd_flops(a: FlopsArgs) -> anyhow::Result<()> {
    if a.paper_table {
        let rows = flops::preset_table();
        print!("{}", if a.csv { flops::table_csv(&rows) } else { flops::table_text(&rows) });
        return Ok(());
    }
    let mut m = match &a.preset {
        Some(p) => ModelConfig::preset(p).with_context(|| format!("unknown preset {p:?}"))?,
        None => {
            let (Some(l), Some(d), Some(h), Some(v), Some(k)) = (a.layers, a.d_model, a.heads, a.vocab, a.context)
            else {
                bail!("give --paper-table, --preset, or all of --layers --d-model --heads --vocab --context");
            };
            ModelConfig::new(l, d, h, v, k)
        }
    };
    if let Some(ff) = a.d_ff {
        m.d_ff = ff;
    }
    let seq = a.seq_len.unwrap_or(m.context);
    let r = forward_flops_at(&m, seq, a.sparsity)?;
    let tokens = a.tokens.unwrap_or(flops::PRETRAIN_TOKENS);
    if a.csv {
        print!("{}", flops::table_csv(&[flops::FlopsRow {
            model: a.preset.clone().unwrap_or_else(|| "custom".into()),
            size: sparse_size(&m, a.sparsity),
            sparsity: a.sparsity,
            flops: r.train_total(tokens),
            ratio: r.ratio(),
        }]));
        return Ok(());
    }
    println!("forward FLOPs per token: {}", r.forward_per_token);
    for (name, v) in r.components.named() {
        println!("  {name:<22} {v}");
    }
    println!("training FLOPs for {tokens:.4e} tokens: {:.4e}", r.train_total(tokens));
    println!("ratio to dense: {:.2}x", r.ratio());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<()> {
    let mut traces = Vec::new();
    for p in &a.curves {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        traces.extend(parse_loss_curves(&text)?);
    }
    let mut seen = BTreeMap::new();
    for t in &traces {
        if seen.insert(t.label.clone(), ()).is_some() {
            bail!("run label {:?} appears in more than one file", t.label);
        }
    }
    println!("{:<16} {:>7} {:>10} {:>10} {:>10}", "run", "steps", "first", "last", "smoothed");
    for t in &traces {
        let first = t.losses().first().copied().unwrap_or(f64::NAN);
        let last = t.losses().last().copied().unwrap_or(f64::NAN);
        let sm = t.final_smoothed().unwrap_or(f64::NAN);
        println!("{:<16} {:>7} {first:>10.4} {last:>10.4} {sm:>10.4}", t.label, t.len());
    }
    if let Some(out) = &a.out {
        write(out, emit_loss_curves(&traces)?)?;
    }
    Ok(())
}
