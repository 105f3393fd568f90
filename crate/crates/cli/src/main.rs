use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use modfab::data::{
    ingest, read_sequences, split_dataset, write_sequences, write_transactions, Dataset, SchemaConfig, SplitMode,
};
use modfab::harness::{
    ablate_components, ablate_losses, choose_holdout, evaluate, fit, run_seeds, run_similarity,
    Checkpoint, ExperimentConfig,
};
use modfab::synth::{gen_dataset, gen_world};
use serde::{Deserialize, Serialize};

mod run;

use run::{find_input, Run};

const SEQUENCES: &str = "sequences.jsonl";
const TRANSACTIONS: &str = "transactions.csv";
const CHECKPOINT: &str = "checkpoint.json";
const SPLIT: &str = "split.json";

#[derive(Parser)]
#[command(name = "modfab", version, about = "Modular prototype networks for staged quality prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; unknown keys are rejected.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Input file or run directory.
    #[arg(long = "in", value_name = "PATH")]
    input: Option<PathBuf>,
    /// Parent directory for the per-run output directory.
    #[arg(long, value_name = "PATH", default_value = "runs")]
    out: PathBuf,
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Config override such as `train.epochs=10`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and its transaction file.
    Synth(Common),
    /// Turn a transaction file into imputed wafer sequences.
    Ingest(Common),
    /// Train one model on the training side of the configured split.
    Train(Common),
    /// Score a trained run, or train and score once per seed.
    Eval(Common),
    /// Loss and component ablation tables.
    Ablate(Common),
    /// Correlate learned attention with stage-set overlap.
    Similarity(Common),
    /// Finite-difference check of every gradient path.
    Gradcheck(Common),
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    split: SplitMode,
    sequences: PathBuf,
    train_wafers: Vec<String>,
    eval_wafers: Vec<String>,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let base = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    Ok(base.with_overrides(&c.set)?)
}

fn require_input(c: &Common) -> Result<&Path> {
    c.input.as_deref().context("--in is required for this subcommand")
}

fn load_sequences(c: &Common) -> Result<(PathBuf, Dataset)> {
    let path = find_input(require_input(c)?, SEQUENCES)?;
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let data = read_sequences(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    Ok((path, data))
}

fn synth(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.synth.seed = s;
    }
    let world = gen_world(&cfg.world)?;
    let data = gen_dataset(&world, cfg.synth.wafers, cfg.synth.seed)?;
    let run = Run::start(&c.out, "synth", &cfg, Some(cfg.synth.seed), None)?;
    let schema = cfg.world.schema();
    let mut out = BufWriter::new(File::create(run.path(TRANSACTIONS))?);
    write_transactions(&mut out, &schema, &data.transactions)?;
    drop(out);
    run.write("schema.toml", &schema.to_toml()?)?;
    run.write("world.json", &world.to_json()?)?;
    println!(
        "{} transactions for {} wafers in {}",
        data.transactions.len(),
        cfg.synth.wafers,
        run.dir.display()
    );
    Ok(())
}

fn ingest_cmd(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let path = find_input(require_input(c)?, TRANSACTIONS)?;
    let schema_path = path.with_file_name("schema.toml");
    let schema = if schema_path.is_file() {
        SchemaConfig::from_toml(&fs::read_to_string(&schema_path)?)?
    } else {
        log::info!("no schema.toml next to the input; using the synthetic schema");
        cfg.world.schema()
    };
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let (data, report) = ingest(BufReader::new(file), &schema, &cfg.impute)?;
    let run = Run::start(&c.out, "ingest", &cfg, c.seed, Some(&path))?;
    let mut out = BufWriter::new(File::create(run.path(SEQUENCES))?);
    write_sequences(&mut out, &data)?;
    drop(out);
    run.write("impute_report.json", &serde_json::to_string_pretty(&report)?)?;
    println!(
        "{} wafer sequences, {} imputed cells, {} systematic gaps in {}",
        data.sequences.len(),
        report.imputed_cells,
        report.systematic.len(),
        run.dir.display()
    );
    Ok(())
}

fn train(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    let (path, data) = load_sequences(c)?;
    let mode = cfg.eval.split;
    let holdout = choose_holdout(&data, mode, &cfg.eval, cfg.train.seed)?;
    let (train, eval) = split_dataset(&data.sequences, mode, &holdout, cfg.train.seed)?;
    let model = fit(&train, &data.vocabulary, &cfg.train)?;
    let run = Run::start(&c.out, "train", &cfg, Some(cfg.train.seed), Some(&path))?;
    Checkpoint::new(model.clone()).save(&run.path(CHECKPOINT))?;
    let split = SplitRecord {
        split: mode,
        sequences: fs::canonicalize(&path)?,
        train_wafers: train.iter().map(|s| s.wafer_id.clone()).collect(),
        eval_wafers: eval.iter().map(|s| s.wafer_id.clone()).collect(),
    };
    run.write(SPLIT, &serde_json::to_string_pretty(&split)?)?;
    let mut history = String::from("epoch\tl1\tl2\tl3\ttotal\tvalidation\n");
    for r in &model.history {
        let val = r.validation.map_or("NA".into(), |v| format!("{v:.6}"));
        history.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{val}\n", r.epoch, r.l1, r.l2, r.l3, r.total));
    }
    run.write("history.tsv", &history)?;
    println!(
        "trained {} epochs (kept epoch {:?}) on {} wafers; checkpoint in {}",
        model.history.len(),
        model.best_epoch,
        train.len(),
        run.dir.display()
    );
    Ok(())
}

fn eval(c: &Common) -> Result<()> {
    let input = require_input(c)?;
    let checkpoint = if input.is_dir() { input.join(CHECKPOINT) } else { input.to_path_buf() };
    if checkpoint.file_name().is_some_and(|n| n == CHECKPOINT) && checkpoint.is_file() {
        return eval_checkpoint(c, &checkpoint);
    }
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.eval.seeds = vec![s];
    }
    let (path, data) = load_sequences(c)?;
    let summary = run_seeds(&data, cfg.eval.split, &cfg.eval, &cfg.train)?;
    let run = Run::start(&c.out, "eval", &cfg, c.seed, Some(&path))?;
    run.write("report.json", &serde_json::to_string_pretty(&summary)?)?;
    let text = summary.render();
    run.write("summary.txt", &text)?;
    print!("{text}");
    println!("results in {}", run.dir.display());
    Ok(())
}

fn eval_checkpoint(c: &Common, path: &Path) -> Result<()> {
    let cfg = load_config(c)?;
    let ck = Checkpoint::load(path)?;
    let split_path = path.with_file_name(SPLIT);
    let split: SplitRecord = serde_json::from_str(
        &fs::read_to_string(&split_path).with_context(|| format!("reading {}", split_path.display()))?,
    )?;
    let data = read_sequences(BufReader::new(File::open(&split.sequences)?))?;
    let eval_set: std::collections::BTreeSet<&String> = split.eval_wafers.iter().collect();
    let sequences: Vec<_> = data
        .sequences
        .into_iter()
        .filter(|s| eval_set.contains(&s.wafer_id))
        .collect();
    if sequences.len() != split.eval_wafers.len() {
        bail!("{} no longer holds every eval wafer of the run", split.sequences.display());
    }
    let report = evaluate(&ck.model, &sequences)?;
    let run = Run::start(&c.out, "eval", &cfg, Some(ck.model.config.seed), Some(path))?;
    run.write("report.json", &serde_json::to_string_pretty(&report)?)?;
    let mut text = format!("split: {} (seed {})\n", split.split.label(), report.seed);
    for (name, a) in report.kqis.iter().zip(&report.auc) {
        text.push_str(&format!("{name}\t{}\n", a.map_or("n/a".into(), |v| format!("{v:.3}"))));
    }
    text.push_str(&format!("mean\t{}\n", report.mean_auc.map_or("n/a".into(), |v| format!("{v:.3}"))));
    run.write("summary.txt", &text)?;
    print!("{text}");
    println!("results in {}", run.dir.display());
    Ok(())
}

fn ablate(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.eval.seeds = vec![s];
    }
    let (path, data) = load_sequences(c)?;
    let losses = ablate_losses(&data, &cfg.train, &cfg.eval, &cfg.ablate.loss_grid, &cfg.ablate.splits)?;
    let components = if cfg.ablate.components {
        Some(ablate_components(&data, &cfg.train, &cfg.eval, &cfg.ablate.splits)?)
    } else {
        None
    };
    let run = Run::start(&c.out, "ablate", &cfg, c.seed, Some(&path))?;
    run.write("losses.txt", &losses.render())?;
    run.write("losses.tsv", &losses.to_tsv())?;
    print!("{}", losses.render());
    if let Some(t) = &components {
        run.write("components.txt", &t.render())?;
        run.write("components.tsv", &t.to_tsv())?;
        print!("\n{}", t.render());
    }
    run.write("tables.json", &serde_json::to_string_pretty(&(&losses, &components))?)?;
    println!("results in {}", run.dir.display());
    Ok(())
}

fn similarity(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        cfg.eval.seeds = vec![s];
    }
    let (path, data) = load_sequences(c)?;
    let report = run_similarity(&data, &cfg.train, &cfg.eval.seeds, cfg.eval.similarity_key)?;
    let run = Run::start(&c.out, "similarity", &cfg, c.seed, Some(&path))?;
    run.write("similarity.tsv", &report.render())?;
    run.write("report.json", &serde_json::to_string_pretty(&report)?)?;
    match &report.correlation {
        Some(r) => println!("pearson {:.4} (p = {:.4}, {} pairs)", r.statistic, r.p_value, r.n),
        None => println!("pearson undefined"),
    }
    println!("results in {}", run.dir.display());
    Ok(())
}

/// Exit status for a failed gradient check: an internal invariant is broken.
struct GradientMismatch(f64);

fn gradcheck(c: &Common) -> Result<Option<GradientMismatch>> {
    let cfg = load_config(c)?;
    let seed = c.seed.unwrap_or(0);
    let results = modfab::gradcheck::suite(seed)?;
    let run = Run::start(&c.out, "gradcheck", &cfg, Some(seed), None)?;
    let mut tsv = String::from("check\tmax_rel_error\n");
    for r in &results {
        tsv.push_str(&format!("{}\t{:e}\n", r.name, r.max_rel_error));
    }
    run.write("gradcheck.tsv", &tsv)?;
    print!("{tsv}");
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("max relative error: {worst:e}");
    Ok((worst >= 1e-4).then_some(GradientMismatch(worst)))
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MODFAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("MODFAB_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    configure_threads()?;
    match &cli.command {
        Command::Synth(c) => synth(c)?,
        Command::Ingest(c) => ingest_cmd(c)?,
        Command::Train(c) => train(c)?,
        Command::Eval(c) => eval(c)?,
        Command::Ablate(c) => ablate(c)?,
        Command::Similarity(c) => similarity(c)?,
        Command::Gradcheck(c) => {
            if let Some(GradientMismatch(worst)) = gradcheck(c)? {
                eprintln!("error: gradient check failed (max relative error {worst:e} >= 1e-4)");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let internal = e.chain().any(|c| c.downcast_ref::<modfab::Error>().is_some_and(|m| m.is_internal()));
            ExitCode::from(if internal { 2 } else { 1 })
        }
    }
}
