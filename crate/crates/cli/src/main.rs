use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ran::augment::center_crop;
use ran::checkpoint::Checkpoint;
use ran::config::{Ablation, RunConfig};
use ran::container;
use ran::data::{generate_dataset, Dataset, GeneratorConfig, Split, DEFAULT_DIFFICULTY};
use ran::gradcam::{gradcam, write_pgm};
use ran::gradcheck::operation_suite;
use ran::metrics::MetricsReport;
use ran::regions::enumerate_regions;
use ran::train::{self, EpochRecord};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "ran", version, about = "Regional attention network: data, training and inspection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic fine-grained dataset
    GenData(GenData),
    /// Train a model and write checkpoint, metrics log and resolved config
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// List the candidate regions of a C×C grid, one per line
    Regions(RegionsArgs),
    /// Finite-difference check of every operation and the end-to-end model
    Gradcheck(GradcheckArgs),
    /// Write a Grad-CAM heatmap as binary PGM
    Gradcam(GradcamArgs),
    /// Train every ablation selector on one dataset and print a comparison table
    Ablate(TrainArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    #[arg(long, default_value_t = 48)]
    size: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = DEFAULT_DIFFICULTY)]
    difficulty: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct RegionsArgs {
    #[arg(long, default_value_t = 3)]
    cells: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    class: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Regions(a) => {
            for r in enumerate_regions(a.cells)?.regions() {
                println!("{} {} {} {}", r.row0, r.col0, r.row1, r.col1);
            }
        }
        Command::Gradcheck(a) => return gradcheck(a),
        Command::Gradcam(a) => gradcam_cmd(a)?,
        Command::Ablate(a) => ablate(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_data(a: GenData) -> Result<()> {
    let cfg = GeneratorConfig {
        classes: a.classes,
        n_train: a.train,
        n_test: a.test,
        image_size: a.size,
        noise: a.noise,
        difficulty: a.difficulty,
        seed: a.seed,
    };
    let manifest = generate_dataset(&cfg, &a.out)?;
    eprintln!("wrote {} samples to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

/// Config file (or defaults) with command-line overrides applied. Without a
/// config file the class count follows the dataset.
fn resolve_config(a: &TrainArgs, data: &Dataset) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let mut c = RunConfig::default();
            c.model.num_classes = data.num_classes();
            c
        }
    };
    if let Some(seed) = a.seed {
        cfg.model.seed = seed;
    }
    if let Some(cells) = a.cells {
        cfg.model.cells_per_side = cells;
    }
    if let Some(threads) = a.threads {
        cfg.train.threads = threads;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn print_record(r: &EpochRecord) {
    println!("{}", r.to_json());
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let data = Dataset::open(&a.data)?;
    let cfg = resolve_config(&a, &data)?;
    eprint!("{}", cfg.echo());
    let started = std::time::Instant::now();
    let outcome = train::train(&cfg, &a.data, &a.out, &mut print_record)?;
    eprintln!(
        "finished in {:.1}s: {}",
        started.elapsed().as_secs_f64(),
        outcome.final_test.summary()
    );
    Ok(())
}

fn report_json(r: &MetricsReport) -> String {
    let aps: Vec<String> = r
        .per_class_ap
        .iter()
        .map(|a| a.map_or("null".to_string(), |v| v.to_string()))
        .collect();
    let confusion: Vec<String> = r
        .confusion
        .iter()
        .map(|row| format!("[{}]", row.iter().map(usize::to_string).collect::<Vec<_>>().join(",")))
        .collect();
    format!(
        "{{\"loss\":{},\"acc\":{},\"map\":{},\"per_class_ap\":[{}],\"confusion\":[{}]}}",
        r.loss,
        r.accuracy,
        r.map,
        aps.join(","),
        confusion.join(",")
    )
}

fn eval(a: EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let report = train::evaluate_checkpoint(&a.ckpt, &a.data, split, a.threads)?;
    println!("{}", report_json(&report));
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let report = operation_suite(a.seed)?;
    let mut ok = true;
    for (name, err) in &report {
        let pass = *err < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!("{name:<28} {err:.3e} {}", if pass { "ok" } else { "FAIL" });
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn gradcam_cmd(a: GradcamArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = ck.model()?;
    let image = container::read_file(&a.image)?;
    let image = center_crop(&image, model.config().image_size)
        .with_context(|| format!("image {} does not fit the model geometry", a.image.display()))?;
    let heat = gradcam(&model, &image, a.class)?;
    write_pgm(&a.out, &heat)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

/// The selector grid: the six ablations at the configured C, then the full
/// model at C=2 (8 regions) and C=3 (35 regions).
fn ablation_grid(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut grid: Vec<(String, RunConfig)> = Ablation::ALL
        .iter()
        .filter(|a| **a != Ablation::Full)
        .map(|&a| {
            let mut c = base.clone();
            c.model.ablation = a;
            (a.label().to_string(), c)
        })
        .collect();
    for cells in [2, 3] {
        let mut c = base.clone();
        c.model.ablation = Ablation::Full;
        c.model.cells_per_side = cells;
        let n = ran::regions::region_count(cells).expect("valid cell count");
        grid.push((format!("{n}-ROI"), c));
    }
    grid
}

fn ablate(a: TrainArgs) -> Result<()> {
    let data = Dataset::open(&a.data)?;
    let base = resolve_config(&a, &data)?;
    let mut rows = Vec::new();
    for (label, cfg) in ablation_grid(&base) {
        let dir = a.out.join(label.replace('+', "p").replace(['-', '\u{2212}'], "m"));
        eprintln!("training {label} -> {}", dir.display());
        let outcome = train::train(&cfg, &a.data, &dir, &mut |_| {})?;
        rows.push((label, outcome.final_test));
    }
    print_table(&rows);
    Ok(())
}

fn print_table(rows: &[(String, MetricsReport)]) {
    let header: Vec<String> = rows.iter().map(|(l, _)| format!("{l:>9}")).collect();
    println!("{:<6}{}", "", header.join(""));
    let acc: Vec<String> = rows.iter().map(|(_, r)| format!("{:>9.2}", 100.0 * r.accuracy)).collect();
    println!("{:<6}{}", "ACC", acc.join(""));
    let map: Vec<String> = rows.iter().map(|(_, r)| format!("{:>9.2}", 100.0 * r.map)).collect();
    println!("{:<6}{}", "mAP", map.join(""));
}
