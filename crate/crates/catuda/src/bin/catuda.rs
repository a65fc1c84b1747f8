//! Command-line front end: dataset generation, training runs, checkpoint
//! evaluation, and multi-run report aggregation.
//!
//! Run directories are laid out as `<out>/<task>/<method>/seed<N>/`, with
//! the task's dataset files under `<out>/<task>/data/`. The default output
//! root comes from `CATUDA_OUT` (falling back to `./runs`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use catuda::calibration::{reliability_csv, DEFAULT_ECE_BINS};
use catuda::checkpoint::{load_checkpoint, restore_params};
use catuda::config::{parse_config, Config};
use catuda::data::{
    generate_synth, load_dataset, normalize, save_dataset, split_train_test, to_frequency,
    Representation, SignalDataset,
};
use catuda::error::CatError;
use catuda::nets::{CatModel, TeacherState};
use catuda::report::{aggregate, report_csv, report_table, RunSummary};
use catuda::trainer::{
    evaluate, metrics_csv, model_rng, pseudo_stats_csv, run_training, TrainInputs,
};

const OUT_ENV: &str = "CATUDA_OUT";

#[derive(Parser)]
#[command(name = "catuda", version, about = "Calibrated adaptive teacher for 1-D signal domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Output root; overrides the CATUDA_OUT environment variable.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the four dataset files for the configured transfer task.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the configured method, one run per seed.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Train only this seed instead of the configured seed list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a saved checkpoint on the configured task's test sets.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint file to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Aggregate completed run directories into a report.
    Report {
        /// Run directories (each containing run_meta.txt and metrics.csv).
        run_dirs: Vec<PathBuf>,
        /// Where to write report.csv; omit to print CSV to stdout only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(path: &Path) -> Result<Config, CatError> {
    let text = fs::read_to_string(path)?;
    let cfg = parse_config(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn data_dir(root: &Path, cfg: &Config) -> PathBuf {
    root.join(cfg.data.task_name()).join("data")
}

const DATASET_FILES: [&str; 4] = [
    "source_train.sig",
    "source_test.sig",
    "target_train.sig",
    "target_test.sig",
];

fn cmd_generate(common: &CommonArgs) -> Result<(), CatError> {
    let cfg = load_config(&common.config)?;
    let root = out_root(common.out.clone());
    let dir = data_dir(&root, &cfg);
    fs::create_dir_all(&dir)?;

    let d = &cfg.data;
    let mut sets = Vec::new();
    for (domain_id, speed) in [(0u32, d.source_speed), (1u32, d.target_speed)] {
        let spec = d.domain_spec(speed);
        let mut full = generate_synth(&spec, d.samples_per_class, domain_id, d.data_seed)?;
        if d.representation == Representation::Frequency {
            full = to_frequency(&full)?;
        }
        let (train, test) = split_train_test(&full, d.train_fraction, d.data_seed)?;
        sets.push(normalize(&train));
        sets.push(normalize(&test));
    }
    for (name, ds) in DATASET_FILES.iter().zip(&sets) {
        let path = dir.join(name);
        save_dataset(ds, &path)?;
        println!(
            "wrote {} ({} samples, {} classes, length {})",
            path.display(),
            ds.len(),
            ds.classes,
            ds.sample_length()
        );
    }
    Ok(())
}

struct LoadedTask {
    source_train: SignalDataset,
    source_test: SignalDataset,
    target_train: SignalDataset,
    target_labels: Option<Vec<usize>>,
    target_test: SignalDataset,
}

fn load_task(root: &Path, cfg: &Config) -> Result<LoadedTask, CatError> {
    let dir = data_dir(root, cfg);
    let mut sets = Vec::new();
    for name in DATASET_FILES {
        let path = dir.join(name);
        if !path.exists() {
            return Err(CatError::Data(format!(
                "dataset file {} not found; run `catuda generate` first",
                path.display()
            )));
        }
        sets.push(load_dataset(&path)?);
    }
    let target_test = sets.pop().expect("four files");
    let (target_train, target_labels) = sets.pop().expect("four files").strip_labels();
    let source_test = sets.pop().expect("four files");
    let source_train = sets.pop().expect("four files");
    Ok(LoadedTask {
        source_train,
        source_test,
        target_train,
        target_labels,
        target_test,
    })
}

fn write_run_meta(
    path: &Path,
    cfg: &Config,
    seed: u64,
    final_metrics: &catuda::trainer::MetricsRecord,
) -> Result<(), CatError> {
    let meta = format!(
        "method = {}\ntask = {}\nseed = {}\nfinal_source_acc = {}\nfinal_target_acc = {}\n\
         final_source_ece = {}\nfinal_target_ece = {}\n",
        cfg.method.as_str(),
        cfg.data.task_name(),
        seed,
        final_metrics.source_test_acc,
        final_metrics.target_test_acc,
        final_metrics.source_ece,
        final_metrics.target_ece
    );
    fs::write(path, meta)?;
    Ok(())
}

fn cmd_train(common: &CommonArgs, seed_override: Option<u64>) -> Result<(), CatError> {
    let cfg = load_config(&common.config)?;
    let root = out_root(common.out.clone());
    let task = load_task(&root, &cfg)?;
    let seeds: Vec<u64> = match seed_override {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };

    for seed in seeds {
        let run_dir = root
            .join(cfg.data.task_name())
            .join(cfg.method.as_str())
            .join(format!("seed{}", seed));
        fs::create_dir_all(&run_dir)?;

        let trainer_cfg = cfg.trainer_for_seed(seed);
        let inputs = TrainInputs {
            source_train: &task.source_train,
            source_test: &task.source_test,
            target_train: &task.target_train,
            target_train_eval_labels: task.target_labels.as_deref(),
            target_test: &task.target_test,
        };
        let out = run_training(&trainer_cfg, cfg.model, &inputs, Some(&run_dir))?;

        fs::write(run_dir.join("metrics.csv"), metrics_csv(&out.metrics))?;
        fs::write(
            run_dir.join("pseudo_label_stats.csv"),
            pseudo_stats_csv(&out.pseudo_stats, cfg.model.classes),
        )?;
        fs::write(
            run_dir.join("reliability_source.csv"),
            reliability_csv(&out.source_eval, DEFAULT_ECE_BINS)?,
        )?;
        fs::write(
            run_dir.join("reliability_target.csv"),
            reliability_csv(&out.target_eval, DEFAULT_ECE_BINS)?,
        )?;
        let last = out.metrics.last().expect("at least one epoch");
        write_run_meta(&run_dir.join("run_meta.txt"), &cfg, seed, last)?;
        println!(
            "{} seed {}: target acc {:.4}, target ece {:.4} -> {}",
            cfg.method.as_str(),
            seed,
            last.target_test_acc,
            last.target_ece,
            run_dir.display()
        );
    }
    Ok(())
}

fn cmd_evaluate(common: &CommonArgs, ckpt_path: &Path) -> Result<(), CatError> {
    let cfg = load_config(&common.config)?;
    let root = out_root(common.out.clone());
    let task = load_task(&root, &cfg)?;
    let ckpt = load_checkpoint(ckpt_path)?;

    // Rebuild the architecture at the configured size, then overwrite its
    // weights with the checkpointed values.
    let mut rng = model_rng(0);
    let mut model = CatModel::new(cfg.model, &mut rng);
    restore_params(&mut model.params, &ckpt.model)?;
    let (params, enc, head) = match &ckpt.teacher {
        Some(saved) => {
            let mut teacher = TeacherState::init_from_student(&model, 1.0);
            restore_params(&mut teacher.params, saved)?;
            (teacher.params, teacher.encoder, teacher.classifier)
        }
        None => (model.params, model.encoder, model.classifier),
    };

    println!(
        "checkpoint {} (epoch {}, calibrator {}, {})",
        ckpt_path.display(),
        ckpt.epoch,
        ckpt.calibrator.kind.as_str(),
        if ckpt.teacher.is_some() {
            "teacher weights"
        } else {
            "student weights"
        }
    );
    for (name, ds) in [("source_test", &task.source_test), ("target_test", &task.target_test)] {
        let (acc, ece, _) = evaluate(&params, &enc, &head, ds, &ckpt.calibrator)?;
        println!("{}: accuracy {:.4}, ece {:.4}", name, acc, ece.ece);
    }
    Ok(())
}

fn read_meta(path: &Path) -> Result<(String, String, u64), CatError> {
    let text = fs::read_to_string(path)?;
    let mut method = None;
    let mut task = None;
    let mut seed = None;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "method" => method = Some(v.trim().to_string()),
                "task" => task = Some(v.trim().to_string()),
                "seed" => {
                    seed = Some(v.trim().parse().map_err(|_| CatError::FileFormat {
                        path: path.display().to_string(),
                        detail: format!("bad seed `{}`", v.trim()),
                    })?)
                }
                _ => {}
            }
        }
    }
    match (method, task, seed) {
        (Some(m), Some(t), Some(s)) => Ok((m, t, s)),
        _ => Err(CatError::FileFormat {
            path: path.display().to_string(),
            detail: "missing method/task/seed".into(),
        }),
    }
}

/// Final target accuracy and calibration error from a run's metrics.csv.
fn read_final_metrics(path: &Path) -> Result<(f64, f64), CatError> {
    let text = fs::read_to_string(path)?;
    let bad = |detail: &str| CatError::FileFormat {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let acc_col = cols
        .iter()
        .position(|&c| c == "target_test_acc")
        .ok_or_else(|| bad("no target_test_acc column"))?;
    let ece_col = cols
        .iter()
        .position(|&c| c == "target_ece")
        .ok_or_else(|| bad("no target_ece column"))?;
    let last = lines.last().ok_or_else(|| bad("no data rows"))?;
    let fields: Vec<&str> = last.split(',').collect();
    let parse = |i: usize| -> Result<f64, CatError> {
        fields
            .get(i)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("unparseable final row"))
    };
    Ok((parse(acc_col)?, parse(ece_col)?))
}

fn cmd_report(run_dirs: &[PathBuf], out: Option<PathBuf>) -> Result<(), CatError> {
    if run_dirs.is_empty() {
        return Err(CatError::Config("report needs at least one run directory".into()));
    }
    let mut runs = Vec::new();
    for dir in run_dirs {
        let (method, task, seed) = read_meta(&dir.join("run_meta.txt"))?;
        let (target_acc, target_ece) = read_final_metrics(&dir.join("metrics.csv"))?;
        runs.push(RunSummary {
            method,
            task,
            seed,
            target_acc,
            target_ece,
        });
    }
    let report = aggregate(&runs)?;
    print!("{}", report_table(&report));
    let csv = report_csv(&report);
    match out {
        Some(root) => {
            fs::create_dir_all(&root)?;
            let path = root.join("report.csv");
            fs::write(&path, csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{}", csv),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CatError> {
    match &cli.command {
        Command::Generate { common } => cmd_generate(common),
        Command::Train { common, seed } => cmd_train(common, *seed),
        Command::Evaluate { common, checkpoint } => cmd_evaluate(common, checkpoint),
        Command::Report { run_dirs, out } => cmd_report(run_dirs, out.clone()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            let code = match e {
                CatError::Config(_) | CatError::Param(_) => 2,
                CatError::Io(_) | CatError::FileFormat { .. } | CatError::Data(_) => 4,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}
