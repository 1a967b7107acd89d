use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tsm_core::config::RunConfig;
use tsm_core::data::{self, Dataset, TaskKind};
use tsm_core::eval::{self, EvalReport, MeanPoolBaseline, ReportMeta};
use tsm_core::model::Checkpoint;
use tsm_core::train::Trainer;
use tsm_core::tsm::resample_temporal;
use tsm_core::{AttentionLevels, HeadModel, TsmError, VideoMap};

#[derive(Parser, Debug)]
#[command(
    name = "tsm",
    version,
    about = "Temporal-spatial mapping: train and evaluate VideoMap classifiers"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory: the dataset for `gen`, the report directory otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing datasets and checkpoints.
    #[arg(long, global = true)]
    force: bool,
    /// Test-time sampling density.
    #[arg(long, global = true)]
    frames: Option<usize>,
    /// Enabled attention levels.
    #[arg(long, global = true, value_parser = ["none", "a0", "a12", "a012"])]
    attention: Option<String>,
    /// Override the dataset directory.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Override the checkpoint path.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Stream to use for two-stream tasks.
    #[arg(long, global = true, value_enum, default_value_t = Stream::A)]
    stream: Stream,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen,
    /// Train the head model and write a checkpoint.
    Train {
        /// Continue from the existing checkpoint up to `max_epochs`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and the mean-pool baseline on the test split.
    Eval,
    /// Accuracy across test-time densities.
    Sweep,
    /// Late-fuse two score files written by `eval`.
    Fuse { stream_a: PathBuf, stream_b: PathBuf },
    /// Export temporal response maps for test items.
    Viz,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Stream {
    A,
    B,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &TsmError) -> u8 {
    match e {
        TsmError::Config(_) | TsmError::Argument(_) | TsmError::State(_) => 1,
        TsmError::Numerical { .. } => 3,
        _ => 2,
    }
}

struct Run {
    cfg: RunConfig,
    hash: String,
    force: bool,
    stream: Stream,
}

impl Run {
    fn dataset_dir(&self) -> PathBuf {
        let base = self.cfg.paths.dataset.clone();
        if self.cfg.task.kind == TaskKind::TwoStream {
            base.join(match self.stream {
                Stream::A => "stream_a",
                Stream::B => "stream_b",
            })
        } else {
            base
        }
    }

    fn reports(&self) -> Result<PathBuf, TsmError> {
        fs::create_dir_all(&self.cfg.paths.reports)?;
        Ok(self.cfg.paths.reports.clone())
    }

    fn load_test(&self) -> Result<Vec<VideoMap>, TsmError> {
        data::read_dataset(self.dataset_dir())?.test_maps()
    }

    fn load_model(&self) -> Result<HeadModel, TsmError> {
        Ok(Checkpoint::load(&self.cfg.paths.checkpoint)?.model)
    }

    fn meta(&self, t_test: Option<usize>) -> ReportMeta {
        ReportMeta {
            t_test,
            model_id: self.cfg.paths.checkpoint.display().to_string(),
            dataset_id: self.dataset_dir().display().to_string(),
            config_hash: self.hash.clone(),
        }
    }
}

fn run(cli: Cli) -> Result<(), TsmError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| TsmError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(a) = &cli.attention {
        cfg.model.attention = a.parse::<AttentionLevels>()?;
    }
    if let Some(f) = cli.frames {
        cfg.eval.frames = Some(f);
    }
    if let Some(d) = cli.dataset {
        cfg.paths.dataset = d;
    }
    if let Some(c) = cli.checkpoint {
        cfg.paths.checkpoint = c;
    }
    if let Some(out) = cli.out {
        match cli.command {
            Command::Gen => cfg.paths.dataset = out,
            _ => cfg.paths.reports = out,
        }
    }
    cfg.validate()?;
    let hash = cfg.hash()?;
    let run = Run {
        cfg,
        hash,
        force: cli.force,
        stream: cli.stream,
    };
    match cli.command {
        Command::Gen => cmd_gen(&run),
        Command::Train { resume } => cmd_train(&run, resume),
        Command::Eval => cmd_eval(&run),
        Command::Sweep => cmd_sweep(&run),
        Command::Fuse { stream_a, stream_b } => cmd_fuse(&run, &stream_a, &stream_b),
        Command::Viz => cmd_viz(&run),
    }
}

fn write_dataset(run: &Run, dir: &Path, ds: &Dataset) -> Result<(), TsmError> {
    data::write_dataset(dir, ds, run.force)?;
    fs::write(dir.join("config.toml"), run_header(run)? + &run.cfg.to_toml()?)?;
    println!("wrote {} sequences to {}", ds.len(), dir.display());
    Ok(())
}

fn run_header(run: &Run) -> Result<String, TsmError> {
    Ok(format!("# config_hash = {}\n", run.hash))
}

fn cmd_gen(run: &Run) -> Result<(), TsmError> {
    let spec = &run.cfg.task;
    let base = &run.cfg.paths.dataset;
    if spec.kind == TaskKind::TwoStream {
        let (a, b) = data::gen_complementary_streams(spec)?;
        write_dataset(run, &base.join("stream_a"), &a)?;
        write_dataset(run, &base.join("stream_b"), &b)
    } else {
        write_dataset(run, base, &data::generate(spec)?)
    }
}

fn cmd_train(run: &Run, resume: bool) -> Result<(), TsmError> {
    let ckpt = &run.cfg.paths.checkpoint;
    let train = data::read_dataset(run.dataset_dir())?.train_maps()?;
    let mut trainer = if resume {
        let previous = Checkpoint::load(ckpt)?;
        if *previous.model.config() != run.cfg.model_config() {
            return Err(TsmError::Config(format!(
                "{} was trained with a different model configuration",
                ckpt.display()
            )));
        }
        Trainer::resume(previous, run.cfg.train.clone())?
    } else {
        if ckpt.exists() && !run.force {
            return Err(TsmError::Argument(format!(
                "{} exists; pass --force to overwrite or --resume to continue",
                ckpt.display()
            )));
        }
        Trainer::new(HeadModel::init(run.cfg.model_config())?, run.cfg.train.clone())?
    };
    let start = trainer.iteration();
    let log = trainer.fit(&train)?;
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    trainer.checkpoint().save(ckpt)?;

    let log_path = run.reports()?.join("train_log.csv");
    let text = if resume && log_path.exists() {
        let mut old = fs::read_to_string(&log_path)?;
        for line in log.to_csv().lines().skip(1) {
            old.push_str(line);
            old.push('\n');
        }
        old
    } else {
        run_header(run)? + &log.to_csv()
    };
    fs::write(&log_path, text)?;
    match log.epochs.last() {
        Some(last) => println!(
            "iterations {}..{}  epoch {}  loss {:.6}  train accuracy {:.4}",
            start, last.iteration, last.epoch, last.loss, last.accuracy
        ),
        None => println!("already at max_epochs ({}); nothing to do", trainer.epoch()),
    }
    println!("checkpoint {}  config {}", ckpt.display(), run.hash);
    Ok(())
}

fn write_report(dir: &Path, prefix: &str, report: &EvalReport) -> Result<(), TsmError> {
    fs::write(dir.join(format!("{prefix}summary.txt")), report.summary_text())?;
    fs::write(dir.join(format!("{prefix}confusion.txt")), report.confusion_text())?;
    fs::write(dir.join(format!("{prefix}scores.csv")), report.scores_csv())?;
    Ok(())
}

fn cmd_eval(run: &Run) -> Result<(), TsmError> {
    let model = run.load_model()?;
    let ds = data::read_dataset(run.dataset_dir())?;
    let test = ds.test_maps()?;
    let t_test = run.cfg.eval.frames.unwrap_or(run.cfg.task.frames);
    let mut report = eval::evaluate(&model, &test, t_test)?;
    report.meta = run.meta(Some(t_test));

    let baseline = MeanPoolBaseline::fit(&ds.train_maps()?, model.config().num_classes, &Default::default())?;
    let mut base_report = eval::evaluate_with(&baseline, &test, t_test)?;
    base_report.meta = ReportMeta {
        model_id: "mean-pool-baseline".into(),
        ..run.meta(Some(t_test))
    };

    let dir = run.reports()?;
    write_report(&dir, "", &report)?;
    write_report(&dir, "baseline_", &base_report)?;
    println!(
        "accuracy {:.4}  baseline {:.4}  (T_test={t_test}, {} items)",
        report.accuracy,
        base_report.accuracy,
        report.len()
    );
    print!("{}", report.confusion_text());
    Ok(())
}

fn cmd_sweep(run: &Run) -> Result<(), TsmError> {
    let model = run.load_model()?;
    let ds = data::read_dataset(run.dataset_dir())?;
    let test = ds.test_maps()?;
    let t_list: Vec<usize> = match run.cfg.eval.frames {
        Some(f) => vec![f],
        None => run.cfg.eval.sweep.clone(),
    };
    let head = eval::density_sweep(&model, &test, &t_list)?;
    let baseline = MeanPoolBaseline::fit(&ds.train_maps()?, model.config().num_classes, &Default::default())?;
    let base = eval::density_sweep_with(&baseline, &test, &t_list)?;

    let mut csv = run_header(run)? + "t_test,accuracy,baseline_accuracy\n";
    for (h, b) in head.iter().zip(&base) {
        csv.push_str(&format!("{},{},{}\n", h.t_test, h.accuracy, b.accuracy));
        println!("T={:<5} head {:.4}  baseline {:.4}", h.t_test, h.accuracy, b.accuracy);
    }
    let dir = run.reports()?;
    fs::write(dir.join("sweep.csv"), csv)?;
    let svg = eval::sweep_svg(&[("head", &head), ("mean-pool", &base)]);
    let svg = svg.replacen('>', &format!("><!-- config_hash {} -->", run.hash), 1);
    fs::write(dir.join("sweep.svg"), svg)?;
    Ok(())
}

fn cmd_fuse(run: &Run, a: &Path, b: &Path) -> Result<(), TsmError> {
    let load = |p: &Path| -> Result<EvalReport, TsmError> {
        let meta = ReportMeta {
            model_id: p.display().to_string(),
            ..ReportMeta::default()
        };
        EvalReport::from_scores_csv(&fs::read_to_string(p)?, meta)
    };
    let (ra, rb) = (load(a)?, load(b)?);
    let [wa, wb] = run.cfg.eval.fusion_weights;
    let mut fused = eval::fuse_streams(&ra, &rb, (wa, wb))?;
    fused.meta.config_hash = run.hash.clone();
    write_report(&run.reports()?, "fused_", &fused)?;
    println!(
        "stream a {:.4}  stream b {:.4}  fused {:.4}  (weights {wa}, {wb})",
        ra.accuracy, rb.accuracy, fused.accuracy
    );
    Ok(())
}

fn cmd_viz(run: &Run) -> Result<(), TsmError> {
    let model = run.load_model()?;
    let test = run.load_test()?;
    let dir = run.reports()?.join("viz");
    fs::create_dir_all(&dir)?;
    let t = model.config().t_fixed;
    for map in test.iter().take(run.cfg.eval.viz_items) {
        let fixed = resample_temporal(map, t)?;
        let class = tsm_core::train::argmax(&model.head_forward(&fixed)?);
        let response = model.temporal_response_map(&fixed, class)?;
        let a0 = model.attention_vector(&fixed)?;
        let mask = fixed.relevance.as_deref();
        let mut csv = format!(
            "# config_hash = {}\n# item {} label {} predicted {class}\nframe,response,attention,relevant\n",
            run.hash, map.source_id, map.label
        );
        for (f, (r, a)) in response.upsampled.iter().zip(&a0).enumerate() {
            let rel = mask.map_or(String::new(), |m| u8::from(m[f]).to_string());
            csv.push_str(&format!("{f},{r},{a},{rel}\n"));
        }
        fs::write(dir.join(format!("{}.csv", map.source_id)), csv)?;
    }
    println!(
        "wrote {} response maps to {}",
        test.len().min(run.cfg.eval.viz_items),
        dir.display()
    );
    Ok(())
}
