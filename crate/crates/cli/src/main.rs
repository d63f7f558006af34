use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cslr_core::config::RunConfig;
use cslr_core::ctc::{DecodeMethod, DEFAULT_BEAM};
use cslr_core::data::{load_dataset, synth_generate, write_dataset, Split};
use cslr_core::metrics::{edit_alignment, CorpusWer};
use cslr_core::model::Model;
use cslr_core::train::{evaluate, probe_signer_accuracy, Trainer};
use cslr_core::Error;

#[derive(Parser)]
#[command(name = "cslr", version, about = "Continuous sign language recognition on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Replace a non-empty output directory
        #[arg(long)]
        force: bool,
    },
    /// Train a model, writing config.txt, train.log and checkpoints to --out
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_sac: bool,
        #[arg(long)]
        no_sec: bool,
        #[arg(long)]
        no_srm: bool,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Resume from a checkpoint; its configuration is used
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Corpus WER of a checkpoint on one split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Beam width; 0 decodes greedily
        #[arg(long, default_value_t = DEFAULT_BEAM)]
        beam: usize,
        /// Write per-sample id/ref/hyp/wer lines here
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// WER between two line-aligned gloss files
    Wer { reference: PathBuf, hypothesis: PathBuf },
    /// Signer-probe accuracy on frozen visual features
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Lib(Error::Config(_)) => 1,
            Failure::Lib(Error::NonFinite(_)) => 3,
            Failure::Lib(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Lib(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_sets(&mut cfg, &args.set)?;
    Ok(cfg)
}

fn apply_sets(cfg: &mut RunConfig, sets: &[String]) -> CliResult<()> {
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn cmd_synth(cfg: &ConfigArgs, out: &Path, seed: Option<u64>, force: bool) -> CliResult<()> {
    let mut run = load_config(cfg)?;
    if let Some(s) = seed {
        run.synth.seed = s;
    }
    let non_empty = out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            return Err(Failure::Usage(format!(
                "{} exists and is not empty (use --force to replace it)",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(|e| io_err(out, e))?;
    }
    let ds = synth_generate(&run.synth)?;
    write_dataset(out, &ds)?;
    write_file(&out.join("config.txt"), &run.to_text())?;
    println!("wrote {} samples to {}", ds.samples.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: &ConfigArgs,
    data: &Path,
    out: &Path,
    no_sac: bool,
    no_sec: bool,
    no_srm: bool,
    lambda: Option<f64>,
    epochs: Option<usize>,
    from: Option<&Path>,
) -> CliResult<()> {
    let ds = load_dataset(data)?;
    let mut trainer = match from {
        Some(ckpt) => {
            if cfg.config.is_some() || !cfg.set.is_empty() || no_sac || no_sec || no_srm || lambda.is_some() {
                return Err(Failure::Usage(
                    "--from resumes with the checkpoint's configuration; only --epochs may change".into(),
                ));
            }
            Trainer::load(ckpt)?
        }
        None => {
            let mut run = load_config(cfg)?;
            run.model.sac &= !no_sac;
            run.model.sec &= !no_sec;
            run.model.srm &= !no_srm;
            if let Some(l) = lambda {
                run.model.lambda = l;
            }
            let model = Model::new(run.model_for(&ds)?)?;
            Trainer::new(model, run.train)?
        }
    };
    if let Some(e) = epochs {
        trainer.config.epochs = e;
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let effective = RunConfig {
        synth: Default::default(),
        model: trainer.model.config.clone(),
        window: Some(trainer.model.config.lt.window),
        train: trainer.config.clone(),
    };
    write_file(&out.join("config.txt"), &effective.to_text())?;
    let log_path = out.join("train.log");
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(from.is_some())
        .write(true)
        .truncate(from.is_none())
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let summary = trainer.fit(&ds, Some(out), &mut log)?;
    log.flush().map_err(|e| io_err(&log_path, e))?;
    println!(
        "trained {} steps ({} samples skipped); epoch {} lr {:e}",
        summary.steps, summary.skipped, trainer.state.epoch, trainer.state.lr
    );
    if let Some(w) = trainer.state.best_dev_wer {
        println!("best dev WER\t{:.2}", 100.0 * w);
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, split: &str, beam: usize, report: Option<&Path>) -> CliResult<()> {
    let split = Split::parse(split).map_err(|e| Failure::Usage(e.to_string()))?;
    let trainer = Trainer::load(ckpt)?;
    let ds = load_dataset(data)?;
    let samples = ds.split(split);
    let method = if beam == 0 { DecodeMethod::Greedy } else { DecodeMethod::Beam(beam) };
    let rep = evaluate(&trainer.model, &samples, &ds.vocab, method, trainer.config.infer_drop)?;
    if let Some(p) = report {
        write_file(p, &rep.to_text())?;
    }
    println!("WER\t{:.2}", 100.0 * rep.wer);
    Ok(())
}

fn read_lines(path: &Path) -> CliResult<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

fn cmd_wer(reference: &Path, hypothesis: &Path) -> CliResult<()> {
    let refs = read_lines(reference)?;
    let hyps = read_lines(hypothesis)?;
    if refs.len() != hyps.len() {
        return Err(Failure::Lib(Error::Format {
            path: hypothesis.to_path_buf(),
            msg: format!("{} lines, reference has {}", hyps.len(), refs.len()),
        }));
    }
    let mut corpus = CorpusWer::default();
    for (i, (r, h)) in refs.iter().zip(&hyps).enumerate() {
        let a = edit_alignment(r, h);
        corpus.add(r, h);
        let w = if a.ref_len == 0 {
            "n/a".to_string()
        } else {
            format!("{:.2}", 100.0 * a.errors() as f64 / a.ref_len as f64)
        };
        println!(
            "{}\tsub={} del={} ins={} ref={}\t{}",
            i + 1,
            a.substitutions,
            a.deletions,
            a.insertions,
            a.ref_len,
            w
        );
    }
    println!("WER\t{:.2}", 100.0 * corpus.wer()?);
    Ok(())
}

fn cmd_probe(ckpt: &Path, data: &Path) -> CliResult<()> {
    let trainer = Trainer::load(ckpt)?;
    let ds = load_dataset(data)?;
    let acc = probe_signer_accuracy(&trainer.model, &ds)?;
    println!("probe_acc\t{acc:.4}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { cfg, out, seed, force } => cmd_synth(&cfg, &out, seed, force),
        Command::Train {
            cfg,
            data,
            out,
            no_sac,
            no_sec,
            no_srm,
            lambda,
            epochs,
            from,
        } => cmd_train(&cfg, &data, &out, no_sac, no_sec, no_srm, lambda, epochs, from.as_deref()),
        Command::Eval {
            ckpt,
            data,
            split,
            beam,
            report,
        } => cmd_eval(&ckpt, &data, &split, beam, report.as_deref()),
        Command::Wer { reference, hypothesis } => cmd_wer(&reference, &hypothesis),
        Command::Probe { ckpt, data } => cmd_probe(&ckpt, &data),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
