use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cipnet::checkpoint;
use cipnet::config::{Ablation, Precision, RunConfig};
use cipnet::data;
use cipnet::eval::{self, Scenario};
use cipnet::gradsuite;
use cipnet::run::{self, RunDir};
use cipnet::{Error, Result};
use cipnet_tensor::{DType, Scalar};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cipnet", version, about = "Exemplar-free continual learning with shared interpretable prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Til,
    Cil,
}

#[derive(Clone, Copy, ValueEnum)]
enum ImageFormat {
    Png,
    Ppm,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as train/ and test/ class folders.
    Generate {
        #[arg(long, default_value_t = 16)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 56)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ImageFormat::Png)]
        format: ImageFormat,
    },
    /// Train the task stream described by a config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue after the newest checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Accuracy of a checkpoint on every task it has learned.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = ScenarioArg::Cil)]
        scenario: ScenarioArg,
    },
    /// Local explanation of one image, or prototype galleries.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "gallery", required_unless_present = "gallery")]
        image: Option<PathBuf>,
        #[arg(long)]
        gallery: bool,
        #[arg(long, value_enum, default_value_t = ScenarioArg::Cil)]
        scenario: ScenarioArg,
        /// Head consulted in TIL mode.
        #[arg(long, default_value_t = 0)]
        task: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerun a config with one component removed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// LR, LD, LH, tau or LD+LH.
        #[arg(long)]
        drop: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every primitive and loss term.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn scenario(arg: ScenarioArg, task: usize) -> Scenario {
    match arg {
        ScenarioArg::Til => Scenario::Til(task),
        ScenarioArg::Cil => Scenario::Cil,
    }
}

fn cmd_generate(classes: usize, per_class: usize, size: usize, seed: u64, out: &Path, format: ImageFormat) -> Result<()> {
    let ds = data::generate_synthetic(classes, per_class, size, seed)?;
    let ext = match format {
        ImageFormat::Png => "png",
        ImageFormat::Ppm => "ppm",
    };
    let files = data::export_dataset(&ds, out, ext)?;
    println!("wrote {} images to {} (digest {})", files.len(), out.display(), ds.digest());
    Ok(())
}

fn train_with<T: Scalar>(cfg: &RunConfig, dir: &RunDir, resume: bool) -> Result<()> {
    let outcome = run::train::<T>(cfg, Some(dir), resume)?;
    let r = &outcome.report;
    for (t, (til, cil)) in r.til.iter().zip(&r.cil).enumerate() {
        println!("after task {t}: TIL {} CIL {}", fmt_acc(til), fmt_acc(cil));
    }
    if let (Some(til), Some(cil)) = (r.final_til(), r.final_cil()) {
        println!("final average TIL {til:.4} CIL {cil:.4}");
    }
    println!("run directory: {}", dir.root.display());
    Ok(())
}

fn fmt_acc(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|a| format!("{a:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn cmd_train(cfg: &RunConfig, dir: &RunDir, resume: bool) -> Result<()> {
    match cfg.trainer.precision {
        Precision::F32 => train_with::<f32>(cfg, dir, resume),
        Precision::F64 => train_with::<f64>(cfg, dir, resume),
    }
}

fn eval_with<T: Scalar>(bytes: &[u8], arg: ScenarioArg) -> Result<()> {
    let ck = checkpoint::decode::<T>(bytes)?;
    let stream = run::build_stream(&ck.config)?;
    let learned = ck.model.heads.len();
    if learned == 0 {
        return Err(Error::Range("checkpoint has no trained heads".into()));
    }
    let mut accs = Vec::new();
    for t in 0..learned {
        let test = &stream.task(t).test;
        let (p, _) = eval::presence(&ck.model, test)?;
        let pred = eval::classify(&ck.model, &p, scenario(arg, t), ck.config.eval.presence_threshold)?;
        let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
        let a = eval::accuracy(&pred, &labels);
        println!("task {t}: {a:.4}");
        accs.push(a);
    }
    let name = match arg {
        ScenarioArg::Til => "TIL",
        ScenarioArg::Cil => "CIL",
    };
    println!("final average {name} {:.4}", eval::final_average(&accs));
    Ok(())
}

fn explain_with<T: Scalar>(bytes: &[u8], image: Option<&Path>, arg: ScenarioArg, task: usize, out: &Path) -> Result<()> {
    let ck = checkpoint::decode::<T>(bytes)?;
    let sc = scenario(arg, task);
    if let Scenario::Til(t) = sc {
        if t >= ck.model.heads.len() {
            return Err(Error::Range(format!("task {t} but the checkpoint has {} heads", ck.model.heads.len())));
        }
    }
    let ev = &ck.config.eval;
    match image {
        Some(path) => {
            let px = data::load_image(path, ck.config.data.image_size)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            let target = out.join(format!("{stem}_explained.png"));
            let e = eval::export_local_explanation(&ck.model, &px, sc, ev.presence_threshold, ev.importance_threshold, &target)?;
            println!("predicted class {} with {} prototypes; wrote {}", e.predicted, e.prototypes.len(), target.display());
        }
        None => {
            let stream = run::build_stream(&ck.config)?;
            let files = eval::export_prototype_gallery(&ck.model, &stream, sc, ev.top_k, ev.importance_threshold, out)?;
            println!("wrote {} gallery files to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<bool> {
    let entries = gradsuite::run(seed)?;
    let mut ok = true;
    for e in &entries {
        let status = if e.passed() { "ok" } else { "FAIL" };
        ok &= e.passed();
        println!("{:<18} {:>10.3e}  (< {:.0e})  {status}", e.name, e.max_rel_error, e.tolerance());
    }
    let max = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    println!("{} checks, max relative error {max:.3e}", entries.len());
    Ok(ok)
}

fn run_cli(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate {
            classes,
            per_class,
            size,
            seed,
            out,
            format,
        } => cmd_generate(classes, per_class, size, seed, &out, format)?,
        Command::Train { config, out, resume } => {
            let (cfg, text) = RunConfig::load(&config)?;
            cmd_train(&cfg, &RunDir { root: out, config_text: text }, resume)?;
        }
        Command::Eval { checkpoint: path, scenario } => {
            let bytes = checkpoint::read_bytes(&path)?;
            match checkpoint::peek_dtype(&bytes)? {
                DType::F32 => eval_with::<f32>(&bytes, scenario)?,
                DType::F64 => eval_with::<f64>(&bytes, scenario)?,
            }
        }
        Command::Explain {
            checkpoint: path,
            image,
            gallery: _,
            scenario,
            task,
            out,
        } => {
            let bytes = checkpoint::read_bytes(&path)?;
            match checkpoint::peek_dtype(&bytes)? {
                DType::F32 => explain_with::<f32>(&bytes, image.as_deref(), scenario, task, &out)?,
                DType::F64 => explain_with::<f64>(&bytes, image.as_deref(), scenario, task, &out)?,
            }
        }
        Command::Ablate { config, drop, out } => {
            let (cfg, _) = RunConfig::load(&config)?;
            let ablation: Ablation = drop.parse()?;
            let cfg = cfg.ablated(ablation);
            cfg.validate()?;
            let text = format!("# {} with {drop} removed\n{}", config.display(), cfg.to_toml());
            cmd_train(&cfg, &RunDir { root: out, config_text: text }, false)?;
        }
        Command::Gradcheck { seed } => {
            if !cmd_gradcheck(seed)? {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run_cli(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
