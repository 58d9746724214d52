use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nlcs::checkpoint::load_training_state;
use nlcs::config::{ModelConfig, TrainConfig};
use nlcs::data::Dataset;
use nlcs::measurement::export_affinity;
use nlcs::metrics::{psnr, ssim};
use nlcs::pgm::{read_pgm, write_pgm};
use nlcs::train::train;
use nlcs::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "nlcs",
    about = "Block-based compressed sensing with non-local attention",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MatrixMode {
    Fixed,
    Learned,
}

#[derive(Args)]
struct ModelFlags {
    /// key=value overrides, one per line; '#' starts a comment
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sampling rate in (0, 1]
    #[arg(long)]
    rate: Option<f64>,
    /// RNG seed (NLCS_SEED environment variable takes precedence)
    #[arg(long)]
    seed: Option<u64>,
    /// Sampling matrix: fixed random or jointly learned
    #[arg(long, value_enum)]
    matrix: Option<MatrixMode>,
    /// Train without the affinity coupling loss
    #[arg(long)]
    no_coupling: bool,
    /// Disable the measurement-domain non-local module
    #[arg(long)]
    no_nlm: bool,
    /// Collapse the reconstruction network to a single scale
    #[arg(long)]
    no_msn: bool,
    /// Disable feature-domain attention
    #[arg(long)]
    no_nlf: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of PGM images
    Train {
        #[command(flatten)]
        model: ModelFlags,
        /// Directory of .pgm training images
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for checkpoints and the loss log
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Print one line per optimizer step
        #[arg(long)]
        verbose: bool,
    },
    /// Reconstruct one image through a trained model
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input .pgm image
        #[arg(long)]
        input: PathBuf,
        /// Output .pgm path
        #[arg(long)]
        out: PathBuf,
        /// Directory to receive measurement-affinity CSV + heatmap
        #[arg(long)]
        dump_affinity: Option<PathBuf>,
    },
    /// Report PSNR/SSIM of a model over a directory of images
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Optional CSV report path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in numerical diagnostic suite
    Selfcheck,
}

/// Apply `key=value` lines from a config file; unknown keys are usage errors.
fn apply_config_file(
    path: &Path,
    mc: &mut ModelConfig,
    tc: &mut TrainConfig,
) -> Result<(), Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected key=value, got '{line}'",
                path.display(),
                lineno + 1
            ))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |e: &dyn std::fmt::Display| {
            Error::Config(format!(
                "{}:{}: invalid value for {key}: {e}",
                path.display(),
                lineno + 1
            ))
        };
        macro_rules! parse {
            () => {
                value.parse().map_err(|e| bad(&e))?
            };
        }
        let parse_list = |value: &str| -> Result<Vec<usize>, Error> {
            value
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| bad(&e))
        };
        match key {
            "scales" => mc.scales = parse!(),
            "nonlocal_per_scale" => mc.nonlocal_per_scale = parse!(),
            "channels" => mc.channels = parse_list(value)?,
            "down_branches" => mc.down_branches = parse!(),
            "up_branches" => mc.up_branches = parse!(),
            "down_blocks" => mc.down_blocks = parse!(),
            "up_blocks" => mc.up_blocks = parse!(),
            "nonlocal_blocks" => mc.nonlocal_blocks = parse_list(value)?,
            "pool_factors" => mc.pool_factors = parse_list(value)?,
            "gamma" => mc.gamma = parse!(),
            "gamma_u" => mc.gamma_u = parse!(),
            "gamma_v" => mc.gamma_v = parse!(),
            "patch_size" => tc.patch_size = parse!(),
            "batch_size" => tc.batch_size = parse!(),
            "epochs" => tc.epochs = parse!(),
            "iterations_per_epoch" => tc.iterations_per_epoch = parse!(),
            "base_lr" => tc.base_lr = parse!(),
            "lr_decay_factor" => tc.lr_decay_factor = parse!(),
            "lr_decay_every" => tc.lr_decay_every = parse!(),
            "weight_decay" => tc.weight_decay = parse!(),
            "beta1" => tc.beta1 = parse!(),
            "beta2" => tc.beta2 = parse!(),
            "epsilon" => tc.epsilon = parse!(),
            "seed" => tc.seed = parse!(),
            "rate" => tc.rate = parse!(),
            "block_size" => tc.block_size = parse!(),
            _ => {
                return Err(Error::Config(format!(
                    "{}:{}: unknown configuration key '{key}'",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(())
}

fn env_seed() -> Result<Option<u64>, Error> {
    match std::env::var("NLCS_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|e| Error::Config(format!("NLCS_SEED: {e}"))),
        Err(_) => Ok(None),
    }
}

fn build_configs(flags: &ModelFlags) -> Result<(ModelConfig, TrainConfig), Error> {
    let mut mc = ModelConfig::default();
    let mut tc = TrainConfig::default();
    if let Some(path) = &flags.config {
        apply_config_file(path, &mut mc, &mut tc)?;
    }
    if let Some(rate) = flags.rate {
        tc.rate = rate;
    }
    if let Some(seed) = flags.seed {
        tc.seed = seed;
    }
    if let Some(seed) = env_seed()? {
        tc.seed = seed;
    }
    if let Some(mode) = flags.matrix {
        tc.learned_matrix = mode == MatrixMode::Learned;
    }
    mc.enable_coupling = mc.enable_coupling && !flags.no_coupling;
    mc.enable_nlm = mc.enable_nlm && !flags.no_nlm;
    mc.enable_msn = mc.enable_msn && !flags.no_msn;
    mc.enable_nlf = mc.enable_nlf && !flags.no_nlf;
    mc.validate()?;
    tc.validate()?;
    Ok((mc, tc))
}

fn cmd_train(
    flags: &ModelFlags,
    dataset: &Path,
    out: &Path,
    resume: Option<&Path>,
    epochs: Option<usize>,
    iterations: Option<usize>,
    verbose: bool,
) -> Result<(), Error> {
    let (mc, mut tc) = build_configs(flags)?;
    tc.data_dir = dataset.to_path_buf();
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    if let Some(i) = iterations {
        tc.iterations_per_epoch = i;
    }
    let mut progress = |log: &nlcs::train::IterationLog| {
        if verbose {
            println!(
                "step {:>6}  epoch {:>3}  lr {:.3e}  loss {:.6e}  (rec {:.6e}  meas {:.3e}  feat {:.3e})",
                log.global_step,
                log.epoch,
                log.learning_rate,
                log.total,
                log.reconstruction,
                log.measurement_coupling,
                log.feature_coupling
            );
        }
    };
    let report = train(&mc, &tc, out, resume, Some(&mut progress))?;
    println!(
        "trained {} epoch(s); final loss {:.6e}; checkpoint {}",
        report.epochs_run,
        report.final_loss,
        report.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_reconstruct(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    dump_affinity: Option<&Path>,
) -> Result<(), Error> {
    let state = load_training_state(checkpoint)?;
    let image = read_pgm(input)?;
    let output = state.model.forward(&image)?;
    if !output.reconstruction.is_finite() {
        return Err(Error::NonFinite("reconstruction".into()));
    }
    write_pgm(out, &output.reconstruction)?;
    let p = psnr(&image, &output.reconstruction, 1.0)?;
    let s = ssim(&image, &output.reconstruction, 1.0)?;
    println!("reconstructed {} -> {}", input.display(), out.display());
    println!("psnr {:.4} dB  ssim {:.5}", p, s);
    if let Some(dir) = dump_affinity {
        let r = output.measurement_affinity.as_ref().ok_or_else(|| {
            Error::Config(
                "cannot dump the measurement affinity: the module is disabled in this model"
                    .into(),
            )
        })?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        export_affinity(r, &dir.join("affinity.csv"), &dir.join("affinity.pgm"))?;
        println!(
            "wrote {}x{} measurement affinity to {}",
            r.rows(),
            r.cols(),
            dir.display()
        );
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, dataset: &Path, out: Option<&Path>) -> Result<(), Error> {
    let state = load_training_state(checkpoint)?;
    let ds = Dataset::load(dataset)?;
    let mut csv = String::from("image,psnr_db,ssim\n");
    let (mut sum_p, mut sum_s) = (0.0, 0.0);
    for (path, image) in &ds.images {
        let output = state.model.forward(image)?;
        let p = psnr(image, &output.reconstruction, 1.0)?;
        let s = ssim(image, &output.reconstruction, 1.0)?;
        let name = path.file_name().unwrap_or_default().to_string_lossy();
        println!("{name}: psnr {p:.4} dB  ssim {s:.5}");
        csv.push_str(&format!("{name},{p:.6},{s:.6}\n"));
        sum_p += p;
        sum_s += s;
    }
    let n = ds.images.len() as f64;
    println!("mean over {} image(s): psnr {:.4} dB  ssim {:.5}", ds.images.len(), sum_p / n, sum_s / n);
    if let Some(path) = out {
        std::fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_selfcheck() -> Result<(), Error> {
    let results = nlcs::selfcheck::run_all()?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<4} {:<28} max err {:>12.4e}  (tolerance {:.1e})",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.max_err,
            r.tolerance
        );
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::Contract(format!(
            "{failed} of {} self-checks failed",
            results.len()
        )));
    }
    println!("all {} self-checks passed", results.len());
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parameter(_) => EXIT_USAGE,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) | Error::Dimension { .. } => {
            EXIT_DATA
        }
        Error::NonFinite(_) | Error::Contract(_) => EXIT_INVARIANT,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes; true usage errors are not
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train {
            model,
            dataset,
            out,
            resume,
            epochs,
            iterations,
            verbose,
        } => cmd_train(
            model,
            dataset,
            out,
            resume.as_deref(),
            *epochs,
            *iterations,
            *verbose,
        ),
        Command::Reconstruct {
            checkpoint,
            input,
            out,
            dump_affinity,
        } => cmd_reconstruct(checkpoint, input, out, dump_affinity.as_deref()),
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => cmd_eval(checkpoint, dataset, out.as_deref()),
        Command::Selfcheck => cmd_selfcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
