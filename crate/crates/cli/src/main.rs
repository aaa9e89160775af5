use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gclrec::data::{read_pairs, stratified_split, write_pairs};
use gclrec::harness::{
    evaluate_checkpoint, load_dataset, prepare, svd_report, train, write_synth, HarnessError, RunConfig, RunLog,
    SynthParams,
};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Graph collaborative filtering with an SVD-augmented contrastive view.
#[derive(Debug, Parser)]
#[command(name = "gclrec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct ConfigArgs {
    /// JSON config file (flat object).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides, e.g. `--set embed_dim=64`. Later values win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides written as `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    rest: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train, select by validation recall, report test metrics.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a seeded block-structured dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        users_per_block: usize,
        #[arg(long, default_value_t = 50)]
        items_per_block: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 0.05)]
        noise_p: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Extra uniform train pairs as a fraction of the train size.
        #[arg(long, default_value_t = 0.0)]
        extra_noise: f64,
    },
    /// Top singular values of the normalized adjacency and residual.
    SvdReport(ConfigArgs),
    /// Per-user random train/val/test split of one interaction file.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.set)?;
    cfg.apply_overrides(&args.rest)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: &ConfigArgs) -> Result<(), HarnessError> {
    let cfg = load_config(args)?;
    let mut log = RunLog::new(cfg.log_path.as_deref(), true)?;
    let ds = load_dataset(&cfg)?;
    let out = train(&ds, &cfg, &mut log)?;
    print!("{}", out.test.table());
    Ok(())
}

fn cmd_eval(args: &ConfigArgs, checkpoint: &Path) -> Result<(), HarnessError> {
    let cfg = load_config(args)?;
    let ds = load_dataset(&cfg)?;
    let res = evaluate_checkpoint(&ds, &cfg, checkpoint)?;
    print!("{}", res.table());
    Ok(())
}

fn cmd_svd_report(args: &ConfigArgs) -> Result<(), HarnessError> {
    let cfg = load_config(args)?;
    let ds = load_dataset(&cfg)?;
    let prep = prepare(&ds, &cfg)?;
    println!("{}", ds.summary_line());
    for line in svd_report(&prep.a_norm, &prep.svd).lines() {
        println!("{line}");
    }
    Ok(())
}

fn cmd_split(input: &Path, out: &Path, val: f64, test: f64, seed: u64) -> Result<(), HarnessError> {
    if !(val >= 0.0 && test >= 0.0 && val + test < 1.0) {
        return Err(HarnessError::Config("fractions must be >= 0 and sum to less than 1".into()));
    }
    let pairs = read_pairs(input)?;
    let split = stratified_split(&pairs, val, test, seed);
    std::fs::create_dir_all(out).map_err(|source| HarnessError::Io { path: out.to_path_buf(), source })?;
    write_pairs(&out.join("train.txt"), &split.train)?;
    write_pairs(&out.join("val.txt"), &split.validation)?;
    write_pairs(&out.join("test.txt"), &split.test)?;
    println!(
        "split train={} val={} test={} into {}",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval { checkpoint, cfg } => cmd_eval(&cfg, &checkpoint),
        Command::SvdReport(args) => cmd_svd_report(&args),
        Command::Synth { out, users_per_block, items_per_block, blocks, noise_p, seed, extra_noise } => {
            let p = SynthParams { users_per_block, items_per_block, blocks, noise_p, seed, extra_noise, ..SynthParams::default() };
            let d = write_synth(&out, &p)?;
            println!(
                "synth train={} val={} test={} into {}",
                d.train.len(),
                d.validation.len(),
                d.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Split { input, out, val_fraction, test_fraction, seed } => {
            cmd_split(&input, &out, val_fraction, test_fraction, seed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GCLREC_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
