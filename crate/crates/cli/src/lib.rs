//! The `graft` command line: one subcommand per pipeline stage, plus
//! composition, an interactive chat and checkpoint inspection.

use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use graft_core::eval::MAX_ANSWER;
use graft_core::numerics::Rng;
use graft_core::pipeline;
use graft_core::world::vocab::detokenize;
use graft_core::{Checkpoint, Config, Error};

mod chat;

pub use chat::{ChatSession, Models};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "PANDAGPT_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVARIANT: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "graft",
    version,
    about = "Graft a frozen joint embedding space onto a frozen tiny language model"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Config file of `key=value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the bridge training conversations.
    GenData,
    /// Train the joint embedding encoders.
    TrainBinder,
    /// Pre-train the language model.
    PretrainLm,
    /// Train the projection and LoRA adapters.
    TrainBridge,
    /// Run every evaluation and write the report.
    Eval,
    /// Answer a prompt grounded in several composed scenes.
    Compose(ComposeArgs),
    /// Interactive session reading commands from standard input.
    Chat,
    /// List a checkpoint's metadata and tensors.
    InspectCkpt(InspectArgs),
}

#[derive(Args, Debug)]
pub struct ComposeArgs {
    /// `modality:object:attribute`; object and attribute are ids or words. Repeatable.
    #[arg(long = "scene", required = true, value_name = "SPEC")]
    pub scenes: Vec<String>,
    /// One weight per scene; defaults to equal weights.
    #[arg(long = "weight")]
    pub weights: Vec<f64>,
    #[arg(long, default_value = "what is shown ?")]
    pub prompt: String,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub path: PathBuf,
    /// Re-save the checkpoint to this path after loading it.
    #[arg(long, value_name = "PATH")]
    pub rewrite: Option<PathBuf>,
}

/// Resolves the effective config: defaults, then the file, then the seed
/// variable, then `--set` overrides.
pub fn resolve_config(common: &Common, env_seed: Option<&str>) -> graft_core::Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = env_seed {
        cfg.set("seed", s).map_err(|_| Error::Config {
            key: SEED_ENV.into(),
            msg: format!("cannot parse `{s}` as a seed"),
        })?;
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Exit code for an error: invariant violations get their own code.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_invariant_violation() {
        EXIT_INVARIANT
    } else {
        EXIT_USAGE
    }
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, S>(
    argv: I,
    env_seed: Option<&str>,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(&cli, env_seed, input, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(
    cli: &Cli,
    env_seed: Option<&str>,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> graft_core::Result<()> {
    if let Command::InspectCkpt(a) = &cli.command {
        return inspect(a, out);
    }
    let cfg = resolve_config(&cli.common, env_seed)?;
    match &cli.command {
        Command::GenData => {
            let records = pipeline::gen_data(&cfg)?;
            writeln!(
                out,
                "wrote {} records to {}",
                records.len(),
                pipeline::out_path(&cfg, pipeline::DATA_FILE).display()
            )?;
        }
        Command::TrainBinder => {
            let (binder, r) = pipeline::binder_stage(&cfg)?;
            let worst = r.retrieval.iter().map(|x| x.2).fold(1.0, f64::min);
            writeln!(
                out,
                "binder {} steps, final loss {:.4}, worst R@1 {worst:.3}, checksum {}",
                r.losses.len(),
                r.losses.last().copied().unwrap_or(f64::NAN),
                binder.checksum()
            )?;
        }
        Command::PretrainLm => {
            let (lm, r) = pipeline::lm_stage(&cfg)?;
            writeln!(
                out,
                "lm {} steps, validation perplexity {:.3} (untrained {:.3}), checksum {}",
                r.losses.len(),
                r.val_perplexity,
                r.initial_perplexity,
                lm.checksum()
            )?;
        }
        Command::TrainBridge => {
            let (bridge, r) = pipeline::bridge_stage(&cfg)?;
            let last = cfg.epochs.saturating_sub(1);
            writeln!(
                out,
                "bridge {} steps, epoch loss {:.4} -> {:.4}, trainable fraction {:.4}, checksum {}",
                r.log.len(),
                r.epoch_mean_loss(0),
                r.epoch_mean_loss(last),
                r.trainable_fraction(),
                bridge.checksum()
            )?;
        }
        Command::Eval => {
            let report = pipeline::eval_stage(&cfg)?;
            out.write_all(report.to_tsv().as_bytes())?;
            out.write_all(report.summary_text().as_bytes())?;
        }
        Command::Compose(a) => compose(&cfg, a, out)?,
        Command::Chat => {
            let models = Models::load(&cfg)?;
            let mut session = ChatSession::new(&models, cfg.seed, cfg.renormalize);
            session.run(input, out)?;
        }
        Command::InspectCkpt(_) => unreachable!("handled above"),
    }
    Ok(())
}

fn compose(cfg: &Config, a: &ComposeArgs, out: &mut dyn Write) -> graft_core::Result<()> {
    let weights = if a.weights.is_empty() {
        vec![1.0; a.scenes.len()]
    } else {
        a.weights.clone()
    };
    if weights.len() != a.scenes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scenes but {} weights",
            a.scenes.len(),
            weights.len()
        )));
    }
    let models = Models::load(cfg)?;
    let root = Rng::new(cfg.seed).derive("compose", 0);
    let mut parts = Vec::with_capacity(a.scenes.len());
    for (i, spec) in a.scenes.iter().enumerate() {
        let fields: Vec<&str> = spec.split(':').collect();
        let [m, o, at] = fields[..] else {
            return Err(Error::InvalidArgument(format!(
                "scene `{spec}` is not modality:object:attribute"
            )));
        };
        parts.push(models.encode(m, o, at, &mut root.derive("scene", i as u64))?);
    }
    let h = graft_core::composer::compose_with(&parts, &weights, cfg.renormalize)?;
    let answer = models
        .bridge
        .answer(&models.lm, Some(&h), &a.prompt, MAX_ANSWER)?;
    writeln!(out, "{}", detokenize(&answer))?;
    Ok(())
}

fn inspect(a: &InspectArgs, out: &mut dyn Write) -> graft_core::Result<()> {
    let ck = Checkpoint::load(&a.path)?;
    for (k, v) in &ck.metadata {
        writeln!(out, "meta\t{k}\t{v}")?;
    }
    for (name, t) in ck.tensors.iter() {
        writeln!(out, "tensor\t{name}\t{:?}", t.shape())?;
    }
    writeln!(
        out,
        "total\t{} tensors\t{} floats",
        ck.tensors.len(),
        ck.tensors.numel()
    )?;
    if let Some(dest) = &a.rewrite {
        ck.save(dest)?;
        writeln!(out, "rewrote {}", dest.display())?;
    }
    Ok(())
}
