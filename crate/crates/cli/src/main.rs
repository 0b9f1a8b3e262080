use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use prefcap_cli::config::{parse_overrides, resolve, RunConfig};
use prefcap_cli::stages;

#[derive(Parser)]
#[command(name = "prefcap", version, about = "Preference-tuned audio captioning on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted overrides such as `--rlhf.epochs 5` or `--world.seed=3`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct AnnotationArgs {
    /// Pair pool (JSONL of pair specs); overrides io.annotation_pairs.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Vote log; overrides io.vote_log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Overrides annotate.port.
    #[arg(long)]
    port: Option<u16>,
    /// Overrides annotate.order_seed.
    #[arg(long)]
    order_seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world: audio embeddings, events and references.
    SynthGen(Common),
    /// Maximum-likelihood pretraining of the caption policy.
    PolicyPretrain(Common),
    /// Simulated annotator preferences labelled by the event oracle.
    PrefsOracle(Common),
    /// Unanimous filter, 80/20 split and agreement statistics.
    PrefsFilter(Common),
    /// Add mismatched-caption pairs to the training split.
    PrefsAugment(Common),
    /// Bottom-k held-out clips by reward-model score.
    PrefsChallenging(Common),
    /// Train the reward model on the augmented preferences.
    RewardTrain(Common),
    /// Fine-tune the pretrained policy against the reward model.
    RlhfTrain(Common),
    /// Caption the held-out clips with a policy checkpoint.
    Decode(Common),
    /// Compare two caption files on the held-out clips.
    Evaluate(Common),
    /// Serve the annotation API and static UI.
    AnnotateServe {
        #[command(flatten)]
        annotation: AnnotationArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Export the vote log as preference records.
    ExportPrefs {
        #[command(flatten)]
        annotation: AnnotationArgs,
        #[command(flatten)]
        common: Common,
    },
}

fn absolute(path: PathBuf) -> Result<String> {
    Ok(std::path::absolute(path)?.to_string_lossy().into_owned())
}

fn load(common: &Common, annotation: Option<&AnnotationArgs>) -> Result<RunConfig> {
    let mut overrides = parse_overrides(&common.overrides)?;
    if let Some(a) = annotation {
        if let Some(p) = &a.pairs {
            overrides.push(("io.annotation_pairs".into(), absolute(p.clone())?));
        }
        if let Some(p) = &a.log {
            overrides.push(("io.vote_log".into(), absolute(p.clone())?));
        }
        if let Some(p) = a.port {
            overrides.push(("annotate.port".into(), p.to_string()));
        }
        if let Some(s) = a.order_seed {
            overrides.push(("annotate.order_seed".into(), s.to_string()));
        }
    }
    resolve(common.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen(c) => stages::synth_gen(&load(&c, None)?),
        Command::PolicyPretrain(c) => stages::policy_pretrain(&load(&c, None)?),
        Command::PrefsOracle(c) => stages::prefs_oracle(&load(&c, None)?),
        Command::PrefsFilter(c) => stages::prefs_filter(&load(&c, None)?),
        Command::PrefsAugment(c) => stages::prefs_augment(&load(&c, None)?),
        Command::PrefsChallenging(c) => stages::prefs_challenging(&load(&c, None)?),
        Command::RewardTrain(c) => stages::reward_train(&load(&c, None)?),
        Command::RlhfTrain(c) => stages::rlhf_train(&load(&c, None)?),
        Command::Decode(c) => stages::decode_captions(&load(&c, None)?),
        Command::Evaluate(c) => stages::evaluate(&load(&c, None)?),
        Command::AnnotateServe { annotation, common } => stages::annotate_serve(&load(&common, Some(&annotation))?),
        Command::ExportPrefs { annotation, common } => stages::export_prefs(&load(&common, Some(&annotation))?),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            eprintln!("{}", serde_json::json!({"error": e.to_string(), "causes": causes}));
            ExitCode::FAILURE
        }
    }
}
