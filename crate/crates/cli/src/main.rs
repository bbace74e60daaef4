mod config;
mod stages;

use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: unknown stage/flag, malformed value, missing flag.
    Usage(String),
    /// The stage itself failed: I/O, corrupt files, training errors.
    Runtime(String),
}

impl From<medivlad_core::Error> for CliError {
    fn from(e: medivlad_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

const USAGE: &str = "\
usage: medivlad <stage> [--flag value]...

stages:
  synth      generate a synthetic dataset        (--out DIR)
  pretrain   label-free self-distillation        (--data DIR --out CKPT)
  finetune   supervised frame finetuning         (--data DIR --checkpoint CKPT --out CKPT)
  videocls   train the video-level aggregator    (--data DIR --checkpoint CKPT --out CKPT)
  eval       evaluate a checkpoint               (--data DIR --checkpoint CKPT --out JSON)
  attention  export CLS attention maps           (--data DIR --checkpoint CKPT --out DIR)

common flags:
  --config FILE    JSON file of flat dotted keys; flags override it
  --seed N         master seed (falls back to MEDIVLAD_SEED, then 0)
  --profile NAME   encoder profile: tiny | paper
  --folds N        cross-validation fold count (default 4)
  --fold N         held-out fold index (default 0)

stage hyperparameters use dotted flags matching the config keys, e.g.
  --pretrain.lr 1.25e-4  --finetune.epochs 100  --videocls.kind dual
";

/// Split argv into (stage, [(flag, value)]).
fn parse_argv(args: &[String]) -> Result<(String, Vec<(String, String)>), CliError> {
    let stage = match args.first() {
        Some(s) if !s.starts_with("--") => s.clone(),
        _ => return Err(CliError::Usage("expected a stage name".into())),
    };
    let mut flags = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let arg = &args[i];
        let name = arg
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("expected --flag, got {arg}")))?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?;
        flags.push((name.to_string(), value.clone()));
        i += 2;
    }
    Ok((stage, flags))
}

fn run(args: &[String]) -> Result<(), CliError> {
    let (stage, flags) = parse_argv(args)?;
    let cfg = config::RunConfig::from_flags(&flags)?;
    match stage.as_str() {
        "synth" => stages::synth(&cfg),
        "pretrain" => stages::pretrain(&cfg),
        "finetune" => stages::finetune(&cfg),
        "videocls" => stages::videocls(&cfg),
        "eval" => stages::eval(&cfg),
        "attention" => stages::attention(&cfg),
        other => Err(CliError::Usage(format!("unknown stage: {other}"))),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::from(0),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
