//! Command-line front end. [`run_with`] is what the `contnet` binary calls;
//! it writes to the given streams and returns the process exit code.
//!
//! Exit codes: 0 on success, 1 for bad input (flags, configs, files,
//! patch divisibility), 2 for internal failures such as a failing gradient
//! check or a broken shape contract.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{deviation, golden, summarize, Include};
use crate::error::{Error, Result};
use crate::model::{
    build_network, make_ablation_config, shape_trace, AblationAxis, ModelConfig, ModelOverrides,
    Variant,
};
use crate::train::{
    evaluate, load_checkpoint, load_dataset, parse_lr_pair, save_checkpoint, save_dataset,
    synth_dataset, train_with, RunConfig, SynthSpec,
};
use crate::verify::gradient_suite;

#[derive(Parser, Debug)]
#[command(
    name = "contnet",
    version,
    about = "Convolution-transformer backbone: costs, checks and desk-scale training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer parameter and FLOP table with deltas against published costs.
    Summary(SummaryArgs),
    /// 64-bit finite-difference check of every primitive and a small network.
    Gradcheck {
        /// TOML file whose `[model]` table describes the network to check.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Feature-map shape after each stage.
    Shapes {
        #[arg(long, default_value = "m")]
        variant: String,
        #[arg(long, default_value = "224x224", value_parser = parse_size)]
        input: [usize; 2],
    },
    /// Writes a seeded synthetic classification dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value = "32x32", value_parser = parse_size)]
        size: [usize; 2],
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trains from a run config and writes a checkpoint.
    Train {
        #[command(flatten)]
        run: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Builds one ablation variant, summarizes it and optionally trains it.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SummaryArgs {
    #[arg(long, default_value = "m")]
    variant: String,
    /// Conv groups: a positive integer or `depthwise`.
    #[arg(long)]
    groups: Option<String>,
    /// `none`, `1d`, `2d`, `relative`, optionally suffixed `-image`.
    #[arg(long)]
    pe: Option<String>,
    /// `all-7`, `all-14`, `alternating` or `default`.
    #[arg(long)]
    patch_schedule: Option<String>,
    #[arg(long, value_parser = parse_size)]
    input: Option<[usize; 2]>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Overrides the recipe's seed; also seeds initialization.
    #[arg(long)]
    seed: Option<u64>,
    /// Print every n-th step.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    /// Choice on the axis; `conv/encoder` rates such as `0.2/0.005` for `lr`.
    #[arg(long)]
    choice: String,
    #[arg(long, default_value = "m")]
    variant: String,
    #[arg(long, value_parser = parse_size)]
    input: Option<[usize; 2]>,
    /// Train the variant: run config (its `[model]` table replaces `--variant`).
    #[arg(long, requires = "data")]
    config: Option<PathBuf>,
    #[arg(long, requires = "config")]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Tsv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Axis {
    Pe,
    Patch,
    Groups,
    Lr,
}

fn parse_size(s: &str) -> std::result::Result<[usize; 2], String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let dim = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| format!("bad extent {v:?}"))
    };
    Ok([dim(h)?, dim(w)?])
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::PatchDivisibility { .. }
        | Error::Format(_)
        | Error::Io(_)
        | Error::Diverged { .. } => 1,
        Error::Shape { .. } | Error::InvalidShape { .. } | Error::Contract(_) => 2,
    }
}

/// Parses `std::env::args_os()` and runs against stdout and stderr.
pub fn run() -> i32 {
    run_with(
        std::env::args_os(),
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    )
}

pub fn run_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn io(r: std::io::Result<()>) -> Result<()> {
    r.map_err(Error::Io)
}

fn preset(variant: &str, input: Option<[usize; 2]>) -> Result<ModelConfig> {
    let v: Variant = variant.parse()?;
    let mut cfg = ModelConfig::preset(v)?;
    if let Some(i) = input {
        cfg.input_size = i;
    }
    Ok(cfg)
}

fn read_run_config(path: &PathBuf) -> Result<RunConfig> {
    RunConfig::from_toml(&std::fs::read_to_string(path)?)
}

/// `[model]` table of a TOML file; other tables are ignored.
fn read_model_table(path: &PathBuf) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let model = table
        .remove("model")
        .unwrap_or_else(|| toml::Value::Table(Default::default()));
    let overrides: ModelOverrides = model
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    overrides.resolve()
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Summary(a) => summary(a, out).map(|_| 0),
        Command::Gradcheck { config, seed } => {
            let cfg = match config {
                Some(p) => read_model_table(&p)?,
                None => ModelConfig::micro(3),
            };
            gradcheck(&cfg, seed, out)
        }
        Command::Shapes { variant, input } => {
            let cfg = preset(&variant, Some(input))?;
            for (name, shape) in shape_trace(&cfg)? {
                io(writeln!(out, "{name:<8} {shape:?}"))?;
            }
            Ok(0)
        }
        Command::Synth {
            out: path,
            classes,
            count,
            size,
            seed,
        } => {
            let d = synth_dataset(&SynthSpec::new(classes, count, size, seed))?;
            save_dataset(&d, &path)?;
            io(writeln!(
                out,
                "wrote {} images of {}x{} in {} classes to {}",
                d.len(),
                size[0],
                size[1],
                d.class_count,
                path.display()
            ))?;
            Ok(0)
        }
        Command::Train { run, out: path } => {
            let rc = read_run_config(&run.config)?;
            let model_cfg = rc.model_config()?;
            train_and_save(model_cfg, rc, &run, Some(&path), out).map(|_| 0)
        }
        Command::Eval {
            ckpt,
            data,
            batch_size,
        } => {
            let m = load_checkpoint::<f32>(&ckpt)?;
            let d = load_dataset(&data, Some(m.config.num_classes))?;
            let acc = evaluate(&m, &d, batch_size)?;
            io(writeln!(out, "accuracy {acc:.4} on {} samples", d.len()))?;
            Ok(0)
        }
        Command::Ablate(a) => ablate(a, out).map(|_| 0),
    }
}

fn summary(a: SummaryArgs, out: &mut dyn Write) -> Result<()> {
    let standard = preset(&a.variant, None)?;
    let mut cfg = preset(&a.variant, a.input)?;
    if let Some(g) = &a.groups {
        cfg = make_ablation_config(&cfg, AblationAxis::Groups, g)?;
    }
    if let Some(pe) = &a.pe {
        cfg = make_ablation_config(&cfg, AblationAxis::Pe, pe)?;
    }
    if let Some(p) = &a.patch_schedule {
        cfg = make_ablation_config(&cfg, AblationAxis::PatchSize, p)?;
    }
    let m = build_network::<f32>(&cfg, 0)?;
    let [h, w] = cfg.input_size;
    let report = summarize(&m, [1, 3, h, w], Include::ALL)?;
    match a.format {
        Format::Text => {
            io(out.write_all(report.to_text().as_bytes()))?;
            let params = report.total_params() as f64 / 1e6;
            let flops = report.total_flops();
            let (layers, all) = (flops.layers as f64 / 1e9, flops.total() as f64 / 1e9);
            io(writeln!(out, "params {params:.2}M"))?;
            io(writeln!(
                out,
                "flops  {layers:.2}G layers only, {all:.2}G with attention products"
            ))?;
            match golden(cfg.variant) {
                Some((g_flops, g_params)) if cfg == standard => {
                    io(writeln!(
                        out,
                        "published {g_params}M params ({:+.1}%), {g_flops}G flops ({:+.1}% layers only)",
                        100.0 * deviation(params, g_params),
                        100.0 * deviation(layers, g_flops)
                    ))?;
                }
                Some(_) => io(writeln!(
                    out,
                    "published costs apply to the standard configuration only"
                ))?,
                None => {}
            }
        }
        Format::Tsv => io(out.write_all(report.to_tsv().as_bytes()))?,
    }
    Ok(())
}

fn gradcheck(cfg: &ModelConfig, seed: u64, out: &mut dyn Write) -> Result<i32> {
    let start = Instant::now();
    let results = gradient_suite(cfg, seed)?;
    let mut worst = 0.0f64;
    let mut failed = 0;
    for r in &results {
        worst = worst.max(r.max_error);
        if !r.passed() {
            failed += 1;
        }
        let mark = if r.passed() { "ok  " } else { "FAIL" };
        io(writeln!(
            out,
            "{mark} {:<40} {:>9.2e}  ({} values)",
            r.name, r.max_error, r.elements
        ))?;
    }
    io(writeln!(
        out,
        "worst relative error {worst:.3e} over {} checks in {:.1}s",
        results.len(),
        start.elapsed().as_secs_f64()
    ))?;
    Ok(if failed == 0 { 0 } else { 2 })
}

fn train_and_save(
    model_cfg: ModelConfig,
    mut rc: RunConfig,
    args: &TrainArgs,
    path: Option<&PathBuf>,
    out: &mut dyn Write,
) -> Result<()> {
    if let Some(s) = args.seed {
        rc.train.seed = s;
    }
    let data = load_dataset(&args.data, Some(model_cfg.num_classes))?;
    let mut m = build_network::<f32>(&model_cfg, rc.train.seed)?;
    let every = args.log_every.max(1);
    let mut log_err = Ok(());
    let history = train_with(&mut m, &data, &rc.train, |s| {
        if log_err.is_ok() && (s.step % every == 0 || s.step + 1 == s.total) {
            log_err = writeln!(
                out,
                "step {:>5}/{}  loss {:.4}  lr {:.3e}/{:.3e}",
                s.step + 1,
                s.total,
                s.loss,
                s.lr_conv,
                s.lr_ste
            );
        }
    })?;
    io(log_err)?;
    let acc = evaluate(&m, &data, rc.train.batch_size)?;
    io(writeln!(
        out,
        "trained {} steps, final loss {:.4}, train accuracy {acc:.4}",
        history.losses.len(),
        history.losses.last().copied().unwrap_or(f64::NAN)
    ))?;
    if let Some(p) = path {
        save_checkpoint(&m, p)?;
        io(writeln!(out, "saved {}", p.display()))?;
    }
    Ok(())
}

fn ablate(a: AblateArgs, out: &mut dyn Write) -> Result<()> {
    let run = match &a.config {
        Some(p) => Some(read_run_config(p)?),
        None => None,
    };
    let mut base = match &run {
        Some(rc) => rc.model_config()?,
        None => preset(&a.variant, None)?,
    };
    if let Some(i) = a.input {
        base.input_size = i;
    }
    let (cfg, rates) = match a.axis {
        Axis::Lr => (base, Some(parse_lr_pair(&a.choice)?)),
        Axis::Pe => (
            make_ablation_config(&base, AblationAxis::Pe, &a.choice)?,
            None,
        ),
        Axis::Patch => (
            make_ablation_config(&base, AblationAxis::PatchSize, &a.choice)?,
            None,
        ),
        Axis::Groups => (
            make_ablation_config(&base, AblationAxis::Groups, &a.choice)?,
            None,
        ),
    };
    let m = build_network::<f32>(&cfg, 0)?;
    let [h, w] = cfg.input_size;
    let report = summarize(&m, [1, 3, h, w], Include::ALL)?;
    let flops = report.total_flops();
    io(writeln!(
        out,
        "{} {}: {} params, {} layer flops, {} attention flops",
        format!("{:?}", a.axis).to_lowercase(),
        a.choice,
        report.total_params(),
        flops.layers,
        flops.attention
    ))?;
    if let Some((c, s)) = rates {
        io(writeln!(out, "conv rate {c}, encoder rate {s}"))?;
    }
    if let (Some(mut rc), Some(data)) = (run, a.data) {
        if let Some(r) = rates {
            rc.train = rc.train.with_rates(r);
        }
        let args = TrainArgs {
            config: a.config.clone().unwrap_or_default(),
            data,
            seed: a.seed,
            log_every: usize::MAX,
        };
        train_and_save(cfg, rc, &args, None, out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let argv = std::iter::once("contnet").chain(args.iter().copied());
        let code = run_with(argv, &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("224x224"), Ok([224, 224]));
        assert_eq!(parse_size("32X16"), Ok([32, 16]));
        assert!(parse_size("224").is_err() && parse_size("0x4").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(call(&["summary", "--variant"]).0, 1);
        assert_eq!(call(&["frobnicate"]).0, 1);
        assert_eq!(call(&["summary", "--variant", "xl"]).0, 1);
        assert_eq!(call(&["ablate", "--axis", "lr", "--choice", "fast"]).0, 1);
        let (code, out, _) = call(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("summary"));
    }

    #[test]
    fn indivisible_input_is_a_user_error() {
        let (code, _, err) = call(&["summary", "--variant", "ti", "--input", "200x200"]);
        assert_eq!(code, 1);
        assert!(err.contains("not divisible"), "{err}");
    }

    #[test]
    fn shapes_trace() {
        let (code, out, _) = call(&["shapes", "--variant", "ti"]);
        assert_eq!(code, 0);
        assert!(
            out.contains("[1, 48, 56, 56]") || out.contains("56, 56"),
            "{out}"
        );
        assert!(out.contains("[1, 1000]"), "{out}");
    }
}
