use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use pagekv::{DecodeMode, KvShape, Precision};
use pagekv_cli::{
    cmd_audit, cmd_bench, cmd_verify, ConfigError, Format, Report, RunConfig, Scenario,
};

#[derive(Parser)]
#[command(
    name = "pagekv",
    version,
    about = "Paged KV cache benchmarks, audits and self-checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-step decode FLOPs across context lengths, cached and uncached.
    Bench(Common),
    /// Paged vs contiguous memory accounting of a scenario trace.
    Audit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        shape: ShapeArgs,
    },
    /// Oracle equivalence, allocator scripts and fork isolation.
    Verify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        verify: VerifyArgs,
    },
    /// Print a scenario trace as JSON lines.
    TraceDump(Common),
}

#[derive(Args)]
struct Common {
    /// single, ladder, uniform, chat or batch.
    #[arg(long, default_value = "single")]
    scenario: Scenario,
    #[arg(long, default_value_t = pagekv::DEFAULT_PAGE_SIZE)]
    page_size: usize,
    #[arg(long)]
    pool_pages: Option<usize>,
    /// Comma-separated sequence lengths (context lengths for `bench`).
    #[arg(long, value_delimiter = ',')]
    seq_lens: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// cached or nocache; `bench` runs both when omitted.
    #[arg(long)]
    mode: Option<DecodeMode>,
    #[arg(long, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ShapeArgs {
    #[arg(long, default_value_t = KvShape::LLAMA_7B.layers)]
    layers: usize,
    #[arg(long, default_value_t = KvShape::LLAMA_7B.head_count)]
    heads: usize,
    #[arg(long, default_value_t = KvShape::LLAMA_7B.head_dim)]
    head_dim: usize,
    /// f16 or f32 storage.
    #[arg(long, default_value = "f16", value_parser = parse_precision)]
    precision: Precision,
    /// Contiguous baseline buffer length; defaults to the longest sequence.
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long, default_value_t = 3)]
    scripts: usize,
    #[arg(long, default_value_t = 10_000)]
    ops: usize,
    #[arg(long, default_value_t = 1000)]
    interleavings: usize,
    /// Corrupt one block table to prove the oracle check can fail.
    #[arg(long)]
    inject_fault: bool,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f16" => Ok(Precision::F16),
        "f32" => Ok(Precision::F32),
        other => Err(format!("unknown precision {other:?}")),
    }
}

fn base_config(c: Common) -> RunConfig {
    let mut config = RunConfig {
        scenario: c.scenario,
        page_size: c.page_size,
        pool_pages: c.pool_pages,
        seq_lens: c.seq_lens,
        seed: c.seed,
        mode: c.mode,
        format: c.format,
        out: c.out,
        ..RunConfig::default()
    };
    config.model.seed = c.seed;
    config
}

fn write<R: Report>(report: &R, config: &RunConfig) -> Result<()> {
    pagekv_cli::report::emit(&report.render(config.format)?, config.out.as_deref())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Bench(common) => {
            let config = base_config(common);
            write(&cmd_bench(&config)?, &config)?;
        }
        Command::Audit { common, shape } => {
            let mut config = base_config(common);
            config.shape = KvShape {
                layers: shape.layers,
                head_count: shape.heads,
                head_dim: shape.head_dim,
                bytes_per_scalar: shape.precision.bytes_per_scalar(),
            };
            config.max_len = shape.max_len;
            write(&cmd_audit(&config)?, &config)?;
        }
        Command::Verify { common, verify } => {
            let mut config = base_config(common);
            config.verify = pagekv_cli::VerifyConfig {
                instances: verify.instances,
                scripts: verify.scripts,
                ops_per_script: verify.ops,
                interleavings: verify.interleavings,
                inject_fault: verify.inject_fault,
            };
            let summary = cmd_verify(&config)?;
            write(&summary, &config)?;
            for c in &summary.checks {
                eprintln!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if !summary.passed {
                return Ok(ExitCode::from(1));
            }
        }
        Command::TraceDump(common) => {
            let config = base_config(common);
            config.validate()?;
            if config.format != Format::Json {
                return Err(ConfigError("trace-dump only writes JSON lines".into()).into());
            }
            let trace = config.trace()?;
            pagekv_cli::report::emit(&trace.to_jsonl(), config.out.as_deref())?;
            eprintln!("sha256 {}", trace.stable_hash());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.downcast_ref::<ConfigError>().is_some()
        || matches!(
            err.downcast_ref::<pagekv::Error>(),
            Some(pagekv::Error::InvalidConfig(_) | pagekv::Error::InvalidTrace(_))
        )
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_config_error(&err) { 2 } else { 1 })
        }
    }
}
