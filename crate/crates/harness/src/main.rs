use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bentoframe_core::bentofs::fsck::fsck;
use bentoframe_core::bentofs::{mkfs, BentoFs, MkfsOptions, MountOptions, Variant, DEFAULT_FS_JOURNAL_LEN};
use bentoframe_core::blockdev::create_image;
use bentoframe_core::bentofs::layout::BLOCK_SIZE;
use bentoframe_core::provenance::{prov_infer, prov_parse};
use bentoframe_harness::bench::{self, BenchConfig, BenchResult, Suite};
use bentoframe_harness::crashtest::{self, CrashConfig, OpKind};
use bentoframe_harness::demo::{self, DemoConfig, Load};
use bentoframe_harness::mount::{open_image, Mounted};
use bentoframe_harness::script::{self, parse_size, Script};

/// Userspace Bento file-system framework tools.
///
/// Set BENTOFRAME_LOG (error, warn, info, debug, trace) for diagnostics.
#[derive(Parser)]
#[command(name = "bentoframe", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create and format an image file.
    Mkfs(MkfsArgs),
    /// Mount an image and execute a script against it.
    Run(RunArgs),
    /// Run a benchmark suite.
    Bench(BenchArgs),
    /// Exhaustive two-operation crash-consistency test.
    Crashtest(CrashArgs),
    /// Upgrade Bento-fs to Bento-prov while a load runs.
    UpgradeDemo(DemoArgs),
    /// Check an unmounted image.
    Fsck(ImageArg),
    /// Print the provenance log and inferred dependencies of an image.
    Provdump(ImageArg),
}

#[derive(Args)]
struct ImageArg {
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct MkfsArgs {
    #[arg(long)]
    image: PathBuf,
    /// Image size, e.g. 64M.
    #[arg(long, default_value = "64M", value_parser = parse_size)]
    size: u64,
    /// Inode count; one per four blocks by default.
    #[arg(long)]
    inodes: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_FS_JOURNAL_LEN)]
    journal_blocks: u64,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum VariantArg {
    Plain,
    Prov,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Plain => Variant::Plain,
            VariantArg::Prov => Variant::Prov,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    image: PathBuf,
    /// Script file, `-` for stdin.
    script: PathBuf,
    /// Stop at the first error reply and exit with its errno.
    #[arg(long)]
    strict: bool,
    #[arg(long, value_enum, default_value = "plain")]
    variant: VariantArg,
}

#[derive(Args)]
struct BenchArgs {
    /// Suite name, or `all`.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Image file reformatted for every run; memory when absent.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// I/O size; the suite's default when absent.
    #[arg(long, value_parser = parse_size)]
    opsize: Option<u64>,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total file size for the read/write suites.
    #[arg(long, default_value = "64M", value_parser = parse_size)]
    file_size: u64,
    /// Files for create/delete, iterations for varmail-lite/fileserver-lite.
    #[arg(long, default_value_t = 10_000)]
    files: usize,
}

#[derive(Args)]
struct CrashArgs {
    /// Comma-separated operations; all mutating operations by default.
    #[arg(long, value_delimiter = ',')]
    opset: Vec<String>,
    /// Maximum number of workloads.
    #[arg(long)]
    budget: Option<usize>,
    /// Also crash after every write and sample reorderings.
    #[arg(long)]
    stress: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for replayable failure artifacts.
    #[arg(long)]
    artifacts: Option<PathBuf>,
    /// Run the file system without its journal (tester self-check).
    #[arg(long)]
    no_journal: bool,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value = "createdelete-1t")]
    load: Load,
    #[arg(long, default_value_t = 500)]
    at_ms: u64,
    #[arg(long, default_value_t = 1000)]
    duration_ms: u64,
    /// Image file to format and use; memory when absent.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Files created in the working directory before the load starts.
    #[arg(long, default_value_t = 10_000)]
    prepopulate: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_mkfs(a: &MkfsArgs) -> Result<ExitCode> {
    let blocks = a.size / BLOCK_SIZE as u64;
    if blocks == 0 {
        bail!("image size {} is smaller than one block", a.size);
    }
    create_image(&a.image, BLOCK_SIZE, blocks).with_context(|| format!("creating {}", a.image.display()))?;
    let dev = open_image(&a.image)?;
    let sb = mkfs(
        &dev,
        &MkfsOptions {
            inode_count: a.inodes,
            journal_len: a.journal_blocks,
        },
    );
    let sb = match sb {
        Ok(sb) => sb,
        Err(e) => {
            let _ = std::fs::remove_file(&a.image);
            return Err(e).context("mkfs");
        }
    };
    dev.sync_all()?;
    println!("mkfs image={} blocks={} inodes={}", a.image.display(), sb.total_blocks, sb.inode_count);
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(a: &RunArgs) -> Result<ExitCode> {
    let text = if a.script.as_os_str() == "-" {
        std::io::read_to_string(std::io::stdin())?
    } else {
        std::fs::read_to_string(&a.script).with_context(|| format!("reading {}", a.script.display()))?
    };
    // Scripts are checked before anything is mounted.
    let s = Script::parse(&text).context("script error")?;
    let dev = open_image(&a.image)?;
    let m = Mounted::new("run", a.variant.into(), &dev, MountOptions::default())?;
    let r = script::run(&m.conn, &s, a.strict);
    m.finish()?;
    for st in &r.steps {
        println!("{st}");
    }
    println!("run steps={} errors={}", r.steps.len(), r.errors());
    if let Some((line, e)) = r.aborted {
        eprintln!("aborted at line {line}: {e}");
        return Ok(ExitCode::from(e.code().clamp(1, 255) as u8));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(a: &BenchArgs) -> Result<ExitCode> {
    let suites: Vec<Suite> = if a.suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![a.suite.parse().map_err(anyhow::Error::msg)?]
    };
    let mut rows = Vec::new();
    for suite in suites {
        let cfg = BenchConfig {
            threads: a.threads,
            opsize: a.opsize.map_or(suite.default_opsize(), |s| s as usize),
            runs: a.runs,
            seed: a.seed,
            file_size: a.file_size,
            files: a.files,
            image: a.image.clone(),
            ..BenchConfig::new(suite)
        };
        match bench::run(&cfg) {
            Ok(r) => rows.push(r),
            Err(e) => eprintln!("{suite}: {e:#}"),
        }
    }
    println!("{}", BenchResult::header());
    for r in &rows {
        println!("{r}");
    }
    for r in &rows {
        println!("{}", r.machine_line());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_crashtest(a: &CrashArgs) -> Result<ExitCode> {
    let mut opset = Vec::new();
    for name in &a.opset {
        match OpKind::parse(name) {
            Some(k) => opset.push(k),
            None => bail!(
                "unknown operation {name:?}; choose from {}",
                OpKind::ALL.map(|k| k.name()).join(",")
            ),
        }
    }
    let cfg = CrashConfig {
        opset: if opset.is_empty() { OpKind::ALL.to_vec() } else { opset },
        budget: a.budget,
        stress: a.stress,
        seed: a.seed,
        journal: !a.no_journal,
        artifacts: a.artifacts.clone(),
        ..CrashConfig::default()
    };
    if cfg.budget == Some(0) {
        log::warn!("budget 0: no workloads run");
    }
    let s = crashtest::run(&cfg);
    for f in s.failures.iter().take(20) {
        println!("{f}");
    }
    if s.failures.len() > 20 {
        println!("... {} more failures", s.failures.len() - 20);
    }
    println!("{s}");
    Ok(if s.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_demo(a: &DemoArgs) -> Result<ExitCode> {
    let cfg = DemoConfig {
        load: a.load,
        duration: Duration::from_millis(a.duration_ms),
        at: Duration::from_millis(a.at_ms),
        prepopulate: a.prepopulate,
        seed: a.seed,
        image: a.image.clone(),
    };
    let r = demo::run(&cfg)?;
    for l in r.machine_lines() {
        println!("{l}");
    }
    if let Some(u) = &r.upgrade {
        eprintln!("upgrade: {u}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_fsck(a: &ImageArg) -> Result<ExitCode> {
    let dev = open_image(&a.image)?;
    let r = fsck(&dev).context("fsck")?;
    println!("{r}");
    Ok(if r.is_clean() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_provdump(image: &Path) -> Result<ExitCode> {
    let dev = open_image(image)?;
    let mut fs = BentoFs::mount(Variant::Prov, dev, MountOptions::default()).context("mount")?;
    let bytes = fs.prov_log_bytes().map_err(|e| anyhow::anyhow!("reading provenance log: {e}"))?;
    fs.unmount().map_err(|e| anyhow::anyhow!("unmount: {e}"))?;
    let log = prov_parse(&bytes)?;
    for r in &log.records {
        println!("{r}");
    }
    if log.truncated > 0 {
        println!("truncated {}", log.truncated);
    }
    let g = prov_infer(&log.records);
    for e in &g.edges {
        println!("{e}");
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BENTOFRAME_LOG", "warn")).init();
    let cli = Cli::parse();
    let r = match &cli.cmd {
        Cmd::Mkfs(a) => cmd_mkfs(a),
        Cmd::Run(a) => cmd_run(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Crashtest(a) => cmd_crashtest(a),
        Cmd::UpgradeDemo(a) => cmd_demo(a),
        Cmd::Fsck(a) => cmd_fsck(a),
        Cmd::Provdump(a) => cmd_provdump(&a.image),
    };
    match r {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
