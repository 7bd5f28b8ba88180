use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use blink_core::page_format::{MAX_PAGE_BITS, MIN_PAGE_BITS};
use blink_core::page_store::DEFAULT_CACHE_PAGES;
use blink_core::verifier::{audit, run_stress, AuditReport, Mix, Partition, StressConfig};
use blink_core::{BLinkTree, Error, LatchKind, TreeOptions};
use clap::{Args, Parser, Subcommand};

const EXIT_NOT_FOUND: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CORRUPT: u8 = 3;

/// Persistent concurrent B-link tree: create, load, query, audit and
/// stress-test tree files.
#[derive(Parser, Debug)]
#[command(name = "blink", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Tree file.
    #[arg(long, global = true)]
    file: Option<PathBuf>,
    /// log2 of the page size; only used by `create`.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(MIN_PAGE_BITS as i64..=MAX_PAGE_BITS as i64))]
    page_bits: Option<u8>,
    /// Skip AccessIntent coupling; consolidated pages are then never reused.
    #[arg(long, global = true)]
    no_access_intent: bool,
    /// Page cache capacity, in pages.
    #[arg(long, global = true, default_value_t = DEFAULT_CACHE_PAGES)]
    cache_pages: usize,
    /// Keys are given and printed as hex.
    #[arg(long, global = true)]
    hex: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create an empty tree file.
    Create,
    /// Insert or update one key.
    Put { key: String, value: u64 },
    /// Print the value stored under a key.
    Get { key: String },
    /// Remove a key.
    Del { key: String },
    /// Print key TAB value for keys in [low, high).
    Scan {
        #[arg(long)]
        low: Option<String>,
        #[arg(long)]
        high: Option<String>,
    },
    /// Bulk insert from a file ("-" for stdin): one `key[TAB value]` per
    /// line; the value defaults to the 1-based line number.
    Load { input: PathBuf },
    /// Print one page's header and slots.
    DumpNode { page: u64 },
    /// Check every structural invariant.
    Audit,
    /// Run the randomized multi-threaded workload against the file.
    Stress {
        #[arg(long, default_value_t = 8)]
        workers: u32,
        /// Operations per worker.
        #[arg(long, default_value_t = 50_000)]
        ops: u64,
        #[arg(long, default_value_t = 0x5eed)]
        seed: u64,
        /// put/remove/get/scan weights.
        #[arg(long, default_value = "40/20/35/5")]
        mix: Mix,
        #[arg(long, default_value_t = 2_000)]
        keys_per_worker: u64,
        /// Give each worker a contiguous key block instead of interleaving.
        #[arg(long)]
        contiguous: bool,
    },
    /// Print counters as key=value lines.
    Stats,
}

#[derive(Debug)]
enum Failure {
    NotFound,
    Usage(String),
    Corrupt(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_corruption() {
            Failure::Corrupt(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::NotFound) => ExitCode::from(EXIT_NOT_FOUND),
        Err(Failure::Usage(msg)) => {
            eprintln!("blink: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Corrupt(msg)) => {
            eprintln!("blink: {msg}");
            ExitCode::from(EXIT_CORRUPT)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let g = &cli.global;
    let path = g.file.clone().ok_or_else(|| Failure::Usage("--file is required".into()))?;
    let mut opts = TreeOptions { cache_pages: g.cache_pages.max(1), ..TreeOptions::default() }.access_intent(!g.no_access_intent);
    if let Some(bits) = g.page_bits {
        opts = opts.page_bits(bits);
    }
    if let Command::Create = cli.cmd {
        BLinkTree::create(Some(&path), &opts)?;
        return Ok(());
    }
    if !path.exists() {
        return Err(Failure::Usage(format!("{}: no such tree file", path.display())));
    }
    let tree = BLinkTree::open_any(&path, &opts)?;
    if g.page_bits.is_some_and(|b| b != tree.config().page_bits()) {
        eprintln!("blink: --page-bits ignored; file uses {}", tree.config().page_bits());
    }
    let key = |s: &str| parse_key(s, g.hex);
    let out = io::stdout();
    let mut out = BufWriter::new(out.lock());

    let result = match cli.cmd {
        Command::Create => unreachable!(),
        Command::Put { key: k, value } => tree.put(&key(&k)?, value).map_err(Failure::from),
        Command::Get { key: k } => match tree.get(&key(&k)?)? {
            Some(v) => writeln!(out, "{v}").map_err(Failure::from),
            None => Err(Failure::NotFound),
        },
        Command::Del { key: k } => {
            if tree.remove(&key(&k)?)? {
                Ok(())
            } else {
                Err(Failure::NotFound)
            }
        }
        Command::Scan { low, high } => {
            let low = low.as_deref().map(key).transpose()?;
            let high = high.as_deref().map(key).transpose()?;
            let mut io_err = None;
            tree.scan_with(low.as_deref(), high.as_deref(), |k, v| {
                match writeln!(out, "{}\t{v}", show_key(k, g.hex)) {
                    Ok(()) => true,
                    Err(e) => {
                        io_err = Some(e);
                        false
                    }
                }
            })?;
            io_err.map_or(Ok(()), |e| Err(e.into()))
        }
        Command::Load { input } => load(&tree, &input, g.hex, &mut out),
        Command::DumpNode { page } => dump_node(&tree, page, g.hex, &mut out),
        Command::Audit => {
            let report = audit(&tree, true);
            print_audit(&report, &mut out)?;
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Corrupt(format!("audit found {} violations", report.violations.len())))
            }
        }
        Command::Stress { workers, ops, seed, mix, keys_per_worker, contiguous } => {
            let cfg = StressConfig {
                workers,
                ops_per_worker: ops,
                mix,
                seed,
                keys_per_worker,
                partition: if contiguous { Partition::Contiguous } else { Partition::Interleaved },
            };
            if workers == 0 || keys_per_worker == 0 {
                return Err(Failure::Usage("--workers and --keys-per-worker must be positive".into()));
            }
            let report = run_stress(&tree, &cfg)?;
            writeln!(out, "{report}")?;
            stats(&tree, &mut out)?;
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Corrupt("stress run failed verification".into()))
            }
        }
        Command::Stats => stats(&tree, &mut out),
    };
    out.flush()?;
    tree.store().sync().map_err(|e| Failure::from(Error::from(e)))?;
    result
}

fn parse_key(s: &str, hex: bool) -> Result<Vec<u8>, Failure> {
    if hex {
        hex::decode(s).map_err(|e| Failure::Usage(format!("bad hex key {s:?}: {e}")))
    } else {
        Ok(s.as_bytes().to_vec())
    }
}

fn show_key(k: &[u8], hex: bool) -> String {
    if hex {
        hex::encode(k)
    } else {
        String::from_utf8_lossy(k).into_owned()
    }
}

fn load(tree: &BLinkTree, input: &PathBuf, hex: bool, out: &mut impl Write) -> CmdResult {
    let reader: Box<dyn BufRead> = if input.as_os_str() == "-" {
        Box::new(BufReader::new(io::stdin()))
    } else {
        Box::new(BufReader::new(File::open(input).map_err(|e| Failure::Usage(format!("{}: {e}", input.display())))?))
    };
    let mut n = 0u64;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let lineno = i as u64 + 1;
        let (k, v) = match line.split_once('\t') {
            Some((k, v)) => {
                let v = v.trim().parse().map_err(|e| Failure::Usage(format!("line {lineno}: bad value {v:?}: {e}")))?;
                (k, v)
            }
            None => (line, lineno),
        };
        let key = parse_key(k, hex).map_err(|e| match e {
            Failure::Usage(m) => Failure::Usage(format!("line {lineno}: {m}")),
            other => other,
        })?;
        tree.put(&key, v).map_err(|e| match Failure::from(e) {
            Failure::Usage(m) => Failure::Usage(format!("line {lineno}: {m}")),
            other => other,
        })?;
        n += 1;
    }
    writeln!(out, "loaded {n} records")?;
    Ok(())
}

fn dump_node(tree: &BLinkTree, page: u64, hex_keys: bool, out: &mut impl Write) -> CmdResult {
    let store = tree.store();
    if page == 0 || page > store.top_page() {
        return Err(Failure::Usage(format!("page {page} is not a node page (1..={})", store.top_page())));
    }
    if store.is_free(page) {
        writeln!(out, "page={page} free=true")?;
        return Ok(());
    }
    let node = tree.read_node_unlatched(page)?;
    writeln!(
        out,
        "page={page} level={} deleted={} count={} active={} free_offset={} free_gap={} link={}",
        node.level(),
        node.is_deleted(),
        node.count(),
        node.active(),
        node.free_offset(),
        node.free_gap(),
        node.link()
    )?;
    for (i, s) in node.slots().enumerate() {
        let fence = if i + 1 == node.count() { " fence" } else { "" };
        let key = if s.key.is_empty() {
            "<max>".to_string()
        } else if hex_keys {
            hex::encode(s.key)
        } else {
            format!("{} ({})", hex::encode(s.key), String::from_utf8_lossy(s.key))
        };
        writeln!(out, "slot {i}: key={key} deleted={} value={}{fence}", s.deleted as u8, s.value)?;
    }
    Ok(())
}

fn print_audit(report: &AuditReport, out: &mut impl Write) -> io::Result<()> {
    for line in report.to_kv_lines() {
        if !line.starts_with("violations=") {
            writeln!(out, "{line}")?;
        }
    }
    writeln!(out, "violations: {}", report.violations.len())?;
    for v in &report.violations {
        writeln!(out, "  {v}")?;
    }
    Ok(())
}

fn stats(tree: &BLinkTree, out: &mut impl Write) -> CmdResult {
    let report = audit(tree, true);
    let header = tree.store().header();
    let s = tree.stats();
    let store = tree.store().stats();
    let latches = tree.latches().stats();
    let mut lines = vec![
        format!("page_bits={}", header.page_bits),
        format!("page_size={}", tree.store().page_size()),
        format!("height={}", tree.height()),
        format!("access_intent={}", tree.access_intent_enabled()),
        format!("top_page={}", header.top_page),
        format!("free_pages={}", header.free_count),
        format!("live_pages={}", report.live_pages),
        format!("leaked_pages={}", report.leaked_pages),
        format!("live_keys={}", report.live_keys),
    ];
    for (level, n) in report.nodes_per_level.iter().enumerate() {
        lines.push(format!("level{level}_nodes={n}"));
    }
    lines.extend([
        format!("splits={}", s.splits),
        format!("root_splits={}", s.root_splits),
        format!("cleanups={}", s.cleanups),
        format!("consolidations={}", s.consolidations),
        format!("pages_freed={}", s.pages_freed),
        format!("pages_leaked={}", s.pages_leaked),
        format!("left_hops={}", s.left_hops),
        format!("restarts={}", s.restarts),
        format!("store_reads={}", store.reads),
        format!("store_writes={}", store.writes),
        format!("cache_hits={}", store.cache_hits),
        format!("use_after_free={}", store.use_after_free),
    ]);
    for kind in LatchKind::ALL {
        let k = latches.get(kind);
        lines.push(format!("latch_{}_acquisitions={}", kind.short_name().to_lowercase(), k.acquisitions));
        lines.push(format!("latch_{}_waits={}", kind.short_name().to_lowercase(), k.waits));
    }
    for line in lines {
        writeln!(out, "{line}")?;
    }
    Ok(())
}
