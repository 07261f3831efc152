use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use bls::bench::a2a::{self, A2aBench, A2aMode};
use bls::bench::dlrm::{self, BenchError, DlrmBench, DlrmReport, LoopMode, RankRecord};
use bls::bench::verify;
use bls::core::config::SafetyMode;
use bls::core::metrics::LagEvent;
use bls::dlrm::ForwardOutput;
use bls::plot::{self, Metric};
use bls::report::{self, A2aRow, SummaryRow};
use bls::transport::in_process::DeliveryOptions;
use bls::transport::{tcp, BackendKind, CommOptions, TransportStats};
use bls::workload::WorkloadKind;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_HAZARD: u8 = 3;
const EXIT_TIMEOUT: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "bls-bench", version, about = "Bounded-lag alltoallv benchmarks")]
struct Cli {
    /// Where ranks run: threads of this process or one process per rank over TCP.
    #[arg(long, global = true, default_value = "in_process")]
    backend: BackendKind,
    /// One host:port per rank, required with --backend tcp.
    #[arg(long, global = true)]
    endpoints: Option<PathBuf>,
    /// Set by the launcher on each TCP worker process.
    #[arg(long, global = true, hide = true)]
    rank: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Alltoallv size and iteration sweeps.
    A2a(A2aArgs),
    /// DLRM inference runs over one or more bounds.
    Dlrm(DlrmArgs),
    /// Property suite: equivalence, lag, conservation, hazard handling.
    Verify(VerifyArgs),
    /// Redraw the SVGs from the CSVs in a directory.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct A2aArgs {
    #[arg(long)]
    ranks: Option<usize>,
    #[arg(long, default_value = "bls")]
    mode: A2aMode,
    #[arg(long, default_value_t = 0)]
    bound: usize,
    #[arg(long, default_value = "acked")]
    safety: SafetyMode,
    /// Bytes per peer for the size sweep.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Iteration counts for the 32 KB sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000")]
    iters: Vec<usize>,
    /// Iterations per size-sweep point.
    #[arg(long, default_value_t = 100)]
    size_iters: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Wall-clock budget per sweep point, in seconds.
    #[arg(long, default_value_t = 120.0)]
    budget_s: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DlrmArgs {
    #[arg(long)]
    ranks: Option<usize>,
    #[arg(long, default_value = "balanced")]
    workload: WorkloadKind,
    /// One bound or a comma-separated list; each is run in turn.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    bound: Vec<usize>,
    #[arg(long, default_value = "bls")]
    mode: LoopMode,
    #[arg(long, default_value = "acked")]
    safety: SafetyMode,
    /// Receive slots; defaults to k+1 (faithful) or 2k+2 (acked).
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long, default_value_t = 64)]
    batches: usize,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    emb_dim: usize,
    #[arg(long, default_value_t = 26)]
    tables: usize,
    #[arg(long, default_value_t = 10_000)]
    rows: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 100)]
    max_mult: usize,
    /// Largest injected per-batch delay, in seconds.
    #[arg(long, default_value_t = 0.01)]
    delay_max: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    warmup: usize,
    /// Criteo-layout CSV for --workload csv.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Seed a randomized in-process delivery order.
    #[arg(long)]
    delivery_seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 4)]
    ranks: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn config(msg: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            msg: msg.into(),
        }
    }

    fn other(msg: impl ToString) -> Self {
        Failure {
            code: EXIT_FAILURE,
            msg: msg.to_string(),
        }
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        let code = if e.is_hazard() {
            EXIT_HAZARD
        } else if e.is_timeout() {
            EXIT_TIMEOUT
        } else if e.is_config() {
            EXIT_CONFIG
        } else {
            EXIT_FAILURE
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<report::ReportError> for Failure {
    fn from(e: report::ReportError) -> Self {
        Failure::other(e)
    }
}

impl From<plot::PlotError> for Failure {
    fn from(e: plot::PlotError) -> Self {
        Failure::other(e)
    }
}

type Res<T> = Result<T, Failure>;

/// How the ranks of one command get placed.
enum Placement {
    InProcess,
    /// Parent: spawn one worker per endpoint.
    Launch,
    /// Worker for `rank`.
    Worker(usize, Vec<String>),
}

fn placement(cli: &Cli, ranks: Option<usize>) -> Res<(Placement, usize)> {
    match cli.backend {
        BackendKind::InProcess => {
            if cli.endpoints.is_some() || cli.rank.is_some() {
                return Err(Failure::config("--endpoints only applies to --backend tcp"));
            }
            Ok((Placement::InProcess, ranks.unwrap_or(8)))
        }
        BackendKind::Tcp => {
            let path = cli
                .endpoints
                .as_ref()
                .ok_or_else(|| Failure::config("--backend tcp needs --endpoints FILE"))?;
            let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            let eps = tcp::parse_endpoints(&text);
            if eps.is_empty() {
                return Err(Failure::config(format!("{}: no endpoints", path.display())));
            }
            if let Some(n) = ranks.filter(|&n| n != eps.len()) {
                return Err(Failure::config(format!("--ranks {n} but {} lists {} endpoints", path.display(), eps.len())));
            }
            let n = eps.len();
            match cli.rank {
                Some(r) if r >= n => Err(Failure::config(format!("--rank {r} out of range for {n} endpoints"))),
                Some(r) => Ok((Placement::Worker(r, eps), n)),
                None => Ok((Placement::Launch, n)),
            }
        }
    }
}

fn worker_dir(out: &Path) -> PathBuf {
    out.join(".ranks")
}

fn worker_file(out: &Path, rank: usize) -> PathBuf {
    worker_dir(out).join(format!("rank{rank}.json"))
}

/// Re-run this command once per rank and wait for all of them. The worst
/// exit code wins, with a hazard outranking a timeout.
fn launch(n: usize, out: &Path) -> Res<()> {
    let dir = worker_dir(out);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).map_err(|e| Failure::other(format!("{}: {e}", dir.display())))?;
    let exe = std::env::current_exe().map_err(Failure::other)?;
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut children = Vec::with_capacity(n);
    for r in 0..n {
        let child = Command::new(&exe)
            .args(&args)
            .arg("--rank")
            .arg(r.to_string())
            .spawn()
            .map_err(|e| Failure::other(format!("spawn rank {r}: {e}")))?;
        children.push(child);
    }
    let mut codes = Vec::with_capacity(n);
    for (r, mut c) in children.into_iter().enumerate() {
        let st = c.wait().map_err(|e| Failure::other(format!("rank {r}: {e}")))?;
        codes.push((r, st.code().unwrap_or(EXIT_FAILURE as i32)));
    }
    let rank_of = |code: i32| codes.iter().find(|c| c.1 == code).map(|c| c.0);
    for code in [EXIT_HAZARD, EXIT_TIMEOUT, EXIT_CONFIG, EXIT_FAILURE] {
        if let Some(r) = rank_of(code as i32) {
            return Err(Failure {
                code,
                msg: format!("rank {r} exited with status {code}"),
            });
        }
    }
    if let Some(&(r, c)) = codes.iter().find(|c| c.1 != 0) {
        return Err(Failure::other(format!("rank {r} exited with status {c}")));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Res<()> {
    let text = serde_json::to_string(v).map_err(Failure::other)?;
    fs::write(path, text).map_err(|e| Failure::other(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Res<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::other(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::other(format!("{}: {e}", path.display())))
}

fn tcp_options() -> CommOptions {
    CommOptions::from_env()
}

// ---- a2a

fn cmd_a2a(cli: &Cli, a: &A2aArgs) -> Res<()> {
    let (place, n) = placement(cli, a.ranks)?;
    if !(a.budget_s > 0.0) {
        return Err(Failure::config("--budget-s must be positive"));
    }
    let bench = A2aBench {
        ranks: n,
        mode: a.mode,
        bound_k: a.bound,
        safety: a.safety,
        sizes: a.sizes.clone().unwrap_or_else(a2a::default_sizes),
        size_iters: a.size_iters,
        iters: a.iters.clone(),
        seed: a.seed,
        budget: Duration::from_secs_f64(a.budget_s),
        delivery: DeliveryOptions::default(),
    };
    bench.validate()?;
    let points = match place {
        Placement::InProcess => a2a::run_in_process(&bench)?,
        Placement::Worker(r, eps) => {
            let comm = tcp::connect(r, &eps, tcp_options()).map_err(BenchError::from)?;
            let times = a2a::rank_main(comm, &bench, &bench.points())?;
            return write_json(&worker_file(&a.out, r), &times);
        }
        Placement::Launch => {
            launch(n, &a.out)?;
            let per_rank: Vec<Vec<Option<f64>>> = (0..n).map(|r| read_json(&worker_file(&a.out, r))).collect::<Res<_>>()?;
            let _ = fs::remove_dir_all(worker_dir(&a.out));
            a2a::merge(&bench, &bench.points(), &per_rank)
        }
    };
    let rows: Vec<A2aRow> = points.iter().map(A2aRow::from).collect();
    for r in &rows {
        let t = if r.completed { format!("{:.6e} s", r.total_s) } else { "aborted".into() };
        println!("{} {} k={} n={} size={} iters={} total={t}", r.sweep, r.mode, r.bound_k, r.ranks, r.size_bytes, r.iters);
    }
    let merged = report::merge_a2a(&a.out.join(report::A2A_CSV), &rows)?;
    plot::a2a_svg(&merged, &a.out.join("a2a.svg"))?;
    if rows.iter().any(|r| !r.completed) {
        return Err(Failure {
            code: EXIT_TIMEOUT,
            msg: "some sweep points exceeded the wall-clock budget".into(),
        });
    }
    Ok(())
}

// ---- dlrm

/// Per-rank results shipped from a TCP worker to the launcher.
#[derive(Serialize, Deserialize)]
struct WireRecord {
    rank: usize,
    /// `(latencies, delays)` per run.
    runs: Vec<(Vec<f64>, Vec<f64>)>,
    /// `(iteration, t_ns)` initiation events per run.
    traces: Vec<Vec<(u64, u64)>>,
    bytes_put_to: Vec<u64>,
    bytes_applied_from: Vec<u64>,
}

impl From<&RankRecord> for WireRecord {
    fn from(r: &RankRecord) -> Self {
        WireRecord {
            rank: r.rank,
            runs: r.runs.iter().map(|o| (o.latencies.clone(), o.delays.clone())).collect(),
            traces: r.traces.iter().map(|t| t.iter().map(|e| (e.iteration, e.t_ns)).collect()).collect(),
            bytes_put_to: r.stats.bytes_put_to.clone(),
            bytes_applied_from: r.stats.bytes_applied_from.clone(),
        }
    }
}

impl From<WireRecord> for RankRecord {
    fn from(w: WireRecord) -> Self {
        RankRecord {
            rank: w.rank,
            runs: w
                .runs
                .into_iter()
                .map(|(latencies, delays)| ForwardOutput {
                    latencies,
                    delays,
                    ..Default::default()
                })
                .collect(),
            traces: w
                .traces
                .into_iter()
                .map(|t| t.into_iter().map(|(iteration, t_ns)| LagEvent { iteration, t_ns }).collect())
                .collect(),
            stats: TransportStats {
                bytes_put_to: w.bytes_put_to,
                bytes_applied_from: w.bytes_applied_from,
                ..Default::default()
            },
        }
    }
}

fn dlrm_benches(a: &DlrmArgs, n: usize) -> Res<Vec<DlrmBench>> {
    let bounds: Vec<usize> = match a.mode {
        LoopMode::Sync => {
            if a.bound.iter().any(|&k| k != 0) && a.bound != [1] {
                return Err(Failure::config("--bound applies to --mode bls only"));
            }
            vec![0]
        }
        LoopMode::Bls => a.bound.clone(),
    };
    let mut out = Vec::new();
    for k in bounds {
        let b = DlrmBench {
            ranks: n,
            workload: a.workload,
            mode: a.mode,
            bound_k: k,
            safety: a.safety,
            slot_count: a.slots,
            batches: a.batches,
            batch_size: a.batch_size,
            emb_dim: a.emb_dim,
            tables: a.tables,
            rows_per_table: a.rows,
            hidden: a.hidden,
            max_multiplicity: a.max_mult,
            delay_max_s: a.delay_max,
            seed: a.seed,
            runs: a.runs,
            warmup_runs: a.warmup,
            csv_path: a.csv.clone(),
            delivery: DeliveryOptions {
                seed: a.delivery_seed,
                max_delay: Duration::ZERO,
            },
            op_timeout: Some(Duration::from_secs(120)),
        };
        b.validate()?;
        out.push(b);
    }
    if a.workload == WorkloadKind::Csv && a.csv.is_none() {
        return Err(Failure::config("--workload csv needs --csv PATH"));
    }
    Ok(out)
}

fn metrics_name(benches: &[DlrmBench], b: &DlrmBench) -> String {
    if benches.len() == 1 {
        report::METRICS_CSV.to_string()
    } else {
        format!("dlrm_metrics_k{}.csv", b.effective_bound())
    }
}

fn cmd_dlrm(cli: &Cli, a: &DlrmArgs) -> Res<()> {
    let (place, n) = placement(cli, a.ranks)?;
    let benches = dlrm_benches(a, n)?;
    let mut reports: Vec<DlrmReport> = Vec::new();
    match place {
        Placement::InProcess => {
            for b in &benches {
                reports.push(dlrm::run_in_process(b)?);
            }
        }
        Placement::Worker(r, eps) => {
            let workload = benches[0].workload_spec().generate(n).map_err(BenchError::from)?;
            let mut recs = Vec::new();
            for b in &benches {
                let comm = tcp::connect(r, &eps, tcp_options()).map_err(BenchError::from)?;
                let rec = dlrm::rank_main(comm, b, &workload)?;
                recs.push(WireRecord::from(&rec));
            }
            return write_json(&worker_file(&a.out, r), &recs);
        }
        Placement::Launch => {
            launch(n, &a.out)?;
            let mut per_rank: Vec<Vec<WireRecord>> = (0..n).map(|r| read_json(&worker_file(&a.out, r))).collect::<Res<_>>()?;
            let _ = fs::remove_dir_all(worker_dir(&a.out));
            for (i, b) in benches.iter().enumerate() {
                let recs: Vec<RankRecord> = per_rank
                    .iter_mut()
                    .map(|v| {
                        v.get_mut(i)
                            .map(|w| RankRecord::from(std::mem::replace(w, empty_wire())))
                            .ok_or_else(|| Failure::other("worker output is missing a configuration"))
                    })
                    .collect::<Res<_>>()?;
                reports.push(DlrmReport::from_records(b, "tcp", recs)?);
            }
        }
    }
    let mut rows = Vec::new();
    for (b, r) in benches.iter().zip(&reports) {
        report::write_rows(&a.out.join(metrics_name(&benches, b)), &report::metric_rows(r))?;
        let s = report::summary_row(r);
        println!(
            "{} {} k={} latency={:.6e}±{:.2e} s throughput={:.4e}±{:.2e} batches/s max_lag={} (limit {})",
            s.workload, s.backend_mode, s.bound_k, s.latency_mean, s.latency_ci95, s.throughput_mean, s.throughput_ci95, s.max_lag,
            r.lag.limit
        );
        if !r.lag.pass {
            log::error!("lag {} exceeded the bound {}", r.lag.max_lag, r.lag.limit);
        }
        rows.push(s);
    }
    let merged = report::merge_summary(&a.out.join(report::SUMMARY_CSV), &rows)?;
    draw_bound_sweep(&merged, &a.out)?;
    if let Some(r) = reports.iter().find(|r| !r.lag.pass) {
        return Err(Failure {
            code: EXIT_HAZARD,
            msg: format!("max lag {} exceeded k + 1 = {}", r.lag.max_lag, r.lag.limit),
        });
    }
    Ok(())
}

fn empty_wire() -> WireRecord {
    WireRecord {
        rank: 0,
        runs: Vec::new(),
        traces: Vec::new(),
        bytes_put_to: Vec::new(),
        bytes_applied_from: Vec::new(),
    }
}

fn draw_bound_sweep(rows: &[SummaryRow], out: &Path) -> Res<()> {
    plot::bound_sweep_svg(rows, Metric::Latency, &out.join("dlrm_latency.svg"))?;
    plot::bound_sweep_svg(rows, Metric::Throughput, &out.join("dlrm_throughput.svg"))?;
    Ok(())
}

// ---- verify, plot

fn cmd_verify(cli: &Cli, v: &VerifyArgs) -> Res<()> {
    if cli.backend != BackendKind::InProcess {
        return Err(Failure::config("verify runs on the in_process backend only"));
    }
    if v.ranks == 0 || v.seeds.is_empty() {
        return Err(Failure::config("--ranks and --seeds must be non-empty"));
    }
    let results = verify::run_suite(v.ranks, &v.seeds);
    for r in &results {
        println!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.pass).collect();
    if failed.is_empty() {
        return Ok(());
    }
    let safety = failed.iter().any(|r| r.name.contains("safety") || r.name.contains("hazard"));
    Err(Failure {
        code: if safety { EXIT_HAZARD } else { EXIT_FAILURE },
        msg: format!("{} of {} properties failed", failed.len(), results.len()),
    })
}

fn cmd_plot(p: &PlotArgs) -> Res<()> {
    let a2a_csv = p.out.join(report::A2A_CSV);
    let summary = p.out.join(report::SUMMARY_CSV);
    let mut drew = false;
    if a2a_csv.exists() {
        plot::a2a_svg(&report::read_rows(&a2a_csv)?, &p.out.join("a2a.svg"))?;
        drew = true;
    }
    if summary.exists() {
        draw_bound_sweep(&report::read_rows(&summary)?, &p.out)?;
        drew = true;
    }
    if !drew {
        return Err(Failure::config(format!("no {} or {} under {}", report::A2A_CSV, report::SUMMARY_CSV, p.out.display())));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BLS_LOG", "error")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::A2a(a) => cmd_a2a(&cli, a),
        Cmd::Dlrm(d) => cmd_dlrm(&cli, d),
        Cmd::Verify(v) => cmd_verify(&cli, v),
        Cmd::Plot(p) => cmd_plot(p),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("bls-bench: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
