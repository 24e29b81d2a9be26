use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use innet_sgd::config::{Parallelism, RunConfig};
use innet_sgd::costmodel::{predict, CostParams, DEFAULT_MEM_TABLE, DEFAULT_RTT_CYCLES};
use innet_sgd::glm::reference_sgd_silent;
use innet_sgd::netsim::{allreduce_latency, fuzz_protocol, FaultModel, FuzzReport, NetConfig, Topology};
use innet_sgd::switch_agg::Mutation;
use innet_sgd::trainer::{
    simulate_iteration_time, timing_params, train_data_parallel, train_model_parallel, Schedule, TrainOutcome,
};
use innet_sgd::Error;

#[derive(Parser)]
#[command(name = "innet-sgd", version, about = "In-switch aggregation and model-parallel SGD simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a linear model over the simulated network.
    Train(TrainArgs),
    /// Check exactly-once delivery and liveness under packet loss.
    Fuzz(FuzzArgs),
    /// Sweep the analytic throughput model.
    Predict(PredictArgs),
    /// Compare in-switch and end-host AllReduce latency.
    Latency(LatencyArgs),
    /// Train with every parallelism scheme and compare cost and result.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file, or a previous run.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the fault seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_parser = ["mp", "dp"])]
    mode: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyArg {
    InSwitch,
    Endhost,
}

#[derive(Clone, Copy, ValueEnum)]
enum MutationArg {
    Agg,
    Ack,
}

#[derive(Args)]
struct FuzzArgs {
    #[arg(long, default_value_t = 8)]
    workers: usize,
    #[arg(long, default_value_t = 16)]
    slots: usize,
    #[arg(long, default_value_t = 8)]
    mb: usize,
    #[arg(long, default_value_t = 1000)]
    rounds: u64,
    #[arg(long, default_value_t = 0.1)]
    drop: f64,
    #[arg(long, default_value_t = 0.05)]
    dup: f64,
    #[arg(long, default_value_t = 500)]
    latency_ns: u64,
    #[arg(long, default_value_t = 500)]
    jitter_ns: u64,
    #[arg(long, default_value_t = 100)]
    switch_proc_ns: u64,
    /// Number of seeds to run.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = TopologyArg::InSwitch)]
    topology: TopologyArg,
    #[arg(long, default_value_t = 2000)]
    host_proc_ns: u64,
    /// Virtual-time limit per seed.
    #[arg(long, default_value_t = 10_000_000_000)]
    horizon_ns: u64,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Breaks a duplicate check in the switch to self-test the checker.
    #[arg(long, value_enum, hide = true)]
    inject_mutation: Option<MutationArg>,
}

#[derive(Args)]
struct PredictArgs {
    /// FPGA counts, e.g. `1-8` or `1,2,4`.
    #[arg(long, default_value = "1-8")]
    fpgas: String,
    #[arg(long, default_value = "1")]
    engines: String,
    #[arg(long, default_value = "1000000")]
    features: String,
    #[arg(long, default_value = "16")]
    batch: String,
    #[arg(long, default_value = "4")]
    precision: String,
    #[arg(long, default_value_t = DEFAULT_RTT_CYCLES)]
    rtt_cycles: f64,
    #[arg(long)]
    pipeline_cycles: Option<f64>,
    /// Memory throughput for s = 1, 2, 3 and 4+, comma separated.
    #[arg(long)]
    mem_table: Option<String>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LatencyArgs {
    #[arg(long, default_value_t = 8)]
    workers: usize,
    #[arg(long, default_value_t = 16)]
    slots: usize,
    #[arg(long, default_value_t = 8)]
    mb: usize,
    #[arg(long, default_value_t = 100)]
    rounds: u64,
    #[arg(long, default_value_t = 500)]
    latency_ns: u64,
    #[arg(long, default_value_t = 0)]
    jitter_ns: u64,
    #[arg(long, default_value_t = 0.0)]
    drop: f64,
    #[arg(long, default_value_t = 100)]
    switch_proc_ns: u64,
    #[arg(long, default_value_t = 2000)]
    host_proc_ns: u64,
    #[arg(long)]
    link_gbps: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Precision(_)
            | Error::Partition(_)
            | Error::EmptyDataset
            | Error::Data(_)
            | Error::Capacity(_)
            | Error::Io(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn violation(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

type CliResult = Result<(), Failure>;

fn io<T>(r: std::io::Result<T>, what: &Path) -> Result<T, Failure> {
    r.map_err(|e| usage(format!("{}: {e}", what.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    io(fs::write(path, bytes), path)
}

fn resolve(run: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.training.fault.seed = seed;
    }
    for kv in &run.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn run_training(cfg: &RunConfig, mode: Parallelism) -> Result<TrainOutcome, Failure> {
    let data = cfg.dataset.load(cfg.training.loss)?;
    let woven = data.weave();
    Ok(match mode {
        Parallelism::Mp => train_model_parallel(&woven, &data.labels, &cfg.training)?,
        Parallelism::Dp => train_data_parallel(&woven, &data.labels, &cfg.training)?,
    })
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let mut cfg = resolve(&args.run)?;
    if let Some(m) = &args.mode {
        cfg.mode = m.parse()?;
    }
    let outcome = run_training(&cfg, cfg.mode)?;
    let out = &args.run.out;
    io(fs::create_dir_all(out), out)?;
    write(&out.join("metrics.csv"), outcome.metrics.to_csv())?;
    let model: Vec<u8> = outcome.model.iter().flat_map(|w| w.0.to_le_bytes()).collect();
    write(&out.join("model.bin"), model)?;
    let run = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg.to_pairs(),
        "iterations": outcome.metrics.iteration_ns.len(),
        "initial_loss": outcome.metrics.initial_loss,
        "final_loss": outcome.metrics.epochs.last().map(|e| e.loss),
        "lockstep": outcome.lockstep.holds(),
        "network": outcome.metrics.totals,
    });
    write(&out.join("run.json"), serde_json::to_string_pretty(&run).unwrap_or_default())?;
    if !outcome.lockstep.holds() {
        return Err(violation("lock-step order between mini-batches was violated"));
    }
    println!(
        "trained {} features over {} epochs: loss {:.6} -> {:.6}; wrote {}",
        outcome.model.len(),
        cfg.training.epochs,
        outcome.metrics.initial_loss,
        outcome.metrics.epochs.last().map_or(outcome.metrics.initial_loss, |e| e.loss),
        out.display()
    );
    Ok(())
}

fn fuzz_config(args: &FuzzArgs, seed: u64) -> NetConfig {
    let mut cfg = NetConfig::new(args.workers, args.slots, args.mb);
    cfg.fault =
        FaultModel { drop_prob: args.drop, dup_prob: args.dup, latency_ns: args.latency_ns, jitter_ns: args.jitter_ns, seed };
    cfg.switch_proc_ns = args.switch_proc_ns;
    cfg.horizon_ns = args.horizon_ns;
    cfg.topology = match args.topology {
        TopologyArg::InSwitch => Topology::InSwitch,
        TopologyArg::Endhost => Topology::Endhost { host_proc_ns: args.host_proc_ns },
    };
    cfg.mutation = args.inject_mutation.map(|m| match m {
        MutationArg::Agg => Mutation::SkipAggDuplicateCheck,
        MutationArg::Ack => Mutation::SkipAckDuplicateCheck,
    });
    cfg
}

fn cmd_fuzz(args: FuzzArgs) -> CliResult {
    fuzz_config(&args, args.seed).validate()?;
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, seeds.len().max(1));
    let mut reports: Vec<Result<FuzzReport, Error>> = Vec::with_capacity(seeds.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(seeds.len().div_ceil(threads).max(1))
            .map(|chunk| {
                let args = &args;
                scope.spawn(move || {
                    chunk.iter().map(|&s| fuzz_protocol(&fuzz_config(args, s), args.rounds)).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            reports.extend(h.join().unwrap_or_else(|_| vec![Err(Error::Consistency("fuzz thread panicked".into()))]));
        }
    });

    io(fs::create_dir_all(&args.out), &args.out)?;
    let mut csv =
        String::from("seed,passed,rounds_complete,rounds_expected,retx,dropped,duplicated,reordered,p50_ns,p99_ns,failure\n");
    let mut failed = Vec::new();
    for (seed, report) in seeds.iter().zip(reports) {
        let r = report?;
        let failure = r.failure.clone().or_else(|| r.anomalies.first().map(|a| format!("{a:?}"))).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},\"{}\"\n",
            seed,
            r.passed,
            r.rounds_complete,
            r.rounds_expected,
            r.stats.retransmissions,
            r.stats.dropped,
            r.stats.duplicated,
            r.stats.reordered,
            r.latency.p50_ns,
            r.latency.p99_ns,
            failure.replace('"', "'")
        ));
        println!(
            "seed {seed}: {} ({}/{} rounds, {} retransmissions, {} reordered)",
            if r.passed { "pass" } else { "FAIL" },
            r.rounds_complete,
            r.rounds_expected,
            r.stats.retransmissions,
            r.stats.reordered
        );
        if !r.passed {
            let mut cfg = fuzz_config(&args, *seed);
            cfg.record_trace = true;
            let traced = fuzz_protocol(&cfg, args.rounds)?;
            let path = args.out.join(format!("fuzz-seed-{seed}.trace.csv"));
            write(&path, traced.trace.to_csv())?;
            println!("  {failure}\n  trace: {}", path.display());
            failed.push(*seed);
        }
    }
    write(&args.out.join("fuzz.csv"), csv)?;
    if failed.is_empty() {
        println!("all {} seeds passed", seeds.len());
        Ok(())
    } else {
        Err(violation(format!("{} of {} seeds failed: {failed:?}", failed.len(), seeds.len())))
    }
}

fn parse_list<T: std::str::FromStr + TryFrom<u64>>(name: &str, text: &str) -> Result<Vec<T>, Failure> {
    let bad = || usage(format!("--{name}: cannot parse '{text}'"));
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
            for v in a..=b {
                out.push(T::try_from(v).map_err(|_| bad())?);
            }
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    Ok(out)
}

fn emit(out: &Option<PathBuf>, csv: &str) -> CliResult {
    match out {
        Some(p) => write(p, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_predict(args: PredictArgs) -> CliResult {
    let mem_table = match &args.mem_table {
        None => DEFAULT_MEM_TABLE,
        Some(t) => {
            let v: Vec<f64> = t.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>().map_err(|_| usage("--mem-table"))?;
            v.try_into().map_err(|_| usage("--mem-table needs exactly four values"))?
        }
    };
    let mut csv = String::from("fpgas,engines,features,batch,precision,th_comp,th_mem,th_engine,th_all\n");
    for f in parse_list::<u64>("fpgas", &args.fpgas)? {
        for g in parse_list::<u64>("engines", &args.engines)? {
            for m in parse_list::<u64>("features", &args.features)? {
                for b in parse_list::<u64>("batch", &args.batch)? {
                    for s in parse_list::<u32>("precision", &args.precision)? {
                        let mut p = CostParams::new(f, g, m, b, s);
                        p.rtt_cycles = args.rtt_cycles;
                        p.pipeline_cycles = args.pipeline_cycles;
                        p.mem_table = mem_table;
                        let r = predict(&p)?;
                        csv.push_str(&format!(
                            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                            r.fpgas, r.engines, r.features, r.batch, r.precision, r.th_comp, r.th_mem, r.th_engine, r.th_all
                        ));
                    }
                }
            }
        }
    }
    emit(&args.out, &csv)
}

fn cmd_latency(args: LatencyArgs) -> CliResult {
    let mut csv = String::from("topology,rounds,p50_ns,p99_ns,min_ns,max_ns\n");
    let mut p50 = Vec::new();
    for (name, topology) in
        [("in_switch", Topology::InSwitch), ("endhost", Topology::Endhost { host_proc_ns: args.host_proc_ns })]
    {
        let mut cfg = NetConfig::new(args.workers, args.slots, args.mb);
        cfg.fault = FaultModel {
            drop_prob: args.drop,
            dup_prob: 0.0,
            latency_ns: args.latency_ns,
            jitter_ns: args.jitter_ns,
            seed: args.seed,
        };
        cfg.switch_proc_ns = args.switch_proc_ns;
        cfg.link_gbps = args.link_gbps;
        cfg.topology = topology;
        cfg.horizon_ns = 10_000_000_000;
        let (lat, _) = allreduce_latency(&cfg, args.rounds)?;
        csv.push_str(&format!("{name},{},{},{},{},{}\n", lat.complete, lat.p50_ns, lat.p99_ns, lat.min_ns, lat.max_ns));
        p50.push(lat.p50_ns as f64);
    }
    emit(&args.out, &csv)?;
    eprintln!("p50 ratio endhost / in_switch = {:.3}", p50[1] / p50[0]);
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> CliResult {
    let cfg = resolve(&args.run)?;
    let data = cfg.dataset.load(cfg.training.loss)?;
    let woven = data.weave();
    let reference = reference_sgd_silent(&woven, &data.labels, &cfg.training.sgd())?;
    let eq = simulate_iteration_time(&timing_params(&cfg.training, woven.features())?);
    let mut csv = String::from(
        "mode,final_loss,iterations,mean_iteration_ns,equation_iteration_ns,bytes_per_iteration,pkts,retx,matches_reference\n",
    );
    let mut mismatched = Vec::new();
    let runs = [
        ("mp_pipelined", Parallelism::Mp, Schedule::Pipelined, eq.pipelined_mp),
        ("mp_vanilla", Parallelism::Mp, Schedule::Vanilla, eq.vanilla_mp),
        ("dp", Parallelism::Dp, Schedule::Pipelined, eq.dp),
    ];
    for (name, mode, schedule, predicted) in runs {
        let mut c = cfg.training.clone();
        c.schedule = schedule;
        let out = match mode {
            Parallelism::Mp => train_model_parallel(&woven, &data.labels, &c)?,
            Parallelism::Dp => train_data_parallel(&woven, &data.labels, &c)?,
        };
        let m = &out.metrics;
        let iters = m.iteration_ns.len().max(1) as f64;
        let same = out.model == reference.model;
        if !same {
            mismatched.push(name);
        }
        csv.push_str(&format!(
            "{name},{:.9},{},{:.1},{:.1},{:.1},{},{},{}\n",
            m.epochs.last().map_or(m.initial_loss, |e| e.loss),
            m.iteration_ns.len(),
            m.iteration_ns.iter().sum::<u64>() as f64 / iters,
            predicted,
            m.totals.bytes as f64 / iters,
            m.totals.sent,
            m.totals.retransmissions,
            same
        ));
    }
    io(fs::create_dir_all(&args.run.out), &args.run.out)?;
    write(&args.run.out.join("compare.csv"), &csv)?;
    print!("{csv}");
    if mismatched.is_empty() {
        Ok(())
    } else {
        Err(violation(format!("models differ from the sequential reference: {mismatched:?}")))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Fuzz(a) => cmd_fuzz(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Latency(a) => cmd_latency(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
