//! `merge`: runs the core service or a site commander, and drives the
//! experimenter and provider workflows against a running core.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use merge_core::clock::SystemClock;
use merge_core::config::Config;
use merge_core::hummingbird::Mechanism;
use merge_core::rpc::{self, Client, RpcError, Server, Transport};
use merge_core::service;
use merge_core::site::{Commander, FaultProfile};
use merge_core::xir::{parse_xir, XirNetwork};
use serde_json::{json, Value as Json};

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_UNREALIZABLE: u8 = 3;
const EXIT_CONFLICT: u8 = 4;
const EXIT_TRANSPORT: u8 = 5;

#[derive(Parser)]
#[command(name = "merge", version, about = "Federated testbed core, site commander and client")]
struct Cli {
    /// Core service address.
    #[arg(long, global = true, env = "MERGE_ADDR", default_value = "127.0.0.1:4747")]
    addr: String,
    /// Print canonical JSON results instead of summaries.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Greedy,
    Complete,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Simple,
    Fragmented,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the core service.
    Serve {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        journal: Option<PathBuf>,
        #[arg(long)]
        agents: Option<usize>,
    },
    /// Run a site commander with simulated drivers.
    Site {
        #[arg(short, long)]
        name: String,
        #[arg(long, default_value = "127.0.0.1:4800")]
        listen: String,
        /// JSON fault profile applied to the simulated drivers.
        #[arg(long)]
        faults: Option<PathBuf>,
    },
    /// Candidate resources for each experiment node.
    Discover {
        #[arg(short, long)]
        file: PathBuf,
    },
    /// Compute a realization; the experiment id defaults to the file stem.
    Realize {
        #[arg(short, long)]
        file: PathBuf,
        #[arg(short, long)]
        name: Option<String>,
        #[arg(long, value_enum)]
        engine: Option<EngineArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_hops: Option<usize>,
    },
    Reserve { experiment: String },
    Release { experiment: String },
    Materialize { experiment: String },
    Status {
        experiment: String,
        /// Poll until the experiment settles.
        #[arg(long)]
        watch: bool,
    },
    Demat { experiment: String },
    /// Add resources to a site through its commander.
    Commission {
        #[arg(short, long)]
        site: String,
        #[arg(short, long)]
        file: PathBuf,
        /// Commander address, required the first time a site is commissioned.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, value_delimiter = ',')]
        isolation: Option<Vec<Mechanism>>,
    },
    Decommission {
        #[arg(short, long)]
        site: String,
        #[arg(long, value_delimiter = ',', required = true)]
        nodes: Vec<String>,
        #[arg(long, value_enum, default_value = "simple")]
        mode: ModeArg,
        /// Replacement site model for fragmented mode.
        #[arg(short, long)]
        file: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    Sites,
    Experiments,
}

enum Failure {
    Usage(String),
    Rpc(RpcError),
}

impl From<RpcError> for Failure {
    fn from(e: RpcError) -> Self {
        Failure::Rpc(e)
    }
}

fn exit_code(e: &RpcError) -> u8 {
    match e.code {
        rpc::UNREALIZABLE => EXIT_UNREALIZABLE,
        rpc::CONFLICT => EXIT_CONFLICT,
        rpc::TRANSPORT | rpc::UNAVAILABLE => EXIT_TRANSPORT,
        rpc::BAD_REQUEST => EXIT_USAGE,
        _ => EXIT_OTHER,
    }
}

fn read_xir(path: &Path) -> Result<XirNetwork, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    parse_xir(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn print_json(v: &Json) {
    println!("{}", serde_json::to_string(v).expect("json values serialize"));
}

fn summarize(method: &str, v: &Json) {
    match method {
        "discover" => {
            for (node, cands) in v["entries"].as_object().into_iter().flatten() {
                let n = cands.as_array().map_or(0, Vec::len);
                println!("{node}: {n} candidate(s)");
            }
        }
        "realize" | "reserve" => {
            println!("{} {}", v["experiment"].as_str().unwrap_or("?"), v["status"].as_str().unwrap_or("?"));
            for (node, r) in v["node_map"].as_object().into_iter().flatten() {
                println!("  {node} -> {}", r.as_str().unwrap_or("?"));
            }
            for (link, path) in v["link_map"].as_object().into_iter().flatten() {
                let hops = path.as_array().map_or(0, Vec::len);
                println!("  {link} -> {hops} segment(s)");
            }
        }
        "status" => {
            println!(
                "{}: {} ({}/{} configured)",
                v["experiment"].as_str().unwrap_or("?"),
                v["state"].as_str().unwrap_or("?"),
                v["configured"],
                v["total"]
            );
            for e in v["errors"].as_array().into_iter().flatten() {
                println!("  {} after {} attempt(s): {}", e["uuid"], e["attempts"], e["error"]);
            }
            if let Some(d) = v["degraded"].as_str() {
                println!("  degraded: {d}");
            }
        }
        _ => println!("{}", serde_json::to_string_pretty(v).expect("json values serialize")),
    }
}

fn report(method: &str, json_out: bool, v: &Json) {
    if json_out {
        print_json(v);
    } else {
        summarize(method, v);
    }
}

fn explain_failure(e: &RpcError, json_out: bool) {
    if json_out {
        print_json(&serde_json::to_value(e).expect("errors serialize"));
        return;
    }
    eprintln!("error {}: {}", e.code, e.message);
    if e.code != rpc::UNREALIZABLE {
        return;
    }
    let Some(nodes) = e.data.as_ref().and_then(|d| d["nodes"].as_array()) else {
        return;
    };
    for n in nodes {
        let name = n["node"].as_str().unwrap_or("?");
        eprintln!("  {name}: {} candidate(s)", n["candidates"]);
        if let Some(closest) = n["closest"].as_str() {
            eprintln!("    closest {closest}:");
            for row in n["rows"].as_array().into_iter().flatten() {
                eprintln!(
                    "      {:<24} {:<10} wants {} offered {}",
                    row["path"].as_str().unwrap_or("?"),
                    row["verdict"].as_str().unwrap_or("?"),
                    row["constraint"],
                    row["offered"]
                );
            }
        }
    }
}

fn call(addr: &str, method: &str, params: Json) -> Result<Json, RpcError> {
    let mut c = Client::connect(addr)?;
    let out = c.call(method, params);
    c.close();
    out
}

fn is_settled(state: &str) -> bool {
    matches!(state, "materialized" | "dematerialized" | "degraded" | "released" | "realized" | "reserved")
}

fn watch(addr: &str, experiment: &str, json_out: bool) -> Result<(), Failure> {
    let mut last = Json::Null;
    loop {
        let v = call(addr, "status", json!({ "experiment": experiment }))?;
        if v != last {
            report("status", json_out, &v);
        }
        if is_settled(v["state"].as_str().unwrap_or("")) {
            return Ok(());
        }
        last = v;
        std::thread::sleep(Duration::from_millis(250));
    }
}

fn serve(config: Option<PathBuf>, listen: Option<String>, journal: Option<PathBuf>, agents: Option<usize>) -> Result<(), Failure> {
    let mut cfg = Config::load(config.as_deref()).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(l) = listen {
        cfg.listen = l;
    }
    if journal.is_some() {
        cfg.journal = journal;
    }
    if let Some(n) = agents {
        cfg.agents = n;
    }
    let running = service::serve(cfg, Arc::new(Transport::new()), Arc::new(SystemClock))
        .map_err(|e| Failure::Rpc(RpcError::transport(e.to_string())))?;
    log::info!("core listening on {} with {} agents", running.server.addr(), running.agents.len());
    let service::Running { server, agents, .. } = running;
    server.join();
    agents.stop();
    Ok(())
}

fn site(name: &str, listen: &str, faults: Option<PathBuf>) -> Result<(), Failure> {
    let faults = match faults {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            let f: FaultProfile =
                serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            f.validate().map_err(Failure::Usage)?;
            f
        }
        None => FaultProfile::default(),
    };
    let commander = Commander::new(name, faults, Arc::new(Transport::new()));
    let server = Server::bind(listen, commander).map_err(|e| Failure::Rpc(RpcError::transport(e.to_string())))?;
    log::info!("site {name} commander listening on {}", server.addr());
    server.join();
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let addr = cli.addr.as_str();
    let (method, params) = match cli.cmd {
        Cmd::Serve {
            config,
            listen,
            journal,
            agents,
        } => return serve(config, listen, journal, agents),
        Cmd::Site { name, listen, faults } => return site(&name, &listen, faults),
        Cmd::Status { experiment, watch: true } => return watch(addr, &experiment, cli.json),
        Cmd::Discover { file } => ("discover", json!({ "network": read_xir(&file)? })),
        Cmd::Realize {
            file,
            name,
            engine,
            seed,
            max_hops,
        } => {
            let network = read_xir(&file)?;
            let experiment = match name {
                Some(n) => n,
                None => file
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .map(str::to_string)
                    .ok_or_else(|| Failure::Usage("cannot derive an experiment name; pass --name".into()))?,
            };
            let mut p = json!({ "experiment": experiment, "network": network });
            if let Some(e) = engine {
                p["engine"] = json!(match e {
                    EngineArg::Greedy => "greedy",
                    EngineArg::Complete => "complete",
                });
            }
            if let Some(s) = seed {
                p["seed"] = json!(s);
            }
            if let Some(h) = max_hops {
                p["max_hops"] = json!(h);
            }
            ("realize", p)
        }
        Cmd::Reserve { experiment } => ("reserve", json!({ "experiment": experiment })),
        Cmd::Release { experiment } => ("release", json!({ "experiment": experiment })),
        Cmd::Materialize { experiment } => ("materialize", json!({ "experiment": experiment })),
        Cmd::Status { experiment, .. } => ("status", json!({ "experiment": experiment })),
        Cmd::Demat { experiment } => ("dematerialize", json!({ "experiment": experiment })),
        Cmd::Commission {
            site,
            file,
            endpoint,
            isolation,
        } => {
            let mut p = json!({ "site": site, "network": read_xir(&file)? });
            if let Some(e) = endpoint {
                p["endpoint"] = json!(e);
            }
            if let Some(i) = isolation {
                p["isolation"] = json!(i);
            }
            ("commission", p)
        }
        Cmd::Decommission {
            site,
            nodes,
            mode,
            file,
            force,
        } => {
            let mut p = json!({
                "force": force,
                "mode": match mode { ModeArg::Simple => "simple", ModeArg::Fragmented => "fragmented" },
                "nodes": nodes,
                "site": site,
            });
            if let Some(f) = file {
                p["replacement"] = json!(read_xir(&f)?);
            }
            ("decommission", p)
        }
        Cmd::Sites => ("sites.list", json!({})),
        Cmd::Experiments => ("experiments.list", json!({})),
    };
    let v = call(addr, method, params)?;
    report(method, cli.json, &v);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let json_out = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("merge: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Rpc(e)) => {
            explain_failure(&e, json_out);
            ExitCode::from(exit_code(&e))
        }
    }
}
