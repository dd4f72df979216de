//! `ctxmesh`: run context-mesh nodes over HTTP, talk to them, and run scenarios.

mod http;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxmesh_core::agent::{read_replay, replay_schedule, Agent, DeviceMapping, DeviceMessage};
use ctxmesh_core::broker::{Broker, QueryRequest, Subscription, ThrottlePolicy};
use ctxmesh_core::client;
use ctxmesh_core::datamodel::ModelCatalog;
use ctxmesh_core::discovery::{Discovery, DiscoveryQuery};
use ctxmesh_core::federation::{AttachStatus, FederationConfig, FederationNode};
use ctxmesh_core::harness::{run_scenario, Script};
use ctxmesh_core::history::{History, HistoryStore, SegmentLog};
use ctxmesh_core::model::to_canonical_string;
use ctxmesh_core::net::{endpoint_url, Clock, Service, SystemClock, Transport, TransportError};
use ctxmesh_core::orchestrator::{Orchestrator, Tier, Worker, WorkerConfig, WorkerNode};
use ctxmesh_core::{EntityRef, Scope};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::http::{HttpTransport, Listener};

#[derive(Debug, Parser)]
#[command(name = "ctxmesh", version, about = "Federated context brokering for IoT data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Context broker.
    Broker {
        #[command(subcommand)]
        action: BrokerCmd,
    },
    /// Discovery registry.
    Discovery {
        #[command(subcommand)]
        action: DiscoveryCmd,
    },
    /// Federation node.
    Federate {
        #[command(subcommand)]
        action: FederateCmd,
    },
    /// Device agent.
    Agent {
        #[command(subcommand)]
        action: AgentCmd,
    },
    /// Time series sink.
    History {
        #[command(subcommand)]
        action: HistoryCmd,
    },
    /// Task worker.
    Worker {
        #[command(subcommand)]
        action: WorkerCmd,
    },
    /// Task orchestrator.
    Orchestrator {
        #[command(subcommand)]
        action: OrchestratorCmd,
    },
    /// Send context elements to a broker.
    Publish {
        #[arg(long)]
        broker: String,
        /// JSON file holding a list of elements or `{"elements": [...]}`; stdin if omitted.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Query a broker or federation node.
    Query {
        #[arg(long)]
        broker: String,
        #[command(flatten)]
        select: Select,
        #[arg(long = "attr")]
        attributes: Vec<String>,
    },
    /// Create a subscription.
    Subscribe {
        #[arg(long)]
        broker: String,
        #[command(flatten)]
        select: Select,
        #[arg(long = "attr")]
        attributes: Vec<String>,
        #[arg(long)]
        notify: String,
        #[arg(long, default_value_t = 0)]
        throttling: u64,
        /// `drop`, `aggregateSet` or a JSON policy.
        #[arg(long, default_value = "drop")]
        policy: String,
    },
    /// Ask a discovery who provides some context.
    Discover {
        #[arg(long)]
        discovery: String,
        #[command(flatten)]
        select: Select,
    },
    /// Scenario scripts.
    Scenario {
        #[command(subcommand)]
        action: ScenarioCmd,
    },
}

#[derive(Debug, Args)]
struct Select {
    #[arg(long = "type")]
    entity_type: String,
    /// Entity id; every id of the type when omitted.
    #[arg(long)]
    id: Option<String>,
    /// Treat `--id` as a regular expression.
    #[arg(long)]
    pattern: bool,
}

impl Select {
    fn entity(&self) -> Result<EntityRef, Failure> {
        let r = match (&self.id, self.pattern) {
            (None, _) => EntityRef::any_of_type(&self.entity_type),
            (Some(id), false) => EntityRef::new(id, &self.entity_type),
            (Some(id), true) => EntityRef::pattern(id, &self.entity_type),
        };
        r.map_err(|e| Failure::Usage(e.to_string()))
    }
}

#[derive(Debug, Args)]
struct ServeOpts {
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Base URL other nodes use to reach this one; derived from the listen address if omitted.
    #[arg(long)]
    advertise: Option<String>,
    #[arg(long, default_value_t = 8)]
    threads: usize,
}

#[derive(Debug, Subcommand)]
enum BrokerCmd {
    Serve {
        #[command(flatten)]
        serve: ServeOpts,
        #[arg(long)]
        models_dir: Option<PathBuf>,
        #[arg(long, default_value = "broker")]
        node_id: String,
    },
}

#[derive(Debug, Subcommand)]
enum DiscoveryCmd {
    Serve {
        #[command(flatten)]
        serve: ServeOpts,
        #[arg(long, default_value = "discovery")]
        node_id: String,
    },
}

#[derive(Debug, Subcommand)]
enum FederateCmd {
    Serve {
        #[command(flatten)]
        serve: ServeOpts,
        #[arg(long, default_value = "federation")]
        node_id: String,
        #[arg(long)]
        broker: Option<String>,
        #[arg(long)]
        discovery: Option<String>,
        /// Parent discovery to advertise at.
        #[arg(long)]
        parent: Option<String>,
        #[arg(long)]
        registration_ttl: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
enum AgentCmd {
    Serve {
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long)]
        broker: String,
        #[arg(long)]
        models_dir: Option<PathBuf>,
        /// HTTP listener accepting messages at `/v1/device`.
        #[arg(long)]
        listen: Option<String>,
        /// Newline-delimited JSON over TCP.
        #[arg(long)]
        tcp_listen: Option<String>,
        /// File of newline-delimited messages replayed by their timestamps.
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
}

#[derive(Debug, Subcommand)]
enum HistoryCmd {
    Serve {
        #[command(flatten)]
        serve: ServeOpts,
        /// Directory for segment files; in memory if omitted.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        max_bytes: Option<u64>,
        /// Broker to subscribe at on startup.
        #[arg(long, requires = "types")]
        broker: Option<String>,
        /// Entity types to subscribe to.
        #[arg(long = "type", id = "types")]
        types: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TierArg {
    Cloud,
    Edge,
}

impl From<TierArg> for Tier {
    fn from(t: TierArg) -> Self {
        match t {
            TierArg::Cloud => Tier::Cloud,
            TierArg::Edge => Tier::Edge,
        }
    }
}

#[derive(Debug, Subcommand)]
enum WorkerCmd {
    Serve {
        #[command(flatten)]
        serve: ServeOpts,
        #[arg(long)]
        id: String,
        #[arg(long, value_enum)]
        tier: TierArg,
        /// JSON list of scopes served.
        #[arg(long, default_value = "[]")]
        scopes: String,
        #[arg(long)]
        capacity: u32,
        #[arg(long)]
        broker: String,
        #[arg(long)]
        discovery: String,
    },
}

#[derive(Debug, Subcommand)]
enum OrchestratorCmd {
    Serve {
        #[command(flatten)]
        serve: ServeOpts,
        #[arg(long)]
        discovery: Option<String>,
        /// JSON list of worker nodes.
        #[arg(long)]
        workers: Option<PathBuf>,
    },
    /// Submit a topology to a running orchestrator.
    Submit {
        #[arg(long)]
        orchestrator: String,
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        workers: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
enum ScenarioCmd {
    Run {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

#[derive(Debug)]
enum Failure {
    /// Bad arguments or input files.
    Usage(String),
    /// The operation ran and did not succeed.
    Failed(String),
}

impl From<TransportError> for Failure {
    fn from(e: TransportError) -> Self {
        Failure::Failed(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CTXMESH_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn transport() -> HttpTransport {
    HttpTransport::new(Duration::from_secs(10))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn print_json(v: &Value) {
    println!("{}", to_canonical_string(v));
}

fn catalog(dir: Option<&Path>) -> Result<ModelCatalog, Failure> {
    match dir {
        Some(d) => ModelCatalog::load_dir(d).map_err(|e| Failure::Usage(format!("{}: {e}", d.display()))),
        None => Ok(ModelCatalog::default()),
    }
}

/// Bind, announce the base URL on stdout, then serve until killed.
fn serve_on(listener: Listener, service: Arc<dyn Service>, threads: usize) -> Result<(), Failure> {
    println!("listening on {}", listener.url());
    let _ = std::io::stdout().flush();
    log::info!("listening on {}", listener.url());
    listener.serve(service, Arc::new(SystemClock), threads);
    Ok(())
}

fn bind(opts: &ServeOpts) -> Result<(Listener, String), Failure> {
    let l = Listener::bind(&opts.listen).map_err(Failure::Failed)?;
    let url = opts.advertise.clone().unwrap_or_else(|| l.url());
    Ok((l, url))
}

fn run(cmd: Command) -> Result<(), Failure> {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    match cmd {
        Command::Broker {
            action: BrokerCmd::Serve { serve, models_dir, node_id },
        } => {
            let models = catalog(models_dir.as_deref())?;
            let (l, _) = bind(&serve)?;
            let broker = Broker::with_models(&node_id, models, clock, Arc::new(transport()));
            serve_on(l, Arc::new(broker), serve.threads)
        }
        Command::Discovery {
            action: DiscoveryCmd::Serve { serve, node_id },
        } => {
            let (l, _) = bind(&serve)?;
            log::info!("discovery {node_id}");
            serve_on(l, Arc::new(Discovery::new(clock, Arc::new(transport()))), serve.threads)
        }
        Command::Federate {
            action:
                FederateCmd::Serve {
                    serve,
                    node_id,
                    broker,
                    discovery,
                    parent,
                    registration_ttl,
                },
        } => {
            let (l, url) = bind(&serve)?;
            let mut cfg = FederationConfig::new(node_id, url);
            if let Some(b) = broker {
                cfg = cfg.with_broker(b);
            }
            if let Some(d) = discovery {
                cfg = cfg.with_discovery(d);
            }
            if let Some(t) = registration_ttl {
                cfg.registration_ttl = t;
            }
            let node = Arc::new(FederationNode::new(cfg, clock, Arc::new(transport())));
            if let Some(p) = parent {
                if node.attach_parent(&p) == AttachStatus::Deferred {
                    log::warn!("parent {p} unreachable; retrying in the background");
                }
            }
            serve_on(l, node, serve.threads)
        }
        Command::Agent {
            action:
                AgentCmd::Serve {
                    mapping,
                    broker,
                    models_dir,
                    listen,
                    tcp_listen,
                    replay,
                    speed,
                },
        } => serve_agent(AgentOpts {
            mapping,
            broker,
            models_dir,
            listen,
            tcp_listen,
            replay,
            speed,
        }),
        Command::History {
            action:
                HistoryCmd::Serve {
                    serve,
                    data_dir,
                    max_bytes,
                    broker,
                    types,
                },
        } => {
            let store = match data_dir {
                Some(d) => {
                    let sink = SegmentLog::open(d, max_bytes).map_err(|e| Failure::Usage(e.to_string()))?;
                    HistoryStore::open(Box::new(sink)).map_err(|e| Failure::Failed(e.to_string()))?
                }
                None => HistoryStore::in_memory(),
            };
            let (l, url) = bind(&serve)?;
            let history = Arc::new(History::new(store, clock));
            if let Some(b) = broker {
                let t = transport();
                let notify = endpoint_url(&url, "/v1/notify");
                let subscriber = {
                    let entities = types
                        .iter()
                        .map(EntityRef::any_of_type)
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| Failure::Usage(e.to_string()))?;
                    Subscription::new(entities, notify)
                };
                let id = client::subscribe(&t, &b, &subscriber, &[])?;
                log::info!("subscribed at {b} as {id}");
            }
            serve_on(l, history, serve.threads)
        }
        Command::Worker {
            action:
                WorkerCmd::Serve {
                    serve,
                    id,
                    tier,
                    scopes,
                    capacity,
                    broker,
                    discovery,
                },
        } => {
            let scopes: Vec<Scope> =
                serde_json::from_str(&scopes).map_err(|e| Failure::Usage(format!("--scopes: {e}")))?;
            let (l, url) = bind(&serve)?;
            let cfg = WorkerConfig {
                id,
                endpoint: url,
                broker,
                discovery,
                tier: tier.into(),
                scopes,
                capacity,
            };
            serve_on(l, Arc::new(Worker::new(cfg, clock, Arc::new(transport()))), serve.threads)
        }
        Command::Orchestrator {
            action: OrchestratorCmd::Serve { serve, discovery, workers },
        } => {
            let workers: Vec<WorkerNode> = match workers {
                Some(p) => read_json(&p)?,
                None => Vec::new(),
            };
            let (l, _) = bind(&serve)?;
            let orch = Orchestrator::new(workers, discovery, Arc::new(transport()));
            serve_on(l, Arc::new(orch), serve.threads)
        }
        Command::Orchestrator {
            action:
                OrchestratorCmd::Submit {
                    orchestrator,
                    topology,
                    workers,
                },
        } => {
            let mut body = json!({ "topology": read_json::<Value>(&topology)? });
            if let Some(w) = workers {
                body["workers"] = read_json::<Value>(&w)?;
            }
            let plan = transport().request(&endpoint_url(&orchestrator, "/v1/orchestrator/submit"), &body, &[])?;
            print_json(&plan);
            Ok(())
        }
        Command::Publish { broker, file } => {
            let text = match file {
                Some(p) => read_text(&p)?,
                None => {
                    let mut s = String::new();
                    std::io::stdin()
                        .read_to_string(&mut s)
                        .map_err(|e| Failure::Usage(format!("stdin: {e}")))?;
                    s
                }
            };
            let v: Value = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("elements: {e}")))?;
            let body = match v {
                Value::Array(_) => json!({ "elements": v }),
                other => other,
            };
            let resp = transport().request(&endpoint_url(&broker, "/v1/updateContext"), &body, &[])?;
            print_json(&resp);
            Ok(())
        }
        Command::Query {
            broker,
            select,
            attributes,
        } => {
            let mut q = QueryRequest::new(vec![select.entity()?]);
            q.attributes = attributes;
            let resp = client::query(&transport(), &broker, &q, &[])?;
            if !resp.partial.is_empty() {
                eprintln!("partial: unreachable {}", resp.partial.join(", "));
            }
            print_json(&serde_json::to_value(&resp.elements).expect("elements serialize"));
            Ok(())
        }
        Command::Subscribe {
            broker,
            select,
            attributes,
            notify,
            throttling,
            policy,
        } => {
            let policy: ThrottlePolicy = serde_json::from_str(&policy)
                .or_else(|_| serde_json::from_value(Value::String(policy.clone())))
                .map_err(|e| Failure::Usage(format!("--policy {policy}: {e}")))?;
            let mut s = Subscription::new(vec![select.entity()?], notify);
            s.attributes = attributes;
            s.throttling = throttling;
            s.policy = policy;
            let id = client::subscribe(&transport(), &broker, &s, &[])?;
            print_json(&json!({ "subscriptionId": id }));
            Ok(())
        }
        Command::Discover { discovery, select } => {
            let regs = client::discover(&transport(), &discovery, &DiscoveryQuery::new(vec![select.entity()?]))?;
            print_json(&serde_json::to_value(&regs).expect("registrations serialize"));
            Ok(())
        }
        Command::Scenario {
            action: ScenarioCmd::Run { script, format },
        } => {
            let script = Script::load(&script).map_err(|e| Failure::Usage(format!("{}: {e}", script.display())))?;
            let report = run_scenario(&script).map_err(|e| Failure::Usage(e.to_string()))?;
            match format {
                Format::Text => print!("{}", report.to_text()),
                Format::Json => print_json(&report.to_json()),
            }
            if report.passed {
                Ok(())
            } else {
                Err(Failure::Failed(format!("scenario {} failed", report.name)))
            }
        }
    }
}

struct AgentOpts {
    mapping: PathBuf,
    broker: String,
    models_dir: Option<PathBuf>,
    listen: Option<String>,
    tcp_listen: Option<String>,
    replay: Option<PathBuf>,
    speed: f64,
}

fn serve_agent(o: AgentOpts) -> Result<(), Failure> {
    if o.listen.is_none() && o.tcp_listen.is_none() && o.replay.is_none() {
        return Err(Failure::Usage("give at least one of --listen, --tcp-listen, --replay".into()));
    }
    let mapping = DeviceMapping::from_json(&read_text(&o.mapping)?).map_err(|e| Failure::Usage(e.to_string()))?;
    let models = catalog(o.models_dir.as_deref())?;
    let replay = match &o.replay {
        Some(p) => Some(read_replay(&read_text(p)?).map_err(|(line, e)| {
            Failure::Usage(format!("{}:{line}: {e}", p.display()))
        })?),
        None => None,
    };
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let t = transport();
    let agent = Arc::new(
        Agent::new(mapping, models, o.broker, clock.clone(), Arc::new(t.clone()))
            .map_err(|e| Failure::Usage(e.to_string()))?,
    );

    let mut daemons = Vec::new();
    if let Some(addr) = &o.tcp_listen {
        let tcp = TcpListener::bind(addr).map_err(|e| Failure::Failed(format!("cannot listen on {addr}: {e}")))?;
        let local = tcp.local_addr().map_err(|e| Failure::Failed(e.to_string()))?;
        println!("tcp listening on {local}");
        let agent = agent.clone();
        daemons.push(thread::spawn(move || {
            for conn in tcp.incoming().flatten() {
                let agent = agent.clone();
                thread::spawn(move || {
                    for line in BufReader::new(conn).lines() {
                        let Ok(line) = line else { break };
                        if line.trim().is_empty() {
                            continue;
                        }
                        match DeviceMessage::parse_line(&line) {
                            Ok(m) => {
                                agent.enqueue(m);
                                agent.pump();
                            }
                            Err(e) => log::warn!("dropping line: {e}"),
                        }
                    }
                });
            }
        }));
    }
    if let Some(addr) = &o.listen {
        let l = Listener::bind(addr).map_err(Failure::Failed)?;
        println!("listening on {}", l.url());
        let agent = agent.clone();
        let clock = clock.clone();
        daemons.push(thread::spawn(move || l.serve(agent, clock, 4)));
    }
    let _ = std::io::stdout().flush();

    if let Some(messages) = replay {
        let start = clock.now_ms();
        let schedule = replay_schedule(&messages, o.speed, start);
        for (m, at) in messages.into_iter().zip(schedule) {
            let now = clock.now_ms();
            if at > now {
                thread::sleep(Duration::from_millis(at - now));
            }
            agent.enqueue(m);
            agent.pump();
        }
        agent.pump();
        t.flush();
        if daemons.is_empty() {
            print_json(&serde_json::to_value(agent.metrics()).expect("metrics serialize"));
        }
    }
    for d in daemons {
        let _ = d.join();
    }
    Ok(())
}
