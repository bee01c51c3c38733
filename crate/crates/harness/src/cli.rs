//! The `dali` operator CLI. `up` runs a federation over HTTP on loopback and
//! writes a cluster file; the other commands talk to it through that file.
//! `scenario` runs built-in scenarios without a cluster.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dali_core::catalogue::{Query, MAX_QUERY_LIMIT};
use dali_core::connector::{NegotiationPhase, TransferPhase};
use dali_core::datalake::DataRequest;
use dali_core::{AssetKind, ParticipantId, SelfDescription, SystemClock};

use crate::http::client::{MgmtClient, StartNegotiation, StartTransfer};
use crate::http::HttpCluster;
use crate::scenario::{self, FUZZ_PROTOCOL};
use crate::topology::{FederationTopology, NodeRole};
use crate::HarnessError;

pub const DEFAULT_CLUSTER_FILE: &str = "dali-cluster.json";
const WAIT_TIMEOUT: Duration = Duration::from_secs(30);
const POLL_EVERY: Duration = Duration::from_millis(20);
const TICK_EVERY: Duration = Duration::from_secs(1);

#[derive(Debug, Parser)]
#[command(name = "dali", version, about = "Operate a federated data space")]
pub struct Cli {
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    pub json: bool,
    /// Cluster file written by `dali up`.
    #[arg(long, global = true, default_value = DEFAULT_CLUSTER_FILE)]
    pub cluster: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start every node of a topology over HTTP and serve until interrupted.
    Up(UpArgs),
    /// Publish a self-description from a provider node.
    Publish(PublishArgs),
    /// Search a node's catalogue.
    Query(QueryArgs),
    /// Negotiate an offer and wait for the outcome.
    Negotiate(NegotiateArgs),
    /// Transfer under an agreement and pull the payload.
    Transfer(TransferArgs),
    /// Run a data request through the ingestion pipeline.
    Ingest(IngestArgs),
    /// Clearing-house operations.
    Audit {
        #[command(subcommand)]
        command: AuditCommand,
    },
    /// Issue a token for a node's own subject.
    Token(TokenArgs),
    /// Built-in scenarios.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
}

#[derive(Debug, Args)]
pub struct UpArgs {
    #[arg(long)]
    pub topology: Option<PathBuf>,
    /// Persist the audit log and data lake here.
    #[arg(long)]
    pub state_dir: Option<PathBuf>,
    /// First port; nodes take consecutive ports. Ephemeral when omitted.
    #[arg(long)]
    pub base_port: Option<u16>,
    /// Skip the demo assets.
    #[arg(long)]
    pub no_seed: bool,
}

#[derive(Debug, Args)]
pub struct PublishArgs {
    #[arg(long)]
    pub node: ParticipantId,
    /// Self-description JSON.
    #[arg(long)]
    pub asset: PathBuf,
    /// Payload file stored in the data lake after publication.
    #[arg(long)]
    pub payload: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub kind: Option<AssetKind>,
    /// Node whose catalogue is searched; defaults to the first consumer.
    #[arg(long)]
    pub node: Option<ParticipantId>,
    #[arg(long)]
    pub provider: Option<ParticipantId>,
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long, default_value_t = MAX_QUERY_LIMIT)]
    pub limit: u32,
    #[arg(long, default_value_t = 0)]
    pub offset: u32,
}

#[derive(Debug, Args)]
pub struct NegotiateArgs {
    #[arg(long)]
    pub asset: String,
    #[arg(long)]
    pub offer: String,
    /// Consumer node; defaults to the first consumer.
    #[arg(long)]
    pub node: Option<ParticipantId>,
    #[arg(long)]
    pub provider: Option<ParticipantId>,
    /// Return right after the request is sent.
    #[arg(long)]
    pub no_wait: bool,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub agreement: String,
    #[arg(long)]
    pub purpose: String,
    #[arg(long)]
    pub node: Option<ParticipantId>,
    /// Write the payload here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// DataRequest JSON.
    #[arg(long)]
    pub request: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TokenArgs {
    #[arg(long)]
    pub node: ParticipantId,
    #[arg(long = "scope", required = true)]
    pub scopes: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum AuditCommand {
    /// Verify the clearing-house hash chain.
    Verify {
        /// Verify a log file offline instead of asking the cluster.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ScenarioCommand {
    /// Run a built-in scenario.
    Run {
        name: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        topology: Option<PathBuf>,
        /// Run over HTTP instead of the in-process network.
        #[arg(long)]
        http: bool,
        /// Write the event log here.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Schedules for fuzz-protocol.
        #[arg(long)]
        schedules: Option<u64>,
    },
    /// Re-execute a recorded event log and check it reproduces.
    Replay { log: PathBuf },
    /// List the built-in scenarios.
    List,
}

/// Node addresses of a running cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClusterFile {
    pub federator: String,
    pub nodes: Vec<ClusterNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClusterNode {
    pub participant_id: ParticipantId,
    pub role: NodeRole,
    pub url: String,
}

impl ClusterFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read cluster file {}: {e}; run `dali up` first", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("cluster file {}: {e}", path.display())))
    }

    fn node(&self, id: &ParticipantId) -> Result<MgmtClient, CliError> {
        self.nodes
            .iter()
            .find(|n| &n.participant_id == id)
            .map(|n| MgmtClient::new(&n.url))
            .ok_or_else(|| CliError::Usage(format!("no node {id} in the cluster")))
    }

    fn first(&self, role: NodeRole) -> Result<&ClusterNode, CliError> {
        self.nodes
            .iter()
            .find(|n| n.role == role)
            .ok_or_else(|| CliError::Usage(format!("the cluster has no {role:?} node")))
    }

    fn node_or_consumer(&self, id: Option<&ParticipantId>) -> Result<MgmtClient, CliError> {
        match id {
            Some(id) => self.node(id),
            None => Ok(MgmtClient::new(&self.first(NodeRole::Consumer)?.url)),
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Domain(m) => m,
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::ScriptUnknown(_) | HarnessError::TopologyInvalid(_) => CliError::Usage(e.to_string()),
            other => CliError::Domain(other.to_string()),
        }
    }
}

impl From<crate::http::client::ClientError> for CliError {
    fn from(e: crate::http::client::ClientError) -> Self {
        CliError::Domain(e.to_string())
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 2;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    let json = cli.json;
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            if json {
                let kind = if e.exit_code() == 2 { "usage" } else { "domain" };
                let _ = writeln!(err, "{}", serde_json::json!({ "error": kind, "detail": e.message() }));
            } else {
                let _ = writeln!(err, "error: {}", e.message());
            }
            e.exit_code()
        }
    }
}

fn emit<T: Serialize>(out: &mut dyn Write, json: bool, value: &T, human: impl FnOnce() -> String) -> Result<(), CliError> {
    let text = if json {
        serde_json::to_string(value).map_err(|e| CliError::Domain(e.to_string()))?
    } else {
        human()
    };
    writeln!(out, "{text}").map_err(|e| CliError::Domain(e.to_string()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_topology(path: Option<&Path>) -> Result<FederationTopology, CliError> {
    match path {
        Some(p) => Ok(FederationTopology::load(p)?),
        None => Ok(FederationTopology::default_federation()),
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let json = cli.json;
    match cli.command {
        Command::Up(a) => up(a, &cli.cluster, json, out),
        Command::Publish(a) => {
            let c = ClusterFile::load(&cli.cluster)?;
            let sd: SelfDescription = read_json(&a.asset)?;
            let node = c.node(&a.node)?;
            let entry = node.publish(&sd)?;
            let stored = match &a.payload {
                Some(p) => {
                    let data = std::fs::read(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                    Some(node.upload_payload(sd.asset_id(), &data)?)
                }
                None => None,
            };
            let visible = entry.is_visible();
            emit(out, json, &serde_json::json!({ "entry": entry, "stored": stored }), || {
                if visible {
                    format!("published {} (visible)", sd.asset_id())
                } else {
                    let v: Vec<String> = entry
                        .validation_report
                        .iter()
                        .map(|v| format!("{} {:?}", v.property, v.code))
                        .collect();
                    format!("published {} (quarantined: {})", sd.asset_id(), v.join(", "))
                }
            })
        }
        Command::Query(a) => {
            let c = ClusterFile::load(&cli.cluster)?;
            let q = Query {
                kind: a.kind,
                provider: a.provider,
                text: a.text,
                metadata_filters: Vec::new(),
                limit: a.limit,
                offset: a.offset,
            };
            let res = c.node_or_consumer(a.node.as_ref())?.search(&q)?;
            emit(out, json, &res, || {
                let mut lines: Vec<String> = res
                    .entries
                    .iter()
                    .map(|e| {
                        let sd = &e.self_description;
                        format!("{}\t{}\t{}\t{}", sd.asset_id(), sd.kind(), sd.provider_id(), sd.title())
                    })
                    .collect();
                lines.push(format!("{} of {} assets", res.entries.len(), res.total_count));
                lines.join("\n")
            })
        }
        Command::Negotiate(a) => {
            let c = ClusterFile::load(&cli.cluster)?;
            let node = c.node_or_consumer(a.node.as_ref())?;
            let mut state = node.start_negotiation(&StartNegotiation {
                provider_id: a.provider,
                asset_id: a.asset,
                offer_id: a.offer,
                ..Default::default()
            })?;
            if !a.no_wait {
                let started = Instant::now();
                while !state.state.is_terminal() {
                    if state.state == NegotiationPhase::Offered && state.pending_decision {
                        break;
                    }
                    if started.elapsed() > WAIT_TIMEOUT {
                        return Err(CliError::Domain(format!(
                            "negotiation {} still {} after {}s",
                            state.negotiation_id,
                            state.state,
                            WAIT_TIMEOUT.as_secs()
                        )));
                    }
                    std::thread::sleep(POLL_EVERY);
                    state = node.negotiation(&state.negotiation_id)?;
                }
            }
            let failed = state.state == NegotiationPhase::Terminated;
            emit(out, json, &state, || {
                let mut s = format!("negotiation {} {}", state.negotiation_id, state.state);
                if let Some(r) = &state.termination_reason {
                    s.push_str(&format!(" ({r})"));
                }
                if let Some(a) = &state.agreement_id {
                    s.push_str(&format!("\nagreement {a}"));
                }
                s
            })?;
            if failed {
                return Err(CliError::Domain(format!(
                    "negotiation terminated: {}",
                    state.termination_reason.unwrap_or_default()
                )));
            }
            Ok(())
        }
        Command::Transfer(a) => {
            let c = ClusterFile::load(&cli.cluster)?;
            let node = c.node_or_consumer(a.node.as_ref())?;
            let mut state = node.start_transfer(&StartTransfer {
                agreement_id: a.agreement,
                purpose: a.purpose,
                transfer_id: None,
            })?;
            let started = Instant::now();
            while state.state == TransferPhase::Requested {
                if started.elapsed() > WAIT_TIMEOUT {
                    return Err(CliError::Domain(format!("transfer {} not started", state.transfer_id)));
                }
                std::thread::sleep(POLL_EVERY);
                state = node.transfer(&state.transfer_id)?;
            }
            if state.state == TransferPhase::Started {
                let (bytes, _) = node.pull(&state.transfer_id)?;
                if let Some(p) = &a.out {
                    std::fs::write(p, &bytes).map_err(|e| CliError::Domain(format!("{}: {e}", p.display())))?;
                }
                state = node.transfer(&state.transfer_id)?;
            }
            let failed = state.state != TransferPhase::Completed;
            emit(out, json, &state, || {
                let mut s = format!("transfer {} {}", state.transfer_id, state.state);
                if let Some(r) = &state.termination_reason {
                    s.push_str(&format!(" ({r})"));
                }
                if let Some(d) = &state.payload_digest {
                    s.push_str(&format!("\n{} bytes, {d}", state.bytes_moved));
                }
                s
            })?;
            if failed {
                return Err(CliError::Domain(format!(
                    "transfer terminated: {}",
                    state.termination_reason.unwrap_or_default()
                )));
            }
            Ok(())
        }
        Command::Ingest(a) => {
            let c = ClusterFile::load(&cli.cluster)?;
            let req: DataRequest = read_json(&a.request)?;
            let outcome = MgmtClient::new(&c.federator).ingest(&req, a.seed)?;
            emit(out, json, &outcome, || {
                format!(
                    "{:?} {} rows={} digest={}",
                    outcome.path, outcome.manifest.asset_id, outcome.manifest.row_count, outcome.manifest.object_digest
                )
            })
        }
        Command::Audit {
            command: AuditCommand::Verify { log },
        } => {
            let verdict = match log {
                Some(p) => {
                    let bytes = std::fs::read(&p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                    dali_core::clearinghouse::verify_log_bytes(&bytes)
                }
                None => MgmtClient::new(&ClusterFile::load(&cli.cluster)?.federator).audit_verify()?,
            };
            emit(out, json, &verdict, || scenario::verdict_text(verdict))?;
            if !verdict.valid {
                return Err(CliError::Domain(format!("audit chain invalid: {}", scenario::verdict_text(verdict))));
            }
            Ok(())
        }
        Command::Token(a) => {
            let c = ClusterFile::load(&cli.cluster)?;
            let t = c.node(&a.node)?.token(&a.scopes)?;
            emit(out, json, &t, || t["header"].as_str().unwrap_or_default().to_string())
        }
        Command::Scenario { command } => run_scenario_command(command, json, out),
    }
}

fn run_scenario_command(command: ScenarioCommand, json: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let result = match command {
        ScenarioCommand::List => {
            let names: Vec<&str> = scenario::SHIPPED.to_vec();
            return emit(out, json, &names, || names.join("\n"));
        }
        ScenarioCommand::Run {
            name,
            seed,
            topology,
            http,
            log,
            schedules,
        } => {
            let mut t = load_topology(topology.as_deref())?;
            if let Some(s) = seed {
                t.seed = s;
            }
            if http {
                t.transport = crate::topology::TransportKind::Http;
            }
            let run = match (name.as_str(), schedules) {
                (FUZZ_PROTOCOL, Some(n)) => {
                    t.check()?;
                    t.check_end_to_end()?;
                    crate::fuzz::run(&t, n)?
                }
                _ => scenario::run_scenario(&t, &name)?,
            };
            if let Some(p) = log {
                std::fs::write(&p, &run.log).map_err(|e| CliError::Domain(format!("{}: {e}", p.display())))?;
            }
            run.result
        }
        ScenarioCommand::Replay { log } => scenario::replay(&log)?,
    };
    emit(out, json, &result, || {
        let mut lines = vec![format!("scenario {} seed {}", result.scenario, result.seed)];
        lines.extend(result.terminal_states.iter().map(|(k, v)| format!("  {k}: {v}")));
        lines.push(format!("audit: {}", scenario::verdict_text(result.audit_verdict)));
        lines.push(format!("digests match: {}", result.digests_match));
        lines.join("\n")
    })
}

fn up(a: UpArgs, cluster_path: &Path, json: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let topology = load_topology(a.topology.as_deref())?;
    if let Some(d) = &a.state_dir {
        std::fs::create_dir_all(d).map_err(|e| CliError::Domain(format!("{}: {e}", d.display())))?;
    }
    let (mut fed, cluster) = HttpCluster::start(&topology, Arc::new(SystemClock), None, a.state_dir.as_deref(), a.base_port)?;
    if !a.no_seed {
        fed.seed_assets()?;
        fed.sync_catalogues()?;
    }
    let file = ClusterFile {
        federator: cluster.federator_url.clone(),
        nodes: topology
            .nodes
            .iter()
            .map(|n| ClusterNode {
                participant_id: n.participant_id.clone(),
                role: n.role,
                url: cluster.endpoints[&n.participant_id].clone(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| CliError::Domain(e.to_string()))?;
    std::fs::write(cluster_path, text).map_err(|e| CliError::Domain(format!("{}: {e}", cluster_path.display())))?;
    let urls: BTreeMap<String, String> = file.nodes.iter().map(|n| (n.participant_id.to_string(), n.url.clone())).collect();
    emit(out, json, &file, || {
        let mut lines: Vec<String> = urls.iter().map(|(id, url)| format!("{id}\t{url}")).collect();
        lines.push(format!("cluster file {}; ctrl-c to stop", cluster_path.display()));
        lines.join("\n")
    })?;
    let _ = out.flush();
    loop {
        std::thread::sleep(TICK_EVERY);
        cluster.tick();
    }
}
