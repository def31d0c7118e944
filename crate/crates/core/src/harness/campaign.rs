use std::collections::BTreeSet;
use std::io::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abstraction::{EventHistory, IncrementalAbstraction};
use crate::events::{mix64, write_jsonl, Event, NodeId};
use crate::netsim::{ClientOp, FaultAction, FaultTag, NodeStatus, Process, SimConfig, Simulator};
use crate::novelty::{signature, StateId, StateRegistry, StateSignature};
use crate::policy::{reward, QTable};
use crate::raftlite::RaftLite;
use crate::timeline::{Timeline, TimelineGraph};

use super::config::CampaignConfig;
use super::oracles::{Detection, FindingKind, OracleState, WindowObservation};
use super::HarnessError;

/// The state every schedule starts from: the empty summary right after a
/// reset.
pub const INIT_STATE: StateId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Guided,
    Random,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Guided => "guided",
            Mode::Random => "random",
        }
    }
}

/// One fault step of a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub global_step: u64,
    pub schedule: u64,
    pub step: u32,
    pub prior_state: StateId,
    pub action: FaultTag,
    pub target: Option<u16>,
    pub resulting_state: StateId,
    pub was_new: bool,
    pub reward: f64,
    pub findings: u32,
    pub distinct_states: u32,
    pub events: u32,
    pub sim_time_ns: u64,
    /// SHA-256 of the window's events as JSON lines, truncated to 16 hex digits.
    pub digest: String,
}

impl StepRecord {
    pub fn fault(&self) -> FaultAction {
        FaultAction { tag: self.action, target: self.target.map(NodeId) }
    }
}

/// What it takes to reproduce a finding: the schedule's seed and the faults
/// enacted in it up to and including the step that found it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerRef {
    pub seed: u64,
    pub schedule: u64,
    pub faults: Vec<FaultAction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleFinding {
    pub kind: FindingKind,
    pub node: Option<NodeId>,
    pub schedule: u64,
    /// Global step after which it was detected; `None` during a reset.
    pub step: Option<u64>,
    pub detail: String,
    pub trigger: TriggerRef,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Keep every event of every window in the result.
    pub keep_events: bool,
    /// Global steps after which the schedule's timeline so far is rendered
    /// as DOT.
    pub dot_steps: BTreeSet<u64>,
    /// Enact these faults instead of choosing; one per step.
    pub replay: Option<Vec<FaultAction>>,
    pub initial_qtable: Option<QTable>,
    /// Where to checkpoint the Q-table after every schedule.
    pub checkpoint: Option<std::path::PathBuf>,
    /// Stop at the end of the step in which a finding of this kind appears.
    pub stop_on: Option<FindingKind>,
}

#[derive(Debug, Clone)]
pub struct CampaignResult {
    pub config: CampaignConfig,
    pub mode: Mode,
    pub registry: StateRegistry,
    pub qtable: QTable,
    pub steps: Vec<StepRecord>,
    pub findings: Vec<OracleFinding>,
    pub events: Vec<Event>,
    pub dots: Vec<(u64, String)>,
}

impl CampaignResult {
    pub fn distinct_states(&self) -> usize {
        self.registry.len()
    }

    /// Digest over every step's digest, identifying the whole run.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.steps {
            h.update(s.digest.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn first_finding(&self, kind: FindingKind) -> Option<&OracleFinding> {
        self.findings.iter().find(|f| f.kind == kind)
    }
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream.wrapping_mul(0xa076_1d64_78bd_642f).wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

const POLICY_STREAM: u64 = 1;
const SIM_STREAM: u64 = 1 << 32;
const WORKLOAD_STREAM: u64 = 2 << 32;

pub(crate) fn window_digest(events: &[Event]) -> String {
    let mut h = Sha256::new();
    {
        let mut w = DigestWriter(&mut h);
        write_jsonl(&mut w, events).expect("hashing cannot fail");
        w.flush().expect("hashing cannot fail");
    }
    hex::encode(&h.finalize()[..8])
}

struct DigestWriter<'a>(&'a mut Sha256);

impl std::io::Write for DigestWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// One schedule's worth of system under test, from reset to the last step.
pub struct Schedule {
    pub index: u64,
    pub sim: Simulator<RaftLite>,
    timeline: Timeline,
    abstraction: IncrementalAbstraction<EventHistory>,
    workload_rng: ChaCha8Rng,
    next_value: u64,
    oracles: OracleState,
    pub faults: Vec<FaultAction>,
    graph: Option<TimelineGraph>,
}

/// What one window produced.
pub struct WindowOutcome {
    pub events: Vec<Event>,
    pub summary: EventHistory,
    pub detections: Vec<Detection>,
}

impl Schedule {
    /// Fresh cluster for schedule `index`. Runs the reset period under the
    /// regular workload, then clears the summary.
    pub fn start(cfg: &CampaignConfig, index: u64, keep_graph: bool) -> Result<(Self, WindowOutcome), HarnessError> {
        let sim_cfg = SimConfig { rng_seed: stream_seed(cfg.seed, SIM_STREAM + index), ..cfg.sim.clone() };
        let n = sim_cfg.node_count;
        let (params, bugs) = (cfg.raft, cfg.bugs);
        let sim = Simulator::new(sim_cfg, |id| RaftLite::cluster_member(id, n, params, bugs))?;
        let mut s = Schedule {
            index,
            sim,
            timeline: Timeline::new(n, cfg.sim.skew_bound_ns),
            abstraction: IncrementalAbstraction::new(),
            workload_rng: ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, WORKLOAD_STREAM + index)),
            next_value: 1,
            oracles: OracleState::new(),
            faults: Vec::new(),
            graph: keep_graph.then(TimelineGraph::default),
        };
        let mut events = Vec::new();
        let mut detections = Vec::new();
        let mut left = cfg.reset_ns;
        while left > 0 {
            let d = left.min(cfg.window_ns);
            let w = s.run_window(cfg, d)?;
            events.extend(w.events);
            detections.extend(w.detections);
            left -= d;
        }
        s.abstraction.reset();
        if let Some(g) = &mut s.graph {
            *g = TimelineGraph::default();
        }
        Ok((s, WindowOutcome { events, summary: EventHistory::new(), detections }))
    }

    fn submit_workload(&mut self, cfg: &CampaignConfig, duration: u64) {
        let now = self.sim.now();
        for _ in 0..cfg.workload.requests_per_window {
            let at = now + self.workload_rng.gen_range(0..duration);
            let key = self.workload_rng.gen_range(0..cfg.workload.keys);
            let op = if self.workload_rng.gen_bool(cfg.workload.read_fraction) {
                ClientOp::Read { key }
            } else {
                self.next_value += 1;
                ClientOp::Write { key, value: self.next_value }
            };
            self.sim.submit_at(at, op);
        }
    }

    /// Runs one window of `duration` under the workload, folds what the
    /// observers reported into the summary and runs the oracles.
    pub fn run_window(&mut self, cfg: &CampaignConfig, duration: u64) -> Result<WindowOutcome, HarnessError> {
        self.submit_workload(cfg, duration);
        let events = self.sim.run_window(duration)?;
        for r in self.sim.take_reports() {
            self.timeline.apply(r)?;
        }
        let slice = self.timeline.build_prefix_closed()?;
        let summary = self.abstraction.extend(&slice)?.clone();
        if let Some(g) = &mut self.graph {
            g.extend(&slice)?;
        }
        let logs = self.sim.take_logs();
        let assertions = self.sim.take_assertions();
        self.sim.take_netlog();
        let n = self.sim.config().node_count;
        let leader_present = (0..n).any(|i| {
            let id = NodeId(i as u16);
            self.sim.network().status(id) == NodeStatus::Running && self.sim.process(id).is_leader()
        });
        let detections = self.oracles.check(
            &cfg.oracles,
            &WindowObservation {
                logs: &logs,
                assertions: &assertions,
                history: self.sim.client_history(),
                network: self.sim.network(),
                leader_present,
            },
        );
        Ok(WindowOutcome { events, summary, detections })
    }

    /// Enacts `fault`, then runs a window.
    pub fn step(&mut self, cfg: &CampaignConfig, fault: FaultAction) -> Result<WindowOutcome, HarnessError> {
        self.sim.enact(fault)?;
        self.faults.push(fault);
        self.run_window(cfg, cfg.window_ns)
    }

    pub fn dot(&self) -> Option<String> {
        self.graph.as_ref().map(|g| {
            g.to_dot(|k| match k {
                crate::events::EventKind::Code(c) => {
                    crate::raftlite::code_label(*c).map_or_else(|| k.to_string(), str::to_owned)
                }
                other => other.to_string(),
            })
        })
    }
}

/// Whether a fault can do anything right now, and which nodes it may hit.
pub fn eligible_targets(tag: FaultTag, sim: &Simulator<RaftLite>) -> Option<Vec<NodeId>> {
    let net = sim.network();
    let all: Vec<NodeId> = (0..net.node_count()).map(|i| NodeId(i as u16)).collect();
    let with = |st: NodeStatus| net.nodes_with(st);
    let nonempty = |v: Vec<NodeId>| (!v.is_empty()).then_some(v);
    match tag {
        FaultTag::PartitionRandomHalves | FaultTag::NoOp => Some(Vec::new()),
        FaultTag::HealNetwork => (!net.fully_connected()).then(Vec::new),
        FaultTag::CrashNode => nonempty(all.into_iter().filter(|n| net.status(*n) != NodeStatus::Crashed).collect()),
        FaultTag::RestartNode => nonempty(with(NodeStatus::Crashed)),
        FaultTag::PauseNode => nonempty(with(NodeStatus::Running)),
        FaultTag::ResumeNode => nonempty(with(NodeStatus::Paused)),
        FaultTag::IsolateNode | FaultTag::RequestMembershipChange => Some(all),
    }
}

struct Chooser {
    mode: Mode,
    rng: ChaCha8Rng,
    replay: Option<Vec<FaultAction>>,
}

impl Chooser {
    fn choose(
        &mut self,
        global_step: u64,
        alphabet: &[FaultTag],
        q: &QTable,
        state: StateId,
        sim: &Simulator<RaftLite>,
    ) -> Result<(usize, FaultAction), HarnessError> {
        if let Some(faults) = &self.replay {
            let fault = *faults.get(global_step as usize).ok_or_else(|| HarnessError::Divergence {
                step: global_step,
                detail: "fault log ends early".into(),
            })?;
            let a = alphabet.iter().position(|t| *t == fault.tag).ok_or_else(|| HarnessError::Divergence {
                step: global_step,
                detail: format!("{} is not in the fault alphabet", fault.tag),
            })?;
            return Ok((a, fault));
        }
        let targets: Vec<Option<Vec<NodeId>>> = alphabet.iter().map(|t| eligible_targets(*t, sim)).collect();
        let a = match self.mode {
            Mode::Guided => {
                let mask: Vec<bool> = targets.iter().map(Option::is_some).collect();
                q.select(state, Some(&mask), &mut self.rng)?
            }
            Mode::Random => self.rng.gen_range(0..alphabet.len()),
        };
        let tag = alphabet[a];
        let target = if tag.needs_target() {
            let pool = match &targets[a] {
                Some(p) if !p.is_empty() => p.clone(),
                _ => (0..sim.config().node_count).map(|i| NodeId(i as u16)).collect(),
            };
            Some(*pool.choose(&mut self.rng).expect("cluster is non-empty"))
        } else {
            None
        };
        Ok((a, FaultAction { tag, target }))
    }
}

/// The campaign loop: schedules of fault steps separated by resets, with
/// every step's outcome classified, rewarded and learned from.
pub fn run(cfg: &CampaignConfig, mode: Mode, opts: RunOptions) -> Result<CampaignResult, HarnessError> {
    cfg.validate()?;
    let alphabet = cfg.alphabet()?;
    let names: Vec<String> = alphabet.iter().map(|t| t.name().to_owned()).collect();
    let mut q = match opts.initial_qtable.clone() {
        Some(q) if q.actions() == names.as_slice() => q,
        Some(_) => {
            return Err(HarnessError::Config(super::ConfigError {
                key: "faults".into(),
                message: "initial Q-table was built for a different alphabet".into(),
            }))
        }
        None => QTable::new(names, cfg.learning.alpha, cfg.learning.gamma)?,
    };
    let total = match &opts.replay {
        Some(f) => f.len() as u64,
        None => cfg.total_steps(),
    };
    let mut registry = StateRegistry::new();
    let (init, _) = registry.classify(
        &StateSignature::empty(cfg.novelty.k, cfg.novelty.hash_seed),
        cfg.novelty.epsilon,
        0,
        0,
    )?;
    debug_assert_eq!(init, INIT_STATE);
    q.ensure_row(INIT_STATE);

    let mut chooser = Chooser {
        mode,
        rng: ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, POLICY_STREAM)),
        replay: opts.replay.clone(),
    };
    let mut steps = Vec::with_capacity(total as usize);
    let mut findings = Vec::new();
    let mut events = Vec::new();
    let mut dots = Vec::new();
    let mut global: u64 = 0;
    let mut schedule_index = 0u64;
    let keep_graph = !opts.dot_steps.is_empty();

    'campaign: while global < total {
        let (mut sched, reset) = Schedule::start(cfg, schedule_index, keep_graph)?;
        let record_findings = |dets: Vec<Detection>, step: Option<u64>, sched: &Schedule, out: &mut Vec<OracleFinding>| {
            let n = dets.len() as u32;
            for d in dets {
                out.push(OracleFinding {
                    kind: d.kind,
                    node: d.node,
                    schedule: sched.index,
                    step,
                    detail: d.detail,
                    trigger: TriggerRef { seed: cfg.seed, schedule: sched.index, faults: sched.faults.clone() },
                });
            }
            n
        };
        if opts.keep_events {
            events.extend(reset.events);
        }
        record_findings(reset.detections, None, &sched, &mut findings);
        let mut cur = INIT_STATE;
        for step in 0..cfg.steps_per_schedule as u32 {
            if global >= total {
                break;
            }
            let (a, fault) = chooser.choose(global, &alphabet, &q, cur, &sched.sim)?;
            let out = sched.step(cfg, fault)?;
            let sig = signature(&out.summary, cfg.novelty.k, cfg.novelty.hash_seed)?;
            let (next, was_new) = registry.classify(&sig, cfg.novelty.epsilon, global, out.summary.item_count())?;
            let r = reward(was_new);
            q.ensure_row(next);
            q.update(cur, a, r, next)?;
            let stop = opts.stop_on.is_some_and(|k| out.detections.iter().any(|d| d.kind == k));
            let found = record_findings(out.detections, Some(global), &sched, &mut findings);
            steps.push(StepRecord {
                global_step: global,
                schedule: schedule_index,
                step,
                prior_state: cur,
                action: fault.tag,
                target: fault.target.map(|t| t.0),
                resulting_state: next,
                was_new,
                reward: r,
                findings: found,
                distinct_states: registry.len() as u32,
                events: out.events.len() as u32,
                sim_time_ns: sched.sim.now(),
                digest: window_digest(&out.events),
            });
            if opts.dot_steps.contains(&global) {
                if let Some(d) = sched.dot() {
                    dots.push((global, d));
                }
            }
            if opts.keep_events {
                events.extend(out.events);
            }
            cur = next;
            global += 1;
            if stop {
                break 'campaign;
            }
        }
        if let Some(path) = &opts.checkpoint {
            let io = |e: &dyn std::fmt::Display| HarnessError::Io { path: path.display().to_string(), message: e.to_string() };
            let file = std::fs::File::create(path).map_err(|e| io(&e))?;
            q.save_checkpoint(std::io::BufWriter::new(file)).map_err(|e| io(&e))?;
        }
        schedule_index += 1;
    }
    Ok(CampaignResult {
        config: cfg.clone(),
        mode,
        registry,
        qtable: q,
        steps,
        findings,
        events,
        dots,
    })
}

pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignResult, HarnessError> {
    run(cfg, Mode::Guided, RunOptions::default())
}

pub fn run_baseline_random(cfg: &CampaignConfig) -> Result<CampaignResult, HarnessError> {
    run(cfg, Mode::Random, RunOptions::default())
}

/// Re-runs a recorded campaign with its recorded faults and reports the
/// first difference, if any.
pub fn replay(
    cfg: &CampaignConfig,
    mode: Mode,
    faults: &[FaultAction],
    recorded: &[StepRecord],
    recorded_findings: &[OracleFinding],
) -> Result<CampaignResult, HarnessError> {
    let faults = faults.to_vec();
    let result = run(cfg, mode, RunOptions { replay: Some(faults), ..RunOptions::default() })?;
    for (want, got) in recorded.iter().zip(&result.steps) {
        if want != got {
            return Err(HarnessError::Divergence { step: want.global_step, detail: describe_diff(want, got) });
        }
    }
    if result.steps.len() != recorded.len() {
        return Err(HarnessError::Divergence {
            step: result.steps.len().min(recorded.len()) as u64,
            detail: format!("{} steps recorded, {} replayed", recorded.len(), result.steps.len()),
        });
    }
    if let Some((i, (want, got))) =
        recorded_findings.iter().zip(&result.findings).enumerate().find(|(_, (w, g))| w != g)
    {
        return Err(HarnessError::Divergence {
            step: got.step.unwrap_or(0),
            detail: format!("finding {i} differs: recorded {want:?}, replayed {got:?}"),
        });
    }
    if recorded_findings.len() != result.findings.len() {
        return Err(HarnessError::Divergence {
            step: result.steps.last().map_or(0, |s| s.global_step),
            detail: format!("{} findings recorded, {} replayed", recorded_findings.len(), result.findings.len()),
        });
    }
    Ok(result)
}

fn describe_diff(want: &StepRecord, got: &StepRecord) -> String {
    let a = serde_json::to_value(want).expect("record serializes");
    let b = serde_json::to_value(got).expect("record serializes");
    let fields: Vec<String> = a
        .as_object()
        .expect("record is an object")
        .iter()
        .filter(|(k, v)| b.get(k.as_str()) != Some(v))
        .map(|(k, v)| format!("{k}: recorded {v}, replayed {}", b[k.as_str()]))
        .collect();
    fields.join("; ")
}

/// Replays one finding's trigger in a fresh schedule and returns what the
/// oracles report along the way.
pub fn reproduce(cfg: &CampaignConfig, trigger: &TriggerRef) -> Result<Vec<Detection>, HarnessError> {
    let cfg = CampaignConfig { seed: trigger.seed, ..cfg.clone() };
    let (mut sched, reset) = Schedule::start(&cfg, trigger.schedule, false)?;
    let mut found = reset.detections;
    for f in &trigger.faults {
        found.extend(sched.step(&cfg, *f)?.detections);
    }
    Ok(found)
}

/// Shrinks a trigger by replacing faults with `NoOp` one at a time while the
/// finding of `kind` still reproduces, then drops trailing no-ops.
pub fn minimize(cfg: &CampaignConfig, trigger: &TriggerRef, kind: FindingKind) -> Result<TriggerRef, HarnessError> {
    let hits = |t: &TriggerRef| -> Result<bool, HarnessError> { Ok(reproduce(cfg, t)?.iter().any(|d| d.kind == kind)) };
    let mut best = trigger.clone();
    if !hits(&best)? {
        return Ok(best);
    }
    for i in 0..best.faults.len() {
        if best.faults[i].tag == FaultTag::NoOp {
            continue;
        }
        let mut cand = best.clone();
        cand.faults[i] = FaultAction::untargeted(FaultTag::NoOp);
        if hits(&cand)? {
            best = cand;
        }
    }
    while best.faults.len() > 1 && best.faults.last().is_some_and(|f| f.tag == FaultTag::NoOp) {
        let mut cand = best.clone();
        cand.faults.pop();
        if !hits(&cand)? {
            break;
        }
        best = cand;
    }
    Ok(best)
}

/// Cumulative summaries of fault-free schedules, one per step.
pub fn steady_summaries(cfg: &CampaignConfig, windows: usize) -> Result<Vec<EventHistory>, HarnessError> {
    let mut out = Vec::with_capacity(windows);
    let mut schedule = 0;
    while out.len() < windows {
        let (mut sched, _) = Schedule::start(cfg, schedule, false)?;
        for _ in 0..cfg.steps_per_schedule {
            if out.len() >= windows {
                break;
            }
            out.push(sched.step(cfg, FaultAction::untargeted(FaultTag::NoOp))?.summary);
        }
        schedule += 1;
    }
    Ok(out)
}
