//! Round-based executor.
//!
//! Each machine runs the control-state automaton: in `ta_ctl` it reacts to
//! victimization, requests commit when its program is exhausted, calls the
//! lock handler when it needs locks, and otherwise tries to fire; in
//! `wait_for_locks` it reacts to grant or refusal (refusal bounces it back to
//! `ta_ctl` to re-request); in `wait_for_recovery` it waits until it is no
//! longer a victim. Firing executes the whole partner group — every machine
//! simultaneously ready to fire that shares a to-be-updated location with the
//! group — in one round: one aggregate over the union of their updates, one
//! history entry per member, temp locks released.
//!
//! A round is the activation of exactly one agent (a machine or one of the
//! controller components). Schedulers pick the next enabled agent: `rr` scans
//! a fixed cyclic order, `random` draws from a seeded generator; both are
//! deterministic given the seed, so a run is identified by
//! (workload, seed, scheduler, flags) and its trace is byte-reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::controller::ControllerState;
use crate::locks::{cannot_be_granted, new_locks, LockTable, SubsumptionMode};
use crate::ops::{aggregate, splitmix64, AggregatedUpdateSet, LockMode, OperatorRegistry};
use crate::store::{Classification, LocationPath, Store};
use crate::trace::{
    CtlUpdate, Event, Outcome, Round, Trace, TraceFooter, TraceHeader, TRACE_VERSION,
};
use crate::workload::{eval_step, Program, StepIntent, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerKind {
    RoundRobin,
    Random,
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedulerKind::RoundRobin => f.write_str("rr"),
            SchedulerKind::Random => f.write_str("random"),
        }
    }
}

impl std::str::FromStr for SchedulerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rr" => Ok(SchedulerKind::RoundRobin),
            "random" => Ok(SchedulerKind::Random),
            other => Err(format!("unknown scheduler {other:?} (expected rr or random)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub scheduler: SchedulerKind,
    pub subsumption: SubsumptionMode,
    /// Bound on rounds; defaults to 100 x total step count.
    pub max_rounds: Option<u64>,
    /// Stagger machine registration over early rounds instead of round 0.
    pub stagger: bool,
}

impl Default for SimConfig {
    fn default() -> SimConfig {
        SimConfig {
            seed: 0,
            scheduler: SchedulerKind::RoundRobin,
            subsumption: SubsumptionMode::Safe,
            max_rounds: None,
            stagger: false,
        }
    }
}

/// Control states of the per-machine automaton.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtlState {
    TaCtl,
    WaitForLocks,
    WaitForRecovery,
    Committed,
    Aborted,
}

impl CtlState {
    fn name(self) -> &'static str {
        match self {
            CtlState::TaCtl => "ta_ctl",
            CtlState::WaitForLocks => "wait_for_locks",
            CtlState::WaitForRecovery => "wait_for_recovery",
            CtlState::Committed => "committed",
            CtlState::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MachineCtl {
    pub state: CtlState,
    pub pc: usize,
    pub granted: bool,
    pub refused: bool,
    /// Locks granted for the current step, moved into the history entry when
    /// the step fires.
    pub last_granted: BTreeSet<(LocationPath, LockMode)>,
    pub abort_reason: Option<String>,
    pub joined: bool,
}

impl MachineCtl {
    fn new() -> MachineCtl {
        MachineCtl {
            state: CtlState::TaCtl,
            pc: 0,
            granted: false,
            refused: false,
            last_granted: BTreeSet::new(),
            abort_reason: None,
            joined: false,
        }
    }
}

/// Schedulable agents: the machines plus the five controller components.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Agent {
    Machine(String),
    LockHandler,
    DeadlockHandler,
    Recovery,
    Commit,
    Abort,
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Agent::Machine(m) => f.write_str(m),
            Agent::LockHandler => f.write_str("lock_handler"),
            Agent::DeadlockHandler => f.write_str("deadlock_handler"),
            Agent::Recovery => f.write_str("recovery"),
            Agent::Commit => f.write_str("commit"),
            Agent::Abort => f.write_str("abort"),
        }
    }
}

struct SchedulerState {
    cursor: usize,
    rng: ChaCha8Rng,
}

/// The whole simulated world: store, lock table, controller state, machine
/// automata, and the trace being built. One logical thread owns it; the
/// simulation models concurrency rather than using it.
pub struct Simulation {
    pub(crate) registry: OperatorRegistry,
    pub(crate) cfg: SimConfig,
    pub(crate) store: Store,
    pub(crate) table: LockTable,
    pub(crate) programs: BTreeMap<String, Program>,
    pub(crate) machines: BTreeMap<String, MachineCtl>,
    pub(crate) ctl: ControllerState,
    rounds: Vec<Round>,
    next_seq: u64,
    join_rounds: BTreeMap<String, u64>,
    header: TraceHeader,
    sched: SchedulerState,
    max_rounds: u64,
}

impl Simulation {
    pub fn new(workload: &Workload, workload_digest: &str, cfg: SimConfig) -> Simulation {
        let total_steps: u64 = workload.total_steps() as u64;
        let max_rounds = cfg.max_rounds.unwrap_or((100 * total_steps).max(100));
        let programs: BTreeMap<String, Program> =
            workload.programs.iter().map(|p| (p.machine.clone(), p.clone())).collect();
        let machines: BTreeMap<String, MachineCtl> =
            programs.keys().map(|m| (m.clone(), MachineCtl::new())).collect();
        let join_rounds: BTreeMap<String, u64> = programs
            .keys()
            .enumerate()
            .map(|(i, m)| {
                let round = if cfg.stagger {
                    splitmix64(cfg.seed ^ 0x5741_4747 ^ i as u64) % (2 * programs.len() as u64 + 1)
                } else {
                    0
                };
                (m.clone(), round)
            })
            .collect();
        let header = TraceHeader {
            version: TRACE_VERSION,
            workload_digest: workload_digest.to_string(),
            seed: cfg.seed,
            scheduler: cfg.scheduler.to_string(),
            strict_subsumption: cfg.subsumption == SubsumptionMode::Strict,
            stagger: cfg.stagger,
            max_rounds,
        };
        let rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x5343_4845));
        Simulation {
            registry: OperatorRegistry::builtin(),
            cfg,
            store: workload.init.clone(),
            table: LockTable::new(),
            programs,
            machines,
            ctl: ControllerState::default(),
            rounds: Vec::new(),
            next_seq: 0,
            join_rounds,
            header,
            sched: SchedulerState { cursor: 0, rng },
            max_rounds,
        }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn lock_table(&self) -> &LockTable {
        &self.table
    }

    pub fn controller(&self) -> &ControllerState {
        &self.ctl
    }

    pub fn machine(&self, m: &str) -> Option<&MachineCtl> {
        self.machines.get(m)
    }

    pub fn registry(&self) -> &OperatorRegistry {
        &self.registry
    }

    pub fn rounds_so_far(&self) -> &[Round] {
        &self.rounds
    }

    fn classification(&self, machine: &str) -> Classification {
        self.store.classification(machine).cloned().unwrap_or_default()
    }

    /// The locks machine `m` still needs for its current step.
    pub fn needed_locks(&self, m: &str) -> BTreeSet<(LocationPath, LockMode)> {
        let Some(mc) = self.machines.get(m) else { return BTreeSet::new() };
        let Some(program) = self.programs.get(m) else { return BTreeSet::new() };
        let Some(step) = program.steps.get(mc.pc) else { return BTreeSet::new() };
        new_locks(m, step, &self.classification(m), &self.table)
    }

    /// All machines registered so far have finished.
    pub fn finished(&self) -> bool {
        self.all_joined() && self.ctl.trans_act.is_empty()
    }

    fn all_joined(&self) -> bool {
        self.machines.values().all(|mc| mc.joined)
    }

    pub fn agents(&self) -> Vec<Agent> {
        let mut out: Vec<Agent> =
            self.machines.keys().map(|m| Agent::Machine(m.clone())).collect();
        out.extend([
            Agent::LockHandler,
            Agent::DeadlockHandler,
            Agent::Recovery,
            Agent::Commit,
            Agent::Abort,
        ]);
        out
    }

    pub fn enabled(&self, agent: &Agent) -> bool {
        match agent {
            Agent::Machine(m) => {
                let Some(mc) = self.machines.get(m) else { return false };
                if !mc.joined
                    || !self.ctl.trans_act.contains(m)
                    || self.ctl.commit_requests.contains(m)
                    || self.ctl.abort_requests.contains(m)
                {
                    return false;
                }
                match mc.state {
                    CtlState::TaCtl => true,
                    CtlState::WaitForLocks => mc.granted || mc.refused,
                    CtlState::WaitForRecovery => !self.ctl.victims.contains(m),
                    CtlState::Committed | CtlState::Aborted => false,
                }
            }
            Agent::LockHandler => !self.ctl.lock_requests.is_empty(),
            Agent::DeadlockHandler => !self.victims_to_mark().is_empty(),
            Agent::Recovery => !self.ctl.victims.is_empty(),
            Agent::Commit => !self.ctl.commit_requests.is_empty(),
            Agent::Abort => !self.ctl.abort_requests.is_empty(),
        }
    }

    /// Register every machine immediately, regardless of stagger. Scripted
    /// schedules call this once before activating agents by hand.
    pub fn register_now(&mut self) {
        for r in self.join_rounds.values_mut() {
            *r = 0;
        }
        self.join_due_machines();
    }

    /// Register every machine whose join round has come. Emits one `register`
    /// round per batch. Returns true if anything joined.
    fn join_due_machines(&mut self) -> bool {
        let due: Vec<String> = self
            .machines
            .iter()
            .filter(|(m, mc)| !mc.joined && self.join_rounds[*m] <= self.next_seq)
            .map(|(m, _)| m.clone())
            .collect();
        if due.is_empty() {
            return false;
        }
        let mut round = Round::new(self.next_seq, "register");
        self.next_seq += 1;
        for m in due {
            let mc = self.machines.get_mut(&m).expect("known machine");
            mc.joined = true;
            self.ctl.trans_act.insert(m.clone());
            self.ctl.histories.insert(m.clone(), Vec::new());
            round.ctl.push(CtlUpdate::Transact { machine: m.clone(), member: true });
            round.events.push(Event::Register { machine: m });
        }
        self.rounds.push(round);
        true
    }

    /// Activate one agent for one round.
    pub fn activate(&mut self, agent: &Agent) {
        let mut round = Round::new(self.next_seq, agent.to_string());
        self.next_seq += 1;
        match agent {
            Agent::Machine(m) => self.machine_step(&m.clone(), &mut round),
            Agent::LockHandler => self.lock_handler_step(&mut round),
            Agent::DeadlockHandler => self.deadlock_handler_step(&mut round),
            Agent::Recovery => self.recovery_step(&mut round),
            Agent::Commit => self.commit_step(&mut round),
            Agent::Abort => self.abort_step(&mut round),
        }
        self.rounds.push(round);
    }

    fn set_state(&mut self, m: &str, state: CtlState, round: &mut Round) {
        let mc = self.machines.get_mut(m).expect("known machine");
        if mc.state != state {
            mc.state = state;
            round.ctl.push(CtlUpdate::State { machine: m.to_string(), state: state.name().to_string() });
        }
    }

    pub(crate) fn install_lock(&mut self, loc: &LocationPath, m: &str, mode: LockMode, round: &mut Round) {
        // record a read-to-write upgrade as an explicit release then install
        if mode == LockMode::Write && self.table.holds(loc, m, &LockMode::Read) {
            self.remove_lock(loc, m, &LockMode::Read, round);
        }
        if self.table.install(loc, m, mode.clone()) {
            round.ctl.push(CtlUpdate::Lock {
                path: loc.clone(),
                machine: m.to_string(),
                mode,
                held: true,
            });
        }
    }

    pub(crate) fn remove_lock(&mut self, loc: &LocationPath, m: &str, mode: &LockMode, round: &mut Round) {
        if self.table.remove(loc, m, mode) {
            round.ctl.push(CtlUpdate::Lock {
                path: loc.clone(),
                machine: m.to_string(),
                mode: mode.clone(),
                held: false,
            });
        }
    }

    pub(crate) fn release_all_locks(&mut self, m: &str, round: &mut Round) {
        for (loc, mode) in self.table.held_by(m) {
            self.remove_lock(&loc, m, &mode, round);
        }
    }

    /// One automaton transition for machine `m`.
    fn machine_step(&mut self, m: &str, round: &mut Round) {
        let mc = self.machines.get(m).expect("known machine").clone();
        match mc.state {
            CtlState::Committed | CtlState::Aborted => {}
            CtlState::WaitForRecovery => {
                // Recovered: no longer a victim
                if !self.ctl.victims.contains(m) {
                    self.set_state(m, CtlState::TaCtl, round);
                }
            }
            CtlState::WaitForLocks => {
                if mc.granted {
                    self.machines.get_mut(m).unwrap().granted = false;
                    self.set_state(m, CtlState::TaCtl, round);
                    self.try_fire(m, round);
                } else if mc.refused {
                    // poll loop: back to ta_ctl, re-request on next activation
                    self.machines.get_mut(m).unwrap().refused = false;
                    self.set_state(m, CtlState::TaCtl, round);
                }
            }
            CtlState::TaCtl => {
                if self.ctl.victims.contains(m) {
                    self.set_state(m, CtlState::WaitForRecovery, round);
                    return;
                }
                let program = &self.programs[m];
                if program.terminated(mc.pc) {
                    self.ctl.commit_requests.insert(m.to_string());
                    round.events.push(Event::CommitRequested { machine: m.to_string() });
                    return;
                }
                let needed = self.needed_locks(m);
                if !needed.is_empty() {
                    self.ctl.push_lock_request(m);
                    self.set_state(m, CtlState::WaitForLocks, round);
                    round.events.push(Event::LockRequest {
                        machine: m.to_string(),
                        locks: needed.into_iter().collect(),
                    });
                    return;
                }
                self.try_fire(m, round);
            }
        }
    }

    /// The canGo point: evaluate the step, check the machine's own aggregate,
    /// then fire the whole partner group.
    fn try_fire(&mut self, m: &str, round: &mut Round) {
        let mc = &self.machines[m];
        let program = &self.programs[m];
        let intent = match eval_step(program, mc.pc, &self.store, self.cfg.seed) {
            Ok(i) => i,
            Err(e) => {
                self.call_abort(m, format!("step evaluation failed: {e}"), round);
                return;
            }
        };
        let own = aggregate(&self.store, &intent.genuine, &intent.partial, &self.registry);
        if let AggregatedUpdateSet::Inconsistent(reason) = own {
            self.call_abort(m, reason, round);
            return;
        }
        let group = self.partners(m);
        self.fire(&group, round);
    }

    pub(crate) fn call_abort(&mut self, m: &str, reason: String, round: &mut Round) {
        self.ctl.abort_requests.insert(m.to_string());
        self.machines.get_mut(m).expect("known machine").abort_reason = Some(reason.clone());
        round.events.push(Event::AbortRequested { machine: m.to_string(), reason });
    }

    /// A machine is at the fire point if it is active, needs no further locks
    /// (or has just been granted them), and its own update set is consistent.
    fn ready_to_fire(&self, n: &str) -> Option<StepIntent> {
        let mc = self.machines.get(n)?;
        if !mc.joined
            || !self.ctl.trans_act.contains(n)
            || self.ctl.commit_requests.contains(n)
            || self.ctl.abort_requests.contains(n)
            || self.ctl.victims.contains(n)
        {
            return None;
        }
        let program = self.programs.get(n)?;
        if program.terminated(mc.pc) {
            return None;
        }
        match mc.state {
            CtlState::TaCtl => {
                if !self.needed_locks(n).is_empty() {
                    return None;
                }
            }
            CtlState::WaitForLocks => {
                if !mc.granted {
                    return None;
                }
            }
            _ => return None,
        }
        let intent = eval_step(program, mc.pc, &self.store, self.cfg.seed).ok()?;
        aggregate(&self.store, &intent.genuine, &intent.partial, &self.registry)
            .is_consistent()
            .then_some(intent)
    }

    /// Transitive closure of "shares a to-be-updated location" over machines
    /// simultaneously at the fire point. Always contains `m`.
    pub fn partners(&self, m: &str) -> BTreeSet<String> {
        let mut group: BTreeSet<String> = [m.to_string()].into();
        let candidates: Vec<String> = self
            .machines
            .keys()
            .filter(|n| n.as_str() != m && self.ready_to_fire(n).is_some())
            .cloned()
            .collect();
        let upd_locs = |n: &str| -> BTreeSet<LocationPath> {
            let mc = &self.machines[n];
            self.programs[n].steps.get(mc.pc).map(|s| s.write_locs()).unwrap_or_default()
        };
        let mut changed = true;
        while changed {
            changed = false;
            for n in &candidates {
                if group.contains(n) {
                    continue;
                }
                let n_locs = upd_locs(n);
                let shares = group.iter().any(|k| {
                    upd_locs(k).iter().any(|lk| n_locs.iter().any(|ln| lk.overlaps(ln)))
                });
                if shares {
                    group.insert(n.clone());
                    changed = true;
                }
            }
        }
        group
    }

    /// Fire one partner group atomically: aggregate the union of all members'
    /// updates; on success apply it, append each member's history entry,
    /// release temps and advance; on an inconsistent group aggregate, abort
    /// every member and leave the store untouched.
    pub(crate) fn fire(&mut self, group: &BTreeSet<String>, round: &mut Round) {
        let mut intents: BTreeMap<String, StepIntent> = BTreeMap::new();
        for n in group {
            match eval_step(&self.programs[n], self.machines[n].pc, &self.store, self.cfg.seed) {
                Ok(i) => {
                    intents.insert(n.clone(), i);
                }
                Err(e) => {
                    // unreachable for members vetted by ready_to_fire
                    self.call_abort(n, format!("step evaluation failed: {e}"), round);
                    return;
                }
            }
        }

        let mut records = BTreeMap::new();
        for (n, intent) in &intents {
            match crate::controller::recovery_upd(intent, &self.store, &self.registry) {
                Ok(rec) => {
                    records.insert(n.clone(), rec);
                }
                Err(e) => {
                    self.call_abort(n, format!("recovery record failed: {e}"), round);
                    return;
                }
            }
        }

        let genuine: Vec<_> = intents.values().flat_map(|i| i.genuine.iter()).collect();
        let partial: Vec<_> = intents.values().flat_map(|i| i.partial.iter()).collect();
        let agg = aggregate(&self.store, genuine.into_iter(), partial.into_iter(), &self.registry);
        let updates = match agg {
            AggregatedUpdateSet::Consistent(map) => map,
            AggregatedUpdateSet::Inconsistent(reason) => {
                for n in group {
                    self.call_abort(n, format!("group aggregate inconsistent: {reason}"), round);
                }
                return;
            }
        };

        for (loc, val) in &updates {
            self.store
                .write_genuine(loc, val.clone())
                .expect("aggregated update locations resolve");
        }

        let step_seq = round.seq;
        let mut pcs = BTreeMap::new();
        for n in group {
            let intent = &intents[n];
            let (restores, inverses) = records.remove(n).expect("recorded above");
            let mc = self.machines.get_mut(n).expect("known machine");
            let acquired = std::mem::take(&mut mc.last_granted);
            let pc = mc.pc;
            mc.pc += 1;
            mc.granted = false;
            self.ctl.histories.entry(n.clone()).or_default().push(
                crate::controller::HistoryEntry {
                    genuine_restores: restores,
                    partial_inverses: inverses,
                    acquired_locks: acquired,
                    step_seq,
                    pc,
                },
            );
            pcs.insert(n.clone(), pc);
            self.set_state(n, CtlState::TaCtl, round);
            for loc in self.table.temps_of(n) {
                self.remove_lock(&loc, n, &LockMode::Temp, round);
            }
            if !intent.genuine.is_empty() {
                round.delta.insert(n.clone(), intent.genuine.iter().cloned().collect());
            }
            if !intent.partial.is_empty() {
                round.gamma.insert(n.clone(), intent.partial.clone());
            }
            if !intent.read_values.is_empty() {
                round.reads.insert(n.clone(), intent.read_values.clone());
            }
        }
        round.events.push(Event::Fire { group: group.iter().cloned().collect(), pcs });
    }

    /// Handle the least pending lock request: all-or-nothing.
    fn lock_handler_step(&mut self, round: &mut Round) {
        if self.ctl.lock_requests.is_empty() {
            return;
        }
        let m = self.ctl.lock_requests.remove(0);
        if !self.ctl.trans_act.contains(&m) {
            return;
        }
        let needed = self.needed_locks(&m);
        let locks: Vec<(LocationPath, LockMode)> = needed.iter().cloned().collect();
        if cannot_be_granted(
            &self.table,
            &m,
            &needed,
            &self.ctl.trans_act,
            &self.registry,
            self.cfg.subsumption,
        ) {
            self.machines.get_mut(&m).expect("known machine").refused = true;
            round.events.push(Event::LockRefused { machine: m, locks });
        } else {
            for (loc, mode) in &needed {
                self.install_lock(loc, &m, mode.clone(), round);
            }
            let mc = self.machines.get_mut(&m).expect("known machine");
            mc.last_granted = needed;
            mc.granted = true;
            round.events.push(Event::LockGranted { machine: m, locks });
        }
    }

    /// Run to completion under the configured scheduler.
    pub fn run_to_end(&mut self) -> Outcome {
        loop {
            self.join_due_machines();
            if self.finished() {
                return Outcome::Complete;
            }
            if self.next_seq >= self.max_rounds {
                return Outcome::RoundLimitExceeded;
            }
            match self.pick_agent() {
                Some(agent) => self.activate(&agent),
                None => {
                    if !self.all_joined() {
                        // fast-forward to the next join round
                        let next = self
                            .machines
                            .iter()
                            .filter(|(_, mc)| !mc.joined)
                            .map(|(m, _)| self.join_rounds[m])
                            .min()
                            .expect("unjoined machine exists");
                        self.next_seq = self.next_seq.max(next);
                        continue;
                    }
                    return Outcome::Stuck;
                }
            }
        }
    }

    fn pick_agent(&mut self) -> Option<Agent> {
        let agents = self.agents();
        let enabled: Vec<usize> =
            (0..agents.len()).filter(|&i| self.enabled(&agents[i])).collect();
        if enabled.is_empty() {
            return None;
        }
        match self.cfg.scheduler {
            SchedulerKind::RoundRobin => {
                for offset in 0..agents.len() {
                    let i = (self.sched.cursor + offset) % agents.len();
                    if enabled.contains(&i) {
                        self.sched.cursor = i + 1;
                        return Some(agents[i].clone());
                    }
                }
                None
            }
            SchedulerKind::Random => {
                let i = enabled[self.sched.rng.random_range(0..enabled.len())];
                Some(agents[i].clone())
            }
        }
    }

    /// Consume the simulation, producing the trace and the final store.
    pub fn finish(self, outcome: Outcome) -> (Trace, Store) {
        let committed: Vec<String> = self
            .machines
            .iter()
            .filter(|(_, mc)| mc.state == CtlState::Committed)
            .map(|(m, _)| m.clone())
            .collect();
        let aborted: Vec<String> = self
            .machines
            .iter()
            .filter(|(_, mc)| mc.state == CtlState::Aborted)
            .map(|(m, _)| m.clone())
            .collect();
        let footer = TraceFooter {
            outcome,
            committed,
            aborted,
            rounds: self.next_seq,
        };
        (Trace { header: self.header, rounds: self.rounds, footer }, self.store)
    }
}

/// Result of a full run.
pub struct RunResult {
    pub trace: Trace,
    pub final_store: Store,
}

/// Simulate a workload to completion.
pub fn run(workload: &Workload, workload_digest: &str, cfg: &SimConfig) -> RunResult {
    let mut sim = Simulation::new(workload, workload_digest, cfg.clone());
    let outcome = sim.run_to_end();
    let (trace, final_store) = sim.finish(outcome);
    RunResult { trace, final_store }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::workload_digest;
    use crate::workload::Workload;

    fn parse(text: &str) -> Workload {
        Workload::parse(text, &OperatorRegistry::builtin()).unwrap()
    }

    fn run_text(text: &str, cfg: &SimConfig) -> RunResult {
        run(&parse(text), &workload_digest(text), cfg)
    }

    #[test]
    fn empty_workload_ends_immediately() {
        let r = run_text("init /x = 0\n", &SimConfig::default());
        assert_eq!(r.trace.footer.outcome, Outcome::Complete);
        assert!(r.trace.rounds.is_empty());
    }

    #[test]
    fn single_private_machine_golden_rounds() {
        // no locks needed: register, fire, commit-request, commit
        let text = "\
init /x = 0
machine m1
step:
  write /x := 1
";
        let r = run_text(text, &SimConfig::default());
        assert_eq!(r.trace.footer.outcome, Outcome::Complete);
        let agents: Vec<&str> = r.trace.rounds.iter().map(|r| r.agent.as_str()).collect();
        assert_eq!(agents, ["register", "m1", "m1", "commit"]);
        assert!(r.trace.rounds[1].fire_group().is_some());
        assert!(matches!(r.trace.rounds[2].events[0], Event::CommitRequested { .. }));
        assert!(matches!(r.trace.rounds[3].events[0], Event::Commit { .. }));
        assert_eq!(
            r.final_store.eval(&crate::store::LocationPath::parse("/x").unwrap()).unwrap(),
            &crate::store::StoreValue::Int(1)
        );
    }

    #[test]
    fn shared_machine_requests_locks_first() {
        let text = "\
init /x = 0
machine m1
shared /x
step:
  write /x := 1
";
        let r = run_text(text, &SimConfig::default());
        assert_eq!(r.trace.footer.outcome, Outcome::Complete);
        let agents: Vec<&str> = r.trace.rounds.iter().map(|r| r.agent.as_str()).collect();
        assert_eq!(agents, ["register", "m1", "lock_handler", "m1", "m1", "commit"]);
        assert!(r.trace.rounds.iter().any(|r| r
            .events
            .iter()
            .any(|e| matches!(e, Event::LockGranted { .. }))));
    }

    #[test]
    fn inconsistent_own_step_aborts() {
        let text = "\
init /x = 0
machine m1
step:
  write /x := 1
  write /x := 2
";
        let r = run_text(text, &SimConfig::default());
        assert_eq!(r.trace.footer.outcome, Outcome::Complete);
        assert_eq!(r.trace.footer.aborted, vec!["m1".to_string()]);
        assert!(r.trace.footer.committed.is_empty());
        // store untouched
        assert_eq!(
            r.final_store.eval(&crate::store::LocationPath::parse("/x").unwrap()).unwrap(),
            &crate::store::StoreValue::Int(0)
        );
    }

    #[test]
    fn determinism_byte_identical_traces() {
        let text = "\
init /x = 0
init /y = 1
machine m1
shared /x /y
step:
  read /y
  write /x := read(/y) + choose(1, 2)
machine m2
shared /x /y
step:
  read /x
  write /y := choose(5, 6)
";
        for scheduler in [SchedulerKind::RoundRobin, SchedulerKind::Random] {
            let cfg = SimConfig { seed: 11, scheduler, ..SimConfig::default() };
            let a = run_text(text, &cfg).trace.to_jsonl();
            let b = run_text(text, &cfg).trace.to_jsonl();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn different_seeds_differ_under_random() {
        let text = "\
init /x = 0
machine m1
shared /x
step:
  write /x := choose(1, 2, 3, 4, 5, 6, 7, 8)
";
        let traces: BTreeSet<String> = (0..16)
            .map(|seed| {
                let cfg = SimConfig { seed, ..SimConfig::default() };
                run_text(text, &cfg).trace.to_jsonl()
            })
            .collect();
        assert!(traces.len() > 1);
    }

    #[test]
    fn stagger_registers_over_rounds() {
        let text = "\
init /x = 0
machine m1
shared /x
step:
  partial /x add 1
machine m2
shared /x
step:
  partial /x add 1
";
        let cfg = SimConfig { seed: 3, stagger: true, ..SimConfig::default() };
        let r = run_text(text, &cfg);
        assert_eq!(r.trace.footer.outcome, Outcome::Complete);
        assert_eq!(r.trace.footer.committed.len(), 2);
    }
}
