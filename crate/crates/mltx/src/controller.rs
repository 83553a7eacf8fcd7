//! Controller components: commit, abort, deadlock detection, and recovery.
//!
//! Every fired step leaves a history entry behind: the previous values of the
//! genuinely written locations, the inverse pair of every partial update, the
//! locks acquired for the step, and the fire round's sequence number. Undo
//! pops the youngest entry, restores genuine locations to their recorded
//! values, applies the partial inverses to the *current* values (removing
//! only this machine's contribution, by the inverse postulate), releases the
//! entry's locks and rewinds the program counter.
//!
//! Deadlocks are cycles in the Wait relation: M waits for N when one of M's
//! needed locks is blocked by N. The handler victimizes, per cyclic group,
//! the greatest machine-id that is eligible (in `ta_ctl`, not yet a victim);
//! recovery then undoes the least victim one step per activation until it is
//! no longer deadlocked. Abort undoes a machine's whole history in one
//! activation and releases whatever locks remain.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::executor::{CtlState, Simulation};
use crate::locks::{blocks, new_locks};
use crate::ops::{
    aggregate, AggregatedUpdateSet, GenuineUpdate, LockMode, OpError, OperatorRegistry,
};
use crate::store::{LocationPath, Store, StoreError, StoreValue};
use crate::trace::{CtlUpdate, Event, Round};
use crate::workload::StepIntent;

/// Per-step recovery record; one per member per fire, LIFO per machine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryEntry {
    /// Previous values of the genuinely written locations.
    pub genuine_restores: BTreeSet<GenuineUpdate>,
    /// Inverse pair for each fired partial update.
    pub partial_inverses: Vec<(LocationPath, (String, StoreValue))>,
    /// The locks granted for this step (temp locks included; they are usually
    /// released by the time an undo runs, which is fine).
    pub acquired_locks: BTreeSet<(LocationPath, LockMode)>,
    /// Sequence number of the fire round this entry records; the join key
    /// between undo events and fire rounds.
    pub step_seq: u64,
    /// The step index that fired; undo rewinds the machine here.
    pub pc: usize,
}

/// Dynamic controller state: the transaction set, the component request sets,
/// the victim set, and the per-machine histories.
///
/// Lock requests are a FIFO queue (at most one pending request per machine):
/// serving the oldest request first keeps polling machines from starving the
/// ones whose requests arrived earlier, which the least-id rule used by the
/// other components would allow.
#[derive(Debug, Clone, Default)]
pub struct ControllerState {
    pub trans_act: BTreeSet<String>,
    pub lock_requests: Vec<String>,
    pub commit_requests: BTreeSet<String>,
    pub abort_requests: BTreeSet<String>,
    pub victims: BTreeSet<String>,
    pub histories: BTreeMap<String, Vec<HistoryEntry>>,
}

impl ControllerState {
    /// Queue a lock request unless one is already pending.
    pub fn push_lock_request(&mut self, machine: &str) {
        if !self.lock_requests.iter().any(|m| m == machine) {
            self.lock_requests.push(machine.to_string());
        }
    }
}

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error("internal error: {0}")]
    Internal(String),
}

/// The recovery updates for a step about to fire: previous values of the
/// genuine write locations and the inverse pair of every partial update,
/// both computed against the pre-fire store.
pub fn recovery_upd(
    intent: &StepIntent,
    store: &Store,
    registry: &OperatorRegistry,
) -> Result<(BTreeSet<GenuineUpdate>, Vec<(LocationPath, (String, StoreValue))>), RecoveryError> {
    let mut restores = BTreeSet::new();
    for loc in &intent.genuine_write_loc {
        restores.insert(GenuineUpdate { loc: loc.clone(), val: store.eval(loc)?.clone() });
    }
    let mut inverses = Vec::new();
    for p in &intent.partial {
        let (op, arg) = registry.inverse(&p.op, &p.arg)?;
        inverses.push((p.loc.clone(), (op, arg)));
    }
    Ok((restores, inverses))
}

impl Simulation {
    /// Undo the youngest history entry of `m`. Restores genuine locations to
    /// their recorded values, folds the partial inverses into the current
    /// values, releases exactly that step's locks and rewinds the pc.
    pub(crate) fn undo(&mut self, m: &str, round: &mut Round) -> Result<(), RecoveryError> {
        let entry = self
            .ctl
            .histories
            .get_mut(m)
            .and_then(Vec::pop)
            .ok_or_else(|| RecoveryError::Internal(format!("undo of {m} with empty history")))?;

        // fold inverse pairs per location against the current value; one
        // genuine update per location (inverses of one step commute)
        let mut folded: BTreeMap<LocationPath, StoreValue> = BTreeMap::new();
        for (loc, (op, arg)) in &entry.partial_inverses {
            let base = match folded.get(loc) {
                Some(v) => v.clone(),
                None => self.store.eval(loc)?.clone(),
            };
            folded.insert(loc.clone(), self.registry.apply(op, &base, arg)?);
        }
        let inverse_updates: Vec<GenuineUpdate> = folded
            .into_iter()
            .map(|(loc, val)| GenuineUpdate { loc, val })
            .collect();

        let restore = aggregate(
            &self.store,
            entry.genuine_restores.iter().chain(inverse_updates.iter()),
            [],
            &self.registry,
        );
        let updates = match restore {
            AggregatedUpdateSet::Consistent(map) => map,
            AggregatedUpdateSet::Inconsistent(reason) => {
                // cannot happen given the lock discipline: a step's restore
                // locations never overlap
                return Err(RecoveryError::Internal(format!("restore aggregate: {reason}")));
            }
        };
        let restored: Vec<GenuineUpdate> = updates
            .iter()
            .map(|(loc, val)| GenuineUpdate { loc: loc.clone(), val: val.clone() })
            .collect();
        for (loc, val) in updates {
            self.store.write_genuine(&loc, val)?;
        }

        // release exactly this entry's locks; temps are already gone
        for (loc, mode) in &entry.acquired_locks {
            self.remove_lock(loc, m, mode, round);
        }
        // a released Write may have absorbed a Read acquired by an older,
        // still-recorded step; reinstate it
        for (loc, mode) in &entry.acquired_locks {
            if *mode != LockMode::Write {
                continue;
            }
            let older_read = self.ctl.histories.get(m).is_some_and(|h| {
                h.iter().any(|e| e.acquired_locks.contains(&(loc.clone(), LockMode::Read)))
            });
            if older_read {
                self.install_lock(loc, m, LockMode::Read, round);
            }
        }
        self.machines.get_mut(m).expect("known machine").pc = entry.pc;
        round.events.push(Event::Undo {
            machine: m.to_string(),
            step_seq: entry.step_seq,
            restored,
        });
        Ok(())
    }

    /// The Wait relation: M -> N when some lock M needs for its current step
    /// is blocked by N. Computed from lock needs, not queued requests, so
    /// refused machines that have not yet re-requested still count.
    pub(crate) fn wait_edges(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut edges: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for m in &self.ctl.trans_act {
            if self.ctl.commit_requests.contains(m) || self.ctl.abort_requests.contains(m) {
                continue;
            }
            let mc = &self.machines[m];
            let program = &self.programs[m];
            let Some(step) = program.steps.get(mc.pc) else { continue };
            let classification =
                self.store.classification(m).cloned().unwrap_or_default();
            let needed = new_locks(m, step, &classification, &self.table);
            for (loc, mode) in &needed {
                for n in &self.ctl.trans_act {
                    if n == m {
                        continue;
                    }
                    if blocks(&self.table, n, loc, mode, &self.registry, self.cfg.subsumption) {
                        edges.entry(m.clone()).or_default().insert(n.clone());
                    }
                }
            }
        }
        edges
    }

    /// Machines on a Wait cycle: (M, M) in the transitive closure.
    pub(crate) fn deadlocked(&self, edges: &BTreeMap<String, BTreeSet<String>>) -> BTreeSet<String> {
        let reach = transitive_closure(edges);
        reach
            .iter()
            .filter(|(m, to)| to.contains(*m))
            .map(|(m, _)| m.clone())
            .collect()
    }

    /// The victims the deadlock handler would mark right now: per cyclic
    /// group, the greatest eligible machine-id. Machines in `wait_for_locks`
    /// or already victimized are not eligible.
    pub(crate) fn victims_to_mark(&self) -> BTreeSet<String> {
        let edges = self.wait_edges();
        let dead = self.deadlocked(&edges);
        if dead.is_empty() {
            return BTreeSet::new();
        }
        let reach = transitive_closure(&edges);
        let eligible = |m: &String| {
            !self.ctl.victims.contains(m) && self.machines[m].state == CtlState::TaCtl
        };
        // group deadlocked machines by mutual reachability
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut out = BTreeSet::new();
        for m in &dead {
            if seen.contains(m) {
                continue;
            }
            let scc: BTreeSet<String> = dead
                .iter()
                .filter(|n| {
                    *n == m
                        || (reach.get(m).is_some_and(|r| r.contains(*n))
                            && reach.get(*n).is_some_and(|r| r.contains(m)))
                })
                .cloned()
                .collect();
            seen.extend(scc.iter().cloned());
            if let Some(victim) = scc.iter().filter(|n| eligible(n)).max() {
                out.insert(victim.clone());
            }
        }
        out
    }

    /// Mark victims for every Wait cycle found.
    pub(crate) fn deadlock_handler_step(&mut self, round: &mut Round) {
        let victims = self.victims_to_mark();
        if victims.is_empty() {
            return;
        }
        let edges = self.wait_edges();
        let dead: Vec<String> = self.deadlocked(&edges).into_iter().collect();
        for v in victims {
            self.ctl.victims.insert(v.clone());
            round.ctl.push(CtlUpdate::Victim { machine: v.clone(), victim: true });
            round.events.push(Event::Victimized { machine: v, deadlocked: dead.clone() });
        }
    }

    /// Try to recover the least victim: unmark it once it is no longer
    /// deadlocked, otherwise undo one step.
    pub(crate) fn recovery_step(&mut self, round: &mut Round) {
        let Some(m) = self.ctl.victims.first().cloned() else { return };
        let edges = self.wait_edges();
        let dead = self.deadlocked(&edges);
        let history_empty =
            self.ctl.histories.get(&m).is_none_or(|h| h.is_empty());
        if !dead.contains(&m) || history_empty {
            // a victim with empty history holds no locks, so it cannot be on
            // a cycle; both branches unmark
            debug_assert!(!history_empty || !dead.contains(&m));
            self.ctl.victims.remove(&m);
            round.ctl.push(CtlUpdate::Victim { machine: m.clone(), victim: false });
            round.events.push(Event::Recovered { machine: m });
        } else {
            self.undo(&m, round).expect("undo of a deadlocked victim succeeds");
        }
    }

    /// Commit the least pending requester: release every lock it holds and
    /// deregister it. Its locks were its only footprint; the store keeps its
    /// updates.
    pub(crate) fn commit_step(&mut self, round: &mut Round) {
        let Some(m) = self.ctl.commit_requests.first().cloned() else { return };
        self.ctl.commit_requests.remove(&m);
        self.release_all_locks(&m, round);
        self.ctl.trans_act.remove(&m);
        self.ctl.histories.remove(&m);
        round.ctl.push(CtlUpdate::Transact { machine: m.clone(), member: false });
        self.machines.get_mut(&m).expect("known machine").state = CtlState::Committed;
        round.ctl.push(CtlUpdate::State { machine: m.clone(), state: "committed".to_string() });
        round.events.push(Event::Commit { machine: m });
    }

    /// Abort every requester in one activation: undo the whole history, then
    /// release residual locks (including locks granted for a step that never
    /// fired) and deregister.
    pub(crate) fn abort_step(&mut self, round: &mut Round) {
        let requests: Vec<String> = self.ctl.abort_requests.iter().cloned().collect();
        for m in requests {
            self.ctl.abort_requests.remove(&m);
            while self.ctl.histories.get(&m).is_some_and(|h| !h.is_empty()) {
                self.undo(&m, round).expect("undo with non-empty history succeeds");
            }
            self.release_all_locks(&m, round);
            self.ctl.trans_act.remove(&m);
            self.ctl.lock_requests.retain(|q| *q != m);
            self.ctl.victims.remove(&m);
            self.ctl.histories.remove(&m);
            round.ctl.push(CtlUpdate::Transact { machine: m.clone(), member: false });
            self.machines.get_mut(&m).expect("known machine").state = CtlState::Aborted;
            round.ctl.push(CtlUpdate::State { machine: m.clone(), state: "aborted".to_string() });
            round.events.push(Event::Abort { machine: m });
        }
    }
}

/// Reachability sets of the Wait graph (non-reflexive transitive closure).
fn transitive_closure(
    edges: &BTreeMap<String, BTreeSet<String>>,
) -> BTreeMap<String, BTreeSet<String>> {
    let mut nodes: BTreeSet<&String> = BTreeSet::new();
    for (m, to) in edges {
        nodes.insert(m);
        nodes.extend(to.iter());
    }
    let mut reach: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (m, to) in edges {
        reach.insert(m.clone(), to.clone());
    }
    let mut changed = true;
    while changed {
        changed = false;
        for m in &nodes {
            let current = reach.get(*m).cloned().unwrap_or_default();
            let mut extended = current.clone();
            for n in &current {
                if let Some(next) = reach.get(n) {
                    extended.extend(next.iter().cloned());
                }
            }
            if extended.len() != current.len() {
                reach.insert((*m).clone(), extended);
                changed = true;
            }
        }
    }
    reach
}
