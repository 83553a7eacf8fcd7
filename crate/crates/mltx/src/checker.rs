//! Serializability checking.
//!
//! A machine's *cleansed schedule* is the sequence of its fire rounds after
//! two deletions: rounds where it contributed no update (lock requests,
//! refusals, waiting) and rounds later undone by recovery, identified by the
//! step sequence number that undo events carry. Aborted machines disappear
//! entirely.
//!
//! The serial oracle replays each committed machine alone, in commit order,
//! each starting from the previous machine's final store, with the same
//! choice seed. A trace is serializable when every committed machine's
//! cleansed schedule — its genuine updates, its partial-update multisets, and
//! the locations and values it read — equals its solo schedule. The verdict
//! pinpoints the earliest divergence otherwise.
//!
//! `audit_locks` additionally checks the two-phase discipline from the trace
//! alone: non-temp locks are only ever released in rounds where their holder
//! commits, undoes a step, or aborts, and temp locks die in their holder's
//! fire (or abort) round.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::executor::{run, SchedulerKind, SimConfig};
use crate::locks::SubsumptionMode;
use crate::ops::{GenuineUpdate, LockMode, PartialUpdate};
use crate::store::{LocationPath, Store, StoreValue};
use crate::trace::{workload_digest, CtlUpdate, Event, Outcome, Trace};
use crate::workload::Workload;

/// One surviving round of a machine's schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScheduleRound {
    /// Fire round sequence number in the originating trace.
    pub step_seq: u64,
    /// The step index that fired.
    pub pc: usize,
    pub delta: BTreeSet<GenuineUpdate>,
    /// Canonically sorted: within a round the multiset order is meaningless.
    pub gamma: Vec<PartialUpdate>,
    pub reads: BTreeMap<LocationPath, StoreValue>,
}

impl ScheduleRound {
    /// Equality for run equivalence: same genuine set, same partial multiset,
    /// same read locations and values. The trace-side step_seq is incidental.
    fn equivalent(&self, other: &ScheduleRound) -> bool {
        self.pc == other.pc
            && self.delta == other.delta
            && self.gamma == other.gamma
            && self.reads == other.reads
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CleansedSchedule {
    pub machine: String,
    pub rounds: Vec<ScheduleRound>,
}

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("trace was produced from a different workload: digest {got} but workload hashes to {expected}")]
    DigestMismatch { expected: String, got: String },
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("serial replay of {machine} did not complete: {reason}")]
    Replay { machine: String, reason: String },
}

/// Why a trace failed the serializability check.
#[derive(Debug, Clone, Serialize)]
pub struct Divergence {
    pub machine: String,
    /// Index into the cleansed schedule where the runs first differ.
    pub position: usize,
    pub kind: String,
    pub expected: Option<ScheduleRound>,
    pub actual: Option<ScheduleRound>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub serializable: bool,
    pub commit_order: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence: Option<Divergence>,
}

/// The cleansed schedule of one machine.
///
/// Deletion (i): rounds without a proper update by the machine (its lock
/// requests, refusals and control transitions carry no delta/gamma, and
/// read-only fires drop out with them). Deletion (ii): fire rounds whose step
/// was later undone, joined on the step sequence number. Aborted machines are
/// dropped wholesale.
pub fn cleanse(trace: &Trace, machine: &str) -> Result<CleansedSchedule, CheckError> {
    if trace.footer.aborted.iter().any(|m| m == machine)
        || trace
            .events()
            .any(|(_, e)| matches!(e, Event::Abort { machine: m } if m == machine))
    {
        return Ok(CleansedSchedule { machine: machine.to_string(), rounds: Vec::new() });
    }

    let fired: BTreeSet<u64> = trace
        .rounds
        .iter()
        .filter(|r| r.fire_group().is_some_and(|g| g.iter().any(|m| m == machine)))
        .map(|r| r.seq)
        .collect();
    let mut undone: BTreeSet<u64> = BTreeSet::new();
    for (_, event) in trace.events() {
        if let Event::Undo { machine: m, step_seq, .. } = event {
            if m == machine {
                if !fired.contains(step_seq) {
                    return Err(CheckError::MalformedTrace(format!(
                        "undo of {machine} references step_seq {step_seq} with no matching fire"
                    )));
                }
                undone.insert(*step_seq);
            }
        }
    }

    let mut rounds = Vec::new();
    for round in &trace.rounds {
        if !fired.contains(&round.seq) || undone.contains(&round.seq) {
            continue;
        }
        let delta: BTreeSet<GenuineUpdate> =
            round.delta.get(machine).map(|v| v.iter().cloned().collect()).unwrap_or_default();
        let mut gamma: Vec<PartialUpdate> =
            round.gamma.get(machine).cloned().unwrap_or_default();
        gamma.sort();
        if delta.is_empty() && gamma.is_empty() {
            continue;
        }
        let reads = round.reads.get(machine).cloned().unwrap_or_default();
        let pc = round
            .events
            .iter()
            .find_map(|e| match e {
                Event::Fire { pcs, .. } => pcs.get(machine).copied(),
                _ => None,
            })
            .ok_or_else(|| {
                CheckError::MalformedTrace(format!(
                    "fire round {} lacks a pc for {machine}",
                    round.seq
                ))
            })?;
        rounds.push(ScheduleRound { step_seq: round.seq, pc, delta, gamma, reads });
    }
    Ok(CleansedSchedule { machine: machine.to_string(), rounds })
}

/// Committed machines ordered by the round of their commit event.
pub fn commit_order(trace: &Trace) -> Vec<String> {
    let mut commits: Vec<(u64, String)> = trace
        .events()
        .filter_map(|(seq, e)| match e {
            Event::Commit { machine } => Some((seq, machine.clone())),
            _ => None,
        })
        .collect();
    commits.sort();
    commits.into_iter().map(|(_, m)| m).collect()
}

/// Replay machines one at a time in the given order, each solo run starting
/// from the previous one's final store, same choice seed. Returns each
/// machine's (already cleansed) solo schedule and the final store.
pub fn serial_replay(
    workload: &Workload,
    order: &[String],
    seed: u64,
    subsumption: SubsumptionMode,
) -> Result<(BTreeMap<String, CleansedSchedule>, Store), CheckError> {
    let mut current = workload.init.clone();
    let mut schedules = BTreeMap::new();
    for machine in order {
        let mut solo = workload.restricted_to(machine).ok_or_else(|| CheckError::Replay {
            machine: machine.clone(),
            reason: "machine not in workload".to_string(),
        })?;
        solo.init = current;
        let cfg = SimConfig {
            seed,
            scheduler: SchedulerKind::RoundRobin,
            subsumption,
            max_rounds: None,
            stagger: false,
        };
        let result = run(&solo, "serial-replay", &cfg);
        if result.trace.footer.aborted.iter().any(|m| m == machine) {
            return Err(CheckError::Replay {
                machine: machine.clone(),
                reason: "solo-abort: the machine aborts even when run alone".to_string(),
            });
        }
        if result.trace.footer.outcome != Outcome::Complete {
            return Err(CheckError::Replay {
                machine: machine.clone(),
                reason: format!("solo run ended with {:?}", result.trace.footer.outcome),
            });
        }
        let schedule = cleanse(&result.trace, machine)?;
        schedules.insert(machine.clone(), schedule);
        current = result.final_store;
    }
    Ok((schedules, current))
}

/// The main verdict: the trace is serializable iff every committed machine's
/// cleansed schedule equals its schedule in the serial replay in commit
/// order. A solo abort during replay is itself a failed equivalence.
pub fn check_serializable(
    trace: &Trace,
    workload: &Workload,
    workload_text: &str,
) -> Result<Verdict, CheckError> {
    let expected_digest = workload_digest(workload_text);
    if trace.header.workload_digest != expected_digest {
        return Err(CheckError::DigestMismatch {
            expected: expected_digest,
            got: trace.header.workload_digest.clone(),
        });
    }
    let order = commit_order(trace);
    let subsumption = if trace.header.strict_subsumption {
        SubsumptionMode::Strict
    } else {
        SubsumptionMode::Safe
    };
    let replay = serial_replay(workload, &order, trace.header.seed, subsumption);
    let schedules = match replay {
        Ok((schedules, _)) => schedules,
        Err(CheckError::Replay { machine, reason }) if reason.starts_with("solo-abort") => {
            return Ok(Verdict {
                serializable: false,
                commit_order: order,
                divergence: Some(Divergence {
                    machine,
                    position: 0,
                    kind: "solo-abort".to_string(),
                    expected: None,
                    actual: None,
                }),
            });
        }
        Err(e) => return Err(e),
    };

    for machine in &order {
        let actual = cleanse(trace, machine)?;
        let expected = &schedules[machine];
        if let Some(divergence) = first_divergence(machine, expected, &actual) {
            return Ok(Verdict {
                serializable: false,
                commit_order: order,
                divergence: Some(divergence),
            });
        }
    }
    Ok(Verdict { serializable: true, commit_order: order, divergence: None })
}

fn first_divergence(
    machine: &str,
    expected: &CleansedSchedule,
    actual: &CleansedSchedule,
) -> Option<Divergence> {
    let len = expected.rounds.len().max(actual.rounds.len());
    for k in 0..len {
        let e = expected.rounds.get(k);
        let a = actual.rounds.get(k);
        let kind = match (e, a) {
            (Some(e), Some(a)) if e.equivalent(a) => continue,
            (Some(e), Some(a)) => {
                if e.delta != a.delta {
                    "delta"
                } else if e.gamma != a.gamma {
                    "gamma"
                } else if e.reads != a.reads {
                    "reads"
                } else {
                    "pc"
                }
            }
            (Some(_), None) => "missing-round",
            (None, Some(_)) => "extra-round",
            (None, None) => continue,
        };
        return Some(Divergence {
            machine: machine.to_string(),
            position: k,
            kind: kind.to_string(),
            expected: e.cloned(),
            actual: a.cloned(),
        });
    }
    None
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuditError {
    #[error("round {seq}: non-temp lock ({path}, {machine}, {mode}) released outside commit/undo/abort")]
    EarlyRelease { seq: u64, path: LocationPath, machine: String, mode: LockMode },
    #[error("round {seq}: temp lock ({path}, {machine}) released outside its fire or abort round")]
    TempOutsideFire { seq: u64, path: LocationPath, machine: String },
    #[error("temp lock ({path}, {machine}) acquired in round {acquired} never released")]
    TempLeaked { path: LocationPath, machine: String, acquired: u64 },
    #[error("complete run left locks in the table: {0:?}")]
    Leftover(Vec<(LocationPath, String, LockMode)>),
}

/// Audit the two-phase discipline from the trace's lock records alone.
pub fn audit_locks(trace: &Trace) -> Result<(), AuditError> {
    let mut held: BTreeMap<(LocationPath, String, LockMode), u64> = BTreeMap::new();
    for round in &trace.rounds {
        let releases_allowed: BTreeSet<&String> = round
            .events
            .iter()
            .filter_map(|e| match e {
                Event::Commit { machine } | Event::Abort { machine } => Some(machine),
                Event::Undo { machine, .. } => Some(machine),
                _ => None,
            })
            .collect();
        let fire_members: BTreeSet<&String> =
            round.fire_group().map(|g| g.iter().collect()).unwrap_or_default();
        let aborting: BTreeSet<&String> = round
            .events
            .iter()
            .filter_map(|e| match e {
                Event::Abort { machine } => Some(machine),
                _ => None,
            })
            .collect();
        for ctl in &round.ctl {
            let CtlUpdate::Lock { path, machine, mode, held: is_held } = ctl else { continue };
            let key = (path.clone(), machine.clone(), mode.clone());
            if *is_held {
                held.insert(key, round.seq);
            } else {
                held.remove(&key);
                if *mode == LockMode::Temp {
                    if !fire_members.contains(machine) && !aborting.contains(machine) {
                        return Err(AuditError::TempOutsideFire {
                            seq: round.seq,
                            path: path.clone(),
                            machine: machine.clone(),
                        });
                    }
                } else if !releases_allowed.contains(machine) {
                    // a Read released in the round that grants the same
                    // machine a Write on the same location is an upgrade,
                    // not a release of access
                    let upgrade = *mode == LockMode::Read
                        && round.ctl.iter().any(|c| {
                            matches!(c, CtlUpdate::Lock { path: p, machine: m, mode: LockMode::Write, held: true }
                                if p == path && m == machine)
                        });
                    if !upgrade {
                        return Err(AuditError::EarlyRelease {
                            seq: round.seq,
                            path: path.clone(),
                            machine: machine.clone(),
                            mode: mode.clone(),
                        });
                    }
                }
            }
        }
    }
    if let Some(((path, machine, _), acquired)) =
        held.iter().find(|((_, _, mode), _)| *mode == LockMode::Temp)
    {
        return Err(AuditError::TempLeaked {
            path: path.clone(),
            machine: machine.clone(),
            acquired: *acquired,
        });
    }
    if trace.footer.outcome == Outcome::Complete && !held.is_empty() {
        return Err(AuditError::Leftover(held.into_keys().collect()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::RunResult;
    use crate::ops::OperatorRegistry;
    use crate::store::StoreValue;

    fn parse(text: &str) -> Workload {
        Workload::parse(text, &OperatorRegistry::builtin()).unwrap()
    }

    fn run_text(text: &str, cfg: &SimConfig) -> RunResult {
        run(&parse(text), &workload_digest(text), cfg)
    }

    fn path(s: &str) -> LocationPath {
        LocationPath::parse(s).unwrap()
    }

    fn int(n: i64) -> StoreValue {
        StoreValue::Int(n)
    }

    const TRANSFER: &str = "\
init /acct/a = 10
init /acct/b = 0
machine m1
shared /acct/a /acct/b
step:
  read /acct/a
  write /acct/a := read(/acct/a) - 3
  write /acct/b := 3
machine m2
shared /acct/a /acct/b
step:
  read /acct/a
  read /acct/b
  write /acct/a := read(/acct/a) + read(/acct/b)
";

    #[test]
    fn clean_run_schedule_is_fire_rounds_verbatim() {
        let r = run_text(TRANSFER, &SimConfig::default());
        assert_eq!(r.trace.footer.outcome, Outcome::Complete);
        for m in ["m1", "m2"] {
            let s = cleanse(&r.trace, m).unwrap();
            assert_eq!(s.rounds.len(), 1, "{m} fired once");
        }
    }

    #[test]
    fn commit_order_by_round() {
        let r = run_text(TRANSFER, &SimConfig::default());
        let order = commit_order(&r.trace);
        assert_eq!(order.len(), 2);
        // no commits
        let none = run_text(
            "init /x = 0\nmachine m1\nstep:\n  write /x := 1\n  write /x := 2\n",
            &SimConfig::default(),
        );
        assert!(commit_order(&none.trace).is_empty());
        // aborted machines absent regardless of activity
        assert_eq!(none.trace.footer.aborted, vec!["m1".to_string()]);
    }

    #[test]
    fn serial_replay_empty_order() {
        let w = parse(TRANSFER);
        let (schedules, store) = serial_replay(&w, &[], 1, SubsumptionMode::Safe).unwrap();
        assert!(schedules.is_empty());
        assert_eq!(store, w.init);
    }

    #[test]
    fn serial_replay_chains_stores() {
        let w = parse(TRANSFER);
        let order = vec!["m1".to_string(), "m2".to_string()];
        let (schedules, store) = serial_replay(&w, &order, 1, SubsumptionMode::Safe).unwrap();
        // m2 sees m1's committed values: a = 7, then a := 7 + 3
        assert_eq!(store.eval(&path("/acct/a")).unwrap(), &int(10));
        assert_eq!(store.eval(&path("/acct/b")).unwrap(), &int(3));
        let m2 = &schedules["m2"];
        assert_eq!(m2.rounds[0].reads.get(&path("/acct/a")), Some(&int(7)));
    }

    #[test]
    fn theorem_holds_on_contended_run() {
        for seed in 0..20 {
            for scheduler in [SchedulerKind::RoundRobin, SchedulerKind::Random] {
                let cfg = SimConfig { seed, scheduler, ..SimConfig::default() };
                let r = run_text(TRANSFER, &cfg);
                if r.trace.footer.outcome != Outcome::Complete {
                    continue;
                }
                let verdict = check_serializable(&r.trace, &parse(TRANSFER), TRANSFER).unwrap();
                assert!(
                    verdict.serializable,
                    "seed {seed} {scheduler}: {:?}",
                    verdict.divergence
                );
            }
        }
    }

    #[test]
    fn forged_read_value_detected() {
        let r = run_text(TRANSFER, &SimConfig::default());
        let mut forged = r.trace.clone();
        // flip a read value in some fire round
        let round = forged
            .rounds
            .iter_mut()
            .find(|r| !r.reads.is_empty())
            .expect("a fire round with reads");
        let (_, reads) = round.reads.iter_mut().next().unwrap();
        let (loc, val) = reads.iter().next().map(|(l, v)| (l.clone(), v.clone())).unwrap();
        let forged_val = match val {
            StoreValue::Int(n) => StoreValue::Int(n + 100),
            other => other,
        };
        reads.insert(loc, forged_val);
        let verdict = check_serializable(&forged, &parse(TRANSFER), TRANSFER).unwrap();
        assert!(!verdict.serializable);
        let d = verdict.divergence.expect("divergence reported");
        assert_eq!(d.kind, "reads");
    }

    #[test]
    fn forged_delta_detected() {
        let r = run_text(TRANSFER, &SimConfig::default());
        let mut forged = r.trace.clone();
        let round = forged.rounds.iter_mut().find(|r| !r.delta.is_empty()).unwrap();
        let (_, delta) = round.delta.iter_mut().next().unwrap();
        delta[0].val = StoreValue::Int(999);
        let verdict = check_serializable(&forged, &parse(TRANSFER), TRANSFER).unwrap();
        assert!(!verdict.serializable);
        assert_eq!(verdict.divergence.unwrap().kind, "delta");
    }

    #[test]
    fn all_aborted_is_vacuously_serializable() {
        let text = "init /x = 0\nmachine m1\nstep:\n  write /x := 1\n  write /x := 2\n";
        let r = run_text(text, &SimConfig::default());
        let verdict = check_serializable(&r.trace, &parse(text), text).unwrap();
        assert!(verdict.serializable);
        assert!(verdict.commit_order.is_empty());
    }

    #[test]
    fn digest_mismatch_rejected() {
        let r = run_text(TRANSFER, &SimConfig::default());
        let other = "init /x = 0\nmachine m1\nstep:\n  write /x := 1\n";
        let err = check_serializable(&r.trace, &parse(other), other).unwrap_err();
        assert!(matches!(err, CheckError::DigestMismatch { .. }));
    }

    #[test]
    fn undo_without_fire_is_malformed() {
        let r = run_text(TRANSFER, &SimConfig::default());
        let mut forged = r.trace.clone();
        forged.rounds[0].events.push(Event::Undo {
            machine: "m1".to_string(),
            step_seq: 9999,
            restored: vec![],
        });
        assert!(matches!(cleanse(&forged, "m1"), Err(CheckError::MalformedTrace(_))));
    }

    const CROSS_LOCK: &str = "\
init /x = 0
init /y = 0
machine m1
shared /x /y
step:
  write /x := 1
step:
  write /y := 1
machine m2
shared /x /y
step:
  write /y := 2
step:
  write /x := 2
";

    #[test]
    fn deadlock_recovery_schedule_hand_computed() {
        // m2 is victimized and its first fire (y := 2) undone; the cleansed
        // schedule keeps only the refire and the second step
        let r = run_text(CROSS_LOCK, &SimConfig::default());
        assert_eq!(r.trace.footer.outcome, Outcome::Complete);
        let undone: Vec<&Event> = r
            .trace
            .events()
            .filter_map(|(_, e)| matches!(e, Event::Undo { .. }).then_some(e))
            .collect();
        assert_eq!(undone.len(), 1);
        let m2 = cleanse(&r.trace, "m2").unwrap();
        assert_eq!(m2.rounds.len(), 2);
        assert_eq!(
            m2.rounds[0].delta,
            [GenuineUpdate { loc: path("/y"), val: int(2) }].into_iter().collect()
        );
        assert_eq!(
            m2.rounds[1].delta,
            [GenuineUpdate { loc: path("/x"), val: int(2) }].into_iter().collect()
        );
        assert_eq!(m2.rounds[0].pc, 0);
        assert_eq!(m2.rounds[1].pc, 1);
        // the whole run is serializable
        let verdict = check_serializable(&r.trace, &parse(CROSS_LOCK), CROSS_LOCK).unwrap();
        assert!(verdict.serializable, "{:?}", verdict.divergence);
        // 2PL discipline holds
        audit_locks(&r.trace).unwrap();
    }

    #[test]
    fn audit_catches_forged_early_release() {
        let r = run_text(TRANSFER, &SimConfig::default());
        audit_locks(&r.trace).unwrap();
        let mut forged = r.trace.clone();
        // inject a release into a round with no commit/undo/abort event
        let grant_round = forged
            .rounds
            .iter_mut()
            .find(|r| r.events.iter().any(|e| matches!(e, Event::LockGranted { .. })))
            .unwrap();
        grant_round.ctl.push(CtlUpdate::Lock {
            path: path("/acct/a"),
            machine: "m1".to_string(),
            mode: LockMode::Write,
            held: false,
        });
        assert!(matches!(audit_locks(&forged), Err(AuditError::EarlyRelease { .. })));
    }

    mod cleansing_confluence {
        use super::*;
        use crate::ops::splitmix64;

        /// Rule-based iterative cleanser: delete one applicable item at a
        /// time, picking the next deletion in a seeded random order, until a
        /// fixpoint is reached.
        fn cleanse_iterative(trace: &Trace, machine: &str, order_seed: u64) -> Vec<u64> {
            if trace.footer.aborted.iter().any(|m| m == machine) {
                return Vec::new();
            }
            struct Item {
                seq: u64,
                empty: bool,
                undone: bool,
            }
            let undone: BTreeSet<u64> = trace
                .events()
                .filter_map(|(_, e)| match e {
                    Event::Undo { machine: m, step_seq, .. } if m == machine => Some(*step_seq),
                    _ => None,
                })
                .collect();
            let mut items: Vec<Item> = trace
                .rounds
                .iter()
                .map(|r| {
                    let in_fire = r.fire_group().is_some_and(|g| g.iter().any(|m| m == machine));
                    let has_updates = in_fire
                        && (r.delta.get(machine).is_some_and(|d| !d.is_empty())
                            || r.gamma.get(machine).is_some_and(|g| !g.is_empty()));
                    Item { seq: r.seq, empty: !has_updates, undone: undone.contains(&r.seq) }
                })
                .collect();
            let mut rng_state = order_seed;
            loop {
                let deletable: Vec<usize> = items
                    .iter()
                    .enumerate()
                    .filter(|(_, it)| it.empty || it.undone)
                    .map(|(i, _)| i)
                    .collect();
                if deletable.is_empty() {
                    break;
                }
                rng_state = splitmix64(rng_state);
                let pick = deletable[(rng_state % deletable.len() as u64) as usize];
                items.remove(pick);
            }
            items.into_iter().map(|it| it.seq).collect()
        }

        #[test]
        fn random_deletion_order_agrees_with_direct_cleanse() {
            let r = run_text(CROSS_LOCK, &SimConfig::default());
            for machine in ["m1", "m2"] {
                let direct: Vec<u64> = cleanse(&r.trace, machine)
                    .unwrap()
                    .rounds
                    .iter()
                    .map(|sr| sr.step_seq)
                    .collect();
                for order_seed in 0..50 {
                    let iterative = cleanse_iterative(&r.trace, machine, order_seed);
                    assert_eq!(iterative, direct, "machine {machine} seed {order_seed}");
                }
            }
        }
    }
}
