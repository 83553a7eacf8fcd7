//! Lock table and lock acquisition predicates.
//!
//! The table is the relation `Locked(l, M, o)` for `o` in {Read, Write, temp}
//! plus one mode per partial operator. `new_locks` computes the set a machine
//! must hold before its current step may fire: Read locks for shared or
//! monitored read locations, Write or operator locks for shared or output
//! write locations, and a temporary lock on every strict ancestor of each such
//! write location. `blocks` decides whether another machine's holdings stand
//! in the way of a single requested lock; refusal of a request set is
//! all-or-nothing.
//!
//! Subsumption handling in `blocks` has two modes. Both block a request when
//! the other machine holds any lock on a strict ancestor of the requested
//! location. Safe mode (the default) additionally blocks write-intent requests
//! when the other machine holds locks *below* the requested location, which
//! closes the race between writing an ancestor and reading or writing one of
//! its descendants; temp requests are exempt so that machines updating
//! disjoint descendants of a common ancestor can still interleave.

use std::collections::{BTreeMap, BTreeSet};

use crate::ops::{LockMode, OperatorRegistry};
use crate::store::{Classification, LocationPath};
use crate::workload::Step;

/// Which subsumption checks `blocks` applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsumptionMode {
    /// Ancestor and descendant checks.
    Safe,
    /// Ancestor check only.
    Strict,
}

/// The lock relation. Owned by the single-threaded executor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LockTable {
    entries: BTreeMap<LocationPath, BTreeMap<String, BTreeSet<LockMode>>>,
}

impl LockTable {
    pub fn new() -> LockTable {
        LockTable::default()
    }

    pub fn holds(&self, loc: &LocationPath, machine: &str, mode: &LockMode) -> bool {
        self.entries
            .get(loc)
            .and_then(|h| h.get(machine))
            .is_some_and(|modes| modes.contains(mode))
    }

    pub fn holds_read_or_write(&self, loc: &LocationPath, machine: &str) -> bool {
        self.holds(loc, machine, &LockMode::Read) || self.holds(loc, machine, &LockMode::Write)
    }

    /// Install a lock. A Write absorbs the holder's Read on the same location
    /// and a Read is not recorded alongside an existing Write, so no machine
    /// ever holds both. Returns true if the table changed.
    pub fn install(&mut self, loc: &LocationPath, machine: &str, mode: LockMode) -> bool {
        if mode == LockMode::Read && self.holds(loc, machine, &LockMode::Write) {
            return false;
        }
        let modes = self
            .entries
            .entry(loc.clone())
            .or_default()
            .entry(machine.to_string())
            .or_default();
        if mode == LockMode::Write {
            modes.remove(&LockMode::Read);
        }
        modes.insert(mode)
    }

    /// Remove a lock if present. Idempotent.
    pub fn remove(&mut self, loc: &LocationPath, machine: &str, mode: &LockMode) -> bool {
        let Some(holders) = self.entries.get_mut(loc) else { return false };
        let Some(modes) = holders.get_mut(machine) else { return false };
        let removed = modes.remove(mode);
        if modes.is_empty() {
            holders.remove(machine);
        }
        if holders.is_empty() {
            self.entries.remove(loc);
        }
        removed
    }

    /// All (location, mode) pairs held by a machine.
    pub fn held_by(&self, machine: &str) -> Vec<(LocationPath, LockMode)> {
        let mut out = Vec::new();
        for (loc, holders) in &self.entries {
            if let Some(modes) = holders.get(machine) {
                for m in modes {
                    out.push((loc.clone(), m.clone()));
                }
            }
        }
        out
    }

    /// Temp entries held by a machine.
    pub fn temps_of(&self, machine: &str) -> Vec<LocationPath> {
        self.entries
            .iter()
            .filter(|(_, holders)| {
                holders.get(machine).is_some_and(|m| m.contains(&LockMode::Temp))
            })
            .map(|(loc, _)| loc.clone())
            .collect()
    }

    /// Locks held by `machine` on exactly `loc`.
    pub fn modes_of(&self, loc: &LocationPath, machine: &str) -> BTreeSet<LockMode> {
        self.entries
            .get(loc)
            .and_then(|h| h.get(machine))
            .cloned()
            .unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LocationPath, &str, &LockMode)> + '_ {
        self.entries.iter().flat_map(|(loc, holders)| {
            holders
                .iter()
                .flat_map(move |(m, modes)| modes.iter().map(move |mode| (loc, m.as_str(), mode)))
        })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every pair of entries on one location held by distinct machines must be
    /// admitted by the compatibility matrix. Grants maintain this; exposed so
    /// tests and audits can re-check it.
    pub fn consistent(&self, registry: &OperatorRegistry) -> bool {
        for holders in self.entries.values() {
            let flat: Vec<(&str, &LockMode)> = holders
                .iter()
                .flat_map(|(m, modes)| modes.iter().map(move |mode| (m.as_str(), mode)))
                .collect();
            for i in 0..flat.len() {
                for j in (i + 1)..flat.len() {
                    if flat[i].0 != flat[j].0 && !registry.compatible_modes(flat[i].1, flat[j].1) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// The locks a machine still needs before its current step can fire. Purely
/// syntactic in the step (read/write locations are fixed per step) and the
/// machine's current holdings.
pub fn new_locks(
    machine: &str,
    step: &Step,
    classification: &Classification,
    table: &LockTable,
) -> BTreeSet<(LocationPath, LockMode)> {
    let mut needed: BTreeSet<(LocationPath, LockMode)> = BTreeSet::new();

    let w_loc: BTreeSet<LocationPath> = step
        .write_locs()
        .into_iter()
        .filter(|l| classification.writable_needs_lock(l))
        .collect();
    let genuine = step.genuine_write_locs();
    let partial_ops = step.partial_ops();

    for l in step.read_locs() {
        if classification.readable_needs_lock(&l) && !table.holds_read_or_write(&l, machine) {
            needed.insert((l, LockMode::Read));
        }
    }
    for l in &w_loc {
        if genuine.contains(l) && !table.holds(l, machine, &LockMode::Write) {
            needed.insert((l.clone(), LockMode::Write));
        }
        if let Some(ops) = partial_ops.get(l) {
            for op in ops {
                let mode = LockMode::Op(op.clone());
                if !table.holds(l, machine, &mode) {
                    needed.insert((l.clone(), mode));
                }
            }
        }
        for ancestor in l.ancestors() {
            needed.insert((ancestor, LockMode::Temp));
        }
    }

    // a Write request absorbs a Read request on the same location
    let absorbed: Vec<LocationPath> = needed
        .iter()
        .filter(|(l, m)| *m == LockMode::Read && needed.contains(&(l.clone(), LockMode::Write)))
        .map(|(l, _)| l.clone())
        .collect();
    for l in absorbed {
        needed.remove(&(l, LockMode::Read));
    }
    needed
}

/// Whether a descendant holding of mode `held` stands in the way of a request
/// of mode `req` on an ancestor (safe mode only). Write-intent requests
/// conflict with any real lock below; reads conflict with write-intent locks
/// below; temp requests never conflict downward, and temp holdings never
/// block, so machines writing disjoint records of one page can interleave.
fn descendant_blocks(req: &LockMode, held: &LockMode) -> bool {
    match req {
        LockMode::Write | LockMode::Op(_) => *held != LockMode::Temp,
        LockMode::Read => matches!(held, LockMode::Write | LockMode::Op(_)),
        LockMode::Temp => false,
    }
}

/// Does machine `n` block the request `(loc, mode)`?
pub fn blocks(
    table: &LockTable,
    n: &str,
    loc: &LocationPath,
    mode: &LockMode,
    registry: &OperatorRegistry,
    subsumption: SubsumptionMode,
) -> bool {
    for (held_loc, holder, held_mode) in table.iter() {
        if holder != n {
            continue;
        }
        if held_loc == loc && !registry.compatible_modes(mode, held_mode) {
            return true;
        }
        if held_loc.subsumes(loc) {
            return true;
        }
        if subsumption == SubsumptionMode::Safe
            && loc.subsumes(held_loc)
            && descendant_blocks(mode, held_mode)
        {
            return true;
        }
    }
    false
}

/// `CannotBeGranted`: some requested lock is blocked by some other machine in
/// the transaction set.
pub fn cannot_be_granted(
    table: &LockTable,
    machine: &str,
    requested: &BTreeSet<(LocationPath, LockMode)>,
    trans_act: &BTreeSet<String>,
    registry: &OperatorRegistry,
    subsumption: SubsumptionMode,
) -> bool {
    requested.iter().any(|(loc, mode)| {
        trans_act
            .iter()
            .filter(|n| n.as_str() != machine)
            .any(|n| blocks(table, n, loc, mode, registry, subsumption))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{Action, Expr};
    use crate::store::StoreValue;

    fn path(s: &str) -> LocationPath {
        LocationPath::parse(s).unwrap()
    }

    fn reg() -> OperatorRegistry {
        OperatorRegistry::builtin()
    }

    fn shared_all() -> Classification {
        let mut c = Classification::default();
        c.shared.insert(path("/p"));
        c.shared.insert(path("/x"));
        c.shared.insert(path("/y"));
        c
    }

    fn write_step(target: &str) -> Step {
        Step {
            reads: vec![],
            actions: vec![Action::Write {
                loc: path(target),
                expr: Expr::Lit(StoreValue::Int(1)),
            }],
        }
    }

    fn partial_step(target: &str, op: &str) -> Step {
        Step {
            reads: vec![],
            actions: vec![Action::Partial {
                loc: path(target),
                op: op.to_string(),
                expr: Expr::Lit(StoreValue::Int(1)),
            }],
        }
    }

    fn read_step(target: &str) -> Step {
        Step { reads: vec![path(target)], actions: vec![] }
    }

    #[test]
    fn new_locks_nested_write_needs_temp() {
        let t = LockTable::new();
        let got = new_locks("m1", &write_step("/p/r"), &shared_all(), &t);
        let want: BTreeSet<_> =
            [(path("/p/r"), LockMode::Write), (path("/p"), LockMode::Temp)].into_iter().collect();
        assert_eq!(got, want);
    }

    #[test]
    fn new_locks_skips_already_held() {
        let mut t = LockTable::new();
        t.install(&path("/x"), "m1", LockMode::Write);
        // read of a write-locked location needs nothing
        assert!(new_locks("m1", &read_step("/x"), &shared_all(), &t).is_empty());
        // partial with the op lock already held needs nothing for /x
        t.install(&path("/x"), "m1", LockMode::Op("add".to_string()));
        assert!(new_locks("m1", &partial_step("/x", "add"), &shared_all(), &t).is_empty());
    }

    #[test]
    fn new_locks_private_locations_free() {
        let t = LockTable::new();
        let c = Classification::default(); // nothing declared: all private
        assert!(new_locks("m1", &write_step("/p/r"), &c, &t).is_empty());
    }

    #[test]
    fn new_locks_write_absorbs_read_request() {
        let t = LockTable::new();
        let step = Step {
            reads: vec![path("/x")],
            actions: vec![Action::Write { loc: path("/x"), expr: Expr::Lit(StoreValue::Int(1)) }],
        };
        let got = new_locks("m1", &step, &shared_all(), &t);
        assert_eq!(got, [(path("/x"), LockMode::Write)].into_iter().collect());
    }

    #[test]
    fn blocks_direct_incompatibility() {
        let mut t = LockTable::new();
        t.install(&path("/x"), "n", LockMode::Write);
        assert!(blocks(&t, "n", &path("/x"), &LockMode::Read, &reg(), SubsumptionMode::Strict));
    }

    #[test]
    fn blocks_ancestor_lock_any_mode() {
        let mut t = LockTable::new();
        t.install(&path("/p"), "n", LockMode::Read);
        assert!(blocks(&t, "n", &path("/p/r"), &LockMode::Write, &reg(), SubsumptionMode::Strict));
    }

    #[test]
    fn compatible_op_locks_do_not_block() {
        let mut t = LockTable::new();
        t.install(&path("/x"), "n", LockMode::Op("add".to_string()));
        assert!(!blocks(
            &t,
            "n",
            &path("/x"),
            &LockMode::Op("add".to_string()),
            &reg(),
            SubsumptionMode::Safe
        ));
    }

    #[test]
    fn safe_strict_divergence_on_descendant_read() {
        // N holds Read on /p/r; request (/p, Write)
        let mut t = LockTable::new();
        t.install(&path("/p/r"), "n", LockMode::Read);
        assert!(blocks(&t, "n", &path("/p"), &LockMode::Write, &reg(), SubsumptionMode::Safe));
        assert!(!blocks(&t, "n", &path("/p"), &LockMode::Write, &reg(), SubsumptionMode::Strict));
    }

    #[test]
    fn safe_mode_temp_request_not_blocked_by_sibling_writer() {
        // N writes one record of the page; a temp request on the page by
        // another machine must still be grantable
        let mut t = LockTable::new();
        t.install(&path("/p/r1"), "n", LockMode::Write);
        assert!(!blocks(&t, "n", &path("/p"), &LockMode::Temp, &reg(), SubsumptionMode::Safe));
        // but a genuine Write of the whole page is blocked
        assert!(blocks(&t, "n", &path("/p"), &LockMode::Write, &reg(), SubsumptionMode::Safe));
        // and a Read of the whole page is blocked too
        assert!(blocks(&t, "n", &path("/p"), &LockMode::Read, &reg(), SubsumptionMode::Safe));
    }

    #[test]
    fn safe_mode_read_not_blocked_by_descendant_read() {
        let mut t = LockTable::new();
        t.install(&path("/p/r"), "n", LockMode::Read);
        assert!(!blocks(&t, "n", &path("/p"), &LockMode::Read, &reg(), SubsumptionMode::Safe));
    }

    #[test]
    fn all_or_nothing_refusal_predicate() {
        let mut t = LockTable::new();
        t.install(&path("/x"), "n", LockMode::Read);
        let trans_act: BTreeSet<String> = ["m".to_string(), "n".to_string()].into_iter().collect();
        let req: BTreeSet<_> =
            [(path("/y"), LockMode::Read), (path("/x"), LockMode::Write)].into_iter().collect();
        assert!(cannot_be_granted(&t, "m", &req, &trans_act, &reg(), SubsumptionMode::Safe));
        let ok: BTreeSet<_> = [(path("/y"), LockMode::Read)].into_iter().collect();
        assert!(!cannot_be_granted(&t, "m", &ok, &trans_act, &reg(), SubsumptionMode::Safe));
    }

    #[test]
    fn write_absorbs_read_in_table() {
        let mut t = LockTable::new();
        t.install(&path("/x"), "m", LockMode::Read);
        t.install(&path("/x"), "m", LockMode::Write);
        assert!(!t.holds(&path("/x"), "m", &LockMode::Read));
        assert!(t.holds(&path("/x"), "m", &LockMode::Write));
        // and installing Read after Write is a no-op
        t.install(&path("/x"), "m", LockMode::Read);
        assert!(!t.holds(&path("/x"), "m", &LockMode::Read));
    }

    #[test]
    fn release_is_idempotent_and_scoped() {
        let mut t = LockTable::new();
        t.install(&path("/p"), "m", LockMode::Temp);
        t.install(&path("/p/r"), "m", LockMode::Write);
        t.install(&path("/p"), "n", LockMode::Temp);
        // release m's temps only
        for loc in t.temps_of("m") {
            t.remove(&loc, "m", &LockMode::Temp);
        }
        assert!(!t.holds(&path("/p"), "m", &LockMode::Temp));
        assert!(t.holds(&path("/p"), "n", &LockMode::Temp));
        assert!(t.holds(&path("/p/r"), "m", &LockMode::Write));
        // removing again is a no-op
        assert!(!t.remove(&path("/p"), "m", &LockMode::Temp));
    }

    #[test]
    fn release_all_for_machine() {
        let mut t = LockTable::new();
        t.install(&path("/x"), "m", LockMode::Write);
        t.install(&path("/y"), "m", LockMode::Read);
        t.install(&path("/p"), "m", LockMode::Op("add".to_string()));
        t.install(&path("/x"), "n", LockMode::Read);
        t.install(&path("/y"), "n", LockMode::Read);
        for (loc, mode) in t.held_by("m") {
            t.remove(&loc, "m", &mode);
        }
        assert!(t.held_by("m").is_empty());
        assert_eq!(t.held_by("n").len(), 2);
        // idempotent
        for (loc, mode) in t.held_by("m") {
            t.remove(&loc, "m", &mode);
        }
        assert!(t.held_by("m").is_empty());
    }
}
