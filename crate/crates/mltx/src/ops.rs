//! Partial-update operators, lock modes, and update aggregation.
//!
//! A partial update `(l, op, v)` contributes `op(current, v)` to location `l`;
//! several compatible partials to one location fold into a single genuine
//! update. Every user-requestable operator carries an inverse pair so a fired
//! partial can be undone against the *current* value, independently of other
//! machines' compatible partials on the same location:
//! `inverse(op, v) = (op', v')` with `op'(op(w, v), v') = w` for all `w`.
//!
//! Built-ins: `add` and `xor` on wrapping i64 (each self-compatible), `mul`
//! with arguments restricted to -1 or 1 (self-inverse, self-compatible),
//! `append` on strings (not self-compatible; inverse is `chop`), and `chop`
//! itself, which only ever appears as an inverse.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, SeqAccess, Visitor};
use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::store::{LocationPath, Store, StoreValue};

/// Lock modes: shared read, exclusive write, per-step temporary locks on
/// subsuming locations, and one mode per registered partial operator.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LockMode {
    Read,
    Write,
    Temp,
    Op(String),
}

impl fmt::Display for LockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LockMode::Read => f.write_str("read"),
            LockMode::Write => f.write_str("write"),
            LockMode::Temp => f.write_str("temp"),
            LockMode::Op(name) => f.write_str(name),
        }
    }
}

impl fmt::Debug for LockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl LockMode {
    pub fn parse(s: &str) -> LockMode {
        match s {
            "read" => LockMode::Read,
            "write" => LockMode::Write,
            "temp" => LockMode::Temp,
            other => LockMode::Op(other.to_string()),
        }
    }
}

impl Serialize for LockMode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LockMode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Ok(LockMode::parse(&String::deserialize(deserializer)?))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OpError {
    #[error("unknown operator {0:?}")]
    UnknownOperator(String),
    #[error("operator {op}: expected {expected} value, got {got}")]
    CarrierMismatch {
        op: &'static str,
        expected: &'static str,
        got: &'static str,
    },
    #[error("operator {op}: invalid argument {arg}")]
    InvalidArgument { op: &'static str, arg: StoreValue },
    #[error("operator {0} has no inverse")]
    NotInvertible(&'static str),
}

fn as_int(op: &'static str, v: &StoreValue) -> Result<i64, OpError> {
    match v {
        StoreValue::Int(n) => Ok(*n),
        other => Err(OpError::CarrierMismatch {
            op,
            expected: "int",
            got: other.type_name(),
        }),
    }
}

fn as_str<'a>(op: &'static str, v: &'a StoreValue) -> Result<&'a str, OpError> {
    match v {
        StoreValue::Str(s) => Ok(s),
        other => Err(OpError::CarrierMismatch {
            op,
            expected: "string",
            got: other.type_name(),
        }),
    }
}

/// Definition of one partial-update operator.
pub struct OperatorDef {
    pub name: &'static str,
    apply: fn(&StoreValue, &StoreValue) -> Result<StoreValue, OpError>,
    inverse: Option<fn(&StoreValue) -> Result<(&'static str, StoreValue), OpError>>,
    compatible_with: &'static [&'static str],
    /// Operators generated only as inverses may not appear in workloads.
    pub user_requestable: bool,
}

fn apply_add(w: &StoreValue, v: &StoreValue) -> Result<StoreValue, OpError> {
    Ok(StoreValue::Int(as_int("add", w)?.wrapping_add(as_int("add", v)?)))
}

fn inv_add(v: &StoreValue) -> Result<(&'static str, StoreValue), OpError> {
    Ok(("add", StoreValue::Int(as_int("add", v)?.wrapping_neg())))
}

fn apply_xor(w: &StoreValue, v: &StoreValue) -> Result<StoreValue, OpError> {
    Ok(StoreValue::Int(as_int("xor", w)? ^ as_int("xor", v)?))
}

fn inv_xor(v: &StoreValue) -> Result<(&'static str, StoreValue), OpError> {
    as_int("xor", v)?;
    Ok(("xor", v.clone()))
}

fn apply_mul(w: &StoreValue, v: &StoreValue) -> Result<StoreValue, OpError> {
    let f = as_int("mul", v)?;
    if f != 1 && f != -1 {
        return Err(OpError::InvalidArgument { op: "mul", arg: v.clone() });
    }
    Ok(StoreValue::Int(as_int("mul", w)?.wrapping_mul(f)))
}

fn inv_mul(v: &StoreValue) -> Result<(&'static str, StoreValue), OpError> {
    let f = as_int("mul", v)?;
    if f != 1 && f != -1 {
        return Err(OpError::InvalidArgument { op: "mul", arg: v.clone() });
    }
    Ok(("mul", v.clone()))
}

fn apply_append(w: &StoreValue, v: &StoreValue) -> Result<StoreValue, OpError> {
    let mut s = as_str("append", w)?.to_string();
    s.push_str(as_str("append", v)?);
    Ok(StoreValue::Str(s))
}

fn inv_append(v: &StoreValue) -> Result<(&'static str, StoreValue), OpError> {
    let n = as_str("append", v)?.chars().count();
    Ok(("chop", StoreValue::Int(n as i64)))
}

fn apply_chop(w: &StoreValue, v: &StoreValue) -> Result<StoreValue, OpError> {
    let s = as_str("chop", w)?;
    let k = as_int("chop", v)?;
    if k < 0 {
        return Err(OpError::InvalidArgument { op: "chop", arg: v.clone() });
    }
    let total = s.chars().count();
    let keep = total.saturating_sub(k as usize);
    Ok(StoreValue::Str(s.chars().take(keep).collect()))
}

/// Immutable registry of the built-in operators: the set `Opn` whose names may
/// appear as lock modes and in workload `partial` instructions.
pub struct OperatorRegistry {
    ops: BTreeMap<&'static str, OperatorDef>,
}

impl OperatorRegistry {
    pub fn builtin() -> OperatorRegistry {
        let defs = [
            OperatorDef {
                name: "add",
                apply: apply_add,
                inverse: Some(inv_add),
                compatible_with: &["add"],
                user_requestable: true,
            },
            OperatorDef {
                name: "xor",
                apply: apply_xor,
                inverse: Some(inv_xor),
                compatible_with: &["xor"],
                user_requestable: true,
            },
            OperatorDef {
                name: "mul",
                apply: apply_mul,
                inverse: Some(inv_mul),
                compatible_with: &["mul"],
                user_requestable: true,
            },
            OperatorDef {
                name: "append",
                apply: apply_append,
                inverse: Some(inv_append),
                compatible_with: &[],
                user_requestable: true,
            },
            OperatorDef {
                name: "chop",
                apply: apply_chop,
                inverse: None,
                compatible_with: &[],
                user_requestable: false,
            },
        ];
        let registry = OperatorRegistry {
            ops: defs.into_iter().map(|d| (d.name, d)).collect(),
        };
        registry.validate(64);
        registry
    }

    /// Randomized sanity check of the declared compatibilities: for every
    /// declared-compatible pair, both application orders must agree on random
    /// carrier values. Panics on a registry defect.
    fn validate(&self, samples: u64) {
        for (name, def) in &self.ops {
            for other in def.compatible_with {
                let other_def = self.ops.get(other).expect("compatible_with names registered ops");
                assert!(
                    other_def.compatible_with.contains(name),
                    "compatibility of {name} and {other} must be declared symmetrically"
                );
                for i in 0..samples {
                    let w = sample_value(name, splitmix64(i.wrapping_mul(3) ^ 0x9e37));
                    let v1 = sample_arg(name, splitmix64(i.wrapping_mul(5) ^ 0x79b9));
                    let v2 = sample_arg(other, splitmix64(i.wrapping_mul(7) ^ 0x1234));
                    let ab = (other_def.apply)(&(def.apply)(&w, &v1).unwrap(), &v2).unwrap();
                    let ba = (def.apply)(&(other_def.apply)(&w, &v2).unwrap(), &v1).unwrap();
                    assert_eq!(
                        ab, ba,
                        "operators {name} and {other} declared compatible but do not commute"
                    );
                }
            }
        }
    }

    fn def(&self, op: &str) -> Result<&OperatorDef, OpError> {
        self.ops.get(op).ok_or_else(|| OpError::UnknownOperator(op.to_string()))
    }

    pub fn is_registered(&self, op: &str) -> bool {
        self.ops.contains_key(op)
    }

    pub fn is_user_op(&self, op: &str) -> bool {
        self.ops.get(op).is_some_and(|d| d.user_requestable)
    }

    /// Names of operators a workload may request.
    pub fn user_ops(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.ops.values().filter(|d| d.user_requestable).map(|d| d.name)
    }

    /// Names of operators with an inverse (the recoverable ones).
    pub fn invertible_ops(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.ops.values().filter(|d| d.inverse.is_some()).map(|d| d.name)
    }

    pub fn apply(&self, op: &str, w: &StoreValue, v: &StoreValue) -> Result<StoreValue, OpError> {
        (self.def(op)?.apply)(w, v)
    }

    /// The inverse pair for `(op, v)`: satisfies `apply(op', apply(op, w, v), v') == w`
    /// for every carrier value `w`.
    pub fn inverse(&self, op: &str, v: &StoreValue) -> Result<(String, StoreValue), OpError> {
        let def = self.def(op)?;
        let f = def.inverse.ok_or(OpError::NotInvertible(def.name))?;
        let (name, arg) = f(v)?;
        Ok((name.to_string(), arg))
    }

    /// Declared operator compatibility: order-independence on every value.
    pub fn compatible_ops(&self, o1: &str, o2: &str) -> bool {
        self.ops
            .get(o1)
            .is_some_and(|d| d.compatible_with.contains(&o2))
    }

    /// The lock compatibility matrix. Symmetric. Write conflicts with
    /// everything; Read coexists only with Read; temp coexists with temp and
    /// with operator locks; two operator locks coexist iff the operators are
    /// declared compatible.
    pub fn compatible_modes(&self, a: &LockMode, b: &LockMode) -> bool {
        use LockMode::*;
        match (a, b) {
            (Write, _) | (_, Write) => false,
            (Read, Read) => true,
            (Read, _) | (_, Read) => false,
            (Temp, _) | (_, Temp) => true,
            (Op(o1), Op(o2)) => self.compatible_ops(o1, o2),
        }
    }

    /// True iff every pair of operators in the multiset is declared mutually
    /// compatible (singletons trivially are).
    pub fn multiset_compatible<'a, I>(&self, ops: I) -> bool
    where
        I: IntoIterator<Item = &'a str> + Clone,
    {
        let names: Vec<&str> = ops.into_iter().collect();
        for i in 0..names.len() {
            for j in (i + 1)..names.len() {
                if !self.compatible_ops(names[i], names[j]) {
                    return false;
                }
            }
        }
        true
    }
}

/// splitmix64; the standard 64-bit finalizer-based generator.
pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn sample_value(op: &str, bits: u64) -> StoreValue {
    match op {
        "append" | "chop" => {
            let len = (bits % 7) as usize;
            StoreValue::Str((0..len).map(|i| (b'a' + ((bits >> i) % 26) as u8) as char).collect())
        }
        _ => StoreValue::Int(bits as i64),
    }
}

fn sample_arg(op: &str, bits: u64) -> StoreValue {
    match op {
        "mul" => StoreValue::Int(if bits % 2 == 0 { 1 } else { -1 }),
        "chop" => StoreValue::Int((bits % 5) as i64),
        _ => sample_value(op, bits),
    }
}

/// Genuine update: total replacement of a location's value.
///
/// Trace encoding is the tuple `["genuine", path, value]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct GenuineUpdate {
    pub loc: LocationPath,
    pub val: StoreValue,
}

impl Serialize for GenuineUpdate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(3))?;
        seq.serialize_element("genuine")?;
        seq.serialize_element(&self.loc)?;
        seq.serialize_element(&self.val)?;
        seq.end()
    }
}

impl<'de> Deserialize<'de> for GenuineUpdate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = GenuineUpdate;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("[\"genuine\", path, value]")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<GenuineUpdate, A::Error> {
                let tag: String = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::custom("missing tag"))?;
                if tag != "genuine" {
                    return Err(de::Error::custom(format!("expected \"genuine\", got {tag:?}")));
                }
                let loc = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::custom("missing path"))?;
                let val = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::custom("missing value"))?;
                Ok(GenuineUpdate { loc, val })
            }
        }
        deserializer.deserialize_seq(V)
    }
}

/// Partial update: a contribution `(l, op, v)`.
///
/// Trace encoding is the tuple `["partial", path, op, arg]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PartialUpdate {
    pub loc: LocationPath,
    pub op: String,
    pub arg: StoreValue,
}

impl Serialize for PartialUpdate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(4))?;
        seq.serialize_element("partial")?;
        seq.serialize_element(&self.loc)?;
        seq.serialize_element(&self.op)?;
        seq.serialize_element(&self.arg)?;
        seq.end()
    }
}

impl<'de> Deserialize<'de> for PartialUpdate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = PartialUpdate;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("[\"partial\", path, op, arg]")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<PartialUpdate, A::Error> {
                let tag: String = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::custom("missing tag"))?;
                if tag != "partial" {
                    return Err(de::Error::custom(format!("expected \"partial\", got {tag:?}")));
                }
                let loc = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::custom("missing path"))?;
                let op = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::custom("missing op"))?;
                let arg = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::custom("missing arg"))?;
                Ok(PartialUpdate { loc, op, arg })
            }
        }
        deserializer.deserialize_seq(V)
    }
}

/// Result of aggregating one step's genuine and partial updates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AggregatedUpdateSet {
    /// Plain genuine update set, one value per location, no two locations
    /// related by subsumption.
    Consistent(BTreeMap<LocationPath, StoreValue>),
    Inconsistent(String),
}

impl AggregatedUpdateSet {
    pub fn is_consistent(&self) -> bool {
        matches!(self, AggregatedUpdateSet::Consistent(_))
    }
}

/// Fold all genuine and partial updates into a single consistent genuine
/// update set against `store`, or report why that is impossible.
///
/// Inconsistencies (never errors): two genuine updates with different values
/// at one location; genuine and partial updates mixed on one location; an
/// operator-incompatible partial multiset at one location; an operator or
/// lookup failure while folding; two result locations related by subsumption.
pub fn aggregate<'a, G, P>(
    store: &Store,
    genuine: G,
    partial: P,
    registry: &OperatorRegistry,
) -> AggregatedUpdateSet
where
    G: IntoIterator<Item = &'a GenuineUpdate>,
    P: IntoIterator<Item = &'a PartialUpdate>,
{
    use AggregatedUpdateSet::Inconsistent;

    let mut result: BTreeMap<LocationPath, StoreValue> = BTreeMap::new();
    let mut genuine_locs: Vec<LocationPath> = Vec::new();
    for upd in genuine {
        match result.get(&upd.loc) {
            Some(existing) if *existing != upd.val => {
                return Inconsistent(format!(
                    "conflicting genuine updates at {}: {} vs {}",
                    upd.loc, existing, upd.val
                ));
            }
            Some(_) => {}
            None => {
                result.insert(upd.loc.clone(), upd.val.clone());
                genuine_locs.push(upd.loc.clone());
            }
        }
    }

    let mut by_loc: BTreeMap<LocationPath, Vec<&PartialUpdate>> = BTreeMap::new();
    for upd in partial {
        by_loc.entry(upd.loc.clone()).or_default().push(upd);
    }

    for (loc, upds) in by_loc {
        if result.contains_key(&loc) {
            return Inconsistent(format!("genuine and partial updates mixed at {loc}"));
        }
        if !registry.multiset_compatible(upds.iter().map(|u| u.op.as_str())) {
            return Inconsistent(format!("incompatible partial operators at {loc}"));
        }
        let mut value = match store.eval(&loc) {
            Ok(v) => v.clone(),
            Err(e) => return Inconsistent(e.to_string()),
        };
        for upd in upds {
            value = match registry.apply(&upd.op, &value, &upd.arg) {
                Ok(v) => v,
                Err(e) => return Inconsistent(e.to_string()),
            };
        }
        result.insert(loc, value);
    }

    let locs: Vec<&LocationPath> = result.keys().collect();
    for i in 0..locs.len() {
        for j in (i + 1)..locs.len() {
            if locs[i].subsumes(locs[j]) || locs[j].subsumes(locs[i]) {
                return Inconsistent(format!(
                    "update locations {} and {} overlap",
                    locs[i], locs[j]
                ));
            }
        }
    }

    AggregatedUpdateSet::Consistent(result)
}
