//! Hierarchical value store with path-addressed locations.
//!
//! Values form finite trees: scalars (integers, strings, booleans) at the
//! leaves and named children at interior nodes. A location is a `/`-separated
//! path into the tree; the value of an interior location is the whole subtree,
//! so an ancestor's value determines every descendant's value by construction.
//! That containment is the subsumption relation the lock manager builds on:
//! `l1` subsumes `l2` exactly when `l1` is a strict path prefix of `l2`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// A location in the store: a non-empty sequence of identifier segments.
///
/// Text form is `/seg1/seg2/...`; each segment matches `[A-Za-z0-9_]+`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LocationPath {
    segments: Vec<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PathError {
    #[error("path must start with '/': {0:?}")]
    MissingSlash(String),
    #[error("path has an empty or invalid segment: {0:?}")]
    BadSegment(String),
    #[error("path must have at least one segment")]
    Empty,
}

fn valid_segment(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

impl LocationPath {
    pub fn parse(text: &str) -> Result<Self, PathError> {
        let Some(rest) = text.strip_prefix('/') else {
            return Err(PathError::MissingSlash(text.to_string()));
        };
        if rest.is_empty() {
            return Err(PathError::Empty);
        }
        let segments: Vec<String> = rest.split('/').map(str::to_string).collect();
        if segments.iter().any(|s| !valid_segment(s)) {
            return Err(PathError::BadSegment(text.to_string()));
        }
        Ok(LocationPath { segments })
    }

    pub fn from_segments(segments: Vec<String>) -> Result<Self, PathError> {
        if segments.is_empty() {
            return Err(PathError::Empty);
        }
        if segments.iter().any(|s| !valid_segment(s)) {
            return Err(PathError::BadSegment(segments.join("/")));
        }
        Ok(LocationPath { segments })
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    /// Child path with one more segment appended.
    pub fn child(&self, segment: &str) -> LocationPath {
        let mut segments = self.segments.clone();
        segments.push(segment.to_string());
        LocationPath { segments }
    }

    /// True iff `self` is a strict prefix of `other`. Irreflexive by design:
    /// an ancestor's value determines a descendant's, never a location its own.
    pub fn subsumes(&self, other: &LocationPath) -> bool {
        self.segments.len() < other.segments.len()
            && other.segments[..self.segments.len()] == self.segments[..]
    }

    /// Equal or related by subsumption in either direction.
    pub fn overlaps(&self, other: &LocationPath) -> bool {
        self == other || self.subsumes(other) || other.subsumes(self)
    }

    /// Strict ancestors, shortest first.
    pub fn ancestors(&self) -> impl Iterator<Item = LocationPath> + '_ {
        (1..self.segments.len()).map(move |n| LocationPath {
            segments: self.segments[..n].to_vec(),
        })
    }
}

impl fmt::Display for LocationPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for seg in &self.segments {
            write!(f, "/{seg}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for LocationPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl Serialize for LocationPath {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LocationPath {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        LocationPath::parse(&s).map_err(de::Error::custom)
    }
}

/// A tree value: scalar leaf or node with named children.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StoreValue {
    Int(i64),
    Str(String),
    Bool(bool),
    Node(BTreeMap<String, StoreValue>),
}

impl StoreValue {
    pub fn is_scalar(&self) -> bool {
        !matches!(self, StoreValue::Node(_))
    }

    pub fn node<I: IntoIterator<Item = (String, StoreValue)>>(children: I) -> StoreValue {
        StoreValue::Node(children.into_iter().collect())
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            StoreValue::Int(_) => "int",
            StoreValue::Str(_) => "string",
            StoreValue::Bool(_) => "bool",
            StoreValue::Node(_) => "node",
        }
    }
}

impl fmt::Display for StoreValue {
    /// Literal text form used in workload files: `{ key: value, ... }` nodes,
    /// quoted strings, bare integers and booleans.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StoreValue::Int(n) => write!(f, "{n}"),
            StoreValue::Bool(b) => write!(f, "{b}"),
            StoreValue::Str(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        '\n' => f.write_str("\\n")?,
                        '\t' => f.write_str("\\t")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
            StoreValue::Node(children) => {
                f.write_str("{")?;
                for (i, (k, v)) in children.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{k}: {v}")?;
                }
                f.write_str("}")
            }
        }
    }
}

impl fmt::Debug for StoreValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl Serialize for StoreValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            StoreValue::Int(n) => serializer.serialize_i64(*n),
            StoreValue::Str(s) => serializer.serialize_str(s),
            StoreValue::Bool(b) => serializer.serialize_bool(*b),
            StoreValue::Node(children) => serializer.collect_map(children.iter()),
        }
    }
}

impl<'de> Deserialize<'de> for StoreValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ValueVisitor;

        impl<'de> Visitor<'de> for ValueVisitor {
            type Value = StoreValue;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an integer, string, boolean, or object")
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<StoreValue, E> {
                Ok(StoreValue::Int(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<StoreValue, E> {
                i64::try_from(v)
                    .map(StoreValue::Int)
                    .map_err(|_| E::custom("integer out of i64 range"))
            }

            fn visit_bool<E: de::Error>(self, v: bool) -> Result<StoreValue, E> {
                Ok(StoreValue::Bool(v))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<StoreValue, E> {
                Ok(StoreValue::Str(v.to_string()))
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<StoreValue, A::Error> {
                let mut children = BTreeMap::new();
                while let Some((k, v)) = map.next_entry::<String, StoreValue>()? {
                    if !valid_segment(&k) {
                        return Err(de::Error::custom(format!("invalid node key {k:?}")));
                    }
                    children.insert(k, v);
                }
                Ok(StoreValue::Node(children))
            }
        }

        deserializer.deserialize_any(ValueVisitor)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("unresolved location {0}")]
    UnresolvedLocation(LocationPath),
    #[error("location {0} is not a node")]
    NotANode(LocationPath),
}

/// Per-machine classification of non-private locations.
///
/// A declared path covers its whole subtree: `shared /t` makes every location
/// under `/t` shared for that machine.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Classification {
    pub shared: BTreeSet<LocationPath>,
    pub monitored: BTreeSet<LocationPath>,
    pub output: BTreeSet<LocationPath>,
}

fn covers(set: &BTreeSet<LocationPath>, loc: &LocationPath) -> bool {
    set.iter().any(|p| p == loc || p.subsumes(loc))
}

impl Classification {
    pub fn is_shared(&self, loc: &LocationPath) -> bool {
        covers(&self.shared, loc)
    }

    pub fn is_monitored(&self, loc: &LocationPath) -> bool {
        covers(&self.monitored, loc)
    }

    pub fn is_output(&self, loc: &LocationPath) -> bool {
        covers(&self.output, loc)
    }

    /// Read lock subject: shared or monitored.
    pub fn readable_needs_lock(&self, loc: &LocationPath) -> bool {
        self.is_shared(loc) || self.is_monitored(loc)
    }

    /// Write lock subject: shared or output.
    pub fn writable_needs_lock(&self, loc: &LocationPath) -> bool {
        self.is_shared(loc) || self.is_output(loc)
    }
}

/// The store: a root node plus the per-machine location classification
/// declared by the workload (fixed for a run).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Store {
    root: BTreeMap<String, StoreValue>,
    classification: BTreeMap<String, Classification>,
}

impl Store {
    pub fn new() -> Store {
        Store::default()
    }

    pub fn root(&self) -> &BTreeMap<String, StoreValue> {
        &self.root
    }

    /// Value at `loc`: the scalar or whole subtree. Pure lookup.
    pub fn eval(&self, loc: &LocationPath) -> Result<&StoreValue, StoreError> {
        let segs = loc.segments();
        let mut cur = self
            .root
            .get(&segs[0])
            .ok_or_else(|| StoreError::UnresolvedLocation(loc.clone()))?;
        for seg in &segs[1..] {
            match cur {
                StoreValue::Node(children) => {
                    cur = children
                        .get(seg)
                        .ok_or_else(|| StoreError::UnresolvedLocation(loc.clone()))?;
                }
                _ => return Err(StoreError::UnresolvedLocation(loc.clone())),
            }
        }
        Ok(cur)
    }

    pub fn resolves(&self, loc: &LocationPath) -> bool {
        self.eval(loc).is_ok()
    }

    /// Replace the subtree at `loc` with `value`. The parent must resolve to a
    /// node; siblings are untouched and every ancestor reflects the change.
    pub fn write_genuine(&mut self, loc: &LocationPath, value: StoreValue) -> Result<(), StoreError> {
        let segs = loc.segments();
        if segs.len() == 1 {
            self.root.insert(segs[0].clone(), value);
            return Ok(());
        }
        let parent = LocationPath::from_segments(segs[..segs.len() - 1].to_vec())
            .expect("parent of a valid path is valid");
        let mut cur = self
            .root
            .get_mut(&segs[0])
            .ok_or_else(|| StoreError::UnresolvedLocation(parent.clone()))?;
        for seg in &segs[1..segs.len() - 1] {
            match cur {
                StoreValue::Node(children) => {
                    cur = children
                        .get_mut(seg)
                        .ok_or_else(|| StoreError::UnresolvedLocation(parent.clone()))?;
                }
                _ => return Err(StoreError::UnresolvedLocation(parent.clone())),
            }
        }
        match cur {
            StoreValue::Node(children) => {
                children.insert(segs[segs.len() - 1].clone(), value);
                Ok(())
            }
            _ => Err(StoreError::NotANode(parent)),
        }
    }

    /// Install a value at `loc`, creating intermediate nodes. Used only while
    /// building the initial store from `init` lines.
    pub fn init_path(&mut self, loc: &LocationPath, value: StoreValue) -> Result<(), StoreError> {
        let segs = loc.segments();
        if segs.len() == 1 {
            self.root.insert(segs[0].clone(), value);
            return Ok(());
        }
        let mut cur = self
            .root
            .entry(segs[0].clone())
            .or_insert_with(|| StoreValue::Node(BTreeMap::new()));
        for seg in &segs[1..segs.len() - 1] {
            match cur {
                StoreValue::Node(children) => {
                    cur = children
                        .entry(seg.clone())
                        .or_insert_with(|| StoreValue::Node(BTreeMap::new()));
                }
                _ => return Err(StoreError::NotANode(loc.clone())),
            }
        }
        match cur {
            StoreValue::Node(children) => {
                children.insert(segs[segs.len() - 1].clone(), value);
                Ok(())
            }
            _ => Err(StoreError::NotANode(loc.clone())),
        }
    }

    pub fn set_classification(&mut self, machine: &str, classification: Classification) {
        self.classification.insert(machine.to_string(), classification);
    }

    pub fn classification(&self, machine: &str) -> Option<&Classification> {
        self.classification.get(machine)
    }

    pub fn classifications(&self) -> &BTreeMap<String, Classification> {
        &self.classification
    }

    /// All locations that resolve in the store, i.e. every node and leaf path.
    pub fn all_locations(&self) -> Vec<LocationPath> {
        fn walk(prefix: &LocationPath, value: &StoreValue, out: &mut Vec<LocationPath>) {
            out.push(prefix.clone());
            if let StoreValue::Node(children) = value {
                for (k, v) in children {
                    walk(&prefix.child(k), v, out);
                }
            }
        }
        let mut out = Vec::new();
        for (k, v) in &self.root {
            let p = LocationPath::from_segments(vec![k.clone()]).expect("segment validated");
            walk(&p, v, &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(s: &str) -> LocationPath {
        LocationPath::parse(s).unwrap()
    }

    fn store(pairs: &[(&str, StoreValue)]) -> Store {
        let mut s = Store::new();
        for (p, v) in pairs {
            s.init_path(&path(p), v.clone()).unwrap();
        }
        s
    }

    #[test]
    fn path_parse_and_display() {
        let p = path("/p1/r2");
        assert_eq!(p.segments(), ["p1".to_string(), "r2".to_string()]);
        assert_eq!(p.to_string(), "/p1/r2");
        assert!(LocationPath::parse("x").is_err());
        assert!(LocationPath::parse("/").is_err());
        assert!(LocationPath::parse("/a//b").is_err());
        assert!(LocationPath::parse("/a-b").is_err());
    }

    #[test]
    fn eval_single_segment() {
        let s = store(&[("/x", StoreValue::Int(7))]);
        assert_eq!(s.eval(&path("/x")).unwrap(), &StoreValue::Int(7));
    }

    #[test]
    fn eval_nested_and_subtree() {
        let s = store(&[("/p1/r1", StoreValue::Int(1)), ("/p1/r2", StoreValue::Int(2))]);
        assert_eq!(s.eval(&path("/p1/r2")).unwrap(), &StoreValue::Int(2));
        // reading the page yields the record map
        assert_eq!(
            s.eval(&path("/p1")).unwrap(),
            &StoreValue::node([
                ("r1".to_string(), StoreValue::Int(1)),
                ("r2".to_string(), StoreValue::Int(2)),
            ])
        );
    }

    #[test]
    fn eval_missing_is_error() {
        let s = store(&[("/x", StoreValue::Int(1))]);
        assert_eq!(
            s.eval(&path("/y")),
            Err(StoreError::UnresolvedLocation(path("/y")))
        );
        assert!(s.eval(&path("/x/y")).is_err());
    }

    #[test]
    fn write_leaf() {
        let mut s = store(&[("/x", StoreValue::Int(1))]);
        s.write_genuine(&path("/x"), StoreValue::Int(5)).unwrap();
        assert_eq!(s.eval(&path("/x")).unwrap(), &StoreValue::Int(5));
    }

    #[test]
    fn write_preserves_siblings() {
        let mut s = store(&[("/p/r", StoreValue::Int(1)), ("/p/q", StoreValue::Int(2))]);
        s.write_genuine(&path("/p/r"), StoreValue::Int(9)).unwrap();
        assert_eq!(s.eval(&path("/p/r")).unwrap(), &StoreValue::Int(9));
        assert_eq!(s.eval(&path("/p/q")).unwrap(), &StoreValue::Int(2));
    }

    #[test]
    fn ancestor_write_replaces_subtree() {
        let mut s = store(&[("/p/r", StoreValue::Int(1))]);
        s.write_genuine(
            &path("/p"),
            StoreValue::node([
                ("r".to_string(), StoreValue::Int(3)),
                ("u".to_string(), StoreValue::Int(4)),
            ]),
        )
        .unwrap();
        assert_eq!(s.eval(&path("/p/r")).unwrap(), &StoreValue::Int(3));
        assert_eq!(s.eval(&path("/p/u")).unwrap(), &StoreValue::Int(4));
    }

    #[test]
    fn write_missing_parent_is_error() {
        let mut s = store(&[("/x", StoreValue::Int(1))]);
        let err = s.write_genuine(&path("/p/r"), StoreValue::Int(1)).unwrap_err();
        assert_eq!(err, StoreError::UnresolvedLocation(path("/p")));
    }

    #[test]
    fn subsumes_is_strict_ancestry() {
        assert!(path("/p1").subsumes(&path("/p1/r2")));
        assert!(!path("/p1").subsumes(&path("/p1")));
        assert!(!path("/p1/r2").subsumes(&path("/p1")));
        assert!(!path("/p1").subsumes(&path("/p2/r1")));
        assert!(path("/a").subsumes(&path("/a/b/c")));
    }

    #[test]
    fn classification_covers_subtrees() {
        let mut c = Classification::default();
        c.shared.insert(path("/t"));
        assert!(c.is_shared(&path("/t")));
        assert!(c.is_shared(&path("/t/a/b")));
        assert!(!c.is_shared(&path("/u")));
    }

    #[test]
    fn value_literal_display() {
        let v = StoreValue::node([
            ("b".to_string(), StoreValue::Bool(true)),
            ("n".to_string(), StoreValue::Int(-3)),
            ("s".to_string(), StoreValue::Str("a\"b".to_string())),
        ]);
        assert_eq!(v.to_string(), r#"{b: true, n: -3, s: "a\"b"}"#);
    }

    #[test]
    fn json_round_trip() {
        let v = StoreValue::node([
            ("n".to_string(), StoreValue::Int(i64::MIN)),
            ("s".to_string(), StoreValue::Str("hi".to_string())),
            (
                "t".to_string(),
                StoreValue::node([("x".to_string(), StoreValue::Bool(false))]),
            ),
        ]);
        let json = serde_json::to_string(&v).unwrap();
        let back: StoreValue = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
        assert!(serde_json::from_str::<StoreValue>("1.5").is_err());
        assert!(serde_json::from_str::<StoreValue>("[1]").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_path() -> impl Strategy<Value = LocationPath> {
            proptest::collection::vec("[a-z][a-z0-9_]{0,3}", 1..4)
                .prop_map(|segs| LocationPath::from_segments(segs).unwrap())
        }

        proptest! {
            #[test]
            fn subsumes_strict_partial_order(a in arb_path(), b in arb_path(), c in arb_path()) {
                // irreflexive
                prop_assert!(!a.subsumes(&a));
                // antisymmetric
                prop_assert!(!(a.subsumes(&b) && b.subsumes(&a)));
                // transitive
                if a.subsumes(&b) && b.subsumes(&c) {
                    prop_assert!(a.subsumes(&c));
                }
            }

            #[test]
            fn ancestor_contains_descendant_subtree(
                segs in proptest::collection::vec("[a-z]", 2..5),
                n in any::<i64>(),
            ) {
                // eval(l1) contains eval(l2) at the residual path, constructively
                let leaf = LocationPath::from_segments(segs.clone()).unwrap();
                let mut s = Store::new();
                s.init_path(&leaf, StoreValue::Int(n)).unwrap();
                for cut in 1..segs.len() {
                    let anc = LocationPath::from_segments(segs[..cut].to_vec()).unwrap();
                    let mut v = s.eval(&anc).unwrap();
                    for seg in &segs[cut..] {
                        match v {
                            StoreValue::Node(children) => v = children.get(seg).unwrap(),
                            _ => prop_assert!(false, "expected node"),
                        }
                    }
                    prop_assert_eq!(v, &StoreValue::Int(n));
                }
            }
        }
    }
}
