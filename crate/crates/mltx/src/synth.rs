//! Random workload generation for fuzzing.
//!
//! A generated workload declares a handful of location trees, assigns each
//! top-level tree one partial operator family (`add` or `xor`), and gives
//! every machine a mix of reads, read-dependent genuine writes, same-shape
//! interior writes, seeded choices, and partial updates. Partials on one
//! tree always use that tree's family, so cross-machine partial multisets
//! stay operator-compatible and aborts come from genuine conflicts; the
//! adversarial mode lifts that restriction (mixed operators, bad `mul`
//! arguments, `append` on integer leaves) to exercise the abort paths.
//!
//! Generation is a pure function of the config and seed: the same inputs
//! produce the same workload text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ops::splitmix64;
use crate::store::StoreValue;

#[derive(Debug, Clone)]
pub struct FuzzConfig {
    pub machines: RangeInclusive<usize>,
    /// Maximum tree depth (path segments), at least 1.
    pub depth: usize,
    /// Total leaf locations across all trees.
    pub locations: RangeInclusive<usize>,
    pub steps: RangeInclusive<usize>,
    /// Probability that a generated action is a partial update.
    pub partial_ratio: f64,
    /// Allow operator mixes and invalid arguments that force aborts.
    pub adversarial: bool,
}

impl Default for FuzzConfig {
    fn default() -> FuzzConfig {
        FuzzConfig {
            machines: 2..=5,
            depth: 3,
            locations: 4..=10,
            steps: 4..=12,
            partial_ratio: 0.5,
            adversarial: false,
        }
    }
}

struct Leaf {
    path: String,
    root: usize,
}

struct Tree {
    root_name: String,
    value: StoreValue,
    family: &'static str,
}

/// Generate a workload as text. Deterministic in (config, seed).
pub fn generate_workload(cfg: &FuzzConfig, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x4745_4e57));
    let n_machines = rng.random_range(cfg.machines.clone()).max(1);
    let n_leaves = rng.random_range(cfg.locations.clone()).max(1);
    let depth = cfg.depth.max(1);

    // build trees until the leaf budget is spent
    let mut trees: Vec<Tree> = Vec::new();
    let mut leaves: Vec<Leaf> = Vec::new();
    let mut remaining = n_leaves;
    while remaining > 0 {
        let idx = trees.len();
        let root_name = format!("t{idx}");
        let budget = rng.random_range(1..=remaining.min(4));
        remaining -= budget;
        let value = gen_tree(&mut rng, depth - 1, budget, &root_name, idx, &mut leaves);
        let family = if idx % 2 == 0 { "add" } else { "xor" };
        trees.push(Tree { root_name, value, family });
    }

    let mut text = String::new();
    let _ = writeln!(text, "# generated: seed {seed}");
    for tree in &trees {
        let _ = writeln!(text, "init /{} = {}", tree.root_name, tree.value);
    }

    for mi in 0..n_machines {
        let machine = format!("m{}", mi + 1);
        // every machine touches tree 0 (guaranteed contention) plus others
        let mut touched: Vec<usize> = vec![0];
        for (i, _) in trees.iter().enumerate().skip(1) {
            if rng.random_bool(0.5) {
                touched.push(i);
            }
        }
        let my_leaves: Vec<&Leaf> =
            leaves.iter().filter(|l| touched.contains(&l.root)).collect();
        let n_steps = rng.random_range(cfg.steps.clone()).max(1);

        let mut steps = Vec::new();
        let mut writes_tree: BTreeMap<usize, bool> =
            touched.iter().map(|&t| (t, false)).collect();
        for _ in 0..n_steps {
            steps.push(gen_step(&mut rng, cfg, &trees, &my_leaves, &mut writes_tree));
        }

        let _ = writeln!(text, "machine {machine}");
        let shared: Vec<String> = touched
            .iter()
            .filter(|t| writes_tree[t])
            .map(|t| format!("/{}", trees[*t].root_name))
            .collect();
        let monitored: Vec<String> = touched
            .iter()
            .filter(|t| !writes_tree[t])
            .map(|t| format!("/{}", trees[*t].root_name))
            .collect();
        if !shared.is_empty() {
            let _ = writeln!(text, "shared {}", shared.join(" "));
        }
        if !monitored.is_empty() {
            let _ = writeln!(text, "monitored {}", monitored.join(" "));
        }
        for step in steps {
            text.push_str(&step);
        }
    }
    text
}

/// A subtree with `budget` leaves and at most `depth_left` levels below the
/// current segment. Leaves are integers.
fn gen_tree(
    rng: &mut ChaCha8Rng,
    depth_left: usize,
    budget: usize,
    prefix: &str,
    root: usize,
    leaves: &mut Vec<Leaf>,
) -> StoreValue {
    if depth_left == 0 || budget <= 1 {
        if budget > 1 {
            // depth exhausted: flatten the rest as sibling leaves
            let mut children = BTreeMap::new();
            for i in 0..budget {
                let name = format!("k{i}");
                leaves.push(Leaf { path: format!("/{prefix}/{name}"), root });
                children.insert(name, StoreValue::Int(rng.random_range(0..100)));
            }
            return StoreValue::Node(children);
        }
        leaves.push(Leaf { path: format!("/{prefix}"), root });
        return StoreValue::Int(rng.random_range(0..100));
    }
    let n_children = rng.random_range(1..=budget.min(3));
    let mut children = BTreeMap::new();
    let mut left = budget;
    for i in 0..n_children {
        let share = if i == n_children - 1 {
            left
        } else {
            rng.random_range(1..=left - (n_children - 1 - i))
        };
        left -= share;
        let name = format!("k{i}");
        let child =
            gen_tree(rng, depth_left - 1, share, &format!("{prefix}/{name}"), root, leaves);
        children.insert(name, child);
    }
    StoreValue::Node(children)
}

fn gen_step(
    rng: &mut ChaCha8Rng,
    cfg: &FuzzConfig,
    trees: &[Tree],
    my_leaves: &[&Leaf],
    writes_tree: &mut BTreeMap<usize, bool>,
) -> String {
    let mut out = String::from("step:\n");
    let leaf = my_leaves[rng.random_range(0..my_leaves.len())];
    if rng.random_bool(cfg.partial_ratio) {
        let op = if cfg.adversarial {
            *["add", "xor", "mul", "append"].choose(rng).expect("non-empty")
        } else {
            trees[leaf.root].family
        };
        let arg = match op {
            "mul" if cfg.adversarial && rng.random_bool(0.5) => {
                rng.random_range(2..9).to_string() // invalid on purpose
            }
            "mul" => if rng.random_bool(0.5) { "1" } else { "-1" }.to_string(),
            "append" => "\"z\"".to_string(),
            _ => rng.random_range(1..9).to_string(),
        };
        let _ = writeln!(out, "  partial {} {op} {arg}", leaf.path);
        writes_tree.insert(leaf.root, true);
        return out;
    }
    match rng.random_range(0..6u32) {
        // read-only step
        0 => {
            let _ = writeln!(out, "  read {}", leaf.path);
        }
        // literal write
        1 => {
            let _ = writeln!(out, "  write {} := {}", leaf.path, rng.random_range(0..100));
            writes_tree.insert(leaf.root, true);
        }
        // read-modify-write of one leaf
        2 => {
            let _ = writeln!(out, "  read {}", leaf.path);
            let _ = writeln!(
                out,
                "  write {} := read({}) + {}",
                leaf.path,
                leaf.path,
                rng.random_range(1..10)
            );
            writes_tree.insert(leaf.root, true);
        }
        // cross-location dataflow
        3 => {
            let src = my_leaves[rng.random_range(0..my_leaves.len())];
            let _ = writeln!(out, "  read {}", src.path);
            if src.path != leaf.path {
                let _ = writeln!(
                    out,
                    "  write {} := read({}) * {} + {}",
                    leaf.path,
                    src.path,
                    rng.random_range(1..4),
                    rng.random_range(0..10)
                );
            } else {
                let _ = writeln!(out, "  write {} := read({}) - 1", leaf.path, src.path);
            }
            writes_tree.insert(leaf.root, true);
        }
        // seeded choice
        4 => {
            let a = rng.random_range(0..50);
            let b = rng.random_range(50..100);
            let c = rng.random_range(100..150);
            let _ = writeln!(out, "  write {} := choose({a}, {b}, {c})", leaf.path);
            writes_tree.insert(leaf.root, true);
        }
        // same-shape interior write, when the leaf has a parent
        _ => {
            let segments: Vec<&str> = leaf.path.trim_start_matches('/').split('/').collect();
            if segments.len() >= 2 {
                let parent = format!("/{}", segments[..segments.len() - 1].join("/"));
                let tree = &trees[leaf.root];
                let sub = subtree_at(&tree.value, &segments[1..segments.len() - 1]);
                let fresh = reshape(rng, sub);
                let _ = writeln!(out, "  write {parent} := {fresh}");
            } else {
                let _ = writeln!(out, "  write {} := {}", leaf.path, rng.random_range(0..100));
            }
            writes_tree.insert(leaf.root, true);
        }
    }
    out
}

fn subtree_at<'a>(value: &'a StoreValue, segments: &[&str]) -> &'a StoreValue {
    let mut cur = value;
    for seg in segments {
        match cur {
            StoreValue::Node(children) => cur = &children[*seg],
            _ => return cur,
        }
    }
    cur
}

/// Same shape, same leaf types, fresh leaf values.
fn reshape(rng: &mut ChaCha8Rng, value: &StoreValue) -> StoreValue {
    match value {
        StoreValue::Int(_) => StoreValue::Int(rng.random_range(0..100)),
        StoreValue::Str(_) => StoreValue::Str(format!("s{}", rng.random_range(0..100))),
        StoreValue::Bool(_) => StoreValue::Bool(rng.random_bool(0.5)),
        StoreValue::Node(children) => {
            StoreValue::Node(children.iter().map(|(k, v)| (k.clone(), reshape(rng, v))).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::OperatorRegistry;
    use crate::workload::Workload;

    #[test]
    fn generated_workloads_parse() {
        let registry = OperatorRegistry::builtin();
        let cfg = FuzzConfig::default();
        for seed in 0..100 {
            let text = generate_workload(&cfg, seed);
            let w = Workload::parse(&text, &registry)
                .unwrap_or_else(|e| panic!("seed {seed}: {e}\n{text}"));
            assert!(!w.programs.is_empty());
            assert!(w.programs.iter().all(|p| !p.steps.is_empty()));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = FuzzConfig::default();
        assert_eq!(generate_workload(&cfg, 7), generate_workload(&cfg, 7));
        assert_ne!(generate_workload(&cfg, 7), generate_workload(&cfg, 8));
    }

    #[test]
    fn partials_use_one_family_per_tree() {
        let registry = OperatorRegistry::builtin();
        let cfg = FuzzConfig { partial_ratio: 1.0, ..FuzzConfig::default() };
        for seed in 0..20 {
            let text = generate_workload(&cfg, seed);
            let w = Workload::parse(&text, &registry).unwrap();
            let mut family: BTreeMap<String, String> = BTreeMap::new();
            for p in &w.programs {
                for step in &p.steps {
                    for (loc, ops) in step.partial_ops() {
                        let root = loc.segments()[0].clone();
                        for op in ops {
                            let prev = family.insert(root.clone(), op.clone());
                            if let Some(prev) = prev {
                                assert_eq!(prev, op, "seed {seed}: mixed family on {root}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn adversarial_parses_too() {
        let registry = OperatorRegistry::builtin();
        let cfg = FuzzConfig { adversarial: true, ..FuzzConfig::default() };
        for seed in 0..50 {
            let text = generate_workload(&cfg, seed);
            Workload::parse(&text, &registry)
                .unwrap_or_else(|e| panic!("seed {seed}: {e}\n{text}"));
        }
    }
}
