//! The step-based transaction DSL.
//!
//! A workload file declares a shared initial store plus one program per
//! machine. A program is a fixed list of steps; each step declares the
//! locations it reads and a list of genuine writes (`write l := expr`) and
//! partial updates (`partial l op expr`). Read and write locations are
//! syntactically fixed per step, so lock needs can be computed without
//! evaluating anything; values are evaluated only when a step fires.
//!
//! Nondeterminism exists only as `choose(e1, e2, ...)`, resolved by a pure
//! function of (seed, machine, step index, choice site), so replaying a step
//! against the same store and seed always reproduces the same intent.
//!
//! Grammar (line oriented, `#` comments):
//!
//! ```text
//! init /path = <value-literal>
//! machine <id>
//! shared /path ...
//! monitored /path ...
//! output /path ...
//! step:
//!   read /path
//!   write /path := <expr>
//!   partial /path <op> <expr>
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::ops::{splitmix64, GenuineUpdate, OperatorRegistry, PartialUpdate};
use crate::store::{Classification, LocationPath, Store, StoreError, StoreValue};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },
    #[error("line {line}: location {path} does not resolve in the initial store")]
    UndeclaredLocation { path: LocationPath, line: usize },
    #[error("line {line}: expression reads {path} but the step does not declare `read {path}`")]
    UndeclaredRead { path: LocationPath, line: usize },
    #[error("line {line}: operator {op:?} is not requestable in workloads")]
    UnknownOperator { op: String, line: usize },
    #[error("duplicate machine id {0:?}")]
    DuplicateMachine(String),
}

fn perr<T>(line: usize, col: usize, msg: impl Into<String>) -> Result<T, WorkloadError> {
    Err(WorkloadError::Parse { line, col, msg: msg.into() })
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("type error: {0}")]
    Type(String),
    #[error("partial update argument must be a scalar, got {0}")]
    NonScalarArg(StoreValue),
    #[error("no step {pc} in machine {machine}")]
    NoSuchStep { machine: String, pc: usize },
}

/// Binary operators usable in step expressions. `Add` doubles as string
/// concatenation; integer arithmetic wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Lit(StoreValue),
    Read(LocationPath),
    /// Seeded choice among alternatives; `site` is the syntactic choice-site
    /// index within the step, fixed at parse time.
    Choose { site: u32, arms: Vec<Expr> },
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    fn collect_reads(&self, out: &mut BTreeSet<LocationPath>) {
        match self {
            Expr::Lit(_) => {}
            Expr::Read(l) => {
                out.insert(l.clone());
            }
            Expr::Choose { arms, .. } => {
                for a in arms {
                    a.collect_reads(out);
                }
            }
            Expr::Neg(e) => e.collect_reads(out),
            Expr::Bin(_, a, b) => {
                a.collect_reads(out);
                b.collect_reads(out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Write { loc: LocationPath, expr: Expr },
    Partial { loc: LocationPath, op: String, expr: Expr },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Step {
    pub reads: Vec<LocationPath>,
    pub actions: Vec<Action>,
}

impl Step {
    /// Declared reads plus every location read by an expression.
    pub fn read_locs(&self) -> BTreeSet<LocationPath> {
        let mut out: BTreeSet<LocationPath> = self.reads.iter().cloned().collect();
        for a in &self.actions {
            match a {
                Action::Write { expr, .. } | Action::Partial { expr, .. } => {
                    expr.collect_reads(&mut out)
                }
            }
        }
        out
    }

    pub fn write_locs(&self) -> BTreeSet<LocationPath> {
        self.actions
            .iter()
            .map(|a| match a {
                Action::Write { loc, .. } | Action::Partial { loc, .. } => loc.clone(),
            })
            .collect()
    }

    pub fn genuine_write_locs(&self) -> BTreeSet<LocationPath> {
        self.actions
            .iter()
            .filter_map(|a| match a {
                Action::Write { loc, .. } => Some(loc.clone()),
                Action::Partial { .. } => None,
            })
            .collect()
    }

    /// Distinct partial operators used per location.
    pub fn partial_ops(&self) -> BTreeMap<LocationPath, BTreeSet<String>> {
        let mut out: BTreeMap<LocationPath, BTreeSet<String>> = BTreeMap::new();
        for a in &self.actions {
            if let Action::Partial { loc, op, .. } = a {
                out.entry(loc.clone()).or_default().insert(op.clone());
            }
        }
        out
    }
}

/// One machine's program plus its location classification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub machine: String,
    pub classification: Classification,
    pub steps: Vec<Step>,
}

impl Program {
    /// The concrete termination criterion: the step list is exhausted.
    pub fn terminated(&self, pc: usize) -> bool {
        pc >= self.steps.len()
    }
}

/// Parsed workload: programs plus the initial store with every machine's
/// classification installed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    pub programs: Vec<Program>,
    pub init: Store,
}

impl Workload {
    pub fn parse(text: &str, registry: &OperatorRegistry) -> Result<Workload, WorkloadError> {
        Parser::new(text, registry).parse()
    }

    pub fn program(&self, machine: &str) -> Option<&Program> {
        self.programs.iter().find(|p| p.machine == machine)
    }

    pub fn total_steps(&self) -> usize {
        self.programs.iter().map(|p| p.steps.len()).sum()
    }

    /// A copy containing only the named machine's program, same initial store.
    /// The serial-replay oracle runs these one at a time.
    pub fn restricted_to(&self, machine: &str) -> Option<Workload> {
        let program = self.program(machine)?.clone();
        Some(Workload { programs: vec![program], init: self.init.clone() })
    }
}

/// The evaluated intent of one step against a concrete store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepIntent {
    pub read_values: BTreeMap<LocationPath, StoreValue>,
    pub genuine: BTreeSet<GenuineUpdate>,
    pub partial: Vec<PartialUpdate>,
    pub r_loc: BTreeSet<LocationPath>,
    pub w_loc: BTreeSet<LocationPath>,
    pub genuine_write_loc: BTreeSet<LocationPath>,
}

/// Pure choice function: the same (seed, machine, pc, site) always selects the
/// same alternative, so lock acquisition and firing see one choice.
pub fn choose_index(seed: u64, machine: &str, pc: usize, site: u32, len: usize) -> usize {
    debug_assert!(len > 0);
    let mut h = splitmix64(seed ^ 0x6d6c_7478);
    for b in machine.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h = splitmix64(h ^ pc as u64);
    h = splitmix64(h ^ u64::from(site));
    (h % len as u64) as usize
}

struct EvalCtx<'a> {
    store: &'a Store,
    machine: &'a str,
    pc: usize,
    seed: u64,
}

fn eval_expr(expr: &Expr, ctx: &EvalCtx) -> Result<StoreValue, EvalError> {
    match expr {
        Expr::Lit(v) => Ok(v.clone()),
        Expr::Read(l) => Ok(ctx.store.eval(l)?.clone()),
        Expr::Choose { site, arms } => {
            let idx = choose_index(ctx.seed, ctx.machine, ctx.pc, *site, arms.len());
            eval_expr(&arms[idx], ctx)
        }
        Expr::Neg(e) => match eval_expr(e, ctx)? {
            StoreValue::Int(n) => Ok(StoreValue::Int(n.wrapping_neg())),
            other => Err(EvalError::Type(format!("cannot negate {other}"))),
        },
        Expr::Bin(op, a, b) => {
            let (va, vb) = (eval_expr(a, ctx)?, eval_expr(b, ctx)?);
            eval_binop(*op, va, vb)
        }
    }
}

fn eval_binop(op: BinOp, a: StoreValue, b: StoreValue) -> Result<StoreValue, EvalError> {
    use StoreValue::*;
    let type_err = |a: &StoreValue, b: &StoreValue, what: &str| {
        Err(EvalError::Type(format!("{what} not defined on {} and {}", a.type_name(), b.type_name())))
    };
    match op {
        BinOp::Add => match (&a, &b) {
            (Int(x), Int(y)) => Ok(Int(x.wrapping_add(*y))),
            (Str(x), Str(y)) => Ok(Str(format!("{x}{y}"))),
            _ => type_err(&a, &b, "+"),
        },
        BinOp::Sub => match (&a, &b) {
            (Int(x), Int(y)) => Ok(Int(x.wrapping_sub(*y))),
            _ => type_err(&a, &b, "-"),
        },
        BinOp::Mul => match (&a, &b) {
            (Int(x), Int(y)) => Ok(Int(x.wrapping_mul(*y))),
            _ => type_err(&a, &b, "*"),
        },
        BinOp::Eq | BinOp::Ne => {
            if std::mem::discriminant(&a) != std::mem::discriminant(&b) {
                return type_err(&a, &b, "comparison");
            }
            let eq = a == b;
            Ok(Bool(if op == BinOp::Eq { eq } else { !eq }))
        }
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
            let ord = match (&a, &b) {
                (Int(x), Int(y)) => x.cmp(y),
                (Str(x), Str(y)) => x.cmp(y),
                _ => return type_err(&a, &b, "ordering"),
            };
            Ok(Bool(match op {
                BinOp::Lt => ord.is_lt(),
                BinOp::Le => ord.is_le(),
                BinOp::Gt => ord.is_gt(),
                BinOp::Ge => ord.is_ge(),
                _ => unreachable!(),
            }))
        }
    }
}

/// Evaluate one step. Deterministic in (program, pc, store, seed); records the
/// observed value of every read location.
pub fn eval_step(
    program: &Program,
    pc: usize,
    store: &Store,
    seed: u64,
) -> Result<StepIntent, EvalError> {
    let step = program.steps.get(pc).ok_or_else(|| EvalError::NoSuchStep {
        machine: program.machine.clone(),
        pc,
    })?;
    let ctx = EvalCtx { store, machine: &program.machine, pc, seed };

    let r_loc = step.read_locs();
    let mut read_values = BTreeMap::new();
    for l in &r_loc {
        read_values.insert(l.clone(), store.eval(l)?.clone());
    }

    let mut genuine = BTreeSet::new();
    let mut partial = Vec::new();
    for action in &step.actions {
        match action {
            Action::Write { loc, expr } => {
                let val = eval_expr(expr, &ctx)?;
                genuine.insert(GenuineUpdate { loc: loc.clone(), val });
            }
            Action::Partial { loc, op, expr } => {
                let arg = eval_expr(expr, &ctx)?;
                if !arg.is_scalar() {
                    return Err(EvalError::NonScalarArg(arg));
                }
                partial.push(PartialUpdate { loc: loc.clone(), op: op.clone(), arg });
            }
        }
    }

    Ok(StepIntent {
        read_values,
        genuine,
        partial,
        r_loc,
        w_loc: step.write_locs(),
        genuine_write_loc: step.genuine_write_locs(),
    })
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Int(i64),
    Str(String),
    Ident(String),
    Path(LocationPath),
    Punct(&'static str),
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Int(n) => write!(f, "{n}"),
            Tok::Str(s) => write!(f, "{s:?}"),
            Tok::Ident(s) => write!(f, "{s}"),
            Tok::Path(p) => write!(f, "{p}"),
            Tok::Punct(p) => write!(f, "{p}"),
        }
    }
}

fn ends_value(tok: Option<&Tok>) -> bool {
    matches!(
        tok,
        Some(Tok::Int(_) | Tok::Str(_) | Tok::Ident(_) | Tok::Path(_) | Tok::Punct(")" | "}"))
    )
}

/// Tokenize one line (comments already stripped). Columns are 1-based.
fn tokenize(line: &str, line_no: usize) -> Result<Vec<(Tok, usize)>, WorkloadError> {
    let chars: Vec<char> = line.chars().collect();
    let mut out: Vec<(Tok, usize)> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let col = i + 1;
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '"' {
            let mut s = String::new();
            i += 1;
            loop {
                match chars.get(i) {
                    None => return perr(line_no, col, "unterminated string literal"),
                    Some('"') => {
                        i += 1;
                        break;
                    }
                    Some('\\') => {
                        let esc = chars.get(i + 1);
                        match esc {
                            Some('"') => s.push('"'),
                            Some('\\') => s.push('\\'),
                            Some('n') => s.push('\n'),
                            Some('t') => s.push('\t'),
                            other => {
                                return perr(line_no, i + 1, format!("bad escape {other:?}"))
                            }
                        }
                        i += 2;
                    }
                    Some(&ch) => {
                        s.push(ch);
                        i += 1;
                    }
                }
            }
            out.push((Tok::Str(s), col));
            continue;
        }
        if c == '/' && chars.get(i + 1).map_or(false, |c| c.is_ascii_alphanumeric() || *c == '_') {
            let start = i;
            let mut text = String::new();
            while i < chars.len()
                && (chars[i] == '/' || chars[i].is_ascii_alphanumeric() || chars[i] == '_')
            {
                text.push(chars[i]);
                i += 1;
            }
            match LocationPath::parse(&text) {
                Ok(p) => out.push((Tok::Path(p), start + 1)),
                Err(e) => return perr(line_no, start + 1, e.to_string()),
            }
            continue;
        }
        let negative_literal =
            c == '-' && chars.get(i + 1).is_some_and(char::is_ascii_digit) && !ends_value(out.last().map(|(t, _)| t));
        if c.is_ascii_digit() || negative_literal {
            let start = i;
            let mut text = String::new();
            if negative_literal {
                text.push('-');
                i += 1;
            }
            while i < chars.len() && chars[i].is_ascii_digit() {
                text.push(chars[i]);
                i += 1;
            }
            match text.parse::<i64>() {
                Ok(n) => out.push((Tok::Int(n), start + 1)),
                Err(_) => return perr(line_no, start + 1, format!("integer out of range: {text}")),
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            let mut text = String::new();
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                text.push(chars[i]);
                i += 1;
            }
            out.push((Tok::Ident(text), start + 1));
            continue;
        }
        let two: Option<&'static str> = match (c, chars.get(i + 1)) {
            (':', Some('=')) => Some(":="),
            ('=', Some('=')) => Some("=="),
            ('!', Some('=')) => Some("!="),
            ('<', Some('=')) => Some("<="),
            ('>', Some('=')) => Some(">="),
            _ => None,
        };
        if let Some(p) = two {
            out.push((Tok::Punct(p), col));
            i += 2;
            continue;
        }
        let one: Option<&'static str> = match c {
            '+' => Some("+"),
            '-' => Some("-"),
            '*' => Some("*"),
            '(' => Some("("),
            ')' => Some(")"),
            ',' => Some(","),
            '{' => Some("{"),
            '}' => Some("}"),
            ':' => Some(":"),
            '=' => Some("="),
            '<' => Some("<"),
            '>' => Some(">"),
            _ => None,
        };
        match one {
            Some(p) => {
                out.push((Tok::Punct(p), col));
                i += 1;
            }
            None => return perr(line_no, col, format!("unexpected character {c:?}")),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct TokCursor {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    line: usize,
}

impl TokCursor {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn col(&self) -> usize {
        self.toks
            .get(self.pos)
            .map(|(_, c)| *c)
            .unwrap_or_else(|| self.toks.last().map(|(_, c)| c + 1).unwrap_or(1))
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect_punct(&mut self, p: &'static str) -> Result<(), WorkloadError> {
        match self.next() {
            Some(Tok::Punct(q)) if q == p => Ok(()),
            other => perr(
                self.line,
                self.col(),
                format!("expected {p:?}, got {}", other.map_or("end of line".to_string(), |t| t.to_string())),
            ),
        }
    }

    fn expect_path(&mut self) -> Result<LocationPath, WorkloadError> {
        match self.next() {
            Some(Tok::Path(p)) => Ok(p),
            other => perr(
                self.line,
                self.col(),
                format!("expected a /path, got {}", other.map_or("end of line".to_string(), |t| t.to_string())),
            ),
        }
    }

    fn expect_end(&self) -> Result<(), WorkloadError> {
        if self.pos == self.toks.len() {
            Ok(())
        } else {
            perr(self.line, self.col(), "trailing tokens")
        }
    }
}

struct Parser<'a> {
    registry: &'a OperatorRegistry,
    lines: Vec<&'a str>,
    programs: Vec<(Program, Vec<(LocationPath, usize)>)>,
    init: Store,
    /// Path usages to validate against the final initial store.
    used_paths: Vec<(usize, LocationPath, usize)>, // (program idx, path, line)
    choice_sites: u32,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str, registry: &'a OperatorRegistry) -> Parser<'a> {
        Parser {
            registry,
            lines: text.lines().collect(),
            programs: Vec::new(),
            init: Store::new(),
            used_paths: Vec::new(),
            choice_sites: 0,
        }
    }

    fn parse(mut self) -> Result<Workload, WorkloadError> {
        let lines = std::mem::take(&mut self.lines);
        let mut in_step = false;
        for (idx, raw) in lines.iter().enumerate() {
            let line_no = idx + 1;
            let stripped = strip_comment(raw);
            if stripped.trim().is_empty() {
                continue;
            }
            let indented = stripped.starts_with(' ') || stripped.starts_with('\t');
            let mut cur = TokCursor { toks: tokenize(stripped, line_no)?, pos: 0, line: line_no };
            if indented {
                if !in_step {
                    return perr(line_no, 1, "indented line outside a step");
                }
                self.parse_step_line(&mut cur)?;
                continue;
            }
            let keyword = match cur.next() {
                Some(Tok::Ident(k)) => k,
                other => {
                    return perr(
                        line_no,
                        1,
                        format!("expected a directive, got {}", other.map_or("nothing".to_string(), |t| t.to_string())),
                    )
                }
            };
            match keyword.as_str() {
                "machine" => {
                    in_step = false;
                    let id = match cur.next() {
                        Some(Tok::Ident(id)) => id,
                        _ => return perr(line_no, cur.col(), "expected a machine id"),
                    };
                    cur.expect_end()?;
                    if self.programs.iter().any(|(p, _)| p.machine == id) {
                        return Err(WorkloadError::DuplicateMachine(id));
                    }
                    self.programs.push((
                        Program {
                            machine: id,
                            classification: Classification::default(),
                            steps: Vec::new(),
                        },
                        Vec::new(),
                    ));
                }
                "shared" | "monitored" | "output" => {
                    in_step = false;
                    let (prog, _) = self.current(line_no)?;
                    let set = match keyword.as_str() {
                        "shared" => &mut prog.classification.shared,
                        "monitored" => &mut prog.classification.monitored,
                        _ => &mut prog.classification.output,
                    };
                    let mut any = false;
                    while let Some(tok) = cur.next() {
                        match tok {
                            Tok::Path(p) => {
                                set.insert(p.clone());
                                any = true;
                            }
                            other => {
                                return perr(line_no, cur.col(), format!("expected a /path, got {other}"))
                            }
                        }
                    }
                    if !any {
                        return perr(line_no, cur.col(), "expected at least one /path");
                    }
                    // re-borrow to record usages
                    let idx = self.programs.len() - 1;
                    let set_clone: Vec<LocationPath> = match keyword.as_str() {
                        "shared" => self.programs[idx].0.classification.shared.iter().cloned().collect(),
                        "monitored" => self.programs[idx].0.classification.monitored.iter().cloned().collect(),
                        _ => self.programs[idx].0.classification.output.iter().cloned().collect(),
                    };
                    for p in set_clone {
                        self.used_paths.push((idx, p, line_no));
                    }
                }
                "init" => {
                    in_step = false;
                    let path = cur.expect_path()?;
                    cur.expect_punct("=")?;
                    let value = parse_value_literal(&mut cur)?;
                    cur.expect_end()?;
                    if let Err(e) = self.init.init_path(&path, value) {
                        return perr(line_no, 1, e.to_string());
                    }
                }
                "step" => {
                    cur.expect_punct(":")?;
                    cur.expect_end()?;
                    let (prog, _) = self.current(line_no)?;
                    prog.steps.push(Step::default());
                    self.choice_sites = 0;
                    in_step = true;
                }
                other => return perr(line_no, 1, format!("unknown directive {other:?}")),
            }
        }
        self.finish()
    }

    fn current(&mut self, line: usize) -> Result<&mut (Program, Vec<(LocationPath, usize)>), WorkloadError> {
        if self.programs.is_empty() {
            return perr(line, 1, "directive before any `machine` declaration");
        }
        let idx = self.programs.len() - 1;
        Ok(&mut self.programs[idx])
    }

    fn parse_step_line(&mut self, cur: &mut TokCursor) -> Result<(), WorkloadError> {
        let line = cur.line;
        let keyword = match cur.next() {
            Some(Tok::Ident(k)) => k,
            other => {
                return perr(
                    line,
                    1,
                    format!("expected read/write/partial, got {}", other.map_or("nothing".to_string(), |t| t.to_string())),
                )
            }
        };
        let prog_idx = self.programs.len() - 1;
        match keyword.as_str() {
            "read" => {
                let path = cur.expect_path()?;
                cur.expect_end()?;
                self.used_paths.push((prog_idx, path.clone(), line));
                let (prog, _) = &mut self.programs[prog_idx];
                prog.steps.last_mut().unwrap().reads.push(path);
            }
            "write" => {
                let path = cur.expect_path()?;
                cur.expect_punct(":=")?;
                let expr = self.parse_expr(cur)?;
                cur.expect_end()?;
                self.record_action(prog_idx, line, path.clone(), &expr)?;
                let (prog, _) = &mut self.programs[prog_idx];
                prog.steps.last_mut().unwrap().actions.push(Action::Write { loc: path, expr });
            }
            "partial" => {
                let path = cur.expect_path()?;
                let op = match cur.next() {
                    Some(Tok::Ident(op)) => op,
                    _ => return perr(line, cur.col(), "expected an operator name"),
                };
                if !self.registry.is_user_op(&op) {
                    return Err(WorkloadError::UnknownOperator { op, line });
                }
                let expr = self.parse_expr(cur)?;
                cur.expect_end()?;
                self.record_action(prog_idx, line, path.clone(), &expr)?;
                let (prog, _) = &mut self.programs[prog_idx];
                prog.steps.last_mut().unwrap().actions.push(Action::Partial { loc: path, op, expr });
            }
            other => return perr(line, 1, format!("unknown step directive {other:?}")),
        }
        Ok(())
    }

    fn record_action(
        &mut self,
        prog_idx: usize,
        line: usize,
        target: LocationPath,
        expr: &Expr,
    ) -> Result<(), WorkloadError> {
        self.used_paths.push((prog_idx, target, line));
        let mut reads = BTreeSet::new();
        expr.collect_reads(&mut reads);
        let (prog, _) = &self.programs[prog_idx];
        let declared = &prog.steps.last().unwrap().reads;
        for r in reads {
            if !declared.contains(&r) {
                return Err(WorkloadError::UndeclaredRead { path: r, line });
            }
            self.used_paths.push((prog_idx, r, line));
        }
        Ok(())
    }

    // expr := additive (cmp-op additive)?
    fn parse_expr(&mut self, cur: &mut TokCursor) -> Result<Expr, WorkloadError> {
        let lhs = self.parse_additive(cur)?;
        let op = match cur.peek() {
            Some(Tok::Punct("==")) => Some(BinOp::Eq),
            Some(Tok::Punct("!=")) => Some(BinOp::Ne),
            Some(Tok::Punct("<")) => Some(BinOp::Lt),
            Some(Tok::Punct("<=")) => Some(BinOp::Le),
            Some(Tok::Punct(">")) => Some(BinOp::Gt),
            Some(Tok::Punct(">=")) => Some(BinOp::Ge),
            _ => None,
        };
        if let Some(op) = op {
            cur.next();
            let rhs = self.parse_additive(cur)?;
            return Ok(Expr::Bin(op, Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn parse_additive(&mut self, cur: &mut TokCursor) -> Result<Expr, WorkloadError> {
        let mut lhs = self.parse_multiplicative(cur)?;
        loop {
            let op = match cur.peek() {
                Some(Tok::Punct("+")) => BinOp::Add,
                Some(Tok::Punct("-")) => BinOp::Sub,
                _ => break,
            };
            cur.next();
            let rhs = self.parse_multiplicative(cur)?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_multiplicative(&mut self, cur: &mut TokCursor) -> Result<Expr, WorkloadError> {
        let mut lhs = self.parse_unary(cur)?;
        while matches!(cur.peek(), Some(Tok::Punct("*"))) {
            cur.next();
            let rhs = self.parse_unary(cur)?;
            lhs = Expr::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self, cur: &mut TokCursor) -> Result<Expr, WorkloadError> {
        if matches!(cur.peek(), Some(Tok::Punct("-"))) {
            cur.next();
            return Ok(Expr::Neg(Box::new(self.parse_unary(cur)?)));
        }
        self.parse_primary(cur)
    }

    fn parse_primary(&mut self, cur: &mut TokCursor) -> Result<Expr, WorkloadError> {
        let line = cur.line;
        let col = cur.col();
        match cur.next() {
            Some(Tok::Int(n)) => Ok(Expr::Lit(StoreValue::Int(n))),
            Some(Tok::Str(s)) => Ok(Expr::Lit(StoreValue::Str(s))),
            Some(Tok::Ident(id)) => match id.as_str() {
                "true" => Ok(Expr::Lit(StoreValue::Bool(true))),
                "false" => Ok(Expr::Lit(StoreValue::Bool(false))),
                "read" => {
                    cur.expect_punct("(")?;
                    let path = cur.expect_path()?;
                    cur.expect_punct(")")?;
                    Ok(Expr::Read(path))
                }
                "choose" => {
                    cur.expect_punct("(")?;
                    let site = self.choice_sites;
                    self.choice_sites += 1;
                    let mut arms = vec![self.parse_expr(cur)?];
                    while matches!(cur.peek(), Some(Tok::Punct(","))) {
                        cur.next();
                        arms.push(self.parse_expr(cur)?);
                    }
                    cur.expect_punct(")")?;
                    Ok(Expr::Choose { site, arms })
                }
                other => perr(line, col, format!("unknown identifier {other:?} in expression")),
            },
            Some(Tok::Punct("(")) => {
                let e = self.parse_expr(cur)?;
                cur.expect_punct(")")?;
                Ok(e)
            }
            Some(Tok::Punct("{")) => {
                cur.pos -= 1; // let the literal parser see the brace
                Ok(Expr::Lit(parse_value_literal(cur)?))
            }
            other => perr(
                line,
                col,
                format!("expected an expression, got {}", other.map_or("end of line".to_string(), |t| t.to_string())),
            ),
        }
    }

    fn finish(self) -> Result<Workload, WorkloadError> {
        let Parser { programs, mut init, used_paths, .. } = self;
        let programs: Vec<Program> = programs.into_iter().map(|(p, _)| p).collect();
        for (idx, path, line) in &used_paths {
            let _ = idx;
            if !init.resolves(path) {
                return Err(WorkloadError::UndeclaredLocation { path: path.clone(), line: *line });
            }
        }
        for p in &programs {
            init.set_classification(&p.machine, p.classification.clone());
        }
        Ok(Workload { programs, init })
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        match c {
            '\\' if in_str && !escaped => {
                escaped = true;
                continue;
            }
            '"' if !escaped => in_str = !in_str,
            '#' if !in_str => return &line[..i],
            _ => {}
        }
        escaped = false;
    }
    line
}

/// Parse a value literal from the token stream: int, string, bool, or
/// `{ key: literal, ... }`.
fn parse_value_literal(cur: &mut TokCursor) -> Result<StoreValue, WorkloadError> {
    let line = cur.line;
    let col = cur.col();
    match cur.next() {
        Some(Tok::Int(n)) => Ok(StoreValue::Int(n)),
        Some(Tok::Str(s)) => Ok(StoreValue::Str(s)),
        Some(Tok::Ident(id)) if id == "true" => Ok(StoreValue::Bool(true)),
        Some(Tok::Ident(id)) if id == "false" => Ok(StoreValue::Bool(false)),
        Some(Tok::Punct("-")) => match cur.next() {
            Some(Tok::Int(n)) => Ok(StoreValue::Int(n.wrapping_neg())),
            _ => perr(line, col, "expected an integer after '-'"),
        },
        Some(Tok::Punct("{")) => {
            let mut children = BTreeMap::new();
            if matches!(cur.peek(), Some(Tok::Punct("}"))) {
                cur.next();
                return Ok(StoreValue::Node(children));
            }
            loop {
                let key = match cur.next() {
                    Some(Tok::Ident(k)) => k,
                    other => {
                        return perr(
                            line,
                            cur.col(),
                            format!("expected a node key, got {}", other.map_or("end of line".to_string(), |t| t.to_string())),
                        )
                    }
                };
                cur.expect_punct(":")?;
                let val = parse_value_literal(cur)?;
                children.insert(key, val);
                match cur.next() {
                    Some(Tok::Punct(",")) => continue,
                    Some(Tok::Punct("}")) => break,
                    other => {
                        return perr(
                            line,
                            cur.col(),
                            format!("expected ',' or '}}', got {}", other.map_or("end of line".to_string(), |t| t.to_string())),
                        )
                    }
                }
            }
            Ok(StoreValue::Node(children))
        }
        other => perr(
            line,
            col,
            format!("expected a value literal, got {}", other.map_or("end of line".to_string(), |t| t.to_string())),
        ),
    }
}
