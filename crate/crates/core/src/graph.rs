//! Control-flow graphs (static, per procedure) and calling context trees
//! with sampled memory-state snapshots (dynamic, per run).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{token_texts, Dialect, Opcode, Procedure, Program, NUM_REGS};
use crate::vm::{self, EventKind, Exit, Fault, MachineState, Memory, Observer, TraceEvent, VmConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("block {block} of `{proc}` targets a nonexistent block")]
    DanglingLabel { proc: String, block: usize },
    #[error("call stack exceeded depth {depth}")]
    StackOverflow { depth: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    FallThrough,
    BranchTrue,
    BranchFalse,
    Jump,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 4] =
        [EdgeKind::FallThrough, EdgeKind::BranchTrue, EdgeKind::BranchFalse, EdgeKind::Jump];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cfg {
    pub proc: String,
    pub node_count: usize,
    /// Sorted, duplicate-free.
    pub edges: Vec<(usize, usize, EdgeKind)>,
}

impl Cfg {
    pub fn out_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.0 == node).count()
    }
}

/// Builds the intra-procedural CFG. Calls fall through; the callee is not
/// part of this graph.
pub fn build_cfg(proc_: &Procedure) -> Result<Cfg, GraphError> {
    let k = proc_.blocks.len();
    let dangling = |block| GraphError::DanglingLabel { proc: proc_.name.clone(), block };
    let mut edges = Vec::new();
    for b in &proc_.blocks {
        let term = b.terminator();
        let next = || if b.id + 1 < k { Ok(b.id + 1) } else { Err(dangling(b.id)) };
        let target = || {
            term.label_target()
                .and_then(|l| proc_.block_of_label(l))
                .filter(|&t| t < k)
                .ok_or_else(|| dangling(b.id))
        };
        match term.opcode {
            Opcode::Ret | Opcode::Halt => {}
            Opcode::Jmp => edges.push((b.id, target()?, EdgeKind::Jump)),
            Opcode::BrTrue => {
                edges.push((b.id, target()?, EdgeKind::BranchTrue));
                edges.push((b.id, next()?, EdgeKind::BranchFalse));
            }
            Opcode::BrFalse => {
                edges.push((b.id, target()?, EdgeKind::BranchFalse));
                edges.push((b.id, next()?, EdgeKind::BranchTrue));
            }
            _ => edges.push((b.id, next()?, EdgeKind::FallThrough)),
        }
    }
    edges.sort();
    edges.dedup();
    Ok(Cfg { proc: proc_.name.clone(), node_count: k, edges })
}

/// Kind-erased binary adjacency matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjMatrix {
    pub n: usize,
    pub cells: Vec<u8>,
}

impl AdjMatrix {
    pub fn zeros(n: usize) -> AdjMatrix {
        AdjMatrix { n, cells: vec![0; n * n] }
    }

    pub fn from_rows(rows: &[&[u8]]) -> AdjMatrix {
        let n = rows.len();
        let mut m = AdjMatrix::zeros(n);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), n, "adjacency rows must be square");
            m.cells[i * n..(i + 1) * n].copy_from_slice(r);
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.cells[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: u8) {
        self.cells[i * self.n + j] = v;
    }

    pub fn ones(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }

    /// Rows as strings of '0'/'1', the on-disk form.
    pub fn to_rows(&self) -> Vec<String> {
        self.cells
            .chunks(self.n.max(1))
            .take(self.n)
            .map(|r| r.iter().map(|&c| if c != 0 { '1' } else { '0' }).collect())
            .collect()
    }

    pub fn from_row_strings(rows: &[String]) -> Option<AdjMatrix> {
        let n = rows.len();
        let mut m = AdjMatrix::zeros(n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return None;
            }
            for (j, c) in r.bytes().enumerate() {
                match c {
                    b'0' => {}
                    b'1' => m.set(i, j, 1),
                    _ => return None,
                }
            }
        }
        Some(m)
    }
}

pub fn adjacency(cfg: &Cfg) -> AdjMatrix {
    let mut m = AdjMatrix::zeros(cfg.node_count);
    for &(s, d, _) in &cfg.edges {
        m.set(s, d, 1);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallSite {
    pub proc: String,
    pub block: u32,
    pub index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub seq: u64,
    pub registers: [i64; NUM_REGS],
    /// Stores made by this node's frame since its previous sample.
    pub stored_values: Vec<(u64, i64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CctNode {
    pub id: usize,
    pub proc: String,
    /// `None` for the root.
    pub call_site: Option<CallSite>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cct {
    /// Indexed by node id.
    pub nodes: Vec<CctNode>,
    pub root: usize,
}

impl Cct {
    /// Parent-to-child edges in id order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.nodes
            .iter()
            .flat_map(|n| n.children.iter().map(move |&c| (n.id, c)))
            .collect()
    }

    pub fn nodes_of(&self, proc_: &str) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.proc == proc_).map(|n| n.id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CctConfig {
    pub sample_period: u64,
    pub snapshot_cap: usize,
    /// Also snapshot each frame as it returns, and the active node when
    /// execution stops, so every executed node carries at least one sample.
    pub final_snapshot: bool,
    pub max_steps: u64,
    pub max_depth: usize,
}

impl Default for CctConfig {
    fn default() -> Self {
        CctConfig {
            sample_period: 50,
            snapshot_cap: 8,
            final_snapshot: true,
            max_steps: 100_000,
            max_depth: 256,
        }
    }
}

struct CctBuilder<'p> {
    program: &'p Program,
    cfg: CctConfig,
    nodes: Vec<CctNode>,
    child_index: HashMap<(usize, usize, u32, u32), usize>,
    cursor: Vec<usize>,
    pending: Vec<Vec<(u64, i64)>>,
    executed: u64,
}

impl CctBuilder<'_> {
    fn snapshot(&mut self, seq: u64, state: &MachineState) {
        let node = *self.cursor.last().unwrap();
        let stored_values = std::mem::take(self.pending.last_mut().unwrap());
        let n = &mut self.nodes[node];
        if n.snapshots.len() < self.cfg.snapshot_cap {
            n.snapshots.push(Snapshot { seq, registers: state.registers, stored_values });
        }
    }
}

impl Observer for CctBuilder<'_> {
    fn on_event(&mut self, e: &TraceEvent, state: &MachineState) {
        if e.kind == EventKind::Store {
            self.pending.last_mut().unwrap().push((e.address, e.value));
        }
        self.executed += 1;
        if self.executed % self.cfg.sample_period == 0 {
            self.snapshot(e.seq, state);
        }
        match e.kind {
            EventKind::Call => {
                let parent = *self.cursor.last().unwrap();
                let callee = state.pc.proc;
                let key = (parent, callee, e.site.block, e.site.index);
                let id = match self.child_index.get(&key) {
                    Some(&id) => id,
                    None => {
                        let id = self.nodes.len();
                        let caller = self.nodes[parent].proc.clone();
                        self.nodes.push(CctNode {
                            id,
                            proc: self.program.procedures.get_index(callee).unwrap().0.clone(),
                            call_site: Some(CallSite {
                                proc: caller,
                                block: e.site.block,
                                index: e.site.index,
                            }),
                            parent: Some(parent),
                            children: Vec::new(),
                            snapshots: Vec::new(),
                        });
                        self.nodes[parent].children.push(id);
                        self.child_index.insert(key, id);
                        id
                    }
                };
                self.cursor.push(id);
                self.pending.push(Vec::new());
            }
            EventKind::Ret if self.cursor.len() > 1 => {
                if self.cfg.final_snapshot {
                    self.snapshot(e.seq, state);
                }
                self.cursor.pop();
                self.pending.pop();
            }
            _ => {}
        }
    }

    fn on_exit(&mut self, state: &MachineState, exit: Exit) {
        if self.cfg.final_snapshot && !matches!(exit, Exit::Fault(_)) {
            self.snapshot(self.executed, state);
        }
    }
}

/// Profiles one run into a calling context tree.
pub fn profile_cct(program: &Program, init_memory: &Memory, cfg: CctConfig) -> Result<Cct, GraphError> {
    assert!(cfg.sample_period >= 1, "sample_period must be positive");
    let root = CctNode {
        id: 0,
        proc: program.entry.clone(),
        call_site: None,
        parent: None,
        children: Vec::new(),
        snapshots: Vec::new(),
    };
    let mut b = CctBuilder {
        program,
        cfg,
        nodes: vec![root],
        child_index: HashMap::new(),
        cursor: vec![0],
        pending: vec![Vec::new()],
        executed: 0,
    };
    let vm_cfg = VmConfig { max_steps: cfg.max_steps, max_depth: cfg.max_depth, strict: false };
    let (_, exit) = vm::run(program, init_memory, vm_cfg, &mut b);
    if let Exit::Fault(Fault::StackOverflow { depth }) = exit {
        return Err(GraphError::StackOverflow { depth });
    }
    Ok(Cct { nodes: b.nodes, root: 0 })
}

fn bucket(prefix: char, v: i64) -> String {
    if v == 0 {
        format!("{prefix}0")
    } else {
        let mag = v.unsigned_abs();
        let sign = if v > 0 { '+' } else { '-' };
        format!("{prefix}{sign}{}", 63 - mag.leading_zeros())
    }
}

fn value_bucket(v: i64) -> String {
    bucket('V', v)
}

/// Stored values get their own prefix so a stored zero is not confused
/// with the zero register.
fn stored_bucket(v: i64) -> String {
    bucket('M', v)
}

fn address_bucket(a: u64) -> String {
    let x = a as u128 + 1;
    format!("A{}", 127 - x.leading_zeros())
}

/// Log-bucketed tokens: registers first (`V..`), then each stored address
/// (`A..`) and value (`M..`).
pub fn value_tokens(s: &Snapshot) -> Vec<String> {
    let mut out = Vec::with_capacity(NUM_REGS + 2 * s.stored_values.len());
    out.extend(s.registers.iter().map(|&v| value_bucket(v)));
    for &(a, v) in &s.stored_values {
        out.push(address_bucket(a));
        out.push(stored_bucket(v));
    }
    out
}

/// All value tokens of a CCT node, flattened across snapshots.
pub fn node_value_tokens(node: &CctNode) -> Vec<String> {
    node.snapshots.iter().flat_map(value_tokens).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfgNodeRecord {
    pub id: usize,
    /// Token texts per instruction.
    pub tokens: Vec<Vec<String>>,
}

/// Line-oriented serialization of one graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GraphRecord {
    Cfg {
        proc: String,
        nodes: Vec<CfgNodeRecord>,
        edges: Vec<(usize, usize, EdgeKind)>,
    },
    Cct {
        program: String,
        nodes: Vec<CctNode>,
        edges: Vec<(usize, usize, String)>,
    },
}

pub fn cfg_record(proc_: &Procedure, cfg: &Cfg, dialect: Dialect) -> GraphRecord {
    GraphRecord::Cfg {
        proc: cfg.proc.clone(),
        nodes: proc_
            .blocks
            .iter()
            .map(|b| CfgNodeRecord {
                id: b.id,
                tokens: b.instructions.iter().map(|i| token_texts(i, dialect)).collect(),
            })
            .collect(),
        edges: cfg.edges.clone(),
    }
}

pub fn cct_record(program_id: &str, cct: &Cct) -> GraphRecord {
    GraphRecord::Cct {
        program: program_id.to_string(),
        nodes: cct.nodes.clone(),
        edges: cct.edges().into_iter().map(|(a, b)| (a, b, "call".to_string())).collect(),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::isa::parse_program;
    use crate::vm::execute;
    use std::collections::BTreeSet;

    fn prog(text: &str) -> Program {
        parse_program(text, Dialect::DialectA).unwrap()
    }

    fn cfg_of(text: &str, name: &str) -> Cfg {
        build_cfg(&prog(text).procedures[name]).unwrap()
    }

    const DIAMOND: &str = ".entry set_i
proc set_i:
  ld r1, [r0+0]
  cmp lt, r1, 10
  brf else
  mov r2, 1
  jmp join
else:
  mov r2, 2
join:
  st [r0+8], r2
  ret
";

    #[test]
    fn straight_line_cfg() {
        let c = cfg_of("proc main:\n  mov r1, 1\n  ret\n", "main");
        assert_eq!((c.node_count, c.edges.len()), (1, 0));
        assert_eq!(adjacency(&c).ones(), 0);
    }

    #[test]
    fn diamond_cfg() {
        let c = cfg_of(DIAMOND, "set_i");
        assert_eq!(c.node_count, 4);
        assert_eq!(
            c.edges,
            vec![
                (0, 1, EdgeKind::BranchTrue),
                (0, 2, EdgeKind::BranchFalse),
                (1, 3, EdgeKind::Jump),
                (2, 3, EdgeKind::FallThrough),
            ]
        );
        let a = adjacency(&c);
        assert_eq!(a.ones(), 4);
        assert_eq!(c.out_degree(0), 2);
        assert_eq!(c.out_degree(3), 0);
    }

    #[test]
    fn loop_back_edge() {
        // hand-drawn: 0 -> 1 (fall), 1 -> 1 (true, back edge), 1 -> 2 (false)
        let c = cfg_of(
            "proc main:\n  mov r6, 3\nL:\n  sub r6, r6, 1\n  cmp gt, r6, 0\n  brt L\n  halt\n",
            "main",
        );
        assert_eq!(
            c.edges,
            vec![
                (0, 1, EdgeKind::FallThrough),
                (1, 1, EdgeKind::BranchTrue),
                (1, 2, EdgeKind::BranchFalse),
            ]
        );
        assert_eq!(adjacency(&c).get(1, 1), 1);
    }

    #[test]
    fn call_falls_through() {
        let c = cfg_of("proc main:\n  call f\n  halt\nproc f:\n  ret\n", "main");
        assert_eq!(c.edges, vec![(0, 1, EdgeKind::FallThrough)]);
    }

    /// Blocks 1..=3 against columns {2, 4} form the 3x2 rectangle
    /// ((1,1),(1,0),(1,1)).
    pub(crate) const RECTANGLE: &str = ".entry r
proc r:
  mov r1, 0
b1:
  cmp eq, r1, 1
  brt b4
b2:
  cmp gt, r1, 2
  brt b2
b3:
  cmp eq, r1, 0
  brt b2
b4:
  ret
";

    #[test]
    fn rectangle_fixture_pattern() {
        let a = adjacency(&cfg_of(RECTANGLE, "r"));
        let mut cells = Vec::new();
        for i in 1..=3 {
            for j in [2, 4] {
                cells.push(a.get(i, j));
            }
        }
        assert_eq!(cells, [1, 1, 1, 0, 1, 1]);
    }

    #[test]
    fn adjacency_rows_roundtrip() {
        let a = adjacency(&cfg_of(DIAMOND, "set_i"));
        assert_eq!(AdjMatrix::from_row_strings(&a.to_rows()), Some(a));
    }

    #[test]
    fn value_token_buckets() {
        assert_eq!(value_bucket(0), "V0");
        assert_eq!(value_bucket(5), "V+2");
        assert_eq!(value_bucket(7), "V+2");
        assert_eq!(value_bucket(-1), "V-0");
        assert_eq!(value_bucket(i64::MIN), "V-63");
        assert_eq!(value_bucket(i64::MAX), "V+62");
        assert_eq!(address_bucket(0), "A0");
        assert_eq!(address_bucket(u64::MAX), "A64");
        let s = Snapshot { seq: 0, registers: [0, 5, 0, 0, 0, 0, 0, 0], stored_values: vec![(3, 7)] };
        let t = value_tokens(&s);
        assert_eq!(t.len(), 10);
        assert_eq!(&t[8..], ["A2", "M+2"]);
        assert_eq!(stored_bucket(0), "M0");
    }

    #[test]
    fn value_vocabulary_is_bounded() {
        // every bucket the 64-bit range can produce
        let mut seen = BTreeSet::new();
        seen.insert(value_bucket(0));
        for k in 0..64 {
            let p = 1i128 << k;
            for v in [p, p * 2 - 1, -p, -(p * 2 - 1)] {
                if let Ok(v) = i64::try_from(v) {
                    seen.insert(value_bucket(v));
                }
            }
        }
        seen.insert(value_bucket(i64::MIN));
        assert!(seen.len() <= 130, "{} value tokens", seen.len());
        assert_eq!(seen.len(), 128);
    }

    const TWICE: &str = "proc main:
  call f
  mov r1, 1
  call f
  halt
proc f:
  st [r0+4], r1
  ld r2, [r0+4]
  ret
";

    #[test]
    fn repeated_call_site_merges() {
        let p = prog("proc main:\n  mov r6, 2\nL:\n  call f\n  sub r6, r6, 1\n  cmp gt, r6, 0\n  brt L\n  halt\nproc f:\n  st [r0+4], r6\n  ret\n");
        let cfg = CctConfig { sample_period: 1, ..CctConfig::default() };
        let cct = profile_cct(&p, &Memory::new(), cfg).unwrap();
        assert_eq!(cct.nodes.len(), 2);
        let f = &cct.nodes[1];
        let stored: Vec<_> = f.snapshots.iter().flat_map(|s| s.stored_values.clone()).collect();
        assert_eq!(stored, vec![(4, 2), (4, 1)]);

        // two textual call sites are distinct call paths
        let cct = profile_cct(&prog(TWICE), &Memory::new(), CctConfig::default()).unwrap();
        assert_eq!(cct.nodes.len(), 3);
        assert_eq!(cct.nodes_of("f"), vec![1, 2]);
    }

    #[test]
    fn distinct_paths_to_same_procedure() {
        let p = prog(
            "proc main:\n  call sub\n  call cmp\n  halt\nproc sub:\n  call cmp\n  ret\nproc cmp:\n  ret\n",
        );
        let cct = profile_cct(&p, &Memory::new(), CctConfig::default()).unwrap();
        assert_eq!(cct.nodes_of("cmp").len(), 2);
        assert_eq!(cct.nodes[cct.root].proc, "main");
        for n in &cct.nodes[1..] {
            let parent = n.parent.unwrap();
            assert!(cct.nodes[parent].children.contains(&n.id));
        }
    }

    #[test]
    fn long_period_gives_only_final_snapshot() {
        let cfg = CctConfig { sample_period: 1_000, ..CctConfig::default() };
        let cct = profile_cct(&prog(TWICE), &Memory::new(), cfg).unwrap();
        assert_eq!(cct.nodes[0].snapshots.len(), 1);
        assert!(cct.nodes.iter().all(|n| n.snapshots.len() <= 1));
        let cfg = CctConfig { final_snapshot: false, ..cfg };
        let cct = profile_cct(&prog(TWICE), &Memory::new(), cfg).unwrap();
        assert!(cct.nodes.iter().all(|n| n.snapshots.is_empty()));
    }

    #[test]
    fn snapshots_are_sound_and_deterministic() {
        let p = prog(TWICE);
        let cfg = CctConfig { sample_period: 2, ..CctConfig::default() };
        let a = profile_cct(&p, &Memory::new(), cfg).unwrap();
        let b = profile_cct(&p, &Memory::new(), cfg).unwrap();
        assert_eq!(a, b);
        let trace = execute(&p, &Memory::new(), 1_000).trace;
        for n in &a.nodes {
            for s in &n.snapshots {
                for &(addr, v) in &s.stored_values {
                    assert!(trace.events.iter().any(|e| e.kind == EventKind::Store
                        && e.address == addr
                        && e.value == v
                        && trace.proc_name(e.site.proc) == n.proc));
                }
            }
        }
    }

    #[test]
    fn stack_overflow_is_an_error() {
        let p = prog("proc main:\n  call main\n  halt\n");
        let err = profile_cct(&p, &Memory::new(), CctConfig::default()).unwrap_err();
        assert!(matches!(err, GraphError::StackOverflow { .. }));
    }

    #[test]
    fn graph_records_serialize_with_kind_tag() {
        let p = prog(DIAMOND);
        let pr = &p.procedures["set_i"];
        let rec = cfg_record(pr, &build_cfg(pr).unwrap(), Dialect::DialectA);
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.starts_with(r#"{"kind":"cfg","proc":"set_i","nodes":[{"id":0,"tokens":[["ld","r1","r0","+","0"]"#));
        let back: GraphRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
    }
}
