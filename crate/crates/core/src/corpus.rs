//! Random MiniASM programs with controlled dead-store injection, and the
//! assembly of labelled, class-balanced dataset splits.
//!
//! Generated code keeps three conventions that make labels exact:
//! `r0` is never written and serves as the base of every memory operand;
//! every store outside an injected motif is loaded again before its block
//! ends; and every procedure runs at most once per call site, with no call
//! inside a loop. A procedure is therefore labelled 1 exactly when it carries
//! a motif and actually runs under the profiling input.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CctGraph, CctNodeRecord, CfgGraph, ClassCounts, DatasetSplit, Manifest, SampleRecord};
use crate::graph::{adjacency, build_cfg, profile_cct, value_tokens, CctConfig, GraphError};
use crate::isa::{
    format_instruction, parse_program, token_texts, Dialect, Instruction, Opcode, Operand, ParseError, Program, Reg,
    Relation,
};
use crate::vm::{label_procedures, Memory, Run};

/// Bumped whenever generated programs or record layout change.
pub const GENERATOR_REVISION: &str = "graphspy-gen-3";

pub const INPUT_WORDS: u64 = 64;
const SLOT_BASE: u64 = 64;
const SLOT_STRIDE: u64 = 16;
const GLOBAL_BASE: u64 = 1024;
pub const MAX_STEPS: u64 = 20_000;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("could not fill {tag} {role} to {target} per class after {programs} programs")]
    GenerationBudgetExceeded { tag: String, role: String, target: usize, programs: usize },
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("invalid generator config: {0}")]
    BadConfig(String),
    #[error("generated program failed to parse: {0}")]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("label mismatch for {program}/{procedure}: record {record}, oracle {oracle}")]
    LabelMismatch { program: String, procedure: String, record: u8, oracle: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptLevel {
    Opt0,
    Opt1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Motif {
    /// Two stores to one address inside a block, no load between.
    IntraBlock,
    /// Store, branch whose arms only touch registers, store again at the join.
    CrossBlock,
    /// Callee stores a global that its caller overwrites after the call.
    InterProcedural,
}

impl Motif {
    pub const ALL: [Motif; 3] = [Motif::IntraBlock, Motif::CrossBlock, Motif::InterProcedural];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    /// Procedures per program, inclusive.
    pub procedures: (usize, usize),
    /// Control-flow regions per procedure between prologue and epilogue.
    pub blocks: (usize, usize),
    /// Instructions per block body, inclusive.
    pub instructions: (usize, usize),
    /// Chance that a procedure gets a second call site.
    pub call_density: f64,
    /// Chance that a call runs only when an input word passes a test.
    pub guard_probability: f64,
    pub loop_probability: f64,
    pub dead_store_injection: f64,
    pub motifs: Vec<Motif>,
    pub dialect: Dialect,
    pub opt_level: OptLevel,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            procedures: (3, 4),
            blocks: (1, 2),
            instructions: (1, 3),
            call_density: 0.15,
            guard_probability: 0.5,
            loop_probability: 0.3,
            dead_store_injection: 0.6,
            motifs: Motif::ALL.to_vec(),
            dialect: Dialect::DialectA,
            opt_level: OptLevel::Opt0,
        }
    }
}

impl GenConfig {
    pub fn tag(&self) -> String {
        let o = match self.opt_level {
            OptLevel::Opt0 => "Opt0",
            OptLevel::Opt1 => "Opt1",
        };
        format!("{}-{o}", self.dialect.tag())
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let ranges = [("procedures", self.procedures), ("blocks", self.blocks), ("instructions", self.instructions)];
        for (name, (lo, hi)) in ranges {
            if lo > hi || (name == "procedures" && lo == 0) {
                return Err(CorpusError::BadConfig(format!("{name} range {lo}..={hi}")));
            }
        }
        let probs = [
            ("call_density", self.call_density),
            ("guard_probability", self.guard_probability),
            ("loop_probability", self.loop_probability),
            ("dead_store_injection", self.dead_store_injection),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(CorpusError::BadConfig(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }

    /// The four standard configurations: dialects A/B at Opt0/Opt1.
    pub fn standard_four() -> Vec<GenConfig> {
        let mut out = Vec::new();
        for dialect in [Dialect::DialectA, Dialect::DialectB] {
            for opt_level in [OptLevel::Opt0, OptLevel::Opt1] {
                out.push(GenConfig { dialect, opt_level, ..GenConfig::default() });
            }
        }
        out
    }
}

/// Version string written into manifests.
pub fn generator_version() -> String {
    // FNV-1a over the revision string; stable across builds and platforms
    let mut h: u64 = 0xcbf29ce484222325;
    for b in GENERATOR_REVISION.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{GENERATOR_REVISION}+{h:016x}")
}

fn mix(seed: u64, index: u64, stream: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = seed ^ index.wrapping_mul(0x9e3779b97f4a7c15) ^ stream.wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Random nonzero input words at addresses `0..64`.
pub fn random_inputs(seed: u64) -> Memory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..INPUT_WORDS)
        .map(|a| {
            let v = rng.gen_range(1..=100);
            (a, if rng.gen_bool(0.5) { -v } else { v })
        })
        .collect()
}

fn r(i: u8) -> Operand {
    Operand::Reg(Reg(i))
}

fn mem(addr: u64) -> Operand {
    Operand::Mem { base: Reg(0), offset: addr as i64 }
}

fn imm(v: i64) -> Operand {
    Operand::Imm(v)
}

fn ins(op: Opcode, operands: Vec<Operand>) -> Instruction {
    Instruction::new(op, operands)
}

#[derive(Debug, Clone, Default)]
struct GBlock {
    label: Option<String>,
    body: Vec<Instruction>,
    term: Option<Instruction>,
    /// Length of the loop body proper, for self-looping blocks.
    loop_ops: Option<usize>,
}

struct ProcPlan {
    name: String,
    motif: Option<Motif>,
    /// Callees with a guard flag, in call order.
    calls: Vec<(usize, bool)>,
}

struct ProcGen<'a> {
    rng: &'a mut ChaCha8Rng,
    cfg: &'a GenConfig,
    slots: (u64, u64),
    blocks: Vec<GBlock>,
    labels: usize,
}

impl ProcGen<'_> {
    fn label(&mut self) -> String {
        self.labels += 1;
        format!("L{}", self.labels)
    }

    fn work_reg(&mut self) -> u8 {
        self.rng.gen_range(1..=5)
    }

    /// Immediate zero is reserved for the initialisation idiom, so other
    /// constants and input addresses avoid it.
    fn nonzero(&mut self, bound: i64) -> i64 {
        let v = self.rng.gen_range(1..=bound);
        if self.rng.gen_bool(0.5) {
            -v
        } else {
            v
        }
    }

    fn input_addr(&mut self) -> u64 {
        self.rng.gen_range(1..INPUT_WORDS)
    }

    fn body_len(&mut self) -> usize {
        self.rng.gen_range(self.cfg.instructions.0..=self.cfg.instructions.1)
    }

    /// Straight-line code in which every store is reloaded before the end.
    fn ops(&mut self, n: usize) -> Vec<Instruction> {
        let mut out = Vec::new();
        let mut pending: Vec<u64> = Vec::new();
        for _ in 0..n {
            let roll = self.rng.gen_range(0..10);
            let x = self.work_reg();
            match roll {
                0..=1 => out.push(ins(Opcode::Ld, vec![r(x), mem(self.input_addr())])),
                2..=4 => {
                    let op = *[Opcode::Add, Opcode::Sub, Opcode::Mul].choose(self.rng).unwrap();
                    let y = self.work_reg();
                    let src = if self.rng.gen_bool(0.5) { r(self.work_reg()) } else { imm(self.nonzero(8)) };
                    out.push(ins(op, vec![r(x), r(y), src]));
                }
                5 => out.push(ins(Opcode::Mov, vec![r(x), imm(self.rng.gen_range(1..=100))])),
                6..=7 => {
                    let free: Vec<u64> = (self.slots.0..self.slots.1).filter(|a| !pending.contains(a)).collect();
                    if let Some(&a) = free.choose(self.rng) {
                        out.push(ins(Opcode::St, vec![mem(a), r(x)]));
                        pending.push(a);
                    }
                }
                _ => {
                    if !pending.is_empty() {
                        let a = pending.remove(self.rng.gen_range(0..pending.len()));
                        out.push(ins(Opcode::Ld, vec![r(x), mem(a)]));
                    }
                }
            }
        }
        for a in pending {
            let x = self.work_reg();
            out.push(ins(Opcode::Ld, vec![r(x), mem(a)]));
        }
        out
    }

    /// Arithmetic and input loads only.
    fn register_ops(&mut self, n: usize) -> Vec<Instruction> {
        self.register_ops_avoiding(n, 0)
    }

    /// Register-only code that neither reads nor writes `avoid`.
    fn register_ops_avoiding(&mut self, n: usize, avoid: u8) -> Vec<Instruction> {
        let pick = |g: &mut Self| loop {
            let x = g.work_reg();
            if x != avoid {
                return x;
            }
        };
        (0..n)
            .map(|_| {
                let x = pick(self);
                if self.rng.gen_bool(0.25) {
                    ins(Opcode::Ld, vec![r(x), mem(self.input_addr())])
                } else {
                    let y = pick(self);
                    ins(Opcode::Add, vec![r(x), r(y), imm(self.nonzero(8))])
                }
            })
            .collect()
    }

    /// `mov x, 0; st [a], x`: the redundant-initialisation idiom every
    /// injected dead store starts with. Base code never moves 0.
    fn zero_init(&mut self, a: u64, x: u8) -> Vec<Instruction> {
        vec![ins(Opcode::Mov, vec![r(x), imm(0)]), ins(Opcode::St, vec![mem(a), r(x)])]
    }

    fn fresh_slot(&mut self) -> u64 {
        self.rng.gen_range(self.slots.0..self.slots.1)
    }

    fn cond(&mut self) -> Instruction {
        let rel = *Relation::ALL.choose(self.rng).unwrap();
        let x = self.work_reg();
        ins(Opcode::CmpFlag, vec![Operand::Rel(rel), r(x), imm(self.nonzero(20))])
    }

    fn push(&mut self, label: Option<String>, body: Vec<Instruction>, term: Option<Instruction>) -> usize {
        self.blocks.push(GBlock { label, body, term, loop_ops: None });
        self.blocks.len() - 1
    }

    fn straight(&mut self, label: Option<String>) -> usize {
        let n = self.body_len();
        let body = self.ops(n);
        self.push(label, body, None)
    }

    /// Stores the motif address, then kills it later in the same block.
    fn intra_block_motif(&mut self, block: usize) {
        let a = self.fresh_slot();
        let x = self.work_reg();
        let y = loop {
            let y = self.work_reg();
            if y != x {
                break y;
            }
        };
        // x stays untouched until the final reload, so once the first store
        // goes the zeroing `mov` is dead too
        let mut m = self.zero_init(a, x);
        let k = self.rng.gen_range(0..=2);
        m.extend(self.register_ops_avoiding(k, x));
        m.push(ins(Opcode::St, vec![mem(a), r(y)]));
        m.extend(self.register_ops_avoiding(1, x));
        m.push(ins(Opcode::Ld, vec![r(x), mem(a)]));
        // place after the block's own (balanced) code
        self.blocks[block].body.extend(m);
    }

    fn diamond(&mut self, label: Option<String>, motif_addr: Option<u64>) {
        let n = self.body_len();
        let mut head = self.ops(n);
        if let Some(a) = motif_addr {
            let x = self.work_reg();
            head.extend(self.zero_init(a, x));
        }
        head.push(self.cond());
        let (l_else, l_join) = (self.label(), self.label());
        self.push(label, head, Some(ins(Opcode::BrFalse, vec![Operand::Label(l_else.clone())])));
        let arms_plain = motif_addr.is_some();
        let then_n = self.body_len();
        let then_body = if arms_plain { self.register_ops(then_n) } else { self.ops(then_n) };
        self.push(None, then_body, Some(ins(Opcode::Jmp, vec![Operand::Label(l_join.clone())])));
        let else_n = self.body_len();
        let else_body = if arms_plain { self.register_ops(else_n) } else { self.ops(else_n) };
        self.push(Some(l_else), else_body, None);
        let n = self.body_len();
        let mut join = Vec::new();
        if let Some(a) = motif_addr {
            let (y, z) = (self.work_reg(), self.work_reg());
            join.push(ins(Opcode::St, vec![mem(a), r(y)]));
            join.extend(self.ops(n));
            join.push(ins(Opcode::Ld, vec![r(z), mem(a)]));
        } else {
            join = self.ops(n);
        }
        self.push(Some(l_join), join, None);
    }

    fn if_then(&mut self, label: Option<String>) {
        let n = self.body_len();
        let mut head = self.ops(n);
        head.push(self.cond());
        let l_join = self.label();
        self.push(label, head, Some(ins(Opcode::BrFalse, vec![Operand::Label(l_join.clone())])));
        self.straight(None);
        self.straight(Some(l_join));
    }

    fn with_loop(&mut self, label: Option<String>) {
        let pre = self.straight(label);
        let trips = 2 * self.rng.gen_range(1..=3);
        self.blocks[pre].body.push(ins(Opcode::Mov, vec![r(6), imm(trips)]));
        let l = self.label();
        let n = self.body_len();
        let mut body = self.ops(n);
        let loop_ops = body.len();
        body.push(ins(Opcode::Sub, vec![r(6), r(6), imm(1)]));
        body.push(ins(Opcode::CmpFlag, vec![Operand::Rel(Relation::Ge), r(6), imm(1)]));
        let term = ins(Opcode::BrTrue, vec![Operand::Label(l.clone())]);
        self.blocks.push(GBlock { label: Some(l), body, term: Some(term), loop_ops: Some(loop_ops) });
    }

    /// A call, optionally guarded by an input test, followed by a join block
    /// that overwrites `kills` (globals stored by the callee) and reloads
    /// them.
    fn call(&mut self, callee: &str, guarded: bool, kills: &[u64]) {
        let mut join_label = None;
        if guarded {
            let l_skip = self.label();
            let body = vec![
                ins(Opcode::Ld, vec![r(7), mem(self.input_addr())]),
                ins(Opcode::CmpFlag, vec![Operand::Rel(Relation::Gt), r(7), imm(self.nonzero(50))]),
            ];
            self.push(None, body, Some(ins(Opcode::BrFalse, vec![Operand::Label(l_skip.clone())])));
            join_label = Some(l_skip);
        }
        let n = self.rng.gen_range(0..=2);
        let body = self.register_ops(n);
        self.push(None, body, Some(ins(Opcode::Call, vec![Operand::Proc(callee.to_string())])));
        let mut join = Vec::new();
        for &g in kills {
            let x = self.work_reg();
            join.push(ins(Opcode::St, vec![mem(g), r(x)]));
        }
        let n = self.body_len();
        join.extend(self.ops(n));
        for &g in kills {
            let x = self.work_reg();
            join.push(ins(Opcode::Ld, vec![r(x), mem(g)]));
        }
        self.push(join_label, join, None);
    }
}

fn global_of(proc_index: usize) -> u64 {
    GLOBAL_BASE + 8 * proc_index as u64
}

fn build_proc(rng: &mut ChaCha8Rng, cfg: &GenConfig, plans: &[ProcPlan], idx: usize) -> Vec<GBlock> {
    let plan = &plans[idx];
    let slot0 = SLOT_BASE + SLOT_STRIDE * idx as u64;
    let mut g = ProcGen { rng, cfg, slots: (slot0, slot0 + 8), blocks: Vec::new(), labels: 0 };

    let prologue = g.straight(None);
    if idx == 0 {
        // working registers start from input words rather than zero
        let seed: Vec<Instruction> = (1..=5).map(|x| ins(Opcode::Ld, vec![r(x), mem(g.input_addr())])).collect();
        g.blocks[prologue].body.splice(0..0, seed);
    }
    if plan.motif == Some(Motif::InterProcedural) {
        let x = g.work_reg();
        let init = g.zero_init(global_of(idx), x);
        g.blocks[prologue].body.extend(init);
    }

    #[derive(Clone, Copy)]
    enum Region {
        Plain,
        Call(usize, bool),
        MotifDiamond,
    }
    let mut regions: Vec<Region> = (0..g.rng.gen_range(cfg.blocks.0..=cfg.blocks.1)).map(|_| Region::Plain).collect();
    for &(callee, guarded) in &plan.calls {
        let at = g.rng.gen_range(0..=regions.len());
        regions.insert(at, Region::Call(callee, guarded));
    }
    if plan.motif == Some(Motif::CrossBlock) {
        let at = g.rng.gen_range(0..=regions.len());
        regions.insert(at, Region::MotifDiamond);
    }

    let mut straight_blocks = vec![prologue];
    for region in regions {
        let label = None;
        match region {
            Region::Plain => {
                let roll: f64 = g.rng.gen();
                if roll < cfg.loop_probability {
                    g.with_loop(label);
                } else if roll < cfg.loop_probability + (1.0 - cfg.loop_probability) * 0.4 {
                    g.diamond(label, None);
                } else if roll < cfg.loop_probability + (1.0 - cfg.loop_probability) * 0.7 {
                    g.if_then(label);
                } else {
                    straight_blocks.push(g.straight(label));
                }
            }
            Region::Call(callee, guarded) => {
                let kills: Vec<u64> =
                    (plans[callee].motif == Some(Motif::InterProcedural)).then(|| global_of(callee)).into_iter().collect();
                g.call(&plans[callee].name, guarded, &kills);
            }
            Region::MotifDiamond => {
                let a = g.fresh_slot();
                g.diamond(label, Some(a));
            }
        }
    }
    let n = g.body_len();
    let body = g.ops(n);
    let end = if idx == 0 { Opcode::Halt } else { Opcode::Ret };
    let epilogue = g.push(None, body, Some(ins(end, vec![])));
    straight_blocks.push(epilogue);

    if plan.motif == Some(Motif::IntraBlock) {
        let b = *straight_blocks.choose(g.rng).unwrap();
        g.intra_block_motif(b);
    }
    g.blocks
}

fn same_addr(o: &Operand, addr: &Operand) -> bool {
    o == addr
}

/// Removes stores overwritten later in the same block with no load between.
fn eliminate_local_dead_stores(body: &mut Vec<Instruction>) {
    let mut i = 0;
    while i < body.len() {
        if body[i].opcode == Opcode::St {
            let a = body[i].operands[0].clone();
            let mut dead = false;
            for later in &body[i + 1..] {
                match later.opcode {
                    Opcode::Ld if same_addr(&later.operands[1], &a) => break,
                    Opcode::St if same_addr(&later.operands[0], &a) => {
                        dead = true;
                        break;
                    }
                    _ => {}
                }
            }
            if dead {
                body.remove(i);
                continue;
            }
        }
        i += 1;
    }
}

fn reads(i: &Instruction, reg: Reg) -> bool {
    let skip = match i.opcode {
        Opcode::Mov | Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Ld => 1,
        _ => 0,
    };
    i.operands[skip..].iter().any(|o| match o {
        Operand::Reg(r) => *r == reg,
        Operand::Mem { base, .. } => *base == reg,
        _ => false,
    })
}

fn written(i: &Instruction) -> Option<Reg> {
    match (i.opcode, i.operands.first()) {
        (Opcode::Mov | Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::Ld, Some(Operand::Reg(r))) => Some(*r),
        _ => None,
    }
}

/// Drops register-only writes overwritten later in the block before any
/// read.
fn eliminate_dead_register_writes(body: &mut Vec<Instruction>) {
    let mut i = 0;
    while i < body.len() {
        let pure = matches!(body[i].opcode, Opcode::Mov | Opcode::Add | Opcode::Sub | Opcode::Mul);
        if let (true, Some(dst)) = (pure, written(&body[i])) {
            let mut dead = false;
            for later in &body[i + 1..] {
                if reads(later, dst) {
                    break;
                }
                if written(later) == Some(dst) {
                    dead = true;
                    break;
                }
            }
            if dead {
                body.remove(i);
                continue;
            }
        }
        i += 1;
    }
}

/// Duplicates the body of each even-trip self loop and halves its trips.
fn unroll_loops(blocks: &mut [GBlock]) {
    for b in blocks.iter_mut() {
        if let Some(k) = b.loop_ops {
            let ops: Vec<Instruction> = b.body[..k].to_vec();
            let dec = b.body[k].clone();
            let cmp = b.body[k + 1].clone();
            let mut body = ops.clone();
            body.push(dec.clone());
            body.extend(ops);
            body.push(dec);
            body.push(cmp);
            b.loop_ops = None;
            b.body = body;
        }
    }
}

fn render(plans: &[ProcPlan], procs: &[Vec<GBlock>], dialect: Dialect) -> String {
    let mut out = String::new();
    for (plan, blocks) in plans.iter().zip(procs) {
        out.push_str(&format!("proc {}:\n", plan.name));
        for b in blocks {
            if let Some(l) = &b.label {
                out.push_str(&format!("{l}:\n"));
            }
            for i in b.body.iter().chain(&b.term) {
                out.push_str("  ");
                out.push_str(&format_instruction(i, dialect));
                out.push('\n');
            }
        }
    }
    out
}

/// Generates one program in `cfg.dialect`. Total: every seed yields a
/// well-formed program.
pub fn generate_program(cfg: &GenConfig) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = rng.gen_range(cfg.procedures.0..=cfg.procedures.1).max(1);
    let mut plans: Vec<ProcPlan> = (0..n)
        .map(|i| ProcPlan { name: if i == 0 { "main".into() } else { format!("f{i}") }, motif: None, calls: vec![] })
        .collect();
    for i in 1..n {
        let parent = rng.gen_range(0..i);
        let guarded = rng.gen_bool(cfg.guard_probability);
        plans[parent].calls.push((i, guarded));
        if i >= 2 && rng.gen_bool(cfg.call_density) {
            let other = rng.gen_range(0..i);
            if other != parent {
                let guarded = rng.gen_bool(cfg.guard_probability);
                plans[other].calls.push((i, guarded));
            }
        }
    }
    for (i, plan) in plans.iter_mut().enumerate() {
        if rng.gen_bool(cfg.dead_store_injection) {
            let allowed: Vec<Motif> =
                cfg.motifs.iter().copied().filter(|&m| i > 0 || m != Motif::InterProcedural).collect();
            plan.motif = allowed.choose(&mut rng).copied();
        }
    }
    let mut procs: Vec<Vec<GBlock>> = (0..n).map(|i| build_proc(&mut rng, cfg, &plans, i)).collect();
    if cfg.opt_level == OptLevel::Opt1 {
        for blocks in &mut procs {
            unroll_loops(blocks);
            for b in blocks.iter_mut() {
                eliminate_local_dead_stores(&mut b.body);
                eliminate_dead_register_writes(&mut b.body);
            }
        }
    }
    render(&plans, &procs, cfg.dialect)
}

/// Labels, profiles and featurizes every procedure of `program`.
pub fn featurize_program(
    program: &Program,
    program_id: &str,
    config: &str,
    inputs: &Memory,
    text: &str,
) -> Result<Vec<SampleRecord>, CorpusError> {
    let labels = label_procedures(program, &[Run { init_memory: inputs.clone(), max_steps: MAX_STEPS }]);
    let cct = profile_cct(program, inputs, CctConfig { max_steps: MAX_STEPS, ..CctConfig::default() })?;
    let cct_graph = CctGraph {
        nodes: cct
            .nodes
            .iter()
            .map(|n| CctNodeRecord { proc: n.proc.clone(), snapshots: n.snapshots.iter().map(value_tokens).collect() })
            .collect(),
        edges: cct.edges(),
    };
    let input_list: Vec<(u64, i64)> = inputs.iter().map(|(&a, &v)| (a, v)).collect();
    let mut out = Vec::new();
    for (name, p) in &program.procedures {
        let cfg = build_cfg(p)?;
        let blocks =
            p.blocks.iter().map(|b| b.instructions.iter().map(|i| token_texts(i, program.dialect)).collect()).collect();
        out.push(SampleRecord {
            program_id: program_id.to_string(),
            procedure: name.clone(),
            config: config.to_string(),
            adjacency: adjacency(&cfg).to_rows(),
            cfg: CfgGraph { blocks, edges: cfg.edges },
            cct: cct_graph.clone(),
            label: labels.labels.get(name).copied().unwrap_or(0),
            exercised: !labels.unexercised.contains(name),
            cost: labels.cost.get(name).copied().unwrap_or(0),
            program: text.to_string(),
            inputs: input_list.clone(),
        });
    }
    Ok(out)
}

/// Re-runs the oracle on a record's program and input.
pub fn relabel(record: &SampleRecord, dialect: Dialect) -> Result<u8, CorpusError> {
    let program = parse_program(&record.program, dialect)?;
    let inputs: Memory = record.inputs.iter().copied().collect();
    let labels = label_procedures(&program, &[Run { init_memory: inputs, max_steps: MAX_STEPS }]);
    Ok(labels.labels.get(&record.procedure).copied().unwrap_or(0))
}

pub fn dialect_of_tag(tag: &str) -> Option<Dialect> {
    match tag.split('-').next()? {
        "A" => Some(Dialect::DialectA),
        "B" => Some(Dialect::DialectB),
        _ => None,
    }
}

fn split_targets(total: usize, ratios: [f64; 3]) -> [usize; 3] {
    let train = (total as f64 * ratios[0]).round() as usize;
    let val = (total as f64 * ratios[1]).round() as usize;
    [train, val, total.saturating_sub(train + val)]
}

fn check_ratios(ratios: [f64; 3]) -> Result<(), CorpusError> {
    if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(ratios));
    }
    Ok(())
}

/// Role of program `index`: 0 train, 1 val, 2 test. Depends only on the
/// seed and index, so a program keeps its role in every configuration.
pub fn program_role(seed: u64, index: u64, ratios: [f64; 3]) -> usize {
    let u = (mix(seed, index, 7) >> 11) as f64 / (1u64 << 53) as f64;
    if u < ratios[0] {
        0
    } else if u < ratios[0] + ratios[1] {
        1
    } else {
        2
    }
}

pub fn program_id(index: u64) -> String {
    format!("p{index:06}")
}

/// Generates, labels and rebalances one configuration's splits.
pub fn build_config(cfg: &GenConfig, samples: usize, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit, CorpusError> {
    cfg.validate()?;
    check_ratios(ratios)?;
    let tag = cfg.tag();
    let targets = split_targets(samples, ratios);
    // per role: [negatives wanted, positives wanted]
    let mut need: Vec<[usize; 2]> = targets.iter().map(|&t| [t - t / 2, t / 2]).collect();
    let mut roles: [Vec<SampleRecord>; 3] = Default::default();
    let budget = 40 * samples + 1000;
    let mut generated = 0usize;
    let mut index = 0u64;
    while need.iter().any(|n| n[0] + n[1] > 0) {
        if generated >= budget || index as usize >= 20 * budget {
            let role = need.iter().position(|n| n[0] + n[1] > 0).unwrap();
            return Err(CorpusError::GenerationBudgetExceeded {
                tag,
                role: ["train", "val", "test"][role].into(),
                target: targets[role] / 2,
                programs: generated,
            });
        }
        let role = program_role(seed, index, ratios);
        let id = index;
        index += 1;
        if need[role][0] + need[role][1] == 0 {
            continue;
        }
        generated += 1;
        let text = generate_program(&GenConfig { seed: mix(seed, id, 1), ..cfg.clone() });
        let program = parse_program(&text, cfg.dialect)?;
        let inputs = random_inputs(mix(seed, id, 2));
        for s in featurize_program(&program, &program_id(id), &tag, &inputs, &text)? {
            let c = s.label as usize;
            if need[role][c] > 0 {
                need[role][c] -= 1;
                roles[role].push(s);
            }
        }
    }
    // spot-check one record in twenty against a fresh oracle run
    for s in roles.iter().flatten().step_by(20) {
        let oracle = relabel(s, cfg.dialect)?;
        if oracle != s.label {
            return Err(CorpusError::LabelMismatch {
                program: s.program_id.clone(),
                procedure: s.procedure.clone(),
                record: s.label,
                oracle,
            });
        }
    }
    let [train, val, test] = roles;
    let manifest = Manifest {
        tag: tag.clone(),
        seed,
        generator_version: generator_version(),
        ratios,
        train: ClassCounts::of(&train),
        val: ClassCounts::of(&val),
        test: ClassCounts::of(&test),
        programs_generated: generated,
    };
    Ok(DatasetSplit { tag, train, val, test, manifest })
}

pub fn build_dataset(
    configs: &[GenConfig],
    samples_per_config: usize,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Vec<DatasetSplit>, CorpusError> {
    configs.iter().map(|c| build_config(c, samples_per_config, ratios, seed)).collect()
}

/// Pools the splits role by role and shuffles each pooled role.
pub fn mix_hybrid(splits: &[DatasetSplit], seed: u64) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0, 3));
    let mut pool = |pick: fn(&DatasetSplit) -> &Vec<SampleRecord>| {
        let mut v: Vec<SampleRecord> = splits.iter().flat_map(|s| pick(s).iter().cloned()).collect();
        v.shuffle(&mut rng);
        v
    };
    let train = pool(|s| &s.train);
    let val = pool(|s| &s.val);
    let test = pool(|s| &s.test);
    let manifest = Manifest {
        tag: "Hybrid".into(),
        seed,
        generator_version: generator_version(),
        ratios: splits.first().map(|s| s.manifest.ratios).unwrap_or([0.4, 0.3, 0.3]),
        train: ClassCounts::of(&train),
        val: ClassCounts::of(&val),
        test: ClassCounts::of(&test),
        programs_generated: splits.iter().map(|s| s.manifest.programs_generated).sum(),
    };
    DatasetSplit { tag: "Hybrid".into(), train, val, test, manifest }
}

/// Procedures that executed under the profiling input, per program.
pub fn exercised_by_program(samples: &[SampleRecord]) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.exercised) {
        out.entry(s.program_id.clone()).or_default().insert(s.procedure.clone());
    }
    out
}
