//! Deterministic MiniASM interpreter and the shadow-memory dead store oracle.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::isa::{Opcode, Operand, Program, NUM_REGS};

pub type Memory = BTreeMap<u64, i64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub proc: u32,
    pub block: u32,
    pub index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Load,
    Store,
    Call,
    Ret,
    Exec,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Load => "Load",
            EventKind::Store => "Store",
            EventKind::Call => "Call",
            EventKind::Ret => "Ret",
            EventKind::Exec => "Exec",
        }
    }

    pub fn is_memory(self) -> bool {
        matches!(self, EventKind::Load | EventKind::Store)
    }
}

/// One executed instruction instance. `address`/`value` are meaningful for
/// Load and Store only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub address: u64,
    pub value: i64,
    pub site: Site,
    /// Call path id; 0 is the entry procedure's path.
    pub context: u32,
}

impl TraceEvent {
    pub fn load(seq: u64, address: u64, site: Site) -> TraceEvent {
        TraceEvent { seq, kind: EventKind::Load, address, value: 0, site, context: 0 }
    }

    pub fn store(seq: u64, address: u64, value: i64, site: Site) -> TraceEvent {
        TraceEvent { seq, kind: EventKind::Store, address, value, site, context: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trace {
    /// Procedure names indexed by `Site::proc`.
    pub procs: Vec<String>,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    /// Tab-separated dump, one event per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let (addr, value) = if e.kind.is_memory() {
                (e.address.to_string(), e.value.to_string())
            } else {
                ("-".to_string(), "-".to_string())
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.seq,
                e.kind.name(),
                addr,
                value,
                self.proc_name(e.site.proc),
                e.site.block,
                e.site.index,
                e.context
            );
        }
        out
    }

    pub fn proc_name(&self, idx: u32) -> &str {
        self.procs.get(idx as usize).map(String::as_str).unwrap_or("?")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pc {
    pub proc: usize,
    pub block: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub return_to: Pc,
    pub frame_id: u64,
    pub context: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineState {
    pub registers: [i64; NUM_REGS],
    pub flag: bool,
    pub memory: Memory,
    pub pc: Pc,
    pub call_stack: Vec<Frame>,
    pub frame_id: u64,
    pub context: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fault {
    UnwrittenRead { address: u64 },
    StackOverflow { depth: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Exit {
    Halted,
    StepLimit,
    Fault(Fault),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VmConfig {
    pub max_steps: u64,
    pub max_depth: usize,
    /// Fault on reads of never-written addresses instead of reading 0.
    pub strict: bool,
}

impl VmConfig {
    pub fn new(max_steps: u64) -> VmConfig {
        VmConfig { max_steps, max_depth: 256, strict: false }
    }
}

/// Receives every event as it is executed, with the state after it.
pub trait Observer {
    fn on_event(&mut self, event: &TraceEvent, state: &MachineState);
    /// Called once when execution stops.
    fn on_exit(&mut self, _state: &MachineState, _exit: Exit) {}
}

#[derive(Default)]
pub struct TraceRecorder {
    pub events: Vec<TraceEvent>,
}

impl Observer for TraceRecorder {
    fn on_event(&mut self, event: &TraceEvent, _state: &MachineState) {
        self.events.push(*event);
    }
}

/// Call-path interning shared by the trace context ids and the CCT.
#[derive(Default)]
struct Contexts {
    ids: HashMap<(u32, Site), u32>,
}

impl Contexts {
    fn child(&mut self, parent: u32, site: Site) -> u32 {
        let next = self.ids.len() as u32 + 1;
        *self.ids.entry((parent, site)).or_insert(next)
    }
}

/// Runs `program` from its entry procedure, streaming events to `observer`.
pub fn run<O: Observer>(
    program: &Program,
    init_memory: &Memory,
    config: VmConfig,
    observer: &mut O,
) -> (MachineState, Exit) {
    let entry = program.proc_index(&program.entry).expect("validated program has its entry");
    let procs: Vec<_> = program.procedures.values().collect();
    let mut state = MachineState {
        registers: [0; NUM_REGS],
        flag: false,
        memory: init_memory.clone(),
        pc: Pc { proc: entry, block: 0, index: 0 },
        call_stack: Vec::new(),
        frame_id: 0,
        context: 0,
    };
    let mut written: BTreeSet<u64> = init_memory.keys().copied().collect();
    let mut contexts = Contexts::default();
    let mut next_frame = 1u64;
    let mut seq = 0u64;

    let exit = loop {
        if seq >= config.max_steps {
            break Exit::StepLimit;
        }
        let pc = state.pc;
        let proc_ = procs[pc.proc];
        let ins = &proc_.blocks[pc.block].instructions[pc.index];
        let site = Site { proc: pc.proc as u32, block: pc.block as u32, index: pc.index as u32 };
        let mut event = TraceEvent {
            seq,
            kind: EventKind::Exec,
            address: 0,
            value: 0,
            site,
            context: state.context,
        };
        seq += 1;

        let read = |s: &MachineState, o: &Operand| -> i64 {
            match o {
                Operand::Reg(r) => s.registers[r.0 as usize],
                Operand::Imm(v) => *v,
                _ => unreachable!("validated source operand"),
            }
        };
        let reg = |o: &Operand| -> usize {
            match o {
                Operand::Reg(r) => r.0 as usize,
                _ => unreachable!("validated register operand"),
            }
        };
        let addr = |s: &MachineState, o: &Operand| -> u64 {
            match o {
                Operand::Mem { base, offset } => {
                    (s.registers[base.0 as usize] as u64).wrapping_add(*offset as u64)
                }
                _ => unreachable!("validated memory operand"),
            }
        };
        let fallthrough = |pc: Pc| -> Pc {
            if pc.index + 1 < proc_.blocks[pc.block].instructions.len() {
                Pc { index: pc.index + 1, ..pc }
            } else {
                Pc { block: pc.block + 1, index: 0, ..pc }
            }
        };
        let jump = |pc: Pc, label: &Operand| -> Pc {
            let Operand::Label(l) = label else { unreachable!() };
            let block = proc_.block_of_label(l).expect("validated label");
            Pc { block, index: 0, ..pc }
        };

        let ops = &ins.operands;
        let mut next = fallthrough(pc);
        let mut stop = None;
        match ins.opcode {
            Opcode::Mov => {
                let v = read(&state, &ops[1]);
                state.registers[reg(&ops[0])] = v;
            }
            Opcode::Add | Opcode::Sub | Opcode::Mul => {
                let a = read(&state, &ops[1]);
                let b = read(&state, &ops[2]);
                let v = match ins.opcode {
                    Opcode::Add => a.wrapping_add(b),
                    Opcode::Sub => a.wrapping_sub(b),
                    _ => a.wrapping_mul(b),
                };
                state.registers[reg(&ops[0])] = v;
            }
            Opcode::CmpFlag => {
                let Operand::Rel(rel) = ops[0] else { unreachable!() };
                state.flag = rel.eval(read(&state, &ops[1]), read(&state, &ops[2]));
            }
            Opcode::Ld => {
                let a = addr(&state, &ops[1]);
                if config.strict && !written.contains(&a) {
                    stop = Some(Exit::Fault(Fault::UnwrittenRead { address: a }));
                } else {
                    let v = state.memory.get(&a).copied().unwrap_or(0);
                    state.registers[reg(&ops[0])] = v;
                    event.kind = EventKind::Load;
                    event.address = a;
                    event.value = v;
                }
            }
            Opcode::St => {
                let a = addr(&state, &ops[0]);
                let v = read(&state, &ops[1]);
                state.memory.insert(a, v);
                written.insert(a);
                event.kind = EventKind::Store;
                event.address = a;
                event.value = v;
            }
            Opcode::Jmp => next = jump(pc, &ops[0]),
            Opcode::BrTrue => {
                if state.flag {
                    next = jump(pc, &ops[0]);
                }
            }
            Opcode::BrFalse => {
                if !state.flag {
                    next = jump(pc, &ops[0]);
                }
            }
            Opcode::Call => {
                if state.call_stack.len() >= config.max_depth {
                    stop = Some(Exit::Fault(Fault::StackOverflow { depth: state.call_stack.len() }));
                } else {
                    let Operand::Proc(name) = &ops[0] else { unreachable!() };
                    let callee = program.proc_index(name).expect("validated call target");
                    event.kind = EventKind::Call;
                    state.call_stack.push(Frame {
                        return_to: next,
                        frame_id: state.frame_id,
                        context: state.context,
                    });
                    state.frame_id = next_frame;
                    next_frame += 1;
                    state.context = contexts.child(state.context, site);
                    next = Pc { proc: callee, block: 0, index: 0 };
                }
            }
            Opcode::Ret => {
                event.kind = EventKind::Ret;
                match state.call_stack.pop() {
                    Some(frame) => {
                        next = frame.return_to;
                        state.frame_id = frame.frame_id;
                        state.context = frame.context;
                    }
                    None => stop = Some(Exit::Halted),
                }
            }
            Opcode::Halt => stop = Some(Exit::Halted),
        }
        if let Some(Exit::Fault(_)) = stop {
            // the faulting instruction did not execute
            break stop.unwrap();
        }
        if stop.is_none() {
            state.pc = next;
        }
        observer.on_event(&event, &state);
        if let Some(exit) = stop {
            break exit;
        }
    };
    observer.on_exit(&state, exit);
    (state, exit)
}

pub struct Execution {
    pub trace: Trace,
    pub state: MachineState,
    pub exit: Exit,
}

pub fn execute(program: &Program, init_memory: &Memory, max_steps: u64) -> Execution {
    execute_with(program, init_memory, VmConfig::new(max_steps))
}

pub fn execute_with(program: &Program, init_memory: &Memory, config: VmConfig) -> Execution {
    let mut rec = TraceRecorder::default();
    let (state, exit) = run(program, init_memory, config, &mut rec);
    Execution {
        trace: Trace { procs: program.procedures.keys().cloned().collect(), events: rec.events },
        state,
        exit,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShadowMode {
    Virgin,
    WrittenUnread,
    ReadSinceWrite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShadowRecord {
    pub mode: ShadowMode,
    pub last_store_site: Site,
    pub last_store_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeadStoreReport {
    pub address: u64,
    pub killed_site: Site,
    pub killed_seq: u64,
    pub killing_site: Site,
    pub killing_seq: u64,
}

#[derive(Serialize)]
struct ReportSite<'a> {
    proc: &'a str,
    block: u32,
    index: u32,
}

#[derive(Serialize)]
struct ReportLine<'a> {
    address: u64,
    killed_site: ReportSite<'a>,
    killed_seq: u64,
    killing_site: ReportSite<'a>,
    killing_seq: u64,
}

impl DeadStoreReport {
    /// One JSON object with a fixed key order.
    pub fn to_json_line(&self, procs: &[String]) -> String {
        let site = |s: Site| ReportSite {
            proc: procs.get(s.proc as usize).map(String::as_str).unwrap_or("?"),
            block: s.block,
            index: s.index,
        };
        serde_json::to_string(&ReportLine {
            address: self.address,
            killed_site: site(self.killed_site),
            killed_seq: self.killed_seq,
            killing_site: site(self.killing_site),
            killing_seq: self.killing_seq,
        })
        .expect("report serializes")
    }
}

/// Online shadow-memory detector. Addresses absent from the map are Virgin.
#[derive(Default)]
pub struct ShadowMemory {
    cells: HashMap<u64, ShadowRecord>,
    reports: Vec<DeadStoreReport>,
}

impl ShadowMemory {
    pub fn observe(&mut self, e: &TraceEvent) {
        match e.kind {
            EventKind::Store => {
                let rec = self.cells.entry(e.address).or_insert(ShadowRecord {
                    mode: ShadowMode::Virgin,
                    last_store_site: e.site,
                    last_store_seq: e.seq,
                });
                if rec.mode == ShadowMode::WrittenUnread {
                    self.reports.push(DeadStoreReport {
                        address: e.address,
                        killed_site: rec.last_store_site,
                        killed_seq: rec.last_store_seq,
                        killing_site: e.site,
                        killing_seq: e.seq,
                    });
                }
                *rec = ShadowRecord {
                    mode: ShadowMode::WrittenUnread,
                    last_store_site: e.site,
                    last_store_seq: e.seq,
                };
            }
            EventKind::Load => {
                if let Some(rec) = self.cells.get_mut(&e.address) {
                    rec.mode = ShadowMode::ReadSinceWrite;
                }
            }
            _ => {}
        }
    }

    pub fn mode(&self, address: u64) -> ShadowMode {
        self.cells.get(&address).map_or(ShadowMode::Virgin, |r| r.mode)
    }

    pub fn into_reports(self) -> Vec<DeadStoreReport> {
        self.reports
    }
}

impl Observer for ShadowMemory {
    fn on_event(&mut self, event: &TraceEvent, _state: &MachineState) {
        self.observe(event);
    }
}

/// Dead stores of a trace, in killing-store order.
pub fn detect_dead_stores(trace: &Trace) -> Vec<DeadStoreReport> {
    detect_dead_stores_in(&trace.events)
}

pub fn detect_dead_stores_in(events: &[TraceEvent]) -> Vec<DeadStoreReport> {
    let mut shadow = ShadowMemory::default();
    for e in events {
        shadow.observe(e);
    }
    shadow.into_reports()
}

/// Quadratic reference: every store is paired with the next access to the
/// same address, and reported if that access is another store.
pub fn brute_force_dead_stores(trace: &Trace) -> Vec<DeadStoreReport> {
    brute_force_dead_stores_in(&trace.events)
}

pub fn brute_force_dead_stores_in(events: &[TraceEvent]) -> Vec<DeadStoreReport> {
    let mut out = Vec::new();
    for (i, first) in events.iter().enumerate() {
        if first.kind != EventKind::Store {
            continue;
        }
        let next = events[i + 1..]
            .iter()
            .find(|e| e.kind.is_memory() && e.address == first.address);
        if let Some(second) = next {
            if second.kind == EventKind::Store {
                out.push(DeadStoreReport {
                    address: first.address,
                    killed_site: first.site,
                    killed_seq: first.seq,
                    killing_site: second.site,
                    killing_seq: second.seq,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Run {
    pub init_memory: Memory,
    pub max_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProcedureLabels {
    pub labels: BTreeMap<String, u8>,
    /// Procedures that executed no instruction in any run.
    pub unexercised: BTreeSet<String>,
    /// Executed instruction count per procedure, summed over runs.
    pub cost: BTreeMap<String, u64>,
}

/// A procedure is labelled 1 iff some run reports a dead store whose killed
/// (earlier) store lies in it.
pub fn label_procedures(program: &Program, runs: &[Run]) -> ProcedureLabels {
    assert!(!runs.is_empty(), "label_procedures needs at least one run");
    let names: Vec<String> = program.procedures.keys().cloned().collect();
    let mut dead = vec![false; names.len()];
    let mut cost = vec![0u64; names.len()];
    for r in runs {
        let exec = execute(program, &r.init_memory, r.max_steps);
        for e in &exec.trace.events {
            cost[e.site.proc as usize] += 1;
        }
        for rep in detect_dead_stores(&exec.trace) {
            dead[rep.killed_site.proc as usize] = true;
        }
    }
    let mut out = ProcedureLabels::default();
    for (i, n) in names.iter().enumerate() {
        out.labels.insert(n.clone(), dead[i] as u8);
        out.cost.insert(n.clone(), cost[i]);
        if cost[i] == 0 {
            out.unexercised.insert(n.clone());
        }
    }
    out
}
