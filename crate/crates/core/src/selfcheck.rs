//! Gradient checks and oracle-equivalence sweeps shared by the CLI's
//! `selfcheck` and the acceptance suite.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::cnn::ResidualBlock;
use crate::corpus::{build_config, CorpusError, GenConfig};
use crate::dataset::SampleRecord;
use crate::ggnn::{gru_cell, Edges, Ggnn, GgnnConfig, GgnnError, GruIds, Readout};
use crate::isa::{parse_program, Dialect};
use crate::model::{pretrain_embeddings, Model, ModelConfig, ModelError};
use crate::nn::{grad_check, grad_check_params, GradCheckReport, NnError, ParamStore, Tape, Tensor, Var};
use crate::vm::{brute_force_dead_stores_in, detect_dead_stores_in, execute, Memory, Site, TraceEvent};

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum SelfCheckError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ggnn(#[from] GgnnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("record {program_id}/{procedure}: {message}")]
    Record { program_id: String, procedure: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheck {
    pub name: String,
    pub passed: bool,
    pub worst_rel_error: f64,
    pub checked: usize,
}

impl GradientCheck {
    fn from_report(name: &str, r: &GradCheckReport) -> GradientCheck {
        GradientCheck { name: name.to_string(), passed: r.passed, worst_rel_error: r.worst_rel_error, checked: r.checked }
    }
}

/// `grad_check_params` for losses whose errors are wider than `NnError`; the
/// first such error aborts the check and is returned as is.
fn check_params<E, Fun>(f: Fun, store: &ParamStore<f64>, seed: u64) -> Result<GradCheckReport, SelfCheckError>
where
    E: Into<SelfCheckError>,
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
{
    let failure = RefCell::new(None);
    let r = grad_check_params(
        |t, p| {
            f(t, p).map_err(|e| {
                failure.borrow_mut().get_or_insert(e.into());
                NnError::NotScalarLoss { shape: Vec::new() }
            })
        },
        store,
        EPS,
        TOL,
        seed,
    );
    match failure.into_inner() {
        Some(e) => Err(e),
        None => Ok(r?),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn dense_mlp() -> Result<GradCheckReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let dims = [6, 8, 5, 1];
    for l in 0..3 {
        store.add(format!("w{l}"), rand_tensor(&mut rng, &[dims[l], dims[l + 1]]));
        store.add(format!("b{l}"), rand_tensor(&mut rng, &[dims[l + 1]]));
    }
    let x = rand_tensor(&mut rng, &[4, 6]);
    grad_check_params(
        |t, p| {
            let mut h = t.constant(x.clone());
            for l in 0..3 {
                h = t.dense(h, p[2 * l], p[2 * l + 1])?;
                if l < 2 {
                    h = t.relu(h);
                }
            }
            t.bce_with_logits(h, &[1.0, 0.0, 1.0, 0.0])
        },
        &store,
        EPS,
        TOL,
        7,
    )
}

fn gru() -> Result<GradCheckReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let ids = GruIds::register(&mut store, "gru", 4, &mut rng);
    for id in [ids.b_z, ids.b_r, ids.b_h] {
        store.get_mut(id).value = rand_tensor(&mut rng, &[4]);
    }
    let m = rand_tensor(&mut rng, &[3, 4]);
    let h = rand_tensor(&mut rng, &[3, 4]);
    grad_check_params(
        |t, p| {
            let (mv, hv) = (t.constant(m.clone()), t.constant(h.clone()));
            let s = gru_cell(t, p, &ids, mv, hv)?.state;
            let sq = t.mul(s, s)?;
            Ok(t.sum(sq))
        },
        &store,
        EPS,
        TOL,
        1,
    )
}

fn conv_maxpool() -> Result<GradCheckReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    // jitter keeps every pooling window's maximum unique
    let mut x = rand_tensor(&mut rng, &[2, 2, 6, 6]);
    for (i, v) in x.data.iter_mut().enumerate() {
        *v += 1e-3 * i as f64;
    }
    grad_check(
        |t, x| {
            let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv2d(x, w, b, 1, 1)?;
            let y = t.maxpool2d(y, 2, 2)?;
            let y = t.tanh(y);
            let y = t.global_maxpool(y)?;
            Ok(t.sum(y))
        },
        &x,
        EPS,
        TOL,
    )
}

fn residual_block() -> Result<GradCheckReport, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let block = ResidualBlock::register(&mut store, "blk", 2, 3, &mut rng);
    randomize_biases(&mut store, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
    grad_check_params(
        |t, p| {
            let xv = t.constant(x.clone());
            let y = block.forward(t, p, xv)?;
            let g = t.global_maxpool(y)?;
            let sq = t.mul(g, g)?;
            Ok(t.sum(sq))
        },
        &store,
        EPS,
        TOL,
        3,
    )
}

fn ggnn_three_steps() -> Result<GradCheckReport, SelfCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let cfg = GgnnConfig { state_dim: 4, steps: 3, input_dim: 3, edge_kinds: 4, typed_edges: false, readout: Readout::Mean };
    let g = Ggnn::new(&mut store, "g", cfg, &mut rng);
    randomize_biases(&mut store, &mut rng);
    let edges: Vec<(usize, usize, usize)> =
        (0..8).map(|_| (rng.gen_range(0..5), rng.gen_range(0..5), rng.gen_range(0..4))).collect();
    let e = Edges::new(5, &edges, &cfg)?;
    let x = rand_tensor(&mut rng, &[5, 3]);
    check_params(
        |t, p| {
            let xv = t.constant(x.clone());
            let h = g.propagate(t, p, xv, &e)?;
            let o = g.readout(t, p, h, Arc::new(vec![vec![0, 1, 2, 3, 4]]))?;
            let sq = t.mul(o, o)?;
            Ok::<_, GgnnError>(t.sum(sq))
        },
        &store,
        2,
    )
}

/// Biases left at zero put empty image patches exactly on relu kinks.
fn randomize_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        if p.name.rsplit('.').next().is_some_and(|last| last.starts_with('b')) {
            let n = p.value.len();
            p.value.data = (0..n).map(|_| rng.gen_range(-0.2..0.2)).collect();
        }
    }
}

/// Full fused model on three generated procedures, at the first randomized
/// point where no probe straddles a kink.
pub fn full_model_gradcheck(samples: &[SampleRecord]) -> Result<GradCheckReport, SelfCheckError> {
    let (instr, value) = pretrain_embeddings(samples, 0, 1)?;
    let m = Model::new(ModelConfig::default(), &instr, &value, 0)?;
    let n = samples.len().min(3);
    let set = m.prepare(&samples[..n]);
    let idx: Vec<usize> = (0..n).collect();
    let mut last = None;
    for seed in 0..6 {
        let mut store = m.store.cast::<f64>();
        randomize_biases(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        let r = check_params(|t, p| m.loss(t, p, &set, &idx), &store, 7)?;
        if r.kinked == 0 {
            return Ok(r);
        }
        last = Some(r);
    }
    Ok(last.expect("at least one point tried"))
}

/// Dense, GRU cell, conv+maxpool, residual block, unrolled GGNN and the full
/// model, all in 64-bit.
pub fn gradient_suite() -> Result<Vec<GradientCheck>, SelfCheckError> {
    let mut out = vec![
        GradientCheck::from_report("dense", &dense_mlp()?),
        GradientCheck::from_report("gru_cell", &gru()?),
        GradientCheck::from_report("conv2d_maxpool", &conv_maxpool()?),
        GradientCheck::from_report("residual_block", &residual_block()?),
        GradientCheck::from_report("ggnn_3_steps", &ggnn_three_steps()?),
    ];
    let tiny = build_config(&GenConfig::default(), 20, [0.4, 0.3, 0.3], 5)?;
    out.push(GradientCheck::from_report("full_model", &full_model_gradcheck(&tiny.train)?));
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct OracleCheck {
    pub traces: usize,
    pub events: usize,
    pub mismatches: usize,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }

    fn record(&mut self, events: &[TraceEvent]) {
        let fast: BTreeSet<_> = detect_dead_stores_in(events).into_iter().collect();
        let slow: BTreeSet<_> = brute_force_dead_stores_in(events).into_iter().collect();
        self.traces += 1;
        self.events += events.len();
        self.mismatches += usize::from(fast != slow);
    }
}

/// Shadow-memory detector against the brute-force definition on random
/// traces of at most 200 events over at most 8 addresses.
pub fn oracle_random_traces(count: usize, seed: u64) -> OracleCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OracleCheck::default();
    for _ in 0..count {
        let len = rng.gen_range(0..=200);
        let addresses = rng.gen_range(1..=8u64);
        let events: Vec<TraceEvent> = (0..len)
            .map(|i| {
                let site = Site { proc: rng.gen_range(0..3), block: 0, index: i as u32 };
                let a = rng.gen_range(0..addresses);
                if rng.gen::<bool>() {
                    TraceEvent::store(i as u64, a, rng.gen_range(-3..=3), site)
                } else {
                    TraceEvent::load(i as u64, a, site)
                }
            })
            .collect();
        out.record(&events);
    }
    out
}

/// Same comparison on the labelling trace of every distinct program behind
/// `samples`.
pub fn oracle_corpus_traces<'a>(
    samples: impl IntoIterator<Item = &'a SampleRecord>,
    max_steps: u64,
) -> Result<OracleCheck, SelfCheckError> {
    let mut seen = BTreeSet::new();
    let mut out = OracleCheck::default();
    for s in samples {
        if !seen.insert((s.config.clone(), s.program_id.clone())) {
            continue;
        }
        let fail = |message: String| SelfCheckError::Record {
            program_id: s.program_id.clone(),
            procedure: s.procedure.clone(),
            message,
        };
        let dialect = crate::corpus::dialect_of_tag(&s.config).unwrap_or(Dialect::DialectA);
        let program = parse_program(&s.program, dialect).map_err(|e| fail(e.to_string()))?;
        let inputs: Memory = s.inputs.iter().copied().collect();
        let exec = execute(&program, &inputs, max_steps);
        out.record(&exec.trace.events);
    }
    Ok(out)
}
