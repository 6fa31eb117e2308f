//! The procedure classifier: positional CNN, CFG and CCT GGNNs, fusion dense
//! layer and MLP head, with training, evaluation and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnn::{Cnn, CnnKind, OUT_DIM as CNN_DIM};
use crate::dataset::SampleRecord;
use crate::embedding::{block_weights, train_word2vec, EmbeddingError, EmbeddingTable, Vocab, W2vParams, UNK};
use crate::ggnn::{Edges, Ggnn, GgnnConfig, GgnnError, GraphBatch};
use crate::graph::AdjMatrix;
use crate::nn::{glorot, NnError, Optimizer, OptimizerKind, ParamStore, Real, Tape, Tensor, Var};

pub const INSTR_DIM: usize = 60;
pub const VALUE_DIM: usize = 30;
pub const FUSED_DIM: usize = 64;
pub const HIDDEN_DIM: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch { what: String, expected: usize, found: usize },
    #[error("training split has {positives} positive and {negatives} negative samples; both classes are required")]
    DegenerateDataset { positives: usize, negatives: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ggnn(#[from] GgnnError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Which embeddings feed the fusion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Mean word2vec embedding of the procedure's blocks.
    W2v,
    Cnn,
    W2vGgnn,
    W2vGgnnResnet,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::W2v, Variant::Cnn, Variant::W2vGgnn, Variant::W2vGgnnResnet, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::W2v => "w2v",
            Variant::Cnn => "cnn",
            Variant::W2vGgnn => "w2v+ggnn",
            Variant::W2vGgnnResnet => "w2v+ggnn+resnet",
            Variant::Full => "full",
        }
    }

    pub fn from_name(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    fn uses_cnn(self) -> bool {
        matches!(self, Variant::Cnn | Variant::W2vGgnnResnet | Variant::Full)
    }

    fn uses_cfg_ggnn(self) -> bool {
        matches!(self, Variant::W2vGgnn | Variant::W2vGgnnResnet | Variant::Full)
    }

    fn uses_instr(self) -> bool {
        self != Variant::Cnn
    }

    fn uses_cct(self) -> bool {
        self == Variant::Full
    }

    pub fn input_dim(self, cfg: &ModelConfig) -> usize {
        match self {
            Variant::W2v => cfg.cfg_ggnn.input_dim,
            Variant::Cnn => CNN_DIM,
            Variant::W2vGgnn => cfg.cfg_ggnn.state_dim,
            Variant::W2vGgnnResnet => CNN_DIM + cfg.cfg_ggnn.state_dim,
            Variant::Full => CNN_DIM + cfg.cfg_ggnn.state_dim + cfg.cct_ggnn.state_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub cnn: CnnKind,
    pub cfg_ggnn: GgnnConfig,
    pub cct_ggnn: GgnnConfig,
    pub fused_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Full,
            cnn: CnnKind::Resnet11,
            cfg_ggnn: GgnnConfig::cfg(),
            cct_ggnn: GgnnConfig::cct(),
            fused_dim: FUSED_DIM,
            hidden_dim: HIDDEN_DIM,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(variant: Variant) -> ModelConfig {
        ModelConfig { variant, ..ModelConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-accuracy improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub freeze_embeddings: bool,
    pub w2v_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            freeze_embeddings: false,
            w2v_epochs: 5,
        }
    }
}

/// Parameter ids of the fusion dense layer and the MLP head.
#[derive(Debug, Clone, Copy)]
struct HeadIds {
    fuse_w: usize,
    fuse_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub instr_vocab: Vocab,
    pub value_vocab: Vocab,
    pub store: ParamStore<f32>,
    emb_instr: Option<usize>,
    emb_value: Option<usize>,
    cfg_ggnn: Option<Ggnn>,
    cct_ggnn: Option<Ggnn>,
    cnn: Option<Cnn>,
    head: HeadIds,
}

/// One procedure, converted to vocabulary ids.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub blocks: Arc<Vec<Vec<(usize, f64)>>>,
    pub edges: Vec<(usize, usize, usize)>,
    pub adjacency: AdjMatrix,
    /// Index into [`PreparedSet::ccts`].
    pub cct: usize,
    /// CCT nodes belonging to this procedure.
    pub proc_nodes: Vec<usize>,
    pub label: u8,
    pub config: String,
}

#[derive(Debug, Clone)]
pub struct PreparedCct {
    pub nodes: Vec<Vec<(usize, f64)>>,
    pub edges: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, Default)]
pub struct PreparedSet {
    pub samples: Vec<Prepared>,
    pub ccts: Vec<PreparedCct>,
}

impl PreparedSet {
    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

fn instruction_sentences(samples: &[SampleRecord]) -> Vec<Vec<String>> {
    samples.iter().flat_map(|s| s.cfg.blocks.iter().map(|b| b.concat())).collect()
}

fn value_sentences(samples: &[SampleRecord]) -> Vec<Vec<String>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for s in samples {
        if seen.insert((s.config.as_str(), s.program_id.as_str())) {
            out.extend(s.cct.nodes.iter().flat_map(|n| n.snapshots.iter().cloned()));
        }
    }
    out
}

/// Word2vec tables for instruction and value tokens of `samples`.
pub fn pretrain_embeddings(
    samples: &[SampleRecord],
    seed: u64,
    epochs: usize,
) -> Result<(EmbeddingTable, EmbeddingTable), ModelError> {
    let mut ip = W2vParams::with_dim(INSTR_DIM, seed);
    ip.epochs = epochs;
    let mut vp = W2vParams::with_dim(VALUE_DIM, seed ^ 0x5eed);
    vp.epochs = epochs;
    let instr = train_word2vec(&instruction_sentences(samples), &ip)?;
    let values = value_sentences(samples);
    let value = if values.iter().all(Vec::is_empty) {
        EmbeddingTable { vocab: Vocab::from_tokens(vec![UNK.to_string()], 0), dim: VALUE_DIM, vectors: vec![0.0; VALUE_DIM] }
    } else {
        train_word2vec(&values, &vp)?
    };
    Ok((instr, value))
}

fn table_tensor(table: &EmbeddingTable) -> Tensor<f32> {
    Tensor::new(vec![table.vocab.len(), table.dim], table.vectors.clone())
}

impl Model {
    /// Builds a randomly initialised model; embedding rows come from the
    /// word2vec tables.
    pub fn new(config: ModelConfig, instr: &EmbeddingTable, value: &EmbeddingTable, seed: u64) -> Result<Model, ModelError> {
        if instr.dim != config.cfg_ggnn.input_dim {
            return Err(ModelError::ShapeMismatch {
                what: "instruction embedding".into(),
                expected: config.cfg_ggnn.input_dim,
                found: instr.dim,
            });
        }
        if value.dim != config.cct_ggnn.input_dim {
            return Err(ModelError::ShapeMismatch {
                what: "value embedding".into(),
                expected: config.cct_ggnn.input_dim,
                found: value.dim,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let v = config.variant;
        let emb_instr = v.uses_instr().then(|| store.add("emb.instr", table_tensor(instr)));
        let emb_value = v.uses_cct().then(|| store.add("emb.value", table_tensor(value)));
        let cfg_ggnn = v.uses_cfg_ggnn().then(|| Ggnn::new(&mut store, "ggnn_cfg", config.cfg_ggnn, &mut rng));
        let cct_ggnn = v.uses_cct().then(|| Ggnn::new(&mut store, "ggnn_cct", config.cct_ggnn, &mut rng));
        let cnn = v.uses_cnn().then(|| Cnn::new(&mut store, "cnn", config.cnn, &mut rng));
        let (i, f, h) = (v.input_dim(&config), config.fused_dim, config.hidden_dim);
        let head = HeadIds {
            fuse_w: store.add("fuse.w", glorot(&mut rng, &[i, f], i, f)),
            fuse_b: store.add("fuse.b", Tensor::zeros(&[f])),
            w1: store.add("head.w1", glorot(&mut rng, &[f, h], f, h)),
            b1: store.add("head.b1", Tensor::zeros(&[h])),
            w2: store.add("head.w2", glorot(&mut rng, &[h, 1], h, 1)),
            b2: store.add("head.b2", Tensor::zeros(&[1])),
        };
        Ok(Model {
            config,
            instr_vocab: instr.vocab.clone(),
            value_vocab: value.vocab.clone(),
            store,
            emb_instr,
            emb_value,
            cfg_ggnn,
            cct_ggnn,
            cnn,
            head,
        })
    }

    pub fn prepare(&self, samples: &[SampleRecord]) -> PreparedSet {
        let mut set = PreparedSet::default();
        let mut cct_index: HashMap<(String, String), usize> = HashMap::new();
        for s in samples {
            let key = (s.config.clone(), s.program_id.clone());
            let cct = *cct_index.entry(key).or_insert_with(|| {
                set.ccts.push(PreparedCct {
                    nodes: s.cct.nodes.iter().map(|n| block_weights(&n.snapshots, &self.value_vocab)).collect(),
                    edges: s.cct.edges.iter().map(|&(a, b)| (a, b, 0)).collect(),
                });
                set.ccts.len() - 1
            });
            set.samples.push(Prepared {
                blocks: Arc::new(s.cfg.blocks.iter().map(|b| block_weights(b, &self.instr_vocab)).collect()),
                edges: s.cfg.edges.iter().map(|&(a, b, k)| (a, b, k.index())).collect(),
                adjacency: s.adjacency_matrix(),
                cct,
                proc_nodes: s.cct.nodes_of(&s.procedure),
                label: s.label,
                config: s.config.clone(),
            });
        }
        set
    }

    /// Logits `[B, 1]` for the samples at `idx`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &[Var], set: &PreparedSet, idx: &[usize]) -> Result<Var, ModelError> {
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &set.samples[i]).collect();
        let mut parts = Vec::new();

        if let Some(cnn) = &self.cnn {
            let mats: Vec<&AdjMatrix> = batch.iter().map(|s| &s.adjacency).collect();
            parts.push(cnn.embed_batch(tape, p, &mats)?);
        }
        if let Some(emb) = self.emb_instr {
            let mut g = GraphBatch::default();
            let mut rows = Vec::new();
            for s in &batch {
                g.push(s.blocks.len(), &s.edges);
                rows.extend(s.blocks.iter().cloned());
            }
            let x = tape.weighted_gather(p[emb], Arc::new(rows))?;
            let groups = Arc::new(g.graphs.clone());
            match &self.cfg_ggnn {
                Some(ggnn) => {
                    let edges = Edges::new(g.nodes, &g.edges, &ggnn.config)?;
                    let h = ggnn.propagate(tape, p, x, &edges)?;
                    parts.push(ggnn.readout(tape, p, h, groups)?);
                }
                None => parts.push(tape.group_mean(x, groups)?),
            }
        }
        if let (Some(emb), Some(ggnn)) = (self.emb_value, &self.cct_ggnn) {
            let mut g = GraphBatch::default();
            let mut rows = Vec::new();
            let mut offsets: HashMap<usize, usize> = HashMap::new();
            for s in &batch {
                offsets.entry(s.cct).or_insert_with(|| {
                    let c = &set.ccts[s.cct];
                    rows.extend(c.nodes.iter().cloned());
                    g.push(c.nodes.len(), &c.edges)
                });
            }
            let x = tape.weighted_gather(p[emb], Arc::new(rows))?;
            let edges = Edges::new(g.nodes, &g.edges, &ggnn.config)?;
            let h = ggnn.propagate(tape, p, x, &edges)?;
            // absent procedures get an all-zero row
            let groups: Vec<Vec<usize>> =
                batch.iter().map(|s| s.proc_nodes.iter().map(|&n| n + offsets[&s.cct]).collect()).collect();
            parts.push(tape.group_mean(h, Arc::new(groups))?);
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts)? };
        let g = fuse_on_tape(tape, x, p[self.head.fuse_w], p[self.head.fuse_b])?;
        classify_on_tape(tape, g, [p[self.head.w1], p[self.head.b1], p[self.head.w2], p[self.head.b2]])
    }

    /// Mean binary cross-entropy of a batch.
    pub fn loss<F: Real>(&self, tape: &mut Tape<F>, p: &[Var], set: &PreparedSet, idx: &[usize]) -> Result<Var, ModelError> {
        let logits = self.forward(tape, p, set, idx)?;
        let targets: Vec<f64> = idx.iter().map(|&i| set.samples[i].label as f64).collect();
        Ok(tape.bce_with_logits(logits, &targets)?)
    }

    pub fn predict(&self, set: &PreparedSet, batch_size: usize) -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(set.samples.len());
        let all: Vec<usize> = (0..set.samples.len()).collect();
        for chunk in all.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let p = tape.bind(&self.store);
            let logits = self.forward(&mut tape, &p, set, chunk)?;
            out.extend(tape.value(logits).data.iter().map(|&z| (z as f64).sigmoid()));
        }
        Ok(out)
    }

    pub fn predict_records(&self, samples: &[SampleRecord]) -> Result<Vec<f64>, ModelError> {
        self.predict(&self.prepare(samples), 64)
    }

    /// The fusion layer and head as plain f64 parameters.
    pub fn head_params(&self) -> FusionHead {
        let t = |id: usize| self.store.get(id).value.cast::<f64>();
        FusionHead {
            fuse_w: t(self.head.fuse_w),
            fuse_b: t(self.head.fuse_b),
            w1: t(self.head.w1),
            b1: t(self.head.b1),
            w2: t(self.head.w2),
            b2: t(self.head.b2),
        }
    }
}

/// `relu(x W + b)`: the fused procedure embedding.
pub fn fuse_on_tape<F: Real>(tape: &mut Tape<F>, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let (din, _) = tape.value(w).as_matrix();
    let found = tape.shape(x).get(1).copied().unwrap_or(0);
    if found != din {
        return Err(ModelError::ShapeMismatch { what: "fusion input".into(), expected: din, found });
    }
    let y = tape.dense(x, w, b)?;
    Ok(tape.relu(y))
}

/// Logit of the two-layer head; the probability is its sigmoid.
pub fn classify_on_tape<F: Real>(tape: &mut Tape<F>, g: Var, [w1, b1, w2, b2]: [Var; 4]) -> Result<Var, ModelError> {
    let h = tape.dense(g, w1, b1)?;
    let h = tape.relu(h);
    Ok(tape.dense(h, w2, b2)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub fuse_w: Tensor<f64>,
    pub fuse_b: Tensor<f64>,
    pub w1: Tensor<f64>,
    pub b1: Tensor<f64>,
    pub w2: Tensor<f64>,
    pub b2: Tensor<f64>,
}

impl FusionHead {
    /// Fuses the positional (40), intra-procedural (70) and
    /// inter-procedural (50) embeddings, in that order.
    pub fn fuse(&self, g_a: &[f64], g_intra: &[f64], g_inter: &[f64]) -> Result<Vec<f64>, ModelError> {
        for (what, v, want) in [("positional", g_a, CNN_DIM), ("intra", g_intra, 70), ("inter", g_inter, 50)] {
            if v.len() != want {
                return Err(ModelError::ShapeMismatch { what: format!("{what} embedding"), expected: want, found: v.len() });
            }
        }
        let x: Vec<f64> = [g_a, g_intra, g_inter].concat();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![1, x.len()], x));
        let w = tape.constant(self.fuse_w.clone());
        let b = tape.constant(self.fuse_b.clone());
        let y = fuse_on_tape(&mut tape, xv, w, b)?;
        Ok(tape.value(y).data.clone())
    }

    pub fn classify(&self, g_prog: &[f64]) -> Result<f64, ModelError> {
        let (din, _) = self.w1.as_matrix();
        if g_prog.len() != din {
            return Err(ModelError::ShapeMismatch { what: "procedure embedding".into(), expected: din, found: g_prog.len() });
        }
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::new(vec![1, g_prog.len()], g_prog.to_vec()));
        let ps = [&self.w1, &self.b1, &self.w2, &self.b2].map(|t| tape.constant(t.clone()));
        let z = classify_on_tape(&mut tape, g, ps)?;
        Ok(tape.value(z).data[0].sigmoid())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Optimizer<f32>,
    pub train: TrainConfig,
    /// Free-form run metadata: dataset tag, generator version.
    pub manifest: BTreeMap<String, String>,
}

fn accuracy_of(probs: &[f64], labels: &[u8]) -> f64 {
    Metrics::from_predictions(&threshold(probs, 0.5), labels).accuracy.unwrap_or(0.0)
}

pub fn threshold(probs: &[f64], t: f64) -> Vec<bool> {
    probs.iter().map(|&p| p >= t).collect()
}

/// Trains with Adam and early stopping on validation accuracy; the returned
/// checkpoint holds the best epoch's parameters.
pub fn train(
    train_set: &[SampleRecord],
    val_set: &[SampleRecord],
    config: &ModelConfig,
    tc: &TrainConfig,
) -> Result<(Checkpoint, TrainReport), ModelError> {
    let positives = train_set.iter().filter(|s| s.label == 1).count();
    let negatives = train_set.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(ModelError::DegenerateDataset { positives, negatives });
    }
    let (instr, value) = pretrain_embeddings(train_set, tc.seed, tc.w2v_epochs)?;
    let mut model = Model::new(config.clone(), &instr, &value, tc.seed)?;
    if tc.freeze_embeddings {
        model.store.set_trainable("emb.", false);
    }
    let train_p = model.prepare(train_set);
    let val_p = model.prepare(val_set);
    let val_labels = val_p.labels();
    let mut opt = Optimizer::adam(tc.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train_p.samples.len()).collect();

    let mut best = (model.store.clone(), opt.clone());
    let mut report = TrainReport { epochs: Vec::new(), best_epoch: 0, best_val_accuracy: -1.0, stopped_early: false };
    let mut since_best = 0;
    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(tc.batch_size.max(1)).enumerate() {
            let mut tape = Tape::new();
            let p = tape.bind(&model.store);
            let loss = model.loss(&mut tape, &p, &train_p, chunk)?;
            let l = tape.value(loss).data[0] as f64;
            if !l.is_finite() {
                return Err(ModelError::NonFinite { epoch, batch: b });
            }
            total += l * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            model.store.accumulate(&p, &grads);
            opt.step(&mut model.store)?;
        }
        let val_accuracy = if val_p.samples.is_empty() {
            0.0
        } else {
            accuracy_of(&model.predict(&val_p, tc.batch_size.max(1))?, &val_labels)
        };
        report.epochs.push(EpochStats { epoch, train_loss: total / order.len() as f64, val_accuracy });
        if val_accuracy > report.best_val_accuracy {
            report.best_val_accuracy = val_accuracy;
            report.best_epoch = epoch;
            best = (model.store.clone(), opt.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    model.store = best.0;
    let ckpt = Checkpoint { model, optimizer: best.1, train: tc.clone(), manifest: BTreeMap::new() };
    Ok((ckpt, report))
}

/// Confusion counts at one threshold and the ratios derived from them.
/// A ratio is `None` when its denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Metrics {
        Metrics {
            tp,
            fp,
            fn_,
            tn,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
        }
    }

    pub fn from_predictions(predicted: &[bool], labels: &[u8]) -> Metrics {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&p, &l) in predicted.iter().zip(labels) {
            match (p, l == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Metrics::from_counts(tp, fp, fn_, tn)
    }

    /// Sums counts; used to merge partial evaluations.
    pub fn merge(&self, other: &Metrics) -> Metrics {
        Metrics::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_, self.tn + other.tn)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall: Metrics,
    pub per_config: BTreeMap<String, Metrics>,
    pub probabilities: Vec<f64>,
}

pub fn evaluate(model: &Model, samples: &[SampleRecord]) -> Result<Evaluation, ModelError> {
    let probabilities = model.predict_records(samples)?;
    Ok(evaluation_from(samples, probabilities))
}

pub fn evaluation_from(samples: &[SampleRecord], probabilities: Vec<f64>) -> Evaluation {
    let predicted = threshold(&probabilities, 0.5);
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let mut per_config: BTreeMap<String, (Vec<bool>, Vec<u8>)> = BTreeMap::new();
    for ((s, &p), &l) in samples.iter().zip(&predicted).zip(&labels) {
        let e = per_config.entry(s.config.clone()).or_default();
        e.0.push(p);
        e.1.push(l);
    }
    Evaluation {
        overall: Metrics::from_predictions(&predicted, &labels),
        per_config: per_config.into_iter().map(|(k, (p, l))| (k, Metrics::from_predictions(&p, &l))).collect(),
        probabilities,
    }
}

pub fn threshold_sweep(probs: &[f64], labels: &[u8], thresholds: &[f64]) -> Vec<(f64, Metrics)> {
    thresholds.iter().map(|&t| (t, Metrics::from_predictions(&threshold(probs, t), labels))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub skipped_fraction: f64,
    /// Oracle cost of every procedure over the cost of the procedures still
    /// sent to the oracle. Infinite when nothing is sent.
    pub simulated_speedup: f64,
    pub missed_dead_stores: usize,
    pub positives: usize,
}

/// Simulates running the expensive oracle only on predicted-positive
/// procedures.
pub fn filter_report(predicted: &[bool], labels: &[u8], costs: &[u64]) -> FilterReport {
    assert_eq!(predicted.len(), labels.len());
    assert_eq!(predicted.len(), costs.len());
    let total: u64 = costs.iter().sum();
    let kept: u64 = predicted.iter().zip(costs).filter(|(p, _)| **p).map(|(_, c)| c).sum();
    let skipped = predicted.iter().filter(|p| !**p).count();
    let missed = predicted.iter().zip(labels).filter(|(p, l)| !**p && **l == 1).count();
    FilterReport {
        skipped_fraction: skipped as f64 / predicted.len().max(1) as f64,
        simulated_speedup: if kept == 0 { f64::INFINITY } else { total as f64 / kept as f64 },
        missed_dead_stores: missed,
        positives: labels.iter().filter(|&&l| l == 1).count(),
    }
}

/// Replaces labels with a seeded permutation of themselves.
pub fn shuffle_labels(samples: &[SampleRecord], seed: u64) -> Vec<SampleRecord> {
    let mut labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    samples.iter().zip(labels).map(|(s, l)| SampleRecord { label: l, ..s.clone() }).collect()
}

const MAGIC: &[u8; 6] = b"GSCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    manifest: BTreeMap<String, String>,
    instr_vocab: Vec<String>,
    value_vocab: Vec<String>,
    params: Vec<ParamMeta>,
    optimizer: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: bool,
}

fn write_f32s<W: Write>(w: &mut W, xs: &[f32]) -> io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>, ModelError> {
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw).map_err(|_| ModelError::Checkpoint("truncated tensor data".into()))?;
    Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

impl Checkpoint {
    /// `GSCKPT`, version, JSON header length and header, then every
    /// parameter as little-endian f32, then Adam moments if present.
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let header = Header {
            model: m.config.clone(),
            train: self.train.clone(),
            manifest: self.manifest.clone(),
            instr_vocab: m.instr_vocab.tokens().to_vec(),
            value_vocab: m.value_vocab.tokens().to_vec(),
            params: m
                .store
                .iter()
                .map(|p| ParamMeta { name: p.name.clone(), shape: p.value.shape.clone(), trainable: p.trainable })
                .collect(),
            optimizer: self.optimizer.kind,
            lr: self.optimizer.lr,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
            step: self.optimizer.step,
            moments: !self.optimizer.moments.is_empty(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in m.store.iter() {
            write_f32s(&mut out, &p.value.data).expect("vec write");
        }
        for (a, b) in &self.optimizer.moments {
            write_f32s(&mut out, &a.data).expect("vec write");
            write_f32s(&mut out, &b.data).expect("vec write");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
        let mut r = bytes;
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(|_| ModelError::Checkpoint("truncated".into()))?;
        if &magic != MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(|_| ModelError::Checkpoint("truncated".into()))?;
        let version = u32::from_le_bytes(u32b);
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(|_| ModelError::Checkpoint("truncated".into()))?;
        let len = u64::from_le_bytes(u64b) as usize;
        if len > r.len() {
            return Err(ModelError::Checkpoint("header length exceeds file".into()));
        }
        let header: Header =
            serde_json::from_slice(&r[..len]).map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
        r = &r[len..];

        let table = |tokens: &[String], dim: usize| EmbeddingTable {
            vocab: Vocab::from_tokens(tokens.to_vec(), 0),
            dim,
            vectors: vec![0.0; tokens.len() * dim],
        };
        let instr = table(&header.instr_vocab, header.model.cfg_ggnn.input_dim);
        let value = table(&header.value_vocab, header.model.cct_ggnn.input_dim);
        let mut model = Model::new(header.model.clone(), &instr, &value, 0)?;
        if model.store.len() != header.params.len() {
            return Err(ModelError::Checkpoint("parameter list does not match the architecture".into()));
        }
        for (i, meta) in header.params.iter().enumerate() {
            let p = model.store.get_mut(i);
            if p.name != meta.name || p.value.shape != meta.shape {
                return Err(ModelError::Checkpoint(format!("parameter `{}` does not match the architecture", meta.name)));
            }
            p.value.data = read_f32s(&mut r, p.value.len())?;
            p.trainable = meta.trainable;
        }
        let mut optimizer = match header.optimizer {
            OptimizerKind::Adam => Optimizer::adam(header.lr),
            OptimizerKind::Sgd => Optimizer::sgd(header.lr),
        };
        optimizer.beta1 = header.beta1;
        optimizer.beta2 = header.beta2;
        optimizer.eps = header.eps;
        optimizer.step = header.step;
        if header.moments {
            for p in model.store.iter() {
                let m = Tensor::new(p.value.shape.clone(), read_f32s(&mut r, p.value.len())?);
                let v = Tensor::new(p.value.shape.clone(), read_f32s(&mut r, p.value.len())?);
                optimizer.moments.push((m, v));
            }
        }
        if !r.is_empty() {
            return Err(ModelError::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        if model.store.iter().any(|p| !p.value.all_finite()) {
            return Err(ModelError::Checkpoint("non-finite parameter".into()));
        }
        Ok(Checkpoint { model, optimizer, train: header.train, manifest: header.manifest })
    }
}
