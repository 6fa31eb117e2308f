//! Gated graph neural network: bidirectional message passing with a GRU node
//! update and a mean (or gated) readout.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Cct;
use crate::nn::{glorot, NnError, ParamStore, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GgnnError {
    #[error("edge ({src}, {dst}) out of range for {nodes} nodes")]
    EdgeOutOfRange { src: usize, dst: usize, nodes: usize },
    #[error("edge kind {kind} out of range for {kinds} kinds")]
    KindOutOfRange { kind: usize, kinds: usize },
    #[error("readout over an empty graph")]
    EmptyGraph,
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Mean,
    Gated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GgnnConfig {
    pub state_dim: usize,
    pub steps: usize,
    pub input_dim: usize,
    /// Number of edge kinds; with `typed_edges` each kind gets its own
    /// transform per direction.
    pub edge_kinds: usize,
    pub typed_edges: bool,
    pub readout: Readout,
}

impl GgnnConfig {
    pub fn cfg() -> GgnnConfig {
        GgnnConfig { state_dim: 70, steps: 10, input_dim: 60, edge_kinds: 4, typed_edges: false, readout: Readout::Mean }
    }

    pub fn cct() -> GgnnConfig {
        GgnnConfig { state_dim: 50, steps: 5, input_dim: 30, edge_kinds: 1, typed_edges: false, readout: Readout::Mean }
    }

    fn transforms(&self) -> usize {
        if self.typed_edges {
            self.edge_kinds
        } else {
            1
        }
    }
}

/// Edge list bucketed by transform, validated against a node count.
#[derive(Debug, Clone)]
pub struct Edges {
    pub nodes: usize,
    fwd: Vec<Arc<Vec<(usize, usize)>>>,
    bwd: Vec<Arc<Vec<(usize, usize)>>>,
}

impl Edges {
    /// `edges` holds `(src, dst, kind)` triples.
    pub fn new(nodes: usize, edges: &[(usize, usize, usize)], cfg: &GgnnConfig) -> Result<Edges, GgnnError> {
        let buckets = cfg.transforms();
        let mut fwd = vec![Vec::new(); buckets];
        let mut bwd = vec![Vec::new(); buckets];
        for &(s, d, k) in edges {
            if s >= nodes || d >= nodes {
                return Err(GgnnError::EdgeOutOfRange { src: s, dst: d, nodes });
            }
            if k >= cfg.edge_kinds {
                return Err(GgnnError::KindOutOfRange { kind: k, kinds: cfg.edge_kinds });
            }
            let b = if cfg.typed_edges { k } else { 0 };
            fwd[b].push((s, d));
            bwd[b].push((d, s));
        }
        Ok(Edges {
            nodes,
            fwd: fwd.into_iter().map(Arc::new).collect(),
            bwd: bwd.into_iter().map(Arc::new).collect(),
        })
    }
}

/// Several graphs packed as one disjoint union.
#[derive(Debug, Clone, Default)]
pub struct GraphBatch {
    pub nodes: usize,
    pub edges: Vec<(usize, usize, usize)>,
    /// Node rows of each member graph.
    pub graphs: Vec<Vec<usize>>,
}

impl GraphBatch {
    /// Appends a graph and returns the row offset of its first node.
    pub fn push(&mut self, nodes: usize, edges: &[(usize, usize, usize)]) -> usize {
        let off = self.nodes;
        self.edges.extend(edges.iter().map(|&(s, d, k)| (s + off, d + off, k)));
        self.graphs.push((off..off + nodes).collect());
        self.nodes += nodes;
        off
    }
}

/// Parameter ids of one GRU cell.
#[derive(Debug, Clone, Copy)]
pub struct GruIds {
    pub w_z: usize,
    pub u_z: usize,
    pub b_z: usize,
    pub w_r: usize,
    pub u_r: usize,
    pub b_r: usize,
    pub w_h: usize,
    pub u_h: usize,
    pub b_h: usize,
}

impl GruIds {
    pub fn register<F: Real, R: Rng>(store: &mut ParamStore<F>, prefix: &str, d: usize, rng: &mut R) -> GruIds {
        let mut mat = |name: &str| store.add(format!("{prefix}.{name}"), glorot(rng, &[d, d], d, d));
        let (w_z, u_z) = (mat("w_z"), mat("u_z"));
        let (w_r, u_r) = (mat("w_r"), mat("u_r"));
        let (w_h, u_h) = (mat("w_h"), mat("u_h"));
        let mut bias = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::zeros(&[d]));
        GruIds { w_z, u_z, b_z: bias("b_z"), w_r, u_r, b_r: bias("b_r"), w_h, u_h, b_h: bias("b_h") }
    }
}

/// Intermediate values of one GRU step.
#[derive(Debug, Clone, Copy)]
pub struct GruStep {
    pub update: Var,
    pub candidate: Var,
    pub state: Var,
}

/// `h' = (1 - z) * h + z * tanh(m W_h + (r * h) U_h + b_h)` with sigmoid
/// gates `z` and `r`.
pub fn gru_cell<F: Real>(tape: &mut Tape<F>, p: &[Var], ids: &GruIds, m: Var, h: Var) -> Result<GruStep, NnError> {
    let gate = |tape: &mut Tape<F>, w: usize, u: usize, b: usize| -> Result<Var, NnError> {
        let a = tape.matmul(m, p[w])?;
        let c = tape.dense(h, p[u], p[b])?;
        let s = tape.add(a, c)?;
        Ok(tape.sigmoid(s))
    };
    let z = gate(tape, ids.w_z, ids.u_z, ids.b_z)?;
    let r = gate(tape, ids.w_r, ids.u_r, ids.b_r)?;
    let rh = tape.mul(r, h)?;
    let a = tape.matmul(m, p[ids.w_h])?;
    let c = tape.dense(rh, p[ids.u_h], p[ids.b_h])?;
    let s = tape.add(a, c)?;
    let cand = tape.tanh(s);
    // h + z * (cand - h)
    let diff = tape.sub(cand, h)?;
    let step = tape.mul(z, diff)?;
    let state = tape.add(h, step)?;
    Ok(GruStep { update: z, candidate: cand, state })
}

#[derive(Debug, Clone)]
pub struct Ggnn {
    pub config: GgnnConfig,
    pub prefix: String,
    proj: usize,
    fwd: Vec<(usize, usize)>,
    bwd: Vec<(usize, usize)>,
    gru: GruIds,
    gated: Option<[usize; 4]>,
}

impl Ggnn {
    /// Registers parameters named `<prefix>.*` in `store`.
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, prefix: &str, config: GgnnConfig, rng: &mut R) -> Ggnn {
        let d = config.state_dim;
        let proj = store.add(format!("{prefix}.proj"), glorot(rng, &[config.input_dim, d], config.input_dim, d));
        let mut transforms = |dir: &str| -> Vec<(usize, usize)> {
            (0..config.transforms())
                .map(|k| {
                    let suffix = if config.typed_edges { format!("{dir}.{k}") } else { dir.to_string() };
                    let w = store.add(format!("{prefix}.w_{suffix}"), glorot(rng, &[d, d], d, d));
                    let b = store.add(format!("{prefix}.b_{suffix}"), Tensor::zeros(&[d]));
                    (w, b)
                })
                .collect()
        };
        let fwd = transforms("fwd");
        let bwd = transforms("bwd");
        let gru = GruIds::register(store, &format!("{prefix}.gru"), d, rng);
        let gated = (config.readout == Readout::Gated).then(|| {
            [
                store.add(format!("{prefix}.gate_w"), glorot(rng, &[d, d], d, d)),
                store.add(format!("{prefix}.gate_b"), Tensor::zeros(&[d])),
                store.add(format!("{prefix}.out_w"), glorot(rng, &[d, d], d, d)),
                store.add(format!("{prefix}.out_b"), Tensor::zeros(&[d])),
            ]
        });
        Ggnn { config, prefix: prefix.to_string(), proj, fwd, bwd, gru, gated }
    }

    pub fn gru_ids(&self) -> &GruIds {
        &self.gru
    }

    /// Final node states `[n, D]` after `T` propagation steps.
    pub fn propagate<F: Real>(&self, tape: &mut Tape<F>, p: &[Var], inputs: Var, edges: &Edges) -> Result<Var, GgnnError> {
        let n = edges.nodes;
        let shape = tape.shape(inputs).to_vec();
        if shape != [n, self.config.input_dim] {
            return Err(NnError::ShapeMismatch { op: "ggnn inputs", left: shape, right: vec![n, self.config.input_dim] }.into());
        }
        let mut h = tape.matmul(inputs, p[self.proj])?;
        for _ in 0..self.config.steps {
            let mut msg: Option<Var> = None;
            for (lists, ids) in [(&edges.fwd, &self.fwd), (&edges.bwd, &self.bwd)] {
                for (list, &(w, b)) in lists.iter().zip(ids) {
                    if list.is_empty() {
                        continue;
                    }
                    let t = tape.dense(h, p[w], p[b])?;
                    let s = tape.edge_sum(t, list.clone(), n)?;
                    msg = Some(match msg {
                        Some(acc) => tape.add(acc, s)?,
                        None => s,
                    });
                }
            }
            let m = match msg {
                Some(m) => m,
                None => tape.constant(Tensor::zeros(&[n, self.config.state_dim])),
            };
            h = gru_cell(tape, p, &self.gru, m, h)?.state;
        }
        Ok(h)
    }

    /// One readout row per group of node rows.
    pub fn readout<F: Real>(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        states: Var,
        groups: Arc<Vec<Vec<usize>>>,
    ) -> Result<Var, GgnnError> {
        if tape.shape(states)[0] == 0 || groups.iter().any(Vec::is_empty) {
            return Err(GgnnError::EmptyGraph);
        }
        let pooled = match self.gated {
            None => states,
            Some([gw, gb, ow, ob]) => {
                let g = tape.dense(states, p[gw], p[gb])?;
                let g = tape.sigmoid(g);
                let o = tape.dense(states, p[ow], p[ob])?;
                let o = tape.tanh(o);
                tape.mul(g, o)?
            }
        };
        Ok(tape.group_mean(pooled, groups)?)
    }

    /// Convenience forward pass of a single graph outside training.
    pub fn final_states<F: Real>(
        &self,
        store: &ParamStore<F>,
        inputs: &Tensor<F>,
        edges: &[(usize, usize, usize)],
    ) -> Result<Tensor<F>, GgnnError> {
        let e = Edges::new(inputs.shape[0], edges, &self.config)?;
        let mut tape = Tape::new();
        let p = tape.bind(store);
        let x = tape.constant(inputs.clone());
        let h = self.propagate(&mut tape, &p, x, &e)?;
        Ok(tape.value(h).clone())
    }

    pub fn embed<F: Real>(
        &self,
        store: &ParamStore<F>,
        inputs: &Tensor<F>,
        edges: &[(usize, usize, usize)],
    ) -> Result<Vec<F>, GgnnError> {
        let n = inputs.shape[0];
        let e = Edges::new(n, edges, &self.config)?;
        let mut tape = Tape::new();
        let p = tape.bind(store);
        let x = tape.constant(inputs.clone());
        let h = self.propagate(&mut tape, &p, x, &e)?;
        let r = self.readout(&mut tape, &p, h, Arc::new(vec![(0..n).collect()]))?;
        Ok(tape.value(r).data.clone())
    }
}

/// Mean of final CCT node states over the nodes of `proc_`; zero if the
/// procedure never ran.
pub fn embed_cct_for_procedure<F: Real>(cct: &Cct, proc_: &str, states: &Tensor<F>) -> Vec<F> {
    let (_, d) = states.as_matrix();
    let nodes = cct.nodes_of(proc_);
    let mut out = vec![F::ZERO; d];
    if nodes.is_empty() {
        return out;
    }
    for &i in &nodes {
        for (o, &v) in out.iter_mut().zip(states.row(i)) {
            *o += v;
        }
    }
    let scale = F::from_f64(1.0 / nodes.len() as f64);
    out.iter_mut().for_each(|o| *o *= scale);
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::{profile_cct, CctConfig};
    use crate::isa::{parse_program, Dialect};
    use crate::nn::grad_check_params;
    use crate::vm::Memory;

    fn small(d: usize, steps: usize, input_dim: usize) -> GgnnConfig {
        GgnnConfig { state_dim: d, steps, input_dim, edge_kinds: 4, typed_edges: false, readout: Readout::Mean }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<(usize, usize, usize)> {
        (0..m).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..4))).collect()
    }

    #[test]
    fn zero_steps_is_the_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let g = Ggnn::new(&mut store, "g", small(3, 0, 2), &mut rng);
        let x = Tensor::from_f64(&[2, 2], &[1.0, 2.0, -1.0, 0.5]);
        let h = g.final_states(&store, &x, &[(0, 1, 0)]).unwrap();
        let p = &store.by_name("g.proj").unwrap().value;
        for i in 0..2 {
            for j in 0..3 {
                let want = x.data[i * 2] * p.data[j] + x.data[i * 2 + 1] * p.data[3 + j];
                assert_eq!(h.data[i * 3 + j], want);
            }
        }
    }

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    /// Plain-code GRU on row vectors with `D x D` row-major matrices.
    fn gru_ref(store: &ParamStore<f64>, pre: &str, m: &[f64], h: &[f64]) -> Vec<f64> {
        let d = h.len();
        let val = |n: &str| store.by_name(&format!("{pre}.{n}")).unwrap().value.data.clone();
        let vm = |v: &[f64], w: &[f64]| -> Vec<f64> {
            (0..d).map(|j| (0..d).map(|i| v[i] * w[i * d + j]).sum()).collect()
        };
        let gate = |w: &str, u: &str, b: &str, hh: &[f64]| -> Vec<f64> {
            let (a, c, bb) = (vm(m, &val(w)), vm(hh, &val(u)), val(b));
            (0..d).map(|j| a[j] + c[j] + bb[j]).collect()
        };
        let z: Vec<f64> = gate("w_z", "u_z", "b_z", h).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = gate("w_r", "u_r", "b_r", h).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> = gate("w_h", "u_h", "b_h", &rh).into_iter().map(f64::tanh).collect();
        (0..d).map(|j| (1.0 - z[j]) * h[j] + z[j] * cand[j]).collect()
    }

    fn set(store: &mut ParamStore<f64>, name: &str, data: &[f64]) {
        let id = store.id(name).unwrap();
        let shape = store.get(id).value.shape.clone();
        store.get_mut(id).value = Tensor::from_f64(&shape, data);
    }

    #[test]
    fn isolated_node_sees_zero_message() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let g = Ggnn::new(&mut store, "g", small(3, 4, 3), &mut rng);
        let x = Tensor::from_f64(&[1, 3], &[0.2, -0.4, 0.9]);
        let h = g.final_states(&store, &x, &[]).unwrap();
        let p = store.by_name("g.proj").unwrap().value.clone();
        let mut want: Vec<f64> = (0..3).map(|j| (0..3).map(|i| x.data[i] * p.data[i * 3 + j]).sum()).collect();
        for _ in 0..4 {
            want = gru_ref(&store, "g.gru", &[0.0; 3], &want);
        }
        for (a, b) in h.data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Two-node chain u -> v with D = 2, T = 1 and hand-set weights:
    /// identity projection and forward transform, zero backward transform,
    /// x_u = (1, 0), x_v = (0, 1).
    ///
    /// For v: m = (1, 0), h = (0, 1).
    ///   z = sigmoid(m W_z + h U_z + b_z) with W_z = [[0.5, 0], [0, 0.5]],
    ///     U_z = [[0.1, 0.2], [0.3, 0.4]], b_z = (0, 0.1)
    ///     -> z = sigmoid(0.5 + 0.3, 0 + 0.4 + 0.1) = sigmoid(0.8, 0.5)
    ///   r = sigmoid(m W_r + h U_r + b_r) with W_r = I, U_r = 0, b_r = 0
    ///     -> r = sigmoid(1, 0) = (0.731058578630, 0.5)
    ///   cand = tanh(m W_h + (r * h) U_h + b_h) with W_h = [[1, -1], [0, 0]],
    ///     U_h = [[0, 0], [2, 1]], b_h = (0, 0)
    ///     -> r * h = (0, 0.5), cand = tanh(1 + 1, -1 + 0.5) = tanh(2, -0.5)
    ///   h' = (1 - z) h + z cand
    /// For u the message is zero: z = sigmoid(0.1, 0.2 + 0.1), r = (0.5, 0.5),
    ///   cand = tanh(0, 0), h' = (1 - z) (1, 0).
    #[test]
    fn two_node_chain_matches_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let g = Ggnn::new(&mut store, "g", small(2, 1, 2), &mut rng);
        set(&mut store, "g.proj", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut store, "g.w_fwd", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut store, "g.w_bwd", &[0.0; 4]);
        set(&mut store, "g.gru.w_z", &[0.5, 0.0, 0.0, 0.5]);
        set(&mut store, "g.gru.u_z", &[0.1, 0.2, 0.3, 0.4]);
        set(&mut store, "g.gru.b_z", &[0.0, 0.1]);
        set(&mut store, "g.gru.w_r", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut store, "g.gru.u_r", &[0.0; 4]);
        set(&mut store, "g.gru.w_h", &[1.0, -1.0, 0.0, 0.0]);
        set(&mut store, "g.gru.u_h", &[0.0, 0.0, 2.0, 1.0]);
        let x = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let h = g.final_states(&store, &x, &[(0, 1, 0)]).unwrap();

        let zv = [sigmoid(0.8), sigmoid(0.5)];
        let cv = [2f64.tanh(), (-0.5f64).tanh()];
        let v = [zv[0] * cv[0], (1.0 - zv[1]) + zv[1] * cv[1]];
        let zu = [sigmoid(0.1), sigmoid(0.3)];
        let u = [1.0 - zu[0], 0.0];
        let want = [u[0], u[1], v[0], v[1]];
        for (a, b) in h.data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "{:?} vs {want:?}", h.data);
        }
    }

    #[test]
    fn readout_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let g = Ggnn::new(&mut store, "g", small(2, 0, 2), &mut rng);
        let mut tape = Tape::<f64>::new();
        let p = tape.bind(&store);
        let s = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 6.0]));
        let one = g.readout(&mut tape, &p, s, Arc::new(vec![vec![1]])).unwrap();
        assert_eq!(tape.value(one).data, vec![3.0, 6.0]);
        let both = g.readout(&mut tape, &p, s, Arc::new(vec![vec![0, 1]])).unwrap();
        assert_eq!(tape.value(both).data, vec![2.0, 4.0]);
        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        let err = g.readout(&mut tape, &p, empty, Arc::new(vec![vec![]])).unwrap_err();
        assert_eq!(err, GgnnError::EmptyGraph);
    }

    #[test]
    fn edge_out_of_range_is_rejected() {
        let err = Edges::new(3, &[(0, 3, 0)], &small(2, 1, 2)).unwrap_err();
        assert_eq!(err, GgnnError::EdgeOutOfRange { src: 0, dst: 3, nodes: 3 });
    }

    #[test]
    fn relabeling_permutes_states_and_keeps_readout() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for typed in [false, true] {
            let mut store = ParamStore::<f64>::new();
            let cfg = GgnnConfig { typed_edges: typed, ..small(6, 3, 4) };
            let g = Ggnn::new(&mut store, "g", cfg, &mut rng);
            for _ in 0..20 {
                let n = rng.gen_range(1..12);
                let m = rng.gen_range(0..3 * n);
                let edges = random_graph(&mut rng, n, m);
                let x = rand_tensor(&mut rng, &[n, 4]);
                let mut perm: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    perm.swap(i, rng.gen_range(0..=i));
                }
                // node i becomes node perm[i]
                let mut px = Tensor::zeros(&[n, 4]);
                for i in 0..n {
                    px.data[perm[i] * 4..perm[i] * 4 + 4].copy_from_slice(x.row(i));
                }
                let pe: Vec<_> = edges.iter().map(|&(s, d, k)| (perm[s], perm[d], k)).collect();
                let h = g.final_states(&store, &x, &edges).unwrap();
                let ph = g.final_states(&store, &px, &pe).unwrap();
                for i in 0..n {
                    for (a, b) in h.row(i).iter().zip(ph.row(perm[i])) {
                        assert!((a - b).abs() < 1e-9);
                    }
                }
                let r = g.embed(&store, &x, &edges).unwrap();
                let pr = g.embed(&store, &px, &pe).unwrap();
                for (a, b) in r.iter().zip(&pr) {
                    assert!((a - b).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn gru_output_lies_between_state_and_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let ids = GruIds::register(&mut store, "gru", 5, &mut rng);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let p = tape.bind(&store);
            let m = tape.constant(rand_tensor(&mut rng, &[7, 5]).cast());
            let h = tape.constant(rand_tensor(&mut rng, &[7, 5]));
            let step = gru_cell(&mut tape, &p, &ids, m, h).unwrap();
            let (hv, cv, nv) = (tape.value(h), tape.value(step.candidate), tape.value(step.state));
            for i in 0..hv.len() {
                let (lo, hi) = (hv.data[i].min(cv.data[i]), hv.data[i].max(cv.data[i]));
                assert!(nv.data[i] >= lo - 1e-12 && nv.data[i] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn gru_cell_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let ids = GruIds::register(&mut store, "gru", 4, &mut rng);
        for id in [ids.b_z, ids.b_r, ids.b_h] {
            store.get_mut(id).value = rand_tensor(&mut rng, &[4]);
        }
        let m = rand_tensor(&mut rng, &[3, 4]);
        let h = rand_tensor(&mut rng, &[3, 4]);
        let r = grad_check_params(
            |t, p| {
                let (mv, hv) = (t.constant(m.clone()), t.constant(h.clone()));
                let s = gru_cell(t, p, &ids, mv, hv)?.state;
                let sq = t.mul(s, s)?;
                Ok(t.sum(sq))
            },
            &store,
            1e-4,
            1e-3,
            1,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn three_step_ggnn_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for readout in [Readout::Mean, Readout::Gated] {
            let mut store = ParamStore::<f64>::new();
            let cfg = GgnnConfig { readout, ..small(4, 3, 3) };
            let g = Ggnn::new(&mut store, "g", cfg, &mut rng);
            for p in store.iter_mut() {
                if p.name.contains(".b_") || p.name.ends_with("_b") {
                    p.value = rand_tensor(&mut rng, &p.value.shape.clone());
                }
            }
            let edges = random_graph(&mut rng, 5, 8);
            let e = Edges::new(5, &edges, &cfg).unwrap();
            let x = rand_tensor(&mut rng, &[5, 3]);
            let r = grad_check_params(
                |t, p| {
                    let xv = t.constant(x.clone());
                    let h = g.propagate(t, p, xv, &e).map_err(|e| match e {
                        GgnnError::Nn(n) => n,
                        other => panic!("{other}"),
                    })?;
                    let o = g.readout(t, p, h, Arc::new(vec![vec![0, 1, 2, 3, 4]])).unwrap();
                    let sq = t.mul(o, o)?;
                    Ok(t.sum(sq))
                },
                &store,
                1e-4,
                1e-3,
                2,
            )
            .unwrap();
            assert!(r.passed, "{readout:?} {r:?}");
        }
    }

    const TWO_CMP: &str = ".entry main
proc main:
  call left
  call right
  halt
proc left:
  call cmp
  ret
proc right:
  call cmp
  ret
proc cmp:
  mov r1, 1
  ret
proc never:
  ret
";

    #[test]
    fn cct_procedure_embedding() {
        let prog = parse_program(TWO_CMP, Dialect::DialectA).unwrap();
        let cct = profile_cct(&prog, &Memory::new(), CctConfig::default()).unwrap();
        assert_eq!(cct.nodes_of("cmp").len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = cct.nodes.len();
        let states = rand_tensor(&mut rng, &[n, 50]);
        let e = embed_cct_for_procedure(&cct, "cmp", &states);
        let [a, b] = cct.nodes_of("cmp")[..] else { unreachable!() };
        for j in 0..50 {
            assert!((e[j] - (states.row(a)[j] + states.row(b)[j]) / 2.0).abs() < 1e-12);
        }
        let left = cct.nodes_of("left")[0];
        assert_eq!(embed_cct_for_procedure(&cct, "left", &states), states.row(left));
        assert_eq!(embed_cct_for_procedure(&cct, "never", &states), vec![0.0; 50]);
    }
}
