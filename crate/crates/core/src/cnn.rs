//! Convolutional encoders over adjacency matrices. The matrix is read as a
//! one-channel image; a global spatial max makes the output independent of
//! the graph size.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::AdjMatrix;
use crate::nn::{glorot, he, NnError, ParamStore, Real, Tape, Tensor, Var};

/// Smallest spatial extent fed to the network; smaller matrices are
/// zero-padded on the bottom and right.
pub const MIN_SIZE: usize = 8;
pub const OUT_DIM: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CnnKind {
    Cnn3,
    Resnet7,
    Resnet11,
}

impl CnnKind {
    pub fn name(self) -> &'static str {
        match self {
            CnnKind::Cnn3 => "cnn3",
            CnnKind::Resnet7 => "resnet7",
            CnnKind::Resnet11 => "resnet11",
        }
    }

    pub fn from_name(s: &str) -> Option<CnnKind> {
        [CnnKind::Cnn3, CnnKind::Resnet7, CnnKind::Resnet11].into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvIds {
    pub w: usize,
    pub b: usize,
}

impl ConvIds {
    fn register<F: Real, R: Rng>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) -> ConvIds {
        let w = store.add(format!("{name}.w"), he(rng, &[cout, cin, k, k], cin * k * k));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        ConvIds { w, b }
    }

    fn apply<F: Real>(&self, tape: &mut Tape<F>, p: &[Var], x: Var, pad: usize) -> Result<Var, NnError> {
        tape.conv2d(x, p[self.w], p[self.b], 1, pad)
    }
}

/// `relu(conv2(relu(conv1(x))) + skip(x))`; `skip` is the identity unless
/// the channel count changes, then a 1x1 projection.
#[derive(Debug, Clone, Copy)]
pub struct ResidualBlock {
    pub conv1: ConvIds,
    pub conv2: ConvIds,
    pub proj: Option<ConvIds>,
}

impl ResidualBlock {
    pub(crate) fn register<F: Real, R: Rng>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, rng: &mut R) -> ResidualBlock {
        ResidualBlock {
            conv1: ConvIds::register(store, &format!("{name}.conv1"), cin, cout, 3, rng),
            conv2: ConvIds::register(store, &format!("{name}.conv2"), cout, cout, 3, rng),
            proj: (cin != cout).then(|| ConvIds::register(store, &format!("{name}.proj"), cin, cout, 1, rng)),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &[Var], x: Var) -> Result<Var, NnError> {
        let h = self.conv1.apply(tape, p, x, 1)?;
        let h = tape.relu(h);
        let h = self.conv2.apply(tape, p, h, 1)?;
        let skip = match &self.proj {
            Some(c) => c.apply(tape, p, x, 0)?,
            None => x,
        };
        let s = tape.add(h, skip)?;
        Ok(tape.relu(s))
    }
}

#[derive(Debug, Clone)]
pub struct Cnn {
    pub kind: CnnKind,
    stem: ConvIds,
    plain: Vec<ConvIds>,
    blocks: Vec<ResidualBlock>,
    head_conv: Option<ConvIds>,
    out_w: usize,
    out_b: usize,
}

impl Cnn {
    /// Registers parameters named `<prefix>.*`.
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, prefix: &str, kind: CnnKind, rng: &mut R) -> Cnn {
        let stem = ConvIds::register(store, &format!("{prefix}.stem"), 1, 16, 3, rng);
        let mut plain = Vec::new();
        let mut blocks = Vec::new();
        let mut head_conv = None;
        match kind {
            CnnKind::Cnn3 => {
                plain.push(ConvIds::register(store, &format!("{prefix}.conv2"), 16, 32, 3, rng));
                plain.push(ConvIds::register(store, &format!("{prefix}.conv3"), 32, 64, 3, rng));
            }
            CnnKind::Resnet7 => {
                blocks.push(ResidualBlock::register(store, &format!("{prefix}.block1"), 16, 16, rng));
                blocks.push(ResidualBlock::register(store, &format!("{prefix}.block2"), 16, 64, rng));
            }
            CnnKind::Resnet11 => {
                blocks.push(ResidualBlock::register(store, &format!("{prefix}.block1"), 16, 16, rng));
                blocks.push(ResidualBlock::register(store, &format!("{prefix}.block2"), 16, 32, rng));
                blocks.push(ResidualBlock::register(store, &format!("{prefix}.block3"), 32, 64, rng));
                head_conv = Some(ConvIds::register(store, &format!("{prefix}.head_conv"), 64, 64, 3, rng));
            }
        }
        let out_w = store.add(format!("{prefix}.out.w"), glorot(rng, &[64, OUT_DIM], 64, OUT_DIM));
        let out_b = store.add(format!("{prefix}.out.b"), Tensor::zeros(&[OUT_DIM]));
        Cnn { kind, stem, plain, blocks, head_conv, out_w, out_b }
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    /// Layers carrying weights: convolutions, projections and the output
    /// dense layer.
    pub fn weighted_layers(&self) -> usize {
        1 + self.plain.len()
            + self.blocks.iter().map(|b| 2 + b.proj.is_some() as usize).sum::<usize>()
            + self.head_conv.is_some() as usize
            + 1
    }

    /// How far, in cells, the influence of one input cell spreads through
    /// the 3x3 stack.
    pub fn receptive_radius(&self) -> usize {
        1 + self.plain.len() + 2 * self.blocks.len() + self.head_conv.is_some() as usize
    }

    /// Spatial feature maps before pooling, `[B, 64, H, W]`.
    pub fn features<F: Real>(&self, tape: &mut Tape<F>, p: &[Var], images: Var) -> Result<Var, NnError> {
        let h = self.stem.apply(tape, p, images, 1)?;
        let mut h = tape.relu(h);
        for c in &self.plain {
            let y = c.apply(tape, p, h, 1)?;
            h = tape.relu(y);
        }
        for b in &self.blocks {
            h = b.forward(tape, p, h)?;
        }
        if let Some(c) = &self.head_conv {
            let y = c.apply(tape, p, h, 1)?;
            h = tape.relu(y);
        }
        Ok(h)
    }

    /// `[B, 1, S, S] -> [B, 40]`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &[Var], images: Var) -> Result<Var, NnError> {
        let h = self.features(tape, p, images)?;
        let g = tape.global_maxpool(h)?;
        tape.dense(g, p[self.out_w], p[self.out_b])
    }

    /// Embeds matrices of mixed sizes; rows of the result follow `mats`.
    /// Matrices sharing a padded size run as one batch.
    pub fn embed_batch<F: Real>(&self, tape: &mut Tape<F>, p: &[Var], mats: &[&AdjMatrix]) -> Result<Var, NnError> {
        let mut by_size: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, m) in mats.iter().enumerate() {
            by_size.entry(padded_size(m.n)).or_default().push(i);
        }
        if by_size.len() == 1 {
            let x = tape.constant(image_batch(mats));
            return self.forward(tape, p, x);
        }
        let mut parts = Vec::new();
        let mut order = vec![0; mats.len()];
        let mut row = 0;
        for members in by_size.values() {
            let group: Vec<&AdjMatrix> = members.iter().map(|&i| mats[i]).collect();
            let x = tape.constant(image_batch(&group));
            parts.push(self.forward(tape, p, x)?);
            for &i in members {
                order[i] = row;
                row += 1;
            }
        }
        let all = tape.concat_rows(&parts)?;
        tape.gather_rows(all, Arc::new(order))
    }

    pub fn embed_adjacency<F: Real>(&self, store: &ParamStore<F>, a: &AdjMatrix) -> Vec<F> {
        let mut tape = Tape::new();
        let p = tape.bind(store);
        let x = tape.constant(image_batch(&[a]));
        let y = self.forward(&mut tape, &p, x).expect("cnn shapes are fixed at construction");
        tape.value(y).data.clone()
    }

    /// Globally max-pooled outputs of the first convolution layer.
    pub fn stem_activations<F: Real>(&self, store: &ParamStore<F>, a: &AdjMatrix) -> Vec<F> {
        let mut tape = Tape::new();
        let p = tape.bind(store);
        let x = tape.constant(image_batch(&[a]));
        let h = self.stem.apply(&mut tape, &p, x, 1).expect("stem shape");
        let h = tape.relu(h);
        let g = tape.global_maxpool(h).expect("stem shape");
        tape.value(g).data.clone()
    }
}

pub fn padded_size(n: usize) -> usize {
    n.max(MIN_SIZE)
}

/// Stacks matrices of one padded size into `[B, 1, S, S]`.
pub fn image_batch<F: Real>(mats: &[&AdjMatrix]) -> Tensor<F> {
    let s = padded_size(mats.iter().map(|m| m.n).max().unwrap_or(0));
    let mut data = vec![F::ZERO; mats.len() * s * s];
    for (b, m) in mats.iter().enumerate() {
        for i in 0..m.n {
            for j in 0..m.n {
                if m.get(i, j) != 0 {
                    data[b * s * s + i * s + j] = F::ONE;
                }
            }
        }
    }
    Tensor::new(vec![mats.len(), 1, s, s], data)
}

/// Copy of `a` with an isolated node inserted at index `at`; existing cells
/// keep their relative positions.
pub fn insert_isolated_node(a: &AdjMatrix, at: usize) -> AdjMatrix {
    let shift = |i: usize| if i >= at { i + 1 } else { i };
    let mut m = AdjMatrix::zeros(a.n + 1);
    for i in 0..a.n {
        for j in 0..a.n {
            m.set(shift(i), shift(j), a.get(i, j));
        }
    }
    m
}

/// `motif` (rows of 0/1) placed with its top-left corner at `(row, col)` in
/// an otherwise empty `size x size` matrix.
pub fn place_motif(motif: &[Vec<u8>], size: usize, row: usize, col: usize) -> AdjMatrix {
    let mut m = AdjMatrix::zeros(size);
    for (i, r) in motif.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            m.set(row + i, col + j, v);
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub pattern: String,
    pub size: usize,
    pub row: usize,
    pub col: usize,
    pub activations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Activations of an all-zero matrix.
    pub baseline: Vec<f64>,
    pub entries: Vec<ProbeEntry>,
}

impl ProbeReport {
    /// Largest activation difference between any two placements of `pattern`.
    pub fn spread(&self, pattern: &str) -> f64 {
        let rows: Vec<&ProbeEntry> = self.entries.iter().filter(|e| e.pattern == pattern).collect();
        let mut worst = 0.0f64;
        for a in &rows {
            for b in &rows {
                for (x, y) in a.activations.iter().zip(&b.activations) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        worst
    }
}

/// Max-pooled first-layer channel activations for each motif centred in
/// empty matrices of each size.
pub fn pattern_sensitivity_probe<F: Real>(
    cnn: &Cnn,
    store: &ParamStore<F>,
    patterns: &[(String, Vec<Vec<u8>>)],
    sizes: &[usize],
) -> ProbeReport {
    let to64 = |v: Vec<F>| v.into_iter().map(Real::to_f64).collect::<Vec<f64>>();
    let baseline = to64(cnn.stem_activations(store, &AdjMatrix::zeros(MIN_SIZE)));
    let mut entries = Vec::new();
    for (name, motif) in patterns {
        let (h, w) = (motif.len(), motif.iter().map(Vec::len).max().unwrap_or(0));
        for &size in sizes {
            if size < h + 2 || size < w + 2 {
                continue;
            }
            let (row, col) = ((size - h) / 2, (size - w) / 2);
            let m = place_motif(motif, size, row, col);
            entries.push(ProbeEntry {
                pattern: name.clone(),
                size,
                row,
                col,
                activations: to64(cnn.stem_activations(store, &m)),
            });
        }
    }
    ProbeReport { baseline, entries }
}

/// The rectangle motif of four blocks: rows of cells whose flattened form is
/// (1, 1, 1, 0, 1, 1).
pub fn rectangle_motif() -> Vec<Vec<u8>> {
    vec![vec![1, 1], vec![1, 0], vec![1, 1]]
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::tests::RECTANGLE;
    use crate::graph::{adjacency, build_cfg};
    use crate::isa::{parse_program, Dialect};
    use crate::nn::grad_check_params;

    fn randomize_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
        for p in store.iter_mut() {
            if p.name.ends_with(".b") {
                let n = p.value.len();
                p.value.data = (0..n).map(|_| rng.gen_range(-0.2..0.2)).collect();
            }
        }
    }

    fn net(kind: CnnKind, seed: u64) -> (Cnn, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cnn = Cnn::new(&mut store, "cnn", kind, &mut rng);
        randomize_biases(&mut store, &mut rng);
        (cnn, store)
    }

    #[test]
    fn layer_counts() {
        for (kind, layers) in [(CnnKind::Cnn3, 4), (CnnKind::Resnet7, 7), (CnnKind::Resnet11, 11)] {
            let (cnn, _) = net(kind, 1);
            assert_eq!(cnn.weighted_layers(), layers, "{kind:?}");
        }
        let (cnn, _) = net(CnnKind::Resnet11, 1);
        assert_eq!(cnn.blocks().len(), 3);
    }

    #[test]
    fn zero_network_on_zero_matrix_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let cnn = Cnn::new(&mut store, "cnn", CnnKind::Resnet11, &mut rng);
        for p in store.iter_mut() {
            p.value.data.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(cnn.embed_adjacency(&store, &AdjMatrix::zeros(5)), vec![0.0; OUT_DIM]);
    }

    #[test]
    fn output_length_is_size_agnostic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [CnnKind::Cnn3, CnnKind::Resnet7, CnnKind::Resnet11] {
            let (cnn, store) = net(kind, 3);
            for n in [1, 5, 8, 30, 50] {
                let mut a = AdjMatrix::zeros(n);
                for _ in 0..n {
                    a.set(rng.gen_range(0..n), rng.gen_range(0..n), 1);
                }
                let e = cnn.embed_adjacency(&store, &a);
                assert_eq!(e.len(), OUT_DIM);
                assert!(e.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn interior_motif_translation_invariance() {
        let (cnn, store) = net(CnnKind::Resnet11, 4);
        // far enough from every border that border effects never meet the motif
        let r = 2 * cnn.receptive_radius() + 1;
        let motif = rectangle_motif();
        let a = place_motif(&motif, 60, r, r);
        let b = place_motif(&motif, 60, 60 - r - 3, r + 9);
        let ea = cnn.embed_adjacency(&store, &a);
        let eb = cnn.embed_adjacency(&store, &b);
        for (x, y) in ea.iter().zip(&eb) {
            assert!((x - y).abs() <= 1e-5);
        }
        assert_ne!(ea, cnn.embed_adjacency(&store, &AdjMatrix::zeros(60)));
    }

    #[test]
    fn rectangle_fixture_reads_the_motif() {
        let prog = parse_program(RECTANGLE, Dialect::DialectA).unwrap();
        let a = adjacency(&build_cfg(&prog.procedures["r"]).unwrap());
        let cells: Vec<u8> = (1..=3).flat_map(|i| [a.get(i, 2), a.get(i, 4)]).collect();
        assert_eq!(cells, [1, 1, 1, 0, 1, 1]);
        let flat: Vec<u8> = rectangle_motif().concat();
        assert_eq!(flat, cells);
    }

    #[test]
    fn probe_is_size_and_insertion_invariant() {
        let (cnn, store) = net(CnnKind::Resnet11, 5);
        let rect = rectangle_motif();
        let patterns = vec![("rect".to_string(), rect.clone()), ("empty".to_string(), vec![vec![0, 0]])];
        let report = pattern_sensitivity_probe(&cnn, &store, &patterns, &[16, 64]);
        assert_eq!(report.entries.len(), 4);
        assert!(report.spread("rect") <= 1e-5);
        for e in report.entries.iter().filter(|e| e.pattern == "empty") {
            assert_eq!(e.activations, report.baseline);
        }

        // node inserted before the rectangle's rows and columns
        let m = place_motif(&rect, 16, 5, 6);
        let ins = insert_isolated_node(&m, 2);
        let moved: Vec<u8> = (6..=8).flat_map(|i| [ins.get(i, 7), ins.get(i, 8)]).collect();
        assert_eq!(moved, [1, 1, 1, 0, 1, 1]);
        let before = cnn.stem_activations(&store, &m);
        let after = cnn.stem_activations(&store, &ins);
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() <= 1e-5);
        }
    }

    #[test]
    fn residual_block_with_zero_branch_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let block = ResidualBlock::register(&mut store, "blk", 4, 4, &mut rng);
        for id in [block.conv1.w, block.conv1.b, block.conv2.w, block.conv2.b] {
            store.get_mut(id).value.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let x: Tensor<f64> = Tensor::new(vec![2, 4, 5, 5], (0..200).map(|_| rng.gen_range(0.0..1.0)).collect());
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let xv = tape.constant(x.clone());
        let y = block.forward(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn residual_block_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let block = ResidualBlock::register(&mut store, "blk", 2, 3, &mut rng);
        randomize_biases(&mut store, &mut rng);
        let x: Tensor<f64> = Tensor::new(vec![2, 2, 4, 4], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let r = grad_check_params(
            |t, p| {
                let xv = t.constant(x.clone());
                let y = block.forward(t, p, xv)?;
                let g = t.global_maxpool(y)?;
                let sq = t.mul(g, g)?;
                Ok(t.sum(sq))
            },
            &store,
            1e-4,
            1e-3,
            3,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn mixed_size_batch_matches_single_embeddings() {
        let (cnn, store) = net(CnnKind::Resnet7, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mats: Vec<AdjMatrix> = [3, 12, 5, 12, 9]
            .iter()
            .map(|&n| {
                let mut a = AdjMatrix::zeros(n);
                for i in 0..n.saturating_sub(1) {
                    a.set(i, i + 1, 1);
                    a.set(i, rng.gen_range(0..n), 1);
                }
                a
            })
            .collect();
        let refs: Vec<&AdjMatrix> = mats.iter().collect();
        let mut tape = Tape::new();
        let p = tape.bind(&store);
        let y = cnn.embed_batch(&mut tape, &p, &refs).unwrap();
        let out = tape.value(y);
        for (i, m) in mats.iter().enumerate() {
            let single = cnn.embed_adjacency(&store, m);
            for (a, b) in out.row(i).iter().zip(&single) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
