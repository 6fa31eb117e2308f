//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain
//! binary so the lines always reach the terminal.
//!
//! GRAPHSPY_ACCEPTANCE_SAMPLES shrinks the corpus for quick local runs; the
//! thresholds never change.

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use graphspy_core::cnn::{
    insert_isolated_node, pattern_sensitivity_probe, place_motif, rectangle_motif, Cnn, CnnKind, OUT_DIM,
};
use graphspy_core::corpus::{build_dataset, build_config, mix_hybrid, GenConfig, MAX_STEPS};
use graphspy_core::dataset::{DatasetSplit, SampleRecord};
use graphspy_core::ggnn::{Ggnn, GgnnConfig, Readout};
use graphspy_core::graph::{adjacency, build_cfg, AdjMatrix};
use graphspy_core::isa::{parse_program, Dialect};
use graphspy_core::model::{
    evaluate, filter_report, shuffle_labels, threshold, train, Evaluation, Metrics, ModelConfig, TrainConfig,
    Variant,
};
use graphspy_core::nn::{ParamStore, Tensor};
use graphspy_core::selfcheck::{gradient_suite, oracle_corpus_traces, oracle_random_traces};
use graphspy_core::vm::{detect_dead_stores, execute, Memory};

type Outcome = anyhow::Result<(bool, String)>;

const DATA_SEED: u64 = 1;
const RATIOS: [f64; 3] = [0.4, 0.3, 0.3];

// Listing 2 shape: the value stored on line 2 stays in r1, line 4 compares
// the register, line 6 stores again.
const REGISTER_COMPARE_FIXTURE: &str = "proc main:
  mov r1, 4
  st [r0+64], r1
  add r2, r1, 1
  cmp lt, r1, 9
  brf done
  st [r0+64], r2
done:
  ld r3, [r0+64]
  halt
";

// Source shape: write, read back from memory, write.
const STORE_LOAD_STORE_FIXTURE: &str = "proc main:
  mov r1, 4
  st [r0+64], r1
  ld r3, [r0+64]
  cmp lt, r3, 9
  brf done
  add r2, r3, 1
  st [r0+64], r2
done:
  ld r4, [r0+64]
  halt
";

// Four blocks whose adjacency rows 1..3 at columns 2 and 4 read 1,1,1,0,1,1.
const RECTANGLE: &str = ".entry r
proc r:
  mov r1, 1
b1:
  cmp eq, r1, 1
  brt b4
b2:
  cmp gt, r1, 2
  brt b2
b3:
  cmp eq, r1, 5
  brt b2
b4:
  ret
";

struct Trained {
    tag: String,
    variant: Variant,
    test: Evaluation,
    elapsed: Duration,
}

fn fit(split: &DatasetSplit, train_set: &[SampleRecord], variant: Variant) -> anyhow::Result<Trained> {
    let t = Instant::now();
    let (ckpt, report) = train(train_set, &split.val, &ModelConfig::with_variant(variant), &TrainConfig::default())?;
    let test = evaluate(&ckpt.model, &split.test)?;
    let elapsed = t.elapsed();
    eprintln!(
        "  trained {} on {} ({} samples): best epoch {} of {}, test accuracy {:.4}, {:.0}s",
        variant.name(),
        split.tag,
        train_set.len(),
        report.best_epoch,
        report.epochs.len(),
        test.overall.accuracy.unwrap_or(0.0),
        elapsed.as_secs_f64()
    );
    Ok(Trained { tag: split.tag.clone(), variant, test, elapsed })
}

fn acc(m: &Metrics) -> f64 {
    m.accuracy.unwrap_or(0.0)
}

fn c1_oracle(splits: &[DatasetSplit]) -> Outcome {
    let t = Instant::now();
    let random = oracle_random_traces(1000, 17);
    let corpus = oracle_corpus_traces(splits.iter().flat_map(|s| s.train.iter().chain(&s.val).chain(&s.test)), MAX_STEPS)?;
    let secs = t.elapsed().as_secs_f64();
    let pass = random.passed() && corpus.passed() && random.traces == 1000 && secs <= 60.0;
    Ok((
        pass,
        format!(
            "random {} traces {} mismatches; corpus {} traces ({} events) {} mismatches; {secs:.1}s",
            random.traces, random.mismatches, corpus.traces, corpus.events, corpus.mismatches
        ),
    ))
}

fn c2_fixtures() -> Outcome {
    let count = |text: &str| -> anyhow::Result<Vec<(u32, u32)>> {
        let p = parse_program(text, Dialect::DialectA)?;
        let ex = execute(&p, &Memory::new(), 1000);
        Ok(detect_dead_stores(&ex.trace).iter().map(|r| (r.killed_site.index, r.killing_site.index)).collect())
    };
    let dead = count(REGISTER_COMPARE_FIXTURE)?;
    let clean = count(STORE_LOAD_STORE_FIXTURE)?;
    // killed store is the block's second instruction (line 2)
    let pass = dead.len() == 1 && dead[0].0 == 1 && clean.is_empty();
    Ok((pass, format!("register-compare fixture {} dead store(s) {dead:?}; store/load/store {}", dead.len(), clean.len())))
}

fn c3_gradients() -> Outcome {
    let t = Instant::now();
    let suite = gradient_suite()?;
    let secs = t.elapsed().as_secs_f64();
    let worst = suite.iter().map(|c| c.worst_rel_error).fold(0.0, f64::max);
    let names: Vec<String> = suite.iter().map(|c| format!("{}={:.1e}", c.name, c.worst_rel_error)).collect();
    let pass = suite.len() == 6 && suite.iter().all(|c| c.passed) && worst <= 1e-3 && secs <= 300.0;
    Ok((pass, format!("{}; {secs:.1}s", names.join(" "))))
}

fn c4_ggnn() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let cfg = GgnnConfig::cfg();
    let g = Ggnn::new(&mut store, "g", cfg, &mut rng);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..16);
        let edges: Vec<(usize, usize, usize)> =
            (0..rng.gen_range(0..3 * n)).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..4))).collect();
        let x: Vec<f64> = (0..n * cfg.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut px = vec![0.0; x.len()];
        for i in 0..n {
            let d = cfg.input_dim;
            px[perm[i] * d..perm[i] * d + d].copy_from_slice(&x[i * d..i * d + d]);
        }
        let pe: Vec<_> = edges.iter().map(|&(s, d, k)| (perm[s], perm[d], k)).collect();
        let a = g.embed(&store, &Tensor::from_f64(&[n, cfg.input_dim], &x), &edges)?;
        let b = g.embed(&store, &Tensor::from_f64(&[n, cfg.input_dim], &px), &pe)?;
        for (u, v) in a.iter().zip(&b) {
            worst = worst.max((u - v).abs());
        }
    }

    // T = 0 with an identity projection returns the inputs
    let d = 70;
    let zero = GgnnConfig { state_dim: d, steps: 0, input_dim: d, edge_kinds: 4, typed_edges: false, readout: Readout::Mean };
    let mut s0 = ParamStore::<f64>::new();
    let g0 = Ggnn::new(&mut s0, "z", zero, &mut rng);
    let id = s0.id("z.proj").expect("projection registered");
    let eye: Vec<f64> = (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect();
    s0.get_mut(id).value = Tensor::from_f64(&[d, d], &eye);
    let x: Vec<f64> = (0..5 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let h = g0.final_states(&s0, &Tensor::from_f64(&[5, d], &x), &[(0, 1, 0), (1, 2, 1), (4, 3, 2)])?;
    let exact = h.data == x;
    Ok((worst <= 1e-6 && exact, format!("permutation max diff {worst:.2e} over 100 graphs; T=0 identity exact: {exact}")))
}

fn c5_cnn() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let cnn = Cnn::new(&mut store, "cnn", CnnKind::Resnet11, &mut rng);
    for p in store.iter_mut() {
        if p.name.ends_with(".b") {
            let n = p.value.len();
            p.value.data = (0..n).map(|_| rng.gen_range(-0.2..0.2)).collect();
        }
    }
    let mut lengths = Vec::new();
    for n in [1, 5, 8, 30, 100] {
        let mut a = AdjMatrix::zeros(n);
        for _ in 0..n {
            a.set(rng.gen_range(0..n), rng.gen_range(0..n), 1);
        }
        lengths.push(cnn.embed_adjacency(&store, &a).len());
    }
    let lengths_ok = lengths.iter().all(|&l| l == OUT_DIM) && OUT_DIM == 40;

    let r = 2 * cnn.receptive_radius() + 1;
    let motif = rectangle_motif();
    let ea = cnn.embed_adjacency(&store, &place_motif(&motif, 60, r, r));
    let eb = cnn.embed_adjacency(&store, &place_motif(&motif, 60, 60 - r - 3, r + 9));
    let shift = ea.iter().zip(&eb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);

    let prog = parse_program(RECTANGLE, Dialect::DialectA)?;
    let a = adjacency(&build_cfg(&prog.procedures["r"])?);
    let cells: Vec<u8> = (1..=3).flat_map(|i| [a.get(i, 2), a.get(i, 4)]).collect();
    let rect = rectangle_motif();
    let report = pattern_sensitivity_probe(&cnn, &store, &[("rect".to_string(), rect.clone())], &[16, 64]);
    let m = place_motif(&rect, 16, 5, 6);
    let ins = insert_isolated_node(&m, 2);
    let moved: Vec<u8> = (6..=8).flat_map(|i| [ins.get(i, 7), ins.get(i, 8)]).collect();
    let before = cnn.stem_activations(&store, &m);
    let after = cnn.stem_activations(&store, &ins);
    let insertion = before.iter().zip(&after).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let pattern_ok = cells == [1, 1, 1, 0, 1, 1] && moved == cells && insertion <= 1e-5 && report.spread("rect") <= 1e-5;
    Ok((
        lengths_ok && shift <= 1e-5 && pattern_ok,
        format!(
            "lengths {lengths:?}; translation diff {shift:.2e}; pattern {cells:?} after insertion {moved:?}, activation diff {insertion:.2e}"
        ),
    ))
}

fn c6_end_to_end(full: &[Trained], hybrid: &Trained, shuffled: &Trained) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for t in full.iter().chain([hybrid]) {
        let a = acc(&t.test.overall);
        pass &= a >= 0.80 && t.elapsed.as_secs() <= 30 * 60;
        parts.push(format!("{} {a:.4} ({:.0}s)", t.tag, t.elapsed.as_secs_f64()));
    }
    let control = acc(&shuffled.test.overall);
    pass &= (control - 0.5).abs() <= 0.05;
    let mean = full.iter().map(|t| acc(&t.test.overall)).sum::<f64>() / full.len() as f64;
    Ok((pass, format!("{}; mean {mean:.4}; shuffled control {control:.4}", parts.join(", "))))
}

fn c7_ablation(full: &Trained, singles: &[Trained]) -> Outcome {
    let f = acc(&full.test.overall);
    let mut pass = true;
    let mut parts = vec![format!("{} full {f:.4}", full.tag)];
    for s in singles {
        let a = acc(&s.test.overall);
        pass &= f >= a + 0.02;
        parts.push(format!("{} {a:.4}", s.variant.name()));
    }
    Ok((pass, parts.join(", ")))
}

fn c8_filter(full: &[Trained], splits: &[DatasetSplit]) -> Outcome {
    let mut predicted = Vec::new();
    let mut labels = Vec::new();
    let mut costs = Vec::new();
    for (t, s) in full.iter().zip(splits) {
        predicted.extend(threshold(&t.test.probabilities, 0.5));
        labels.extend(s.test.iter().map(|r| r.label));
        costs.extend(s.test.iter().map(|r| r.cost));
    }
    let f = filter_report(&predicted, &labels, &costs);
    let m = Metrics::from_predictions(&predicted, &labels);
    let recall = m.recall.unwrap_or(0.0);
    let identity = f.missed_dead_stores == m.fn_ && f.positives == m.tp + m.fn_;
    let ratio = f.missed_dead_stores as f64 / f.positives as f64;
    let pass = f.simulated_speedup >= 1.3 && identity && (ratio - (1.0 - recall)).abs() <= 1e-12;
    Ok((
        pass,
        format!(
            "speedup {:.3}, skipped {:.3}, missed {}/{} = {ratio:.6}, 1 - recall = {:.6}",
            f.simulated_speedup,
            f.skipped_fraction,
            f.missed_dead_stores,
            f.positives,
            1.0 - recall
        ),
    ))
}

fn c9_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut undefined = 0;
    for list in 0..50 {
        let n = rng.gen_range(1..120);
        // a few lists with no predicted positives exercise the undefined flag
        let p_rate = if list % 10 == 0 { 0.0 } else { rng.gen_range(0.1..0.9) };
        let pred: Vec<bool> = (0..n).map(|_| rng.gen_bool(p_rate)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
        for (p, l) in pred.iter().zip(&labels) {
            match (p, l) {
                (true, 1) => tp += 1,
                (true, _) => fp += 1,
                (false, 1) => fn_ += 1,
                (false, _) => tn += 1,
            }
        }
        let m = Metrics::from_predictions(&pred, &labels);
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        let want = (tp, fp, fn_, tn, ratio(tp, tp + fp), ratio(tp, tp + fn_), ratio(tp + tn, n));
        let got = (m.tp, m.fp, m.fn_, m.tn, m.precision, m.recall, m.accuracy);
        if want != got {
            return Ok((false, format!("list {list}: expected {want:?}, found {got:?}")));
        }
        undefined += usize::from(m.precision.is_none());
    }
    Ok((true, format!("50 lists match hand counts ({undefined} with undefined precision)")))
}

fn c10_determinism() -> Outcome {
    let split = build_config(&GenConfig::default(), 300, RATIOS, 23)?;
    let tc = TrainConfig { max_epochs: 3, seed: 5, ..TrainConfig::default() };
    let run = || -> anyhow::Result<(Vec<u8>, Evaluation)> {
        let (ckpt, _) = train(&split.train, &split.val, &ModelConfig::default(), &tc)?;
        let ev = evaluate(&ckpt.model, &split.test)?;
        Ok((ckpt.to_bytes(), ev))
    };
    let (a, ea) = run()?;
    let (b, eb) = run()?;
    let pass = a == b && ea == eb;
    Ok((pass, format!("checkpoints {} bytes, identical {}; metrics identical {}", a.len(), a == b, ea == eb)))
}

struct Suite {
    lines: Vec<(usize, bool)>,
}

impl Suite {
    fn check(&mut self, n: usize, name: &str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e:#}")),
            Err(_) => (false, "panicked".to_string()),
        };
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {verdict} {name}: {detail} [{:.1}s]", t.elapsed().as_secs_f64());
        let _ = std::io::stdout().flush();
        self.lines.push((n, pass));
    }
}

fn main() {
    // `cargo test -- --list` and filters are not supported here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let samples: usize =
        std::env::var("GRAPHSPY_ACCEPTANCE_SAMPLES").ok().and_then(|v| v.parse().ok()).unwrap_or(3000);
    let mut suite = Suite { lines: Vec::new() };

    suite.check(9, "metrics identities", c9_metrics);
    suite.check(2, "dead-store fixtures", c2_fixtures);
    suite.check(4, "GGNN properties", c4_ggnn);
    suite.check(5, "CNN contract", c5_cnn);
    suite.check(3, "gradient correctness", c3_gradients);
    suite.check(10, "determinism", c10_determinism);

    let t = Instant::now();
    let splits = match build_dataset(&GenConfig::standard_four(), samples, RATIOS, DATA_SEED) {
        Ok(s) => s,
        Err(e) => {
            for (n, name) in [(1, "oracle equivalence"), (6, "end-to-end"), (7, "ablation"), (8, "filtering")] {
                suite.check(n, name, || Ok((false, format!("dataset generation failed: {e}"))));
            }
            finish(suite);
        }
    };
    let tags: BTreeSet<&str> = splits.iter().map(|s| s.tag.as_str()).collect();
    eprintln!("  generated {:?} with {samples} samples each in {:.1}s", tags, t.elapsed().as_secs_f64());
    suite.check(1, "oracle equivalence", || c1_oracle(&splits));

    let trained = (|| -> anyhow::Result<_> {
        let full: Vec<Trained> = splits.iter().map(|s| fit(s, &s.train, Variant::Full)).collect::<Result<_, _>>()?;
        let hybrid_split = mix_hybrid(&splits, DATA_SEED);
        let hybrid = fit(&hybrid_split, &hybrid_split.train, Variant::Full)?;
        // val labels are shuffled too, otherwise early stopping selects on real labels
        let control = DatasetSplit {
            train: shuffle_labels(&splits[0].train, 99),
            val: shuffle_labels(&splits[0].val, 98),
            ..splits[0].clone()
        };
        let shuffled = fit(&control, &control.train, Variant::Full)?;
        let singles: Vec<Trained> = [Variant::W2v, Variant::Cnn, Variant::W2vGgnn]
            .into_iter()
            .map(|v| fit(&splits[0], &splits[0].train, v))
            .collect::<Result<_, _>>()?;
        Ok((full, hybrid, shuffled, singles))
    })();
    match trained {
        Ok((full, hybrid, shuffled, singles)) => {
            suite.check(6, "end-to-end accuracy", || c6_end_to_end(&full, &hybrid, &shuffled));
            suite.check(7, "ablation ordering", || c7_ablation(&full[0], &singles));
            suite.check(8, "oracle filtering", || c8_filter(&full, &splits));
        }
        Err(e) => {
            for (n, name) in [(6, "end-to-end accuracy"), (7, "ablation ordering"), (8, "oracle filtering")] {
                suite.check(n, name, || Ok((false, format!("training failed: {e:#}"))));
            }
        }
    }
    finish(suite);
}

fn finish(suite: Suite) -> ! {
    let failed: Vec<usize> = suite.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    let passed = suite.lines.len() - failed.len();
    println!("acceptance: {passed}/{} criteria passed", suite.lines.len());
    if failed.is_empty() {
        std::process::exit(0);
    }
    println!("failed criteria: {failed:?}");
    std::process::exit(1);
}
