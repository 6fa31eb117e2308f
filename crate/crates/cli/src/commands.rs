use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use serde_json::{json, Value};

use graphspy_core::corpus::{
    build_config, featurize_program, generator_version, mix_hybrid, random_inputs, CorpusError, GenConfig,
};
use graphspy_core::dataset::{read_jsonl_gz, read_split, write_atomic, write_split, SampleRecord};
use graphspy_core::isa::{parse_program, Dialect, Program};
use graphspy_core::model::{
    evaluate, filter_report, threshold, train, Checkpoint, Evaluation, Metrics, ModelConfig, ModelError,
    TrainConfig, TrainReport, Variant,
};
use graphspy_core::selfcheck::{gradient_suite, oracle_corpus_traces, oracle_random_traces, OracleCheck};
use graphspy_core::vm::{label_procedures, Run};

use crate::{
    Cli, CliError, Command, EvaluateArgs, FeaturizeArgs, GenerateArgs, HyperArgs, LabelArgs, PredictArgs,
    ProgramArgs, ReportArgs, SelfcheckArgs, TrainArgs,
};

pub fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::Generate(a) => generate(a, seed),
        Command::Label(a) => label(a, seed),
        Command::Featurize(a) => featurize(a, seed),
        Command::Train(a) => train_cmd(a, seed, cli.deterministic),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Predict(a) => predict(a, seed),
        Command::Report(a) => report(a, seed),
        Command::Selfcheck(a) => selfcheck(a, seed),
    }
}

/// Writes to stdout; a reader that hangs up early is not an error.
fn emit(text: &str) {
    let _ = io::stdout().lock().write_all(text.as_bytes());
}

fn print_json<T: Serialize>(v: &T) {
    emit(&format!("{}\n", serde_json::to_string_pretty(v).expect("serializable output")));
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(v).expect("serializable output");
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn model_err(e: ModelError) -> CliError {
    match e {
        ModelError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        other => CliError::Data(other.into()),
    }
}

fn corpus_err(e: CorpusError) -> CliError {
    match e {
        CorpusError::BadConfig(_) | CorpusError::BadRatios(_) => CliError::Usage(e.to_string()),
        other => CliError::Data(other.into()),
    }
}

fn need_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(anyhow!("{} is not a readable file", path.display())))
    }
}

fn need_dir(path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Data(anyhow!("{} is not a directory", path.display())))
    }
}

/// The parent of an output path must exist before any work starts.
fn need_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(CliError::Data(anyhow!("output directory {} does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

fn parse_dialect(s: &str) -> Result<Dialect, CliError> {
    match s {
        "A" | "a" => Ok(Dialect::DialectA),
        "B" | "b" => Ok(Dialect::DialectB),
        _ => Err(CliError::Usage(format!("dialect must be A or B, found `{s}`"))),
    }
}

fn parse_variant(s: &str) -> Result<Variant, CliError> {
    Variant::from_name(s.trim()).ok_or_else(|| {
        let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        CliError::Usage(format!("unknown variant `{s}`; expected one of {}", known.join(", ")))
    })
}

fn split_list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).collect()
}

fn read_program(a: &ProgramArgs) -> Result<(Program, String), CliError> {
    let dialect = parse_dialect(&a.dialect)?;
    need_file(&a.program)?;
    let text = fs::read_to_string(&a.program).with_context(|| format!("reading {}", a.program.display()))?;
    let program = parse_program(&text, dialect).with_context(|| format!("parsing {}", a.program.display()))?;
    Ok((program, text))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    need_file(path)?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| CliError::Data(anyhow!("{}: {e}", path.display())))
}

fn generate(a: GenerateArgs, seed: u64) -> Result<(), CliError> {
    let ratios: Vec<f64> = split_list(&a.ratios)
        .iter()
        .map(|r| r.parse::<f64>().map_err(|_| CliError::Usage(format!("bad ratio `{r}`"))))
        .collect::<Result<_, _>>()?;
    let ratios: [f64; 3] =
        ratios.try_into().map_err(|_| CliError::Usage("--ratios takes three comma-separated fractions".into()))?;
    let mut configs = Vec::new();
    for tag in split_list(&a.configs) {
        let mut c = GenConfig::standard_four()
            .into_iter()
            .find(|c| c.tag() == tag)
            .ok_or_else(|| CliError::Usage(format!("unknown config tag `{tag}`")))?;
        c.seed = seed;
        if let Some(p) = a.dead_store_injection {
            c.dead_store_injection = p;
        }
        if let Some(p) = a.call_density {
            c.call_density = p;
        }
        if let Some(p) = a.loop_probability {
            c.loop_probability = p;
        }
        c.validate().map_err(corpus_err)?;
        configs.push(c);
    }
    if configs.is_empty() {
        return Err(CliError::Usage("--configs is empty".into()));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let mut splits = Vec::new();
    let mut written = Vec::new();
    for c in &configs {
        let split = build_config(c, a.samples, ratios, seed).map_err(corpus_err)?;
        let dir = write_split(&a.out, &split).context("writing dataset")?;
        written.push(json!({ "dir": dir, "manifest": split.manifest }));
        splits.push(split);
    }
    if a.hybrid {
        let h = mix_hybrid(&splits, seed);
        let dir = write_split(&a.out, &h).context("writing dataset")?;
        written.push(json!({ "dir": dir, "manifest": h.manifest }));
    }
    print_json(&json!({ "datasets": written }));
    Ok(())
}

fn label(a: LabelArgs, seed: u64) -> Result<(), CliError> {
    if a.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let (program, _) = read_program(&a.source)?;
    let runs: Vec<Run> = (0..a.runs as u64)
        .map(|i| Run { init_memory: random_inputs(seed.wrapping_add(i)), max_steps: a.max_steps })
        .collect();
    print_json(&label_procedures(&program, &runs).labels);
    Ok(())
}

fn records_for(program: &Program, text: &str, seed: u64) -> Result<Vec<SampleRecord>, CliError> {
    featurize_program(program, "cli", program.dialect.tag(), &random_inputs(seed), text).map_err(corpus_err)
}

fn featurize(a: FeaturizeArgs, seed: u64) -> Result<(), CliError> {
    if let Some(out) = &a.out {
        need_parent(out)?;
    }
    let (program, text) = read_program(&a.source)?;
    let mut lines = String::new();
    for r in records_for(&program, &text, seed)? {
        lines.push_str(&serde_json::to_string(&r).expect("records serialize"));
        lines.push('\n');
    }
    match &a.out {
        Some(out) => write_atomic(out, lines.as_bytes()).with_context(|| format!("writing {}", out.display()))?,
        None => emit(&lines),
    }
    Ok(())
}

fn train_config(h: &HyperArgs, seed: u64) -> Result<TrainConfig, CliError> {
    if h.batch_size == 0 || h.epochs == 0 {
        return Err(CliError::Usage("--batch-size and --epochs must be positive".into()));
    }
    if !(h.lr.is_finite() && h.lr > 0.0) {
        return Err(CliError::Usage(format!("--lr must be positive, found {}", h.lr)));
    }
    Ok(TrainConfig {
        lr: h.lr,
        batch_size: h.batch_size,
        max_epochs: h.epochs,
        patience: h.patience,
        seed,
        freeze_embeddings: h.freeze_embeddings,
        w2v_epochs: h.w2v_epochs,
    })
}

fn train_cmd(a: TrainArgs, seed: u64, deterministic: bool) -> Result<(), CliError> {
    let variant = parse_variant(&a.hyper.variant)?;
    let tc = train_config(&a.hyper, seed)?;
    need_dir(&a.data)?;
    need_parent(&a.out)?;
    let split = read_split(&a.data, &generator_version()).context("loading dataset")?;
    let (mut ckpt, report) = train(&split.train, &split.val, &ModelConfig::with_variant(variant), &tc).map_err(model_err)?;
    ckpt.manifest.insert("dataset".into(), split.tag.clone());
    ckpt.manifest.insert("generator_version".into(), split.manifest.generator_version.clone());
    ckpt.manifest.insert("variant".into(), variant.name().into());
    ckpt.manifest.insert("deterministic".into(), deterministic.to_string());
    write_atomic(&a.out, &ckpt.to_bytes()).with_context(|| format!("writing {}", a.out.display()))?;
    print_json(&json!({ "checkpoint": a.out, "dataset": split.tag, "variant": variant.name(), "report": report }));
    Ok(())
}

#[derive(Serialize)]
struct EvaluationOut<'a> {
    overall: &'a Metrics,
    per_config: &'a BTreeMap<String, Metrics>,
    filter: graphspy_core::model::FilterReport,
}

fn evaluation_out<'a>(ev: &'a Evaluation, samples: &[SampleRecord]) -> EvaluationOut<'a> {
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let costs: Vec<u64> = samples.iter().map(|s| s.cost).collect();
    EvaluationOut {
        overall: &ev.overall,
        per_config: &ev.per_config,
        filter: filter_report(&threshold(&ev.probabilities, 0.5), &labels, &costs),
    }
}

fn ratio(r: Option<f64>) -> String {
    r.map_or_else(|| "undef".to_string(), |v| format!("{v:.4}"))
}

fn metrics_row(name: &str, m: &Metrics) -> String {
    format!(
        "{name:<24} {:>6} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9}",
        m.tp,
        m.fp,
        m.fn_,
        m.tn,
        ratio(m.precision),
        ratio(m.recall),
        ratio(m.accuracy)
    )
}

fn metrics_header(first: &str) -> String {
    format!("{first:<24} {:>6} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9}", "tp", "fp", "fn", "tn", "precision", "recall", "accuracy")
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<(), CliError> {
    if let Some(out) = &a.out {
        need_parent(out)?;
    }
    need_file(&a.split)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let samples = read_jsonl_gz(&a.split).context("loading split")?;
    let ev = evaluate(&ckpt.model, &samples).map_err(model_err)?;
    let out = evaluation_out(&ev, &samples);
    if let Some(path) = &a.out {
        write_json(path, &out)?;
    }
    if a.table {
        let mut t = metrics_header("config") + "\n";
        for (tag, m) in &ev.per_config {
            t += &(metrics_row(tag, m) + "\n");
        }
        t += &(metrics_row("overall", &ev.overall) + "\n");
        let f = &out.filter;
        t += &format!(
            "filter: skipped {:.4}, simulated speedup {:.3}, missed {} of {} positives\n",
            f.skipped_fraction, f.simulated_speedup, f.missed_dead_stores, f.positives
        );
        emit(&t);
    } else {
        print_json(&out);
    }
    Ok(())
}

fn predict(a: PredictArgs, seed: u64) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let (program, text) = read_program(&a.source)?;
    let records = records_for(&program, &text, seed)?;
    let probs = ckpt.model.predict_records(&records).map_err(model_err)?;
    let out: BTreeMap<&str, f64> = records.iter().map(|r| r.procedure.as_str()).zip(probs).collect();
    print_json(&out);
    Ok(())
}

#[derive(Serialize)]
struct ReportRow {
    config: String,
    variant: String,
    best_epoch: usize,
    test: Metrics,
}

fn dataset_dirs(root: &Path, configs: Option<&str>) -> Result<Vec<PathBuf>, CliError> {
    if let Some(list) = configs {
        let dirs: Vec<PathBuf> = split_list(list).iter().map(|t| root.join(t)).collect();
        for d in &dirs {
            need_dir(d)?;
        }
        return Ok(dirs);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).with_context(|| format!("listing {}", root.display()))? {
        let path = entry.context("listing dataset root")?.path();
        if path.join("manifest.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Data(anyhow!("no datasets under {}", root.display())));
    }
    Ok(dirs)
}

fn report(a: ReportArgs, seed: u64) -> Result<(), CliError> {
    let variants: Vec<Variant> = split_list(&a.variants).into_iter().map(parse_variant).collect::<Result<_, _>>()?;
    if variants.is_empty() {
        return Err(CliError::Usage("--variants is empty".into()));
    }
    let tc = train_config(&a.hyper, seed)?;
    need_dir(&a.data)?;
    if let Some(out) = &a.out {
        need_parent(out)?;
    }
    let dirs = dataset_dirs(&a.data, a.configs.as_deref())?;
    let mut rows = Vec::new();
    for dir in &dirs {
        let split = read_split(dir, &generator_version()).context("loading dataset")?;
        for &v in &variants {
            let (ckpt, rep): (Checkpoint, TrainReport) =
                train(&split.train, &split.val, &ModelConfig::with_variant(v), &tc).map_err(model_err)?;
            let ev = evaluate(&ckpt.model, &split.test).map_err(model_err)?;
            rows.push(ReportRow {
                config: split.tag.clone(),
                variant: v.name().to_string(),
                best_epoch: rep.best_epoch,
                test: ev.overall,
            });
        }
    }
    let body = json!({ "rows": rows });
    if let Some(path) = &a.out {
        write_json(path, &body)?;
    }
    if a.table {
        let mut t = metrics_header("config / variant") + "\n";
        for r in &rows {
            t += &(metrics_row(&format!("{} / {}", r.config, r.variant), &r.test) + "\n");
        }
        emit(&t);
    } else {
        print_json(&body);
    }
    Ok(())
}

fn selfcheck(a: SelfcheckArgs, seed: u64) -> Result<(), CliError> {
    if let Some(d) = &a.data {
        need_dir(d)?;
    }
    let gradients = gradient_suite().map_err(|e| CliError::Data(e.into()))?;
    let random = oracle_random_traces(a.traces, seed);
    let corpus: Option<OracleCheck> = match &a.data {
        Some(d) => {
            let split = read_split(d, &generator_version()).context("loading dataset")?;
            let all = split.train.iter().chain(&split.val).chain(&split.test);
            Some(oracle_corpus_traces(all, graphspy_core::corpus::MAX_STEPS).map_err(|e| CliError::Data(e.into()))?)
        }
        None => None,
    };
    let passed = gradients.iter().all(|g| g.passed) && random.passed() && corpus.as_ref().is_none_or(|c| c.passed());
    let body: Value = json!({
        "passed": passed,
        "gradients": gradients,
        "oracle_random": random,
        "oracle_corpus": corpus,
    });
    print_json(&body);
    if passed {
        Ok(())
    } else {
        Err(CliError::Numeric("selfcheck failed".into()))
    }
}
