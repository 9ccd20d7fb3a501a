//! Command-line surface: argument parsing, file plumbing and exit codes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::corpus::synth::{generate, split_3_1_1, SynthConfig, SynthTask};
use crate::corpus::{
    iob2_to_bioes, read_conll_ner, read_conllu, write_conll_ner, write_conllu, AlphabetRole, BioesScheme, Corpus, Gold,
    LabelAlphabet, TagSequence,
};
use crate::distill::KdCase;
use crate::error::{usage, Error, Result};
use crate::model::{new_student, AnyModel, Family, ModelFile};
use crate::train_eval::{
    evaluate, merge_corpora, pseudo_label_corpus, train, Distillation, EvalReport, RunConfig, RunManifest,
};
use crate::verify::{self, Bound, Suite, VerifyReport};

/// Exit status for usage errors, unreadable inputs and malformed files.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for verification failures and runtime errors.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "structkd", version, about = "Structural knowledge distillation for sequence labelers and parsers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on gold data.
    TrainTeacher(TrainArgs),
    /// Train a model on gold data without a teacher (the no-KD baseline).
    TrainStudent(TrainArgs),
    /// Train a student from a teacher's marginals.
    Distill(DistillArgs),
    /// Score a model on annotated data.
    Eval(EvalArgs),
    /// Label sentences with a teacher's best structure.
    PseudoLabel(PseudoArgs),
    /// Check dynamic programs and gradients against brute force.
    Verify(VerifyArgs),
    /// Sample a corpus from a planted model.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Flat TOML run configuration; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hash_bits: Option<u32>,
    /// Forbid invalid BIOES transitions in CRF models.
    #[arg(long)]
    bioes_mask: bool,
    #[arg(long)]
    mfvi_iterations: Option<usize>,
    /// Also evaluate the selected checkpoint on this file.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Run manifest path (default: `<out>.manifest.json`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Per-epoch CSV path (default: `<out>.history.csv`).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Model family.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[arg(long)]
    case: Option<String>,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Unannotated sentences, pseudo-labeled by the teacher and added to
    /// the training data.
    #[arg(long)]
    unlabeled: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_parser = ["local", "global"])]
    temp_mode: Option<String>,
    /// Also divide the student's scores by the temperature.
    #[arg(long)]
    student_side_temperature: bool,
    #[arg(long)]
    anneal_rate: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct PseudoArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value = "all", value_parser = ["chain", "spans", "heads", "kd", "grad", "all"])]
    suite: String,
    /// Random instances per identity check.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_parser = ["chain", "heads", "spans"])]
    task: String,
    #[arg(long, default_value_t = 2500)]
    sentences: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    /// Entity types, plain tags or relations.
    #[arg(long, default_value_t = 3)]
    labels: usize,
    #[arg(long, default_value_t = 400)]
    vocab: usize,
    /// Chain task: plain tags instead of BIOES.
    #[arg(long)]
    plain_tags: bool,
    #[arg(long, default_value_t = 18)]
    hash_bits: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory for train/dev/test files and the planted model.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    json: bool,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status. Reports go to `out`, diagnostics to `err`.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Io(_) | Error::Parse { .. } | Error::Json(_) | Error::TooLarge { .. } => EXIT_USAGE,
        Error::Degenerate(_) | Error::Invariant(_) => EXIT_FAILURE,
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::TrainTeacher(a) | Command::TrainStudent(a) => cmd_train(a, out),
        Command::Distill(a) => cmd_distill(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::PseudoLabel(a) => cmd_pseudo(a, out),
        Command::Verify(a) => cmd_verify(a, out),
        Command::Synth(a) => cmd_synth(a, out),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Usage(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Usage(format!("cannot create {}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Reads a corpus in the format of `family`: CoNLL-U for parsers, CoNLL
/// NER columns otherwise. IOB2 tag sets are rewritten as BIOES.
pub fn read_corpus(path: &Path, family: Family) -> Result<Corpus> {
    if family.is_dependency() {
        read_conllu(open(path)?)
    } else {
        Ok(iob2_corpus_to_bioes(read_conll_ner(open(path)?)?))
    }
}

/// Rewrites a corpus whose tags use `B-`/`I-` prefixes but never `E-`/`S-`
/// as BIOES; other corpora are returned unchanged.
pub fn iob2_corpus_to_bioes(c: Corpus) -> Corpus {
    let labels = c.labels.labels();
    let has = |p: &str| labels.iter().any(|l| l.starts_with(p));
    if !(has("B-") || has("I-")) || has("E-") || has("S-") {
        return c;
    }
    let mut alphabet = LabelAlphabet::new(AlphabetRole::Tags);
    let records = c
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if let Some(Gold::Tags(t)) = &r.gold {
                let names: Vec<&str> = t.0.iter().map(|&i| c.labels.label(i).unwrap_or("O")).collect();
                let ids = iob2_to_bioes(&names).iter().map(|s| alphabet.intern(s)).collect();
                r.gold = Some(Gold::Tags(TagSequence(ids)));
            }
            r
        })
        .collect();
    Corpus { records, labels: alphabet }
}

fn write_corpus(path: &Path, corpus: &Corpus, dependency: bool) -> Result<()> {
    let mut w = create(path)?;
    if dependency {
        write_conllu(&mut w, corpus)?;
    } else {
        write_conll_ner(&mut w, corpus)?;
    }
    w.flush()?;
    Ok(())
}

fn load_model(path: &Path) -> Result<AnyModel> {
    Ok(ModelFile::read(open(path)?)?.model)
}

fn save_model(path: &Path, model: &AnyModel) -> Result<()> {
    let mut w = create(path)?;
    ModelFile::new(model.clone()).write(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Output alphabet of a new model of `family` trained on `corpora`.
fn model_labels(family: Family, corpora: &[&Corpus]) -> Result<LabelAlphabet> {
    let mut all = LabelAlphabet::new(corpora[0].labels.role());
    for c in corpora {
        for l in c.labels.labels() {
            all.intern(l);
        }
    }
    match family {
        Family::NerSpan => Ok(BioesScheme::from_tags(&all)?.types().clone()),
        Family::NerCrf | Family::NerMaxent => match BioesScheme::from_tags(&all) {
            Ok(s) => Ok(BioesScheme::canonical_tags(s.types())),
            Err(_) => Ok(all),
        },
        _ => Ok(all),
    }
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let mut rc = match &c.config {
        Some(p) => RunConfig::from_toml(
            &std::fs::read_to_string(p).map_err(|e| Error::Usage(format!("cannot read {}: {e}", p.display())))?,
        )?,
        None => RunConfig::default(),
    };
    macro_rules! over {
        ($($f:ident),*) => { $( if c.$f.is_some() { rc.$f = c.$f; } )* };
    }
    over!(epochs, lr, lr_decay, batch_size, seed, hash_bits, mfvi_iterations);
    if c.bioes_mask {
        rc.bioes_mask = Some(true);
    }
    Ok(rc)
}

fn configure(model: AnyModel, rc: &RunConfig) -> Result<AnyModel> {
    Ok(match model {
        AnyModel::NerCrf(m) if rc.bioes_mask == Some(true) => AnyModel::NerCrf(m.with_bioes_mask()?),
        AnyModel::Dep2nd(mut m) => {
            if let Some(k) = rc.mfvi_iterations {
                m.iterations = k;
            }
            AnyModel::Dep2nd(m)
        }
        m => m,
    })
}

fn finish_run(
    model: &AnyModel,
    mut manifest: RunManifest,
    out_path: &Path,
    c: &Common,
    out: &mut dyn Write,
) -> Result<i32> {
    if let Some(t) = &c.test {
        manifest.test = Some(evaluate(model, &read_corpus(t, model.family())?)?);
    }
    save_model(out_path, model)?;
    let mpath = c.manifest.clone().unwrap_or_else(|| with_suffix(out_path, ".manifest.json"));
    let mut w = create(&mpath)?;
    manifest.write_json(&mut w)?;
    w.flush()?;
    let hpath = c.history.clone().unwrap_or_else(|| with_suffix(out_path, ".history.csv"));
    let mut w = create(&hpath)?;
    manifest.write_history_csv(&mut w)?;
    w.flush()?;
    if c.json {
        writeln!(out, "{}", serde_json::to_string(&manifest)?)?;
    } else {
        writeln!(out, "{:>11}  {:>6}  {:>10}  {:>10}", "epoch", "lr", "loss", "dev")?;
        for r in &manifest.history {
            let dev = r.dev_metric.map_or("-".to_owned(), |d| format!("{:.2}", 100.0 * d));
            writeln!(out, "{:>11}  {:>6.4}  {:>10.4}  {:>10}", r.epoch, r.lr, r.train_loss, dev)?;
        }
        writeln!(out, "best epoch {}", manifest.best_epoch)?;
        if let Some(d) = &manifest.dev {
            writeln!(out, "dev")?;
            write_report(out, d)?;
        }
        if let Some(t) = &manifest.test {
            writeln!(out, "test")?;
            write_report(out, t)?;
        }
    }
    Ok(0)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let rc = run_config(&a.common)?;
    let family: Family = match a.task.as_ref().or(rc.family.as_ref()) {
        Some(f) => f.parse()?,
        None => return usage("--task is required"),
    };
    let train_data = read_corpus(&a.train, family)?;
    let dev = a.dev.as_ref().map(|p| read_corpus(p, family)).transpose()?;
    let mut corpora = vec![&train_data];
    corpora.extend(dev.as_ref());
    let labels = model_labels(family, &corpora)?;
    let model = configure(AnyModel::new(family, labels, rc.hash_bits.unwrap_or(18)), &rc)?;
    let outcome = train(model, &train_data, dev.as_ref(), None, &rc.train_config())?;
    finish_run(&outcome.model, outcome.manifest, &a.out, &a.common, out)
}

fn cmd_distill(a: DistillArgs, out: &mut dyn Write) -> Result<i32> {
    let mut rc = run_config(&a.common)?;
    if a.temperature.is_some() {
        rc.temperature = a.temperature;
    }
    if a.temp_mode.is_some() {
        rc.temperature_mode = a.temp_mode.clone();
    }
    if a.student_side_temperature {
        rc.temperature_student_side = Some(true);
    }
    if a.anneal_rate.is_some() {
        rc.anneal_rate = a.anneal_rate;
    }
    let case: KdCase = match a.case.as_ref().or(rc.case.as_ref()) {
        Some(c) => c.parse()?,
        None => return usage("--case is required"),
    };
    let teacher = load_model(&a.teacher)?;
    let student = configure(new_student(case, &teacher, rc.hash_bits.unwrap_or(teacher.hash_bits()))?, &rc)?;
    let family = student.family();
    let gold = read_corpus(&a.train, family)?;
    let dev = a.dev.as_ref().map(|p| read_corpus(p, family)).transpose()?;
    let (train_data, pseudo) = match &a.unlabeled {
        Some(p) => {
            let extra = pseudo_label_corpus(&teacher, &read_corpus(p, family)?)?;
            (merge_corpora(&gold, &extra), extra.records.len())
        }
        None => (gold, 0),
    };
    let config = rc.distill_config(case)?;
    let outcome = train(
        student,
        &train_data,
        dev.as_ref(),
        Some(Distillation {
            teacher: &teacher,
            config: &config,
        }),
        &rc.train_config(),
    )?;
    let mut manifest = outcome.manifest;
    manifest.pseudo_labeled_sentences = pseudo;
    finish_run(&outcome.model, manifest, &a.out, &a.common, out)
}

/// Writes an evaluation report as an aligned two-column table.
pub fn write_report(out: &mut dyn Write, r: &EvalReport) -> Result<()> {
    let rows: Vec<(&str, String)> = match r {
        EvalReport::EntityF1 {
            precision,
            recall,
            f1,
            correct,
            predicted,
            gold,
        } => vec![
            ("precision", pct(*precision)),
            ("recall", pct(*recall)),
            ("F1", pct(*f1)),
            ("correct", correct.to_string()),
            ("predicted", predicted.to_string()),
            ("gold", gold.to_string()),
        ],
        EvalReport::Attachment { uas, las, tokens } => {
            vec![("UAS", pct(*uas)), ("LAS", pct(*las)), ("tokens", tokens.to_string())]
        }
        EvalReport::TagAccuracy { accuracy, tokens } => {
            vec![("accuracy", pct(*accuracy)), ("tokens", tokens.to_string())]
        }
    };
    for (k, v) in rows {
        writeln!(out, "{k:>9} = {v}")?;
    }
    Ok(())
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let model = load_model(&a.model)?;
    let report = evaluate(&model, &read_corpus(&a.test, model.family())?)?;
    if a.json {
        writeln!(out, "{}", serde_json::to_string(&report)?)?;
    } else {
        write_report(out, &report)?;
    }
    Ok(0)
}

fn cmd_pseudo(a: PseudoArgs, out: &mut dyn Write) -> Result<i32> {
    let teacher = load_model(&a.teacher)?;
    let input = read_corpus(&a.input, teacher.family())?;
    let labeled = pseudo_label_corpus(&teacher, &input)?;
    write_corpus(&a.out, &labeled, teacher.family().is_dependency())?;
    if a.json {
        writeln!(out, "{}", json!({ "sentences": labeled.records.len(), "out": a.out }))?;
    } else {
        writeln!(out, "labeled {} sentences -> {}", labeled.records.len(), a.out.display())?;
    }
    Ok(0)
}

/// Writes a verification report as an aligned table.
pub fn write_verify_table(out: &mut dyn Write, r: &VerifyReport) -> Result<()> {
    let w = r.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
    writeln!(out, "{:<w$}  {:>9}  {:>10}  {:>12}  status", "check", "instances", "value", "bound")?;
    for c in &r.checks {
        let bound = match c.bound {
            Bound::AtMost => format!("<= {:.0e}", c.threshold),
            Bound::Above => format!("> {:.0e}", c.threshold),
        };
        let status = if c.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{:<w$}  {:>9}  {:>10.3e}  {:>12}  {status}", c.name, c.instances, c.value, bound)?;
    }
    let failed = r.checks.iter().filter(|c| !c.passed).count();
    writeln!(out, "{} checks, {failed} failed", r.checks.len())?;
    Ok(())
}

fn cmd_verify(a: VerifyArgs, out: &mut dyn Write) -> Result<i32> {
    let suite: Suite = a.suite.parse()?;
    let report = verify::run(suite, a.instances, a.seed)?;
    if a.json {
        writeln!(out, "{}", serde_json::to_string(&report)?)?;
    } else {
        write_verify_table(out, &report)?;
    }
    Ok(if report.passed() { 0 } else { EXIT_FAILURE })
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let task: SynthTask = a.task.parse()?;
    let mut cfg = SynthConfig::new(task, a.sentences, a.max_len, a.labels, a.seed);
    cfg.vocab = a.vocab;
    cfg.plain_tags = a.plain_tags;
    cfg.hash_bits = a.hash_bits;
    let data = generate(&cfg)?;
    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| Error::Usage(format!("cannot create {}: {e}", a.out_dir.display())))?;
    let dep = task == SynthTask::Heads;
    let ext = if dep { "conllu" } else { "conll" };
    let (tr, dev, te) = split_3_1_1(&data.corpus);
    let mut written = Vec::new();
    for (name, c) in [("train", &tr), ("dev", &dev), ("test", &te)] {
        let p = a.out_dir.join(format!("{name}.{ext}"));
        write_corpus(&p, c, dep)?;
        written.push(p);
    }
    let planted = a.out_dir.join("planted.model.json");
    save_model(&planted, &data.planted)?;
    written.push(planted);
    if a.json {
        writeln!(out, "{}", json!({ "files": written, "sentences": [tr.records.len(), dev.records.len(), te.records.len()] }))?;
    } else {
        for p in written {
            writeln!(out, "{}", p.display())?;
        }
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run(args.iter().copied(), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let (code, _, err) = run_str(&["structkd", "verify", "--bogus"]);
        assert_eq!(code, EXIT_USAGE, "{err}");
    }

    #[test]
    fn missing_file_is_usage_error() {
        let (code, _, _) = run_str(&["structkd", "eval", "--model", "/nonexistent/m.json", "--test", "/nonexistent/t"]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn iob2_is_rewritten() {
        let c = read_conll_ner("a B-PER\nb I-PER\nc O\n".as_bytes()).unwrap();
        let c = iob2_corpus_to_bioes(c);
        let names: Vec<&str> = c.records[0].tags().unwrap().0.iter().map(|&i| c.labels.label(i).unwrap()).collect();
        assert_eq!(names, ["B-PER", "E-PER", "O"]);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run_str(&["structkd", "--help"]).0, 0);
    }
}
