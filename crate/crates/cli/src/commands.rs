//! The five commands. Each returns what it wrote so callers and tests can
//! inspect it; printing is left to `main`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ckd::corpus::{gen_domain_corpus, synthetic_vocab, CorpusRole, ParallelCorpus, TextCorpus, Vocab};
use ckd::eval::{model_bleu, render_report, running_degradation, Report, RunHistory};
use ckd::experiment::train_domain_models;
use ckd::model::{checkpoint, Model};
use ckd::quantify::{correlation_study, CorrelationStudy, QFunctionKind};
use ckd::seed::{derive_seed, sha256_hex};
use ckd::trainer::{run_method, StepData, Teacher, TeacherSequence};

use crate::config::ExperimentConfig;
use crate::manifest::{CheckpointRecord, RunManifest, Timing, CODE_HASH, MANIFEST_VERSION};
use crate::CliError;

const ROLES: [CorpusRole; 3] = [CorpusRole::Train, CorpusRole::Dev, CorpusRole::Test];
const MALICIOUS_KEY: &str = "malicious";

/// File locations under an experiment's output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self { root: cfg.out_dir.clone() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn vocab(&self) -> PathBuf {
        self.data_dir().join("vocab.txt")
    }

    pub fn corpus(&self, domain: &str, role: CorpusRole) -> PathBuf {
        self.data_dir().join(format!("{domain}.{role}.txt"))
    }

    pub fn model(&self, domain: &str) -> PathBuf {
        self.root.join("models").join(format!("{domain}.ckpt"))
    }

    /// `runs/<method>_<label>`, with the label reduced to safe characters.
    pub fn run_dir(&self, method: &str, label: &str) -> PathBuf {
        let safe: String = label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '-' })
            .collect();
        let mut collapsed = String::new();
        for c in safe.chars() {
            if !(c == '-' && collapsed.ends_with('-')) {
                collapsed.push(c);
            }
        }
        self.root.join("runs").join(format!("{method}_{collapsed}"))
    }
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| data_err(p, e))
}

fn file_hash(p: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&fs::read(p).map_err(|e| data_err(p, e))?))
}

/// Writes every domain's train/dev/test corpus and the shared vocabulary.
/// Output depends only on the config.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let layout = Layout::new(cfg);
    create_dir(&layout.data_dir())?;
    let vocab = synthetic_vocab(&cfg.domains)?;
    let mut written = vec![layout.vocab()];
    vocab.save(&layout.vocab()).map_err(|e| data_err(&layout.vocab(), e))?;
    for spec in &cfg.domains {
        let c = gen_domain_corpus(spec, derive_seed(cfg.seed, "data"))?;
        for (role, text) in ROLES.into_iter().zip([&c.train, &c.dev, &c.test]) {
            let p = layout.corpus(&spec.name, role);
            text.save(&p).map_err(|e| data_err(&p, e))?;
            written.push(p);
        }
        log::info!("gen-data domain={} train={} dev={} test={}", spec.name, c.train.pairs.len(), c.dev.pairs.len(), c.test.pairs.len());
    }
    Ok(written)
}

fn load_vocab(layout: &Layout) -> Result<Vocab, CliError> {
    let p = layout.vocab();
    Vocab::load(&p).map_err(|e| data_err(&p, format!("{e} (run gen-data first)")))
}

fn load_corpus(layout: &Layout, cfg: &ExperimentConfig, domain: &str, role: CorpusRole, vocab: &Vocab) -> Result<ParallelCorpus, CliError> {
    let p = layout.corpus(domain, role);
    let text = TextCorpus::load(&p).map_err(|e| data_err(&p, format!("{e} (run gen-data first)")))?;
    if text.domain != domain || text.role != role {
        return Err(data_err(&p, format!("holds {} {}, expected {domain} {role}", text.domain, text.role)));
    }
    let spec = cfg.domains.iter().find(|d| d.name == domain).expect("declared domain");
    ParallelCorpus::encode(&text, vocab, spec.max_len).map_err(|e| data_err(&p, e))
}

fn load_model(layout: &Layout, domain: &str, vocab: &Vocab) -> Result<Model, CliError> {
    let p = layout.model(domain);
    let m = checkpoint::load(&p).map_err(|e| data_err(&p, format!("{e} (run train-teachers first)")))?;
    m.check_vocab(vocab).map_err(|e| data_err(&p, e))?;
    Ok(m)
}

fn record(layout: &Layout, domain: &str, m: &Model) -> CheckpointRecord {
    CheckpointRecord {
        domain: domain.to_string(),
        path: layout.model(domain),
        param_hash: m.param_hash(),
        malicious: m.meta.get(MALICIOUS_KEY).is_some_and(|v| v == "true"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub domain: String,
    pub path: PathBuf,
    pub dev_bleu: f64,
    pub malicious: bool,
}

/// Trains and freezes one model per declared domain. Domains listed in
/// `malicious` are flagged in their checkpoint; the wrapper is applied when
/// a run uses them as teachers.
pub fn train_teachers(cfg: &ExperimentConfig, malicious: &[String]) -> Result<Vec<TrainedModel>, CliError> {
    for m in malicious {
        if !cfg.domains.iter().any(|d| &d.name == m) {
            return Err(CliError::Config(format!("--malicious names undeclared domain `{m}`")));
        }
    }
    let layout = Layout::new(cfg);
    let vocab = load_vocab(&layout)?;
    create_dir(&layout.root.join("models"))?;
    let mut out = Vec::new();
    for spec in &cfg.domains {
        let name = &spec.name;
        let data = ckd::experiment::DomainData {
            train: load_corpus(&layout, cfg, name, CorpusRole::Train, &vocab)?,
            dev: load_corpus(&layout, cfg, name, CorpusRole::Dev, &vocab)?,
            test: load_corpus(&layout, cfg, name, CorpusRole::Test, &vocab)?,
        };
        let domains = BTreeMap::from([(name.clone(), data)]);
        let mut model = train_domain_models(std::slice::from_ref(name), &domains, &vocab, cfg.arch_for(name), &cfg.train)?
            .pop()
            .expect("one model");
        let flagged = malicious.contains(name);
        if flagged {
            model.meta.insert(MALICIOUS_KEY.into(), "true".into());
        }
        let dev_bleu = model_bleu(&model, &domains[name].dev)?.score;
        let p = layout.model(name);
        checkpoint::save(&model, &p).map_err(|e| data_err(&p, e))?;
        out.push(TrainedModel { domain: name.clone(), path: p, dev_bleu, malicious: flagged });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub dir: PathBuf,
    pub history: RunHistory,
    pub manifest: RunManifest,
}

/// Runs the configured method over the teacher order, flushing one history
/// line and one checkpoint per step as it completes.
pub fn run(cfg: &ExperimentConfig) -> Result<RunResult, CliError> {
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let layout = Layout::new(cfg);
    let order = cfg.order()?;
    let vocab = load_vocab(&layout)?;

    let student = &order.student;
    let trans_domain = cfg.transfer.clone().unwrap_or_else(|| student.clone());
    let train = load_corpus(&layout, cfg, student, CorpusRole::Train, &vocab)?;
    let dev = load_corpus(&layout, cfg, student, CorpusRole::Dev, &vocab)?;
    let test = load_corpus(&layout, cfg, student, CorpusRole::Test, &vocab)?;
    let trans = if trans_domain == *student {
        train.clone()
    } else {
        let mut t = load_corpus(&layout, cfg, &trans_domain, CorpusRole::Train, &vocab)?;
        t.role = CorpusRole::Transfer;
        t
    };
    let mut corpora = BTreeMap::new();
    for d in [student, &trans_domain] {
        for role in ROLES {
            corpora.insert(format!("{d}/{role}"), file_hash(&layout.corpus(d, role))?);
        }
    }

    let student0 = load_model(&layout, student, &vocab)?;
    let mut teachers = Vec::new();
    let mut teacher_records = Vec::new();
    for name in &order.teachers {
        let m = load_model(&layout, name, &vocab)?;
        let rec = record(&layout, name, &m);
        teachers.push(Teacher { name: name.clone(), model: m, malicious: rec.malicious });
        teacher_records.push(rec);
    }
    let seq = TeacherSequence::new(teachers)?;

    let method = cfg.method;
    let label = cfg.label();
    let dir = layout.run_dir(method.name(), &label);
    create_dir(&dir)?;
    let history_path = dir.join("history.jsonl");
    let mut history_file = fs::File::create(&history_path).map_err(|e| data_err(&history_path, e))?;
    let mut checkpoints = Vec::new();
    let data = StepData { train: &train, trans: &trans, dev: &dev, test: &test };
    let out = run_method(method, &student0, &seq, &data, &cfg.distill, &label, &mut |m, snap| {
        let one = RunHistory { method: method.name().into(), config: label.clone(), steps: vec![m.clone()] };
        writeln!(history_file, "{}", one.jsonl_line(0)?)?;
        history_file.flush()?;
        let p = dir.join(format!("step_{}.ckpt", m.step));
        checkpoint::save(snap, &p)?;
        checkpoints.push(p);
        log::info!("run method={} step={} teacher={} bleu={:.2} ad={:.2}", method.name(), m.step, m.teacher, m.bleu, m.ad);
        Ok(())
    })?;

    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        code_hash: CODE_HASH.to_string(),
        config: cfg.clone(),
        vocab_hash: vocab.content_hash(),
        corpora,
        student0: record(&layout, student, &student0),
        teachers: teacher_records,
        history: history_path,
        checkpoints,
        timing: Timing { started_unix, seconds: started.elapsed().as_secs_f64() },
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(RunResult { dir, history: out.history, manifest })
}

/// Merges history files into one table and `report.csv` under `out_dir`.
pub fn report(histories: &[PathBuf], out_dir: &Path) -> Result<Report, CliError> {
    if histories.is_empty() {
        return Err(CliError::Config("report needs at least one history file".into()));
    }
    let mut runs = Vec::new();
    for p in histories {
        let text = fs::read_to_string(p).map_err(|e| data_err(p, e))?;
        let parsed = RunHistory::from_jsonl(&text).map_err(|e| data_err(p, e))?;
        for r in &parsed {
            let recomputed = running_degradation(&r.bleu());
            if r.steps.iter().zip(&recomputed).any(|(s, ad)| (s.ad - ad).abs() > 1e-9) {
                return Err(data_err(p, format!("stored AD of {} {} disagrees with its BLEU column", r.method, r.config)));
            }
        }
        runs.extend(parsed);
    }
    let rep = render_report(&runs)?;
    create_dir(out_dir)?;
    let csv = out_dir.join("report.csv");
    fs::write(&csv, &rep.csv).map_err(|e| data_err(&csv, e))?;
    Ok(rep)
}

/// Correlates mean Q with BLEU over every (domain model, domain test set)
/// pair and writes `correlation_<kind>.csv` for each kind.
pub fn correlate(cfg: &ExperimentConfig, kinds: &[QFunctionKind]) -> Result<Vec<CorrelationStudy>, CliError> {
    let layout = Layout::new(cfg);
    let vocab = load_vocab(&layout)?;
    let mut models = Vec::new();
    let mut tests = Vec::new();
    for spec in &cfg.domains {
        models.push(load_model(&layout, &spec.name, &vocab)?);
        tests.push(load_corpus(&layout, cfg, &spec.name, CorpusRole::Test, &vocab)?);
    }
    let cells: Vec<(&Model, &ParallelCorpus)> = models.iter().flat_map(|m| tests.iter().map(move |t| (m, t))).collect();
    let mut out = Vec::new();
    for &kind in kinds {
        let study = correlation_study(&cells, kind)?;
        let p = layout.root.join(format!("correlation_{}.csv", kind.name()));
        fs::write(&p, study.to_csv()).map_err(|e| data_err(&p, e))?;
        out.push(study);
    }
    Ok(out)
}
