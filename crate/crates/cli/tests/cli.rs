use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use ckd::corpus::Vocab;
use ckd::eval::{parse_report_csv, RunHistory, StepMetrics};
use ckd::model::{checkpoint, Model};
use ckd::quantify::QFunctionKind;
use ckd::seed::sha256_hex;
use ckd_cli::{ExperimentConfig, Layout, RunManifest};

fn domains(train: usize, test: usize) -> String {
    "ABCDE"
        .chars()
        .enumerate()
        .map(|(i, n)| {
            let tr = if n == 'E' { train / 10 } else { train };
            format!(
                "[[domains]]\nname = \"{n}\"\ntransform = \"reversal\"\nlexicon_seed = {}\nbase_lexicon_seed = 7\n\
                 shared_fraction = 0.35\nalphabet = 12\nsizes = {{ train = {tr}, dev = 30, test = {test} }}\n\
                 min_len = 3\nmax_len = 6\nzipf = 0.5\n\n",
                1000 + i
            )
        })
        .collect()
}

fn config_text(out_dir: &Path, order: &str, test: usize) -> String {
    format!(
        r#"seed = 3
out_dir = "{}"
order = "{order}"

[arch.teacher]
family = "attention"
embed_dim = 12
hidden_dim = 24
layers = 1
max_len = 6

[arch.student]
family = "attention"
embed_dim = 12
hidden_dim = 24
layers = 1
max_len = 6

[train]
epochs = 25
batch_size = 16
optimizer = {{ lr = 3e-3 }}

[distill]
epochs = 2
batch_size = 16

{}"#,
        out_dir.display(),
        domains(200, test)
    )
}

fn write_config(dir: &Path, order: &str, test: usize) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let p = dir.join("config.toml");
    fs::write(&p, config_text(&dir.join("out"), order, test)).unwrap();
    p
}

fn scratch(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-tests").join(name);
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn ckd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ckd")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ckd_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ckd")).args(args).env("RUST_LOG", "warn").env(key, value).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Corpora and trained domain models shared by the tests that only read
/// them. B is flagged malicious.
struct Prepared {
    config: PathBuf,
    cfg: ExperimentConfig,
    trained: Vec<ckd_cli::commands::TrainedModel>,
}

fn prepared() -> &'static Prepared {
    static P: OnceLock<Prepared> = OnceLock::new();
    P.get_or_init(|| {
        let dir = scratch("prepared");
        let config = write_config(&dir, "BC->A", 60);
        let cfg = ExperimentConfig::load(&config, &[]).unwrap();
        ckd_cli::gen_data(&cfg).unwrap();
        let trained = ckd_cli::train_teachers(&cfg, &["B".to_string()]).unwrap();
        Prepared { config, cfg, trained }
    })
}

fn hashes(files: &[PathBuf]) -> Vec<String> {
    files.iter().map(|f| sha256_hex(&fs::read(f).unwrap())).collect()
}

#[test]
fn gen_data_writes_three_splits_per_domain_and_is_deterministic() {
    let dir = scratch("gen");
    let config = write_config(&dir, "BCDE->A", 40);
    let cfg = ExperimentConfig::load(&config, &[]).unwrap();
    let first = ckd_cli::gen_data(&cfg).unwrap();
    assert_eq!(first.len(), 5 * 3 + 1);
    assert_eq!(fs::read_dir(Layout::new(&cfg).data_dir()).unwrap().count(), 16);
    let h1 = hashes(&first);
    let second = ckd_cli::gen_data(&cfg).unwrap();
    assert_eq!(first, second);
    assert_eq!(h1, hashes(&second));
}

#[test]
fn zero_size_split_is_a_config_error() {
    let dir = scratch("zero");
    let config = write_config(&dir, "BC->A", 0);
    let o = ckd(&["gen-data", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("invalid domain spec"), "{}", stderr(&o));
}

#[test]
fn flags_override_the_file() {
    let p = prepared();
    let cfg = ExperimentConfig::load(&p.config, &["distill.alpha=0.25".into(), "method=kd".into(), "order=CB->A".into()]).unwrap();
    assert_eq!(cfg.distill.alpha, 0.25);
    assert_eq!(cfg.method, ckd::trainer::Method::Kd);
    assert_eq!(cfg.order, "CB->A");
    assert_eq!(cfg.distill.seed, 3);
    for bad in ["bogus=1", "order=AB->A", "order=BZ->A", "distill.seed=9"] {
        let o = ckd(&["run", p.config.to_str().unwrap(), "--set", bad]);
        assert_eq!(o.status.code(), Some(2), "{bad}: {}", stderr(&o));
    }
    let o = ckd_env(&["gen-data", p.config.to_str().unwrap()], "CKD_THREADS", "0");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn weak_domain_model_is_worse_and_checkpoints_reload_exactly() {
    let p = prepared();
    let bleu = |d: &str| p.trained.iter().find(|t| t.domain == d).unwrap().dev_bleu;
    assert!(bleu("E") < bleu("B"), "E {} vs B {}", bleu("E"), bleu("B"));
    let layout = Layout::new(&p.cfg);
    let vocab = Vocab::load(&layout.vocab()).unwrap();
    for t in &p.trained {
        let m = checkpoint::load(&t.path).unwrap();
        assert!(m.is_frozen());
        m.check_vocab(&vocab).unwrap();
        let text = ckd::corpus::TextCorpus::load(&layout.corpus(&t.domain, ckd::corpus::CorpusRole::Dev)).unwrap();
        let dev = ckd::corpus::ParallelCorpus::encode(&text, &vocab, 6).unwrap();
        assert_eq!(ckd::eval::model_bleu(&m, &dev).unwrap().score, t.dev_bleu, "{}", t.domain);
        assert_eq!(m.meta.contains_key("malicious"), t.domain == "B");
    }
}

#[test]
fn train_teachers_without_corpora_is_a_data_error() {
    let dir = scratch("nodata");
    let config = write_config(&dir, "BC->A", 40);
    let o = ckd(&["train-teachers", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = ckd(&["train-teachers", config.to_str().unwrap(), "--malicious", "Z"]);
    assert_eq!(o.status.code(), Some(2));
}

fn run_with(overrides: &[&str]) -> ckd_cli::commands::RunResult {
    let p = prepared();
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ckd_cli::run(&ExperimentConfig::load(&p.config, &o).unwrap()).unwrap()
}

#[test]
fn runs_record_one_line_per_step_and_repeat_exactly() {
    let ckd_run = run_with(&["name=ckd-a"]);
    let text = fs::read_to_string(ckd_run.dir.join("history.jsonl")).unwrap();
    let hist = RunHistory::from_jsonl(&text).unwrap();
    assert_eq!(hist.len(), 1);
    assert_eq!(hist[0].steps.len(), 3);
    assert_eq!(hist[0].steps[1].teacher, "B");
    for t in 0..3 {
        assert!(ckd_run.dir.join(format!("step_{t}.ckpt")).exists());
    }

    let again = run_with(&["name=ckd-b"]);
    let strip = |s: &str| s.replace("ckd-a", "").replace("ckd-b", "");
    assert_eq!(strip(&text), strip(&fs::read_to_string(again.dir.join("history.jsonl")).unwrap()));

    let kd = run_with(&["method=kd"]);
    assert_eq!(kd.history.steps.len(), 3);
    assert_ne!(kd.history.steps[1..], ckd_run.history.steps[1..]);
}

#[test]
fn manifest_regenerates_the_corpora() {
    let r = run_with(&["name=manifest"]);
    let m = RunManifest::load(&r.dir.join("manifest.json")).unwrap();
    assert_eq!(m.code_hash.len(), 64);
    assert_eq!(m.checkpoints.len(), 3);
    assert!(m.teachers.iter().any(|t| t.domain == "B" && t.malicious));
    assert!(m.corpora.contains_key("A/train"));

    let mut cfg = m.config.clone();
    cfg.out_dir = scratch("regen");
    ckd_cli::gen_data(&cfg).unwrap();
    let layout = Layout::new(&cfg);
    for (key, hash) in &m.corpora {
        let (d, role) = key.split_once('/').unwrap();
        let p = layout.corpus(d, role.parse().unwrap());
        assert_eq!(&sha256_hex(&fs::read(p).unwrap()), hash, "{key}");
    }
}

#[test]
fn teachers_on_another_vocabulary_are_refused() {
    let p = prepared();
    let dir = scratch("vocab");
    let copy = |from: &Path, to: &Path| {
        fs::create_dir_all(to).unwrap();
        for e in fs::read_dir(from).unwrap() {
            let e = e.unwrap();
            fs::copy(e.path(), to.join(e.file_name())).unwrap();
        }
    };
    let src = Layout::new(&p.cfg);
    let config = write_config(&dir, "BC->A", 60);
    let cfg = ExperimentConfig::load(&config, &[]).unwrap();
    let dst = Layout::new(&cfg);
    copy(&src.data_dir(), &dst.data_dir());
    copy(&src.root.join("models"), &dst.root.join("models"));
    let other = Vocab::new(["x", "y"]).unwrap();
    let stranger = Model::new(cfg.arch_for("C"), &other, 1).unwrap().snapshot();
    checkpoint::save(&stranger, &dst.model("C")).unwrap();
    let o = ckd(&["run", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("vocabulary mismatch"), "{}", stderr(&o));
}

#[test]
fn correlate_writes_one_csv_per_kind() {
    let p = prepared();
    let studies = ckd_cli::correlate(&p.cfg, &QFunctionKind::ALL).unwrap();
    assert_eq!(studies.len(), 3);
    for s in &studies {
        assert_eq!(s.cells.len(), 25);
        let csv = Layout::new(&p.cfg).root.join(format!("correlation_{}.csv", s.kind.name()));
        assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 25 + 2);
    }
}

fn synthetic(method: &str, config: &str, bleu: &[f64]) -> RunHistory {
    let mut h = RunHistory::new(method, config);
    for &b in bleu {
        h.push(StepMetrics {
            step: 0,
            teacher: String::new(),
            bleu: b,
            delta_bleu: 0.0,
            ad: 0.0,
            pos: 0,
            neg: 0,
            neg_active: 0,
            epochs: 0,
            losses: Default::default(),
        });
    }
    h
}

#[test]
fn report_merges_methods_and_configurations() {
    let dir = scratch("report");
    let configs = ["ABDE->C", "ABCD->E", "BCDE->A", "ACDE->B", "ABCE->D", "EDCB->A"];
    let methods = ["ckd", "kd", "ewc", "multi_teacher"];
    let mut files = Vec::new();
    for (i, m) in methods.iter().enumerate() {
        let p = dir.join(format!("{m}.jsonl"));
        let mut text = String::new();
        for (j, c) in configs.iter().enumerate() {
            let b0 = 40.0 + j as f64;
            text += &synthetic(m, c, &[b0, b0 + 1.0 - i as f64, b0 - 2.0 * i as f64]).to_jsonl().unwrap();
        }
        fs::write(&p, text).unwrap();
        files.push(p);
    }
    let out = ckd(&["report", files[0].to_str().unwrap(), files[1].to_str().unwrap(), files[2].to_str().unwrap(), files[3].to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0].matches("BLEU").count(), 7);
    assert!(lines[0].contains("Average"));
    let body: Vec<&&str> = lines.iter().filter(|l| l.starts_with('1')).collect();
    assert_eq!(body.len(), 4);
    let cells: usize = body.iter().map(|l| l.matches('(').count() - 1).sum();
    assert_eq!(cells, 24);

    let rows = parse_report_csv(&fs::read_to_string(dir.join("report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4 * 6 * 3);
    for r in &rows {
        let i = methods.iter().position(|m| *m == r.method).unwrap() as f64;
        let j = configs.iter().position(|c| *c == r.config).unwrap() as f64;
        let b0 = 40.0 + j;
        let (b1, b2) = (b0 + 1.0 - i, b0 - 2.0 * i);
        let expected = [b0, b1, b2][r.step];
        assert_eq!(r.bleu, expected);
        let ad = [0.0, (b0 - b1).max(0.0), (b0 - b1).max(0.0) + (b1 - b2).max(0.0)][r.step];
        assert!((r.ad - ad).abs() < 1e-12);
    }

    let single = ckd(&["report", files[0].to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(single.status.code(), Some(0));
    assert!(!String::from_utf8(single.stdout).unwrap().contains(" kd "));
}

#[test]
fn report_rejects_other_schema_versions_and_inconsistent_ad() {
    let dir = scratch("schema");
    let h = synthetic("ckd", "BC->A", &[10.0, 9.0]);
    let old = dir.join("old.jsonl");
    fs::write(&old, h.to_jsonl().unwrap().replace("\"schema_version\":1", "\"schema_version\":0")).unwrap();
    let o = ckd(&["report", old.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let bad = dir.join("bad.jsonl");
    fs::write(&bad, h.to_jsonl().unwrap().replace("\"ad\":1.0", "\"ad\":0.5")).unwrap();
    let o = ckd(&["report", bad.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
