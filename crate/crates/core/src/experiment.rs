//! Multi-domain experiment plumbing shared by the command line and the
//! end-to-end tests.

use std::collections::BTreeMap;

use crate::corpus::{gen_domain_corpus, synthetic_vocab, validate_domain_set, DomainSpec, ParallelCorpus, SplitSizes, Transform, Vocab};
use crate::error::{CkdError, Result};
use crate::model::{ArchConfig, ArchFamily, Model};
use crate::seed::derive_seed;
use crate::trainer::{train_model, StepData, Teacher, TeacherSequence, TrainConfig};

/// Teachers in arrival order and the student domain, from `"BCDE->A"`.
/// Single-letter names may be run together; longer names are comma
/// separated (`"news,law->med"`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeacherOrder {
    pub teachers: Vec<String>,
    pub student: String,
}

impl TeacherOrder {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = |m: &str| CkdError::InvalidConfig(format!("teacher order `{s}`: {m}"));
        let (lhs, rhs) = s.split_once("->").ok_or_else(|| bad("expected `TEACHERS->STUDENT`"))?;
        let student = rhs.trim().to_string();
        if student.is_empty() || student.contains("->") || student.contains(',') {
            return Err(bad("exactly one student domain must follow `->`"));
        }
        let lhs = lhs.trim();
        let teachers: Vec<String> = if lhs.contains(',') {
            lhs.split(',').map(|t| t.trim().to_string()).collect()
        } else {
            lhs.chars().filter(|c| !c.is_whitespace()).map(String::from).collect()
        };
        if teachers.is_empty() || teachers.iter().any(String::is_empty) {
            return Err(bad("no teachers"));
        }
        if teachers.contains(&student) {
            return Err(bad("the student domain cannot also be a teacher"));
        }
        Ok(Self { teachers, student })
    }

    pub fn check_domains<'a>(&self, known: impl Iterator<Item = &'a str> + Clone) -> Result<()> {
        for name in self.teachers.iter().chain([&self.student]) {
            if !known.clone().any(|k| k == name) {
                return Err(CkdError::InvalidConfig(format!("teacher order names undeclared domain `{name}`")));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for TeacherOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.teachers.iter().chain([&self.student]).all(|n| n.chars().count() == 1) {
            write!(f, "{}->{}", self.teachers.concat(), self.student)
        } else {
            write!(f, "{}->{}", self.teachers.join(","), self.student)
        }
    }
}

/// Encoded splits of one domain.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
}

impl DomainData {
    /// The student's own data: D_train and D_trans are its training split.
    pub fn step_data(&self) -> StepData<'_> {
        StepData { train: &self.train, trans: &self.train, dev: &self.dev, test: &self.test }
    }
}

/// Generates and encodes every domain with one shared vocabulary.
pub fn build_domains(specs: &[DomainSpec], seed: u64) -> Result<(Vocab, BTreeMap<String, DomainData>)> {
    validate_domain_set(specs)?;
    let vocab = synthetic_vocab(specs)?;
    let mut out = BTreeMap::new();
    for spec in specs {
        let c = gen_domain_corpus(spec, derive_seed(seed, "data"))?;
        let enc = |t| ParallelCorpus::encode(t, &vocab, spec.max_len);
        out.insert(spec.name.clone(), DomainData { train: enc(&c.train)?, dev: enc(&c.dev)?, test: enc(&c.test)? });
    }
    Ok((vocab, out))
}

/// Five same-transform domains sharing part of their lexicon. `E` gets a
/// tenth of the training data of the others.
pub fn desk_domain_specs(alphabet: usize, train: usize, dev: usize, test: usize) -> Vec<DomainSpec> {
    ["A", "B", "C", "D", "E"]
        .iter()
        .enumerate()
        .map(|(i, name)| DomainSpec {
            name: name.to_string(),
            transform: Transform::Reversal,
            shift: 1,
            lexicon_seed: 1000 + i as u64,
            base_lexicon_seed: 7,
            shared_fraction: 0.35,
            alphabet,
            sizes: SplitSizes { train: if *name == "E" { (train / 10).max(1) } else { train }, dev, test },
            min_len: 3,
            max_len: 8,
            zipf: 0.5,
        })
        .collect()
}

pub fn desk_arch(family: ArchFamily) -> ArchConfig {
    match family {
        ArchFamily::Attention => ArchConfig { family, embed_dim: 24, hidden_dim: 48, layers: 1, max_len: 8, dropout: 0.0 },
        ArchFamily::Recurrent => ArchConfig { family, embed_dim: 24, hidden_dim: 32, layers: 1, max_len: 8, dropout: 0.0 },
    }
}

/// Trains one model per listed domain on that domain's training split and
/// freezes it.
pub fn train_domain_models(
    names: &[String],
    domains: &BTreeMap<String, DomainData>,
    vocab: &Vocab,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<Vec<Model>> {
    names
        .iter()
        .map(|name| {
            let d = domains
                .get(name)
                .ok_or_else(|| CkdError::InvalidConfig(format!("unknown domain `{name}`")))?;
            let seed = derive_seed(cfg.seed, &format!("model/{name}"));
            let mut m = Model::new(arch, vocab, seed)?;
            let report = train_model(&mut m, &d.train, &d.dev, &TrainConfig { seed, ..cfg.clone() })?;
            log::info!("trained domain={name} epochs={} dev_ce={:.4}", report.epochs, report.best_dev_ce);
            m.meta.insert("domain".into(), name.clone());
            Ok(m.snapshot())
        })
        .collect()
}

/// Teachers for `order`, flagging the listed ones as malicious.
pub fn teacher_sequence(order: &TeacherOrder, models: &BTreeMap<String, Model>, malicious: &[String]) -> Result<TeacherSequence> {
    let teachers = order
        .teachers
        .iter()
        .map(|name| {
            let model = models
                .get(name)
                .ok_or_else(|| CkdError::InvalidConfig(format!("no teacher for domain `{name}`")))?
                .snapshot();
            Ok(Teacher { name: name.clone(), model, malicious: malicious.contains(name) })
        })
        .collect::<Result<Vec<_>>>()?;
    TeacherSequence::new(teachers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_orders() {
        let o = TeacherOrder::parse("BCDE->A").unwrap();
        assert_eq!(o.teachers, ["B", "C", "D", "E"]);
        assert_eq!(o.student, "A");
        assert_eq!(o.to_string(), "BCDE->A");
        let o = TeacherOrder::parse("news, law -> med").unwrap();
        assert_eq!(o.teachers, ["news", "law"]);
        assert_eq!(o.to_string(), "news,law->med");
        for bad in ["BCDE", "->A", "AB->A", "B->", "B->A->C"] {
            assert!(TeacherOrder::parse(bad).is_err(), "{bad}");
        }
        let o = TeacherOrder::parse("BC->A").unwrap();
        assert!(o.check_domains(["A", "B", "C"].into_iter()).is_ok());
        assert!(o.check_domains(["A", "B"].into_iter()).is_err());
    }

    #[test]
    fn desk_domains_are_valid_and_small() {
        let specs = desk_domain_specs(24, 50, 10, 10);
        let (vocab, domains) = build_domains(&specs, 1).unwrap();
        assert!(vocab.len() <= 64);
        assert_eq!(domains.len(), 5);
        assert_eq!(domains["E"].train.len(), 5);
        let m = Model::new(&desk_arch(ArchFamily::Attention), &vocab, 1).unwrap();
        assert!(m.param_count() <= 100_000);
        let r = Model::new(&desk_arch(ArchFamily::Recurrent), &vocab, 1).unwrap();
        assert!(r.param_count() <= 100_000);
    }
}
