//! Synthetic multi-domain parallel corpora, the shared vocabulary, and the
//! transfer-tuple view of a corpus.
//!
//! A domain is a deterministic "translation" function: every source token is
//! mapped through a lexicon and the mapped sequence is then reordered by a
//! transform (identity, reversal, cyclic shift, interleave). Domains share a
//! fraction of the lexicon with a common base language, so teachers trained
//! on one domain are partially right (and partially confidently wrong) on
//! another.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{CkdError, Result};
use crate::seed::{rng_for, sha256_hex};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Shared token inventory. Ids 0..4 are always the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from ordinary (non-special) tokens, in the given
    /// order. Duplicates are dropped after their first occurrence.
    pub fn new<I, S>(ordinary: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for tok in ordinary {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(CkdError::Format(format!("invalid token {tok:?}")));
            }
            if index.contains_key(&tok) {
                continue;
            }
            index.insert(tok.clone(), tokens.len() as u32);
            tokens.push(tok);
        }
        if tokens.len() < 5 {
            return Err(CkdError::Empty("vocabulary has no ordinary tokens"));
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Decodes ids up to (not including) the first EOS.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]).to_string())
            .collect()
    }

    pub fn check_id(&self, id: u32) -> Result<()> {
        if (id as usize) < self.len() {
            Ok(())
        } else {
            Err(CkdError::TokenOutOfRange { id, size: self.len() })
        }
    }

    /// Content hash used to refuse mixing models and corpora built on
    /// different vocabularies.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_file_string().as_bytes())
    }

    /// One token per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIAL_TOKENS.len() || lines[..4] != SPECIAL_TOKENS {
            return Err(CkdError::Format("vocab file must start with the four special tokens".into()));
        }
        Self::new(lines[4..].iter().map(|s| s.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_string(&fs::read_to_string(path)?)
    }
}

/// Union of every token in the given corpora, specials prepended.
pub fn build_vocab(corpora: &[TextCorpus]) -> Result<Vocab> {
    if corpora.is_empty() {
        return Err(CkdError::Empty("build_vocab needs at least one corpus"));
    }
    let mut set = BTreeSet::new();
    for c in corpora {
        for p in &c.pairs {
            set.extend(p.source.iter().cloned());
            set.extend(p.target.iter().cloned());
        }
    }
    Vocab::new(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusRole {
    Train,
    Dev,
    Test,
    Transfer,
}

impl fmt::Display for CorpusRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusRole::Train => "train",
            CorpusRole::Dev => "dev",
            CorpusRole::Test => "test",
            CorpusRole::Transfer => "transfer",
        })
    }
}

impl FromStr for CorpusRole {
    type Err = CkdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(CorpusRole::Train),
            "dev" => Ok(CorpusRole::Dev),
            "test" => Ok(CorpusRole::Test),
            "transfer" => Ok(CorpusRole::Transfer),
            other => Err(CkdError::Format(format!("unknown corpus role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TextPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

/// A tokenized corpus before vocabulary lookup. This is what lives on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextCorpus {
    pub domain: String,
    pub role: CorpusRole,
    pub pairs: Vec<TextPair>,
}

impl TextCorpus {
    pub fn to_file_string(&self) -> String {
        let mut s = format!("#domain={} role={}\n", self.domain, self.role);
        for p in &self.pairs {
            s.push_str(&p.source.join(" "));
            s.push('\t');
            s.push_str(&p.target.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_file_string().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_file_string().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| CkdError::Format(format!("{}: empty corpus file", path.display())))??;
        let (domain, role) = parse_header(&header)?;
        let mut pairs = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (src, tgt) = line.split_once('\t').ok_or_else(|| {
                CkdError::Format(format!("{}:{}: missing tab separator", path.display(), lineno + 2))
            })?;
            let source: Vec<String> = src.split_whitespace().map(String::from).collect();
            let target: Vec<String> = tgt.split_whitespace().map(String::from).collect();
            if source.is_empty() || target.is_empty() {
                return Err(CkdError::Format(format!(
                    "{}:{}: empty sentence",
                    path.display(),
                    lineno + 2
                )));
            }
            pairs.push(TextPair { source, target });
        }
        if pairs.is_empty() {
            return Err(CkdError::Format(format!("{}: no sentence pairs", path.display())));
        }
        Ok(Self { domain, role, pairs })
    }
}

fn parse_header(line: &str) -> Result<(String, CorpusRole)> {
    let rest = line
        .strip_prefix('#')
        .ok_or_else(|| CkdError::Format(format!("bad corpus header {line:?}")))?;
    let mut domain = None;
    let mut role = None;
    for field in rest.split_whitespace() {
        match field.split_once('=') {
            Some(("domain", v)) => domain = Some(v.to_string()),
            Some(("role", v)) => role = Some(v.parse()?),
            _ => return Err(CkdError::Format(format!("bad corpus header field {field:?}"))),
        }
    }
    match (domain, role) {
        (Some(d), Some(r)) => Ok((d, r)),
        _ => Err(CkdError::Format(format!("corpus header needs domain and role: {line:?}"))),
    }
}

/// Source `x_1..x_I` and EOS-terminated target `y_1..y_J`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

impl SentencePair {
    /// Target without the trailing EOS.
    pub fn reference(&self) -> &[u32] {
        match self.target.last() {
            Some(&EOS) => &self.target[..self.target.len() - 1],
            _ => &self.target,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pub domain: String,
    pub role: CorpusRole,
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    /// Maps a text corpus through the vocabulary and appends EOS to targets.
    pub fn encode(text: &TextCorpus, vocab: &Vocab, max_len: usize) -> Result<Self> {
        if text.pairs.is_empty() {
            return Err(CkdError::Empty("corpus has no sentence pairs"));
        }
        let mut pairs = Vec::with_capacity(text.pairs.len());
        for p in &text.pairs {
            if p.source.len() > max_len || p.target.len() > max_len {
                return Err(CkdError::Format(format!(
                    "sentence longer than max length {max_len} in domain {}",
                    text.domain
                )));
            }
            let source = vocab.encode(&p.source);
            let mut target = vocab.encode(&p.target);
            target.push(EOS);
            pairs.push(SentencePair { source, target });
        }
        Ok(Self { domain: text.domain.clone(), role: text.role, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn target_tokens(&self) -> usize {
        self.pairs.iter().map(|p| p.target.len()).sum()
    }

    pub fn check_ids(&self, vocab_size: usize) -> Result<()> {
        for p in &self.pairs {
            for &id in p.source.iter().chain(&p.target) {
                if id as usize >= vocab_size || id == PAD {
                    return Err(CkdError::TokenOutOfRange { id, size: vocab_size });
                }
            }
        }
        Ok(())
    }
}

/// One unit of comparison and distillation: gold token `y_j` given the gold
/// prefix `y_<j` and the source `x`. `origin` is `(sentence index, j)` with
/// `j` counted from 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TransferTuple {
    pub target_token: u32,
    pub prefix: Vec<u32>,
    pub source: Vec<u32>,
    pub origin: (usize, usize),
}

impl TransferTuple {
    pub fn position(&self) -> usize {
        self.origin.1
    }
}

/// Every target position of every sentence, EOS included.
pub fn as_transfer_tuples(corpus: &ParallelCorpus) -> impl Iterator<Item = TransferTuple> + '_ {
    corpus.pairs.iter().enumerate().flat_map(|(n, pair)| {
        (1..=pair.target.len()).map(move |j| TransferTuple {
            target_token: pair.target[j - 1],
            prefix: pair.target[..j - 1].to_vec(),
            source: pair.source.clone(),
            origin: (n, j),
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    /// Position-preserving: `y_i = lex(x_i)`.
    #[serde(alias = "identity-with-lexicon-map")]
    Identity,
    Reversal,
    /// Rotate left by `DomainSpec::shift`.
    CyclicShift,
    /// Riffle the first and second halves: `x_1, x_{h+1}, x_2, x_{h+2}, ...`.
    Interleave,
}

impl Transform {
    /// Reorders an already lexicon-mapped sequence.
    pub fn apply<T: Clone>(self, tokens: &[T], shift: usize) -> Vec<T> {
        let n = tokens.len();
        match self {
            Transform::Identity => tokens.to_vec(),
            Transform::Reversal => tokens.iter().rev().cloned().collect(),
            Transform::CyclicShift => {
                if n == 0 {
                    return Vec::new();
                }
                let k = shift % n;
                tokens[k..].iter().chain(&tokens[..k]).cloned().collect()
            }
            Transform::Interleave => {
                let h = n.div_ceil(2);
                let (first, second) = tokens.split_at(h);
                let mut out = Vec::with_capacity(n);
                for i in 0..h {
                    out.push(first[i].clone());
                    if let Some(t) = second.get(i) {
                        out.push(t.clone());
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

fn default_shift() -> usize {
    1
}

fn default_zipf() -> f64 {
    1.0
}

/// Recipe for one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub transform: Transform,
    #[serde(default = "default_shift")]
    pub shift: usize,
    /// Seeds the domain-private part of the lexicon and the domain's source
    /// token frequency ranking.
    pub lexicon_seed: u64,
    /// Seeds the base lexicon shared by every domain of one experiment.
    #[serde(default)]
    pub base_lexicon_seed: u64,
    /// Fraction of source tokens translated by the shared base lexicon.
    #[serde(default)]
    pub shared_fraction: f64,
    /// Number of distinct source (and target) word types.
    pub alphabet: usize,
    pub sizes: SplitSizes,
    pub min_len: usize,
    pub max_len: usize,
    /// Zipf exponent of the source token distribution.
    #[serde(default = "default_zipf")]
    pub zipf: f64,
}

pub fn source_token(i: usize) -> String {
    format!("s{i}")
}

pub fn target_token(i: usize) -> String {
    format!("t{i}")
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CkdError::InvalidSpec(format!("domain {}: {m}", self.name)));
        if self.name.is_empty() || self.name.chars().any(char::is_whitespace) {
            return bad("name must be a non-empty word".into());
        }
        if self.sizes.train == 0 || self.sizes.dev == 0 || self.sizes.test == 0 {
            return bad(format!("split sizes must be > 0, got {:?}", self.sizes));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("empty length range {}..={}", self.min_len, self.max_len));
        }
        if self.alphabet < 2 {
            return bad("alphabet must have at least 2 word types".into());
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return bad(format!("shared_fraction {} outside [0, 1]", self.shared_fraction));
        }
        if !(self.zipf.is_finite() && self.zipf >= 0.0) {
            return bad(format!("zipf exponent {} must be >= 0", self.zipf));
        }
        Ok(())
    }

    /// Source index -> target index. The first `shared` entries of a base
    /// ranking use the base permutation; the rest are deranged relative to it
    /// by a domain-specific cycle.
    pub fn lexicon(&self) -> Vec<usize> {
        let n = self.alphabet;
        let mut base_rng = rng_for(self.base_lexicon_seed, "lexicon/base");
        let mut base: Vec<usize> = (0..n).collect();
        base.shuffle(&mut base_rng);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut base_rng);
        let shared = (self.shared_fraction * n as f64).round() as usize;
        let private: Vec<usize> = order[shared.min(n)..].to_vec();

        let mut lex = base.clone();
        if private.len() >= 2 {
            // Sattolo's algorithm: a single cycle, so no private token keeps its base target.
            let mut rng = rng_for(self.lexicon_seed, "lexicon/private");
            let mut cycle = private.clone();
            for i in (1..cycle.len()).rev() {
                let j = rng.random_range(0..i);
                cycle.swap(i, j);
            }
            for (k, &s) in private.iter().enumerate() {
                lex[s] = base[cycle[k]];
            }
        }
        lex
    }

    /// Translates a source sentence given as word-type indices.
    pub fn translate(&self, source: &[usize], lexicon: &[usize]) -> Vec<usize> {
        let mapped: Vec<usize> = source.iter().map(|&s| lexicon[s]).collect();
        self.transform.apply(&mapped, self.shift)
    }
}

/// Fraction of source word types whose translation differs between two
/// domains. Different transforms reorder every sentence, which counts as a
/// different mapping for every token.
pub fn mapping_distinctness(a: &DomainSpec, b: &DomainSpec) -> f64 {
    if a.transform != b.transform || (a.transform == Transform::CyclicShift && a.shift != b.shift) {
        return 1.0;
    }
    let (la, lb) = (a.lexicon(), b.lexicon());
    let n = la.len().min(lb.len());
    if n == 0 {
        return 1.0;
    }
    let differ = la.iter().zip(&lb).filter(|(x, y)| x != y).count() + la.len().abs_diff(lb.len());
    differ as f64 / la.len().max(lb.len()) as f64
}

/// Rejects domain sets with duplicate names or near-identical mappings.
pub fn validate_domain_set(specs: &[DomainSpec]) -> Result<()> {
    let mut names = HashSet::new();
    for s in specs {
        s.validate()?;
        if !names.insert(s.name.as_str()) {
            return Err(CkdError::InvalidSpec(format!("duplicate domain name {}", s.name)));
        }
    }
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            let d = mapping_distinctness(a, b);
            if d < 0.5 {
                return Err(CkdError::InvalidSpec(format!(
                    "domains {} and {} share too much of their mapping ({:.0}% distinct, need >= 50%)",
                    a.name,
                    b.name,
                    d * 100.0
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainCorpora {
    pub train: TextCorpus,
    pub dev: TextCorpus,
    pub test: TextCorpus,
}

/// Generates the train/dev/test corpora of one domain. Splits are disjoint
/// as sentence sets; output is a pure function of `(spec, seed)`.
pub fn gen_domain_corpus(spec: &DomainSpec, seed: u64) -> Result<DomainCorpora> {
    spec.validate()?;
    let lexicon = spec.lexicon();
    let mut rng = rng_for(seed, &format!("corpus/{}", spec.name));
    let mut ranking: Vec<usize> = (0..spec.alphabet).collect();
    ranking.shuffle(&mut rng_for(spec.lexicon_seed, "corpus/frequency"));
    let zipf = Zipf::new(spec.alphabet as f64, spec.zipf)
        .map_err(|e| CkdError::InvalidSpec(format!("domain {}: {e}", spec.name)))?;

    let total = spec.sizes.train + spec.sizes.dev + spec.sizes.test;
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(total);
    let mut sentences = Vec::with_capacity(total);
    let max_attempts = total.saturating_mul(100).max(1000);
    let mut attempts = 0;
    while sentences.len() < total {
        attempts += 1;
        if attempts > max_attempts {
            return Err(CkdError::InvalidSpec(format!(
                "domain {}: could not draw {total} distinct sentences; enlarge alphabet or length range",
                spec.name
            )));
        }
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let src: Vec<usize> = (0..len)
            .map(|_| ranking[zipf.sample(&mut rng) as usize - 1])
            .collect();
        if seen.insert(src.clone()) {
            sentences.push(src);
        }
    }

    let to_pair = |src: &Vec<usize>| TextPair {
        source: src.iter().map(|&i| source_token(i)).collect(),
        target: spec.translate(src, &lexicon).into_iter().map(target_token).collect(),
    };
    let make = |role, range: std::ops::Range<usize>| TextCorpus {
        domain: spec.name.clone(),
        role,
        pairs: sentences[range].iter().map(to_pair).collect(),
    };
    let (tr, dv) = (spec.sizes.train, spec.sizes.dev);
    Ok(DomainCorpora {
        train: make(CorpusRole::Train, 0..tr),
        dev: make(CorpusRole::Dev, tr..tr + dv),
        test: make(CorpusRole::Test, tr + dv..total),
    })
}

/// Full vocabulary of a set of domains: every source and target word type,
/// whether or not it was sampled.
pub fn synthetic_vocab(specs: &[DomainSpec]) -> Result<Vocab> {
    let n = specs.iter().map(|s| s.alphabet).max().ok_or(CkdError::Empty("no domain specs"))?;
    Vocab::new((0..n).map(source_token).chain((0..n).map(target_token)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn spec(name: &str, transform: Transform) -> DomainSpec {
        DomainSpec {
            name: name.into(),
            transform,
            shift: 1,
            lexicon_seed: 11,
            base_lexicon_seed: 5,
            shared_fraction: 0.4,
            alphabet: 16,
            sizes: SplitSizes { train: 60, dev: 20, test: 20 },
            min_len: 3,
            max_len: 6,
            zipf: 1.0,
        }
    }

    #[test]
    fn reversal_reverses() {
        assert_eq!(Transform::Reversal.apply(&words("a b c"), 1), words("c b a"));
    }

    #[test]
    fn identity_with_lexicon_maps_tokens() {
        let s = spec("lex", Transform::Identity);
        // lexicon maps source 0 to target 1
        let lex = vec![1, 0];
        assert_eq!(s.translate(&[0, 0], &lex), vec![1, 1]);
    }

    #[test]
    fn shift_and_interleave() {
        let v = words("a b c d e");
        assert_eq!(Transform::CyclicShift.apply(&v, 2), words("c d e a b"));
        assert_eq!(Transform::Interleave.apply(&v, 1), words("a d b e c"));
        assert_eq!(Transform::Interleave.apply(&words("a b c d"), 1), words("a c b d"));
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let s = spec("A", Transform::Reversal);
        let a = gen_domain_corpus(&s, 3).unwrap();
        let b = gen_domain_corpus(&s, 3).unwrap();
        assert_eq!(a.train.to_file_string(), b.train.to_file_string());
        assert_eq!(a.test.to_file_string(), b.test.to_file_string());
        let train: HashSet<_> = a.train.pairs.iter().collect();
        assert!(a.test.pairs.iter().all(|p| !train.contains(p)));
        assert!(a.dev.pairs.iter().all(|p| !train.contains(p)));
        let c = gen_domain_corpus(&s, 4).unwrap();
        assert_ne!(a.train.to_file_string(), c.train.to_file_string());
    }

    #[test]
    fn generated_targets_follow_transform() {
        let s = spec("A", Transform::Reversal);
        let lex = s.lexicon();
        let c = gen_domain_corpus(&s, 1).unwrap();
        for p in &c.train.pairs {
            let mapped: Vec<String> = p
                .source
                .iter()
                .map(|w| target_token(lex[w[1..].parse::<usize>().unwrap()]))
                .rev()
                .collect();
            assert_eq!(mapped, p.target);
        }
    }

    #[test]
    fn zero_size_and_empty_range_rejected() {
        let mut s = spec("A", Transform::Identity);
        s.sizes.test = 0;
        assert!(matches!(gen_domain_corpus(&s, 0), Err(CkdError::InvalidSpec(_))));
        let mut s = spec("A", Transform::Identity);
        s.min_len = 5;
        s.max_len = 4;
        assert!(matches!(gen_domain_corpus(&s, 0), Err(CkdError::InvalidSpec(_))));
    }

    #[test]
    fn distinct_domains_differ_on_most_tokens() {
        let a = spec("A", Transform::Identity);
        let mut b = spec("B", Transform::Identity);
        b.lexicon_seed = 12;
        assert!(mapping_distinctness(&a, &b) >= 0.5);
        validate_domain_set(&[a.clone(), b]).unwrap();
        let mut dup = a.clone();
        dup.name = "A2".into();
        assert!(validate_domain_set(&[a, dup]).is_err());
    }

    #[test]
    fn vocab_counts_and_union() {
        let c = |pairs: Vec<(&str, &str)>| TextCorpus {
            domain: "d".into(),
            role: CorpusRole::Train,
            pairs: pairs
                .into_iter()
                .map(|(s, t)| TextPair { source: words(s), target: words(t) })
                .collect(),
        };
        let v = build_vocab(&[c(vec![("a b", "a")])]).unwrap();
        assert_eq!(v.len(), 6);
        let v = build_vocab(&[c(vec![("a", "a")]), c(vec![("b", "b")])]).unwrap();
        assert!(v.id("a").is_some() && v.id("b").is_some());
        let v = build_vocab(&[c(vec![("a", "z")])]).unwrap();
        assert!(v.id("z").is_some());
        assert!(build_vocab(&[]).is_err());
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("</s>"), Some(EOS));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::new(["x", "y", "z"]).unwrap();
        let back = Vocab::from_file_string(&v.to_file_string()).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.token(4), Some("x"));
    }

    #[test]
    fn transfer_tuples_match_definition() {
        let corpus = ParallelCorpus {
            domain: "d".into(),
            role: CorpusRole::Transfer,
            pairs: vec![
                SentencePair { source: vec![4, 5], target: vec![6, 7, EOS] },
                SentencePair { source: vec![5], target: vec![6, EOS] },
            ],
        };
        let tuples: Vec<_> = as_transfer_tuples(&corpus).collect();
        assert_eq!(tuples.len(), 5);
        assert_eq!(
            tuples[..3].iter().map(|t| t.prefix.len()).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert_eq!(tuples[2].target_token, EOS);
        assert_eq!(tuples[2].prefix, vec![6, 7]);
        assert_eq!(tuples[3].origin, (1, 1));
    }

    #[test]
    fn corpus_file_round_trip() {
        let s = spec("A", Transform::Interleave);
        let c = gen_domain_corpus(&s, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.train.tsv");
        c.train.save(&path).unwrap();
        let back = TextCorpus::load(&path).unwrap();
        assert_eq!(back, c.train);
    }
}
