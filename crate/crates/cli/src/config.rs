//! Experiment configuration: one TOML file, optionally patched by
//! `--set key=value` flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ckd::corpus::{validate_domain_set, DomainSpec};
use ckd::experiment::TeacherOrder;
use ckd::model::ArchConfig;
use ckd::trainer::{DistillConfig, Method, TrainConfig};

use crate::CliError;

/// Architecture of each role. `domains` overrides the role default for
/// single domains (heterogeneous teachers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchRoles {
    pub teacher: ArchConfig,
    pub student: ArchConfig,
    #[serde(default)]
    pub domains: BTreeMap<String, ArchConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed. Data, initialization, shuffling and malicious permutations
    /// are all derived from it.
    pub seed: u64,
    /// Relative paths are taken from the config file's directory.
    pub out_dir: PathBuf,
    /// `"BCDE->A"`: teachers in arrival order, then the student domain.
    pub order: String,
    #[serde(default = "default_method")]
    pub method: Method,
    /// Column label in reports; defaults to the order string.
    #[serde(default)]
    pub name: Option<String>,
    /// Domain whose training split serves as the transfer set. Defaults to
    /// the student's own training split.
    #[serde(default)]
    pub transfer: Option<String>,
    pub domains: Vec<DomainSpec>,
    pub arch: ArchRoles,
    /// Supervised training of the per-domain models.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub distill: DistillConfig,
}

fn default_method() -> Method {
    Method::Ckd
}

impl ExperimentConfig {
    /// Reads `path`, applies `overrides` and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut value: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {e}", path.display())))?;
        if cfg.out_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Copies the root seed into the component configs and checks
    /// everything that can be checked without touching the disk.
    fn resolve(&mut self) -> Result<(), CliError> {
        for (what, s) in [("train.seed", self.train.seed), ("distill.seed", self.distill.seed)] {
            if s != 0 && s != self.seed {
                return Err(CliError::Config(format!("{what} is derived from the root `seed`; set that instead")));
            }
        }
        self.train.seed = self.seed;
        self.distill.seed = self.seed;
        validate_domain_set(&self.domains)?;
        let order = self.order()?;
        order.check_domains(self.domains.iter().map(|d| d.name.as_str()))?;
        if let Some(t) = &self.transfer {
            if !self.domains.iter().any(|d| &d.name == t) {
                return Err(CliError::Config(format!("transfer domain `{t}` is not declared")));
            }
        }
        for name in self.arch.domains.keys() {
            if !self.domains.iter().any(|d| &d.name == name) {
                return Err(CliError::Config(format!("architecture override for undeclared domain `{name}`")));
            }
        }
        for d in &self.domains {
            self.arch_for(&d.name).validate()?;
        }
        self.distill.validate()?;
        self.train.optimizer.validate()?;
        if self.train.batch_size == 0 {
            return Err(CliError::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn order(&self) -> Result<TeacherOrder, CliError> {
        Ok(TeacherOrder::parse(&self.order)?)
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.order.clone())
    }

    /// The domain-model architecture: the student role for the student
    /// domain, the teacher role otherwise, unless overridden.
    pub fn arch_for(&self, domain: &str) -> &ArchConfig {
        if let Some(a) = self.arch.domains.get(domain) {
            return a;
        }
        let student = TeacherOrder::parse(&self.order).map(|o| o.student).unwrap_or_default();
        if domain == student {
            &self.arch.student
        } else {
            &self.arch.teacher
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Sets a dotted key. The value is read as a TOML value when it parses as
/// one and as a bare string otherwise.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
