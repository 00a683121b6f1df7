use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;

/// Parameter hashes of the modules a stage must not modify.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FreezeManifest {
    pub stage: String,
    pub entries: Vec<FrozenEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenEntry {
    pub module: String,
    pub hash: String,
}

/// Outcome of re-hashing a manifest's modules.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FreezeReport {
    pub stage: String,
    pub checked: usize,
    /// Modules whose hash changed, in manifest order.
    pub mismatches: Vec<String>,
    /// Manifest modules that could not be found any more.
    pub missing: Vec<String>,
}

impl FreezeReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.missing.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            let mut names = self.mismatches.clone();
            names.extend(self.missing.iter().map(|m| format!("{m} (missing)")));
            Err(Error::FreezeViolation(format!("{}: {}", self.stage, names.join(", "))))
        }
    }
}

impl FreezeManifest {
    pub fn capture<'a>(stage: &str, modules: impl IntoIterator<Item = (String, &'a dyn Module)>) -> Self {
        let entries = modules.into_iter().map(|(module, m)| FrozenEntry { module, hash: m.param_hash() }).collect();
        Self { stage: stage.to_string(), entries }
    }

    pub fn modules(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.module.as_str())
    }
}

/// Recomputes every hash in `manifest`; `lookup` resolves a module name.
pub fn verify_frozen<'a>(manifest: &FreezeManifest, lookup: impl Fn(&str) -> Option<&'a dyn Module>) -> FreezeReport {
    let mut report = FreezeReport { stage: manifest.stage.clone(), checked: manifest.entries.len(), ..Default::default() };
    for e in &manifest.entries {
        match lookup(&e.module) {
            Some(m) if m.param_hash() == e.hash => {}
            Some(_) => report.mismatches.push(e.module.clone()),
            None => report.missing.push(e.module.clone()),
        }
    }
    report
}
