use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{AgentSpec, EncoderArch};
use crate::bridge::StandardRepSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::negotiator::PyramidConfig;
use crate::nn::param::hex_string;
use crate::scenegen::{DatasetSpec, GridSpec, ModalityKind, ModalitySpec};

/// Step counts of every training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSteps {
    pub pretrain: usize,
    pub stage1: usize,
    pub stage2: usize,
    pub join_stage1: usize,
    pub join_stage2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    /// Learning rate of the receiver-only task-adaptation stages.
    pub finetune_lr: f64,
    pub batch_size: usize,
    /// Fraction of pretraining samples without a collaborator.
    pub solo_fraction: f64,
}

/// Training-setting switches of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub negotiator: bool,
    pub structural: bool,
    pub pragmatic: bool,
    pub local_prompt: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { negotiator: true, structural: true, pragmatic: true, local_prompt: true }
    }
}

impl AblationFlags {
    /// Loss weights with disabled alignment terms zeroed.
    pub fn apply(&self, w: &LossWeights) -> LossWeights {
        LossWeights {
            lambda_s: if self.structural { w.lambda_s } else { 0.0 },
            lambda_p: if self.pragmatic { w.lambda_p } else { 0.0 },
            ..*w
        }
    }

    pub fn label(&self) -> String {
        let mut terms = vec!["dis"];
        if self.structural {
            terms.push("stru");
        }
        if self.pragmatic {
            terms.push("pragma");
        }
        format!(
            "{}{}{}",
            if self.negotiator { "nego" } else { "no-nego" },
            format_args!("/{}", terms.join("+")),
            if self.local_prompt { "" } else { "/no-prompt" }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub scenes: usize,
    pub seed: u64,
    pub loose_radius: f64,
    pub strict_radius: f64,
    /// Peaks below this probability are not reported.
    pub peak_threshold: f64,
    /// Pose-noise levels: metres for x/y and degrees for yaw.
    pub noise_sigmas: Vec<f64>,
    /// Scenes used for domain-gap statistics.
    pub gap_scenes: usize,
}

/// The whole experiment: roster, alliance, shapes, losses and budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub agents: Vec<AgentSpec>,
    pub alliance: Vec<String>,
    pub protocol: String,
    pub standard: StandardRepSpec,
    pub pyramid: PyramidConfig,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    pub steps: StageSteps,
    pub dataset: DatasetSpec,
    pub eval: EvalConfig,
    pub ablation: AblationFlags,
    /// Names a module whose weights get perturbed before the freeze check;
    /// used to prove that the check catches tampering.
    #[serde(default)]
    pub fault_injection: Option<String>,
}

fn modality(name: &str, kind: ModalityKind, dropout: f64, extent: f64, range: f64) -> ModalitySpec {
    ModalitySpec {
        name: name.into(),
        kind,
        dropout_rate: dropout,
        grid: GridSpec::with_cells(extent, (2.0 * extent) as usize),
        range: Some(range),
    }
}

/// The protocol agent's grid is chosen so that its native features already
/// have the standard spatial size.
fn roster(extent: f64, range: f64, channels: [usize; 5], protocol_cells: usize) -> Vec<AgentSpec> {
    let ray = |n| ModalityKind::SparseRay { ray_count: n };
    let blur = |s| ModalityKind::DenseBlur { blur_sigma: s };
    let mut entries = [
        ("m1", modality("ray96", ray(96), 0.0, extent, range), EncoderArch::ConvA, channels[0]),
        ("m2", modality("blur10", blur(1.0), 0.05, extent, range), EncoderArch::ConvB, channels[1]),
        ("m3", modality("ray48", ray(48), 0.0, extent, range), EncoderArch::ConvC, channels[2]),
        ("m4", modality("blur15", blur(1.5), 0.05, extent, range), EncoderArch::ConvD, channels[3]),
        ("protocol", modality("ray64", ray(64), 0.0, extent, range), EncoderArch::ConvA, channels[4]),
    ];
    entries[4].1.grid = GridSpec::with_cells(extent, protocol_cells);
    entries
        .into_iter()
        .map(|(id, m, arch, c)| AgentSpec::new(id, m, arch, c).expect("preset agents are valid"))
        .collect()
}

impl ExperimentConfig {
    /// CPU-friendly preset: 32x32 observations, 16x16x16 common space.
    pub fn desk() -> Self {
        Self {
            seed: 7,
            agents: roster(16.0, 10.0, [16, 12, 24, 8, 16], 32),
            alliance: vec!["m1".into(), "m2".into()],
            protocol: "protocol".into(),
            standard: StandardRepSpec { channels: 16, height: 16, width: 16 },
            pyramid: PyramidConfig { levels: 2, estimator_hidden: 16 },
            weights: LossWeights::default(),
            optim: OptimConfig { lr: 1e-3, finetune_lr: 1e-4, batch_size: 8, solo_fraction: 0.25 },
            steps: StageSteps { pretrain: 2000, stage1: 3000, stage2: 1000, join_stage1: 3000, join_stage2: 1000 },
            dataset: DatasetSpec {
                seed: 1001,
                scenes: 512,
                objects_min: 5,
                objects_max: 12,
                world_extent: 24.0,
                viewpoints: 2,
                spacing: (8.0, 14.0),
            },
            eval: EvalConfig {
                scenes: 128,
                seed: 2002,
                loose_radius: 2.0,
                strict_radius: 1.0,
                peak_threshold: 0.05,
                noise_sigmas: vec![0.0, 0.3, 0.6],
                gap_scenes: 64,
            },
            ablation: AblationFlags::default(),
            fault_injection: None,
        }
    }

    /// Paper-shaped preset: 64x64 observations, 64x64x64 common space.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.agents = roster(32.0, 20.0, [64, 48, 96, 32, 64], 128);
        c.standard = StandardRepSpec { channels: 64, height: 64, width: 64 };
        c.pyramid = PyramidConfig { levels: 2, estimator_hidden: 32 };
        c.dataset.world_extent = 32.0;
        c.dataset.spacing = (12.0, 24.0);
        c
    }

    /// Desk shapes with minute-scale budgets, for smoke runs and tests.
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.steps = StageSteps { pretrain: 60, stage1: 60, stage2: 30, join_stage1: 60, join_stage2: 30 };
        c.dataset.scenes = 64;
        c.eval.scenes = 16;
        c.eval.gap_scenes = 8;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "smoke" => Ok(Self::smoke()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk, full or smoke)"))),
        }
    }

    /// Reads a TOML file layered over its `preset` (default `desk`), then
    /// applies `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse().map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        Self::from_table(file, overrides)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(table, overrides)
    }

    fn from_table(mut file: toml::Table, overrides: &[String]) -> Result<Self> {
        let preset = match file.remove("preset") {
            Some(toml::Value::String(s)) => s,
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => "desk".into(),
        };
        let mut value = toml::Value::try_from(Self::preset(&preset)?).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut value, toml::Value::Table(file));
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for a in &self.agents {
            a.validate()?;
        }
        let ids: std::collections::BTreeSet<_> = self.agents.iter().map(|a| a.agent_id()).collect();
        if ids.len() != self.agents.len() {
            return Err(Error::Config("agent ids must be unique".into()));
        }
        for (i, a) in self.agents.iter().enumerate() {
            for b in &self.agents[i + 1..] {
                if a.modality() == b.modality() && a.encoder_arch() == b.encoder_arch() {
                    return Err(Error::Config(format!(
                        "{} and {} share modality and encoder; heterogeneous agents must differ",
                        a.agent_id(),
                        b.agent_id()
                    )));
                }
            }
            if a.modality().grid.extent != self.agents[0].modality().grid.extent {
                return Err(Error::Config("all agents must observe the same footprint".into()));
            }
        }
        if self.alliance.is_empty() {
            return Err(Error::Config("alliance must not be empty".into()));
        }
        for id in self.alliance.iter().chain(std::iter::once(&self.protocol)) {
            self.agent(id)?;
        }
        let unique: std::collections::BTreeSet<_> = self.alliance.iter().collect();
        if unique.len() != self.alliance.len() {
            return Err(Error::Config("alliance members must be distinct".into()));
        }
        self.pyramid.validate(self.standard)?;
        self.weights.validate()?;
        self.dataset.validate()?;
        if self.optim.batch_size == 0 || !(self.optim.lr > 0.0) || !(self.optim.finetune_lr > 0.0) || !(0.0..=1.0).contains(&self.optim.solo_fraction) {
            return Err(Error::Config("optim: batch_size > 0, lr and finetune_lr > 0, solo_fraction in [0, 1]".into()));
        }
        let e = &self.eval;
        if e.scenes == 0 || e.gap_scenes == 0 || !(e.loose_radius > 0.0) || !(e.strict_radius > 0.0) {
            return Err(Error::Config("eval: scenes and radii must be positive".into()));
        }
        if e.noise_sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("eval: noise sigmas must be nonnegative".into()));
        }
        if self.standard.height != self.standard.width {
            return Err(Error::Config("standard representation must be square".into()));
        }
        Ok(())
    }

    pub fn agent(&self, id: &str) -> Result<&AgentSpec> {
        self.agents.iter().find(|a| a.agent_id() == id).ok_or_else(|| Error::UnknownAgent(id.to_string()))
    }

    /// Ground footprint of the common space.
    pub fn standard_grid(&self) -> GridSpec {
        GridSpec::with_cells(self.agents[0].modality().grid.extent, self.standard.height)
    }

    pub fn eval_dataset(&self) -> DatasetSpec {
        self.dataset.split(self.eval.seed, self.eval.scenes)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_string(&Sha256::digest(json.as_bytes()))
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `a.b.c=value`; the value is parsed as TOML, falling back to a string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        let toml::Value::Table(t) = cur else {
            return Err(Error::Config(format!("override `{path}`: `{}` is not a table", keys[..i].join("."))));
        };
        if i + 1 == keys.len() {
            if !t.contains_key(*k) && *k != "fault_injection" {
                return Err(Error::Config(format!("override `{path}`: unknown key `{k}`")));
            }
            t.insert(k.to_string(), value);
            return Ok(());
        }
        cur = t.get_mut(*k).ok_or_else(|| Error::Config(format!("override `{path}`: unknown key `{k}`")))?;
    }
    Ok(())
}
