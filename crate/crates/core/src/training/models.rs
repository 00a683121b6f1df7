use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::{write_atomic, Checkpoint};
use super::config::ExperimentConfig;
use super::freeze::FreezeReport;
use crate::agents::{AgentSpec, PerceptionModel};
use crate::bridge::{new_resizer, Bridge, StandardRepSpec};
use crate::error::{Error, Result};
use crate::losses::OccupancyHead;
use crate::negotiator::{Negotiator, PyramidConfig};
use crate::nn::{Module, SizeChannelAdapter};

/// Which stages have completed, in order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub pretrained: Vec<String>,
    /// Alliance of the completed negotiation; empty before stage 1.
    pub negotiated: Vec<String>,
    pub adapted: bool,
    pub joined: Vec<String>,
    pub freeze_reports: Vec<FreezeReport>,
}

/// Every trained module of an experiment.
#[derive(Clone, Debug, Default)]
pub struct Models {
    pub perception: BTreeMap<String, PerceptionModel>,
    pub bridges: BTreeMap<String, Bridge>,
    pub resizers: BTreeMap<String, SizeChannelAdapter>,
    pub negotiator: Option<Negotiator>,
    pub occupancy: Option<OccupancyHead>,
    pub progress: Progress,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct BridgeMeta {
    agent: AgentSpec,
    standard: StandardRepSpec,
    local_prompt: bool,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct NegotiatorMeta {
    standard: StandardRepSpec,
    pyramid: PyramidConfig,
}

impl Models {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn perception(&self, id: &str) -> Result<&PerceptionModel> {
        self.perception.get(id).ok_or_else(|| Error::Invalid(format!("no Step-0 model for {id}")))
    }

    pub fn bridge(&self, id: &str) -> Result<&Bridge> {
        self.bridges.get(id).ok_or_else(|| Error::Invalid(format!("no sender/receiver for {id}")))
    }

    /// Resolves names such as `m1.encoder`, `m2.receiver`, `negotiator`.
    pub fn module(&self, name: &str) -> Option<&dyn Module> {
        match name {
            "negotiator" => return self.negotiator.as_ref().map(|m| m as &dyn Module),
            "occupancy_head" => return self.occupancy.as_ref().map(|m| m as &dyn Module),
            _ => {}
        }
        let (id, part) = name.split_once('.')?;
        match part {
            "encoder" => self.perception.get(id).map(|m| &m.encoder as &dyn Module),
            "fusion" => self.perception.get(id).map(|m| &m.fusion as &dyn Module),
            "head" => self.perception.get(id).map(|m| &m.head as &dyn Module),
            "sender" => self.bridges.get(id).map(|b| &b.sender as &dyn Module),
            "receiver" => self.bridges.get(id).map(|b| &b.receiver as &dyn Module),
            "resizer" => self.resizers.get(id).map(|r| r as &dyn Module),
            _ => None,
        }
    }

    pub fn module_mut(&mut self, name: &str) -> Option<&mut dyn Module> {
        match name {
            "negotiator" => return self.negotiator.as_mut().map(|m| m as &mut dyn Module),
            "occupancy_head" => return self.occupancy.as_mut().map(|m| m as &mut dyn Module),
            _ => {}
        }
        let (id, part) = name.split_once('.')?;
        match part {
            "encoder" => self.perception.get_mut(id).map(|m| &mut m.encoder as &mut dyn Module),
            "fusion" => self.perception.get_mut(id).map(|m| &mut m.fusion as &mut dyn Module),
            "head" => self.perception.get_mut(id).map(|m| &mut m.head as &mut dyn Module),
            "sender" => self.bridges.get_mut(id).map(|b| &mut b.sender as &mut dyn Module),
            "receiver" => self.bridges.get_mut(id).map(|b| &mut b.receiver as &mut dyn Module),
            "resizer" => self.resizers.get_mut(id).map(|r| r as &mut dyn Module),
            _ => None,
        }
    }

    /// Hashes of every module, keyed by name.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        let mut names = Vec::new();
        for id in self.perception.keys() {
            names.extend(["encoder", "fusion", "head"].map(|p| format!("{id}.{p}")));
        }
        for id in self.bridges.keys() {
            names.extend(["sender", "receiver"].map(|p| format!("{id}.{p}")));
        }
        names.extend(self.resizers.keys().map(|id| format!("{id}.resizer")));
        names.push("negotiator".into());
        names.push("occupancy_head".into());
        names.into_iter().filter_map(|n| self.module(&n).map(|m| (n.clone(), m.param_hash()))).collect()
    }

    /// Writes every module as a checkpoint plus `progress.json`.
    pub fn save(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
        let h = cfg.hash();
        for (id, m) in &self.perception {
            Checkpoint::from_module("perception", serde_json::to_value(&m.spec)?, m, &h)
                .write(&dir.join("perception").join(format!("{id}.json")))?;
        }
        for (id, b) in &self.bridges {
            let meta = BridgeMeta { agent: cfg.agent(id)?.clone(), standard: cfg.standard, local_prompt: b.receiver.uses_local_prompt() };
            Checkpoint::from_module("bridge", serde_json::to_value(&meta)?, b, &h)
                .write(&dir.join("bridges").join(format!("{id}.json")))?;
        }
        for (id, r) in &self.resizers {
            let meta = json!({ "agent": id, "standard": cfg.standard });
            Checkpoint::from_module("resizer", meta, r, &h).write(&dir.join("resizers").join(format!("{id}.json")))?;
        }
        if let Some(n) = &self.negotiator {
            let meta = NegotiatorMeta { standard: n.spec, pyramid: n.config };
            Checkpoint::from_module("negotiator", serde_json::to_value(&meta)?, n, &h).write(&dir.join("negotiator.json"))?;
        }
        if let Some(o) = &self.occupancy {
            let meta = json!({ "channels": cfg.standard.channels });
            Checkpoint::from_module("occupancy_head", meta, o, &h).write(&dir.join("occupancy_head.json"))?;
        }
        write_atomic(&dir.join("progress.json"), serde_json::to_string_pretty(&self.progress)?.as_bytes())
    }

    /// Loads whatever a previous [`Models::save`] wrote into `dir`. Modules
    /// are rebuilt from `cfg` and must match the stored architecture.
    pub fn load(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let mut models = Models::new();
        let progress_path = dir.join("progress.json");
        if !progress_path.exists() {
            return Ok(models);
        }
        let text = std::fs::read_to_string(&progress_path).map_err(|e| Error::io(&progress_path, e))?;
        models.progress = serde_json::from_str(&text)?;
        // placeholder weights; every parameter is overwritten below
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for spec in &cfg.agents {
            let id = spec.agent_id();
            let path = dir.join("perception").join(format!("{id}.json"));
            if path.exists() {
                let ck = Checkpoint::read(&path)?;
                let stored: AgentSpec = ck.metadata_as()?;
                if &stored != spec {
                    return Err(Error::Checkpoint(format!("{id}: stored agent spec differs from the config")));
                }
                let mut m = PerceptionModel::new(spec.clone(), &mut rng);
                ck.load_into(&mut m)?;
                models.perception.insert(id.to_string(), m);
            }
            let path = dir.join("bridges").join(format!("{id}.json"));
            if path.exists() {
                let ck = Checkpoint::read(&path)?;
                let meta: BridgeMeta = ck.metadata_as()?;
                if &meta.agent != spec || meta.standard != cfg.standard {
                    return Err(Error::Checkpoint(format!("{id}: stored bridge does not fit the config")));
                }
                let mut b = Bridge::new(spec, cfg.standard, meta.local_prompt, &mut rng);
                ck.load_into(&mut b)?;
                models.bridges.insert(id.to_string(), b);
            }
            let path = dir.join("resizers").join(format!("{id}.json"));
            if path.exists() {
                let mut r = new_resizer(spec, cfg.standard, &mut rng);
                Checkpoint::read(&path)?.load_into(&mut r)?;
                models.resizers.insert(id.to_string(), r);
            }
        }
        let path = dir.join("negotiator.json");
        if path.exists() {
            let ck = Checkpoint::read(&path)?;
            let meta: NegotiatorMeta = ck.metadata_as()?;
            let mut n = Negotiator::new(meta.standard, meta.pyramid, &mut rng)?;
            ck.load_into(&mut n)?;
            models.negotiator = Some(n);
        }
        let path = dir.join("occupancy_head.json");
        if path.exists() {
            let mut o = OccupancyHead::new(cfg.standard.channels, &mut rng);
            Checkpoint::read(&path)?.load_into(&mut o)?;
            models.occupancy = Some(o);
        }
        Ok(models)
    }
}
