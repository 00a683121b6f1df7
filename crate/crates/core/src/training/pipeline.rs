//! The three-step protocol: homogeneous pretraining, alliance negotiation
//! (stage 1 and stage 2) and new-agent onboarding.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::freeze::{verify_frozen, FreezeManifest, FreezeReport};
use super::log::{loss_endpoints, StepRecord, StepSink};
use super::models::Models;
use crate::agents::train::{draw_pairs, pair_targets, PairDraw};
use crate::agents::{train_homogeneous, HomogeneousConfig, ViewCache};
use crate::bridge::{collaborative_logits, new_resizer, Bridge, Collaborator, Message, Participant};
use crate::error::{Error, Result};
use crate::losses::{
    cycle_loss, detection_loss, multidim_align_loss, pragmatic_align_loss, stage1_loss, KeypointGrid, LossWeights, OccupancyHead,
};
use crate::negotiator::Negotiator;
use crate::nn::{Adam, Module, ParamId, SizeChannelAdapter};
use crate::scenegen::dataset::{fnv1a, mix};
use crate::scenegen::{occupancy_labels, GridSpec};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Gradient norm above which a step's gradients are rescaled.
const CLIP_NORM: f64 = 10.0;
/// Window for the start/end loss averages of a stage.
const LOSS_WINDOW: usize = 20;

/// Summary of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub freeze: Option<FreezeReport>,
}

/// Per-step bookkeeping shared by every stage loop.
struct StageLoop<'s> {
    stage: String,
    sink: &'s mut dyn StepSink,
    losses: Vec<f64>,
}

impl<'s> StageLoop<'s> {
    fn new(stage: String, sink: &'s mut dyn StepSink) -> Self {
        Self { stage, sink, losses: Vec::new() }
    }

    /// Backpropagates `loss`, rejecting non-finite values, and logs the step.
    fn backward(&mut self, tape: &Tape, step: usize, loss: Var<'_>, components: BTreeMap<String, f64>) -> Result<Gradients> {
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, what: format!("{} loss", self.stage) });
        }
        let mut grads = tape.backward(loss);
        if !grads.is_finite() {
            return Err(Error::Diverged { step, what: format!("{} gradients", self.stage) });
        }
        let norm = grads.global_norm();
        if norm > CLIP_NORM {
            grads.scale(CLIP_NORM / norm);
        }
        self.losses.push(value);
        self.sink.record(&StepRecord { stage: self.stage.clone(), step, loss: value, components })?;
        Ok(grads)
    }

    fn finish(self, freeze: Option<FreezeReport>) -> StageReport {
        let (initial_loss, final_loss) = loss_endpoints(&self.losses, LOSS_WINDOW).unwrap_or((f64::NAN, f64::NAN));
        StageReport { stage: self.stage, steps: self.losses.len(), initial_loss, final_loss, freeze }
    }
}

fn stage_rng(cfg: &ExperimentConfig, stage: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(cfg.seed, fnv1a(stage.as_bytes())))
}

fn ids_of(modules: &[&dyn Module]) -> Vec<ParamId> {
    modules.iter().flat_map(|m| m.param_ids()).collect()
}

fn perception_names(id: &str) -> [String; 3] {
    ["encoder", "fusion", "head"].map(|p| format!("{id}.{p}"))
}

fn capture(models: &Models, stage: &str, names: &[String]) -> Result<FreezeManifest> {
    let mut modules = Vec::with_capacity(names.len());
    for n in names {
        let m = models.module(n).ok_or_else(|| Error::Invalid(format!("{stage}: cannot freeze missing module {n}")))?;
        modules.push((n.clone(), m));
    }
    Ok(FreezeManifest::capture(stage, modules))
}

/// Perturbs the configured module when it is part of `manifest`, so the
/// freeze check has something to catch.
fn inject_fault(cfg: &ExperimentConfig, models: &mut Models, manifest: &FreezeManifest) {
    let Some(target) = cfg.fault_injection.as_deref() else { return };
    if !manifest.modules().any(|m| m == target) {
        return;
    }
    if let Some(m) = models.module_mut(target) {
        let mut done = false;
        m.visit_mut("", &mut |_, p| {
            if !done {
                let mut t = p.value().clone();
                t.data_mut()[0] += 1e-3;
                p.set(t);
                done = true;
            }
        });
    }
}

fn finish_freeze(cfg: &ExperimentConfig, models: &mut Models, manifest: &FreezeManifest) -> Result<FreezeReport> {
    inject_fault(cfg, models, manifest);
    let report = verify_frozen(manifest, |n| models.module(n));
    models.progress.freeze_reports.push(report.clone());
    report.into_result()
}

/// `[n, 1, s, s]` occupancy labels of `(scene, view)` items on `grid`.
fn occupancy_batch(cache: &ViewCache, items: &[(usize, usize)], grid: GridSpec) -> Tensor {
    let s = grid.cells();
    let mut data = Vec::with_capacity(items.len() * s * s);
    for &(i, v) in items {
        let sample = cache.sample(i);
        data.extend(occupancy_labels(&sample.scene, &sample.poses[v], grid).to_f64());
    }
    Tensor::new(vec![items.len(), 1, s, s], data)
}

fn draw_views<R: Rng>(rng: &mut R, cache: &ViewCache, count: usize) -> Vec<(usize, usize)> {
    let d = cache.dataset();
    (0..count).map(|_| (rng.random_range(0..d.scenes), rng.random_range(0..d.viewpoints))).collect()
}

/// Step 0: homogeneous pretraining of one agent's encoder, fusion and head.
pub fn pretrain_agent(cfg: &ExperimentConfig, models: &mut Models, id: &str, sink: &mut dyn StepSink) -> Result<StageReport> {
    let spec = cfg.agent(id)?.clone();
    let hc = HomogeneousConfig {
        steps: cfg.steps.pretrain,
        batch_size: cfg.optim.batch_size,
        lr: cfg.optim.lr,
        solo_fraction: cfg.optim.solo_fraction,
        seed: cfg.seed,
    };
    let (model, outcome) = train_homogeneous(spec, &cfg.dataset, &hc, &cfg.weights, sink)?;
    models.perception.insert(id.to_string(), model);
    if !models.progress.pretrained.iter().any(|p| p == id) {
        models.progress.pretrained.push(id.to_string());
    }
    Ok(StageReport {
        stage: format!("homogeneous/{id}"),
        steps: outcome.steps,
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
        freeze: None,
    })
}

fn require_pretrained(models: &Models, ids: &[String], stage: &str) -> Result<()> {
    for id in ids {
        if !models.perception.contains_key(id) {
            return Err(Error::Invalid(format!("{stage} needs the Step-0 model of {id}; run pretrain first")));
        }
    }
    Ok(())
}

/// Sender outputs, prompts and standardized features of every member for one
/// batch of shared poses.
struct MemberPass<'t> {
    f: Var<'t>,
    r: Var<'t>,
    p: Var<'t>,
}

/// Step 1, stage 1: negotiate the common representation within the alliance.
pub fn stage1_negotiate(cfg: &ExperimentConfig, models: &mut Models, sink: &mut dyn StepSink) -> Result<StageReport> {
    cfg.validate()?;
    let stage = "negotiate/stage1".to_string();
    require_pretrained(models, &cfg.alliance, &stage)?;
    let mut rng = stage_rng(cfg, &stage);
    let flags = cfg.ablation;
    let weights = flags.apply(&cfg.weights);
    let mut bridges: BTreeMap<String, Bridge> = BTreeMap::new();
    let mut resizers: BTreeMap<String, SizeChannelAdapter> = BTreeMap::new();
    for id in &cfg.alliance {
        let spec = cfg.agent(id)?;
        bridges.insert(id.clone(), Bridge::new(spec, cfg.standard, flags.local_prompt, &mut rng));
        resizers.insert(id.clone(), new_resizer(spec, cfg.standard, &mut rng));
    }
    let mut negotiator = Negotiator::new(cfg.standard, cfg.pyramid, &mut rng)?;
    let mut occupancy = OccupancyHead::new(cfg.standard.channels, &mut rng);
    let names: Vec<String> = cfg.alliance.iter().flat_map(|id| perception_names(id)).collect();
    let manifest = capture(models, &stage, &names)?;

    let cache = ViewCache::new(cfg.dataset.clone())?;
    let keypoints = KeypointGrid::for_size(cfg.standard.height, cfg.standard.width);
    let std_grid = cfg.standard_grid();
    let mut opt = Adam::new(cfg.optim.lr);
    let mut run = StageLoop::new(stage.clone(), sink);
    for step in 0..cfg.steps.stage1 {
        let items = draw_views(&mut rng, &cache, cfg.optim.batch_size);
        let y = occupancy_batch(&cache, &items, std_grid);
        let mut trainable: Vec<&dyn Module> = bridges.values().map(|b| b as &dyn Module).collect();
        trainable.extend(resizers.values().map(|r| r as &dyn Module));
        trainable.push(&negotiator);
        trainable.push(&occupancy);
        let tape = Tape::with_trainable(ids_of(&trainable));
        let mut passes = Vec::with_capacity(cfg.alliance.len());
        let mut us = Vec::with_capacity(cfg.alliance.len());
        for id in &cfg.alliance {
            let model = models.perception(id)?;
            let x = tape.constant(cache.batch(&items, model.spec.modality())?);
            let f = model.encoder.forward(&tape, x).detach();
            us.push(resizers[id].forward(&tape, f));
            let (r, p) = bridges[id].sender.forward(&tape, f);
            passes.push(MemberPass { f, r, p });
        }
        let p = if flags.negotiator {
            negotiator.negotiate(&tape, &us)?.p
        } else {
            mean_of(passes.iter().map(|m| m.p))
        };
        let mut comps = BTreeMap::new();
        let mut per_modality = Vec::with_capacity(passes.len());
        for (k, (id, m)) in cfg.alliance.iter().zip(&passes).enumerate() {
            let rec = bridges[id].receiver.forward(&tape, m.r, p);
            let cycle = cycle_loss(m.f, rec, weights.beta);
            // the negotiated P is the distillation teacher; without a
            // negotiator, each sender output is pulled towards the others
            let target = if flags.negotiator {
                p.detach()
            } else if passes.len() == 1 {
                p
            } else {
                mean_of(passes.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, o)| o.p))
            };
            let (uni, terms) = multidim_align_loss(&tape, m.p, target, &y, &occupancy, &keypoints, &weights);
            comps.insert(format!("{id}.cycle"), cycle.item());
            comps.insert(format!("{id}.distribution"), terms.distribution);
            comps.insert(format!("{id}.structural"), terms.structural);
            comps.insert(format!("{id}.pragmatic"), terms.pragmatic);
            per_modality.push((cycle, uni));
        }
        let pragma_p = (weights.lambda_a != 0.0).then(|| pragmatic_align_loss(&tape, p, &y, &occupancy, &weights));
        if let Some(v) = pragma_p {
            comps.insert("pragmatic_p".into(), v.item());
        }
        let loss = stage1_loss(pragma_p, &per_modality, &weights);
        let grads = run.backward(&tape, step, loss, comps)?;
        drop(trainable);
        let mut mods: Vec<&mut dyn Module> = bridges.values_mut().map(|b| b as &mut dyn Module).collect();
        mods.extend(resizers.values_mut().map(|r| r as &mut dyn Module));
        mods.push(&mut negotiator);
        mods.push(&mut occupancy);
        opt.step(&mut mods, &grads);
    }
    models.bridges.extend(bridges);
    models.resizers.extend(resizers);
    models.negotiator = Some(negotiator);
    models.occupancy = Some(occupancy);
    models.progress.negotiated = cfg.alliance.clone();
    models.progress.adapted = false;
    let report = finish_freeze(cfg, models, &manifest)?;
    Ok(run.finish(Some(report)))
}

fn mean_of<'t>(mut vars: impl Iterator<Item = Var<'t>>) -> Var<'t> {
    let first = vars.next().expect("at least one term");
    let mut acc = first;
    let mut n = 1.0;
    for v in vars {
        acc = acc.add(v);
        n += 1.0;
    }
    acc.mul_scalar(1.0 / n)
}

/// Detection loss of `ego` receiving from `other` over `draws`, using the
/// inference-time common-space dataflow.
fn collab_detection<'t>(
    tape: &'t Tape,
    cfg: &ExperimentConfig,
    models: &Models,
    cache: &ViewCache,
    ego: &str,
    other: &str,
    draws: &[PairDraw],
    weights: &LossWeights,
) -> Result<Var<'t>> {
    let ego_model = models.perception(ego)?;
    let other_model = models.perception(other)?;
    let ego_items: Vec<_> = draws.iter().map(|d| (d.index, d.ego)).collect();
    let other_items: Vec<_> = draws.iter().map(|d| (d.index, d.other)).collect();
    let ego_obs = tape.constant(cache.batch(&ego_items, ego_model.spec.modality())?);
    let other_obs = tape.constant(cache.batch(&other_items, other_model.spec.modality())?);
    let ego_poses: Vec<_> = draws.iter().map(|d| cache.sample(d.index).poses[d.ego]).collect();
    let other_poses: Vec<_> = draws.iter().map(|d| cache.sample(d.index).poses[d.other]).collect();
    let collaborator = Collaborator { who: Participant::new(other_model, Some(models.bridge(other)?)), obs: other_obs, poses: other_poses };
    let logits = collaborative_logits(
        tape,
        Participant::new(ego_model, Some(models.bridge(ego)?)),
        ego_obs,
        &ego_poses,
        &[collaborator],
        Message::Common,
        cfg.standard_grid(),
    );
    let targets = pair_targets(cache, &ego_model.spec, draws);
    Ok(detection_loss(tape, logits, &targets, weights.focal_gamma, weights.focal_alpha))
}

/// Picks a collaborator for `ego` among `pool`, never `ego` itself unless it
/// is the only choice.
fn pick_partner<R: Rng>(rng: &mut R, pool: &[String], ego: &str) -> String {
    let others: Vec<&String> = pool.iter().filter(|p| p.as_str() != ego).collect();
    if others.is_empty() {
        ego.to_string()
    } else {
        others[rng.random_range(0..others.len())].clone()
    }
}

/// Step 1, stage 2: fine-tune every alliance receiver on the collaborative
/// detection loss; everything else is frozen.
pub fn stage2_adapt(cfg: &ExperimentConfig, models: &mut Models, sink: &mut dyn StepSink) -> Result<StageReport> {
    let stage = "negotiate/stage2".to_string();
    if models.progress.negotiated.is_empty() || models.negotiator.is_none() {
        return Err(Error::Invalid(format!("{stage} needs stage-1 checkpoints; run negotiate first")));
    }
    let alliance = models.progress.negotiated.clone();
    let mut names: Vec<String> = alliance.iter().flat_map(|id| perception_names(id)).collect();
    names.extend(alliance.iter().flat_map(|id| [format!("{id}.sender"), format!("{id}.resizer")]));
    names.extend(["negotiator".to_string(), "occupancy_head".to_string()]);
    let manifest = capture(models, &stage, &names)?;
    let cache = ViewCache::new(cfg.dataset.clone())?;
    let mut rng = stage_rng(cfg, &stage);
    let mut opt = Adam::new(cfg.optim.finetune_lr);
    let mut run = StageLoop::new(stage.clone(), sink);
    for step in 0..cfg.steps.stage2 {
        let draws = draw_pairs(&mut rng, cache.dataset(), cfg.optim.batch_size, 0.0);
        let partners: Vec<String> = alliance.iter().map(|a| pick_partner(&mut rng, &alliance, a)).collect();
        let receivers: Vec<&dyn Module> = alliance.iter().map(|a| &models.bridges[a].receiver as &dyn Module).collect();
        let tape = Tape::with_trainable(ids_of(&receivers));
        let mut comps = BTreeMap::new();
        let mut total: Option<Var> = None;
        for (ego, other) in alliance.iter().zip(&partners) {
            let l = collab_detection(&tape, cfg, models, &cache, ego, other, &draws, &cfg.weights)?;
            comps.insert(format!("{ego}<-{other}.detection"), l.item());
            total = Some(total.map_or(l, |t| t.add(l)));
        }
        let grads = run.backward(&tape, step, total.expect("alliance is not empty"), comps)?;
        let mut mods: Vec<&mut dyn Module> =
            models.bridges.iter_mut().filter(|(id, _)| alliance.contains(id)).map(|(_, b)| &mut b.receiver as &mut dyn Module).collect();
        opt.step(&mut mods, &grads);
    }
    models.progress.adapted = true;
    let report = finish_freeze(cfg, models, &manifest)?;
    Ok(run.finish(Some(report)))
}

/// Step 2: onboard `id` against the frozen negotiator and alliance. Returns
/// the reports of both join stages.
pub fn join_new_agent(cfg: &ExperimentConfig, models: &mut Models, id: &str, sink: &mut dyn StepSink) -> Result<[StageReport; 2]> {
    let spec = cfg.agent(id)?.clone();
    let alliance = models.progress.negotiated.clone();
    if alliance.is_empty() || models.negotiator.is_none() || models.occupancy.is_none() {
        return Err(Error::Invalid(format!("join/{id} needs negotiation checkpoints; run negotiate first")));
    }
    if alliance.iter().any(|a| a == id) {
        return Err(Error::Invalid(format!("{id} is already an alliance member")));
    }
    require_pretrained(models, &[id.to_string()], &format!("join/{id}"))?;
    for a in &alliance {
        if !models.resizers.contains_key(a) || !models.bridges.contains_key(a) {
            return Err(Error::Invalid(format!("join/{id}: alliance member {a} has no stage-1 modules")));
        }
    }
    let flags = cfg.ablation;
    let weights = flags.apply(&cfg.weights);
    let cache = ViewCache::new(cfg.dataset.clone())?;

    // stage A: align the new sender to the negotiated space
    let stage_a = format!("join/{id}/stage1");
    let mut rng = stage_rng(cfg, &stage_a);
    let mut bridge = Bridge::new(&spec, cfg.standard, flags.local_prompt, &mut rng);
    let mut names: Vec<String> = alliance.iter().flat_map(|a| perception_names(a)).collect();
    names.extend(alliance.iter().flat_map(|a| [format!("{a}.resizer"), format!("{a}.sender"), format!("{a}.receiver")]));
    names.extend(["negotiator".to_string(), "occupancy_head".to_string()]);
    names.extend(perception_names(id));
    let manifest_a = capture(models, &stage_a, &names)?;
    let keypoints = KeypointGrid::for_size(cfg.standard.height, cfg.standard.width);
    let std_grid = cfg.standard_grid();
    let negotiator = models.negotiator.as_ref().expect("checked above");
    let occupancy = models.occupancy.as_ref().expect("checked above");
    let mut opt = Adam::new(cfg.optim.lr);
    let mut run = StageLoop::new(stage_a.clone(), &mut *sink);
    for step in 0..cfg.steps.join_stage1 {
        let items = draw_views(&mut rng, &cache, cfg.optim.batch_size);
        let y = occupancy_batch(&cache, &items, std_grid);
        let tape = Tape::with_trainable(bridge.param_ids());
        let mut us = Vec::with_capacity(alliance.len());
        for a in &alliance {
            let model = models.perception(a)?;
            let x = tape.constant(cache.batch(&items, model.spec.modality())?);
            us.push(models.resizers[a].forward(&tape, model.encoder.forward(&tape, x)));
        }
        let p = if flags.negotiator {
            negotiator.negotiate(&tape, &us)?.p.detach()
        } else {
            let senders: Vec<Var> = alliance
                .iter()
                .map(|a| -> Result<Var> {
                    let model = models.perception(a)?;
                    let x = tape.constant(cache.batch(&items, model.spec.modality())?);
                    Ok(models.bridges[a].sender.forward(&tape, model.encoder.forward(&tape, x)).1)
                })
                .collect::<Result<_>>()?;
            mean_of(senders.into_iter()).detach()
        };
        let model = models.perception(id)?;
        let x = tape.constant(cache.batch(&items, model.spec.modality())?);
        let f = model.encoder.forward(&tape, x).detach();
        let (r, p_a) = bridge.sender.forward(&tape, f);
        let cycle = cycle_loss(f, bridge.receiver.forward(&tape, r, p), weights.beta);
        let (uni, terms) = multidim_align_loss(&tape, p_a, p, &y, occupancy, &keypoints, &weights);
        let comps = BTreeMap::from([
            ("cycle".to_string(), cycle.item()),
            ("distribution".to_string(), terms.distribution),
            ("structural".to_string(), terms.structural),
            ("pragmatic".to_string(), terms.pragmatic),
        ]);
        let loss = stage1_loss(None, &[(cycle, uni)], &weights);
        let grads = run.backward(&tape, step, loss, comps)?;
        opt.step(&mut [&mut bridge], &grads);
    }
    models.bridges.insert(id.to_string(), bridge);
    let report_a = run.finish(Some(finish_freeze(cfg, models, &manifest_a)?));

    // stage B: fine-tune only the new receiver against collaborative detection
    let stage_b = format!("join/{id}/stage2");
    let mut rng = stage_rng(cfg, &stage_b);
    names.push(format!("{id}.sender"));
    let manifest_b = capture(models, &stage_b, &names)?;
    let mut opt = Adam::new(cfg.optim.finetune_lr);
    let mut run = StageLoop::new(stage_b.clone(), sink);
    for step in 0..cfg.steps.join_stage2 {
        let draws = draw_pairs(&mut rng, cache.dataset(), cfg.optim.batch_size, 0.0);
        let partner = alliance[rng.random_range(0..alliance.len())].clone();
        let tape = Tape::with_trainable(models.bridges[id].receiver.param_ids());
        let to_new = collab_detection(&tape, cfg, models, &cache, id, &partner, &draws, &cfg.weights)?;
        let to_member = collab_detection(&tape, cfg, models, &cache, &partner, id, &draws, &cfg.weights)?;
        let comps = BTreeMap::from([
            (format!("{id}<-{partner}.detection"), to_new.item()),
            (format!("{partner}<-{id}.detection"), to_member.item()),
        ]);
        let grads = run.backward(&tape, step, to_new.add(to_member), comps)?;
        let receiver = &mut models.bridges.get_mut(id).expect("inserted above").receiver;
        opt.step(&mut [receiver], &grads);
    }
    if !models.progress.joined.iter().any(|j| j == id) {
        models.progress.joined.push(id.to_string());
    }
    let report_b = run.finish(Some(finish_freeze(cfg, models, &manifest_b)?));
    Ok([report_a, report_b])
}

/// Pretrains every agent in the roster, negotiates, adapts and joins every
/// non-member.
pub fn run_protocol(cfg: &ExperimentConfig, models: &mut Models, sink: &mut dyn StepSink) -> Result<Vec<StageReport>> {
    let mut reports = Vec::new();
    for a in &cfg.agents {
        if !models.perception.contains_key(a.agent_id()) {
            reports.push(pretrain_agent(cfg, models, a.agent_id(), sink)?);
        }
    }
    reports.push(stage1_negotiate(cfg, models, sink)?);
    reports.push(stage2_adapt(cfg, models, sink)?);
    for a in &cfg.agents {
        let id = a.agent_id();
        if !cfg.alliance.iter().any(|m| m == id) {
            reports.extend(join_new_agent(cfg, models, id, sink)?);
        }
    }
    Ok(reports)
}
