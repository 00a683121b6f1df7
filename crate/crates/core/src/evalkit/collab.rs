use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ap::ApAccumulator;
use super::report::{ApEntry, DomainGap, MetricsReport, NoiseSweep};
use super::kl_domain_gap_tensors;
use crate::agents::{Detections, ViewCache};
use crate::bridge::{collaborative_logits, Collaborator, Message, Participant};
use crate::error::{Error, Result};
use crate::scenegen::dataset::{fnv1a, mix};
use crate::scenegen::{apply_pose_noise, Pose};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{ExperimentConfig, Models};

/// Scenes per forward pass during evaluation.
const EVAL_CHUNK: usize = 16;

/// How an ego uses its collaborators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Ego perceives alone.
    NoFusion,
    /// Raw native features are shared; same-type agents only.
    Native,
    /// Sender messages in the common space, decoded by the ego's receiver.
    Common,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::NoFusion => "no-fusion",
            Method::Native => "native",
            Method::Common => "common",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollabScore {
    pub ap_loose: f64,
    pub ap_strict: f64,
}

fn participant<'a>(models: &'a Models, id: &str, method: Method) -> Result<Participant<'a>> {
    let model = models.perception(id)?;
    let bridge = match method {
        Method::Common => Some(models.bridge(id)?),
        _ => None,
    };
    Ok(Participant::new(model, bridge))
}

/// Collaborator pose as believed by the ego. Noise draws depend only on the
/// scene and slot, so every method and noise level sees the same directions.
fn noisy_pose(cfg: &ExperimentConfig, pose: &Pose, scene: usize, slot: usize, sigma: f64) -> Pose {
    if sigma == 0.0 {
        return *pose;
    }
    let seed = mix(mix(cfg.eval.seed, fnv1a(b"pose-noise")), (scene * 64 + slot) as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_pose_noise(pose, sigma, sigma.to_radians(), &mut rng)
}

/// Average precision with each agent in `agents` acting as ego while the
/// others collaborate through `method`, in `agents` order. A single agent
/// with [`Method::NoFusion`] is the No-Fusion baseline. `sigma` is the
/// pose-noise level (metres for x/y, degrees for yaw) applied to
/// collaborator poses.
pub fn collab_scores_by_ego(cfg: &ExperimentConfig, models: &Models, agents: &[&str], method: Method, sigma: f64) -> Result<Vec<CollabScore>> {
    if agents.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one agent".into()));
    }
    if (method == Method::NoFusion) != (agents.len() == 1) {
        return Err(Error::Invalid("no-fusion takes exactly one agent; collaboration needs two or more".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Invalid("pose noise must be nonnegative".into()));
    }
    let dataset = cfg.eval_dataset();
    let cache = ViewCache::new(dataset.clone())?;
    let views = dataset.viewpoints;
    let view_of = |slot: usize| if slot == 0 || views == 1 { 0 } else { 1 + (slot - 1) % (views - 1) };
    let mut scores = Vec::with_capacity(agents.len());
    for (e, ego_id) in agents.iter().enumerate() {
        let ego = participant(models, ego_id, method)?;
        let others: Vec<(usize, &str)> = agents.iter().enumerate().filter(|(j, _)| *j != e).map(|(j, a)| (j, *a)).collect();
        let partners: Vec<Participant> = others.iter().map(|(_, a)| participant(models, a, method)).collect::<Result<_>>()?;
        let grid = ego.model.spec.native_grid();
        let mut loose = ApAccumulator::new();
        let mut strict = ApAccumulator::new();
        for start in (0..dataset.scenes).step_by(EVAL_CHUNK) {
            let scenes: Vec<usize> = (start..(start + EVAL_CHUNK).min(dataset.scenes)).collect();
            let tape = Tape::new();
            let ego_items: Vec<_> = scenes.iter().map(|&i| (i, view_of(0))).collect();
            let ego_obs = tape.constant(cache.batch(&ego_items, ego.model.spec.modality())?);
            let ego_poses: Vec<Pose> = scenes.iter().map(|&i| cache.sample(i).poses[view_of(0)]).collect();
            let mut collaborators = Vec::with_capacity(others.len());
            for (k, (&(slot, _), who)) in others.iter().zip(&partners).enumerate() {
                // slots are numbered from 1 in the ego's ordering
                let local_slot = k + 1;
                let items: Vec<_> = scenes.iter().map(|&i| (i, view_of(local_slot))).collect();
                let obs: Var = tape.constant(cache.batch(&items, who.model.spec.modality())?);
                let poses = scenes
                    .iter()
                    .map(|&i| noisy_pose(cfg, &cache.sample(i).poses[view_of(local_slot)], i, slot, sigma))
                    .collect();
                collaborators.push(Collaborator { who: *who, obs, poses });
            }
            let message = if method == Method::Common { Message::Common } else { Message::Native };
            let logits = collaborative_logits(&tape, ego, ego_obs, &ego_poses, &collaborators, message, cfg.standard_grid());
            let logits: Tensor = (*logits.value()).clone();
            for (b, &i) in scenes.iter().enumerate() {
                let det = Detections::from_logits(&logits, b, grid, cfg.eval.peak_threshold);
                let gt = cache.sample(i).centers_in_view(view_of(0), grid);
                loose.add(&det.peaks, &gt, cfg.eval.loose_radius);
                strict.add(&det.peaks, &gt, cfg.eval.strict_radius);
            }
        }
        scores.push(CollabScore { ap_loose: loose.ap(), ap_strict: strict.ap() });
    }
    Ok(scores)
}

/// [`collab_scores_by_ego`] averaged over egos.
pub fn run_collab_eval(cfg: &ExperimentConfig, models: &Models, agents: &[&str], method: Method, sigma: f64) -> Result<CollabScore> {
    let scores = collab_scores_by_ego(cfg, models, agents, method, sigma)?;
    let n = scores.len() as f64;
    Ok(CollabScore {
        ap_loose: scores.iter().map(|s| s.ap_loose).sum::<f64>() / n,
        ap_strict: scores.iter().map(|s| s.ap_strict).sum::<f64>() / n,
    })
}

/// KL of the negotiated representation and of the protocol agent's native
/// representation against each alliance member's standardized features.
pub fn domain_gaps(cfg: &ExperimentConfig, models: &Models) -> Result<Vec<DomainGap>> {
    let alliance = &models.progress.negotiated;
    if alliance.is_empty() {
        return Err(Error::Invalid("domain gaps need stage-1 checkpoints".into()));
    }
    let protocol = models.perception(&cfg.protocol)?;
    if protocol.spec.native_shape() != cfg.standard.shape() {
        return Err(Error::Shape(format!(
            "protocol features {:?} are not standard-shaped {:?}",
            protocol.spec.native_shape(),
            cfg.standard.shape()
        )));
    }
    let dataset = cfg.dataset.split(mix(cfg.eval.seed, fnv1a(b"domain-gap")), cfg.eval.gap_scenes);
    let cache = ViewCache::new(dataset)?;
    let items: Vec<(usize, usize)> = (0..cache.len()).map(|i| (i, 0)).collect();
    let tape = Tape::new();
    let mut us = Vec::with_capacity(alliance.len());
    let mut senders = Vec::with_capacity(alliance.len());
    for id in alliance {
        let model = models.perception(id)?;
        let resizer = models.resizers.get(id).ok_or_else(|| Error::Invalid(format!("no resizer for {id}")))?;
        let f = model.encoder.forward(&tape, tape.constant(cache.batch(&items, model.spec.modality())?));
        us.push(resizer.forward(&tape, f));
        if !cfg.ablation.negotiator {
            senders.push(models.bridge(id)?.sender.forward(&tape, f).1);
        }
    }
    let p = if cfg.ablation.negotiator {
        let negotiator = models.negotiator.as_ref().ok_or_else(|| Error::Invalid("no negotiator checkpoint".into()))?;
        negotiator.negotiate(&tape, &us)?.p
    } else {
        let mut acc = senders[0];
        for s in &senders[1..] {
            acc = acc.add(*s);
        }
        acc.mul_scalar(1.0 / senders.len() as f64)
    };
    let proto = protocol.encoder.forward(&tape, tape.constant(cache.batch(&items, protocol.spec.modality())?));
    let (p, proto) = (p.value(), proto.value());
    alliance
        .iter()
        .zip(&us)
        .map(|(id, u)| {
            let u = u.value();
            Ok(DomainGap { agent: id.clone(), kl_common: kl_domain_gap_tensors(&p, &u)?, kl_protocol: kl_domain_gap_tensors(&proto, &u)? })
        })
        .collect()
}

fn setting_label(agents: &[&str]) -> String {
    agents.join("+")
}

/// The standard evaluation suite over whatever stages `models` has completed:
/// No-Fusion baselines, homogeneous native and common-space sharing,
/// heterogeneous alliance and joined-agent collaboration, pose-noise sweeps
/// and domain gaps.
pub fn evaluate(cfg: &ExperimentConfig, models: &Models) -> Result<MetricsReport> {
    let mut report = MetricsReport::new(cfg);
    let push = |report: &mut MetricsReport, agents: &[&str], method: Method| -> Result<()> {
        let sweep = method != Method::NoFusion;
        let sigmas: Vec<f64> = if sweep { cfg.eval.noise_sigmas.clone() } else { vec![0.0] };
        let mut curve = NoiseSweep { setting: setting_label(agents), method, sigmas: Vec::new(), ap_loose: Vec::new(), ap_strict: Vec::new() };
        let mut base = None;
        for &s in &sigmas {
            let score = run_collab_eval(cfg, models, agents, method, s)?;
            if s == 0.0 {
                base = Some(score);
            }
            curve.sigmas.push(s);
            curve.ap_loose.push(score.ap_loose);
            curve.ap_strict.push(score.ap_strict);
        }
        let base = match base {
            Some(b) => b,
            None => run_collab_eval(cfg, models, agents, method, 0.0)?,
        };
        report.entries.push(ApEntry { setting: setting_label(agents), method, sigma: 0.0, ap_loose: base.ap_loose, ap_strict: base.ap_strict });
        if sweep && sigmas.len() > 1 {
            report.noise_sweeps.push(curve);
        }
        Ok(())
    };
    for spec in &cfg.agents {
        let id = spec.agent_id();
        if models.perception.contains_key(id) {
            push(&mut report, &[id], Method::NoFusion)?;
        }
    }
    let alliance: Vec<&str> = models.progress.negotiated.iter().map(String::as_str).collect();
    if let Some(&first) = alliance.first() {
        push(&mut report, &[first, first], Method::Native)?;
        push(&mut report, &[first, first], Method::Common)?;
        if alliance.len() > 1 {
            push(&mut report, &alliance, Method::Common)?;
        }
        for joined in &models.progress.joined {
            push(&mut report, &[first, joined.as_str()], Method::Common)?;
        }
        report.domain_gaps = domain_gaps(cfg, models)?;
    }
    Ok(report)
}
