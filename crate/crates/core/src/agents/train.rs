use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AgentSpec, PerceptionModel};
use crate::error::{Error, Result};
use crate::losses::{detection_loss, DetectionTargets, LossWeights};
use crate::nn::{Adam, Module};
use crate::scenegen::dataset::{fnv1a, mix};
use crate::scenegen::{render_observation, warp_map, DatasetSpec, ModalitySpec, Observation, Sample};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::log::{loss_endpoints, StepRecord, StepSink};

/// Lazily generated samples and rendered observations of one dataset.
pub struct ViewCache {
    dataset: DatasetSpec,
    samples: RefCell<BTreeMap<usize, Rc<Sample>>>,
    views: RefCell<BTreeMap<(String, usize, usize), Rc<Observation>>>,
}

impl ViewCache {
    pub fn new(dataset: DatasetSpec) -> Result<Self> {
        dataset.validate()?;
        Ok(Self { dataset, samples: RefCell::default(), views: RefCell::default() })
    }

    pub fn dataset(&self) -> &DatasetSpec {
        &self.dataset
    }

    pub fn len(&self) -> usize {
        self.dataset.scenes
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.scenes == 0
    }

    pub fn sample(&self, index: usize) -> Rc<Sample> {
        self.samples.borrow_mut().entry(index).or_insert_with(|| Rc::new(self.dataset.sample(index))).clone()
    }

    pub fn observation(&self, index: usize, view: usize, modality: &ModalitySpec) -> Result<Rc<Observation>> {
        let key = (modality.name.clone(), index, view);
        if let Some(o) = self.views.borrow().get(&key) {
            return Ok(o.clone());
        }
        let sample = self.sample(index);
        let seed = sample.render_seed(view, &modality.name);
        let obs = Rc::new(render_observation(&sample.scene, &sample.poses[view], modality, seed)?);
        self.views.borrow_mut().insert(key, obs.clone());
        Ok(obs)
    }

    /// `[k, 1, n, n]` stack of the requested `(index, view)` observations.
    pub fn batch(&self, items: &[(usize, usize)], modality: &ModalitySpec) -> Result<Tensor> {
        let n = modality.grid.cells();
        let mut data = Vec::with_capacity(items.len() * n * n);
        for &(i, v) in items {
            data.extend_from_slice(&self.observation(i, v, modality)?.data);
        }
        Ok(Tensor::new(vec![items.len(), 1, n, n], data))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomogeneousConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability that a training sample sees no collaborator.
    pub solo_fraction: f64,
    pub seed: u64,
}

impl HomogeneousConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.solo_fraction) {
            return Err(Error::Config("homogeneous training: batch_size > 0, lr > 0, solo_fraction in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: usize,
    /// Mean loss over the first and last few steps.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// One training example: ego and collaborator views of a scene.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PairDraw {
    pub index: usize,
    pub ego: usize,
    pub other: usize,
    pub solo: bool,
}

pub(crate) fn draw_pairs<R: Rng>(rng: &mut R, dataset: &DatasetSpec, count: usize, solo_fraction: f64) -> Vec<PairDraw> {
    (0..count)
        .map(|_| {
            let index = rng.random_range(0..dataset.scenes);
            let ego = rng.random_range(0..dataset.viewpoints);
            let other = if dataset.viewpoints > 1 {
                (ego + rng.random_range(1..dataset.viewpoints)) % dataset.viewpoints
            } else {
                ego
            };
            let solo = dataset.viewpoints == 1 || rng.random::<f64>() < solo_fraction;
            PairDraw { index, ego, other, solo }
        })
        .collect()
}

/// Per-sample nearest-neighbour maps taking the collaborator's native grid
/// into the ego's. Solo draws get all-empty maps.
pub(crate) fn pair_warps(cache: &ViewCache, spec: &AgentSpec, draws: &[PairDraw]) -> Rc<Vec<Vec<Option<u32>>>> {
    let grid = spec.native_grid();
    let cells = grid.cells() * grid.cells();
    Rc::new(
        draws
            .iter()
            .map(|d| {
                if d.solo {
                    vec![None; cells]
                } else {
                    let s = cache.sample(d.index);
                    warp_map(&s.poses[d.ego], grid, &s.poses[d.other], grid)
                }
            })
            .collect(),
    )
}

pub(crate) fn pair_targets(cache: &ViewCache, spec: &AgentSpec, draws: &[PairDraw]) -> DetectionTargets {
    let grid = spec.native_grid();
    let centers: Vec<_> = draws.iter().map(|d| cache.sample(d.index).centers_in_view(d.ego, grid)).collect();
    DetectionTargets::build(&centers, grid)
}

/// Encodes ego and collaborator views, warps the latter into the ego frame,
/// fuses and returns the detection logits.
pub(crate) fn collab_logits<'t>(
    tape: &'t Tape,
    model: &PerceptionModel,
    cache: &ViewCache,
    draws: &[PairDraw],
) -> Result<Var<'t>> {
    let b = draws.len();
    let mut items: Vec<(usize, usize)> = draws.iter().map(|d| (d.index, d.ego)).collect();
    items.extend(draws.iter().map(|d| (d.index, d.other)));
    let x = tape.constant(cache.batch(&items, model.spec.modality())?);
    let feats = model.encoder.forward(tape, x);
    let local = feats.narrow(0, 0, b);
    let s = model.spec.native_size();
    let warped = feats.narrow(0, b, b).spatial_gather(pair_warps(cache, &model.spec, draws), s, s);
    let fused = model.fusion.forward(tape, local, &[warped]);
    Ok(model.head.forward(tape, fused))
}

/// Trains an agent's encoder, fusion and head on homogeneous collaboration
/// (ego plus a same-type collaborator sharing native features).
pub fn train_homogeneous(
    spec: AgentSpec,
    dataset: &DatasetSpec,
    config: &HomogeneousConfig,
    weights: &LossWeights,
    sink: &mut dyn StepSink,
) -> Result<(PerceptionModel, TrainOutcome)> {
    config.validate()?;
    weights.validate()?;
    let cache = ViewCache::new(dataset.clone())?;
    let agent_seed = mix(config.seed, fnv1a(spec.agent_id().as_bytes()));
    let mut init_rng = ChaCha8Rng::seed_from_u64(agent_seed);
    let mut model = PerceptionModel::new(spec, &mut init_rng);
    let mut data_rng = ChaCha8Rng::seed_from_u64(mix(agent_seed, 1));
    let mut opt = Adam::new(config.lr);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let draws = draw_pairs(&mut data_rng, dataset, config.batch_size, config.solo_fraction);
        let targets = pair_targets(&cache, &model.spec, &draws);
        let tape = Tape::with_trainable(model.param_ids());
        let logits = collab_logits(&tape, &model, &cache, &draws)?;
        let loss = detection_loss(&tape, logits, &targets, weights.focal_gamma, weights.focal_alpha);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, what: format!("{} homogeneous loss", model.spec.agent_id()) });
        }
        let grads = tape.backward(loss);
        if !grads.is_finite() {
            return Err(Error::Diverged { step, what: format!("{} homogeneous gradients", model.spec.agent_id()) });
        }
        opt.step(&mut [&mut model], &grads);
        losses.push(value);
        sink.record(&StepRecord {
            stage: format!("homogeneous/{}", model.spec.agent_id()),
            step,
            loss: value,
            components: BTreeMap::from([("detection".to_string(), value)]),
        })?;
    }
    let (initial_loss, final_loss) = loss_endpoints(&losses, 20).unwrap_or((f64::NAN, f64::NAN));
    Ok((model, TrainOutcome { steps: config.steps, initial_loss, final_loss }))
}
