use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::losses::LossWeights;
use crate::nn::Module;
use crate::scenegen::{DatasetSpec, ModalityKind};
use crate::training::log::StepRecord;

fn modality(name: &str, kind: ModalityKind) -> ModalitySpec {
    ModalitySpec { name: name.into(), kind, dropout_rate: 0.0, grid: GridSpec::new(16.0, 1.0).unwrap(), range: Some(10.0) }
}

fn spec_a() -> AgentSpec {
    AgentSpec::new("m1", modality("ray96", ModalityKind::SparseRay { ray_count: 96 }), EncoderArch::ConvA, 16).unwrap()
}

fn spec_b() -> AgentSpec {
    AgentSpec::new("m2", modality("blur1", ModalityKind::DenseBlur { blur_sigma: 1.0 }), EncoderArch::ConvB, 12).unwrap()
}

fn dataset() -> DatasetSpec {
    DatasetSpec { seed: 3, scenes: 6, objects_min: 5, objects_max: 12, world_extent: 24.0, viewpoints: 2, spacing: (8.0, 14.0) }
}

fn model(spec: AgentSpec, seed: u64) -> PerceptionModel {
    PerceptionModel::new(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn native_shapes_follow_the_layer_plan() {
    assert_eq!(spec_a().native_shape(), [16, 16, 16]);
    assert_eq!(spec_b().native_shape(), [12, 8, 8]);
    let cache = ViewCache::new(dataset()).unwrap();
    let s = cache.sample(0);
    for spec in [spec_a(), spec_b()] {
        let m = model(spec.clone(), 1);
        let obs = cache.observation(0, 0, spec.modality()).unwrap();
        let f = m.encode(&obs, s.poses[0]).unwrap();
        assert_eq!(f.data.shape(), spec.native_shape());
        assert!(f.data.is_finite());
    }
}

#[test]
fn stride_mismatch_is_rejected() {
    let m = ModalitySpec { grid: GridSpec::new(5.0, 1.0).unwrap(), ..spec_a().modality().clone() };
    assert!(AgentSpec::new("bad", m, EncoderArch::ConvB, 8).is_err());
}

#[test]
fn encoding_is_deterministic() {
    let cache = ViewCache::new(dataset()).unwrap();
    let s = cache.sample(1);
    let obs = cache.observation(1, 0, spec_a().modality()).unwrap();
    let a = model(spec_a(), 9).encode(&obs, s.poses[0]).unwrap();
    let b = model(spec_a(), 9).encode(&obs, s.poses[0]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fusion_is_permutation_invariant_over_received() {
    let m = model(spec_a(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frame = Pose::new(0.0, 0.0, 0.0);
    let fm = |rng: &mut ChaCha8Rng| FeatureMap::new(Tensor::randn(vec![16, 16, 16], 1.0, rng).map(|v| v.max(0.0)), frame).unwrap();
    let (l, r1, r2) = (fm(&mut rng), fm(&mut rng), fm(&mut rng));
    let a = m.fuse(&l, &[r1.clone(), r2.clone()]).unwrap();
    let b = m.fuse(&l, &[r2, r1]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_message_is_neutral_for_fusion() {
    let m = model(spec_a(), 2);
    let frame = Pose::new(0.0, 0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let l = FeatureMap::new(Tensor::randn(vec![16, 16, 16], 1.0, &mut rng).map(|v| v.max(0.0)), frame).unwrap();
    let zero = FeatureMap::new(Tensor::zeros(vec![16, 16, 16]), frame).unwrap();
    assert_eq!(m.fuse(&l, &[]).unwrap(), m.fuse(&l, &[zero]).unwrap());
}

#[test]
fn fusion_rejects_foreign_shapes() {
    let m = model(spec_a(), 2);
    let frame = Pose::new(0.0, 0.0, 0.0);
    let l = FeatureMap::new(Tensor::zeros(vec![16, 16, 16]), frame).unwrap();
    let other = FeatureMap::new(Tensor::zeros(vec![12, 8, 8]), frame).unwrap();
    assert!(matches!(m.fuse(&l, &[other]), Err(Error::Shape(_))));
}

#[test]
fn peaks_decode_positions_and_break_plateaus() {
    let grid = GridSpec::with_cells(4.0, 8);
    let mut hm = Tensor::zeros(vec![8, 8]);
    hm.data_mut()[2 * 8 + 3] = 0.9;
    hm.data_mut()[6 * 8 + 6] = 0.7;
    hm.data_mut()[6 * 8 + 7] = 0.7;
    hm.data_mut()[0] = 0.2;
    let mut off = Tensor::full(vec![2, 8, 8], 0.5);
    off.data_mut()[2 * 8 + 3] = 0.25;
    let peaks = extract_peaks(&hm, &off, grid, 0.3);
    assert_eq!(peaks.len(), 2);
    assert_eq!((peaks[0].x, peaks[0].y, peaks[0].score), (-4.0 + 3.25, -4.0 + 2.5, 0.9));
    assert_eq!((peaks[1].x, peaks[1].y), (-4.0 + 6.5, -4.0 + 6.5));
}

#[test]
fn head_prior_is_low() {
    let m = model(spec_a(), 3);
    let f = FeatureMap::new(Tensor::zeros(vec![16, 16, 16]), Pose::new(0.0, 0.0, 0.0)).unwrap();
    let d = m.detect(&f, 0.5).unwrap();
    assert!(d.peaks.is_empty());
    assert!((d.heatmap.data()[0] - 0.1).abs() < 0.01);
}

#[test]
fn homogeneous_training_reduces_loss_and_is_reproducible() {
    let cfg = HomogeneousConfig { steps: 60, batch_size: 4, lr: 3e-3, solo_fraction: 0.25, seed: 11 };
    let mut log: Vec<StepRecord> = Vec::new();
    let (m1, out1) = train_homogeneous(spec_a(), &dataset(), &cfg, &LossWeights::default(), &mut log).unwrap();
    assert_eq!(log.len(), 60);
    assert!(out1.final_loss < 0.8 * out1.initial_loss, "{out1:?}");
    let (m2, out2) = train_homogeneous(spec_a(), &dataset(), &cfg, &LossWeights::default(), &mut crate::training::NullSink).unwrap();
    assert_eq!(out1, out2);
    assert_eq!(m1.param_hash(), m2.param_hash());
}
