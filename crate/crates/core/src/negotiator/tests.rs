use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{Adam, Module};
use crate::scenegen::Pose;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn spec(c: usize, s: usize) -> StandardRepSpec {
    StandardRepSpec::new(c, s, s).unwrap()
}

#[test]
fn level_shapes_halve() {
    let sp = spec(64, 64);
    let neg = Negotiator::new(sp, PyramidConfig { levels: 2, estimator_hidden: 8 }, &mut rng(1)).unwrap();
    let tape = Tape::new();
    let u = tape.constant(Tensor::randn(vec![1, 64, 64, 64], 1.0, &mut rng(2)));
    let shapes: Vec<Vec<usize>> = neg.pyramid_levels(&tape, u).iter().map(|v| v.shape()).collect();
    assert_eq!(shapes, vec![vec![1, 64, 64, 64], vec![1, 64, 32, 32], vec![1, 64, 16, 16]]);
    assert_eq!(neg.negotiate(&tape, &[u]).unwrap().p.shape(), vec![1, 64, 64, 64]);
}

#[test]
fn config_validation() {
    let sp = spec(8, 16);
    assert!(PyramidConfig { levels: 2, estimator_hidden: 4 }.validate(sp).is_ok());
    assert!(PyramidConfig { levels: 3, estimator_hidden: 4 }.validate(sp).is_err());
    assert!(PyramidConfig { levels: 0, estimator_hidden: 4 }.validate(sp).is_err());
    assert!(Negotiator::new(spec(8, 6), PyramidConfig { levels: 2, estimator_hidden: 4 }, &mut rng(0)).is_err());
}

#[test]
fn constant_input_stays_constant_on_the_pooling_path() {
    let mut neg = Negotiator::new(spec(4, 16), PyramidConfig::default(), &mut rng(3)).unwrap();
    neg.zero_residuals();
    let tape = Tape::new();
    let u = tape.constant(Tensor::full(vec![1, 4, 16, 16], 1.5));
    for level in neg.pyramid_levels(&tape, u) {
        assert!(level.value().data().iter().all(|&v| v == 1.5));
    }
    neg.force_unit_importance();
    let p = neg.negotiate(&tape, &[u]).unwrap().p.value();
    assert!(p.data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
}

#[test]
fn gradient_reaches_input_from_every_level() {
    let neg = Negotiator::new(spec(4, 16), PyramidConfig::default(), &mut rng(4)).unwrap();
    let x = Tensor::randn(vec![1, 4, 16, 16], 1.0, &mut rng(5));
    for l in 0..=2 {
        let tape = Tape::new();
        let u = tape.input(x.clone(), true);
        let levels = neg.pyramid_levels(&tape, u);
        let g = tape.backward(levels[l].square().sum());
        assert!(g.wrt(u).unwrap().max_abs() > 0.0, "level {l}");
    }
}

#[test]
fn importance_is_a_probability() {
    let neg = Negotiator::new(spec(4, 16), PyramidConfig::default(), &mut rng(6)).unwrap();
    let tape = Tape::new();
    let u = tape.constant(Tensor::randn(vec![2, 4, 16, 16], 5.0, &mut rng(7)));
    let c = neg.estimate_importance(&tape, u, 0).value();
    assert_eq!(c.shape(), &[2, 4, 16, 16]);
    assert!(c.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let z = neg.estimate_importance(&tape, tape.constant(Tensor::zeros(vec![1, 4, 8, 8])), 1).value();
    assert!(z.data().iter().all(|&v| v == 0.5));
}

#[test]
fn single_modality_with_unit_importance_averages_the_pyramid() {
    let mut neg = Negotiator::new(spec(3, 8), PyramidConfig { levels: 1, estimator_hidden: 4 }, &mut rng(8)).unwrap();
    neg.force_unit_importance();
    let x = Tensor::randn(vec![1, 3, 8, 8], 1.0, &mut rng(9));
    let tape = Tape::new();
    let u = tape.constant(x.clone());
    let out = neg.negotiate(&tape, &[u]).unwrap();
    let lv = neg.pyramid_levels(&tape, u);
    let expected = lv[0].add(lv[1].resize_bilinear(8, 8)).mul_scalar(0.5).value();
    for (a, b) in out.p.value().data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let imp = out.importance[0][1].value();
    assert!(imp.data().iter().all(|&v| v == 1.0));
}

#[test]
fn duplicated_modality_matches_single() {
    let neg = Negotiator::new(spec(4, 8), PyramidConfig { levels: 1, estimator_hidden: 4 }, &mut rng(10)).unwrap();
    let tape = Tape::new();
    let u = tape.constant(Tensor::randn(vec![1, 4, 8, 8], 1.0, &mut rng(11)));
    let one = neg.negotiate(&tape, &[u]).unwrap().p.value();
    let two = neg.negotiate(&tape, &[u, u]).unwrap().p.value();
    for (a, b) in one.data().iter().zip(two.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn negotiation_is_permutation_invariant_and_rejects_empty_input() {
    let neg = Negotiator::new(spec(4, 8), PyramidConfig { levels: 1, estimator_hidden: 4 }, &mut rng(12)).unwrap();
    let mut r = rng(13);
    let frame = Pose::new(0.0, 0.0, 0.0);
    let mut map = BTreeMap::new();
    map.insert("a".to_string(), FeatureMap::new(Tensor::randn(vec![4, 8, 8], 1.0, &mut r), frame).unwrap());
    map.insert("b".to_string(), FeatureMap::new(Tensor::randn(vec![4, 8, 8], 1.0, &mut r), frame).unwrap());
    let p = negotiate(&map, &neg).unwrap();
    let tape = Tape::new();
    let us: Vec<Var> = map.values().rev().map(|f| tape.constant(f.batched())).collect();
    let rev = neg.negotiate(&tape, &us).unwrap().p.value();
    for (a, b) in p.map().data.data().iter().zip(rev.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(negotiate(&BTreeMap::new(), &neg).is_err());
    assert!(neg.negotiate(&tape, &[]).is_err());
}

#[test]
fn equal_importance_gives_the_arithmetic_mean_per_level() {
    let mut neg = Negotiator::new(spec(4, 8), PyramidConfig { levels: 1, estimator_hidden: 4 }, &mut rng(14)).unwrap();
    neg.force_unit_importance();
    let tape = Tape::new();
    let mut r = rng(15);
    let a = tape.constant(Tensor::randn(vec![1, 4, 8, 8], 1.0, &mut r));
    let b = tape.constant(Tensor::randn(vec![1, 4, 8, 8], 1.0, &mut r));
    let out = neg.negotiate(&tape, &[a, b]).unwrap();
    for l in 0..2 {
        let mean = out.levels[0][l].add(out.levels[1][l]).mul_scalar(0.5).value();
        for (x, y) in out.per_level[l].value().data().iter().zip(mean.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn negotiation_matches_loop_oracle() {
    let (c, s) = (2, 4);
    let mut neg = Negotiator::new(spec(c, s), PyramidConfig { levels: 1, estimator_hidden: 3 }, &mut rng(16)).unwrap();
    // non-trivial biases and shrink so every term is exercised
    let mut r = rng(17);
    neg.visit_mut("", &mut |_, p| {
        let shape = p.value().shape().to_vec();
        p.set(Tensor::randn(shape, 0.5, &mut r));
    });
    let inputs: Vec<Tensor> = (0..2).map(|_| Tensor::randn(vec![c, s, s], 1.0, &mut r)).collect();

    let expected = crate::oracle::negotiate(&neg, &inputs);

    let frame = Pose::new(0.0, 0.0, 0.0);
    let map: BTreeMap<String, FeatureMap> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("m{i}"), FeatureMap::new(t.clone(), frame).unwrap()))
        .collect();
    let p = negotiate(&map, &neg).unwrap();
    for (a, b) in p.map().data.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn estimator_learns_to_prefer_the_informative_modality() {
    let sp = spec(2, 8);
    let mut neg = Negotiator::new(sp, PyramidConfig { levels: 1, estimator_hidden: 8 }, &mut rng(18)).unwrap();
    let mut r = rng(19);
    let mut opt = Adam::new(1e-2);
    let batch = |r: &mut ChaCha8Rng| {
        let signal = Tensor::randn(vec![4, 2, 8, 8], 1.0, r).map(|v| v.abs());
        let noise = Tensor::randn(vec![4, 2, 8, 8], 1.0, r);
        (signal, noise)
    };
    let mean_importance = |neg: &Negotiator, x: &Tensor| {
        let tape = Tape::new();
        neg.estimate_importance(&tape, tape.constant(x.clone()), 0).value().mean()
    };
    for _ in 0..300 {
        let (signal, noise) = batch(&mut r);
        let tape = Tape::with_trainable(neg.param_ids());
        let out = neg.negotiate(&tape, &[tape.constant(signal.clone()), tape.constant(noise)]).unwrap();
        let loss = out.p.sub(tape.constant(signal)).square().mean();
        let g = tape.backward(loss);
        opt.step(&mut [&mut neg], &g);
    }
    let (signal, noise) = batch(&mut r);
    let (si, ni) = (mean_importance(&neg, &signal), mean_importance(&neg, &noise));
    assert!(si > ni + 0.1, "signal {si} noise {ni}");
}
