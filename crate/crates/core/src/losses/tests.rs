use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::Module;
use crate::oracle::{self, grad_rel_error};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scalar<'a>(v: Var<'a>) -> f64 {
    v.item()
}

#[test]
fn identity_cases_are_exactly_zero() {
    let mut r = rng(1);
    let x = Tensor::randn(vec![2, 4, 8, 8], 1.0, &mut r);
    let tape = Tape::new();
    let a = tape.constant(x.clone());
    let b = tape.constant(x.clone());
    assert_eq!(scalar(cycle_loss(a, b, 1.0)), 0.0);
    assert_eq!(scalar(distribution_align_loss(a, b, 1.0)), 0.0);
    let kp = KeypointGrid::for_size(8, 8);
    assert_eq!(scalar(structural_align_loss(a, b, &kp)), 0.0);
}

#[test]
fn cycle_loss_hand_values() {
    let tape = Tape::new();
    let f = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
    let l = tape.constant(Tensor::ones(vec![1, 1, 2, 2]));
    assert_eq!(scalar(cycle_loss(f, l, 0.0)), 1.0);

    // channel 0 has std 1, channel 1 std 2; the reconstruction has std 1 in both
    let f = Tensor::new(vec![1, 2, 1, 2], vec![-1.0, 1.0, -2.0, 2.0]);
    let l = Tensor::new(vec![1, 2, 1, 2], vec![-1.0, 1.0, -1.0, 1.0]);
    let mse = (0.0 + 0.0 + 1.0 + 1.0) / 4.0;
    let expected = mse + (2.0f64 - 1.0).powi(2) / 2.0;
    let got = scalar(cycle_loss(tape.constant(f), tape.constant(l), 1.0));
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}

#[test]
fn distribution_loss_is_not_scale_invariant() {
    let mut r = rng(2);
    let p = Tensor::randn(vec![1, 3, 4, 4], 1.0, &mut r);
    let tape = Tape::new();
    let base = scalar(distribution_align_loss(tape.constant(p.clone()), tape.constant(p.clone()), 1.0));
    let scaled = scalar(distribution_align_loss(tape.constant(p.map(|v| 2.0 * v)), tape.constant(p), 1.0));
    assert_eq!(base, 0.0);
    assert!(scaled > 0.0);
}

#[test]
fn keypoints_sit_on_quarter_lattice() {
    let kp = KeypointGrid::for_size(16, 16);
    assert_eq!(kp.points[0], (4, 4));
    assert_eq!(kp.points[4], (8, 8));
    assert_eq!(kp.points[8], (12, 12));
    let kp = KeypointGrid::for_size(4, 8);
    assert_eq!(kp.points[2], (6, 1));
    assert_eq!(kp.points[6], (2, 3));
}

#[test]
fn relation_matrix_matches_loop_oracle() {
    let mut r = rng(3);
    let sample = Tensor::randn(vec![4, 8, 8], 1.0, &mut r);
    let kp = KeypointGrid::for_size(8, 8);
    let m = relation_matrix(&sample, &kp);
    let o = oracle::relation_matrix(&sample, &kp);
    for i in 0..9 {
        for j in 0..9 {
            assert!((m.data[i][j] - o[i][j]).abs() < 1e-6);
        }
    }
    // the batched differentiable version agrees
    let tape = Tape::new();
    let batched = relation_matrices(tape.constant(sample.clone().reshape(vec![1, 4, 8, 8])), &kp).value();
    for i in 0..9 {
        for j in 0..9 {
            assert!((batched.data()[i * 9 + j] - o[i][j]).abs() < 1e-6);
        }
    }
}

#[test]
fn relation_matrix_special_cases() {
    let kp = KeypointGrid::for_size(8, 8);
    let same = Tensor::from_fn(vec![3, 8, 8], |i| [1.0, -2.0, 0.5][i / 64]);
    let m = relation_matrix(&same, &kp);
    assert!(m.data.iter().flatten().all(|&v| (v - 1.0).abs() < 1e-12));

    let mut ortho = Tensor::zeros(vec![2, 8, 8]);
    let (x0, y0) = kp.points[0];
    let (x1, y1) = kp.points[1];
    ortho.data_mut()[y0 * 8 + x0] = 1.0;
    ortho.data_mut()[64 + y1 * 8 + x1] = 1.0;
    let m = relation_matrix(&ortho, &kp);
    assert_eq!(m.data[0][1], 0.0);
    assert_eq!(m.data[0][0], 1.0);
    // zero vectors compare as 0, including with themselves
    assert_eq!(m.data[2][2], 0.0);
    assert_eq!(m.data[2][0], 0.0);
}

#[test]
fn structural_loss_hand_value() {
    // keypoint 2 holds (cos 60°, sin 60°) in `a` and (1, 0) in `b`
    let kp = KeypointGrid::for_size(4, 4);
    let mut a = Tensor::zeros(vec![1, 2, 4, 4]);
    let mut b = Tensor::zeros(vec![1, 2, 4, 4]);
    for (i, &(x, y)) in kp.points.iter().enumerate() {
        let (u, v) = match i {
            1 => (1.0, 0.0),
            2 => (0.5, 3f64.sqrt() / 2.0),
            _ => (0.0, 1.0),
        };
        a.set4(0, 0, y, x, u);
        a.set4(0, 1, y, x, v);
        let (u2, v2) = if i == 2 { (1.0, 0.0) } else { (u, v) };
        b.set4(0, 0, y, x, u2);
        b.set4(0, 1, y, x, v2);
    }
    let ma = relation_matrix(&a.clone().reshape(vec![2, 4, 4]), &kp);
    let mb = relation_matrix(&b.clone().reshape(vec![2, 4, 4]), &kp);
    let mut diff = 0.0;
    for i in 0..9 {
        for j in 0..9 {
            diff += (ma.data[i][j] - mb.data[i][j]).abs();
        }
    }
    // pairs (1,2)/(2,1) differ by 0.5, but keypoint 2 also changed relative
    // to the seven (0,1) points: |sin 60° - 0| on 14 entries
    let expected = (2.0 * 0.5 + 14.0 * (3f64.sqrt() / 2.0)) / 81.0;
    let tape = Tape::new();
    let got = scalar(structural_align_loss(tape.constant(a), tape.constant(b), &kp));
    assert!((got - diff / 81.0).abs() < 1e-12);
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn structural_loss_single_pair_difference() {
    // only keypoints 1 and 2 carry signal, so only (1,2)/(2,1) can differ
    let kp = KeypointGrid::for_size(4, 4);
    let build = |angle: f64| {
        let mut t = Tensor::zeros(vec![1, 2, 4, 4]);
        let (x1, y1) = kp.points[1];
        let (x2, y2) = kp.points[2];
        t.set4(0, 0, y1, x1, 1.0);
        t.set4(0, 0, y2, x2, angle.cos());
        t.set4(0, 1, y2, x2, angle.sin());
        t
    };
    let tape = Tape::new();
    let a = tape.constant(build(0.0));
    let b = tape.constant(build(std::f64::consts::FRAC_PI_3));
    assert!((scalar(structural_align_loss(a, b, &kp)) - 1.0 / 81.0).abs() < 1e-12);
}

#[test]
fn structural_loss_ignores_positive_rescaling() {
    let mut r = rng(4);
    let kp = KeypointGrid::for_size(8, 8);
    let a = Tensor::randn(vec![2, 4, 8, 8], 1.0, &mut r);
    let b = Tensor::randn(vec![2, 4, 8, 8], 1.0, &mut r);
    let tape = Tape::new();
    let base = scalar(structural_align_loss(tape.constant(a.clone()), tape.constant(b.clone()), &kp));
    let scaled = scalar(structural_align_loss(tape.constant(a.map(|v| 3.0 * v)), tape.constant(b), &kp));
    assert!((base - scaled).abs() < 1e-12);
}

#[test]
fn focal_matches_oracle_and_limits() {
    let mut r = rng(5);
    let x = Tensor::randn(vec![1, 1, 4, 4], 2.0, &mut r);
    let y = Tensor::from_fn(vec![1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
    let tape = Tape::new();
    let got = scalar(focal_loss(tape.constant(x.clone()), &y, 2.0, 0.25));
    assert!((got - oracle::focal(x.data(), y.data(), 2.0, 0.25)).abs() < 1e-6);

    // gamma = 0, alpha = 0.5 is half the binary cross-entropy
    let bce: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&z, &t)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 16.0;
    let half = scalar(focal_loss(tape.constant(x), &y, 0.0, 0.5));
    assert!((half - 0.5 * bce).abs() < 1e-12);

    // confident, correct predictions
    let perfect = y.map(|t| if t > 0.5 { 1e3 } else { -1e3 });
    assert_eq!(scalar(focal_loss(tape.constant(perfect), &y, 2.0, 0.25)), 0.0);
}

#[test]
fn pragmatic_loss_shares_one_head() {
    let mut r = rng(6);
    let head = OccupancyHead::new(4, &mut r);
    let w = LossWeights::default();
    let y = Tensor::from_fn(vec![2, 1, 8, 8], |i| (i % 7 == 0) as u8 as f64);
    let pm = Tensor::randn(vec![2, 4, 8, 8], 1.0, &mut r);
    let p = Tensor::randn(vec![2, 4, 8, 8], 1.0, &mut r);
    let tape = Tape::with_trainable(head.param_ids());
    let pm_v = tape.input(pm, true);
    let p_v = tape.input(p, true);
    let loss = pragmatic_align_loss(&tape, pm_v, &y, &head, &w).add(pragmatic_align_loss(&tape, p_v, &y, &head, &w));
    let g = tape.backward(loss);
    assert!(g.wrt(pm_v).unwrap().max_abs() > 0.0);
    assert!(g.wrt(p_v).unwrap().max_abs() > 0.0);
    // one set of head parameters received the gradient of both terms
    for (_, param) in head.named_params() {
        assert!(g.param(param).is_some());
    }
    assert_eq!(g.len(), head.named_params().len());
}

#[test]
fn pragmatic_loss_near_zero_for_confident_empty_head() {
    let mut r = rng(7);
    let mut head = OccupancyHead::new(2, &mut r);
    head.out.zero();
    head.out.bias.set(Tensor::full(vec![1], -40.0));
    let tape = Tape::new();
    let y = Tensor::zeros(vec![1, 1, 4, 4]);
    let x = tape.constant(Tensor::randn(vec![1, 2, 4, 4], 1.0, &mut r));
    assert!(scalar(pragmatic_align_loss(&tape, x, &y, &head, &LossWeights::default())) < 1e-20);
}

#[test]
fn multidim_reduces_to_distribution_when_other_weights_vanish() {
    let mut r = rng(8);
    let head = OccupancyHead::new(3, &mut r);
    let kp = KeypointGrid::for_size(8, 8);
    let y = Tensor::zeros(vec![1, 1, 8, 8]);
    let w = LossWeights { lambda_s: 0.0, lambda_p: 0.0, lambda_d: 0.7, ..LossWeights::default() };
    let tape = Tape::new();
    let a = tape.constant(Tensor::randn(vec![1, 3, 8, 8], 1.0, &mut r));
    let b = tape.constant(Tensor::randn(vec![1, 3, 8, 8], 1.0, &mut r));
    let (total, terms) = multidim_align_loss(&tape, a, b, &y, &head, &kp, &w);
    let dis = scalar(distribution_align_loss(a, b, w.alpha));
    assert_eq!(total.item(), 0.7 * dis);
    assert_eq!(terms.structural, 0.0);

    // identical inputs leave only the pragmatic residual
    let w = LossWeights::default();
    let (total, terms) = multidim_align_loss(&tape, a, a, &y, &head, &kp, &w);
    assert_eq!(terms.distribution, 0.0);
    assert_eq!(terms.structural, 0.0);
    assert!((total.item() - w.lambda_p * terms.pragmatic).abs() < 1e-15);
}

#[test]
fn stage1_reductions() {
    let tape = Tape::new();
    let cyc = tape.constant(Tensor::scalar(0.8));
    let uni = tape.constant(Tensor::scalar(0.3));
    let prag = tape.constant(Tensor::scalar(0.5));
    let w = LossWeights { lambda_a: 0.0, lambda_u: 0.0, lambda_c: 2.0, ..LossWeights::default() };
    assert_eq!(stage1_loss(Some(prag), &[(cyc, uni)], &w).item(), 1.6);
    let zero = LossWeights { lambda_a: 0.0, lambda_c: 0.0, lambda_u: 0.0, ..LossWeights::default() };
    assert_eq!(stage1_loss(Some(prag), &[(cyc, uni), (uni, cyc)], &zero).item(), 0.0);
    let w = LossWeights::default();
    let v = stage1_loss(Some(prag), &[(cyc, uni), (uni, cyc)], &w).item();
    assert!((v - (0.5 + 0.8 + 0.3 + 0.3 + 0.8)).abs() < 1e-12);
}

#[test]
fn detection_loss_matches_oracle() {
    let mut r = rng(9);
    let grid = crate::scenegen::GridSpec::with_cells(8.0, 4);
    let targets = DetectionTargets::build(&[vec![(1.3, -2.2), (-5.0, 6.1)], vec![(0.2, 0.2)]], grid);
    assert_eq!(targets.positives(), 3);
    let logits = Tensor::randn(vec![2, 3, 4, 4], 1.5, &mut r);
    let tape = Tape::new();
    let got = detection_loss(&tape, tape.constant(logits.clone()), &targets, 2.0, 0.25).item();
    assert!((got - oracle::detection(&logits, &targets, 2.0, 0.25)).abs() < 1e-6);

    let empty = DetectionTargets::build(&[vec![]], grid);
    let logits = Tensor::randn(vec![1, 3, 4, 4], 1.0, &mut r);
    let got = detection_loss(&tape, tape.constant(logits.clone()), &empty, 2.0, 0.25).item();
    let pure = focal_loss(tape.constant(logits).narrow(1, 0, 1), &empty.heatmap, 2.0, 0.25).item();
    assert_eq!(got, pure);
}

#[test]
fn detection_loss_vanishes_on_perfect_prediction() {
    let grid = crate::scenegen::GridSpec::with_cells(8.0, 8);
    let t = DetectionTargets::build(&[vec![(1.3, -2.2), (-5.0, 6.1)]], grid);
    let mut logits = Tensor::zeros(vec![1, 3, 8, 8]);
    for r in 0..8 {
        for c in 0..8 {
            logits.set4(0, 0, r, c, if t.heatmap.at4(0, 0, r, c) > 0.5 { 1e3 } else { -1e3 });
            logits.set4(0, 1, r, c, t.offsets.at4(0, 0, r, c));
            logits.set4(0, 2, r, c, t.offsets.at4(0, 1, r, c));
        }
    }
    let tape = Tape::new();
    assert_eq!(detection_loss(&tape, tape.constant(logits), &t, 2.0, 0.25).item(), 0.0);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut r = rng(10);
    let x0 = Tensor::randn(vec![1, 4, 8, 8], 1.0, &mut r);
    let other = Tensor::randn(vec![1, 4, 8, 8], 1.0, &mut r);
    let kp = KeypointGrid::for_size(8, 8);
    let head = OccupancyHead::new(4, &mut r);
    let y = Tensor::from_fn(vec![1, 1, 8, 8], |i| (i % 5 == 0) as u8 as f64);
    let w = LossWeights::default();

    let o = other.clone();
    assert!(grad_rel_error(&x0, |x| distribution_align_loss(x, x.tape().constant(o.clone()), 1.0)) < 1e-4);
    let o = other.clone();
    assert!(grad_rel_error(&x0, |x| cycle_loss(x.tape().constant(o.clone()), x, 1.0)) < 1e-4);
    let o = other.clone();
    assert!(grad_rel_error(&x0, |x| structural_align_loss(x, x.tape().constant(o.clone()), &kp)) < 1e-4);
    assert!(grad_rel_error(&x0, |x| pragmatic_align_loss(x.tape(), x, &y, &head, &w)) < 1e-4);

    let grid = crate::scenegen::GridSpec::with_cells(8.0, 8);
    let t = DetectionTargets::build(&[vec![(1.3, -2.2), (-5.0, 6.1)]], grid);
    let logits = Tensor::randn(vec![1, 3, 8, 8], 1.0, &mut r);
    assert!(grad_rel_error(&logits, |x| detection_loss(x.tape(), x, &t, 2.0, 0.25)) < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn relation_matrix_invariants(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let s = Tensor::randn(vec![5, 8, 8], 1.0, &mut r);
        let m = relation_matrix(&s, &KeypointGrid::for_size(8, 8));
        for i in 0..9 {
            prop_assert!((m.data[i][i] - 1.0).abs() < 1e-12);
            for j in 0..9 {
                prop_assert_eq!(m.data[i][j], m.data[j][i]);
                prop_assert!((-1.0..=1.0).contains(&m.data[i][j]));
            }
        }
    }

    #[test]
    fn losses_are_nonnegative(seed in 0u64..10_000, alpha in 0.0f64..3.0) {
        let mut r = rng(seed);
        let a = Tensor::randn(vec![2, 3, 4, 4], 1.0, &mut r);
        let b = Tensor::randn(vec![2, 3, 4, 4], 2.0, &mut r);
        let tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        prop_assert!(distribution_align_loss(va, vb, alpha).item() >= 0.0);
        prop_assert!(cycle_loss(va, vb, alpha).item() >= 0.0);
        prop_assert!(structural_align_loss(va, vb, &KeypointGrid::for_size(4, 4)).item() >= 0.0);
    }
}
