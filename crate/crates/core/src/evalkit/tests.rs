use proptest::prelude::*;

use super::*;
use crate::agents::Peak;
use crate::error::Error;
use crate::scenegen::Pose;
use crate::tensor::Tensor;
use crate::training::{pretrain_agent, stage1_negotiate, AblationFlags, ExperimentConfig, Models, NullSink, StageSteps};

fn peak(x: f64, y: f64, score: f64) -> Peak {
    Peak { x, y, score }
}

#[test]
fn ap_conventions() {
    let gt = [(1.0, 1.0), (-3.0, 2.0)];
    assert_eq!(detection_ap(&[peak(1.0, 1.0, 0.9), peak(-3.0, 2.0, 0.8)], &gt, 1.0), 1.0);
    assert_eq!(detection_ap(&[], &gt, 1.0), 0.0);
    assert_eq!(detection_ap(&[], &[], 1.0), 1.0);
    assert_eq!(detection_ap(&[peak(0.0, 0.0, 0.5)], &[], 1.0), 0.0);
    // top two match, the third is a false positive: full recall at precision 1
    let peaks = [peak(1.1, 1.0, 0.9), peak(-3.0, 2.2, 0.8), peak(5.0, 5.0, 0.7)];
    assert_eq!(detection_ap(&peaks, &gt, 1.0), 1.0);
    // TP, FP, TP: recall 0.5 at precision 1, then recall 1 at precision 2/3
    let peaks = [peak(1.0, 1.0, 0.9), peak(5.0, 5.0, 0.8), peak(-3.0, 2.0, 0.7)];
    assert!((detection_ap(&peaks, &gt, 1.0) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    // a duplicate of a matched centre counts as a false positive
    let peaks = [peak(1.0, 1.0, 0.9), peak(1.2, 1.0, 0.8)];
    assert!((detection_ap(&peaks, &[(1.0, 1.0)], 1.0) - 1.0).abs() < 1e-12);
    assert!((detection_ap(&peaks, &gt, 1.0) - 0.5).abs() < 1e-12);
    // outside the radius
    assert_eq!(detection_ap(&[peak(2.5, 1.0, 0.9)], &[(1.0, 1.0)], 1.0), 0.0);
}

#[test]
fn ap_pools_frames() {
    let mut acc = ApAccumulator::new();
    acc.add(&[peak(0.0, 0.0, 0.9)], &[(0.0, 0.0)], 1.0);
    acc.add(&[peak(9.0, 9.0, 0.95)], &[(0.0, 0.0)], 1.0);
    assert_eq!(acc.num_gt(), 2);
    // FP at 0.95, TP at 0.9: recall 0.5 reached at precision 0.5
    assert!((acc.ap() - 0.25).abs() < 1e-12);
}

proptest! {
    #[test]
    fn ap_is_invariant_to_monotone_rescaling(
        pts in prop::collection::vec((-8.0f64..8.0, -8.0f64..8.0, 0.01f64..1.0), 0..12),
        gt in prop::collection::vec((-8.0f64..8.0, -8.0f64..8.0), 0..6),
    ) {
        let mut peaks: Vec<Peak> = pts.iter().map(|&(x, y, s)| peak(x, y, s)).collect();
        peaks.sort_by(|a, b| b.score.total_cmp(&a.score));
        let a = detection_ap(&peaks, &gt, 2.0);
        let rescaled: Vec<Peak> = peaks.iter().map(|p| peak(p.x, p.y, (3.0 * p.score).exp() + 1.0)).collect();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, detection_ap(&rescaled, &gt, 2.0));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(
        a in prop::collection::vec(-3.0f64..3.0, 2 * 2 * 3 * 3),
        b in prop::collection::vec(-3.0f64..3.0, 2 * 2 * 3 * 3),
    ) {
        let ta = Tensor::new(vec![2, 2, 3, 3], a);
        let tb = Tensor::new(vec![2, 2, 3, 3], b);
        prop_assert!(kl_domain_gap_tensors(&ta, &tb).unwrap() >= 0.0);
        prop_assert_eq!(kl_domain_gap_tensors(&ta, &ta).unwrap(), 0.0);
    }
}

#[test]
fn kl_matches_the_closed_form() {
    // channel 0: N(0, 1) vs N(1, 1); channel 1 identical
    let a = Tensor::new(vec![1, 2, 2, 2], vec![-1.0, 1.0, 1.0, -1.0, 0.0, 1.0, 0.0, 1.0]);
    let b = Tensor::new(vec![1, 2, 2, 2], vec![0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    assert!((kl_domain_gap_tensors(&a, &b).unwrap() - 0.25).abs() < 1e-12);
    assert!((gaussian_kl(0.0, 1.0, 1.0, 1.0) - 0.5).abs() < 1e-12);
    assert!((gaussian_kl(0.0, 1.0, 0.0, 2.0) - (2f64.ln() + 0.125 - 0.5)).abs() < 1e-12);
    // constant channels are clamped rather than dividing by zero
    let c = Tensor::full(vec![1, 1, 2, 2], 3.0);
    let d = Tensor::full(vec![1, 1, 2, 2], 3.0);
    assert_eq!(kl_domain_gap_tensors(&c, &d).unwrap(), 0.0);
    assert!(kl_domain_gap_tensors(&c, &Tensor::full(vec![1, 1, 2, 2], 4.0)).unwrap().is_finite());
    assert!(kl_domain_gap_tensors(&a, &c).is_err());
}

#[test]
fn kl_over_feature_maps() {
    let frame = Pose::new(0.0, 0.0, 0.0);
    let fa: Vec<FeatureMap> = (0..3).map(|k| FeatureMap::new(Tensor::full(vec![2, 2, 2], k as f64), frame).unwrap()).collect();
    assert_eq!(kl_domain_gap(&fa, &fa).unwrap(), 0.0);
    assert!(kl_domain_gap(&fa, &[]).is_err());
}

fn sample_report(cfg: &ExperimentConfig) -> MetricsReport {
    let mut r = MetricsReport::new(cfg);
    r.entries.push(ApEntry { setting: "m1".into(), method: Method::NoFusion, sigma: 0.0, ap_loose: 0.4, ap_strict: 0.2 });
    r.entries.push(ApEntry { setting: "m1+m2".into(), method: Method::Common, sigma: 0.0, ap_loose: 0.1 + 0.2, ap_strict: 1.0 / 3.0 });
    r.noise_sweeps.push(NoiseSweep {
        setting: "m1+m2".into(),
        method: Method::Common,
        sigmas: vec![0.0, 0.3, 0.6],
        ap_loose: vec![0.5, 0.45, 0.4],
        ap_strict: vec![0.3, 0.2, 0.1],
    });
    r.domain_gaps.push(DomainGap { agent: "m1".into(), kl_common: 0.1, kl_protocol: 2.0 });
    r.ablations = table4_grid()
        .into_iter()
        .map(|f| AblationRow { flags: f, label: f.label(), seeds: vec![1, 2], ap_loose: vec![0.5, 0.6], ap_strict: vec![0.2, 0.3] })
        .collect();
    r
}

#[test]
fn report_round_trips_and_flags_replicates() {
    let cfg = ExperimentConfig::desk();
    let a = sample_report(&cfg);
    let mut other_cfg = cfg.clone();
    other_cfg.seed = 99;
    let b = MetricsReport::new(&other_cfg);
    assert_ne!(a.run_id, b.run_id);
    assert_eq!(a.run_id.len(), 12);
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&[a.clone(), b.clone(), a.clone()], dir.path()).unwrap();
    assert!(files.iter().any(|f| f.extension().unwrap() == "svg"));
    let bundle = read_bundle(&dir.path().join("metrics.json")).unwrap();
    assert_eq!(bundle.reports, vec![a.clone(), b, a.clone()]);
    assert_eq!(bundle.replicates, vec![vec![0, 2]]);
    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains("replicate of run(s) 2"));
    assert_eq!(serde_json::from_str::<MetricsReport>(&a.to_json()).unwrap(), a);
    assert!((a.mean_gap_ratio().unwrap() - 0.05).abs() < 1e-12);
    assert!(emit_report(&[], dir.path()).is_err());
}

#[test]
fn single_report_emits_json_markdown_and_plots() {
    let cfg = ExperimentConfig::desk();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&[sample_report(&cfg)], dir.path()).unwrap();
    let names: Vec<String> = files.iter().map(|f| f.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert!(names.contains(&"metrics.json".to_string()) && names.contains(&"report.md".to_string()));
    assert_eq!(names.iter().filter(|n| n.ends_with(".svg")).count(), 3);
    for f in files.iter().filter(|f| f.extension().unwrap() == "svg") {
        let svg = std::fs::read_to_string(f).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    let table: Vec<&str> = md.lines().skip_while(|l| !l.starts_with("| Negotiator")).skip(2).take_while(|l| l.starts_with('|')).collect();
    assert_eq!(table.len(), 8);
}

#[test]
fn grid_covers_every_setting_once() {
    let grid = table4_grid();
    assert_eq!(grid.len(), 8);
    let labels: std::collections::BTreeSet<String> = grid.iter().map(AblationFlags::label).collect();
    assert_eq!(labels.len(), 8);
    assert!(grid.contains(&AblationFlags::default()));
}

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::smoke();
    cfg.steps = StageSteps { pretrain: 3, stage1: 3, stage2: 2, join_stage1: 2, join_stage2: 2 };
    cfg.optim.batch_size = 2;
    cfg.dataset.scenes = 8;
    cfg.eval.scenes = 6;
    cfg.eval.gap_scenes = 4;
    cfg
}

#[test]
fn collab_eval_contracts() {
    let cfg = tiny();
    let mut models = Models::new();
    for id in ["m1", "m2", "protocol"] {
        pretrain_agent(&cfg, &mut models, id, &mut NullSink).unwrap();
    }
    let solo = run_collab_eval(&cfg, &models, &["m1"], Method::NoFusion, 0.0).unwrap();
    assert!((0.0..=1.0).contains(&solo.ap_loose) && (0.0..=1.0).contains(&solo.ap_strict));
    assert!(run_collab_eval(&cfg, &models, &["m1", "m2"], Method::NoFusion, 0.0).is_err());
    match run_collab_eval(&cfg, &models, &["m1", "m2"], Method::Common, 0.0) {
        Err(Error::Invalid(msg)) => assert!(msg.contains("m1"), "{msg}"),
        other => panic!("expected a missing-checkpoint error, got {other:?}"),
    }
    match run_collab_eval(&cfg, &models, &["m1", "m3"], Method::Native, 0.0) {
        Err(Error::Invalid(msg)) => assert!(msg.contains("m3"), "{msg}"),
        other => panic!("expected a missing-checkpoint error, got {other:?}"),
    }
    let native = run_collab_eval(&cfg, &models, &["m1", "m1"], Method::Native, 0.3).unwrap();
    assert_eq!(native, run_collab_eval(&cfg, &models, &["m1", "m1"], Method::Native, 0.3).unwrap());

    stage1_negotiate(&cfg, &mut models, &mut NullSink).unwrap();
    let before = models.hashes();
    let report = evaluate(&cfg, &models).unwrap();
    assert_eq!(before, models.hashes());
    assert!(report.entry("m1+m2", Method::Common).is_some());
    assert!(report.entry("m1+m1", Method::Native).is_some());
    assert!(report.entry("protocol", Method::NoFusion).is_some());
    assert_eq!(report.domain_gaps.len(), 2);
    assert!(report.domain_gaps.iter().all(|g| g.kl_common >= 0.0 && g.kl_protocol >= 0.0));
    let sweep = report.sweep("m1+m2", Method::Common).unwrap();
    assert_eq!(sweep.sigmas, cfg.eval.noise_sigmas);
    assert_eq!(report.to_json(), evaluate(&cfg, &models).unwrap().to_json());
}
