use super::collab::{run_collab_eval, CollabScore, Method};
use super::report::AblationRow;
use crate::error::Result;
use crate::training::{pretrain_agent, stage1_negotiate, AblationFlags, ExperimentConfig, Models, StageReport, StepSink};

/// The eight training settings of the loss ablation: with and without the
/// negotiator, crossed with every combination of the optional terms.
pub fn table4_grid() -> Vec<AblationFlags> {
    let mut grid = Vec::with_capacity(8);
    for negotiator in [false, true] {
        for (structural, pragmatic) in [(false, false), (true, false), (false, true), (true, true)] {
            grid.push(AblationFlags { negotiator, structural, pragmatic, local_prompt: true });
        }
    }
    grid
}

/// Stage-1 outcome of one (setting, seed) pair.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub flags: AblationFlags,
    pub seed: u64,
    pub stage1: StageReport,
    pub score: CollabScore,
}

fn alliance_agents(cfg: &ExperimentConfig) -> Vec<&str> {
    match cfg.alliance.as_slice() {
        [only] => vec![only.as_str(), only.as_str()],
        many => many.iter().map(String::as_str).collect(),
    }
}

/// Runs stage 1 on a copy of `pretrained` under `cfg` and scores alliance
/// collaboration through the common space.
pub fn ablation_cell(cfg: &ExperimentConfig, pretrained: &Models, sink: &mut dyn StepSink) -> Result<(AblationCell, Models)> {
    let mut models = pretrained.clone();
    let stage1 = stage1_negotiate(cfg, &mut models, sink)?;
    let score = run_collab_eval(cfg, &models, &alliance_agents(cfg), Method::Common, 0.0)?;
    Ok((AblationCell { flags: cfg.ablation, seed: cfg.seed, stage1, score }, models))
}

/// Every setting in `grid` for every seed. Step-0 models are trained once per
/// seed and shared by all settings of that seed.
pub fn run_ablation(base: &ExperimentConfig, grid: &[AblationFlags], seeds: &[u64], sink: &mut dyn StepSink) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = grid
        .iter()
        .map(|f| AblationRow { flags: *f, label: f.label(), seeds: Vec::new(), ap_loose: Vec::new(), ap_strict: Vec::new() })
        .collect();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let mut pretrained = Models::new();
        for id in &cfg.alliance {
            pretrain_agent(&cfg, &mut pretrained, id, sink)?;
        }
        for row in rows.iter_mut() {
            cfg.ablation = row.flags;
            let (cell, _) = ablation_cell(&cfg, &pretrained, sink)?;
            row.seeds.push(seed);
            row.ap_loose.push(cell.score.ap_loose);
            row.ap_strict.push(cell.score.ap_strict);
        }
    }
    Ok(rows)
}
