use std::rc::Rc;

use super::Bridge;
use crate::agents::PerceptionModel;
use crate::scenegen::{warp_map, GridSpec, Pose};
use crate::tensor::{Tape, Tensor, Var};

/// What collaborators transmit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Message {
    /// Raw native features; only meaningful between identical agent types.
    Native,
    /// Sender output in the common space, decoded by the ego's receiver.
    Common,
}

/// A participant's frozen perception stack and, for common-space sharing,
/// its sender/receiver pair.
#[derive(Clone, Copy)]
pub struct Participant<'a> {
    pub model: &'a PerceptionModel,
    pub bridge: Option<&'a Bridge>,
}

impl<'a> Participant<'a> {
    pub fn new(model: &'a PerceptionModel, bridge: Option<&'a Bridge>) -> Self {
        Self { model, bridge }
    }

    fn bridge(&self) -> &'a Bridge {
        self.bridge.unwrap_or_else(|| panic!("{} has no sender/receiver", self.model.spec.agent_id()))
    }
}

/// One collaborator: its observations `[n, 1, s, s]` and the poses the ego
/// believes it was at (possibly noisy).
pub struct Collaborator<'a, 't> {
    pub who: Participant<'a>,
    pub obs: Var<'t>,
    pub poses: Vec<Pose>,
}

/// Per-sample nearest-neighbour maps taking `source` grid features into the
/// `target` frame.
pub fn batch_warps(targets: &[Pose], target_grid: GridSpec, sources: &[Pose], source_grid: GridSpec) -> Rc<Vec<Vec<Option<u32>>>> {
    assert_eq!(targets.len(), sources.len(), "one pose pair per sample");
    Rc::new(targets.iter().zip(sources).map(|(t, s)| warp_map(t, target_grid, s, source_grid)).collect())
}

/// `[n, 1, s, s]` indicator of target cells covered by the source footprint.
pub fn coverage_mask(warps: &[Vec<Option<u32>>], cells: usize) -> Tensor {
    let data = warps.iter().flat_map(|w| w.iter().map(|m| if m.is_some() { 1.0 } else { 0.0 })).collect();
    Tensor::new(vec![warps.len(), 1, cells, cells], data)
}

/// Fills cells of a warped `[n, c, s, s]` message that lie outside the
/// sender's footprint with the per-channel mean of the covered cells. The
/// receiver is trained on full-grid messages, so a hard zero border would be
/// out of distribution.
pub fn fill_uncovered<'t>(tape: &'t Tape, warped: Var<'t>, cover: &Tensor) -> Var<'t> {
    let (n, _, h, w) = cover.dims4();
    let counts: Vec<f64> = cover.data().chunks(h * w).map(|c| c.iter().sum::<f64>().max(1.0)).collect();
    let mean = warped.sum_axis(3).sum_axis(2).div(tape.constant(Tensor::new(vec![n, 1, 1, 1], counts)));
    warped.add(mean.mul(tape.constant(cover.map(|v| 1.0 - v))))
}

/// Full collaborative inference for a batch of egos: encode, share, warp
/// into the ego frame, decode, fuse and run the head. Returns the ego's
/// detection logits.
pub fn collaborative_logits<'t>(
    tape: &'t Tape,
    ego: Participant<'_>,
    ego_obs: Var<'t>,
    ego_poses: &[Pose],
    others: &[Collaborator<'_, 't>],
    message: Message,
    standard_grid: GridSpec,
) -> Var<'t> {
    let model = ego.model;
    let f_ego = model.encoder.forward(tape, ego_obs);
    let native = model.spec.native_grid();
    let s = native.cells();
    let mut received = Vec::with_capacity(others.len());
    let prompt = (message == Message::Common && !others.is_empty()).then(|| ego.bridge().sender.forward(tape, f_ego).0);
    for other in others {
        let f_other = other.who.model.encoder.forward(tape, other.obs);
        match message {
            Message::Native => {
                assert_eq!(
                    other.who.model.spec.native_shape(),
                    model.spec.native_shape(),
                    "native sharing needs matching feature shapes"
                );
                let warps = batch_warps(ego_poses, native, &other.poses, other.who.model.spec.native_grid());
                received.push(f_other.spatial_gather(warps, s, s));
            }
            Message::Common => {
                let (_, p_other) = other.who.bridge().sender.forward(tape, f_other);
                let n = standard_grid.cells();
                let warps = batch_warps(ego_poses, standard_grid, &other.poses, standard_grid);
                let p_cover = coverage_mask(&warps, n);
                let p_warped = fill_uncovered(tape, p_other.spatial_gather(warps, n, n), &p_cover);
                let decoded = ego.bridge().receiver.forward(tape, prompt.expect("prompt computed"), p_warped);
                let cover = coverage_mask(&batch_warps(ego_poses, native, &other.poses, native), s);
                received.push(decoded.mul(tape.constant(cover)));
            }
        }
    }
    let fused = model.fusion.forward(tape, f_ego, &received);
    model.head.forward(tape, fused)
}
