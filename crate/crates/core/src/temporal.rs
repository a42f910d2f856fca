//! Temporal BEV fusion: a FIFO buffer of per-frame BEV maps with their ego
//! poses, and a fusion op that warps the previous frame into the current
//! ego frame and mixes the pair back to the working width.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::geometry::{warp_bev, EgoPose};
use crate::grid::BevGrid;
use crate::tensor::{concat, ParamInit, Registry, Tensor};

/// Bounded history of (frame id, ego pose, BEV map) records, newest last.
#[derive(Clone, Debug)]
pub struct BevBuffer {
    capacity: usize,
    entries: VecDeque<(u64, EgoPose, BevGrid)>,
}

impl BevBuffer {
    pub fn new(capacity: usize) -> Result<BevBuffer> {
        if capacity == 0 {
            return Err(Error::Config("temporal buffer capacity must be ≥ 1".into()));
        }
        Ok(BevBuffer {
            capacity,
            entries: VecDeque::new(),
        })
    }

    /// Append a frame, evicting the oldest past capacity. Frame ids must
    /// strictly increase.
    pub fn push(&mut self, frame_id: u64, pose: EgoPose, bev: BevGrid) -> Result<()> {
        if let Some((last, _, _)) = self.entries.back() {
            if frame_id <= *last {
                return Err(Error::contract(
                    "bev_buffer",
                    format!("frame id {frame_id} does not increase past {last}"),
                ));
            }
        }
        self.entries.push_back((frame_id, pose, bev));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn latest(&self) -> Option<&(u64, EgoPose, BevGrid)> {
        self.entries.back()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Drop all history (sequence boundary).
    pub fn reset(&mut self) {
        self.entries.clear();
    }
}

/// Learnable state of the temporal mixer: one 1×1 conv from the
/// two-frame concat back to the working width.
#[derive(Clone, Debug)]
pub struct TemporalParams {
    pub mix: Tensor,
}

impl TemporalParams {
    pub fn create(reg: &mut Registry, prefix: &str, channels: usize) -> Result<TemporalParams> {
        Ok(TemporalParams {
            mix: reg.param(
                &format!("{prefix}.mix"),
                &[channels, 2 * channels, 1, 1],
                ParamInit::XavierUniform {
                    fan_in: 2 * channels,
                    fan_out: channels,
                },
            )?,
        })
    }
}

/// Fuse the newest buffered frame into the current one. The previous BEV
/// map is warped into the current ego frame, channel-concatenated with
/// the current map, and mixed back to C channels. An empty buffer
/// duplicates the current frame as its own history so the channel count
/// never changes.
pub fn fuse_temporal(
    buf: &BevBuffer,
    cur_pose: &EgoPose,
    cur_bev: &BevGrid,
    params: &TemporalParams,
) -> Result<BevGrid> {
    let history = match buf.latest() {
        None => cur_bev.clone(),
        Some((_, prev_pose, prev_bev)) => warp_bev(prev_bev, prev_pose, cur_pose)?,
    };
    let stacked = concat(&[&cur_bev.values, &history.values], 0)?;
    cur_bev.with_values(stacked.conv2d(&params.mix, 1, 0)?)
}
