//! Sliding-window keyframe graph: admission by induced-flow magnitude,
//! co-visibility edges between temporal neighbors, source-edge-set ordering,
//! and eviction that freezes poses into the output trajectory.

use crate::diff::DenseArray;
use crate::error::{Error, Result};
use crate::lie::{exp, induced_flow, log, Camera, FlowField, InverseDepthMap, Pose, Tangent};
use crate::temporal::init_motion_state;

pub struct Keyframe {
    /// Monotone id, unique over the whole run (never reused after eviction).
    pub index: usize,
    pub timestamp: f64,
    /// Matching features [D_f, H, W] at 1/8 input resolution.
    pub features: DenseArray,
    /// Context features [D_c, H, W].
    pub context: DenseArray,
    /// World-to-camera pose estimate.
    pub pose: Pose,
    pub inv_depth: InverseDepthMap,
    /// Motion state [D_m, H, W], present from admission onward.
    pub motion_state: DenseArray,
}

/// Directed co-visibility edge. Flow and confidence are the current estimates
/// for this edge; the graph initializes them to zero and the update loop
/// overwrites them.
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub flow: FlowField,
    /// Per-component (u, v) confidence weights, shape [2, H, W].
    pub confidence: DenseArray,
}

/// All edges leaving one source keyframe, ordered by target timestamp.
/// Holds indices into the graph's edge list.
pub struct SourceEdgeSet {
    pub source: usize,
    pub edge_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AdmissionPolicy {
    /// Mean induced-flow threshold in pixels at 1/8 resolution.
    pub tau_kf: f64,
    /// Intrinsics at 1/8 resolution.
    pub camera: Camera,
    /// Motion state channel count D_m.
    pub motion_channels: usize,
    pub seed: u64,
}

#[derive(Default)]
pub struct FrameGraph {
    keyframes: Vec<Keyframe>,
    edges: Vec<Edge>,
    next_index: usize,
    frozen: Vec<(f64, Pose)>,
}

impl FrameGraph {
    pub fn new() -> Self {
        FrameGraph::default()
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn keyframes_mut(&mut self) -> &mut [Keyframe] {
        &mut self.keyframes
    }

    /// Look a live keyframe up by its monotone id.
    pub fn keyframe(&self, index: usize) -> Option<&Keyframe> {
        self.keyframes.iter().find(|k| k.index == index)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edges_mut(&mut self) -> &mut [Edge] {
        &mut self.edges
    }

    /// Poses of evicted keyframes, frozen at eviction time.
    pub fn frozen(&self) -> &[(f64, Pose)] {
        &self.frozen
    }

    /// Constant-velocity pose extrapolation to `timestamp` from the two most
    /// recent keyframes. With fewer than two, or a degenerate relative
    /// rotation, the last pose is reused (zero velocity).
    pub fn extrapolate_pose(&self, timestamp: f64) -> Pose {
        let n = self.keyframes.len();
        if n == 0 {
            return Pose::identity();
        }
        let last = &self.keyframes[n - 1];
        if n == 1 {
            return last.pose;
        }
        let prev = &self.keyframes[n - 2];
        let dt_prev = last.timestamp - prev.timestamp;
        if dt_prev <= 0.0 {
            return last.pose;
        }
        let rel = last.pose.compose(&prev.pose.inverse());
        let Ok(xi) = log(&rel) else {
            return last.pose;
        };
        let scale = (timestamp - last.timestamp) / dt_prev;
        let step = Tangent {
            translation: xi.translation * scale,
            rotation: xi.rotation * scale,
        };
        exp(&step).compose(&last.pose)
    }

    /// Admit a frame iff the mean induced-flow magnitude from the most recent
    /// keyframe to the constant-velocity extrapolated candidate pose exceeds
    /// `policy.tau_kf`. The first two frames are always admitted: with fewer
    /// than two keyframes there is no velocity estimate, so the induced flow
    /// is identically zero and the policy would otherwise deadlock.
    pub fn admit_frame(
        &mut self,
        features: DenseArray,
        context: DenseArray,
        timestamp: f64,
        policy: &AdmissionPolicy,
    ) -> Result<Option<usize>> {
        let (h, w) = features.hw();
        if w != policy.camera.width || h != policy.camera.height {
            return Err(Error::ShapeMismatch(format!(
                "features {h}x{w} vs camera {}x{}",
                policy.camera.height, policy.camera.width
            )));
        }
        if let Some(last) = self.keyframes.last() {
            if timestamp <= last.timestamp {
                return Err(Error::MalformedIndex(format!(
                    "timestamp {timestamp} not after last keyframe {}",
                    last.timestamp
                )));
            }
        }
        let candidate_pose = self.extrapolate_pose(timestamp);
        if self.keyframes.len() >= 2 {
            let last = self.keyframes.last().unwrap();
            let (flow, mask) =
                induced_flow(&last.pose, &candidate_pose, &last.inv_depth, &policy.camera)?;
            // fully occluded view: nothing measurable, admit to recover
            if mask.count_true() > 0 && flow.mean_magnitude(&mask) <= policy.tau_kf {
                return Ok(None);
            }
        }
        let inv_depth = match self.keyframes.last() {
            Some(last) => InverseDepthMap::constant(w, h, last.inv_depth.mean())?,
            None => InverseDepthMap::constant(w, h, 1.0)?,
        };
        let index = self.next_index;
        self.next_index += 1;
        self.keyframes.push(Keyframe {
            index,
            timestamp,
            features,
            context,
            pose: candidate_pose,
            inv_depth,
            motion_state: init_motion_state(policy.motion_channels, h, w, policy.seed, index),
        });
        Ok(Some(index))
    }

    /// Rebuild the edge list: bidirectional edges between keyframes whose
    /// positions in the live window differ by at most `r`. Edges are ordered
    /// by (source timestamp, target timestamp); flow and confidence reset to
    /// zero.
    pub fn build_edges(&mut self, r: usize) -> &[Edge] {
        self.edges.clear();
        let n = self.keyframes.len();
        for a in 0..n {
            for b in 0..n {
                if a != b && a.abs_diff(b) <= r {
                    let (h, w) = self.keyframes[a].features.hw();
                    self.edges.push(Edge {
                        source: self.keyframes[a].index,
                        target: self.keyframes[b].index,
                        flow: FlowField::zeros(w, h),
                        confidence: DenseArray::zeros(&[2, h, w]),
                    });
                }
            }
        }
        // keyframes are stored ascending by timestamp and ids ascend with
        // time, so sorting by (source id, target id) orders by timestamps
        self.edges.sort_by_key(|e| (e.source, e.target));
        &self.edges
    }

    /// Partition of the edge list by source keyframe, ordered ascending by
    /// source timestamp; within a set, ascending by target timestamp.
    pub fn source_edge_sets(&self) -> Vec<SourceEdgeSet> {
        let mut sets: Vec<SourceEdgeSet> = Vec::new();
        let mut ids: Vec<usize> = (0..self.edges.len()).collect();
        ids.sort_by_key(|&i| (self.edges[i].source, self.edges[i].target));
        for i in ids {
            let source = self.edges[i].source;
            match sets.last_mut() {
                Some(set) if set.source == source => set.edge_ids.push(i),
                _ => sets.push(SourceEdgeSet { source, edge_ids: vec![i] }),
            }
        }
        sets
    }

    /// Remove oldest keyframes until at most `capacity` remain, freezing
    /// their poses into the output trajectory and dropping their edges.
    /// Returns the removed indices.
    pub fn evict_oldest(&mut self, capacity: usize) -> Vec<usize> {
        let mut removed = Vec::new();
        while self.keyframes.len() > capacity {
            let kf = self.keyframes.remove(0);
            self.edges.retain(|e| e.source != kf.index && e.target != kf.index);
            self.frozen.push((kf.timestamp, kf.pose));
            removed.push(kf.index);
        }
        removed
    }

    /// Frozen poses followed by the live window, ascending in time.
    pub fn full_trajectory(&self) -> Vec<(f64, Pose)> {
        let mut out = self.frozen.clone();
        out.extend(self.keyframes.iter().map(|k| (k.timestamp, k.pose)));
        out
    }
}
