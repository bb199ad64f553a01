//! Differentiable bundle adjustment: confidence-weighted Gauss-Newton over
//! poses and per-pixel inverse depths, with the (diagonal) depth block
//! eliminated by a Schur complement before the reduced pose solve.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2x6, Matrix6, Vector2, Vector6};

use crate::diff::DenseArray;
use crate::error::{Error, Result};
use crate::lie::{
    exp, induced_flow, reprojection_jacobians, Camera, InverseDepthMap, Pose, Tangent,
};

/// Pixels whose confidence falls below this on either axis are dropped.
pub const MIN_CONFIDENCE: f64 = 1e-4;
/// Inverse depths are clamped into this range after every update.
pub const DEPTH_CLAMP: (f64, f64) = (1e-4, 1e4);
/// Initial Levenberg damping on the pose and depth Hessian diagonals.
pub const LAMBDA_POSE: f64 = 1e-4;
pub const LAMBDA_DEPTH: f64 = 1e-2;
/// Damping escalations (x10) attempted before a step is abandoned.
const MAX_ESCALATIONS: usize = 3;

/// One term of the objective: the source frame's pixels, pushed through the
/// relative pose at the source inverse depths, must land on the target
/// correspondences, weighted per pixel and axis.
pub struct BAEdge {
    pub source: usize,
    pub target: usize,
    /// Target correspondence field [2, H, W] in target pixel coordinates.
    pub correspondence: DenseArray,
    /// Diagonal confidence weights [2, H, W], entries >= 0.
    pub weight: DenseArray,
}

pub struct BAProblem {
    pub poses: Vec<Pose>,
    pub inv_depths: Vec<InverseDepthMap>,
    pub edges: Vec<BAEdge>,
    pub camera: Camera,
    /// Gauge: at least one pose must be held fixed.
    pub fixed: Vec<bool>,
}

impl BAProblem {
    fn validate(&self) -> Result<()> {
        if self.poses.len() != self.inv_depths.len() || self.poses.len() != self.fixed.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} poses, {} depth maps, {} gauge flags",
                self.poses.len(),
                self.inv_depths.len(),
                self.fixed.len()
            )));
        }
        if !self.fixed.iter().any(|f| *f) {
            return Err(Error::DegenerateConfiguration);
        }
        let n = self.camera.pixel_count();
        for e in &self.edges {
            if e.source >= self.poses.len() || e.target >= self.poses.len() {
                return Err(Error::ShapeMismatch(format!(
                    "edge {}->{} out of range",
                    e.source, e.target
                )));
            }
            if e.correspondence.len() != 2 * n || e.weight.len() != 2 * n {
                return Err(Error::ShapeMismatch("edge raster size".into()));
            }
        }
        Ok(())
    }
}

/// Per-solve diagnostics: weighted cost before the first and after every
/// accepted step, plus update norms.
#[derive(Debug, Default)]
pub struct BAReport {
    pub costs: Vec<f64>,
    pub pose_update_norms: Vec<f64>,
    pub depth_update_norms: Vec<f64>,
    pub converged: bool,
}

/// Stacked residual vector (x then y per retained pixel, edge order) and the
/// total confidence-weighted cost.
pub fn residuals(problem: &BAProblem) -> Result<(Vec<f64>, f64)> {
    problem.validate()?;
    let (w, hw) = (problem.camera.width, problem.camera.pixel_count());
    let mut stacked = Vec::new();
    let mut cost = 0.0;
    for edge in &problem.edges {
        let (flow, mask) = induced_flow(
            &problem.poses[edge.source],
            &problem.poses[edge.target],
            &problem.inv_depths[edge.source],
            &problem.camera,
        )?;
        for p in 0..hw {
            let (wx, wy) = (edge.weight.data()[p], edge.weight.data()[hw + p]);
            if !mask.data[p] || wx.min(wy) < MIN_CONFIDENCE {
                continue;
            }
            let rx = (p % w) as f64 + flow.u[p] - edge.correspondence.data()[p];
            let ry = (p / w) as f64 + flow.v[p] - edge.correspondence.data()[hw + p];
            stacked.push(rx);
            stacked.push(ry);
            cost += wx * rx * rx + wy * ry * ry;
        }
    }
    Ok((stacked, cost))
}

/// Normal-equation contributions of one inverse-depth unknown: its scalar
/// Hessian entry, gradient entry, and couplings to the free pose blocks.
struct DepthAcc {
    h: f64,
    b: f64,
    coupling: Vec<(usize, Vector6<f64>)>,
}

fn couple(coupling: &mut Vec<(usize, Vector6<f64>)>, slot: usize, v: Vector6<f64>) {
    if let Some((_, existing)) = coupling.iter_mut().find(|(s, _)| *s == slot) {
        *existing += v;
    } else {
        coupling.push((slot, v));
    }
}

fn row_weighted(jac: &Matrix2x6<f64>, wx: f64, wy: f64) -> Matrix2x6<f64> {
    let mut out = *jac;
    out.row_mut(0).scale_mut(wx);
    out.row_mut(1).scale_mut(wy);
    out
}

fn segment6(v: &DVector<f64>, slot: usize) -> Vector6<f64> {
    Vector6::from_iterator(v.rows(6 * slot, 6).iter().copied())
}

fn depths_entry(
    depths: &mut BTreeMap<(usize, usize), DepthAcc>,
    frame: usize,
    pixel: usize,
) -> &mut DepthAcc {
    depths
        .entry((frame, pixel))
        .or_insert_with(|| DepthAcc { h: 0.0, b: 0.0, coupling: Vec::new() })
}

/// One damped Gauss-Newton step. Returns updated poses and depth maps plus
/// the pose/depth update norms; the caller decides acceptance.
pub fn gauss_newton_step(
    problem: &BAProblem,
    lambda_pose: f64,
    lambda_depth: f64,
) -> Result<(Vec<Pose>, Vec<InverseDepthMap>, f64, f64)> {
    problem.validate()?;
    let (w, hw) = (problem.camera.width, problem.camera.pixel_count());
    let slots: BTreeMap<usize, usize> = problem
        .fixed
        .iter()
        .enumerate()
        .filter(|(_, f)| !**f)
        .enumerate()
        .map(|(slot, (frame, _))| (frame, slot))
        .collect();
    let n_free = slots.len();
    let mut h_pp = DMatrix::<f64>::zeros(6 * n_free, 6 * n_free);
    let mut b_p = DVector::<f64>::zeros(6 * n_free);
    // depth unknowns are keyed by (source frame, pixel); a BTreeMap keeps
    // assembly order deterministic
    let mut depths: BTreeMap<(usize, usize), DepthAcc> = BTreeMap::new();

    for edge in &problem.edges {
        let g_i = &problem.poses[edge.source];
        let g_j = &problem.poses[edge.target];
        let d_i = &problem.inv_depths[edge.source];
        let (flow, mask) = induced_flow(g_i, g_j, d_i, &problem.camera)?;
        let slot_i = slots.get(&edge.source).copied();
        let slot_j = slots.get(&edge.target).copied();
        for p in 0..hw {
            let (wx, wy) = (edge.weight.data()[p], edge.weight.data()[hw + p]);
            if !mask.data[p] || wx.min(wy) < MIN_CONFIDENCE {
                continue;
            }
            let (px, py) = (p % w, p / w);
            let Ok((jac_i, jac_j, jac_d)) =
                reprojection_jacobians(g_i, g_j, d_i, &problem.camera, px, py)
            else {
                continue;
            };
            let r = Vector2::new(
                px as f64 + flow.u[p] - edge.correspondence.data()[p],
                py as f64 + flow.v[p] - edge.correspondence.data()[hw + p],
            );
            let wr = Vector2::new(wx * r.x, wy * r.y);
            let wjac_i = row_weighted(&jac_i, wx, wy);
            let wjac_j = row_weighted(&jac_j, wx, wy);
            let wjac_d = Vector2::new(wx * jac_d.x, wy * jac_d.y);

            if let Some(si) = slot_i {
                let block: Matrix6<f64> = jac_i.transpose() * wjac_i;
                let mut view = h_pp.view_mut((6 * si, 6 * si), (6, 6));
                view += block;
                let mut seg = b_p.rows_mut(6 * si, 6);
                seg += jac_i.transpose() * wr;
                couple(
                    &mut depths_entry(&mut depths, edge.source, p).coupling,
                    si,
                    jac_i.transpose() * wjac_d,
                );
            }
            if let Some(sj) = slot_j {
                let block: Matrix6<f64> = jac_j.transpose() * wjac_j;
                let mut view = h_pp.view_mut((6 * sj, 6 * sj), (6, 6));
                view += block;
                let mut seg = b_p.rows_mut(6 * sj, 6);
                seg += jac_j.transpose() * wr;
                couple(
                    &mut depths_entry(&mut depths, edge.source, p).coupling,
                    sj,
                    jac_j.transpose() * wjac_d,
                );
            }
            if let (Some(si), Some(sj)) = (slot_i, slot_j) {
                let cross: Matrix6<f64> = jac_i.transpose() * wjac_j;
                let mut view = h_pp.view_mut((6 * si, 6 * sj), (6, 6));
                view += cross;
                let mut view = h_pp.view_mut((6 * sj, 6 * si), (6, 6));
                view += cross.transpose();
            }

            let acc = depths_entry(&mut depths, edge.source, p);
            acc.h += jac_d.x * wjac_d.x + jac_d.y * wjac_d.y;
            acc.b += jac_d.x * wr.x + jac_d.y * wr.y;
        }
    }

    // a system with no retained residuals at all has nothing to solve
    if depths.is_empty() {
        return Err(Error::SingularSystem);
    }
    // a free pose none of whose pixels survived the mask/confidence cuts is
    // unconstrained this step: give it an identity block so it stays put
    // instead of sinking the whole solve
    for slot in slots.values() {
        let trace: f64 = (0..6).map(|i| h_pp[(6 * slot + i, 6 * slot + i)]).sum();
        if trace == 0.0 {
            for i in 0..6 {
                h_pp[(6 * slot + i, 6 * slot + i)] = 1.0;
            }
        }
    }
    // Levenberg damping scales the diagonals
    for i in 0..6 * n_free {
        h_pp[(i, i)] *= 1.0 + lambda_pose;
    }
    for acc in depths.values_mut() {
        acc.h *= 1.0 + lambda_depth;
    }

    // Schur complement: fold the (diagonal) depth block into the pose system
    let mut h_red = h_pp;
    let mut b_red = b_p;
    for acc in depths.values() {
        if acc.h <= 0.0 {
            continue;
        }
        let inv = 1.0 / acc.h;
        for (sa, ca) in &acc.coupling {
            let mut seg = b_red.rows_mut(6 * sa, 6);
            seg -= ca * (inv * acc.b);
            for (sb, cb) in &acc.coupling {
                let outer: Matrix6<f64> = ca * cb.transpose() * inv;
                let mut view = h_red.view_mut((6 * sa, 6 * sb), (6, 6));
                view -= outer;
            }
        }
    }

    let delta_p = if n_free == 0 {
        DVector::zeros(0)
    } else {
        let chol = nalgebra::Cholesky::new(h_red).ok_or(Error::SingularSystem)?;
        chol.solve(&(-b_red))
    };

    let mut new_poses = problem.poses.clone();
    for (frame, slot) in &slots {
        let xi = Tangent::from_vector(segment6(&delta_p, *slot));
        new_poses[*frame] = exp(&xi).compose(&problem.poses[*frame]);
    }

    // back-substitute the eliminated depth updates
    let mut new_depths = problem.inv_depths.clone();
    let mut depth_norm_sq = 0.0;
    for ((frame, p), acc) in &depths {
        if acc.h <= 0.0 {
            continue;
        }
        let mut coupled = acc.b;
        for (slot, c) in &acc.coupling {
            coupled += c.dot(&segment6(&delta_p, *slot));
        }
        let delta_d = -coupled / acc.h;
        depth_norm_sq += delta_d * delta_d;
        let current = problem.inv_depths[*frame].values()[*p];
        new_depths[*frame].set(*p, (current + delta_d).clamp(DEPTH_CLAMP.0, DEPTH_CLAMP.1));
    }

    Ok((new_poses, new_depths, delta_p.norm(), depth_norm_sq.sqrt()))
}

/// Run up to `inner_iters` damped Gauss-Newton steps with acceptance control:
/// a step that raises the weighted cost, or that hits a singular reduced
/// system, escalates the damping x10 (three escalations) before the solver
/// gives up on that iteration.
pub fn run_dba(problem: &mut BAProblem, inner_iters: usize) -> Result<BAReport> {
    let mut report = BAReport::default();
    let (_, mut cost) = residuals(problem)?;
    report.costs.push(cost);
    for _ in 0..inner_iters {
        let mut lambda_pose = LAMBDA_POSE;
        let mut lambda_depth = LAMBDA_DEPTH;
        let mut accepted = false;
        let mut singular = false;
        for _attempt in 0..=MAX_ESCALATIONS {
            match gauss_newton_step(problem, lambda_pose, lambda_depth) {
                Err(Error::SingularSystem) => singular = true,
                Err(e) => return Err(e),
                Ok((poses, inv_depths, pose_norm, depth_norm)) => {
                    singular = false;
                    let candidate = BAProblem {
                        poses,
                        inv_depths,
                        edges: std::mem::take(&mut problem.edges),
                        camera: problem.camera,
                        fixed: std::mem::take(&mut problem.fixed),
                    };
                    let outcome = residuals(&candidate);
                    let BAProblem { poses, inv_depths, edges, fixed, .. } = candidate;
                    problem.edges = edges;
                    problem.fixed = fixed;
                    let (_, new_cost) = outcome?;
                    if new_cost <= cost {
                        problem.poses = poses;
                        problem.inv_depths = inv_depths;
                        cost = new_cost;
                        report.costs.push(cost);
                        report.pose_update_norms.push(pose_norm);
                        report.depth_update_norms.push(depth_norm);
                        report.converged = pose_norm + depth_norm < 1e-8;
                        accepted = true;
                        break;
                    }
                }
            }
            lambda_pose *= 10.0;
            lambda_depth *= 10.0;
        }
        if !accepted {
            if singular {
                return Err(Error::SingularSystem);
            }
            // damping exhausted without a cost reduction: keep current state
            break;
        }
        if report.converged {
            break;
        }
    }
    Ok(report)
}
