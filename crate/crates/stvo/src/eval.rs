//! Trajectory evaluation: timestamp association, Umeyama similarity
//! alignment, and scale-aligned ATE.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::lie::Pose;

/// Ordered (timestamp, pose) list with strictly increasing timestamps.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new() -> Self {
        Trajectory { entries: Vec::new() }
    }

    pub fn push(&mut self, timestamp: f64, pose: Pose) -> Result<()> {
        if let Some((last, _)) = self.entries.last() {
            if timestamp <= *last {
                return Err(Error::MalformedIndex(format!(
                    "timestamps must strictly increase: {timestamp} after {last}"
                )));
            }
        }
        self.entries.push((timestamp, pose));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(t, _)| *t)
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        self.entries[i].1.translation
    }
}

/// Similarity transform `x -> s * R * x + t`.
#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// ATE summary over the aligned translational residuals.
#[derive(Debug, Clone)]
pub struct AteResult {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub alignment: Similarity,
    pub pairs: usize,
}

/// Greedy nearest-timestamp association, one-to-one, |dt| <= max_dt.
/// Pairs are claimed in ascending |dt| order.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<Vec<(usize, usize)>> {
    if est.is_empty() || gt.is_empty() {
        return Err(Error::NoAssociations);
    }
    let mut candidates = Vec::new();
    for (i, (te, _)) in est.entries.iter().enumerate() {
        for (j, (tg, _)) in gt.entries.iter().enumerate() {
            let dt = (te - tg).abs();
            if dt <= max_dt {
                candidates.push((dt, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_est = vec![false; est.len()];
    let mut used_gt = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_est[i] && !used_gt[j] {
            used_est[i] = true;
            used_gt[j] = true;
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoAssociations);
    }
    pairs.sort_unstable();
    Ok(pairs)
}

/// Closed-form least-squares similarity (Umeyama) mapping `est` onto `gt`,
/// minimizing sum ||gt_i - (s R est_i + t)||^2 with det(R) = +1.
pub fn umeyama_align(
    est: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Similarity> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} estimated vs {} ground-truth points",
            est.len(),
            gt.len()
        )));
    }
    let n = est.len();
    if n < 3 {
        return Err(Error::DegenerateConfiguration);
    }
    let inv_n = 1.0 / n as f64;
    let mu_e: Vector3<f64> = est.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_g: Vector3<f64> = gt.iter().sum::<Vector3<f64>>() * inv_n;

    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    for i in 0..n {
        let de = est[i] - mu_e;
        let dg = gt[i] - mu_g;
        cov += dg * de.transpose() * inv_n;
        var_e += de.norm_squared() * inv_n;
    }

    // Collinear (or coincident) inputs leave the problem rank-deficient.
    let scatter_svd = {
        let mut scatter = Matrix3::zeros();
        for p in est {
            let d = p - mu_e;
            scatter += d * d.transpose() * inv_n;
        }
        scatter.svd(false, false)
    };
    let sv = scatter_svd.singular_values;
    if sv[0] <= 0.0 || sv[1] / sv[0] < 1e-12 {
        return Err(Error::DegenerateConfiguration);
    }

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or(Error::DegenerateConfiguration)?;
    let vt = svd.v_t.ok_or(Error::DegenerateConfiguration)?;
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * vt.determinant()) < 0.0 {
        s_diag.z = -1.0; // singular values are sorted descending; flip the smallest
    }
    let rotation = u * Matrix3::from_diagonal(&s_diag) * vt;
    let scale = if with_scale {
        let trace_ds = svd.singular_values.dot(&s_diag);
        if var_e <= 0.0 {
            return Err(Error::DegenerateConfiguration);
        }
        trace_ds / var_e
    } else {
        1.0
    };
    let translation = mu_g - scale * (rotation * mu_e);
    Ok(Similarity { scale, rotation, translation })
}

/// Scale-aligned absolute trajectory error.
pub fn ate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<AteResult> {
    let pairs = associate(est, gt, max_dt)?;
    let est_pts: Vec<Vector3<f64>> = pairs.iter().map(|(i, _)| est.position(*i)).collect();
    let gt_pts: Vec<Vector3<f64>> = pairs.iter().map(|(_, j)| gt.position(*j)).collect();
    let alignment = umeyama_align(&est_pts, &gt_pts, true)?;
    let mut residuals: Vec<f64> = est_pts
        .iter()
        .zip(&gt_pts)
        .map(|(e, g)| (g - alignment.apply(*e)).norm())
        .collect();
    let n = residuals.len() as f64;
    let rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
    let mean = residuals.iter().sum::<f64>() / n;
    let max = residuals.iter().fold(0.0f64, |a, b| a.max(*b));
    residuals.sort_by(|a, b| a.total_cmp(b));
    let median = if residuals.len() % 2 == 1 {
        residuals[residuals.len() / 2]
    } else {
        0.5 * (residuals[residuals.len() / 2 - 1] + residuals[residuals.len() / 2])
    };
    Ok(AteResult { rmse, mean, median, max, alignment, pairs: pairs.len() })
}
