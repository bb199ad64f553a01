//! Spatial activation: the depth-derived Spatial Attention Matrix and the
//! residual attention activation of context and motion features.

use std::path::Path;

use crate::diff::{softmax_rows_forward, DenseArray};
use crate::error::{Error, Result};
use crate::io;
use crate::lie::InverseDepthMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthProvenance {
    ExternalFile,
    BaDepth,
}

/// Positive depth map at feature resolution, tagged with where it came from.
#[derive(Debug, Clone)]
pub struct DepthRaster {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
    pub provenance: DepthProvenance,
}

impl DepthRaster {
    pub fn new(
        width: usize,
        height: usize,
        data: Vec<f64>,
        provenance: DepthProvenance,
    ) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} depths for {width}x{height}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|d| !d.is_finite() || **d <= 0.0) {
            return Err(Error::InvalidDepth(format!("entry {bad} not positive finite")));
        }
        Ok(DepthRaster { width, height, data, provenance })
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Projection vectors and activation scalars. The alphas start at zero so the
/// activation is an exact identity until trained.
#[derive(Debug, Clone)]
pub struct ActivationWeights {
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub alpha_c: f64,
    pub alpha_f: f64,
}

/// How depths are mapped before the projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthNormalization {
    /// Reciprocal, then standardized to zero mean / unit variance over the
    /// frame. Invariant to global depth scale, which monocular BA depth
    /// does not fix.
    Standardized,
    /// Depths used as-is.
    Raw,
}

/// Build the Spatial Attention Matrix [HW, HW]: q = v W_q, k = v W_k with v
/// the (normalized) flattened depth, logits = q k^T, rows softmaxed.
///
/// Since v is HW x 1, the logit matrix is rank one:
/// logits[i][j] = (W_q . W_k) v_i v_j, which is what gets computed.
pub fn build_sam(
    depth: &DepthRaster,
    weights: &ActivationWeights,
    normalization: DepthNormalization,
    budget_bytes: usize,
) -> Result<DenseArray> {
    let n = depth.width * depth.height;
    let required = n * n * std::mem::size_of::<f64>();
    if required > budget_bytes {
        return Err(Error::MemoryBudget { required, budget: budget_bytes });
    }
    let v: Vec<f64> = match normalization {
        DepthNormalization::Raw => depth.data.clone(),
        DepthNormalization::Standardized => {
            let recip: Vec<f64> = depth.data.iter().map(|d| 1.0 / d).collect();
            let mean = recip.iter().sum::<f64>() / n as f64;
            let var = recip.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            if std < 1e-12 {
                // constant depth carries no spatial signal: zero logits
                vec![0.0; n]
            } else {
                recip.iter().map(|r| (r - mean) / std).collect()
            }
        }
    };
    let s: f64 = weights.w_q.iter().zip(&weights.w_k).map(|(q, k)| q * k).sum();
    let mut logits = DenseArray::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            logits.data_mut()[i * n + j] = s * v[i] * v[j];
        }
    }
    Ok(softmax_rows_forward(&logits))
}

/// Residual attention: per channel, out = x + alpha * (SAM . x) over the
/// flattened spatial dims. alpha = 0 returns the input bitwise.
pub fn activate(feature: &DenseArray, sam: &DenseArray, alpha: f64) -> Result<DenseArray> {
    if feature.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!("activate feature {:?}", feature.shape())));
    }
    let (h, w) = feature.hw();
    let n = h * w;
    if sam.shape() != [n, n] {
        return Err(Error::ShapeMismatch(format!(
            "SAM {:?} vs {n}x{n} for {h}x{w} feature",
            sam.shape()
        )));
    }
    if alpha == 0.0 {
        return Ok(feature.clone());
    }
    let mut out = feature.clone();
    for c in 0..feature.channels() {
        let x = &feature.data()[c * n..(c + 1) * n];
        for i in 0..n {
            let row = &sam.data()[i * n..(i + 1) * n];
            let dot: f64 = row.iter().zip(x).map(|(s, v)| s * v).sum();
            out.data_mut()[c * n + i] += alpha * dot;
        }
    }
    Ok(out)
}

/// Which depth feeds the SAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthSource {
    /// Reciprocal of the bundle-adjusted inverse depth.
    Ba,
    /// Per-frame DPR1 file (stand-in for an external depth network).
    External,
}

/// Resolve the depth raster for one keyframe according to the configured
/// source.
pub fn select_depth_source(
    source: DepthSource,
    inv_depth: &InverseDepthMap,
    external_path: Option<&Path>,
) -> Result<DepthRaster> {
    match source {
        DepthSource::Ba => {
            if let Some(bad) = inv_depth.values().iter().find(|d| !d.is_finite() || **d <= 0.0) {
                return Err(Error::DegenerateBaDepth(format!("inverse depth {bad}")));
            }
            DepthRaster::new(
                inv_depth.width,
                inv_depth.height,
                inv_depth.values().iter().map(|d| 1.0 / d).collect(),
                DepthProvenance::BaDepth,
            )
        }
        DepthSource::External => {
            let path = external_path
                .ok_or_else(|| Error::MissingDepthFile("<unset>".into()))?;
            let (w, h, data) = io::read_dpr1(path)?;
            DepthRaster::new(w, h, data, DepthProvenance::ExternalFile)
        }
    }
}
