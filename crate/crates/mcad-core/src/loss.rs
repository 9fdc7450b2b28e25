//! Training objective and anomaly scoring.
//!
//! The objective is `L_total = L_MSE + lambda_a * L_CE + lambda_b * L_Prior`
//! with defaults `lambda_a = 1`, `lambda_b = 0.1`. The cross-entropy keeps
//! its 1/N category factor, the reconstruction error is normalized by the
//! position count H*W only, and the prior is the per-position Gaussian
//! negative log-likelihood summed over the feature map. Batch reduction is
//! the mean over samples throughout.

use crate::tensor::{Graph, NodeId, Real, Tensor, TensorError, TensorResult};

/// Weights of the auxiliary loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// `lambda_a`, the cross-entropy weight.
    pub ce: f64,
    /// `lambda_b`, the prior weight.
    pub prior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 1.0, prior: 0.1 }
    }
}

/// Cross-entropy with an explicit 1/N factor:
/// `-(1/N) * log softmax(logits)[label]`, averaged over the batch.
/// `logits` is `[B, N]` (or `[N]` for a single sample).
pub fn ce_loss<T: Real>(
    g: &mut Graph<T>,
    logits: NodeId,
    labels: &[usize],
    n_categories: usize,
) -> TensorResult<NodeId> {
    let sh = g.value(logits).shape().to_vec();
    let (b, n) = match sh.len() {
        1 => (1usize, sh[0]),
        2 => (sh[0], sh[1]),
        _ => {
            return Err(TensorError::InvalidShape {
                op: "ce_loss",
                shape: sh,
                reason: "expected [B, N] logits".into(),
            })
        }
    };
    if n != n_categories || labels.len() != b {
        return Err(TensorError::InvalidShape {
            op: "ce_loss",
            shape: sh,
            reason: format!("{n_categories} categories, {} labels", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_categories) {
        return Err(TensorError::InvalidShape {
            op: "ce_loss",
            shape: sh,
            reason: format!("label {bad} out of range 0..{n_categories}"),
        });
    }
    let logits2 = if sh.len() == 1 {
        g.reshape(logits, &[1, n])?
    } else {
        logits
    };
    let probs = g.softmax(logits2)?;
    let lp = g.log(probs)?;
    let mut onehot = vec![T::zero(); b * n];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * n + l] = T::one();
    }
    let mask = g.constant(Tensor::from_vec_unchecked(vec![b, n], onehot));
    let picked = g.mul(lp, mask)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / (n_categories as f64 * b as f64))
}

/// Gaussian negative log-likelihood of the feature map under the predicted
/// per-position parameters, summed over positions and channels, mean over
/// the batch:
/// `sum 0.5*ln(2*pi*sigma^2) + (phi - mu)^2 / (2*sigma^2)`.
///
/// Gradient flows into `f` (the adapter side) and into `mu`/`sigma` (the
/// query and decoder side). `sigma` must be positive everywhere.
pub fn prior_loss<T: Real>(
    g: &mut Graph<T>,
    f: NodeId,
    mu: NodeId,
    sigma: NodeId,
) -> TensorResult<NodeId> {
    let fs = g.value(f).shape().to_vec();
    if fs != g.value(mu).shape() || fs != g.value(sigma).shape() {
        return Err(TensorError::ShapeMismatch {
            op: "prior_loss",
            lhs: fs,
            rhs: g.value(mu).shape().to_vec(),
        });
    }
    if g.value(sigma).data().iter().any(|v| *v <= T::zero()) {
        return Err(TensorError::InvalidShape {
            op: "prior_loss",
            shape: fs,
            reason: "sigma must be strictly positive".into(),
        });
    }
    let batch = if fs.len() >= 2 { fs[0] } else { 1 };
    let log_sigma = g.log(sigma)?;
    // 1/sigma^2 as exp(-2 log sigma); keeps everything within the primitive set.
    let m2 = g.scale(log_sigma, -2.0)?;
    let inv_var = g.exp(m2)?;
    let diff = g.sub(f, mu)?;
    let sq = g.square(diff)?;
    let quad = g.mul(sq, inv_var)?;
    let quad = g.scale(quad, 0.5)?;
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let log_term = g.add_scalar(log_sigma, half_log_2pi)?;
    let per_elem = g.add(log_term, quad)?;
    let total = g.sum(per_elem)?;
    g.scale(total, 1.0 / batch as f64)
}

/// Reconstruction error `|reference - recon|^2 / (H*W)`, mean over the
/// batch. `positions` is the H*W normalizer (channel count deliberately
/// excluded).
pub fn mse_loss<T: Real>(
    g: &mut Graph<T>,
    reference: NodeId,
    recon: NodeId,
    positions: usize,
) -> TensorResult<NodeId> {
    let rs = g.value(reference).shape().to_vec();
    if rs != g.value(recon).shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse_loss",
            lhs: rs,
            rhs: g.value(recon).shape().to_vec(),
        });
    }
    let batch = if rs.len() >= 2 { rs[0] } else { 1 };
    let diff = g.sub(reference, recon)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / (positions as f64 * batch as f64))
}

/// `mse + lambda_a * ce + lambda_b * prior`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    mse: NodeId,
    ce: NodeId,
    prior: NodeId,
    w: LossWeights,
) -> TensorResult<NodeId> {
    let ce_w = g.scale(ce, w.ce)?;
    let prior_w = g.scale(prior, w.prior)?;
    let s = g.add(mse, ce_w)?;
    g.add(s, prior_w)
}

// ---------------------------------------------------------------------------
// Anomaly maps
// ---------------------------------------------------------------------------

/// Per-pixel anomaly scores, bilinearly upsampled from the feature grid.
#[derive(Debug, Clone)]
pub struct AnomalyMap {
    /// Interpolated scores, `height x width` row-major.
    pub scores: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Patch-level scores before interpolation, `src_h x src_w` row-major.
    pub source: Vec<f64>,
    pub src_h: usize,
    pub src_w: usize,
}

/// Per-position squared channel distance between the reference feature map
/// and its reconstruction (`[C, H, W]` each), bilinearly interpolated to
/// `out_h x out_w` with endpoints aligned to the source grid corners.
pub fn anomaly_map<T: Real>(
    reference: &Tensor<T>,
    recon: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> TensorResult<AnomalyMap> {
    let sh = reference.shape();
    if sh != recon.shape() || sh.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "anomaly_map",
            lhs: sh.to_vec(),
            rhs: recon.shape().to_vec(),
        });
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    assert!(out_h >= h && out_w >= w, "output must not downsample");
    let mut source = vec![0.0f64; h * w];
    for ci in 0..c {
        for p in 0..h * w {
            let d = reference.data()[ci * h * w + p].to_f64() - recon.data()[ci * h * w + p].to_f64();
            source[p] += d * d;
        }
    }
    let scores = bilinear_resize(&source, h, w, out_h, out_w);
    Ok(AnomalyMap {
        scores,
        height: out_h,
        width: out_w,
        source,
        src_h: h,
        src_w: w,
    })
}

/// Endpoint-aligned bilinear resize of a row-major grid.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; out_h * out_w];
    let sy = if out_h > 1 {
        (h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let sx = if out_w > 1 {
        (w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    for oy in 0..out_h {
        let fy = oy as f64 * sy;
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ox as f64 * sx;
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let v00 = src[y0 * w + x0];
            let v01 = src[y0 * w + x1];
            let v10 = src[y1 * w + x0];
            let v11 = src[y1 * w + x1];
            out[oy * out_w + ox] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                + wy * ((1.0 - wx) * v10 + wx * v11);
        }
    }
    out
}

/// Image-level score: the maximum of the anomaly map. Interpolated values
/// are convex combinations of source cells, so the max can never exceed the
/// source max; that bound is asserted as a cross-check.
pub fn image_score(map: &AnomalyMap) -> f64 {
    let out_max = map.scores.iter().cloned().fold(f64::MIN, f64::max);
    let src_max = map.source.iter().cloned().fold(f64::MIN, f64::max);
    assert!(
        out_max <= src_max + 1e-9 * src_max.abs().max(1.0),
        "interpolation exceeded source max: {out_max} > {src_max}"
    );
    out_max
}
