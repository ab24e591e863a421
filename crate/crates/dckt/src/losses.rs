//! Coupling losses: multi-kernel squared MMD with gradients, layer-wise
//! media-level and correlation-level MMD losses, pairwise constraint
//! losses, and the weighted total objective.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::ForwardTrace;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthBase {
    /// Median pairwise distance over the joint batch, recomputed per call
    /// and treated as a constant w.r.t. gradients.
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmdEstimator {
    BiasedQuadratic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdConfig {
    pub num_kernels: usize,
    /// Geometric step between adjacent bandwidths in the ladder.
    pub bandwidth_step: f64,
    pub bandwidth_base: BandwidthBase,
    pub estimator: MmdEstimator,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            num_kernels: 5,
            bandwidth_step: 2.0,
            bandwidth_base: BandwidthBase::MedianHeuristic,
            estimator: MmdEstimator::BiasedQuadratic,
        }
    }
}

impl MmdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_kernels == 0 {
            return Err(Error::InvalidArgument("num_kernels must be >= 1".into()));
        }
        if !(self.bandwidth_step > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth_step must be > 0, got {}",
                self.bandwidth_step
            )));
        }
        if let BandwidthBase::Fixed(v) = self.bandwidth_base {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "fixed bandwidth must be > 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Kernel ladder centered on `sigma`: for the default 5 kernels with
    /// step 2 this is {sigma/4, sigma/2, sigma, 2*sigma, 4*sigma}.
    fn ladder(&self, sigma: f64) -> Vec<f64> {
        let center = (self.num_kernels - 1) as f64 / 2.0;
        (0..self.num_kernels)
            .map(|i| sigma * self.bandwidth_step.powf(i as f64 - center))
            .collect()
    }
}

/// `exp(-||x - y||^2 / (2 * bandwidth^2))`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], bandwidth: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "kernel arguments of dims {} and {}",
            x.len(),
            y.len()
        )));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bandwidth must be > 0, got {bandwidth}"
        )));
    }
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-sq / (2.0 * bandwidth * bandwidth)).exp())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the rows of the joint sample.
/// Falls back to 1.0 when all points coincide.
fn median_bandwidth(x: &Matrix, y: &Matrix) -> f64 {
    let mut rows: Vec<&[f64]> = Vec::with_capacity(x.rows() + y.rows());
    for i in 0..x.rows() {
        rows.push(x.row(i));
    }
    for i in 0..y.rows() {
        rows.push(y.row(i));
    }
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            dists.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if dists.len() % 2 == 1 {
        dists[dists.len() / 2]
    } else {
        0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Biased quadratic (V-statistic) squared MMD averaged over the kernel
/// ladder, with exact gradients for the estimator. The bandwidth base is
/// treated as a constant w.r.t. the inputs.
pub fn mmd_sq(x: &Matrix, y: &Matrix, cfg: &MmdConfig) -> Result<(f64, Matrix, Matrix)> {
    cfg.validate()?;
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "mmd_sq needs batches of >= 2, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.cols() != y.cols() {
        return Err(Error::DimensionMismatch(format!(
            "mmd_sq feature dims {} vs {}",
            x.cols(),
            y.cols()
        )));
    }
    let sigma = match cfg.bandwidth_base {
        BandwidthBase::MedianHeuristic => median_bandwidth(x, y),
        BandwidthBase::Fixed(v) => v,
    };
    let bandwidths = cfg.ladder(sigma);
    let k_count = bandwidths.len() as f64;

    // Averaged kernel value and the matching gradient coefficient
    // mean_k exp(-d2 / 2 s_k^2) / s_k^2 for a squared distance d2.
    let kernel_sums = |d2: f64| -> (f64, f64) {
        let mut kv = 0.0;
        let mut kg = 0.0;
        for &s in &bandwidths {
            let s2 = s * s;
            let k = (-d2 / (2.0 * s2)).exp();
            kv += k;
            kg += k / s2;
        }
        (kv / k_count, kg / k_count)
    };

    let n = x.rows();
    let m = y.rows();
    let nf = n as f64;
    let mf = m as f64;
    let d = x.cols();
    let mut grad_x = Matrix::zeros(n, d);
    let mut grad_y = Matrix::zeros(m, d);

    // within X: value += mean(Kxx); grad_xi += (2/n^2) sum_j dk/dxi
    let mut sum_xx = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (kv, kg) = kernel_sums(sq_dist(x.row(i), x.row(j)));
            sum_xx += kv;
            if i != j {
                let coeff = -2.0 / (nf * nf) * kg;
                let (xi, xj) = (x.row(i), x.row(j));
                let gi = grad_x.row_mut(i);
                for c in 0..d {
                    gi[c] += coeff * (xi[c] - xj[c]);
                }
            }
        }
    }
    // within Y
    let mut sum_yy = 0.0;
    for i in 0..m {
        for j in 0..m {
            let (kv, kg) = kernel_sums(sq_dist(y.row(i), y.row(j)));
            sum_yy += kv;
            if i != j {
                let coeff = -2.0 / (mf * mf) * kg;
                let (yi, yj) = (y.row(i), y.row(j));
                let gi = grad_y.row_mut(i);
                for c in 0..d {
                    gi[c] += coeff * (yi[c] - yj[c]);
                }
            }
        }
    }
    // Cross term: value -= 2 mean(Kxy). The kernel values are summed in
    // sorted order so the estimate is exactly symmetric in its arguments
    // (the multiset of cross kernels does not depend on which sample is
    // passed first, and neither do the within-block sums).
    let mut cross = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let (kv, kg) = kernel_sums(sq_dist(x.row(i), y.row(j)));
            cross.push(kv);
            let coeff = 2.0 / (nf * mf) * kg;
            let (xi, yj) = (x.row(i), y.row(j));
            for c in 0..d {
                let diff = xi[c] - yj[c];
                grad_x.row_mut(i)[c] += coeff * diff;
                grad_y.row_mut(j)[c] -= coeff * diff;
            }
        }
    }
    cross.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let sum_xy: f64 = cross.iter().sum();
    let value = sum_xx / (nf * nf) + sum_yy / (mf * mf) - 2.0 * sum_xy / (nf * mf);
    // V-statistic is non-negative in exact arithmetic; floor rounding noise.
    Ok((value.max(0.0), grad_x, grad_y))
}

/// Per-layer gradient pair produced by an MMD loss between two traces.
#[derive(Debug, Clone)]
pub struct MmdLayerGrads {
    pub layer: String,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

/// Sum of `mmd_sq` between corresponding-layer activations of two traces
/// of the same media type (media-level loss, one media type per call).
pub fn mmd_media_loss(
    trace_src: &ForwardTrace,
    trace_tgt: &ForwardTrace,
    layers: &[&str],
    cfg: &MmdConfig,
) -> Result<(f64, Vec<MmdLayerGrads>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(layers.len());
    for &layer in layers {
        let a = trace_src.activation(layer)?;
        let b = trace_tgt.activation(layer)?;
        let (v, ga, gb) = mmd_sq(a, b, cfg)?;
        total += v;
        grads.push(MmdLayerGrads {
            layer: layer.to_string(),
            grad_a: ga,
            grad_b: gb,
        });
    }
    Ok((total, grads))
}

/// Per-layer gradients of the correlation-level loss, split back into the
/// four media traces that were pooled.
#[derive(Debug, Clone)]
pub struct CorrLayerGrads {
    pub layer: String,
    pub src_img: Matrix,
    pub src_txt: Matrix,
    pub tgt_img: Matrix,
    pub tgt_txt: Matrix,
}

/// Correlation-level MMD over shared-layer activations, pooling image and
/// text rows jointly within each domain before comparing domains.
pub fn mmd_corr_loss(
    src_img: &ForwardTrace,
    src_txt: &ForwardTrace,
    tgt_img: &ForwardTrace,
    tgt_txt: &ForwardTrace,
    layers: &[&str],
    cfg: &MmdConfig,
) -> Result<(f64, Vec<CorrLayerGrads>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(layers.len());
    for &layer in layers {
        let si = src_img.activation(layer)?;
        let st = src_txt.activation(layer)?;
        let ti = tgt_img.activation(layer)?;
        let tt = tgt_txt.activation(layer)?;
        let pooled_src = Matrix::vstack(si, st)?;
        let pooled_tgt = Matrix::vstack(ti, tt)?;
        let (v, ga, gb) = mmd_sq(&pooled_src, &pooled_tgt, cfg)?;
        total += v;
        grads.push(CorrLayerGrads {
            layer: layer.to_string(),
            src_img: ga.row_block(0, si.rows()),
            src_txt: ga.row_block(si.rows(), st.rows()),
            tgt_img: gb.row_block(0, ti.rows()),
            tgt_txt: gb.row_block(ti.rows(), tt.rows()),
        });
    }
    Ok((total, grads))
}

/// Pairwise constraint loss over aligned image/text activations:
/// sum over layers of the mean squared Euclidean pair distance.
/// Returns per-layer gradients `(grad_img, grad_txt)`.
pub fn pairwise_loss(layers: &[(&Matrix, &Matrix)]) -> Result<(f64, Vec<(Matrix, Matrix)>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(layers.len());
    for (img, txt) in layers {
        if img.rows() != txt.rows() {
            return Err(Error::DimensionMismatch(format!(
                "pairwise batches of {} and {} rows",
                img.rows(),
                txt.rows()
            )));
        }
        if img.cols() != txt.cols() {
            return Err(Error::DimensionMismatch(format!(
                "pairwise feature dims {} vs {}",
                img.cols(),
                txt.cols()
            )));
        }
        if img.rows() == 0 {
            return Err(Error::Empty("pairwise batch".into()));
        }
        let n = img.rows() as f64;
        let mut gi = Matrix::zeros(img.rows(), img.cols());
        let mut gt = Matrix::zeros(txt.rows(), txt.cols());
        for p in 0..img.rows() {
            let a = img.row(p);
            let b = txt.row(p);
            total += sq_dist(a, b) / n;
            let gir = gi.row_mut(p);
            let gtr = gt.row_mut(p);
            for c in 0..img.cols() {
                let diff = 2.0 * (a[c] - b[c]) / n;
                gir[c] = diff;
                gtr[c] = -diff;
            }
        }
        grads.push((gi, gt));
    }
    Ok((total, grads))
}

/// Weights of the seven loss terms in the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_mmd_image: f64,
    pub w_mmd_text: f64,
    pub w_mmd_corr: f64,
    pub w_pair_src: f64,
    pub w_pair_tgt: f64,
    pub w_sem_src: f64,
    pub w_sem_tgt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_mmd_image: 0.3,
            w_mmd_text: 0.3,
            w_mmd_corr: 0.3,
            w_pair_src: 0.1,
            w_pair_tgt: 0.1,
            w_sem_src: 1.0,
            w_sem_tgt: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("w_mmd_image", self.w_mmd_image),
            ("w_mmd_text", self.w_mmd_text),
            ("w_mmd_corr", self.w_mmd_corr),
            ("w_pair_src", self.w_pair_src),
            ("w_pair_tgt", self.w_pair_tgt),
            ("w_sem_src", self.w_sem_src),
            ("w_sem_tgt", self.w_sem_tgt),
        ]
    }
}

/// Raw (unweighted) values of the seven loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub mmd_image: f64,
    pub mmd_text: f64,
    pub mmd_corr: f64,
    pub pair_src: f64,
    pub pair_tgt: f64,
    pub sem_src: f64,
    pub sem_tgt: f64,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("mmd_image", self.mmd_image),
            ("mmd_text", self.mmd_text),
            ("mmd_corr", self.mmd_corr),
            ("pair_src", self.pair_src),
            ("pair_tgt", self.pair_tgt),
            ("sem_src", self.sem_src),
            ("sem_tgt", self.sem_tgt),
        ]
    }
}

/// The seven named loss terms (unweighted) plus the weighted total for one
/// training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub mmd_image: f64,
    pub mmd_text: f64,
    pub mmd_corr: f64,
    pub pair_src: f64,
    pub pair_tgt: f64,
    pub sem_src: f64,
    pub sem_tgt: f64,
    pub total: f64,
}

/// Weighted combination of the seven terms; terms are stored unweighted.
pub fn combine(terms: &LossTerms, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    for (name, v) in terms.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
    }
    let total = weights.w_mmd_image * terms.mmd_image
        + weights.w_mmd_text * terms.mmd_text
        + weights.w_mmd_corr * terms.mmd_corr
        + weights.w_pair_src * terms.pair_src
        + weights.w_pair_tgt * terms.pair_tgt
        + weights.w_sem_src * terms.sem_src
        + weights.w_sem_tgt * terms.sem_tgt;
    Ok(LossBreakdown {
        mmd_image: terms.mmd_image,
        mmd_text: terms.mmd_text,
        mmd_corr: terms.mmd_corr,
        pair_src: terms.pair_src,
        pair_tgt: terms.pair_tgt,
        sem_src: terms.sem_src,
        sem_tgt: terms.sem_tgt,
        total,
    })
}
