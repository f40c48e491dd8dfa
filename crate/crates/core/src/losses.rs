//! Scalar objectives recorded on a [`Graph`]: supervised cross-entropy,
//! the three feature distances (L2, RBF-kernel MMD, cosine), multi-block
//! alignment and the logit-consistency baseline.
//!
//! Data-dependent constants (per-pixel max for the log-sum-exp, zero-norm
//! masks, the median bandwidth) are read from the eager values while
//! recording and enter the graph as constants, so they carry no gradient.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, Stream};
use crate::scenegen::IGNORE;
use crate::segmodel::{PyramidNodes, NUM_BLOCKS};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("{op}: shape mismatch {a:?} vs {b:?}")]
    Shape { op: &'static str, a: Vec<usize>, b: Vec<usize> },
    #[error("mmd needs at least 2 samples across both sets, got {0}")]
    TooFewSamples(usize),
    #[error("label {label} at pixel {pixel} is outside 0..{classes}")]
    Label { label: u8, pixel: usize, classes: usize },
    #[error("invalid block set: {0}")]
    Blocks(String),
    #[error("invalid alignment option: {0}")]
    Option(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// RBF bandwidth rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled samples.
    Median,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdOptions {
    pub bandwidth: Bandwidth,
    pub max_samples: usize,
}

impl Default for MmdOptions {
    fn default() -> Self {
        Self { bandwidth: Bandwidth::Median, max_samples: 1024 }
    }
}

/// Feature distance used for alignment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AlignmentMetric {
    L2,
    Mmd(MmdOptions),
    Cs,
}

impl AlignmentMetric {
    pub fn validate(&self) -> Result<()> {
        if let AlignmentMetric::Mmd(o) = self {
            if let Bandwidth::Fixed(s) = o.bandwidth {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(LossError::Option(format!("mmd bandwidth must be positive, got {s}")));
                }
            }
            if o.max_samples < 1 {
                return Err(LossError::Option("mmd_max_samples must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            AlignmentMetric::L2 => "l2",
            AlignmentMetric::Mmd(_) => "mmd",
            AlignmentMetric::Cs => "cs",
        }
    }
}

impl fmt::Display for AlignmentMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Non-empty subset of encoder blocks `1..=4`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSet(Vec<usize>);

impl BlockSet {
    pub fn new(blocks: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v: Vec<usize> = blocks.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            return Err(LossError::Blocks("empty block subset".into()));
        }
        if let Some(b) = v.iter().find(|&&b| b == 0 || b > NUM_BLOCKS) {
            return Err(LossError::Blocks(format!("block {b} outside 1..={NUM_BLOCKS}")));
        }
        Ok(Self(v))
    }

    pub fn all() -> Self {
        Self((1..=NUM_BLOCKS).collect())
    }

    pub fn blocks(&self) -> &[usize] {
        &self.0
    }

    /// `1 / |subset|`.
    pub fn lambda(&self) -> f64 {
        1.0 / self.0.len() as f64
    }
}

impl fmt::Display for BlockSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|b| b.to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for BlockSet {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self> {
        let blocks = s
            .split([',', '+', ' '])
            .filter(|p| !p.is_empty())
            .map(|p| p.trim_matches(|c| c == '{' || c == '}').parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| LossError::Blocks(format!("cannot parse `{s}`")))?;
        Self::new(blocks)
    }
}

fn same_shape(g: &Graph, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(LossError::Shape { op, a: g.shape(a).to_vec(), b: g.shape(b).to_vec() });
    }
    Ok(())
}

/// Shifted logits `z = x - max_k x` and `log sum_k exp z` per pixel, for
/// `[k, h, w]` logits.
fn log_softmax_parts(g: &mut Graph, logits: NodeId) -> Result<(NodeId, NodeId)> {
    let shape = g.shape(logits).to_vec();
    let (k, hw) = (shape[0], shape[1..].iter().product::<usize>());
    let d = g.value(logits).data();
    let max: Vec<f64> = (0..hw).map(|p| (0..k).map(|c| d[c * hw + p]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let mut max_shape = shape.clone();
    max_shape[0] = 1;
    let m = g.constant(Tensor::new(max_shape, max)?);
    let z = g.sub(logits, m)?;
    let e = g.exp(z)?;
    let s = g.sum_axis(e, 0)?;
    let lse = g.log(s)?;
    Ok((z, lse))
}

/// `log softmax` over the class axis.
pub fn log_softmax(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let (z, lse) = log_softmax_parts(g, logits)?;
    let shape = g.shape(lse).to_vec();
    let lse = g.reshape(lse, [vec![1], shape].concat())?;
    Ok(g.sub(z, lse)?)
}

/// Mean over non-ignored pixels of `-log softmax(logits)[label]`.
/// Returns an exact zero (with zero gradient) when every pixel is ignored.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[u8]) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 || shape[1] * shape[2] != labels.len() {
        return Err(LossError::Shape { op: "cross_entropy", a: shape, b: vec![labels.len()] });
    }
    let (k, hw) = (shape[0], labels.len());
    let mut onehot = vec![0.0; k * hw];
    let mut keep = vec![0.0; hw];
    let mut kept = 0usize;
    for (p, &l) in labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        if l as usize >= k {
            return Err(LossError::Label { label: l, pixel: p, classes: k });
        }
        onehot[l as usize * hw + p] = 1.0;
        keep[p] = 1.0;
        kept += 1;
    }
    if kept == 0 {
        let s = g.sum(logits)?;
        return Ok(g.scale(s, 0.0)?);
    }
    let (z, lse) = log_softmax_parts(g, logits)?;
    let onehot = g.constant(Tensor::new(shape.clone(), onehot)?);
    let keep = g.constant(Tensor::new(shape[1..].to_vec(), keep)?);
    let zl = g.mul(z, onehot)?;
    let picked = g.sum_axis(zl, 0)?;
    let nll = g.sub(lse, picked)?;
    let masked = g.mul(nll, keep)?;
    let total = g.sum(masked)?;
    Ok(g.scale(total, 1.0 / kept as f64)?)
}

/// Element mean of squared differences.
pub fn align_l2(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    same_shape(g, "align_l2", a, b)?;
    let d = g.sub(a, b)?;
    let sq = g.square(d)?;
    Ok(g.mean(sq)?)
}

/// Mean over spatial positions of `1 - cos` between channel vectors of
/// `[c, ...]` features. Positions where either vector has norm below 1e-12
/// contribute 0.
pub fn align_cs(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    same_shape(g, "align_cs", a, b)?;
    let ab = g.mul(a, b)?;
    let dot = g.sum_axis(ab, 0)?;
    let aa = g.square(a)?;
    let na2 = g.sum_axis(aa, 0)?;
    let bb = g.square(b)?;
    let nb2 = g.sum_axis(bb, 0)?;
    let (va, vb) = (g.value(na2).data(), g.value(nb2).data());
    let valid: Vec<f64> =
        va.iter().zip(vb).map(|(&x, &y)| if x.sqrt() >= 1e-12 && y.sqrt() >= 1e-12 { 1.0 } else { 0.0 }).collect();
    let pad: Vec<f64> = valid.iter().map(|v| 1.0 - v).collect();
    let pos_shape = g.shape(dot).to_vec();
    let valid = g.constant(Tensor::new(pos_shape.clone(), valid)?);
    let pad = g.constant(Tensor::new(pos_shape, pad)?);
    let na2 = g.add(na2, pad)?;
    let nb2 = g.add(nb2, pad)?;
    let na = g.sqrt(na2)?;
    let nb = g.sqrt(nb2)?;
    let denom = g.mul(na, nb)?;
    let cos = g.div(dot, denom)?;
    let cos = g.mul(cos, valid)?;
    let term = g.sub(valid, cos)?;
    Ok(g.mean(term)?)
}

/// Squared distances `[n, m]` between the columns of `x` `[c, n]` and `y` `[c, m]`.
fn pairwise_sq_dist(g: &mut Graph, x: NodeId, y: NodeId) -> Result<NodeId> {
    let (n, m) = (g.shape(x)[1], g.shape(y)[1]);
    let xx = g.square(x)?;
    let sx = g.sum_axis(xx, 0)?;
    let sx = g.reshape(sx, [n, 1])?;
    let yy = g.square(y)?;
    let sy = g.sum_axis(yy, 0)?;
    let sy = g.reshape(sy, [1, m])?;
    let cross = g.matmul_t(x, y, true, false)?;
    let cross = g.scale(cross, -2.0)?;
    let s = g.add(sx, sy)?;
    Ok(g.add(s, cross)?)
}

fn median_distance(g: &Graph, dxx: NodeId, dyy: NodeId, dxy: NodeId) -> f64 {
    let mut dist = Vec::new();
    for (id, upper_only) in [(dxx, true), (dyy, true), (dxy, false)] {
        let t = g.value(id);
        let (r, c) = (t.shape()[0], t.shape()[1]);
        for i in 0..r {
            let start = if upper_only { i + 1 } else { 0 };
            dist.extend(t.data()[i * c + start..(i + 1) * c].iter().map(|d| d.max(0.0).sqrt()));
        }
    }
    if dist.is_empty() {
        return 1.0;
    }
    let mid = dist.len() / 2;
    let (_, &mut median, _) = dist.select_nth_unstable_by(mid, f64::total_cmp);
    if median > 1e-12 {
        median
    } else {
        1.0
    }
}

/// Columns kept when subsampling `n` positions down to `max` with `seed`.
fn subsample(n: usize, max: usize, seed: u64) -> Option<Vec<usize>> {
    if n <= max {
        return None;
    }
    let mut rng = stream(Stream::MmdSubsample, &[seed, n as u64]);
    let mut idx = sample(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    Some(idx)
}

/// Biased empirical MMD² with an RBF kernel `exp(-|x-y|² / 2σ²)` between the
/// sets of per-position channel vectors of two `[c, ...]` feature maps.
pub fn align_mmd(g: &mut Graph, a: NodeId, b: NodeId, opts: &MmdOptions, seed: u64) -> Result<NodeId> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.is_empty() || sb.is_empty() || sa[0] != sb[0] {
        return Err(LossError::Shape { op: "align_mmd", a: sa, b: sb });
    }
    let c = sa[0];
    let (n, m) = (sa[1..].iter().product::<usize>(), sb[1..].iter().product::<usize>());
    if n == 0 || m == 0 || n + m < 2 {
        return Err(LossError::TooFewSamples(n + m));
    }
    let mut x = g.reshape(a, [c, n])?;
    let mut y = g.reshape(b, [c, m])?;
    if let Some(idx) = subsample(n, opts.max_samples, seed) {
        x = g.select_columns(x, idx)?;
    }
    if let Some(idx) = subsample(m, opts.max_samples, seed) {
        y = g.select_columns(y, idx)?;
    }
    let dxx = pairwise_sq_dist(g, x, x)?;
    let dyy = pairwise_sq_dist(g, y, y)?;
    let dxy = pairwise_sq_dist(g, x, y)?;
    let sigma = match opts.bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Median => median_distance(g, dxx, dyy, dxy),
    };
    let gamma = -1.0 / (2.0 * sigma * sigma);
    let mut means = Vec::with_capacity(3);
    for d in [dxx, dyy, dxy] {
        let e = g.scale(d, gamma)?;
        let k = g.exp(e)?;
        means.push(g.mean(k)?);
    }
    let within = g.add(means[0], means[1])?;
    let cross = g.scale(means[2], -2.0)?;
    Ok(g.add(within, cross)?)
}

/// Distance between two feature maps under `metric`.
pub fn align_features(g: &mut Graph, a: NodeId, b: NodeId, metric: &AlignmentMetric, seed: u64) -> Result<NodeId> {
    match metric {
        AlignmentMetric::L2 => align_l2(g, a, b),
        AlignmentMetric::Cs => align_cs(g, a, b),
        AlignmentMetric::Mmd(opts) => align_mmd(g, a, b, opts, seed),
    }
}

/// `λ · Σ_{l ∈ blocks} a(f_l^a, f_l^b)` with `λ = 1 / |blocks|`.
pub fn alignment_loss(
    g: &mut Graph,
    pyr_a: &PyramidNodes,
    pyr_b: &PyramidNodes,
    metric: &AlignmentMetric,
    blocks: &BlockSet,
    seed: u64,
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for &l in blocks.blocks() {
        let block_seed = crate::rng::mix64(seed ^ l as u64);
        let d = align_features(g, pyr_a.features[l - 1], pyr_b.features[l - 1], metric, block_seed)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    Ok(g.scale(total.expect("non-empty block set"), blocks.lambda())?)
}

/// Mean per-pixel symmetric KL divergence between the class distributions of
/// two `[k, h, w]` logit maps: `Σ_k (p - q)(log p - log q)`.
pub fn logit_consistency(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    same_shape(g, "logit_consistency", a, b)?;
    let pixels: usize = g.shape(a)[1..].iter().product();
    let p = g.softmax(a, 0)?;
    let q = g.softmax(b, 0)?;
    let lp = log_softmax(g, a)?;
    let lq = log_softmax(g, b)?;
    let dp = g.sub(p, q)?;
    let dl = g.sub(lp, lq)?;
    let prod = g.mul(dp, dl)?;
    let s = g.sum(prod)?;
    Ok(g.scale(s, 1.0 / pixels as f64)?)
}

/// Evaluates a two-input loss on plain tensors.
pub fn eval_pair(
    a: &Tensor,
    b: &Tensor,
    f: impl FnOnce(&mut Graph, NodeId, NodeId) -> Result<NodeId>,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input("a", a.clone())?;
    let y = g.input("b", b.clone())?;
    let out = f(&mut g, x, y)?;
    Ok(g.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_check, FdOptions};
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream(Stream::Split, &[seed, 99]);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn ce_value(logits: &Tensor, labels: &[u8]) -> f64 {
        let mut g = Graph::new();
        let x = g.input("x", logits.clone()).unwrap();
        let l = cross_entropy(&mut g, x, labels).unwrap();
        g.value(l).item()
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let mut d = vec![0.0; 3 * 4];
        let labels = [0u8, 1, 2, 1];
        for (p, &l) in labels.iter().enumerate() {
            d[l as usize * 4 + p] = 40.0;
        }
        assert!(ce_value(&t(&[3, 2, 2], &d), &labels) < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let labels: Vec<u8> = (0..12).map(|i| (i % 10) as u8).collect();
        let v = ce_value(&Tensor::zeros(vec![10, 3, 4]), &labels);
        assert!((v - 10f64.ln()).abs() < 1e-12);
        assert!((v - 2.3026).abs() < 1e-4);
    }

    #[test]
    fn ignored_half_equals_kept_half_alone() {
        // Oracle: compute the per-pixel NLL directly and average the kept half.
        let logits = random(&[4, 2, 4], 1);
        let labels: Vec<u8> = (0..8).map(|p| if p < 4 { IGNORE } else { (p % 4) as u8 }).collect();
        let d = logits.data();
        let mut total = 0.0;
        for p in 4..8 {
            let lse = (0..4).map(|c| d[c * 8 + p].exp()).sum::<f64>().ln();
            total += lse - d[labels[p] as usize * 8 + p];
        }
        assert!((ce_value(&logits, &labels) - total / 4.0).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_zero_with_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", random(&[3, 2, 2], 2)).unwrap();
        let l = cross_entropy(&mut g, x, &[IGNORE; 4]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert!(g.backpropagate(l).unwrap()["x"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perturbing_ignored_pixels_changes_nothing() {
        let base = random(&[5, 3, 3], 3);
        let labels: Vec<u8> = (0..9).map(|p| if p % 3 == 0 { IGNORE } else { (p % 5) as u8 }).collect();
        let mut bumped = base.clone();
        for c in 0..5 {
            for p in (0..9).step_by(3) {
                bumped.data_mut()[c * 9 + p] += 7.0 * (c as f64 + 1.0);
            }
        }
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let n = g.param("x", x.clone()).unwrap();
            let l = cross_entropy(&mut g, n, &labels).unwrap();
            (g.value(l).item(), g.backpropagate(l).unwrap().remove("x").unwrap())
        };
        let (v0, g0) = run(&base);
        let (v1, g1) = run(&bumped);
        assert_eq!(v0.to_bits(), v1.to_bits());
        assert_eq!(g0.data(), g1.data());
    }

    #[test]
    fn invalid_label_is_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::zeros(vec![3, 1, 2])).unwrap();
        assert!(matches!(cross_entropy(&mut g, x, &[0, 7]), Err(LossError::Label { label: 7, .. })));
    }

    #[test]
    fn l2_examples() {
        let f = t(&[2], &[1.0, 2.0]);
        assert_eq!(eval_pair(&f, &f, align_l2).unwrap(), 0.0);
        assert_eq!(eval_pair(&f, &t(&[2], &[1.0, 0.0]), align_l2).unwrap(), 2.0);
        let (a, b) = (random(&[3, 4, 4], 4), random(&[3, 4, 4], 5));
        let base = eval_pair(&a, &b, align_l2).unwrap();
        let scaled = eval_pair(&a.map(|v| 3.0 * v), &b.map(|v| 3.0 * v), align_l2).unwrap();
        assert!((scaled - 9.0 * base).abs() < 1e-12 * scaled.abs().max(1.0));
        assert!(eval_pair(&a, &random(&[3, 4, 5], 5), align_l2).is_err());
    }

    #[test]
    fn cs_boundary_values() {
        let f = random(&[4, 3, 3], 6);
        assert!(eval_pair(&f, &f, align_cs).unwrap().abs() < 1e-12);
        assert!((eval_pair(&f, &f.map(|v| -v), align_cs).unwrap() - 2.0).abs() < 1e-12);
        // Orthogonal: channel 0 vs channel 1 one-hot at every position.
        let mut a = Tensor::zeros(vec![2, 2, 2]);
        let mut b = Tensor::zeros(vec![2, 2, 2]);
        a.data_mut()[..4].fill(1.5);
        b.data_mut()[4..].fill(0.3);
        assert!((eval_pair(&a, &b, align_cs).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cs_zero_vectors_contribute_nothing() {
        let mut a = random(&[3, 1, 2], 7);
        let b = a.clone();
        // Zero out position 0 in `a`; that position contributes 0, position 1 gives cos 1.
        a.data_mut()[0] = 0.0;
        a.data_mut()[2] = 0.0;
        a.data_mut()[4] = 0.0;
        assert!(eval_pair(&a, &b, align_cs).unwrap().abs() < 1e-12);
        let mut g = Graph::new();
        let x = g.param("a", a).unwrap();
        let y = g.input("b", b).unwrap();
        let l = align_cs(&mut g, x, y).unwrap();
        assert!(g.backpropagate(l).unwrap()["a"].is_finite());
    }

    fn mmd(a: &Tensor, b: &Tensor, opts: MmdOptions) -> f64 {
        eval_pair(a, b, |g, x, y| align_mmd(g, x, y, &opts, 0)).unwrap()
    }

    #[test]
    fn mmd_identical_sets_is_zero() {
        let f = random(&[3, 4, 4], 8);
        assert!(mmd(&f, &f, MmdOptions::default()).abs() < 1e-9);
    }

    #[test]
    fn mmd_singletons_match_closed_form() {
        let x = t(&[3, 1], &[0.2, -0.4, 1.0]);
        let y = t(&[3, 1], &[0.5, 0.1, 0.3]);
        let sigma = 0.7;
        let d2: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let k = (-d2 / (2.0 * sigma * sigma)).exp();
        let opts = MmdOptions { bandwidth: Bandwidth::Fixed(sigma), max_samples: 1024 };
        assert!((mmd(&x, &y, opts) - (2.0 - 2.0 * k)).abs() < 1e-9);
    }

    #[test]
    fn mmd_rejects_empty_sets() {
        let x = Tensor::zeros(vec![3, 0]);
        let y = Tensor::zeros(vec![3, 1]);
        assert!(matches!(
            eval_pair(&x, &y, |g, a, b| align_mmd(g, a, b, &MmdOptions::default(), 0)),
            Err(LossError::TooFewSamples(1))
        ));
    }

    #[test]
    fn mmd_matches_double_sum_and_separates_distributions() {
        let gaussian = |seed: u64, shift: f64, n: usize| {
            let mut rng = stream(Stream::Split, &[seed]);
            let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
            let data: Vec<f64> = (0..2 * n).map(|_| rand_distr::Distribution::sample(&normal, &mut rng) + shift).collect();
            t(&[2, n], &data)
        };
        // Brute-force biased estimator over explicit double sums.
        let brute = |a: &Tensor, b: &Tensor, sigma: f64| {
            let (n, m) = (a.shape()[1], b.shape()[1]);
            let col = |t: &Tensor, i: usize, cols: usize| [t.data()[i], t.data()[cols + i]];
            let k = |u: [f64; 2], v: [f64; 2]| (-((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2)) / (2.0 * sigma * sigma)).exp();
            let mut kxx = 0.0;
            for i in 0..n {
                for j in 0..n {
                    kxx += k(col(a, i, n), col(a, j, n));
                }
            }
            let mut kyy = 0.0;
            for i in 0..m {
                for j in 0..m {
                    kyy += k(col(b, i, m), col(b, j, m));
                }
            }
            let mut kxy = 0.0;
            for i in 0..n {
                for j in 0..m {
                    kxy += k(col(a, i, n), col(b, j, m));
                }
            }
            kxx / (n * n) as f64 + kyy / (m * m) as f64 - 2.0 * kxy / (n * m) as f64
        };
        let opts = MmdOptions { bandwidth: Bandwidth::Fixed(1.0), max_samples: 1024 };
        for trial in 0..20 {
            let base = gaussian(100 + trial, 0.0, 40);
            let same = gaussian(200 + trial, 0.0, 40);
            let far = gaussian(300 + trial, 3.0, 40);
            let v_same = mmd(&base, &same, opts);
            let v_far = mmd(&base, &far, opts);
            assert!((v_same - brute(&base, &same, 1.0)).abs() < 1e-12);
            assert!((v_far - brute(&base, &far, 1.0)).abs() < 1e-12);
            assert!(v_far > v_same, "trial {trial}: {v_far} <= {v_same}");
        }
    }

    #[test]
    fn mmd_subsamples_large_sets() {
        let a = random(&[2, 40, 40], 9);
        let b = random(&[2, 40, 40], 10);
        let opts = MmdOptions { bandwidth: Bandwidth::Median, max_samples: 64 };
        let v = mmd(&a, &b, opts);
        assert!(v.is_finite() && v > -1e-9);
        assert!((mmd(&b, &a, opts) - v).abs() < 1e-9);
    }

    #[test]
    fn consistency_examples() {
        let l = random(&[3, 2, 2], 11);
        assert!(eval_pair(&l, &l, logit_consistency).unwrap().abs() < 1e-15);
        // (0.9, 0.1) vs (0.1, 0.9): logit gap ln 9.
        let gap = 9f64.ln();
        let a = t(&[2, 1, 2], &[gap, gap, 0.0, 0.0]);
        let b = t(&[2, 1, 2], &[0.0, 0.0, gap, gap]);
        let v = eval_pair(&a, &b, logit_consistency).unwrap();
        assert!((v - 1.6 * gap).abs() < 1e-12);
        assert!((v - 3.516).abs() < 1e-3);
        let m = random(&[3, 2, 2], 12);
        assert!((eval_pair(&l, &m, logit_consistency).unwrap() - eval_pair(&m, &l, logit_consistency).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn block_sets() {
        assert_eq!(BlockSet::all().lambda(), 0.25);
        assert_eq!("1,2,3,4".parse::<BlockSet>().unwrap(), BlockSet::all());
        assert_eq!("{4}".parse::<BlockSet>().unwrap().blocks(), &[4]);
        assert!(BlockSet::new([]).is_err());
        assert!(BlockSet::new([5]).is_err());
    }

    #[test]
    fn losses_pass_gradient_checks() {
        let opts = FdOptions::with_epsilon(1e-6);
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>>)> = vec![
            ("l2", Box::new(align_l2)),
            ("cs", Box::new(align_cs)),
            ("mmd", Box::new(|g, a, b| align_mmd(g, a, b, &MmdOptions { bandwidth: Bandwidth::Fixed(1.3), max_samples: 1024 }, 0))),
            ("mmd_median", Box::new(|g, a, b| align_mmd(g, a, b, &MmdOptions::default(), 0))),
            ("consistency", Box::new(logit_consistency)),
        ];
        for (name, f) in cases {
            let mut g = Graph::new();
            let a = g.param("a", random(&[3, 2, 3], 13)).unwrap();
            let b = g.param("b", random(&[3, 2, 3], 14)).unwrap();
            let l = f(&mut g, a, b).unwrap();
            for leaf in ["a", "b"] {
                let err = finite_difference_check(&mut g, l, leaf, opts).unwrap();
                assert!(err < 1e-4, "{name}/{leaf}: {err}");
            }
        }
        let mut g = Graph::new();
        let x = g.param("x", random(&[4, 2, 3], 15)).unwrap();
        let labels = [0, 3, IGNORE, 2, 1, 1];
        let l = cross_entropy(&mut g, x, &labels).unwrap();
        let err = finite_difference_check(&mut g, l, "x", opts).unwrap();
        assert!(err < 1e-4, "ce: {err}");
    }

    fn pyramid_pair(seed: u64) -> (Graph, PyramidNodes, PyramidNodes) {
        use crate::segmodel::{forward_nodes, init_params, ModelConfig};
        let mut params = init_params(seed, &ModelConfig::with_widths([3, 4, 4, 5])).unwrap();
        for (k, (name, t)) in params.tensors.iter_mut().enumerate() {
            if name.ends_with(".b") {
                *t = random(t.shape(), seed + 100 + k as u64).map(|v| 0.2 + 0.1 * v).requires_grad(true);
            }
        }
        let mut g = Graph::new();
        let nodes = params.register(&mut g, true).unwrap();
        let a = g.input("a", random(&[3, 16, 32], seed + 1).map(|v| v.abs())).unwrap();
        let b = g.input("b", random(&[3, 16, 32], seed + 2).map(|v| v.abs())).unwrap();
        let pa = forward_nodes(&mut g, &nodes, a).unwrap();
        let pb = forward_nodes(&mut g, &nodes, b).unwrap();
        (g, pa, pb)
    }

    #[test]
    fn alignment_loss_structure() {
        let metrics = [AlignmentMetric::L2, AlignmentMetric::Cs, AlignmentMetric::Mmd(MmdOptions::default())];
        for metric in metrics {
            let (mut g, pa, pb) = pyramid_pair(3);
            let same = alignment_loss(&mut g, &pa, &pa, &metric, &BlockSet::all(), 0).unwrap();
            assert!(g.value(same).item().abs() <= 1e-9, "{metric}");
            let only4 = alignment_loss(&mut g, &pa, &pb, &metric, &BlockSet::new([4]).unwrap(), 0).unwrap();
            let direct = align_features(&mut g, pa.features[3], pb.features[3], &metric, crate::rng::mix64(4)).unwrap();
            assert_eq!(g.value(only4).item(), g.value(direct).item());
            let all = alignment_loss(&mut g, &pa, &pb, &metric, &BlockSet::all(), 0).unwrap();
            let mut sum = 0.0;
            for l in 1..=4 {
                let d = align_features(&mut g, pa.features[l - 1], pb.features[l - 1], &metric, crate::rng::mix64(l as u64)).unwrap();
                sum += g.value(d).item();
            }
            assert!((g.value(all).item() - 0.25 * sum).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_composite_passes_gradient_check() {
        let cases = [
            (AlignmentMetric::L2, 1e-5),
            (AlignmentMetric::Cs, 1e-5),
            (AlignmentMetric::Mmd(MmdOptions::default()), 1e-5),
        ];
        for (metric, eps) in cases {
            let (mut g, pa, pb) = pyramid_pair(4);
            let l = alignment_loss(&mut g, &pa, &pb, &metric, &BlockSet::all(), 0).unwrap();
            for name in ["enc1.conv_a.w", "enc2.conv_b.w", "enc3.conv_a.b", "enc4.conv_b.w"] {
                let err = finite_difference_check(&mut g, l, name, FdOptions::with_epsilon(eps)).unwrap();
                assert!(err < 1e-4, "{metric}/{name}: {err}");
            }
        }
    }

    fn all_metrics() -> Vec<(&'static str, Box<dyn Fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>>)> {
        vec![
            ("l2", Box::new(align_l2)),
            ("cs", Box::new(align_cs)),
            ("mmd", Box::new(|g, a, b| align_mmd(g, a, b, &MmdOptions::default(), 5))),
            ("consistency", Box::new(logit_consistency)),
        ]
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn distances_are_nonnegative_symmetric_and_vanish_on_identity(seed in 0u64..10_000, c in 1usize..5, h in 1usize..4, w in 2usize..4) {
            let a = random(&[c, h, w], seed);
            let b = random(&[c, h, w], seed + 7_919);
            for (name, f) in all_metrics() {
                let ab = eval_pair(&a, &b, &f).unwrap();
                let ba = eval_pair(&b, &a, &f).unwrap();
                let aa = eval_pair(&a, &a, &f).unwrap();
                let tol = if name == "mmd" { 1e-9 } else { 1e-12 };
                proptest::prop_assert!(ab >= -1e-9, "{} {}", name, ab);
                proptest::prop_assert!((ab - ba).abs() <= tol, "{} {} {}", name, ab, ba);
                proptest::prop_assert!(aa.abs() <= 1e-9, "{} {}", name, aa);
            }
        }

        #[test]
        fn cs_is_scale_invariant_and_bounded(seed in 0u64..10_000, s in 0.01f64..100.0, t in 0.01f64..100.0) {
            let a = random(&[4, 3, 2], seed);
            let b = random(&[4, 3, 2], seed + 1);
            let base = eval_pair(&a, &b, align_cs).unwrap();
            let scaled = eval_pair(&a.map(|v| s * v), &b.map(|v| t * v), align_cs).unwrap();
            proptest::prop_assert!((base - scaled).abs() <= 1e-9);
            proptest::prop_assert!((0.0..=2.0).contains(&base));
        }

        #[test]
        fn gradient_of_sum_is_sum_of_gradients(seed in 0u64..10_000) {
            let grad = |which: u8| {
                let mut g = Graph::new();
                let a = g.param("a", random(&[3, 2, 2], seed)).unwrap();
                let b = g.input("b", random(&[3, 2, 2], seed + 3)).unwrap();
                let l2 = align_l2(&mut g, a, b).unwrap();
                let cs = align_cs(&mut g, a, b).unwrap();
                let loss = match which {
                    0 => l2,
                    1 => cs,
                    _ => g.add(l2, cs).unwrap(),
                };
                g.backpropagate(loss).unwrap().remove("a").unwrap()
            };
            let (g0, g1, g2) = (grad(0), grad(1), grad(2));
            for i in 0..g2.numel() {
                proptest::prop_assert!((g0.data()[i] + g1.data()[i] - g2.data()[i]).abs() <= 1e-12);
            }
        }
    }
}
