//! Source-only (DG) and adaptation (UDA) training loops.
//!
//! One step records a fresh [`Graph`]: the batch's forward passes, the loss
//! terms and their sum, then backpropagates once and applies Adam. All
//! randomness in a step comes from `stream(TrainStep, [seed, iter])`.

mod config;

pub use config::{Alignment, Mode, TrainConfig};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;

use crate::losses::{alignment_loss, cross_entropy, logit_consistency, LossError};
use crate::metrics::ConfusionMatrix;
use crate::mixup::{build_class_mask, mix, mixed_label, BinaryMask, MixError};
use crate::rng::{mix64, stream, Stream};
use crate::scenegen::{sample_appearance_pair, SceneDataset, IGNORE};
use crate::segmodel::{
    argmax_labels, forward, forward_nodes, image_tensor, init_params, ModelError, ModelParams, ParamNodes, PyramidNodes,
};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mix(#[from] MixError),
}

impl TrainError {
    /// Whether the failure is numeric (non-finite values) rather than bad input.
    pub fn is_numeric(&self) -> bool {
        let t = match self {
            TrainError::Tensor(t) | TrainError::Model(ModelError::Tensor(t)) | TrainError::Loss(LossError::Tensor(t)) => t,
            _ => return false,
        };
        matches!(t, TensorError::NonFinite { .. })
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }
}

impl Adam {
    pub fn update(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// `lr * (1 - iter / iterations)^power` for 0-based `iter`.
pub fn poly_lr(lr: f64, power: f64, iter: usize, iterations: usize) -> f64 {
    lr * (1.0 - iter as f64 / iterations as f64).powf(power)
}

/// `momentum * teacher + (1 - momentum) * student`, tensor by tensor.
pub fn ema_update(teacher: &ModelParams, student: &ModelParams, momentum: f64) -> Result<ModelParams> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(TrainError::Config(format!("momentum {momentum} outside [0, 1]")));
    }
    if teacher.tensors.len() != student.tensors.len() {
        return Err(TrainError::Config("teacher and student parameter sets differ".into()));
    }
    let mut out = teacher.clone();
    for (name, t) in out.tensors.iter_mut() {
        let s = student.tensors.get(name).ok_or_else(|| TrainError::Config(format!("student lacks `{name}`")))?;
        if s.shape() != t.shape() {
            return Err(TrainError::Config(format!("`{name}`: shape {:?} vs {:?}", t.shape(), s.shape())));
        }
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = momentum * *a + (1.0 - momentum) * b;
        }
    }
    Ok(out)
}

/// Argmax labels of `[k, h, w]` logits with pixels below confidence `tau`
/// set to ignore, and the fraction of pixels kept.
pub fn pseudo_label_from_logits(logits: &Tensor, tau: f64) -> (Vec<u8>, f64) {
    let (k, hw) = (logits.shape()[0], logits.shape()[1] * logits.shape()[2]);
    let d = logits.data();
    let labels = argmax_labels(logits);
    let mut kept = 0usize;
    let out = (0..hw)
        .map(|p| {
            let m = (0..k).map(|c| d[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (d[c * hw + p] - m).exp()).sum();
            if 1.0 / z >= tau {
                kept += 1;
                labels[p]
            } else {
                IGNORE
            }
        })
        .collect();
    (out, kept as f64 / hw as f64)
}

pub fn pseudo_label(teacher: &ModelParams, image: &Tensor, tau: f64) -> Result<(Vec<u8>, f64)> {
    let pyr = forward(teacher, image)?;
    Ok(pseudo_label_from_logits(&pyr.logits, tau))
}

/// One labeled source layout with its two appearance views.
#[derive(Clone, Debug)]
pub struct SourceItem {
    pub view_a: Tensor,
    /// Second appearance; `None` when no alignment term needs it.
    pub view_b: Option<Tensor>,
    pub labels: Vec<u8>,
}

/// Source item plus the unlabeled target image it is paired with.
#[derive(Clone, Debug)]
pub struct AdaptItem {
    pub source: SourceItem,
    pub target: Tensor,
    pub mask: Option<BinaryMask>,
}

/// Loss nodes of one recorded step; absent terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct StepNodes {
    pub loss_s: NodeId,
    /// The weighted alignment term `λ L_A`.
    pub align_a: Option<NodeId>,
    pub loss_t: Option<NodeId>,
    /// The weighted mixed-image term `λ L_M`.
    pub align_m: Option<NodeId>,
    pub total: NodeId,
}

fn pair_term(
    g: &mut Graph,
    cfg: &TrainConfig,
    a: &PyramidNodes,
    b: &PyramidNodes,
    seed: u64,
) -> Result<Option<NodeId>> {
    Ok(match cfg.align {
        Alignment::None => None,
        Alignment::Consistency => Some(logit_consistency(g, a.logits, b.logits)?),
        Alignment::Features(metric) => Some(alignment_loss(g, a, b, &metric, &cfg.blocks, seed)?),
    })
}

fn batch_mean(g: &mut Graph, terms: &[NodeId]) -> Result<Option<NodeId>> {
    let Some((&first, rest)) = terms.split_first() else { return Ok(None) };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(Some(g.scale(acc, 1.0 / terms.len() as f64)?))
}

fn image_input(g: &mut Graph, name: String, t: &Tensor) -> Result<NodeId> {
    Ok(g.input(name, t.clone())?)
}

/// Records `L_S + λ L_A` for a batch on `g`.
pub fn build_dg_step(g: &mut Graph, student: &ParamNodes, items: &[SourceItem], cfg: &TrainConfig, seed: u64) -> Result<StepNodes> {
    let (mut ls, mut la) = (Vec::new(), Vec::new());
    for (n, item) in items.iter().enumerate() {
        let xa = image_input(g, format!("x{n}.a"), &item.view_a)?;
        let pa = forward_nodes(g, student, xa)?;
        ls.push(cross_entropy(g, pa.logits, &item.labels)?);
        if let (false, Some(vb)) = (cfg.align.is_none(), &item.view_b) {
            let xb = image_input(g, format!("x{n}.b"), vb)?;
            let pb = forward_nodes(g, student, xb)?;
            la.extend(pair_term(g, cfg, &pa, &pb, mix64(seed ^ n as u64))?);
        }
    }
    let loss_s = batch_mean(g, &ls)?.expect("non-empty batch");
    let align_a = batch_mean(g, &la)?;
    let total = match align_a {
        Some(a) => g.add(loss_s, a)?,
        None => loss_s,
    };
    Ok(StepNodes { loss_s, align_a, loss_t: None, align_m: None, total })
}

/// Records `L_S + L_T + λ L_A + λ L_M` for a batch on `g`. The teacher is
/// registered under `teacher.` as non-trainable leaves and only its argmax
/// reaches the loss.
pub fn build_uda_step(
    g: &mut Graph,
    student: &ParamNodes,
    teacher: &ModelParams,
    items: &[AdaptItem],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StepNodes> {
    let sources: Vec<SourceItem> = items.iter().map(|i| i.source.clone()).collect();
    let dg = build_dg_step(g, student, &sources, cfg, seed)?;
    let teacher_nodes = teacher.register_prefixed(g, "teacher.", false)?;
    let (mut lt, mut lm) = (Vec::new(), Vec::new());
    for (n, item) in items.iter().enumerate() {
        let xt = image_input(g, format!("t{n}"), &item.target)?;
        let tp = forward_nodes(g, &teacher_nodes, xt)?;
        let (pseudo, weight) = pseudo_label_from_logits(g.value(tp.logits), cfg.tau);
        let ce = match &item.mask {
            Some(mask) => {
                let src = &item.source;
                let ma = image_input(g, format!("m{n}.a"), &mix(&src.view_a, mask, &item.target)?)?;
                let pa = forward_nodes(g, student, ma)?;
                let y = mixed_label(&src.labels, mask, &pseudo)?;
                if let Some(vb) = &src.view_b {
                    if !cfg.align.is_none() {
                        let mb = image_input(g, format!("m{n}.b"), &mix(vb, mask, &item.target)?)?;
                        let pb = forward_nodes(g, student, mb)?;
                        lm.extend(pair_term(g, cfg, &pa, &pb, mix64(!seed ^ n as u64))?);
                    }
                }
                cross_entropy(g, pa.logits, &y)?
            }
            None => {
                let sp = forward_nodes(g, student, xt)?;
                cross_entropy(g, sp.logits, &pseudo)?
            }
        };
        lt.push(g.scale(ce, weight)?);
    }
    let loss_t = batch_mean(g, &lt)?;
    let align_m = batch_mean(g, &lm)?;
    let mut total = dg.total;
    for term in [loss_t, align_m].into_iter().flatten() {
        total = g.add(total, term)?;
    }
    Ok(StepNodes { loss_t, align_m, total, ..dg })
}

/// Per-iteration loss values. `loss_a` and `loss_m` are unweighted sums over blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub iter: usize,
    pub loss_s: f64,
    pub loss_a: f64,
    pub loss_t: f64,
    pub loss_m: f64,
    pub total: f64,
    pub miou_eval: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub iter: usize,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub lambda: f64,
    pub records: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub wall_clock_s: f64,
}

pub const LOG_HEADER: &str = "iter,loss_s,loss_a,loss_t,loss_m,total,miou_eval";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for r in &self.records {
            let miou = r.miou_eval.map(|m| format!("{m:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:.9},{:.9},{:.9},{:.9},{:.9},{}",
                r.iter, r.loss_s, r.loss_a, r.loss_t, r.loss_m, r.total, miou
            );
        }
        out
    }

    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

/// Labeled layouts and the appearances to score them under.
#[derive(Clone, Copy, Debug)]
pub struct EvalSet<'a> {
    pub data: &'a SceneDataset,
    pub appearances: &'a [usize],
}

pub fn evaluate(params: &ModelParams, eval: EvalSet<'_>) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(params.config.num_classes);
    let (w, h) = (eval.data.width, eval.data.height);
    for &a in eval.appearances {
        if !eval.data.has_appearance(a) {
            return Err(TrainError::Data(format!("evaluation split lacks appearance {a}")));
        }
        for i in 0..eval.data.len() {
            let pyr = forward(params, &image_tensor(eval.data.rgb(i, a).expect("checked"), w, h))?;
            cm.accumulate(&argmax_labels(&pyr.logits), eval.data.labels(i))
                .map_err(|e| TrainError::Data(e.to_string()))?;
        }
    }
    Ok(cm)
}

/// Unlabeled target images; the label maps of the source dataset are dropped.
#[derive(Clone, Debug)]
pub struct TargetImages {
    images: Vec<Tensor>,
}

impl TargetImages {
    pub fn from_dataset(data: &SceneDataset, appearance: usize) -> Result<Self> {
        if !data.has_appearance(appearance) {
            return Err(TrainError::Data(format!("target split lacks appearance {appearance}")));
        }
        let images = (0..data.len())
            .map(|i| image_tensor(data.rgb(i, appearance).expect("checked"), data.width, data.height))
            .collect();
        Ok(Self { images })
    }

    pub fn from_images(images: Vec<Tensor>) -> Self {
        Self { images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub teacher: Option<ModelParams>,
    pub log: TrainLog,
}

fn check_source(cfg: &TrainConfig, data: &SceneDataset) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Data("source dataset is empty".into()));
    }
    let (w, h) = (data.width, data.height);
    if w % 16 != 0 || h % 16 != 0 {
        return Err(TrainError::Data(format!("{w}x{h} images are not divisible by 16")));
    }
    let needed: Vec<usize> = match cfg.protocol {
        crate::scenegen::AppearanceProtocol::Single(a) => vec![a.id()],
        _ => vec![0, 1, 2, 3],
    };
    if let Some(a) = needed.iter().find(|&&a| !data.has_appearance(a)) {
        return Err(TrainError::Data(format!("source dataset lacks appearance {a}")));
    }
    Ok(())
}

fn draw_source(cfg: &TrainConfig, data: &SceneDataset, rng: &mut impl Rng) -> (usize, SourceItem) {
    let i = rng.random_range(0..data.len());
    let (j, k) = sample_appearance_pair(cfg.protocol, data.seed, data.layout_index(i), rng);
    let (w, h) = (data.width, data.height);
    let img = |a: usize| image_tensor(data.rgb(i, a).expect("checked appearance"), w, h);
    let view_b = (!cfg.align.is_none()).then(|| img(k));
    (i, SourceItem { view_a: img(j), view_b, labels: data.labels(i).to_vec() })
}

fn value_of(g: &Graph, id: Option<NodeId>) -> f64 {
    id.map(|n| g.value(n).item()).unwrap_or(0.0)
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    eval: Option<EvalSet<'a>>,
    adam: Adam,
    log: TrainLog,
    started: Instant,
}

impl<'a> Loop<'a> {
    fn new(cfg: &'a TrainConfig, eval: Option<EvalSet<'a>>) -> Self {
        let log = TrainLog { lambda: cfg.lambda(), records: Vec::new(), evals: Vec::new(), wall_clock_s: 0.0 };
        Self { cfg, eval, adam: Adam::default(), log, started: Instant::now() }
    }

    fn finish_step(&mut self, it: usize, g: &Graph, nodes: &StepNodes, student: &mut ModelParams) -> Result<()> {
        let grads = g.backpropagate(nodes.total)?;
        let lr = poly_lr(self.cfg.lr, self.cfg.lr_power, it, self.cfg.iterations);
        self.adam.update(&mut student.tensors, &grads, lr);
        let lambda = self.log.lambda;
        let unweight = |v: f64| if lambda > 0.0 { v / lambda } else { v };
        let mut rec = StepRecord {
            iter: it + 1,
            loss_s: g.value(nodes.loss_s).item(),
            loss_a: unweight(value_of(g, nodes.align_a)),
            loss_t: value_of(g, nodes.loss_t),
            loss_m: unweight(value_of(g, nodes.align_m)),
            total: g.value(nodes.total).item(),
            miou_eval: None,
        };
        let last = it + 1 == self.cfg.iterations;
        let periodic = self.cfg.eval_every > 0 && (it + 1) % self.cfg.eval_every == 0;
        if let (Some(eval), true) = (self.eval, last || periodic) {
            let s = evaluate(student, eval)?.scores();
            rec.miou_eval = s.miou;
            self.log.evals.push(EvalRecord { iter: it + 1, miou: s.miou, macc: s.macc });
        }
        self.log.records.push(rec);
        Ok(())
    }

    fn done(mut self) -> TrainLog {
        self.log.wall_clock_s = self.started.elapsed().as_secs_f64();
        self.log
    }
}

/// Minimizes `L_S + λ L_A` over `data`.
pub fn train_dg(cfg: &TrainConfig, data: &SceneDataset, eval: Option<EvalSet<'_>>) -> Result<TrainOutcome> {
    check_source(cfg, data)?;
    let mut student = init_params(cfg.seed, &cfg.model)?;
    let mut lp = Loop::new(cfg, eval);
    for it in 0..cfg.iterations {
        let mut rng = stream(Stream::TrainStep, &[cfg.seed, it as u64]);
        let items: Vec<SourceItem> = (0..cfg.batch).map(|_| draw_source(cfg, data, &mut rng).1).collect();
        let mut g = Graph::new();
        let nodes = student.register(&mut g, true)?;
        let step = build_dg_step(&mut g, &nodes, &items, cfg, stream_seed(cfg, it))?;
        lp.finish_step(it, &g, &step, &mut student)?;
    }
    Ok(TrainOutcome { params: student, teacher: None, log: lp.done() })
}

fn stream_seed(cfg: &TrainConfig, it: usize) -> u64 {
    crate::rng::stream_key(Stream::MmdSubsample, &[cfg.seed, it as u64])
}

/// Minimizes `L_S + L_T + λ L_A + λ L_M` with an EMA teacher supplying
/// pseudo-labels for `target`.
pub fn train_uda(
    cfg: &TrainConfig,
    source: &SceneDataset,
    target: &TargetImages,
    eval: Option<EvalSet<'_>>,
) -> Result<TrainOutcome> {
    check_source(cfg, source)?;
    if target.is_empty() {
        return Err(TrainError::Data("target set is empty".into()));
    }
    let shape = [3, source.height, source.width];
    if target.images.iter().any(|t| t.shape() != shape) {
        return Err(TrainError::Data(format!("target images must be {}x{}", source.width, source.height)));
    }
    let mut student = init_params(cfg.seed, &cfg.model)?;
    let mut teacher = student.clone();
    let mut lp = Loop::new(cfg, eval);
    for it in 0..cfg.iterations {
        let mut rng = stream(Stream::TrainStep, &[cfg.seed, it as u64]);
        let mut items = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let (_, src) = draw_source(cfg, source, &mut rng);
            let t = rng.random_range(0..target.len());
            let mask = if cfg.mixup {
                Some(build_class_mask(&src.labels, source.width, source.height, &mut rng)?)
            } else {
                None
            };
            items.push(AdaptItem { source: src, target: target.images[t].clone(), mask });
        }
        let mut g = Graph::new();
        let nodes = student.register(&mut g, true)?;
        let step = build_uda_step(&mut g, &nodes, &teacher, &items, cfg, stream_seed(cfg, it))?;
        lp.finish_step(it, &g, &step, &mut student)?;
        teacher = ema_update(&teacher, &student, cfg.ema)?;
    }
    Ok(TrainOutcome { params: student, teacher: Some(teacher), log: lp.done() })
}
