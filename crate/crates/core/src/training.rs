//! Targets, the four-part detection loss, SGD with momentum, and the
//! training loop.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchorgeom::{encode_offsets, match_multi, match_one_best, mine_hard_negatives, AnchorSet, GeomError, MULTI_MATCH_THRESHOLD};
use crate::diffcore::kernels::{log_softmax, smooth_l1};
use crate::diffcore::{CustomOp, DiffError, Gradients, Graph, NodeId, Tensor};
use crate::evalkit::{mean_accuracy, EvalError, EvalRecord, MetricsReport};
use crate::netmodel::{predict, prepare_inputs, Model, ModelKind, ModelOutputs, NetConfig, NetError, NetGraph, Params};
use crate::scenesim::{ClipSample, SampleSource, SimError};
use crate::selfval::{build_self_validation, self_validate, ValidatedNodes, ValidatedOutputs, ValidationKind, ValidationMode};

/// Negatives kept per positive when mining.
pub const NEGATIVE_RATIO: usize = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("shape mismatch for parameter {param}: {detail}")]
    ParamShape { param: String, detail: String },
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },
    #[error("target has no positive anchors")]
    EmptyPositives,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchStrategy {
    /// Attention target is the single best-overlap anchor.
    OneBest,
    /// Attention is trained with binary cross-entropy on all matches plus mined negatives.
    Multi,
}

impl MatchStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::OneBest => "one-best",
            Self::Multi => "multi",
        }
    }
}

impl fmt::Display for MatchStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "one-best" => Ok(Self::OneBest),
            "multi" => Ok(Self::Multi),
            _ => Err(format!("unknown matching strategy `{s}` (expected one-best or multi)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub class_id: usize,
    /// Best-overlap anchor.
    pub m_star: usize,
    /// Anchors matched at the multi-match threshold (includes `m_star`).
    pub positives: Vec<usize>,
    /// Encoded offsets, parallel to `positives`.
    pub offsets: Vec<[f64; 4]>,
    pub strategy: MatchStrategy,
}

impl Target {
    pub fn n_pos(&self) -> usize {
        self.positives.len()
    }
}

/// Matches the attended object of the query frame against the anchors.
pub fn build_target(sample: &ClipSample, query: usize, anchors: &AnchorSet, strategy: MatchStrategy) -> Result<Target, TrainError> {
    let gt = sample.target(query);
    let best = match_one_best(&gt.bbox, anchors)?;
    let positives = match_multi(&gt.bbox, anchors, MULTI_MATCH_THRESHOLD)?;
    let offsets = positives.iter().map(|&i| encode_offsets(&gt.bbox, anchors.get(i))).collect::<Result<Vec<_>, _>>()?;
    Ok(Target { class_id: gt.class_id, m_star: best.index, positives, offsets, strategy })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub global_class: f64,
    pub attn: f64,
    pub box_class: f64,
    pub box_loc: f64,
}

impl LossBreakdown {
    pub fn combine(global_class: f64, attn: f64, box_class: f64, box_loc: f64, n_pos: usize, w: &LossWeights) -> Self {
        let total = w.alpha * global_class + w.beta * attn + (w.gamma * box_class + box_loc) / n_pos as f64;
        Self { total, global_class, attn, box_class, box_loc }
    }

    fn add_scaled(&mut self, o: &LossBreakdown, k: f64) {
        self.total += k * o.total;
        self.global_class += k * o.global_class;
        self.attn += k * o.attn;
        self.box_class += k * o.box_class;
        self.box_loc += k * o.box_loc;
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy over positives and the hardest negatives.
///
/// Inputs: logits `[a]` and a positive mask `[a]`. Negatives are the
/// `ratio * |P|` non-positive anchors with the highest loss.
#[derive(Debug, Clone, Copy)]
pub struct MinedBce {
    pub ratio: usize,
}

impl MinedBce {
    fn split(&self, logits: &[f64], mask: &[f64]) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let pos: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] > 0.5).collect();
        let losses: Vec<f64> = logits.iter().map(|&x| softplus(x)).collect();
        let neg = mine_hard_negatives(&losses, &pos, self.ratio);
        (pos, neg, losses)
    }

    /// Mined negatives for the given logits and positives.
    pub fn negatives(&self, logits: &[f64], positives: &[usize]) -> Vec<usize> {
        let losses: Vec<f64> = logits.iter().map(|&x| softplus(x)).collect();
        mine_hard_negatives(&losses, positives, self.ratio)
    }

    pub fn loss(&self, logits: &[f64], positives: &[usize]) -> f64 {
        let neg = self.negatives(logits, positives);
        let total: f64 = positives.iter().map(|&i| softplus(-logits[i])).chain(neg.iter().map(|&i| softplus(logits[i]))).sum();
        total / (positives.len() + neg.len()) as f64
    }
}

impl CustomOp for MinedBce {
    fn name(&self) -> &str {
        "mined_bce"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        match inputs {
            [l, m] if l.len() == 1 && l == m => Ok(vec![1]),
            other => Err(format!("expected logits [a] and mask [a], got {other:?}")),
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, DiffError> {
        let (pos, _, _) = self.split(inputs[0].data(), inputs[1].data());
        if pos.is_empty() {
            return Err(DiffError::InvalidArgument("mined_bce needs at least one positive".into()));
        }
        Ok(Tensor::scalar(self.loss(inputs[0].data(), &pos)))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>, DiffError> {
        let x = inputs[0].data();
        let (pos, neg, _) = self.split(x, inputs[1].data());
        let k = grad.data()[0] / (pos.len() + neg.len()) as f64;
        let mut g = Tensor::zeros(inputs[0].shape());
        for &i in &pos {
            g.data_mut()[i] += k * (sigmoid(x[i]) - 1.0);
        }
        for &i in &neg {
            g.data_mut()[i] += k * sigmoid(x[i]);
        }
        Ok(vec![Some(g), None])
    }

    fn kink_margin(&self, inputs: &[&Tensor], _output: &Tensor) -> f64 {
        let (pos, neg, losses) = self.split(inputs[0].data(), inputs[1].data());
        let mut rest: Vec<f64> =
            (0..losses.len()).filter(|i| !pos.contains(i) && !neg.contains(i)).map(|i| losses[i]).collect();
        let Some(weakest) = neg.iter().map(|&i| losses[i]).reduce(f64::min) else {
            return f64::INFINITY;
        };
        rest.sort_by(|a, b| b.total_cmp(a));
        rest.first().map_or(f64::INFINITY, |r| weakest - r)
    }
}

pub const T_GLOBAL: &str = "t.global";
pub const T_ATTN: &str = "t.attn";
pub const T_BOX_CLASS: &str = "t.box_class";
pub const T_BOX_OFFSETS: &str = "t.box_offsets";
pub const T_BOX_MASK: &str = "t.box_mask";
pub const T_INV_NPOS: &str = "t.inv_npos";

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub global_class: NodeId,
    pub attn: NodeId,
    pub box_class: NodeId,
    pub box_loc: NodeId,
}

/// Appends the loss to a network graph whose heads have been validated.
pub fn build_loss(
    g: &mut Graph,
    raw: &crate::selfval::HeadNodes,
    v: &ValidatedNodes,
    strategy: MatchStrategy,
    w: &LossWeights,
) -> Result<LossNodes, DiffError> {
    let a = g.shape(raw.offsets)[0];
    let c = g.shape(raw.c_box)[1];
    let t_global = g.data_input(T_GLOBAL, &[1, c]);
    let t_attn = g.data_input(T_ATTN, &[a]);
    let t_cls = g.data_input(T_BOX_CLASS, &[a, c]);
    let t_off = g.data_input(T_BOX_OFFSETS, &[a, 4]);
    let t_mask = g.data_input(T_BOX_MASK, &[a, 4]);
    let inv_npos = g.data_input(T_INV_NPOS, &[1]);

    let cg = g.reshape(v.c_global_prime, &[1, c])?;
    let lg = g.softmax_cross_entropy(cg, t_global)?;
    let lg = g.sum(lg);

    let la = match strategy {
        MatchStrategy::OneBest => {
            let ap = g.reshape(v.a_prime, &[1, a])?;
            let t = g.reshape(t_attn, &[1, a])?;
            let ce = g.softmax_cross_entropy(ap, t)?;
            g.sum(ce)
        }
        MatchStrategy::Multi => g.custom(Arc::new(MinedBce { ratio: NEGATIVE_RATIO }), &[v.a_prime, t_attn])?,
    };

    let lbc = g.softmax_cross_entropy(raw.c_box, t_cls)?;
    let lbc = g.sum(lbc);

    let diff = g.sub(raw.offsets, t_off)?;
    let sl = g.smooth_l1(diff);
    let sl = g.mul(sl, t_mask)?;
    let lbox = g.sum(sl);

    let spatial = {
        let bc = g.scale(lbc, w.gamma);
        let s = g.add(bc, lbox)?;
        g.mul_scalar(s, inv_npos)?
    };
    let ga = g.scale(lg, w.alpha);
    let aa = g.scale(la, w.beta);
    let total = g.add(ga, aa)?;
    let total = g.add(total, spatial)?;
    for (name, id) in [("loss", total), ("l_global", lg), ("l_attn", la), ("l_box_class", lbc), ("l_box", lbox)] {
        g.set_label(id, name);
        g.mark_output(name, id);
    }
    Ok(LossNodes { total, global_class: lg, attn: la, box_class: lbc, box_loc: lbox })
}

/// Data inputs that carry `target` into the loss graph.
pub fn target_inputs(target: &Target, a: usize, c: usize) -> Result<HashMap<String, Tensor>, TrainError> {
    if target.positives.is_empty() {
        return Err(TrainError::EmptyPositives);
    }
    let mut global = vec![0.0; c];
    global[target.class_id] = 1.0;
    let mut attn = vec![0.0; a];
    match target.strategy {
        MatchStrategy::OneBest => attn[target.m_star] = 1.0,
        MatchStrategy::Multi => target.positives.iter().for_each(|&i| attn[i] = 1.0),
    }
    let mut cls = vec![0.0; a * c];
    let mut off = vec![0.0; a * 4];
    let mut mask = vec![0.0; a * 4];
    for (&i, o) in target.positives.iter().zip(&target.offsets) {
        cls[i * c + target.class_id] = 1.0;
        off[i * 4..i * 4 + 4].copy_from_slice(o);
        mask[i * 4..i * 4 + 4].fill(1.0);
    }
    let mut m = HashMap::new();
    m.insert(T_GLOBAL.into(), Tensor::new(vec![1, c], global)?);
    m.insert(T_ATTN.into(), Tensor::new(vec![a], attn)?);
    m.insert(T_BOX_CLASS.into(), Tensor::new(vec![a, c], cls)?);
    m.insert(T_BOX_OFFSETS.into(), Tensor::new(vec![a, 4], off)?);
    m.insert(T_BOX_MASK.into(), Tensor::new(vec![a, 4], mask)?);
    m.insert(T_INV_NPOS.into(), Tensor::scalar(1.0 / target.n_pos() as f64));
    Ok(m)
}

/// Loss evaluated directly on head values.
pub fn total_loss(validated: &ValidatedOutputs, raw: &ModelOutputs, target: &Target, w: &LossWeights) -> Result<LossBreakdown, TrainError> {
    if target.positives.is_empty() {
        return Err(TrainError::EmptyPositives);
    }
    let lg = -log_softmax(&validated.c_global_prime)[target.class_id];
    let la = match target.strategy {
        MatchStrategy::OneBest => -log_softmax(&validated.a_prime)[target.m_star],
        MatchStrategy::Multi => MinedBce { ratio: NEGATIVE_RATIO }.loss(&validated.a_prime, &target.positives),
    };
    let mut lbc = 0.0;
    let mut lbox = 0.0;
    for (&i, o) in target.positives.iter().zip(&target.offsets) {
        lbc -= log_softmax(raw.c_box.row(i))[target.class_id];
        lbox += raw.offsets.row(i).iter().zip(o).map(|(p, t)| smooth_l1(p - t)).sum::<f64>();
    }
    Ok(LossBreakdown::combine(lg, la, lbc, lbox, target.n_pos(), w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub lr: f64,
    pub momentum: f64,
    /// Decoupled decay added to the gradient as `decay * p`.
    pub weight_decay: f64,
    /// Penalty `l2 * |w|^2` on weights (not biases).
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, weight_decay: 0.0, l2: 5e-5, epochs: 30, batch_size: 8, seed: 0 }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.l2 < 0.0 {
            return Err(TrainError::InvalidSchedule(format!(
                "need lr > 0, momentum in [0, 1), nonnegative decay and l2 (got lr={}, momentum={}, decay={}, l2={})",
                self.lr, self.momentum, self.weight_decay, self.l2
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidSchedule("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter.
pub type Velocity = HashMap<String, Vec<f64>>;

/// `v = momentum * v + lr * (g + 2 * l2 * p + decay * p)`, then `p -= v`.
/// The L2 term applies to parameters whose name marks them as weights.
pub fn sgd_step(params: &mut Params, grads: &Gradients, velocity: &mut Velocity, s: &TrainSchedule) -> Result<(), TrainError> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient { param: name.clone() });
        }
        let p = params.get(name).ok_or_else(|| TrainError::ParamShape { param: name.clone(), detail: "unknown parameter".into() })?;
        if p.shape() != g.shape() {
            return Err(TrainError::ParamShape { param: name.clone(), detail: format!("{:?} vs gradient {:?}", p.shape(), g.shape()) });
        }
    }
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let l2 = if name.ends_with(".b") { 0.0 } else { s.l2 };
        let v = velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *vi = s.momentum * *vi + s.lr * (gi + 2.0 * l2 * *pi + s.weight_decay * *pi);
            *pi -= *vi;
        }
    }
    Ok(())
}

/// Network plus validation plus loss, ready for repeated evaluation.
#[derive(Clone)]
pub struct TrainGraph {
    pub net: NetGraph,
    pub loss: LossNodes,
    pub validated: ValidatedNodes,
}

pub fn build_train_graph(cfg: &NetConfig, kind: ModelKind, mode: ValidationMode, strategy: MatchStrategy, w: &LossWeights) -> Result<TrainGraph, TrainError> {
    let mut net = crate::netmodel::build_network(cfg, kind)?;
    let validated = build_self_validation(&mut net.graph, net.heads, mode)?;
    let loss = build_loss(&mut net.graph, &net.heads, &validated, strategy, w)?;
    Ok(TrainGraph { net, loss, validated })
}

impl TrainGraph {
    /// Forward pass on one sample; returns the loss breakdown.
    pub fn forward(&mut self, params: &Params, inputs: &HashMap<String, Tensor>) -> Result<LossBreakdown, TrainError> {
        self.net.graph.forward_with(|n| params.get(n).or_else(|| inputs.get(n)))?;
        let v = |id| -> Result<f64, TrainError> { Ok(self.net.graph.value(id)?.data()[0]) };
        Ok(LossBreakdown {
            total: v(self.loss.total)?,
            global_class: v(self.loss.global_class)?,
            attn: v(self.loss.attn)?,
            box_class: v(self.loss.box_class)?,
            box_loc: v(self.loss.box_loc)?,
        })
    }

    pub fn backward(&self) -> Result<Gradients, TrainError> {
        Ok(self.net.graph.backward_scalar(self.loss.total)?)
    }
}

/// Every data input for `sample`: images plus targets.
pub fn sample_inputs(sample: &ClipSample, cfg: &NetConfig, anchors: &AnchorSet, strategy: MatchStrategy) -> Result<HashMap<String, Tensor>, TrainError> {
    let mut inputs = prepare_inputs(sample, cfg)?;
    let target = build_target(sample, cfg.query_index(), anchors, strategy)?;
    inputs.extend(target_inputs(&target, anchors.len(), cfg.classes)?);
    Ok(inputs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub records: Vec<EvalRecord>,
}

/// Runs the model on every sample of `source` and scores the detections.
pub fn evaluate(model: &Model, source: &dyn SampleSource, mode: ValidationMode) -> Result<Evaluation, TrainError> {
    let anchors = model.config.anchor_set()?;
    let net = model.graph()?;
    let q = model.config.query_index();
    let records = (0..source.len())
        .into_par_iter()
        .map_init(
            || net.clone(),
            |net, i| -> Result<EvalRecord, TrainError> {
                let sample = source.get(i)?;
                let raw = model.forward_with(net, &sample)?;
                let validated = self_validate(&raw, mode);
                let ann = &sample.annotations[q];
                Ok(EvalRecord {
                    detection: predict(&validated, &raw, &anchors),
                    gt: sample.target(q),
                    gaze: ann.gaze,
                    objects: ann.objects.clone(),
                    gt_index: ann.attended,
                })
            },
        )
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Evaluation { report: mean_accuracy(&records)?, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub net: NetConfig,
    pub kind: ModelKind,
    pub train_mode: ValidationMode,
    pub test_mode: ValidationMode,
    pub strategy: MatchStrategy,
    pub weights: LossWeights,
    pub schedule: TrainSchedule,
}

impl TrainSetup {
    pub fn new(net: NetConfig, schedule: TrainSchedule) -> Self {
        Self {
            net,
            kind: ModelKind::Mrnet,
            train_mode: ValidationKind::FullSoft.into(),
            test_mode: ValidationKind::FullHard.into(),
            strategy: MatchStrategy::OneBest,
            weights: LossWeights::default(),
            schedule,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub test: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the best test mean accuracy (last epoch
    /// when there is no test split).
    pub model: Model,
    pub final_params: Params,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Trains from `setup.schedule.seed`. `on_epoch` sees each log record as it
/// is produced.
pub fn train(
    setup: &TrainSetup,
    train_set: &dyn SampleSource,
    test_set: &dyn SampleSource,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    let s = &setup.schedule;
    s.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::InvalidSchedule("training split is empty".into()));
    }
    let mut model = Model::new(setup.net.clone(), setup.kind, s.seed)?;
    let anchors = setup.net.anchor_set()?;
    let tg = build_train_graph(&setup.net, setup.kind, setup.train_mode, setup.strategy, &setup.weights)?;
    let mut velocity = Velocity::new();
    let mut log = Vec::with_capacity(s.epochs);
    let mut best: Option<(f64, usize, Params)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=s.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for (b, batch) in order.chunks(s.batch_size).enumerate() {
            let params = &model.params;
            let results: Vec<Result<(LossBreakdown, Gradients), TrainError>> = batch
                .par_iter()
                .map_init(
                    || tg.clone(),
                    |tg, &i| {
                        let sample = train_set.get(i)?;
                        let inputs = sample_inputs(&sample, &setup.net, &anchors, setup.strategy)?;
                        let l = tg.forward(params, &inputs)?;
                        Ok((l, tg.backward()?))
                    },
                )
                .collect();
            let mut sum: Option<Gradients> = None;
            let k = 1.0 / batch.len() as f64;
            for r in results {
                let (l, g) = r.map_err(|e| match e {
                    TrainError::Diff(DiffError::NonFinite { node }) => {
                        TrainError::Divergence { epoch, batch: b, detail: format!("non-finite value at {node}") }
                    }
                    other => other,
                })?;
                if !l.total.is_finite() {
                    return Err(TrainError::Divergence { epoch, batch: b, detail: format!("loss is {}", l.total) });
                }
                epoch_loss.add_scaled(&l, 1.0 / train_set.len() as f64);
                match sum.as_mut() {
                    None => sum = Some(g.into_iter().map(|(n, t)| (n, t.map(|v| v * k))).collect()),
                    Some(acc) => {
                        for (n, t) in g {
                            let dst = acc.get_mut(&n).expect("same parameter set per sample");
                            dst.data_mut().iter_mut().zip(t.data()).for_each(|(d, v)| *d += k * v);
                        }
                    }
                }
            }
            sgd_step(&mut model.params, &sum.expect("non-empty batch"), &mut velocity, s).map_err(|e| match e {
                TrainError::NonFiniteGradient { param } => {
                    TrainError::Divergence { epoch, batch: b, detail: format!("non-finite gradient for {param}") }
                }
                other => other,
            })?;
        }
        let test = if test_set.is_empty() { None } else { Some(evaluate(&model, test_set, setup.test_mode)?.report) };
        let score = test.as_ref().map_or(f64::NEG_INFINITY, |r| r.m_acc);
        if test.is_none() || best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, model.params.clone()));
        }
        let rec = EpochRecord { epoch, loss: epoch_loss, test };
        on_epoch(&rec);
        log.push(rec);
    }
    let final_params = model.params.clone();
    let best_epoch = match best {
        Some((_, e, p)) => {
            model.params = p;
            e
        }
        None => 0,
    };
    Ok(TrainOutcome { model, final_params, log, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchorgeom::{generate_anchors, AnchorConfig};
    use crate::netmodel::{read_heads, Model};
    use crate::scenesim::{synth_sample, SimConfig};

    fn outputs(a: Vec<f64>, cg: Vec<f64>, c_box: Vec<f64>, offsets: Vec<f64>) -> ModelOutputs {
        let n = a.len();
        let c = cg.len();
        ModelOutputs {
            offsets: Tensor::new(vec![n, 4], offsets).unwrap(),
            c_box: Tensor::new(vec![n, c], c_box).unwrap(),
            c_global: Tensor::new(vec![1, c], cg).unwrap(),
            attention: Tensor::new(vec![n, 1], a).unwrap(),
        }
    }

    #[test]
    fn attention_loss_micro_case() {
        let raw = outputs(vec![3f64.ln(), 0.0], vec![0.0, 0.0], vec![0.0; 4], vec![0.0; 8]);
        let v = self_validate(&raw, ValidationKind::None.into());
        let t = Target { class_id: 0, m_star: 0, positives: vec![0], offsets: vec![[0.0; 4]], strategy: MatchStrategy::OneBest };
        let l = total_loss(&v, &raw, &t, &LossWeights::default()).unwrap();
        assert!((l.attn - 0.287_682_072_451_780_9).abs() < 1e-12);
        assert_eq!(l.box_loc, 0.0);
    }

    #[test]
    fn doubling_npos_halves_spatial_term() {
        let w = LossWeights::default();
        let a = LossBreakdown::combine(0.5, 0.25, 2.0, 6.0, 2, &w);
        let b = LossBreakdown::combine(0.5, 0.25, 2.0, 6.0, 4, &w);
        assert_eq!(a.total - 0.75, 2.0 * (b.total - 0.75));
    }

    #[test]
    fn sgd_examples() {
        let s = TrainSchedule { lr: 0.1, momentum: 0.0, l2: 0.0, ..TrainSchedule::default() };
        let mut p: Params = [("p.x.w".to_string(), Tensor::vector(vec![1.0]))].into();
        let g: Gradients = [("p.x.w".to_string(), Tensor::vector(vec![1.0]))].into();
        let mut v = Velocity::new();
        sgd_step(&mut p, &g, &mut v, &s).unwrap();
        assert!((p["p.x.w"].data()[0] - 0.9).abs() < 1e-15);

        let s = TrainSchedule { momentum: 0.9, ..s };
        let mut v = Velocity::new();
        sgd_step(&mut p, &g, &mut v, &s).unwrap();
        sgd_step(&mut p, &g, &mut v, &s).unwrap();
        assert!((v["p.x.w"][0] - 1.9 * 0.1).abs() < 1e-15);

        let zero: Gradients = [("p.x.w".to_string(), Tensor::vector(vec![0.0]))].into();
        let mut p: Params = [("p.x.w".to_string(), Tensor::vector(vec![0.7]))].into();
        sgd_step(&mut p, &zero, &mut Velocity::new(), &TrainSchedule { l2: 0.0, ..s }).unwrap();
        assert_eq!(p["p.x.w"].data()[0], 0.7);

        let bad: Gradients = [("p.x.w".to_string(), Tensor::vector(vec![f64::NAN]))].into();
        match sgd_step(&mut p, &bad, &mut Velocity::new(), &s) {
            Err(TrainError::NonFiniteGradient { param }) => assert_eq!(param, "p.x.w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn target_for_anchor_aligned_box() {
        let anchors = generate_anchors(&AnchorConfig::toy()).unwrap();
        let k = 37;
        let mut s = crate::scenesim::ClipSample::blank(1, 64, 64);
        s.annotations[0].objects[0].bbox = *anchors.get(k);
        let t = build_target(&s, 0, &anchors, MatchStrategy::OneBest).unwrap();
        assert_eq!(t.m_star, k);
        assert!(t.positives.contains(&k));
    }

    #[test]
    fn mined_negatives_three_per_positive() {
        let op = MinedBce { ratio: NEGATIVE_RATIO };
        let logits: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(op.negatives(&logits, &[2, 5]).len(), 6);
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let cfg = NetConfig::micro();
        let sim = SimConfig { resolution: (8, 8), clip_len: 3, classes: 3, size: (3, 5), objects: (2, 3), ..SimConfig::default() };
        let anchors = cfg.anchor_set().unwrap();
        let model = Model::new(cfg.clone(), ModelKind::Mrnet, 2).unwrap();
        for strategy in [MatchStrategy::OneBest, MatchStrategy::Multi] {
            for kind in [ValidationKind::FullSoft, ValidationKind::Half, ValidationKind::None, ValidationKind::SoftAttn] {
                let sample = synth_sample(&sim, 3).unwrap();
                let mut tg = build_train_graph(&cfg, ModelKind::Mrnet, kind.into(), strategy, &LossWeights::default()).unwrap();
                let inputs = sample_inputs(&sample, &cfg, &anchors, strategy).unwrap();
                let l = tg.forward(&model.params, &inputs).unwrap();
                let raw = read_heads(&tg.net).unwrap();
                let v = self_validate(&raw, kind.into());
                let t = build_target(&sample, cfg.query_index(), &anchors, strategy).unwrap();
                let p = total_loss(&v, &raw, &t, &LossWeights::default()).unwrap();
                assert!((l.total - p.total).abs() < 1e-10, "{strategy} {kind}: {} vs {}", l.total, p.total);
                let re = LossBreakdown::combine(l.global_class, l.attn, l.box_class, l.box_loc, t.n_pos(), &LossWeights::default());
                assert!((re.total - l.total).abs() <= 1e-12);
            }
        }
    }
}
