//! Toy two-branch detector: a spatial branch on the query frame, a temporal
//! branch on the clip (RGB and flow), exchanging features by element-wise sums,
//! plus the joint-head and cascade baselines.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchorgeom::{decode_offsets, generate_anchors, AnchorConfig, AnchorSet, BBox, GeomError};
use crate::diffcore::kernels::argmax;
use crate::diffcore::{top_gap, CustomOp, DiffError, Graph, NodeId, Tensor};
use crate::scenesim::ClipSample;
use crate::selfval::{ArgmaxRowSelect, HeadNodes, ValidatedOutputs};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("input mismatch: {0}")]
    InputMismatch(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

macro_rules! str_enum {
    ($name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$variant => $s),+ }
            }
        }
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok(Self::$variant),)+
                    _ => Err(format!(concat!("unknown ", stringify!($name), " `{}` (expected one of: ", $($s, " "),+, ")"), s)),
                }
            }
        }
    };
}

/// Where the global-class head reads its features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadPlacement {
    /// After the second fused block.
    Mid,
    /// At the coarsest pooled temporal feature.
    Late,
}
str_enum!(HeadPlacement { Mid => "mid", Late => "late" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryFrame {
    Middle,
    /// Online variant: only past frames are available.
    Last,
}
str_enum!(QueryFrame { Middle => "middle", Last => "last" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Streams {
    RgbFlow,
    Rgb,
}
str_enum!(Streams { RgbFlow => "rgb-flow", Rgb => "rgb" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Two branches with feature exchange.
    Mrnet,
    /// Temporal trunk predicts every head per anchor.
    Joint,
    /// Temporal trunk localizes; the spatial branch classifies the pooled box.
    Cascade,
}
str_enum!(ModelKind { Mrnet => "mrnet", Joint => "joint", Cascade => "cascade" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub stem: usize,
    pub spatial: usize,
    pub temporal: usize,
    /// Hidden units of the global-class head.
    pub hidden: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Self { stem: 8, spatial: 16, temporal: 16, hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub resolution: (usize, usize),
    pub clip_len: usize,
    pub classes: usize,
    pub anchors: AnchorConfig,
    pub widths: Widths,
    pub head: HeadPlacement,
    pub query: QueryFrame,
    pub streams: Streams,
}

impl NetConfig {
    /// 64x64 input, 7 frames, grids {8, 4, 2, 1}.
    pub fn toy(classes: usize) -> Self {
        Self {
            resolution: (64, 64),
            clip_len: 7,
            classes,
            anchors: AnchorConfig::toy(),
            widths: Widths::default(),
            head: HeadPlacement::Mid,
            query: QueryFrame::Middle,
            streams: Streams::RgbFlow,
        }
    }

    /// 8x8 input, 3 frames, grids {2, 1}, 20 anchors, 3 classes.
    pub fn micro() -> Self {
        Self {
            resolution: (8, 8),
            clip_len: 3,
            classes: 3,
            anchors: AnchorConfig::with_grids((8, 8), vec![2, 1], vec![4, 4], (0.3, 0.8)),
            widths: Widths { stem: 3, spatial: 4, temporal: 4, hidden: 5 },
            head: HeadPlacement::Mid,
            query: QueryFrame::Middle,
            streams: Streams::RgbFlow,
        }
    }

    pub fn query_index(&self) -> usize {
        match self.query {
            QueryFrame::Middle => self.clip_len / 2,
            QueryFrame::Last => self.clip_len - 1,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidConfig(m));
        self.anchors.validate()?;
        let (h, w) = self.resolution;
        if h != w {
            return bad(format!("resolution must be square, got {h}x{w}"));
        }
        if self.anchors.resolution != self.resolution {
            return bad(format!("anchor resolution {:?} differs from input {:?}", self.anchors.resolution, self.resolution));
        }
        if self.clip_len == 0 {
            return bad("clip length must be positive".into());
        }
        if self.query == QueryFrame::Middle && self.clip_len.is_multiple_of(2) {
            return bad(format!("clip length must be odd for middle-frame queries, got {}", self.clip_len));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        let g = &self.anchors.grids;
        if g.len() < 2 {
            return bad("need at least two anchor grids".into());
        }
        if g.windows(2).any(|p| p[0] != 2 * p[1]) {
            return bad(format!("each grid must halve the previous one, got {g:?}"));
        }
        let ratio = h / g[0];
        if h % g[0] != 0 || ratio < 4 || !ratio.is_power_of_two() {
            return bad(format!("resolution {h} must be grid {} times a power of two >= 4", g[0]));
        }
        let ws = &self.widths;
        if [ws.stem, ws.spatial, ws.temporal, ws.hidden].contains(&0) {
            return bad("channel widths must be positive".into());
        }
        Ok(())
    }

    pub fn anchor_set(&self) -> Result<AnchorSet, NetError> {
        Ok(generate_anchors(&self.anchors)?)
    }
}

/// Raw head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    /// `[a, 4]`
    pub offsets: Tensor,
    /// `[a, c]`
    pub c_box: Tensor,
    /// `[1, c]`
    pub c_global: Tensor,
    /// `[a, 1]`
    pub attention: Tensor,
}

impl ModelOutputs {
    pub fn is_finite(&self) -> bool {
        self.offsets.is_finite() && self.c_box.is_finite() && self.c_global.is_finite() && self.attention.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    fan_in: usize,
    gain: f64,
}

pub type Params = BTreeMap<String, Tensor>;

pub const FRAME_INPUT: &str = "x.frame";
pub const CLIP_INPUT: &str = "x.clip";
pub const FLOW_INPUT: &str = "x.flow";

/// A built network graph with its head nodes and parameter manifest.
#[derive(Clone)]
pub struct NetGraph {
    pub graph: Graph,
    pub heads: HeadNodes,
    pub specs: Vec<ParamSpec>,
}

struct Builder<'g> {
    g: &'g mut Graph,
    specs: Vec<ParamSpec>,
}

const RELU_GAIN: f64 = 2.0;
const LINEAR_GAIN: f64 = 1.0;

impl Builder<'_> {
    fn param(&mut self, name: &str, shape: &[usize], kind: ParamKind, fan_in: usize, gain: f64) -> NodeId {
        let name = format!("p.{name}");
        self.specs.push(ParamSpec { name: name.clone(), shape: shape.to_vec(), kind, fan_in, gain });
        self.g.input(&name, shape)
    }

    fn bias_act(&mut self, name: &str, y: NodeId, cout: usize, relu: bool) -> Result<NodeId, DiffError> {
        let b = self.param(&format!("{name}.b"), &[cout], ParamKind::Bias, 1, 0.0);
        let y = self.g.add_bias(y, b)?;
        Ok(if relu { self.g.relu(y) } else { y })
    }

    fn conv(&mut self, name: &str, x: NodeId, k: usize, cout: usize, stride: usize, relu: bool) -> Result<NodeId, DiffError> {
        let cin = *self.g.shape(x).last().expect("rank checked by conv2d");
        let gain = if relu { RELU_GAIN } else { LINEAR_GAIN };
        let w = self.param(&format!("{name}.w"), &[k, k, cin, cout], ParamKind::Weight, k * k * cin, gain);
        let y = self.g.conv2d(x, w, stride, k / 2)?;
        self.g.set_label(y, name);
        self.bias_act(name, y, cout, relu)
    }

    fn conv3d(&mut self, name: &str, x: NodeId, cout: usize) -> Result<NodeId, DiffError> {
        let cin = *self.g.shape(x).last().expect("rank checked by conv3d");
        let w = self.param(&format!("{name}.w"), &[3, 3, 3, cin, cout], ParamKind::Weight, 27 * cin, RELU_GAIN);
        let y = self.g.conv3d(x, w, [2, 2, 2], [1, 1, 1])?;
        self.g.set_label(y, name);
        self.bias_act(name, y, cout, true)
    }

    fn dense(&mut self, name: &str, x: NodeId, cout: usize, relu: bool) -> Result<NodeId, DiffError> {
        let n: usize = self.g.shape(x).iter().product();
        let x = self.g.reshape(x, &[1, n])?;
        let gain = if relu { RELU_GAIN } else { LINEAR_GAIN };
        let w = self.param(&format!("{name}.w"), &[n, cout], ParamKind::Weight, n, gain);
        let y = self.g.matmul(x, w)?;
        let y = self.g.reshape(y, &[cout])?;
        self.bias_act(name, y, cout, relu)
    }

    /// `[g, g, C]` feature map to per-anchor rows `[g*g*k, width]`.
    fn anchor_head(&mut self, name: &str, x: NodeId, per_cell: usize, width: usize) -> Result<NodeId, DiffError> {
        let y = self.conv(name, x, 3, per_cell * width, 1, false)?;
        let s = self.g.shape(y);
        let rows = s[0] * s[1] * per_cell;
        self.g.reshape(y, &[rows, width])
    }
}

struct TemporalFeatures {
    /// Time-averaged feature per anchor grid.
    grids: Vec<NodeId>,
    /// Fused block before pooling to the coarser grids.
    mid: NodeId,
}

/// Feature exchange between the branches at one resolution.
fn cog_fuse(b: &mut Builder, name: &str, s: NodeId, t: NodeId) -> Result<(NodeId, NodeId), DiffError> {
    let steps = b.g.shape(t)[0];
    let ct = b.g.shape(t)[3];
    let cs = b.g.shape(s)[2];
    let s_proj = b.conv(&format!("{name}.s2t"), s, 1, ct, 1, false)?;
    let s_rep = b.g.repeat(s_proj, steps);
    let t_fused = b.g.add(t, s_rep)?;
    let t_mean = b.g.mean_axis(t, 0)?;
    let t_proj = b.conv(&format!("{name}.t2s"), t_mean, 1, cs, 1, false)?;
    let s_fused = b.g.add(s, t_proj)?;
    Ok((s_fused, t_fused))
}

fn spatial_stem(b: &mut Builder, cfg: &NetConfig, frame: NodeId) -> Result<NodeId, DiffError> {
    let steps = (cfg.resolution.0 / cfg.anchors.grids[0]).trailing_zeros() as usize;
    let mut x = frame;
    for i in 0..steps {
        let cout = if i + 1 == steps { cfg.widths.spatial } else { cfg.widths.stem };
        x = b.conv(&format!("s.stem{i}"), x, 3, cout, 2, true)?;
    }
    Ok(x)
}

/// Per-frame stems (shared over time) for each stream, summed.
fn temporal_stem(b: &mut Builder, cfg: &NetConfig, clip: NodeId, flow: Option<NodeId>) -> Result<NodeId, DiffError> {
    let pool = cfg.resolution.0 / (4 * cfg.anchors.grids[0]);
    let stem = |b: &mut Builder, name: &str, x: NodeId| -> Result<NodeId, DiffError> {
        let x = if pool > 1 { b.g.avg_pool(x, pool)? } else { x };
        b.conv(name, x, 3, cfg.widths.stem, 2, true)
    };
    let rgb = stem(b, "t.rgb", clip)?;
    match flow {
        Some(f) => {
            let f = stem(b, "t.flow", f)?;
            b.g.add(rgb, f)
        }
        None => Ok(rgb),
    }
}

/// Temporal trunk. With `spatial` given, exchanges features with the
/// spatial grid maps (which are updated in place).
fn temporal_trunk(
    b: &mut Builder,
    cfg: &NetConfig,
    clip: NodeId,
    flow: Option<NodeId>,
    mut spatial: Option<&mut [NodeId]>,
) -> Result<TemporalFeatures, DiffError> {
    let x = temporal_stem(b, cfg, clip, flow)?;
    let mut t = b.conv3d("t.block1", x, cfg.widths.temporal)?;
    if let Some(s) = spatial.as_deref_mut() {
        let (sf, tf) = cog_fuse(b, "cog1", s[0], t)?;
        s[0] = sf;
        t = tf;
        s[1] = b.conv("s.grid1", sf, 3, cfg.widths.spatial, 2, true)?;
    }
    let g0 = b.g.mean_axis(t, 0)?;
    let mut t2 = b.conv3d("t.block2", t, cfg.widths.temporal)?;
    if let Some(s) = spatial {
        let (sf, tf) = cog_fuse(b, "cog2", s[1], t2)?;
        s[1] = sf;
        t2 = tf;
    }
    let g1 = b.g.mean_axis(t2, 0)?;
    let mut grids = vec![g0, g1];
    let base = cfg.anchors.grids[1];
    for &g in &cfg.anchors.grids[2..] {
        grids.push(b.g.avg_pool(g1, base / g)?);
    }
    Ok(TemporalFeatures { grids, mid: g1 })
}

fn chain_spatial(b: &mut Builder, cfg: &NetConfig, maps: &mut [NodeId], from: usize) -> Result<(), DiffError> {
    for j in from..cfg.anchors.grids.len() {
        maps[j] = b.conv(&format!("s.grid{j}"), maps[j - 1], 3, cfg.widths.spatial, 2, true)?;
    }
    Ok(())
}

fn box_heads(b: &mut Builder, cfg: &NetConfig, maps: &[NodeId]) -> Result<(NodeId, NodeId), DiffError> {
    let mut o = Vec::new();
    let mut c = Vec::new();
    for (j, &m) in maps.iter().enumerate() {
        let k = cfg.anchors.anchors_per_cell[j];
        o.push(b.anchor_head(&format!("h.loc{j}"), m, k, 4)?);
        c.push(b.anchor_head(&format!("h.cls{j}"), m, k, cfg.classes)?);
    }
    Ok((b.g.concat(&o)?, b.g.concat(&c)?))
}

fn attention_head(b: &mut Builder, cfg: &NetConfig, maps: &[NodeId]) -> Result<NodeId, DiffError> {
    let mut a = Vec::new();
    for (j, &m) in maps.iter().enumerate() {
        a.push(b.anchor_head(&format!("h.attn{j}"), m, cfg.anchors.anchors_per_cell[j], 1)?);
    }
    let a = b.g.concat(&a)?;
    let n = b.g.shape(a)[0];
    b.g.reshape(a, &[n])
}

fn global_head(b: &mut Builder, cfg: &NetConfig, feats: &TemporalFeatures) -> Result<NodeId, DiffError> {
    let src = match cfg.head {
        HeadPlacement::Mid => feats.mid,
        HeadPlacement::Late => *feats.grids.last().expect("at least two grids"),
    };
    let h = b.dense("h.global1", src, cfg.widths.hidden, true)?;
    b.dense("h.global2", h, cfg.classes, false)
}

/// Builds the forward graph for `kind` under `cfg`.
pub fn build_network(cfg: &NetConfig, kind: ModelKind) -> Result<NetGraph, NetError> {
    cfg.validate()?;
    let (h, w) = cfg.resolution;
    let n = cfg.clip_len;
    let mut graph = Graph::new();
    let mut b = Builder { g: &mut graph, specs: Vec::new() };
    let clip = b.g.data_input(CLIP_INPUT, &[n, h, w, 3]);
    let flow = (cfg.streams == Streams::RgbFlow).then(|| b.g.data_input(FLOW_INPUT, &[n, h, w, 2]));
    let frame = (kind != ModelKind::Joint).then(|| b.g.data_input(FRAME_INPUT, &[h, w, 3]));

    let heads = match kind {
        ModelKind::Mrnet => {
            let first = spatial_stem(&mut b, cfg, frame.expect("spatial input"))?;
            // entries past the first are filled by the trunk and the chain below
            let mut maps = vec![first; cfg.anchors.grids.len()];
            let feats = temporal_trunk(&mut b, cfg, clip, flow, Some(&mut maps))?;
            chain_spatial(&mut b, cfg, &mut maps, 2)?;
            let (offsets, c_box) = box_heads(&mut b, cfg, &maps)?;
            let attention = attention_head(&mut b, cfg, &feats.grids)?;
            let c_global = global_head(&mut b, cfg, &feats)?;
            HeadNodes { offsets, c_box, c_global, attention }
        }
        ModelKind::Joint => {
            let feats = temporal_trunk(&mut b, cfg, clip, flow, None)?;
            let (offsets, c_box) = box_heads(&mut b, cfg, &feats.grids)?;
            let attention = attention_head(&mut b, cfg, &feats.grids)?;
            let c_global = b.g.custom(Arc::new(ArgmaxRowSelect { strict: false }), &[attention, c_box])?;
            HeadNodes { offsets, c_box, c_global, attention }
        }
        ModelKind::Cascade => {
            let feats = temporal_trunk(&mut b, cfg, clip, flow, None)?;
            let mut loc = Vec::new();
            for (j, &m) in feats.grids.iter().enumerate() {
                loc.push(b.anchor_head(&format!("h.loc{j}"), m, cfg.anchors.anchors_per_cell[j], 4)?);
            }
            let offsets = b.g.concat(&loc)?;
            let attention = attention_head(&mut b, cfg, &feats.grids)?;
            let first = spatial_stem(&mut b, cfg, frame.expect("spatial input"))?;
            let anchors = cfg.anchor_set()?;
            let pool = Arc::new(RoiPool { anchors: Arc::new(anchors.boxes) });
            let pooled = b.g.custom(pool, &[first, attention, offsets])?;
            let hdn = b.dense("h.roi1", pooled, cfg.widths.hidden, true)?;
            let c_global = b.dense("h.roi2", hdn, cfg.classes, false)?;
            let a = b.g.shape(offsets)[0];
            let c_box = b.g.repeat(c_global, a);
            HeadNodes { offsets, c_box, c_global, attention }
        }
    };
    let specs = std::mem::take(&mut b.specs);
    for (name, id) in [("o", heads.offsets), ("c_box", heads.c_box), ("c_global", heads.c_global), ("a", heads.attention)] {
        graph.mark_output(name, id);
    }
    Ok(NetGraph { graph, heads, specs })
}

/// He-style normal initialization; biases start at zero.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs
        .iter()
        .map(|s| {
            let n: usize = s.shape.iter().product();
            let data = match s.kind {
                ParamKind::Bias => vec![0.0; n],
                ParamKind::Weight => {
                    let dist = Normal::new(0.0, (s.gain / s.fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            (s.name.clone(), Tensor::new(s.shape.clone(), data).expect("spec shape"))
        })
        .collect()
}

/// Converts a sample into the network's data inputs.
pub fn prepare_inputs(sample: &ClipSample, cfg: &NetConfig) -> Result<HashMap<String, Tensor>, NetError> {
    let (h, w) = cfg.resolution;
    let n = cfg.clip_len;
    let expect = [n, h, w, 3];
    if sample.frames.shape() != expect {
        return Err(NetError::InputMismatch(format!("clip shape {:?}, expected {expect:?}", sample.frames.shape())));
    }
    let q = cfg.query_index();
    let plane = h * w * 3;
    let mut frame = sample.frames.data()[q * plane..(q + 1) * plane].to_vec();
    for c in 0..3 {
        let mean = frame.iter().skip(c).step_by(3).sum::<f64>() / (h * w) as f64;
        frame.iter_mut().skip(c).step_by(3).for_each(|v| *v -= mean);
    }
    let mut inputs = HashMap::new();
    inputs.insert(FRAME_INPUT.to_string(), Tensor::new(vec![h, w, 3], frame)?);
    inputs.insert(CLIP_INPUT.to_string(), sample.frames.map(|v| 2.0 * v - 1.0));
    if cfg.streams == Streams::RgbFlow {
        if sample.flows.shape() != [n, h, w, 2] {
            return Err(NetError::InputMismatch(format!("flow shape {:?}, expected {:?}", sample.flows.shape(), [n, h, w, 2])));
        }
        inputs.insert(FLOW_INPUT.to_string(), sample.flows.clone());
    }
    Ok(inputs)
}

/// Network weights together with the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetConfig,
    pub kind: ModelKind,
    pub params: Params,
}

impl Model {
    pub fn new(config: NetConfig, kind: ModelKind, seed: u64) -> Result<Self, NetError> {
        let net = build_network(&config, kind)?;
        let params = init_params(&net.specs, seed);
        Ok(Self { config, kind, params })
    }

    pub fn graph(&self) -> Result<NetGraph, NetError> {
        build_network(&self.config, self.kind)
    }

    /// Checks parameter names and shapes against the architecture.
    pub fn check_params(&self) -> Result<(), NetError> {
        let net = self.graph()?;
        for s in &net.specs {
            match self.params.get(&s.name) {
                Some(t) if t.shape() == s.shape => {}
                Some(t) => {
                    return Err(NetError::InputMismatch(format!("parameter {} has shape {:?}, expected {:?}", s.name, t.shape(), s.shape)))
                }
                None => return Err(NetError::InputMismatch(format!("parameter {} missing", s.name))),
            }
        }
        if self.params.len() != net.specs.len() {
            return Err(NetError::InputMismatch(format!("{} parameters given, architecture has {}", self.params.len(), net.specs.len())));
        }
        Ok(())
    }

    /// Runs the heads on `sample` using a prebuilt graph.
    pub fn forward_with(&self, net: &mut NetGraph, sample: &ClipSample) -> Result<ModelOutputs, NetError> {
        let inputs = prepare_inputs(sample, &self.config)?;
        net.graph.forward_with(|n| self.params.get(n).or_else(|| inputs.get(n)))?;
        read_heads(net)
    }

    pub fn forward(&self, sample: &ClipSample) -> Result<ModelOutputs, NetError> {
        self.forward_with(&mut self.graph()?, sample)
    }
}

/// Full two-branch forward pass. `model` must be an `Mrnet`.
pub fn mindreader_forward(sample: &ClipSample, model: &Model) -> Result<ModelOutputs, NetError> {
    if model.kind != ModelKind::Mrnet {
        return Err(NetError::InvalidConfig(format!("expected an mrnet model, got {}", model.kind.as_str())));
    }
    model.forward(sample)
}

/// Forward pass of a joint or cascade baseline.
pub fn baseline_forward(sample: &ClipSample, model: &Model) -> Result<ModelOutputs, NetError> {
    if model.kind == ModelKind::Mrnet {
        return Err(NetError::InvalidConfig("expected a joint or cascade model".into()));
    }
    model.forward(sample)
}

/// Collects head values from an evaluated graph.
pub fn read_heads(net: &NetGraph) -> Result<ModelOutputs, NetError> {
    let g = &net.graph;
    let h = &net.heads;
    let a = g.value(h.attention)?;
    let cg = g.value(h.c_global)?;
    Ok(ModelOutputs {
        offsets: g.value(h.offsets)?.clone(),
        c_box: g.value(h.c_box)?.clone(),
        c_global: cg.clone().reshaped(vec![1, cg.len()])?,
        attention: a.clone().reshaped(vec![a.len(), 1])?,
    })
}

/// Final detection from validated outputs.
pub fn predict(validated: &ValidatedOutputs, raw: &ModelOutputs, anchors: &AnchorSet) -> Detection {
    let m = validated.m;
    let o = raw.offsets.row(m);
    let bbox = decode_offsets(&[o[0], o[1], o[2], o[3]], anchors.get(m)).clipped();
    Detection { bbox, class_id: argmax(&validated.c_global_prime), score: validated.a_tilde[m] }
}

/// Average-pools a `[g, g, C]` feature map over the decoded box of the
/// highest-attention anchor into a `2 x 2 x C` grid. The box itself is
/// treated as a constant.
pub struct RoiPool {
    pub anchors: Arc<Vec<BBox>>,
}

pub const ROI_BINS: usize = 2;

impl RoiPool {
    /// Member cells of each bin as flat indices into the `g x g` grid.
    fn bins(&self, g: usize, attention: &[f64], offsets: &[f64]) -> (Vec<Vec<usize>>, f64) {
        let m = argmax(attention);
        let o = &offsets[m * 4..m * 4 + 4];
        let bx = decode_offsets(&[o[0], o[1], o[2], o[3]], &self.anchors[m]).clipped();
        let [x1, y1, x2, y2] = bx.corners();
        let mut margin = f64::INFINITY;
        let mut bins = Vec::with_capacity(ROI_BINS * ROI_BINS);
        let centre = |i: usize| (i as f64 + 0.5) / g as f64;
        for by in 0..ROI_BINS {
            let (lo_y, hi_y) = (y1 + (y2 - y1) * by as f64 / 2.0, y1 + (y2 - y1) * (by + 1) as f64 / 2.0);
            for bxi in 0..ROI_BINS {
                let (lo_x, hi_x) = (x1 + (x2 - x1) * bxi as f64 / 2.0, x1 + (x2 - x1) * (bxi + 1) as f64 / 2.0);
                let mut cells = Vec::new();
                for r in 0..g {
                    for c in 0..g {
                        let (cy, cx) = (centre(r), centre(c));
                        margin = margin.min((cy - lo_y).abs()).min((cy - hi_y).abs()).min((cx - lo_x).abs()).min((cx - hi_x).abs());
                        if (lo_y..=hi_y).contains(&cy) && (lo_x..=hi_x).contains(&cx) {
                            cells.push(r * g + c);
                        }
                    }
                }
                if cells.is_empty() {
                    let (my, mx) = ((lo_y + hi_y) / 2.0, (lo_x + hi_x) / 2.0);
                    let near = |v: f64| ((v * g as f64).floor().max(0.0) as usize).min(g - 1);
                    cells.push(near(my) * g + near(mx));
                }
                bins.push(cells);
            }
        }
        (bins, margin)
    }
}

impl CustomOp for RoiPool {
    fn name(&self) -> &str {
        "roi_pool"
    }

    fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        match inputs {
            [f, a, o] if f.len() == 3 && f[0] == f[1] && a.len() == 1 && a[0] == self.anchors.len() && o == &[a[0], 4] => {
                Ok(vec![ROI_BINS, ROI_BINS, f[2]])
            }
            other => Err(format!("expected features [g, g, C], attention [a], offsets [a, 4]; got {other:?}")),
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, DiffError> {
        let f = inputs[0];
        let (g, c) = (f.shape()[0], f.shape()[2]);
        let (bins, _) = self.bins(g, inputs[1].data(), inputs[2].data());
        let mut out = vec![0.0; bins.len() * c];
        for (b, cells) in bins.iter().enumerate() {
            let k = 1.0 / cells.len() as f64;
            for &cell in cells {
                for ch in 0..c {
                    out[b * c + ch] += k * f.data()[cell * c + ch];
                }
            }
        }
        Tensor::new(vec![ROI_BINS, ROI_BINS, c], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>, DiffError> {
        let f = inputs[0];
        let (g, c) = (f.shape()[0], f.shape()[2]);
        let (bins, _) = self.bins(g, inputs[1].data(), inputs[2].data());
        let mut gf = Tensor::zeros(f.shape());
        for (b, cells) in bins.iter().enumerate() {
            let k = 1.0 / cells.len() as f64;
            for &cell in cells {
                for ch in 0..c {
                    gf.data_mut()[cell * c + ch] += k * grad.data()[b * c + ch];
                }
            }
        }
        Ok(vec![Some(gf), None, None])
    }

    fn kink_margin(&self, inputs: &[&Tensor], _output: &Tensor) -> f64 {
        let g = inputs[0].shape()[0];
        let (_, edge) = self.bins(g, inputs[1].data(), inputs[2].data());
        top_gap(inputs[1].data()).min(edge * 10.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selfval::{self_validate, ValidationKind};

    fn blank_sample(cfg: &NetConfig) -> ClipSample {
        let (h, w) = cfg.resolution;
        let n = cfg.clip_len;
        ClipSample::blank(n, h, w)
    }

    #[test]
    fn toy_shapes_and_finiteness() {
        let cfg = NetConfig::toy(5);
        for kind in [ModelKind::Mrnet, ModelKind::Joint, ModelKind::Cascade] {
            let model = Model::new(cfg.clone(), kind, 1).unwrap();
            let out = model.forward(&blank_sample(&cfg)).unwrap();
            assert_eq!(out.offsets.shape(), &[380, 4], "{kind}");
            assert_eq!(out.c_box.shape(), &[380, 5]);
            assert_eq!(out.c_global.shape(), &[1, 5]);
            assert_eq!(out.attention.shape(), &[380, 1]);
            assert!(out.is_finite());
        }
    }

    #[test]
    fn forward_entry_points_check_kind() {
        let cfg = NetConfig::micro();
        let s = blank_sample(&cfg);
        let mr = Model::new(cfg.clone(), ModelKind::Mrnet, 1).unwrap();
        let joint = Model::new(cfg.clone(), ModelKind::Joint, 1).unwrap();
        assert_eq!(mindreader_forward(&s, &mr).unwrap(), mr.forward(&s).unwrap());
        assert_eq!(baseline_forward(&s, &joint).unwrap(), joint.forward(&s).unwrap());
        assert!(matches!(mindreader_forward(&s, &joint), Err(NetError::InvalidConfig(_))));
        assert!(matches!(baseline_forward(&s, &mr), Err(NetError::InvalidConfig(_))));
    }

    #[test]
    fn rgb_only_and_late_head() {
        let mut cfg = NetConfig::micro();
        cfg.streams = Streams::Rgb;
        cfg.head = HeadPlacement::Late;
        let model = Model::new(cfg.clone(), ModelKind::Mrnet, 3).unwrap();
        let out = model.forward(&blank_sample(&cfg)).unwrap();
        assert_eq!(out.attention.shape(), &[20, 1]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = NetConfig::micro();
        let mut s = blank_sample(&cfg);
        s.frames = s.frames.map(|_| 0.3);
        let a = Model::new(cfg.clone(), ModelKind::Mrnet, 9).unwrap().forward(&s).unwrap();
        let b = Model::new(cfg, ModelKind::Mrnet, 9).unwrap().forward(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = NetConfig::toy(5);
        cfg.clip_len = 6;
        assert!(cfg.validate().is_err());
        cfg.query = QueryFrame::Last;
        assert!(cfg.validate().is_ok());
        let mut cfg = NetConfig::toy(5);
        cfg.resolution = (48, 48);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn query_index() {
        let mut cfg = NetConfig::toy(5);
        assert_eq!(cfg.query_index(), 3);
        cfg.query = QueryFrame::Last;
        assert_eq!(cfg.query_index(), 6);
    }

    #[test]
    fn predict_returns_anchor_for_zero_offsets() {
        let cfg = NetConfig::micro();
        let anchors = cfg.anchor_set().unwrap();
        let a = anchors.len();
        let k = 7;
        let mut att = vec![0.0; a];
        att[k] = 5.0;
        let mut cg = vec![0.0; 3];
        cg[2] = 1.0;
        let raw = ModelOutputs {
            offsets: Tensor::zeros(&[a, 4]),
            c_box: Tensor::zeros(&[a, 3]),
            c_global: Tensor::new(vec![1, 3], cg).unwrap(),
            attention: Tensor::new(vec![a, 1], att).unwrap(),
        };
        let v = self_validate(&raw, ValidationKind::None.into());
        let d = predict(&v, &raw, &anchors);
        assert_eq!(d.class_id, 2);
        let want = anchors.get(k).clipped();
        assert!((d.bbox.cx - want.cx).abs() < 1e-12 && (d.bbox.w - want.w).abs() < 1e-12);
    }
}
