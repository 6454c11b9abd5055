//! Finite-difference checks over the op catalog, the validation chains and
//! the micro-network loss.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{finite_diff_check_sampled, DiffError, Graph, NodeId, Tensor};
use crate::netmodel::{init_params, ModelKind, NetConfig, RoiPool};
use crate::scenesim::{synth_sample, SimConfig};
use crate::selfval::{build_self_validation, ArgmaxRowSelect, HeadNodes, ValidationKind, ValidationMode};
use crate::training::{build_train_graph, sample_inputs, LossWeights, MatchStrategy, MinedBce, NEGATIVE_RATIO};

/// Points closer than this to a kink (in input units) are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;
const MAX_REDRAWS: usize = 200;
/// Coordinates checked per parameter tensor in the network checks.
const NETWORK_COORDS: usize = 3;

type Point = HashMap<String, Tensor>;
type Builder = fn(&mut ChaCha8Rng) -> Result<(Graph, Point), DiffError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub points: usize,
    pub redraws: usize,
    pub max_abs: f64,
    pub max_rel: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn failures(&self) -> Vec<&SuiteEntry> {
        self.entries.iter().filter(|e| !e.pass).collect()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<34} {:>6} {:>7} {:>11} {:>11}  result", "check", "points", "redraws", "max_abs", "max_rel")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<34} {:>6} {:>7} {:>11.3e} {:>11.3e}  {}",
                e.name,
                e.points,
                e.redraws,
                e.max_abs,
                e.max_rel,
                if e.pass { "PASS" } else { "FAIL" }
            )?;
        }
        write!(f, "eps={:.1e} tol={:.1e}: {}", self.epsilon, self.tolerance, if self.pass() { "all checks passed" } else { "FAILURES" })
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("sized")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Reduces `y` to a scalar through a random linear functional and marks it
/// as output `out`.
fn finish(g: &mut Graph, y: NodeId, rng: &mut ChaCha8Rng) -> Result<(), DiffError> {
    let w = g.constant(randn(rng, g.shape(y)));
    let p = g.mul(y, w)?;
    let s = g.sum(p);
    g.mark_output("out", s);
    Ok(())
}

struct Inputs<'a> {
    g: Graph,
    point: Point,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Inputs<'a> {
    fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self { g: Graph::new(), point: Point::new(), rng }
    }

    fn param(&mut self, name: &str, t: Tensor) -> NodeId {
        let id = self.g.input(name, t.shape());
        self.point.insert(name.into(), t);
        id
    }

    fn normal(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let t = randn(self.rng, shape);
        self.param(name, t)
    }

    fn data(&mut self, name: &str, t: Tensor) -> NodeId {
        let id = self.g.data_input(name, t.shape());
        self.point.insert(name.into(), t);
        id
    }

    fn done(mut self, y: NodeId) -> Result<(Graph, Point), DiffError> {
        finish(&mut self.g, y, self.rng)?;
        Ok((self.g, self.point))
    }
}

macro_rules! unary {
    ($shape:expr, |$g:ident, $x:ident| $body:expr) => {
        |rng: &mut ChaCha8Rng| {
            let mut s = Inputs::new(rng);
            let $x = s.normal("x", &$shape);
            let y = {
                let $g = &mut s.g;
                $body
            };
            s.done(y)
        }
    };
}

macro_rules! binary {
    ($sa:expr, $sb:expr, |$g:ident, $a:ident, $b:ident| $body:expr) => {
        |rng: &mut ChaCha8Rng| {
            let mut s = Inputs::new(rng);
            let $a = s.normal("a", &$sa);
            let $b = s.normal("b", &$sb);
            let y = {
                let $g = &mut s.g;
                $body
            };
            s.done(y)
        }
    };
}

fn op_catalog() -> Vec<(&'static str, Builder)> {
    vec![
        ("add", binary!([2, 3], [2, 3], |g, a, b| g.add(a, b)?)),
        ("sub", binary!([2, 3], [2, 3], |g, a, b| g.sub(a, b)?)),
        ("mul", binary!([2, 3], [2, 3], |g, a, b| g.mul(a, b)?)),
        ("scale", unary!([4], |g, x| g.scale(x, -1.7))),
        ("add_scalar", unary!([4], |g, x| g.add_scalar(x, 0.3))),
        ("mul_scalar", binary!([2, 3], [1], |g, a, b| g.mul_scalar(a, b)?)),
        ("add_bias", binary!([2, 3], [3], |g, a, b| g.add_bias(a, b)?)),
        ("matmul", binary!([2, 3], [3, 4], |g, a, b| g.matmul(a, b)?)),
        ("conv2d stride 1", binary!([5, 5, 2], [3, 3, 2, 3], |g, a, b| g.conv2d(a, b, 1, 1)?)),
        ("conv2d stride 2 batched", binary!([2, 6, 6, 2], [3, 3, 2, 2], |g, a, b| g.conv2d(a, b, 2, 1)?)),
        ("conv2d valid 1x1", binary!([3, 3, 3], [1, 1, 3, 2], |g, a, b| g.conv2d(a, b, 1, 0)?)),
        ("conv3d stride 2", binary!([3, 4, 4, 2], [3, 3, 3, 2, 2], |g, a, b| g.conv3d(a, b, [2, 2, 2], [1, 1, 1])?)),
        ("conv3d stride 1", binary!([3, 3, 3, 1], [3, 3, 3, 1, 2], |g, a, b| g.conv3d(a, b, [1, 1, 1], [1, 1, 1])?)),
        ("relu", unary!([3, 4], |g, x| g.relu(x))),
        ("log", |rng: &mut ChaCha8Rng| {
            let mut s = Inputs::new(rng);
            let t = uniform(s.rng, &[5], 0.3, 3.0);
            let x = s.param("x", t);
            let y = s.g.log(x);
            s.done(y)
        }),
        ("exp", unary!([5], |g, x| g.exp(x))),
        ("softmax axis 0", unary!([3, 4], |g, x| g.softmax(x, 0)?)),
        ("softmax axis 1", unary!([3, 4], |g, x| g.softmax(x, 1)?)),
        ("cross_entropy", |rng: &mut ChaCha8Rng| {
            let mut s = Inputs::new(rng);
            let logits = s.normal("logits", &[3, 4]);
            let mut t = vec![0.0; 12];
            for r in 0..3 {
                t[r * 4 + s.rng.random_range(0..4)] = 1.0;
            }
            let target = s.data("target", Tensor::new(vec![3, 4], t)?);
            let y = s.g.softmax_cross_entropy(logits, target)?;
            s.done(y)
        }),
        ("cosine", binary!([4, 3], [3], |g, a, b| g.cosine_rows(a, b)?)),
        ("max", unary!([6], |g, x| g.max(x))),
        ("min", unary!([6], |g, x| g.min(x))),
        ("rescale", unary!([6], |g, x| g.rescale(x))),
        ("smooth_l1", |rng: &mut ChaCha8Rng| {
            let mut s = Inputs::new(rng);
            let t = uniform(s.rng, &[8], -3.0, 3.0);
            let x = s.param("x", t);
            let y = s.g.smooth_l1(x);
            s.done(y)
        }),
        ("sum", unary!([2, 3], |g, x| g.sum(x))),
        ("mean_axis", unary!([2, 3, 4], |g, x| g.mean_axis(x, 1)?)),
        ("reshape", unary!([2, 6], |g, x| g.reshape(x, &[3, 4])?)),
        ("concat", binary!([2, 3], [1, 3], |g, a, b| g.concat(&[a, b, a])?)),
        ("repeat", unary!([2, 2], |g, x| g.repeat(x, 3))),
        ("avg_pool", unary!([2, 4, 4, 2], |g, x| g.avg_pool(x, 2)?)),
        ("pick", unary!([3, 2], |g, x| g.pick(x, 4)?)),
        ("argmax_select", binary!([5], [5, 3], |g, a, b| g.custom(Arc::new(ArgmaxRowSelect { strict: false }), &[a, b])?)),
        ("roi_pool", |rng: &mut ChaCha8Rng| {
            let cfg = NetConfig::micro();
            let anchors = cfg.anchor_set().map_err(|e| DiffError::InvalidArgument(e.to_string()))?.boxes;
            let a = anchors.len();
            let mut s = Inputs::new(rng);
            let f = s.normal("features", &[4, 4, 3]);
            let att = s.normal("attention", &[a]);
            let t = randn(s.rng, &[a, 4]).map(|v| 0.5 * v);
            let off = s.param("offsets", t);
            let y = s.g.custom(Arc::new(RoiPool { anchors: Arc::new(anchors) }), &[f, att, off])?;
            s.done(y)
        }),
        ("mined_bce", |rng: &mut ChaCha8Rng| {
            let mut s = Inputs::new(rng);
            let x = s.normal("logits", &[16]);
            let mut mask = vec![0.0; 16];
            for _ in 0..3 {
                mask[s.rng.random_range(0..16)] = 1.0;
            }
            let m = s.data("mask", Tensor::vector(mask));
            let y = s.g.custom(Arc::new(MinedBce { ratio: NEGATIVE_RATIO }), &[x, m])?;
            s.done(y)
        }),
    ]
}

fn chain(mode: ValidationMode) -> impl Fn(&mut ChaCha8Rng) -> Result<(Graph, Point), DiffError> {
    move |rng| {
        let (a, c) = (6, 4);
        let mut s = Inputs::new(rng);
        let heads = HeadNodes {
            offsets: s.normal("offsets", &[a, 4]),
            c_box: s.normal("c_box", &[a, c]),
            c_global: s.normal("c_global", &[c]),
            attention: s.normal("attention", &[a]),
        };
        let v = build_self_validation(&mut s.g, heads, mode)?;
        let wa = s.g.constant(randn(s.rng, &[a]));
        let wc = s.g.constant(randn(s.rng, &[c]));
        let pa = s.g.mul(v.a_prime, wa)?;
        let pc = s.g.mul(v.c_global_prime, wc)?;
        let (sa, sc) = (s.g.sum(pa), s.g.sum(pc));
        let out = s.g.add(sa, sc)?;
        s.g.mark_output("out", out);
        Ok((s.g, s.point))
    }
}

fn network(kind: ModelKind, mode: ValidationMode, strategy: MatchStrategy) -> impl Fn(&mut ChaCha8Rng) -> Result<(Graph, Point), DiffError> {
    move |rng| {
        let cfg = NetConfig::micro();
        let sim = SimConfig { resolution: (8, 8), clip_len: 3, classes: 3, size: (2, 3), objects: (2, 2), ..SimConfig::default() };
        let seed = rng.random::<u64>();
        let sample = synth_sample(&sim, seed).map_err(|e| DiffError::InvalidArgument(e.to_string()))?;
        let anchors = cfg.anchor_set().map_err(|e| DiffError::InvalidArgument(e.to_string()))?;
        let tg = build_train_graph(&cfg, kind, mode, strategy, &LossWeights::default()).map_err(|e| DiffError::InvalidArgument(e.to_string()))?;
        let mut point: Point = init_params(&tg.net.specs, seed).into_iter().collect();
        // nonzero biases so no unit sits exactly on a relu kink
        for (name, t) in point.iter_mut() {
            if name.ends_with(".b") {
                *t = randn(rng, t.shape()).map(|v| 0.1 * v);
            }
        }
        point.extend(sample_inputs(&sample, &cfg, &anchors, strategy).map_err(|e| DiffError::InvalidArgument(e.to_string()))?);
        let mut graph = tg.net.graph;
        graph.mark_output("out", tg.loss.total);
        Ok((graph, point))
    }
}

/// Runs `build` at `points` random points (redrawing near kinks).
pub fn check_case(
    name: &str,
    build: &dyn Fn(&mut ChaCha8Rng) -> Result<(Graph, Point), DiffError>,
    points: usize,
    base_seed: u64,
    epsilon: f64,
    tolerance: f64,
    max_coords: Option<usize>,
) -> Result<SuiteEntry, DiffError> {
    let mut entry = SuiteEntry { name: name.to_string(), points, redraws: 0, max_abs: 0.0, max_rel: 0.0, pass: true };
    for p in 0..points {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        rng.set_stream(p as u64);
        let mut attempt = 0;
        let (mut graph, point) = loop {
            let (mut g, pt) = build(&mut rng)?;
            g.forward_with(|n| pt.get(n))?;
            if g.kink_margin()? > KINK_MARGIN || attempt >= MAX_REDRAWS {
                break (g, pt);
            }
            attempt += 1;
        };
        entry.redraws += attempt;
        let r = finite_diff_check_sampled(&mut graph, "out", &point, epsilon, tolerance, max_coords, p as u64)?;
        entry.max_abs = entry.max_abs.max(r.max_abs());
        entry.max_rel = entry.max_rel.max(r.max_rel());
        entry.pass &= r.pass;
    }
    Ok(entry)
}

pub struct SuiteOptions {
    pub points: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { points: 100, epsilon: 1e-5, tolerance: 1e-4, seed: 0 }
    }
}

/// Every op, the validation chains, and the micro-network loss.
pub fn run_suite(o: &SuiteOptions) -> Result<SuiteReport, DiffError> {
    let mut entries = Vec::new();
    for (name, build) in op_catalog() {
        entries.push(check_case(&format!("op {name}"), &build, o.points, o.seed, o.epsilon, o.tolerance, None)?);
    }
    let modes = [
        ("full-soft", ValidationMode::new(ValidationKind::FullSoft)),
        ("full-soft x2", ValidationMode::stacked(ValidationKind::FullSoft, 2)),
        ("soft-attn", ValidationMode::new(ValidationKind::SoftAttn)),
        ("half", ValidationMode::new(ValidationKind::Half)),
    ];
    for (name, mode) in modes {
        entries.push(check_case(&format!("chain {name}"), &chain(mode), o.points, o.seed, o.epsilon, o.tolerance, None)?);
    }
    let nets = [
        ("net loss full-soft", ModelKind::Mrnet, ValidationKind::FullSoft, MatchStrategy::OneBest),
        ("net loss full-soft multi", ModelKind::Mrnet, ValidationKind::FullSoft, MatchStrategy::Multi),
        ("net loss soft-attn", ModelKind::Mrnet, ValidationKind::SoftAttn, MatchStrategy::OneBest),
        ("net loss half", ModelKind::Mrnet, ValidationKind::Half, MatchStrategy::OneBest),
        ("net loss none", ModelKind::Mrnet, ValidationKind::None, MatchStrategy::OneBest),
        ("net loss joint", ModelKind::Joint, ValidationKind::None, MatchStrategy::OneBest),
        ("net loss cascade", ModelKind::Cascade, ValidationKind::None, MatchStrategy::OneBest),
    ];
    for (name, kind, mode, strategy) in nets {
        let b = network(kind, mode.into(), strategy);
        entries.push(check_case(name, &b, o.points, o.seed, o.epsilon, o.tolerance, Some(NETWORK_COORDS))?);
    }
    Ok(SuiteReport { entries, epsilon: o.epsilon, tolerance: o.tolerance })
}
