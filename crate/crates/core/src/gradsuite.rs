//! Finite-difference checks over every differentiable component, small
//! enough to run in seconds. Shared by the `grad-check` command and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flow::{layers, ActNorm, Coupling, FlowConfig, FlowModel, Inv1x1};
use crate::losses::{bimal_graph, ce_graph, entropy_graph, tau_graph, total_objective, LossWeights, TargetTerm, TauConfig, TauForm};
use crate::numerics::{finite_diff_check, finite_diff_check_module, Graph, Module, Param, Primitive, Tensor, Var};
use crate::trainer::SegNet;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub component: String,
    pub max_rel_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Non-uniform weights so each output coordinate moves the scalar differently.
fn weighted_sum(g: &mut Graph, v: Var) -> Result<Var> {
    let n = g.value(v).len();
    let w = Tensor::new(
        g.shape(v).to_vec(),
        (0..n).map(|i| 0.3 + 0.1 * ((i * 7) % 11) as f64).collect(),
    )?;
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn check_fn(mut f: impl FnMut(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<f64> {
    finite_diff_check(
        |g, v| {
            let out = f(g, v)?;
            weighted_sum(g, out)
        },
        inputs,
        EPS,
    )
}

/// Lets a single flow layer go through the module check.
struct Layer<T>(T);

macro_rules! layer_module {
    ($t:ty) => {
        impl Module for Layer<$t> {
            fn params(&self) -> Vec<&Param> {
                self.0.params()
            }
            fn params_mut(&mut self) -> Vec<&mut Param> {
                self.0.params_mut()
            }
        }
    };
}
layer_module!(ActNorm);
layer_module!(Inv1x1);
layer_module!(Coupling);

fn layer_output(g: &mut Graph, out: (Var, Var)) -> Result<Var> {
    let s = weighted_sum(g, out.0)?;
    g.add(s, out.1)
}

/// Checks one layer with respect to its input and its parameters; the
/// scalar is a weighted sum of the output plus the log-determinant.
type LayerForward<T> = fn(&T, &mut Graph, Var, bool) -> Result<(Var, Var)>;

fn check_layer<T>(
    name: &str,
    layer: T,
    x: &Tensor,
    fwd: LayerForward<T>,
    out: &mut Vec<GradReport>,
) -> Result<()>
where
    Layer<T>: Module,
{
    let mut wrapped = Layer(layer);
    let e_in = finite_diff_check(
        |g, v| {
            let r = fwd(&wrapped.0, g, v[0], false)?;
            layer_output(g, r)
        },
        std::slice::from_ref(x),
        EPS,
    )?;
    out.push(report(format!("flow.{name}.input"), e_in));
    let e_p = finite_diff_check_module(
        &mut wrapped,
        |g: &mut Graph, m: &Layer<T>| {
            let v = g.constant(x.clone());
            let r = fwd(&m.0, g, v, true)?;
            layer_output(g, r)
        },
        EPS,
    )?;
    out.push(report(format!("flow.{name}.params"), e_p));
    Ok(())
}

fn report(component: impl Into<String>, max_rel_error: f64) -> GradReport {
    GradReport {
        component: component.into(),
        max_rel_error,
    }
}

/// Small flow over `4×4×6` maps. With `jitter == 0` it is the exact
/// identity map (zero-initialized couplings and mixes); otherwise
/// parameters receive Gaussian noise of that std.
pub fn check_flow(jitter: f64, seed: u64) -> Result<FlowModel> {
    let cfg = FlowConfig {
        height: 4,
        width: 4,
        channels: 6,
        num_scales: 2,
        steps_per_scale: 1,
        hidden: 4,
        scale_cap: 2.0,
    };
    let mut flow = FlowModel::identity(cfg)?;
    if jitter > 0.0 {
        flow.jitter(seed, jitter);
    }
    Ok(flow)
}

/// Runs every check and returns one report per component, in a fixed order.
pub fn gradient_suite(flow: &FlowModel, seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let a = uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let b = uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let pos = uniform(&[2, 3], 0.5, 2.0, &mut rng);
    let row = uniform(&[3], -1.0, 1.0, &mut rng);
    let primitives: Vec<(&str, Primitive, Vec<Tensor>)> = vec![
        ("add", Primitive::Add, vec![a.clone(), b.clone()]),
        ("sub", Primitive::Sub, vec![a.clone(), b.clone()]),
        ("mul", Primitive::Mul, vec![a.clone(), b.clone()]),
        ("div", Primitive::Div, vec![a.clone(), pos.clone()]),
        ("neg", Primitive::Neg, vec![a.clone()]),
        ("exp", Primitive::Exp, vec![a.clone()]),
        ("log", Primitive::Log, vec![pos]),
        ("tanh", Primitive::Tanh, vec![a.clone()]),
        ("sum", Primitive::Sum, vec![a.clone()]),
        ("mean", Primitive::Mean, vec![a.clone()]),
        ("broadcast", Primitive::Broadcast(vec![4, 3]), vec![row]),
        ("reshape", Primitive::Reshape(vec![3, 2]), vec![a.clone()]),
        ("slice", Primitive::Slice(vec![0..2, 1..3]), vec![a.clone()]),
        ("concat", Primitive::Concat { axis: 1 }, vec![a, b]),
    ];
    for (name, op, inputs) in primitives {
        let e = check_fn(|g, v| g.apply_primitive(op.clone(), v), &inputs)?;
        out.push(report(format!("primitive.{name}"), e));
    }

    let x = uniform(&[2, 2, 3], -1.0, 1.0, &mut rng);
    let w = uniform(&[3, 3], -1.0, 1.0, &mut rng);
    let img = uniform(&[2, 4, 4, 2], -1.0, 1.0, &mut rng);
    let kernel = uniform(&[3, 3, 2, 3], -0.5, 0.5, &mut rng);
    let bias = uniform(&[3], -0.5, 0.5, &mut rng);
    out.push(report("op.matmul_channels", check_fn(|g, v| g.matmul_channels(v[0], v[1]), &[w, x.clone()])?));
    out.push(report("op.log_softmax", check_fn(|g, v| g.log_softmax_channels(v[0]), std::slice::from_ref(&x))?));
    out.push(report("op.permute", check_fn(|g, v| g.permute(v[0], &[2, 0, 1]), std::slice::from_ref(&x))?));
    out.push(report("op.sum_last", check_fn(|g, v| g.sum_last(v[0]), std::slice::from_ref(&x))?));
    out.push(report("op.scale", check_fn(|g, v| Ok(g.scale(v[0], -2.5)), std::slice::from_ref(&x))?));
    out.push(report("op.add_scalar", check_fn(|g, v| Ok(g.add_scalar(v[0], 0.7)), &[x])?));
    out.push(report(
        "op.conv2d",
        check_fn(|g, v| g.conv2d(v[0], v[1], v[2]), &[img, kernel, bias])?,
    ));

    let fx = uniform(&[2, 4, 4, 6], -1.0, 1.0, &mut rng);
    let mut act = ActNorm::new("actnorm", 6);
    act.log_scale.value = uniform(&[6], -0.5, 0.5, &mut rng);
    act.bias.value = uniform(&[6], -0.5, 0.5, &mut rng);
    act.initialized = true;
    check_layer("actnorm", act, &fx, ActNorm::forward, &mut out)?;
    check_layer("inv1x1", Inv1x1::random("inv1x1", 6, &mut rng), &fx, Inv1x1::forward, &mut out)?;
    let mut coupling = Coupling::new("coupling", 6, 4, 2.0, &mut rng);
    coupling.w2.value = uniform(coupling.w2.value.shape(), -0.3, 0.3, &mut rng);
    coupling.b2.value = uniform(coupling.b2.value.shape(), -0.3, 0.3, &mut rng);
    check_layer("coupling", coupling, &fx, Coupling::forward, &mut out)?;
    out.push(report("flow.squeeze", check_fn(|g, v| layers::squeeze(g, v[0]), std::slice::from_ref(&fx))?));

    let cfg = &flow.config;
    let shape = [1, cfg.height, cfg.width, cfg.channels];
    let y = uniform(&shape, 0.0, 1.0, &mut rng);
    out.push(report(
        "flow.nll.input",
        finite_diff_check(|g, v| flow.nll_graph(g, v[0], false), std::slice::from_ref(&y), EPS)?,
    ));
    let mut model = flow.clone();
    out.push(report(
        "flow.nll.params",
        finite_diff_check_module(
            &mut model,
            |g: &mut Graph, m: &FlowModel| {
                let v = g.constant(y.clone());
                m.nll_graph(g, v, true)
            },
            EPS,
        )?,
    ));

    let (h, wd) = (cfg.height, cfg.width);
    let classes = cfg.channels;
    let logits = uniform(&[2, h, wd, classes], -2.0, 2.0, &mut rng);
    let labels: Vec<u8> = (0..2 * h * wd).map(|_| rng.random_range(0..classes) as u8).collect();
    let image = uniform(&[2, h, wd, 3], 0.0, 1.0, &mut rng);
    // A wide colour kernel keeps the smoothness weights well away from 0.
    let tau_for = |form| TauConfig {
        sigma1: 0.3,
        form,
        ..TauConfig::default()
    };
    let lp = |g: &mut Graph, v: Var| g.log_softmax_channels(v);
    out.push(report(
        "loss.ce",
        finite_diff_check(
            |g, v| {
                let l = lp(g, v[0])?;
                ce_graph(g, l, &labels)
            },
            std::slice::from_ref(&logits),
            EPS,
        )?,
    ));
    out.push(report(
        "loss.entropy",
        finite_diff_check(
            |g, v| {
                let l = lp(g, v[0])?;
                entropy_graph(g, l)
            },
            std::slice::from_ref(&logits),
            EPS,
        )?,
    ));
    for (name, form) in [("tau_bilateral", TauForm::Bilateral), ("tau_literal", TauForm::Literal)] {
        let tau = tau_for(form);
        let e = finite_diff_check(
            |g, v| {
                let l = lp(g, v[0])?;
                let p = g.exp(l);
                tau_graph(g, p, &image, &tau)
            },
            std::slice::from_ref(&logits),
            EPS,
        )?;
        out.push(report(format!("loss.{name}"), e));
    }
    let tau = tau_for(TauForm::Bilateral);
    out.push(report(
        "loss.bimal",
        finite_diff_check(
            |g, v| {
                let l = lp(g, v[0])?;
                let p = g.exp(l);
                bimal_graph(g, flow, p, &image, &tau, 1.0)
            },
            std::slice::from_ref(&logits),
            EPS,
        )?,
    ));
    let tgt = uniform(&[2, h, wd, classes], -2.0, 2.0, &mut rng);
    let weights = LossWeights {
        lambda_t: 0.5,
        lambda_tau: 1.0,
    };
    for (name, term) in [
        ("total_bimal", TargetTerm::Bimal { flow, tau: &tau }),
        ("total_entmin", TargetTerm::Entropy),
    ] {
        let e = finite_diff_check(
            |g, v| {
                let ls = lp(g, v[0])?;
                let lt = lp(g, v[1])?;
                total_objective(g, ls, &labels, lt, &image, term, &weights)
            },
            &[logits.clone(), tgt.clone()],
            EPS,
        )?;
        out.push(report(format!("loss.{name}"), e));
    }

    let mut seg = SegNet::new(&[3, 3, classes], seed)?;
    let simg = uniform(&[1, h, wd, 3], 0.0, 1.0, &mut rng);
    let slab = &labels[..h * wd];
    out.push(report(
        "segnet.params",
        finite_diff_check_module(
            &mut seg,
            |g: &mut Graph, m: &SegNet| {
                let v = g.constant(simg.clone());
                let l = m.forward_graph(g, v, true)?;
                ce_graph(g, l, slab)
            },
            EPS,
        )?,
    ));
    Ok(out)
}
