use ndarray::{ArrayD, ArrayView2, ArrayView4, Axis, Ix2, Ix4, IxDyn, Zip};

use super::{add_assign, stabilize, Conv2d, Linear, Param};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Op {
    Input,
    /// Per-channel `(x - mean) / std` over NCHW input.
    Normalize { mean: Vec<f64>, std: Vec<f64> },
    Conv(Conv2d),
    Linear(Linear),
    Relu,
    Tanh,
    /// NCHW -> NC spatial mean.
    GlobalAvgPool,
    Flatten,
    /// Element-wise sum of two inputs (residual connection).
    Add,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Normalize { .. } => "normalize",
            Op::Conv(_) => "conv2d",
            Op::Linear(_) => "linear",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Flatten => "flatten",
            Op::Add => "add",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<usize>,
}

/// Parameter gradients produced for one `Conv` or `Linear` node.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub weight: ArrayD<f64>,
    pub bias: Option<ArrayD<f64>>,
}

/// Output of [`Graph::backward`]: per-node activation gradients and, when
/// requested, per-node parameter gradients.
#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: Vec<Option<ArrayD<f64>>>,
    pub params: Vec<Option<ParamGrad>>,
}

/// Analytic receptive field of a node, in input pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceptiveField {
    pub size: f64,
    pub jump: f64,
    /// Center of the first output unit.
    pub start: f64,
    /// Covers the whole input (after pooling / dense layers).
    pub global: bool,
}

/// Hook applied to the gradient (or relevance) of one node before it is
/// propagated further towards the input.
pub type NodeHook<'a> = (usize, &'a dyn Fn(&mut ArrayD<f64>));

/// A feed-forward network as a topologically ordered list of nodes.
/// Node 0 is always the input.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: vec![Node {
                name: "input".into(),
                op: Op::Input,
                inputs: vec![],
            }],
        }
    }

    /// Append a node. Inputs must refer to existing nodes.
    pub fn push(&mut self, name: impl Into<String>, op: Op, inputs: &[usize]) -> usize {
        let idx = self.nodes.len();
        assert!(inputs.iter().all(|&i| i < idx), "graph inputs must precede the node");
        let arity = if matches!(op, Op::Add) { 2 } else { 1 };
        assert_eq!(inputs.len(), arity, "wrong number of inputs for {}", op.kind());
        self.nodes.push(Node {
            name: name.into(),
            op,
            inputs: inputs.to_vec(),
        });
        idx
    }

    /// Append a node fed by the previous node.
    pub fn chain(&mut self, name: impl Into<String>, op: Op) -> usize {
        let prev = self.nodes.len() - 1;
        self.push(name, op, &[prev])
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub(crate) fn nodes_mut(&mut self) -> &mut [Node] {
        &mut self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    pub fn output(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// True when every path from the input to the output passes through `idx`,
    /// i.e. no later node reads an activation computed before it.
    pub fn is_cut(&self, idx: usize) -> bool {
        self.nodes[idx + 1..]
            .iter()
            .all(|n| n.inputs.iter().all(|&i| i >= idx))
    }

    pub fn forward(&self, x: ArrayD<f64>) -> Vec<ArrayD<f64>> {
        let mut acts: Vec<ArrayD<f64>> = Vec::with_capacity(self.nodes.len());
        acts.push(x);
        for node in &self.nodes[1..] {
            let out = eval(node, &acts);
            acts.push(out);
        }
        acts
    }

    /// Run the part of the network after cut node `idx`, given its activation.
    pub fn forward_from(&self, idx: usize, act: ArrayD<f64>) -> Result<ArrayD<f64>> {
        if idx >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("node {idx} out of range")));
        }
        if !self.is_cut(idx) {
            return Err(Error::InvalidConceptLayer(self.nodes[idx].name.clone()));
        }
        // Slots before `idx` are never read because `idx` is a cut.
        let mut acts: Vec<ArrayD<f64>> = vec![ArrayD::zeros(IxDyn(&[0])); idx];
        acts.push(act);
        for node in &self.nodes[idx + 1..] {
            let out = eval(node, &acts);
            acts.push(out);
        }
        Ok(acts.pop().unwrap())
    }

    /// Reverse-mode pass from the output gradient. `acts` must come from
    /// [`Graph::forward`] on the same parameters.
    pub fn backward(
        &self,
        acts: &[ArrayD<f64>],
        grad_out: ArrayD<f64>,
        hook: Option<NodeHook<'_>>,
        with_params: bool,
    ) -> Backward {
        let n = self.nodes.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; n];
        let mut params: Vec<Option<ParamGrad>> = vec![None; n];
        grads[n - 1] = Some(grad_out);
        for idx in (1..n).rev() {
            let Some(mut g) = grads[idx].take() else { continue };
            if let Some((h, f)) = hook {
                if h == idx {
                    f(&mut g);
                }
            }
            let node = &self.nodes[idx];
            if with_params {
                params[idx] = param_grad(node, acts, &g);
            }
            for (slot, gi) in node.inputs.iter().zip(input_grads(node, acts, &g)) {
                add_assign(&mut grads[*slot], gi);
            }
            grads[idx] = Some(g);
        }
        Backward { grads, params }
    }

    /// Epsilon-rule relevance propagation starting from `relevance_out` at the
    /// output. Stops once node `stop_at` has received all of its relevance.
    pub fn lrp(
        &self,
        acts: &[ArrayD<f64>],
        relevance_out: ArrayD<f64>,
        eps: f64,
        stop_at: Option<usize>,
        hook: Option<NodeHook<'_>>,
    ) -> Result<Vec<Option<ArrayD<f64>>>> {
        let n = self.nodes.len();
        let mut rel: Vec<Option<ArrayD<f64>>> = vec![None; n];
        rel[n - 1] = Some(relevance_out);
        for idx in (1..n).rev() {
            let Some(mut r) = rel[idx].take() else { continue };
            if let Some((h, f)) = hook {
                if h == idx {
                    f(&mut r);
                }
            }
            if stop_at == Some(idx) {
                rel[idx] = Some(r);
                break;
            }
            let node = &self.nodes[idx];
            for (slot, ri) in node.inputs.iter().zip(lrp_rule(idx, node, acts, &r, eps)?) {
                add_assign(&mut rel[*slot], ri);
            }
            rel[idx] = Some(r);
        }
        Ok(rel)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            match &mut node.op {
                Op::Conv(c) => {
                    out.push(&mut c.weight);
                    if let Some(b) = c.bias.as_mut() {
                        out.push(b);
                    }
                }
                Op::Linear(l) => out.extend(l.params_mut()),
                _ => {}
            }
        }
        out
    }

    pub fn accumulate_param_grads(&mut self, grads: &[Option<ParamGrad>]) {
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            let (w, b) = match &mut node.op {
                Op::Conv(c) => (&mut c.weight, c.bias.as_mut()),
                Op::Linear(l) => (&mut l.weight, l.bias.as_mut()),
                _ => continue,
            };
            w.grad += &g.weight;
            if let (Some(b), Some(gb)) = (b, g.bias.as_ref()) {
                b.grad += gb;
            }
        }
    }

    /// Named parameter tensors, `<node>.weight` / `<node>.bias`.
    pub fn state(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let (w, b) = match &node.op {
                Op::Conv(c) => (&c.weight, c.bias.as_ref()),
                Op::Linear(l) => (&l.weight, l.bias.as_ref()),
                _ => continue,
            };
            out.push((format!("{}.weight", node.name), w.value.clone()));
            if let Some(b) = b {
                out.push((format!("{}.bias", node.name), b.value.clone()));
            }
        }
        out
    }

    pub fn load_state(&mut self, lookup: &dyn Fn(&str) -> Option<ArrayD<f64>>) -> Result<()> {
        for node in &mut self.nodes {
            let (w, b) = match &mut node.op {
                Op::Conv(c) => (&mut c.weight, c.bias.as_mut()),
                Op::Linear(l) => (&mut l.weight, l.bias.as_mut()),
                _ => continue,
            };
            let load = |p: &mut Param, key: String| -> Result<()> {
                let v = lookup(&key).ok_or_else(|| Error::Format(format!("missing tensor `{key}`")))?;
                crate::error::check_shape(p.shape(), v.shape())?;
                p.set_value(v);
                Ok(())
            };
            load(w, format!("{}.weight", node.name))?;
            if let Some(b) = b {
                load(b, format!("{}.bias", node.name))?;
            }
        }
        Ok(())
    }

    pub fn receptive_field(&self, idx: usize) -> ReceptiveField {
        let mut rf: Vec<ReceptiveField> = Vec::with_capacity(idx + 1);
        for node in &self.nodes[..=idx] {
            let r = match &node.op {
                Op::Input => ReceptiveField {
                    size: 1.0,
                    jump: 1.0,
                    start: 0.5,
                    global: false,
                },
                Op::Conv(c) => {
                    let p = rf[node.inputs[0]];
                    let k = c.kernel() as f64;
                    ReceptiveField {
                        size: p.size + (k - 1.0) * p.jump,
                        jump: p.jump * c.stride as f64,
                        start: p.start + ((k - 1.0) / 2.0 - c.padding as f64) * p.jump,
                        global: p.global,
                    }
                }
                Op::Add => {
                    let (a, b) = (rf[node.inputs[0]], rf[node.inputs[1]]);
                    if a.size >= b.size {
                        ReceptiveField { global: a.global || b.global, ..a }
                    } else {
                        ReceptiveField { global: a.global || b.global, ..b }
                    }
                }
                Op::GlobalAvgPool | Op::Linear(_) | Op::Flatten => ReceptiveField {
                    global: true,
                    ..rf[node.inputs[0]]
                },
                Op::Normalize { .. } | Op::Relu | Op::Tanh => rf[node.inputs[0]],
            };
            rf.push(r);
        }
        rf[idx]
    }
}

fn view4(a: &ArrayD<f64>) -> ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("expected a 4-D tensor")
}

fn view2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected a 2-D tensor")
}

fn eval(node: &Node, acts: &[ArrayD<f64>]) -> ArrayD<f64> {
    let x = &acts[node.inputs[0]];
    match &node.op {
        Op::Input => x.clone(),
        Op::Normalize { mean, std } => {
            let mut y = x.clone();
            for (c, mut ch) in y.axis_iter_mut(Axis(1)).enumerate() {
                let (m, s) = (mean[c], std[c]);
                ch.mapv_inplace(|v| (v - m) / s);
            }
            y
        }
        Op::Conv(c) => c.forward(view4(x)).into_dyn(),
        Op::Linear(l) => l.forward(view2(x)).into_dyn(),
        Op::Relu => x.mapv(|v| v.max(0.0)),
        Op::Tanh => x.mapv(f64::tanh),
        Op::GlobalAvgPool => {
            let x4 = view4(x);
            let (n, c, h, w) = x4.dim();
            let flat = x4.into_shape_with_order((n, c, h * w)).unwrap();
            flat.mean_axis(Axis(2)).unwrap().into_dyn()
        }
        Op::Flatten => {
            let n = x.shape()[0];
            let rest = x.len() / n.max(1);
            x.as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&[n, rest]))
                .unwrap()
        }
        Op::Add => x + &acts[node.inputs[1]],
    }
}

fn input_grads(node: &Node, acts: &[ArrayD<f64>], g: &ArrayD<f64>) -> Vec<ArrayD<f64>> {
    let x = &acts[node.inputs[0]];
    match &node.op {
        Op::Input => vec![],
        Op::Normalize { std, .. } => {
            let mut gx = g.clone();
            for (c, mut ch) in gx.axis_iter_mut(Axis(1)).enumerate() {
                let s = std[c];
                ch.mapv_inplace(|v| v / s);
            }
            vec![gx]
        }
        Op::Conv(c) => {
            let s = x.shape();
            vec![c.backward_input(view4(g), (s[2], s[3])).into_dyn()]
        }
        Op::Linear(l) => vec![l.backward_input(view2(g)).into_dyn()],
        Op::Relu => {
            let mut gx = g.clone();
            Zip::from(&mut gx).and(x).for_each(|gv, &xv| {
                if xv <= 0.0 {
                    *gv = 0.0
                }
            });
            vec![gx]
        }
        Op::Tanh => {
            let mut gx = g.clone();
            Zip::from(&mut gx).and(x).for_each(|gv, &xv| {
                let t = xv.tanh();
                *gv *= 1.0 - t * t;
            });
            vec![gx]
        }
        Op::GlobalAvgPool => vec![spread_pool(x, g, None)],
        Op::Flatten => vec![g.clone().into_shape_with_order(x.raw_dim()).unwrap()],
        Op::Add => vec![g.clone(), g.clone()],
    }
}

/// Distribute an `(N, C)` signal over the `(N, C, H, W)` input of a mean pool,
/// optionally weighting each position by the input value.
fn spread_pool(x: &ArrayD<f64>, g: &ArrayD<f64>, weight_by_input: Option<()>) -> ArrayD<f64> {
    let x4 = view4(x);
    let (n, c, h, w) = x4.dim();
    let area = (h * w) as f64;
    let g2 = view2(g);
    let mut out = ndarray::Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let v = g2[[i, ch]] / area;
            let mut dst = out.slice_mut(ndarray::s![i, ch, .., ..]);
            match weight_by_input {
                None => dst.fill(v),
                Some(()) => {
                    Zip::from(&mut dst)
                        .and(&x4.slice(ndarray::s![i, ch, .., ..]))
                        .for_each(|d, &xv| *d = xv * v);
                }
            }
        }
    }
    out.into_dyn()
}

fn param_grad(node: &Node, acts: &[ArrayD<f64>], g: &ArrayD<f64>) -> Option<ParamGrad> {
    let x = &acts[node.inputs[0]];
    match &node.op {
        Op::Conv(c) => {
            let (w, b) = c.param_grads(view4(x), view4(g));
            Some(ParamGrad {
                weight: w.into_dyn(),
                bias: b.map(|b| b.into_dyn()),
            })
        }
        Op::Linear(l) => {
            let (w, b) = l.param_grads(view2(x), view2(g));
            Some(ParamGrad {
                weight: w.into_dyn(),
                bias: b.map(|b| b.into_dyn()),
            })
        }
        _ => None,
    }
}

fn lrp_rule(idx: usize, node: &Node, acts: &[ArrayD<f64>], r: &ArrayD<f64>, eps: f64) -> Result<Vec<ArrayD<f64>>> {
    let x = &acts[node.inputs[0]];
    // The node's own output is the pre-activation `z` of the linear rules.
    let z = &acts[idx];
    let ratio = |z: &ArrayD<f64>| {
        let mut s = r.clone();
        Zip::from(&mut s).and(z).for_each(|sv, &zv| *sv /= stabilize(zv, eps));
        s
    };
    Ok(match &node.op {
        Op::Input => vec![],
        // Pointwise maps pass relevance through unchanged.
        Op::Normalize { .. } | Op::Relu => vec![r.clone()],
        Op::Flatten => vec![r.clone().into_shape_with_order(x.raw_dim()).unwrap()],
        Op::Conv(c) => {
            let s = ratio(z);
            let sh = x.shape();
            let back = c.backward_input(view4(&s), (sh[2], sh[3])).into_dyn();
            vec![x * &back]
        }
        Op::Linear(l) => {
            let s = ratio(z);
            let back = l.backward_input(view2(&s)).into_dyn();
            vec![x * &back]
        }
        Op::GlobalAvgPool => {
            let s = ratio(z);
            vec![spread_pool(x, &s, Some(()))]
        }
        Op::Add => {
            let s = ratio(z);
            let b = &acts[node.inputs[1]];
            vec![x * &s, b * &s]
        }
        Op::Tanh => {
            return Err(Error::UnsupportedLayer {
                name: node.name.clone(),
                kind: node.op.kind(),
            })
        }
    })
}
