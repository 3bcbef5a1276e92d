//! Evaluation backends for network code written once against [`Graph`].
//!
//! * [`DualGraph`] evaluates values together with forward-mode tangents
//!   (Jacobian-vector products). Parameters carry no tangent.
//! * [`Tape`] records a Wengert list and runs reverse-mode accumulation into
//!   parameter gradients.

use std::borrow::Cow;

use super::kernels as k;
use super::{Grads, ParamId, ParamStore, Tensor};

pub trait Graph {
    type Var: Clone;

    fn param(&mut self, id: ParamId) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor;

    fn conv2d(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var) -> Self::Var;
    fn linear(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var) -> Self::Var;
    fn silu(&mut self, x: &Self::Var) -> Self::Var;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    fn film(&mut self, x: &Self::Var, scale: &Self::Var, shift: &Self::Var) -> Self::Var;
    fn avg_pool(&mut self, x: &Self::Var, k: usize) -> Self::Var;
    fn upsample2(&mut self, x: &Self::Var) -> Self::Var;
    fn concat(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
    fn mean_hw(&mut self, x: &Self::Var) -> Self::Var;
}

/// Value plus optional tangent. `None` means an identically-zero tangent.
#[derive(Clone, Debug)]
pub struct Dual<'p> {
    pub value: Cow<'p, Tensor>,
    pub tangent: Option<Tensor>,
}

impl Dual<'_> {
    pub fn into_parts(self) -> (Tensor, Option<Tensor>) {
        (self.value.into_owned(), self.tangent)
    }
}

pub struct DualGraph<'p> {
    params: &'p ParamStore,
}

impl<'p> DualGraph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params }
    }

    pub fn input(&self, value: Tensor, tangent: Option<Tensor>) -> Dual<'p> {
        if let Some(t) = &tangent {
            assert_eq!(t.shape(), value.shape(), "tangent shape mismatch");
        }
        Dual {
            value: Cow::Owned(value),
            tangent,
        }
    }
}

fn add_opt(a: Option<Tensor>, b: Option<Tensor>) -> Option<Tensor> {
    match (a, b) {
        (Some(mut a), Some(b)) => {
            a.add_assign(&b);
            Some(a)
        }
        (a, None) => a,
        (None, b) => b,
    }
}

impl<'p> Graph for DualGraph<'p> {
    type Var = Dual<'p>;

    fn param(&mut self, id: ParamId) -> Dual<'p> {
        Dual {
            value: Cow::Borrowed(self.params.get(id)),
            tangent: None,
        }
    }

    fn value<'a>(&'a self, v: &'a Dual<'p>) -> &'a Tensor {
        &v.value
    }

    fn conv2d(&mut self, x: &Dual<'p>, w: &Dual<'p>, b: &Dual<'p>) -> Dual<'p> {
        debug_assert!(w.tangent.is_none() && b.tangent.is_none());
        Dual {
            value: Cow::Owned(k::conv2d(&x.value, &w.value, Some(&b.value))),
            tangent: x.tangent.as_ref().map(|dx| k::conv2d(dx, &w.value, None)),
        }
    }

    fn linear(&mut self, x: &Dual<'p>, w: &Dual<'p>, b: &Dual<'p>) -> Dual<'p> {
        debug_assert!(w.tangent.is_none() && b.tangent.is_none());
        Dual {
            value: Cow::Owned(k::linear(&x.value, &w.value, Some(&b.value))),
            tangent: x.tangent.as_ref().map(|dx| k::linear(dx, &w.value, None)),
        }
    }

    fn silu(&mut self, x: &Dual<'p>) -> Dual<'p> {
        Dual {
            value: Cow::Owned(k::silu(&x.value)),
            tangent: x.tangent.as_ref().map(|dx| k::silu_grad(&x.value, dx)),
        }
    }

    fn add(&mut self, a: &Dual<'p>, b: &Dual<'p>) -> Dual<'p> {
        let mut v = a.value.clone().into_owned();
        v.add_assign(&b.value);
        Dual {
            value: Cow::Owned(v),
            tangent: add_opt(a.tangent.clone(), b.tangent.clone()),
        }
    }

    fn film(&mut self, x: &Dual<'p>, scale: &Dual<'p>, shift: &Dual<'p>) -> Dual<'p> {
        Dual {
            value: Cow::Owned(k::film(&x.value, &scale.value, &shift.value)),
            tangent: k::film_tangent(
                &x.value,
                x.tangent.as_ref(),
                &scale.value,
                scale.tangent.as_ref(),
                shift.tangent.as_ref(),
            ),
        }
    }

    fn avg_pool(&mut self, x: &Dual<'p>, kk: usize) -> Dual<'p> {
        Dual {
            value: Cow::Owned(k::avg_pool(&x.value, kk)),
            tangent: x.tangent.as_ref().map(|d| k::avg_pool(d, kk)),
        }
    }

    fn upsample2(&mut self, x: &Dual<'p>) -> Dual<'p> {
        Dual {
            value: Cow::Owned(k::upsample2(&x.value)),
            tangent: x.tangent.as_ref().map(k::upsample2),
        }
    }

    fn concat(&mut self, a: &Dual<'p>, b: &Dual<'p>) -> Dual<'p> {
        let tangent = match (&a.tangent, &b.tangent) {
            (None, None) => None,
            (da, db) => {
                let za;
                let zb;
                let da = match da {
                    Some(t) => t,
                    None => {
                        za = Tensor::zeros(a.value.shape());
                        &za
                    }
                };
                let db = match db {
                    Some(t) => t,
                    None => {
                        zb = Tensor::zeros(b.value.shape());
                        &zb
                    }
                };
                Some(k::concat(da, db))
            }
        };
        Dual {
            value: Cow::Owned(k::concat(&a.value, &b.value)),
            tangent,
        }
    }

    fn mean_hw(&mut self, x: &Dual<'p>) -> Dual<'p> {
        Dual {
            value: Cow::Owned(k::mean_hw(&x.value)),
            tangent: x.tangent.as_ref().map(k::mean_hw),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv { x: NodeId, w: NodeId, b: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Silu(NodeId),
    Add(NodeId, NodeId),
    Film { x: NodeId, scale: NodeId, shift: NodeId },
    AvgPool(NodeId, usize),
    Upsample2(NodeId),
    Concat(NodeId, NodeId),
    MeanHw(NodeId),
}

struct Node {
    op: Op,
    /// `None` for parameters; their values live in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(p), _) => self.params.get(*p),
            (_, Some(v)) => v,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    /// Reverse sweep seeded with `dL/d(node)` for each given node; parameter
    /// gradients are accumulated into `grads`.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>, grads: &mut Grads) {
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.val(id).shape(), "seed shape mismatch");
            accumulate(&mut adj, id, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match node.op {
                Op::Input => {}
                Op::Param(p) => grads.get_mut(p).add_assign(&g),
                Op::Conv { x, w, b } => {
                    let need_x = self.nodes[x.0].requires_grad;
                    let mut gw = Tensor::zeros(self.val(w).shape());
                    let mut gb = Tensor::zeros(self.val(b).shape());
                    let gx = k::conv2d_backward(
                        self.val(x),
                        self.val(w),
                        &g,
                        need_x,
                        Some(&mut gw),
                        Some(&mut gb),
                    );
                    accumulate(&mut adj, w, gw);
                    accumulate(&mut adj, b, gb);
                    if let Some(gx) = gx {
                        accumulate(&mut adj, x, gx);
                    }
                }
                Op::Linear { x, w, b } => {
                    let need_x = self.nodes[x.0].requires_grad;
                    let mut gw = Tensor::zeros(self.val(w).shape());
                    let mut gb = Tensor::zeros(self.val(b).shape());
                    let gx = k::linear_backward(
                        self.val(x),
                        self.val(w),
                        &g,
                        need_x,
                        Some(&mut gw),
                        Some(&mut gb),
                    );
                    accumulate(&mut adj, w, gw);
                    accumulate(&mut adj, b, gb);
                    if let Some(gx) = gx {
                        accumulate(&mut adj, x, gx);
                    }
                }
                Op::Silu(x) => accumulate(&mut adj, x, k::silu_grad(self.val(x), &g)),
                Op::Add(a, b) => {
                    accumulate(&mut adj, b, g.clone());
                    accumulate(&mut adj, a, g);
                }
                Op::Film { x, scale, shift } => {
                    let (gx, gs, gb) = k::film_backward(self.val(x), self.val(scale), &g);
                    accumulate(&mut adj, x, gx);
                    accumulate(&mut adj, scale, gs);
                    accumulate(&mut adj, shift, gb);
                }
                Op::AvgPool(x, kk) => {
                    let gx = k::avg_pool_backward(self.val(x).shape(), kk, &g);
                    accumulate(&mut adj, x, gx);
                }
                Op::Upsample2(x) => accumulate(&mut adj, x, k::upsample2_backward(&g)),
                Op::Concat(a, b) => {
                    let ca = self.val(a).shape()[1];
                    let (ga, gb) = k::concat_backward(&g, ca);
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
                Op::MeanHw(x) => {
                    let gx = k::mean_hw_backward(self.val(x).shape(), &g);
                    accumulate(&mut adj, x, gx);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut adj[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Graph for Tape<'_> {
    type Var = NodeId;

    fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor {
        self.val(*v)
    }

    fn conv2d(&mut self, x: &NodeId, w: &NodeId, b: &NodeId) -> NodeId {
        let y = k::conv2d(self.val(*x), self.val(*w), Some(self.val(*b)));
        let rg = self.rg(&[*x, *w, *b]);
        self.push(Op::Conv { x: *x, w: *w, b: *b }, y, rg)
    }

    fn linear(&mut self, x: &NodeId, w: &NodeId, b: &NodeId) -> NodeId {
        let y = k::linear(self.val(*x), self.val(*w), Some(self.val(*b)));
        let rg = self.rg(&[*x, *w, *b]);
        self.push(Op::Linear { x: *x, w: *w, b: *b }, y, rg)
    }

    fn silu(&mut self, x: &NodeId) -> NodeId {
        let y = k::silu(self.val(*x));
        let rg = self.rg(&[*x]);
        self.push(Op::Silu(*x), y, rg)
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let mut y = self.val(*a).clone();
        y.add_assign(self.val(*b));
        let rg = self.rg(&[*a, *b]);
        self.push(Op::Add(*a, *b), y, rg)
    }

    fn film(&mut self, x: &NodeId, scale: &NodeId, shift: &NodeId) -> NodeId {
        let y = k::film(self.val(*x), self.val(*scale), self.val(*shift));
        let rg = self.rg(&[*x, *scale, *shift]);
        self.push(
            Op::Film {
                x: *x,
                scale: *scale,
                shift: *shift,
            },
            y,
            rg,
        )
    }

    fn avg_pool(&mut self, x: &NodeId, kk: usize) -> NodeId {
        let y = k::avg_pool(self.val(*x), kk);
        let rg = self.rg(&[*x]);
        self.push(Op::AvgPool(*x, kk), y, rg)
    }

    fn upsample2(&mut self, x: &NodeId) -> NodeId {
        let y = k::upsample2(self.val(*x));
        let rg = self.rg(&[*x]);
        self.push(Op::Upsample2(*x), y, rg)
    }

    fn concat(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let y = k::concat(self.val(*a), self.val(*b));
        let rg = self.rg(&[*a, *b]);
        self.push(Op::Concat(*a, *b), y, rg)
    }

    fn mean_hw(&mut self, x: &NodeId) -> NodeId {
        let y = k::mean_hw(self.val(*x));
        let rg = self.rg(&[*x]);
        self.push(Op::MeanHw(*x), y, rg)
    }
}
