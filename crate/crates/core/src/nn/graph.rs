//! A small reverse-mode tape over [`Tensor`]s.
//!
//! A [`Graph`] is built per sample: every operation appends a node, and
//! [`Graph::backward`] walks the nodes in reverse to accumulate parameter
//! gradients. Parameters are borrowed from a [`ParamStore`] and never copied.

use serde::{Deserialize, Serialize};

use super::ops::{self, ConvGeometry};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Transforms: encoder, decoder, condition networks, hyper transforms.
    Main,
    /// The factorized density of the hyper-latent.
    Entropy,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.groups.push(group);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors
            .iter()
            .map(|t| Tensor::zeros(&t.shape))
            .collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// An operation with a hand-written gradient, for fused loss terms.
pub trait CustomOp: Send + Sync {
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;

    /// Gradient with respect to every input, `None` where no gradient flows.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Input,
    Param(usize),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Softplus(Var),
    Scale(Var, f32),
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(i) => &self.params.tensors[i],
            _ => node
                .value
                .as_ref()
                .expect("non-parameter nodes own a value"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, name: &str) -> Var {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(i)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Var {
        let out = ops::conv3d(self.value(x), self.value(w), self.value(b), geom);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Conv { x, w, b, geom }, ng)
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let out = ops::upsample(self.value(x), factor);
        let ng = self.needs(x);
        self.push(out, Op::Upsample { x, factor }, ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v
                .data
                .iter()
                .map(|&a| if a > 0.0 { a } else { a * slope })
                .collect(),
        };
        let ng = self.needs(x);
        self.push(out, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "add: length mismatch");
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect(),
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "mul: length mismatch");
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = ops::dense(self.value(x), self.value(w), self.value(b));
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Dense { x, w, b }, ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| ops::softplus(a)).collect(),
        };
        let ng = self.needs(x);
        self.push(out, Op::Softplus(x), ng)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a * c).collect(),
        };
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// Contiguous slice of the flattened tensor, reshaped to `shape`.
    pub fn slice(&mut self, x: Var, start: usize, shape: &[usize]) -> Var {
        let len: usize = shape.iter().product();
        let v = self.value(x);
        let out = Tensor {
            shape: shape.to_vec(),
            data: v.data[start..start + len].to_vec(),
        };
        let ng = self.needs(x);
        self.push(out, Op::Slice { x, start, len }, ng)
    }

    pub fn custom(&mut self, op: impl CustomOp + 'static, inputs: &[Var]) -> Var {
        let out = {
            let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
            op.forward(&vals)
        };
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op: Box::new(op),
            },
            ng,
        )
    }

    /// Back-propagates from the scalar `loss` and returns gradients aligned
    /// with the parameter store.
    pub fn backward(&self, loss: Var) -> Vec<Tensor> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads = self.params.zeros_like();
        let seed = Tensor::full(&self.value(loss).shape, 1.0);
        grads[loss.0] = Some(seed);

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {}
                Op::Param(i) => param_grads[*i].add_assign(&g),
                Op::Conv { x, w, b, geom } => {
                    let (dx, dw, db) = ops::conv3d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *geom,
                        self.needs(*x),
                    );
                    if self.needs(*x) {
                        acc(&mut grads, *x, dx);
                    }
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Upsample { x, factor } => {
                    let dx = ops::upsample_backward(&self.value(*x).shape, &g, *factor);
                    acc(&mut grads, *x, dx);
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let data = g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(&gv, &a)| if a > 0.0 { gv } else { gv * slope })
                        .collect();
                    acc(
                        &mut grads,
                        *x,
                        Tensor {
                            shape: xv.shape.clone(),
                            data,
                        },
                    );
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        let mut ga = g.clone();
                        ga.shape = self.value(*a).shape.clone();
                        acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = g;
                        gb.shape = self.value(*b).shape.clone();
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let data = g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
                        acc(
                            &mut grads,
                            *a,
                            Tensor {
                                shape: va.shape.clone(),
                                data,
                            },
                        );
                    }
                    if self.needs(*b) {
                        let data = g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect();
                        acc(
                            &mut grads,
                            *b,
                            Tensor {
                                shape: vb.shape.clone(),
                                data,
                            },
                        );
                    }
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = ops::dense_backward(self.value(*x), self.value(*w), &g);
                    if self.needs(*x) {
                        acc(&mut grads, *x, dx);
                    }
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Softplus(x) => {
                    let xv = self.value(*x);
                    let data = g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(&gv, &a)| gv * ops::sigmoid(a))
                        .collect();
                    acc(
                        &mut grads,
                        *x,
                        Tensor {
                            shape: xv.shape.clone(),
                            data,
                        },
                    );
                }
                Op::Scale(x, c) => {
                    let data = g.data.iter().map(|&gv| gv * c).collect();
                    acc(
                        &mut grads,
                        *x,
                        Tensor {
                            shape: g.shape.clone(),
                            data,
                        },
                    );
                }
                Op::Slice { x, start, len } => {
                    let xv = self.value(*x);
                    let mut full = Tensor::zeros(&xv.shape);
                    full.data[*start..*start + *len].copy_from_slice(&g.data);
                    acc(&mut grads, *x, full);
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let out = node.value.as_ref().unwrap();
                    for (v, dg) in inputs.iter().zip(op.backward(&vals, out, &g)) {
                        if let Some(dg) = dg {
                            if self.needs(*v) {
                                acc(&mut grads, *v, dg);
                            }
                        }
                    }
                }
            }
        }
        param_grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::Padding;

    #[test]
    fn chain_rule_through_small_network() {
        let mut store = ParamStore::default();
        let w = store.push(
            "w",
            Tensor::new(vec![1, 1, 3, 3, 3], vec![0.1; 27]).unwrap(),
            ParamGroup::Main,
        );
        let b = store.push("b", Tensor::scalar(0.2), ParamGroup::Main);
        let geom = ConvGeometry {
            kernel: 3,
            stride: 1,
            pad: 1,
            padding: Padding::Replicate,
        };
        let x0: Vec<f32> = (0..27).map(|i| (i as f32 * 0.37).sin()).collect();
        let run = |store: &ParamStore| -> (f32, Vec<Tensor>) {
            let mut g = Graph::new(store);
            let x = g.input(Tensor::new(vec![1, 3, 3, 3], x0.clone()).unwrap());
            let (wv, bv) = (g.param(w), g.param(b));
            let h = g.conv(x, wv, bv, geom);
            let h = g.leaky_relu(h, 0.1);
            let sq = g.mul(h, h);
            let (ones, zero) = (g_ones(&mut g), g_zero(&mut g));
            let loss = g.dense(sq, ones, zero);
            let val = g.value(loss).data[0];
            (val, g.backward(loss))
        };
        fn g_ones(g: &mut Graph) -> Var {
            g.input(Tensor::full(&[1, 27], 1.0))
        }
        fn g_zero(g: &mut Graph) -> Var {
            g.input(Tensor::zeros(&[1]))
        }
        let (_, grads) = run(&store);
        let eps = 1e-3;
        for i in [0usize, 5, 13] {
            let mut sp = store.clone();
            sp.tensors[w].data[i] += eps;
            let mut sm = store.clone();
            sm.tensors[w].data[i] -= eps;
            let fd = (run(&sp).0 - run(&sm).0) / (2.0 * eps);
            assert!(
                (fd - grads[w].data[i]).abs() < 1e-2 * fd.abs().max(1.0),
                "{fd} vs {}",
                grads[w].data[i]
            );
        }
    }
}
