use std::collections::HashMap;

use super::attention::{block_attention, block_attention_backward, BlockGrid};
use super::graph::Graph;
use super::kernels;
use super::params::{ParamId, ParamStore};
use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Var, groups: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, g: Var, b: Var, stats: Vec<(f64, f64)> },
    MaxPool { x: Var, argmax: Vec<usize> },
    Pad(Var),
    Crop(Var),
    Upsample(Var),
    Shuffle(Var, usize),
    Attention { q: Var, k: Var, v: Var, grid: BlockGrid, heads: usize },
    Gated { logits: Vec<Var>, values: Vec<Var>, weights: Vec<Tensor> },
    /// Scalar produced outside the tape, with its precomputed gradient.
    Loss { x: Var, grad: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode recorder. Every operation stores its output; backward walks
/// the record once in reverse.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: &Var) -> &Tensor {
        self.val(*v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn scale(&mut self, x: &Var, s: f64) -> Var {
        let v = self.val(*x) * s;
        self.push(v, Op::Scale(*x, s))
    }

    /// Records an externally evaluated scalar function of `x`.
    pub fn scalar_loss(&mut self, x: &Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(grad.shape(), self.val(*x).shape());
        self.push(Tensor::from_elem(ndarray::IxDyn(&[]), value), Op::Loss { x: *x, grad })
    }

    pub fn scalar(&self, v: &Var) -> f64 {
        let t = self.val(*v);
        assert_eq!(t.len(), 1, "not a scalar");
        t.iter().copied().next().unwrap()
    }

    /// Back-propagates from `root`, seeding it with ones.
    pub fn backward(&self, root: &Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.val(*root).raw_dim()));
        let mut kept: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    kept[i] = Some(g);
                }
                Op::Conv { x, w, b, groups } => {
                    let (dx, dw, db) =
                        kernels::conv2d_backward(self.val(*x), self.val(*w), *groups, &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.val(*b);
                    let db = &g * self.val(*a);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g * *s),
                Op::Gelu(x) => {
                    let dx = kernels::gelu_backward(self.val(*x), &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, g: gain, b, stats } => {
                    let (dx, dg, db) =
                        kernels::layer_norm_backward(self.val(*x), self.val(*gain), stats, &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dg);
                    accumulate(&mut grads, *b, db);
                }
                Op::MaxPool { x, argmax } => {
                    let dx = kernels::max_pool_backward(self.val(*x).shape(), argmax, &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Pad(x) => {
                    let (_, h, w) = kernels::dims3(self.val(*x));
                    accumulate(&mut grads, *x, kernels::pad_reflect_backward(&g, h, w));
                }
                Op::Crop(x) => {
                    let (_, h, w) = kernels::dims3(self.val(*x));
                    accumulate(&mut grads, *x, kernels::crop_backward(&g, h, w));
                }
                Op::Upsample(x) => {
                    let (_, h, w) = kernels::dims3(self.val(*x));
                    accumulate(&mut grads, *x, kernels::upsample_bilinear_backward(&g, h, w));
                }
                Op::Shuffle(x, s) => {
                    accumulate(&mut grads, *x, kernels::pixel_shuffle_backward(&g, *s));
                }
                Op::Attention { q, k, v, grid, heads } => {
                    let (dq, dk, dv) = block_attention_backward(
                        self.val(*q),
                        self.val(*k),
                        self.val(*v),
                        grid,
                        *heads,
                        &g,
                    );
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::Gated { logits, values, weights } => {
                    let vals: Vec<&Tensor> = values.iter().map(|v| self.val(*v)).collect();
                    let (dl, dv) = kernels::gated_sum_backward(&vals, weights, &node.value, &g);
                    for (var, d) in logits.iter().zip(dl) {
                        accumulate(&mut grads, *var, d);
                    }
                    for (var, d) in values.iter().zip(dv) {
                        accumulate(&mut grads, *var, d);
                    }
                }
                Op::Loss { x, grad } => {
                    let s = g.iter().copied().next().unwrap_or(0.0);
                    accumulate(&mut grads, *x, grad * s);
                }
            }
        }
        let params = self
            .param_vars
            .iter()
            .map(|(&id, &var)| (id, var))
            .collect();
        Gradients { by_node: kept, params }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of leaf values (inputs and parameters).
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn of(&self, v: &Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    pub fn of_param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.of(v))
    }
}

impl Graph for Tape<'_> {
    type V = Var;

    fn input(&mut self, t: Tensor) -> Var {
        self.push(t.as_standard_layout().into_owned(), Op::Leaf)
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Leaf);
        self.param_vars.insert(id, v);
        v
    }

    fn shape(&self, v: &Var) -> (usize, usize, usize) {
        kernels::dims3(self.val(*v))
    }

    fn conv2d(&mut self, x: &Var, weight: &Var, bias: &Var, groups: usize) -> Var {
        let out = kernels::conv2d(self.val(*x), self.val(*weight), self.val(*bias), groups);
        self.push(
            out,
            Op::Conv {
                x: *x,
                w: *weight,
                b: *bias,
                groups,
            },
        )
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let out = kernels::add(self.val(*a), self.val(*b));
        self.push(out, Op::Add(*a, *b))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let out = kernels::mul(self.val(*a), self.val(*b));
        self.push(out, Op::Mul(*a, *b))
    }

    fn gelu(&mut self, x: &Var) -> Var {
        let out = kernels::gelu(self.val(*x));
        self.push(out, Op::Gelu(*x))
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, shift: &Var) -> Var {
        let (out, stats) = kernels::layer_norm(self.val(*x), self.val(*gain), self.val(*shift));
        self.push(
            out,
            Op::LayerNorm {
                x: *x,
                g: *gain,
                b: *shift,
                stats,
            },
        )
    }

    fn max_pool(&mut self, x: &Var, kernel: usize, stride: usize) -> Var {
        let (out, argmax) = kernels::max_pool(self.val(*x), kernel, stride);
        self.push(out, Op::MaxPool { x: *x, argmax })
    }

    fn pad_reflect(&mut self, x: &Var, h: usize, w: usize) -> Var {
        let out = kernels::pad_reflect(self.val(*x), h, w);
        self.push(out, Op::Pad(*x))
    }

    fn crop(&mut self, x: &Var, h: usize, w: usize) -> Var {
        let out = kernels::crop(self.val(*x), h, w);
        self.push(out, Op::Crop(*x))
    }

    fn upsample_bilinear(&mut self, x: &Var, h: usize, w: usize) -> Var {
        let out = kernels::upsample_bilinear(self.val(*x), h, w);
        self.push(out, Op::Upsample(*x))
    }

    fn pixel_shuffle(&mut self, x: &Var, scale: usize) -> Var {
        let out = kernels::pixel_shuffle(self.val(*x), scale);
        self.push(out, Op::Shuffle(*x, scale))
    }

    fn block_attention(&mut self, q: &Var, k: &Var, v: &Var, grid: &BlockGrid, heads: usize) -> Var {
        let (out, _) = block_attention(self.val(*q), self.val(*k), self.val(*v), grid, heads, false);
        self.push(
            out,
            Op::Attention {
                q: *q,
                k: *k,
                v: *v,
                grid: grid.clone(),
                heads,
            },
        )
    }

    fn gated_sum(&mut self, logits: &[Var], values: &[Var]) -> Var {
        let l: Vec<&Tensor> = logits.iter().map(|v| self.val(*v)).collect();
        let vs: Vec<&Tensor> = values.iter().map(|v| self.val(*v)).collect();
        let (out, weights) = kernels::gated_sum(&l, &vs);
        self.push(
            out,
            Op::Gated {
                logits: logits.to_vec(),
                values: values.to_vec(),
                weights,
            },
        )
    }
}
