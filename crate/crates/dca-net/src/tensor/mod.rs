//! Tape-based reverse-mode automatic differentiation over dynamic-rank
//! arrays.
//!
//! The engine is deliberately small: one [`Graph`] per forward pass, nodes
//! appended in evaluation order, and a single [`Graph::backward`] sweep that
//! walks the tape in reverse. Everything runs single-threaded and allocates
//! fresh output arrays per node, which keeps evaluation order (and therefore
//! floating-point results) bit-reproducible across runs.
//!
//! Only the operations this project needs are implemented; each op has a
//! hand-derived adjoint that is exercised against central finite differences
//! in the test suite (see `gradcheck`).

mod conv;
mod elem;
mod norm;
mod resize;

pub use elem::Elem;

use std::collections::BTreeMap;

use ndarray::{concatenate, ArrayD, Axis, Ix2, Ix4, IxDyn, Zip};

/// Handle to a node in a [`Graph`]. Cheap to copy; only valid for the graph
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named collection of trainable tensors plus their gradient accumulators.
///
/// Parameter order is insertion order and is relied upon by the optimizer
/// and the checkpoint format, so builders must create parameters in a
/// deterministic sequence.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Elem> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
    grads: Vec<ArrayD<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Elem> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), grads: Vec::new(), by_name: BTreeMap::new() }
    }

    /// Register a parameter. Names must be unique; they become the stable
    /// keys of the checkpoint format.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = self.values.len();
        self.grads.push(ArrayD::zeros(value.raw_dim()));
        self.values.push(value);
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<T> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }
}

/// Tape node: the computed value plus the recipe that produced it.
struct Node<T: Elem> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
}

enum Op<T: Elem> {
    /// Gradient-tracked input; optionally tied to a store parameter.
    Leaf { param: Option<ParamId> },
    /// Input that never receives a gradient.
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Sqrt(Var),
    /// Exact sqrt forward, adjoint smoothed by eps (finite at x = 0).
    SqrtSmoothed(Var, T),
    Relu(Var),
    Sigmoid(Var),
    /// Softmax over axis 1, any rank >= 2.
    SoftmaxClasses(Var),
    Conv2d { x: Var, w: Var, b: Var, groups: usize, pad: usize },
    ConvT2x2 { x: Var, w: Var, b: Var },
    GroupNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        groups: usize,
        // Per-(batch, group) statistics cached for the backward pass.
        mean: ndarray::Array2<T>,
        istd: ndarray::Array2<T>,
    },
    MaxPool2 { x: Var, argmax: ArrayD<u32> },
    UpNearest2(Var),
    UpBilinear { x: Var },
    Concat2 { a: Var, b: Var, a_channels: usize },
    /// (B,C,H,W) scaled per (batch, channel) by an (B,C) factor.
    MulChannels { x: Var, s: Var },
    SpatialMean(Var),
    Linear { x: Var, w: Var, b: Var },
    TileChannels { x: Var, reps: usize },
    Reshape(Var),
    /// Sum all axes after the first `keep` ones.
    SumTrailing { x: Var, keep: usize },
    MeanAll(Var),
    SelectChannel { x: Var, c: usize },
    /// Zero-padded forward difference along `axis` (treats outside as 0).
    ForwardDiff { x: Var, axis: usize },
    /// Weighted sum of bank rows: (B,N,C) x (B,N) -> (B,C).
    ComposeBank { bank: Var, beta: Var },
    SelectBankRow { bank: Var, row: usize },
}

/// Reverse-mode tape. Build it by calling op methods, then call
/// [`Graph::backward`] on a scalar output.
pub struct Graph<T: Elem> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Untracked input (no gradient ever flows here).
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Gradient-tracked input that is not a parameter (e.g. a feature map a
    /// Jacobian is taken with respect to).
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf { param: None }, true)
    }

    /// Insert a parameter from `store`; its gradient can later be pushed back
    /// with [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) }, true)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Scalar convenience accessor; panics if `v` is not a single element.
    pub fn scalar(&self, v: Var) -> T {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on non-scalar node of shape {:?}", val.shape());
        *val.iter().next().expect("non-empty")
    }

    /// Accumulated gradient of `v`, if any reached it during backward.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Push parameter-leaf gradients into the store's accumulators.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, grad) {
                *store.grad_mut(*id) += g;
            }
        }
    }

    // ---- elementwise ----

    fn binary_same_shape(&mut self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "div");
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Div(a, b), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let needs = self.ng(a);
        self.push(v, Op::AddScalar(a), needs)
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let needs = self.ng(a);
        self.push(v, Op::MulScalar(a, c), needs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.sqrt());
        let needs = self.ng(a);
        self.push(v, Op::Sqrt(a), needs)
    }

    /// Square root whose forward value is exact but whose adjoint divides by
    /// `sqrt(x + eps)` instead of `sqrt(x)`, staying finite at x = 0. For
    /// x >> eps the gradient error is O(eps / x), far below test tolerances.
    pub fn sqrt_smoothed(&mut self, a: Var, eps: T) -> Var {
        assert!(eps > T::zero(), "sqrt_smoothed: eps must be positive");
        let v = self.nodes[a.0].value.mapv(|x| x.sqrt());
        let needs = self.ng(a);
        self.push(v, Op::SqrtSmoothed(a, eps), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let zero = T::zero();
        let v = self.nodes[a.0].value.mapv(|x| if x > zero { x } else { zero });
        let needs = self.ng(a);
        self.push(v, Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = T::one();
        let v = self.nodes[a.0].value.mapv(|x| one / (one + (-x).exp()));
        let needs = self.ng(a);
        self.push(v, Op::Sigmoid(a), needs)
    }

    /// Numerically-stable softmax along axis 1 (class axis). Works for any
    /// rank >= 2; every lane along axis 1 is normalised independently.
    pub fn softmax_classes(&mut self, a: Var) -> Var {
        assert!(self.nodes[a.0].value.ndim() >= 2, "softmax_classes needs rank >= 2");
        let v = norm::softmax_lanes(&self.nodes[a.0].value);
        let needs = self.ng(a);
        self.push(v, Op::SoftmaxClasses(a), needs)
    }

    // ---- structured ops ----

    /// Grouped 2-D convolution, stride 1, square kernel, symmetric zero
    /// padding. `x`: (B, Cin, H, W); `w`: (Cout, Cin/groups, k, k); `b`: (Cout).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, groups: usize, pad: usize) -> Var {
        let v = conv::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            groups,
            pad,
        );
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(v, Op::Conv2d { x, w, b, groups, pad }, needs)
    }

    /// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x
    /// upsampling, no output overlap). `x`: (B, Cin, H, W); `w`:
    /// (Cin, Cout, 2, 2); `b`: (Cout). Output is (B, Cout, 2H, 2W).
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let v = conv::conv_t2x2_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(v, Op::ConvT2x2 { x, w, b }, needs)
    }

    /// Group normalisation over (B, C, H, W) with optional per-channel affine
    /// transform. With `groups == C` this is instance normalisation.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        eps: T,
        gamma: Option<Var>,
        beta: Option<Var>,
    ) -> Var {
        let (v, mean, istd) = norm::group_norm_forward(
            &self.nodes[x.0].value,
            groups,
            eps,
            gamma.map(|g| &self.nodes[g.0].value),
            beta.map(|b| &self.nodes[b.0].value),
        );
        let needs = self.ng(x)
            || gamma.map(|g| self.ng(g)).unwrap_or(false)
            || beta.map(|b| self.ng(b)).unwrap_or(false);
        self.push(v, Op::GroupNorm { x, gamma, beta, groups, mean, istd }, needs)
    }

    /// 2x2 max pooling, stride 2. Requires even H and W.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (v, argmax) = resize::max_pool2_forward(&self.nodes[x.0].value);
        let needs = self.ng(x);
        self.push(v, Op::MaxPool2 { x, argmax }, needs)
    }

    /// Nearest-neighbour 2x upsampling of (B, C, H, W).
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let v = resize::up_nearest2_forward(&self.nodes[x.0].value);
        let needs = self.ng(x);
        self.push(v, Op::UpNearest2(x), needs)
    }

    /// Bilinear resize of (B, C, H, W) to (B, C, out_h, out_w), half-pixel
    /// aligned (`align_corners = false` convention).
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let v = resize::up_bilinear_forward(&self.nodes[x.0].value, out_h, out_w);
        let needs = self.ng(x);
        self.push(v, Op::UpBilinear { x }, needs)
    }

    /// Concatenate two (B, C, H, W) tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.ndim(), 4, "concat_channels expects rank 4");
        assert_eq!(bv.ndim(), 4, "concat_channels expects rank 4");
        let a_channels = av.shape()[1];
        let v = concatenate(Axis(1), &[av.view(), bv.view()])
            .expect("concat_channels: incompatible shapes");
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Concat2 { a, b, a_channels }, needs)
    }

    /// Scale every channel map of `x` (B, C, H, W) by the matching entry of
    /// `s` (B, C).
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value;
        assert_eq!(xv.ndim(), 4, "mul_channels: x must be rank 4");
        assert_eq!(sv.shape(), &xv.shape()[..2], "mul_channels: scale must be (B, C)");
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("rank 4");
        let s2 = sv.view().into_dimensionality::<Ix2>().expect("rank 2");
        let mut out = x4.to_owned();
        Zip::from(out.outer_iter_mut()).and(s2.outer_iter()).for_each(|mut ob, sb| {
            Zip::from(ob.outer_iter_mut()).and(&sb).for_each(|mut map, &f| {
                map.mapv_inplace(|v| v * f);
            });
        });
        let needs = self.ng(x) || self.ng(s);
        self.push(out.into_dyn(), Op::MulChannels { x, s }, needs)
    }

    /// Spatial average of (B, C, H, W) -> (B, C).
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.ndim(), 4, "spatial_mean expects rank 4");
        let (bsz, ch, h, w) = dims4(xv);
        let flat = xv.view().into_shape_with_order((bsz, ch, h * w)).expect("standard layout");
        let inv = T::one() / T::from_f64((h * w) as f64);
        let v = (flat.sum_axis(Axis(2)) * inv).into_dyn();
        let needs = self.ng(x);
        self.push(v, Op::SpatialMean(x), needs)
    }

    /// Fully-connected layer: `x` (B, I) * `w` (O, I) transposed + `b` (O).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().expect("x rank 2");
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix2>().expect("w rank 2");
        let bv = &self.nodes[b.0].value;
        assert_eq!(xv.shape()[1], wv.shape()[1], "linear: in-features mismatch");
        assert_eq!(bv.len(), wv.shape()[0], "linear: bias length mismatch");
        let bv1 = bv.view().into_dimensionality::<ndarray::Ix1>().expect("bias rank 1");
        let mut y = ndarray::Array2::<T>::zeros((xv.shape()[0], wv.shape()[0]));
        ndarray::linalg::general_mat_mul(T::one(), &xv, &wv.t(), T::zero(), &mut y);
        for mut row in y.outer_iter_mut() {
            Zip::from(&mut row).and(&bv1).for_each(|r, &b| *r += b);
        }
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(y.into_dyn(), Op::Linear { x, w, b }, needs)
    }

    /// Repeat the channel axis of (B, C) `reps` times -> (B, reps * C).
    pub fn tile_channels(&mut self, x: Var, reps: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().expect("x rank 2");
        let (bsz, ch) = (xv.shape()[0], xv.shape()[1]);
        let mut out = ndarray::Array2::<T>::zeros((bsz, reps * ch));
        for r in 0..reps {
            out.slice_mut(ndarray::s![.., r * ch..(r + 1) * ch]).assign(&xv);
        }
        let needs = self.ng(x);
        self.push(out.into_dyn(), Op::TileChannels { x, reps }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(
            xv.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch ({:?} -> {:?})",
            xv.shape(),
            shape
        );
        let v = xv
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("standard layout reshape");
        let needs = self.ng(x);
        self.push(v, Op::Reshape(x), needs)
    }

    /// Sum out every axis after the first `keep`. `keep = 0` reduces to a
    /// 0-d scalar.
    pub fn sum_trailing(&mut self, x: Var, keep: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert!(keep <= xv.ndim(), "sum_trailing: keep exceeds rank");
        let lead: usize = xv.shape()[..keep].iter().product();
        let trail: usize = xv.shape()[keep..].iter().product();
        let flat = xv.view().into_shape_with_order((lead, trail)).expect("standard layout");
        let sums = flat.sum_axis(Axis(1));
        let v = sums
            .into_shape_with_order(IxDyn(&xv.shape()[..keep]))
            .expect("lead shape");
        let needs = self.ng(x);
        self.push(v, Op::SumTrailing { x, keep }, needs)
    }

    /// Mean over all elements -> 0-d scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        assert!(xv.len() > 0, "mean_all of empty tensor");
        let m = xv.sum() / T::from_f64(xv.len() as f64);
        let v = ArrayD::from_elem(IxDyn(&[]), m);
        let needs = self.ng(x);
        self.push(v, Op::MeanAll(x), needs)
    }

    /// Extract channel `c` of (B, C, H, W) -> (B, H, W).
    pub fn select_channel(&mut self, x: Var, c: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.ndim(), 4, "select_channel expects rank 4");
        assert!(c < xv.shape()[1], "select_channel: channel {} out of range", c);
        let v = xv.index_axis(Axis(1), c).to_owned();
        let needs = self.ng(x);
        self.push(v, Op::SelectChannel { x, c }, needs)
    }

    /// Forward difference along `axis` of (B, H, W) with the outside treated
    /// as zero, so the last element along the axis contributes `0 - x[last]`.
    pub fn forward_diff(&mut self, x: Var, axis: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.ndim(), 3, "forward_diff expects rank 3 (B, H, W)");
        assert!(axis == 1 || axis == 2, "forward_diff: axis must be 1 or 2");
        let n = xv.shape()[axis];
        let mut out = ArrayD::<T>::zeros(xv.raw_dim());
        {
            let head = out.slice_axis_mut(Axis(axis), ndarray::Slice::from(..n - 1));
            let next = xv.slice_axis(Axis(axis), ndarray::Slice::from(1..));
            let cur = xv.slice_axis(Axis(axis), ndarray::Slice::from(..n - 1));
            Zip::from(head).and(&next).and(&cur).for_each(|o, &a, &b| *o = a - b);
        }
        {
            let tail = out.slice_axis_mut(Axis(axis), ndarray::Slice::from(n - 1..));
            let last = xv.slice_axis(Axis(axis), ndarray::Slice::from(n - 1..));
            Zip::from(tail).and(&last).for_each(|o, &v| *o = -v);
        }
        let needs = self.ng(x);
        self.push(out, Op::ForwardDiff { x, axis }, needs)
    }

    /// Attention-weighted combination of a basis bank:
    /// (B, N, C) weighted by (B, N) -> (B, C).
    pub fn compose_bank(&mut self, bank: Var, beta: Var) -> Var {
        let bv = &self.nodes[bank.0].value;
        let wv = &self.nodes[beta.0].value;
        assert_eq!(bv.ndim(), 3, "compose_bank: bank must be (B, N, C)");
        assert_eq!(wv.shape(), &bv.shape()[..2], "compose_bank: weights must be (B, N)");
        let (bsz, n, ch) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        let mut out = ndarray::Array2::<T>::zeros((bsz, ch));
        for bi in 0..bsz {
            for ni in 0..n {
                let w = wv[[bi, ni]];
                for ci in 0..ch {
                    out[[bi, ci]] += w * bv[[bi, ni, ci]];
                }
            }
        }
        let needs = self.ng(bank) || self.ng(beta);
        self.push(out.into_dyn(), Op::ComposeBank { bank, beta }, needs)
    }

    /// Extract row `row` of a (B, N, C) bank -> (B, C).
    pub fn select_bank_row(&mut self, bank: Var, row: usize) -> Var {
        let bv = &self.nodes[bank.0].value;
        assert_eq!(bv.ndim(), 3, "select_bank_row: bank must be (B, N, C)");
        assert!(row < bv.shape()[1], "select_bank_row: row {} out of range", row);
        let v = bv.index_axis(Axis(1), row).to_owned();
        let needs = self.ng(bank);
        self.push(v, Op::SelectBankRow { bank, row }, needs)
    }

    // ---- backward ----

    /// Backpropagate from a scalar node, seeding with 1. Gradients accumulate
    /// into any existing ones; call [`Graph::zero_grads`] first for a fresh
    /// pass.
    pub fn backward(&mut self, root: Var) {
        let shape = self.nodes[root.0].value.raw_dim();
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        self.backward_seeded(root, ArrayD::from_elem(shape, T::one()));
    }

    /// Backpropagate from any node with an explicit seed (cotangent).
    ///
    /// Each call runs in its own scratch buffer and then merges into the
    /// persistent per-node gradients, so repeated calls accumulate exactly
    /// one propagated seed each.
    pub fn backward_seeded(&mut self, root: Var, seed: ArrayD<T>) {
        assert_eq!(
            seed.shape(),
            self.nodes[root.0].value.shape(),
            "backward seed shape mismatch"
        );
        assert!(
            self.nodes[root.0].needs_grad,
            "backward from a node with no gradient path"
        );
        let nodes = &self.nodes;
        let mut pass: Vec<Option<ArrayD<T>>> = Vec::new();
        pass.resize_with(root.0 + 1, || None);
        accum(nodes, &mut pass, root, seed);
        for i in (0..=root.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            if matches!(nodes[i].op, Op::Leaf { .. } | Op::Constant) {
                continue;
            }
            let Some(dy) = pass[i].take() else { continue };
            step_backward(nodes, &mut pass, i, &dy);
            pass[i] = Some(dy);
        }
        for (slot, fresh) in self.grads.iter_mut().zip(pass) {
            if let Some(g) = fresh {
                match slot {
                    Some(acc) => *acc += &g,
                    None => *slot = Some(g),
                }
            }
        }
    }
}

/// Add `g` into the gradient slot of `v` (skipping non-tracked nodes).
fn accum<T: Elem>(nodes: &[Node<T>], grads: &mut [Option<ArrayD<T>>], v: Var, g: ArrayD<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Dispatch the adjoint of node `i` given its output cotangent `dy`.
fn step_backward<T: Elem>(
    nodes: &[Node<T>],
    grads: &mut [Option<ArrayD<T>>],
    i: usize,
    dy: &ArrayD<T>,
) {
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf { .. } | Op::Constant => unreachable!("leaves handled by caller"),
        Op::Add(a, b) => {
            accum(nodes, grads, *a, dy.clone());
            accum(nodes, grads, *b, dy.clone());
        }
        Op::Sub(a, b) => {
            accum(nodes, grads, *a, dy.clone());
            accum(nodes, grads, *b, dy.mapv(|v| -v));
        }
        Op::Mul(a, b) => {
            accum(nodes, grads, *a, dy * val(*b));
            accum(nodes, grads, *b, dy * val(*a));
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            accum(nodes, grads, *a, dy / bv);
            let mut db = dy * val(*a);
            Zip::from(&mut db).and(bv).for_each(|g, &b| *g = -*g / (b * b));
            accum(nodes, grads, *b, db);
        }
        Op::AddScalar(a) => accum(nodes, grads, *a, dy.clone()),
        Op::MulScalar(a, c) => accum(nodes, grads, *a, dy.mapv(|v| v * *c)),
        Op::Sqrt(a) => {
            let y = &nodes[i].value;
            let half = T::from_f64(0.5);
            let mut dx = dy.clone();
            Zip::from(&mut dx).and(y).for_each(|g, &yv| *g = *g * half / yv);
            accum(nodes, grads, *a, dx);
        }
        Op::SqrtSmoothed(a, eps) => {
            let half = T::from_f64(0.5);
            let mut dx = dy.clone();
            Zip::from(&mut dx).and(val(*a)).for_each(|g, &x| {
                *g = *g * half / (x + *eps).sqrt();
            });
            accum(nodes, grads, *a, dx);
        }
        Op::Relu(a) => {
            let mut dx = dy.clone();
            Zip::from(&mut dx).and(val(*a)).for_each(|g, &x| {
                if x <= T::zero() {
                    *g = T::zero();
                }
            });
            accum(nodes, grads, *a, dx);
        }
        Op::Sigmoid(a) => {
            let y = &nodes[i].value;
            let one = T::one();
            let mut dx = dy.clone();
            Zip::from(&mut dx).and(y).for_each(|g, &yv| *g = *g * yv * (one - yv));
            accum(nodes, grads, *a, dx);
        }
        Op::SoftmaxClasses(a) => {
            let dx = norm::softmax_lanes_backward(&nodes[i].value, dy);
            accum(nodes, grads, *a, dx);
        }
        Op::Conv2d { x, w, b, groups, pad } => {
            let (dx, dw, db) = conv::conv2d_backward(val(*x), val(*w), dy, *groups, *pad);
            accum(nodes, grads, *x, dx);
            accum(nodes, grads, *w, dw);
            accum(nodes, grads, *b, db);
        }
        Op::ConvT2x2 { x, w, b } => {
            let (dx, dw, db) = conv::conv_t2x2_backward(val(*x), val(*w), dy);
            accum(nodes, grads, *x, dx);
            accum(nodes, grads, *w, dw);
            accum(nodes, grads, *b, db);
        }
        Op::GroupNorm { x, gamma, beta, groups, mean, istd } => {
            let (dx, dgamma, dbeta) = norm::group_norm_backward(
                val(*x),
                *groups,
                mean,
                istd,
                gamma.map(|g| val(g)),
                dy,
            );
            accum(nodes, grads, *x, dx);
            if let (Some(gv), Some(dg)) = (*gamma, dgamma) {
                accum(nodes, grads, gv, dg);
            }
            if let (Some(bv), Some(db)) = (*beta, dbeta) {
                accum(nodes, grads, bv, db);
            }
        }
        Op::MaxPool2 { x, argmax } => {
            let xs = val(*x).shape();
            let dx = resize::max_pool2_backward(argmax, dy, xs[2], xs[3]);
            accum(nodes, grads, *x, dx);
        }
        Op::UpNearest2(x) => {
            accum(nodes, grads, *x, resize::up_nearest2_backward(dy));
        }
        Op::UpBilinear { x } => {
            let xs = val(*x).shape();
            let dx = resize::up_bilinear_backward(dy, xs[2], xs[3]);
            accum(nodes, grads, *x, dx);
        }
        Op::Concat2 { a, b, a_channels } => {
            let da = dy.slice_axis(Axis(1), ndarray::Slice::from(..*a_channels)).to_owned();
            let db = dy.slice_axis(Axis(1), ndarray::Slice::from(*a_channels..)).to_owned();
            accum(nodes, grads, *a, da);
            accum(nodes, grads, *b, db);
        }
        Op::MulChannels { x, s } => {
            let xv = val(*x).view().into_dimensionality::<Ix4>().expect("rank 4");
            let sv = val(*s).view().into_dimensionality::<Ix2>().expect("rank 2");
            let dy4 = dy.view().into_dimensionality::<Ix4>().expect("rank 4");
            let mut dx = dy4.to_owned();
            Zip::from(dx.outer_iter_mut()).and(sv.outer_iter()).for_each(|mut db, sb| {
                Zip::from(db.outer_iter_mut()).and(&sb).for_each(|mut map, &f| {
                    map.mapv_inplace(|v| v * f);
                });
            });
            let mut ds = ndarray::Array2::<T>::zeros(sv.raw_dim());
            Zip::from(ds.outer_iter_mut())
                .and(dy4.outer_iter())
                .and(xv.outer_iter())
                .for_each(|mut dsb, dyb, xb| {
                    Zip::from(&mut dsb).and(dyb.outer_iter()).and(xb.outer_iter()).for_each(
                        |d, dym, xm| {
                            let mut acc = T::zero();
                            Zip::from(&dym).and(&xm).for_each(|&a, &b| acc += a * b);
                            *d = acc;
                        },
                    );
                });
            accum(nodes, grads, *x, dx.into_dyn());
            accum(nodes, grads, *s, ds.into_dyn());
        }
        Op::SpatialMean(x) => {
            let xs = val(*x).shape();
            let (h, w) = (xs[2], xs[3]);
            let scale = T::one() / T::from_f64((h * w) as f64);
            let dy2 = dy.view().into_dimensionality::<Ix2>().expect("rank 2");
            let mut dx = ndarray::Array4::<T>::zeros((xs[0], xs[1], h, w));
            Zip::from(dx.outer_iter_mut()).and(dy2.outer_iter()).for_each(|mut db, dyb| {
                Zip::from(db.outer_iter_mut()).and(&dyb).for_each(|mut map, &g| {
                    map.fill(g * scale);
                });
            });
            accum(nodes, grads, *x, dx.into_dyn());
        }
        Op::Linear { x, w, b } => {
            let xv = val(*x).view().into_dimensionality::<Ix2>().expect("rank 2");
            let wv = val(*w).view().into_dimensionality::<Ix2>().expect("rank 2");
            let dy2 = dy.view().into_dimensionality::<Ix2>().expect("rank 2");
            let mut dx = ndarray::Array2::<T>::zeros(xv.raw_dim());
            ndarray::linalg::general_mat_mul(T::one(), &dy2, &wv, T::zero(), &mut dx);
            let mut dw = ndarray::Array2::<T>::zeros(wv.raw_dim());
            ndarray::linalg::general_mat_mul(T::one(), &dy2.t(), &xv, T::zero(), &mut dw);
            let db = dy2.sum_axis(Axis(0));
            accum(nodes, grads, *x, dx.into_dyn());
            accum(nodes, grads, *w, dw.into_dyn());
            accum(nodes, grads, *b, db.into_dyn());
        }
        Op::TileChannels { x, reps } => {
            let xs = val(*x).shape();
            let ch = xs[1];
            let dy2 = dy.view().into_dimensionality::<Ix2>().expect("rank 2");
            let mut dx = ndarray::Array2::<T>::zeros((xs[0], ch));
            for r in 0..*reps {
                dx += &dy2.slice(ndarray::s![.., r * ch..(r + 1) * ch]);
            }
            accum(nodes, grads, *x, dx.into_dyn());
        }
        Op::Reshape(x) => {
            let dx = dy
                .clone()
                .into_shape_with_order(val(*x).raw_dim())
                .expect("reshape backward");
            accum(nodes, grads, *x, dx);
        }
        Op::SumTrailing { x, keep } => {
            let xs = val(*x).shape().to_vec();
            let lead: usize = xs[..*keep].iter().product();
            let trail: usize = xs[*keep..].iter().product();
            let dyf = dy.view().into_shape_with_order(lead).expect("lead");
            let mut dx = ndarray::Array2::<T>::zeros((lead, trail));
            Zip::from(dx.outer_iter_mut()).and(&dyf).for_each(|mut row, &g| row.fill(g));
            accum(
                nodes,
                grads,
                *x,
                dx.into_shape_with_order(IxDyn(&xs)).expect("x shape"),
            );
        }
        Op::MeanAll(x) => {
            let xv = val(*x);
            let g = *dy.iter().next().expect("scalar") / T::from_f64(xv.len() as f64);
            accum(nodes, grads, *x, ArrayD::from_elem(xv.raw_dim(), g));
        }
        Op::SelectChannel { x, c } => {
            let mut dx = ArrayD::<T>::zeros(val(*x).raw_dim());
            dx.index_axis_mut(Axis(1), *c).assign(dy);
            accum(nodes, grads, *x, dx);
        }
        Op::ForwardDiff { x, axis } => {
            // Adjoint of the zero-padded forward difference:
            // dx[j] = dy[j-1] - dy[j]  (dy[-1] treated as 0).
            let n = val(*x).shape()[*axis];
            let mut dx = dy.mapv(|v| -v);
            {
                let tail = dx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(1..));
                let prev = dy.slice_axis(Axis(*axis), ndarray::Slice::from(..n - 1));
                Zip::from(tail).and(&prev).for_each(|d, &p| *d += p);
            }
            accum(nodes, grads, *x, dx);
        }
        Op::ComposeBank { bank, beta } => {
            let bv = val(*bank);
            let wv = val(*beta);
            let (bsz, n, ch) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
            let mut dbank = ArrayD::<T>::zeros(bv.raw_dim());
            let mut dbeta = ArrayD::<T>::zeros(wv.raw_dim());
            for bi in 0..bsz {
                for ni in 0..n {
                    let w = wv[[bi, ni]];
                    let mut acc = T::zero();
                    for ci in 0..ch {
                        let g = dy[[bi, ci]];
                        dbank[[bi, ni, ci]] = w * g;
                        acc += g * bv[[bi, ni, ci]];
                    }
                    dbeta[[bi, ni]] = acc;
                }
            }
            accum(nodes, grads, *bank, dbank);
            accum(nodes, grads, *beta, dbeta);
        }
        Op::SelectBankRow { bank, row } => {
            let mut dbank = ArrayD::<T>::zeros(val(*bank).raw_dim());
            dbank.index_axis_mut(Axis(1), *row).assign(dy);
            accum(nodes, grads, *bank, dbank);
        }
    }
}

/// Destructure a rank-4 shape; panics with context otherwise.
pub(crate) fn dims4<T: Elem>(a: &ArrayD<T>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got shape {:?}", s);
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn param_store_roundtrip() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("w1", ArrayD::zeros(IxDyn(&[2, 3])));
        let b = store.add("w2", ArrayD::zeros(IxDyn(&[4])));
        assert_eq!(store.len(), 2);
        assert_eq!(store.num_scalars(), 10);
        assert_eq!(store.id("w1"), Some(a));
        assert_eq!(store.id("w2"), Some(b));
        assert_eq!(store.name(b), "w2");
        assert!(store.id("nope").is_none());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn param_store_rejects_duplicates() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", ArrayD::zeros(IxDyn(&[1])));
        store.add("w", ArrayD::zeros(IxDyn(&[1])));
    }

    #[test]
    fn add_mul_backward_matches_hand_math() {
        // z = sum(a * b + a); dz/da = b + 1, dz/db = a
        let mut g = Graph::<f64>::new();
        let a = g.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.leaf(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let p = g.mul(a, b);
        let s = g.add(p, a);
        let z = g.sum_trailing(s, 0);
        g.backward(z);
        let da = g.grad(a).unwrap();
        let db = g.grad(b).unwrap();
        assert_eq!(da, &arr2(&[[6.0, 7.0], [8.0, 9.0]]).into_dyn());
        assert_eq!(db, &arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
    }

    #[test]
    fn constants_do_not_track_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(ArrayD::from_elem(IxDyn(&[3]), 2.0));
        let c = g.constant(ArrayD::from_elem(IxDyn(&[3]), 10.0));
        let m = g.mul(a, c);
        let z = g.sum_trailing(m, 0);
        g.backward(z);
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(a).unwrap(), &ArrayD::from_elem(IxDyn(&[3]), 10.0));
    }

    #[test]
    fn repeated_backward_accumulates_until_cleared() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let z = g.sum_trailing(a, 0);
        g.backward(z);
        g.backward(z);
        assert_eq!(g.grad(a).unwrap()[[0]], 2.0);
        g.zero_grads();
        g.backward(z);
        assert_eq!(g.grad(a).unwrap()[[0]], 1.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(arr2(&[[1.0, 2.0, 3.0], [-1.0, 0.0, 1.0]]).into_dyn());
        let y = g.softmax_classes(x);
        for row in g.value(y).view().into_dimensionality::<Ix2>().unwrap().outer_iter() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_diff_treats_outside_as_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 1, 3]), vec![1.0, 3.0, 6.0]).unwrap());
        let d = g.forward_diff(x, 2);
        let dv = g.value(d);
        assert_eq!(dv[[0, 0, 0]], 2.0);
        assert_eq!(dv[[0, 0, 1]], 3.0);
        assert_eq!(dv[[0, 0, 2]], -6.0);
    }

    #[test]
    fn select_bank_row_extracts_and_scatters() {
        let mut g = Graph::<f64>::new();
        let bank = g.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 3, 2]), vec![1., 2., 3., 4., 5., 6.]).unwrap(),
        );
        let row = g.select_bank_row(bank, 1);
        assert_eq!(g.value(row)[[0, 0]], 3.0);
        assert_eq!(g.value(row)[[0, 1]], 4.0);
        let z = g.sum_trailing(row, 0);
        g.backward(z);
        let db = g.grad(bank).unwrap();
        assert_eq!(db[[0, 1, 0]], 1.0);
        assert_eq!(db[[0, 0, 0]], 0.0);
        assert_eq!(db[[0, 2, 1]], 0.0);
    }
}
