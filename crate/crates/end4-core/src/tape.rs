//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A `Tape` records one forward computation per sample as an arena of nodes;
//! `backward` replays it in reverse and accumulates gradients for every node,
//! including the parameter leaves. Tapes are cheap, single-threaded values:
//! batch parallelism builds one tape per sample on its own worker and sums
//! the per-sample parameter gradients afterwards in a fixed order, which
//! keeps training bit-reproducible regardless of thread scheduling.
//!
//! Values are eager: every builder method computes the output immediately, so
//! intermediate shapes are always known and ops can validate their inputs at
//! construction time. Shape violations are programming errors here and panic;
//! public entry points validate their inputs and return `Result` before any
//! tape is built.

use crate::nn::{ParamId, ParamSet};
use crate::real::Real;
use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayViewD, Axis, Ix1, Ix2, Ix3};
use std::collections::HashMap;
use std::sync::Arc;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Convolution geometry shared by im2col and its backward scatter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }
}

enum Value<T: Real> {
    Owned(ArrayD<T>),
    Shared(Arc<ArrayD<T>>),
}

impl<T: Real> Value<T> {
    fn view(&self) -> ArrayViewD<'_, T> {
        match self {
            Value::Owned(a) => a.view(),
            Value::Shared(a) => a.view(),
        }
    }
}

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    /// x: [C, N] plus per-channel bias [C] broadcast over columns.
    AddColBias {
        x: Var,
        bias: Var,
    },
    /// x: [N, D] plus per-feature bias [D] broadcast over rows.
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Sigmoid(Var),
    Silu(Var),
    /// Row-wise softmax of a 2-D input.
    Softmax(Var),
    Ln(Var),
    Abs(Var),
    Clamp(Var, T, T),
    Reshape(Var),
    Transpose(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Im2col {
        x: Var,
        geom: ConvGeom,
    },
    UpsampleNearest2x(Var),
    SliceSpatial {
        x: Var,
        top: usize,
        left: usize,
    },
    PadSpatial {
        x: Var,
        top: usize,
        left: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    MeanAxis0(Var),
    MeanAll(Var),
    SumAll(Var),
    StopGrad,
}

struct Node<T: Real> {
    value: Value<T>,
    op: Op<T>,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients<T: Real> {
    by_node: Vec<Option<ArrayD<T>>>,
    param_nodes: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the seeded output with respect to `v`, if `v` was on the path.
    pub fn of(&self, v: Var) -> Option<&ArrayD<T>> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient for a parameter leaf, if it participated.
    pub fn param(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.param_nodes
            .iter()
            .find(|(pid, _)| *pid == id)
            .and_then(|(_, node)| self.by_node[*node].as_ref())
    }

    /// All parameter gradients present on this tape.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &ArrayD<T>)> {
        self.param_nodes
            .iter()
            .filter_map(|(pid, node)| self.by_node[*node].as_ref().map(|g| (*pid, g)))
    }
}

/// One recorded forward computation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    param_cache: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn as2<T: Real>(a: ArrayViewD<'_, T>) -> ArrayView2<'_, T> {
    a.into_dimensionality::<Ix2>().expect("expected 2-D value")
}

/// Materialize a view in standard (row-major) layout so that reshapes and
/// slice access downstream never see an F-order buffer.
fn own_std<T: Real>(v: ArrayViewD<'_, T>) -> ArrayD<T> {
    v.as_standard_layout().into_owned()
}

/// Convert an owned 2-D result to dynamic dims, re-laying it out in row-major
/// order if a transposed matmul operand produced an F-order buffer.
fn std2<T: Real>(a: Array2<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a.into_dyn()
    } else {
        own_std(a.view().into_dyn())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> ArrayViewD<'_, T> {
        self.nodes[v.0].value.view()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf. Cached so every use of a parameter shares one node and
    /// its gradient accumulates across all uses.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(v) = self.param_cache.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: Value::Shared(params.arc(id)),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_cache.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = &self.value(a).to_owned() + &self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = &self.value(a).to_owned() - &self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = &self.value(a).to_owned() * &self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        self.push(value, Op::AddScalar(a, c))
    }

    /// 2-D matrix product with optional transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let a2 = as2(av.view());
        let b2 = as2(bv.view());
        let value = match (ta, tb) {
            (false, false) => a2.dot(&b2),
            (true, false) => a2.t().dot(&b2),
            (false, true) => a2.dot(&b2.t()),
            (true, true) => a2.t().dot(&b2.t()),
        };
        self.push(std2(value), Op::MatMul { a, b, ta, tb })
    }

    /// x `[C, N]` + bias `[C]`, broadcast across columns.
    pub fn add_col_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x).to_owned();
        let bv = self.value(bias).to_owned();
        let x2 = x2_owned(xv);
        let b1 = bv.into_dimensionality::<Ix1>().expect("bias must be 1-D");
        assert_eq!(x2.nrows(), b1.len(), "col bias length mismatch");
        let mut out = x2;
        for (mut row, b) in out.outer_iter_mut().zip(b1.iter()) {
            row.mapv_inplace(|v| v + *b);
        }
        self.push(out.into_dyn(), Op::AddColBias { x, bias })
    }

    /// x `[N, D]` + bias `[D]`, broadcast across rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x).to_owned();
        let bv = self.value(bias).to_owned();
        let x2 = x2_owned(xv);
        let b1 = bv.into_dimensionality::<Ix1>().expect("bias must be 1-D");
        assert_eq!(x2.ncols(), b1.len(), "row bias length mismatch");
        let mut out = x2;
        for mut row in out.outer_iter_mut() {
            row.zip_mut_with(&b1, |v, b| *v = *v + *b);
        }
        self.push(out.into_dyn(), Op::AddRowBias { x, bias })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = T::one();
        let value = self.value(a).mapv(|x| one / (one + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let one = T::one();
        let value = self.value(a).mapv(|x| x / (one + (-x).exp()));
        self.push(value, Op::Silu(a))
    }

    /// Row-wise softmax over the last axis of a 2-D input.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a).to_owned();
        let mut out = x2_owned(av);
        for mut row in out.outer_iter_mut() {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.iter().cloned().sum::<T>();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(out.into_dyn(), Op::Softmax(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.ln());
        self.push(value, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.abs());
        self.push(value, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).mapv(|x| x.max(lo).min(hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = own_std(self.value(a))
            .into_shape_with_order(shape.to_vec())
            .expect("reshape: element count mismatch");
        self.push(value, Op::Reshape(a))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Var {
        let value = own_std(as2(self.value(a)).t().into_dyn());
        self.push(value, Op::Transpose(a))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty());
        let views: Vec<ArrayViewD<'_, T>> = xs.iter().map(|v| self.value(*v)).collect();
        let value = ndarray::concatenate(
            Axis(axis),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat: incompatible shapes");
        self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self
            .value(x)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push(value, Op::Slice { x, axis, start })
    }

    /// Unfold x `[C, H, W]` into convolution columns `[C*k*k, OH*OW]`.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        let xv = self.value(x).to_owned();
        let x3 = xv
            .into_dimensionality::<Ix3>()
            .expect("im2col expects [C,H,W]");
        assert_eq!(
            x3.shape(),
            &[geom.in_ch, geom.in_h, geom.in_w],
            "im2col geometry mismatch"
        );
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let k = geom.kernel;
        let mut cols = Array2::<T>::zeros((geom.in_ch * k * k, oh * ow));
        for c in 0..geom.in_ch {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let mut out_row = cols.row_mut(row);
                    for oy in 0..oh {
                        let iy = (oy * geom.stride + ki * geom.dilation) as isize
                            - geom.pad as isize;
                        if iy < 0 || iy >= geom.in_h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * geom.stride + kj * geom.dilation) as isize
                                - geom.pad as isize;
                            if ix < 0 || ix >= geom.in_w as isize {
                                continue;
                            }
                            out_row[oy * ow + ox] = x3[(c, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
        self.push(cols.into_dyn(), Op::Im2col { x, geom })
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample_nearest_2x(&mut self, x: Var) -> Var {
        let xv = self.value(x).to_owned();
        let x3 = xv
            .into_dimensionality::<Ix3>()
            .expect("upsample expects [C,H,W]");
        let (c, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
        let mut out = ndarray::Array3::<T>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x3[(ci, i, j)];
                    out[(ci, 2 * i, 2 * j)] = v;
                    out[(ci, 2 * i + 1, 2 * j)] = v;
                    out[(ci, 2 * i, 2 * j + 1)] = v;
                    out[(ci, 2 * i + 1, 2 * j + 1)] = v;
                }
            }
        }
        self.push(out.into_dyn(), Op::UpsampleNearest2x(x))
    }

    /// Crop a spatial box out of `[C, H, W]`.
    pub fn slice_spatial(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let value = xv
            .slice_axis(Axis(1), ndarray::Slice::from(top..top + h))
            .slice_axis(Axis(2), ndarray::Slice::from(left..left + w))
            .to_owned();
        self.push(value, Op::SliceSpatial { x, top, left })
    }

    /// Zero-pad `[C, h, w]` into a `[C, out_h, out_w]` canvas at (top, left).
    pub fn pad_spatial(&mut self, x: Var, top: usize, left: usize, out_h: usize, out_w: usize) -> Var {
        let xv = self.value(x).to_owned();
        let x3 = xv
            .into_dimensionality::<Ix3>()
            .expect("pad expects [C,H,W]");
        let (c, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
        assert!(top + h <= out_h && left + w <= out_w, "pad box out of canvas");
        let mut out = ndarray::Array3::<T>::zeros((c, out_h, out_w));
        out.slice_mut(ndarray::s![.., top..top + h, left..left + w])
            .assign(&x3);
        self.push(out.into_dyn(), Op::PadSpatial { x, top, left })
    }

    /// Group normalization of `[C, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Var {
        let xv = self.value(x).to_owned();
        let x3 = xv
            .into_dimensionality::<Ix3>()
            .expect("group_norm expects [C,H,W]");
        let (c, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
        assert_eq!(c % groups, 0, "channels must divide into groups");
        let gv = self.value(gamma).to_owned();
        let bv = self.value(beta).to_owned();
        let g1 = gv.into_dimensionality::<Ix1>().unwrap();
        let b1 = bv.into_dimensionality::<Ix1>().unwrap();
        assert_eq!(g1.len(), c);
        let per = c / groups;
        let n = T::from_f((per * h * w) as f64);
        let mut out = x3.clone();
        let mut means = Vec::with_capacity(groups);
        let mut inv_stds = Vec::with_capacity(groups);
        for g in 0..groups {
            let lo = g * per;
            let sl = x3.slice(ndarray::s![lo..lo + per, .., ..]);
            let mean = sl.iter().cloned().sum::<T>() / n;
            let var = sl.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let inv_std = T::one() / (var + eps).sqrt();
            means.push(mean);
            inv_stds.push(inv_std);
            for ci in lo..lo + per {
                let gain = g1[ci] * inv_std;
                let shift = b1[ci] - mean * gain;
                out.slice_mut(ndarray::s![ci, .., ..])
                    .mapv_inplace(|v| v * gain + shift);
            }
        }
        self.push(
            out.into_dyn(),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                inv_std: inv_stds,
            },
        )
    }

    /// Per-row layer normalization of `[N, D]` with affine over features.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.value(x).to_owned();
        let x2 = x2_owned(xv);
        let (rows, d) = (x2.nrows(), x2.ncols());
        let gv = self.value(gamma).to_owned();
        let bv = self.value(beta).to_owned();
        let g1 = gv.into_dimensionality::<Ix1>().unwrap();
        let b1 = bv.into_dimensionality::<Ix1>().unwrap();
        assert_eq!(g1.len(), d);
        let n = T::from_f(d as f64);
        let mut out = x2;
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        for mut row in out.outer_iter_mut() {
            let mean = row.iter().cloned().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let inv_std = T::one() / (var + eps).sqrt();
            means.push(mean);
            inv_stds.push(inv_std);
            for (v, (g, b)) in row.iter_mut().zip(g1.iter().zip(b1.iter())) {
                *v = (*v - mean) * inv_std * *g + *b;
            }
        }
        self.push(
            out.into_dyn(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: inv_stds,
            },
        )
    }

    /// Mean over rows: `[N, D]` -> `[D]`.
    pub fn mean_axis0(&mut self, x: Var) -> Var {
        let xv = self.value(x).to_owned();
        let x2 = x2_owned(xv);
        let value = x2.mean_axis(Axis(0)).unwrap();
        self.push(value.into_dyn(), Op::MeanAxis0(x))
    }

    /// Mean of all elements -> `[1]`.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::from_f(xv.len() as f64);
        let m = xv.iter().cloned().sum::<T>() / n;
        self.push(Array1::from(vec![m]).into_dyn(), Op::MeanAll(x))
    }

    /// Sum of all elements -> `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().cloned().sum::<T>();
        self.push(Array1::from(vec![s]).into_dyn(), Op::SumAll(x))
    }

    /// Identity with gradient flow severed.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.value(x).to_owned();
        self.push(value, Op::StopGrad)
    }

    /// Backward pass seeded with ones at `from` (typically a `[1]` scalar).
    pub fn backward(&mut self, from: Var) -> Gradients<T> {
        let seed = ArrayD::<T>::ones(self.value(from).shape().to_vec());
        self.backward_seeded(from, seed)
    }

    /// Backward pass with an explicit output gradient.
    pub fn backward_seeded(&mut self, from: Var, seed: ArrayD<T>) -> Gradients<T> {
        assert_eq!(
            seed.shape(),
            self.value(from).shape(),
            "seed gradient shape mismatch"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[from.0] = Some(seed);

        for idx in (0..=from.0).rev() {
            let Some(dz) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &dz, &mut grads);
            grads[idx] = Some(dz);
        }

        let param_nodes: Vec<(ParamId, usize)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Gradients {
            by_node: grads,
            param_nodes,
        }
    }

    fn backprop_node(&self, idx: usize, dz: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                accum(&mut grads[a.0], dz.clone());
                accum(&mut grads[b.0], dz.clone());
            }
            Op::Sub(a, b) => {
                accum(&mut grads[a.0], dz.clone());
                accum(&mut grads[b.0], dz.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = dz * &self.value(*b);
                let db = dz * &self.value(*a);
                accum(&mut grads[a.0], da);
                accum(&mut grads[b.0], db);
            }
            Op::Scale(a, c) => {
                accum(&mut grads[a.0], dz.mapv(|v| v * *c));
            }
            Op::AddScalar(a, _) => {
                accum(&mut grads[a.0], dz.clone());
            }
            Op::MatMul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let a2 = as2(av.view());
                let b2 = as2(bv.view());
                let d2 = as2(dz.view());
                // z = A' B' with A' = ta ? A^T : A, B' = tb ? B^T : B.
                let (da, db) = match (*ta, *tb) {
                    (false, false) => (d2.dot(&b2.t()), a2.t().dot(&d2)),
                    (false, true) => (d2.dot(&b2), d2.t().dot(&a2)),
                    (true, false) => (b2.dot(&d2.t()), a2.dot(&d2)),
                    (true, true) => (b2.t().dot(&d2.t()), d2.t().dot(&a2.t())),
                };
                accum(&mut grads[a.0], std2(da));
                accum(&mut grads[b.0], std2(db));
            }
            Op::AddColBias { x, bias } => {
                accum(&mut grads[x.0], dz.clone());
                let d2 = as2(dz.view());
                let db = d2.sum_axis(Axis(1));
                accum(&mut grads[bias.0], db.into_dyn());
            }
            Op::AddRowBias { x, bias } => {
                accum(&mut grads[x.0], dz.clone());
                let d2 = as2(dz.view());
                let db = d2.sum_axis(Axis(0));
                accum(&mut grads[bias.0], db.into_dyn());
            }
            Op::Sigmoid(a) => {
                let y = self.value(Var(idx));
                let da = ndarray::Zip::from(dz)
                    .and(&y)
                    .map_collect(|d, s| *d * *s * (T::one() - *s));
                accum(&mut grads[a.0], da);
            }
            Op::Silu(a) => {
                let xv = self.value(*a);
                let one = T::one();
                let da = ndarray::Zip::from(dz).and(&xv).map_collect(|d, x| {
                    let s = one / (one + (-*x).exp());
                    *d * s * (one + *x * (one - s))
                });
                accum(&mut grads[a.0], da);
            }
            Op::Softmax(a) => {
                let y = self.value(Var(idx));
                let y2 = as2(y.view());
                let d2 = as2(dz.view());
                let mut da = Array2::<T>::zeros(d2.raw_dim());
                for ((mut out, yr), dr) in da
                    .outer_iter_mut()
                    .zip(y2.outer_iter())
                    .zip(d2.outer_iter())
                {
                    let dot = yr
                        .iter()
                        .zip(dr.iter())
                        .map(|(y, d)| *y * *d)
                        .sum::<T>();
                    for ((o, y), d) in out.iter_mut().zip(yr.iter()).zip(dr.iter()) {
                        *o = *y * (*d - dot);
                    }
                }
                accum(&mut grads[a.0], da.into_dyn());
            }
            Op::Ln(a) => {
                let xv = self.value(*a);
                let da = ndarray::Zip::from(dz).and(&xv).map_collect(|d, x| *d / *x);
                accum(&mut grads[a.0], da);
            }
            Op::Abs(a) => {
                let xv = self.value(*a);
                let da = ndarray::Zip::from(dz).and(&xv).map_collect(|d, x| {
                    if *x > T::zero() {
                        *d
                    } else if *x < T::zero() {
                        -*d
                    } else {
                        T::zero()
                    }
                });
                accum(&mut grads[a.0], da);
            }
            Op::Clamp(a, lo, hi) => {
                let xv = self.value(*a);
                let da = ndarray::Zip::from(dz).and(&xv).map_collect(|d, x| {
                    if *x > *lo && *x < *hi {
                        *d
                    } else {
                        T::zero()
                    }
                });
                accum(&mut grads[a.0], da);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                let da = own_std(dz.view()).into_shape_with_order(shape).unwrap();
                accum(&mut grads[a.0], da);
            }
            Op::Transpose(a) => {
                let da = own_std(as2(dz.view()).t().into_dyn());
                accum(&mut grads[a.0], da);
            }
            Op::Concat { xs, axis } => {
                let mut offset = 0;
                for x in xs {
                    let len = self.value(*x).shape()[*axis];
                    let part = dz
                        .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                        .to_owned();
                    accum(&mut grads[x.0], part);
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let mut da = ArrayD::<T>::zeros(self.value(*x).shape().to_vec());
                let len = dz.shape()[*axis];
                da.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + len))
                    .assign(dz);
                accum(&mut grads[x.0], da);
            }
            Op::Im2col { x, geom } => {
                let d2 = as2(dz.view());
                let (oh, ow) = (geom.out_h(), geom.out_w());
                let k = geom.kernel;
                let mut da = ndarray::Array3::<T>::zeros((geom.in_ch, geom.in_h, geom.in_w));
                for c in 0..geom.in_ch {
                    for ki in 0..k {
                        for kj in 0..k {
                            let row = (c * k + ki) * k + kj;
                            let drow = d2.row(row);
                            for oy in 0..oh {
                                let iy = (oy * geom.stride + ki * geom.dilation) as isize
                                    - geom.pad as isize;
                                if iy < 0 || iy >= geom.in_h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * geom.stride + kj * geom.dilation) as isize
                                        - geom.pad as isize;
                                    if ix < 0 || ix >= geom.in_w as isize {
                                        continue;
                                    }
                                    da[(c, iy as usize, ix as usize)] =
                                        da[(c, iy as usize, ix as usize)] + drow[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
                accum(&mut grads[x.0], da.into_dyn());
            }
            Op::UpsampleNearest2x(x) => {
                let xsh = self.value(*x).shape().to_vec();
                let (c, h, w) = (xsh[0], xsh[1], xsh[2]);
                let d3 = dz.view().into_dimensionality::<Ix3>().unwrap();
                let mut da = ndarray::Array3::<T>::zeros((c, h, w));
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            da[(ci, i, j)] = d3[(ci, 2 * i, 2 * j)]
                                + d3[(ci, 2 * i + 1, 2 * j)]
                                + d3[(ci, 2 * i, 2 * j + 1)]
                                + d3[(ci, 2 * i + 1, 2 * j + 1)];
                        }
                    }
                }
                accum(&mut grads[x.0], da.into_dyn());
            }
            Op::SliceSpatial { x, top, left } => {
                let xsh = self.value(*x).shape().to_vec();
                let dsh = dz.shape();
                let mut da = ArrayD::<T>::zeros(xsh);
                da.slice_mut(ndarray::s![
                    ..,
                    *top..*top + dsh[1],
                    *left..*left + dsh[2]
                ])
                .assign(dz);
                accum(&mut grads[x.0], da);
            }
            Op::PadSpatial { x, top, left } => {
                let xsh = self.value(*x).shape().to_vec();
                let da = dz
                    .slice(ndarray::s![.., *top..*top + xsh[1], *left..*left + xsh[2]])
                    .to_owned();
                accum(&mut grads[x.0], da.into_dyn());
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x).to_owned();
                let x3 = xv.into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
                let gv = self.value(*gamma).to_owned();
                let g1 = gv.into_dimensionality::<Ix1>().unwrap();
                let d3 = dz.view().into_dimensionality::<Ix3>().unwrap();
                let per = c / groups;
                let n = T::from_f((per * h * w) as f64);

                let mut dx = ndarray::Array3::<T>::zeros((c, h, w));
                let mut dgamma = Array1::<T>::zeros(c);
                let mut dbeta = Array1::<T>::zeros(c);

                for g in 0..*groups {
                    let lo = g * per;
                    let mu = mean[g];
                    let istd = inv_std[g];
                    // Accumulate the two reductions the chain rule needs.
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for ci in lo..lo + per {
                        let gamma_c = g1[ci];
                        let mut dg = T::zero();
                        let mut db = T::zero();
                        for i in 0..h {
                            for j in 0..w {
                                let xhat = (x3[(ci, i, j)] - mu) * istd;
                                let d = d3[(ci, i, j)];
                                let dxhat = d * gamma_c;
                                sum_dxhat = sum_dxhat + dxhat;
                                sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                                dg = dg + d * xhat;
                                db = db + d;
                            }
                        }
                        dgamma[ci] = dgamma[ci] + dg;
                        dbeta[ci] = dbeta[ci] + db;
                    }
                    for ci in lo..lo + per {
                        let gamma_c = g1[ci];
                        for i in 0..h {
                            for j in 0..w {
                                let xhat = (x3[(ci, i, j)] - mu) * istd;
                                let dxhat = d3[(ci, i, j)] * gamma_c;
                                dx[(ci, i, j)] = istd
                                    * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                            }
                        }
                    }
                }
                accum(&mut grads[x.0], dx.into_dyn());
                accum(&mut grads[gamma.0], dgamma.into_dyn());
                accum(&mut grads[beta.0], dbeta.into_dyn());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x).to_owned();
                let x2 = x2_owned(xv);
                let gv = self.value(*gamma).to_owned();
                let g1 = gv.into_dimensionality::<Ix1>().unwrap();
                let d2 = as2(dz.view());
                let (rows, d) = (x2.nrows(), x2.ncols());
                let n = T::from_f(d as f64);

                let mut dx = Array2::<T>::zeros((rows, d));
                let mut dgamma = Array1::<T>::zeros(d);
                let mut dbeta = Array1::<T>::zeros(d);

                for r in 0..rows {
                    let mu = mean[r];
                    let istd = inv_std[r];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        let xhat = (x2[(r, j)] - mu) * istd;
                        let dval = d2[(r, j)];
                        let dxhat = dval * g1[j];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        dgamma[j] = dgamma[j] + dval * xhat;
                        dbeta[j] = dbeta[j] + dval;
                    }
                    for j in 0..d {
                        let xhat = (x2[(r, j)] - mu) * istd;
                        let dxhat = d2[(r, j)] * g1[j];
                        dx[(r, j)] = istd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
                accum(&mut grads[x.0], dx.into_dyn());
                accum(&mut grads[gamma.0], dgamma.into_dyn());
                accum(&mut grads[beta.0], dbeta.into_dyn());
            }
            Op::MeanAxis0(x) => {
                let xsh = self.value(*x).shape().to_vec();
                let rows = xsh[0];
                let scale = T::one() / T::from_f(rows as f64);
                let d1 = dz.view().into_dimensionality::<Ix1>().unwrap();
                let mut da = Array2::<T>::zeros((rows, xsh[1]));
                for mut row in da.outer_iter_mut() {
                    row.zip_mut_with(&d1, |o, d| *o = *d * scale);
                }
                accum(&mut grads[x.0], da.into_dyn());
            }
            Op::MeanAll(x) => {
                let xsh = self.value(*x).shape().to_vec();
                let n: usize = xsh.iter().product();
                let g = dz.iter().next().cloned().unwrap() / T::from_f(n as f64);
                accum(&mut grads[x.0], ArrayD::from_elem(xsh, g));
            }
            Op::SumAll(x) => {
                let xsh = self.value(*x).shape().to_vec();
                let g = dz.iter().next().cloned().unwrap();
                accum(&mut grads[x.0], ArrayD::from_elem(xsh, g));
            }
            Op::StopGrad => {}
        }
    }
}

fn x2_owned<T: Real>(a: ArrayD<T>) -> Array2<T> {
    a.into_dimensionality::<Ix2>().expect("expected 2-D value")
}

fn accum<T: Real>(slot: &mut Option<ArrayD<T>>, g: ArrayD<T>) {
    match slot {
        Some(s) => *s += &g,
        None => *slot = Some(g),
    }
}
