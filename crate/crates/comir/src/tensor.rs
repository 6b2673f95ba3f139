//! Reverse-mode autodiff over dense `f64` arrays.
//!
//! A [`Tape`] records every operation of one forward pass; [`Var`] is a copyable
//! handle into it. Calling [`Var::backward`] on a scalar output walks the tape
//! in reverse and accumulates gradients for every node, including leaves.
//! Parameters live outside the tape (see [`crate::nn::ParamStore`]); each
//! training step builds a fresh tape, so no graph state survives a step.

use std::cell::RefCell;

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

use crate::kernels::{self, ConvSpec};
use crate::par::Exec;

type BackFn = Box<dyn Fn(&ArrayD<f64>, &mut dyn FnMut(usize, ArrayD<f64>))>;

struct Node {
    value: ArrayD<f64>,
    back: Option<BackFn>,
}

/// Records one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    /// Execution strategy used by batch-level kernels (conv).
    pub exec: Exec,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Per-node gradients produced by [`Var::backward`].
pub struct Grads {
    g: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&ArrayD<f64>> {
        self.g[v.id].as_ref()
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<ArrayD<f64>> {
        self.g[v.id].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), exec: Exec::default() }
    }

    pub fn with_exec(exec: Exec) -> Self {
        Tape { nodes: RefCell::new(Vec::new()), exec }
    }

    fn push(&self, value: ArrayD<f64>, back: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, back });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Insert a leaf. Gradients accumulate for leaves like any other node.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, None)
    }

    pub fn leaf2(&self, value: Array2<f64>) -> Var<'_> {
        self.leaf(value.into_dyn())
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus: `max(x,0) + log1p(exp(-|x|))`.
pub fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn value(&self) -> ArrayD<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Extract the single element of a scalar (0-d or length-1) node.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "item() on non-scalar of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    fn unary<F, G>(&self, f: F, dfdx: G) -> Var<'t>
    where
        F: Fn(f64) -> f64,
        G: Fn(f64) -> f64 + 'static,
    {
        let x = self.value();
        let y = x.mapv(&f);
        let pid = self.id;
        let back: BackFn = Box::new(move |g, sink| {
            let gx = ndarray::Zip::from(g).and(&x).map_collect(|gv, xv| gv * dfdx(*xv));
            sink(pid, gx);
        });
        self.tape.push(y, Some(back))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(stable_sigmoid, |x| {
            let s = stable_sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(|x| x.tanh(), |x| 1.0 - x.tanh() * x.tanh())
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(stable_softplus, stable_sigmoid)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(|x| x.exp(), |x| x.exp())
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|x| x * x, |x| 2.0 * x)
    }

    pub fn sqrt_eps(&self, eps: f64) -> Var<'t> {
        self.unary(move |x| (x + eps).sqrt(), move |x| 0.5 / (x + eps).sqrt())
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let y = self.value().mapv(|x| x * c);
        let pid = self.id;
        let back: BackFn = Box::new(move |g, sink| sink(pid, g.mapv(|gv| gv * c)));
        self.tape.push(y, Some(back))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let y = self.value().mapv(|x| x + c);
        let pid = self.id;
        let back: BackFn = Box::new(move |g, sink| sink(pid, g.clone()));
        self.tape.push(y, Some(back))
    }

    fn binary_same_shape<F>(
        &self,
        other: Var<'t>,
        f: F,
        back: BackFn,
    ) -> Var<'t>
    where
        F: Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
    {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let y = f(&a, &b);
        self.tape.push(y, Some(back))
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let (pa, pb) = (self.id, other.id);
        self.binary_same_shape(
            other,
            |a, b| a + b,
            Box::new(move |g, sink| {
                sink(pa, g.clone());
                sink(pb, g.clone());
            }),
        )
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let (pa, pb) = (self.id, other.id);
        self.binary_same_shape(
            other,
            |a, b| a - b,
            Box::new(move |g, sink| {
                sink(pa, g.clone());
                sink(pb, g.mapv(|x| -x));
            }),
        )
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let (pa, pb) = (self.id, other.id);
        let (av, bv) = (self.value(), other.value());
        self.binary_same_shape(
            other,
            |a, b| a * b,
            Box::new(move |g, sink| {
                sink(pa, g * &bv);
                sink(pb, g * &av);
            }),
        )
    }

    pub fn div(&self, other: Var<'t>) -> Var<'t> {
        let (pa, pb) = (self.id, other.id);
        let (av, bv) = (self.value(), other.value());
        self.binary_same_shape(
            other,
            |a, b| a / b,
            Box::new(move |g, sink| {
                sink(pa, g / &bv);
                sink(pb, ndarray::Zip::from(g).and(&av).and(&bv).map_collect(|g, a, b| -g * a / (b * b)));
            }),
        )
    }

    /// Elementwise product with a constant (no gradient to the constant).
    pub fn mul_const(&self, c: &ArrayD<f64>) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape(), c.shape());
        let y = &a * c;
        let pid = self.id;
        let cc = c.clone();
        let back: BackFn = Box::new(move |g, sink| sink(pid, g * &cc));
        self.tape.push(y, Some(back))
    }

    pub fn add_const(&self, c: &ArrayD<f64>) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.shape(), c.shape());
        let y = &a + c;
        let pid = self.id;
        let back: BackFn = Box::new(move |g, sink| sink(pid, g.clone()));
        self.tape.push(y, Some(back))
    }

    /// Matrix product of 2-d nodes: `[B,K] x [K,N] -> [B,N]`.
    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let a = self.value().into_dimensionality::<ndarray::Ix2>().expect("matmul lhs 2-d");
        let b = other.value().into_dimensionality::<ndarray::Ix2>().expect("matmul rhs 2-d");
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dim");
        let y = a.dot(&b);
        let (pa, pb) = (self.id, other.id);
        let back: BackFn = Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            sink(pa, g2.dot(&b.t()).into_dyn());
            sink(pb, a.t().dot(&g2).into_dyn());
        });
        self.tape.push(y.into_dyn(), Some(back))
    }

    pub fn sum_all(&self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let y = ArrayD::from_elem(IxDyn(&[]), a.sum());
        let pid = self.id;
        let back: BackFn = Box::new(move |g, sink| {
            let gv = *g.iter().next().unwrap();
            sink(pid, ArrayD::from_elem(IxDyn(&shape), gv));
        });
        self.tape.push(y, Some(back))
    }

    pub fn mean_all(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Row sums of a 2-d node: `[B,N] -> [B]`.
    pub fn sum_cols(&self) -> Var<'t> {
        let a = self.value().into_dimensionality::<ndarray::Ix2>().expect("sum_cols 2-d");
        let (bsz, n) = a.dim();
        let y = a.sum_axis(Axis(1));
        let pid = self.id;
        let back: BackFn = Box::new(move |g, sink| {
            let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut gx = Array2::<f64>::zeros((bsz, n));
            for b in 0..bsz {
                gx.row_mut(b).fill(g1[b]);
            }
            sink(pid, gx.into_dyn());
        });
        self.tape.push(y.into_dyn(), Some(back))
    }

    /// `[B,N] + v[B]` broadcast across columns.
    pub fn add_col_vec(&self, v: Var<'t>) -> Var<'t> {
        let a = self.value().into_dimensionality::<ndarray::Ix2>().expect("add_col_vec 2-d");
        let vv = v.value().into_dimensionality::<ndarray::Ix1>().expect("vector");
        assert_eq!(a.nrows(), vv.len());
        let mut y = a.clone();
        for (mut row, b) in y.axis_iter_mut(Axis(0)).zip(vv.iter()) {
            row += *b;
        }
        let (pa, pv) = (self.id, v.id);
        let back: BackFn = Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            sink(pa, g2.to_owned().into_dyn());
            sink(pv, g2.sum_axis(Axis(1)).into_dyn());
        });
        self.tape.push(y.into_dyn(), Some(back))
    }

    /// `[B,N] + v[N]` broadcast across rows.
    pub fn add_row_vec(&self, v: Var<'t>) -> Var<'t> {
        let a = self.value().into_dimensionality::<ndarray::Ix2>().expect("add_row_vec 2-d");
        let vv = v.value().into_dimensionality::<ndarray::Ix1>().expect("vector");
        assert_eq!(a.ncols(), vv.len());
        let y = &a + &vv;
        let (pa, pv) = (self.id, v.id);
        let back: BackFn = Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            sink(pa, g2.to_owned().into_dyn());
            sink(pv, g2.sum_axis(Axis(0)).into_dyn());
        });
        self.tape.push(y.into_dyn(), Some(back))
    }

    /// Concatenate along axis 1 (columns for 2-d, channels for 4-d).
    pub fn concat_axis1(&self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let y = ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("concat shapes");
        let na = a.shape()[1];
        let (pa, pb) = (self.id, other.id);
        let back: BackFn = Box::new(move |g, sink| {
            let ga = g.slice_axis(Axis(1), ndarray::Slice::from(0..na)).to_owned();
            let gb = g.slice_axis(Axis(1), ndarray::Slice::from(na..)).to_owned();
            sink(pa, ga);
            sink(pb, gb);
        });
        self.tape.push(y, Some(back))
    }

    /// Columns `[start, end)` of a 2-d node.
    pub fn slice_cols(&self, start: usize, end: usize) -> Var<'t> {
        let a = self.value().into_dimensionality::<ndarray::Ix2>().expect("slice_cols 2-d");
        let (bsz, n) = a.dim();
        assert!(end <= n);
        let y = a.slice(ndarray::s![.., start..end]).to_owned();
        let pid = self.id;
        let back: BackFn = Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut gx = Array2::<f64>::zeros((bsz, n));
            gx.slice_mut(ndarray::s![.., start..end]).assign(&g2);
            sink(pid, gx.into_dyn());
        });
        self.tape.push(y.into_dyn(), Some(back))
    }

    /// Reorder rows (axis 0) by `perm`: `y[k] = x[perm[k]]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Var<'t> {
        let a = self.value();
        assert_eq!(perm.len(), a.shape()[0]);
        let y = a.select(Axis(0), perm);
        let pid = self.id;
        let perm = perm.to_vec();
        let shape = a.shape().to_vec();
        let back: BackFn = Box::new(move |g, sink| {
            let mut gx = ArrayD::<f64>::zeros(IxDyn(&shape));
            for (k, &p) in perm.iter().enumerate() {
                let mut dst = gx.index_axis_mut(Axis(0), p);
                dst += &g.index_axis(Axis(0), k);
            }
            sink(pid, gx);
        });
        self.tape.push(y, Some(back))
    }

    /// Row gather with repetition: `y[k] = x[idx[k]]`; backward scatter-adds.
    pub fn gather_rows(&self, idx: &[usize]) -> Var<'t> {
        let a = self.value();
        let y = a.select(Axis(0), idx);
        let pid = self.id;
        let idx = idx.to_vec();
        let shape = a.shape().to_vec();
        let back: BackFn = Box::new(move |g, sink| {
            let mut gx = ArrayD::<f64>::zeros(IxDyn(&shape));
            for (k, &p) in idx.iter().enumerate() {
                let mut dst = gx.index_axis_mut(Axis(0), p);
                dst += &g.index_axis(Axis(0), k);
            }
            sink(pid, gx);
        });
        self.tape.push(y, Some(back))
    }

    /// `y[b] = x[b, idx[b]]` for a 2-d node.
    pub fn take_per_row(&self, idx: &[usize]) -> Var<'t> {
        let a = self.value().into_dimensionality::<ndarray::Ix2>().expect("take_per_row 2-d");
        let (bsz, n) = a.dim();
        assert_eq!(idx.len(), bsz);
        let y = Array1::from_iter(idx.iter().enumerate().map(|(b, &j)| a[[b, j]]));
        let pid = self.id;
        let idx = idx.to_vec();
        let back: BackFn = Box::new(move |g, sink| {
            let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut gx = Array2::<f64>::zeros((bsz, n));
            for (b, &j) in idx.iter().enumerate() {
                gx[[b, j]] = g1[b];
            }
            sink(pid, gx.into_dyn());
        });
        self.tape.push(y.into_dyn(), Some(back))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        let old = a.shape().to_vec();
        let y = a.into_shape(IxDyn(shape)).expect("reshape size");
        let pid = self.id;
        let back: BackFn = Box::new(move |g, sink| {
            sink(pid, g.clone().into_shape(IxDyn(&old)).unwrap());
        });
        self.tape.push(y, Some(back))
    }

    /// Row-wise log-softmax of a 2-d node.
    pub fn log_softmax_rows(&self) -> Var<'t> {
        let a = self.value().into_dimensionality::<ndarray::Ix2>().expect("log_softmax 2-d");
        let mut y = a.clone();
        for mut row in y.axis_iter_mut(Axis(0)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let soft = y.mapv(f64::exp);
        let pid = self.id;
        let back: BackFn = Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let rowsums = g2.sum_axis(Axis(1));
            let mut gx = g2.to_owned();
            for ((mut row, s), srow) in
                gx.axis_iter_mut(Axis(0)).zip(rowsums.iter()).zip(soft.axis_iter(Axis(0)))
            {
                row.zip_mut_with(&srow, |gv, sv| *gv -= s * sv);
            }
            sink(pid, gx.into_dyn());
        });
        self.tape.push(y.into_dyn(), Some(back))
    }

    /// Normalize each row to unit L2 norm (rows with norm < `eps` divide by `eps`).
    pub fn l2_normalize_rows(&self, eps: f64) -> Var<'t> {
        let a = self.value().into_dimensionality::<ndarray::Ix2>().expect("normalize 2-d");
        let norms: Vec<f64> =
            a.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt().max(eps)).collect();
        let mut y = a.clone();
        for (mut row, n) in y.axis_iter_mut(Axis(0)).zip(norms.iter()) {
            row.mapv_inplace(|x| x / n);
        }
        let yv = y.clone();
        let pid = self.id;
        let back: BackFn = Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut gx = g2.to_owned();
            for ((mut grow, yrow), n) in
                gx.axis_iter_mut(Axis(0)).zip(yv.axis_iter(Axis(0))).zip(norms.iter())
            {
                let dot = grow.dot(&yrow);
                grow.zip_mut_with(&yrow, |gv, yv| *gv = (*gv - dot * yv) / n);
            }
            sink(pid, gx.into_dyn());
        });
        self.tape.push(y.into_dyn(), Some(back))
    }

    /// Batched convolution; `self` is `[B,C,H,W]`, `w` is `[O,C,k,k]`, `b` is `[O]`.
    pub fn conv2d(&self, w: Var<'t>, b: Var<'t>, spec: ConvSpec) -> Var<'t> {
        let input = self.value().into_dimensionality::<ndarray::Ix4>().expect("conv input 4-d");
        let weight = w.value().into_dimensionality::<ndarray::Ix4>().expect("conv weight 4-d");
        let bias = b.value().into_dimensionality::<ndarray::Ix1>().expect("conv bias 1-d");
        let exec = self.tape.exec;
        let y = kernels::conv2d_forward(&input.view(), &weight.view(), &bias, spec, exec);
        let (pi, pw, pb) = (self.id, w.id, b.id);
        let back: BackFn = Box::new(move |g, sink| {
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let (gin, gw, gb) =
                kernels::conv2d_backward(&input.view(), &weight.view(), &g4, spec, exec);
            sink(pi, gin.into_dyn());
            sink(pw, gw.into_dyn());
            sink(pb, gb.into_dyn());
        });
        self.tape.push(y.into_dyn(), Some(back))
    }

    /// Global average pool `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&self) -> Var<'t> {
        let a = self.value().into_dimensionality::<ndarray::Ix4>().expect("pool 4-d");
        let (bsz, c, h, w) = a.dim();
        let y = kernels::global_avg_pool(&a.view());
        let pid = self.id;
        let back: BackFn = Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let inv = 1.0 / (h * w) as f64;
            let mut gx = ndarray::Array4::<f64>::zeros((bsz, c, h, w));
            for b in 0..bsz {
                for ci in 0..c {
                    let gv = g2[[b, ci]] * inv;
                    gx.slice_mut(ndarray::s![b, ci, .., ..]).fill(gv);
                }
            }
            sink(pid, gx.into_dyn());
        });
        self.tape.push(y.into_dyn(), Some(back))
    }

    /// Tile vectors over a spatial grid: `[B,D] -> [B,D,h,w]`.
    pub fn tile_spatial(&self, h: usize, w: usize) -> Var<'t> {
        let a = self.value().into_dimensionality::<ndarray::Ix2>().expect("tile 2-d");
        let y = kernels::tile_spatial(&a, h, w);
        let pid = self.id;
        let back: BackFn = Box::new(move |g, sink| {
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let gx = g4.sum_axis(Axis(3)).sum_axis(Axis(2));
            sink(pid, gx.into_dyn());
        });
        self.tape.push(y.into_dyn(), Some(back))
    }

    /// Permute axes, e.g. `[B,L,E] -> [B,E,L]` with `&[0,2,1]`.
    pub fn permute_axes(&self, axes: &[usize]) -> Var<'t> {
        let a = self.value();
        assert_eq!(axes.len(), a.ndim());
        let y = a.permuted_axes(IxDyn(axes)).as_standard_layout().to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let pid = self.id;
        let back: BackFn = Box::new(move |g, sink| {
            let gx = g
                .clone()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .to_owned();
            sink(pid, gx);
        });
        self.tape.push(y, Some(back))
    }

    /// Multiply by a scalar (0-d) node, with gradient to both factors.
    pub fn scale_by(&self, s: Var<'t>) -> Var<'t> {
        let a = self.value();
        let sv = s.item();
        let y = a.mapv(|x| x * sv);
        let (pa, ps) = (self.id, s.id);
        let back: BackFn = Box::new(move |g, sink| {
            sink(pa, g.mapv(|gv| gv * sv));
            let gs = (g * &a).sum();
            sink(ps, ArrayD::from_elem(IxDyn(&[]), gs));
        });
        self.tape.push(y, Some(back))
    }

    /// Run reverse-mode accumulation from this scalar node.
    pub fn backward(&self) -> Grads {
        let nodes = self.tape.nodes.borrow();
        assert_eq!(
            nodes[self.id].value.len(),
            1,
            "backward() from non-scalar node"
        );
        let mut g: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        let seed_shape = nodes[self.id].value.shape().to_vec();
        g[self.id] = Some(ArrayD::from_elem(IxDyn(&seed_shape), 1.0));
        for id in (0..=self.id).rev() {
            let Some(gi) = g[id].clone() else { continue };
            if let Some(back) = &nodes[id].back {
                back(&gi, &mut |pid, contrib| {
                    match &mut g[pid] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                });
            }
        }
        Grads { g }
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(&self, rhs)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(&self, rhs)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(&self, rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn softplus_identities() {
        assert!((stable_softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((stable_softplus(-10.0) - 4.53989e-5).abs() < 1e-9);
        assert_eq!(stable_softplus(1000.0), 1000.0);
    }

    #[test]
    fn chain_rule_through_matmul_and_sigmoid() {
        let tape = Tape::new();
        let a = tape.leaf2(arr2(&[[1.0, 2.0], [3.0, -1.0]]));
        let b = tape.leaf2(arr2(&[[0.5], [-0.25]]));
        let loss = a.matmul(b).sigmoid().sum_all();
        let grads = loss.backward();

        // Finite differences on a[0,0].
        let f = |a00: f64| {
            let t = Tape::new();
            let av = t.leaf2(arr2(&[[a00, 2.0], [3.0, -1.0]]));
            let bv = t.leaf2(arr2(&[[0.5], [-0.25]]));
            av.matmul(bv).sigmoid().sum_all().item()
        };
        let h = 1e-6;
        let fd = (f(1.0 + h) - f(1.0 - h)) / (2.0 * h);
        let ga = grads.get(a).unwrap();
        assert!((ga[[0, 0]] - fd).abs() < 1e-8);
    }

    #[test]
    fn gather_and_permute_grads() {
        let tape = Tape::new();
        let m = tape.leaf2(arr2(&[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]));
        let picked = m.gather_rows(&[2, 2, 0]);
        let loss = picked.sum_all();
        let g = loss.backward();
        let gm = g.get(m).unwrap();
        assert_eq!(gm[[2, 0]], 2.0);
        assert_eq!(gm[[0, 0]], 1.0);
        assert_eq!(gm[[1, 0]], 0.0);
    }

    #[test]
    fn log_softmax_rows_sums_to_one() {
        let tape = Tape::new();
        let x = tape.leaf2(arr2(&[[2.0, 0.0, 0.0]]));
        let ls = x.log_softmax_rows();
        let p: f64 = ls.value().mapv(f64::exp).sum();
        assert!((p - 1.0).abs() < 1e-12);
        // -log softmax at the large entry: e^2/(e^2+2)
        let expected = -(2f64.exp() / (2f64.exp() + 2.0)).ln();
        assert!((-ls.value()[[0, 0]] - expected).abs() < 1e-12);
    }
}
