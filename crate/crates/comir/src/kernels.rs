//! Raw array kernels: batched 2-D convolution (im2col + GEMM), pooling and
//! tiling. These operate on plain `ndarray` arrays; the autodiff tape wraps
//! them with the matching backward passes. Batch loops honour [`Exec`] so the
//! sequential and rayon paths can be benchmarked against each other.

use ndarray::{Array1, Array2, Array4, ArrayView4, Axis};

use crate::par::{map_indexed, Exec};

/// Geometry of one convolution. Padding is always `(k-1)/2` ("same" for
/// stride 1, halving for stride 2 on even inputs).
#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad() - self.kernel) / self.stride + 1
    }
}

fn im2col(input: &ArrayView4<f64>, b: usize, spec: ConvSpec) -> Array2<f64> {
    let (_, c, h, w) = input.dim();
    let (k, s, p) = (spec.kernel, spec.stride, spec.pad());
    let (ho, wo) = (spec.out_len(h), spec.out_len(w));
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * s + ki) as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * s + kj) as isize - p as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * wo + oj]] = input[[b, ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, spec: ConvSpec) -> ndarray::Array3<f64> {
    let (k, s, p) = (spec.kernel, spec.stride, spec.pad());
    let (ho, wo) = (spec.out_len(h), spec.out_len(w));
    let mut img = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * s + ki) as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * s + kj) as isize - p as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        img[[ci, ii as usize, jj as usize]] += cols[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    img
}

/// Forward convolution: `input [B,C,H,W]`, `weight [O,C,k,k]`, `bias [O]`.
pub fn conv2d_forward(
    input: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    bias: &Array1<f64>,
    spec: ConvSpec,
    exec: Exec,
) -> Array4<f64> {
    let (bsz, c, h, w) = input.dim();
    let (o, cw, k, _) = weight.dim();
    assert_eq!(c, cw, "conv channel mismatch");
    assert_eq!(k, spec.kernel);
    let (ho, wo) = (spec.out_len(h), spec.out_len(w));
    let wmat = weight.to_shape((o, c * k * k)).unwrap().to_owned();

    let per_sample = map_indexed(exec, bsz, |b| {
        let cols = im2col(input, b, spec);
        let mut out = wmat.dot(&cols);
        for (mut row, bv) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row += *bv;
        }
        out
    });

    let mut out = Array4::<f64>::zeros((bsz, o, ho, wo));
    for (b, m) in per_sample.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), b)
            .assign(&m.into_shape((o, ho, wo)).unwrap());
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight and bias.
pub fn conv2d_backward(
    input: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    gout: &ArrayView4<f64>,
    spec: ConvSpec,
    exec: Exec,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (bsz, c, h, w) = input.dim();
    let (o, _, k, _) = weight.dim();
    let (ho, wo) = (spec.out_len(h), spec.out_len(w));
    let wmat = weight.to_shape((o, c * k * k)).unwrap().to_owned();

    let per_sample = map_indexed(exec, bsz, |b| {
        let cols = im2col(input, b, spec);
        let gmat = gout
            .index_axis(Axis(0), b)
            .to_shape((o, ho * wo))
            .unwrap()
            .to_owned();
        let gw = gmat.dot(&cols.t());
        let gcols = wmat.t().dot(&gmat);
        let gin = col2im(&gcols, c, h, w, spec);
        let gb = gmat.sum_axis(Axis(1));
        (gin, gw, gb)
    });

    let mut ginput = Array4::<f64>::zeros((bsz, c, h, w));
    let mut gweight = Array2::<f64>::zeros((o, c * k * k));
    let mut gbias = Array1::<f64>::zeros(o);
    for (b, (gin, gw, gb)) in per_sample.into_iter().enumerate() {
        ginput.index_axis_mut(Axis(0), b).assign(&gin);
        gweight += &gw;
        gbias += &gb;
    }
    (
        ginput,
        gweight.into_shape((o, c, k, k)).unwrap(),
        gbias,
    )
}

/// Global average pool `[B,C,H,W] -> [B,C]`.
pub fn global_avg_pool(input: &ArrayView4<f64>) -> Array2<f64> {
    let (bsz, c, h, w) = input.dim();
    let mut out = Array2::<f64>::zeros((bsz, c));
    let inv = 1.0 / (h * w) as f64;
    for b in 0..bsz {
        for ci in 0..c {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += input[[b, ci, i, j]];
                }
            }
            out[[b, ci]] = acc * inv;
        }
    }
    out
}

/// Tile a batch of vectors over a spatial grid: `[B,D] -> [B,D,h,w]`.
pub fn tile_spatial(input: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (bsz, d) = input.dim();
    let mut out = Array4::<f64>::zeros((bsz, d, h, w));
    for b in 0..bsz {
        for di in 0..d {
            let v = input[[b, di]];
            for i in 0..h {
                for j in 0..w {
                    out[[b, di, i, j]] = v;
                }
            }
        }
    }
    out
}
