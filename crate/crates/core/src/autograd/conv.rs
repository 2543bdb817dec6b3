//! Stride-1 "same" 3D convolution, pointwise linear layers and 2×2×2 max
//! pooling on channels-last grids.
//!
//! Convolution weights are stored im2col-ready as `[k³·C_in, C_out]` with
//! the kernel offset `(dx, dy, dz)` major (dz fastest) and the input
//! channel minor. The k = 3 path lowers one axis-0 slice at a time to keep
//! the column buffer small.

use super::gemm::{gemm, Mat};
use super::{BackwardFn, Graph, Tensor, Var};

/// Fill the im2col rows of output slice `x` for a 3×3×3 kernel.
fn im2col_slice(input: &[f32], spatial: [usize; 3], ci: usize, x: usize, col: &mut [f32]) {
    let [d, h, w] = spatial;
    let k = 27 * ci;
    for y in 0..h {
        for z in 0..w {
            let row = &mut col[(y * w + z) * k..(y * w + z + 1) * k];
            let mut off = 0;
            for sx in x as isize - 1..=x as isize + 1 {
                for sy in y as isize - 1..=y as isize + 1 {
                    for sz in z as isize - 1..=z as isize + 1 {
                        let dst = &mut row[off * ci..(off + 1) * ci];
                        off += 1;
                        if sx < 0 || sy < 0 || sz < 0 || sx >= d as isize || sy >= h as isize || sz >= w as isize {
                            dst.fill(0.0);
                        } else {
                            let src = ((sx as usize * h + sy as usize) * w + sz as usize) * ci;
                            dst.copy_from_slice(&input[src..src + ci]);
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add im2col rows of slice `x` back onto the input gradient.
fn col2im_slice(col: &[f32], spatial: [usize; 3], ci: usize, x: usize, grad_input: &mut [f32]) {
    let [d, h, w] = spatial;
    let k = 27 * ci;
    for y in 0..h {
        for z in 0..w {
            let row = &col[(y * w + z) * k..(y * w + z + 1) * k];
            let mut off = 0;
            for sx in x as isize - 1..=x as isize + 1 {
                for sy in y as isize - 1..=y as isize + 1 {
                    for sz in z as isize - 1..=z as isize + 1 {
                        let src = &row[off * ci..(off + 1) * ci];
                        off += 1;
                        if sx < 0 || sy < 0 || sz < 0 || sx >= d as isize || sy >= h as isize || sz >= w as isize {
                            continue;
                        }
                        let dst = ((sx as usize * h + sy as usize) * w + sz as usize) * ci;
                        for (g, v) in grad_input[dst..dst + ci].iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                }
            }
        }
    }
}

fn broadcast_bias(rows: usize, bias: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * bias.len());
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

fn column_sums(data: &[f32], cols: usize) -> Vec<f32> {
    let mut acc = vec![0f32; cols];
    for row in data.chunks_exact(cols) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc
}

/// `y = x·W + b` over the last axis, for any number of leading axes.
pub fn linear(g: &Graph, x: &Var, weight: &Var, bias: &Var) -> Var {
    let ci = x.value().channels();
    let [wi, co] = weight.shape() else {
        panic!("linear weight must be 2D, got {:?}", weight.shape())
    };
    let (wi, co) = (*wi, *co);
    assert_eq!(wi, ci, "linear: input has {ci} channels, weight expects {wi}");
    assert_eq!(bias.shape(), &[co]);
    let rows = x.value().len() / ci;
    let mut out = broadcast_bias(rows, bias.value().data());
    gemm(
        1.0,
        Mat::row_major(x.value().data(), rows, ci),
        Mat::row_major(weight.value().data(), ci, co),
        1.0,
        &mut out,
        co,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = co;
    let (input, w) = (x.shared(), weight.shared());
    g.record(Tensor::new(shape, out), &[x, weight, bias], move || {
        Box::new(move |grad: &Tensor, needs: &[bool]| {
            let gd = grad.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![0f32; rows * ci];
                gemm(1.0, Mat::row_major(gd, rows, co), Mat::transposed(w.data(), co, ci), 0.0, &mut dx, ci);
                Tensor::new(input.shape().to_vec(), dx)
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0f32; ci * co];
                gemm(1.0, Mat::transposed(input.data(), ci, rows), Mat::row_major(gd, rows, co), 0.0, &mut dw, co);
                Tensor::new(vec![ci, co], dw)
            });
            let db = needs[2].then(|| Tensor::new(vec![co], column_sums(gd, co)));
            vec![dx, dw, db]
        }) as BackwardFn
    })
}

/// 3D convolution with kernel edge `kernel` ∈ {1, 3}, stride 1 and
/// zero padding that preserves the spatial shape.
pub fn conv3d(g: &Graph, x: &Var, weight: &Var, bias: &Var, kernel: usize) -> Var {
    match kernel {
        1 => linear(g, x, weight, bias),
        3 => conv3x3(g, x, weight, bias),
        k => panic!("unsupported kernel size {k}"),
    }
}

fn conv3x3(g: &Graph, x: &Var, weight: &Var, bias: &Var) -> Var {
    let spatial = x.value().spatial();
    let ci = x.value().channels();
    let [kk, co] = weight.shape() else {
        panic!("conv weight must be 2D, got {:?}", weight.shape())
    };
    let (kk, co) = (*kk, *co);
    assert_eq!(kk, 27 * ci, "conv3d: weight rows {kk} != 27 × {ci} input channels");
    assert_eq!(bias.shape(), &[co]);
    let [d, h, w] = spatial;
    let hw = h * w;
    let mut out = broadcast_bias(d * hw, bias.value().data());
    let mut col = vec![0f32; hw * kk];
    for xs in 0..d {
        im2col_slice(x.value().data(), spatial, ci, xs, &mut col);
        gemm(
            1.0,
            Mat::row_major(&col, hw, kk),
            Mat::row_major(weight.value().data(), kk, co),
            1.0,
            &mut out[xs * hw * co..(xs + 1) * hw * co],
            co,
        );
    }
    drop(col);
    let (input, wt) = (x.shared(), weight.shared());
    g.record(Tensor::new(vec![d, h, w, co], out), &[x, weight, bias], move || {
        Box::new(move |grad: &Tensor, needs: &[bool]| {
            let gd = grad.data();
            let mut col = vec![0f32; hw * kk];
            let mut dcol = if needs[0] { vec![0f32; hw * kk] } else { Vec::new() };
            let mut dx = needs[0].then(|| vec![0f32; input.len()]);
            let mut dw = needs[1].then(|| vec![0f32; kk * co]);
            for xs in 0..d {
                let gs = &gd[xs * hw * co..(xs + 1) * hw * co];
                if let Some(dw) = dw.as_mut() {
                    im2col_slice(input.data(), spatial, ci, xs, &mut col);
                    gemm(1.0, Mat::transposed(&col, kk, hw), Mat::row_major(gs, hw, co), 1.0, dw, co);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(1.0, Mat::row_major(gs, hw, co), Mat::transposed(wt.data(), co, kk), 0.0, &mut dcol, kk);
                    col2im_slice(&dcol, spatial, ci, xs, dx);
                }
            }
            vec![
                dx.map(|v| Tensor::new(input.shape().to_vec(), v)),
                dw.map(|v| Tensor::new(vec![kk, co], v)),
                needs[2].then(|| Tensor::new(vec![co], column_sums(gd, co))),
            ]
        }) as BackwardFn
    })
}

/// 2×2×2 max pooling; odd axes are handled by a partial last window.
pub fn max_pool2(g: &Graph, x: &Var) -> Var {
    let [d, h, w] = x.value().spatial();
    let c = x.value().channels();
    let out_shape = [d.div_ceil(2), h.div_ceil(2), w.div_ceil(2)];
    let [od, oh, ow] = out_shape;
    let src = x.value().data();
    let mut out = vec![f32::NEG_INFINITY; od * oh * ow * c];
    let mut arg = vec![0u32; od * oh * ow * c];
    for px in 0..od {
        for py in 0..oh {
            for pz in 0..ow {
                let o = ((px * oh + py) * ow + pz) * c;
                for sx in 2 * px..(2 * px + 2).min(d) {
                    for sy in 2 * py..(2 * py + 2).min(h) {
                        for sz in 2 * pz..(2 * pz + 2).min(w) {
                            let s = ((sx * h + sy) * w + sz) * c;
                            for ch in 0..c {
                                if src[s + ch] > out[o + ch] {
                                    out[o + ch] = src[s + ch];
                                    arg[o + ch] = (s + ch) as u32;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let in_shape = x.shape().to_vec();
    g.record(Tensor::new(vec![od, oh, ow, c], out), &[x], move || {
        Box::new(move |grad: &Tensor, _: &[bool]| {
            let n: usize = in_shape.iter().product();
            let mut dx = vec![0f32; n];
            for (gv, &i) in grad.data().iter().zip(&arg) {
                dx[i as usize] += gv;
            }
            vec![Some(Tensor::new(in_shape, dx))]
        }) as BackwardFn
    })
}
