//! Fused (shifted-)window multi-head self-attention.
//!
//! The grid is conceptually zero-padded up to a multiple of the window and
//! cyclically rolled by `-shift`. Padding positions never become tokens, so
//! they receive and contribute no attention. Tokens that the roll brings
//! together from different regions are masked from each other exactly as
//! in the reference shifted-window scheme.

use super::gemm::{gemm, Mat};
use super::{BackwardFn, Graph, Tensor, Var};
use crate::volumes::{grid_iter, Shape3};

/// Token layout of one window.
pub(crate) struct Window {
    /// Flat voxel index of each token.
    pub voxels: Vec<usize>,
    /// Position inside the window, per axis.
    local: Vec<[usize; 3]>,
    /// Region label used for the shift mask.
    region: Vec<u8>,
}

pub(crate) fn partition(spatial: Shape3, window: Shape3, shift: Shape3) -> Vec<Window> {
    let padded: [usize; 3] = [0, 1, 2].map(|a| spatial[a].div_ceil(window[a]) * window[a]);
    let counts: [usize; 3] = [0, 1, 2].map(|a| padded[a] / window[a]);
    let mut windows: Vec<Window> = (0..counts.iter().product())
        .map(|_| Window { voxels: Vec::new(), local: Vec::new(), region: Vec::new() })
        .collect();
    for (i, p) in grid_iter(spatial) {
        let mut win = 0;
        let mut local = [0; 3];
        let mut region = 0u8;
        for a in 0..3 {
            let r = (p[a] + padded[a] - shift[a] % padded[a]) % padded[a];
            win = win * counts[a] + r / window[a];
            local[a] = r % window[a];
            let band = if shift[a] == 0 || r < padded[a] - window[a] {
                0
            } else if r < padded[a] - shift[a] {
                1
            } else {
                2
            };
            region = region * 3 + band;
        }
        let w = &mut windows[win];
        w.voxels.push(i);
        w.local.push(local);
        w.region.push(region);
    }
    windows.retain(|w| !w.voxels.is_empty());
    windows
}

/// Rows of the relative-position bias table, `(2w−1)³` of them.
pub fn bias_table_len(window: Shape3) -> usize {
    window.iter().map(|w| 2 * w - 1).product()
}

fn relative_index(a: [usize; 3], b: [usize; 3], window: Shape3) -> usize {
    let mut idx = 0;
    for k in 0..3 {
        idx = idx * (2 * window[k] - 1) + (a[k] + window[k] - 1 - b[k]);
    }
    idx
}

struct Cache {
    /// Row-major `heads × n × n` attention probabilities.
    probs: Vec<f32>,
}

fn gather(src: &[f32], voxels: &[usize], stride: usize, offset: usize, width: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(voxels.len() * width);
    for &v in voxels {
        out.extend_from_slice(&src[v * stride + offset..v * stride + offset + width]);
    }
    out
}

struct Geometry {
    c: usize,
    heads: usize,
    window: Shape3,
    scale: f32,
}

fn forward_window(
    geo: &Geometry,
    win: &Window,
    qkv: &[f32],
    bias: &[f32],
    out: &mut [f32],
) -> Cache {
    let (c, heads) = (geo.c, geo.heads);
    let dh = c / heads;
    let n = win.voxels.len();
    let q = gather(qkv, &win.voxels, 3 * c, 0, c);
    let k = gather(qkv, &win.voxels, 3 * c, c, c);
    let v = gather(qkv, &win.voxels, 3 * c, 2 * c, c);
    let mut probs = vec![0f32; heads * n * n];
    let mut o = vec![0f32; n * c];
    for h in 0..heads {
        let s = &mut probs[h * n * n..(h + 1) * n * n];
        gemm(
            geo.scale,
            Mat { data: &q[h * dh..], rows: n, cols: dh, row_stride: c, col_stride: 1 },
            Mat { data: &k[h * dh..], rows: dh, cols: n, row_stride: 1, col_stride: c },
            0.0,
            s,
            n,
        );
        for i in 0..n {
            let row = &mut s[i * n..(i + 1) * n];
            let mut max = f32::NEG_INFINITY;
            for j in 0..n {
                if win.region[i] != win.region[j] {
                    row[j] = f32::NEG_INFINITY;
                    continue;
                }
                row[j] += bias[relative_index(win.local[i], win.local[j], geo.window) * heads + h];
                max = max.max(row[j]);
            }
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        gemm(
            1.0,
            Mat::row_major(s, n, n),
            Mat { data: &v[h * dh..], rows: n, cols: dh, row_stride: c, col_stride: 1 },
            0.0,
            &mut o[h * dh..],
            c,
        );
    }
    for (t, &vox) in win.voxels.iter().enumerate() {
        out[vox * c..(vox + 1) * c].copy_from_slice(&o[t * c..(t + 1) * c]);
    }
    Cache { probs }
}

fn backward_window(
    geo: &Geometry,
    win: &Window,
    cache: &Cache,
    qkv: &[f32],
    grad: &[f32],
    dqkv: Option<&mut Vec<f32>>,
    dbias: Option<&mut Vec<f32>>,
) {
    let (c, heads) = (geo.c, geo.heads);
    let dh = c / heads;
    let n = win.voxels.len();
    let q = gather(qkv, &win.voxels, 3 * c, 0, c);
    let k = gather(qkv, &win.voxels, 3 * c, c, c);
    let v = gather(qkv, &win.voxels, 3 * c, 2 * c, c);
    let go = gather(grad, &win.voxels, c, 0, c);
    let mut dq = vec![0f32; n * c];
    let mut dk = vec![0f32; n * c];
    let mut dv = vec![0f32; n * c];
    let mut ds = vec![0f32; n * n];
    let mut dbias = dbias;
    for h in 0..heads {
        let p = &cache.probs[h * n * n..(h + 1) * n * n];
        let go_h = Mat { data: &go[h * dh..], rows: n, cols: dh, row_stride: c, col_stride: 1 };
        gemm(1.0, Mat::transposed(p, n, n), go_h, 0.0, &mut dv[h * dh..], c);
        gemm(
            1.0,
            go_h,
            Mat { data: &v[h * dh..], rows: dh, cols: n, row_stride: 1, col_stride: c },
            0.0,
            &mut ds,
            n,
        );
        for i in 0..n {
            let pr = &p[i * n..(i + 1) * n];
            let dr = &mut ds[i * n..(i + 1) * n];
            let dot: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for j in 0..n {
                dr[j] = pr[j] * (dr[j] - dot);
            }
            if let Some(db) = dbias.as_deref_mut() {
                for j in 0..n {
                    if dr[j] != 0.0 {
                        db[relative_index(win.local[i], win.local[j], geo.window) * heads + h] += dr[j];
                    }
                }
            }
        }
        if dqkv.is_some() {
            let k_h = Mat { data: &k[h * dh..], rows: n, cols: dh, row_stride: c, col_stride: 1 };
            let q_h = Mat { data: &q[h * dh..], rows: n, cols: dh, row_stride: c, col_stride: 1 };
            gemm(geo.scale, Mat::row_major(&ds, n, n), k_h, 0.0, &mut dq[h * dh..], c);
            gemm(geo.scale, Mat::transposed(&ds, n, n), q_h, 0.0, &mut dk[h * dh..], c);
        }
    }
    if let Some(dqkv) = dqkv {
        for (t, &vox) in win.voxels.iter().enumerate() {
            let row = &mut dqkv[vox * 3 * c..(vox + 1) * 3 * c];
            row[..c].copy_from_slice(&dq[t * c..(t + 1) * c]);
            row[c..2 * c].copy_from_slice(&dk[t * c..(t + 1) * c]);
            row[2 * c..].copy_from_slice(&dv[t * c..(t + 1) * c]);
        }
    }
}

/// Attention probabilities of every window, for inspection. Each entry is
/// `(voxel indices, heads × n × n probabilities)`.
pub fn attention_probabilities(
    qkv: &Tensor,
    bias: &Tensor,
    heads: usize,
    window: Shape3,
    shift: Shape3,
) -> Vec<(Vec<usize>, Vec<f32>)> {
    let spatial = qkv.spatial();
    let c = qkv.channels() / 3;
    let geo = Geometry { c, heads, window, scale: ((c / heads) as f32).powf(-0.5) };
    let mut scratch = vec![0f32; spatial.iter().product::<usize>() * c];
    partition(spatial, window, shift)
        .into_iter()
        .map(|w| {
            let cache = forward_window(&geo, &w, qkv.data(), bias.data(), &mut scratch);
            (w.voxels, cache.probs)
        })
        .collect()
}

/// Window attention on packed `[D, H, W, 3C]` query/key/value projections
/// with a `[(2w−1)³, heads]` relative-position bias table.
pub fn window_attention(g: &Graph, qkv: &Var, bias: &Var, heads: usize, window: Shape3, shift: Shape3) -> Var {
    let spatial = qkv.value().spatial();
    let c3 = qkv.value().channels();
    assert_eq!(c3 % 3, 0, "qkv channels must be a multiple of 3");
    let c = c3 / 3;
    assert!(heads >= 1 && c % heads == 0, "{c} channels not divisible by {heads} heads");
    assert_eq!(bias.shape(), &[bias_table_len(window), heads], "bias table shape");
    let geo = Geometry { c, heads, window, scale: ((c / heads) as f32).powf(-0.5) };
    let windows = partition(spatial, window, shift);
    let mut out = vec![0f32; spatial.iter().product::<usize>() * c];
    let track = g.grad_enabled() && (qkv.requires_grad() || bias.requires_grad());
    let mut caches = Vec::new();
    for w in &windows {
        let cache = forward_window(&geo, w, qkv.value().data(), bias.value().data(), &mut out);
        if track {
            caches.push(cache);
        }
    }
    let shape = vec![spatial[0], spatial[1], spatial[2], c];
    let qkv_t = qkv.shared();
    let bias_len = bias.value().len();
    g.record(Tensor::new(shape, out), &[qkv, bias], move || {
        Box::new(move |grad: &Tensor, needs: &[bool]| {
            let mut dqkv = needs[0].then(|| vec![0f32; qkv_t.len()]);
            let mut dbias = needs[1].then(|| vec![0f32; bias_len]);
            for (w, cache) in windows.iter().zip(&caches) {
                backward_window(&geo, w, cache, qkv_t.data(), grad.data(), dqkv.as_mut(), dbias.as_mut());
            }
            vec![
                dqkv.map(|v| Tensor::new(qkv_t.shape().to_vec(), v)),
                dbias.map(|v| Tensor::new(vec![bias_len / heads, heads], v)),
            ]
        }) as BackwardFn
    })
}
