//! Slice-level kernels shared by the forward and backward passes.

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        let ar = &a[i * k..(i + 1) * k];
        for (p, &x) in ar.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (oj, bj) in o.iter_mut().zip(br) {
                *oj += x * bj;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in ar.iter().zip(br) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * n..(i + 1) * n];
        for (p, &x) in ar.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let o = &mut out[p * n..(p + 1) * n];
            for (oj, bj) in o.iter_mut().zip(br) {
                *oj += x * bj;
            }
        }
    }
}

/// Row-wise softmax over contiguous slices of length `n`, max-subtracted.
pub fn softmax_rows(x: &[f64], out: &mut [f64], n: usize) {
    for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let nd = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        // odometer increment over the output index
        let mut ax = nd;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
