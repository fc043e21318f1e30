//! Forward and backward kernels shared by the eager evaluator and the tape.

use crate::tensor::{gelu, gelu_prime, gelu_second, sigmoid, Real, Tensor};

fn same2<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) {
    assert!(
        a.shape() == b.shape(),
        "dimension mismatch in {op}: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

pub(crate) fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    same2("add", a, b);
    a.add(b).expect("checked")
}

pub(crate) fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    same2("sub", a, b);
    a.sub(b).expect("checked")
}

pub(crate) fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    same2("mul", a, b);
    a.mul(b).expect("checked")
}

pub(crate) fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    a.matmul(b).unwrap_or_else(|e| panic!("{e}"))
}

pub(crate) fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    a.matmul_tn(b).unwrap_or_else(|e| panic!("{e}"))
}

pub(crate) fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    a.matmul_nt(b).unwrap_or_else(|e| panic!("{e}"))
}

/// `y[i,j] = a[i,j]·v[i]` for `v: m×1`.
pub(crate) fn row_scale<T: Real>(a: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
    let (m, n) = a.dims2();
    assert!(
        v.numel() == m,
        "row_scale: {:?} by {:?}",
        a.shape(),
        v.shape()
    );
    let mut out = a.clone();
    let vd = v.data();
    for (i, row) in out.data_mut().chunks_mut(n.max(1)).enumerate().take(m) {
        for x in row {
            *x *= vd[i];
        }
    }
    out
}

/// `y[i,j] = a[i,j]·v[j]` for `v: 1×n`.
pub(crate) fn col_scale<T: Real>(a: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
    let n = a.cols();
    assert!(
        v.numel() == n,
        "col_scale: {:?} by {:?}",
        a.shape(),
        v.shape()
    );
    let mut out = a.clone();
    let vd = v.data();
    for row in out.data_mut().chunks_mut(n.max(1)) {
        for (x, &s) in row.iter_mut().zip(vd) {
            *x *= s;
        }
    }
    out
}

/// `y = a + v·1ᵀ` for `v: m×1`.
pub(crate) fn add_col<T: Real>(a: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
    let (m, n) = a.dims2();
    assert!(v.numel() == m, "add_col: {:?} plus {:?}", a.shape(), v.shape());
    let mut out = a.clone();
    let vd = v.data();
    for (i, row) in out.data_mut().chunks_mut(n.max(1)).enumerate().take(m) {
        for x in row {
            *x += vd[i];
        }
    }
    out
}

/// Repeats a `1×n` row `m` times.
pub(crate) fn bcast_rows<T: Real>(v: &Tensor<T>, m: usize) -> Tensor<T> {
    let n = v.numel();
    let mut data = Vec::with_capacity(m * n);
    for _ in 0..m {
        data.extend_from_slice(v.data());
    }
    Tensor::matrix(m, n, data).expect("sized")
}

/// Column sums as a `1×n` row.
pub(crate) fn sum_rows<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = a.dims2();
    let mut out = vec![T::zero(); n];
    for i in 0..m {
        for (o, &x) in out.iter_mut().zip(&a.data()[i * n..(i + 1) * n]) {
            *o += x;
        }
    }
    Tensor::matrix(1, n, out).expect("sized")
}

/// Row sums as an `m×1` column.
pub(crate) fn sum_cols<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = a.dims2();
    let out = (0..m)
        .map(|i| a.data()[i * n..(i + 1) * n].iter().copied().sum())
        .collect();
    Tensor::matrix(m, 1, out).expect("sized")
}

pub(crate) fn mean_rows<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let m = T::c(a.rows() as f64);
    sum_rows(a).map(|v| v / m)
}

pub(crate) fn gelu_map<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    a.map(gelu)
}

pub(crate) fn gelu_prime_map<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    a.map(gelu_prime)
}

pub(crate) fn gelu_second_map<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    a.map(gelu_second)
}

pub(crate) fn sigmoid_map<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    a.map(sigmoid)
}

pub(crate) fn rsqrt_eps<T: Real>(a: &Tensor<T>, eps: T) -> Tensor<T> {
    a.map(|v| (v + eps).sqrt().recip())
}

/// Column-wise softmax restricted to rows `s ≤ t` in column `t`; other
/// entries are zero.
pub(crate) fn causal_softmax<T: Real>(s: &Tensor<T>) -> Tensor<T> {
    let (r, c) = s.dims2();
    assert!(r == c, "causal_softmax needs a square input, got {:?}", s.shape());
    let mut out = Tensor::zeros(&[r, c]);
    for t in 0..c {
        let mut mx = T::neg_infinity();
        for i in 0..=t {
            mx = mx.max(s.at(i, t));
        }
        let mut total = T::zero();
        for i in 0..=t {
            let e = (s.at(i, t) - mx).exp();
            out.set(i, t, e);
            total += e;
        }
        for i in 0..=t {
            out.set(i, t, out.at(i, t) / total);
        }
    }
    out
}

pub(crate) fn causal_softmax_bwd<T: Real>(p: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let gp = mul(g, p);
    let dots = sum_rows(&gp);
    let (r, c) = p.dims2();
    let mut out = gp;
    for i in 0..r {
        for t in 0..c {
            let v = out.at(i, t) - p.at(i, t) * dots.data()[t];
            out.set(i, t, v);
        }
    }
    out
}

/// Mean next-token cross-entropy over columns with a target.
pub(crate) fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[Option<usize>]) -> T {
    let (v, n) = logits.dims2();
    assert_eq!(n, targets.len(), "one target slot per logits column");
    let mut total = T::zero();
    let mut count = 0usize;
    for (j, tgt) in targets.iter().enumerate() {
        let Some(tgt) = *tgt else { continue };
        assert!(tgt < v, "target {tgt} out of range for {v} classes");
        total += column_nll(logits, j, tgt);
        count += 1;
    }
    assert!(count > 0, "cross_entropy without any target");
    total / T::c(count as f64)
}

/// `−log softmax(logits[:, j])[target]`.
pub(crate) fn column_nll<T: Real>(logits: &Tensor<T>, j: usize, target: usize) -> T {
    let v = logits.rows();
    let mut mx = T::neg_infinity();
    for i in 0..v {
        mx = mx.max(logits.at(i, j));
    }
    let mut total = T::zero();
    for i in 0..v {
        total += (logits.at(i, j) - mx).exp();
    }
    mx + total.ln() - logits.at(target, j)
}

pub(crate) fn cross_entropy_bwd<T: Real>(
    logits: &Tensor<T>,
    targets: &[Option<usize>],
    g: T,
) -> Tensor<T> {
    let (v, n) = logits.dims2();
    let count = targets.iter().filter(|t| t.is_some()).count();
    let scale = g / T::c(count as f64);
    let mut out = Tensor::zeros(&[v, n]);
    for (j, tgt) in targets.iter().enumerate() {
        let Some(tgt) = *tgt else { continue };
        let mut mx = T::neg_infinity();
        for i in 0..v {
            mx = mx.max(logits.at(i, j));
        }
        let mut total = T::zero();
        for i in 0..v {
            total += (logits.at(i, j) - mx).exp();
        }
        for i in 0..v {
            let p = (logits.at(i, j) - mx).exp() / total;
            let y = if i == tgt { T::one() } else { T::zero() };
            out.set(i, j, (p - y) * scale);
        }
    }
    out
}

pub(crate) fn gather_cols<T: Real>(table: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let (d, v) = table.dims2();
    let mut out = Tensor::zeros(&[d, idx.len()]);
    for (j, &k) in idx.iter().enumerate() {
        assert!(k < v, "gather index {k} out of range for {v} columns");
        for i in 0..d {
            out.set(i, j, table.at(i, k));
        }
    }
    out
}

pub(crate) fn scatter_cols<T: Real>(shape: &[usize], idx: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    let d = out.rows();
    for (j, &k) in idx.iter().enumerate() {
        for i in 0..d {
            let v = out.at(i, k) + g.at(i, j);
            out.set(i, k, v);
        }
    }
    out
}

/// Depthwise causal convolution over the columns of `x`, restarting at every
/// `seg_len` columns. Tap `w−1` multiplies the current column.
pub(crate) fn causal_conv<T: Real>(x: &Tensor<T>, k: &Tensor<T>, seg_len: usize) -> Tensor<T> {
    let (d, n) = x.dims2();
    let (kd, w) = k.dims2();
    assert_eq!(d, kd, "causal_conv: {:?} with kernels {:?}", x.shape(), k.shape());
    assert!(seg_len > 0 && n % seg_len == 0, "causal_conv: {n} columns in segments of {seg_len}");
    let mut out = Tensor::zeros(&[d, n]);
    for c in 0..d {
        for t in 0..n {
            let pos = t % seg_len;
            let mut acc = T::zero();
            for j in 0..w {
                let back = w - 1 - j;
                if back <= pos {
                    acc += k.at(c, j) * x.at(c, t - back);
                }
            }
            out.set(c, t, acc);
        }
    }
    out
}

pub(crate) fn causal_conv_bwd<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    seg_len: usize,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (d, n) = x.dims2();
    let w = k.cols();
    let mut dx = Tensor::zeros(&[d, n]);
    let mut dk = Tensor::zeros(&[d, w]);
    for c in 0..d {
        for t in 0..n {
            let pos = t % seg_len;
            let gt = g.at(c, t);
            for j in 0..w {
                let back = w - 1 - j;
                if back <= pos {
                    let s = t - back;
                    dx.set(c, s, dx.at(c, s) + gt * k.at(c, j));
                    dk.set(c, j, dk.at(c, j) + gt * x.at(c, s));
                }
            }
        }
    }
    (dx, dk)
}

pub(crate) fn gelu_bwd<T: Real>(a: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    mul(g, &gelu_prime_map(a))
}

pub(crate) fn sigmoid_bwd<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let dy = y.map(|s| s * (T::one() - s));
    mul(g, &dy)
}
