//! Pure forward kernels. Every function here maps value tensors to a new
//! value tensor with no recording side effects; the graph layer wraps them
//! into nodes and the backward pass reuses several of them for adjoints.

use crate::error::{GraphError, ShapeError};
use crate::tensor::{broadcast_shapes, strides_of, Scalar, Tensor};

/// Strides into `src_shape` when iterating over `out_shape`, with 0 on
/// broadcast axes. Shapes are right-aligned.
fn bcast_strides(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let src_strides = strides_of(src_shape);
    let offset = out_shape.len() - src_shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for (i, &dim) in src_shape.iter().enumerate() {
        out[offset + i] = if dim == 1 { 0 } else { src_strides[i] };
    }
    out
}

pub fn binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>, ShapeError> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_vec(a.shape(), data));
    }
    if b.len() == 1 {
        let s = b.data()[0];
        return Ok(a.map(|x| f(x, s)));
    }
    let shape = broadcast_shapes(op, a.shape(), b.shape())?;
    // Contiguous-tail fast path: b is exactly the trailing block of the output.
    if shape == a.shape() && b.shape() == &shape[shape.len() - b.rank()..] {
        let chunk = b.len();
        let mut data = Vec::with_capacity(a.len());
        for block in a.data().chunks_exact(chunk) {
            data.extend(block.iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Tensor::from_vec(&shape, data));
    }
    // General odometer walk.
    let n: usize = shape.iter().product();
    let sa = bcast_strides(a.shape(), &shape);
    let sb = bcast_strides(b.shape(), &shape);
    let mut idx = vec![0usize; shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f(ad[oa], bd[ob]));
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
        }
    }
    Ok(Tensor::from_vec(&shape, data))
}

/// Sum `t` down to `target` shape (the adjoint of broadcasting).
pub fn sum_to_shape<T: Scalar>(t: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if t.shape() == target {
        return t.clone();
    }
    let shape = t.shape().to_vec();
    let st = bcast_strides(target, &shape);
    let mut out = vec![T::zero(); target.iter().product::<usize>().max(1)];
    let mut idx = vec![0usize; shape.len()];
    let mut ot = 0usize;
    for &v in t.data() {
        out[ot] = out[ot] + v;
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            ot += st[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
            ot -= st[ax] * shape[ax];
        }
    }
    Tensor::from_vec(target, out)
}

/// Matmul: `a [..., m, k] x b [k, n]` (shared weights) or
/// `a [batch..., m, k] x b [batch..., k, n]` (per-batch operands).
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    let (ar, br) = (a.rank(), b.rank());
    if ar < 2 || br < 2 {
        return Err(ShapeError::Mismatch { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (kb, n) = (b.shape()[br - 2], b.shape()[br - 1]);
    if k != kb {
        return Err(ShapeError::Mismatch { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    if br == 2 {
        // Shared right-hand side: flatten all leading axes of a into rows.
        let rows = a.len() / k;
        let mut out = vec![T::zero(); rows * n];
        unsafe {
            T::gemm(
                rows, k, n,
                T::one(),
                a.data().as_ptr(), k as isize, 1,
                b.data().as_ptr(), n as isize, 1,
                T::zero(),
                out.as_mut_ptr(), n as isize, 1,
            );
        }
        let mut shape = a.shape()[..ar - 1].to_vec();
        shape.push(n);
        Ok(Tensor::from_vec(&shape, out))
    } else {
        if ar != br || a.shape()[..ar - 2] != b.shape()[..br - 2] {
            return Err(ShapeError::Mismatch { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
        }
        let batch: usize = a.shape()[..ar - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (a.data(), b.data());
        for i in 0..batch {
            unsafe {
                T::gemm(
                    m, k, n,
                    T::one(),
                    ad.as_ptr().add(i * m * k), k as isize, 1,
                    bd.as_ptr().add(i * k * n), n as isize, 1,
                    T::zero(),
                    out.as_mut_ptr().add(i * m * n), n as isize, 1,
                );
            }
        }
        let mut shape = a.shape()[..ar - 2].to_vec();
        shape.push(m);
        shape.push(n);
        Ok(Tensor::from_vec(&shape, out))
    }
}

/// Matmul where either operand is logically transposed on its last two axes.
/// Used by adjoints; stride tricks avoid materialized transposes.
pub fn matmul_t<T: Scalar>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
) -> Result<Tensor<T>, ShapeError> {
    let (ar, br) = (a.rank(), b.rank());
    debug_assert!(ar >= 2 && br >= 2);
    let (am, ak) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (bm, bk) = (b.shape()[br - 2], b.shape()[br - 1]);
    let (m, k) = if ta { (ak, am) } else { (am, ak) };
    let (kb, n) = if tb { (bk, bm) } else { (bm, bk) };
    if k != kb {
        return Err(ShapeError::Mismatch { op: "matmul_t", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    // Transposed views swap the roles of the row-major strides.
    let (rsa, csa) = if ta { (1isize, ak as isize) } else { (ak as isize, 1) };
    let (rsb, csb) = if tb { (1isize, bk as isize) } else { (bk as isize, 1) };
    let a_panel = am * ak;
    let b_panel = bm * bk;
    let batch_a: usize = a.shape()[..ar - 2].iter().product();
    let batch_b: usize = b.shape()[..br - 2].iter().product();
    let batch = batch_a.max(batch_b);
    if !(batch_a == batch || batch_a == 1) || !(batch_b == batch || batch_b == 1) {
        return Err(ShapeError::Mismatch { op: "matmul_t", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let mut out = vec![T::zero(); batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..batch {
        let ai = if batch_a == 1 { 0 } else { i };
        let bi = if batch_b == 1 { 0 } else { i };
        unsafe {
            T::gemm(
                m, k, n,
                T::one(),
                ad.as_ptr().add(ai * a_panel), rsa, csa,
                bd.as_ptr().add(bi * b_panel), rsb, csb,
                T::zero(),
                out.as_mut_ptr().add(i * m * n), n as isize, 1,
            );
        }
    }
    let lead: &[usize] = if batch_a == batch { &a.shape()[..ar - 2] } else { &b.shape()[..br - 2] };
    let mut shape = lead.to_vec();
    shape.push(m);
    shape.push(n);
    Ok(Tensor::from_vec(&shape, out))
}

/// Causally masked softmax over the last axis of a `[..., P, P]` tensor:
/// row `i` normalizes over columns `0..=i`, later columns get probability 0.
pub fn softmax_causal<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    let r = a.rank();
    if r < 2 || a.shape()[r - 1] != a.shape()[r - 2] {
        return Err(ShapeError::Invalid {
            op: "softmax_causal_masked",
            msg: format!("expected square trailing axes, got {:?}", a.shape()),
        });
    }
    let p = a.shape()[r - 1];
    let mut out = vec![T::zero(); a.len()];
    for (mat_o, mat_i) in out.chunks_exact_mut(p * p).zip(a.data().chunks_exact(p * p)) {
        for i in 0..p {
            let row = &mat_i[i * p..i * p + i + 1];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                mat_o[i * p + j] = e;
                denom = denom + e;
            }
            for j in 0..=i {
                mat_o[i * p + j] = mat_o[i * p + j] / denom;
            }
        }
    }
    Ok(Tensor::from_vec(a.shape(), out))
}

/// RMS normalization over the last axis with a learned gain.
pub fn rms_norm<T: Scalar>(a: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>, ShapeError> {
    let r = a.rank();
    let d = a.shape()[r - 1];
    if gain.shape() != [d] {
        return Err(ShapeError::Mismatch { op: "rms_norm", lhs: a.shape().to_vec(), rhs: gain.shape().to_vec() });
    }
    let dn = T::from_f64(d as f64);
    let mut out = Vec::with_capacity(a.len());
    for row in a.data().chunks_exact(d) {
        let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) / dn;
        let inv = (ms + eps).sqrt().recip();
        out.extend(row.iter().zip(gain.data().iter()).map(|(&x, &g)| x * inv * g));
    }
    Ok(Tensor::from_vec(a.shape(), out))
}

/// Row lookup: `out[i] = table[ids[i]]`, shape `[ids.len(), D]`.
pub fn gather<T: Scalar>(table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>, GraphError> {
    let v = table.shape()[0];
    let d = table.shape()[1];
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id as usize >= v {
            return Err(GraphError::IdOutOfRange { id, vocab: v });
        }
        out.extend_from_slice(&table.data()[id as usize * d..(id as usize + 1) * d]);
    }
    Ok(Tensor::from_vec(&[ids.len(), d], out))
}

pub fn permute<T: Scalar>(a: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>, ShapeError> {
    let r = a.rank();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&ax| ax >= r || std::mem::replace(&mut seen[ax], true)) {
        return Err(ShapeError::Invalid {
            op: "permute",
            msg: format!("axes {:?} are not a permutation of 0..{}", axes, r),
        });
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| a.shape()[ax]).collect();
    let in_strides = a.strides();
    // Stride of each output axis within the input buffer.
    let walk: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let n = a.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    let ad = a.data();
    for _ in 0..n {
        out.push(ad[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= walk[ax] * out_shape[ax];
        }
    }
    Ok(Tensor::from_vec(&out_shape, out))
}

pub fn slice<T: Scalar>(
    a: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>, ShapeError> {
    if axis >= a.rank() {
        return Err(ShapeError::AxisOutOfRange { op: "slice", axis, shape: a.shape().to_vec() });
    }
    if start + len > a.shape()[axis] {
        return Err(ShapeError::Invalid {
            op: "slice",
            msg: format!("[{start}, {start}+{len}) out of range for axis {axis} of {:?}", a.shape()),
        });
    }
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let dim = a.shape()[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    let ad = a.data();
    for o in 0..outer {
        let base = o * dim * inner + start * inner;
        out.extend_from_slice(&ad[base..base + len * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_vec(&shape, out))
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>, ShapeError> {
    let first = parts.first().ok_or(ShapeError::Invalid { op: "concat", msg: "no operands".into() })?;
    let r = first.rank();
    if axis >= r {
        return Err(ShapeError::AxisOutOfRange { op: "concat", axis, shape: first.shape().to_vec() });
    }
    let mut dim = 0usize;
    for p in parts {
        let mut expect = p.shape().to_vec();
        if expect.len() != r {
            return Err(ShapeError::Mismatch { op: "concat", lhs: first.shape().to_vec(), rhs: p.shape().to_vec() });
        }
        expect[axis] = first.shape()[axis];
        if expect != first.shape() {
            return Err(ShapeError::Mismatch { op: "concat", lhs: first.shape().to_vec(), rhs: p.shape().to_vec() });
        }
        dim += p.shape()[axis];
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let mut shape = first.shape().to_vec();
    shape[axis] = dim;
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * dim * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::from_vec(&shape, out))
}

pub fn pad_constant<T: Scalar>(
    a: &Tensor<T>,
    axis: usize,
    before: usize,
    after: usize,
    value: T,
) -> Result<Tensor<T>, ShapeError> {
    if axis >= a.rank() {
        return Err(ShapeError::AxisOutOfRange { op: "pad_constant", axis, shape: a.shape().to_vec() });
    }
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let dim = a.shape()[axis];
    let mut shape = a.shape().to_vec();
    shape[axis] = before + dim + after;
    let mut out = Vec::with_capacity(outer * shape[axis] * inner);
    let ad = a.data();
    for o in 0..outer {
        out.extend(std::iter::repeat(value).take(before * inner));
        out.extend_from_slice(&ad[o * dim * inner..(o + 1) * dim * inner]);
        out.extend(std::iter::repeat(value).take(after * inner));
    }
    Ok(Tensor::from_vec(&shape, out))
}

/// First-order linear recurrence `h_t = decay_t * h_{t-1} + input_t` scanned
/// along axis 1 of a `[K, P, channels...]` tensor, with `h_{-1} = 0`.
pub fn linear_scan<T: Scalar>(
    decay: &Tensor<T>,
    input: &Tensor<T>,
    associative: bool,
) -> Result<Tensor<T>, ShapeError> {
    if decay.shape() != input.shape() || decay.rank() < 2 {
        return Err(ShapeError::Mismatch {
            op: "cumulative_scan",
            lhs: decay.shape().to_vec(),
            rhs: input.shape().to_vec(),
        });
    }
    let k = decay.shape()[0];
    let p = decay.shape()[1];
    let c: usize = decay.shape()[2..].iter().product::<usize>().max(1);
    if associative {
        // Inclusive scan of (a, b) pairs under (a1,b1)∘(a2,b2) = (a1*a2, a2*b1 + b2),
        // combined divide-and-conquer so the evaluation tree differs from the fold.
        let mut av = decay.data().to_vec();
        let mut bv = input.data().to_vec();
        fn rec<T: Scalar>(a: &mut [T], b: &mut [T], lo: usize, hi: usize, c: usize) {
            if hi - lo <= 1 {
                return;
            }
            let mid = lo + (hi - lo) / 2;
            rec(a, b, lo, mid, c);
            rec(a, b, mid, hi, c);
            for ch in 0..c {
                let am = a[(mid - 1) * c + ch];
                let bm = b[(mid - 1) * c + ch];
                for t in mid..hi {
                    let i = t * c + ch;
                    b[i] = a[i] * bm + b[i];
                    a[i] = a[i] * am;
                }
            }
        }
        for ki in 0..k {
            let lo = ki * p * c;
            rec(&mut av[lo..lo + p * c], &mut bv[lo..lo + p * c], 0, p, c);
        }
        Ok(Tensor::from_vec(input.shape(), bv))
    } else {
        let mut out = vec![T::zero(); input.len()];
        let (dd, id) = (decay.data(), input.data());
        for ki in 0..k {
            let base = ki * p * c;
            out[base..base + c].copy_from_slice(&id[base..base + c]);
            for t in 1..p {
                for ch in 0..c {
                    let i = base + t * c + ch;
                    out[i] = dd[i] * out[i - c] + id[i];
                }
            }
        }
        Ok(Tensor::from_vec(input.shape(), out))
    }
}

/// Rotary position rotation on `[K, H, P, Dh]` (position = axis 2). `sign`
/// selects the forward (+1) or transposed (-1) rotation.
pub fn rotary<T: Scalar>(a: &Tensor<T>, sign: f64) -> Result<Tensor<T>, ShapeError> {
    let r = a.rank();
    if r != 4 || a.shape()[3] % 2 != 0 {
        return Err(ShapeError::Invalid {
            op: "rotary",
            msg: format!("expected [K, H, P, Dh] with even Dh, got {:?}", a.shape()),
        });
    }
    let (k, h, p, dh) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let half = dh / 2;
    // Angle table per (position, pair).
    let mut cos_t = vec![T::zero(); p * half];
    let mut sin_t = vec![T::zero(); p * half];
    for t in 0..p {
        for i in 0..half {
            let theta = sign * t as f64 * 10000f64.powf(-2.0 * i as f64 / dh as f64);
            cos_t[t * half + i] = T::from_f64(theta.cos());
            sin_t[t * half + i] = T::from_f64(theta.sin());
        }
    }
    let mut out = vec![T::zero(); a.len()];
    let ad = a.data();
    for kh in 0..k * h {
        for t in 0..p {
            let base = (kh * p + t) * dh;
            for i in 0..half {
                let (c, s) = (cos_t[t * half + i], sin_t[t * half + i]);
                let (x0, x1) = (ad[base + 2 * i], ad[base + 2 * i + 1]);
                out[base + 2 * i] = x0 * c - x1 * s;
                out[base + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
    Ok(Tensor::from_vec(a.shape(), out))
}

/// Mean masked negative log-likelihood (natural log) of `targets` under
/// `logits [R, V]`. Log-sum-exp accumulates in f64 for stability.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u32],
    mask: &[bool],
) -> Result<Tensor<T>, GraphError> {
    if logits.rank() != 2 || logits.shape()[0] != targets.len() || targets.len() != mask.len() {
        return Err(GraphError::Shape(ShapeError::Invalid {
            op: "cross_entropy",
            msg: format!(
                "logits {:?} vs {} targets / {} mask entries",
                logits.shape(),
                targets.len(),
                mask.len()
            ),
        }));
    }
    let v = logits.shape()[1];
    let mut total = 0f64;
    let mut count = 0usize;
    for (row, (&t, &m)) in logits.data().chunks_exact(v).zip(targets.iter().zip(mask.iter())) {
        if !m {
            continue;
        }
        if t as usize >= v {
            return Err(GraphError::IdOutOfRange { id: t, vocab: v });
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x.to_f64_()));
        let lse = max + row.iter().map(|&x| (x.to_f64_() - max).exp()).sum::<f64>().ln();
        total += lse - row[t as usize].to_f64_();
        count += 1;
    }
    if count == 0 {
        return Err(GraphError::Shape(ShapeError::Invalid { op: "cross_entropy", msg: "empty mask".into() }));
    }
    Ok(Tensor::scalar(T::from_f64(total / count as f64)))
}

/// Row softmax in f64, used by the cross-entropy adjoint.
pub fn softmax_rows_f64<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let v = logits.shape()[logits.rank() - 1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(v) {
        let max = row.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x.to_f64_()));
        let exps: Vec<f64> = row.iter().map(|&x| (x.to_f64_() - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / denom));
    }
    out
}

pub fn sum_all<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let total: f64 = a.data().iter().map(|v| v.to_f64_()).sum();
    Tensor::scalar(T::from_f64(total))
}

pub fn sum_axis<T: Scalar>(a: &Tensor<T>, axis: usize) -> Result<Tensor<T>, ShapeError> {
    if axis >= a.rank() {
        return Err(ShapeError::AxisOutOfRange { op: "sum_axis", axis, shape: a.shape().to_vec() });
    }
    let outer: usize = a.shape()[..axis].iter().product();
    let dim = a.shape()[axis];
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let mut out = vec![T::zero(); outer * inner];
    let ad = a.data();
    for o in 0..outer {
        for t in 0..dim {
            let base = (o * dim + t) * inner;
            for i in 0..inner {
                out[o * inner + i] = out[o * inner + i] + ad[base + i];
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_vec(&shape, out))
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus_val<T: Scalar>(x: T) -> T {
    let hi = T::from_f64(30.0);
    if x > hi {
        x
    } else if x < -hi {
        x.exp()
    } else {
        (T::one() + x.exp()).ln()
    }
}
