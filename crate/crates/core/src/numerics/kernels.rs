//! Pure forward kernels.
//!
//! Every kernel is a deterministic function of its inputs: no hidden state,
//! no global RNG. These functions are the single source of truth for forward
//! math; the compute graph evaluates through them and only adds backward
//! rules. Matrix products route through `ndarray`'s blocked GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Additive logit mask applied to padded keys before softmax. Large enough
/// that masked weights underflow to exactly zero after max subtraction.
pub const MASK_NEG: f64 = -1e30;

/// Default layer-norm variance floor. Small enough that normalized rows have
/// unit variance to well below 1e-9 for any non-degenerate row.
pub const LAYERNORM_EPS: f64 = 1e-12;

fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((t.rows(), t.cols()), t.data()).expect("tensor data fills its shape")
}

/// `op_a(a) · op_b(b)` where each operand is optionally transposed.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let (ar, ac) = a.expect_2d("matmul")?;
    let (br, bc) = b.expect_2d("matmul")?;
    let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!(
                "inner dimensions differ: [{ar}, {ac}]{} x [{br}, {bc}]{}",
                if ta { " transposed" } else { "" },
                if tb { " transposed" } else { "" }
            ),
        ));
    }
    let av = view2(a);
    let av = if ta { av.reversed_axes() } else { av };
    let bv = view2(b);
    let bv = if tb { bv.reversed_axes() } else { bv };
    let mut c = Array2::<f64>::zeros((m, n));
    general_mat_mul(1.0, &av, &bv, 0.0, &mut c);
    Tensor::new(vec![m, n], c.into_raw_vec_and_offset().0)
}

/// `into += alpha * op_a(a) · op_b(b)`, accumulating into an existing buffer
/// of shape `(m, n)`. Used by backward rules to accumulate gradients.
pub fn matmul_acc(
    into: &mut [f64],
    m: usize,
    n: usize,
    alpha: f64,
    a: &Tensor,
    b: &Tensor,
    ta: bool,
    tb: bool,
) -> Result<()> {
    let av = view2(a);
    let av = if ta { av.reversed_axes() } else { av };
    let bv = view2(b);
    let bv = if tb { bv.reversed_axes() } else { bv };
    if av.nrows() != m || bv.ncols() != n || av.ncols() != bv.nrows() {
        return Err(Error::shape(
            "matmul_acc",
            format!(
                "cannot accumulate [{}, {}] x [{}, {}] into [{m}, {n}]",
                av.nrows(),
                av.ncols(),
                bv.nrows(),
                bv.ncols()
            ),
        ));
    }
    let mut cv = ArrayViewMut2::from_shape((m, n), into)
        .map_err(|e| Error::shape("matmul_acc", e.to_string()))?;
    general_mat_mul(alpha, &av, &bv, 1.0, &mut cv);
    Ok(())
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.expect_2d("softmax")?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Row-wise layer normalization: `(x - mean) / sqrt(var + eps)` with
/// population variance. Gain and shift are applied by the caller.
pub fn layernorm_rows(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (r, c) = x.expect_2d("layernorm")?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            out[i * c + j] = (row[j] - mean) * inv;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Multi-head scaled dot-product attention: per head,
/// `softmax(q_h k_hᵀ / sqrt(d/heads)) v_h`, heads re-concatenated.
/// `mask[j] = true` marks key `j` as padding; masked keys receive an
/// additive `MASK_NEG` logit and end up with exactly zero weight.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&[bool]>,
    heads: usize,
) -> Result<Tensor> {
    let (nq, d) = q.expect_2d("scaled_dot_attention")?;
    let (nk, dk) = k.expect_2d("scaled_dot_attention")?;
    let (nv, dv) = v.expect_2d("scaled_dot_attention")?;
    if d != dk || d != dv || nk != nv {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!(
                "incompatible q {:?}, k {:?}, v {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "scaled_dot_attention: model dim {d} not divisible by heads {heads}"
        )));
    }
    if let Some(m) = mask {
        if m.len() != nk {
            return Err(Error::shape(
                "scaled_dot_attention",
                format!("mask length {} != key count {nk}", m.len()),
            ));
        }
        if m.iter().all(|&x| x) {
            return Err(Error::data(
                "scaled_dot_attention: every key is masked".to_string(),
            ));
        }
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * d];
    for h in 0..heads {
        let off = h * dh;
        // Logits for this head: q_h k_hᵀ scaled, plus the additive mask.
        let mut logits = vec![0.0; nq * nk];
        for i in 0..nq {
            let qrow = &q.data()[i * d + off..i * d + off + dh];
            for j in 0..nk {
                let krow = &k.data()[j * d + off..j * d + off + dh];
                let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                let masked = mask.map_or(false, |m| m[j]);
                logits[i * nk + j] = dot * scale + if masked { MASK_NEG } else { 0.0 };
            }
        }
        let weights = softmax_rows(&Tensor::new(vec![nq, nk], logits)?)?;
        for i in 0..nq {
            for j in 0..nk {
                let w = weights.at2(i, j);
                if w == 0.0 {
                    continue;
                }
                let vrow = &v.data()[j * d + off..j * d + off + dh];
                let dst = &mut out[i * d + off..i * d + off + dh];
                for (o, &val) in dst.iter_mut().zip(vrow) {
                    *o += w * val;
                }
            }
        }
    }
    Tensor::new(vec![nq, d], out)
}

/// Element-wise max(0, x).
pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Element-wise logistic sigmoid.
pub fn sigmoid(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| {
            // Stable in both tails.
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Mean over rows: `(n, d)` -> `(1, d)`.
pub fn mean_pool_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.expect_2d("mean_pool")?;
    let mut out = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            out[j] += x.data()[i * c + j];
        }
    }
    for o in out.iter_mut() {
        *o /= r as f64;
    }
    Tensor::new(vec![1, c], out)
}

/// Affine map `x wᵀ + b` with `w` stored `(out, in)` and `b` length `out`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = matmul(x, w, false, true)?;
    add_row_broadcast(&y, b)
}

/// Element-wise sum of equally shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Add a length-`d` row vector to every row of an `(n, d)` matrix.
pub fn add_row_broadcast(x: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (r, c) = x.expect_2d("add_row_broadcast")?;
    let (rr, rc) = row.expect_2d("add_row_broadcast")?;
    if rr != 1 || rc != c {
        return Err(Error::shape(
            "add_row_broadcast",
            format!("row {:?} does not broadcast over {:?}", row.shape(), x.shape()),
        ));
    }
    let mut data = x.data().to_vec();
    for i in 0..r {
        for j in 0..c {
            data[i * c + j] += row.data()[j];
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// Multiply every row of an `(n, d)` matrix by a length-`d` row vector.
pub fn mul_row_broadcast(x: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (r, c) = x.expect_2d("mul_row_broadcast")?;
    let (rr, rc) = row.expect_2d("mul_row_broadcast")?;
    if rr != 1 || rc != c {
        return Err(Error::shape(
            "mul_row_broadcast",
            format!("row {:?} does not broadcast over {:?}", row.shape(), x.shape()),
        ));
    }
    let mut data = x.data().to_vec();
    for i in 0..r {
        for j in 0..c {
            data[i * c + j] *= row.data()[j];
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

pub fn scalar_mul(x: &Tensor, c: f64) -> Tensor {
    let data = x.data().iter().map(|&v| v * c).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Stack matrices vertically; all inputs must share a column count.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_rows", "no inputs"));
    }
    let cols = parts[0].cols();
    let mut rows = 0;
    for p in parts {
        let (r, c) = p.expect_2d("concat_rows")?;
        if c != cols {
            return Err(Error::shape(
                "concat_rows",
                format!("column mismatch: {} vs {}", c, cols),
            ));
        }
        rows += r;
    }
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, cols], data)
}

/// Stack matrices horizontally; all inputs must share a row count.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_cols", "no inputs"));
    }
    let rows = parts[0].rows();
    let mut cols = 0;
    for p in parts {
        let (r, c) = p.expect_2d("concat_cols")?;
        if r != rows {
            return Err(Error::shape(
                "concat_cols",
                format!("row mismatch: {} vs {}", r, rows),
            ));
        }
        cols += c;
    }
    let mut data = vec![0.0; rows * cols];
    let mut off = 0;
    for p in parts {
        let c = p.cols();
        for i in 0..rows {
            data[i * cols + off..i * cols + off + c].copy_from_slice(p.row(i));
        }
        off += c;
    }
    Tensor::new(vec![rows, cols], data)
}

/// Inverted dropout. In training mode each element is kept with probability
/// `1 - p` and scaled by `1/(1 - p)`; the applied mask is returned so the
/// caller can reuse it in backward. In eval mode this is the identity.
pub fn dropout(
    x: &Tensor,
    p: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!(
            "dropout rate {p} outside [0, 1)"
        )));
    }
    if !training || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let mask: Vec<f64> = (0..x.len())
        .map(|_| {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                0.0
            }
        })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((Tensor::new(x.shape().to_vec(), data)?, Some(mask)))
}
