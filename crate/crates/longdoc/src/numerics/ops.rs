//! Forward and backward kernels. Each differentiable op comes with an
//! explicit `*_backward` companion; there is no graph compiler.

use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Standard matrix product `[m x k] . [k x n] -> [m x n]`, rows evaluated in
/// parallel, each dot product accumulated in f64 in a fixed order.
pub fn matmul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    let (m, k) = dims2(a, "matmul")?;
    let (kb, n) = dims2(b, "matmul")?;
    if k != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(vec![m, n]);
    par::for_each_chunk(out.data_mut(), n, |i, out_row| {
        let a_row = a.row(i);
        let mut acc = vec![0.0f64; n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let aik = aik.f64();
            let b_row = b.row(kk);
            for (j, &bkj) in b_row.iter().enumerate() {
                acc[j] += aik * bkj.f64();
            }
        }
        for (o, &v) in out_row.iter_mut().zip(acc.iter()) {
            *o = R::of(v);
        }
    });
    Ok(out)
}

/// Gradients of `matmul` for both inputs: `dA = G . B^T`, `dB = A^T . G`.
pub fn matmul_backward<R: Real>(
    a: &Tensor<R>,
    b: &Tensor<R>,
    grad_out: &Tensor<R>,
) -> Result<(Tensor<R>, Tensor<R>)> {
    let da = matmul(grad_out, &transpose(b))?;
    let db = matmul(&transpose(a), grad_out)?;
    Ok((da, db))
}

pub fn transpose<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let (m, n) = dims2(x, "transpose").expect("transpose needs a 2-D tensor");
    let mut out = Tensor::zeros(vec![n, m]);
    for i in 0..m {
        for j in 0..n {
            out.data_mut()[j * m + i] = x.get2(i, j);
        }
    }
    out
}

pub fn identity<R: Real>(n: usize) -> Tensor<R> {
    let mut out = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        out.data_mut()[i * n + i] = R::one();
    }
    out
}

/// Row-wise softmax with an optional validity mask (`true` = keep). Masked
/// positions come out exactly zero; rows are shifted by their max before
/// exponentiation and normalized with an f64 sum.
pub fn softmax_rows<R: Real>(x: &Tensor<R>, mask: Option<&[bool]>) -> Result<Tensor<R>> {
    if let Some(m) = mask {
        if m.len() != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![m.len()],
            });
        }
    }
    let n = x.last_dim();
    let rows = x.rows();
    let mut out = Tensor::zeros(x.shape().to_vec());
    // Row validity is checked up front so the parallel fill stays infallible.
    for i in 0..rows {
        let keep = |j: usize| mask.map_or(true, |m| m[i * n + j]);
        if (0..n).all(|j| !keep(j)) {
            return Err(Error::DegenerateRow { row: i });
        }
    }
    par::for_each_chunk(out.data_mut(), n, |i, out_row| {
        let row = x.row(i);
        let keep = |j: usize| mask.map_or(true, |m| m[i * n + j]);
        let max = (0..n)
            .filter(|&j| keep(j))
            .map(|j| row[j].f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0f64;
        let mut exps = vec![0.0f64; n];
        for j in 0..n {
            if keep(j) {
                let e = (row[j].f64() - max).exp();
                exps[j] = e;
                sum += e;
            }
        }
        for j in 0..n {
            out_row[j] = R::of(exps[j] / sum);
        }
    });
    Ok(out)
}

/// Backward through `softmax_rows` given its output `y`:
/// `dx_j = y_j * (g_j - sum_k y_k g_k)`. Masked positions (y == 0) get 0.
pub fn softmax_rows_backward<R: Real>(y: &Tensor<R>, grad_out: &Tensor<R>) -> Tensor<R> {
    let n = y.last_dim();
    let mut grad = Tensor::zeros(y.shape().to_vec());
    par::for_each_chunk(grad.data_mut(), n, |i, g_row| {
        let yr = y.row(i);
        let gr = grad_out.row(i);
        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a.f64() * b.f64()).sum();
        for j in 0..n {
            g_row[j] = R::of(yr[j].f64() * (gr[j].f64() - dot));
        }
    });
    grad
}

/// Per-row normalization to zero mean / unit variance followed by the
/// elementwise affine `gamma * xhat + beta`. Statistics in f64.
pub fn layer_norm<R: Real>(
    x: &Tensor<R>,
    gamma: &Tensor<R>,
    beta: &Tensor<R>,
    eps: f64,
) -> Result<Tensor<R>> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(x.shape().to_vec());
    par::for_each_chunk(out.data_mut(), d, |i, out_row| {
        let row = x.row(i);
        let (mean, var) = row_stats(row);
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            let xhat = (row[j].f64() - mean) * inv;
            out_row[j] = R::of(xhat * gamma.data()[j].f64() + beta.data()[j].f64());
        }
    });
    Ok(out)
}

/// Backward through `layer_norm`; returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<R: Real>(
    x: &Tensor<R>,
    gamma: &Tensor<R>,
    eps: f64,
    grad_out: &Tensor<R>,
) -> (Tensor<R>, Tensor<R>, Tensor<R>) {
    let d = x.last_dim();
    let rows = x.rows();
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dgamma = vec![0.0f64; d];
    let mut dbeta = vec![0.0f64; d];
    for i in 0..rows {
        let row = x.row(i);
        let g = grad_out.row(i);
        let (mean, var) = row_stats(row);
        let inv = 1.0 / (var + eps).sqrt();
        // dy/dxhat = gamma; fold the two reduction terms of the classic formula.
        let mut sum_gg = 0.0f64; // sum_j g_j * gamma_j
        let mut sum_ggx = 0.0f64; // sum_j g_j * gamma_j * xhat_j
        let mut xhat = vec![0.0f64; d];
        for j in 0..d {
            xhat[j] = (row[j].f64() - mean) * inv;
            let gg = g[j].f64() * gamma.data()[j].f64();
            sum_gg += gg;
            sum_ggx += gg * xhat[j];
            dgamma[j] += g[j].f64() * xhat[j];
            dbeta[j] += g[j].f64();
        }
        let nd = d as f64;
        for j in 0..d {
            let gg = g[j].f64() * gamma.data()[j].f64();
            let v = inv * (gg - sum_gg / nd - xhat[j] * sum_ggx / nd);
            dx.row_mut(i)[j] = R::of(v);
        }
    }
    let dgamma = Tensor::from_f64(vec![d], &dgamma).unwrap();
    let dbeta = Tensor::from_f64(vec![d], &dbeta).unwrap();
    (dx, dgamma, dbeta)
}

/// `y = x + b` with `b` broadcast across rows.
pub fn add_bias<R: Real>(x: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    let d = x.last_dim();
    assert_eq!(b.numel(), d, "bias length mismatch");
    let mut out = x.clone();
    par::for_each_chunk(out.data_mut(), d, |_, row| {
        for (v, &bj) in row.iter_mut().zip(b.data().iter()) {
            *v = *v + bj;
        }
    });
    out
}

pub fn tanh<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    x.map(|v| R::of(v.f64().tanh()))
}

/// Backward given the tanh output `y`: `dx = (1 - y^2) * g`.
pub fn tanh_backward<R: Real>(y: &Tensor<R>, grad_out: &Tensor<R>) -> Tensor<R> {
    let mut out = Tensor::zeros(y.shape().to_vec());
    for ((o, &yv), &g) in out.data_mut().iter_mut().zip(y.data()).zip(grad_out.data()) {
        let yv = yv.f64();
        *o = R::of((1.0 - yv * yv) * g.f64());
    }
    out
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

/// GELU, tanh approximation: `0.5 x (1 + tanh(c (x + 0.044715 x^3)))`.
pub fn gelu<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    x.map(|v| {
        let x = v.f64();
        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
        R::of(0.5 * x * (1.0 + t))
    })
}

pub fn gelu_backward<R: Real>(x: &Tensor<R>, grad_out: &Tensor<R>) -> Tensor<R> {
    let mut out = Tensor::zeros(x.shape().to_vec());
    for ((o, &xv), &g) in out.data_mut().iter_mut().zip(x.data()).zip(grad_out.data()) {
        let x = xv.f64();
        let u = GELU_C * (x + 0.044715 * x * x * x);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        *o = R::of(d * g.f64());
    }
    out
}

/// Mean cross-entropy over rows with a target class; rows whose target is
/// `None` are excluded. Returns the loss and `d loss / d logits`.
/// Log-sum-exp is computed in f64.
pub fn cross_entropy<R: Real>(
    logits: &Tensor<R>,
    targets: &[Option<usize>],
) -> Result<(f64, Tensor<R>)> {
    let v = logits.last_dim();
    let rows = logits.rows();
    assert_eq!(targets.len(), rows, "target count mismatch");
    let count = targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return Err(Error::Numeric("cross_entropy: no target positions".into()));
    }
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    for i in 0..rows {
        let Some(t) = targets[i] else { continue };
        let row = logits.row(i);
        let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x.f64() - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[t].f64();
        let scale = 1.0 / count as f64;
        let g = grad.row_mut(i);
        for j in 0..v {
            let p = (row[j].f64() - max).exp() / sum;
            g[j] = R::of(scale * (p - if j == t { 1.0 } else { 0.0 }));
        }
    }
    let loss = loss / count as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy".into()));
    }
    Ok((loss, grad))
}

fn row_stats<R: Real>(row: &[R]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|x| x.f64()).sum::<f64>() / n;
    let var = row.iter().map(|x| (x.f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn dims2<R: Real>(t: &Tensor<R>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor<f32> {
        let n = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| (rng.next_f64() * 2.0 - 1.0) as f32).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2: Tensor<f32> = identity(2);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
    }

    #[test]
    fn matmul_hand_case() {
        let a: Tensor<f32> = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b: Tensor<f32> = Tensor::from_rows(&[vec![1.0], vec![1.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(11);
        let a = random_tensor(vec![5, 7], &mut rng);
        let b = random_tensor(vec![7, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        // independent naive triple loop, f64 throughout
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0f64;
                for k in 0..7 {
                    acc += a.get2(i, k) as f64 * b.get2(k, j) as f64;
                }
                assert_eq!(c.get2(i, j), acc as f32);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a: Tensor<f32> = Tensor::zeros(vec![2, 3]);
        let b: Tensor<f32> = Tensor::zeros(vec![4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_associativity_with_identity() {
        let mut rng = Rng::new(5);
        let a = random_tensor(vec![4, 4], &mut rng);
        let b = random_tensor(vec![4, 6], &mut rng);
        let i4: Tensor<f32> = identity(4);
        let ai_b = matmul(&matmul(&a, &i4).unwrap(), &b).unwrap();
        let ab = matmul(&a, &b).unwrap();
        assert_eq!(ai_b, ab);
    }

    #[test]
    fn softmax_uniform_row() {
        let x: Tensor<f32> = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]);
        let y = softmax_rows(&x, None).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_large_values_stable() {
        let x: Tensor<f32> = Tensor::from_rows(&[vec![1000.0, 0.0]]);
        let y = softmax_rows(&x, None).unwrap();
        assert!(y.data()[0] > 0.999 && y.data()[1] < 1e-6);
        assert!(y.is_finite());
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let x: Tensor<f32> = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let err = softmax_rows(&x, Some(&[false, false])).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 0 }));
    }

    #[test]
    fn softmax_matches_f64_oracle() {
        let mut rng = Rng::new(21);
        let x = random_tensor(vec![8, 9], &mut rng);
        let y = softmax_rows(&x, None).unwrap();
        let y64 = softmax_rows(&x.cast::<f64>(), None).unwrap();
        assert!(y.cast::<f64>().max_abs_diff(&y64) < 1e-6);
        for i in 0..8 {
            let s: f64 = y.row(i).iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(y.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x: Tensor<f32> = Tensor::from_rows(&[vec![5.0, 5.0, 5.0, 5.0]]);
        let gamma = Tensor::full(vec![4], 1.0);
        let beta = Tensor::zeros(vec![4]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut rng = Rng::new(8);
        let x = random_tensor(vec![3, 4], &mut rng);
        let gamma = Tensor::zeros(vec![4]);
        let beta: Tensor<f32> = Tensor::from_rows(&[vec![1.0, -2.0, 0.5, 3.0]])
            .reshape(vec![4])
            .unwrap();
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for i in 0..3 {
            assert_eq!(y.row(i), beta.data());
        }
    }

    #[test]
    fn layer_norm_matches_f64_oracle() {
        let mut rng = Rng::new(13);
        let x = random_tensor(vec![6, 5], &mut rng);
        let gamma = random_tensor(vec![5], &mut rng);
        let beta = random_tensor(vec![5], &mut rng);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        let y64 = layer_norm(&x.cast::<f64>(), &gamma.cast(), &beta.cast(), 1e-5).unwrap();
        assert!(y.cast::<f64>().max_abs_diff(&y64) < 1e-6);
    }
}
