//! Forward kernels for the differentiable operations, usable without a tape.

use super::{NumericsError, Real, Tensor};

/// A strided matrix window into a flat buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Contiguous row-major `rows × cols` matrix starting at 0.
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self {
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Sub-block of a row-major buffer with row stride `ld`.
    pub fn block(offset: usize, rows: usize, cols: usize, ld: usize) -> Self {
        Self {
            offset,
            rows,
            cols,
            rs: ld,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn fits(&self, len: usize) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < len
    }
}

/// `c = alpha · a · b + beta · c` over strided views.
pub(crate) fn gemm<T: Real>(
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner extent");
    assert_eq!(cv.rows, av.rows, "gemm output rows");
    assert_eq!(cv.cols, bv.cols, "gemm output cols");
    assert!(
        av.fits(a.len()) && bv.fits(b.len()) && cv.fits(c.len()),
        "gemm view out of bounds"
    );
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above and `c` is a distinct
    // mutable borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Matrix product `[m×k] · [k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(NumericsError::Dimension(format!(
            "matmul inner extents differ: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        T::one(),
        a.data(),
        View::dense(m, k),
        b.data(),
        View::dense(k, n),
        T::zero(),
        &mut out,
        View::dense(m, n),
    );
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `x · w + b` with the bias broadcast over rows.
pub fn linear_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, NumericsError> {
    let (din, dout) = w.dims2()?;
    if x.last_dim() != din || b.shape() != [dout] {
        return Err(NumericsError::Dimension(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let rows = x.rows();
    let mut out: Vec<T> = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    gemm(
        T::one(),
        x.data(),
        View::dense(rows, din),
        w.data(),
        View::dense(din, dout),
        T::one(),
        &mut out,
        View::dense(rows, dout),
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-scalar input") = dout;
    Ok(Tensor::from_parts(shape, out))
}

/// In-place stable softmax of one row.
pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, NumericsError> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(NumericsError::Dimension(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut lane = vec![T::zero(); extent];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = out[base + j * inner];
            }
            softmax_row(&mut lane);
            for (j, l) in lane.iter().enumerate() {
                out[base + j * inner] = *l;
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Per-row normalization statistics kept for the backward pass.
pub(crate) struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_with_cache<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>), NumericsError> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(NumericsError::Dimension(format!(
            "layer_norm: input {:?} with gamma {:?} and beta {:?}",
            x.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    let rows = x.rows();
    let dn = T::lit(d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    let (g, b) = (gamma.data(), beta.data());
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        let base = r * d;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[base + j] = h;
            out[base + j] = h * g[j] + b[j];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        LayerNormCache { xhat, inv_std },
    ))
}

/// Layer normalization over the last axis followed by the affine map.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, NumericsError> {
    layer_norm_with_cache(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub(crate) fn check_labels(
    labels: &[usize],
    batch: usize,
    classes: usize,
) -> Result<(), NumericsError> {
    if batch == 0 {
        return Err(NumericsError::Validation(
            "cross_entropy needs a non-empty batch".into(),
        ));
    }
    if labels.len() != batch {
        return Err(NumericsError::Validation(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(NumericsError::Validation(format!(
            "label {l} at position {i} outside [0, {classes})"
        )));
    }
    Ok(())
}

/// Row-wise probabilities and mean negative log-likelihood.
pub(crate) fn cross_entropy_with_probs<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Vec<T>), NumericsError> {
    let (batch, classes) = logits.dims2()?;
    check_labels(labels, batch, classes)?;
    let mut probs = logits.data().to_vec();
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += lse - row[label];
        softmax_row(&mut probs[r * classes..(r + 1) * classes]);
    }
    Ok((total / T::lit(batch as f64), probs))
}

/// Mean cross-entropy of `logits [B × classes]` against integer labels.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T, NumericsError> {
    cross_entropy_with_probs(logits, labels).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = random(&[3, 3], 1);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
        let x = Tensor::<f32>::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let y = Tensor::<f32>::from_vec(&[2, 1], vec![0., 1.]).unwrap();
        assert_eq!(matmul(&x, &y).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[5, 7], 2);
        let b = random(&[7, 3], 3);
        let c = matmul(&a.cast::<f32>(), &b.cast::<f32>()).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.data()[i * 7 + k] * b.data()[k * 3 + j];
                }
                assert!((c.data()[i * 3 + j] as f64 - s).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch_naming_shapes() {
        let err = matmul(&Tensor::<f32>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::<f32>::from_vec(&[2], vec![0., 0.]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::<f32>::from_vec(&[3], vec![1000.; 3]).unwrap(), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        // Extended-precision oracle for [1, 2, 3].
        let s = softmax(&Tensor::<f32>::from_vec(&[3], vec![1., 2., 3.]).unwrap(), 0).unwrap();
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            assert!((*v as f64 - ((i + 1) as f64).exp() / z).abs() <= 1e-7);
        }
    }

    #[test]
    fn softmax_non_last_axis() {
        let x = random(&[3, 4], 9);
        let s = softmax(&x, 0).unwrap();
        for j in 0..4 {
            let col: f64 = (0..3).map(|i| s.data()[i * 4 + j]).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::<f64>::full(&[4], 1.0);
        let b = Tensor::<f64>::zeros(&[4]);
        let y = layer_norm(&Tensor::full(&[1, 4], 3.0), &g, &b, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let beta = Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = layer_norm(&random(&[2, 4], 4), &Tensor::zeros(&[4]), &beta, 1e-6).unwrap();
        assert_eq!(y.row(1), beta.data());

        // Two-pass oracle on [1, 2, 3, 4].
        let x = Tensor::<f32>::from_vec(&[1, 4], vec![1., 2., 3., 4.]).unwrap();
        let y = layer_norm(&x, &g.cast(), &b.cast(), 1e-6).unwrap();
        let mean = 2.5f64;
        let var = [1.0f64, 2.0, 3.0, 4.0]
            .iter()
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / 4.0;
        for (i, v) in y.data().iter().enumerate() {
            let expect = ((i + 1) as f64 - mean) / (var + 1e-6).sqrt();
            assert!((*v as f64 - expect).abs() <= 1e-6);
        }
    }

    #[test]
    fn gelu_cases() {
        let x = Tensor::<f64>::from_vec(&[4], vec![0.0, 1.0, 20.0, -20.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        // erf(1/sqrt 2) = 0.682689492137085897...
        let oracle = 0.5 * (1.0 + 0.682_689_492_137_085_9);
        assert!((y.data()[1] - oracle).abs() <= 1e-6);
        assert!((y.data()[2] - 20.0).abs() < 1e-9);
        assert!(y.data()[3].abs() < 1e-9);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..200 {
            let v = gelu_scalar(-0.7 + i as f64 * 0.05);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn linear_forward_cases() {
        let x = random(&[4, 3], 5);
        let y = linear_forward(&x, &Tensor::eye(3), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
        let b = Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap();
        let y = linear_forward(&Tensor::zeros(&[3, 4]), &random(&[4, 2], 6), &b).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), b.data());
        }
        let w = random(&[3, 2], 7);
        let y = linear_forward(&x, &w, &b).unwrap();
        let mut oracle = matmul(&x, &w).unwrap();
        for r in 0..4 {
            for c in 0..2 {
                oracle.data_mut()[r * 2 + c] += b.data()[c];
            }
        }
        assert!(y.max_abs_diff(&oracle) <= 1e-6);
        assert!(linear_forward(&x, &random(&[4, 2], 1), &b).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let l = cross_entropy(&Tensor::<f64>::zeros(&[2, 3]), &[0, 2]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        let sat = Tensor::<f32>::from_vec(&[1, 3], vec![0., 1e4, 0.]).unwrap();
        assert!(cross_entropy(&sat, &[1]).unwrap().abs() < 1e-6);
        let x = Tensor::<f32>::from_vec(&[1, 3], vec![1., 2., 3.]).unwrap();
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        let oracle = -(3f64.exp() / z).ln();
        assert!((cross_entropy(&x, &[2]).unwrap() as f64 - oracle).abs() <= 1e-7);
        assert!(cross_entropy(&x, &[3]).is_err());
    }
}
