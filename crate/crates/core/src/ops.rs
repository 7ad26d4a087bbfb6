//! Forward and backward kernels for the layer types used by the network.
//!
//! All sequence tensors are `[time x channels]`. Convolutions use zero
//! "same" padding: the output has `ceil(len / stride)` rows and the window
//! for output row `o` starts at input row `o * stride - floor((k - 1) / 2)`.

use crate::error::{config_err, input_err, internal_err, Result};
use crate::tensor::Tensor;

/// Safe wrapper over `matrixmultiply::dgemm`:
/// `C[m x n] = A[m x k] * B[k x n] + beta * C`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        (rows.saturating_sub(1)) * rs + (cols.saturating_sub(1)) * cs
    };
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: every index the kernel touches was bounds-checked above and
    // `c` is a unique borrow that does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Output length of a same-padded convolution.
pub fn same_output_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Geometry and weights of one 1-D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dLayer {
    pub stride: usize,
    /// `[kernel_size x in_channels x filters]`
    pub weights: Tensor,
    /// `[filters]`
    pub bias: Tensor,
}

impl Conv1dLayer {
    pub fn new(stride: usize, weights: Tensor, bias: Tensor) -> Result<Self> {
        conv_dims(&weights, &bias, stride)?;
        Ok(Conv1dLayer {
            stride,
            weights,
            bias,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn filters(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv1d_forward(input, &self.weights, &self.bias, self.stride)
    }

    pub fn backward(&self, grad_out: &Tensor, cached_input: &Tensor) -> Result<ConvGrads> {
        conv1d_backward(grad_out, cached_input, &self.weights, self.stride, true)
    }
}

/// Returns `(kernel, in_channels, filters)`.
fn conv_dims(weights: &Tensor, bias: &Tensor, stride: usize) -> Result<(usize, usize, usize)> {
    let &[k, c, f] = weights.shape() else {
        return Err(config_err!(
            "conv weights must be [kernel x in x filters], got {:?}",
            weights.shape()
        ));
    };
    if stride == 0 {
        return Err(config_err!("conv stride must be at least 1"));
    }
    if bias.len() != f {
        return Err(config_err!("conv bias has {} entries for {f} filters", bias.len()));
    }
    Ok((k, c, f))
}

/// Rows of `input` (`batch` stacked `[len x c]` sequences) unfolded so that
/// row `b * out_len + o` holds the zero-padded receptive window of output
/// `o` of sequence `b`, taps in kernel order.
fn im2col(input: &Tensor, batch: usize, kernel: usize, stride: usize, out_len: usize) -> Vec<f64> {
    let (len, c) = (input.rows() / batch, input.cols());
    let left = (kernel - 1) / 2;
    let window = kernel * c;
    let mut cols = vec![0.0; batch * out_len * window];
    for b in 0..batch {
        let seq = &input.data()[b * len * c..(b + 1) * len * c];
        for o in 0..out_len {
            let row = &mut cols[(b * out_len + o) * window..][..window];
            for j in 0..kernel {
                let Some(r) = (o * stride + j).checked_sub(left).filter(|&r| r < len) else {
                    continue;
                };
                row[j * c..(j + 1) * c].copy_from_slice(&seq[r * c..(r + 1) * c]);
            }
        }
    }
    cols
}

/// Inverse scatter of [`im2col`]: window gradients summed back onto inputs.
fn col2im(cols: &[f64], batch: usize, len: usize, c: usize, kernel: usize, stride: usize, out_len: usize) -> Tensor {
    let left = (kernel - 1) / 2;
    let window = kernel * c;
    let mut grad = Tensor::zeros(&[batch * len, c]);
    let data = grad.data_mut();
    for b in 0..batch {
        for o in 0..out_len {
            let row = &cols[(b * out_len + o) * window..][..window];
            for j in 0..kernel {
                let Some(r) = (o * stride + j).checked_sub(left).filter(|&r| r < len) else {
                    continue;
                };
                let dst = &mut data[(b * len + r) * c..][..c];
                for (d, &g) in dst.iter_mut().zip(&row[j * c..(j + 1) * c]) {
                    *d += g;
                }
            }
        }
    }
    grad
}

fn batch_len(rows: usize, batch: usize) -> Result<usize> {
    if batch == 0 || rows % batch != 0 {
        return Err(input_err!("{rows} rows do not split into {batch} sequences"));
    }
    Ok(rows / batch)
}

pub fn conv1d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    conv1d_forward_batch(input, 1, weights, bias, stride)
}

/// Convolves `batch` equal-length sequences stacked row-wise in `input`;
/// outputs are stacked the same way.
pub fn conv1d_forward_batch(
    input: &Tensor,
    batch: usize,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let (k, c, f) = conv_dims(weights, bias, stride)?;
    if input.shape().len() != 2 || input.cols() != c {
        return Err(config_err!(
            "conv expects [len x {c}] input, got {:?}",
            input.shape()
        ));
    }
    let len = batch_len(input.rows(), batch)?;
    let out_len = same_output_len(len, stride);
    let cols = im2col(input, batch, k, stride, out_len);
    let rows = batch * out_len;
    let mut out = Tensor::zeros(&[rows, f]);
    for r in 0..rows {
        out.row_mut(r).copy_from_slice(bias.data());
    }
    gemm(
        rows,
        k * c,
        f,
        &cols,
        (k * c, 1),
        weights.data(),
        (f, 1),
        1.0,
        out.data_mut(),
        (f, 1),
    );
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    /// `None` when the caller did not ask for it.
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv1d_backward(
    grad_out: &Tensor,
    cached_input: &Tensor,
    weights: &Tensor,
    stride: usize,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    conv1d_backward_batch(grad_out, cached_input, 1, weights, stride, need_input_grad)
}

/// Backward pass of [`conv1d_forward_batch`]; weight and bias gradients are
/// summed over the batch.
pub fn conv1d_backward_batch(
    grad_out: &Tensor,
    cached_input: &Tensor,
    batch: usize,
    weights: &Tensor,
    stride: usize,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let &[k, c, f] = weights.shape() else {
        return Err(internal_err!("conv weights must be 3-D, got {:?}", weights.shape()));
    };
    if stride == 0 || cached_input.shape().len() != 2 || cached_input.cols() != c {
        return Err(internal_err!(
            "cached conv input {:?} does not fit weights {:?}",
            cached_input.shape(),
            weights.shape()
        ));
    }
    let len = batch_len(cached_input.rows(), batch).map_err(|e| internal_err!("{e}"))?;
    let out_len = same_output_len(len, stride);
    let rows = batch * out_len;
    if grad_out.shape() != [rows, f] {
        return Err(internal_err!(
            "conv grad has shape {:?}, forward produced [{rows}, {f}]",
            grad_out.shape()
        ));
    }
    let window = k * c;
    let cols = im2col(cached_input, batch, k, stride, out_len);

    let mut grad_w = Tensor::zeros(weights.shape());
    gemm(
        window,
        rows,
        f,
        &cols,
        (1, window),
        grad_out.data(),
        (f, 1),
        0.0,
        grad_w.data_mut(),
        (f, 1),
    );

    let mut grad_b = Tensor::zeros(&[f]);
    for r in 0..rows {
        for (b, &g) in grad_b.data_mut().iter_mut().zip(grad_out.row(r)) {
            *b += g;
        }
    }

    let input = if need_input_grad {
        let mut grad_cols = vec![0.0; rows * window];
        gemm(
            rows,
            f,
            window,
            grad_out.data(),
            (f, 1),
            weights.data(),
            (1, f),
            0.0,
            &mut grad_cols,
            (window, 1),
        );
        Some(col2im(&grad_cols, batch, len, c, k, stride, out_len))
    } else {
        None
    };

    Ok(ConvGrads {
        input,
        weights: grad_w,
        bias: grad_b,
    })
}

/// Fully connected layer applied independently to every time position.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[in_features x units]`
    pub weights: Tensor,
    /// `[units]`
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn units(&self) -> usize {
        self.weights.cols()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        dense_forward(input, &self.weights, &self.bias)
    }

    pub fn backward(&self, grad_out: &Tensor, cached_input: &Tensor) -> Result<DenseGrads> {
        dense_backward(grad_out, cached_input, &self.weights, true)
    }
}

fn dense_dims(weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let &[fan_in, units] = weights.shape() else {
        return Err(config_err!("dense weights must be 2-D, got {:?}", weights.shape()));
    };
    if bias.len() != units {
        return Err(config_err!("dense bias has {} entries for {units} units", bias.len()));
    }
    Ok((fan_in, units))
}

pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (fan_in, units) = dense_dims(weights, bias)?;
    if input.shape().len() != 2 || input.cols() != fan_in {
        return Err(config_err!(
            "dense expects [T x {fan_in}] input, got {:?}",
            input.shape()
        ));
    }
    let rows = input.rows();
    let mut out = Tensor::zeros(&[rows, units]);
    for r in 0..rows {
        out.row_mut(r).copy_from_slice(bias.data());
    }
    gemm(
        rows,
        fan_in,
        units,
        input.data(),
        (fan_in, 1),
        weights.data(),
        (units, 1),
        1.0,
        out.data_mut(),
        (units, 1),
    );
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(
    grad_out: &Tensor,
    cached_input: &Tensor,
    weights: &Tensor,
    need_input_grad: bool,
) -> Result<DenseGrads> {
    let &[fan_in, units] = weights.shape() else {
        return Err(internal_err!("dense weights must be 2-D"));
    };
    let rows = cached_input.rows();
    if grad_out.shape() != [rows, units] || cached_input.cols() != fan_in {
        return Err(internal_err!(
            "dense backward shapes disagree: grad {:?}, input {:?}, weights {:?}",
            grad_out.shape(),
            cached_input.shape(),
            weights.shape()
        ));
    }
    let mut grad_w = Tensor::zeros(weights.shape());
    gemm(
        fan_in,
        rows,
        units,
        cached_input.data(),
        (1, fan_in),
        grad_out.data(),
        (units, 1),
        0.0,
        grad_w.data_mut(),
        (units, 1),
    );
    let mut grad_b = Tensor::zeros(&[units]);
    for r in 0..rows {
        for (b, &g) in grad_b.data_mut().iter_mut().zip(grad_out.row(r)) {
            *b += g;
        }
    }
    let input = need_input_grad.then(|| {
        let mut grad_in = Tensor::zeros(&[rows, fan_in]);
        gemm(
            rows,
            units,
            fan_in,
            grad_out.data(),
            (units, 1),
            weights.data(),
            (1, units),
            0.0,
            grad_in.data_mut(),
            (fan_in, 1),
        );
        grad_in
    });
    Ok(DenseGrads {
        input,
        weights: grad_w,
        bias: grad_b,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

/// Gates `grad_out` by `input > 0`. Either the pre-activation or the
/// activation itself works as `input`, since both are positive on the same set.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (g, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    g
}

pub fn softmax_rows(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

fn check_labels(probs: &Tensor, labels: &[usize]) -> Result<()> {
    if labels.len() != probs.rows() {
        return Err(input_err!(
            "{} labels for {} probability rows",
            labels.len(),
            probs.rows()
        ));
    }
    let classes = probs.cols();
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(input_err!("label {bad} outside [0, {classes})"));
    }
    Ok(())
}

/// Mean over rows of `-ln p[t, label_t]`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(t, &l)| -probs.at(t, l).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Gradient of `cross_entropy(softmax_rows(logits))` with respect to the
/// logits, given the softmax output: `(p - onehot) / T`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    check_labels(probs, labels)?;
    let scale = 1.0 / labels.len() as f64;
    let mut grad = probs.clone();
    for (t, &l) in labels.iter().enumerate() {
        let row = grad.row_mut(t);
        row[l] -= 1.0;
        row.iter_mut().for_each(|g| *g *= scale);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn conv_sliding_window_sum() {
        let w = Tensor::new(vec![3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap();
        let out = conv1d_forward(&col(&[1.0, 2.0, 3.0]), &w, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(out.data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn identity_kernel_passes_through() {
        let layer = Conv1dLayer::new(
            1,
            Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(),
            Tensor::zeros(&[1]),
        )
        .unwrap();
        let x = col(&[0.5, -1.0, 2.0, 7.0]);
        assert_eq!(layer.forward(&x).unwrap(), x);
        let g = col(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(layer.backward(&g, &x).unwrap().input.unwrap(), g);
    }

    #[test]
    fn table_geometry_first_layer() {
        let x = Tensor::filled(&[500, 3], 0.1);
        let w = Tensor::filled(&[5, 3, 32], 0.01);
        let out = conv1d_forward(&x, &w, &Tensor::zeros(&[32]), 5).unwrap();
        assert_eq!(out.shape(), &[100, 32]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let w = Tensor::zeros(&[5, 4, 2]);
        let err = conv1d_forward(&Tensor::zeros(&[10, 3]), &w, &Tensor::zeros(&[2]), 1);
        assert!(matches!(err, Err(crate::Error::Config(_))));
    }

    #[test]
    fn conv_zero_grad_gives_zero_grads() {
        let x = Tensor::filled(&[12, 2], 0.3);
        let w = Tensor::filled(&[5, 2, 3], 0.2);
        let g = conv1d_backward(&Tensor::zeros(&[6, 3]), &x, &w, 2, true).unwrap();
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_rejects_wrong_grad_shape() {
        let x = Tensor::zeros(&[12, 2]);
        let w = Tensor::zeros(&[5, 2, 3]);
        let err = conv1d_backward(&Tensor::zeros(&[12, 3]), &x, &w, 2, true);
        assert!(matches!(err, Err(crate::Error::Internal(_))));
    }

    #[test]
    fn dense_hand_product() {
        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let out = dense_forward(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn dense_identity_and_docking_shape() {
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        let x = Tensor::new(vec![2, 4], (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(dense_forward(&x, &eye, &Tensor::zeros(&[4])).unwrap(), x);

        let dock = DenseLayer {
            weights: Tensor::filled(&[256, 256], 0.001),
            bias: Tensor::zeros(&[256]),
        };
        assert_eq!(dock.forward(&Tensor::filled(&[5, 256], 1.0)).unwrap().shape(), &[5, 256]);
        assert!(dense_forward(&Tensor::zeros(&[5, 3]), &eye, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn relu_values_and_gate() {
        let x = col(&[-1.0, 2.5, 3.0, -3.0]);
        assert_eq!(relu(&x).data(), &[0.0, 2.5, 3.0, 0.0]);
        let g = relu_backward(&Tensor::filled(&[4, 1], 1.0), &x);
        assert_eq!(g.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_cases() {
        let p = softmax_rows(&Tensor::zeros(&[1, 8]));
        assert!(p.data().iter().all(|&v| (v - 0.125).abs() < 1e-15));

        let p = softmax_rows(&Tensor::from_rows(&[vec![0.0, 2f64.ln()]]).unwrap());
        assert!((p.at(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.at(0, 1) - 2.0 / 3.0).abs() < 1e-15);

        let p = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        assert!(p.is_finite());
        assert!((p.at(0, 0) - 1.0).abs() < 1e-15 && p.at(0, 1) < 1e-300);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::filled(&[3, 8], 0.125);
        let loss = cross_entropy(&uniform, &[0, 3, 7]).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);

        let mut perfect = Tensor::zeros(&[2, 4]);
        perfect.data_mut()[1] = 1.0;
        perfect.data_mut()[4 + 2] = 1.0;
        assert_eq!(cross_entropy(&perfect, &[1, 2]).unwrap(), 0.0);

        let p = Tensor::from_rows(&[vec![0.5, 0.25, 0.25]]).unwrap();
        assert!((cross_entropy(&p, &[1]).unwrap() - 4f64.ln()).abs() < 1e-15);

        assert!(matches!(cross_entropy(&p, &[3]), Err(crate::Error::Input(_))));
    }

    #[test]
    fn softmax_ce_backward_formula() {
        let p = Tensor::from_rows(&[vec![0.5, 0.25, 0.25], vec![0.2, 0.3, 0.5]]).unwrap();
        let g = softmax_cross_entropy_backward(&p, &[1, 2]).unwrap();
        let expect = [0.25, -0.375, 0.125, 0.1, 0.15, -0.25];
        for (a, b) in g.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
