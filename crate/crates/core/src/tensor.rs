//! Dense row-major `f32` tensors and the eager kernels shared by the
//! gradient tape.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("backward requires a scalar output of shape [1], got {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense tensor with a row-major flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sub-tensor along the leading axis.
    pub fn row(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip("sub", other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip("mul", other, |a, b| a * b)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, op: &'static str, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2("matmul", self)?;
        let (k2, n) = dims2("matmul", other)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Tensor::new(vec![m, n], out)
    }

    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let geom = ConvGeometry::new(self, weight, bias)?;
        Ok(conv2d_forward(&geom, &self.data, &weight.data, &bias.data))
    }

    pub fn maxpool2(&self) -> Result<Tensor> {
        Ok(maxpool2_forward(self)?.0)
    }
}

pub(crate) fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        other => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: other.to_vec(),
        }),
    }
}

/// `out = beta * out + op(a) * op(b)` where `a` is `m x k` and `b` is `k x n`
/// after the optional transposes. Transposed operands are stored row-major in
/// their untransposed shape.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_transposed: bool,
    b: &[f32],
    b_transposed: bool,
    out: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the slices cover exactly the strided extents computed above.
    unsafe {
        matrixmultiply::sgemm(
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a valid (unpadded, stride 1) NCHW convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Self> {
        let [batch, in_channels, height, width] = *input.shape() else {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                shape: input.shape().to_vec(),
            });
        };
        let [out_channels, wc, kernel_h, kernel_w] = *weight.shape() else {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                shape: weight.shape().to_vec(),
            });
        };
        if wc != in_channels || kernel_h > height || kernel_w > width || kernel_h == 0 || kernel_w == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.shape().to_vec(),
                right: weight.shape().to_vec(),
            });
        }
        if bias.shape() != [out_channels] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            out_h: height - kernel_h + 1,
            out_w: width - kernel_w + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Unfolds one image (`C x H x W`) into a `patch_len x out_pixels` matrix.
pub(crate) fn im2col(g: &ConvGeometry, image: &[f32], col: &mut [f32]) {
    let pixels = g.out_pixels();
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[row * pixels..(row + 1) * pixels];
                for oy in 0..g.out_h {
                    let src = (c * g.height + oy + ky) * g.width + kx;
                    dst[oy * g.out_w..(oy + 1) * g.out_w].copy_from_slice(&image[src..src + g.out_w]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the columns back into an image buffer.
pub(crate) fn col2im(g: &ConvGeometry, col: &[f32], image: &mut [f32]) {
    let pixels = g.out_pixels();
    for c in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[row * pixels..(row + 1) * pixels];
                for oy in 0..g.out_h {
                    let dst = (c * g.height + oy + ky) * g.width + kx;
                    for (d, s) in image[dst..dst + g.out_w]
                        .iter_mut()
                        .zip(&src[oy * g.out_w..(oy + 1) * g.out_w])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f32], weight: &[f32], bias: &[f32]) -> Tensor {
    let pixels = g.out_pixels();
    let out_len = g.out_channels * pixels;
    let mut out = vec![0.0; g.batch * out_len];
    let mut col = vec![0.0; g.patch_len() * pixels];
    for n in 0..g.batch {
        im2col(g, &input[n * g.input_len()..(n + 1) * g.input_len()], &mut col);
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        for (o, chunk) in dst.chunks_mut(pixels).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm(g.out_channels, g.patch_len(), pixels, weight, false, &col, false, dst, 1.0);
    }
    Tensor {
        shape: g.output_shape(),
        data: out,
    }
}

/// 2x2 max pooling with stride 2 (floor); also returns the flat argmax index
/// into the input for every output element. Ties resolve to the first
/// element in row-major window order.
pub(crate) fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = *input.shape() else {
        return Err(TensorError::Rank {
            op: "maxpool2",
            expected: 4,
            shape: input.shape().to_vec(),
        });
    };
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor {
            shape: vec![n, c, oh, ow],
            data: out,
        },
        argmax,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_add() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let a = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
        assert_eq!(a.relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::new(vec![3, 3], (0..9).map(|v| v as f32 * 0.5 - 1.0).collect()).unwrap();
        assert_eq!(Tensor::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"));
        assert!(Tensor::zeros(vec![2]).add(&Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn bad_data_length_rejected() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn conv_matches_direct_loop() {
        let input = Tensor::new(vec![2, 2, 4, 5], (0..80).map(|v| ((v * 7) % 11) as f32 - 5.0).collect()).unwrap();
        let weight = Tensor::new(vec![3, 2, 2, 3], (0..36).map(|v| ((v * 5) % 7) as f32 - 3.0).collect()).unwrap();
        let bias = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let out = input.conv2d(&weight, &bias).unwrap();
        assert_eq!(out.shape(), &[2, 3, 3, 3]);
        let x = input.data();
        let w = weight.data();
        for n in 0..2 {
            for o in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = bias.data()[o];
                        for c in 0..2 {
                            for ky in 0..2 {
                                for kx in 0..3 {
                                    acc += x[((n * 2 + c) * 4 + oy + ky) * 5 + ox + kx]
                                        * w[((o * 2 + c) * 2 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = out.data()[((n * 3 + o) * 3 + oy) * 3 + ox];
                        assert!((got - acc).abs() < 1e-4, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_picks_window_max() {
        let input = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 5.0, 0.0, -1.0, 3.0, 2.0, -2.0, -3.0]).unwrap();
        let out = input.maxpool2().unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 2]);
        assert_eq!(out.data(), &[5.0, 0.0]);
    }
}
