//! Dense row-major f64 tensors. Rank 0 (scalar), 1 (vector) and 2 (matrix)
//! are the only ranks the graph ops produce.

/// Dense tensor. Invariant: `shape.iter().product() == data.len()`
/// (empty shape means scalar, one element).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} does not match {} values",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![x] }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, x: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![x; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar (or 1-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows of a rank-2 tensor ([m, n] -> m).
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on rank-{} tensor", self.shape.len());
        self.shape[0]
    }

    /// Columns of a rank-2 tensor ([m, n] -> n).
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on rank-{} tensor", self.shape.len());
        self.shape[1]
    }

    pub fn all_finite(&self) -> bool {
        // Abs-sum is NaN/Inf iff some element is non-finite (values here are
        // far from f64::MAX, so the sum itself cannot overflow).
        self.data.iter().map(|x| x.abs()).sum::<f64>().is_finite()
    }
}

/// C = alpha * op(A) @ op(B), row-major. `ta`/`tb` transpose the stored
/// operand. Shapes are validated by the caller.
pub fn matmul(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (am, ak) = (a.rows(), a.cols());
    let (bm, bk) = (b.rows(), b.cols());
    let (m, k) = if ta { (ak, am) } else { (am, ak) };
    let (kb, n) = if tb { (bk, bm) } else { (bm, bk) };
    assert_eq!(k, kb, "matmul inner dims: {}x{} vs {}x{}", m, k, kb, n);

    let mut out = Tensor::zeros(vec![m, n]);
    // Stored [r, c] row-major; transposing swaps the roles of the strides:
    // logical[i, j] = stored[j, i] sits at j*c + i.
    let (rsa, csa) = if ta { (1, ak as isize) } else { (ak as isize, 1) };
    let (rsb, csb) = if tb { (1, bk as isize) } else { (bk as isize, 1) };
    // Safety: dimensions and strides are consistent with the validated
    // row-major buffers above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}
