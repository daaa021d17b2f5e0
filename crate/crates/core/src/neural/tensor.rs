//! Dense row-major f64 matrices and the three matmul kernels the models
//! need. Reductions use a fixed accumulation order, and the rayon path
//! splits work only across output rows, so parallel and serial builds
//! produce bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work sizes below this many multiply-adds stay on one thread; tiny
/// kernels lose more to task dispatch than they gain.
#[cfg(feature = "parallel")]
const PARALLEL_FLOP_THRESHOLD: usize = 1 << 15;

/// Row-major matrix. Vectors are 1×n or n×1 tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        assert!(rows > 0 && cols > 0, "tensor must be non-empty, got {rows}x{cols}");
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} does not fill {rows}x{cols}",
            data.len()
        );
        assert!(rows > 0 && cols > 0, "tensor must be non-empty, got {rows}x{cols}");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Tensor {
        let mut t = Tensor::zeros(rows, cols);
        t.data.fill(v);
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single element of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// self += other, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn squared_norm(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with four independent accumulators: fast, and the order is
/// fixed so every build computes the identical value.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// out_row += k * src, the row-level primitive of the nn/tn kernels.
fn axpy(k: f64, src: &[f64], out_row: &mut [f64]) {
    debug_assert_eq!(src.len(), out_row.len());
    for (o, s) in out_row.iter_mut().zip(src) {
        *o += k * s;
    }
}

/// Run `per_row` over every output row, in parallel when the kernel is
/// large enough and the parallel feature is on.
fn for_each_row(out: &mut Tensor, flops: usize, per_row: impl Fn(usize, &mut [f64]) + Sync) {
    #[cfg(feature = "parallel")]
    {
        if flops >= PARALLEL_FLOP_THRESHOLD {
            let cols = out.cols;
            out.data
                .par_chunks_mut(cols)
                .enumerate()
                .for_each(|(r, row)| per_row(r, row));
            return;
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = flops;
    for r in 0..out.rows {
        per_row(r, out.row_mut(r));
    }
}

/// a · bᵀ for a: m×k, b: n×k → m×n. The transposed right operand makes
/// both inputs row-contiguous, which is how weight matrices are stored.
pub fn mm_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(
        a.cols, b.cols,
        "mm_nt inner dimension: {}x{} vs {}x{}",
        a.rows, a.cols, b.rows, b.cols
    );
    let mut out = Tensor::zeros(a.rows, b.rows);
    for_each_row(&mut out, a.rows * b.rows * a.cols, |r, out_row| {
        let a_row = a.row(r);
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(a_row, b.row(j));
        }
    });
    out
}

/// a · b for a: m×k, b: k×n → m×n.
pub fn mm_nn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(
        a.cols, b.rows,
        "mm_nn inner dimension: {}x{} vs {}x{}",
        a.rows, a.cols, b.rows, b.cols
    );
    let mut out = Tensor::zeros(a.rows, b.cols);
    for_each_row(&mut out, a.rows * a.cols * b.cols, |r, out_row| {
        let a_row = a.row(r);
        for (k, &coef) in a_row.iter().enumerate() {
            axpy(coef, b.row(k), out_row);
        }
    });
    out
}

/// aᵀ · b for a: k×m, b: k×n → m×n.
pub fn mm_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(
        a.rows, b.rows,
        "mm_tn inner dimension: {}x{} vs {}x{}",
        a.rows, a.cols, b.rows, b.cols
    );
    let mut out = Tensor::zeros(a.cols, b.cols);
    for_each_row(&mut out, a.cols * a.rows * b.cols, |i, out_row| {
        for k in 0..a.rows {
            axpy(a.get(k, i), b.row(k), out_row);
        }
    });
    out
}
