//! Dense row-major `f64` matrices and the handful of kernels the recurrent
//! cells need.
//!
//! The slice kernels at the bottom of the file are what the training path
//! uses. Every output element is accumulated in ascending index order with no
//! reassociation, so a batched call and a row-at-a-time call produce the same
//! bits.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Hadamard,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Column vector.
    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
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

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        matmul(self, rhs)
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm_nn_acc(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    Ok(out)
}

pub fn elementwise_unary(a: &Matrix, f: Unary) -> Matrix {
    let op = match f {
        Unary::Sigmoid => sigmoid,
        Unary::Tanh => tanh,
    };
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().map(|&v| op(v)).collect(),
    }
}

pub fn elementwise_binary(a: &Matrix, b: &Matrix, f: Binary) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            op: "elementwise_binary",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| match f {
            Binary::Add => x + y,
            Binary::Hadamard => x * y,
        })
        .collect();
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

/// Stack `a` on top of `b`.
pub fn concat_rows(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    // An empty operand stacks with anything.
    if a.data.is_empty() && a.rows == 0 {
        return Ok(b.clone());
    }
    if b.data.is_empty() && b.rows == 0 {
        return Ok(a.clone());
    }
    if a.cols != b.cols {
        return Err(Error::DimensionMismatch {
            op: "concat_rows",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Matrix {
        rows: a.rows + b.rows,
        cols: a.cols,
        data,
    })
}

/// `e^x` from a reduction `x = k·ln2 + r`, `|r| ≤ ln2/2`, and a degree-12
/// Taylor polynomial in `r`. Within a few ulps of the libm result and free
/// of branches, so loops over it vectorize. Saturates outside
/// `[-708, 709]`; NaN propagates.
#[inline]
pub fn exp(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const INV_LN2: f64 = std::f64::consts::LOG2_E;
    const C: [f64; 13] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
    ];
    // adding 1.5·2^52 rounds to an integer held in the low mantissa bits
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let x = x.clamp(-708.0, 709.0);
    let shifted = x * INV_LN2 + SHIFTER;
    let k = shifted - SHIFTER;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = C[12];
    for c in C[..12].iter().rev() {
        p = p * r + c;
    }
    let ki = shifted.to_bits().wrapping_sub(SHIFTER.to_bits());
    let scale = f64::from_bits(ki.wrapping_add(1023) << 52);
    p * scale
}

/// Logistic function, evaluated through `exp(-|x|)` so it never overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let e = exp(-x.abs());
    let r = 1.0 / (1.0 + e);
    if x >= 0.0 {
        r
    } else {
        e * r
    }
}

/// Hyperbolic tangent through `exp(-2|x|)`.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let e = exp(-2.0 * x.abs());
    let t = (1.0 - e) / (1.0 + e);
    t.copysign(x)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`, each element with a single fused multiply-add.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = alpha.mul_add(*xi, *yi);
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

const MR: usize = 4;
const NR: usize = 16;

/// `c (rows×n) += A · b` where `A(i, p) = a[i·rs + p·cs]` and `b` is
/// `inner×n`. Every element of `c` receives its products in ascending `p`,
/// the same order and with the same fused multiply-add as repeated [`axpy`],
/// so the blocking never changes bits.
#[allow(clippy::too_many_arguments)]
fn gemm_acc_strided(a: &[f64], rs: usize, cs: usize, b: &[f64], c: &mut [f64], rows: usize, inner: usize, n: usize) {
    for i0 in (0..rows).step_by(MR) {
        let mr = MR.min(rows - i0);
        for j0 in (0..n).step_by(NR) {
            let w = NR.min(n - j0);
            if mr == MR && w == NR {
                block(a, rs, cs, b, c, inner, n, i0, j0, MR, NR);
            } else {
                block(a, rs, cs, b, c, inner, n, i0, j0, mr, w);
            }
        }
    }
}

/// One `mr × w` tile of `c`, held in registers across the `inner` loop.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn block(
    a: &[f64],
    rs: usize,
    cs: usize,
    b: &[f64],
    c: &mut [f64],
    inner: usize,
    n: usize,
    i0: usize,
    j0: usize,
    mr: usize,
    w: usize,
) {
    let mut acc = [[0.0f64; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate().take(mr) {
        row[..w].copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + w]);
    }
    for p in 0..inner {
        let bv = &b[p * n + j0..p * n + j0 + w];
        for (r, row) in acc.iter_mut().enumerate().take(mr) {
            let av = a[(i0 + r) * rs + p * cs];
            for (x, y) in row[..w].iter_mut().zip(bv) {
                *x = av.mul_add(*y, *x);
            }
        }
    }
    for (r, row) in acc.iter().enumerate().take(mr) {
        c[(i0 + r) * n + j0..(i0 + r) * n + j0 + w].copy_from_slice(&row[..w]);
    }
}

/// `c (m×n) += a (m×k) · b (k×n)`, all row-major.
pub fn gemm_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    gemm_acc_strided(a, k, 1, b, c, m, k, n);
}

/// `c (k×n) += aᵀ · b` where `a` is m×k and `b` is m×n.
pub fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    assert_eq!(c.len(), k * n);
    gemm_acc_strided(a, 1, k, b, c, k, m, n);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-50.0f64..50.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    #[test]
    fn matmul_small_example() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c, m(&[&[19.0, 22.0], &[43.0, 50.0]]));
        assert_eq!(c, naive(&a, &b));
    }

    #[test]
    fn matmul_identity_and_zero() {
        let b = m(&[&[1.5, -2.0], &[0.25, 4.0], &[9.0, -7.5]]);
        assert_eq!(matmul(&Matrix::identity(3), &b).unwrap(), b);
        let z = Matrix::zeros(2, 4);
        assert_eq!(matmul(&b, &z).unwrap(), Matrix::zeros(3, 4));
    }

    #[test]
    fn matmul_rejects_mismatch_and_names_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::DimensionMismatch { op: "matmul", .. }));
    }

    #[test]
    fn unary_values() {
        let z = Matrix::zeros(1, 1);
        assert_eq!(elementwise_unary(&z, Unary::Sigmoid).get(0, 0), 0.5);
        assert_eq!(elementwise_unary(&z, Unary::Tanh).get(0, 0), 0.0);
        let big = Matrix::column(&[500.0, -500.0]);
        let s = elementwise_unary(&big, Unary::Sigmoid);
        assert!((s.get(0, 0) - 1.0).abs() <= 1e-15);
        assert!(s.get(1, 0) >= 0.0 && s.get(1, 0) < 1e-200);
        assert!(s.is_finite());
    }

    #[test]
    fn binary_values() {
        let a = m(&[&[2.0, 3.0]]);
        let b = m(&[&[4.0, 5.0]]);
        assert_eq!(
            elementwise_binary(&a, &b, Binary::Hadamard).unwrap(),
            m(&[&[8.0, 15.0]])
        );
        assert_eq!(elementwise_binary(&a, &Matrix::zeros(1, 2), Binary::Add).unwrap(), a);
        let ones = m(&[&[1.0, 1.0]]);
        assert_eq!(elementwise_binary(&a, &ones, Binary::Hadamard).unwrap(), a);
        assert!(elementwise_binary(&a, &Matrix::zeros(2, 1), Binary::Add).is_err());
    }

    #[test]
    fn concat_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(concat_rows(&a, &Matrix::zeros(0, 0)).unwrap(), a);
        let c = concat_rows(&Matrix::column(&[1.0]), &Matrix::column(&[2.0])).unwrap();
        assert_eq!(c, Matrix::column(&[1.0, 2.0]));
        let s = concat_rows(&a, &Matrix::zeros(4, 2)).unwrap();
        assert_eq!(s.shape(), (7, 2));
        assert_eq!(s.row(2), &[5.0, 6.0]);
        assert!(concat_rows(&a, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn transposed_kernel_matches_explicit_transpose() {
        let a = m(&[&[1.0, -2.0, 0.5], &[3.0, 0.0, 4.0]]);
        let b = m(&[&[0.5, 1.0], &[-1.0, 2.0]]);
        let mut c = vec![0.0; 6];
        gemm_tn_acc(a.as_slice(), b.as_slice(), &mut c, 2, 3, 2);
        let expect = naive(&a.transpose(), &b);
        assert_eq!(c, expect.into_vec());
    }

    #[test]
    fn exp_tracks_libm() {
        assert_eq!(exp(0.0), 1.0);
        assert!(exp(f64::NAN).is_nan());
        assert_eq!(exp(-1e6), exp(-708.0));
        let mut x: f64 = -700.0;
        while x < 700.0 {
            let rel = (exp(x) - x.exp()).abs() / x.exp();
            assert!(rel < 1e-15, "x {x}: rel {rel}");
            x += 0.37;
        }
    }

    #[test]
    fn activations_track_libm() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(40.0), 1.0);
        assert_eq!(sigmoid(-800.0), exp(-708.0) / (1.0 + exp(-708.0)));
        let mut x: f64 = -30.0;
        while x < 30.0 {
            let s = 1.0 / (1.0 + (-x).exp());
            assert!((sigmoid(x) - s).abs() < 1e-15, "sigmoid {x}");
            assert!((tanh(x) - x.tanh()).abs() < 1e-15, "tanh {x}");
            x += 0.013;
        }
    }

    proptest! {
        #[test]
        fn blocked_kernels_match_row_axpy_bitwise(
            m in 1usize..11, k in 1usize..9, n in 1usize..40, seed in any::<u64>()
        ) {
            let mut rng = crate::initializers::Rng::new(seed);
            let mut draw = |len: usize| (0..len).map(|_| rng.normal()).collect::<Vec<f64>>();
            let (a, b, c0) = (draw(m * k), draw(k * n), draw(m * n));
            let mut want = c0.clone();
            for i in 0..m {
                for p in 0..k {
                    axpy(a[i * k + p], &b[p * n..(p + 1) * n], &mut want[i * n..(i + 1) * n]);
                }
            }
            let mut got = c0.clone();
            gemm_nn_acc(&a, &b, &mut got, m, k, n);
            prop_assert_eq!(&got, &want);

            let bt = draw(m * n);
            let ct0 = draw(k * n);
            let mut want = ct0.clone();
            for r in 0..m {
                for p in 0..k {
                    axpy(a[r * k + p], &bt[r * n..(r + 1) * n], &mut want[p * n..(p + 1) * n]);
                }
            }
            let mut got = ct0;
            gemm_tn_acc(&a, &bt, &mut got, m, k, n);
            prop_assert_eq!(got, want);
        }

        #[test]
        fn matmul_is_associative(
            a in arb_matrix(3, 4), b in arb_matrix(4, 2), c in arb_matrix(2, 5)
        ) {
            let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = l.as_slice().iter().chain(r.as_slice()).fold(1.0f64, |s, v| s.max(v.abs()));
            prop_assert!(l.max_abs_diff(&r) / scale < 1e-9);
        }

        #[test]
        fn sigmoid_is_symmetric(x in -1e3f64..1e3) {
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn add_and_hadamard_commute(a in arb_matrix(3, 3), b in arb_matrix(3, 3)) {
            prop_assert_eq!(
                elementwise_binary(&a, &b, Binary::Add).unwrap(),
                elementwise_binary(&b, &a, Binary::Add).unwrap()
            );
            prop_assert_eq!(
                elementwise_binary(&a, &b, Binary::Hadamard).unwrap(),
                elementwise_binary(&b, &a, Binary::Hadamard).unwrap()
            );
        }

        #[test]
        fn operations_stay_finite(a in arb_matrix(4, 4), b in arb_matrix(4, 4)) {
            prop_assert!(matmul(&a, &b).unwrap().is_finite());
            prop_assert!(elementwise_unary(&a, Unary::Sigmoid).is_finite());
            prop_assert!(elementwise_unary(&a, Unary::Tanh).is_finite());
            prop_assert!(elementwise_binary(&a, &b, Binary::Add).unwrap().is_finite());
            prop_assert!(elementwise_binary(&a, &b, Binary::Hadamard).unwrap().is_finite());
            prop_assert!(concat_rows(&a, &b).unwrap().is_finite());
        }
    }
}
