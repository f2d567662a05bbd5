use super::{Matrix, Real, Rng};
use crate::{Error, Result};

/// `C = A·B`. Inputs are expected to be finite; no masked entries.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.rows() {
        return Err(Error::dim(
            "matmul",
            format!(
                "{}x{} · {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            ),
        ));
    }
    let (m, n) = (a.rows(), b.cols());
    let mut c = Matrix::zeros(m, n);
    let bs = b.as_slice();
    for i in 0..m {
        let crow = c.row_mut(i);
        for (t, &av) in a.row(i).iter().enumerate() {
            let brow = &bs[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    Ok(c)
}

/// `C = Aᵀ·B` without the caller materializing the transpose.
pub fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows() != b.rows() {
        return Err(Error::dim(
            "matmul_tn",
            format!("{} rows vs {} rows", a.rows(), b.rows()),
        ));
    }
    matmul(&a.transpose(), b)
}

/// `C = A·Bᵀ`.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.cols() {
        return Err(Error::dim(
            "matmul_nt",
            format!("{} cols vs {} cols", a.cols(), b.cols()),
        ));
    }
    matmul(a, &b.transpose())
}

/// Entrywise operation selector. `Div` divides by `b + eps` when `eps` is
/// given; without it a zero denominator is a numeric error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElemOp<T> {
    Add,
    Sub,
    Mul,
    Div { eps: Option<T> },
    Exp,
}

pub fn elementwise<T: Real>(
    op: ElemOp<T>,
    a: &Matrix<T>,
    b: Option<&Matrix<T>>,
) -> Result<Matrix<T>> {
    if let ElemOp::Exp = op {
        if b.is_some() {
            return Err(Error::dim("elementwise", "exp takes one operand"));
        }
        // exp(-inf) is exactly 0.
        return Ok(a.map(|x| x.exp()));
    }
    let b = b.ok_or_else(|| Error::dim("elementwise", "binary op needs two operands"))?;
    a.expect_same_shape("elementwise", b)?;
    let mut out = a.clone();
    match op {
        ElemOp::Add => out.zip_inplace(b, |x, y| x + y)?,
        ElemOp::Sub => out.zip_inplace(b, |x, y| x - y)?,
        ElemOp::Mul => out.zip_inplace(b, |x, y| x * y)?,
        ElemOp::Div { eps: Some(eps) } => out.zip_inplace(b, |x, y| x / (y + eps))?,
        ElemOp::Div { eps: None } => {
            if b.as_slice().iter().any(|&y| y == T::zero()) {
                return Err(Error::numeric(
                    "elementwise",
                    "division by zero without stabilization",
                ));
            }
            out.zip_inplace(b, |x, y| x / y)?
        }
        ElemOp::Exp => unreachable!(),
    }
    Ok(out)
}

/// Adds a column vector (`rows x 1`) to every column of `m`.
pub fn add_column_inplace<T: Real>(m: &mut Matrix<T>, bias: &Matrix<T>) -> Result<()> {
    if bias.shape() != (m.rows(), 1) {
        return Err(Error::dim(
            "add_column",
            format!(
                "bias {}x{} for {} rows",
                bias.rows(),
                bias.cols(),
                m.rows()
            ),
        ));
    }
    for r in 0..m.rows() {
        let b = bias.get(r, 0);
        for v in m.row_mut(r) {
            *v += b;
        }
    }
    Ok(())
}

/// Glorot-uniform weights: entries strictly inside `[-b, b]` with
/// `b = sqrt(6 / (rows + cols))`.
pub fn glorot_init<T: Real>(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<T> {
    assert!(rows >= 1 && cols >= 1, "glorot_init needs a non-empty shape");
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let bound_t = T::of(bound);
    Matrix::from_fn(rows, cols, |_, _| loop {
        let x = T::of(bound * (2.0 * rng.uniform_open() - 1.0));
        if x.abs() < bound_t {
            break x;
        }
    })
}

/// Normalizes every column into a probability vector with the max-shift
/// trick. Columns that are entirely `-inf` become zero columns when
/// `allow_all_masked` is set and are an error otherwise.
pub fn column_softmax<T: Real>(m: &Matrix<T>, allow_all_masked: bool) -> Result<Matrix<T>> {
    if m.has_nan() {
        return Err(Error::numeric("column_softmax", "NaN input"));
    }
    let (rows, cols) = m.shape();
    let mut max = vec![T::neg_infinity(); cols];
    for r in 0..rows {
        for (mx, &v) in max.iter_mut().zip(m.row(r)) {
            *mx = mx.max(v);
        }
    }
    if !allow_all_masked && rows > 0 {
        if let Some(j) = max.iter().position(|&x| x == T::neg_infinity()) {
            return Err(Error::numeric(
                "column_softmax",
                format!("column {j} is fully masked"),
            ));
        }
    }
    let mut out = Matrix::zeros(rows, cols);
    let mut sums = vec![T::zero(); cols];
    for r in 0..rows {
        let src = m.row(r);
        let dst = out.row_mut(r);
        for j in 0..cols {
            if max[j] == T::neg_infinity() {
                continue;
            }
            let e = (src[j] - max[j]).exp();
            dst[j] = e;
            sums[j] += e;
        }
    }
    for r in 0..rows {
        for (v, &s) in out.row_mut(r).iter_mut().zip(&sums) {
            if s > T::zero() {
                *v /= s;
            }
        }
    }
    Ok(out)
}

/// Softmax along each row; fully masked rows become zero rows.
pub fn row_softmax<T: Real>(m: &Matrix<T>) -> Result<Matrix<T>> {
    if m.has_nan() {
        return Err(Error::numeric("row_softmax", "NaN input"));
    }
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_slice_inplace(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_slice_inplace<T: Real>(xs: &mut [T]) {
    let max = xs.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    if max == T::neg_infinity() {
        xs.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// `m[i,j] ← exp(m[i,j])` where `keep[i,j] != 0`, else exactly 0. This is
/// `exp(m) ⊙ exp(M)` for a positional mask given in multiplicative form,
/// without ever forming `inf · 0`.
pub fn masked_exp_inplace<T: Real>(m: &mut Matrix<T>, keep: &Matrix<T>) -> Result<()> {
    m.zip_inplace(keep, |x, k| if k == T::zero() { T::zero() } else { x.exp() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{AllocMeter, Rng};
    use proptest::prelude::*;

    fn triple_loop(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for t in 0..a.cols() {
                s += a.get(i, t) * b.get(t, j);
            }
            s
        })
    }

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn matmul_identity_and_small_cases() {
        let b = Matrix::from_rows(&[&[3.0, 1.0], &[2.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &b).unwrap(), b);
        let a = Matrix::from_rows(&[&[1.0, 2.0]]);
        let c = Matrix::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&a, &c).unwrap(), Matrix::from_rows(&[&[11.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = random(7, 5, &mut rng);
        let b = random(5, 3, &mut rng);
        let diff = matmul(&a, &b).unwrap().max_abs_diff(&triple_loop(&a, &b));
        assert!(diff.unwrap() <= 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension { .. })));
        assert!(matmul_tn(&a, &Matrix::zeros(3, 3)).is_err());
        assert!(matmul_nt(&a, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn matmul_records_output_allocation() {
        let a = Matrix::<f64>::zeros(4, 6);
        let b = Matrix::<f64>::zeros(6, 5);
        let meter = AllocMeter::new();
        let c = meter.measure(|| matmul(&a, &b).unwrap());
        assert_eq!(meter.peak_floats(), 20);
        assert_eq!(c.shape(), (4, 5));
    }

    #[test]
    fn transposed_products() {
        let mut rng = Rng::new(5);
        let a = random(4, 3, &mut rng);
        let b = random(4, 6, &mut rng);
        let tn = matmul_tn(&a, &b).unwrap();
        assert!(tn.max_abs_diff(&triple_loop(&a.transpose(), &b)).unwrap() <= 1e-12);
        let c = random(5, 3, &mut rng);
        let nt = matmul_nt(&a, &c).unwrap();
        assert!(nt.max_abs_diff(&triple_loop(&a, &c.transpose())).unwrap() <= 1e-12);
    }

    #[test]
    fn elementwise_cases() {
        let m = Matrix::from_rows(&[&[0.0, f64::NEG_INFINITY]]);
        assert_eq!(
            elementwise(ElemOp::Exp, &m, None).unwrap(),
            Matrix::from_rows(&[&[1.0, 0.0]])
        );
        let a = Matrix::from_rows(&[&[2.0, 3.0]]);
        let b = Matrix::from_rows(&[&[4.0, 5.0]]);
        assert_eq!(
            elementwise(ElemOp::Mul, &a, Some(&b)).unwrap(),
            Matrix::from_rows(&[&[8.0, 15.0]])
        );
        let z = Matrix::<f64>::zeros(1, 1);
        assert_eq!(
            elementwise(ElemOp::Div { eps: Some(1e-12) }, &z, Some(&z))
                .unwrap()
                .get(0, 0),
            0.0
        );
        assert!(matches!(
            elementwise(ElemOp::Div { eps: None }, &z, Some(&z)),
            Err(Error::Numeric { .. })
        ));
        assert!(elementwise(ElemOp::Add, &a, Some(&z)).is_err());
        assert!(elementwise(ElemOp::Sub, &a, None).is_err());
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = Rng::new(1);
        let w: Matrix<f64> = glorot_init(300, 300, &mut rng);
        assert!(w.as_slice().iter().all(|x| x.abs() < 0.1));
        let w: Matrix<f32> = glorot_init(1, 2, &mut rng);
        let b = 2f32.sqrt();
        assert!(w.as_slice().iter().all(|x| x.abs() < b));
    }

    #[test]
    fn glorot_mean_is_centered() {
        // Monte-Carlo: 1e5 draws, mean within 0.01·b of zero.
        let mut rng = Rng::new(2024);
        let w: Matrix<f64> = glorot_init(100, 1000, &mut rng);
        let b = (6.0f64 / 1100.0).sqrt();
        let mean = w.sum() / w.len() as f64;
        assert!(mean.abs() <= 0.01 * b, "mean {mean}");
    }

    #[test]
    fn column_softmax_cases() {
        let ninf = f64::NEG_INFINITY;
        let m = Matrix::from_rows(&[&[0.0, ninf, ninf], &[0.0, 0.0, ninf], &[0.0, 0.0, ninf]]);
        let p = column_softmax(&m, true).unwrap();
        for i in 0..3 {
            assert!((p.get(i, 0) - 1.0 / 3.0).abs() < 1e-15);
            assert_eq!(p.get(i, 2), 0.0);
        }
        assert_eq!(p.get(0, 1), 0.0);
        assert_eq!(p.get(1, 1), 0.5);
        assert!(column_softmax(&m, false).is_err());
        let nan = Matrix::from_rows(&[&[f64::NAN]]);
        assert!(matches!(
            column_softmax(&nan, true),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn masked_exp_never_forms_nan() {
        let mut m = Matrix::from_rows(&[&[1000.0, 0.0]]);
        let keep = Matrix::from_rows(&[&[0.0, 1.0]]);
        masked_exp_inplace(&mut m, &keep).unwrap();
        assert_eq!(m, Matrix::from_rows(&[&[0.0, 1.0]]));
    }

    proptest! {
        #[test]
        fn transpose_identity_holds(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let a = random(8, 8, &mut rng);
            let b = random(8, 8, &mut rng);
            let c = random(8, 8, &mut rng);
            // (AB)ᵀ = BᵀAᵀ and (AB)C = A(BC)
            let lhs = matmul(&a, &b).unwrap().transpose();
            let rhs = matmul(&b.transpose(), &a.transpose()).unwrap();
            let scale = lhs.max_abs().max(1.0);
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10 * scale);
            let l2 = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let r2 = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = l2.max_abs().max(1.0);
            prop_assert!(l2.max_abs_diff(&r2).unwrap() <= 1e-10 * scale);
        }

        #[test]
        fn softmax_columns_sum_to_one(seed in 0u64..1000, rows in 1usize..9, cols in 1usize..9) {
            let mut rng = Rng::new(seed);
            let m = Matrix::from_fn(rows, cols, |_, _| {
                if rng.bernoulli(0.3) { f64::NEG_INFINITY } else { rng.uniform_in(-20.0, 20.0) }
            });
            let p = column_softmax(&m, true).unwrap();
            prop_assert!(!p.has_nan());
            let p32 = column_softmax(&m.cast::<f32>(), true).unwrap();
            for j in 0..cols {
                let support = (0..rows).any(|i| m.get(i, j) > f64::NEG_INFINITY);
                let s: f64 = p.col(j).iter().sum();
                let s32: f32 = p32.col(j).iter().sum();
                if support {
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                    prop_assert!((s32 - 1.0).abs() <= 1e-6);
                } else {
                    prop_assert_eq!(s, 0.0);
                }
                for i in 0..rows {
                    prop_assert!((0.0..=1.0).contains(&p.get(i, j)));
                }
            }
        }
    }
}
