use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::scalar::Real;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Normalized rows and their reciprocal standard deviations. Statistics
/// are accumulated in f64.
pub(crate) struct Normalized<T> {
    pub xhat: Array2<T>,
    pub rstd: Vec<f64>,
}

pub(crate) fn normalize_rows<T: Real>(x: ArrayView2<T>, eps: f64) -> Normalized<T> {
    let d = x.ncols() as f64;
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut rstd = Vec::with_capacity(x.nrows());
    for (row, mut out) in x.axis_iter(Axis(0)).zip(xhat.axis_iter_mut(Axis(0))) {
        let (mean, r) = row_stats(row, eps, d);
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o = T::of((v.f64() - mean) * r);
        }
        rstd.push(r);
    }
    Normalized { xhat, rstd }
}

pub(crate) fn row_stats<T: Real>(row: ArrayView1<T>, eps: f64, d: f64) -> (f64, f64) {
    let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d;
    let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn affine<T: Real>(xhat: &Array2<T>, w: &Array1<T>, b: &Array1<T>) -> Array2<T> {
    let mut y = xhat.clone();
    Zip::from(y.rows_mut()).for_each(|mut row| {
        Zip::from(&mut row).and(w).and(b).for_each(|y, &w, &b| *y = *y * w + b);
    });
    y
}

/// Backward through `y = xhat * w + b` and the normalization, row-wise.
pub(crate) fn layer_norm_backward<T: Real>(
    dy: ArrayView2<T>,
    w: &Array1<T>,
    norm: &Normalized<T>,
) -> Array2<T> {
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (i, (dy_row, mut dx_row)) in dy.axis_iter(Axis(0)).zip(dx.axis_iter_mut(Axis(0))).enumerate() {
        let xhat = norm.xhat.row(i);
        let g: Vec<f64> = dy_row.iter().zip(w.iter()).map(|(a, b)| a.f64() * b.f64()).collect();
        let mean_g = g.iter().sum::<f64>() / d;
        let mean_gx = g.iter().zip(xhat.iter()).map(|(g, x)| g * x.f64()).sum::<f64>() / d;
        let r = norm.rstd[i];
        for ((o, g), x) in dx_row.iter_mut().zip(&g).zip(xhat.iter()) {
            *o = T::of(r * (g - mean_g - x.f64() * mean_gx));
        }
    }
    dx
}

/// The tanh approximation of GELU used by GPT-2.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let x = x.f64();
    T::of(0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let x = x.f64();
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    T::of(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x))
}

/// Causal softmax of scaled scores. Entries above the diagonal receive an
/// additive −∞ before normalization; max-subtraction and sums run in f64.
pub(crate) fn causal_softmax<T: Real>(scores: &Array2<T>, scale: f64) -> Array2<T> {
    let n = scores.nrows();
    let mut out = Array2::zeros((n, n));
    let mut buf = vec![0.0f64; n];
    for i in 0..n {
        for (j, b) in buf.iter_mut().enumerate() {
            *b = if j <= i {
                scores[[i, j]].f64() * scale
            } else {
                f64::NEG_INFINITY
            };
        }
        let max = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for b in buf.iter_mut() {
            *b = (*b - max).exp();
            sum += *b;
        }
        for (j, b) in buf.iter().enumerate() {
            out[[i, j]] = T::of(b / sum);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one_and_are_causal() {
        let s = array![[1.0f32, 9.0, 9.0], [0.5, -0.5, 9.0], [3.0, 2.0, 1.0]];
        let p = causal_softmax(&s, 1.0);
        for i in 0..3 {
            let sum: f32 = p.row(i).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for j in i + 1..3 {
                assert_eq!(p[[i, j]], 0.0);
            }
        }
        assert_eq!(p[[0, 0]], 1.0);
    }

    #[test]
    fn gelu_matches_reference_points() {
        // values of 0.5x(1+tanh(sqrt(2/pi)(x+0.044715x^3)))
        assert!((gelu(1.0f64) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((gelu(-2.0f64) - -0.045_402_305_912_224_94).abs() < 1e-12);
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let x = array![[1.0f64, 2.0, 3.0, 10.0], [-4.0, 0.0, 4.0, 8.0]];
        let n = normalize_rows(x.view(), 0.0);
        for row in n.xhat.rows() {
            let mean = row.sum() / 4.0;
            let var = row.mapv(|v| (v - mean).powi(2)).sum() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }
}
