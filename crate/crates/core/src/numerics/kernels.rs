//! Loop kernels shared by the forward and backward rules.
//!
//! Every output element is accumulated in a fixed order that does not depend
//! on how many rows a matrix has, so a row computed inside a large batch is
//! bit-identical to the same row computed alone.

use super::Real;

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed at the rank of `out`, zero along broadcast axes.
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < offset || shape[i - offset] == 1 { 0 } else { own[i - offset] })
        .collect()
}

/// Visits every index of `shape` in row-major order, passing the linear
/// index together with the offsets under two alternative stride sets.
pub fn for_each_offset2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let n: usize = shape.iter().product();
    let inner = shape[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut lin = 0;
    while lin < n {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(lin, ia, ib);
            lin += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // advance the outer odometer
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            base_a -= sa[d] * shape[d];
            base_b -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// `c = a · b` with `a: [n, k]`, `b: [k, m]`; `c` is overwritten.
pub fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut c[i * m..(i + 1) * m];
        row.iter_mut().for_each(|v| *v = T::zero());
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * m..(kk + 1) * m];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `da += dc · bᵀ` with `dc: [n, m]`, `b: [k, m]`, `da: [n, k]`.
pub fn gemm_nt_acc<T: Real>(dc: &[T], b: &[T], da: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let drow = &dc[i * m..(i + 1) * m];
        for kk in 0..k {
            let brow = &b[kk * m..(kk + 1) * m];
            let mut acc = T::zero();
            for (&x, &y) in drow.iter().zip(brow) {
                acc += x * y;
            }
            da[i * k + kk] += acc;
        }
    }
}

/// `db += aᵀ · dc` with `a: [n, k]`, `dc: [n, m]`, `db: [k, m]`.
pub fn gemm_tn_acc<T: Real>(a: &[T], dc: &[T], db: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let drow = &dc[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &mut db[kk * m..(kk + 1) * m];
            for (bv, &dv) in brow.iter_mut().zip(drow) {
                *bv += av * dv;
            }
        }
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// √(2/π) for the tanh form of GELU.
pub const GELU_C: f64 = 0.797_884_560_802_865_4;
pub const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
    }

    #[test]
    fn odometer_visits_in_row_major_order() {
        let shape = [2, 3];
        let s = strides(&shape);
        let t = broadcast_strides(&[3], &shape);
        let mut seen = vec![];
        for_each_offset2(&shape, &s, &t, |o, a, b| seen.push((o, a, b)));
        assert_eq!(seen, vec![(0, 0, 0), (1, 1, 1), (2, 2, 2), (3, 3, 0), (4, 4, 1), (5, 5, 2)]);
    }

    #[test]
    fn gemm_matches_naive_triple_loop() {
        let (n, k, m) = (3, 4, 2);
        let a: Vec<f64> = (0..n * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * m).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let mut c = vec![0.0; n * m];
        gemm(&a, &b, &mut c, n, k, m);
        for i in 0..n {
            for j in 0..m {
                let want: f64 = (0..k).map(|kk| a[i * k + kk] * b[kk * m + j]).sum();
                assert!((c[i * m + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
