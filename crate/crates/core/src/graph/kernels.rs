//! Dense inner loops shared by the forward and adjoint passes.

/// `c[p×r] += a[p×q] · b[q×r]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let c_row = &mut c[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * r..(k + 1) * r];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[p×q] += a[p×r] · b[q×r]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let a_row = &a[i * r..(i + 1) * r];
        for k in 0..q {
            let b_row = &b[k * r..(k + 1) * r];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * q + k] += dot;
        }
    }
}

/// `c[q×r] += a[p×q]ᵀ · b[p×r]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let b_row = &b[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let c_row = &mut c[k * r..(k + 1) * r];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_explicit_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3×2
        let mut c = [0.0; 4];
        gemm_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // bᵀ is 2×3 = [[7,9,11],[8,10,12]]
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0; 4];
        gemm_nt(&a, &bt, &mut c2, 2, 2, 3);
        assert_eq!(c, c2);

        // aᵀ·a for a 2×3 is 3×3
        let mut ata = [0.0; 9];
        gemm_tn(&a, &a, &mut ata, 2, 3, 3);
        assert_eq!(ata, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }
}
