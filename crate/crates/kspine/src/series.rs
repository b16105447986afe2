//! Truncated power series in one variable.

/// out = a·b truncated to `out.len()` coefficients.
pub fn mul_into(a: &[f64], b: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (j, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for i in 0..=j.min(a.len().saturating_sub(1)) {
            if j - i < b.len() {
                s += a[i] * b[j - i];
            }
        }
        *o = s;
    }
    let _ = n;
}

/// ∏_m G_m^{ℓ_m} truncated to degree `deg`, where `g[m]` holds the
/// coefficients of G_m.
pub fn monomial_series(ell: &[u32], g: &[&[f64]], deg: usize, out: &mut Vec<f64>, scratch: &mut Vec<f64>) {
    out.clear();
    out.resize(deg + 1, 0.0);
    out[0] = 1.0;
    scratch.resize(deg + 1, 0.0);
    for (m, &l) in ell.iter().enumerate() {
        for _ in 0..l {
            mul_into(out, g[m], scratch);
            out.copy_from_slice(scratch);
        }
    }
}
