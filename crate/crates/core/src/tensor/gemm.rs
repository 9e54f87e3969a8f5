// Row-major matrix kernels. Each output element accumulates its products in
// increasing reduction index, starting from whatever `c` already holds; the
// convolution oracle tests rely on that order for bit equality.

const MR: usize = 4;
const NR: usize = 8;

/// c[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (m_full, n_full) = (m - m % MR, n - n % NR);
    for i0 in (0..m_full).step_by(MR) {
        let rows = [&a[i0 * k..][..k], &a[(i0 + 1) * k..][..k], &a[(i0 + 2) * k..][..k], &a[(i0 + 3) * k..][..k]];
        for j0 in (0..n_full).step_by(NR) {
            tile(k, n, rows, &b[j0..], &mut c[i0 * n + j0..]);
        }
        edge(i0..i0 + MR, n_full..n, k, n, a, b, c);
    }
    edge(m_full..m, 0..n, k, n, a, b, c);
}

/// One MR×NR block of `c`, held in registers across the whole reduction.
#[inline(always)]
fn tile(k: usize, n: usize, a: [&[f64]; MR], b: &[f64], c: &mut [f64]) {
    let load = |c: &[f64], ii: usize| -> [f64; NR] { c[ii * n..ii * n + NR].try_into().unwrap() };
    let (mut c0, mut c1, mut c2, mut c3) = (load(c, 0), load(c, 1), load(c, 2), load(c, 3));
    let [a0, a1, a2, a3] = a;
    for p in 0..k {
        let bp: [f64; NR] = b[p * n..p * n + NR].try_into().unwrap();
        let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
        for jj in 0..NR {
            c0[jj] += x0 * bp[jj];
            c1[jj] += x1 * bp[jj];
            c2[jj] += x2 * bp[jj];
            c3[jj] += x3 * bp[jj];
        }
    }
    for (ii, row) in [c0, c1, c2, c3].iter().enumerate() {
        c[ii * n..ii * n + NR].copy_from_slice(row);
    }
}

fn edge(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
) {
    if cols.len() < NR {
        for i in rows {
            let a_row = &a[i * k..(i + 1) * k];
            for j in cols.clone() {
                let mut acc = c[i * n + j];
                for (p, &av) in a_row.iter().enumerate() {
                    acc += av * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        return;
    }
    for i in rows {
        let c_row = &mut c[i * n + cols.start..i * n + cols.end];
        for p in 0..k {
            let aip = a[i * k + p];
            for (cv, &bv) in c_row.iter_mut().zip(&b[p * n + cols.start..p * n + cols.end]) {
                *cv += aip * bv;
            }
        }
    }
}

fn transposed(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for (r, row) in x[..rows * cols].chunks_exact(cols).enumerate() {
        for (cidx, &v) in row.iter().enumerate() {
            t[cidx * rows + r] = v;
        }
    }
    t
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    gemm_nn(m, k, n, a, &transposed(n, k, b), c);
}

/// c[m×n] += a[k×m]ᵀ · b[k×n]
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    gemm_nn(m, k, n, &transposed(k, m, a), b, c);
}
