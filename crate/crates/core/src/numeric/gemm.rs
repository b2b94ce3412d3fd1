//! `C (+)= op(A) · op(B)` on row-major slices.

/// Logical `m×k` view of a row-major buffer, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    /// Stored as `k×m` and read transposed.
    pub trans: bool,
}

impl<'a> MatRef<'a> {
    pub fn n(data: &'a [f64]) -> Self {
        MatRef { data, trans: false }
    }

    pub fn t(data: &'a [f64]) -> Self {
        MatRef { data, trans: true }
    }

    /// Row and column strides for a logical `rows×cols` matrix.
    fn strides(&self, rows: usize, cols: usize) -> (isize, isize) {
        if self.trans {
            (1, rows as isize)
        } else {
            (cols as isize, 1)
        }
    }
}

const SMALL: usize = 4096;

/// `c[m×n] = beta·c + a[m×k] · b[k×n]` with `beta ∈ {0, 1}`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, c: &mut [f64], accumulate: bool) {
    assert_eq!(a.data.len(), m * k, "gemm: lhs size");
    assert_eq!(b.data.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: out size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = a.strides(m, k);
    let (rsb, csb) = b.strides(k, n);
    if m * k * n <= SMALL {
        if !accumulate {
            c.fill(0.0);
        }
        for i in 0..m {
            for p in 0..k {
                let av = a.data[(i as isize * rsa + p as isize * csa) as usize];
                if av == 0.0 {
                    continue;
                }
                let crow = &mut c[i * n..(i + 1) * n];
                if !b.trans {
                    let brow = &b.data[p * n..(p + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                } else {
                    for (j, cv) in crow.iter_mut().enumerate() {
                        *cv += av * b.data[(p as isize * rsb + j as isize * csb) as usize];
                    }
                }
            }
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: sizes and strides were checked against the slice lengths above.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
