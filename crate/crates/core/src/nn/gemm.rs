//! f64 matrix multiply helpers over `matrixmultiply`, with a deterministic
//! row-split across the rayon pool for larger problems.

/// C[m,n] (+)= A[m,k] * B[k,n] with explicit [row, col] strides on every
/// operand. `accumulate` selects whether C is overwritten or added into.
#[allow(clippy::too_many_arguments)]
pub fn dgemm_full(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    astr: [isize; 2],
    b: &[f64],
    bstr: [isize; 2],
    c: &mut [f64],
    cstr: [isize; 2],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            // nothing to add; clear the addressed elements
            for i in 0..m {
                for j in 0..n {
                    c[(i as isize * cstr[0] + j as isize * cstr[1]) as usize] = 0.0;
                }
            }
        }
        return;
    }
    let contiguous_c = cstr == [n as isize, 1];
    let threads = rayon::current_num_threads();
    if !contiguous_c || threads <= 1 || m < 2 || m * n * k < PAR_THRESHOLD {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                astr[0],
                astr[1],
                b.as_ptr(),
                bstr[0],
                bstr[1],
                beta,
                c.as_mut_ptr(),
                cstr[0],
                cstr[1],
            );
        }
        return;
    }
    // Deterministic split: fixed chunk boundaries over C's rows; each chunk is
    // written by exactly one task, so results are bit-identical regardless of
    // scheduling.
    let chunk_rows = m.div_ceil(threads);
    let a_base = a.as_ptr() as usize;
    rayon::scope(|s| {
        for (ci, c_chunk) in c.chunks_mut(chunk_rows * n).enumerate() {
            let rows = c_chunk.len() / n;
            let row0 = ci * chunk_rows;
            s.spawn(move |_| unsafe {
                let a_ptr = (a_base as *const f64).offset(row0 as isize * astr[0]);
                matrixmultiply::dgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    a_ptr,
                    astr[0],
                    astr[1],
                    b.as_ptr(),
                    bstr[0],
                    bstr[1],
                    beta,
                    c_chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            });
        }
    });
}

/// Problems above this many multiply-adds get split over rows.
const PAR_THRESHOLD: usize = 1 << 17;

/// C (+)= A * B, all row-major contiguous; A[m,k], B[k,n].
pub fn dgemm_rm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k);
    debug_assert!(b.len() >= k * n);
    debug_assert!(c.len() >= m * n);
    dgemm_full(
        m,
        k,
        n,
        a,
        [k as isize, 1],
        b,
        [n as isize, 1],
        c,
        [n as isize, 1],
        accumulate,
    );
}

/// C (+)= A * B^T with A[m,k], B[n,k] row-major.
pub fn dgemm_rm_bt(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k);
    debug_assert!(b.len() >= n * k);
    debug_assert!(c.len() >= m * n);
    dgemm_full(
        m,
        k,
        n,
        a,
        [k as isize, 1],
        b,
        [1, k as isize],
        c,
        [n as isize, 1],
        accumulate,
    );
}

/// C (+)= A^T * B with A[k,m], B[k,n] row-major.
pub fn dgemm_rm_at(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= k * m);
    debug_assert!(b.len() >= k * n);
    debug_assert!(c.len() >= m * n);
    dgemm_full(
        m,
        k,
        n,
        a,
        [1, m as isize],
        b,
        [n as isize, 1],
        c,
        [n as isize, 1],
        accumulate,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                for j in 0..n {
                    c[i * n + j] += av * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_and_transposed_variants() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.61).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        dgemm_rm(m, k, n, &a, &b, &mut c, false);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // A * B^T via B stored transposed
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        dgemm_rm_bt(m, k, n, &a, &bt, &mut c2, false);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // A^T * B via A stored transposed
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c3 = vec![0.0; m * n];
        dgemm_rm_at(m, k, n, &at, &b, &mut c3, false);
        for (x, y) in c3.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // accumulate adds on top
        dgemm_rm(m, k, n, &a, &b, &mut c, true);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_output_writes_the_right_cells() {
        // C is a 2x2 block embedded in a 4x4 buffer with row stride 8, col stride 2.
        let a = vec![1.0, 2.0, 3.0, 4.0]; // [2,2]
        let b = vec![5.0, 6.0, 7.0, 8.0]; // [2,2]
        let want = naive(2, 2, 2, &a, &b);
        let mut c = vec![0.0; 16];
        dgemm_full(
            2,
            2,
            2,
            &a,
            [2, 1],
            &b,
            [2, 1],
            &mut c,
            [8, 2],
            false,
        );
        assert_eq!(c[0], want[0]);
        assert_eq!(c[2], want[1]);
        assert_eq!(c[8], want[2]);
        assert_eq!(c[10], want[3]);
        let touched = [0usize, 2, 8, 10];
        for (i, v) in c.iter().enumerate() {
            if !touched.contains(&i) {
                assert_eq!(*v, 0.0, "cell {i} should be untouched");
            }
        }
    }

    #[test]
    fn parallel_split_is_bit_identical() {
        let (m, k, n) = (256, 96, 64); // above the split threshold
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 31) % 97) as f64 * 0.013).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 17) % 89) as f64 * 0.021).collect();
        let mut c_par = vec![0.0; m * n];
        dgemm_rm(m, k, n, &a, &b, &mut c_par, false);
        let mut c_seq = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c_seq.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        assert_eq!(c_par, c_seq);
    }
}
