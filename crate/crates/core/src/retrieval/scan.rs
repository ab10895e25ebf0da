//! Exact brute-force cosine scan over row-normalized embedding matrices.

use std::cmp::Ordering;

use crate::par::*;

/// Rows handed to one worker at a time.
const ROW_BLOCK: usize = 256;

/// Distance reported when either side has (near) zero norm.
pub const ZERO_NORM_DISTANCE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Nearest,
    Furthest,
}

/// `Σ a·b` in f64 with eight independent lanes so the loop vectorizes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] as f64 * y[i] as f64;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x as f64 * *y as f64;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Elements per f32 partial sum before it is folded into f64.
const BLOCK: usize = 256;
const LANES: usize = 16;

#[inline(always)]
fn dot_blocked_body(a: &[f32], b: &[f32]) -> f64 {
    let mut total = 0.0f64;
    for (xa, xb) in a.chunks(BLOCK).zip(b.chunks(BLOCK)) {
        let mut acc = [0.0f32; LANES];
        let ca = xa.chunks_exact(LANES);
        let cb = xb.chunks_exact(LANES);
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for i in 0..LANES {
                acc[i] += x[i] * y[i];
            }
        }
        let mut part = 0.0f64;
        for v in acc {
            part += v as f64;
        }
        for (x, y) in ra.iter().zip(rb) {
            part += *x as f64 * *y as f64;
        }
        total += part;
    }
    total
}

/// Raw dot products of `query` with each row of `rows` into `out`.
type RowsFn = fn(&[f32], usize, &[f32], &mut [f64]);

fn dots_portable(rows: &[f32], dim: usize, query: &[f32], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(rows.chunks_exact(dim)) {
        *o = dot_blocked_body(row, query);
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    use super::BLOCK;

    /// Sixteen f32 lanes (two registers) per row, folded to f64 per block.
    #[inline(always)]
    unsafe fn fold(acc: [__m256; 2]) -> f64 {
        let mut lanes = [0.0f32; 16];
        _mm256_storeu_ps(lanes.as_mut_ptr(), acc[0]);
        _mm256_storeu_ps(lanes.as_mut_ptr().add(8), acc[1]);
        let mut part = 0.0f64;
        for v in lanes {
            part += v as f64;
        }
        part
    }

    #[inline(always)]
    unsafe fn tail(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    /// One row; bit-identical to any row of [`dot4`].
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot1(a: &[f32], q: &[f32]) -> f64 {
        let n = a.len();
        let (pa, pq) = (a.as_ptr(), q.as_ptr());
        let mut total = 0.0f64;
        let mut i = 0;
        while i + BLOCK <= n {
            let mut acc = [_mm256_setzero_ps(); 2];
            let mut j = i;
            while j < i + BLOCK {
                for (l, s) in acc.iter_mut().enumerate() {
                    let y = _mm256_loadu_ps(pq.add(j + 8 * l));
                    *s = _mm256_fmadd_ps(_mm256_loadu_ps(pa.add(j + 8 * l)), y, *s);
                }
                j += 16;
            }
            total += fold(acc);
            i += BLOCK;
        }
        total + tail(&a[i..], &q[i..n])
    }

    /// Four rows against one query, sharing the query loads.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot4(rows: [&[f32]; 4], q: &[f32]) -> [f64; 4] {
        let n = q.len();
        let pq = q.as_ptr();
        let p = rows.map(|r| r.as_ptr());
        let mut total = [0.0f64; 4];
        let mut i = 0;
        while i + BLOCK <= n {
            let mut acc = [[_mm256_setzero_ps(); 2]; 4];
            let mut j = i;
            while j < i + BLOCK {
                #[allow(clippy::needless_range_loop)]
                for l in 0..2 {
                    let y = _mm256_loadu_ps(pq.add(j + 8 * l));
                    for r in 0..4 {
                        acc[r][l] =
                            _mm256_fmadd_ps(_mm256_loadu_ps(p[r].add(j + 8 * l)), y, acc[r][l]);
                    }
                }
                j += 16;
            }
            for r in 0..4 {
                total[r] += fold(acc[r]);
            }
            i += BLOCK;
        }
        for r in 0..4 {
            total[r] += tail(&rows[r][i..], &q[i..]);
        }
        total
    }

    pub(super) fn dots(rows: &[f32], dim: usize, query: &[f32], out: &mut [f64]) {
        let mut it = rows.chunks_exact(dim);
        let mut o = out.chunks_exact_mut(4);
        for o4 in &mut o {
            let r: [&[f32]; 4] = std::array::from_fn(|_| it.next().expect("row per output"));
            // SAFETY: `super::rows_kernel` hands this out only after AVX2 and
            // FMA were detected.
            o4.copy_from_slice(&unsafe { dot4(r, query) });
        }
        for (d, row) in o.into_remainder().iter_mut().zip(it) {
            // SAFETY: as above.
            *d = unsafe { dot1(row, query) };
        }
    }
}

/// Picks the widest available build of the scan kernel once per scan.
fn rows_kernel() -> RowsFn {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        return avx2::dots;
    }
    dots_portable
}

/// `Σ a·b` with the scan's arithmetic: f32 lanes summed over blocks of 256
/// elements, block sums accumulated in f64. Relative error stays near `1e-7`
/// while the inner loop runs at f32 vector width.
pub fn dot_blocked(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut out = [0.0];
    rows_kernel()(a, a.len(), b, &mut out);
    out[0]
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit-normalizes `v` in f64 and rounds back to f32; `None` when the norm is
/// below `1e-12`.
pub fn unit(v: &[f32]) -> Option<Vec<f32>> {
    let n = norm(v);
    if n < 1e-12 {
        return None;
    }
    Some(v.iter().map(|&x| flush((x as f64 / n) as f32)).collect())
}

/// Components of a unit vector below this magnitude are zeroed, so no product
/// of two stored components is subnormal (subnormals stall the scan on x86).
/// The cosine moves by at most `dim · 2^-63`.
pub const FLUSH_BELOW: f32 = 1.0842022e-19; // 2^-63

#[inline]
fn flush(x: f32) -> f32 {
    if x.abs() < FLUSH_BELOW {
        0.0
    } else {
        x
    }
}

#[inline]
fn finish(dots: &mut [f64], out: &mut [f64], zero_rows: &[bool]) {
    for ((d, &dot), &z) in out.iter_mut().zip(dots.iter()).zip(zero_rows) {
        *d = if z {
            ZERO_NORM_DISTANCE
        } else {
            (1.0 - dot).clamp(0.0, 2.0)
        };
    }
}

/// Cosine distance from a unit `query` to every row of `matrix`
/// (`N × dim`, rows unit norm or flagged in `zero_rows`). Single-threaded.
pub fn scan_sequential(
    matrix: &[f32],
    dim: usize,
    zero_rows: &[bool],
    query: Option<&[f32]>,
    out: &mut [f64],
) {
    let Some(q) = query else {
        out.fill(ZERO_NORM_DISTANCE);
        return;
    };
    let kernel = rows_kernel();
    let mut dots = vec![0.0; ROW_BLOCK];
    for ((d, rows), z) in out
        .chunks_mut(ROW_BLOCK)
        .zip(matrix.chunks(ROW_BLOCK * dim))
        .zip(zero_rows.chunks(ROW_BLOCK))
    {
        let dots = &mut dots[..d.len()];
        kernel(rows, dim, q, dots);
        finish(dots, d, z);
    }
}

/// Same as [`scan_sequential`], split over row blocks on the worker pool.
/// Each distance is computed independently, so the output does not depend on
/// the worker count.
pub fn scan(
    matrix: &[f32],
    dim: usize,
    zero_rows: &[bool],
    query: Option<&[f32]>,
    out: &mut [f64],
) {
    let Some(q) = query else {
        out.fill(ZERO_NORM_DISTANCE);
        return;
    };
    let kernel = rows_kernel();
    out.par_chunks_mut(ROW_BLOCK)
        .zip(matrix.par_chunks(ROW_BLOCK * dim))
        .zip(zero_rows.par_chunks(ROW_BLOCK))
        .for_each(|((d, rows), z)| {
            let mut dots = [0.0; ROW_BLOCK];
            let dots = &mut dots[..d.len()];
            kernel(rows, dim, q, dots);
            finish(dots, d, z);
        });
}

fn order(dir: Direction) -> impl Fn(&(f64, usize), &(f64, usize)) -> Ordering {
    move |a, b| {
        let asc = a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        match dir {
            Direction::Nearest => asc,
            Direction::Furthest => asc.reverse(),
        }
    }
}

/// The `k` best `(distance, row)` pairs. Nearest sorts by `(distance, row)`
/// ascending; furthest is the exact reverse of that order.
pub fn top_k(
    distances: &[f64],
    k: usize,
    dir: Direction,
    exclude: Option<usize>,
) -> Vec<(f64, usize)> {
    let mut cand: Vec<(f64, usize)> = distances
        .iter()
        .copied()
        .enumerate()
        .filter(|&(i, _)| Some(i) != exclude)
        .map(|(i, d)| (d, i))
        .collect();
    let k = k.min(cand.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = order(dir);
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, &cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(&cmp);
    cand
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f32> = (0..37).map(|x| (x as f32).sin()).collect();
        let b: Vec<f32> = (0..37).map(|x| (x as f32 * 0.3).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
        let long_a: Vec<f32> = (0..1000).map(|x| (x as f32 * 0.7).sin()).collect();
        let long_b: Vec<f32> = (0..1000).map(|x| (x as f32 * 0.2).cos()).collect();
        let naive: f64 = long_a
            .iter()
            .zip(&long_b)
            .map(|(x, y)| *x as f64 * *y as f64)
            .sum();
        assert!((dot_blocked(&long_a, &long_b) - naive).abs() < 1e-5);
    }

    #[test]
    fn scans_agree() {
        let dim = 5;
        let rows: Vec<f32> = (0..(600 * dim))
            .map(|x| ((x * 7919) % 13) as f32 - 6.0)
            .collect();
        let mut m = Vec::new();
        let mut zero = Vec::new();
        for r in rows.chunks_exact(dim) {
            match unit(r) {
                Some(u) => {
                    m.extend(u);
                    zero.push(false)
                }
                None => {
                    m.extend(vec![0.0; dim]);
                    zero.push(true)
                }
            }
        }
        let q = unit(&[1.0, -2.0, 0.5, 0.0, 3.0]).unwrap();
        let mut a = vec![0.0; 600];
        let mut b = vec![0.0; 600];
        scan_sequential(&m, dim, &zero, Some(&q), &mut a);
        scan(&m, dim, &zero, Some(&q), &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn grouped_rows_match_single_rows() {
        let dim = 300;
        let rows: Vec<f32> = (0..7 * dim).map(|x| ((x as f32) * 0.37).sin()).collect();
        let q: Vec<f32> = unit(&rows[dim..2 * dim]).unwrap();
        let mut out = vec![0.0; 7];
        scan_sequential(&rows, dim, &[false; 7], Some(&q), &mut out);
        for (r, d) in rows.chunks_exact(dim).zip(&out) {
            let naive: f64 = r.iter().zip(&q).map(|(x, y)| *x as f64 * *y as f64).sum();
            assert_eq!(*d, (1.0 - dot_blocked(r, &q)).clamp(0.0, 2.0));
            assert!((*d - (1.0 - naive).clamp(0.0, 2.0)).abs() < 1e-5);
        }
        let u = unit(&rows[..dim]).unwrap();
        assert!((1.0 - dot_blocked(&u, &u)).abs() <= 1e-6);
    }

    #[test]
    fn top_k_orders_and_ties() {
        let d = [0.5, 0.1, 0.5, 0.9, 0.1];
        let near = top_k(&d, 5, Direction::Nearest, None);
        assert_eq!(
            near.iter().map(|x| x.1).collect::<Vec<_>>(),
            vec![1, 4, 0, 2, 3]
        );
        let far = top_k(&d, 5, Direction::Furthest, None);
        let mut rev: Vec<usize> = near.iter().map(|x| x.1).collect();
        rev.reverse();
        assert_eq!(far.iter().map(|x| x.1).collect::<Vec<_>>(), rev);
        assert_eq!(
            top_k(&d, 2, Direction::Nearest, Some(1))
                .iter()
                .map(|x| x.1)
                .collect::<Vec<_>>(),
            vec![4, 0]
        );
    }
}
