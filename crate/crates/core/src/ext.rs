//! Index bookkeeping for exterior powers of R^n.
//!
//! A k-form on R^n is stored as its coefficients on `dx_I`, with `I` running over
//! sorted k-subsets of `0..n` in lexicographic order.

pub fn binom(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: usize = 1;
    for i in 0..k {
        r = r * (n - i) / (i + 1);
    }
    r
}

/// Sorted k-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(binom(n, k));
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] < n - (k - i) {
                idx[i] += 1;
                for t in i + 1..k {
                    idx[t] = idx[t - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Position of a sorted subset in [`subsets`].
pub fn subset_index(n: usize, s: &[usize]) -> usize {
    let k = s.len();
    let mut r = 0;
    let mut prev = 0;
    for (i, &v) in s.iter().enumerate() {
        for skipped in prev..v {
            r += binom(n - skipped - 1, k - i - 1);
        }
        prev = v + 1;
    }
    r
}

/// `dx_a ∧ dx_b = sign · dx_{a∪b}`; `None` when the subsets overlap.
pub fn merge_sign(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, f64)> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    let mut inversions = 0usize;
    while i < a.len() || j < b.len() {
        if j == b.len() || (i < a.len() && a[i] < b[j]) {
            out.push(a[i]);
            i += 1;
        } else if i == a.len() || b[j] < a[i] {
            // b[j] jumps over the a's not yet placed
            inversions += a.len() - i;
            out.push(b[j]);
            j += 1;
        } else {
            return None;
        }
    }
    Some((out, if inversions.is_multiple_of(2) { 1.0 } else { -1.0 }))
}

pub fn det(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    match n {
        0 => return 1.0,
        1 => return m[0][0],
        2 => return m[0][0] * m[1][1] - m[0][1] * m[1][0],
        _ => {}
    }
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
        if m[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            m.swap(p, c);
            d = -d;
        }
        d *= m[c][c];
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            if f != 0.0 {
                for k in c..n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    d
}

/// Evaluates the k-form with the given coefficients on k vectors of R^n.
pub fn eval_on_vectors(n: usize, coeffs: &[f64], vectors: &[Vec<f64>]) -> f64 {
    let k = vectors.len();
    let mut s = 0.0;
    for (c, idx) in coeffs.iter().zip(subsets(n, k)) {
        if *c == 0.0 {
            continue;
        }
        let m: Vec<Vec<f64>> = idx.iter().map(|&i| vectors.iter().map(|v| v[i]).collect()).collect();
        s += c * det(m);
    }
    s
}

/// Coefficients of the pullback of a k-form under a linear map with Jacobian `jac`
/// (`jac[i][j] = ∂y_i/∂x_j`, y in R^n, x in R^src).
pub fn pull_coeffs(n: usize, src: usize, k: usize, coeffs: &[f64], jac: &[Vec<f64>]) -> Vec<f64> {
    let tgt = subsets(n, k);
    subsets(src, k)
        .iter()
        .map(|cols| {
            let mut s = 0.0;
            for (c, rows) in coeffs.iter().zip(&tgt) {
                if *c == 0.0 {
                    continue;
                }
                let m: Vec<Vec<f64>> = rows.iter().map(|&r| cols.iter().map(|&q| jac[r][q]).collect()).collect();
                s += c * det(m);
            }
            s
        })
        .collect()
}

/// Coefficients of `a ∧ b`.
pub fn wedge_coeffs(n: usize, ka: usize, a: &[f64], kb: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; binom(n, ka + kb)];
    if ka + kb > n {
        return out;
    }
    let sa = subsets(n, ka);
    let sb = subsets(n, kb);
    for (ca, ia) in a.iter().zip(&sa) {
        if *ca == 0.0 {
            continue;
        }
        for (cb, ib) in b.iter().zip(&sb) {
            if *cb == 0.0 {
                continue;
            }
            if let Some((u, sg)) = merge_sign(ia, ib) {
                out[subset_index(n, &u)] += sg * ca * cb;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_are_ranked_consistently() {
        for n in 0..7 {
            for k in 0..=n {
                let s = subsets(n, k);
                assert_eq!(s.len(), binom(n, k));
                for (i, sub) in s.iter().enumerate() {
                    assert_eq!(subset_index(n, sub), i);
                }
            }
        }
    }

    #[test]
    fn merge_signs() {
        assert_eq!(merge_sign(&[0], &[1]), Some((vec![0, 1], 1.0)));
        assert_eq!(merge_sign(&[1], &[0]), Some((vec![0, 1], -1.0)));
        assert_eq!(merge_sign(&[0, 2], &[1]), Some((vec![0, 1, 2], -1.0)));
        assert_eq!(merge_sign(&[1, 2], &[0]), Some((vec![0, 1, 2], 1.0)));
        assert_eq!(merge_sign(&[1], &[1]), None);
    }

    #[test]
    fn determinants() {
        assert_eq!(det(vec![vec![2.0, 0.0, 0.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 4.0]]), 24.0);
        assert!((det(vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn dx_wedge_dy_on_basis() {
        let dx = [1.0, 0.0];
        let dy = [0.0, 1.0];
        let w = wedge_coeffs(2, 1, &dx, 1, &dy);
        assert_eq!(eval_on_vectors(2, &w, &[vec![1.0, 0.0], vec![0.0, 1.0]]), 1.0);
        assert_eq!(eval_on_vectors(2, &w, &[vec![0.0, 1.0], vec![1.0, 0.0]]), -1.0);
    }

    #[test]
    fn pullback_of_area_form_is_jacobian_determinant() {
        let jac = vec![vec![2.0, 1.0], vec![0.5, 3.0]];
        let p = pull_coeffs(2, 2, 2, &[1.0], &jac);
        assert!((p[0] - 5.5).abs() < 1e-15);
    }
}
