//! Strictly increasing multi-indices in lexicographic order.
//!
//! A degree-`k` form on an `n`-dimensional patch stores one coefficient per
//! increasing multi-index `i1 < ... < ik` (0-based internally), ordered
//! lexicographically. Antisymmetry is implicit and never stored.

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// All increasing multi-indices of length `k` drawn from `0..n`,
/// lexicographically ordered. `k = 0` yields the single empty index.
pub fn multi_indices(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k > n {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(binomial(n, k));
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        // advance to the next combination
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Position of an increasing multi-index in the lexicographic enumeration.
pub fn rank(n: usize, idx: &[usize]) -> usize {
    let k = idx.len();
    let mut r = 0;
    let mut prev = 0;
    for (pos, &i) in idx.iter().enumerate() {
        for j in prev..i {
            r += binomial(n - j - 1, k - pos - 1);
        }
        prev = i + 1;
    }
    r
}

/// Merge two disjoint increasing multi-indices, returning the sorted result
/// and the sign of the interleaving permutation; `None` if they intersect.
pub fn merge_sign(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, f64)> {
    let mut merged = Vec::with_capacity(a.len() + b.len());
    let mut inversions = 0usize;
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        if j == b.len() || (i < a.len() && a[i] < b[j]) {
            merged.push(a[i]);
            i += 1;
        } else if i == a.len() || b[j] < a[i] {
            // moving b[j] past the remaining entries of a
            inversions += a.len() - i;
            merged.push(b[j]);
            j += 1;
        } else {
            return None; // common entry
        }
    }
    let sign = if inversions % 2 == 0 { 1.0 } else { -1.0 };
    Some((merged, sign))
}

/// Insert `i` into an increasing multi-index; returns the result and the
/// sign `(-1)^pos` of moving `dx_i` to its slot. `None` if already present.
pub fn insert_sign(idx: &[usize], i: usize) -> Option<(Vec<usize>, f64)> {
    merge_sign(&[i], idx).map(|(merged, _)| {
        let pos = merged.iter().position(|&x| x == i).unwrap();
        let sign = if pos % 2 == 0 { 1.0 } else { -1.0 };
        (merged, sign)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_table() {
        assert_eq!(binomial(4, 2), 6);
        assert_eq!(binomial(4, 0), 1);
        assert_eq!(binomial(3, 5), 0);
        assert_eq!(binomial(6, 3), 20);
    }

    #[test]
    fn enumeration_is_lexicographic_and_ranked() {
        for (n, k) in [(4, 2), (5, 3), (3, 1), (4, 4), (4, 0)] {
            let all = multi_indices(n, k);
            assert_eq!(all.len(), binomial(n, k));
            let mut sorted = all.clone();
            sorted.sort();
            assert_eq!(all, sorted);
            for (r, idx) in all.iter().enumerate() {
                assert_eq!(rank(n, idx), r, "rank of {idx:?} in ({n},{k})");
            }
        }
    }

    #[test]
    fn merge_signs() {
        // dx2 ^ dx1 = -dx1 ^ dx2 (0-based: [1] and [0])
        assert_eq!(merge_sign(&[1], &[0]), Some((vec![0, 1], -1.0)));
        assert_eq!(merge_sign(&[0], &[1]), Some((vec![0, 1], 1.0)));
        assert_eq!(merge_sign(&[0, 2], &[1, 3]), Some((vec![0, 1, 2, 3], -1.0)));
        assert_eq!(merge_sign(&[0], &[0]), None);
        assert_eq!(merge_sign(&[], &[2, 3]), Some((vec![2, 3], 1.0)));
    }

    #[test]
    fn insert_signs() {
        // inserting dx1 in front: + ; one slot in: -
        assert_eq!(insert_sign(&[1, 2], 0), Some((vec![0, 1, 2], 1.0)));
        assert_eq!(insert_sign(&[0, 2], 1), Some((vec![0, 1, 2], -1.0)));
        assert_eq!(insert_sign(&[0, 1], 2), Some((vec![0, 1, 2], 1.0)));
        assert_eq!(insert_sign(&[0, 1], 1), None);
    }
}
