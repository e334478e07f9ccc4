//! Independent verification oracles used by the test suites.
//!
//! Everything here is deliberately naive and self-contained: central finite
//! differences for gradient checks, exhaustive spanning-tree enumeration via
//! Pr\u{fc}fer sequences, the adjusted Rand index, and the direct trustworthiness
//! formula over rank lists. None of it shares code with the implementations
//! it verifies.

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn central_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst relative error between an analytic and a numeric gradient.
/// Entries where both are tiny count as exact.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let diff = (a - n).abs();
        if diff <= 1e-7 {
            continue;
        }
        let scale = a.abs().max(n.abs()).max(1e-6);
        worst = worst.max(diff / scale);
    }
    worst
}

/// Minimum spanning tree weight by exhaustive enumeration of all labeled
/// trees on `n` nodes (Pr\u{fc}fer decoding, n^(n-2) candidates). `dist[i][j]` is
/// the symmetric edge weight. Only sensible for n <= 8.
pub fn exhaustive_mst_weight(dist: &[Vec<f64>]) -> f64 {
    let n = dist.len();
    assert!(n >= 2 && n <= 8, "exhaustive MST oracle is for 2 <= n <= 8");
    if n == 2 {
        return dist[0][1];
    }
    let seq_len = n - 2;
    let total: usize = n.pow(seq_len as u32);
    let mut best = f64::INFINITY;
    let mut seq = vec![0usize; seq_len];
    for code in 0..total {
        let mut c = code;
        for s in seq.iter_mut() {
            *s = c % n;
            c /= n;
        }
        best = best.min(prufer_tree_weight(&seq, n, dist));
    }
    best
}

fn prufer_tree_weight(seq: &[usize], n: usize, dist: &[Vec<f64>]) -> f64 {
    let mut degree = vec![1usize; n];
    for &s in seq {
        degree[s] += 1;
    }
    let mut weight = 0.0;
    let mut deg = degree.clone();
    for &s in seq {
        // smallest leaf
        let leaf = (0..n).find(|&i| deg[i] == 1).unwrap();
        weight += dist[leaf][s];
        deg[leaf] = 0;
        deg[s] -= 1;
    }
    let mut last = (0..n).filter(|&i| deg[i] == 1);
    let (u, v) = (last.next().unwrap(), last.next().unwrap());
    weight + dist[u][v]
}

/// Adjusted Rand index between two labelings over the same points. Noise
/// labels (or any negative value) count as ordinary singleton-style labels.
pub fn adjusted_rand_index(a: &[i64], b: &[i64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n == 0 {
        return 1.0;
    }
    let mut a_ids: Vec<i64> = a.to_vec();
    a_ids.sort_unstable();
    a_ids.dedup();
    let mut b_ids: Vec<i64> = b.to_vec();
    b_ids.sort_unstable();
    b_ids.dedup();
    let ai = |l: i64| a_ids.binary_search(&l).unwrap();
    let bi = |l: i64| b_ids.binary_search(&l).unwrap();

    let mut table = vec![vec![0u64; b_ids.len()]; a_ids.len()];
    for i in 0..n {
        table[ai(a[i])][bi(b[i])] += 1;
    }
    let choose2 = |x: u64| -> f64 { (x as f64) * (x as f64 - 1.0) / 2.0 };
    let sum_cells: f64 = table
        .iter()
        .flat_map(|row| row.iter())
        .map(|&c| choose2(c))
        .sum();
    let row_sums: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<u64> = (0..b_ids.len())
        .map(|j| table.iter().map(|r| r[j]).sum())
        .collect();
    let sum_rows: f64 = row_sums.iter().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = col_sums.iter().map(|&c| choose2(c)).sum();
    let total = choose2(n as u64);
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_cells - expected) / (max_index - expected)
}

/// Trustworthiness of a low-dimensional embedding, computed directly from
/// rank lists: T(k) = 1 - 2/(n k (2n - 3k - 1)) * sum over embedded-space
/// k-neighbors that are not original-space k-neighbors of (rank - k).
pub fn trustworthiness(original: &[Vec<f64>], embedded: &[Vec<f64>], k: usize) -> f64 {
    let n = original.len();
    assert_eq!(n, embedded.len());
    assert!(k < n && k >= 1);

    let rank_lists = |points: &[Vec<f64>]| -> Vec<Vec<usize>> {
        (0..n)
            .map(|i| {
                let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                others.sort_by(|&x, &y| {
                    let dx = sqdist(&points[i], &points[x]);
                    let dy = sqdist(&points[i], &points[y]);
                    dx.partial_cmp(&dy).unwrap().then(x.cmp(&y))
                });
                others
            })
            .collect()
    };

    let orig_ranked = rank_lists(original);
    let emb_ranked = rank_lists(embedded);

    let mut penalty = 0.0f64;
    for i in 0..n {
        let orig_knn: Vec<usize> = orig_ranked[i][..k].to_vec();
        for &j in &emb_ranked[i][..k] {
            if !orig_knn.contains(&j) {
                let rank = orig_ranked[i].iter().position(|&p| p == j).unwrap() + 1;
                penalty += (rank - k) as f64;
            }
        }
    }
    let n_f = n as f64;
    let k_f = k as f64;
    1.0 - 2.0 / (n_f * k_f * (2.0 * n_f - 3.0 * k_f - 1.0)) * penalty
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}
