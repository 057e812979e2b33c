//! Clustering quality metrics.

/// Fraction of points whose predicted cluster matches the ground truth under
/// the best one-to-one relabeling of predicted clusters.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    if pred.is_empty() {
        return 0.0;
    }
    let k = pred
        .iter()
        .chain(truth.iter())
        .max()
        .map_or(1, |m| m + 1);
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[p][t] += 1;
    }
    let mut labels: Vec<usize> = (0..k).collect();
    let mut best = 0usize;
    permute(&mut labels, 0, &mut |perm| {
        let score: usize = (0..k).map(|p| confusion[p][perm[p]]).sum();
        best = best.max(score);
    });
    best as f64 / pred.len() as f64
}

fn permute(items: &mut [usize], start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute(items, start + 1, visit);
        items.swap(start, i);
    }
}

/// Adjusted Rand index between two partitions; 1.0 iff they are identical
/// up to relabeling, ~0 for independent partitions.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let choose2 = |v: usize| -> f64 { (v * v.saturating_sub(1)) as f64 / 2.0 };
    let sum_ij: f64 = table
        .iter()
        .flat_map(|row| row.iter())
        .map(|&v| choose2(v))
        .sum();
    let sum_a: f64 = (0..ka)
        .map(|i| choose2(table[i].iter().sum::<usize>()))
        .sum();
    let sum_b: f64 = (0..kb)
        .map(|j| choose2((0..ka).map(|i| table[i][j]).sum::<usize>()))
        .sum();
    let expected = sum_a * sum_b / choose2(n);
    let max_index = (sum_a + sum_b) / 2.0;
    if (max_index - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_ij - expected) / (max_index - expected)
}
