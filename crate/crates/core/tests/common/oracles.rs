//! Slow, obviously-correct reference implementations.

use openslot::geometry::BBox;

/// Minimum-cost permutation by enumerating all `n!` permutations in
/// lexicographic order, keeping the first optimum. Costs are summed row by
/// row so equal assignments give bit-identical totals.
pub fn brute_assign(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| (0..n).fold(0.0, |s, i| s + cost[i][p[i]]);
    let mut best = (perm.clone(), total(&perm));
    while next_permutation(&mut perm) {
        let t = total(&perm);
        if t < best.1 {
            best = (perm.clone(), t);
        }
    }
    best
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// AUROC by comparing every (positive, negative) pair; ties count one half.
pub fn pairwise_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for &p in pos {
        for &n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

/// FPR at the highest threshold (tried over every observed score) whose
/// TPR is at least 95%, accepting `score >= threshold`.
pub fn sweep_fpr95(pos: &[f64], neg: &[f64]) -> f64 {
    let mut best: Option<f64> = None;
    for &t in pos.iter().chain(neg) {
        let tp = pos.iter().filter(|&&p| p >= t).count();
        if 100 * tp >= 95 * pos.len() && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("the minimum score accepts every positive");
    neg.iter().filter(|&&n| n >= t).count() as f64 / neg.len() as f64
}

/// Box of the largest 4-connected component of the thresholded, min-max
/// normalized map, scanned pixel by pixel. Components come from union-find;
/// equal sizes go to the component whose first pixel comes first.
pub fn pixel_scan_box(
    map: &[f64],
    grid: (usize, usize),
    (w, h): (usize, usize),
    threshold: f64,
    min_pixels: usize,
) -> Option<BBox> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return None;
    }
    let on = |x: usize, y: usize| {
        let cell = (y * grid.0 / h) * grid.1 + x * grid.1 / w;
        (map[cell] - lo) / (hi - lo) > threshold
    };
    let mut parent: Vec<usize> = (0..w * h).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            if !on(x, y) {
                continue;
            }
            for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                if nx < w && ny < h && on(nx, ny) {
                    let a = find(&mut parent, y * w + x);
                    let b = find(&mut parent, ny * w + nx);
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    // root -> (size, first pixel, x0, y0, x1, y1)
    let mut comps: std::collections::BTreeMap<usize, (usize, usize, usize, usize, usize, usize)> = Default::default();
    for y in 0..h {
        for x in 0..w {
            if !on(x, y) {
                continue;
            }
            let r = find(&mut parent, y * w + x);
            let e = comps.entry(r).or_insert((0, y * w + x, x, y, x, y));
            e.0 += 1;
            e.2 = e.2.min(x);
            e.3 = e.3.min(y);
            e.4 = e.4.max(x);
            e.5 = e.5.max(y);
        }
    }
    let best = comps
        .values()
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))?;
    if best.0 < min_pixels.max(1) {
        return None;
    }
    Some(BBox::new(best.2 as u32, best.3 as u32, best.4 as u32 + 1, best.5 as u32 + 1))
}
