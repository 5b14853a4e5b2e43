//! Pair scans over event locations and times.
//!
//! Spatially close pairs are found by bucketing locations on a uniform grid
//! with cell size equal to the search radius, so only the 3x3 neighbourhood of
//! each cell is scanned. The brute-force double loop stays available as a
//! reference path.

use alloc::vec::Vec;

use crate::geometry::Point;

/// Unordered pairs `(i, j)`, `i < j`, with `‖p_i - p_j‖ <= radius`, sorted.
pub fn close_pairs(points: &[Point], radius: f64) -> Vec<(u32, u32)> {
    let n = points.len();
    if n < 2 {
        return Vec::new();
    }
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    for p in points {
        min_x = min_x.min(p.x);
        min_y = min_y.min(p.y);
    }
    let cell = if radius > 0.0 { radius } else { 1.0 };
    let key = |p: &Point| -> (i64, i64) {
        (
            libm::floor((p.x - min_x) / cell) as i64,
            libm::floor((p.y - min_y) / cell) as i64,
        )
    };
    let mut order: Vec<((i64, i64), u32)> = points.iter().enumerate().map(|(i, p)| (key(p), i as u32)).collect();
    order.sort_unstable();

    // (key, start, end) runs over `order`
    let mut buckets: Vec<((i64, i64), usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=n {
        if i == n || order[i].0 != order[start].0 {
            buckets.push((order[start].0, start, i));
            start = i;
        }
    }
    let find = |k: (i64, i64)| buckets.binary_search_by(|b| b.0.cmp(&k)).ok();

    let mut out = Vec::new();
    let mut emit = |a: u32, b: u32| {
        if points[a as usize].dist(points[b as usize]) <= radius {
            out.push((a.min(b), a.max(b)));
        }
    };
    for &((kx, ky), s, e) in &buckets {
        for i in s..e {
            for j in i + 1..e {
                emit(order[i].1, order[j].1);
            }
        }
        for (dx, dy) in [(1, -1), (1, 0), (1, 1), (0, 1)] {
            if let Some(nb) = find((kx + dx, ky + dy)) {
                let (_, s2, e2) = buckets[nb];
                for i in s..e {
                    for j in s2..e2 {
                        emit(order[i].1, order[j].1);
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Reference O(n²) version of [`close_pairs`].
pub fn close_pairs_brute(points: &[Point], radius: f64) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if points[i].dist(points[j]) <= radius {
                out.push((i as u32, j as u32));
            }
        }
    }
    out
}

/// Number of unordered pairs with `|t_i - t_j| <= tau`.
pub fn time_close_count(times: &[f64], tau: f64) -> u64 {
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut count = 0u64;
    let mut hi = 0;
    for i in 0..sorted.len() {
        if hi < i + 1 {
            hi = i + 1;
        }
        while hi < sorted.len() && sorted[hi] - sorted[i] <= tau {
            hi += 1;
        }
        count += (hi - i - 1) as u64;
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(n, r) in &[(0usize, 0.1), (1, 0.1), (50, 0.0), (300, 0.05), (300, 0.3), (200, 2.0)] {
            let mut pts: Vec<Point> = (0..n).map(|_| Point::new(rng.random(), rng.random())).collect();
            if n > 10 {
                pts[3] = pts[7];
            }
            assert_eq!(close_pairs(&pts, r), close_pairs_brute(&pts, r), "n={n} r={r}");
        }
    }

    #[test]
    fn time_pairs_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let times: Vec<f64> = (0..400).map(|_| libm::floor(rng.random_range(0.0..100.0))).collect();
        for tau in [0.0, 1.0, 3.5, 200.0] {
            let mut brute = 0u64;
            for i in 0..times.len() {
                for j in i + 1..times.len() {
                    if (times[i] - times[j]).abs() <= tau {
                        brute += 1;
                    }
                }
            }
            assert_eq!(time_close_count(&times, tau), brute);
        }
    }
}
