//! K-Means over per-pixel channel vectors of an attention stack (visualisation only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AttentionStack;
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

/// Lloyd's algorithm with k-means++ seeding and Euclidean distance.
pub fn kmeans_cluster(stack: &AttentionStack, k: usize, seed: u64, iters: usize) -> Result<LabelGrid> {
    let (c, (h, w)) = (stack.channels(), stack.size());
    let n = h * w;
    ensure!(k >= 2 && k <= n, InvalidArgument, "k = {k} must lie in [2, {n}]");
    let data = stack.maps.data();
    let point = |p: usize, out: &mut Vec<f64>| {
        out.clear();
        out.extend((0..c).map(|ch| data[ch * n + p]));
    };
    let points: Vec<Vec<f64>> = (0..n)
        .map(|p| {
            let mut v = Vec::with_capacity(c);
            point(p, &mut v);
            v
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            if dist[chosen] == 0.0 {
                chosen = dist.iter().rposition(|&d| d > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
        for (d, p) in dist.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..iters.max(1) {
        let mut changed = false;
        for (p, label) in points.iter().zip(labels.iter_mut()) {
            let best = nearest(p, &centers);
            if best != *label {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; c]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((center, sum), &count) in centers.iter_mut().zip(sums).zip(&counts) {
            if count > 0 {
                *center = sum.into_iter().map(|s| s / count as f64).collect();
            }
        }
    }
    Ok(LabelGrid {
        height: h,
        width: w,
        labels,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::MergeMode;
    use crate::tensor::Tensor;

    fn half_plane_stack(channels: usize, h: usize, w: usize) -> AttentionStack {
        let mut data = vec![0.0; channels * h * w];
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w / 2 {
                    data[(c * h + y) * w + x] = 1.0;
                }
            }
        }
        AttentionStack {
            maps: Tensor::from_parts(&[channels, h, w], data),
            merge: MergeMode::Average,
            normalized: false,
            span: 0..1,
            layers: vec![0],
        }
    }

    #[test]
    fn separates_half_planes() {
        let stack = half_plane_stack(4, 8, 10);
        for seed in 0..20 {
            let g = kmeans_cluster(&stack, 2, seed, 10).unwrap();
            let left = g.labels[0];
            for y in 0..8 {
                for x in 0..10 {
                    let expect_left = x < 5;
                    assert_eq!(g.labels[y * 10 + x] == left, expect_left, "seed {seed} ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_k() {
        let stack = half_plane_stack(1, 2, 2);
        assert!(kmeans_cluster(&stack, 1, 0, 5).is_err());
        assert!(kmeans_cluster(&stack, 5, 0, 5).is_err());
        assert!(kmeans_cluster(&stack, 4, 0, 5).is_ok());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let mut stack = half_plane_stack(3, 8, 8);
        for (i, v) in stack.maps.data_mut().iter_mut().enumerate() {
            *v += ((i * 7919) % 13) as f64 * 0.01;
        }
        let a = kmeans_cluster(&stack, 5, 42, 20).unwrap();
        let b = kmeans_cluster(&stack, 5, 42, 20).unwrap();
        assert_eq!(a, b);
    }
}
