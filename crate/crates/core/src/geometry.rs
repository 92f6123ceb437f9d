//! Euclidean primitives on raw point clouds: squared distances, nearest
//! neighbours (plain and dilated), ARPE position sets and furthest point
//! sampling. Everything works on the xyz channels only; ties go to the lowest
//! index.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{contract, PatError, Result};
use crate::tensor::{Real, Tensor};

/// `N × (3 + f)` points: xyz followed by `f` feature channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    points: Tensor<T>,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Tensor<T>) -> Result<Self> {
        if points.rank() != 2 || points.dim(1) < 3 {
            return Err(PatError::Format(format!(
                "point cloud needs shape N×(3+f), got {:?}",
                points.shape()
            )));
        }
        if !points.is_finite() {
            return Err(PatError::Format("point cloud has non-finite coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| PatError::Format("empty point cloud".into()))?;
        let c = first.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(PatError::Format("ragged point rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Tensor::from_f64(&[rows.len(), c], &flat)?)
    }

    pub fn points(&self) -> &Tensor<T> {
        &self.points
    }

    pub fn into_points(self) -> Tensor<T> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Total channels `3 + f`.
    pub fn channels(&self) -> usize {
        self.points.dim(1)
    }

    /// Extra feature channels `f`.
    pub fn extra(&self) -> usize {
        self.channels() - 3
    }

    pub fn xyz(&self, i: usize) -> [T; 3] {
        let r = self.points.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            points: self.points.select_rows(idx),
        }
    }

    pub fn cast<U: Real>(&self) -> PointCloud<U> {
        PointCloud {
            points: self.points.cast(),
        }
    }
}

#[inline]
fn sq_dist<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// `D[i][j] = ‖xyz_i − xyz_j‖²`.
pub fn pairwise_sq_dist<T: Real>(cloud: &PointCloud<T>) -> Tensor<T> {
    let n = cloud.len();
    let xyz: Vec<[T; 3]> = (0..n).map(|i| cloud.xyz(i)).collect();
    let mut d = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(xyz[i], xyz[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Tensor::from_raw(vec![n, n], d)
}

/// `N × K` neighbour lists; row `p` never contains `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    indices: Vec<usize>,
    n: usize,
    k: usize,
    /// Candidate pool the rows were drawn from.
    pub pool: usize,
}

impl NeighborIndex {
    pub fn new(indices: Vec<usize>, n: usize, k: usize, pool: usize) -> Result<Self> {
        if indices.len() != n * k {
            return Err(contract(format!("neighbour table has {} entries, want {n}×{k}", indices.len())));
        }
        for p in 0..n {
            let row = &indices[p * k..(p + 1) * k];
            for (j, &i) in row.iter().enumerate() {
                if i >= n || i == p || row[..j].contains(&i) {
                    return Err(contract(format!("invalid neighbour row {p}: {row:?}")));
                }
            }
        }
        Ok(Self { indices, n, k, pool })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, p: usize) -> &[usize] {
        &self.indices[p * self.k..(p + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.indices
    }
}

/// All other points of row `p` ordered by (distance, index).
fn ranked_neighbors<T: Real>(d: &Tensor<T>, p: usize, n: usize, take: usize) -> Vec<usize> {
    let row = d.row(p);
    let mut cand: Vec<usize> = (0..n).filter(|&i| i != p).collect();
    let cmp = |a: &usize, b: &usize| {
        row[*a]
            .partial_cmp(&row[*b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    if take < cand.len() {
        cand.select_nth_unstable_by(take, cmp);
        cand.truncate(take);
    }
    cand.sort_by(cmp);
    cand
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(contract(format!("need 1 <= k <= N-1, got k={k}, N={n}")));
    }
    Ok(())
}

/// `k` nearest neighbours of every point, rows sorted by (distance, index).
pub fn knn<T: Real>(cloud: &PointCloud<T>, k: usize) -> Result<NeighborIndex> {
    let n = cloud.len();
    check_k(k, n)?;
    let d = pairwise_sq_dist(cloud);
    let mut indices = Vec::with_capacity(n * k);
    for p in 0..n {
        indices.extend(ranked_neighbors(&d, p, n, k));
    }
    Ok(NeighborIndex { indices, n, k, pool: k })
}

/// Candidate pool for dilated sampling: `⌊k·max(d0·N/N0, 1)⌋`, at most `N − 1`.
pub fn dilated_pool(k: usize, n: usize, d0: f64, n0: usize) -> usize {
    let rate = (d0 * n as f64 / n0 as f64).max(1.0);
    ((k as f64 * rate).floor() as usize).min(n - 1).max(k)
}

/// For every point, `k` distinct neighbours drawn uniformly without
/// replacement from its `dilated_pool` nearest; kept in (distance, index) order.
pub fn dilated_neighbor_sample<T: Real, R: Rng + ?Sized>(
    cloud: &PointCloud<T>,
    k: usize,
    d0: f64,
    n0: usize,
    rng: &mut R,
) -> Result<NeighborIndex> {
    let n = cloud.len();
    check_k(k, n)?;
    let pool = dilated_pool(k, n, d0, n0);
    let d = pairwise_sq_dist(cloud);
    let mut indices = Vec::with_capacity(n * k);
    for p in 0..n {
        let ranked = ranked_neighbors(&d, p, n, pool);
        if pool == k {
            indices.extend(ranked);
        } else {
            let mut picks = sample(rng, pool, k).into_vec();
            picks.sort_unstable();
            indices.extend(picks.into_iter().map(|i| ranked[i]));
        }
    }
    Ok(NeighborIndex { indices, n, k, pool })
}

/// Position sets: entry `(p, j)` is `concat(x_p, x_{nbr(p,j)} − x_p)` over all
/// `3 + f` channels. Shape `N × K × 2(3+f)`.
pub fn position_set<T: Real>(cloud: &PointCloud<T>, nbrs: &NeighborIndex) -> Result<Tensor<T>> {
    let (n, k, c) = (cloud.len(), nbrs.k(), cloud.channels());
    if nbrs.n() != n {
        return Err(contract(format!("neighbour table for {} points, cloud has {n}", nbrs.n())));
    }
    let pts = cloud.points();
    let mut data = Vec::with_capacity(n * k * 2 * c);
    for p in 0..n {
        let xp = pts.row(p);
        for &i in nbrs.row(p) {
            data.extend_from_slice(xp);
            data.extend(pts.row(i).iter().zip(xp).map(|(&a, &b)| a - b));
        }
    }
    Ok(Tensor::from_raw(vec![n, k, 2 * c], data))
}

/// Greedy max-min furthest point sampling in xyz starting from `start`.
///
/// The subset depends on the start. On the line `0, 1, 2, 9`:
///
/// ```
/// use patkit::geometry::{fps, PointCloud};
/// let line = PointCloud::<f64>::from_rows(&[0.0, 1.0, 2.0, 9.0].map(|x| vec![x, 0.0, 0.0])).unwrap();
/// assert_eq!(fps(&line, 3, 0).unwrap(), [0, 3, 2]); // {0, 2, 3}
/// assert_eq!(fps(&line, 3, 1).unwrap(), [1, 3, 0]); // {0, 1, 3}
/// ```
pub fn fps<T: Real>(cloud: &PointCloud<T>, n_out: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if n_out == 0 || n_out > n {
        return Err(contract(format!("fps needs 1 <= n_out <= N, got n_out={n_out}, N={n}")));
    }
    if start >= n {
        return Err(contract(format!("fps start index {start} out of range for N={n}")));
    }
    let xyz: Vec<[T; 3]> = (0..n).map(|i| cloud.xyz(i)).collect();
    let mut selected = vec![false; n];
    let mut min_d = vec![T::infinity(); n];
    let mut out = Vec::with_capacity(n_out);
    let mut cur = start;
    loop {
        out.push(cur);
        selected[cur] = true;
        if out.len() == n_out {
            break;
        }
        let mut best: Option<usize> = None;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = sq_dist(xyz[i], xyz[cur]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        cur = best.expect("n_out <= N leaves a candidate");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(xs: &[f64]) -> PointCloud<f64> {
        PointCloud::from_rows(&xs.iter().map(|&x| vec![x, 0.0, 0.0]).collect::<Vec<_>>()).unwrap()
    }

    fn triangle() -> PointCloud<f64> {
        PointCloud::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap()
    }

    fn random_cloud(n: usize, f: usize, seed: u64) -> PointCloud<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3 + f).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        PointCloud::from_rows(&rows).unwrap()
    }

    #[test]
    fn unit_triangle_distances() {
        let d = pairwise_sq_dist(&triangle());
        assert_eq!(d.data(), &[0.0, 1.0, 1.0, 1.0, 0.0, 2.0, 1.0, 2.0, 0.0]);
        let single = PointCloud::<f64>::from_rows(&[vec![3.0, 4.0, 5.0]]).unwrap();
        assert_eq!(pairwise_sq_dist(&single).data(), &[0.0]);
    }

    #[test]
    fn distances_match_double_loop() {
        let c = random_cloud(20, 2, 3);
        let d = pairwise_sq_dist(&c);
        for i in 0..20 {
            for j in 0..20 {
                let (a, b) = (c.points().row(i), c.points().row(j));
                let mut s = 0.0;
                for ch in 0..3 {
                    s += (a[ch] - b[ch]) * (a[ch] - b[ch]);
                }
                assert_eq!(d.at(&[i, j]), s);
            }
        }
    }

    #[test]
    fn knn_tie_goes_to_lower_index() {
        let nb = knn(&triangle(), 1).unwrap();
        assert_eq!(nb.row(0), &[1]);
    }

    #[test]
    fn knn_collinear_nearest_first() {
        let nb = knn(&line(&[0.0, 1.0, 2.0, 9.0]), 2).unwrap();
        assert_eq!(nb.row(3), &[2, 1]);
    }

    #[test]
    fn knn_matches_full_sort() {
        let c = random_cloud(30, 0, 11);
        let nb = knn(&c, 5).unwrap();
        let d = pairwise_sq_dist(&c);
        for p in 0..30 {
            let mut all: Vec<(f64, usize)> = (0..30).filter(|&i| i != p).map(|i| (d.at(&[p, i]), i)).collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = all[..5].iter().map(|x| x.1).collect();
            assert_eq!(nb.row(p), want.as_slice());
        }
    }

    #[test]
    fn knn_rejects_k_too_large() {
        assert!(knn(&triangle(), 3).is_err());
    }

    #[test]
    fn dilated_pool_sizes() {
        assert_eq!(dilated_pool(32, 1024, 2.0, 1024), 64);
        assert_eq!(dilated_pool(32, 256, 2.0, 1024), 32);
        assert_eq!(dilated_pool(32, 40, 2.0, 20), 39);
    }

    #[test]
    fn dilated_with_no_slack_is_knn() {
        let c = random_cloud(64, 1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = dilated_neighbor_sample(&c, 8, 2.0, 1024, &mut rng).unwrap();
        assert_eq!(a.pool, 8);
        assert_eq!(a, knn(&c, 8).unwrap());
    }

    #[test]
    fn dilated_rows_come_from_pool() {
        let c = random_cloud(128, 0, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let nb = dilated_neighbor_sample(&c, 4, 2.0, 64, &mut rng).unwrap();
        assert_eq!(nb.pool, 16);
        let wide = knn(&c, 16).unwrap();
        for p in 0..128 {
            assert!(nb.row(p).iter().all(|i| wide.row(p).contains(i)));
        }
        NeighborIndex::new(nb.flat().to_vec(), 128, 4, 16).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(nb, dilated_neighbor_sample(&c, 4, 2.0, 64, &mut rng2).unwrap());
    }

    #[test]
    fn position_set_entries() {
        let c = PointCloud::<f64>::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0]]).unwrap();
        let nb = knn(&c, 1).unwrap();
        let ps = position_set(&c, &nb).unwrap();
        assert_eq!(ps.shape(), &[2, 1, 6]);
        assert_eq!(&ps.data()[..6], &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn position_set_relative_half_translation_invariant() {
        let c = random_cloud(16, 1, 2);
        let t = [0.5, -2.0, 3.0, 0.0];
        let shifted = PointCloud::new(Tensor::from_fn(&[16, 4], |i| {
            c.points().data()[i] + t[i % 4]
        }))
        .unwrap();
        let nb = knn(&c, 3).unwrap();
        let (a, b) = (position_set(&c, &nb).unwrap(), position_set(&shifted, &nb).unwrap());
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let ch = i % 8;
            if ch < 4 {
                assert!((y - x - t[ch]).abs() < 1e-12);
            } else {
                assert!((y - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fps_hand_greedy() {
        let c = line(&[0.0, 1.0, 2.0, 9.0]);
        assert_eq!(fps(&c, 3, 0).unwrap(), vec![0, 3, 2]);
        assert_eq!(fps(&c, 3, 1).unwrap(), vec![1, 3, 0]);
        let mut all = fps(&c, 4, 2).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(fps(&c, 5, 0).is_err());
    }

    #[test]
    fn fps_handles_duplicates() {
        let c = line(&[1.0, 1.0, 1.0]);
        assert_eq!(fps(&c, 3, 0).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn fps_and_knn_ignore_feature_channels() {
        let c = random_cloud(24, 3, 8);
        let swapped = PointCloud::new(Tensor::from_fn(&[24, 6], |i| {
            let (r, ch) = (i / 6, i % 6);
            let src = match ch {
                3 => 5,
                5 => 3,
                x => x,
            };
            c.points().data()[r * 6 + src]
        }))
        .unwrap();
        assert_eq!(fps(&c, 10, 4).unwrap(), fps(&swapped, 10, 4).unwrap());
        assert_eq!(knn(&c, 4).unwrap(), knn(&swapped, 4).unwrap());
    }
}
