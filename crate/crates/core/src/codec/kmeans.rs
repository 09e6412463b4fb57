//! Lloyd's k-means with k-means++ seeding, used for the semantic codebook
//! and every RVQ stage.

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major points of fixed dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Points<'a> {
    pub data: &'a [f64],
    pub dim: usize,
}

impl<'a> Points<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Shape(format!("{} values do not form {dim}-dim points", data.len())));
        }
        Ok(Self { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `centroids` (`k × dim`, row-major) and its
/// squared distance; ties go to the lowest index.
pub fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansOptions {
    pub k: usize,
    pub max_iters: usize,
    /// Keep centroid 0 fixed at the origin.
    pub pin_zero: bool,
}

/// Fits `k` centroids. Empty clusters are moved onto the point farthest
/// from its current centroid.
pub fn fit_kmeans(points: &Points<'_>, opts: &KMeansOptions, rng: &mut impl Rng) -> Result<KMeansFit> {
    let (n, dim, k) = (points.len(), points.dim, opts.k);
    if k == 0 {
        return Err(Error::Contract("k-means needs k >= 1".into()));
    }
    if n < k {
        return Err(Error::Data(format!("{n} points cannot seed {k} centroids")));
    }
    let mut centroids = seed_plus_plus(points, k, opts.pin_zero, rng)?;
    let mut assign = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut objective = Vec::new();
    for _ in 0..opts.max_iters.max(1) {
        let mut changed = false;
        for i in 0..n {
            let (c, d) = nearest(&centroids, dim, points.row(i));
            changed |= assign[i] != c;
            assign[i] = c;
            dists[i] = d;
        }
        objective.push(dists.iter().sum());
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, x) in sums[assign[i] * dim..(assign[i] + 1) * dim].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let first = usize::from(opts.pin_zero);
        for c in first..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        for c in first..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("points are non-empty");
                centroids[c * dim..(c + 1) * dim].copy_from_slice(points.row(far));
                dists[far] = 0.0;
            }
        }
    }
    Ok(KMeansFit { centroids, objective })
}

fn seed_plus_plus(points: &Points<'_>, k: usize, pin_zero: bool, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let (n, dim) = (points.len(), points.dim);
    let mut centroids = Vec::with_capacity(k * dim);
    if pin_zero {
        centroids.extend(std::iter::repeat_n(0.0, dim));
    } else {
        centroids.extend_from_slice(points.row(rng.random_range(0..n)));
    }
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Data(format!(
                "fewer than {k} distinct points; cannot seed the codebook"
            )));
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in d2.iter().enumerate() {
            if u < *d {
                pick = i;
                break;
            }
            u -= d;
        }
        if d2[pick] == 0.0 {
            // Rounding ran past the end; take the last point with mass.
            pick = d2.iter().rposition(|&d| d > 0.0).expect("total is positive");
        }
        let c = points.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    Ok(centroids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn single_centroid_is_the_mean() {
        let data = [1.0, 2.0, 3.0, 6.0, 5.0, 1.0];
        let p = Points::new(&data, 2).unwrap();
        let fit = fit_kmeans(&p, &KMeansOptions { k: 1, max_iters: 10, pin_zero: false }, &mut stream(0, "t")).unwrap();
        assert!((fit.centroids[0] - 3.0).abs() < 1e-12);
        assert!((fit.centroids[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points_is_a_data_error() {
        let data = [0.0, 1.0];
        let p = Points::new(&data, 1).unwrap();
        let r = fit_kmeans(&p, &KMeansOptions { k: 3, max_iters: 5, pin_zero: false }, &mut stream(0, "t"));
        assert!(matches!(r, Err(Error::Data(_))));
        let dup = [1.0, 1.0, 1.0];
        let p = Points::new(&dup, 1).unwrap();
        let r = fit_kmeans(&p, &KMeansOptions { k: 2, max_iters: 5, pin_zero: false }, &mut stream(0, "t"));
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn pinned_zero_stays_zero() {
        let mut rng = stream(3, "t");
        let data: Vec<f64> = (0..200).map(|_| rng.random::<f64>() + 1.0).collect();
        let p = Points::new(&data, 2).unwrap();
        let fit = fit_kmeans(&p, &KMeansOptions { k: 5, max_iters: 20, pin_zero: true }, &mut rng).unwrap();
        assert_eq!(&fit.centroids[..2], &[0.0, 0.0]);
    }
}
