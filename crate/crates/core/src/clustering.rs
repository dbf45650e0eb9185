//! Activation-index points, k-means with elbow selection, and motion-pattern
//! labels for the clusters.

use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, Dataset, Phase};
use crate::error::{ensure_finite, Error, Result};

/// Centroids closer than this (in either labeling criterion) are ambiguous.
const LABEL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationConfig {
    /// Switch sensitivity.
    pub h: f64,
    /// Weight of the signed velocity term.
    pub w1: f64,
    /// Weight of the signed acceleration term.
    pub w2: f64,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        Self {
            h: 60.0,
            w1: 0.6,
            w2: 0.32,
        }
    }
}

impl ActivationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h > 0.0
            && self.w1 >= 0.0
            && self.w2 >= 0.0
            && self.h.is_finite()
            && self.w1.is_finite()
            && self.w2.is_finite()
        {
            Ok(())
        } else {
            Err(Error::Invalid(format!("activation parameters {self:?}")))
        }
    }
}

/// `tanh(h‖a‖₁)`, written with a decaying exponential so large arguments
/// saturate cleanly at 1.
pub fn activation_switch(a: &[f64], h: f64) -> f64 {
    let e = (-2.0 * h * l1(a)).exp();
    (1.0 - e) / (1.0 + e)
}

/// `S(a) + W‖a‖₁·sign(Σa)`.
pub fn activation_index(a: &[f64], w: f64, h: f64) -> f64 {
    let sum: f64 = a.iter().sum();
    let sign = if sum > 0.0 {
        1.0
    } else if sum < 0.0 {
        -1.0
    } else {
        0.0
    };
    activation_switch(a, h) + w * l1(a) * sign
}

fn l1(a: &[f64]) -> f64 {
    a.iter().map(|v| v.abs()).sum()
}

/// `[I(q̇), I(q̈)]` for every sample.
pub fn activation_points(dataset: &Dataset, config: &ActivationConfig) -> Result<Vec<[f64; 2]>> {
    config.validate()?;
    let points: Vec<[f64; 2]> = dataset
        .samples
        .iter()
        .map(|s| {
            [
                activation_index(&s.qd, config.w1, config.h),
                activation_index(&s.qdd, config.w2, config.h),
            ]
        })
        .collect();
    ensure_finite(points.as_flattened(), "activation points")?;
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringConfig {
    pub k_min: usize,
    pub k_max: usize,
    /// k-means++ restarts per k; the lowest WCSS wins.
    pub restarts: usize,
    /// Number of unchanged centroids that ends the Lloyd loop (all `k` when
    /// unset).
    #[serde(default)]
    pub stable_centroids: Option<usize>,
    /// Hard cap on Lloyd iterations.
    pub max_iterations: usize,
    /// A mean squared spread `WCSS(1)/N` below this means one cluster.
    pub flat_tolerance: f64,
    pub seed: u64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k_min: 1,
            k_max: 8,
            restarts: 10,
            stable_centroids: None,
            max_iterations: 300,
            flat_tolerance: 1e-6,
            seed: 42,
        }
    }
}

impl ClusteringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_min == 0 || self.k_max < self.k_min {
            return Err(Error::Invalid(format!(
                "k range {}..={}",
                self.k_min, self.k_max
            )));
        }
        if self.restarts == 0 || self.max_iterations == 0 || !(self.flat_tolerance >= 0.0) {
            return Err(Error::Invalid(
                "clustering restarts/iterations/tolerance".into(),
            ));
        }
        if self.stable_centroids == Some(0) {
            return Err(Error::Invalid("stable_centroids must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<[f64; 2]>,
    pub assignment: Vec<usize>,
    pub wcss: f64,
    pub iterations: usize,
}

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: &[f64; 2], centroids: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn distinct_count(points: &[[f64; 2]]) -> usize {
    let mut keys: Vec<(u64, u64)> = points
        .iter()
        .map(|p| ((p[0] + 0.0).to_bits(), (p[1] + 0.0).to_bits()))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn plus_plus(points: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &di) in d.iter().enumerate() {
                if r < di {
                    idx = i;
                    break;
                }
                r -= di;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick];
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations from the given centroids. The loop ends once
/// `stable` centroids are unchanged by an update, or at the iteration cap.
fn lloyd(
    points: &[[f64; 2]],
    mut centroids: Vec<[f64; 2]>,
    stable: usize,
    max_iterations: usize,
) -> KMeans {
    let k = centroids.len();
    let mut assignment = vec![0; points.len()];
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        let mut sums = vec![[0.0; 2]; k];
        let mut counts = vec![0usize; k];
        for (a, p) in assignment.iter_mut().zip(points) {
            *a = nearest(p, &centroids).0;
            sums[*a][0] += p[0];
            sums[*a][1] += p[1];
            counts[*a] += 1;
        }
        // Empty clusters restart at the worst-served point.
        for j in 0..k {
            if counts[j] == 0 {
                let far = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, nearest(p, &centroids).1))
                    .fold((0, -1.0), |m, (i, d)| if d > m.1 { (i, d) } else { m });
                let from = assignment[far.0];
                let p = points[far.0];
                sums[from][0] -= p[0];
                sums[from][1] -= p[1];
                counts[from] -= 1;
                assignment[far.0] = j;
                sums[j] = p;
                counts[j] = 1;
                centroids[j] = p;
            }
        }
        let mut unchanged = 0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let m = [sums[j][0] / counts[j] as f64, sums[j][1] / counts[j] as f64];
            if m == centroids[j] {
                unchanged += 1;
            } else {
                centroids[j] = m;
            }
        }
        if unchanged >= stable {
            break;
        }
    }
    // Final pass so the assignment is a fixed point for the returned centroids.
    let mut wcss = 0.0;
    for (a, p) in assignment.iter_mut().zip(points) {
        let (j, d) = nearest(p, &centroids);
        *a = j;
        wcss += d;
    }
    KMeans {
        centroids,
        assignment,
        wcss,
        iterations,
    }
}

fn check_points(points: &[[f64; 2]], k: usize) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Invalid("k-means on an empty point set".into()));
    }
    ensure_finite(points.as_flattened(), "k-means points")?;
    let distinct = distinct_count(points);
    if k == 0 || k > distinct {
        return Err(Error::Invalid(format!(
            "k = {k} with {distinct} distinct points"
        )));
    }
    Ok(())
}

/// Best of `config.restarts` seeded k-means++ runs for one `k`.
pub fn kmeans(points: &[[f64; 2]], k: usize, config: &ClusteringConfig) -> Result<KMeans> {
    config.validate()?;
    check_points(points, k)?;
    Ok(best_of(points, k, config, None))
}

fn best_of(
    points: &[[f64; 2]],
    k: usize,
    config: &ClusteringConfig,
    warm: Option<Vec<[f64; 2]>>,
) -> KMeans {
    let stable = config.stable_centroids.unwrap_or(k).min(k);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(k as u64);
    let mut best: Option<KMeans> = None;
    let mut consider = |run: KMeans| {
        if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
            best = Some(run);
        }
    };
    for _ in 0..config.restarts {
        consider(lloyd(
            points,
            plus_plus(points, k, &mut rng),
            stable,
            config.max_iterations,
        ));
    }
    if let Some(init) = warm {
        consider(lloyd(points, init, stable, config.max_iterations));
    }
    best.expect("at least one restart")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Elbow {
    pub k_star: usize,
    /// `(k, WCSS)` over the evaluated range.
    pub curve: Vec<(usize, f64)>,
    pub fits: Vec<KMeans>,
}

/// Run k-means over `k_range` and pick the elbow by the largest distance
/// below the chord of the normalized WCSS curve.
///
/// Every k after the first also gets a restart from the previous optimum plus
/// the point farthest from it, which keeps WCSS non-increasing in k. The range
/// is truncated at the number of distinct points.
pub fn elbow_select(
    points: &[[f64; 2]],
    k_range: RangeInclusive<usize>,
    config: &ClusteringConfig,
) -> Result<Elbow> {
    config.validate()?;
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo == 0 || hi < lo {
        return Err(Error::Invalid(format!("k range {lo}..={hi}")));
    }
    check_points(points, lo)?;
    let hi = hi.min(distinct_count(points));

    let mut fits: Vec<KMeans> = Vec::new();
    for k in lo..=hi {
        let warm = fits.last().map(|prev| {
            let far = points
                .iter()
                .map(|p| (p, nearest(p, &prev.centroids).1))
                .fold(
                    (points[0], -1.0),
                    |m, (p, d)| if d > m.1 { (*p, d) } else { m },
                );
            let mut c = prev.centroids.clone();
            c.push(far.0);
            c
        });
        fits.push(best_of(points, k, config, warm));
    }
    let curve: Vec<(usize, f64)> = (lo..=hi).zip(fits.iter().map(|f| f.wcss)).collect();

    let first = curve[0].1;
    let last = curve[curve.len() - 1].1;
    let k_star = if lo == 1 && first / points.len() as f64 <= config.flat_tolerance {
        1
    } else if curve.len() < 3 || first - last <= 0.0 {
        lo
    } else {
        let span = (hi - lo) as f64;
        let mut best = (lo, f64::NEG_INFINITY);
        for &(k, w) in &curve {
            let x = (k - lo) as f64 / span;
            let y = (w - last) / (first - last);
            let d = 1.0 - x - y;
            if d > best.1 {
                best = (k, d);
            }
        }
        best.0
    };
    Ok(Elbow {
        k_star,
        curve,
        fits,
    })
}

/// Static: centroid nearest the origin. Variable: largest |I(q̈)| among the
/// rest. Uniform: the remaining one.
pub fn label_patterns(centroids: &[[f64; 2]]) -> Result<Vec<Phase>> {
    if centroids.len() != 3 {
        return Err(Error::Invalid(format!(
            "pattern labelling needs 3 clusters, got {}",
            centroids.len()
        )));
    }
    let norm = |c: &[f64; 2]| c[0].hypot(c[1]);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| norm(&centroids[a]).total_cmp(&norm(&centroids[b])));
    if norm(&centroids[order[1]]) - norm(&centroids[order[0]]) <= LABEL_TOL {
        return Err(Error::Numerical(
            "ambiguous static cluster: two centroids tie in norm".into(),
        ));
    }
    let (a, b) = (order[1], order[2]);
    let (ya, yb) = (centroids[a][1].abs(), centroids[b][1].abs());
    if (ya - yb).abs() <= LABEL_TOL {
        return Err(Error::Numerical(
            "ambiguous variable cluster: two centroids tie in acceleration index".into(),
        ));
    }
    let (variable, uniform) = if ya > yb { (a, b) } else { (b, a) };
    let mut labels = vec![Phase::Static; 3];
    labels[variable] = Phase::Variable;
    labels[uniform] = Phase::Uniform;
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub k: usize,
    pub centroids: Vec<[f64; 2]>,
    pub assignment: Vec<usize>,
    pub elbow: Vec<(usize, f64)>,
    /// Pattern per cluster.
    pub patterns: Vec<Phase>,
}

impl ClusterResult {
    /// Fraction of samples whose cluster pattern equals their recorded phase.
    pub fn agreement(&self, dataset: &Dataset) -> f64 {
        let hits = self
            .assignment
            .iter()
            .zip(&dataset.samples)
            .filter(|(&c, s)| self.patterns[c] == s.phase)
            .count();
        hits as f64 / dataset.len().max(1) as f64
    }

    pub fn annotate(&self, dataset: &Dataset) -> Result<Dataset> {
        if self.assignment.len() != dataset.len() {
            return Err(Error::dim(
                "cluster assignment",
                dataset.len(),
                self.assignment.len(),
            ));
        }
        let mut out = dataset.clone();
        out.annotations = Some(
            self.assignment
                .iter()
                .map(|&c| Annotation {
                    cluster: c,
                    pattern: self.patterns[c],
                })
                .collect(),
        );
        Ok(out)
    }
}

/// Activation points, elbow selection over the configured k range, and
/// pattern labels for the chosen clustering.
pub fn cluster_dataset(
    dataset: &Dataset,
    activation: &ActivationConfig,
    config: &ClusteringConfig,
) -> Result<ClusterResult> {
    let points = activation_points(dataset, activation)?;
    let elbow = elbow_select(&points, config.k_min..=config.k_max, config)?;
    let fit = &elbow.fits[elbow.k_star - config.k_min];
    let patterns = label_patterns(&fit.centroids)?;
    Ok(ClusterResult {
        k: elbow.k_star,
        centroids: fit.centroids.clone(),
        assignment: fit.assignment.clone(),
        elbow: elbow.curve.clone(),
        patterns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(centres: &[[f64; 2]], per: usize, spread: f64, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        for c in centres {
            for _ in 0..per {
                pts.push([
                    c[0] + spread * (rng.random::<f64>() - 0.5),
                    c[1] + spread * (rng.random::<f64>() - 0.5),
                ]);
            }
        }
        pts
    }

    #[test]
    fn switch_and_index_values() {
        assert_eq!(activation_switch(&[0.0; 3], 60.0), 0.0);
        assert!((activation_switch(&[0.1, 0.1, 0.1], 60.0) - 18f64.tanh()).abs() < 1e-12);
        assert!(
            (activation_index(&[0.1, 0.1, 0.1], 0.6, 60.0) - (18f64.tanh() + 0.18)).abs() < 1e-12
        );
        assert!(
            (activation_index(&[-0.1, -0.1, -0.1], 0.6, 60.0) - (18f64.tanh() - 0.18)).abs()
                < 1e-12
        );
        assert!(activation_switch(&[1e3], 60.0) == 1.0);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = blobs(&[[1.0, 2.0]], 50, 0.5, 1);
        let fit = kmeans(&pts, 1, &ClusteringConfig::default()).unwrap();
        let mean = [
            pts.iter().map(|p| p[0]).sum::<f64>() / 50.0,
            pts.iter().map(|p| p[1]).sum::<f64>() / 50.0,
        ];
        assert!(dist2(&fit.centroids[0], &mean) < 1e-24);
    }

    #[test]
    fn elbow_finds_three_blobs() {
        let pts = blobs(&[[0.0, 0.0], [1.2, 0.05], [1.3, 1.4]], 100, 0.1, 3);
        let e = elbow_select(&pts, 1..=8, &ClusteringConfig::default()).unwrap();
        assert_eq!(e.k_star, 3);
        assert!(e.curve.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn tight_blob_is_one_cluster() {
        let pts = blobs(&[[0.5, 0.5]], 100, 1e-4, 4);
        let e = elbow_select(&pts, 1..=6, &ClusteringConfig::default()).unwrap();
        assert_eq!(e.k_star, 1);
    }

    #[test]
    fn too_many_clusters_rejected() {
        let pts = vec![[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]];
        assert!(kmeans(&pts, 3, &ClusteringConfig::default()).is_err());
        assert!(kmeans(&[], 1, &ClusteringConfig::default()).is_err());
    }

    #[test]
    fn labels_follow_rule_and_permutation() {
        let c = [[0.0, 0.0], [1.2, 0.05], [1.3, 1.4]];
        assert_eq!(
            label_patterns(&c).unwrap(),
            vec![Phase::Static, Phase::Uniform, Phase::Variable]
        );
        let p = [c[2], c[0], c[1]];
        assert_eq!(
            label_patterns(&p).unwrap(),
            vec![Phase::Variable, Phase::Static, Phase::Uniform]
        );
        assert!(label_patterns(&[[0.0; 2]; 3]).is_err());
    }
}
