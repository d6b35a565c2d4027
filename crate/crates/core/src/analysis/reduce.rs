//! Two-dimensional projections: exact PCA and exact-gradient t-SNE.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::AnalysisError;

/// Principal axes of a point cloud.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Two unit-norm axes, largest variance first.
    pub components: [Vec<f64>; 2],
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn project(&self, x: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (k, c) in self.components.iter().enumerate() {
            out[k] = x.iter().zip(&self.mean).zip(c).map(|((a, m), w)| (a - m) * w).sum();
        }
        out
    }
}

/// Eigen-decomposition of the (biased, 1/n) covariance.
///
/// Each axis is signed so that its largest-magnitude loading is positive.
pub fn pca(points: &[Vec<f64>]) -> Result<Pca, AnalysisError> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if n < 3 || d < 2 || points.iter().any(|p| p.len() != d) {
        return Err(AnalysisError::Degenerate(format!("pca needs >= 3 points of equal dimension >= 2, got {n}")));
    }
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let scale = eigenvalues[0].max(f64::MIN_POSITIVE);
    if eigenvalues[1] <= 1e-12 * scale {
        return Err(AnalysisError::Degenerate("point cloud has rank below 2".into()));
    }
    let axis = |k: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    Ok(Pca { mean, components: [axis(0), axis(1)], eigenvalues })
}

#[derive(Clone, Debug)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    /// `None` picks `max(n / exaggeration / 4, 50)`; a flat 200 is unstable
    /// for small point sets.
    pub learning_rate: Option<f64>,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneOptions {
    fn default() -> Self {
        TsneOptions {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: None,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

/// Conditional affinities for one row, bisecting the Gaussian precision
/// until the row entropy matches `ln(perplexity)`.
fn row_affinities(d2: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
    let mut p = vec![0.0; d2.len()];
    for _ in 0..100 {
        let min = d2.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for (j, &v) in d2.iter().enumerate() {
            p[j] = if j == i { 0.0 } else { (-(v - min) * beta).exp() };
            sum += p[j];
        }
        let mut h = 0.0;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj /= sum;
            if j != i && *pj > 0.0 {
                h += beta * (d2[j] - min) * *pj;
            }
        }
        let entropy = h + sum.ln();
        if (entropy - target).abs() < 1e-5 {
            break;
        }
        if entropy > target {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

/// Exact t-SNE embedding into two dimensions. Perplexity is clamped to
/// `(n - 1) / 3`.
pub fn tsne(points: &[Vec<f64>], opts: &TsneOptions) -> Result<Vec<[f64; 2]>, AnalysisError> {
    let n = points.len();
    if n < 4 {
        return Err(AnalysisError::Degenerate(format!("t-SNE needs at least 4 points, got {n}")));
    }
    let perplexity = opts.perplexity.min((n - 1) as f64 / 3.0);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let d2: Vec<f64> =
            points.iter().map(|q| q.iter().zip(&points[i]).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
        let row = row_affinities(&d2, i, perplexity);
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    for i in 0..n {
        for j in i + 1..n {
            let s = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            p[i * n + j] = s;
            p[j * n + i] = s;
        }
        p[i * n + i] = 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut vel = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let lr = opts.learning_rate.unwrap_or((n as f64 / opts.early_exaggeration / 4.0).max(50.0));
    for it in 0..opts.iterations {
        let exag = if it < opts.exaggeration_iters { opts.early_exaggeration } else { 1.0 };
        let momentum = if it < opts.exaggeration_iters { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let m = (exag * p[i * n + j] - q / z) * q;
                g[0] += 4.0 * m * (y[i][0] - y[j][0]);
                g[1] += 4.0 * m * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                gains[i][k] =
                    if (g[k] > 0.0) != (vel[i][k] > 0.0) { gains[i][k] + 0.2 } else { (gains[i][k] * 0.8).max(0.01) };
                vel[i][k] = momentum * vel[i][k] - lr * gains[i][k] * g[k];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
        let c = [y.iter().map(|v| v[0]).sum::<f64>() / n as f64, y.iter().map(|v| v[1]).sum::<f64>() / n as f64];
        for v in &mut y {
            v[0] -= c[0];
            v[1] -= c[1];
        }
    }
    if y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(AnalysisError::Degenerate("t-SNE diverged".into()));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    #[test]
    fn planar_points_keep_pairwise_distances() {
        // Points on the plane spanned by (1,1,0)/sqrt2 and (0,0,1) in 3-D.
        let planar = [(0.0, 0.0), (1.0, 2.0), (-3.0, 0.5), (2.0, -1.0), (0.3, 0.7)];
        let pts: Vec<Vec<f64>> =
            planar.iter().map(|&(u, v)| vec![u / 2f64.sqrt() + 5.0, u / 2f64.sqrt() - 1.0, v + 2.0]).collect();
        let p = pca(&pts).unwrap();
        let proj: Vec<[f64; 2]> = pts.iter().map(|x| p.project(x)).collect();
        for i in 0..planar.len() {
            for j in 0..planar.len() {
                let orig = ((planar[i].0 - planar[j].0).powi(2) + (planar[i].1 - planar[j].1).powi(2)).sqrt();
                assert!((dist(proj[i], proj[j]) - orig).abs() < 1e-4);
            }
        }
        assert!(p.eigenvalues[2].abs() < 1e-10);
    }

    #[test]
    fn three_point_hand_case() {
        // Mean (1, 1/3); centered (-1, -1/3), (1, -1/3), (0, 2/3).
        // Covariance diag(2/3, 2/9) with zero off-diagonal.
        let pts = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 1.0]];
        let p = pca(&pts).unwrap();
        assert!((p.eigenvalues[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.eigenvalues[1] - 2.0 / 9.0).abs() < 1e-12);
        assert!((p.components[0][0] - 1.0).abs() < 1e-12 && p.components[0][1].abs() < 1e-12);
        assert!((p.components[1][1] - 1.0).abs() < 1e-12);
        let [a, b] = p.project(&[1.0, 1.0]);
        assert!(a.abs() < 1e-12 && (b - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_error_equals_tail_eigenvalues() {
        let pts: Vec<Vec<f64>> = (0..30)
            .map(|i| {
                let t = i as f64;
                vec![t.sin() * 3.0, t.cos() * 2.0, (t * 0.7).sin(), (t * 1.3).cos() * 0.5]
            })
            .collect();
        let p = pca(&pts).unwrap();
        let mut err = 0.0;
        for x in &pts {
            let [a, b] = p.project(x);
            for (j, xj) in x.iter().enumerate() {
                let rec = p.mean[j] + a * p.components[0][j] + b * p.components[1][j];
                err += (xj - rec).powi(2);
            }
        }
        err /= pts.len() as f64;
        let tail: f64 = p.eigenvalues[2..].iter().sum();
        assert!((err - tail).abs() < 1e-5, "{err} vs {tail}");
    }

    #[test]
    fn rank_one_data_is_rejected() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        assert!(matches!(pca(&pts), Err(AnalysisError::Degenerate(_))));
    }

    #[test]
    fn pca_signs_are_fixed() {
        let pts: Vec<Vec<f64>> =
            (0..10).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos() * 4.0, 0.1 * i as f64]).collect();
        let p = pca(&pts).unwrap();
        for c in &p.components {
            let lead = c.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn tsne_separates_clusters_and_is_seeded() {
        let mut pts = Vec::new();
        for c in 0..2 {
            for i in 0..12 {
                let off = c as f64 * 50.0;
                pts.push(vec![off + (i as f64 * 0.37).sin(), off + (i as f64 * 0.91).cos(), (i % 3) as f64 * 0.2]);
            }
        }
        let opts = TsneOptions { iterations: 300, exaggeration_iters: 100, ..Default::default() };
        let a = tsne(&pts, &opts).unwrap();
        assert_eq!(a, tsne(&pts, &opts).unwrap());
        let within = dist(a[0], a[1]).max(dist(a[12], a[13]));
        let between = dist(a[0], a[12]);
        assert!(between > 2.0 * within, "{between} vs {within}");
    }
}
