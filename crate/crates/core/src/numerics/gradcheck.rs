use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Number of sampled coordinates, spread round-robin over parameter groups.
    pub samples: usize,
    pub seed: u64,
    /// Lower bound of the relative-error denominator.
    pub abs_floor: f64,
}

impl GradCheckOptions {
    /// `h = 1e-3` for 32-bit parameters, `h = 1e-5` for 64-bit ones.
    pub fn for_dtype<T: Real>() -> Self {
        let wide = T::BYTES == 8;
        GradCheckOptions {
            h: if wide { 1e-5 } else { 1e-3 },
            samples: 200,
            seed: 0,
            abs_floor: if wide { 1e-6 } else { 1e-2 },
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// `(group, index, analytic, numeric)` of the worst coordinate.
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

/// Compares analytic gradients against central differences of `loss`.
///
/// Relative error is `|a - n| / max(|a|, |n|, abs_floor)`.
pub fn finite_difference_check<T, F>(
    params: &[Tensor<T>],
    analytic: &[Tensor<T>],
    mut loss: F,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    T: Real,
    F: FnMut(&[Tensor<T>]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let groups: Vec<usize> = (0..params.len()).filter(|&i| params[i].numel() > 0).collect();
    let mut work = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, mean_rel_error: 0.0, worst: (0, 0, 0.0, 0.0), checked: 0 };
    if groups.is_empty() {
        return report;
    }
    let mut total = 0.0;
    for s in 0..opts.samples {
        let group = groups[s % groups.len()];
        let idx = rng.gen_range(0..params[group].numel());
        let orig = work[group].data()[idx];
        work[group].data_mut()[idx] = T::from_f64(orig.as_f64() + opts.h);
        let up = loss(&work);
        work[group].data_mut()[idx] = T::from_f64(orig.as_f64() - opts.h);
        let down = loss(&work);
        work[group].data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * opts.h);
        let a = analytic[group].data()[idx].as_f64();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
        total += rel;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (group, idx, a, numeric);
        }
        report.checked += 1;
    }
    report.mean_rel_error = total / report.checked as f64;
    report
}
