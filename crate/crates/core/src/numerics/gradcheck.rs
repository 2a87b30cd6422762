//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Grid, Tape, Var};

/// Relative error used by the checker:
/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Entries probed per parameter tensor; smaller tensors are checked in full.
    pub samples_per_group: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            samples_per_group: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    /// Probes discarded because the ±step evaluations fell on different
    /// branches of a relu, clamp or maxpool.
    pub skipped_at_kinks: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error <= self.tolerance)
    }
}

/// Compares reverse-mode gradients of the scalar built by `builder` against
/// central differences, one report row per named parameter tensor.
///
/// `builder` receives the parameter handles in the order of `params` and must
/// be deterministic.
pub fn grad_check<E>(
    params: &[(String, Grid)],
    builder: impl Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    tolerance: f64,
    options: &GradCheckOptions,
) -> Result<GradCheckReport, E> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, g)| tape.parameter(g.clone())).collect();
    let loss = builder(&mut tape, &vars)?;
    let base_signature = tape.branch_signature();
    let analytic = tape.backward(loss).expect("builder must return a scalar");

    // The loss usually ends in a chain of sums and means over large grids.
    // Differencing the scalar loss would lose everything below one ulp of
    // it, so the ±step evaluations are differenced elementwise at the last
    // nonlinear nodes and then combined with the tail's constant factors.
    let tail = tape.linear_tail(loss);
    let evaluate = |values: &[Grid]| -> Result<Tape, E> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|g| t.constant(g.clone())).collect();
        builder(&mut t, &vs)?;
        Ok(t)
    };
    let difference = |plus: &Tape, minus: &Tape| -> f64 {
        tail.iter()
            .map(|(&v, &c)| {
                let d: f64 = plus
                    .value(v)
                    .data()
                    .iter()
                    .zip(minus.value(v).data())
                    .map(|(a, b)| a - b)
                    .sum();
                c * d
            })
            .sum()
    };

    let mut values: Vec<Grid> = params.iter().map(|(_, g)| g.clone()).collect();
    let mut groups = Vec::with_capacity(params.len());
    for (gi, (name, grid)) in params.iter().enumerate() {
        let n = grid.len();
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ (gi as u64).wrapping_mul(0x9E37_79B9));
        // Probe order: a random permutation so that kink skips fall through
        // to fresh entries.
        let order = sample(&mut rng, n, n).into_vec();
        let want = options.samples_per_group.min(n);
        let mut report = GroupReport {
            name: name.clone(),
            checked: 0,
            skipped_at_kinks: 0,
            max_rel_error: 0.0,
        };
        for idx in order {
            if report.checked == want {
                break;
            }
            let original = values[gi].data()[idx];
            values[gi].data_mut()[idx] = original + options.step;
            let plus = evaluate(&values)?;
            values[gi].data_mut()[idx] = original - options.step;
            let minus = evaluate(&values)?;
            values[gi].data_mut()[idx] = original;
            if plus.branch_signature() != base_signature || minus.branch_signature() != base_signature {
                report.skipped_at_kinks += 1;
                continue;
            }
            let numeric = difference(&plus, &minus) / (2.0 * options.step);
            let a = analytic[&vars[gi]].data()[idx];
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.checked += 1;
        }
        groups.push(report);
    }
    Ok(GradCheckReport { tolerance, groups })
}
