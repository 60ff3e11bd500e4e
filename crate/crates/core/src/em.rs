//! Two-component 1-D Gaussian mixture EM.
//!
//! Every quantity of the latent-variable view is exactly computable here:
//! the posterior over labels, the free energy of any label distribution and
//! the marginal log-likelihood. Soft EM uses the exact posterior in the
//! E-step; hard EM thresholds the component-1 responsibility the way
//! pseudo-labels threshold network probabilities.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub stds: [f64; 2],
}

impl MixtureParams {
    pub fn new(weights: [f64; 2], means: [f64; 2], stds: [f64; 2]) -> Result<Self> {
        let p = MixtureParams {
            weights,
            means,
            stds: [stds[0].max(STD_FLOOR), stds[1].max(STD_FLOOR)],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights[0] + self.weights[1] - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("mixture weights", format!("{:?}", self.weights)));
        }
        if self.stds.iter().any(|s| !(*s >= STD_FLOOR) || !s.is_finite()) {
            return Err(Error::invalid("mixture stds", format!("{:?}", self.stds)));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("mixture means", format!("{:?}", self.means)));
        }
        Ok(())
    }

    fn log_joint(&self, x: f64, k: usize) -> f64 {
        let s = self.stds[k];
        self.weights[k].ln() - 0.5 * (2.0 * PI).ln() - s.ln() - 0.5 * ((x - self.means[k]) / s).powi(2)
    }

    /// Largest absolute difference between corresponding entries.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let a = [self.weights, self.means, self.stds].concat();
        let b = [other.weights, other.means, other.stds].concat();
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let k = usize::from(rng.gen::<f64>() >= self.weights[0]);
                Normal::new(self.means[k], self.stds[k]).expect("valid std").sample(rng)
            })
            .collect()
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Label distribution per data point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Assignments {
    /// `q[i][k]`, rows summing to one.
    Soft(Vec<[f64; 2]>),
    /// Component index per point.
    Hard(Vec<u8>),
}

impl Assignments {
    pub fn len(&self) -> usize {
        match self {
            Assignments::Soft(q) => q.len(),
            Assignments::Hard(z) => z.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn row(&self, i: usize) -> [f64; 2] {
        match self {
            Assignments::Soft(q) => q[i],
            Assignments::Hard(z) => {
                if z[i] == 1 {
                    [0.0, 1.0]
                } else {
                    [1.0, 0.0]
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    pub rows: Vec<[f64; 2]>,
    /// Set when a component sits at the std floor.
    pub degenerate: bool,
}

fn check_data(data: &[f64]) -> Result<()> {
    if data.len() < 2 {
        return Err(Error::InsufficientData(format!("EM needs at least 2 points, got {}", data.len())));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("EM data", "non-finite value"));
    }
    Ok(())
}

/// Exact posterior over the component of each point.
pub fn e_step_soft(data: &[f64], params: &MixtureParams) -> Result<Responsibilities> {
    check_data(data)?;
    params.validate()?;
    let rows = data
        .iter()
        .map(|&x| {
            let (a, b) = (params.log_joint(x, 0), params.log_joint(x, 1));
            let z = log_sum_exp(a, b);
            if z == f64::NEG_INFINITY {
                return [0.5, 0.5];
            }
            let r1 = (b - z).exp();
            [1.0 - r1, r1]
        })
        .collect();
    Ok(Responsibilities {
        rows,
        degenerate: params.stds.iter().any(|&s| s <= STD_FLOOR),
    })
}

/// Label 1 where the component-1 responsibility strictly exceeds `threshold`.
pub fn e_step_hard(data: &[f64], params: &MixtureParams, threshold: f64) -> Result<Vec<u8>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("threshold", format!("{threshold} not in (0, 1)")));
    }
    Ok(e_step_soft(data, params)?
        .rows
        .iter()
        .map(|r| u8::from(r[1] > threshold))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MStep {
    pub params: MixtureParams,
    /// Components that received no assignment mass and kept `previous`.
    pub empty_components: Vec<usize>,
}

/// Weighted maximum-likelihood update. A component with zero assignment
/// mass keeps its previous weight, mean and std.
pub fn m_step(data: &[f64], assignments: &Assignments, previous: &MixtureParams) -> Result<MStep> {
    check_data(data)?;
    if assignments.len() != data.len() {
        return Err(Error::shape(
            "m_step",
            format!("{} assignments for {} points", assignments.len(), data.len()),
        ));
    }
    let n = data.len() as f64;
    let mut mass = [0.0; 2];
    let mut first = [0.0; 2];
    for (i, &x) in data.iter().enumerate() {
        let r = assignments.row(i);
        for k in 0..2 {
            mass[k] += r[k];
            first[k] += r[k] * x;
        }
    }
    let mut params = *previous;
    let mut empty = Vec::new();
    for k in 0..2 {
        if mass[k] <= 0.0 {
            empty.push(k);
            continue;
        }
        let mean = first[k] / mass[k];
        let var = data
            .iter()
            .enumerate()
            .map(|(i, &x)| assignments.row(i)[k] * (x - mean).powi(2))
            .sum::<f64>()
            / mass[k];
        params.means[k] = mean;
        params.stds[k] = var.sqrt().max(STD_FLOOR);
        params.weights[k] = mass[k] / n;
    }
    match empty.as_slice() {
        [] => {}
        [k] => params.weights[1 - k] = 1.0 - previous.weights[*k],
        _ => unreachable!("assignment rows sum to one"),
    }
    Ok(MStep {
        params,
        empty_components: empty,
    })
}

/// `sum_i log sum_k w_k N(x_i; mu_k, sigma_k)`.
pub fn log_likelihood(data: &[f64], params: &MixtureParams) -> f64 {
    data.iter()
        .map(|&x| log_sum_exp(params.log_joint(x, 0), params.log_joint(x, 1)))
        .sum()
}

/// `sum_i sum_k q_ik (log w_k N(x_i) - log q_ik)` with `0 log 0 = 0`.
///
/// For hard labels this is the classification log-likelihood.
pub fn free_energy(data: &[f64], params: &MixtureParams, assignments: &Assignments) -> f64 {
    let mut f = 0.0;
    for (i, &x) in data.iter().enumerate() {
        let q = assignments.row(i);
        for (k, &qk) in q.iter().enumerate() {
            if qk > 0.0 {
                f += qk * (params.log_joint(x, k) - qk.ln());
            }
        }
    }
    f
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EmMode {
    Soft,
    Hard { threshold: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmIteration {
    pub iteration: usize,
    /// Marginal log-likelihood of the parameters entering this iteration.
    pub log_likelihood: f64,
    /// Free energy of the E-step assignments under those parameters.
    pub free_energy: f64,
    /// Free energy of the same assignments under the M-step output.
    pub free_energy_after_m: f64,
    pub params: MixtureParams,
    pub assignments: Assignments,
    pub degenerate: bool,
    pub empty_components: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmTrace {
    pub mode: EmMode,
    pub iterations: Vec<EmIteration>,
    pub final_params: MixtureParams,
}

impl EmTrace {
    /// Count of steps where the log-likelihood dropped by more than `tol`.
    pub fn log_likelihood_decreases(&self, tol: f64) -> usize {
        self.iterations
            .windows(2)
            .filter(|w| w[1].log_likelihood < w[0].log_likelihood - tol)
            .count()
    }

    /// Largest `|free_energy - log_likelihood|` over all iterations.
    pub fn max_bound_gap(&self) -> f64 {
        self.iterations
            .iter()
            .map(|it| (it.log_likelihood - it.free_energy).abs())
            .fold(0.0, f64::max)
    }

    /// First iteration index after which parameters moved less than `tol`.
    pub fn converged_at(&self, tol: f64) -> Option<usize> {
        self.iterations
            .iter()
            .position(|it| it.params.max_abs_diff(&self.next_params(it.iteration)) < tol)
    }

    fn next_params(&self, iteration: usize) -> MixtureParams {
        self.iterations
            .get(iteration + 1)
            .map(|it| it.params)
            .unwrap_or(self.final_params)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "iter", "loglik", "free_energy", "free_energy_after_m", "weight0", "weight1", "mean0", "mean1", "std0", "std1",
        ])?;
        for it in &self.iterations {
            let p = &it.params;
            w.write_record(
                [
                    it.iteration.to_string(),
                    format!("{:.12}", it.log_likelihood),
                    format!("{:.12}", it.free_energy),
                    format!("{:.12}", it.free_energy_after_m),
                ]
                .into_iter()
                .chain(
                    [p.weights[0], p.weights[1], p.means[0], p.means[1], p.stds[0], p.stds[1]]
                        .iter()
                        .map(|v| format!("{v:.12}")),
                ),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn run_em(data: &[f64], init: &MixtureParams, mode: EmMode, iters: usize) -> Result<EmTrace> {
    if iters == 0 {
        return Err(Error::invalid("iters", "must be at least 1"));
    }
    check_data(data)?;
    init.validate()?;
    let mut params = *init;
    let mut iterations = Vec::with_capacity(iters);
    for iteration in 0..iters {
        let resp = e_step_soft(data, &params)?;
        let assignments = match mode {
            EmMode::Soft => Assignments::Soft(resp.rows),
            EmMode::Hard { threshold } => Assignments::Hard(e_step_hard(data, &params, threshold)?),
        };
        let step = m_step(data, &assignments, &params)?;
        iterations.push(EmIteration {
            iteration,
            log_likelihood: log_likelihood(data, &params),
            free_energy: free_energy(data, &params, &assignments),
            free_energy_after_m: free_energy(data, &step.params, &assignments),
            params,
            assignments,
            degenerate: resp.degenerate,
            empty_components: step.empty_components,
        });
        params = step.params;
    }
    Ok(EmTrace {
        mode,
        iterations,
        final_params: params,
    })
}

/// Random initialisation spread over the data range.
pub fn random_init(data: &[f64], rng: &mut impl Rng) -> MixtureParams {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-3);
    let w0 = rng.gen_range(0.1..0.9);
    MixtureParams {
        weights: [w0, 1.0 - w0],
        means: [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)],
        stds: [rng.gen_range(0.05..1.0) * span, rng.gen_range(0.05..1.0) * span],
    }
}
