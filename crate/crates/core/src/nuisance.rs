//! Nuisance-function estimators: frequency tables and L2-penalized
//! logistic regression fitted under the conditioning each target demands,
//! plus the bias estimate b̂₁ = ĝ₁ − f̂₁ built from an RCT fit and an
//! observational fit of the treated-outcome model.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::synthgen::{Cohort, Population, MAX_D};

/// Which conditional probability is being estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TargetVar {
    S,
    A,
    Y,
}

/// Target plus population; the row filters are a function of the target
/// (S: none; A: S=1; Y: S=1 and A=1), so they cannot drift out of sync
/// with it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ConditioningSpec {
    pub target: TargetVar,
    pub population: Population,
}

impl ConditioningSpec {
    /// η̂_S: P(S=1 | X) on all observational rows.
    pub fn eta_s() -> Self {
        ConditioningSpec { target: TargetVar::S, population: Population::Os }
    }

    /// η̂_A: P(A=1 | X, S=1) on observational rows.
    pub fn eta_a() -> Self {
        ConditioningSpec { target: TargetVar::A, population: Population::Os }
    }

    /// η̂_Y = f̂₁: P(Y=1 | X, S=1, A=1) on observational rows.
    pub fn eta_y() -> Self {
        ConditioningSpec { target: TargetVar::Y, population: Population::Os }
    }

    /// ĝ₁: P(Y=1 | X, S=1, A=1) on RCT rows.
    pub fn g1() -> Self {
        ConditioningSpec { target: TargetVar::Y, population: Population::Rct }
    }

    /// Row filters implied by the target: (require S=1, require A=1).
    pub fn filters(&self) -> (bool, bool) {
        match self.target {
            TargetVar::S => (false, false),
            TargetVar::A => (true, false),
            TargetVar::Y => (true, true),
        }
    }

    /// The training rows this conditioning admits, as (row index, target
    /// value). Only the masked accessors are consulted, so unselected rows
    /// can never leak their latent a/y into a fit.
    pub fn filtered_rows(&self, cohort: &Cohort) -> Result<Vec<(usize, u8)>> {
        if cohort.population() != self.population {
            return Err(Error::Estimation(format!(
                "conditioning expects the {:?} population, cohort is {:?}",
                self.population,
                cohort.population()
            )));
        }
        let (need_s, need_a) = self.filters();
        let mut rows = Vec::new();
        for i in 0..cohort.len() {
            if need_s && cohort.s(i) != 1 {
                continue;
            }
            if need_a && cohort.a(i) != Some(1) {
                continue;
            }
            let value = match self.target {
                TargetVar::S => cohort.s(i),
                TargetVar::A => match cohort.a(i) {
                    Some(a) => a,
                    None => continue,
                },
                TargetVar::Y => match cohort.y(i) {
                    Some(y) => y,
                    None => continue,
                },
            };
            rows.push((i, value));
        }
        Ok(rows)
    }
}

/// Fitting knobs shared by both model kinds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FitOptions {
    /// Additive smoothing for frequency tables: (k + s) / (m + 2s).
    pub smoothing: f64,
    /// L2 penalty on logistic weights (the intercept is unpenalized).
    pub l2: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { smoothing: 0.5, l2: 1e-4, max_iters: 100, tol: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ModelKind {
    FrequencyTable,
    Logistic,
}

#[derive(Clone, Debug, Serialize)]
pub enum FittedModel {
    Frequency {
        d: usize,
        /// Prediction per cell (empty cells already hold the global mean).
        preds: Vec<f64>,
        /// Cells with zero training support, flagged for positivity audits.
        empty_cells: Vec<u32>,
        global: f64,
    },
    Logistic {
        intercept: f64,
        weights: Vec<f64>,
        converged: bool,
        iters: usize,
    },
}

/// An immutable fitted nuisance estimator.
#[derive(Clone, Debug, Serialize)]
pub struct FittedEstimator {
    pub cond: ConditioningSpec,
    pub n_train: usize,
    pub model: FittedModel,
}

impl FittedEstimator {
    pub fn model_kind(&self) -> ModelKind {
        match self.model {
            FittedModel::Frequency { .. } => ModelKind::FrequencyTable,
            FittedModel::Logistic { .. } => ModelKind::Logistic,
        }
    }

    pub fn empty_cells(&self) -> &[u32] {
        match &self.model {
            FittedModel::Frequency { empty_cells, .. } => empty_cells,
            FittedModel::Logistic { .. } => &[],
        }
    }

    pub fn converged(&self) -> bool {
        match &self.model {
            FittedModel::Frequency { .. } => true,
            FittedModel::Logistic { converged, .. } => *converged,
        }
    }

    /// Prediction for one binary covariate cell.
    pub fn predict_cell(&self, cell: u32) -> f64 {
        match &self.model {
            FittedModel::Frequency { preds, .. } => preds[cell as usize],
            FittedModel::Logistic { intercept, weights, .. } => {
                let mut z = *intercept;
                for (j, w) in weights.iter().enumerate() {
                    z += w * ((cell >> j) & 1) as f64;
                }
                sigmoid(z)
            }
        }
    }

    /// Prediction from an explicit feature vector (logistic only route for
    /// real-valued covariates).
    pub fn predict(&self, features: &[f64]) -> f64 {
        match &self.model {
            FittedModel::Frequency { d, preds, .. } => {
                debug_assert_eq!(features.len(), *d);
                let mut cell = 0u32;
                for (j, &v) in features.iter().enumerate() {
                    debug_assert!(v == 0.0 || v == 1.0, "frequency table needs binary features");
                    if v == 1.0 {
                        cell |= 1 << j;
                    }
                }
                preds[cell as usize]
            }
            FittedModel::Logistic { intercept, weights, .. } => {
                let z = intercept
                    + weights.iter().zip(features.iter()).map(|(w, x)| w * x).sum::<f64>();
                sigmoid(z)
            }
        }
    }

    /// Prediction for row i of a cohort, dispatching on its covariate
    /// storage.
    pub fn predict_row(&self, cohort: &Cohort, i: usize) -> f64 {
        match (cohort.cells(), &self.model) {
            (Some(cells), FittedModel::Frequency { preds, .. }) => preds[cells[i] as usize],
            (Some(cells), FittedModel::Logistic { .. }) => self.predict_cell(cells[i]),
            (None, _) => {
                let mut buf = [0.0; MAX_D];
                let d = cohort.d();
                cohort.feature_row(i, &mut buf[..d]);
                self.predict(&buf[..d])
            }
        }
    }

    /// Structured text form (model kind, parameters, metadata) for audit.
    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimator serialization cannot fail")
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Fit a per-cell frequency table: prediction (k + s)/(m + 2s) for cells
/// with support, the smoothed global mean for empty cells (flagged).
pub fn fit_frequency(cohort: &Cohort, cond: ConditioningSpec, smoothing: f64) -> Result<FittedEstimator> {
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(Error::Config(format!("smoothing must be a nonnegative real, got {smoothing}")));
    }
    let cells = cohort.cells().ok_or_else(|| {
        Error::Estimation("frequency estimator requires binary covariates".into())
    })?;
    let rows = cond.filtered_rows(cohort)?;
    if rows.is_empty() {
        return Err(Error::Estimation(format!(
            "no rows left for {:?} after filtering; cannot fit",
            cond.target
        )));
    }
    let n_cells = 1usize << cohort.d();
    let mut hits = vec![0u64; n_cells];
    let mut successes = vec![0u64; n_cells];
    for &(i, value) in &rows {
        let cell = cells[i] as usize;
        hits[cell] += 1;
        successes[cell] += value as u64;
    }
    let m_total: u64 = hits.iter().sum();
    let k_total: u64 = successes.iter().sum();
    let global = (k_total as f64 + smoothing) / (m_total as f64 + 2.0 * smoothing);
    let mut preds = vec![0.0; n_cells];
    let mut empty_cells = Vec::new();
    for cell in 0..n_cells {
        if hits[cell] == 0 {
            preds[cell] = global;
            empty_cells.push(cell as u32);
        } else {
            preds[cell] =
                (successes[cell] as f64 + smoothing) / (hits[cell] as f64 + 2.0 * smoothing);
        }
    }
    Ok(FittedEstimator {
        cond,
        n_train: rows.len(),
        model: FittedModel::Frequency { d: cohort.d(), preds, empty_cells, global },
    })
}

/// Solve the symmetric linear system H·x = b by Gaussian elimination with
/// partial pivoting. Degenerate pivot columns (collinear or absent
/// directions, possible at l2 = 0) get x = 0 rather than failing, which
/// keeps the Newton step deterministic.
fn solve_symmetric(mut h: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    let mut skip = vec![false; n];
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| h[i][col].abs().total_cmp(&h[j][col].abs()))
            .expect("nonempty range");
        if h[pivot_row][col].abs() < 1e-12 {
            skip[col] = true;
            continue;
        }
        h.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in (col + 1)..n {
            let factor = h[row][col] / h[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                h[row][k] -= factor * h[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        if skip[col] {
            continue;
        }
        let mut v = b[col];
        for k in (col + 1)..n {
            v -= h[col][k] * x[k];
        }
        x[col] = v / h[col][col];
    }
    x
}

/// Fit L2-penalized logistic regression by damped full-batch Newton
/// iterations (intercept unpenalized). Deterministic: no randomness, fixed
/// iteration order.
pub fn fit_logistic(
    cohort: &Cohort,
    cond: ConditioningSpec,
    l2: f64,
    max_iters: usize,
    tol: f64,
) -> Result<FittedEstimator> {
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(Error::Config(format!("l2 penalty must be a nonnegative real, got {l2}")));
    }
    let rows = cond.filtered_rows(cohort)?;
    let n = rows.len();
    let positives = rows.iter().filter(|&&(_, v)| v == 1).count();
    if positives == 0 || positives == n {
        return Err(Error::Estimation(format!(
            "logistic fit for {:?} needs both classes after filtering (got {positives} of {n} positive)",
            cond.target
        )));
    }
    let d = cohort.d();
    let p_dim = d + 1; // intercept first
    let mut xs = vec![0.0; n * p_dim];
    let mut ys = vec![0.0; n];
    for (r, &(i, value)) in rows.iter().enumerate() {
        xs[r * p_dim] = 1.0;
        cohort.feature_row(i, &mut xs[r * p_dim + 1..(r + 1) * p_dim]);
        ys[r] = value as f64;
    }

    let penalized_ll = |beta: &[f64]| -> f64 {
        let mut ll = 0.0;
        for r in 0..n {
            let x = &xs[r * p_dim..(r + 1) * p_dim];
            let z: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
            ll += ys[r] * z - softplus(z);
        }
        ll - 0.5 * l2 * beta[1..].iter().map(|w| w * w).sum::<f64>()
    };

    let mut beta = vec![0.0; p_dim];
    let mut converged = false;
    let mut iters = 0;
    for iter in 0..max_iters {
        iters = iter + 1;
        // Gradient and Hessian of the penalized log-likelihood.
        let mut grad = vec![0.0; p_dim];
        let mut hess = vec![vec![0.0; p_dim]; p_dim];
        for r in 0..n {
            let x = &xs[r * p_dim..(r + 1) * p_dim];
            let z: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
            let p = sigmoid(z);
            let resid = ys[r] - p;
            let w = (p * (1.0 - p)).max(1e-10);
            for j in 0..p_dim {
                grad[j] += resid * x[j];
                for k in j..p_dim {
                    hess[j][k] += w * x[j] * x[k];
                }
            }
        }
        for j in 1..p_dim {
            grad[j] -= l2 * beta[j];
            hess[j][j] += l2;
        }
        for j in 0..p_dim {
            for k in 0..j {
                hess[j][k] = hess[k][j];
            }
        }
        if grad.iter().map(|g| g.abs()).fold(0.0, f64::max) < tol {
            converged = true;
            iters = iter;
            break;
        }
        let delta = solve_symmetric(hess, grad);
        // Halve the step until the penalized log-likelihood stops
        // decreasing; full Newton can overshoot on near-separable data.
        let base_ll = penalized_ll(&beta);
        let mut t = 1.0;
        loop {
            let candidate: Vec<f64> =
                beta.iter().zip(&delta).map(|(b, d)| b + t * d).collect();
            if penalized_ll(&candidate) >= base_ll - 1e-12 || t < 1e-4 {
                beta = candidate;
                break;
            }
            t *= 0.5;
        }
        // On large cohorts the summed gradient bottoms out above `tol` in
        // f64; once the accepted step stops moving the parameters there is
        // nothing left to gain, so that counts as stationary too.
        if delta.iter().map(|d| (t * d).abs()).fold(0.0, f64::max) < tol {
            converged = true;
            break;
        }
    }
    Ok(FittedEstimator {
        cond,
        n_train: n,
        model: FittedModel::Logistic {
            intercept: beta[0],
            weights: beta[1..].to_vec(),
            converged,
            iters,
        },
    })
}

/// Fit with the requested model kind.
pub fn fit(
    cohort: &Cohort,
    cond: ConditioningSpec,
    model_kind: ModelKind,
    options: &FitOptions,
) -> Result<FittedEstimator> {
    match model_kind {
        ModelKind::FrequencyTable => fit_frequency(cohort, cond, options.smoothing),
        ModelKind::Logistic => fit_logistic(cohort, cond, options.l2, options.max_iters, options.tol),
    }
}

/// The bias estimate b̂₁ = ĝ₁ − f̂₁: a treated-outcome model fitted on each
/// cohort under the same conditioning.
#[derive(Clone, Debug, Serialize)]
pub struct BiasEstimate {
    pub g1_hat: FittedEstimator,
    pub f1_hat: FittedEstimator,
}

impl BiasEstimate {
    pub fn b1_cell(&self, cell: u32) -> f64 {
        self.g1_hat.predict_cell(cell) - self.f1_hat.predict_cell(cell)
    }

    pub fn b1_row(&self, cohort: &Cohort, i: usize) -> f64 {
        self.g1_hat.predict_row(cohort, i) - self.f1_hat.predict_row(cohort, i)
    }

    /// Cells where ĝ₁ had no RCT support and fell back to its global mean:
    /// positivity warnings for any OS cell scored there.
    pub fn positivity_flags(&self) -> &[u32] {
        self.g1_hat.empty_cells()
    }
}

/// Fit ĝ₁ on the RCT and f̂₁ on the observational cohort (rows with S=1,
/// A=1 in both) and expose their pointwise difference.
pub fn estimate_bias(
    rct: &Cohort,
    os: &Cohort,
    model_kind: ModelKind,
    options: &FitOptions,
) -> Result<BiasEstimate> {
    if rct.population() != Population::Rct || os.population() != Population::Os {
        return Err(Error::Estimation("estimate_bias expects (RCT, OS) cohorts in that order".into()));
    }
    if rct.d() != os.d() {
        return Err(Error::Estimation(format!(
            "covariate dimension mismatch: RCT d={}, OS d={}",
            rct.d(),
            os.d()
        )));
    }
    let g1_hat = fit(rct, ConditioningSpec::g1(), model_kind, options)?;
    let f1_hat = fit(os, ConditioningSpec::eta_y(), model_kind, options)?;
    Ok(BiasEstimate { g1_hat, f1_hat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic;
    use crate::synthgen::{
        build_tables, generate_cohort, Covariates, MechanismKind, MechanismSpec, UModel,
    };
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// d=1 observational cohort with explicit (cell, s, a, y) rows.
    fn toy_cohort(rows: &[(u32, u8, Option<u8>, Option<u8>)]) -> Cohort {
        Cohort::from_observed(
            Population::Os,
            1,
            Covariates::Cells(rows.iter().map(|r| r.0).collect()),
            rows.iter().map(|r| r.1).collect(),
            rows.iter().map(|r| r.2).collect(),
            rows.iter().map(|r| r.3).collect(),
        )
        .unwrap()
    }

    #[test]
    fn frequency_stratum_means() {
        let cohort = toy_cohort(&[
            (0, 1, Some(1), Some(0)),
            (0, 1, Some(1), Some(1)),
            (0, 1, Some(1), Some(1)),
            (0, 1, Some(0), Some(0)),
            (1, 1, Some(0), Some(1)),
        ]);
        let fit = fit_frequency(&cohort, ConditioningSpec::eta_a(), 0.0).unwrap();
        assert_abs_diff_eq!(fit.predict_cell(0), 0.75, epsilon = 1e-15);
        assert_eq!(fit.predict_cell(1), 0.0);
        assert_eq!(fit.n_train, 5);
        assert!(fit.empty_cells().is_empty());
        // Jeffreys-style smoothing keeps predictions off the boundary.
        let smoothed = fit_frequency(&cohort, ConditioningSpec::eta_a(), 0.5).unwrap();
        assert_abs_diff_eq!(smoothed.predict_cell(0), 3.5 / 5.0, epsilon = 1e-15);
        assert!(smoothed.predict_cell(1) > 0.0);
    }

    #[test]
    fn frequency_empty_cell_falls_back_to_global() {
        let cohort = Cohort::from_observed(
            Population::Os,
            2,
            Covariates::Cells(vec![0, 0, 1, 1]),
            vec![1, 1, 1, 1],
            vec![Some(1), Some(1), Some(0), Some(1)],
            vec![Some(1), Some(0), Some(0), Some(1)],
        )
        .unwrap();
        let fit = fit_frequency(&cohort, ConditioningSpec::eta_a(), 0.0).unwrap();
        assert_eq!(fit.empty_cells(), &[2, 3]);
        assert_abs_diff_eq!(fit.predict_cell(2), 0.75, epsilon = 1e-15); // global mean
        assert_abs_diff_eq!(fit.predict_cell(3), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn frequency_errors_when_filtering_removes_everything() {
        let cohort = toy_cohort(&[(0, 0, None, None), (1, 0, None, None)]);
        let err = fit_frequency(&cohort, ConditioningSpec::eta_a(), 0.5).unwrap_err();
        assert!(matches!(err, Error::Estimation(_)));
        // The S-target still fits: no filter applies.
        assert!(fit_frequency(&cohort, ConditioningSpec::eta_s(), 0.5).is_ok());
    }

    #[test]
    fn filter_discipline_only_admits_conditioned_rows() {
        let mut r = rng(1);
        let spec =
            MechanismSpec::build(MechanismKind::SelectionType1, UModel::BinaryU, 3, 0.2, None, &mut r)
                .unwrap();
        let tables = build_tables(&spec, &mut r).unwrap();
        let os = generate_cohort(&tables, &spec, Population::Os, 5_000, &mut r).unwrap();
        let rows_s = ConditioningSpec::eta_s().filtered_rows(&os).unwrap();
        assert_eq!(rows_s.len(), os.len());
        let rows_a = ConditioningSpec::eta_a().filtered_rows(&os).unwrap();
        assert!(rows_a.iter().all(|&(i, _)| os.s(i) == 1));
        assert_eq!(rows_a.len(), (0..os.len()).filter(|&i| os.s(i) == 1).count());
        let rows_y = ConditioningSpec::eta_y().filtered_rows(&os).unwrap();
        assert!(rows_y.iter().all(|&(i, _)| os.s(i) == 1 && os.a(i) == Some(1)));
        // Population mismatch is refused.
        assert!(ConditioningSpec::g1().filtered_rows(&os).is_err());
    }

    #[test]
    fn fits_are_leak_free_and_deterministic() {
        let mut r = rng(2);
        let spec =
            MechanismSpec::build(MechanismKind::SelectionType1, UModel::BinaryU, 4, 0.3, None, &mut r)
                .unwrap();
        let tables = build_tables(&spec, &mut r).unwrap();
        let os = generate_cohort(&tables, &spec, Population::Os, 20_000, &mut r).unwrap();
        // The masked copy carries strictly less latent information; every
        // estimator must see through identical data.
        let masked = os.masked();
        for cond in [ConditioningSpec::eta_s(), ConditioningSpec::eta_a(), ConditioningSpec::eta_y()] {
            let full = fit_frequency(&os, cond, 0.5).unwrap();
            let scrubbed = fit_frequency(&masked, cond, 0.5).unwrap();
            assert_eq!(full.to_text(), scrubbed.to_text());
            let twice = fit_frequency(&os, cond, 0.5).unwrap();
            assert_eq!(full.to_text(), twice.to_text());
        }
    }

    #[test]
    fn frequency_converges_to_table_probabilities() {
        let mut r = rng(3);
        let spec = MechanismSpec::build(MechanismKind::NoBias, UModel::BinaryU, 3, 0.3, None, &mut r)
            .unwrap();
        let tables = build_tables(&spec, &mut r).unwrap();
        let os = generate_cohort(&tables, &spec, Population::Os, 1_000_000, &mut r).unwrap();
        let moments = analytic::moment_profile(&spec, &tables).unwrap();
        for (cond, pick) in [
            (ConditioningSpec::eta_s(), 0usize),
            (ConditioningSpec::eta_a(), 1),
            (ConditioningSpec::eta_y(), 2),
        ] {
            let fit = fit_frequency(&os, cond, 0.5).unwrap();
            for cell in 0..spec.n_cells() as u32 {
                let truth = match pick {
                    0 => moments[cell as usize].p_s,
                    1 => moments[cell as usize].p_a,
                    _ => moments[cell as usize].p_y,
                };
                assert_abs_diff_eq!(fit.predict_cell(cell), truth, epsilon = 0.01);
            }
        }
    }

    #[test]
    fn logistic_intercept_only_recovers_base_rate() {
        // A single all-zero feature: the model must put everything in the
        // intercept, the Bernoulli MLE of the 60% base rate.
        let rows: Vec<(u32, u8, Option<u8>, Option<u8>)> =
            (0..1000).map(|i| (0, 1, Some((i % 10 < 6) as u8), Some(1))).collect();
        let cohort = toy_cohort(&rows);
        let fit = fit_logistic(&cohort, ConditioningSpec::eta_a(), 0.0, 100, 1e-10).unwrap();
        assert!(fit.converged());
        assert_abs_diff_eq!(fit.predict_cell(0), 0.6, epsilon = 1e-6);
    }

    #[test]
    fn logistic_penalty_tames_separable_data() {
        // Feature perfectly separates the classes; the L2 penalty keeps the
        // weights finite and the predictions strictly inside (0, 1).
        let rows: Vec<(u32, u8, Option<u8>, Option<u8>)> =
            (0..200).map(|i| ((i % 2) as u32, 1, Some((i % 2) as u8), Some(1))).collect();
        let cohort = toy_cohort(&rows);
        let fit = fit_logistic(&cohort, ConditioningSpec::eta_a(), 0.5, 200, 1e-9).unwrap();
        assert!(fit.converged());
        let (p0, p1) = (fit.predict_cell(0), fit.predict_cell(1));
        assert!(p0 > 0.0 && p0 < 0.5, "p0 = {p0}");
        assert!(p1 < 1.0 && p1 > 0.5, "p1 = {p1}");
        if let FittedModel::Logistic { weights, .. } = &fit.model {
            assert!(weights.iter().all(|w| w.is_finite()));
        }
    }

    #[test]
    fn logistic_needs_both_classes() {
        let rows: Vec<(u32, u8, Option<u8>, Option<u8>)> =
            (0..50).map(|_| (0, 1, Some(1), Some(1))).collect();
        let cohort = toy_cohort(&rows);
        assert!(matches!(
            fit_logistic(&cohort, ConditioningSpec::eta_a(), 0.1, 50, 1e-8),
            Err(Error::Estimation(_))
        ));
    }

    #[test]
    fn logistic_tracks_frequency_log_loss() {
        // d=6 cohort whose true S-model is logit-linear. The saturated
        // frequency table is the oracle no fit can beat on training
        // log-loss; a correct logistic fitter must land within the
        // parameter-count gap (~(2^d - d - 1) / 2n) of it.
        use rand::Rng;
        let mut r = rng(5);
        let d = 6;
        let n = 40_000;
        let beta0 = -0.4;
        let betas = [0.8, -0.6, 0.3, 0.9, -0.2, 0.5];
        let mut cells = Vec::with_capacity(n);
        let mut s = Vec::with_capacity(n);
        for _ in 0..n {
            let cell: u32 = (0..d).map(|j| u32::from(r.random::<f64>() < 0.5) << j).sum();
            let z = beta0
                + (0..d).map(|j| betas[j] * ((cell >> j) & 1) as f64).sum::<f64>();
            cells.push(cell);
            s.push(u8::from(r.random::<f64>() < sigmoid(z)));
        }
        let os = Cohort::from_observed(
            Population::Os,
            d,
            Covariates::Cells(cells),
            s.clone(),
            s.iter().map(|&v| (v == 1).then_some(1)).collect(),
            s.iter().map(|&v| (v == 1).then_some(1)).collect(),
        )
        .unwrap();
        let cond = ConditioningSpec::eta_s();
        let freq = fit_frequency(&os, cond, 0.5).unwrap();
        let logit = fit_logistic(&os, cond, 1e-4, 200, 1e-8).unwrap();
        let rows = cond.filtered_rows(&os).unwrap();
        let log_loss = |est: &FittedEstimator| -> f64 {
            let mut total = 0.0;
            for &(i, y) in &rows {
                let p = est.predict_row(&os, i).clamp(1e-12, 1.0 - 1e-12);
                total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
            }
            total / rows.len() as f64
        };
        let (lf, ll) = (log_loss(&freq), log_loss(&logit));
        assert!(ll <= lf + 0.01, "logistic {ll} vs saturated frequency {lf}");
    }

    #[test]
    fn bias_estimate_is_calibrated_under_no_bias() {
        // Identical generative law for both cohorts: the bias estimate is
        // pure sampling noise, which at n = 5·10⁴ and d = 4 stays under
        // 0.03 in mean absolute value.
        for seed in [6, 60, 600] {
            let mut r = rng(seed);
            let spec =
                MechanismSpec::build(MechanismKind::NoBias, UModel::BinaryU, 4, 0.3, None, &mut r)
                    .unwrap();
            let tables = build_tables(&spec, &mut r).unwrap();
            let rct = generate_cohort(&tables, &spec, Population::Rct, 50_000, &mut r).unwrap();
            let os = generate_cohort(&tables, &spec, Population::Os, 50_000, &mut r).unwrap();
            let bias =
                estimate_bias(&rct, &os, ModelKind::FrequencyTable, &FitOptions::default())
                    .unwrap();
            let mean_abs = (0..os.len())
                .map(|i| bias.b1_row(&os, i).abs())
                .sum::<f64>()
                / os.len() as f64;
            assert!(mean_abs <= 0.03, "seed {seed}: mean |b1_hat| = {mean_abs}");
            // Degenerate check: identical estimators give an identically
            // zero bias.
            let self_bias =
                BiasEstimate { g1_hat: bias.f1_hat.clone(), f1_hat: bias.f1_hat.clone() };
            for cell in 0..spec.n_cells() as u32 {
                assert_eq!(self_bias.b1_cell(cell), 0.0);
            }
        }
    }

    #[test]
    fn bias_estimate_recovers_transportability_truth() {
        let mut r = rng(7);
        let spec =
            MechanismSpec::build(MechanismKind::Transportability, UModel::BinaryU, 2, 0.2, None, &mut r)
                .unwrap();
        let tables = build_tables(&spec, &mut r).unwrap();
        let rct = generate_cohort(&tables, &spec, Population::Rct, 200_000, &mut r).unwrap();
        let os = generate_cohort(&tables, &spec, Population::Os, 200_000, &mut r).unwrap();
        let truth = analytic::analytic_bias_profile(&spec, &tables).unwrap();
        let bias =
            estimate_bias(&rct, &os, ModelKind::FrequencyTable, &FitOptions::default()).unwrap();
        for cell in 0..spec.n_cells() as u32 {
            assert_abs_diff_eq!(bias.b1_cell(cell), truth.b1[cell as usize], epsilon = 0.03);
            assert!(bias.b1_cell(cell).abs() <= 1.0);
        }
    }

    #[test]
    fn estimate_bias_validates_inputs() {
        let mut r = rng(8);
        let spec = MechanismSpec::build(MechanismKind::NoBias, UModel::BinaryU, 2, 0.3, None, &mut r)
            .unwrap();
        let tables = build_tables(&spec, &mut r).unwrap();
        let rct = generate_cohort(&tables, &spec, Population::Rct, 100, &mut r).unwrap();
        let os = generate_cohort(&tables, &spec, Population::Os, 100, &mut r).unwrap();
        assert!(estimate_bias(&os, &rct, ModelKind::FrequencyTable, &FitOptions::default()).is_err());
        let spec3 = MechanismSpec::build(MechanismKind::NoBias, UModel::BinaryU, 3, 0.3, None, &mut r)
            .unwrap();
        let tables3 = build_tables(&spec3, &mut r).unwrap();
        let os3 = generate_cohort(&tables3, &spec3, Population::Os, 100, &mut r).unwrap();
        assert!(estimate_bias(&rct, &os3, ModelKind::FrequencyTable, &FitOptions::default()).is_err());
    }

    #[test]
    fn frequency_error_shrinks_with_sample_size() {
        let mut r = rng(9);
        let spec = MechanismSpec::build(MechanismKind::NoBias, UModel::BinaryU, 2, 0.3, None, &mut r)
            .unwrap();
        let tables = build_tables(&spec, &mut r).unwrap();
        let moments = analytic::moment_profile(&spec, &tables).unwrap();
        let mut errors = Vec::new();
        for n in [1_000usize, 10_000, 100_000] {
            // Median max-cell error over a handful of seeded cohorts.
            let mut errs: Vec<f64> = (0..9)
                .map(|k| {
                    let mut rr = rng(1000 + 17 * n as u64 + k);
                    let os = generate_cohort(&tables, &spec, Population::Os, n, &mut rr).unwrap();
                    let fit = fit_frequency(&os, ConditioningSpec::eta_y(), 0.5).unwrap();
                    (0..spec.n_cells() as u32)
                        .map(|c| (fit.predict_cell(c) - moments[c as usize].p_y).abs())
                        .fold(0.0, f64::max)
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            errors.push(errs[4]);
        }
        assert!(errors[0] > errors[1] && errors[1] > errors[2], "errors {errors:?}");
    }
}
