//! Closed-form bias functions and conditional moments for each mechanism,
//! brute-force enumeration oracles for both, and Monte-Carlo evaluation of
//! the theoretical covariance signals that the classifier's sign table
//! rests on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::synthgen::{
    Downstream, FDistribution, MechanismKind, MechanismSpec, Population, ProbabilityTables,
    SelectionTable, UModel, P_X1_OS,
};

/// Grid size for the continuous-U brute force; trapezoid error at h = 1/1024
/// is ~1e−7 for the cubic integrands involved, safely inside the 1e−6
/// oracle tolerance.
const U_GRID: usize = 1025;

// ---------------------------------------------------------------------------
// Closed-form bias functions
// ---------------------------------------------------------------------------

/// Transportability bias per cell: (P(U=1|x,RCT) − P(U=1|x,OS)) times the
/// U-contrast of the treated outcome. Equals g1 − f1 directly.
pub fn bias_transportability(pu_r1: f64, pu_r0: f64, py_u1: f64, py_u0: f64) -> f64 {
    (pu_r1 - pu_r0) * (py_u1 - py_u0)
}

/// Confounding bias per cell, as stated:
/// (py_u1 − py_u0)(pa_u1 − pa_u0) / (2(pa_u1 + pa_u0)).
///
/// Sign convention: the signed difference g1 − f1 equals this expression
/// with the outcome contrast reversed (u=0 minus u=1) — check directly from
/// g = (py_u0 + py_u1)/2 and f = (py_u0·pa_u0 + py_u1·pa_u1)/(pa_u0 + pa_u1).
/// The covariance signals consume |b1| only, so both conventions agree
/// where it matters.
pub fn bias_confounding(py_u1: f64, py_u0: f64, pa_u1: f64, pa_u0: f64) -> Result<f64> {
    let den = 2.0 * (pa_u1 + pa_u0);
    if den <= 0.0 {
        return Err(Error::Singularity("confounding bias: pa_u1 + pa_u0 = 0".into()));
    }
    Ok((py_u1 - py_u0) * (pa_u1 - pa_u0) / den)
}

/// Type-1 selection bias per cell; same algebra as confounding with the
/// selection parameters in place of the treatment parameters.
pub fn bias_selection1(py_u1: f64, py_u0: f64, ps_u1: f64, ps_u0: f64) -> Result<f64> {
    let den = 2.0 * (ps_u1 + ps_u0);
    if den <= 0.0 {
        return Err(Error::Singularity("selection-1 bias: ps_u1 + ps_u0 = 0".into()));
    }
    Ok((py_u1 - py_u0) * (ps_u1 - ps_u0) / den)
}

/// Collider-selection bias per cell:
/// py1 · (1 − ps_11 / (ps_11·py1 + ps_01·(1 − py1))). Equals g1 − f1.
pub fn bias_selection2(py1: f64, ps_11: f64, ps_01: f64) -> Result<f64> {
    let den = ps_11 * py1 + ps_01 * (1.0 - py1);
    if den <= 0.0 {
        return Err(Error::Singularity("selection-2 bias: P(S=1 | A=1, x) = 0".into()));
    }
    Ok(py1 * (1.0 - ps_11 / den))
}

// ---------------------------------------------------------------------------
// Conditional moments
// ---------------------------------------------------------------------------

/// Observational-cohort moments for one cell: P(S=1|x), P(A=1|x,S=1),
/// P(Y=1|x,S=1,A=1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellMoments {
    pub p_s: f64,
    pub p_a: f64,
    pub p_y: f64,
}

impl CellMoments {
    pub fn v_s(&self) -> f64 {
        self.p_s * (1.0 - self.p_s)
    }

    pub fn v_a(&self) -> f64 {
        self.p_a * (1.0 - self.p_a)
    }

    pub fn v_y(&self) -> f64 {
        self.p_y * (1.0 - self.p_y)
    }
}

pub type MomentProfile = Vec<CellMoments>;

fn sel2_cell_moments(table: &SelectionTable, p_a: f64, p_y0: f64, p_y1: f64) -> Result<CellMoments> {
    let (t00, t01, t10, t11) = table.as_tuple();
    // P(S=1|x): marginalize the collider table over A ~ Bern(p_a) and the
    // realized outcome Y(a).
    let p_s = p_a * (t11 * p_y1 + t01 * (1.0 - p_y1))
        + (1.0 - p_a) * (t10 * p_y0 + t00 * (1.0 - p_y0));
    let den_a = t11 * p_y1 + t01 * (1.0 - p_y1);
    if p_s <= 0.0 || den_a <= 0.0 {
        return Err(Error::Singularity("collider selection leaves an empty stratum".into()));
    }
    Ok(CellMoments {
        p_s,
        p_a: p_a * den_a / p_s,
        p_y: t11 * p_y1 / den_a,
    })
}

/// Multiply a polynomial in u by the linear factor (c0 + c1·u).
fn mul_linear(poly: &[f64], c0: f64, c1: f64) -> Vec<f64> {
    let mut out = vec![0.0; poly.len() + 1];
    for (k, &p) in poly.iter().enumerate() {
        out[k] += p * c0;
        out[k + 1] += p * c1;
    }
    out
}

/// ∫₀¹ poly(u) du.
fn integrate_unit(poly: &[f64]) -> f64 {
    poly.iter().enumerate().map(|(k, &p)| p / (k + 1) as f64).sum()
}

/// Closed-form moments per mechanism. Combinations have no single closed
/// form and fall back to the brute-force enumerator.
pub fn conditional_moments(
    spec: &MechanismSpec,
    tables: &ProbabilityTables,
    x: u32,
) -> Result<CellMoments> {
    if spec.kind.is_combination() {
        return brute_force_moments(spec, tables, x);
    }
    let (s0, s1) = tables.pair(Downstream::S, x);
    let (a0, a1) = tables.pair(Downstream::A, x);
    let (y0_0, _) = tables.pair(Downstream::Y0, x);
    let (y1_0, y1_1) = tables.pair(Downstream::Y1, x);

    if spec.kind == MechanismKind::SelectionType2 {
        // No latent U in play: all tables are U-constant by construction.
        let table = spec
            .selection_table()
            .ok_or_else(|| Error::Config("selection-type-2 spec lost its table".into()))?;
        return sel2_cell_moments(table, a0, y0_0, y1_0);
    }

    match spec.u_model {
        UModel::BinaryU => {
            let m = match spec.kind {
                MechanismKind::NoBias => CellMoments { p_s: s0, p_a: a0, p_y: y1_0 },
                MechanismKind::Transportability => {
                    // S, A ignore U; Y(1) mixes over P(U=1|x, OS).
                    let q = spec.p_u(Population::Os, x);
                    CellMoments { p_s: s0, p_a: a0, p_y: y1_0 + q * (y1_1 - y1_0) }
                }
                MechanismKind::Confounding => {
                    // P(U=1) = 1/2; conditioning on A=1 tilts U toward the
                    // level that treats more.
                    let den = a0 + a1;
                    if den <= 0.0 {
                        return Err(Error::Singularity("confounding: pa_u0 + pa_u1 = 0".into()));
                    }
                    CellMoments {
                        p_s: s0,
                        p_a: 0.5 * den,
                        p_y: (y1_0 * a0 + y1_1 * a1) / den,
                    }
                }
                MechanismKind::SelectionType1 => {
                    // Conditioning on S=1 tilts U; A ignores U so the tilt
                    // cancels in P(A=1|S=1).
                    let den = s0 + s1;
                    if den <= 0.0 {
                        return Err(Error::Singularity("selection-1: ps_u0 + ps_u1 = 0".into()));
                    }
                    CellMoments {
                        p_s: 0.5 * den,
                        p_a: a0,
                        p_y: (y1_0 * s0 + y1_1 * s1) / den,
                    }
                }
                MechanismKind::SelectionType2 | MechanismKind::Combination(_) => unreachable!(),
            };
            Ok(m)
        }
        UModel::ContinuousU => {
            // Parameters are linear in u, so the moments are ratios of
            // exact polynomial integrals over u ∈ [0, 1]:
            // P(S=1|x) = ∫s, P(A=1|x,S=1) = ∫sa / ∫s,
            // P(Y=1|x,S=1,A=1) = ∫say / ∫sa.
            let s_poly = vec![s0, s1 - s0];
            let sa_poly = mul_linear(&s_poly, a0, a1 - a0);
            let say_poly = mul_linear(&sa_poly, y1_0, y1_1 - y1_0);
            let int_s = integrate_unit(&s_poly);
            let int_sa = integrate_unit(&sa_poly);
            let int_say = integrate_unit(&say_poly);
            if int_s <= 0.0 || int_sa <= 0.0 {
                return Err(Error::Singularity("continuous-U moments: empty stratum".into()));
            }
            Ok(CellMoments { p_s: int_s, p_a: int_sa / int_s, p_y: int_say / int_sa })
        }
    }
}

/// Integration weights over the latent U for one cell/population: exact
/// two-point weights for binary U, trapezoid grid for continuous U.
fn u_weights(spec: &MechanismSpec, population: Population, cell: u32) -> Vec<(f64, f64)> {
    match spec.u_model {
        UModel::BinaryU => {
            let q = spec.p_u(population, cell);
            vec![(0.0, 1.0 - q), (1.0, q)]
        }
        UModel::ContinuousU => {
            let h = 1.0 / (U_GRID - 1) as f64;
            (0..U_GRID)
                .map(|i| {
                    let w = if i == 0 || i == U_GRID - 1 { 0.5 * h } else { h };
                    (i as f64 * h, w)
                })
                .collect()
        }
    }
}

/// Oracle: exact probability propagation over (u, a, y) under the full
/// generative law, including collider selection and combined mechanisms.
pub fn brute_force_moments(
    spec: &MechanismSpec,
    tables: &ProbabilityTables,
    x: u32,
) -> Result<CellMoments> {
    let mut p_s = 0.0;
    let mut p_sa = 0.0;
    let mut p_say = 0.0;
    for (u, w_u) in u_weights(spec, Population::Os, x) {
        let pa1 = tables.at_u(Downstream::A, x, u);
        for a in 0..2u8 {
            let w_a = if a == 1 { pa1 } else { 1.0 - pa1 };
            let py1 = tables.outcome_at_u(a, x, u);
            for y in 0..2u8 {
                let w_y = if y == 1 { py1 } else { 1.0 - py1 };
                let p_sel = spec.selection_prob(tables, x, u, y, a);
                let w = w_u * w_a * w_y * p_sel;
                p_s += w;
                if a == 1 {
                    p_sa += w;
                    if y == 1 {
                        p_say += w;
                    }
                }
            }
        }
    }
    if p_s <= 0.0 || p_sa <= 0.0 {
        return Err(Error::Singularity("brute-force moments: empty stratum".into()));
    }
    Ok(CellMoments { p_s, p_a: p_sa / p_s, p_y: p_say / p_sa })
}

/// Closed-form moments for every cell.
pub fn moment_profile(spec: &MechanismSpec, tables: &ProbabilityTables) -> Result<MomentProfile> {
    (0..spec.n_cells() as u32).map(|x| conditional_moments(spec, tables, x)).collect()
}

// ---------------------------------------------------------------------------
// Bias profiles
// ---------------------------------------------------------------------------

/// Per-cell bias decomposition: the RCT-identified treated-outcome model
/// g1, its observational counterpart f1, and their difference b1 = g1 − f1.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasProfile {
    pub g1: Vec<f64>,
    pub f1: Vec<f64>,
    pub b1: Vec<f64>,
}

/// E[Y(1) = 1 | x] in one population: the Y(1) parameter averaged over that
/// population's latent-U law. Exact for every mechanism, since Y(1) reads
/// only (x, u).
pub fn mean_y1(
    spec: &MechanismSpec,
    tables: &ProbabilityTables,
    cell: u32,
    population: Population,
) -> f64 {
    let (y1_0, y1_1) = tables.pair(Downstream::Y1, cell);
    match spec.u_model {
        UModel::BinaryU => {
            let q = spec.p_u(population, cell);
            y1_0 + q * (y1_1 - y1_0)
        }
        UModel::ContinuousU => 0.5 * (y1_0 + y1_1),
    }
}

/// Per-cell closed-form bias profile.
///
/// b1 is produced by the matching bias_* dispatch for the pure mechanisms
/// (with the U-contrast ordered so the result is the signed g1 − f1; see
/// [`bias_confounding`]); combinations take the difference of brute-force
/// g and f.
pub fn analytic_bias_profile(
    spec: &MechanismSpec,
    tables: &ProbabilityTables,
) -> Result<BiasProfile> {
    let n = spec.n_cells() as u32;
    let mut g1 = Vec::with_capacity(n as usize);
    let mut f1 = Vec::with_capacity(n as usize);
    let mut b1 = Vec::with_capacity(n as usize);
    for x in 0..n {
        let g = mean_y1(spec, tables, x, Population::Rct);
        let f = conditional_moments(spec, tables, x)?.p_y;
        let (s0, s1) = tables.pair(Downstream::S, x);
        let (a0, a1) = tables.pair(Downstream::A, x);
        let (y1_0, y1_1) = tables.pair(Downstream::Y1, x);
        let b = match (&spec.kind, spec.u_model) {
            (MechanismKind::NoBias, _) => 0.0,
            (MechanismKind::Transportability, _) => bias_transportability(
                spec.p_u(Population::Rct, x),
                spec.p_u(Population::Os, x),
                y1_1,
                y1_0,
            ),
            // Outcome contrast passed as (u=0, u=1): the stated formula then
            // evaluates to the signed g1 − f1 (enumeration-checked below).
            (MechanismKind::Confounding, UModel::BinaryU) => {
                bias_confounding(y1_0, y1_1, a1, a0)?
            }
            (MechanismKind::SelectionType1, UModel::BinaryU) => {
                bias_selection1(y1_0, y1_1, s1, s0)?
            }
            (MechanismKind::SelectionType2, _) => {
                let t = spec.selection_table().expect("validated at build");
                bias_selection2(y1_0, t.get(1, 1), t.get(0, 1))?
            }
            // Continuous U has no two-point contrast; use the closed-form
            // moments directly.
            (MechanismKind::Confounding | MechanismKind::SelectionType1, UModel::ContinuousU) => {
                g - f
            }
            (MechanismKind::Combination(_), _) => g - brute_force_moments(spec, tables, x)?.p_y,
        };
        debug_assert!((b - (g - f)).abs() < 1e-9, "bias dispatch disagrees with g - f");
        g1.push(g);
        f1.push(f);
        b1.push(b);
    }
    Ok(BiasProfile { g1, f1, b1 })
}

/// Oracle: g and f both by enumeration, b1 = g − f.
pub fn brute_force_bias_profile(
    spec: &MechanismSpec,
    tables: &ProbabilityTables,
) -> Result<BiasProfile> {
    let n = spec.n_cells() as u32;
    let mut g1 = Vec::with_capacity(n as usize);
    let mut f1 = Vec::with_capacity(n as usize);
    let mut b1 = Vec::with_capacity(n as usize);
    for x in 0..n {
        let g: f64 = u_weights(spec, Population::Rct, x)
            .into_iter()
            .map(|(u, w)| w * tables.at_u(Downstream::Y1, x, u))
            .sum();
        let f = brute_force_moments(spec, tables, x)?.p_y;
        g1.push(g);
        f1.push(f);
        b1.push(g - f);
    }
    Ok(BiasProfile { g1, f1, b1 })
}

// ---------------------------------------------------------------------------
// Population-level covariance signals for a realized table
// ---------------------------------------------------------------------------

/// P(X = cell) in the observational population (independent Bernoulli(0.6)
/// bits).
pub fn os_cell_probability(d: usize, cell: u32) -> f64 {
    let ones = cell.count_ones() as i32;
    P_X1_OS.powi(ones) * (1.0 - P_X1_OS).powi(d as i32 - ones)
}

/// Exact covariances Cov(|b1(X)|, V(T | ·)) for one realized table set,
/// taken over the covariate distribution each channel's validation rows are
/// actually drawn from: all OS rows for S, the S=1 rows for A (cell weight
/// ∝ P(x)·pS_x), and the S=1, A=1 rows for Y (∝ P(x)·pS_x·pA_x).
#[derive(Clone, Copy, Debug)]
pub struct PopulationSignals {
    pub cov_s: f64,
    pub cov_a: f64,
    pub cov_y: f64,
}

pub fn population_signals(
    spec: &MechanismSpec,
    tables: &ProbabilityTables,
) -> Result<PopulationSignals> {
    let profile = analytic_bias_profile(spec, tables)?;
    let moments = moment_profile(spec, tables)?;
    let weighted_cov = |weight: &dyn Fn(u32) -> f64, value: &dyn Fn(u32) -> f64| -> f64 {
        let cells = 0..spec.n_cells() as u32;
        let total: f64 = cells.clone().map(weight).sum();
        let mean_phi: f64 =
            cells.clone().map(|x| weight(x) * profile.b1[x as usize].abs()).sum::<f64>() / total;
        let mean_psi: f64 = cells.clone().map(|x| weight(x) * value(x)).sum::<f64>() / total;
        cells
            .map(|x| weight(x) * (profile.b1[x as usize].abs() - mean_phi) * (value(x) - mean_psi))
            .sum::<f64>()
            / total
    };
    let base = |x: u32| os_cell_probability(spec.d, x);
    let m = &moments;
    Ok(PopulationSignals {
        cov_s: weighted_cov(&base, &|x| m[x as usize].v_s()),
        cov_a: weighted_cov(&|x| base(x) * m[x as usize].p_s, &|x| m[x as usize].v_a()),
        cov_y: weighted_cov(
            &|x| base(x) * m[x as usize].p_s * m[x as usize].p_a,
            &|x| m[x as usize].v_y(),
        ),
    })
}

// ---------------------------------------------------------------------------
// Theoretical covariance signals (Monte Carlo over the F(p) ensemble)
// ---------------------------------------------------------------------------

/// One channel of the theoretical signal: Pearson-normalized covariance
/// between |b1| and the channel's conditional variance, with its MC
/// standard error.
#[derive(Clone, Copy, Debug)]
pub struct OracleChannel {
    pub rho: f64,
    pub se: f64,
    pub cov: f64,
    /// True when the correlation is undefined (a constant input, e.g. b1 ≡ 0
    /// under NoBias).
    pub degenerate: bool,
}

impl OracleChannel {
    /// The sign-table zero rule: a channel counts as zero when degenerate or
    /// within 3 MC standard errors of zero.
    pub fn is_zero(&self) -> bool {
        self.degenerate || self.rho.abs() < 3.0 * self.se
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TheoreticalSignals {
    pub s: OracleChannel,
    pub a: OracleChannel,
    pub y: OracleChannel,
    pub mc_samples: usize,
}

const MC_BATCHES: usize = 100;

#[derive(Clone, Copy, Default)]
struct ChannelSums {
    psi: f64,
    psi2: f64,
    phi_psi: f64,
}

#[derive(Clone, Copy, Default)]
struct BatchSums {
    n: f64,
    phi: f64,
    phi2: f64,
    chan: [ChannelSums; 3],
}

impl BatchSums {
    fn push(&mut self, phi: f64, psi: [f64; 3]) {
        self.n += 1.0;
        self.phi += phi;
        self.phi2 += phi * phi;
        for (c, &v) in self.chan.iter_mut().zip(psi.iter()) {
            c.psi += v;
            c.psi2 += v * v;
            c.phi_psi += phi * v;
        }
    }

    fn merge(mut self, other: &BatchSums) -> BatchSums {
        self.n += other.n;
        self.phi += other.phi;
        self.phi2 += other.phi2;
        for (c, o) in self.chan.iter_mut().zip(other.chan.iter()) {
            c.psi += o.psi;
            c.psi2 += o.psi2;
            c.phi_psi += o.phi_psi;
        }
        self
    }

    /// (cov, r) for one channel; None when either side is constant.
    fn pearson(&self, k: usize) -> Option<(f64, f64)> {
        let c = &self.chan[k];
        let n = self.n;
        let cov = (c.phi_psi - self.phi * c.psi / n) / (n - 1.0);
        let var_phi = (self.phi2 - self.phi * self.phi / n) / (n - 1.0);
        let var_psi = (c.psi2 - c.psi * c.psi / n) / (n - 1.0);
        if var_phi <= 0.0 || var_psi <= 0.0 {
            return None;
        }
        let r = (cov / (var_phi.sqrt() * var_psi.sqrt())).clamp(-1.0, 1.0);
        Some((cov, r))
    }
}

/// Draw one parameter configuration for the mechanism and return
/// (|b1|, [V(S|·), V(A|·), V(Y|·)]).
fn draw_signal_sample<R: Rng + ?Sized>(
    kind: &MechanismKind,
    f: FDistribution,
    table: Option<&SelectionTable>,
    rng: &mut R,
) -> (f64, [f64; 3]) {
    let bern_var = |p: f64| p * (1.0 - p);
    match kind {
        MechanismKind::NoBias => {
            let (s, a, y) = (f.sample(rng), f.sample(rng), f.sample(rng));
            (0.0, [bern_var(s), bern_var(a), bern_var(y)])
        }
        MechanismKind::Transportability => {
            // Draw order: U-probs (RCT, OS), Y(1) at u=0/1, then S, A.
            let u_rct = f.sample(rng);
            let u_os = f.sample(rng);
            let y0 = f.sample(rng);
            let y1 = f.sample(rng);
            let s = f.sample(rng);
            let a = f.sample(rng);
            let b = bias_transportability(u_rct, u_os, y1, y0);
            let m_y = y0 + u_os * (y1 - y0);
            (b.abs(), [bern_var(s), bern_var(a), bern_var(m_y)])
        }
        MechanismKind::Confounding => {
            // Draw order: Y(1) at u=0/1, A at u=0/1, then S.
            let y0 = f.sample(rng);
            let y1 = f.sample(rng);
            let a0 = f.sample(rng);
            let a1 = f.sample(rng);
            let s = f.sample(rng);
            let b = bias_confounding(y1, y0, a1, a0).expect("F support is positive");
            let m_a = 0.5 * (a0 + a1);
            let m_y = (y0 * a0 + y1 * a1) / (a0 + a1);
            (b.abs(), [bern_var(s), bern_var(m_a), bern_var(m_y)])
        }
        MechanismKind::SelectionType1 => {
            // Draw order: Y(1) at u=0/1, S at u=0/1, then A.
            let y0 = f.sample(rng);
            let y1 = f.sample(rng);
            let s0 = f.sample(rng);
            let s1 = f.sample(rng);
            let a = f.sample(rng);
            let b = bias_selection1(y1, y0, s1, s0).expect("F support is positive");
            let m_s = 0.5 * (s0 + s1);
            let m_y = (y0 * s0 + y1 * s1) / (s0 + s1);
            (b.abs(), [bern_var(m_s), bern_var(a), bern_var(m_y)])
        }
        MechanismKind::SelectionType2 => {
            // Draw order: Y(1), Y(0), A.
            let t = table.expect("validated by caller");
            let y1 = f.sample(rng);
            let y0 = f.sample(rng);
            let a = f.sample(rng);
            let m = sel2_cell_moments(t, a, y0, y1).expect("F support is positive");
            let b = bias_selection2(y1, t.get(1, 1), t.get(0, 1)).expect("F support is positive");
            (b.abs(), [m.v_s(), m.v_a(), m.v_y()])
        }
        MechanismKind::Combination(_) => unreachable!("rejected by theoretical_signals"),
    }
}

/// Monte-Carlo evaluation of the theoretical covariance signals for one
/// pure mechanism: Cov(|b1|, V(T|·)) over iid F(p) draws of the cell
/// parameters, Pearson-normalized, with batch-means standard errors.
///
/// Draws are sharded over parallel workers on seeded sub-streams derived
/// from the caller's rng, so results do not depend on the thread count.
pub fn theoretical_signals<R: Rng + ?Sized>(
    kind: &MechanismKind,
    p: f64,
    n_mc: usize,
    table: Option<&SelectionTable>,
    rng: &mut R,
) -> Result<TheoreticalSignals> {
    if kind.is_combination() {
        return Err(Error::Config(
            "theoretical signals are defined per atomic mechanism, not for combinations".into(),
        ));
    }
    let needs_table = *kind == MechanismKind::SelectionType2;
    if needs_table && table.is_none() {
        return Err(Error::Config("selection-type-2 signals need a selection table".into()));
    }
    if !needs_table && table.is_some() {
        return Err(Error::Config(format!("{kind} does not take a selection table")));
    }
    let f = FDistribution::new(p)?;
    if n_mc < 10_000 {
        return Err(Error::Config(format!("n_mc must be at least 10^4, got {n_mc}")));
    }
    let batch_size = n_mc / MC_BATCHES;
    let seed = rng.next_u64();
    let batches: Vec<BatchSums> = (0..MC_BATCHES)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1 + b as u64);
            let mut sums = BatchSums::default();
            for _ in 0..batch_size {
                let (phi, psi) = draw_signal_sample(kind, f, table, &mut rng);
                sums.push(phi, psi);
            }
            sums
        })
        .collect();
    let total = batches.iter().fold(BatchSums::default(), |acc, b| acc.merge(b));

    let channel = |k: usize| -> OracleChannel {
        match total.pearson(k) {
            None => OracleChannel { rho: 0.0, se: 0.0, cov: 0.0, degenerate: true },
            Some((cov, rho)) => {
                let batch_rs: Vec<f64> =
                    batches.iter().filter_map(|b| b.pearson(k).map(|(_, r)| r)).collect();
                let m = batch_rs.len() as f64;
                let mean = batch_rs.iter().sum::<f64>() / m;
                let var = batch_rs.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
                    / (m - 1.0);
                OracleChannel { rho, se: (var / m).sqrt(), cov, degenerate: false }
            }
        }
    };
    Ok(TheoreticalSignals {
        s: channel(0),
        a: channel(1),
        y: channel(2),
        mc_samples: batch_size * MC_BATCHES,
    })
}
