//! Synthetic-cohort generation: the two-band parameter family F(p), the
//! per-cell probability tables for binary and continuous latent U, and the
//! row-level sampler that produces paired RCT / observational cohorts under
//! each bias mechanism.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Hard cap on covariate dimensionality: cells are enumerated as `2^d`
/// integers, so tables at d > 20 would exceed a million entries per target.
pub const MAX_D: usize = 20;

/// Per-coordinate P(X(j) = 1) in the RCT population.
pub const P_X1_RCT: f64 = 0.4;
/// Per-coordinate P(X(j) = 1) in the observational population.
pub const P_X1_OS: f64 = 0.6;

// ---------------------------------------------------------------------------
// F(p): the two-band uncertainty family
// ---------------------------------------------------------------------------

/// Uniform([0.1, p] ∪ [1 − p, 0.9]) with p ∈ (0.1, 0.5].
///
/// Every Bernoulli parameter in a run is drawn from this family; small p
/// pushes the parameters toward the extremes, p = 0.5 collapses the two
/// bands into Uniform[0.1, 0.9].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FDistribution {
    p: f64,
}

impl FDistribution {
    pub fn new(p: f64) -> Result<Self> {
        if !(p > 0.1 && p <= 0.5) {
            return Err(Error::Config(format!(
                "F-distribution parameter must lie in (0.1, 0.5], got {p}"
            )));
        }
        Ok(FDistribution { p })
    }

    pub fn p(self) -> f64 {
        self.p
    }

    /// Draw one parameter. The two bands have equal length p − 0.1, so a
    /// single uniform over the total mass picks the band and the position
    /// within it at once; at p = 0.5 the bands abut and the draw is plain
    /// Uniform[0.1, 0.9].
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        let width = self.p - 0.1;
        let v = rng.random::<f64>() * (2.0 * width);
        if v < width {
            0.1 + v
        } else {
            (1.0 - self.p) + (v - width)
        }
    }
}

// ---------------------------------------------------------------------------
// Mechanisms and their structural flags
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Population {
    Rct,
    Os,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UModel {
    /// U ∈ {0, 1}; tables hold one parameter per U level.
    BinaryU,
    /// U ~ Uniform(0, 1); flagged tables hold endpoints interpolated in u.
    ContinuousU,
}

/// Which causal-bias mechanism shapes the observational cohort.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MechanismKind {
    NoBias,
    /// U shifts the outcome and is distributed differently across the two
    /// populations: P(U = 1 | X, R) is drawn per cell and per population.
    Transportability,
    /// U drives both treatment uptake and the outcome in the observational
    /// cohort.
    Confounding,
    /// U drives participation (S) and the outcome.
    SelectionType1,
    /// Collider selection: S depends directly on (Y, A) through a fixed
    /// probability table; no latent U is involved.
    SelectionType2,
    /// Several mechanisms active at once.
    Combination(Vec<MechanismKind>),
}

impl MechanismKind {
    /// The atomic mechanisms making up this kind (itself, unless a
    /// combination).
    pub fn parts(&self) -> &[MechanismKind] {
        match self {
            MechanismKind::Combination(parts) => parts,
            other => std::slice::from_ref(other),
        }
    }

    pub fn includes(&self, kind: &MechanismKind) -> bool {
        self.parts().iter().any(|k| k == kind)
    }

    pub fn is_combination(&self) -> bool {
        matches!(self, MechanismKind::Combination(_))
    }

    /// Structural validity: combinations must hold at least two distinct
    /// atomic mechanisms and no NoBias placeholder.
    pub fn validate(&self) -> Result<()> {
        let MechanismKind::Combination(parts) = self else {
            return Ok(());
        };
        if parts.len() < 2 {
            return Err(Error::Config(
                "a mechanism combination needs at least two parts".into(),
            ));
        }
        for (i, part) in parts.iter().enumerate() {
            if part.is_combination() {
                return Err(Error::Config("nested mechanism combinations are not allowed".into()));
            }
            if *part == MechanismKind::NoBias {
                return Err(Error::Config(
                    "no-bias cannot be combined with other mechanisms".into(),
                ));
            }
            if parts[..i].contains(part) {
                return Err(Error::Config(format!("duplicate mechanism '{part}' in combination")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MechanismKind::NoBias => write!(f, "no-bias"),
            MechanismKind::Transportability => write!(f, "transportability"),
            MechanismKind::Confounding => write!(f, "confounding"),
            MechanismKind::SelectionType1 => write!(f, "selection-type-1"),
            MechanismKind::SelectionType2 => write!(f, "selection-type-2"),
            MechanismKind::Combination(parts) => {
                for (i, part) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, "+")?;
                    }
                    write!(f, "{part}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for MechanismKind {
    type Err = Error;

    /// Parses `no-bias | transportability | confounding | selection-type-1 |
    /// selection-type-2`, or a `+`-joined combination of the biased kinds.
    fn from_str(s: &str) -> Result<Self> {
        fn atom(s: &str) -> Result<MechanismKind> {
            match s.trim().to_ascii_lowercase().as_str() {
                "no-bias" => Ok(MechanismKind::NoBias),
                "transportability" => Ok(MechanismKind::Transportability),
                "confounding" => Ok(MechanismKind::Confounding),
                "selection-type-1" => Ok(MechanismKind::SelectionType1),
                "selection-type-2" => Ok(MechanismKind::SelectionType2),
                other => Err(Error::Config(format!(
                    "unknown mechanism '{other}' (expected no-bias, transportability, \
                     confounding, selection-type-1 or selection-type-2, optionally joined by '+')"
                ))),
            }
        }
        let kind = if s.contains('+') {
            MechanismKind::Combination(s.split('+').map(atom).collect::<Result<Vec<_>>>()?)
        } else {
            atom(s)?
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// Which of the four downstream Bernoulli parameters read the latent U.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UBiasFlags {
    pub s: bool,
    pub a: bool,
    pub y0: bool,
    pub y1: bool,
}

impl UBiasFlags {
    /// Union of the flags each atomic mechanism sets: transportability and
    /// both U-driven mechanisms bias Y(1); confounding additionally biases
    /// A; type-1 selection additionally biases S. Collider selection sets
    /// nothing (its S-model bypasses the table).
    pub fn for_kind(kind: &MechanismKind) -> UBiasFlags {
        let mut flags = UBiasFlags::default();
        for part in kind.parts() {
            match part {
                MechanismKind::NoBias | MechanismKind::SelectionType2 => {}
                MechanismKind::Transportability => flags.y1 = true,
                MechanismKind::Confounding => {
                    flags.a = true;
                    flags.y1 = true;
                }
                MechanismKind::SelectionType1 => {
                    flags.s = true;
                    flags.y1 = true;
                }
                MechanismKind::Combination(_) => unreachable!("combinations are not nested"),
            }
        }
        flags
    }

    pub fn get(&self, t: Downstream) -> bool {
        match t {
            Downstream::S => self.s,
            Downstream::A => self.a,
            Downstream::Y0 => self.y0,
            Downstream::Y1 => self.y1,
        }
    }
}

/// The four downstream variables whose per-cell Bernoulli parameters the
/// table-construction algorithms draw, in their fixed draw order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downstream {
    S,
    A,
    Y0,
    Y1,
}

pub const DOWNSTREAM_ORDER: [Downstream; 4] =
    [Downstream::S, Downstream::A, Downstream::Y0, Downstream::Y1];

/// P(S = 1 | Y = y, A = a) for collider-type selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTable {
    /// probs[y][a]
    probs: [[f64; 2]; 2],
}

impl SelectionTable {
    /// Entries are (p00, p01, p10, p11) with the first index Y, the second A.
    pub fn new(p00: f64, p01: f64, p10: f64, p11: f64) -> Result<Self> {
        for (name, p) in [("p00", p00), ("p01", p01), ("p10", p10), ("p11", p11)] {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::Config(format!(
                    "selection table entry {name} must lie in [0, 1], got {p}"
                )));
            }
        }
        Ok(SelectionTable { probs: [[p00, p01], [p10, p11]] })
    }

    pub fn constant(p: f64) -> Result<Self> {
        SelectionTable::new(p, p, p, p)
    }

    pub fn get(&self, y: u8, a: u8) -> f64 {
        self.probs[y as usize][a as usize]
    }

    pub fn as_tuple(&self) -> (f64, f64, f64, f64) {
        (self.probs[0][0], self.probs[0][1], self.probs[1][0], self.probs[1][1])
    }
}

// ---------------------------------------------------------------------------
// MechanismSpec: a fully resolved generative specification
// ---------------------------------------------------------------------------

/// Everything needed to build probability tables and sample cohorts for one
/// run: the mechanism, the latent-variable model, the covariate dimension,
/// the F-family parameter, and the mechanism-specific extras (per-cell
/// P(U = 1 | X, R) under transportability, the collider table under type-2
/// selection).
#[derive(Clone, Debug, PartialEq)]
pub struct MechanismSpec {
    pub kind: MechanismKind,
    pub u_bias_flags: UBiasFlags,
    pub u_model: UModel,
    pub d: usize,
    pub f_param: f64,
    /// P(U = 1 | X = x, R): cell-indexed under transportability, otherwise
    /// a flat 1/2 in both populations.
    p_u_rct: Option<Vec<f64>>,
    p_u_os: Option<Vec<f64>>,
    selection_table: Option<SelectionTable>,
}

impl MechanismSpec {
    /// Resolve a mechanism into a concrete spec, drawing the per-cell
    /// U-distributions where transportability requires them (RCT cells
    /// first, then observational, in cell order).
    pub fn build<R: Rng + ?Sized>(
        kind: MechanismKind,
        u_model: UModel,
        d: usize,
        f_param: f64,
        selection_table: Option<SelectionTable>,
        rng: &mut R,
    ) -> Result<Self> {
        kind.validate()?;
        if d > MAX_D {
            return Err(Error::Capacity(format!(
                "covariate dimension d = {d} exceeds the supported maximum {MAX_D}"
            )));
        }
        let f = FDistribution::new(f_param)?;
        let transport = kind.includes(&MechanismKind::Transportability);
        if transport && u_model == UModel::ContinuousU {
            return Err(Error::Config(
                "transportability requires binary U: the per-cell P(U=1 | X, R) shift has no \
                 continuous-U counterpart"
                    .into(),
            ));
        }
        let collider = kind.includes(&MechanismKind::SelectionType2);
        let selection_table = match (collider, selection_table) {
            (true, Some(t)) => Some(t),
            (true, None) => {
                return Err(Error::Config(
                    "selection-type-2 needs a selection table P(S=1 | Y, A)".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(Error::Config(
                    "a selection table was given but no selection-type-2 mechanism is active".into(),
                ))
            }
            (false, None) => None,
        };
        let n_cells = 1usize << d;
        let (p_u_rct, p_u_os) = if transport {
            let rct: Vec<f64> = (0..n_cells).map(|_| f.sample(rng)).collect();
            let os: Vec<f64> = (0..n_cells).map(|_| f.sample(rng)).collect();
            (Some(rct), Some(os))
        } else {
            (None, None)
        };
        Ok(MechanismSpec {
            u_bias_flags: UBiasFlags::for_kind(&kind),
            kind,
            u_model,
            d,
            f_param,
            p_u_rct,
            p_u_os,
            selection_table,
        })
    }

    pub fn n_cells(&self) -> usize {
        1usize << self.d
    }

    /// P(U = 1 | X = cell, R = population). Flat 1/2 unless transportability
    /// drew per-cell values.
    pub fn p_u(&self, population: Population, cell: u32) -> f64 {
        let table = match population {
            Population::Rct => &self.p_u_rct,
            Population::Os => &self.p_u_os,
        };
        match table {
            Some(t) => t[cell as usize],
            None => 0.5,
        }
    }

    pub fn includes(&self, kind: &MechanismKind) -> bool {
        self.kind.includes(kind)
    }

    /// True when S is governed by the collider table (alone or as part of a
    /// combination).
    pub fn collider_selection(&self) -> bool {
        self.includes(&MechanismKind::SelectionType2)
    }

    pub fn selection_table(&self) -> Option<&SelectionTable> {
        self.selection_table.as_ref()
    }

    /// P(S = 1 | x, u, y, a) in the observational population. Pure type-2
    /// reads only the collider table; the type-1+type-2 combination passes
    /// both stages, so the probabilities multiply.
    pub fn selection_prob(&self, tables: &ProbabilityTables, cell: u32, u: f64, y: u8, a: u8) -> f64 {
        match self.selection_table {
            None => tables.at_u(Downstream::S, cell, u),
            Some(t) => {
                let base = t.get(y, a);
                if self.includes(&MechanismKind::SelectionType1) {
                    base * tables.at_u(Downstream::S, cell, u)
                } else {
                    base
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Probability tables
// ---------------------------------------------------------------------------

/// Per-cell Bernoulli parameters for S, A, Y(0), Y(1).
///
/// Each entry is a pair: for binary U the parameter at U = 0 and U = 1, for
/// continuous U the endpoints interpolated linearly in u. Unflagged targets
/// store the same value twice, making "does not read U" a checkable
/// invariant rather than a convention.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityTables {
    d: usize,
    u_model: UModel,
    s: Vec<(f64, f64)>,
    a: Vec<(f64, f64)>,
    y0: Vec<(f64, f64)>,
    y1: Vec<(f64, f64)>,
}

impl ProbabilityTables {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn u_model(&self) -> UModel {
        self.u_model
    }

    pub fn n_cells(&self) -> usize {
        1usize << self.d
    }

    fn target(&self, t: Downstream) -> &[(f64, f64)] {
        match t {
            Downstream::S => &self.s,
            Downstream::A => &self.a,
            Downstream::Y0 => &self.y0,
            Downstream::Y1 => &self.y1,
        }
    }

    /// Raw stored pair for one target and cell.
    pub fn pair(&self, t: Downstream, cell: u32) -> (f64, f64) {
        self.target(t)[cell as usize]
    }

    /// Parameter at a realized u: index for binary U (u must be 0.0 or
    /// 1.0), linear interpolation for continuous U.
    pub fn at_u(&self, t: Downstream, cell: u32, u: f64) -> f64 {
        let (p0, p1) = self.pair(t, cell);
        match self.u_model {
            UModel::BinaryU => {
                debug_assert!(u == 0.0 || u == 1.0, "binary U must be 0 or 1, got {u}");
                if u >= 0.5 {
                    p1
                } else {
                    p0
                }
            }
            UModel::ContinuousU => p0 + (p1 - p0) * u,
        }
    }

    /// Parameter of the realized potential outcome Y(a).
    pub fn outcome_at_u(&self, a: u8, cell: u32, u: f64) -> f64 {
        let t = if a == 1 { Downstream::Y1 } else { Downstream::Y0 };
        self.at_u(t, cell, u)
    }
}

fn draw_tables<R: Rng + ?Sized>(spec: &MechanismSpec, rng: &mut R) -> Result<ProbabilityTables> {
    let f = FDistribution::new(spec.f_param)?;
    let n_cells = spec.n_cells();
    let mut s = Vec::with_capacity(n_cells);
    let mut a = Vec::with_capacity(n_cells);
    let mut y0 = Vec::with_capacity(n_cells);
    let mut y1 = Vec::with_capacity(n_cells);
    for _ in 0..n_cells {
        // Fixed draw order within a cell: S, A, Y0, Y1; the second draw
        // happens only for U-flagged targets, so unflagged tables are
        // constant in U by construction.
        for t in DOWNSTREAM_ORDER {
            let p0 = f.sample(rng);
            let p1 = if spec.u_bias_flags.get(t) { f.sample(rng) } else { p0 };
            match t {
                Downstream::S => s.push((p0, p1)),
                Downstream::A => a.push((p0, p1)),
                Downstream::Y0 => y0.push((p0, p1)),
                Downstream::Y1 => y1.push((p0, p1)),
            }
        }
    }
    Ok(ProbabilityTables { d: spec.d, u_model: spec.u_model, s, a, y0, y1 })
}

/// Draw per-cell tables for binary U: one parameter per U level, equal for
/// targets the mechanism does not flag.
pub fn build_tables_binary<R: Rng + ?Sized>(
    spec: &MechanismSpec,
    rng: &mut R,
) -> Result<ProbabilityTables> {
    if spec.u_model != UModel::BinaryU {
        return Err(Error::Config("spec uses continuous U; call build_tables_continuous".into()));
    }
    draw_tables(spec, rng)
}

/// Draw per-cell tables for continuous U: flagged targets store endpoint
/// pairs with the realized parameter interpolated at u; unflagged targets
/// a single draw used for all u.
pub fn build_tables_continuous<R: Rng + ?Sized>(
    spec: &MechanismSpec,
    rng: &mut R,
) -> Result<ProbabilityTables> {
    if spec.u_model != UModel::ContinuousU {
        return Err(Error::Config("spec uses binary U; call build_tables_binary".into()));
    }
    draw_tables(spec, rng)
}

/// Dispatch on the spec's U model.
pub fn build_tables<R: Rng + ?Sized>(spec: &MechanismSpec, rng: &mut R) -> Result<ProbabilityTables> {
    match spec.u_model {
        UModel::BinaryU => build_tables_binary(spec, rng),
        UModel::ContinuousU => build_tables_continuous(spec, rng),
    }
}

// ---------------------------------------------------------------------------
// Cohorts
// ---------------------------------------------------------------------------

/// Covariate storage: synthetic cohorts pack binary covariates as cell
/// indices (bit j carries X(j)); ingested data may instead hold real-valued
/// rows.
#[derive(Clone, Debug, PartialEq)]
pub enum Covariates {
    Cells(Vec<u32>),
    /// Row-major, `d` values per row.
    Real(Vec<f64>),
}

/// One cohort: covariates plus (s, a, y) per row, with the latent state kept
/// separately. The public accessors expose the masked analyst view — `a`
/// and `y` only where s = 1 — while the `latent_*` accessors expose the
/// generative oracle view for validation code.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    population: Population,
    d: usize,
    xs: Covariates,
    u: Option<Vec<f64>>,
    s: Vec<u8>,
    a: Vec<Option<u8>>,
    y: Vec<Option<u8>>,
}

impl Cohort {
    /// Assemble a freshly generated cohort (full latent state retained).
    fn new_synthetic(
        population: Population,
        d: usize,
        cells: Vec<u32>,
        u: Vec<f64>,
        s: Vec<u8>,
        a: Vec<u8>,
        y: Vec<u8>,
    ) -> Self {
        let a = a.into_iter().map(Some).collect();
        let y = y.into_iter().map(Some).collect();
        Cohort { population, d, xs: Covariates::Cells(cells), u: Some(u), s, a, y }
    }

    /// Assemble a cohort from observed data, enforcing the availability
    /// rule: a and y are present exactly on the rows with s = 1.
    pub fn from_observed(
        population: Population,
        d: usize,
        xs: Covariates,
        s: Vec<u8>,
        a: Vec<Option<u8>>,
        y: Vec<Option<u8>>,
    ) -> Result<Self> {
        let n = s.len();
        let n_x = match &xs {
            Covariates::Cells(c) => c.len(),
            Covariates::Real(r) => {
                if d == 0 || r.len() % d != 0 {
                    return Err(Error::Data(format!(
                        "real covariate storage of length {} does not tile d = {d}",
                        r.len()
                    )));
                }
                r.len() / d
            }
        };
        if n_x != n || a.len() != n || y.len() != n {
            return Err(Error::Data(format!(
                "column lengths disagree: x {n_x}, s {n}, a {}, y {}",
                a.len(),
                y.len()
            )));
        }
        if d > MAX_D {
            return Err(Error::Capacity(format!("d = {d} exceeds the supported maximum {MAX_D}")));
        }
        if let Covariates::Cells(cells) = &xs {
            let limit = 1u64 << d;
            if let Some(bad) = cells.iter().find(|&&c| (c as u64) >= limit) {
                return Err(Error::Data(format!("cell index {bad} out of range for d = {d}")));
            }
        }
        for i in 0..n {
            if s[i] > 1 {
                return Err(Error::Data(format!("row {i}: s must be 0 or 1, got {}", s[i])));
            }
            let present = a[i].is_some() && y[i].is_some();
            let absent = a[i].is_none() && y[i].is_none();
            if s[i] == 1 && !present {
                return Err(Error::Data(format!("row {i}: s = 1 but a or y is missing")));
            }
            if s[i] == 0 && !absent {
                return Err(Error::Data(format!("row {i}: a and y must be empty when s = 0")));
            }
            for (name, v) in [("a", a[i]), ("y", y[i])] {
                if let Some(v) = v {
                    if v > 1 {
                        return Err(Error::Data(format!("row {i}: {name} must be 0 or 1, got {v}")));
                    }
                }
            }
        }
        Ok(Cohort { population, d, xs, u: None, s, a, y })
    }

    pub fn population(&self) -> Population {
        self.population
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// True when covariates are binary cells (frequency tables apply).
    pub fn is_binary(&self) -> bool {
        matches!(self.xs, Covariates::Cells(_))
    }

    pub fn cells(&self) -> Option<&[u32]> {
        match &self.xs {
            Covariates::Cells(c) => Some(c),
            Covariates::Real(_) => None,
        }
    }

    pub fn covariates(&self) -> &Covariates {
        &self.xs
    }

    /// Copy row i's covariates into `out` as f64 features (bit-decoded for
    /// binary storage).
    pub fn feature_row(&self, i: usize, out: &mut [f64]) {
        assert_eq!(out.len(), self.d);
        match &self.xs {
            Covariates::Cells(cells) => {
                let cell = cells[i];
                for (j, slot) in out.iter_mut().enumerate() {
                    *slot = ((cell >> j) & 1) as f64;
                }
            }
            Covariates::Real(rows) => {
                out.copy_from_slice(&rows[i * self.d..(i + 1) * self.d]);
            }
        }
    }

    pub fn s(&self, i: usize) -> u8 {
        self.s[i]
    }

    /// Masked view: treatment is visible only on selected rows.
    pub fn a(&self, i: usize) -> Option<u8> {
        if self.s[i] == 1 {
            self.a[i]
        } else {
            None
        }
    }

    /// Masked view: outcome is visible only on selected rows.
    pub fn y(&self, i: usize) -> Option<u8> {
        if self.s[i] == 1 {
            self.y[i]
        } else {
            None
        }
    }

    /// Oracle view of the latent U (synthetic cohorts only).
    pub fn latent_u(&self, i: usize) -> Option<f64> {
        self.u.as_ref().map(|u| u[i])
    }

    pub fn has_latent_u(&self) -> bool {
        self.u.is_some()
    }

    /// Oracle view of the stored treatment, ignoring selection.
    pub fn latent_a(&self, i: usize) -> Option<u8> {
        self.a[i]
    }

    /// Oracle view of the stored outcome, ignoring selection.
    pub fn latent_y(&self, i: usize) -> Option<u8> {
        self.y[i]
    }

    /// A copy with the latent state scrubbed: no u, and a/y erased wherever
    /// s = 0. Estimators see the same data either way; exports use this.
    pub fn masked(&self) -> Cohort {
        let mut out = self.clone();
        out.u = None;
        for i in 0..out.s.len() {
            if out.s[i] == 0 {
                out.a[i] = None;
                out.y[i] = None;
            }
        }
        out
    }

    /// A new cohort holding the given rows in the given order.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        let xs = match &self.xs {
            Covariates::Cells(cells) => {
                Covariates::Cells(indices.iter().map(|&i| cells[i]).collect())
            }
            Covariates::Real(rows) => {
                let mut out = Vec::with_capacity(indices.len() * self.d);
                for &i in indices {
                    out.extend_from_slice(&rows[i * self.d..(i + 1) * self.d]);
                }
                Covariates::Real(out)
            }
        };
        Cohort {
            population: self.population,
            d: self.d,
            xs,
            u: self.u.as_ref().map(|u| indices.iter().map(|&i| u[i]).collect()),
            s: indices.iter().map(|&i| self.s[i]).collect(),
            a: indices.iter().map(|&i| self.a[i]).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// A copy with binary cells widened to real-valued feature storage,
    /// for pairing with a continuous-covariate file (logistic-only path).
    pub fn to_real(&self) -> Cohort {
        let mut out = self.clone();
        if let Covariates::Cells(cells) = &self.xs {
            let mut rows = Vec::with_capacity(cells.len() * self.d);
            for &cell in cells {
                for j in 0..self.d {
                    rows.push(((cell >> j) & 1) as f64);
                }
            }
            out.xs = Covariates::Real(rows);
        }
        out
    }
}

/// Sample n covariate cells for one population (independent Bernoulli bits;
/// bit j of the cell index carries X(j)).
pub fn sample_covariates<R: Rng + ?Sized>(
    n: usize,
    population: Population,
    d: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    if d > MAX_D {
        return Err(Error::Capacity(format!("d = {d} exceeds the supported maximum {MAX_D}")));
    }
    let p1 = match population {
        Population::Rct => P_X1_RCT,
        Population::Os => P_X1_OS,
    };
    let mut cells = Vec::with_capacity(n);
    for _ in 0..n {
        let mut cell = 0u32;
        for j in 0..d {
            if rng.random::<f64>() < p1 {
                cell |= 1 << j;
            }
        }
        cells.push(cell);
    }
    Ok(cells)
}

/// Generate one cohort under the spec's mechanism.
///
/// Per row the draw order is fixed: covariate bits, then u (one uniform),
/// then A, then the realized potential outcome Y(A); observational rows
/// draw S last so collider selection can read (Y, A). RCT rows have S ≡ 1
/// and A ~ Bernoulli(1/2).
pub fn generate_cohort<R: Rng + ?Sized>(
    tables: &ProbabilityTables,
    spec: &MechanismSpec,
    population: Population,
    n: usize,
    rng: &mut R,
) -> Result<Cohort> {
    if tables.d() != spec.d || tables.u_model() != spec.u_model {
        return Err(Error::Config("probability tables do not match the mechanism spec".into()));
    }
    let cells = sample_covariates(n, population, spec.d, rng)?;
    let mut u = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for &cell in &cells {
        let v = rng.random::<f64>();
        let ui = match spec.u_model {
            UModel::BinaryU => {
                if v < spec.p_u(population, cell) {
                    1.0
                } else {
                    0.0
                }
            }
            UModel::ContinuousU => v,
        };
        let (si, ai, yi) = match population {
            Population::Rct => {
                let ai = (rng.random::<f64>() < 0.5) as u8;
                let yi = (rng.random::<f64>() < tables.outcome_at_u(ai, cell, ui)) as u8;
                (1u8, ai, yi)
            }
            Population::Os => {
                let ai = (rng.random::<f64>() < tables.at_u(Downstream::A, cell, ui)) as u8;
                let yi = (rng.random::<f64>() < tables.outcome_at_u(ai, cell, ui)) as u8;
                let p_sel = spec.selection_prob(tables, cell, ui, yi, ai);
                let si = (rng.random::<f64>() < p_sel) as u8;
                (si, ai, yi)
            }
        };
        u.push(ui);
        s.push(si);
        a.push(ai);
        y.push(yi);
    }
    Ok(Cohort::new_synthetic(population, spec.d, cells, u, s, a, y))
}
