//! Goal-distribution algebra.
//!
//! Position goals live in axis-aligned uniform boxes, amount goals in finite
//! 1-D discrete distributions. Both are moved from an easy initial
//! distribution towards the desired one by a temporal factor `k`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target or achieved goal: container position plus fill fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalState {
    pub position: Vec<f64>,
    pub amount: f64,
}

impl GoalState {
    pub fn new(position: Vec<f64>, amount: f64) -> Result<Self> {
        if position.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidGoal("position has non-finite components".into()));
        }
        if !(0.0..=1.0).contains(&amount) {
            return Err(Error::InvalidGoal(format!("amount {amount} outside [0, 1]")));
        }
        Ok(Self { position, amount })
    }

    pub fn dim(&self) -> usize {
        self.position.len()
    }

    /// Flattened `position ‖ amount`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.position.clone();
        v.push(self.amount);
        v
    }

    pub fn position_distance(&self, other: &GoalState) -> f64 {
        self.position
            .iter()
            .zip(&other.position)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Uniform distribution over the box `[lower, upper]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoxDistribution {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<RawBox> for BoxDistribution {
    type Error = Error;
    fn try_from(raw: RawBox) -> Result<Self> {
        BoxDistribution::new(raw.lower, raw.upper)
    }
}

impl From<BoxDistribution> for RawBox {
    fn from(b: BoxDistribution) -> Self {
        RawBox { lower: b.lower, upper: b.upper }
    }
}

impl BoxDistribution {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        if lower.iter().chain(&upper).any(|v| !v.is_finite()) {
            return Err(Error::InvalidDistribution("box bounds must be finite".into()));
        }
        if let Some(i) = (0..lower.len()).find(|&i| lower[i] > upper[i]) {
            return Err(Error::InvalidDistribution(format!(
                "lower[{i}] = {} exceeds upper[{i}] = {}",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    /// Degenerate box concentrated on one point.
    pub fn point(p: Vec<f64>) -> Result<Self> {
        Self::new(p.clone(), p)
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter().enumerate().all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }

    /// Smallest box covering both `self` and `other`.
    pub fn union_cover(&self, other: &BoxDistribution) -> Result<BoxDistribution> {
        check_dim(self.dim(), other.dim())?;
        let lower = self.lower.iter().zip(&other.lower).map(|(a, b)| a.min(*b)).collect();
        let upper = self.upper.iter().zip(&other.upper).map(|(a, b)| a.max(*b)).collect();
        BoxDistribution::new(lower, upper)
    }
}

/// Finite distribution over fill fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDiscrete", into = "RawDiscrete")]
pub struct DiscreteDistribution {
    support: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDiscrete {
    support: Vec<f64>,
    weights: Vec<f64>,
}

impl TryFrom<RawDiscrete> for DiscreteDistribution {
    type Error = Error;
    fn try_from(raw: RawDiscrete) -> Result<Self> {
        DiscreteDistribution::new(raw.support, raw.weights)
    }
}

impl From<DiscreteDistribution> for RawDiscrete {
    fn from(d: DiscreteDistribution) -> Self {
        RawDiscrete { support: d.support, weights: d.weights }
    }
}

const WEIGHT_SUM_TOL: f64 = 1e-12;

impl DiscreteDistribution {
    pub fn new(support: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if support.len() != weights.len() {
            return Err(Error::DimensionMismatch { expected: support.len(), got: weights.len() });
        }
        if support.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        if support.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidDistribution("support values must lie in [0, 1]".into()));
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidDistribution("support must be strictly increasing".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidDistribution(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { support, weights })
    }

    pub fn point(x: f64) -> Result<Self> {
        Self::new(vec![x], vec![1.0])
    }

    /// Equal weights over `support` (sorted and deduplicated first).
    pub fn uniform(support: &[f64]) -> Result<Self> {
        let mut s = support.to_vec();
        s.sort_by(f64::total_cmp);
        s.dedup();
        let w = vec![1.0 / s.len() as f64; s.len()];
        Self::new(s, w)
    }

    /// Mass `zero_weight` at 0 and the remainder spread evenly over `amounts`.
    pub fn with_zero_mass(amounts: &[f64], zero_weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&zero_weight) {
            return Err(Error::InvalidDistribution(format!("zero weight {zero_weight} outside [0, 1]")));
        }
        let mut s = amounts.to_vec();
        s.sort_by(f64::total_cmp);
        s.dedup();
        if s.first() == Some(&0.0) {
            return Err(Error::InvalidDistribution("amount list already contains 0".into()));
        }
        let each = (1.0 - zero_weight) / s.len() as f64;
        let mut support = vec![0.0];
        let mut weights = vec![zero_weight];
        for a in s {
            support.push(a);
            weights.push(each);
        }
        Self::new(support, weights)
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Probability mass at exactly `x`.
    pub fn mass_at(&self, x: f64) -> f64 {
        self.support
            .iter()
            .position(|s| *s == x)
            .map_or(0.0, |i| self.weights[i])
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.weights).map(|(s, w)| s * w).sum()
    }

    /// Left-continuous quantile function on `(0, 1]`.
    pub fn quantile(&self, u: f64) -> f64 {
        let mut acc = 0.0;
        for (s, w) in self.support.iter().zip(&self.weights) {
            acc += w;
            if u <= acc && *w > 0.0 {
                return *s;
            }
        }
        self.last_positive()
    }

    fn last_positive(&self) -> f64 {
        self.support
            .iter()
            .zip(&self.weights)
            .rev()
            .find(|(_, w)| **w > 0.0)
            .map_or(self.support[self.support.len() - 1], |(s, _)| *s)
    }
}

/// Curriculum progress in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct TemporalFactor(f64);

impl TemporalFactor {
    pub fn new(k: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&k) {
            return Err(Error::TemporalFactorRange(k));
        }
        Ok(Self(k))
    }

    pub const ZERO: TemporalFactor = TemporalFactor(0.0);
    pub const ONE: TemporalFactor = TemporalFactor(1.0);

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for TemporalFactor {
    type Error = Error;
    fn try_from(k: f64) -> Result<Self> {
        TemporalFactor::new(k)
    }
}

/// How amount distributions are interpolated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationMode {
    /// Convex combination of weights on the union support.
    #[default]
    Mixture,
    /// Quantile (displacement) interpolation, the 1-D W2 geodesic.
    Displacement,
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Closed-form W2 geodesic between uniform boxes: both corners move linearly.
pub fn interpolate_box(
    rho0: &BoxDistribution,
    rhog: &BoxDistribution,
    k: TemporalFactor,
) -> Result<BoxDistribution> {
    check_dim(rho0.dim(), rhog.dim())?;
    let k = k.value();
    let lerp = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| (1.0 - k) * x + k * y).collect()
    };
    let lower = lerp(&rho0.lower, &rhog.lower);
    let mut upper = lerp(&rho0.upper, &rhog.upper);
    // Rounding can put upper one ulp below lower when both corners coincide.
    for (u, l) in upper.iter_mut().zip(&lower) {
        if *u < *l {
            *u = *l;
        }
    }
    BoxDistribution::new(lower, upper)
}

pub fn interpolate_discrete(
    rho0: &DiscreteDistribution,
    rhog: &DiscreteDistribution,
    k: TemporalFactor,
    mode: InterpolationMode,
) -> Result<DiscreteDistribution> {
    let k = k.value();
    if k == 0.0 {
        return Ok(rho0.clone());
    }
    if k == 1.0 {
        return Ok(rhog.clone());
    }
    match mode {
        InterpolationMode::Mixture => Ok(mixture(rho0, rhog, k)),
        InterpolationMode::Displacement => displacement(rho0, rhog, k),
    }
}

fn mixture(rho0: &DiscreteDistribution, rhog: &DiscreteDistribution, k: f64) -> DiscreteDistribution {
    let mut support: Vec<f64> = rho0.support.iter().chain(&rhog.support).copied().collect();
    support.sort_by(f64::total_cmp);
    support.dedup();
    let weights = support
        .iter()
        .map(|&s| (1.0 - k) * rho0.mass_at(s) + k * rhog.mass_at(s))
        .collect();
    DiscreteDistribution { support, weights }
}

/// Mass below this is treated as a rounding artifact of the CDF merge.
const MASS_FLOOR: f64 = 1e-14;

/// Pairs the two distributions' mass in sorted order (monotone coupling) and
/// yields `(mass, x0, xg)` for every matched piece.
fn monotone_coupling(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::with_capacity(p.support.len() + q.support.len());
    let (mut i, mut j) = (0usize, 0usize);
    let (mut rem_p, mut rem_q) = (p.weights[0], q.weights[0]);
    loop {
        let m = rem_p.min(rem_q);
        if m > 0.0 {
            out.push((m, p.support[i], q.support[j]));
        }
        rem_p -= m;
        rem_q -= m;
        let advance_p = rem_p <= MASS_FLOOR && i + 1 < p.support.len();
        let advance_q = rem_q <= MASS_FLOOR && j + 1 < q.support.len();
        if !advance_p && !advance_q {
            break;
        }
        if advance_p {
            i += 1;
            rem_p += p.weights[i];
        }
        if advance_q {
            j += 1;
            rem_q += q.weights[j];
        }
    }
    out
}

fn displacement(
    rho0: &DiscreteDistribution,
    rhog: &DiscreteDistribution,
    k: f64,
) -> Result<DiscreteDistribution> {
    let mut support: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for (m, x0, xg) in monotone_coupling(rho0, rhog) {
        if m <= MASS_FLOOR {
            continue;
        }
        let x = ((1.0 - k) * x0 + k * xg).clamp(0.0, 1.0);
        match support.last() {
            Some(&last) if x <= last => *weights.last_mut().unwrap() += m,
            _ => {
                support.push(x);
                weights.push(m);
            }
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    DiscreteDistribution::new(support, weights)
}

/// Uniform coordinate in `[lower[i], upper[i]]` for every axis.
pub fn sample_position<R: Rng + ?Sized>(dist: &BoxDistribution, rng: &mut R) -> Vec<f64> {
    dist.lower
        .iter()
        .zip(&dist.upper)
        .map(|(lo, hi)| {
            let u: f64 = rng.random();
            (lo + u * (hi - lo)).min(*hi)
        })
        .collect()
}

pub fn sample_amount<R: Rng + ?Sized>(dist: &DiscreteDistribution, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (s, w) in dist.support.iter().zip(&dist.weights) {
        acc += w;
        if u < acc {
            return *s;
        }
    }
    dist.last_positive()
}

pub fn sample_goal<R: Rng + ?Sized>(
    positions: &BoxDistribution,
    amounts: &DiscreteDistribution,
    rng: &mut R,
) -> GoalState {
    let position = sample_position(positions, rng);
    let amount = sample_amount(amounts, rng);
    GoalState { position, amount }
}

/// A one-dimensional distribution accepted by [`wasserstein2_1d`].
#[derive(Clone, Copy, Debug)]
pub enum Dist1d<'a> {
    Discrete(&'a DiscreteDistribution),
    Uniform { lo: f64, hi: f64 },
}

impl Dist1d<'_> {
    fn quantile(&self, u: f64) -> f64 {
        match self {
            Dist1d::Discrete(d) => d.quantile(u),
            Dist1d::Uniform { lo, hi } => lo + u * (hi - lo),
        }
    }
}

/// W2 distance between two 1-D distributions via their quantile functions.
///
/// Discrete/discrete pairs are computed exactly from the monotone coupling;
/// anything involving a uniform uses the midpoint rule on `n_quantiles` levels.
pub fn wasserstein2_1d(p: Dist1d<'_>, q: Dist1d<'_>, n_quantiles: usize) -> f64 {
    if let (Dist1d::Discrete(a), Dist1d::Discrete(b)) = (p, q) {
        let sq: f64 = monotone_coupling(a, b)
            .into_iter()
            .map(|(m, x, y)| m * (x - y) * (x - y))
            .sum();
        return sq.max(0.0).sqrt();
    }
    let n = n_quantiles.max(1);
    let sq: f64 = (0..n)
        .map(|i| {
            let u = (i as f64 + 0.5) / n as f64;
            let d = p.quantile(u) - q.quantile(u);
            d * d
        })
        .sum::<f64>()
        / n as f64;
    sq.sqrt()
}

/// W2 between two boxes: per-axis 1-D distances combined in quadrature.
pub fn wasserstein2_box(a: &BoxDistribution, b: &BoxDistribution, n_quantiles: usize) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    let sq: f64 = (0..a.dim())
        .map(|i| {
            let w = wasserstein2_1d(
                Dist1d::Uniform { lo: a.lower[i], hi: a.upper[i] },
                Dist1d::Uniform { lo: b.lower[i], hi: b.upper[i] },
                n_quantiles,
            );
            w * w
        })
        .sum();
    Ok(sq.sqrt())
}

/// Position-gated shaped reward: `1(|dp| <= eps) * (1 - |da|) - 1`.
pub fn reward_factorized(achieved: &GoalState, desired: &GoalState, epsilon: f64) -> f64 {
    let reached = achieved.position_distance(desired) <= epsilon;
    let indicator = if reached { 1.0 } else { 0.0 };
    indicator * (1.0 - (achieved.amount - desired.amount).abs()) - 1.0
}

/// Binary reward: 0 when both position and amount are within tolerance, else -1.
pub fn reward_sparse(achieved: &GoalState, desired: &GoalState, epsilon_pos: f64, epsilon_amt: f64) -> f64 {
    let pos_ok = achieved.position_distance(desired) <= epsilon_pos;
    let amt_ok = (achieved.amount - desired.amount).abs() <= epsilon_amt;
    if pos_ok && amt_ok {
        0.0
    } else {
        -1.0
    }
}

/// Reward function selection used by replay relabeling and the trainer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardFn {
    Factorized { epsilon: f64 },
    Sparse { epsilon_pos: f64, epsilon_amt: f64 },
}

impl Default for RewardFn {
    fn default() -> Self {
        RewardFn::Factorized { epsilon: 0.03 }
    }
}

impl RewardFn {
    pub fn eval(&self, achieved: &GoalState, desired: &GoalState) -> f64 {
        match *self {
            RewardFn::Factorized { epsilon } => reward_factorized(achieved, desired, epsilon),
            RewardFn::Sparse { epsilon_pos, epsilon_amt } => {
                reward_sparse(achieved, desired, epsilon_pos, epsilon_amt)
            }
        }
    }

    pub fn position_tolerance(&self) -> f64 {
        match *self {
            RewardFn::Factorized { epsilon } => epsilon,
            RewardFn::Sparse { epsilon_pos, .. } => epsilon_pos,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            RewardFn::Factorized { epsilon } => epsilon > 0.0,
            RewardFn::Sparse { epsilon_pos, epsilon_amt } => epsilon_pos > 0.0 && epsilon_amt > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("reward tolerances must be positive".into()))
        }
    }
}
