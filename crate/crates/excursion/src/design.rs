//! Weights and centered design rows for the excursion-effect estimators.
//!
//! Three weight families are built here:
//!
//! ```text
//! marginal    W_t      = p~(A_t | S_t) / p_t(A_t | H_t)
//! lag window  W_{t,Δ}  = Π_{u=t+1}^{t+Δ-1} π(A_u | H_u) / p(A_u | H_u)   (1 when Δ = 1)
//! pairwise    W_{t,j,j'} = p~(A_{t,j}, A_{t,j'} | S_t) / [p(A_{t,j}|H_t) p(A_{t,j'}|H_t)]
//! ```
//!
//! The numerator `p~` is an arbitrary probability in (0,1) that may depend
//! only on the moderators of interest; the pairwise numerator is either the
//! factorized product of marginal numerators or the empirical frequency of
//! the treatment pair within a (decision point, moderator stratum) cell.
//!
//! Centered design rows concatenate the control features with the centered
//! moderator features:
//!
//! ```text
//! direct    [ g_t(H_t),  (A_t - p~(1|S_t)) f_t(S_t) ]
//! indirect  [ g_t(H_t),  (1 - A_{t,j})(A_{t,j'} - p~*(1|S_t)) f_t(S_t) ]
//! ```
//!
//! with `p~*(1|S) = p~(0,1|S) / (p~(0,0|S) + p~(0,1|S))`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{MRTDataset, ObservationRow, Schema};

/// Clipping bound applied to empirical pair frequencies so the numerator
/// stays strictly inside (0,1).
pub const PAIR_FREQUENCY_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("weight plan error: {0}")]
    WeightPlan(String),
    #[error("lag-window error: {0}")]
    LagWindow(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("degenerate plan: {0}")]
    DegeneratePlan(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("model spec error: {0}")]
    Spec(String),
}

/// One term of a feature map. `Column` names a bound moderator column (for
/// `f`) or control column (for `g`); the cluster-level terms average a
/// moderator/control column over the members of the focal individual's
/// cluster at the same decision point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTerm {
    Intercept,
    Column(String),
    /// Mean over all cluster members, focal individual included.
    ClusterMean(String),
    /// Mean over the other cluster members, focal individual excluded.
    LeaveOneOutMean(String),
}

/// An ordered list of feature terms evaluated per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureMap {
    pub terms: Vec<FeatureTerm>,
}

impl FeatureMap {
    pub fn new(terms: Vec<FeatureTerm>) -> Self {
        FeatureMap { terms }
    }

    pub fn intercept_only() -> Self {
        FeatureMap { terms: vec![FeatureTerm::Intercept] }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Names of the plain `Column` terms, in order.
    pub fn column_names(&self) -> Vec<&str> {
        self.terms
            .iter()
            .filter_map(|t| match t {
                FeatureTerm::Column(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }
}

/// Which row value vector a feature map reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnSet {
    Moderators,
    Controls,
}

fn column_value(
    row: &ObservationRow,
    schema: &Schema,
    set: ColumnSet,
    name: &str,
) -> Result<f64, DesignError> {
    let idx = match set {
        ColumnSet::Moderators => schema.moderator_index(name),
        ColumnSet::Controls => schema.control_index(name),
    };
    let values = match set {
        ColumnSet::Moderators => &row.moderators,
        ColumnSet::Controls => &row.controls,
    };
    idx.map(|i| values[i]).ok_or_else(|| {
        DesignError::Spec(format!(
            "column `{name}` is not bound as a {} column",
            match set {
                ColumnSet::Moderators => "moderator",
                ColumnSet::Controls => "control",
            }
        ))
    })
}

impl FeatureMap {
    /// Evaluate the map for the member at `member_idx` using the rows of all
    /// cluster members at the same decision point (`peers`, in member order).
    pub fn eval(
        &self,
        schema: &Schema,
        set: ColumnSet,
        peers: &[&ObservationRow],
        member_idx: usize,
        out: &mut Vec<f64>,
    ) -> Result<(), DesignError> {
        out.clear();
        let row = peers[member_idx];
        for term in &self.terms {
            let v = match term {
                FeatureTerm::Intercept => 1.0,
                FeatureTerm::Column(name) => column_value(row, schema, set, name)?,
                FeatureTerm::ClusterMean(name) => {
                    let mut sum = 0.0;
                    for peer in peers {
                        sum += column_value(peer, schema, set, name)?;
                    }
                    sum / peers.len() as f64
                }
                FeatureTerm::LeaveOneOutMean(name) => {
                    if peers.len() < 2 {
                        return Err(DesignError::Spec(format!(
                            "leave-one-out mean of `{name}` undefined in a cluster of size 1"
                        )));
                    }
                    let mut sum = 0.0;
                    for (i, peer) in peers.iter().enumerate() {
                        if i != member_idx {
                            sum += column_value(peer, schema, set, name)?;
                        }
                    }
                    sum / (peers.len() - 1) as f64
                }
            };
            out.push(v);
        }
        Ok(())
    }
}

/// Moderator feature map `f` (dimension q) and control feature map `g`
/// (dimension p). `f` reads moderator columns, `g` reads control columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub f: FeatureMap,
    pub g: FeatureMap,
}

impl ModelSpec {
    /// Marginal-effect analysis: `f = [1]`, `g = [1, s]` for a single state
    /// column `s`.
    pub fn marginal(state_column: &str) -> Self {
        ModelSpec {
            f: FeatureMap::intercept_only(),
            g: FeatureMap::new(vec![
                FeatureTerm::Intercept,
                FeatureTerm::Column(state_column.to_string()),
            ]),
        }
    }

    pub fn q(&self) -> usize {
        self.f.len()
    }

    pub fn p(&self) -> usize {
        self.g.len()
    }

    pub fn check(&self) -> Result<(), DesignError> {
        if self.f.is_empty() || self.g.is_empty() {
            return Err(DesignError::Spec("feature maps must have at least one term".into()));
        }
        Ok(())
    }
}

/// Numerator `p~(1|S)` of the marginal weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNumerator {
    /// A fixed probability, the usual choice for marginal analyses.
    Constant(f64),
    /// Read `p~(1|S)` from a bound column; the special name `rand_prob`
    /// reproduces the randomization probability (weight identically 1).
    Column(String),
    /// Empirical frequency of the treatment pair within a (decision point,
    /// moderator stratum) cell; pairwise estimation only.
    EmpiricalPair,
}

/// Weight construction plan shared by all estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPlan {
    pub numerator: WeightNumerator,
    /// Whether the joint randomization of a pair factorizes into the product
    /// of the two marginal probabilities. Pairwise estimation requires this.
    #[serde(default = "default_true")]
    pub independent_pairs: bool,
}

fn default_true() -> bool {
    true
}

impl WeightPlan {
    pub fn constant(numerator: f64) -> Self {
        WeightPlan { numerator: WeightNumerator::Constant(numerator), independent_pairs: true }
    }

    pub fn empirical_pair() -> Self {
        WeightPlan { numerator: WeightNumerator::EmpiricalPair, independent_pairs: true }
    }

    /// Resolve the marginal numerator `p~(1|S)` for a row.
    pub fn numerator_prob(&self, row: &ObservationRow, schema: &Schema) -> Result<f64, DesignError> {
        let p = match &self.numerator {
            WeightNumerator::Constant(c) => *c,
            WeightNumerator::Column(name) => {
                if name == &schema.rand_prob || name == "rand_prob" {
                    row.rand_prob
                } else if let Some(i) = schema.moderator_index(name) {
                    row.moderators[i]
                } else if let Some(i) = schema.control_index(name) {
                    row.controls[i]
                } else {
                    return Err(DesignError::WeightPlan(format!(
                        "numerator column `{name}` is not bound"
                    )));
                }
            }
            WeightNumerator::EmpiricalPair => {
                return Err(DesignError::WeightPlan(
                    "empirical pair numerator is only defined for pairwise weights".into(),
                ))
            }
        };
        if p > 0.0 && p < 1.0 {
            Ok(p)
        } else {
            Err(DesignError::WeightPlan(format!("numerator {p} outside (0,1)")))
        }
    }
}

/// Reference distribution π for treatments in the lag window t+1..t+Δ-1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    /// π = p: the trial's own randomization; every lag weight is exactly 1.
    Observed,
    /// π = 1{a = 1}: the sequential-treatment regime.
    AlwaysTreat,
    /// π = 1{a = 0}.
    AlwaysControl,
    /// π(1 | u) read from a fixed sequence indexed by decision point (1-based).
    Fixed(Vec<f64>),
}

impl ReferencePolicy {
    /// π(a | H_u) at decision point `u`.
    fn prob(&self, u: u32, a: u8) -> Result<f64, DesignError> {
        Ok(match self {
            ReferencePolicy::Observed => unreachable!("observed policy short-circuits to 1"),
            ReferencePolicy::AlwaysTreat => {
                if a == 1 {
                    1.0
                } else {
                    0.0
                }
            }
            ReferencePolicy::AlwaysControl => {
                if a == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            ReferencePolicy::Fixed(seq) => {
                let pi = *seq.get(u as usize - 1).ok_or_else(|| {
                    DesignError::LagWindow(format!(
                        "fixed policy has no probability for decision point {u}"
                    ))
                })?;
                if !(0.0..=1.0).contains(&pi) {
                    return Err(DesignError::LagWindow(format!(
                        "fixed policy probability {pi} outside [0,1]"
                    )));
                }
                if a == 1 {
                    pi
                } else {
                    1.0 - pi
                }
            }
        })
    }
}

/// Marginal weight `W_t = p~(A_t|S_t) / p_t(A_t|H_t)` for one row.
pub fn marginal_weight(
    row: &ObservationRow,
    schema: &Schema,
    plan: &WeightPlan,
) -> Result<f64, DesignError> {
    let p_tilde_1 = plan.numerator_prob(row, schema)?;
    let (num, den) = if row.treatment == 1 {
        (p_tilde_1, row.rand_prob)
    } else {
        (1.0 - p_tilde_1, 1.0 - row.rand_prob)
    };
    Ok(num / den)
}

/// Lag-window weight `W_{t,Δ}` from the individual's rows at decision points
/// t+1..t+Δ-1 (`window`, in increasing t order). The window must be complete;
/// Δ = 1 corresponds to an empty window and a weight of exactly 1.
pub fn excursion_weight(
    window: &[&ObservationRow],
    expected_ts: &[u32],
    policy: &ReferencePolicy,
) -> Result<f64, DesignError> {
    if window.len() != expected_ts.len() {
        return Err(DesignError::LagWindow(format!(
            "window has {} row(s), expected {}",
            window.len(),
            expected_ts.len()
        )));
    }
    if matches!(policy, ReferencePolicy::Observed) {
        return Ok(1.0);
    }
    let mut w = 1.0;
    for (row, &u) in window.iter().zip(expected_ts) {
        if row.t != u {
            return Err(DesignError::LagWindow(format!(
                "missing future row at decision point {u}"
            )));
        }
        let pi = policy.prob(u, row.treatment)?;
        if pi == 0.0 {
            // Deterministic policies zero out non-conforming windows exactly.
            return Ok(0.0);
        }
        let p = if row.treatment == 1 { row.rand_prob } else { 1.0 - row.rand_prob };
        w *= pi / p;
    }
    Ok(w)
}

/// Centering probability for the indirect estimator,
/// `p~*(1|S) = p~(0,1|S) / (p~(0,0|S) + p~(0,1|S))`.
pub fn p_star(p00: f64, p01: f64) -> Result<f64, DesignError> {
    let denom = p00 + p01;
    if denom <= 0.0 {
        return Err(DesignError::DegeneratePlan(format!(
            "p~(0,0) + p~(0,1) = {denom} is not positive"
        )));
    }
    Ok(p01 / denom)
}

/// Empirical joint distribution of an ordered treatment pair, indexed as
/// `[p(0,0), p(0,1), p(1,0), p(1,1)]`.
pub type PairDistribution = [f64; 4];

fn pair_cell(a_j: u8, a_jp: u8) -> usize {
    (a_j as usize) * 2 + a_jp as usize
}

/// Clip each frequency into (ε, 1-ε) and renormalize to sum 1.
fn clip_and_normalize(mut freq: PairDistribution, eps: f64) -> PairDistribution {
    let mut sum = 0.0;
    for f in &mut freq {
        *f = f.clamp(eps, 1.0 - eps);
        sum += *f;
    }
    for f in &mut freq {
        *f /= sum;
    }
    freq
}

/// Stratum key for empirical pair frequencies: decision point plus the exact
/// values of the stratifying moderator columns for the focal and the other
/// individual. Without stratifying columns every pair at a decision point
/// shares one stratum.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PairStratum {
    pub t: u32,
    key: Vec<u64>,
}

impl PairStratum {
    pub fn new(t: u32, focal: &[f64], other: &[f64]) -> Self {
        let mut key = Vec::with_capacity(focal.len() + other.len());
        key.extend(focal.iter().map(|v| v.to_bits()));
        key.extend(other.iter().map(|v| v.to_bits()));
        PairStratum { t, key }
    }
}

/// Empirical pair-frequency tables per stratum.
#[derive(Debug, Clone, Default)]
pub struct PairFrequencyTable {
    strata: HashMap<PairStratum, PairDistribution>,
}

impl PairFrequencyTable {
    pub fn get(&self, stratum: &PairStratum) -> Option<&PairDistribution> {
        self.strata.get(stratum)
    }

    pub fn n_strata(&self) -> usize {
        self.strata.len()
    }
}

fn stratum_values(row: &ObservationRow, cols: &[usize]) -> Vec<f64> {
    cols.iter().map(|&i| row.moderators[i]).collect()
}

/// Tally treatment-pair frequencies over every ordered available pair in the
/// dataset, stratified by decision point and the given moderator columns
/// (indices into the schema's moderator list). Frequencies are clipped into
/// (ε, 1-ε) and renormalized.
pub fn empirical_pair_frequencies(
    ds: &MRTDataset,
    strat_cols: &[usize],
    eps: f64,
) -> PairFrequencyTable {
    let mut counts: HashMap<PairStratum, [u64; 4]> = HashMap::new();
    for cluster in ds.clusters() {
        for (t_idx, &t) in cluster.grid.iter().enumerate() {
            for (j, mj) in cluster.members.iter().enumerate() {
                let rj = &mj.rows[t_idx];
                if rj.available == 0 {
                    continue;
                }
                for (jp, mjp) in cluster.members.iter().enumerate() {
                    if jp == j {
                        continue;
                    }
                    let rjp = &mjp.rows[t_idx];
                    if rjp.available == 0 {
                        continue;
                    }
                    let stratum = PairStratum::new(
                        t,
                        &stratum_values(rj, strat_cols),
                        &stratum_values(rjp, strat_cols),
                    );
                    counts.entry(stratum).or_insert([0; 4])
                        [pair_cell(rj.treatment, rjp.treatment)] += 1;
                }
            }
        }
    }
    let strata = counts
        .into_iter()
        .map(|(k, c)| {
            let total: u64 = c.iter().sum();
            let freq = [
                c[0] as f64 / total as f64,
                c[1] as f64 / total as f64,
                c[2] as f64 / total as f64,
                c[3] as f64 / total as f64,
            ];
            (k, clip_and_normalize(freq, eps))
        })
        .collect();
    PairFrequencyTable { strata }
}

/// Pair frequencies for a single (decision point, stratum) cell.
pub fn empirical_pair_frequency(
    ds: &MRTDataset,
    t: u32,
    strat_cols: &[usize],
    focal_values: &[f64],
    other_values: &[f64],
) -> Result<PairDistribution, DesignError> {
    let table = empirical_pair_frequencies(ds, strat_cols, PAIR_FREQUENCY_EPSILON);
    table
        .get(&PairStratum::new(t, focal_values, other_values))
        .copied()
        .ok_or_else(|| {
            DesignError::Estimation(format!("no available treatment pairs at t={t} in the stratum"))
        })
}

/// Joint numerator `p~(a, a'|S)` and centering `p~*(1|S)` resolved for one
/// ordered pair.
pub struct PairNumerator {
    pub joint: PairDistribution,
    pub p_star: f64,
}

/// Resolve the pairwise numerator for an ordered pair. The factorized form
/// multiplies the two marginal numerators, in which case `p~* = p~(1|S_j')`;
/// the empirical form looks up the (t, stratum) cell in `table`.
pub fn pair_numerator(
    row_j: &ObservationRow,
    row_jp: &ObservationRow,
    schema: &Schema,
    plan: &WeightPlan,
    table: Option<&PairFrequencyTable>,
    strat_cols: &[usize],
) -> Result<PairNumerator, DesignError> {
    match &plan.numerator {
        WeightNumerator::EmpiricalPair => {
            let table = table.ok_or_else(|| {
                DesignError::WeightPlan("empirical pair numerator requires a frequency table".into())
            })?;
            let stratum = PairStratum::new(
                row_j.t,
                &stratum_values(row_j, strat_cols),
                &stratum_values(row_jp, strat_cols),
            );
            let joint = *table.get(&stratum).ok_or_else(|| {
                DesignError::Estimation(format!(
                    "no empirical pair frequency at t={} in the pair's stratum",
                    row_j.t
                ))
            })?;
            Ok(PairNumerator { joint, p_star: p_star(joint[0], joint[1])? })
        }
        _ => {
            let pj = plan.numerator_prob(row_j, schema)?;
            let pjp = plan.numerator_prob(row_jp, schema)?;
            let joint = [
                (1.0 - pj) * (1.0 - pjp),
                (1.0 - pj) * pjp,
                pj * (1.0 - pjp),
                pj * pjp,
            ];
            // Factorized numerator reduces the centering to p~(1|S_j').
            Ok(PairNumerator { joint, p_star: pjp })
        }
    }
}

/// Pairwise weight `W_{t,j,j'}` for an ordered same-cluster, same-time pair.
pub fn pair_weight(
    row_j: &ObservationRow,
    row_jp: &ObservationRow,
    schema: &Schema,
    plan: &WeightPlan,
    table: Option<&PairFrequencyTable>,
    strat_cols: &[usize],
) -> Result<f64, DesignError> {
    if row_j.cluster_id != row_jp.cluster_id || row_j.t != row_jp.t {
        return Err(DesignError::Pairing(
            "pair rows must share a cluster and a decision point".into(),
        ));
    }
    if row_j.individual_id == row_jp.individual_id {
        return Err(DesignError::Pairing("pair rows must be distinct individuals".into()));
    }
    if !plan.independent_pairs {
        return Err(DesignError::WeightPlan(
            "pairwise weights require independently randomized treatments \
             (joint denominators are not supported)"
                .into(),
        ));
    }
    let numer = pair_numerator(row_j, row_jp, schema, plan, table, strat_cols)?;
    let pj = if row_j.treatment == 1 { row_j.rand_prob } else { 1.0 - row_j.rand_prob };
    let pjp = if row_jp.treatment == 1 { row_jp.rand_prob } else { 1.0 - row_jp.rand_prob };
    Ok(numer.joint[pair_cell(row_j.treatment, row_jp.treatment)] / (pj * pjp))
}

/// Direct design row `[g_t(H_t), (A_t - p~(1|S_t)) f_t(S_t)]`.
///
/// `peers` holds the rows of every cluster member at the focal decision
/// point, in member order; `member_idx` selects the focal individual.
pub fn direct_design_row(
    schema: &Schema,
    spec: &ModelSpec,
    plan: &WeightPlan,
    peers: &[&ObservationRow],
    member_idx: usize,
) -> Result<(Vec<f64>, Vec<f64>), DesignError> {
    let row = peers[member_idx];
    let mut g = Vec::with_capacity(spec.p());
    spec.g.eval(schema, ColumnSet::Controls, peers, member_idx, &mut g)?;
    let mut f = Vec::with_capacity(spec.q());
    spec.f.eval(schema, ColumnSet::Moderators, peers, member_idx, &mut f)?;
    let center = row.treatment as f64 - plan.numerator_prob(row, schema)?;
    for v in &mut f {
        *v *= center;
    }
    Ok((g, f))
}

/// Indirect design row
/// `[g_t(H_t), (1 - A_{t,j})(A_{t,j'} - p~*(1|S_t)) f_t(S_t)]`, with features
/// evaluated on the focal individual `j`.
#[allow(clippy::too_many_arguments)]
pub fn indirect_design_row(
    schema: &Schema,
    spec: &ModelSpec,
    plan: &WeightPlan,
    peers: &[&ObservationRow],
    member_idx_j: usize,
    member_idx_jp: usize,
    table: Option<&PairFrequencyTable>,
    strat_cols: &[usize],
) -> Result<(Vec<f64>, Vec<f64>), DesignError> {
    if member_idx_j == member_idx_jp {
        return Err(DesignError::Pairing("pair rows must be distinct individuals".into()));
    }
    let row_j = peers[member_idx_j];
    let row_jp = peers[member_idx_jp];
    let mut g = Vec::with_capacity(spec.p());
    spec.g.eval(schema, ColumnSet::Controls, peers, member_idx_j, &mut g)?;
    let mut f = Vec::with_capacity(spec.q());
    spec.f.eval(schema, ColumnSet::Moderators, peers, member_idx_j, &mut f)?;
    let numer = pair_numerator(row_j, row_jp, schema, plan, table, strat_cols)?;
    let center = (1.0 - row_j.treatment as f64) * (row_jp.treatment as f64 - numer.p_star);
    for v in &mut f {
        *v *= center;
    }
    Ok((g, f))
}
