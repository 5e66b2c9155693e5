//! Weighted-centered least squares estimators with cluster-robust
//! covariances.
//!
//! Three estimators share one engine. Each stacks design rows
//! `h = [g_t(H_t), centered f_t(S_t)]` with a per-row weight and solves the
//! weighted normal equations; they differ in the independence unit and the
//! per-subunit averaging factor φ:
//!
//! | estimator        | unit       | subunit       | φ               |
//! |------------------|------------|---------------|-----------------|
//! | WCLS             | individual | individual    | 1               |
//! | C-WCLS direct    | cluster    | individual    | 1/G_m           |
//! | C-WCLS indirect  | cluster    | ordered pair  | 1/(G_m (G_m-1)) |
//!
//! The sandwich covariance is `Q⁻¹ Λ Q⁻¹` with bread
//! `Q = Σ_u Σ_sub φ D'WD` and meat `Λ = Σ_u s_u s_u'`, where the unit score
//! is `s_u = Σ_sub φ D'W (I - H)⁻¹ e` and `H = D Q⁻¹ D' W` is the subunit
//! leverage block (Mancl & DeRouen, 2001). With the adjustment off, `H ≡ 0`
//! and the meat reduces to plain score outer products. The `(I - H)⁻¹`
//! product is evaluated through the Woodbury identity
//! `(I - D Q⁻¹ D'W)⁻¹ = I + D (Q - D'WD)⁻¹ D'W`, so only small
//! `(p+q)×(p+q)` systems are ever factored.
//!
//! Rows with zero effective weight (unavailable rows, or deterministic
//! reference policies zeroing a lag window) contribute nothing to any term
//! above and are skipped; by the same Woodbury identity this is exact, not
//! an approximation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::design::{
    empirical_pair_frequencies, p_star, DesignError, FeatureTerm, ColumnSet, ModelSpec,
    PairFrequencyTable, PairStratum, ReferencePolicy, WeightNumerator, WeightPlan,
    PAIR_FREQUENCY_EPSILON,
};
use crate::panel::{Cluster, MRTDataset, Violation};

/// Reciprocal condition number below which the weighted Gram matrix is
/// treated as singular.
const RCOND_THRESHOLD: f64 = 1e-12;

/// Condition-number bound for the per-subunit `(I - H)` adjustment blocks.
const ADJUSTMENT_CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Wcls,
    CwclsDirect,
    CwclsIndirect,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EstimatorKind::Wcls => write!(f, "WCLS"),
            EstimatorKind::CwclsDirect => write!(f, "C-WCLS"),
            EstimatorKind::CwclsIndirect => write!(f, "C-WCLS (indirect)"),
        }
    }
}

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("dataset failed validation with {} violation(s); first: {}",
            .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    InvalidData(Vec<Violation>),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("singular weighted Gram matrix; collinear columns: {}", .0.join(", "))]
    Singular(Vec<String>),
    #[error("insufficient clusters: {0}")]
    InsufficientClusters(String),
    #[error("insufficient pairs: {0}")]
    InsufficientPairs(String),
    #[error("negative weight {weight} at cluster {cluster}, individual {individual}, t={t}")]
    NegativeWeight { weight: f64, cluster: String, individual: String, t: u32 },
    #[error("small-sample adjustment is ill-conditioned (condition number > 1e12); \
             refit with adjust = false ({0})")]
    Adjustment(String),
    #[error("no usable rows (all unavailable, zero-weight, or outside the lag window)")]
    NoRows,
    #[error("inference error: {0}")]
    Inference(String),
    #[error("domain error: {0}")]
    Domain(String),
}

/// Fit-time switches.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Apply the small-sample `(I - H)⁻¹` residual adjustment.
    pub adjust: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { adjust: true }
    }
}

/// Everything produced by a fit. `covariance` (and the per-coefficient
/// standard errors) use the adjusted meat when the fit was run with
/// `adjust = true`, otherwise the unadjusted one; `covariance_unadjusted` is
/// always available.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub kind: EstimatorKind,
    pub policy: ReferencePolicy,
    pub delta: u32,
    pub adjusted: bool,
    /// Design column names, controls first.
    pub columns: Vec<String>,
    pub p: usize,
    pub q: usize,
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    /// Bread Q of the sandwich.
    pub bread: DMatrix<f64>,
    /// Meat Λ used for `covariance`.
    pub meat: DMatrix<f64>,
    pub meat_unadjusted: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub covariance_unadjusted: DMatrix<f64>,
    /// Lower-right q×q block of `covariance`.
    pub beta_covariance: DMatrix<f64>,
    pub se: Vec<f64>,
    pub t_stat: Vec<f64>,
    pub p_value: Vec<f64>,
    /// Independence units: individuals for WCLS, clusters otherwise.
    pub n_units: usize,
    pub n_rows_used: usize,
    /// n_units - p - q.
    pub dof: i64,
    /// Max-norm of the estimating equation at the solution.
    pub score_max_abs: f64,
}

impl FitResult {
    /// JSON document with coefficients, standard errors, both covariances in
    /// row-major order, and fit metadata.
    pub fn to_json(&self) -> serde_json::Value {
        let row_major = |m: &DMatrix<f64>| -> Vec<f64> {
            (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
        };
        serde_json::json!({
            "estimator": self.kind,
            "delta": self.delta,
            "policy": self.policy,
            "adjusted": self.adjusted,
            "columns": self.columns,
            "alpha": self.alpha.iter().copied().collect::<Vec<f64>>(),
            "beta": self.beta.iter().copied().collect::<Vec<f64>>(),
            "se": self.se,
            "t_stat": self.t_stat,
            "p_value": self.p_value,
            "covariance": row_major(&self.covariance),
            "covariance_unadjusted": row_major(&self.covariance_unadjusted),
            "n_units": self.n_units,
            "n_rows_used": self.n_rows_used,
            "dof": self.dof,
        })
    }
}

/// Per-coefficient confidence interval at a given level.
#[derive(Debug, Clone, Serialize)]
pub struct CoefInference {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// t-based confidence intervals for the effect coefficients β, with
/// dof = n_units - p - q.
pub fn inference(fit: &FitResult, level: f64) -> Result<Vec<CoefInference>, EstimateError> {
    if !(0.0 < level && level < 1.0) {
        return Err(EstimateError::Inference(format!("level {level} outside (0,1)")));
    }
    if fit.dof <= 0 {
        return Err(EstimateError::Inference(format!(
            "non-positive degrees of freedom ({})",
            fit.dof
        )));
    }
    let t_crit = t_quantile(fit.dof as f64, 1.0 - (1.0 - level) / 2.0)?;
    let mut out = Vec::with_capacity(fit.q);
    for i in 0..fit.q {
        let estimate = fit.beta[i];
        let se = fit.se[i];
        out.push(CoefInference {
            name: fit.columns[fit.p + i].clone(),
            estimate,
            se,
            t_stat: fit.t_stat[i],
            p_value: fit.p_value[i],
            ci_lower: estimate - t_crit * se,
            ci_upper: estimate + t_crit * se,
        });
    }
    Ok(out)
}

fn t_quantile(dof: f64, prob: f64) -> Result<f64, EstimateError> {
    let dist = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| EstimateError::Inference(format!("t distribution: {e}")))?;
    Ok(dist.inverse_cdf(prob))
}

fn t_two_sided_p(dof: f64, t: f64) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { f64::NAN } else { 0.0 };
    }
    match StudentsT::new(0.0, 1.0, dof) {
        Ok(dist) => 2.0 * (1.0 - dist.cdf(t.abs())),
        Err(_) => f64::NAN,
    }
}

/// Weight on a decision point in the semiparametric efficient score,
/// given the two arm-conditional outcome variances and the randomization
/// probability:
///
/// ```text
/// K = 1/σ²₁ + p [ p/σ²₁ + (1-p)/σ²₀ ] (1/σ²₁ - 1/σ²₀)
/// ```
///
/// With equal arm variances the second term vanishes and `K = 1/σ²`.
pub fn efficient_score_weight(
    sigma2_treated: f64,
    sigma2_control: f64,
    p: f64,
) -> Result<f64, EstimateError> {
    if sigma2_treated <= 0.0 || sigma2_control <= 0.0 {
        return Err(EstimateError::Domain(format!(
            "variances must be positive (got {sigma2_treated}, {sigma2_control})"
        )));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(EstimateError::Domain(format!("probability {p} outside (0,1)")));
    }
    let inv1 = 1.0 / sigma2_treated;
    let inv0 = 1.0 / sigma2_control;
    Ok(inv1 + p * (p * inv1 + (1.0 - p) * inv0) * (inv1 - inv0))
}

pub fn fit_wcls(
    ds: &MRTDataset,
    spec: &ModelSpec,
    plan: &WeightPlan,
    policy: &ReferencePolicy,
    opts: &FitOptions,
) -> Result<FitResult, EstimateError> {
    fit_direct(ds, spec, plan, policy, opts, EstimatorKind::Wcls)
}

pub fn fit_cwcls_direct(
    ds: &MRTDataset,
    spec: &ModelSpec,
    plan: &WeightPlan,
    policy: &ReferencePolicy,
    opts: &FitOptions,
) -> Result<FitResult, EstimateError> {
    if ds.n_clusters() < 2 {
        return Err(EstimateError::InsufficientClusters(format!(
            "cluster-level inference needs at least 2 clusters, found {}",
            ds.n_clusters()
        )));
    }
    fit_direct(ds, spec, plan, policy, opts, EstimatorKind::CwclsDirect)
}

pub fn fit_cwcls_indirect(
    ds: &MRTDataset,
    spec: &ModelSpec,
    plan: &WeightPlan,
    policy: &ReferencePolicy,
    opts: &FitOptions,
) -> Result<FitResult, EstimateError> {
    fit_indirect(ds, spec, plan, policy, opts)
}

/// Dispatch on the estimator kind.
pub fn fit(
    ds: &MRTDataset,
    spec: &ModelSpec,
    plan: &WeightPlan,
    policy: &ReferencePolicy,
    kind: EstimatorKind,
    opts: &FitOptions,
) -> Result<FitResult, EstimateError> {
    match kind {
        EstimatorKind::Wcls => fit_wcls(ds, spec, plan, policy, opts),
        EstimatorKind::CwclsDirect => fit_cwcls_direct(ds, spec, plan, policy, opts),
        EstimatorKind::CwclsIndirect => fit_cwcls_indirect(ds, spec, plan, policy, opts),
    }
}

fn term_name(term: &FeatureTerm) -> String {
    match term {
        FeatureTerm::Intercept => "intercept".to_string(),
        FeatureTerm::Column(c) => c.clone(),
        FeatureTerm::ClusterMean(c) => format!("cluster_mean({c})"),
        FeatureTerm::LeaveOneOutMean(c) => format!("loo_mean({c})"),
    }
}

fn design_columns(spec: &ModelSpec) -> Vec<String> {
    let mut names: Vec<String> =
        spec.g.terms.iter().map(|t| format!("g:{}", term_name(t))).collect();
    names.extend(spec.f.terms.iter().map(|t| format!("f:{}", term_name(t))));
    names
}

/// Rows of one subunit (an individual, or one ordered pair), stored flat
/// with stride k+2: the design vector, then the effective weight, then the
/// outcome.
struct SubBlock {
    phi: f64,
    data: Vec<f64>,
}

impl SubBlock {
    fn rows(&self, k: usize) -> impl Iterator<Item = (&[f64], f64, f64)> {
        self.data.chunks_exact(k + 2).map(move |chunk| (&chunk[..k], chunk[k], chunk[k + 1]))
    }

    fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn n_rows(&self, k: usize) -> usize {
        self.data.len() / (k + 2)
    }
}

/// Rows of one independence unit.
struct UnitBlock {
    subs: Vec<SubBlock>,
}

/// Precomputed member-by-time quantities shared by the direct and pairwise
/// builders.
struct MemberTime {
    available: bool,
    treatment: f64,
    /// Probability of the observed treatment, p(A|H).
    p_obs: f64,
    /// Marginal numerator p~(1|S); absent under the empirical pair plan.
    ptilde1: Option<f64>,
    /// Lag-window weight; `None` when the window is incomplete, in which
    /// case the row cannot enter the criterion.
    w_exc: Option<f64>,
    y: f64,
    g: Vec<f64>,
    f: Vec<f64>,
    /// Moderator values keying the empirical pair-frequency stratum.
    strat: Vec<f64>,
}

fn build_member_times(
    ds: &MRTDataset,
    cluster: &Cluster,
    spec: &ModelSpec,
    plan: &WeightPlan,
    policy: &ReferencePolicy,
    strat_cols: &[usize],
    need_ptilde: bool,
) -> Result<Vec<Vec<MemberTime>>, EstimateError> {
    let schema = ds.schema();
    let delta = ds.delta();
    let n_t = cluster.grid.len();
    let mut out: Vec<Vec<MemberTime>> = Vec::with_capacity(cluster.size());
    let mut peers: Vec<&crate::panel::ObservationRow> = Vec::with_capacity(cluster.size());
    let mut g_buf = Vec::new();
    let mut f_buf = Vec::new();

    for j in 0..cluster.size() {
        let member = &cluster.members[j];
        let mut entries = Vec::with_capacity(n_t);
        for k in 0..n_t {
            peers.clear();
            for m in &cluster.members {
                peers.push(&m.rows[k]);
            }
            let row = peers[j];
            spec.g.eval(schema, ColumnSet::Controls, &peers, j, &mut g_buf)?;
            spec.f.eval(schema, ColumnSet::Moderators, &peers, j, &mut f_buf)?;

            // Lag window t+1..t+Δ-1 must be contiguous in the grid.
            let w_exc = if delta == 1 {
                Some(1.0)
            } else {
                let lag = (delta - 1) as usize;
                let complete = k + lag < n_t
                    && (1..=lag).all(|i| cluster.grid[k + i] == row.t + i as u32);
                if complete {
                    let window: Vec<&crate::panel::ObservationRow> =
                        (1..=lag).map(|i| &member.rows[k + i]).collect();
                    let expected: Vec<u32> = (1..=lag as u32).map(|i| row.t + i).collect();
                    Some(crate::design::excursion_weight(&window, &expected, policy)?)
                } else {
                    None
                }
            };

            let ptilde1 =
                if need_ptilde { Some(plan.numerator_prob(row, schema)?) } else { None };
            entries.push(MemberTime {
                available: row.available == 1,
                treatment: row.treatment as f64,
                p_obs: if row.treatment == 1 { row.rand_prob } else { 1.0 - row.rand_prob },
                ptilde1,
                w_exc,
                y: row.outcome,
                g: g_buf.clone(),
                f: f_buf.clone(),
                strat: strat_cols.iter().map(|&i| row.moderators[i]).collect(),
            });
        }
        out.push(entries);
    }
    Ok(out)
}

fn fit_direct(
    ds: &MRTDataset,
    spec: &ModelSpec,
    plan: &WeightPlan,
    policy: &ReferencePolicy,
    opts: &FitOptions,
    kind: EstimatorKind,
) -> Result<FitResult, EstimateError> {
    spec.check()?;
    let violations = crate::panel::validate(ds);
    if !violations.is_empty() {
        return Err(EstimateError::InvalidData(violations));
    }
    if matches!(plan.numerator, WeightNumerator::EmpiricalPair) {
        return Err(DesignError::WeightPlan(
            "empirical pair numerator is only defined for the indirect estimator".into(),
        )
        .into());
    }

    let cluster_units = kind == EstimatorKind::CwclsDirect;
    let mut units = Vec::new();
    for cluster in ds.clusters() {
        let times = build_member_times(ds, cluster, spec, plan, policy, &[], true)?;
        let phi = if cluster_units { 1.0 / cluster.size() as f64 } else { 1.0 };
        let mut cluster_subs = Vec::with_capacity(cluster.size());
        for (j, member) in cluster.members.iter().enumerate() {
            let mut data = Vec::new();
            for (k, mt) in times[j].iter().enumerate() {
                let Some(w_exc) = mt.w_exc else { continue };
                if !mt.available {
                    continue;
                }
                let ptilde1 = mt.ptilde1.expect("direct fit resolves the marginal numerator");
                let numer = if mt.treatment == 1.0 { ptilde1 } else { 1.0 - ptilde1 };
                let w = numer / mt.p_obs * w_exc;
                if w < 0.0 {
                    return Err(EstimateError::NegativeWeight {
                        weight: w,
                        cluster: cluster.id.clone(),
                        individual: member.id.clone(),
                        t: cluster.grid[k],
                    });
                }
                if w == 0.0 {
                    continue;
                }
                let center = mt.treatment - ptilde1;
                data.extend_from_slice(&mt.g);
                data.extend(mt.f.iter().map(|v| center * v));
                data.push(w);
                data.push(mt.y);
            }
            let sub = SubBlock { phi, data };
            if cluster_units {
                cluster_subs.push(sub);
            } else {
                units.push(UnitBlock { subs: vec![sub] });
            }
        }
        if cluster_units {
            units.push(UnitBlock { subs: cluster_subs });
        }
    }

    solve_and_sandwich(units, ds, spec, policy, opts, kind)
}

fn fit_indirect(
    ds: &MRTDataset,
    spec: &ModelSpec,
    plan: &WeightPlan,
    policy: &ReferencePolicy,
    opts: &FitOptions,
) -> Result<FitResult, EstimateError> {
    spec.check()?;
    let violations = crate::panel::validate(ds);
    if !violations.is_empty() {
        return Err(EstimateError::InvalidData(violations));
    }
    for cluster in ds.clusters() {
        if cluster.size() < 2 {
            return Err(EstimateError::InsufficientPairs(format!(
                "cluster {} has size {}; pairwise estimation needs every cluster >= 2",
                cluster.id,
                cluster.size()
            )));
        }
    }
    if !plan.independent_pairs {
        return Err(DesignError::WeightPlan(
            "pairwise weights require independently randomized treatments \
             (joint denominators are not supported)"
                .into(),
        )
        .into());
    }

    // Stratify empirical pair frequencies on the moderator columns the model
    // actually conditions on.
    let schema = ds.schema();
    let strat_cols: Vec<usize> = spec
        .f
        .column_names()
        .iter()
        .map(|name| {
            schema.moderator_index(name).ok_or_else(|| {
                DesignError::Spec(format!("column `{name}` is not bound as a moderator column"))
            })
        })
        .collect::<Result<_, _>>()?;
    let empirical = matches!(plan.numerator, WeightNumerator::EmpiricalPair);
    let table: Option<PairFrequencyTable> =
        empirical.then(|| empirical_pair_frequencies(ds, &strat_cols, PAIR_FREQUENCY_EPSILON));

    let mut units = Vec::with_capacity(ds.n_clusters());
    for cluster in ds.clusters() {
        let times =
            build_member_times(ds, cluster, spec, plan, policy, &strat_cols, !empirical)?;
        let g_m = cluster.size();
        let phi = 1.0 / (g_m as f64 * (g_m - 1) as f64);

        // With no stratifying columns the empirical table reduces to one
        // cell per decision point; resolve it once per cluster instead of
        // hashing per pair-row.
        type NumeratorByT = Vec<Option<([f64; 4], f64)>>;
        let by_t: Option<NumeratorByT> = match (&table, strat_cols.is_empty()) {
            (Some(table), true) => Some(
                cluster
                    .grid
                    .iter()
                    .map(|&t| {
                        table
                            .get(&PairStratum::new(t, &[], &[]))
                            .map(|&joint| p_star(joint[0], joint[1]).map(|ps| (joint, ps)))
                            .transpose()
                    })
                    .collect::<Result<_, _>>()?,
            ),
            _ => None,
        };

        let mut subs = Vec::with_capacity(g_m * (g_m - 1));
        for j in 0..g_m {
            for jp in 0..g_m {
                if jp == j {
                    continue;
                }
                let mut data = Vec::new();
                for k in 0..cluster.grid.len() {
                    let mj = &times[j][k];
                    let mjp = &times[jp][k];
                    if !mj.available || !mjp.available {
                        continue;
                    }
                    let (Some(we_j), Some(we_jp)) = (mj.w_exc, mjp.w_exc) else { continue };
                    let (joint, pstar) = match (&by_t, &table) {
                        (Some(by_t), _) => by_t[k].ok_or_else(|| {
                            DesignError::Estimation(format!(
                                "no available treatment pairs at t={}",
                                cluster.grid[k]
                            ))
                        })?,
                        (None, Some(table)) => {
                            let stratum =
                                PairStratum::new(cluster.grid[k], &mj.strat, &mjp.strat);
                            let joint = *table.get(&stratum).ok_or_else(|| {
                                DesignError::Estimation(format!(
                                    "no empirical pair frequency at t={} in the pair's stratum",
                                    cluster.grid[k]
                                ))
                            })?;
                            (joint, p_star(joint[0], joint[1])?)
                        }
                        (None, None) => {
                            let pt_j = mj.ptilde1.expect("factorized plan resolves numerators");
                            let pt_jp = mjp.ptilde1.expect("factorized plan resolves numerators");
                            let joint = [
                                (1.0 - pt_j) * (1.0 - pt_jp),
                                (1.0 - pt_j) * pt_jp,
                                pt_j * (1.0 - pt_jp),
                                pt_j * pt_jp,
                            ];
                            (joint, pt_jp)
                        }
                    };
                    let cell = (mj.treatment as usize) * 2 + mjp.treatment as usize;
                    let w = joint[cell] / (mj.p_obs * mjp.p_obs) * we_j * we_jp;
                    if w < 0.0 {
                        return Err(EstimateError::NegativeWeight {
                            weight: w,
                            cluster: cluster.id.clone(),
                            individual: cluster.members[j].id.clone(),
                            t: cluster.grid[k],
                        });
                    }
                    if w == 0.0 {
                        continue;
                    }
                    let center = (1.0 - mj.treatment) * (mjp.treatment - pstar);
                    data.extend_from_slice(&mj.g);
                    data.extend(mj.f.iter().map(|v| center * v));
                    data.push(w);
                    data.push(mj.y);
                }
                subs.push(SubBlock { phi, data });
            }
        }
        units.push(UnitBlock { subs });
    }

    solve_and_sandwich(units, ds, spec, policy, opts, EstimatorKind::CwclsIndirect)
}

fn accumulate_gram(q: &mut DMatrix<f64>, rhs: Option<&mut DVector<f64>>, d: &[f64], w: f64, y: f64) {
    let k = d.len();
    for i in 0..k {
        let wi = w * d[i];
        for j in i..k {
            q[(i, j)] += wi * d[j];
        }
    }
    if let Some(rhs) = rhs {
        for i in 0..k {
            rhs[i] += w * y * d[i];
        }
    }
}

fn symmetrize_upper(q: &mut DMatrix<f64>) {
    for i in 0..q.nrows() {
        for j in 0..i {
            q[(i, j)] = q[(j, i)];
        }
    }
}

fn solve_and_sandwich(
    units: Vec<UnitBlock>,
    ds: &MRTDataset,
    spec: &ModelSpec,
    policy: &ReferencePolicy,
    opts: &FitOptions,
    kind: EstimatorKind,
) -> Result<FitResult, EstimateError> {
    let p = spec.p();
    let q_dim = spec.q();
    let k = p + q_dim;
    let columns = design_columns(spec);

    let mut bread = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    let mut n_rows_used = 0usize;
    for unit in &units {
        for sub in &unit.subs {
            for (d, w, y) in sub.rows(k) {
                accumulate_gram(&mut bread, Some(&mut rhs), d, sub.phi * w, y);
            }
            n_rows_used += sub.n_rows(k);
        }
    }
    if n_rows_used == 0 {
        return Err(EstimateError::NoRows);
    }
    symmetrize_upper(&mut bread);

    // Rank check on the weighted Gram; name the collinear columns through
    // the null eigenvector when it fails.
    let eigen = bread.clone().symmetric_eigen();
    let max_eig = eigen.eigenvalues.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    let (min_idx, min_eig) = eigen
        .eigenvalues
        .iter()
        .map(|v| v.abs())
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty eigenvalues");
    if max_eig <= 0.0 || min_eig / max_eig < RCOND_THRESHOLD {
        let null = eigen.eigenvectors.column(min_idx);
        let peak = null.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let involved: Vec<String> = (0..k)
            .filter(|&i| null[i].abs() >= 0.3 * peak)
            .map(|i| columns[i].clone())
            .collect();
        return Err(EstimateError::Singular(involved));
    }
    let chol = bread.clone().cholesky().ok_or_else(|| EstimateError::Singular(columns.clone()))?;
    let theta = chol.solve(&rhs);

    // Estimating-equation value at the solution.
    let score_max_abs = {
        let grad = &rhs - &bread * &theta;
        grad.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()))
    };

    // Second pass: per-unit scores, with and without the (I - H)^-1
    // adjustment, accumulated into the meat matrices.
    let mut meat_unadj = DMatrix::zeros(k, k);
    let mut meat_adj = DMatrix::zeros(k, k);
    let mut s_sub = DVector::zeros(k);
    let mut u_unadj = DVector::zeros(k);
    let mut u_adj = DVector::zeros(k);
    let mut g_sub = DMatrix::zeros(k, k);
    let n_units = units.len();
    for unit in &units {
        u_unadj.fill(0.0);
        u_adj.fill(0.0);
        for sub in &unit.subs {
            if sub.is_empty() {
                continue;
            }
            s_sub.fill(0.0);
            g_sub.fill(0.0);
            for (d, w, y) in sub.rows(k) {
                let residual = y - d.iter().zip(theta.iter()).map(|(a, b)| a * b).sum::<f64>();
                accumulate_gram(&mut g_sub, None, d, w, 0.0);
                for i in 0..k {
                    s_sub[i] += w * residual * d[i];
                }
            }
            symmetrize_upper(&mut g_sub);
            u_unadj.axpy(sub.phi, &s_sub, 1.0);
            if opts.adjust {
                // s_adj = D'W (I-H)^-1 e = s + D'WD (Q - D'WD)^-1 s.
                let m = &bread - &g_sub;
                let lu = m.lu();
                let u_diag = lu.u();
                let mut dmax = 0.0f64;
                let mut dmin = f64::INFINITY;
                for i in 0..k {
                    let v = u_diag[(i, i)].abs();
                    dmax = dmax.max(v);
                    dmin = dmin.min(v);
                }
                if dmin == 0.0 || dmax / dmin > ADJUSTMENT_CONDITION_LIMIT {
                    return Err(EstimateError::Adjustment(format!(
                        "pivot ratio {:e}",
                        if dmin == 0.0 { f64::INFINITY } else { dmax / dmin }
                    )));
                }
                let z = lu.solve(&s_sub).ok_or_else(|| {
                    EstimateError::Adjustment("Q - D'WD is numerically singular".into())
                })?;
                let s_adj = &s_sub + &g_sub * z;
                u_adj.axpy(sub.phi, &s_adj, 1.0);
            }
        }
        // x xᵀ is exactly symmetric entry-by-entry, so no cleanup pass is
        // needed after the rank-1 updates.
        meat_unadj.ger(1.0, &u_unadj, &u_unadj, 1.0);
        if opts.adjust {
            meat_adj.ger(1.0, &u_adj, &u_adj, 1.0);
        }
    }

    let sandwich = |meat: &DMatrix<f64>| -> DMatrix<f64> {
        // Q^-1 Λ Q^-1, symmetrized against rounding.
        let inner = chol.solve(meat); // Q^-1 Λ
        let mut cov = chol.solve(&inner.transpose()); // Q^-1 Λ Q^-1
        let covt = cov.transpose();
        cov += covt;
        cov *= 0.5;
        cov
    };
    let covariance_unadjusted = sandwich(&meat_unadj);
    let (covariance, meat) = if opts.adjust {
        (sandwich(&meat_adj), meat_adj)
    } else {
        (covariance_unadjusted.clone(), meat_unadj.clone())
    };

    let beta_covariance = covariance.view((p, p), (q_dim, q_dim)).into_owned();
    let alpha = DVector::from_iterator(p, theta.iter().take(p).copied());
    let beta = DVector::from_iterator(q_dim, theta.iter().skip(p).copied());
    let dof = n_units as i64 - k as i64;
    let se: Vec<f64> = (0..q_dim).map(|i| beta_covariance[(i, i)].max(0.0).sqrt()).collect();
    let t_stat: Vec<f64> = (0..q_dim)
        .map(|i| {
            if se[i] > 0.0 {
                beta[i] / se[i]
            } else if beta[i] == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(beta[i])
            }
        })
        .collect();
    let p_value: Vec<f64> = t_stat
        .iter()
        .map(|&t| if dof > 0 { t_two_sided_p(dof as f64, t) } else { f64::NAN })
        .collect();

    Ok(FitResult {
        kind,
        policy: policy.clone(),
        delta: ds.delta(),
        adjusted: opts.adjust,
        columns,
        p,
        q: q_dim,
        alpha,
        beta,
        bread,
        meat,
        meat_unadjusted: meat_unadj,
        covariance,
        covariance_unadjusted,
        beta_covariance,
        se,
        t_stat,
        p_value,
        n_units,
        n_rows_used,
        dof,
        score_max_abs,
    })
}
