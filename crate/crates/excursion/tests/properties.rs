//! Property tests for the weight algebra, panel round trips, and estimator
//! invariances.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use excursion::design::{
    excursion_weight, marginal_weight, p_star, pair_weight, FeatureMap, FeatureTerm, ModelSpec,
    ReferencePolicy, WeightPlan,
};
use excursion::estimate::{fit_cwcls_direct, fit_wcls, EstimatorKind, FitOptions};
use excursion::mc::{run, sweep, RunSettings, SweepAxis};
use excursion::panel::{load_csv, write_csv, MRTDataset, ObservationRow, Schema};
use excursion::simulate::{generate, Scenario, ScenarioConfig};

fn row(c: &str, i: &str, t: u32, a: u8, p: f64, s: f64, y: f64) -> ObservationRow {
    ObservationRow {
        cluster_id: c.into(),
        individual_id: i.into(),
        t,
        available: 1,
        treatment: a,
        rand_prob: p,
        moderators: vec![s],
        controls: vec![s],
        outcome: y,
    }
}

proptest! {
    /// Direct centering: Σ_a p~(a|S) (a - p~(1|S)) = 0.
    #[test]
    fn direct_centering_identity(ptilde in 1e-6f64..=(1.0 - 1e-6)) {
        let centered = ptilde * (1.0 - ptilde) + (1.0 - ptilde) * (0.0 - ptilde);
        prop_assert!(centered.abs() <= 1e-12);
    }

    /// Indirect centering: p~(0,1)(1 - p~*) - p~(0,0) p~* = 0.
    #[test]
    fn indirect_centering_identity(p00 in 1e-6..1.0f64, p01 in 1e-6..1.0f64) {
        prop_assume!(p00 + p01 < 1.0);
        let ps = p_star(p00, p01).unwrap();
        prop_assert!((p01 * (1.0 - ps) - p00 * ps).abs() <= 1e-12);
    }

    /// The observed-distribution policy yields weight exactly 1 for any window.
    #[test]
    fn observed_policy_weight_is_one(
        treatments in proptest::collection::vec(0u8..2, 0..6),
        probs in proptest::collection::vec(0.05f64..0.95, 6),
    ) {
        let rows: Vec<ObservationRow> = treatments
            .iter()
            .enumerate()
            .map(|(i, &a)| row("c", "i", i as u32 + 2, a, probs[i], 1.0, 0.0))
            .collect();
        let refs: Vec<&ObservationRow> = rows.iter().collect();
        let ts: Vec<u32> = rows.iter().map(|r| r.t).collect();
        let w = excursion_weight(&refs, &ts, &ReferencePolicy::Observed).unwrap();
        prop_assert_eq!(w, 1.0);
    }

    /// Factorized pair weights equal the product of marginal weights.
    #[test]
    fn pair_weight_factorizes(
        ptilde in 0.05f64..0.95,
        pj in 0.05f64..0.95,
        pjp in 0.05f64..0.95,
        aj in 0u8..2,
        ajp in 0u8..2,
    ) {
        let schema = Schema::simulation(1);
        let plan = WeightPlan::constant(ptilde);
        let rj = row("c", "i1", 1, aj, pj, 1.0, 0.0);
        let rjp = row("c", "i2", 1, ajp, pjp, 1.0, 0.0);
        let joint = pair_weight(&rj, &rjp, &schema, &plan, None, &[]).unwrap();
        let product = marginal_weight(&rj, &schema, &plan).unwrap()
            * marginal_weight(&rjp, &schema, &plan).unwrap();
        prop_assert!((joint - product).abs() <= 1e-12 * joint.abs().max(product.abs()));
    }

    /// CSV round trip is the identity on stored values.
    #[test]
    fn csv_round_trip(
        seed in any::<u64>(),
        n_clusters in 1usize..4,
        g in 1usize..4,
        t_max in 1u32..5,
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for c in 0..n_clusters {
            for i in 0..g {
                for t in 1..=t_max {
                    rows.push(row(
                        &format!("c{c}"),
                        &format!("i{i}"),
                        t,
                        u8::from(rng.random::<f64>() < 0.5),
                        rng.random::<f64>().clamp(1e-9, 1.0 - 1e-9),
                        rng.random::<f64>() * 200.0 - 100.0,
                        (rng.random::<f64>() - 0.5) * 1e6,
                    ));
                }
            }
        }
        let ds = MRTDataset::from_rows(Schema::simulation(1), rows);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round.csv");
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path, ds.schema()).unwrap();
        for (ca, cb) in ds.clusters().iter().zip(back.clusters()) {
            for (ma, mb) in ca.members.iter().zip(&cb.members) {
                prop_assert_eq!(&ma.rows, &mb.rows);
            }
        }
    }
}

/// Permuting input row order changes nothing in the fit (grouping sorts by
/// identifier, so the whole FitResult must be bit-identical).
#[test]
fn row_order_does_not_change_fit() {
    let cfg = ScenarioConfig::new(Scenario::II, 6, 4, 909);
    let ds = generate(&cfg).unwrap();
    let mut rows: Vec<ObservationRow> = ds
        .clusters()
        .iter()
        .flat_map(|c| c.members.iter().flat_map(|m| m.rows.iter().cloned()))
        .collect();
    // A deterministic shuffle.
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    for i in (1..rows.len()).rev() {
        rows.swap(i, rng.random_range(0..=i));
    }
    let shuffled = MRTDataset::from_rows(ds.schema().clone(), rows);

    let spec = ModelSpec::marginal("s");
    let plan = WeightPlan::constant(0.5);
    let opts = FitOptions::default();
    let a = fit_cwcls_direct(&ds, &spec, &plan, &ReferencePolicy::Observed, &opts).unwrap();
    let b = fit_cwcls_direct(&shuffled, &spec, &plan, &ReferencePolicy::Observed, &opts).unwrap();
    assert_eq!(a.beta[0].to_bits(), b.beta[0].to_bits());
    for i in 0..a.covariance.nrows() {
        for j in 0..a.covariance.ncols() {
            assert_eq!(a.covariance[(i, j)].to_bits(), b.covariance[(i, j)].to_bits());
        }
    }
}

/// At the solution the bread's cross-block between control columns and
/// centered effect columns washes out as rows grow.
#[test]
fn bread_cross_block_vanishes() {
    let mut cfg = ScenarioConfig::new(Scenario::I, 60, 10, 2024);
    cfg.t_max = 40;
    let ds = generate(&cfg).unwrap();
    let spec = ModelSpec {
        f: FeatureMap::new(vec![FeatureTerm::Intercept, FeatureTerm::Column("s".into())]),
        g: FeatureMap::new(vec![FeatureTerm::Intercept, FeatureTerm::Column("s".into())]),
    };
    let plan = WeightPlan::constant(0.5);
    let fit =
        fit_wcls(&ds, &spec, &plan, &ReferencePolicy::Observed, &FitOptions::default()).unwrap();
    let n_rows = fit.n_rows_used as f64;
    for gi in 0..fit.p {
        for fi in fit.p..fit.p + fit.q {
            let scale = (fit.bread[(gi, gi)] * fit.bread[(fi, fi)]).sqrt();
            let normalized = fit.bread[(gi, fi)].abs() / scale;
            assert!(
                normalized <= 5.0 / n_rows.sqrt(),
                "cross block ({gi},{fi}): {normalized} vs {}",
                5.0 / n_rows.sqrt()
            );
        }
    }
}

/// With no cross-individual terms in the outcome the indirect effect is
/// null: the mean indirect estimate is within 3 Monte Carlo SEs of zero.
#[test]
fn indirect_estimate_is_null_without_interference() {
    let mut cfg = ScenarioConfig::new(Scenario::IV, 12, 4, 7777);
    cfg.beta20 = 0.0;
    cfg.beta21 = 0.0;
    cfg.t_max = 12;
    let settings =
        RunSettings::new(400, vec![EstimatorKind::CwclsIndirect], ReferencePolicy::Observed);
    let s = run(&cfg, &settings).unwrap().summaries.remove(0);
    let se_of_mean = s.mc_sd / (s.n_reps as f64).sqrt();
    assert!(
        s.mean_estimate.abs() <= 3.0 * se_of_mean,
        "mean {} vs 3 x {se_of_mean}",
        s.mean_estimate
    );
}

/// Published-table rows not exercised by the acceptance gate: Scenario I at
/// 50x10 and the indirect Scenario IV at 25x10.
#[test]
fn additional_table_rows_reproduce() {
    let cfg = ScenarioConfig::new(Scenario::I, 50, 10, 600613);
    let settings = RunSettings::new(
        1000,
        vec![EstimatorKind::Wcls, EstimatorKind::CwclsDirect],
        ReferencePolicy::Observed,
    );
    for s in run(&cfg, &settings).unwrap().summaries {
        assert!((s.mean_estimate - (-0.198)).abs() <= 0.010, "mean {}", s.mean_estimate);
        assert!((0.93..=0.97).contains(&s.coverage), "coverage {}", s.coverage);
    }

    let cfg = ScenarioConfig::new(Scenario::IV, 25, 10, 600613);
    let settings =
        RunSettings::new(1000, vec![EstimatorKind::CwclsIndirect], ReferencePolicy::Observed);
    let s = run(&cfg, &settings).unwrap().summaries.remove(0);
    assert!((s.mean_estimate - (-0.097)).abs() <= 0.010, "mean {}", s.mean_estimate);
    assert!((0.92..=0.98).contains(&s.coverage), "coverage {}", s.coverage);
}

/// Sweep patterns: with no cluster slope both estimators are calibrated; at
/// variance ratio 0.2 only the cluster-based one is; WCLS coverage decreases
/// in group size.
#[test]
fn sweep_reproduces_coverage_patterns() {
    let cfg = ScenarioConfig::new(Scenario::II, 50, 25, 31337);
    let settings = RunSettings::new(
        1000,
        vec![EstimatorKind::Wcls, EstimatorKind::CwclsDirect],
        ReferencePolicy::Observed,
    );
    let points = sweep(&cfg, SweepAxis::VarianceRatio, &[0.0, 0.2], &settings).unwrap();
    let coverage = |value: f64, kind: EstimatorKind| {
        points
            .iter()
            .find(|p| p.axis_value == value && p.estimator == kind)
            .map(|p| p.coverage)
            .unwrap()
    };
    assert!((0.93..=0.97).contains(&coverage(0.0, EstimatorKind::Wcls)));
    assert!((0.93..=0.97).contains(&coverage(0.0, EstimatorKind::CwclsDirect)));
    assert!((0.93..=0.97).contains(&coverage(0.2, EstimatorKind::CwclsDirect)));
    assert!(coverage(0.2, EstimatorKind::Wcls) < 0.80);

    let sizes = sweep(&cfg, SweepAxis::GroupSize, &[10.0, 25.0], &settings).unwrap();
    let wcls_10 = sizes
        .iter()
        .find(|p| p.axis_value == 10.0 && p.estimator == EstimatorKind::Wcls)
        .unwrap()
        .coverage;
    let wcls_25 = sizes
        .iter()
        .find(|p| p.axis_value == 25.0 && p.estimator == EstimatorKind::Wcls)
        .unwrap()
        .coverage;
    assert!(
        wcls_25 < wcls_10,
        "WCLS coverage must degrade with group size: {wcls_10} -> {wcls_25}"
    );
}

/// Any valid constant numerator targets the same marginal estimand: the
/// Monte Carlo means under p~ = 0.5 and p~ = 0.3 agree within combined MC
/// error.
#[test]
fn numerator_choice_is_estimand_invariant() {
    let mut cfg = ScenarioConfig::new(Scenario::I, 20, 5, 5150);
    cfg.t_max = 15;
    let mut settings =
        RunSettings::new(1000, vec![EstimatorKind::CwclsDirect], ReferencePolicy::Observed);
    settings.plan = Some(WeightPlan::constant(0.5));
    let a = run(&cfg, &settings).unwrap().summaries.remove(0);
    settings.plan = Some(WeightPlan::constant(0.3));
    let b = run(&cfg, &settings).unwrap().summaries.remove(0);
    let n = a.n_reps as f64;
    let combined_se = ((a.mc_sd.powi(2) + b.mc_sd.powi(2)) / n).sqrt();
    let gap = (a.mean_estimate - b.mean_estimate).abs();
    assert!(
        gap <= 3.0 * combined_se,
        "means {} vs {} differ by {gap} > 3 x {combined_se}",
        a.mean_estimate,
        b.mean_estimate
    );
}
