//! Dual-route check of the estimation engine.
//!
//! A naive reference implementation rebuilds every estimator from the
//! definitions: per-subunit dense design blocks, point estimates through an
//! SVD solve of the sqrt-weighted stacked system, and the sandwich
//! covariance with literal `(I - H)^{-1}` matrix inverses. The engine must
//! reproduce it on assorted small datasets, and both must reproduce frozen
//! values computed externally for a hand-sized dataset.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use excursion::design::{
    indirect_design_row, marginal_weight, pair_weight, ModelSpec, ReferencePolicy, WeightPlan,
};
use excursion::estimate::{
    fit_cwcls_direct, fit_cwcls_indirect, fit_wcls, FitOptions, FitResult,
};
use excursion::panel::{MRTDataset, ObservationRow, Schema};

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

/// One subunit block of the reference problem.
struct Block {
    design: DMatrix<f64>,
    weights: DVector<f64>,
    y: DVector<f64>,
    phi: f64,
    unit: usize,
}

/// Reference fit: solve the sqrt-weighted stacked least squares by SVD, then
/// assemble Q, Λ (adjusted and not), and Q⁻¹ΛQ⁻¹ densely.
fn naive_sandwich(blocks: &[Block], n_units: usize, k: usize, adjust: bool) -> (DVector<f64>, DMatrix<f64>) {
    let n_rows: usize = blocks.iter().map(|b| b.design.nrows()).sum();
    let mut stacked = DMatrix::zeros(n_rows, k);
    let mut rhs = DVector::zeros(n_rows);
    let mut r = 0;
    for b in blocks {
        for i in 0..b.design.nrows() {
            let sw = (b.phi * b.weights[i]).sqrt();
            for j in 0..k {
                stacked[(r, j)] = sw * b.design[(i, j)];
            }
            rhs[r] = sw * b.y[i];
            r += 1;
        }
    }
    let theta = stacked.svd(true, true).solve(&rhs, 1e-12).expect("solvable");

    let mut q = DMatrix::zeros(k, k);
    for b in blocks {
        let w = DMatrix::from_diagonal(&b.weights);
        q += b.phi * b.design.transpose() * &w * &b.design;
    }
    let q_inv = q.clone().try_inverse().expect("invertible bread");

    let mut unit_scores = vec![DVector::zeros(k); n_units];
    for b in blocks {
        let w = DMatrix::from_diagonal(&b.weights);
        let mut e = &b.y - &b.design * &theta;
        if adjust {
            let h = &b.design * &q_inv * b.design.transpose() * &w;
            let eye = DMatrix::identity(h.nrows(), h.ncols());
            let inv = (eye - h).try_inverse().expect("I - H invertible");
            e = inv * e;
        }
        unit_scores[b.unit] += b.phi * b.design.transpose() * &w * e;
    }
    let mut meat = DMatrix::zeros(k, k);
    for s in &unit_scores {
        meat += s * s.transpose();
    }
    (theta, &q_inv * meat * &q_inv)
}

fn direct_blocks(ds: &MRTDataset, plan: &WeightPlan, cluster_units: bool) -> (Vec<Block>, usize) {
    let schema = ds.schema();
    let mut blocks = Vec::new();
    let mut unit = 0;
    for cluster in ds.clusters() {
        let g = cluster.size() as f64;
        for member in &cluster.members {
            let usable: Vec<&ObservationRow> =
                member.rows.iter().filter(|r| r.available == 1).collect();
            if usable.is_empty() {
                if !cluster_units {
                    unit += 1;
                }
                continue;
            }
            let design = DMatrix::from_fn(usable.len(), 3, |i, j| {
                let r = usable[i];
                let ptilde = 0.5;
                match j {
                    0 => 1.0,
                    1 => r.moderators[0],
                    _ => (r.treatment as f64 - ptilde) * 1.0,
                }
            });
            let weights = DVector::from_fn(usable.len(), |i, _| {
                marginal_weight(usable[i], schema, plan).unwrap()
            });
            let y = DVector::from_fn(usable.len(), |i, _| usable[i].outcome);
            blocks.push(Block {
                design,
                weights,
                y,
                phi: if cluster_units { 1.0 / g } else { 1.0 },
                unit,
            });
            if !cluster_units {
                unit += 1;
            }
        }
        if cluster_units {
            unit += 1;
        }
    }
    (blocks, unit)
}

fn indirect_blocks(ds: &MRTDataset, spec: &ModelSpec, plan: &WeightPlan) -> (Vec<Block>, usize) {
    let schema = ds.schema();
    let mut blocks = Vec::new();
    for (unit, cluster) in ds.clusters().iter().enumerate() {
        let g = cluster.size();
        let phi = 1.0 / (g as f64 * (g - 1) as f64);
        for j in 0..g {
            for jp in 0..g {
                if jp == j {
                    continue;
                }
                let mut rows = Vec::new();
                for k in 0..cluster.grid.len() {
                    let rj = &cluster.members[j].rows[k];
                    let rjp = &cluster.members[jp].rows[k];
                    if rj.available == 0 || rjp.available == 0 {
                        continue;
                    }
                    let peers: Vec<&ObservationRow> =
                        cluster.members.iter().map(|m| &m.rows[k]).collect();
                    let (gpart, fpart) =
                        indirect_design_row(schema, spec, plan, &peers, j, jp, None, &[])
                            .unwrap();
                    let w = pair_weight(rj, rjp, schema, plan, None, &[]).unwrap();
                    let mut d = gpart;
                    d.extend(fpart);
                    rows.push((d, w, rj.outcome));
                }
                if rows.is_empty() {
                    continue;
                }
                let k_dim = rows[0].0.len();
                let design = DMatrix::from_fn(rows.len(), k_dim, |i, j| rows[i].0[j]);
                let weights = DVector::from_fn(rows.len(), |i, _| rows[i].1);
                let y = DVector::from_fn(rows.len(), |i, _| rows[i].2);
                blocks.push(Block { design, weights, y, phi, unit });
            }
        }
    }
    (blocks, ds.n_clusters())
}

fn random_dataset(rng: &mut ChaCha12Rng, min_g: usize) -> MRTDataset {
    let n_clusters = rng.random_range(3..7);
    let t_max = rng.random_range(2..6);
    let mut rows = Vec::new();
    for c in 0..n_clusters {
        let g = rng.random_range(min_g..min_g + 3);
        for i in 0..g {
            for t in 1..=t_max {
                let s = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
                let p = 0.2 + 0.6 * rng.random::<f64>();
                let a = u8::from(rng.random::<f64>() < p);
                let avail = u8::from(rng.random::<f64>() < 0.9);
                let y = rng.random::<f64>() * 2.0 - 0.5 + 0.3 * s + 0.2 * a as f64;
                let mut r = row(&format!("c{c}"), &format!("i{i}"), t, a, p, s, y);
                r.available = avail;
                rows.push(r);
            }
        }
    }
    MRTDataset::from_rows(Schema::simulation(1), rows)
}

fn assert_close(label: &str, got: f64, want: f64, tol: f64) {
    let scale = got.abs().max(want.abs()).max(1e-12);
    assert!(
        (got - want).abs() <= tol * scale,
        "{label}: got {got}, reference {want}"
    );
}

fn compare(fit: &FitResult, theta: &DVector<f64>, cov: &DMatrix<f64>) {
    for i in 0..fit.p {
        assert_close("alpha", fit.alpha[i], theta[i], 1e-8);
    }
    for i in 0..fit.q {
        assert_close("beta", fit.beta[i], theta[fit.p + i], 1e-8);
    }
    for i in 0..cov.nrows() {
        for j in 0..cov.ncols() {
            let scale = cov[(i, i)].abs().max(cov[(j, j)].abs()).max(1e-12);
            assert!(
                (fit.covariance[(i, j)] - cov[(i, j)]).abs() <= 1e-8 * scale,
                "cov[{i},{j}]: got {}, reference {}",
                fit.covariance[(i, j)],
                cov[(i, j)]
            );
        }
    }
}

#[test]
fn engine_matches_naive_reference_direct() {
    let mut rng = ChaCha12Rng::seed_from_u64(31337);
    let spec = ModelSpec::marginal("s");
    let plan = WeightPlan::constant(0.5);
    for trial in 0..20 {
        let ds = random_dataset(&mut rng, 1);
        for adjust in [false, true] {
            let opts = FitOptions { adjust };
            for cluster_units in [false, true] {
                let fitted = if cluster_units {
                    fit_cwcls_direct(&ds, &spec, &plan, &ReferencePolicy::Observed, &opts)
                } else {
                    fit_wcls(&ds, &spec, &plan, &ReferencePolicy::Observed, &opts)
                }
                .unwrap_or_else(|e| panic!("trial {trial} fit failed: {e}"));
                let (blocks, n_units) = direct_blocks(&ds, &plan, cluster_units);
                let (theta, cov) = naive_sandwich(&blocks, n_units, 3, adjust);
                assert_eq!(fitted.n_units, n_units);
                compare(&fitted, &theta, &cov);
            }
        }
    }
}

#[test]
fn engine_matches_naive_reference_indirect() {
    let mut rng = ChaCha12Rng::seed_from_u64(777);
    let spec = ModelSpec::marginal("s");
    // Factorized numerator keeps the reference assembly independent of the
    // engine's empirical-table plumbing.
    let plan = WeightPlan::constant(0.4);
    for trial in 0..10 {
        let ds = random_dataset(&mut rng, 2);
        for adjust in [false, true] {
            let opts = FitOptions { adjust };
            let fitted =
                fit_cwcls_indirect(&ds, &spec, &plan, &ReferencePolicy::Observed, &opts)
                    .unwrap_or_else(|e| panic!("trial {trial} fit failed: {e}"));
            let (blocks, n_units) = indirect_blocks(&ds, &spec, &plan);
            let (theta, cov) = naive_sandwich(&blocks, n_units, 3, adjust);
            compare(&fitted, &theta, &cov);
        }
    }
}

/// Frozen external computation (numpy) of the cluster-robust sandwich for a
/// hand-sized dataset: cluster c1 = {a, b}, cluster c2 = {c}, T = 2,
/// g = [1], f = [1], constant numerator 0.5.
#[test]
fn frozen_hand_computed_sandwich() {
    let rows = vec![
        row("c1", "a", 1, 1, 0.5, 0.0, 1.2),
        row("c1", "a", 2, 0, 0.4, 0.0, 0.3),
        row("c1", "b", 1, 0, 0.7, 0.0, -0.4),
        row("c1", "b", 2, 1, 0.6, 0.0, 0.9),
        row("c2", "c", 1, 1, 0.3, 0.0, 2.0),
        row("c2", "c", 2, 0, 0.5, 0.0, -1.0),
    ];
    let ds = MRTDataset::from_rows(Schema::simulation(1), rows);
    let spec = ModelSpec {
        f: excursion::design::FeatureMap::intercept_only(),
        g: excursion::design::FeatureMap::intercept_only(),
    };
    let plan = WeightPlan::constant(0.5);

    let unadj =
        fit_cwcls_direct(&ds, &spec, &plan, &ReferencePolicy::Observed, &FitOptions { adjust: false })
            .unwrap();
    assert_close("theta0", unadj.alpha[0], 0.5653524492234169, 1e-12);
    assert_close("theta1", unadj.beta[0], 2.2047789725209084, 1e-12);
    assert_close("Q00", unadj.bread[(0, 0)], 4.833333333333334, 1e-12);
    assert_close("Q01", unadj.bread[(0, 1)], 0.16666666666666674, 1e-12);
    assert_close("Q11", unadj.bread[(1, 1)], 1.2083333333333335, 1e-12);
    assert_close("L00", unadj.meat[(0, 0)], 0.016489453572738705, 1e-10);
    assert_close("L01", unadj.meat[(0, 1)], 0.09231924335789901, 1e-10);
    assert_close("L11", unadj.meat[(1, 1)], 0.5168662901156059, 1e-10);
    assert_close("cov00", unadj.covariance[(0, 0)], 3.6969033670706886e-05, 1e-10);
    assert_close("cov01", unadj.covariance[(0, 1)], 0.0036125079236710564, 1e-10);
    assert_close("cov11", unadj.covariance[(1, 1)], 0.3530039117286071, 1e-10);

    let adj =
        fit_cwcls_direct(&ds, &spec, &plan, &ReferencePolicy::Observed, &FitOptions { adjust: true })
            .unwrap();
    assert_close("adj L00", adj.meat[(0, 0)], 0.5486930208173959, 1e-10);
    assert_close("adj L01", adj.meat[(0, 1)], 0.740598182919962, 1e-10);
    assert_close("adj L11", adj.meat[(1, 1)], 2.286696275470402, 1e-10);
    assert_close("adj cov00", adj.covariance[(0, 0)], 0.016763360824117116, 1e-10);
    assert_close("adj cov01", adj.covariance[(0, 1)], 0.07083908973607159, 1e-10);
    assert_close("adj cov11", adj.covariance[(1, 1)], 1.5462950916516016, 1e-10);
}
