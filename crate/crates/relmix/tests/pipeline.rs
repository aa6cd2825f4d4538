//! End-to-end pipeline tests: generator-to-fit recovery, the join
//! baseline, and experiment harness behavior at small scale.

use relmix::compiler::compile;
use relmix::data::{mask_cells, standardize};
use relmix::engine::{fit, AttrPosterior, FitConfig, InitMethod};
use relmix::synth::{
    default_win_matrix, generate, head_to_head_experiment, join_baseline,
    missing_value_experiment, umr_gen_params, umr_model_config, UmrSizes,
};

/// Fitting the model on data generated from itself with well-separated
/// components recovers the true component means up to label permutation
/// within 3 posterior standard deviations.
#[test]
fn recovers_true_user_age_means_up_to_permutation() {
    let params = umr_gen_params(200, 120, 4000, 11);
    let (mut data, _) = generate(&params).unwrap();
    standardize(&mut data);
    let config = umr_model_config();
    let spec = compile(&params.schema, &config).unwrap();
    let (state, report) = fit(
        &spec,
        &data,
        &FitConfig {
            max_sweeps: 120,
            tol: 1e-8,
            seed: 11,
            init: InitMethod::Stratified,
            ..FitConfig::default()
        },
    )
    .unwrap();
    assert!(report.sweeps > 1);

    // users table is model 0; age is its second attribute.
    let (means, sds): (Vec<f64>, Vec<f64>) = match &state.tables[0].attrs[1] {
        AttrPosterior::Gaussian { mean, prec } => {
            let _ = prec;
            (mean.iter().map(|m| m.mean).collect(), mean.iter().map(|m| m.variance.sqrt()).collect())
        }
        other => panic!("{other:?}"),
    };
    // Posterior means are in standardized units; map the truth there.
    let transform = match &data.tables[0].columns[2] {
        relmix::data::ColumnData::Real { transform, .. } => transform.unwrap(),
        other => panic!("{other:?}"),
    };
    let truth: Vec<f64> = [20.0, 28.0, 36.0, 44.0].iter().map(|&m| transform.apply(m)).collect();

    // Best assignment over all 4! permutations.
    let k = truth.len();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut perm: Vec<usize> = (0..k).collect();
    permutohedron_heap(&mut perm, &mut |p: &[usize]| {
        let cost: f64 =
            (0..k).map(|i| (means[p[i]] - truth[i]).abs()).sum();
        if best.as_ref().map(|(_, c)| cost < *c).unwrap_or(true) {
            best = Some((p.to_vec(), cost));
        }
    });
    let (assignment, _) = best.unwrap();
    for i in 0..k {
        let err = (means[assignment[i]] - truth[i]).abs();
        let tol = 3.0 * sds[assignment[i]];
        assert!(
            err <= tol.max(0.05),
            "component {i}: |{} - {}| = {err} > {tol}",
            means[assignment[i]],
            truth[i]
        );
    }
}

fn permutohedron_heap(items: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    // Heap's algorithm.
    fn heap(n: usize, items: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
        if n == 1 {
            visit(items);
            return;
        }
        for i in 0..n {
            heap(n - 1, items, visit);
            if n % 2 == 0 {
                items.swap(i, n - 1);
            } else {
                items.swap(0, n - 1);
            }
        }
    }
    let n = items.len();
    heap(n, items, visit);
}

#[test]
fn head_to_head_recovers_tiers() {
    let win = default_win_matrix(3);
    let result = head_to_head_experiment(90, 3000, &win, 3, 0).unwrap();
    assert!(result.agreement >= 0.8, "adjusted agreement {}", result.agreement);
    // Ordered by win rate, the mean-result matrix is monotone: better
    // row players win more, better column opponents reduce the mean.
    let m = &result.matrix;
    for i in 0..3 {
        for j in 0..3 {
            let v = m[i][j].expect("every cluster pair has matches");
            assert!((0.0..=1.0).contains(&v));
        }
    }
    for j in 0..3 {
        assert!(m[2][j].unwrap() > m[0][j].unwrap(), "column {j} not increasing in row rank");
    }
    for i in 0..3 {
        assert!(m[i][0].unwrap() > m[i][2].unwrap(), "row {i} not decreasing in column rank");
    }
}

#[test]
fn relational_beats_join_baseline_on_score() {
    let sizes = UmrSizes { users: 120, movies: 80, ratings: 2500 };
    let fit_cfg = FitConfig { max_sweeps: 40, tol: 1e-6, ..FitConfig::default() };
    let result =
        missing_value_experiment(&sizes, &[0.2, 0.5], &[5], &fit_cfg).unwrap();
    let score_rmse = |model: &str, fraction: f64| -> f64 {
        result
            .rows
            .iter()
            .find(|r| {
                r.model == model && r.attribute == "ratings.score" && r.fraction == fraction
            })
            .map(|r| r.rmse)
            .expect("row present")
    };
    for &fraction in &[0.2, 0.5] {
        let rel = score_rmse("relational", fraction);
        let base = score_rmse("join_baseline", fraction);
        assert!(
            rel <= base,
            "fraction {fraction}: relational {rel} vs baseline {base}"
        );
    }
    // The CSV serialization carries both model series.
    let csv = result.to_csv();
    assert!(csv.starts_with("fraction,model,attribute,rmse\n"));
    assert!(csv.contains("relational"));
    assert!(csv.contains("join_baseline"));
}

#[test]
fn full_scale_fit_runs_ten_monotone_sweeps() {
    // 943 users, 1,682 movies, 100,000 ratings; a fixed budget of ten
    // sweeps yields a trace of exactly that length, never decreasing.
    let params = umr_gen_params(943, 1682, 100_000, 4);
    let (mut data, _) = generate(&params).unwrap();
    assert_eq!(data.tables[0].n_rows, 943);
    assert_eq!(data.tables[1].n_rows, 1682);
    assert_eq!(data.tables[2].n_rows, 100_000);
    standardize(&mut data);
    let spec = compile(&params.schema, &umr_model_config()).unwrap();
    let (_, report) = fit(
        &spec,
        &data,
        &FitConfig {
            max_sweeps: 10,
            tol: 1e-300,
            seed: 4,
            init: InitMethod::Stratified,
            ..FitConfig::default()
        },
    )
    .unwrap();
    assert_eq!(report.elbo_trace.len(), 10);
    for w in report.elbo_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn mask_then_join_keeps_cells_masked() {
    let params = umr_gen_params(30, 20, 200, 2);
    let (clean, _) = generate(&params).unwrap();
    let mut masked = clean.clone();
    let truth = mask_cells(&mut masked, 0.3, 9).unwrap();
    assert!(!truth.is_empty());
    let joined = join_baseline(&params.schema, &masked).unwrap();
    // Every masked leaf cell stays masked in the joined table.
    let score_col = &joined.dataset.tables[0].columns[0];
    let mask = score_col.missing_mask().unwrap();
    for cell in truth.iter().filter(|c| c.table == 2) {
        assert!(mask[cell.row], "masked score cell {} resurfaced", cell.row);
    }
}
