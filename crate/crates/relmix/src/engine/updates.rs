//! The four sweep updates (responsibilities, FK posteriors, gate CPTs,
//! attribute parameters) and the evidence lower bound.
//!
//! Every update is the exact mean-field coordinate maximizer given the
//! current values of all other factors, computed sequentially in a fixed
//! order, so no sweep can decrease the ELBO.

use rayon::prelude::*;

use crate::compiler::Family;
use crate::data::ColumnData;
use crate::engine::gate::{
    child_message, config_weights_for_row, expected_log_gates, ActiveResp, RespLookup, StateResp,
};
use crate::engine::state::{AttrPosterior, PosteriorState};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::expfam::{
    entropy, kl_beta, kl_dirichlet, kl_gamma, kl_gaussian_mean, softmax, BetaParams,
    DirichletParams, GammaParams, GaussianMeanParams,
};
use crate::special::digamma;

const LN_TWO_PI: f64 = 1.8378770664093453;

/// Precomputed per-component moment tables for one attribute, so the row
/// loop evaluates expected log densities in O(1) per component.
pub(crate) enum AttrEval {
    Gauss { half_elogtau: Vec<f64>, e_tau: Vec<f64>, e_mu: Vec<f64>, e_mu2: Vec<f64> },
    Disc { elog: Vec<Vec<f64>> },
    Bern { lt: Vec<f64>, lf: Vec<f64> },
}

impl AttrEval {
    pub(crate) fn build(post: &AttrPosterior) -> AttrEval {
        match post {
            AttrPosterior::Gaussian { mean, prec } => {
                let mut half_elogtau = Vec::with_capacity(mean.len());
                let mut e_tau = Vec::with_capacity(mean.len());
                let mut e_mu = Vec::with_capacity(mean.len());
                let mut e_mu2 = Vec::with_capacity(mean.len());
                for (m, t) in mean.iter().zip(prec) {
                    e_tau.push(t.shape / t.rate);
                    half_elogtau.push(0.5 * (digamma(t.shape) - t.rate.ln() - LN_TWO_PI));
                    e_mu.push(m.mean);
                    e_mu2.push(m.second_moment());
                }
                AttrEval::Gauss { half_elogtau, e_tau, e_mu, e_mu2 }
            }
            AttrPosterior::Discrete { conc } => {
                let elog = conc
                    .iter()
                    .map(|row| {
                        let total: f64 = row.iter().sum();
                        let dg = digamma(total);
                        row.iter().map(|&a| digamma(a) - dg).collect()
                    })
                    .collect();
                AttrEval::Disc { elog }
            }
            AttrPosterior::Bernoulli { params } => {
                let mut lt = Vec::with_capacity(params.len());
                let mut lf = Vec::with_capacity(params.len());
                for p in params {
                    let dg = digamma(p.a + p.b);
                    lt.push(digamma(p.a) - dg);
                    lf.push(digamma(p.b) - dg);
                }
                AttrEval::Bern { lt, lf }
            }
        }
    }

    /// Expected log density of the observed cell under component `c`.
    pub(crate) fn loglik(&self, col: &ColumnData, row: usize, c: usize) -> f64 {
        match (self, col) {
            (AttrEval::Gauss { half_elogtau, e_tau, e_mu, e_mu2 }, ColumnData::Real { values, .. }) => {
                let x = values[row];
                half_elogtau[c] - 0.5 * e_tau[c] * (x * x - 2.0 * x * e_mu[c] + e_mu2[c])
            }
            (AttrEval::Disc { elog }, ColumnData::Cat { values, .. }) => {
                elog[c][values[row] as usize]
            }
            (AttrEval::Bern { lt, lf }, ColumnData::Bool { values, .. }) => {
                if values[row] {
                    lt[c]
                } else {
                    lf[c]
                }
            }
            _ => unreachable!("attribute family and column data are aligned at compile"),
        }
    }
}

impl Engine<'_> {
    fn attr_evals(&self, state: &PosteriorState, t: usize) -> Vec<AttrEval> {
        state.tables[t].attrs.iter().map(AttrEval::build).collect()
    }

    /// Unnormalized log responsibilities for one row.
    #[allow(clippy::too_many_arguments)]
    fn row_scores(
        &self,
        state: &PosteriorState,
        resp: &impl RespLookup,
        elog: &[Vec<f64>],
        evals: &[AttrEval],
        t: usize,
        row: usize,
    ) -> Result<Vec<f64>> {
        let tm = &self.spec.tables[t];
        let td = &self.data.tables[tm.schema_idx];
        let k = tm.k;
        let mut scores = vec![0.0; k];

        // Expected log gate weights under the parents' configuration belief.
        let w = config_weights_for_row(self.spec, self.data, state, resp, t, row, None)?;
        let table_elog = &elog[t];
        for (s, &ws) in w.iter().enumerate() {
            if ws != 0.0 {
                for (c, score) in scores.iter_mut().enumerate() {
                    *score += ws * table_elog[s * k + c];
                }
            }
        }

        // Observed attribute evidence.
        for (eval, am) in evals.iter().zip(&tm.attrs) {
            let col = &td.columns[am.column];
            if let Some(mask) = col.missing_mask() {
                if !mask[row] {
                    for (c, score) in scores.iter_mut().enumerate() {
                        *score += eval.loglik(col, row, c);
                    }
                }
            }
        }

        // Messages from child rows that reference this row.
        for cr in &self.children_obs[t][row] {
            let msg = child_message(
                self.spec,
                self.data,
                state,
                resp,
                elog,
                cr.child as usize,
                cr.row as usize,
                cr.edge as usize,
                t,
                row,
            )?;
            for (score, m) in scores.iter_mut().zip(&msg) {
                *score += m;
            }
        }
        for cr in &self.children_lat[t] {
            let cell = state.tables[cr.child as usize]
                .fk_cell(cr.edge as usize, cr.row as usize)
                .ok_or_else(|| Error::Model("missing latent FK cell".into()))?;
            let q = cell.probs[row];
            if q > 0.0 {
                let msg = child_message(
                    self.spec,
                    self.data,
                    state,
                    resp,
                    elog,
                    cr.child as usize,
                    cr.row as usize,
                    cr.edge as usize,
                    t,
                    row,
                )?;
                for (score, m) in scores.iter_mut().zip(&msg) {
                    *score += q * m;
                }
            }
        }
        Ok(scores)
    }

    /// Recomputes the responsibilities of every row of table model `t`.
    ///
    /// Single-threaded mode updates rows in order, each seeing fresh
    /// values of rows updated before it. Parallel mode computes all rows
    /// from a snapshot and must reproduce the sequential final ELBO within
    /// the engine's parallel tolerance.
    pub fn update_responsibilities(&self, state: &mut PosteriorState, t: usize) -> Result<()> {
        let mut resp = std::mem::take(&mut state.tables[t].resp);
        let elog = expected_log_gates(state);
        let evals = self.attr_evals(state, t);
        let n = resp.n_rows();
        match &self.pool {
            None => {
                for i in 0..n {
                    let view = ActiveResp { state, active_model: t, active: &resp };
                    let scores = self.row_scores(state, &view, &elog, &evals, t, i)?;
                    let probs = softmax(&scores);
                    resp.row_mut(i).copy_from_slice(&probs);
                }
            }
            Some(pool) => {
                let snapshot = resp.clone();
                let view = ActiveResp { state, active_model: t, active: &snapshot };
                let state_ref: &PosteriorState = state;
                let rows: Result<Vec<Vec<f64>>> = pool.install(|| {
                    (0..n)
                        .into_par_iter()
                        .map(|i| {
                            let scores =
                                self.row_scores(state_ref, &view, &elog, &evals, t, i)?;
                            Ok(softmax(&scores))
                        })
                        .collect()
                });
                for (i, probs) in rows?.into_iter().enumerate() {
                    resp.row_mut(i).copy_from_slice(&probs);
                }
            }
        }
        state.tables[t].resp = resp;
        Ok(())
    }

    /// Recomputes the posterior over every latent foreign-key cell of
    /// table model `t`.
    pub fn update_fk_posteriors(&self, state: &mut PosteriorState, t: usize) -> Result<()> {
        let tm = &self.spec.tables[t];
        let k = tm.k;
        for e in 0..tm.gate.edges.len() {
            let mut cells = std::mem::take(&mut state.tables[t].fks[e]);
            if cells.is_empty() {
                state.tables[t].fks[e] = cells;
                continue;
            }
            let elog = expected_log_gates(state);
            let n_parent = self.data.tables[tm.gate.edges[e].parent_schema].n_rows;
            let view = StateResp { state };
            for cell in &mut cells {
                let row = cell.row;
                let resp_row = state.tables[t].resp.row(row);
                let table_elog = &elog[t];
                let inner: Vec<f64> = (0..tm.gate.configs)
                    .map(|s| {
                        resp_row
                            .iter()
                            .enumerate()
                            .map(|(c, &r)| r * table_elog[s * k + c])
                            .sum()
                    })
                    .collect();
                let mut scores = vec![0.0; n_parent];
                for (j, score) in scores.iter_mut().enumerate() {
                    let w = config_weights_for_row(
                        self.spec,
                        self.data,
                        state,
                        &view,
                        t,
                        row,
                        Some((e, j)),
                    )?;
                    *score = w.iter().zip(&inner).map(|(a, b)| a * b).sum();
                }
                // Uniform prior over candidates: the prior adds a constant.
                cell.probs = softmax(&scores);
            }
            state.tables[t].fks[e] = cells;
        }
        Ok(())
    }

    /// Conjugate update of the gate CPT: prior concentration plus the
    /// responsibility mass routed through each (configuration, component)
    /// cell.
    pub fn update_gate_cpt(&self, state: &mut PosteriorState, t: usize) -> Result<()> {
        let tm = &self.spec.tables[t];
        let k = tm.k;
        let n = state.tables[t].resp.n_rows();
        let mut conc = vec![tm.gate.alpha0; tm.gate.configs * k];
        let view = StateResp { state };
        for i in 0..n {
            let w = config_weights_for_row(self.spec, self.data, state, &view, t, i, None)?;
            let r = state.tables[t].resp.row(i);
            for (s, &ws) in w.iter().enumerate() {
                if ws != 0.0 {
                    for (c, &rc) in r.iter().enumerate() {
                        conc[s * k + c] += ws * rc;
                    }
                }
            }
        }
        state.tables[t].gate.conc = conc;
        Ok(())
    }

    /// Conjugate updates of every attribute family from responsibilities
    /// over observed cells. Missing cells contribute to no statistic.
    pub fn update_attribute_params(&self, state: &mut PosteriorState, t: usize) -> Result<()> {
        let tm = &self.spec.tables[t];
        let td = &self.data.tables[tm.schema_idx];
        let k = tm.k;
        let n = td.n_rows;
        for (a, am) in tm.attrs.iter().enumerate() {
            let col = &td.columns[am.column];
            match (&am.family, col) {
                (
                    Family::Gaussian { mean0, precision0, shape0, rate0 },
                    ColumnData::Real { values, missing, .. },
                ) => {
                    let mut n_c = vec![0.0; k];
                    let mut s_c = vec![0.0; k];
                    let mut q_c = vec![0.0; k];
                    for i in 0..n {
                        if !missing[i] {
                            let x = values[i];
                            let r = state.tables[t].resp.row(i);
                            for c in 0..k {
                                n_c[c] += r[c];
                                s_c[c] += r[c] * x;
                                q_c[c] += r[c] * x * x;
                            }
                        }
                    }
                    if let AttrPosterior::Gaussian { mean, prec } = &mut state.tables[t].attrs[a] {
                        for c in 0..k {
                            // Mean update first (given current E[τ]), then
                            // the precision update sees the fresh mean.
                            let e_tau = prec[c].shape / prec[c].rate;
                            let lambda = precision0 + e_tau * n_c[c];
                            let m = (precision0 * mean0 + e_tau * s_c[c]) / lambda;
                            let v = 1.0 / lambda;
                            mean[c] = GaussianMeanParams::new(m, v);
                            let sse =
                                (q_c[c] - 2.0 * m * s_c[c] + n_c[c] * (m * m + v)).max(0.0);
                            prec[c] = GammaParams::new(shape0 + 0.5 * n_c[c], rate0 + 0.5 * sse);
                        }
                    }
                }
                (
                    Family::Discrete { levels, alpha0 },
                    ColumnData::Cat { values, missing, .. },
                ) => {
                    let mut conc = vec![vec![*alpha0; *levels]; k];
                    for i in 0..n {
                        if !missing[i] {
                            let r = state.tables[t].resp.row(i);
                            let v = values[i] as usize;
                            for c in 0..k {
                                conc[c][v] += r[c];
                            }
                        }
                    }
                    state.tables[t].attrs[a] = AttrPosterior::Discrete { conc };
                }
                (Family::Bernoulli { a0, b0 }, ColumnData::Bool { values, missing }) => {
                    let mut params = vec![BetaParams::new(*a0, *b0); k];
                    for i in 0..n {
                        if !missing[i] {
                            let r = state.tables[t].resp.row(i);
                            for c in 0..k {
                                if values[i] {
                                    params[c].a += r[c];
                                } else {
                                    params[c].b += r[c];
                                }
                            }
                        }
                    }
                    state.tables[t].attrs[a] = AttrPosterior::Bernoulli { params };
                }
                _ => {
                    return Err(Error::Model(format!(
                        "column {}.{} data does not match its compiled family",
                        tm.name, am.name
                    )))
                }
            }
        }
        Ok(())
    }

    /// The mean-field evidence lower bound: expected log-likelihood of
    /// observed cells, expected gate log-priors, responsibility and latent
    /// FK entropies, minus KL(q ‖ prior) over every parameter posterior.
    pub fn compute_elbo(&self, state: &PosteriorState) -> Result<f64> {
        let elog = expected_log_gates(state);
        let view = StateResp { state };
        let mut total = 0.0;
        for (t, tm) in self.spec.tables.iter().enumerate() {
            let td = &self.data.tables[tm.schema_idx];
            let ts = &state.tables[t];
            let k = tm.k;
            let evals = self.attr_evals(state, t);
            let table_elog = &elog[t];
            for i in 0..td.n_rows {
                let r = ts.resp.row(i);
                let w = config_weights_for_row(self.spec, self.data, state, &view, t, i, None)?;
                for (s, &ws) in w.iter().enumerate() {
                    if ws != 0.0 {
                        for (c, &rc) in r.iter().enumerate() {
                            total += ws * rc * table_elog[s * k + c];
                        }
                    }
                }
                total += entropy(r);
                for (eval, am) in evals.iter().zip(&tm.attrs) {
                    let col = &td.columns[am.column];
                    if let Some(mask) = col.missing_mask() {
                        if !mask[i] {
                            for (c, &rc) in r.iter().enumerate() {
                                total += rc * eval.loglik(col, i, c);
                            }
                        }
                    }
                }
            }
            // Latent foreign keys: expected log uniform prior plus entropy.
            for (e, cells) in ts.fks.iter().enumerate() {
                let n_parent = self.data.tables[tm.gate.edges[e].parent_schema].n_rows as f64;
                for cell in cells {
                    total += entropy(&cell.probs) - n_parent.ln();
                }
            }
            // Parameter KL penalties.
            let gate_prior = DirichletParams::symmetric(k, tm.gate.alpha0);
            for s in 0..tm.gate.configs {
                let q = DirichletParams { concentration: ts.gate.row(s).to_vec() };
                total -= kl_dirichlet(&gate_prior, &q)?;
            }
            for (am, post) in tm.attrs.iter().zip(&ts.attrs) {
                match (&am.family, post) {
                    (
                        Family::Gaussian { mean0, precision0, shape0, rate0 },
                        AttrPosterior::Gaussian { mean, prec },
                    ) => {
                        let mu_prior = GaussianMeanParams::new(*mean0, 1.0 / precision0);
                        let tau_prior = GammaParams::new(*shape0, *rate0);
                        for (m, p) in mean.iter().zip(prec) {
                            total -= kl_gaussian_mean(&mu_prior, m);
                            total -= kl_gamma(&tau_prior, p);
                        }
                    }
                    (
                        Family::Discrete { levels, alpha0 },
                        AttrPosterior::Discrete { conc },
                    ) => {
                        let prior = DirichletParams::symmetric(*levels, *alpha0);
                        for row in conc {
                            let q = DirichletParams { concentration: row.clone() };
                            total -= kl_dirichlet(&prior, &q)?;
                        }
                    }
                    (Family::Bernoulli { a0, b0 }, AttrPosterior::Bernoulli { params }) => {
                        let prior = BetaParams::new(*a0, *b0);
                        for p in params {
                            total -= kl_beta(&prior, p);
                        }
                    }
                    _ => return Err(Error::Model("state does not match spec".into())),
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::Numeric(format!("ELBO is not finite: {total}")));
        }
        Ok(total)
    }
}
