//! Exact expectations of gate-configuration indicators under the
//! mean-field posterior.
//!
//! A row's gate configuration is determined by the components of the rows
//! its foreign keys reference. Edges into *different* parent tables are
//! independent under the posterior, but edges that can reference the same
//! parent row are not: two match slots pointing at one player must see the
//! same component. Treating those as independent would silently invalidate
//! the ELBO bound, so edges are grouped by parent table and each group's
//! joint indicator expectation is computed exactly (enumerating latent
//! foreign-key assignments where needed).

use crate::compiler::ModelSpec;
use crate::data::{ColumnData, Dataset};
use crate::engine::state::{PosteriorState, Resp};
use crate::error::{Error, Result};
use crate::special::digamma;

/// Cap on latent-assignment enumeration per group tensor.
const MAX_LEAVES: usize = 1_000_000;

/// Read access to responsibilities. Implementations dispatch between the
/// live state and the buffer of the table currently being updated, or, for
/// queries, between trained rows and query-local records.
pub(crate) trait RespLookup {
    fn resp_row(&self, model: usize, row: usize) -> &[f64];
}

/// Plain view over a posterior state.
pub(crate) struct StateResp<'a> {
    pub state: &'a PosteriorState,
}

impl RespLookup for StateResp<'_> {
    fn resp_row(&self, model: usize, row: usize) -> &[f64] {
        self.state.tables[model].resp.row(row)
    }
}

/// View that redirects one table's rows to a working buffer.
pub(crate) struct ActiveResp<'a> {
    pub state: &'a PosteriorState,
    pub active_model: usize,
    pub active: &'a Resp,
}

impl RespLookup for ActiveResp<'_> {
    fn resp_row(&self, model: usize, row: usize) -> &[f64] {
        if model == self.active_model {
            self.active.row(row)
        } else {
            self.state.tables[model].resp.row(row)
        }
    }
}

/// One foreign-key slot of a row: either resolved to a parent row or
/// latent with a posterior over candidate parent rows.
#[derive(Clone, Copy)]
pub(crate) enum Member<'a> {
    Resolved(usize),
    Latent(&'a [f64]),
}

/// Edges of one row sharing a parent table.
pub(crate) struct Group<'a> {
    pub parent_model: usize,
    pub k: usize,
    /// Positions of this group's edges in the row's full edge list.
    pub edge_pos: Vec<usize>,
    pub members: Vec<Member<'a>>,
}

/// A known component value for one specific row, conditioning the
/// expectations (used when computing messages *to* that row).
#[derive(Clone, Copy)]
pub(crate) struct Pin {
    pub model: usize,
    pub row: usize,
    pub k: usize,
}

/// Joint indicator expectation of one group, as a dense tensor over the
/// group's edge values. A pinned tensor carries a trailing axis over the
/// pinned row's component value.
pub(crate) struct GroupTensor {
    pub k: usize,
    pub pinned: bool,
    pub k_pin: usize,
    /// Length k^n_edges × (pinned ? k_pin : 1); pin axis fastest.
    pub data: Vec<f64>,
}

/// Builds the edge groups of one row, optionally forcing one edge to a
/// specific parent row (used for candidate scoring and child messages).
pub(crate) fn row_groups<'a>(
    spec: &ModelSpec,
    data: &Dataset,
    state: &'a PosteriorState,
    model: usize,
    row: usize,
    force: Option<(usize, usize)>,
) -> Result<Vec<Group<'a>>> {
    let tm = &spec.tables[model];
    let td = &data.tables[tm.schema_idx];
    let mut groups: Vec<Group<'a>> = Vec::new();
    for (e, edge) in tm.gate.edges.iter().enumerate() {
        let member = if let Some((fe, fr)) = force {
            if fe == e {
                Member::Resolved(fr)
            } else {
                member_for(state, td, model, row, e, edge.column)?
            }
        } else {
            member_for(state, td, model, row, e, edge.column)?
        };
        match groups.iter_mut().find(|g| g.parent_model == edge.parent_model) {
            Some(g) => {
                g.edge_pos.push(e);
                g.members.push(member);
            }
            None => groups.push(Group {
                parent_model: edge.parent_model,
                k: tm.gate.parent_ks[e],
                edge_pos: vec![e],
                members: vec![member],
            }),
        }
    }
    Ok(groups)
}

fn member_for<'a>(
    state: &'a PosteriorState,
    td: &crate::data::TableData,
    model: usize,
    row: usize,
    edge: usize,
    column: usize,
) -> Result<Member<'a>> {
    match &td.columns[column] {
        ColumnData::Fk { values, missing } => {
            if missing[row] {
                let cell = state.tables[model].fk_cell(edge, row).ok_or_else(|| {
                    Error::Model(format!(
                        "missing FK posterior for table model {model} row {row} edge {edge}"
                    ))
                })?;
                Ok(Member::Latent(&cell.probs))
            } else {
                Ok(Member::Resolved(values[row] as usize))
            }
        }
        _ => Err(Error::Model("foreign-key column data mismatch".into())),
    }
}

/// Builds the joint tensor for one group.
pub(crate) fn build_tensor(
    group: &Group,
    pin: Option<Pin>,
    resp: &impl RespLookup,
) -> Result<GroupTensor> {
    let k = group.k;
    let pm = group.parent_model;
    // The pin only binds this group if some member can reference the
    // pinned row.
    let pin = pin.filter(|p| {
        p.model == pm
            && group.members.iter().any(|m| match m {
                Member::Resolved(r) => *r == p.row,
                Member::Latent(_) => true,
            })
    });
    let m = group.members.len();
    match (m, pin) {
        (1, None) => {
            let data = match group.members[0] {
                Member::Resolved(r) => resp.resp_row(pm, r).to_vec(),
                Member::Latent(q) => {
                    let mut out = vec![0.0; k];
                    for (j, &qj) in q.iter().enumerate() {
                        if qj > 0.0 {
                            let rr = resp.resp_row(pm, j);
                            for (o, &x) in out.iter_mut().zip(rr) {
                                *o += qj * x;
                            }
                        }
                    }
                    out
                }
            };
            Ok(GroupTensor { k, pinned: false, k_pin: 1, data })
        }
        (1, Some(p)) => {
            let mut data = vec![0.0; k * p.k];
            match group.members[0] {
                Member::Resolved(r) => {
                    debug_assert_eq!(r, p.row);
                    for v in 0..k.min(p.k) {
                        data[v * p.k + v] = 1.0;
                    }
                }
                Member::Latent(q) => {
                    let q_pin = q.get(p.row).copied().unwrap_or(0.0);
                    for (j, &qj) in q.iter().enumerate() {
                        if j != p.row && qj > 0.0 {
                            let rr = resp.resp_row(pm, j);
                            for v in 0..k {
                                let base = qj * rr[v];
                                for c in 0..p.k {
                                    data[v * p.k + c] += base;
                                }
                            }
                        }
                    }
                    for v in 0..k.min(p.k) {
                        data[v * p.k + v] += q_pin;
                    }
                }
            }
            Ok(GroupTensor { k, pinned: true, k_pin: p.k, data })
        }
        (2, None)
            if matches!(group.members[0], Member::Latent(_))
                && matches!(group.members[1], Member::Latent(_)) =>
        {
            // Both slots latent over the same parent: expectation of the
            // indicator product is the product of marginals corrected for
            // candidate collisions (where both slots pick the same row the
            // components must agree).
            let (q1, q2) = match (group.members[0], group.members[1]) {
                (Member::Latent(a), Member::Latent(b)) => (a, b),
                _ => unreachable!(),
            };
            let mut m1 = vec![0.0; k];
            let mut m2 = vec![0.0; k];
            let mut cross = vec![0.0; k * k];
            let mut diag = vec![0.0; k];
            for j in 0..q1.len().max(q2.len()) {
                let a = q1.get(j).copied().unwrap_or(0.0);
                let b = q2.get(j).copied().unwrap_or(0.0);
                if a == 0.0 && b == 0.0 {
                    continue;
                }
                let rr = resp.resp_row(pm, j);
                for v in 0..k {
                    m1[v] += a * rr[v];
                    m2[v] += b * rr[v];
                }
                let ab = a * b;
                if ab > 0.0 {
                    for v1 in 0..k {
                        diag[v1] += ab * rr[v1];
                        for v2 in 0..k {
                            cross[v1 * k + v2] += ab * rr[v1] * rr[v2];
                        }
                    }
                }
            }
            let mut data = vec![0.0; k * k];
            for v1 in 0..k {
                for v2 in 0..k {
                    let mut x = m1[v1] * m2[v2] - cross[v1 * k + v2];
                    if v1 == v2 {
                        x += diag[v1];
                    }
                    data[v1 * k + v2] = x.max(0.0);
                }
            }
            Ok(GroupTensor { k, pinned: false, k_pin: 1, data })
        }
        _ => leaf_enumeration(group, pin, resp),
    }
}

/// General exact computation: enumerate latent-slot assignments, group the
/// resolved slots by row, and accumulate consistent value combinations.
fn leaf_enumeration(
    group: &Group,
    pin: Option<Pin>,
    resp: &impl RespLookup,
) -> Result<GroupTensor> {
    let k = group.k;
    let pm = group.parent_model;
    let m = group.members.len();
    let pinned = pin.is_some();
    let k_pin = pin.map(|p| p.k).unwrap_or(1);
    let mut leaves: usize = 1;
    for member in &group.members {
        if let Member::Latent(q) = member {
            let nz = q.iter().filter(|&&x| x > 0.0).count().max(1);
            leaves = leaves.checked_mul(nz).filter(|&l| l <= MAX_LEAVES).ok_or_else(|| {
                Error::Numeric(
                    "latent foreign-key coupling too large to evaluate exactly".into(),
                )
            })?;
        }
    }
    let size = k.pow(m as u32) * k_pin;
    let mut data = vec![0.0; size];
    let mut rows = vec![usize::MAX; m];
    // Prefill resolved members.
    for (pos, member) in group.members.iter().enumerate() {
        if let Member::Resolved(r) = member {
            rows[pos] = *r;
        }
    }
    recurse_leaves(group, pin, resp, pm, k, k_pin, &mut rows, 0, 1.0, &mut data);
    Ok(GroupTensor { k, pinned, k_pin, data })
}

#[allow(clippy::too_many_arguments)]
fn recurse_leaves(
    group: &Group,
    pin: Option<Pin>,
    resp: &impl RespLookup,
    pm: usize,
    k: usize,
    k_pin: usize,
    rows: &mut Vec<usize>,
    next: usize,
    weight: f64,
    data: &mut [f64],
) {
    if next == group.members.len() {
        add_leaf(pin, resp, pm, k, k_pin, rows, weight, data);
        return;
    }
    match group.members[next] {
        Member::Resolved(_) => recurse_leaves(group, pin, resp, pm, k, k_pin, rows, next + 1, weight, data),
        Member::Latent(q) => {
            for (j, &qj) in q.iter().enumerate() {
                if qj > 0.0 {
                    rows[next] = j;
                    recurse_leaves(group, pin, resp, pm, k, k_pin, rows, next + 1, weight * qj, data);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn add_leaf(
    pin: Option<Pin>,
    resp: &impl RespLookup,
    pm: usize,
    k: usize,
    k_pin: usize,
    rows: &[usize],
    weight: f64,
    data: &mut [f64],
) {
    let m = rows.len();
    // Distinct referenced rows, and which slot belongs to which.
    let mut distinct: Vec<usize> = Vec::with_capacity(m);
    let mut slot_group = vec![0usize; m];
    for (pos, &r) in rows.iter().enumerate() {
        match distinct.iter().position(|&d| d == r) {
            Some(g) => slot_group[pos] = g,
            None => {
                slot_group[pos] = distinct.len();
                distinct.push(r);
            }
        }
    }
    let pin_group = pin.and_then(|p| distinct.iter().position(|&d| d == p.row));
    // The pin row belongs to the parent table, so its component range
    // equals the group's: a pinned digit is always a valid edge value.
    debug_assert!(pin_group.is_none() || k_pin == k);
    let pinned_tensor = k_pin > 1 || pin.is_some();
    let pin_stride = if pinned_tensor { k_pin } else { 1 };
    // Rank of each free distinct-row group in the value counter.
    let free: Vec<usize> =
        (0..distinct.len()).filter(|&g| Some(g) != pin_group).collect();
    let mut free_rank = vec![usize::MAX; distinct.len()];
    for (vi, &g) in free.iter().enumerate() {
        free_rank[g] = vi;
    }
    let mut values = vec![0usize; free.len()];
    loop {
        let mut factor = weight;
        for (vi, &g) in free.iter().enumerate() {
            factor *= resp.resp_row(pm, distinct[g])[values[vi]];
        }
        if factor != 0.0 {
            let c_count = if pinned_tensor { k_pin } else { 1 };
            for c in 0..c_count {
                let mut idx = 0;
                for pos in 0..m {
                    let g = slot_group[pos];
                    let digit =
                        if Some(g) == pin_group { c } else { values[free_rank[g]] };
                    idx = idx * k + digit;
                }
                data[idx * pin_stride + if pinned_tensor { c } else { 0 }] += factor;
            }
        }
        // Advance the mixed-radix counter over free groups.
        let mut done = true;
        for v in values.iter_mut() {
            *v += 1;
            if *v < k {
                done = false;
                break;
            }
            *v = 0;
        }
        if free.is_empty() || done {
            break;
        }
    }
}

/// Mixed-radix digit of a config index for one edge position.
#[inline]
fn digit(s: usize, strides: &[usize], ks: &[usize], e: usize) -> usize {
    (s / strides[e]) % ks[e]
}

/// W(s) for every configuration s: the posterior probability that the
/// row's parents take configuration s. All tensors must be unpinned.
pub(crate) fn config_weights(
    tensors: &[(Vec<usize>, GroupTensor)],
    strides: &[usize],
    ks: &[usize],
    configs: usize,
) -> Vec<f64> {
    let mut w = vec![1.0; configs];
    for (s, out) in w.iter_mut().enumerate() {
        for (edge_pos, tensor) in tensors {
            let mut idx = 0;
            for &e in edge_pos {
                idx = idx * tensor.k + digit(s, strides, ks, e);
            }
            *out *= tensor.data[idx];
            if *out == 0.0 {
                break;
            }
        }
    }
    w
}

/// Convenience: group + tensor build + weight evaluation for one row.
pub(crate) fn config_weights_for_row(
    spec: &ModelSpec,
    data: &Dataset,
    state: &PosteriorState,
    resp: &impl RespLookup,
    model: usize,
    row: usize,
    force: Option<(usize, usize)>,
) -> Result<Vec<f64>> {
    let tm = &spec.tables[model];
    if tm.gate.edges.is_empty() {
        return Ok(vec![1.0]);
    }
    let groups = row_groups(spec, data, state, model, row, force)?;
    let strides = tm.gate.strides();
    let mut tensors = Vec::with_capacity(groups.len());
    for g in &groups {
        tensors.push((g.edge_pos.clone(), build_tensor(g, None, resp)?));
    }
    Ok(config_weights(&tensors, &strides, &tm.gate.parent_ks, tm.gate.configs))
}

/// Expected log gate weights E[log π(c | s)] for every table model,
/// flattened configs × k.
pub(crate) fn expected_log_gates(state: &PosteriorState) -> Vec<Vec<f64>> {
    state
        .tables
        .iter()
        .map(|ts| {
            let gate = &ts.gate;
            let mut out = vec![0.0; gate.configs * gate.k];
            for s in 0..gate.configs {
                let row = gate.row(s);
                let total: f64 = row.iter().sum();
                let dg_total = digamma(total);
                for (c, &a) in row.iter().enumerate() {
                    out[s * gate.k + c] = digamma(a) - dg_total;
                }
            }
            out
        })
        .collect()
}

/// Accumulates a pinned message over all configurations: for each pinned
/// component value c, Σ_s w_free(s) · pinned(s, c) · Σ_c' r(c') elog[s][c'].
pub(crate) fn accumulate_pinned_message(
    tensors: &[(Vec<usize>, GroupTensor)],
    strides: &[usize],
    ks: &[usize],
    configs: usize,
    child_k: usize,
    elog_table: &[f64],
    child_resp: &[f64],
    out: &mut [f64],
) {
    for s in 0..configs {
        let mut inner = 0.0;
        for (c, &r) in child_resp.iter().enumerate() {
            inner += r * elog_table[s * child_k + c];
        }
        let mut w_free = 1.0;
        let mut pin_part: Option<(&GroupTensor, usize)> = None;
        for (edge_pos, tensor) in tensors {
            let mut idx = 0;
            for &e in edge_pos {
                idx = idx * tensor.k + digit(s, strides, ks, e);
            }
            if tensor.pinned {
                pin_part = Some((tensor, idx));
            } else {
                w_free *= tensor.data[idx];
            }
        }
        match pin_part {
            Some((tensor, idx)) => {
                if w_free != 0.0 {
                    let base = idx * tensor.k_pin;
                    for (c, o) in out.iter_mut().enumerate() {
                        *o += w_free * tensor.data[base + c] * inner;
                    }
                }
            }
            None => {
                // The forced edge always pins its group; unreachable, but
                // a broadcast keeps the math consistent if it ever isn't.
                for o in out.iter_mut() {
                    *o += w_free * inner;
                }
            }
        }
    }
}

/// Message from one child row to the component values of a target parent
/// row through a specific edge: for each component value c of the target,
/// the expected log gate factor of the child given z(target) = c.
/// The caller weights the result by q(edge resolves to target) when the
/// edge is latent.
#[allow(clippy::too_many_arguments)]
pub(crate) fn child_message(
    spec: &ModelSpec,
    data: &Dataset,
    state: &PosteriorState,
    resp: &impl RespLookup,
    elog: &[Vec<f64>],
    child_model: usize,
    row: usize,
    edge: usize,
    target_model: usize,
    target_row: usize,
) -> Result<Vec<f64>> {
    let tm = &spec.tables[child_model];
    let pin = Pin { model: target_model, row: target_row, k: spec.tables[target_model].k };
    let groups = row_groups(spec, data, state, child_model, row, Some((edge, target_row)))?;
    let strides = tm.gate.strides();
    let mut tensors = Vec::with_capacity(groups.len());
    for g in &groups {
        tensors.push((g.edge_pos.clone(), build_tensor(g, Some(pin), resp)?));
    }
    let mut out = vec![0.0; pin.k];
    accumulate_pinned_message(
        &tensors,
        &strides,
        &tm.gate.parent_ks,
        tm.gate.configs,
        tm.k,
        &elog[child_model],
        resp.resp_row(child_model, row),
        &mut out,
    );
    Ok(out)
}
