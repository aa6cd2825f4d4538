//! Post-training inference: predict missing cells in the training data,
//! answer probabilistic queries over small sets of new partial records
//! with frozen parameters, and export cluster assignments.

use std::collections::{BTreeMap, HashMap};

use serde_json::Value as Json;

use crate::compiler::ModelSpec;
use crate::data::{ColumnData, Dataset, Standardization};
use crate::engine::gate::{
    accumulate_pinned_message, build_tensor, config_weights, expected_log_gates, Group, Member,
    Pin, RespLookup,
};
use crate::engine::updates::AttrEval;
use crate::engine::{AttrPosterior, PosteriorState};
use crate::error::{Error, Result};
use crate::expfam::softmax;
use crate::posterior::PosteriorFile;
use crate::schema::{AttributeType, ColumnRole};

/// Marginal posterior belief over one missing entry.
#[derive(Debug, Clone)]
pub enum Marginal {
    Real { mean: f64, variance: f64, weights: Vec<f64> },
    Levels { levels: Vec<String>, probs: Vec<f64> },
    Bernoulli { p_true: f64 },
    ParentRows { keys: Vec<String>, probs: Vec<f64> },
}

/// Who a prediction is about: a training row or a query-local record.
#[derive(Debug, Clone)]
pub enum RowId {
    Index(usize),
    Local(String),
}

impl std::fmt::Display for RowId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RowId::Index(i) => write!(f, "{i}"),
            RowId::Local(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub table: String,
    pub row: RowId,
    pub column: String,
    pub marginal: Marginal,
    /// Schema indices for programmatic matching.
    pub table_idx: usize,
    pub row_idx: Option<usize>,
    pub column_idx: usize,
}

/// Predictive marginal of one attribute cell under a responsibility
/// vector and trained per-component posteriors.
pub(crate) fn attribute_predictive(
    resp: &[f64],
    post: &AttrPosterior,
    transform: Option<Standardization>,
    levels: Option<&[String]>,
) -> Marginal {
    match post {
        AttrPosterior::Gaussian { mean, prec } => {
            let mut mix_mean = 0.0;
            let mut second = 0.0;
            for (c, &r) in resp.iter().enumerate() {
                let m = mean[c].mean;
                // Student-t component predictive: the Gamma posterior
                // widens E[τ]⁻¹ to rate/(shape−1); fall back to the plain
                // inverse mean precision when the variance is undefined.
                let tau_var = if prec[c].shape > 1.0 {
                    prec[c].rate / (prec[c].shape - 1.0)
                } else {
                    prec[c].rate / prec[c].shape
                };
                let var_c = mean[c].variance + tau_var;
                mix_mean += r * m;
                second += r * (var_c + m * m);
            }
            let mut variance = (second - mix_mean * mix_mean).max(0.0);
            let mut out_mean = mix_mean;
            if let Some(tr) = transform {
                out_mean = tr.invert(mix_mean);
                variance *= tr.scale * tr.scale;
            }
            Marginal::Real { mean: out_mean, variance, weights: resp.to_vec() }
        }
        AttrPosterior::Discrete { conc } => {
            let n_levels = conc[0].len();
            let mut probs = vec![0.0; n_levels];
            for (c, &r) in resp.iter().enumerate() {
                let total: f64 = conc[c].iter().sum();
                for (v, &a) in conc[c].iter().enumerate() {
                    probs[v] += r * a / total;
                }
            }
            let levels = levels
                .map(|l| l.to_vec())
                .unwrap_or_else(|| (0..n_levels).map(|v| v.to_string()).collect());
            Marginal::Levels { levels, probs }
        }
        AttrPosterior::Bernoulli { params } => {
            let p_true = resp
                .iter()
                .enumerate()
                .map(|(c, &r)| r * params[c].mean())
                .sum();
            Marginal::Bernoulli { p_true }
        }
    }
}

/// One prediction per missing attribute cell and per latent foreign key
/// in the training data, using the trained responsibilities.
pub fn predict_missing_cells(
    state: &PosteriorState,
    spec: &ModelSpec,
    data: &Dataset,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (t, tm) in spec.tables.iter().enumerate() {
        let td = &data.tables[tm.schema_idx];
        let ts = &state.tables[t];
        if ts.resp.n_rows() != td.n_rows {
            return Err(Error::Model(format!(
                "state for table '{}' has {} rows, dataset has {}",
                tm.name,
                ts.resp.n_rows(),
                td.n_rows
            )));
        }
        for (pos, am) in tm.attrs.iter().enumerate() {
            let col = &td.columns[am.column];
            let mask = col.missing_mask().expect("attribute columns carry masks");
            let (transform, levels) = match col {
                ColumnData::Real { transform, .. } => (*transform, None),
                ColumnData::Cat { levels, .. } => (None, Some(levels.as_slice())),
                _ => (None, None),
            };
            for (row, &missing) in mask.iter().enumerate() {
                if missing {
                    let marginal = attribute_predictive(
                        ts.resp.row(row),
                        &ts.attrs[pos],
                        transform,
                        levels,
                    );
                    out.push(Prediction {
                        table: tm.name.clone(),
                        row: RowId::Index(row),
                        column: am.name.clone(),
                        marginal,
                        table_idx: tm.schema_idx,
                        row_idx: Some(row),
                        column_idx: am.column,
                    });
                }
            }
        }
        for (e, edge) in tm.gate.edges.iter().enumerate() {
            let parent_keys = &data.tables[edge.parent_schema].key.inverse;
            for cell in &ts.fks[e] {
                out.push(Prediction {
                    table: tm.name.clone(),
                    row: RowId::Index(cell.row),
                    column: spec.schema.tables[tm.schema_idx].columns[edge.column].name.clone(),
                    marginal: Marginal::ParentRows {
                        keys: parent_keys.clone(),
                        probs: cell.probs.clone(),
                    },
                    table_idx: tm.schema_idx,
                    row_idx: Some(cell.row),
                    column_idx: edge.column,
                });
            }
        }
    }
    Ok(out)
}

/// Hard cluster assignment per row: argmax responsibility, ties toward
/// the lowest index.
pub fn cluster_assignments(
    state: &PosteriorState,
    spec: &ModelSpec,
    table: &str,
) -> Result<Vec<(usize, f64)>> {
    let t = spec
        .model_index(table)
        .ok_or_else(|| Error::Query(format!("unknown table '{table}'")))?;
    let resp = &state.tables[t].resp;
    if resp.n_rows() == 0 {
        return Err(Error::Query(format!(
            "posterior has no responsibilities for table '{table}' (written with --no-resp)"
        )));
    }
    Ok((0..resp.n_rows())
        .map(|i| {
            let row = resp.row(i);
            let mut best = 0;
            let mut best_p = row[0];
            for (c, &p) in row.iter().enumerate().skip(1) {
                if p > best_p {
                    best = c;
                    best_p = p;
                }
            }
            (best, best_p)
        })
        .collect())
}

/// A partial record in a probabilistic query.
#[derive(Debug, Clone)]
pub struct QueryRecord {
    pub table: String,
    pub id: String,
    pub bindings: BTreeMap<String, Binding>,
}

#[derive(Debug, Clone)]
pub enum Binding {
    Value(Json),
    Ref(String),
    Unknown,
}

/// Parses the query file: a JSON list of records
/// `{"table", "id", "bindings": {column: value | null | {"ref": id}}}`.
pub fn parse_query(text: &str) -> Result<Vec<QueryRecord>> {
    let raw: Json = serde_json::from_str(text)?;
    let list = raw
        .as_array()
        .ok_or_else(|| Error::Query("query file must be a JSON list of records".into()))?;
    let mut records = Vec::with_capacity(list.len());
    for (i, entry) in list.iter().enumerate() {
        let obj = entry
            .as_object()
            .ok_or_else(|| Error::Query(format!("record {i} is not an object")))?;
        let table = obj
            .get("table")
            .and_then(Json::as_str)
            .ok_or_else(|| Error::Query(format!("record {i} has no \"table\"")))?
            .to_string();
        let id = obj
            .get("id")
            .map(json_literal)
            .unwrap_or_else(|| format!("record{i}"));
        let mut bindings = BTreeMap::new();
        if let Some(binds) = obj.get("bindings") {
            let binds = binds
                .as_object()
                .ok_or_else(|| Error::Query(format!("record {i}: bindings must be an object")))?;
            for (col, v) in binds {
                let binding = match v {
                    Json::Null => Binding::Unknown,
                    Json::Object(m) => {
                        let r = m.get("ref").ok_or_else(|| {
                            Error::Query(format!("record {i}: object binding needs \"ref\""))
                        })?;
                        Binding::Ref(json_literal(r))
                    }
                    other => Binding::Value(other.clone()),
                };
                bindings.insert(col.clone(), binding);
            }
        }
        records.push(QueryRecord { table, id, bindings });
    }
    Ok(records)
}

fn json_literal(v: &Json) -> String {
    match v {
        Json::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// A typed, resolved attribute cell of a query record.
enum BoundCell {
    Real(f64),
    Cat(u32),
    Bool(bool),
}

enum FkBinding {
    Existing(usize),
    LocalRecord(usize),
    Latent,
}

struct ResolvedRecord {
    model: usize,
    id: String,
    /// (attr position in the table model, cell) for observed cells.
    observed: Vec<(usize, BoundCell)>,
    /// (attr position, column idx) for unknown attribute cells.
    unknown_attrs: Vec<(usize, usize)>,
    /// Per gate edge.
    fks: Vec<FkBinding>,
}

/// Reusable query surface over one trained posterior: key lookups are
/// built once, so each `answer` call costs time proportional to the query
/// size, not the training-set size.
pub struct QuerySession<'a> {
    file: &'a PosteriorFile,
    state: &'a PosteriorState,
    key_maps: Vec<HashMap<String, usize>>,
    elog: Vec<Vec<f64>>,
    evals: Vec<Vec<AttrEval>>,
}

struct QueryResp<'a> {
    state: &'a PosteriorState,
    /// Per model: local responsibilities of records, addressed as virtual
    /// rows at indices >= the trained row count.
    local: &'a [Vec<Vec<f64>>],
    n_train: &'a [usize],
}

impl RespLookup for QueryResp<'_> {
    fn resp_row(&self, model: usize, row: usize) -> &[f64] {
        let n = self.n_train[model];
        if row < n {
            self.state.tables[model].resp.row(row)
        } else {
            &self.local[model][row - n]
        }
    }
}

impl<'a> QuerySession<'a> {
    pub fn new(file: &'a PosteriorFile, state: &'a PosteriorState) -> QuerySession<'a> {
        let key_maps = file
            .spec
            .tables
            .iter()
            .map(|tm| {
                file.keys_for(&tm.name)
                    .map(|keys| {
                        keys.iter()
                            .enumerate()
                            .map(|(i, k)| (k.clone(), i))
                            .collect::<HashMap<_, _>>()
                    })
                    .unwrap_or_default()
            })
            .collect();
        let elog = expected_log_gates(state);
        let evals = state
            .tables
            .iter()
            .map(|ts| ts.attrs.iter().map(AttrEval::build).collect())
            .collect();
        QuerySession { file, state, key_maps, elog, evals }
    }

    fn resolve(&self, records: &[QueryRecord]) -> Result<Vec<ResolvedRecord>> {
        let spec = &self.file.spec;
        let mut local_ids: HashMap<&str, usize> = HashMap::new();
        for (i, rec) in records.iter().enumerate() {
            if local_ids.insert(rec.id.as_str(), i).is_some() {
                return Err(Error::Query(format!("duplicate local record id '{}'", rec.id)));
            }
        }
        let bindings = self.file.bindings();
        let mut resolved = Vec::with_capacity(records.len());
        let mut any_unknown = false;
        for rec in records {
            let model = spec
                .model_index(&rec.table)
                .ok_or_else(|| Error::Query(format!("unknown table '{}'", rec.table)))?;
            let tm = &spec.tables[model];
            let schema_table = &spec.schema.tables[tm.schema_idx];
            for col in rec.bindings.keys() {
                if schema_table.column_index(col).is_none() {
                    return Err(Error::Query(format!(
                        "record '{}': unknown column '{}.{}'",
                        rec.id, rec.table, col
                    )));
                }
            }
            let mut observed = Vec::new();
            let mut unknown_attrs = Vec::new();
            for (pos, am) in tm.attrs.iter().enumerate() {
                let col_name = &am.name;
                match rec.bindings.get(col_name).unwrap_or(&Binding::Unknown) {
                    Binding::Unknown => {
                        unknown_attrs.push((pos, am.column));
                        any_unknown = true;
                    }
                    Binding::Ref(_) => {
                        return Err(Error::Query(format!(
                            "record '{}': attribute column '{}' cannot take a reference",
                            rec.id, col_name
                        )))
                    }
                    Binding::Value(v) => {
                        let role = &schema_table.columns[am.column].role;
                        let cell = parse_cell(
                            v,
                            role,
                            &rec.table,
                            col_name,
                            &bindings,
                        )?;
                        observed.push((pos, cell));
                    }
                }
            }
            let mut fks = Vec::new();
            for edge in &tm.gate.edges {
                let col_name = &schema_table.columns[edge.column].name;
                let parent_name = &spec.tables[edge.parent_model].name;
                let fk = match rec.bindings.get(col_name).unwrap_or(&Binding::Unknown) {
                    Binding::Unknown => {
                        let n_parent = self.key_maps[edge.parent_model].len();
                        if n_parent > spec.config.limits.fk_candidate_cap {
                            return Err(Error::Query(format!(
                                "record '{}' column '{}': latent foreign key over {} candidates \
                                 exceeds the cap {}",
                                rec.id, col_name, n_parent, spec.config.limits.fk_candidate_cap
                            )));
                        }
                        any_unknown = true;
                        FkBinding::Latent
                    }
                    Binding::Ref(r) => {
                        if let Some(&local) = local_ids.get(r.as_str()) {
                            if records[local].table != *parent_name {
                                return Err(Error::Query(format!(
                                    "record '{}': reference '{}' is a '{}' record, expected '{}'",
                                    rec.id, r, records[local].table, parent_name
                                )));
                            }
                            FkBinding::LocalRecord(local)
                        } else {
                            FkBinding::Existing(self.lookup_existing(edge.parent_model, r, rec)?)
                        }
                    }
                    Binding::Value(v) => {
                        let literal = json_literal(v);
                        FkBinding::Existing(self.lookup_existing(edge.parent_model, &literal, rec)?)
                    }
                };
                fks.push(fk);
            }
            resolved.push(ResolvedRecord {
                model,
                id: rec.id.clone(),
                observed,
                unknown_attrs,
                fks,
            });
        }
        if !any_unknown {
            return Err(Error::Query("query has no unknown entries to predict".into()));
        }
        // Local references always point from a child table to a parent
        // table, and those form a DAG; a cycle means the bindings were
        // inconsistent with the schema.
        self.check_acyclic(&resolved)?;
        Ok(resolved)
    }

    fn lookup_existing(&self, parent_model: usize, key: &str, rec: &QueryRecord) -> Result<usize> {
        let row = self.key_maps[parent_model].get(key).copied().ok_or_else(|| {
            Error::Query(format!(
                "record '{}': no row of '{}' has primary key '{}'",
                rec.id, self.file.spec.tables[parent_model].name, key
            ))
        })?;
        if row >= self.state.tables[parent_model].resp.n_rows() {
            return Err(Error::Query(
                "posterior was written without responsibilities; existing-row references \
                 need a posterior file written with them"
                    .into(),
            ));
        }
        Ok(row)
    }

    fn check_acyclic(&self, resolved: &[ResolvedRecord]) -> Result<()> {
        let n = resolved.len();
        let mut mark = vec![0u8; n]; // 0 unseen, 1 in progress, 2 done
        fn visit(i: usize, resolved: &[ResolvedRecord], mark: &mut [u8]) -> Result<()> {
            if mark[i] == 1 {
                return Err(Error::Query("cyclic local references".into()));
            }
            if mark[i] == 2 {
                return Ok(());
            }
            mark[i] = 1;
            for fk in &resolved[i].fks {
                if let FkBinding::LocalRecord(j) = fk {
                    visit(*j, resolved, mark)?;
                }
            }
            mark[i] = 2;
            Ok(())
        }
        for i in 0..n {
            visit(i, resolved, &mut mark)?;
        }
        Ok(())
    }

    /// Runs restricted message passing over the query records' latent
    /// variables with all trained parameters frozen, then returns one
    /// prediction per unknown entry.
    pub fn answer(&self, records: &[QueryRecord], iters: usize) -> Result<Vec<Prediction>> {
        let spec = &self.file.spec;
        let resolved = self.resolve(records)?;
        let n_models = spec.tables.len();
        let n_train: Vec<usize> =
            (0..n_models).map(|m| self.state.tables[m].resp.n_rows()).collect();

        // Local record state: uniform responsibilities, uniform latent FKs.
        let mut local: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_models];
        let mut virtual_row = vec![0usize; resolved.len()];
        for (i, rec) in resolved.iter().enumerate() {
            let k = spec.tables[rec.model].k;
            virtual_row[i] = n_train[rec.model] + local[rec.model].len();
            local[rec.model].push(vec![1.0 / k as f64; k]);
        }
        let mut fk_dists: Vec<Vec<Option<Vec<f64>>>> =
            resolved.iter().map(|rec| vec![None; rec.fks.len()]).collect();
        for (i, rec) in resolved.iter().enumerate() {
            for (e, fk) in rec.fks.iter().enumerate() {
                if matches!(fk, FkBinding::Latent) {
                    let parent_model = spec.tables[rec.model].gate.edges[e].parent_model;
                    let n = n_train[parent_model];
                    if n == 0 {
                        return Err(Error::Query(
                            "posterior was written without responsibilities; latent \
                             foreign keys need candidate beliefs"
                                .into(),
                        ));
                    }
                    fk_dists[i][e] = Some(vec![1.0 / n as f64; n]);
                }
            }
        }

        // Children among query records.
        let mut children: Vec<Vec<(usize, usize)>> = vec![Vec::new(); resolved.len()];
        for (i, rec) in resolved.iter().enumerate() {
            for (e, fk) in rec.fks.iter().enumerate() {
                if let FkBinding::LocalRecord(j) = fk {
                    children[*j].push((i, e));
                }
            }
        }

        // Record update order: tables in topological order, then input order.
        let mut order: Vec<usize> = (0..resolved.len()).collect();
        order.sort_by_key(|&i| (resolved[i].model, i));

        for _ in 0..iters {
            for &i in &order {
                self.update_record_resp(
                    &resolved,
                    &mut local,
                    &fk_dists,
                    &children,
                    &virtual_row,
                    &n_train,
                    i,
                )?;
            }
            for &i in &order {
                self.update_record_fks(
                    &resolved,
                    &local,
                    &mut fk_dists,
                    &virtual_row,
                    &n_train,
                    i,
                )?;
            }
        }

        // Emit predictions for every unknown entry.
        let bindings = self.file.bindings();
        let mut out = Vec::new();
        for (i, rec) in resolved.iter().enumerate() {
            let tm = &spec.tables[rec.model];
            let schema_table = &spec.schema.tables[tm.schema_idx];
            let resp = &local[rec.model][virtual_row[i] - n_train[rec.model]];
            for &(pos, column) in &rec.unknown_attrs {
                let am = &tm.attrs[pos];
                let col_name = &am.name;
                let transform =
                    bindings.transforms.get(&(tm.name.clone(), col_name.clone())).copied();
                let levels = bindings
                    .levels
                    .get(&(tm.name.clone(), col_name.clone()))
                    .map(|l| l.as_slice());
                let marginal = attribute_predictive(
                    resp,
                    &self.state.tables[rec.model].attrs[pos],
                    transform,
                    levels,
                );
                out.push(Prediction {
                    table: tm.name.clone(),
                    row: RowId::Local(rec.id.clone()),
                    column: col_name.clone(),
                    marginal,
                    table_idx: tm.schema_idx,
                    row_idx: None,
                    column_idx: column,
                });
            }
            for (e, fk) in rec.fks.iter().enumerate() {
                if matches!(fk, FkBinding::Latent) {
                    let edge = &tm.gate.edges[e];
                    let keys = self
                        .file
                        .keys_for(&spec.tables[edge.parent_model].name)
                        .unwrap_or(&[])
                        .to_vec();
                    out.push(Prediction {
                        table: tm.name.clone(),
                        row: RowId::Local(rec.id.clone()),
                        column: schema_table.columns[edge.column].name.clone(),
                        marginal: Marginal::ParentRows {
                            keys,
                            probs: fk_dists[i][e].clone().unwrap_or_default(),
                        },
                        table_idx: tm.schema_idx,
                        row_idx: None,
                        column_idx: edge.column,
                    });
                }
            }
        }
        Ok(out)
    }

    fn record_groups<'b>(
        &self,
        resolved: &[ResolvedRecord],
        fk_dists: &'b [Vec<Option<Vec<f64>>>],
        virtual_row: &[usize],
        rec_idx: usize,
        force: Option<(usize, usize)>,
    ) -> Vec<Group<'b>> {
        let rec = &resolved[rec_idx];
        let tm = &self.file.spec.tables[rec.model];
        let mut groups: Vec<Group<'b>> = Vec::new();
        for (e, edge) in tm.gate.edges.iter().enumerate() {
            let member = if let Some((fe, fr)) = force {
                if fe == e {
                    Member::Resolved(fr)
                } else {
                    self.member_for(&rec.fks[e], &fk_dists[rec_idx][e], virtual_row)
                }
            } else {
                self.member_for(&rec.fks[e], &fk_dists[rec_idx][e], virtual_row)
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
        groups
    }

    fn member_for<'b>(
        &self,
        fk: &FkBinding,
        dist: &'b Option<Vec<f64>>,
        virtual_row: &[usize],
    ) -> Member<'b> {
        match fk {
            FkBinding::Existing(row) => Member::Resolved(*row),
            FkBinding::LocalRecord(j) => Member::Resolved(virtual_row[*j]),
            FkBinding::Latent => Member::Latent(dist.as_ref().expect("latent dist")),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn update_record_resp(
        &self,
        resolved: &[ResolvedRecord],
        local: &mut [Vec<Vec<f64>>],
        fk_dists: &[Vec<Option<Vec<f64>>>],
        children: &[Vec<(usize, usize)>],
        virtual_row: &[usize],
        n_train: &[usize],
        rec_idx: usize,
    ) -> Result<()> {
        let spec = &self.file.spec;
        let rec = &resolved[rec_idx];
        let tm = &spec.tables[rec.model];
        let k = tm.k;
        let mut scores = vec![0.0; k];
        let view = QueryResp { state: self.state, local: &*local, n_train };

        // Gate term.
        let groups = self.record_groups(resolved, fk_dists, virtual_row, rec_idx, None);
        let strides = tm.gate.strides();
        let mut tensors = Vec::with_capacity(groups.len());
        for g in &groups {
            tensors.push((g.edge_pos.clone(), build_tensor(g, None, &view)?));
        }
        let w = if tm.gate.edges.is_empty() {
            vec![1.0]
        } else {
            config_weights(&tensors, &strides, &tm.gate.parent_ks, tm.gate.configs)
        };
        let table_elog = &self.elog[rec.model];
        for (s, &ws) in w.iter().enumerate() {
            if ws != 0.0 {
                for (c, score) in scores.iter_mut().enumerate() {
                    *score += ws * table_elog[s * k + c];
                }
            }
        }

        // Observed attribute evidence.
        for (pos, cell) in &rec.observed {
            let eval = &self.evals[rec.model][*pos];
            for (c, score) in scores.iter_mut().enumerate() {
                *score += eval_cell(eval, cell, c);
            }
        }

        // Messages from query records that reference this one.
        for &(child_idx, edge) in &children[rec_idx] {
            let child = &resolved[child_idx];
            let ctm = &spec.tables[child.model];
            let pin = Pin { model: rec.model, row: virtual_row[rec_idx], k };
            let child_groups = self.record_groups(
                resolved,
                fk_dists,
                virtual_row,
                child_idx,
                Some((edge, virtual_row[rec_idx])),
            );
            let child_strides = ctm.gate.strides();
            let mut child_tensors = Vec::with_capacity(child_groups.len());
            for g in &child_groups {
                child_tensors.push((g.edge_pos.clone(), build_tensor(g, Some(pin), &view)?));
            }
            let child_resp = &local[child.model][virtual_row[child_idx] - n_train[child.model]];
            accumulate_pinned_message(
                &child_tensors,
                &child_strides,
                &ctm.gate.parent_ks,
                ctm.gate.configs,
                ctm.k,
                &self.elog[child.model],
                child_resp,
                &mut scores,
            );
        }

        let probs = softmax(&scores);
        local[rec.model][virtual_row[rec_idx] - n_train[rec.model]] = probs;
        Ok(())
    }

    fn update_record_fks(
        &self,
        resolved: &[ResolvedRecord],
        local: &[Vec<Vec<f64>>],
        fk_dists: &mut [Vec<Option<Vec<f64>>>],
        virtual_row: &[usize],
        n_train: &[usize],
        rec_idx: usize,
    ) -> Result<()> {
        let spec = &self.file.spec;
        let rec = &resolved[rec_idx];
        let tm = &spec.tables[rec.model];
        let k = tm.k;
        let view = QueryResp { state: self.state, local, n_train };
        for e in 0..tm.gate.edges.len() {
            if fk_dists[rec_idx][e].is_none() {
                continue;
            }
            let parent_model = tm.gate.edges[e].parent_model;
            let n_parent = n_train[parent_model];
            let resp = &local[rec.model][virtual_row[rec_idx] - n_train[rec.model]];
            let table_elog = &self.elog[rec.model];
            let inner: Vec<f64> = (0..tm.gate.configs)
                .map(|s| {
                    resp.iter().enumerate().map(|(c, &r)| r * table_elog[s * k + c]).sum()
                })
                .collect();
            let strides = tm.gate.strides();
            let mut scores = vec![0.0; n_parent];
            for (j, score) in scores.iter_mut().enumerate() {
                let groups =
                    self.record_groups(resolved, fk_dists, virtual_row, rec_idx, Some((e, j)));
                let mut tensors = Vec::with_capacity(groups.len());
                for g in &groups {
                    tensors.push((g.edge_pos.clone(), build_tensor(g, None, &view)?));
                }
                let w = config_weights(&tensors, &strides, &tm.gate.parent_ks, tm.gate.configs);
                *score = w.iter().zip(&inner).map(|(a, b)| a * b).sum();
            }
            fk_dists[rec_idx][e] = Some(softmax(&scores));
        }
        Ok(())
    }
}

/// One-shot query answering. Builds a [`QuerySession`] and runs the
/// restricted message passing; callers issuing many queries against one
/// posterior should hold a session instead, so key lookups are built once.
pub fn answer_query(
    file: &PosteriorFile,
    state: &PosteriorState,
    records: &[QueryRecord],
    iters: usize,
) -> Result<Vec<Prediction>> {
    QuerySession::new(file, state).answer(records, iters)
}

fn parse_cell(
    v: &Json,
    role: &ColumnRole,
    table: &str,
    column: &str,
    bindings: &crate::data::Bindings,
) -> Result<BoundCell> {
    let ty = match role {
        ColumnRole::Attribute(ty) => ty,
        _ => return Err(Error::Query(format!("column '{table}.{column}' is not an attribute"))),
    };
    match ty {
        AttributeType::Real => {
            let x = match v {
                Json::Number(n) => n.as_f64(),
                Json::String(s) => s.parse().ok(),
                _ => None,
            }
            .ok_or_else(|| {
                Error::Query(format!("column '{table}.{column}': expected a real, got {v}"))
            })?;
            let tr = bindings.transforms.get(&(table.to_string(), column.to_string()));
            Ok(BoundCell::Real(tr.map(|t| t.apply(x)).unwrap_or(x)))
        }
        AttributeType::Boolean => {
            let b = match v {
                Json::Bool(b) => Some(*b),
                Json::String(s) => match s.to_ascii_lowercase().as_str() {
                    "true" | "t" | "1" => Some(true),
                    "false" | "f" | "0" => Some(false),
                    _ => None,
                },
                _ => None,
            }
            .ok_or_else(|| {
                Error::Query(format!("column '{table}.{column}': expected a boolean, got {v}"))
            })?;
            Ok(BoundCell::Bool(b))
        }
        AttributeType::Categorical { .. } => {
            let name = json_literal(v);
            let levels = bindings
                .levels
                .get(&(table.to_string(), column.to_string()))
                .ok_or_else(|| {
                    Error::Query(format!("column '{table}.{column}' has no level table"))
                })?;
            let idx = levels.iter().position(|l| l == &name).ok_or_else(|| {
                Error::Query(format!(
                    "column '{table}.{column}': value '{name}' is not a trained level"
                ))
            })?;
            Ok(BoundCell::Cat(idx as u32))
        }
    }
}

fn eval_cell(eval: &AttrEval, cell: &BoundCell, c: usize) -> f64 {
    match (eval, cell) {
        (AttrEval::Gauss { half_elogtau, e_tau, e_mu, e_mu2 }, BoundCell::Real(x)) => {
            half_elogtau[c] - 0.5 * e_tau[c] * (x * x - 2.0 * x * e_mu[c] + e_mu2[c])
        }
        (AttrEval::Disc { elog }, BoundCell::Cat(v)) => elog[c][*v as usize],
        (AttrEval::Bern { lt, lf }, BoundCell::Bool(b)) => {
            if *b {
                lt[c]
            } else {
                lf[c]
            }
        }
        _ => f64::NEG_INFINITY,
    }
}

/// Renders predictions as CSV: table,row,column,kind,payload (JSON).
pub fn predictions_to_csv(predictions: &[Prediction]) -> String {
    let mut out = String::from("table,row,column,kind,payload\n");
    for p in predictions {
        let (kind, payload) = match &p.marginal {
            Marginal::Real { mean, variance, weights } => (
                "real",
                serde_json::json!({"mean": mean, "variance": variance, "weights": weights}),
            ),
            Marginal::Levels { levels, probs } => {
                ("categorical", serde_json::json!({"levels": levels, "probs": probs}))
            }
            Marginal::Bernoulli { p_true } => ("boolean", serde_json::json!({"p_true": p_true})),
            Marginal::ParentRows { keys, probs } => {
                ("foreign_key", serde_json::json!({"keys": keys, "probs": probs}))
            }
        };
        let payload = payload.to_string().replace('"', "\"\"");
        out.push_str(&format!("{},{},{},{},\"{}\"\n", p.table, p.row, p.column, kind, payload));
    }
    out
}

/// Renders cluster assignments as CSV: row,key,component,probability.
pub fn clusters_to_csv(keys: &[String], assignments: &[(usize, f64)]) -> String {
    let mut out = String::from("row,key,component,probability\n");
    for (i, (c, p)) in assignments.iter().enumerate() {
        let key = keys.get(i).map(|s| s.as_str()).unwrap_or("");
        out.push_str(&format!("{i},{key},{c},{p}\n"));
    }
    out
}
