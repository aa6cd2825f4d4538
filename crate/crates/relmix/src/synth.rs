//! Synthetic data generation from the generative model, the join-table
//! baseline, and the benchmark harnesses.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma as GammaDist, Normal};

use crate::compiler::compile;
use crate::data::{
    mask_cells, standardize, ColumnData, Dataset, KeyIndex, TableData,
};
use crate::engine::{fit, FitConfig, PosteriorState};
use crate::error::{Error, Result};
use crate::expfam::softmax;
use crate::query::{predict_missing_cells, Marginal, Prediction};
use crate::schema::{parse_ddl, AttributeType, Column, ColumnRole, ModelConfig, Schema, Table};

/// True generative parameters for one table.
#[derive(Debug, Clone)]
pub struct TrueTable {
    pub k: usize,
    /// configs × k rows, each normalized; a single row for root tables.
    pub cpt: Vec<Vec<f64>>,
    pub attrs: Vec<TrueAttr>,
    pub rows: usize,
}

#[derive(Debug, Clone)]
pub enum TrueAttr {
    Gaussian { means: Vec<f64>, sds: Vec<f64> },
    Categorical { probs: Vec<Vec<f64>>, levels: Vec<String> },
    Bernoulli { p: Vec<f64> },
}

/// Full generator specification: schema plus aligned true parameters.
#[derive(Debug, Clone)]
pub struct GenParams {
    pub schema: Schema,
    /// Aligned with `schema.tables`.
    pub tables: Vec<TrueTable>,
    pub seed: u64,
}

fn sample_discrete(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Ancestral sampling: per table in topological order, sample FKs
/// uniformly over parent rows, the component from the gate CPT row for
/// the sampled parent components, then attributes from the component
/// parameters. Returns the dataset and the true component of every row.
pub fn generate(params: &GenParams) -> Result<(Dataset, Vec<Vec<usize>>)> {
    let schema = &params.schema;
    schema.validate()?;
    for (t, table) in schema.tables.iter().enumerate() {
        let tt = &params.tables[t];
        let expected_configs: usize = schema
            .parent_indices(t)
            .iter()
            .map(|&p| params.tables[p].k)
            .product();
        if tt.cpt.len() != expected_configs || tt.cpt.iter().any(|row| row.len() != tt.k) {
            return Err(Error::Model(format!(
                "true CPT for table '{}' has the wrong shape",
                table.name
            )));
        }
        if tt.attrs.len() != table.attributes().len() {
            return Err(Error::Model(format!(
                "true attribute parameters for table '{}' have the wrong arity",
                table.name
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let order = schema.topo_indices()?;
    let mut z_all: Vec<Vec<usize>> = vec![Vec::new(); schema.tables.len()];
    let mut tables: Vec<Option<TableData>> = vec![None; schema.tables.len()];
    for &t in &order {
        let table = &schema.tables[t];
        let tt = &params.tables[t];
        let n = tt.rows;
        let parent_ks: Vec<usize> =
            schema.parent_indices(t).iter().map(|&p| params.tables[p].k).collect();
        let fk_cols = table.foreign_keys();
        // Sample FKs uniformly, then components from the CPT.
        let mut fk_values: Vec<Vec<u32>> = vec![vec![0; n]; fk_cols.len()];
        let mut z = Vec::with_capacity(n);
        for row in 0..n {
            let mut config = 0usize;
            for (e, &col) in fk_cols.iter().enumerate() {
                let parent = match &table.columns[col].role {
                    ColumnRole::ForeignKey { table: target, .. } => {
                        schema.table_index(target).unwrap()
                    }
                    _ => unreachable!(),
                };
                let parent_rows = params.tables[parent].rows;
                let j = rng.gen_range(0..parent_rows);
                fk_values[e][row] = j as u32;
                config = config * parent_ks[e] + z_all[parent][j];
            }
            z.push(sample_discrete(&mut rng, &tt.cpt[config]));
        }
        // Sample attributes per component.
        let mut columns: Vec<ColumnData> = Vec::with_capacity(table.columns.len());
        let mut attr_idx = 0;
        let mut fk_idx = 0;
        for col in &table.columns {
            match &col.role {
                ColumnRole::PrimaryKey | ColumnRole::Ignored => {
                    columns.push(ColumnData::Unmodeled)
                }
                ColumnRole::ForeignKey { .. } => {
                    columns.push(ColumnData::Fk {
                        values: std::mem::take(&mut fk_values[fk_idx]),
                        missing: vec![false; n],
                    });
                    fk_idx += 1;
                }
                ColumnRole::Attribute(_) => {
                    let data = match &tt.attrs[attr_idx] {
                        TrueAttr::Gaussian { means, sds } => {
                            let mut values = Vec::with_capacity(n);
                            for &zi in &z {
                                let dist = Normal::new(means[zi], sds[zi]).map_err(|e| {
                                    Error::Model(format!("bad Gaussian parameters: {e}"))
                                })?;
                                values.push(dist.sample(&mut rng));
                            }
                            ColumnData::Real { values, missing: vec![false; n], transform: None }
                        }
                        TrueAttr::Categorical { probs, levels } => {
                            let values =
                                z.iter().map(|&zi| sample_discrete(&mut rng, &probs[zi]) as u32).collect();
                            ColumnData::Cat {
                                values,
                                missing: vec![false; n],
                                levels: levels.clone(),
                            }
                        }
                        TrueAttr::Bernoulli { p } => {
                            let values = z.iter().map(|&zi| rng.gen::<f64>() < p[zi]).collect();
                            ColumnData::Bool { values, missing: vec![false; n] }
                        }
                    };
                    columns.push(data);
                    attr_idx += 1;
                }
            }
        }
        let key = KeyIndex::from_literals(
            &table.name,
            (0..n).map(|i| i.to_string()).collect(),
        )?;
        tables[t] = Some(TableData { name: table.name.clone(), n_rows: n, key, columns });
        z_all[t] = z;
    }
    let dataset = Dataset {
        tables: tables.into_iter().map(|t| t.expect("all tables generated")).collect(),
        warnings: Vec::new(),
    };
    Ok((dataset, z_all))
}

/// The schema a generated UMR dataset conforms to, with the category
/// level count already resolved.
pub fn umr_schema() -> Schema {
    let raw = parse_ddl(
        "CREATE TABLE users (id INT PRIMARY KEY, gender BOOLEAN, age REAL);\n\
         CREATE TABLE movies (id INT PRIMARY KEY, category TEXT, year REAL);\n\
         CREATE TABLE ratings (id INT PRIMARY KEY, user_id INT, movie_id INT, score REAL,\n\
           FOREIGN KEY (user_id) REFERENCES users (id),\n\
           FOREIGN KEY (movie_id) REFERENCES movies (id));",
    )
    .expect("fixed schema parses");
    crate::schema::apply_config(&raw, &umr_model_config()).expect("fixed overrides apply")
}

pub const UMR_USER_K: usize = 4;
pub const UMR_MOVIE_K: usize = 3;
pub const UMR_RATING_K: usize = 5;
/// Concentration of the Dirichlet the true rating CPT rows are drawn
/// from; small values make parent components informative.
pub const UMR_CPT_CONCENTRATION: f64 = 0.3;
const MOVIE_GENRES: [&str; 4] = ["action", "comedy", "drama", "documentary"];

fn dirichlet_row(rng: &mut ChaCha8Rng, len: usize, alpha: f64) -> Vec<f64> {
    let gamma = GammaDist::new(alpha, 1.0).expect("alpha > 0");
    let mut row: Vec<f64> = (0..len).map(|_| gamma.sample(rng).max(1e-12)).collect();
    let sum: f64 = row.iter().sum();
    for v in &mut row {
        *v /= sum;
    }
    row
}

/// Default synthetic User-Movie-Rating generator. Component means are
/// separated by 4 true standard deviations, root mixing weights are
/// uniform, and the rating CPT rows are sampled from a concentrated
/// Dirichlet so parent components carry information about the child.
pub fn umr_gen_params(users: usize, movies: usize, ratings: usize, seed: u64) -> GenParams {
    let schema = umr_schema();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let rating_cpt: Vec<Vec<f64>> = (0..UMR_USER_K * UMR_MOVIE_K)
        .map(|_| dirichlet_row(&mut rng, UMR_RATING_K, UMR_CPT_CONCENTRATION))
        .collect();
    let users_table = TrueTable {
        k: UMR_USER_K,
        cpt: vec![vec![1.0 / UMR_USER_K as f64; UMR_USER_K]],
        attrs: vec![
            TrueAttr::Bernoulli { p: vec![0.9, 0.7, 0.3, 0.1] },
            TrueAttr::Gaussian {
                means: vec![20.0, 28.0, 36.0, 44.0],
                sds: vec![2.0; UMR_USER_K],
            },
        ],
        rows: users,
    };
    let movies_table = TrueTable {
        k: UMR_MOVIE_K,
        cpt: vec![vec![1.0 / UMR_MOVIE_K as f64; UMR_MOVIE_K]],
        attrs: vec![
            TrueAttr::Categorical {
                probs: (0..UMR_MOVIE_K)
                    .map(|c| {
                        (0..4).map(|v| if v == c { 0.85 } else { 0.05 }).collect()
                    })
                    .collect(),
                levels: MOVIE_GENRES.iter().map(|s| s.to_string()).collect(),
            },
            TrueAttr::Gaussian {
                means: vec![1950.0, 1980.0, 2010.0],
                sds: vec![7.5; UMR_MOVIE_K],
            },
        ],
        rows: movies,
    };
    let ratings_table = TrueTable {
        k: UMR_RATING_K,
        cpt: rating_cpt,
        attrs: vec![TrueAttr::Gaussian {
            means: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            sds: vec![0.25; UMR_RATING_K],
        }],
        rows: ratings,
    };
    GenParams { schema, tables: vec![users_table, movies_table, ratings_table], seed }
}

/// Model configuration matching the UMR generator's component counts.
pub fn umr_model_config() -> ModelConfig {
    let mut config = ModelConfig::default()
        .with_components("users", UMR_USER_K)
        .with_components("movies", UMR_MOVIE_K)
        .with_components("ratings", UMR_RATING_K);
    config.overrides.insert(
        "movies.category".into(),
        crate::schema::ColumnOverride::Categorical { levels: Some(4) },
    );
    config
}

/// The head-to-head schema: a player table with no attributes and a match
/// table with two FKs into it plus a Boolean result.
pub fn h2h_schema() -> Schema {
    parse_ddl(
        "CREATE TABLE players (id INT PRIMARY KEY);\n\
         CREATE TABLE matches (id INT PRIMARY KEY, player1 INT, player2 INT, result BOOLEAN,\n\
           FOREIGN KEY (player1) REFERENCES players (id),\n\
           FOREIGN KEY (player2) REFERENCES players (id));",
    )
    .expect("fixed schema parses")
}

/// Default tier win matrix: P(player1 wins) = σ(strength1 − strength2)
/// with tier strengths (−2, 0, 2).
pub fn default_win_matrix(tiers: usize) -> Vec<Vec<f64>> {
    let strengths: Vec<f64> = (0..tiers).map(|t| 2.0 * t as f64 - (tiers - 1) as f64).collect();
    strengths
        .iter()
        .map(|&a| {
            strengths.iter().map(|&b| 1.0 / (1.0 + (-(a - b)).exp())).collect()
        })
        .collect()
}

/// Head-to-head generator: player tiers are uniform, a match result is
/// Bernoulli in the tier win matrix. Expressed in gate form with two
/// match components ("player1 won" / "player2 won").
pub fn h2h_gen_params(players: usize, matches: usize, win: &[Vec<f64>], seed: u64) -> GenParams {
    let tiers = win.len();
    let schema = h2h_schema();
    let mut cpt = Vec::with_capacity(tiers * tiers);
    for row in win {
        for &w in row {
            cpt.push(vec![w, 1.0 - w]);
        }
    }
    let players_table = TrueTable {
        k: tiers,
        cpt: vec![vec![1.0 / tiers as f64; tiers]],
        attrs: vec![],
        rows: players,
    };
    let matches_table = TrueTable {
        k: 2,
        cpt,
        attrs: vec![TrueAttr::Bernoulli { p: vec![1.0, 0.0] }],
        rows: matches,
    };
    GenParams { schema, tables: vec![players_table, matches_table], seed }
}

/// Result of a full FK join: a single-table dataset with one row per
/// leaf-table row, plus provenance for mapping predictions back.
pub struct Joined {
    pub schema: Schema,
    pub dataset: Dataset,
    /// Per joined column: (source table, source column) in the original schema.
    pub origins: Vec<(usize, usize)>,
    /// Per joined column: leaf row -> source row.
    pub row_maps: Vec<Vec<u32>>,
}

/// Joins every table reachable from the unique leaf table along observed
/// foreign keys into one table. Masked attribute cells stay masked.
pub fn join_baseline(schema: &Schema, dataset: &Dataset) -> Result<Joined> {
    if schema.tables.len() == 1 {
        let table = &dataset.tables[0];
        let mut origins = Vec::new();
        let mut row_maps = Vec::new();
        let identity: Vec<u32> = (0..table.n_rows as u32).collect();
        for (c, col) in schema.tables[0].columns.iter().enumerate() {
            if matches!(col.role, ColumnRole::Attribute(_)) {
                origins.push((0, c));
                row_maps.push(identity.clone());
            }
        }
        return Ok(Joined {
            schema: schema.clone(),
            dataset: dataset.clone(),
            origins,
            row_maps,
        });
    }
    // The unique leaf: a table no foreign key points at.
    let mut referenced = vec![false; schema.tables.len()];
    for t in 0..schema.tables.len() {
        for p in schema.parent_indices(t) {
            referenced[p] = true;
        }
    }
    let leaves: Vec<usize> = (0..schema.tables.len())
        .filter(|&t| !referenced[t] && !schema.parent_indices(t).is_empty())
        .collect();
    if leaves.len() != 1 {
        return Err(Error::Model(format!(
            "join baseline needs exactly one leaf table, found {}",
            leaves.len()
        )));
    }
    let leaf = leaves[0];
    let n = dataset.tables[leaf].n_rows;

    // Walk FK paths, composing row maps.
    let mut columns: Vec<Column> = Vec::new();
    let mut data_cols: Vec<ColumnData> = Vec::new();
    let mut origins: Vec<(usize, usize)> = Vec::new();
    let mut row_maps: Vec<Vec<u32>> = Vec::new();
    let identity: Vec<u32> = (0..n as u32).collect();

    fn visit(
        schema: &Schema,
        dataset: &Dataset,
        table: usize,
        prefix: &str,
        row_map: &[u32],
        columns: &mut Vec<Column>,
        data_cols: &mut Vec<ColumnData>,
        origins: &mut Vec<(usize, usize)>,
        row_maps: &mut Vec<Vec<u32>>,
    ) -> Result<()> {
        let st = &schema.tables[table];
        let td = &dataset.tables[table];
        for (c, col) in st.columns.iter().enumerate() {
            if let ColumnRole::Attribute(ty) = &col.role {
                let name = format!("{prefix}{}", col.name);
                let mapped = match &td.columns[c] {
                    ColumnData::Real { values, missing, transform } => ColumnData::Real {
                        values: row_map.iter().map(|&r| values[r as usize]).collect(),
                        missing: row_map.iter().map(|&r| missing[r as usize]).collect(),
                        transform: *transform,
                    },
                    ColumnData::Cat { values, missing, levels } => ColumnData::Cat {
                        values: row_map.iter().map(|&r| values[r as usize]).collect(),
                        missing: row_map.iter().map(|&r| missing[r as usize]).collect(),
                        levels: levels.clone(),
                    },
                    ColumnData::Bool { values, missing } => ColumnData::Bool {
                        values: row_map.iter().map(|&r| values[r as usize]).collect(),
                        missing: row_map.iter().map(|&r| missing[r as usize]).collect(),
                    },
                    _ => return Err(Error::Model("attribute column data mismatch".into())),
                };
                columns.push(Column { name, role: ColumnRole::Attribute(*ty) });
                data_cols.push(mapped);
                origins.push((table, c));
                row_maps.push(row_map.to_vec());
            }
        }
        for (c, col) in st.columns.iter().enumerate() {
            if let ColumnRole::ForeignKey { table: target, .. } = &col.role {
                let parent = schema.table_index(target).expect("validated");
                let (values, missing) = match &td.columns[c] {
                    ColumnData::Fk { values, missing } => (values, missing),
                    _ => return Err(Error::Model("foreign-key column data mismatch".into())),
                };
                let mut composed = Vec::with_capacity(row_map.len());
                for &r in row_map {
                    if missing[r as usize] {
                        return Err(Error::Model(format!(
                            "join baseline requires observed foreign keys; {}.{} row {} is \
                             missing",
                            st.name, col.name, r
                        )));
                    }
                    composed.push(values[r as usize]);
                }
                let next_prefix = format!("{prefix}{}__", col.name);
                visit(
                    schema, dataset, parent, &next_prefix, &composed, columns, data_cols,
                    origins, row_maps,
                )?;
            }
        }
        Ok(())
    }

    visit(
        schema,
        dataset,
        leaf,
        "",
        &identity,
        &mut columns,
        &mut data_cols,
        &mut origins,
        &mut row_maps,
    )?;

    let joined_schema = Schema {
        tables: vec![Table { name: "joined".into(), columns }],
    };
    let key = KeyIndex::from_literals("joined", (0..n).map(|i| i.to_string()).collect())?;
    let joined_dataset = Dataset {
        tables: vec![TableData {
            name: "joined".into(),
            n_rows: n,
            key,
            columns: data_cols,
        }],
        warnings: Vec::new(),
    };
    Ok(Joined { schema: joined_schema, dataset: joined_dataset, origins, row_maps })
}

/// Root mean squared error over (prediction, truth) pairs.
pub fn rmse(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Numeric("RMSE over an empty set of pairs".into()));
    }
    let mse: f64 =
        pairs.iter().map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pairs.len() as f64;
    Ok(mse.sqrt())
}

/// Least-squares slope/intercept/R² of y against x.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|&v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|&v| (v - my) * (v - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = (sxy * sxy) / (sxx * syy);
    Some((slope, intercept, r2))
}

/// Adjusted Rand index between two hard clusterings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ka = a.iter().max().map(|&m| m + 1).unwrap_or(0);
    let kb = b.iter().max().map(|&m| m + 1).unwrap_or(0);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let choose2 = |n: usize| (n * n.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().flatten().map(|&n| choose2(n)).sum();
    let sum_a: f64 = table.iter().map(|row| choose2(row.iter().sum())).sum();
    let sum_b: f64 = (0..kb)
        .map(|j| choose2(table.iter().map(|row| row[j]).sum()))
        .sum();
    let total = choose2(a.len());
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_ij - expected) / (max - expected)
}

/// One row of the missing-value experiment output.
#[derive(Debug, Clone)]
pub struct MissingValueRow {
    pub fraction: f64,
    pub seed: u64,
    pub model: String,
    pub attribute: String,
    pub rmse: f64,
}

#[derive(Debug, Clone)]
pub struct MissingValueResult {
    pub rows: Vec<MissingValueRow>,
}

impl MissingValueResult {
    /// CSV with columns fraction,model,attribute,rmse (one row per seed).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,model,attribute,rmse\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.fraction, r.model, r.attribute, r.rmse
            ));
        }
        out
    }
}

/// Sizes used by the desk-scale missing-value experiment.
pub struct UmrSizes {
    pub users: usize,
    pub movies: usize,
    pub ratings: usize,
}

impl Default for UmrSizes {
    fn default() -> Self {
        UmrSizes { users: 300, movies: 200, ratings: 8000 }
    }
}

fn real_attribute_names(schema: &Schema) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    for (t, table) in schema.tables.iter().enumerate() {
        for (c, col) in table.columns.iter().enumerate() {
            if matches!(col.role, ColumnRole::Attribute(AttributeType::Real)) {
                out.push((t, c, format!("{}.{}", table.name, col.name)));
            }
        }
    }
    out
}

fn prediction_means(predictions: &[Prediction]) -> BTreeMap<(usize, usize, usize), f64> {
    let mut map = BTreeMap::new();
    for p in predictions {
        if let (Marginal::Real { mean, .. }, Some(row)) = (&p.marginal, p.row_idx) {
            map.insert((p.table_idx, row, p.column_idx), *mean);
        }
    }
    map
}

/// Unconditional predictive mean of a real column in a trained no-FK
/// model: responsibilities fall back to the gate prior weights.
fn unconditional_mean(
    state: &PosteriorState,
    model: usize,
    attr_pos: usize,
    transform: Option<crate::data::Standardization>,
) -> f64 {
    let gate = &state.tables[model].gate;
    let elog: Vec<f64> = {
        let row = gate.row(0);
        let total: f64 = row.iter().sum();
        row.iter().map(|&x| crate::special::digamma(x) - crate::special::digamma(total)).collect()
    };
    let weights = softmax(&elog);
    match crate::query::attribute_predictive(
        &weights,
        &state.tables[model].attrs[attr_pos],
        transform,
        None,
    ) {
        Marginal::Real { mean, .. } => mean,
        _ => unreachable!("real attribute"),
    }
}

/// Fits both the relational model and the join baseline across masking
/// fractions and seeds, reporting per-attribute RMSE on the masked real
/// cells.
pub fn missing_value_experiment(
    sizes: &UmrSizes,
    fractions: &[f64],
    seeds: &[u64],
    fit_config: &FitConfig,
) -> Result<MissingValueResult> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let params = umr_gen_params(sizes.users, sizes.movies, sizes.ratings, seed);
        let (clean, _) = generate(&params)?;
        let config = umr_model_config();
        for &fraction in fractions {
            let mut masked = clean.clone();
            let truth = mask_cells(&mut masked, fraction, seed.wrapping_mul(31).wrapping_add(7))?;
            if truth.is_empty() {
                return Err(Error::Numeric("masking produced no held-out cells".into()));
            }
            // Relational model.
            let mut rel_data = masked.clone();
            standardize(&mut rel_data);
            let spec = compile(&params.schema, &config)?;
            let fit_cfg = FitConfig {
                seed,
                init: crate::engine::InitMethod::Stratified,
                ..fit_config.clone()
            };
            let (state, _) = fit(&spec, &rel_data, &fit_cfg)?;
            let rel_preds = prediction_means(&predict_missing_cells(&state, &spec, &rel_data)?);

            // Join baseline: same masked cells, one flat table.
            let joined = join_baseline(&params.schema, &masked)?;
            let mut base_data = joined.dataset.clone();
            standardize(&mut base_data);
            let base_config = ModelConfig::default().with_components("joined", UMR_RATING_K);
            let base_spec = compile(&joined.schema, &base_config)?;
            let (base_state, _) = fit(&base_spec, &base_data, &fit_cfg)?;
            let base_preds =
                prediction_means(&predict_missing_cells(&base_state, &base_spec, &base_data)?);
            // Base predictions per original cell: average over join copies.
            // Joined tables hold only attribute columns, so the joined
            // column index is also its schema column index.
            let mut base_by_cell: BTreeMap<(usize, usize, usize), (f64, usize)> = BTreeMap::new();
            for (jc, &(ot, oc)) in joined.origins.iter().enumerate() {
                for (leaf_row, &orig_row) in joined.row_maps[jc].iter().enumerate() {
                    if let Some(&mean) = base_preds.get(&(0, leaf_row, jc)) {
                        let entry =
                            base_by_cell.entry((ot, orig_row as usize, oc)).or_insert((0.0, 0));
                        entry.0 += mean;
                        entry.1 += 1;
                    }
                }
            }

            for (t, c, name) in real_attribute_names(&params.schema) {
                let mut rel_pairs = Vec::new();
                let mut base_pairs = Vec::new();
                for cell in &truth {
                    if cell.table == t && cell.column == c {
                        let truth_value = match cell.value {
                            crate::data::CellValue::Real(v) => v,
                            _ => continue,
                        };
                        if let Some(&mean) = rel_preds.get(&(t, cell.row, c)) {
                            rel_pairs.push((mean, truth_value));
                        }
                        let base_mean = match base_by_cell.get(&(t, cell.row, c)) {
                            Some((sum, count)) => sum / *count as f64,
                            None => fallback_mean(&joined, &base_state, &base_spec, t, c),
                        };
                        base_pairs.push((base_mean, truth_value));
                    }
                }
                if rel_pairs.is_empty() {
                    continue;
                }
                rows.push(MissingValueRow {
                    fraction,
                    seed,
                    model: "relational".into(),
                    attribute: name.clone(),
                    rmse: rmse(&rel_pairs)?,
                });
                rows.push(MissingValueRow {
                    fraction,
                    seed,
                    model: "join_baseline".into(),
                    attribute: name,
                    rmse: rmse(&base_pairs)?,
                });
            }
        }
    }
    Ok(MissingValueResult { rows })
}

fn fallback_mean(
    joined: &Joined,
    base_state: &PosteriorState,
    base_spec: &crate::compiler::ModelSpec,
    table: usize,
    column: usize,
) -> f64 {
    // A cell never covered by the join: use the unconditional predictive.
    let jc = joined
        .origins
        .iter()
        .position(|&(t, c)| t == table && c == column)
        .expect("origin for every real attribute");
    let attr_pos = base_spec.tables[0]
        .attrs
        .iter()
        .position(|a| a.column == jc)
        .expect("attribute in joined model");
    let transform = match &joined.dataset.tables[0].columns[jc] {
        ColumnData::Real { transform, .. } => *transform,
        _ => None,
    };
    unconditional_mean(base_state, 0, attr_pos, transform)
}

#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub rows: usize,
    pub k: usize,
    pub seconds_per_sweep: f64,
}

#[derive(Debug, Clone)]
pub struct ScalingResult {
    pub rows: Vec<ScalingRow>,
    /// R² of seconds-per-sweep against leaf rows for the base-K series,
    /// when at least three counts were measured.
    pub r_squared: Option<f64>,
}

impl ScalingResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rows,K,seconds_per_sweep\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.rows, r.k, r.seconds_per_sweep));
        }
        out
    }
}

/// Measures seconds per sweep against the leaf-table row count, at the
/// default component counts and with every K doubled.
pub fn scaling_experiment(
    leaf_rows: &[usize],
    sweeps: usize,
    seed: u64,
) -> Result<ScalingResult> {
    let mut rows = Vec::new();
    // Untimed warmup fit, so the first timed point does not absorb
    // one-off allocator and cache effects.
    {
        let params = umr_gen_params(943, 1682, leaf_rows.iter().copied().min().unwrap_or(1000), seed);
        let (mut data, _) = generate(&params)?;
        standardize(&mut data);
        let config = umr_model_config();
        let spec = compile(&params.schema, &config)?;
        let warm = FitConfig { max_sweeps: 2, tol: 1e-300, seed, ..FitConfig::default() };
        fit(&spec, &data, &warm)?;
    }
    for (series, k_mult) in [(0, 1usize), (1, 2usize)] {
        let _ = series;
        for &n in leaf_rows {
            let params = umr_gen_params(943, 1682, n, seed);
            let (data, _) = generate(&params)?;
            let mut data = data;
            standardize(&mut data);
            let mut config = ModelConfig::default()
                .with_components("users", UMR_USER_K * k_mult)
                .with_components("movies", UMR_MOVIE_K * k_mult)
                .with_components("ratings", UMR_RATING_K * k_mult);
            config.overrides.insert(
                "movies.category".into(),
                crate::schema::ColumnOverride::Categorical { levels: Some(4) },
            );
            let spec = compile(&params.schema, &config)?;
            let fit_cfg = FitConfig {
                max_sweeps: sweeps,
                tol: 1e-300,
                seed,
                ..FitConfig::default()
            };
            let start = Instant::now();
            let (_, report) = fit(&spec, &data, &fit_cfg)?;
            let elapsed = start.elapsed().as_secs_f64();
            let per_sweep = elapsed / report.sweeps as f64;
            rows.push(ScalingRow {
                rows: n,
                k: UMR_RATING_K * k_mult,
                seconds_per_sweep: per_sweep,
            });
        }
    }
    let base: Vec<&ScalingRow> = rows.iter().filter(|r| r.k == UMR_RATING_K).collect();
    let r_squared = if base.len() >= 3 {
        let x: Vec<f64> = base.iter().map(|r| r.rows as f64).collect();
        let y: Vec<f64> = base.iter().map(|r| r.seconds_per_sweep).collect();
        linear_fit(&x, &y).map(|(_, _, r2)| r2)
    } else {
        None
    };
    Ok(ScalingResult { rows, r_squared })
}

#[derive(Debug, Clone)]
pub struct H2hResult {
    /// Mean result per ordered cluster pair; clusters sorted by win rate
    /// ascending. None when no matches hit the pair.
    pub matrix: Vec<Vec<Option<f64>>>,
    /// Adjusted Rand agreement between recovered clusters and true tiers.
    pub agreement: f64,
    /// Cluster relabeling: position = rank by win rate, value = raw index.
    pub order: Vec<usize>,
}

impl H2hResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cluster_i,cluster_j,mean_result\n");
        for (i, row) in self.matrix.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                let value = cell.map(|v| v.to_string()).unwrap_or_default();
                out.push_str(&format!("{i},{j},{value}\n"));
            }
        }
        out
    }
}

/// Generates head-to-head data, fits the relational model, clusters the
/// players, and reports the pairwise mean-result matrix (ordered by win
/// rate) plus agreement with the true tiers.
pub fn head_to_head_experiment(
    players: usize,
    matches: usize,
    win: &[Vec<f64>],
    k: usize,
    seed: u64,
) -> Result<H2hResult> {
    let params = h2h_gen_params(players, matches, win, seed);
    let (data, true_z) = generate(&params)?;
    let mut config =
        ModelConfig::default().with_components("players", k).with_components("matches", 2);
    config.limits.cpt_cell_cap = config.limits.cpt_cell_cap.max(k * k * 2);
    let spec = compile(&params.schema, &config)?;
    // Stratified init: the only evidence here is the Boolean result, and
    // the plain noise init leaves coordinate ascent on a symmetric ridge
    // where players never cluster.
    let fit_cfg = FitConfig {
        max_sweeps: 200,
        tol: 1e-8,
        seed,
        init: crate::engine::InitMethod::Stratified,
        ..FitConfig::default()
    };
    let (state, _) = fit(&spec, &data, &fit_cfg)?;
    let assignments = crate::query::cluster_assignments(&state, &spec, "players")?;
    let labels: Vec<usize> = assignments.iter().map(|(c, _)| *c).collect();

    // Win rate per cluster over all matches.
    let (p1, p2, results) = match (
        &data.tables[1].columns[1],
        &data.tables[1].columns[2],
        &data.tables[1].columns[3],
    ) {
        (
            ColumnData::Fk { values: p1, .. },
            ColumnData::Fk { values: p2, .. },
            ColumnData::Bool { values: results, .. },
        ) => (p1, p2, results),
        _ => return Err(Error::Model("unexpected head-to-head data layout".into())),
    };
    let mut wins = vec![0.0f64; k];
    let mut games = vec![0.0f64; k];
    let mut pair_sum = vec![vec![0.0f64; k]; k];
    let mut pair_count = vec![vec![0usize; k]; k];
    for i in 0..results.len() {
        let c1 = labels[p1[i] as usize];
        let c2 = labels[p2[i] as usize];
        let r = if results[i] { 1.0 } else { 0.0 };
        wins[c1] += r;
        games[c1] += 1.0;
        wins[c2] += 1.0 - r;
        games[c2] += 1.0;
        pair_sum[c1][c2] += r;
        pair_count[c1][c2] += 1;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ra = if games[a] > 0.0 { wins[a] / games[a] } else { 0.0 };
        let rb = if games[b] > 0.0 { wins[b] / games[b] } else { 0.0 };
        ra.partial_cmp(&rb).unwrap().then(a.cmp(&b))
    });
    let matrix: Vec<Vec<Option<f64>>> = order
        .iter()
        .map(|&a| {
            order
                .iter()
                .map(|&b| {
                    if pair_count[a][b] > 0 {
                        Some(pair_sum[a][b] / pair_count[a][b] as f64)
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect();
    let agreement = adjusted_rand_index(&labels, &true_z[0]);
    Ok(H2hResult { matrix, agreement, order })
}
