//! CSV ingestion against a schema: cell parsing, missingness masks,
//! foreign-key resolution, standardization, and cell masking for
//! held-out evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{AttributeType, ColumnRole, ModelConfig, Schema};

/// Shift/scale transform applied to a real column; stored so predictions
/// can be mapped back to the original units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub scale: f64,
}

impl Standardization {
    pub fn identity() -> Self {
        Standardization { mean: 0.0, scale: 1.0 }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.scale
    }

    pub fn invert(&self, y: f64) -> f64 {
        y * self.scale + self.mean
    }
}

/// Bijection between primary-key literals and dense row indices.
#[derive(Debug, Clone)]
pub struct KeyIndex {
    map: HashMap<String, usize>,
    pub inverse: Vec<String>,
}

impl KeyIndex {
    pub fn from_literals(table: &str, literals: Vec<String>) -> Result<Self> {
        let mut map = HashMap::with_capacity(literals.len());
        for (i, key) in literals.iter().enumerate() {
            if map.insert(key.clone(), i).is_some() {
                return Err(Error::Data(format!(
                    "duplicate primary key '{key}' in table '{table}' (row {})",
                    i + 1
                )));
            }
        }
        Ok(KeyIndex { map, inverse: literals })
    }

    pub fn lookup(&self, key: &str) -> Option<usize> {
        self.map.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.inverse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inverse.is_empty()
    }
}

/// Column-oriented storage for one modeled column.
#[derive(Debug, Clone)]
pub enum ColumnData {
    Real { values: Vec<f64>, missing: Vec<bool>, transform: Option<Standardization> },
    Cat { values: Vec<u32>, missing: Vec<bool>, levels: Vec<String> },
    Bool { values: Vec<bool>, missing: Vec<bool> },
    /// Values are parent row indices.
    Fk { values: Vec<u32>, missing: Vec<bool> },
    /// Keys and ignored columns: no model variables.
    Unmodeled,
}

impl ColumnData {
    pub fn missing_mask(&self) -> Option<&[bool]> {
        match self {
            ColumnData::Real { missing, .. }
            | ColumnData::Cat { missing, .. }
            | ColumnData::Bool { missing, .. }
            | ColumnData::Fk { missing, .. } => Some(missing),
            ColumnData::Unmodeled => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TableData {
    pub name: String,
    pub n_rows: usize,
    pub key: KeyIndex,
    /// Aligned with the schema table's column list.
    pub columns: Vec<ColumnData>,
}

/// Column-oriented table data with missingness masks and resolved
/// foreign-key row indices, aligned with a resolved schema.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub tables: Vec<TableData>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn table(&self, idx: usize) -> &TableData {
        &self.tables[idx]
    }

    pub fn table_by_name(&self, name: &str) -> Option<&TableData> {
        self.tables.iter().find(|t| t.name == name)
    }
}

/// An original cell value recorded before masking.
#[derive(Debug, Clone, PartialEq)]
pub enum CellValue {
    Real(f64),
    Categorical(String),
    Boolean(bool),
}

impl fmt::Display for CellValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellValue::Real(v) => write!(f, "{v}"),
            CellValue::Categorical(s) => write!(f, "{s}"),
            CellValue::Boolean(b) => write!(f, "{b}"),
        }
    }
}

/// Ground-truth record for a masked cell.
#[derive(Debug, Clone)]
pub struct MaskedCell {
    pub table: usize,
    pub row: usize,
    pub column: usize,
    pub value: CellValue,
}

/// Persisted level tables and transforms from a previous load, used to
/// rebind a dataset consistently with a trained posterior.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    /// (table name, column name) -> level names in index order.
    pub levels: BTreeMap<(String, String), Vec<String>>,
    /// (table name, column name) -> standardization transform.
    pub transforms: BTreeMap<(String, String), Standardization>,
}

/// Loads one CSV document per table. Returns the resolved schema (deferred
/// categorical levels filled in, over-cardinality columns ignored) and the
/// dataset.
pub fn load_csv(
    schema: &Schema,
    config: &ModelConfig,
    sources: &BTreeMap<String, String>,
) -> Result<(Schema, Dataset)> {
    load_csv_impl(schema, config, sources, None)
}

/// Like [`load_csv`] but reuses persisted level tables and transforms, so
/// categorical indices and real units match a trained posterior.
pub fn load_csv_bound(
    schema: &Schema,
    config: &ModelConfig,
    sources: &BTreeMap<String, String>,
    bindings: &Bindings,
) -> Result<(Schema, Dataset)> {
    load_csv_impl(schema, config, sources, Some(bindings))
}

/// Reads `<table>.csv` for every table in the schema from a directory.
pub fn read_csv_dir(schema: &Schema, dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut sources = BTreeMap::new();
    for table in &schema.tables {
        let path = dir.join(format!("{}.csv", table.name));
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Data(format!("cannot read {} for table '{}': {e}", path.display(), table.name))
        })?;
        sources.insert(table.name.clone(), text);
    }
    Ok(sources)
}

struct RawTable {
    /// Per schema column: the raw string cells, or None for columns the
    /// CSV does not need to provide (none today; kept for clarity).
    cells: Vec<Vec<String>>,
    n_rows: usize,
}

fn read_raw(schema_table: &crate::schema::Table, text: &str) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("table '{}': {e}", schema_table.name)))?
        .clone();
    let mut header_pos: Vec<Option<usize>> = vec![None; schema_table.columns.len()];
    for (h_idx, header) in headers.iter().enumerate() {
        match schema_table.column_index(header) {
            Some(c) => {
                if header_pos[c].is_some() {
                    return Err(Error::Data(format!(
                        "table '{}': duplicate header column '{header}'",
                        schema_table.name
                    )));
                }
                header_pos[c] = Some(h_idx);
            }
            None => {
                return Err(Error::Data(format!(
                    "table '{}': header column '{header}' is not in the schema",
                    schema_table.name
                )));
            }
        }
    }
    for (c, pos) in header_pos.iter().enumerate() {
        if pos.is_none() {
            return Err(Error::Data(format!(
                "table '{}': header is missing column '{}'",
                schema_table.name, schema_table.columns[c].name
            )));
        }
    }
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); schema_table.columns.len()];
    let mut n_rows = 0;
    for (row_idx, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| Error::Data(format!("table '{}': {e}", schema_table.name)))?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "table '{}' row {}: expected {} fields, found {}",
                schema_table.name,
                row_idx + 1,
                headers.len(),
                record.len()
            )));
        }
        for (c, pos) in header_pos.iter().enumerate() {
            cells[c].push(record[pos.unwrap()].to_string());
        }
        n_rows += 1;
    }
    Ok(RawTable { cells, n_rows })
}

fn parse_bool(raw: &str) -> Option<bool> {
    match raw.to_ascii_lowercase().as_str() {
        "true" | "t" | "1" => Some(true),
        "false" | "f" | "0" => Some(false),
        _ => None,
    }
}

fn load_csv_impl(
    schema: &Schema,
    config: &ModelConfig,
    sources: &BTreeMap<String, String>,
    bindings: Option<&Bindings>,
) -> Result<(Schema, Dataset)> {
    let mut resolved = schema.clone();
    let mut warnings = Vec::new();

    // First pass: raw cells and key indices for every table, so foreign
    // keys can resolve regardless of declaration order.
    let mut raw_tables = Vec::with_capacity(schema.tables.len());
    let mut keys = Vec::with_capacity(schema.tables.len());
    for table in &schema.tables {
        let text = sources.get(&table.name).ok_or_else(|| {
            Error::Data(format!("no CSV source provided for table '{}'", table.name))
        })?;
        let raw = read_raw(table, text)?;
        let key = match table.primary_key() {
            Some(pk) => {
                for (row, cell) in raw.cells[pk].iter().enumerate() {
                    if cell.is_empty() {
                        return Err(Error::Data(format!(
                            "table '{}' row {}: missing primary key value",
                            table.name,
                            row + 1
                        )));
                    }
                }
                KeyIndex::from_literals(&table.name, raw.cells[pk].clone())?
            }
            None => KeyIndex::from_literals(
                &table.name,
                (0..raw.n_rows).map(|i| i.to_string()).collect(),
            )?,
        };
        raw_tables.push(raw);
        keys.push(key);
    }

    // Second pass: typed columns.
    let mut tables = Vec::with_capacity(schema.tables.len());
    for (t, table) in schema.tables.iter().enumerate() {
        let raw = &raw_tables[t];
        let n_rows = raw.n_rows;
        let mut columns = Vec::with_capacity(table.columns.len());
        for (c, col) in table.columns.iter().enumerate() {
            let cells = &raw.cells[c];
            let data = match &col.role {
                ColumnRole::PrimaryKey | ColumnRole::Ignored => ColumnData::Unmodeled,
                ColumnRole::ForeignKey { table: target, .. } => {
                    let p = schema.table_index(target).expect("validated schema");
                    let mut values = vec![0u32; n_rows];
                    let mut missing = vec![false; n_rows];
                    for (row, cell) in cells.iter().enumerate() {
                        if cell.is_empty() {
                            missing[row] = true;
                        } else {
                            match keys[p].lookup(cell) {
                                Some(idx) => values[row] = idx as u32,
                                None => {
                                    return Err(Error::Data(format!(
                                        "table '{}' row {}: foreign key value '{}' has no \
                                         matching primary key in '{}'",
                                        table.name,
                                        row + 1,
                                        cell,
                                        target
                                    )))
                                }
                            }
                        }
                    }
                    ColumnData::Fk { values, missing }
                }
                ColumnRole::Attribute(AttributeType::Real) => {
                    let mut values = vec![0.0; n_rows];
                    let mut missing = vec![false; n_rows];
                    for (row, cell) in cells.iter().enumerate() {
                        if cell.is_empty() {
                            missing[row] = true;
                        } else {
                            values[row] = cell.parse().map_err(|_| {
                                Error::Data(format!(
                                    "table '{}' row {} column '{}': cannot parse '{}' as a real",
                                    table.name,
                                    row + 1,
                                    col.name,
                                    cell
                                ))
                            })?;
                        }
                    }
                    let transform = bindings
                        .and_then(|b| {
                            b.transforms.get(&(table.name.clone(), col.name.clone())).copied()
                        })
                        .map(|tr| {
                            for (row, v) in values.iter_mut().enumerate() {
                                if !missing[row] {
                                    *v = tr.apply(*v);
                                }
                            }
                            tr
                        });
                    ColumnData::Real { values, missing, transform }
                }
                ColumnRole::Attribute(AttributeType::Boolean) => {
                    let mut values = vec![false; n_rows];
                    let mut missing = vec![false; n_rows];
                    for (row, cell) in cells.iter().enumerate() {
                        if cell.is_empty() {
                            missing[row] = true;
                        } else {
                            values[row] = parse_bool(cell).ok_or_else(|| {
                                Error::Data(format!(
                                    "table '{}' row {} column '{}': cannot parse '{}' as a \
                                     boolean",
                                    table.name,
                                    row + 1,
                                    col.name,
                                    cell
                                ))
                            })?;
                        }
                    }
                    ColumnData::Bool { values, missing }
                }
                ColumnRole::Attribute(AttributeType::Categorical { levels: declared }) => {
                    let bound_levels = bindings
                        .and_then(|b| b.levels.get(&(table.name.clone(), col.name.clone())));
                    let mut level_index: HashMap<String, u32> = HashMap::new();
                    let mut levels: Vec<String> = Vec::new();
                    if let Some(bound) = bound_levels {
                        levels = bound.clone();
                        for (i, name) in bound.iter().enumerate() {
                            level_index.insert(name.clone(), i as u32);
                        }
                    }
                    let mut values = vec![0u32; n_rows];
                    let mut missing = vec![false; n_rows];
                    let mut overflow = false;
                    for (row, cell) in cells.iter().enumerate() {
                        if cell.is_empty() {
                            missing[row] = true;
                            continue;
                        }
                        let idx = match level_index.get(cell) {
                            Some(&i) => i,
                            None if bound_levels.is_some() => {
                                return Err(Error::Data(format!(
                                    "table '{}' row {} column '{}': value '{}' is not in the \
                                     trained level table",
                                    table.name,
                                    row + 1,
                                    col.name,
                                    cell
                                )));
                            }
                            None => {
                                let i = levels.len() as u32;
                                if levels.len() >= config.limits.max_categories {
                                    overflow = true;
                                    break;
                                }
                                levels.push(cell.clone());
                                level_index.insert(cell.clone(), i);
                                i
                            }
                        };
                        values[row] = idx;
                    }
                    if overflow {
                        warnings.push(format!(
                            "column {}.{} has more than {} distinct values; ignoring it",
                            table.name, col.name, config.limits.max_categories
                        ));
                        resolved.tables[t].columns[c].role = ColumnRole::Ignored;
                        columns.push(ColumnData::Unmodeled);
                        continue;
                    }
                    if let Some(declared) = declared {
                        if levels.len() > *declared {
                            return Err(Error::Data(format!(
                                "column {}.{} declares {} levels but the data has {}",
                                table.name,
                                col.name,
                                declared,
                                levels.len()
                            )));
                        }
                        // Pad to the declared dimension with placeholder names.
                        while levels.len() < *declared {
                            levels.push(format!("__unseen_{}", levels.len()));
                        }
                    } else if levels.len() < 2 {
                        warnings.push(format!(
                            "column {}.{} has fewer than 2 observed levels; ignoring it",
                            table.name, col.name
                        ));
                        resolved.tables[t].columns[c].role = ColumnRole::Ignored;
                        columns.push(ColumnData::Unmodeled);
                        continue;
                    } else {
                        resolved.tables[t].columns[c].role = ColumnRole::Attribute(
                            AttributeType::Categorical { levels: Some(levels.len()) },
                        );
                    }
                    ColumnData::Cat { values, missing, levels }
                }
            };
            columns.push(data);
        }
        tables.push(TableData {
            name: table.name.clone(),
            n_rows,
            key: keys[t].clone(),
            columns,
        });
    }
    Ok((resolved, Dataset { tables, warnings }))
}

/// Standardizes every real column in place using observed cells only
/// (sample standard deviation, N−1 denominator). Constant columns get
/// scale 1 and a warning. Returns the warnings.
pub fn standardize(dataset: &mut Dataset) -> Vec<String> {
    let mut warnings = Vec::new();
    for table in &mut dataset.tables {
        for (c, col) in table.columns.iter_mut().enumerate() {
            if let ColumnData::Real { values, missing, transform } = col {
                if transform.is_some() {
                    continue; // already bound to persisted units
                }
                let observed: Vec<f64> = values
                    .iter()
                    .zip(missing.iter())
                    .filter(|(_, &m)| !m)
                    .map(|(&v, _)| v)
                    .collect();
                let n = observed.len();
                let mean = if n > 0 { observed.iter().sum::<f64>() / n as f64 } else { 0.0 };
                let scale = if n > 1 {
                    let ss: f64 = observed.iter().map(|v| (v - mean) * (v - mean)).sum();
                    (ss / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                let scale = if scale > 0.0 {
                    scale
                } else {
                    warnings.push(format!(
                        "column {}.{} is constant over observed cells; using scale 1",
                        table.name, c
                    ));
                    1.0
                };
                let tr = Standardization { mean, scale };
                for (row, v) in values.iter_mut().enumerate() {
                    if !missing[row] {
                        *v = tr.apply(*v);
                    }
                }
                *transform = Some(tr);
            }
        }
    }
    dataset.warnings.extend(warnings.iter().cloned());
    warnings
}

/// Original (pre-standardization) value of an observed attribute cell.
fn original_value(col: &ColumnData, row: usize) -> CellValue {
    match col {
        ColumnData::Real { values, transform, .. } => {
            let v = values[row];
            CellValue::Real(transform.map(|t| t.invert(v)).unwrap_or(v))
        }
        ColumnData::Cat { values, levels, .. } => {
            CellValue::Categorical(levels[values[row] as usize].clone())
        }
        ColumnData::Bool { values, .. } => CellValue::Boolean(values[row]),
        _ => unreachable!("only attribute cells are maskable"),
    }
}

/// Masks exactly `round(fraction × eligible)` observed attribute cells,
/// chosen uniformly without replacement, and returns the ground truth.
pub fn mask_cells(
    dataset: &mut Dataset,
    fraction: f64,
    seed: u64,
) -> Result<Vec<MaskedCell>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Data(format!("masking fraction {fraction} is outside [0, 1]")));
    }
    // Canonical cell order: table, column, row.
    let mut eligible: Vec<(usize, usize, usize)> = Vec::new();
    for (t, table) in dataset.tables.iter().enumerate() {
        for (c, col) in table.columns.iter().enumerate() {
            match col {
                ColumnData::Real { missing, .. }
                | ColumnData::Cat { missing, .. }
                | ColumnData::Bool { missing, .. } => {
                    for (row, &m) in missing.iter().enumerate() {
                        if !m {
                            eligible.push((t, c, row));
                        }
                    }
                }
                _ => {}
            }
        }
    }
    let count = (fraction * eligible.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let mut truth = Vec::with_capacity(count);
    for &(t, c, row) in eligible.iter().take(count) {
        let col = &mut dataset.tables[t].columns[c];
        let value = original_value(col, row);
        match col {
            ColumnData::Real { missing, .. }
            | ColumnData::Cat { missing, .. }
            | ColumnData::Bool { missing, .. } => missing[row] = true,
            _ => unreachable!(),
        }
        truth.push(MaskedCell { table: t, row, column: c, value });
    }
    truth.sort_by_key(|m| (m.table, m.column, m.row));
    Ok(truth)
}

/// Serializes one table back to CSV in schema column order. Real values
/// are written in original units when a transform is present; missing
/// cells become empty fields. Key columns come from the key index.
pub fn table_to_csv(schema_table: &crate::schema::Table, table: &TableData) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = schema_table.columns.iter().map(|c| c.name.as_str()).collect();
    writer.write_record(&header).expect("in-memory write");
    for row in 0..table.n_rows {
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        for (c, col) in table.columns.iter().enumerate() {
            let field = match col {
                ColumnData::Unmodeled => {
                    if schema_table.columns[c].role == ColumnRole::PrimaryKey {
                        table.key.inverse[row].clone()
                    } else {
                        String::new()
                    }
                }
                ColumnData::Real { values, missing, transform } => {
                    if missing[row] {
                        String::new()
                    } else {
                        let v = transform.map(|t| t.invert(values[row])).unwrap_or(values[row]);
                        format!("{v}")
                    }
                }
                ColumnData::Cat { values, missing, levels } => {
                    if missing[row] {
                        String::new()
                    } else {
                        levels[values[row] as usize].clone()
                    }
                }
                ColumnData::Bool { values, missing } => {
                    if missing[row] {
                        String::new()
                    } else {
                        values[row].to_string()
                    }
                }
                ColumnData::Fk { values, missing } => {
                    if missing[row] {
                        String::new()
                    } else {
                        // FK cells store parent row indices; the literal is
                        // recovered through the parent key index at write
                        // time by the caller. Row-number keys match the
                        // index itself.
                        values[row].to_string()
                    }
                }
            };
            record.push(field);
        }
        writer.write_record(&record).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf8")
}

/// Serializes a full dataset to `<table>.csv` documents, resolving FK
/// cells to parent key literals.
pub fn dataset_to_csv(schema: &Schema, dataset: &Dataset) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for (t, schema_table) in schema.tables.iter().enumerate() {
        // Rewrite FK columns to parent key literals before serializing.
        let mut table = dataset.tables[t].clone();
        for (c, col) in schema_table.columns.iter().enumerate() {
            if let ColumnRole::ForeignKey { table: target, .. } = &col.role {
                let parent = schema.table_index(target).expect("validated");
                let parent_keys = &dataset.tables[parent].key.inverse;
                if let ColumnData::Fk { values, missing } = &dataset.tables[t].columns[c] {
                    let mut literals = ColumnData::Cat {
                        values: values.clone(),
                        missing: missing.clone(),
                        levels: parent_keys.clone(),
                    };
                    std::mem::swap(&mut table.columns[c], &mut literals);
                }
            }
        }
        out.insert(schema_table.name.clone(), table_to_csv(schema_table, &table));
    }
    out
}

/// Serializes a ground-truth list as CSV with columns
/// table,row,column,true_value.
pub fn ground_truth_csv(schema: &Schema, truth: &[MaskedCell]) -> String {
    let mut out = String::from("table,row,column,true_value\n");
    for cell in truth {
        let table = &schema.tables[cell.table];
        out.push_str(&format!(
            "{},{},{},{}\n",
            table.name, cell.row, table.columns[cell.column].name, cell.value
        ));
    }
    out
}
