//! Model configuration: per-table component counts, column overrides,
//! hyperpriors, and resource limits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{AttributeType, ColumnRole, Schema};

/// Hyperprior settings shared by every table model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub dirichlet_alpha: f64,
    pub gauss_mean: f64,
    pub gauss_precision: f64,
    pub gamma_shape: f64,
    pub gamma_rate: f64,
    pub beta_a: f64,
    pub beta_b: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            dirichlet_alpha: 1.0,
            gauss_mean: 0.0,
            gauss_precision: 0.01,
            gamma_shape: 1.0,
            gamma_rate: 1.0,
            beta_a: 1.0,
            beta_b: 1.0,
        }
    }
}

/// Resource caps guarding against blow-ups at compile and init time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub max_categories: usize,
    pub cpt_cell_cap: usize,
    pub fk_candidate_cap: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_categories: 100, cpt_cell_cap: 1_000_000, fk_candidate_cap: 10_000 }
    }
}

/// A per-column type override or ignore flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnOverride {
    Real,
    Categorical { levels: Option<usize> },
    Boolean,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub default_components: usize,
    /// Per-table component counts; absent tables use the default.
    pub components: BTreeMap<String, usize>,
    /// Column overrides keyed by "table.column".
    pub overrides: BTreeMap<String, ColumnOverride>,
    pub priors: Priors,
    pub limits: Limits,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            default_components: 5,
            components: BTreeMap::new(),
            overrides: BTreeMap::new(),
            priors: Priors::default(),
            limits: Limits::default(),
        }
    }
}

impl ModelConfig {
    /// Component count for a table.
    pub fn k_for(&self, table: &str) -> usize {
        self.components.get(table).copied().unwrap_or(self.default_components)
    }

    pub fn with_components(mut self, table: &str, k: usize) -> Self {
        self.components.insert(table.to_string(), k);
        self
    }

    /// Parses the JSON configuration document. Absent keys take defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text)?;
        let mut config = ModelConfig::default();
        for (table, entry) in raw.tables {
            config.components.insert(table, entry.components);
        }
        for (colref, entry) in raw.columns {
            let over = match entry.r#type.as_str() {
                "real" => ColumnOverride::Real,
                "categorical" => ColumnOverride::Categorical { levels: entry.levels },
                "boolean" => ColumnOverride::Boolean,
                "ignore" => ColumnOverride::Ignore,
                other => {
                    return Err(Error::Config(format!(
                        "unknown column type '{other}' for '{colref}'"
                    )))
                }
            };
            config.overrides.insert(colref, over);
        }
        if let Some(p) = raw.priors {
            let d = Priors::default();
            config.priors = Priors {
                dirichlet_alpha: p.dirichlet_alpha.unwrap_or(d.dirichlet_alpha),
                gauss_mean: p.gauss_mean.unwrap_or(d.gauss_mean),
                gauss_precision: p.gauss_precision.unwrap_or(d.gauss_precision),
                gamma_shape: p.gamma_shape.unwrap_or(d.gamma_shape),
                gamma_rate: p.gamma_rate.unwrap_or(d.gamma_rate),
                beta_a: p.beta_a.unwrap_or(d.beta_a),
                beta_b: p.beta_b.unwrap_or(d.beta_b),
            };
        }
        if let Some(l) = raw.limits {
            let d = Limits::default();
            config.limits = Limits {
                max_categories: l.max_categories.unwrap_or(d.max_categories),
                cpt_cell_cap: l.cpt_cell_cap.unwrap_or(d.cpt_cell_cap),
                fk_candidate_cap: l.fk_candidate_cap.unwrap_or(d.fk_candidate_cap),
            };
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.default_components < 1 {
            return Err(Error::Config("component count must be >= 1".into()));
        }
        for (table, &k) in &self.components {
            if k < 1 {
                return Err(Error::Config(format!(
                    "component count for table '{table}' must be >= 1"
                )));
            }
        }
        let p = &self.priors;
        for (name, value) in [
            ("dirichlet_alpha", p.dirichlet_alpha),
            ("gauss_precision", p.gauss_precision),
            ("gamma_shape", p.gamma_shape),
            ("gamma_rate", p.gamma_rate),
            ("beta_a", p.beta_a),
            ("beta_b", p.beta_b),
        ] {
            if !(value > 0.0) {
                return Err(Error::Config(format!("prior '{name}' must be > 0, got {value}")));
            }
        }
        if !p.gauss_mean.is_finite() {
            return Err(Error::Config("prior 'gauss_mean' must be finite".into()));
        }
        for (colref, over) in &self.overrides {
            if let ColumnOverride::Categorical { levels: Some(n) } = over {
                if *n < 2 {
                    return Err(Error::Config(format!(
                        "override for '{colref}': categorical needs at least 2 levels"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawConfig {
    #[serde(default)]
    tables: BTreeMap<String, RawTable>,
    #[serde(default)]
    columns: BTreeMap<String, RawColumn>,
    #[serde(default)]
    priors: Option<RawPriors>,
    #[serde(default)]
    limits: Option<RawLimits>,
}

#[derive(Deserialize)]
struct RawTable {
    components: usize,
}

#[derive(Deserialize)]
struct RawColumn {
    r#type: String,
    #[serde(default)]
    levels: Option<usize>,
}

#[derive(Deserialize)]
struct RawPriors {
    dirichlet_alpha: Option<f64>,
    gauss_mean: Option<f64>,
    gauss_precision: Option<f64>,
    gamma_shape: Option<f64>,
    gamma_rate: Option<f64>,
    beta_a: Option<f64>,
    beta_b: Option<f64>,
}

#[derive(Deserialize)]
struct RawLimits {
    max_categories: Option<usize>,
    cpt_cell_cap: Option<usize>,
    fk_candidate_cap: Option<usize>,
}

/// Applies type overrides and ignore flags, returning the rewritten schema.
///
/// Also checks that per-table component counts reference known tables.
pub fn apply_config(schema: &Schema, config: &ModelConfig) -> Result<Schema> {
    for table in config.components.keys() {
        if schema.table_index(table).is_none() {
            return Err(Error::Config(format!(
                "component count references unknown table '{table}'"
            )));
        }
    }
    let mut schema = schema.clone();
    for (colref, over) in &config.overrides {
        let (table_name, col_name) = colref.split_once('.').ok_or_else(|| {
            Error::Config(format!("column reference '{colref}' must be 'table.column'"))
        })?;
        let t = schema.table_index(table_name).ok_or_else(|| {
            Error::Config(format!("override references unknown table '{table_name}'"))
        })?;
        let c = schema.tables[t].column_index(col_name).ok_or_else(|| {
            Error::Config(format!("override references unknown column '{colref}'"))
        })?;
        let col = &mut schema.tables[t].columns[c];
        match col.role {
            ColumnRole::PrimaryKey | ColumnRole::ForeignKey { .. } => {
                return Err(Error::Config(format!(
                    "override of key column '{colref}' is not allowed"
                )));
            }
            ColumnRole::Attribute(_) | ColumnRole::Ignored => {
                col.role = match over {
                    ColumnOverride::Real => ColumnRole::Attribute(AttributeType::Real),
                    ColumnOverride::Boolean => ColumnRole::Attribute(AttributeType::Boolean),
                    ColumnOverride::Categorical { levels } => {
                        ColumnRole::Attribute(AttributeType::Categorical { levels: *levels })
                    }
                    ColumnOverride::Ignore => ColumnRole::Ignored,
                };
            }
        }
    }
    schema.validate()?;
    Ok(schema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::parse_ddl;

    #[test]
    fn defaults() {
        let config = ModelConfig::from_json("{}").unwrap();
        assert_eq!(config.default_components, 5);
        assert_eq!(config.priors.dirichlet_alpha, 1.0);
        assert_eq!(config.priors.gauss_precision, 0.01);
        assert_eq!(config.limits.max_categories, 100);
        assert_eq!(config.limits.cpt_cell_cap, 1_000_000);
        assert_eq!(config.limits.fk_candidate_cap, 10_000);
        assert_eq!(config.k_for("anything"), 5);
    }

    #[test]
    fn parses_full_document() {
        let config = ModelConfig::from_json(
            r#"{
                "tables": {"users": {"components": 4}},
                "columns": {
                    "users.age": {"type": "categorical", "levels": 3},
                    "movies.title": {"type": "ignore"}
                },
                "priors": {"dirichlet_alpha": 0.5},
                "limits": {"max_categories": 10}
            }"#,
        )
        .unwrap();
        assert_eq!(config.k_for("users"), 4);
        assert_eq!(config.k_for("movies"), 5);
        assert_eq!(
            config.overrides["users.age"],
            ColumnOverride::Categorical { levels: Some(3) }
        );
        assert_eq!(config.priors.dirichlet_alpha, 0.5);
        assert_eq!(config.limits.max_categories, 10);
    }

    #[test]
    fn apply_override_replaces_type() {
        let schema =
            parse_ddl("CREATE TABLE users (id INT PRIMARY KEY, gender BOOLEAN, age REAL);")
                .unwrap();
        let mut config = ModelConfig::default();
        config
            .overrides
            .insert("users.age".into(), ColumnOverride::Categorical { levels: Some(3) });
        let schema = apply_config(&schema, &config).unwrap();
        assert_eq!(
            schema.tables[0].columns[2].role,
            ColumnRole::Attribute(AttributeType::Categorical { levels: Some(3) })
        );
    }

    #[test]
    fn apply_ignore_flag() {
        let schema =
            parse_ddl("CREATE TABLE movies (id INT PRIMARY KEY, title TEXT, year REAL);")
                .unwrap();
        let mut config = ModelConfig::default();
        config.overrides.insert("movies.title".into(), ColumnOverride::Ignore);
        let schema = apply_config(&schema, &config).unwrap();
        assert_eq!(schema.tables[0].columns[1].role, ColumnRole::Ignored);
        assert_eq!(schema.tables[0].attributes(), vec![2]);
    }

    #[test]
    fn unknown_column_rejected() {
        let schema = parse_ddl("CREATE TABLE t (id INT PRIMARY KEY, x REAL);").unwrap();
        let mut config = ModelConfig::default();
        config.overrides.insert("t.nope".into(), ColumnOverride::Real);
        assert!(apply_config(&schema, &config).is_err());
    }

    #[test]
    fn key_override_rejected() {
        let schema = parse_ddl("CREATE TABLE t (id INT PRIMARY KEY, x REAL);").unwrap();
        let mut config = ModelConfig::default();
        config.overrides.insert("t.id".into(), ColumnOverride::Ignore);
        let err = apply_config(&schema, &config).unwrap_err();
        assert!(err.to_string().contains("key column"));
    }

    #[test]
    fn invalid_priors_rejected() {
        assert!(ModelConfig::from_json(r#"{"priors": {"gamma_rate": 0.0}}"#).is_err());
        assert!(ModelConfig::from_json(r#"{"tables": {"t": {"components": 0}}}"#).is_err());
    }
}
