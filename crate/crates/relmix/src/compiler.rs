//! Compiles a validated schema plus configuration into the complete
//! factor-graph structure: one gated mixture model per table, linked along
//! foreign keys in topological order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{AttributeType, ColumnRole, ModelConfig, Schema};

/// One foreign-key edge of a table model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FkEdge {
    /// Column index in the schema table.
    pub column: usize,
    /// Index of the parent table in the schema.
    pub parent_schema: usize,
    /// Index of the parent table model in `ModelSpec::tables`.
    pub parent_model: usize,
}

/// Shape of the gate CPT: one Dirichlet row of length `k` per
/// configuration of parent components. With no FK edges this degenerates
/// to the single mixture-weight distribution of a plain mixture model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateCptSpec {
    /// FK edges in declaration order; this order defines CPT indexing.
    pub edges: Vec<FkEdge>,
    /// Component count of each parent, aligned with `edges`.
    pub parent_ks: Vec<usize>,
    /// Product of parent component counts (1 with no edges).
    pub configs: usize,
    /// Symmetric Dirichlet prior concentration per CPT row.
    pub alpha0: f64,
}

impl GateCptSpec {
    /// Mixed-radix strides: edge 0 is the most significant digit.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.edges.len()];
        for e in (0..self.edges.len()).rev() {
            if e + 1 < self.edges.len() {
                strides[e] = strides[e + 1] * self.parent_ks[e + 1];
            }
        }
        strides
    }
}

/// Likelihood family of one attribute column, with its hyperpriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Family {
    Gaussian { mean0: f64, precision0: f64, shape0: f64, rate0: f64 },
    Discrete { levels: usize, alpha0: f64 },
    Bernoulli { a0: f64, b0: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeModel {
    /// Column index in the schema table.
    pub column: usize,
    pub name: String,
    pub family: Family,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableModel {
    /// Index of this table in the schema.
    pub schema_idx: usize,
    pub name: String,
    pub k: usize,
    pub gate: GateCptSpec,
    pub attrs: Vec<AttributeModel>,
}

/// The compiled model: table models in topological order plus the inputs
/// they were compiled from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub spec_version: u32,
    pub schema: Schema,
    pub config: ModelConfig,
    pub tables: Vec<TableModel>,
}

impl ModelSpec {
    pub fn model_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    /// Model index for a schema table index.
    pub fn model_of_schema(&self, schema_idx: usize) -> usize {
        self.tables.iter().position(|t| t.schema_idx == schema_idx).expect("compiled table")
    }
}

/// Compiles schema + config into a `ModelSpec`. Categorical attribute
/// columns must have resolved level counts (from the config or from data
/// ingestion).
pub fn compile(schema: &Schema, config: &ModelConfig) -> Result<ModelSpec> {
    schema.validate()?;
    config.validate()?;
    for table in config.components.keys() {
        if schema.table_index(table).is_none() {
            return Err(Error::Config(format!(
                "component count references unknown table '{table}'"
            )));
        }
    }
    let order = schema.topo_indices()?;
    let mut model_of_schema = vec![usize::MAX; schema.tables.len()];
    let mut tables: Vec<TableModel> = Vec::with_capacity(order.len());
    for (model_idx, &schema_idx) in order.iter().enumerate() {
        let table = &schema.tables[schema_idx];
        let k = config.k_for(&table.name);
        if k < 1 {
            return Err(Error::Model(format!(
                "table '{}' has component count {k}; need at least 1",
                table.name
            )));
        }
        let mut edges = Vec::new();
        let mut parent_ks = Vec::new();
        for col in table.foreign_keys() {
            if let ColumnRole::ForeignKey { table: target, .. } = &table.columns[col].role {
                let parent_schema = schema.table_index(target).expect("validated schema");
                let parent_model = model_of_schema[parent_schema];
                edges.push(FkEdge { column: col, parent_schema, parent_model });
                parent_ks.push(tables[parent_model as usize].k);
            }
        }
        let mut configs: usize = 1;
        for &pk in &parent_ks {
            configs = configs.checked_mul(pk).ok_or_else(|| {
                Error::Model(format!("gate CPT for table '{}' overflows", table.name))
            })?;
        }
        let cells = configs.checked_mul(k).ok_or_else(|| {
            Error::Model(format!("gate CPT for table '{}' overflows", table.name))
        })?;
        if cells > config.limits.cpt_cell_cap {
            return Err(Error::Model(format!(
                "gate CPT for table '{}' has {cells} cells ({configs} configurations × {k} \
                 components), exceeding the cap {}",
                table.name, config.limits.cpt_cell_cap
            )));
        }
        let mut attrs = Vec::new();
        for col in table.attributes() {
            if let ColumnRole::Attribute(ty) = &table.columns[col].role {
                let family = match ty {
                    AttributeType::Real => Family::Gaussian {
                        mean0: config.priors.gauss_mean,
                        precision0: config.priors.gauss_precision,
                        shape0: config.priors.gamma_shape,
                        rate0: config.priors.gamma_rate,
                    },
                    AttributeType::Boolean => {
                        Family::Bernoulli { a0: config.priors.beta_a, b0: config.priors.beta_b }
                    }
                    AttributeType::Categorical { levels: Some(n) } => {
                        Family::Discrete { levels: *n, alpha0: config.priors.dirichlet_alpha }
                    }
                    AttributeType::Categorical { levels: None } => {
                        return Err(Error::Model(format!(
                            "column {}.{} has no resolved level count; ingest data first or \
                             declare levels in the config",
                            table.name, table.columns[col].name
                        )))
                    }
                };
                attrs.push(AttributeModel {
                    column: col,
                    name: table.columns[col].name.clone(),
                    family,
                });
            }
        }
        model_of_schema[schema_idx] = model_idx;
        tables.push(TableModel {
            schema_idx,
            name: table.name.clone(),
            k,
            gate: GateCptSpec {
                edges,
                parent_ks,
                configs,
                alpha0: config.priors.dirichlet_alpha,
            },
            attrs,
        });
    }
    Ok(ModelSpec { spec_version: 1, schema: schema.clone(), config: config.clone(), tables })
}

/// Human-readable structure report: per table K, gate shape, families, and
/// latent-variable counts, in topological order.
pub fn describe(spec: &ModelSpec) -> String {
    let mut out = String::new();
    let mut total_cells = 0usize;
    for tm in &spec.tables {
        let gate_desc = if tm.gate.edges.is_empty() {
            "no foreign keys".to_string()
        } else {
            tm.gate
                .edges
                .iter()
                .map(|e| {
                    format!(
                        "{}->{}",
                        spec.schema.tables[tm.schema_idx].columns[e.column].name,
                        spec.tables[e.parent_model].name
                    )
                })
                .collect::<Vec<_>>()
                .join(", ")
        };
        let cells = tm.gate.configs * tm.k;
        total_cells += cells;
        out.push_str(&format!(
            "table {}: K={}, gate {}x{} ({})\n",
            tm.name, tm.k, tm.gate.configs, tm.k, gate_desc
        ));
        let mut param_blocks = tm.gate.configs;
        for am in &tm.attrs {
            let family = match &am.family {
                Family::Gaussian { .. } => {
                    param_blocks += 2 * tm.k;
                    "gaussian".to_string()
                }
                Family::Discrete { levels, .. } => {
                    param_blocks += tm.k;
                    format!("discrete({levels})")
                }
                Family::Bernoulli { .. } => {
                    param_blocks += tm.k;
                    "bernoulli".to_string()
                }
            };
            out.push_str(&format!("  {}: {}\n", am.name, family));
        }
        if tm.attrs.is_empty() {
            out.push_str("  (no attribute factors)\n");
        }
        out.push_str(&format!(
            "  latent parameter blocks: {param_blocks}; per-row latents: 1 component indicator\
             {}\n",
            if tm.gate.edges.is_empty() { "" } else { " (+1 per missing foreign key)" }
        ));
    }
    out.push_str(&format!("total gate CPT cells: {total_cells}\n"));
    out
}
