//! The posterior file: a versioned JSON document holding the compiled
//! model, standardization transforms, categorical level tables, key
//! tables, all parameter posteriors, and (optionally) responsibilities.

use serde::{Deserialize, Serialize};

use crate::compiler::ModelSpec;
use crate::data::{Bindings, ColumnData, Dataset, Standardization};
use crate::engine::{AttrPosterior, FkCell, GatePosterior, PosteriorState, Resp, TableState};
use crate::error::{Error, Result};

pub const POSTERIOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformEntry {
    pub table: String,
    pub column: String,
    pub mean: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelEntry {
    pub table: String,
    pub column: String,
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyEntry {
    pub table: String,
    pub keys: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableStateFile {
    pub name: String,
    /// Elided when the file is written with responsibilities stripped.
    pub resp: Option<Resp>,
    pub gate: GatePosterior,
    pub attrs: Vec<AttrPosterior>,
    pub fks: Vec<Vec<FkCell>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub sweeps: usize,
    pub converged: bool,
    pub elbo: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorFile {
    pub posterior_version: u32,
    pub spec: ModelSpec,
    pub transforms: Vec<TransformEntry>,
    pub levels: Vec<LevelEntry>,
    pub keys: Vec<KeyEntry>,
    pub tables: Vec<TableStateFile>,
    pub fit: FitSummary,
}

impl PosteriorFile {
    /// Assembles the file from a trained state and the dataset it was
    /// trained on. `keep_resp = false` strips per-row responsibilities
    /// (cluster export and training-data prediction then become
    /// unavailable; queries still work).
    pub fn build(
        spec: &ModelSpec,
        data: &Dataset,
        state: &PosteriorState,
        fit: FitSummary,
        keep_resp: bool,
    ) -> PosteriorFile {
        let mut transforms = Vec::new();
        let mut levels = Vec::new();
        let mut keys = Vec::new();
        for (t, table) in data.tables.iter().enumerate() {
            let schema_table = &spec.schema.tables[t];
            for (c, col) in table.columns.iter().enumerate() {
                match col {
                    ColumnData::Real { transform: Some(tr), .. } => transforms.push(TransformEntry {
                        table: table.name.clone(),
                        column: schema_table.columns[c].name.clone(),
                        mean: tr.mean,
                        scale: tr.scale,
                    }),
                    ColumnData::Cat { levels: lv, .. } => levels.push(LevelEntry {
                        table: table.name.clone(),
                        column: schema_table.columns[c].name.clone(),
                        levels: lv.clone(),
                    }),
                    _ => {}
                }
            }
            keys.push(KeyEntry { table: table.name.clone(), keys: table.key.inverse.clone() });
        }
        let tables = spec
            .tables
            .iter()
            .zip(&state.tables)
            .map(|(tm, ts)| TableStateFile {
                name: tm.name.clone(),
                resp: keep_resp.then(|| ts.resp.clone()),
                gate: ts.gate.clone(),
                attrs: ts.attrs.clone(),
                fks: ts.fks.clone(),
            })
            .collect();
        PosteriorFile {
            posterior_version: POSTERIOR_VERSION,
            spec: spec.clone(),
            transforms,
            levels,
            keys,
            tables,
            fit,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<PosteriorFile> {
        let file: PosteriorFile = serde_json::from_str(text)?;
        if file.posterior_version != POSTERIOR_VERSION {
            return Err(Error::Data(format!(
                "unsupported posterior_version {}",
                file.posterior_version
            )));
        }
        if file.spec.spec_version != 1 {
            return Err(Error::Data(format!(
                "unsupported spec_version {}",
                file.spec.spec_version
            )));
        }
        Ok(file)
    }

    /// Reconstructs the in-memory state. Fails if responsibilities were
    /// stripped and `require_resp` is set.
    pub fn to_state(&self, require_resp: bool) -> Result<PosteriorState> {
        let mut tables = Vec::with_capacity(self.tables.len());
        for tf in &self.tables {
            let resp = match (&tf.resp, require_resp) {
                (Some(r), _) => r.clone(),
                (None, false) => Resp::new(0, tf.gate.k),
                (None, true) => {
                    return Err(Error::Data(format!(
                        "posterior file has no responsibilities for table '{}' (written with \
                         --no-resp); refit or use `query`",
                        tf.name
                    )))
                }
            };
            tables.push(TableState {
                resp,
                gate: tf.gate.clone(),
                attrs: tf.attrs.clone(),
                fks: tf.fks.clone(),
            });
        }
        Ok(PosteriorState { tables })
    }

    /// Level tables and transforms for rebinding data consistently.
    pub fn bindings(&self) -> Bindings {
        let mut bindings = Bindings::default();
        for entry in &self.levels {
            bindings
                .levels
                .insert((entry.table.clone(), entry.column.clone()), entry.levels.clone());
        }
        for entry in &self.transforms {
            bindings.transforms.insert(
                (entry.table.clone(), entry.column.clone()),
                Standardization { mean: entry.mean, scale: entry.scale },
            );
        }
        bindings
    }

    /// Key lookup for a table by name.
    pub fn keys_for(&self, table: &str) -> Option<&[String]> {
        self.keys.iter().find(|k| k.table == table).map(|k| k.keys.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::compile;
    use crate::data::{load_csv, standardize};
    use crate::engine::{fit, FitConfig};
    use crate::schema::{parse_ddl, ModelConfig};
    use std::collections::BTreeMap;

    fn trained() -> (ModelSpec, Dataset, PosteriorState, FitSummary) {
        let schema = parse_ddl(
            "CREATE TABLE p (id INT PRIMARY KEY, x REAL, tag TEXT);\n\
             CREATE TABLE c (id INT PRIMARY KEY, p_id INT, y REAL,\n\
               FOREIGN KEY (p_id) REFERENCES p (id));",
        )
        .unwrap();
        let config = ModelConfig::default().with_components("p", 2).with_components("c", 2);
        let mut sources = BTreeMap::new();
        sources.insert("p".into(), "id,x,tag\n1,0.5,a\n2,-0.5,b\n3,0.2,a\n".into());
        sources.insert("c".into(), "id,p_id,y\n10,1,1\n11,2,-1\n12,,0.5\n".into());
        let (resolved, mut data) = load_csv(&schema, &config, &sources).unwrap();
        standardize(&mut data);
        let spec = compile(&resolved, &config).unwrap();
        let (state, report) =
            fit(&spec, &data, &FitConfig { max_sweeps: 5, ..FitConfig::default() }).unwrap();
        let summary = FitSummary {
            sweeps: report.sweeps,
            converged: report.converged,
            elbo: report.elbo_trace,
        };
        (spec, data, state, summary)
    }

    #[test]
    fn round_trip_preserves_state() {
        let (spec, data, state, summary) = trained();
        let file = PosteriorFile::build(&spec, &data, &state, summary, true);
        let json = file.to_json().unwrap();
        let back = PosteriorFile::from_json(&json).unwrap();
        assert_eq!(back.to_state(true).unwrap(), state);
        assert_eq!(back.spec, spec);
        assert_eq!(back.keys_for("p").unwrap(), &["1", "2", "3"]);
        // Serialization is deterministic.
        assert_eq!(json, back.to_json().unwrap());
    }

    #[test]
    fn stripped_resp_errors_when_required() {
        let (spec, data, state, summary) = trained();
        let file = PosteriorFile::build(&spec, &data, &state, summary, false);
        let back = PosteriorFile::from_json(&file.to_json().unwrap()).unwrap();
        assert!(back.to_state(true).is_err());
        assert!(back.to_state(false).is_ok());
    }

    #[test]
    fn bindings_cover_levels_and_transforms() {
        let (spec, data, state, summary) = trained();
        let file = PosteriorFile::build(&spec, &data, &state, summary, true);
        let bindings = file.bindings();
        assert!(bindings.levels.contains_key(&("p".into(), "tag".into())));
        assert!(bindings.transforms.contains_key(&("p".into(), "x".into())));
        assert!(bindings.transforms.contains_key(&("c".into(), "y".into())));
    }
}
