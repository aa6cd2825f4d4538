//! The input program: a SQL-DDL subset plus a model configuration, parsed
//! and validated into a typed [`Schema`] with an acyclic foreign-key graph.

mod config;
mod ddl;

pub use config::{apply_config, ColumnOverride, Limits, ModelConfig, Priors};
pub use ddl::parse_ddl;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Modeled type of an attribute column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttributeType {
    Real,
    /// `levels: None` means the level set is deferred to ingest.
    Categorical { levels: Option<usize> },
    Boolean,
}

/// Role a column plays in the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnRole {
    PrimaryKey,
    ForeignKey { table: String, column: String },
    Attribute(AttributeType),
    /// Present in the data but carries no model variables.
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub role: ColumnRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<Column>,
}

impl Table {
    /// Index of the declared primary-key column. `None` means the table is
    /// keyed by row number.
    pub fn primary_key(&self) -> Option<usize> {
        self.columns.iter().position(|c| c.role == ColumnRole::PrimaryKey)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Indices of foreign-key columns in declaration order.
    pub fn foreign_keys(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| matches!(c.role, ColumnRole::ForeignKey { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices of attribute columns in declaration order.
    pub fn attributes(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| matches!(c.role, ColumnRole::Attribute(_)))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub tables: Vec<Table>,
}

impl Schema {
    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }

    /// Checks name uniqueness, key shape, foreign-key resolution, and
    /// acyclicity of the foreign-key graph.
    pub fn validate(&self) -> Result<()> {
        if self.tables.is_empty() {
            return Err(Error::Schema("schema contains no tables".into()));
        }
        for (i, table) in self.tables.iter().enumerate() {
            for other in &self.tables[..i] {
                if other.name == table.name {
                    return Err(Error::Schema(format!("duplicate table '{}'", table.name)));
                }
            }
            let mut pk_count = 0;
            for (j, col) in table.columns.iter().enumerate() {
                for other in &table.columns[..j] {
                    if other.name == col.name {
                        return Err(Error::Schema(format!(
                            "duplicate column '{}' in table '{}'",
                            col.name, table.name
                        )));
                    }
                }
                match &col.role {
                    ColumnRole::PrimaryKey => pk_count += 1,
                    ColumnRole::ForeignKey { table: target, column: target_col } => {
                        let target_table = self.tables.iter().find(|t| &t.name == target);
                        let target_table = target_table.ok_or_else(|| {
                            Error::Schema(format!(
                                "foreign key {}.{} references unknown table '{}'",
                                table.name, col.name, target
                            ))
                        })?;
                        let tc = target_table.column_index(target_col).ok_or_else(|| {
                            Error::Schema(format!(
                                "foreign key {}.{} references unknown column '{}.{}'",
                                table.name, col.name, target, target_col
                            ))
                        })?;
                        if target_table.columns[tc].role != ColumnRole::PrimaryKey {
                            return Err(Error::Schema(format!(
                                "foreign key {}.{} target '{}.{}' is not a primary key",
                                table.name, col.name, target, target_col
                            )));
                        }
                    }
                    ColumnRole::Attribute(AttributeType::Categorical { levels: Some(n) })
                        if *n < 2 =>
                    {
                        return Err(Error::Schema(format!(
                            "categorical column {}.{} needs at least 2 levels",
                            table.name, col.name
                        )));
                    }
                    _ => {}
                }
            }
            if pk_count > 1 {
                return Err(Error::Schema(format!(
                    "table '{}' declares {} primary keys; exactly one is allowed",
                    table.name, pk_count
                )));
            }
        }
        self.topo_indices()?;
        Ok(())
    }

    /// Parent table indices referenced by `table`'s FK columns, in column
    /// declaration order (duplicates kept: each FK is its own edge).
    pub fn parent_indices(&self, table: usize) -> Vec<usize> {
        self.tables[table]
            .columns
            .iter()
            .filter_map(|c| match &c.role {
                ColumnRole::ForeignKey { table: target, .. } => self.table_index(target),
                _ => None,
            })
            .collect()
    }

    /// Topological order over table indices: every table appears after all
    /// tables it references; ties broken by declaration order.
    pub fn topo_indices(&self) -> Result<Vec<usize>> {
        let n = self.tables.len();
        let parents: Vec<Vec<usize>> = (0..n).map(|i| self.parent_indices(i)).collect();
        let mut emitted = vec![false; n];
        let mut order = Vec::with_capacity(n);
        while order.len() < n {
            let next = (0..n)
                .find(|&i| !emitted[i] && parents[i].iter().all(|&p| emitted[p]));
            match next {
                Some(i) => {
                    emitted[i] = true;
                    order.push(i);
                }
                None => {
                    let stuck: Vec<&str> = (0..n)
                        .filter(|&i| !emitted[i])
                        .map(|i| self.tables[i].name.as_str())
                        .collect();
                    return Err(Error::Schema(format!(
                        "foreign-key graph has a cycle involving: {}",
                        stuck.join(", ")
                    )));
                }
            }
        }
        Ok(order)
    }

    /// Topological order as table names.
    pub fn topo_order(&self) -> Result<Vec<String>> {
        Ok(self
            .topo_indices()?
            .into_iter()
            .map(|i| self.tables[i].name.clone())
            .collect())
    }

    /// Canonical DDL serialization. Re-parsing the output of a freshly
    /// parsed schema yields an identical `Schema`.
    pub fn to_ddl(&self) -> String {
        let mut out = String::new();
        for table in &self.tables {
            out.push_str(&format!("CREATE TABLE {} (\n", table.name));
            let mut items: Vec<String> = Vec::new();
            for col in &table.columns {
                let sql_type = match &col.role {
                    ColumnRole::PrimaryKey | ColumnRole::ForeignKey { .. } => "INT",
                    ColumnRole::Attribute(AttributeType::Real) => "REAL",
                    ColumnRole::Attribute(AttributeType::Boolean) => "BOOLEAN",
                    ColumnRole::Attribute(AttributeType::Categorical { .. }) => "TEXT",
                    ColumnRole::Ignored => "TEXT",
                };
                items.push(format!("  {} {}", col.name, sql_type));
            }
            if let Some(pk) = table.primary_key() {
                items.push(format!("  PRIMARY KEY ({})", table.columns[pk].name));
            }
            for fk in table.foreign_keys() {
                if let ColumnRole::ForeignKey { table: target, column } =
                    &table.columns[fk].role
                {
                    items.push(format!(
                        "  FOREIGN KEY ({}) REFERENCES {} ({})",
                        table.columns[fk].name, target, column
                    ));
                }
            }
            out.push_str(&items.join(",\n"));
            out.push_str("\n);\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn umr_ddl() -> &'static str {
        "CREATE TABLE users (id INT PRIMARY KEY, gender BOOLEAN, age REAL);\n\
         CREATE TABLE movies (id INT PRIMARY KEY, category TEXT, year REAL);\n\
         CREATE TABLE ratings (id INT PRIMARY KEY, user_id INT, movie_id INT, score REAL,\n\
           FOREIGN KEY (user_id) REFERENCES users (id),\n\
           FOREIGN KEY (movie_id) REFERENCES movies (id));"
    }

    #[test]
    fn topo_order_umr() {
        let schema = parse_ddl(umr_ddl()).unwrap();
        assert_eq!(schema.topo_order().unwrap(), vec!["users", "movies", "ratings"]);
    }

    #[test]
    fn topo_order_single_table() {
        let schema = parse_ddl("CREATE TABLE t (id INT PRIMARY KEY);").unwrap();
        assert_eq!(schema.topo_order().unwrap(), vec!["t"]);
    }

    #[test]
    fn topo_order_two_edges_same_parent() {
        let schema = parse_ddl(
            "CREATE TABLE players (id INT PRIMARY KEY);\n\
             CREATE TABLE matches (id INT PRIMARY KEY, p1 INT, p2 INT, result BOOLEAN,\n\
               FOREIGN KEY (p1) REFERENCES players (id),\n\
               FOREIGN KEY (p2) REFERENCES players (id));",
        )
        .unwrap();
        assert_eq!(schema.topo_order().unwrap(), vec!["players", "matches"]);
        assert_eq!(schema.parent_indices(1), vec![0, 0]);
    }

    #[test]
    fn topo_order_leaf_declared_first() {
        // Declaration order puts the child first; topo order must not.
        let schema = parse_ddl(
            "CREATE TABLE b (id INT PRIMARY KEY, a_id INT,\n\
               FOREIGN KEY (a_id) REFERENCES a (id));\n\
             CREATE TABLE a (id INT PRIMARY KEY);",
        )
        .unwrap();
        assert_eq!(schema.topo_order().unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn cycle_rejected() {
        let err = parse_ddl(
            "CREATE TABLE a (id INT PRIMARY KEY, b_id INT,\n\
               FOREIGN KEY (b_id) REFERENCES b (id));\n\
             CREATE TABLE b (id INT PRIMARY KEY, a_id INT,\n\
               FOREIGN KEY (a_id) REFERENCES a (id));",
        )
        .unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn ddl_round_trip() {
        for src in [
            umr_ddl().to_string(),
            "CREATE TABLE t (id INT PRIMARY KEY);".to_string(),
            "CREATE TABLE nokey (x REAL, y BOOLEAN);".to_string(),
        ] {
            let schema = parse_ddl(&src).unwrap();
            let reparsed = parse_ddl(&schema.to_ddl()).unwrap();
            assert_eq!(schema, reparsed);
        }
    }

    #[test]
    fn random_dags_pass_and_injected_back_edges_fail() {
        use proptest::prelude::*;
        use proptest::test_runner::TestRunner;

        // Random DAG over n tables: edges only from later to earlier
        // tables, so validation must accept; adding one back edge (from
        // an earlier table into a later one that already reaches it)
        // closes a cycle, so validation must reject.
        let mut runner = TestRunner::default();
        runner
            .run(
                &(2..6usize, proptest::collection::vec(proptest::bool::ANY, 0..25)),
                |(n, flips)| {
                    let mut tables = Vec::new();
                    let mut flip = flips.into_iter().chain(std::iter::repeat(false));
                    let mut edges: Vec<(usize, usize)> = Vec::new();
                    for t in 0..n {
                        let mut columns = vec![Column {
                            name: "id".into(),
                            role: ColumnRole::PrimaryKey,
                        }];
                        for p in 0..t {
                            if flip.next().unwrap() {
                                columns.push(Column {
                                    name: format!("fk{p}"),
                                    role: ColumnRole::ForeignKey {
                                        table: format!("t{p}"),
                                        column: "id".into(),
                                    },
                                });
                                edges.push((t, p));
                            }
                        }
                        tables.push(Table { name: format!("t{t}"), columns });
                    }
                    let schema = Schema { tables };
                    prop_assert!(schema.validate().is_ok());
                    if let Some(&(child, parent)) = edges.first() {
                        // Back edge: the parent now references its child.
                        let mut cyclic = schema.clone();
                        cyclic.tables[parent].columns.push(Column {
                            name: "back".into(),
                            role: ColumnRole::ForeignKey {
                                table: format!("t{child}"),
                                column: "id".into(),
                            },
                        });
                        prop_assert!(cyclic.validate().is_err());
                    }
                    Ok(())
                },
            )
            .unwrap();
    }

    #[test]
    fn topo_parent_before_child_property() {
        let schema = parse_ddl(umr_ddl()).unwrap();
        let order = schema.topo_indices().unwrap();
        let pos: Vec<usize> = {
            let mut p = vec![0; order.len()];
            for (rank, &t) in order.iter().enumerate() {
                p[t] = rank;
            }
            p
        };
        for (t, table) in schema.tables.iter().enumerate() {
            for fk in table.foreign_keys() {
                if let ColumnRole::ForeignKey { table: target, .. } = &table.columns[fk].role {
                    let p = schema.table_index(target).unwrap();
                    assert!(pos[p] < pos[t]);
                }
            }
        }
    }
}
