//! Recursive-descent parser for the CREATE TABLE subset.
//!
//! Grammar (keywords case-insensitive, `--` line comments):
//!
//! ```text
//! stmt    := "CREATE TABLE" ident "(" item ("," item)* ")" ";"
//! item    := ident sqltype ["PRIMARY KEY"] ["NOT NULL"]
//!          | "PRIMARY KEY" "(" ident ")"
//!          | "FOREIGN KEY" "(" ident ")" "REFERENCES" ident "(" ident ")"
//! sqltype := name ["(" int ["," int] ")"]
//! ```
//!
//! The inline `PRIMARY KEY` column modifier is accepted alongside the
//! table-level clause. Composite keys are rejected.

use crate::error::{Error, Result};
use crate::schema::{AttributeType, Column, ColumnRole, Schema, Table};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(u64),
    LParen,
    RParen,
    Comma,
    Semi,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let mut line = 1;
    let mut col = 1;
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c == '\n' {
            chars.next();
            line += 1;
            col = 1;
        } else if c.is_whitespace() {
            chars.next();
            col += 1;
        } else if c == '-' {
            // Either a `--` comment or an error; no other token starts with '-'.
            let (l, co) = (line, col);
            chars.next();
            col += 1;
            if chars.peek() == Some(&'-') {
                for c in chars.by_ref() {
                    if c == '\n' {
                        line += 1;
                        col = 1;
                        break;
                    }
                }
            } else {
                return Err(Error::Syntax { line: l, col: co, msg: "unexpected '-'".into() });
            }
        } else if c.is_ascii_alphabetic() || c == '_' {
            let (l, co) = (line, col);
            let mut ident = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_ascii_alphanumeric() || c == '_' {
                    ident.push(c);
                    chars.next();
                    col += 1;
                } else {
                    break;
                }
            }
            tokens.push(Token { tok: Tok::Ident(ident), line: l, col: co });
        } else if c.is_ascii_digit() {
            let (l, co) = (line, col);
            let mut num = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_ascii_digit() {
                    num.push(c);
                    chars.next();
                    col += 1;
                } else {
                    break;
                }
            }
            let value = num.parse().map_err(|_| Error::Syntax {
                line: l,
                col: co,
                msg: format!("invalid integer literal '{num}'"),
            })?;
            tokens.push(Token { tok: Tok::Int(value), line: l, col: co });
        } else {
            let tok = match c {
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                ';' => Tok::Semi,
                _ => {
                    return Err(Error::Syntax {
                        line,
                        col,
                        msg: format!("unexpected character '{c}'"),
                    })
                }
            };
            tokens.push(Token { tok, line, col });
            chars.next();
            col += 1;
        }
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn err_here<T>(&self, msg: impl Into<String>) -> Result<T> {
        let (line, col) = self
            .tokens
            .get(self.pos.min(self.tokens.len().saturating_sub(1)))
            .map(|t| (t.line, t.col))
            .unwrap_or((1, 1));
        Err(Error::Syntax { line, col, msg: msg.into() })
    }

    fn next(&mut self) -> Result<Token> {
        match self.tokens.get(self.pos) {
            Some(t) => {
                self.pos += 1;
                Ok(t.clone())
            }
            None => {
                let (line, col) =
                    self.tokens.last().map(|t| (t.line, t.col)).unwrap_or((1, 1));
                Err(Error::Syntax { line, col, msg: "unexpected end of input".into() })
            }
        }
    }

    /// Consumes the next token if it is the given keyword (case-insensitive).
    fn eat_keyword(&mut self, kw: &str) -> bool {
        if let Some(Token { tok: Tok::Ident(s), .. }) = self.peek() {
            if s.eq_ignore_ascii_case(kw) {
                self.pos += 1;
                return true;
            }
        }
        false
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<()> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            self.err_here(format!("expected keyword '{kw}'"))
        }
    }

    fn expect_tok(&mut self, tok: Tok, what: &str) -> Result<()> {
        let t = self.next()?;
        if t.tok == tok {
            Ok(())
        } else {
            Err(Error::Syntax { line: t.line, col: t.col, msg: format!("expected {what}") })
        }
    }

    fn expect_ident(&mut self) -> Result<(String, usize, usize)> {
        let t = self.next()?;
        match t.tok {
            Tok::Ident(s) => {
                if is_keyword(&s) {
                    Err(Error::Syntax {
                        line: t.line,
                        col: t.col,
                        msg: format!("keyword '{s}' cannot be used as an identifier"),
                    })
                } else {
                    Ok((s, t.line, t.col))
                }
            }
            _ => Err(Error::Syntax {
                line: t.line,
                col: t.col,
                msg: "expected identifier".into(),
            }),
        }
    }
}

fn is_keyword(s: &str) -> bool {
    const KEYWORDS: &[&str] = &[
        "create", "table", "primary", "key", "foreign", "references", "not", "null",
    ];
    KEYWORDS.iter().any(|k| s.eq_ignore_ascii_case(k))
}

/// Maps a SQL type name to the modeled attribute type.
fn map_sql_type(name: &str, line: usize, col: usize) -> Result<AttributeType> {
    let upper = name.to_ascii_uppercase();
    match upper.as_str() {
        "REAL" | "FLOAT" | "DOUBLE" | "DECIMAL" | "NUMERIC" | "INT" | "INTEGER" | "BIGINT" => {
            Ok(AttributeType::Real)
        }
        "BOOLEAN" | "BOOL" => Ok(AttributeType::Boolean),
        "TEXT" | "VARCHAR" | "CHAR" => Ok(AttributeType::Categorical { levels: None }),
        _ => Err(Error::Syntax { line, col, msg: format!("unknown SQL type '{name}'") }),
    }
}

enum Item {
    Column { name: String, ty: AttributeType, inline_pk: bool, line: usize, col: usize },
    PrimaryKey { column: String, line: usize, col: usize },
    ForeignKey { column: String, table: String, target: String, line: usize, col: usize },
}

fn parse_item(p: &mut Parser) -> Result<Item> {
    if let Some(Token { tok: Tok::Ident(s), line, col }) = p.peek().cloned() {
        if s.eq_ignore_ascii_case("primary") {
            p.next()?;
            p.expect_keyword("key")?;
            p.expect_tok(Tok::LParen, "'('")?;
            let (column, ..) = p.expect_ident()?;
            if let Some(Token { tok: Tok::Comma, line, col }) = p.peek() {
                return Err(Error::Syntax {
                    line: *line,
                    col: *col,
                    msg: "composite primary keys are not supported".into(),
                });
            }
            p.expect_tok(Tok::RParen, "')'")?;
            return Ok(Item::PrimaryKey { column, line, col });
        }
        if s.eq_ignore_ascii_case("foreign") {
            p.next()?;
            p.expect_keyword("key")?;
            p.expect_tok(Tok::LParen, "'('")?;
            let (column, ..) = p.expect_ident()?;
            if let Some(Token { tok: Tok::Comma, line, col }) = p.peek() {
                return Err(Error::Syntax {
                    line: *line,
                    col: *col,
                    msg: "composite foreign keys are not supported".into(),
                });
            }
            p.expect_tok(Tok::RParen, "')'")?;
            p.expect_keyword("references")?;
            let (table, ..) = p.expect_ident()?;
            p.expect_tok(Tok::LParen, "'('")?;
            let (target, ..) = p.expect_ident()?;
            p.expect_tok(Tok::RParen, "')'")?;
            return Ok(Item::ForeignKey { column, table, target, line, col });
        }
    }
    let (name, line, col) = p.expect_ident()?;
    let (ty_name, ty_line, ty_col) = p.expect_ident()?;
    // DOUBLE PRECISION is two tokens.
    if ty_name.eq_ignore_ascii_case("double") {
        p.eat_keyword("precision");
    }
    // Optional length arguments: VARCHAR(80), DECIMAL(10,2).
    if let Some(Token { tok: Tok::LParen, .. }) = p.peek() {
        p.next()?;
        loop {
            let t = p.next()?;
            match t.tok {
                Tok::Int(_) => {}
                _ => {
                    return Err(Error::Syntax {
                        line: t.line,
                        col: t.col,
                        msg: "expected integer type argument".into(),
                    })
                }
            }
            let t = p.next()?;
            match t.tok {
                Tok::Comma => continue,
                Tok::RParen => break,
                _ => {
                    return Err(Error::Syntax {
                        line: t.line,
                        col: t.col,
                        msg: "expected ',' or ')' in type arguments".into(),
                    })
                }
            }
        }
    }
    let ty = map_sql_type(&ty_name, ty_line, ty_col)?;
    let mut inline_pk = false;
    loop {
        if p.eat_keyword("not") {
            p.expect_keyword("null")?;
        } else if p.eat_keyword("primary") {
            p.expect_keyword("key")?;
            inline_pk = true;
        } else {
            break;
        }
    }
    Ok(Item::Column { name, ty, inline_pk, line, col })
}

fn parse_table(p: &mut Parser) -> Result<Table> {
    p.expect_keyword("create")?;
    p.expect_keyword("table")?;
    let (table_name, ..) = p.expect_ident()?;
    p.expect_tok(Tok::LParen, "'('")?;
    let mut items = Vec::new();
    loop {
        items.push(parse_item(p)?);
        let t = p.next()?;
        match t.tok {
            Tok::Comma => continue,
            Tok::RParen => break,
            _ => {
                return Err(Error::Syntax {
                    line: t.line,
                    col: t.col,
                    msg: "expected ',' or ')'".into(),
                })
            }
        }
    }
    p.expect_tok(Tok::Semi, "';'")?;

    // Assemble columns, then assign key roles.
    let mut columns: Vec<Column> = Vec::new();
    let mut pk_decl: Option<(String, usize, usize)> = None;
    let mut fk_decls: Vec<(String, String, String, usize, usize)> = Vec::new();
    for item in items {
        match item {
            Item::Column { name, ty, inline_pk, line, col } => {
                if columns.iter().any(|c| c.name == name) {
                    return Err(Error::Syntax {
                        line,
                        col,
                        msg: format!("duplicate column '{name}' in table '{table_name}'"),
                    });
                }
                if inline_pk {
                    if let Some((prev, l, c)) = &pk_decl {
                        let _ = prev;
                        return Err(Error::Syntax {
                            line: *l,
                            col: *c,
                            msg: format!("table '{table_name}' declares more than one primary key"),
                        });
                    }
                    pk_decl = Some((name.clone(), line, col));
                }
                columns.push(Column { name, role: ColumnRole::Attribute(ty) });
            }
            Item::PrimaryKey { column, line, col } => {
                if pk_decl.is_some() {
                    return Err(Error::Syntax {
                        line,
                        col,
                        msg: format!("table '{table_name}' declares more than one primary key"),
                    });
                }
                pk_decl = Some((column, line, col));
            }
            Item::ForeignKey { column, table, target, line, col } => {
                fk_decls.push((column, table, target, line, col));
            }
        }
    }
    if let Some((pk_col, line, col)) = pk_decl {
        match columns.iter_mut().find(|c| c.name == pk_col) {
            Some(c) => c.role = ColumnRole::PrimaryKey,
            None => {
                return Err(Error::Syntax {
                    line,
                    col,
                    msg: format!("primary key names unknown column '{pk_col}'"),
                })
            }
        }
    }
    for (fk_col, target_table, target_col, line, col) in fk_decls {
        match columns.iter_mut().find(|c| c.name == fk_col) {
            Some(c) => match c.role {
                ColumnRole::Attribute(_) => {
                    c.role = ColumnRole::ForeignKey { table: target_table, column: target_col };
                }
                _ => {
                    return Err(Error::Syntax {
                        line,
                        col,
                        msg: format!("column '{fk_col}' has conflicting key roles"),
                    })
                }
            },
            None => {
                return Err(Error::Syntax {
                    line,
                    col,
                    msg: format!("foreign key names unknown column '{fk_col}'"),
                })
            }
        }
    }
    Ok(Table { name: table_name, columns })
}

/// Parses a sequence of CREATE TABLE statements and validates the result.
pub fn parse_ddl(text: &str) -> Result<Schema> {
    let tokens = lex(text)?;
    let mut parser = Parser { tokens, pos: 0 };
    let mut tables = Vec::new();
    while parser.peek().is_some() {
        tables.push(parse_table(&mut parser)?);
    }
    let schema = Schema { tables };
    schema.validate()?;
    Ok(schema)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_users_table() {
        let schema =
            parse_ddl("CREATE TABLE users(id INT PRIMARY KEY, gender BOOLEAN, age REAL);")
                .unwrap();
        assert_eq!(schema.tables.len(), 1);
        let t = &schema.tables[0];
        assert_eq!(t.name, "users");
        assert_eq!(t.columns[0].role, ColumnRole::PrimaryKey);
        assert_eq!(t.columns[1].role, ColumnRole::Attribute(AttributeType::Boolean));
        assert_eq!(t.columns[2].role, ColumnRole::Attribute(AttributeType::Real));
    }

    #[test]
    fn attribute_less_table_is_valid() {
        let schema = parse_ddl("CREATE TABLE t(id INT PRIMARY KEY);").unwrap();
        assert!(schema.tables[0].attributes().is_empty());
    }

    #[test]
    fn sql_type_mapping() {
        let schema = parse_ddl(
            "CREATE TABLE t (a REAL, b FLOAT, c DOUBLE PRECISION, d DECIMAL(10,2), e NUMERIC,\n\
             f INT, g INTEGER, h BIGINT, i BOOLEAN, j BOOL, k TEXT, l VARCHAR(80), m CHAR(1));",
        )
        .unwrap();
        let t = &schema.tables[0];
        for idx in 0..8 {
            assert_eq!(t.columns[idx].role, ColumnRole::Attribute(AttributeType::Real));
        }
        for idx in 8..10 {
            assert_eq!(t.columns[idx].role, ColumnRole::Attribute(AttributeType::Boolean));
        }
        for idx in 10..13 {
            assert_eq!(
                t.columns[idx].role,
                ColumnRole::Attribute(AttributeType::Categorical { levels: None })
            );
        }
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_ddl("CREATE TABLE t (id INT PRIMARY KEY)").unwrap_err();
        match err {
            Error::Syntax { line, .. } => assert_eq!(line, 1),
            other => panic!("expected syntax error, got {other}"),
        }
        let err = parse_ddl("CREATE TABLE t (\n  id WIBBLE\n);").unwrap_err();
        match err {
            Error::Syntax { line, col, msg } => {
                assert_eq!((line, col), (2, 6));
                assert!(msg.contains("WIBBLE"));
            }
            other => panic!("expected syntax error, got {other}"),
        }
    }

    #[test]
    fn comments_are_skipped() {
        let schema = parse_ddl(
            "-- the user table\nCREATE TABLE t ( -- inline\n  id INT PRIMARY KEY\n);",
        )
        .unwrap();
        assert_eq!(schema.tables[0].name, "t");
    }

    #[test]
    fn composite_keys_rejected() {
        let err = parse_ddl("CREATE TABLE t (a INT, b INT, PRIMARY KEY (a, b));").unwrap_err();
        assert!(err.to_string().contains("composite"));
        let err = parse_ddl(
            "CREATE TABLE p (id INT PRIMARY KEY);\n\
             CREATE TABLE t (a INT, b INT, FOREIGN KEY (a, b) REFERENCES p (id));",
        )
        .unwrap_err();
        assert!(err.to_string().contains("composite"));
    }

    #[test]
    fn duplicate_table_and_column_rejected() {
        let err = parse_ddl(
            "CREATE TABLE t (id INT PRIMARY KEY);\nCREATE TABLE t (id INT PRIMARY KEY);",
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate table"));
        let err = parse_ddl("CREATE TABLE t (a INT, a REAL);").unwrap_err();
        assert!(err.to_string().contains("duplicate column"));
    }

    #[test]
    fn fk_target_must_be_primary_key() {
        let err = parse_ddl(
            "CREATE TABLE p (id INT PRIMARY KEY, other REAL);\n\
             CREATE TABLE t (id INT PRIMARY KEY, p_ref INT,\n\
               FOREIGN KEY (p_ref) REFERENCES p (other));",
        )
        .unwrap_err();
        assert!(err.to_string().contains("not a primary key"));
    }

    #[test]
    fn fk_unresolved_target_rejected() {
        let err = parse_ddl(
            "CREATE TABLE t (id INT PRIMARY KEY, x INT,\n\
               FOREIGN KEY (x) REFERENCES nowhere (id));",
        )
        .unwrap_err();
        assert!(err.to_string().contains("unknown table"));
    }

    #[test]
    fn table_without_primary_key_is_row_keyed() {
        let schema = parse_ddl("CREATE TABLE t (x REAL);").unwrap();
        assert_eq!(schema.tables[0].primary_key(), None);
    }

    #[test]
    fn forward_references_allowed() {
        let schema = parse_ddl(
            "CREATE TABLE child (id INT PRIMARY KEY, p INT,\n\
               FOREIGN KEY (p) REFERENCES parent (id));\n\
             CREATE TABLE parent (id INT PRIMARY KEY);",
        )
        .unwrap();
        assert_eq!(schema.tables.len(), 2);
    }
}
