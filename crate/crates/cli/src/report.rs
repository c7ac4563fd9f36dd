//! Run reports: `key: value` sections and aligned tables as text, or one
//! JSON record per line with the same keys.

use std::fmt::Write as _;

use clap::ValueEnum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Format {
    #[default]
    Text,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Text(String),
    Int(u64),
    Float(f64),
    /// Rendered as `n/a` (text) or `null` (JSON) when absent.
    MaybeFloat(Option<f64>),
    Bool(bool),
}

impl Value {
    fn text(&self) -> String {
        match self {
            Value::Text(s) => s.clone(),
            Value::Int(n) => n.to_string(),
            Value::Float(x) => format!("{x:.6}"),
            Value::MaybeFloat(Some(x)) => format!("{x:.6}"),
            Value::MaybeFloat(None) => "n/a".into(),
            Value::Bool(b) => b.to_string(),
        }
    }

    fn json(&self) -> String {
        match self {
            Value::Text(s) => serde_json::to_string(s).expect("strings serialize"),
            Value::Float(x) | Value::MaybeFloat(Some(x)) if !x.is_finite() => "null".into(),
            Value::MaybeFloat(None) => "null".into(),
            _ => self.text(),
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.into())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl From<u64> for Value {
    fn from(n: u64) -> Self {
        Value::Int(n)
    }
}

impl From<usize> for Value {
    fn from(n: usize) -> Self {
        Value::Int(n as u64)
    }
}

impl From<u32> for Value {
    fn from(n: u32) -> Self {
        Value::Int(n.into())
    }
}

impl From<u16> for Value {
    fn from(n: u16) -> Self {
        Value::Int(n.into())
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Float(x)
    }
}

impl From<Option<f64>> for Value {
    fn from(x: Option<f64>) -> Self {
        Value::MaybeFloat(x)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    Fields {
        name: String,
        fields: Vec<(String, Value)>,
    },
    Table {
        name: String,
        columns: Vec<String>,
        rows: Vec<Vec<Value>>,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub sections: Vec<Section>,
    /// Set when the run completed but its checks did not pass.
    pub failure: Option<String>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fields(&mut self, name: &str, fields: Vec<(&str, Value)>) -> &mut Self {
        let fields = fields
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        self.sections.push(Section::Fields {
            name: name.into(),
            fields,
        });
        self
    }

    pub fn table(&mut self, name: &str, columns: &[&str], rows: Vec<Vec<Value>>) -> &mut Self {
        debug_assert!(rows.iter().all(|r| r.len() == columns.len()));
        let columns = columns.iter().map(|c| c.to_string()).collect();
        self.sections.push(Section::Table {
            name: name.into(),
            columns,
            rows,
        });
        self
    }

    /// Value of `key` in the first fields section called `section`.
    pub fn get(&self, section: &str, key: &str) -> Option<&Value> {
        self.sections.iter().find_map(|s| match s {
            Section::Fields { name, fields } if name == section => {
                fields.iter().find(|(k, _)| k == key).map(|(_, v)| v)
            }
            _ => None,
        })
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Text => self.render_text(),
            Format::Jsonl => self.render_jsonl(),
        }
    }

    fn render_text(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            match s {
                Section::Fields { name, fields } => {
                    let _ = writeln!(out, "[{name}]");
                    for (k, v) in fields {
                        let _ = writeln!(out, "{k}: {}", v.text());
                    }
                }
                Section::Table {
                    name,
                    columns,
                    rows,
                } => {
                    let _ = writeln!(out, "[{name}]");
                    let cells: Vec<Vec<String>> = rows
                        .iter()
                        .map(|r| r.iter().map(Value::text).collect())
                        .collect();
                    let widths: Vec<usize> = (0..columns.len())
                        .map(|c| {
                            cells
                                .iter()
                                .map(|r| r[c].len())
                                .chain([columns[c].len()])
                                .max()
                                .unwrap_or(0)
                        })
                        .collect();
                    let line = |row: &[String]| {
                        let padded: Vec<String> = row
                            .iter()
                            .zip(&widths)
                            .map(|(s, w)| format!("{s:<w$}"))
                            .collect();
                        padded.join("  ").trim_end().to_string()
                    };
                    let _ = writeln!(out, "{}", line(columns));
                    for r in &cells {
                        let _ = writeln!(out, "{}", line(r));
                    }
                }
            }
        }
        out
    }

    fn render_jsonl(&self) -> String {
        let mut out = String::new();
        let key = |k: &str| serde_json::to_string(k).expect("strings serialize");
        for s in &self.sections {
            match s {
                Section::Fields { name, fields } => {
                    let mut parts = vec![format!("{}:{}", key("section"), key(name))];
                    parts.extend(
                        fields
                            .iter()
                            .map(|(k, v)| format!("{}:{}", key(k), v.json())),
                    );
                    let _ = writeln!(out, "{{{}}}", parts.join(","));
                }
                Section::Table {
                    name,
                    columns,
                    rows,
                } => {
                    for r in rows {
                        let mut parts = vec![format!("{}:{}", key("section"), key(name))];
                        parts.extend(
                            columns
                                .iter()
                                .zip(r)
                                .map(|(k, v)| format!("{}:{}", key(k), v.json())),
                        );
                        let _ = writeln!(out, "{{{}}}", parts.join(","));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Report {
        let mut r = Report::new();
        r.fields(
            "summary",
            vec![
                ("miou", 12.5.into()),
                ("f_beta", None.into()),
                ("images", 3u64.into()),
            ],
        );
        r.table(
            "per_bucket",
            &["bucket", "miou"],
            vec![
                vec!["small".into(), Some(1.0).into()],
                vec!["large".into(), None.into()],
            ],
        );
        r
    }

    #[test]
    fn text_layout() {
        let text = sample().render(Format::Text);
        assert_eq!(
            text,
            "[summary]\nmiou: 12.500000\nf_beta: n/a\nimages: 3\n\n[per_bucket]\nbucket  miou\nsmall   1.000000\nlarge   n/a\n"
        );
    }

    #[test]
    fn jsonl_records_parse_with_same_keys() {
        let text = sample().render(Format::Jsonl);
        let lines: Vec<serde_json::Value> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["miou"], 12.5);
        assert!(lines[0]["f_beta"].is_null());
        assert_eq!(lines[2]["bucket"], "large");
    }

    #[test]
    fn lookup() {
        assert_eq!(sample().get("summary", "images"), Some(&Value::Int(3)));
        assert_eq!(sample().get("summary", "nope"), None);
    }
}
