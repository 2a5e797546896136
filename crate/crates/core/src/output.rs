//! CSV emission: a `# manifest:` JSON line, a header row, and floats with
//! nine significant digits.

use std::io::{self, Write};

use serde_json::{json, Value};

use crate::model::SystemConfig;

pub const SIG_DIGITS: usize = 9;

/// `%.9g`-style formatting.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", SIG_DIGITS - 1, x);
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..SIG_DIGITS as i32).contains(&exp) {
        let decimals = (SIG_DIGITS as i32 - 1 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!(
            "{}e{}{:02}",
            trim_zeros(mant.to_string()),
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        )
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Set of emptied classes, 1-based: `{}`, `{1}`, `{1;2}`.
pub fn fmt_set(set: &[usize]) -> String {
    let inner: Vec<String> = set.iter().map(|k| (k + 1).to_string()).collect();
    format!("{{{}}}", inner.join(";"))
}

/// Manifest carried by every CSV.
pub fn manifest(command: &str, cfg: Option<&SystemConfig>, params: Value) -> Value {
    json!({
        "tool": "oppsched",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": cfg.map(|c| serde_json::to_value(c).expect("config serializes")),
        "params": params,
    })
}

/// A table held in memory and written in one go.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub manifest: Value,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(manifest: Value, header: &[&'static str]) -> Self {
        Self {
            manifest,
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# manifest: {}", self.manifest)?;
        writeln!(w, "{}", self.header.join(","))?;
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|c| quote(c)).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        w.flush()
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("write to memory");
        String::from_utf8(buf).expect("utf-8")
    }
}

/// Quotes a cell holding a comma, quote or line break.
fn quote(c: &str) -> String {
    if c.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", c.replace('"', "\"\""))
    } else {
        c.to_string()
    }
}

/// Shorthand for building rows of mixed cells.
#[macro_export]
macro_rules! row {
    ($($cell:expr),* $(,)?) => {
        vec![$($crate::output::Cell::cell(&$cell)),*]
    };
}

pub trait Cell {
    fn cell(&self) -> String;
}

impl Cell for f64 {
    fn cell(&self) -> String {
        fmt_f64(*self)
    }
}

impl Cell for usize {
    fn cell(&self) -> String {
        self.to_string()
    }
}

impl Cell for u64 {
    fn cell(&self) -> String {
        self.to_string()
    }
}

impl Cell for bool {
    fn cell(&self) -> String {
        self.to_string()
    }
}

impl Cell for String {
    fn cell(&self) -> String {
        self.clone()
    }
}

impl Cell for &str {
    fn cell(&self) -> String {
        (*self).to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_f64(0.12844), "0.12844");
        assert_eq!(fmt_f64(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_f64(83.33333333333333), "83.3333333");
        assert_eq!(fmt_f64(-0.26), "-0.26");
        assert_eq!(fmt_f64(1e-7), "1e-07");
        assert_eq!(fmt_f64(123456789012.0), "1.23456789e+11");
        assert_eq!(fmt_f64(2.0), "2");
        assert_eq!(fmt_f64(0.0), "0");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
    }

    #[test]
    fn sets_are_one_based() {
        assert_eq!(fmt_set(&[]), "{}");
        assert_eq!(fmt_set(&[0, 1]), "{1;2}");
    }

    #[test]
    fn table_layout() {
        let mut t = Table::new(json!({"a": 1}), &["x", "y"]);
        t.push(row![1.5, "b"]);
        t.push(row![2.0, "random:1,1"]);
        assert_eq!(
            t.to_csv_string(),
            "# manifest: {\"a\":1}\nx,y\n1.5,b\n2,\"random:1,1\"\n"
        );
    }
}
