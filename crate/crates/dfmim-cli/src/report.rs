//! Run reports: line-oriented key=value pairs for grepping, an optional
//! labeled confusion grid, and a JSON block for programs. Rendering is
//! deterministic and carries no timestamps, so a rerun with the same
//! seed produces the same bytes.

use std::fmt::Display;
use std::fmt::Write as _;
use std::path::Path;

use dfmim_core::metrics::Confusion;

#[derive(Debug, Default, Clone)]
pub struct Report {
    kv: Vec<(String, String)>,
    grid: Option<String>,
    json: Option<String>,
}

/// Shortest round-trip decimal form; parsing it back yields the same bits.
pub fn float(v: f64) -> String {
    format!("{v}")
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn kv(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.kv.push((key.to_string(), value.to_string()));
        self
    }

    pub fn kv_f64(&mut self, key: &str, value: f64) -> &mut Self {
        self.kv(key, float(value))
    }

    pub fn confusion(&mut self, labels: &[String], conf: &Confusion) -> &mut Self {
        self.grid = Some(confusion_grid(labels, conf));
        self
    }

    /// Attaches the machine-readable block. Struct field order drives key
    /// order, so the output is stable.
    pub fn json<T: serde::Serialize>(&mut self, payload: &T) -> &mut Self {
        self.json = Some(serde_json::to_string_pretty(payload).expect("report payload serializes"));
        self
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.kv {
            let _ = writeln!(s, "{k}={v}");
        }
        if let Some(grid) = &self.grid {
            let _ = writeln!(s, "\nconfusion:");
            s.push_str(grid);
        }
        if let Some(json) = &self.json {
            let _ = writeln!(s, "\njson:");
            s.push_str(json);
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.render())
    }
}

/// Counts as a right-aligned grid with `true:`/`pred:` headers.
pub fn confusion_grid(labels: &[String], conf: &Confusion) -> String {
    let n = conf.n_classes();
    assert_eq!(labels.len(), n, "one label per class");
    let row_headers: Vec<String> = labels.iter().map(|l| format!("true:{l}")).collect();
    let col_headers: Vec<String> = labels.iter().map(|l| format!("pred:{l}")).collect();
    let head_width = row_headers.iter().map(String::len).max().unwrap_or(0);
    let col_widths: Vec<usize> = (0..n)
        .map(|j| {
            let digits = (0..n)
                .map(|i| conf.counts()[i][j].to_string().len())
                .max()
                .unwrap_or(1);
            col_headers[j].len().max(digits)
        })
        .collect();

    let mut s = String::new();
    let _ = write!(s, "{:head_width$}", "");
    for (j, h) in col_headers.iter().enumerate() {
        let _ = write!(s, "  {:>width$}", h, width = col_widths[j]);
    }
    s.push('\n');
    for (i, header) in row_headers.iter().enumerate() {
        let _ = write!(s, "{header:head_width$}");
        for (j, width) in col_widths.iter().enumerate() {
            let _ = write!(s, "  {:>width$}", conf.counts()[i][j]);
        }
        s.push('\n');
    }
    s
}

/// Extracts the JSON block of a rendered report.
pub fn json_block(rendered: &str) -> Option<&str> {
    let idx = rendered.find("\njson:\n")?;
    Some(&rendered[idx + "\njson:\n".len()..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Serialize;

    #[derive(Serialize)]
    struct Payload {
        wa: f64,
        ua: f64,
        folds: Vec<u32>,
    }

    #[test]
    fn renders_kv_grid_and_json() {
        let labels: Vec<String> = ["hot", "cold"].iter().map(|s| s.to_string()).collect();
        let conf = Confusion::from_counts(vec![vec![9, 1], vec![50, 50]]).unwrap();
        let mut r = Report::new();
        r.kv("scenario", "S1")
            .kv_f64("wa", 0.5)
            .confusion(&labels, &conf)
            .json(&Payload {
                wa: 0.5,
                ua: 0.25,
                folds: vec![1, 2],
            });
        let out = r.render();
        assert!(out.starts_with("scenario=S1\nwa=0.5\n"));
        assert!(out.contains("pred:hot"));
        assert!(out.contains("true:cold"));
        assert!(out.contains("  50"));
        let json = json_block(&out).unwrap();
        let v: serde_json::Value = serde_json::from_str(json).unwrap();
        assert_eq!(v["ua"], 0.25);
        assert_eq!(v["folds"][1], 2);
    }

    #[test]
    fn grid_rows_are_aligned() {
        let labels: Vec<String> = ["a", "long_label"].iter().map(|s| s.to_string()).collect();
        let conf = Confusion::from_counts(vec![vec![100000, 1], vec![2, 3]]).unwrap();
        let grid = confusion_grid(&labels, &conf);
        let lens: Vec<usize> = grid.lines().map(str::len).collect();
        assert_eq!(lens.len(), 3);
        assert_eq!(lens[0], lens[1]);
        assert_eq!(lens[1], lens[2]);
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-17, 123456.789, -0.0625] {
            assert_eq!(float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut r = Report::new();
        r.kv("a", 1).kv_f64("b", 2.5);
        assert_eq!(r.render(), r.render());
    }
}
