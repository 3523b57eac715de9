use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::adapt::Method;
use crate::world::ViewSetting;

/// Guards the relative improvement against a zero baseline.
pub const IMPROVEMENT_EPSILON: f64 = 1e-9;

pub const RESULT_HEADER: [&str; 7] = ["method", "setting", "seed", "episode", "success", "steps", "final_dyn_loss"];

/// One evaluated episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub setting: String,
    pub seed: u64,
    pub episode: usize,
    pub success: u8,
    pub steps: usize,
    pub final_dyn_loss: f64,
}

pub fn write_results<W: Write>(rows: &[ResultRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(RESULT_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads result CSVs. Any file whose header differs from [`RESULT_HEADER`]
/// fails the whole read, and the error lists every such file.
pub fn read_results(paths: &[impl AsRef<Path>]) -> Result<Vec<ResultRow>, BenchError> {
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let file = std::fs::File::open(p).map_err(|source| BenchError::Io {
            path: p.display().to_string(),
            source,
        })?;
        let mut r = csv::Reader::from_reader(file);
        let header = r.headers().map_err(|e| BenchError::Csv(format!("{}: {e}", p.display())))?;
        if header.iter().ne(RESULT_HEADER) {
            bad.push(format!("{} (columns: {})", p.display(), header.iter().collect::<Vec<_>>().join(",")));
            continue;
        }
        for rec in r.deserialize() {
            rows.push(rec.map_err(|e| BenchError::Csv(format!("{}: {e}", p.display())))?);
        }
    }
    if !bad.is_empty() {
        return Err(BenchError::Schema(format!(
            "expected columns {}; mismatched files: {}",
            RESULT_HEADER.join(","),
            bad.join("; ")
        )));
    }
    Ok(rows)
}

/// Position of a setting name in the canonical report order.
fn setting_rank(name: &str) -> usize {
    const ORDER: [&str; 7] = ["train", "novel-easy", "novel-medium", "novel-hard", "moving", "shaking", "novel-fov"];
    let canonical = name.parse::<ViewSetting>().map(|s| s.to_string()).unwrap_or_default();
    ORDER.iter().position(|o| *o == canonical).unwrap_or(ORDER.len())
}

/// Mean success per (setting, method) over every seed and episode.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryTable {
    pub settings: Vec<String>,
    pub methods: Vec<Method>,
    means: BTreeMap<(String, Method), f64>,
}

pub fn relative_improvement(m: f64, none: f64) -> f64 {
    (m - none) / none.max(IMPROVEMENT_EPSILON)
}

impl SummaryTable {
    pub fn from_rows(rows: &[ResultRow]) -> Self {
        let mut acc: BTreeMap<(String, Method), (f64, usize)> = BTreeMap::new();
        for r in rows {
            let e = acc.entry((r.setting.clone(), r.method)).or_default();
            e.0 += r.success as f64;
            e.1 += 1;
        }
        let means: BTreeMap<_, _> = acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        let mut settings: Vec<String> = means.keys().map(|(s, _)| s.clone()).collect();
        settings.dedup();
        settings.sort_by(|a, b| setting_rank(a).cmp(&setting_rank(b)).then(a.cmp(b)));
        let mut methods: Vec<Method> = means.keys().map(|(_, m)| *m).collect();
        methods.sort();
        methods.dedup();
        Self {
            settings,
            methods,
            means,
        }
    }

    pub fn mean(&self, setting: &str, method: Method) -> Option<f64> {
        self.means.get(&(setting.to_string(), method)).copied()
    }

    /// Mean over the per-setting means; `None` unless the method ran on every setting.
    pub fn all_settings(&self, method: Method) -> Option<f64> {
        let v: Option<Vec<f64>> = self.settings.iter().map(|s| self.mean(s, method)).collect();
        v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Improvement over `none` on one setting, or on all settings when `setting` is `None`.
    pub fn improvement(&self, setting: Option<&str>, method: Method) -> Option<f64> {
        let get = |m| match setting {
            Some(s) => self.mean(s, m),
            None => self.all_settings(m),
        };
        Some(relative_improvement(get(method)?, get(Method::None)?))
    }

    fn rows(&self) -> Vec<(String, Option<&str>)> {
        let mut out: Vec<_> = self.settings.iter().map(|s| (s.clone(), Some(s.as_str()))).collect();
        out.push(("All settings".to_string(), None));
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let names: Vec<&str> = self.methods.iter().map(|m| m.as_str()).collect();
        let _ = writeln!(s, "| Setting | {} |", names.join(" | "));
        let _ = writeln!(s, "|---|{}", "---:|".repeat(names.len()));
        for (label, setting) in self.rows() {
            let vals: Vec<Option<f64>> = self
                .methods
                .iter()
                .map(|&m| match setting {
                    Some(st) => self.mean(st, m),
                    None => self.all_settings(m),
                })
                .collect();
            let best = vals.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let cells: Vec<String> = self
                .methods
                .iter()
                .zip(&vals)
                .map(|(&m, v)| match v {
                    None => "-".to_string(),
                    Some(v) => {
                        let mut c = format!("{v:.3}");
                        if let Some(imp) = self.improvement(setting, m) {
                            let arrow = if imp < 0.0 { '↓' } else { '↑' };
                            let _ = write!(c, " ({arrow}{:.0}%)", (imp * 100.0).abs());
                        }
                        if *v == best {
                            c = format!("**{c}**");
                        }
                        c
                    }
                })
                .collect();
            let _ = writeln!(s, "| {label} | {} |", cells.join(" | "));
        }
        s
    }

    /// `setting,method,mean_success,improvement` with an empty improvement
    /// when the table has no `none` entry to compare against.
    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["setting", "method", "mean_success", "improvement"])?;
        for (label, setting) in self.rows() {
            for &m in &self.methods {
                let v = match setting {
                    Some(st) => self.mean(st, m),
                    None => self.all_settings(m),
                };
                if let Some(v) = v {
                    let imp = self.improvement(setting, m).map(|i| i.to_string()).unwrap_or_default();
                    w.write_record([label.clone(), m.to_string(), v.to_string(), imp])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: Method, setting: &str, seed: u64, episode: usize, success: u8) -> ResultRow {
        ResultRow {
            method,
            setting: setting.into(),
            seed,
            episode,
            success,
            steps: 10,
            final_dyn_loss: 0.25,
        }
    }

    #[test]
    fn two_row_fixture_mean() {
        let t = SummaryTable::from_rows(&[row(Method::Movie, "moving", 0, 0, 1), row(Method::Movie, "moving", 1, 0, 0)]);
        assert_eq!(t.mean("moving", Method::Movie), Some(0.5));
        assert_eq!(t.improvement(Some("moving"), Method::Movie), None);
    }

    #[test]
    fn none_alone_improves_zero_percent() {
        let t = SummaryTable::from_rows(&[row(Method::None, "shaking", 0, 0, 1), row(Method::None, "moving", 0, 0, 0)]);
        assert_eq!(t.improvement(Some("shaking"), Method::None), Some(0.0));
        assert_eq!(t.improvement(Some("moving"), Method::None), Some(0.0));
        assert_eq!(t.improvement(None, Method::None), Some(0.0));
        let md = t.to_markdown();
        assert!(md.contains("(↑0%)"), "{md}");
    }

    #[test]
    fn all_settings_row_is_mean_of_setting_rows() {
        let mut rows = Vec::new();
        let rates = [("novel-medium", 3), ("moving", 4), ("shaking", 1), ("novel-fov", 2)];
        for (s, hits) in rates {
            for e in 0..4 {
                rows.push(row(Method::Movie, s, 0, e, (e < hits) as u8));
                rows.push(row(Method::None, s, 0, e, (e < 1) as u8));
            }
        }
        let t = SummaryTable::from_rows(&rows);
        let by_hand = (0.75 + 1.0 + 0.25 + 0.5) / 4.0;
        assert_eq!(t.all_settings(Method::Movie), Some(by_hand));
        assert_eq!(t.improvement(None, Method::Movie), Some((by_hand - 0.25) / 0.25));
        assert_eq!(t.settings, ["novel-medium", "moving", "shaking", "novel-fov"]);
        let md = t.to_markdown();
        assert!(md.contains("| moving | 0.250 (↑0%) | **1.000 (↑300%)** |"), "{md}");
        assert!(md.contains("| All settings | 0.250 (↑0%) | **0.625 (↑150%)** |"), "{md}");
    }

    #[test]
    fn zero_baseline_uses_epsilon() {
        assert_eq!(relative_improvement(0.5, 0.0), 0.5 / IMPROVEMENT_EPSILON);
    }

    #[test]
    fn csv_round_trip_and_schema_check() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("a.csv");
        let rows = vec![row(Method::Dm, "novel-fov", 2, 3, 1)];
        write_results(&rows, std::fs::File::create(&good).unwrap()).unwrap();
        assert_eq!(read_results(&[&good]).unwrap(), rows);
        let bad = dir.path().join("b.csv");
        std::fs::write(&bad, "method,setting,seed\nnone,moving,0\n").unwrap();
        let err = read_results(&[&good, &bad]).unwrap_err().to_string();
        assert!(err.contains("b.csv") && !err.contains("a.csv"), "{err}");
    }

    #[test]
    fn empty_results_still_have_a_header() {
        let mut buf = Vec::new();
        write_results(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim(), RESULT_HEADER.join(","));
    }
}
