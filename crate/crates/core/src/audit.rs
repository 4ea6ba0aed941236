//! Error breakdowns over a predictions file: per age range, gender,
//! ethnicity, and gender×ethnicity, plus a signed-error histogram.
//!
//! Conventions (also stated in the text report header): samples are grouped
//! by TRUE age; the std column is the standard deviation of the absolute
//! errors, population (divide-by-n) by default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::{PredictionRow, PREDICTIONS_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    AgeRange,
    Gender,
    Ethnicity,
    GenderEthnicity,
}

impl Grouping {
    pub const ALL: [Grouping; 4] = [
        Grouping::AgeRange,
        Grouping::Gender,
        Grouping::Ethnicity,
        Grouping::GenderEthnicity,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Grouping::AgeRange => "age-range",
            Grouping::Gender => "gender",
            Grouping::Ethnicity => "ethnicity",
            Grouping::GenderEthnicity => "gender-ethnicity",
        }
    }
}

impl std::str::FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "age-range" | "age" => Ok(Grouping::AgeRange),
            "gender" => Ok(Grouping::Gender),
            "ethnicity" => Ok(Grouping::Ethnicity),
            "gender-ethnicity" | "cross" => Ok(Grouping::GenderEthnicity),
            other => Err(Error::config(format!(
                "unknown grouping {other:?} (expected age-range, gender, ethnicity or gender-ethnicity)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StdConvention {
    /// Divide by n (the default).
    Population,
    /// Divide by n−1.
    Sample,
}

#[derive(Debug, Clone)]
pub struct GroupStat {
    pub key: String,
    pub count: usize,
    /// None for empty groups (reported, never dropped).
    pub mae: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BiasReport {
    pub grouping: Grouping,
    pub convention: StdConvention,
    pub age_bin_width: f64,
    pub groups: Vec<GroupStat>,
    pub overall_mae: f64,
    pub total: usize,
}

/// Parse a predictions CSV produced by evaluation.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        message: "empty file, expected a header row".to_string(),
    })?;
    let header = header?;
    if header != PREDICTIONS_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid {what}: {s:?}"),
            })
        };
        let parse_u64 = |s: &str, what: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("invalid {what}: {s:?}"),
            })
        };
        rows.push(PredictionRow {
            sample_id: parse_u64(fields[0], "sample_id")?,
            subject_id: parse_u64(fields[1], "subject_id")?,
            true_age: parse_f64(fields[2], "true_age")?,
            predicted_age: parse_f64(fields[3], "predicted_age")?,
            gender: fields[4].to_string(),
            ethnicity: fields[5].to_string(),
        });
    }
    Ok(rows)
}

fn stats(errors: &[f64], convention: StdConvention) -> (Option<f64>, Option<f64>) {
    if errors.is_empty() {
        return (None, None);
    }
    let n = errors.len() as f64;
    let mae = errors.iter().sum::<f64>() / n;
    let denom = match convention {
        StdConvention::Population => n,
        StdConvention::Sample => {
            if errors.len() < 2 {
                return (Some(mae), None);
            }
            n - 1.0
        }
    };
    let var = errors.iter().map(|e| (e - mae) * (e - mae)).sum::<f64>() / denom;
    (Some(mae), Some(var.sqrt()))
}

/// Group the absolute errors of a predictions table and report count, MAE
/// and std per group. Age ranges are half-open `[lo, lo+width)` anchored at
/// the minimum true age in the table; grouping always uses the true age.
pub fn group_report(
    rows: &[PredictionRow],
    grouping: Grouping,
    age_bin_width: f64,
    convention: StdConvention,
) -> Result<BiasReport> {
    if rows.is_empty() {
        return Err(Error::contract("group_report: no predictions".to_string()));
    }
    if age_bin_width <= 0.0 {
        return Err(Error::config("age_bin_width must be positive".to_string()));
    }
    let abs_errors: Vec<f64> = rows
        .iter()
        .map(|r| (r.predicted_age - r.true_age).abs())
        .collect();
    let overall_mae = abs_errors.iter().sum::<f64>() / rows.len() as f64;

    let groups = match grouping {
        Grouping::AgeRange => {
            let anchor = rows
                .iter()
                .map(|r| r.true_age)
                .fold(f64::INFINITY, f64::min);
            let index_of = |age: f64| ((age - anchor) / age_bin_width).floor() as usize;
            let max_index = rows.iter().map(|r| index_of(r.true_age)).max().unwrap_or(0);
            let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); max_index + 1];
            for (r, &e) in rows.iter().zip(&abs_errors) {
                buckets[index_of(r.true_age)].push(e);
            }
            buckets
                .iter()
                .enumerate()
                .map(|(i, errors)| {
                    let lo = anchor + i as f64 * age_bin_width;
                    let hi = lo + age_bin_width;
                    let (mae, std) = stats(errors, convention);
                    GroupStat {
                        key: format!("{}-{}", trim_float(lo), trim_float(hi)),
                        count: errors.len(),
                        mae,
                        std,
                    }
                })
                .collect()
        }
        Grouping::Gender | Grouping::Ethnicity => {
            let mut buckets: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (r, &e) in rows.iter().zip(&abs_errors) {
                let key = match grouping {
                    Grouping::Gender => r.gender.clone(),
                    _ => r.ethnicity.clone(),
                };
                buckets.entry(key).or_default().push(e);
            }
            buckets
                .into_iter()
                .map(|(key, errors)| {
                    let (mae, std) = stats(&errors, convention);
                    GroupStat {
                        key,
                        count: errors.len(),
                        mae,
                        std,
                    }
                })
                .collect()
        }
        Grouping::GenderEthnicity => {
            // Full cross product of observed values; absent cells are
            // reported with count 0 and blank statistics.
            let genders: std::collections::BTreeSet<String> =
                rows.iter().map(|r| r.gender.clone()).collect();
            let ethnicities: std::collections::BTreeSet<String> =
                rows.iter().map(|r| r.ethnicity.clone()).collect();
            let mut buckets: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
            for g in &genders {
                for e in &ethnicities {
                    buckets.insert((g.clone(), e.clone()), Vec::new());
                }
            }
            for (r, &e) in rows.iter().zip(&abs_errors) {
                buckets
                    .get_mut(&(r.gender.clone(), r.ethnicity.clone()))
                    .expect("cross bucket exists")
                    .push(e);
            }
            buckets
                .into_iter()
                .map(|((g, eth), errors)| {
                    let (mae, std) = stats(&errors, convention);
                    GroupStat {
                        key: format!("{g}:{eth}"),
                        count: errors.len(),
                        mae,
                        std,
                    }
                })
                .collect()
        }
    };

    Ok(BiasReport {
        grouping,
        convention,
        age_bin_width,
        groups,
        overall_mae,
        total: rows.len(),
    })
}

fn trim_float(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

impl BiasReport {
    /// Count-weighted MAE over groups; equals the overall MAE.
    pub fn weighted_mae(&self) -> f64 {
        self.groups
            .iter()
            .filter_map(|g| g.mae.map(|m| g.count as f64 * m))
            .sum::<f64>()
            / self.total as f64
    }

    /// Machine-readable CSV: `group,count,mae,std`, one row per group,
    /// then an `overall` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,count,mae,std\n");
        for g in &self.groups {
            let mae = g.mae.map(|v| v.to_string()).unwrap_or_default();
            let std = g.std.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", g.key, g.count, mae, std);
        }
        let _ = writeln!(out, "overall,{},{},", self.total, self.overall_mae);
        out
    }

    /// Aligned human-readable table with the conventions spelled out.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "error breakdown by {}", self.grouping.name());
        let _ = writeln!(
            out,
            "conventions: groups keyed by true age; std of absolute errors ({})",
            match self.convention {
                StdConvention::Population => "population, divide by n",
                StdConvention::Sample => "sample, divide by n-1",
            }
        );
        if self.grouping == Grouping::AgeRange {
            let _ = writeln!(
                out,
                "age ranges are half-open [lo, lo+{}) anchored at the minimum true age",
                trim_float(self.age_bin_width)
            );
        }
        let key_width = self
            .groups
            .iter()
            .map(|g| g.key.len())
            .chain(["group".len(), "overall".len()])
            .max()
            .unwrap_or(8);
        let _ = writeln!(out, "{:<key_width$}  {:>8}  {:>10}  {:>10}", "group", "count", "mae", "std");
        for g in &self.groups {
            let mae = g.mae.map(|v| format!("{v:.4}")).unwrap_or_default();
            let std = g.std.map(|v| format!("{v:.4}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{:<key_width$}  {:>8}  {:>10}  {:>10}",
                g.key, g.count, mae, std
            );
        }
        let _ = writeln!(
            out,
            "{:<key_width$}  {:>8}  {:>10.4}  {:>10}",
            "overall", self.total, self.overall_mae, ""
        );
        out
    }
}

#[derive(Debug, Clone)]
pub struct HistogramBin {
    pub center: f64,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone)]
pub struct Histogram {
    pub bin_width: f64,
    pub bins: Vec<HistogramBin>,
    /// Fraction of samples with |error| <= t for t in {1, 2, 3, 5}.
    pub cumulative: Vec<(f64, f64)>,
}

/// Signed-error histogram with bins symmetric about zero: bin k covers
/// `[k·w − w/2, k·w + w/2)`.
pub fn error_histogram(rows: &[PredictionRow], bin_width: f64) -> Result<Histogram> {
    if rows.is_empty() {
        return Err(Error::contract("error_histogram: no predictions".to_string()));
    }
    if bin_width <= 0.0 {
        return Err(Error::config("bin_width must be positive".to_string()));
    }
    let errors: Vec<f64> = rows.iter().map(|r| r.predicted_age - r.true_age).collect();
    let index = |e: f64| ((e + bin_width / 2.0) / bin_width).floor() as i64;
    let lo = errors.iter().map(|&e| index(e)).min().unwrap();
    let hi = errors.iter().map(|&e| index(e)).max().unwrap();
    let mut counts = vec![0usize; (hi - lo + 1) as usize];
    for &e in &errors {
        counts[(index(e) - lo) as usize] += 1;
    }
    let n = rows.len() as f64;
    let bins = counts
        .iter()
        .enumerate()
        .map(|(i, &count)| HistogramBin {
            center: (lo + i as i64) as f64 * bin_width,
            count,
            fraction: count as f64 / n,
        })
        .collect();
    let cumulative = [1.0, 2.0, 3.0, 5.0]
        .iter()
        .map(|&t| {
            let within = errors.iter().filter(|e| e.abs() <= t).count();
            (t, within as f64 / n)
        })
        .collect();
    Ok(Histogram {
        bin_width,
        bins,
        cumulative,
    })
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center,count,fraction\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{}", b.center, b.count, b.fraction);
        }
        out
    }

    pub fn cumulative_csv(&self) -> String {
        let mut out = String::from("abs_error_threshold,fraction\n");
        for (t, f) in &self.cumulative {
            let _ = writeln!(out, "{t},{f}");
        }
        out
    }
}

/// Write both report renderings plus the histogram tables into `dir`.
pub fn write_report_files(
    dir: &Path,
    report: &BiasReport,
    histogram: Option<&Histogram>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let base = format!("report_{}", report.grouping.name());
    let mut csv = std::fs::File::create(dir.join(format!("{base}.csv")))?;
    csv.write_all(report.to_csv().as_bytes())?;
    let mut text = std::fs::File::create(dir.join(format!("{base}.txt")))?;
    text.write_all(report.to_text().as_bytes())?;
    if let Some(h) = histogram {
        let mut hist = std::fs::File::create(dir.join("histogram.csv"))?;
        hist.write_all(h.to_csv().as_bytes())?;
        let mut cum = std::fs::File::create(dir.join("cumulative.csv"))?;
        cum.write_all(h.cumulative_csv().as_bytes())?;
    }
    Ok(())
}
