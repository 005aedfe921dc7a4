use std::fmt::Write as _;

use super::PipelineError;

/// C-style `%.9g` rendering, so CSV output is stable across platforms.
pub fn format_g9(v: f64) -> String {
    format_g(v, 9)
}

fn format_g(v: f64, precision: usize) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let p = precision.max(1);
    // Round once in scientific form to learn the decimal exponent after rounding.
    let sci = format!("{:.*e}", p - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= p as i32 {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        strip_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// One epoch of a metrics log.
pub trait MetricRow: Clone {
    const HEADER: &'static [&'static str];
    fn epoch(&self) -> u64;
    /// Values after the epoch column, in header order.
    fn values(&self) -> Vec<f64>;
    fn from_values(epoch: u64, values: &[f64]) -> Option<Self>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainRow {
    pub epoch: u64,
    pub train_total: f64,
    pub train_kl: f64,
    pub train_recon: f64,
    pub test_total: f64,
    pub test_rmse: f64,
    pub lr: f64,
}

impl MetricRow for PretrainRow {
    const HEADER: &'static [&'static str] = &[
        "epoch",
        "train_total",
        "train_kl",
        "train_recon",
        "test_total",
        "test_rmse",
        "lr",
    ];

    fn epoch(&self) -> u64 {
        self.epoch
    }

    fn values(&self) -> Vec<f64> {
        vec![
            self.train_total,
            self.train_kl,
            self.train_recon,
            self.test_total,
            self.test_rmse,
            self.lr,
        ]
    }

    fn from_values(epoch: u64, v: &[f64]) -> Option<Self> {
        match *v {
            [train_total, train_kl, train_recon, test_total, test_rmse, lr] => Some(PretrainRow {
                epoch,
                train_total,
                train_kl,
                train_recon,
                test_total,
                test_rmse,
                lr,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneRow {
    pub epoch: u64,
    pub train_ce: f64,
    pub test_ce: f64,
    pub test_accuracy: f64,
    pub lr: f64,
}

impl MetricRow for FinetuneRow {
    const HEADER: &'static [&'static str] = &["epoch", "train_ce", "test_ce", "test_accuracy", "lr"];

    fn epoch(&self) -> u64 {
        self.epoch
    }

    fn values(&self) -> Vec<f64> {
        vec![self.train_ce, self.test_ce, self.test_accuracy, self.lr]
    }

    fn from_values(epoch: u64, v: &[f64]) -> Option<Self> {
        match *v {
            [train_ce, test_ce, test_accuracy, lr] => Some(FinetuneRow {
                epoch,
                train_ce,
                test_ce,
                test_accuracy,
                lr,
            }),
            _ => None,
        }
    }
}

/// Append-only per-epoch log. Epochs run 1, 2, 3, … and every value is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLog<R> {
    rows: Vec<R>,
}

impl<R: MetricRow> Default for MetricsLog<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: MetricRow> MetricsLog<R> {
    pub fn new() -> Self {
        MetricsLog { rows: Vec::new() }
    }

    pub fn push(&mut self, row: R) -> Result<(), PipelineError> {
        let expected = self.rows.len() as u64 + 1;
        if row.epoch() != expected {
            return Err(PipelineError::Log(format!("expected epoch {expected}, got {}", row.epoch())));
        }
        if let Some(i) = row.values().iter().position(|v| !v.is_finite()) {
            return Err(PipelineError::Log(format!(
                "epoch {expected}: column {} is not finite",
                R::HEADER[i + 1]
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[R] {
        &self.rows
    }

    pub fn last(&self) -> Option<&R> {
        self.rows.last()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                std::iter::once(r.epoch().to_string())
                    .chain(r.values().into_iter().map(format_g9))
                    .collect()
            })
            .collect();
        csv_string(R::HEADER, &body)
    }
}

/// Comma-separated text with a header row and LF line endings.
pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g9_matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.1, "0.1"),
            (1.0 / 3.0, "0.333333333"),
            (2.302585092994046, "2.30258509"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (1e-4, "0.0001"),
            (1.5e-5, "1.5e-05"),
            (-0.25, "-0.25"),
            (1e100, "1e+100"),
            (999999999.5, "1e+09"),
            (0.000123456789012, "0.000123456789"),
        ];
        for (v, s) in cases {
            assert_eq!(format_g9(v), s, "{v}");
        }
    }

    fn row(epoch: u64, v: f64) -> FinetuneRow {
        FinetuneRow {
            epoch,
            train_ce: v,
            test_ce: v,
            test_accuracy: 0.5,
            lr: 1e-3,
        }
    }

    #[test]
    fn empty_log_is_header_only() {
        let log = MetricsLog::<FinetuneRow>::new();
        assert_eq!(log.to_csv(), "epoch,train_ce,test_ce,test_accuracy,lr\n");
    }

    #[test]
    fn two_rows_three_lines() {
        let mut log = MetricsLog::new();
        log.push(row(1, 2.0)).unwrap();
        log.push(row(2, 1.5)).unwrap();
        let csv = log.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(!csv.contains('\r'));
        assert!(csv.ends_with('\n'));
        assert_eq!(csv.lines().nth(2).unwrap(), "2,1.5,1.5,0.5,0.001");
    }

    #[test]
    fn rejects_gaps_and_nan() {
        let mut log = MetricsLog::new();
        assert!(log.push(row(2, 1.0)).is_err());
        assert!(log.push(row(1, f64::NAN)).is_err());
        assert!(log.is_empty());
    }
}
