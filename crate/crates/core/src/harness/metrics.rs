use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,goodness,log_variance,nll,d_loss,p_x,p_plus,p_minus,p_star,p_slash,seconds";

/// One row of the training history. Epoch 0 is the post-pretraining baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean raw window count of a generated batch.
    pub goodness: f64,
    pub log_variance: f64,
    /// Per-token NLL of held-out real data.
    pub nll: f64,
    pub d_loss: f64,
    pub unigram: [f64; 5],
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn is_finite(&self) -> bool {
        [self.goodness, self.log_variance, self.nll, self.d_loss, self.seconds]
            .iter()
            .chain(&self.unigram)
            .all(|x| x.is_finite())
    }

    fn to_row(&self) -> String {
        let mut fields = vec![self.epoch.to_string()];
        for x in [self.goodness, self.log_variance, self.nll, self.d_loss].iter().chain(&self.unigram) {
            fields.push(format!("{:.16e}", x));
        }
        fields.push(format!("{:.16e}", self.seconds));
        fields.join(",")
    }

    fn from_row(row: &str) -> Option<Self> {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 11 {
            return None;
        }
        let reals: Vec<f64> = fields[1..].iter().map(|f| f.parse().ok()).collect::<Option<_>>()?;
        Some(MetricsRecord {
            epoch: fields[0].parse().ok()?,
            goodness: reals[0],
            log_variance: reals[1],
            nll: reals[2],
            d_loss: reals[3],
            unigram: [reals[4], reals[5], reals[6], reals[7], reals[8]],
            seconds: reals[9],
        })
    }
}

/// CSV text for `history`: the fixed header, then one row per record with
/// 17 significant digits per real.
pub fn render_metrics_csv(history: &[MetricsRecord]) -> String {
    let mut out = format!("{}\n", METRICS_HEADER);
    for r in history {
        out.push_str(&r.to_row());
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(history: &[MetricsRecord], path: &Path) -> Result<()> {
    std::fs::write(path, render_metrics_csv(history)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Malformed { path: path.to_path_buf(), line: 1, reason: "unexpected metrics header".into() });
    }
    lines
        .enumerate()
        .map(|(i, row)| {
            MetricsRecord::from_row(row).ok_or_else(|| Error::Malformed {
                path: path.to_path_buf(),
                line: i + 2,
                reason: "expected 11 numeric fields".into(),
            })
        })
        .collect()
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_metrics_csv(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(epoch: usize, x: f64) -> MetricsRecord {
        MetricsRecord {
            epoch,
            goodness: x,
            log_variance: -745.0,
            nll: 1.0 / 3.0,
            d_loss: std::f64::consts::LN_2,
            unigram: [2.0 / 3.0, 1.0 / 12.0, 1.0 / 12.0, 1.0 / 12.0, 1.0 / 12.0],
            seconds: 0.0,
        }
    }

    #[test]
    fn empty_history_is_header_only() {
        assert_eq!(render_metrics_csv(&[]), format!("{}\n", METRICS_HEADER));
    }

    #[test]
    fn one_record_is_two_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&[record(0, 0.5)], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n'));
        assert!(text.lines().nth(1).unwrap().starts_with("0,5.0000000000000000e-1,-7.4500000000000000e2,"));
        assert_eq!(read_metrics_csv(&path).unwrap(), vec![record(0, 0.5)]);
    }

    #[test]
    fn malformed_rows_name_the_line() {
        let bad = format!("{}\n0,1,2\n", METRICS_HEADER);
        match parse_metrics_csv(&bad, Path::new("m.csv")) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{:?}", other),
        }
        assert!(parse_metrics_csv("epoch\n", Path::new("m.csv")).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 1..20)) {
            let history: Vec<MetricsRecord> = values.iter().enumerate().map(|(i, &x)| MetricsRecord {
                epoch: i,
                goodness: x,
                log_variance: -x,
                nll: x * 0.5,
                d_loss: x / 3.0,
                unigram: [x, 1.0 - x, x / 7.0, 0.1, 0.2],
                seconds: x.abs(),
            }).collect();
            let back = parse_metrics_csv(&render_metrics_csv(&history), Path::new("m.csv")).unwrap();
            prop_assert_eq!(back, history);
        }
    }
}
