//! Time-series sample schema, windowing and Z-score normalization.
//!
//! A raw calibration log is a list of [`RawRecord`]s, one per time slot. The
//! forecaster consumes sliding windows of eight features
//! `[T_t, H_t, P_t, U_{t-4}, U_{t-3}, U_{t-2}, U_{t-1}, U_t]` labelled with
//! the next slot's zero-phase voltage `U_{t+1}`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::write_atomic;

/// Number of trailing voltages in a feature window.
pub const VOLTAGE_WINDOW: usize = 5;
/// Feature vector length: temperature, humidity, power and the voltage window.
pub const FEATURE_DIM: usize = 3 + VOLTAGE_WINDOW;

pub const CSV_HEADER: [&str; 5] = ["timestamp_s", "temp_c", "humidity_pct", "power_mw", "voltage_v"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("series too short: {len} records, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("feature dimension {dim} is constant across the pooled samples")]
    DegenerateFeature { dim: usize },
    #[error("label is constant across the pooled samples")]
    DegenerateLabel,
    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: u64,
        field: String,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One time slot of the calibration log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(rename = "timestamp_s")]
    pub timestamp: f64,
    #[serde(rename = "temp_c")]
    pub temperature: f64,
    #[serde(rename = "humidity_pct")]
    pub humidity: f64,
    #[serde(rename = "power_mw")]
    pub laser_power: f64,
    #[serde(rename = "voltage_v")]
    pub zero_voltage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub features: [f64; FEATURE_DIM],
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSequence {
    pub samples: Vec<Sample>,
    pub origin_set_id: usize,
}

impl SampleSequence {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Feature vector for the window ending at `records[last]`.
///
/// Environment readings come from the window's last moment.
pub fn window_features(records: &[RawRecord], last: usize) -> [f64; FEATURE_DIM] {
    let r = &records[last];
    let mut f = [0.0; FEATURE_DIM];
    f[0] = r.temperature;
    f[1] = r.humidity;
    f[2] = r.laser_power;
    for (k, slot) in f[3..].iter_mut().enumerate() {
        *slot = records[last + 1 - VOLTAGE_WINDOW + k].zero_voltage;
    }
    f
}

/// Slides a stride-1 window over `records`, producing `len - 5` samples.
pub fn build_samples(records: &[RawRecord], origin_set_id: usize) -> Result<SampleSequence, DatasetError> {
    let min = VOLTAGE_WINDOW + 1;
    if records.len() < min {
        return Err(DatasetError::TooShort { len: records.len(), min });
    }
    let samples = (VOLTAGE_WINDOW - 1..records.len() - 1)
        .map(|last| Sample {
            features: window_features(records, last),
            label: records[last + 1].zero_voltage,
        })
        .collect();
    Ok(SampleSequence { samples, origin_set_id })
}

/// Per-dimension Z-score statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub label_mean: f64,
    pub label_std: f64,
}

impl Normalizer {
    /// Two-pass mean / population-std over arbitrary-width feature rows.
    pub fn fit<'a, I>(rows: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = (&'a [f64], f64)> + Clone,
    {
        let mut n = 0usize;
        let mut sums: Vec<f64> = Vec::new();
        let mut label_sum = 0.0;
        for (x, y) in rows.clone() {
            if sums.is_empty() {
                sums = vec![0.0; x.len()];
            }
            for (s, v) in sums.iter_mut().zip(x) {
                *s += v;
            }
            label_sum += y;
            n += 1;
        }
        if n < 2 {
            return Err(DatasetError::TooShort { len: n, min: 2 });
        }
        let nf = n as f64;
        let means: Vec<f64> = sums.iter().map(|s| s / nf).collect();
        let label_mean = label_sum / nf;

        let mut sq = vec![0.0; means.len()];
        let mut label_sq = 0.0;
        for (x, y) in rows {
            for ((s, v), m) in sq.iter_mut().zip(x).zip(&means) {
                *s += (v - m) * (v - m);
            }
            label_sq += (y - label_mean) * (y - label_mean);
        }
        let stds: Vec<f64> = sq.iter().map(|s| (s / nf).sqrt()).collect();
        if let Some(dim) = stds.iter().position(|&s| s == 0.0 || !s.is_finite()) {
            return Err(DatasetError::DegenerateFeature { dim });
        }
        let label_std = (label_sq / nf).sqrt();
        if label_std == 0.0 || !label_std.is_finite() {
            return Err(DatasetError::DegenerateLabel);
        }
        Ok(Self { means, stds, label_mean, label_std })
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn normalize_features(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn normalize_label(&self, y: f64) -> f64 {
        (y - self.label_mean) / self.label_std
    }

    pub fn denormalize_label(&self, z: f64) -> f64 {
        z * self.label_std + self.label_mean
    }

    pub fn normalize(&self, sample: &Sample) -> (Vec<f64>, f64) {
        (self.normalize_features(&sample.features), self.normalize_label(sample.label))
    }
}

/// Pools every sample of every sequence and fits the Z-score statistics.
pub fn fit_normalizer(sequences: &[SampleSequence]) -> Result<Normalizer, DatasetError> {
    let rows = sequences
        .iter()
        .flat_map(|s| s.samples.iter())
        .map(|s| (&s.features[..], s.label));
    Normalizer::fit(rows)
}

pub fn normalize(sample: &Sample, normalizer: &Normalizer) -> (Vec<f64>, f64) {
    normalizer.normalize(sample)
}

pub fn denormalize_label(z: f64, normalizer: &Normalizer) -> f64 {
    normalizer.denormalize_label(z)
}

/// Normalized inputs and labels of a sequence, ready for the network.
pub fn normalized_sequence(seq: &SampleSequence, normalizer: &Normalizer) -> (Vec<Vec<f64>>, Vec<f64>) {
    seq.samples.iter().map(|s| normalizer.normalize(s)).unzip()
}

fn validate(records: &[RawRecord]) -> Result<(), DatasetError> {
    for (k, r) in records.iter().enumerate() {
        // header is line 1
        let line = k as u64 + 2;
        let bad = |field: &str, message: &str| DatasetError::Parse {
            line,
            field: field.to_string(),
            message: message.to_string(),
        };
        let fields = [
            ("timestamp_s", r.timestamp),
            ("temp_c", r.temperature),
            ("humidity_pct", r.humidity),
            ("power_mw", r.laser_power),
            ("voltage_v", r.zero_voltage),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(bad(name, "value is not finite"));
        }
        if k > 0 && r.timestamp <= records[k - 1].timestamp {
            return Err(bad("timestamp_s", "timestamps must be strictly increasing"));
        }
        if !(0.0..=100.0).contains(&r.humidity) {
            return Err(bad("humidity_pct", "humidity outside [0, 100]"));
        }
        if r.laser_power <= 0.0 {
            return Err(bad("power_mw", "laser power must be positive"));
        }
    }
    Ok(())
}

pub fn parse_series(text: &str) -> Result<Vec<RawRecord>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| DatasetError::Parse {
        line: 1,
        field: "header".into(),
        message: e.to_string(),
    })?;
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(DatasetError::Parse {
            line: 1,
            field: "header".into(),
            message: format!("expected `{}`", CSV_HEADER.join(",")),
        });
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| DatasetError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            field: "record".into(),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != CSV_HEADER.len() {
            return Err(DatasetError::Parse {
                line,
                field: "record".into(),
                message: format!("expected {} fields, found {}", CSV_HEADER.len(), row.len()),
            });
        }
        let mut vals = [0.0; 5];
        for (i, (raw, name)) in row.iter().zip(CSV_HEADER).enumerate() {
            vals[i] = raw.trim().parse::<f64>().map_err(|e| DatasetError::Parse {
                line,
                field: name.to_string(),
                message: format!("`{raw}`: {e}"),
            })?;
        }
        records.push(RawRecord {
            timestamp: vals[0],
            temperature: vals[1],
            humidity: vals[2],
            laser_power: vals[3],
            zero_voltage: vals[4],
        });
    }
    validate(&records)?;
    Ok(records)
}

pub fn load_series(path: &Path) -> Result<Vec<RawRecord>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_series(&text)
}

/// Renders records as CSV. `{}` formatting of `f64` is shortest round-trip,
/// so a reload reproduces every value bit for bit.
pub fn series_to_csv(records: &[RawRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(&CSV_HEADER.join(","));
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.timestamp, r.temperature, r.humidity, r.laser_power, r.zero_voltage
        ));
    }
    out
}

pub fn save_series(records: &[RawRecord], path: &Path) -> Result<(), DatasetError> {
    write_atomic(path, series_to_csv(records).as_bytes()).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(voltages: &[f64]) -> Vec<RawRecord> {
        voltages
            .iter()
            .enumerate()
            .map(|(k, &v)| RawRecord {
                timestamp: 10.0 * k as f64,
                temperature: 25.0 + k as f64,
                humidity: 40.0,
                laser_power: 1.0,
                zero_voltage: v,
            })
            .collect()
    }

    #[test]
    fn minimal_window() {
        let seq = build_samples(&ramp(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), 0).unwrap();
        assert_eq!(seq.len(), 1);
        let s = seq.samples[0];
        assert_eq!(&s.features[3..], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(s.label, 6.0);
        // environment from the window's last record
        assert_eq!(s.features[0], 29.0);
    }

    #[test]
    fn window_count_and_too_short() {
        let v: Vec<f64> = (0..3600).map(|k| k as f64).collect();
        assert_eq!(build_samples(&ramp(&v), 3).unwrap().len(), 3595);
        assert!(matches!(
            build_samples(&ramp(&[1.0; 5]), 0),
            Err(DatasetError::TooShort { len: 5, min: 6 })
        ));
    }

    #[test]
    fn constant_series() {
        let recs: Vec<RawRecord> = (0..20)
            .map(|k| RawRecord {
                timestamp: k as f64,
                temperature: 25.0,
                humidity: 40.0,
                laser_power: 1.0,
                zero_voltage: 2.0,
            })
            .collect();
        for s in build_samples(&recs, 0).unwrap().samples {
            assert_eq!(s.label, 2.0);
            assert_eq!(&s.features[3..], &[2.0; 5]);
        }
    }

    fn sample_with(dim0: f64, label: f64) -> Sample {
        let mut features = [0.0; FEATURE_DIM];
        for (d, f) in features.iter_mut().enumerate() {
            *f = dim0 * (d as f64 + 1.0);
        }
        Sample { features, label }
    }

    #[test]
    fn two_point_statistics() {
        let seq = SampleSequence {
            samples: vec![sample_with(1.0, 0.0), sample_with(3.0, 2.0)],
            origin_set_id: 0,
        };
        let n = fit_normalizer(&[seq]).unwrap();
        assert_eq!(n.means[0], 2.0);
        assert_eq!(n.stds[0], 1.0);
        assert_eq!(n.label_mean, 1.0);
        assert_eq!(n.label_std, 1.0);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let seq = SampleSequence {
            samples: vec![sample_with(1.0, 0.5); 4],
            origin_set_id: 0,
        };
        assert!(matches!(fit_normalizer(&[seq]), Err(DatasetError::DegenerateFeature { dim: 0 })));
    }

    #[test]
    fn label_z_scores() {
        let n = Normalizer {
            means: vec![0.0; 8],
            stds: vec![1.0; 8],
            label_mean: 2.5,
            label_std: 0.75,
        };
        assert_eq!(n.denormalize_label(0.0), 2.5);
        assert_eq!(n.denormalize_label(1.0), 3.25);
    }

    #[test]
    fn parse_reports_line_and_field() {
        let text = "timestamp_s,temp_c,humidity_pct,power_mw,voltage_v\n0,25,40,1,2\n10,25,abc,1,2\n";
        match parse_series(text) {
            Err(DatasetError::Parse { line, field, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(field, "humidity_pct");
            }
            other => panic!("unexpected {other:?}"),
        }
        let text = "timestamp_s,temp_c,humidity_pct,power_mw,voltage_v\n0,25,40,1,2\n0,25,40,1,2\n";
        assert!(matches!(parse_series(text), Err(DatasetError::Parse { line: 3, .. })));
        let text = "t,temp_c,humidity_pct,power_mw,voltage_v\n";
        assert!(matches!(parse_series(text), Err(DatasetError::Parse { line: 1, .. })));
        let text = "timestamp_s,temp_c,humidity_pct,power_mw,voltage_v\n0,25,140,1,2\n";
        assert!(matches!(parse_series(text), Err(DatasetError::Parse { line: 2, .. })));
    }
}
