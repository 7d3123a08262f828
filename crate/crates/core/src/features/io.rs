//! CSV input and output for measurement records and feature datasets.
//!
//! Raw schema: `timestamp,T_br,T_l,T_amb,Q_sol,Q_u` with ISO-8601 local
//! timestamps (`2023-06-01T00:20:00`). The dataset cache has one column per
//! feature plus `target`. Floats are written with shortest-round-trip
//! formatting, so reading a file back reproduces the values bit for bit.

use std::path::Path;

use chrono::NaiveDateTime;

use super::{DataRow, Dataset, FeatureError, FeatureVector, RawRecord};

const TS_FMT: &str = "%Y-%m-%dT%H:%M:%S";
const RAW_HEADER: [&str; 6] = ["timestamp", "T_br", "T_l", "T_amb", "Q_sol", "Q_u"];
const DATASET_HEADER: [&str; 13] = [
    "timestamp", "dt_amb", "dtbr_k", "dtbr_km1", "dtbr_km2", "q_u", "qsol_k", "qsol_km1",
    "qsol_km2", "t_sin", "t_cos", "dt_l", "target",
];

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format(TS_FMT).to_string()
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s.trim(), TS_FMT).ok()
}

fn parse_err(path: &Path, line: usize, what: impl Into<String>) -> FeatureError {
    FeatureError::Parse { path: path.display().to_string(), line, what: what.into() }
}

fn parse_f64(path: &Path, line: usize, field: &str, s: &str) -> Result<f64, FeatureError> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("bad {field} value `{s}`")))
}

fn check_header(
    path: &Path,
    got: &csv::StringRecord,
    want: &[&str],
) -> Result<(), FeatureError> {
    let got_cols: Vec<&str> = got.iter().map(str::trim).collect();
    if got_cols != want {
        return Err(parse_err(
            path,
            1,
            format!("expected header `{}`, found `{}`", want.join(","), got_cols.join(",")),
        ));
    }
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<RawRecord>, FeatureError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    check_header(path, reader.headers().map_err(|e| csv_err(path, e))?, &RAW_HEADER)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != RAW_HEADER.len() {
            return Err(parse_err(path, line, format!("{} fields, expected 6", rec.len())));
        }
        let timestamp = parse_timestamp(&rec[0])
            .ok_or_else(|| parse_err(path, line, format!("bad timestamp `{}`", &rec[0])))?;
        out.push(RawRecord {
            timestamp,
            t_br: parse_f64(path, line, "T_br", &rec[1])?,
            t_l: parse_f64(path, line, "T_l", &rec[2])?,
            t_amb: parse_f64(path, line, "T_amb", &rec[3])?,
            q_sol: parse_f64(path, line, "Q_sol", &rec[4])?,
            q_u: parse_f64(path, line, "Q_u", &rec[5])?,
        });
    }
    Ok(out)
}

pub fn write_records_csv(path: &Path, records: &[RawRecord]) -> Result<(), FeatureError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(RAW_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            format_timestamp(r.timestamp),
            format!("{}", r.t_br),
            format!("{}", r.t_l),
            format!("{}", r.t_amb),
            format!("{}", r.q_sol),
            format!("{}", r.q_u),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_csv(path: &Path, ds: &Dataset) -> Result<(), FeatureError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(DATASET_HEADER).map_err(|e| csv_err(path, e))?;
    for row in &ds.rows {
        let mut fields = vec![format_timestamp(row.timestamp)];
        fields.extend(row.features.y.iter().map(|v| format!("{v}")));
        fields.extend(row.features.ytilde.iter().map(|v| format!("{v}")));
        fields.push(format!("{}", row.target));
        w.write_record(&fields).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path, rate_minutes: u32) -> Result<Dataset, FeatureError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    check_header(path, reader.headers().map_err(|e| csv_err(path, e))?, &DATASET_HEADER)?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != DATASET_HEADER.len() {
            return Err(parse_err(path, line, format!("{} fields, expected 13", rec.len())));
        }
        let timestamp = parse_timestamp(&rec[0])
            .ok_or_else(|| parse_err(path, line, format!("bad timestamp `{}`", &rec[0])))?;
        let mut y = [0.0; super::Y_DIM];
        let mut ytilde = [0.0; super::YTILDE_DIM];
        for (j, slot) in y.iter_mut().enumerate() {
            *slot = parse_f64(path, line, DATASET_HEADER[1 + j], &rec[1 + j])?;
        }
        for (j, slot) in ytilde.iter_mut().enumerate() {
            *slot = parse_f64(path, line, DATASET_HEADER[6 + j], &rec[6 + j])?;
        }
        let target = parse_f64(path, line, "target", &rec[12])?;
        rows.push(DataRow { timestamp, features: FeatureVector { y, ytilde }, target });
    }
    Ok(Dataset { rate_minutes, rows })
}

fn csv_err(path: &Path, e: csv::Error) -> FeatureError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FeatureError::Io(io),
        other => FeatureError::Parse {
            path: path.display().to_string(),
            line: 0,
            what: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn sample_records() -> Vec<RawRecord> {
        (0..6)
            .map(|i| RawRecord {
                timestamp: NaiveDate::from_ymd_opt(2023, 6, 1)
                    .unwrap()
                    .and_hms_opt(0, 0, 0)
                    .unwrap()
                    + chrono::Duration::minutes(20 * i),
                t_br: 21.0 + 0.125 * i as f64,
                t_l: 23.1,
                t_amb: 28.0 - 0.3 * i as f64,
                q_sol: 120.0 * i as f64,
                q_u: -0.1,
            })
            .collect()
    }

    #[test]
    fn raw_records_round_trip_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.csv");
        let records = sample_records();
        write_records_csv(&path, &records).unwrap();
        assert_eq!(read_records_csv(&path).unwrap(), records);
        let first = std::fs::read(&path).unwrap();
        write_records_csv(&path, &read_records_csv(&path).unwrap()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn dataset_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.csv");
        let ds = crate::features::build_features(&sample_records(), 20).unwrap();
        assert!(!ds.is_empty());
        write_dataset_csv(&path, &ds).unwrap();
        assert_eq!(read_dataset_csv(&path, 20).unwrap(), ds);
    }

    #[test]
    fn wrong_header_is_reported_with_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "time,T_br\n1,2\n").unwrap();
        let err = read_records_csv(&path).unwrap_err();
        assert!(err.to_string().contains("bad.csv"), "{err}");
    }

    #[test]
    fn bad_float_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "timestamp,T_br,T_l,T_amb,Q_sol,Q_u\n2023-06-01T00:00:00,21,23,28,0,-0.1\n2023-06-01T00:20:00,oops,23,28,0,-0.1\n",
        )
        .unwrap();
        let err = read_records_csv(&path).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
    }
}
