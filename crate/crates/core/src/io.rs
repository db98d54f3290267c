//! Cohort CSV: one row per `(patient, step)` with columns
//! `patient_id,t,x_1..x_D,a,event_time,censor_time,event_flag`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::sim::{Covariates, PatientPanel};

pub fn write_panel_csv<W: Write>(panel: &PatientPanel, w: W) -> Result<()> {
    let d = panel.dim();
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["patient_id".to_string(), "t".to_string()];
    header.extend((1..=d).map(|k| format!("x_{k}")));
    header.extend(["a", "event_time", "censor_time", "event_flag"].map(String::from));
    out.write_record(&header)?;
    for i in 0..panel.n_patients() {
        for t in 0..panel.steps() {
            let mut row = vec![i.to_string(), t.to_string()];
            row.extend(panel.covariates.at(i, t).iter().map(f64::to_string));
            row.push(panel.dose(i, t).to_string());
            row.push(panel.event_time[i].to_string());
            row.push(panel.censor_time[i].to_string());
            row.push(u8::from(panel.event_flag[i]).to_string());
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(field: &str, line: u64, what: &str) -> Result<T> {
    field.trim().parse().map_err(|_| Error::InvalidInput(format!("line {line}: bad {what} {field:?}")))
}

/// Reads a panel written by [`write_panel_csv`]. Patients must be numbered
/// `0..n` and every patient must have rows for steps `0..=max_followup`.
pub fn read_panel_csv<R: Read>(r: R) -> Result<PatientPanel> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let d = header.iter().filter(|h| h.starts_with("x_")).count();
    let expect: Vec<String> = ["patient_id", "t"]
        .into_iter()
        .map(String::from)
        .chain((1..=d).map(|k| format!("x_{k}")))
        .chain(["a", "event_time", "censor_time", "event_flag"].map(String::from))
        .collect();
    if d == 0 || header.iter().ne(expect.iter().map(String::as_str)) {
        return Err(Error::InvalidInput(format!("unexpected header, want {}", expect.join(","))));
    }
    let mut rows: Vec<(usize, usize, Vec<f64>, f64, usize, usize, bool)> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k as u64 + 2;
        let id: usize = parse(&rec[0], line, "patient_id")?;
        let t: usize = parse(&rec[1], line, "t")?;
        let x = (0..d).map(|j| parse::<f64>(&rec[2 + j], line, "covariate")).collect::<Result<Vec<_>>>()?;
        let a: f64 = parse(&rec[2 + d], line, "dose")?;
        let et: usize = parse(&rec[3 + d], line, "event_time")?;
        let ct: usize = parse(&rec[4 + d], line, "censor_time")?;
        let flag = match rec[5 + d].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(Error::InvalidInput(format!("line {line}: bad event_flag {other:?}"))),
        };
        rows.push((id, t, x, a, et, ct, flag));
    }
    let n = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let steps = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    if n == 0 || rows.len() != n * steps {
        return Err(Error::Shape(format!("{} rows do not form a full {n} x {steps} panel", rows.len())));
    }
    let mut data = vec![f64::NAN; n * steps * d];
    let mut treatment = vec![f64::NAN; n * steps];
    let mut event_time = vec![usize::MAX; n];
    let mut censor_time = vec![usize::MAX; n];
    let mut event_flag = vec![false; n];
    let mut seen = vec![false; n * steps];
    for (id, t, x, a, et, ct, flag) in rows {
        let k = id * steps + t;
        if std::mem::replace(&mut seen[k], true) {
            return Err(Error::InvalidInput(format!("duplicate row for patient {id}, t = {t}")));
        }
        data[k * d..(k + 1) * d].copy_from_slice(&x);
        treatment[k] = a;
        if event_time[id] != usize::MAX && (event_time[id], censor_time[id], event_flag[id]) != (et, ct, flag) {
            return Err(Error::InvalidInput(format!("patient {id}: outcome columns differ across rows")));
        }
        event_time[id] = et;
        censor_time[id] = ct;
        event_flag[id] = flag;
    }
    let panel = PatientPanel {
        max_followup: steps - 1,
        covariates: Covariates { n, steps, dim: d, data },
        treatment,
        event_time,
        censor_time,
        event_flag,
    };
    panel.validate()?;
    Ok(panel)
}
