use std::fmt::Write as _;

use super::{PqReport, VideoScores};
use crate::error::Result;

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.1}", 100.0 * x))
}

fn raw(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// One-row CSV: `label,pq,pq_thing,pq_stuff` (fractions in `[0, 1]`).
pub fn pq_csv(rows: &[(String, PqReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "pq", "pq_thing", "pq_stuff"])?;
    for (label, r) in rows {
        w.write_record([label.clone(), raw(r.pq), raw(r.pq_thing), raw(r.pq_stuff)])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is UTF-8"))
}

/// Fixed-width text table with PQ columns in percent.
pub fn pq_table(rows: &[(String, PqReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(8);
    let mut s = format!(
        "{:<width$}  {:>6}  {:>8}  {:>8}\n",
        "", "PQ", "PQ^thing", "PQ^stuff"
    );
    for (label, r) in rows {
        let _ = writeln!(
            s,
            "{label:<width$}  {:>6}  {:>8}  {:>8}",
            pct(r.pq),
            pct(r.pq_thing),
            pct(r.pq_stuff)
        );
    }
    s
}

/// `label,jf_mean,j_mean,j_recall,f_mean,f_recall,objects`, plus
/// `track_consistency,transitions,consistent` when `with_track`.
pub fn video_csv(rows: &[(String, VideoScores)], with_track: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "label", "jf_mean", "j_mean", "j_recall", "f_mean", "f_recall", "objects",
    ];
    if with_track {
        header.extend(["track_consistency", "transitions", "consistent"]);
    }
    w.write_record(&header)?;
    for (label, v) in rows {
        let f = |x: f64| format!("{x:.6}");
        let mut rec = vec![
            label.clone(),
            f(v.jf_mean()),
            f(v.j_mean),
            f(v.j_recall),
            f(v.f_mean),
            f(v.f_recall),
            v.objects.to_string(),
        ];
        if with_track {
            rec.extend([
                f(v.track_consistency),
                v.transitions.to_string(),
                v.consistent.to_string(),
            ]);
        }
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is UTF-8"))
}

/// Fixed-width text table with scores in percent.
pub fn video_table(rows: &[(String, VideoScores)], with_track: bool) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(8);
    let mut s = format!(
        "{:<width$}  {:>6}  {:>6}  {:>8}  {:>6}  {:>8}",
        "", "J&F", "J-Mean", "J-Recall", "F-Mean", "F-Recall"
    );
    if with_track {
        let _ = write!(s, "  {:>6}  {:>11}", "Track", "Consistent");
    }
    s.push('\n');
    for (label, v) in rows {
        let p = |x: f64| format!("{:.1}", 100.0 * x);
        let _ = write!(
            s,
            "{label:<width$}  {:>6}  {:>6}  {:>8}  {:>6}  {:>8}",
            p(v.jf_mean()),
            p(v.j_mean),
            p(v.j_recall),
            p(v.f_mean),
            p(v.f_recall)
        );
        if with_track {
            let _ = write!(
                s,
                "  {:>6}  {:>11}",
                p(v.track_consistency),
                format!("{}/{}", v.consistent, v.transitions)
            );
        }
        s.push('\n');
    }
    s
}
