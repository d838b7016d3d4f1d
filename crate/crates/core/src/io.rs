//! CSV formats for ensembles, couplings and time series, written with
//! shortest round-trip decimals, LF line endings and atomic replace.

use crate::linalg::Vec3;
use crate::simulator::{CoupledDiagnostics, DiagnosticsRecord};
use crate::transport::{DiscreteMeasure, TransportError, TransportPlan};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Measure(#[from] TransportError),
}

/// Parse a point cloud with columns `x,y,z[,w]`. A header row is detected
/// by its non-numeric first field. Returns the points and, when a fourth
/// column is present, the raw weights.
pub fn parse_points_csv(text: &str) -> Result<(Vec<Vec3>, Option<Vec<f64>>), IoError> {
    let mut points = Vec::new();
    let mut weights: Option<Vec<f64>> = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if idx == 0 && fields[0].parse::<f64>().is_err() {
            continue; // header row
        }
        if fields.len() != 3 && fields.len() != 4 {
            return Err(IoError::Parse {
                line: line_no,
                message: format!("expected 3 or 4 columns, found {}", fields.len()),
            });
        }
        let parse = |field: &str, name: &str| -> Result<f64, IoError> {
            field.parse::<f64>().map_err(|_| IoError::Parse {
                line: line_no,
                message: format!("bad {name} value {field:?}"),
            })
        };
        let p = Vec3::new(
            parse(fields[0], "x")?,
            parse(fields[1], "y")?,
            parse(fields[2], "z")?,
        );
        if !p.is_finite() {
            return Err(IoError::Parse { line: line_no, message: "non-finite point".into() });
        }
        if fields.len() == 4 {
            let w = parse(fields[3], "w")?;
            weights.get_or_insert_with(Vec::new).push(w);
        } else if weights.is_some() {
            return Err(IoError::Parse {
                line: line_no,
                message: "row is missing the weight column".into(),
            });
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(IoError::Parse { line: 1, message: "no data rows".into() });
    }
    if let Some(w) = &weights {
        if w.len() != points.len() {
            return Err(IoError::Parse {
                line: 1,
                message: "weight column missing on some rows".into(),
            });
        }
    }
    Ok((points, weights))
}

/// Parse and normalize into a discrete measure (weights divided by their
/// sum; uniform when no weight column is present).
pub fn measure_from_csv(text: &str) -> Result<DiscreteMeasure, IoError> {
    let (points, weights) = parse_points_csv(text)?;
    match weights {
        None => Ok(DiscreteMeasure::uniform(points)?),
        Some(raw) => {
            let total: f64 = raw.iter().sum();
            if !(total > 0.0) || !total.is_finite() {
                return Err(IoError::Parse {
                    line: 1,
                    message: format!("weights sum to {total}"),
                });
            }
            let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let partial: f64 = weights[..weights.len() - 1].iter().sum();
            let last = weights.len() - 1;
            weights[last] = 1.0 - partial;
            Ok(DiscreteMeasure::new(points, weights)?)
        }
    }
}

pub fn points_to_csv(points: &[Vec3]) -> String {
    let mut out = String::from("x,y,z\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.x, p.y, p.z));
    }
    out
}

pub fn measure_to_csv(measure: &DiscreteMeasure) -> String {
    let mut out = String::from("x,y,z,w\n");
    for (p, w) in measure.points().iter().zip(measure.weights()) {
        out.push_str(&format!("{},{},{},{}\n", p.x, p.y, p.z, w));
    }
    out
}

pub fn coupling_to_csv(plan: &TransportPlan) -> String {
    let mut out = String::from("i,j,mass\n");
    for &(i, j, w) in &plan.coupling {
        out.push_str(&format!("{i},{j},{w}\n"));
    }
    out
}

/// Header `t,px,py,pz,m2,m<p>...,gauss,gauss_clipped` and one row per record.
pub fn diagnostics_to_csv(records: &[DiagnosticsRecord]) -> String {
    let mut header = String::from("t,px,py,pz,m2");
    if let Some(first) = records.first() {
        for (p, _) in &first.moments {
            header.push_str(&format!(",m{p}"));
        }
    }
    header.push_str(",gauss,gauss_clipped\n");
    let mut out = header;
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.time, r.momentum.x, r.momentum.y, r.momentum.z, r.m2
        ));
        for (_, m) in &r.moments {
            out.push_str(&format!(",{m}"));
        }
        out.push_str(&format!(",{},{}\n", r.gaussian, u8::from(r.gaussian_clipped)));
    }
    out
}

/// Header `t,aligned_cost,transport_cost,mp_sum,mpg_sum`; the transport
/// column is empty when the marginals exceeded the assignment cap.
pub fn coupled_series_to_csv(records: &[CoupledDiagnostics]) -> String {
    let mut out = String::from("t,aligned_cost,transport_cost,mp_sum,mpg_sum\n");
    for r in records {
        let transport = r.transport_cost.map(|t| t.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.time, r.aligned_cost, transport, r.m_p_sum, r.m_p_gamma_sum
        ));
    }
    out
}

/// Write via a sibling temp file and rename, so readers never observe a
/// partial file.
pub fn atomic_write(path: &Path, contents: &str) -> Result<(), IoError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        std::process::id()
    ));
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(contents.as_bytes())?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_and_without_header() {
        let (pts, w) = parse_points_csv("x,y,z\n1,2,3\n4,5,6\n").unwrap();
        assert_eq!(pts.len(), 2);
        assert!(w.is_none());
        let (pts, _) = parse_points_csv("1,2,3\n").unwrap();
        assert_eq!(pts[0], Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn parses_weights_and_normalizes() {
        let m = measure_from_csv("x,y,z,w\n1,0,0,2\n0,1,0,6\n").unwrap();
        assert_eq!(m.weights(), &[0.25, 0.75]);
    }

    #[test]
    fn reports_line_numbers() {
        let err = parse_points_csv("x,y,z\n1,2,3\n4,oops,6\n").unwrap_err();
        match err {
            IoError::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("oops"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_points_csv("1,2\n").unwrap_err();
        assert!(matches!(err, IoError::Parse { line: 1, .. }));
    }

    #[test]
    fn round_trips_shortest_decimals() {
        let points = vec![Vec3::new(0.1, -2.5e-17, 3.0)];
        let csv = points_to_csv(&points);
        let (parsed, _) = parse_points_csv(&csv).unwrap();
        assert_eq!(parsed[0], points[0]);
        assert!(csv.ends_with('\n'));
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn atomic_write_creates_file() {
        let dir = std::env::temp_dir().join(format!("landau-io-test-{}", std::process::id()));
        let path = dir.join("out.csv");
        atomic_write(&path, "x,y,z\n1,2,3\n").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "x,y,z\n1,2,3\n");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
