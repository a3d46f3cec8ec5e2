//! Newline-delimited JSON trajectory files and CSV export.
//!
//! The first line is a [`DatasetHeader`]; every following non-empty line is
//! one [`InteractionSample`].

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetError, InteractionSample};
use crate::setup::FilterSetupConfig;

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub n_agents: usize,
    /// Per-agent state dimension.
    pub state_dim: usize,
    /// Per-agent control dimension.
    pub control_dim: usize,
    pub scenario: String,
    /// Filter the data was generated with, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterSetupConfig>,
    /// Generator or run configuration, recorded for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl DatasetHeader {
    pub fn new(n_agents: usize, state_dim: usize, control_dim: usize, scenario: &str) -> Self {
        Self {
            version: DATASET_VERSION,
            n_agents,
            state_dim,
            control_dim,
            scenario: scenario.to_string(),
            filter: None,
            config: None,
        }
    }

    fn check_sample(&self, s: &InteractionSample) -> Result<(), String> {
        if s.x.len() != self.n_agents * self.state_dim {
            return Err(format!(
                "state has length {}, expected {}",
                s.x.len(),
                self.n_agents * self.state_dim
            ));
        }
        if s.x.iter().any(|v| !v.is_finite()) {
            return Err("state contains a non-finite value".into());
        }
        let check_controls = |name: &str, u: &[Vec<f64>]| {
            if u.len() != self.n_agents {
                return Err(format!("{name} has {} agents, expected {}", u.len(), self.n_agents));
            }
            for (i, ui) in u.iter().enumerate() {
                if ui.len() != self.control_dim {
                    return Err(format!(
                        "{name}[{i}] has length {}, expected {}",
                        ui.len(),
                        self.control_dim
                    ));
                }
                if ui.iter().any(|v| !v.is_finite()) {
                    return Err(format!("{name}[{i}] contains a non-finite value"));
                }
            }
            Ok(())
        };
        check_controls("u", &s.u)?;
        if let Some(d) = &s.u_des {
            check_controls("u_des", d)?;
        }
        if s.t.is_some_and(|t| !t.is_finite()) {
            return Err("time stamp is not finite".into());
        }
        Ok(())
    }
}

/// Writes header and samples; every sample is validated first.
pub fn write_trajectories<W: Write>(
    header: &DatasetHeader,
    samples: &[InteractionSample],
    writer: W,
) -> Result<(), DatasetError> {
    for (k, s) in samples.iter().enumerate() {
        header.check_sample(s).map_err(|message| DatasetError::Schema {
            record: k,
            line: k + 2,
            message,
        })?;
    }
    let mut w = BufWriter::new(writer);
    let line = serde_json::to_string(header).map_err(|e| DatasetError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    writeln!(w, "{line}")?;
    for (k, s) in samples.iter().enumerate() {
        let line = serde_json::to_string(s).map_err(|e| DatasetError::Schema {
            record: k,
            line: k + 2,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories<R: BufRead>(
    reader: R,
) -> Result<(DatasetHeader, Vec<InteractionSample>), DatasetError> {
    let mut lines = reader.lines().enumerate();
    let header: DatasetHeader = loop {
        match lines.next() {
            None => {
                return Err(DatasetError::Parse {
                    line: 1,
                    message: "missing header record".into(),
                })
            }
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                    line: i + 1,
                    message: format!("invalid header: {e}"),
                })?;
            }
        }
    };
    if header.version != DATASET_VERSION {
        return Err(DatasetError::Parse {
            line: 1,
            message: format!(
                "unsupported version {} (expected {DATASET_VERSION})",
                header.version
            ),
        });
    }
    let mut samples = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = samples.len();
        let sample: InteractionSample =
            serde_json::from_str(&line).map_err(|e| DatasetError::Schema {
                record,
                line: i + 1,
                message: e.to_string(),
            })?;
        header
            .check_sample(&sample)
            .map_err(|message| DatasetError::Schema {
                record,
                line: i + 1,
                message,
            })?;
        samples.push(sample);
    }
    Ok((header, samples))
}

pub fn save_trajectories(
    header: &DatasetHeader,
    samples: &[InteractionSample],
    path: &Path,
) -> Result<(), DatasetError> {
    write_trajectories(header, samples, std::fs::File::create(path)?)
}

pub fn load_trajectories(path: &Path) -> Result<(DatasetHeader, Vec<InteractionSample>), DatasetError> {
    read_trajectories(BufReader::new(std::fs::File::open(path)?))
}

/// Flat CSV with one row per sample: identifiers, state, controls and
/// desired controls (empty when unknown).
pub fn write_csv<W: Write>(
    header: &DatasetHeader,
    samples: &[InteractionSample],
    writer: W,
) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut columns = vec!["trajectory_id".to_string(), "t".into(), "tag".into()];
    columns.extend((0..header.n_agents * header.state_dim).map(|k| format!("x{k}")));
    for prefix in ["u", "u_des"] {
        for i in 0..header.n_agents {
            columns.extend((0..header.control_dim).map(|k| format!("{prefix}{}_{k}", i + 1)));
        }
    }
    w.write_record(&columns)?;
    let n_controls = header.n_agents * header.control_dim;
    for s in samples {
        let mut row = vec![
            s.trajectory_id.map(|v| v.to_string()).unwrap_or_default(),
            s.t.map(|v| v.to_string()).unwrap_or_default(),
            s.tag.clone().unwrap_or_default(),
        ];
        row.extend(s.x.iter().map(f64::to_string));
        row.extend(s.stacked_u().iter().map(f64::to_string));
        match s.stacked_u_des() {
            Some(d) => row.extend(d.iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), n_controls)),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> DatasetHeader {
        DatasetHeader::new(2, 4, 2, "weaving")
    }

    fn sample(k: usize) -> InteractionSample {
        let f = k as f64;
        InteractionSample {
            trajectory_id: Some(k as u64 / 3),
            t: Some(0.1 * f),
            x: (0..8).map(|i| (i as f64 + f) / 7.0).collect(),
            u: vec![vec![0.1 + f, 1.0 / 3.0], vec![-0.7, 1e-17]],
            u_des: if k % 2 == 0 {
                Some(vec![vec![0.2, 0.3], vec![0.4, -0.5]])
            } else {
                None
            },
            tag: Some("rear_overtake".into()),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let samples: Vec<_> = (0..10).map(sample).collect();
        let mut buf = Vec::new();
        write_trajectories(&header(), &samples, &mut buf).unwrap();
        let (h, back) = read_trajectories(buf.as_slice()).unwrap();
        assert_eq!(h, header());
        assert_eq!(back, samples);
        for (a, b) in back.iter().zip(&samples) {
            for (p, q) in a.x.iter().zip(&b.x) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn empty_dataset_has_valid_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ndjson");
        save_trajectories(&header(), &[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let (h, samples) = load_trajectories(&path).unwrap();
        assert_eq!(h, header());
        assert!(samples.is_empty());
    }

    #[test]
    fn nan_state_is_rejected_with_record_position() {
        let mut buf = Vec::new();
        write_trajectories(&header(), &[sample(0), sample(1)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replacen("\"x\":[0.0", "\"x\":[NaN", 1);
        match read_trajectories(text.as_bytes()) {
            Err(DatasetError::Schema { record, line, .. }) => {
                assert_eq!((record, line), (0, 2));
            }
            other => panic!("{other:?}"),
        }
        let mut bad = sample(0);
        bad.x[3] = f64::NAN;
        let err = write_trajectories(&header(), &[sample(1), bad], Vec::new()).unwrap_err();
        assert!(err.to_string().contains("record 1"), "{err}");
    }

    #[test]
    fn schema_violations_name_the_line() {
        let mut buf = Vec::new();
        write_trajectories(&header(), &[sample(0)], &mut buf).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text.push_str("{\"x\":[1,2],\"u\":[[0,0],[0,0]]}\n");
        let err = read_trajectories(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("record 1 (line 3)"), "{err}");
        assert!(read_trajectories("".as_bytes()).is_err());
    }

    #[test]
    fn csv_has_one_row_per_sample() {
        let samples: Vec<_> = (0..4).map(sample).collect();
        let mut buf = Vec::new();
        write_csv(&header(), &samples, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("trajectory_id,t,tag,x0"));
        assert!(lines[0].ends_with("u_des2_1"));
        assert_eq!(lines[0].split(',').count(), lines[2].split(',').count());
    }
}
