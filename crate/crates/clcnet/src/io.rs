//! File formats: line-delimited run records, versioned weights files, and
//! tradeoff-curve CSV exports. All round-trips are lossless for 64-bit
//! floats; writes go through a temp file and an atomic rename.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cascade::{TradeoffCurve, TradeoffPoint};
use crate::error::{Error, Result};
use crate::mapping::{normalize_probs, ProbVector, PROB_SUM_TOL};
use crate::model::ConfidenceModel;

/// Record files may renormalize probability rows whose sum drifts by at most
/// this much; anything further off is rejected as corrupt.
pub const PROB_SUM_REJECT_TOL: f64 = 0.05;

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

/// One recorded classification: sample id, true label, probability vector.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub id: String,
    pub label: usize,
    pub probs: ProbVector,
}

/// A classifier's recorded run over a dataset plus its per-image cost.
#[derive(Debug, Clone)]
pub struct ModelRunRecords {
    pub name: String,
    pub flops_per_image: f64,
    pub records: Vec<RunRecord>,
}

impl ModelRunRecords {
    /// Top-1 accuracy of the recorded run.
    pub fn accuracy(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let correct = self
            .records
            .iter()
            .filter(|r| r.probs.argmax() == r.label)
            .count();
        correct as f64 / self.records.len() as f64
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    model: String,
    flops_per_image: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    probs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logits: Option<Vec<f64>>,
}

/// Loads a record file: one JSON header line (model name, FLOPs per image)
/// followed by one JSON record per line carrying either `probs` or `logits`.
/// Validation is fail-fast with line numbers; probability rows off by at
/// most [`PROB_SUM_REJECT_TOL`] are renormalized with a warning on stderr.
pub fn load_records(path: &Path) -> Result<ModelRunRecords> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header_text = match lines.next() {
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "file is empty, expected a header line".into(),
            })
        }
        Some(l) => l?,
    };
    let header: HeaderLine = serde_json::from_str(&header_text).map_err(|e| Error::Parse {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if !(header.flops_per_image > 0.0) {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "flops_per_image must be positive, got {}",
                header.flops_per_image
            ),
        });
    }
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let probs = match (rec.probs, rec.logits) {
            (Some(_), Some(_)) => {
                return Err(Error::Parse {
                    line: lineno,
                    message: "record has both probs and logits".into(),
                })
            }
            (None, None) => {
                return Err(Error::Parse {
                    line: lineno,
                    message: "record has neither probs nor logits".into(),
                })
            }
            (Some(p), None) => {
                let sum: f64 = p.iter().sum();
                if !sum.is_finite() || (sum - 1.0).abs() > PROB_SUM_REJECT_TOL {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!(
                            "probs sum to {sum}, outside the renormalization tolerance {PROB_SUM_REJECT_TOL}"
                        ),
                    });
                }
                if (sum - 1.0).abs() > PROB_SUM_TOL {
                    eprintln!(
                        "warning: {}:{lineno}: probs sum to {sum}; renormalizing",
                        path.display()
                    );
                }
                normalize_probs(&p, false).map_err(|e| Error::Parse {
                    line: lineno,
                    message: e.to_string(),
                })?
            }
            (None, Some(l)) => normalize_probs(&l, true).map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?,
        };
        match dim {
            None => dim = Some(probs.len()),
            Some(d) if d != probs.len() => {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("dimension {} differs from the file's {}", probs.len(), d),
                })
            }
            _ => {}
        }
        if rec.label >= probs.len() {
            return Err(Error::LabelOutOfRange {
                line: lineno,
                label: rec.label,
                dim: probs.len(),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId {
                line: lineno,
                id: rec.id,
            });
        }
        records.push(RunRecord {
            id: rec.id,
            label: rec.label,
            probs,
        });
    }
    Ok(ModelRunRecords {
        name: header.model,
        flops_per_image: header.flops_per_image,
        records,
    })
}

/// Writes a record file in the format [`load_records`] reads.
pub fn save_records(records: &ModelRunRecords, path: &Path) -> Result<()> {
    atomic_write(path, |out| {
        let header = HeaderLine {
            model: records.name.clone(),
            flops_per_image: records.flops_per_image,
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&header).expect("header serializes")
        )?;
        for r in &records.records {
            let line = RecordLine {
                id: r.id.clone(),
                label: r.label,
                probs: Some(r.probs.values().to_vec()),
                logits: None,
            };
            writeln!(
                out,
                "{}",
                serde_json::to_string(&line).expect("record serializes")
            )?;
        }
        Ok(())
    })
}

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub source_datasets: Vec<String>,
    pub fold: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    format_version: u32,
    provenance: Provenance,
    model: ConfidenceModel,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

/// Persists the model as versioned JSON. JSON floats are written in
/// shortest-roundtrip form, so every parameter reloads bit-exactly.
pub fn save_weights(model: &ConfidenceModel, provenance: &Provenance, path: &Path) -> Result<()> {
    model.validate()?;
    let file = WeightsFile {
        format_version: WEIGHTS_FORMAT_VERSION,
        provenance: provenance.clone(),
        model: model.clone(),
    };
    atomic_write(path, |out| {
        serde_json::to_writer(&mut *out, &file)
            .map_err(|e| Error::Corruption(format!("serialize failed: {e}")))?;
        out.write_all(b"\n")?;
        Ok(())
    })
}

/// Loads a weights file, rejecting unknown format versions and structurally
/// inconsistent content without returning a partial model.
pub fn load_weights(path: &Path) -> Result<(ConfidenceModel, Provenance)> {
    let text = fs::read_to_string(path)?;
    let probe: VersionProbe = serde_json::from_str(&text)
        .map_err(|e| Error::Corruption(format!("unreadable weights file: {e}")))?;
    if probe.format_version != WEIGHTS_FORMAT_VERSION {
        return Err(Error::Version {
            found: probe.format_version,
            expected: WEIGHTS_FORMAT_VERSION,
        });
    }
    let file: WeightsFile = serde_json::from_str(&text)
        .map_err(|e| Error::Corruption(format!("malformed weights file: {e}")))?;
    file.model.validate()?;
    Ok((file.model, file.provenance))
}

const CURVE_HEADER: &str = "threshold,top1_accuracy,avg_flops_per_image,deep_fraction";

/// Writes a curve as CSV with full float precision (shortest-roundtrip
/// formatting) and a header row. Refuses empty curves before touching the
/// filesystem.
pub fn export_curve(curve: &TradeoffCurve, path: &Path) -> Result<()> {
    if curve.is_empty() {
        return Err(Error::EmptyInput(
            "refusing to export an empty curve".into(),
        ));
    }
    atomic_write(path, |out| {
        writeln!(out, "{CURVE_HEADER}")?;
        for p in curve.points() {
            writeln!(
                out,
                "{},{},{},{}",
                p.threshold, p.top1_accuracy, p.avg_flops_per_image, p.deep_fraction
            )?;
        }
        Ok(())
    })
}

/// Reads a curve CSV back; exact inverse of [`export_curve`].
pub fn load_curve(path: &Path) -> Result<TradeoffCurve> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    match lines.next() {
        Some(Ok(h)) if h == CURVE_HEADER => {}
        Some(Ok(h)) => {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected header {h:?}"),
            })
        }
        Some(Err(e)) => return Err(e.into()),
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty curve file".into(),
            })
        }
    }
    let mut points = Vec::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = text.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 4 columns, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("bad float {s:?}: {e}"),
            })
        };
        points.push(TradeoffPoint {
            threshold: parse(fields[0])?,
            top1_accuracy: parse(fields[1])?,
            avg_flops_per_image: parse(fields[2])?,
            deep_fraction: parse(fields[3])?,
        });
    }
    Ok(TradeoffCurve::new(points))
}

/// Write-temp-then-rename: concurrent readers never observe partial files.
fn atomic_write<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let tmp = tmp_path(path);
    let result = (|| -> Result<()> {
        let file = File::create(&tmp)?;
        let mut out = BufWriter::new(file);
        write(&mut out)?;
        out.flush()?;
        Ok(())
    })();
    match result {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConfidenceModel, ModelConfig};
    use tempfile::tempdir;

    fn write_lines(path: &Path, lines: &[&str]) {
        fs::write(path, lines.join("\n")).unwrap();
    }

    #[test]
    fn well_formed_file_loads() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_lines(
            &path,
            &[
                r#"{"model":"m","flops_per_image":1e9}"#,
                r#"{"id":"a","label":0,"probs":[0.7,0.3]}"#,
                r#"{"id":"b","label":1,"probs":[0.4,0.6]}"#,
                r#"{"id":"c","label":0,"logits":[2.0,1.0]}"#,
            ],
        );
        let recs = load_records(&path).unwrap();
        assert_eq!(recs.records.len(), 3);
        assert_eq!(recs.name, "m");
        assert_eq!(recs.accuracy(), 1.0);
    }

    #[test]
    fn drifted_probs_renormalize_but_garbage_rejects() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_lines(
            &path,
            &[
                r#"{"model":"m","flops_per_image":1.0}"#,
                r#"{"id":"a","label":0,"probs":[0.68,0.3]}"#,
            ],
        );
        let recs = load_records(&path).unwrap();
        let sum: f64 = recs.records[0].probs.values().iter().sum();
        assert!((sum - 1.0).abs() <= PROB_SUM_TOL);

        write_lines(
            &path,
            &[
                r#"{"model":"m","flops_per_image":1.0}"#,
                r#"{"id":"a","label":0,"probs":[0.5,0.3]}"#,
            ],
        );
        assert!(matches!(
            load_records(&path),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn duplicate_id_cites_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_lines(
            &path,
            &[
                r#"{"model":"m","flops_per_image":1.0}"#,
                r#"{"id":"a","label":0,"probs":[0.7,0.3]}"#,
                r#"{"id":"a","label":1,"probs":[0.4,0.6]}"#,
            ],
        );
        match load_records(&path) {
            Err(Error::DuplicateId { line, id }) => {
                assert_eq!(line, 3);
                assert_eq!(id, "a");
            }
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_cites_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_lines(
            &path,
            &[
                r#"{"model":"m","flops_per_image":1.0}"#,
                r#"{"id":"a","label":2,"probs":[0.7,0.3]}"#,
            ],
        );
        assert!(matches!(
            load_records(&path),
            Err(Error::LabelOutOfRange {
                line: 2,
                label: 2,
                dim: 2
            })
        ));
    }

    #[test]
    fn dimension_mismatch_cites_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_lines(
            &path,
            &[
                r#"{"model":"m","flops_per_image":1.0}"#,
                r#"{"id":"a","label":0,"probs":[0.7,0.3]}"#,
                r#"{"id":"b","label":0,"probs":[0.5,0.3,0.2]}"#,
            ],
        );
        assert!(matches!(
            load_records(&path),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn records_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let recs = ModelRunRecords {
            name: "m".into(),
            flops_per_image: 0.39e9,
            records: vec![RunRecord {
                id: "a".into(),
                label: 1,
                probs: normalize_probs(&[0.123456789012345, 0.876543210987655], false).unwrap(),
            }],
        };
        save_records(&recs, &path).unwrap();
        let back = load_records(&path).unwrap();
        assert_eq!(
            back.records[0].probs.values(),
            recs.records[0].probs.values()
        );
        assert_eq!(back.flops_per_image, recs.flops_per_image);
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.json");
        let cfg = ModelConfig {
            m: 8,
            n_steps: 2,
            n_d: 3,
            n_a: 3,
            attn_width: 4,
            ..ModelConfig::default()
        };
        let mut model = ConfidenceModel::init(&cfg, 7).unwrap();
        // Values whose shortest decimal form needs an exact (not fast-path)
        // parser to come back to the same bits.
        model.mapping.wq[0] = -0.12565511739282625;
        model.mapping.wk[1] = f64::from_bits(0xbfb7ff5168cf199c);
        save_weights(&model, &Provenance::default(), &path).unwrap();
        let (loaded, _) = load_weights(&path).unwrap();
        assert_eq!(
            model.mapping.wq[0].to_bits(),
            loaded.mapping.wq[0].to_bits()
        );
        assert_eq!(
            model.mapping.wk[1].to_bits(),
            loaded.mapping.wk[1].to_bits()
        );
        let p = normalize_probs(&[0.5, 0.3, 0.2], false).unwrap();
        assert_eq!(
            model.confidence(&p).unwrap().to_bits(),
            loaded.confidence(&p).unwrap().to_bits()
        );
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.json");
        fs::write(&path, r#"{"format_version":99,"provenance":{"seed":0,"source_datasets":[],"fold":null},"model":{}}"#).unwrap();
        assert!(matches!(
            load_weights(&path),
            Err(Error::Version { found: 99, .. })
        ));
    }

    #[test]
    fn truncated_weights_are_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.json");
        let cfg = ModelConfig {
            m: 8,
            n_steps: 1,
            n_d: 2,
            n_a: 2,
            attn_width: 4,
            ..ModelConfig::default()
        };
        let model = ConfidenceModel::init(&cfg, 7).unwrap();
        save_weights(&model, &Provenance::default(), &path).unwrap();
        let full = fs::read_to_string(&path).unwrap();
        fs::write(&path, &full[..full.len() / 2]).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Corruption(_))));
    }

    #[test]
    fn curve_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let curve = TradeoffCurve::new(vec![
            TradeoffPoint {
                threshold: 0.01,
                top1_accuracy: 2.0 / 3.0,
                avg_flops_per_image: 0.39e9 + 2.7e6,
                deep_fraction: 1.0 / 12.0,
            },
            TradeoffPoint {
                threshold: 0.02,
                top1_accuracy: 0.7777777777777778,
                avg_flops_per_image: 7.4e8,
                deep_fraction: 0.0833333333333333,
            },
        ]);
        export_curve(&curve, &path).unwrap();
        let back = load_curve(&path).unwrap();
        assert_eq!(back, curve);
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3); // header + 2 rows
    }

    #[test]
    fn empty_curve_creates_no_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.csv");
        assert!(matches!(
            export_curve(&TradeoffCurve::new(vec![]), &path),
            Err(Error::EmptyInput(_))
        ));
        assert!(!path.exists());
    }
}
