//! JSON Lines, CSV and plain-text file formats.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use r2ag_core::embedding::{Embedding, RankedDoc, RankedList, Similarity};
use r2ag_core::features::FeatureList;
use r2ag_core::synth::{QaDoc, QaInstance};
use r2ag_core::trainer::MetricRow;
use r2ag_core::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpDoc {
    pub doc_id: String,
    pub emb: Vec<f64>,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// One line of an embedding dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub query_id: String,
    pub query_emb: Vec<f64>,
    pub docs: Vec<DumpDoc>,
}

impl DumpRecord {
    pub fn from_list(list: &RankedList) -> Self {
        Self {
            query_id: list.query_id.clone(),
            query_emb: list.query.0.clone(),
            docs: list
                .docs
                .iter()
                .map(|d| DumpDoc {
                    doc_id: d.doc_id.clone(),
                    emb: d.embedding.0.clone(),
                    label: u8::from(d.label),
                    text: d.text.clone(),
                })
                .collect(),
        }
    }

    /// Validated list, re-sorted by `sim` if it is not already in order.
    pub fn into_list(self, sim: Similarity) -> r2ag_core::Result<RankedList> {
        let docs = self
            .docs
            .into_iter()
            .map(|d| {
                if d.label > 1 {
                    return Err(r2ag_core::Error::Data(format!("label of {} must be 0 or 1", d.doc_id)));
                }
                Ok(RankedDoc {
                    doc_id: d.doc_id,
                    embedding: Embedding(d.emb),
                    label: d.label == 1,
                    text: d.text,
                })
            })
            .collect::<r2ag_core::Result<Vec<_>>>()?;
        let mut list = RankedList {
            query_id: self.query_id,
            query: Embedding(self.query_emb),
            docs,
        };
        list.validate()?;
        if !list.is_sorted(sim) {
            list.sort(sim);
        }
        Ok(list)
    }
}

/// Parses every non-blank line of a JSON Lines file; errors carry the
/// 1-based line number.
pub fn read_jsonl<T, F>(path: &Path, mut convert: F) -> Result<Vec<T>>
where
    F: FnMut(&str) -> Result<T>,
{
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("{}: reading line {}", path.display(), n + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(convert(&line).with_context(|| format!("{}: line {}", path.display(), n + 1))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dump(path: &Path, sim: Similarity) -> Result<Vec<RankedList>> {
    read_jsonl(path, |line| {
        let rec: DumpRecord = serde_json::from_str(line)?;
        Ok(rec.into_list(sim)?)
    })
}

pub fn save_dump(path: &Path, lists: &[RankedList]) -> Result<()> {
    let recs: Vec<DumpRecord> = lists.iter().map(DumpRecord::from_list).collect();
    write_jsonl(path, &recs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub query_id: String,
    pub features: Vec<[f64; 3]>,
}

impl FeatureRecord {
    pub fn new(query_id: &str, f: &FeatureList) -> Self {
        Self {
            query_id: query_id.to_string(),
            features: f.rows.clone(),
        }
    }
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    read_jsonl(path, |line| Ok(serde_json::from_str(line)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetDoc {
    text: String,
    label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetRecord {
    query: String,
    docs: Vec<DatasetDoc>,
    answers: Vec<String>,
}

fn instance_from_record(r: DatasetRecord) -> Result<QaInstance> {
    if r.docs.is_empty() {
        bail!(r2ag_core::Error::EmptyList);
    }
    let docs = r
        .docs
        .into_iter()
        .map(|d| match d.label {
            0 | 1 => Ok(QaDoc {
                text: d.text,
                label: d.label == 1,
            }),
            l => Err(anyhow!("label must be 0 or 1, got {l}")),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QaInstance {
        query: r.query,
        docs,
        answers: r.answers,
    })
}

pub fn load_dataset(path: &Path) -> Result<Vec<QaInstance>> {
    read_jsonl(path, |line| instance_from_record(serde_json::from_str(line)?))
}

pub fn save_dataset(path: &Path, data: &[QaInstance]) -> Result<()> {
    let recs: Vec<DatasetRecord> = data
        .iter()
        .map(|q| DatasetRecord {
            query: q.query.clone(),
            docs: q
                .docs
                .iter()
                .map(|d| DatasetDoc {
                    text: d.text.clone(),
                    label: u8::from(d.label),
                })
                .collect(),
            answers: q.answers.clone(),
        })
        .collect();
    write_jsonl(path, &recs)
}

/// One token per line, id = line index.
pub fn save_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let tokens = text.lines().map(str::to_string).collect();
    Vocab::from_tokens(tokens).with_context(|| format!("parsing {}", path.display()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metric_log(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "loss_qdm", "loss_lm", "val_acc"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            opt(r.loss_qdm),
            r.loss_lm.to_string(),
            opt(r.val_acc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metric_log(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let parse_opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { Ok(Some(s.parse()?)) } };
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(MetricRow {
                step: rec[0].parse()?,
                loss: rec[1].parse()?,
                loss_qdm: parse_opt(&rec[2])?,
                loss_lm: rec[3].parse()?,
                val_acc: parse_opt(&rec[4])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let list = RankedList {
            query_id: "q".into(),
            query: Embedding(vec![0.1 + 0.2, 1.0 / 3.0]),
            docs: vec![RankedDoc {
                doc_id: "a".into(),
                embedding: Embedding(vec![std::f64::consts::PI, -1e-300]),
                label: true,
                text: None,
            }],
        };
        save_dump(&p, std::slice::from_ref(&list)).unwrap();
        assert_eq!(load_dump(&p, Similarity::Cosine).unwrap(), vec![list]);
    }

    #[test]
    fn metric_log_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![
            MetricRow { step: 1, loss: 2.5, loss_qdm: Some(1.0), loss_lm: 1.5, val_acc: None },
            MetricRow { step: 2, loss: 1.25, loss_qdm: None, loss_lm: 1.25, val_acc: Some(0.5) },
        ];
        write_metric_log(&p, &rows).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("step,loss,loss_qdm,loss_lm,val_acc\n"));
        assert_eq!(read_metric_log(&p).unwrap(), rows);
    }
}
