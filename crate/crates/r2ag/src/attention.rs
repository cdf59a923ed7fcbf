//! Last-token attention dumps for heatmaps.

use std::path::Path;

use anyhow::{ensure, Result};

use r2ag_core::prompting::Segment;
use r2ag_core::trainer::{assemble_tensor, retrieval_rows, Example, Model, TrainConfig};
use r2ag_core::vocab::Vocab;

/// Head-averaged attention of the final prompt position, one row per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    /// `layers × n`.
    pub weights: Vec<Vec<f64>>,
    pub tokens: Vec<String>,
    pub segments: Vec<Segment>,
}

impl AttentionDump {
    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Total weight each layer puts on placeholder positions.
    pub fn placeholder_mass(&self) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&self.segments)
                    .filter(|(_, s)| matches!(s, Segment::Placeholder(_)))
                    .map(|(w, _)| w)
                    .sum()
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["layer", "position", "token", "segment", "weight"])?;
        for (l, row) in self.weights.iter().enumerate() {
            for (p, weight) in row.iter().enumerate() {
                w.write_record([
                    l.to_string(),
                    p.to_string(),
                    self.tokens[p].clone(),
                    self.segments[p].to_string(),
                    weight.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Attention of the last prompt token for `ex` as the model would decode
/// it. Prompts without placeholders give a dump with no `R_i` segments.
pub fn export_attention(model: &Model, cfg: &TrainConfig, ex: &Example, vocab: &Vocab) -> Result<AttentionDump> {
    let rows = retrieval_rows(model, ex, cfg)?;
    let input = assemble_tensor(model, &ex.prompt, rows.as_ref())?;
    let maps = model.lm.attention(&model.params, &input)?;
    let n = ex.prompt.len();
    let weights: Vec<Vec<f64>> = maps.iter().map(|m| m.mean.row(n - 1).to_vec()).collect();
    ensure!(weights.iter().all(|r| r.len() == n), "attention width differs from prompt length");
    let tokens = ex
        .prompt
        .tokens
        .iter()
        .map(|&t| vocab.token(t).unwrap_or("<UNK>").to_string())
        .collect();
    Ok(AttentionDump {
        weights,
        tokens,
        segments: ex.prompt.segments.clone(),
    })
}
