//! The experiment matrix: foundation LM, baseline vs R²AG cells, ablations,
//! learnable tokens and the top-k sweep.
//!
//! The toy LM stands in for a pretrained LLM. It is pretrained once, then
//! frozen and shared by every cell. Its pretraining mixes plain RAG prompts
//! with prompts whose `<R>` slots hold the literal words `high` or `low`
//! according to the document label, which plays the part of an LLM that
//! already understands textual relevance annotations. No cell ever sees
//! those words at evaluation time: the baseline gets the `<R>`-free
//! template, and R²AG has to produce placeholder vectors from retrieval
//! features alone.

use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use r2ag_core::features::extract_features;
use r2ag_core::lm::Positions;
use r2ag_core::metrics;
use r2ag_core::prompting::{PromptMode, PromptTemplate};
use r2ag_core::synth::{self, QaDoc, QaInstance, SynthConfig, ATTRIBUTES};
use r2ag_core::tensor::Tensor;
use r2ag_core::trainer::{
    assemble_tensor, prepare, qdm_accuracy, retrieval_rows, train_loop, Example, Model, TrainConfig,
};
use r2ag_core::vocab::Vocab;

use crate::templates;

pub const HIGH: &str = "high";
pub const LOW: &str = "low";

/// One column of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Baseline,
    R2ag,
    WithoutR,
    WithoutGamma,
    WithoutZeta,
    WithoutQdm,
    Learnable,
}

impl Cell {
    pub const ABLATIONS: [Cell; 4] = [Cell::WithoutR, Cell::WithoutGamma, Cell::WithoutZeta, Cell::WithoutQdm];

    pub fn name(self) -> &'static str {
        match self {
            Cell::Baseline => "baseline",
            Cell::R2ag => "r2ag",
            Cell::WithoutR => "w/o r",
            Cell::WithoutGamma => "w/o gamma",
            Cell::WithoutZeta => "w/o zeta",
            Cell::WithoutQdm => "w/o L_QDM",
            Cell::Learnable => "learnable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Cell::Baseline,
            "r2ag" => Cell::R2ag,
            "w/o r" | "wo_r" => Cell::WithoutR,
            "w/o gamma" | "wo_gamma" => Cell::WithoutGamma,
            "w/o zeta" | "wo_zeta" => Cell::WithoutZeta,
            "w/o L_QDM" | "wo_qdm" => Cell::WithoutQdm,
            "learnable" => Cell::Learnable,
            _ => bail!("unknown cell {s:?}"),
        })
    }

    /// `base` with this cell's mode and ablation flags.
    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        let mut c = TrainConfig {
            mode: PromptMode::R2ag,
            learnable_tokens: false,
            use_r: true,
            use_gamma: true,
            use_zeta: true,
            use_qdm_loss: true,
            ..base.clone()
        };
        match self {
            Cell::Baseline => c.mode = PromptMode::Baseline,
            Cell::R2ag => {}
            Cell::WithoutR => c.use_r = false,
            Cell::WithoutGamma => c.use_gamma = false,
            Cell::WithoutZeta => c.use_zeta = false,
            Cell::WithoutQdm => c.use_qdm_loss = false,
            Cell::Learnable => {
                c.mode = PromptMode::Learnable;
                c.learnable_tokens = true;
            }
        }
        c
    }

    pub fn trains(self) -> bool {
        self != Cell::Baseline
    }

    pub fn has_qdm(self) -> bool {
        !matches!(self, Cell::Baseline | Cell::WithoutQdm | Cell::Learnable)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub k: usize,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Share of pretraining prompts that carry `high`/`low` annotations.
    pub hint_fraction: f64,
    pub pretrain_seed: u64,
    /// Template pair: `compact` or `paper`.
    pub templates: String,
    /// Bridge-side settings shared by every cell.
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 100,
            n_test: 500,
            k: 10,
            data_seed: 11,
            seeds: vec![1, 2, 3],
            pretrain_steps: 2000,
            pretrain_lr: 1e-3,
            hint_fraction: 0.75,
            pretrain_seed: 0,
            templates: "compact".into(),
            train: TrainConfig {
                h1: 64,
                lr: 1e-3,
                steps: 400,
                eval_every: 100,
                lm_positions: Positions::Distance,
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn template_texts(&self) -> Result<(&'static str, &'static str)> {
        match self.templates.as_str() {
            "compact" => Ok((templates::RAG_COMPACT, templates::R2AG_COMPACT)),
            "paper" => Ok((templates::RAG, templates::R2AG)),
            t => bail!("unknown template set {t:?} (compact or paper)"),
        }
    }
}

/// Every word the generator can emit, the templates, the hint words and the
/// texts of `extra`, so datasets generated at other `k` share one vocabulary.
pub fn build_vocab(exp: &ExperimentConfig, extra: &[QaInstance]) -> Vocab {
    let entities = SynthConfig::new(1, exp.k, exp.data_seed).entities;
    let names = synth::entity_names(entities, exp.data_seed);
    let mut texts = vec![
        templates::RAG.to_string(),
        templates::R2AG.to_string(),
        templates::RAG_COMPACT.to_string(),
        templates::R2AG_COMPACT.to_string(),
        format!("{HIGH} {LOW}"),
    ];
    for (attr, values) in ATTRIBUTES {
        texts.push(synth::query_text(attr, &names[0]));
        for v in values {
            texts.push(synth::fact_text(attr, &names[0], v));
        }
    }
    texts.push(names.join(" "));
    for q in extra {
        texts.push(q.query.clone());
        texts.extend(q.docs.iter().map(|d| d.text.clone()));
        texts.extend(q.answers.iter().cloned());
    }
    Vocab::build(texts.iter().map(String::as_str))
}

/// Train, validation and test splits drawn from one generated pool.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<QaInstance>,
    pub val: Vec<QaInstance>,
    pub test: Vec<QaInstance>,
}

pub fn generate_splits(exp: &ExperimentConfig, k: usize) -> Result<Splits> {
    let n = exp.n_train + exp.n_val + exp.n_test;
    let mut all = synth::generate(&SynthConfig::new(n, k, exp.data_seed))?;
    let test = all.split_off(exp.n_train + exp.n_val);
    let val = all.split_off(exp.n_train);
    Ok(Splits { train: all, val, test })
}

/// `ex` with every placeholder replaced by the `high`/`low` token of its
/// document label.
pub fn hint_example(mut ex: Example, vocab: &Vocab) -> Example {
    let (hi, lo) = (vocab.id(HIGH), vocab.id(LOW));
    for (i, &p) in ex.prompt.placeholders.iter().enumerate() {
        let t = if ex.labels[i] >= 0.5 { hi } else { lo };
        ex.prompt.tokens[p] = t;
        ex.full.tokens[p] = t;
    }
    ex.prompt.placeholders.clear();
    ex.full.placeholders.clear();
    ex
}

/// Pretraining prompts: for each training query, two lists of random size
/// `1..=k` holding the relevant document and random distractors in random
/// order.
fn pretraining_examples(
    exp: &ExperimentConfig,
    train: &[QaInstance],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<Vec<Example>> {
    let (rag_text, r2_text) = exp.template_texts()?;
    let rag = PromptTemplate::parse(rag_text)?;
    let r2 = PromptTemplate::parse(r2_text)?;
    let mut rng = ChaCha8Rng::seed_from_u64(exp.pretrain_seed ^ 0xf0_0da7);
    let mut out = Vec::with_capacity(train.len() * 2);
    for (i, q) in train.iter().enumerate() {
        for rep in 0..2 {
            let k = rng.gen_range(1..=q.k());
            let mut others: Vec<QaDoc> = q.docs.iter().filter(|d| !d.label).cloned().collect();
            others.shuffle(&mut rng);
            let mut docs: Vec<QaDoc> = q.docs.iter().filter(|d| d.label).cloned().collect();
            docs.extend(others.into_iter().take(k.saturating_sub(docs.len())));
            docs.shuffle(&mut rng);
            let inst = QaInstance {
                query: q.query.clone(),
                docs,
                answers: q.answers.clone(),
            };
            let id = format!("pre{i}-{rep}");
            let ex = if rng.gen_bool(exp.hint_fraction) {
                hint_example(prepare(&inst, &id, vocab, &r2, PromptMode::R2ag, cfg)?, vocab)
            } else {
                prepare(&inst, &id, vocab, &rag, PromptMode::Baseline, cfg)?
            };
            out.push(ex);
        }
    }
    Ok(out)
}

/// Trains the shared LM from scratch. The returned model holds the trained
/// LM; its other parameters are untouched initial values.
pub fn pretrain_foundation(exp: &ExperimentConfig, train: &[QaInstance], vocab: &Vocab) -> Result<Model> {
    let cfg = TrainConfig {
        seed: exp.pretrain_seed,
        lr: exp.pretrain_lr,
        steps: exp.pretrain_steps,
        eval_every: 0,
        freeze_lm: false,
        ..exp.train.clone()
    };
    let examples = pretraining_examples(exp, train, vocab, &cfg)?;
    let mut model = Model::new(&cfg, vocab.len())?;
    train_loop(&mut model, &cfg, &examples, &[], vocab)?;
    model.set_lm_frozen(true);
    Ok(model)
}

/// LM tensors of `model` by name.
pub fn lm_tensors(model: &Model) -> Vec<(String, Tensor)> {
    model
        .params
        .iter()
        .filter(|(_, p)| p.name.starts_with("lm."))
        .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
        .collect()
}

/// Fresh model for `cfg` carrying the frozen foundation LM.
pub fn model_with_lm(cfg: &TrainConfig, vocab: &Vocab, lm: &[(String, Tensor)]) -> Result<Model> {
    let mut model = Model::new(cfg, vocab.len())?;
    model.params.load(lm.iter().cloned())?;
    model.set_lm_frozen(cfg.freeze_lm);
    Ok(model)
}

pub fn prepare_all(
    data: &[QaInstance],
    prefix: &str,
    vocab: &Vocab,
    template: &PromptTemplate,
    cfg: &TrainConfig,
) -> Result<Vec<Example>> {
    data.iter()
        .enumerate()
        .map(|(i, q)| Ok(prepare(q, &format!("{prefix}{i}"), vocab, template, cfg.prompt_mode(), cfg)?))
        .collect()
}

/// Per-query outcome with the inference time split.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub prediction: String,
    pub accuracy: f64,
    pub f1: f64,
    /// Feature extraction plus bridge and projector, in seconds.
    pub overhead_secs: f64,
    /// Prompt assembly and greedy decoding, in seconds.
    pub lm_secs: f64,
}

/// Answers one test query, timing the retrieval-information path apart
/// from the LM. Feature extraction is timed on the already ranked list.
pub fn answer_timed(model: &Model, cfg: &TrainConfig, inst: &QaInstance, ex: &Example, vocab: &Vocab) -> Result<QueryOutcome> {
    let list = inst.ranked_list("timed", &cfg.encoder())?;
    let t0 = Instant::now();
    let rows = if ex.prompt.placeholders.is_empty() {
        None
    } else {
        let features = extract_features(&list, cfg.similarity)?;
        debug_assert_eq!(features, ex.features);
        retrieval_rows(model, ex, cfg)?
    };
    let overhead_secs = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let prefix = assemble_tensor(model, &ex.prompt, rows.as_ref())?;
    let ids = model.lm.greedy_decode(&model.params, &prefix, cfg.max_new_tokens)?.ids;
    let lm_secs = t1.elapsed().as_secs_f64();
    let prediction = vocab.detokenize(&ids);
    Ok(QueryOutcome {
        accuracy: metrics::accuracy(&prediction, &ex.answers),
        f1: metrics::f1(&prediction, &ex.answers),
        prediction,
        overhead_secs,
        lm_secs,
    })
}

/// One report row.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub seed: u64,
    pub k: usize,
    pub accuracy: f64,
    pub f1: f64,
    /// Thresholded QDM accuracy on the test set, when the cell trains QDM.
    pub qdm_accuracy: Option<f64>,
    pub train_secs: f64,
    pub queries: usize,
    pub median_overhead_ms: f64,
    pub median_lm_ms: f64,
    /// Summed overhead time over summed total inference time.
    pub overhead_fraction: f64,
    pub predictions: Vec<String>,
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Evaluates a trained (or untrained baseline) model on `test`.
pub fn evaluate_cell(
    model: &Model,
    cfg: &TrainConfig,
    cell: Cell,
    test: &[QaInstance],
    test_ex: &[Example],
    vocab: &Vocab,
) -> Result<(Vec<QueryOutcome>, Option<f64>)> {
    let outcomes = test
        .par_iter()
        .zip(test_ex.par_iter())
        .map(|(inst, ex)| answer_timed(model, cfg, inst, ex, vocab))
        .collect::<Result<Vec<_>>>()?;
    let qdm = if cell.has_qdm() {
        Some(qdm_accuracy(model, test_ex, cfg)?)
    } else {
        None
    };
    Ok((outcomes, qdm))
}

pub fn summarize(cell: Cell, seed: u64, k: usize, train_secs: f64, outcomes: &[QueryOutcome], qdm: Option<f64>) -> CellResult {
    let n = outcomes.len().max(1) as f64;
    let mut over: Vec<f64> = outcomes.iter().map(|o| o.overhead_secs * 1e3).collect();
    let mut lm: Vec<f64> = outcomes.iter().map(|o| o.lm_secs * 1e3).collect();
    let total_over: f64 = over.iter().sum();
    let total: f64 = total_over + lm.iter().sum::<f64>();
    CellResult {
        cell,
        seed,
        k,
        accuracy: outcomes.iter().map(|o| o.accuracy).sum::<f64>() / n,
        f1: outcomes.iter().map(|o| o.f1).sum::<f64>() / n,
        qdm_accuracy: qdm,
        train_secs,
        queries: outcomes.len(),
        median_overhead_ms: median(&mut over),
        median_lm_ms: median(&mut lm),
        overhead_fraction: if total > 0.0 { total_over / total } else { 0.0 },
        predictions: outcomes.iter().map(|o| o.prediction.clone()).collect(),
    }
}

/// Prepared data and the frozen foundation LM for one `k`.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub vocab: Vocab,
    pub lm: Vec<(String, Tensor)>,
    pub pretrain_secs: f64,
}

/// Examples of one split for one template mode.
struct Prepared {
    splits: Splits,
    rag: PromptTemplate,
    r2: PromptTemplate,
}

impl Experiment {
    /// Generates the data at `config.k` and pretrains the foundation LM.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let vocab = build_vocab(&config, &[]);
        let splits = generate_splits(&config, config.k)?;
        let t0 = Instant::now();
        let foundation = pretrain_foundation(&config, &splits.train, &vocab).context("pretraining the foundation LM")?;
        Ok(Self {
            pretrain_secs: t0.elapsed().as_secs_f64(),
            lm: lm_tensors(&foundation),
            config,
            vocab,
        })
    }

    /// Uses an existing foundation LM instead of pretraining one.
    pub fn with_lm(config: ExperimentConfig, vocab: Vocab, lm: Vec<(String, Tensor)>) -> Self {
        Self {
            config,
            vocab,
            lm,
            pretrain_secs: 0.0,
        }
    }

    fn prepared(&self, k: usize) -> Result<Prepared> {
        let (rag, r2) = self.config.template_texts()?;
        Ok(Prepared {
            splits: generate_splits(&self.config, k)?,
            rag: PromptTemplate::parse(rag)?,
            r2: PromptTemplate::parse(r2)?,
        })
    }

    /// Trains (unless baseline) and evaluates one cell. Returns the model so
    /// callers can save or inspect it.
    pub fn run_cell(&self, cell: Cell, seed: u64, k: usize) -> Result<(CellResult, Model)> {
        let p = self.prepared(k)?;
        self.run_prepared(&p, cell, seed, k)
    }

    fn run_prepared(&self, p: &Prepared, cell: Cell, seed: u64, k: usize) -> Result<(CellResult, Model)> {
        let cfg = TrainConfig {
            seed,
            ..cell.config(&self.config.train)
        };
        let template = if cfg.mode.has_placeholders() { &p.r2 } else { &p.rag };
        let mut model = model_with_lm(&cfg, &self.vocab, &self.lm)?;
        let t0 = Instant::now();
        if cell.trains() {
            let train = prepare_all(&p.splits.train, "train", &self.vocab, template, &cfg)?;
            let val = prepare_all(&p.splits.val, "val", &self.vocab, template, &cfg)?;
            train_loop(&mut model, &cfg, &train, &val, &self.vocab)
                .with_context(|| format!("training cell {} seed {seed}", cell.name()))?;
        }
        let train_secs = t0.elapsed().as_secs_f64();
        let test_ex = prepare_all(&p.splits.test, "test", &self.vocab, template, &cfg)?;
        let (outcomes, qdm) = evaluate_cell(&model, &cfg, cell, &p.splits.test, &test_ex, &self.vocab)?;
        Ok((summarize(cell, seed, k, train_secs, &outcomes, qdm), model))
    }

    /// Every `cells × seeds` combination at `k`. The baseline has nothing to
    /// train, so it is evaluated once and its row repeated per seed.
    pub fn run_matrix(&self, cells: &[Cell], k: usize, mut progress: impl FnMut(&CellResult)) -> Result<Vec<CellResult>> {
        let p = self.prepared(k)?;
        let mut rows = Vec::new();
        for &cell in cells {
            let mut cached: Option<CellResult> = None;
            for &seed in &self.config.seeds {
                let row = match (&cached, cell) {
                    (Some(r), Cell::Baseline) => CellResult { seed, ..r.clone() },
                    _ => self.run_prepared(&p, cell, seed, k)?.0,
                };
                if cell == Cell::Baseline {
                    cached = Some(row.clone());
                }
                progress(&row);
                rows.push(row);
            }
        }
        Ok(rows)
    }
}

/// Mean accuracy and F1 of `cell` at `k` over seeds.
pub fn mean_scores(rows: &[CellResult], cell: Cell, k: usize) -> Option<(f64, f64)> {
    let sel: Vec<&CellResult> = rows.iter().filter(|r| r.cell == cell && r.k == k).collect();
    if sel.is_empty() {
        return None;
    }
    let n = sel.len() as f64;
    Some((
        sel.iter().map(|r| r.accuracy).sum::<f64>() / n,
        sel.iter().map(|r| r.f1).sum::<f64>() / n,
    ))
}

/// One line of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationLine {
    pub cell: Cell,
    pub accuracy: f64,
    pub f1: f64,
    /// Accuracy minus the full configuration's, in points.
    pub delta_points: f64,
    pub flag: &'static str,
}

/// Full configuration first, then each ablation, flagged `ok` when it does
/// not beat the full model, `tolerated` when it does by at most 2 points.
pub fn ablation_table(rows: &[CellResult], k: usize) -> Result<Vec<AblationLine>> {
    let (full_acc, full_f1) = mean_scores(rows, Cell::R2ag, k).context("no r2ag rows")?;
    let mut out = vec![AblationLine {
        cell: Cell::R2ag,
        accuracy: full_acc,
        f1: full_f1,
        delta_points: 0.0,
        flag: "full",
    }];
    for cell in Cell::ABLATIONS {
        let Some((acc, f1)) = mean_scores(rows, cell, k) else {
            continue;
        };
        let delta_points = (acc - full_acc) * 100.0;
        let flag = if delta_points <= 0.0 {
            "ok"
        } else if delta_points <= 2.0 {
            "tolerated"
        } else {
            "inverted"
        };
        out.push(AblationLine {
            cell,
            accuracy: acc,
            f1,
            delta_points,
            flag,
        });
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub const REPORT_HEADER: [&str; 12] = [
    "mode",
    "seed",
    "k",
    "acc",
    "f1",
    "qdm_acc",
    "train_seconds",
    "queries",
    "median_feature_bridge_ms",
    "median_lm_decode_ms",
    "overhead_fraction",
    "wall_clock_seconds",
];

pub fn write_report(path: &std::path::Path, rows: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        let eval_secs = (r.median_overhead_ms + r.median_lm_ms) * r.queries as f64 / 1e3;
        w.write_record([
            r.cell.name().to_string(),
            r.seed.to_string(),
            r.k.to_string(),
            format!("{:.4}", r.accuracy),
            format!("{:.4}", r.f1),
            fmt_opt(r.qdm_accuracy),
            format!("{:.2}", r.train_secs),
            r.queries.to_string(),
            format!("{:.4}", r.median_overhead_ms),
            format!("{:.4}", r.median_lm_ms),
            format!("{:.4}", r.overhead_fraction),
            format!("{:.2}", r.train_secs + eval_secs),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation_table(path: &std::path::Path, lines: &[AblationLine]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "acc", "f1", "delta_acc_points", "flag"])?;
    for l in lines {
        w.write_record([
            l.cell.name().to_string(),
            format!("{:.4}", l.accuracy),
            format!("{:.4}", l.f1),
            format!("{:+.2}", l.delta_points),
            l.flag.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
