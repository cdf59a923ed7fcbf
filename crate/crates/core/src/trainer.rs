//! Joint training of the bridge, projection and (optionally) the language
//! model: `L = w_qdm · L_QDM + w_lm · L_LM`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{HashEncoder, Similarity};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureList, FeatureMask};
use crate::graph::Var;
use crate::lm::{LmConfig, Positions, ToyLm};
use crate::metrics;
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::params::{ParamId, ParamSet, Session};
use crate::prompting::{assemble, render_template, LearnableTokens, PromptMode, PromptTemplate, Projector, RenderedPrompt};
use crate::r2former::{qdm_loss, R2Former, R2FormerConfig};
use crate::synth::QaInstance;
use crate::tensor::Tensor;
use crate::vocab::{TokenSeq, Vocab};

/// Consecutive non-finite steps tolerated before training stops.
pub const MAX_CONSECUTIVE_FAILURES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub dropout: f64,
    pub lm_dropout: f64,
    /// Queries per optimizer update (gradients are averaged).
    pub batch_size: usize,
    pub steps: usize,
    /// Validation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub grad_clip: f64,
    pub freeze_lm: bool,
    pub w_qdm: f64,
    pub w_lm: f64,
    pub use_r: bool,
    pub use_gamma: bool,
    pub use_zeta: bool,
    pub use_qdm_loss: bool,
    pub learnable_tokens: bool,
    /// `r2ag` or `baseline`; `learnable_tokens` takes precedence.
    pub mode: PromptMode,
    pub h1: usize,
    pub layers: usize,
    pub heads: usize,
    pub k_max: usize,
    pub h2: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub max_len: usize,
    pub lm_positions: Positions,
    pub projector_hidden: bool,
    pub similarity: Similarity,
    pub encoder_dim: usize,
    pub encoder_seed: u64,
    pub max_new_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 2e-4,
            dropout: 0.1,
            lm_dropout: 0.0,
            batch_size: 8,
            steps: 1000,
            eval_every: 250,
            grad_clip: 1.0,
            freeze_lm: true,
            w_qdm: 1.0,
            w_lm: 1.0,
            use_r: true,
            use_gamma: true,
            use_zeta: true,
            use_qdm_loss: true,
            learnable_tokens: false,
            mode: PromptMode::R2ag,
            h1: 256,
            layers: 2,
            heads: 4,
            k_max: 30,
            h2: 64,
            lm_layers: 2,
            lm_heads: 2,
            max_len: 256,
            lm_positions: Positions::Learned,
            projector_hidden: false,
            similarity: Similarity::Cosine,
            encoder_dim: 64,
            encoder_seed: 0,
            max_new_tokens: 4,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_num<T: core::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    /// Every key accepted by [`TrainConfig::set`], in file order.
    pub const KEYS: [&'static str; 32] = [
        "seed",
        "lr",
        "dropout",
        "lm_dropout",
        "batch_size",
        "steps",
        "eval_every",
        "grad_clip",
        "freeze_lm",
        "w_qdm",
        "w_lm",
        "use_r",
        "use_gamma",
        "use_zeta",
        "use_qdm_loss",
        "learnable_tokens",
        "mode",
        "h1",
        "layers",
        "heads",
        "k_max",
        "h2",
        "lm_layers",
        "lm_heads",
        "max_len",
        "lm_positions",
        "projector_hidden",
        "similarity",
        "encoder_dim",
        "encoder_seed",
        "max_new_tokens",
        "version",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "lm_dropout" => self.lm_dropout = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "grad_clip" => self.grad_clip = parse_num(key, v)?,
            "freeze_lm" => self.freeze_lm = parse_bool(key, v)?,
            "w_qdm" => self.w_qdm = parse_num(key, v)?,
            "w_lm" => self.w_lm = parse_num(key, v)?,
            "use_r" => self.use_r = parse_bool(key, v)?,
            "use_gamma" => self.use_gamma = parse_bool(key, v)?,
            "use_zeta" => self.use_zeta = parse_bool(key, v)?,
            "use_qdm_loss" => self.use_qdm_loss = parse_bool(key, v)?,
            "learnable_tokens" => self.learnable_tokens = parse_bool(key, v)?,
            "mode" => {
                self.mode = match v {
                    "r2ag" => PromptMode::R2ag,
                    "baseline" => PromptMode::Baseline,
                    "learnable" => PromptMode::Learnable,
                    _ => return Err(Error::Config(format!("mode: expected r2ag, baseline or learnable, got {v:?}"))),
                }
            }
            "h1" => self.h1 = parse_num(key, v)?,
            "layers" => self.layers = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "k_max" => self.k_max = parse_num(key, v)?,
            "h2" => self.h2 = parse_num(key, v)?,
            "lm_layers" => self.lm_layers = parse_num(key, v)?,
            "lm_heads" => self.lm_heads = parse_num(key, v)?,
            "max_len" => self.max_len = parse_num(key, v)?,
            "lm_positions" => {
                self.lm_positions = match v {
                    "learned" => Positions::Learned,
                    "distance" => Positions::Distance,
                    _ => return Err(Error::Config(format!("lm_positions: expected learned or distance, got {v:?}"))),
                }
            }
            "projector_hidden" => self.projector_hidden = parse_bool(key, v)?,
            "similarity" => {
                self.similarity = match v {
                    "cosine" => Similarity::Cosine,
                    "dot" => Similarity::Dot,
                    _ => return Err(Error::Config(format!("similarity: expected cosine or dot, got {v:?}"))),
                }
            }
            "encoder_dim" => self.encoder_dim = parse_num(key, v)?,
            "encoder_seed" => self.encoder_seed = parse_num(key, v)?,
            "max_new_tokens" => self.max_new_tokens = parse_num(key, v)?,
            "version" => {
                let version: u32 = parse_num(key, v)?;
                if version != 1 {
                    return Err(Error::Config(format!("unsupported config version {version}")));
                }
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let b = |v: bool| String::from(if v { "true" } else { "false" });
        Some(match key {
            "seed" => self.seed.to_string(),
            "lr" => format!("{:?}", self.lr),
            "dropout" => format!("{:?}", self.dropout),
            "lm_dropout" => format!("{:?}", self.lm_dropout),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "grad_clip" => format!("{:?}", self.grad_clip),
            "freeze_lm" => b(self.freeze_lm),
            "w_qdm" => format!("{:?}", self.w_qdm),
            "w_lm" => format!("{:?}", self.w_lm),
            "use_r" => b(self.use_r),
            "use_gamma" => b(self.use_gamma),
            "use_zeta" => b(self.use_zeta),
            "use_qdm_loss" => b(self.use_qdm_loss),
            "learnable_tokens" => b(self.learnable_tokens),
            "mode" => String::from(match self.mode {
                PromptMode::R2ag => "r2ag",
                PromptMode::Baseline => "baseline",
                PromptMode::Learnable => "learnable",
            }),
            "h1" => self.h1.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "k_max" => self.k_max.to_string(),
            "h2" => self.h2.to_string(),
            "lm_layers" => self.lm_layers.to_string(),
            "lm_heads" => self.lm_heads.to_string(),
            "max_len" => self.max_len.to_string(),
            "lm_positions" => String::from(match self.lm_positions {
                Positions::Learned => "learned",
                Positions::Distance => "distance",
            }),
            "projector_hidden" => b(self.projector_hidden),
            "similarity" => String::from(match self.similarity {
                Similarity::Cosine => "cosine",
                Similarity::Dot => "dot",
            }),
            "encoder_dim" => self.encoder_dim.to_string(),
            "encoder_seed" => self.encoder_seed.to_string(),
            "max_new_tokens" => self.max_new_tokens.to_string(),
            "version" => String::from("1"),
            _ => return None,
        })
    }

    /// All keys as `key = value` lines; [`TrainConfig::parse`] inverts it.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&self.get(k).expect("known key"));
            out.push('\n');
        }
        out
    }

    pub fn prompt_mode(&self) -> PromptMode {
        if self.learnable_tokens {
            PromptMode::Learnable
        } else {
            self.mode
        }
    }

    pub fn feature_mask(&self) -> FeatureMask {
        FeatureMask {
            relevance: self.use_r,
            precedent: self.use_gamma,
            neighbor: self.use_zeta,
        }
    }

    pub fn encoder(&self) -> HashEncoder {
        HashEncoder::new(self.encoder_dim, self.encoder_seed)
    }

    pub fn bridge_config(&self) -> R2FormerConfig {
        R2FormerConfig {
            hidden: self.h1,
            layers: self.layers,
            heads: self.heads,
            k_max: self.k_max,
            dropout: self.dropout,
        }
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            hidden: self.h2,
            layers: self.lm_layers,
            heads: self.lm_heads,
            max_len: self.max_len,
            dropout: self.lm_dropout,
            positions: self.lm_positions,
        }
    }
}

/// All trainable pieces. Parameter names start with `lm.`, `bridge.`,
/// `proj.` or `learnable`.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ParamSet,
    pub lm: ToyLm,
    pub bridge: R2Former,
    pub projector: Projector,
    pub learnable: LearnableTokens,
}

impl Model {
    pub fn new(cfg: &TrainConfig, vocab_size: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let lm = ToyLm::new(&mut params, "lm", cfg.lm_config(vocab_size), &mut rng)?;
        let bridge = R2Former::new(&mut params, "bridge", cfg.bridge_config(), &mut rng)?;
        let projector = Projector::new(&mut params, "proj", cfg.h1, cfg.h2, cfg.projector_hidden, &mut rng);
        let learnable = LearnableTokens::new(&mut params, "learnable", cfg.k_max, cfg.h2, &mut rng);
        let mut m = Self {
            params,
            lm,
            bridge,
            projector,
            learnable,
        };
        m.set_lm_frozen(cfg.freeze_lm);
        Ok(m)
    }

    pub fn set_lm_frozen(&mut self, frozen: bool) {
        self.params.set_trainable("lm.", !frozen);
    }

    /// Names and current values of the LM parameters.
    pub fn lm_snapshot(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with("lm."))
            .map(|(_, p)| p.tensor.clone())
            .collect()
    }
}

/// One preprocessed query: features, labels and the rendered prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: FeatureList,
    pub labels: Vec<f64>,
    /// Prompt without the answer, used for decoding.
    pub prompt: RenderedPrompt,
    /// Prompt followed by the answer tokens, used for training.
    pub full: RenderedPrompt,
    pub targets: TokenSeq,
    pub answers: Vec<String>,
}

impl Example {
    pub fn k(&self) -> usize {
        self.labels.len()
    }
}

/// Features, rendered prompt and LM targets for one instance.
pub fn prepare(
    inst: &QaInstance,
    query_id: &str,
    vocab: &Vocab,
    template: &PromptTemplate,
    mode: PromptMode,
    cfg: &TrainConfig,
) -> Result<Example> {
    let list = inst.ranked_list(query_id, &cfg.encoder())?;
    let features = extract_features(&list, cfg.similarity)?;
    let prompt = render_template(template, vocab, &inst.query, &inst.doc_texts(), mode)?;
    let answer = inst
        .answers
        .first()
        .ok_or_else(|| Error::Data(format!("{query_id} has no gold answer")))?;
    let (full, targets) = prompt.with_answer(&vocab.tokenize(answer).ids);
    Ok(Example {
        features,
        labels: list.labels(),
        prompt,
        full,
        targets,
        answers: inst.answers.clone(),
    })
}

/// Graph handles of one example's losses.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub qdm: Option<Var>,
    pub lm: Var,
}

/// Rows injected at the placeholders, or `None` when the prompt has none.
/// Also returns the QDM loss when it is part of the objective.
fn injected_rows(
    model: &Model,
    s: &mut Session<'_>,
    ex: &Example,
    cfg: &TrainConfig,
    with_qdm: bool,
) -> Result<(Option<Var>, Option<Var>)> {
    if ex.prompt.placeholders.is_empty() {
        return Ok((None, None));
    }
    if cfg.learnable_tokens {
        return Ok((Some(model.learnable.rows(s, ex.k())?), None));
    }
    let features = ex.features.masked(cfg.feature_mask());
    let h = model.bridge.forward(s, &features)?;
    let qdm = if with_qdm && cfg.use_qdm_loss {
        let p = model.bridge.qdm_predict(s, h)?;
        Some(qdm_loss(&mut s.graph, p, &ex.labels)?)
    } else {
        None
    };
    Ok((Some(model.projector.forward(s, h)?), qdm))
}

/// Records the full objective for one example on `s`.
pub fn example_loss(model: &Model, s: &mut Session<'_>, ex: &Example, cfg: &TrainConfig) -> Result<LossVars> {
    let (rows, qdm) = injected_rows(model, s, ex, cfg, true)?;
    let asm = assemble(s, &model.lm, &ex.full, rows)?;
    let lm = model.lm.masked_loss(s, asm.embeddings, &ex.targets)?;
    let weighted_lm = s.graph.scale(lm, cfg.w_lm);
    let total = match qdm {
        Some(q) => {
            let wq = s.graph.scale(q, cfg.w_qdm);
            s.graph.add(wq, weighted_lm)?
        }
        None => weighted_lm,
    };
    Ok(LossVars { total, qdm, lm })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub loss: f64,
    pub loss_qdm: Option<f64>,
    pub loss_lm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: Adam,
    pub step: u64,
    pub consecutive_failures: usize,
    pub aborted_steps: u64,
}

impl TrainState {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        Self {
            adam: Adam::new(
                &model.params,
                AdamConfig {
                    lr: cfg.lr,
                    ..AdamConfig::default()
                },
            ),
            step: 0,
            consecutive_failures: 0,
            aborted_steps: 0,
        }
    }
}

fn step_rng(cfg: &TrainConfig, step: u64, i: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_0000);
    r.set_stream(step.wrapping_mul(1 << 20).wrapping_add(i as u64));
    r
}

/// Forward, backward and one Adam update over `batch` (gradients averaged).
/// Returns `None` when the step was aborted because a loss or gradient was
/// not finite; [`Error::Diverged`] after too many aborts in a row.
pub fn train_step(
    model: &mut Model,
    state: &mut TrainState,
    batch: &[&Example],
    cfg: &TrainConfig,
) -> Result<Option<StepLosses>> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    state.step += 1;
    let scale = 1.0 / batch.len() as f64;
    let mut acc: BTreeMap<usize, (ParamId, Vec<f64>)> = BTreeMap::new();
    let mut sums = StepLosses {
        loss: 0.0,
        loss_qdm: None,
        loss_lm: 0.0,
    };
    let mut finite = true;
    for (i, ex) in batch.iter().enumerate() {
        let mut s = Session::new(&model.params, true, step_rng(cfg, state.step, i));
        let vars = example_loss(model, &mut s, ex, cfg)?;
        let total = s.graph.value(vars.total).data()[0];
        if !total.is_finite() {
            finite = false;
            break;
        }
        sums.loss += total * scale;
        sums.loss_lm += s.graph.value(vars.lm).data()[0] * scale;
        if let Some(q) = vars.qdm {
            *sums.loss_qdm.get_or_insert(0.0) += s.graph.value(q).data()[0] * scale;
        }
        s.graph.backward(vars.total)?;
        for (id, g) in s.param_grads() {
            let slot = acc.entry(id.index()).or_insert_with(|| (id, vec![0.0; g.len()]));
            for (a, v) in slot.1.iter_mut().zip(g) {
                *a += v * scale;
            }
        }
    }
    let mut grads: Vec<(ParamId, Vec<f64>)> = acc.into_values().collect();
    if finite && cfg.grad_clip > 0.0 {
        finite = clip_grad_norm(&mut grads, cfg.grad_clip).is_finite();
    }
    if finite && !state.adam.step(&mut model.params, &grads) {
        finite = false;
    }
    if !finite {
        state.consecutive_failures += 1;
        state.aborted_steps += 1;
        if state.consecutive_failures >= MAX_CONSECUTIVE_FAILURES {
            return Err(Error::Diverged {
                consecutive: state.consecutive_failures,
            });
        }
        return Ok(None);
    }
    state.consecutive_failures = 0;
    Ok(Some(sums))
}

/// Evaluation-mode rows to inject for `ex`, if its prompt has placeholders.
pub fn retrieval_rows(model: &Model, ex: &Example, cfg: &TrainConfig) -> Result<Option<Tensor>> {
    let mut s = Session::new(&model.params, false, ChaCha8Rng::seed_from_u64(0));
    let (rows, _) = injected_rows(model, &mut s, ex, cfg, false)?;
    Ok(rows.map(|v| s.graph.value(v).clone()))
}

/// The assembled input matrix of a prompt with `rows` injected.
pub fn assemble_tensor(model: &Model, prompt: &RenderedPrompt, rows: Option<&Tensor>) -> Result<Tensor> {
    let mut s = Session::new(&model.params, false, ChaCha8Rng::seed_from_u64(0));
    let injected = rows.map(|t| s.graph.constant(t.clone()));
    let asm = assemble(&mut s, &model.lm, prompt, injected)?;
    Ok(s.graph.value(asm.embeddings).clone())
}

/// Greedy answer tokens for `ex`.
pub fn generate_answer(model: &Model, ex: &Example, cfg: &TrainConfig) -> Result<Vec<usize>> {
    let rows = retrieval_rows(model, ex, cfg)?;
    let prefix = assemble_tensor(model, &ex.prompt, rows.as_ref())?;
    Ok(model.lm.greedy_decode(&model.params, &prefix, cfg.max_new_tokens)?.ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub f1: f64,
    pub predictions: Vec<String>,
}

pub fn evaluate(model: &Model, examples: &[Example], vocab: &Vocab, cfg: &TrainConfig) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut acc = 0.0;
    let mut f1 = 0.0;
    let mut predictions = Vec::with_capacity(examples.len());
    for ex in examples {
        let text = vocab.detokenize(&generate_answer(model, ex, cfg)?);
        acc += metrics::accuracy(&text, &ex.answers);
        f1 += metrics::f1(&text, &ex.answers);
        predictions.push(text);
    }
    let n = examples.len() as f64;
    Ok(EvalResult {
        accuracy: acc / n,
        f1: f1 / n,
        predictions,
    })
}

/// Share of documents whose thresholded QDM prediction matches the label.
pub fn qdm_accuracy(model: &Model, examples: &[Example], cfg: &TrainConfig) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let p = model.bridge.predict(&model.params, &ex.features.masked(cfg.feature_mask()))?;
        for (pi, li) in p.iter().zip(&ex.labels) {
            hits += usize::from((*pi >= 0.5) == (*li >= 0.5));
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub loss_qdm: Option<f64>,
    pub loss_lm: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<MetricRow>,
    pub best_val_acc: Option<f64>,
    pub best_step: u64,
    pub aborted_steps: u64,
}

/// Runs `cfg.steps` updates over shuffled epochs of `train`, evaluating on
/// `val` every `cfg.eval_every` steps and at the end. When `val` is
/// non-empty the model ends holding the parameters of the best evaluation.
pub fn train_loop(
    model: &mut Model,
    cfg: &TrainConfig,
    train: &[Example],
    val: &[Example],
    vocab: &Vocab,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be ≥ 1".into()));
    }
    let mut state = TrainState::new(model, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5_4ff1e);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut best: Option<(f64, u64, Vec<Tensor>)> = None;
    for step in 1..=cfg.steps as u64 {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&train[order.pop().expect("refilled")]);
        }
        let losses = train_step(model, &mut state, &batch, cfg)?;
        let due = step == cfg.steps as u64 || (cfg.eval_every > 0 && step % cfg.eval_every as u64 == 0);
        let val_acc = if due && !val.is_empty() {
            let acc = evaluate(model, val, vocab, cfg)?.accuracy;
            if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
                let snapshot = model.params.iter().map(|(_, p)| p.tensor.clone()).collect();
                best = Some((acc, step, snapshot));
            }
            Some(acc)
        } else {
            None
        };
        if let Some(l) = losses {
            log.push(MetricRow {
                step,
                loss: l.loss,
                loss_qdm: l.loss_qdm,
                loss_lm: l.loss_lm,
                val_acc,
            });
        }
    }
    let (best_val_acc, best_step) = match best {
        Some((acc, step, snapshot)) => {
            let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
            for (id, t) in ids.into_iter().zip(snapshot) {
                *model.params.tensor_mut(id) = t;
            }
            (Some(acc), step)
        }
        None => (None, cfg.steps as u64),
    };
    Ok(TrainReport {
        log,
        best_val_acc,
        best_step,
        aborted_steps: state.aborted_steps,
    })
}
