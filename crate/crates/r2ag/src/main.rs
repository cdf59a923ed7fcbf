use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use r2ag_core::features::extract_features;
use r2ag_core::prompting::PromptTemplate;
use r2ag_core::synth::{self, SynthConfig};
use r2ag_core::trainer::{prepare, train_loop, Example, Model, TrainConfig};
use r2ag_core::vocab::{Vocab, UNK};

use r2ag::attention::export_attention;
use r2ag::checkpoint;
use r2ag::experiment::{self, Cell, Experiment, ExperimentConfig};
use r2ag::formats::{self, FeatureRecord};

#[derive(Parser)]
#[command(name = "r2ag", about = "Retrieval-information bridge for a toy decoder LM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` training config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Matrix {
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_val: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 11)]
    data_seed: u64,
    /// Comma-separated bridge seeds.
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 2000)]
    pretrain_steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pretrain_lr: f64,
    #[arg(long, default_value_t = 0.75)]
    hint_fraction: f64,
    /// `compact` or `paper`.
    #[arg(long, default_value = "compact")]
    templates: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (and optionally its embedding dump).
    GenData {
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Also write the ranked embedding dump here.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Embedding dump in, per-document `[r, gamma, zeta]` features out.
    ExtractFeatures {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the foundation LM (`--cell foundation`) or train one cell on
    /// top of a foundation checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value = "r2ag")]
        cell: String,
        /// Metric log CSV; defaults to the checkpoint path with `.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        matrix: Matrix,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "compact")]
        templates: String,
        #[command(flatten)]
        common: Common,
    },
    /// Baseline, full R²AG and the four ablations over every seed.
    Ablate {
        #[command(flatten)]
        matrix: Matrix,
        #[command(flatten)]
        common: Common,
    },
    /// Baseline and learnable tokens at several list sizes.
    SweepK {
        #[arg(long, default_value = "2,6,10", value_delimiter = ',')]
        ks: Vec<usize>,
        #[command(flatten)]
        matrix: Matrix,
        #[command(flatten)]
        common: Common,
    },
    /// Last-token attention of one instance as CSV.
    ExportAttention {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "compact")]
        templates: String,
        #[command(flatten)]
        common: Common,
    },
}

fn train_config(common: &Common, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(p) = &common.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.apply_text(&text).with_context(|| format!("parsing {}", p.display()))?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn experiment_config(common: &Common, m: &Matrix) -> Result<ExperimentConfig> {
    let d = ExperimentConfig::default();
    let train = train_config(common, d.train.clone())?;
    Ok(ExperimentConfig {
        n_train: m.n_train,
        n_val: m.n_val,
        n_test: m.n_test,
        k: m.k,
        data_seed: m.data_seed,
        seeds: match common.seed {
            Some(s) => vec![s],
            None => m.seeds.clone(),
        },
        pretrain_steps: m.pretrain_steps,
        pretrain_lr: m.pretrain_lr,
        hint_fraction: m.hint_fraction,
        pretrain_seed: d.pretrain_seed,
        templates: m.templates.clone(),
        train,
    })
}

fn out_path(common: &Common) -> Result<&Path> {
    common.out.as_deref().context("--out is required")
}

fn vocab_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("vocab")
}

fn save_model(path: &Path, cfg: &TrainConfig, model: &Model, vocab: &Vocab) -> Result<()> {
    checkpoint::save(path, cfg, model)?;
    formats::save_vocab(&vocab_path(path), vocab)
}

fn load_model(path: &Path) -> Result<(TrainConfig, Model, Vocab)> {
    let (cfg, model) = checkpoint::load(path)?;
    let vocab = formats::load_vocab(&vocab_path(path))?;
    if vocab.len() != model.lm.config.vocab_size {
        bail!("{} has {} tokens, checkpoint expects {}", vocab_path(path).display(), vocab.len(), model.lm.config.vocab_size);
    }
    Ok((cfg, model, vocab))
}

/// Loads the `--checkpoint` foundation, or pretrains one and saves it as
/// `out_dir/foundation.ckpt`.
fn foundation(common: &Common, exp: ExperimentConfig, out_dir: &Path) -> Result<Experiment> {
    if let Some(p) = &common.checkpoint {
        let (_, model, vocab) = load_model(p)?;
        return Ok(Experiment::with_lm(exp, vocab, experiment::lm_tensors(&model)));
    }
    eprintln!("pretraining the foundation LM ({} steps)", exp.pretrain_steps);
    let run = Experiment::new(exp)?;
    let cfg = run.config.train.clone();
    let model = experiment::model_with_lm(&cfg, &run.vocab, &run.lm)?;
    let path = out_dir.join("foundation.ckpt");
    save_model(&path, &cfg, &model, &run.vocab)?;
    eprintln!("foundation ready in {:.1}s -> {}", run.pretrain_secs, path.display());
    Ok(run)
}

/// Entity names come from the generation seed, so data generated with another
/// seed than the checkpoint's training data is mostly out of vocabulary.
fn warn_unknown(examples: &[Example]) {
    let (unk, total) = examples.iter().fold((0, 0), |(u, t), ex| {
        (u + ex.prompt.tokens.iter().filter(|&&id| id == UNK).count(), t + ex.prompt.len())
    });
    if unk > 0 {
        eprintln!(
            "warning: {unk} of {total} prompt tokens are <UNK>; was the data generated with the checkpoint's seed?"
        );
    }
}

/// Template matching the prompt mode of `cfg`.
fn template_for(cfg: &TrainConfig, set: &str) -> Result<PromptTemplate> {
    let exp = ExperimentConfig {
        templates: set.to_string(),
        ..ExperimentConfig::default()
    };
    let (rag, r2) = exp.template_texts()?;
    Ok(PromptTemplate::parse(if cfg.mode.has_placeholders() || cfg.learnable_tokens { r2 } else { rag })?)
}

fn cell_of(cfg: &TrainConfig) -> Cell {
    if cfg.learnable_tokens {
        Cell::Learnable
    } else if !cfg.mode.has_placeholders() {
        Cell::Baseline
    } else if !cfg.use_r {
        Cell::WithoutR
    } else if !cfg.use_gamma {
        Cell::WithoutGamma
    } else if !cfg.use_zeta {
        Cell::WithoutZeta
    } else if !cfg.use_qdm_loss {
        Cell::WithoutQdm
    } else {
        Cell::R2ag
    }
}

fn print_rows(rows: &[experiment::CellResult]) {
    for r in rows {
        println!(
            "{:<10} seed {:<3} k {:<3} acc {:.4} f1 {:.4} overhead {:.2}% ({:.3} ms bridge / {:.3} ms LM)",
            r.cell.name(),
            r.seed,
            r.k,
            r.accuracy,
            r.f1,
            r.overhead_fraction * 100.0,
            r.median_overhead_ms,
            r.median_lm_ms
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { n, k, dump, common } => {
            let mut sc = SynthConfig::new(n, k, common.seed.unwrap_or(0));
            let cfg = train_config(&common, TrainConfig::default())?;
            sc.encoder = cfg.encoder();
            let data = synth::generate(&sc)?;
            formats::save_dataset(out_path(&common)?, &data)?;
            if let Some(d) = dump {
                let lists = data
                    .iter()
                    .enumerate()
                    .map(|(i, q)| q.ranked_list(&format!("q{i}"), &sc.encoder))
                    .collect::<r2ag_core::Result<Vec<_>>>()?;
                formats::save_dump(&d, &lists)?;
            }
            println!("{} instances, top-1 retrieval rate {:.3}", data.len(), synth::top1_rate(&data));
        }
        Command::ExtractFeatures { input, common } => {
            let cfg = train_config(&common, TrainConfig::default())?;
            let lists = formats::load_dump(&input, cfg.similarity)?;
            let recs = lists
                .iter()
                .map(|l| Ok(FeatureRecord::new(&l.query_id, &extract_features(l, cfg.similarity)?)))
                .collect::<Result<Vec<_>>>()?;
            formats::write_jsonl(out_path(&common)?, &recs)?;
            println!("{} feature lists", recs.len());
        }
        Command::Train { data, val, cell, log, matrix, common } => {
            let out = out_path(&common)?;
            let train_data = formats::load_dataset(&data)?;
            let val_data = match &val {
                Some(p) => formats::load_dataset(p)?,
                None => Vec::new(),
            };
            if cell == "foundation" {
                let exp = experiment_config(&common, &matrix)?;
                let vocab = experiment::build_vocab(&exp, &[train_data.as_slice(), val_data.as_slice()].concat());
                let t0 = Instant::now();
                let model = experiment::pretrain_foundation(&exp, &train_data, &vocab)?;
                let cfg = TrainConfig { freeze_lm: true, ..exp.train.clone() };
                save_model(out, &cfg, &model, &vocab)?;
                println!("foundation LM trained in {:.1}s -> {}", t0.elapsed().as_secs_f64(), out.display());
                return Ok(());
            }
            let cell = Cell::parse(&cell)?;
            let fpath = common
                .checkpoint
                .as_deref()
                .context("--checkpoint (a foundation checkpoint) is required to train a cell")?;
            let (_, fmodel, vocab) = load_model(fpath)?;
            let base = train_config(&common, ExperimentConfig::default().train)?;
            let cfg = cell.config(&base);
            let template = template_for(&cfg, &matrix.templates)?;
            let prep = |d: &[r2ag_core::synth::QaInstance], tag: &str| {
                experiment::prepare_all(d, tag, &vocab, &template, &cfg)
            };
            let train_ex = prep(&train_data, "train")?;
            let val_ex = prep(&val_data, "val")?;
            let mut model = experiment::model_with_lm(&cfg, &vocab, &experiment::lm_tensors(&fmodel))?;
            if !cell.trains() {
                save_model(out, &cfg, &model, &vocab)?;
                println!("{} has nothing to train; saved the frozen LM -> {}", cell.name(), out.display());
                return Ok(());
            }
            let report = train_loop(&mut model, &cfg, &train_ex, &val_ex, &vocab)?;
            save_model(out, &cfg, &model, &vocab)?;
            let log = log.unwrap_or_else(|| out.with_extension("csv"));
            formats::write_metric_log(&log, &report.log)?;
            println!(
                "{} trained: best val acc {:?} at step {}, {} aborted steps -> {}",
                cell.name(),
                report.best_val_acc,
                report.best_step,
                report.aborted_steps,
                out.display()
            );
        }
        Command::Eval { data, templates, common } => {
            let path = common.checkpoint.as_deref().context("--checkpoint is required")?;
            let (cfg, model, vocab) = load_model(path)?;
            let test = formats::load_dataset(&data)?;
            let template = template_for(&cfg, &templates)?;
            let examples = test
                .iter()
                .enumerate()
                .map(|(i, q)| Ok(prepare(q, &format!("test{i}"), &vocab, &template, cfg.prompt_mode(), &cfg)?))
                .collect::<Result<Vec<_>>>()?;
            warn_unknown(&examples);
            let cell = cell_of(&cfg);
            let (outcomes, qdm) = experiment::evaluate_cell(&model, &cfg, cell, &test, &examples, &vocab)?;
            let k = test.first().map_or(0, |q| q.k());
            let row = experiment::summarize(cell, cfg.seed, k, 0.0, &outcomes, qdm);
            print_rows(std::slice::from_ref(&row));
            if let Some(out) = &common.out {
                experiment::write_report(out, &[row])?;
            }
        }
        Command::Ablate { matrix, common } => {
            let out = out_path(&common)?;
            fs::create_dir_all(out)?;
            let exp = experiment_config(&common, &matrix)?;
            let k = exp.k;
            let run = foundation(&common, exp, out)?;
            let mut cells = vec![Cell::Baseline, Cell::R2ag];
            cells.extend(Cell::ABLATIONS);
            let rows = run.run_matrix(&cells, k, |r| print_rows(std::slice::from_ref(r)))?;
            experiment::write_report(&out.join("report.csv"), &rows)?;
            let table = experiment::ablation_table(&rows, k)?;
            experiment::write_ablation_table(&out.join("ablation.csv"), &table)?;
            for l in &table {
                println!("{:<10} acc {:.4} f1 {:.4} {:+.2} {}", l.cell.name(), l.accuracy, l.f1, l.delta_points, l.flag);
            }
        }
        Command::SweepK { ks, matrix, common } => {
            let out = out_path(&common)?;
            fs::create_dir_all(out)?;
            let exp = experiment_config(&common, &matrix)?;
            let run = foundation(&common, exp, out)?;
            let mut rows = Vec::new();
            for k in ks {
                rows.extend(run.run_matrix(&[Cell::Baseline, Cell::Learnable], k, |r| {
                    print_rows(std::slice::from_ref(r))
                })?);
            }
            experiment::write_report(&out.join("sweep_k.csv"), &rows)?;
        }
        Command::ExportAttention { data, index, templates, common } => {
            let path = common.checkpoint.as_deref().context("--checkpoint is required")?;
            let (cfg, model, vocab) = load_model(path)?;
            let test = formats::load_dataset(&data)?;
            let inst = test
                .get(index)
                .with_context(|| format!("{} has only {} instances", data.display(), test.len()))?;
            let template = template_for(&cfg, &templates)?;
            let ex = prepare(inst, "attention", &vocab, &template, cfg.prompt_mode(), &cfg)?;
            let dump = export_attention(&model, &cfg, &ex, &vocab)?;
            dump.write_csv(out_path(&common)?)?;
            for (l, m) in dump.placeholder_mass().iter().enumerate() {
                println!("layer {l}: attention mass on <R> positions {m:.4}");
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
