//! Seeded synthetic factoid QA in the style of an open-domain "k documents,
//! one relevant" benchmark.
//!
//! Every instance draws fresh attribute values, so answers cannot be
//! memorized across instances and must be read from the documents.
//! Distractors reuse the query's entity or attribute so that lexical
//! retrieval is informative but imperfect.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{HashEncoder, RankedDoc, RankedList, Similarity};
use crate::error::{Error, Result};
use crate::metrics::normalize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaDoc {
    pub text: String,
    pub label: bool,
}

/// A query with its documents in retriever order and the gold answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaInstance {
    pub query: String,
    pub docs: Vec<QaDoc>,
    pub answers: Vec<String>,
}

impl QaInstance {
    pub fn k(&self) -> usize {
        self.docs.len()
    }

    pub fn doc_texts(&self) -> Vec<Option<&str>> {
        self.docs.iter().map(|d| Some(d.text.as_str())).collect()
    }

    /// Embeds query and documents, keeping the stored document order.
    pub fn ranked_list(&self, query_id: &str, encoder: &HashEncoder) -> Result<RankedList> {
        let docs = self
            .docs
            .iter()
            .enumerate()
            .map(|(i, d)| {
                Ok(RankedDoc {
                    doc_id: format!("{query_id}-{i}"),
                    embedding: encoder.encode(&d.text)?,
                    label: d.label,
                    text: Some(d.text.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let list = RankedList {
            query_id: query_id.to_string(),
            query: encoder.encode(&self.query)?,
            docs,
        };
        list.validate()?;
        Ok(list)
    }

    /// First `k` documents, or an error if fewer are available.
    pub fn truncated(&self, k: usize) -> Result<QaInstance> {
        if k == 0 {
            return Err(Error::EmptyList);
        }
        if k > self.k() {
            return Err(Error::Data(format!("instance has {} documents, asked for {k}", self.k())));
        }
        Ok(QaInstance {
            query: self.query.clone(),
            docs: self.docs[..k].to_vec(),
            answers: self.answers.clone(),
        })
    }
}

pub const ATTRIBUTES: [(&str, [&str; 8]); 8] = [
    ("color", ["red", "blue", "green", "yellow", "black", "white", "purple", "orange"]),
    ("size", ["tiny", "small", "medium", "large", "huge", "giant", "narrow", "wide"]),
    ("home", ["forest", "desert", "river", "mountain", "island", "valley", "cave", "swamp"]),
    ("food", ["apples", "fish", "seeds", "honey", "grass", "insects", "bread", "roots"]),
    ("metal", ["iron", "copper", "silver", "gold", "tin", "zinc", "lead", "nickel"]),
    ("sound", ["whistle", "drum", "bell", "hum", "roar", "chirp", "click", "howl"]),
    ("shape", ["circle", "square", "triangle", "spiral", "star", "cube", "arrow", "ring"]),
    ("season", ["spring", "summer", "autumn", "winter", "monsoon", "solstice", "equinox", "harvest"]),
];

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_queries: usize,
    pub k: usize,
    pub seed: u64,
    /// Size of the entity-name pool.
    pub entities: usize,
    /// Share of distractors about the query's entity (other attribute).
    pub same_entity: f64,
    /// Share of distractors about the query's attribute (other entity).
    pub same_attribute: f64,
    pub encoder: HashEncoder,
}

impl SynthConfig {
    pub fn new(n_queries: usize, k: usize, seed: u64) -> Self {
        Self {
            n_queries,
            k,
            seed,
            entities: 400,
            same_entity: 0.4,
            same_attribute: 0.4,
            encoder: HashEncoder::default(),
        }
    }
}

/// Pronounceable entity names that never contain an attribute value.
pub fn entity_names(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0e17);
    let values: Vec<&str> = ATTRIBUTES.iter().flat_map(|(a, vs)| core::iter::once(*a).chain(vs.iter().copied())).collect();
    let mut names = Vec::with_capacity(n);
    while names.len() < n {
        let syllables = rng.gen_range(2..=3);
        let mut name = String::new();
        for _ in 0..syllables {
            name.push_str(ONSETS.choose(&mut rng).expect("non-empty"));
            name.push_str(NUCLEI.choose(&mut rng).expect("non-empty"));
        }
        name.push_str(ONSETS.choose(&mut rng).expect("non-empty"));
        if values.iter().any(|v| name.contains(v)) || names.contains(&name) {
            continue;
        }
        names.push(name);
    }
    names
}

/// Telegraphic fact, `"<entity> <attribute> <value> ."`.
pub fn fact_text(attribute: &str, entity: &str, value: &str) -> String {
    format!("{entity} {attribute} {value} .")
}

pub fn query_text(attribute: &str, entity: &str) -> String {
    format!("what is the {attribute} of {entity} ?")
}

fn contains_answer(text: &str, answer: &str) -> bool {
    normalize(text).contains(&normalize(answer))
}

fn instance<R: Rng>(cfg: &SynthConfig, names: &[String], rng: &mut R) -> Result<QaInstance> {
    let entity = names.choose(rng).expect("non-empty pool").as_str();
    let attr_idx = rng.gen_range(0..ATTRIBUTES.len());
    let (attribute, values) = ATTRIBUTES[attr_idx];
    let answer = *values.choose(rng).expect("non-empty");
    let mut used: Vec<(usize, &str)> = alloc::vec![(attr_idx, entity)];
    let mut docs = alloc::vec![QaDoc {
        text: fact_text(attribute, entity, answer),
        label: true,
    }];
    while docs.len() < cfg.k {
        let u: f64 = rng.gen();
        let (a, e) = if u < cfg.same_entity {
            (rng.gen_range(0..ATTRIBUTES.len()), entity)
        } else if u < cfg.same_entity + cfg.same_attribute {
            (attr_idx, names.choose(rng).expect("non-empty").as_str())
        } else {
            (rng.gen_range(0..ATTRIBUTES.len()), names.choose(rng).expect("non-empty").as_str())
        };
        if used.contains(&(a, e)) {
            continue;
        }
        let (attr_name, vals) = ATTRIBUTES[a];
        let v = *vals.choose(rng).expect("non-empty");
        let text = fact_text(attr_name, e, v);
        if contains_answer(&text, answer) {
            continue;
        }
        used.push((a, e));
        docs.push(QaDoc { text, label: false });
    }
    docs.shuffle(rng);

    let query = query_text(attribute, entity);
    let q = cfg.encoder.encode(&query)?;
    let scores = docs
        .iter()
        .map(|d| Ok(Similarity::Cosine.score(q.as_slice(), cfg.encoder.encode(&d.text)?.as_slice())))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let docs = order.into_iter().map(|i| docs[i].clone()).collect();
    Ok(QaInstance {
        query,
        docs,
        answers: alloc::vec![answer.to_string()],
    })
}

/// `n_queries` instances with `k` documents each, one of them relevant,
/// ranked by the hashing retriever.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<QaInstance>> {
    if cfg.n_queries == 0 {
        return Err(Error::Config("n_queries must be ≥ 1".into()));
    }
    if cfg.k < 2 {
        return Err(Error::Config("k must be ≥ 2 for generated data".into()));
    }
    let max_docs = ATTRIBUTES.len() + cfg.entities;
    if cfg.k > max_docs || cfg.entities < 2 {
        return Err(Error::Config(format!("k = {} is too large for the entity pool", cfg.k)));
    }
    let names = entity_names(cfg.entities, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_queries).map(|_| instance(cfg, &names, &mut rng)).collect()
}

/// Fraction of instances whose relevant document is ranked first.
pub fn top1_rate(data: &[QaInstance]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter().filter(|q| q.docs[0].label).count() as f64 / data.len() as f64
}
