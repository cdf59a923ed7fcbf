//! Retrieval-aware prompting: template rendering with `<R>` placeholders,
//! projection of bridge outputs into the LM embedding space, and assembly of
//! the final input embedding matrix.
//!
//! A template is plain text. The line containing `{doc_i}` is the
//! per-document block and is repeated once per document, with `{i}` replaced
//! by the 1-based rank. `{query}` may appear anywhere else; `<R>` marks a
//! placeholder inside the document block.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::lm::ToyLm;
use crate::nn::Linear;
use crate::params::{self, ParamId, ParamSet, Session};
use crate::vocab::{split_words, TokenSeq, Vocab, BOS, EOS, RET};

/// Which kind of vector fills the placeholder rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// Projected bridge outputs.
    R2ag,
    /// No placeholders at all.
    Baseline,
    /// Free trainable vectors, one per rank.
    Learnable,
}

impl PromptMode {
    pub fn has_placeholders(self) -> bool {
        !matches!(self, PromptMode::Baseline)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    /// Fixed template wording, including `<BOS>`.
    Template,
    Query,
    /// Placeholder of the 0-based document.
    Placeholder(usize),
    Document(usize),
    Answer,
}

impl core::fmt::Display for Segment {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Segment::Template => f.write_str("template"),
            Segment::Query => f.write_str("query"),
            Segment::Placeholder(i) => write!(f, "R_{}", i + 1),
            Segment::Document(i) => write!(f, "doc_{}", i + 1),
            Segment::Answer => f.write_str("answer"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Query,
    Doc,
    Rank,
    Placeholder,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    header: Vec<Piece>,
    doc_block: Vec<Piece>,
    footer: Vec<Piece>,
}

fn parse_pieces(text: &str) -> Vec<Piece> {
    let mut out = Vec::new();
    let mut rest = text;
    let markers = [
        ("{query}", Piece::Query),
        ("{doc_i}", Piece::Doc),
        ("{i}", Piece::Rank),
        ("<R>", Piece::Placeholder),
    ];
    while !rest.is_empty() {
        let next = markers
            .iter()
            .filter_map(|(m, p)| rest.find(m).map(|at| (at, *m, p)))
            .min_by_key(|(at, _, _)| *at);
        match next {
            Some((at, m, p)) => {
                if at > 0 {
                    out.push(Piece::Text(rest[..at].to_string()));
                }
                out.push(p.clone());
                rest = &rest[at + m.len()..];
            }
            None => {
                out.push(Piece::Text(rest.to_string()));
                rest = "";
            }
        }
    }
    out
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let doc_lines: Vec<usize> = (0..lines.len()).filter(|&i| lines[i].contains("{doc_i}")).collect();
        if doc_lines.len() != 1 {
            return Err(Error::Config(format!(
                "template needs exactly one line with {{doc_i}}, found {}",
                doc_lines.len()
            )));
        }
        let at = doc_lines[0];
        let header = parse_pieces(&lines[..at].join("\n"));
        let doc_block = parse_pieces(lines[at]);
        let footer = parse_pieces(&lines[at + 1..].join("\n"));
        let placeholders = doc_block.iter().filter(|p| **p == Piece::Placeholder).count();
        if placeholders > 1 {
            return Err(Error::Config("the document line may hold at most one <R>".into()));
        }
        let stray = header.iter().chain(&footer).any(|p| matches!(p, Piece::Placeholder | Piece::Rank));
        if stray {
            return Err(Error::Config("<R> and {i} are only allowed on the document line".into()));
        }
        Ok(Self {
            header,
            doc_block,
            footer,
        })
    }

    /// Whether the document block carries a `<R>` marker.
    pub fn has_placeholder(&self) -> bool {
        self.doc_block.contains(&Piece::Placeholder)
    }
}

/// A rendered prompt: token ids with one segment label per position and the
/// positions of the placeholder tokens in document order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub tokens: Vec<usize>,
    pub segments: Vec<Segment>,
    pub placeholders: Vec<usize>,
    /// Length of the prompt proper, before any answer tokens.
    pub prompt_len: usize,
}

impl RenderedPrompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Appends answer tokens and `<EOS>`; returns the next-token targets
    /// with the loss mask set on every position that predicts an answer
    /// token or the final `<EOS>`.
    pub fn with_answer(&self, answer: &[usize]) -> (RenderedPrompt, TokenSeq) {
        let mut full = self.clone();
        full.tokens.extend_from_slice(answer);
        full.segments.extend(core::iter::repeat(Segment::Answer).take(answer.len()));
        let n = full.tokens.len();
        let mut targets = TokenSeq::default();
        for j in 0..n {
            let next = full.tokens.get(j + 1).copied().unwrap_or(EOS);
            targets.push(next, j + 1 >= self.prompt_len);
        }
        (full, targets)
    }
}

/// Renders the prompt for a query and its ranked documents, preceded by
/// `<BOS>`. Document order is kept exactly as given.
pub fn render_template(
    template: &PromptTemplate,
    vocab: &Vocab,
    query: &str,
    docs: &[Option<&str>],
    mode: PromptMode,
) -> Result<RenderedPrompt> {
    if docs.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut out = RenderedPrompt {
        tokens: alloc::vec![BOS],
        segments: alloc::vec![Segment::Template],
        placeholders: Vec::new(),
        prompt_len: 0,
    };
    let mut push_text = |out: &mut RenderedPrompt, text: &str, seg: Segment| {
        for w in split_words(text) {
            out.tokens.push(vocab.id(w));
            out.segments.push(seg);
        }
    };
    let emit = |out: &mut RenderedPrompt,
                pieces: &[Piece],
                doc: Option<(usize, &str)>,
                push_text: &mut dyn FnMut(&mut RenderedPrompt, &str, Segment)| {
        for p in pieces {
            match p {
                Piece::Text(t) => push_text(out, t, Segment::Template),
                Piece::Query => push_text(out, query, Segment::Query),
                Piece::Doc => {
                    let (i, text) = doc.expect("document pieces only occur in the document block");
                    push_text(out, text, Segment::Document(i));
                }
                Piece::Rank => {
                    let (i, _) = doc.expect("rank pieces only occur in the document block");
                    push_text(out, &format!("{}", i + 1), Segment::Template);
                }
                Piece::Placeholder => {
                    let (i, _) = doc.expect("placeholders only occur in the document block");
                    if mode.has_placeholders() {
                        out.placeholders.push(out.tokens.len());
                        out.tokens.push(RET);
                        out.segments.push(Segment::Placeholder(i));
                    }
                }
            }
        }
    };
    emit(&mut out, &template.header, None, &mut push_text);
    for (i, d) in docs.iter().enumerate() {
        let text = d.ok_or(Error::MissingDocumentText(i))?;
        emit(&mut out, &template.doc_block, Some((i, text)), &mut push_text);
    }
    emit(&mut out, &template.footer, None, &mut push_text);
    if mode.has_placeholders() && out.placeholders.len() != docs.len() {
        return Err(Error::PlaceholderMismatch {
            placeholders: out.placeholders.len(),
            rows: docs.len(),
        });
    }
    out.prompt_len = out.tokens.len();
    Ok(out)
}

/// Maps bridge outputs (`k × h1`) to LM embeddings (`k × h2`).
#[derive(Debug, Clone)]
pub struct Projector {
    pub first: Linear,
    /// Present for the one-hidden-layer variant.
    pub second: Option<Linear>,
}

impl Projector {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        hidden_layer: bool,
        rng: &mut R,
    ) -> Self {
        if hidden_layer {
            let first = Linear::new(ps, &format!("{prefix}.hidden"), in_dim, in_dim, true, rng);
            let second = Linear::new(ps, &format!("{prefix}.out"), in_dim, out_dim, true, rng);
            Self {
                first,
                second: Some(second),
            }
        } else {
            Self {
                first: Linear::new(ps, &format!("{prefix}.out"), in_dim, out_dim, true, rng),
                second: None,
            }
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        let y = self.first.forward(s, h)?;
        match &self.second {
            Some(l) => {
                let a = s.graph.gelu(y);
                l.forward(s, a)
            }
            None => Ok(y),
        }
    }
}

/// Free per-rank vectors for the learnable-token variant.
#[derive(Debug, Clone, Copy)]
pub struct LearnableTokens {
    pub table: ParamId,
    pub k_max: usize,
}

impl LearnableTokens {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, k_max: usize, dim: usize, rng: &mut R) -> Self {
        let table = ps.add(name, params::init_normal(rng, &[k_max, dim], 0.02));
        Self { table, k_max }
    }

    /// The first `k` rows.
    pub fn rows(&self, s: &mut Session<'_>, k: usize) -> Result<Var> {
        if k > self.k_max {
            return Err(Error::TooManyDocuments { k, k_max: self.k_max });
        }
        let t = s.param(self.table);
        let idx: Vec<usize> = (0..k).collect();
        s.graph.select_rows(t, &idx)
    }
}

/// The LM input for one prompt.
#[derive(Debug, Clone)]
pub struct PromptAssembly {
    pub embeddings: Var,
    pub placeholders: Vec<usize>,
    pub segments: Vec<Segment>,
}

/// Looks up token embeddings and overwrites the placeholder rows with
/// `injected` in document order. With no placeholders `injected` must be
/// `None`.
pub fn assemble(
    s: &mut Session<'_>,
    lm: &ToyLm,
    prompt: &RenderedPrompt,
    injected: Option<Var>,
) -> Result<PromptAssembly> {
    let base = lm.embed_tokens(s, &prompt.tokens)?;
    let rows = injected.map_or(0, |v| s.graph.value(v).rows());
    if rows != prompt.placeholders.len() {
        return Err(Error::PlaceholderMismatch {
            placeholders: prompt.placeholders.len(),
            rows,
        });
    }
    let embeddings = match injected {
        Some(v) => s.graph.scatter_rows(base, v, &prompt.placeholders)?,
        None => base,
    };
    Ok(PromptAssembly {
        embeddings,
        placeholders: prompt.placeholders.clone(),
        segments: prompt.segments.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use crate::tensor::Tensor;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const R2AG: &str = "answer using the results .\n[{i}]similarity: <R>{doc_i}\nquestion : {query}\nanswer :";

    fn vocab() -> Vocab {
        Vocab::build(["answer using the results . [ ] similarity : question 1 2 3 a b c d e f g h q r s t"])
    }

    #[test]
    fn parse_rejects_bad_templates() {
        assert!(PromptTemplate::parse("no documents here").is_err());
        assert!(PromptTemplate::parse("{doc_i}\n{doc_i}").is_err());
        assert!(PromptTemplate::parse("<R>\n{doc_i}").is_err());
        assert!(PromptTemplate::parse("<R><R>{doc_i}").is_err());
        assert!(PromptTemplate::parse(R2AG).unwrap().has_placeholder());
    }

    #[test]
    fn render_counts_placeholders() {
        let t = PromptTemplate::parse(R2AG).unwrap();
        let v = vocab();
        let p = render_template(&t, &v, "q r", &[Some("a b"), Some("c")], PromptMode::R2ag).unwrap();
        assert_eq!(p.placeholders.len(), 2);
        for &i in &p.placeholders {
            assert_eq!(p.tokens[i], RET);
        }
        assert_eq!(p.segments[p.placeholders[1]], Segment::Placeholder(1));
        let b = render_template(&t, &v, "q r", &[Some("a b"), Some("c")], PromptMode::Baseline).unwrap();
        assert!(b.placeholders.is_empty());
        assert!(!b.tokens.contains(&RET));
        assert_eq!(b.len() + 2, p.len());
        assert_eq!(p.segments.len(), p.len());
    }

    #[test]
    fn render_keeps_document_order() {
        let t = PromptTemplate::parse("{doc_i}\n{query}").unwrap();
        let v = vocab();
        let p = render_template(&t, &v, "q", &[Some("c"), Some("a"), Some("b")], PromptMode::Baseline).unwrap();
        assert_eq!(p.tokens, vec![BOS, v.id("c"), v.id("a"), v.id("b"), v.id("q")]);
        let err = render_template(&t, &v, "q", &[Some("a"), None], PromptMode::Baseline).unwrap_err();
        assert_eq!(err, Error::MissingDocumentText(1));
    }

    #[test]
    fn core_layout_length() {
        // Query of 4 tokens, two documents of 5 and 3 tokens, no instruction.
        let t = PromptTemplate::parse("{query}\n<R>{doc_i}").unwrap();
        let v = vocab();
        let p = render_template(&t, &v, "q r s t", &[Some("a b c d e"), Some("f g h")], PromptMode::R2ag).unwrap();
        assert_eq!(p.len() - 1, 14);
    }

    #[test]
    fn with_answer_masks_answer_targets() {
        let t = PromptTemplate::parse("{query}\n{doc_i}").unwrap();
        let v = vocab();
        let p = render_template(&t, &v, "q", &[Some("a")], PromptMode::Baseline).unwrap();
        let (full, targets) = p.with_answer(&[v.id("b"), v.id("c")]);
        assert_eq!(full.tokens, vec![BOS, v.id("q"), v.id("a"), v.id("b"), v.id("c")]);
        assert_eq!(targets.ids, vec![v.id("q"), v.id("a"), v.id("b"), v.id("c"), EOS]);
        assert_eq!(targets.loss_mask, vec![false, false, true, true, true]);
    }

    #[test]
    fn assembly_overwrites_placeholder_rows_only() {
        let t = PromptTemplate::parse(R2AG).unwrap();
        let v = vocab();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = LmConfig { hidden: 8, max_len: 64, ..LmConfig::new(v.len()) };
        let lm = ToyLm::new(&mut ps, "lm", cfg, &mut rng).unwrap();
        let docs = [Some("a b"), Some("c d e"), Some("f")];
        let p = render_template(&t, &v, "q", &docs, PromptMode::R2ag).unwrap();
        let b = render_template(&t, &v, "q", &docs, PromptMode::Baseline).unwrap();

        let mut s = Session::new(&ps, false, ChaCha8Rng::seed_from_u64(0));
        let er = Tensor::new(vec![3, 8], (0..24).map(|i| i as f64 * 0.37 - 2.0).collect()).unwrap();
        let erv = s.graph.constant(er.clone());
        let a = assemble(&mut s, &lm, &p, Some(erv)).unwrap();
        let base = assemble(&mut s, &lm, &b, None).unwrap();
        let e = s.graph.value(a.embeddings).clone();
        for (i, &pos) in a.placeholders.iter().enumerate() {
            assert_eq!(e.row(pos), er.row(i));
        }
        let kept: Vec<f64> = (0..e.rows())
            .filter(|r| !a.placeholders.contains(r))
            .flat_map(|r| e.row(r).to_vec())
            .collect();
        assert_eq!(kept, s.graph.value(base.embeddings).data());

        let two = s.graph.constant(Tensor::zeros(&[2, 8]));
        let err = assemble(&mut s, &lm, &p, Some(two)).unwrap_err();
        assert_eq!(err, Error::PlaceholderMismatch { placeholders: 3, rows: 2 });
    }

    #[test]
    fn projector_is_linear_by_default() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let proj = Projector::new(&mut ps, "proj", 6, 4, false, &mut rng);
        ps.tensor_mut(proj.first.bias.unwrap()).data_mut().fill(0.0);
        let h = Tensor::new(vec![3, 6], (0..18).map(|i| (i as f64).sin()).collect()).unwrap();
        let run = |h: Tensor| {
            let mut s = Session::new(&ps, false, ChaCha8Rng::seed_from_u64(0));
            let x = s.graph.constant(h);
            let y = proj.forward(&mut s, x).unwrap();
            s.graph.value(y).clone()
        };
        let y = run(h.clone());
        assert_eq!(y.shape(), &[3, 4]);
        let doubled = Tensor::new(vec![3, 6], h.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        for (a, b) in run(doubled).data().iter().zip(y.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
        assert!(run(Tensor::zeros(&[3, 6])).data().iter().all(|&v| v == 0.0));

        let mlp = Projector::new(&mut ps, "mlp", 6, 4, true, &mut rng);
        assert!(mlp.second.is_some());
    }
}
