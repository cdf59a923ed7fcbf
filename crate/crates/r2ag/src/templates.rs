//! Bundled prompt templates.

/// Plain RAG prompt in the original wording.
pub const RAG: &str = include_str!("../templates/rag.txt");
/// The same wording with a `<R>` slot per document.
pub const R2AG: &str = include_str!("../templates/r2ag.txt");
/// Short RAG prompt used by the toy experiments.
pub const RAG_COMPACT: &str = include_str!("../templates/rag_compact.txt");
/// [`RAG_COMPACT`] with a `<R>` slot per document.
pub const R2AG_COMPACT: &str = include_str!("../templates/r2ag_compact.txt");
