//! Retrieval-based question answering over a knowledge base of
//! (title, answer) entries: BM25 candidate generation followed by a
//! convolutional matching model that scores each (query, title, answer)
//! triple.

mod binio;
pub mod data;
pub mod error;
pub mod eval;
pub mod matcher;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use matcher::Matcher;
