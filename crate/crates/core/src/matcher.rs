use crate::error::Result;
use crate::model::{score, ModelConfig, ModelParams, Score};
use crate::retrieval::KnowledgeEntry;
use crate::text::{encode, tokenize, Vocabulary};

/// A trained model together with the vocabulary needed to read raw text.
#[derive(Debug, Clone, PartialEq)]
pub struct Matcher {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

impl Matcher {
    pub fn encode(&self, text: &str) -> Vec<usize> {
        encode(
            &tokenize(text, self.config.tokenizer),
            &self.vocab,
            self.config.seq_len,
        )
    }

    pub fn score_text(&self, query: &str, title: &str, answer: &str) -> Result<Score> {
        score(
            &self.encode(query),
            &self.encode(title),
            &self.encode(answer),
            &self.params,
            &self.config,
        )
    }

    pub fn score_entry(&self, query: &str, entry: &KnowledgeEntry) -> Result<Score> {
        self.score_text(query, &entry.title, &entry.answer)
    }
}
