use crate::error::{Error, Result};

/// A packed batch of token sequences.
///
/// Sequences are concatenated row-wise; `offsets[j]..offsets[j + 1]` is the
/// row range of sequence `j`. Prediction rows are the positions whose
/// next-token distribution is scored against `targets`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub offsets: Vec<usize>,
    pub pred_rows: Vec<usize>,
    pub targets: Vec<usize>,
    /// `pred_offsets[j]..pred_offsets[j + 1]` indexes the predictions of sequence `j`.
    pub pred_offsets: Vec<usize>,
}

impl TokenBatch {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            pred_offsets: vec![0],
            ..Self::default()
        }
    }

    /// Appends `prompt ++ answer[..len-1]`, scoring every answer token.
    pub fn push_answer(&mut self, prompt: &[usize], answer: &[usize]) -> Result<()> {
        if prompt.is_empty() || answer.is_empty() {
            return Err(Error::Empty("prompt and answer must be non-empty"));
        }
        let start = self.tokens.len();
        self.tokens.extend_from_slice(prompt);
        self.tokens.extend_from_slice(&answer[..answer.len() - 1]);
        for (k, &a) in answer.iter().enumerate() {
            self.pred_rows.push(start + prompt.len() - 1 + k);
            self.targets.push(a);
        }
        self.offsets.push(self.tokens.len());
        self.pred_offsets.push(self.pred_rows.len());
        Ok(())
    }

    /// Appends `prompt ++ answer[..len-1]` and scores every next token of the
    /// question as well. Returns the count of prompt predictions, which come
    /// first in this sequence's prediction block.
    pub fn push_full(&mut self, prompt: &[usize], answer: &[usize]) -> Result<usize> {
        if prompt.is_empty() || answer.is_empty() {
            return Err(Error::Empty("prompt and answer must be non-empty"));
        }
        let start = self.tokens.len();
        self.tokens.extend_from_slice(prompt);
        self.tokens.extend_from_slice(&answer[..answer.len() - 1]);
        let full: Vec<usize> = prompt.iter().chain(answer).copied().collect();
        for (k, &t) in full.iter().enumerate().skip(1) {
            self.pred_rows.push(start + k - 1);
            self.targets.push(t);
        }
        self.offsets.push(self.tokens.len());
        self.pred_offsets.push(self.pred_rows.len());
        Ok(prompt.len() - 1)
    }

    /// Appends an unscored sequence.
    pub fn push_plain(&mut self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("sequence"));
        }
        self.tokens.extend_from_slice(tokens);
        self.offsets.push(self.tokens.len());
        self.pred_offsets.push(self.pred_rows.len());
        Ok(())
    }

    pub fn num_sequences(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.num_sequences() == 0
    }

    pub fn sequence_len(&self, j: usize) -> usize {
        self.offsets[j + 1] - self.offsets[j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answer_rows_point_at_preceding_positions() {
        let mut b = TokenBatch::new();
        b.push_answer(&[5, 6, 7], &[1, 2]).unwrap();
        b.push_answer(&[9], &[3]).unwrap();
        assert_eq!(b.tokens, vec![5, 6, 7, 1, 9]);
        assert_eq!(b.offsets, vec![0, 4, 5]);
        assert_eq!(b.pred_rows, vec![2, 3, 4]);
        assert_eq!(b.targets, vec![1, 2, 3]);
        assert_eq!(b.pred_offsets, vec![0, 2, 3]);
        assert!(b.push_answer(&[], &[1]).is_err());
    }
}
