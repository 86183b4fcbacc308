use super::vocab::{Vocab, BOS, EOS, PAD, SEP};
use crate::arabic_text::normalize;
use crate::dataset::QaRecord;

/// `<bos> question <sep> answer <eos>`. `loss_mask[t]` is 1 when position
/// `t` predicts an answer token or `<eos>`; the last position predicts
/// nothing and is always 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<u8>,
}

impl EncodedPair {
    /// Drops question tokens from the left until the sequence fits
    /// `context_len`. Returns `None` when the answer alone does not fit.
    pub fn from_ids(question: &[u32], answer: &[u32], context_len: usize) -> Option<EncodedPair> {
        let fixed = 3 + answer.len();
        if fixed > context_len {
            return None;
        }
        let keep = question.len().min(context_len - fixed);
        let question = &question[question.len() - keep..];
        let mut ids = Vec::with_capacity(fixed + keep);
        ids.push(BOS);
        ids.extend_from_slice(question);
        let sep_pos = ids.len();
        ids.push(SEP);
        ids.extend_from_slice(answer);
        ids.push(EOS);
        let mut loss_mask = vec![0u8; ids.len()];
        for m in &mut loss_mask[sep_pos..ids.len() - 1] {
            *m = 1;
        }
        Some(EncodedPair { ids, loss_mask })
    }

    /// Plain text line for unconditional training: `<bos> text <eos>`, every
    /// prediction counted. Long lines are cut at the right.
    pub fn from_text_ids(text: &[u32], context_len: usize) -> Option<EncodedPair> {
        if context_len < 2 {
            return None;
        }
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(text);
        ids.push(EOS);
        ids.truncate(context_len);
        let mut loss_mask = vec![1u8; ids.len()];
        *loss_mask.last_mut().unwrap() = 0;
        Some(EncodedPair { ids, loss_mask })
    }

    pub fn active_positions(&self) -> usize {
        self.loss_mask.iter().map(|&m| m as usize).sum()
    }
}

pub fn encode_pair(record: &QaRecord, vocab: &Vocab, context_len: usize) -> Option<EncodedPair> {
    let q = vocab.encode(normalize(&record.question).as_str());
    let a = vocab.encode(normalize(&record.answer).as_str());
    let pair = EncodedPair::from_ids(&q, &a, context_len);
    if pair.is_none() {
        log::warn!(
            "record {} skipped: answer of {} tokens does not fit a context of {}",
            record.id,
            a.len(),
            context_len
        );
    }
    pair
}

pub fn encode_text(text: &str, vocab: &Vocab, context_len: usize) -> Option<EncodedPair> {
    EncodedPair::from_text_ids(&vocab.encode(normalize(text).as_str()), context_len)
}

/// Right-padded teacher-forcing batch: inputs are `ids[..len-1]`, targets
/// `ids[1..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<f64>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&EncodedPair]) -> Batch {
        let seq_len = pairs.iter().map(|p| p.ids.len().saturating_sub(1)).max().unwrap_or(0);
        let b = pairs.len();
        let mut inputs = vec![PAD as usize; b * seq_len];
        let mut targets = vec![PAD as usize; b * seq_len];
        let mut mask = vec![0.0; b * seq_len];
        for (i, p) in pairs.iter().enumerate() {
            for t in 0..p.ids.len().saturating_sub(1) {
                inputs[i * seq_len + t] = p.ids[t] as usize;
                targets[i * seq_len + t] = p.ids[t + 1] as usize;
                mask[i * seq_len + t] = p.loss_mask[t] as f64;
            }
        }
        Batch {
            batch_size: b,
            seq_len,
            inputs,
            targets,
            mask,
        }
    }

    pub fn active_positions(&self) -> f64 {
        self.mask.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_covers_answer_and_eos() {
        let p = EncodedPair::from_ids(&[10, 11], &[20, 21, 22], 64).unwrap();
        assert_eq!(p.ids, vec![BOS, 10, 11, SEP, 20, 21, 22, EOS]);
        // positions 3..=6 predict 20, 21, 22, <eos>
        assert_eq!(p.loss_mask, vec![0, 0, 0, 1, 1, 1, 1, 0]);
        assert_eq!(p.active_positions(), 4);
    }

    #[test]
    fn question_truncated_from_left() {
        let p = EncodedPair::from_ids(&[10, 11, 12, 13], &[20, 21], 8).unwrap();
        assert_eq!(p.ids, vec![BOS, 11, 12, 13, SEP, 20, 21, EOS]);
        let p = EncodedPair::from_ids(&[10, 11, 12, 13], &[20, 21], 7).unwrap();
        assert_eq!(p.ids, vec![BOS, 12, 13, SEP, 20, 21, EOS]);
        assert_eq!(p.active_positions(), 3);
    }

    #[test]
    fn answer_too_long_is_skipped() {
        assert!(EncodedPair::from_ids(&[1], &[20; 6], 8).is_none());
        assert!(EncodedPair::from_ids(&[], &[20; 5], 8).is_some());
    }

    #[test]
    fn batch_pads_right() {
        let a = EncodedPair::from_ids(&[10], &[20], 16).unwrap();
        let b = EncodedPair::from_ids(&[10, 11, 12], &[20], 16).unwrap();
        let batch = Batch::from_pairs(&[&a, &b]);
        assert_eq!(batch.seq_len, 6);
        assert_eq!(&batch.inputs[..6], &[1, 10, 2, 20, 0, 0]);
        assert_eq!(&batch.targets[..6], &[10, 2, 20, 3, 0, 0]);
        assert_eq!(&batch.mask[..6], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(batch.active_positions(), 4.0);
    }
}
