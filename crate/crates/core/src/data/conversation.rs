//! Conversation records, the chat template, and batch collation.

use crate::error::{Error, Result};
use crate::tokenizer::{Vocabulary, EOS, IMAGE};

use super::Image;

/// Literal strings of the chat template. Rendering encodes each segment
/// separately so segment boundaries are token boundaries.
pub struct ChatTemplate;

impl ChatTemplate {
    pub const IMAGE_SUFFIX: &'static str = "\n";
    pub const USER: &'static str = "USER: ";
    pub const USER_END: &'static str = "\n";
    pub const ASSISTANT: &'static str = "ASSISTANT: ";
    pub const END_OF_RESPONSE: &'static str = "</s>";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Turn {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Turn {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceModality {
    TextOnly,
    Multimodal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub image: Image,
    pub caption: String,
}

impl CaptionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.caption.trim().is_empty() {
            return Err(Error::Data("caption is empty".into()));
        }
        Ok(())
    }

    /// The caption as a one-exchange conversation with an empty prompt.
    pub fn to_conversation(&self) -> ConversationRecord {
        ConversationRecord {
            turns: vec![Turn::user(""), Turn::assistant(self.caption.clone())],
            image: Some(self.image.clone()),
            modality: SourceModality::Multimodal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversationRecord {
    pub turns: Vec<Turn>,
    pub image: Option<Image>,
    pub modality: SourceModality,
}

impl ConversationRecord {
    pub fn new(turns: Vec<Turn>, image: Option<Image>) -> Result<Self> {
        let modality = if image.is_some() {
            SourceModality::Multimodal
        } else {
            SourceModality::TextOnly
        };
        let rec = ConversationRecord { turns, image, modality };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Data("conversation has no turns".into()));
        }
        for (i, t) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if t.role != expected {
                return Err(Error::Data(format!(
                    "turn {} should be {expected:?}: roles must alternate starting with user",
                    i + 1
                )));
            }
        }
        if self.turns.last().map(|t| t.role) != Some(Role::Assistant) {
            return Err(Error::Data("conversation must end with an assistant turn".into()));
        }
        let has_image = self.image.is_some();
        if has_image != (self.modality == SourceModality::Multimodal) {
            return Err(Error::Data("image must be present exactly for multimodal records".into()));
        }
        Ok(())
    }
}

/// Token ids with a per-token loss mask and the position of the image
/// placeholder, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedExample {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<u8>,
    pub image_slot: Option<usize>,
}

impl RenderedExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m == 1).count()
    }
}

struct Builder<'v> {
    vocab: &'v Vocabulary,
    tokens: Vec<u32>,
    mask: Vec<u8>,
}

impl Builder<'_> {
    fn push_text(&mut self, text: &str, mask: u8) {
        let ids = self.vocab.encode(text);
        self.mask.extend(std::iter::repeat_n(mask, ids.len()));
        self.tokens.extend(ids);
    }

    fn push_id(&mut self, id: u32, mask: u8) {
        self.tokens.push(id);
        self.mask.push(mask);
    }
}

fn render_turns<'v>(turns: &[Turn], has_image: bool, vocab: &'v Vocabulary) -> Builder<'v> {
    let mut b = Builder {
        vocab,
        tokens: Vec::new(),
        mask: Vec::new(),
    };
    if has_image {
        b.push_id(IMAGE, 0);
        b.push_text(ChatTemplate::IMAGE_SUFFIX, 0);
    }
    for turn in turns {
        match turn.role {
            Role::User => {
                b.push_text(ChatTemplate::USER, 0);
                b.push_text(&turn.text, 0);
                b.push_text(ChatTemplate::USER_END, 0);
            }
            Role::Assistant => {
                b.push_text(ChatTemplate::ASSISTANT, 0);
                b.push_text(&turn.text, 1);
                b.push_id(EOS, 1);
            }
        }
    }
    b
}

/// Renders a conversation with the chat template: an optional image
/// placeholder line, then `USER: {text}\n` and `ASSISTANT: {text}</s>` per
/// turn. Only assistant text and its end-of-sequence token carry loss.
/// Sequences longer than `max_len` lose tokens from the right.
pub fn render_conversation(rec: &ConversationRecord, vocab: &Vocabulary, max_len: usize) -> Result<RenderedExample> {
    rec.validate()?;
    let b = render_turns(&rec.turns, rec.image.is_some(), vocab);
    let (mut tokens, mut mask) = (b.tokens, b.mask);
    tokens.truncate(max_len);
    mask.truncate(max_len);
    let image_slot = rec.image.as_ref().map(|_| 0);
    if image_slot.is_some() && tokens.is_empty() {
        return Err(Error::Contract("max_len 0 cannot hold the image placeholder".into()));
    }
    let ex = RenderedExample {
        tokens,
        loss_mask: mask,
        image_slot,
    };
    if ex.masked_count() == 0 {
        return Err(Error::EmptyLoss(format!(
            "rendering to max_len {max_len} leaves no response tokens"
        )));
    }
    Ok(ex)
}

/// Renders the turns so far (ending with a user turn) followed by the
/// assistant prefix, ready for generation.
pub fn render_prompt(turns: &[Turn], has_image: bool, vocab: &Vocabulary) -> Result<Vec<u32>> {
    if turns.last().map(|t| t.role) != Some(Role::User) {
        return Err(Error::Contract("a prompt must end with a user turn".into()));
    }
    for (i, t) in turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if t.role != expected {
            return Err(Error::Contract("prompt roles must alternate starting with user".into()));
        }
    }
    let mut b = render_turns(turns, has_image, vocab);
    b.push_text(ChatTemplate::ASSISTANT, 0);
    Ok(b.tokens)
}

/// A right-padded batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<Vec<u32>>,
    pub loss_mask: Vec<Vec<u8>>,
    pub lengths: Vec<usize>,
    pub image_slots: Vec<Option<usize>>,
}

impl Batch {
    pub fn width(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    /// Row `i` without its padding.
    pub fn example(&self, i: usize) -> RenderedExample {
        let n = self.lengths[i];
        RenderedExample {
            tokens: self.tokens[i][..n].to_vec(),
            loss_mask: self.loss_mask[i][..n].to_vec(),
            image_slot: self.image_slots[i],
        }
    }
}

/// Pads every example on the right with `pad_id` (mask 0) to the longest
/// length in the batch. Never truncates.
pub fn collate(batch: &[RenderedExample], pad_id: u32, max_len: usize) -> Result<Batch> {
    if batch.is_empty() {
        return Err(Error::Contract("cannot collate an empty batch".into()));
    }
    if let Some((i, ex)) = batch.iter().enumerate().find(|(_, e)| e.len() > max_len) {
        return Err(Error::Contract(format!(
            "example {i} has {} tokens, more than max_len {max_len}",
            ex.len()
        )));
    }
    let width = batch.iter().map(RenderedExample::len).max().unwrap_or(0);
    let mut out = Batch {
        tokens: Vec::with_capacity(batch.len()),
        loss_mask: Vec::with_capacity(batch.len()),
        lengths: Vec::with_capacity(batch.len()),
        image_slots: Vec::with_capacity(batch.len()),
    };
    for ex in batch {
        let mut t = ex.tokens.clone();
        let mut m = ex.loss_mask.clone();
        t.resize(width, pad_id);
        m.resize(width, 0);
        out.tokens.push(t);
        out.loss_mask.push(m);
        out.lengths.push(ex.len());
        out.image_slots.push(ex.image_slot);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::PAD;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["USER: hi\nASSISTANT: yo</s>", "a red circle"], 300).unwrap()
    }

    fn conv(turns: Vec<Turn>) -> ConversationRecord {
        ConversationRecord::new(turns, None).unwrap()
    }

    #[test]
    fn single_response_mask() {
        let v = vocab();
        let ex = render_conversation(&conv(vec![Turn::user("hi"), Turn::assistant("yo")]), &v, 64).unwrap();
        let prefix = [v.encode("USER: "), v.encode("hi"), v.encode("\n"), v.encode("ASSISTANT: ")].concat();
        let yo = v.encode("yo");
        assert_eq!(ex.tokens, [prefix.clone(), yo.clone(), vec![EOS]].concat());
        let expected_mask: Vec<u8> = [vec![0; prefix.len()], vec![1; yo.len() + 1]].concat();
        assert_eq!(ex.loss_mask, expected_mask);
        assert_eq!(ex.image_slot, None);
    }

    #[test]
    fn image_slot_is_unmasked_placeholder() {
        let v = vocab();
        let rec = ConversationRecord::new(vec![Turn::user("what?"), Turn::assistant("a red circle")], Some(Image::blank(2, 2))).unwrap();
        let ex = render_conversation(&rec, &v, 64).unwrap();
        let slot = ex.image_slot.unwrap();
        assert_eq!(ex.tokens[slot], IMAGE);
        assert_eq!(ex.loss_mask[slot], 0);
    }

    #[test]
    fn two_responses_both_masked() {
        // Hand-walk over a byte-level vocabulary: every character is one token.
        let v = Vocabulary::build(["x"], 260).unwrap();
        let rec = conv(vec![Turn::user("a"), Turn::assistant("b"), Turn::user("c"), Turn::assistant("de")]);
        let ex = render_conversation(&rec, &v, 128).unwrap();
        let text = "USER: a\nASSISTANT: b</s>USER: c\nASSISTANT: de</s>";
        let mut expected = Vec::new();
        // segment, mask
        for (seg, m) in [("USER: a\nASSISTANT: ", 0u8), ("b", 1), ("\u{0}", 1), ("USER: c\nASSISTANT: ", 0), ("de", 1), ("\u{0}", 1)] {
            for _ in 0..seg.len() {
                expected.push(m);
            }
        }
        assert_eq!(ex.loss_mask, expected);
        assert_eq!(ex.tokens.len(), text.len() - 2 * "</s>".len() + 2);
        let user2 = 1 + "USER: a\nASSISTANT: b".len();
        assert!(ex.loss_mask[user2..user2 + "USER: c\n".len()].iter().all(|&m| m == 0));
    }

    #[test]
    fn truncation_removing_all_responses_errors() {
        let v = vocab();
        let rec = conv(vec![Turn::user("hello there"), Turn::assistant("yo")]);
        assert!(matches!(render_conversation(&rec, &v, 3), Err(Error::EmptyLoss(_))));
    }

    #[test]
    fn invalid_roles_rejected() {
        assert!(ConversationRecord::new(vec![Turn::assistant("x")], None).is_err());
        assert!(ConversationRecord::new(vec![Turn::user("x")], None).is_err());
        assert!(ConversationRecord::new(vec![Turn::user("x"), Turn::user("y")], None).is_err());
    }

    #[test]
    fn collate_pads_right() {
        let a = RenderedExample { tokens: vec![5, 6, 7], loss_mask: vec![0, 1, 1], image_slot: None };
        let b = RenderedExample { tokens: vec![5, 6, 7, 8, 9], loss_mask: vec![0, 0, 1, 1, 1], image_slot: Some(0) };
        let batch = collate(&[a.clone(), b.clone()], PAD, 8).unwrap();
        assert_eq!(batch.width(), 5);
        assert_eq!(batch.tokens[0], vec![5, 6, 7, PAD, PAD]);
        assert_eq!(batch.loss_mask[0], vec![0, 1, 1, 0, 0]);
        assert_eq!(batch.image_slots, vec![None, Some(0)]);
        assert_eq!(batch.example(0), a);
        let same = collate(&[b.clone(), b.clone()], PAD, 8).unwrap();
        assert!(same.tokens.iter().all(|r| !r.contains(&PAD)));
        assert!(collate(&[], PAD, 8).is_err());
        assert!(collate(&[b], PAD, 4).is_err());
    }

    /// Independent walk of the template: marks which characters of the
    /// rendered string belong to assistant content, on a byte-level vocab.
    fn reference_mask(turns: &[Turn]) -> Vec<u8> {
        let mut mask = Vec::new();
        for t in turns {
            match t.role {
                Role::User => mask.extend(std::iter::repeat_n(0, format!("USER: {}\n", t.text).len())),
                Role::Assistant => {
                    mask.extend(std::iter::repeat_n(0, "ASSISTANT: ".len()));
                    mask.extend(std::iter::repeat_n(1, t.text.len() + 1));
                }
            }
        }
        mask
    }

    proptest! {
        #[test]
        fn mask_matches_reference_walk(texts in proptest::collection::vec("[a-z ]{1,8}", 1..4)) {
            let v = Vocabulary::build(["z"], 260).unwrap();
            let mut turns = Vec::new();
            for t in &texts {
                turns.push(Turn::user(t.clone()));
                turns.push(Turn::assistant(t.chars().rev().collect::<String>()));
            }
            let ex = render_conversation(&conv(turns.clone()), &v, 4096).unwrap();
            prop_assert_eq!(ex.loss_mask, reference_mask(&turns));
        }
    }
}
