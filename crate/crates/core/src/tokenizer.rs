//! Byte-level tokenizer with a handful of reserved control tokens.

/// Token id type.
pub type TokenId = u32;

/// Literal spelling of the segmentation token inside text.
pub const SEG_LITERAL: &str = "<SEG>";

/// Reserved ids follow the 256 byte values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Special {
    Bos,
    Eos,
    /// Placeholder expanded into image-token rows at embedding time.
    Image,
    /// `<SEG>`: its last-layer state prompts the mask decoder.
    Seg,
    /// Marks the start of the model's answer.
    Answer,
    /// Separates consecutive dialogue turns.
    Turn,
}

impl Special {
    pub const ALL: [Special; 6] = [Special::Bos, Special::Eos, Special::Image, Special::Seg, Special::Answer, Special::Turn];

    pub const fn id(self) -> TokenId {
        256 + self as TokenId
    }

    pub const fn literal(self) -> &'static str {
        match self {
            Special::Bos => "<s>",
            Special::Eos => "</s>",
            Special::Image => "<image>",
            Special::Seg => SEG_LITERAL,
            Special::Answer => "<answer>",
            Special::Turn => "<turn>",
        }
    }
}

/// Maps UTF-8 bytes to ids `0..256`; only `<SEG>` is recognized inside text,
/// every other special token is inserted programmatically.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const VOCAB_SIZE: usize = 256 + Special::ALL.len();

    pub fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(text.len());
        let mut rest = text;
        while let Some(pos) = rest.find(SEG_LITERAL) {
            ids.extend(rest[..pos].bytes().map(TokenId::from));
            ids.push(Special::Seg.id());
            rest = &rest[pos + SEG_LITERAL.len()..];
        }
        ids.extend(rest.bytes().map(TokenId::from));
        ids
    }

    /// Lossy decode: control tokens other than `<SEG>` are dropped, invalid
    /// UTF-8 is replaced.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < 256 {
                bytes.push(id as u8);
            } else if id == Special::Seg.id() {
                bytes.extend_from_slice(SEG_LITERAL.as_bytes());
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id >= 256
    }
}
