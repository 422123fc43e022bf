use crate::error::{Error, Result};
use crate::nn::{Segment, Tensor};
use crate::projector::IdTokenBlock;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenTag {
    Text,
    Id(usize),
}

/// Text tokens followed by one ID token block per identity.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedEmbedding {
    /// `[L + N * M, d_text]`.
    pub tokens: Tensor<f32>,
    pub tags: Vec<TokenTag>,
}

impl ExtendedEmbedding {
    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Row range of the text tokens or of identity `i`'s block.
    pub fn segment(&self, tag: TokenTag) -> Option<Segment> {
        let start = self.tags.iter().position(|&t| t == tag)?;
        let len = self.tags[start..].iter().take_while(|&&t| t == tag).count();
        Some(Segment::new(start, len))
    }

    pub fn rows(&self, seg: Segment) -> &[f32] {
        let d = self.width();
        &self.tokens.data()[seg.start * d..(seg.start + seg.len) * d]
    }
}

/// `[c_t, w_0, ..., w_{N-1}]` with a per-row tag map.
pub fn extend_embeddings(text: &Tensor<f32>, blocks: &[IdTokenBlock]) -> Result<ExtendedEmbedding> {
    if text.shape().len() != 2 {
        return Err(Error::Shape(format!("text embedding must be 2-d, got {:?}", text.shape())));
    }
    let (l, d) = (text.shape()[0], text.shape()[1]);
    let mut data = text.data().to_vec();
    let mut tags = vec![TokenTag::Text; l];
    for (i, b) in blocks.iter().enumerate() {
        let s = b.tokens.shape();
        if s.len() != 2 || s[1] != d {
            return Err(Error::Shape(format!("ID block {i} has shape {s:?}, text width is {d}")));
        }
        data.extend_from_slice(b.tokens.data());
        tags.extend(std::iter::repeat(TokenTag::Id(i)).take(s[0]));
    }
    Ok(ExtendedEmbedding { tokens: Tensor::new([tags.len(), d], data), tags })
}
