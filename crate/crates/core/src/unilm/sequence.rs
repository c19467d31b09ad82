use std::ops::Range;

use crate::dualvitok::TokenizerOutput;
use crate::error::{domain, Result};
use crate::seqcodec::{serialize, VocabLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureBranch {
    Semantic,
    Pixel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Element {
    /// Text, marker, indicator or (in discrete mode) image id.
    Id(u32),
    /// An image position carrying its continuous feature and its code id.
    Feature {
        id: u32,
        branch: FeatureBranch,
        vector: Vec<f32>,
    },
}

impl Element {
    pub fn id(&self) -> u32 {
        match self {
            Element::Id(id) => *id,
            Element::Feature { id, .. } => *id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSequence {
    pub elements: Vec<Element>,
    /// Whether the id at each position is a training target.
    pub loss_mask: Vec<bool>,
    /// Positions replaced by the mask token in the unconditional context.
    pub cond_span: Range<usize>,
}

impl MultimodalSequence {
    pub fn from_ids(ids: &[u32], supervised: bool) -> Self {
        Self {
            elements: ids.iter().map(|&i| Element::Id(i)).collect(),
            loss_mask: vec![supervised; ids.len()],
            cond_span: 0..0,
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.elements.iter().map(Element::id).collect()
    }

    pub fn push(&mut self, el: Element, supervised: bool) {
        self.elements.push(el);
        self.loss_mask.push(supervised);
    }

    pub fn extend(&mut self, els: Vec<Element>, supervised: bool) {
        self.loss_mask.extend(std::iter::repeat_n(supervised, els.len()));
        self.elements.extend(els);
    }

    /// The unconditional counterpart: every position of `cond_span` becomes
    /// `mask_id` and is not supervised.
    pub fn unconditional(&self, mask_id: u32) -> Self {
        let mut out = self.clone();
        for i in self.cond_span.clone() {
            out.elements[i] = Element::Id(mask_id);
            out.loss_mask[i] = false;
        }
        out
    }
}

/// Grammar-ordered elements of one tokenized image; code positions carry
/// their pre-quantization features.
pub fn image_elements(out: &TokenizerOutput, layout: &VocabLayout) -> Result<Vec<Element>> {
    let block = out.to_block()?;
    let ids = serialize(&block, layout)?;
    let sem = &out.sem()?.features;
    let pix = &out.pix()?.features;
    let mut sem_iter = sem.vectors();
    let mut pix_iter = pix.vectors();
    ids.into_iter()
        .map(|id| {
            if layout.is_sem_code(id) {
                let v = sem_iter.next();
                v.map(|v| Element::Feature {
                    id,
                    branch: FeatureBranch::Semantic,
                    vector: v.to_vec(),
                })
            } else if layout.is_pix_code(id) {
                pix_iter.next().map(|v| Element::Feature {
                    id,
                    branch: FeatureBranch::Pixel,
                    vector: v.to_vec(),
                })
            } else {
                Some(Element::Id(id))
            }
            .map_or_else(|| domain("feature grid shorter than index grid"), Ok)
        })
        .collect()
}

/// Prompt text followed by the image; only the image is supervised.
pub fn text_to_image_sequence(
    prompt: &[u32],
    image: &TokenizerOutput,
    layout: &VocabLayout,
) -> Result<MultimodalSequence> {
    if let Some(&bad) = prompt.iter().find(|&&id| id >= layout.text_vocab) {
        return domain(format!("prompt id {bad} is not a text id"));
    }
    let mut seq = MultimodalSequence::from_ids(prompt, false);
    seq.cond_span = 0..prompt.len();
    seq.extend(image_elements(image, layout)?, true);
    Ok(seq)
}

/// An image predicting its own tokens from its features.
pub fn reconstruction_sequence(image: &TokenizerOutput, layout: &VocabLayout) -> Result<MultimodalSequence> {
    let mut seq = MultimodalSequence::from_ids(&[], true);
    seq.extend(image_elements(image, layout)?, true);
    Ok(seq)
}

/// Source image, instruction, then the supervised target image.
pub fn edit_sequence(
    source: &TokenizerOutput,
    instruction: &[u32],
    target: Option<&TokenizerOutput>,
    layout: &VocabLayout,
) -> Result<MultimodalSequence> {
    if let Some(&bad) = instruction.iter().find(|&&id| id >= layout.text_vocab) {
        return domain(format!("instruction id {bad} is not a text id"));
    }
    let mut seq = MultimodalSequence::from_ids(&[], false);
    seq.extend(image_elements(source, layout)?, false);
    let start = seq.len();
    seq.extend(instruction.iter().map(|&i| Element::Id(i)).collect(), false);
    seq.cond_span = start..seq.len();
    if let Some(t) = target {
        seq.extend(image_elements(t, layout)?, true);
    }
    Ok(seq)
}
