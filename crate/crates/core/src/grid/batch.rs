use super::tile::binarize_mask;
use crate::diffusion::{Conditioning, Latent, LatentMask};
use crate::error::{Error, Result};

/// Latents of several views prepared for joint sampling.
///
/// `latents[i]` holds the current content of view `i` (known region plus
/// whatever fills the unknown region); `conds[i]` holds its known content
/// with the unknown region zeroed. Masks are binary, 1 = known.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub latents: Vec<Latent>,
    pub masks: Vec<LatentMask>,
    pub conds: Vec<Conditioning>,
    /// Dataset index of each entry.
    pub view_ids: Vec<usize>,
    /// Entries appended by padding; their outputs are discarded.
    pub padded: Vec<bool>,
}

impl LatentBatch {
    /// Binarizes the masks and builds per-view conditioning.
    pub fn new(latents: Vec<Latent>, masks: Vec<LatentMask>, view_ids: Vec<usize>) -> Result<Self> {
        if latents.is_empty() {
            return Err(Error::invalid("batch must hold at least one view"));
        }
        if masks.len() != latents.len() || view_ids.len() != latents.len() {
            return Err(Error::shape(format!(
                "batch has {} latents, {} masks, {} view ids",
                latents.len(),
                masks.len(),
                view_ids.len()
            )));
        }
        let shape = latents[0].dim();
        if let Some(l) = latents.iter().find(|l| l.dim() != shape) {
            return Err(Error::shape(format!(
                "batch latents differ in shape: {shape:?} vs {:?}",
                l.dim()
            )));
        }
        let masks: Vec<LatentMask> = masks.iter().map(binarize_mask).collect();
        let conds = latents
            .iter()
            .zip(&masks)
            .map(|(l, m)| Conditioning::from_known(l, m))
            .collect::<Result<Vec<_>>>()?;
        let n = latents.len();
        Ok(Self {
            latents,
            masks,
            conds,
            view_ids,
            padded: vec![false; n],
        })
    }

    /// Sets the text prompt on every entry.
    pub fn with_text(mut self, text: Option<String>) -> Self {
        for c in &mut self.conds {
            c.text = text.clone();
        }
        self
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn latent_dim(&self) -> (usize, usize, usize) {
        self.latents[0].dim()
    }

    pub fn num_original(&self) -> usize {
        self.padded.iter().filter(|p| !**p).count()
    }

    /// Marks entry `i` fully known.
    pub(crate) fn force_known(&mut self, i: usize) -> Result<()> {
        let (h, w, _) = self.latent_dim();
        self.masks[i] = LatentMask::ones((h, w));
        let text = self.conds[i].text.clone();
        self.conds[i] = Conditioning::from_known(&self.latents[i], &self.masks[i])?.with_text(text);
        Ok(())
    }

    /// Appends fully known copies of existing entries (cycling from the
    /// first) until the batch holds `len` entries.
    pub(crate) fn pad_to(mut self, len: usize) -> Result<Self> {
        let original = self.len();
        let mut k = 0;
        while self.len() < len {
            let src = k % original;
            self.latents.push(self.latents[src].clone());
            self.masks.push(self.masks[src].clone());
            self.conds.push(self.conds[src].clone());
            self.view_ids.push(self.view_ids[src]);
            self.padded.push(true);
            let i = self.len() - 1;
            self.force_known(i)?;
            k += 1;
        }
        Ok(self)
    }
}

/// Pads `batch` with fully known copies of its views until its size is a
/// multiple of `multiple`.
pub fn known_padding(batch: LatentBatch, multiple: usize) -> Result<LatentBatch> {
    if multiple == 0 {
        return Err(Error::invalid("padding multiple must be >= 1"));
    }
    if batch.is_empty() {
        return Err(Error::invalid("cannot pad an empty batch"));
    }
    let n = batch.len();
    let target = n.div_ceil(multiple) * multiple;
    batch.pad_to(target)
}
