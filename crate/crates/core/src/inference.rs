//! Captioning and attention inspection of whole datasets under a fixed grouping.

use crate::corpus::Dataset;
use crate::gma::GmaResult;
use crate::grouping::{GroupIndex, SimilarImageGroup};
use crate::metrics::CaptionLine;
use crate::model::Captioner;
use crate::{Error, Result};

/// Decoder memory and attention of one image within its evaluation group.
pub fn image_memory(
    model: &Captioner,
    dataset: &Dataset,
    groups: &[SimilarImageGroup],
    index: &GroupIndex,
    image_id: &str,
) -> Result<(groupcap_tensor::Tensor, Option<GmaResult>)> {
    let (gi, target) = index
        .locate(image_id)
        .ok_or_else(|| Error::Grouping(format!("image `{image_id}` is in no group")))?;
    let features = groups[gi]
        .members
        .iter()
        .map(|m| {
            dataset
                .get(m)
                .map(|r| &r.features)
                .ok_or_else(|| Error::load(m, "members", "group member not in the dataset"))
        })
        .collect::<Result<Vec<_>>>()?;
    model.group_memory(&features, target)
}

/// Captions every dataset image; `beam` of 1 is greedy decoding.
pub fn caption_dataset(
    model: &Captioner,
    dataset: &Dataset,
    groups: &[SimilarImageGroup],
    beam: usize,
) -> Result<Vec<CaptionLine>> {
    let index = GroupIndex::new(groups);
    dataset
        .records
        .iter()
        .map(|r| {
            let (memory, _) = image_memory(model, dataset, groups, &index, &r.image_id)?;
            let decoded = if beam <= 1 {
                model.greedy_decode(&memory)?
            } else {
                model.beam_decode(&memory, beam)?
            };
            let tokens = dataset.vocab.decode(&decoded.tokens);
            Ok(CaptionLine {
                image_id: r.image_id.clone(),
                caption: tokens.join(" "),
                tokens,
                empty: decoded.is_empty(),
            })
        })
        .collect()
}

/// Attention results for every image, in dataset order. Requires a model
/// with group attention enabled.
pub fn attention_dataset(model: &Captioner, dataset: &Dataset, groups: &[SimilarImageGroup]) -> Result<Vec<GmaResult>> {
    let index = GroupIndex::new(groups);
    dataset
        .records
        .iter()
        .map(|r| {
            image_memory(model, dataset, groups, &index, &r.image_id)?
                .1
                .ok_or_else(|| Error::Config("model was built without memory attention".into()))
        })
        .collect()
}
