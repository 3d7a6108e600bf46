use rayon::prelude::*;

use super::data::Dataset;
use crate::error::{Error, Result};
use crate::imaging::{Image, MaskMap};
use crate::metrics::{aggregate, evaluate_pair, EvalReport, DEFAULT_IOU_THRESHOLDS};
use crate::segmenter::Segmenter;
use crate::tiling::{margin_stride, plan_tiles, stitch, ProbMap};

/// Tiled inference: overlapping `patch`-sized tiles spaced `patch - margin`
/// apart, softmax per tile, averaged where tiles overlap. Images smaller
/// than a patch are edge-padded first and the result cropped back.
pub fn infer<S: Segmenter + Sync>(
    net: &S,
    image: &Image,
    patch: usize,
    margin: usize,
) -> Result<(MaskMap, ProbMap)> {
    if margin >= patch {
        return Err(Error::Config(format!("margin {margin} must be smaller than patch {patch}")));
    }
    if image.channels() != net.in_channels() {
        return Err(Error::Shape(format!(
            "network expects {} channels, image has {}",
            net.in_channels(),
            image.channels()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let (ph, pw) = (h.max(patch), w.max(patch));
    let padded = if (ph, pw) == (h, w) {
        None
    } else {
        Some(image.pad_edge(ph, pw))
    };
    let src = padded.as_ref().unwrap_or(image);

    let plan = plan_tiles(ph, pw, patch, margin_stride(patch, margin))?;
    let tiles = plan
        .rects
        .par_iter()
        .map(|rect| {
            let logits = net.forward(&src.crop(rect)?)?;
            Ok((*rect, logits.to_probs()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut probs = stitch(&tiles, ph, pw, net.classes())?;
    if padded.is_some() {
        probs = probs.crop(0, 0, h, w);
    }
    Ok((probs.argmax(), probs))
}

/// Runs tiled inference on every sample and scores it against its mask.
pub fn evaluate<S: Segmenter + Sync>(
    net: &S,
    dataset: &Dataset,
    patch: usize,
    margin: usize,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset has no samples".into()));
    }
    let records = dataset
        .samples
        .par_iter()
        .map(|s| {
            let (pred, _) = infer(net, &s.image, patch, margin)?;
            evaluate_pair(s.id.clone(), &pred, &s.mask)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(records, &DEFAULT_IOU_THRESHOLDS)
}
