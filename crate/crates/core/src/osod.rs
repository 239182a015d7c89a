//! Open-set object detection from slot attention maps.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ans::{min_max_normalize, HeadOutput};
use crate::datagen::ClassId;
use crate::error::Result;
use crate::eval::{auroc, slot_region};
use crate::geometry::BBox;
use crate::scoring::{score_energy, ENERGY_T};
use crate::tensor::Tensor;

/// Which per-slot map becomes the object mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    /// Slot-attention weights of the last iteration.
    Attention,
    /// Decoder mixing weights.
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsodConfig {
    pub mask_source: MaskSource,
    /// Slots whose normalized noise logit is below this are foreground.
    pub fg_threshold: f64,
    /// Normalized attention above this belongs to the slot's mask.
    pub binarize: f64,
    /// Smallest accepted component, in image pixels.
    pub min_pixels: usize,
    /// Energy above this is a known object.
    pub energy_threshold: f64,
}

impl Default for OsodConfig {
    fn default() -> Self {
        Self {
            mask_source: MaskSource::Decoder,
            fg_threshold: 0.75,
            binarize: 0.5,
            min_pixels: 40,
            energy_threshold: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetLabel {
    Known(ClassId),
    Unknown,
}

impl fmt::Display for DetLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetLabel::Known(c) => write!(f, "{c}"),
            DetLabel::Unknown => f.write_str("unknown"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub label: DetLabel,
    pub score: f64,
    pub slot_index: usize,
}

/// Min-max normalized noise logits; all-equal logits map to zeros.
pub fn normalized_noise(nz_logits: &[f64]) -> Vec<f64> {
    min_max_normalize(nz_logits).unwrap_or_else(|| vec![0.0; nz_logits.len()])
}

/// Indices whose normalized noise value is below `threshold`.
pub fn select_fg_slots(normalized_nz: &[f64], threshold: f64) -> Vec<usize> {
    (0..normalized_nz.len()).filter(|&i| normalized_nz[i] < threshold).collect()
}

/// Tight box of the largest 4-connected component of the binarized,
/// upsampled map, if it has at least `min_pixels` pixels.
pub fn mask_to_box(
    map: &[f64],
    grid: (usize, usize),
    image_size: (usize, usize),
    binarize: f64,
    min_pixels: usize,
) -> Option<BBox> {
    let (w, h) = image_size;
    let region = slot_region(map, grid, w, h, binarize);
    let comp = region.largest_component();
    if comp.count() < min_pixels.max(1) {
        return None;
    }
    comp.bbox()
}

/// Detections for one image from `N x P` slot masks on `grid`.
/// `class_ids[k]` is the class of logit column `k`.
pub fn detect(
    masks: &Tensor,
    grid: (usize, usize),
    heads: &HeadOutput,
    class_ids: &[ClassId],
    image_size: (usize, usize),
    config: &OsodConfig,
) -> Vec<Detection> {
    let nz = normalized_noise(&heads.nz_logits);
    let mut out = Vec::new();
    for i in select_fg_slots(&nz, config.fg_threshold) {
        let Some(bbox) = mask_to_box(masks.row(i), grid, image_size, config.binarize, config.min_pixels) else {
            continue;
        };
        let logits = heads.fg_logits.row(i);
        let score = score_energy(logits, ENERGY_T);
        let label = if score > config.energy_threshold {
            let k = (0..logits.len())
                .fold(0, |b, k| if logits[k] > logits[b] { k } else { b });
            DetLabel::Known(class_ids[k])
        } else {
            DetLabel::Unknown
        };
        out.push(Detection {
            bbox,
            label,
            score,
            slot_index: i,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    /// Unknown GT boxes matched by an UNKNOWN detection, over unknown GT boxes.
    pub unknown_recall: f64,
    /// Known-labeled detections matched to a known GT box, over known-labeled
    /// detections.
    pub known_precision: f64,
    /// AUROC of matched detection scores, known GT as positives.
    pub auroc_over_boxscores: Option<f64>,
}

/// Greedy matching: detections by descending score (ties by slot index),
/// each takes the unmatched GT box of highest IoU at or above `iou_thresh`.
/// Returns the matched GT index per detection.
pub fn greedy_match(dets: &[Detection], gt_boxes: &[BBox], iou_thresh: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].slot_index.cmp(&dets[b].slot_index))
    });
    let mut taken = vec![false; gt_boxes.len()];
    let mut matched = vec![None; dets.len()];
    for d in order {
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gt_boxes.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = dets[d].bbox.iou(gt);
            if iou >= iou_thresh && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, g));
            }
        }
        if let Some((_, g)) = best {
            taken[g] = true;
            matched[d] = Some(g);
        }
    }
    matched
}

pub fn detection_eval(
    dets: &[Detection],
    gt_boxes: &[BBox],
    gt_known: &[bool],
    iou_thresh: f64,
) -> Result<DetectionMetrics> {
    let m = greedy_match(dets, gt_boxes, iou_thresh);
    Ok(metrics_from_matches(dets, &m, gt_known))
}

fn metrics_from_matches(dets: &[Detection], m: &[Option<usize>], gt_known: &[bool]) -> DetectionMetrics {
    let n_unknown = gt_known.iter().filter(|k| !**k).count();
    let unknown_hits = dets
        .iter()
        .zip(m)
        .filter(|(d, g)| d.label == DetLabel::Unknown && g.is_some_and(|g| !gt_known[g]))
        .count();
    let known_dets: Vec<_> = dets.iter().zip(m).filter(|(d, _)| d.label != DetLabel::Unknown).collect();
    let known_hits = known_dets.iter().filter(|(_, g)| g.is_some_and(|g| gt_known[g])).count();
    let pos: Vec<f64> = dets.iter().zip(m).filter(|(_, g)| g.is_some_and(|g| gt_known[g])).map(|(d, _)| d.score).collect();
    let neg: Vec<f64> = dets.iter().zip(m).filter(|(_, g)| g.is_some_and(|g| !gt_known[g])).map(|(d, _)| d.score).collect();
    let ratio = |a: usize, b: usize, empty: f64| if b == 0 { empty } else { a as f64 / b as f64 };
    DetectionMetrics {
        unknown_recall: ratio(unknown_hits, n_unknown, 0.0),
        known_precision: ratio(known_hits, known_dets.len(), 0.0),
        auroc_over_boxscores: auroc(&pos, &neg).ok(),
    }
}

/// Pools detections over many images before computing the metrics.
pub fn detection_eval_many(
    scenes: &[(Vec<Detection>, Vec<BBox>, Vec<bool>)],
    iou_thresh: f64,
) -> DetectionMetrics {
    let (mut uh, mut un, mut kh, mut kn) = (0usize, 0usize, 0usize, 0usize);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (dets, boxes, known) in scenes {
        let m = greedy_match(dets, boxes, iou_thresh);
        un += known.iter().filter(|k| !**k).count();
        for (d, g) in dets.iter().zip(&m) {
            let is_unknown = d.label == DetLabel::Unknown;
            if is_unknown && g.is_some_and(|g| !known[g]) {
                uh += 1;
            }
            if !is_unknown {
                kn += 1;
                if g.is_some_and(|g| known[g]) {
                    kh += 1;
                }
            }
            match g {
                Some(g) if known[*g] => pos.push(d.score),
                Some(_) => neg.push(d.score),
                None => {}
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    DetectionMetrics {
        unknown_recall: ratio(uh, un),
        known_precision: ratio(kh, kn),
        auroc_over_boxscores: auroc(&pos, &neg).ok(),
    }
}
