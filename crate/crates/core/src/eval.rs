//! Open-set splits, threshold-free metrics and slot diagnostics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ans::{max_logit_slot, min_max_normalize, LabelMode};
use crate::bench::{ManifestEntry, SplitName};
use crate::datagen::ClassId;
use crate::error::{Error, Result};
use crate::geometry::Mask;
use crate::tensor::Tensor;

/// Indices into a pool of labeled images, routed by label space.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OsrSplit {
    pub train: Vec<usize>,
    pub test_known: Vec<usize>,
    pub test_h: Vec<usize>,
    pub test_m: Vec<usize>,
}

/// Routes every entry by its labels: training-partition images that are
/// KKC-only go to `train` (one-label images only in single mode); test
/// images go to known / H / M by label space. Test images carrying classes
/// outside both sets are rejected.
pub fn build_osr_splits(
    entries: &[ManifestEntry],
    kkc: &[ClassId],
    uuc: &[ClassId],
    mode: LabelMode,
) -> Result<OsrSplit> {
    if let Some(c) = kkc.iter().find(|c| uuc.contains(c)) {
        return Err(Error::Split(format!("class {c} is both known and unknown")));
    }
    let mut s = OsrSplit::default();
    for (i, e) in entries.iter().enumerate() {
        let l = &e.label_ids;
        let all_known = !l.is_empty() && l.iter().all(|c| kkc.contains(c));
        let all_unknown = !l.is_empty() && l.iter().all(|c| uuc.contains(c));
        if e.split == SplitName::Train {
            if all_known && (mode == LabelMode::Multi || l.len() == 1) {
                s.train.push(i);
            }
            continue;
        }
        let target = if all_known {
            SplitName::TestKnown
        } else if all_unknown {
            SplitName::TestH
        } else if l.iter().any(|c| kkc.contains(c)) && l.iter().any(|c| uuc.contains(c)) && l.iter().all(|c| kkc.contains(c) || uuc.contains(c)) {
            SplitName::TestM
        } else {
            return Err(Error::Split(format!(
                "test image {} has labels {l:?} outside the class split",
                e.id
            )));
        };
        if target != e.split {
            return Err(Error::Split(format!(
                "image {} is stored in {} but its labels {l:?} belong in {}",
                e.id,
                e.split.dir_name(),
                target.dir_name()
            )));
        }
        match target {
            SplitName::TestKnown => s.test_known.push(i),
            SplitName::TestH => s.test_h.push(i),
            _ => s.test_m.push(i),
        }
    }
    for (name, v) in [
        ("train", &s.train),
        ("test_known", &s.test_known),
        ("test_H", &s.test_h),
        ("test_M", &s.test_m),
    ] {
        if v.is_empty() {
            return Err(Error::Split(format!("split `{name}` is empty")));
        }
    }
    Ok(s)
}

fn check_scores(pos: &[f64], neg: &[f64], what: &str) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Empty(format!(
            "{what}: {} positive and {} negative scores",
            pos.len(),
            neg.len()
        )));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("{what}: NaN score")));
    }
    Ok(())
}

/// Area under the ROC curve with positives = known. Ties count one half.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, neg, "auroc")?;
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann-Whitney: count (pos > neg) + 0.5 (pos == neg) in one sweep over
    // tie groups.
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let p = all[i..j].iter().filter(|x| x.1).count();
        let n = j - i - p;
        wins += p as f64 * (neg_below as f64 + 0.5 * n as f64);
        neg_below += n;
        i = j;
    }
    Ok(wins / (pos.len() as f64 * neg.len() as f64))
}

/// False-positive rate at the largest threshold that still accepts at least
/// 95% of positives (`score >= threshold` means accepted).
pub fn fpr_at_95_tpr(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, neg, "fpr_at_95_tpr")?;
    let mut p = pos.to_vec();
    p.sort_by(|a, b| b.total_cmp(a));
    let need = (95 * p.len()).div_ceil(100);
    let tau = p[need - 1];
    let fp = neg.iter().filter(|&&v| v >= tau).count();
    Ok(fp as f64 / neg.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub auroc: f64,
    pub fpr95: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub fn evaluate_scores(pos: &[f64], neg: &[f64]) -> Result<MetricResult> {
    Ok(MetricResult {
        auroc: auroc(pos, neg)?,
        fpr95: fpr_at_95_tpr(pos, neg)?,
        n_pos: pos.len(),
        n_neg: neg.len(),
    })
}

/// Binarized region of one slot: min-max normalized map `> threshold`,
/// upsampled to `width x height` by nearest neighbour. Degenerate maps give
/// an empty region.
pub fn slot_region(map: &[f64], grid: (usize, usize), width: usize, height: usize, threshold: f64) -> Mask {
    let (gh, gw) = grid;
    let mut m = Mask::new(width, height);
    let Some(norm) = min_max_normalize(map) else {
        return m;
    };
    for y in 0..height {
        let gy = y * gh / height;
        for x in 0..width {
            let gx = x * gw / width;
            if norm[gy * gw + gx] > threshold {
                m.set(x, y, true);
            }
        }
    }
    m
}

/// FG slot for one GT mask: highest region IoU, ties to the lowest index.
/// `None` when every slot region is empty.
pub fn label_slots_fg_noise(attn: &Tensor, grid: (usize, usize), gt: &Mask) -> Option<(usize, Vec<usize>)> {
    let regions: Vec<Mask> = (0..attn.rows())
        .map(|i| slot_region(attn.row(i), grid, gt.width, gt.height, 0.5))
        .collect();
    if regions.iter().all(|r| r.count() == 0) {
        log::warn!("all slot regions empty; image excluded from the diagnostic");
        return None;
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, r) in regions.iter().enumerate() {
        let iou = r.iou(gt);
        if iou > best.0 {
            best = (iou, i);
        }
    }
    let noise = (0..attn.rows()).filter(|&i| i != best.1).collect();
    Some((best.1, noise))
}

/// FG slots of a multi-object image: the FG slot of each GT mask.
pub fn fg_slot_set(attn: &Tensor, grid: (usize, usize), gts: &[&Mask]) -> Option<Vec<usize>> {
    let mut fg = Vec::new();
    for gt in gts {
        let (i, _) = label_slots_fg_noise(attn, grid, gt)?;
        if !fg.contains(&i) {
            fg.push(i);
        }
    }
    fg.sort_unstable();
    Some(fg)
}

/// Inputs of the misalignment diagnostic for one image.
#[derive(Debug, Clone)]
pub struct DiagnosticImage<'a> {
    pub fg_logits: &'a Tensor,
    /// FG slots from GT overlap; `None` excludes the image.
    pub fg_slots: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisalignmentReport {
    /// Fraction of images whose max-logit slot is an FG slot.
    pub fg_rate_of_maxlogit_slot: f64,
    /// Per-image min-max normalized logit L2 norms, averaged per group.
    pub mean_logit_norm_fg: f64,
    pub mean_logit_norm_noise: f64,
    pub images: usize,
}

pub fn misalignment_report(images: &[DiagnosticImage<'_>]) -> MisalignmentReport {
    let mut hits = 0usize;
    let mut used = 0usize;
    let (mut fg_sum, mut fg_n, mut nz_sum, mut nz_n) = (0.0, 0usize, 0.0, 0usize);
    for img in images {
        let Some(fg) = &img.fg_slots else { continue };
        used += 1;
        if fg.contains(&max_logit_slot(img.fg_logits)) {
            hits += 1;
        }
        let norms: Vec<f64> = (0..img.fg_logits.rows())
            .map(|i| img.fg_logits.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let norm = min_max_normalize(&norms).unwrap_or_else(|| vec![0.0; norms.len()]);
        for (i, v) in norm.into_iter().enumerate() {
            if fg.contains(&i) {
                fg_sum += v;
                fg_n += 1;
            } else {
                nz_sum += v;
                nz_n += 1;
            }
        }
    }
    let div = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
    MisalignmentReport {
        fg_rate_of_maxlogit_slot: div(hits as f64, used),
        mean_logit_norm_fg: div(fg_sum, fg_n),
        mean_logit_norm_noise: div(nz_sum, nz_n),
        images: used,
    }
}

/// Single: the top prediction is one of the image's labels. Multi: the
/// predicted set equals the label set.
pub fn closed_set_accuracy(predictions: &[Vec<ClassId>], labels: &[Vec<ClassId>], mode: LabelMode) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "closed_set_accuracy: {} predictions vs {} label sets",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| match mode {
            LabelMode::Single => p.first().is_some_and(|c| l.contains(c)),
            LabelMode::Multi => {
                let mut a = (*p).clone();
                let mut b = (*l).clone();
                a.sort_unstable();
                b.sort_unstable();
                a == b
            }
        })
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

pub const METRICS_SCHEMA: &str = "openslot.metrics/1";

/// One row of the metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub benchmark: String,
    pub set: String,
    pub metric: String,
    pub value: f64,
}

/// CSV with a leading schema comment. Values use Rust's shortest round-trip
/// formatting, so equal inputs give identical bytes.
pub fn write_metrics_csv(rows: &[MetricRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "# schema={METRICS_SCHEMA}")?;
    writeln!(out, "benchmark,set,metric,value")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.benchmark, r.set, r.metric, r.value)?;
    }
    Ok(())
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    let bad = |d: String| Error::Format {
        path: "<metrics>".into(),
        what: "metrics csv",
        detail: d,
    };
    match lines.next() {
        Some(l) if l == format!("# schema={METRICS_SCHEMA}") => {}
        other => return Err(bad(format!("missing schema line, found {other:?}"))),
    }
    if lines.next() != Some("benchmark,set,metric,value") {
        return Err(bad("missing header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("row `{l}` has {} fields", f.len())));
            }
            Ok(MetricRow {
                benchmark: f[0].into(),
                set: f[1].into(),
                metric: f[2].into(),
                value: f[3].parse().map_err(|_| bad(format!("bad value in `{l}`")))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0; 5], &[1.0; 7]).unwrap(), 0.5);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_95_tpr(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let f = fpr_at_95_tpr(&s, &s).unwrap();
        assert!((f - 0.95).abs() < 0.01);
        assert!(fpr_at_95_tpr(&[1.0], &[]).is_err());
    }

    #[test]
    fn fg_labeling() {
        let mut attn = Tensor::full(&[3, 4], 0.1);
        // slot 1 owns the top row of a 2x2 grid
        attn.data_mut()[4] = 0.9;
        attn.data_mut()[5] = 0.9;
        let mut gt = Mask::new(8, 8);
        for y in 0..4 {
            for x in 0..8 {
                gt.set(x, y, true);
            }
        }
        let (fg, noise) = label_slots_fg_noise(&attn, (2, 2), &gt).unwrap();
        assert_eq!(fg, 1);
        assert_eq!(noise, vec![0, 2]);
        let flat = Tensor::full(&[2, 4], 0.5);
        assert!(label_slots_fg_noise(&flat, (2, 2), &gt).is_none());
    }

    #[test]
    fn accuracy_rules() {
        let p = vec![vec![1], vec![2]];
        let l = vec![vec![1, 3], vec![0]];
        assert_eq!(closed_set_accuracy(&p, &l, LabelMode::Single).unwrap(), 0.5);
        assert_eq!(closed_set_accuracy(&l, &l, LabelMode::Multi).unwrap(), 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![MetricRow {
            benchmark: "synthetic".into(),
            set: "H".into(),
            metric: "auroc".into(),
            value: 0.8125,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_metrics_csv(std::str::from_utf8(&buf).unwrap()).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn auroc_swap_and_monotone(
            pos in prop::collection::vec(-5i32..5, 1..30),
            neg in prop::collection::vec(-5i32..5, 1..30),
        ) {
            let p: Vec<f64> = pos.iter().map(|&v| v as f64).collect();
            let n: Vec<f64> = neg.iter().map(|&v| v as f64).collect();
            let a = auroc(&p, &n).unwrap();
            let b = auroc(&n, &p).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
            let tp: Vec<f64> = p.iter().map(|v| (v * 0.3).exp()).collect();
            let tn: Vec<f64> = n.iter().map(|v| (v * 0.3).exp()).collect();
            prop_assert!((auroc(&tp, &tn).unwrap() - a).abs() < 1e-12);
        }
    }
}
