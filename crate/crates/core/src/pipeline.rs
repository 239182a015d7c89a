//! End-to-end glue: slot caching, classifier training on frozen slots, OSR
//! scoring and diagnostics over a benchmark.

use serde::{Deserialize, Serialize};

use crate::ans::{
    batch_losses, closed_set_predict, train_heads_with_classes, AnsConfig, ClassifierHeads, ClsTrainConfig,
    EpochLosses, Example, HeadOutput, LabelMode, MaskPolicy, MatchRecord, Method, TAU_MULTI,
};
use crate::checkpoint::Checkpoint;
use crate::bench::{Benchmark, SplitName};
use crate::datagen::{derive_seed, generic_scenes, ClassId, Scene};
use crate::error::{Error, Result};
use crate::eval::{
    closed_set_accuracy, evaluate_scores, fg_slot_set, misalignment_report, DiagnosticImage, MetricResult, MetricRow,
    MisalignmentReport, OsrSplit,
};
use crate::osod::{detect, Detection, MaskSource, OsodConfig};
use crate::scoring::{aggregate, fit_mahalanobis, slot_scores, MahalanobisModel, ScoreMetric, Scheme, MAHALANOBIS_DELTA};
use crate::slot::{continue_pretraining, pretrain, EpochLog, PretrainConfig, SlotModel, SlotModelConfig, SlotSet};

/// Stream tag for per-image slot-initialization noise at inference.
const INFER_STREAM: u64 = 20;

/// Inference noise seed of benchmark image `index`.
pub fn inference_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, INFER_STREAM, index as u64)
}

/// Slot sets for the given scenes, in order.
pub fn encode_scenes<'a>(
    model: &SlotModel,
    scenes: impl IntoIterator<Item = (usize, &'a Scene)>,
    seed: u64,
) -> Result<Vec<SlotSet>> {
    scenes
        .into_iter()
        .map(|(i, s)| model.infer(&s.image_f64(), inference_seed(seed, i)))
        .collect()
}

/// Slot sets for every image of a benchmark, indexed like its entries.
pub fn encode_benchmark(model: &SlotModel, bench: &Benchmark, seed: u64) -> Result<Vec<SlotSet>> {
    encode_scenes(model, bench.scenes.iter().enumerate(), seed)
}

/// Which pretraining stage a progress line belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainStage {
    Generic,
    Known,
}

/// Backbone for a benchmark. With `generic_images > 0` the model first
/// learns on unlabeled scenes over every shape and color, then the slot
/// module and decoder adapt to the known-class training images with the
/// encoder frozen. Otherwise it trains on the known-class images only.
pub fn pretrain_backbone(
    bench: &Benchmark,
    model_config: SlotModelConfig,
    config: &PretrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(PretrainStage, &EpochLog),
) -> Result<SlotModel> {
    let train: Vec<Scene> = bench
        .indices(SplitName::Train)
        .iter()
        .map(|&i| bench.scenes[i].clone())
        .collect();
    if config.generic_images == 0 {
        return pretrain(&train, model_config, config, seed, |l| on_epoch(PretrainStage::Known, l));
    }
    let generic = generic_scenes(config.generic_images, config.generic_max_objects, derive_seed(seed, 21, 0))?;
    let model = pretrain(&generic, model_config, config, seed, |l| on_epoch(PretrainStage::Generic, l))?;
    if config.finetune_epochs == 0 {
        return Ok(model);
    }
    let stage2 = PretrainConfig {
        epochs: config.finetune_epochs,
        freeze_encoder: true,
        ..config.clone()
    };
    continue_pretraining(model, &train, &stage2, derive_seed(seed, 22, 0), |l| {
        on_epoch(PretrainStage::Known, l)
    })
}

/// Maps known class ids to logit columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIndex {
    pub classes: Vec<ClassId>,
}

impl ClassIndex {
    pub fn new(kkc: &[ClassId]) -> Self {
        let mut classes = kkc.to_vec();
        classes.sort_unstable();
        classes.dedup();
        Self { classes }
    }

    pub fn column(&self, c: ClassId) -> Option<usize> {
        self.classes.binary_search(&c).ok()
    }

    pub fn columns(&self, labels: &[ClassId]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&c| {
                self.column(c)
                    .ok_or_else(|| Error::Split(format!("class {c} is not a known class")))
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Classifier heads plus what evaluation needs from training.
#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub heads: ClassifierHeads,
    pub classes: ClassIndex,
    pub method: Method,
    pub ans: AnsConfig,
    /// Last-epoch match record of each training image, in `train` order.
    /// Empty after loading from a checkpoint.
    pub records: Vec<Option<MatchRecord>>,
}

#[derive(Serialize, Deserialize)]
struct HeadsMeta {
    kind: String,
    classes: Vec<ClassId>,
    method: Method,
    ans: AnsConfig,
}

const HEADS_KIND: &str = "openslot.heads";

impl TrainedClassifier {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = HeadsMeta {
            kind: HEADS_KIND.into(),
            classes: self.classes.classes.clone(),
            method: self.method,
            ans: self.ans.clone(),
        };
        Ok(Checkpoint::new(serde_json::to_string(&meta)?, self.heads.params.clone()))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: HeadsMeta = serde_json::from_str(&ck.meta)?;
        if meta.kind != HEADS_KIND {
            return Err(Error::Invalid(format!("checkpoint holds `{}`, not classifier heads", meta.kind)));
        }
        let heads = ClassifierHeads::from_params(&ck.params)?;
        if heads.num_classes != meta.classes.len() {
            return Err(Error::Invalid(format!(
                "heads have {} outputs but {} known classes",
                heads.num_classes,
                meta.classes.len()
            )));
        }
        Ok(Self {
            heads,
            classes: ClassIndex { classes: meta.classes },
            method: meta.method,
            ans: meta.ans,
            records: Vec::new(),
        })
    }

    /// Recomputes match records on `train` with the trained heads (used when
    /// heads come from a checkpoint).
    pub fn rematch(&mut self, bench: &Benchmark, slots: &[SlotSet], train: &[usize]) -> Result<()> {
        let policy = match self.method {
            Method::Ans => MaskPolicy::Ans,
            Method::PureSlot => MaskPolicy::PureSlot,
        };
        let mut records = Vec::with_capacity(train.len());
        for &i in train {
            let labels = self.classes.columns(&bench.entries[i].label_ids)?;
            let ex = Example {
                slots: &slots[i],
                labels: &labels,
            };
            let (_, _, mut r) = batch_losses(&self.heads, &[ex], &self.ans, &policy)?;
            records.push(r.pop());
        }
        self.records = records;
        Ok(())
    }
}

/// Trains heads on the cached slots of `train` images.
pub fn train_classifier(
    bench: &Benchmark,
    slots: &[SlotSet],
    train: &[usize],
    ans: &AnsConfig,
    cls: &ClsTrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochLosses),
) -> Result<TrainedClassifier> {
    let classes = ClassIndex::new(&bench.config.kkc);
    let labels: Vec<Vec<usize>> = train
        .iter()
        .map(|&i| classes.columns(&bench.entries[i].label_ids))
        .collect::<Result<_>>()?;
    let examples: Vec<Example<'_>> = train
        .iter()
        .zip(&labels)
        .map(|(&i, l)| Example {
            slots: &slots[i],
            labels: l,
        })
        .collect();
    let slot_dim = slots
        .first()
        .map(|s| s.slots.cols())
        .ok_or_else(|| Error::Empty("slot cache".into()))?;
    let (heads, records) = train_heads_with_classes(&examples, classes.len(), slot_dim, ans, cls, seed, on_epoch)?;
    Ok(TrainedClassifier {
        heads,
        classes,
        method: cls.method,
        ans: ans.clone(),
        records,
    })
}

/// Class-conditional Gaussians on the slots matched to labels in training.
pub fn fit_mahalanobis_from_records(
    trained: &TrainedClassifier,
    slots: &[SlotSet],
    train: &[usize],
) -> Result<MahalanobisModel> {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (&i, rec) in train.iter().zip(&trained.records) {
        let Some(rec) = rec else { continue };
        for (s, &r) in rec.assignment.perm.iter().enumerate() {
            if let Some(c) = rec.labels.class_of(r) {
                feats.push(slots[i].slots.row(s).to_vec());
                labels.push(c);
            }
        }
    }
    fit_mahalanobis(&feats, &labels, MAHALANOBIS_DELTA)
}

/// How test images are scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub metric: ScoreMetric,
    pub scheme: Scheme,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            metric: ScoreMetric::Energy,
            scheme: Scheme::All,
        }
    }
}

/// Image-level decision scores.
pub fn image_scores(
    heads: &ClassifierHeads,
    slots: &[SlotSet],
    indices: &[usize],
    scoring: &ScoringConfig,
    maha: Option<&MahalanobisModel>,
) -> Result<Vec<f64>> {
    indices
        .iter()
        .map(|&i| {
            let out = heads.forward(&slots[i].slots)?;
            let per_slot = slot_scores(scoring.metric, &out.fg_logits, &slots[i].slots, maha)?;
            Ok(aggregate(&per_slot, scoring.scheme, Some(&out.nz_logits))?.decision)
        })
        .collect()
}

/// H and M results for one scoring configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OsrResult {
    pub h: MetricResult,
    pub m: MetricResult,
}

pub fn evaluate_osr(
    trained: &TrainedClassifier,
    slots: &[SlotSet],
    split: &OsrSplit,
    scoring: &ScoringConfig,
) -> Result<OsrResult> {
    let maha = if scoring.metric == ScoreMetric::Mahalanobis {
        if trained.records.len() != split.train.len() {
            return Err(Error::Invalid("mahalanobis scoring needs training match records".into()));
        }
        Some(fit_mahalanobis_from_records(trained, slots, &split.train)?)
    } else {
        None
    };
    let score = |ix: &[usize]| image_scores(&trained.heads, slots, ix, scoring, maha.as_ref());
    let pos = score(&split.test_known)?;
    Ok(OsrResult {
        h: evaluate_scores(&pos, &score(&split.test_h)?)?,
        m: evaluate_scores(&pos, &score(&split.test_m)?)?,
    })
}

/// Metric table rows for an OSR result.
pub fn metric_rows(benchmark: &str, metric: ScoreMetric, r: &OsrResult) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (set, m) in [("H", &r.h), ("M", &r.m)] {
        for (name, value) in [("auroc", m.auroc), ("fpr95", m.fpr95)] {
            rows.push(MetricRow {
                benchmark: benchmark.to_string(),
                set: set.to_string(),
                metric: format!("{}_{name}", metric.name()),
                value,
            });
        }
    }
    rows
}

/// Misalignment diagnostic on `indices`, FG slots from GT masks.
pub fn misalignment(
    heads: &ClassifierHeads,
    bench: &Benchmark,
    slots: &[SlotSet],
    indices: &[usize],
) -> Result<MisalignmentReport> {
    let outs: Vec<HeadOutput> = indices
        .iter()
        .map(|&i| heads.forward(&slots[i].slots))
        .collect::<Result<_>>()?;
    let images: Vec<DiagnosticImage<'_>> = indices
        .iter()
        .zip(&outs)
        .map(|(&i, o)| {
            let gts: Vec<_> = bench.scenes[i].objects.iter().map(|o| &o.mask).collect();
            DiagnosticImage {
                fg_logits: &o.fg_logits,
                fg_slots: fg_slot_set(&slots[i].attn, slots[i].grid, &gts),
            }
        })
        .collect();
    Ok(misalignment_report(&images))
}

/// Closed-set predictions as class ids.
pub fn predict_classes(trained: &TrainedClassifier, slots: &SlotSet, mode: LabelMode) -> Result<Vec<ClassId>> {
    let out = trained.heads.forward(&slots.slots)?;
    Ok(closed_set_predict(&out.fg_logits, mode, TAU_MULTI)
        .into_iter()
        .map(|k| trained.classes.classes[k])
        .collect())
}

pub fn closed_set_eval(
    trained: &TrainedClassifier,
    bench: &Benchmark,
    slots: &[SlotSet],
    indices: &[usize],
    mode: LabelMode,
) -> Result<f64> {
    let preds: Vec<Vec<ClassId>> = indices
        .iter()
        .map(|&i| predict_classes(trained, &slots[i], mode))
        .collect::<Result<_>>()?;
    let labels: Vec<Vec<ClassId>> = indices.iter().map(|&i| bench.entries[i].label_ids.clone()).collect();
    closed_set_accuracy(&preds, &labels, mode)
}

/// Detections for one slot set; decoder masks come from `model`.
pub fn detect_slots(
    trained: &TrainedClassifier,
    model: &SlotModel,
    slots: &SlotSet,
    image_size: (usize, usize),
    config: &OsodConfig,
) -> Result<Vec<Detection>> {
    let out = trained.heads.forward(&slots.slots)?;
    let decoded;
    let masks = match config.mask_source {
        MaskSource::Attention => &slots.attn,
        MaskSource::Decoder => {
            decoded = model.decode(slots)?;
            &decoded.alpha
        }
    };
    Ok(detect(masks, slots.grid, &out, &trained.classes.classes, image_size, config))
}
