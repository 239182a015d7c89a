//! Anti-noise-slot classification training.
//!
//! Two heads read frozen slot vectors: `fg` predicts class logits and `nz`
//! predicts how likely a slot is noise (invalid or background). Noise slots
//! get their matching cost multiplied by `lambda_match`, so the Hungarian
//! assignment routes true labels to foreground slots.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::derive_seed;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss;
use crate::matching::{hungarian, Assignment, CostMatrix};
use crate::nn::{Mlp, ParamStore};
use crate::optim::{LrSchedule, OptimizerState};
use crate::slot::SlotSet;
use crate::tensor::{logsumexp_slice, Tensor};

/// What a slot matched to a null row is trained towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NullTarget {
    /// The all-zero row: null pairs cost nothing and add no loss.
    #[default]
    Zero,
    /// Uniform over the known classes.
    Uniform,
}

/// Label rows padded with nulls up to the slot count.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedLabelSet {
    /// `N x K`; one-hot rows for labels, zero rows for nulls.
    pub rows: Tensor,
    pub null_rows: Vec<bool>,
    pub null_target: NullTarget,
}

impl PaddedLabelSet {
    /// Labels are sorted and deduplicated, then followed by null rows.
    pub fn new(labels: &[usize], num_slots: usize, num_classes: usize) -> Result<Self> {
        let mut labels = labels.to_vec();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() > num_slots {
            return Err(Error::Invalid(format!(
                "{} labels do not fit in {num_slots} slots",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Invalid(format!(
                "label {bad} outside {num_classes} known classes"
            )));
        }
        let mut rows = Tensor::zeros(&[num_slots, num_classes]);
        for (r, &c) in labels.iter().enumerate() {
            rows.data_mut()[r * num_classes + c] = 1.0;
        }
        let null_rows = (0..num_slots).map(|r| r >= labels.len()).collect();
        Ok(Self {
            rows,
            null_rows,
            null_target: NullTarget::default(),
        })
    }

    pub fn with_null_target(mut self, t: NullTarget) -> Self {
        self.null_target = t;
        self
    }

    pub fn num_labels(&self) -> usize {
        self.null_rows.iter().filter(|n| !**n).count()
    }

    /// Class of row `r`, or `None` for a null row.
    pub fn class_of(&self, r: usize) -> Option<usize> {
        if self.null_rows[r] {
            return None;
        }
        self.rows.row(r).iter().position(|&v| v == 1.0)
    }

    /// Training target of row `r`: its one-hot, or the null target.
    pub fn target_row(&self, r: usize) -> Vec<f64> {
        let k = self.rows.cols();
        if self.null_rows[r] && self.null_target == NullTarget::Uniform {
            vec![1.0 / k as f64; k]
        } else {
            self.rows.row(r).to_vec()
        }
    }
}

/// Per-slot noise masks for one image.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NoiseMasks {
    /// Invalid slots (no coherent region).
    pub m_inv: Vec<bool>,
    /// Noise pseudo-label: null-assigned or invalid.
    pub m_nz: Vec<bool>,
    /// Slots treated as noise when matching.
    pub m: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnsConfig {
    /// Attention threshold for the invalid-slot test.
    pub alpha: f64,
    /// Noise-confidence threshold on normalized noise logits.
    pub beta: f64,
    /// Cost multiplier for noise slots.
    pub lambda_match: f64,
    /// Weight of the noise loss in the total loss.
    pub w_nz: f64,
    /// Epochs during which the matching mask is just the invalid-slot mask.
    pub warmup_epochs: usize,
    pub null_target: NullTarget,
}

impl Default for AnsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.75,
            lambda_match: 1e4,
            w_nz: 0.01,
            warmup_epochs: 5,
            null_target: NullTarget::Zero,
        }
    }
}

impl AnsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ans.alpha", self.alpha), ("ans.beta", self.beta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        if !(self.lambda_match >= 1.0 && self.lambda_match.is_finite()) {
            return Err(Error::Config(format!(
                "ans.lambda_match = {} must be at least 1",
                self.lambda_match
            )));
        }
        if !(self.w_nz >= 0.0 && self.w_nz.is_finite()) {
            return Err(Error::Config(format!("ans.w_nz = {} must be nonnegative", self.w_nz)));
        }
        Ok(())
    }
}

/// Min-max normalization to `[0, 1]`; `None` when all values are equal.
pub fn min_max_normalize(xs: &[f64]) -> Option<Vec<f64>> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return None;
    }
    Some(xs.iter().map(|x| (x - lo) / (hi - lo)).collect())
}

/// A slot is valid when its normalized attention map has two 4-adjacent grid
/// cells both above `alpha`. Returns `true` for invalid slots.
pub fn detect_invalid_slots(attn: &Tensor, grid: (usize, usize), alpha: f64) -> Result<Vec<bool>> {
    let (gh, gw) = grid;
    if attn.cols() != gh * gw {
        return Err(Error::Shape(format!(
            "detect_invalid_slots: attention has {} positions, grid {gh}x{gw}",
            attn.cols()
        )));
    }
    Ok((0..attn.rows())
        .map(|i| match min_max_normalize(attn.row(i)) {
            None => true,
            Some(m) => !has_adjacent_pair(&m, gh, gw, alpha),
        })
        .collect())
}

fn has_adjacent_pair(map: &[f64], gh: usize, gw: usize, alpha: f64) -> bool {
    for y in 0..gh {
        for x in 0..gw {
            if map[y * gw + x] <= alpha {
                continue;
            }
            if x + 1 < gw && map[y * gw + x + 1] > alpha {
                return true;
            }
            if y + 1 < gh && map[(y + 1) * gw + x] > alpha {
                return true;
            }
        }
    }
    false
}

/// `M[i] = normalized(nz)[i] > beta`; all-equal logits give no noise.
pub fn noise_confidence_mask(nz_logits: &[f64], beta: f64) -> Result<Vec<bool>> {
    if nz_logits.len() < 2 {
        return Err(Error::Invalid(format!(
            "noise_confidence_mask needs at least 2 slots, got {}",
            nz_logits.len()
        )));
    }
    Ok(match min_max_normalize(nz_logits) {
        Some(m) => m.into_iter().map(|v| v > beta).collect(),
        None => {
            log::warn!("noise logits are all equal; no slot marked as confident noise");
            vec![false; nz_logits.len()]
        }
    })
}

/// Cross-entropy of one logit row against a target distribution.
pub fn cross_entropy_row(logits: &[f64], target: &[f64]) -> f64 {
    let lse = logsumexp_slice(logits);
    -target
        .iter()
        .zip(logits)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, l)| t * (l - lse))
        .sum::<f64>()
}

/// `cost[i][j] = CE(fg_logits[i], target_j)`.
pub fn pairwise_cost(fg_logits: &Tensor, labels: &PaddedLabelSet) -> Result<CostMatrix> {
    let (n, k) = fg_logits.matrix_dims("pairwise_cost")?;
    if labels.rows.dims2() != Some((n, k)) {
        return Err(Error::Shape(format!(
            "pairwise_cost: logits {n}x{k} vs labels {:?}",
            labels.rows.shape()
        )));
    }
    let targets: Vec<Vec<f64>> = (0..n).map(|j| labels.target_row(j)).collect();
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for t in &targets {
            data.push(cross_entropy_row(fg_logits.row(i), t));
        }
    }
    CostMatrix::new(n, data)
}

/// `(1 - M) * cost + lambda * M * cost`, row-wise over slots.
pub fn recalibrate_cost(cost: &CostMatrix, m: &[bool], lambda_match: f64) -> Result<CostMatrix> {
    let n = cost.n();
    if m.len() != n {
        return Err(Error::Shape(format!(
            "recalibrate_cost: mask of {} for {n} slots",
            m.len()
        )));
    }
    if !(lambda_match > 0.0) {
        return Err(Error::Invalid(format!(
            "recalibrate_cost: lambda_match = {lambda_match} must be positive"
        )));
    }
    let mut data = Vec::with_capacity(n * n);
    for (i, &mi) in m.iter().enumerate() {
        let mi = if mi { 1.0 } else { 0.0 };
        for &c in cost.row(i) {
            data.push((1.0 - mi) * c + lambda_match * mi * c);
        }
    }
    CostMatrix::new(n, data)
}

/// `M_nz[i] = (slot i assigned to a null row) or M_inv[i]`.
pub fn build_noise_pseudolabel(assignment: &Assignment, null_rows: &[bool], m_inv: &[bool]) -> Vec<bool> {
    assignment
        .perm
        .iter()
        .zip(m_inv)
        .map(|(&j, &inv)| null_rows[j] || inv)
        .collect()
}

/// Closed-set decision rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Single,
    Multi,
}

/// Logit threshold for multi-label prediction.
pub const TAU_MULTI: f64 = 0.0;

/// Single: the argmax class of the slot with the largest logit. Multi: every
/// class whose max over slots exceeds `tau_multi`, ascending.
pub fn closed_set_predict(fg_logits: &Tensor, mode: LabelMode, tau_multi: f64) -> Vec<usize> {
    let (n, k) = (fg_logits.rows(), fg_logits.cols());
    match mode {
        LabelMode::Single => {
            let mut best = (f64::NEG_INFINITY, 0);
            for i in 0..n {
                for (c, &v) in fg_logits.row(i).iter().enumerate() {
                    if v > best.0 {
                        best = (v, c);
                    }
                }
            }
            vec![best.1]
        }
        LabelMode::Multi => (0..k)
            .filter(|&c| (0..n).map(|i| fg_logits.at(i, c)).fold(f64::NEG_INFINITY, f64::max) > tau_multi)
            .collect(),
    }
}

/// Index of the slot holding the largest single logit.
pub fn max_logit_slot(fg_logits: &Tensor) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for i in 0..fg_logits.rows() {
        let m = fg_logits.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m > best.0 {
            best = (m, i);
        }
    }
    best.1
}

/// Foreground classifier and noise classifier, shared across slots.
#[derive(Debug, Clone)]
pub struct ClassifierHeads {
    pub params: ParamStore,
    pub slot_dim: usize,
    pub num_classes: usize,
    pub hidden: usize,
    fg: Mlp,
    nz: Mlp,
}

pub const HEAD_PREFIX: &str = "head.";

/// Per-image head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `N x K`.
    pub fg_logits: Tensor,
    pub nz_logits: Vec<f64>,
}

impl ClassifierHeads {
    pub fn new(slot_dim: usize, num_classes: usize, hidden: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs at least 2 known classes, got {num_classes}"
            )));
        }
        let heads = Self::layout(ParamStore::new(), slot_dim, num_classes, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        heads.fg.init(&mut params, &mut rng);
        heads.nz.init(&mut params, &mut rng);
        Ok(Self { params, ..heads })
    }

    fn layout(params: ParamStore, slot_dim: usize, num_classes: usize, hidden: usize) -> Self {
        Self {
            params,
            slot_dim,
            num_classes,
            hidden,
            fg: Mlp::new("head.fg", &[slot_dim, hidden, num_classes]),
            nz: Mlp::new("head.nz", &[slot_dim, hidden, 1]),
        }
    }

    /// Rebuilds heads from `head.*` parameters (e.g. out of a checkpoint).
    pub fn from_params(all: &ParamStore) -> Result<Self> {
        let params = all.subset(HEAD_PREFIX);
        let w0 = params
            .get("head.fg.0.weight")
            .ok_or_else(|| Error::Invalid("checkpoint has no classifier heads".into()))?;
        let w1 = params
            .get("head.fg.1.weight")
            .ok_or_else(|| Error::Invalid("classifier head is missing layer 1".into()))?;
        let (slot_dim, hidden) = (w0.rows(), w0.cols());
        let num_classes = w1.cols();
        let heads = Self::layout(params, slot_dim, num_classes, hidden);
        // Validate every expected parameter is present with the right shape.
        heads.forward(&Tensor::zeros(&[1, slot_dim]))?;
        Ok(heads)
    }

    pub fn forward(&self, slots: &Tensor) -> Result<HeadOutput> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, HEAD_PREFIX, false);
        let x = g.constant(slots.clone());
        let fg = self.fg.forward(&mut g, &p, x)?;
        let nz = self.nz.forward(&mut g, &p, x)?;
        Ok(HeadOutput {
            fg_logits: g.value(fg).clone(),
            nz_logits: g.value(nz).data().to_vec(),
        })
    }

    pub fn digest(&self) -> String {
        self.params.digest(HEAD_PREFIX)
    }
}

/// How the matching mask is chosen during training.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskPolicy {
    /// Full method after warm-up: `M` from the noise head.
    Ans,
    /// Warm-up: `M = M_inv`.
    AnsWarmup,
    /// Baseline: no noise masks and no noise loss.
    PureSlot,
    /// `M = M_inv = given` for every image (testing hook).
    Forced(Vec<bool>),
}

/// One labeled training example on frozen slots.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub slots: &'a SlotSet,
    pub labels: &'a [usize],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_hun: f64,
    pub l_nz: f64,
    pub l: f64,
    /// Images used (images without labels are skipped).
    pub images: usize,
}

/// Per-image decisions made while building a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    pub masks: NoiseMasks,
    pub labels: PaddedLabelSet,
    pub assignment: Assignment,
}

/// Losses and parameter gradients on a batch. `L_hun` is the per-image sum
/// of assigned recalibrated costs averaged over images; `L_nz` is the mean
/// BCE over all slots of the batch.
pub fn batch_losses(
    heads: &ClassifierHeads,
    batch: &[Example<'_>],
    config: &AnsConfig,
    policy: &MaskPolicy,
) -> Result<(StepLosses, BTreeMap<String, Tensor>, Vec<MatchRecord>)> {
    let used: Vec<&Example<'_>> = batch
        .iter()
        .filter(|e| {
            if e.labels.is_empty() {
                log::warn!("skipping training image without labels");
            }
            !e.labels.is_empty()
        })
        .collect();
    if used.is_empty() {
        return Ok((StepLosses::default(), BTreeMap::new(), Vec::new()));
    }
    let n = used[0].slots.num_slots();
    let d = heads.slot_dim;
    let k = heads.num_classes;
    let mut stacked = Vec::with_capacity(used.len() * n * d);
    for e in &used {
        if e.slots.slots.dims2() != Some((n, d)) {
            return Err(Error::Shape(format!(
                "train: slot set {:?} vs expected {n}x{d}",
                e.slots.slots.shape()
            )));
        }
        stacked.extend_from_slice(e.slots.slots.data());
    }
    let rows = used.len() * n;

    let mut g = Graph::new();
    let p = heads.params.bind(&mut g, HEAD_PREFIX, true);
    let x = g.constant(Tensor::from_matrix(rows, d, stacked)?);
    let fg = heads.fg.forward(&mut g, &p, x)?;
    let nz = heads.nz.forward(&mut g, &p, x)?;
    let fg_val = g.value(fg).clone();
    let nz_val = g.value(nz).data().to_vec();

    let mut targets = Vec::with_capacity(rows * k);
    let mut weights = Vec::with_capacity(rows);
    let mut nz_targets = Vec::with_capacity(rows);
    let mut records = Vec::with_capacity(used.len());
    for (b, e) in used.iter().enumerate() {
        let labels = PaddedLabelSet::new(e.labels, n, k)?.with_null_target(config.null_target);
        let logits = Tensor::from_matrix(n, k, fg_val.data()[b * n * k..(b + 1) * n * k].to_vec())?;
        let nz_img = &nz_val[b * n..(b + 1) * n];
        let m_inv = match policy {
            MaskPolicy::PureSlot => vec![false; n],
            MaskPolicy::Forced(m) => m.clone(),
            _ => detect_invalid_slots(&e.slots.attn, e.slots.grid, config.alpha)?,
        };
        let m = match policy {
            MaskPolicy::Ans => noise_confidence_mask(nz_img, config.beta)?,
            MaskPolicy::AnsWarmup | MaskPolicy::Forced(_) => m_inv.clone(),
            MaskPolicy::PureSlot => vec![false; n],
        };
        let cost = pairwise_cost(&logits, &labels)?;
        let cost = recalibrate_cost(&cost, &m, config.lambda_match)?;
        let assignment = hungarian(&cost);
        let m_nz = build_noise_pseudolabel(&assignment, &labels.null_rows, &m_inv);
        for (i, &j) in assignment.perm.iter().enumerate() {
            targets.extend(labels.target_row(j));
            weights.push(if m[i] { config.lambda_match } else { 1.0 });
            nz_targets.push(if m_nz[i] { 1.0 } else { 0.0 });
        }
        records.push(MatchRecord {
            masks: NoiseMasks { m_inv, m_nz, m },
            labels,
            assignment,
        });
    }
    let images = used.len() as f64;
    let hun = loss::weighted_cross_entropy(&mut g, fg, &Tensor::from_matrix(rows, k, targets)?, &weights)?;
    let l_hun = g.scale(hun, 1.0 / images);
    let (total, l_nz_value) = if *policy == MaskPolicy::PureSlot {
        (l_hun, 0.0)
    } else {
        let probs = g.sigmoid(nz);
        let l_nz = loss::bce(&mut g, probs, &Tensor::from_matrix(rows, 1, nz_targets)?)?;
        let weighted = g.scale(l_nz, config.w_nz);
        (g.add(l_hun, weighted)?, g.value(l_nz).item())
    };
    let losses = StepLosses {
        l_hun: g.value(l_hun).item(),
        l_nz: l_nz_value,
        l: g.value(total).item(),
        images: used.len(),
    };
    if !losses.l.is_finite() {
        return Err(Error::NonFinite("classification loss".into()));
    }
    let grads = g.backward(total)?;
    Ok((losses, p.collect_grads(&g, &grads), records))
}

/// One optimizer step on a batch.
pub fn train_step(
    heads: &mut ClassifierHeads,
    opt: &mut OptimizerState,
    batch: &[Example<'_>],
    config: &AnsConfig,
    policy: &MaskPolicy,
) -> Result<StepLosses> {
    let (losses, grads, _) = batch_losses(heads, batch, config, policy)?;
    if losses.images > 0 {
        opt.step(&mut heads.params, &grads)?;
    }
    Ok(losses)
}

/// Which objective to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ans,
    PureSlot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsTrainConfig {
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub hidden: usize,
    pub method: Method,
}

impl ClsTrainConfig {
    /// Single-label recipe: lr 4e-4 halved every 40 epochs, 200 epochs.
    pub fn single_label() -> Self {
        Self {
            schedule: LrSchedule {
                base: 4e-4,
                halve_every: 40,
                epochs: 200,
            },
            batch_size: 32,
            hidden: 64,
            method: Method::Ans,
        }
    }

    /// Multi-label recipe: lr 5e-3, 250 epochs.
    pub fn multi_label() -> Self {
        Self {
            schedule: LrSchedule {
                base: 5e-3,
                halve_every: 40,
                epochs: 250,
            },
            ..Self::single_label()
        }
    }

    pub fn for_mode(mode: LabelMode) -> Self {
        match mode {
            LabelMode::Single => Self::single_label(),
            LabelMode::Multi => Self::multi_label(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub lr: f64,
    pub l_hun: f64,
    pub l_nz: f64,
    pub l: f64,
}

/// Trains fresh heads on frozen slot sets.
pub fn train_heads(
    examples: &[Example<'_>],
    ans: &AnsConfig,
    config: &ClsTrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLosses),
) -> Result<ClassifierHeads> {
    ans.validate()?;
    let first = examples
        .first()
        .ok_or_else(|| Error::Empty("classifier training set".into()))?;
    let slot_dim = first.slots.slots.cols();
    let num_classes = examples
        .iter()
        .flat_map(|e| e.labels.iter().copied())
        .max()
        .map_or(0, |m| m + 1);
    train_heads_with_classes(examples, num_classes, slot_dim, ans, config, seed, &mut on_epoch)
        .map(|(h, _)| h)
}

/// As [`train_heads`] with an explicit class count; also returns the last
/// epoch's match records in example order.
#[allow(clippy::too_many_arguments)]
pub fn train_heads_with_classes(
    examples: &[Example<'_>],
    num_classes: usize,
    slot_dim: usize,
    ans: &AnsConfig,
    config: &ClsTrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLosses),
) -> Result<(ClassifierHeads, Vec<Option<MatchRecord>>)> {
    ans.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("classifier training set".into()));
    }
    let mut heads = ClassifierHeads::new(slot_dim, num_classes, config.hidden, derive_seed(seed, 10, 0))?;
    let mut opt = OptimizerState::adam(config.schedule.base)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 11, 0));
    let batch_size = config.batch_size.max(1);
    let mut last: Vec<Option<MatchRecord>> = vec![None; examples.len()];
    for epoch in 0..config.schedule.epochs {
        opt.learning_rate = config.schedule.at_epoch(epoch);
        let policy = match config.method {
            Method::PureSlot => MaskPolicy::PureSlot,
            Method::Ans if epoch < ans.warmup_epochs => MaskPolicy::AnsWarmup,
            Method::Ans => MaskPolicy::Ans,
        };
        order.shuffle(&mut rng);
        let final_epoch = epoch + 1 == config.schedule.epochs;
        let mut sums = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Example<'_>> = chunk.iter().map(|&i| examples[i]).collect();
            let (losses, grads, records) = batch_losses(&heads, &batch, ans, &policy)?;
            if losses.images == 0 {
                continue;
            }
            if final_epoch {
                let labeled = chunk.iter().filter(|&&i| !examples[i].labels.is_empty());
                for (&i, r) in labeled.zip(records) {
                    last[i] = Some(r);
                }
            }
            opt.step(&mut heads.params, &grads)?;
            let w = losses.images as f64;
            sums.0 += losses.l_hun * w;
            sums.1 += losses.l_nz * w;
            sums.2 += losses.l * w;
            sums.3 += losses.images;
        }
        let denom = sums.3.max(1) as f64;
        on_epoch(&EpochLosses {
            epoch,
            lr: opt.learning_rate,
            l_hun: sums.0 / denom,
            l_nz: sums.1 / denom,
            l: sums.2 / denom,
        });
    }
    Ok((heads, last))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padded_labels() {
        let l = PaddedLabelSet::new(&[3, 1], 6, 5).unwrap();
        assert_eq!(l.num_labels(), 2);
        assert_eq!(l.class_of(0), Some(1));
        assert_eq!(l.class_of(1), Some(3));
        assert_eq!(l.class_of(2), None);
        assert!(l.rows.row(4).iter().all(|&v| v == 0.0));
        assert!(PaddedLabelSet::new(&[7], 6, 5).is_err());
        assert!(PaddedLabelSet::new(&[0, 1, 2], 2, 5).is_err());
    }

    #[test]
    fn invalid_slot_rule() {
        let grid = (3, 3);
        let mut a = Tensor::zeros(&[3, 9]);
        // slot 0: one hot cell only
        a.data_mut()[4] = 1.0;
        // slot 1: uniform
        a.data_mut()[9..18].iter_mut().for_each(|v| *v = 0.3);
        // slot 2: a 2x1 block at 0.9
        a.data_mut()[18] = 0.9;
        a.data_mut()[19] = 0.9;
        let inv = detect_invalid_slots(&a, grid, 0.5).unwrap();
        assert_eq!(inv, vec![true, true, false]);
    }

    #[test]
    fn diagonal_cells_are_not_adjacent() {
        let mut a = Tensor::zeros(&[1, 4]);
        a.data_mut()[0] = 1.0;
        a.data_mut()[3] = 1.0;
        assert_eq!(detect_invalid_slots(&a, (2, 2), 0.5).unwrap(), vec![true]);
    }

    #[test]
    fn noise_mask_examples() {
        assert_eq!(noise_confidence_mask(&[0.0, 10.0], 0.75).unwrap(), vec![false, true]);
        assert_eq!(noise_confidence_mask(&[1.0, 1.0, 1.0], 0.75).unwrap(), vec![false; 3]);
        assert!(noise_confidence_mask(&[1.0], 0.75).is_err());
    }

    #[test]
    fn pairwise_cost_examples() {
        let labels = PaddedLabelSet::new(&[2], 3, 4).unwrap();
        let flat = Tensor::zeros(&[3, 4]);
        let c = pairwise_cost(&flat, &labels).unwrap();
        for i in 0..3 {
            assert!((c.get(i, 0) - 4f64.ln()).abs() < 1e-12);
            assert_eq!(c.get(i, 1), 0.0);
        }
        let uniform = labels.with_null_target(NullTarget::Uniform);
        let c = pairwise_cost(&flat, &uniform).unwrap();
        for i in 0..3 {
            assert!((c.get(i, 2) - 4f64.ln()).abs() < 1e-12);
        }
        // A slot confident in the label fits it better than the uniform null.
        let mut aligned = Tensor::zeros(&[3, 4]);
        aligned.data_mut()[2] = 8.0;
        let c = pairwise_cost(&aligned, &uniform).unwrap();
        assert!(c.get(0, 0) < c.get(0, 1));
        assert!(c.get(0, 0) < c.get(0, 2));
    }

    #[test]
    fn recalibration_formula() {
        let c = CostMatrix::from_rows(&[vec![2.0, 3.0], vec![0.5, 1.5]]).unwrap();
        assert_eq!(recalibrate_cost(&c, &[false, false], 1e4).unwrap(), c);
        let r = recalibrate_cost(&c, &[true, false], 1e4).unwrap();
        assert_eq!(r.row(0), &[2e4, 3e4]);
        assert_eq!(r.row(1), c.row(1));
        assert!(recalibrate_cost(&c, &[true, false], 0.0).is_err());
        assert!(recalibrate_cost(&c, &[true], 2.0).is_err());
    }

    #[test]
    fn pseudolabel_counts() {
        let labels = PaddedLabelSet::new(&[0, 1], 6, 3).unwrap();
        let a = Assignment {
            perm: vec![3, 0, 4, 1, 5, 2],
        };
        let m_nz = build_noise_pseudolabel(&a, &labels.null_rows, &[false; 6]);
        assert_eq!(m_nz.iter().filter(|&&b| b).count(), 4);
        assert_eq!(m_nz, vec![true, false, true, false, true, true]);
        let all = PaddedLabelSet::new(&[0, 1], 2, 3).unwrap();
        assert_eq!(
            build_noise_pseudolabel(&Assignment::identity(2), &all.null_rows, &[false; 2]),
            vec![false; 2]
        );
    }

    #[test]
    fn predict_rules() {
        let one = Tensor::from_matrix(1, 3, vec![0.1, 2.0, -1.0]).unwrap();
        assert_eq!(closed_set_predict(&one, LabelMode::Single, TAU_MULTI), vec![1]);
        let two = Tensor::from_matrix(2, 3, vec![0.0, 1.0, 5.0, 3.0, 0.0, 0.0]).unwrap();
        assert_eq!(closed_set_predict(&two, LabelMode::Single, TAU_MULTI), vec![2]);
        assert_eq!(max_logit_slot(&two), 0);
        let multi = Tensor::from_matrix(2, 3, vec![-1.0, 0.5, -2.0, 0.2, -0.5, -3.0]).unwrap();
        assert_eq!(closed_set_predict(&multi, LabelMode::Multi, TAU_MULTI), vec![0, 1]);
    }

    #[test]
    fn config_validation() {
        assert!(AnsConfig::default().validate().is_ok());
        let bad = AnsConfig {
            alpha: 1.0,
            ..AnsConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AnsConfig {
            lambda_match: 0.5,
            ..AnsConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
