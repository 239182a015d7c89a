//! Slot-attention autoencoder.
//!
//! A patch encoder turns the image into a grid of feature vectors, slot
//! attention groups them into `N` slots, and a spatial-broadcast mixture
//! decoder reconstructs the per-patch target from the slots. After
//! pretraining the whole model is frozen and only used to produce
//! [`SlotSet`]s.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datagen::{derive_seed, Scene};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss;
use crate::nn::{Binding, GruCell, LayerNorm, Linear, Mlp, ParamStore};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

/// Reconstruction target of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTarget {
    /// Average-pooled patch pixels.
    Pixel,
    /// Output of a randomly initialized, frozen patch network.
    FrozenExtractor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotModelConfig {
    pub num_slots: usize,
    pub slot_dim: usize,
    pub iters: usize,
    pub image_size: usize,
    pub patch: usize,
    /// Hidden width of the patch encoder.
    pub encoder_hidden: usize,
    /// Width of encoder features fed to slot attention.
    pub feature_dim: usize,
    /// Hidden width of the slot update MLP.
    pub mlp_hidden: usize,
    pub decoder_hidden: usize,
    pub feature_target: FeatureTarget,
    /// Pixel target: side of the pooled sub-blocks inside each patch.
    pub target_pool: usize,
    /// Frozen extractor target width.
    pub extractor_dim: usize,
    /// Multiplier on the encoder's positional embedding.
    pub encoder_pos_scale: f64,
}

impl Default for SlotModelConfig {
    fn default() -> Self {
        Self {
            num_slots: 6,
            slot_dim: 64,
            iters: 3,
            image_size: 64,
            patch: 8,
            encoder_hidden: 64,
            feature_dim: 64,
            mlp_hidden: 128,
            decoder_hidden: 64,
            feature_target: FeatureTarget::Pixel,
            target_pool: 4,
            extractor_dim: 16,
            encoder_pos_scale: 1.0,
        }
    }
}

impl SlotModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_slots < 1 {
            return Err(Error::Config("model.num_slots must be positive".into()));
        }
        if self.iters < 1 {
            return Err(Error::Config("model.iters must be at least 1".into()));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "model.patch {} must divide model.image_size {}",
                self.patch, self.image_size
            )));
        }
        if self.target_pool == 0 || self.patch % self.target_pool != 0 {
            return Err(Error::Config(format!(
                "model.target_pool {} must divide model.patch {}",
                self.target_pool, self.patch
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.image_size / self.patch;
        (s, s)
    }

    pub fn positions(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn target_dim(&self) -> usize {
        match self.feature_target {
            FeatureTarget::Pixel => {
                let cells = self.patch / self.target_pool;
                cells * cells * 3
            }
            FeatureTarget::FrozenExtractor => self.extractor_dim,
        }
    }
}

/// Slots and their attention maps for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSet {
    /// `N x D`.
    pub slots: Tensor,
    /// `N x P`, each column sums to one.
    pub attn: Tensor,
    /// `(rows, cols)` of the attention grid; `P = rows * cols`.
    pub grid: (usize, usize),
}

impl SlotSet {
    pub fn num_slots(&self) -> usize {
        self.slots.rows()
    }

    /// Attention map of slot `i` as a row-major grid.
    pub fn attn_map(&self, i: usize) -> &[f64] {
        self.attn.row(i)
    }
}

#[derive(Debug, Clone)]
pub struct Decoded {
    /// `P x D_t`.
    pub recon: Tensor,
    /// `N x P`, each column sums to one.
    pub alpha: Tensor,
    /// `(N * P) x D_t`, slot-major.
    pub per_slot: Tensor,
}

/// `recon[p] = sum_i alpha[i, p] * per_slot[i * P + p]`.
pub fn mixture(per_slot: &Tensor, alpha: &Tensor) -> Tensor {
    let (n, p) = (alpha.rows(), alpha.cols());
    let d = per_slot.cols();
    let mut out = vec![0.0; p * d];
    for i in 0..n {
        for q in 0..p {
            let a = alpha.at(i, q);
            for (o, v) in out[q * d..(q + 1) * d].iter_mut().zip(per_slot.row(i * p + q)) {
                *o += a * v;
            }
        }
    }
    Tensor::from_matrix(p, d, out).expect("dims")
}

struct Layers {
    patch_mlp: Mlp,
    pos: Linear,
    enc_norm: LayerNorm,
    enc_mlp: Mlp,
    in_norm: LayerNorm,
    key: Linear,
    value: Linear,
    query: Linear,
    slot_norm: LayerNorm,
    gru: GruCell,
    mlp_norm: LayerNorm,
    update_mlp: Mlp,
    dec_slot: Linear,
    dec_pos: Linear,
    dec_out: Mlp,
    extractor: Linear,
}

impl Layers {
    fn new(c: &SlotModelConfig) -> Self {
        let (f, d) = (c.feature_dim, c.slot_dim);
        Self {
            patch_mlp: Mlp::new("enc.patch", &[c.patch_len(), c.encoder_hidden, f]),
            pos: Linear::new("enc.pos", 4, f),
            enc_norm: LayerNorm::new("enc.norm", f),
            enc_mlp: Mlp::new("enc.mlp", &[f, f, f]),
            in_norm: LayerNorm::new("sa.in_norm", f),
            key: Linear::new("sa.key", f, d),
            value: Linear::new("sa.value", f, d),
            query: Linear::new("sa.query", d, d),
            slot_norm: LayerNorm::new("sa.slot_norm", d),
            gru: GruCell::new("sa.gru", d, d),
            mlp_norm: LayerNorm::new("sa.mlp_norm", d),
            update_mlp: Mlp::new("sa.mlp", &[d, c.mlp_hidden, d]),
            dec_slot: Linear::new("dec.slot", d, c.decoder_hidden),
            dec_pos: Linear::new("dec.pos", 4, c.decoder_hidden),
            dec_out: Mlp::new(
                "dec.out",
                &[c.decoder_hidden, c.decoder_hidden, c.target_dim() + 1],
            ),
            extractor: Linear::new("target.extractor", c.patch_len(), c.extractor_dim),
        }
    }
}

/// Parameter name prefixes belonging to the pretrained backbone.
pub const BACKBONE_PREFIXES: [&str; 3] = ["enc.", "sa.", "dec."];

pub struct SlotModel {
    pub config: SlotModelConfig,
    pub params: ParamStore,
    layers: Layers,
    grid_coords: Tensor,
}

impl std::fmt::Debug for SlotModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlotModel")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish()
    }
}

impl Clone for SlotModel {
    fn clone(&self) -> Self {
        Self::from_params(self.config.clone(), self.params.clone()).expect("valid config")
    }
}

impl SlotModel {
    /// Fresh model with weights drawn from `seed`.
    pub fn new(config: SlotModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = Layers::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        layers.patch_mlp.init(&mut params, &mut rng);
        layers.pos.init(&mut params, &mut rng);
        layers.enc_norm.init(&mut params);
        layers.enc_mlp.init(&mut params, &mut rng);
        layers.in_norm.init(&mut params);
        layers.key.init(&mut params, &mut rng);
        layers.value.init(&mut params, &mut rng);
        layers.query.init(&mut params, &mut rng);
        layers.slot_norm.init(&mut params);
        layers.gru.init(&mut params, &mut rng);
        layers.mlp_norm.init(&mut params);
        layers.update_mlp.init(&mut params, &mut rng);
        layers.dec_slot.init(&mut params, &mut rng);
        layers.dec_pos.init(&mut params, &mut rng);
        layers.dec_out.init(&mut params, &mut rng);
        let d = config.slot_dim;
        params.insert("sa.slot_mu", Tensor::randn(&[1, d], (1.0 / d as f64).sqrt(), &mut rng));
        params.insert("sa.slot_log_sigma", Tensor::zeros(&[1, d]));
        if config.feature_target == FeatureTarget::FrozenExtractor {
            layers.extractor.init(&mut params, &mut rng);
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: SlotModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layers = Layers::new(&config);
        let grid_coords = grid_coords(config.grid());
        Ok(Self {
            config,
            params,
            layers,
            grid_coords,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::to_string(&self.config)?;
        Ok(Checkpoint::new(meta, self.params.clone()))
    }

    /// Loads the backbone from a checkpoint; extra (head) parameters are kept.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: SlotModelConfig = serde_json::from_str(&ck.meta)?;
        let model = Self::from_params(config, ck.params.clone())?;
        if !model.params.contains("sa.slot_mu") {
            return Err(Error::Invalid("checkpoint has no slot model parameters".into()));
        }
        Ok(model)
    }

    /// Digest of every backbone parameter.
    pub fn backbone_digest(&self) -> String {
        BACKBONE_PREFIXES
            .iter()
            .map(|p| self.params.digest(p))
            .collect::<Vec<_>>()
            .join("")
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        let mut b = Binding::default();
        for prefix in BACKBONE_PREFIXES.iter().chain(&["target."]) {
            let train = trainable && *prefix != "target.";
            b = b.merge(self.params.bind(g, prefix, train));
        }
        b
    }

    /// Splits an `H x W x 3` image into `P` flattened patches (row-major grid).
    pub fn patchify(&self, image: &[f64]) -> Result<Tensor> {
        let s = self.config.image_size;
        if image.len() != s * s * 3 {
            return Err(Error::Shape(format!(
                "encode: expected {s}x{s}x3 image ({} values), got {}",
                s * s * 3,
                image.len()
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encode: image pixels".into()));
        }
        let ps = self.config.patch;
        let (gh, gw) = self.config.grid();
        let mut out = Vec::with_capacity(gh * gw * ps * ps * 3);
        for gy in 0..gh {
            for gx in 0..gw {
                for y in gy * ps..(gy + 1) * ps {
                    let start = (y * s + gx * ps) * 3;
                    out.extend_from_slice(&image[start..start + ps * 3]);
                }
            }
        }
        Tensor::from_matrix(gh * gw, ps * ps * 3, out)
    }

    /// Reconstruction target for an image.
    pub fn target(&self, image: &[f64]) -> Result<Tensor> {
        let patches = self.patchify(image)?;
        match self.config.feature_target {
            FeatureTarget::Pixel => Ok(pool_patches(&patches, self.config.patch, self.config.target_pool)),
            FeatureTarget::FrozenExtractor => {
                let mut g = Graph::new();
                let p = self.bind(&mut g, false);
                let x = g.constant(patches);
                let h = self.layers.extractor.forward(&mut g, &p, x)?;
                let h = g.relu(h);
                Ok(g.value(h).clone())
            }
        }
    }

    fn patch_features(&self, g: &mut Graph, p: &Binding, image: &[f64]) -> Result<Var> {
        let patches = g.constant(self.patchify(image)?);
        self.layers.patch_mlp.forward(g, p, patches)
    }

    fn encode_graph(&self, g: &mut Graph, p: &Binding, image: &[f64]) -> Result<Var> {
        let f = self.patch_features(g, p, image)?;
        let coords = g.constant(self.grid_coords.clone());
        let pos = self.layers.pos.forward(g, p, coords)?;
        let pos = g.scale(pos, self.config.encoder_pos_scale);
        let f = g.add(f, pos)?;
        let f = self.layers.enc_norm.forward(g, p, f)?;
        self.layers.enc_mlp.forward(g, p, f)
    }

    /// Per-patch features before positional encoding (`P x D_f`).
    pub fn encode_patches(&self, image: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let v = self.patch_features(&mut g, &p, image)?;
        Ok(g.value(v).clone())
    }

    /// Encoder features with positional encoding (`P x D_f`).
    pub fn encode(&self, image: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let v = self.encode_graph(&mut g, &p, image)?;
        Ok(g.value(v).clone())
    }

    /// Standard normal draws for the initial slots of one image.
    pub fn slot_noise(&self, rng_seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        Tensor::randn(&[self.config.num_slots, self.config.slot_dim], 1.0, &mut rng)
    }

    fn slot_attention_graph(
        &self,
        g: &mut Graph,
        p: &Binding,
        features: Var,
        noise: &Tensor,
    ) -> Result<(Var, Var)> {
        let l = &self.layers;
        let d = self.config.slot_dim;
        let n = noise.rows();
        let inputs = l.in_norm.forward(g, p, features)?;
        let keys = l.key.forward_no_bias(g, p, inputs)?;
        let values = l.value.forward_no_bias(g, p, inputs)?;

        let mu = p.var("sa.slot_mu")?;
        let log_sigma = p.var("sa.slot_log_sigma")?;
        let sigma = g.exp(log_sigma);
        let eps = g.constant(noise.clone());
        let spread = g.mul(eps, sigma)?;
        let mut slots = g.add(spread, mu)?;

        let scale = 1.0 / (d as f64).sqrt();
        let mut attn = None;
        for _ in 0..self.config.iters {
            let prev = slots;
            let s = l.slot_norm.forward(g, p, slots)?;
            let q = l.query.forward_no_bias(g, p, s)?;
            let logits = g.matmul_nt(q, keys)?;
            let logits = g.scale(logits, scale);
            let a = g.softmax(logits, 0)?;
            attn = Some(a);
            // Weighted mean over positions.
            let a_eps = g.add_scalar(a, 1e-8);
            let norm = g.sum_axis(a_eps, 1)?;
            let w = g.div(a_eps, norm)?;
            let updates = g.matmul(w, values)?;
            slots = l.gru.forward(g, p, prev, updates)?;
            let r = l.mlp_norm.forward(g, p, slots)?;
            let r = l.update_mlp.forward(g, p, r)?;
            slots = g.add(slots, r)?;
        }
        debug_assert_eq!(g.value(slots).rows(), n);
        Ok((slots, attn.expect("iters >= 1")))
    }

    /// Slot attention over precomputed features.
    pub fn slot_attention(&self, features: &Tensor, rng_seed: u64) -> Result<SlotSet> {
        self.slot_attention_with_noise(features, &self.slot_noise(rng_seed))
    }

    /// Slot attention with explicit initial-slot noise (`N x D`).
    pub fn slot_attention_with_noise(&self, features: &Tensor, noise: &Tensor) -> Result<SlotSet> {
        if noise.cols() != self.config.slot_dim || noise.rows() == 0 {
            return Err(Error::Shape(format!(
                "slot_attention: noise {:?} vs slot_dim {}",
                noise.shape(),
                self.config.slot_dim
            )));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let f = g.constant(features.clone());
        let (slots, attn) = self.slot_attention_graph(&mut g, &p, f, noise)?;
        Ok(SlotSet {
            slots: g.value(slots).clone(),
            attn: g.value(attn).clone(),
            grid: self.config.grid(),
        })
    }

    fn decode_graph(&self, g: &mut Graph, p: &Binding, slots: Var) -> Result<(Var, Var, Var)> {
        let l = &self.layers;
        let n = g.value(slots).rows();
        let pcount = self.config.positions();
        let td = self.config.target_dim();
        let s1 = l.dec_slot.forward_no_bias(g, p, slots)?;
        let coords = g.constant(self.grid_coords.clone());
        let p1 = l.dec_pos.forward(g, p, coords)?;
        let slot_idx: Rc<[usize]> = (0..n * pcount).map(|r| r / pcount).collect();
        let pos_idx: Rc<[usize]> = (0..n * pcount).map(|r| r % pcount).collect();
        let s_rep = g.gather_rows(s1, slot_idx)?;
        let p_rep = g.gather_rows(p1, pos_idx.clone())?;
        let h = g.add(s_rep, p_rep)?;
        let h = g.relu(h);
        let out = l.dec_out.forward(g, p, h)?;
        let per_slot = g.slice_cols(out, 0, td)?;
        let alpha_logits = g.slice_cols(out, td, td + 1)?;
        let alpha_logits = g.reshape(alpha_logits, n, pcount)?;
        let alpha = g.softmax(alpha_logits, 0)?;
        let alpha_col = g.reshape(alpha, n * pcount, 1)?;
        let weighted = g.mul(per_slot, alpha_col)?;
        let recon = g.scatter_add_rows(weighted, pos_idx, pcount)?;
        Ok((recon, alpha, per_slot))
    }

    pub fn decode(&self, slot_set: &SlotSet) -> Result<Decoded> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let s = g.constant(slot_set.slots.clone());
        let (recon, alpha, per_slot) = self.decode_graph(&mut g, &p, s)?;
        Ok(Decoded {
            recon: g.value(recon).clone(),
            alpha: g.value(alpha).clone(),
            per_slot: g.value(per_slot).clone(),
        })
    }

    /// Encode and run slot attention.
    pub fn infer(&self, image: &[f64], rng_seed: u64) -> Result<SlotSet> {
        let f = self.encode(image)?;
        self.slot_attention(&f, rng_seed)
    }

    /// Reconstruction loss and its gradients for one image.
    fn loss_and_grads(
        &self,
        image: &[f64],
        target: &Tensor,
        noise: &Tensor,
    ) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, true);
        let f = self.encode_graph(&mut g, &p, image)?;
        let (slots, _) = self.slot_attention_graph(&mut g, &p, f, noise)?;
        let (recon, _, _) = self.decode_graph(&mut g, &p, slots)?;
        let l = loss::mse(&mut g, recon, target)?;
        let value = g.value(l).item();
        let grads = g.backward(l)?;
        Ok((value, p.collect_grads(&g, &grads)))
    }

    /// Mean reconstruction loss over `images` without updating weights.
    pub fn reconstruction_loss(&self, images: &[Vec<f64>], seed: u64) -> Result<f64> {
        let mut total = 0.0;
        for (i, img) in images.iter().enumerate() {
            let target = self.target(img)?;
            let slots = self.infer(img, derive_seed(seed, 1, i as u64))?;
            let d = self.decode(&slots)?;
            let diff: f64 = d
                .recon
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += diff / target.len() as f64;
        }
        Ok(total / images.len().max(1) as f64)
    }
}

/// `[x, y, 1 - x, 1 - y]` per grid cell, cell centers in `[0, 1]`.
fn grid_coords((h, w): (usize, usize)) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            let fx = (x as f64 + 0.5) / w as f64;
            let fy = (y as f64 + 0.5) / h as f64;
            data.extend_from_slice(&[fx, fy, 1.0 - fx, 1.0 - fy]);
        }
    }
    Tensor::from_matrix(h * w, 4, data).expect("dims")
}

/// Averages each `patch x patch x 3` row over `pool x pool` sub-blocks.
fn pool_patches(patches: &Tensor, patch: usize, pool: usize) -> Tensor {
    let cells = patch / pool;
    let mut out = Vec::with_capacity(patches.rows() * cells * cells * 3);
    let norm = (pool * pool) as f64;
    for r in 0..patches.rows() {
        let row = patches.row(r);
        for cy in 0..cells {
            for cx in 0..cells {
                let mut acc = [0.0; 3];
                for y in cy * pool..(cy + 1) * pool {
                    for x in cx * pool..(cx + 1) * pool {
                        let base = (y * patch + x) * 3;
                        for ch in 0..3 {
                            acc[ch] += row[base + ch];
                        }
                    }
                }
                out.extend(acc.iter().map(|a| a / norm));
            }
        }
    }
    Tensor::from_matrix(patches.rows(), cells * cells * 3, out).expect("dims")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear warm-up length in optimizer steps.
    pub warmup_steps: usize,
    /// Cap on training images used (0 = all).
    pub max_images: usize,
    /// Keep the randomly initialized patch encoder fixed.
    pub freeze_encoder: bool,
    /// Generic scenes for the first stage (0 = train on known-class images only).
    pub generic_images: usize,
    pub generic_max_objects: usize,
    /// Epochs on known-class images after the generic stage, encoder frozen.
    pub finetune_epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            warmup_steps: 200,
            max_images: 0,
            freeze_encoder: false,
            generic_images: 2000,
            generic_max_objects: 3,
            finetune_epochs: 5,
        }
    }
}

/// One line of pretraining progress.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
}

/// Trains a fresh slot model on known-class images by reconstruction.
pub fn pretrain(
    scenes: &[Scene],
    model_config: SlotModelConfig,
    config: &PretrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<SlotModel> {
    if scenes.is_empty() {
        return Err(Error::Empty("pretraining dataset".into()));
    }
    let model = SlotModel::new(model_config, seed)?;
    continue_pretraining(model, scenes, config, seed, on_epoch)
}

/// Further reconstruction training of an existing model.
pub fn continue_pretraining(
    mut model: SlotModel,
    scenes: &[Scene],
    config: &PretrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<SlotModel> {
    if scenes.is_empty() {
        return Err(Error::Empty("pretraining dataset".into()));
    }
    let n = if config.max_images == 0 {
        scenes.len()
    } else {
        config.max_images.min(scenes.len())
    };
    let images: Vec<Vec<f64>> = scenes[..n].iter().map(Scene::image_f64).collect();
    let targets = images
        .iter()
        .map(|img| model.target(img))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = OptimizerState::adam(config.learning_rate)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, 0));
    let batch = config.batch_size.max(1);
    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut acc: std::collections::BTreeMap<String, Tensor> = Default::default();
            for &i in chunk {
                let noise = model.slot_noise(derive_seed(seed, 3, (epoch * n + i) as u64));
                let (l, grads) = model.loss_and_grads(&images[i], &targets[i], &noise)?;
                epoch_loss += l;
                for (k, g) in grads {
                    match acc.get_mut(&k) {
                        Some(a) => a.add_assign(&g),
                        None => {
                            acc.insert(k, g);
                        }
                    }
                }
            }
            if config.freeze_encoder {
                acc.retain(|k, _| !k.starts_with("enc."));
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in acc.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            let step = opt.step_count() as usize + 1;
            opt.learning_rate = config.learning_rate * (step as f64 / config.warmup_steps.max(1) as f64).min(1.0);
            opt.step(&mut model.params, &acc)?;
        }
        let log = EpochLog {
            epoch,
            loss: epoch_loss / n as f64,
        };
        if !log.loss.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at epoch {epoch}")));
        }
        on_epoch(&log);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SlotModelConfig {
        SlotModelConfig::default()
    }

    #[test]
    fn sixty_four_patches() {
        let m = SlotModel::new(small(), 0).unwrap();
        let f = m.encode(&vec![0.5; 64 * 64 * 3]).unwrap();
        assert_eq!(f.shape(), &[64, 64]);
    }

    #[test]
    fn constant_image_gives_identical_patch_features() {
        let m = SlotModel::new(small(), 1).unwrap();
        let f = m.encode_patches(&vec![0.3; 64 * 64 * 3]).unwrap();
        for r in 1..f.rows() {
            assert_eq!(f.row(r), f.row(0));
        }
    }

    #[test]
    fn rejects_non_finite_pixels() {
        let m = SlotModel::new(small(), 1).unwrap();
        let mut img = vec![0.3; 64 * 64 * 3];
        img[5] = f64::NAN;
        assert!(matches!(m.encode(&img), Err(Error::NonFinite(_))));
    }

    #[test]
    fn attention_columns_sum_to_one() {
        let m = SlotModel::new(small(), 2).unwrap();
        let img: Vec<f64> = (0..64 * 64 * 3).map(|i| ((i * 37) % 255) as f64 / 255.0).collect();
        let s = m.infer(&img, 5).unwrap();
        for p in 0..s.attn.cols() {
            let col: f64 = (0..s.attn.rows()).map(|i| s.attn.at(i, p)).sum();
            assert!((col - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_slot_takes_all_attention() {
        let mut c = small();
        c.num_slots = 1;
        let m = SlotModel::new(c, 2).unwrap();
        let s = m.infer(&vec![0.2; 64 * 64 * 3], 5).unwrap();
        assert!(s.attn.data().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn alpha_is_normalized_and_mixture_is_linear() {
        let m = SlotModel::new(small(), 3).unwrap();
        let img: Vec<f64> = (0..64 * 64 * 3).map(|i| ((i * 11) % 255) as f64 / 255.0).collect();
        let s = m.infer(&img, 9).unwrap();
        let d = m.decode(&s).unwrap();
        for p in 0..d.alpha.cols() {
            let col: f64 = (0..d.alpha.rows()).map(|i| d.alpha.at(i, p)).sum();
            assert!((col - 1.0).abs() < 1e-6);
        }
        let full = mixture(&d.per_slot, &d.alpha);
        for (a, b) in full.data().iter().zip(d.recon.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Dropping slot 2's alpha removes exactly its term.
        let mut zeroed = d.alpha.clone();
        let pc = zeroed.cols();
        zeroed.data_mut()[2 * pc..3 * pc].iter_mut().for_each(|v| *v = 0.0);
        let without = mixture(&d.per_slot, &zeroed);
        let mut only = Tensor::zeros(d.alpha.shape());
        only.data_mut()[2 * pc..3 * pc].copy_from_slice(&d.alpha.data()[2 * pc..3 * pc]);
        let contribution = mixture(&d.per_slot, &only);
        for k in 0..full.len() {
            let sum = without.data()[k] + contribution.data()[k];
            assert!((sum - full.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_initial_slots_permutes_outputs_bitwise() {
        let m = SlotModel::new(small(), 4).unwrap();
        let img: Vec<f64> = (0..64 * 64 * 3).map(|i| ((i * 7) % 251) as f64 / 251.0).collect();
        let f = m.encode(&img).unwrap();
        let noise = m.slot_noise(17);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let d = noise.cols();
        let mut permuted = Vec::new();
        for &src in &perm {
            permuted.extend_from_slice(noise.row(src));
        }
        let permuted = Tensor::from_matrix(6, d, permuted).unwrap();
        let a = m.slot_attention_with_noise(&f, &noise).unwrap();
        let b = m.slot_attention_with_noise(&f, &permuted).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(b.slots.row(row), a.slots.row(src));
            assert_eq!(b.attn.row(row), a.attn.row(src));
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let m = SlotModel::new(small(), 5).unwrap();
        let img: Vec<f64> = (0..64 * 64 * 3).map(|i| ((i * 3) % 17) as f64 / 17.0).collect();
        let a = m.encode(&img).unwrap();
        let b = m.encode(&img).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn pretrain_rejects_empty_dataset() {
        assert!(matches!(
            pretrain(&[], small(), &PretrainConfig::default(), 0, |_| {}),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_restores_model() {
        let m = SlotModel::new(small(), 6).unwrap();
        let ck = m.to_checkpoint().unwrap();
        let back = SlotModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.backbone_digest(), m.backbone_digest());
        assert_eq!(back.config, m.config);
    }
}
