//! The attack core: a shallow pre-generator mapping attribute vectors into
//! per-block generator inputs, the reconstruction losses, and the two training
//! procedures (image-based on an inverted dataset, and the noise-based
//! baseline). The generator and the attack embedder stay frozen throughout;
//! the black-box encoder is never queried inside the optimization loop.

use crate::artifact::Archive;
use crate::data::{AttributeSchema, Image, InvertedDataset};
use crate::embeddings::{embedding_distance, EmbedRole, EmbeddingNetwork};
use crate::encoder::{BlackboxEncoder, FeatureVector};
use crate::error::{Error, Result};
use crate::generator::{GeneratorNet, StyleCode};
use crate::graph::{row_stats, Graph, Var};
use crate::nn::{Adam, Linear, ParamSet, LEAKY_SLOPE};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which objective produced a pre-generator checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PregenStage {
    Pixel,
    Fn,
    Noise,
}

impl std::fmt::Display for PregenStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PregenStage::Pixel => write!(f, "pixel"),
            PregenStage::Fn => write!(f, "fn"),
            PregenStage::Noise => write!(f, "noise"),
        }
    }
}

/// Shallow fully connected map from attribute vector to `blocks * d` latents.
/// Each block's slice of the output is produced by its own rows of the final
/// layer, so blocks carry distinct signals for style mixing.
pub struct PreGenerator {
    pub params: ParamSet,
    pub schema: AttributeSchema,
    pub blocks: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub stage: PregenStage,
    pub generator_fingerprint: String,
    pub encoder_fingerprint: String,
    layers: Vec<Linear>,
}

impl PreGenerator {
    pub fn new(
        seed: u64,
        schema: AttributeSchema,
        blocks: usize,
        latent_dim: usize,
        hidden: &[usize],
    ) -> Self {
        let mut rng = rng::rng_for(seed, Stream::PregenInit);
        let mut ps = ParamSet::new();
        let mut dims = vec![schema.dimension()];
        dims.extend_from_slice(hidden);
        dims.push(blocks * latent_dim);
        let layers = (0..dims.len() - 1)
            .map(|i| Linear::new(&mut ps, &mut rng, &format!("p.fc{i}"), dims[i], dims[i + 1]))
            .collect();
        PreGenerator {
            params: ps,
            schema,
            blocks,
            latent_dim,
            hidden: hidden.to_vec(),
            stage: PregenStage::Pixel,
            generator_fingerprint: String::new(),
            encoder_fingerprint: String::new(),
            layers,
        }
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    /// Forward over a feature batch `[n, schema_dim]` to latents `[n, B*d]`.
    pub fn forward(&self, g: &mut Graph, pv: &[Var], f: Var) -> Var {
        let mut h = f;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, pv, h);
            if i < last {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        h
    }

    fn feature_tensor(&self, fs: &[&FeatureVector]) -> Result<Tensor> {
        let dim = self.schema.dimension();
        for f in fs {
            if f.dimension() != dim {
                return Err(Error::validation(format!(
                    "feature vector has dimension {}, pre-generator expects {dim}",
                    f.dimension()
                )));
            }
        }
        let mut data = Vec::with_capacity(fs.len() * dim);
        for f in fs {
            data.extend_from_slice(f.values());
        }
        Ok(Tensor::from_vec(&[fs.len(), dim], data))
    }

    /// Map feature vectors to style codes (inference).
    pub fn map_features(&self, fs: &[&FeatureVector]) -> Result<Vec<StyleCode>> {
        let t = self.feature_tensor(fs)?;
        let mut g = Graph::new();
        let pv = self.params.insert_into(&mut g, false);
        let f = g.constant(t);
        let out = self.forward(&mut g, &pv, f);
        let v = g.value(out);
        let (b, d) = (self.blocks, self.latent_dim);
        Ok((0..fs.len())
            .map(|i| {
                let row = &v.data()[i * b * d..(i + 1) * b * d];
                StyleCode::new(row.chunks_exact(d).map(|c| c.to_vec()).collect())
                    .expect("forward output is finite")
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new(serde_json::json!({
            "kind": "pregenerator",
            "schema": serde_json::to_value(&self.schema)?,
            "blocks": self.blocks,
            "latent_dim": self.latent_dim,
            "hidden": self.hidden,
            "stage": serde_json::to_value(self.stage)?,
            "generator_fingerprint": self.generator_fingerprint,
            "encoder_fingerprint": self.encoder_fingerprint,
            "fingerprint": self.params.fingerprint(),
        }));
        a.add_blob("params", self.params.to_bytes());
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        if a.meta_str("kind")? != "pregenerator" {
            return Err(Error::validation("artifact is not a pre-generator checkpoint"));
        }
        let schema: AttributeSchema = serde_json::from_value(a.meta["schema"].clone())?;
        let hidden: Vec<usize> = serde_json::from_value(a.meta["hidden"].clone())?;
        let blocks = a.meta_u64("blocks")? as usize;
        let latent_dim = a.meta_u64("latent_dim")? as usize;
        let mut p = PreGenerator::new(0, schema, blocks, latent_dim, &hidden);
        p.params.load_bytes(a.blob("params")?)?;
        if p.params.fingerprint() != a.meta_str("fingerprint")? {
            return Err(Error::validation("pre-generator checkpoint fingerprint mismatch"));
        }
        p.stage = serde_json::from_value(a.meta["stage"].clone())?;
        p.generator_fingerprint = a.meta_str("generator_fingerprint")?.to_string();
        p.encoder_fingerprint = a.meta_str("encoder_fingerprint")?.to_string();
        Ok(p)
    }
}

/// Reconstruct an image from a raw attribute vector: `G(P(f))`.
pub fn reconstruct(p: &PreGenerator, g: &GeneratorNet, f: &FeatureVector) -> Result<Image> {
    Ok(reconstruct_batch(p, g, &[f])?.pop().unwrap())
}

pub fn reconstruct_batch(
    p: &PreGenerator,
    gen: &GeneratorNet,
    fs: &[&FeatureVector],
) -> Result<Vec<Image>> {
    let codes = p.map_features(fs)?;
    let refs: Vec<&StyleCode> = codes.iter().collect();
    gen.generate_batch(&refs)
}

// ---- losses ---------------------------------------------------------------------

/// Latent-statistics penalty `|mean(v)| + |1 - std(v)|` over the concatenated
/// block vectors; population standard deviation, absolute value on the mean
/// term so the loss is bounded below by zero.
pub fn distribution_loss(n: &StyleCode) -> f64 {
    let v = n.concatenated();
    let (mu, sigma) = row_stats(&v);
    mu.abs() + (1.0 - sigma).abs()
}

/// Mean squared pixel difference; range `[0,1]` for images in `[0,1]`.
pub fn pixel_loss(x: &Image, xr: &Image) -> Result<f64> {
    if x.resolution() != xr.resolution() {
        return Err(Error::validation(format!(
            "image shape mismatch: {} vs {}",
            x.resolution(),
            xr.resolution()
        )));
    }
    let n = x.data().len();
    Ok(x.data()
        .iter()
        .zip(xr.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64)
}

/// Squared distance between the attack-role embeddings of the two images.
pub fn facenet_loss(x: &Image, xr: &Image, f: &EmbeddingNetwork) -> Result<f64> {
    if f.role != EmbedRole::Attack {
        return Err(Error::RoleViolation(format!(
            "reconstruction loss requires the attack-role embedder, got {}",
            f.role
        )));
    }
    embedding_distance(&f.embed(x), &f.embed(xr))
}

/// Weights of the combined objective. The latent-statistics term defaults to
/// 0.01 and stays fixed across schedule stages.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub pixel: f64,
    pub embed: f64,
    pub dist: f64,
}

impl LossWeights {
    pub const FIXED_DIST_WEIGHT: f64 = 0.01;

    pub fn pixel_stage() -> Self {
        LossWeights {
            pixel: 1.0,
            embed: 0.0,
            dist: Self::FIXED_DIST_WEIGHT,
        }
    }

    pub fn embed_stage() -> Self {
        LossWeights {
            pixel: 0.0,
            embed: 1.0,
            dist: Self::FIXED_DIST_WEIGHT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixel < 0.0 || self.embed < 0.0 || self.dist < 0.0 {
            return Err(Error::validation("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Build the combined loss on the tape. `targets` are the images being
/// reconstructed; `target_emb` are their attack embeddings (precomputed since
/// the embedder is frozen). Returns the scalar loss var.
#[allow(clippy::too_many_arguments)]
fn total_loss_graph(
    g: &mut Graph,
    pregen: &PreGenerator,
    pv_p: &[Var],
    gen: &GeneratorNet,
    pv_g: &[Var],
    embedder: Option<(&EmbeddingNetwork, &[Var], &Tensor)>,
    f_batch: Var,
    targets: &Tensor,
    weights: &LossWeights,
) -> Var {
    let n = targets.shape()[0];
    let latents = pregen.forward(g, pv_p, f_batch);
    let d = pregen.latent_dim;
    let z: Vec<Var> = (0..pregen.blocks)
        .map(|i| g.slice_cols(latents, i * d, (i + 1) * d))
        .collect();
    let img = gen.forward(g, pv_g, &z, n);
    let mut loss: Option<Var> = None;
    let mut add_term = |g: &mut Graph, term: Var, w: f64| {
        let scaled = g.scale(term, w);
        loss = Some(match loss {
            Some(acc) => g.add(acc, scaled),
            None => scaled,
        });
    };
    if weights.pixel > 0.0 {
        let t = g.constant(targets.clone());
        let diff = g.sub(img, t);
        let sq = g.square(diff);
        let pix = g.mean_all(sq);
        add_term(g, pix, weights.pixel);
    }
    if weights.embed > 0.0 {
        let (emb, pv_f, target_emb) = embedder.expect("embed weight > 0 requires embedder");
        let er = emb.forward(g, pv_f, img);
        let et = g.constant(target_emb.clone());
        let diff = g.sub(er, et);
        let sq = g.square(diff);
        let total = g.sum_all(sq);
        let per_sample = g.scale(total, 1.0 / n as f64);
        add_term(g, per_sample, weights.embed);
    }
    if weights.dist > 0.0 {
        let dl = g.row_dist_loss(latents);
        add_term(g, dl, weights.dist);
    }
    loss.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)))
}

/// Combined loss value and its gradient with respect to the pre-generator
/// parameters. The generator (and embedder, when weighted) participate in the
/// forward/backward pass but their parameters are inserted frozen.
pub fn total_loss(
    pregen: &PreGenerator,
    gen: &GeneratorNet,
    embedder: Option<&EmbeddingNetwork>,
    fs: &[&FeatureVector],
    targets: &[&Image],
    weights: &LossWeights,
) -> Result<(f64, Vec<Tensor>)> {
    weights.validate()?;
    if let Some(e) = embedder {
        if e.role != EmbedRole::Attack {
            return Err(Error::RoleViolation(format!(
                "reconstruction loss requires the attack-role embedder, got {}",
                e.role
            )));
        }
    }
    if weights.embed > 0.0 && embedder.is_none() {
        return Err(Error::validation(
            "embedding weight is positive but no embedder was supplied",
        ));
    }
    let f_t = pregen.feature_tensor(fs)?;
    let x_t = Image::batch_tensor(targets);
    let target_emb = embedder.map(|e| {
        let rows = e.embed_batch(targets);
        let m = e.embed_dim();
        let mut data = Vec::with_capacity(rows.len() * m);
        for r in &rows {
            data.extend_from_slice(r);
        }
        Tensor::from_vec(&[rows.len(), m], data)
    });

    let mut g = Graph::new();
    let pv_p = pregen.params.insert_into(&mut g, true);
    let pv_g = gen.params.insert_into(&mut g, false);
    let emb_ctx = embedder.map(|e| (e, e.params.insert_into(&mut g, false)));
    let f_var = g.constant(f_t);
    let emb_arg = emb_ctx
        .as_ref()
        .map(|(e, pv)| (*e, pv.as_slice(), target_emb.as_ref().unwrap()));
    let loss = total_loss_graph(
        &mut g, pregen, &pv_p, gen, &pv_g, emb_arg, f_var, &x_t, weights,
    );
    let value = g.value(loss).item();
    g.backward(loss);
    let grads = pregen.params.grads_from(&g, &pv_p);
    Ok((value, grads))
}

// ---- schedules & training ----------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageConfig {
    pub weights: LossWeights,
    pub max_epochs: usize,
    /// Epochs without validation improvement before the stage stops.
    pub patience: usize,
}

/// Ordered training stages. The default starts with pure pixel loss, then
/// switches to the embedding loss warm-started from the pixel-stage result;
/// the latent-statistics weight stays fixed throughout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub stages: Vec<StageConfig>,
}

impl TrainSchedule {
    pub fn two_stage(max_epochs: usize, patience: usize) -> Self {
        TrainSchedule {
            stages: vec![
                StageConfig {
                    weights: LossWeights::pixel_stage(),
                    max_epochs,
                    patience,
                },
                StageConfig {
                    weights: LossWeights::embed_stage(),
                    max_epochs,
                    patience,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::validation("schedule needs at least one stage"));
        }
        for s in &self.stages {
            s.weights.validate()?;
            if (s.weights.dist - LossWeights::FIXED_DIST_WEIGHT).abs() > 1e-12 {
                return Err(Error::validation(format!(
                    "the latent-statistics weight is fixed at {}, got {}",
                    LossWeights::FIXED_DIST_WEIGHT,
                    s.weights.dist
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PregenTrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub val_fraction: f64,
    pub hidden: Vec<usize>,
}

impl Default for PregenTrainConfig {
    fn default() -> Self {
        PregenTrainConfig {
            seed: 0,
            batch_size: 32,
            learning_rate: 1e-3,
            val_fraction: 0.2,
            hidden: vec![256, 256],
        }
    }
}

/// One training-log row, written to the run's CSV log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PregenLogRow {
    pub stage: usize,
    pub epoch: usize,
    pub w_pixel: f64,
    pub w_embed: f64,
    pub w_dist: f64,
    pub train_loss: f64,
    pub val_pixel_mse: f64,
    pub val_embed_dist: f64,
    pub latent_mean: f64,
    pub latent_std: f64,
}

pub struct ImageBasedOutcome {
    pub pixel_model: PreGenerator,
    pub fn_model: PreGenerator,
    pub log: Vec<PregenLogRow>,
    /// Optimizer steps actually taken across all stages (the budget the
    /// noise-based baseline is granted for a fair comparison).
    pub steps_taken: usize,
}

/// Image-based training: fit `G(P(f))` to the inverted dataset's images over
/// the schedule's stages. Stage 1's best checkpoint becomes the pixel model;
/// the final stage's best becomes the embedding model, warm-started from the
/// pixel model. The generator and embedder are bitwise frozen.
pub fn train_image_based(
    gen: &GeneratorNet,
    embedder: &EmbeddingNetwork,
    inverted: &InvertedDataset,
    schedule: &TrainSchedule,
    config: &PregenTrainConfig,
) -> Result<ImageBasedOutcome> {
    schedule.validate()?;
    if embedder.role != EmbedRole::Attack {
        return Err(Error::RoleViolation(format!(
            "image-based training requires the attack-role embedder, got {}",
            embedder.role
        )));
    }
    if inverted.is_empty() {
        return Err(Error::validation("inverted dataset is empty"));
    }
    if inverted.encoder_fingerprint.is_empty() {
        return Err(Error::validation("inverted dataset lacks an encoder fingerprint"));
    }

    let g_before = gen.params.to_bytes();
    let f_before = embedder.params.to_bytes();

    let mut pregen = PreGenerator::new(
        config.seed,
        inverted.schema.clone(),
        gen.num_blocks(),
        gen.latent_dim(),
        &config.hidden,
    );
    pregen.generator_fingerprint = gen.fingerprint();
    pregen.encoder_fingerprint = inverted.encoder_fingerprint.clone();

    // validation split over pairs
    let mut split_rng = rng::rng_for(config.seed ^ 0x9e37, Stream::Split);
    let perm = rng::permutation(&mut split_rng, inverted.len());
    let n_val = ((inverted.len() as f64) * config.val_fraction).round() as usize;
    let n_val = n_val.clamp(1, inverted.len() - 1);
    let val_idx: Vec<usize> = perm[..n_val].to_vec();
    let train_idx: Vec<usize> = perm[n_val..].to_vec();

    // frozen targets: attack embeddings of every image
    let all_images: Vec<&Image> = inverted.pairs.iter().map(|(_, x)| x).collect();
    let all_emb = embedder.embed_batch(&all_images);
    let emb_dim = embedder.embed_dim();

    let mut batch_rng = rng::rng_for(config.seed, Stream::PregenBatch);
    let mut log = Vec::new();
    let mut steps_taken = 0usize;
    let mut pixel_model: Option<PreGenerator> = None;

    for (stage_idx, stage) in schedule.stages.iter().enumerate() {
        let mut opt = Adam::new(config.learning_rate);
        let mut best: Option<(f64, Vec<u8>)> = None;
        let mut best_epoch = 0usize;
        for epoch in 0..stage.max_epochs {
            let order = {
                let shuffled = rng::permutation(&mut batch_rng, train_idx.len());
                shuffled.iter().map(|&i| train_idx[i]).collect::<Vec<_>>()
            };
            let mut loss_sum = 0.0;
            let mut steps = 0usize;
            for chunk in order.chunks(config.batch_size) {
                let fs: Vec<&FeatureVector> =
                    chunk.iter().map(|&i| &inverted.pairs[i].0).collect();
                let xs: Vec<&Image> = chunk.iter().map(|&i| &inverted.pairs[i].1).collect();
                let f_t = pregen.feature_tensor(&fs)?;
                let x_t = Image::batch_tensor(&xs);
                let target_emb = if stage.weights.embed > 0.0 {
                    let mut data = Vec::with_capacity(chunk.len() * emb_dim);
                    for &i in chunk {
                        data.extend_from_slice(&all_emb[i]);
                    }
                    Some(Tensor::from_vec(&[chunk.len(), emb_dim], data))
                } else {
                    None
                };
                let mut g = Graph::new();
                let pv_p = pregen.params.insert_into(&mut g, true);
                let pv_g = gen.params.insert_into(&mut g, false);
                let pv_f = if stage.weights.embed > 0.0 {
                    embedder.params.insert_into(&mut g, false)
                } else {
                    Vec::new()
                };
                let f_var = g.constant(f_t);
                let emb_arg = target_emb
                    .as_ref()
                    .map(|te| (embedder, pv_f.as_slice(), te));
                let loss = total_loss_graph(
                    &mut g,
                    &pregen,
                    &pv_p,
                    gen,
                    &pv_g,
                    emb_arg,
                    f_var,
                    &x_t,
                    &stage.weights,
                );
                let v = g.value(loss).item();
                if !v.is_finite() {
                    return Err(Error::numerical(format!(
                        "pre-generator loss became non-finite at stage {stage_idx} epoch {epoch}"
                    )));
                }
                g.backward(loss);
                let grads = pregen.params.grads_from(&g, &pv_p);
                opt.step(&mut pregen.params, &grads);
                loss_sum += v;
                steps += 1;
            }
            steps_taken += steps;

            let metrics = validation_metrics(&pregen, gen, embedder, inverted, &val_idx, &all_emb)?;
            log.push(PregenLogRow {
                stage: stage_idx,
                epoch,
                w_pixel: stage.weights.pixel,
                w_embed: stage.weights.embed,
                w_dist: stage.weights.dist,
                train_loss: loss_sum / steps.max(1) as f64,
                val_pixel_mse: metrics.pixel_mse,
                val_embed_dist: metrics.embed_dist,
                latent_mean: metrics.latent_mean,
                latent_std: metrics.latent_std,
            });
            // stage metric: what this stage directly optimizes
            let stage_metric = if stage.weights.embed > 0.0 {
                metrics.embed_dist
            } else {
                metrics.pixel_mse
            };
            if best.as_ref().map_or(true, |(b, _)| stage_metric < *b) {
                best = Some((stage_metric, pregen.params.to_bytes()));
                best_epoch = epoch;
            } else if epoch - best_epoch >= stage.patience {
                break;
            }
        }
        let (_, bytes) = best.expect("stage ran at least one epoch");
        pregen.params.load_bytes(&bytes)?;
        if stage_idx == 0 {
            let mut snapshot = PreGenerator::new(
                config.seed,
                inverted.schema.clone(),
                gen.num_blocks(),
                gen.latent_dim(),
                &config.hidden,
            );
            snapshot.params.load_bytes(&bytes)?;
            snapshot.stage = PregenStage::Pixel;
            snapshot.generator_fingerprint = pregen.generator_fingerprint.clone();
            snapshot.encoder_fingerprint = pregen.encoder_fingerprint.clone();
            pixel_model = Some(snapshot);
        }
    }

    if gen.params.to_bytes() != g_before {
        return Err(Error::numerical(
            "generator weights changed during pre-generator training",
        ));
    }
    if embedder.params.to_bytes() != f_before {
        return Err(Error::numerical(
            "attack embedder weights changed during pre-generator training",
        ));
    }

    let pixel_model = pixel_model.unwrap_or_else(|| {
        // single-stage schedule: the final model doubles as the pixel model
        let mut p = PreGenerator::new(
            config.seed,
            inverted.schema.clone(),
            gen.num_blocks(),
            gen.latent_dim(),
            &config.hidden,
        );
        p.params.load_bytes(&pregen.params.to_bytes()).unwrap();
        p.stage = PregenStage::Pixel;
        p.generator_fingerprint = pregen.generator_fingerprint.clone();
        p.encoder_fingerprint = pregen.encoder_fingerprint.clone();
        p
    });
    pregen.stage = PregenStage::Fn;
    Ok(ImageBasedOutcome {
        pixel_model,
        fn_model: pregen,
        log,
        steps_taken,
    })
}

struct ValMetrics {
    pixel_mse: f64,
    embed_dist: f64,
    latent_mean: f64,
    latent_std: f64,
}

fn validation_metrics(
    pregen: &PreGenerator,
    gen: &GeneratorNet,
    embedder: &EmbeddingNetwork,
    inverted: &InvertedDataset,
    val_idx: &[usize],
    all_emb: &[Vec<f64>],
) -> Result<ValMetrics> {
    let fs: Vec<&FeatureVector> = val_idx.iter().map(|&i| &inverted.pairs[i].0).collect();
    let codes = pregen.map_features(&fs)?;
    let refs: Vec<&StyleCode> = codes.iter().collect();
    let recon = gen.generate_batch(&refs)?;
    let mut pixel_sum = 0.0;
    for (&i, r) in val_idx.iter().zip(&recon) {
        pixel_sum += pixel_loss(&inverted.pairs[i].1, r)?;
    }
    let recon_refs: Vec<&Image> = recon.iter().collect();
    let recon_emb = embedder.embed_batch(&recon_refs);
    let mut emb_sum = 0.0;
    for (&i, re) in val_idx.iter().zip(&recon_emb) {
        emb_sum += embedding_distance(&all_emb[i], re)?;
    }
    let concat: Vec<f64> = codes.iter().flat_map(|c| c.concatenated()).collect();
    let (latent_mean, latent_std) = row_stats(&concat);
    Ok(ValMetrics {
        pixel_mse: pixel_sum / val_idx.len() as f64,
        embed_dist: emb_sum / val_idx.len() as f64,
        latent_mean,
        latent_std,
    })
}

/// Mean validation pixel MSE of `G(P(f))` against images of the given pairs.
pub fn pair_pixel_mse(
    pregen: &PreGenerator,
    gen: &GeneratorNet,
    pairs: &[(FeatureVector, Image)],
) -> Result<f64> {
    let fs: Vec<&FeatureVector> = pairs.iter().map(|(f, _)| f).collect();
    let recon = reconstruct_batch(pregen, gen, &fs)?;
    let mut total = 0.0;
    for ((_, x), r) in pairs.iter().zip(&recon) {
        total += pixel_loss(x, r)?;
    }
    Ok(total / pairs.len() as f64)
}

// ---- noise-based baseline ------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseTrainConfig {
    pub seed: u64,
    pub samples: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
}

impl Default for NoiseTrainConfig {
    fn default() -> Self {
        NoiseTrainConfig {
            seed: 0,
            samples: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
            hidden: vec![256, 256],
        }
    }
}

/// Noise-based baseline: sample Gaussian latents, render them, query the
/// encoder once per sample to get `f = E(G(n))`, then regress `P(f)` onto the
/// latents for `steps` optimizer steps. No gradient ever reaches the encoder;
/// the `(f, n)` targets are fixed before optimization starts.
pub fn train_noise_based(
    gen: &GeneratorNet,
    encoder: &BlackboxEncoder,
    steps: usize,
    config: &NoiseTrainConfig,
) -> Result<PreGenerator> {
    let b = gen.num_blocks();
    let d = gen.latent_dim();
    let mut sample_rng = rng::rng_for(config.seed, Stream::Noise);
    let mut codes: Vec<StyleCode> = Vec::with_capacity(config.samples);
    let mut features: Vec<FeatureVector> = Vec::with_capacity(config.samples);
    for chunk_start in (0..config.samples).step_by(64) {
        let count = 64.min(config.samples - chunk_start);
        let chunk_codes: Vec<StyleCode> = (0..count)
            .map(|_| {
                StyleCode::new((0..b).map(|_| rng::normal_vec(&mut sample_rng, d)).collect())
                    .expect("normal draws are finite")
            })
            .collect();
        let refs: Vec<&StyleCode> = chunk_codes.iter().collect();
        let imgs = gen.generate_batch(&refs)?;
        let img_refs: Vec<&Image> = imgs.iter().collect();
        let fs = encoder.query(&img_refs)?;
        codes.extend(chunk_codes);
        features.extend(fs);
    }

    let mut pregen = PreGenerator::new(
        config.seed ^ 0x51,
        encoder.schema().clone(),
        b,
        d,
        &config.hidden,
    );
    pregen.stage = PregenStage::Noise;
    pregen.generator_fingerprint = gen.fingerprint();
    pregen.encoder_fingerprint = encoder.fingerprint().to_string();

    let targets: Vec<Vec<f64>> = codes.iter().map(|c| c.concatenated()).collect();
    let mut opt = Adam::new(config.learning_rate);
    let mut batch_rng = rng::rng_for(config.seed, Stream::PregenBatch);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..steps {
        if step * config.batch_size % config.samples.max(1) == 0 || order.is_empty() {
            order = rng::permutation(&mut batch_rng, config.samples);
        }
        let lo = (step * config.batch_size) % config.samples;
        let idx: Vec<usize> = (0..config.batch_size)
            .map(|k| order[(lo + k) % config.samples])
            .collect();
        let fs: Vec<&FeatureVector> = idx.iter().map(|&i| &features[i]).collect();
        let f_t = pregen.feature_tensor(&fs)?;
        let mut t_data = Vec::with_capacity(idx.len() * b * d);
        for &i in &idx {
            t_data.extend_from_slice(&targets[i]);
        }
        let t_t = Tensor::from_vec(&[idx.len(), b * d], t_data);
        let mut g = Graph::new();
        let pv = pregen.params.insert_into(&mut g, true);
        let f_var = g.constant(f_t);
        let out = pregen.forward(&mut g, &pv, f_var);
        let t_var = g.constant(t_t);
        let diff = g.sub(out, t_var);
        let sq = g.square(diff);
        let loss = g.mean_all(sq);
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::numerical(format!(
                "noise-based training loss became non-finite at step {step}"
            )));
        }
        g.backward(loss);
        let grads = pregen.params.grads_from(&g, &pv);
        opt.step(&mut pregen.params, &grads);
    }
    Ok(pregen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, AttributeSchema};
    use crate::embeddings::EmbedArch;
    use crate::generator::GeneratorArch;

    fn tiny_gen(seed: u64) -> GeneratorNet {
        GeneratorNet::new(
            seed,
            32,
            GeneratorArch {
                latent_dim: 8,
                base_channels: 12,
                min_channels: 4,
            },
        )
        .unwrap()
    }

    fn tiny_embedder(role: EmbedRole) -> EmbeddingNetwork {
        EmbeddingNetwork::new(
            4,
            role,
            32,
            EmbedArch {
                c1: 6,
                c2: 8,
                c3: 12,
                embed_dim: 8,
            },
        )
    }

    #[test]
    fn distribution_loss_analytic_cases() {
        let standardized = StyleCode::new(vec![vec![1.0, -1.0]]).unwrap();
        assert!(distribution_loss(&standardized).abs() < 1e-12);
        let ones = StyleCode::new(vec![vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!((distribution_loss(&ones) - 2.0).abs() < 1e-12);
        // large gaussian sample stays near zero
        let code = crate::generator::sample_style(3, 4, 2500);
        assert!(distribution_loss(&code) < 0.03);
    }

    #[test]
    fn pixel_loss_bounds() {
        let schema = AttributeSchema::continuous_all();
        let ds = synth_dataset(1, 2, 32, &schema).unwrap();
        assert_eq!(pixel_loss(&ds.images[0], &ds.images[0]).unwrap(), 0.0);
        let ones = Image::from_raw_clamped(32, vec![1.0; 3 * 32 * 32]);
        let zeros = Image::from_raw_clamped(32, vec![0.0; 3 * 32 * 32]);
        assert_eq!(pixel_loss(&ones, &zeros).unwrap(), 1.0);
        let loss = pixel_loss(&ds.images[0], &ds.images[1]).unwrap();
        assert!((0.0..=1.0).contains(&loss));
    }

    #[test]
    fn facenet_loss_identity_and_role_seal() {
        let schema = AttributeSchema::continuous_all();
        let ds = synth_dataset(1, 2, 32, &schema).unwrap();
        let attack = tiny_embedder(EmbedRole::Attack);
        assert!(facenet_loss(&ds.images[0], &ds.images[0], &attack).unwrap() < 1e-10);
        let eval = tiny_embedder(EmbedRole::Eval1);
        let err = facenet_loss(&ds.images[0], &ds.images[1], &eval).unwrap_err();
        assert!(matches!(err, Error::RoleViolation(_)));
    }

    #[test]
    fn total_loss_weight_selection_and_linearity() {
        let schema = AttributeSchema::continuous(&["brightness", "face_size"]).unwrap();
        let ds = synth_dataset(5, 4, 32, &schema).unwrap();
        let gen = tiny_gen(1);
        let emb = tiny_embedder(EmbedRole::Attack);
        let pregen = PreGenerator::new(2, schema.clone(), gen.num_blocks(), gen.latent_dim(), &[32]);
        let fs: Vec<FeatureVector> = ds.attributes.clone().unwrap();
        let f_refs: Vec<&FeatureVector> = fs.iter().collect();
        let x_refs: Vec<&Image> = ds.images.iter().collect();

        // dist-only weights reduce to the latent-statistics loss
        let w = LossWeights {
            pixel: 0.0,
            embed: 0.0,
            dist: 1.0,
        };
        let (dist_only, _) = total_loss(&pregen, &gen, None, &f_refs, &x_refs, &w).unwrap();
        let codes = pregen.map_features(&f_refs).unwrap();
        let expect: f64 =
            codes.iter().map(distribution_loss).sum::<f64>() / codes.len() as f64;
        assert!((dist_only - expect).abs() < 1e-9);

        // linearity: each weighted term scales independently
        let wp = LossWeights {
            pixel: 1.0,
            embed: 0.0,
            dist: 0.0,
        };
        let (pix, _) = total_loss(&pregen, &gen, None, &f_refs, &x_refs, &wp).unwrap();
        let (pix3, _) = total_loss(
            &pregen,
            &gen,
            None,
            &f_refs,
            &x_refs,
            &LossWeights {
                pixel: 3.0,
                embed: 0.0,
                dist: 0.0,
            },
        )
        .unwrap();
        assert!((pix3 - 3.0 * pix).abs() < 1e-9);

        let we = LossWeights {
            pixel: 0.0,
            embed: 1.0,
            dist: 0.0,
        };
        let (embv, _) = total_loss(&pregen, &gen, Some(&emb), &f_refs, &x_refs, &we).unwrap();
        let wall = LossWeights {
            pixel: 0.7,
            embed: 0.2,
            dist: 0.1,
        };
        // dist=0.1 is not the schedule default; total_loss itself allows it
        let (all, _) = total_loss(&pregen, &gen, Some(&emb), &f_refs, &x_refs, &wall).unwrap();
        assert!((all - (0.7 * pix + 0.2 * embv + 0.1 * dist_only)).abs() < 1e-6);

        // negative weights rejected
        assert!(total_loss(
            &pregen,
            &gen,
            None,
            &f_refs,
            &x_refs,
            &LossWeights {
                pixel: -1.0,
                embed: 0.0,
                dist: 0.0,
            },
        )
        .is_err());
    }

    #[test]
    fn total_loss_gradient_matches_finite_difference() {
        // tiny instance: 8x8 generator output would need resolution 8; the
        // smallest supported style generator is 32, so keep everything else
        // minimal and check directions through the full stack.
        let schema = AttributeSchema::continuous(&["brightness"]).unwrap();
        let ds = synth_dataset(7, 2, 32, &schema).unwrap();
        let gen = tiny_gen(3);
        let emb = tiny_embedder(EmbedRole::Attack);
        let mut pregen =
            PreGenerator::new(5, schema.clone(), gen.num_blocks(), gen.latent_dim(), &[8]);
        let fs: Vec<FeatureVector> = ds.attributes.clone().unwrap();
        let f_refs: Vec<&FeatureVector> = fs.iter().collect();
        let x_refs: Vec<&Image> = ds.images.iter().collect();
        let w = LossWeights {
            pixel: 1.0,
            embed: 1.0,
            dist: 0.01,
        };
        let (_, grads) = total_loss(&pregen, &gen, Some(&emb), &f_refs, &x_refs, &w).unwrap();
        let flat_grad: Vec<f64> = grads.iter().flat_map(|t| t.data().to_vec()).collect();

        let mut rng = rng::rng_for(99, Stream::Probe);
        let eps = 1e-4;
        let n_params: Vec<usize> = (0..pregen.params.len())
            .map(|i| pregen.params.get(i).value.numel())
            .collect();
        let total: usize = n_params.iter().sum();
        for _ in 0..20 {
            let dir = rng::normal_vec(&mut rng, total);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let analytic: f64 = flat_grad
                .iter()
                .zip(&dir)
                .map(|(g, d)| g * d / norm)
                .sum();
            let eval_at = |scale: f64, p: &mut PreGenerator| {
                let mut off = 0;
                for i in 0..p.params.len() {
                    let t = &mut p.params.get_mut(i).value;
                    for v in t.data_mut() {
                        *v += scale * dir[off] / norm;
                        off += 1;
                    }
                }
                let (l, _) = total_loss(p, &gen, Some(&emb), &f_refs, &x_refs, &w).unwrap();
                // undo
                let mut off = 0;
                for i in 0..p.params.len() {
                    let t = &mut p.params.get_mut(i).value;
                    for v in t.data_mut() {
                        *v -= scale * dir[off] / norm;
                        off += 1;
                    }
                }
                l
            };
            let fp = eval_at(eps, &mut pregen);
            let fm = eval_at(-eps, &mut pregen);
            let fd = (fp - fm) / (2.0 * eps);
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (fd - analytic).abs() / denom < 1e-3,
                "directional derivative mismatch: fd={fd} analytic={analytic}"
            );
        }
    }

    #[test]
    fn reconstruct_is_total_and_deterministic() {
        let schema = AttributeSchema::continuous(&["brightness", "face_size"]).unwrap();
        let gen = tiny_gen(8);
        let pregen = PreGenerator::new(2, schema, gen.num_blocks(), gen.latent_dim(), &[16]);
        let zero = FeatureVector::new(vec![0.0, 0.0]);
        let img1 = reconstruct(&pregen, &gen, &zero).unwrap();
        let img2 = reconstruct(&pregen, &gen, &zero).unwrap();
        assert_eq!(img1, img2);
        assert!(img1.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // dimension mismatch rejected
        let bad = FeatureVector::new(vec![0.0; 5]);
        assert!(reconstruct(&pregen, &gen, &bad).is_err());
    }

    #[test]
    fn schedule_rejects_drifting_dist_weight() {
        let mut sched = TrainSchedule::two_stage(5, 2);
        sched.stages[1].weights.dist = 0.5;
        assert!(sched.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let schema = AttributeSchema::continuous(&["brightness"]).unwrap();
        let gen = tiny_gen(4);
        let mut p = PreGenerator::new(6, schema, gen.num_blocks(), gen.latent_dim(), &[16]);
        p.stage = PregenStage::Fn;
        p.generator_fingerprint = gen.fingerprint();
        p.encoder_fingerprint = "abc123".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.fva");
        p.save(&path).unwrap();
        let loaded = PreGenerator::load(&path).unwrap();
        assert_eq!(loaded.stage, PregenStage::Fn);
        assert_eq!(loaded.encoder_fingerprint, "abc123");
        assert_eq!(loaded.fingerprint(), p.fingerprint());
    }
}
