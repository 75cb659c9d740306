//! Identity-embedding networks.
//!
//! One network (role `attack`) sits inside the reconstruction loss; two
//! independently trained networks (roles `eval-1`, `eval-2`) are reserved for
//! evaluation and must never appear in a training loss. The role tag is
//! enforced at checkpoint load and again at every loss construction.

use crate::artifact::Archive;
use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Adam, Conv, Linear, ParamSet, LEAKY_SLOPE};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedRole {
    Attack,
    Eval1,
    Eval2,
}

impl std::fmt::Display for EmbedRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EmbedRole::Attack => write!(f, "attack"),
            EmbedRole::Eval1 => write!(f, "eval-1"),
            EmbedRole::Eval2 => write!(f, "eval-2"),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EmbedArch {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub embed_dim: usize,
}

impl Default for EmbedArch {
    fn default() -> Self {
        EmbedArch {
            c1: 10,
            c2: 20,
            c3: 40,
            embed_dim: 32,
        }
    }
}

/// Convnet mapping an image to a unit-norm embedding vector.
pub struct EmbeddingNetwork {
    pub params: ParamSet,
    pub role: EmbedRole,
    pub arch: EmbedArch,
    pub native_resolution: usize,
    conv1: Conv,
    conv2: Conv,
    conv3: Conv,
    head: Linear,
}

impl EmbeddingNetwork {
    pub fn new(seed: u64, role: EmbedRole, native_resolution: usize, arch: EmbedArch) -> Self {
        let mut rng = rng::rng_for(seed, Stream::EmbedInit);
        let mut ps = ParamSet::new();
        let conv1 = Conv::new(&mut ps, &mut rng, "e.conv1", 3, arch.c1, 3, 2);
        let conv2 = Conv::new(&mut ps, &mut rng, "e.conv2", arch.c1, arch.c2, 3, 2);
        let conv3 = Conv::new(&mut ps, &mut rng, "e.conv3", arch.c2, arch.c3, 3, 2);
        let head = Linear::new(&mut ps, &mut rng, "e.head", arch.c3, arch.embed_dim);
        EmbeddingNetwork {
            params: ps,
            role,
            arch,
            native_resolution,
            conv1,
            conv2,
            conv3,
            head,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    /// Graph forward from an image batch var; resizes bilinearly to the
    /// native resolution when needed so gradients stay defined.
    pub fn forward(&self, g: &mut Graph, pv: &[Var], x: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        let x = if shape[2] != self.native_resolution || shape[3] != self.native_resolution {
            g.bilinear_resize(x, self.native_resolution, self.native_resolution)
        } else {
            x
        };
        let h = self.conv1.forward(g, pv, x);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv2.forward(g, pv, h);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv3.forward(g, pv, h);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let pooled = g.global_avg_pool(h);
        let e = self.head.forward(g, pv, pooled);
        g.row_l2_normalize(e, 1e-12)
    }

    /// Unit-norm embedding of one image.
    pub fn embed(&self, image: &Image) -> Vec<f64> {
        self.embed_batch(&[image]).pop().unwrap()
    }

    /// Unit-norm embeddings of an image batch.
    pub fn embed_batch(&self, images: &[&Image]) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let pv = self.params.insert_into(&mut g, false);
        let x = g.constant(Image::batch_tensor(images));
        let e = self.forward(&mut g, &pv, x);
        let v = g.value(e);
        let m = self.embed_dim();
        (0..images.len())
            .map(|i| v.data()[i * m..(i + 1) * m].to_vec())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new(serde_json::json!({
            "kind": "embedding",
            "role": serde_json::to_value(self.role)?,
            "arch": serde_json::to_value(self.arch)?,
            "native_resolution": self.native_resolution,
            "fingerprint": self.params.fingerprint(),
        }));
        a.add_blob("params", self.params.to_bytes());
        a.save(path)
    }

    /// Load a checkpoint, refusing any whose stored role differs from the
    /// role the caller intends to use it in.
    pub fn load_for_role(path: &Path, expected: EmbedRole) -> Result<Self> {
        let a = Archive::load(path)?;
        if a.meta_str("kind")? != "embedding" {
            return Err(Error::validation("artifact is not an embedding checkpoint"));
        }
        let role: EmbedRole = serde_json::from_value(a.meta["role"].clone())?;
        if role != expected {
            return Err(Error::RoleViolation(format!(
                "checkpoint has role {role}, refusing to load it as {expected}"
            )));
        }
        let arch: EmbedArch = serde_json::from_value(a.meta["arch"].clone())?;
        let native = a.meta_u64("native_resolution")? as usize;
        let mut net = EmbeddingNetwork::new(0, role, native, arch);
        net.params.load_bytes(a.blob("params")?)?;
        if net.params.fingerprint() != a.meta_str("fingerprint")? {
            return Err(Error::validation("embedding checkpoint fingerprint mismatch"));
        }
        Ok(net)
    }
}

/// Squared distance between two unit-norm embeddings; range `[0, 4]`.
pub fn embedding_distance(e1: &[f64], e2: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::validation(format!(
            "embedding dimension mismatch: {} vs {}",
            e1.len(),
            e2.len()
        )));
    }
    Ok(e1.iter().zip(e2).map(|(a, b)| (a - b) * (a - b)).sum())
}

// ---- triplet training -------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbedTrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub triplets_per_batch: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub arch: EmbedArch,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        EmbedTrainConfig {
            seed: 0,
            epochs: 20,
            triplets_per_batch: 24,
            learning_rate: 2e-3,
            margin: 0.5,
            arch: EmbedArch::default(),
        }
    }
}

pub struct EmbedTrainOutcome {
    pub network: EmbeddingNetwork,
    pub val_accuracy: f64,
    pub curve: Vec<(usize, f64, f64)>, // epoch, train loss, val accuracy
}

/// Train an identity embedding with a triplet objective: anchors and
/// positives share an identity, negatives do not. Identities are split
/// disjointly into train/val; verification accuracy on val pairs is the
/// model-selection signal.
pub fn train_identity_embedding(
    dataset: &Dataset,
    role: EmbedRole,
    config: &EmbedTrainConfig,
) -> Result<EmbedTrainOutcome> {
    let ids = dataset
        .identity_ids
        .as_ref()
        .ok_or_else(|| Error::validation("embedding training needs identity labels"))?;
    let mut by_id: HashMap<u32, Vec<usize>> = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        by_id.entry(*id).or_default().push(i);
    }
    if by_id.len() < 2 {
        return Err(Error::validation(
            "embedding training needs at least two identities",
        ));
    }
    if by_id.values().any(|v| v.len() < 2) {
        return Err(Error::validation(
            "every identity needs at least two images for triplet training",
        ));
    }

    let (train_ds, val_ds) = crate::data::split_disjoint(dataset, 0.75, config.seed ^ 17, true)?;
    let train_ids = train_ds.identity_ids.as_ref().unwrap();
    let mut train_by_id: Vec<(u32, Vec<usize>)> = {
        let mut m: HashMap<u32, Vec<usize>> = HashMap::new();
        for (i, id) in train_ids.iter().enumerate() {
            m.entry(*id).or_default().push(i);
        }
        let mut v: Vec<_> = m.into_iter().collect();
        v.sort_by_key(|(id, _)| *id);
        v
    };
    train_by_id.retain(|(_, v)| v.len() >= 2);
    if train_by_id.len() < 2 {
        return Err(Error::validation(
            "identity split left fewer than two trainable identities",
        ));
    }

    let mut net = EmbeddingNetwork::new(
        config.seed,
        role,
        dataset.manifest.resolution,
        config.arch,
    );
    let mut opt = Adam::new(config.learning_rate);
    let mut rng = rng::rng_for(config.seed, Stream::EmbedBatch);
    let mut curve = Vec::new();
    let mut best: Option<(f64, Vec<u8>)> = None;

    let steps_per_epoch =
        (train_ds.len() / config.triplets_per_batch).max(1);
    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let mut anchors = Vec::new();
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for _ in 0..config.triplets_per_batch {
                let (a_id_idx, n_id_idx) = {
                    let a = rng.gen_range(0..train_by_id.len());
                    let mut nn = rng.gen_range(0..train_by_id.len() - 1);
                    if nn >= a {
                        nn += 1;
                    }
                    (a, nn)
                };
                let a_items = &train_by_id[a_id_idx].1;
                let ai = a_items[rng.gen_range(0..a_items.len())];
                let pi = {
                    let mut p = a_items[rng.gen_range(0..a_items.len() - 1)];
                    if p >= ai && a_items.len() > 1 {
                        // re-draw guaranteeing a different index
                        let pos = a_items.iter().position(|&x| x == ai).unwrap();
                        let mut k = rng.gen_range(0..a_items.len() - 1);
                        if k >= pos {
                            k += 1;
                        }
                        p = a_items[k];
                    }
                    p
                };
                let n_items = &train_by_id[n_id_idx].1;
                let ni = n_items[rng.gen_range(0..n_items.len())];
                anchors.push(&train_ds.images[ai]);
                positives.push(&train_ds.images[pi]);
                negatives.push(&train_ds.images[ni]);
            }
            let n = anchors.len();
            let mut g = Graph::new();
            let pv = net.params.insert_into(&mut g, true);
            let xa = g.constant(Image::batch_tensor(&anchors));
            let xp = g.constant(Image::batch_tensor(&positives));
            let xn = g.constant(Image::batch_tensor(&negatives));
            let ea = net.forward(&mut g, &pv, xa);
            let ep = net.forward(&mut g, &pv, xp);
            let en = net.forward(&mut g, &pv, xn);
            let ones = g.constant(Tensor::from_vec(&[1, net.embed_dim()], vec![1.0; net.embed_dim()]));
            let dap = {
                let d = g.sub(ea, ep);
                let d2 = g.square(d);
                g.matmul_nt(d2, ones) // [n,1]
            };
            let dan = {
                let d = g.sub(ea, en);
                let d2 = g.square(d);
                g.matmul_nt(d2, ones)
            };
            let diff = g.sub(dap, dan);
            let shifted = g.add_scalar(diff, config.margin);
            let hinge = g.leaky_relu(shifted, 0.0);
            let loss = g.mean_all(hinge);
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(Error::numerical(format!(
                    "triplet loss became non-finite at epoch {epoch}"
                )));
            }
            g.backward(loss);
            let grads = net.params.grads_from(&g, &pv);
            opt.step(&mut net.params, &grads);
            loss_sum += v;
            let _ = n;
        }
        let acc = verification_accuracy(&net, &val_ds, config.seed ^ 23)?;
        curve.push((epoch, loss_sum / steps_per_epoch as f64, acc));
        if best.as_ref().map_or(true, |(b, _)| acc > *b) {
            best = Some((acc, net.params.to_bytes()));
        }
    }
    let (val_accuracy, bytes) = best.expect("at least one epoch");
    net.params.load_bytes(&bytes)?;
    Ok(EmbedTrainOutcome {
        network: net,
        val_accuracy,
        curve,
    })
}

/// Best-threshold verification accuracy over seeded same/different pairs.
pub fn verification_accuracy(
    net: &EmbeddingNetwork,
    val: &Dataset,
    seed: u64,
) -> Result<f64> {
    let ids = val
        .identity_ids
        .as_ref()
        .ok_or_else(|| Error::validation("verification needs identity labels"))?;
    let mut by_id: HashMap<u32, Vec<usize>> = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        by_id.entry(*id).or_default().push(i);
    }
    let mut id_list: Vec<_> = by_id.iter().filter(|(_, v)| v.len() >= 2).collect();
    id_list.sort_by_key(|(id, _)| **id);
    if id_list.len() < 2 {
        return Err(Error::validation("verification needs two identities with pairs"));
    }
    let refs: Vec<&Image> = val.images.iter().collect();
    let emb = net.embed_batch(&refs);
    let mut rng = rng::rng_for(seed, Stream::Eval);
    let n_pairs = 96usize;
    let mut labelled: Vec<(f64, bool)> = Vec::with_capacity(n_pairs * 2);
    for _ in 0..n_pairs {
        // same-identity pair
        let (_, items) = id_list[rng.gen_range(0..id_list.len())];
        let i = items[rng.gen_range(0..items.len())];
        let j = {
            let mut j = items[rng.gen_range(0..items.len() - 1)];
            if j >= i {
                let pos = items.iter().position(|&x| x == i).unwrap();
                let mut k = rng.gen_range(0..items.len() - 1);
                if k >= pos {
                    k += 1;
                }
                j = items[k];
            }
            j
        };
        labelled.push((embedding_distance(&emb[i], &emb[j])?, true));
        // different-identity pair
        let a = rng.gen_range(0..id_list.len());
        let mut b = rng.gen_range(0..id_list.len() - 1);
        if b >= a {
            b += 1;
        }
        let i = id_list[a].1[rng.gen_range(0..id_list[a].1.len())];
        let j = id_list[b].1[rng.gen_range(0..id_list[b].1.len())];
        labelled.push((embedding_distance(&emb[i], &emb[j])?, false));
    }
    // best threshold sweep
    let mut dists: Vec<f64> = labelled.iter().map(|(d, _)| *d).collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best = 0.0f64;
    for t in &dists {
        let correct = labelled
            .iter()
            .filter(|(d, same)| (*d <= *t) == *same)
            .count();
        best = best.max(correct as f64 / labelled.len() as f64);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, synth_identity_dataset, AttributeSchema};

    fn tiny_arch() -> EmbedArch {
        EmbedArch {
            c1: 6,
            c2: 10,
            c3: 16,
            embed_dim: 12,
        }
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let net = EmbeddingNetwork::new(3, EmbedRole::Attack, 32, tiny_arch());
        let ds = synth_dataset(1, 3, 32, &AttributeSchema::continuous_all()).unwrap();
        for im in &ds.images {
            let e = net.embed(im);
            let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "norm {norm}");
            assert_eq!(e, net.embed(im));
        }
    }

    #[test]
    fn distance_bounds_and_errors() {
        let e = vec![1.0, 0.0, 0.0];
        assert_eq!(embedding_distance(&e, &e).unwrap(), 0.0);
        let anti = vec![-1.0, 0.0, 0.0];
        assert_eq!(embedding_distance(&e, &anti).unwrap(), 4.0);
        assert!(embedding_distance(&e, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn embed_gradient_matches_finite_difference() {
        // relative error of d/dpixel of the embedding distance below 1e-3
        let net = EmbeddingNetwork::new(5, EmbedRole::Attack, 32, tiny_arch());
        let ds = synth_dataset(2, 2, 32, &AttributeSchema::continuous_all()).unwrap();
        let target = net.embed(&ds.images[0]);
        let x0 = Image::batch_tensor(&[&ds.images[1]]);
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let pv = net.params.insert_into(&mut g, false);
            let xv = g.constant(x.clone());
            let e = net.forward(&mut g, &pv, xv);
            let t = g.constant(Tensor::from_vec(&[1, target.len()], target.clone()));
            let d = g.sub(e, t);
            let d2 = g.square(d);
            let s = g.sum_all(d2);
            g.value(s).item()
        };
        let mut g = Graph::new();
        let pv = net.params.insert_into(&mut g, false);
        let xv = g.leaf(x0.clone(), true);
        let e = net.forward(&mut g, &pv, xv);
        let t = g.constant(Tensor::from_vec(&[1, target.len()], target.clone()));
        let d = g.sub(e, t);
        let d2 = g.square(d);
        let s = g.sum_all(d2);
        g.backward(s);
        let analytic = g.grad(xv).unwrap().clone();
        let eps = 1e-4;
        let mut checked = 0;
        for idx in [10usize, 321, 1500, 2900] {
            let mut p = x0.clone();
            p.data_mut()[idx] += eps;
            let mut m = x0.clone();
            m.data_mut()[idx] -= eps;
            let fd = (eval(&p) - eval(&m)) / (2.0 * eps);
            let an = analytic.data()[idx];
            let denom = fd.abs().max(an.abs());
            if denom < 1e-7 {
                continue; // both effectively zero
            }
            assert!((fd - an).abs() / denom < 1e-3, "idx {idx}: {fd} vs {an}");
            checked += 1;
        }
        assert!(checked >= 2);
    }

    #[test]
    fn one_identity_rejected() {
        let ds = synth_identity_dataset(1, 1, 4, 32, &AttributeSchema::continuous_all()).unwrap();
        match train_identity_embedding(&ds, EmbedRole::Attack, &EmbedTrainConfig::default()) {
            Err(err) => assert!(err.to_string().contains("two identities"), "{err}"),
            Ok(_) => panic!("one-identity dataset was accepted"),
        }
    }

    #[test]
    fn role_seal_on_checkpoints() {
        let net = EmbeddingNetwork::new(9, EmbedRole::Eval1, 32, tiny_arch());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.fva");
        net.save(&path).unwrap();
        assert!(EmbeddingNetwork::load_for_role(&path, EmbedRole::Eval1).is_ok());
        match EmbeddingNetwork::load_for_role(&path, EmbedRole::Attack) {
            Err(Error::RoleViolation(_)) => {}
            Err(other) => panic!("unexpected error kind: {other}"),
            Ok(_) => panic!("role seal did not reject the checkpoint"),
        }
    }
}
