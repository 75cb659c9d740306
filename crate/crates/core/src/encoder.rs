//! The attack target: a black-box attribute encoder.
//!
//! [`BlackboxEncoder`] is the only surface the attack modules ever see. It
//! exposes image-in, vector-out queries with call counting and an optional
//! budget; parameters and gradients stay behind the trait object. A local
//! reference encoder can be trained so the pipeline is self-contained, and
//! the same seal can wrap a process-isolated encoder reached over a socket
//! (see [`remote`]).

use crate::artifact::{bytes_to_f64s, f64s_to_bytes, Archive};
use crate::data::{AttributeSchema, Dataset, Image};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Adam, Conv, Linear, ParamSet, LEAKY_SLOPE};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

/// Low-dimensional attribute vector — the only thing the attacker receives.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    /// Mean squared difference per element.
    pub fn mse(&self, other: &FeatureVector) -> Result<f64> {
        if self.dimension() != other.dimension() {
            return Err(Error::validation("feature vector dimension mismatch"));
        }
        let sum: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.dimension() as f64)
    }
}

/// Query-only access to an encoder. Nothing but `query` crosses this
/// boundary: no parameters, no gradients, no internals.
pub trait EncoderBackend: Send + Sync {
    fn resolution(&self) -> usize;
    fn schema(&self) -> &AttributeSchema;
    fn fingerprint(&self) -> &str;
    fn raw_query(&self, images: &[&Image]) -> Result<Vec<FeatureVector>>;
}

pub struct BlackboxEncoder {
    backend: Box<dyn EncoderBackend>,
    queries: AtomicU64,
    budget: Option<u64>,
}

impl BlackboxEncoder {
    pub fn new(backend: Box<dyn EncoderBackend>) -> Self {
        BlackboxEncoder {
            backend,
            queries: AtomicU64::new(0),
            budget: None,
        }
    }

    pub fn with_budget(backend: Box<dyn EncoderBackend>, budget: u64) -> Self {
        BlackboxEncoder {
            backend,
            queries: AtomicU64::new(0),
            budget: Some(budget),
        }
    }

    pub fn resolution(&self) -> usize {
        self.backend.resolution()
    }

    pub fn schema(&self) -> &AttributeSchema {
        self.backend.schema()
    }

    pub fn fingerprint(&self) -> &str {
        self.backend.fingerprint()
    }

    /// Images queried so far (budget accounting).
    pub fn queries_used(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }

    /// Evaluate the encoder on a batch. Deterministic, order preserving.
    pub fn query(&self, images: &[&Image]) -> Result<Vec<FeatureVector>> {
        for im in images {
            if im.resolution() != self.backend.resolution() {
                return Err(Error::validation(format!(
                    "encoder expects resolution {}, got {}",
                    self.backend.resolution(),
                    im.resolution()
                )));
            }
        }
        let used = self.queries.load(Ordering::SeqCst);
        if let Some(budget) = self.budget {
            if used + images.len() as u64 > budget {
                return Err(Error::BudgetExceeded {
                    used: used + images.len() as u64,
                    budget,
                });
            }
        }
        self.queries
            .fetch_add(images.len() as u64, Ordering::SeqCst);
        self.backend.raw_query(images)
    }
}

// ---- reference encoder network ------------------------------------------------

/// Channel widths of the small residual regression convnet.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EncoderArch {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub fc: usize,
}

impl Default for EncoderArch {
    fn default() -> Self {
        EncoderArch {
            c1: 8,
            c2: 16,
            c3: 32,
            fc: 64,
        }
    }
}

/// Attribute-regression convnet: three strided conv stages, one residual
/// block, global average pooling and a two-layer head.
pub struct EncoderNet {
    pub params: ParamSet,
    pub schema: AttributeSchema,
    pub resolution: usize,
    pub arch: EncoderArch,
    conv1: Conv,
    conv2: Conv,
    conv3: Conv,
    res_a: Conv,
    res_b: Conv,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderNet {
    pub fn new(seed: u64, schema: AttributeSchema, resolution: usize, arch: EncoderArch) -> Self {
        let mut rng = rng::rng_for(seed, Stream::EncoderInit);
        let mut ps = ParamSet::new();
        let conv1 = Conv::new(&mut ps, &mut rng, "conv1", 3, arch.c1, 3, 1);
        let conv2 = Conv::new(&mut ps, &mut rng, "conv2", arch.c1, arch.c2, 3, 2);
        let conv3 = Conv::new(&mut ps, &mut rng, "conv3", arch.c2, arch.c3, 3, 2);
        let res_a = Conv::new(&mut ps, &mut rng, "res_a", arch.c3, arch.c3, 3, 1);
        let res_b = Conv::new(&mut ps, &mut rng, "res_b", arch.c3, arch.c3, 3, 1);
        let fc1 = Linear::new(&mut ps, &mut rng, "fc1", arch.c3, arch.fc);
        let fc2 = Linear::new(&mut ps, &mut rng, "fc2", arch.fc, schema.dimension());
        EncoderNet {
            params: ps,
            schema,
            resolution,
            arch,
            conv1,
            conv2,
            conv3,
            res_a,
            res_b,
            fc1,
            fc2,
        }
    }

    pub fn forward(&self, g: &mut Graph, pv: &[Var], x: Var) -> Var {
        let h = self.conv1.forward(g, pv, x);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv2.forward(g, pv, h);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv3.forward(g, pv, h);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let r = self.res_a.forward(g, pv, h);
        let r = g.leaky_relu(r, LEAKY_SLOPE);
        let r = self.res_b.forward(g, pv, r);
        let h = g.add(h, r);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let pooled = g.global_avg_pool(h);
        let h = self.fc1.forward(g, pv, pooled);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        self.fc2.forward(g, pv, h)
    }

    /// Inference on a batch of images, without gradients.
    pub fn infer(&self, images: &[&Image]) -> Vec<FeatureVector> {
        let mut g = Graph::new();
        let pv = self.params.insert_into(&mut g, false);
        let x = g.constant(Image::batch_tensor(images));
        let out = self.forward(&mut g, &pv, x);
        let v = g.value(out);
        let dim = self.schema.dimension();
        (0..images.len())
            .map(|i| FeatureVector::new(v.data()[i * dim..(i + 1) * dim].to_vec()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new(serde_json::json!({
            "kind": "encoder",
            "schema": serde_json::to_value(&self.schema)?,
            "resolution": self.resolution,
            "arch": serde_json::to_value(self.arch)?,
            "fingerprint": self.params.fingerprint(),
        }));
        a.add_blob("params", self.params.to_bytes());
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        if a.meta_str("kind")? != "encoder" {
            return Err(Error::validation("artifact is not an encoder checkpoint"));
        }
        let schema: AttributeSchema = serde_json::from_value(a.meta["schema"].clone())?;
        let arch: EncoderArch = serde_json::from_value(a.meta["arch"].clone())?;
        let resolution = a.meta_u64("resolution")? as usize;
        let mut net = EncoderNet::new(0, schema, resolution, arch);
        net.params.load_bytes(a.blob("params")?)?;
        let expect = a.meta_str("fingerprint")?;
        if net.params.fingerprint() != expect {
            return Err(Error::validation("encoder checkpoint fingerprint mismatch"));
        }
        Ok(net)
    }

    /// Seal the network behind the query-only interface.
    pub fn into_blackbox(self) -> BlackboxEncoder {
        BlackboxEncoder::new(Box::new(NetBackend::new(self)))
    }
}

struct NetBackend {
    net: EncoderNet,
    fingerprint: String,
}

impl NetBackend {
    fn new(net: EncoderNet) -> Self {
        let fingerprint = net.params.fingerprint();
        NetBackend { net, fingerprint }
    }
}

impl EncoderBackend for NetBackend {
    fn resolution(&self) -> usize {
        self.net.resolution
    }

    fn schema(&self) -> &AttributeSchema {
        &self.net.schema
    }

    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn raw_query(&self, images: &[&Image]) -> Result<Vec<FeatureVector>> {
        Ok(self.net.infer(images))
    }
}

// ---- training -------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Validation MSE above this at stop time counts as divergence.
    pub divergence_mse: f64,
    pub arch: EncoderArch,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            seed: 0,
            epochs: 40,
            batch_size: 32,
            learning_rate: 2e-3,
            patience: 10,
            divergence_mse: 0.25,
            arch: EncoderArch::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainCurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

pub struct EncoderTrainOutcome {
    pub encoder: BlackboxEncoder,
    pub curve: Vec<TrainCurvePoint>,
    pub best_val_mse: f64,
}

/// Train the reference attribute-regression encoder with MSE against the
/// dataset's ground-truth vectors, early-stopping on validation MSE, and
/// seal the best checkpoint behind the black-box interface.
pub fn train_reference_encoder(
    train: &Dataset,
    val: &Dataset,
    config: &EncoderTrainConfig,
) -> Result<EncoderTrainOutcome> {
    let schema = train
        .manifest
        .schema
        .clone()
        .ok_or_else(|| Error::validation("training dataset carries no schema"))?;
    let targets_train = attributes_or_err(train)?;
    let targets_val = attributes_or_err(val)?;
    let resolution = train.manifest.resolution;

    let mut net = EncoderNet::new(config.seed, schema.clone(), resolution, config.arch);
    let mut opt = Adam::new(config.learning_rate);
    let mut batch_rng = rng::rng_for(config.seed, Stream::EncoderBatch);

    let mut curve = Vec::new();
    let mut best: Option<(f64, Vec<u8>)> = None;
    let mut best_epoch = 0usize;

    for epoch in 0..config.epochs {
        let order = rng::permutation(&mut batch_rng, train.len());
        let mut train_loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| &train.images[i]).collect();
            let tgt = feature_matrix(&targets_train, chunk);
            let mut g = Graph::new();
            let pv = net.params.insert_into(&mut g, true);
            let x = g.constant(Image::batch_tensor(&imgs));
            let t = g.constant(tgt);
            let out = net.forward(&mut g, &pv, x);
            let d = g.sub(out, t);
            let d2 = g.square(d);
            let loss = g.mean_all(d2);
            let loss_v = g.value(loss).item();
            if !loss_v.is_finite() {
                return Err(Error::numerical(format!(
                    "encoder training loss became non-finite at epoch {epoch}"
                )));
            }
            g.backward(loss);
            let grads = net.params.grads_from(&g, &pv);
            opt.step(&mut net.params, &grads);
            train_loss_sum += loss_v;
            steps += 1;
        }
        let val_mse = dataset_mse(&net, val, &targets_val);
        curve.push(TrainCurvePoint {
            epoch,
            train_loss: train_loss_sum / steps.max(1) as f64,
            val_mse,
        });
        if best.as_ref().map_or(true, |(b, _)| val_mse < *b) {
            best = Some((val_mse, net.params.to_bytes()));
            best_epoch = epoch;
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }

    let (best_val_mse, best_bytes) = best.expect("at least one epoch ran");
    if !best_val_mse.is_finite() || best_val_mse > config.divergence_mse {
        return Err(Error::numerical(format!(
            "encoder training diverged: best validation MSE {best_val_mse:.4} \
             (threshold {}) after {} epochs",
            config.divergence_mse,
            curve.len()
        )));
    }
    net.params.load_bytes(&best_bytes)?;
    Ok(EncoderTrainOutcome {
        encoder: net.into_blackbox(),
        curve,
        best_val_mse,
    })
}

fn attributes_or_err(ds: &Dataset) -> Result<&[FeatureVector]> {
    ds.attributes
        .as_deref()
        .ok_or_else(|| Error::validation("dataset carries no attribute vectors"))
}

fn feature_matrix(features: &[FeatureVector], idx: &[usize]) -> Tensor {
    let dim = features[0].dimension();
    let mut data = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        data.extend_from_slice(features[i].values());
    }
    Tensor::from_vec(&[idx.len(), dim], data)
}

fn dataset_mse(net: &EncoderNet, ds: &Dataset, targets: &[FeatureVector]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (chunk_idx, chunk) in ds.images.chunks(64).enumerate() {
        let refs: Vec<&Image> = chunk.iter().collect();
        let outs = net.infer(&refs);
        for (j, out) in outs.iter().enumerate() {
            let t = &targets[chunk_idx * 64 + j];
            total += out.mse(t).expect("dimensions agree");
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Mean per-element squared distance between `f(original)` and
/// `f(reconstruction)` over a dataset, through black-box queries only.
pub fn encoder_feature_mse(
    encoder: &BlackboxEncoder,
    originals: &Dataset,
    reconstructions: &[Image],
) -> Result<f64> {
    if originals.len() != reconstructions.len() {
        return Err(Error::validation(format!(
            "count mismatch: {} originals vs {} reconstructions",
            originals.len(),
            reconstructions.len()
        )));
    }
    let orig_refs: Vec<&Image> = originals.images.iter().collect();
    let recon_refs: Vec<&Image> = reconstructions.iter().collect();
    let fo = encoder.query(&orig_refs)?;
    let fr = encoder.query(&recon_refs)?;
    let mut total = 0.0;
    for (a, b) in fo.iter().zip(&fr) {
        total += a.mse(b)?;
    }
    Ok(total / originals.len() as f64)
}

// ---- process-isolated stub -------------------------------------------------------

/// Length-prefixed binary protocol for serving an encoder over a local
/// socket: the attack side sees image tensors in, vectors out, and nothing
/// else.
pub mod remote {
    use super::*;
    use std::io::{Read, Write};
    use std::net::{TcpListener, TcpStream};
    use std::sync::Mutex;

    const TAG_QUERY: u8 = 1;
    const TAG_VECTORS: u8 = 2;
    const TAG_ERROR: u8 = 0;

    fn write_frame(stream: &mut TcpStream, payload: &[u8]) -> Result<()> {
        stream.write_all(&(payload.len() as u32).to_le_bytes())?;
        stream.write_all(payload)?;
        Ok(())
    }

    fn read_frame(stream: &mut TcpStream) -> Result<Vec<u8>> {
        let mut len = [0u8; 4];
        stream.read_exact(&mut len)?;
        let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
        stream.read_exact(&mut buf)?;
        Ok(buf)
    }

    /// Serve `encoder` on the listener. Handles connections sequentially and
    /// returns after `max_connections` clients have disconnected.
    pub fn serve(
        listener: TcpListener,
        encoder: &BlackboxEncoder,
        max_connections: Option<usize>,
    ) -> Result<()> {
        let mut served = 0usize;
        for conn in listener.incoming() {
            let mut stream = conn?;
            let hello = serde_json::json!({
                "schema": serde_json::to_value(encoder.schema())?,
                "resolution": encoder.resolution(),
                "fingerprint": encoder.fingerprint(),
            });
            write_frame(&mut stream, &serde_json::to_vec(&hello)?)?;
            loop {
                let frame = match read_frame(&mut stream) {
                    Ok(f) => f,
                    Err(_) => break, // client hung up
                };
                if frame.is_empty() || frame[0] != TAG_QUERY {
                    break;
                }
                match handle_query(&frame[1..], encoder) {
                    Ok(reply) => write_frame(&mut stream, &reply)?,
                    Err(e) => {
                        let msg = e.to_string();
                        let mut payload = vec![TAG_ERROR];
                        payload.extend_from_slice(msg.as_bytes());
                        write_frame(&mut stream, &payload)?;
                    }
                }
            }
            served += 1;
            if let Some(max) = max_connections {
                if served >= max {
                    break;
                }
            }
        }
        Ok(())
    }

    fn handle_query(body: &[u8], encoder: &BlackboxEncoder) -> Result<Vec<u8>> {
        if body.len() < 8 {
            return Err(Error::validation("malformed query frame"));
        }
        let count = u32::from_le_bytes(body[0..4].try_into().unwrap()) as usize;
        let res = u32::from_le_bytes(body[4..8].try_into().unwrap()) as usize;
        let px = bytes_to_f64s(&body[8..])?;
        if px.len() != count * 3 * res * res {
            return Err(Error::validation("query frame size mismatch"));
        }
        let images: Vec<Image> = px
            .chunks_exact(3 * res * res)
            .map(|c| Image::from_raw_clamped(res, c.to_vec()))
            .collect();
        let refs: Vec<&Image> = images.iter().collect();
        let vectors = encoder.query(&refs)?;
        let dim = encoder.schema().dimension();
        let mut reply = Vec::with_capacity(9 + vectors.len() * dim * 8);
        reply.push(TAG_VECTORS);
        reply.extend_from_slice(&(vectors.len() as u32).to_le_bytes());
        reply.extend_from_slice(&(dim as u32).to_le_bytes());
        for v in &vectors {
            reply.extend_from_slice(&f64s_to_bytes(v.values()));
        }
        Ok(reply)
    }

    /// Client-side backend: every query crosses a process boundary.
    pub struct RemoteBackend {
        stream: Mutex<TcpStream>,
        schema: AttributeSchema,
        resolution: usize,
        fingerprint: String,
    }

    impl RemoteBackend {
        pub fn connect(addr: &str) -> Result<Self> {
            let mut stream = TcpStream::connect(addr)?;
            let hello = read_frame(&mut stream)?;
            let hello: serde_json::Value = serde_json::from_slice(&hello)?;
            Ok(RemoteBackend {
                schema: serde_json::from_value(hello["schema"].clone())?,
                resolution: hello["resolution"]
                    .as_u64()
                    .ok_or_else(|| Error::validation("stub hello missing resolution"))?
                    as usize,
                fingerprint: hello["fingerprint"]
                    .as_str()
                    .ok_or_else(|| Error::validation("stub hello missing fingerprint"))?
                    .to_string(),
                stream: Mutex::new(stream),
            })
        }

        pub fn into_blackbox(self) -> BlackboxEncoder {
            BlackboxEncoder::new(Box::new(self))
        }
    }

    impl EncoderBackend for RemoteBackend {
        fn resolution(&self) -> usize {
            self.resolution
        }

        fn schema(&self) -> &AttributeSchema {
            &self.schema
        }

        fn fingerprint(&self) -> &str {
            &self.fingerprint
        }

        fn raw_query(&self, images: &[&Image]) -> Result<Vec<FeatureVector>> {
            let res = self.resolution;
            let mut payload = Vec::with_capacity(9 + images.len() * 3 * res * res * 8);
            payload.push(TAG_QUERY);
            payload.extend_from_slice(&(images.len() as u32).to_le_bytes());
            payload.extend_from_slice(&(res as u32).to_le_bytes());
            for im in images {
                payload.extend_from_slice(&f64s_to_bytes(im.data()));
            }
            let mut stream = self.stream.lock().expect("stub stream poisoned");
            write_frame(&mut stream, &payload)?;
            let reply = read_frame(&mut stream)?;
            drop(stream);
            if reply.is_empty() {
                return Err(Error::validation("empty stub reply"));
            }
            match reply[0] {
                TAG_VECTORS => {
                    let count = u32::from_le_bytes(reply[1..5].try_into().unwrap()) as usize;
                    let dim = u32::from_le_bytes(reply[5..9].try_into().unwrap()) as usize;
                    let vals = bytes_to_f64s(&reply[9..])?;
                    if vals.len() != count * dim {
                        return Err(Error::validation("stub reply size mismatch"));
                    }
                    Ok(vals
                        .chunks_exact(dim)
                        .map(|c| FeatureVector::new(c.to_vec()))
                        .collect())
                }
                _ => Err(Error::validation(format!(
                    "stub error: {}",
                    String::from_utf8_lossy(&reply[1..])
                ))),
            }
        }
    }
}
