//! Evaluation harness: reconstruction metrics, disjoint-subset baselines,
//! hidden-attribute leakage probes and report bundles.

use crate::data::{AttrKind, Dataset, Image, PortraitParams};
use crate::embeddings::{embedding_distance, EmbedRole, EmbeddingNetwork};
use crate::encoder::BlackboxEncoder;
use crate::encoder::FeatureVector;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, Stream};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

// ---- SSIM ------------------------------------------------------------------

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01) * (0.01); // (0.01 * L)^2 with L = 1
const SSIM_C2: f64 = (0.03) * (0.03);

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn to_gray(img: &Image) -> Vec<f64> {
    let n = img.resolution() * img.resolution();
    (0..n)
        .map(|i| (img.data()[i] + img.data()[n + i] + img.data()[2 * n + i]) / 3.0)
        .collect()
}

/// Separable valid-mode Gaussian filter.
fn gauss_filter_valid(src: &[f64], size: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let out_w = size - SSIM_WINDOW + 1;
    // horizontal
    let mut tmp = vec![0.0; size * out_w];
    for y in 0..size {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * src[y * size + x + k];
            }
            tmp[y * out_w + x] = acc;
        }
    }
    // vertical
    let mut out = vec![0.0; out_w * out_w];
    for y in 0..out_w {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(y + k) * out_w + x];
            }
            out[y * out_w + x] = acc;
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5) on the
/// channel-mean grayscale image; dynamic range 1. Mean over the valid window
/// positions.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    if x.resolution() != y.resolution() {
        return Err(Error::validation("ssim needs images of equal shape"));
    }
    let size = x.resolution();
    if size < SSIM_WINDOW {
        return Err(Error::validation(format!(
            "ssim needs at least {SSIM_WINDOW} pixels per side"
        )));
    }
    let gx = to_gray(x);
    let gy = to_gray(y);
    let kernel = gaussian_kernel();
    let mu_x = gauss_filter_valid(&gx, size, &kernel);
    let mu_y = gauss_filter_valid(&gy, size, &kernel);
    let xx: Vec<f64> = gx.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = gy.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a * b).collect();
    let e_xx = gauss_filter_valid(&xx, size, &kernel);
    let e_yy = gauss_filter_valid(&yy, size, &kernel);
    let e_xy = gauss_filter_valid(&xy, size, &kernel);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2);
        total += num / den;
    }
    Ok(total / mu_x.len() as f64)
}

// ---- metric rows -----------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub model_tag: String,
    pub dataset_fingerprint: String,
    pub encoder_fingerprint: String,
    /// Eval-role embedder fingerprints only; the attack-role embedder must
    /// never appear here.
    pub embedder_fingerprints: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRow {
    pub image_mse: f64,
    /// Per-element mean squared feature distance.
    pub feature_mse: f64,
    /// Same distance summed over vector elements.
    pub feature_mse_sum: f64,
    pub ssim: f64,
    pub eval1_dist: f64,
    pub eval2_dist: f64,
    pub provenance: Provenance,
}

fn check_eval_roles(eval1: &EmbeddingNetwork, eval2: &EmbeddingNetwork) -> Result<()> {
    if eval1.role != EmbedRole::Eval1 || eval2.role != EmbedRole::Eval2 {
        return Err(Error::RoleViolation(format!(
            "evaluation requires eval-role embedders, got {} and {}",
            eval1.role, eval2.role
        )));
    }
    Ok(())
}

/// Metrics averaged over `(original, counterpart)` pairs. The shared engine
/// behind model evaluation and the disjoint-subset baseline.
pub fn metrics_over_pairs(
    tag: &str,
    originals: &Dataset,
    counterparts: &[Image],
    encoder: &BlackboxEncoder,
    eval1: &EmbeddingNetwork,
    eval2: &EmbeddingNetwork,
) -> Result<MetricsRow> {
    check_eval_roles(eval1, eval2)?;
    if originals.len() != counterparts.len() {
        return Err(Error::validation(format!(
            "count mismatch: {} originals vs {} counterparts",
            originals.len(),
            counterparts.len()
        )));
    }
    if originals.is_empty() {
        return Err(Error::validation("cannot evaluate zero pairs"));
    }
    let n = originals.len();
    let dim = encoder.schema().dimension() as f64;

    let image_mse = par::chunked_sum(n, 8, |i| {
        crate::pregenerator::pixel_loss(&originals.images[i], &counterparts[i]).expect("same shape")
    }) / n as f64;
    let ssim_mean = par::chunked_sum(n, 8, |i| {
        ssim(&originals.images[i], &counterparts[i]).expect("same shape")
    }) / n as f64;

    let orig_refs: Vec<&Image> = originals.images.iter().collect();
    let rec_refs: Vec<&Image> = counterparts.iter().collect();
    let fo = encoder.query(&orig_refs)?;
    let fr = encoder.query(&rec_refs)?;
    let feature_mse = fo
        .iter()
        .zip(&fr)
        .map(|(a, b)| a.mse(b))
        .sum::<Result<f64>>()?
        / n as f64;

    let e1o = eval1.embed_batch(&orig_refs);
    let e1r = eval1.embed_batch(&rec_refs);
    let e2o = eval2.embed_batch(&orig_refs);
    let e2r = eval2.embed_batch(&rec_refs);
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for i in 0..n {
        d1 += embedding_distance(&e1o[i], &e1r[i])?;
        d2 += embedding_distance(&e2o[i], &e2r[i])?;
    }

    Ok(MetricsRow {
        image_mse,
        feature_mse,
        feature_mse_sum: feature_mse * dim,
        ssim: ssim_mean,
        eval1_dist: d1 / n as f64,
        eval2_dist: d2 / n as f64,
        provenance: Provenance {
            model_tag: tag.to_string(),
            dataset_fingerprint: originals.fingerprint(),
            encoder_fingerprint: encoder.fingerprint().to_string(),
            embedder_fingerprints: vec![eval1.fingerprint(), eval2.fingerprint()],
        },
    })
}

/// A named reconstruction function under evaluation.
pub struct ModelUnderTest<'a> {
    pub tag: String,
    pub reconstruct: Box<dyn Fn(&FeatureVector) -> Result<Image> + 'a>,
}

/// Evaluate each model on a held-out test set. Rejects any test set whose
/// items intersect the fingerprints the models were trained on.
pub fn evaluate_models(
    models: &[ModelUnderTest<'_>],
    testset: &Dataset,
    encoder: &BlackboxEncoder,
    eval1: &EmbeddingNetwork,
    eval2: &EmbeddingNetwork,
    training_item_fingerprints: &[String],
) -> Result<Vec<MetricsRow>> {
    if models.is_empty() {
        return Err(Error::validation("no models to evaluate"));
    }
    let train_set: HashSet<&str> = training_item_fingerprints
        .iter()
        .map(|s| s.as_str())
        .collect();
    let overlap = testset
        .item_fingerprints()
        .iter()
        .filter(|f| train_set.contains(f.as_str()))
        .count();
    if overlap > 0 {
        return Err(Error::validation(format!(
            "contamination: {overlap} test items appear in the training data"
        )));
    }
    let test_refs: Vec<&Image> = testset.images.iter().collect();
    let fs = encoder.query(&test_refs)?;
    let mut rows = Vec::with_capacity(models.len());
    for model in models {
        let recon: Vec<Image> = fs
            .iter()
            .map(|f| (model.reconstruct)(f))
            .collect::<Result<_>>()?;
        rows.push(metrics_over_pairs(
            &model.tag, testset, &recon, encoder, eval1, eval2,
        )?);
    }
    Ok(rows)
}

/// Baseline: metrics between two disjoint datasets under a random seeded
/// pairing. What "completely unrelated image from the same distribution"
/// scores.
pub fn baseline_distances(
    a: &Dataset,
    b: &Dataset,
    encoder: &BlackboxEncoder,
    eval1: &EmbeddingNetwork,
    eval2: &EmbeddingNetwork,
    seed: u64,
) -> Result<MetricsRow> {
    if a.len() != b.len() {
        return Err(Error::validation("baseline subsets must have equal size"));
    }
    let fa: HashSet<String> = a.item_fingerprints().into_iter().collect();
    if b.item_fingerprints().iter().any(|f| fa.contains(f)) {
        return Err(Error::validation("baseline subsets overlap"));
    }
    let mut rng = rng::rng_for(seed, Stream::Eval);
    let perm = rng::permutation(&mut rng, b.len());
    let paired: Vec<Image> = perm.iter().map(|&i| b.images[i].clone()).collect();
    metrics_over_pairs("baseline", a, &paired, encoder, eval1, eval2)
}

// ---- leakage probe -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeakageKind {
    /// Balanced accuracy of a binary attribute.
    Accuracy,
    /// Pearson correlation of a continuous attribute.
    Correlation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LeakageReport {
    pub attribute: String,
    pub kind: LeakageKind,
    pub score: f64,
    /// Score with the reconstruction/original pairing shuffled.
    pub shuffled_score: f64,
    pub samples: usize,
}

/// Measure how well a hidden attribute of the originals can be read off the
/// reconstructions. The attribute must be absent from the encoder schema;
/// ground truth comes from the originals' generation parameters and the
/// prediction from `oracle` applied to each reconstruction.
pub fn leakage_probe(
    hidden_attr: &str,
    originals: &Dataset,
    reconstructions: &[Image],
    oracle: &dyn Fn(&Image) -> Result<f64>,
    encoder_schema: &crate::data::AttributeSchema,
    shuffle_seed: u64,
) -> Result<LeakageReport> {
    if encoder_schema.contains(hidden_attr) {
        return Err(Error::validation(format!(
            "`{hidden_attr}` is part of the encoder schema; the probe only measures \
             unintended information"
        )));
    }
    if originals.len() != reconstructions.len() || originals.is_empty() {
        return Err(Error::validation("probe needs matching, nonempty sets"));
    }
    let params = originals.params.as_ref().ok_or_else(|| {
        Error::validation("leakage probe needs the originals' generation parameters")
    })?;
    let kind = hidden_kind(hidden_attr, params.first().unwrap())?;
    let truth: Vec<f64> = params
        .iter()
        .map(|p| hidden_truth(p, hidden_attr))
        .collect::<Result<_>>()?;
    let preds: Vec<f64> = reconstructions
        .iter()
        .map(|im| oracle(im))
        .collect::<Result<_>>()?;
    let score = score_pairs(&truth, &preds, kind)?;
    let mut rng = rng::rng_for(shuffle_seed, Stream::Eval);
    let perm = rng::permutation(&mut rng, preds.len());
    let shuffled: Vec<f64> = perm.iter().map(|&i| preds[i]).collect();
    let shuffled_score = score_pairs(&truth, &shuffled, kind)?;
    Ok(LeakageReport {
        attribute: hidden_attr.to_string(),
        kind,
        score,
        shuffled_score,
        samples: truth.len(),
    })
}

fn hidden_kind(name: &str, sample: &PortraitParams) -> Result<LeakageKind> {
    if sample.field(name).is_some() {
        return Ok(LeakageKind::Correlation);
    }
    // binary derived attribute names resolve through the schema catalog
    match crate::data::AttributeSchema::binary(&[name]) {
        Ok(_) => Ok(LeakageKind::Accuracy),
        Err(_) => Err(Error::validation(format!(
            "hidden attribute `{name}` has no defined derivation"
        ))),
    }
}

fn hidden_truth(p: &PortraitParams, name: &str) -> Result<f64> {
    if let Some(v) = p.field(name) {
        return Ok(v);
    }
    let schema = crate::data::AttributeSchema::binary(&[name])?;
    Ok(crate::data::derive_attributes(p, &schema)?.values()[0])
}

fn score_pairs(truth: &[f64], preds: &[f64], kind: LeakageKind) -> Result<f64> {
    match kind {
        LeakageKind::Correlation => pearson(truth, preds),
        LeakageKind::Accuracy => {
            let mut tp = 0usize;
            let mut tn = 0usize;
            let mut pos = 0usize;
            let mut neg = 0usize;
            for (t, p) in truth.iter().zip(preds) {
                let t1 = *t >= 0.5;
                let p1 = *p >= 0.5;
                if t1 {
                    pos += 1;
                    if p1 {
                        tp += 1;
                    }
                } else {
                    neg += 1;
                    if !p1 {
                        tn += 1;
                    }
                }
            }
            if pos == 0 || neg == 0 {
                return Err(Error::validation(
                    "balanced accuracy needs both attribute values present",
                ));
            }
            Ok(0.5 * (tp as f64 / pos as f64) + 0.5 * (tn as f64 / neg as f64))
        }
    }
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::validation("correlation needs matched samples"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

// ---- report bundle ----------------------------------------------------------

pub struct ReportInputs<'a> {
    pub rows: &'a [MetricsRow],
    pub baseline: Option<&'a MetricsRow>,
    pub leakage: &'a [LeakageReport],
    /// Image grid: target row first, then one row per model, column-aligned.
    pub grid_rows: Vec<(String, Vec<Image>)>,
    /// Named training-curve series.
    pub curves: Vec<(String, Vec<f64>)>,
    pub run_manifest: serde_json::Value,
    /// Fingerprint of the attack-role embedder; must not appear in any row's
    /// provenance.
    pub attack_embedder_fingerprint: &'a str,
}

fn fmt_row(tag: &str, r: &MetricsRow) -> String {
    format!(
        "{tag},{},{},{},{},{},{}\n",
        r.image_mse, r.feature_mse, r.feature_mse_sum, r.ssim, r.eval1_dist, r.eval2_dist
    )
}

/// Write the full report bundle: metrics.csv, baselines.csv (desk baseline
/// plus full-scale reference constants), leakage.json, grids/, curves/,
/// metrics.html and manifest.json. Deterministic for identical inputs.
pub fn build_report(inputs: &ReportInputs<'_>, out_dir: &Path) -> Result<()> {
    if inputs.rows.is_empty() {
        return Err(Error::validation("refusing to build a report with no model rows"));
    }
    for r in inputs.rows {
        if r.provenance
            .embedder_fingerprints
            .iter()
            .any(|f| f == inputs.attack_embedder_fingerprint)
        {
            return Err(Error::RoleViolation(
                "attack-role embedder fingerprint found in metric provenance".into(),
            ));
        }
    }
    std::fs::create_dir_all(out_dir)?;

    let mut metrics_csv =
        String::from("model,image_mse,feature_mse,feature_mse_sum,ssim,eval1_dist,eval2_dist\n");
    for r in inputs.rows {
        metrics_csv.push_str(&fmt_row(&r.provenance.model_tag, r));
    }
    std::fs::write(out_dir.join("metrics.csv"), &metrics_csv)?;

    let mut baselines_csv =
        String::from("source,image_mse,feature_mse,feature_mse_sum,ssim,eval1_dist,eval2_dist\n");
    if let Some(b) = inputs.baseline {
        baselines_csv.push_str(&fmt_row("desk-disjoint-subsets", b));
    }
    let _ = writeln!(
        baselines_csv,
        "fullscale-disjoint-subsets,{},,,{},{},{}",
        crate::reference::FULL_SCALE_BASELINE_IMAGE_MSE,
        crate::reference::FULL_SCALE_BASELINE_SSIM,
        crate::reference::FULL_SCALE_BASELINE_EVAL1,
        crate::reference::FULL_SCALE_BASELINE_EVAL2,
    );
    for row in crate::reference::FULL_SCALE_ROWS {
        let _ = writeln!(
            baselines_csv,
            "fullscale-{}-{},{},{},,{},{},{}",
            row.setting, row.model, row.image_mse, row.feature_mse, row.ssim,
            row.eval1_dist, row.eval2_dist,
        );
    }
    std::fs::write(out_dir.join("baselines.csv"), &baselines_csv)?;

    let leakage_json = serde_json::to_string_pretty(&inputs.leakage)?;
    std::fs::write(out_dir.join("leakage.json"), leakage_json)?;

    if !inputs.grid_rows.is_empty() {
        let cols = inputs.grid_rows[0].1.len();
        if cols == 0 || inputs.grid_rows.iter().any(|(_, r)| r.len() != cols) {
            return Err(Error::validation("grid rows must be non-empty and aligned"));
        }
        let tiles: Vec<Image> = inputs
            .grid_rows
            .iter()
            .flat_map(|(_, row)| row.iter().cloned())
            .collect();
        crate::plot::save_grid(&tiles, cols, &out_dir.join("grids").join("reconstructions.png"))?;
    }
    for (name, series) in &inputs.curves {
        crate::plot::save_line_plot(
            &[(name.as_str(), series.as_slice())],
            name,
            &out_dir.join("curves").join(format!("{name}.png")),
        )?;
    }

    std::fs::write(out_dir.join("metrics.html"), render_html(inputs))?;
    let manifest = serde_json::to_string_pretty(&inputs.run_manifest)?;
    std::fs::write(out_dir.join("manifest.json"), manifest)?;
    Ok(())
}

fn render_html(inputs: &ReportInputs<'_>) -> String {
    let mut h = String::from(
        "<!doctype html><html><head><meta charset=\"utf-8\"><title>reconstruction report</title>\
         <style>body{font-family:sans-serif}table{border-collapse:collapse}\
         td,th{border:1px solid #999;padding:4px 8px}</style></head><body>",
    );
    h.push_str("<h1>Reconstruction metrics</h1><table><tr><th>model</th><th>image MSE</th>\
                <th>feature MSE (mean)</th><th>feature MSE (sum)</th><th>SSIM</th>\
                <th>eval-1 dist</th><th>eval-2 dist</th></tr>");
    for r in inputs.rows {
        let _ = write!(
            h,
            "<tr><td>{}</td><td>{:.6}</td><td>{:.6}</td><td>{:.6}</td><td>{:.6}</td>\
             <td>{:.6}</td><td>{:.6}</td></tr>",
            r.provenance.model_tag,
            r.image_mse,
            r.feature_mse,
            r.feature_mse_sum,
            r.ssim,
            r.eval1_dist,
            r.eval2_dist
        );
    }
    h.push_str("</table>");
    if let Some(b) = inputs.baseline {
        let _ = write!(
            h,
            "<h2>Disjoint-subset baseline</h2><p>image MSE {:.6}, SSIM {:.6}, eval-1 {:.6}, \
             eval-2 {:.6} (full-scale reference: MSE {}, SSIM {})</p>",
            b.image_mse,
            b.ssim,
            b.eval1_dist,
            b.eval2_dist,
            crate::reference::FULL_SCALE_BASELINE_IMAGE_MSE,
            crate::reference::FULL_SCALE_BASELINE_SSIM
        );
    }
    if !inputs.leakage.is_empty() {
        h.push_str("<h2>Hidden-attribute leakage</h2><table><tr><th>attribute</th><th>kind</th>\
                    <th>score</th><th>shuffled</th></tr>");
        for l in inputs.leakage {
            let _ = write!(
                h,
                "<tr><td>{}</td><td>{:?}</td><td>{:.4}</td><td>{:.4}</td></tr>",
                l.attribute, l.kind, l.score, l.shuffled_score
            );
        }
        h.push_str("</table>");
    }
    h.push_str("</body></html>");
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, AttributeSchema};
    use crate::embeddings::EmbedArch;
    use crate::encoder::{EncoderArch, EncoderNet};

    fn tiny_blackbox() -> BlackboxEncoder {
        EncoderNet::new(
            5,
            AttributeSchema::continuous_excluding(&["pose_angle"]),
            32,
            EncoderArch {
                c1: 4,
                c2: 6,
                c3: 8,
                fc: 16,
            },
        )
        .into_blackbox()
    }

    fn eval_pair() -> (EmbeddingNetwork, EmbeddingNetwork) {
        let arch = EmbedArch {
            c1: 6,
            c2: 8,
            c3: 12,
            embed_dim: 8,
        };
        (
            EmbeddingNetwork::new(1, EmbedRole::Eval1, 32, arch),
            EmbeddingNetwork::new(2, EmbedRole::Eval2, 32, arch),
        )
    }

    #[test]
    fn ssim_identity_is_one() {
        let ds = synth_dataset(1, 1, 32, &AttributeSchema::continuous_all()).unwrap();
        let s = ssim(&ds.images[0], &ds.images[0]).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "ssim {s}");
    }

    #[test]
    fn ssim_of_inverted_image_is_negative() {
        let ds = synth_dataset(2, 1, 32, &AttributeSchema::continuous_all()).unwrap();
        let x = &ds.images[0];
        let inv = Image::from_raw_clamped(32, x.data().iter().map(|v| 1.0 - v).collect());
        let s = ssim(x, &inv).unwrap();
        assert!(s < 0.0, "ssim {s}");
    }

    #[test]
    fn ssim_matches_direct_windowed_computation() {
        // independent oracle: direct per-window double loop
        let ds = synth_dataset(3, 2, 32, &AttributeSchema::continuous_all()).unwrap();
        let (x, y) = (&ds.images[0], &ds.images[1]);
        let fast = ssim(x, y).unwrap();
        let gx = to_gray(x);
        let gy = to_gray(y);
        let kernel = gaussian_kernel();
        let size = 32;
        let out = size - SSIM_WINDOW + 1;
        let mut total = 0.0;
        for wy in 0..out {
            for wx in 0..out {
                let mut w2 = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
                for a in 0..SSIM_WINDOW {
                    for b in 0..SSIM_WINDOW {
                        w2[a * SSIM_WINDOW + b] = kernel[a] * kernel[b];
                    }
                }
                let (mut mx, mut my) = (0.0, 0.0);
                for a in 0..SSIM_WINDOW {
                    for b in 0..SSIM_WINDOW {
                        let w = w2[a * SSIM_WINDOW + b];
                        mx += w * gx[(wy + a) * size + wx + b];
                        my += w * gy[(wy + a) * size + wx + b];
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for a in 0..SSIM_WINDOW {
                    for b in 0..SSIM_WINDOW {
                        let w = w2[a * SSIM_WINDOW + b];
                        let dx = gx[(wy + a) * size + wx + b] - mx;
                        let dy = gy[(wy + a) * size + wx + b] - my;
                        vx += w * dx * dx;
                        vy += w * dy * dy;
                        cov += w * dx * dy;
                    }
                }
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
        }
        let direct = total / (out * out) as f64;
        // the separable path computes E[x^2]-mu^2; direct path weights
        // deviations; equal up to floating noise
        assert!(
            (fast - direct).abs() < 1e-9,
            "fast {fast} vs direct {direct}"
        );
    }

    #[test]
    fn perfect_reconstructor_row_is_ideal() {
        let schema = AttributeSchema::continuous_excluding(&["pose_angle"]);
        let ds = synth_dataset(7, 6, 32, &schema).unwrap();
        let enc = tiny_blackbox();
        let (e1, e2) = eval_pair();
        let copies = ds.images.clone();
        let row = metrics_over_pairs("perfect", &ds, &copies, &enc, &e1, &e2).unwrap();
        assert!(row.image_mse == 0.0);
        assert!(row.feature_mse < 1e-20);
        assert!((row.ssim - 1.0).abs() < 1e-12);
        assert!(row.eval1_dist < 1e-20);
        assert!(row.eval2_dist < 1e-20);
    }

    #[test]
    fn contamination_is_rejected() {
        let schema = AttributeSchema::continuous_excluding(&["pose_angle"]);
        let ds = synth_dataset(8, 8, 32, &schema).unwrap();
        let enc = tiny_blackbox();
        let (e1, e2) = eval_pair();
        let model = ModelUnderTest {
            tag: "identity".into(),
            reconstruct: Box::new(|_f| {
                Ok(Image::from_raw_clamped(32, vec![0.5; 3 * 32 * 32]))
            }),
        };
        // training fingerprints equal to the test set itself -> contamination
        let err = evaluate_models(
            &[model],
            &ds,
            &enc,
            &e1,
            &e2,
            &ds.item_fingerprints(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("contamination"), "{err}");
    }

    #[test]
    fn wrong_embedder_roles_rejected() {
        let schema = AttributeSchema::continuous_excluding(&["pose_angle"]);
        let ds = synth_dataset(9, 4, 32, &schema).unwrap();
        let enc = tiny_blackbox();
        let arch = EmbedArch {
            c1: 6,
            c2: 8,
            c3: 12,
            embed_dim: 8,
        };
        let attack = EmbeddingNetwork::new(3, EmbedRole::Attack, 32, arch);
        let (_, e2) = eval_pair();
        let copies = ds.images.clone();
        let err = metrics_over_pairs("x", &ds, &copies, &enc, &attack, &e2).unwrap_err();
        assert!(matches!(err, Error::RoleViolation(_)));
    }

    #[test]
    fn baseline_rejects_overlap_and_controls() {
        let schema = AttributeSchema::continuous_excluding(&["pose_angle"]);
        let ds = synth_dataset(10, 10, 32, &schema).unwrap();
        let (a, b) = crate::data::split_disjoint(&ds, 0.5, 3, false).unwrap();
        let enc = tiny_blackbox();
        let (e1, e2) = eval_pair();
        let row = baseline_distances(&a, &b, &enc, &e1, &e2, 5).unwrap();
        assert!(row.image_mse > 0.0);
        // overlapping subsets rejected
        assert!(baseline_distances(&a, &a, &enc, &e1, &e2, 5).is_err());
        // degenerate self-pairing control through the shared pair engine
        let copies = a.images.clone();
        let control = metrics_over_pairs("control", &a, &copies, &enc, &e1, &e2).unwrap();
        assert_eq!(control.image_mse, 0.0);
        assert!((control.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn leakage_probe_ceiling_floor_and_schema_guard() {
        let schema = AttributeSchema::continuous_excluding(&["pose_angle"]);
        let ds = synth_dataset(11, 40, 32, &schema).unwrap();
        // ceiling: oracle reads the true pose from the matching original
        let truth: Vec<f64> = ds
            .params
            .as_ref()
            .unwrap()
            .iter()
            .map(|p| p.pose_angle)
            .collect();
        let fps = ds.item_fingerprints();
        let lookup: std::collections::HashMap<String, f64> = fps
            .iter()
            .cloned()
            .zip(truth.iter().copied())
            .collect();
        let oracle = |im: &Image| -> Result<f64> { Ok(lookup[&im.fingerprint()]) };
        let report = leakage_probe(
            "pose_angle",
            &ds,
            &ds.images.clone(),
            &oracle,
            &schema,
            13,
        )
        .unwrap();
        assert_eq!(report.kind, LeakageKind::Correlation);
        assert!((report.score - 1.0).abs() < 1e-9);
        assert!(report.shuffled_score.abs() < 0.35);
        // schema guard
        let err = leakage_probe(
            "brightness",
            &ds,
            &ds.images.clone(),
            &oracle,
            &schema,
            13,
        )
        .unwrap_err();
        assert!(err.to_string().contains("schema"), "{err}");
    }

    #[test]
    fn report_bundle_writes_and_is_deterministic() {
        let schema = AttributeSchema::continuous_excluding(&["pose_angle"]);
        let ds = synth_dataset(12, 4, 32, &schema).unwrap();
        let enc = tiny_blackbox();
        let (e1, e2) = eval_pair();
        let copies = ds.images.clone();
        let row = metrics_over_pairs("pixel", &ds, &copies, &enc, &e1, &e2).unwrap();
        let inputs = ReportInputs {
            rows: std::slice::from_ref(&row),
            baseline: None,
            leakage: &[],
            grid_rows: vec![
                ("target".into(), ds.images.clone()),
                ("pixel".into(), copies.clone()),
            ],
            curves: vec![("train_loss".into(), vec![1.0, 0.5, 0.25])],
            run_manifest: serde_json::json!({"seed": 12}),
            attack_embedder_fingerprint: "attack-fp",
        };
        let dir = tempfile::tempdir().unwrap();
        build_report(&inputs, dir.path()).unwrap();
        let csv1 = std::fs::read(dir.path().join("metrics.csv")).unwrap();
        assert!(dir.path().join("baselines.csv").exists());
        assert!(dir.path().join("leakage.json").exists());
        assert!(dir.path().join("grids/reconstructions.png").exists());
        assert!(dir.path().join("curves/train_loss.png").exists());
        assert!(dir.path().join("manifest.json").exists());
        // regenerate: byte-identical csv
        let dir2 = tempfile::tempdir().unwrap();
        build_report(&inputs, dir2.path()).unwrap();
        let csv2 = std::fs::read(dir2.path().join("metrics.csv")).unwrap();
        assert_eq!(csv1, csv2);
        // baselines carry the full-scale reference constants
        let btxt = std::fs::read_to_string(dir.path().join("baselines.csv")).unwrap();
        assert!(btxt.contains("0.62"));
        assert!(btxt.contains("0.06"));

        // empty model list is an error, never an empty report
        let empty = ReportInputs {
            rows: &[],
            baseline: None,
            leakage: &[],
            grid_rows: vec![],
            curves: vec![],
            run_manifest: serde_json::json!({}),
            attack_embedder_fingerprint: "",
        };
        assert!(build_report(&empty, dir.path()).is_err());
    }

    #[test]
    fn report_rejects_attack_embedder_in_provenance() {
        let schema = AttributeSchema::continuous_excluding(&["pose_angle"]);
        let ds = synth_dataset(13, 3, 32, &schema).unwrap();
        let enc = tiny_blackbox();
        let (e1, e2) = eval_pair();
        let copies = ds.images.clone();
        let row = metrics_over_pairs("pixel", &ds, &copies, &enc, &e1, &e2).unwrap();
        let fp = row.provenance.embedder_fingerprints[0].clone();
        let inputs = ReportInputs {
            rows: std::slice::from_ref(&row),
            baseline: None,
            leakage: &[],
            grid_rows: vec![],
            curves: vec![],
            run_manifest: serde_json::json!({}),
            attack_embedder_fingerprint: &fp,
        };
        let dir = tempfile::tempdir().unwrap();
        let err = build_report(&inputs, dir.path()).unwrap_err();
        assert!(matches!(err, Error::RoleViolation(_)));
    }

    #[test]
    fn unused_attr_kind_is_exported() {
        // AttrKind appears in leakage spec types
        assert_ne!(AttrKind::Continuous, AttrKind::Binary);
    }
}
