//! Style-mixing fusion of the two specialized pre-generators.
//!
//! The pixel-stage and embedding-stage models each produce a full style code;
//! the fused reconstruction routes the embedding model's output to the blocks
//! that control identity-relevant aspects and the pixel model's output to the
//! rest. Which blocks those are is checkpoint-specific, so a calibration pass
//! swaps one block at a time between random code pairs and measures what
//! changes.

use crate::data::Image;
use crate::embeddings::{embedding_distance, EmbeddingNetwork};
use crate::encoder::FeatureVector;
use crate::error::{Error, Result};
use crate::generator::{mix_styles, sample_style, GeneratorNet, StyleCode};
use crate::pregenerator::PreGenerator;
use crate::Result as CrateResult;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// `G(mix(P_pixel(f), P_fn(f), assignment))`: blocks flagged in `assignment`
/// take the embedding-stage model's output.
pub fn fused_reconstruct(
    p_pixel: &PreGenerator,
    p_fn: &PreGenerator,
    gen: &GeneratorNet,
    f: &FeatureVector,
    assignment: &[bool],
) -> Result<Image> {
    Ok(fused_reconstruct_batch(p_pixel, p_fn, gen, &[f], assignment)?.pop().unwrap())
}

pub fn fused_reconstruct_batch(
    p_pixel: &PreGenerator,
    p_fn: &PreGenerator,
    gen: &GeneratorNet,
    fs: &[&FeatureVector],
    assignment: &[bool],
) -> Result<Vec<Image>> {
    check_compatible(p_pixel, p_fn, gen)?;
    if assignment.len() != gen.num_blocks() {
        return Err(Error::validation(format!(
            "assignment has {} entries for {} blocks",
            assignment.len(),
            gen.num_blocks()
        )));
    }
    let codes_pixel = p_pixel.map_features(fs)?;
    let codes_fn = p_fn.map_features(fs)?;
    let mixed: Vec<StyleCode> = codes_pixel
        .iter()
        .zip(&codes_fn)
        .map(|(a, b)| mix_styles(a, b, assignment))
        .collect::<Result<_>>()?;
    let refs: Vec<&StyleCode> = mixed.iter().collect();
    gen.generate_batch(&refs)
}

fn check_compatible(p_pixel: &PreGenerator, p_fn: &PreGenerator, gen: &GeneratorNet) -> Result<()> {
    let gfp = gen.fingerprint();
    if p_pixel.generator_fingerprint != gfp || p_fn.generator_fingerprint != gfp {
        return Err(Error::validation(
            "pre-generators are bound to a different generator checkpoint",
        ));
    }
    if p_pixel.encoder_fingerprint != p_fn.encoder_fingerprint {
        return Err(Error::validation(
            "pre-generators were trained against different encoders",
        ));
    }
    if p_pixel.schema != p_fn.schema {
        return Err(Error::validation("pre-generators use different schemas"));
    }
    Ok(())
}

/// Per-block calibration measurements.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockAspect {
    pub block: usize,
    /// Mean attack-embedding distance caused by swapping only this block.
    pub embed_shift: f64,
    /// Share of the pixel change that falls outside the face region.
    pub bg_ratio: f64,
    /// Mean absolute pixel change inside the face region.
    pub face_change: f64,
    /// Mean absolute pixel change outside the face region.
    pub bg_change: f64,
    /// Share of the change energy in the low spatial frequencies.
    pub low_freq_share: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub blocks: Vec<BlockAspect>,
    /// Blocks to feed from the embedding-stage model, ranked suggestion.
    pub suggested_identity_blocks: Vec<usize>,
    pub probe_pairs: usize,
    pub probe_seed: u64,
}

impl CalibrationReport {
    pub fn assignment(&self, num_blocks: usize) -> Vec<bool> {
        let mut mask = vec![false; num_blocks];
        for &b in &self.suggested_identity_blocks {
            if b < num_blocks {
                mask[b] = true;
            }
        }
        mask
    }
}

/// Default face-region weights: a centered ellipse sized to cover the face
/// placement range of the synthetic renderer.
pub fn center_ellipse_mask(resolution: usize) -> Vec<f64> {
    let mut mask = vec![0.0; resolution * resolution];
    for y in 0..resolution {
        for x in 0..resolution {
            let u = (x as f64 + 0.5) / resolution as f64 - 0.5;
            let v = (y as f64 + 0.5) / resolution as f64 - 0.5;
            let d = (u / 0.34) * (u / 0.34) + (v / 0.40) * (v / 0.40);
            mask[y * resolution + x] = if d <= 1.0 { 1.0 } else { 0.0 };
        }
    }
    mask
}

/// Swap one block at a time between seeded code pairs and measure (a) the
/// attack-embedding shift, (b) how much of the pixel change lands in the
/// background vs the face region, and (c) the spatial-frequency split of the
/// change. Suggests as identity blocks those maximizing embedding shift
/// relative to background change. Writes one probe grid per block plus a
/// JSON report when `out_dir` is given.
pub fn calibrate_block_assignment(
    gen: &GeneratorNet,
    attack_embedder: &EmbeddingNetwork,
    probe_pairs: usize,
    probe_seed: u64,
    face_mask: Option<&[f64]>,
    identity_block_count: usize,
    out_dir: Option<&Path>,
) -> CrateResult<CalibrationReport> {
    let b = gen.num_blocks();
    let d = gen.latent_dim();
    let res = gen.resolution;
    let default_mask;
    let mask = match face_mask {
        Some(m) => {
            if m.len() != res * res {
                return Err(Error::validation("face mask size does not match resolution"));
            }
            m
        }
        None => {
            default_mask = center_ellipse_mask(res);
            &default_mask
        }
    };
    let mask_sum: f64 = mask.iter().sum();
    let inv_sum: f64 = mask.iter().map(|v| 1.0 - v).sum();
    if mask_sum == 0.0 || inv_sum == 0.0 {
        return Err(Error::validation("face mask must split the image"));
    }

    let pairs: Vec<(StyleCode, StyleCode)> = (0..probe_pairs)
        .map(|k| {
            (
                sample_style(probe_seed ^ (2 * k as u64 + 1), b, d),
                sample_style(probe_seed ^ (2 * k as u64 + 2), b, d),
            )
        })
        .collect();

    let mut blocks = Vec::with_capacity(b);
    let mut all_equivalent = true;
    for block in 0..b {
        let mut embed_shift = 0.0;
        let mut face_change = 0.0;
        let mut bg_change = 0.0;
        let mut low_energy = 0.0;
        let mut total_energy = 0.0;
        let mut grid_tiles: Vec<Image> = Vec::new();
        let mut mask_vec = vec![false; b];
        mask_vec[block] = true;
        for (a, bb) in &pairs {
            let img_a = gen.generate(a)?;
            let mixed_code = mix_styles(a, bb, &mask_vec)?;
            let img_m = gen.generate(&mixed_code)?;
            embed_shift +=
                embedding_distance(&attack_embedder.embed(&img_a), &attack_embedder.embed(&img_m))?;
            let diff = pixel_abs_diff(&img_a, &img_m);
            let mut fc = 0.0;
            let mut bc = 0.0;
            for (i, dv) in diff.iter().enumerate() {
                fc += dv * mask[i];
                bc += dv * (1.0 - mask[i]);
            }
            face_change += fc / mask_sum;
            bg_change += bc / inv_sum;
            let (low, total) = frequency_split(&diff, res);
            low_energy += low;
            total_energy += total;
            if grid_tiles.len() < 12 {
                let img_b = gen.generate(bb)?;
                grid_tiles.push(img_a.clone());
                grid_tiles.push(img_m.clone());
                grid_tiles.push(img_b);
            }
        }
        let n = pairs.len() as f64;
        let face_change = face_change / n;
        let bg_change = bg_change / n;
        let denom = face_change + bg_change;
        if denom > 1e-9 {
            all_equivalent = false;
        }
        blocks.push(BlockAspect {
            block,
            embed_shift: embed_shift / n,
            bg_ratio: if denom > 0.0 { bg_change / denom } else { 0.5 },
            face_change,
            bg_change,
            low_freq_share: if total_energy > 0.0 {
                low_energy / total_energy
            } else {
                0.0
            },
        });
        if let Some(dir) = out_dir {
            crate::plot::save_grid(&grid_tiles, 3, &dir.join(format!("block_{block}.png")))?;
        }
    }
    if all_equivalent {
        return Err(Error::numerical(
            "calibration warning: all blocks produce no pixel change; generator looks degenerate",
        ));
    }
    // identity blocks: embedding shift relative to background change
    let mut ranked: Vec<usize> = (0..b).collect();
    let score = |a: &BlockAspect| a.embed_shift / (a.bg_ratio + 0.1);
    ranked.sort_by(|&i, &j| {
        score(&blocks[j])
            .partial_cmp(&score(&blocks[i]))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let count = identity_block_count.clamp(1, b);
    let mut suggested: Vec<usize> = ranked[..count].to_vec();
    suggested.sort_unstable();

    let report = CalibrationReport {
        blocks,
        suggested_identity_blocks: suggested,
        probe_pairs,
        probe_seed,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&report)?;
        std::fs::write(dir.join("calibration.json"), json)?;
    }
    Ok(report)
}

fn pixel_abs_diff(a: &Image, b: &Image) -> Vec<f64> {
    let res = a.resolution();
    let n = res * res;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for c in 0..3 {
                acc += (a.data()[c * n + i] - b.data()[c * n + i]).abs();
            }
            acc / 3.0
        })
        .collect()
}

/// Energy of the 4x4-box-filtered diff vs total energy.
fn frequency_split(diff: &[f64], res: usize) -> (f64, f64) {
    let cells = res / 4;
    let mut low = 0.0;
    for cy in 0..cells {
        for cx in 0..cells {
            let mut acc = 0.0;
            for y in cy * 4..(cy + 1) * 4 {
                for x in cx * 4..(cx + 1) * 4 {
                    acc += diff[y * res + x];
                }
            }
            let mean = acc / 16.0;
            low += mean * mean * 16.0;
        }
    }
    let total: f64 = diff.iter().map(|v| v * v).sum();
    (low, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AttributeSchema;
    use crate::embeddings::{EmbedArch, EmbedRole};
    use crate::generator::GeneratorArch;

    fn fixture() -> (PreGenerator, PreGenerator, GeneratorNet, EmbeddingNetwork) {
        let gen = GeneratorNet::new(
            2,
            32,
            GeneratorArch {
                latent_dim: 8,
                base_channels: 12,
                min_channels: 4,
            },
        )
        .unwrap();
        let schema = AttributeSchema::continuous(&["brightness", "face_size"]).unwrap();
        let mut p1 = PreGenerator::new(3, schema.clone(), gen.num_blocks(), gen.latent_dim(), &[16]);
        let mut p2 = PreGenerator::new(4, schema, gen.num_blocks(), gen.latent_dim(), &[16]);
        p1.generator_fingerprint = gen.fingerprint();
        p2.generator_fingerprint = gen.fingerprint();
        p1.encoder_fingerprint = "enc".into();
        p2.encoder_fingerprint = "enc".into();
        let emb = EmbeddingNetwork::new(
            7,
            EmbedRole::Attack,
            32,
            EmbedArch {
                c1: 6,
                c2: 8,
                c3: 12,
                embed_dim: 8,
            },
        );
        (p1, p2, gen, emb)
    }

    #[test]
    fn fusion_degenerates_to_parents() {
        let (p1, p2, gen, _) = fixture();
        let f = FeatureVector::new(vec![0.3, 0.8]);
        let all_false =
            fused_reconstruct(&p1, &p2, &gen, &f, &[false; 4]).unwrap();
        let pixel_only = crate::pregenerator::reconstruct(&p1, &gen, &f).unwrap();
        assert_eq!(all_false, pixel_only);
        let all_true = fused_reconstruct(&p1, &p2, &gen, &f, &[true; 4]).unwrap();
        let fn_only = crate::pregenerator::reconstruct(&p2, &gen, &f).unwrap();
        assert_eq!(all_true, fn_only);
    }

    #[test]
    fn fusion_ignores_unassigned_fn_blocks() {
        let (p1, mut p2, gen, _) = fixture();
        let f = FeatureVector::new(vec![0.3, 0.8]);
        let assignment = [true, false, false, false];
        let before = fused_reconstruct(&p1, &p2, &gen, &f, &assignment).unwrap();
        // perturb the fn model's output rows for blocks 1..3 only
        let d = gen.latent_dim();
        let last = p2.params.len() - 2; // final layer weight
        {
            let t = &mut p2.params.get_mut(last).value;
            let cols = t.shape()[1];
            let data = t.data_mut();
            for row in d..4 * d {
                for c in 0..cols {
                    data[row * cols + c] += 0.37;
                }
            }
        }
        let after = fused_reconstruct(&p1, &p2, &gen, &f, &assignment).unwrap();
        assert_eq!(before, after);
        // but perturbing the assigned block changes the output
        {
            let t = &mut p2.params.get_mut(last).value;
            let cols = t.shape()[1];
            let data = t.data_mut();
            for c in 0..cols {
                data[c] += 0.37;
            }
        }
        let changed = fused_reconstruct(&p1, &p2, &gen, &f, &assignment).unwrap();
        assert_ne!(before, changed);
    }

    #[test]
    fn fingerprint_mismatch_rejected() {
        let (p1, mut p2, gen, _) = fixture();
        p2.generator_fingerprint = "other".into();
        let f = FeatureVector::new(vec![0.3, 0.8]);
        assert!(fused_reconstruct(&p1, &p2, &gen, &f, &[false; 4]).is_err());
    }

    #[test]
    fn swapping_no_block_changes_nothing() {
        let (_, _, gen, _) = fixture();
        let a = sample_style(1, gen.num_blocks(), gen.latent_dim());
        let b = sample_style(2, gen.num_blocks(), gen.latent_dim());
        let unmixed = mix_styles(&a, &b, &[false; 4]).unwrap();
        assert_eq!(gen.generate(&a).unwrap(), gen.generate(&unmixed).unwrap());
    }

    #[test]
    fn calibration_is_deterministic_and_ranks_blocks() {
        let (_, _, gen, emb) = fixture();
        let r1 = calibrate_block_assignment(&gen, &emb, 4, 11, None, 1, None).unwrap();
        let r2 = calibrate_block_assignment(&gen, &emb, 4, 11, None, 1, None).unwrap();
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
        assert_eq!(r1.blocks.len(), 4);
        assert_eq!(r1.suggested_identity_blocks.len(), 1);
        // the suggestion maximizes the embed-shift-vs-background score
        let score = |a: &BlockAspect| a.embed_shift / (a.bg_ratio + 0.1);
        let best = r1.suggested_identity_blocks[0];
        for b in &r1.blocks {
            assert!(score(&r1.blocks[best]) >= score(b) - 1e-12);
        }
    }
}
