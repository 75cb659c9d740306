//! Dataset ingestion and the deterministic synthetic-portrait renderer.
//!
//! The renderer draws anti-aliased vector primitives (background, hair cap,
//! face ellipse, eyes, mouth) from a [`PortraitParams`] record, rotates the
//! scene by the pose angle and scales by brightness. Rendering is a pure
//! function of the parameter record: identical parameters produce bitwise
//! identical images. Attribute ground truth is derived analytically from the
//! same record, so the attack has an exact oracle to be measured against.

use crate::encoder::{BlackboxEncoder, FeatureVector};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, SeedRng, Stream};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const SUPPORTED_RESOLUTIONS: [usize; 4] = [32, 64, 128, 256];

/// Normalized RGB image, channel-major (`3*H*W`), values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    resolution: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(resolution: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * resolution * resolution {
            return Err(Error::validation(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                3 * resolution * resolution
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("pixel values must lie in [0,1]"));
        }
        Ok(Image { resolution, data })
    }

    /// Clamp raw values into range instead of rejecting them. Used for
    /// network outputs where roundoff may poke marginally outside `[0,1]`.
    pub fn from_raw_clamped(resolution: usize, data: Vec<f64>) -> Self {
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image { resolution, data }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.resolution as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        crate::nn::hex_digest(h)
    }

    /// Pack images into an NCHW tensor.
    pub fn batch_tensor(images: &[&Image]) -> Tensor {
        assert!(!images.is_empty());
        let r = images[0].resolution;
        let stride = 3 * r * r;
        let mut data = vec![0.0; images.len() * stride];
        for (i, im) in images.iter().enumerate() {
            assert_eq!(im.resolution, r, "mixed resolutions in batch");
            data[i * stride..(i + 1) * stride].copy_from_slice(&im.data);
        }
        Tensor::from_vec(&[images.len(), 3, r, r], data)
    }

    /// Split an NCHW tensor back into clamped images.
    pub fn from_batch_tensor(t: &Tensor) -> Vec<Image> {
        let s = t.shape();
        assert_eq!(s.len(), 4);
        assert_eq!(s[1], 3);
        let stride = 3 * s[2] * s[3];
        (0..s[0])
            .map(|i| {
                Image::from_raw_clamped(s[2], t.data()[i * stride..(i + 1) * stride].to_vec())
            })
            .collect()
    }
}

/// The ten bounded scalars that fully determine a synthetic portrait.
/// Every field is normalized to `[0,1]`; the renderer maps them to geometry
/// and color internally.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortraitParams {
    pub face_hue: f64,
    pub face_size: f64,
    pub face_cx: f64,
    pub face_cy: f64,
    pub eye_shape: f64,
    pub mouth_curve: f64,
    pub hair_hue: f64,
    pub background_hue: f64,
    pub brightness: f64,
    pub pose_angle: f64,
}

pub const PARAM_NAMES: [&str; 10] = [
    "face_hue",
    "face_size",
    "face_cx",
    "face_cy",
    "eye_shape",
    "mouth_curve",
    "hair_hue",
    "background_hue",
    "brightness",
    "pose_angle",
];

/// Maximum rotation in radians when `pose_angle` hits its bounds.
pub const POSE_MAX_RAD: f64 = 0.6;

impl PortraitParams {
    pub fn field(&self, name: &str) -> Option<f64> {
        Some(match name {
            "face_hue" => self.face_hue,
            "face_size" => self.face_size,
            "face_cx" => self.face_cx,
            "face_cy" => self.face_cy,
            "eye_shape" => self.eye_shape,
            "mouth_curve" => self.mouth_curve,
            "hair_hue" => self.hair_hue,
            "background_hue" => self.background_hue,
            "brightness" => self.brightness,
            "pose_angle" => self.pose_angle,
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for name in PARAM_NAMES {
            let v = self.field(name).unwrap();
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!(
                    "parameter `{name}` = {v} outside [0,1]"
                )));
            }
        }
        Ok(())
    }

    /// Uniform sample over the full parameter box (brightness kept off the
    /// very dark end so content stays visible).
    pub fn sample(rng: &mut SeedRng) -> Self {
        PortraitParams {
            face_hue: rng.gen_range(0.0..1.0),
            face_size: rng.gen_range(0.0..1.0),
            face_cx: rng.gen_range(0.0..1.0),
            face_cy: rng.gen_range(0.0..1.0),
            eye_shape: rng.gen_range(0.0..1.0),
            mouth_curve: rng.gen_range(0.0..1.0),
            hair_hue: rng.gen_range(0.0..1.0),
            background_hue: rng.gen_range(0.0..1.0),
            brightness: rng.gen_range(0.4..1.0),
            pose_angle: rng.gen_range(0.0..1.0),
        }
    }

    /// Re-sample only the nuisance fields (pose, background, brightness and
    /// a little framing jitter), keeping the face-intrinsic identity tuple
    /// (face_hue, eye_shape, mouth_curve, face_size) and hair fixed.
    pub fn with_nuisance(&self, rng: &mut SeedRng) -> Self {
        let mut p = *self;
        p.pose_angle = rng.gen_range(0.0..1.0);
        p.background_hue = rng.gen_range(0.0..1.0);
        p.brightness = rng.gen_range(0.5..1.0);
        p.face_cx = (self.face_cx + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0);
        p.face_cy = (self.face_cy + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0);
        p
    }
}

/// Per-pixel compositing weights of each scene layer, after rotation.
/// Weights at a pixel sum to 1; `background` is the residual not covered by
/// any foreground primitive.
pub struct RegionWeights {
    pub resolution: usize,
    pub background: Vec<f64>,
    pub hair: Vec<f64>,
    pub face: Vec<f64>,
    pub eyes: Vec<f64>,
    pub mouth: Vec<f64>,
}

// Polynomial sin/cos keep rendering bit-reproducible across libm builds.
// |x| stays below ~0.7 rad so a short Taylor expansion is exact to f64 noise.
fn sin_poly(x: f64) -> f64 {
    let x2 = x * x;
    x * (1.0
        - x2 / 6.0
            * (1.0 - x2 / 20.0 * (1.0 - x2 / 42.0 * (1.0 - x2 / 72.0 * (1.0 - x2 / 110.0)))))
}

fn cos_poly(x: f64) -> f64 {
    let x2 = x * x;
    1.0 - x2 / 2.0 * (1.0 - x2 / 12.0 * (1.0 - x2 / 30.0 * (1.0 - x2 / 56.0 * (1.0 - x2 / 90.0))))
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn skin_color(h: f64) -> [f64; 3] {
    lerp3([0.36, 0.22, 0.14], [0.99, 0.86, 0.72], h)
}

fn hair_color(h: f64) -> [f64; 3] {
    lerp3([0.13, 0.08, 0.05], [0.93, 0.82, 0.52], h)
}

fn background_color(h: f64) -> [f64; 3] {
    // A saturated wheel through blue/green/red keeps backgrounds diverse.
    let r = 0.5 + 0.4 * cos_wheel(h);
    let g = 0.5 + 0.4 * cos_wheel(h - 1.0 / 3.0);
    let b = 0.5 + 0.4 * cos_wheel(h + 1.0 / 3.0);
    [r, g, b]
}

// Cosine on the unit circle built from the polynomial kernel via range folding.
fn cos_wheel(t: f64) -> f64 {
    let mut t = t - t.floor(); // [0,1)
    let (sign, tt) = if t < 0.25 {
        (1.0, t)
    } else if t < 0.5 {
        (-1.0, 0.5 - t)
    } else if t < 0.75 {
        t -= 0.5;
        (-1.0, t)
    } else {
        (1.0, 1.0 - t)
    };
    sign * cos_poly(2.0 * std::f64::consts::PI * tt)
}

struct Scene {
    face_c: (f64, f64),
    face_r: (f64, f64),
    hair_c: (f64, f64),
    hair_r: (f64, f64),
    eye_l: (f64, f64),
    eye_r: (f64, f64),
    eye_rad: (f64, f64),
    mouth_y: f64,
    mouth_half_w: f64,
    mouth_bend: f64,
    mouth_thick: f64,
    colors: [[f64; 3]; 5], // bg, hair, face, eyes, mouth
}

fn build_scene(p: &PortraitParams) -> Scene {
    let rx = 0.16 + 0.12 * p.face_size;
    let ry = 1.25 * rx;
    let cx = 0.40 + 0.20 * p.face_cx;
    let cy = 0.42 + 0.16 * p.face_cy;
    let eye_dx = 0.42 * rx;
    let eye_dy = 0.22 * ry;
    Scene {
        face_c: (cx, cy),
        face_r: (rx, ry),
        hair_c: (cx, cy - 0.42 * ry),
        hair_r: (1.14 * rx, 0.72 * ry),
        eye_l: (cx - eye_dx, cy - eye_dy),
        eye_r: (cx + eye_dx, cy - eye_dy),
        eye_rad: (
            rx * (0.13 + 0.09 * p.eye_shape),
            rx * (0.20 - 0.13 * p.eye_shape),
        ),
        mouth_y: cy + 0.48 * ry,
        mouth_half_w: 0.48 * rx,
        mouth_bend: (p.mouth_curve - 0.5) * 0.56 * ry,
        mouth_thick: 0.035 + 0.01 * p.face_size,
        colors: [
            background_color(p.background_hue),
            hair_color(p.hair_hue),
            skin_color(p.face_hue),
            [0.06, 0.05, 0.09],
            [0.55, 0.12, 0.14],
        ],
    }
}

fn ellipse_cov(u: f64, v: f64, c: (f64, f64), r: (f64, f64), aa: f64) -> f64 {
    let dx = (u - c.0) / r.0;
    let dy = (v - c.1) / r.1;
    let d = (dx * dx + dy * dy).sqrt();
    let w = aa / r.0.min(r.1);
    ((1.0 + w - d) / (2.0 * w)).clamp(0.0, 1.0)
}

fn mouth_cov(u: f64, v: f64, s: &Scene, aa: f64) -> f64 {
    let t = (u - s.face_c.0) / s.mouth_half_w;
    if t.abs() > 1.0 {
        let over = (t.abs() - 1.0) * s.mouth_half_w;
        if over > aa {
            return 0.0;
        }
    }
    let curve_v = s.mouth_y + s.mouth_bend * (t * t - 0.5);
    let d = (v - curve_v).abs();
    let core = ((s.mouth_thick + aa - d) / (2.0 * aa)).clamp(0.0, 1.0);
    // soften the horizontal ends
    let end =
        ((1.0 + aa / s.mouth_half_w - t.abs()) / (2.0 * aa / s.mouth_half_w)).clamp(0.0, 1.0);
    core * end
}

/// Render one portrait. Pure and deterministic: the same `(params,
/// resolution)` yields bitwise identical pixels on every run.
pub fn render_portrait(params: &PortraitParams, resolution: usize) -> Result<Image> {
    Ok(render_portrait_with_regions(params, resolution)?.0)
}

/// Render and also return the per-layer compositing weights.
pub fn render_portrait_with_regions(
    params: &PortraitParams,
    resolution: usize,
) -> Result<(Image, RegionWeights)> {
    params.validate()?;
    if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
        return Err(Error::validation(format!(
            "resolution {resolution} not in {SUPPORTED_RESOLUTIONS:?}"
        )));
    }
    let s = build_scene(params);
    let theta = (params.pose_angle - 0.5) * 2.0 * POSE_MAX_RAD;
    let (sin_t, cos_t) = (sin_poly(-theta), cos_poly(-theta));
    let aa = 0.75 / resolution as f64;
    let n = resolution * resolution;

    let mut rgb = vec![0.0; 3 * n];
    let mut wbg = vec![0.0; n];
    let mut whair = vec![0.0; n];
    let mut wface = vec![0.0; n];
    let mut weyes = vec![0.0; n];
    let mut wmouth = vec![0.0; n];

    // Row-parallel: each pixel is independent, so scheduling cannot change
    // the output.
    let rows: Vec<Vec<f64>> = par::map_indexed(resolution, |py| {
        let mut row = vec![0.0; resolution * 8]; // r,g,b,bg,hair,face,eyes,mouth
        for px in 0..resolution {
            let u0 = (px as f64 + 0.5) / resolution as f64;
            let v0 = (py as f64 + 0.5) / resolution as f64;
            // rotate the sampling point back into the canonical scene
            let (du, dv) = (u0 - 0.5, v0 - 0.5);
            let u = 0.5 + cos_t * du - sin_t * dv;
            let v = 0.5 + sin_t * du + cos_t * dv;

            let cov_hair = ellipse_cov(u, v, s.hair_c, s.hair_r, aa);
            let cov_face = ellipse_cov(u, v, s.face_c, s.face_r, aa);
            let cov_eyes = ellipse_cov(u, v, s.eye_l, s.eye_rad, aa)
                .max(ellipse_cov(u, v, s.eye_r, s.eye_rad, aa));
            let cov_mouth = mouth_cov(u, v, &s, aa);

            // painter's order: bg, hair, face, eyes, mouth
            let w_mouth = cov_mouth;
            let w_eyes = cov_eyes * (1.0 - w_mouth);
            let w_face = cov_face * (1.0 - cov_eyes) * (1.0 - cov_mouth);
            let w_hair = cov_hair * (1.0 - cov_face) * (1.0 - cov_eyes) * (1.0 - cov_mouth);
            let w_bg = (1.0 - cov_hair) * (1.0 - cov_face) * (1.0 - cov_eyes) * (1.0 - cov_mouth);

            let weights = [w_bg, w_hair, w_face, w_eyes, w_mouth];
            let mut col = [0.0; 3];
            for (w, c) in weights.iter().zip(&s.colors) {
                for k in 0..3 {
                    col[k] += w * c[k];
                }
            }
            let o = px * 8;
            row[o] = col[0] * params.brightness;
            row[o + 1] = col[1] * params.brightness;
            row[o + 2] = col[2] * params.brightness;
            row[o + 3] = w_bg;
            row[o + 4] = w_hair;
            row[o + 5] = w_face;
            row[o + 6] = w_eyes;
            row[o + 7] = w_mouth;
        }
        row
    });

    for (py, row) in rows.iter().enumerate() {
        for px in 0..resolution {
            let i = py * resolution + px;
            let o = px * 8;
            rgb[i] = row[o];
            rgb[n + i] = row[o + 1];
            rgb[2 * n + i] = row[o + 2];
            wbg[i] = row[o + 3];
            whair[i] = row[o + 4];
            wface[i] = row[o + 5];
            weyes[i] = row[o + 6];
            wmouth[i] = row[o + 7];
        }
    }

    Ok((
        Image::new(resolution, rgb)?,
        RegionWeights {
            resolution,
            background: wbg,
            hair: whair,
            face: wface,
            eyes: weyes,
            mouth: wmouth,
        },
    ))
}

// ---- attribute schema ------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrKind {
    Continuous,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub kind: AttrKind,
}

/// Ordered attribute list; the encoder regresses exactly these values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub attrs: Vec<AttributeSpec>,
}

/// Binary attributes switch at this fraction of the parameter range.
pub const BINARY_THRESHOLD: f64 = 0.5;

enum Derivation {
    /// Continuous: the parameter value itself.
    Field(&'static str),
    /// Binary: 1 when the parameter is at or above the threshold.
    Above(&'static str),
    /// Binary: 1 when the parameter is below the threshold.
    Below(&'static str),
}

fn derivation_for(name: &str) -> Option<Derivation> {
    if let Some(idx) = PARAM_NAMES.iter().position(|n| *n == name) {
        return Some(Derivation::Field(PARAM_NAMES[idx]));
    }
    Some(match name {
        "light_skin" => Derivation::Above("face_hue"),
        "large_face" => Derivation::Above("face_size"),
        "face_right" => Derivation::Above("face_cx"),
        "face_low" => Derivation::Above("face_cy"),
        "narrow_eyes" => Derivation::Above("eye_shape"),
        "smiling" => Derivation::Above("mouth_curve"),
        "dark_hair" => Derivation::Below("hair_hue"),
        "warm_background" => Derivation::Above("background_hue"),
        "bright_image" => Derivation::Above("brightness"),
        "tilted_right" => Derivation::Above("pose_angle"),
        _ => return None,
    })
}

impl AttributeSchema {
    pub fn dimension(&self) -> usize {
        self.attrs.len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.attrs.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.attrs.iter().any(|a| a.name == name)
    }

    /// Continuous schema over the given parameter-derived attribute names.
    pub fn continuous(names: &[&str]) -> Result<Self> {
        let schema = AttributeSchema {
            attrs: names
                .iter()
                .map(|n| AttributeSpec {
                    name: n.to_string(),
                    kind: AttrKind::Continuous,
                })
                .collect(),
        };
        schema.check_derivable()?;
        Ok(schema)
    }

    pub fn binary(names: &[&str]) -> Result<Self> {
        let schema = AttributeSchema {
            attrs: names
                .iter()
                .map(|n| AttributeSpec {
                    name: n.to_string(),
                    kind: AttrKind::Binary,
                })
                .collect(),
        };
        schema.check_derivable()?;
        Ok(schema)
    }

    /// All ten parameters as continuous attributes.
    pub fn continuous_all() -> Self {
        AttributeSchema::continuous(&PARAM_NAMES).unwrap()
    }

    /// Continuous schema excluding the listed parameters — the
    /// hidden-attribute construction used by the leakage probe.
    pub fn continuous_excluding(hidden: &[&str]) -> Self {
        let names: Vec<&str> = PARAM_NAMES
            .iter()
            .copied()
            .filter(|n| !hidden.contains(n))
            .collect();
        AttributeSchema::continuous(&names).unwrap()
    }

    fn check_derivable(&self) -> Result<()> {
        for a in &self.attrs {
            if derivation_for(&a.name).is_none() {
                return Err(Error::config(format!(
                    "attribute `{}` has no defined derivation",
                    a.name
                )));
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.attrs {
            h.update(a.name.as_bytes());
            h.update([match a.kind {
                AttrKind::Continuous => 0u8,
                AttrKind::Binary => 1u8,
            }]);
        }
        crate::nn::hex_digest(h)
    }
}

/// Analytic ground-truth attributes for a synthetic portrait.
pub fn derive_attributes(
    params: &PortraitParams,
    schema: &AttributeSchema,
) -> Result<FeatureVector> {
    let mut values = Vec::with_capacity(schema.dimension());
    for a in &schema.attrs {
        let d = derivation_for(&a.name).ok_or_else(|| {
            Error::config(format!("attribute `{}` has no defined derivation", a.name))
        })?;
        let v = match d {
            Derivation::Field(f) => params.field(f).unwrap(),
            Derivation::Above(f) => {
                if params.field(f).unwrap() >= BINARY_THRESHOLD {
                    1.0
                } else {
                    0.0
                }
            }
            Derivation::Below(f) => {
                if params.field(f).unwrap() < BINARY_THRESHOLD {
                    1.0
                } else {
                    0.0
                }
            }
        };
        values.push(v);
    }
    Ok(FeatureVector::new(values))
}

// ---- datasets ----------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub seed: u64,
    pub resolution: usize,
    pub schema: Option<AttributeSchema>,
    pub count: usize,
    pub identity_disjoint: bool,
    /// Threshold used for binary attribute derivations.
    pub binary_threshold: f64,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub attributes: Option<Vec<FeatureVector>>,
    pub identity_ids: Option<Vec<u32>>,
    /// Generation parameters, kept for synthetic data so hidden attributes
    /// can be scored exactly.
    pub params: Option<Vec<PortraitParams>>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Per-item SHA-256 fingerprints (used for contamination checks).
    pub fn item_fingerprints(&self) -> Vec<String> {
        par::map_indexed(self.images.len(), |i| self.images[i].fingerprint())
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for f in self.item_fingerprints() {
            h.update(f.as_bytes());
        }
        crate::nn::hex_digest(h)
    }

    pub fn take_indices(&self, idx: &[usize], identity_disjoint: bool) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            attributes: self
                .attributes
                .as_ref()
                .map(|a| idx.iter().map(|&i| a[i].clone()).collect()),
            identity_ids: self
                .identity_ids
                .as_ref()
                .map(|ids| idx.iter().map(|&i| ids[i]).collect()),
            params: self
                .params
                .as_ref()
                .map(|p| idx.iter().map(|&i| p[i]).collect()),
            manifest: DatasetManifest {
                count: idx.len(),
                identity_disjoint,
                ..self.manifest.clone()
            },
        }
    }
}

/// Generate a synthetic portrait dataset with analytically known attributes.
pub fn synth_dataset(
    seed: u64,
    count: usize,
    resolution: usize,
    schema: &AttributeSchema,
) -> Result<Dataset> {
    let mut rng = rng::rng_for(seed, Stream::Data);
    let params: Vec<PortraitParams> =
        (0..count).map(|_| PortraitParams::sample(&mut rng)).collect();
    synth_from_params(seed, params, resolution, schema, None)
}

/// Generate an identity-structured dataset: `identities` subjects with
/// `per_identity` nuisance-varied shots each.
pub fn synth_identity_dataset(
    seed: u64,
    identities: usize,
    per_identity: usize,
    resolution: usize,
    schema: &AttributeSchema,
) -> Result<Dataset> {
    let mut rng = rng::rng_for(seed, Stream::Data);
    let mut params = Vec::with_capacity(identities * per_identity);
    let mut ids = Vec::with_capacity(identities * per_identity);
    for id in 0..identities {
        let base = PortraitParams::sample(&mut rng);
        for _ in 0..per_identity {
            params.push(base.with_nuisance(&mut rng));
            ids.push(id as u32);
        }
    }
    synth_from_params(seed, params, resolution, schema, Some(ids))
}

fn synth_from_params(
    seed: u64,
    params: Vec<PortraitParams>,
    resolution: usize,
    schema: &AttributeSchema,
    identity_ids: Option<Vec<u32>>,
) -> Result<Dataset> {
    let images: Vec<Image> = par::map_indexed(params.len(), |i| {
        render_portrait(&params[i], resolution).expect("sampled params are in bounds")
    });
    let attributes = params
        .iter()
        .map(|p| derive_attributes(p, schema))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: DatasetManifest {
            source: "synthetic".into(),
            seed,
            resolution,
            schema: Some(schema.clone()),
            count: params.len(),
            identity_disjoint: false,
            binary_threshold: BINARY_THRESHOLD,
        },
        images,
        attributes: Some(attributes),
        identity_ids,
        params: Some(params),
    })
}

/// Split into two disjoint datasets. With `identity_disjoint` the split is on
/// identity labels, so no identity appears on both sides.
pub fn split_disjoint(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
    identity_disjoint: bool,
) -> Result<(Dataset, Dataset)> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::validation(format!(
            "split fraction {fraction} outside (0,1)"
        )));
    }
    let mut rng = rng::rng_for(seed, Stream::Split);
    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = if identity_disjoint {
        let ids = dataset
            .identity_ids
            .as_ref()
            .ok_or_else(|| Error::validation("identity-disjoint split requires identity labels"))?;
        let mut uniq: Vec<u32> = ids.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        let perm = rng::permutation(&mut rng, uniq.len());
        let n_left = ((uniq.len() as f64) * fraction).round() as usize;
        if n_left == 0 || n_left == uniq.len() {
            return Err(Error::validation("split fraction yields an empty side"));
        }
        let left_ids: std::collections::HashSet<u32> =
            perm[..n_left].iter().map(|&i| uniq[i]).collect();
        let mut l = Vec::new();
        let mut r = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            if left_ids.contains(id) {
                l.push(i);
            } else {
                r.push(i);
            }
        }
        (l, r)
    } else {
        let perm = rng::permutation(&mut rng, dataset.len());
        let n_left = ((dataset.len() as f64) * fraction).round() as usize;
        if n_left == 0 || n_left == dataset.len() {
            return Err(Error::validation("split fraction yields an empty side"));
        }
        let mut l = perm[..n_left].to_vec();
        let mut r = perm[n_left..].to_vec();
        l.sort_unstable();
        r.sort_unstable();
        (l, r)
    };
    Ok((
        dataset.take_indices(&left_idx, identity_disjoint),
        dataset.take_indices(&right_idx, identity_disjoint),
    ))
}

// ---- real-image ingestion ----------------------------------------------------

/// Load a directory of images plus a CSV attribute manifest. The CSV header
/// names the attributes (all treated as continuous); column 0 holds the file
/// name. Images are center-cropped to square and resized to `resolution`.
pub fn load_dataset_from_dir(dir: &Path, csv_path: &Path, resolution: usize) -> Result<Dataset> {
    if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
        return Err(Error::validation(format!(
            "resolution {resolution} not in {SUPPORTED_RESOLUTIONS:?}"
        )));
    }
    let mut reader = csv::Reader::from_path(csv_path)
        .map_err(|e| Error::Prerequisite(format!("cannot open attribute csv: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::validation(format!("bad csv header: {e}")))?
        .clone();
    if headers.len() < 2 {
        return Err(Error::validation(
            "attribute csv needs a filename column plus at least one attribute",
        ));
    }
    let names: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let schema = AttributeSchema {
        attrs: names
            .iter()
            .map(|n| AttributeSpec {
                name: n.clone(),
                kind: AttrKind::Continuous,
            })
            .collect(),
    };
    let mut images = Vec::new();
    let mut attributes = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::validation(format!("bad csv row: {e}")))?;
        let fname = rec.get(0).unwrap().to_string();
        let mut vals = Vec::with_capacity(names.len());
        for j in 1..rec.len() {
            let v: f64 = rec
                .get(j)
                .unwrap()
                .trim()
                .parse()
                .map_err(|_| Error::validation(format!("non-numeric attribute in row {fname}")))?;
            vals.push(v);
        }
        images.push(load_image_file(&dir.join(&fname), resolution)?);
        attributes.push(FeatureVector::new(vals));
    }
    if images.is_empty() {
        return Err(Error::validation("attribute csv lists no rows"));
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            source: dir.display().to_string(),
            seed: 0,
            resolution,
            schema: Some(schema),
            count: images.len(),
            identity_disjoint: false,
            binary_threshold: BINARY_THRESHOLD,
        },
        images,
        attributes: Some(attributes),
        identity_ids: None,
        params: None,
    })
}

fn load_image_file(path: &Path, resolution: usize) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Prerequisite(format!("cannot load {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let side = w.min(h);
    let (x0, y0) = ((w - side) / 2, (h - side) / 2);
    let mut cropped = vec![0.0; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let p = img.get_pixel((x0 + x) as u32, (y0 + y) as u32);
            for c in 0..3 {
                cropped[c * side * side + y * side + x] = p.0[c] as f64 / 255.0;
            }
        }
    }
    let t = Tensor::from_vec(&[1, 3, side, side], cropped);
    let resized = crate::tensor::bilinear_resize_forward(&t, resolution, resolution);
    Ok(Image::from_raw_clamped(resolution, resized.into_data()))
}

// ---- inverted dataset ----------------------------------------------------------

/// Pairs `(f, X)` where `f` was obtained by querying the target encoder on `X`.
#[derive(Clone, Debug)]
pub struct InvertedDataset {
    pub pairs: Vec<(FeatureVector, Image)>,
    pub encoder_fingerprint: String,
    pub schema: AttributeSchema,
    pub resolution: usize,
    /// Fingerprints of the source dataset items (contamination guard).
    pub item_fingerprints: Vec<String>,
}

/// Query the black-box encoder over the dataset and keep the `(f, X)` pairs,
/// order preserved. The encoder is only touched through its query interface.
pub fn build_inverted_dataset(
    encoder: &BlackboxEncoder,
    dataset: &Dataset,
    batch: usize,
) -> Result<InvertedDataset> {
    if dataset.is_empty() {
        return Err(Error::validation("cannot invert an empty dataset"));
    }
    let batch = batch.max(1);
    let mut pairs = Vec::with_capacity(dataset.len());
    for (bi, chunk) in dataset.images.chunks(batch).enumerate() {
        let refs: Vec<&Image> = chunk.iter().collect();
        let fs = encoder
            .query(&refs)
            .map_err(|e| Error::Prerequisite(format!("encoder query failed at batch {bi}: {e}")))?;
        for (f, x) in fs.into_iter().zip(chunk) {
            pairs.push((f, x.clone()));
        }
    }
    Ok(InvertedDataset {
        pairs,
        encoder_fingerprint: encoder.fingerprint().to_string(),
        schema: encoder.schema().clone(),
        resolution: dataset.manifest.resolution,
        item_fingerprints: dataset.item_fingerprints(),
    })
}

impl InvertedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> PortraitParams {
        PortraitParams {
            face_hue: 0.6,
            face_size: 0.5,
            face_cx: 0.5,
            face_cy: 0.5,
            eye_shape: 0.3,
            mouth_curve: 0.8,
            hair_hue: 0.2,
            background_hue: 0.7,
            brightness: 0.9,
            pose_angle: 0.35,
        }
    }

    #[test]
    fn render_is_deterministic() {
        let p = sample_params();
        let a = render_portrait(&p, 32).unwrap();
        let b = render_portrait(&p, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_brightness_renders_black() {
        let mut p = sample_params();
        p.brightness = 0.0;
        let img = render_portrait(&p, 32).unwrap();
        assert!(img.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn background_sweep_only_touches_background() {
        let p = sample_params();
        let (img_a, regions) = render_portrait_with_regions(&p, 64).unwrap();
        let mut p2 = p;
        p2.background_hue = 0.1;
        let img_b = render_portrait(&p2, 64).unwrap();
        let n = 64 * 64;
        for i in 0..n {
            if regions.background[i] == 0.0 {
                for c in 0..3 {
                    assert_eq!(
                        img_a.data()[c * n + i],
                        img_b.data()[c * n + i],
                        "pure foreground pixel {i} changed under background sweep"
                    );
                }
            }
        }
        // and the background did change somewhere
        assert_ne!(img_a, img_b);
    }

    #[test]
    fn rotation_moves_face_weights() {
        let mut p = sample_params();
        p.face_cx = 0.9;
        p.pose_angle = 0.0;
        let (_, r0) = render_portrait_with_regions(&p, 32).unwrap();
        p.pose_angle = 1.0;
        let (_, r1) = render_portrait_with_regions(&p, 32).unwrap();
        let diff: f64 = r0
            .face
            .iter()
            .zip(&r1.face)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1.0, "pose sweep barely moved the face: {diff}");
    }

    #[test]
    fn out_of_bounds_param_is_named() {
        let mut p = sample_params();
        p.mouth_curve = 1.4;
        let err = render_portrait(&p, 32).unwrap_err();
        assert!(err.to_string().contains("mouth_curve"), "{err}");
    }

    #[test]
    fn unsupported_resolution_rejected() {
        assert!(render_portrait(&sample_params(), 48).is_err());
    }

    #[test]
    fn identity_derivation() {
        let schema = AttributeSchema::continuous(&["brightness"]).unwrap();
        let mut p = sample_params();
        p.brightness = 0.7;
        let f = derive_attributes(&p, &schema).unwrap();
        assert_eq!(f.values(), &[0.7]);
    }

    #[test]
    fn binary_threshold_case() {
        let schema = AttributeSchema::binary(&["dark_hair"]).unwrap();
        let mut p = sample_params();
        p.hair_hue = 0.2;
        let f = derive_attributes(&p, &schema).unwrap();
        assert_eq!(f.values(), &[1.0]);
        p.hair_hue = 0.8;
        let f = derive_attributes(&p, &schema).unwrap();
        assert_eq!(f.values(), &[0.0]);
    }

    #[test]
    fn unknown_attribute_rejected() {
        assert!(AttributeSchema::continuous(&["nose_length"]).is_err());
    }

    #[test]
    fn full_schema_matches_per_field_recomputation() {
        // independent oracle: recompute each attribute directly per field
        let schema = AttributeSchema::continuous_all();
        let mut rng = rng::rng_for(42, Stream::Data);
        for _ in 0..1000 {
            let p = PortraitParams::sample(&mut rng);
            let f = derive_attributes(&p, &schema).unwrap();
            for (j, name) in PARAM_NAMES.iter().enumerate() {
                assert_eq!(f.values()[j], p.field(name).unwrap());
            }
        }
    }

    #[test]
    fn split_is_disjoint_and_total() {
        let schema = AttributeSchema::continuous_all();
        let ds = synth_dataset(3, 10, 32, &schema).unwrap();
        let (a, b) = split_disjoint(&ds, 0.5, 9, false).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(b.len(), 5);
        let fa = a.item_fingerprints();
        let fb = b.item_fingerprints();
        assert!(fa.iter().all(|f| !fb.contains(f)));
        // union restores the source
        let mut all = fa;
        all.extend(fb);
        all.sort();
        let mut src = ds.item_fingerprints();
        src.sort();
        assert_eq!(all, src);
    }

    #[test]
    fn split_reproducible_from_seed() {
        let schema = AttributeSchema::continuous_all();
        let ds = synth_dataset(3, 20, 32, &schema).unwrap();
        let (a1, _) = split_disjoint(&ds, 0.3, 5, false).unwrap();
        let (a2, _) = split_disjoint(&ds, 0.3, 5, false).unwrap();
        assert_eq!(a1.item_fingerprints(), a2.item_fingerprints());
    }

    #[test]
    fn identity_split_keeps_identities_apart() {
        let schema = AttributeSchema::continuous_all();
        let ds = synth_identity_dataset(4, 10, 3, 32, &schema).unwrap();
        let (a, b) = split_disjoint(&ds, 0.5, 7, true).unwrap();
        let ids_a: std::collections::HashSet<u32> =
            a.identity_ids.as_ref().unwrap().iter().copied().collect();
        let ids_b: std::collections::HashSet<u32> =
            b.identity_ids.as_ref().unwrap().iter().copied().collect();
        assert!(ids_a.is_disjoint(&ids_b));
        assert!(a.manifest.identity_disjoint);
    }

    #[test]
    fn bad_fraction_rejected() {
        let schema = AttributeSchema::continuous_all();
        let ds = synth_dataset(3, 4, 32, &schema).unwrap();
        assert!(split_disjoint(&ds, 0.0, 1, false).is_err());
        assert!(split_disjoint(&ds, 0.05, 1, false).is_err());
    }

    #[test]
    fn attribute_oracle_is_pure_under_permutation() {
        let schema = AttributeSchema::continuous_all();
        let ds = synth_dataset(11, 16, 32, &schema).unwrap();
        let perm: Vec<usize> = (0..16).rev().collect();
        let permuted = ds.take_indices(&perm, false);
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(
                permuted.attributes.as_ref().unwrap()[i].values(),
                ds.attributes.as_ref().unwrap()[src].values()
            );
        }
    }
}
