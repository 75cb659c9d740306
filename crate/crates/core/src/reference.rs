//! Reference constants from the published full-scale evaluation of this
//! attack family (256x256 face generator, pretrained identity embedders,
//! in-the-wild face datasets). These values are not reproducible at desk
//! scale; they are stored so reports can surface them next to desk-scale
//! numbers and so full-scale runs have comparison targets.

/// One row of the full-scale results table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FullScaleRow {
    /// Encoder training corpus for the row group.
    pub setting: &'static str,
    /// Reconstruction model: "pixel", "fn" or "mixed".
    pub model: &'static str,
    pub image_mse: f64,
    pub feature_mse: f64,
    pub ssim: f64,
    pub eval1_dist: f64,
    pub eval2_dist: f64,
}

/// Full-scale reconstruction metrics: the 32-attribute setting (encoder and
/// decoder trained on the same corpus) and the 40-binary-attribute setting
/// (different corpora).
pub const FULL_SCALE_ROWS: [FullScaleRow; 6] = [
    FullScaleRow {
        setting: "same-corpus",
        model: "pixel",
        image_mse: 0.3535,
        feature_mse: 7.8280,
        ssim: 0.1200,
        eval1_dist: 0.0003272,
        eval2_dist: 0.004061,
    },
    FullScaleRow {
        setting: "same-corpus",
        model: "fn",
        image_mse: 0.4017,
        feature_mse: 4.5761,
        ssim: 0.1247,
        eval1_dist: 0.0003367,
        eval2_dist: 0.003797,
    },
    FullScaleRow {
        setting: "same-corpus",
        model: "mixed",
        image_mse: 0.3417,
        feature_mse: 3.3914,
        ssim: 0.1302,
        eval1_dist: 0.0003138,
        eval2_dist: 0.003723,
    },
    FullScaleRow {
        setting: "cross-corpus",
        model: "pixel",
        image_mse: 0.4387,
        feature_mse: 0.2059,
        ssim: 0.0934,
        eval1_dist: 0.0003947,
        eval2_dist: 0.003992,
    },
    FullScaleRow {
        setting: "cross-corpus",
        model: "fn",
        image_mse: 0.4399,
        feature_mse: 0.1759,
        ssim: 0.1016,
        eval1_dist: 0.0003631,
        eval2_dist: 0.003934,
    },
    FullScaleRow {
        setting: "cross-corpus",
        model: "mixed",
        image_mse: 0.4302,
        feature_mse: 0.1744,
        ssim: 0.0972,
        eval1_dist: 0.0003967,
        eval2_dist: 0.004053,
    },
];

/// Distance scores between two disjoint subsets of the full-scale face
/// corpus: what "an unrelated image from the same distribution" scores.
pub const FULL_SCALE_BASELINE_IMAGE_MSE: f64 = 0.62;
pub const FULL_SCALE_BASELINE_SSIM: f64 = 0.06;
pub const FULL_SCALE_BASELINE_EVAL1: f64 = 0.0005;
pub const FULL_SCALE_BASELINE_EVAL2: f64 = 0.0037;

/// Full-scale training configuration of the reference attack target:
/// an 18-layer residual regression network trained for 300 epochs.
pub const FULL_SCALE_ENCODER_LAYERS: usize = 18;
pub const FULL_SCALE_ENCODER_EPOCHS: usize = 300;

/// Full-scale generator geometry: seven style blocks at 256x256 output.
pub const FULL_SCALE_GENERATOR_BLOCKS: usize = 7;
pub const FULL_SCALE_GENERATOR_RESOLUTION: usize = 256;

/// Default full-scale fusion assignment: blocks 2 and 3 (1-indexed) carry
/// the embedding-trained pre-generator, the rest the pixel-trained one.
pub const FULL_SCALE_IDENTITY_BLOCKS: [usize; 2] = [1, 2];
