//! Run configuration: one JSON document covering featurization, model
//! architecture, training and evaluation. Every field has a default equal
//! to the toy configuration; unknown keys are rejected. `RunConfig::paper`
//! holds the published large-scale hyperparameters and is used for shape
//! checks only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DtypeChoice {
    #[serde(rename = "float32")]
    F32,
    #[serde(rename = "float64")]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainSingleTrack,
    Mtl,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::PretrainSingleTrack => write!(f, "pretrain_single_track"),
            Stage::Mtl => write!(f, "mtl"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate_hz: u32,
    /// Analysis window in samples (25 ms at 16 kHz).
    pub window: usize,
    /// Window stride in samples (10 ms).
    pub hop: usize,
    pub dft_size: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_eps: f64,
    /// Consecutive frames folded into one feature vector.
    pub stack: usize,
    /// Hard cap on feature steps per item.
    pub max_t: usize,
    pub video_fps: f64,
    pub frame_h: usize,
    pub frame_w: usize,
    pub frame_c: usize,
    /// Symbol vocabulary size, blank excluded.
    pub vocab_size: usize,
    /// Per-token signature waveform length in milliseconds.
    pub template_ms: f64,
    pub audio_noise_sigma: f64,
    pub video_noise_sigma: f64,
    /// Seed of the fixed per-vocab template bank.
    pub template_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate_hz: 16_000,
            window: 400,
            hop: 160,
            dft_size: 512,
            n_mels: 80,
            fmin_hz: 0.0,
            fmax_hz: 8_000.0,
            log_eps: 1e-6,
            stack: 3,
            max_t: 512,
            video_fps: 100.0 / 3.0,
            frame_h: 16,
            frame_w: 16,
            frame_c: 1,
            vocab_size: 16,
            template_ms: 90.0,
            audio_noise_sigma: 0.05,
            video_noise_sigma: 0.1,
            template_seed: 7_777,
        }
    }
}

impl FeatureConfig {
    /// Acoustic feature dimension after stacking.
    pub fn da(&self) -> usize {
        self.n_mels * self.stack
    }

    pub fn template_samples(&self) -> usize {
        ((self.template_ms / 1000.0) * self.sample_rate_hz as f64).round() as usize
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    /// (kt, kh, kw): either spatial (1, k, k) or temporal (k, 1, 1).
    pub kernel: (usize, usize, usize),
    pub out_channels: usize,
    pub spatial_pool: bool,
    pub norm_groups: usize,
    pub spatial_stride: usize,
}

impl ConvLayerSpec {
    pub fn is_temporal(&self) -> bool {
        self.kernel.0 > 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub layers: Vec<ConvLayerSpec>,
    /// Expected (H, W, C) of input frames.
    pub input_hwc: (usize, usize, usize),
    /// Output visual feature dimension.
    pub dv: usize,
}

fn layer(kernel: (usize, usize, usize), out_channels: usize, pool: bool, groups: usize, stride: usize) -> ConvLayerSpec {
    ConvLayerSpec { kernel, out_channels, spatial_pool: pool, norm_groups: groups, spatial_stride: stride }
}

impl Default for FrontendConfig {
    fn default() -> Self {
        // Toy stack: spatial/temporal alternation, group-normed, reducing
        // 16x16 to 1x1 (stride-2 entry, one pool, then VALID convs).
        FrontendConfig {
            layers: vec![
                layer((1, 3, 3), 8, true, 1, 2),
                layer((3, 1, 1), 16, false, 4, 1),
                layer((1, 3, 3), 16, false, 1, 1),
                layer((3, 1, 1), 32, false, 4, 1),
                layer((1, 1, 1), 32, false, 1, 1),
                layer((3, 1, 1), 32, false, 4, 1),
            ],
            input_hwc: (16, 16, 1),
            dv: 32,
        }
    }
}

impl FrontendConfig {
    pub fn paper() -> Self {
        FrontendConfig {
            layers: vec![
                layer((1, 3, 3), 23, true, 1, 2),
                layer((3, 1, 1), 64, false, 32, 1),
                layer((1, 3, 3), 64, true, 1, 1),
                layer((3, 1, 1), 128, false, 32, 1),
                layer((1, 3, 3), 256, true, 1, 1),
                layer((3, 1, 1), 256, false, 32, 1),
                layer((1, 3, 3), 921, false, 1, 1),
                layer((3, 1, 1), 512, false, 32, 1),
                layer((1, 3, 3), 460, true, 1, 1),
                layer((1, 1, 1), 512, false, 32, 1),
            ],
            input_hwc: (128, 128, 3),
            dv: 512,
        }
    }

    /// Spatial (h, w) after each layer; errors if a kernel outgrows the
    /// remaining extent or the final extent is not exactly 1x1.
    pub fn validate(&self) -> Result<Vec<(usize, usize)>> {
        if self.layers.is_empty() {
            return Err(Error::Config("frontend has no layers".into()));
        }
        let (mut h, mut w, _) = self.input_hwc;
        let mut trace = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let (kt, kh, kw) = l.kernel;
            let spatial = kt == 1;
            let temporal = kh == 1 && kw == 1 && kt >= 1;
            if !spatial && !temporal {
                return Err(Error::Config(format!(
                    "frontend layer {i}: kernel {:?} is neither spatial (1,k,k) nor temporal (k,1,1)",
                    l.kernel
                )));
            }
            if l.norm_groups == 0 || l.out_channels % l.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "frontend layer {i}: {} groups do not divide {} channels",
                    l.norm_groups, l.out_channels
                )));
            }
            if spatial {
                if h < kh || w < kw {
                    return Err(Error::Config(format!(
                        "frontend layer {i}: spatial extent {h}x{w} smaller than kernel {kh}x{kw}"
                    )));
                }
                h = (h - kh) / l.spatial_stride + 1;
                w = (w - kw) / l.spatial_stride + 1;
            }
            if l.spatial_pool {
                h /= 2;
                w /= 2;
                if h == 0 || w == 0 {
                    return Err(Error::Config(format!("frontend layer {i}: pooling reduced extent to zero")));
                }
            }
            trace.push((h, w));
        }
        if h != 1 || w != 1 {
            return Err(Error::Config(format!(
                "frontend must reduce spatial extent to exactly 1x1, got {h}x{w}"
            )));
        }
        let last = self.layers.last().unwrap();
        if last.out_channels != self.dv {
            return Err(Error::Config(format!(
                "dv = {} but last layer emits {} channels",
                self.dv, last.out_channels
            )));
        }
        Ok(trace)
    }

    /// Cumulative temporal receptive-field radius.
    pub fn temporal_radius(&self) -> usize {
        self.layers.iter().map(|l| (l.kernel.0 - 1) / 2).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// Query dimension (kept equal to dv).
    pub dq: usize,
    /// Hidden channels of the 5-layer query ConvNet; the final layer emits dq.
    pub query_channels: Vec<usize>,
    pub query_kernel: usize,
    pub query_norm_groups: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            dq: 32,
            query_channels: vec![64, 64, 128, 128],
            query_kernel: 3,
            query_norm_groups: 8,
        }
    }
}

impl AttentionConfig {
    pub fn paper() -> Self {
        AttentionConfig { dq: 512, ..Default::default() }
    }

    /// Temporal receptive-field radius of the query network.
    pub fn query_radius(&self) -> usize {
        (self.query_channels.len() + 1) * ((self.query_kernel - 1) / 2)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    /// Attention context radius in timesteps, each side.
    pub context_radius: usize,
    pub ff_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { num_layers: 2, num_heads: 2, head_dim: 8, model_dim: 32, context_radius: 16, ff_dim: 64 }
    }
}

impl EncoderConfig {
    pub fn paper() -> Self {
        EncoderConfig { num_layers: 14, num_heads: 8, head_dim: 64, model_dim: 1024, context_radius: 100, ff_dim: 4096 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub lstm_layers: usize,
    pub lstm_units: usize,
    /// Includes the blank at index 0.
    pub vocab_size: usize,
    pub joint_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { lstm_layers: 1, lstm_units: 32, vocab_size: 17, joint_dim: 32 }
    }
}

impl DecoderConfig {
    pub fn paper() -> Self {
        DecoderConfig { lstm_layers: 2, lstm_units: 2048, vocab_size: 128, joint_dim: 1024 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dtype: DtypeChoice,
    pub stage: Stage,
    pub min_u: usize,
    pub max_u: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 1.0,
            lr: 2e-4,
            steps: 2_000,
            batch_size: 8,
            seed: 0,
            dtype: DtypeChoice::F32,
            stage: Stage::PretrainSingleTrack,
            min_u: 3,
            max_u: 6,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub items: usize,
    pub seed: u64,
    pub min_u: usize,
    pub max_u: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { items: 1_000, seed: 1_000, min_u: 3, max_u: 6 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub frontend: FrontendConfig,
    pub attention: AttentionConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn toy() -> Self {
        Self::default()
    }

    /// Published large-scale hyperparameters; shape checks only.
    pub fn paper() -> Self {
        let mut cfg = RunConfig::default();
        cfg.frontend = FrontendConfig::paper();
        cfg.attention = AttentionConfig::paper();
        cfg.encoder = EncoderConfig::paper();
        cfg.decoder = DecoderConfig::paper();
        cfg.features.frame_h = 128;
        cfg.features.frame_w = 128;
        cfg.features.frame_c = 3;
        cfg.features.vocab_size = 127;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        let f = &self.features;
        if f.sample_rate_hz != 16_000 {
            return Err(Error::Config(format!("sample_rate_hz must be 16000, got {}", f.sample_rate_hz)));
        }
        if f.window == 0 || f.hop == 0 || f.stack == 0 || f.n_mels == 0 {
            return Err(Error::Config("feature window/hop/stack/n_mels must be positive".into()));
        }
        if f.dft_size < f.window {
            return Err(Error::Config(format!("dft_size {} smaller than window {}", f.dft_size, f.window)));
        }
        if self.frontend.input_hwc != (f.frame_h, f.frame_w, f.frame_c) {
            return Err(Error::Config(format!(
                "frontend input {:?} does not match feature frames ({}, {}, {})",
                self.frontend.input_hwc, f.frame_h, f.frame_w, f.frame_c
            )));
        }
        if self.decoder.vocab_size != f.vocab_size + 1 {
            return Err(Error::Config(format!(
                "decoder.vocab_size must be features.vocab_size + 1 (blank); got {} vs {}",
                self.decoder.vocab_size, f.vocab_size
            )));
        }
        if self.decoder.vocab_size < 2 {
            return Err(Error::Config("vocab must contain blank plus at least one label".into()));
        }
        if self.attention.query_channels.is_empty() {
            return Err(Error::Config("query network needs at least one hidden layer".into()));
        }
        if self.attention.query_kernel % 2 == 0 {
            return Err(Error::Config("query_kernel must be odd (SAME padding)".into()));
        }
        let groups = self.attention.query_norm_groups;
        for (i, &c) in self.attention.query_channels.iter().enumerate() {
            if c % groups != 0 {
                return Err(Error::Config(format!(
                    "query layer {i}: {groups} groups do not divide {c} channels"
                )));
            }
        }
        let e = &self.encoder;
        if e.num_layers == 0 || e.num_heads == 0 || e.head_dim == 0 || e.model_dim == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if e.context_radius < 1 {
            return Err(Error::Config("context_radius must be >= 1".into()));
        }
        if self.decoder.lstm_layers == 0 || self.decoder.lstm_units == 0 {
            return Err(Error::Config("decoder dims must be positive".into()));
        }
        check_gamma(self.train.gamma)?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.train.min_u == 0 || self.train.min_u > self.train.max_u {
            return Err(Error::Config(format!(
                "target length range [{}, {}] invalid",
                self.train.min_u, self.train.max_u
            )));
        }
        if self.eval.min_u == 0 || self.eval.min_u > self.eval.max_u {
            return Err(Error::Config("eval target length range invalid".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::GammaRange(gamma));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_defaults_validate() {
        RunConfig::toy().validate().unwrap();
    }

    #[test]
    fn paper_preset_validates_and_traces_table_shapes() {
        let cfg = RunConfig::paper();
        cfg.validate().unwrap();
        let trace = cfg.frontend.validate().unwrap();
        // Spatial trail of the published stack on 128x128 input.
        assert_eq!(
            trace,
            vec![(31, 31), (31, 31), (14, 14), (14, 14), (6, 6), (6, 6), (4, 4), (4, 4), (1, 1), (1, 1)]
        );
        assert_eq!(cfg.frontend.temporal_radius(), 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"trainx": {}}"#).unwrap_err();
        assert!(err.to_string().contains("trainx"));
        let err = RunConfig::from_json(r#"{"train": {"gammma": 0.5}}"#).unwrap_err();
        assert!(err.to_string().contains("gammma"));
    }

    #[test]
    fn gamma_range_enforced() {
        let mut cfg = RunConfig::toy();
        cfg.train.gamma = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::GammaRange(_))));
        assert!(check_gamma(-0.01).is_err());
        assert!(check_gamma(0.0).is_ok());
        assert!(check_gamma(1.0).is_ok());
    }

    #[test]
    fn json_round_trip_preserves_defaults() {
        let cfg = RunConfig::toy();
        let text = cfg.to_json_pretty();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(text, back.to_json_pretty());
    }

    #[test]
    fn toy_frontend_reduces_to_one_by_one() {
        let trace = FrontendConfig::default().validate().unwrap();
        assert_eq!(trace.last(), Some(&(1, 1)));
        assert_eq!(FrontendConfig::default().temporal_radius(), 3);
    }
}
