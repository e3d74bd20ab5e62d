//! Training-data preparation for the projection fine-tuning variant:
//! BERT-style token masking and the linear visual-to-text projection.
//!
//! Masking consumes one SplitMix64 stream in position order: a selection
//! draw for every position, then for selected positions a branch draw, then
//! a token draw if the random-replacement branch fired.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::context::VideoContext;
use crate::error::{Error, Result};
use crate::retrieval::FrameFeatures;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub mask_ratio: f64,
    /// Probabilities of (mask token, random token, keep original).
    pub replace_probs: (f64, f64, f64),
    pub seed: u64,
    pub vocab_size: u32,
    pub mask_token_id: u32,
}

impl MaskingConfig {
    pub fn new(vocab_size: u32, mask_token_id: u32, seed: u64) -> Self {
        Self {
            mask_ratio: 0.5,
            replace_probs: (0.8, 0.1, 0.1),
            seed,
            vocab_size,
            mask_token_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::arg(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        let (a, b, c) = self.replace_probs;
        if [a, b, c].iter().any(|p| !(0.0..=1.0).contains(p)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!("replace_probs {:?} must be probabilities summing to 1", self.replace_probs)));
        }
        if self.vocab_size == 0 {
            return Err(Error::arg("vocab_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskBranch {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub input_tokens: Vec<u32>,
    pub label_positions: Vec<usize>,
    /// Original token ids at `label_positions`.
    pub labels: Vec<u32>,
    /// Which replacement fired at each label position.
    pub branches: Vec<MaskBranch>,
}

impl MaskedSequence {
    /// Number of labelled positions.
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }
}

pub fn mask_tokens(tokens: &[u32], cfg: &MaskingConfig) -> Result<MaskedSequence> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::arg("cannot mask an empty token sequence"));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::arg(format!("token id {t} is outside vocab_size {}", cfg.vocab_size)));
    }
    let (p_mask, p_random, _) = cfg.replace_probs;
    let mut rng = SplitMix64::new(cfg.seed);
    let mut out = MaskedSequence {
        input_tokens: tokens.to_vec(),
        label_positions: Vec::new(),
        labels: Vec::new(),
        branches: Vec::new(),
    };
    for (pos, &tok) in tokens.iter().enumerate() {
        if rng.next_f64() >= cfg.mask_ratio {
            continue;
        }
        let u = rng.next_f64();
        let branch = if u < p_mask {
            out.input_tokens[pos] = cfg.mask_token_id;
            MaskBranch::Mask
        } else if u < p_mask + p_random {
            out.input_tokens[pos] = rng.next_below(u64::from(cfg.vocab_size)) as u32;
            MaskBranch::Random
        } else {
            MaskBranch::Keep
        };
        out.label_positions.push(pos);
        out.labels.push(tok);
        out.branches.push(branch);
    }
    Ok(out)
}

/// Row-major `rows x cols` projection from vision to language space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl ProjectionMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::arg(format!(
                "projection has {} values, expected {rows} x {cols}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("projection contains non-finite values"));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn identity(n: usize) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Self { rows: n, cols: n, values }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Projects every frame: row `t` of the result is `z_t W`, accumulated in
/// `f64` and stored as `f32`. Returned row-major, `L x cols`.
pub fn apply_projection(frames: &FrameFeatures, w: &ProjectionMatrix) -> Result<Vec<f32>> {
    if frames.dim() != w.rows {
        return Err(Error::DimMismatch {
            expected: w.rows,
            actual: frames.dim(),
        });
    }
    let mut out = Vec::with_capacity(frames.num_frames() * w.cols);
    let mut acc = vec![0.0f64; w.cols];
    for z in frames.matrix().rows() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (&zi, wrow) in z.iter().zip(w.values.chunks_exact(w.cols)) {
            let zi = f64::from(zi);
            for (a, &wij) in acc.iter_mut().zip(wrow) {
                *a += zi * f64::from(wij);
            }
        }
        out.extend(acc.iter().map(|&a| a as f32));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub video_id: String,
    pub num_frames: usize,
    pub lm_dim: usize,
    /// Video-conditioned prompts, `num_frames x lm_dim` row-major.
    pub video_prompts: Vec<f32>,
    pub context: VideoContext,
    pub caption_tokens: MaskedSequence,
}

pub fn assemble_training_example(
    frames: &FrameFeatures,
    w: &ProjectionMatrix,
    context: VideoContext,
    caption_tokens: &[u32],
    cfg: &MaskingConfig,
) -> Result<TrainingExample> {
    let video_prompts = apply_projection(frames, w)?;
    let caption_tokens = mask_tokens(caption_tokens, cfg)?;
    Ok(TrainingExample {
        video_id: frames.video_id.clone(),
        num_frames: frames.num_frames(),
        lm_dim: w.cols,
        video_prompts,
        context,
        caption_tokens,
    })
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    video_id: String,
    num_frames: usize,
    lm_dim: usize,
    /// Base64 of little-endian f32 values.
    video_prompts: String,
    context: VideoContext,
    caption_tokens: MaskedSequence,
}

fn encode_f32s(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    BASE64.encode(bytes)
}

fn decode_f32s(text: &str) -> Result<Vec<f32>> {
    let bytes = BASE64
        .decode(text)
        .map_err(|e| Error::format("video_prompts", e.to_string()))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format("video_prompts", "byte length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl TrainingExample {
    /// One JSON line (no trailing newline).
    pub fn to_json_line(&self) -> Result<String> {
        let record = ExampleRecord {
            video_id: self.video_id.clone(),
            num_frames: self.num_frames,
            lm_dim: self.lm_dim,
            video_prompts: encode_f32s(&self.video_prompts),
            context: self.context.clone(),
            caption_tokens: self.caption_tokens.clone(),
        };
        Ok(serde_json::to_string(&record)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let r: ExampleRecord = serde_json::from_str(line)?;
        let video_prompts = decode_f32s(&r.video_prompts)?;
        if video_prompts.len() != r.num_frames * r.lm_dim {
            return Err(Error::SizeMismatch {
                expected: (r.num_frames * r.lm_dim * 4) as u64,
                actual: (video_prompts.len() * 4) as u64,
            });
        }
        Ok(Self {
            video_id: r.video_id,
            num_frames: r.num_frames,
            lm_dim: r.lm_dim,
            video_prompts,
            context: r.context,
            caption_tokens: r.caption_tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(ratio: f64, probs: (f64, f64, f64)) -> MaskingConfig {
        MaskingConfig {
            mask_ratio: ratio,
            replace_probs: probs,
            ..MaskingConfig::new(1000, 999, 42)
        }
    }

    #[test]
    fn zero_ratio_is_identity() {
        let toks: Vec<u32> = (0..50).collect();
        let m = mask_tokens(&toks, &cfg(0.0, (0.8, 0.1, 0.1))).unwrap();
        assert_eq!(m.input_tokens, toks);
        assert_eq!(m.num_labels(), 0);
    }

    #[test]
    fn saturated_masking() {
        let toks: Vec<u32> = (0..50).collect();
        let m = mask_tokens(&toks, &cfg(1.0, (1.0, 0.0, 0.0))).unwrap();
        assert_eq!(m.label_positions, (0..50).collect::<Vec<_>>());
        assert_eq!(m.labels, toks);
        assert!(m.input_tokens.iter().all(|&t| t == 999));
    }

    #[test]
    fn masking_errors() {
        let c = MaskingConfig::new(10, 9, 0);
        assert!(mask_tokens(&[], &c).is_err());
        assert!(mask_tokens(&[3, 10], &c).is_err());
        assert!(mask_tokens(&[1], &cfg(0.5, (0.5, 0.1, 0.1))).is_err());
        assert!(mask_tokens(&[1], &cfg(1.5, (0.8, 0.1, 0.1))).is_err());
    }

    #[test]
    fn masking_follows_the_stream_order() {
        // Replays the documented draw order with an independent loop.
        let toks: Vec<u32> = (0..200).map(|i| (i * 7) % 1000).collect();
        let c = MaskingConfig::new(1000, 999, 77);
        let m = mask_tokens(&toks, &c).unwrap();
        let mut rng = SplitMix64::new(77);
        let unit = |x: u64| (x >> 11) as f64 / 9_007_199_254_740_992.0;
        let mut expected = toks.clone();
        let mut positions = Vec::new();
        for (i, _) in toks.iter().enumerate() {
            if unit(rng.next_u64()) < 0.5 {
                positions.push(i);
                let u = unit(rng.next_u64());
                if u < 0.8 {
                    expected[i] = 999;
                } else if u < 0.9 {
                    expected[i] = ((u128::from(rng.next_u64()) * 1000) >> 64) as u32;
                }
            }
        }
        assert_eq!(m.input_tokens, expected);
        assert_eq!(m.label_positions, positions);
    }

    #[test]
    fn projection_identity_and_zero() {
        let f = FrameFeatures::from_rows("v", &[vec![0.5, -1.0, 2.0], vec![3.0, 0.25, 0.0]]).unwrap();
        let id = apply_projection(&f, &ProjectionMatrix::identity(3)).unwrap();
        assert_eq!(id, f.matrix().as_slice());
        let z = apply_projection(&f, &ProjectionMatrix::zeros(3, 4)).unwrap();
        assert_eq!(z, vec![0.0; 8]);
        assert!(apply_projection(&f, &ProjectionMatrix::zeros(4, 4)).is_err());
    }

    #[test]
    fn example_json_roundtrip() {
        let f = FrameFeatures::from_rows("vid", &[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let w = ProjectionMatrix::new(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let ex = assemble_training_example(&f, &w, VideoContext::empty(2), &[5, 6, 7, 8], &MaskingConfig::new(10, 9, 3))
            .unwrap();
        let line = ex.to_json_line().unwrap();
        assert_eq!(TrainingExample::from_json_line(&line).unwrap(), ex);
    }
}
