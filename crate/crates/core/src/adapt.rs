//! One-shot concept-token adaptation from a single augmented example.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::assembly::PromptTokens;
use crate::codec::{Frame, PatchCodec, PixelVideo};
use crate::denoiser::{AttentionPath, DenoiserParams, ParamGroup, CONCEPT};
use crate::diffusion::{self, Adam, Clip, LossLog, NoiseDraw, NoiseSchedule, Phase, SampleConfig, TrainPair};
use crate::error::{Error, Result};
use crate::icmask::FlowTable;
use crate::parallel::Exec;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const MAX_CROP: f64 = 0.12;
pub const MAX_SHEAR_DEG: f64 = 8.0;
pub const MAX_SHIFT_PX: f64 = 2.0;
pub const MAX_ROTATE_DEG: f64 = 8.0;
pub const MAX_SHARPEN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    /// Crop a window `1 - margin` of the frame at `offset` (fractions) and resize back.
    CropResize { margin: f64, offset: (f64, f64) },
    /// Horizontal shear by `deg` about the centre.
    Shear { deg: f64 },
    Translate { dx: f64, dy: f64 },
    Rotate { deg: f64 },
    /// Unsharp mask over a 3x3 box blur.
    Sharpen { amount: f64 },
}

impl Transform {
    fn sample<R: rand::Rng + ?Sized>(kind: usize, r: &mut R) -> Self {
        match kind {
            0 => {
                let margin = r.random_range(0.0..=MAX_CROP);
                Transform::CropResize {
                    margin,
                    offset: (r.random_range(0.0..=margin), r.random_range(0.0..=margin)),
                }
            }
            1 => Transform::Shear {
                deg: r.random_range(-MAX_SHEAR_DEG..=MAX_SHEAR_DEG),
            },
            2 => Transform::Translate {
                dx: r.random_range(-MAX_SHIFT_PX..=MAX_SHIFT_PX),
                dy: r.random_range(-MAX_SHIFT_PX..=MAX_SHIFT_PX),
            },
            3 => Transform::Rotate {
                deg: r.random_range(-MAX_ROTATE_DEG..=MAX_ROTATE_DEG),
            },
            _ => Transform::Sharpen {
                amount: r.random_range(0.0..=MAX_SHARPEN),
            },
        }
    }

    /// Output pixel `(x, y)` reads source coordinates returned here.
    fn source(&self, x: f64, y: f64, w: f64, h: f64) -> (f64, f64) {
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        match *self {
            Transform::CropResize { margin, offset } => {
                let s = 1.0 - margin;
                (offset.0 * w + x * s, offset.1 * h + y * s)
            }
            Transform::Shear { deg } => (x - deg.to_radians().tan() * (y - cy), y),
            Transform::Translate { dx, dy } => (x - dx, y - dy),
            Transform::Rotate { deg } => {
                let (s, c) = (-deg.to_radians()).sin_cos();
                let (u, v) = (x - cx, y - cy);
                (cx + c * u - s * v, cy + s * u + c * v)
            }
            Transform::Sharpen { .. } => (x, y),
        }
    }

    pub fn apply(&self, v: &PixelVideo) -> PixelVideo {
        let mut out = v.clone();
        let (w, h) = (v.width, v.height);
        if let Transform::Sharpen { amount } = *self {
            for f in 0..v.frames {
                for y in 0..h {
                    for x in 0..w {
                        for c in 0..v.channels {
                            let mut blur = 0.0;
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                                    blur += v.get(f, sy, sx, c);
                                }
                            }
                            let p = v.get(f, y, x, c);
                            out.data[v.index(f, y, x, c)] = (p + amount * (p - blur / 9.0)).clamp(-1.0, 1.0);
                        }
                    }
                }
            }
            return out;
        }
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x as f64, y as f64, w as f64, h as f64);
                let sx = (sx.round() as i64).clamp(0, w as i64 - 1) as usize;
                let sy = (sy.round() as i64).clamp(0, h as i64 - 1) as usize;
                for f in 0..v.frames {
                    for c in 0..v.channels {
                        out.data[v.index(f, y, x, c)] = v.get(f, sy, sx, c);
                    }
                }
            }
        }
        out
    }
}

/// Mirror every frame left to right.
pub fn flip(v: &PixelVideo) -> PixelVideo {
    let mut out = v.clone();
    for f in 0..v.frames {
        for y in 0..v.height {
            for x in 0..v.width {
                for c in 0..v.channels {
                    out.data[v.index(f, y, x, c)] = v.get(f, y, v.width - 1 - x, c);
                }
            }
        }
    }
    out
}

/// Three distinct transforms in random order, then an optional flip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub transforms: [Transform; 3],
    pub flip: bool,
}

impl Augmentation {
    pub fn sample(seed: u64) -> Self {
        let mut r = rng::derived(seed, 0xA06);
        let mut kinds = [0usize, 1, 2, 3, 4];
        kinds.shuffle(&mut r);
        let transforms = [
            Transform::sample(kinds[0], &mut r),
            Transform::sample(kinds[1], &mut r),
            Transform::sample(kinds[2], &mut r),
        ];
        Augmentation {
            transforms,
            flip: r.random_bool(0.5),
        }
    }

    pub fn apply(&self, v: &PixelVideo) -> PixelVideo {
        let mut out = self.transforms.iter().fold(v.clone(), |acc, t| t.apply(&acc));
        if self.flip {
            out = flip(&out);
        }
        out
    }
}

/// Same transform on every frame; deterministic in `seed`.
pub fn augment(video: &PixelVideo, seed: u64) -> PixelVideo {
    Augmentation::sample(seed).apply(video)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub steps: usize,
    pub concept_tokens: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub path: AttentionPath,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            steps: 300,
            concept_tokens: 8,
            lr: 1e-4,
            batch_size: 8,
            seed: 0,
            path: AttentionPath::Decomposed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome<T> {
    /// `concept_tokens x model_dim`.
    pub tokens: Tensor<T>,
    pub log: LossLog,
    pub backbone_checksum: String,
}

/// Two independent augmentations of the example per batch slot.
fn augmented_pair(prompt: &PromptTokens, video: &PixelVideo, seed: u64, codec: &PatchCodec) -> Result<TrainPair> {
    let a = augment(video, rng::derive(seed, 1));
    let b = augment(video, rng::derive(seed, 2));
    Ok(TrainPair {
        reference: Clip::new(prompt.clone(), &a, codec)?,
        target: Clip::new(prompt.clone(), &b, codec)?,
    })
}

/// Learn concept tokens on one example with every network weight frozen.
pub fn adapt<T: Scalar>(
    params: &DenoiserParams<T>,
    prompt: &PromptTokens,
    video: &PixelVideo,
    config: &AdaptConfig,
    exec: Exec,
    mut on_step: impl FnMut(usize, f64),
) -> Result<AdaptOutcome<T>> {
    if config.concept_tokens == 0 || config.batch_size == 0 || config.lr.is_nan() || config.lr <= 0.0 {
        return Err(Error::Config("adaptation needs tokens, batch size and learning rate > 0".into()));
    }
    let codec = PatchCodec::new(video.channels);
    let schedule = NoiseSchedule::default();
    let table = FlowTable::canonical();
    let mut work = params.clone();
    work.set(CONCEPT, Tensor::zeros(vec![config.concept_tokens, params.config.model_dim]))?;
    let frozen = work.backbone_checksum();
    let mut adam = Adam::new(config.lr, 0.9, 0.999);
    let mut log = LossLog::default();
    for step in 0..config.steps {
        let base = rng::derive(config.seed, step as u64);
        let pairs: Vec<TrainPair> = (0..config.batch_size)
            .map(|i| augmented_pair(prompt, video, rng::derive(base, i as u64), &codec))
            .collect::<Result<_>>()?;
        let views: Vec<_> = pairs.iter().map(|p| p.view(false)).collect();
        let draws: Vec<NoiseDraw> = (0..config.batch_size)
            .map(|i| NoiseDraw {
                seed: rng::derive(base ^ 0xD4A3, i as u64),
            })
            .collect();
        let r = diffusion::loss_step(&work, &schedule, &views, &draws, Phase::Concept, &table, config.path, exec)?;
        adam.apply(&mut work, &[ParamGroup::Concept], &r.grads);
        if work.backbone_checksum() != frozen {
            return Err(Error::Freeze(format!("network weights changed at adaptation step {step}")));
        }
        log.losses.push(r.loss);
        on_step(step, r.loss);
    }
    Ok(AdaptOutcome {
        tokens: work.get(CONCEPT).expect("concept tensor").clone(),
        log,
        backbone_checksum: frozen,
    })
}

/// Parameters with `tokens` installed as the concept tokens.
pub fn with_concept<T: Scalar>(params: &DenoiserParams<T>, tokens: &Tensor<T>) -> Result<DenoiserParams<T>> {
    if tokens.shape().len() != 2 || tokens.shape()[1] != params.config.model_dim || tokens.shape()[0] == 0 {
        return Err(Error::shape("concept tokens", &[tokens.shape(), &[0, params.config.model_dim]]));
    }
    let mut p = params.clone();
    p.set(CONCEPT, tokens.clone())?;
    Ok(p)
}

/// Sample with concept tokens appended to the sequence.
pub fn infer_with_ce<T: Scalar>(
    params: &DenoiserParams<T>,
    reference: &Clip,
    prompt: &PromptTokens,
    first: &Frame,
    frames: usize,
    tokens: &Tensor<T>,
    config: &SampleConfig,
) -> Result<PixelVideo> {
    let p = with_concept(params, tokens)?;
    let cfg = SampleConfig {
        use_concept: true,
        ..*config
    };
    diffusion::sample(&p, Some(reference), prompt, first, frames, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_pair, Family};
    use crate::denoiser::DenoiserConfig;

    fn clip() -> PixelVideo {
        make_pair(Family::Sparkle, 5).target.video
    }

    #[test]
    fn augment_is_deterministic_and_framewise() {
        let v = clip();
        assert_eq!(augment(&v, 11), augment(&v, 11));
        let still = PixelVideo::new(
            4,
            16,
            16,
            3,
            (0..4).flat_map(|_| v.data[..v.frame_len()].to_vec()).collect(),
        )
        .unwrap();
        let a = augment(&still, 3);
        for f in 1..4 {
            assert_eq!(a.frame(f), a.frame(0));
        }
    }

    #[test]
    fn exactly_three_distinct_transforms() {
        for s in 0..200 {
            let a = Augmentation::sample(s);
            let kinds: std::collections::BTreeSet<_> =
                a.transforms.iter().map(std::mem::discriminant).map(|d| format!("{d:?}")).collect();
            assert_eq!(kinds.len(), 3);
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let v = clip();
        let a = Augmentation {
            flip: true,
            ..Augmentation::sample(1)
        };
        let once = a.apply(&v);
        assert_eq!(flip(&once), a.transforms.iter().fold(v.clone(), |acc, t| t.apply(&acc)));
        assert_eq!(flip(&flip(&v)), v);
    }

    #[test]
    fn zero_steps_gives_zero_tokens() {
        let p = DenoiserParams::<f64>::init(DenoiserConfig { blocks: 1, ..Default::default() }, 0).unwrap();
        let pair = make_pair(Family::Sparkle, 1);
        let cfg = AdaptConfig { steps: 0, ..Default::default() };
        let out = adapt(&p, &pair.target.prompt, &pair.target.video, &cfg, Exec::Sequential, |_, _| {}).unwrap();
        assert_eq!(out.tokens.shape(), &[8, 64]);
        assert!(out.tokens.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adaptation_moves_only_concept_tokens() {
        let p = DenoiserParams::<f64>::random(DenoiserConfig { blocks: 1, ..Default::default() }, 2, 0.1).unwrap();
        let pair = make_pair(Family::Sparkle, 2);
        let cfg = AdaptConfig {
            steps: 2,
            batch_size: 2,
            lr: 1e-2,
            ..Default::default()
        };
        let before = p.backbone_checksum();
        let out = adapt(&p, &pair.target.prompt, &pair.target.video, &cfg, Exec::Sequential, |_, _| {}).unwrap();
        assert_eq!(out.backbone_checksum, before);
        assert!(out.tokens.data().iter().any(|&x| x != 0.0));
        let q = with_concept(&p, &out.tokens).unwrap();
        assert_eq!(q.backbone_checksum(), before);
        assert!(with_concept(&p, &Tensor::zeros(vec![2, 5])).is_err());
    }
}
