//! Patch codec standing in for a learned video autoencoder.
//!
//! A video is cut into non-overlapping `2 x 2 x 2` (time, height, width)
//! patches; each flattened patch is multiplied by a fixed orthogonal matrix.
//! The map is linear, norm preserving and exactly invertible.

use std::sync::OnceLock;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const PATCH_T: usize = 2;
pub const PATCH_H: usize = 2;
pub const PATCH_W: usize = 2;

/// Seed of the orthogonal projection. Changing it changes every latent.
pub const CODEC_SEED: u64 = 0x5EED_C0DE_2024;

/// Pixel video, row-major `[frame][y][x][channel]`, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl PixelVideo {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::Extent(format!(
                "video extents must be positive, got {frames}x{height}x{width}x{channels}"
            )));
        }
        if data.len() != frames * height * width * channels {
            return Err(Error::Extent(format!(
                "video buffer holds {} values, extents {frames}x{height}x{width}x{channels} need {}",
                data.len(),
                frames * height * width * channels
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Precondition(format!("video holds non-finite value {bad}")));
        }
        Ok(PixelVideo { frames, height, width, channels, data })
    }

    pub fn filled(frames: usize, height: usize, width: usize, channels: usize, value: f64) -> Self {
        PixelVideo {
            frames,
            height,
            width,
            channels,
            data: vec![value; frames * height * width * channels],
        }
    }

    pub fn extents(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    #[inline]
    pub fn index(&self, f: usize, y: usize, x: usize, c: usize) -> usize {
        ((f * self.height + y) * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, f: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(f, y, x, c)]
    }

    pub fn pixel(&self, f: usize, y: usize, x: usize) -> &[f64] {
        let i = self.index(f, y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn frame(&self, f: usize) -> Frame {
        let n = self.frame_len();
        Frame {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data[f * n..(f + 1) * n].to_vec(),
        }
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A single frame, `[y][x][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Latent token grid, `[t][y][x]` tokens of `dim` values each.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl LatentVideo {
    pub fn zeros(frames: usize, height: usize, width: usize, dim: usize) -> Self {
        LatentVideo {
            frames,
            height,
            width,
            dim,
            data: vec![0.0; frames * height * width * dim],
        }
    }

    pub fn grid(&self) -> [usize; 3] {
        [self.frames, self.height, self.width]
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.tokens(), self.dim],
            self.data.iter().map(|&v| T::of(v)).collect(),
        )
        .expect("latent buffer matches its grid")
    }

    pub fn from_tensor<T: Scalar>(grid: [usize; 3], t: &Tensor<T>) -> Result<Self> {
        let (rows, dim) = t.dims2("latent")?;
        if rows != grid.iter().product::<usize>() {
            return Err(Error::Extent(format!(
                "tensor has {rows} rows, latent grid {grid:?} needs {}",
                grid.iter().product::<usize>()
            )));
        }
        Ok(LatentVideo {
            frames: grid[0],
            height: grid[1],
            width: grid[2],
            dim,
            data: t.to_f64_vec(),
        })
    }

    /// Stack two grids along the channel dimension (token by token).
    pub fn concat_channels(&self, other: &LatentVideo) -> Result<LatentVideo> {
        if self.grid() != other.grid() {
            return Err(Error::Extent(format!(
                "cannot channel-concat grids {:?} and {:?}",
                self.grid(),
                other.grid()
            )));
        }
        let dim = self.dim + other.dim;
        let mut data = Vec::with_capacity(self.tokens() * dim);
        for k in 0..self.tokens() {
            data.extend_from_slice(&self.data[k * self.dim..(k + 1) * self.dim]);
            data.extend_from_slice(&other.data[k * other.dim..(k + 1) * other.dim]);
        }
        Ok(LatentVideo {
            frames: self.frames,
            height: self.height,
            width: self.width,
            dim,
            data,
        })
    }
}

/// Orthogonal patch projection.
#[derive(Clone, Debug)]
pub struct PatchCodec {
    channels: usize,
    /// Row-major `dim x dim` orthogonal matrix.
    q: Vec<f64>,
}

impl PatchCodec {
    pub fn new(channels: usize) -> Self {
        let dim = PATCH_T * PATCH_H * PATCH_W * channels;
        PatchCodec {
            channels,
            q: orthogonal(dim, CODEC_SEED),
        }
    }

    /// Shared three-channel codec.
    pub fn rgb() -> &'static PatchCodec {
        static CODEC: OnceLock<PatchCodec> = OnceLock::new();
        CODEC.get_or_init(|| PatchCodec::new(3))
    }

    pub fn dim(&self) -> usize {
        PATCH_T * PATCH_H * PATCH_W * self.channels
    }

    pub fn matrix(&self) -> &[f64] {
        &self.q
    }

    pub fn latent_grid(&self, frames: usize, height: usize, width: usize) -> Result<[usize; 3]> {
        for (axis, extent, patch) in [
            ("frames", frames, PATCH_T),
            ("height", height, PATCH_H),
            ("width", width, PATCH_W),
        ] {
            if extent == 0 || extent % patch != 0 {
                return Err(Error::Extent(format!(
                    "{axis} extent {extent} is not divisible by patch size {patch}"
                )));
            }
        }
        Ok([frames / PATCH_T, height / PATCH_H, width / PATCH_W])
    }

    pub fn encode(&self, v: &PixelVideo) -> Result<LatentVideo> {
        if v.channels != self.channels {
            return Err(Error::Extent(format!(
                "channels extent {} does not match codec channels {}",
                v.channels, self.channels
            )));
        }
        let [gt, gh, gw] = self.latent_grid(v.frames, v.height, v.width)?;
        let d = self.dim();
        let mut out = LatentVideo::zeros(gt, gh, gw, d);
        let mut patch = vec![0.0; d];
        for t in 0..gt {
            for y in 0..gh {
                for x in 0..gw {
                    self.gather(v, t, y, x, &mut patch);
                    let k = (t * gh + y) * gw + x;
                    let z = &mut out.data[k * d..(k + 1) * d];
                    for (i, zi) in z.iter_mut().enumerate() {
                        let row = &self.q[i * d..(i + 1) * d];
                        *zi = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, z: &LatentVideo) -> Result<PixelVideo> {
        let d = self.dim();
        if z.dim != d {
            return Err(Error::Extent(format!(
                "latent dim {} does not match codec dim {d}",
                z.dim
            )));
        }
        let mut v = PixelVideo::filled(
            z.frames * PATCH_T,
            z.height * PATCH_H,
            z.width * PATCH_W,
            self.channels,
            0.0,
        );
        let mut patch = vec![0.0; d];
        for t in 0..z.frames {
            for y in 0..z.height {
                for x in 0..z.width {
                    let k = (t * z.height + y) * z.width + x;
                    let zk = &z.data[k * d..(k + 1) * d];
                    for (j, pj) in patch.iter_mut().enumerate() {
                        *pj = (0..d).map(|i| self.q[i * d + j] * zk[i]).sum();
                    }
                    self.scatter(&mut v, t, y, x, &patch);
                }
            }
        }
        Ok(v)
    }

    fn patch_offsets(&self, v: &PixelVideo, t: usize, y: usize, x: usize) -> impl Iterator<Item = usize> + '_ {
        let (h, w, c) = (v.height, v.width, v.channels);
        (0..PATCH_T).flat_map(move |dt| {
            (0..PATCH_H).flat_map(move |dy| {
                (0..PATCH_W).flat_map(move |dx| {
                    let base = (((t * PATCH_T + dt) * h + y * PATCH_H + dy) * w + x * PATCH_W + dx) * c;
                    base..base + c
                })
            })
        })
    }

    fn gather(&self, v: &PixelVideo, t: usize, y: usize, x: usize, patch: &mut [f64]) {
        for (p, idx) in patch.iter_mut().zip(self.patch_offsets(v, t, y, x)) {
            *p = v.data[idx];
        }
    }

    fn scatter(&self, v: &mut PixelVideo, t: usize, y: usize, x: usize, patch: &[f64]) {
        let idxs: Vec<usize> = self.patch_offsets(v, t, y, x).collect();
        for (p, idx) in patch.iter().zip(idxs) {
            v.data[idx] = *p;
        }
    }

    /// First frame followed by `frames - 1` frames of `-1`, encoded.
    pub fn first_frame_condition(&self, first: &Frame, frames: usize) -> Result<LatentVideo> {
        let video = first_frame_video(first, frames)?;
        self.encode(&video)
    }
}

/// The pixel video encoded by [`PatchCodec::first_frame_condition`].
pub fn first_frame_video(first: &Frame, frames: usize) -> Result<PixelVideo> {
    if frames == 0 {
        return Err(Error::Extent("conditioning needs at least one frame".into()));
    }
    if first.data.len() != first.height * first.width * first.channels {
        return Err(Error::Extent("frame buffer does not match its extents".into()));
    }
    let mut data = Vec::with_capacity(first.data.len() * frames);
    data.extend_from_slice(&first.data);
    data.resize(first.data.len() * frames, -1.0);
    PixelVideo::new(frames, first.height, first.width, first.channels, data)
}

/// Reference video zero-padded in height and width to target extents.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedReference {
    pub video: PixelVideo,
    /// `(height, width)` before padding.
    pub original: (usize, usize),
    /// `(top, left)` offset of the original content.
    pub offset: (usize, usize),
}

pub fn pad_reference(reference: &PixelVideo, height: usize, width: usize) -> Result<PaddedReference> {
    if reference.height > height || reference.width > width {
        return Err(Error::Extent(format!(
            "reference {}x{} exceeds target {height}x{width}",
            reference.height, reference.width
        )));
    }
    let top = (height - reference.height) / 2;
    let left = (width - reference.width) / 2;
    let c = reference.channels;
    let mut out = PixelVideo::filled(reference.frames, height, width, c, 0.0);
    for f in 0..reference.frames {
        for y in 0..reference.height {
            let src = reference.index(f, y, 0, 0);
            let dst = out.index(f, y + top, left, 0);
            out.data[dst..dst + reference.width * c]
                .copy_from_slice(&reference.data[src..src + reference.width * c]);
        }
    }
    Ok(PaddedReference {
        video: out,
        original: (reference.height, reference.width),
        offset: (top, left),
    })
}

/// Modified Gram-Schmidt on a seeded Gaussian matrix (rows orthonormal).
fn orthogonal(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::rng(seed);
    let mut m: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut r)).collect();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum();
            for k in 0..n {
                m[i * n + k] -= dot * m[j * n + k];
            }
        }
        let norm = (0..n).map(|k| m[i * n + k].powi(2)).sum::<f64>().sqrt();
        for k in 0..n {
            m[i * n + k] /= norm;
        }
    }
    m
}
