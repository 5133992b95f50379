//! Procedural effect videos and the on-disk dataset container.
//!
//! A scene is one flat-coloured shape on a flat background. An effect
//! animates it over the clip with progress `p = f / (F - 1)`. Two clips
//! with the same [`EffectSpec`] (family, parameter and pattern seed) form
//! a training pair.
//!
//! Container layout: `manifest.toml` plus `videos.bin`, which holds, for
//! each pair in manifest order, the reference then the target video as
//! little-endian `f64` in `[frame][y][x][channel]` order.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::assembly::PromptTokens;
use crate::codec::{PatchCodec, PixelVideo};
use crate::diffusion::{Clip, TrainPair};
use crate::error::{Error, Result};
use crate::manifest;
use crate::parallel::Exec;
use crate::rng;

pub const FRAMES: usize = 8;
pub const HEIGHT: usize = 16;
pub const WIDTH: usize = 16;
pub const CHANNELS: usize = 3;

pub const GENERATOR: &str = "refvfx-synth";
pub const GENERATOR_VERSION: u32 = 1;
pub const FORMAT_VERSION: u32 = 1;

/// Scene colours in `[-1, 1]` RGB. No white and no pure blue, so sparkle
/// and freeze stay distinguishable from scene content.
pub const PALETTE: [[f64; 3]; 6] = [
    [0.8, -0.8, -0.8],   // red
    [-0.8, 0.5, -0.8],   // green
    [0.9, 0.8, -0.8],    // yellow
    [0.8, -0.8, 0.8],    // magenta
    [0.9, 0.0, -0.9],    // orange
    [-0.5, -0.5, -0.5],  // dark grey
];
pub const COLOR_NAMES: [&str; 6] = ["red", "green", "yellow", "magenta", "orange", "grey"];

/// Target colour of the freeze blend.
pub const ICE: [f64; 3] = [0.1, 0.6, 1.0];
pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Dissolve,
    Explode,
    Melt,
    Freeze,
    Sparkle,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Dissolve,
        Family::Explode,
        Family::Melt,
        Family::Freeze,
        Family::Sparkle,
    ];
    pub const IN_DOMAIN: [Family; 4] = [Family::Dissolve, Family::Explode, Family::Melt, Family::Freeze];

    pub fn index(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Dissolve => "dissolve",
            Family::Explode => "explode",
            Family::Melt => "melt",
            Family::Freeze => "freeze",
            Family::Sparkle => "sparkle",
        }
    }

    /// What the scalar parameter means.
    pub fn param_name(self) -> &'static str {
        match self {
            Family::Dissolve => "rate",
            Family::Explode => "radius",
            Family::Melt => "drop",
            Family::Freeze => "hue_shift",
            Family::Sparkle => "density",
        }
    }

    pub fn param_range(self) -> (f64, f64) {
        match self {
            Family::Dissolve => (0.4, 1.0),
            Family::Explode => (2.0, 4.0),
            Family::Melt => (2.0, 4.0),
            Family::Freeze => (0.4, 0.9),
            Family::Sparkle => (0.1, 0.3),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown effect family `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub family: Family,
    pub param: f64,
    /// Seeds the per-pixel pattern of dissolve and sparkle.
    pub seed: u64,
}

impl EffectSpec {
    pub fn new(family: Family, param: f64, seed: u64) -> Result<Self> {
        let (lo, hi) = family.param_range();
        if !(lo..=hi).contains(&param) {
            return Err(Error::OutOfRange(format!(
                "{} {} = {param} outside [{lo}, {hi}]",
                family,
                family.param_name()
            )));
        }
        Ok(EffectSpec { family, param, seed })
    }

    pub fn sample<R: rand::Rng + ?Sized>(family: Family, r: &mut R) -> Self {
        let (lo, hi) = family.param_range();
        EffectSpec {
            family,
            param: r.random_range(lo..=hi),
            // kept below 2^63 so manifests can store it as a TOML integer
            seed: r.random::<u64>() >> 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn index(self) -> u32 {
        self as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub subject: usize,
    pub background: usize,
    /// Subject centre in pixel coordinates.
    pub center: (f64, f64),
    pub radius: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subject >= PALETTE.len() || self.background >= PALETTE.len() {
            return Err(Error::OutOfRange("scene colour outside palette".into()));
        }
        if self.subject == self.background {
            return Err(Error::Precondition("subject and background colours must differ".into()));
        }
        let (cx, cy) = self.center;
        let r = self.radius;
        if cx - r < 0.0 || cy - r < 0.0 || cx + r > WIDTH as f64 || cy + r > HEIGHT as f64 {
            return Err(Error::Extent("subject does not fit inside the frame".into()));
        }
        Ok(())
    }

    pub fn sample<R: rand::Rng + ?Sized>(r: &mut R) -> Self {
        let subject = r.random_range(0..PALETTE.len());
        let mut background = r.random_range(0..PALETTE.len() - 1);
        if background >= subject {
            background += 1;
        }
        Self::sample_with(r, subject, background)
    }

    fn sample_with<R: rand::Rng + ?Sized>(r: &mut R, subject: usize, background: usize) -> Self {
        let shape = Shape::ALL[r.random_range(0..3)];
        let cx = WIDTH as f64 / 2.0 + r.random_range(-2..=2) as f64;
        let cy = HEIGHT as f64 / 2.0 + r.random_range(-2..=2) as f64;
        SceneSpec {
            shape,
            subject,
            background,
            center: (cx, cy),
            radius: 4.0,
        }
    }

    /// Whether the pixel with centre `(x + 0.5, y + 0.5)` lies on the subject.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.center.0;
        let dy = y as f64 + 0.5 - self.center.1;
        let r = self.radius;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => {
                (-r..=0.7 * r).contains(&dy) && dx.abs() <= r * (dy + r) / (1.7 * r)
            }
        }
    }

    pub fn prompt(&self, family: Family) -> PromptTokens {
        PromptTokens::describe(
            self.shape.index(),
            self.subject as u32,
            self.background as u32,
            family.index(),
        )
        .expect("scene and family are in vocabulary")
    }
}

fn unit_hash(seed: u64, a: u64, b: u64, c: u64) -> f64 {
    let h = rng::mix(rng::mix(rng::mix(seed ^ a.wrapping_mul(0x9E37)) ^ b.wrapping_mul(0x85EB)) ^ c);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Whether dissolve has replaced pixel `(x, y)` at progress `p`.
pub fn dissolved(effect: &EffectSpec, x: usize, y: usize, p: f64) -> bool {
    unit_hash(effect.seed, x as u64, y as u64, u64::MAX) < effect.param * p
}

fn noise_color(seed: u64, x: usize, y: usize) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (i, v) in c.iter_mut().enumerate() {
        *v = 2.0 * unit_hash(seed, x as u64, y as u64, i as u64 + 7) - 1.0;
    }
    c
}

/// Whether sparkle lights pixel `(x, y)` in frame `f`.
pub fn sparkles(effect: &EffectSpec, x: usize, y: usize, f: usize, p: f64) -> bool {
    unit_hash(effect.seed, x as u64, y as u64, f as u64 + 100) < effect.param * p
}

/// The scene with no effect applied, one frame.
pub fn still(scene: &SceneSpec) -> Vec<[f64; 3]> {
    let mut out = vec![PALETTE[scene.background]; HEIGHT * WIDTH];
    for y in 0..HEIGHT {
        for x in 0..WIDTH {
            if scene.contains(x, y) {
                out[y * WIDTH + x] = PALETTE[scene.subject];
            }
        }
    }
    out
}

fn splat(scene: &SceneSpec, mv: impl Fn(f64, f64) -> (f64, f64)) -> Vec<[f64; 3]> {
    let mut out = vec![PALETTE[scene.background]; HEIGHT * WIDTH];
    for y in 0..HEIGHT {
        for x in 0..WIDTH {
            if scene.contains(x, y) {
                let (nx, ny) = mv(x as f64 + 0.5, y as f64 + 0.5);
                let (px, py) = (nx.floor(), ny.floor());
                if px >= 0.0 && py >= 0.0 && (px as usize) < WIDTH && (py as usize) < HEIGHT {
                    out[py as usize * WIDTH + px as usize] = PALETTE[scene.subject];
                }
            }
        }
    }
    out
}

/// One frame of `effect` on `scene` at progress `p`.
pub fn render_frame(effect: &EffectSpec, scene: &SceneSpec, f: usize, p: f64) -> Vec<[f64; 3]> {
    let (cx, cy) = scene.center;
    let a = effect.param;
    match effect.family {
        Family::Dissolve => {
            let mut out = still(scene);
            for y in 0..HEIGHT {
                for x in 0..WIDTH {
                    if dissolved(effect, x, y, p) {
                        out[y * WIDTH + x] = noise_color(effect.seed, x, y);
                    }
                }
            }
            out
        }
        Family::Sparkle => {
            let mut out = still(scene);
            for y in 0..HEIGHT {
                for x in 0..WIDTH {
                    if sparkles(effect, x, y, f, p) {
                        out[y * WIDTH + x] = WHITE;
                    }
                }
            }
            out
        }
        Family::Explode => splat(scene, |x, y| {
            let (dx, dy) = (x - cx, y - cy);
            let d = (dx * dx + dy * dy).sqrt();
            if d < 1e-9 {
                (x, y)
            } else {
                (x + dx / d * a * p, y + dy / d * a * p)
            }
        }),
        Family::Melt => {
            let top = cy - scene.radius;
            splat(scene, |x, y| {
                let w = (0.5 + 0.5 * (y - top) / (2.0 * scene.radius)).clamp(0.5, 1.0);
                (x, y + a * p * w)
            })
        }
        Family::Freeze => {
            let k = a * p;
            let contrast = 1.0 + 0.3 * k;
            still(scene)
                .into_iter()
                .map(|c| {
                    let mut o = [0.0; 3];
                    for i in 0..3 {
                        o[i] = ((c[i] + k * (ICE[i] - c[i])) * contrast).clamp(-1.0, 1.0);
                    }
                    o
                })
                .collect()
        }
    }
}

/// Progress of frame `f` in a clip of `frames`.
pub fn progress(f: usize, frames: usize) -> f64 {
    if frames <= 1 {
        0.0
    } else {
        f as f64 / (frames - 1) as f64
    }
}

pub fn render_video(effect: &EffectSpec, scene: &SceneSpec) -> PixelVideo {
    let mut data = Vec::with_capacity(FRAMES * HEIGHT * WIDTH * CHANNELS);
    for f in 0..FRAMES {
        for px in render_frame(effect, scene, f, progress(f, FRAMES)) {
            data.extend_from_slice(&px);
        }
    }
    PixelVideo::new(FRAMES, HEIGHT, WIDTH, CHANNELS, data).expect("fixed extents")
}

/// Video and prompt for one clip.
pub fn render(effect: &EffectSpec, scene: &SceneSpec) -> Result<(PixelVideo, PromptTokens)> {
    scene.validate()?;
    Ok((render_video(effect, scene), scene.prompt(effect.family)))
}

/// One rendered clip with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene: SceneSpec,
    pub prompt: PromptTokens,
    pub video: PixelVideo,
}

/// Reference and target rendered with one shared effect.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub effect: EffectSpec,
    pub reference: Sample,
    pub target: Sample,
}

impl PairSample {
    /// Encoded clips for training.
    pub fn train_pair(&self) -> Result<TrainPair> {
        let codec = PatchCodec::rgb();
        Ok(TrainPair {
            reference: Clip::new(self.reference.prompt.clone(), &self.reference.video, codec)?,
            target: Clip::new(self.target.prompt.clone(), &self.target.video, codec)?,
        })
    }
}

/// Draw an effect and two scenes whose colours keep leakage visible: the
/// target subject differs from both reference colours and the reference
/// subject differs from the target background.
pub fn make_pair(family: Family, seed: u64) -> PairSample {
    let mut r = rng::rng(seed);
    let effect = EffectSpec::sample(family, &mut r);
    let reference = SceneSpec::sample(&mut r);
    pair_from(effect, reference, &mut r)
}

/// A new target scene for a fixed effect and reference scene.
pub fn make_target(effect: EffectSpec, reference: SceneSpec, seed: u64) -> PairSample {
    pair_from(effect, reference, &mut rng::rng(seed))
}

fn pair_from<R: rand::Rng + ?Sized>(effect: EffectSpec, reference: SceneSpec, r: &mut R) -> PairSample {
    let target = loop {
        let s = SceneSpec::sample(r);
        if s.subject != reference.subject && s.subject != reference.background && s.background != reference.subject {
            break s;
        }
    };
    let clip = |scene: SceneSpec| {
        let (video, prompt) = render(&effect, &scene).expect("sampled scenes are valid");
        Sample { scene, prompt, video }
    };
    PairSample {
        effect,
        reference: clip(reference),
        target: clip(target),
    }
}

/// Pairs `0..n` of a dataset; pair `i` depends only on `(seed, i)`.
pub fn generate(n_pairs: usize, families: &[Family], seed: u64, exec: Exec) -> Result<Vec<PairSample>> {
    if families.is_empty() && n_pairs > 0 {
        return Err(Error::Config("no effect families selected".into()));
    }
    Ok(exec.map(n_pairs, |i| {
        let s = rng::derive(seed, i as u64);
        let family = families[rng::rng(s).random_range(0..families.len())];
        make_pair(family, rng::derive(s, 1))
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub effect: EffectSpec,
    pub reference: SceneSpec,
    pub target: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator: String,
    pub generator_version: u32,
    pub seed: u64,
    pub families: Vec<Family>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dtype: String,
    pub blob: String,
    /// Resolved run configuration, when written by the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<toml::Table>,
    #[serde(default)]
    pub pairs: Vec<PairRecord>,
}

pub const MANIFEST: &str = "manifest.toml";
pub const BLOB: &str = "videos.bin";

/// Render `n_pairs` pairs and write them under `out`.
pub fn build_dataset(
    n_pairs: usize,
    families: &[Family],
    out: &Path,
    seed: u64,
    exec: Exec,
    run: Option<&toml::Table>,
) -> Result<DatasetManifest> {
    let pairs = generate(n_pairs, families, seed, exec)?;
    let m = DatasetManifest {
        format_version: FORMAT_VERSION,
        generator: GENERATOR.into(),
        generator_version: GENERATOR_VERSION,
        seed,
        families: families.to_vec(),
        frames: FRAMES,
        height: HEIGHT,
        width: WIDTH,
        channels: CHANNELS,
        dtype: "f64".into(),
        blob: BLOB.into(),
        run: run.cloned(),
        pairs: pairs
            .iter()
            .map(|p| PairRecord {
                effect: p.effect,
                reference: p.reference.scene,
                target: p.target.scene,
            })
            .collect(),
    };
    let mut blob = Vec::with_capacity(n_pairs * 2 * FRAMES * HEIGHT * WIDTH * CHANNELS * 8);
    for p in &pairs {
        for v in [&p.reference.video, &p.target.video] {
            for x in &v.data {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let text = manifest::to_text(&m)?;
    manifest::write_dir_atomic(out, |dir| {
        fs::write(dir.join(BLOB), &blob)?;
        fs::write(dir.join(MANIFEST), text.as_bytes())?;
        Ok(())
    })?;
    Ok(m)
}

/// Read a container written by [`build_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<PairSample>)> {
    let m: DatasetManifest = manifest::read(&dir.join(MANIFEST))?;
    if m.format_version != FORMAT_VERSION || m.generator != GENERATOR {
        return Err(Error::Format(format!(
            "dataset format {} from `{}` is not supported",
            m.format_version, m.generator
        )));
    }
    if m.dtype != "f64" || [m.frames, m.height, m.width, m.channels] != [FRAMES, HEIGHT, WIDTH, CHANNELS] {
        return Err(Error::Format("dataset extents or dtype differ from this build".into()));
    }
    let bytes = fs::read(dir.join(&m.blob))?;
    let per_video = FRAMES * HEIGHT * WIDTH * CHANNELS;
    if bytes.len() != m.pairs.len() * 2 * per_video * 8 {
        return Err(Error::Format(format!(
            "blob holds {} bytes, manifest needs {}",
            bytes.len(),
            m.pairs.len() * 2 * per_video * 8
        )));
    }
    let mut chunks = bytes.chunks_exact(per_video * 8).map(|c| {
        let data = c
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        PixelVideo::new(FRAMES, HEIGHT, WIDTH, CHANNELS, data)
    });
    let mut pairs = Vec::with_capacity(m.pairs.len());
    for rec in &m.pairs {
        let rv = chunks.next().expect("sized")?;
        let tv = chunks.next().expect("sized")?;
        pairs.push(PairSample {
            effect: rec.effect,
            reference: Sample {
                scene: rec.reference,
                prompt: rec.reference.prompt(rec.effect.family),
                video: rv,
            },
            target: Sample {
                scene: rec.target,
                prompt: rec.target.prompt(rec.effect.family),
                video: tv,
            },
        });
    }
    Ok((m, pairs))
}
