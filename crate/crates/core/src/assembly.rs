//! Unified token sequence: prompt embedding, segment layout and 3D rotary
//! positions for video tokens.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Closed prompt vocabulary.
pub mod vocab {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const ON: u32 = 3;
    pub const WITH: u32 = 4;
    /// Shapes: circle, square, triangle.
    pub const SHAPE_BASE: u32 = 8;
    pub const SHAPES: u32 = 3;
    /// Subject colours (six).
    pub const SUBJECT_COLOR_BASE: u32 = 16;
    /// Background colours (six).
    pub const BACKGROUND_COLOR_BASE: u32 = 24;
    pub const COLORS: u32 = 6;
    /// Effects: dissolve, explode, melt, freeze, sparkle.
    pub const EFFECT_BASE: u32 = 32;
    pub const EFFECTS: u32 = 5;
    pub const SIZE: usize = 48;

    pub fn is_effect(id: u32) -> bool {
        (EFFECT_BASE..EFFECT_BASE + EFFECTS).contains(&id)
    }
}

pub const PROMPT_LEN: usize = 8;

/// Token ids of one prompt.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PromptTokens {
    ids: Vec<u32>,
}

impl PromptTokens {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab::SIZE) {
            return Err(Error::OutOfRange(format!(
                "prompt token {bad} outside vocabulary of {}",
                vocab::SIZE
            )));
        }
        let effects = ids.iter().filter(|&&i| vocab::is_effect(i)).count();
        if effects != 1 {
            return Err(Error::Precondition(format!(
                "prompt must carry exactly one effect token, found {effects}"
            )));
        }
        Ok(PromptTokens { ids })
    }

    /// `<bos> subject-colour shape on background-colour with effect <eos>`.
    pub fn describe(shape: u32, subject_color: u32, background_color: u32, effect: u32) -> Result<Self> {
        if shape >= vocab::SHAPES || subject_color >= vocab::COLORS || background_color >= vocab::COLORS {
            return Err(Error::OutOfRange("scene descriptor outside vocabulary".into()));
        }
        if effect >= vocab::EFFECTS {
            return Err(Error::OutOfRange(format!("effect index {effect}")));
        }
        Self::new(vec![
            vocab::BOS,
            vocab::SUBJECT_COLOR_BASE + subject_color,
            vocab::SHAPE_BASE + shape,
            vocab::ON,
            vocab::BACKGROUND_COLOR_BASE + background_color,
            vocab::WITH,
            vocab::EFFECT_BASE + effect,
            vocab::EOS,
        ])
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn effect(&self) -> u32 {
        self.ids
            .iter()
            .copied()
            .find(|&i| vocab::is_effect(i))
            .expect("validated at construction")
    }
}

/// Embedding lookup plus learned absolute positional bias.
pub fn embed_prompt<T: Scalar>(
    tape: &mut Tape<T>,
    table: Var,
    positional: Var,
    prompt: &PromptTokens,
) -> Result<Var> {
    let ids: Vec<usize> = prompt.ids().iter().map(|&i| i as usize).collect();
    let tok = tape.embedding(table, &ids)?;
    let (max_len, _) = tape.value(positional).dims2("embed_prompt")?;
    if prompt.len() > max_len {
        return Err(Error::OutOfRange(format!(
            "prompt length {} exceeds positional table {max_len}",
            prompt.len()
        )));
    }
    let pos = tape.slice(positional, 0, 0, prompt.len())?;
    tape.add(tok, pos)
}

/// Segment kinds of the unified sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegmentKind {
    TargetPrompt,
    RefPrompt,
    TargetVideo,
    RefVideo,
    Concept,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 5] = [
        SegmentKind::TargetPrompt,
        SegmentKind::RefPrompt,
        SegmentKind::TargetVideo,
        SegmentKind::RefVideo,
        SegmentKind::Concept,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short(self) -> &'static str {
        match self {
            SegmentKind::TargetPrompt => "g_tgt",
            SegmentKind::RefPrompt => "g_ref",
            SegmentKind::TargetVideo => "z_tgt",
            SegmentKind::RefVideo => "z_ref",
            SegmentKind::Concept => "z_ce",
        }
    }
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
}

/// Ordered, contiguous segments of a unified sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    segments: Vec<Segment>,
}

impl SegmentLayout {
    /// Build from `(kind, length)` pairs in sequence order.
    pub fn from_lengths(parts: &[(SegmentKind, usize)]) -> Result<Self> {
        let mut segments = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for &(kind, len) in parts {
            if len == 0 {
                return Err(Error::Layout(format!("segment {kind} has zero length")));
            }
            if segments.iter().any(|s: &Segment| s.kind == kind) {
                return Err(Error::Layout(format!("segment {kind} appears twice")));
            }
            segments.push(Segment { kind, offset, len });
            offset += len;
        }
        if segments.is_empty() {
            return Err(Error::Layout("layout has no segments".into()));
        }
        Ok(SegmentLayout { segments })
    }

    /// `[g_tgt, g_ref, z_tgt, z_ref, (z_ce)]`.
    pub fn in_context(
        target_prompt: usize,
        ref_prompt: usize,
        target_video: usize,
        ref_video: usize,
        concept: Option<usize>,
    ) -> Result<Self> {
        let mut parts = vec![
            (SegmentKind::TargetPrompt, target_prompt),
            (SegmentKind::RefPrompt, ref_prompt),
            (SegmentKind::TargetVideo, target_video),
            (SegmentKind::RefVideo, ref_video),
        ];
        if let Some(n) = concept {
            parts.push((SegmentKind::Concept, n));
        }
        Self::from_lengths(&parts)
    }

    /// `[g_tgt, z_tgt]`: plain image-to-video layout used to pretrain the backbone.
    pub fn backbone(target_prompt: usize, target_video: usize) -> Result<Self> {
        Self::from_lengths(&[
            (SegmentKind::TargetPrompt, target_prompt),
            (SegmentKind::TargetVideo, target_video),
        ])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.segments.last().map(|s| s.offset + s.len).unwrap_or(0)
    }

    pub fn get(&self, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    pub fn kind_at(&self, index: usize) -> Option<SegmentKind> {
        self.segments
            .iter()
            .find(|s| (s.offset..s.offset + s.len).contains(&index))
            .map(|s| s.kind)
    }

    pub fn has_reference(&self) -> bool {
        self.get(SegmentKind::RefVideo).is_some()
    }
}

/// Integer `(t, y, x)` of a video token; `None` for text and concept tokens.
pub type Position = Option<[usize; 3]>;

pub fn grid_positions(grid: [usize; 3]) -> Vec<Position> {
    let [t, h, w] = grid;
    let mut out = Vec::with_capacity(t * h * w);
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                out.push(Some([ti, y, x]));
            }
        }
    }
    out
}

/// Token matrix of the unified sequence with its layout and positions.
#[derive(Clone, Debug)]
pub struct UnifiedSequence {
    pub tokens: Var,
    pub layout: SegmentLayout,
    pub positions: Vec<Position>,
    pub target_grid: [usize; 3],
}

/// Inputs to [`assemble`], all already at model width.
#[derive(Clone, Debug)]
pub struct SequenceParts {
    pub target_prompt: Var,
    pub ref_prompt: Option<Var>,
    pub target_video: Var,
    pub target_grid: [usize; 3],
    pub ref_video: Option<Var>,
    pub ref_grid: Option<[usize; 3]>,
    pub concept: Option<Var>,
}

/// Concatenate `[g_tgt, g_ref, z_tgt, z_ref, (z_ce)]` along the token axis.
///
/// Reference and target video tokens receive identical grid coordinates.
pub fn assemble<T: Scalar>(tape: &mut Tape<T>, parts: &SequenceParts) -> Result<UnifiedSequence> {
    let (ref_prompt, ref_video, ref_grid) = match (parts.ref_prompt, parts.ref_video, parts.ref_grid) {
        (Some(p), Some(v), Some(g)) => (p, v, g),
        _ => {
            return Err(Error::Precondition(
                "in-context assembly requires a reference prompt and video".into(),
            ))
        }
    };
    if ref_grid != parts.target_grid {
        return Err(Error::Extent(format!(
            "reference grid {ref_grid:?} does not align with target grid {:?}",
            parts.target_grid
        )));
    }
    let rows = |tape: &Tape<T>, v: Var| tape.shape(v)[0];
    let n_video: usize = parts.target_grid.iter().product();
    for (name, v) in [("target", parts.target_video), ("reference", ref_video)] {
        if rows(tape, v) != n_video {
            return Err(Error::Extent(format!(
                "{name} video has {} tokens, grid needs {n_video}",
                rows(tape, v)
            )));
        }
    }
    let layout = SegmentLayout::in_context(
        rows(tape, parts.target_prompt),
        rows(tape, ref_prompt),
        n_video,
        n_video,
        parts.concept.map(|c| rows(tape, c)),
    )?;
    let mut seq = vec![parts.target_prompt, ref_prompt, parts.target_video, ref_video];
    seq.extend(parts.concept);
    let tokens = tape.concat(&seq, 0)?;

    let grid = grid_positions(parts.target_grid);
    let mut positions = Vec::with_capacity(layout.total_len());
    for seg in layout.segments() {
        match seg.kind {
            SegmentKind::TargetVideo | SegmentKind::RefVideo => positions.extend_from_slice(&grid),
            _ => positions.extend(std::iter::repeat_n(None, seg.len)),
        }
    }
    Ok(UnifiedSequence {
        tokens,
        layout,
        positions,
        target_grid: parts.target_grid,
    })
}

/// `[g_tgt, z_tgt]` without reference context.
pub fn assemble_backbone<T: Scalar>(
    tape: &mut Tape<T>,
    target_prompt: Var,
    target_video: Var,
    target_grid: [usize; 3],
) -> Result<UnifiedSequence> {
    let n_video: usize = target_grid.iter().product();
    if tape.shape(target_video)[0] != n_video {
        return Err(Error::Extent("target video does not match grid".into()));
    }
    let layout = SegmentLayout::backbone(tape.shape(target_prompt)[0], n_video)?;
    let tokens = tape.concat(&[target_prompt, target_video], 0)?;
    let mut positions: Vec<Position> = vec![None; tape.shape(target_prompt)[0]];
    positions.extend(grid_positions(target_grid));
    Ok(UnifiedSequence {
        tokens,
        layout,
        positions,
        target_grid,
    })
}

/// Rotary frequencies per axis. Pair `p` rotates columns `2p, 2p+1`;
/// pairs are ordered time, then height, then width.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeConfig {
    pub freqs: [Vec<f64>; 3],
}

impl RopeConfig {
    /// Split `head_dim / 2` pairs across `(t, y, x)` as `1 : 1 : 2`, with
    /// frequencies `base^(-i / n)` within each axis.
    pub fn for_head_dim(head_dim: usize, base: f64) -> Result<Self> {
        if !head_dim.is_multiple_of(2) || !(head_dim / 2).is_multiple_of(4) {
            return Err(Error::Config(format!(
                "head_dim {head_dim} cannot split rotary pairs 1:1:2 across t/y/x"
            )));
        }
        let unit = head_dim / 8;
        let axis = |n: usize| (0..n).map(|i| base.powf(-(i as f64) / n as f64)).collect();
        Ok(RopeConfig {
            freqs: [axis(unit), axis(unit), axis(2 * unit)],
        })
    }

    pub fn head_dim(&self) -> usize {
        2 * self.freqs.iter().map(Vec::len).sum::<usize>()
    }

    /// Rotation angle of each pair at a position.
    pub fn angles(&self, pos: [usize; 3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.head_dim() / 2);
        for (axis, freqs) in self.freqs.iter().enumerate() {
            out.extend(freqs.iter().map(|f| f * pos[axis] as f64));
        }
        out
    }
}

/// Per-row cosine/sine tables; identity rows for unpositioned tokens.
#[derive(Clone, Debug)]
pub struct RopeTables<T> {
    pub cos: Tensor<T>,
    pub sin: Tensor<T>,
    pub rotate_half: Tensor<T>,
}

impl<T: Scalar> RopeTables<T> {
    pub fn new(cfg: &RopeConfig, positions: &[Position]) -> Self {
        let d = cfg.head_dim();
        let mut cos = Vec::with_capacity(positions.len() * d);
        let mut sin = Vec::with_capacity(positions.len() * d);
        for p in positions {
            match p {
                Some(pos) => {
                    for a in cfg.angles(*pos) {
                        cos.extend([T::of(a.cos()); 2]);
                        sin.extend([T::of(a.sin()); 2]);
                    }
                }
                None => {
                    cos.extend(std::iter::repeat_n(T::one(), d));
                    sin.extend(std::iter::repeat_n(T::zero(), d));
                }
            }
        }
        // (x R)[2i] = -x[2i+1], (x R)[2i+1] = x[2i]
        let mut r = vec![T::zero(); d * d];
        for i in 0..d / 2 {
            r[(2 * i + 1) * d + 2 * i] = -T::one();
            r[(2 * i) * d + 2 * i + 1] = T::one();
        }
        let n = positions.len();
        RopeTables {
            cos: Tensor::new(vec![n, d], cos).expect("sized"),
            sin: Tensor::new(vec![n, d], sin).expect("sized"),
            rotate_half: Tensor::new(vec![d, d], r).expect("sized"),
        }
    }
}

impl<T: Scalar> RopeTables<T> {
    /// Repeat the per-head tables across `heads` column blocks.
    pub fn tiled(&self, heads: usize) -> Self {
        let (n, d) = (self.cos.shape()[0], self.cos.shape()[1]);
        let tile = |t: &Tensor<T>| {
            let mut out = Vec::with_capacity(n * d * heads);
            for i in 0..n {
                for _ in 0..heads {
                    out.extend_from_slice(t.row(i));
                }
            }
            Tensor::new(vec![n, d * heads], out).expect("sized")
        };
        let mut r = vec![T::zero(); d * heads * d * heads];
        let w = d * heads;
        for h in 0..heads {
            for i in 0..d {
                for j in 0..d {
                    r[(h * d + i) * w + h * d + j] = self.rotate_half.data()[i * d + j];
                }
            }
        }
        RopeTables {
            cos: tile(&self.cos),
            sin: tile(&self.sin),
            rotate_half: Tensor::new(vec![w, w], r).expect("sized"),
        }
    }
}

/// Tape handles of [`RopeTables`], registered once per forward pass.
#[derive(Clone, Copy, Debug)]
pub struct RopeVars {
    cos: Var,
    sin: Var,
    rotate_half: Var,
}

impl RopeVars {
    pub fn register<T: Scalar>(tape: &mut Tape<T>, tables: &RopeTables<T>) -> Self {
        RopeVars {
            cos: tape.constant(tables.cos.clone()),
            sin: tape.constant(tables.sin.clone()),
            rotate_half: tape.constant(tables.rotate_half.clone()),
        }
    }
}

/// `x * cos + rotate_half(x) * sin`, row by row.
pub fn rope_rotate<T: Scalar>(tape: &mut Tape<T>, x: Var, rope: RopeVars) -> Result<Var> {
    let a = tape.mul(x, rope.cos)?;
    let swapped = tape.matmul(x, rope.rotate_half)?;
    let b = tape.mul(swapped, rope.sin)?;
    tape.add(a, b)
}
