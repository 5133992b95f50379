//! Segment-level attention permissions compiled to token-level masks.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::assembly::{SegmentKind, SegmentLayout};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `allowed[query][key]` over [`SegmentKind`] indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FlowTable {
    allowed: [[bool; 5]; 5],
}

impl FlowTable {
    /// In-context table with the concept-token extension.
    ///
    /// Target prompt and concept tokens see everything; the reference pair
    /// only sees itself; target video sees its own prompt, itself, the
    /// reference video and the concept tokens.
    pub fn canonical() -> Self {
        use SegmentKind::*;
        let mut t = FlowTable {
            allowed: [[false; 5]; 5],
        };
        for k in SegmentKind::ALL {
            t.set(TargetPrompt, k, true);
            t.set(Concept, k, true);
        }
        for k in [RefPrompt, RefVideo] {
            t.set(RefPrompt, k, true);
            t.set(RefVideo, k, true);
        }
        for k in [TargetPrompt, TargetVideo, RefVideo, Concept] {
            t.set(TargetVideo, k, true);
        }
        t
    }

    /// Every segment sees every segment (mask ablation).
    pub fn all_true() -> Self {
        FlowTable {
            allowed: [[true; 5]; 5],
        }
    }

    pub fn allows(&self, query: SegmentKind, key: SegmentKind) -> bool {
        self.allowed[query.index()][key.index()]
    }

    pub fn set(&mut self, query: SegmentKind, key: SegmentKind, allowed: bool) {
        self.allowed[query.index()][key.index()] = allowed;
    }

    /// Present key segments a query segment may read, in layout order.
    pub fn allowed_keys<'a>(
        &self,
        layout: &'a SegmentLayout,
        query: SegmentKind,
    ) -> impl Iterator<Item = &'a crate::assembly::Segment> + use<'a> {
        let table = *self;
        layout
            .segments()
            .iter()
            .filter(move |k| table.allows(query, k.kind))
    }

    /// Number of allowed `(query, key)` token pairs, by block arithmetic.
    pub fn allowed_entries(&self, layout: &SegmentLayout) -> usize {
        layout
            .segments()
            .iter()
            .map(|q| q.len * self.allowed_keys(layout, q.kind).map(|k| k.len).sum::<usize>())
            .sum()
    }
}

/// Mask presets selectable from configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    #[default]
    Canonical,
    None,
}

impl MaskMode {
    pub fn table(self) -> FlowTable {
        match self {
            MaskMode::Canonical => FlowTable::canonical(),
            MaskMode::None => FlowTable::all_true(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Canonical => "canonical",
            MaskMode::None => "none",
        }
    }
}

impl std::str::FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(MaskMode::Canonical),
            "none" => Ok(MaskMode::None),
            other => Err(Error::Config(format!("unknown mask mode `{other}`"))),
        }
    }
}

/// Direct edges the table forbids, as `(query, key)`.
pub fn leakage_paths(table: &FlowTable) -> Vec<(SegmentKind, SegmentKind)> {
    let mut out = Vec::new();
    for q in SegmentKind::ALL {
        for k in SegmentKind::ALL {
            if !table.allows(q, k) {
                out.push((q, k));
            }
        }
    }
    out
}

/// Token-level boolean mask, row = query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
}

/// Compile a flow table over a layout.
pub fn build_mask(layout: &SegmentLayout, table: &FlowTable) -> Result<AttentionMask> {
    for kind in [
        SegmentKind::TargetPrompt,
        SegmentKind::TargetVideo,
    ] {
        if layout.get(kind).is_none() {
            return Err(Error::Layout(format!("mandatory segment {kind} missing")));
        }
    }
    let n = layout.total_len();
    let mut allowed = vec![false; n * n];
    for q in layout.segments() {
        let mut any = false;
        for k in table.allowed_keys(layout, q.kind) {
            any = true;
            for i in q.offset..q.offset + q.len {
                allowed[i * n + k.offset..i * n + k.offset + k.len].fill(true);
            }
        }
        if !any {
            return Err(Error::Layout(format!(
                "segment {} has no allowed keys under this table",
                q.kind
            )));
        }
    }
    Ok(AttentionMask { len: n, allowed })
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.len + key]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&b| b).count()
    }

    /// `0` where allowed, `-inf` elsewhere.
    pub fn additive<T: Scalar>(&self) -> Arc<Tensor<T>> {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { T::zero() } else { T::neg_infinity() })
            .collect();
        Arc::new(Tensor::new(vec![self.len, self.len], data).expect("square"))
    }

    /// Plain PBM (`P1`); `1` marks an allowed entry.
    pub fn to_pbm(&self) -> String {
        let mut s = format!("P1\n{} {}\n", self.len, self.len);
        for i in 0..self.len {
            let row: Vec<&str> = (0..self.len)
                .map(|j| if self.get(i, j) { "1" } else { "0" })
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_pbm(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        if tokens.next() != Some("P1") {
            return Err(Error::Format("mask dump must start with P1".into()));
        }
        let mut dim = || -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Format("missing mask extent".into()))
        };
        let (w, h) = (dim()?, dim()?);
        if w != h {
            return Err(Error::Format(format!("mask dump is {w}x{h}, expected square")));
        }
        let allowed = tokens
            .flat_map(|t| t.chars())
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Format(format!("unexpected `{other}` in mask dump"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if allowed.len() != w * h {
            return Err(Error::Format(format!(
                "mask dump has {} entries, expected {}",
                allowed.len(),
                w * h
            )));
        }
        Ok(AttentionMask { len: w, allowed })
    }
}
