//! Generated clips on disk: `videos.toml` plus `videos.bin` (f64 LE).

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use refvfx::codec::PixelVideo;
use refvfx::data;
use refvfx::manifest;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "videos.toml";
pub const BLOB: &str = "videos.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub name: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Element offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSetManifest {
    pub format: String,
    pub version: u32,
    pub run: toml::Table,
    pub videos: Vec<VideoEntry>,
}

pub fn write(dir: &Path, videos: &[(String, PixelVideo)], run: &toml::Table) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, v) in videos {
        let [frames, height, width, channels] = v.extents();
        entries.push(VideoEntry {
            name: name.clone(),
            frames,
            height,
            width,
            channels,
            offset,
        });
        offset += v.data.len();
        for x in &v.data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let m = VideoSetManifest {
        format: "refvfx-videos".into(),
        version: 1,
        run: run.clone(),
        videos: entries,
    };
    let text = manifest::to_text(&m)?;
    manifest::write_dir_atomic(dir, |tmp| {
        fs::write(tmp.join(BLOB), &blob)?;
        fs::write(tmp.join(MANIFEST), text.as_bytes())?;
        Ok(())
    })?;
    Ok(())
}

/// Read a video set, or both clips of every pair of a dataset.
pub fn read(dir: &Path) -> Result<Vec<(String, PixelVideo)>> {
    if dir.join(data::MANIFEST).exists() {
        let (_, pairs) = data::load_dataset(dir)?;
        return Ok(pairs
            .into_iter()
            .enumerate()
            .flat_map(|(i, p)| [(format!("pair{i:04}_ref"), p.reference.video), (format!("pair{i:04}_tgt"), p.target.video)])
            .collect());
    }
    let m: VideoSetManifest = manifest::read(&dir.join(MANIFEST)).with_context(|| format!("no videos under {}", dir.display()))?;
    let blob = fs::read(dir.join(BLOB))?;
    let mut out = Vec::new();
    for e in m.videos {
        let n = e.frames * e.height * e.width * e.channels;
        let Some(bytes) = blob.get(e.offset * 8..(e.offset + n) * 8) else {
            bail!("video `{}` runs past the blob", e.name);
        };
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((e.name, PixelVideo::new(e.frames, e.height, e.width, e.channels, data)?));
    }
    Ok(out)
}
