//! PNG frame strips and animated GIFs.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use refvfx::codec::PixelVideo;
use refvfx::eval::to_u8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    /// One PNG per frame.
    PngStrip,
    /// One animated GIF per video.
    Gif,
}

/// 8-bit RGB of frame `f`, each pixel repeated `scale` times per axis.
pub fn frame_rgb(v: &PixelVideo, f: usize, scale: usize) -> Vec<u8> {
    let (w, h) = (v.width * scale, v.height * scale);
    let mut out = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let px = v.pixel(f, y / scale, x / scale);
            out.extend(px.iter().take(3).map(|&c| to_u8(c)));
        }
    }
    out
}

fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(rgb)?;
    writer.finish()?;
    Ok(())
}

fn write_gif(path: &Path, v: &PixelVideo, scale: usize, delay_cs: u16) -> Result<()> {
    let (w, h) = ((v.width * scale) as u16, (v.height * scale) as u16);
    let mut enc = gif::Encoder::new(BufWriter::new(File::create(path)?), w, h, &[])?;
    enc.set_repeat(gif::Repeat::Infinite)?;
    for f in 0..v.frames {
        let rgb = frame_rgb(v, f, scale);
        let mut frame = gif::Frame::from_rgb_speed(w, h, &rgb, 10);
        frame.delay = delay_cs;
        enc.write_frame(&frame)?;
    }
    Ok(())
}

/// Write every video; returns the files created.
pub fn export(videos: &[(String, PixelVideo)], format: Format, out: &Path, scale: usize) -> Result<Vec<PathBuf>> {
    if scale == 0 {
        bail!("scale must be at least 1");
    }
    let mut files = Vec::new();
    if videos.is_empty() {
        return Ok(files);
    }
    std::fs::create_dir_all(out)?;
    for (name, v) in videos {
        if v.channels != 3 {
            bail!("`{name}` has {} channels, export needs RGB", v.channels);
        }
        match format {
            Format::PngStrip => {
                for f in 0..v.frames {
                    let path = out.join(format!("{name}_f{f:02}.png"));
                    write_png(&path, v.width * scale, v.height * scale, &frame_rgb(v, f, scale))?;
                    files.push(path);
                }
            }
            Format::Gif => {
                let path = out.join(format!("{name}.gif"));
                write_gif(&path, v, scale, 12)?;
                files.push(path);
            }
        }
    }
    Ok(files)
}
