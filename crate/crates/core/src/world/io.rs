//! Sequence directories on disk.
//!
//! Layout: numbered frames (`00001.ppm` or `00001.raw`), `groundtruth.txt`
//! with one `x,y,w,h` line per frame (0-based, top-left corner), and an
//! optional `spec.txt` holding the generating [`WorldSpec`].
//!
//! The raw raster format is the ASCII header `MLTRAW 1\n<width> <height>\n`
//! followed by `width·height·3` RGB bytes. PPM support covers binary `P6`
//! with maxval 255.

use std::fs;
use std::path::{Path, PathBuf};

use super::render::{AnnotatedSequence, Attributes};
use super::spec::WorldSpec;
use crate::error::{Error, Result};
use crate::geom::BBox;
use crate::image::Frame;
use crate::manifest::Manifest;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RasterFormat {
    Ppm,
    Raw,
}

impl RasterFormat {
    pub fn extension(self) -> &'static str {
        match self {
            RasterFormat::Ppm => "ppm",
            RasterFormat::Raw => "raw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ppm" => Ok(RasterFormat::Ppm),
            "raw" => Ok(RasterFormat::Raw),
            other => Err(Error::invalid(format!(
                "unknown frame format {other:?} (ppm|raw)"
            ))),
        }
    }
}

const RAW_MAGIC: &str = "MLTRAW 1";

pub fn encode_frame(frame: &Frame, format: RasterFormat) -> Vec<u8> {
    let header = match format {
        RasterFormat::Ppm => format!("P6\n{} {}\n255\n", frame.width(), frame.height()),
        RasterFormat::Raw => format!("{RAW_MAGIC}\n{} {}\n", frame.width(), frame.height()),
    };
    let mut out = header.into_bytes();
    out.extend_from_slice(frame.pixels());
    out
}

/// Splits whitespace-separated header tokens, skipping `#` comments, and
/// returns them with the offset just past the single whitespace byte that
/// ends the last token.
fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return None;
    }
    Some((tokens, i + 1))
}

pub fn decode_frame(bytes: &[u8], path: &Path) -> Result<Frame> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let (w, h, offset) = if bytes.starts_with(b"P6") {
        let (t, off) = header_tokens(bytes, 4).ok_or_else(|| bad("truncated PPM header".into()))?;
        if t[3] != "255" {
            return Err(bad(format!("unsupported PPM maxval {}", t[3])));
        }
        (t[1].clone(), t[2].clone(), off)
    } else if bytes.starts_with(RAW_MAGIC.as_bytes()) {
        let (t, off) = header_tokens(bytes, 4).ok_or_else(|| bad("truncated raw header".into()))?;
        (t[2].clone(), t[3].clone(), off)
    } else {
        return Err(bad("neither a P6 PPM nor a raw raster".into()));
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad(format!("bad dimension {s:?}")))
    };
    let (w, h) = (parse(&w)?, parse(&h)?);
    let body = &bytes[offset..];
    if body.len() != w * h * 3 {
        return Err(bad(format!(
            "expected {} pixel bytes, found {}",
            w * h * 3,
            body.len()
        )));
    }
    Frame::new(w, h, body.to_vec())
}

pub fn parse_box_line(line: &str) -> Option<BBox> {
    let v: Vec<f64> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .ok()?;
    match v.as_slice() {
        &[x, y, w, h] if [x, y, w, h].iter().all(|t| t.is_finite()) => Some(BBox::new(x, y, w, h)),
        _ => None,
    }
}

pub fn format_box(b: &BBox) -> String {
    format!("{},{},{},{}", b.x, b.y, b.w, b.h)
}

/// Reads `x,y,w,h` lines; blank lines are skipped.
pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let b = parse_box_line(line).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: format!("expected `x,y,w,h`, got {line:?}"),
        })?;
        out.push(b);
    }
    Ok(out)
}

pub fn export(seq: &AnnotatedSequence, dir: &Path, format: RasterFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in seq.frames.iter().enumerate() {
        let p = dir.join(format!("{:05}.{}", i + 1, format.extension()));
        fs::write(&p, encode_frame(f, format)).map_err(|e| Error::io(&p, e))?;
    }
    let mut gt = String::new();
    for b in &seq.boxes {
        gt.push_str(&format_box(b));
        gt.push('\n');
    }
    let p = dir.join("groundtruth.txt");
    fs::write(&p, gt).map_err(|e| Error::io(&p, e))?;
    if let Some(spec) = &seq.spec {
        spec.to_manifest().save(&dir.join("spec.txt"))?;
    }
    Ok(())
}

/// Frame files of a sequence directory in name order.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "raw")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "{}: no .ppm or .raw frames",
            dir.display()
        )));
    }
    Ok(paths)
}

pub fn ingest_frames(dir: &Path) -> Result<Vec<Frame>> {
    frame_paths(dir)?
        .iter()
        .map(|p| decode_frame(&fs::read(p).map_err(|e| Error::io(p, e))?, p))
        .collect()
}

/// Reads a sequence directory; `groundtruth.txt` must hold exactly one box
/// per frame.
pub fn ingest(dir: &Path) -> Result<AnnotatedSequence> {
    let frames = ingest_frames(dir)?;
    let boxes = read_boxes(&dir.join("groundtruth.txt"))?;
    if boxes.len() != frames.len() {
        return Err(Error::Data(format!(
            "{}: {} frames but {} ground-truth boxes",
            dir.display(),
            frames.len(),
            boxes.len()
        )));
    }
    let spec_path = dir.join("spec.txt");
    let spec = if spec_path.exists() {
        Some(WorldSpec::from_manifest(
            &Manifest::load(&spec_path)?,
            &spec_path,
        )?)
    } else {
        None
    };
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    let n = frames.len();
    Ok(AnnotatedSequence {
        name,
        frames,
        boxes,
        attributes: spec.as_ref().map(Attributes::from_spec).unwrap_or_default(),
        occluders: vec![None; n],
        spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::generate;

    fn toy(dir: &Path, frames: usize, boxes: usize) {
        let f = Frame::new(2, 2, (0..12).collect()).unwrap();
        for i in 0..frames {
            fs::write(
                dir.join(format!("{:05}.ppm", i + 1)),
                encode_frame(&f, RasterFormat::Ppm),
            )
            .unwrap();
        }
        let gt: String = (0..boxes).map(|i| format!("{i},0,1,1\n")).collect();
        fs::write(dir.join("groundtruth.txt"), gt).unwrap();
    }

    #[test]
    fn toy_directory_is_ingested() {
        let d = tempfile::tempdir().unwrap();
        toy(d.path(), 3, 3);
        let s = ingest(d.path()).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.boxes[2], BBox::new(2.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn annotation_count_mismatch_is_named() {
        let d = tempfile::tempdir().unwrap();
        toy(d.path(), 3, 2);
        let e = ingest(d.path()).unwrap_err().to_string();
        assert!(e.contains("3 frames but 2"), "{e}");
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let d = tempfile::tempdir().unwrap();
        toy(d.path(), 2, 0);
        fs::write(d.path().join("groundtruth.txt"), "0,0,1,1\n0,0,one,1\n").unwrap();
        match ingest(d.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn export_ingest_round_trip_is_lossless() {
        let spec = WorldSpec {
            length: 6,
            noise: 0.03,
            blur: 0.6,
            distractors: 1,
            similarity: 0.4,
            seed: 31,
            ..WorldSpec::default()
        };
        let s = generate(&spec).unwrap();
        for format in [RasterFormat::Ppm, RasterFormat::Raw] {
            let d = tempfile::tempdir().unwrap();
            export(&s, d.path(), format).unwrap();
            let back = ingest(d.path()).unwrap();
            assert_eq!(back.frames, s.frames);
            assert_eq!(back.boxes, s.boxes);
            assert!(back
                .boxes
                .iter()
                .zip(&s.boxes)
                .all(|(a, b)| a.x.to_bits() == b.x.to_bits()));
            assert_eq!(back.spec, s.spec);
        }
    }

    #[test]
    fn ppm_with_comment_decodes() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        let f = decode_frame(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!(f.pixels(), &[1, 2, 3]);
        assert!(decode_frame(b"P6\n1 1\n255\n\x01", Path::new("x.ppm")).is_err());
    }
}
