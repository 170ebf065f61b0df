//! Newline-delimited JSON sequence files.
//!
//! Line 1 is a header `{"format":"bevtrack-seq","version":1,"meta":{..}}`.
//! Every following line is one frame
//! `{"frame":i,"box":[x,y,z,w,l,h,yaw],"points":"<base64>"}` where the points
//! are little-endian `f32` triples.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Box3D, PointCloud};

use super::{Frame, Sequence, SequenceMeta};

const SEQ_FORMAT: &str = "bevtrack-seq";
const SEQ_VERSION: u32 = 1;
const MANIFEST_FORMAT: &str = "bevtrack-manifest";
const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    meta: SequenceMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    frame: usize,
    #[serde(rename = "box")]
    bx: [f64; 7],
    points: String,
}

fn encode_points(cloud: &PointCloud) -> String {
    let mut bytes = Vec::with_capacity(cloud.len() * 12);
    for p in &cloud.points {
        for v in p {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    B64.encode(bytes)
}

fn decode_points(s: &str, line: usize) -> Result<PointCloud> {
    let bytes = B64.decode(s).map_err(|e| Error::Parse {
        line,
        reason: format!("points: {e}"),
    })?;
    if bytes.len() % 12 != 0 {
        return Err(Error::Parse {
            line,
            reason: format!("points: {} bytes is not a whole number of xyz triples", bytes.len()),
        });
    }
    let points = bytes
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().unwrap()) as f64;
            [f(0), f(4), f(8)]
        })
        .collect();
    Ok(PointCloud::new(points))
}

pub fn write_sequence<W: Write>(mut w: W, seq: &Sequence) -> Result<()> {
    let header = Header {
        format: SEQ_FORMAT.into(),
        version: SEQ_VERSION,
        meta: seq.meta.clone(),
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for (i, f) in seq.frames.iter().enumerate() {
        let g = &f.gt;
        let rec = FrameRecord {
            frame: i,
            bx: [g.center[0], g.center[1], g.center[2], g.size[0], g.size[1], g.size[2], g.yaw],
            points: encode_points(&f.cloud),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_sequence(path: &Path, seq: &Sequence) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    write_sequence(&mut w, seq)?;
    w.flush()?;
    Ok(())
}

/// Parses one record, turning a failure on an unterminated final line into a
/// truncation error with its byte offset.
fn parse_record<'a, T: Deserialize<'a>>(text: &'a str, line: usize, start: usize, last_unterminated: bool) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        if last_unterminated && e.is_eof() {
            Error::Truncated {
                offset: start + text.len(),
                reason: format!("record on line {line} ends early: {e}"),
            }
        } else {
            Error::Parse {
                line,
                reason: e.to_string(),
            }
        }
    })
}

pub fn read_sequence<R: Read>(mut r: R) -> Result<Sequence> {
    let mut buf = String::new();
    r.read_to_string(&mut buf)?;
    let mut lines = Vec::new();
    let mut start = 0;
    for piece in buf.split_inclusive('\n') {
        let terminated = piece.ends_with('\n');
        let text = piece.trim_end_matches(['\n', '\r']);
        lines.push((start, text, terminated));
        start += piece.len();
    }
    let Some(&(s0, head, t0)) = lines.first() else {
        return Err(Error::Truncated {
            offset: 0,
            reason: "empty sequence file".into(),
        });
    };
    let header: Header = parse_record(head, 1, s0, !t0)?;
    if header.format != SEQ_FORMAT {
        return Err(Error::Parse {
            line: 1,
            reason: format!("format is {:?}, expected {SEQ_FORMAT:?}", header.format),
        });
    }
    if header.version != SEQ_VERSION {
        return Err(Error::Version {
            found: header.version.to_string(),
            expected: SEQ_VERSION.to_string(),
        });
    }
    let mut frames = Vec::new();
    for (k, &(s, text, terminated)) in lines.iter().enumerate().skip(1) {
        let line = k + 1;
        if text.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = parse_record(text, line, s, !terminated)?;
        if rec.frame != frames.len() {
            return Err(Error::Parse {
                line,
                reason: format!("frame index {} out of order (expected {})", rec.frame, frames.len()),
            });
        }
        let b = rec.bx;
        let gt = Box3D::new([b[0], b[1], b[2]], [b[3], b[4], b[5]], b[6]).map_err(|e| Error::Parse {
            line,
            reason: e.to_string(),
        })?;
        frames.push(Frame {
            cloud: decode_points(&rec.points, line)?,
            gt,
        });
    }
    if frames.len() < 2 {
        return Err(Error::Empty("sequence needs at least 2 frames"));
    }
    Ok(Sequence {
        frames,
        meta: header.meta,
    })
}

pub fn load_sequence(path: &Path) -> Result<Sequence> {
    read_sequence(fs::File::open(path)?)
}

/// Lists sequence files per split. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    splits: Manifest,
}

pub fn save_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let file = ManifestFile {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        splits: m.clone(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(std::io::Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Loads a manifest and resolves every path against its directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        reason: e.to_string(),
    })?;
    if file.format != MANIFEST_FORMAT {
        return Err(Error::Parse {
            line: 1,
            reason: format!("format is {:?}, expected {MANIFEST_FORMAT:?}", file.format),
        });
    }
    if file.version != MANIFEST_VERSION {
        return Err(Error::Version {
            found: file.version.to_string(),
            expected: MANIFEST_VERSION.to_string(),
        });
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let resolve = |v: Vec<PathBuf>| v.into_iter().map(|p| if p.is_absolute() { p } else { dir.join(p) }).collect();
    let s = file.splits;
    Ok(Manifest {
        train: resolve(s.train),
        val: resolve(s.val),
        test: resolve(s.test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sequence, Archetype, MotionPattern, SceneParams};

    fn small() -> Sequence {
        let mut p = SceneParams::new(Archetype::Pedestrian, MotionPattern::Turning, 3);
        p.frames = 4;
        p.clutter_points = 20;
        generate_sequence(&p).unwrap()
    }

    fn bytes(seq: &Sequence) -> Vec<u8> {
        let mut out = Vec::new();
        write_sequence(&mut out, seq).unwrap();
        out
    }

    #[test]
    fn roundtrip_is_lossless() {
        let seq = small();
        assert_eq!(read_sequence(&bytes(&seq)[..]).unwrap(), seq);
    }

    #[test]
    fn empty_frame_survives_roundtrip() {
        let mut seq = small();
        seq.frames[1].cloud = PointCloud::new(vec![]);
        assert_eq!(read_sequence(&bytes(&seq)[..]).unwrap(), seq);
    }

    #[test]
    fn truncation_reports_byte_offset() {
        let b = bytes(&small());
        let cut = b.len() - 40;
        match read_sequence(&b[..cut]) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, cut),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn malformed_record_reports_line() {
        let text = String::from_utf8(bytes(&small())).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "{\"frame\":1,\"box\":[1,2],\"points\":\"\"}";
        let broken = lines.join("\n") + "\n";
        match read_sequence(broken.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let text = String::from_utf8(bytes(&small())).unwrap();
        let bumped = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(read_sequence(bumped.as_bytes()), Err(Error::Version { .. })));
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            train: vec!["a.seq".into()],
            val: vec![],
            test: vec!["b.seq".into()],
        };
        let path = dir.path().join("manifest.json");
        save_manifest(&path, &m).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.train, vec![dir.path().join("a.seq")]);
        assert_eq!(back.test, vec![dir.path().join("b.seq")]);
    }
}
