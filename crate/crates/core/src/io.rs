//! File formats: native trajectory JSON lines, TUM pose lists, token lines,
//! tag timelines, PGM frames and CSV/PLY exports.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, Trajectory, UnitQuaternion, Vec3};
use crate::preprocess::GrayFrame;
use crate::tagging::TagSegment;
use crate::tokenizer::TokenSequence;

pub const TRAJECTORY_FORMAT: &str = "trajgen-trajectory";
pub const TRAJECTORY_VERSION: u32 = 1;
/// TUM quaternions further than this from unit norm are renormalized with a warning.
pub const TUM_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    fps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseLine {
    q: [f64; 4],
    t: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    #[serde(rename = "W")]
    width: u32,
    #[serde(rename = "H")]
    height: u32,
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

pub fn write_trajectory<W: Write>(mut w: W, traj: &Trajectory) -> Result<()> {
    let header = Header { format: TRAJECTORY_FORMAT.into(), version: TRAJECTORY_VERSION, fps: traj.fps() };
    writeln!(w, "{}", serde_json::to_string(&header)?).map_err(write_err)?;
    for p in traj.poses() {
        let k = p.intrinsics;
        let line = PoseLine {
            q: p.rotation.to_array(),
            t: [p.translation.x, p.translation.y, p.translation.z],
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        };
        writeln!(w, "{}", serde_json::to_string(&line)?).map_err(write_err)?;
    }
    w.flush().map_err(write_err)
}

/// Parses the native format. `source` names the input in error messages.
pub fn read_trajectory<R: BufRead>(r: R, source: &str) -> Result<Trajectory> {
    let mut header: Option<Header> = None;
    let mut poses = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        let loc = || format!("{source}:{}", i + 1);
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: Header = serde_json::from_str(&line).map_err(|e| Error::parse(loc(), format!("bad header: {e}")))?;
            if h.format != TRAJECTORY_FORMAT {
                return Err(Error::parse(loc(), format!("unknown format {:?}", h.format)));
            }
            if h.version != TRAJECTORY_VERSION {
                return Err(Error::parse(loc(), format!("unsupported version {}", h.version)));
            }
            header = Some(h);
            continue;
        }
        let p: PoseLine = serde_json::from_str(&line).map_err(|e| Error::parse(loc(), e.to_string()))?;
        let pose = (|| {
            let [w, x, y, z] = p.q;
            let rotation = UnitQuaternion::from_components(w, x, y, z)?;
            let k = Intrinsics::new(p.fx, p.fy, p.cx, p.cy, p.width, p.height)?;
            CameraPose::new(rotation, Vec3::from(p.t), k)
        })()
        .map_err(|e| Error::parse(loc(), e.to_string()))?;
        poses.push(pose);
    }
    let header = header.ok_or_else(|| Error::parse(format!("{source}:1"), "empty file"))?;
    if poses.is_empty() {
        return Err(Error::parse(format!("{source}:2"), "no poses"));
    }
    Trajectory::new(poses, header.fps).map_err(|e| Error::parse(source.to_string(), e.to_string()))
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    read_trajectory(open(path)?, &path.display().to_string())
}

pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    write_trajectory(create(path)?, traj)
}

/// A trajectory imported from TUM text plus any normalization warnings.
#[derive(Debug, Clone)]
pub struct TumImport {
    pub trajectory: Trajectory,
    pub warnings: Vec<String>,
}

/// Reads `timestamp tx ty tz qx qy qz qw` lines. Frame rate comes from the
/// median timestamp step (30 fps for a single pose).
pub fn read_tum<R: BufRead>(r: R, source: &str, intrinsics: Intrinsics) -> Result<TumImport> {
    let mut poses = Vec::new();
    let mut stamps: Vec<f64> = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        let loc = || format!("{source}:{}", i + 1);
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = body
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|_| Error::parse(loc(), format!("not a number: {f:?}"))))
            .collect::<Result<_>>()?;
        if fields.len() != 8 {
            return Err(Error::parse(loc(), format!("expected 8 fields, found {}", fields.len())));
        }
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(loc(), "non-finite value"));
        }
        if let Some(&prev) = stamps.last() {
            if fields[0] <= prev {
                return Err(Error::parse(loc(), "timestamps must increase"));
            }
        }
        let (qx, qy, qz, qw) = (fields[4], fields[5], fields[6], fields[7]);
        let norm = (qw * qw + qx * qx + qy * qy + qz * qz).sqrt();
        if (norm - 1.0).abs() > TUM_NORM_TOLERANCE {
            warnings.push(format!("{}: quaternion norm {norm:.6} renormalized", loc()));
        }
        let rotation = UnitQuaternion::from_components(qw, qx, qy, qz).map_err(|e| Error::parse(loc(), e.to_string()))?;
        stamps.push(fields[0]);
        poses.push(CameraPose { rotation, translation: Vec3::new(fields[1], fields[2], fields[3]), intrinsics });
    }
    if poses.is_empty() {
        return Err(Error::parse(format!("{source}:1"), "no poses"));
    }
    let mut steps: Vec<f64> = stamps.windows(2).map(|w| w[1] - w[0]).collect();
    let fps = if steps.is_empty() {
        30.0
    } else {
        steps.sort_by(f64::total_cmp);
        1.0 / steps[steps.len() / 2]
    };
    Ok(TumImport { trajectory: Trajectory::new(poses, fps)?, warnings })
}

/// Writes TUM lines with timestamps `i / fps`.
pub fn write_tum<W: Write>(mut w: W, traj: &Trajectory) -> Result<()> {
    for (i, p) in traj.poses().iter().enumerate() {
        let [qw, qx, qy, qz] = p.rotation.to_array();
        let t = p.translation;
        writeln!(w, "{} {} {} {} {} {} {} {}", i as f64 / traj.fps(), t.x, t.y, t.z, qx, qy, qz, qw).map_err(write_err)?;
    }
    w.flush().map_err(write_err)
}

/// One sequence per line, ids separated by single spaces.
pub fn write_token_lines<W: Write>(mut w: W, seqs: &[TokenSequence]) -> Result<()> {
    for s in seqs {
        let line: Vec<String> = s.ids().iter().map(u32::to_string).collect();
        writeln!(w, "{}", line.join(" ")).map_err(write_err)?;
    }
    w.flush().map_err(write_err)
}

/// Parses token lines; errors name the line and the token offset within it.
pub fn read_token_lines<R: BufRead>(r: R, source: &str, bins: u32) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ids: Vec<u32> = line
            .split_whitespace()
            .enumerate()
            .map(|(k, f)| {
                f.parse::<u32>()
                    .map_err(|_| Error::parse(format!("{source}:{} offset {k}", i + 1), format!("not a token id: {f:?}")))
            })
            .collect::<Result<_>>()?;
        let seq = TokenSequence::parse(ids, bins).map_err(|e| Error::parse(format!("{source}:{}", i + 1), e.to_string()))?;
        out.push(seq);
    }
    Ok(out)
}

pub fn write_tag_segments<W: Write>(mut w: W, segments: &[TagSegment]) -> Result<()> {
    for s in segments {
        writeln!(w, "{}", serde_json::to_string(s)?).map_err(write_err)?;
    }
    w.flush().map_err(write_err)
}

pub fn read_tag_segments<R: BufRead>(r: R, source: &str) -> Result<Vec<TagSegment>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(format!("{source}:{}", i + 1), e.to_string()))?);
    }
    Ok(out)
}

/// Binary (P5) 8-bit PGM.
pub fn write_pgm<W: Write>(mut w: W, frame: &GrayFrame) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", frame.width(), frame.height()).map_err(write_err)?;
    w.write_all(frame.pixels()).map_err(write_err)?;
    w.flush().map_err(write_err)
}

pub fn save_pgm(path: &Path, frame: &GrayFrame) -> Result<()> {
    write_pgm(create(path)?, frame)
}

/// Reads binary (P5) or ASCII (P2) PGM with maxval up to 255.
pub fn read_pgm(bytes: &[u8], source: &str) -> Result<GrayFrame> {
    let bad = |reason: &str| Error::parse(source.to_string(), reason.to_string());
    let mut pos = 0;
    let next_token = |pos: &mut usize| -> Option<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = next_token(&mut pos).ok_or_else(|| bad("empty file"))?;
    let number = |pos: &mut usize| -> Result<usize> {
        next_token(pos).and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad header"))
    };
    let width = number(&mut pos)?;
    let height = number(&mut pos)?;
    let maxval = number(&mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let count = width * height;
    let pixels: Vec<u8> = match magic.as_str() {
        "P5" => {
            let start = pos + 1;
            let data = bytes.get(start..start + count).ok_or_else(|| bad("truncated pixel data"))?;
            data.to_vec()
        }
        "P2" => (0..count).map(|_| number(&mut pos).map(|v| v.min(255) as u8)).collect::<Result<_>>()?,
        _ => return Err(bad("not a PGM file")),
    };
    let pixels = if maxval == 255 {
        pixels
    } else {
        pixels.iter().map(|&p| ((p as usize * 255 + maxval / 2) / maxval).min(255) as u8).collect()
    };
    GrayFrame::new(width, height, pixels)
}

pub fn load_pgm(path: &Path) -> Result<GrayFrame> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_pgm(&bytes, &path.display().to_string())
}

/// `frame,x,y,z,qw,qx,qy,qz` with shortest round-trip float formatting.
pub fn export_csv(traj: &Trajectory) -> String {
    let mut out = String::from("frame,x,y,z,qw,qx,qy,qz\n");
    for (i, p) in traj.poses().iter().enumerate() {
        let [qw, qx, qy, qz] = p.rotation.to_array();
        let t = p.translation;
        out.push_str(&format!("{i},{},{},{},{qw},{qx},{qy},{qz}\n", t.x, t.y, t.z));
    }
    out
}

/// Positions back from [`export_csv`] output.
pub fn import_csv_positions(text: &str) -> Result<Vec<Vec3>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::parse(format!("line {}", i + 1), format!("expected 8 columns, found {}", fields.len())));
        }
        let num = |k: usize| fields[k].parse::<f64>().map_err(|_| Error::parse(format!("line {}", i + 1), format!("bad number {:?}", fields[k])));
        out.push(Vec3::new(num(1)?, num(2)?, num(3)?));
    }
    Ok(out)
}

/// ASCII PLY: one vertex per pose with its frame index, joined by edges.
pub fn export_ply(traj: &Trajectory) -> String {
    let n = traj.len();
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {n}\nproperty double x\nproperty double y\nproperty double z\nproperty int frame\n\
         element edge {}\nproperty int vertex1\nproperty int vertex2\nend_header\n",
        n.saturating_sub(1)
    );
    for (i, p) in traj.poses().iter().enumerate() {
        let t = p.translation;
        out.push_str(&format!("{} {} {} {i}\n", t.x, t.y, t.z));
    }
    for i in 1..n {
        out.push_str(&format!("{} {i}\n", i - 1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trajectory {
        let k = Intrinsics::default();
        let poses = (0..3)
            .map(|i| CameraPose {
                rotation: UnitQuaternion::exp(&Vec3::new(0.0, 0.1 * i as f64, 0.0)),
                translation: Vec3::new(0.1 * i as f64, -1.0 / 3.0, 2.0),
                intrinsics: k,
            })
            .collect();
        Trajectory::new(poses, 24.0).unwrap()
    }

    #[test]
    fn trajectory_round_trip_is_exact() {
        let t = sample();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &t).unwrap();
        let back = read_trajectory(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, t);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("{\"format\":\"trajgen-trajectory\",\"version\":1,\"fps\":24.0}\n"));
        assert!(text.lines().nth(1).unwrap().contains("\"W\":512"));
    }

    #[test]
    fn trajectory_errors_name_the_line() {
        let text = "{\"format\":\"trajgen-trajectory\",\"version\":1,\"fps\":30}\n{\"q\":[1,0,0,0]}\n";
        let err = read_trajectory(text.as_bytes(), "x.jsonl").unwrap_err().to_string();
        assert!(err.contains("x.jsonl:2"), "{err}");
        assert!(read_trajectory("".as_bytes(), "e").is_err());
        let v2 = "{\"format\":\"trajgen-trajectory\",\"version\":2,\"fps\":30}\n";
        assert!(read_trajectory(v2.as_bytes(), "v").unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn tum_import_defaults_and_renormalization() {
        let text = "# comment\n0.0 1 2 3 0 0 0 1\n0.5 1 2 4 0 0 0 1.01\n1.0 1 2 5 0 0 0 1.0005\n";
        let imp = read_tum(text.as_bytes(), "t.txt", Intrinsics::default()).unwrap();
        assert_eq!(imp.trajectory.len(), 3);
        assert_eq!(imp.trajectory.fps(), 2.0);
        assert_eq!(imp.warnings.len(), 1);
        assert!(imp.warnings[0].starts_with("t.txt:3"));
        let k = imp.trajectory.poses()[0].intrinsics;
        assert_eq!((k.fx, k.fy, k.cx, k.cy, k.width, k.height), (512.0, 512.0, 256.0, 256.0, 512, 512));
        assert!((imp.trajectory.poses()[1].rotation.w() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tum_errors() {
        let k = Intrinsics::default();
        assert!(read_tum("".as_bytes(), "e", k).is_err());
        let err = read_tum("0 1 2 3 0 0 0 1\n1 1 2\n".as_bytes(), "f", k).unwrap_err().to_string();
        assert!(err.contains("f:2"), "{err}");
        assert!(read_tum("0 a 2 3 0 0 0 1\n".as_bytes(), "f", k).is_err());
    }

    #[test]
    fn tum_round_trip() {
        let t = sample();
        let mut buf = Vec::new();
        write_tum(&mut buf, &t).unwrap();
        let back = read_tum(buf.as_slice(), "m", Intrinsics::default()).unwrap().trajectory;
        assert_eq!(back.positions(), t.positions());
        assert!((back.fps() - 24.0).abs() < 1e-9);
    }

    #[test]
    fn token_lines_round_trip_and_offsets() {
        let seq = TokenSequence::parse(vec![257, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 258], 256).unwrap();
        let mut buf = Vec::new();
        write_token_lines(&mut buf, &[seq.clone(), seq.clone()]).unwrap();
        let back = read_token_lines(buf.as_slice(), "tok", 256).unwrap();
        assert_eq!(back, vec![seq.clone(), seq]);
        let err = read_token_lines("257 1 x 258\n".as_bytes(), "tok", 256).unwrap_err().to_string();
        assert!(err.contains("tok:1 offset 2"), "{err}");
        let err = read_token_lines("257 1 2 258\n".as_bytes(), "tok", 256).unwrap_err().to_string();
        assert!(err.contains("offset 3"), "{err}");
    }

    #[test]
    fn pgm_round_trip_and_ascii() {
        let f = GrayFrame::new(3, 2, vec![0, 50, 100, 150, 200, 255]).unwrap();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &f).unwrap();
        assert_eq!(read_pgm(&buf, "m").unwrap(), f);
        let ascii = b"P2\n# c\n3 2\n255\n0 50 100\n150 200 255\n";
        assert_eq!(read_pgm(ascii, "a").unwrap(), f);
        assert!(read_pgm(b"P5\n3 2\n255\n\x00", "t").is_err());
    }

    #[test]
    fn csv_export_round_trips_positions() {
        let t = sample();
        let csv = export_csv(&t);
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(import_csv_positions(&csv).unwrap(), t.positions());
    }

    #[test]
    fn ply_has_one_vertex_per_pose() {
        let ply = export_ply(&sample());
        assert!(ply.contains("element vertex 3\n"));
        assert!(ply.contains("element edge 2\n"));
        let body: Vec<&str> = ply.split("end_header\n").nth(1).unwrap().lines().collect();
        assert_eq!(body.len(), 5);
        assert!(body[2].ends_with(" 2"));
    }
}
