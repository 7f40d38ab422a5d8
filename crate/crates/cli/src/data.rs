use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use trajgen_core::geometry::{CameraPose, Intrinsics, Trajectory};
use trajgen_core::io::{
    export_csv, export_ply, load_trajectory, read_token_lines, read_tum, save_trajectory, write_tag_segments, write_token_lines,
};
use trajgen_core::preprocess::{clean_trajectory, kalman_smooth, resample_fixed};
use trajgen_core::synth::{build_dataset, MANIFEST_FILE};
use trajgen_core::tagging::{caption_from_tags, tag_segments, CaptionStyle};
use trajgen_core::tokenizer::{decode_trajectory, tokenize as encode, CodecConfig};

use crate::config::Config;
use crate::{
    CaptionArgs, CodecArgs, DetokenizeArgs, ExportArgs, ExportFormat, InputFormat, PreprocessArgs, Shortfall, Style, SynthArgs,
    TagArgs, TokenizeArgs,
};

/// Writes to `path`, or to stdout when it is `None`.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            let mut out = io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

pub fn synth(cfg: &Config, a: SynthArgs) -> Result<()> {
    let mut sc = cfg.synth.clone();
    if let Some(f) = a.frames {
        sc.frames = f;
    }
    if let Some(s) = a.frame_size {
        sc.frame_size = s;
    }
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    let manifest = build_dataset(a.count, &sc, &a.out)?;
    log::info!("{} records, config hash {}", manifest.records.len(), manifest.config_hash);
    println!("{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn read_raw(path: &Path, format: InputFormat) -> Result<Trajectory> {
    let tum = match format {
        InputFormat::Tum => true,
        InputFormat::Native => false,
        InputFormat::Auto => matches!(path.extension().and_then(|e| e.to_str()), Some("tum" | "txt")),
    };
    if !tum {
        return Ok(load_trajectory(path)?);
    }
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let import = read_tum(BufReader::new(file), &path.display().to_string(), Intrinsics::default())?;
    for w in &import.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(import.trajectory)
}

fn with_positions(traj: &Trajectory, positions: &[trajgen_core::geometry::Vec3]) -> Result<Trajectory> {
    let poses: Vec<CameraPose> =
        traj.poses().iter().zip(positions).map(|(p, &t)| CameraPose { translation: t, ..*p }).collect();
    Ok(Trajectory::new(poses, traj.fps())?)
}

pub fn preprocess(cfg: &Config, a: PreprocessArgs) -> Result<()> {
    let mut cleaning = cfg.cleaning;
    if let Some(v) = a.alpha {
        cleaning.alpha = v;
    }
    if let Some(v) = a.percentile {
        cleaning.percentile = v;
    }
    if let Some(v) = a.min_segment {
        cleaning.min_segment = v;
    }
    let mut kalman = cfg.kalman;
    if let Some(s) = &a.kalman_sigmas {
        if s.len() != 2 {
            bail!("--kalman-sigmas takes two values: process,measurement");
        }
        kalman.process_sigma = s[0];
        kalman.measurement_sigma = s[1];
    }
    kalman.validate()?;

    let traj = read_raw(&a.input, a.format)?;
    let segments = clean_trajectory(&traj, &cleaning)?;
    if segments.is_empty() {
        return Err(Shortfall(format!("{}: no segment of at least {} frames survived cleaning", a.input.display(), cleaning.min_segment)).into());
    }
    let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("trajectory");
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (k, range) in segments.iter().enumerate() {
        let seg = Trajectory::new(traj.poses()[range.clone()].to_vec(), traj.fps())?;
        let smoothed = with_positions(&seg, &kalman_smooth(&seg.positions(), &kalman)?)?;
        let out = match a.resample {
            Some(n) => resample_fixed(&smoothed, n)?,
            None => smoothed,
        };
        let path = a.out_dir.join(format!("{stem}_seg{k}.jsonl"));
        save_trajectory(&path, &out)?;
        log::info!("segment {k}: frames {}..{} -> {} poses", range.start, range.end, out.len());
        println!("{}", path.display());
    }
    Ok(())
}

pub fn tag(cfg: &Config, a: TagArgs) -> Result<()> {
    let traj = load_trajectory(&a.input)?;
    let segments = tag_segments(&traj, &cfg.tagging)?;
    let mut buf = Vec::new();
    write_tag_segments(&mut buf, &segments)?;
    emit(a.out.as_deref(), &buf)
}

pub fn caption(cfg: &Config, a: CaptionArgs) -> Result<()> {
    let traj = load_trajectory(&a.input)?;
    let style = match a.style {
        Style::Sentence => CaptionStyle::Sentence,
        Style::Terse => CaptionStyle::Terse,
    };
    println!("{}", caption_from_tags(&tag_segments(&traj, &cfg.tagging)?, style)?);
    Ok(())
}

fn codec(cfg: &Config, a: &CodecArgs) -> Result<CodecConfig> {
    let mut c = cfg.model.codec();
    if let Some(b) = a.bins {
        c.bins = b;
    }
    if let Some(n) = a.len {
        c.traj_len = n;
    }
    c.validate()?;
    Ok(c)
}

pub fn tokenize(cfg: &Config, a: TokenizeArgs) -> Result<()> {
    let codec = codec(cfg, &a.codec)?;
    let mut seqs = Vec::with_capacity(a.inputs.len());
    for path in &a.inputs {
        let mut traj = load_trajectory(path)?;
        if traj.len() != codec.traj_len {
            log::warn!("{}: resampling {} poses to {}", path.display(), traj.len(), codec.traj_len);
            traj = resample_fixed(&traj, codec.traj_len)?;
        }
        seqs.push(encode(&traj, &codec).with_context(|| path.display().to_string())?);
    }
    let mut buf = Vec::new();
    write_token_lines(&mut buf, &seqs)?;
    emit(a.out.as_deref(), &buf)
}

pub fn detokenize(cfg: &Config, a: DetokenizeArgs) -> Result<()> {
    let codec = codec(cfg, &a.codec)?;
    let file = fs::File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let seqs = read_token_lines(BufReader::new(file), &a.input.display().to_string(), codec.bins)?;
    if seqs.is_empty() {
        return Err(Shortfall(format!("{}: no token lines", a.input.display())).into());
    }
    let targets: Vec<PathBuf> = match (&a.out, &a.out_dir) {
        (Some(out), _) => {
            if seqs.len() != 1 {
                bail!("{} holds {} sequences; use --out-dir", a.input.display(), seqs.len());
            }
            vec![out.clone()]
        }
        (None, Some(dir)) => (0..seqs.len()).map(|k| dir.join(format!("seq_{k:05}.jsonl"))).collect(),
        (None, None) => unreachable!("clap requires one of --out/--out-dir"),
    };
    for (k, (seq, path)) in seqs.iter().zip(&targets).enumerate() {
        let decoded = decode_trajectory(seq, &codec).with_context(|| format!("line {}", k + 1))?;
        for w in &decoded.warnings {
            eprintln!("warning: line {}: {w}", k + 1);
        }
        save_trajectory(path, &decoded.trajectory)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn export(a: ExportArgs) -> Result<()> {
    let traj = load_trajectory(&a.input)?;
    let text = match a.format {
        ExportFormat::Csv => export_csv(&traj),
        ExportFormat::PlyPolyline => export_ply(&traj),
    };
    emit(a.out.as_deref(), text.as_bytes())
}

/// Trajectory files directly inside `dir`, sorted by name.
pub fn trajectory_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "jsonl") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}
