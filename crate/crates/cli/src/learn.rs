use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use trajgen_core::geometry::Trajectory;
use trajgen_core::io::{load_pgm, save_trajectory};
use trajgen_core::metrics::ContrastiveHead;
use trajgen_core::model::{
    evaluate, generate_batch, load_checkpoint, prepare_examples, save_checkpoint, train as fit, ConditionInput, EpochStats, Grid, Model,
    TrainState,
};
use trajgen_core::synth::{record_seed, DatasetManifest, Split};
use trajgen_core::tagging::{caption_from_tags, tag_segments, CaptionStyle, TagThresholds};
use trajgen_core::tokenizer::decode_trajectory;

use crate::config::{parse_sampler, Config};
use crate::{ClipTrainArgs, GenerateArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";

fn loss_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,mean_ce,reg_term\n");
    for h in history {
        let _ = writeln!(s, "{},{},{}", h.epoch, h.mean_ce, h.reg_term);
    }
    s
}

pub fn train(cfg: &Config, a: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let (mut model, mut state, mut sched) = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let state = ck.state.ok_or_else(|| anyhow!("{} holds no optimizer state and cannot be resumed", path.display()))?;
            let sched = ck.schedule.unwrap_or_else(|| cfg.schedule.clone());
            if a.rgbd && !ck.model.config().rgbd {
                bail!("--rgbd cannot be added when resuming a text-only checkpoint");
            }
            log::info!("resuming {} at epoch {}", path.display(), state.epoch);
            (ck.model, state, sched)
        }
        None => {
            let mut mc = cfg.model.clone();
            mc.rgbd |= a.rgbd;
            if let Some(s) = a.seed {
                mc.seed = s;
            }
            let model = Model::<f32>::new(mc)?;
            let state = TrainState::new(&model);
            let mut sched = cfg.schedule.clone();
            if let Some(s) = a.seed {
                sched.seed = s;
            }
            (model, state, sched)
        }
    };
    if let Some(e) = a.epochs {
        sched.epochs = e;
    }
    if let Some(lr) = a.lr {
        sched.lr = lr;
    }
    if let Some(t) = a.target_ce {
        sched.target_ce = t;
    }
    sched.validate()?;

    let examples = prepare_examples(&manifest, model.config(), &[Split::Train])?;
    log::info!("{} training examples, {} parameters", examples.len(), model.params().size());
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let ckpt = a.out_dir.join(CHECKPOINT_FILE);
    let loss = a.out_dir.join(LOSS_FILE);
    let every = a.checkpoint_every;
    let outcome = fit(&mut model, &examples, &sched, &mut state, |m, s, stats| {
        eprintln!("epoch {:>4}  mean_ce {:.4}  reg {:.3e}", stats.epoch, stats.mean_ce, stats.reg_term);
        if every > 0 && s.epoch % every == 0 {
            save_checkpoint(&ckpt, m, Some(&sched), Some(s))?;
            fs::write(&loss, loss_csv(&s.history)).map_err(|e| trajgen_core::Error::Io { path: loss.clone(), source: e })?;
        }
        Ok(())
    })?;
    save_checkpoint(&ckpt, &model, Some(&sched), Some(&state))?;
    fs::write(&loss, loss_csv(&outcome.history)).with_context(|| format!("writing {}", loss.display()))?;
    if let Some(ce) = outcome.converged_ce {
        log::info!("reached target cross-entropy: {ce:.4}");
    }
    if let Ok(val) = prepare_examples(&manifest, model.config(), &[Split::Val]) {
        let stats = evaluate(&model, &val)?;
        eprintln!("validation mean_ce {:.4}", stats.mean_ce);
    }
    println!("{}", ckpt.display());
    Ok(())
}

fn load_grids(image: &Path, depth: &Path) -> Result<(Grid, Grid)> {
    Ok((Grid::image_from_gray(&load_pgm(image)?), Grid::depth_from_gray(&load_pgm(depth)?)))
}

/// Caption recovered from a trajectory's own motion tags.
pub fn recovered_caption(traj: &Trajectory, th: &TagThresholds) -> String {
    match tag_segments(traj, th).and_then(|s| caption_from_tags(&s, CaptionStyle::Sentence)) {
        Ok(c) => c,
        Err(e) => format!("(untagged: {e})"),
    }
}

struct Job {
    name: String,
    condition: ConditionInput,
    seed: u64,
}

pub fn generate(cfg: &Config, a: GenerateArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?.model;
    let sampler = parse_sampler(a.sampler.as_deref().unwrap_or(&cfg.generate.sampler))?;
    let temperature = a.temperature.unwrap_or(cfg.generate.temperature);
    let seed = a.seed.unwrap_or(cfg.generate.seed);
    sampler.validate(temperature)?;
    if a.count == 0 {
        bail!("--count must be positive");
    }

    let jobs: Vec<Job> = match (&a.caption, &a.manifest) {
        (Some(text), _) => {
            let (image, depth) = match &a.rgbd {
                Some(p) => {
                    let (i, d) = load_grids(&p[0], &p[1])?;
                    (Some(i), Some(d))
                }
                None => (None, None),
            };
            vec![Job { name: "generated".into(), condition: ConditionInput { text: text.clone(), image, depth }, seed }]
        }
        (None, Some(path)) => {
            let manifest = DatasetManifest::load(path)?;
            let rgbd = model.config().rgbd;
            manifest
                .split(a.split.into())
                .enumerate()
                .map(|(k, r)| {
                    let (image, depth) = match (&r.frame, rgbd) {
                        (Some(f), true) => {
                            let (i, d) = load_grids(&manifest.resolve(&f.image), &manifest.resolve(&f.depth))?;
                            (Some(i), Some(d))
                        }
                        (None, true) => bail!("record {} has no frames but the checkpoint was trained with RGBD", r.id),
                        _ => (None, None),
                    };
                    Ok(Job { name: r.id.clone(), condition: ConditionInput { text: r.caption.clone(), image, depth }, seed: record_seed(seed, k as u64) })
                })
                .collect::<Result<_>>()?
        }
        (None, None) => unreachable!("clap requires --caption or --manifest"),
    };
    if jobs.is_empty() {
        return Err(crate::Shortfall("no records in the requested split".into()).into());
    }

    let single = a.caption.is_some() && a.count == 1;
    if !single {
        fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    }
    let codec = model.config().codec();
    let mut written: Vec<(PathBuf, String)> = Vec::new();
    for job in &jobs {
        let latent = model.encode(&job.condition)?;
        let seqs = generate_batch(&model, &latent, a.count, sampler, temperature, job.seed)?;
        let outputs: Vec<Result<(PathBuf, String)>> = seqs
            .par_iter()
            .enumerate()
            .map(|(j, seq)| {
                let decoded = decode_trajectory(seq, &codec)?;
                if !decoded.warnings.is_empty() {
                    log::warn!("{} sample {j}: {} of {} poses have inconsistent scale tokens", job.name, decoded.warnings.len(), decoded.trajectory.len());
                }
                let path = if single {
                    a.out.clone()
                } else if a.count == 1 {
                    a.out.join(format!("{}.jsonl", job.name))
                } else {
                    a.out.join(format!("{}_{j:03}.jsonl", job.name))
                };
                save_trajectory(&path, &decoded.trajectory)?;
                Ok((path, recovered_caption(&decoded.trajectory, &cfg.tagging)))
            })
            .collect();
        for o in outputs {
            written.push(o?);
        }
    }
    for (path, caption) in written {
        println!("{}\t{caption}", path.display());
    }
    Ok(())
}

pub fn clip_train(cfg: &Config, a: ClipTrainArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?.model;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let records: Vec<_> = manifest.split(a.split.into()).collect();
    if records.is_empty() {
        return Err(crate::Shortfall("no records in the requested split".into()).into());
    }
    let trajs: Vec<Trajectory> = records.par_iter().map(|r| manifest.load_trajectory(r)).collect::<trajgen_core::Result<_>>()?;
    let text: Vec<Vec<f64>> = records.par_iter().map(|r| model.text_embedding(&r.caption)).collect();
    let mut head = ContrastiveHead::new(text[0].len(), cfg.contrastive.clone())?;
    let losses = head.train(&text, &trajs)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        eprintln!("contrastive loss {first:.4} -> {last:.4} over {} steps", losses.len());
    }
    let json = serde_json::to_vec_pretty(&head)?;
    crate::data::emit(Some(&a.out), &json)?;
    println!("{}", a.out.display());
    Ok(())
}
