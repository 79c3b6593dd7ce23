//! The commands behind the `pandiff` binary: data generation, training,
//! sampling, evaluation and ablation grids.

mod ablate;
pub mod config;
pub mod data;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use ablate::{ablation_csv, ablation_table, cmd_ablate, trend, AblationRow, GridSpec, Trend};
pub use config::{DataOptions, EvalOptions, Precision, RunConfig, VideoOptions};
pub use data::{load_mask, read_manifest, write_manifest, LoadedSet, ManifestRow, MANIFEST};

use crate::denoiser::Denoiser;
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::error::{config, invalid, PathContext, Result};
use crate::imageio::{colorize, overlay, RgbImage};
use crate::mask::PanopticMask;
use crate::metrics::default_boundary_radius;
use crate::metrics::{
    pq_csv, pq_table, video_csv, video_scores, video_table, PqReport, PqStats, VideoScores,
};
use crate::pipeline::{mix_seed, segment_image, segment_video, Trajectory, VideoSamplerConfig};
use crate::scalar::Scalar;
use crate::scenes::{gen_scene, gen_video, Split};
use crate::train::{load_checkpoint, read_log, save_checkpoint, LogRow, TrainLog, TrainState};

/// Blend factor of the mask palette in PNG overlays.
pub const OVERLAY_ALPHA: f64 = 0.5;
pub const TRAIN_LOG: &str = "train_log.csv";
pub const LAST_CHECKPOINT: &str = "last.bpck";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.bpck")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GendataArgs {
    pub out: PathBuf,
    pub split: Split,
    /// Number of images (or videos); `None` takes the size from the config.
    pub size: Option<usize>,
    pub video: bool,
}

/// Writes a deterministic dataset with `images/`, `masks/` and a manifest.
pub fn cmd_gendata(cfg: &RunConfig, args: &GendataArgs) -> Result<Vec<ManifestRow>> {
    cfg.validate()?;
    let d = &cfg.data;
    let size = args.size.unwrap_or(match (args.split, args.video) {
        (Split::Train, false) => d.train_size,
        (Split::Val, false) => d.val_size,
        (Split::Train, true) => d.train_videos,
        (Split::Val, true) => d.val_videos,
    });
    std::fs::create_dir_all(&args.out).at(&args.out)?;
    let mut rows = Vec::new();
    let mut put = |stem: String,
                   index: u64,
                   video: Option<u64>,
                   frame: Option<usize>,
                   img: &RgbImage,
                   mask: &PanopticMask| {
        let row = ManifestRow {
            index,
            video,
            frame,
            image: format!("images/{stem}.ppm"),
            mask: format!("masks/{stem}.panm"),
        };
        data::save_ppm(&args.out.join(&row.image), img)?;
        data::save_mask(&args.out.join(&row.mask), mask)?;
        rows.push(row);
        Result::Ok(())
    };
    if args.video {
        let vcfg = cfg.video_scene();
        for v in 0..size as u64 {
            let idx = args.split.index(v);
            let video = gen_video(&vcfg, idx);
            for (f, (img, mask)) in video.frames.iter().zip(&video.masks).enumerate() {
                put(
                    format!("v{v:05}_f{f:02}"),
                    idx,
                    Some(idx),
                    Some(f),
                    img,
                    mask,
                )?;
            }
        }
    } else {
        for i in 0..size as u64 {
            let idx = args.split.index(i);
            let (img, mask) = gen_scene(&cfg.scene, idx);
            put(format!("{i:05}"), idx, None, None, &img, &mask)?;
        }
    }
    write_manifest(&args.out, &rows)?;
    cfg.dump(&args.out)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Video mode: image checkpoint whose EMA weights start the fine-tune.
    pub init: Option<PathBuf>,
    pub video: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub step: u64,
    pub rows: Vec<LogRow>,
    pub checkpoint: PathBuf,
}

pub fn load_state<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let file = File::open(path).at(path)?;
    load_checkpoint(BufReader::new(file)).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn save_state<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut w = BufWriter::new(File::create(&tmp).at(&tmp)?);
    save_checkpoint(state, &mut w)?;
    w.flush().at(&tmp)?;
    drop(w);
    std::fs::rename(&tmp, path).at(path)
}

/// Network to sample with: EMA weights when `use_ema`, raw ones otherwise.
pub fn load_net<T: Scalar>(path: &Path, use_ema: bool) -> Result<Denoiser<T>> {
    let state = load_state::<T>(path)?;
    Ok(if use_ema { state.ema_net() } else { state.net })
}

/// Trains on the dataset in `data`, writing checkpoints and `train_log.csv`
/// into `out`. Resuming truncates the log to the checkpoint's step, so an
/// interrupted and resumed run leaves the same log as an uninterrupted one.
pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_impl::<f32>(cfg, args),
        Precision::F64 => train_impl::<f64>(cfg, args),
    }
}

fn train_impl<T: Scalar>(cfg: &RunConfig, args: &TrainArgs) -> Result<TrainOutcome> {
    let set = LoadedSet::load(&args.data)?;
    let (tcfg, net_cfg) = if args.video {
        let mut n = cfg.net;
        n.past_frames = cfg.video.past_frames;
        (cfg.video.train, n)
    } else {
        (cfg.train, cfg.net)
    };
    let samples = if args.video {
        set.video_samples::<T>(net_cfg.past_frames)?
    } else {
        set.image_samples::<T>()
    };
    std::fs::create_dir_all(&args.out).at(&args.out)?;
    cfg.dump(&args.out)?;
    let log_path = args.out.join(TRAIN_LOG);
    let (mut state, mut rows) = match &args.resume {
        Some(path) => {
            let state = load_state::<T>(path)?;
            if *state.net.config() != net_cfg {
                return Err(config(format!(
                    "{}: network config differs from the run config",
                    path.display()
                )));
            }
            let same = crate::train::TrainConfig {
                checkpoint_every: tcfg.checkpoint_every,
                ..state.config
            };
            if same != tcfg {
                return Err(config(format!(
                    "{}: training config differs from the run config",
                    path.display()
                )));
            }
            let state = TrainState {
                config: tcfg,
                ..state
            };
            let previous = match File::open(&log_path) {
                Ok(f) => read_log(BufReader::new(f))?,
                Err(_) => Vec::new(),
            };
            let kept: Vec<LogRow> = previous
                .into_iter()
                .filter(|r| r.step < state.step)
                .collect();
            (state, kept)
        }
        None => {
            let net = if args.video {
                let init = args.init.as_ref().ok_or_else(|| {
                    config("video training needs an image checkpoint to start from (--init)")
                })?;
                let image_net = load_net::<T>(init, true)?;
                if image_net.config().past_frames != 0 {
                    return Err(config(format!(
                        "{}: expected an image checkpoint",
                        init.display()
                    )));
                }
                let mut expect = net_cfg;
                expect.past_frames = 0;
                if *image_net.config() != expect {
                    return Err(config(format!(
                        "{}: network config differs from the run config",
                        init.display()
                    )));
                }
                image_net.with_past_frames(net_cfg.past_frames)?
            } else {
                Denoiser::new(net_cfg, tcfg.seed)?
            };
            (TrainState::new(tcfg, net)?, Vec::new())
        }
    };
    let file = File::create(&log_path).at(&log_path)?;
    let mut log = TrainLog::new(BufWriter::new(file), true);
    for r in &rows {
        log.append(r)?;
    }
    let every = tcfg.checkpoint_every;
    state.fit(&samples, |s, row| {
        log.append(row)?;
        rows.push(*row);
        if every > 0 && s.step % every == 0 {
            save_state(s, &args.out.join(checkpoint_name(s.step)))?;
        }
        Ok(())
    })?;
    let checkpoint = args.out.join(LAST_CHECKPOINT);
    save_state(&state, &checkpoint)?;
    Ok(TrainOutcome {
        step: state.step,
        rows,
        checkpoint,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    /// A dataset directory with a manifest, a directory of `.ppm` files, or one `.ppm` file.
    pub input: PathBuf,
    pub out: PathBuf,
    pub video: bool,
    /// Sampling steps whose intermediate predictions are written out.
    pub trajectory_steps: Vec<usize>,
    pub overlays: bool,
}

fn sample_inputs(input: &Path) -> Result<(PathBuf, Vec<ManifestRow>)> {
    if input.is_file() {
        let dir = input
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        let name = input
            .file_name()
            .expect("file has a name")
            .to_string_lossy()
            .into_owned();
        let stem = input
            .file_stem()
            .expect("file has a stem")
            .to_string_lossy()
            .into_owned();
        let row = ManifestRow {
            index: 0,
            video: None,
            frame: None,
            image: name,
            mask: format!("{stem}.panm"),
        };
        return Ok((dir, vec![row]));
    }
    if input.join(MANIFEST).exists() {
        return Ok((input.to_path_buf(), read_manifest(input)?));
    }
    let mut names: Vec<String> = std::fs::read_dir(input)
        .at(input)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(invalid(format!(
            "{}: no manifest and no .ppm images",
            input.display()
        )));
    }
    let rows = names
        .into_iter()
        .enumerate()
        .map(|(i, n)| ManifestRow {
            index: i as u64,
            video: None,
            frame: None,
            mask: format!("{}.panm", n.trim_end_matches(".ppm")),
            image: n,
        })
        .collect();
    Ok((input.to_path_buf(), rows))
}

/// Per-image sampling seed. Frames of a video share an index, so the frame
/// number is mixed in as well.
fn image_seed(seed: u64, row: &ManifestRow) -> u64 {
    let s = mix_seed(seed, row.index);
    row.frame.map_or(s, |f| mix_seed(s, f as u64))
}

fn stem_of(rel: &str) -> String {
    Path::new(rel)
        .file_stem()
        .map_or_else(|| rel.to_string(), |s| s.to_string_lossy().into_owned())
}

/// Samples one mask per input image, written under the input's relative mask
/// name in `out`, plus an overlay PNG per image and a manifest. Each image
/// (or video) gets its own seed derived from the sampler seed and its index,
/// so outputs do not depend on which other inputs are present.
pub fn cmd_sample(cfg: &RunConfig, args: &SampleArgs) -> Result<Vec<ManifestRow>> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => sample_impl::<f32>(cfg, args),
        Precision::F64 => sample_impl::<f64>(cfg, args),
    }
}

fn sample_impl<T: Scalar>(cfg: &RunConfig, args: &SampleArgs) -> Result<Vec<ManifestRow>> {
    let net = load_net::<T>(&args.checkpoint, cfg.eval.use_ema)?;
    let (dir, rows) = sample_inputs(&args.input)?;
    std::fs::create_dir_all(&args.out).at(&args.out)?;
    cfg.dump(&args.out)?;
    let schedule = cfg.train.schedule;
    let mut images = Vec::with_capacity(rows.len());
    for r in &rows {
        images.push(data::load_ppm(&dir.join(&r.image))?);
    }
    let mut masks: Vec<Option<PanopticMask>> = vec![None; rows.len()];
    if args.video {
        let set = LoadedSet {
            dir: dir.clone(),
            rows: rows.clone(),
            images: Vec::new(),
            masks: Vec::new(),
        };
        for video in set.videos()? {
            let vid = rows[video[0]].video.expect("grouped by video");
            let vcfg = VideoSamplerConfig {
                seed: mix_seed(cfg.video.sampler.seed, vid),
                ..cfg.video.sampler
            };
            let frames: Vec<RgbImage> = video.iter().map(|&i| images[i].clone()).collect();
            for (&i, m) in video
                .iter()
                .zip(segment_video(&net, &frames, &vcfg, &schedule)?)
            {
                masks[i] = Some(m);
            }
        }
    } else {
        for (i, r) in rows.iter().enumerate() {
            let sampler = SamplerConfig {
                seed: image_seed(cfg.sampler.seed, r),
                ..cfg.sampler
            };
            let mut traj = Trajectory::new();
            let want = !args.trajectory_steps.is_empty();
            let m = segment_image(
                &net,
                &images[i],
                &sampler,
                &schedule,
                cfg.eval.min_pixels,
                want.then_some(&mut traj),
            )?;
            for (step, tm) in traj
                .iter()
                .filter(|(s, _)| args.trajectory_steps.contains(s))
            {
                let base = args
                    .out
                    .join("trajectory")
                    .join(format!("{}_step{step:03}", stem_of(&r.mask)));
                data::save_mask(&base.with_extension("panm"), tm)?;
                data::save_png(&base.with_extension("png"), &colorize(tm))?;
            }
            masks[i] = Some(m);
        }
    }
    let mut out_rows = Vec::with_capacity(rows.len());
    for ((r, img), m) in rows.iter().zip(&images).zip(masks) {
        let m = m.expect("every input sampled");
        data::save_mask(&args.out.join(&r.mask), &m)?;
        if args.overlays {
            let png = args
                .out
                .join("overlays")
                .join(format!("{}.png", stem_of(&r.mask)));
            data::save_png(&png, &overlay(img, &m, OVERLAY_ALPHA)?)?;
        }
        out_rows.push(ManifestRow {
            image: dir.join(&r.image).to_string_lossy().into_owned(),
            ..r.clone()
        });
    }
    write_manifest(&args.out, &out_rows)?;
    Ok(out_rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Pq,
    Jf,
    Track,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalReport {
    Pq(PqReport),
    /// Per-video scores and the pooled dataset scores.
    Video {
        videos: Vec<(u64, VideoScores)>,
        pooled: VideoScores,
    },
}

/// Ground-truth masks and the predictions stored under the same relative names.
fn paired_masks(
    pred_dir: &Path,
    gt_dir: &Path,
) -> Result<(Vec<ManifestRow>, Vec<PanopticMask>, Vec<PanopticMask>)> {
    let rows = read_manifest(gt_dir)?;
    let mut preds = Vec::with_capacity(rows.len());
    let mut gts = Vec::with_capacity(rows.len());
    for r in &rows {
        let p = pred_dir.join(&r.mask);
        if !p.exists() {
            return Err(invalid(format!(
                "missing prediction {} for ground truth {}",
                p.display(),
                r.mask
            )));
        }
        preds.push(load_mask(&p)?);
        gts.push(load_mask(&gt_dir.join(&r.mask))?);
    }
    Ok((rows, preds, gts))
}

/// Scores predictions in `pred_dir` against the dataset in `gt_dir` and
/// writes `report_{mode}.csv` and `report_{mode}.txt` into `out`.
pub fn cmd_eval(
    cfg: &RunConfig,
    pred_dir: &Path,
    gt_dir: &Path,
    mode: EvalMode,
    out: &Path,
) -> Result<EvalReport> {
    let (rows, preds, gts) = paired_masks(pred_dir, gt_dir)?;
    let (name, csv, table, report) = match mode {
        EvalMode::Pq => {
            let is_thing = cfg.scene.is_thing();
            let mut stats = PqStats::default();
            for (p, g) in preds.iter().zip(&gts) {
                stats.add_image(p, g, &is_thing)?;
            }
            let r = stats.report(&is_thing);
            let labelled = vec![("all".to_string(), r.clone())];
            (
                "pq",
                pq_csv(&labelled)?,
                pq_table(&labelled),
                EvalReport::Pq(r),
            )
        }
        EvalMode::Jf | EvalMode::Track => {
            let set = LoadedSet {
                dir: gt_dir.to_path_buf(),
                rows: rows.clone(),
                images: Vec::new(),
                masks: Vec::new(),
            };
            let mut videos = Vec::new();
            for video in set.videos()? {
                let p: Vec<PanopticMask> = video.iter().map(|&i| preds[i].clone()).collect();
                let g: Vec<PanopticMask> = video.iter().map(|&i| gts[i].clone()).collect();
                let radius = cfg
                    .eval
                    .boundary_radius
                    .unwrap_or_else(|| default_boundary_radius(g[0].height(), g[0].width()));
                let id = rows[video[0]].video.expect("grouped by video");
                videos.push((id, video_scores(&p, &g, radius)?));
            }
            let pooled = VideoScores::pool(&videos.iter().map(|(_, v)| *v).collect::<Vec<_>>());
            let mut labelled: Vec<(String, VideoScores)> = videos
                .iter()
                .map(|(id, v)| (format!("video {id}"), *v))
                .collect();
            labelled.push(("mean".to_string(), pooled));
            let track = mode == EvalMode::Track;
            let name = if track { "track" } else { "jf" };
            (
                name,
                video_csv(&labelled, track)?,
                video_table(&labelled, track),
                EvalReport::Video { videos, pooled },
            )
        }
    };
    std::fs::create_dir_all(out).at(out)?;
    let csv_path = out.join(format!("report_{name}.csv"));
    std::fs::write(&csv_path, csv).at(&csv_path)?;
    let txt_path = out.join(format!("report_{name}.txt"));
    std::fs::write(&txt_path, table).at(&txt_path)?;
    cfg.dump(out)?;
    Ok(report)
}

/// PQ of `net` on in-memory `(index, image, gt)` triples, seeding each image
/// from its index.
pub fn evaluate_pq<T: Scalar>(
    net: &Denoiser<T>,
    samples: &[(u64, RgbImage, PanopticMask)],
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    min_pixels: usize,
    is_thing: &[bool],
) -> Result<PqReport> {
    let mut stats = PqStats::default();
    for (index, image, gt) in samples {
        let sc = SamplerConfig {
            seed: mix_seed(sampler.seed, *index),
            ..*sampler
        };
        let m = segment_image(net, image, &sc, schedule, min_pixels, None)?;
        stats.add_image(&m, gt, is_thing)?;
    }
    Ok(stats.report(is_thing))
}
