use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, PathContext, Result};
use crate::imageio::RgbImage;
use crate::mask::{read_mask, write_mask, PanopticMask};
use crate::scalar::Scalar;
use crate::train::TrainSample;

pub const MANIFEST: &str = "manifest.csv";

/// One sample on disk. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: u64,
    pub video: Option<u64>,
    pub frame: Option<usize>,
    pub image: String,
    pub mask: String,
}

pub fn write_manifest(dir: &Path, rows: &[ManifestRow]) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path).at(&path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(&path)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    let file = File::open(&path).at(&path)?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let rows: Vec<ManifestRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    Ok(rows)
}

pub fn save_mask(path: &Path, mask: &PanopticMask) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    let mut w = BufWriter::new(File::create(path).at(path)?);
    write_mask(mask, &mut w)?;
    std::io::Write::flush(&mut w).at(path)
}

pub fn load_mask(path: &Path) -> Result<PanopticMask> {
    let file = File::open(path).at(path)?;
    read_mask(BufReader::new(file)).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn save_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    let mut w = BufWriter::new(File::create(path).at(path)?);
    img.write_ppm(&mut w)?;
    std::io::Write::flush(&mut w).at(path)
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    img.write_png(BufWriter::new(File::create(path).at(path)?))
}

pub fn load_ppm(path: &Path) -> Result<RgbImage> {
    let file = File::open(path).at(path)?;
    RgbImage::read_ppm(BufReader::new(file))
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// A dataset directory read back into memory.
pub struct LoadedSet {
    pub dir: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub images: Vec<RgbImage>,
    pub masks: Vec<PanopticMask>,
}

impl LoadedSet {
    pub fn load(dir: &Path) -> Result<Self> {
        let rows = read_manifest(dir)?;
        let mut images = Vec::with_capacity(rows.len());
        let mut masks = Vec::with_capacity(rows.len());
        for r in &rows {
            images.push(load_ppm(&dir.join(&r.image))?);
            masks.push(load_mask(&dir.join(&r.mask))?);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            rows,
            images,
            masks,
        })
    }

    /// Row positions grouped by video, frames in order.
    pub fn videos(&self) -> Result<Vec<Vec<usize>>> {
        let mut groups: BTreeMap<u64, Vec<(usize, usize)>> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            let (Some(v), Some(f)) = (r.video, r.frame) else {
                return Err(invalid(format!(
                    "{}: manifest row {} is not a video frame",
                    self.dir.display(),
                    r.index
                )));
            };
            groups.entry(v).or_default().push((f, i));
        }
        Ok(groups
            .into_values()
            .map(|mut g| {
                g.sort_unstable();
                g.into_iter().map(|(_, i)| i).collect()
            })
            .collect())
    }

    /// Image training samples.
    pub fn image_samples<T: Scalar>(&self) -> Vec<TrainSample<T>> {
        self.images
            .iter()
            .zip(&self.masks)
            .map(|(img, m)| TrainSample {
                image: img.to_tensor(),
                mask: m.clone(),
                past: Vec::new(),
            })
            .collect()
    }

    /// One sample per video frame with the ground-truth masks of up to
    /// `past_frames` preceding frames.
    pub fn video_samples<T: Scalar>(&self, past_frames: usize) -> Result<Vec<TrainSample<T>>> {
        let mut out = Vec::with_capacity(self.rows.len());
        for video in self.videos()? {
            for (f, &i) in video.iter().enumerate() {
                let past = (1..=past_frames)
                    .map(|k| f.checked_sub(k).map(|j| self.masks[video[j]].clone()))
                    .collect();
                out.push(TrainSample {
                    image: self.images[i].to_tensor(),
                    mask: self.masks[i].clone(),
                    past,
                });
            }
        }
        Ok(out)
    }
}
