//! Two-channel panoptic masks: a semantic class and an instance id per pixel.
//!
//! Class `0` is the null class and instance `0` the null instance. Stuff
//! regions carry instance `0`; each thing instance carries an id in `1..=K`.

mod codec;
mod io;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

pub use codec::{analog_codebook, bit2int, decode_analog, encode_analog, int2bit, BitCodecConfig};
pub use io::{palette_color, read_mask, write_mask, MASK_MAGIC, MASK_VERSION};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("value {value} does not fit in {bits} bits")]
    OutOfRange { value: u32, bits: u32 },
    #[error("invalid mask: {0}")]
    Invalid(String),
    #[error("{found} instances present but at most {max} ids are available")]
    TooManyInstances { found: usize, max: usize },
    #[error("codec config: {0}")]
    Config(String),
    #[error("mask file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MaskError>;

/// Segment key: `(class, instance)`.
pub type SegmentId = (u16, u16);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticMask {
    height: usize,
    width: usize,
    num_classes: u16,
    max_instances: u16,
    classes: Vec<u16>,
    instances: Vec<u16>,
}

impl PanopticMask {
    pub fn new(
        height: usize,
        width: usize,
        num_classes: u16,
        max_instances: u16,
        classes: Vec<u16>,
        instances: Vec<u16>,
    ) -> Result<Self> {
        let n = height * width;
        if classes.len() != n || instances.len() != n {
            return Err(MaskError::Invalid(format!(
                "{height}x{width} mask needs {n} values per channel, got {} and {}",
                classes.len(),
                instances.len()
            )));
        }
        if num_classes == 0 {
            return Err(MaskError::Invalid(
                "at least the null class is required".into(),
            ));
        }
        for (i, (&c, &k)) in classes.iter().zip(&instances).enumerate() {
            if c >= num_classes {
                return Err(MaskError::Invalid(format!(
                    "pixel {i}: class {c} >= C={num_classes}"
                )));
            }
            if k > max_instances {
                return Err(MaskError::Invalid(format!(
                    "pixel {i}: instance {k} > K={max_instances}"
                )));
            }
            if c == 0 && k != 0 {
                return Err(MaskError::Invalid(format!(
                    "pixel {i}: null class with instance {k}"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            num_classes,
            max_instances,
            classes,
            instances,
        })
    }

    /// All-null mask.
    pub fn empty(height: usize, width: usize, num_classes: u16, max_instances: u16) -> Self {
        Self {
            height,
            width,
            num_classes,
            max_instances,
            classes: vec![0; height * width],
            instances: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn max_instances(&self) -> u16 {
        self.max_instances
    }

    pub fn classes(&self) -> &[u16] {
        &self.classes
    }

    pub fn instances(&self) -> &[u16] {
        &self.instances
    }

    pub fn get(&self, y: usize, x: usize) -> SegmentId {
        let i = y * self.width + x;
        (self.classes[i], self.instances[i])
    }

    /// Sets one pixel; a null class forces the null instance.
    pub fn set(&mut self, y: usize, x: usize, class: u16, instance: u16) {
        debug_assert!(class < self.num_classes && instance <= self.max_instances);
        let i = y * self.width + x;
        self.classes[i] = class;
        self.instances[i] = if class == 0 { 0 } else { instance };
    }

    /// Pixel count of every non-null segment.
    pub fn segment_areas(&self) -> BTreeMap<SegmentId, usize> {
        let mut areas = BTreeMap::new();
        for (&c, &k) in self.classes.iter().zip(&self.instances) {
            if c != 0 {
                *areas.entry((c, k)).or_insert(0) += 1;
            }
        }
        areas
    }

    /// Distinct nonzero instance ids.
    pub fn instance_ids(&self) -> BTreeSet<u16> {
        self.instances.iter().copied().filter(|&k| k != 0).collect()
    }

    /// Renames instance ids through `map` (ids missing from the map are kept).
    pub fn map_instances(&self, map: &BTreeMap<u16, u16>) -> Self {
        let mut out = self.clone();
        for k in out.instances.iter_mut() {
            if let Some(&to) = map.get(k) {
                *k = to;
            }
        }
        out
    }

    /// Clears instance ids on classes flagged as stuff (`is_thing[c] == false`).
    pub fn with_stuff_instances_cleared(&self, is_thing: &[bool]) -> Self {
        let mut out = self.clone();
        for (c, k) in out.classes.iter().zip(out.instances.iter_mut()) {
            if !is_thing.get(*c as usize).copied().unwrap_or(false) {
                *k = 0;
            }
        }
        out
    }

    /// Random injective relabelling of the present nonzero instance ids into
    /// `1..=K`. Null stays null; the pixel partition and classes are unchanged.
    pub fn permute_instance_ids<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self> {
        let map = random_instance_map(&self.instance_ids(), self.max_instances, rng)?;
        Ok(self.map_instances(&map))
    }

    /// Removes every thing segment (nonzero instance) smaller than `min_pixels`
    /// by setting its pixels to the null class and null instance.
    pub fn filter_small_instances(&self, min_pixels: usize) -> Self {
        let small: BTreeSet<SegmentId> = self
            .segment_areas()
            .into_iter()
            .filter(|&((_, k), area)| k != 0 && area < min_pixels)
            .map(|(id, _)| id)
            .collect();
        if small.is_empty() {
            return self.clone();
        }
        let mut out = self.clone();
        for (c, k) in out.classes.iter_mut().zip(out.instances.iter_mut()) {
            if small.contains(&(*c, *k)) {
                *c = 0;
                *k = 0;
            }
        }
        out
    }
}

/// Draws a random injective map from `ids` (nonzero) into `1..=max_instances`.
pub fn random_instance_map<R: Rng + ?Sized>(
    ids: &BTreeSet<u16>,
    max_instances: u16,
    rng: &mut R,
) -> Result<BTreeMap<u16, u16>> {
    let k = max_instances as usize;
    if ids.len() > k {
        return Err(MaskError::TooManyInstances {
            found: ids.len(),
            max: k,
        });
    }
    let targets = index::sample(rng, k, ids.len());
    Ok(ids
        .iter()
        .zip(targets.iter())
        .map(|(&from, to)| (from, to as u16 + 1))
        .collect())
}

/// Applies one shared random id relabelling to several masks (e.g. a video
/// frame and its conditioning frames), so correspondences survive.
pub fn permute_instance_ids_jointly<R: Rng + ?Sized>(
    masks: &[&PanopticMask],
    rng: &mut R,
) -> Result<Vec<PanopticMask>> {
    let Some(first) = masks.first() else {
        return Ok(Vec::new());
    };
    let ids: BTreeSet<u16> = masks.iter().flat_map(|m| m.instance_ids()).collect();
    let map = random_instance_map(&ids, first.max_instances, rng)?;
    Ok(masks.iter().map(|m| m.map_instances(&map)).collect())
}
