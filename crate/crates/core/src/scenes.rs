//! Deterministic synthetic scenes: flat shapes over one or two background
//! regions, with pixel-exact panoptic ground truth, and moving-shape videos.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::imageio::RgbImage;
use crate::mask::PanopticMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub is_thing: bool,
    /// Shapes rendered for a thing class; unused for stuff.
    #[serde(default)]
    pub shapes: Vec<ShapeKind>,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Index 0 is the null class and is never drawn.
    pub classes: Vec<ClassSpec>,
    pub max_instances: u16,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Bounding-box side range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Largest fraction of a new shape's box allowed to overlap earlier boxes.
    pub max_overlap: f64,
    /// Per-instance color offset range (each channel, in 0..255 units).
    pub instance_jitter: f64,
    /// Per-pixel gaussian noise standard deviation (0..255 units).
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let class = |name: &str, is_thing, shapes: &[ShapeKind], color| ClassSpec {
            name: name.into(),
            is_thing,
            shapes: shapes.to_vec(),
            color,
        };
        Self {
            height: 64,
            width: 64,
            classes: vec![
                class("null", false, &[], [0, 0, 0]),
                class("sky", false, &[], [150, 190, 230]),
                class("ground", false, &[], [120, 100, 70]),
                class(
                    "block",
                    true,
                    &[ShapeKind::Rectangle, ShapeKind::Triangle],
                    [220, 60, 50],
                ),
                class("ball", true, &[ShapeKind::Disk], [60, 190, 80]),
            ],
            max_instances: 8,
            min_shapes: 1,
            max_shapes: 4,
            min_size: 12,
            max_size: 24,
            max_overlap: 0.25,
            instance_jitter: 40.0,
            pixel_noise: 6.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 || self.classes.len() > usize::from(u16::MAX) {
            return Err(config("scenes: need the null class and at least one more"));
        }
        if !self.classes.iter().skip(1).any(|c| !c.is_thing) {
            return Err(config(
                "scenes: at least one stuff class is needed for the background",
            ));
        }
        if self.max_shapes > 0
            && !self
                .classes
                .iter()
                .any(|c| c.is_thing && !c.shapes.is_empty())
        {
            return Err(config(
                "scenes: shapes requested but no thing class has a shape kind",
            ));
        }
        if self.min_shapes > self.max_shapes || self.max_shapes > usize::from(self.max_instances) {
            return Err(config(format!(
                "scenes: shape count range {}..={} must fit in K = {}",
                self.min_shapes, self.max_shapes, self.max_instances
            )));
        }
        if self.min_size == 0
            || self.min_size > self.max_size
            || self.max_size > self.height.min(self.width)
        {
            return Err(config(
                "scenes: size range must be nonempty and fit in the image",
            ));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> u16 {
        self.classes.len() as u16
    }

    /// Thing flag per class id.
    pub fn is_thing(&self) -> Vec<bool> {
        self.classes.iter().map(|c| c.is_thing).collect()
    }

    fn stuff_classes(&self) -> Vec<u16> {
        (1..self.classes.len() as u16)
            .filter(|&c| !self.classes[c as usize].is_thing)
            .collect()
    }

    fn thing_shapes(&self) -> Vec<(u16, ShapeKind)> {
        let mut out = Vec::new();
        for (i, c) in self.classes.iter().enumerate() {
            if c.is_thing {
                out.extend(c.shapes.iter().map(|&s| (i as u16, s)));
            }
        }
        out
    }
}

/// A thing shape placed at integer offset `(top, left)`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Shape {
    class: u16,
    kind: ShapeKind,
    top: i64,
    left: i64,
    h: i64,
    w: i64,
    /// Triangle vertices relative to the box, as fractions of its size.
    tri: [(f64, f64); 3],
    color: [u8; 3],
}

impl Shape {
    /// Whether the pixel center `(y + 0.5, x + 0.5)` is inside the shape.
    fn contains(&self, y: i64, x: i64) -> bool {
        let (ry, rx) = (y - self.top, x - self.left);
        if ry < 0 || rx < 0 || ry >= self.h || rx >= self.w {
            return false;
        }
        let (py, px) = (ry as f64 + 0.5, rx as f64 + 0.5);
        let (h, w) = (self.h as f64, self.w as f64);
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Disk => {
                let (dy, dx) = ((py - h / 2.0) / (h / 2.0), (px - w / 2.0) / (w / 2.0));
                dy * dy + dx * dx <= 1.0
            }
            ShapeKind::Triangle => {
                let v = self.tri.map(|(a, b)| (a * h, b * w));
                let side = |(ay, ax): (f64, f64), (by, bx): (f64, f64)| {
                    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                };
                let (d0, d1, d2) = (side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0]));
                let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(neg && pos)
            }
        }
    }

    fn box_overlap(&self, o: &Shape) -> i64 {
        let dy = (self.top + self.h).min(o.top + o.h) - self.top.max(o.top);
        let dx = (self.left + self.w).min(o.left + o.w) - self.left.max(o.left);
        dy.max(0) * dx.max(0)
    }
}

/// Background: one stuff class, or two split by a sloped line.
#[derive(Debug, Clone, Copy)]
struct Background {
    upper: u16,
    lower: u16,
    /// Boundary row at x = 0 and its slope.
    row: f64,
    slope: f64,
    colors: [[u8; 3]; 2],
}

impl Background {
    fn at(&self, y: usize, x: usize) -> (u16, [u8; 3]) {
        if (y as f64 + 0.5) < self.row + self.slope * (x as f64 + 0.5) {
            (self.upper, self.colors[0])
        } else {
            (self.lower, self.colors[1])
        }
    }
}

fn jitter(base: [u8; 3], amount: f64, rng: &mut ChaCha8Rng) -> [u8; 3] {
    if amount <= 0.0 {
        return base;
    }
    base.map(|c| (f64::from(c) + rng.random_range(-amount..=amount)).clamp(0.0, 255.0) as u8)
}

struct Layout {
    background: Background,
    shapes: Vec<Shape>,
}

fn layout(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Layout {
    let stuff = cfg.stuff_classes();
    let upper = stuff[rng.random_range(0..stuff.len())];
    let lower = if stuff.len() > 1 && rng.random_bool(0.75) {
        loop {
            let c = stuff[rng.random_range(0..stuff.len())];
            if c != upper {
                break c;
            }
        }
    } else {
        upper
    };
    let h = cfg.height as f64;
    let background = Background {
        upper,
        lower,
        row: rng.random_range(0.3 * h..0.7 * h),
        slope: rng.random_range(-0.3..0.3),
        colors: [upper, lower].map(|c| {
            jitter(
                cfg.classes[c as usize].color,
                cfg.instance_jitter / 2.0,
                rng,
            )
        }),
    };

    let kinds = cfg.thing_shapes();
    let n = if kinds.is_empty() {
        0
    } else {
        rng.random_range(cfg.min_shapes..=cfg.max_shapes)
    };
    let mut shapes: Vec<Shape> = Vec::with_capacity(n);
    let mut attempts = 0;
    while shapes.len() < n && attempts < 200 {
        attempts += 1;
        let (class, kind) = kinds[rng.random_range(0..kinds.len())];
        let sh = rng.random_range(cfg.min_size..=cfg.max_size) as i64;
        let sw = if kind == ShapeKind::Disk {
            sh
        } else {
            rng.random_range(cfg.min_size..=cfg.max_size) as i64
        };
        let tri = [
            (0.0, rng.random_range(0.0..1.0)),
            (1.0, rng.random_range(0.0..0.4)),
            (rng.random_range(0.6..1.0), 1.0),
        ];
        let s = Shape {
            class,
            kind,
            top: rng.random_range(0..=cfg.height as i64 - sh),
            left: rng.random_range(0..=cfg.width as i64 - sw),
            h: sh,
            w: sw,
            tri,
            color: jitter(cfg.classes[class as usize].color, cfg.instance_jitter, rng),
        };
        let limit = cfg.max_overlap * (sh * sw) as f64;
        if shapes.iter().all(|o| s.box_overlap(o) as f64 <= limit) {
            shapes.push(s);
        }
    }
    Layout { background, shapes }
}

/// Paints the layout with every shape shifted by its offset. Shape `i`
/// carries instance id `i + 1`; later shapes cover earlier ones.
fn render(
    cfg: &SceneConfig,
    lay: &Layout,
    offsets: &[(i64, i64)],
    noise_rng: &mut ChaCha8Rng,
) -> (RgbImage, PanopticMask) {
    let (h, w) = (cfg.height, cfg.width);
    let mut img = RgbImage::filled(w, h, [0, 0, 0]);
    let mut mask = PanopticMask::empty(h, w, cfg.num_classes(), cfg.max_instances);
    let noise = Normal::new(0.0, cfg.pixel_noise.max(0.0)).expect("finite std");
    for y in 0..h {
        for x in 0..w {
            let (mut class, mut color) = lay.background.at(y, x);
            let mut inst = 0u16;
            for (i, s) in lay.shapes.iter().enumerate() {
                let (oy, ox) = offsets[i];
                if s.contains(y as i64 - oy, x as i64 - ox) {
                    class = s.class;
                    color = s.color;
                    inst = i as u16 + 1;
                }
            }
            let px = color.map(|c| {
                (f64::from(c) + noise.sample(noise_rng))
                    .round()
                    .clamp(0.0, 255.0) as u8
            });
            img.put(y, x, px);
            mask.set(y, x, class, inst);
        }
    }
    (img, mask)
}

fn scene_rng(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(index);
    rng
}

const IMAGE_SALT: u64 = 0;
const VIDEO_SALT: u64 = 0x7669_6465_6f00_0000;

/// Image and mask number `index`; a pure function of `(cfg, index)`.
pub fn gen_scene(cfg: &SceneConfig, index: u64) -> (RgbImage, PanopticMask) {
    let mut rng = scene_rng(cfg.seed, IMAGE_SALT, index);
    let lay = layout(cfg, &mut rng);
    let offsets = vec![(0, 0); lay.shapes.len()];
    render(cfg, &lay, &offsets, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoSceneConfig {
    pub scene: SceneConfig,
    pub frames: usize,
    /// Velocities are integers in `-max_speed..=max_speed` pixels per frame.
    pub max_speed: i64,
    /// When false, velocities that make two objects' boxes overlap at any
    /// frame are redrawn (up to a retry budget).
    pub allow_occlusion: bool,
}

impl Default for VideoSceneConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            frames: 8,
            max_speed: 2,
            allow_occlusion: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub frames: Vec<RgbImage>,
    pub masks: Vec<PanopticMask>,
    /// `(frame, instance id) -> object index`, for every visible instance.
    pub identity: BTreeMap<(usize, u16), usize>,
}

/// Video number `index`: the scene layout with every shape translating at a
/// constant integer velocity. Instance ids are stable across frames.
pub fn gen_video(cfg: &VideoSceneConfig, index: u64) -> Video {
    let sc = &cfg.scene;
    let mut rng = scene_rng(sc.seed, VIDEO_SALT, index);
    let lay = layout(sc, &mut rng);
    let n = lay.shapes.len();
    let speed = cfg.max_speed.max(0);
    let mut velocities = vec![(0i64, 0i64); n];
    for attempt in 0..50 {
        for v in velocities.iter_mut() {
            *v = (
                rng.random_range(-speed..=speed),
                rng.random_range(-speed..=speed),
            );
        }
        if cfg.allow_occlusion
            || attempt == 49
            || !boxes_collide(&lay.shapes, &velocities, cfg.frames)
        {
            break;
        }
    }
    let mut video = Video {
        frames: Vec::with_capacity(cfg.frames),
        masks: Vec::with_capacity(cfg.frames),
        identity: BTreeMap::new(),
    };
    for f in 0..cfg.frames {
        let offsets: Vec<(i64, i64)> = velocities
            .iter()
            .map(|&(vy, vx)| (vy * f as i64, vx * f as i64))
            .collect();
        let (img, mask) = render(sc, &lay, &offsets, &mut rng);
        for k in mask.instance_ids() {
            video.identity.insert((f, k), usize::from(k) - 1);
        }
        video.frames.push(img);
        video.masks.push(mask);
    }
    video
}

fn boxes_collide(shapes: &[Shape], v: &[(i64, i64)], frames: usize) -> bool {
    (0..frames as i64).any(|f| {
        let moved: Vec<Shape> = shapes
            .iter()
            .zip(v)
            .map(|(s, &(vy, vx))| Shape {
                top: s.top + vy * f,
                left: s.left + vx * f,
                ..*s
            })
            .collect();
        moved
            .iter()
            .enumerate()
            .any(|(i, a)| moved[i + 1..].iter().any(|b| a.box_overlap(b) > 0))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// First index of the validation split; training indices stay below it.
pub const VAL_OFFSET: u64 = 1 << 32;

impl Split {
    pub fn index(self, i: u64) -> u64 {
        match self {
            Split::Train => i,
            Split::Val => VAL_OFFSET + i,
        }
    }
}

/// `(index, image, mask)` for the first `size` samples of `split`.
pub fn dataset(
    cfg: &SceneConfig,
    split: Split,
    size: usize,
) -> impl Iterator<Item = (u64, RgbImage, PanopticMask)> + '_ {
    (0..size as u64).map(move |i| {
        let idx = split.index(i);
        let (img, mask) = gen_scene(cfg, idx);
        (idx, img, mask)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_shapes_means_pure_background() {
        let cfg = SceneConfig {
            min_shapes: 0,
            max_shapes: 0,
            ..SceneConfig::default()
        };
        for i in 0..5 {
            let (_, m) = gen_scene(&cfg, i);
            assert!(m.instances().iter().all(|&k| k == 0));
            assert!(m.classes().iter().all(|&c| c == 1 || c == 2));
        }
    }

    #[test]
    fn scenes_are_deterministic_and_valid() {
        let cfg = SceneConfig::default();
        cfg.validate().unwrap();
        for i in 0..20 {
            let (a, ma) = gen_scene(&cfg, i);
            let (b, mb) = gen_scene(&cfg, i);
            assert_eq!(a, b);
            assert_eq!(ma, mb);
            assert!(ma.instance_ids().len() <= 8);
        }
        assert_ne!(gen_scene(&cfg, 0).1, gen_scene(&cfg, 1).1);
    }

    #[test]
    fn painter_order_later_shape_wins() {
        let base = Shape {
            class: 3,
            kind: ShapeKind::Rectangle,
            top: 0,
            left: 0,
            h: 4,
            w: 4,
            tri: [(0.0, 0.0); 3],
            color: [255, 0, 0],
        };
        let top = Shape {
            class: 4,
            left: 2,
            color: [0, 0, 255],
            ..base
        };
        let cfg = SceneConfig {
            height: 4,
            width: 8,
            pixel_noise: 0.0,
            ..SceneConfig::default()
        };
        let lay = Layout {
            background: Background {
                upper: 1,
                lower: 1,
                row: 0.0,
                slope: 0.0,
                colors: [[0, 0, 0]; 2],
            },
            shapes: vec![base, top],
        };
        let (img, mask) = render(
            &cfg,
            &lay,
            &[(0, 0), (0, 0)],
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert_eq!(mask.get(1, 1), (3, 1));
        assert_eq!(mask.get(1, 3), (4, 2));
        assert_eq!(img.get(1, 3), [0, 0, 255]);
        assert_eq!(mask.get(1, 7), (1, 0));
    }

    #[test]
    fn zero_velocity_video_is_static() {
        let cfg = VideoSceneConfig {
            max_speed: 0,
            scene: SceneConfig {
                pixel_noise: 0.0,
                ..SceneConfig::default()
            },
            ..VideoSceneConfig::default()
        };
        let v = gen_video(&cfg, 3);
        assert!(v.masks.windows(2).all(|w| w[0] == w[1]));
        assert!(v.frames.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn splits_are_disjoint() {
        let cfg = SceneConfig::default();
        let train: Vec<u64> = dataset(&cfg, Split::Train, 50).map(|s| s.0).collect();
        let val: Vec<u64> = dataset(&cfg, Split::Val, 50).map(|s| s.0).collect();
        assert!(train.iter().all(|i| !val.contains(i)));
        assert_eq!(dataset(&cfg, Split::Val, 0).count(), 0);
    }
}
