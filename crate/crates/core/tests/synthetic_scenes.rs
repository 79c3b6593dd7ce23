use std::collections::{BTreeMap, BTreeSet};

use panoptic_diffusion::scenes::{
    dataset, gen_scene, gen_video, SceneConfig, Split, VideoSceneConfig,
};
use proptest::prelude::*;

#[test]
fn every_pixel_is_labelled_consistently() {
    let cfg = SceneConfig::default();
    let is_thing = cfg.is_thing();
    for i in 0..200 {
        let (img, m) = gen_scene(&cfg, i);
        assert_eq!((img.height(), img.width()), (64, 64));
        assert_eq!((m.height(), m.width()), (64, 64));
        let mut class_of: BTreeMap<u16, u16> = BTreeMap::new();
        for (&c, &k) in m.classes().iter().zip(m.instances()) {
            assert_ne!(c, 0, "scenes leave no pixel unlabelled");
            assert_eq!(
                is_thing[c as usize],
                k != 0,
                "things carry ids, stuff does not"
            );
            if k != 0 {
                assert_eq!(*class_of.entry(k).or_insert(c), c, "one class per instance");
            }
        }
        assert!(class_of.len() <= cfg.max_shapes);
    }
}

#[test]
fn datasets_are_reproducible_and_splits_differ() {
    let cfg = SceneConfig::default();
    let a: Vec<_> = dataset(&cfg, Split::Val, 20).collect();
    let b: Vec<_> = dataset(&cfg, Split::Val, 20).collect();
    assert_eq!(a, b);
    let t: Vec<_> = dataset(&cfg, Split::Train, 20).collect();
    assert!(a.iter().zip(&t).all(|(x, y)| x.2 != y.2));
    let reseeded = SceneConfig {
        seed: 1,
        ..SceneConfig::default()
    };
    assert_ne!(gen_scene(&reseeded, 0), gen_scene(&cfg, 0));
}

#[test]
fn things_appear_in_most_scenes() {
    let cfg = SceneConfig::default();
    let with_things = (0..100)
        .filter(|&i| !gen_scene(&cfg, i).1.instance_ids().is_empty())
        .count();
    assert!(with_things >= 90, "{with_things}");
}

fn pixels(m: &panoptic_diffusion::mask::PanopticMask, k: u16) -> BTreeSet<(i64, i64)> {
    let mut s = BTreeSet::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x).1 == k {
                s.insert((y as i64, x as i64));
            }
        }
    }
    s
}

#[test]
fn single_objects_move_rigidly() {
    let cfg = VideoSceneConfig {
        scene: SceneConfig {
            min_shapes: 1,
            max_shapes: 1,
            pixel_noise: 0.0,
            ..SceneConfig::default()
        },
        ..VideoSceneConfig::default()
    };
    for v in 0..20 {
        let video = gen_video(&cfg, v);
        assert_eq!(video.frames.len(), 8);
        let first = pixels(&video.masks[0], 1);
        assert!(!first.is_empty());
        for (f, m) in video.masks.iter().enumerate().skip(1) {
            let now = pixels(m, 1);
            let reach = 2 * f as i64;
            let explained = (-reach..=reach).any(|dy| {
                (-reach..=reach)
                    .any(|dx| now.iter().all(|&(y, x)| first.contains(&(y - dy, x - dx))))
            });
            assert!(
                explained,
                "video {v} frame {f} is not a translate of frame 0"
            );
        }
    }
}

#[test]
fn identity_table_tracks_instance_ids() {
    let cfg = VideoSceneConfig::default();
    for v in 0..10 {
        let video = gen_video(&cfg, v);
        for (f, m) in video.masks.iter().enumerate() {
            for k in m.instance_ids() {
                assert_eq!(video.identity[&(f, k)], usize::from(k) - 1);
            }
        }
        let visible: usize = video.masks.iter().map(|m| m.instance_ids().len()).sum();
        assert_eq!(video.identity.len(), visible);
    }
}

#[test]
fn config_rejects_unknown_keys_and_bad_ranges() {
    assert!(serde_json::from_str::<SceneConfig>(r#"{"hieght": 32}"#).is_err());
    let cfg: SceneConfig =
        serde_json::from_str(r#"{"height": 32, "width": 40, "max_size": 16}"#).unwrap();
    assert!(cfg.validate().is_ok());
    assert_eq!(gen_scene(&cfg, 0).1.width(), 40);
    let bad = SceneConfig {
        max_shapes: 9,
        ..SceneConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = SceneConfig {
        max_size: 100,
        ..SceneConfig::default()
    };
    assert!(bad.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn any_index_gives_a_valid_scene(index in any::<u64>(), seed in 0u64..100) {
        let cfg = SceneConfig { seed, ..SceneConfig::default() };
        let (img, m) = gen_scene(&cfg, index);
        prop_assert_eq!(img.data().len(), 64 * 64 * 3);
        prop_assert!(m.instance_ids().iter().all(|&k| (1..=8).contains(&k)));
    }
}
