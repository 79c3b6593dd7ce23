mod common;

use common::{random_mask, rng};
use panoptic_diffusion::mask::{
    bit2int, decode_analog, encode_analog, int2bit, read_mask, write_mask, BitCodecConfig,
    MaskError, PanopticMask,
};
use panoptic_diffusion::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn every_integer_roundtrips_for_every_width() {
    for n in 1..=16u32 {
        let xs: Vec<u32> = (0..1u32 << n).collect();
        let bits = int2bit(&xs, n).unwrap();
        assert_eq!(bits.len(), xs.len() * n as usize);
        assert_eq!(bit2int(&bits, n), xs, "n = {n}");
    }
}

#[test]
fn bits_match_shift_and_mask_oracle() {
    let mut r = rng(3);
    for _ in 0..200 {
        let n = r.random_range(1..=16u32);
        let x = r.random_range(0..1u32 << n);
        let bits = int2bit(&[x], n).unwrap();
        let oracle: Vec<u8> = (0..n).map(|k| u8::from(x / 2u32.pow(k) % 2 == 1)).collect();
        assert_eq!(bits, oracle);
    }
}

#[test]
fn thousand_random_masks_roundtrip_through_analog_bits() {
    let cfg = BitCodecConfig::default();
    let mut r = rng(11);
    for i in 0..1000 {
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        let m = random_mask(h, w, 5, 8, &mut r);
        let x = encode_analog::<f32>(&m, &cfg).unwrap();
        assert_eq!(x.shape(), &[8, h, w]);
        assert!(x.data().iter().all(|&v| v == 0.1 || v == -0.1));
        assert_eq!(decode_analog(&x, &cfg, 5, 8).unwrap(), m, "mask {i}");
    }
}

#[test]
fn noise_below_the_scale_does_not_change_the_decode() {
    let cfg = BitCodecConfig {
        scale: 0.3,
        ..BitCodecConfig::default()
    };
    let mut r = rng(5);
    let m = random_mask(9, 7, 5, 8, &mut r);
    let mut x = encode_analog::<f64>(&m, &cfg).unwrap();
    for v in x.data_mut() {
        *v += r.random_range(-0.29..0.29);
    }
    assert_eq!(decode_analog(&x, &cfg, 5, 8).unwrap(), m);
}

#[test]
fn decode_rejects_wrong_channel_count() {
    let cfg = BitCodecConfig::default();
    let x = Tensor::<f64>::zeros(&[7, 2, 2]);
    assert!(decode_analog(&x, &cfg, 5, 8).is_err());
}

#[test]
fn mask_file_roundtrips_and_rejects_corruption() {
    let mut r = rng(8);
    let m = random_mask(13, 6, 5, 8, &mut r);
    let mut buf = Vec::new();
    write_mask(&m, &mut buf).unwrap();
    assert_eq!(read_mask(buf.as_slice()).unwrap(), m);
    let mut bad = buf.clone();
    bad[0] ^= 0xff;
    assert!(read_mask(bad.as_slice()).is_err());
    assert!(read_mask(&buf[..buf.len() - 1]).is_err());
}

#[test]
fn permutation_keeps_partition_and_classes() {
    let mut r = rng(21);
    for _ in 0..100 {
        let m = random_mask(8, 8, 5, 8, &mut r);
        let p = m.permute_instance_ids(&mut r).unwrap();
        assert_eq!(p.classes(), m.classes());
        let mut pairs = std::collections::BTreeMap::new();
        for (&a, &b) in m.instances().iter().zip(p.instances()) {
            assert_eq!(*pairs.entry(a).or_insert(b), b, "relabelling is a function");
            assert_eq!(a == 0, b == 0);
        }
        let images: std::collections::BTreeSet<u16> = pairs.values().copied().collect();
        assert_eq!(images.len(), pairs.len(), "relabelling is injective");
    }
}

#[test]
fn constructor_enforces_ranges() {
    assert!(matches!(
        PanopticMask::new(1, 1, 5, 8, vec![5], vec![0]),
        Err(MaskError::Invalid(_))
    ));
    assert!(PanopticMask::new(1, 1, 5, 8, vec![1], vec![9]).is_err());
    assert!(PanopticMask::new(1, 1, 5, 8, vec![0], vec![1]).is_err());
    assert!(PanopticMask::new(1, 2, 5, 8, vec![1], vec![1]).is_err());
}

#[test]
fn small_instances_are_removed_and_stuff_kept() {
    // one 2-pixel thing, one 3-pixel thing, one 1-pixel stuff region
    let m = PanopticMask::new(1, 6, 3, 2, vec![1, 1, 1, 1, 1, 2], vec![1, 1, 2, 2, 2, 0]).unwrap();
    let f = m.filter_small_instances(3);
    assert_eq!(f.classes(), &[0, 0, 1, 1, 1, 2]);
    assert_eq!(f.instances(), &[0, 0, 2, 2, 2, 0]);
}

proptest! {
    #[test]
    fn roundtrip_holds_for_any_bit_budget(
        class_bits in 1u32..6,
        instance_bits in 1u32..6,
        scale in 0.01f64..2.0,
        seed in 0u64..10_000,
    ) {
        let c = (1u16 << class_bits).min(20);
        let k = (1u16 << instance_bits) - 1;
        let cfg = BitCodecConfig { class_bits, instance_bits, scale };
        let mut r = rng(seed);
        let m = random_mask(5, 4, c, k, &mut r);
        let x = encode_analog::<f64>(&m, &cfg).unwrap();
        prop_assert_eq!(decode_analog(&x, &cfg, c, k).unwrap(), m);
    }

    #[test]
    fn any_real_tensor_decodes_to_a_valid_mask(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let data: Vec<f64> = (0..8 * 3 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![8, 3, 3], data).unwrap();
        let m = decode_analog(&x, &BitCodecConfig::default(), 5, 8).unwrap();
        for (&c, &k) in m.classes().iter().zip(m.instances()) {
            prop_assert!(c < 5 && k <= 8);
            prop_assert!(c != 0 || k == 0);
        }
    }
}
