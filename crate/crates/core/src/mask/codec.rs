use serde::{Deserialize, Serialize};

use super::{MaskError, PanopticMask, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Integer -> bits, least-significant bit first: bit `k` of `x` is
/// `(x >> k) & 1`. Output holds `n` entries per input value.
pub fn int2bit(values: &[u32], n: u32) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(values.len() * n as usize);
    for &x in values {
        if n < 32 && x >> n != 0 {
            return Err(MaskError::OutOfRange { value: x, bits: n });
        }
        out.extend((0..n).map(|k| ((x >> k) & 1) as u8));
    }
    Ok(out)
}

/// Inverse of [`int2bit`]: `bits` is read in groups of `n`, LSB first.
pub fn bit2int(bits: &[u8], n: u32) -> Vec<u32> {
    if n == 0 {
        return Vec::new();
    }
    bits.chunks(n as usize)
        .map(|group| {
            group
                .iter()
                .enumerate()
                .fold(0u32, |acc, (k, &b)| acc | (u32::from(b & 1) << k))
        })
        .collect()
}

/// Bit widths for the two mask channels and the analog-bit magnitude `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BitCodecConfig {
    pub class_bits: u32,
    pub instance_bits: u32,
    /// Analog bits take values in `{-scale, +scale}`.
    pub scale: f64,
}

impl Default for BitCodecConfig {
    fn default() -> Self {
        Self {
            class_bits: 4,
            instance_bits: 4,
            scale: 0.1,
        }
    }
}

impl BitCodecConfig {
    pub fn channels(&self) -> usize {
        (self.class_bits + self.instance_bits) as usize
    }

    /// Checks `2^class_bits >= C`, `2^instance_bits >= K + 1` and `scale > 0`.
    pub fn validate(&self, num_classes: u16, max_instances: u16) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(MaskError::Config(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        for (bits, needed, what) in [
            (self.class_bits, u32::from(num_classes), "class"),
            (self.instance_bits, u32::from(max_instances) + 1, "instance"),
        ] {
            if bits == 0 || bits > 16 || (1u32 << bits) < needed {
                return Err(MaskError::Config(format!(
                    "{bits} {what} bits cannot represent {needed} categories"
                )));
            }
        }
        Ok(())
    }
}

/// Mask -> analog bits of shape `[class_bits + instance_bits, H, W]`.
/// Class bits come first; every value is exactly `-scale` or `+scale`.
pub fn encode_analog<T: Scalar>(mask: &PanopticMask, cfg: &BitCodecConfig) -> Result<Tensor<T>> {
    cfg.validate(mask.num_classes(), mask.max_instances())?;
    let hw = mask.num_pixels();
    let (nc, ni) = (cfg.class_bits as usize, cfg.instance_bits as usize);
    let (pos, neg) = (T::lit(cfg.scale), T::lit(-cfg.scale));
    let mut data = vec![neg; (nc + ni) * hw];
    for (p, (&c, &k)) in mask.classes().iter().zip(mask.instances()).enumerate() {
        for bit in 0..nc {
            if (c >> bit) & 1 == 1 {
                data[bit * hw + p] = pos;
            }
        }
        for bit in 0..ni {
            if (k >> bit) & 1 == 1 {
                data[(nc + bit) * hw + p] = pos;
            }
        }
    }
    Ok(Tensor::new(vec![nc + ni, mask.height(), mask.width()], data).expect("sized above"))
}

/// Analog bits `[class_bits + instance_bits, H, W]` -> mask, by thresholding at
/// zero. Codes outside the category range decode to null; a null class forces
/// the null instance.
pub fn decode_analog<T: Scalar>(
    x: &Tensor<T>,
    cfg: &BitCodecConfig,
    num_classes: u16,
    max_instances: u16,
) -> Result<PanopticMask> {
    let (nc, ni) = (cfg.class_bits as usize, cfg.instance_bits as usize);
    let s = x.shape();
    if s.len() != 3 || s[0] != nc + ni {
        return Err(MaskError::Config(format!(
            "expected [{}, H, W] analog bits, got {s:?}",
            nc + ni
        )));
    }
    let (h, w) = (s[1], s[2]);
    let hw = h * w;
    let d = x.data();
    let read = |first: usize, bits: usize, p: usize| -> u32 {
        (0..bits).fold(0u32, |acc, b| {
            acc | (u32::from(d[(first + b) * hw + p] > T::zero()) << b)
        })
    };
    let mut classes = Vec::with_capacity(hw);
    let mut instances = Vec::with_capacity(hw);
    for p in 0..hw {
        let c = read(0, nc, p);
        let c = if c < u32::from(num_classes) {
            c as u16
        } else {
            0
        };
        let k = read(nc, ni, p);
        let k = if c == 0 || k > u32::from(max_instances) {
            0
        } else {
            k as u16
        };
        classes.push(c);
        instances.push(k);
    }
    PanopticMask::new(h, w, num_classes, max_instances, classes, instances)
}

/// `[categories, bits]` table whose row `k` is the analog code of integer `k`.
pub fn analog_codebook(categories: usize, bits: u32, scale: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(categories * bits as usize);
    for k in 0..categories {
        out.extend((0..bits).map(|b| if (k >> b) & 1 == 1 { scale } else { -scale }));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn int2bit_is_lsb_first() {
        assert_eq!(int2bit(&[5], 3).unwrap(), vec![1, 0, 1]);
        assert_eq!(int2bit(&[0], 4).unwrap(), vec![0, 0, 0, 0]);
        assert_eq!(int2bit(&[6], 3).unwrap(), vec![0, 1, 1]);
        assert!(matches!(
            int2bit(&[8], 3),
            Err(MaskError::OutOfRange { value: 8, bits: 3 })
        ));
    }

    #[test]
    fn bit2int_inverts_int2bit() {
        assert_eq!(bit2int(&[1, 0, 1], 3), vec![5]);
        assert_eq!(bit2int(&[1, 1, 1, 1], 4), vec![15]);
        let xs: Vec<u32> = (0..256).collect();
        assert_eq!(bit2int(&int2bit(&xs, 8).unwrap(), 8), xs);
    }

    #[test]
    fn class_one_encodes_as_plus_minus() {
        let m = PanopticMask::new(1, 1, 4, 3, vec![1], vec![0]).unwrap();
        let cfg = BitCodecConfig {
            class_bits: 2,
            instance_bits: 2,
            scale: 0.1,
        };
        let x = encode_analog::<f64>(&m, &cfg).unwrap();
        assert_eq!(x.shape(), &[4, 1, 1]);
        assert_eq!(x.data(), &[0.1, -0.1, -0.1, -0.1]);
    }

    #[test]
    fn null_mask_encodes_to_all_negative_and_zeros_decode_to_null() {
        let cfg = BitCodecConfig::default();
        let m = PanopticMask::empty(2, 3, 5, 8);
        let x = encode_analog::<f32>(&m, &cfg).unwrap();
        assert!(x.data().iter().all(|&v| v == -0.1));
        let zeros = Tensor::<f32>::zeros(&[8, 2, 3]);
        assert_eq!(decode_analog(&zeros, &cfg, 5, 8).unwrap(), m);
    }

    #[test]
    fn unit_scale_gives_plain_analog_bits() {
        let m = PanopticMask::new(1, 1, 2, 1, vec![1], vec![1]).unwrap();
        let cfg = BitCodecConfig {
            class_bits: 1,
            instance_bits: 1,
            scale: 1.0,
        };
        assert_eq!(encode_analog::<f64>(&m, &cfg).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn out_of_range_codes_decode_to_null() {
        // class code 7 >= C=5 and instance code 12 > K=8.
        let cfg = BitCodecConfig::default();
        let mut data = vec![-1.0f64; 8];
        for b in [0, 1, 2] {
            data[b] = 1.0;
        }
        let x = Tensor::new(vec![8, 1, 1], data.clone()).unwrap();
        assert_eq!(decode_analog(&x, &cfg, 5, 8).unwrap().get(0, 0), (0, 0));
        data[0] = 1.0;
        data[1] = -1.0;
        data[2] = -1.0; // class 1
        data[4 + 2] = 1.0;
        data[4 + 3] = 1.0; // instance 12
        let x = Tensor::new(vec![8, 1, 1], data).unwrap();
        assert_eq!(decode_analog(&x, &cfg, 5, 8).unwrap().get(0, 0), (1, 0));
    }

    #[test]
    fn validate_rejects_undersized_codes() {
        let cfg = BitCodecConfig {
            class_bits: 2,
            instance_bits: 3,
            scale: 0.1,
        };
        assert!(cfg.validate(4, 7).is_ok());
        assert!(cfg.validate(5, 7).is_err());
        assert!(cfg.validate(4, 8).is_err());
        assert!(BitCodecConfig { scale: 0.0, ..cfg }.validate(4, 7).is_err());
    }

    #[test]
    fn codebook_rows_are_codes() {
        let book = analog_codebook(4, 2, 0.5);
        assert_eq!(book, vec![-0.5, -0.5, 0.5, -0.5, -0.5, 0.5, 0.5, 0.5]);
    }
}
