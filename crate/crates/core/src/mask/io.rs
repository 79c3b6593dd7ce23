use std::io::{Read, Write};

use super::{MaskError, PanopticMask, Result};

pub const MASK_MAGIC: &[u8; 4] = b"PANM";
pub const MASK_VERSION: u8 = 1;

/// Binary mask file: magic, version byte, `H W C K` as u32 LE, then the class
/// plane and the instance plane as u16 LE, row-major.
pub fn write_mask<W: Write>(mask: &PanopticMask, mut out: W) -> Result<()> {
    out.write_all(MASK_MAGIC)?;
    out.write_all(&[MASK_VERSION])?;
    for v in [
        mask.height() as u32,
        mask.width() as u32,
        u32::from(mask.num_classes()),
        u32::from(mask.max_instances()),
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * mask.num_pixels());
    for &v in mask.classes().iter().chain(mask.instances()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_mask<R: Read>(mut input: R) -> Result<PanopticMask> {
    let mut head = [0u8; 21];
    input.read_exact(&mut head)?;
    if &head[..4] != MASK_MAGIC {
        return Err(MaskError::Format("bad magic".into()));
    }
    if head[4] != MASK_VERSION {
        return Err(MaskError::Format(format!(
            "unsupported version {}",
            head[4]
        )));
    }
    let field = |i: usize| u32::from_le_bytes(head[5 + 4 * i..9 + 4 * i].try_into().unwrap());
    let (h, w) = (field(0) as usize, field(1) as usize);
    let (c, k) = (field(2), field(3));
    if c > u32::from(u16::MAX) || k > u32::from(u16::MAX) {
        return Err(MaskError::Format(format!("C={c} or K={k} out of range")));
    }
    let n = h
        .checked_mul(w)
        .filter(|&n| n <= 1 << 28)
        .ok_or_else(|| MaskError::Format(format!("implausible size {h}x{w}")))?;
    let mut body = vec![0u8; 4 * n];
    input.read_exact(&mut body)?;
    let values: Vec<u16> = body
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let (classes, instances) = values.split_at(n);
    PanopticMask::new(
        h,
        w,
        c as u16,
        k as u16,
        classes.to_vec(),
        instances.to_vec(),
    )
}

/// Deterministic display color for a segment; the null segment is black.
pub fn palette_color(class: u16, instance: u16) -> [u8; 3] {
    if class == 0 {
        return [0, 0, 0];
    }
    let mut x = (u64::from(class) << 16 | u64::from(instance)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 29;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 32;
    // Keep channels away from black so segments stand out from null.
    [0, 8, 16].map(|s| 64 + ((x >> s) as u8 % 192))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let m =
            PanopticMask::new(2, 3, 5, 8, vec![0, 1, 2, 3, 4, 4], vec![0, 0, 0, 1, 8, 2]).unwrap();
        let mut buf = Vec::new();
        write_mask(&m, &mut buf).unwrap();
        assert_eq!(buf.len(), 21 + 4 * 6);
        assert_eq!(read_mask(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn rejects_bad_headers() {
        let m = PanopticMask::empty(1, 1, 2, 1);
        let mut buf = Vec::new();
        write_mask(&m, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_mask(bad.as_slice()),
            Err(MaskError::Format(_))
        ));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            read_mask(bad.as_slice()),
            Err(MaskError::Format(_))
        ));
        assert!(read_mask(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn palette_is_stable_and_null_is_black() {
        assert_eq!(palette_color(0, 0), [0, 0, 0]);
        assert_eq!(palette_color(3, 2), palette_color(3, 2));
        assert_ne!(palette_color(3, 1), palette_color(3, 2));
    }
}
