//! Minimal binary netpbm reader/writer: P6 (8-bit PPM), P5 (8- and 16-bit PGM).
//!
//! The decoder treats its input as untrusted: dimensions are bounded and the
//! payload length is verified before allocation.

use crate::error::{Error, Result};

const MAX_EXTENT: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PnmImage {
    /// P5, maxval <= 255
    Gray8 { w: usize, h: usize, data: Vec<u8> },
    /// P5, maxval in 256..=65535, big-endian samples
    Gray16 { w: usize, h: usize, data: Vec<u16> },
    /// P6, maxval <= 255, interleaved RGB
    Rgb8 { w: usize, h: usize, data: Vec<u8> },
}

impl PnmImage {
    pub fn dimensions(&self) -> (usize, usize) {
        match self {
            PnmImage::Gray8 { w, h, .. }
            | PnmImage::Gray16 { w, h, .. }
            | PnmImage::Rgb8 { w, h, .. } => (*w, *h),
        }
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_space_and_comments(&mut self) -> Result<()> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => return Ok(()),
                None => return Err(Error::Format("truncated pnm header".into())),
            }
        }
    }

    fn read_number(&mut self) -> Result<usize> {
        self.skip_space_and_comments()?;
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .map_or(false, |b| b.is_ascii_digit())
        {
            self.pos += 1;
        }
        if self.pos == start || self.pos - start > 9 {
            return Err(Error::Format("bad number in pnm header".into()));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        s.parse::<usize>()
            .map_err(|_| Error::Format("bad number in pnm header".into()))
    }
}

/// Decode a binary PGM (P5) or PPM (P6) from raw bytes.
pub fn decode(bytes: &[u8]) -> Result<PnmImage> {
    if bytes.len() < 2 {
        return Err(Error::Format("not a pnm file".into()));
    }
    let magic = &bytes[0..2];
    if magic != b"P5" && magic != b"P6" {
        return Err(Error::Format("unsupported pnm magic".into()));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    let w = r.read_number()?;
    let h = r.read_number()?;
    let maxval = r.read_number()?;
    if w == 0 || h == 0 || w > MAX_EXTENT || h > MAX_EXTENT {
        return Err(Error::Format(format!("unreasonable dimensions {w}x{h}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("bad maxval {maxval}")));
    }
    // exactly one whitespace byte separates header from raster
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(Error::Format("missing raster separator".into())),
    }
    let raster = &bytes[r.pos..];
    let pixels = w
        .checked_mul(h)
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;

    match (magic, maxval) {
        (b"P6", m) if m <= 255 => {
            let need = pixels
                .checked_mul(3)
                .ok_or_else(|| Error::Format("dimension overflow".into()))?;
            if raster.len() < need {
                return Err(Error::Format("truncated ppm raster".into()));
            }
            Ok(PnmImage::Rgb8 {
                w,
                h,
                data: raster[..need].to_vec(),
            })
        }
        (b"P5", m) if m <= 255 => {
            if raster.len() < pixels {
                return Err(Error::Format("truncated pgm raster".into()));
            }
            Ok(PnmImage::Gray8 {
                w,
                h,
                data: raster[..pixels].to_vec(),
            })
        }
        (b"P5", _) => {
            let need = pixels
                .checked_mul(2)
                .ok_or_else(|| Error::Format("dimension overflow".into()))?;
            if raster.len() < need {
                return Err(Error::Format("truncated 16-bit pgm raster".into()));
            }
            let data = raster[..need]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect();
            Ok(PnmImage::Gray16 { w, h, data })
        }
        (b"P6", _) => Err(Error::Format("16-bit ppm not supported".into())),
        _ => unreachable!(),
    }
}

pub fn encode_ppm8(w: usize, h: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != w * h * 3 {
        return Err(Error::Format(format!(
            "rgb buffer length {} != {w}x{h}x3",
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

pub fn encode_pgm8(w: usize, h: usize, gray: &[u8]) -> Result<Vec<u8>> {
    if gray.len() != w * h {
        return Err(Error::Format(format!(
            "gray buffer length {} != {w}x{h}",
            gray.len()
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    Ok(out)
}

pub fn encode_pgm16(w: usize, h: usize, gray: &[u16]) -> Result<Vec<u8>> {
    if gray.len() != w * h {
        return Err(Error::Format(format!(
            "gray buffer length {} != {w}x{h}",
            gray.len()
        )));
    }
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for v in gray {
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_ppm8() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8).collect();
        let bytes = encode_ppm8(3, 2, &rgb).unwrap();
        match decode(&bytes).unwrap() {
            PnmImage::Rgb8 { w, h, data } => {
                assert_eq!((w, h), (3, 2));
                assert_eq!(data, rgb);
            }
            other => panic!("wrong variant: {other:?}"),
        }
    }

    #[test]
    fn round_trip_pgm16() {
        let gray: Vec<u16> = vec![0, 1, 65535, 300, 40000, 7];
        let bytes = encode_pgm16(3, 2, &gray).unwrap();
        match decode(&bytes).unwrap() {
            PnmImage::Gray16 { w, h, data } => {
                assert_eq!((w, h), (3, 2));
                assert_eq!(data, gray);
            }
            other => panic!("wrong variant: {other:?}"),
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# a comment\n2 2\n# another\n255\n\x01\x02\x03\x04";
        match decode(bytes).unwrap() {
            PnmImage::Gray8 { w, h, data } => {
                assert_eq!((w, h), (2, 2));
                assert_eq!(data, vec![1, 2, 3, 4]);
            }
            other => panic!("wrong variant: {other:?}"),
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"").is_err());
        assert!(decode(b"P7\n1 1\n255\n\x00").is_err());
        assert!(decode(b"P5\n0 5\n255\n").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x01").is_err()); // truncated raster
        assert!(decode(b"P5\n99999999999 1\n255\n").is_err());
        assert!(decode(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode(&bytes);
        }

        #[test]
        fn pgm8_round_trip(w in 1usize..8, h in 1usize..8, seed in any::<u64>()) {
            let data: Vec<u8> = (0..w*h).map(|i| (seed.wrapping_mul(i as u64 + 1) % 256) as u8).collect();
            let bytes = encode_pgm8(w, h, &data).unwrap();
            prop_assert_eq!(decode(&bytes).unwrap(), PnmImage::Gray8 { w, h, data });
        }
    }
}
