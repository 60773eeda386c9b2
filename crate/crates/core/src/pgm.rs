//! Binary PGM (P5) I/O.
//!
//! Probability maps are 16-bit big-endian with maxval 65535, sample `v`
//! meaning probability `v / 65535`. Masks are 8-bit, 0 or 255.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::band::{BinaryMask, ProbabilityMap};
use crate::error::{CimtError, Result};

pub const PROB_SUFFIX: &str = ".prob.pgm";
pub const MASK_SUFFIX: &str = ".mask.pgm";

const PROB_MAXVAL: u32 = 65535;

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], name: &str) -> Result<Header> {
    let err = |reason: &str| CimtError::Parse {
        source_name: name.to_string(),
        line: 1,
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(err("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err("header must end with a single whitespace byte"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(err("maxval must be in 1..=65535"));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval,
        data_offset: pos + 1,
    })
}

pub fn decode_probability(bytes: &[u8], image_id: &str) -> Result<ProbabilityMap> {
    let h = parse_header(bytes, image_id)?;
    if h.maxval != PROB_MAXVAL {
        return Err(CimtError::invalid_input(
            image_id,
            format!("probability maps must use maxval 65535, found {}", h.maxval),
        ));
    }
    let data = &bytes[h.data_offset..];
    let expected = h.width * h.height * 2;
    if data.len() < expected {
        return Err(CimtError::invalid_input(
            image_id,
            format!("pixel data truncated: {} of {expected} bytes", data.len()),
        ));
    }
    let values = data[..expected]
        .chunks_exact(2)
        .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / f64::from(PROB_MAXVAL))
        .collect();
    ProbabilityMap::new(image_id, h.width, h.height, values)
}

pub fn encode_probability(p: &ProbabilityMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", p.width(), p.height(), PROB_MAXVAL).into_bytes();
    out.reserve(p.values().len() * 2);
    for &v in p.values() {
        let q = (v * f64::from(PROB_MAXVAL)).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

/// Any non-zero sample is foreground. Accepts 8- or 16-bit files.
pub fn decode_mask(bytes: &[u8], image_id: &str) -> Result<BinaryMask> {
    let h = parse_header(bytes, image_id)?;
    let data = &bytes[h.data_offset..];
    let n = h.width * h.height;
    let bits: Vec<bool> = if h.maxval < 256 {
        if data.len() < n {
            return Err(CimtError::invalid_input(
                image_id,
                "mask pixel data truncated",
            ));
        }
        data[..n].iter().map(|&b| b != 0).collect()
    } else {
        if data.len() < 2 * n {
            return Err(CimtError::invalid_input(
                image_id,
                "mask pixel data truncated",
            ));
        }
        data[..2 * n].chunks_exact(2).map(|c| c != [0, 0]).collect()
    };
    BinaryMask::new(image_id, h.width, h.height, bits)
}

pub fn encode_mask(m: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.width(), m.height()).into_bytes();
    out.extend(m.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Reads `<dir>/<image_id>.prob.pgm`-style files; the id is taken from the
/// file name.
pub fn read_probability(path: &Path) -> Result<ProbabilityMap> {
    let bytes = fs::read(path).map_err(|e| CimtError::io(path, e))?;
    let id = image_id_from_path(path, PROB_SUFFIX).unwrap_or_default();
    decode_probability(&bytes, &id)
}

pub fn write_probability(path: &Path, p: &ProbabilityMap) -> Result<()> {
    write_bytes(path, &encode_probability(p))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path).map_err(|e| CimtError::io(path, e))?;
    let id = image_id_from_path(path, MASK_SUFFIX).unwrap_or_default();
    decode_mask(&bytes, &id)
}

pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    write_bytes(path, &encode_mask(m))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| CimtError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CimtError::io(path, e))
}

pub fn image_id_from_path(path: &Path, suffix: &str) -> Option<String> {
    path.file_name()?
        .to_str()?
        .strip_suffix(suffix)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# exported\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x80, 0x00]);
        let p = decode_probability(&bytes, "a").unwrap();
        assert_eq!((p.width(), p.height()), (2, 1));
        assert_eq!(p.values()[0], 1.0);
        assert_eq!(p.values()[1], 32768.0 / 65535.0);
    }

    #[test]
    fn rejects_wrong_maxval_and_truncation() {
        let bytes = b"P5 1 1 255\n\x80".to_vec();
        assert!(decode_probability(&bytes, "a").is_err());
        let bytes = b"P5 2 2 65535\n\x00\x00".to_vec();
        assert!(decode_probability(&bytes, "a").is_err());
        assert!(decode_probability(b"P2 1 1 65535\n0", "a").is_err());
    }

    #[test]
    fn mask_encoding() {
        let m = BinaryMask::new("m", 3, 1, vec![true, false, true]).unwrap();
        let bytes = encode_mask(&m);
        assert_eq!(&bytes[bytes.len() - 3..], &[255, 0, 255]);
        assert_eq!(decode_mask(&bytes, "m").unwrap(), m);
    }

    #[test]
    fn id_from_path() {
        assert_eq!(
            image_id_from_path(Path::new("/x/clin_0001_L.prob.pgm"), PROB_SUFFIX).as_deref(),
            Some("clin_0001_L")
        );
        assert_eq!(
            image_id_from_path(Path::new("/x/other.pgm"), PROB_SUFFIX),
            None
        );
    }

    proptest! {
        #[test]
        fn probability_round_trip_within_one_level(
            (w, h, values) in (1usize..8, 1usize..8).prop_flat_map(|(w, h)| {
                (Just(w), Just(h), proptest::collection::vec(0.0f64..=1.0, w * h))
            })
        ) {
            let p = ProbabilityMap::new("p", w, h, values).unwrap();
            let back = decode_probability(&encode_probability(&p), "p").unwrap();
            for (a, b) in p.values().iter().zip(back.values()) {
                prop_assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-15);
            }
            // quantized maps are a fixed point
            prop_assert_eq!(encode_probability(&back), encode_probability(&p));
        }
    }
}
