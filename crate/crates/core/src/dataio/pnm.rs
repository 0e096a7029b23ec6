//! Binary PPM (P6) frames and PGM (P5) label maps, maxval 255.

use std::fs;
use std::path::Path;

use super::{DataError, Result};
use crate::frame::{Frame, LabelMap};

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(DataError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(DataError::TruncatedFile),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Format("expected an integer in the header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| DataError::Format("header integer out of range".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => return Err(DataError::Format("missing separator after maxval".into())),
        None => return Err(DataError::TruncatedFile),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(DataError::Format(format!("zero extent {width}x{height}")));
    }
    if maxval != 255 {
        return Err(DataError::Format(format!("maxval {maxval} (only 255 supported)")));
    }
    Ok(Header {
        width,
        height,
        data_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let len = h.width * h.height * channels;
    let data = &bytes[h.data_start..];
    if data.len() < len {
        return Err(DataError::TruncatedFile);
    }
    Ok(&data[..len])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Frame> {
    let h = parse_header(bytes, b"P6")?;
    let data = payload(bytes, &h, 3)?;
    Ok(Frame::new(h.width, h.height, data.to_vec()))
}

pub fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.rgb);
    out
}

/// Decodes a P5 label map; values above `num_classes` (when given) are rejected.
pub fn decode_pgm(bytes: &[u8], num_classes: Option<usize>) -> Result<LabelMap> {
    let h = parse_header(bytes, b"P5")?;
    let data = payload(bytes, &h, 1)?;
    if let Some(c) = num_classes {
        if let Some(&v) = data.iter().find(|&&v| v as usize > c) {
            return Err(DataError::OversizedLabel {
                value: v,
                num_classes: c,
            });
        }
    }
    Ok(LabelMap::new(h.width, h.height, data.to_vec()))
}

pub fn encode_pgm(map: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend_from_slice(&map.labels);
    out
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    decode_ppm(&fs::read(path).map_err(|e| DataError::io(path, e))?)
}

pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    fs::write(path, encode_ppm(frame)).map_err(|e| DataError::io(path, e))
}

pub fn read_mask(path: &Path, num_classes: Option<usize>) -> Result<LabelMap> {
    decode_pgm(&fs::read(path).map_err(|e| DataError::io(path, e))?, num_classes)
}

pub fn write_mask(path: &Path, map: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm(map)).map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_minimal_p6() {
        let mut bytes = b"P6\n4 2\n255\n".to_vec();
        bytes.extend((0..24).map(|i| i as u8));
        let f = decode_ppm(&bytes).unwrap();
        assert_eq!((f.width, f.height), (4, 2));
        assert_eq!(f.pixel(1, 0), [3, 4, 5]);
        assert_eq!(f.pixel(3, 1), [21, 22, 23]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([1, 0]);
        assert_eq!(decode_pgm(&bytes, Some(1)).unwrap().labels, vec![1, 0]);
    }

    #[test]
    fn malformed_inputs_are_typed_errors() {
        assert!(matches!(
            decode_ppm(b"P5\n1 1\n255\n\0"),
            Err(DataError::BadMagic { .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n2 2\n255\n\0\0\0"),
            Err(DataError::TruncatedFile)
        ));
        assert!(matches!(decode_ppm(b"P6\n2 2"), Err(DataError::TruncatedFile)));
        assert!(matches!(
            decode_pgm(b"P5\n1 1\n65535\n\0\0", None),
            Err(DataError::Format(_))
        ));
        assert!(matches!(
            decode_pgm(b"P5\n1 1\n255\n\x03", Some(2)),
            Err(DataError::OversizedLabel {
                value: 3,
                num_classes: 2
            })
        ));
    }

    proptest! {
        #[test]
        fn frames_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let rgb: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
            let f = Frame::new(w, h, rgb);
            prop_assert_eq!(decode_ppm(&encode_ppm(&f)).unwrap(), f);
        }

        #[test]
        fn masks_round_trip(labels in proptest::collection::vec(0u8..4, 1..64)) {
            let m = LabelMap::new(labels.len(), 1, labels);
            prop_assert_eq!(decode_pgm(&encode_pgm(&m), Some(3)).unwrap(), m);
        }
    }
}
