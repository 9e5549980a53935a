//! Binary PNM codecs: P6 (RGB) and P5 (grayscale).

use crate::tensor::{Real, Tensor};

/// Decoded raster: `channels` interleaved samples per pixel, scaled to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<Real>,
}

impl Raster {
    /// Planar `[channels, height, width]` tensor.
    pub fn to_chw(&self) -> Tensor {
        let (c, h, w) = (self.channels, self.height, self.width);
        Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / (h * w);
            let p = i % (h * w);
            self.samples[p * c + ch]
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_ws_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, String> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("invalid {what} in header"))
    }
}

/// Decodes a binary P6 or P5 image.
pub fn decode(bytes: &[u8]) -> Result<Raster, String> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err("not a binary PPM/PGM (expected P6 or P5 magic)".into()),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    let width_bytes = if maxval < 256 { 1 } else { 2 };
    let n = width * height * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < n * width_bytes {
        return Err(format!(
            "truncated pixel data: {} bytes, expected {}",
            payload.len(),
            n * width_bytes
        ));
    }
    let scale = maxval as Real;
    let samples = if width_bytes == 1 {
        payload[..n].iter().map(|&v| v as Real / scale).collect()
    } else {
        payload[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as Real / scale)
            .collect()
    };
    Ok(Raster {
        width,
        height,
        channels,
        samples,
    })
}

fn quantize(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[3, H, W]` tensor with values in [0, 1] as P6.
pub fn encode_ppm(image: &Tensor) -> Vec<u8> {
    let s = image.shape();
    assert!(s.len() == 3 && s[0] == 3, "encode_ppm expects [3, H, W], got {s:?}");
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for c in 0..3 {
            out.push(quantize(image.data()[c * plane + p]));
        }
    }
    out
}

/// Encodes an `[H, W]` tensor with values in [0, 1] as P5.
pub fn encode_pgm(map: &Tensor) -> Vec<u8> {
    let s = map.shape();
    assert!(s.len() == 2, "encode_pgm expects [H, W], got {s:?}");
    let mut out = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_decoded_two_by_two() {
        let mut bytes = b"P6\n# test\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 51, 102, 153, 204, 255, 255, 0, 0, 1, 2, 3]);
        let r = decode(&bytes).unwrap();
        let t = r.to_chw();
        assert_eq!(t.shape(), &[3, 2, 2]);
        let expect = |v: u8| v as Real / 255.0;
        assert_eq!(t.at(&[0, 0, 0]), expect(0));
        assert_eq!(t.at(&[1, 0, 0]), expect(51));
        assert_eq!(t.at(&[2, 0, 0]), expect(102));
        assert_eq!(t.at(&[0, 0, 1]), expect(153));
        assert_eq!(t.at(&[2, 0, 1]), 1.0);
        assert_eq!(t.at(&[0, 1, 0]), 1.0);
        assert_eq!(t.at(&[1, 1, 0]), 0.0);
        assert_eq!(t.at(&[2, 1, 1]), expect(3));
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode(b"P3\n1 1\n255\n").is_err());
        assert!(decode(b"P6\n2 2\n255\n\x00\x01").is_err());
        assert!(decode(b"P6\nx 2\n255\n").is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let t = Tensor::from_fn(&[3, 3, 4], |i| (i % 256) as Real / 255.0);
        let back = decode(&encode_ppm(&t)).unwrap().to_chw();
        assert!(back.max_abs_diff(&t) < 1e-12);
        let g = Tensor::from_fn(&[2, 5], |i| i as Real / 9.0);
        let r = decode(&encode_pgm(&g)).unwrap();
        assert_eq!((r.channels, r.height, r.width), (1, 2, 5));
    }
}
