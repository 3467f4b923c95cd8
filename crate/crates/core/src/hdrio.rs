//! File codecs: PFM, Radiance RGBE (`.hdr`) and binary PPM/PGM.
//!
//! All readers return [`ImageF`] with rows top to bottom; PFM stores rows
//! bottom-up on disk and is flipped on the way in and out.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageF;

// ---------------------------------------------------------------------------
// Shared header tokenizer for PFM / PNM.

struct Tokens<'a> {
    buf: &'a [u8],
    pos: usize,
    allow_comments: bool,
}

impl<'a> Tokens<'a> {
    fn new(buf: &'a [u8], allow_comments: bool) -> Self {
        Self {
            buf,
            pos: 0,
            allow_comments,
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.buf.len() {
            let b = self.buf[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if self.allow_comments && b == b'#' {
                while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn next(&mut self, format: &'static str) -> Result<&'a str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.buf.len() && !self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(format, "truncated header"));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .map_err(|_| Error::format(format, "non-ASCII header"))
    }

    /// Consumes the single whitespace byte that separates header and payload.
    fn end_header(&mut self, format: &'static str) -> Result<usize> {
        match self.buf.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::format(format, "missing whitespace after header")),
        }
    }
}

fn parse_dim(tok: &str, format: &'static str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(format, format!("bad dimension '{tok}'"))),
    }
}

// ---------------------------------------------------------------------------
// PFM

/// Parsed PFM header.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PfmHeader {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    /// Negative means little-endian payload.
    pub scale: f32,
}

pub fn encode_pfm(img: &ImageF) -> Result<Vec<u8>> {
    let (h, w, c) = img.shape();
    let kind = if c == 3 { "PF" } else { "Pf" };
    let mut out = format!("{kind}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * c * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                let v = img.get(y, x, ch) as f32;
                if !v.is_finite() {
                    return Err(Error::format("PFM", "value not representable as f32"));
                }
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<(PfmHeader, ImageF)> {
    const F: &str = "PFM";
    let mut tok = Tokens::new(bytes, false);
    let channels = match tok.next(F)? {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::format(F, format!("unknown magic '{other}'"))),
    };
    let width = parse_dim(tok.next(F)?, F)?;
    let height = parse_dim(tok.next(F)?, F)?;
    let scale: f32 = tok
        .next(F)?
        .parse()
        .map_err(|_| Error::format(F, "bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(F, "scale must be finite and non-zero"));
    }
    let start = tok.end_header(F)?;
    let n = width * height * channels;
    let payload = &bytes[start..];
    if payload.len() < n * 4 {
        return Err(Error::format(
            F,
            format!("truncated payload: {} of {} bytes", payload.len(), n * 4),
        ));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; n];
    for (i, chunk) in payload[..n * 4].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        // On-disk row r is image row height-1-r.
        let r = i / (width * channels);
        let rest = i % (width * channels);
        data[(height - 1 - r) * width * channels + rest] = f64::from(v);
    }
    let header = PfmHeader {
        channels,
        width,
        height,
        scale,
    };
    Ok((header, ImageF::new(height, width, channels, data)?))
}

pub fn write_pfm(path: impl AsRef<Path>, img: &ImageF) -> Result<()> {
    fs::write(path, encode_pfm(img)?)?;
    Ok(())
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImageF> {
    Ok(decode_pfm(&fs::read(path)?)?.1)
}

// ---------------------------------------------------------------------------
// RGBE

/// Shared-exponent encoding of a non-negative RGB triple.
///
/// Mantissas are rounded to nearest, with the largest clamped to 255 rather
/// than carried into the next exponent. Decoding with `m · 2^(e-136)` is then
/// within `max(r, g, b) / 256` of the input in every channel.
pub fn encode_rgbe(rgb: [f64; 3]) -> [u8; 4] {
    let [r, g, b] = rgb.map(|v| if v.is_finite() { v.max(0.0) } else { 0.0 });
    let max = r.max(g).max(b);
    if max < 1e-32 {
        return [0, 0, 0, 0];
    }
    let (_, exp) = frexp(max);
    // Largest representable exponent byte is 255 (2^127 scale).
    if exp > 127 {
        return [255, 255, 255, 255];
    }
    if exp < -127 {
        return [0, 0, 0, 0];
    }
    let scale = 256.0 / 2f64.powi(exp);
    let m = |v: f64| (v * scale).round().min(255.0) as u8;
    [m(r), m(g), m(b), (exp + 128) as u8]
}

pub fn decode_rgbe(px: [u8; 4]) -> [f64; 3] {
    if px[3] == 0 {
        return [0.0; 3];
    }
    let f = 2f64.powi(i32::from(px[3]) - 136);
    [
        f64::from(px[0]) * f,
        f64::from(px[1]) * f,
        f64::from(px[2]) * f,
    ]
}

/// `v = f · 2^e` with `f` in `[0.5, 1)` for positive finite `v`.
fn frexp(v: f64) -> (f64, i32) {
    let bits = v.to_bits();
    let raw_exp = ((bits >> 52) & 0x7ff) as i32;
    if raw_exp == 0 {
        // Subnormal: renormalize.
        let (f, e) = frexp(v * 2f64.powi(64));
        return (f, e - 64);
    }
    let e = raw_exp - 1022;
    let f = f64::from_bits((bits & !(0x7ff << 52)) | (1022 << 52));
    (f, e)
}

// ---------------------------------------------------------------------------
// Radiance .hdr container

const MIN_RLE_WIDTH: usize = 8;
const MAX_RLE_WIDTH: usize = 0x7fff;

/// Writes one channel of a scanline with the run-length scheme: a count
/// byte above 128 introduces a run of `count - 128` copies; otherwise
/// `count` literal bytes follow.
fn rle_channel(src: &[u8], out: &mut Vec<u8>) {
    const MIN_RUN: usize = 4;
    let n = src.len();
    let mut cur = 0;
    while cur < n {
        // Find the next run of at least MIN_RUN identical bytes.
        let mut beg_run = cur;
        let mut run_count = 0;
        let mut old_run_count = 0;
        while run_count < MIN_RUN && beg_run < n {
            beg_run += run_count;
            old_run_count = run_count;
            run_count = 1;
            while beg_run + run_count < n && run_count < 127 && src[beg_run] == src[beg_run + run_count]
            {
                run_count += 1;
            }
        }
        // A short run right before the long one is cheaper as a run.
        if old_run_count > 1 && old_run_count == beg_run - cur {
            out.push(128 + old_run_count as u8);
            out.push(src[cur]);
            cur = beg_run;
        }
        // Literals up to the start of the run.
        while cur < beg_run {
            let count = (beg_run - cur).min(128);
            out.push(count as u8);
            out.extend_from_slice(&src[cur..cur + count]);
            cur += count;
        }
        if run_count >= MIN_RUN {
            out.push(128 + run_count as u8);
            out.push(src[beg_run]);
            cur += run_count;
        }
    }
}

/// Encodes `img` as a Radiance file with run-length scanlines.
pub fn encode_hdr(img: &ImageF) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::Shape("Radiance images are 3-channel".into()));
    }
    let (h, w, _) = img.shape();
    let mut out = format!("#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {h} +X {w}\n").into_bytes();
    let mut line = vec![[0u8; 4]; w];
    let mut plane = vec![0u8; w];
    for y in 0..h {
        for (x, px) in line.iter_mut().enumerate() {
            *px = encode_rgbe([img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2)]);
        }
        if (MIN_RLE_WIDTH..=MAX_RLE_WIDTH).contains(&w) {
            out.extend_from_slice(&[2, 2, (w >> 8) as u8, (w & 0xff) as u8]);
            for ch in 0..4 {
                for (x, px) in line.iter().enumerate() {
                    plane[x] = px[ch];
                }
                rle_channel(&plane, &mut out);
            }
        } else {
            for px in &line {
                out.extend_from_slice(px);
            }
        }
    }
    Ok(out)
}

fn read_scanline<R: Read>(src: &mut R, width: usize, line: &mut [[u8; 4]]) -> Result<()> {
    const F: &str = "Radiance";
    let mut head = [0u8; 4];
    src.read_exact(&mut head)
        .map_err(|_| Error::format(F, "truncated scanline"))?;
    let is_rle = head[0] == 2 && head[1] == 2 && head[2] & 0x80 == 0;
    if !is_rle || !(MIN_RLE_WIDTH..=MAX_RLE_WIDTH).contains(&width) {
        line[0] = head;
        for px in line.iter_mut().skip(1) {
            src.read_exact(px)
                .map_err(|_| Error::format(F, "truncated flat scanline"))?;
        }
        return Ok(());
    }
    let encoded_width = (usize::from(head[2]) << 8) | usize::from(head[3]);
    if encoded_width != width {
        return Err(Error::format(F, "scanline width mismatch"));
    }
    let mut byte = [0u8; 1];
    for ch in 0..4 {
        let mut x = 0;
        while x < width {
            src.read_exact(&mut byte)
                .map_err(|_| Error::format(F, "truncated run"))?;
            let count = usize::from(byte[0]);
            if count > 128 {
                let run = count - 128;
                if x + run > width {
                    return Err(Error::format(F, "run overflows scanline"));
                }
                src.read_exact(&mut byte)
                    .map_err(|_| Error::format(F, "truncated run"))?;
                for px in &mut line[x..x + run] {
                    px[ch] = byte[0];
                }
                x += run;
            } else {
                if count == 0 || x + count > width {
                    return Err(Error::format(F, "corrupt run length"));
                }
                for px in &mut line[x..x + count] {
                    src.read_exact(&mut byte)
                        .map_err(|_| Error::format(F, "truncated literal"))?;
                    px[ch] = byte[0];
                }
                x += count;
            }
        }
    }
    Ok(())
}

pub fn decode_hdr(bytes: &[u8]) -> Result<ImageF> {
    const F: &str = "Radiance";
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if !(line.starts_with("#?RADIANCE") || line.starts_with("#?RGBE")) {
        return Err(Error::format(F, "missing #?RADIANCE signature"));
    }
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::format(F, "header not terminated"));
        }
        let l = line.trim_end_matches(['\n', '\r']);
        if l.is_empty() {
            break;
        }
        if let Some(fmt) = l.strip_prefix("FORMAT=") {
            if fmt != "32-bit_rle_rgbe" {
                return Err(Error::format(F, format!("unknown format '{fmt}'")));
            }
        }
    }
    line.clear();
    reader.read_line(&mut line)?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    let (h, w) = match parts.as_slice() {
        ["-Y", h, "+X", w] => (parse_dim(h, F)?, parse_dim(w, F)?),
        _ => {
            return Err(Error::format(
                F,
                format!("unsupported resolution line '{}'", line.trim()),
            ))
        }
    };
    let mut data = Vec::with_capacity(h * w * 3);
    let mut scan = vec![[0u8; 4]; w];
    for _ in 0..h {
        read_scanline(&mut reader, w, &mut scan)?;
        for px in &scan {
            data.extend_from_slice(&decode_rgbe(*px));
        }
    }
    ImageF::new(h, w, 3, data)
}

pub fn write_hdr(path: impl AsRef<Path>, img: &ImageF) -> Result<()> {
    fs::write(path, encode_hdr(img)?)?;
    Ok(())
}

pub fn read_hdr(path: impl AsRef<Path>) -> Result<ImageF> {
    decode_hdr(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// PPM / PGM (binary, 8-bit)

#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn encode_ppm(img: &ImageF) -> Vec<u8> {
    let (h, w, c) = img.shape();
    let magic = if c == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| quantize_u8(v)));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageF> {
    const F: &str = "PNM";
    let mut tok = Tokens::new(bytes, true);
    let channels = match tok.next(F)? {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::format(F, format!("unsupported magic '{other}'"))),
    };
    let width = parse_dim(tok.next(F)?, F)?;
    let height = parse_dim(tok.next(F)?, F)?;
    let maxval: u32 = tok
        .next(F)?
        .parse()
        .map_err(|_| Error::format(F, "bad maxval"))?;
    if maxval != 255 {
        return Err(Error::format(F, format!("only 8-bit files supported (maxval {maxval})")));
    }
    let start = tok.end_header(F)?;
    let n = width * height * channels;
    let payload = &bytes[start..];
    if payload.len() < n {
        return Err(Error::format(F, "truncated payload"));
    }
    let data = payload[..n].iter().map(|&b| f64::from(b) / 255.0).collect();
    ImageF::new(height, width, channels, data)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &ImageF) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_ppm(img))?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageF> {
    decode_ppm(&fs::read(path)?)
}

/// Reads an image by extension: `.pfm`, `.hdr`, `.ppm`/`.pgm`/`.pnm`.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageF> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "pfm" => read_pfm(path),
        "hdr" | "pic" => read_hdr(path),
        "ppm" | "pgm" | "pnm" => read_ppm(path),
        other => Err(Error::invalid(format!("unsupported image extension '{other}'"))),
    }
}

/// Writes an image by extension, like [`read_image`].
pub fn write_image(path: impl AsRef<Path>, img: &ImageF) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_str() {
        "pfm" => write_pfm(path, img),
        "hdr" | "pic" => write_hdr(path, img),
        "ppm" | "pgm" | "pnm" => write_ppm(path, img),
        other => Err(Error::invalid(format!("unsupported image extension '{other}'"))),
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn pfm_golden_bytes() {
        let img = ImageF::new(1, 1, 1, vec![0.5]).unwrap();
        let bytes = encode_pfm(&img).unwrap();
        let mut expected = b"Pf\n1 1\n-1.0\n".to_vec();
        expected.extend_from_slice(&[0x00, 0x00, 0x00, 0x3f]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn pfm_big_endian_and_row_order() {
        // 2x1 gray, big-endian: bottom row first on disk.
        let mut bytes = b"Pf\n1 2\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_be_bytes());
        let (hdr, img) = decode_pfm(&bytes).unwrap();
        assert_eq!(hdr.scale, 1.0);
        assert_eq!(img.get(0, 0, 0), -2.0);
        assert_eq!(img.get(1, 0, 0), 1.5);
    }

    #[test]
    fn pfm_errors() {
        assert!(decode_pfm(b"P7\n1 1\n-1.0\n\0\0\0\0").is_err());
        assert!(decode_pfm(b"Pf\n1 1\n-1.0\n\0\0").is_err());
        assert!(decode_pfm(b"Pf\n0 1\n-1.0\n").is_err());
        let huge = ImageF::new(1, 1, 1, vec![1e300]).unwrap();
        assert!(encode_pfm(&huge).is_err());
    }

    #[test]
    fn rgbe_examples() {
        assert_eq!(encode_rgbe([0.0, 0.0, 0.0]), [0, 0, 0, 0]);
        assert_eq!(encode_rgbe([1.0, 1.0, 1.0]), [128, 128, 128, 129]);
        assert_eq!(decode_rgbe([128, 128, 128, 129]), [1.0, 1.0, 1.0]);
        assert_eq!(encode_rgbe([-3.0, 0.0, 0.0]), [0, 0, 0, 0]);
    }

    #[test]
    fn rgbe_relative_error_sweep() {
        // Half a mantissa step relative to the pixel maximum, or the clamp of
        // a maximum just below the next power of two.
        let mut rng = SeededRng::new(5);
        for _ in 0..100_000 {
            let v = [0, 1, 2].map(|_| rng.log_uniform(1e-3, 1e4));
            let d = decode_rgbe(encode_rgbe(v));
            let max = v[0].max(v[1]).max(v[2]);
            for k in 0..3 {
                assert!((v[k] - d[k]).abs() <= max / 256.0, "{v:?} -> {d:?}");
            }
        }
        let just_below = 1.0 - 1e-12;
        assert_eq!(encode_rgbe([just_below, 0.5, 0.0]), [255, 128, 0, 128]);
        let d = decode_rgbe(encode_rgbe([just_below, 0.5, 0.0]));
        assert!((d[0] - just_below).abs() <= just_below / 256.0);
    }

    #[test]
    fn hdr_constant_scanline_compresses() {
        let img = ImageF::filled(2, 64, 3, 0.75);
        let bytes = encode_hdr(&img).unwrap();
        let header = "#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 2 +X 64\n".len();
        assert!(bytes.len() - header < 2 * 64 * 4);
        let back = decode_hdr(&bytes).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn hdr_rejects_bad_inputs() {
        assert!(decode_hdr(b"P6\n").is_err());
        assert!(decode_hdr(b"#?RADIANCE\nFORMAT=32-bit_rle_xyze\n\n-Y 1 +X 1\n\0\0\0\0").is_err());
        assert!(decode_hdr(b"#?RADIANCE\n\n+Y 1 +X 1\n\0\0\0\0").is_err());
        // Width-8 RLE scanline whose run overflows the line.
        let mut bad = b"#?RADIANCE\n\n-Y 1 +X 8\n".to_vec();
        bad.extend_from_slice(&[2, 2, 0, 8, 128 + 9, 1]);
        assert!(decode_hdr(&bad).is_err());
    }

    #[test]
    fn hdr_reads_flat_scanlines() {
        let mut bytes = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 1 +X 2\n".to_vec();
        bytes.extend_from_slice(&[128, 128, 128, 129, 0, 0, 0, 0]);
        let img = decode_hdr(&bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn ppm_header_and_quantization() {
        let img = ImageF::new(1, 2, 3, vec![0.0, 0.5, 1.0, 0.2, 0.8, 1.2]).unwrap();
        let bytes = encode_ppm(&img);
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 51, 204, 255]);
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back.get(0, 0, 1), 128.0 / 255.0);
        let gray = decode_ppm(b"P5\n# comment\n1 1\n255\n\x07").unwrap();
        assert_eq!(gray.data(), &[7.0 / 255.0]);
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0").is_err());
    }

    proptest! {
        #[test]
        fn pfm_round_trip_bitwise(seed in 0u64..1000, h in 1usize..9, w in 1usize..9, gray in any::<bool>()) {
            let mut rng = SeededRng::new(seed);
            let c = if gray { 1 } else { 3 };
            let img = ImageF::from_fn(h, w, c, |_, _, _| f64::from((rng.normal() * 1e3) as f32));
            let back = decode_pfm(&encode_pfm(&img).unwrap()).unwrap().1;
            prop_assert_eq!(back, img);
        }

        #[test]
        fn ppm_round_trip_8bit(seed in 0u64..1000, h in 1usize..9, w in 1usize..9) {
            let mut rng = SeededRng::new(seed);
            let img = ImageF::from_fn(h, w, 3, |_, _, _| rng.index(256) as f64 / 255.0);
            let back = decode_ppm(&encode_ppm(&img)).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn hdr_round_trip_within_rgbe_error(seed in 0u64..500, h in 1usize..6, w in 1usize..40) {
            let mut rng = SeededRng::new(seed);
            // Mix of random pixels and repeated runs so both paths are exercised.
            let img = ImageF::from_fn(h, w, 3, |_, x, _| if x % 11 < 5 { 2.5 } else { rng.log_uniform(1e-2, 1e3) });
            let back = decode_hdr(&encode_hdr(&img).unwrap()).unwrap();
            for i in 0..img.pixels() {
                let (a, b) = (img.pixel(i), back.pixel(i));
                let expected = decode_rgbe(encode_rgbe([a[0], a[1], a[2]]));
                prop_assert_eq!(b, &expected[..]);
            }
        }
    }
}
