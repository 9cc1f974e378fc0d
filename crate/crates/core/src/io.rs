//! RGB images, binary PNM files, 8-corner box lines and sequence directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, RotatedBox};

/// 8-bit RGB raster, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "image {width}x{height} cannot hold {} bytes",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, rgb.iter().copied().cycle().take(width * height * 3).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut s = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                s[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height) as f64;
        s.map(|v| v / n)
    }
}

fn format_err(path: &str, position: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_string(),
        position,
        msg: msg.into(),
    }
}

struct Header {
    width: usize,
    height: usize,
    payload_start: usize,
}

/// Parses `P5`/`P6` headers (with `#` comments) up to the single whitespace byte before the raster.
fn parse_pnm_header(buf: &[u8], magic: &[u8; 2], path: &str) -> Result<Header> {
    if buf.len() < 2 || &buf[..2] != magic {
        return Err(format_err(path, 0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        loop {
            match buf.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, pos, format!("expected {name}")));
        }
        fields[i] = std::str::from_utf8(&buf[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, start, format!("{name} out of range")))?;
    }
    if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(path, pos, "expected whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(format_err(path, pos, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(format_err(path, pos, format!("maxval {maxval} unsupported (expected 255)")));
    }
    Ok(Header {
        width,
        height,
        payload_start: pos + 1,
    })
}

fn payload<'a>(buf: &'a [u8], h: &Header, channels: usize, path: &str) -> Result<&'a [u8]> {
    let need = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| format_err(path, h.payload_start, "image dimensions overflow"))?;
    let have = buf.len() - h.payload_start;
    if have < need {
        return Err(format_err(
            path,
            buf.len(),
            format!("truncated payload: header declares {need} bytes, found {have}"),
        ));
    }
    if have > need {
        return Err(format_err(path, h.payload_start + need, "trailing bytes after payload"));
    }
    Ok(&buf[h.payload_start..])
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(buf: &[u8], path: &str) -> Result<Image> {
    let h = parse_pnm_header(buf, b"P6", path)?;
    let data = payload(buf, &h, 3, path)?.to_vec();
    Image::new(h.width, h.height, data)
}

/// Masks are stored as 0/255 graymaps.
pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn decode_pgm(buf: &[u8], path: &str) -> Result<BinaryMask> {
    let h = parse_pnm_header(buf, b"P5", path)?;
    let raw = payload(buf, &h, 1, path)?;
    let mut bits = Vec::with_capacity(raw.len());
    for (i, &v) in raw.iter().enumerate() {
        match v {
            0 => bits.push(false),
            255 => bits.push(true),
            other => {
                return Err(format_err(
                    path,
                    h.payload_start + i,
                    format!("mask value {other} is neither 0 nor 255"),
                ))
            }
        }
    }
    BinaryMask::from_bits(h.width, h.height, bits)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    write(path, &encode_ppm(img))
}

pub fn load_image(path: &Path) -> Result<Image> {
    decode_ppm(&read(path)?, &path.display().to_string())
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write(path, &encode_pgm(mask))
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    decode_pgm(&read(path)?, &path.display().to_string())
}

/// `x1,y1,x2,y2,x3,y3,x4,y4` with shortest round-trip float formatting.
pub fn format_box_line(b: &RotatedBox) -> String {
    let mut s = String::new();
    for (i, (x, y)) in b.corners().iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{x},{y}").expect("writing to a String");
    }
    s
}

pub fn parse_box_line(line: &str) -> Result<RotatedBox> {
    let vals: Vec<f64> = line
        .trim()
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(format!("box line `{line}`: {e}")))?;
    if vals.len() != 8 {
        return Err(Error::InvalidArgument(format!(
            "box line `{line}` has {} values, expected 8",
            vals.len()
        )));
    }
    let c = [(vals[0], vals[1]), (vals[2], vals[3]), (vals[4], vals[5]), (vals[6], vals[7])];
    RotatedBox::from_corners(&c)
}

pub fn save_boxes(path: &Path, boxes: &[RotatedBox]) -> Result<()> {
    let mut s = String::new();
    for b in boxes {
        s.push_str(&format_box_line(b));
        s.push('\n');
    }
    write(path, s.as_bytes())
}

pub fn load_boxes(path: &Path) -> Result<Vec<RotatedBox>> {
    let text = String::from_utf8(read(path)?).map_err(|e| format_err(&path.display().to_string(), e.utf8_error().valid_up_to(), "not UTF-8"))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_box_line(l).map_err(|e| format_err(&path.display().to_string(), i + 1, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// `key=value` lines; `#` starts a comment. Repeated keys are rejected.
pub fn parse_key_values(text: &str, path: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format_err(path, i + 1, format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(format_err(path, i + 1, format!("line {}: key `{}` given twice", i + 1, k.trim())));
        }
    }
    Ok(out)
}

pub fn format_key_values<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn frame_name(index: usize, ext: &str) -> String {
    format!("{index:06}.{ext}")
}

/// Frames, masks and boxes of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceData {
    pub frames: Vec<Image>,
    pub masks: Vec<BinaryMask>,
    pub boxes: Vec<RotatedBox>,
    pub meta: BTreeMap<String, String>,
}

impl SequenceData {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `frames/%06d.ppm`, `masks/%06d.pgm`, `boxes.txt` and `meta.txt` under `dir`.
pub fn save_sequence(dir: &Path, seq: &SequenceData) -> Result<()> {
    let frames = dir.join("frames");
    let masks = dir.join("masks");
    ensure_dir(&frames)?;
    ensure_dir(&masks)?;
    for (i, f) in seq.frames.iter().enumerate() {
        save_image(&frames.join(frame_name(i, "ppm")), f)?;
    }
    for (i, m) in seq.masks.iter().enumerate() {
        save_mask(&masks.join(frame_name(i, "pgm")), m)?;
    }
    save_boxes(&dir.join("boxes.txt"), &seq.boxes)?;
    let meta = format_key_values(seq.meta.iter().map(|(k, v)| (k.as_str(), v.clone())));
    write(&dir.join("meta.txt"), meta.as_bytes())
}

/// Sorted files of `dir` with extension `ext`.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_frames(dir: &Path) -> Result<Vec<Image>> {
    list_files(dir, "ppm")?.iter().map(|p| load_image(p)).collect()
}

pub fn load_masks(dir: &Path) -> Result<Vec<BinaryMask>> {
    list_files(dir, "pgm")?.iter().map(|p| load_mask(p)).collect()
}

/// Reads a directory written by [`save_sequence`]; `masks/`, `boxes.txt` and
/// `meta.txt` are optional, but masks and boxes must cover every frame when present.
pub fn load_sequence(dir: &Path) -> Result<SequenceData> {
    let frames = load_frames(&dir.join("frames"))?;
    let masks = if dir.join("masks").is_dir() {
        load_masks(&dir.join("masks"))?
    } else {
        Vec::new()
    };
    let boxes_path = dir.join("boxes.txt");
    let boxes = if boxes_path.exists() {
        load_boxes(&boxes_path)?
    } else {
        Vec::new()
    };
    let meta_path = dir.join("meta.txt");
    let meta = if meta_path.exists() {
        let text = String::from_utf8_lossy(&read(&meta_path)?).into_owned();
        parse_key_values(&text, &meta_path.display().to_string())?
    } else {
        BTreeMap::new()
    };
    if frames.is_empty() {
        return Err(Error::Missing(format!("frames in {}", dir.display())));
    }
    for (what, n) in [("masks", masks.len()), ("boxes", boxes.len())] {
        if n != 0 && n != frames.len() {
            return Err(Error::InvalidArgument(format!(
                "{}: {n} {what} for {} frames",
                dir.display(),
                frames.len()
            )));
        }
    }
    Ok(SequenceData {
        frames,
        masks,
        boxes,
        meta,
    })
}
