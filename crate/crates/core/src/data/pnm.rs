//! Portable graymap/pixmap (P2, P3, P5, P6) reading and writing.

use std::fs;
use std::path::{Path, PathBuf};

use crate::engine::Tensor;

use super::{DataError, Dataset, Source};

/// A decoded image with samples scaled to `[0, 1]`, channel-major `[c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn next_uint(&mut self) -> Result<usize, DataError> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Parse(format!("expected integer at byte {start}")))
    }
}

/// Decodes a PNM image.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image, DataError> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(DataError::Parse("missing PNM magic".into()));
    }
    let (channels, binary) = match bytes[1] {
        b'2' => (1, false),
        b'3' => (3, false),
        b'5' => (1, true),
        b'6' => (3, true),
        m => return Err(DataError::Parse(format!("unsupported PNM type P{}", m as char))),
    };
    let mut tok = Tokens { bytes, pos: 2 };
    let width = tok.next_uint()?;
    let height = tok.next_uint()?;
    let maxval = tok.next_uint()?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(DataError::Parse(format!("bad header {width}x{height} max {maxval}")));
    }
    let n = width * height * channels;
    let mut raw = Vec::with_capacity(n);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = tok.pos + 1;
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        let body = bytes.get(start..start + need).ok_or_else(|| DataError::Parse("truncated raster".into()))?;
        if wide {
            raw.extend(body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as usize));
        } else {
            raw.extend(body.iter().map(|&b| b as usize));
        }
    } else {
        for _ in 0..n {
            raw.push(tok.next_uint()?);
        }
    }
    if let Some(v) = raw.iter().find(|&&v| v > maxval) {
        return Err(DataError::Parse(format!("sample {v} exceeds maxval {maxval}")));
    }
    // interleaved rgb to channel-major
    let mut data = vec![0.0; n];
    for (k, &v) in raw.iter().enumerate() {
        let (pix, c) = (k / channels, k % channels);
        data[c * width * height + pix] = v as f64 / maxval as f64;
    }
    Ok(Image { channels, height, width, data })
}

/// Encodes a `[0, 1]` image as binary P5/P6 with maxval 255.
pub fn encode_pnm(img: &Image) -> Result<Vec<u8>, DataError> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(DataError::Shape(format!("{c} channels cannot be written as PNM"))),
    };
    let plane = img.width * img.height;
    if img.data.len() != plane * img.channels {
        return Err(DataError::Shape(format!("{} samples for {}x{}x{}", img.data.len(), img.channels, img.height, img.width)));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    for pix in 0..plane {
        for c in 0..img.channels {
            out.push(quantize(img.data[c * plane + pix]));
        }
    }
    Ok(out)
}

fn quantize(v01: f64) -> u8 {
    (v01.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Overlap weights mapping `src` samples onto `dst` equal-width bins.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = hi.min(i as f64 + 1.0) - lo.max(i as f64);
                if overlap > 0.0 {
                    w.push((i, overlap / scale));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Resizes by area averaging.
pub fn resize_area(img: &Image, height: usize, width: usize) -> Image {
    if img.height == height && img.width == width {
        return img.clone();
    }
    let wy = area_weights(img.height, height);
    let wx = area_weights(img.width, width);
    let mut data = Vec::with_capacity(img.channels * height * width);
    for c in 0..img.channels {
        let plane = &img.data[c * img.height * img.width..(c + 1) * img.height * img.width];
        for ys in &wy {
            for xs in &wx {
                let mut acc = 0.0;
                for &(y, a) in ys {
                    for &(x, b) in xs {
                        acc += a * b * plane[y * img.width + x];
                    }
                }
                data.push(acc);
            }
        }
    }
    Image { channels: img.channels, height, width, data }
}

fn convert_channels(img: Image, channels: usize) -> Image {
    if img.channels == channels {
        return img;
    }
    let plane = img.height * img.width;
    let data = if channels == 1 {
        (0..plane).map(|p| (img.data[p] + img.data[plane + p] + img.data[2 * plane + p]) / 3.0).collect()
    } else {
        img.data.repeat(3)
    };
    Image { channels, data, ..img }
}

/// Outcome of loading an image folder.
#[derive(Debug)]
pub struct FolderLoad {
    pub dataset: Dataset,
    pub skipped: Vec<PathBuf>,
}

fn is_pnm(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("pgm" | "ppm" | "pnm"))
}

/// Loads every `.pgm`/`.ppm`/`.pnm` file in `path` (sorted by name), resized to
/// `target_size × target_size` and scaled to `[-1, 1]`. Unreadable files are
/// skipped and listed. The channel count follows the first readable image.
pub fn load_image_folder(path: &Path, target_size: usize) -> Result<FolderLoad, DataError> {
    if target_size == 0 {
        return Err(DataError::InvalidConfig("target size must be positive".into()));
    }
    let io = |e| DataError::Io { path: path.display().to_string(), source: e };
    let mut files: Vec<PathBuf> = fs::read_dir(path).map_err(io)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_pnm(p)).collect();
    files.sort();
    let mut images = Vec::new();
    let mut ids = Vec::new();
    let mut skipped = Vec::new();
    let mut channels = None;
    for f in files {
        match fs::read(&f).map_err(|e| DataError::Io { path: f.display().to_string(), source: e }).and_then(|b| decode_pnm(&b)) {
            Ok(img) => {
                let c = *channels.get_or_insert(img.channels);
                let img = resize_area(&convert_channels(img, c), target_size, target_size);
                images.push(img);
                ids.push(f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
            }
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", f.display());
                skipped.push(f);
            }
        }
    }
    let c = channels.ok_or_else(|| DataError::Empty(format!("no readable images in {}", path.display())))?;
    let dim = c * target_size * target_size;
    let data: Vec<f64> = images.iter().flat_map(|img| img.data.iter().map(|v| 2.0 * v - 1.0)).collect();
    let examples = Tensor::new(vec![images.len(), dim], data)?;
    let dataset = Dataset::new(examples, vec![c, target_size, target_size], Source::ImageFolder(path.to_path_buf()))?.with_ids(ids)?;
    Ok(FolderLoad { dataset, skipped })
}

/// Maps one `[-1, 1]` example of shape `[c, h, w]` (or `[h, w]`) to an image.
pub fn example_to_image(example: &[f64], shape: &[usize]) -> Result<Image, DataError> {
    let (channels, height, width) = match *shape {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => return Err(DataError::Shape(format!("example shape {shape:?} is not an image"))),
    };
    if example.len() != channels * height * width {
        return Err(DataError::Shape(format!("{} values for shape {shape:?}", example.len())));
    }
    Ok(Image { channels, height, width, data: example.iter().map(|v| (v + 1.0) / 2.0).collect() })
}

/// Tiles `[n, dim]` image examples into one grid with a one-pixel border.
pub fn sample_grid(samples: &Tensor, shape: &[usize], cols: usize) -> Result<Image, DataError> {
    let n = samples.rows();
    if n == 0 || cols == 0 {
        return Err(DataError::Empty("sample grid needs samples and columns".into()));
    }
    let first = example_to_image(samples.row(0), shape)?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut data = vec![0.0; c * gh * gw];
    for k in 0..n {
        let img = example_to_image(samples.row(k), shape)?;
        let (oy, ox) = ((k / cols) * (h + 1) + 1, (k % cols) * (w + 1) + 1);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[ch * gh * gw + (oy + y) * gw + ox + x] = img.data[ch * h * w + y * w + x];
                }
            }
        }
    }
    Ok(Image { channels: c, height: gh, width: gw, data })
}

pub fn write_pnm(path: &Path, img: &Image) -> Result<(), DataError> {
    fs::write(path, encode_pnm(img)?).map_err(|e| DataError::Io { path: path.display().to_string(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_and_binary_agree() {
        let ascii = b"P2\n# c\n2 1\n255\n0 255\n";
        let bin = [b"P5\n2 1\n255\n".as_slice(), &[0u8, 255]].concat();
        assert_eq!(decode_pnm(ascii).unwrap(), decode_pnm(&bin).unwrap());
        let rgb = decode_pnm(b"P3 1 1 255 255 0 51").unwrap();
        assert_eq!(rgb.data, vec![1.0, 0.0, 0.2]);
    }

    #[test]
    fn area_resize_averages() {
        let img = Image { channels: 1, height: 2, width: 2, data: vec![0.0, 1.0, 1.0, 0.0] };
        let small = resize_area(&img, 1, 1);
        assert!((small.data[0] - 0.5).abs() < 1e-12);
        let odd = Image { channels: 1, height: 1, width: 3, data: vec![0.0, 0.0, 1.0] };
        let r = resize_area(&odd, 1, 2);
        assert!((r.data[0] - 0.0).abs() < 1e-12 && (r.data[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(decode_pnm(b"P9 1 1 255 0").is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pnm(b"P2 1 1 10 11").is_err());
    }
}
