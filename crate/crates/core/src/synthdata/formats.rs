use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Leading float of every `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;

fn display(path: &Path) -> String {
    path.display().to_string()
}

/// Writes a `[3, H, W]` image in `[0, 1]` as binary PPM (`P6`, maxval 255).
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let [3, h, w] = img.shape()[..] else {
        return Err(Error::shape(format!("PPM needs a [3,H,W] image, got {:?}", img.shape())));
    };
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            let v = img.data()[c * h * w + i].clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PPM written by [`write_ppm`] (any maxval up to 255).
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(display(path), msg);
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("missing P6 magic"));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| bad(&format!("invalid {what} {s:?}")))
    };
    let w = num(fields[1], "width")?;
    let h = num(fields[2], "height")?;
    let maxval = num(fields[3], "maxval")?;
    if maxval > 255 {
        return Err(bad("16-bit PPM is not supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < 3 * h * w {
        return Err(bad(&format!("expected {} raster bytes, found {}", 3 * h * w, raster.len())));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = f32::from(raster[3 * i + c]) / maxval as f32;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Writes a `[2, H, W]` flow in the Middlebury `.flo` layout.
pub fn write_flo(path: &Path, flow: &Tensor) -> Result<()> {
    let [2, h, w] = flow.shape()[..] else {
        return Err(Error::shape(format!("flow must be [2,H,W], got {:?}", flow.shape())));
    };
    let mut bytes = Vec::with_capacity(12 + 8 * h * w);
    bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    bytes.extend_from_slice(&(w as i32).to_le_bytes());
    bytes.extend_from_slice(&(h as i32).to_le_bytes());
    for i in 0..h * w {
        bytes.extend_from_slice(&flow.data()[i].to_le_bytes());
        bytes.extend_from_slice(&flow.data()[h * w + i].to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::format(display(path), msg);
    let word = |i: usize| -> Option<[u8; 4]> { bytes.get(4 * i..4 * i + 4).map(|b| b.try_into().expect("4 bytes")) };
    let magic = word(0).map(f32::from_le_bytes);
    if magic != Some(FLO_MAGIC) {
        return Err(bad(format!("bad magic {magic:?}, expected {FLO_MAGIC}")));
    }
    let dims = word(1).zip(word(2)).map(|(a, b)| (i32::from_le_bytes(a), i32::from_le_bytes(b)));
    let Some((w, h)) = dims.filter(|&(w, h)| w > 0 && h > 0) else {
        return Err(bad(format!("invalid dimensions {dims:?}")));
    };
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + 8 * h * w {
        return Err(bad(format!(
            "expected {} bytes for {w}×{h}, found {}",
            12 + 8 * h * w,
            bytes.len()
        )));
    }
    let mut data = vec![0.0f32; 2 * h * w];
    for i in 0..h * w {
        data[i] = f32::from_le_bytes(word(3 + 2 * i).expect("length checked"));
        data[h * w + i] = f32::from_le_bytes(word(4 + 2 * i).expect("length checked"));
    }
    Tensor::new(&[2, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = Tensor::new(&[3, 3, 4], (0..36).map(|i| (i as f32 * 0.173).fract()).collect()).unwrap();
        write_ppm(&path, &img).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n4 3\n255\n"));
        let back = read_ppm(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_eq!((a * 255.0).round() / 255.0, *b);
        }
    }

    #[test]
    fn truncated_ppm_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        fs::write(&path, b"P6\n4 3\n255\n\x01\x02").unwrap();
        assert!(matches!(read_ppm(&path), Err(Error::Format { .. })));
        fs::write(&path, b"P6\n4").unwrap();
        assert!(matches!(read_ppm(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn flo_byte_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        write_flo(&path, &Tensor::from_f64(&[2, 1, 1], &[3.0, -1.5]).unwrap()).unwrap();
        let bytes = fs::read(&path).unwrap();
        let expected: [u8; 20] = [
            b'P', b'I', b'E', b'H', // 202021.25 is "PIEH" in little-endian bytes
            1, 0, 0, 0, // width
            1, 0, 0, 0, // height
            0x00, 0x00, 0x40, 0x40, // 3.0
            0x00, 0x00, 0xc0, 0xbf, // -1.5
        ];
        assert_eq!(bytes, expected);
        fs::write(&path, [0u8; 20]).unwrap();
        assert!(matches!(read_flo(&path), Err(Error::Format { .. })));
    }
}
