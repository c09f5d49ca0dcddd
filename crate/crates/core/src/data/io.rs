//! On-disk formats.
//!
//! * HDR raw (`.lfhd`): `b"LFHD"`, then width, height and channel count as
//!   little-endian `u32`, then `f32` little-endian samples, row-major and
//!   channel-interleaved.
//! * LDR: binary P6 PPM with maxval 255, `q = round(255 x)`.
//! * Scene directory: `scene_<seed>/{ldr_0.ppm, ldr_1.ppm, ldr_2.ppm,
//!   exposures.txt, gt.lfhd}`, one EV per line in `exposures.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ExposureStack, HdrImage, ImageTensor, LdrImage};
use crate::error::{Error, Result};

pub const HDR_MAGIC: &[u8; 4] = b"LFHD";
const HDR_HEADER_LEN: usize = 16;

fn fmt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

pub fn write_hdr_raw(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let px = img.pixels();
    let (h, w, c) = px.dims();
    let mut buf = Vec::with_capacity(HDR_HEADER_LEN + px.data().len() * 4);
    buf.extend_from_slice(HDR_MAGIC);
    for dim in [w, h, c] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in px.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_hdr_raw(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HDR_HEADER_LEN {
        return Err(fmt_err(path, "truncated header"));
    }
    if &bytes[..4] != HDR_MAGIC {
        return Err(fmt_err(path, "bad magic"));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (word(0), word(1), word(2));
    let count = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| fmt_err(path, "dimension overflow"))?;
    let payload = &bytes[HDR_HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(fmt_err(
            path,
            format!(
                "payload holds {} bytes, header implies {}",
                payload.len(),
                count * 4
            ),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(fmt_err(path, "non-finite sample"));
    }
    let tensor = ImageTensor::new(h, w, c, data).map_err(|e| fmt_err(path, e))?;
    HdrImage::new(tensor).map_err(|e| fmt_err(path, e))
}

pub fn write_ldr_ppm(img: &LdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let px = img.pixels();
    let mut buf = format!("P6\n{} {}\n255\n", px.width(), px.height()).into_bytes();
    buf.extend(
        px.data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a P6 PPM; the exposure value is not part of the format and is
/// supplied by the caller.
pub fn read_ldr_ppm(path: impl AsRef<Path>, exposure_value: f32) -> Result<LdrImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err(path, "truncated PPM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if next_token(&bytes)? != "P6" {
        return Err(fmt_err(path, "not a binary P6 PPM"));
    }
    let mut num = |what: &str| -> Result<usize> {
        let tok = next_token(&bytes)?;
        tok.parse::<usize>()
            .map_err(|_| fmt_err(path, format!("bad {what} '{tok}'")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(fmt_err(path, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != w * h * 3 {
        return Err(fmt_err(
            path,
            format!(
                "raster holds {} bytes, expected {}",
                payload.len(),
                w * h * 3
            ),
        ));
    }
    let data = payload.iter().map(|&q| q as f32 / 255.0).collect();
    let tensor = ImageTensor::new(h, w, 3, data).map_err(|e| fmt_err(path, e))?;
    LdrImage::new(tensor, exposure_value)
}

pub fn write_exposures(evs: [f32; 3], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text: String = evs.iter().map(|v| format!("{v}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_exposures(path: impl AsRef<Path>) -> Result<[f32; 3]> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values: Vec<f32> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<f32>()
                .map_err(|_| fmt_err(path, format!("bad exposure '{l}'")))
        })
        .collect::<Result<_>>()?;
    values
        .try_into()
        .map_err(|v: Vec<f32>| fmt_err(path, format!("expected 3 exposures, found {}", v.len())))
}

/// Writes `stack` as `dir/{ldr_0.ppm, ldr_1.ppm, ldr_2.ppm, exposures.txt, gt.lfhd}`.
pub fn save_scene(stack: &ExposureStack, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in stack.frames().iter().enumerate() {
        write_ldr_ppm(frame, dir.join(format!("ldr_{i}.ppm")))?;
    }
    write_exposures(stack.exposure_values(), dir.join("exposures.txt"))?;
    if let Some(gt) = stack.ground_truth() {
        write_hdr_raw(gt, dir.join("gt.lfhd"))?;
    }
    Ok(())
}

/// Loads a scene directory; `gt.lfhd` is optional.
pub fn load_scene(dir: impl AsRef<Path>) -> Result<ExposureStack> {
    let dir = dir.as_ref();
    let evs = read_exposures(dir.join("exposures.txt"))?;
    let frames = [
        read_ldr_ppm(dir.join("ldr_0.ppm"), evs[0])?,
        read_ldr_ppm(dir.join("ldr_1.ppm"), evs[1])?,
        read_ldr_ppm(dir.join("ldr_2.ppm"), evs[2])?,
    ];
    let gt_path = dir.join("gt.lfhd");
    let gt = if gt_path.exists() {
        Some(read_hdr_raw(&gt_path)?)
    } else {
        None
    };
    ExposureStack::new(frames, gt)
}

/// Scene directories (`scene_*`) under `root`, sorted by name.
pub fn list_scenes(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let is_scene = entry.file_name().to_string_lossy().starts_with("scene_");
        if is_scene && entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_pixel_hdr_file_is_28_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.lfhd");
        let img = HdrImage::new(ImageTensor::zeros(1, 1, 3)).unwrap();
        write_hdr_raw(&img, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 28);
        assert_eq!(&bytes[..4], b"LFHD");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0]);
        assert!(bytes[16..].iter().all(|&b| b == 0));
    }

    #[test]
    fn hdr_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.lfhd");
        let t = ImageTensor::from_fn(5, 7, 3, |y, x, c| {
            ((y * 31 + x * 7 + c) % 97) as f32 / 97.0 + 1e-7
        });
        let img = HdrImage::new(t).unwrap();
        write_hdr_raw(&img, &p).unwrap();
        let back = read_hdr_raw(&p).unwrap();
        let bits = |i: &HdrImage| {
            i.pixels()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&img), bits(&back));
        assert_eq!(back.pixels().dims(), (5, 7, 3));
    }

    #[test]
    fn hdr_read_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.lfhd");
        let img = HdrImage::new(ImageTensor::filled(2, 2, 3, 0.5)).unwrap();
        write_hdr_raw(&img, &p).unwrap();
        let good = fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_hdr_raw(&p), Err(Error::Format(_))));

        fs::write(&p, &good[..good.len() - 3]).unwrap();
        assert!(matches!(read_hdr_raw(&p), Err(Error::Format(_))));

        let mut nan = good.clone();
        nan[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, &nan).unwrap();
        assert!(matches!(read_hdr_raw(&p), Err(Error::Format(_))));
    }

    #[test]
    fn ppm_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let vals = [
            0.0,
            1.0,
            0.5,
            0.2,
            0.4,
            0.6,
            1.0 / 255.0,
            0.999,
            0.001,
            0.25,
            0.75,
            0.1,
        ];
        let img = LdrImage::new(ImageTensor::new(2, 2, 3, vals.to_vec()).unwrap(), 0.0).unwrap();
        write_ldr_ppm(&img, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        // round(255 x) for each value
        assert_eq!(
            &bytes[header.len()..],
            &[0, 255, 128, 51, 102, 153, 1, 255, 0, 64, 191, 26]
        );
    }

    #[test]
    fn ppm_white_and_roundtrip_bound() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ppm");
        let white = LdrImage::new(ImageTensor::filled(3, 4, 3, 1.0), 0.0).unwrap();
        write_ldr_ppm(&white, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes[b"P6\n4 3\n255\n".len()..].iter().all(|&b| b == 255));

        let t = ImageTensor::from_fn(9, 11, 3, |y, x, c| {
            ((y * 13 + x * 5 + c * 3) % 101) as f32 / 100.0
        });
        let img = LdrImage::new(t, 2.0).unwrap();
        write_ldr_ppm(&img, &p).unwrap();
        let back = read_ldr_ppm(&p, 2.0).unwrap();
        for (a, b) in img.pixels().data().iter().zip(back.pixels().data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
        }
    }

    #[test]
    fn ppm_malformed_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        fs::write(&p, b"P3\n1 1\n255\n\x00\x00\x00").unwrap();
        assert!(matches!(read_ldr_ppm(&p, 0.0), Err(Error::Format(_))));
        fs::write(&p, b"P6\n1 x\n255\n\x00\x00\x00").unwrap();
        assert!(matches!(read_ldr_ppm(&p, 0.0), Err(Error::Format(_))));
        fs::write(&p, b"P6\n2 2\n255\n\x00\x00\x00").unwrap();
        assert!(matches!(read_ldr_ppm(&p, 0.0), Err(Error::Format(_))));
        fs::write(&p, b"P6\n# comment\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(
            read_ldr_ppm(&p, 0.0).unwrap().pixels().get(0, 0, 2),
            3.0 / 255.0
        );
    }

    #[test]
    fn exposures_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exposures.txt");
        write_exposures([-2.0, 0.0, 2.0], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "-2\n0\n2\n");
        assert_eq!(read_exposures(&p).unwrap(), [-2.0, 0.0, 2.0]);
        fs::write(&p, "1\n2\n").unwrap();
        assert!(matches!(read_exposures(&p), Err(Error::Format(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn hdr_roundtrip_bits(h in 1usize..6, w in 1usize..6, seed in any::<u32>()) {
                let dir = tempfile::tempdir().unwrap();
                let p = dir.path().join("p.lfhd");
                let mut s = seed as u64 | 1;
                let t = ImageTensor::from_fn(h, w, 3, |_, _, _| {
                    s ^= s << 13;
                    s ^= s >> 7;
                    s ^= s << 17;
                    (s >> 40) as f32 / (1u64 << 24) as f32
                });
                let img = HdrImage::new(t).unwrap();
                write_hdr_raw(&img, &p).unwrap();
                let back = read_hdr_raw(&p).unwrap();
                let bits = |i: &HdrImage| i.pixels().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&img), bits(&back));
            }
        }
    }
}
