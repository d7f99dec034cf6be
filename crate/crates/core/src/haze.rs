//! Procedural clean scenes and atmospheric-scattering haze.
//!
//! A hazy pixel is `I = J·t + A·(1 - t)` with transmission `t = exp(-β·d)`
//! over a smooth pseudo-depth field `d`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const AIRLIGHT_RANGE: (f32, f32) = (0.7, 1.0);
pub const BETA_RANGE: (f32, f32) = (0.4, 1.6);

/// Clean / hazy pair of `[H, W, 3]` images in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub clean: Tensor,
    pub hazy: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazeParams {
    pub airlight: f32,
    pub beta: f32,
    /// Per-pixel transmission `[H, W]`, each value in `(0, 1]`.
    pub transmission: Tensor,
}

impl HazeParams {
    /// Airlight and scattering coefficient drawn uniformly from their ranges,
    /// over a random smooth depth field.
    pub fn random(side: usize, rng: &mut impl Rng) -> Self {
        let airlight = rng.gen_range(AIRLIGHT_RANGE.0..=AIRLIGHT_RANGE.1);
        let beta = rng.gen_range(BETA_RANGE.0..=BETA_RANGE.1);
        let depth = depth_field(side, rng);
        HazeParams {
            airlight,
            beta,
            transmission: depth.map(|d| (-beta * d).exp()),
        }
    }
}

/// Depth in roughly `[0.2, 1.6]`: a vertical ramp (far at the top) plus a
/// bilinearly upsampled 4×4 noise grid.
fn depth_field(side: usize, rng: &mut impl Rng) -> Tensor {
    const GRID: usize = 4;
    let coarse: Vec<f32> = (0..(GRID + 1) * (GRID + 1)).map(|_| rng.gen::<f32>()).collect();
    let tilt = rng.gen_range(0.4..1.0f32);
    let s = side as f32;
    Tensor::from_fn([side, side], |i| {
        let (y, x) = ((i / side) as f32, (i % side) as f32);
        let (gy, gx) = (y / s * GRID as f32, x / s * GRID as f32);
        let (iy, ix) = (gy as usize, gx as usize);
        let (fy, fx) = (gy - iy as f32, gx - ix as f32);
        let at = |r: usize, c: usize| coarse[r * (GRID + 1) + c];
        let noise = (1.0 - fy) * ((1.0 - fx) * at(iy, ix) + fx * at(iy, ix + 1))
            + fy * ((1.0 - fx) * at(iy + 1, ix) + fx * at(iy + 1, ix + 1));
        0.2 + tilt * (1.0 - y / s) + 0.6 * noise
    })
}

pub fn synthesize_haze(clean: &Tensor, p: &HazeParams) -> Result<Tensor> {
    let (h, w, c) = clean.hwc()?;
    if p.transmission.shape() != [h, w] {
        return Err(Error::Dimension {
            op: "synthesize_haze",
            lhs: clean.shape().to_vec(),
            rhs: p.transmission.shape().to_vec(),
        });
    }
    if let Some(t) = p.transmission.data().iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Param(format!("transmission must lie in (0, 1], found {t}")));
    }
    let a = p.airlight;
    let t = p.transmission.data();
    Ok(Tensor::from_fn([h, w, c], |i| {
        let ti = t[i / c];
        clean.data()[i] * ti + a * (1.0 - ti)
    }))
}

/// A random scene: two-colour gradient background, a few rectangles and
/// disks, and a faint sinusoidal texture.
pub fn clean_scene(side: usize, rng: &mut impl Rng) -> Tensor {
    let s = side as f32;
    fn color(rng: &mut impl Rng) -> [f32; 3] {
        std::array::from_fn(|_| rng.gen_range(0.0..0.85f32))
    }
    let c0 = color(rng);
    let c1 = color(rng);
    let angle = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut img = vec![0.0f32; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let u = ((x as f32 / s - 0.5) * dx + (y as f32 / s - 0.5) * dy + 0.71) / 1.42;
            for ch in 0..3 {
                img[(y * side + x) * 3 + ch] = c0[ch] * (1.0 - u) + c1[ch] * u;
            }
        }
    }
    let shapes = rng.gen_range(3..8);
    for _ in 0..shapes {
        let col = color(rng);
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let (rx, ry) = (rng.gen_range(0.05..0.3) * s, rng.gen_range(0.05..0.3) * s);
        let disk = rng.gen_bool(0.5);
        for y in 0..side {
            for x in 0..side {
                let (ox, oy) = ((x as f32 - cx) / rx, (y as f32 - cy) / ry);
                let inside = if disk { ox * ox + oy * oy <= 1.0 } else { ox.abs() <= 1.0 && oy.abs() <= 1.0 };
                if inside {
                    img[(y * side + x) * 3..][..3].copy_from_slice(&col);
                }
            }
        }
    }
    let freq = rng.gen_range(2.0..10.0f32) * std::f32::consts::TAU / s;
    let amp = rng.gen_range(0.02..0.08f32);
    let phase = rng.gen_range(0.0..std::f32::consts::TAU);
    for y in 0..side {
        for x in 0..side {
            let wave = amp * (freq * (x as f32 * dy - y as f32 * dx) + phase).sin();
            for v in &mut img[(y * side + x) * 3..][..3] {
                *v = (*v + wave).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_parts(vec![side, side, 3], img)
}

/// `count` pairs; item `i` depends only on `(seed, i)`.
pub fn make_dataset(count: usize, side: usize, seed: u64) -> Result<Vec<Pair>> {
    if side < 16 || !side.is_power_of_two() {
        return Err(Error::Param(format!("image side must be a power of two of at least 16, got {side}")));
    }
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let clean = clean_scene(side, &mut rng);
            let params = HazeParams::random(side, &mut rng);
            let hazy = synthesize_haze(&clean, &params)?;
            Ok(Pair { clean, hazy })
        })
        .collect()
}

/// Binary PPM (P6), 8 bits per channel.
pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = img.hwc()?;
    if c != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, got {c}")));
    }
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes).map_err(|m| Error::Format(format!("{}: {m}", path.display())))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
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
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P6" {
        return Err(format!("unsupported magic {:?}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("only 8-bit PPM is supported, max value {max}"));
    }
    let n = w * h * 3;
    let raster = bytes.get(pos..pos + n).ok_or("truncated raster")?;
    let data = raster.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::from_parts(vec![h, w, 3], data))
}

pub fn clean_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("{i}_clean.ppm"))
}

pub fn hazy_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("{i}_hazy.ppm"))
}

pub fn save_dataset(dir: impl AsRef<Path>, pairs: &[Pair]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, p) in pairs.iter().enumerate() {
        write_ppm(clean_path(dir, i), &p.clean)?;
        write_ppm(hazy_path(dir, i), &p.hazy)?;
    }
    Ok(())
}

/// Reads `0_clean.ppm`/`0_hazy.ppm`, `1_…` until the first missing index.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Pair>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    let mut out = Vec::new();
    while clean_path(dir, out.len()).exists() {
        let i = out.len();
        let clean = read_ppm(clean_path(dir, i))?;
        let hazy = read_ppm(hazy_path(dir, i))?;
        if clean.shape() != hazy.shape() {
            return Err(Error::Format(format!("pair {i} has mismatched sizes")));
        }
        out.push(Pair { clean, hazy });
    }
    if out.is_empty() {
        return Err(Error::Format(format!("no image pairs in {}", dir.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    #[test]
    fn full_transmission_is_identity() {
        let clean = Tensor::from_fn([8, 8, 3], |i| (i % 7) as f32 / 7.0);
        let p = HazeParams {
            airlight: 0.9,
            beta: 0.0,
            transmission: Tensor::full([8, 8], 1.0),
        };
        assert_eq!(synthesize_haze(&clean, &p).unwrap(), clean);
    }

    #[test]
    fn half_transmission_example() {
        let clean = Tensor::full([2, 2, 3], 0.2);
        let p = HazeParams {
            airlight: 1.0,
            beta: 1.0,
            transmission: Tensor::full([2, 2], 0.5),
        };
        let hazy = synthesize_haze(&clean, &p).unwrap();
        assert!(hazy.data().iter().all(|v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn rejects_zero_transmission() {
        let p = HazeParams {
            airlight: 1.0,
            beta: 1.0,
            transmission: Tensor::zeros([2, 2]),
        };
        assert!(matches!(synthesize_haze(&Tensor::zeros([2, 2, 3]), &p), Err(Error::Param(_))));
    }

    #[test]
    fn dataset_is_deterministic_and_in_range() {
        let a = make_dataset(4, 32, 9).unwrap();
        let b = make_dataset(4, 32, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], make_dataset(1, 32, 10).unwrap()[0]);
        // prefix stability: item i does not depend on count
        assert_eq!(make_dataset(2, 32, 9).unwrap()[1], a[1]);
        for p in &a {
            for t in [&p.clean, &p.hazy] {
                assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn hazy_psnr_is_moderate() {
        let pairs = make_dataset(40, 64, 3).unwrap();
        let mean: f64 = pairs.iter().map(|p| psnr(&p.hazy, &p.clean).unwrap()).sum::<f64>() / 40.0;
        assert!((8.0..20.0).contains(&mean), "mean hazy psnr {mean}");
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = make_dataset(2, 16, 1).unwrap();
        save_dataset(dir.path(), &pairs).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in pairs.iter().zip(&back) {
            assert!(a.hazy.max_abs_diff(&b.hazy) <= 0.5 / 255.0 + 1e-6);
        }
        // quantized values survive exactly
        let path = dir.path().join("x.ppm");
        write_ppm(&path, &back[0].clean).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), back[0].clean);
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let mut bytes = b"P6 # c\n2 1\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 255, 0]);
        let t = parse_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(t.data()[4], 1.0);
        assert!(parse_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(parse_ppm(b"P6\n4 4\n255\n\x00").is_err());
    }
}
