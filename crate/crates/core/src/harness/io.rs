//! Sample files.
//!
//! An array file is one ASCII header line, `f32 <d0> <d1> ...\n`, followed by
//! the values as little-endian 32-bit floats in row-major order. Samples are
//! named `sample_{class}_{index}` with `.f32` (array) and `.png` (image)
//! extensions.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, ArrayView3, Axis, IxDyn};

use crate::error::{Result, SprintError};
use crate::grid::ImageBatch;

pub fn write_array(path: &Path, shape: &[usize], data: impl IntoIterator<Item = f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    writeln!(w, "f32 {}", dims.join(" "))?;
    let mut n = 0;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
        n += 1;
    }
    if n != shape.iter().product::<usize>() {
        return Err(SprintError::Dimension(format!(
            "wrote {n} values for shape {shape:?}"
        )));
    }
    w.flush()?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<ArrayD<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("f32") {
        return Err(SprintError::InvalidArgument(format!(
            "{} lacks the `f32` array header",
            path.display()
        )));
    }
    let shape = parts
        .map(|p| {
            p.parse::<usize>().map_err(|_| {
                SprintError::InvalidArgument(format!("bad dimension `{p}` in {}", path.display()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(SprintError::InvalidArgument(format!(
            "{} holds {} bytes, shape {shape:?} needs {}",
            path.display(),
            bytes.len(),
            4 * n
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| SprintError::Dimension(e.to_string()))
}

/// Min-max scales one `(H, W, C)` image to 8 bits. One channel gives
/// grayscale, three give RGB; anything else exports the channel mean.
pub fn write_png(path: &Path, image: ArrayView3<'_, f32>) -> Result<()> {
    let (h, w, ch) = image.dim();
    let lo = image.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = image.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let to_u8 = |v: f32| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
    if ch == 3 {
        let buf: Vec<u8> = image.iter().map(|&v| to_u8(v)).collect();
        let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized h*w*3");
        img.save(path)?;
    } else {
        let mean = image.mean_axis(Axis(2)).expect("channels > 0");
        let buf: Vec<u8> = mean.iter().map(|&v| to_u8(v)).collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer sized h*w");
        img.save(path)?;
    }
    Ok(())
}

pub fn sample_stem(class: usize, index: usize) -> String {
    format!("sample_{class}_{index}")
}

/// Writes every sample as `.f32` and, when `png` is set, `.png`; the index in
/// the name is the position in the batch.
pub fn write_samples(
    dir: &Path,
    images: &ImageBatch<f32>,
    labels: &[usize],
    png: bool,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(labels.len());
    for (i, (img, &label)) in images.data.axis_iter(Axis(0)).zip(labels).enumerate() {
        let stem = sample_stem(label, i);
        let path = dir.join(format!("{stem}.f32"));
        write_array(&path, img.shape(), img.iter().copied())?;
        if png {
            write_png(&dir.join(format!("{stem}.png")), img)?;
        }
        paths.push(path);
    }
    Ok(paths)
}

/// Reads every `sample_{class}_{index}.f32` in `dir`, sorted by index.
pub fn read_samples(dir: &Path) -> Result<(ImageBatch<f32>, Vec<usize>)> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("f32") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let mut parts = stem.split('_');
        if parts.next() != Some("sample") {
            continue;
        }
        let parsed = (
            parts.next().and_then(|c| c.parse::<usize>().ok()),
            parts.next().and_then(|i| i.parse::<usize>().ok()),
        );
        if let (Some(class), Some(index)) = parsed {
            found.push((index, class, path));
        }
    }
    if found.is_empty() {
        return Err(SprintError::InvalidArgument(format!(
            "no sample_*_*.f32 files in {}",
            dir.display()
        )));
    }
    found.sort();
    let mut images = Vec::with_capacity(found.len());
    for (_, _, path) in &found {
        let a = read_array(path)?;
        let a: Array3<f32> = a
            .into_dimensionality()
            .map_err(|_| SprintError::Dimension(format!("{} is not an (H, W, C) array", path.display())))?;
        images.push(a);
    }
    let shape = images[0].dim();
    if images.iter().any(|a| a.dim() != shape) {
        return Err(SprintError::Dimension("samples differ in shape".into()));
    }
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views).map_err(|e| SprintError::Dimension(e.to_string()))?;
    let labels = found.iter().map(|(_, c, _)| *c).collect();
    Ok((ImageBatch::new(stacked), labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn array_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f32");
        write_array(&p, &[2, 3], (0..6).map(|i| i as f32 * 0.5)).unwrap();
        let a = read_array(&p).unwrap();
        assert_eq!(a.shape(), &[2, 3]);
        assert_eq!(a[[1, 2]], 2.5);
        assert!(write_array(&p, &[2, 3], [1.0f32]).is_err());
    }

    #[test]
    fn samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = ImageBatch::new(Array4::from_shape_fn((3, 4, 4, 1), |(b, r, c, _)| (b * 16 + r * 4 + c) as f32));
        write_samples(dir.path(), &imgs, &[2, 0, 3], true).unwrap();
        assert!(dir.path().join("sample_3_2.png").exists());
        let (back, labels) = read_samples(dir.path()).unwrap();
        assert_eq!(back, imgs);
        assert_eq!(labels, vec![2, 0, 3]);
    }
}
