//! Dataset directory format: per sample `<id>_rgb.png` (8-bit RGB),
//! `<id>_t.png` (8-bit grey) and `<id>.json` holding `points: [[x, y], ...]`
//! and an optional generator `meta`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use super::{PointAnnotation, SamplePair, SceneMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Annotation {
    points: Vec<PointAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<SceneMeta>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedFile { path: path.to_path_buf(), reason: reason.into() }
}

pub fn write_sample(dir: &Path, s: &SamplePair) -> Result<()> {
    let (h, w) = (s.height(), s.width());
    let hw = h * w;
    let rgb = s.rgb.data();
    let rgb_img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(rgb[i]), to_u8(rgb[hw + i]), to_u8(rgb[2 * hw + i])])
    });
    let t = s.thermal.data();
    let t_img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(t[y as usize * w + x as usize])]));

    let rgb_path = dir.join(format!("{}_rgb.png", s.id));
    rgb_img.save(&rgb_path).map_err(|e| malformed(&rgb_path, e.to_string()))?;
    let t_path = dir.join(format!("{}_t.png", s.id));
    t_img.save(&t_path).map_err(|e| malformed(&t_path, e.to_string()))?;

    let ann = Annotation { points: s.points.clone(), meta: s.meta.clone() };
    let json_path = dir.join(format!("{}.json", s.id));
    let text = serde_json::to_string_pretty(&ann).expect("annotation serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

pub fn write_dataset(dir: &Path, samples: &[SamplePair]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    samples.iter().try_for_each(|s| write_sample(dir, s))
}

fn load_png(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| malformed(path, e.to_string()))
}

pub fn read_sample(dir: &Path, id: &str) -> Result<SamplePair> {
    let json_path = dir.join(format!("{id}.json"));
    if !json_path.exists() {
        return Err(Error::MissingAnnotation { id: id.to_string() });
    }
    let rgb_path = dir.join(format!("{id}_rgb.png"));
    let t_path = dir.join(format!("{id}_t.png"));
    for p in [&rgb_path, &t_path] {
        if !p.exists() {
            return Err(malformed(p, "image file missing"));
        }
    }
    let rgb = load_png(&rgb_path)?;
    let rgb = match rgb {
        image::DynamicImage::ImageRgb8(img) => img,
        other => return Err(malformed(&rgb_path, format!("expected 8-bit RGB, got {:?}", other.color()))),
    };
    let th = match load_png(&t_path)? {
        image::DynamicImage::ImageLuma8(img) => img,
        other => return Err(malformed(&t_path, format!("expected 8-bit grey, got {:?}", other.color()))),
    };
    if rgb.dimensions() != th.dimensions() {
        return Err(malformed(&t_path, format!("size {:?} differs from rgb {:?}", th.dimensions(), rgb.dimensions())));
    }
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let hw = h * w;
    let mut rgb_data = vec![0.0; 3 * hw];
    for (x, y, px) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            rgb_data[c * hw + i] = px.0[c] as f64 / 255.0;
        }
    }
    let t_data: Vec<f64> = th.pixels().map(|p| p.0[0] as f64 / 255.0).collect();

    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let ann: Annotation = serde_json::from_str(&text).map_err(|e| malformed(&json_path, e.to_string()))?;
    if let Some(p) = ann.points.iter().find(|p| !p.in_bounds(h, w)) {
        return Err(malformed(&json_path, format!("point ({}, {}) outside {h}x{w}", p.x, p.y)));
    }
    SamplePair::new(
        id,
        Tensor::from_parts(vec![3, h, w], rgb_data),
        Tensor::from_parts(vec![1, h, w], t_data),
        ann.points,
        ann.meta,
    )
}

fn sample_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let id = name
            .strip_suffix("_rgb.png")
            .or_else(|| name.strip_suffix("_t.png"))
            .or_else(|| name.strip_suffix(".json"));
        if let Some(id) = id {
            ids.insert(id.to_string());
        }
    }
    Ok(ids)
}

/// Reads every sample in `dir`, ordered by id.
pub fn read_dataset(dir: &Path) -> Result<Vec<SamplePair>> {
    if !dir.is_dir() {
        return Err(Error::DatasetMissing(PathBuf::from(dir)));
    }
    sample_ids(dir)?.iter().map(|id| read_sample(dir, id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneSpec};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..5)
            .map(|seed| generate_scene(&SceneSpec { seed, canvas: [64, 96], ..Default::default() }).unwrap())
            .collect();
        write_dataset(dir.path(), &samples).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn missing_annotation_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> =
            (0..2).map(|seed| generate_scene(&SceneSpec { seed, ..Default::default() }).unwrap()).collect();
        write_dataset(dir.path(), &samples).unwrap();
        fs::remove_file(dir.path().join("scene000001.json")).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::MissingAnnotation { id }) => assert_eq!(id, "scene000001"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mismatched_sizes_are_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(&SceneSpec::default()).unwrap();
        write_dataset(dir.path(), std::slice::from_ref(&s)).unwrap();
        GrayImage::new(10, 10).save(dir.path().join(format!("{}_t.png", s.id))).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::MalformedFile { .. })));
    }

    #[test]
    fn missing_directory_is_reported() {
        assert!(matches!(read_dataset(Path::new("/nonexistent/rgbt")), Err(Error::DatasetMissing(_))));
    }
}
