//! Dataset layout and 8-bit image file I/O.
//!
//! A dataset root holds `input/` (shadow images), `mask/` and optionally `gt/`
//! (shadow-free images). Files pair by stem, so `input/a.jpg` matches `mask/a.png`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result, UnpairedFile};
use crate::image::{same_dims, Plane, RgbImage};

pub const INPUT_DIR: &str = "input";
pub const MASK_DIR: &str = "mask";
pub const GT_DIR: &str = "gt";
/// Optional split manifest at the dataset root: one id per line.
pub const MANIFEST_FILE: &str = "manifest.txt";

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// File locations of one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletPaths {
    pub id: String,
    pub input: PathBuf,
    pub mask: PathBuf,
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub id: String,
    pub shadow: RgbImage,
    pub gt: Option<RgbImage>,
    pub mask: Plane,
}

impl Triplet {
    pub fn validate(&self) -> Result<()> {
        self.shadow.validate()?;
        self.mask.validate()?;
        same_dims(self.shadow.dims(), self.mask.dims(), "mask")?;
        if let Some(gt) = &self.gt {
            gt.validate()?;
            same_dims(self.shadow.dims(), gt.dims(), "ground truth")?;
        }
        Ok(())
    }
}

/// Image files of `dir` keyed by stem. A missing directory is empty.
pub fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.to_owned(), path.clone()) {
            return Err(Error::validation(format!(
                "{} and {} share the id `{stem}`",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Lists the samples under `root`, ordered by id (byte-wise).
///
/// Inputs without a mask, and masks without an input, are reported together as
/// [`Error::Unpaired`]. A missing ground-truth file is not an error.
pub fn scan_dataset(root: &Path) -> Result<Vec<TripletPaths>> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root does not exist"),
        ));
    }
    let inputs = images_by_stem(&root.join(INPUT_DIR))?;
    let masks = images_by_stem(&root.join(MASK_DIR))?;
    let gts = images_by_stem(&root.join(GT_DIR))?;
    let mut unpaired = Vec::new();
    for (id, path) in &inputs {
        if !masks.contains_key(id) {
            unpaired.push(UnpairedFile {
                path: path.clone(),
                missing: "mask",
            });
        }
    }
    for (id, path) in &masks {
        if !inputs.contains_key(id) {
            unpaired.push(UnpairedFile {
                path: path.clone(),
                missing: "input",
            });
        }
    }
    if !unpaired.is_empty() {
        return Err(Error::Unpaired(unpaired));
    }
    Ok(inputs
        .into_iter()
        .map(|(id, input)| TripletPaths {
            mask: masks[&id].clone(),
            gt: gts.get(&id).cloned(),
            input,
            id,
        })
        .collect())
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

/// Restricts a scan to the ids of a manifest, in scan order. Unknown ids are an error.
pub fn filter_by_manifest(samples: Vec<TripletPaths>, ids: &[String]) -> Result<Vec<TripletPaths>> {
    for id in ids {
        if !samples.iter().any(|s| &s.id == id) {
            return Err(Error::validation(format!("manifest id `{id}` not found in dataset")));
        }
    }
    Ok(samples.into_iter().filter(|s| ids.contains(&s.id)).collect())
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_owned(),
            source,
        },
    })
}

/// Loads an 8-bit image, scaled to `[0,1]`.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    RgbImage::new(h as usize, w as usize, data)
}

/// Loads a mask as one channel; values above 127 become 1.
pub fn load_mask(path: &Path) -> Result<Plane> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| if v > 127 { 1.0 } else { 0.0 })
        .collect();
    Plane::new(h as usize, w as usize, data)
}

/// Loads a single-channel plane scaled to `[0,1]` without thresholding.
pub fn load_plane(path: &Path) -> Result<Plane> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Plane::new(h as usize, w as usize, data)
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn save(path: &Path, write: impl FnOnce() -> image::ImageResult<()>) -> Result<()> {
    ensure_parent(path)?;
    write().map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_owned(),
            source,
        },
    })
}

/// Saves as 8-bit; the format follows the extension.
pub fn save_image(path: &Path, img: &RgbImage) -> Result<()> {
    img.ensure_finite()?;
    let (h, w) = img.dims();
    let raw = img.data().iter().map(|v| to_u8(*v)).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer sized from dims");
    save(path, || buf.save(path))
}

/// Saves a plane as 8-bit grayscale.
pub fn save_plane(path: &Path, p: &Plane) -> Result<()> {
    p.ensure_finite()?;
    let (h, w) = p.dims();
    let raw = p.data().iter().map(|v| to_u8(*v)).collect();
    let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw).expect("buffer sized from dims");
    save(path, || buf.save(path))
}

/// Loads every sample of a scan.
pub fn load_triplets(paths: &[TripletPaths]) -> Result<Vec<Triplet>> {
    paths.iter().map(load_triplet).collect()
}

pub fn load_triplet(p: &TripletPaths) -> Result<Triplet> {
    let t = Triplet {
        id: p.id.clone(),
        shadow: load_image(&p.input)?,
        gt: p.gt.as_deref().map(load_image).transpose()?,
        mask: load_mask(&p.mask)?,
    };
    t.validate()?;
    Ok(t)
}

/// Writes a triplet as PNGs into the dataset layout under `root`.
pub fn write_triplet(root: &Path, t: &Triplet) -> Result<()> {
    t.validate()?;
    let name = format!("{}.png", t.id);
    save_image(&root.join(INPUT_DIR).join(&name), &t.shadow)?;
    save_plane(&root.join(MASK_DIR).join(&name), &t.mask)?;
    if let Some(gt) = &t.gt {
        save_image(&root.join(GT_DIR).join(&name), gt)?;
    }
    Ok(())
}

/// Rounds every value to the nearest 8-bit level, as a save/load cycle would.
pub fn quantize8(img: &RgbImage) -> RgbImage {
    img.map(|v| f64::from(to_u8(v)) / 255.0)
}
