//! On-disk datasets laid out as
//! `<root>/<split>/<category>/{camo/{images,masks}, ref/{images,masks}}`.
//!
//! Enumeration only touches directory listings; pixels are decoded per item.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, RgbImage};
use log::warn;
use refcod_tensor::Tensor;

use super::{DataError, Reference, Sample};
use crate::config::FolderLayout;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// One query image and its mask on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FolderItem {
    pub id: String,
    pub category: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct FolderDataset {
    pub items: Vec<FolderItem>,
    /// Reference `(image, mask)` paths per category, sorted by file name.
    pub references: BTreeMap<String, Vec<(PathBuf, PathBuf)>>,
    /// One line per skipped file.
    pub warnings: Vec<String>,
    /// Square side every image is resized to, if set.
    pub resize: Option<u32>,
    /// At most this many references are attached to a sample.
    pub refs_per_sample: usize,
}

impl FolderDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Decodes item `index` with its category's references.
    pub fn get(&self, index: usize) -> Result<Sample, DataError> {
        let item = &self.items[index];
        let query = read_rgb(&item.image, self.resize)?;
        let gt = read_mask(&item.mask, self.resize)?;
        if query.shape()[1..] != *gt.shape() {
            return Err(DataError::SizeMismatch {
                path: item.mask.clone(),
                expected: (query.shape()[2] as u32, query.shape()[1] as u32),
                found: (gt.shape()[1] as u32, gt.shape()[0] as u32),
            });
        }
        let references = self
            .references
            .get(&item.category)
            .map(Vec::as_slice)
            .unwrap_or_default()
            .iter()
            .take(self.refs_per_sample)
            .map(|(image, mask)| {
                Ok(Reference {
                    image: read_rgb(image, self.resize)?,
                    mask: read_mask(mask, self.resize)?,
                })
            })
            .collect::<Result<_, DataError>>()?;
        Ok(Sample {
            id: item.id.clone(),
            category: item.category.clone(),
            query,
            references,
            gt,
        })
    }

    /// Lazily decodes every item; a bad file yields an `Err` for that item only.
    pub fn iter(&self) -> impl Iterator<Item = Result<Sample, DataError>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sorted subdirectory names; a missing directory lists as empty.
fn subdirectories(dir: &Path) -> Result<Vec<String>, DataError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_error(dir))? {
        let entry = entry.map_err(io_error(dir))?;
        if entry.path().is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Sorted image files directly inside `dir`.
fn image_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_error(dir))? {
        let path = entry.map_err(io_error(dir))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Pairs each image in `images` with `<masks>/<stem>.png`, reporting the ones without.
fn pair_with_masks(
    images: &Path,
    masks: &Path,
    warnings: &mut Vec<String>,
) -> Result<Vec<(PathBuf, PathBuf)>, DataError> {
    let mut pairs = Vec::new();
    for image in image_files(images)? {
        let stem = image
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let mask = masks.join(format!("{stem}.png"));
        if mask.is_file() {
            pairs.push((image, mask));
        } else {
            let msg = format!(
                "skipping {}: no mask at {}",
                image.display(),
                mask.display()
            );
            warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(pairs)
}

/// Enumerates `<root>/<split>`. A missing or empty split directory gives an empty dataset.
pub fn load_folder(
    root: &Path,
    split: &str,
    layout: &FolderLayout,
) -> Result<FolderDataset, DataError> {
    if !root.is_dir() {
        return Err(DataError::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "dataset root is not a directory",
            ),
        });
    }
    let base = root.join(split);
    let mut dataset = FolderDataset {
        refs_per_sample: usize::MAX,
        ..FolderDataset::default()
    };
    for category in subdirectories(&base)? {
        let dir = base.join(&category);
        let query = dir.join(&layout.query_dir);
        let reference = dir.join(&layout.reference_dir);
        for (image, mask) in pair_with_masks(
            &query.join(&layout.images),
            &query.join(&layout.masks),
            &mut dataset.warnings,
        )? {
            let stem = image.file_stem().unwrap_or_default().to_string_lossy();
            dataset.items.push(FolderItem {
                id: format!("{category}/{stem}"),
                category: category.clone(),
                image,
                mask,
            });
        }
        let refs = pair_with_masks(
            &reference.join(&layout.images),
            &reference.join(&layout.masks),
            &mut dataset.warnings,
        )?;
        dataset.references.insert(category, refs);
    }
    Ok(dataset)
}

fn decode(path: &Path) -> Result<image::DynamicImage, DataError> {
    image::open(path).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// `[3, H, W]` in `[0, 1]`.
fn read_rgb(path: &Path, resize: Option<u32>) -> Result<Tensor, DataError> {
    let mut img = decode(path)?.to_rgb8();
    if let Some(side) = resize {
        img = imageops::resize(&img, side, side, FilterType::Triangle);
    }
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, Rgb(px)) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

/// `[H, W]` with pixels `≥ 128` mapped to 1 and the rest to 0.
fn read_mask(path: &Path, resize: Option<u32>) -> Result<Tensor, DataError> {
    let mut img = decode(path)?.to_luma8();
    if let Some(side) = resize {
        img = imageops::resize(&img, side, side, FilterType::Nearest);
    }
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|Luma([v])| if *v >= 128 { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(&[h as usize, w as usize], data))
}

fn to_rgb(image: &Tensor) -> RgbImage {
    let [_, h, w] = image.shape() else {
        panic!("images are [3, H, W]");
    };
    let plane = h * w;
    let d = image.data();
    RgbImage::from_fn(*w as u32, *h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|c| {
            (d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    })
}

fn to_gray(mask: &Tensor) -> GrayImage {
    let [h, w] = mask.shape() else {
        panic!("masks are [H, W]");
    };
    let d = mask.data();
    GrayImage::from_fn(*w as u32, *h as u32, |x, y| {
        Luma([if d[y as usize * w + x as usize] >= 0.5 {
            255
        } else {
            0
        }])
    })
}

fn save(path: &Path, result: image::ImageResult<()>) -> Result<(), DataError> {
    result.map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes samples as PNGs in the folder layout. References are written once
/// per category, from the first sample of that category.
pub fn write_folder(
    samples: &[Sample],
    root: &Path,
    split: &str,
    layout: &FolderLayout,
) -> Result<(), DataError> {
    let mut seen = std::collections::BTreeSet::new();
    for sample in samples {
        let dir = root.join(split).join(&sample.category);
        let query = dir.join(&layout.query_dir);
        let name = sample.id.replace('/', "_");
        for sub in [&layout.images, &layout.masks] {
            let d = query.join(sub);
            fs::create_dir_all(&d).map_err(io_error(&d))?;
        }
        let path = query.join(&layout.images).join(format!("{name}.png"));
        save(&path, to_rgb(&sample.query).save(&path))?;
        let path = query.join(&layout.masks).join(format!("{name}.png"));
        save(&path, to_gray(&sample.gt).save(&path))?;
        if !seen.insert(sample.category.clone()) {
            continue;
        }
        let reference = dir.join(&layout.reference_dir);
        for sub in [&layout.images, &layout.masks] {
            let d = reference.join(sub);
            fs::create_dir_all(&d).map_err(io_error(&d))?;
        }
        for (j, r) in sample.references.iter().enumerate() {
            let path = reference
                .join(&layout.images)
                .join(format!("ref{j:03}.png"));
            save(&path, to_rgb(&r.image).save(&path))?;
            let path = reference.join(&layout.masks).join(format!("ref{j:03}.png"));
            save(&path, to_gray(&r.mask).save(&path))?;
        }
    }
    Ok(())
}
