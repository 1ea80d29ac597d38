//! Scene datasets on disk and in memory.
//!
//! A dataset directory holds
//!
//! ```text
//! images/<stem>.png
//! cameras.txt      one record per image:
//!                  filename fx fy cx cy r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2 near far
//! split.txt        "train <ids...>" and "test <ids...>" lines (ids index cameras.txt)
//! masks/<stem>.png optional ground-truth occluder masks
//! clean/<stem>.png optional occluder-free references
//! features/<stem>.feat  optional precomputed feature maps
//! ```
//!
//! Lines starting with `#` are ignored in both text files.

pub mod synthetic;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filternet::features::{
    FeatureConfig, FeatureInputs, FeatureMap, FeatureSource, PreparedImage,
};
use crate::geometry::{Camera, Intrinsics, Pose};
use crate::raster::{GrayMap, Image};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    /// File stems, one per image.
    pub names: Vec<String>,
    pub images: Vec<Image>,
    pub cameras: Vec<Camera>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub masks: Option<Vec<GrayMap>>,
    /// Occluder-free, unjittered references.
    pub clean: Option<Vec<Image>>,
    pub feature_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    /// Integer downsampling factor applied to images, masks and cameras.
    pub downsample: usize,
    /// Keep only this many training images, drawn uniformly with `seed`.
    pub few_shot: Option<usize>,
    pub seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            downsample: 2,
            few_shot: None,
            seed: 0,
        }
    }
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if self.cameras.len() != n || self.names.len() != n {
            return Err(Error::Ingestion(format!(
                "{n} images but {} cameras and {} names",
                self.cameras.len(),
                self.names.len()
            )));
        }
        for (i, (img, cam)) in self.images.iter().zip(&self.cameras).enumerate() {
            cam.validate()
                .map_err(|e| Error::Ingestion(format!("camera of image {}: {e}", self.names[i])))?;
            if (img.width, img.height) != (cam.width, cam.height) {
                return Err(Error::Ingestion(format!(
                    "image {} is {}x{} but its camera says {}x{}",
                    self.names[i], img.width, img.height, cam.width, cam.height
                )));
            }
        }
        for &id in self.train.iter().chain(&self.test) {
            if id >= n {
                return Err(Error::Ingestion(format!(
                    "split id {id} out of range ({n} images)"
                )));
            }
        }
        if self.train.iter().any(|i| self.test.contains(i)) {
            return Err(Error::Ingestion("train and test splits overlap".into()));
        }
        let mut seen = vec![false; n];
        for &id in self.train.iter().chain(&self.test) {
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::Ingestion(format!(
                    "image id {id} listed twice in the split"
                )));
            }
        }
        for (label, maps) in [
            (
                "mask",
                self.masks
                    .as_ref()
                    .map(|m| m.iter().map(|g| (g.width, g.height)).collect::<Vec<_>>()),
            ),
            (
                "clean reference",
                self.clean
                    .as_ref()
                    .map(|c| c.iter().map(|g| (g.width, g.height)).collect()),
            ),
        ] {
            if let Some(sizes) = maps {
                if sizes.len() != n {
                    return Err(Error::Ingestion(format!(
                        "{} {label}s for {n} images",
                        sizes.len()
                    )));
                }
                for (i, s) in sizes.iter().enumerate() {
                    if *s != (self.images[i].width, self.images[i].height) {
                        return Err(Error::Ingestion(format!(
                            "{label} of image {} does not match the image size",
                            self.names[i]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Backbone inputs for the training images, in training order.
    pub fn feature_inputs(&self, config: &FeatureConfig) -> Result<FeatureInputs> {
        match config.source {
            FeatureSource::ReferenceEncoder => Ok(FeatureInputs::Images(
                self.train
                    .iter()
                    .map(|&i| PreparedImage::new(&self.images[i]))
                    .collect(),
            )),
            FeatureSource::PrecomputedFiles => {
                let dir = self.feature_dir.as_ref().ok_or_else(|| {
                    Error::Ingestion(
                        "precomputed features requested but the dataset has no features/ directory"
                            .into(),
                    )
                })?;
                let maps = self
                    .train
                    .iter()
                    .map(|&i| {
                        let img = &self.images[i];
                        FeatureMap::load_for_image(
                            dir,
                            &self.names[i],
                            img.width,
                            img.height,
                            config.backbone_dim,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(FeatureInputs::Maps(maps))
            }
        }
    }

    /// Writes the directory layout described in the module docs.
    pub fn export(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
        mkdir(&dir.join("images"))?;
        let mut manifest = String::from(
            "# filename fx fy cx cy r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2 near far\n",
        );
        for (i, name) in self.names.iter().enumerate() {
            let file = format!("{name}.png");
            self.images[i].write_png(&dir.join("images").join(&file))?;
            let c = &self.cameras[i];
            let k = &c.intrinsics;
            write!(manifest, "{file} {} {} {} {}", k.fx, k.fy, k.cx, k.cy).unwrap();
            for v in c.pose.to_3x4() {
                write!(manifest, " {v}").unwrap();
            }
            writeln!(manifest, " {} {}", c.near, c.far).unwrap();
        }
        write_text(&dir.join("cameras.txt"), &manifest)?;
        let ids = |v: &[usize]| {
            v.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        write_text(
            &dir.join("split.txt"),
            &format!("train {}\ntest {}\n", ids(&self.train), ids(&self.test)),
        )?;
        if let Some(masks) = &self.masks {
            mkdir(&dir.join("masks"))?;
            for (m, name) in masks.iter().zip(&self.names) {
                m.write_png(&dir.join("masks").join(format!("{name}.png")))?;
            }
        }
        if let Some(clean) = &self.clean {
            mkdir(&dir.join("clean"))?;
            for (c, name) in clean.iter().zip(&self.names) {
                c.write_png(&dir.join("clean").join(format!("{name}.png")))?;
            }
        }
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// One parsed `cameras.txt` record.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRecord {
    pub filename: String,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub near: f64,
    pub far: f64,
}

pub fn parse_manifest(text: &str) -> Result<Vec<CameraRecord>> {
    content_lines(text)
        .map(|(line, l)| {
            let fields: Vec<&str> = l.split_whitespace().collect();
            if fields.len() != 19 {
                return Err(Error::Ingestion(format!(
                    "cameras.txt line {line}: expected 19 fields, found {}",
                    fields.len()
                )));
            }
            let nums = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        Error::Ingestion(format!("cameras.txt line {line}: bad number {f:?}"))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            let pose: [f64; 12] = nums[4..16].try_into().unwrap();
            Ok(CameraRecord {
                filename: fields[0].to_string(),
                intrinsics: Intrinsics {
                    fx: nums[0],
                    fy: nums[1],
                    cx: nums[2],
                    cy: nums[3],
                },
                pose: Pose::from_3x4(&pose),
                near: nums[16],
                far: nums[17],
            })
        })
        .collect()
}

/// Parses `split.txt` into `(train, test)` id lists.
pub fn parse_split(text: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (line, l) in content_lines(text) {
        let mut parts = l.split_whitespace();
        let target = match parts.next() {
            Some("train") => &mut train,
            Some("test") => &mut test,
            Some(other) => {
                return Err(Error::Ingestion(format!(
                    "split.txt line {line}: expected 'train' or 'test', found {other:?}"
                )))
            }
            None => continue,
        };
        for p in parts {
            target.push(
                p.parse().map_err(|_| {
                    Error::Ingestion(format!("split.txt line {line}: bad id {p:?}"))
                })?,
            );
        }
    }
    Ok((train, test))
}

fn stem(filename: &str) -> &str {
    Path::new(filename)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(filename)
}

/// Loads a dataset directory.
pub fn load_photocollection(dir: &Path, options: &LoadOptions) -> Result<SceneDataset> {
    if options.downsample == 0 {
        return Err(Error::Config("downsample factor must be at least 1".into()));
    }
    if !dir.is_dir() {
        return Err(Error::Ingestion(format!(
            "dataset directory {} not found",
            dir.display()
        )));
    }
    let records = parse_manifest(&read_text(&dir.join("cameras.txt"))?)?;
    let image_dir = dir.join("images");
    let listed: Vec<String> = fs::read_dir(&image_dir)
        .map_err(|e| Error::io(&image_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().to_str().map(str::to_owned))
        .collect();
    for file in &listed {
        if !records.iter().any(|r| &r.filename == file) {
            return Err(Error::Ingestion(format!(
                "image {file} has no camera record"
            )));
        }
    }
    let f = options.downsample;
    let mut ds = SceneDataset {
        names: Vec::new(),
        images: Vec::new(),
        cameras: Vec::new(),
        train: Vec::new(),
        test: Vec::new(),
        masks: None,
        clean: None,
        feature_dir: None,
    };
    let mask_dir = dir.join("masks");
    let clean_dir = dir.join("clean");
    let mut masks = Vec::new();
    let mut clean = Vec::new();
    for r in &records {
        if !listed.contains(&r.filename) {
            return Err(Error::Ingestion(format!(
                "camera record {} has no image in {}",
                r.filename,
                image_dir.display()
            )));
        }
        let img = Image::read_png(&image_dir.join(&r.filename))?;
        let camera = Camera::new(r.intrinsics, r.pose, img.width, img.height, r.near, r.far)
            .map_err(|e| Error::Ingestion(format!("camera record {}: {e}", r.filename)))?;
        let name = stem(&r.filename).to_string();
        let mask_path = mask_dir.join(format!("{name}.png"));
        if mask_path.is_file() {
            let m = GrayMap::read_png(&mask_path)?;
            masks.push(if f > 1 {
                m.downsample(f).threshold(0.5)
            } else {
                m
            });
        }
        let clean_path = clean_dir.join(format!("{name}.png"));
        if clean_path.is_file() {
            let c = Image::read_png(&clean_path)?;
            clean.push(if f > 1 { c.downsample(f) } else { c });
        }
        ds.images.push(if f > 1 { img.downsample(f) } else { img });
        ds.cameras
            .push(if f > 1 { camera.downsampled(f) } else { camera });
        ds.names.push(name);
    }
    if !masks.is_empty() {
        ds.masks = Some(masks);
    }
    if !clean.is_empty() {
        ds.clean = Some(clean);
    }
    let split_path = dir.join("split.txt");
    if split_path.is_file() {
        let (train, test) = parse_split(&read_text(&split_path)?)?;
        ds.train = train;
        ds.test = test;
    } else {
        ds.train = (0..ds.len()).collect();
    }
    if let Some(k) = options.few_shot {
        if k > ds.train.len() {
            return Err(Error::Config(format!(
                "few-shot count {k} exceeds the {} training images",
                ds.train.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mut picked: Vec<usize> = sample(&mut rng, ds.train.len(), k)
            .into_iter()
            .map(|i| ds.train[i])
            .collect();
        picked.sort_unstable();
        ds.train = picked;
    }
    let feat = dir.join("features");
    if feat.is_dir() {
        ds.feature_dir = Some(feat);
    }
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_and_split_parse() {
        let text = "# comment\nimg0.png 100 100 32 32 1 0 0 0 0 1 0 0 0 0 1 4 1 5\n";
        let r = parse_manifest(text).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].pose.translation, [0.0, 0.0, 4.0]);
        assert_eq!((r[0].near, r[0].far), (1.0, 5.0));
        assert!(parse_manifest("a.png 1 2 3\n").is_err());
        let (tr, te) = parse_split("train 0 2 3\ntest 1\n").unwrap();
        assert_eq!((tr, te), (vec![0, 2, 3], vec![1]));
        assert!(parse_split("val 1\n").is_err());
    }
}
