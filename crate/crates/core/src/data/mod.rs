//! Datasets: class-per-directory PPM trees, Z-score normalization,
//! augmentation and the synthetic texture generator.

pub mod augment;
pub mod ppm;
pub mod synth;

use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::Bilinear;
use crate::tensor::{Real, Tensor};
use crate::tnsr;

pub use augment::{augment, AugmentPolicy};
pub use synth::synth_dataset;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`.
    pub image: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| {
            let sh = s.image.shape();
            (sh[1], sh[2])
        })
    }

    pub fn subset(&self, indices: &[usize], split: &str) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            split: split.to_string(),
        }
    }

    /// Stacks the selected images into `[B, 3, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let parts: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let stacked = Tensor::cat(&parts, 0)?;
        let s = parts[0].shape();
        let images = stacked.reshape(&[indices.len(), s[0], s[1], s[2]])?;
        Ok((images, indices.iter().map(|&i| self.samples[i].label).collect()))
    }

    /// Writes `images.tnsr` (`[N, 3, H, W]`) and `labels.tnsr` (`[N]`).
    pub fn export_tnsr(&self, dir: &Path) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Dataset("cannot export an empty dataset".into()));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let all: Vec<usize> = (0..self.len()).collect();
        let (images, labels) = self.batch(&all)?;
        tnsr::write(&dir.join("images.tnsr"), &images)?;
        let labels = Tensor::new(vec![labels.len()], labels.iter().map(|&l| l as Real).collect())?;
        tnsr::write(&dir.join("labels.tnsr"), &labels)
    }

    /// Writes `root/<class>/<index>.ppm` for every sample.
    pub fn write_image_tree(&self, root: &Path) -> Result<()> {
        for name in &self.class_names {
            let dir = root.join(name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (i, s) in self.samples.iter().enumerate() {
            let path = root
                .join(&self.class_names[s.label])
                .join(format!("{i:05}.ppm"));
            std::fs::write(&path, ppm::encode_ppm(&s.image)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Bilinear (align-corners-false) resize of a `[C, h, w]` image.
pub fn resize(image: &Tensor, target: (usize, usize)) -> Tensor {
    let s = image.shape();
    if (s[1], s[2]) == target {
        return image.clone();
    }
    let op = Bilinear::new(s[0], s[1], s[2], target.0, target.1);
    Tensor::new(vec![s[0], target.0, target.1], op.forward(image.data())).expect("resize shape")
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort_by(|a, b| a.as_os_str().as_encoded_bytes().cmp(b.as_os_str().as_encoded_bytes()));
    Ok(v)
}

/// Loads `root/<class>/*.ppm`. Classes are indexed in byte-wise sorted
/// directory-name order; images are scaled to [0, 1] and resized to `target`.
pub fn load_image_tree(root: &Path, target: (usize, usize)) -> Result<Dataset> {
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = class_names.len();
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let files: Vec<_> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
            .collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {} has no .ppm images", dir.display())));
        }
        for file in files {
            let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let raster = ppm::decode(&bytes).map_err(|msg| Error::Parse {
                path: file.clone(),
                msg,
            })?;
            if raster.channels != 3 {
                return Err(Error::Parse {
                    path: file,
                    msg: "expected an RGB (P6) image".into(),
                });
            }
            samples.push(Sample {
                image: resize(&raster.to_chw(), target),
                label,
            });
        }
        class_names.push(name);
    }
    if class_names.is_empty() {
        return Err(Error::Dataset(format!("no class directories under {}", root.display())));
    }
    Ok(Dataset {
        samples,
        class_names,
        split: "all".into(),
    })
}

/// Per-channel mean and standard deviation of the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<Real>,
    pub std: Vec<Real>,
    /// Channels whose deviation was floored to [`STD_FLOOR`].
    pub floored: Vec<usize>,
}

pub const STD_FLOOR: Real = 1e-6;

/// Population mean/std per channel over every training pixel.
pub fn fit_zscore(train: &Dataset) -> Result<NormStats> {
    let first = train
        .samples
        .first()
        .ok_or_else(|| Error::Dataset("cannot fit normalization on an empty split".into()))?;
    let c = first.image.shape()[0];
    let mut sum = vec![0.0; c];
    let mut count = 0usize;
    for s in &train.samples {
        let plane = s.image.numel() / c;
        for (ch, chunk) in s.image.data().chunks(plane).enumerate() {
            sum[ch] += chunk.iter().sum::<Real>();
        }
        count += plane;
    }
    let mean: Vec<Real> = sum.iter().map(|v| v / count as Real).collect();
    let mut sq = vec![0.0; c];
    for s in &train.samples {
        let plane = s.image.numel() / c;
        for (ch, chunk) in s.image.data().chunks(plane).enumerate() {
            sq[ch] += chunk.iter().map(|v| (v - mean[ch]).powi(2)).sum::<Real>();
        }
    }
    let mut floored = Vec::new();
    let std = sq
        .iter()
        .enumerate()
        .map(|(ch, v)| {
            let sd = (v / count as Real).sqrt();
            if sd < STD_FLOOR {
                floored.push(ch);
                STD_FLOOR
            } else {
                sd
            }
        })
        .collect();
    Ok(NormStats { mean, std, floored })
}

fn map_channels(image: &Tensor, f: impl Fn(usize, Real) -> Real) -> Tensor {
    let c = image.shape()[0];
    let plane = image.numel() / c;
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = f(i / plane, *v);
    }
    out
}

pub fn normalize_image(image: &Tensor, stats: &NormStats) -> Tensor {
    map_channels(image, |ch, v| (v - stats.mean[ch]) / stats.std[ch])
}

pub fn denormalize_image(image: &Tensor, stats: &NormStats) -> Tensor {
    map_channels(image, |ch, v| v * stats.std[ch] + stats.mean[ch])
}

pub fn apply_zscore(ds: &Dataset, stats: &NormStats) -> Dataset {
    Dataset {
        samples: ds
            .samples
            .iter()
            .map(|s| Sample {
                image: normalize_image(&s.image, stats),
                label: s.label,
            })
            .collect(),
        class_names: ds.class_names.clone(),
        split: ds.split.clone(),
    }
}

impl NormStats {
    /// `mean=a,b,c` and `std=a,b,c` lines.
    pub fn to_kv(&self) -> String {
        let join = |v: &[Real]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        format!("mean={}\nstd={}\n", join(&self.mean), join(&self.std))
    }

    pub fn from_kv(text: &str) -> std::result::Result<Self, String> {
        let mut mean = None;
        let mut std = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("bad line `{line}`"))?;
            let vals: std::result::Result<Vec<Real>, _> = v.split(',').map(|x| x.trim().parse()).collect();
            let vals = vals.map_err(|e| format!("{k}: {e}"))?;
            match k.trim() {
                "mean" => mean = Some(vals),
                "std" => std = Some(vals),
                other => return Err(format!("unknown key `{other}`")),
            }
        }
        let (mean, std) = (mean.ok_or("missing mean")?, std.ok_or("missing std")?);
        if mean.len() != std.len() || std.iter().any(|s| *s <= 0.0) {
            return Err("mean/std length mismatch or non-positive std".into());
        }
        Ok(NormStats {
            mean,
            std,
            floored: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> Dataset {
        let img = |v: Real| Tensor::full(&[3, 1, 1], v);
        Dataset {
            samples: vec![
                Sample { image: img(0.0), label: 0 },
                Sample { image: img(2.0), label: 0 },
            ],
            class_names: vec!["a".into()],
            split: "train".into(),
        }
    }

    #[test]
    fn two_point_zscore() {
        let ds = two_point();
        let st = fit_zscore(&ds).unwrap();
        assert_eq!(st.mean, vec![1.0; 3]);
        assert_eq!(st.std, vec![1.0; 3]);
        let n = apply_zscore(&ds, &st);
        assert_eq!(n.samples[0].image.data(), &[-1.0; 3]);
        assert_eq!(n.samples[1].image.data(), &[1.0; 3]);
    }

    #[test]
    fn constant_channel_is_floored() {
        let mut ds = two_point();
        for s in &mut ds.samples {
            s.image.data_mut()[1] = 0.5;
        }
        let st = fit_zscore(&ds).unwrap();
        assert_eq!(st.floored, vec![1]);
        assert_eq!(st.std[1], STD_FLOOR);
    }

    #[test]
    fn stats_kv_round_trip() {
        let st = NormStats {
            mean: vec![0.25, 0.5, 0.125],
            std: vec![1.5, 0.75, 2.0],
            floored: vec![],
        };
        assert_eq!(NormStats::from_kv(&st.to_kv()).unwrap(), st);
    }

    #[test]
    fn resize_identity() {
        let t = Tensor::from_fn(&[3, 4, 5], |i| i as Real);
        assert_eq!(resize(&t, (4, 5)), t);
    }
}
