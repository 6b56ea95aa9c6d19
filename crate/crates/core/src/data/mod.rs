//! Datasets: labeled image tensors, the CIFAR binary loader and the
//! synthetic generator.

pub mod cifar;
pub mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use cifar::{ChannelStats, CifarKind, CifarRecord};
pub use synthetic::SyntheticSpec;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Images `[n, 3, side, side]` with one label per image.
#[derive(Clone, Debug)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledImages {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
            return Err(Error::Data(format!("images must be [n, 3, side, side], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", s[0], labels.len())));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Data(format!("record {i}: label {l} outside 0..{classes}")));
        }
        Ok(LabeledImages {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.shape()[2]
    }

    /// Copies the listed images, mirroring left-right those whose `flips`
    /// entry is set.
    pub fn batch(&self, indices: &[usize], flips: Option<&[bool]>) -> Result<(Tensor, Vec<usize>)> {
        let side = self.side();
        let per = 3 * side * side;
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for (b, &i) in indices.iter().enumerate() {
            let img = &src[i * per..(i + 1) * per];
            if flips.is_some_and(|f| f[b]) {
                for row in img.chunks_exact(side) {
                    data.extend(row.iter().rev());
                }
            } else {
                data.extend_from_slice(img);
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(vec![indices.len(), 3, side, side], data)?, labels))
    }

    /// The first `n` records.
    pub fn truncate(self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Config(format!("subset of {n} from a split of {}", self.len())));
        }
        let side = self.side();
        let per = 3 * side * side;
        let images = Tensor::new(vec![n, 3, side, side], self.images.data()[..n * per].to_vec())?;
        LabeledImages::new(images, self.labels[..n].to_vec(), self.classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Cifar100,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "cifar100" => Ok(DatasetKind::Cifar100),
            other => Err(Error::Config(format!(
                "unknown dataset {other:?} (expected synthetic, cifar10 or cifar100)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Directory holding the CIFAR batch files.
    pub path: Option<PathBuf>,
    /// Keep only the first N training records.
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub synthetic: SyntheticSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::Synthetic,
            path: None,
            train_subset: None,
            test_subset: None,
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self, image_side: usize, classes: usize) -> Result<()> {
        match self.kind {
            DatasetKind::Synthetic => {
                self.synthetic.validate()?;
                if self.synthetic.image_side != image_side {
                    return Err(Error::Config(format!(
                        "synthetic image_side {} differs from model image_side {image_side}",
                        self.synthetic.image_side
                    )));
                }
                if self.synthetic.classes != classes {
                    return Err(Error::Config(format!(
                        "synthetic classes {} differs from model classes {classes}",
                        self.synthetic.classes
                    )));
                }
            }
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
                let kind = self.cifar_kind().expect("cifar kind");
                if self.path.is_none() {
                    return Err(Error::Config(format!("dataset {:?} needs a path", self.kind)));
                }
                if kind.classes() != classes {
                    return Err(Error::Config(format!(
                        "{:?} has {} classes, model has {classes}",
                        self.kind,
                        kind.classes()
                    )));
                }
            }
        }
        if self.train_subset == Some(0) || self.test_subset == Some(0) {
            return Err(Error::Config("dataset subsets must be positive".into()));
        }
        Ok(())
    }

    pub fn cifar_kind(&self) -> Option<CifarKind> {
        match self.kind {
            DatasetKind::Synthetic => None,
            DatasetKind::Cifar10 => Some(CifarKind::Cifar10),
            DatasetKind::Cifar100 => Some(CifarKind::Cifar100),
        }
    }

    /// Short identifier recorded in run snapshots.
    pub fn id(&self) -> String {
        let sub = |s: Option<usize>| s.map_or_else(|| "all".to_string(), |n| n.to_string());
        match self.kind {
            DatasetKind::Synthetic => {
                let s = &self.synthetic;
                format!(
                    "synthetic-seed{}-n{}x{}-sigma{}",
                    s.seed, s.samples_train, s.samples_test, s.noise_sigma
                )
            }
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => format!(
                "{}-train{}-test{}",
                serde_json::to_value(self.kind).unwrap().as_str().unwrap(),
                sub(self.train_subset),
                sub(self.test_subset)
            ),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub id: String,
    pub train: LabeledImages,
    pub test: LabeledImages,
    /// Normalization statistics, for CIFAR.
    pub stats: Option<ChannelStats>,
}

/// Loads or generates the dataset, resized to `image_side`.
pub fn load(spec: &DatasetSpec, image_side: usize, classes: usize) -> Result<Dataset> {
    spec.validate(image_side, classes)?;
    let (mut train, mut test, stats) = match spec.cifar_kind() {
        None => {
            let (train, test) = synthetic::generate(&spec.synthetic)?;
            (train, test, None)
        }
        Some(kind) => {
            let path = spec.path.as_deref().expect("validated");
            let (mut train, mut test) = cifar::load_split_records(path, kind)?;
            if let Some(n) = spec.train_subset {
                train.truncate(n);
            }
            if let Some(n) = spec.test_subset {
                test.truncate(n);
            }
            let stats = ChannelStats::from_records(&train)?;
            let train = cifar::to_images(&train, &stats, image_side, classes)?;
            let test = cifar::to_images(&test, &stats, image_side, classes)?;
            (train, test, Some(stats))
        }
    };
    if spec.cifar_kind().is_none() {
        if let Some(n) = spec.train_subset {
            train = train.truncate(n)?;
        }
        if let Some(n) = spec.test_subset {
            test = test.truncate(n)?;
        }
    }
    Ok(Dataset {
        id: spec.id(),
        train,
        test,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_reverses_rows() {
        let images = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64);
        let set = LabeledImages::new(images, vec![0], 2).unwrap();
        let (b, _) = set.batch(&[0], Some(&[true])).unwrap();
        assert_eq!(
            b.data(),
            &[1.0, 0.0, 3.0, 2.0, 5.0, 4.0, 7.0, 6.0, 9.0, 8.0, 11.0, 10.0]
        );
        let (b, _) = set.batch(&[0], Some(&[false])).unwrap();
        assert_eq!(b.data(), set.images.data());
    }

    #[test]
    fn label_range_checked() {
        let images = Tensor::zeros(&[2, 3, 2, 2]);
        let err = LabeledImages::new(images, vec![0, 5], 5).unwrap_err().to_string();
        assert!(err.contains("record 1"), "{err}");
    }

    #[test]
    fn missing_cifar_dir_is_data_error() {
        let spec = DatasetSpec {
            kind: DatasetKind::Cifar10,
            path: Some("/nonexistent/cifar".into()),
            ..Default::default()
        };
        assert_eq!(load(&spec, 28, 10).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn synthetic_must_match_model() {
        let spec = DatasetSpec::default();
        assert!(spec.validate(32, 10).is_err());
        assert!(spec.validate(28, 10).is_ok());
    }
}
