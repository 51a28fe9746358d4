use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::engine::{RngStream, Tensor};

use super::DataError;

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Synthetic(String),
    ImageFolder(PathBuf),
}

/// Examples of uniform shape, stored as the rows of a `[n, dim]` tensor.
///
/// Every row read through [`Dataset::rows`], [`Dataset::batch`] or
/// [`Dataset::examples`] is counted, which lets tests check that a code path
/// never touches a dataset.
#[derive(Debug)]
pub struct Dataset {
    examples: Tensor,
    example_shape: Vec<usize>,
    labels: Option<Vec<usize>>,
    ids: Vec<String>,
    source: Source,
    reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Dataset {
            examples: self.examples.clone(),
            example_shape: self.example_shape.clone(),
            labels: self.labels.clone(),
            ids: self.ids.clone(),
            source: self.source.clone(),
            reads: AtomicUsize::new(0),
        }
    }
}

impl Dataset {
    /// `examples` is `[n, dim]` with `dim = product(example_shape)`.
    /// Ids default to `<tag>#<index>`.
    pub fn new(examples: Tensor, example_shape: Vec<usize>, source: Source) -> Result<Self, DataError> {
        let dim: usize = example_shape.iter().product();
        if examples.shape().len() != 2 || examples.shape()[1] != dim {
            return Err(DataError::Shape(format!("examples {:?} vs example shape {:?}", examples.shape(), example_shape)));
        }
        let tag = match &source {
            Source::Synthetic(name) => name.clone(),
            Source::ImageFolder(p) => p.display().to_string(),
        };
        let ids = (0..examples.rows()).map(|i| format!("{tag}#{i}")).collect();
        Ok(Dataset { examples, example_shape, labels: None, ids, source, reads: AtomicUsize::new(0) })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self, DataError> {
        if labels.len() != self.len() {
            return Err(DataError::Shape(format!("{} labels for {} examples", labels.len(), self.len())));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self, DataError> {
        if ids.len() != self.len() {
            return Err(DataError::Shape(format!("{} ids for {} examples", ids.len(), self.len())));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.examples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.examples.cols()
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.example_shape
    }

    /// Channels of image-shaped examples (`[c, h, w]`), else 1.
    pub fn channels(&self) -> usize {
        if self.example_shape.len() == 3 {
            self.example_shape[0]
        } else {
            1
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn source(&self) -> &Source {
        &self.source
    }

    /// All examples as `[n, dim]`.
    pub fn examples(&self) -> &Tensor {
        self.reads.fetch_add(self.len(), Ordering::Relaxed);
        &self.examples
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.examples.row(i)
    }

    /// Rows `idx` as a `[k, dim]` batch.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        self.reads.fetch_add(idx.len(), Ordering::Relaxed);
        self.examples.select_rows(idx)
    }

    /// Number of example reads since construction.
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    /// The subset `idx` as a new dataset (labels and ids carried over).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            examples: self.batch(idx),
            example_shape: self.example_shape.clone(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            source: self.source.clone(),
            reads: AtomicUsize::new(0),
        }
    }

    /// Whether every entry lies in `[-1, 1]`.
    pub fn in_unit_range(&self) -> bool {
        self.examples.data().iter().all(|v| (-1.0..=1.0).contains(v))
    }
}

/// A dataset partitioned into disjoint train and holdout parts.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: Dataset,
    pub holdout: Dataset,
    pub train_idx: Vec<usize>,
    pub holdout_idx: Vec<usize>,
}

/// Random split with `round(fraction · n)` training examples.
pub fn split_train_holdout(dataset: &Dataset, fraction: f64, rng: &mut RngStream) -> Result<SplitDataset, DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidConfig(format!("split fraction {fraction} not in (0, 1)")));
    }
    let n = dataset.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train < 1 || n_train >= n {
        return Err(DataError::InvalidConfig(format!("split of {n} examples at {fraction} leaves an empty side")));
    }
    let perm = rng.permutation(n);
    let mut train_idx = perm[..n_train].to_vec();
    let mut holdout_idx = perm[n_train..].to_vec();
    train_idx.sort_unstable();
    holdout_idx.sort_unstable();
    Ok(SplitDataset {
        train: dataset.subset(&train_idx),
        holdout: dataset.subset(&holdout_idx),
        train_idx,
        holdout_idx,
    })
}

impl SplitDataset {
    /// Dataset manifest: one `<id> <split>` line per example.
    pub fn manifest(&self) -> String {
        let mut lines: Vec<(usize, &str, &str)> = Vec::with_capacity(self.train_idx.len() + self.holdout_idx.len());
        for (k, &i) in self.train_idx.iter().enumerate() {
            lines.push((i, &self.train.ids[k], "train"));
        }
        for (k, &i) in self.holdout_idx.iter().enumerate() {
            lines.push((i, &self.holdout.ids[k], "holdout"));
        }
        lines.sort_by_key(|l| l.0);
        lines.iter().map(|(_, id, tag)| format!("{id} {tag}\n")).collect()
    }

    pub fn check_disjoint(&self) -> Result<(), DataError> {
        let train: HashSet<usize> = self.train_idx.iter().copied().collect();
        if let Some(i) = self.holdout_idx.iter().find(|i| train.contains(i)) {
            return Err(DataError::Overlap(format!("example {i} in both splits")));
        }
        Ok(())
    }
}

/// Parses a manifest into `(id, split)` pairs.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, String)>, DataError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (id, tag) = l.rsplit_once(' ').ok_or_else(|| DataError::Parse(format!("manifest line '{l}'")))?;
            match tag {
                "train" | "holdout" => Ok((id.to_string(), tag.to_string())),
                other => Err(DataError::Parse(format!("unknown split tag '{other}'"))),
            }
        })
        .collect()
}
