use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Image geometry; pixels are stored row-major, channels last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: u16,
    pub width: u16,
    pub channels: u16,
}

impl ImageShape {
    pub fn new(height: u16, width: u16, channels: u16) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn gray(height: u16, width: u16) -> Self {
        Self::new(height, width, 1)
    }

    pub fn dim(&self) -> usize {
        self.height as usize * self.width as usize * self.channels as usize
    }
}

/// One task's data: train and test splits with optional class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    name: String,
    shape: ImageShape,
    classes: usize,
    train: Tensor,
    test: Tensor,
    train_labels: Option<Vec<usize>>,
    test_labels: Option<Vec<usize>>,
}

fn check_split(
    what: &str,
    x: &Tensor,
    labels: Option<&Vec<usize>>,
    dim: usize,
    classes: usize,
) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != dim {
        return Err(Error::dim(format!(
            "{what} samples have shape {:?}, images have {dim} pixels",
            x.shape()
        )));
    }
    if let Some(i) = x.data().iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::contract(format!(
            "{what} pixel {i} is {} (outside [0, 1])",
            x.data()[i]
        )));
    }
    if let Some(l) = labels {
        if l.len() != x.rows() {
            return Err(Error::contract(format!(
                "{what}: {} labels for {} samples",
                l.len(),
                x.rows()
            )));
        }
        if let Some(&bad) = l.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(format!(
                "{what}: label {bad} with {classes} classes"
            )));
        }
    }
    Ok(())
}

impl TaskDataset {
    pub fn new(
        name: impl Into<String>,
        shape: ImageShape,
        classes: usize,
        train: Tensor,
        test: Tensor,
        train_labels: Option<Vec<usize>>,
        test_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if train_labels.is_some() != test_labels.is_some() {
            return Err(Error::contract(
                "either both splits carry labels or neither does",
            ));
        }
        check_split("train", &train, train_labels.as_ref(), shape.dim(), classes)?;
        check_split("test", &test, test_labels.as_ref(), shape.dim(), classes)?;
        Ok(Self {
            name: name.into(),
            shape,
            classes,
            train,
            test,
            train_labels,
            test_labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.dim()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn train(&self) -> &Tensor {
        &self.train
    }

    pub fn test(&self) -> &Tensor {
        &self.test
    }

    pub fn train_labels(&self) -> Option<&[usize]> {
        self.train_labels.as_deref()
    }

    pub fn test_labels(&self) -> Option<&[usize]> {
        self.test_labels.as_deref()
    }

    pub fn has_labels(&self) -> bool {
        self.train_labels.is_some()
    }

    pub fn train_len(&self) -> usize {
        self.train.rows()
    }

    pub fn test_len(&self) -> usize {
        self.test.rows()
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Applies a per-sample pixel transform to both splits.
    pub fn map_samples(
        &self,
        name: impl Into<String>,
        shape: ImageShape,
        f: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Result<Self> {
        let apply = |x: &Tensor| -> Result<Tensor> {
            let rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| f(x.row(r))).collect();
            if rows.is_empty() {
                return Ok(Tensor::zeros(&[0, shape.dim()]));
            }
            Tensor::from_rows(&rows)
        };
        Self::new(
            name,
            shape,
            self.classes,
            apply(&self.train)?,
            apply(&self.test)?,
            self.train_labels.clone(),
            self.test_labels.clone(),
        )
    }

    /// Deterministic subset of `train` and `test` samples.
    pub fn subsample(&self, train: usize, test: usize, seed: u64) -> Result<Self> {
        if train > self.train_len() || test > self.test_len() {
            return Err(Error::contract(format!(
                "cannot take {train}/{test} samples from {}/{}",
                self.train_len(),
                self.test_len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |n: usize, k: usize| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.truncate(k);
            idx
        };
        let tr = pick(self.train_len(), train);
        let te = pick(self.test_len(), test);
        let sel = |l: &Option<Vec<usize>>, idx: &[usize]| {
            l.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect())
        };
        Self::new(
            self.name.clone(),
            self.shape,
            self.classes,
            self.train.select_rows(&tr),
            self.test.select_rows(&te),
            sel(&self.train_labels, &tr),
            sel(&self.test_labels, &te),
        )
    }

    /// Splits one pool of samples into disjoint train/test parts after a
    /// seeded shuffle.
    pub fn from_pool(
        name: impl Into<String>,
        shape: ImageShape,
        classes: usize,
        samples: &Tensor,
        labels: Option<&[usize]>,
        train: usize,
        test: usize,
        seed: u64,
    ) -> Result<Self> {
        if train + test > samples.rows() {
            return Err(Error::contract(format!(
                "pool of {} samples cannot supply {train} + {test}",
                samples.rows()
            )));
        }
        let mut idx: Vec<usize> = (0..samples.rows()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (tr, te) = (&idx[..train], &idx[train..train + test]);
        let sel = |ids: &[usize]| labels.map(|l| ids.iter().map(|&i| l[i]).collect());
        Self::new(
            name,
            shape,
            classes,
            samples.select_rows(tr),
            samples.select_rows(te),
            sel(tr),
            sel(te),
        )
    }
}

/// `[n, classes]` one-hot rows.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::contract(format!("label {y} with {classes} classes")));
        }
        t.data_mut()[r * classes + y] = 1.0;
    }
    Ok(t)
}

/// An ordered list of tasks with per-task training budgets.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub name: String,
    pub tasks: Vec<TaskDataset>,
    pub epochs: Vec<usize>,
    /// Labeled samples per task in semi-supervised runs.
    pub label_budget: Vec<Option<usize>>,
}

impl TaskSequence {
    pub fn new(
        name: impl Into<String>,
        tasks: Vec<TaskDataset>,
        epochs: Vec<usize>,
        label_budget: Vec<Option<usize>>,
    ) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::config("task sequence is empty"));
        }
        if epochs.len() != tasks.len() || label_budget.len() != tasks.len() {
            return Err(Error::config("one epoch count and label budget per task"));
        }
        if epochs.contains(&0) {
            return Err(Error::config("epoch counts must be positive"));
        }
        let dim = tasks[0].dim();
        if tasks.iter().any(|t| t.dim() != dim) {
            return Err(Error::config("all tasks must share one image size"));
        }
        Ok(Self {
            name: name.into(),
            tasks,
            epochs,
            label_budget,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}
