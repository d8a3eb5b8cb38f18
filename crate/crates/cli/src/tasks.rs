//! Builds per-class train/test tasks from the configured data source.

use anyhow::{bail, Context, Result};
use hypervae::data::{downsample_dataset, generate_synthetic_tasks, load_idx};
use hypervae::{RngState, Scalar, TaskDataset};

use crate::config::{DataSource, ExperimentConfig};

#[derive(Clone, Debug)]
pub struct TaskSplit<T> {
    pub train: Vec<TaskDataset<T>>,
    pub test: Vec<TaskDataset<T>>,
    /// Image side length.
    pub side: usize,
}

impl<T: Scalar> TaskSplit<T> {
    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn train_task(&self, id: usize) -> Option<&TaskDataset<T>> {
        self.train.iter().find(|t| t.task_id == id)
    }

    pub fn test_task(&self, id: usize) -> Option<&TaskDataset<T>> {
        self.test.iter().find(|t| t.task_id == id)
    }

    /// All training tasks pooled into one, labels kept.
    pub fn pooled_train(&self) -> Result<TaskDataset<T>> {
        let refs: Vec<&TaskDataset<T>> = self.train.iter().collect();
        Ok(TaskDataset::concat(usize::MAX, &refs)?)
    }

    pub fn pooled_test(&self) -> Result<TaskDataset<T>> {
        let refs: Vec<&TaskDataset<T>> = self.test.iter().collect();
        Ok(TaskDataset::concat(usize::MAX, &refs)?)
    }
}

pub fn load_tasks<T: Scalar>(cfg: &ExperimentConfig) -> Result<TaskSplit<T>> {
    let d = &cfg.data;
    let root = RngState::new(cfg.seed);
    match d.source {
        DataSource::Synthetic => {
            let tasks = generate_synthetic_tasks::<T>(&d.synthetic_spec(), &mut root.fork(100))?;
            let mut rng = root.fork(101);
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for t in tasks {
                let (te, tr) = t.split(d.test_fraction, &mut rng);
                train.push(tr);
                test.push(te);
            }
            Ok(TaskSplit { train, test, side: d.side })
        }
        DataSource::Idx => {
            let (images, labels) = (d.images.as_ref().expect("validated"), d.labels.as_ref().expect("validated"));
            let (full, side) = read_idx::<T>(images, labels, d.downsample)?;
            let classes = d.keep_classes.clone().unwrap_or_else(|| full.classes());
            let per_class = |ds: &TaskDataset<T>| -> Result<Vec<TaskDataset<T>>> {
                classes
                    .iter()
                    .map(|&c| {
                        let t = ds.filter_class(c).with_task_id(c as usize);
                        if t.is_empty() {
                            bail!("no items of class {c}");
                        }
                        Ok(match d.max_per_class {
                            Some(n) if n < t.len() => t.subset(&(0..n).collect::<Vec<_>>()),
                            _ => t,
                        })
                    })
                    .collect()
            };
            let train_all = per_class(&full)?;
            let (train, test) = match (&d.test_images, &d.test_labels) {
                (Some(ti), Some(tl)) => {
                    let (test_full, test_side) = read_idx::<T>(ti, tl, d.downsample)?;
                    if test_side != side {
                        bail!("train images are {side}×{side} after pooling, test images {test_side}×{test_side}");
                    }
                    (train_all, per_class(&test_full)?)
                }
                _ => {
                    let mut rng = root.fork(101);
                    let mut pair = (Vec::new(), Vec::new());
                    for t in train_all {
                        let (te, tr) = t.split(d.test_fraction, &mut rng);
                        pair.0.push(tr);
                        pair.1.push(te);
                    }
                    pair
                }
            };
            Ok(TaskSplit { train, test, side })
        }
    }
}

fn read_idx<T: Scalar>(
    images: &std::path::Path,
    labels: &std::path::Path,
    factor: usize,
) -> Result<(TaskDataset<T>, usize)> {
    let (ds, rows, cols) = load_idx::<T>(images, labels).with_context(|| format!("loading {}", images.display()))?;
    if rows != cols {
        bail!("IDX images must be square, got {rows}×{cols}");
    }
    if factor == 1 {
        return Ok((ds, rows));
    }
    Ok((downsample_dataset(&ds, rows, factor)?, rows / factor))
}

/// First `n` items of a task (all of them when `n` is absent).
pub fn capped<T: Scalar>(ds: &TaskDataset<T>, n: Option<usize>) -> TaskDataset<T> {
    match n {
        Some(n) if n < ds.len() => ds.subset(&(0..n).collect::<Vec<_>>()),
        _ => ds.clone(),
    }
}
