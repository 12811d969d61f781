//! Datasets and split-task sequences.

mod idx;
mod synth;

pub use idx::{
    load_idx, parse_idx_images, parse_idx_labels, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use synth::{synth_tasks, SynthParams};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Data(format!(
                "images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
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

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Rows `idx` as a new dataset; an empty selection is an error.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        Ok(Dataset {
            images: self.images.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// Images and labels of rows `idx` (used for minibatches).
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((
            self.images.select_rows(idx)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    /// 1-based.
    pub id: u32,
    /// Original class ids, position = remapped label.
    pub source_classes: Vec<usize>,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl TaskData {
    pub fn classes(&self) -> usize {
        self.train.classes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<TaskData>,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&TaskData> {
        self.tasks.iter().find(|t| t.id == id)
    }
}

/// Per-class 80/10/10 split sizes: validation and test take `n / 10` each.
pub(crate) fn split_sizes(n: usize) -> (usize, usize, usize) {
    let v = n / 10;
    (n - 2 * v, v, v)
}

/// Route samples of each group's classes into a task, remap labels to
/// `0..len(group)`, and split each class 80/10/10 after a seeded shuffle.
pub fn split_by_class(
    data: &Dataset,
    groups: &[Vec<usize>],
    rng: &mut SeededRng,
) -> Result<TaskSequence> {
    if groups.is_empty() {
        return Err(Error::Data("no class groups given".into()));
    }
    let mut seen = vec![false; data.classes];
    for (t, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::Data(format!("group {} is empty", t + 1)));
        }
        for &c in g {
            if c >= data.classes {
                return Err(Error::Data(format!(
                    "unknown class id {c} (dataset has {})",
                    data.classes
                )));
            }
            if seen[c] {
                return Err(Error::Data(format!(
                    "class {c} appears in more than one group"
                )));
            }
            seen[c] = true;
        }
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.classes];
    for (i, &y) in data.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut tasks = Vec::with_capacity(groups.len());
    for (t, g) in groups.iter().enumerate() {
        let mut parts: [Vec<(usize, usize)>; 3] = Default::default();
        let mut srng = rng.substream(&format!("split/{}", t + 1));
        for (new_label, &c) in g.iter().enumerate() {
            let mut idx = by_class[c].clone();
            srng.shuffle(&mut idx);
            let (ntr, nv, _) = split_sizes(idx.len());
            for (k, &i) in idx.iter().enumerate() {
                let part = if k < ntr {
                    0
                } else if k < ntr + nv {
                    1
                } else {
                    2
                };
                parts[part].push((i, new_label));
            }
        }
        let id = t as u32 + 1;
        let make = |p: &Vec<(usize, usize)>, what: &str| -> Result<Dataset> {
            if p.is_empty() {
                return Err(Error::Data(format!("task {id}: {what} split is empty")));
            }
            let rows: Vec<usize> = p.iter().map(|x| x.0).collect();
            Dataset::new(
                data.images.select_rows(&rows)?,
                p.iter().map(|x| x.1).collect(),
                g.len(),
            )
        };
        tasks.push(TaskData {
            id,
            source_classes: g.clone(),
            train: make(&parts[0], "train")?,
            val: make(&parts[1], "validation")?,
            test: make(&parts[2], "test")?,
        });
    }
    Ok(TaskSequence { tasks })
}

/// Group file: one task per line, class ids separated by whitespace. Blank
/// lines and lines starting with `#` are skipped.
pub fn parse_groups(text: &str) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let g = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>().map_err(|_| {
                    Error::Data(format!("group file line {}: bad class id {tok:?}", n + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, per: usize) -> Dataset {
        let n = classes * per;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let images = Tensor::from_fn(&[n, 1, 2, 2], |i| ((i / 4) % 256) as f64 / 255.0);
        Dataset::new(images, labels, classes).unwrap()
    }

    #[test]
    fn ten_groups_of_ten() {
        let d = toy(100, 10);
        let groups: Vec<Vec<usize>> = (0..10).map(|t| (t * 10..t * 10 + 10).collect()).collect();
        let seq = split_by_class(&d, &groups, &mut SeededRng::new(1)).unwrap();
        assert_eq!(seq.len(), 10);
        for t in &seq.tasks {
            assert_eq!(t.classes(), 10);
            let mut seen: Vec<usize> = t.train.labels.clone();
            seen.sort();
            seen.dedup();
            assert_eq!(seen, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn union_of_counts_and_disjointness() {
        let d = toy(6, 20);
        // tag every image with its row index so samples are traceable
        let images = Tensor::from_fn(&[120, 1, 1, 1], |i| i as f64 / 255.0);
        let d = Dataset::new(images, d.labels.clone(), 6).unwrap();
        let groups = vec![vec![0, 3], vec![5], vec![1, 2]];
        let seq = split_by_class(&d, &groups, &mut SeededRng::new(2)).unwrap();
        let mut rows = Vec::new();
        for t in &seq.tasks {
            for ds in [&t.train, &t.val, &t.test] {
                rows.extend(
                    ds.images
                        .data()
                        .iter()
                        .map(|v| (v * 255.0).round() as usize),
                );
            }
        }
        assert_eq!(rows.len(), 5 * 20);
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 100);
    }

    #[test]
    fn split_errors() {
        let d = toy(4, 10);
        let mut r = SeededRng::new(3);
        assert!(split_by_class(&d, &[vec![0, 1], vec![1]], &mut r).is_err());
        assert!(split_by_class(&d, &[vec![7]], &mut r).is_err());
        assert!(split_by_class(&d, &[vec![]], &mut r).is_err());
    }

    #[test]
    fn deterministic_split() {
        let d = toy(4, 10);
        let a = split_by_class(&d, &[vec![0, 1], vec![2, 3]], &mut SeededRng::new(4)).unwrap();
        let b = split_by_class(&d, &[vec![0, 1], vec![2, 3]], &mut SeededRng::new(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn group_file() {
        let g = parse_groups("0 1 2\n\n# x\n3   4\n").unwrap();
        assert_eq!(g, vec![vec![0, 1, 2], vec![3, 4]]);
        assert!(parse_groups("0 a").is_err());
    }

    #[test]
    fn empty_subset_is_error() {
        assert!(toy(2, 2).subset(&[]).is_err());
    }

    #[test]
    fn dataset_validation() {
        let img = Tensor::zeros(&[2, 1, 1, 1]);
        assert!(Dataset::new(img.clone(), vec![0, 2], 2).is_err());
        assert!(Dataset::new(img.clone(), vec![0], 2).is_err());
        assert!(Dataset::new(Tensor::full(&[1, 1, 1, 1], 1.5), vec![0], 1).is_err());
        assert_eq!(
            Dataset::new(img, vec![1, 1], 2).unwrap().class_counts(),
            vec![0, 2]
        );
    }
}
