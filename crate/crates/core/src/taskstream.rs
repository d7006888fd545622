//! Per-client class-incremental task sequences.
//!
//! Each client draws its classes without replacement, so a class appears at
//! most once in its private sequence; different clients may share classes. The
//! samples of a shared class are split into disjoint parts, one per client.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acgan::ClassId;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};
use crate::tensor::Tensor;

/// Fraction of each class part used for training; the rest is test data.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub classes: Vec<ClassId>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStream {
    pub client_id: usize,
    pub classes_per_task: usize,
    pub tasks: Vec<Task>,
}

/// One manifest line: what a client sees in one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub client_id: usize,
    pub task_idx: usize,
    pub classes: Vec<ClassId>,
    pub train_count: usize,
    pub test_count: usize,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, task_idx: usize) -> Result<&Task> {
        self.tasks.get(task_idx).ok_or_else(|| {
            Error::Range(format!(
                "task {task_idx} out of {} for client {}",
                self.tasks.len(),
                self.client_id
            ))
        })
    }

    /// Uniform sample with replacement from the train split of `task_idx`.
    pub fn task_batch<R: Rng + ?Sized>(
        &self,
        dataset: &LabeledDataset,
        task_idx: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<(Tensor, Vec<ClassId>)> {
        let task = self.task(task_idx)?;
        let idx: Vec<usize> = (0..batch_size)
            .map(|_| task.train[rng.random_range(0..task.train.len())])
            .collect();
        dataset.gather(&idx)
    }

    /// All classes in tasks `0..=task_idx`.
    pub fn classes_through(&self, task_idx: usize) -> Vec<ClassId> {
        self.tasks
            .iter()
            .take(task_idx + 1)
            .flat_map(|t| t.classes.iter().copied())
            .collect()
    }

    pub fn manifest(&self) -> Vec<ManifestRecord> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(i, t)| ManifestRecord {
                client_id: self.client_id,
                task_idx: i,
                classes: t.classes.clone(),
                train_count: t.train.len(),
                test_count: t.test.len(),
            })
            .collect()
    }
}

/// Builds one stream per client.
pub fn build_task_streams(
    dataset: &LabeledDataset,
    num_clients: usize,
    classes_per_task: usize,
    num_tasks: usize,
    seed: u64,
) -> Result<Vec<TaskStream>> {
    if num_clients == 0 || classes_per_task == 0 || num_tasks == 0 {
        return Err(Error::Config(
            "clients, classes per task and tasks must all be positive".into(),
        ));
    }
    let needed = classes_per_task * num_tasks;
    if needed > dataset.num_classes() {
        return Err(Error::Config(format!(
            "{num_tasks} tasks × {classes_per_task} classes need {needed} distinct classes, dataset has {}",
            dataset.num_classes()
        )));
    }
    let mut rng = rng_for(seed, &[tag::STREAMS]);

    // Class sequence per client, drawn without replacement.
    let draws: Vec<Vec<Vec<ClassId>>> = (0..num_clients)
        .map(|_| {
            let mut classes: Vec<ClassId> = (0..dataset.num_classes()).collect();
            classes.shuffle(&mut rng);
            classes[..needed]
                .chunks(classes_per_task)
                .map(|c| c.to_vec())
                .collect()
        })
        .collect();

    // Partition each class's samples among the clients that use it.
    let mut users: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (client, tasks) in draws.iter().enumerate() {
        for &k in tasks.iter().flatten() {
            users.entry(k).or_default().push(client);
        }
    }
    let mut parts: BTreeMap<(ClassId, usize), Vec<usize>> = BTreeMap::new();
    for (&k, clients) in &users {
        let mut idx = dataset.class_indices(k).to_vec();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let share = clients.len();
        if n < 2 * share {
            return Err(Error::Config(format!(
                "class {k} has {n} samples, too few to split among {share} clients"
            )));
        }
        for (j, &client) in clients.iter().enumerate() {
            let lo = j * n / share;
            let hi = (j + 1) * n / share;
            parts.insert((k, client), idx[lo..hi].to_vec());
        }
    }

    Ok(draws
        .into_iter()
        .enumerate()
        .map(|(client, tasks)| {
            let tasks = tasks
                .into_iter()
                .map(|classes| {
                    let mut train = Vec::new();
                    let mut test = Vec::new();
                    for &k in &classes {
                        let part = &parts[&(k, client)];
                        let n_train = ((part.len() as f64 * TRAIN_FRACTION).round() as usize)
                            .clamp(1, part.len() - 1);
                        train.extend_from_slice(&part[..n_train]);
                        test.extend_from_slice(&part[n_train..]);
                    }
                    Task {
                        classes,
                        train,
                        test,
                    }
                })
                .collect();
            TaskStream {
                client_id: client,
                classes_per_task,
                tasks,
            }
        })
        .collect())
}

/// A client's view of its data: only the current task is reachable, and the
/// cursor only moves forward.
#[derive(Clone, Debug)]
pub struct LocalData {
    dataset: Arc<LabeledDataset>,
    stream: Arc<TaskStream>,
    current: usize,
}

impl LocalData {
    pub fn new(dataset: Arc<LabeledDataset>, stream: Arc<TaskStream>) -> Self {
        Self {
            dataset,
            stream,
            current: 0,
        }
    }

    pub fn client_id(&self) -> usize {
        self.stream.client_id
    }

    pub fn task_index(&self) -> usize {
        self.current
    }

    pub fn num_tasks(&self) -> usize {
        self.stream.num_tasks()
    }

    pub fn current_classes(&self) -> &[ClassId] {
        &self.stream.tasks[self.current].classes
    }

    pub fn train_count(&self) -> usize {
        self.stream.tasks[self.current].train.len()
    }

    pub fn batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<(Tensor, Vec<ClassId>)> {
        self.stream
            .task_batch(&self.dataset, self.current, batch_size, rng)
    }

    /// Test split of the current task.
    pub fn current_test(&self) -> Result<(Tensor, Vec<ClassId>)> {
        self.dataset.gather(&self.stream.tasks[self.current].test)
    }

    /// Moves to the next task; returns `false` when already at the last task.
    pub fn advance(&mut self) -> bool {
        if self.current + 1 < self.stream.num_tasks() {
            self.current += 1;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_mixture;
    use crate::rng::rng_from_seed;
    use std::collections::BTreeSet;

    fn mnist_like() -> (LabeledDataset, Vec<TaskStream>) {
        let ds = make_synthetic_mixture(10, 100, 2, 3).unwrap();
        let streams = build_task_streams(&ds, 5, 2, 5, 11).unwrap();
        (ds, streams)
    }

    #[test]
    fn each_client_sees_every_class_once() {
        let (_, streams) = mnist_like();
        assert_eq!(streams.len(), 5);
        for s in &streams {
            let all: Vec<_> = s.tasks.iter().flat_map(|t| t.classes.clone()).collect();
            let set: BTreeSet<_> = all.iter().copied().collect();
            assert_eq!(all.len(), 10);
            assert_eq!(set, (0..10).collect());
        }
    }

    #[test]
    fn splits_are_disjoint_and_class_pure() {
        let (ds, streams) = mnist_like();
        for s in &streams {
            for t in &s.tasks {
                let train: BTreeSet<_> = t.train.iter().collect();
                assert!(t.test.iter().all(|i| !train.contains(i)));
                for &i in t.train.iter().chain(&t.test) {
                    assert!(t.classes.contains(&ds.labels()[i]));
                }
                let frac = t.train.len() as f64 / (t.train.len() + t.test.len()) as f64;
                assert!((frac - 0.8).abs() < 0.05);
            }
        }
    }

    #[test]
    fn shared_class_indices_are_disjoint_across_clients() {
        let (ds, streams) = mnist_like();
        for k in 0..ds.num_classes() {
            let per_client: Vec<BTreeSet<usize>> = streams
                .iter()
                .map(|s| {
                    s.tasks
                        .iter()
                        .flat_map(|t| t.train.iter().chain(&t.test))
                        .copied()
                        .filter(|&i| ds.labels()[i] == k)
                        .collect()
                })
                .collect();
            for a in 0..per_client.len() {
                for b in a + 1..per_client.len() {
                    assert!(per_client[a].is_disjoint(&per_client[b]));
                }
            }
        }
    }

    #[test]
    fn single_task_and_infeasible_configs() {
        let ds = make_synthetic_mixture(4, 50, 2, 3).unwrap();
        let s = build_task_streams(&ds, 2, 2, 1, 1).unwrap();
        assert!(s.iter().all(|s| s.num_tasks() == 1));
        assert!(matches!(build_task_streams(&ds, 2, 3, 2, 1), Err(Error::Config(_))));
        assert!(matches!(build_task_streams(&ds, 0, 1, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn construction_is_pure() {
        let ds = make_synthetic_mixture(6, 40, 2, 3).unwrap();
        assert_eq!(
            build_task_streams(&ds, 3, 2, 3, 5).unwrap(),
            build_task_streams(&ds, 3, 2, 3, 5).unwrap()
        );
    }

    #[test]
    fn batches_only_touch_the_requested_task() {
        let (ds, streams) = mnist_like();
        let s = &streams[0];
        let mut rng = rng_from_seed(1);
        let (_, labels) = s.task_batch(&ds, 2, 500, &mut rng).unwrap();
        assert!(labels.iter().all(|l| s.tasks[2].classes.contains(l)));
        assert!(labels.iter().all(|l| !s.tasks[1].classes.contains(l)));
        assert!(matches!(s.task_batch(&ds, 5, 1, &mut rng), Err(Error::Range(_))));
    }

    #[test]
    fn batch_labels_are_uniform() {
        let (ds, streams) = mnist_like();
        let s = &streams[1];
        let task = &s.tasks[0];
        let mut rng = rng_from_seed(2);
        let (_, labels) = s.task_batch(&ds, 0, 10_000, &mut rng).unwrap();
        for &k in &task.classes {
            let expected = task.train.iter().filter(|&&i| ds.labels()[i] == k).count() as f64
                / task.train.len() as f64;
            let observed = labels.iter().filter(|&&l| l == k).count() as f64 / 10_000.0;
            assert!((observed - expected).abs() < 0.05 * expected);
        }
    }

    #[test]
    fn local_data_never_goes_back() {
        let (ds, streams) = mnist_like();
        let mut local = LocalData::new(Arc::new(ds), Arc::new(streams[0].clone()));
        let first = local.current_classes().to_vec();
        assert!(local.advance());
        let mut rng = rng_from_seed(3);
        let (_, labels) = local.batch(200, &mut rng).unwrap();
        assert!(labels.iter().all(|l| !first.contains(l)));
        while local.advance() {}
        assert_eq!(local.task_index(), 4);
        assert!(!local.advance());
    }

    #[test]
    fn manifest_has_one_record_per_task() {
        let (_, streams) = mnist_like();
        let m = streams[3].manifest();
        assert_eq!(m.len(), 5);
        assert_eq!(m[2].classes, streams[3].tasks[2].classes);
        assert_eq!(m[2].client_id, 3);
    }
}
