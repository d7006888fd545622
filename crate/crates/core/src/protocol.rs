//! Server side of a round: merging uploads, consolidating the global model
//! on generated data, and the round loop itself.
//!
//! Clients and server exchange nothing but [`Upload`]s and the broadcast
//! [`ParameterVector`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::acgan::{alternating_step, AcganModel, AcganOptim, ClassId, Group, NoExtra};
use crate::error::{Error, Result};
use crate::params::{is_class_indexed, ParamEntry, ParameterVector, CLASSES_ENTRY};
use crate::rng::{rng_for, tag, SimRng};
use crate::tensor::Tensor;
use crate::trainers::{ClientRoundRecord, ClientState};

/// Everything a client sends to the server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Upload {
    pub params: ParameterVector,
    /// Weight of this upload in the average.
    pub sample_count: usize,
    /// Classes the client has trained so far.
    pub classes: Vec<ClassId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsolidationConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 64,
            lr: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationStats {
    pub iterations: usize,
    pub mean_dis: f64,
    pub mean_gen: f64,
}

#[derive(Clone, Debug)]
pub struct ServerState {
    model: AcganModel,
    round: usize,
    consolidation: ConsolidationConfig,
    consolidate: bool,
    sync_group: Group,
    seed: u64,
}

impl ServerState {
    pub fn new(
        model: AcganModel,
        consolidation: ConsolidationConfig,
        consolidate: bool,
        sync_group: Group,
        seed: u64,
    ) -> Self {
        Self {
            model,
            round: 0,
            consolidation,
            consolidate,
            sync_group,
            seed,
        }
    }

    pub fn model(&self) -> &AcganModel {
        &self.model
    }

    pub fn known_classes(&self) -> &[ClassId] {
        self.model.classes()
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn consolidation(&self) -> &ConsolidationConfig {
        &self.consolidation
    }

    pub fn consolidates(&self) -> bool {
        self.consolidate
    }

    pub fn broadcast(&self) -> ParameterVector {
        self.model.to_parameter_vector(self.sync_group)
    }

    /// Merges `uploads` into the global model, growing it to the class union,
    /// then consolidates if enabled. Advances the round counter.
    pub fn aggregate(&mut self, uploads: &[Upload]) -> Result<Option<ConsolidationStats>> {
        let merged = merge_onto(self.model.classes(), uploads)?;
        self.model.load_parameter_vector(&merged)?;
        let stats = if self.consolidate {
            let mut rng = rng_for(self.seed, &[tag::CONSOLIDATE, self.round as u64]);
            Some(consolidate(&mut self.model, uploads, &self.consolidation, &mut rng)?)
        } else {
            None
        };
        self.round += 1;
        Ok(stats)
    }
}

/// Merge with the class order given by the uploads alone (sorted labels).
pub fn merge_parameters(uploads: &[Upload]) -> Result<ParameterVector> {
    merge_onto(&[], uploads)
}

/// Sample-count-weighted average of the body. Each class-indexed row is
/// averaged over the uploads that trained that class; if none did, over all
/// uploads carrying the row. The merged class order is `base` followed by the
/// remaining labels in ascending order.
pub fn merge_onto(base: &[ClassId], uploads: &[Upload]) -> Result<ParameterVector> {
    if uploads.is_empty() {
        return Err(Error::Protocol("no uploads to merge".into()));
    }
    // A canonical order makes the floating-point sums independent of arrival order.
    let mut keyed: Vec<(Vec<u8>, &Upload)> = uploads.iter().map(|u| (u.params.to_bytes(), u)).collect();
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.sample_count.cmp(&b.1.sample_count))
            .then(a.1.classes.cmp(&b.1.classes))
    });
    let ordered: Vec<&Upload> = keyed.into_iter().map(|(_, u)| u).collect();

    let first = &ordered[0].params;
    for u in &ordered[1..] {
        if !first.is_aggregation_compatible(&u.params) {
            return Err(Error::Protocol("uploads are not aggregation-compatible".into()));
        }
    }
    if ordered.iter().any(|u| u.sample_count == 0) {
        return Err(Error::Protocol("upload with zero samples".into()));
    }
    let total: f64 = ordered.iter().map(|u| u.sample_count as f64).sum();
    let class_lists: Vec<Vec<ClassId>> = ordered
        .iter()
        .map(|u| {
            u.params
                .classes()
                .ok_or_else(|| Error::Protocol(format!("upload lacks {CLASSES_ENTRY}")))
        })
        .collect::<Result<_>>()?;

    let mut union = base.to_vec();
    let extra: BTreeSet<ClassId> = class_lists
        .iter()
        .flatten()
        .copied()
        .filter(|k| !base.contains(k))
        .collect();
    union.extend(extra);

    let mut entries = Vec::with_capacity(first.len());
    for e in first.entries() {
        let name = e.name.as_str();
        if name == CLASSES_ENTRY {
            entries.push(ParamEntry {
                name: name.into(),
                shape: vec![union.len()],
                data: union.iter().map(|&c| c as f64).collect(),
            });
            continue;
        }
        let sources: Vec<&ParamEntry> = ordered
            .iter()
            .map(|u| u.params.get(name).expect("compatible uploads share names"))
            .collect();
        if !is_class_indexed(name) {
            let parts: Vec<(&[f64], f64)> = sources
                .iter()
                .zip(&ordered)
                .map(|(s, u)| (s.data.as_slice(), u.sample_count as f64 / total))
                .collect();
            entries.push(ParamEntry {
                name: name.into(),
                shape: e.shape.clone(),
                data: weighted_average(&parts),
            });
            continue;
        }
        let width: usize = e.shape[1..].iter().product();
        let mut data = Vec::with_capacity(union.len() * width);
        for &label in &union {
            let carriers: Vec<(&[f64], f64, bool)> = sources
                .iter()
                .zip(&ordered)
                .zip(&class_lists)
                .filter_map(|((s, u), classes)| {
                    let i = classes.iter().position(|&c| c == label)?;
                    Some((
                        &s.data[i * width..(i + 1) * width],
                        u.sample_count as f64,
                        u.classes.contains(&label),
                    ))
                })
                .collect();
            if carriers.is_empty() {
                return Err(Error::Protocol(format!("no upload carries class {label}")));
            }
            let trained = carriers.iter().any(|c| c.2);
            let chosen: Vec<(&[f64], f64)> = carriers
                .iter()
                .filter(|c| c.2 || !trained)
                .map(|c| (c.0, c.1))
                .collect();
            let weight: f64 = chosen.iter().map(|c| c.1).sum();
            let parts: Vec<(&[f64], f64)> = chosen.iter().map(|&(d, w)| (d, w / weight)).collect();
            data.extend(weighted_average(&parts));
        }
        let mut shape = e.shape.clone();
        shape[0] = union.len();
        entries.push(ParamEntry {
            name: name.into(),
            shape,
            data,
        });
    }
    ParameterVector::new(entries)
}

/// `Σ wᵢ·xᵢ` for normalised weights; bit-exact copy when all parts agree.
fn weighted_average(parts: &[(&[f64], f64)]) -> Vec<f64> {
    let (head, _) = parts[0];
    let identical = parts[1..].iter().all(|(d, _)| {
        d.iter()
            .zip(head.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    });
    if identical {
        return head.to_vec();
    }
    let mut out = vec![0.0; head.len()];
    for (d, w) in parts {
        for (o, v) in out.iter_mut().zip(d.iter()) {
            *o += w * v;
        }
    }
    out
}

/// `n` labels cycling through `classes`, continuing from `*cursor`.
pub fn balanced_labels(classes: &[ClassId], cursor: &mut usize, n: usize) -> Vec<ClassId> {
    (0..n)
        .map(|_| {
            let k = classes[*cursor % classes.len()];
            *cursor += 1;
            k
        })
        .collect()
}

/// Trains `model` with the ACGAN objective on class-balanced batches drawn
/// from the uploaded generators, which play the role of real data.
pub fn consolidate(
    model: &mut AcganModel,
    uploads: &[Upload],
    cfg: &ConsolidationConfig,
    rng: &mut SimRng,
) -> Result<ConsolidationStats> {
    let classes = model.classes().to_vec();
    let mut generators = Vec::with_capacity(uploads.len());
    for u in uploads {
        if !u.params.names().any(|n| n.starts_with("gen.")) {
            return Err(Error::Protocol("consolidation needs generator uploads".into()));
        }
        let mut g = model.clone();
        g.load_parameter_vector(&u.params)?;
        let knows: Vec<ClassId> = u
            .classes
            .iter()
            .copied()
            .filter(|k| g.classes().contains(k))
            .collect();
        generators.push((g, knows));
    }
    let owners: BTreeMap<ClassId, Vec<usize>> = classes
        .iter()
        .map(|&k| {
            let who: Vec<usize> = (0..generators.len())
                .filter(|&i| generators[i].1.contains(&k))
                .collect();
            if who.is_empty() {
                Err(Error::Protocol(format!("class {k} has no uploaded generator")))
            } else {
                Ok((k, who))
            }
        })
        .collect::<Result<_>>()?;

    let mut optim = AcganOptim::new(cfg.lr);
    let mut cursor = 0;
    let (mut dis, mut gen) = (0.0, 0.0);
    for _ in 0..cfg.iterations {
        let labels = balanced_labels(&classes, &mut cursor, cfg.batch_size);
        let x = sample_from_generators(&generators, &owners, &labels, rng)?;
        let (losses, _) = alternating_step(model, &mut optim, &x, &labels, rng, &NoExtra, None)?;
        dis += losses.dis_total();
        gen += losses.gen_total();
    }
    let n = cfg.iterations.max(1) as f64;
    Ok(ConsolidationStats {
        iterations: cfg.iterations,
        mean_dis: dis / n,
        mean_gen: gen / n,
    })
}

fn sample_from_generators(
    generators: &[(AcganModel, Vec<ClassId>)],
    owners: &BTreeMap<ClassId, Vec<usize>>,
    labels: &[ClassId],
    rng: &mut SimRng,
) -> Result<Tensor> {
    use rand::Rng;
    let pick: Vec<usize> = labels
        .iter()
        .map(|k| {
            let who = &owners[k];
            who[rng.random_range(0..who.len())]
        })
        .collect();
    let dim = generators[0].0.config().data_dim;
    let mut data = vec![0.0; labels.len() * dim];
    for (g, (model, _)) in generators.iter().enumerate() {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| pick[i] == g).collect();
        if rows.is_empty() {
            continue;
        }
        let ls: Vec<ClassId> = rows.iter().map(|&i| labels[i]).collect();
        let out = model.generate_with_rng(&ls, rng)?;
        for (j, &i) in rows.iter().enumerate() {
            data[i * dim..(i + 1) * dim].copy_from_slice(out.row(j));
        }
    }
    Tensor::new(vec![labels.len(), dim], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: usize,
    pub local_iterations: usize,
    pub selected: Vec<usize>,
    /// Clients move to their next task after this round.
    pub task_boundary: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub known_classes: Vec<ClassId>,
    pub clients: Vec<ClientRoundRecord>,
    pub consolidation: Option<ConsolidationStats>,
}

/// Local training on the selected clients, upload, optional task advance,
/// merge and consolidation, then broadcast to every client.
pub fn run_round(server: &mut ServerState, clients: &mut [ClientState], plan: &RoundPlan) -> Result<RoundRecord> {
    if plan.selected.is_empty() {
        return Err(Error::Protocol("round with no selected clients".into()));
    }
    if plan.local_iterations == 0 {
        return Err(Error::Protocol("local iterations must be positive".into()));
    }
    if let Some(&bad) = plan.selected.iter().find(|&&i| i >= clients.len()) {
        return Err(Error::Protocol(format!("client {bad} does not exist")));
    }
    let mut records = Vec::with_capacity(plan.selected.len());
    let mut uploads = Vec::with_capacity(plan.selected.len());
    for &i in &plan.selected {
        let client = &mut clients[i];
        let record = client
            .train_round(plan.local_iterations, plan.round)
            .map_err(|e| Error::Protocol(format!("client {} failed: {e}", client.id())))?;
        records.push(record);
        uploads.push(client.upload());
    }
    if plan.task_boundary {
        for c in clients.iter_mut() {
            c.on_task_boundary()?;
        }
    }
    let consolidation = server.aggregate(&uploads)?;
    let pv = server.broadcast();
    for c in clients.iter_mut() {
        c.receive_broadcast(&pv, plan.round + 1)?;
    }
    Ok(RoundRecord {
        round: plan.round,
        known_classes: server.known_classes().to_vec(),
        clients: records,
        consolidation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acgan::AcganConfig;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn entry(name: &str, shape: Vec<usize>, data: Vec<f64>) -> ParamEntry {
        ParamEntry {
            name: name.into(),
            shape,
            data,
        }
    }

    fn upload(body: f64, classes: &[ClassId], rows: &[f64], trained: &[ClassId], n: usize) -> Upload {
        Upload {
            params: ParameterVector::new(vec![
                entry("trunk.l0.w", vec![1], vec![body]),
                entry("cls.b", vec![classes.len()], rows.to_vec()),
                entry(CLASSES_ENTRY, vec![classes.len()], classes.iter().map(|&c| c as f64).collect()),
            ])
            .unwrap(),
            sample_count: n,
            classes: trained.to_vec(),
        }
    }

    #[test]
    fn weighted_mean_of_scalars() {
        let m = merge_parameters(&[upload(0.0, &[0], &[1.0], &[0], 1), upload(4.0, &[0], &[1.0], &[0], 3)]).unwrap();
        assert_eq!(m.get("trunk.l0.w").unwrap().data, vec![3.0]);
    }

    #[test]
    fn identical_uploads_are_fixed_points() {
        let u = upload(0.1 + 0.2, &[3, 1], &[0.7, -0.3], &[3, 1], 7);
        let m = merge_parameters(&[u.clone(), u.clone(), u.clone()]).unwrap();
        assert_eq!(m.get("trunk.l0.w").unwrap().data[0].to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn unique_class_row_is_copied() {
        let a = upload(1.0, &[0, 1], &[0.1, 0.2], &[0, 1], 10);
        let b = upload(2.0, &[0, 1, 7], &[0.3, 0.4, 0.123456789], &[0, 7], 10);
        let c = upload(3.0, &[0, 1], &[0.5, 0.6], &[1], 10);
        let m = merge_onto(&[0, 1], &[a, b, c]).unwrap();
        assert_eq!(m.classes().unwrap(), vec![0, 1, 7]);
        let rows = &m.get("cls.b").unwrap().data;
        assert_eq!(rows[2], 0.123456789);
        // Class 0 trained by a and b only; class 1 by a and c.
        assert!((rows[0] - 0.2).abs() < 1e-15);
        assert!((rows[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn untrained_rows_fall_back_to_all_carriers() {
        let a = upload(1.0, &[0, 5], &[0.0, 1.0], &[0], 1);
        let b = upload(1.0, &[0, 5], &[0.0, 3.0], &[0], 1);
        let m = merge_parameters(&[a, b]).unwrap();
        assert_eq!(m.get("cls.b").unwrap().data[1], 2.0);
    }

    #[test]
    fn merge_errors() {
        assert!(matches!(merge_parameters(&[]), Err(Error::Protocol(_))));
        let a = upload(1.0, &[0], &[0.0], &[0], 1);
        let mut b = a.clone();
        b.params = ParameterVector::new(vec![entry("trunk.l0.w", vec![2], vec![0.0, 0.0])]).unwrap();
        assert!(matches!(merge_parameters(&[a.clone(), b]), Err(Error::Protocol(_))));
        assert!(matches!(merge_onto(&[9], &[a]), Err(Error::Protocol(_))));
    }

    #[test]
    fn balanced_histogram() {
        let classes: Vec<ClassId> = (0..6).collect();
        let mut cursor = 0;
        let labels = balanced_labels(&classes, &mut cursor, 60);
        for k in 0..6 {
            assert_eq!(labels.iter().filter(|&&l| l == k).count(), 10);
        }
        let next = balanced_labels(&classes, &mut cursor, 2);
        assert_eq!(next, vec![0, 1]);
    }

    fn tiny_model(classes: &[ClassId], seed: u64) -> AcganModel {
        let cfg = AcganConfig {
            gen_hidden: 8,
            trunk_hidden: 8,
            feature_dim: 4,
            ..AcganConfig::default()
        };
        AcganModel::new(cfg, classes, &mut rng_from_seed(seed)).unwrap()
    }

    #[test]
    fn zero_iteration_consolidation_is_identity() {
        let mut m = tiny_model(&[0, 1], 1);
        let before = m.clone();
        let u = Upload {
            params: tiny_model(&[0, 1], 2).to_parameter_vector(Group::All),
            sample_count: 1,
            classes: vec![0, 1],
        };
        let cfg = ConsolidationConfig {
            iterations: 0,
            ..ConsolidationConfig::default()
        };
        consolidate(&mut m, &[u], &cfg, &mut rng_from_seed(0)).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn consolidation_requires_coverage() {
        let mut m = tiny_model(&[0, 1, 2], 1);
        let u = Upload {
            params: tiny_model(&[0, 1], 2).to_parameter_vector(Group::All),
            sample_count: 1,
            classes: vec![0, 1],
        };
        let err = consolidate(&mut m, std::slice::from_ref(&u), &ConsolidationConfig::default(), &mut rng_from_seed(0));
        assert!(matches!(err, Err(Error::Protocol(_))));
        let classifier_only = Upload {
            params: tiny_model(&[0, 1, 2], 2).to_parameter_vector(Group::Classifier),
            ..u
        };
        let err = consolidate(&mut m, &[classifier_only], &ConsolidationConfig::default(), &mut rng_from_seed(0));
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    #[test]
    fn consolidation_changes_every_group() {
        let mut m = tiny_model(&[0, 1], 1);
        let before = m.clone();
        let u = Upload {
            params: tiny_model(&[0, 1], 2).to_parameter_vector(Group::All),
            sample_count: 1,
            classes: vec![0, 1],
        };
        let cfg = ConsolidationConfig {
            iterations: 3,
            batch_size: 4,
            lr: 1e-3,
        };
        let stats = consolidate(&mut m, &[u], &cfg, &mut rng_from_seed(0)).unwrap();
        assert_eq!(stats.iterations, 3);
        for name in ["gen.l1.w", "trunk.l0.w", "disc.w", "cls.w"] {
            assert_ne!(m.param(name), before.param(name), "{name}");
        }
    }

    proptest! {
        #[test]
        fn merge_is_permutation_invariant(
            bodies in prop::collection::vec(-5.0f64..5.0, 2..6),
            rows in prop::collection::vec(-1.0f64..1.0, 12),
            counts in prop::collection::vec(1usize..50, 6),
            shift in 0usize..6,
        ) {
            let uploads: Vec<Upload> = bodies
                .iter()
                .enumerate()
                .map(|(i, &b)| {
                    let classes: Vec<ClassId> = if i % 2 == 0 { vec![0, 1] } else { vec![1, 4] };
                    upload(b, &classes, &rows[2 * i..2 * i + 2], &classes[..1 + i % 2], counts[i])
                })
                .collect();
            let mut rotated = uploads.clone();
            rotated.rotate_left(shift % uploads.len());
            rotated.reverse();
            prop_assert_eq!(merge_parameters(&uploads).unwrap(), merge_parameters(&rotated).unwrap());
        }

        #[test]
        fn identical_bodies_are_preserved(body in -10.0f64..10.0, k in 1usize..6, counts in prop::collection::vec(1usize..9, 6)) {
            let uploads: Vec<Upload> = (0..k).map(|i| upload(body, &[2], &[0.5], &[2], counts[i])).collect();
            let m = merge_parameters(&uploads).unwrap();
            prop_assert_eq!(m.get("trunk.l0.w").unwrap().data[0].to_bits(), body.to_bits());
        }
    }
}
