//! ACGAN training with generative replay, and the consistency terms that
//! align the classifier across real, previous-generator and
//! global-generator samples.

use crate::acgan::{alternating_step, uniform_labels, AcganModel, AcganStepLosses, Bound, ClassId, DisExtra};
use crate::autodiff::Var;
use crate::error::Result;
use crate::rng::SimRng;
use crate::tensor::Tensor;

use super::{ClientState, Strategy};

/// Pre-generated inputs of the three consistency terms. Samples from the
/// frozen generators are plain tensors; only the classifier sees gradients.
#[derive(Clone, Debug, Default)]
pub struct Consistency {
    pub weights: [f64; 3],
    /// Label-paired samples from the previous-task generator and the global generator.
    pub c1: Option<(Tensor, Tensor)>,
    /// Real samples and global-generator samples conditioned on the same labels.
    pub c2: Option<(Tensor, Tensor)>,
    /// Global-generator samples and their conditioning labels.
    pub c3: Option<(Tensor, Vec<ClassId>)>,
}

impl Consistency {
    pub fn active(&self) -> [bool; 3] {
        [
            self.c1.is_some() && self.weights[0] != 0.0,
            self.c2.is_some() && self.weights[1] != 0.0,
            self.c3.is_some() && self.weights[2] != 0.0,
        ]
    }

    /// Weighted terms in order, `None` where dropped.
    pub fn weighted_terms<'t>(&self, model: &AcganModel, b: &Bound<'t>) -> Result<[Option<Var<'t>>; 3]> {
        let tape = b.get("cls.w").tape();
        let probs = |x: &Tensor| -> Result<Var<'t>> {
            let f = model.features(b, tape.constant(x.clone()))?;
            model.class_probs(b, f)
        };
        let active = self.active();
        let mut out = [None, None, None];
        if let (true, Some((prev, glob))) = (active[0], &self.c1) {
            out[0] = Some(probs(prev)?.kl_divergence(probs(glob)?)?.scale(self.weights[0]));
        }
        if let (true, Some((real, glob))) = (active[1], &self.c2) {
            out[1] = Some(probs(real)?.kl_divergence(probs(glob)?)?.scale(self.weights[1]));
        }
        if let (true, Some((glob, labels))) = (active[2], &self.c3) {
            let y = tape.constant(model.one_hot(labels)?);
            out[2] = Some(probs(glob)?.cross_entropy(y)?.scale(self.weights[2]));
        }
        Ok(out)
    }

    fn spread(&self, values: &[f64]) -> [Option<f64>; 3] {
        let mut it = values.iter().copied();
        self.active().map(|on| if on { it.next() } else { None })
    }
}

impl DisExtra for Consistency {
    fn terms<'t>(&self, model: &AcganModel, b: &Bound<'t>) -> Result<Vec<Var<'t>>> {
        Ok(self.weighted_terms(model, b)?.into_iter().flatten().collect())
    }
}

impl ClientState {
    /// `n` samples from the previous-task generator, labels uniform over the
    /// finished classes.
    pub fn replay_batch(&self, n: usize, rng: &mut SimRng) -> Result<Option<(Tensor, Vec<ClassId>)>> {
        let Some(prev) = &self.previous else {
            return Ok(None);
        };
        if self.opts.no_replay || self.finished.is_empty() {
            return Ok(None);
        }
        let labels = uniform_labels(&self.finished, n, rng);
        Ok(Some((prev.generate_with_rng(&labels, rng)?, labels)))
    }

    pub(super) fn consistency_inputs(&self, x: &Tensor, labels: &[ClassId], rng: &mut SimRng) -> Result<Consistency> {
        let mut c = Consistency {
            weights: self.opts.consistency_weights,
            ..Consistency::default()
        };
        let Some(global) = &self.global else {
            return Ok(c);
        };
        let n = labels.len();
        let [w1, w2, w3] = c.weights.map(|w| w != 0.0);
        if let (true, Some(prev)) = (w1, &self.previous) {
            let shared: Vec<ClassId> = self
                .finished
                .iter()
                .copied()
                .filter(|k| global.classes().contains(k))
                .collect();
            if !shared.is_empty() {
                let paired = uniform_labels(&shared, n, rng);
                c.c1 = Some((prev.generate_with_rng(&paired, rng)?, global.generate_with_rng(&paired, rng)?));
            }
        }
        let known: Vec<usize> = (0..n)
            .filter(|&i| global.classes().contains(&labels[i]))
            .collect();
        if w2 && !known.is_empty() {
            let paired: Vec<ClassId> = known.iter().map(|&i| labels[i]).collect();
            c.c2 = Some((x.select_rows(&known)?, global.generate_with_rng(&paired, rng)?));
        }
        if w3 {
            let drawn = uniform_labels(global.classes(), n, rng);
            c.c3 = Some((global.generate_with_rng(&drawn, rng)?, drawn));
        }
        Ok(c)
    }

    /// ACGAN step on the real batch joined with replay; FedCIL adds the
    /// consistency terms to the discriminator/classifier side.
    pub(super) fn acgan_step(
        &mut self,
        x: &Tensor,
        labels: &[ClassId],
        rng: &mut SimRng,
    ) -> Result<(AcganStepLosses, [Option<f64>; 3])> {
        let (train_x, train_y) = match self.replay_batch(labels.len(), rng)? {
            Some((rx, ry)) => (
                Tensor::concat_rows(&[x, &rx])?,
                labels.iter().chain(&ry).copied().collect(),
            ),
            None => (x.clone(), labels.to_vec()),
        };
        let consistency = if self.method.strategy() == Strategy::Fedcil
            && !self.opts.no_consistency
            && !self.opts.no_replay
        {
            self.consistency_inputs(x, labels, rng)?
        } else {
            Consistency::default()
        };
        let prox = self.anchor.as_ref().map(|a| (a, self.opts.mu));
        let (losses, extras) = alternating_step(
            &mut self.model,
            &mut self.optim,
            &train_x,
            &train_y,
            rng,
            &consistency,
            prox,
        )?;
        Ok((losses, consistency.spread(&extras)))
    }
}
