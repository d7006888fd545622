//! Deep generative replay: a separate unconditional GAN, with replayed
//! samples labelled by the frozen previous classifier.
//!
//! The GAN reuses [`AcganModel`](crate::acgan::AcganModel) with a single
//! class, so its auxiliary cross-entropy is identically zero.

use crate::acgan::{alternating_step, AcganStepLosses, ClassId, NoExtra};
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::tensor::Tensor;

use super::ClientState;

/// The only label of the unconditional GAN.
pub const GAN_LABEL: ClassId = 0;

impl ClientState {
    /// `n` samples from the previous GAN, labelled by the previous classifier's argmax.
    pub fn dgr_replay(&self, n: usize, rng: &mut SimRng) -> Result<Option<(Tensor, Vec<ClassId>)>> {
        let (Some(gan), Some(classifier)) = (&self.previous_gan, &self.previous) else {
            return Ok(None);
        };
        if self.opts.no_replay || classifier.num_classes() == 0 {
            return Ok(None);
        }
        let x = gan.generate_with_rng(&vec![GAN_LABEL; n], rng)?;
        let y = classifier.predict(&x)?;
        Ok(Some((x, y)))
    }

    pub(super) fn dgr_step(&mut self, x: &Tensor, labels: &[ClassId], rng: &mut SimRng) -> Result<AcganStepLosses> {
        let (train_x, train_y) = match self.dgr_replay(labels.len(), rng)? {
            Some((rx, ry)) => (
                Tensor::concat_rows(&[x, &rx])?,
                labels.iter().chain(&ry).copied().collect::<Vec<_>>(),
            ),
            None => (x.clone(), labels.to_vec()),
        };
        self.classifier_step(&train_x, &train_y, &[])?;
        let (gan, optim) = self
            .gan
            .as_mut()
            .ok_or_else(|| Error::State("client has no replay GAN".into()))?;
        let gan_labels = vec![GAN_LABEL; train_x.rows()];
        let (losses, _) = alternating_step(gan, optim, &train_x, &gan_labels, rng, &NoExtra, None)?;
        Ok(losses)
    }
}
