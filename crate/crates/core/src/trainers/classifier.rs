//! Classifier-only objectives: plain cross-entropy, proximal term and
//! two-teacher distillation.

use std::collections::BTreeMap;

use crate::acgan::{proximal_term, AcganModel, Bound, ClassId, Group};
use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

use super::ClientState;

/// Softened outputs of a frozen teacher, with the student head positions of
/// the teacher's classes.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub soft: Tensor,
    pub positions: Vec<usize>,
}

impl Teacher {
    pub fn new(teacher: &AcganModel, student: &AcganModel, x: &Tensor, tau: f64) -> Result<Self> {
        Ok(Self {
            soft: soften(&teacher.logits(x)?, tau),
            positions: student.class_indices(teacher.classes())?,
        })
    }
}

/// `softmax(logits / τ)` row-wise.
pub fn soften(logits: &Tensor, tau: f64) -> Tensor {
    let scaled = Tensor::from_parts(
        logits.shape().to_vec(),
        logits.data().iter().map(|v| v / tau).collect(),
    );
    softmax_rows(&scaled)
}

/// `τ²·KL(teacher ‖ softmax(logits[:, positions] / τ))`.
pub fn kd_term<'t>(logits: Var<'t>, teacher: &Teacher, tau: f64) -> Result<Var<'t>> {
    let student = logits
        .select_cols(&teacher.positions)?
        .scale(1.0 / tau)
        .softmax()?;
    let target = logits.tape().constant(teacher.soft.clone());
    Ok(target.kl_divergence(student)?.scale(tau * tau))
}

pub struct ClassifierTerms<'t> {
    pub total: Var<'t>,
    pub ce: Var<'t>,
    pub kd: Vec<Var<'t>>,
}

/// Cross-entropy on `(x, labels)` plus distillation and proximal terms.
pub fn classifier_objective<'t>(
    model: &AcganModel,
    b: &Bound<'t>,
    x: &Tensor,
    labels: &[ClassId],
    teachers: &[Teacher],
    tau: f64,
    prox: Option<(&BTreeMap<String, Tensor>, f64)>,
) -> Result<ClassifierTerms<'t>> {
    let tape = b.get("cls.w").tape();
    let y = tape.constant(model.one_hot(labels)?);
    let f = model.features(b, tape.constant(x.clone()))?;
    let logits = model.class_logits(b, f)?;
    let ce = logits.softmax()?.cross_entropy(y)?;
    let mut total = ce;
    let mut kd = Vec::with_capacity(teachers.len());
    for t in teachers {
        let term = kd_term(logits, t, tau)?;
        total = total.add(term)?;
        kd.push(term);
    }
    if let Some((anchor, mu)) = prox {
        if let Some(p) = proximal_term(b, anchor, mu)? {
            total = total.add(p)?;
        }
    }
    Ok(ClassifierTerms { total, ce, kd })
}

impl ClientState {
    /// Teachers for the current batch: the previous-task model and the last
    /// broadcast, whichever exist and know at least one class.
    pub(super) fn teachers(&self, x: &Tensor) -> Result<Vec<Teacher>> {
        let tau = self.opts.kd_temperature;
        [self.previous.as_ref(), self.global.as_ref()]
            .into_iter()
            .flatten()
            .filter(|m| m.num_classes() > 0)
            .map(|m| Teacher::new(m, &self.model, x, tau))
            .collect()
    }

    /// One Adam step on the classifier objective; returns the cross-entropy and
    /// the summed distillation terms.
    pub(super) fn classifier_step(
        &mut self,
        x: &Tensor,
        labels: &[ClassId],
        teachers: &[Teacher],
    ) -> Result<(f64, Option<f64>)> {
        let tape = Tape::new();
        let b = self.model.bind(&tape, Group::Classifier);
        let prox = self.anchor.as_ref().map(|a| (a, self.opts.mu));
        let terms = classifier_objective(
            &self.model,
            &b,
            x,
            labels,
            teachers,
            self.opts.kd_temperature,
            prox,
        )?;
        let ce = terms.ce.item();
        let kd = (!terms.kd.is_empty()).then(|| terms.kd.iter().map(|v| v.item()).sum());
        let grads = tape.backward(terms.total)?;
        self.optim.dis.step(self.model.params_mut(), &b.grads(&grads));
        Ok((ce, kd))
    }
}
