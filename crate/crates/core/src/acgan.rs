//! Auxiliary-classifier GAN built from small MLPs.
//!
//! The model is a conditional generator plus a feature trunk shared by a
//! real/fake head and a growable class head. All parameters live in one
//! name-keyed map:
//!
//! | name        | shape                  | role                                 |
//! |-------------|------------------------|--------------------------------------|
//! | `gen.z.w`   | noise × gen_hidden     | noise input weights                  |
//! | `gen.cond`  | classes × gen_hidden   | one-hot conditioning weights         |
//! | `gen.l0.b`  | gen_hidden             |                                      |
//! | `gen.l1.*`  | gen_hidden × gen_hidden|                                      |
//! | `gen.out.*` | gen_hidden × data_dim  | tanh output                          |
//! | `trunk.*`   | data_dim → hidden → feature | shared feature extractor        |
//! | `disc.*`    | feature × 1            | sigmoid real/fake head               |
//! | `cls.w`     | classes × feature      | softmax class head (row per class)   |
//! | `cls.b`     | classes                |                                      |
//!
//! Class-indexed rows follow the order of [`AcganModel::classes`], which maps
//! head position to dataset label.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{is_class_indexed, ParamEntry, ParameterVector, CLASSES_ENTRY};
use crate::rng::{rng_from_seed, SimRng};
use crate::tensor::Tensor;

pub type ClassId = usize;

/// Standard deviation of rows added by [`AcganModel::grow_classes`].
pub const GROW_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcganConfig {
    pub data_dim: usize,
    pub noise_dim: usize,
    pub gen_hidden: usize,
    pub trunk_hidden: usize,
    pub feature_dim: usize,
    pub leak: f64,
}

impl Default for AcganConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            noise_dim: 2,
            gen_hidden: 64,
            trunk_hidden: 64,
            feature_dim: 32,
            leak: 0.2,
        }
    }
}

/// Parameter groups, used to scope optimizer steps and uploads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Generator,
    /// Trunk, real/fake head and class head.
    Discriminator,
    /// Trunk and class head.
    Classifier,
    All,
    None,
}

impl Group {
    pub fn contains(self, name: &str) -> bool {
        match self {
            Group::Generator => name.starts_with("gen."),
            Group::Discriminator => {
                name.starts_with("trunk.") || name.starts_with("disc.") || name.starts_with("cls.")
            }
            Group::Classifier => name.starts_with("trunk.") || name.starts_with("cls."),
            Group::All => !name.starts_with("meta."),
            Group::None => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcganModel {
    config: AcganConfig,
    classes: Vec<ClassId>,
    params: BTreeMap<String, Tensor>,
}

/// Model parameters registered on a tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
    trainable: Vec<String>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        self.vars[name]
    }

    pub fn trainable(&self) -> &[String] {
        &self.trainable
    }

    /// Gradients of all trainable parameters, zero-filled where the loss did not reach.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.trainable
            .iter()
            .map(|n| (n.clone(), grads.get_or_zeros(self.vars[n])))
            .collect()
    }
}

/// Loss terms of one discriminator/classifier objective.
#[derive(Clone, Copy, Debug)]
pub struct DisTerms<'t> {
    /// Real/fake binary cross-entropy, real and fake means summed.
    pub gan: Var<'t>,
    pub ce_real: Var<'t>,
    pub ce_fake: Var<'t>,
}

impl<'t> DisTerms<'t> {
    pub fn total(&self) -> Result<Var<'t>> {
        self.gan.add(self.ce_real)?.add(self.ce_fake)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GenTerms<'t> {
    pub gan: Var<'t>,
    pub ce: Var<'t>,
}

impl<'t> GenTerms<'t> {
    pub fn total(&self) -> Result<Var<'t>> {
        self.gan.add(self.ce)
    }
}

/// Assembles the discriminator-side loss from head outputs.
///
/// `d_*` are sigmoid outputs (`n×1`), `p_*` softmax outputs, `y_*` one-hot targets.
pub fn discriminator_terms<'t>(
    d_real: Var<'t>,
    d_fake: Var<'t>,
    p_real: Var<'t>,
    y_real: Var<'t>,
    p_fake: Var<'t>,
    y_fake: Var<'t>,
) -> Result<DisTerms<'t>> {
    let tape = d_real.tape();
    let ones = tape.constant(Tensor::full(&d_real.shape(), 1.0));
    let zeros = tape.constant(Tensor::zeros(&d_fake.shape()));
    let gan = d_real
        .binary_cross_entropy(ones)?
        .add(d_fake.binary_cross_entropy(zeros)?)?;
    Ok(DisTerms {
        gan,
        ce_real: p_real.cross_entropy(y_real)?,
        ce_fake: p_fake.cross_entropy(y_fake)?,
    })
}

/// Assembles the generator loss `−E log D(G) − E y·log C(G)` from head outputs.
pub fn generator_terms<'t>(d_fake: Var<'t>, p_fake: Var<'t>, y_fake: Var<'t>) -> Result<GenTerms<'t>> {
    let ones = d_fake.tape().constant(Tensor::full(&d_fake.shape(), 1.0));
    Ok(GenTerms {
        gan: d_fake.binary_cross_entropy(ones)?,
        ce: p_fake.cross_entropy(y_fake)?,
    })
}

/// Draws `n` labels uniformly from `classes`.
pub fn uniform_labels<R: Rng + ?Sized>(classes: &[ClassId], n: usize, rng: &mut R) -> Vec<ClassId> {
    (0..n)
        .map(|_| classes[rng.random_range(0..classes.len())])
        .collect()
}

impl AcganModel {
    pub fn new<R: Rng + ?Sized>(config: AcganConfig, classes: &[ClassId], rng: &mut R) -> Result<Self> {
        check_unique(classes)?;
        if config.data_dim == 0 || config.noise_dim == 0 {
            return Err(Error::Config("data_dim and noise_dim must be positive".into()));
        }
        let c = &config;
        let k = classes.len();
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let lin = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let mut params = BTreeMap::new();
        let mut put = |name: &str, t: Tensor| {
            params.insert(name.to_string(), t);
        };
        put("gen.z.w", Tensor::randn(&[c.noise_dim, c.gen_hidden], he(c.noise_dim + 1), rng));
        put("gen.cond", Tensor::randn(&[k, c.gen_hidden], GROW_STD, rng));
        put("gen.l0.b", Tensor::zeros(&[c.gen_hidden]));
        put("gen.l1.w", Tensor::randn(&[c.gen_hidden, c.gen_hidden], he(c.gen_hidden), rng));
        put("gen.l1.b", Tensor::zeros(&[c.gen_hidden]));
        put("gen.out.w", Tensor::randn(&[c.gen_hidden, c.data_dim], lin(c.gen_hidden), rng));
        put("gen.out.b", Tensor::zeros(&[c.data_dim]));
        put("trunk.l0.w", Tensor::randn(&[c.data_dim, c.trunk_hidden], he(c.data_dim), rng));
        put("trunk.l0.b", Tensor::zeros(&[c.trunk_hidden]));
        put("trunk.l1.w", Tensor::randn(&[c.trunk_hidden, c.feature_dim], he(c.trunk_hidden), rng));
        put("trunk.l1.b", Tensor::zeros(&[c.feature_dim]));
        put("disc.w", Tensor::randn(&[c.feature_dim, 1], lin(c.feature_dim), rng));
        put("disc.b", Tensor::zeros(&[1]));
        put("cls.w", Tensor::randn(&[k, c.feature_dim], GROW_STD, rng));
        put("cls.b", Tensor::zeros(&[k]));
        Ok(Self {
            config,
            classes: classes.to_vec(),
            params,
        })
    }

    /// Rebuilds a model from a full snapshot (all parameter entries plus class labels).
    pub fn from_parameter_vector(config: AcganConfig, pv: &ParameterVector) -> Result<Self> {
        let classes = pv
            .classes()
            .ok_or_else(|| Error::Contract(format!("snapshot lacks {CLASSES_ENTRY}")))?;
        let mut model = Self::new(config, &classes, &mut rng_from_seed(0))?;
        for name in model.params.keys() {
            if pv.get(name).is_none() {
                return Err(Error::Contract(format!("snapshot lacks entry {name}")));
            }
        }
        model.load_parameter_vector(pv)?;
        Ok(model)
    }

    pub fn config(&self) -> &AcganConfig {
        &self.config
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    /// Head position of a dataset label.
    pub fn class_index(&self, label: ClassId) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == label)
            .ok_or_else(|| Error::Range(format!("class {label} unknown to model {:?}", self.classes)))
    }

    pub fn class_indices(&self, labels: &[ClassId]) -> Result<Vec<usize>> {
        labels.iter().map(|&l| self.class_index(l)).collect()
    }

    /// One-hot matrix over this model's head positions.
    pub fn one_hot(&self, labels: &[ClassId]) -> Result<Tensor> {
        Tensor::one_hot(&self.class_indices(labels)?, self.num_classes())
    }

    /// Registers every parameter on `tape`; those in `trainable` become differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: Group) -> Bound<'t> {
        let mut vars = BTreeMap::new();
        let mut names = Vec::new();
        for (name, t) in &self.params {
            let v = if trainable.contains(name) {
                names.push(name.clone());
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        Bound {
            vars,
            trainable: names,
        }
    }

    fn dense<'t>(&self, b: &Bound<'t>, x: Var<'t>, layer: &str) -> Result<Var<'t>> {
        x.matmul(b.get(&format!("{layer}.w")))?
            .add_row_bias(b.get(&format!("{layer}.b")))
    }

    /// `G(z, c)` with one-hot conditioning `y`.
    pub fn generator_forward<'t>(&self, b: &Bound<'t>, z: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let leak = self.config.leak;
        let h = z
            .matmul(b.get("gen.z.w"))?
            .add(y.matmul(b.get("gen.cond"))?)?
            .add_row_bias(b.get("gen.l0.b"))?
            .leaky_relu(leak);
        let h = self.dense(b, h, "gen.l1")?.leaky_relu(leak);
        Ok(self.dense(b, h, "gen.out")?.tanh())
    }

    /// Shared trunk features `F(x)`.
    pub fn features<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let leak = self.config.leak;
        let h = self.dense(b, x, "trunk.l0")?.leaky_relu(leak);
        Ok(self.dense(b, h, "trunk.l1")?.leaky_relu(leak))
    }

    pub fn disc_prob<'t>(&self, b: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        Ok(self.dense(b, features, "disc")?.sigmoid())
    }

    pub fn class_logits<'t>(&self, b: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        features
            .matmul_bt(b.get("cls.w"))?
            .add_row_bias(b.get("cls.b"))
    }

    pub fn class_probs<'t>(&self, b: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        self.class_logits(b, features)?.softmax()
    }

    /// Discriminator/classifier objective on a labelled "real" batch and
    /// a generated batch. Generator parameters receive gradient only if
    /// they were bound as trainable.
    pub fn discriminator_objective<'t>(
        &self,
        b: &Bound<'t>,
        real_x: Var<'t>,
        real_y: Var<'t>,
        z: Var<'t>,
        fake_y: Var<'t>,
    ) -> Result<DisTerms<'t>> {
        let fake_x = self.generator_forward(b, z, fake_y)?;
        let n_real = real_x.shape()[0];
        let n_fake = fake_x.shape()[0];
        let f = self.features(b, Var::concat_rows(&[real_x, fake_x])?)?;
        let d = self.disc_prob(b, f)?;
        let p = self.class_probs(b, f)?;
        let real_idx: Vec<usize> = (0..n_real).collect();
        let fake_idx: Vec<usize> = (n_real..n_real + n_fake).collect();
        discriminator_terms(
            d.gather_rows(&real_idx)?,
            d.gather_rows(&fake_idx)?,
            p.gather_rows(&real_idx)?,
            real_y,
            p.gather_rows(&fake_idx)?,
            fake_y,
        )
    }

    pub fn generator_objective<'t>(&self, b: &Bound<'t>, z: Var<'t>, fake_y: Var<'t>) -> Result<GenTerms<'t>> {
        let x = self.generator_forward(b, z, fake_y)?;
        let f = self.features(b, x)?;
        generator_terms(self.disc_prob(b, f)?, self.class_probs(b, f)?, fake_y)
    }

    fn require_classes(&self) -> Result<()> {
        if self.classes.is_empty() {
            Err(Error::Contract("model has no classes".into()))
        } else {
            Ok(())
        }
    }

    /// Samples `G(z, c)` for the given labels with `z ~ N(0, I)`.
    pub fn generate_with_rng<R: Rng + ?Sized>(&self, labels: &[ClassId], rng: &mut R) -> Result<Tensor> {
        let y = self.one_hot(labels)?;
        let tape = Tape::new();
        let b = self.bind(&tape, Group::None);
        let z = tape.randn(&[labels.len(), self.config.noise_dim], 1.0, rng);
        let y = tape.constant(y);
        Ok(self.generator_forward(&b, z, y)?.value())
    }

    pub fn generate(&self, labels: &[ClassId], seed: u64) -> Result<Tensor> {
        self.generate_with_rng(labels, &mut rng_from_seed(seed))
    }

    /// Softmax class probabilities, columns ordered as [`classes`](Self::classes).
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        Ok(crate::autodiff::softmax_rows(&self.logits(x)?))
    }

    /// Pre-softmax class scores.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.require_classes()?;
        if x.rank() != 2 || x.cols() != self.config.data_dim {
            return Err(Error::Dimension(format!(
                "classify expects n×{}, got {:?}",
                self.config.data_dim,
                x.shape()
            )));
        }
        let tape = Tape::new();
        let b = self.bind(&tape, Group::None);
        let f = self.features(&b, tape.constant(x.clone()))?;
        Ok(self.class_logits(&b, f)?.value())
    }

    /// Predicted dataset labels.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<ClassId>> {
        Ok(self
            .classify(x)?
            .argmax_rows()
            .into_iter()
            .map(|i| self.classes[i])
            .collect())
    }

    fn draw_generator_inputs(&self, n: usize, rng: &mut SimRng) -> (Vec<ClassId>, Tensor) {
        let labels = uniform_labels(&self.classes, n, rng);
        let z = Tensor::randn(&[n, self.config.noise_dim], 1.0, rng);
        (labels, z)
    }

    /// Generator loss with labels uniform over the current classes.
    pub fn generator_loss(&self, batch_size: usize, seed: u64) -> Result<f64> {
        self.require_classes()?;
        let (labels, z) = self.draw_generator_inputs(batch_size, &mut rng_from_seed(seed));
        let tape = Tape::new();
        let b = self.bind(&tape, Group::Generator);
        let y = tape.constant(self.one_hot(&labels)?);
        Ok(self
            .generator_objective(&b, tape.constant(z), y)?
            .total()?
            .item())
    }

    /// Discriminator-side loss on `real` plus `batch_size` generated samples.
    pub fn discriminator_loss(
        &self,
        real_x: &Tensor,
        real_labels: &[ClassId],
        batch_size: usize,
        seed: u64,
    ) -> Result<f64> {
        self.require_classes()?;
        let real_y = self.one_hot(real_labels)?;
        let (labels, z) = self.draw_generator_inputs(batch_size, &mut rng_from_seed(seed));
        let tape = Tape::new();
        let b = self.bind(&tape, Group::Discriminator);
        let fake_y = tape.constant(self.one_hot(&labels)?);
        let terms = self.discriminator_objective(
            &b,
            tape.constant(real_x.clone()),
            tape.constant(real_y),
            tape.constant(z),
            fake_y,
        )?;
        Ok(terms.total()?.item())
    }

    /// `(generator loss, discriminator loss)` evaluated on the same batch and seed;
    /// the generated batch matches the real batch in size.
    pub fn acgan_loss(&self, real_x: &Tensor, real_labels: &[ClassId], seed: u64) -> Result<(f64, f64)> {
        let n = real_labels.len();
        Ok((
            self.generator_loss(n, seed)?,
            self.discriminator_loss(real_x, real_labels, n, seed)?,
        ))
    }

    /// Extends the class list to `classes`, which must begin with the current list.
    /// New class-head rows and conditioning rows are drawn from `N(0, GROW_STD²)`.
    pub fn grow_classes<R: Rng + ?Sized>(&mut self, classes: &[ClassId], rng: &mut R) -> Result<()> {
        if classes.len() < self.classes.len() || classes[..self.classes.len()] != self.classes[..] {
            return Err(Error::Contract(format!(
                "cannot change classes {:?} into {:?}: only appending is allowed",
                self.classes, classes
            )));
        }
        check_unique(classes)?;
        let added = classes.len() - self.classes.len();
        if added == 0 {
            return Ok(());
        }
        for name in ["gen.cond", "cls.w", "cls.b"] {
            let t = &self.params[name];
            let row: usize = t.shape()[1..].iter().product();
            let mut data = t.data().to_vec();
            data.extend(Tensor::randn(&[added * row], GROW_STD, rng).into_data());
            if name == "cls.b" {
                let n = data.len();
                data[n - added..].iter_mut().for_each(|v| *v = 0.0);
            }
            let mut shape = t.shape().to_vec();
            shape[0] += added;
            self.params.insert(name.to_string(), Tensor::from_parts(shape, data));
        }
        self.classes = classes.to_vec();
        Ok(())
    }

    /// Appends any labels of `labels` not yet known, in ascending order.
    pub fn ensure_classes<R: Rng + ?Sized>(&mut self, labels: &[ClassId], rng: &mut R) -> Result<()> {
        let mut new: Vec<ClassId> = labels
            .iter()
            .copied()
            .filter(|l| !self.classes.contains(l))
            .collect();
        new.sort_unstable();
        new.dedup();
        if new.is_empty() {
            return Ok(());
        }
        let mut all = self.classes.clone();
        all.extend(new);
        self.grow_classes(&all, rng)
    }

    /// Snapshot of the parameters in `group`, plus the class labels.
    pub fn to_parameter_vector(&self, group: Group) -> ParameterVector {
        let mut entries: Vec<ParamEntry> = self
            .params
            .iter()
            .filter(|(n, _)| group.contains(n))
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        entries.push(ParamEntry {
            name: CLASSES_ENTRY.into(),
            shape: vec![self.classes.len()],
            data: self.classes.iter().map(|&c| c as f64).collect(),
        });
        ParameterVector::new(entries).expect("model names are unique")
    }

    /// Overwrites every parameter present in `pv`. If `pv` carries class-indexed
    /// entries its class list replaces this model's; every class-indexed entry
    /// of this model must then be present.
    pub fn load_parameter_vector(&mut self, pv: &ParameterVector) -> Result<()> {
        let classes = pv.classes();
        let carries_class_rows = pv.names().any(is_class_indexed);
        if carries_class_rows {
            let classes = classes
                .clone()
                .ok_or_else(|| Error::Contract(format!("class rows without {CLASSES_ENTRY}")))?;
            check_unique(&classes)?;
            let mut staged = self.params.clone();
            for name in ["gen.cond", "cls.w", "cls.b"] {
                match pv.get(name) {
                    Some(e) => {
                        staged.insert(name.to_string(), e.to_tensor());
                    }
                    None => {
                        // Missing class rows (e.g. a classifier-only snapshot) are
                        // re-laid out by label; rows for unseen labels start fresh.
                        let old = &self.params[name];
                        let row: usize = old.shape()[1..].iter().product();
                        let mut data = Vec::with_capacity(classes.len() * row);
                        for &label in &classes {
                            match self.classes.iter().position(|&c| c == label) {
                                Some(i) => data.extend_from_slice(&old.data()[i * row..(i + 1) * row]),
                                None => data.extend(std::iter::repeat_n(0.0, row)),
                            }
                        }
                        let mut shape = old.shape().to_vec();
                        shape[0] = classes.len();
                        staged.insert(name.to_string(), Tensor::from_parts(shape, data));
                    }
                }
            }
            for e in pv.entries() {
                if e.name == CLASSES_ENTRY || is_class_indexed(&e.name) {
                    if e.shape.first() != Some(&classes.len()) {
                        return Err(Error::Dimension(format!("{} rows != class count", e.name)));
                    }
                    continue;
                }
                let cur = staged
                    .get(&e.name)
                    .ok_or_else(|| Error::Contract(format!("unknown parameter {}", e.name)))?;
                if cur.shape() != e.shape.as_slice() {
                    return Err(Error::Dimension(format!(
                        "{}: {:?} vs {:?}",
                        e.name,
                        cur.shape(),
                        e.shape
                    )));
                }
                staged.insert(e.name.clone(), e.to_tensor());
            }
            self.params = staged;
            self.classes = classes;
        } else {
            for e in pv.entries() {
                if e.name == CLASSES_ENTRY {
                    continue;
                }
                let cur = self
                    .params
                    .get(&e.name)
                    .ok_or_else(|| Error::Contract(format!("unknown parameter {}", e.name)))?;
                if cur.shape() != e.shape.as_slice() {
                    return Err(Error::Dimension(format!("{} shape mismatch", e.name)));
                }
            }
            for e in pv.entries().iter().filter(|e| e.name != CLASSES_ENTRY) {
                self.params.insert(e.name.clone(), e.to_tensor());
            }
        }
        Ok(())
    }
}

fn check_unique(classes: &[ClassId]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for &c in classes {
        if !seen.insert(c) {
            return Err(Error::Contract(format!("duplicate class {c}")));
        }
    }
    Ok(())
}

/// Losses reported by one alternating step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AcganStepLosses {
    pub dis_gan: f64,
    pub ce_real: f64,
    pub ce_fake: f64,
    pub gen_gan: f64,
    pub gen_ce: f64,
}

impl AcganStepLosses {
    pub fn dis_total(&self) -> f64 {
        self.dis_gan + self.ce_real + self.ce_fake
    }

    pub fn gen_total(&self) -> f64 {
        self.gen_gan + self.gen_ce
    }
}

/// One Adam per parameter group.
#[derive(Clone, Debug)]
pub struct AcganOptim {
    pub gen: Adam,
    pub dis: Adam,
}

impl AcganOptim {
    pub fn new(lr: f64) -> Self {
        Self {
            gen: Adam::gan(lr),
            dis: Adam::gan(lr),
        }
    }
}

/// Extra loss terms injected into the discriminator/classifier step.
pub trait DisExtra {
    fn terms<'t>(&self, model: &AcganModel, b: &Bound<'t>) -> Result<Vec<Var<'t>>>;
}

/// No extra terms.
pub struct NoExtra;

impl DisExtra for NoExtra {
    fn terms<'t>(&self, _: &AcganModel, _: &Bound<'t>) -> Result<Vec<Var<'t>>> {
        Ok(Vec::new())
    }
}

/// `(μ/2)·‖θ − anchor‖²` over the trainable parameters of `b` present in `anchor`
/// with matching shapes.
pub fn proximal_term<'t>(
    b: &Bound<'t>,
    anchor: &BTreeMap<String, Tensor>,
    mu: f64,
) -> Result<Option<Var<'t>>> {
    if mu == 0.0 {
        return Ok(None);
    }
    let mut total: Option<Var<'t>> = None;
    for name in b.trainable() {
        let v = b.get(name);
        let Some(a) = anchor.get(name) else { continue };
        if a.shape() != v.shape().as_slice() {
            continue;
        }
        let d = v.sub(v.tape().constant(a.clone()))?;
        let sq = d.mul(d)?.sum();
        total = Some(match total {
            Some(t) => t.add(sq)?,
            None => sq,
        });
    }
    Ok(total.map(|t| t.scale(mu / 2.0)))
}

/// Alternating ACGAN update: one discriminator/classifier step on
/// `real_x` (which may already include replayed samples) followed by one
/// generator step. Generated batches have the size of `real_x`.
pub fn alternating_step(
    model: &mut AcganModel,
    opt: &mut AcganOptim,
    real_x: &Tensor,
    real_labels: &[ClassId],
    rng: &mut SimRng,
    extra: &dyn DisExtra,
    prox: Option<(&BTreeMap<String, Tensor>, f64)>,
) -> Result<(AcganStepLosses, Vec<f64>)> {
    model.require_classes()?;
    let n = real_labels.len();
    let mut losses = AcganStepLosses::default();
    let extras;
    {
        let real_y = model.one_hot(real_labels)?;
        let (fake_labels, z) = model.draw_generator_inputs(n, rng);
        let tape = Tape::new();
        let b = model.bind(&tape, Group::Discriminator);
        let terms = model.discriminator_objective(
            &b,
            tape.constant(real_x.clone()),
            tape.constant(real_y),
            tape.constant(z),
            tape.constant(model.one_hot(&fake_labels)?),
        )?;
        let mut total = terms.total()?;
        let extra_terms = extra.terms(model, &b)?;
        extras = extra_terms.iter().map(|v| v.item()).collect();
        for t in extra_terms {
            total = total.add(t)?;
        }
        if let Some((anchor, mu)) = prox {
            if let Some(p) = proximal_term(&b, anchor, mu)? {
                total = total.add(p)?;
            }
        }
        losses.dis_gan = terms.gan.item();
        losses.ce_real = terms.ce_real.item();
        losses.ce_fake = terms.ce_fake.item();
        let grads = tape.backward(total)?;
        let g = b.grads(&grads);
        opt.dis.step(&mut model.params, &g);
    }
    {
        let (fake_labels, z) = model.draw_generator_inputs(n, rng);
        let tape = Tape::new();
        let b = model.bind(&tape, Group::Generator);
        let terms = model.generator_objective(
            &b,
            tape.constant(z),
            tape.constant(model.one_hot(&fake_labels)?),
        )?;
        let mut total = terms.total()?;
        if let Some((anchor, mu)) = prox {
            if let Some(p) = proximal_term(&b, anchor, mu)? {
                total = total.add(p)?;
            }
        }
        losses.gen_gan = terms.gan.item();
        losses.gen_ce = terms.ce.item();
        let grads = tape.backward(total)?;
        let g = b.grads(&grads);
        opt.gen.step(&mut model.params, &g);
    }
    Ok((losses, extras))
}
