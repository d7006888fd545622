//! Client-side local training.
//!
//! Every method runs through [`ClientState`]: it is initialised from a
//! broadcast, performs `T` local steps per round and produces an [`Upload`].
//! Method-specific behaviour lives in [`ClientState::local_step`].

mod classifier;
mod dgr;
mod replay;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::acgan::{AcganConfig, AcganModel, AcganOptim, ClassId, Group};
use crate::error::{Error, Result};
use crate::metrics;
use crate::params::ParameterVector;
use crate::protocol::Upload;
use crate::rng::{rng_for, tag, SimRng};
use crate::taskstream::LocalData;
use crate::tensor::Tensor;

pub use classifier::{classifier_objective, kd_term, soften, ClassifierTerms, Teacher};
pub use replay::Consistency;

/// Distillation temperature of the two-teacher LwF baseline.
pub const KD_TEMPERATURE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedcil,
    Fedavg,
    Fedprox,
    FedavgAcgan,
    FedproxAcgan,
    FedavgDgr,
    FedproxDgr,
    Fedlwf2t,
}

/// What a client optimises locally.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Classifier cross-entropy only.
    Plain,
    /// ACGAN on real data plus replay from the previous-task generator.
    AcganReplay,
    /// Unconditional GAN plus classifier; replay labelled by the previous classifier.
    Dgr,
    /// Cross-entropy plus distillation from two teachers.
    Lwf2t,
    /// ACGAN replay plus consistency with the global generator.
    Fedcil,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Fedcil,
        Method::Fedavg,
        Method::Fedprox,
        Method::FedavgAcgan,
        Method::FedproxAcgan,
        Method::FedavgDgr,
        Method::FedproxDgr,
        Method::Fedlwf2t,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fedcil => "fedcil",
            Method::Fedavg => "fedavg",
            Method::Fedprox => "fedprox",
            Method::FedavgAcgan => "fedavg_acgan",
            Method::FedproxAcgan => "fedprox_acgan",
            Method::FedavgDgr => "fedavg_dgr",
            Method::FedproxDgr => "fedprox_dgr",
            Method::Fedlwf2t => "fedlwf2t",
        }
    }

    pub fn strategy(self) -> Strategy {
        match self {
            Method::Fedcil => Strategy::Fedcil,
            Method::Fedavg | Method::Fedprox => Strategy::Plain,
            Method::FedavgAcgan | Method::FedproxAcgan => Strategy::AcganReplay,
            Method::FedavgDgr | Method::FedproxDgr => Strategy::Dgr,
            Method::Fedlwf2t => Strategy::Lwf2t,
        }
    }

    /// Whether local objectives carry the proximal term.
    pub fn proximal(self) -> bool {
        matches!(self, Method::Fedprox | Method::FedproxAcgan | Method::FedproxDgr)
    }

    /// Parameters exchanged with the server.
    pub fn sync_group(self) -> Group {
        match self.strategy() {
            Strategy::Fedcil | Strategy::AcganReplay => Group::All,
            Strategy::Plain | Strategy::Dgr | Strategy::Lwf2t => Group::Classifier,
        }
    }

    /// Whether the server consolidates after merging.
    pub fn consolidates(self) -> bool {
        self == Method::Fedcil
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerOptions {
    pub batch_size: usize,
    pub lr: f64,
    /// Proximal weight, used only by proximal methods.
    pub mu: f64,
    /// Weights of the three consistency terms.
    pub consistency_weights: [f64; 3],
    pub no_consistency: bool,
    /// Drops previous-generator replay and every consistency term.
    pub no_replay: bool,
    pub kd_temperature: f64,
}

impl Default for TrainerOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 5e-3,
            mu: 0.01,
            consistency_weights: [1.0; 3],
            no_consistency: false,
            no_replay: false,
            kd_temperature: KD_TEMPERATURE,
        }
    }
}

/// Per-iteration training record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub iter: usize,
    pub l_gen: Option<f64>,
    pub l_dis: Option<f64>,
    /// Classification cross-entropy on the real batch before the update.
    pub l_ce: f64,
    pub l_c1: Option<f64>,
    pub l_c2: Option<f64>,
    pub l_c3: Option<f64>,
    pub l_kd: Option<f64>,
    /// Norm of the class-head gradient of `l_ce`.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundRecord {
    pub client_id: usize,
    pub task: usize,
    pub classes: Vec<ClassId>,
    /// Broadcast model's accuracy on the current-task test split, before local steps.
    pub post_sync_accuracy: f64,
    /// Live model's accuracy on the same split after local steps.
    pub local_accuracy: f64,
    pub steps: Vec<StepStats>,
}

#[derive(Clone, Debug)]
pub struct ClientState {
    id: usize,
    method: Method,
    opts: TrainerOptions,
    seed: u64,
    data: LocalData,
    model: AcganModel,
    optim: AcganOptim,
    /// DGR's unconditional GAN, never synchronised.
    gan: Option<(AcganModel, AcganOptim)>,
    /// Frozen copy of the live model from the end of the previous task.
    previous: Option<AcganModel>,
    previous_gan: Option<AcganModel>,
    /// Frozen copy of the last broadcast.
    global: Option<AcganModel>,
    anchor: Option<BTreeMap<String, Tensor>>,
    /// Classes of the current and all earlier tasks.
    announced: Vec<ClassId>,
    /// Classes of earlier tasks only.
    finished: Vec<ClassId>,
    post_sync_accuracy: f64,
    iter: usize,
}

impl ClientState {
    pub fn new(
        id: usize,
        method: Method,
        opts: TrainerOptions,
        config: AcganConfig,
        data: LocalData,
        seed: u64,
    ) -> Result<Self> {
        if opts.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut rng = rng_for(seed, &[tag::INIT, id as u64]);
        let announced = data.current_classes().to_vec();
        let mut model = AcganModel::new(config.clone(), &[], &mut rng)?;
        model.ensure_classes(&announced, &mut rng)?;
        let gan = match method.strategy() {
            Strategy::Dgr => Some((AcganModel::new(config, &[0], &mut rng)?, AcganOptim::new(opts.lr))),
            _ => None,
        };
        Ok(Self {
            id,
            method,
            optim: AcganOptim::new(opts.lr),
            opts,
            seed,
            data,
            model,
            gan,
            previous: None,
            previous_gan: None,
            global: None,
            anchor: None,
            announced,
            finished: Vec::new(),
            post_sync_accuracy: 0.0,
            iter: 0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn options(&self) -> &TrainerOptions {
        &self.opts
    }

    pub fn model(&self) -> &AcganModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut AcganModel {
        &mut self.model
    }

    pub fn task_index(&self) -> usize {
        self.data.task_index()
    }

    pub fn announced(&self) -> &[ClassId] {
        &self.announced
    }

    pub fn previous(&self) -> Option<&AcganModel> {
        self.previous.as_ref()
    }

    pub fn global(&self) -> Option<&AcganModel> {
        self.global.as_ref()
    }

    pub fn local_data(&self) -> &LocalData {
        &self.data
    }

    pub fn post_sync_accuracy(&self) -> f64 {
        self.post_sync_accuracy
    }

    /// Replaces the synchronised parameters with `pv`, keeps a frozen copy of
    /// it, and grows the head to the client's own classes.
    pub fn receive_broadcast(&mut self, pv: &ParameterVector, round: usize) -> Result<()> {
        self.model.load_parameter_vector(pv)?;
        let (x, y) = self.data.current_test()?;
        self.post_sync_accuracy = metrics::post_sync_local_accuracy(&self.model, &x, &y)?;
        self.global = (self.model.num_classes() > 0).then(|| self.model.clone());
        let mut rng = rng_for(self.seed, &[tag::GROW, self.id as u64, round as u64]);
        self.model.ensure_classes(&self.announced, &mut rng)?;
        self.anchor = self
            .method
            .proximal()
            .then(|| self.model.params().clone());
        Ok(())
    }

    /// Runs `iterations` local steps on the current task.
    pub fn train_round(&mut self, iterations: usize, round: usize) -> Result<ClientRoundRecord> {
        let mut rng = rng_for(self.seed, &[tag::CLIENT, self.id as u64, round as u64]);
        let mut steps = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let (x, y) = self.data.batch(self.opts.batch_size, &mut rng)?;
            steps.push(self.local_step(&x, &y, &mut rng)?);
        }
        let (x, y) = self.data.current_test()?;
        Ok(ClientRoundRecord {
            client_id: self.id,
            task: self.data.task_index(),
            classes: self.data.current_classes().to_vec(),
            post_sync_accuracy: self.post_sync_accuracy,
            local_accuracy: metrics::accuracy(&self.model, &x, &y)?,
            steps,
        })
    }

    /// One optimisation step of this client's method on a real batch.
    pub fn local_step(&mut self, x: &Tensor, labels: &[ClassId], rng: &mut SimRng) -> Result<StepStats> {
        let (l_ce, grad_norm) = metrics::ce_loss_and_gradient_norm(&self.model, x, labels)?;
        let mut stats = StepStats {
            iter: self.iter,
            l_ce,
            grad_norm,
            ..StepStats::default()
        };
        match self.method.strategy() {
            Strategy::Plain => {
                self.classifier_step(x, labels, &[])?;
            }
            Strategy::Lwf2t => {
                let teachers = self.teachers(x)?;
                let (_, kd) = self.classifier_step(x, labels, &teachers)?;
                stats.l_kd = kd;
            }
            Strategy::AcganReplay | Strategy::Fedcil => {
                let (losses, c) = self.acgan_step(x, labels, rng)?;
                stats.l_dis = Some(losses.dis_total());
                stats.l_gen = Some(losses.gen_total());
                [stats.l_c1, stats.l_c2, stats.l_c3] = c;
            }
            Strategy::Dgr => {
                let losses = self.dgr_step(x, labels, rng)?;
                stats.l_dis = Some(losses.dis_total());
                stats.l_gen = Some(losses.gen_total());
            }
        }
        self.iter += 1;
        Ok(stats)
    }

    pub fn upload(&self) -> Upload {
        Upload {
            params: self.model.to_parameter_vector(self.method.sync_group()),
            sample_count: self.data.train_count(),
            classes: self.announced.clone(),
        }
    }

    /// Freezes the live model as the previous-task snapshot and moves to the
    /// next task. Returns `false` after the last task, leaving the state unchanged.
    pub fn on_task_boundary(&mut self) -> Result<bool> {
        if self.data.task_index() + 1 >= self.data.num_tasks() {
            return Ok(false);
        }
        self.previous = Some(self.model.clone());
        self.previous_gan = self.gan.as_ref().map(|(g, _)| g.clone());
        self.finished = self.announced.clone();
        self.data.advance();
        self.announced.extend_from_slice(self.data.current_classes());
        let task = self.task_index() as u64;
        let mut rng = rng_for(self.seed, &[tag::GROW, self.id as u64, u64::MAX, task]);
        self.model.ensure_classes(&self.announced, &mut rng)?;
        Ok(true)
    }

    /// Classes of tasks before the current one.
    pub fn finished(&self) -> &[ClassId] {
        &self.finished
    }
}
