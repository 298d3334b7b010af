//! Pretraining of the initial model and the sequential training loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{DualEncoder, Embedder, EncoderDims, ModelSnapshot};
use crate::error::{Error, Result};
use crate::losses::{self, Components, LossBreakdown, LossConfig, LossInputs, TeacherOutputs, Weighting};
use crate::metrics::{self, AccuracyMatrix};
use crate::protostore::{GammaSchedule, PrototypeStore};
use crate::rng;
use crate::taskgen::{StreamSpec, TaskSpec};
use crate::tensor::{Graph, Tensor};
use crate::weightspace::{WeMode, WeState};

pub use crate::optim::{adamw_step, AdamWConfig, AdamWState};

/// Everything that shapes one continual-learning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub tau: f64,
    pub tau_ce: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_wc: f64,
    pub gamma0: f64,
    pub gamma_step: f64,
    pub gamma_max: f64,
    pub iterations_per_task: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub we_interval: u64,
    pub ewe_eta: u64,
    pub weighting: Weighting,
    pub enable: Components,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            tau: 2.0,
            tau_ce: 0.07,
            alpha: 1.0,
            beta: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda_wc: 1.0,
            gamma0: 0.0,
            gamma_step: 0.04,
            gamma_max: 0.98,
            iterations_per_task: 300,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            we_interval: 50,
            ewe_eta: 5,
            weighting: Weighting::Similarity,
            enable: Components::default(),
        }
    }
}

impl HyperParams {
    /// Plain fine-tuning: every knowledge-integration component off.
    pub fn continual_ft() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda_wc: 0.0,
            enable: Components::NONE,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau", self.tau),
            ("tau_ce", self.tau_ce),
            ("lr", self.lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("hyper.{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_wc", self.lambda_wc),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("hyper.{name} must be >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 || self.iterations_per_task == 0 {
            return Err(Error::Config("hyper.batch_size and hyper.iterations_per_task must be >= 1".into()));
        }
        if self.we_interval == 0 || self.ewe_eta == 0 {
            return Err(Error::Config("hyper.we_interval and hyper.ewe_eta must be >= 1".into()));
        }
        self.gamma().validate()
    }

    pub fn gamma(&self) -> GammaSchedule {
        GammaSchedule {
            gamma0: self.gamma0,
            step: self.gamma_step,
            max: self.gamma_max,
        }
    }

    pub fn we_mode(&self) -> WeMode {
        match (self.enable.we, self.enable.ewe) {
            (_, true) => WeMode::Ewe,
            (true, false) => WeMode::We,
            (false, false) => WeMode::Off,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            tau_ce: self.tau_ce,
            alpha: self.alpha,
            beta: self.beta,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda_wc: self.lambda_wc,
            weighting: self.weighting,
            enable: self.enable,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Architecture of the dual encoder; input width and vocabulary come from
/// the stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_tok: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_tok: 16,
            hidden: 64,
            embed_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn dims_for(&self, stream: &StreamSpec) -> EncoderDims {
        EncoderDims {
            d_in: stream.d_in(),
            d_tok: self.d_tok,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            vocab_size: stream.vocab_size(),
        }
    }
}

/// Contrastive pretraining of the initial model on the stream's
/// pretraining pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tau_ce: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            iterations: 400,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 1e-4,
            tau_ce: 0.07,
        }
    }
}

/// Symmetric image/token InfoNCE over one batch. Images sharing a token
/// are all positives for that token.
fn pretrain_loss(g: &mut Graph, enc: &crate::encoder::BoundEncoder, x: Tensor, tokens: &[usize], tau: f64) -> Result<crate::tensor::Var> {
    let b = tokens.len();
    let mut uniq: Vec<usize> = tokens.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let u = uniq.len();
    let pos: Vec<usize> = tokens
        .iter()
        .map(|t| uniq.binary_search(t).expect("token is in its own batch"))
        .collect();
    let mut counts = vec![0usize; u];
    pos.iter().for_each(|&p| counts[p] += 1);
    let mut img_target = vec![0.0; b * u];
    let mut txt_target = vec![0.0; b * u];
    for (i, &p) in pos.iter().enumerate() {
        img_target[i * u + p] = 1.0;
        txt_target[i * u + p] = 1.0 / counts[p] as f64;
    }

    let xv = g.constant(x);
    let feats = enc.encode_images(g, xv)?;
    let texts = enc.encode_texts(g, &uniq)?;
    let s = g.cosine_sim_matrix(feats, texts)?;
    let logits = g.scale(s, 1.0 / tau);
    let it = g.log_softmax(logits, 1)?;
    let ti = g.log_softmax(logits, 0)?;
    let a = g.constant(Tensor::matrix(b, u, img_target)?);
    let c = g.constant(Tensor::matrix(b, u, txt_target)?);
    let l_it = g.mul(it, a)?;
    let l_it = g.sum(l_it);
    let l_it = g.scale(l_it, -1.0 / b as f64);
    let l_ti = g.mul(ti, c)?;
    let l_ti = g.sum(l_ti);
    let l_ti = g.scale(l_ti, -1.0 / u as f64);
    let l = g.add(l_it, l_ti)?;
    Ok(g.scale(l, 0.5))
}

/// Builds the initial model: random init from `seed`, then contrastive
/// training on the pretraining pool.
pub fn pretrain(stream: &StreamSpec, cfg: &PretrainConfig, seed: u64) -> Result<ModelSnapshot> {
    if stream.pretrain_pool.is_empty() {
        return Err(Error::Config("pretraining pool is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.tau_ce > 0.0) {
        return Err(Error::Config("pretrain: batch_size, lr and tau_ce must be positive".into()));
    }
    let dims = cfg.model.dims_for(stream);
    let mut model = DualEncoder::init(seed, dims)?;
    let opt = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut state = AdamWState::new(model.param_count());
    let pool = &stream.pretrain_pool;
    let d = stream.d_in();
    for k in 1..=cfg.iterations {
        let mut r = rng::stream(seed, &[rng::TAG_PRETRAIN_BATCH, k]);
        let mut data = Vec::with_capacity(cfg.batch_size * d);
        let mut tokens = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = &pool[r.random_range(0..pool.len())];
            data.extend_from_slice(&s.x);
            tokens.push(s.token_id);
        }
        let x = Tensor::matrix(cfg.batch_size, d, data)?;
        let mut g = Graph::new();
        let enc = model.bind(&mut g, true);
        let loss = pretrain_loss(&mut g, &enc, x, &tokens, cfg.tau_ce)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                task: 0,
                iteration: k,
                detail: format!("pretraining loss {lv}"),
            });
        }
        g.backward(loss)?;
        let grads = enc.grads_flat(&g);
        let mut flat = model.params_flat();
        adamw_step(&mut flat, &grads, &mut state, &opt)?;
        model.load_flat(&flat)?;
    }
    Ok(model.snapshot())
}

/// One logged optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub task: usize,
    pub iteration: u64,
    pub loss: LossBreakdown,
}

/// A frozen teacher's embeddings of the task's whole training set and its
/// class texts, so each batch is a row lookup.
struct TeacherCache {
    feats: Tensor,
    texts: Tensor,
}

impl TeacherCache {
    fn new<E: Embedder>(teacher: &E, task: &TaskSpec, tokens: &[usize]) -> Result<Self> {
        Ok(Self {
            feats: teacher.embed_images(&task.train_images()?)?,
            texts: teacher.embed_texts(tokens)?,
        })
    }

    fn outputs(&self, idx: &[usize], protos: Option<&Tensor>, tau: f64) -> Result<TeacherOutputs> {
        let rows: Vec<&[f64]> = idx.iter().map(|&i| self.feats.row(i)).collect();
        let feats = Tensor::from_rows(&rows, self.feats.cols())?;
        TeacherOutputs::from_embeddings(feats, &self.texts, protos, tau)
    }
}

/// Fixed inputs of [`train_task`].
pub struct TaskContext<'a> {
    pub task: &'a TaskSpec,
    pub c0: &'a ModelSnapshot,
    pub prev: &'a ModelSnapshot,
    /// Consolidation target: the previous task's final parameters.
    pub theta_prev: &'a [f64],
    pub hyper: &'a HyperParams,
    pub seed: u64,
}

/// Trains `student` on one task and leaves it holding the task's final
/// parameters (the weight ensemble when that is on). `store` must be empty
/// on entry and is empty again on return.
pub fn train_task(
    student: &mut DualEncoder,
    store: &mut PrototypeStore,
    ctx: &TaskContext<'_>,
) -> Result<Vec<IterationLog>> {
    if !store.is_empty() {
        return Err(Error::Contract("prototype store must be empty when a task starts".into()));
    }
    let hyper = ctx.hyper;
    hyper.validate()?;
    let task = ctx.task;
    let cfg = hyper.loss_config();
    let opt = hyper.adamw();
    let tokens = task.tokens();
    let class_ids = task.class_ids();

    let use_protos = cfg.needs_prototypes();
    if use_protos {
        store.init_from_model(ctx.c0, &task.train_by_class()?)?;
    }
    let teachers = if cfg.uses_mdd() {
        Some((
            TeacherCache::new(ctx.c0, task, &tokens)?,
            TeacherCache::new(ctx.prev, task, &tokens)?,
        ))
    } else {
        None
    };

    let mut flat = student.params_flat();
    let mut state = AdamWState::new(flat.len());
    let mut we = WeState::init(&flat, hyper.we_interval, hyper.ewe_eta, hyper.we_mode())?;
    let mut log = Vec::with_capacity(hyper.iterations_per_task as usize);

    for k in 1..=hyper.iterations_per_task {
        let idx = task.batch_indices(hyper.batch_size, ctx.seed, k)?;
        let (x, labels) = task.gather(&idx)?;
        let local = labels
            .iter()
            .map(|&c| task.local_index(c))
            .collect::<Result<Vec<_>>>()?;

        let protos = if use_protos {
            let feats = student.embed_images(&x)?;
            store.ema_update(&feats, &labels)?;
            Some(store.matrix(&class_ids)?)
        } else {
            None
        };
        let teacher_out = match &teachers {
            Some((c0, prev)) => Some((
                c0.outputs(&idx, protos.as_ref(), hyper.tau)?,
                prev.outputs(&idx, protos.as_ref(), hyper.tau)?,
            )),
            None => None,
        };

        let mut g = Graph::new();
        let enc = student.bind(&mut g, true);
        let images = g.constant(x);
        let inputs = LossInputs {
            student: &enc,
            images,
            labels: &local,
            tokens: &tokens,
            protos: protos.as_ref(),
            c0: teacher_out.as_ref().map(|t| &t.0),
            prev: teacher_out.as_ref().map(|t| &t.1),
            theta_prev: Some(ctx.theta_prev),
            teacher_weights: None,
        };
        let (loss, bd) = losses::total_loss(&mut g, &inputs, &cfg)?;
        if !bd.is_finite() {
            return Err(Error::NonFinite {
                task: task.task_id,
                iteration: k,
                detail: bd.describe(),
            });
        }
        g.backward(loss)?;
        let grads = enc.grads_flat(&g);
        adamw_step(&mut flat, &grads, &mut state, &opt)?;
        if we.step(&flat, k)? && we.ewe_step(&mut flat, k) {
            state.reset();
        }
        student.load_flat(&flat)?;
        log.push(IterationLog {
            task: task.task_id,
            iteration: k,
            loss: bd,
        });
    }

    student.load_flat(&we.final_params(&flat))?;
    store.purge();
    Ok(log)
}

/// Outcome of a whole stream.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub hyper: HyperParams,
    pub matrix: AccuracyMatrix,
    pub losses: Vec<IterationLog>,
    /// Final model of each task, in order.
    pub checkpoints: Vec<ModelSnapshot>,
}

/// Trains on every task of `stream` in order, starting from `c0`.
pub fn run_stream(stream: &StreamSpec, c0: &ModelSnapshot, hyper: &HyperParams, seed: u64) -> Result<RunRecord> {
    hyper.validate()?;
    let n = stream.n_tasks();
    let mut matrix = AccuracyMatrix::new(n)?;
    let set_row = |m: &mut AccuracyMatrix, row: usize, accs: Vec<f64>| -> Result<()> {
        for (j, a) in accs.into_iter().enumerate() {
            m.set(row, j, a)?;
        }
        Ok(())
    };
    set_row(&mut matrix, 0, metrics::evaluate_row(c0, stream, 0)?)?;

    let mut student = c0.thaw();
    let mut prev = c0.clone();
    let mut store = PrototypeStore::new(hyper.gamma())?;
    let mut losses = Vec::new();
    let mut checkpoints = Vec::with_capacity(n);
    for (i, task) in stream.tasks.iter().enumerate() {
        let theta_prev = prev.params_flat();
        let ctx = TaskContext {
            task,
            c0,
            prev: &prev,
            theta_prev: &theta_prev,
            hyper,
            seed,
        };
        losses.extend(train_task(&mut student, &mut store, &ctx)?);
        let done = student.snapshot();
        set_row(&mut matrix, i + 1, metrics::evaluate_row(&done, stream, i + 1)?)?;
        checkpoints.push(done.clone());
        prev = done;
    }
    Ok(RunRecord {
        seed,
        hyper: hyper.clone(),
        matrix,
        losses,
        checkpoints,
    })
}

/// Zero-shot accuracy of `model` on every task, as row 0 of a run.
pub fn zero_shot_row<E: Embedder>(model: &E, stream: &StreamSpec) -> Result<Vec<f64>> {
    metrics::evaluate_row(model, stream, 0)
}

/// Per-class image counts of a batch, for diagnostics.
pub fn class_histogram(labels: &[u32]) -> BTreeMap<u32, usize> {
    let mut h = BTreeMap::new();
    labels.iter().for_each(|&l| *h.entry(l).or_insert(0) += 1);
    h
}
