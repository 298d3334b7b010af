//! Deterministic synthetic task streams.
//!
//! Each class is an isotropic Gaussian blob in `R^{d_in}`. Class means vary
//! inside a low-dimensional subspace that belongs to a *domain*: a random
//! orthonormal frame plus an offset. In multi-domain mode every task gets its
//! own domain; in class-incremental mode all classes share one domain and
//! are split across tasks.
//!
//! A small label-noisy pretraining pool covering every class of the stream
//! gives the initial model real but imperfect zero-shot ability.

use alloc::collections::BTreeMap;
use alloc::format;

use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    MultiDomain,
    ClassIncremental,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub mode: StreamMode,
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub d_in: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Per-coordinate standard deviation of samples around their class mean.
    pub noise_scale: f64,
    /// Dimension of the subspace class means vary in.
    pub class_subspace: usize,
    /// Per-coordinate standard deviation of class means inside the subspace.
    pub class_spread: f64,
    /// Per-coordinate standard deviation of a domain's offset.
    pub domain_offset_scale: f64,
    /// Lower bound on the distance between class means of different domains.
    pub min_domain_distance: f64,
    pub pretrain_per_class: usize,
    /// Fraction of pretraining samples paired with a wrong class token.
    pub pretrain_label_noise: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            mode: StreamMode::MultiDomain,
            n_tasks: 5,
            classes_per_task: 5,
            d_in: 32,
            train_per_class: 200,
            test_per_class: 100,
            noise_scale: 0.3,
            class_subspace: 8,
            class_spread: 0.25,
            domain_offset_scale: 1.0,
            min_domain_distance: 2.0,
            pretrain_per_class: 20,
            pretrain_label_noise: 0.1,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(format!("stream: {msg}")));
        if self.n_tasks < 2 {
            return fail("n_tasks must be >= 2");
        }
        if self.classes_per_task < 2 {
            return fail("classes_per_task must be >= 2");
        }
        if self.d_in == 0 || self.class_subspace == 0 || self.class_subspace > self.d_in {
            return fail("need 1 <= class_subspace <= d_in");
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return fail("every class needs train and test samples");
        }
        if !(self.noise_scale > 0.0) || !(self.class_spread > 0.0) || self.domain_offset_scale < 0.0 {
            return fail("noise_scale and class_spread must be positive, domain_offset_scale >= 0");
        }
        if !(0.0..1.0).contains(&self.pretrain_label_noise) {
            return fail("pretrain_label_noise must be in [0, 1)");
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.n_tasks * self.classes_per_task
    }

    /// Class tokens plus the template token.
    pub fn vocab_size(&self) -> usize {
        self.total_classes() + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub class_id: u32,
    pub token_id: usize,
    pub mean: Vec<f64>,
    pub noise_scale: f64,
    pub domain_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub x: Vec<f64>,
    pub class_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSample {
    pub x: Vec<f64>,
    pub token_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: usize,
    pub classes: Vec<ClassSpec>,
    pub train_samples: Vec<Sample>,
    pub test_samples: Vec<Sample>,
}

impl TaskSpec {
    pub fn tokens(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.token_id).collect()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    /// Position of `class_id` within this task's class list.
    pub fn local_index(&self, class_id: u32) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c.class_id == class_id)
            .ok_or(Error::Lookup {
                kind: "class",
                id: class_id as usize,
            })
    }

    /// Training images grouped by class.
    pub fn train_by_class(&self) -> Result<BTreeMap<u32, Tensor>> {
        let d = self.classes.first().map_or(0, |c| c.mean.len());
        let mut rows: BTreeMap<u32, Vec<&[f64]>> = self.classes.iter().map(|c| (c.class_id, Vec::new())).collect();
        for s in &self.train_samples {
            rows.entry(s.class_id).or_default().push(&s.x);
        }
        rows.into_iter()
            .map(|(c, r)| Ok((c, Tensor::from_rows(&r, d)?)))
            .collect()
    }

    pub fn test_batch(&self) -> Result<(Tensor, Vec<u32>)> {
        let d = self.classes.first().map_or(0, |c| c.mean.len());
        let rows: Vec<&[f64]> = self.test_samples.iter().map(|s| s.x.as_slice()).collect();
        let labels = self.test_samples.iter().map(|s| s.class_id).collect();
        Ok((Tensor::from_rows(&rows, d)?, labels))
    }

    /// Indices into `train_samples` of training batch `iteration`, drawn
    /// with replacement; a pure function of `(seed, task_id, iteration)`.
    pub fn batch_indices(&self, batch_size: usize, seed: u64, iteration: u64) -> Result<Vec<usize>> {
        if self.train_samples.is_empty() {
            return Err(Error::Contract(format!("task {} has no training samples", self.task_id)));
        }
        let mut r = rng::stream(seed, &[rng::TAG_BATCH, self.task_id as u64, iteration]);
        let n = self.train_samples.len();
        Ok((0..batch_size).map(|_| r.random_range(0..n)).collect())
    }

    /// The images and labels at `indices`.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<u32>)> {
        let d = self.classes.first().map_or(0, |c| c.mean.len());
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.train_samples.get(i).ok_or(Error::Lookup { kind: "sample", id: i })?;
            data.extend_from_slice(&s.x);
            labels.push(s.class_id);
        }
        Ok((Tensor::matrix(indices.len(), d, data)?, labels))
    }

    /// Training batch `iteration`.
    pub fn batch(&self, batch_size: usize, seed: u64, iteration: u64) -> Result<(Tensor, Vec<u32>)> {
        self.gather(&self.batch_indices(batch_size, seed, iteration)?)
    }

    /// Every training image, in sample order.
    pub fn train_images(&self) -> Result<Tensor> {
        let idx: Vec<usize> = (0..self.train_samples.len()).collect();
        Ok(self.gather(&idx)?.0)
    }

    /// `iterations` training batches, numbered from 1.
    pub fn batches(
        &self,
        batch_size: usize,
        seed: u64,
        iterations: u64,
    ) -> impl Iterator<Item = Result<(Tensor, Vec<u32>)>> + '_ {
        (1..=iterations).map(move |k| self.batch(batch_size, seed, k))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub schema_version: u32,
    pub seed: u64,
    pub config: StreamConfig,
    pub pretrain_pool: Vec<PretrainSample>,
    pub tasks: Vec<TaskSpec>,
}

impl StreamSpec {
    pub fn mode(&self) -> StreamMode {
        self.config.mode
    }

    pub fn d_in(&self) -> usize {
        self.config.d_in
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size()
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn all_classes(&self) -> impl Iterator<Item = &ClassSpec> {
        self.tasks.iter().flat_map(|t| t.classes.iter())
    }

    /// Structural checks for a stream read from outside.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "stream schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.config.validate()?;
        if self.tasks.len() != self.config.n_tasks {
            return Err(Error::Config("stream: task count disagrees with config".into()));
        }
        let d = self.config.d_in;
        let mut seen = alloc::collections::BTreeSet::new();
        for t in &self.tasks {
            for c in &t.classes {
                if !seen.insert(c.class_id) || c.mean.len() != d || c.token_id >= self.vocab_size() {
                    return Err(Error::Config(format!("stream: bad class {}", c.class_id)));
                }
            }
            for s in t.train_samples.iter().chain(&t.test_samples) {
                if s.x.len() != d {
                    return Err(Error::Config(format!("stream: task {} sample width", t.task_id)));
                }
                t.local_index(s.class_id)?;
            }
            for c in &t.classes {
                if !t.test_samples.iter().any(|s| s.class_id == c.class_id) {
                    return Err(Error::Config(format!("stream: class {} has no test sample", c.class_id)));
                }
            }
        }
        Ok(())
    }
}

fn gaussian(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect()
}

/// Random orthonormal `k` vectors in `R^d` (Gram-Schmidt on Gaussians).
fn orthonormal_frame(r: &mut ChaCha8Rng, d: usize, k: usize) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(k);
    while frame.len() < k {
        let mut v = gaussian(r, d, 1.0);
        for u in &frame {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = libm::sqrt(v.iter().map(|a| a * a).sum::<f64>());
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            frame.push(v);
        }
    }
    frame
}

struct Domain {
    frame: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

impl Domain {
    fn draw(r: &mut ChaCha8Rng, cfg: &StreamConfig) -> Self {
        Self {
            frame: orthonormal_frame(r, cfg.d_in, cfg.class_subspace),
            offset: gaussian(r, cfg.d_in, cfg.domain_offset_scale),
        }
    }

    fn class_mean(&self, r: &mut ChaCha8Rng, spread: f64) -> Vec<f64> {
        let z = gaussian(r, self.frame.len(), spread);
        let mut mu = self.offset.clone();
        for (zi, u) in z.iter().zip(&self.frame) {
            mu.iter_mut().zip(u).for_each(|(m, b)| *m += zi * b);
        }
        mu
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
}

const MAX_DOMAIN_DRAWS: usize = 1000;

fn class_means(cfg: &StreamConfig, seed: u64) -> Result<Vec<(usize, Vec<f64>)>> {
    let k = cfg.classes_per_task;
    let mut means: Vec<(usize, Vec<f64>)> = Vec::with_capacity(cfg.total_classes());
    match cfg.mode {
        StreamMode::ClassIncremental => {
            let mut r = rng::stream(seed, &[rng::TAG_DOMAIN, 0]);
            let dom = Domain::draw(&mut r, cfg);
            let mut r = rng::stream(seed, &[rng::TAG_CLASS_MEANS, 0]);
            for _ in 0..cfg.total_classes() {
                means.push((0, dom.class_mean(&mut r, cfg.class_spread)));
            }
        }
        StreamMode::MultiDomain => {
            for t in 0..cfg.n_tasks {
                let mut accepted = None;
                for attempt in 0..MAX_DOMAIN_DRAWS {
                    let mut r = rng::stream(seed, &[rng::TAG_DOMAIN, t as u64, attempt as u64]);
                    let dom = Domain::draw(&mut r, cfg);
                    let mut r = rng::stream(seed, &[rng::TAG_CLASS_MEANS, t as u64, attempt as u64]);
                    let cand: Vec<Vec<f64>> = (0..k).map(|_| dom.class_mean(&mut r, cfg.class_spread)).collect();
                    let far = means
                        .iter()
                        .all(|(_, m)| cand.iter().all(|c| dist(c, m) >= cfg.min_domain_distance));
                    if far {
                        accepted = Some(cand);
                        break;
                    }
                }
                let cand = accepted.ok_or_else(|| {
                    Error::Config(format!(
                        "stream: could not place domain {t} at distance >= {} from earlier domains",
                        cfg.min_domain_distance
                    ))
                })?;
                means.extend(cand.into_iter().map(|m| (t, m)));
            }
        }
    }
    Ok(means)
}

fn draw_samples(r: &mut ChaCha8Rng, c: &ClassSpec, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let x = c
                .mean
                .iter()
                .map(|m| m + c.noise_scale * r.sample::<f64, _>(StandardNormal))
                .collect();
            Sample { x, class_id: c.class_id }
        })
        .collect()
}

/// Builds the whole stream from `(config, seed)`.
pub fn generate_stream(cfg: &StreamConfig, seed: u64) -> Result<StreamSpec> {
    cfg.validate()?;
    let means = class_means(cfg, seed)?;
    let k = cfg.classes_per_task;
    let n_classes = cfg.total_classes();

    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    for t in 0..cfg.n_tasks {
        let classes: Vec<ClassSpec> = (0..k)
            .map(|i| {
                let id = t * k + i;
                let (domain_id, mean) = means[id].clone();
                ClassSpec {
                    class_id: id as u32,
                    token_id: id + 1,
                    mean,
                    noise_scale: cfg.noise_scale,
                    domain_id,
                }
            })
            .collect();
        let mut train_samples = Vec::new();
        let mut test_samples = Vec::new();
        for c in &classes {
            let mut r = rng::stream(seed, &[rng::TAG_TRAIN, c.class_id as u64]);
            train_samples.extend(draw_samples(&mut r, c, cfg.train_per_class));
            let mut r = rng::stream(seed, &[rng::TAG_TEST, c.class_id as u64]);
            test_samples.extend(draw_samples(&mut r, c, cfg.test_per_class));
        }
        tasks.push(TaskSpec {
            task_id: t,
            classes,
            train_samples,
            test_samples,
        });
    }

    let mut pretrain_pool = Vec::with_capacity(n_classes * cfg.pretrain_per_class);
    for c in tasks.iter().flat_map(|t| &t.classes) {
        let mut r = rng::stream(seed, &[rng::TAG_PRETRAIN_POOL, c.class_id as u64]);
        for s in draw_samples(&mut r, c, cfg.pretrain_per_class) {
            let token_id = if r.random::<f64>() < cfg.pretrain_label_noise {
                // any other class token
                let other = r.random_range(0..n_classes - 1);
                let other = if other >= c.class_id as usize { other + 1 } else { other };
                other + 1
            } else {
                c.token_id
            };
            pretrain_pool.push(PretrainSample { x: s.x, token_id });
        }
    }

    Ok(StreamSpec {
        schema_version: SCHEMA_VERSION,
        seed,
        config: cfg.clone(),
        pretrain_pool,
        tasks,
    })
}
