//! Loss terms of the MulKI objective.
//!
//! * cross-modal symmetric alignment between prototypes and class texts,
//! * feature distillation (per-sample squared distance),
//! * intra-modal relationship distillation (instance-to-prototype
//!   similarity matrices),
//! * inter-modal distribution distillation (image-to-text and
//!   prototype/text soft cross-entropies),
//! * per-sample teacher weighting from distribution similarity,
//! * and their assembly into the total objective.
//!
//! Teacher outputs and prototypes always enter as constants.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{BoundEncoder, Embedder};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::weightspace;

/// How the two teachers' sample-wise terms are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `r₀(x)` from the similarity of each teacher's image-text
    /// distribution to the student's.
    Similarity,
    /// Both teachers at 0.5.
    Average,
    /// Initial model only.
    OnlyC0,
    /// Previous-task model only.
    OnlyPrev,
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similarity" => Ok(Self::Similarity),
            "average" => Ok(Self::Average),
            "only_c0" => Ok(Self::OnlyC0),
            "only_prev" => Ok(Self::OnlyPrev),
            other => Err(Error::Config(format!("unknown weighting mode `{other}`"))),
        }
    }
}

/// Which parts of the objective are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    pub csa: bool,
    pub fd: bool,
    pub ird: bool,
    pub idd: bool,
    pub wc: bool,
    pub we: bool,
    pub ewe: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            csa: true,
            fd: true,
            ird: true,
            idd: true,
            wc: true,
            we: true,
            ewe: false,
        }
    }
}

impl Components {
    pub const NONE: Self = Self {
        csa: false,
        fd: false,
        ird: false,
        idd: false,
        wc: false,
        we: false,
        ewe: false,
    };

    pub fn any_distillation(&self) -> bool {
        self.fd || self.ird || self.idd
    }
}

/// Coefficients and switches for [`total_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub tau_ce: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_wc: f64,
    pub weighting: Weighting,
    pub enable: Components,
}

impl LossConfig {
    pub fn uses_csa(&self) -> bool {
        self.enable.csa && self.lambda1 != 0.0
    }

    pub fn uses_mdd(&self) -> bool {
        self.enable.any_distillation() && self.lambda2 != 0.0
    }

    pub fn uses_wc(&self) -> bool {
        self.enable.wc && self.lambda_wc != 0.0
    }

    /// Whether prototypes take part in any enabled term.
    pub fn needs_prototypes(&self) -> bool {
        self.uses_csa() || (self.uses_mdd() && (self.enable.ird || self.enable.idd))
    }
}

/// Value of every term of one evaluation of the objective. Distillation
/// entries are as they enter the objective: teacher-weighted, before the
/// `α`/`β`/`λ` coefficients, so
/// `mdd = fd0 + fd_prev + α(ird0 + ird_prev) + β(idd0 + idd_prev)` and
/// `total = ce + λ₁·csa + λ₂·mdd + λ_wc·wc`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub csa: f64,
    pub fd0: f64,
    pub fd_prev: f64,
    pub ird0: f64,
    pub ird_prev: f64,
    pub idd0: f64,
    pub idd_prev: f64,
    pub mdd: f64,
    pub wc: f64,
    pub total: f64,
    pub per_sample_r0: Vec<f64>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.ce,
            self.csa,
            self.fd0,
            self.fd_prev,
            self.ird0,
            self.ird_prev,
            self.idd0,
            self.idd_prev,
            self.mdd,
            self.wc,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn describe(&self) -> String {
        format!(
            "ce={} csa={} fd0={} fd_prev={} ird0={} ird_prev={} idd0={} idd_prev={} mdd={} wc={} total={}",
            self.ce,
            self.csa,
            self.fd0,
            self.fd_prev,
            self.ird0,
            self.ird_prev,
            self.idd0,
            self.idd_prev,
            self.mdd,
            self.wc,
            self.total
        )
    }
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item()
}

fn require_rows(g: &Graph, v: Var, op: &'static str) -> Result<usize> {
    let s = g.value(v).shape();
    if s.len() != 2 {
        return Err(Error::Shape {
            op,
            detail: format!("expected a matrix, got {s:?}"),
        });
    }
    Ok(s[0])
}

fn identity(k: usize) -> Tensor {
    let mut d = vec![0.0; k * k];
    for i in 0..k {
        d[i * k + i] = 1.0;
    }
    Tensor::matrix(k, k, d).expect("square")
}

/// Row-wise softmax of cosine similarities over temperature.
fn sim_softmax(g: &mut Graph, a: Var, b: Var, tau: f64) -> Result<Var> {
    let s = g.cosine_sim_matrix(a, b)?;
    let s = g.scale(s, 1.0 / tau);
    g.softmax(s, 1)
}

/// Symmetric InfoNCE between prototypes `P[K×d]` and class texts `T[K×d]`:
/// the mean of the prototype-to-text and text-to-prototype cross-entropies
/// with matching indices as targets.
pub fn csa_loss(g: &mut Graph, protos: Var, texts: Var, tau: f64) -> Result<Var> {
    let k = require_rows(g, protos, "csa_loss")?;
    if k == 0 {
        return Err(Error::Contract("csa_loss needs at least one class".into()));
    }
    if g.value(texts).shape() != g.value(protos).shape() {
        return Err(shape_err("csa_loss", g.value(protos).shape(), g.value(texts).shape()));
    }
    let s = g.cosine_sim_matrix(protos, texts)?;
    let logits = g.scale(s, 1.0 / tau);
    let eye = g.constant(identity(k));
    let p2t = g.log_softmax(logits, 1)?;
    let t2p = g.log_softmax(logits, 0)?;
    let both = g.add(p2t, t2p)?;
    let diag = g.mul(both, eye)?;
    let sum = g.sum(diag);
    Ok(g.scale(sum, -1.0 / (2.0 * k as f64)))
}

/// Squared distance per sample and its batch mean.
pub fn fd_loss(g: &mut Graph, teacher_feats: Var, student_feats: Var) -> Result<(Var, Var)> {
    let per = g.row_sq_dist(student_feats, teacher_feats)?;
    let mean = g.mean(per);
    Ok((per, mean))
}

/// `‖diag(w)·(sim(F_t, P) − sim(F_s, P))‖_F / √(B·K)`; `w` defaults to ones.
pub fn ird_loss(
    g: &mut Graph,
    teacher_feats: Var,
    student_feats: Var,
    protos: Var,
    row_weights: Option<&[f64]>,
) -> Result<Var> {
    let k = require_rows(g, protos, "ird_loss")?;
    if k == 0 {
        return Err(Error::Contract("ird_loss needs at least one prototype".into()));
    }
    let b = require_rows(g, student_feats, "ird_loss")?;
    let st = g.cosine_sim_matrix(teacher_feats, protos)?;
    let ss = g.cosine_sim_matrix(student_feats, protos)?;
    let mut d = g.sub(st, ss)?;
    if let Some(w) = row_weights {
        if w.len() != b {
            return Err(shape_err("ird_loss", &[b], &[w.len()]));
        }
        let w = g.constant(Tensor::vector(w.to_vec()));
        d = g.mul_rows(d, w)?;
    }
    let n = g.frobenius_norm(d);
    Ok(g.scale(n, 1.0 / libm::sqrt((b * k).max(1) as f64)))
}

/// Softmax over classes of `sim(feats, texts)/τ`, one row per image.
pub fn image_text_dist(g: &mut Graph, feats: Var, texts: Var, tau: f64) -> Result<Var> {
    sim_softmax(g, feats, texts, tau)
}

fn weighted_mean(g: &mut Graph, per: Var, weights: Option<&[f64]>) -> Result<Var> {
    let per = match weights {
        Some(w) => {
            let n = g.value(per).numel();
            if w.len() != n {
                return Err(shape_err("weighted_mean", &[n], &[w.len()]));
            }
            let w = g.constant(Tensor::vector(w.to_vec()));
            g.mul(per, w)?
        }
        None => per,
    };
    Ok(g.mean(per))
}

/// Batch mean of per-image soft cross-entropies, optionally weighted.
pub fn i2t_loss(g: &mut Graph, teacher_dist: Var, student_dist: Var, weights: Option<&[f64]>) -> Result<Var> {
    let per = g.soft_cross_entropy_rows(teacher_dist, student_dist)?;
    weighted_mean(g, per, weights)
}

/// Prototype→text plus text→prototype soft cross-entropy, each averaged
/// over the `K` classes.
pub fn pt_loss(
    g: &mut Graph,
    teacher_pt: Var,
    teacher_tp: Var,
    student_pt: Var,
    student_tp: Var,
) -> Result<Var> {
    let a = g.soft_cross_entropy_rows(teacher_pt, student_pt)?;
    let a = g.mean(a);
    let b = g.soft_cross_entropy_rows(teacher_tp, student_tp)?;
    let b = g.mean(b);
    g.add(a, b)
}

fn row_cosines(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(shape_err("sample_weights", a.shape(), b.shape()));
    }
    (0..a.rows())
        .map(|i| {
            let (x, y) = (a.row(i), b.row(i));
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = libm::sqrt(x.iter().map(|v| v * v).sum::<f64>());
            let ny = libm::sqrt(y.iter().map(|v| v * v).sum::<f64>());
            if nx == 0.0 || ny == 0.0 {
                return Err(Error::Degenerate {
                    op: "sample_weights",
                    detail: format!("row {i} is all zeros"),
                });
            }
            Ok(dot / (nx * ny))
        })
        .collect()
}

/// Per-sample teacher weights `(r₀, r_prev)`: the teacher whose image-text
/// distribution is *less* similar to the student's gets more weight,
/// `r₀ = e^{−s₀} / (e^{−s₀} + e^{−s_prev})`.
pub fn sample_weights(dist_c0: &Tensor, dist_prev: &Tensor, dist_student: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let s0 = row_cosines(dist_c0, dist_student)?;
    let sp = row_cosines(dist_prev, dist_student)?;
    let mut r0 = Vec::with_capacity(s0.len());
    let mut rp = Vec::with_capacity(s0.len());
    for (a, b) in s0.iter().zip(&sp) {
        // shift so the larger exponent is zero
        let m = a.min(*b);
        let (e0, ep) = (libm::exp(m - a), libm::exp(m - b));
        r0.push(e0 / (e0 + ep));
        rp.push(ep / (e0 + ep));
    }
    Ok((r0, rp))
}

/// One frozen teacher's view of the current batch and task.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutputs {
    /// Image features `[B×d]`.
    pub feats: Tensor,
    /// Image→text distributions `[B×K]`.
    pub img_text_dist: Tensor,
    /// Prototype→text and text→prototype distributions `[K×K]` (with the
    /// teacher's texts), when prototypes are in play.
    pub proto: Option<TeacherProtoDists>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherProtoDists {
    pub proto_text: Tensor,
    pub text_proto: Tensor,
}

impl TeacherOutputs {
    pub fn compute<E: Embedder>(
        teacher: &E,
        images: &Tensor,
        tokens: &[usize],
        protos: Option<&Tensor>,
        tau: f64,
    ) -> Result<Self> {
        let feats = teacher.embed_images(images)?;
        let texts = teacher.embed_texts(tokens)?;
        Self::from_embeddings(feats, &texts, protos, tau)
    }

    /// Builds the distributions from precomputed teacher embeddings.
    pub fn from_embeddings(feats: Tensor, texts: &Tensor, protos: Option<&Tensor>, tau: f64) -> Result<Self> {
        let mut g = Graph::new();
        let f = g.constant(feats);
        let t = g.constant(texts.clone());
        let it = sim_softmax(&mut g, f, t, tau)?;
        let proto = match protos {
            Some(p) => {
                let p = g.constant(p.clone());
                let pt = sim_softmax(&mut g, p, t, tau)?;
                let tp = sim_softmax(&mut g, t, p, tau)?;
                Some(TeacherProtoDists {
                    proto_text: g.value(pt).clone(),
                    text_proto: g.value(tp).clone(),
                })
            }
            None => None,
        };
        Ok(Self {
            img_text_dist: g.value(it).clone(),
            proto,
            feats: g.value(f).clone(),
        })
    }
}

/// Student-side quantities on the graph that the distillation terms use.
/// The prototype distributions are absent when no prototypes are in play.
#[derive(Clone, Copy, Debug)]
pub struct StudentOutputs {
    pub feats: Var,
    pub img_text_dist: Var,
    pub protos: Option<ProtoDists>,
}

#[derive(Clone, Copy, Debug)]
pub struct ProtoDists {
    pub protos: Var,
    pub proto_text: Var,
    pub text_proto: Var,
}

impl StudentOutputs {
    pub fn build(g: &mut Graph, feats: Var, texts: Var, protos: Option<Var>, tau: f64) -> Result<Self> {
        let img_text_dist = sim_softmax(g, feats, texts, tau)?;
        let protos = match protos {
            Some(p) => Some(ProtoDists {
                protos: p,
                proto_text: sim_softmax(g, p, texts, tau)?,
                text_proto: sim_softmax(g, texts, p, tau)?,
            }),
            None => None,
        };
        Ok(Self {
            feats,
            img_text_dist,
            protos,
        })
    }

    fn proto_dists(&self) -> Result<ProtoDists> {
        self.protos
            .ok_or_else(|| Error::Contract("relationship and distribution distillation need prototypes".into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MddConfig {
    pub alpha: f64,
    pub beta: f64,
    pub weighting: Weighting,
    pub enable: Components,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MddBreakdown {
    pub fd: [f64; 2],
    pub ird: [f64; 2],
    pub idd: [f64; 2],
    pub r0: Vec<f64>,
}

/// For `[C₀, C_prev]`: per-sample weights and the prototype-text
/// coefficient.
pub type TeacherWeights = [(Vec<f64>, f64); 2];

/// Teacher weights for a weighting mode, read off the current (detached)
/// student distribution.
pub fn teacher_weights(
    g: &Graph,
    c0: &TeacherOutputs,
    prev: &TeacherOutputs,
    student: &StudentOutputs,
    weighting: Weighting,
) -> Result<TeacherWeights> {
    let b = g.value(student.feats).rows();
    Ok(match weighting {
        Weighting::Similarity => {
            let (r0, rp) = sample_weights(&c0.img_text_dist, &prev.img_text_dist, g.value(student.img_text_dist))?;
            [(r0, 0.5), (rp, 0.5)]
        }
        Weighting::Average => [(vec![0.5; b], 0.5), (vec![0.5; b], 0.5)],
        Weighting::OnlyC0 => [(vec![1.0; b], 1.0), (vec![0.0; b], 0.0)],
        Weighting::OnlyPrev => [(vec![0.0; b], 0.0), (vec![1.0; b], 1.0)],
    })
}

/// Multi-level dual-teacher distillation. For each teacher `k` with
/// per-sample weights `r_k` and prototype-text coefficient `c_k`:
/// `FD_{r_k} + α·IRD_{r_k} + β·(i2t_{r_k} + c_k·p&t)`, summed over both
/// teachers. A teacher whose weights are all zero is skipped.
pub fn mdd_loss(
    g: &mut Graph,
    c0: &TeacherOutputs,
    prev: &TeacherOutputs,
    student: &StudentOutputs,
    cfg: &MddConfig,
) -> Result<(Var, MddBreakdown)> {
    let weights = teacher_weights(g, c0, prev, student, cfg.weighting)?;
    let (loss, mut out) = mdd_loss_weighted(g, c0, prev, student, cfg, &weights)?;
    if cfg.weighting == Weighting::Similarity {
        out.r0 = weights[0].0.clone();
    }
    Ok((loss, out))
}

/// [`mdd_loss`] with the teacher weights given; `cfg.weighting` is not
/// consulted.
pub fn mdd_loss_weighted(
    g: &mut Graph,
    c0: &TeacherOutputs,
    prev: &TeacherOutputs,
    student: &StudentOutputs,
    cfg: &MddConfig,
    weights: &TeacherWeights,
) -> Result<(Var, MddBreakdown)> {
    let mut out = MddBreakdown::default();
    let mut total: Option<Var> = None;
    for (k, (teacher, (w, pt_coef))) in [c0, prev].into_iter().zip(weights.iter()).enumerate() {
        if *pt_coef == 0.0 && w.iter().all(|&v| v == 0.0) {
            continue;
        }
        let tf = g.constant(teacher.feats.clone());
        let mut terms: Vec<Var> = Vec::new();
        if cfg.enable.fd {
            let (per, _) = fd_loss(g, tf, student.feats)?;
            let v = weighted_mean(g, per, Some(w))?;
            out.fd[k] = scalar(g, v);
            terms.push(v);
        }
        if cfg.enable.ird {
            let v = ird_loss(g, tf, student.feats, student.proto_dists()?.protos, Some(w))?;
            out.ird[k] = scalar(g, v);
            terms.push(g.scale(v, cfg.alpha));
        }
        if cfg.enable.idd {
            let td = g.constant(teacher.img_text_dist.clone());
            let i2t = i2t_loss(g, td, student.img_text_dist, Some(w))?;
            let tp = teacher
                .proto
                .as_ref()
                .ok_or_else(|| Error::Contract("teacher outputs lack prototype distributions".into()))?;
            let tpt = g.constant(tp.proto_text.clone());
            let ttp = g.constant(tp.text_proto.clone());
            let sp = student.proto_dists()?;
            let pt = pt_loss(g, tpt, ttp, sp.proto_text, sp.text_proto)?;
            let pt = g.scale(pt, *pt_coef);
            let idd = g.add(i2t, pt)?;
            out.idd[k] = scalar(g, idd);
            terms.push(g.scale(idd, cfg.beta));
        }
        for t in terms {
            total = Some(match total {
                Some(a) => g.add(a, t)?,
                None => t,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok((total, out))
}

/// Cross-entropy of `sim(feats, texts)/τ_ce` logits against class indices.
pub fn classification_loss(g: &mut Graph, feats: Var, texts: Var, labels: &[usize], tau_ce: f64) -> Result<Var> {
    let b = require_rows(g, feats, "classification_loss")?;
    let k = require_rows(g, texts, "classification_loss")?;
    if labels.len() != b {
        return Err(shape_err("classification_loss", &[b], &[labels.len()]));
    }
    let mut onehot = vec![0.0; b * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Lookup { kind: "label", id: l });
        }
        onehot[i * k + l] = 1.0;
    }
    let s = g.cosine_sim_matrix(feats, texts)?;
    let logits = g.scale(s, 1.0 / tau_ce);
    let ls = g.log_softmax(logits, 1)?;
    let oh = g.constant(Tensor::matrix(b, k, onehot)?);
    let picked = g.mul(ls, oh)?;
    let sum = g.sum(picked);
    Ok(g.scale(sum, -1.0 / b.max(1) as f64))
}

/// Everything [`total_loss`] reads for one batch.
pub struct LossInputs<'a> {
    pub student: &'a BoundEncoder,
    /// `[B×d_in]` batch, placed on the graph as a constant.
    pub images: Var,
    /// Index of each image's class within `tokens`.
    pub labels: &'a [usize],
    /// Class tokens of the current task.
    pub tokens: &'a [usize],
    /// Current prototypes `[K×d]`, aligned with `tokens`.
    pub protos: Option<&'a Tensor>,
    pub c0: Option<&'a TeacherOutputs>,
    pub prev: Option<&'a TeacherOutputs>,
    /// Previous task's flat parameters, for weight consolidation.
    pub theta_prev: Option<&'a [f64]>,
    /// Fixed teacher weights in place of those the weighting mode would
    /// compute.
    pub teacher_weights: Option<&'a TeacherWeights>,
}

/// `L = L_ce + λ₁·L_CSA + λ₂·L_MDD (+ λ_wc·L_WC)`.
pub fn total_loss(g: &mut Graph, inp: &LossInputs<'_>, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let feats = inp.student.encode_images(g, inp.images)?;
    let texts = inp.student.encode_texts(g, inp.tokens)?;
    let ce = classification_loss(g, feats, texts, inp.labels, cfg.tau_ce)?;
    let mut bd = LossBreakdown {
        ce: scalar(g, ce),
        ..Default::default()
    };
    let mut total = ce;

    let protos = if cfg.needs_prototypes() {
        let p = inp
            .protos
            .ok_or_else(|| Error::Contract("enabled loss terms need prototypes".into()))?;
        Some(g.constant(p.clone()))
    } else {
        None
    };

    if cfg.uses_csa() {
        let csa = csa_loss(g, protos.expect("csa needs prototypes"), texts, cfg.tau)?;
        bd.csa = scalar(g, csa);
        let t = g.scale(csa, cfg.lambda1);
        total = g.add(total, t)?;
    }

    if cfg.uses_mdd() {
        let (c0, prev) = match (inp.c0, inp.prev) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Contract("distillation needs both teacher outputs".into())),
        };
        let student = StudentOutputs::build(g, feats, texts, protos, cfg.tau)?;
        let mcfg = MddConfig {
            alpha: cfg.alpha,
            beta: cfg.beta,
            weighting: cfg.weighting,
            enable: cfg.enable,
        };
        let (mdd, mb) = match inp.teacher_weights {
            Some(w) => mdd_loss_weighted(g, c0, prev, &student, &mcfg, w)?,
            None => mdd_loss(g, c0, prev, &student, &mcfg)?,
        };
        bd.fd0 = mb.fd[0];
        bd.fd_prev = mb.fd[1];
        bd.ird0 = mb.ird[0];
        bd.ird_prev = mb.ird[1];
        bd.idd0 = mb.idd[0];
        bd.idd_prev = mb.idd[1];
        bd.per_sample_r0 = mb.r0;
        bd.mdd = scalar(g, mdd);
        let t = g.scale(mdd, cfg.lambda2);
        total = g.add(total, t)?;
    }

    if cfg.uses_wc() {
        let prev = inp
            .theta_prev
            .ok_or_else(|| Error::Contract("weight consolidation needs previous parameters".into()))?;
        let wc = weightspace::wc_loss(g, inp.student.params(), prev)?;
        bd.wc = scalar(g, wc);
        let t = g.scale(wc, cfg.lambda_wc);
        total = g.add(total, t)?;
    }

    bd.total = scalar(g, total);
    Ok((total, bd))
}
