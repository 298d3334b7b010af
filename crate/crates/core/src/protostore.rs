//! Per-class visual prototypes with a sliding-average update.
//!
//! Prototypes are unit vectors. They are seeded from the frozen initial
//! model's mean class features when a task starts, blended toward the
//! student's per-batch class means once per training iteration, and
//! dropped when the task ends.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::Embedder;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `γ_k = min(γ₀ + k·Δγ, Γ)` after `k` updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaSchedule {
    pub gamma0: f64,
    pub step: f64,
    pub max: f64,
}

impl Default for GammaSchedule {
    /// Start at 0, +0.04 per update, cap 0.98.
    fn default() -> Self {
        Self {
            gamma0: 0.0,
            step: 0.04,
            max: 0.98,
        }
    }
}

impl GammaSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.step > 0.0
            && self.max > 0.0
            && self.max < 1.0
            && self.gamma0 >= 0.0
            && self.gamma0 <= self.max;
        if !ok {
            return Err(Error::Config(format!(
                "gamma schedule needs 0 <= gamma0 <= max < 1 and step > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn at(&self, k: u64) -> f64 {
        (self.gamma0 + k as f64 * self.step).min(self.max)
    }
}

fn normalize(v: &mut [f64], op: &'static str) -> Result<()> {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if !(n > 0.0) {
        return Err(Error::Degenerate {
            op,
            detail: "class mean has zero norm".into(),
        });
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

fn mean_rows(rows: &[&[f64]]) -> Vec<f64> {
    let d = rows[0].len();
    let mut m = alloc::vec![0.0; d];
    for r in rows {
        m.iter_mut().zip(r.iter()).for_each(|(a, b)| *a += b);
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeStore {
    protos: BTreeMap<u32, Vec<f64>>,
    schedule: GammaSchedule,
    updates: u64,
}

impl PrototypeStore {
    /// An empty store, as between tasks.
    pub fn new(schedule: GammaSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            protos: BTreeMap::new(),
            schedule,
            updates: 0,
        })
    }

    /// Seeds one prototype per class from `c0`'s mean feature over that
    /// class's samples (rows of `images`), and resets γ.
    pub fn init_from_model<E: Embedder>(
        &mut self,
        c0: &E,
        images_by_class: &BTreeMap<u32, Tensor>,
    ) -> Result<()> {
        let mut protos = BTreeMap::new();
        for (&class, x) in images_by_class {
            if x.rows() == 0 {
                return Err(Error::Degenerate {
                    op: "init_from_model",
                    detail: format!("class {class} has no samples"),
                });
            }
            let f = c0.embed_images(x)?;
            let rows: Vec<&[f64]> = (0..f.rows()).map(|i| f.row(i)).collect();
            let mut p = mean_rows(&rows);
            normalize(&mut p, "init_from_model")?;
            protos.insert(class, p);
        }
        self.protos = protos;
        self.updates = 0;
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.schedule.at(self.updates)
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn schedule(&self) -> GammaSchedule {
        self.schedule
    }

    /// One training iteration's update. `feats` are detached student
    /// features and `labels` their classes. Classes absent from the batch
    /// keep their prototype; γ advances once per call.
    pub fn ema_update(&mut self, feats: &Tensor, labels: &[u32]) -> Result<()> {
        if feats.rows() != labels.len() {
            return Err(Error::Shape {
                op: "ema_update",
                detail: format!("{} feature rows for {} labels", feats.rows(), labels.len()),
            });
        }
        let mut by_class: BTreeMap<u32, Vec<&[f64]>> = BTreeMap::new();
        for (i, &c) in labels.iter().enumerate() {
            if !self.protos.contains_key(&c) {
                return Err(Error::Contract(format!("ema_update: class {c} has no prototype")));
            }
            by_class.entry(c).or_default().push(feats.row(i));
        }
        let gamma = self.gamma();
        for (c, rows) in by_class {
            let m = mean_rows(&rows);
            let p = self.protos.get_mut(&c).expect("checked above");
            let mut next: Vec<f64> = p
                .iter()
                .zip(&m)
                .map(|(a, b)| gamma * a + (1.0 - gamma) * b)
                .collect();
            normalize(&mut next, "ema_update")?;
            *p = next;
        }
        self.updates += 1;
        Ok(())
    }

    pub fn get(&self, class: u32) -> Result<&[f64]> {
        self.protos
            .get(&class)
            .map(Vec::as_slice)
            .ok_or(Error::Lookup {
                kind: "prototype",
                id: class as usize,
            })
    }

    /// Prototypes of `classes`, stacked in that order.
    pub fn matrix(&self, classes: &[u32]) -> Result<Tensor> {
        let rows = classes
            .iter()
            .map(|&c| self.get(c))
            .collect::<Result<Vec<_>>>()?;
        let d = rows.first().map_or(0, |r| r.len());
        Tensor::from_rows(&rows, d)
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.protos.keys().copied()
    }

    /// Forgets every prototype and resets γ.
    pub fn purge(&mut self) {
        self.protos.clear();
        self.updates = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{DualEncoder, EncoderDims};
    use alloc::vec;

    struct Identity;

    impl Embedder for Identity {
        fn embed_images(&self, x: &Tensor) -> Result<Tensor> {
            Ok(x.clone())
        }
        fn embed_texts(&self, _: &[usize]) -> Result<Tensor> {
            unreachable!()
        }
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let mut v = v.to_vec();
        normalize(&mut v, "t").unwrap();
        v
    }

    fn store() -> PrototypeStore {
        PrototypeStore::new(GammaSchedule::default()).unwrap()
    }

    #[test]
    fn init_from_identical_samples() {
        let dims = EncoderDims {
            d_in: 3,
            d_tok: 2,
            hidden: 4,
            embed_dim: 3,
            vocab_size: 2,
        };
        let c0 = DualEncoder::init(1, dims).unwrap().snapshot();
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]], 3).unwrap();
        let single = Tensor::from_rows(&[[0.1, 0.2, 0.3]], 3).unwrap();
        let mut s = store();
        s.init_from_model(&c0, &BTreeMap::from([(7, x)])).unwrap();
        let expect = c0.embed_images(&single).unwrap();
        for (a, b) in s.get(7).unwrap().iter().zip(expect.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn opposite_features_are_degenerate() {
        let x = Tensor::from_rows(&[[1.0, -2.0], [-1.0, 2.0]], 2).unwrap();
        let mut s = store();
        let err = s.init_from_model(&Identity, &BTreeMap::from([(0, x)]));
        assert!(matches!(err, Err(Error::Degenerate { .. })));
        let empty = Tensor::zeros(vec![0, 2]);
        let err = s.init_from_model(&Identity, &BTreeMap::from([(0, empty)]));
        assert!(matches!(err, Err(Error::Degenerate { .. })));
    }

    #[test]
    fn gamma_zero_takes_batch_mean() {
        let mut s = store();
        let x = Tensor::from_rows(&[[1.0, 0.0]], 2).unwrap();
        s.init_from_model(&Identity, &BTreeMap::from([(0, x)])).unwrap();
        let feats = Tensor::from_rows(&[[0.0, 2.0], [2.0, 2.0]], 2).unwrap();
        s.ema_update(&feats, &[0, 0]).unwrap();
        let p = s.get(0).unwrap();
        let e = unit(&[1.0, 2.0]);
        assert!((p[0] - e[0]).abs() < 1e-15 && (p[1] - e[1]).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_caps_at_25() {
        let sched = GammaSchedule::default();
        for k in 0..25 {
            assert!(sched.at(k) < 0.98, "k={k}");
        }
        assert_eq!(sched.at(25), 0.98);
        assert_eq!(sched.at(1000), 0.98);
    }

    #[test]
    fn absent_classes_untouched_and_gamma_advances_once() {
        let mut s = store();
        let init = BTreeMap::from([
            (0, Tensor::from_rows(&[[1.0, 0.0]], 2).unwrap()),
            (1, Tensor::from_rows(&[[0.0, 1.0]], 2).unwrap()),
        ]);
        s.init_from_model(&Identity, &init).unwrap();
        let before = s.get(1).unwrap().to_vec();
        s.ema_update(&Tensor::from_rows(&[[1.0, 1.0]], 2).unwrap(), &[0]).unwrap();
        assert_eq!(s.get(1).unwrap(), &before[..]);
        assert_eq!(s.updates(), 1);
        assert!((s.gamma() - 0.04).abs() < 1e-15);
    }

    #[test]
    fn unknown_class_rejected() {
        let mut s = store();
        s.init_from_model(&Identity, &BTreeMap::from([(0, Tensor::from_rows(&[[1.0]], 1).unwrap())]))
            .unwrap();
        let err = s.ema_update(&Tensor::from_rows(&[[1.0]], 1).unwrap(), &[3]);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn purge_empties_and_is_idempotent() {
        let mut s = store();
        s.init_from_model(&Identity, &BTreeMap::from([(0, Tensor::from_rows(&[[1.0]], 1).unwrap())]))
            .unwrap();
        s.purge();
        assert!(s.is_empty());
        assert!(matches!(s.get(0), Err(Error::Lookup { .. })));
        s.purge();
        assert!(s.is_empty());
        assert_eq!(s.updates(), 0);
    }

    #[test]
    fn bad_schedule_rejected() {
        let bad = GammaSchedule {
            gamma0: 0.0,
            step: 0.1,
            max: 1.0,
        };
        assert!(PrototypeStore::new(bad).is_err());
    }
}
