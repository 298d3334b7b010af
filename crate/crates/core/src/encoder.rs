//! Toy dual encoder: a one-hidden-layer image MLP over feature vectors and a
//! token-table text tower, both ending in an L2 normalisation.
//!
//! A class prompt is the mean of the class token's row and the shared
//! template token's row, fed through the text MLP.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

/// Token id of the shared prompt template. Class tokens start at 1.
pub const TEMPLATE_TOKEN: usize = 0;

/// Version tag of the flat parameter layout produced by
/// [`DualEncoder::params_flat`].
pub const PARAM_ORDER_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDims {
    pub d_in: usize,
    pub d_tok: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
}

impl EncoderDims {
    fn validate(&self) -> Result<()> {
        let all = [self.d_in, self.d_tok, self.hidden, self.embed_dim, self.vocab_size];
        if all.contains(&0) {
            return Err(Error::Config(format!("encoder dimensions must be >= 1, got {self:?}")));
        }
        Ok(())
    }

    /// Parameter tensor names and shapes, in flat order.
    pub fn layout(&self) -> [(&'static str, [usize; 2]); 9] {
        let Self {
            d_in,
            d_tok,
            hidden,
            embed_dim,
            vocab_size,
        } = *self;
        [
            ("image.w1", [d_in, hidden]),
            ("image.b1", [1, hidden]),
            ("image.w2", [hidden, embed_dim]),
            ("image.b2", [1, embed_dim]),
            ("text.tokens", [vocab_size, d_tok]),
            ("text.w1", [d_tok, hidden]),
            ("text.b1", [1, hidden]),
            ("text.w2", [hidden, embed_dim]),
            ("text.b2", [1, embed_dim]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, [a, b])| a * b).sum()
    }
}

/// Trainable image + text encoder pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    dims: EncoderDims,
    seed: u64,
    // in `EncoderDims::layout` order; biases are stored as vectors
    params: Vec<Tensor>,
}

/// Fan-in of each parameter tensor, for initialisation. The token table is
/// an embedding, so each row is drawn as if from a unit fan-in.
fn fan_in(name: &str, shape: [usize; 2]) -> usize {
    match name {
        "text.tokens" => 1,
        "image.b1" | "image.b2" | "text.b1" | "text.b2" => 0,
        _ => shape[0],
    }
}

impl DualEncoder {
    /// Uniform `±1/√fan_in` initialisation. Biases use the fan-in of the
    /// weight matrix they follow.
    pub fn init(seed: u64, dims: EncoderDims) -> Result<Self> {
        dims.validate()?;
        let mut r = rng::stream(seed, &[rng::TAG_INIT]);
        let layout = dims.layout();
        let mut params = Vec::with_capacity(layout.len());
        let mut last_fan = 1;
        for (name, shape) in layout {
            let fan = match fan_in(name, shape) {
                0 => last_fan,
                f => {
                    last_fan = f;
                    f
                }
            };
            let bound = 1.0 / libm::sqrt(fan as f64);
            let n = shape[0] * shape[1];
            let data: Vec<f64> = (0..n).map(|_| r.random_range(-bound..=bound)).collect();
            let t = if shape[0] == 1 {
                Tensor::vector(data)
            } else {
                Tensor::matrix(shape[0], shape[1], data)?
            };
            params.push(t);
        }
        Ok(Self { dims, seed, params })
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    /// Parameter tensors in flat order.
    pub fn tensors(&self) -> &[Tensor] {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.dims.param_count()
    }

    /// All parameters concatenated in [`EncoderDims::layout`] order, each
    /// tensor row-major.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(p.data());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(shape_err("load_flat", &[self.param_count()], &[flat.len()]));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.numel();
            *p = Tensor::new(p.shape().to_vec(), flat[off..off + n].to_vec())?;
            off += n;
        }
        Ok(())
    }

    /// Puts the parameters on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundEncoder {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        BoundEncoder { dims: self.dims, vars }
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot { model: self.clone() }
    }
}

/// A frozen copy of a [`DualEncoder`]. Its outputs are plain tensors and
/// never carry gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    model: DualEncoder,
}

impl ModelSnapshot {
    pub fn dims(&self) -> EncoderDims {
        self.model.dims
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.model.params_flat()
    }

    /// A trainable copy, e.g. to seed the student for the next task.
    pub fn thaw(&self) -> DualEncoder {
        self.model.clone()
    }

    pub fn model(&self) -> &DualEncoder {
        &self.model
    }
}

/// Anything that maps images and class tokens into the shared embedding
/// space.
pub trait Embedder {
    fn embed_images(&self, x: &Tensor) -> Result<Tensor>;
    fn embed_texts(&self, tokens: &[usize]) -> Result<Tensor>;
}

impl Embedder for DualEncoder {
    fn embed_images(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = b.encode_images(&mut g, xv)?;
        Ok(g.value(out).clone())
    }

    fn embed_texts(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let out = b.encode_texts(&mut g, tokens)?;
        Ok(g.value(out).clone())
    }
}

impl Embedder for ModelSnapshot {
    fn embed_images(&self, x: &Tensor) -> Result<Tensor> {
        self.model.embed_images(x)
    }

    fn embed_texts(&self, tokens: &[usize]) -> Result<Tensor> {
        self.model.embed_texts(tokens)
    }
}

/// Encoder parameters placed on a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    dims: EncoderDims,
    vars: Vec<Var>,
}

impl BoundEncoder {
    /// Wraps parameter variables already on a graph, in flat order.
    pub fn from_vars(g: &Graph, dims: EncoderDims, vars: Vec<Var>) -> Result<Self> {
        let layout = dims.layout();
        if vars.len() != layout.len() {
            return Err(shape_err("bound_encoder", &[layout.len()], &[vars.len()]));
        }
        for (&v, (_, shape)) in vars.iter().zip(layout.iter()) {
            if g.value(v).numel() != shape[0] * shape[1] {
                return Err(shape_err("bound_encoder", shape, g.value(v).shape()));
            }
        }
        Ok(Self { dims, vars })
    }

    pub fn params(&self) -> &[Var] {
        &self.vars
    }

    fn mlp(&self, g: &mut Graph, x: Var, first: usize) -> Result<Var> {
        let v = &self.vars[first..first + 4];
        let h = g.matmul(x, v[0])?;
        let h = g.add_row(h, v[1])?;
        let h = g.tanh(h);
        let o = g.matmul(h, v[2])?;
        let o = g.add_row(o, v[3])?;
        g.l2_normalize(o, 1)
    }

    /// `x[B×d_in]` to unit-norm rows `[B×d]`.
    pub fn encode_images(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.value(x).shape();
        if s.len() != 2 || s[1] != self.dims.d_in {
            return Err(shape_err("encode_images", &[0, self.dims.d_in], s));
        }
        self.mlp(g, x, 0)
    }

    /// One unit-norm row per class token.
    pub fn encode_texts(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.dims.vocab_size) {
            return Err(Error::Lookup { kind: "token", id: bad });
        }
        let table = self.vars[4];
        let cls = g.gather_rows(table, tokens)?;
        let tmpl = g.gather_rows(table, &vec![TEMPLATE_TOKEN; tokens.len()])?;
        let e = g.add(cls, tmpl)?;
        let e = g.scale(e, 0.5);
        self.mlp(g, e, 5)
    }

    /// Gradient of every parameter in flat order, zero where none reached.
    pub fn grads_flat(&self, g: &Graph) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims.param_count());
        for &v in &self.vars {
            match g.grad(v) {
                Some(gr) => out.extend_from_slice(gr),
                None => out.extend(core::iter::repeat(0.0).take(g.value(v).numel())),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn dims() -> EncoderDims {
        EncoderDims {
            d_in: 6,
            d_tok: 4,
            hidden: 7,
            embed_dim: 5,
            vocab_size: 4,
        }
    }

    fn random_batch(seed: u64, b: usize, d: usize) -> Tensor {
        let mut r = rng::stream(seed, &[99]);
        let data = (0..b * d).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::matrix(b, d, data).unwrap()
    }

    #[test]
    fn init_is_seeded() {
        let a = DualEncoder::init(3, dims()).unwrap();
        let b = DualEncoder::init(3, dims()).unwrap();
        let c = DualEncoder::init(4, dims()).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
        assert_ne!(a.params_flat(), c.params_flat());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let m = DualEncoder::init(11, dims()).unwrap();
        let layout = m.dims().layout();
        let flat = m.params_flat();
        let mut off = 0;
        let mut last = 1;
        for (name, shape) in layout {
            let n = shape[0] * shape[1];
            let fan = match fan_in(name, shape) {
                0 => last,
                f => {
                    last = f;
                    f
                }
            };
            let bound = 1.0 / (fan as f64).sqrt();
            let max = flat[off..off + n].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max <= bound, "{name}: {max} > {bound}");
            off += n;
        }
        assert_eq!(off, m.param_count());
    }

    #[test]
    fn zero_dims_rejected() {
        let mut d = dims();
        d.hidden = 0;
        assert!(matches!(DualEncoder::init(0, d), Err(Error::Config(_))));
    }

    #[test]
    fn outputs_are_unit_rows() {
        let m = DualEncoder::init(5, dims()).unwrap();
        let e = m.embed_images(&random_batch(1, 9, 6)).unwrap();
        assert_eq!(e.shape(), &[9, 5]);
        for i in 0..9 {
            let n: f64 = e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let t = m.embed_texts(&[1, 2, 3, 0]).unwrap();
        for i in 0..4 {
            let n: f64 = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_inputs() {
        let m = DualEncoder::init(5, dims()).unwrap();
        let e = m.embed_images(&Tensor::zeros(vec![0, 6])).unwrap();
        assert_eq!(e.shape(), &[0, 5]);
        let t = m.embed_texts(&[]).unwrap();
        assert_eq!(t.shape(), &[0, 5]);
    }

    #[test]
    fn bad_inputs() {
        let m = DualEncoder::init(5, dims()).unwrap();
        assert!(matches!(
            m.embed_images(&Tensor::zeros(vec![2, 3])),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            m.embed_texts(&[1, 4]),
            Err(Error::Lookup { kind: "token", id: 4 })
        ));
    }

    #[test]
    fn snapshot_matches_student_and_stays_frozen() {
        let mut m = DualEncoder::init(5, dims()).unwrap();
        let snap = m.snapshot();
        let x = random_batch(2, 3, 6);
        assert_eq!(snap.embed_images(&x).unwrap(), m.embed_images(&x).unwrap());
        let before = snap.embed_images(&x).unwrap();
        let zeros = vec![0.5; m.param_count()];
        m.load_flat(&zeros).unwrap();
        assert_eq!(snap.embed_images(&x).unwrap(), before);
    }

    #[test]
    fn flat_round_trip() {
        let mut m = DualEncoder::init(5, dims()).unwrap();
        let flat = m.params_flat();
        assert_eq!(flat.len(), m.param_count());
        let other = DualEncoder::init(6, dims()).unwrap().params_flat();
        m.load_flat(&other).unwrap();
        assert_eq!(m.params_flat(), other);
        assert!(m.load_flat(&other[1..]).is_err());
    }

    #[test]
    fn zeroed_params_change_outputs() {
        let mut m = DualEncoder::init(5, dims()).unwrap();
        let x = random_batch(3, 2, 6);
        let before = m.embed_images(&x).unwrap();
        // an all-zero encoder has zero-norm outputs, so perturb the last bias
        let mut flat = vec![0.0; m.param_count()];
        let n = flat.len();
        flat[n - 1] = 1.0;
        let img_b2_end = m.dims().layout()[..4].iter().map(|(_, [a, b])| a * b).sum::<usize>();
        flat[img_b2_end - 1] = 1.0;
        m.load_flat(&flat).unwrap();
        assert_ne!(m.embed_images(&x).unwrap(), before);
    }
}
