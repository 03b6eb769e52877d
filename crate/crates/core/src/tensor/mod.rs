//! Dense tensors with a reverse-mode tape.

mod attention;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod value;


pub use attention::{apply_rope, attention, Rope, RopeTable, ROPE_BASE};
pub use graph::{Gradients, Graph, Unary, Var};
pub use params::{ParamId, ParamStore};
pub use value::{numel, DType, Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Linear layer weights: `x · w + b` with `w: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn init<T: Real, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / inp as f64).sqrt();
        let w = store.normal(&format!("{name}.w"), &[inp, out], std, rng);
        let b = bias.then(|| store.zeros(&format!("{name}.b"), &[out]));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Learned affine layer norm over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn init<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.ones(&format!("{name}.gain"), &[dim]),
            bias: store.zeros(&format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let n = g.layer_norm(x, T::from_f64c(Self::EPS));
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul(n, gain)?;
        g.add(y, bias)
    }
}
