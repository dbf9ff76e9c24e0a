use super::matrix::LinearOp;
use super::sigmoid;
use crate::error::{Error, Result};

/// Weights of one GRU layer with state size `D` and input size `D_in`.
///
/// The update is the variant with the reset gate inside the candidate's
/// recurrent term:
///
/// ```text
/// r  = σ(Wr·x + Ur·h + br)
/// z  = σ(Wz·x + Uz·h + bz)
/// n  = tanh(Wn·x + r ∘ (Un·h + bn))
/// h' = (1 - z) ∘ h + z ∘ n
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub wr: LinearOp,
    pub wz: LinearOp,
    pub wn: LinearOp,
    pub ur: LinearOp,
    pub uz: LinearOp,
    pub un: LinearOp,
    pub br: Vec<f32>,
    pub bz: Vec<f32>,
    pub bn: Vec<f32>,
}

impl GruWeights {
    pub fn state_size(&self) -> usize {
        self.ur.rows()
    }

    pub fn input_size(&self) -> usize {
        self.wr.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.state_size();
        let di = self.input_size();
        for (name, m) in [("wr", &self.wr), ("wz", &self.wz), ("wn", &self.wn)] {
            if m.rows() != d || m.cols() != di {
                return Err(Error::shape(format!(
                    "gru.{name} is {}x{}, expected {d}x{di}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        for (name, m) in [("ur", &self.ur), ("uz", &self.uz), ("un", &self.un)] {
            if m.rows() != d || m.cols() != d {
                return Err(Error::shape(format!(
                    "gru.{name} is {}x{}, expected {d}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        for (name, b) in [("br", &self.br), ("bz", &self.bz), ("bn", &self.bn)] {
            if b.len() != d {
                return Err(Error::shape(format!(
                    "gru.{name} has {} values, expected {d}",
                    b.len()
                )));
            }
        }
        Ok(())
    }
}

/// Reusable buffers for [`GruWeights::step_into`].
#[derive(Debug, Clone, Default)]
pub struct GruScratch {
    r: Vec<f32>,
    z: Vec<f32>,
    n: Vec<f32>,
    u: Vec<f32>,
}

impl GruScratch {
    pub fn new(d: usize) -> Self {
        Self {
            r: vec![0.0; d],
            z: vec![0.0; d],
            n: vec![0.0; d],
            u: vec![0.0; d],
        }
    }
}

impl GruWeights {
    /// In-place step: `state ← GRU(state, input)`. Dimensions are assumed
    /// validated.
    pub fn step_into(&self, state: &mut [f32], input: &[f32], s: &mut GruScratch) {
        let d = state.len();
        if s.r.len() != d {
            *s = GruScratch::new(d);
        }
        s.r.copy_from_slice(&self.br);
        self.wr.matvec_add_unchecked(input, &mut s.r);
        self.ur.matvec_add_unchecked(state, &mut s.r);

        s.z.copy_from_slice(&self.bz);
        self.wz.matvec_add_unchecked(input, &mut s.z);
        self.uz.matvec_add_unchecked(state, &mut s.z);

        s.u.copy_from_slice(&self.bn);
        self.un.matvec_add_unchecked(state, &mut s.u);
        s.n.fill(0.0);
        self.wn.matvec_add_unchecked(input, &mut s.n);

        for i in 0..d {
            let r = sigmoid(s.r[i]);
            let z = sigmoid(s.z[i]);
            let n = (s.n[i] + r * s.u[i]).tanh();
            state[i] = (1.0 - z) * state[i] + z * n;
        }
    }
}

/// One GRU update; returns the new state.
pub fn gru_step(weights: &GruWeights, state: &[f32], input: &[f32]) -> Result<Vec<f32>> {
    weights.validate()?;
    if state.len() != weights.state_size() || input.len() != weights.input_size() {
        return Err(Error::shape(format!(
            "gru step with state[{}] input[{}], expected state[{}] input[{}]",
            state.len(),
            input.len(),
            weights.state_size(),
            weights.input_size()
        )));
    }
    let mut h = state.to_vec();
    let mut scratch = GruScratch::new(h.len());
    weights.step_into(&mut h, input, &mut scratch);
    Ok(h)
}
