//! Mixture-of-logistics output heads.

/// Parameters of one band's mixture: `K` logits, means and log scales.
#[derive(Debug, Clone, Copy)]
pub struct MolParams<'a> {
    pub logits: &'a [f32],
    pub means: &'a [f32],
    pub log_scales: &'a [f32],
}

impl<'a> MolParams<'a> {
    /// Splits a `3K` slice laid out as `[logits | means | log_scales]`.
    pub fn from_slice(p: &'a [f32]) -> Self {
        let k = p.len() / 3;
        Self {
            logits: &p[..k],
            means: &p[k..2 * k],
            log_scales: &p[2 * k..3 * k],
        }
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }

    /// Mixture weights (softmax of the logits).
    pub fn weights(&self) -> Vec<f64> {
        let max = self
            .logits
            .iter()
            .fold(f64::NEG_INFINITY, |m, &l| m.max(l as f64));
        let e: Vec<f64> = self.logits.iter().map(|&l| (l as f64 - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Scale of component `j` after flooring.
    pub fn scale(&self, j: usize, scale_floor: f64) -> f64 {
        (self.log_scales[j] as f64).max(scale_floor.ln()).exp()
    }
}

/// Index of the component picked by inverse CDF over the mixture weights.
pub fn select_component(weights: &[f64], u1: f64) -> usize {
    let mut cum = 0.0;
    for (j, &w) in weights.iter().enumerate() {
        cum += w;
        if u1 < cum {
            return j;
        }
    }
    weights.len() - 1
}

/// Draws one sample: component by inverse CDF with `u1`, then the logistic
/// quantile `mean + s·(ln u2 - ln(1 - u2))`, clamped to `[-1, 1]`.
pub fn mol_sample(params: &MolParams<'_>, u1: f64, u2: f64, scale_floor: f64) -> f32 {
    let j = select_component(&params.weights(), u1);
    let s = params.scale(j, scale_floor);
    let x = params.means[j] as f64 + s * (u2.ln() - (1.0 - u2).ln());
    x.clamp(-1.0, 1.0) as f32
}

/// Log density of `target` under the mixture.
pub fn mol_log_likelihood(params: &MolParams<'_>, target: f32, scale_floor: f64) -> f64 {
    let w = params.weights();
    let terms: Vec<f64> = (0..params.components())
        .map(|j| {
            let s = params.scale(j, scale_floor);
            let z = (target as f64 - params.means[j] as f64) / s;
            // log pdf of a logistic: -|z| - ln s - 2 ln(1 + e^-|z|)
            w[j].ln() - z.abs() - s.ln() - 2.0 * (-z.abs()).exp().ln_1p()
        })
        .collect();
    let max = terms.iter().fold(f64::NEG_INFINITY, |m, &t| m.max(t));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}
