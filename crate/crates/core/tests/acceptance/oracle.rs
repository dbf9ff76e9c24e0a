//! Reference implementations used as independent oracles. Written for
//! clarity: direct summation in f64, no shared code with the engine.

pub type Seq = Vec<Vec<f64>>;

/// `w[o][i][j]` from `(c_out, c_in, width)` row-major data.
pub fn unpack_conv(data: &[f32], c_out: usize, c_in: usize, width: usize) -> Vec<Vec<Vec<f64>>> {
    (0..c_out)
        .map(|o| {
            (0..c_in)
                .map(|i| (0..width).map(|j| data[(o * c_in + i) * width + j] as f64).collect())
                .collect()
        })
        .collect()
}

/// `y[t][o] = b[o] + Σ_i Σ_j w[o][i][j] · x[t + lookahead - j·d][i]`, zero
/// outside the input.
pub fn conv1d(x: &Seq, w: &[Vec<Vec<f64>>], b: &[f64], d: usize, lookahead: usize) -> Seq {
    let t_len = x.len() as isize;
    (0..x.len())
        .map(|t| {
            w.iter()
                .enumerate()
                .map(|(o, wo)| {
                    let mut acc = b[o];
                    for (i, wi) in wo.iter().enumerate() {
                        for (j, &wij) in wi.iter().enumerate() {
                            let s = t as isize + lookahead as isize - (j * d) as isize;
                            if s >= 0 && s < t_len {
                                acc += wij * x[s as usize][i];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Scatter form of the transposed conv: input `t` adds `w_j · x[t]` to
/// output `stride·t + j`.
pub fn transpose_conv1d(x: &Seq, w: &[Vec<Vec<f64>>], b: &[f64], stride: usize) -> Seq {
    let n = x.len() * stride;
    let mut y: Seq = (0..n).map(|_| b.to_vec()).collect();
    for (t, xt) in x.iter().enumerate() {
        for (o, wo) in w.iter().enumerate() {
            for (i, wi) in wo.iter().enumerate() {
                for (j, &wij) in wi.iter().enumerate() {
                    let p = stride * t + j;
                    if p < n {
                        y[p][o] += wij * xt[i];
                    }
                }
            }
        }
    }
    y
}

/// Channel-wise conv: `w[c][j]`.
pub fn depthwise(x: &Seq, w: &[Vec<f64>], b: &[f64], d: usize) -> Seq {
    (0..x.len())
        .map(|t| {
            w.iter()
                .enumerate()
                .map(|(c, wc)| {
                    let mut acc = b[c];
                    for (j, &wj) in wc.iter().enumerate() {
                        if let Some(s) = t.checked_sub(j * d) {
                            acc += wj * x[s][c];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub struct Gru {
    pub w: [Vec<Vec<f64>>; 3],
    pub u: [Vec<Vec<f64>>; 3],
    pub b: [Vec<f64>; 3],
}

/// Reset gate inside the candidate's recurrent term.
pub fn gru_step(g: &Gru, h: &[f64], x: &[f64]) -> Vec<f64> {
    let wx: Vec<Vec<f64>> = g.w.iter().map(|m| matvec(m, x)).collect();
    let uh: Vec<Vec<f64>> = g.u.iter().map(|m| matvec(m, h)).collect();
    (0..h.len())
        .map(|k| {
            let r = sigmoid(wx[0][k] + uh[0][k] + g.b[0][k]);
            let z = sigmoid(wx[1][k] + uh[1][k] + g.b[1][k]);
            let n = (wx[2][k] + r * (uh[2][k] + g.b[2][k])).tanh();
            (1.0 - z) * h[k] + z * n
        })
        .collect()
}

/// Blocks kept by exhaustive sorting: all `(norm, index)` pairs sorted by
/// descending norm then ascending index, first `keep` taken.
pub fn prune_blocks(m: &[Vec<f64>], target: f64) -> Vec<usize> {
    let (rows, cols) = (m.len(), m[0].len());
    let bcs = cols / 4;
    let n = (rows / 4) * bcs;
    let mut all: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let (br, bc) = (i / bcs, i % bcs);
            let mut s = 0.0;
            for r in 0..4 {
                for c in 0..4 {
                    s += m[br * 4 + r][bc * 4 + c].powi(2);
                }
            }
            (s.sqrt(), i)
        })
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    // Smallest keep with keep/n >= 1 - target, computed in integers.
    let keep = (0..=n)
        .find(|&k| (k as f64) >= (1.0 - target) * n as f64 - 1e-9)
        .unwrap();
    let mut kept: Vec<usize> = all[..keep].iter().map(|p| p.1).collect();
    kept.sort_unstable();
    kept
}

/// Mixture-of-logistics CDF of the unclamped variable.
pub fn mol_cdf(w: &[f64], mu: &[f64], s: &[f64], x: f64) -> f64 {
    w.iter()
        .zip(mu)
        .zip(s)
        .map(|((w, m), s)| w * sigmoid((x - m) / s))
        .sum()
}

pub fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Kolmogorov-Smirnov distance between a sample and a CDF with an atom at
/// each end of [-1, 1] (the sampler clamps).
pub fn ks_clamped(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let f = |x: f64| if x >= 1.0 { 1.0 } else if x < -1.0 { 0.0 } else { cdf(x) };
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < xs.len() {
        let x = xs[i];
        let mut j = i;
        while j < xs.len() && xs[j] == x {
            j += 1;
        }
        let fx = f(x);
        // Left limit of F at x: the atoms at -1 and +1 make F jump there.
        let fx_left = if x <= -1.0 { 0.0 } else { cdf(x) };
        d = d.max((j as f64 / n - fx).abs()).max((i as f64 / n - fx_left).abs());
        i = j;
    }
    d
}

/// Composite Simpson rule on `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Zero-mean SI-SNR in dB, uncapped.
pub fn si_snr(e: &[f64], r: &[f64]) -> f64 {
    let me = e.iter().sum::<f64>() / e.len() as f64;
    let mr = r.iter().sum::<f64>() / r.len() as f64;
    let e: Vec<f64> = e.iter().map(|v| v - me).collect();
    let r: Vec<f64> = r.iter().map(|v| v - mr).collect();
    let a = e.iter().zip(&r).map(|(x, y)| x * y).sum::<f64>() / r.iter().map(|v| v * v).sum::<f64>();
    let t: f64 = r.iter().map(|v| (a * v).powi(2)).sum();
    let n: f64 = e.iter().zip(&r).map(|(x, y)| (x - a * y).powi(2)).sum();
    10.0 * (t / n).log10()
}

pub fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}
