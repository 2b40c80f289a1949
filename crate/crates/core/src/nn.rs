//! Trainable layers over the tape: parameter store, 3-layer MLPs, a GRU
//! cell, the Adam optimizer, Gumbel-softmax sampling, and a central
//! finite-difference gradient checker.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::SeedRng;
use crate::scalar::{Real, Scalar};
use crate::tensor::Tensor;

/// Ordered map from dot-separated parameter paths to tensors.
///
/// Iteration order is registration order, which makes checkpoints, Adam
/// state, and gradient export deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<S = Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter '{name}'")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        let id = self.id(name)?;
        Ok(&mut self.tensors[id])
    }

    pub fn by_id(&self, id: usize) -> &Tensor<S> {
        &self.tensors[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Tensor<S> {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    /// Zero every gradient buffer (allocating missing ones).
    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.ensure_grad();
            t.zero_grad();
        }
    }

    /// True if at least one parameter has a gradient buffer.
    pub fn has_grads(&self) -> bool {
        self.tensors.iter().any(|t| t.grad.is_some())
    }

    /// Load a parameter leaf onto a graph.
    pub fn leaf(&self, g: &mut Graph<S>, name: &str) -> Result<Var> {
        let id = self.id(name)?;
        Ok(g.param_leaf(id, &self.tensors[id]))
    }

    /// After `g.backward(..)`: zero all grads, then accumulate the graph's
    /// parameter-leaf gradients. Parameters unreachable from the loss are
    /// left with zero gradients.
    pub fn absorb_grads(&mut self, g: &Graph<S>) {
        self.zero_grads();
        g.for_each_param_grad(|id, grad| {
            let dst = self.tensors[id].ensure_grad();
            for (d, &x) in dst.iter_mut().zip(grad) {
                *d += x;
            }
        });
    }

    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        let mut out = ParameterStore::new();
        for (name, t) in self.iter() {
            out.insert(name, t.cast()).expect("names stay unique");
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Weight init: Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); biases zero.
pub fn init_linear<S: Scalar>(
    ps: &mut ParameterStore<S>,
    rng: &mut SeedRng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w: Vec<S> = (0..fan_in * fan_out)
        .map(|_| S::of(rng.range(-bound, bound)))
        .collect();
    ps.insert(
        format!("{name}.w"),
        Tensor::from_vec(&[fan_in, fan_out], w)?,
    )?;
    ps.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))?;
    Ok(())
}

/// Register an MLP with the given width chain (e.g. `[in, h, h, out]`).
pub fn register_mlp<S: Scalar>(
    ps: &mut ParameterStore<S>,
    rng: &mut SeedRng,
    prefix: &str,
    widths: &[usize],
) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::config(format!(
            "MLP '{prefix}' needs at least one layer, got widths {widths:?}"
        )));
    }
    for (l, pair) in widths.windows(2).enumerate() {
        init_linear(ps, rng, &format!("{prefix}.l{l}"), pair[0], pair[1])?;
    }
    Ok(())
}

/// MLP forward: linear layers with ReLU after all but the last.
/// `widths` must match the registered chain; `x` is `rows x widths[0]`.
pub fn mlp_forward<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParameterStore<S>,
    prefix: &str,
    x: Var,
    widths: &[usize],
) -> Result<Var> {
    let (_, in_cols) = g.shape(x);
    if in_cols != widths[0] {
        return Err(Error::dim(format!(
            "MLP '{prefix}': input width {in_cols} != {}",
            widths[0]
        )));
    }
    let mut h = x;
    let n_layers = widths.len() - 1;
    for l in 0..n_layers {
        let w = ps.leaf(g, &format!("{prefix}.l{l}.w"))?;
        let b = ps.leaf(g, &format!("{prefix}.l{l}.b"))?;
        let z = g.matmul(h, w)?;
        let z = g.add_bias(z, b)?;
        h = if l + 1 < n_layers { g.relu(z) } else { z };
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// GRU cell
// ---------------------------------------------------------------------------

/// Register one GRU cell: update gate z, reset gate r, candidate n.
pub fn register_gru<S: Scalar>(
    ps: &mut ParameterStore<S>,
    rng: &mut SeedRng,
    prefix: &str,
    d_in: usize,
    d_h: usize,
) -> Result<()> {
    for gate in ["z", "r", "n"] {
        init_linear(ps, rng, &format!("{prefix}.x{gate}"), d_in, d_h)?;
        init_linear(ps, rng, &format!("{prefix}.h{gate}"), d_h, d_h)?;
    }
    Ok(())
}

/// One GRU step with the convention
///
/// ```text
/// z  = sigmoid(Wxz x + Whz h + bz)
/// r  = sigmoid(Wxr x + Whr h + br)
/// n  = tanh(Wxn x + Whn (r .* h) + bn)
/// h' = (1 - z) .* n + z .* h
/// ```
///
/// Each branch carries its own bias; their sum plays the role of the single
/// per-gate bias above.
pub fn gru_step<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParameterStore<S>,
    prefix: &str,
    x: Var,
    h: Var,
) -> Result<Var> {
    let gate = |g: &mut Graph<S>, which: &str, xin: Var, hin: Var| -> Result<Var> {
        let wx = ps.leaf(g, &format!("{prefix}.x{which}.w"))?;
        let bx = ps.leaf(g, &format!("{prefix}.x{which}.b"))?;
        let wh = ps.leaf(g, &format!("{prefix}.h{which}.w"))?;
        let bh = ps.leaf(g, &format!("{prefix}.h{which}.b"))?;
        let xs = g.matmul(xin, wx)?;
        let xs = g.add_bias(xs, bx)?;
        let hs = g.matmul(hin, wh)?;
        let hs = g.add_bias(hs, bh)?;
        g.add(xs, hs)
    };
    let z_pre = gate(g, "z", x, h)?;
    let z = g.sigmoid(z_pre);
    let r_pre = gate(g, "r", x, h)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h)?;
    let n_pre = gate(g, "n", x, rh)?;
    let n = g.tanh(n_pre);
    let omz = g.one_minus(z);
    let a = g.mul(omz, n)?;
    let b = g.mul(z, h)?;
    g.add(a, b)
}

// ---------------------------------------------------------------------------
// Gumbel-softmax
// ---------------------------------------------------------------------------

/// Gumbel-softmax over rows: `softmax((logits + noise) / tau)`.
///
/// `noise` is a constant tensor of i.i.d. Gumbel(0,1) draws (reparameterized,
/// so gradients flow into `logits` only); pass `None` in evaluation mode,
/// which reduces to a tempered softmax.
pub fn gumbel_softmax<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    tau: f64,
    noise: Option<&Tensor<S>>,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Domain(format!("gumbel_softmax: tau {tau} <= 0")));
    }
    let (m, l) = g.shape(logits);
    if l < 1 {
        return Err(Error::dim("gumbel_softmax: empty logits".to_string()));
    }
    let mut z = logits;
    if let Some(gn) = noise {
        if gn.rows() != m || gn.cols() != l {
            return Err(Error::dim(format!(
                "gumbel noise {}x{} vs logits {m}x{l}",
                gn.rows(),
                gn.cols()
            )));
        }
        let nv = g.input(gn);
        z = g.add(z, nv)?;
    }
    let scaled = g.scale(z, S::of(1.0 / tau));
    Ok(g.softmax_rows(scaled))
}

/// Draw an `m x l` tensor of Gumbel(0,1) noise.
pub fn gumbel_noise<S: Scalar>(rng: &mut SeedRng, m: usize, l: usize) -> Tensor<S> {
    let data = (0..m * l).map(|_| S::of(rng.gumbel())).collect();
    Tensor {
        shape: vec![m, l],
        data,
        grad: None,
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with bias correction. Moment buffers are addressed by parameter id,
/// so the optimizer must be created against the final store layout.
#[derive(Debug, Clone)]
pub struct Adam<S = Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(ps: &ParameterStore<S>) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: ps.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect(),
            v: ps.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect(),
        }
    }

    /// Apply one update with the given learning rate; gradients are cleared
    /// (zeroed) afterwards.
    pub fn step(&mut self, ps: &mut ParameterStore<S>, lr: f64) -> Result<()> {
        if !ps.has_grads() {
            return Err(Error::contract(
                "adam_step called before any backward pass",
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let b1 = S::of(self.beta1);
        let b2 = S::of(self.beta2);
        let one_m_b1 = S::of(1.0 - self.beta1);
        let one_m_b2 = S::of(1.0 - self.beta2);
        let lr_t = S::of(lr / bc1);
        let inv_sqrt_bc2 = S::of(1.0 / bc2.sqrt());
        let eps = S::of(self.eps);

        for id in 0..ps.len() {
            let t = ps.by_id_mut(id);
            let Some(grad) = t.grad.as_ref() else {
                continue;
            };
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            for i in 0..t.data.len() {
                let gi = grad[i];
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                // p -= lr * m_hat / (sqrt(v_hat) + eps)
                let denom = (v[i]).sqrt() * inv_sqrt_bc2 + eps;
                t.data[i] = t.data[i] - lr_t * m[i] / denom;
            }
            t.zero_grad();
        }
        Ok(())
    }

    /// Export optimizer state as named tensors (for checkpoint resume).
    pub fn export(&self, ps: &ParameterStore<S>) -> Vec<(String, Tensor<S>)> {
        let mut out = vec![(
            "adam.step".to_string(),
            Tensor::scalar(S::of(self.step_count as f64)),
        )];
        for (id, (name, _)) in ps.iter().enumerate() {
            out.push((
                format!("adam.m.{name}"),
                Tensor {
                    shape: vec![self.m[id].len()],
                    data: self.m[id].clone(),
                    grad: None,
                },
            ));
            out.push((
                format!("adam.v.{name}"),
                Tensor {
                    shape: vec![self.v[id].len()],
                    data: self.v[id].clone(),
                    grad: None,
                },
            ));
        }
        out
    }

    /// Restore optimizer state exported by [`Adam::export`].
    pub fn restore(
        &mut self,
        ps: &ParameterStore<S>,
        entries: &HashMap<String, Tensor<S>>,
    ) -> Result<()> {
        let step = entries
            .get("adam.step")
            .ok_or_else(|| Error::Load("missing adam.step".to_string()))?;
        self.step_count = step.data[0].as_f64() as u64;
        for (id, (name, t)) in ps.iter().enumerate() {
            for (buf, key) in [
                (&mut self.m[id], format!("adam.m.{name}")),
                (&mut self.v[id], format!("adam.v.{name}")),
            ] {
                let src = entries
                    .get(&key)
                    .ok_or_else(|| Error::Load(format!("missing {key}")))?;
                if src.numel() != t.numel() {
                    return Err(Error::Load(format!("size mismatch for {key}")));
                }
                buf.copy_from_slice(&src.data);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Max relative error between tape gradients and central finite differences:
/// `max_i |g_ad[i] - g_fd[i]| / max(|g_fd[i]|, 1e-8)`.
///
/// `f` must rebuild the loss deterministically from the store (freeze any
/// noise by deriving it from a fixed seed). Instantiate at `f64` for tight
/// tolerances; the production engine itself stays `f32`.
pub fn finite_diff_check<S: Scalar>(
    ps: &mut ParameterStore<S>,
    eps: f64,
    f: impl FnMut(&mut Graph<S>, &ParameterStore<S>) -> Result<Var>,
) -> Result<f64> {
    finite_diff_check_multi(ps, &[eps], f)
}

/// Multi-epsilon variant for deep compositions: each parameter's relative
/// error is the minimum over the probe widths, and the maximum over
/// parameters is returned.
///
/// A single width cannot verify every parameter of a deep ReLU network: wide
/// probes step across kinks, narrow probes drown near-zero gradients in f64
/// cancellation noise. A genuine gradient bug disagrees at every width; a
/// width artifact does not.
pub fn finite_diff_check_multi<S: Scalar>(
    ps: &mut ParameterStore<S>,
    epsilons: &[f64],
    mut f: impl FnMut(&mut Graph<S>, &ParameterStore<S>) -> Result<Var>,
) -> Result<f64> {
    if epsilons.is_empty() {
        return Err(Error::contract("finite_diff_check needs a probe width"));
    }
    // Analytic gradients.
    let mut g = Graph::new();
    let loss = f(&mut g, ps)?;
    let l0 = g.scalar_value(loss)?;
    if !l0.is_finite() {
        return Err(Error::numeric("finite_diff_check: non-finite loss"));
    }
    g.backward(loss)?;
    ps.absorb_grads(&g);
    let analytic: Vec<Vec<S>> = (0..ps.len())
        .map(|id| ps.by_id(id).grad.clone().unwrap_or_default())
        .collect();

    let mut max_rel = 0.0f64;
    for id in 0..ps.len() {
        for i in 0..ps.by_id(id).numel() {
            let orig = ps.by_id(id).data[i];
            let ad = analytic[id][i].as_f64();
            let mut best = f64::INFINITY;
            for &eps in epsilons {
                ps.by_id_mut(id).data[i] = orig + S::of(eps);
                let mut gp = Graph::new();
                let lp = f(&mut gp, ps)?;
                let lp = gp.scalar_value(lp)?.as_f64();
                ps.by_id_mut(id).data[i] = orig - S::of(eps);
                let mut gm = Graph::new();
                let lm = f(&mut gm, ps)?;
                let lm = gm.scalar_value(lm)?.as_f64();
                ps.by_id_mut(id).data[i] = orig;
                if !lp.is_finite() || !lm.is_finite() {
                    return Err(Error::numeric("finite_diff_check: non-finite probe loss"));
                }
                let fd = (lp - lm) / (2.0 * eps);
                let rel = (ad - fd).abs() / fd.abs().max(1e-8);
                if rel < best {
                    best = rel;
                }
            }
            if best > max_rel {
                max_rel = best;
            }
        }
    }
    Ok(max_rel)
}
