//! Hypergraph neural message passing with the three-element interaction
//! representation.
//!
//! Per scale, a node-to-hyperedge phase aggregates member embeddings into an
//! interaction embedding `e = r * sum_l c_l F_l(sum_j v_j)` — where the
//! strength `r` and category distribution `c` are read off a collective
//! (weighted) embedding `z` — and a hyperedge-to-node phase updates each
//! agent from its incident interactions. Trainable layers are never shared
//! across scales; agent embeddings are re-initialized to `q_i` at every
//! scale and the per-scale results are concatenated.
//!
//! All functions operate on batched rows: `R = n_scenes * n_agents` agent
//! rows, `M = n_scenes * M_s` hyperedge rows per scale.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{gumbel_noise, gumbel_softmax, mlp_forward, register_mlp, ParameterStore};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::topology::{affinity, infer_multiscale, MultiscaleHypergraph, Solver};

/// Message-passing hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NmpConfig {
    /// Embedding width `d`.
    pub d: usize,
    /// Hidden width of all 3-layer MLPs.
    pub hidden: usize,
    /// Number of latent interaction categories `L`.
    pub l_categories: usize,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    /// Message-passing iterations per scale.
    pub iters: usize,
}

impl NmpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Domain(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.iters < 1 {
            return Err(Error::config("iters must be >= 1"));
        }
        if self.l_categories < 1 {
            return Err(Error::config("l_categories must be >= 1"));
        }
        if self.d < 1 || self.hidden < 1 {
            return Err(Error::config("d and hidden must be >= 1"));
        }
        Ok(())
    }

    fn w_widths(&self) -> Vec<usize> {
        vec![2 * self.d, self.hidden, self.hidden, 1]
    }
    fn r_widths(&self) -> Vec<usize> {
        vec![self.d, self.hidden, self.hidden, 1]
    }
    fn c_widths(&self) -> Vec<usize> {
        vec![self.d, self.hidden, self.hidden, self.l_categories]
    }
    fn l_widths(&self) -> Vec<usize> {
        vec![self.d, self.hidden, self.hidden, self.d]
    }
    fn v_widths(&self) -> Vec<usize> {
        vec![2 * self.d, self.hidden, self.hidden, self.d]
    }
}

/// Gumbel noise source: `On` draws fresh noise per head application
/// (training), `Off` yields tempered softmax (evaluation / frozen checks).
pub enum Noise<'a> {
    Off,
    On(&'a mut SeedRng),
}

impl Noise<'_> {
    fn draw<S: Scalar>(&mut self, m: usize, l: usize) -> Option<Tensor<S>> {
        match self {
            Noise::Off => None,
            Noise::On(rng) => Some(gumbel_noise(rng, m, l)),
        }
    }
}

/// Register the unshared per-scale subtrees (`f_w`, `f_r`, `f_c`,
/// `f_l{0..L}`, `f_v`) for `n_scales` scales plus the shared trajectory
/// embedding `f_q`.
pub fn register_encoder<S: Scalar>(
    ps: &mut ParameterStore<S>,
    rng: &mut SeedRng,
    prefix: &str,
    cfg: &NmpConfig,
    input_width: usize,
    n_scales: usize,
) -> Result<()> {
    cfg.validate()?;
    register_mlp(
        ps,
        rng,
        &format!("{prefix}.f_q"),
        &[input_width, cfg.hidden, cfg.hidden, cfg.d],
    )?;
    // The affinity step rejects zero-norm embeddings, and an all-dead ReLU
    // layer at step 0 would produce exactly that with a zero output bias.
    // f_q's output bias therefore starts at small nonzero values.
    {
        let bound = 1.0 / (cfg.hidden as f64).sqrt();
        let b = ps.get_mut(&format!("{prefix}.f_q.l2.b"))?;
        for x in b.data.iter_mut() {
            *x = S::of(rng.range(-bound, bound));
        }
    }
    for s in 0..n_scales {
        let sp = format!("{prefix}.s{s}");
        register_mlp(ps, rng, &format!("{sp}.f_w"), &cfg.w_widths())?;
        // Contribution weights start at ~1 so the collective embedding opens
        // as the plain member sum; a zero-mean init leaves z (and with it the
        // strength/category heads) without signal at the start of training.
        ps.get_mut(&format!("{sp}.f_w.l2.b"))?.data = vec![S::one()];
        register_mlp(ps, rng, &format!("{sp}.f_r"), &cfg.r_widths())?;
        register_mlp(ps, rng, &format!("{sp}.f_c"), &cfg.c_widths())?;
        for l in 0..cfg.l_categories {
            register_mlp(ps, rng, &format!("{sp}.f_l{l}"), &cfg.l_widths())?;
        }
        // Symmetric expert inits route scenes by the experts' arbitrary
        // initial differences, which splits within interaction types instead
        // of between them. Starting the last category function as the null
        // message breaks the tie the way a "no interaction" type would:
        // weak groups prefer it, strong groups prefer an active expert.
        if cfg.l_categories > 1 {
            let name = format!("{sp}.f_l{}.l2.w", cfg.l_categories - 1);
            let t = ps.get_mut(&name)?;
            t.data.iter_mut().for_each(|x| *x = S::zero());
        }
        register_mlp(ps, rng, &format!("{sp}.f_v"), &cfg.v_widths())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Batched topology index structures
// ---------------------------------------------------------------------------

/// Tape-ready index lists for one scale of a scene batch. Member indices are
/// global rows (`scene * n_agents + agent`).
#[derive(Debug, Clone)]
pub struct BatchScale {
    pub group_size: usize,
    /// Hyperedge membership, scene-major. `edges_per_scene` per scene.
    pub hyperedges: Vec<Vec<usize>>,
    pub edges_per_scene: usize,
    member_groups: Rc<Vec<Vec<usize>>>,
    pair_rows: Rc<Vec<usize>>,
    pair_edge: Rc<Vec<usize>>,
    pair_groups: Rc<Vec<Vec<usize>>>,
    incident_groups: Rc<Vec<Vec<usize>>>,
}

impl BatchScale {
    /// Build index structures from global-row hyperedges.
    pub fn new(
        hyperedges: Vec<Vec<usize>>,
        edges_per_scene: usize,
        group_size: usize,
        n_rows: usize,
    ) -> Result<Self> {
        let mut pair_rows = Vec::new();
        let mut pair_edge = Vec::new();
        let mut pair_groups = Vec::with_capacity(hyperedges.len());
        let mut incident_groups = vec![Vec::new(); n_rows];
        for (j, edge) in hyperedges.iter().enumerate() {
            if edge.is_empty() {
                return Err(Error::contract("empty hyperedge"));
            }
            let start = pair_rows.len();
            for &row in edge {
                if row >= n_rows {
                    return Err(Error::dim(format!("hyperedge row {row} >= {n_rows}")));
                }
                pair_rows.push(row);
                pair_edge.push(j);
                incident_groups[row].push(j);
            }
            pair_groups.push((start..pair_rows.len()).collect());
        }
        Ok(BatchScale {
            group_size,
            hyperedges: hyperedges.clone(),
            edges_per_scene,
            member_groups: Rc::new(hyperedges),
            pair_rows: Rc::new(pair_rows),
            pair_edge: Rc::new(pair_edge),
            pair_groups: Rc::new(pair_groups),
            incident_groups: Rc::new(incident_groups),
        })
    }

    pub fn n_edges(&self) -> usize {
        self.hyperedges.len()
    }
}

/// All scales of a scene batch.
#[derive(Debug, Clone)]
pub struct BatchTopology {
    pub n_scenes: usize,
    pub n_agents: usize,
    pub scales: Vec<BatchScale>,
    /// Per-scene hypergraphs in scene-local indices (for reports/probes).
    pub per_scene: Vec<MultiscaleHypergraph>,
}

impl BatchTopology {
    /// Offset per-scene hypergraphs into global rows.
    pub fn from_scenes(scenes: Vec<MultiscaleHypergraph>, n_agents: usize) -> Result<Self> {
        let n_scenes = scenes.len();
        if n_scenes == 0 {
            return Err(Error::contract("empty scene batch"));
        }
        let n_scales = scenes[0].scales.len();
        let n_rows = n_scenes * n_agents;
        let mut scales = Vec::with_capacity(n_scales);
        for s in 0..n_scales {
            let group_size = scenes[0].scales[s].group_size;
            let edges_per_scene = scenes[0].scales[s].hyperedges.len();
            let mut hyperedges = Vec::with_capacity(n_scenes * edges_per_scene);
            for (b, scene) in scenes.iter().enumerate() {
                let topo = &scene.scales[s];
                if topo.group_size != group_size || topo.hyperedges.len() != edges_per_scene {
                    return Err(Error::dim(
                        "inconsistent per-scene topology in batch".to_string(),
                    ));
                }
                for edge in &topo.hyperedges {
                    hyperedges.push(edge.iter().map(|&i| b * n_agents + i).collect());
                }
            }
            scales.push(BatchScale::new(
                hyperedges,
                edges_per_scene,
                group_size,
                n_rows,
            )?);
        }
        Ok(BatchTopology {
            n_scenes,
            n_agents,
            scales,
            per_scene: scenes,
        })
    }
}

/// Where the hypergraph comes from during a forward pass.
pub enum TopoSource<'a> {
    /// Infer per scene from detached `f_Q` embeddings.
    Infer {
        n_agents: usize,
        k0: usize,
        scale_sizes: &'a [usize],
        solver: Solver,
    },
    /// Reuse a prebuilt topology (fixed-topology training or checks).
    Given(Rc<BatchTopology>),
}

// ---------------------------------------------------------------------------
// Message-passing phases
// ---------------------------------------------------------------------------

/// Interaction tape nodes of one scale (final iteration).
#[derive(Debug, Clone)]
pub struct ScaleVars {
    pub group_size: usize,
    /// collective embedding `z`: `M x d`
    pub z: Var,
    /// strength `r`: `M x 1`
    pub r: Var,
    /// category distribution `c`: `M x L`
    pub c: Var,
    /// interaction embedding `e`: `M x d`
    pub e: Var,
}

/// Collective embeddings for every hyperedge of a scale:
/// `z_j = sum_m w_m v_m` with `w_m = F_w([v_m, sum_m v_m])`.
/// Returns `(z: M x d, w: P x 1)` where `P` is the member-slot count.
pub fn collective_embeddings<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParameterStore<S>,
    scale_prefix: &str,
    cfg: &NmpConfig,
    v: Var,
    topo: &BatchScale,
) -> Result<(Var, Var)> {
    let sum_v = g.indexed_sum(v, Rc::clone(&topo.member_groups))?;
    let v_mem = g.gather_rows(v, Rc::clone(&topo.pair_rows))?;
    let sum_for_pair = g.gather_rows(sum_v, Rc::clone(&topo.pair_edge))?;
    let w_in = g.concat_cols(&[v_mem, sum_for_pair])?;
    let w = mlp_forward(g, ps, &format!("{scale_prefix}.f_w"), w_in, &cfg.w_widths())?;
    let wv = g.row_scale(v_mem, w)?;
    let z = g.indexed_sum(wv, Rc::clone(&topo.pair_groups))?;
    Ok((z, w))
}

/// Single-hyperedge view of [`collective_embeddings`]: `members` is `m x d`.
pub fn collective_embedding<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParameterStore<S>,
    scale_prefix: &str,
    cfg: &NmpConfig,
    members: Var,
) -> Result<(Var, Var)> {
    let (m, _) = g.shape(members);
    if m == 0 {
        return Err(Error::contract("collective_embedding of empty member set"));
    }
    let topo = BatchScale::new(vec![(0..m).collect()], 1, m, m)?;
    collective_embeddings(g, ps, scale_prefix, cfg, members, &topo)
}

/// Strength and category heads on collective embeddings `z` (`M x d`):
/// `r = sigmoid(F_r(z))`, `c = gumbel_softmax(F_c(z), tau)`.
pub fn relational_heads<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParameterStore<S>,
    scale_prefix: &str,
    cfg: &NmpConfig,
    z: Var,
    noise: &mut Noise,
) -> Result<(Var, Var)> {
    let (m, _) = g.shape(z);
    let r_pre = mlp_forward(g, ps, &format!("{scale_prefix}.f_r"), z, &cfg.r_widths())?;
    let r = g.sigmoid(r_pre);
    let logits = mlp_forward(g, ps, &format!("{scale_prefix}.f_c"), z, &cfg.c_widths())?;
    let noise_t = noise.draw::<S>(m, cfg.l_categories);
    let c = gumbel_softmax(g, logits, cfg.tau, noise_t.as_ref())?;
    Ok((r, c))
}

/// Node-to-hyperedge phase over all hyperedges of one scale:
/// `e = r * sum_l c_l F_l(sum_j v_j)`.
pub fn node_to_hyperedge_phase<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParameterStore<S>,
    scale_prefix: &str,
    cfg: &NmpConfig,
    v: Var,
    topo: &BatchScale,
    noise: &mut Noise,
) -> Result<ScaleVars> {
    let sum_v = g.indexed_sum(v, Rc::clone(&topo.member_groups))?;
    let (z, _w) = collective_embeddings(g, ps, scale_prefix, cfg, v, topo)?;
    let (r, c) = relational_heads(g, ps, scale_prefix, cfg, z, noise)?;
    let mut msg: Option<Var> = None;
    for l in 0..cfg.l_categories {
        let fl = mlp_forward(
            g,
            ps,
            &format!("{scale_prefix}.f_l{l}"),
            sum_v,
            &cfg.l_widths(),
        )?;
        let cl = g.slice_cols(c, l, 1)?;
        let part = g.row_scale(fl, cl)?;
        msg = Some(match msg {
            None => part,
            Some(acc) => g.add(acc, part)?,
        });
    }
    let e = g.row_scale(msg.expect("l_categories >= 1"), r)?;
    Ok(ScaleVars {
        group_size: topo.group_size,
        z,
        r,
        c,
        e,
    })
}

/// Single-hyperedge view of the node-to-hyperedge phase (spec operation):
/// `members` is `m x d`, the result's `e` is `1 x d`.
pub fn node_to_hyperedge<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParameterStore<S>,
    scale_prefix: &str,
    cfg: &NmpConfig,
    members: Var,
    noise: &mut Noise,
) -> Result<ScaleVars> {
    let (m, _) = g.shape(members);
    if m == 0 {
        return Err(Error::contract("node_to_hyperedge of empty member set"));
    }
    let topo = BatchScale::new(vec![(0..m).collect()], 1, m, m)?;
    node_to_hyperedge_phase(g, ps, scale_prefix, cfg, members, &topo, noise)
}

/// Hyperedge-to-node phase: `v_i <- f_v([v_i, sum_{e_j owns i} e_j])`.
/// Nodes in no hyperedge aggregate a zero row.
pub fn hyperedge_to_node_phase<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParameterStore<S>,
    scale_prefix: &str,
    cfg: &NmpConfig,
    v: Var,
    e: Var,
    topo: &BatchScale,
) -> Result<Var> {
    let inc = g.indexed_sum(e, Rc::clone(&topo.incident_groups))?;
    let v_in = g.concat_cols(&[v, inc])?;
    mlp_forward(g, ps, &format!("{scale_prefix}.f_v"), v_in, &cfg.v_widths())
}

/// Run one scale for `cfg.iters` alternations of the two phases, starting
/// from `v0`. Returns the final node embeddings and the last iteration's
/// interaction nodes.
pub fn run_scale<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParameterStore<S>,
    scale_prefix: &str,
    cfg: &NmpConfig,
    v0: Var,
    topo: &BatchScale,
    noise: &mut Noise,
) -> Result<(Var, ScaleVars)> {
    let (rows, _) = g.shape(v0);
    if let Some(&bad) = topo.pair_rows.iter().find(|&&r| r >= rows) {
        return Err(Error::dim(format!(
            "topology row {bad} out of {rows} node rows"
        )));
    }
    let mut v = v0;
    let mut last = None;
    for _ in 0..cfg.iters {
        let vars = node_to_hyperedge_phase(g, ps, scale_prefix, cfg, v, topo, noise)?;
        v = hyperedge_to_node_phase(g, ps, scale_prefix, cfg, v, vars.e, topo)?;
        last = Some(vars);
    }
    Ok((v, last.expect("iters >= 1")))
}

// ---------------------------------------------------------------------------
// Full encoder
// ---------------------------------------------------------------------------

/// Everything a forward pass produces besides the loss: the concatenated
/// agent representation and, per scale, the interaction nodes of the final
/// message-passing iteration.
pub struct EncoderOutput {
    /// `R x d(S+1)` concatenated agent embeddings.
    pub v: Var,
    /// `R x d` trajectory embeddings `q` (the shared initialization).
    pub q: Var,
    pub per_scale: Vec<ScaleVars>,
    pub topology: Rc<BatchTopology>,
}

/// Full multiscale encoder: embed trajectories, obtain a topology, run every
/// scale from `v = q`, concatenate scale outputs.
///
/// `traj` is `R x 2T` (scene-major agent rows, flattened coordinates).
pub fn encoder_forward<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParameterStore<S>,
    prefix: &str,
    cfg: &NmpConfig,
    traj: &Tensor<S>,
    topo_source: TopoSource,
    noise: &mut Noise,
) -> Result<EncoderOutput> {
    cfg.validate()?;
    let t2 = traj.cols();
    let rows = traj.rows();
    let widths = [t2, cfg.hidden, cfg.hidden, cfg.d];
    let x = g.input(traj);
    let q = mlp_forward(g, ps, &format!("{prefix}.f_q"), x, &widths)?;

    let topology: Rc<BatchTopology> = match topo_source {
        TopoSource::Given(t) => {
            if t.n_scenes * t.n_agents != rows {
                return Err(Error::dim(format!(
                    "topology covers {} rows, input has {rows}",
                    t.n_scenes * t.n_agents
                )));
            }
            t
        }
        TopoSource::Infer {
            n_agents,
            k0,
            scale_sizes,
            solver,
        } => {
            if n_agents == 0 || rows % n_agents != 0 {
                return Err(Error::dim(format!(
                    "{rows} rows do not split into scenes of {n_agents} agents"
                )));
            }
            // Infer per scene from detached embedding values.
            let q_data = g.data(q);
            let d = cfg.d;
            let n_scenes = rows / n_agents;
            let mut scenes = Vec::with_capacity(n_scenes);
            for b in 0..n_scenes {
                let q64: Vec<f64> = q_data[b * n_agents * d..(b + 1) * n_agents * d]
                    .iter()
                    .map(|x| x.as_f64())
                    .collect();
                let a = affinity(&q64, n_agents, d)?;
                scenes.push(infer_multiscale(&a, k0, scale_sizes, solver)?);
            }
            Rc::new(BatchTopology::from_scenes(scenes, n_agents)?)
        }
    };

    let mut per_scale = Vec::with_capacity(topology.scales.len());
    let mut outputs = Vec::with_capacity(topology.scales.len());
    for (s, scale) in topology.scales.iter().enumerate() {
        let sp = format!("{prefix}.s{s}");
        let (v_s, vars) = run_scale(g, ps, &sp, cfg, q, scale, noise)?;
        outputs.push(v_s);
        per_scale.push(vars);
    }
    let v = g.concat_cols(&outputs)?;
    Ok(EncoderOutput {
        v,
        q,
        per_scale,
        topology,
    })
}

// ---------------------------------------------------------------------------
// Interaction extraction (reasoning probes, `reason` CLI)
// ---------------------------------------------------------------------------

/// Detached interaction values of one hyperedge.
#[derive(Debug, Clone, serde::Serialize)]
pub struct HyperedgeInteraction {
    pub members: Vec<usize>,
    pub r: f64,
    pub c: Vec<f64>,
}

/// Interactions of one scale of one scene.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ScaleInteractions {
    #[serde(rename = "K")]
    pub k: usize,
    pub hyperedges: Vec<HyperedgeInteraction>,
}

/// Read the final-iteration interaction values for one scene of the batch.
pub fn extract_interactions<S: Scalar>(
    g: &Graph<S>,
    out: &EncoderOutput,
    scene: usize,
) -> Vec<ScaleInteractions> {
    let n_agents = out.topology.n_agents;
    let mut scales = Vec::with_capacity(out.per_scale.len());
    for (vars, batch_scale) in out.per_scale.iter().zip(&out.topology.scales) {
        let m_s = batch_scale.edges_per_scene;
        let l = g.shape(vars.c).1;
        let r_data = g.data(vars.r);
        let c_data = g.data(vars.c);
        let mut hyperedges = Vec::with_capacity(m_s);
        for j in scene * m_s..(scene + 1) * m_s {
            let members: Vec<usize> = batch_scale.hyperedges[j]
                .iter()
                .map(|&row| row - scene * n_agents)
                .collect();
            hyperedges.push(HyperedgeInteraction {
                members,
                r: r_data[j].as_f64(),
                c: c_data[j * l..(j + 1) * l].iter().map(|x| x.as_f64()).collect(),
            });
        }
        scales.push(ScaleInteractions {
            k: vars.group_size,
            hyperedges,
        });
    }
    scales
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::tags;
    use crate::tensor::matmul_acc;

    fn cfg(d: usize, hidden: usize, l: usize) -> NmpConfig {
        NmpConfig {
            d,
            hidden,
            l_categories: l,
            tau: 0.5,
            iters: 1,
        }
    }

    fn zero_scale_params(ps: &mut ParameterStore<f64>, prefix: &str, c: &NmpConfig) {
        let chains: Vec<(String, Vec<usize>)> = std::iter::empty()
            .chain([(format!("{prefix}.f_w"), c.w_widths())])
            .chain([(format!("{prefix}.f_r"), c.r_widths())])
            .chain([(format!("{prefix}.f_c"), c.c_widths())])
            .chain((0..c.l_categories).map(|l| (format!("{prefix}.f_l{l}"), c.l_widths())))
            .chain([(format!("{prefix}.f_v"), c.v_widths())])
            .collect();
        for (p, widths) in chains {
            for (l, pair) in widths.windows(2).enumerate() {
                ps.insert(format!("{p}.l{l}.w"), Tensor::zeros(&[pair[0], pair[1]]))
                    .unwrap();
                ps.insert(format!("{p}.l{l}.b"), Tensor::zeros(&[1, pair[1]]))
                    .unwrap();
            }
        }
    }

    fn random_scale_params(prefix: &str, c: &NmpConfig, seed: u64) -> ParameterStore<f64> {
        let mut ps = ParameterStore::new();
        let mut rng = SeedRng::new(seed).substream(tags::PARAM_INIT, 0);
        register_mlp(&mut ps, &mut rng, &format!("{prefix}.f_w"), &c.w_widths()).unwrap();
        register_mlp(&mut ps, &mut rng, &format!("{prefix}.f_r"), &c.r_widths()).unwrap();
        register_mlp(&mut ps, &mut rng, &format!("{prefix}.f_c"), &c.c_widths()).unwrap();
        for l in 0..c.l_categories {
            register_mlp(&mut ps, &mut rng, &format!("{prefix}.f_l{l}"), &c.l_widths()).unwrap();
        }
        register_mlp(&mut ps, &mut rng, &format!("{prefix}.f_v"), &c.v_widths()).unwrap();
        ps
    }

    #[test]
    fn collective_embedding_symmetry_and_shapes() {
        let c = cfg(4, 8, 2);
        let ps = random_scale_params("s", &c, 7);
        let mut g = Graph::<f64>::new();
        // three identical members -> equal weights, z = (sum w) * v
        let v_one = vec![0.3, -0.7, 1.1, 0.2];
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(&v_one);
        }
        let members = g.input_from(3, 4, data);
        let (z, w) = collective_embedding(&mut g, &ps, "s", &c, members).unwrap();
        assert_eq!(g.shape(z), (1, 4));
        assert_eq!(g.shape(w), (3, 1));
        let wv = g.data(w).to_vec();
        assert!((wv[0] - wv[1]).abs() < 1e-12 && (wv[1] - wv[2]).abs() < 1e-12);
        let wsum: f64 = wv.iter().sum();
        for (zi, vi) in g.data(z).iter().zip(&v_one) {
            assert!((zi - wsum * vi).abs() < 1e-9);
        }
    }

    #[test]
    fn collective_embedding_permutation_invariant() {
        let c = cfg(4, 8, 2);
        let ps = random_scale_params("s", &c, 11);
        let rows = vec![
            vec![0.5, -0.2, 0.9, 0.1],
            vec![-1.0, 0.3, 0.0, 0.7],
            vec![0.2, 0.2, -0.4, 1.5],
        ];
        let run = |order: &[usize]| {
            let mut g = Graph::<f64>::new();
            let data: Vec<f64> = order.iter().flat_map(|&i| rows[i].clone()).collect();
            let members = g.input_from(3, 4, data);
            let (z, _) = collective_embedding(&mut g, &ps, "s", &c, members).unwrap();
            g.data(z).to_vec()
        };
        let a = run(&[0, 1, 2]);
        let b = run(&[2, 1, 0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn collective_embedding_rejects_empty() {
        let c = cfg(4, 8, 2);
        let ps = random_scale_params("s", &c, 3);
        let mut g = Graph::<f64>::new();
        let members = g.input_from(0, 4, vec![]);
        assert!(matches!(
            collective_embedding(&mut g, &ps, "s", &c, members),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn relational_heads_zero_params() {
        let c = cfg(4, 8, 3);
        let mut ps = ParameterStore::<f64>::new();
        zero_scale_params(&mut ps, "s", &c);
        let mut g = Graph::<f64>::new();
        let z = g.input_from(2, 4, vec![0.5; 8]);
        let mut noise = Noise::Off;
        let c2 = NmpConfig { tau: 1.0, ..c };
        let (r, cv) = relational_heads(&mut g, &ps, "s", &c2, z, &mut noise).unwrap();
        // F_r(z) = 0 -> r = 0.5; uniform categories
        for &x in g.data(r) {
            assert!((x - 0.5).abs() < 1e-12);
        }
        for &x in g.data(cv) {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn node_to_hyperedge_identity_case() {
        // L = 1, every f_l layer identity, f_r zero (r = 0.5):
        // e = 0.5 * sum(v) for positive sums.
        let c = cfg(2, 2, 1);
        let mut ps = ParameterStore::<f64>::new();
        zero_scale_params(&mut ps, "s", &c);
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        for l in 0..3 {
            ps.get_mut(&format!("s.f_l0.l{l}.w")).unwrap().data = eye.data.clone();
        }
        let mut g = Graph::<f64>::new();
        let members = g.input_from(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let mut noise = Noise::Off;
        let vars = node_to_hyperedge(&mut g, &ps, "s", &c, members, &mut noise).unwrap();
        let e = g.data(vars.e);
        assert!((e[0] - 2.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn node_to_hyperedge_strength_gates_to_zero() {
        let c = cfg(3, 4, 2);
        let mut ps = random_scale_params("s", &c, 21);
        // push the strength head's final bias to -40: r = sigmoid(-40) ~ 4e-18
        ps.get_mut("s.f_r.l2.b").unwrap().data = vec![-40.0];
        let mut g = Graph::<f64>::new();
        let members = g.input_from(2, 3, vec![0.4, -0.1, 0.9, 1.2, 0.3, -0.5]);
        let mut noise = Noise::Off;
        let vars = node_to_hyperedge(&mut g, &ps, "s", &c, members, &mut noise).unwrap();
        assert!(g.data(vars.e).iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn node_to_hyperedge_one_hot_selects_category() {
        let c = NmpConfig { tau: 0.01, ..cfg(3, 4, 2) };
        let mut ps = random_scale_params("s", &c, 33);
        // force category 0: logits bias (+20, 0), tau 0.01 -> c = (1, 0) exactly
        ps.get_mut("s.f_c.l2.b").unwrap().data = vec![20.0, 0.0];
        let mut g = Graph::<f64>::new();
        let members = g.input_from(2, 3, vec![0.4, -0.1, 0.9, 1.2, 0.3, -0.5]);
        let mut noise = Noise::Off;
        let vars = node_to_hyperedge(&mut g, &ps, "s", &c, members, &mut noise).unwrap();
        assert_eq!(g.data(vars.c), &[1.0, 0.0]);
        // e must equal r * F_0(sum v) computed by hand
        let sum_v = [1.6, 0.2, 0.4];
        let f0 = eval_mlp(&ps, "s.f_l0", &c.l_widths(), &sum_v);
        let r = g.data(vars.r)[0];
        for (ei, fi) in g.data(vars.e).iter().zip(&f0) {
            assert!((ei - r * fi).abs() < 1e-12);
        }
    }

    #[test]
    fn hyperedge_to_node_handles_isolated_nodes() {
        let c = cfg(3, 4, 2);
        let ps = random_scale_params("s", &c, 5);
        // 3 nodes, one hyperedge {0, 1}; node 2 is isolated
        let topo = BatchScale::new(vec![vec![0, 1]], 1, 2, 3).unwrap();
        let mut g = Graph::<f64>::new();
        let v = g.input_from(3, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6, 0.7, 0.8, 0.9]);
        let e = g.input_from(1, 3, vec![1.0, -2.0, 0.5]);
        let out = hyperedge_to_node_phase(&mut g, &ps, "s", &c, v, e, &topo).unwrap();
        assert_eq!(g.shape(out), (3, 3));
        // isolated node's update must equal f_v([v_2, 0])
        let mut expect_in = vec![0.7, 0.8, 0.9, 0.0, 0.0, 0.0];
        let expect = eval_mlp(&ps, "s.f_v", &c.v_widths(), &expect_in);
        let got = &g.data(out)[6..9];
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        expect_in.truncate(6);
    }

    #[test]
    fn run_scale_shapes_and_locality() {
        let c = cfg(4, 6, 2);
        let ps = random_scale_params("s", &c, 9);
        let topo = BatchScale::new(vec![vec![0, 1], vec![1, 3]], 2, 2, 4).unwrap();
        let base = vec![
            0.1, 0.2, 0.3, 0.4, //
            -0.5, 0.6, -0.7, 0.8, //
            0.9, -1.0, 1.1, -1.2, //
            0.25, 0.5, 0.75, 1.0,
        ];
        let run = |data: Vec<f64>| {
            let mut g = Graph::<f64>::new();
            let v0 = g.input_from(4, 4, data);
            let mut noise = Noise::Off;
            let (v, _) = run_scale(&mut g, &ps, "s", &c, v0, &topo, &mut noise).unwrap();
            assert_eq!(g.shape(v), (4, 4));
            g.data(v).to_vec()
        };
        let a = run(base.clone());
        // disconnected node 2: changing other nodes must not affect its row
        let mut altered = base.clone();
        altered[0] = 5.0;
        altered[13] = -3.0;
        let b = run(altered);
        assert_eq!(&a[8..12], &b[8..12]);
        assert_ne!(&a[0..4], &b[0..4]);
    }

    #[test]
    fn encoder_forward_shapes_and_single_scale() {
        let c = NmpConfig { iters: 2, ..cfg(8, 8, 2) };
        let t_past = 5;
        let mut ps = ParameterStore::<f64>::new();
        let mut rng = SeedRng::new(77).substream(tags::PARAM_INIT, 0);
        // S = 2 group scales + pairwise = 3 scale subtrees
        register_encoder(&mut ps, &mut rng, "enc", &c, 2 * t_past, 3).unwrap();
        let mut draw = SeedRng::new(1);
        let traj = Tensor::<f64>::from_vec(
            &[6, 2 * t_past],
            (0..6 * 2 * t_past).map(|_| draw.normal()).collect(),
        )
        .unwrap();
        let mut g = Graph::<f64>::new();
        let mut noise = Noise::Off;
        let out = encoder_forward(
            &mut g,
            &ps,
            "enc",
            &c,
            &traj,
            TopoSource::Infer {
                n_agents: 6,
                k0: 5,
                scale_sizes: &[2, 3],
                solver: Solver::Exact,
            },
            &mut noise,
        )
        .unwrap();
        // width d * (S + 1) = 8 * 3
        assert_eq!(g.shape(out.v), (6, 24));
        assert_eq!(out.per_scale.len(), 3);

        // pairwise-only encoder: width d
        let mut ps1 = ParameterStore::<f64>::new();
        let mut rng1 = SeedRng::new(77).substream(tags::PARAM_INIT, 0);
        register_encoder(&mut ps1, &mut rng1, "enc", &c, 2 * t_past, 1).unwrap();
        let mut g1 = Graph::<f64>::new();
        let mut noise1 = Noise::Off;
        let out1 = encoder_forward(
            &mut g1,
            &ps1,
            "enc",
            &c,
            &traj,
            TopoSource::Infer {
                n_agents: 6,
                k0: 5,
                scale_sizes: &[],
                solver: Solver::Exact,
            },
            &mut noise1,
        )
        .unwrap();
        assert_eq!(g1.shape(out1.v), (6, 8));
    }

    #[test]
    fn encoder_forward_is_permutation_equivariant() {
        let c = cfg(6, 8, 2);
        let t_past = 4;
        let n = 5;
        let mut ps = ParameterStore::<f64>::new();
        let mut rng = SeedRng::new(13).substream(tags::PARAM_INIT, 0);
        register_encoder(&mut ps, &mut rng, "enc", &c, 2 * t_past, 2).unwrap();
        let mut draw = SeedRng::new(2);
        let base: Vec<f64> = (0..n * 2 * t_past).map(|_| draw.normal()).collect();
        let perm = [3usize, 0, 4, 1, 2];

        let run = |data: Vec<f64>| {
            let traj = Tensor::<f64>::from_vec(&[n, 2 * t_past], data).unwrap();
            let mut g = Graph::<f64>::new();
            let mut noise = Noise::Off;
            let out = encoder_forward(
                &mut g,
                &ps,
                "enc",
                &c,
                &traj,
                TopoSource::Infer {
                    n_agents: n,
                    k0: n - 1,
                    scale_sizes: &[3],
                    solver: Solver::Exact,
                },
                &mut noise,
            )
            .unwrap();
            g.data(out.v).to_vec()
        };

        let out_base = run(base.clone());
        let cols = 2 * t_past;
        let mut permuted = vec![0.0; base.len()];
        for i in 0..n {
            permuted[perm[i] * cols..(perm[i] + 1) * cols]
                .copy_from_slice(&base[i * cols..(i + 1) * cols]);
        }
        let out_perm = run(permuted);
        let width = 6 * 2;
        for i in 0..n {
            let a = &out_base[i * width..(i + 1) * width];
            let b = &out_perm[perm[i] * width..(perm[i] + 1) * width];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9, "row {i}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn l1_with_unit_strength_is_plain_sum_aggregation() {
        // With L = 1 and the strength head saturated to 1, Eq-style messages
        // reduce to e = F_1(sum v): check against a raw re-computation.
        let c = cfg(3, 5, 1);
        let mut ps = random_scale_params("s", &c, 41);
        ps.get_mut("s.f_r.l2.b").unwrap().data = vec![40.0]; // r -> 1
        let mut g = Graph::<f64>::new();
        let mut rng = SeedRng::new(4);
        let data: Vec<f64> = (0..4 * 3).map(|_| rng.normal()).collect();
        let members = g.input_from(4, 3, data.clone());
        let mut noise = Noise::Off;
        let vars = node_to_hyperedge(&mut g, &ps, "s", &c, members, &mut noise).unwrap();
        let mut sum_v = [0.0f64; 3];
        for row in data.chunks(3) {
            for (s, x) in sum_v.iter_mut().zip(row) {
                *s += x;
            }
        }
        let expect = eval_mlp(&ps, "s.f_l0", &c.l_widths(), &sum_v);
        for (a, b) in g.data(vars.e).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    /// Raw MLP evaluation (independent of the tape) for reference values.
    fn eval_mlp(ps: &ParameterStore<f64>, prefix: &str, widths: &[usize], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n_layers = widths.len() - 1;
        for l in 0..n_layers {
            let w = ps.get(&format!("{prefix}.l{l}.w")).unwrap();
            let b = ps.get(&format!("{prefix}.l{l}.b")).unwrap();
            let mut out = vec![0.0f64; widths[l + 1]];
            matmul_acc(&h, &w.data, &mut out, 1, widths[l], widths[l + 1]);
            for (o, &bv) in out.iter_mut().zip(&b.data) {
                *o += bv;
            }
            if l + 1 < n_layers {
                for o in out.iter_mut() {
                    if *o < 0.0 {
                        *o = 0.0;
                    }
                }
            }
            h = out;
        }
        h
    }
}
