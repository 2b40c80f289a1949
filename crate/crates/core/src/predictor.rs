//! CVAE trajectory prediction system.
//!
//! Twin multiscale encoders embed past (`enc_p`) and future (`enc_f`)
//! trajectories; MLP heads produce the posterior Gaussian; a residual
//! two-block GRU decoder predicts the future and reconstructs the past; the
//! loss combines an ELBO term, a past-reconstruction term, and a variety
//! (best-of-K) term. Training is deterministic given `(config, seed)`: every
//! random draw comes from a stream derived from `(seed, tag, epoch, batch)`,
//! which also makes epoch-boundary resume bit-identical.

use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::graph::{Graph, Var};
use crate::nmp::{encoder_forward, register_encoder, BatchTopology, EncoderOutput, Noise, TopoSource};
use crate::nn::{gru_step, mlp_forward, register_mlp, Adam, ParameterStore};
use crate::rng::{tags, SeedRng};
use crate::scalar::Scalar;
use crate::sim::{Dataset, LabelledSample};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Parameter registration
// ---------------------------------------------------------------------------

fn head_widths(cfg: &ExperimentConfig) -> Vec<usize> {
    let rep = cfg.model.d * (cfg.model.scales.len() + 1);
    vec![2 * rep, cfg.model.hidden, cfg.model.hidden, cfg.model.d_z]
}

// Output heads read [gru_state, last observed frame]: the direct coordinate
// input spares the bounded GRU state from carrying absolute positions.
fn fut_widths(cfg: &ExperimentConfig) -> Vec<usize> {
    let h = cfg.model.hidden;
    vec![h + 2, h, h, 2 * cfg.scene_config.t_future]
}

fn past_widths(cfg: &ExperimentConfig) -> Vec<usize> {
    let h = cfg.model.hidden;
    vec![h + 2, h, h, 2 * cfg.scene_config.t_past]
}

/// Register the full model: both encoders, posterior heads, two decoder
/// blocks. Parameter names are stable, so checkpoints are portable across
/// runs of the same config.
pub fn register_model<S: Scalar>(
    ps: &mut ParameterStore<S>,
    rng: &mut SeedRng,
    cfg: &ExperimentConfig,
) -> Result<()> {
    cfg.validate()?;
    let nmp = cfg.model.nmp();
    let n_scales = cfg.model.scales.len() + 1;
    let t_past = cfg.scene_config.t_past;
    let t_future = cfg.scene_config.t_future;
    register_encoder(ps, rng, "enc_p", &nmp, 2 * t_past, n_scales)?;
    register_encoder(ps, rng, "enc_f", &nmp, 2 * t_future, n_scales)?;
    register_mlp(ps, rng, "head.mu", &head_widths(cfg))?;
    register_mlp(ps, rng, "head.sigma", &head_widths(cfg))?;
    let rep = cfg.model.d * n_scales;
    let gru_in = 2 + rep + cfg.model.d_z;
    for block in ["dec.b1", "dec.b2"] {
        crate::nn::register_gru(ps, rng, &format!("{block}.gru"), gru_in, cfg.model.hidden)?;
        register_mlp(ps, rng, &format!("{block}.fut"), &fut_widths(cfg))?;
        register_mlp(ps, rng, &format!("{block}.past"), &past_widths(cfg))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

/// Normalized scene batch. Rows are scene-major agent rows; trajectory
/// columns are frame-major `[x0, y0, x1, y1, ...]`.
pub struct SceneBatch<S: Scalar> {
    pub past: Tensor<S>,
    pub future: Option<Tensor<S>>,
    pub n_scenes: usize,
    pub n_agents: usize,
    /// Row indices per scene, for per-scene loss reductions.
    pub scene_groups: Rc<Vec<Vec<usize>>>,
}

/// Flatten, normalize, and split samples into past/future tensors.
pub fn batch_from_samples<S: Scalar>(
    samples: &[&LabelledSample],
    t_past: usize,
    t_future: usize,
    norm_mean: [f64; 2],
    norm_std: f64,
    with_future: bool,
) -> Result<SceneBatch<S>> {
    if samples.is_empty() {
        return Err(Error::contract("empty scene batch"));
    }
    let n_agents = samples[0].n_agents();
    let frames = t_past + t_future;
    let rows = samples.len() * n_agents;
    let mut past = vec![S::zero(); rows * 2 * t_past];
    let mut future = vec![S::zero(); rows * 2 * t_future];
    for (b, s) in samples.iter().enumerate() {
        if s.n_agents() != n_agents || s.n_frames() != frames {
            return Err(Error::dim(format!(
                "sample {b}: {}x{} vs expected {n_agents}x{frames}",
                s.n_agents(),
                s.n_frames()
            )));
        }
        for (a, traj) in s.traj.iter().enumerate() {
            let row = b * n_agents + a;
            for (f, p) in traj.iter().enumerate() {
                let x = S::of((p[0] - norm_mean[0]) / norm_std);
                let y = S::of((p[1] - norm_mean[1]) / norm_std);
                if f < t_past {
                    past[row * 2 * t_past + 2 * f] = x;
                    past[row * 2 * t_past + 2 * f + 1] = y;
                } else {
                    let ff = f - t_past;
                    future[row * 2 * t_future + 2 * ff] = x;
                    future[row * 2 * t_future + 2 * ff + 1] = y;
                }
            }
        }
    }
    let scene_groups = Rc::new(
        (0..samples.len())
            .map(|b| (b * n_agents..(b + 1) * n_agents).collect())
            .collect(),
    );
    Ok(SceneBatch {
        past: Tensor::from_vec(&[rows, 2 * t_past], past)?,
        future: if with_future {
            Some(Tensor::from_vec(&[rows, 2 * t_future], future)?)
        } else {
            None
        },
        n_scenes: samples.len(),
        n_agents,
        scene_groups,
    })
}

// ---------------------------------------------------------------------------
// Encode / sample / decode
// ---------------------------------------------------------------------------

/// Posterior parameters on the tape: `mu = F_mu([V+, V-])`,
/// `log_sigma = F_sigma([V+, V-])` (the sigma head outputs log-sigma).
pub fn encode<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParameterStore<S>,
    cfg: &ExperimentConfig,
    v_plus: Var,
    v_minus: Var,
) -> Result<(Var, Var)> {
    let h = g.concat_cols(&[v_plus, v_minus])?;
    let widths = head_widths(cfg);
    let mu = mlp_forward(g, ps, "head.mu", h, &widths)?;
    let log_sigma = mlp_forward(g, ps, "head.sigma", h, &widths)?;
    Ok((mu, log_sigma))
}

/// Reparameterized posterior draw `z = mu + sigma .* eps` and the decoder
/// input `V_out = [z, V-]`.
pub fn sample_latent<S: Scalar>(
    g: &mut Graph<S>,
    mu: Var,
    sigma: Var,
    eps: &Tensor<S>,
    v_minus: Var,
) -> Result<(Var, Var)> {
    let e = g.input(eps);
    let se = g.mul(sigma, e)?;
    let z = g.add(mu, se)?;
    let v_out = g.concat_cols(&[z, v_minus])?;
    Ok((z, v_out))
}

/// Decoder outputs; the final prediction is the sum of the two blocks.
pub struct DecodeVars {
    pub future: Var,
    pub past_recon: Var,
    pub block1: (Var, Var),
    pub block2: (Var, Var),
}

fn decode_block<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParameterStore<S>,
    cfg: &ExperimentConfig,
    prefix: &str,
    v_out: Var,
    past_in: Var,
) -> Result<(Var, Var)> {
    let (rows, _) = g.shape(past_in);
    let hidden = cfg.model.hidden;
    let t_past = cfg.scene_config.t_past;
    let mut h = g.input_from(rows, hidden, vec![S::zero(); rows * hidden]);
    for t in 0..t_past {
        let x_t = g.slice_cols(past_in, 2 * t, 2)?;
        let inp = g.concat_cols(&[x_t, v_out])?;
        h = gru_step(g, ps, &format!("{prefix}.gru"), inp, h)?;
    }
    let x_last = g.slice_cols(past_in, 2 * (t_past - 1), 2)?;
    let head_in = g.concat_cols(&[h, x_last])?;
    let fut = mlp_forward(g, ps, &format!("{prefix}.fut"), head_in, &fut_widths(cfg))?;
    let pst = mlp_forward(g, ps, &format!("{prefix}.past"), head_in, &past_widths(cfg))?;
    Ok((fut, pst))
}

/// Residual two-block decoding: block 1 sees `(V_out, X-)`; block 2 sees
/// `(V_out, X- - Xhat-_1)`; outputs are summed.
pub fn decode<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParameterStore<S>,
    cfg: &ExperimentConfig,
    v_out: Var,
    past_in: Var,
) -> Result<DecodeVars> {
    let (f1, p1) = decode_block(g, ps, cfg, "dec.b1", v_out, past_in)?;
    let resid = g.sub(past_in, p1)?;
    let (f2, p2) = decode_block(g, ps, cfg, "dec.b2", v_out, resid)?;
    let future = g.add(f1, f2)?;
    let past_recon = g.add(p1, p2)?;
    Ok(DecodeVars {
        future,
        past_recon,
        block1: (f1, p1),
        block2: (f2, p2),
    })
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Loss nodes on the tape (all `1 x 1`).
pub struct LossVars {
    pub total: Var,
    pub elbo: Var,
    pub kl: Var,
    pub rec: Var,
    pub variety: Var,
}

/// Scalar loss values for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub elbo: f64,
    pub kl: f64,
    pub rec: f64,
    pub variety: f64,
    pub total: f64,
}

impl LossVars {
    pub fn read<S: Scalar>(&self, g: &Graph<S>) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            elbo: g.scalar_value(self.elbo)?.as_f64(),
            kl: g.scalar_value(self.kl)?.as_f64(),
            rec: g.scalar_value(self.rec)?.as_f64(),
            variety: g.scalar_value(self.variety)?.as_f64(),
            total: g.scalar_value(self.total)?.as_f64(),
        })
    }
}

/// Mean over scenes of the squared error between two `R x C` nodes.
fn mean_scene_sq<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var, n_scenes: usize) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum_all(sq);
    Ok(g.scale(s, S::of(1.0 / n_scenes as f64)))
}

/// Closed-form KL(N(mu, diag sigma^2) || N(0, lambda I)) summed over all
/// entries: `0.5 * sum((mu^2 + sigma^2)/lambda - 1 + ln(lambda) - 2 log_sigma)`.
pub fn kl_term<S: Scalar>(
    g: &mut Graph<S>,
    mu: Var,
    sigma: Var,
    log_sigma: Var,
    lambda: f64,
) -> Result<Var> {
    let mu2 = g.mul(mu, mu)?;
    let sg2 = g.mul(sigma, sigma)?;
    let sum = g.add(mu2, sg2)?;
    let scaled = g.scale(sum, S::of(1.0 / lambda));
    let shifted = g.add_scalar(scaled, S::of(lambda.ln() - 1.0));
    let two_logs = g.scale(log_sigma, S::of(2.0));
    let inner = g.sub(shifted, two_logs)?;
    let total = g.sum_all(inner);
    Ok(g.scale(total, S::of(0.5)))
}

/// Variety term: per scene, the minimum over candidate decodings of the
/// squared future error, then the mean over scenes.
pub fn variety_term<S: Scalar>(
    g: &mut Graph<S>,
    futures: &[Var],
    future_gt: Var,
    scene_groups: &Rc<Vec<Vec<usize>>>,
) -> Result<Var> {
    if futures.is_empty() {
        return Err(Error::config("variety term needs k_variety >= 1"));
    }
    let mut per_k = Vec::with_capacity(futures.len());
    for &f in futures {
        let diff = g.sub(f, future_gt)?;
        let sq = g.mul(diff, diff)?;
        let per_scene = g.indexed_sum(sq, Rc::clone(scene_groups))?;
        per_k.push(g.sum_cols(per_scene));
    }
    let min = g.min_stack(&per_k)?;
    let s = g.sum_all(min);
    Ok(g.scale(s, S::of(1.0 / scene_groups.len() as f64)))
}

// ---------------------------------------------------------------------------
// Full training step
// ---------------------------------------------------------------------------

/// Per-step random streams, derivable from `(seed, epoch, batch)` so a
/// resumed run replays the identical sequence.
pub struct StepRngs {
    pub gumbel_p: SeedRng,
    pub gumbel_f: SeedRng,
    pub latent: SeedRng,
    pub variety: SeedRng,
}

impl StepRngs {
    pub fn for_batch(root: &SeedRng, epoch: usize, batch: usize) -> Self {
        let b = batch as u64;
        let e = epoch as u64;
        StepRngs {
            gumbel_p: root.substream(tags::GUMBEL, e).substream(1, b),
            gumbel_f: root.substream(tags::GUMBEL, e).substream(2, b),
            latent: root.substream(tags::LATENT, e).substream(1, b),
            variety: root.substream(tags::VARIETY, e).substream(1, b),
        }
    }
}

fn normal_tensor<S: Scalar>(rng: &mut SeedRng, rows: usize, cols: usize) -> Tensor<S> {
    Tensor {
        shape: vec![rows, cols],
        data: (0..rows * cols).map(|_| S::of(rng.normal())).collect(),
        grad: None,
    }
}

/// Everything one training step leaves on the tape.
pub struct StepOutputs {
    pub loss: LossVars,
    pub enc_p: EncoderOutput,
    /// Topology used by the future encoder (for fixed-topology replays).
    pub topo_f: Rc<BatchTopology>,
}

/// Build the complete training loss for one batch on the tape. Pass
/// `fixed_topo` to pin both encoders' hypergraphs (finite-difference checks
/// difference the fixed-topology loss, matching the stop-gradient treatment
/// of the discrete selection).
pub fn training_step_loss<S: Scalar>(
    g: &mut Graph<S>,
    ps: &ParameterStore<S>,
    cfg: &ExperimentConfig,
    batch: &SceneBatch<S>,
    rngs: &mut StepRngs,
    fixed_topo: Option<(Rc<BatchTopology>, Rc<BatchTopology>)>,
) -> Result<StepOutputs> {
    let future = batch
        .future
        .as_ref()
        .ok_or_else(|| Error::contract("training requires future trajectories"))?;
    let nmp_cfg = cfg.model.nmp();
    let k0 = cfg.model.effective_k0(batch.n_agents);
    let (topo_p, topo_f) = match &fixed_topo {
        Some((p, f)) => (TopoSource::Given(Rc::clone(p)), TopoSource::Given(Rc::clone(f))),
        None => (
            TopoSource::Infer {
                n_agents: batch.n_agents,
                k0,
                scale_sizes: &cfg.model.scales,
                solver: cfg.model.solver,
            },
            TopoSource::Infer {
                n_agents: batch.n_agents,
                k0,
                scale_sizes: &cfg.model.scales,
                solver: cfg.model.solver,
            },
        ),
    };

    let mut noise_p = if cfg.model.gumbel_noise {
        Noise::On(&mut rngs.gumbel_p)
    } else {
        Noise::Off
    };
    let enc_p = encoder_forward(g, ps, "enc_p", &nmp_cfg, &batch.past, topo_p, &mut noise_p)?;
    let mut noise_f = if cfg.model.gumbel_noise {
        Noise::On(&mut rngs.gumbel_f)
    } else {
        Noise::Off
    };
    let enc_f = encoder_forward(g, ps, "enc_f", &nmp_cfg, future, topo_f, &mut noise_f)?;

    let (mu, log_sigma) = encode(g, ps, cfg, enc_f.v, enc_p.v)?;
    let sigma = g.exp(log_sigma);
    let rows = batch.n_scenes * batch.n_agents;

    let past_in = g.input(&batch.past);
    let future_gt = g.input(future);

    // main posterior decoding (the ELBO reconstruction)
    let eps = normal_tensor::<S>(&mut rngs.latent, rows, cfg.model.d_z);
    let (_z, v_out) = sample_latent(g, mu, sigma, &eps, enc_p.v)?;
    let dec = decode(g, ps, cfg, v_out, past_in)?;

    let pred_sq = mean_scene_sq(g, dec.future, future_gt, batch.n_scenes)?;
    let kl_sum = kl_term(g, mu, sigma, log_sigma, cfg.loss.lambda)?;
    let kl = g.scale(kl_sum, S::of(1.0 / batch.n_scenes as f64));
    let rec_sq = mean_scene_sq(g, dec.past_recon, past_in, batch.n_scenes)?;

    // variety: fresh posterior samples, each decoded independently
    let mut variety_futures = Vec::with_capacity(cfg.loss.k_variety);
    for _ in 0..cfg.loss.k_variety {
        let eps_k = normal_tensor::<S>(&mut rngs.variety, rows, cfg.model.d_z);
        let (_zk, v_out_k) = sample_latent(g, mu, sigma, &eps_k, enc_p.v)?;
        let dec_k = decode(g, ps, cfg, v_out_k, past_in)?;
        variety_futures.push(dec_k.future);
    }
    let variety = variety_term(g, &variety_futures, future_gt, &batch.scene_groups)?;

    let a_pred = g.scale(pred_sq, S::of(cfg.loss.alpha));
    let b_kl = g.scale(kl, S::of(cfg.loss.beta));
    let elbo = g.add(a_pred, b_kl)?;
    let rec = g.scale(rec_sq, S::of(cfg.loss.gamma));
    let er = g.add(elbo, rec)?;
    let total = g.add(er, variety)?;

    let topo_f = Rc::clone(&enc_f.topology);
    Ok(StepOutputs {
        loss: LossVars {
            total,
            elbo,
            kl,
            rec,
            variety,
        },
        enc_p,
        topo_f,
    })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Sidecar JSON written next to the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub config: ExperimentConfig,
    pub norm_mean: [f64; 2],
    pub norm_std: f64,
    pub epochs_done: usize,
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub sidecar: PathBuf,
    pub metrics: PathBuf,
    pub epochs_done: usize,
    pub final_loss: Option<LossBreakdown>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SIDECAR_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";

/// Train on a dataset, writing `checkpoint.bin`, `config.json`, and
/// `metrics.csv` into `out_dir`. `resume` continues from an epoch-boundary
/// checkpoint bit-identically (same config and seed required).
pub fn train(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    let t_past = cfg.scene_config.t_past;
    let t_future = cfg.scene_config.t_future;
    if dataset.meta.t_past != t_past
        || dataset.meta.t_future != t_future
        || dataset.meta.n_agents != cfg.scene_config.n_agents
    {
        return Err(Error::config(format!(
            "dataset dims ({} agents, {}+{} frames) do not match config ({} agents, {}+{})",
            dataset.meta.n_agents,
            dataset.meta.t_past,
            dataset.meta.t_future,
            cfg.scene_config.n_agents,
            t_past,
            t_future
        )));
    }

    let root = SeedRng::new(cfg.seed);
    let mut ps = ParameterStore::<f32>::new();
    let mut init_rng = root.substream(tags::PARAM_INIT, 0);
    register_model(&mut ps, &mut init_rng, cfg)?;
    let mut adam = Adam::new(&ps);

    let mut start_epoch = 0usize;
    let mut csv_rows: Vec<String> = Vec::new();
    if let Some(ck) = resume {
        let map = checkpoint::load_map(ck)?;
        checkpoint::restore_store(&mut ps, &map)?;
        adam.restore(&ps, &map)?;
        start_epoch = map
            .get("train.epochs_done")
            .ok_or_else(|| Error::Load("missing train.epochs_done".to_string()))?
            .data[0] as usize;
        // keep previously logged epochs so the final CSV covers the full run
        let prev_csv = ck
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(METRICS_FILE);
        if let Ok(prev) = std::fs::read_to_string(&prev_csv) {
            csv_rows.extend(prev.lines().skip(1).map(String::from));
        }
    }

    let n = dataset.samples.len();
    let mean = dataset.meta.norm_mean;
    let std = dataset.meta.norm_std;
    let mut final_loss = None;

    for epoch in start_epoch..cfg.optim.epochs {
        let lr = cfg.optim.lr
            * cfg
                .optim
                .decay_factor
                .powi((epoch / cfg.optim.decay_period) as i32);
        let mut order: Vec<usize> = (0..n).collect();
        root.substream(tags::SHUFFLE, epoch as u64).shuffle(&mut order);

        let mut sums = LossBreakdown {
            elbo: 0.0,
            kl: 0.0,
            rec: 0.0,
            variety: 0.0,
            total: 0.0,
        };
        let mut scenes_seen = 0usize;
        for (b_idx, chunk) in order.chunks(cfg.optim.batch).enumerate() {
            let samples: Vec<&LabelledSample> =
                chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let batch = batch_from_samples::<f32>(&samples, t_past, t_future, mean, std, true)?;
            let mut rngs = StepRngs::for_batch(&root, epoch, b_idx);
            let mut g = Graph::new();
            let step = training_step_loss(&mut g, &ps, cfg, &batch, &mut rngs, None)?;
            let bd = step.loss.read(&g)?;
            if !bd.total.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {b_idx}"
                )));
            }
            g.backward(step.loss.total)?;
            ps.absorb_grads(&g);
            adam.step(&mut ps, lr)?;

            let w = chunk.len() as f64;
            sums.elbo += bd.elbo * w;
            sums.kl += bd.kl * w;
            sums.rec += bd.rec * w;
            sums.variety += bd.variety * w;
            sums.total += bd.total * w;
            scenes_seen += chunk.len();
            final_loss = Some(bd);
        }
        let w = scenes_seen as f64;
        csv_rows.push(format!(
            "{epoch},{},{},{},{},{},{lr}",
            sums.elbo / w,
            sums.kl / w,
            sums.rec / w,
            sums.variety / w,
            sums.total / w
        ));
    }

    // artifacts
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let entries = ps
        .iter()
        .map(|(name, t)| (name.to_string(), t.clone()))
        .chain(adam.export(&ps))
        .chain(std::iter::once((
            "train.epochs_done".to_string(),
            Tensor::scalar(cfg.optim.epochs as f32),
        )));
    checkpoint::save(&ckpt_path, entries)?;

    let sidecar_path = out_dir.join(SIDECAR_FILE);
    let sidecar = Sidecar {
        config: cfg.clone(),
        norm_mean: mean,
        norm_std: std,
        epochs_done: cfg.optim.epochs,
    };
    write_atomic(&sidecar_path, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut csv = String::from("epoch,elbo,kl,rec,variety,total,lr\n");
    for row in &csv_rows {
        csv.push_str(row);
        csv.push('\n');
    }
    write_atomic(&metrics_path, csv.as_bytes())?;

    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        sidecar: sidecar_path,
        metrics: metrics_path,
        epochs_done: cfg.optim.epochs,
        final_loss,
    })
}

// ---------------------------------------------------------------------------
// Trained model: loading, evaluation passes, prediction
// ---------------------------------------------------------------------------

/// A checkpointed model plus the normalization stats it was trained with.
pub struct TrainedModel {
    pub config: ExperimentConfig,
    pub norm_mean: [f64; 2],
    pub norm_std: f64,
    pub ps: ParameterStore<f32>,
}

impl TrainedModel {
    /// Load from a checkpoint file; the config sidecar must sit next to it.
    pub fn load(checkpoint_path: &Path) -> Result<Self> {
        let dir = checkpoint_path
            .parent()
            .unwrap_or_else(|| Path::new("."));
        let sidecar_path = dir.join(SIDECAR_FILE);
        let sidecar: Sidecar = serde_json::from_str(
            &std::fs::read_to_string(&sidecar_path).map_err(|e| {
                Error::Load(format!(
                    "cannot read sidecar {}: {e}",
                    sidecar_path.display()
                ))
            })?,
        )?;
        let mut ps = ParameterStore::<f32>::new();
        let mut init_rng = SeedRng::new(sidecar.config.seed).substream(tags::PARAM_INIT, 0);
        register_model(&mut ps, &mut init_rng, &sidecar.config)?;
        let map = checkpoint::load_map(checkpoint_path)?;
        checkpoint::restore_store(&mut ps, &map)?;
        Ok(TrainedModel {
            config: sidecar.config,
            norm_mean: sidecar.norm_mean,
            norm_std: sidecar.norm_std,
            ps,
        })
    }

    /// Evaluation-mode encoder pass over past trajectories (noise off,
    /// topology inferred). Returns the graph so callers can read values.
    pub fn eval_encoder_pass(
        &self,
        samples: &[&LabelledSample],
    ) -> Result<(Graph<f32>, EncoderOutput)> {
        let cfg = &self.config;
        let batch = batch_from_samples::<f32>(
            samples,
            cfg.scene_config.t_past,
            cfg.scene_config.t_future,
            self.norm_mean,
            self.norm_std,
            false,
        )?;
        let mut g = Graph::new();
        let mut noise = Noise::Off;
        let out = encoder_forward(
            &mut g,
            &self.ps,
            "enc_p",
            &cfg.model.nmp(),
            &batch.past,
            TopoSource::Infer {
                n_agents: batch.n_agents,
                k0: cfg.model.effective_k0(batch.n_agents),
                scale_sizes: &cfg.model.scales,
                solver: cfg.model.solver,
            },
            &mut noise,
        )?;
        Ok((g, out))
    }
}

/// K sampled future trajectories in raw coordinates:
/// `data[k][scene][agent][frame][xy]`, flattened row-major.
pub struct Predictions {
    pub k: usize,
    pub n_scenes: usize,
    pub n_agents: usize,
    pub t_future: usize,
    pub data: Vec<f64>,
}

impl Predictions {
    pub fn at(&self, k: usize, scene: usize, agent: usize, frame: usize) -> [f64; 2] {
        let idx = (((k * self.n_scenes + scene) * self.n_agents + agent) * self.t_future
            + frame)
            * 2;
        [self.data[idx], self.data[idx + 1]]
    }

    /// Copy one scene's predictions as `[k][agent][frame][xy]`.
    pub fn scene(&self, scene: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k * self.n_agents * self.t_future * 2);
        for k in 0..self.k {
            for a in 0..self.n_agents {
                for f in 0..self.t_future {
                    let p = self.at(k, scene, a, f);
                    out.push(p[0]);
                    out.push(p[1]);
                }
            }
        }
        out
    }
}

/// Draw `k` futures from the prior `N(0, lambda I)` and decode each,
/// de-normalizing back to raw coordinates. The encoder runs once; only the
/// decodings repeat.
pub fn predict(
    model: &TrainedModel,
    samples: &[&LabelledSample],
    k: usize,
    seed: u64,
) -> Result<Predictions> {
    if k < 1 {
        return Err(Error::config("prediction needs k >= 1"));
    }
    let cfg = &model.config;
    let t_future = cfg.scene_config.t_future;
    let (mut g, enc) = model.eval_encoder_pass(samples)?;
    let rows = samples.len() * enc.topology.n_agents;
    let n_agents = enc.topology.n_agents;

    let batch = batch_from_samples::<f32>(
        samples,
        cfg.scene_config.t_past,
        t_future,
        model.norm_mean,
        model.norm_std,
        false,
    )?;
    let past_in = g.input(&batch.past);

    let root = SeedRng::new(seed);
    let sqrt_lambda = cfg.loss.lambda.sqrt();
    let mut data = Vec::with_capacity(k * rows * t_future * 2);
    for ki in 0..k {
        let mut rng = root.substream(tags::PREDICT, ki as u64);
        let mut eps = normal_tensor::<f32>(&mut rng, rows, cfg.model.d_z);
        for x in eps.data.iter_mut() {
            *x *= sqrt_lambda as f32;
        }
        let z = g.input(&eps);
        let v_out = g.concat_cols(&[z, enc.v])?;
        let dec = decode(&mut g, &model.ps, cfg, v_out, past_in)?;
        let fut = g.data(dec.future);
        // rows x 2*t_future, normalized -> raw
        for row in 0..rows {
            for f in 0..t_future {
                let x = fut[row * 2 * t_future + 2 * f] as f64;
                let y = fut[row * 2 * t_future + 2 * f + 1] as f64;
                data.push(x * model.norm_std + model.norm_mean[0]);
                data.push(y * model.norm_std + model.norm_mean[1]);
            }
        }
    }
    let preds = Predictions {
        k,
        n_scenes: samples.len(),
        n_agents,
        t_future,
        data,
    };
    if preds.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("non-finite prediction"));
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_dataset, Experiment};

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults(Experiment::Category3);
        cfg.model.d = 6;
        cfg.model.d_z = 4;
        cfg.model.hidden = 8;
        cfg.model.iters = 1;
        cfg.loss.k_variety = 2;
        cfg.optim.epochs = 2;
        cfg.optim.batch = 5;
        cfg
    }

    fn tiny_batch(cfg: &ExperimentConfig, n_scenes: usize) -> (Dataset, SceneBatch<f32>) {
        let ds = generate_dataset(cfg.experiment, &cfg.scene_config, n_scenes, 3).unwrap();
        let samples: Vec<&LabelledSample> = ds.samples.iter().collect();
        let batch = batch_from_samples::<f32>(
            &samples,
            cfg.scene_config.t_past,
            cfg.scene_config.t_future,
            ds.meta.norm_mean,
            ds.meta.norm_std,
            true,
        )
        .unwrap();
        (ds, batch)
    }

    #[test]
    fn encode_zero_params_gives_standard_gaussian() {
        let cfg = tiny_cfg();
        let mut ps = ParameterStore::<f32>::new();
        let mut rng = SeedRng::new(1).substream(tags::PARAM_INIT, 0);
        register_model(&mut ps, &mut rng, &cfg).unwrap();
        // zero both heads
        for name in ["head.mu", "head.sigma"] {
            for l in 0..3 {
                for suffix in ["w", "b"] {
                    let t = ps.get_mut(&format!("{name}.l{l}.{suffix}")).unwrap();
                    t.data.iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        let rep = cfg.model.d * (cfg.model.scales.len() + 1);
        let mut g = Graph::<f32>::new();
        let vp = g.input_from(3, rep, vec![0.5; 3 * rep]);
        let vm = g.input_from(3, rep, vec![-0.25; 3 * rep]);
        let (mu, logs) = encode(&mut g, &ps, &cfg, vp, vm).unwrap();
        assert_eq!(g.shape(mu), (3, cfg.model.d_z));
        let sigma = g.exp(logs);
        assert!(g.data(mu).iter().all(|&x| x == 0.0));
        assert!(g.data(sigma).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn sample_latent_degenerate_and_deterministic() {
        let mut g = Graph::<f32>::new();
        let mu = g.input_from(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let zero_sigma = g.input_from(2, 3, vec![0.0; 6]);
        let vm = g.input_from(2, 2, vec![0.0; 4]);
        let mut rng = SeedRng::new(9);
        let eps = normal_tensor::<f32>(&mut rng, 2, 3);
        let (z, v_out) = sample_latent(&mut g, mu, zero_sigma, &eps, vm).unwrap();
        assert_eq!(g.data(z), g.data(mu));
        assert_eq!(g.shape(v_out), (2, 5));

        // identical seeds -> identical draws
        let mut r1 = SeedRng::new(42);
        let mut r2 = SeedRng::new(42);
        let e1 = normal_tensor::<f32>(&mut r1, 4, 4);
        let e2 = normal_tensor::<f32>(&mut r2, 4, 4);
        assert_eq!(e1.data, e2.data);
    }

    #[test]
    fn latent_moments_match_standard_normal() {
        let mut rng = SeedRng::new(7);
        let t = normal_tensor::<f64>(&mut rng, 100, 100);
        let n = t.data.len() as f64;
        let mean: f64 = t.data.iter().sum::<f64>() / n;
        let var: f64 = t.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn decode_residual_structure() {
        let cfg = tiny_cfg();
        let mut ps = ParameterStore::<f32>::new();
        let mut rng = SeedRng::new(5).substream(tags::PARAM_INIT, 0);
        register_model(&mut ps, &mut rng, &cfg).unwrap();
        let rep = cfg.model.d * (cfg.model.scales.len() + 1);
        let tp = cfg.scene_config.t_past;
        let tf = cfg.scene_config.t_future;

        let run = |ps: &ParameterStore<f32>| {
            let mut g = Graph::<f32>::new();
            let v_out = g.input_from(3, rep + cfg.model.d_z, vec![0.3; 3 * (rep + cfg.model.d_z)]);
            let past = g.input_from(3, 2 * tp, (0..3 * 2 * tp).map(|i| i as f32 * 0.01).collect());
            let dec = decode(&mut g, ps, &cfg, v_out, past).unwrap();
            assert_eq!(g.shape(dec.future), (3, 2 * tf));
            assert_eq!(g.shape(dec.past_recon), (3, 2 * tp));
            // residual identity, bitwise: future = b1.future + b2.future
            let again = g.add(dec.block1.0, dec.block2.0).unwrap();
            assert_eq!(g.data(again), g.data(dec.future));
            (
                g.data(dec.future).to_vec(),
                g.data(dec.block1.0).to_vec(),
                g.data(dec.past_recon).to_vec(),
            )
        };
        let (_f, _b1, _p) = run(&ps);

        // zero block 2 heads -> outputs equal block 1's
        for name in ["dec.b2.fut", "dec.b2.past"] {
            for l in 0..3 {
                for suffix in ["w", "b"] {
                    let t = ps.get_mut(&format!("{name}.l{l}.{suffix}")).unwrap();
                    t.data.iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        let (f2, b1_2, _) = run(&ps);
        assert_eq!(f2, b1_2);

        // zero block 1 heads as well -> all-zero prediction
        for name in ["dec.b1.fut", "dec.b1.past"] {
            for l in 0..3 {
                for suffix in ["w", "b"] {
                    let t = ps.get_mut(&format!("{name}.l{l}.{suffix}")).unwrap();
                    t.data.iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        let (f3, _, p3) = run(&ps);
        assert!(f3.iter().all(|&x| x == 0.0));
        assert!(p3.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kl_closed_form_hand_cases() {
        // mu = 0, sigma = 1, lambda = 1 -> 0
        let mut g = Graph::<f64>::new();
        let mu = g.input_from(1, 1, vec![0.0]);
        let logs = g.input_from(1, 1, vec![0.0]);
        let sigma = g.exp(logs);
        let kl = kl_term(&mut g, mu, sigma, logs, 1.0).unwrap();
        assert!(g.scalar_value(kl).unwrap().abs() < 1e-15);

        // mu = 1, sigma = 1, lambda = 1 -> 0.5
        let mu1 = g.input_from(1, 1, vec![1.0]);
        let kl1 = kl_term(&mut g, mu1, sigma, logs, 1.0).unwrap();
        assert!((g.scalar_value(kl1).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_scalar_oracle_on_random_triples() {
        let mut rng = SeedRng::new(31);
        for _ in 0..20 {
            let mu = rng.range(-2.0, 2.0);
            let sigma = rng.range(0.2, 3.0);
            let lambda = rng.range(0.2, 3.0);
            let mut g = Graph::<f64>::new();
            let mv = g.input_from(1, 1, vec![mu]);
            let lv = g.input_from(1, 1, vec![sigma.ln()]);
            let sv = g.exp(lv);
            let kl = kl_term(&mut g, mv, sv, lv, lambda).unwrap();
            // independent 1-D formula
            let expect =
                0.5 * ((sigma * sigma + mu * mu) / lambda - 1.0 + lambda.ln() - 2.0 * sigma.ln());
            assert!(
                (g.scalar_value(kl).unwrap() - expect).abs() < 1e-6,
                "kl mismatch"
            );
        }
    }

    #[test]
    fn variety_zero_when_any_sample_exact_and_monotone_in_k() {
        let mut g = Graph::<f64>::new();
        let gt = g.input_from(2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let wrong = g.input_from(2, 4, vec![0.0; 8]);
        let exact = g.input_from(2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let groups = Rc::new(vec![vec![0], vec![1]]);
        let v2 = variety_term(&mut g, &[wrong, exact], gt, &groups).unwrap();
        assert_eq!(g.scalar_value(v2).unwrap(), 0.0);
        // adding candidates never increases the term
        let v1 = variety_term(&mut g, &[wrong], gt, &groups).unwrap();
        assert!(g.scalar_value(v2).unwrap() <= g.scalar_value(v1).unwrap());
    }

    #[test]
    fn training_step_runs_and_is_finite() {
        let cfg = tiny_cfg();
        let (_ds, batch) = tiny_batch(&cfg, 4);
        let mut ps = ParameterStore::<f32>::new();
        let mut rng = SeedRng::new(2).substream(tags::PARAM_INIT, 0);
        register_model(&mut ps, &mut rng, &cfg).unwrap();
        let root = SeedRng::new(cfg.seed);
        let mut rngs = StepRngs::for_batch(&root, 0, 0);
        let mut g = Graph::new();
        let step = training_step_loss(&mut g, &ps, &cfg, &batch, &mut rngs, None).unwrap();
        let bd = step.loss.read(&g).unwrap();
        assert!(bd.total.is_finite() && bd.total > 0.0);
        assert!(bd.elbo >= 0.0 && bd.rec >= 0.0 && bd.variety >= 0.0);
        g.backward(step.loss.total).unwrap();
        ps.absorb_grads(&g);
        // at least one parameter must receive nonzero gradient
        let any_nonzero = (0..ps.len()).any(|i| {
            ps.by_id(i)
                .grad
                .as_ref()
                .is_some_and(|gr| gr.iter().any(|&x| x != 0.0))
        });
        assert!(any_nonzero);
    }

    #[test]
    fn missing_future_is_contract_error() {
        let cfg = tiny_cfg();
        let (ds, _) = tiny_batch(&cfg, 2);
        let samples: Vec<&LabelledSample> = ds.samples.iter().collect();
        let batch = batch_from_samples::<f32>(
            &samples,
            cfg.scene_config.t_past,
            cfg.scene_config.t_future,
            ds.meta.norm_mean,
            ds.meta.norm_std,
            false,
        )
        .unwrap();
        let mut ps = ParameterStore::<f32>::new();
        let mut rng = SeedRng::new(2).substream(tags::PARAM_INIT, 0);
        register_model(&mut ps, &mut rng, &cfg).unwrap();
        let root = SeedRng::new(0);
        let mut rngs = StepRngs::for_batch(&root, 0, 0);
        let mut g = Graph::new();
        assert!(matches!(
            training_step_loss(&mut g, &ps, &cfg, &batch, &mut rngs, None),
            Err(Error::Contract(_))
        ));
    }
}
