//! Numerical integrators and closed-form kinematics for the scene recipes.
//!
//! Everything here runs in `f64`; precision is only dropped to `f32` at the
//! model boundary. Springs and Coulomb pairs use velocity-Verlet (leapfrog),
//! rigid groups and free agents are exact kinematics.

use crate::error::{Error, Result};
use crate::sim::SceneConfig;

/// Positions and velocities of one interacting group.
#[derive(Debug, Clone)]
pub struct BodyState {
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
}

impl BodyState {
    pub fn new(pos: Vec<[f64; 2]>, vel: Vec<[f64; 2]>) -> Self {
        debug_assert_eq!(pos.len(), vel.len());
        BodyState { pos, vel }
    }

    fn check_finite(&self) -> Result<()> {
        for (p, v) in self.pos.iter().zip(&self.vel) {
            if !(p[0].is_finite() && p[1].is_finite() && v[0].is_finite() && v[1].is_finite()) {
                return Err(Error::Simulation("non-finite body state".to_string()));
            }
        }
        Ok(())
    }
}

fn spring_accels(k: f64, pos: &[[f64; 2]], acc: &mut [[f64; 2]]) {
    // All pairs within the group, zero rest length, unit masses:
    // F_i = -k * sum_j (x_i - x_j)
    for a in acc.iter_mut() {
        *a = [0.0, 0.0];
    }
    let n = pos.len();
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = pos[i][0] - pos[j][0];
            let dy = pos[i][1] - pos[j][1];
            acc[i][0] -= k * dx;
            acc[i][1] -= k * dy;
            acc[j][0] += k * dx;
            acc[j][1] += k * dy;
        }
    }
}

/// Total mechanical energy of an all-pairs zero-rest-length spring group.
pub fn spring_energy(k: f64, state: &BodyState) -> f64 {
    let mut e = 0.0;
    for v in &state.vel {
        e += 0.5 * (v[0] * v[0] + v[1] * v[1]);
    }
    let n = state.pos.len();
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = state.pos[i][0] - state.pos[j][0];
            let dy = state.pos[i][1] - state.pos[j][1];
            e += 0.5 * k * (dx * dx + dy * dy);
        }
    }
    e
}

/// Integrate an all-pairs spring group with velocity Verlet, recording
/// `frames` snapshots every `cfg.substeps` substeps (the first frame is the
/// initial state). Returns `[frame][member][xy]`.
pub fn simulate_springs(
    cfg: &SceneConfig,
    state: &mut BodyState,
    frames: usize,
) -> Result<Vec<Vec<[f64; 2]>>> {
    if state.pos.len() < 2 {
        return Err(Error::config("spring group needs >= 2 members"));
    }
    state.check_finite()?;
    let h = cfg.dt;
    let n = state.pos.len();
    let mut acc = vec![[0.0f64; 2]; n];
    spring_accels(cfg.spring_k, &state.pos, &mut acc);

    let mut out = Vec::with_capacity(frames);
    out.push(state.pos.clone());
    for _ in 1..frames {
        for _ in 0..cfg.substeps {
            for i in 0..n {
                state.vel[i][0] += 0.5 * h * acc[i][0];
                state.vel[i][1] += 0.5 * h * acc[i][1];
                state.pos[i][0] += h * state.vel[i][0];
                state.pos[i][1] += h * state.vel[i][1];
            }
            spring_accels(cfg.spring_k, &state.pos, &mut acc);
            for i in 0..n {
                state.vel[i][0] += 0.5 * h * acc[i][0];
                state.vel[i][1] += 0.5 * h * acc[i][1];
            }
        }
        state.check_finite()?;
        out.push(state.pos.clone());
    }
    Ok(out)
}

/// Member offsets of a symmetric Y with unit arm length (3 members).
pub fn y_bar_offsets() -> [[f64; 2]; 3] {
    let mut out = [[0.0; 2]; 3];
    for (m, o) in out.iter_mut().enumerate() {
        let ang = std::f64::consts::FRAC_PI_2 + m as f64 * 2.0 * std::f64::consts::PI / 3.0;
        *o = [ang.cos(), ang.sin()];
    }
    out
}

/// Rigid-body kinematics: members keep fixed offsets from a centroid that
/// translates at `vel` while the body rotates at `omega`. Exact, so pairwise
/// distances are constant by construction. Returns `[frame][member][xy]`.
pub fn simulate_rigid_group(
    offsets: &[[f64; 2]],
    centroid: [f64; 2],
    vel: [f64; 2],
    theta0: f64,
    omega: f64,
    frames: usize,
    frame_dt: f64,
) -> Result<Vec<Vec<[f64; 2]>>> {
    if offsets.len() < 2 {
        return Err(Error::config("rigid group needs >= 2 members"));
    }
    for i in 0..offsets.len() {
        for j in (i + 1)..offsets.len() {
            let dx = offsets[i][0] - offsets[j][0];
            let dy = offsets[i][1] - offsets[j][1];
            if (dx * dx + dy * dy).sqrt() < 1e-9 {
                return Err(Error::config(
                    "degenerate rigid geometry: coincident anchor points",
                ));
            }
        }
    }
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f64 * frame_dt;
        let cx = centroid[0] + vel[0] * t;
        let cy = centroid[1] + vel[1] * t;
        let ang = theta0 + omega * t;
        let (s, c) = ang.sin_cos();
        let frame: Vec<[f64; 2]> = offsets
            .iter()
            .map(|o| [cx + c * o[0] - s * o[1], cy + s * o[0] + c * o[1]])
            .collect();
        out.push(frame);
    }
    Ok(out)
}

/// Exact constant-velocity trajectory (free agents): positions are linear in
/// the frame index with no integrator noise.
pub fn free_trajectory(p0: [f64; 2], vel: [f64; 2], frames: usize, frame_dt: f64) -> Vec<[f64; 2]> {
    (0..frames)
        .map(|f| {
            let t = f as f64 * frame_dt;
            [p0[0] + vel[0] * t, p0[1] + vel[1] * t]
        })
        .collect()
}

/// Repulsive Coulomb force on the mobile particle from a fixed particle of
/// charge `q0` (mobile charge 1): `F = C q0 / r_eff^2` along the separation,
/// with `r_eff = max(r, r_min)`.
fn coulomb_accel(cfg: &SceneConfig, q0: f64, fixed: [f64; 2], pos: [f64; 2]) -> [f64; 2] {
    let dx = pos[0] - fixed[0];
    let dy = pos[1] - fixed[1];
    let r = (dx * dx + dy * dy).sqrt();
    let r_eff = r.max(cfg.r_min);
    let mag = cfg.coulomb_c * q0 / (r_eff * r_eff);
    if r < 1e-300 {
        return [mag, 0.0]; // arbitrary fixed direction at exact overlap
    }
    [mag * dx / r, mag * dy / r]
}

/// Mobile-particle mechanical energy `v^2/2 + C q0 / r`.
pub fn charged_energy(cfg: &SceneConfig, q0: f64, fixed: [f64; 2], pos: [f64; 2], vel: [f64; 2]) -> f64 {
    let dx = pos[0] - fixed[0];
    let dy = pos[1] - fixed[1];
    let r = (dx * dx + dy * dy).sqrt();
    0.5 * (vel[0] * vel[0] + vel[1] * vel[1]) + cfg.coulomb_c * q0 / r
}

/// Integrate the mobile particle of a charged pair (particle 0 stays fixed).
/// Returns `([frame][2 particles][xy], final_vel)`.
pub fn simulate_charged_pair(
    cfg: &SceneConfig,
    q0: f64,
    fixed: [f64; 2],
    mut pos: [f64; 2],
    mut vel: [f64; 2],
    frames: usize,
) -> Result<(Vec<Vec<[f64; 2]>>, [f64; 2])> {
    let h = cfg.dt;
    let mut acc = coulomb_accel(cfg, q0, fixed, pos);
    let mut out = Vec::with_capacity(frames);
    out.push(vec![fixed, pos]);
    for _ in 1..frames {
        for _ in 0..cfg.substeps {
            vel[0] += 0.5 * h * acc[0];
            vel[1] += 0.5 * h * acc[1];
            pos[0] += h * vel[0];
            pos[1] += h * vel[1];
            acc = coulomb_accel(cfg, q0, fixed, pos);
            vel[0] += 0.5 * h * acc[0];
            vel[1] += 0.5 * h * acc[1];
        }
        if !(pos[0].is_finite() && pos[1].is_finite()) {
            return Err(Error::Simulation("charged particle diverged".to_string()));
        }
        out.push(vec![fixed, pos]);
    }
    Ok((out, vel))
}
