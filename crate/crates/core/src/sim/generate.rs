//! Scene recipes and dataset generation.
//!
//! Each sample is a pure function of `(cfg, seed, sample_index)`: the
//! per-sample RNG is derived up front, so generation order (or parallelism)
//! cannot change any sample.

use crate::error::{Error, Result};
use crate::rng::{tags, SeedRng};
use crate::sim::dynamics::{
    free_trajectory, simulate_charged_pair, simulate_rigid_group, simulate_springs, y_bar_offsets,
    BodyState,
};
use crate::sim::{
    normalization_stats, Dataset, DatasetMeta, Experiment, GroupKind, LabelledSample, SceneConfig,
};

const FORMAT_VERSION: u32 = 1;

fn sample_positions(rng: &mut SeedRng, cfg: &SceneConfig, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            [
                rng.range(-cfg.init_pos_box, cfg.init_pos_box),
                rng.range(-cfg.init_pos_box, cfg.init_pos_box),
            ]
        })
        .collect()
}

fn sample_velocities(rng: &mut SeedRng, cfg: &SceneConfig, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            [
                cfg.init_vel_sigma * rng.normal(),
                cfg.init_vel_sigma * rng.normal(),
            ]
        })
        .collect()
}

/// Frame-major to agent-major transpose used when stitching a group's
/// trajectory into scene slots.
fn place_group(
    traj: &mut [Vec<[f64; 2]>],
    members: &[usize],
    group_frames: &[Vec<[f64; 2]>],
) {
    for (frame_idx, frame) in group_frames.iter().enumerate() {
        for (m, &agent) in members.iter().enumerate() {
            traj[agent][frame_idx] = frame[m];
        }
    }
}

fn simulate_group_kind(
    cfg: &SceneConfig,
    rng: &mut SeedRng,
    kind: GroupKind,
    members: usize,
    frames: usize,
) -> Result<Vec<Vec<[f64; 2]>>> {
    match kind {
        GroupKind::Free => {
            let pos = sample_positions(rng, cfg, members);
            let vel = sample_velocities(rng, cfg, members);
            let mut out = vec![vec![[0.0; 2]; members]; frames];
            for m in 0..members {
                let tr = free_trajectory(pos[m], vel[m], frames, cfg.frame_dt());
                for (f, p) in tr.into_iter().enumerate() {
                    out[f][m] = p;
                }
            }
            Ok(out)
        }
        GroupKind::Spring => {
            let pos = sample_positions(rng, cfg, members);
            let vel = sample_velocities(rng, cfg, members);
            let mut state = BodyState::new(pos, vel);
            simulate_springs(cfg, &mut state, frames)
        }
        GroupKind::Lightbar => {
            if members != 3 {
                return Err(Error::config(format!(
                    "light bar groups have 3 members, got {members}"
                )));
            }
            let centroid = sample_positions(rng, cfg, 1)[0];
            let vel = sample_velocities(rng, cfg, 1)[0];
            let theta0 = rng.range(0.0, std::f64::consts::TAU);
            // spin magnitude drawn away from zero: a bar that does not
            // visibly rotate within the window is indistinguishable from
            // free motion and would poison the relation labels
            let omega = rng.range(cfg.omega_sigma / 3.0, cfg.omega_sigma)
                * if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            simulate_rigid_group(
                &y_bar_offsets(),
                centroid,
                vel,
                theta0,
                omega,
                frames,
                cfg.frame_dt(),
            )
        }
    }
}

/// mixed6: a random partition of six agents into a light-bar triple, a
/// spring pair, and one free agent.
fn sample_mixed6(cfg: &SceneConfig, rng: &mut SeedRng) -> Result<LabelledSample> {
    let frames = cfg.total_frames();
    let mut perm: Vec<usize> = (0..6).collect();
    rng.shuffle(&mut perm);
    let bar: Vec<usize> = {
        let mut v = perm[0..3].to_vec();
        v.sort_unstable();
        v
    };
    let spring: Vec<usize> = {
        let mut v = perm[3..5].to_vec();
        v.sort_unstable();
        v
    };
    let free = perm[5];

    let mut traj = vec![vec![[0.0f64; 2]; frames]; 6];
    let bar_frames = simulate_group_kind(cfg, rng, GroupKind::Lightbar, 3, frames)?;
    place_group(&mut traj, &bar, &bar_frames);
    let spring_frames = simulate_group_kind(cfg, rng, GroupKind::Spring, 2, frames)?;
    place_group(&mut traj, &spring, &spring_frames);
    let free_frames = simulate_group_kind(cfg, rng, GroupKind::Free, 1, frames)?;
    place_group(&mut traj, &[free], &free_frames);

    Ok(LabelledSample {
        traj,
        groups: vec![bar, spring],
        types: vec![GroupKind::Lightbar, GroupKind::Spring],
        charge: None,
    })
}

/// category3 / category2: all three agents form one group of a uniformly
/// drawn kind.
fn sample_category(
    cfg: &SceneConfig,
    rng: &mut SeedRng,
    kinds: &[GroupKind],
) -> Result<LabelledSample> {
    let frames = cfg.total_frames();
    let kind = kinds[rng.below(kinds.len())];
    let mut traj = vec![vec![[0.0f64; 2]; frames]; 3];
    let group_frames = simulate_group_kind(cfg, rng, kind, 3, frames)?;
    place_group(&mut traj, &[0, 1, 2], &group_frames);
    Ok(LabelledSample {
        traj,
        groups: vec![vec![0, 1, 2]],
        types: vec![kind],
        charge: None,
    })
}

/// charged2: particle 0 fixed with the given charge, particle 1 mobile with
/// unit charge, coupled by a repulsive Coulomb force. Initial conditions with
/// separation below `r_min` are resampled.
pub fn simulate_charged(
    cfg: &SceneConfig,
    charge: f64,
    rng: &mut SeedRng,
) -> Result<LabelledSample> {
    let frames = cfg.total_frames();
    let fixed = [0.0, 0.0];
    let (pos, vel) = loop {
        let p = sample_positions(rng, cfg, 1)[0];
        let v = sample_velocities(rng, cfg, 1)[0];
        let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
        if r >= cfg.r_min {
            break (p, v);
        }
    };
    let (frames_pm, _) = simulate_charged_pair(cfg, charge, fixed, pos, vel, frames)?;
    let mut traj = vec![vec![[0.0f64; 2]; frames]; 2];
    place_group(&mut traj, &[0, 1], &frames_pm);
    Ok(LabelledSample {
        traj,
        groups: vec![],
        types: vec![],
        charge: Some(charge),
    })
}

/// Generate a labelled dataset for one experiment. Normalization stats are
/// computed over every recorded position and stored in the meta record.
pub fn generate_dataset(
    experiment: Experiment,
    cfg: &SceneConfig,
    n_samples: usize,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    let required = experiment.required_agents();
    if cfg.n_agents != required {
        return Err(Error::config(format!(
            "experiment {experiment} requires n_agents = {required}, got {}",
            cfg.n_agents
        )));
    }
    let root = SeedRng::new(seed);
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut rng = root.substream(tags::SAMPLE, i as u64);
        let sample = match experiment {
            Experiment::Mixed6 => sample_mixed6(cfg, &mut rng)?,
            Experiment::Category3 => sample_category(
                cfg,
                &mut rng,
                &[GroupKind::Free, GroupKind::Spring, GroupKind::Lightbar],
            )?,
            Experiment::Category2 => {
                sample_category(cfg, &mut rng, &[GroupKind::Free, GroupKind::Lightbar])?
            }
            Experiment::Charged2 => {
                let charge = rng.range(cfg.charge_range[0], cfg.charge_range[1]);
                simulate_charged(cfg, charge, &mut rng)?
            }
        };
        sample.validate(cfg.n_agents, cfg.total_frames())?;
        samples.push(sample);
    }
    let (norm_mean, norm_std) = normalization_stats(&samples);
    Ok(Dataset {
        meta: DatasetMeta {
            format_version: FORMAT_VERSION,
            experiment,
            n_agents: cfg.n_agents,
            t_past: cfg.t_past,
            t_future: cfg.t_future,
            seed,
            norm_mean,
            norm_std,
            scene_config: cfg.clone(),
        },
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_for(e: Experiment) -> SceneConfig {
        SceneConfig {
            n_agents: e.required_agents(),
            ..SceneConfig::default()
        }
    }

    #[test]
    fn empty_dataset_is_valid() {
        let ds = generate_dataset(Experiment::Mixed6, &cfg_for(Experiment::Mixed6), 0, 1).unwrap();
        assert!(ds.samples.is_empty());
        assert_eq!(ds.meta.norm_std, 1.0);
        let bytes = ds.to_jsonl().unwrap();
        assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 1);
    }

    #[test]
    fn mixed6_labels_partition_correctly() {
        let cfg = cfg_for(Experiment::Mixed6);
        let ds = generate_dataset(Experiment::Mixed6, &cfg, 20, 7).unwrap();
        for s in &ds.samples {
            assert_eq!(s.groups.len(), 2);
            assert_eq!(s.types, vec![GroupKind::Lightbar, GroupKind::Spring]);
            assert_eq!(s.groups[0].len(), 3);
            assert_eq!(s.groups[1].len(), 2);
            let mut all: Vec<usize> = s.groups.iter().flatten().copied().collect();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), 5, "groups must not overlap");
            assert!(all.iter().all(|&i| i < 6));
        }
    }

    #[test]
    fn mixed6_bar_is_rigid_and_spring_is_not_free() {
        let cfg = cfg_for(Experiment::Mixed6);
        let ds = generate_dataset(Experiment::Mixed6, &cfg, 5, 99).unwrap();
        for s in &ds.samples {
            let bar = &s.groups[0];
            let frames = s.n_frames();
            let dist = |f: usize, a: usize, b: usize| {
                let pa = s.traj[a][f];
                let pb = s.traj[b][f];
                ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
            };
            let d0 = dist(0, bar[0], bar[1]);
            for f in 0..frames {
                assert!((dist(f, bar[0], bar[1]) - d0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn category3_free_samples_are_constant_velocity() {
        let cfg = cfg_for(Experiment::Category3);
        let ds = generate_dataset(Experiment::Category3, &cfg, 30, 3).unwrap();
        let mut saw_free = false;
        for s in &ds.samples {
            if s.types[0] != GroupKind::Free {
                continue;
            }
            saw_free = true;
            for tr in &s.traj {
                // second differences vanish exactly for linear motion
                for f in 2..tr.len() {
                    let ddx = tr[f][0] - 2.0 * tr[f - 1][0] + tr[f - 2][0];
                    let ddy = tr[f][1] - 2.0 * tr[f - 1][1] + tr[f - 2][1];
                    assert!(ddx.abs() < 1e-9 && ddy.abs() < 1e-9);
                }
            }
        }
        assert!(saw_free, "30 draws should include a free sample");
    }

    #[test]
    fn category2_restricts_kinds() {
        let cfg = cfg_for(Experiment::Category2);
        let ds = generate_dataset(Experiment::Category2, &cfg, 40, 5).unwrap();
        for s in &ds.samples {
            assert!(matches!(s.types[0], GroupKind::Free | GroupKind::Lightbar));
        }
    }

    #[test]
    fn charged2_stores_charge_in_range() {
        let cfg = cfg_for(Experiment::Charged2);
        let ds = generate_dataset(Experiment::Charged2, &cfg, 25, 11).unwrap();
        for s in &ds.samples {
            let q = s.charge.unwrap();
            assert!((0.5..=5.0).contains(&q));
            // fixed particle is frame-constant
            for f in 0..s.n_frames() {
                assert_eq!(s.traj[0][f], s.traj[0][0]);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_bytes() {
        let cfg = cfg_for(Experiment::Mixed6);
        let a = generate_dataset(Experiment::Mixed6, &cfg, 10, 42).unwrap();
        let b = generate_dataset(Experiment::Mixed6, &cfg, 10, 42).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        let c = generate_dataset(Experiment::Mixed6, &cfg, 10, 43).unwrap();
        assert_ne!(a.to_jsonl().unwrap(), c.to_jsonl().unwrap());
    }

    #[test]
    fn wrong_agent_count_is_config_error() {
        let mut cfg = cfg_for(Experiment::Mixed6);
        cfg.n_agents = 4;
        assert!(matches!(
            generate_dataset(Experiment::Mixed6, &cfg, 1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn jsonl_roundtrip() {
        let cfg = cfg_for(Experiment::Category3);
        let ds = generate_dataset(Experiment::Category3, &cfg, 8, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        ds.write_jsonl(&path).unwrap();
        let back = Dataset::read_jsonl(&path).unwrap();
        assert_eq!(back.meta, ds.meta);
        assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert_eq!(a, b);
        }
        // writing again produces identical bytes
        let p2 = dir.path().join("ds2.jsonl");
        back.write_jsonl(&p2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&p2).unwrap());
    }
}
