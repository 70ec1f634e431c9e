//! Solver ablation on synthetic suites.
//!
//! Each variant solves every object of every scene; an object counts as
//! verified when the solve passes the reprojection proxy and its overlay
//! stays within the same pixel threshold of the true object's.

use cadkit_core::synth::{generate_synthetic_scene, overlay_verified, SynthSpec, SyntheticScene};
use cadkit_core::{estimate_pose, SolverConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::formats::FormatError;

/// Verification threshold in pixels.
pub const DEFAULT_TAU_PX: f64 = 5.0;

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub config: SolverConfig,
}

/// The cumulative steps: plain reprojection, then coplanar scale, then
/// symmetry, then the up-axis term (the default solver).
pub fn solver_variants() -> Vec<Variant> {
    let full = SolverConfig::default();
    let base = SolverConfig {
        coplanar_scale: false,
        symmetry_aware: false,
        alpha: 0.0,
        ..full.clone()
    };
    let coplanar = SolverConfig {
        coplanar_scale: true,
        ..base.clone()
    };
    let symmetric = SolverConfig {
        symmetry_aware: true,
        ..coplanar.clone()
    };
    [
        ("base", base),
        ("+coplanar", coplanar),
        ("+symmetry", symmetric),
        ("+up-axis", full),
    ]
    .into_iter()
    .map(|(name, config)| Variant {
        name: name.to_string(),
        config,
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub objects: usize,
    pub verified: usize,
    pub verified_fraction: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AblationError {
    #[error("empty suite")]
    EmptySuite,
}

/// Generate `n_scenes` scenes from `spec`, seeded `seed, seed + 1, ...`.
pub fn synthetic_suite(spec: &SynthSpec, seed: u64, n_scenes: usize) -> Vec<SyntheticScene> {
    (0..n_scenes as u64)
        .into_par_iter()
        .map(|k| generate_synthetic_scene(spec, seed + k))
        .collect()
}

/// Suite for comparing solver variants, under the walkthrough capture preset.
pub fn ablation_suite(seed: u64, n_scenes: usize) -> Vec<SyntheticScene> {
    synthetic_suite(&SynthSpec::walkthrough(), seed, n_scenes)
}

fn verified_in(scene: &SyntheticScene, config: &SolverConfig, tau_px: f64) -> usize {
    let cams = scene.cameras();
    let config = SolverConfig {
        world_up: scene.scene.world_up,
        ..config.clone()
    };
    scene
        .objects
        .iter()
        .filter(|o| {
            estimate_pose(&o.correspondences, &cams, &o.mesh, &o.symmetry, &config)
                .is_ok_and(|r| overlay_verified(o, &r, &cams, tau_px))
        })
        .count()
}

pub fn run_ablation(
    variants: &[Variant],
    suite: &[SyntheticScene],
    tau_px: f64,
) -> Result<Vec<AblationRow>, AblationError> {
    let objects: usize = suite.iter().map(|s| s.objects.len()).sum();
    if objects == 0 {
        return Err(AblationError::EmptySuite);
    }
    Ok(variants
        .iter()
        .map(|v| {
            let verified: usize = suite
                .par_iter()
                .map(|s| verified_in(s, &v.config, tau_px))
                .sum();
            AblationRow {
                variant: v.name.clone(),
                objects,
                verified,
                verified_fraction: verified as f64 / objects as f64,
            }
        })
        .collect())
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String, FormatError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
