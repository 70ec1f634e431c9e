use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cadkit::ablation::{ablation_csv, ablation_suite, run_ablation, solver_variants, DEFAULT_TAU_PX};
use cadkit::dataset::{load_model, write_synthetic_scene, SceneDir, DESCRIPTORS_FILE, SCENE_FILE};
use cadkit::formats::{
    load_scene, parse_correspondences, parse_descriptor_db, parse_detections, parse_poses, parse_tracks, read_text,
    stats_to_csv, to_json, write_text, LookupEmbedding,
};
use cadkit_core::retrieval::{rank_candidates, EmbeddingProvider, HashEmbedding};
use cadkit_core::synth::{generate_synthetic_scene, SynthSpec, COPLANAR_FRACTION, SYMMETRIC_FRACTION};
use cadkit_core::tracking::{partition_tracks, SimilarityWeights, DEFAULT_THRESHOLD};
use cadkit_core::{detect_symmetry, estimate_pose, SolverConfig};
use clap::{Parser, Subcommand};

/// Tools for annotating video objects with posed CAD models.
#[derive(Parser)]
#[command(name = "cadkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster per-frame detections into tracks.
    Track {
        detections: PathBuf,
        /// Pairs less similar than this are kept apart.
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank CAD candidates for each track.
    Retrieve {
        tracks: PathBuf,
        db: PathBuf,
        /// Label embedding table (JSONL of {label, vector}).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the pose for one correspondence file.
    Solve {
        correspondences: PathBuf,
        /// Scene directory holding the cameras and the model.
        #[arg(long)]
        scene_dir: PathBuf,
        /// Object category, when the descriptor database does not give it.
        #[arg(long)]
        category: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-scene statistics as CSV.
    Stats {
        scene_dirs: Vec<PathBuf>,
        /// Pose file to use instead of the scene's poses.json.
        #[arg(long)]
        poses: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic scene directory.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        objects: usize,
        #[arg(long, default_value_t = SYMMETRIC_FRACTION)]
        sym_frac: f64,
        #[arg(long, default_value_t = COPLANAR_FRACTION)]
        coplanar_frac: f64,
        /// Pixel noise standard deviation.
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare solver variants on a synthetic suite.
    Ablate {
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TAU_PX)]
        tau: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the annotation service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        data_dir: PathBuf,
    },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_text(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Track {
            detections,
            threshold,
            out,
        } => {
            let dets = parse_detections(&read_text(&detections)?)?;
            let tracks = partition_tracks(&dets, &SimilarityWeights::default(), threshold);
            emit(out.as_deref(), &to_json(&tracks))
        }
        Command::Retrieve {
            tracks,
            db,
            embeddings,
            out,
        } => {
            let tracks = parse_tracks(&read_text(&tracks)?)?;
            let db = parse_descriptor_db(&read_text(&db)?)?;
            let emb: Box<dyn EmbeddingProvider> = match embeddings {
                Some(p) => Box::new(LookupEmbedding::parse(&read_text(&p)?)?),
                None => Box::new(HashEmbedding::default()),
            };
            let lists = tracks
                .iter()
                .map(|t| rank_candidates(t, &db, emb.as_ref()))
                .collect::<Result<Vec<_>, _>>()?;
            emit(out.as_deref(), &to_json(&lists))
        }
        Command::Solve {
            correspondences,
            scene_dir,
            category,
            out,
        } => {
            let corr = parse_correspondences(&read_text(&correspondences)?)?;
            let scene = load_scene(&scene_dir.join(SCENE_FILE))?;
            let category = match category {
                Some(c) => c,
                None => {
                    let db_path = scene_dir.join(DESCRIPTORS_FILE);
                    let db = if db_path.exists() {
                        parse_descriptor_db(&read_text(&db_path)?)?
                    } else {
                        Vec::new()
                    };
                    db.into_iter()
                        .find(|m| m.model_id == corr.model_id)
                        .map(|m| m.category)
                        .unwrap_or_default()
                }
            };
            let model_path = scene_dir.join("models").join(format!("{}.obj", corr.model_id));
            let mesh = load_model(&model_path, &corr.model_id, &category)?;
            let cfg = SolverConfig {
                world_up: scene.world_up,
                ..SolverConfig::default()
            };
            let result = estimate_pose(&corr, &scene.cameras(), &mesh, &detect_symmetry(&mesh), &cfg)?;
            emit(out.as_deref(), &to_json(&result))
        }
        Command::Stats {
            scene_dirs,
            poses,
            out,
        } => {
            if scene_dirs.is_empty() {
                bail!("no scene directories given");
            }
            let mut rows = Vec::new();
            for dir in &scene_dirs {
                let sd = SceneDir::load(dir).with_context(|| format!("loading {}", dir.display()))?;
                let entries = match &poses {
                    Some(p) => parse_poses(&read_text(p)?)?,
                    None if !sd.poses.is_empty() => sd.poses.clone(),
                    None => sd.ground_truth.clone(),
                };
                let stats = sd
                    .stats(&entries)
                    .with_context(|| format!("statistics for {}", dir.display()))?;
                rows.push((sd.scene.scene_id.clone(), stats));
            }
            emit(out.as_deref(), &stats_to_csv(&rows)?)
        }
        Command::Synth {
            seed,
            objects,
            sym_frac,
            coplanar_frac,
            noise,
            out,
        } => {
            for (name, f) in [("sym-frac", sym_frac), ("coplanar-frac", coplanar_frac)] {
                if !(0.0..=1.0).contains(&f) {
                    bail!("--{name} must lie in [0, 1], got {f}");
                }
            }
            let spec = SynthSpec {
                objects,
                pixel_noise: noise,
                symmetric_fraction: sym_frac,
                coplanar_fraction: coplanar_frac,
                ..SynthSpec::default()
            };
            let scene = generate_synthetic_scene(&spec, seed);
            write_synthetic_scene(&out, &scene)?;
            eprintln!(
                "wrote {} objects over {} frames to {}",
                scene.objects.len(),
                scene.scene.frames.len(),
                out.display()
            );
            Ok(())
        }
        Command::Ablate {
            scenes,
            seed,
            tau,
            out,
        } => {
            let suite = ablation_suite(seed, scenes);
            let rows = run_ablation(&solver_variants(), &suite, tau)?;
            emit(out.as_deref(), &ablation_csv(&rows)?)
        }
        Command::Serve { port, data_dir } => tokio::runtime::Runtime::new()?
            .block_on(cadkit::service::serve(&data_dir, port)),
    }
}
