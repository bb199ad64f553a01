//! Command-line surface: `run` (visual odometry over a sequence directory),
//! `eval` (ATE between two trajectory files), `synth` (generate a synthetic
//! sequence), `selftest` (fast invariant suite).
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stvo::config::{Config, FlowSource};
use stvo::spatial::{DepthNormalization, DepthSource};
use stvo::synth::TrajectoryKind;

#[derive(Parser)]
#[command(name = "stvo", version, about = "Spatio-temporal visual odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run visual odometry on a sequence directory.
    Run {
        /// Sequence directory (rgb.txt, calibration.txt, rgb/, optional
        /// depth/ and groundtruth.txt).
        sequence: PathBuf,
        /// Configuration file; defaults apply when absent. STVO_* environment
        /// variables override the file; explicit flags override both.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for trajectory.txt and the resolved config.toml.
        #[arg(long, default_value = "stvo-out")]
        out: PathBuf,
        #[arg(long, value_enum)]
        flow: Option<FlowSource>,
        #[arg(long, value_enum)]
        depth: Option<DepthSource>,
        #[arg(long, value_enum)]
        normalization: Option<DepthNormalization>,
        #[arg(long)]
        seed: Option<u64>,
        /// Process every n-th frame.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        tau_kf: Option<f64>,
        /// STVW weight file (network mode).
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Absolute trajectory error between two TUM trajectory files.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        est: PathBuf,
        /// Association tolerance in seconds.
        #[arg(long, default_value_t = 0.02)]
        max_dt: f64,
    },
    /// Generate a synthetic sequence with exact ground truth.
    Synth {
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = TrajectoryKind::Zigzag)]
        kind: TrajectoryKind,
        /// Input-resolution width; must be divisible by 8.
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 48)]
        height: usize,
    },
    /// Fast invariant suite; exits nonzero on the first violation.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> stvo::Result<()> {
    match cli.command {
        Command::Run {
            sequence,
            config,
            out,
            flow,
            depth,
            normalization,
            seed,
            stride,
            iterations,
            tau_kf,
            weights,
        } => {
            let mut cfg = match config {
                Some(path) => Config::load(&path)?,
                None => Config::default(),
            };
            cfg.apply_env()?;
            if let Some(v) = flow {
                cfg.flow = v;
            }
            if let Some(v) = depth {
                cfg.depth = v;
            }
            if let Some(v) = normalization {
                cfg.normalization = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = stride {
                cfg.stride = v;
            }
            if let Some(v) = iterations {
                cfg.iterations = v;
            }
            if let Some(v) = tau_kf {
                cfg.tau_kf = v;
            }
            cfg.validate()?;
            let store = weights.map(|p| stvo::io::read_stvw(&p)).transpose()?;
            let seq = stvo::pipeline::load_sequence(&sequence)?;
            let artifacts = stvo::pipeline::run_vo(&cfg, &seq, store)?;
            std::fs::create_dir_all(&out)?;
            stvo::io::write_tum_trajectory(&out.join("trajectory.txt"), &artifacts.trajectory)?;
            artifacts.config.save(&out.join("config.toml"))?;
            let solves = artifacts.reports.len();
            let final_cost =
                artifacts.reports.last().and_then(|r| r.costs.last()).copied().unwrap_or(0.0);
            println!(
                "keyframes {} solves {solves} final_cost {final_cost:.6e} finite {}",
                artifacts.trajectory.len(),
                artifacts.all_finite
            );
            Ok(())
        }
        Command::Eval { gt, est, max_dt } => {
            let gt = stvo::io::read_tum_trajectory(&gt)?;
            let est = stvo::io::read_tum_trajectory(&est)?;
            let result = stvo::eval::ate(&est, &gt, max_dt)?;
            println!(
                "rmse {:.6} mean {:.6} median {:.6} max {:.6} pairs {}",
                result.rmse, result.mean, result.median, result.max, result.pairs
            );
            Ok(())
        }
        Command::Synth { frames, seed, out, kind, width, height } => {
            let camera = stvo::synth::default_camera(width, height)?;
            let scene = stvo::synth::Scene::generate(kind, frames, seed, camera)?;
            scene.export(&out)?;
            println!("wrote {frames} frames to {}", out.display());
            Ok(())
        }
        Command::Selftest { seed } => selftest(seed),
    }
}

fn check(name: &str, ok: bool) -> stvo::Result<()> {
    if ok {
        println!("ok   {name}");
        Ok(())
    } else {
        println!("FAIL {name}");
        Err(stvo::Error::DegenerateConfiguration)
    }
}

/// A fast subset of the invariant suites: exercises each module once with
/// seeded inputs. The full suites live in the test targets.
fn selftest(seed: u64) -> stvo::Result<()> {
    use nalgebra::Vector3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use stvo::lie::{exp, log, Tangent};

    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);

    // exp/log round trips
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let xi = Tangent {
            translation: Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
            rotation: Vector3::from_fn(|_, _| rng.random_range(-1.5..1.5)),
        };
        let back = log(&exp(&xi))?;
        worst = worst.max((back.to_vector() - xi.to_vector()).norm());
    }
    check("se3 exp/log round trip < 1e-9", worst < 1e-9)?;

    // SAM row-stochasticity
    let depths: Vec<f64> = (0..48).map(|_| rng.random_range(0.5..10.0)).collect();
    let raster = stvo::spatial::DepthRaster::new(
        8,
        6,
        depths,
        stvo::spatial::DepthProvenance::BaDepth,
    )?;
    let weights = stvo::spatial::ActivationWeights {
        w_q: (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
        w_k: (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
        alpha_c: 0.0,
        alpha_f: 0.0,
    };
    let sam = stvo::spatial::build_sam(
        &raster,
        &weights,
        stvo::spatial::DepthNormalization::Standardized,
        1 << 20,
    )?;
    let row_err = (0..48)
        .map(|i| (sam.data()[i * 48..(i + 1) * 48].iter().sum::<f64>() - 1.0).abs())
        .fold(0.0f64, f64::max)
        .max(0.0);
    check("sam rows sum to one < 1e-10", row_err < 1e-10)?;

    // zero-flow warp identity
    let state = stvo::diff::DenseArray::seeded_gaussian(&[3, 6, 8], seed ^ 1, 1.0);
    let zero = stvo::lie::FlowField::zeros(8, 6);
    let (warped, mask) = stvo::temporal::warp_motion(&state, &zero)?;
    check(
        "zero-flow warp is the identity",
        warped.data() == state.data() && mask.data.iter().all(|m| *m),
    )?;

    // umeyama recovers an applied similarity
    let mut est = stvo::eval::Trajectory::new();
    let mut gt = stvo::eval::Trajectory::new();
    let scale = 1.7;
    let rot = stvo::lie::Rotation::exp(Vector3::new(0.3, -0.2, 0.5));
    let shift = Vector3::new(1.0, -2.0, 0.5);
    for k in 0..10 {
        let p = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let q = scale * rot.rotate(p) + shift;
        est.push(k as f64, stvo::lie::Pose::new(stvo::lie::Rotation::identity(), p))?;
        gt.push(k as f64, stvo::lie::Pose::new(stvo::lie::Rotation::identity(), q))?;
    }
    let result = stvo::eval::ate(&est, &gt, 0.01)?;
    check("umeyama alignment recovers a similarity < 1e-9", result.rmse < 1e-9)?;

    // seeded weight determinism
    let a = stvo::pipeline::init_weights(&Config::default());
    let b = stvo::pipeline::init_weights(&Config::default());
    let same = a
        .iter()
        .zip(b.iter())
        .all(|((na, va), (nb, vb))| na == nb && va.data() == vb.data());
    check("weight initialization is deterministic", same)?;

    println!("selftest passed");
    Ok(())
}
