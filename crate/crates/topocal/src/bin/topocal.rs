//! Command-line front end for the topocal toolkit.
//!
//! Exit codes: 0 success, 2 configuration/parameter error, 3 I/O error.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use topocal::datagen::{generate_dataset, GridSpec, SplitCounts};
use topocal::geometry::{BirdseyeFrame, Homography};
use topocal::harness::{render_overlay, run_experiment, run_mixed, ExperimentConfig};
use topocal::loss::{LossKind, TopoLossConfig};
use topocal::matching::{match_map, match_topk, Dictionary, Metric};
use topocal::raster::{load_map, load_sidecar, save_map, MapSidecar};
use topocal::refine::{evaluate_estimate, refine, RefineConfig};
use topocal::scenes::{scene, scene_frame, SceneKind};
use topocal::{datagen::DatasetManifest, Error};

#[derive(Parser)]
#[command(name = "topocal", version, about = "Homography estimation toolkit: dataset generation, template matching, loss-driven refinement, and evaluation over semantic maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a bird's-eye map and a grid spec.
    Generate(GenerateArgs),
    /// Match a query map against a manifest's dictionary.
    Match(MatchArgs),
    /// Match then refine a query's homography; writes a JSON result.
    Refine(RefineArgs),
    /// Run the match→refine→IoU experiment described by a config file.
    Evaluate(EvaluateArgs),
    /// Like evaluate, but with the dictionary replaced by donor entries.
    EvaluateMixed(EvaluateMixedArgs),
    /// Render an overlay of a warped bird's-eye view on a query map.
    Render(RenderArgs),
    /// Write one of the built-in bird's-eye scene maps.
    Scene(SceneArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Bird's-eye semantic map (indexed PNG); a JSON sidecar next to it may
    /// carry units-per-pixel and world center.
    #[arg(long)]
    map: PathBuf,
    /// Grid spec JSON (axes, sample_count, rng_seed).
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    train: usize,
    #[arg(long)]
    test: usize,
    #[arg(long)]
    dict: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Width of the generated camera-view maps.
    #[arg(long, default_value_t = 128)]
    width: u32,
    /// Height of the generated camera-view maps.
    #[arg(long, default_value_t = 128)]
    height: u32,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    query: PathBuf,
    /// Dataset manifest JSON whose dictionary split is searched.
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    metric: Metric,
    /// Report the k best entries instead of just the minimizer.
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    birdseye: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    #[arg(long, default_value = "topmse")]
    metric: Metric,
    /// Loss minimized during refinement.
    #[arg(long, default_value = "topmse")]
    loss: LossKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    max_iters: u32,
}

#[derive(Args)]
struct EvaluateArgs {
    /// ExperimentConfig JSON.
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving report.json and report.csv.
    #[arg(long, default_value = "reports")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateMixedArgs {
    #[arg(long)]
    config: PathBuf,
    /// Donor manifests whose dictionary entries replace the base dictionary.
    #[arg(long, required = true, num_args = 1..)]
    donors: Vec<PathBuf>,
    #[arg(long, default_value = "reports-mixed")]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    birdseye: PathBuf,
    /// JSON file holding the homography to visualize.
    #[arg(long)]
    h: PathBuf,
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SceneArgs {
    /// cross|tee|diagonal|roundabout|offset|field
    #[arg(long)]
    kind: SceneKind,
    #[arg(long, default_value_t = 256)]
    size: u32,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { .. } | Error::Png { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(a) => {
            let map = load_map(&a.map)?;
            let sidecar = load_sidecar(&a.map)?.unwrap_or_default();
            let frame = BirdseyeFrame {
                units_per_pixel: sidecar.units_per_pixel,
                center: sidecar.center,
                map_width: map.width(),
                map_height: map.height(),
            };
            let grid_bytes = fs::read(&a.grid).map_err(|e| Error::io(&a.grid, e))?;
            let spec: GridSpec = serde_json::from_slice(&grid_bytes)?;
            let manifest = generate_dataset(
                &map,
                &frame,
                &spec,
                SplitCounts::new(a.train, a.test, a.dict),
                (a.width, a.height),
                a.seed,
                &a.out,
            )?;
            println!(
                "wrote {} entries ({} skipped) to {}",
                manifest.entries.len(),
                manifest.skipped.len(),
                a.out.display()
            );
            Ok(())
        }
        Command::Match(a) => {
            let query = load_map(&a.query)?;
            let manifest = DatasetManifest::load(&a.dict)?;
            let dict = Dictionary::from_manifest(&manifest)?;
            let cfg = TopoLossConfig::default();
            let json = match a.topk {
                Some(k) => {
                    serde_json::to_string_pretty(&match_topk(&query, &dict, a.metric, &cfg, k)?)?
                }
                None => serde_json::to_string_pretty(&match_map(&query, &dict, a.metric, &cfg)?)?,
            };
            println!("{json}");
            Ok(())
        }
        Command::Refine(a) => {
            let query = load_map(&a.query)?;
            let birdseye = load_map(&a.birdseye)?;
            let manifest = DatasetManifest::load(&a.dict)?;
            let dict = Dictionary::from_manifest(&manifest)?;
            let loss_defaults = TopoLossConfig::default();
            let m = match_map(&query, &dict, a.metric, &loss_defaults)?;
            let matched = dict.by_id(m.id).expect("match id comes from dictionary");
            let cfg = RefineConfig {
                loss: a.loss.to_config(&loss_defaults),
                max_iters: a.max_iters,
                ..Default::default()
            };
            let result = refine(&query, &birdseye, &matched.homography, &cfg)?;
            let report = evaluate_estimate(&result, &birdseye, &query)?;
            let out = serde_json::json!({
                "match": m,
                "refine": result,
                "iou_mean_foreground": report.mean(false),
                "iou_mean_all": report.mean(true),
            });
            let mut bytes = serde_json::to_vec_pretty(&out)?;
            bytes.push(b'\n');
            fs::write(&a.out, bytes).map_err(|e| Error::io(&a.out, e))?;
            println!("wrote {}", a.out.display());
            Ok(())
        }
        Command::Evaluate(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let report = run_experiment(&cfg)?;
            report.write(&a.out)?;
            println!(
                "mean IoU pre {:.4} post {:.4}, improvement rate {:.2}, reports in {}",
                report.aggregates.mean_pre_iou,
                report.aggregates.mean_post_iou,
                report.aggregates.improvement_rate,
                a.out.display()
            );
            Ok(())
        }
        Command::EvaluateMixed(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let report = run_mixed(&cfg, &a.donors)?;
            report.write(&a.out)?;
            println!(
                "mixed dictionary: mean IoU pre {:.4} post {:.4}, reports in {}",
                report.aggregates.mean_pre_iou,
                report.aggregates.mean_post_iou,
                a.out.display()
            );
            Ok(())
        }
        Command::Render(a) => {
            let birdseye = load_map(&a.birdseye)?;
            let query = load_map(&a.query)?;
            let h_bytes = fs::read(&a.h).map_err(|e| Error::io(&a.h, e))?;
            let h: Homography = serde_json::from_slice(&h_bytes)?;
            render_overlay(&birdseye, &h, &query, &a.out)?;
            println!("wrote {}", a.out.display());
            Ok(())
        }
        Command::Scene(a) => {
            let map = scene(a.kind, a.size)?;
            let frame = scene_frame(a.size);
            let sidecar = MapSidecar {
                units_per_pixel: frame.units_per_pixel,
                center: frame.center,
                ..Default::default()
            };
            save_map(&map, &a.out, Some(&sidecar))?;
            println!("wrote {}", a.out.display());
            Ok(())
        }
    }
}
