// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use gaplanes::config;
use gaplanes::decoders::DecoderKind;
use gaplanes::experiments::{self as ex, Manifest, Supervision};
use gaplanes::grids::Interp;
use gaplanes::io::{create_csv, read_pgm, write_pgm, write_tensor};
use gaplanes::model::{Model, ModelSpec};
use gaplanes::numerics::{numeric_rank, DEFAULT_RANK_TOL};
use gaplanes::selfcheck;
use gaplanes::training::TrainConfig;
use gaplanes::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "gaplanes", version, about = "Grid-based volume models: fitting tasks and self-checks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// Worker threads for gradient accumulation (results do not depend on it).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// File of `key = value` lines applied before `--set`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    show_config: bool,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Fit 2D models to a grayscale image and log PSNR against size.
    FitImage {
        #[arg(long)]
        image: PathBuf,
    },
    /// Low-rank plus low-resolution versus low-rank plus sparse pareto sweep.
    Decomp {
        #[arg(long)]
        image: PathBuf,
    },
    /// 3D segmentation from silhouettes of a synthetic scene.
    Seg3d {
        /// tomo2d, carved3d or both.
        #[arg(long, default_value = "both")]
        supervision: String,
    },
    /// Mask interpolation on held-out frames of a synthetic video.
    Video,
    /// Seed sweep of a tiny video model in every mode.
    Stability,
    /// Interpolation, gradient and rank-bound self-checks.
    Gridcheck,
    /// Assemble the explicit matrix of a random 2D model and report its rank.
    Assemble {
        #[arg(long, default_value = "mul(e1,e2)")]
        expr: String,
        #[arg(long, default_value = "linear")]
        decoder: DecoderKind,
        #[arg(long, default_value_t = 4)]
        k: usize,
        /// Output is size x size.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Line resolution; 0 means `size`.
        #[arg(long, default_value_t = 0)]
        r1: usize,
        #[arg(long, default_value_t = 16)]
        hidden: usize,
        #[arg(long, default_value = "nearest")]
        interp: Interp,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Expr(_) => 1,
        _ => 2,
    }
}

fn overrides(c: &Common) -> Result<Vec<(String, String)>> {
    let mut out = match &c.config {
        Some(p) => config::read_assignments(p)?,
        None => Vec::new(),
    };
    for s in &c.set {
        out.push(config::parse_assignment(s)?);
    }
    Ok(out)
}

/// Resolves a task config; `None` means `--show-config` printed it.
fn resolve<T: Serialize + DeserializeOwned>(c: &Common, defaults: T) -> Result<Option<T>> {
    let cfg = config::resolve(&defaults, &overrides(c)?)?;
    if c.show_config {
        print!("{}", config::render(&cfg)?);
        return Ok(None);
    }
    Ok(Some(cfg))
}

fn with_threads(t: &TrainConfig, threads: usize) -> TrainConfig {
    TrainConfig { threads, ..t.clone() }
}

fn read_image(path: &Path) -> Result<gaplanes::numerics::Tensor> {
    read_pgm(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read image {}: {io}", path.display())),
        other => other,
    })
}

struct Run<'a> {
    common: &'a Common,
    task: &'static str,
    started: u128,
    schemas: Vec<(String, Vec<String>)>,
    params: Vec<(String, usize)>,
}

impl<'a> Run<'a> {
    fn start(common: &'a Common, task: &'static str) -> Result<Self> {
        std::fs::create_dir_all(&common.out)?;
        Ok(Run { common, task, started: ex::unix_ms(), schemas: Vec::new(), params: Vec::new() })
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let mut w = create_csv(&self.common.out.join(name), header)?;
        for r in rows {
            w.row(&r)?;
        }
        self.schemas.push((name.to_string(), header.iter().map(|s| s.to_string()).collect()));
        Ok(())
    }

    fn finish<T: Serialize>(self, cfg: &T) -> Result<()> {
        let m = Manifest {
            task: self.task.to_string(),
            argv: std::env::args().collect(),
            config: serde_json::to_value(cfg)?,
            config_hash: ex::config_hash(cfg)?,
            seed: self.common.seed,
            param_counts: self.params,
            git_describe: ex::git_describe(),
            started_unix_ms: self.started,
            finished_unix_ms: ex::unix_ms(),
            csv_schemas: self.schemas,
        };
        ex::write_manifest(&self.common.out, &m)?;
        println!("wrote {}", self.common.out.display());
        Ok(())
    }
}

fn seg_rows(runs: &[ex::SegRun]) -> Vec<Vec<String>> {
    runs.iter().map(|r| r.row.fields()).collect()
}

fn print_seg(rows: &[ex::SegRow]) {
    for r in rows {
        println!("{:<16} {:<14} {:<11} test IOU {:.4}  train IOU {:.4}  params {}", r.task, r.model, r.mode.to_string(), r.iou_test, r.iou_train, r.params);
    }
}

fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.cmd {
        Cmd::FitImage { image } => {
            let Some(mut cfg) = resolve(c, ex::ImageFitConfig::default())? else { return Ok(()) };
            cfg.train = with_threads(&cfg.train, c.threads);
            let img = read_image(image)?;
            let mut run = Run::start(c, "image_fit")?;
            let rows = ex::run_image_fit(&img, &cfg, c.seed)?;
            for r in &rows {
                println!("{:<14} {:<11} k={:<3} params={:<7} PSNR {:.3} dB", r.method, r.interp, r.k, r.params, r.psnr);
                run.params.push((format!("{}:{}:k{}", r.method, r.interp, r.k), r.params));
            }
            run.csv("image_fit.csv", &ex::ImageFitRow::HEADER, rows.iter().map(|r| r.fields()))?;
            write_pgm(&c.out.join("target.pgm"), &img)?;
            run.finish(&cfg)
        }
        Cmd::Decomp { image } => {
            let Some(cfg) = resolve(c, ex::DecompConfig::default())? else { return Ok(()) };
            let img = read_image(image)?;
            let mut run = Run::start(c, "decomp")?;
            let rows = ex::run_decomp(&img, &cfg)?;
            for r in &rows {
                println!("{:<9} budget {:.4} k={:<3} {:>6}  PSNR {:.3} dB", r.method, r.budget_frac, r.k, r.r_low_or_s, r.psnr);
            }
            run.csv("decomp.csv", &ex::DECOMP_HEADER, rows.iter().map(ex::decomp_fields))?;
            run.finish(&cfg)
        }
        Cmd::Seg3d { supervision } => {
            let sups: Vec<Supervision> = match supervision.as_str() {
                "both" => vec![Supervision::Tomo2d, Supervision::Carved3d],
                s => vec![s.parse()?],
            };
            let Some(mut cfg) = resolve(c, ex::Seg3dConfig::default())? else { return Ok(()) };
            cfg.train_tomo2d = with_threads(&cfg.train_tomo2d, c.threads);
            cfg.train_carved3d = with_threads(&cfg.train_carved3d, c.threads);
            let mut run = Run::start(c, "seg3d")?;
            let sc = ex::SegScene::new(&cfg)?;
            for &v in &sc.test_ids {
                write_pgm(&c.out.join(format!("gt_view{v}.pgm")), &sc.masks[v])?;
            }
            for sup in sups {
                let runs = ex::run_seg3d(&cfg, sup, c.seed)?;
                let rows: Vec<ex::SegRow> = runs.iter().map(|r| r.row.clone()).collect();
                print_seg(&rows);
                for r in &runs {
                    run.params.push((format!("{}:{}:{}", r.row.task, r.row.model, r.row.mode), r.row.params));
                    for (mask, &v) in r.test_masks.iter().zip(&sc.test_ids) {
                        write_pgm(&c.out.join(format!("{sup}_{}_{}_view{v}.pgm", r.row.model, r.row.mode)), mask)?;
                    }
                }
                run.csv(&format!("seg3d_{sup}.csv"), &ex::SegRow::HEADER, seg_rows(&runs))?;
                let sweep = runs.iter().flat_map(|r| {
                    r.sweep.iter().map(move |(t, i)| vec![r.row.task.clone(), r.row.model.clone(), r.row.mode.to_string(), format!("{t}"), format!("{i:.6}")])
                });
                run.csv(&format!("seg3d_{sup}_thresholds.csv"), &ex::SWEEP_HEADER, sweep)?;
            }
            run.finish(&cfg)
        }
        Cmd::Video => {
            let Some(mut cfg) = resolve(c, ex::VideoConfig::default())? else { return Ok(()) };
            cfg.train = with_threads(&cfg.train, c.threads);
            let mut run = Run::start(c, "video")?;
            let rows = ex::run_video(&cfg, c.seed)?;
            print_seg(&rows);
            run.params = rows.iter().map(|r| (format!("{}:{}", r.model, r.mode), r.params)).collect();
            run.csv("video.csv", &ex::SegRow::HEADER, rows.iter().map(|r| r.fields()))?;
            run.finish(&cfg)
        }
        Cmd::Stability => {
            let Some(mut cfg) = resolve(c, ex::StabilityConfig::default())? else { return Ok(()) };
            cfg.train = with_threads(&cfg.train, c.threads);
            let mut run = Run::start(c, "stability")?;
            let runs = ex::run_stability(&cfg)?;
            let mut rows = Vec::new();
            for r in &runs {
                println!(
                    "{:<11} seed {} final loss {:.6e} final test IOU {:.4}",
                    r.mode.to_string(),
                    r.seed,
                    r.log.final_loss().unwrap_or(f64::NAN),
                    r.log.final_metric().unwrap_or(f64::NAN)
                );
                run.params.push((format!("{}:seed{}", r.mode, r.seed), r.params));
                for row in &r.log.rows {
                    rows.push(vec![
                        r.mode.to_string(),
                        r.seed.to_string(),
                        row.step.to_string(),
                        format!("{:.9e}", row.loss),
                        row.metric.map(|m| format!("{m:.6}")).unwrap_or_default(),
                        row.wall_ms.to_string(),
                    ]);
                }
            }
            run.csv("stability.csv", &ex::STABILITY_HEADER, rows)?;
            run.finish(&cfg)
        }
        Cmd::Gridcheck => {
            let checks = selfcheck::run_all(c.seed)?;
            let mut failed = 0;
            for ch in &checks {
                println!("{} {:<28} {}", if ch.passed { "PASS" } else { "FAIL" }, ch.name, ch.detail);
                failed += (!ch.passed) as usize;
            }
            println!("{} checks, {failed} failed", checks.len());
            if failed > 0 {
                return Err(Error::Model(format!("{failed} self-checks failed")));
            }
            Ok(())
        }
        Cmd::Assemble { expr, decoder, k, size, r1, hidden, interp } => {
            let r1 = if *r1 == 0 { *size } else { *r1 };
            let mut spec = ModelSpec::plane(expr, *k, r1, r1, *interp, *decoder, *hidden);
            spec.use_bias = false;
            spec.init_scale = 1.0;
            if *decoder == DecoderKind::Gated && !expr.contains("mul") {
                spec.mode = gaplanes::model::Mode::Semiconvex;
            }
            let model = Model::build(&spec, c.seed, c.seed.wrapping_add(1)).map_err(|e| match e {
                Error::Model(m) => Error::Config(m),
                other => other,
            })?;
            let m = model.assemble_matrix(*size, *size)?;
            let rank = numeric_rank(&m, DEFAULT_RANK_TOL)?;
            std::fs::create_dir_all(&c.out)?;
            write_tensor(&c.out.join("assembled.f32"), &m)?;
            println!("{expr} + {decoder}: {size}x{size}, numeric rank {rank}");
            let comb = ["add", "concat", "mul"].into_iter().find(|p| expr.trim() == format!("{p}(e1,e2)"));
            if let Some(comb) = comb {
                println!("rank bound {}", selfcheck::rank_bound(comb, *decoder, *k, r1, *size, *size));
            }
            Ok(())
        }
    }
}
