use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use sosvae::checkpoint::Checkpoint;
use sosvae::constrained::write_log;
use sosvae::data::{load_directory, Dataset, ImageShape};
use sosvae::edits::{parse_edits, resolve_edits, PixelEdit};
use sosvae::lowrank::DEFAULT_EDIT_LIMIT;
use sosvae::render::{tile_grid, write_png};
use sosvae::trainer::{evaluate as evaluate_checkpoint, Trainer};
use sosvae::workflow::{Draw, SlerpGrid};
use sosvae::Error;

use crate::config::{DataConfig, RunConfig};
use crate::{CliError, EditArgs, EvaluateArgs, InterpolateArgs, SampleArgs, ScaleArgs, ServeArgs, TrainArgs};

const GAP: f64 = 1.0;

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path).map_err(|e| CliError::Runtime(format!("cannot load {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn png(path: &Path, values: &DVector<f64>, shape: ImageShape) -> Result<(), CliError> {
    write_png(path, values.as_slice(), shape).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn dataset_for(config: Option<&Path>, data_dir: Option<&Path>) -> Result<Dataset, CliError> {
    if let Some(dir) = data_dir {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("data directory {} does not exist", dir.display())));
        }
        return load_directory(dir, None, true).map_err(CliError::usage);
    }
    let data = match config {
        Some(path) => RunConfig::load(path)?.data,
        None => DataConfig::default(),
    };
    data.load()
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut run = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        run.train.epochs = epochs;
    }
    if let Some(dir) = &args.data_dir {
        run.data = DataConfig::Directory {
            dir: dir.clone(),
            width: None,
            height: None,
            grayscale: true,
        };
    }
    let out = args.out.clone().unwrap_or(run.output.checkpoint.clone());
    let log_path = args.log.clone().unwrap_or(run.output.log.clone());
    run.train.validate().map_err(CliError::usage)?;
    let dataset = run.data.load()?;
    tracing::info!(images = dataset.len(), shape = ?dataset.shape, "data loaded");

    let mut trainer = match &args.resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(load_checkpoint(path)?, &dataset).map_err(CliError::usage)?;
            if let Some(epochs) = args.epochs {
                t.set_epochs(epochs).map_err(CliError::usage)?;
            }
            t
        }
        None => Trainer::new(run.train.clone(), &dataset).map_err(CliError::usage)?,
    };
    ensure_parent(&out)?;
    ensure_parent(&log_path)?;
    let result = trainer.run_with(|ckpt| ckpt.save(&out));
    write_log(trainer.log(), fs::File::create(&log_path).map_err(CliError::runtime)?)?;
    if let Err(e) = result {
        if let (Error::Diverged { .. }, Some(good)) = (&e, trainer.last_good()) {
            let fallback = last_good_path(&out);
            good.save(&fallback)?;
            return Err(CliError::Runtime(format!("{e}; last good checkpoint written to {}", fallback.display())));
        }
        return Err(e.into());
    }
    trainer.checkpoint().save(&out)?;
    if let Some(last) = trainer.log().last() {
        println!(
            "trained {} epochs: nll {:.3} kl {:.3} entropy {:.3} -> {}",
            trainer.epoch(),
            last.nll,
            last.kl,
            last.entropy,
            out.display()
        );
    }
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let dataset = dataset_for(args.config.as_deref(), args.data_dir.as_deref())?;
    let metrics = evaluate_checkpoint(&ckpt, &dataset).map_err(|e| match e {
        Error::Dimension { .. } => CliError::usage(e),
        other => other.into(),
    })?;
    println!("{}", serde_json::to_string_pretty(&metrics).map_err(CliError::runtime)?);
    Ok(())
}

pub fn sample(args: &SampleArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    if args.count == 0 {
        return Ok(());
    }
    ensure_dir(&args.out_dir)?;
    let shape = ckpt.header.image_shape;
    for i in 0..args.count {
        let draw = Draw::new(&ckpt.model, args.seed.wrapping_add(i as u64))?;
        png(&args.out_dir.join(format!("mean_{i:03}.png")), draw.mean(), shape)?;
        png(&args.out_dir.join(format!("sample_{i:03}.png")), &draw.sample()?, shape)?;
    }
    println!("wrote {} mean/sample pairs to {}", args.count, args.out_dir.display());
    Ok(())
}

pub fn interpolate(args: &InterpolateArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let grid = SlerpGrid::new(&ckpt.model, args.seed, args.steps).map_err(|e| match e {
        Error::InvalidArgument(_) => CliError::usage(e),
        other => other.into(),
    })?;
    for row in 0..args.steps {
        let norms: Vec<f64> = grid.cells[row * args.steps..(row + 1) * args.steps]
            .iter()
            .map(|n| n.omega_p.norm())
            .collect();
        let (lo, hi) = norms.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        tracing::info!(row, min_norm = lo, max_norm = hi, "omega_p norms along row");
    }
    let tiles: Vec<Vec<f64>> = grid.images()?.into_iter().map(|v| v.as_slice().to_vec()).collect();
    let (values, shape) = tile_grid(&tiles, args.steps, args.steps, ckpt.header.image_shape, GAP)?;
    ensure_parent(&args.out)?;
    png(&args.out, &DVector::from_vec(values), shape)?;
    println!("wrote {}x{} grid to {}", args.steps, args.steps, args.out.display());
    Ok(())
}

/// `a..b` or a single index.
pub fn parse_components(text: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Usage(format!("bad component range {text:?}, expected like 0..10"));
    match text.split_once("..") {
        Some((a, b)) => {
            let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if a >= b {
                return Err(bad());
            }
            Ok((a..b).collect())
        }
        None => Ok(vec![text.trim().parse().map_err(|_| bad())?]),
    }
}

/// `start:stop:step`, stop included when the steps land on it.
pub fn parse_scales(text: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Usage(format!("bad scale range {text:?}, expected start:stop:step"));
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let [start, stop, step] = parts[..] else { return Err(bad()) };
    if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    if n > 10_000 {
        return Err(bad());
    }
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

pub fn scale(args: &ScaleArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let rank = ckpt.model.rank();
    let components = match &args.components {
        Some(text) => parse_components(text)?,
        None => (0..rank.min(10)).collect(),
    };
    if let Some(&c) = components.iter().find(|&&c| c >= rank) {
        return Err(CliError::Usage(format!("component {c} out of range, the model has rank {rank}")));
    }
    if components.is_empty() {
        return Err(CliError::Usage("the model has no components to scale".into()));
    }
    let scales = parse_scales(&args.scales)?;
    let draw = Draw::new(&ckpt.model, args.seed)?;
    let rows = draw.scale_sweep(&components, &scales)?;
    let tiles: Vec<Vec<f64>> = rows.into_iter().flatten().map(|v| v.as_slice().to_vec()).collect();
    let (values, shape) = tile_grid(&tiles, components.len(), scales.len(), ckpt.header.image_shape, GAP)?;
    ensure_parent(&args.out)?;
    png(&args.out, &DVector::from_vec(values), shape)?;
    println!(
        "wrote {} component strips of {} scales to {}",
        components.len(),
        scales.len(),
        args.out.display()
    );
    Ok(())
}

/// Float record of an edit run, written next to the PNGs as `edit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub seed: u64,
    pub edits: Vec<PixelEdit>,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

fn read_edits(path: &Path) -> Result<Vec<PixelEdit>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Usage(format!("cannot open edits {}: {e}", path.display())))?;
    parse_edits(file).map_err(CliError::usage)
}

fn check_edits(edits: &[PixelEdit], shape: ImageShape) -> Result<(), CliError> {
    if edits.len() > DEFAULT_EDIT_LIMIT {
        return Err(CliError::Usage(format!("{} edits exceed the limit of {DEFAULT_EDIT_LIMIT}", edits.len())));
    }
    resolve_edits(edits, shape).map(|_| ()).map_err(CliError::usage)
}

pub fn edit(args: &EditArgs) -> Result<(), CliError> {
    let edits = read_edits(&args.edits)?;
    let (shape, before, after) = match (&args.server, &args.checkpoint) {
        (Some(url), _) => edit_remote(url, args.seed, &edits)?,
        (None, Some(path)) => {
            let ckpt = load_checkpoint(path)?;
            let shape = ckpt.header.image_shape;
            check_edits(&edits, shape)?;
            let draw = Draw::new(&ckpt.model, args.seed)?;
            let before = draw.sample()?;
            let after = draw.edit(&before, &edits, shape)?;
            (shape, before, after)
        }
        (None, None) => return Err(CliError::Usage("give --checkpoint or --server".into())),
    };
    ensure_dir(&args.out_dir)?;
    png(&args.out_dir.join("before.png"), &before, shape)?;
    png(&args.out_dir.join("after.png"), &after, shape)?;
    let record = EditRecord {
        seed: args.seed,
        edits,
        before: before.as_slice().to_vec(),
        after: after.as_slice().to_vec(),
    };
    let json = serde_json::to_string(&record).map_err(CliError::runtime)?;
    fs::write(args.out_dir.join("edit.json"), json).map_err(CliError::runtime)?;
    println!("applied {} edits, wrote {}", record.edits.len(), args.out_dir.display());
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::runtime)
}

fn edit_remote(url: &str, seed: u64, edits: &[PixelEdit]) -> Result<(ImageShape, DVector<f64>, DVector<f64>), CliError> {
    let client = sosvae_client::Client::new(url);
    runtime()?.block_on(async {
        let info = client.model().await.map_err(CliError::runtime)?;
        let shape = ImageShape::new(info.width, info.height, info.channels);
        check_edits(edits, shape)?;
        let sample = client.sample(seed).await.map_err(CliError::runtime)?;
        let after = client.edit(&sample.session_id, edits, false).await.map_err(CliError::runtime)?;
        Ok((shape, DVector::from_vec(sample.sample), DVector::from_vec(after.values)))
    })
}

pub fn serve(args: &ServeArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    if let Some(dir) = &args.static_dir {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("static directory {} does not exist", dir.display())));
        }
    }
    let options = sosvae_service::RouterOptions {
        static_dir: args.static_dir.clone(),
        cors_origins: args.cors_origins.clone(),
    };
    let state = Arc::new(sosvae_service::AppState::new(ckpt, args.sessions));
    let app = sosvae_service::router(state, &options).map_err(CliError::usage)?;
    let addr = SocketAddr::new(args.host, args.port);
    runtime()?.block_on(async move {
        let listener = sosvae_service::bind(addr)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {addr}: {e}")))?;
        let bound = listener.local_addr().map_err(CliError::runtime)?;
        println!("listening on http://{bound}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        sosvae_service::run(listener, app, shutdown).await.map_err(CliError::runtime)
    })
}

/// Where `train` writes a fallback checkpoint after divergence.
pub fn last_good_path(out: &Path) -> PathBuf {
    out.with_extension("last_good.ckpt")
}
