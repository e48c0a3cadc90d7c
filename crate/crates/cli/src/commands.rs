use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use omnimvs::autodiff::optim::Sgd;
use omnimvs::calib::rig_grid_hash;
use omnimvs::eval::{self, MetricReport};
use omnimvs::io::{read_pfm, write_pfm, write_pgm, write_volume};
use omnimvs::network::{coverage_map, Augmentation, OmniMvsModel, TrainFrame, Trainer, FEATURE_SCALE};
use omnimvs::pipeline::{estimate_classic, estimate_network, Estimate, Method};
use omnimvs::sweeping::build_lookup;
use omnimvs::synthdata::{frame_seed, generate_corpus, read_corpus, read_frame, CorpusManifest};
use omnimvs::{par, Error};

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.txt";

pub fn generate(cfg: &RunConfig, frames: usize) -> Result<()> {
    let m = generate_corpus(&cfg.out, &cfg.rig, &cfg.grid, &cfg.scene, frames, cfg.seed)
        .with_context(|| format!("generating corpus in {}", cfg.out.display()))?;
    info!("wrote {} frames to {}", m.frames.len(), cfg.out.display());
    Ok(())
}

fn load_corpus(cfg: &mut RunConfig, dataset: &Path) -> Result<CorpusManifest> {
    let (manifest, calib) = read_corpus(dataset).with_context(|| format!("reading corpus {}", dataset.display()))?;
    cfg.adopt_calibration(&calib)?;
    Ok(manifest)
}

fn select_frames(manifest: &CorpusManifest, wanted: &[String]) -> Result<Vec<String>> {
    if wanted.is_empty() {
        return Ok(manifest.frames.clone());
    }
    for w in wanted {
        if !manifest.frames.contains(w) {
            return Err(Error::InvalidInput(format!("frame {w} is not in the corpus")).into());
        }
    }
    Ok(wanted.to_vec())
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<OmniMvsModel> {
    let ck = omnimvs::autodiff::checkpoint::Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let expected = rig_grid_hash(&cfg.rig, &cfg.grid);
    match ck.meta.get("rig_grid_hash") {
        Some(h) if *h == expected => {}
        _ => {
            return Err(Error::Config(format!(
                "checkpoint {} was trained for a different rig or grid",
                path.display()
            ))
            .into())
        }
    }
    let (model, _) = OmniMvsModel::from_checkpoint(&ck)?;
    Ok(model)
}

/// 8-bit view of an index map; cells without an estimate are black.
fn index_preview(est: &Estimate, num_spheres: usize) -> Vec<u8> {
    let top = (num_spheres - 1) as f32;
    est.index
        .data
        .iter()
        .zip(&est.valid)
        .map(|(&v, &ok)| if ok { (v / top * 255.0).clamp(0.0, 255.0).round() as u8 } else { 0 })
        .collect()
}

pub fn estimate(mut cfg: RunConfig, dataset: &Path, frames: &[String], checkpoint: Option<&Path>, dump_cost: bool) -> Result<()> {
    let manifest = load_corpus(&mut cfg, dataset)?;
    let names = select_frames(&manifest, frames)?;
    let model = match cfg.method {
        Method::Omnimvs => {
            let path = checkpoint.ok_or_else(|| Error::Config("omnimvs needs --checkpoint".into()))?;
            Some(load_model(&cfg, path)?)
        }
        _ => None,
    };
    let table = match &model {
        Some(_) => Some(build_lookup(&cfg.rig, &cfg.grid, FEATURE_SCALE)?),
        None => None,
    };
    fs::create_dir_all(&cfg.out)?;
    let results = par::map_range(names.len(), |i| -> Result<()> {
        let name = &names[i];
        let (frame, _) = read_frame(&dataset.join(name)).with_context(|| format!("reading frame {name}"))?;
        let est = match (&model, &table) {
            (Some(m), Some(t)) => estimate_network(m, &cfg.rig, t, &frame.images)?,
            _ => estimate_classic(cfg.method, &cfg.rig, &cfg.grid, &frame.images, &cfg.classic)?,
        };
        let dir = cfg.out.join(name);
        fs::create_dir_all(&dir)?;
        let mut stored = est.index.clone();
        for (v, ok) in stored.data.iter_mut().zip(&est.valid) {
            if !ok {
                *v = f32::NAN;
            }
        }
        write_pfm(&dir.join("index.pfm"), &stored)?;
        write_pgm(&dir.join("index.pgm"), cfg.grid.height, cfg.grid.width, &index_preview(&est, cfg.grid.num_spheres))?;
        if dump_cost {
            match &est.cost {
                Some(c) => write_volume(&dir.join("cost.vol"), &c.dims, &c.data)?,
                None => warn!("{} produces no cost volume", cfg.method),
            }
        }
        Ok(())
    });
    results.into_iter().collect::<Result<Vec<_>>>()?;
    info!("{} estimates for {} frames in {}", cfg.method, names.len(), cfg.out.display());
    Ok(())
}

pub struct TrainOptions {
    pub overfit: Option<usize>,
    pub resume: Option<PathBuf>,
}

pub fn train(mut cfg: RunConfig, dataset: &Path, opts: &TrainOptions) -> Result<()> {
    let manifest = load_corpus(&mut cfg, dataset)?;
    if manifest.grid != cfg.grid {
        return Err(Error::Config("the corpus was generated for a different grid".into()).into());
    }
    cfg.network.validate()?;
    let mut names = manifest.frames.clone();
    if let Some(k) = opts.overfit {
        if k == 0 || k > names.len() {
            return Err(Error::Config(format!("--overfit {k} with {} frames in the corpus", names.len())).into());
        }
        names.truncate(k);
    }
    let frames = names
        .iter()
        .map(|n| -> Result<TrainFrame> {
            let (f, _) = read_frame(&dataset.join(n)).with_context(|| format!("reading frame {n}"))?;
            Ok(TrainFrame::new(&cfg.rig, &cfg.grid, &f.images, &f.gt_depth)?)
        })
        .collect::<Result<Vec<_>>>()?;

    let p = &cfg.train;
    let (model, velocity, start) = match &opts.resume {
        Some(path) => {
            let ck = omnimvs::autodiff::checkpoint::Checkpoint::load(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            let step = ck.meta.get("step").and_then(|s| s.parse::<usize>().ok()).unwrap_or(0);
            let (m, v) = OmniMvsModel::from_checkpoint(&ck)?;
            if m.config() != &cfg.network {
                return Err(Error::Config("checkpoint network does not match the run configuration".into()).into());
            }
            (m, v, step)
        }
        None => (OmniMvsModel::new(cfg.network.clone(), cfg.seed)?, None, 0),
    };
    // overfitting runs use a constant rate and no augmentation
    let aug = if opts.overfit.is_some() { Augmentation::none() } else { cfg.augmentation() };
    let mut opt = Sgd::new(p.lr, p.momentum);
    if let Some(v) = velocity {
        opt.set_velocity(v);
    }
    let mut trainer = Trainer::new(model, cfg.rig.clone(), opt, aug, frame_seed(cfg.seed, start))?;
    trainer.step = start;

    let per_epoch = frames.len();
    let total = p.steps.unwrap_or(p.epochs * per_epoch);
    fs::create_dir_all(&cfg.out)?;
    let ckpt_path = cfg.out.join(CHECKPOINT_FILE);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(opts.resume.is_some())
        .write(true)
        .truncate(opts.resume.is_none())
        .open(cfg.out.join(LOSS_FILE))?;
    let meta = |step: usize| {
        let mut m = BTreeMap::new();
        m.insert("rig_grid_hash".to_string(), rig_grid_hash(&cfg.rig, &cfg.grid));
        m.insert("step".to_string(), step.to_string());
        m.insert("seed".to_string(), cfg.seed.to_string());
        m
    };

    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = usize::MAX;
    for step in start..total {
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = (0..per_epoch).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(frame_seed(cfg.seed ^ 0x5eed, epoch)));
            order_epoch = epoch;
        }
        trainer.optimizer.lr = if opts.overfit.is_some() || epoch < p.lr_switch_epoch { p.lr } else { p.lr_late };
        let r = trainer.train_step(&frames[order[step % per_epoch]])?;
        writeln!(log, "{step} {:.6}", r.loss)?;
        if step % 10 == 0 {
            info!("step {step} epoch {epoch} loss {:.4}", r.loss);
        }
        if p.checkpoint_every > 0 && (step + 1) % p.checkpoint_every == 0 {
            trainer.model.save(&ckpt_path, Some(&trainer.optimizer), meta(step + 1))?;
        }
    }
    trainer.model.save(&ckpt_path, Some(&trainer.optimizer), meta(total.max(start)))?;
    info!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    frames: BTreeMap<String, MetricReport>,
    average: MetricReport,
    unmatched: Vec<String>,
}

pub fn evaluate(mut cfg: RunConfig, predictions: &Path, dataset: &Path) -> Result<()> {
    let manifest = load_corpus(&mut cfg, dataset)?;
    fs::create_dir_all(&cfg.out)?;
    let grid = cfg.grid.clone();
    let results = par::map_range(manifest.frames.len(), |i| -> Result<Option<MetricReport>> {
        let name = &manifest.frames[i];
        let pred_path = predictions.join(name).join("index.pfm");
        if !pred_path.exists() {
            return Ok(None);
        }
        let pred = read_pfm(&pred_path)?;
        let (frame, _) = read_frame(&dataset.join(name)).with_context(|| format!("reading frame {name}"))?;
        if (pred.rows, pred.cols) != (frame.gt_index.rows, frame.gt_index.cols) {
            return Err(Error::Shape(format!(
                "{name}: prediction {}x{} but ground truth {}x{}",
                pred.rows, pred.cols, frame.gt_index.rows, frame.gt_index.cols
            ))
            .into());
        }
        let coverage = coverage_map(&cfg.rig, &grid, &frame.gt_depth, 1);
        let ignored = eval::ignore_mask(None, Some(&coverage), grid.cells());
        let err = eval::index_error(&pred.data, &frame.gt_index.data, &ignored, pred.rows, pred.cols, grid.num_spheres)?;
        let dir = cfg.out.join(name);
        fs::create_dir_all(&dir)?;
        eval::write_error_map(&dir, "error", &err, 10.0)?;
        Ok(Some(eval::summarize(&err)?))
    });
    let mut frames = BTreeMap::new();
    let mut unmatched = Vec::new();
    for (name, r) in manifest.frames.iter().zip(results) {
        match r? {
            Some(rep) => {
                frames.insert(name.clone(), rep);
            }
            None => unmatched.push(name.clone()),
        }
    }
    if !unmatched.is_empty() {
        warn!("{} frames have no prediction: {}", unmatched.len(), unmatched.join(", "));
    }
    let reports: Vec<MetricReport> = frames.values().cloned().collect();
    let average = eval::average(&reports).map_err(|_| Error::InvalidInput("no frame could be evaluated".into()))?;
    let mut rows: Vec<(String, MetricReport)> = frames.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    rows.push(("average".into(), average.clone()));
    let mut table = eval::format_table(&rows);
    if !unmatched.is_empty() {
        table.push_str(&format!("unmatched frames: {}\n", unmatched.len()));
    }
    fs::write(cfg.out.join("report.txt"), &table)?;
    let json = serde_json::to_string_pretty(&EvalOutput { frames, average, unmatched })?;
    fs::write(cfg.out.join("report.json"), json + "\n")?;
    print!("{table}");
    Ok(())
}
