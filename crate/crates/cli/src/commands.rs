use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use implantformer::centerline::project_crown_to_root;
use implantformer::evaluation::{detections_from_track, evaluate, five_fold_split, EvalConfig, EvalReport, Interpolation};
use implantformer::heatmap::DetectionsFile;
use implantformer::network::{Model, NetConfig};
use implantformer::phantom::{generate_cohort, PhantomConfig};
use implantformer::pipeline::{crown_labels, infer_volume, render_implant_cylinder, track_samples, InferConfig, RenderConfig};
use implantformer::training::{train as fit, write_loss_csv, TrainConfig};
use implantformer::volume::{IntensityWindow, KeypointTrack, Region, Volume};
use implantformer::{Error, Result};

use crate::plot;
use crate::{EvalArgs, GenerateArgs, InferArgs, PlotArgs, PrArgs, ProjectArgs, RenderArgs, TrainArgs};

const VOLUME_EXT: &str = "ivol";
const ROOT_SUFFIX: &str = ".root.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// Files matching a glob, sorted. A pattern that names an existing file is
/// taken literally.
fn expand(pattern: &str) -> Result<Vec<PathBuf>> {
    if Path::new(pattern).is_file() {
        return Ok(vec![PathBuf::from(pattern)]);
    }
    let paths = glob::glob(pattern).map_err(|e| Error::InvalidConfig(format!("bad pattern {pattern:?}: {e}")))?;
    let mut out: Vec<PathBuf> = paths.filter_map(|p| p.ok()).filter(|p| p.is_file()).collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Empty(format!("no files match {pattern:?}")));
    }
    Ok(out)
}

fn patient_id(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

pub fn phantom_generate(a: &GenerateArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(io_err(p))?)?,
        None => PhantomConfig::default(),
    };
    let cohort = generate_cohort(&base, a.patients, a.seed, a.tilt_jitter)?;
    create_dir(&a.out)?;
    for p in &cohort {
        p.volume.save(a.out.join(format!("{}.{VOLUME_EXT}", p.id)))?;
        p.root_track.save(a.out.join(format!("{}{ROOT_SUFFIX}", p.id)))?;
    }
    println!("wrote {} phantoms to {}", cohort.len(), a.out.display());
    Ok(())
}

pub fn project(a: &ProjectArgs, to: Region) -> Result<()> {
    let volume = Volume::load(&a.volume)?;
    let track = KeypointTrack::load(&a.track)?;
    let out = match to {
        Region::Crown => crown_labels(&volume, &track)?,
        Region::Root => project_crown_to_root(&track, &volume.partition().root_zs())?,
    };
    out.save(&a.out)?;
    println!("{} {} points -> {}", out.points.len(), to, a.out.display());
    Ok(())
}

struct Patient {
    id: String,
    volume: Volume,
    root: KeypointTrack,
}

fn load_patients(dir: &Path) -> Result<Vec<Patient>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(io_err(dir))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == VOLUME_EXT))
        .collect();
    paths.sort();
    for path in paths {
        let id = patient_id(&path);
        let track_path = dir.join(format!("{id}{ROOT_SUFFIX}"));
        let mut root = KeypointTrack::load(&track_path)?;
        root.patient = id.clone();
        out.push(Patient {
            id,
            volume: Volume::load(&path)?,
            root,
        });
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("no .{VOLUME_EXT} volumes in {}", dir.display())));
    }
    Ok(out)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let net = match &a.net_config {
        Some(p) => NetConfig::load(p)?,
        None => NetConfig::default(),
    };
    let mut cfg = match &a.train_config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig {
            crop_size: net.image_size,
            ..TrainConfig::default()
        },
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
        cfg.lr_drops.retain(|&d| d < e);
    }
    if let Some(lr) = a.lr {
        cfg.base_lr = lr;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let patients = load_patients(&a.data)?;
    let held_out: Vec<String> = match a.fold {
        Some(f) if f >= 5 => return Err(Error::InvalidConfig(format!("fold {f} out of range 0..5"))),
        Some(f) => {
            let ids: Vec<String> = patients.iter().map(|p| p.id.clone()).collect();
            five_fold_split(&ids, a.split_seed)?.swap_remove(f)
        }
        None => Vec::new(),
    };
    let region = Region::from(a.region);
    let mut samples = Vec::new();
    for p in patients.iter().filter(|p| !held_out.contains(&p.id)) {
        let labels = match region {
            Region::Crown => crown_labels(&p.volume, &p.root)?,
            Region::Root => p.root.clone(),
        };
        samples.extend(track_samples(&p.volume, &labels, IntensityWindow::default())?);
    }
    println!(
        "training on {} {} slices from {} patients ({} held out)",
        samples.len(),
        region,
        patients.len() - held_out.len(),
        held_out.len()
    );
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let (model, records) = fit(&samples, &net, &cfg, |r| {
        if (r.step + 1) % steps_per_epoch == 0 {
            println!("epoch {:>3}  loss {:.4}  lr {:.1e}", r.epoch + 1, r.l_total, r.lr);
        }
    })?;
    model.save(&a.out)?;
    if let Some(log) = &a.log {
        let file = fs::File::create(log).map_err(io_err(log))?;
        write_loss_csv(&records, BufWriter::new(file)).map_err(io_err(log))?;
    }
    println!("saved {}", a.out.display());
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let cfg = InferConfig {
        top_k: a.top_k,
        min_confidence: a.min_confidence,
        ..InferConfig::default()
    };
    create_dir(&a.out)?;
    for path in expand(&a.volume)? {
        let id = patient_id(&path);
        let volume = Volume::load(&path)?;
        let inf = infer_volume(&model, &volume, &id, &cfg)?;
        let crown = DetectionsFile { fold: a.fold, ..inf.crown };
        crown.save(a.out.join(format!("{id}.crown.det.json")))?;
        inf.root_track.save(a.out.join(format!("{id}.root.pred.json")))?;
        detections_from_track(&inf.root_track, 1.0, a.fold).save(a.out.join(format!("{id}.root.det.json")))?;
        match inf.fit {
            Some(f) => println!(
                "{id}: {} crown detections, centerline x = {:.4}z + {:.3}, y = {:.4}z + {:.3}",
                inf.crown_track.points.len(),
                f.k1,
                f.b1,
                f.k2,
                f.b2
            ),
            None => println!("{id}: too few confident crown detections, empty root track"),
        }
    }
    Ok(())
}

/// Detection files as written by `infer`, or plain tracks (confidence 1).
fn load_predictions(path: &Path) -> Result<DetectionsFile> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("slices").is_some() {
        Ok(serde_json::from_value(value)?)
    } else {
        Ok(detections_from_track(&KeypointTrack::load(path)?, 1.0, None))
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let preds = expand(&a.pred)?
        .iter()
        .map(|p| load_predictions(p))
        .collect::<Result<Vec<_>>>()?;
    let gts = expand(&a.gt)?
        .iter()
        .map(KeypointTrack::load)
        .collect::<Result<Vec<_>>>()?;
    // Only ground truths with a matching prediction file are scored.
    let wanted: BTreeMap<&str, ()> = preds.iter().map(|p| (p.patient.as_str(), ())).collect();
    let total = gts.len();
    let gts: Vec<KeypointTrack> = gts.into_iter().filter(|g| wanted.contains_key(g.patient.as_str())).collect();
    if gts.len() < total {
        eprintln!("note: {} ground-truth files have no predictions and are skipped", total - gts.len());
    }
    let cfg = EvalConfig {
        thresholds: a.iou.clone(),
        box_size: a.box_size,
        bin_width: a.bin_width,
        interpolation: if a.eleven_point {
            Interpolation::ElevenPoint
        } else {
            Interpolation::AllPoint
        },
    };
    let report = evaluate(&preds, &gts, &cfg)?;
    report.save(&a.out)?;
    for t in &report.thresholds {
        println!("AP{:.0}: {:.4}  ({})", t.iou * 100.0, t.ap, t.summary);
    }
    println!("within 10 px: {:.1}%", 100.0 * report.histogram.fraction_below(10.0));
    Ok(())
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let volume = Volume::load(&a.volume)?;
    let track = KeypointTrack::load(&a.track)?;
    let cfg = RenderConfig {
        radius: a.radius,
        depth: a.depth,
        value: a.value,
    };
    render_implant_cylinder(&volume, &track, &cfg)?.save(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn plot_hist(a: &PlotArgs) -> Result<()> {
    let report = EvalReport::load(&a.report)?;
    let rows = report.histogram.rows();
    let mut csv = String::from("bin_start,bin_end,count\n");
    for (lo, hi, n) in &rows {
        csv.push_str(&format!("{lo},{hi},{n}\n"));
    }
    write_text(&a.out, &csv)?;
    if let Some(svg) = &a.svg {
        write_text(svg, &plot::histogram_svg(&rows))?;
    }
    Ok(())
}

pub fn plot_pr(a: &PrArgs) -> Result<()> {
    let report = EvalReport::load(&a.common.report)?;
    let t = report
        .thresholds
        .iter()
        .find(|t| (t.iou - a.iou).abs() < 1e-9)
        .ok_or_else(|| Error::InvalidConfig(format!("report has no IoU {} threshold", a.iou)))?;
    let mut csv = String::from("recall,precision\n");
    for p in &t.pr_curve {
        csv.push_str(&format!("{},{}\n", p.recall, p.precision));
    }
    write_text(&a.common.out, &csv)?;
    if let Some(svg) = &a.common.svg {
        let pts: Vec<(f64, f64)> = t.pr_curve.iter().map(|p| (p.recall, p.precision)).collect();
        write_text(svg, &plot::pr_svg(&pts, &format!("AP{:.0} = {:.3}", t.iou * 100.0, t.ap)))?;
    }
    Ok(())
}
