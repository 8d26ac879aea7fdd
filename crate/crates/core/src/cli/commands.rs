use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    usage, BankArgs, Command, EvalArgs, GridArgs, InferArgs, MaskSource, OptimizerArgs, PseudoGenArgs, ReportFormat,
    SweepArgs, SynthArgs, TrainArgs,
};
use crate::correspondence::{build_view_bank, generate, CorrespondenceSet, ViewBank};
use crate::featureio::{activation_mask, CorpusManifest, FeatureMap, ForegroundMask, ManifestEntry};
use crate::geometry::{project_vertices, Camera, Mesh, Pose, PoseGrid};
use crate::metrics::{PckReport, PoseEvalReport};
use crate::rendercompare::{
    optimize_pose, read_estimates, train_epochs, write_estimates, NeuralMesh, OptimizeOptions, PoseEstimate,
    TrainingSet,
};
use crate::synth::{write_corpus, PoseSampler, SynthConfig};

pub fn run_command(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::PseudoGen(a) => pseudo_gen(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())?;
            so.flush()?;
            Ok(())
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(usage(msg()))
    }
}

fn grid(a: &GridArgs) -> Result<PoseGrid> {
    check(a.grid_azimuths > 0, || "--grid-azimuths must be positive".into())?;
    check(!a.grid_elevations.is_empty(), || {
        "--grid-elevations must not be empty".into()
    })?;
    check(a.grid_elevations.iter().all(|e| e.abs() <= 90.0), || {
        "--grid-elevations must lie in [-90, 90] degrees".into()
    })?;
    check(a.grid_distance > 0.0, || "--grid-distance must be positive".into())?;
    Ok(PoseGrid {
        azimuths: a.grid_azimuths,
        elevations: a.grid_elevations.iter().map(|d| d.to_radians()).collect(),
        theta: 0.0,
        distance: a.grid_distance,
    })
}

fn optimizer(g: &GridArgs, a: &OptimizerArgs) -> Result<OptimizeOptions> {
    let opts = OptimizeOptions {
        grid: grid(g)?,
        candidates: a.candidates,
        angle_step: a.angle_step,
        distance_step: a.distance_step,
        max_iterations: a.max_iterations,
        tolerance: a.tolerance,
        ..OptimizeOptions::default()
    };
    opts.validate().map_err(|e| usage(e.to_string()))?;
    Ok(opts)
}

fn check_training(lambda: f64, temperature: f64, momentum: f64) -> Result<()> {
    check((0.0..=1.0).contains(&lambda), || {
        format!("--lambda must lie in [0, 1], got {lambda}")
    })?;
    check(temperature > 0.0 && temperature.is_finite(), || {
        format!("--temperature must be positive, got {temperature}")
    })?;
    check((0.0..=1.0).contains(&momentum), || {
        format!("--momentum must lie in [0, 1], got {momentum}")
    })
}

fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    CorpusManifest::read(path).with_context(|| format!("reading manifest {}", path.display()))
}

fn read_camera(path: &Path) -> Result<Camera> {
    Camera::read(path).with_context(|| format!("reading camera {}", path.display()))
}

fn read_mesh(path: &Path) -> Result<Mesh> {
    Mesh::read(path).with_context(|| format!("reading template {}", path.display()))
}

/// Builds a view bank from a bank manifest whose entries carry view poses.
pub fn load_bank(manifest: &Path, template: &Path, camera: &Path) -> Result<(ViewBank, Mesh, Camera)> {
    let mesh = read_mesh(template)?;
    let camera = read_camera(camera)?;
    let m = read_manifest(manifest)?;
    let mut poses = Vec::with_capacity(m.len());
    for e in &m.entries {
        poses.push(e.pose.with_context(|| format!("bank view {} has no pose", e.id))?);
    }
    let maps = m
        .entries
        .par_iter()
        .map(|e| FeatureMap::read(&e.feature_path).with_context(|| format!("bank view {}", e.id)))
        .collect::<Result<Vec<_>>>()?;
    let bank = build_view_bank(&mesh, &maps, &poses, &camera).context("building view bank")?;
    log::info!("bank: {} views, {} entries", bank.num_views(), bank.num_entries());
    Ok((bank, mesh, camera))
}

fn synth(a: &SynthArgs) -> Result<()> {
    check(a.count > 0, || "--count must be positive".into())?;
    check(a.channels > 0, || "--channels must be positive".into())?;
    check(a.noise >= 0.0 && a.noise.is_finite(), || {
        "--noise must be non-negative".into()
    })?;
    check((0.0..=1.0).contains(&a.occlusion), || {
        "--occlusion must lie in [0, 1]".into()
    })?;
    check(a.view_strength >= 0.0, || "--view-strength must be non-negative".into())?;
    check(a.distance > 0.0, || "--distance must be positive".into())?;
    check((0.0..1.0).contains(&a.distance_jitter), || {
        "--distance-jitter must lie in [0, 1)".into()
    })?;
    check((0.0..=90.0).contains(&a.max_elevation), || {
        "--max-elevation must lie in [0, 90]".into()
    })?;
    check((0.0..=180.0).contains(&a.max_theta), || {
        "--max-theta must lie in [0, 180]".into()
    })?;
    check(a.bank_nuisance >= 0.0, || "--bank-nuisance must be non-negative".into())?;
    let mesh = match &a.template {
        Some(p) => read_mesh(p)?,
        None => Mesh::car_template(),
    };
    let camera = match &a.camera {
        Some(p) => read_camera(p)?,
        None => SynthConfig::default().camera,
    };
    let cfg = SynthConfig {
        count: a.count,
        channels: a.channels,
        noise: a.noise,
        occlusion: a.occlusion,
        view_strength: a.view_strength,
        seed: a.seed,
        camera,
        poses: PoseSampler {
            max_elevation: a.max_elevation.to_radians(),
            max_theta: a.max_theta.to_radians(),
            distance: a.distance,
            distance_jitter: a.distance_jitter,
        },
        bank_grid: grid(&a.grid)?,
    };
    let paths = write_corpus(&a.out, &cfg, mesh, a.bank_nuisance)
        .with_context(|| format!("writing corpus to {}", a.out.display()))?;
    log::info!("wrote {} images and {} bank views", cfg.count, cfg.bank_grid.len());
    let text = format!(
        "manifest {}\nbank {}\ntemplate {}\ncamera {}\ngenerator {}\n",
        paths.manifest.display(),
        paths.bank_manifest.display(),
        paths.template.display(),
        paths.camera.display(),
        paths.generator.display()
    );
    emit(None, &text)
}

fn load_image(e: &ManifestEntry) -> Result<(FeatureMap, Option<ForegroundMask>)> {
    let map = FeatureMap::read(&e.feature_path).with_context(|| format!("image {}", e.id))?;
    let mask = match &e.mask_path {
        Some(p) => Some(ForegroundMask::read(p, map.height(), map.width()).with_context(|| format!("image {}", e.id))?),
        None => None,
    };
    Ok((map, mask))
}

fn pseudo_gen(a: &PseudoGenArgs) -> Result<()> {
    check_bank_args(&a.bank)?;
    let (bank, _, _) = load_bank(&a.bank.bank, &a.bank.template, &a.bank.camera)?;
    let manifest = read_manifest(&a.manifest)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let rule = a.bank.vote.into();
    let results = manifest
        .entries
        .par_iter()
        .map(|e| -> Result<(String, CorrespondenceSet)> {
            let (map, mask) = load_image(e)?;
            let mask =
                mask.with_context(|| format!("image {}: pseudo-correspondences need a foreground mask", e.id))?;
            let set = generate(&map, &mask, &bank, a.bank.lambda, rule).with_context(|| format!("image {}", e.id))?;
            let path = a.out.join(format!("{}.corr", e.id));
            set.write(&path).with_context(|| format!("image {}", e.id))?;
            Ok((e.id.clone(), set))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut text = String::from("# id\tpose_label\tmatches\n");
    for (id, set) in &results {
        let label = set.pose_label.map_or("-".to_string(), |k| k.to_string());
        writeln!(text, "{id}\t{label}\t{}", set.len()).unwrap();
    }
    emit(None, &text)
}

fn check_bank_args(b: &BankArgs) -> Result<()> {
    check((0.0..=1.0).contains(&b.lambda), || {
        format!("--lambda must lie in [0, 1], got {}", b.lambda)
    })
}

fn init_model(mesh: Mesh, channels: usize, seed: u64, temperature: f64, momentum: f64) -> Result<NeuralMesh> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(NeuralMesh::random(mesh, channels, &mut rng, temperature, momentum)?)
}

fn train(a: &TrainArgs) -> Result<()> {
    check_training(a.bank.lambda, a.temperature, a.momentum)?;
    let (bank, mesh, _) = load_bank(&a.bank.bank, &a.bank.template, &a.bank.camera)?;
    let mut nm = match &a.resume {
        Some(p) => {
            let nm = NeuralMesh::read(p).with_context(|| format!("reading checkpoint {}", p.display()))?;
            if nm.channels() != bank.channels() || nm.num_vertices() != bank.num_vertices() {
                bail!(
                    "checkpoint {} does not match the bank's vertices or channels",
                    p.display()
                );
            }
            nm
        }
        None => init_model(mesh, bank.channels(), a.seed, a.temperature, a.momentum)?,
    };
    let manifest = read_manifest(&a.manifest)?;
    let set = TrainingSet::prepare(&manifest, &bank, a.bank.lambda, a.bank.vote.into())?;
    let report = train_epochs(&mut nm, &set, a.epochs)?;
    nm.write(&a.out)
        .with_context(|| format!("writing checkpoint {}", a.out.display()))?;
    log::info!(
        "trained on {} images ({} skipped), {} steps",
        report.images,
        report.skipped,
        report.steps
    );
    let mut text = String::from("# epoch\tloss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        writeln!(text, "{}\t{l}", i + 1).unwrap();
    }
    emit(None, &text)
}

/// Pose estimates for every entry, in manifest order.
fn estimate_all(
    entries: &[ManifestEntry],
    nm: &NeuralMesh,
    camera: &Camera,
    opts: &OptimizeOptions,
    o: &OptimizerArgs,
) -> Result<Vec<(String, PoseEstimate)>> {
    entries
        .par_iter()
        .map(|e| {
            let (map, mask) = load_image(e)?;
            let mask = match (o.mask_source, mask) {
                (MaskSource::External, Some(m)) => m,
                (src, _) => {
                    if src == MaskSource::External {
                        log::warn!("image {}: no mask, using the activation mask", e.id);
                    }
                    activation_mask(&map, nm.features(), nm.background(), o.activation_threshold)
                        .with_context(|| format!("image {}", e.id))?
                }
            };
            let est = optimize_pose(&map, nm, camera, &mask, opts).with_context(|| format!("image {}", e.id))?;
            Ok((e.id.clone(), est))
        })
        .collect()
}

fn infer(a: &InferArgs) -> Result<()> {
    let opts = optimizer(&a.grid, &a.optimizer)?;
    let nm =
        NeuralMesh::read(&a.checkpoint).with_context(|| format!("reading checkpoint {}", a.checkpoint.display()))?;
    let camera = read_camera(&a.camera)?;
    let manifest = read_manifest(&a.manifest)?;
    let est = estimate_all(&manifest.entries, &nm, &camera, &opts, &a.optimizer)?;
    match &a.out {
        Some(p) => write_estimates(p, &est).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut text = String::from("# id\tazimuth\televation\ttheta\tdistance\tnll\tconverged\n");
            for (id, e) in &est {
                writeln!(text, "{}", e.to_line(id)).unwrap();
            }
            emit(None, &text)
        }
    }
}

fn ground_truth(m: &CorpusManifest) -> Result<Vec<(&str, Pose)>> {
    m.entries
        .iter()
        .map(|e| {
            let p = e
                .pose
                .with_context(|| format!("manifest entry {} has no ground-truth pose", e.id))?;
            Ok((e.id.as_str(), p))
        })
        .collect()
}

/// Pose report pairing each manifest entry with its estimate by id.
pub(crate) fn pose_report(manifest: &CorpusManifest, est: &[(String, PoseEstimate)]) -> Result<PoseEvalReport> {
    let gt = ground_truth(manifest)?;
    let lookup: std::collections::HashMap<&str, &PoseEstimate> = est.iter().map(|(i, e)| (i.as_str(), e)).collect();
    let mut pred = Vec::with_capacity(gt.len());
    let mut truth = Vec::with_capacity(gt.len());
    for (id, p) in gt {
        let e = lookup.get(id).with_context(|| format!("no estimate for {id}"))?;
        pred.push(e.pose);
        truth.push(p);
    }
    Ok(PoseEvalReport::from_poses(&pred, &truth)?)
}

/// Pooled PCK: each match's pixel center against the ground-truth projection
/// of its vertex, with the threshold scaled by the foreground box (the image
/// when there is no mask).
fn pck_report(a: &EvalArgs, manifest: &CorpusManifest, dir: &Path) -> Result<PckReport> {
    let (Some(tp), Some(cp)) = (&a.template, &a.camera) else {
        return Err(usage("--correspondences needs --template and --camera"));
    };
    let mesh = read_mesh(tp)?;
    let camera = read_camera(cp)?;
    let mut total = PckReport::empty(a.alpha);
    for (id, pose) in ground_truth(manifest)? {
        let path = dir.join(format!("{id}.corr"));
        let set = CorrespondenceSet::read(&path).with_context(|| format!("image {id}"))?;
        let proj = project_vertices(&mesh, &pose, &camera).with_context(|| format!("image {id}"))?;
        let entry = manifest.entries.iter().find(|e| e.id == id).expect("id from manifest");
        let bbox = match &entry.mask_path {
            Some(p) => {
                let m =
                    ForegroundMask::read(p, camera.height(), camera.width()).with_context(|| format!("image {id}"))?;
                mask_box(&m).unwrap_or((camera.height() as f64, camera.width() as f64))
            }
            None => (camera.height() as f64, camera.width() as f64),
        };
        let mut pred = Vec::with_capacity(set.len());
        let mut gt = Vec::with_capacity(set.len());
        for m in &set.matches {
            let pv = proj
                .projected
                .get(m.vertex)
                .with_context(|| format!("image {id}: vertex {} out of range", m.vertex))?;
            pred.push((m.col as f64 + 0.5, m.row as f64 + 0.5));
            gt.push((pv.u, pv.v));
        }
        let r = crate::metrics::pck(&pred, &gt, bbox, a.alpha).with_context(|| format!("image {id}"))?;
        total = total.merge(&r)?;
    }
    Ok(total)
}

/// `(height, width)` of the foreground's bounding box in pixels.
fn mask_box(m: &ForegroundMask) -> Option<(f64, f64)> {
    let px = m.foreground_pixels();
    let (r0, r1) = px
        .iter()
        .fold((usize::MAX, 0), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let (c0, c1) = px
        .iter()
        .fold((usize::MAX, 0), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    (!px.is_empty()).then(|| ((r1 - r0 + 1) as f64, (c1 - c0 + 1) as f64))
}

fn eval(a: &EvalArgs) -> Result<()> {
    if a.estimates.is_none() && a.correspondences.is_none() {
        return Err(usage("eval needs --estimates and/or --correspondences"));
    }
    check(a.alpha > 0.0, || "--alpha must be positive".into())?;
    let manifest = read_manifest(&a.manifest)?;
    let mut text = String::new();
    if let Some(p) = &a.estimates {
        let est = read_estimates(p).with_context(|| format!("reading estimates {}", p.display()))?;
        let r = pose_report(&manifest, &est)?;
        text.push_str(&match a.format {
            ReportFormat::Text => r.to_text(),
            ReportFormat::Table => r.table(),
        });
    }
    if let Some(d) = &a.correspondences {
        let r = pck_report(a, &manifest, d)?;
        text.push_str(&match a.format {
            ReportFormat::Text => r.to_text(),
            ReportFormat::Table => r.table(),
        });
    }
    emit(a.out.as_deref(), &text)
}

fn sweep(a: &SweepArgs) -> Result<()> {
    check_training(a.bank.lambda, a.temperature, a.momentum)?;
    check(!a.sizes.is_empty() && a.sizes.iter().all(|&s| s > 0), || {
        "--sizes must be a non-empty list of positive sizes".into()
    })?;
    let opts = optimizer(&a.grid, &a.optimizer)?;
    let (bank, mesh, camera) = load_bank(&a.bank.bank, &a.bank.template, &a.bank.camera)?;
    let train_m = read_manifest(&a.train_manifest)?;
    let eval_m = read_manifest(&a.eval_manifest)?;
    ground_truth(&eval_m)?;
    let largest = *a.sizes.iter().max().expect("non-empty");
    if largest > train_m.len() {
        return Err(usage(format!(
            "size {largest} exceeds the {} training entries",
            train_m.len()
        )));
    }
    let prefix = CorpusManifest::new(train_m.entries[..largest].to_vec());
    let full = TrainingSet::prepare(&prefix, &bank, a.bank.lambda, a.bank.vote.into())?;
    let mut text = String::from("# size\timages\tacc_pi_6\tacc_pi_18\tmedian_error\n");
    for &size in &a.sizes {
        let wanted: std::collections::HashSet<&str> = train_m.entries[..size].iter().map(|e| e.id.as_str()).collect();
        let set = TrainingSet {
            items: full
                .items
                .iter()
                .filter(|i| wanted.contains(i.id.as_str()))
                .cloned()
                .collect(),
            skipped: size - full.items.iter().filter(|i| wanted.contains(i.id.as_str())).count(),
        };
        let mut nm = init_model(mesh.clone(), bank.channels(), a.seed, a.temperature, a.momentum)?;
        train_epochs(&mut nm, &set, a.epochs).with_context(|| format!("size {size}"))?;
        let est = estimate_all(&eval_m.entries, &nm, &camera, &opts, &a.optimizer)?;
        let r = pose_report(&eval_m, &est)?;
        log::info!("size {size}: acc_pi_6 {}", r.acc_pi_6);
        writeln!(
            text,
            "{size}\t{}\t{}\t{}\t{}",
            set.len(),
            r.acc_pi_6,
            r.acc_pi_18,
            r.median_error
        )
        .unwrap();
    }
    emit(a.out.as_deref(), &text)
}
