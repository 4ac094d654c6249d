//! Implementations of the pipeline subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};

use vesselreg::descnet::{
    evaluate_matching_precision, train_on_images, ConvDescriptorNet, Trainer,
};
use vesselreg::descriptors::{
    mutual_match_classwise, sample_descriptors, DescriptorBlock, MatchSet,
};
use vesselreg::evalkit::{
    case_error, read_control_points, read_manifest, report_from_errors, vtkrs, Category,
    ManifestRow, RegistrationCase, VtkrsCase,
};
use vesselreg::geometry::{
    ransac_homography, scale_points, Correspondence, CorrespondenceSet, Homography, Point2,
};
use vesselreg::imagebuf::Image;
use vesselreg::keypoints::{extract_keypoints, Heatmap, KeypointSet};
use vesselreg::synth::{self, CategoryAnalog, VesselTreeSpec};

use crate::config::PipelineConfig;
use crate::util::{derive_seed, write_atomic, write_atomic_with};
use crate::RegisterArgs;

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Apportions `total` cases to (S, P, A) by the given ratios, largest
/// remainder first, preserving the total exactly.
fn apportion(total: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let sum = ratios.0 + ratios.1 + ratios.2;
    let quota = [
        total as f64 * ratios.0 / sum,
        total as f64 * ratios.1 / sum,
        total as f64 * ratios.2 / sum,
    ];
    let mut counts = [quota[0] as usize, quota[1] as usize, quota[2] as usize];
    let mut rem: Vec<(usize, f64)> = quota
        .iter()
        .enumerate()
        .map(|(i, q)| (i, q - q.floor()))
        .collect();
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut assigned: usize = counts.iter().sum();
    let mut i = 0;
    while assigned < total {
        counts[rem[i % 3].0] += 1;
        assigned += 1;
        i += 1;
    }
    (counts[0], counts[1], counts[2])
}

pub fn synth(cfg: &PipelineConfig, out: &Path, cases: usize, ratios: &str) -> Result<()> {
    let parts: Vec<f64> = ratios
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("bad --ratios '{ratios}'"))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 3 || parts.iter().any(|&p| p < 0.0) || parts.iter().sum::<f64>() <= 0.0 {
        bail!("--ratios expects three non-negative numbers S,P,A");
    }
    let (n_s, n_p, n_a) = apportion(cases, (parts[0], parts[1], parts[2]));

    std::fs::create_dir_all(out)?;
    let spec = VesselTreeSpec {
        image_size: (cfg.synth_size, cfg.synth_size),
        n_branches: cfg.synth_branches,
        vessel_width: (1.2, 2.2),
        n_crossovers: cfg.synth_crossovers,
        n_bifurcations: cfg.synth_bifurcations,
        seed: 0,
    };

    // standalone training images
    let train_dir = out.join("train");
    std::fs::create_dir_all(&train_dir)?;
    for i in 0..cfg.synth_train_images {
        let tree_spec = VesselTreeSpec {
            seed: derive_seed(cfg.seed, 0x7472_6169, i as u64),
            ..spec
        };
        let (img, kps) = synth::generate_tree(&tree_spec)?;
        write_atomic_with(&train_dir.join(format!("img_{i:03}.png")), |tmp| {
            Ok(img.save_png(tmp)?)
        })?;
        write_atomic_with(
            &train_dir.join(format!("img_{i:03}_keypoints.csv")),
            |tmp| Ok(kps.write_csv(tmp)?),
        )?;
    }

    // registration cases
    let mut rows: Vec<ManifestRow> = Vec::new();
    let jobs = [
        (CategoryAnalog::HighOverlap, n_s, "s"),
        (CategoryAnalog::LowOverlap, n_p, "p"),
        (CategoryAnalog::AppearanceChange, n_a, "a"),
    ];
    for (analog, count, prefix) in jobs {
        for i in 0..count {
            let case_seed = derive_seed(cfg.seed, analog.category() as u64 + 1, i as u64);
            let mut case = synth::generate_case(&spec, analog, case_seed)
                .with_context(|| format!("generating case {prefix}{i:03}"))?;
            case.id = format!("{prefix}{i:03}");
            let dir = out.join("cases").join(&case.id);
            synth::save_case(&case, &dir)?;
            rows.push(ManifestRow {
                id: case.id.clone(),
                category: analog.category(),
                control_points_path: PathBuf::from(format!("cases/{}/control_points.txt", case.id)),
                excluded_indices: vec![],
            });
        }
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    vesselreg::evalkit::write_manifest(&out.join("manifest.csv"), &rows)?;
    println!(
        "dataset written to {}: {} S + {} P + {} A cases, {} training images",
        out.display(),
        n_s,
        n_p,
        n_a,
        cfg.synth_train_images
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_train_images(dir: &Path) -> Result<Vec<(Image, KeypointSet)>> {
    let train_dir = dir.join("train");
    if !train_dir.is_dir() {
        bail!("dataset {} has no train/ directory", dir.display());
    }
    let mut names: Vec<PathBuf> = std::fs::read_dir(&train_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    names.sort();
    let mut out = Vec::new();
    for img_path in names {
        let stem = img_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| anyhow!("bad file name {}", img_path.display()))?;
        let kps_path = train_dir.join(format!("{stem}_keypoints.csv"));
        let img = Image::load_png(&img_path)?;
        let kps = KeypointSet::read_csv(&kps_path)
            .with_context(|| format!("keypoints for {}", img_path.display()))?;
        out.push((img, kps));
    }
    if out.is_empty() {
        bail!("no training images found under {}", train_dir.display());
    }
    Ok(out)
}

pub fn train(
    cfg: &PipelineConfig,
    data: &Path,
    out: &Path,
    report_path: Option<&Path>,
    max_steps: Option<usize>,
    val_pairs: usize,
) -> Result<()> {
    let images = load_train_images(data)?;
    let net = ConvDescriptorNet::init(&cfg.net(), cfg.seed);
    let mut trainer = Trainer::new(net, cfg.train());
    let mut report = train_on_images(&mut trainer, &images, max_steps)?;
    if report.epoch_losses.is_empty() {
        bail!("training made no steps; keypoints did not survive augmentation");
    }

    if val_pairs > 0 {
        let manifest = read_manifest(&data.join("manifest.csv"))?;
        let mut pairs = Vec::new();
        for row in manifest.iter().take(val_pairs) {
            let case = synth::load_case(
                &data.join("cases").join(&row.id),
                &row.id,
                CategoryAnalog::from_category(row.category),
            )?;
            pairs.push(synth::eval_pair(&case, &cfg.target())?);
        }
        if !pairs.is_empty() {
            let p =
                evaluate_matching_precision(trainer.net(), &pairs, &cfg.peak(), cfg.eval_tol_px)?;
            report.final_precision = Some(p);
        }
    }

    write_atomic_with(out, |tmp| Ok(trainer.net().save_checkpoint(tmp)?))?;
    if let Some(rp) = report_path {
        write_atomic(rp, &report.to_csv())?;
    }
    let first = report.epoch_losses.first().unwrap();
    let last = report.epoch_losses.last().unwrap();
    println!(
        "trained {} steps over {} epochs: loss {:.6} -> {:.6}; checkpoint {}",
        trainer.steps_taken(),
        report.epoch_losses.len(),
        first,
        last,
        out.display()
    );
    if let Some(p) = report.final_precision {
        println!("validation matching precision: {p:.4}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// detect / describe / match
// ---------------------------------------------------------------------------

pub fn detect(cfg: &PipelineConfig, heatmap: &Path, out: &Path) -> Result<()> {
    let map = Heatmap::load(heatmap)?;
    let kps = extract_keypoints(&map, &cfg.peak());
    write_atomic_with(out, |tmp| Ok(kps.write_csv(tmp)?))?;
    println!("{} keypoints -> {}", kps.len(), out.display());
    Ok(())
}

pub fn describe(image: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let img = Image::load_png(image)?;
    let net = ConvDescriptorNet::load_checkpoint(checkpoint)?;
    let block = net.forward_dense(&img)?;
    write_atomic_with(out, |tmp| Ok(block.save_ckdb(tmp)?))?;
    println!(
        "descriptor block {}x{}x{} -> {}",
        block.width(),
        block.height(),
        block.dim(),
        out.display()
    );
    Ok(())
}

fn matches_csv(matches: &MatchSet, fixed: &KeypointSet, moving: &KeypointSet) -> String {
    let mut out = String::from(
        "fixed_index,moving_index,class,similarity,fixed_x,fixed_y,moving_x,moving_y\n",
    );
    for m in &matches.pairs {
        let f = fixed.points[m.fixed_index].location;
        let v = moving.points[m.moving_index].location;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.fixed_index, m.moving_index, m.class, m.similarity, f.x, f.y, v.x, v.y
        ));
    }
    out
}

pub fn match_descriptors(
    fixed_desc: &Path,
    fixed_kps: &Path,
    moving_desc: &Path,
    moving_kps: &Path,
    out: &Path,
) -> Result<()> {
    let bf = DescriptorBlock::load_ckdb(fixed_desc)?;
    let bm = DescriptorBlock::load_ckdb(moving_desc)?;
    let kf = KeypointSet::read_csv(fixed_kps)?;
    let km = KeypointSet::read_csv(moving_kps)?;
    let df = sample_descriptors(&bf, &kf)?;
    let dm = sample_descriptors(&bm, &km)?;
    let (matches, stats) = mutual_match_classwise(&df, &dm)?;
    write_atomic(out, &matches_csv(&matches, &kf, &km))?;
    println!(
        "{} mutual matches ({} similarity evaluations) -> {}",
        matches.len(),
        stats.total(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// register
// ---------------------------------------------------------------------------

struct StageTimes {
    detect: f64,
    describe: f64,
    matching: f64,
    ransac: f64,
}

impl StageTimes {
    fn to_csv(&self) -> String {
        format!(
            "stage,seconds\ndetect,{}\ndescribe,{}\nmatch,{}\nransac,{}\n",
            self.detect, self.describe, self.matching, self.ransac
        )
    }
}

struct RegistrationOutput {
    homography: Homography,
    matches: MatchSet,
    keypoints_fixed: KeypointSet,
    keypoints_moving: KeypointSet,
    times: StageTimes,
    inliers: usize,
}

/// One single-pass registration: detect (or accept) keypoints, describe,
/// match within classes, robust-fit. Running the pipeline a second time on
/// the aligned pair is deliberately not offered.
fn register_pair(
    cfg: &PipelineConfig,
    net: &ConvDescriptorNet,
    fixed_img: &Image,
    moving_img: &Image,
    fixed_kps: KeypointSet,
    moving_kps: KeypointSet,
    detect_seconds: f64,
) -> Result<RegistrationOutput> {
    let t = Instant::now();
    let bf = net.forward_dense(fixed_img)?;
    let bm = net.forward_dense(moving_img)?;
    let df = sample_descriptors(&bf, &fixed_kps)?;
    let dm = sample_descriptors(&bm, &moving_kps)?;
    let describe = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (matches, _) = mutual_match_classwise(&df, &dm)?;
    let matching = t.elapsed().as_secs_f64();

    let t = Instant::now();
    if matches.len() < 4 {
        bail!(
            "no consensus possible: only {} mutual matches (need at least 4)",
            matches.len()
        );
    }
    // upscale from detection resolution to test resolution when configured
    let scale = (cfg.register_scale_x, cfg.register_scale_y);
    let fixed_pts: Vec<Point2> = scale_points(
        &matches
            .pairs
            .iter()
            .map(|m| fixed_kps.points[m.fixed_index].location)
            .collect::<Vec<_>>(),
        scale,
    )?;
    let moving_pts: Vec<Point2> = scale_points(
        &matches
            .pairs
            .iter()
            .map(|m| moving_kps.points[m.moving_index].location)
            .collect::<Vec<_>>(),
        scale,
    )?;
    let pairs = CorrespondenceSet {
        pairs: fixed_pts
            .iter()
            .zip(&moving_pts)
            .map(|(&fixed, &moving)| Correspondence { fixed, moving })
            .collect(),
        scores: Some(matches.pairs.iter().map(|m| m.similarity).collect()),
    };
    let (homography, mask) =
        ransac_homography(&pairs, &cfg.ransac()).map_err(|e| anyhow!("no consensus: {e}"))?;
    let ransac = t.elapsed().as_secs_f64();

    Ok(RegistrationOutput {
        homography,
        matches,
        keypoints_fixed: fixed_kps,
        keypoints_moving: moving_kps,
        times: StageTimes {
            detect: detect_seconds,
            describe,
            matching,
            ransac,
        },
        inliers: mask.iter().filter(|&&m| m).count(),
    })
}

fn write_registration(out_dir: &Path, prefix: &str, reg: &RegistrationOutput) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let name = |base: &str| {
        if prefix.is_empty() {
            out_dir.join(base)
        } else {
            out_dir.join(format!("{prefix}_{base}"))
        }
    };
    let h_path = if prefix.is_empty() {
        out_dir.join("homography.txt")
    } else {
        out_dir.join(format!("{prefix}.txt"))
    };
    write_atomic(&h_path, &(reg.homography.to_text() + "\n"))?;
    write_atomic(
        &name("matches.csv"),
        &matches_csv(&reg.matches, &reg.keypoints_fixed, &reg.keypoints_moving),
    )?;
    write_atomic(&name("timing.csv"), &reg.times.to_csv())?;
    Ok(())
}

fn keypoints_from_source(
    cfg: &PipelineConfig,
    heatmap: Option<&Path>,
    csv: Option<&Path>,
) -> Result<KeypointSet> {
    match (heatmap, csv) {
        (Some(h), None) => Ok(extract_keypoints(&Heatmap::load(h)?, &cfg.peak())),
        (None, Some(c)) => Ok(KeypointSet::read_csv(c)?),
        _ => bail!("provide exactly one keypoint source (heatmap or keypoint CSV) per image"),
    }
}

pub fn register(cfg: &PipelineConfig, args: &RegisterArgs) -> Result<()> {
    let net = ConvDescriptorNet::load_checkpoint(&args.checkpoint)?;

    if let Some(dataset) = &args.dataset {
        let manifest = read_manifest(&dataset.join("manifest.csv"))?;
        let mut failures = 0usize;
        for row in &manifest {
            let case_dir = dataset.join("cases").join(&row.id);
            let fixed_img = Image::load_png(&case_dir.join("fixed.png"))?;
            let moving_img = Image::load_png(&case_dir.join("moving.png"))?;
            let t = Instant::now();
            let (kf, km) = if args.oracle_keypoints {
                (
                    KeypointSet::read_csv(&case_dir.join("keypoints_fixed.csv"))?,
                    KeypointSet::read_csv(&case_dir.join("keypoints_moving.csv"))?,
                )
            } else if let Some(hm_dir) = &args.heatmaps {
                (
                    extract_keypoints(
                        &Heatmap::load(&heatmap_path(hm_dir, &row.id, "fixed")?)?,
                        &cfg.peak(),
                    ),
                    extract_keypoints(
                        &Heatmap::load(&heatmap_path(hm_dir, &row.id, "moving")?)?,
                        &cfg.peak(),
                    ),
                )
            } else {
                bail!("dataset mode needs --oracle-keypoints or --heatmaps");
            };
            let detect_seconds = t.elapsed().as_secs_f64();
            match register_pair(cfg, &net, &fixed_img, &moving_img, kf, km, detect_seconds) {
                Ok(reg) => {
                    write_registration(&args.out, &row.id, &reg)?;
                    println!(
                        "{}: {} matches, {} inliers",
                        row.id,
                        reg.matches.len(),
                        reg.inliers
                    );
                }
                Err(e) => {
                    failures += 1;
                    eprintln!("warning: {} failed: {e}", row.id);
                }
            }
        }
        println!(
            "registered {} of {} cases -> {}",
            manifest.len() - failures,
            manifest.len(),
            args.out.display()
        );
        return Ok(());
    }

    let (Some(fixed), Some(moving)) = (&args.fixed, &args.moving) else {
        bail!("single-pair mode needs --fixed and --moving (or use --dataset)");
    };
    let fixed_img = Image::load_png(fixed)?;
    let moving_img = Image::load_png(moving)?;
    let t = Instant::now();
    let kf = keypoints_from_source(
        cfg,
        args.fixed_heatmap.as_deref(),
        args.fixed_keypoints.as_deref(),
    )?;
    let km = keypoints_from_source(
        cfg,
        args.moving_heatmap.as_deref(),
        args.moving_keypoints.as_deref(),
    )?;
    let detect_seconds = t.elapsed().as_secs_f64();
    let reg = register_pair(cfg, &net, &fixed_img, &moving_img, kf, km, detect_seconds)?;
    write_registration(&args.out, "", &reg)?;
    println!(
        "homography -> {} ({} matches, {} inliers)",
        args.out.join("homography.txt").display(),
        reg.matches.len(),
        reg.inliers
    );
    Ok(())
}

fn heatmap_path(dir: &Path, id: &str, side: &str) -> Result<PathBuf> {
    for ext in ["ckdb", "png"] {
        let p = dir.join(format!("{id}_{side}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    bail!("no heatmap {id}_{side}.(ckdb|png) under {}", dir.display())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn eval(manifest_path: &Path, predictions: &Path, out: &Path) -> Result<()> {
    let manifest = read_manifest(manifest_path)?;
    if manifest.is_empty() {
        bail!("manifest {} lists no cases", manifest_path.display());
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut errors: Vec<(Category, f64)> = Vec::new();
    for row in &manifest {
        let cps = read_control_points(&base.join(&row.control_points_path))?;
        let case = RegistrationCase {
            id: row.id.clone(),
            category: row.category,
            control_points: cps,
            excluded_indices: row.excluded_indices.clone(),
        };
        let pred_path = predictions.join(format!("{}.txt", row.id));
        let err = match Homography::read_text(&pred_path) {
            Ok(h) => case_error(&case, &h).unwrap_or(f64::INFINITY),
            Err(_) => {
                eprintln!(
                    "warning: missing or unreadable prediction {}; case counted as failed",
                    pred_path.display()
                );
                f64::INFINITY
            }
        };
        errors.push((row.category, err));
    }

    let (report, curves) = report_from_errors(&errors)?;
    std::fs::create_dir_all(out)?;
    let all: Vec<f64> = errors.iter().map(|(_, e)| *e).collect();
    let overall = vesselreg::evalkit::registration_score(&all)?;
    write_atomic(&out.join("curve_overall.csv"), &overall.to_csv())?;
    for (cat, curve) in &curves {
        write_atomic(&out.join(format!("curve_{cat}.csv")), &curve.to_csv())?;
    }
    let count = |cat| errors.iter().filter(|(c, _)| *c == cat).count();
    let counts = (count(Category::A), count(Category::P), count(Category::S));
    write_atomic(&out.join("summary.csv"), &report.to_csv(counts))?;
    println!(
        "auc overall {:.4} | A {:.4} P {:.4} S {:.4} | avg {:.4} weighted {:.4} -> {}",
        report.auc_overall,
        report.auc_a,
        report.auc_p,
        report.auc_s,
        report.avg,
        report.weighted_avg,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// vtkrs
// ---------------------------------------------------------------------------

pub fn vtkrs_cmd(
    cfg: &PipelineConfig,
    dataset: &Path,
    checkpoint: &Path,
    oracle_keypoints: bool,
    out: &Path,
) -> Result<()> {
    if !oracle_keypoints {
        bail!("vtkrs currently requires --oracle-keypoints (no heatmap directory support)");
    }
    let net = ConvDescriptorNet::load_checkpoint(checkpoint)?;
    let manifest = read_manifest(&dataset.join("manifest.csv"))?;
    let base = dataset;
    let mut cases = Vec::new();
    for row in &manifest {
        let case_dir = dataset.join("cases").join(&row.id);
        let fixed_img = Image::load_png(&case_dir.join("fixed.png"))?;
        let moving_img = Image::load_png(&case_dir.join("moving.png"))?;
        let kf = KeypointSet::read_csv(&case_dir.join("keypoints_fixed.csv"))?;
        let km = KeypointSet::read_csv(&case_dir.join("keypoints_moving.csv"))?;
        let bf = net.forward_dense(&fixed_img)?;
        let bm = net.forward_dense(&moving_img)?;
        let df = sample_descriptors(&bf, &kf)?;
        let dm = sample_descriptors(&bm, &km)?;
        let (matches, _) = mutual_match_classwise(&df, &dm)?;
        let cps = read_control_points(&base.join(&row.control_points_path))?;
        cases.push(VtkrsCase {
            case: RegistrationCase {
                id: row.id.clone(),
                category: row.category,
                control_points: cps,
                excluded_indices: row.excluded_indices.clone(),
            },
            keypoints_fixed: kf,
            keypoints_moving: km,
            matches,
        });
    }
    let outcome = vtkrs(&cases, &cfg.ransac())?;
    write_atomic(out, &outcome.to_csv())?;
    for (id, n) in &outcome.skipped {
        eprintln!("note: case {id} had fewer than 4 pairs at n = {n}; counted as failed");
    }
    println!(
        "vtkrs {:.4} over n = 3..25 -> {}",
        outcome.score,
        out.display()
    );
    Ok(())
}
