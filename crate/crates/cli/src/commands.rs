//! Command implementations shared by the CLI binary and the integration
//! tests. Every command returns the list of artifact paths it wrote, which
//! the caller records in a run manifest.

use crate::config::{PipelineConfig, PHANTOM_SEED_SALT};
use crate::landmarks::read_landmarks;
use crate::mhd::{read_metaimage, write_metaimage, ElementType};
use crate::ply::{read_ply, write_ply};
use crate::{checkpoint, manifest};
use anyhow::{anyhow, bail, Context, Result};
use std::fs;
use std::path::{Path, PathBuf};
use vgan_core::gan::{train, Direction, TrainState};
use vgan_core::phantom::{generate_phantom_pair, PhantomSpec};
use vgan_core::reconstruct::{marching_cubes, Mesh, DEFAULT_ISOLEVEL};
use vgan_core::rng::derive_seed;
use vgan_core::segment::{keep_largest_components, median_smooth, segment_volume, Mask};
use vgan_core::validate::{
    icp, per_level_report, rigid_prealign, LevelResult, Report, RigidTransform, ICP_TOL_MM,
};
use vgan_core::volume::Volume;

/// Everything a command needs: the parsed config, the hash of its source
/// text, and the resolved output directory.
pub struct Ctx {
    pub cfg: PipelineConfig,
    pub config_sha256: String,
    pub output_dir: PathBuf,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig, config_text: &str, output_override: Option<PathBuf>) -> Result<Self> {
        let output_dir = output_override
            .or_else(|| cfg.data.output_dir.clone())
            .ok_or_else(|| anyhow!("no output directory (set [data] output_dir or --output)"))?;
        fs::create_dir_all(&output_dir)
            .with_context(|| format!("creating {}", output_dir.display()))?;
        Ok(Ctx {
            cfg,
            config_sha256: manifest::sha256_hex(config_text.as_bytes()),
            output_dir,
        })
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.output_dir.join(name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    pub fn write_manifest(&self, command: &str, artifacts: &[PathBuf], name: &str) -> Result<PathBuf> {
        let m = manifest::Manifest::collect(
            command,
            self.config_sha256.clone(),
            self.cfg.seed(),
            &self.output_dir,
            artifacts,
        )?;
        let path = self.output_dir.join(name);
        m.save(&path)?;
        Ok(path)
    }
}

/// Sorted .mhd paths in a directory (sorted for deterministic corpus order).
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "mhd") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".into())
}

fn read_corpus(dir: &Path) -> Result<Vec<(String, Volume)>> {
    let mut out = Vec::new();
    for path in list_volumes(dir)? {
        let v = read_metaimage(&path).with_context(|| format!("reading {}", path.display()))?;
        out.push((stem(&path), v));
    }
    if out.is_empty() {
        bail!("no .mhd volumes in {}", dir.display());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// phantom

pub struct PhantomArgs {
    pub count: usize,
    pub seed: u64,
    pub dims: (usize, usize, usize),
    pub noise_sd: f32,
}

/// Writes `count` MR-style and `count` CT-style phantoms plus ground-truth
/// masks. The MR and CT corpora come from different seeds and curvatures,
/// so they are genuinely unpaired.
pub fn cmd_phantom(out_dir: &Path, args: &PhantomArgs) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut artifacts = Vec::new();
    for i in 0..args.count {
        for (domain, salt) in [("mr", 1u64), ("ct", 2u64)] {
            // keep the curved column inside the volume regardless of dims
            let (nx, ny, _) = args.dims;
            let max_amp = ((nx as f32 - 1.0) / 2.0 - 0.2 * nx.min(ny) as f32) * 0.9;
            let desired = 1.0 + 2.0 * ((i as f32 * 0.37 + salt as f32 * 0.61) % 1.0);
            let spec = PhantomSpec {
                dims: args.dims,
                seed: derive_seed(args.seed, &[PHANTOM_SEED_SALT, salt, i as u64]),
                curvature_amplitude: desired.min(max_amp.max(0.0)),
                noise_sd: args.noise_sd,
                ..PhantomSpec::default()
            };
            let (mr, ct, mask) = generate_phantom_pair(&spec)?;
            let vol = if domain == "mr" { mr } else { ct };
            let vol_path = out_dir.join(format!("{domain}_{i:03}.mhd"));
            let mask_path = out_dir.join(format!("{domain}_{i:03}_mask.mhd"));
            write_metaimage(&vol, &vol_path, ElementType::Float)?;
            write_metaimage(mask.volume(), &mask_path, ElementType::Short)?;
            for p in [&vol_path, &mask_path] {
                artifacts.push(p.clone());
                artifacts.push(p.with_extension("raw"));
            }
        }
    }
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// augment

/// Augments the MR and CT training directories into
/// `<output>/augmented/{mr,ct}` with names `<stem>_aug<k>.mhd`.
pub fn cmd_augment(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let mut artifacts = Vec::new();
    for (domain, salt) in [("mr", 0u64), ("ct", 1u64)] {
        let src = ctx.cfg.require_dir(match domain {
            "mr" => "mr_dir",
            _ => "ct_dir",
        })?;
        let out = ctx.subdir(&format!("augmented/{domain}"))?;
        let corpus = read_corpus(src)?;
        let mut spec = ctx.cfg.augment_spec();
        spec.seed = derive_seed(spec.seed, &[salt]);
        let inputs: Vec<Volume> = corpus.iter().map(|(_, v)| v.clone()).collect();
        let augmented = vgan_core::augment::augment_dataset(&inputs, &spec)?;
        // augment_dataset interleaves [original, copies...] per input
        let per_input = 1 + spec.multiplier;
        for (i, (name, _)) in corpus.iter().enumerate() {
            for k in 1..=spec.multiplier {
                let v = &augmented[i * per_input + k];
                let path = out.join(format!("{name}_aug{k}.mhd"));
                write_metaimage(v, &path, ElementType::Float)?;
                artifacts.push(path.clone());
                artifacts.push(path.with_extension("raw"));
            }
        }
    }
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// train

fn loss_csv_header() -> &'static str {
    "step,adv_ct,adv_mr,cycle,gc,total\n"
}

fn training_corpus(ctx: &Ctx, domain: &str) -> Result<Vec<Volume>> {
    let src = ctx.cfg.require_dir(if domain == "mr" { "mr_dir" } else { "ct_dir" })?;
    let mut vols: Vec<Volume> = read_corpus(src)?.into_iter().map(|(_, v)| v).collect();
    // augmented copies extend the corpus when the augment stage has run
    let aug_dir = ctx.output_dir.join(format!("augmented/{domain}"));
    if aug_dir.is_dir() {
        vols.extend(read_corpus(&aug_dir)?.into_iter().map(|(_, v)| v));
    }
    Ok(vols)
}

/// Trains the translation model on the configured corpora; writes periodic
/// and final checkpoints plus the loss log.
pub fn cmd_train(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let mr = training_corpus(ctx, "mr")?;
    let ct = training_corpus(ctx, "ct")?;
    let ckpt_dir = ctx.subdir("checkpoints")?;
    let log_path = ctx.output_dir.join("train_log.csv");

    let mut state = TrainState::new(ctx.cfg.generator, ctx.cfg.discriminator, ctx.cfg.train)?;
    let mut log = String::from(loss_csv_header());
    let mut artifacts = Vec::new();
    let every = ctx.cfg.train.checkpoint_every;
    let mut result: Result<Vec<PathBuf>> = Ok(Vec::new());
    train(&mut state, &mr, &ct, |st, report| {
        log.push_str(&format!(
            "{},{},{},{},{},{}\n",
            st.step, report.adv_ct, report.adv_mr, report.cycle, report.gc, report.total
        ));
        if every > 0 && st.step % every == 0 && st.step < st.cfg.steps {
            let path = ckpt_dir.join(format!("ckpt_{:06}.bin", st.step));
            if let Err(e) = checkpoint::save_checkpoint(&st.to_checkpoint(), &path) {
                result = Err(e.into());
            } else if let Ok(list) = result.as_mut() {
                list.push(path);
            }
        }
    })?;
    result.as_ref().map_err(|e| anyhow!("{e}"))?;
    artifacts.extend(result.unwrap());

    let final_path = ckpt_dir.join("ckpt_final.bin");
    checkpoint::save_checkpoint(&state.to_checkpoint(), &final_path)?;
    artifacts.push(final_path);
    fs::write(&log_path, log)?;
    artifacts.push(log_path);
    Ok(artifacts)
}

fn load_model(ctx: &Ctx) -> Result<TrainState> {
    let path = ctx.output_dir.join("checkpoints/ckpt_final.bin");
    let ck = checkpoint::load_checkpoint(&path)
        .with_context(|| format!("loading {}", path.display()))?;
    Ok(TrainState::from_checkpoint(
        ctx.cfg.generator,
        ctx.cfg.discriminator,
        ctx.cfg.train,
        &ck,
    )?)
}

// ---------------------------------------------------------------------------
// translate

pub fn cmd_translate(ctx: &Ctx, input: &Path, direction: Direction) -> Result<Vec<PathBuf>> {
    let state = load_model(ctx)?;
    let out_dir = ctx.subdir("translated")?;
    let suffix = match direction {
        Direction::MrToCt => "ct",
        Direction::CtToMr => "mr",
    };
    let mut artifacts = Vec::new();
    let inputs = if input.is_dir() {
        list_volumes(input)?
    } else {
        vec![input.to_path_buf()]
    };
    if inputs.is_empty() {
        bail!("no .mhd volumes in {}", input.display());
    }
    for path in inputs {
        let v = read_metaimage(&path)?;
        let translated = vgan_core::gan::translate(&state.model, &v, direction)?;
        let out = out_dir.join(format!("{}_{suffix}.mhd", stem(&path)));
        write_metaimage(&translated, &out, ElementType::Float)?;
        artifacts.push(out.clone());
        artifacts.push(out.with_extension("raw"));
    }
    Ok(artifacts)
}

// ---------------------------------------------------------------------------
// segment

pub fn cmd_segment(ctx: &Ctx, input: &Path) -> Result<Vec<PathBuf>> {
    let out_dir = ctx.subdir("masks")?;
    let s = &ctx.cfg.segment;
    let v = read_metaimage(input)?;
    let (mask, thresholds) = segment_volume(&v, (s.window_lo, s.window_hi))?;
    let mask = if s.median_radius > 0 {
        median_smooth(&mask, s.median_radius)?
    } else {
        mask
    };
    let mask = if s.keep_components > 0 && mask.count_foreground() > 0 {
        keep_largest_components(&mask, s.keep_components)?
    } else {
        mask
    };
    let name = stem(input);
    let mask_path = out_dir.join(format!("{name}_mask.mhd"));
    write_metaimage(mask.volume(), &mask_path, ElementType::Short)?;
    let mut csv = String::from("slice_index,threshold\n");
    for (i, t) in thresholds.iter().enumerate() {
        match t {
            Some(t) => csv.push_str(&format!("{i},{t}\n")),
            None => csv.push_str(&format!("{i},N/A\n")),
        }
    }
    let csv_path = out_dir.join(format!("{name}_thresholds.csv"));
    fs::write(&csv_path, csv)?;
    Ok(vec![
        mask_path.clone(),
        mask_path.with_extension("raw"),
        csv_path,
    ])
}

// ---------------------------------------------------------------------------
// reconstruct

pub fn cmd_reconstruct(ctx: &Ctx, input: &Path) -> Result<Vec<PathBuf>> {
    let out_dir = ctx.subdir("meshes")?;
    let v = read_metaimage(input)?;
    let mask = Mask::from_volume(v).map_err(|e| anyhow!("{input:?}: {e}"))?;
    let mesh = marching_cubes(&mask, DEFAULT_ISOLEVEL);
    let path = out_dir.join(format!("{}.ply", stem(input)));
    write_ply(&mesh, &path)?;
    Ok(vec![path])
}

// ---------------------------------------------------------------------------
// validate

/// Per-level registration honoring the config's ICP iteration count and
/// optional manual initial transform (which replaces prealignment).
fn per_level_with_config(
    ctx: &Ctx,
    landmarks: &[vgan_core::validate::Landmark],
    mesh: &Mesh,
) -> Result<Vec<LevelResult>> {
    let vc = &ctx.cfg.validate;
    if vc.init_transform.is_none() && vc.icp_iters == 100 {
        return Ok(per_level_report(landmarks, mesh)?);
    }
    let mut levels: Vec<String> = Vec::new();
    for lm in landmarks {
        if !levels.contains(&lm.level) {
            levels.push(lm.level.clone());
        }
    }
    let mut out = Vec::new();
    for level in levels {
        let pts: Vec<[f64; 3]> = landmarks
            .iter()
            .filter(|lm| lm.level == level)
            .map(|lm| lm.point)
            .collect();
        let init = match vc.init_transform {
            Some(t) => RigidTransform {
                rotation: [
                    [t[0], t[1], t[2]],
                    [t[3], t[4], t[5]],
                    [t[6], t[7], t[8]],
                ],
                translation: [t[9], t[10], t[11]],
            },
            None => rigid_prealign(&pts, mesh)?,
        };
        let aligned: Vec<[f64; 3]> = pts.iter().map(|&p| init.apply(p)).collect();
        let (_t, distances) = icp(&aligned, mesh, vc.icp_iters, ICP_TOL_MM)?;
        out.push(LevelResult {
            level,
            mean_mm: distances.iter().sum::<f64>() / distances.len() as f64,
            n_points: pts.len(),
        });
    }
    Ok(out)
}

/// Validates one or more meshes ("patients") against the landmark file and
/// writes the text and CSV reports.
pub fn cmd_validate(ctx: &Ctx, meshes: &[PathBuf], landmarks_path: &Path) -> Result<Vec<PathBuf>> {
    let out_dir = ctx.subdir("reports")?;
    let landmarks = read_landmarks(landmarks_path)?;
    let mut patients = Vec::new();
    for path in meshes {
        let mesh = read_ply(path)?;
        let results = per_level_with_config(ctx, &landmarks, &mesh)
            .with_context(|| format!("validating {}", path.display()))?;
        patients.push((stem(path), results));
    }
    let report = Report::from_patients(&patients);
    let text_path = out_dir.join("report.txt");
    let csv_path = out_dir.join("report.csv");
    fs::write(&text_path, report.to_text())?;
    fs::write(&csv_path, report.to_csv())?;
    Ok(vec![text_path, csv_path])
}

// ---------------------------------------------------------------------------
// pipeline

/// Full chain: augment → train → translate the test volumes → segment →
/// reconstruct → validate (when landmarks are configured). Halts at the
/// first failing stage.
pub fn cmd_pipeline(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    // fail on missing inputs before any work
    ctx.cfg.require_dir("mr_dir")?;
    ctx.cfg.require_dir("ct_dir")?;
    let test_dir = ctx.cfg.require_dir("test_dir")?.to_path_buf();

    let mut artifacts = Vec::new();
    if ctx.cfg.augment.multiplier > 0 {
        artifacts.extend(cmd_augment(ctx)?);
    }
    artifacts.extend(cmd_train(ctx)?);
    let translated = cmd_translate(ctx, &test_dir, Direction::MrToCt)?;
    let translated_mhds: Vec<PathBuf> = translated
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "mhd"))
        .cloned()
        .collect();
    artifacts.extend(translated);
    let mut meshes = Vec::new();
    for t in &translated_mhds {
        let seg = cmd_segment(ctx, t)?;
        let mask = seg[0].clone();
        artifacts.extend(seg);
        let rec = cmd_reconstruct(ctx, &mask)?;
        meshes.push(rec[0].clone());
        artifacts.extend(rec);
    }
    if let Some(lm) = ctx.cfg.validate.landmarks.clone() {
        artifacts.extend(cmd_validate(ctx, &meshes, &lm)?);
    }
    Ok(artifacts)
}
