//! Command-line front end: loads prompt sets and configuration, runs the
//! passes for each set and writes latents, audit logs, metrics and slices.

pub mod prompts;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    dynamic_degree_with, render_frames, set_consistency, write_pgm, yt_slice, BlockMatching,
    FeatureExtractorRegistry, MeanSem, MetricsReport,
};
use crate::par::Parallelism;
use crate::pipeline::{Mode, Pipeline, StoryboardConfig};
use crate::seeding::sha256_hex;
use crate::subject_mask::{compute_masks, SegmenterRegistry};

pub use prompts::{load_prompts, parse_prompts, prompts_to_yaml, ShotPromptSet};

/// Marker left in the output directory when a run fails.
pub const FAILED_MARKER: &str = "FAILED";
/// Latent images are rendered at this many pixels per patch.
pub const RENDER_SCALE: usize = 4;

#[derive(Parser, Debug, Clone)]
#[command(name = "storyboard", version, about = "Generate consistent multi-shot toy storyboards")]
pub struct Args {
    /// YAML configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// YAML prompt sets: name -> {subject, style, settings}.
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, env = "STORYBOARD_OUT", default_value = "storyboard_out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Last pass to run: vanilla, consistent or refined.
    #[arg(long, default_value = "refined")]
    pub mode: Mode,
    #[arg(long)]
    pub t_pres: Option<u32>,
    #[arg(long)]
    pub q_dropout: Option<f64>,
    #[arg(long)]
    pub sub_batch: Option<usize>,
    /// Comma-separated anchor shot ids.
    #[arg(long, value_delimiter = ',')]
    pub anchors: Option<Vec<usize>>,
}

/// Defaults, then the config file, then flags.
pub fn effective_config(args: &Args) -> Result<StoryboardConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            if text.trim().is_empty() {
                StoryboardConfig::default()
            } else {
                serde_yaml::from_str(&text)?
            }
        }
        None => StoryboardConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.t_pres {
        cfg.t_pres = t;
    }
    if let Some(q) = args.q_dropout {
        cfg.q_dropout = q;
    }
    if let Some(b) = args.sub_batch {
        cfg.sub_batch = Some(b);
    }
    if let Some(a) = &args.anchors {
        cfg.anchors = Some(a.clone());
    }
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub set: String,
    pub subject: String,
    pub prompts: Vec<String>,
    /// Effective configuration with anchors resolved.
    pub config: StoryboardConfig,
    pub prompt_file_sha256: String,
    pub seed: u64,
    pub seed_fingerprint: String,
    pub modes: Vec<Mode>,
    /// SHA-256 of each pass's latent dump.
    pub pass_fingerprints: BTreeMap<Mode, String>,
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SetOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

/// Runs every prompt set of `prompts_path` into `out/<set name>/`.
pub fn run_storyboard(args: &Args) -> Result<Vec<SetOutcome>> {
    let result = run_inner(args);
    if let Err(e) = &result {
        fs::create_dir_all(&args.out)?;
        fs::write(args.out.join(FAILED_MARKER), format!("{e}\n"))?;
    }
    result
}

fn run_inner(args: &Args) -> Result<Vec<SetOutcome>> {
    fs::create_dir_all(&args.out)?;
    let marker = args.out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let cfg = effective_config(args)?;
    let prompt_bytes = fs::read(&args.prompts)?;
    let sets = parse_prompts(&String::from_utf8_lossy(&prompt_bytes))?;
    if sets.is_empty() {
        return Err(Error::config("prompt file contains no sets"));
    }
    let prompt_hash = sha256_hex(&prompt_bytes);
    sets.iter()
        .map(|set| run_set(args, &cfg, set, &prompt_hash))
        .collect()
}

fn run_set(args: &Args, cfg: &StoryboardConfig, set: &ShotPromptSet, prompt_hash: &str) -> Result<SetOutcome> {
    let mut cfg = cfg.clone();
    cfg.anchors = Some(cfg.resolved_anchors(set.shots())?);
    let dir = args.out.join(&set.name);
    fs::create_dir_all(dir.join("latents"))?;
    fs::create_dir_all(dir.join("slices"))?;
    let prompts = set.full_prompts();
    let mut pipe = Pipeline::new(cfg.clone(), set.subject.clone(), prompts.clone())?;
    let modes: Vec<Mode> = Mode::ALL.into_iter().filter(|&m| m <= args.mode).collect();
    let mut artifacts = Vec::new();
    let mut pass_fingerprints = BTreeMap::new();
    let mut report = MetricsReport::default();
    let segmenter = SegmenterRegistry::default().get(&cfg.segmenter)?;
    let extractor = FeatureExtractorRegistry::default().get("masked-mean")?;
    let par = Parallelism::default();
    let side = cfg.model.patches_per_side;

    for &mode in &modes {
        let start = std::time::Instant::now();
        let run = pipe.run(mode)?;
        log::info!("{}: {mode} pass in {:.2?}", set.name, start.elapsed());

        let latents_rel = format!("latents/{mode}.tensor");
        let bytes = run.outputs.to_bytes();
        fs::write(dir.join(&latents_rel), &bytes)?;
        pass_fingerprints.insert(mode, sha256_hex(&bytes));
        artifacts.push(latents_rel);

        let audit_rel = format!("audit_{mode}.jsonl");
        run.audit.write_jsonl(BufWriter::new(File::create(dir.join(&audit_rel))?))?;
        artifacts.push(audit_rel);

        let masks = compute_masks(&run.outputs, &set.subject, segmenter.as_ref(), par)?;
        if set.shots() >= 2 {
            let c = set_consistency(&run.outputs, &masks, extractor.as_ref(), par)?;
            report.push(format!("{mode}.set_consistency"), c.set_consistency);
            report.push(format!("{mode}.subject_consistency"), c.subject_consistency);
        } else {
            log::warn!("{}: one shot, set consistency skipped", set.name);
        }

        let frames = render_frames(&run.outputs, side, 0, RENDER_SCALE)?;
        let bm = BlockMatching {
            block: 8,
            radius: cfg.flow_radius,
        };
        let mut scores = Vec::new();
        let mut dynamic = Vec::new();
        for s in 0..set.shots() {
            let video = frames.sub(&[s]);
            if cfg.model.frames >= 2 {
                let d = dynamic_degree_with(&video, cfg.flow_threshold, bm)?;
                scores.push(d.score);
                dynamic.push(if d.dynamic { 1.0 } else { 0.0 });
            }
            let (slice, _) = yt_slice(&video, None)?;
            let rel = format!("slices/{mode}_shot{s}.pgm");
            write_pgm(dir.join(&rel), &slice)?;
            artifacts.push(rel);
        }
        if !scores.is_empty() {
            report.push(format!("{mode}.dynamic_degree"), MeanSem::of(&scores));
            report.push(format!("{mode}.dynamic_fraction"), MeanSem::of(&dynamic));
        }

        if mode == Mode::Vanilla {
            let cache = pipe.cache().expect("vanilla pass fills the cache");
            write_json(&dir.join("cache_index.json"), &cache.index())?;
            artifacts.push("cache_index.json".into());
        }
    }

    report.write_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?))?;
    report.write_json(BufWriter::new(File::create(dir.join("metrics.json"))?))?;
    artifacts.push("metrics.csv".into());
    artifacts.push("metrics.json".into());

    let manifest = Manifest {
        set: set.name.clone(),
        subject: set.subject.clone(),
        prompts,
        seed: cfg.seed,
        seed_fingerprint: pipe
            .cache()
            .map(|c| c.seed_fingerprint().to_string())
            .unwrap_or_default(),
        config: cfg,
        prompt_file_sha256: prompt_hash.to_string(),
        modes,
        pass_fingerprints,
        artifacts,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(SetOutcome { dir, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(extra: &[&str]) -> Args {
        let mut v = vec!["storyboard", "--prompts", "p.yaml", "--out", "o"];
        v.extend_from_slice(extra);
        Args::try_parse_from(v).unwrap()
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.yaml");
        fs::write(&path, "t_pres: 700\nseed: 4\nq_dropout: 0.2\n").unwrap();
        let p = path.to_str().unwrap();
        let a = args(&["--config", p, "--seed", "11", "--anchors", "0,2"]);
        let cfg = effective_config(&a).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.t_pres, 700);
        assert_eq!(cfg.q_dropout, 0.2);
        assert_eq!(cfg.anchors, Some(vec![0, 2]));
        assert_eq!(cfg.sampler_steps, 50);
    }

    #[test]
    fn mode_flag_parses() {
        assert_eq!(args(&["--mode", "vanilla"]).mode, Mode::Vanilla);
        assert_eq!(args(&[]).mode, Mode::Refined);
        assert!(Args::try_parse_from(["storyboard", "--prompts", "p", "--mode", "x"]).is_err());
    }
}
