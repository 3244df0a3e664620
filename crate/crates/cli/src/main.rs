use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use unitrack::data::{
    generate_sequence, load_box_file, load_mask_folder, write_box_file, write_mask_folder, write_rgb_png,
    SequenceSample,
};
use unitrack::engine::metrics::{eval_vot_objects, MetricsReport, SequenceMetrics};
use unitrack::engine::viz::{render_overlay, render_side_maps};
use unitrack::engine::{evaluate, load_checkpoint, reference_for, save_checkpoint, Tracker, Trainer};
use unitrack::losses::InitFormat;
use unitrack::propagation::MemoryConfig;
use unitrack::uidm::IdAssignment;
use unitrack::{Config, HeadKind, Model};

#[derive(Parser)]
#[command(name = "unitrack", version, about = "Box/mask unified multi-object tracking and segmentation")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic sequences as mask folders.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Seed of the first sequence; sequence `i` uses `first_seed + i`.
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
    },
    /// Train on synthetic sequences and write a checkpoint.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Directory for periodic checkpoints.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Per-step losses as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Track one sequence folder from its first frame.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long, value_enum, default_value_t = Init::Mask)]
        init: Init,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score tracking output folders against ground truth.
    Eval {
        #[arg(long, value_enum)]
        task: Task,
        /// A tracking output folder, or a directory of them.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth sequence folder(s), matched to predictions by name.
        #[arg(long)]
        gt: PathBuf,
        /// JSON report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model variant and score it on held-out synthetic sequences.
    Ablate(AblateArgs),
    /// Overlay images of masks, boxes and pinpoint maps for one sequence.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long, value_enum, default_value_t = Init::Mask)]
        init: Init,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct AblateArgs {
    /// Remove the object-path cross-attention of the box ID refiner.
    #[arg(long)]
    no_bidr_ca: bool,
    /// Remove the auxiliary ID reconstruction loss.
    #[arg(long)]
    no_recon: bool,
    #[arg(long, value_enum)]
    head: Option<Head>,
    #[arg(long)]
    steps: Option<usize>,
    /// Number of held-out sequences.
    #[arg(long, default_value_t = 16)]
    held_out: usize,
    #[arg(long, default_value_t = 100_000)]
    held_out_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Mask,
    Box,
}

impl From<Init> for InitFormat {
    fn from(i: Init) -> Self {
        match i {
            Init::Mask => InitFormat::Mask,
            Init::Box => InitFormat::Box,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Vot,
    Vos,
}

#[derive(Clone, Copy, ValueEnum)]
enum Head {
    Corner,
    Pinpoint,
    PinpointImplicit,
}

impl From<Head> for HeadKind {
    fn from(h: Head) -> Self {
        match h {
            Head::Corner => HeadKind::Corner,
            Head::Pinpoint => HeadKind::Pinpoint,
            Head::PinpointImplicit => HeadKind::PinpointImplicit,
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: Option<&Path>, json: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, json).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> Result<(Model, Config)> {
    let ckpt = load_checkpoint(path)?;
    Ok((ckpt.model()?, ckpt.manifest.config.clone()))
}

/// Folders directly holding `frames/`, or the immediate subfolders that do.
fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("frames").is_dir() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("frames").is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no sequence folders under {}", root.display());
    }
    Ok(dirs)
}

fn cmd_synth(cfg: &Config, out: &Path, count: usize, first_seed: u64) -> Result<()> {
    for i in 0..count {
        let seq = generate_sequence(&cfg.synth.with_seed(first_seed + i as u64))?;
        write_mask_folder(&seq, &out.join(&seq.name))?;
    }
    println!("wrote {count} sequences to {}", out.display());
    Ok(())
}

fn cmd_train(
    cfg: Config,
    out: &Path,
    steps: Option<usize>,
    resume: Option<&Path>,
    checkpoint_dir: Option<&Path>,
    log: Option<&Path>,
) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => Trainer::resume(p)?,
        None => Trainer::new(cfg)?,
    };
    if let Some(s) = steps {
        trainer.config.train.steps = s;
    }
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    trainer.run(checkpoint_dir)?;
    trainer.save(out)?;
    if let Some(path) = log {
        let lines: Vec<String> = trainer.logs.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
        fs::write(path, lines.join("\n") + "\n")?;
    }
    let boxes = trainer.logs.iter().filter(|l| l.init == InitFormat::Box).count();
    println!(
        "trained to step {}; {boxes} of {} steps used box initialization; checkpoint {}",
        trainer.step,
        trainer.logs.len(),
        out.display()
    );
    Ok(())
}

fn track_folder(model: &Model, cfg: &Config, seq: &SequenceSample, init: InitFormat) -> Result<Vec<unitrack::FrameOutput>> {
    let mut tracker = Tracker::new(model, cfg.memory.clone());
    let assignment = IdAssignment::sequential(seq.num_objects(), model.cfg.capacity)?;
    let mut outputs = vec![tracker.initialize(&seq.frames[0], &reference_for(seq, init), assignment)?];
    for frame in &seq.frames[1..] {
        outputs.push(tracker.step(frame)?);
    }
    Ok(outputs)
}

fn cmd_track(checkpoint: &Path, sequence: &Path, init: InitFormat, out: &Path) -> Result<()> {
    let (model, cfg) = load_model(checkpoint)?;
    let seq = load_mask_folder(sequence)?;
    let outputs = track_folder(&model, &cfg, &seq, init)?;
    let labels = outputs.iter().map(|o| o.labels.clone()).collect();
    let result = SequenceSample::from_labels(seq.name.clone(), seq.frames.clone(), labels)?;
    write_mask_folder(&result, out)?;
    let boxes: Vec<_> = outputs.iter().map(|o| o.boxes.clone()).collect();
    write_box_file(&out.join("boxes.txt"), &boxes)?;
    let consistency: Vec<String> = outputs
        .iter()
        .map(|o| o.consistency.iter().map(|c| format!("{c:.4}")).collect::<Vec<_>>().join(","))
        .collect();
    fs::write(out.join("consistency.txt"), consistency.join("\n") + "\n")?;
    println!("tracked {} frames of {} into {}", outputs.len(), seq.name, out.display());
    Ok(())
}

fn cmd_eval(task: Task, pred: &Path, gt: &Path, out: Option<&Path>) -> Result<()> {
    let pred_dirs = sequence_dirs(pred)?;
    let gt_root_is_seq = gt.join("frames").is_dir();
    let mut per_sequence = Vec::new();
    for pdir in pred_dirs {
        let name = pdir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        let gdir = if gt_root_is_seq { gt.to_path_buf() } else { gt.join(&name) };
        let truth = load_mask_folder(&gdir)?;
        let (vot, vos) = match task {
            Task::Vot => {
                let p = load_box_file(&pdir.join("boxes.txt"))?;
                let g = if gdir.join("boxes.txt").is_file() { load_box_file(&gdir.join("boxes.txt"))? } else { truth.boxes.clone() };
                let (p, g) = (&p[1.min(p.len())..], &g[1.min(g.len())..]);
                (Some(eval_vot_objects(p, g)?), None)
            }
            Task::Vos => {
                let p = load_mask_folder(&pdir)?;
                let n = truth.num_objects();
                let v = unitrack::engine::eval_vos(&p.labels[1.min(p.len())..], &truth.labels[1..], n)?;
                (None, Some(v))
            }
        };
        per_sequence.push(SequenceMetrics { name: truth.name.clone(), vot, vos, box_iou: None, consistency: None });
    }
    let report = MetricsReport::new(per_sequence);
    match task {
        Task::Vot => eprintln!(
            "AUC={:.3} P={:.3} P_N={:.3}",
            report.summary.auc.unwrap_or(0.0),
            report.summary.precision.unwrap_or(0.0),
            report.summary.norm_precision.unwrap_or(0.0)
        ),
        Task::Vos => eprintln!(
            "J={:.3} F={:.3} G={:.3}",
            report.summary.j.unwrap_or(0.0),
            report.summary.f.unwrap_or(0.0),
            report.summary.g.unwrap_or(0.0)
        ),
    }
    write_json(out, &report.to_json()?)
}

fn cmd_ablate(mut cfg: Config, args: &AblateArgs) -> Result<()> {
    if args.no_bidr_ca {
        cfg.model.dual_cross_attention = false;
    }
    if args.no_recon {
        cfg.model.mask_reconstruction = false;
    }
    if let Some(h) = args.head {
        cfg.model.head = h.into();
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.run(None)?;
    let held_out = (0..args.held_out)
        .map(|i| generate_sequence(&cfg.synth.with_seed(args.held_out_seed + i as u64)))
        .collect::<unitrack::Result<Vec<_>>>()?;
    let memory: &MemoryConfig = &cfg.memory;
    let mask = evaluate(&trainer.model, &held_out, InitFormat::Mask, memory)?;
    let boxed = evaluate(&trainer.model, &held_out, InitFormat::Box, memory)?;
    let report = serde_json::json!({
        "variant": {
            "dual_cross_attention": cfg.model.dual_cross_attention,
            "mask_reconstruction": cfg.model.mask_reconstruction,
            "head": cfg.model.head,
            "steps": cfg.train.steps,
            "seed": cfg.seed,
        },
        "mask_init": mask.summary,
        "box_init": boxed.summary,
    });
    fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    save_checkpoint(&args.out.with_extension("safetensors"), &trainer.model, &cfg, trainer.step, None)?;
    println!(
        "box-init J={:.3} mask-init J={:.3}; report {}",
        boxed.summary.j.unwrap_or(0.0),
        mask.summary.j.unwrap_or(0.0),
        args.out.display()
    );
    Ok(())
}

fn cmd_viz(checkpoint: &Path, sequence: &Path, init: InitFormat, out: &Path) -> Result<()> {
    let (model, cfg) = load_model(checkpoint)?;
    let seq = load_mask_folder(sequence)?;
    fs::create_dir_all(out)?;
    let outputs = track_folder(&model, &cfg, &seq, init)?;
    for (i, (frame, o)) in seq.frames.iter().zip(&outputs).enumerate() {
        let img = render_overlay(frame, o)?;
        write_rgb_png(&out.join(format!("overlay-{i:05}.png")), img.height(), img.width(), &img.to_rgb8())?;
    }
    // Pinpoint maps need the raw decoder output, so replay the second frame.
    if seq.len() > 1 && model.cfg.head == HeadKind::Pinpoint {
        let assignment = IdAssignment::sequential(seq.num_objects(), model.cfg.capacity)?;
        let emb0 = model.encode(&seq.frames[0])?;
        let (entry, _, _) = model.reference_entry(&emb0, &reference_for(&seq, init), &assignment, 0)?;
        let mut memory = unitrack::propagation::MemoryBank::new(cfg.memory.clone());
        memory.write(entry.detached());
        let d = model.decode(&model.encode(&seq.frames[1])?, &memory, &assignment)?;
        if let Some(maps) = &d.boxes.distributions.side_maps {
            for (obj, &slot) in assignment.bank_indices().iter().enumerate() {
                let img = render_side_maps(maps, slot - 1, 16)?;
                let path = out.join(format!("pinpoints-frame00001-object{}.png", obj + 1));
                write_rgb_png(&path, img.height(), img.width(), &img.to_rgb8())?;
            }
        }
    }
    println!("wrote overlays for {} frames to {}", outputs.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth { out, count, first_seed } => cmd_synth(&cfg, out, *count, *first_seed),
        Command::Train { out, steps, resume, checkpoint_dir, log } => {
            cmd_train(cfg, out, *steps, resume.as_deref(), checkpoint_dir.as_deref(), log.as_deref())
        }
        Command::Track { checkpoint, sequence, init, out } => cmd_track(checkpoint, sequence, (*init).into(), out),
        Command::Eval { task, pred, gt, out } => cmd_eval(*task, pred, gt, out.as_deref()),
        Command::Ablate(args) => cmd_ablate(cfg, args),
        Command::Viz { checkpoint, sequence, init, out } => cmd_viz(checkpoint, sequence, (*init).into(), out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
