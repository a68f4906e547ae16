use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mffa::dataio::manifest::{Dataset, DatasetManifest, VideoEntry, MANIFEST_FILE, MANIFEST_VERSION};
use mffa::dataio::pnm::{load_pgm_mask, load_ppm, mask_path, save_pgm_mask, save_ppm};
use mffa::dataio::toy::{gen_toy_dataset, ToyConfig};
use mffa::frame::{image_tensor, Mask};
use mffa::metrics::overlay;
use mffa::par::{self, Exec};
use mffa::synthseq::{synthesize_sequence, SynthesisRanges};
use mffa::trainer::{evaluate, train, Checkpoint, TrainConfig, TrainSet};
use mffa::{gradsuite, Error};

#[derive(Parser)]
#[command(name = "mffa", version, about = "Recurrent multi-frame feature aggregation for instrument segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural toy-surgery dataset.
    GenToydata {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a synthetic sequence from one labeled frame.
    Synth {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the labeled frames of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        overlays: Option<PathBuf>,
        /// Only evaluate videos of this fold.
        #[arg(long)]
        fold: Option<u32>,
        /// Segment every k-th frame (defaults to the checkpoint's eval stride).
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Segment every frame of a directory in name order.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every op and the whole model.
    Gradcheck {
        /// Check every model variant at every coordinate.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Exit status and message of a failed command.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_validation() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn print_json(v: &impl serde::Serialize) -> CmdResult {
    println!("{}", serde_json::to_string_pretty(v).map_err(Error::from)?);
    Ok(())
}

fn gen_toydata(config: &Path, seed: u64, out: &Path) -> CmdResult {
    let text = fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let cfg: ToyConfig = serde_json::from_str(&text).map_err(Error::from)?;
    let report = gen_toy_dataset(&cfg, seed, out, Exec::Parallel)?;
    print_json(&report)
}

fn synth(input: &Path, mask: &Path, n: usize, seed: u64, out: &Path) -> CmdResult {
    let frame = load_ppm(input)?;
    let label = load_pgm_mask(mask)?;
    if frame.dimensions() != label.dimensions() {
        return Err(invalid("frame and mask extents differ"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = synthesize_sequence(&frame, &label, n, &mut rng, &SynthesisRanges::default())?;
    let mut frames = Vec::with_capacity(n);
    for (i, (img, m)) in s.sequence.frames.iter().zip(&s.sequence.labels).enumerate() {
        let rel = format!("frame_{i:04}.ppm");
        save_ppm(&out.join(&rel), img)?;
        save_pgm_mask(&out.join(format!("frame_{i:04}.pgm")), m.as_ref().expect("synthetic frames are labeled"))?;
        frames.push(rel);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        frame_size: [frame.width(), frame.height()],
        videos: vec![VideoEntry {
            id: "synthetic".into(),
            labeled_indices: (0..n).collect(),
            frames,
            fold: 0,
        }],
    };
    manifest.save(&out.join(MANIFEST_FILE))?;
    print_json(&s.params)
}

fn train_cmd(config: &Path, data: &Path, out: &Path) -> CmdResult {
    let cfg = TrainConfig::load(config)?;
    let ds = Dataset::open(data)?;
    let videos = ds.load_all(false, Exec::Parallel)?;
    let set = TrainSet::from_videos(&videos, &cfg);
    set.validate(&cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).map_err(Error::from)?).map_err(|e| Error::io(&cfg_path, e))?;
    let outcome = train(&cfg, &set, Some(out))?;
    let summary = serde_json::json!({
        "epochs_run": outcome.log.len(),
        "final_loss": outcome.log.last().map(|l| l.loss_total),
        "heldout_mdsc": outcome.evals.last().map(|e| e.mean_dsc),
    });
    print_json(&summary)
}

fn eval_cmd(ckpt: &Path, data: &Path, report: &Path, overlays: Option<&Path>, fold: Option<u32>, stride: Option<usize>) -> CmdResult {
    let ck = Checkpoint::load(ckpt)?;
    let ds = Dataset::open(data)?;
    let mut manifest = ds.manifest.clone();
    if let Some(f) = fold {
        manifest.videos.retain(|v| v.fold == f);
        if manifest.videos.is_empty() {
            return Err(invalid(format!("no video belongs to fold {f}")));
        }
    }
    let ds = Dataset { manifest, ..ds };
    let videos = ds.load_all(false, Exec::Parallel)?;
    let stride = stride.unwrap_or(ck.config.eval_stride);
    let (rep, evals) = evaluate(&ck.model, &videos, stride, Exec::Parallel)?;
    let text = serde_json::to_string_pretty(&rep).map_err(Error::from)?;
    mffa::dataio::pnm::write(report, text.as_bytes())?;
    if let Some(dir) = overlays {
        for (v, e) in videos.iter().zip(&evals) {
            for (i, pred) in &e.predictions {
                let img = overlay(&v.frames[*i], pred, v.labels[*i].as_ref());
                save_ppm(&dir.join(&v.id).join(format!("frame_{i:04}.ppm")), &img)?;
            }
        }
    }
    eprintln!(
        "mDSC {:.4} ({:.4}) mIoU {:.4} ({:.4}) over {} frames",
        rep.overall.mean_dsc, rep.overall.std_dsc, rep.overall.mean_iou, rep.overall.std_iou, rep.overall.frames
    );
    Ok(())
}

fn infer(ckpt: &Path, frames: &Path, out: &Path) -> CmdResult {
    let ck = Checkpoint::load(ckpt)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(frames)
        .map_err(|e| Error::io(frames, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    if paths.is_empty() {
        return Err(invalid(format!("{} holds no .ppm frames", frames.display())));
    }
    paths.sort();
    let mut state = None;
    for p in &paths {
        let img = load_ppm(p)?;
        let (_, next) = ck.model.infer_step(&image_tensor(&img), state.as_ref())?;
        let name = mask_path(Path::new(p.file_name().expect("file path")));
        save_pgm_mask(&out.join(name), &Mask::from_tensor(&next.mask)?)?;
        state = Some(next);
    }
    eprintln!("segmented {} frames", paths.len());
    Ok(())
}

fn gradcheck(full: bool, seed: u64) -> CmdResult {
    let checks = gradsuite::run(seed, full)?;
    let mut failed = 0;
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!c.passed());
        println!("{verdict:4} {:40} {:14} max rel err {:.3e}", c.name, c.shape, c.max_error);
    }
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        return Err(Failure {
            code: 2,
            message: format!("{failed} gradient checks exceeded the tolerance"),
        });
    }
    Ok(())
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenToydata { config, seed, out } => gen_toydata(&config, seed, &out),
        Command::Synth {
            input,
            mask,
            n,
            seed,
            out,
        } => synth(&input, &mask, n, seed, &out),
        Command::Train { config, data, out } => train_cmd(&config, &data, &out),
        Command::Eval {
            ckpt,
            data,
            report,
            overlays,
            fold,
            stride,
        } => eval_cmd(&ckpt, &data, &report, overlays.as_deref(), fold, stride),
        Command::Infer { ckpt, frames, out } => infer(&ckpt, &frames, &out),
        Command::Gradcheck { full, seed } => gradcheck(full, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match par::with_threads(par::thread_cap(), || run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
