use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtlab::config::{self, DistillOverride};
use mtlab::dataio::voc::{read_id_pool, voc_split_target};
use mtlab::dataio::{
    generate_synthetic, halve_subset, load_dataset, read_image, save_dataset, save_split, split_id_pool, split_partial,
    Dataset, PartialSplit, Sample, SplitTarget, SynthSpec, Task,
};
use mtlab::dethead::{read_predictions, Detection};
use mtlab::distill::KdMode;
use mtlab::experiment;
use mtlab::introspect::{grad_cam, write_composite, write_heatmap_png, CamTarget};
use mtlab::report;
use mtlab::tide::{compare_reports, format_table, tide_deltas, TideConfig, TideReport};
use mtlab::trainer::Checkpoint;
use mtlab::{Error, Result};

#[derive(Parser)]
#[command(name = "mtlab", version, about = "Joint detection and segmentation from partially annotated data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    Synth {
        #[arg(long)]
        n: usize,
        /// TOML file overriding fields of the default generator spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Partition a dataset (or a directory of VOC id lists) into task subsets.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Segmentation subset size; half the data when absent.
        #[arg(long)]
        seg_count: Option<usize>,
        /// Drop half of this task's subset (det or seg).
        #[arg(long)]
        halve: Option<String>,
        /// Write the split as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train as described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Train a student with feature distillation from frozen teachers.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher_det: Option<PathBuf>,
        #[arg(long)]
        teacher_seg: Option<PathBuf>,
        /// 0mse, 1mse, 2mse, or stl.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Break detection errors down by type.
    Tide {
        /// predictions.json
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory holding the ground truth.
        #[arg(long)]
        gt: PathBuf,
        /// Another TIDE report or predictions file to compare against.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Where to write the report; next to the predictions when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grad-CAM heatmap for one image.
    Cam {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// det, det:level:y:x:anchor:class, or seg:class.
        #[arg(long, default_value = "det")]
        target: String,
        /// Output directory for heatmap.png and composite.png.
        #[arg(long)]
        out: PathBuf,
        /// Pyramid levels to average; the finest when omitted.
        #[arg(long, value_delimiter = ',')]
        level: Vec<usize>,
    },
    /// Aggregate finished runs into comparison tables.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_task(s: &str) -> Result<Task> {
    match s.to_ascii_lowercase().as_str() {
        "det" => Ok(Task::Det),
        "seg" => Ok(Task::Seg),
        _ => Err(Error::Config(format!("unknown task {s:?} (det or seg)"))),
    }
}

fn read_synth_spec(path: Option<&Path>) -> Result<SynthSpec> {
    let Some(path) = path else { return Ok(SynthSpec::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let over: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))?;
    let mut base = toml::Table::try_from(SynthSpec::default()).map_err(|e| Error::Config(e.to_string()))?;
    base.extend(over);
    toml::Value::Table(base)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))
}

fn split_cmd(data: &Path, seed: u64, seg_count: Option<usize>, halve: Option<&str>, out: Option<&Path>) -> Result<()> {
    let split: PartialSplit = if data.join("with_mask.txt").is_file() {
        let (with_mask, boxes_only) = read_id_pool(data)?;
        let target = seg_count.map_or(voc_split_target(), SplitTarget::SegCount);
        split_id_pool(with_mask, boxes_only, seed, target)?
    } else {
        let ds = load_dataset(data)?.dataset;
        let target = seg_count.map_or(SplitTarget::SegFraction(0.5), SplitTarget::SegCount);
        split_partial(&ds, seed, target)?
    };
    let split = match halve {
        Some(t) => halve_subset(&split, parse_task(t)?, seed)?,
        None => split,
    };
    if let Some(out) = out {
        save_split(&split, out)?;
    }
    println!("det {} seg {}", split.det_ids.len(), split.seg_ids.len());
    Ok(())
}

fn distill_cmd(cfg: PathBuf, det: Option<PathBuf>, seg: Option<PathBuf>, mode: Option<String>, quiet: bool) -> Result<()> {
    let mut cfg = config::load(&cfg)?.with_env_data_root();
    let mode = mode.map(|m| m.parse::<KdMode>()).transpose()?;
    cfg.apply_distill(DistillOverride {
        mode,
        det_teacher: det,
        seg_teacher: seg,
    })?;
    experiment::run(&cfg, !quiet)?;
    Ok(())
}

fn detections_by_image(ds: &Dataset, path: &Path) -> Result<Vec<Vec<Detection>>> {
    let mut by_id: BTreeMap<&str, Vec<Detection>> = ds.samples.iter().map(|s| (s.id.as_str(), Vec::new())).collect();
    for p in read_predictions(path)? {
        by_id
            .get_mut(p.image_id.as_str())
            .ok_or_else(|| Error::Config(format!("{}: image {} is not in the ground truth", path.display(), p.image_id)))?
            .push(p.detection());
    }
    Ok(ds.samples.iter().map(|s| by_id.remove(s.id.as_str()).unwrap_or_default()).collect())
}

fn tide_cmd(pred: &Path, gt: &Path, compare: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let ds = load_dataset(gt)?.dataset;
    let gts: Vec<_> = ds.samples.iter().map(|s| s.boxes.clone().unwrap_or_default()).collect();
    let config = TideConfig::default();
    let k = ds.num_det_classes();
    let report = tide_deltas(&detections_by_image(&ds, pred)?, &gts, k, &config)?;
    let out = out.map_or_else(|| pred.with_file_name("tide.json"), Path::to_path_buf);
    report.write(&out)?;
    match compare {
        None => print!("{}", format_table(&[("A", &report.deltas)])),
        Some(other) => {
            let other = match TideReport::read(other) {
                Ok(r) => r,
                Err(_) => tide_deltas(&detections_by_image(&ds, other)?, &gts, k, &config)?,
            };
            let c = compare_reports(&other, &report)?;
            print!("{}", format_table(&[("A", &c.a), ("B", &c.b), ("B - A", &c.delta)]));
        }
    }
    Ok(())
}

fn cam_cmd(ckpt: &Path, image: &Path, target: &str, out: &Path, levels: &[usize]) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let target: CamTarget = target.parse()?;
    let img = read_image(image)?;
    let sample = Sample {
        id: image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        image: img.clone(),
        boxes: None,
        mask: None,
        task: None,
    };
    let map = grad_cam(&ck.model, &ck.params, &sample, &target, levels)?;
    write_heatmap_png(&map, &out.join("heatmap.png"))?;
    write_composite(&img, &[&map], &out.join("composite.png"))?;
    println!("{}", out.join("composite.png").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { n, spec, seed, out } => {
            let ds = generate_synthetic(n, &read_synth_spec(spec.as_deref())?, seed)?;
            save_dataset(&ds, &out)?;
            println!("{} samples in {}", ds.samples.len(), out.display());
        }
        Command::Split {
            data,
            seed,
            seg_count,
            halve,
            out,
        } => split_cmd(&data, seed, seg_count, halve.as_deref(), out.as_deref())?,
        Command::Train { config: path, quiet } => {
            let cfg = config::load(&path)?.with_env_data_root();
            if cfg.distill.is_some() {
                return Err(Error::Config("config has a [distill] section; use the distill command".into()));
            }
            let r = experiment::run(&cfg, !quiet)?;
            if let Some(ev) = r.outcome.last_eval {
                println!("{}", serde_json::to_string(&ev.report)?);
            }
        }
        Command::Distill {
            config,
            teacher_det,
            teacher_seg,
            mode,
            quiet,
        } => distill_cmd(config, teacher_det, teacher_seg, mode, quiet)?,
        Command::Eval {
            ckpt,
            data,
            out,
            batch_size,
        } => {
            let ds = load_dataset(&data)?.dataset;
            let ev = experiment::evaluate_checkpoint(&ckpt, &ds, batch_size, Some(&out))?;
            println!("{}", serde_json::to_string(&ev.report)?);
        }
        Command::Tide { pred, gt, compare, out } => tide_cmd(&pred, &gt, compare.as_deref(), out.as_deref())?,
        Command::Cam {
            ckpt,
            image,
            target,
            out,
            level,
        } => cam_cmd(&ckpt, &image, &target, &out, &level)?,
        Command::Report { runs, out } => {
            let text = report::render(&report::aggregate(&report::collect(&runs)?));
            match out {
                Some(p) => fs::write(&p, &text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
