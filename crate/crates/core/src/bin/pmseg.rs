use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use pmseg::episodes::{export_episode, import_episode, EpisodeConfig, MANIFEST_FILE};
use pmseg::metrics::{aggregate, write_runs_csv, write_summary_csv, write_sweep_csv, RunMetrics};
use pmseg::perfusion::{compute_pms, PhantomSpec};
use pmseg::pipeline::{
    load_studies_or_synth, load_study, normalize_input, phantom_cohort, phantom_study,
    pick_support, prepare_study, rho_sweep, sample_episodes, save_study, segment, support_pair,
    train_head, Arm, PipelineConfig, Study,
};
use pmseg::preproc;
use pmseg::proto::HeadParams;
use pmseg::supervox::{felzenszwalb_4d, segment_stats, write_stats_csv, SupervoxelParams};
use pmseg::volgrid::{load_labels, load_mask, load_volume, save_labels, save_mask, save_volume, Spacing};
use pmseg::{Error, Result};

/// Perfusion-map supervoxels and few-shot lesion segmentation on CTP volumes.
///
/// Volumes are `<base>.vh.json` + `<base>.raw` pairs; pass the base path.
#[derive(Parser)]
#[command(name = "pmseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic CTP phantoms (ctp, brain_mask, lesion_mask per study directory).
    Synth {
        /// Phantom spec JSON; missing keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of phantoms, seeded consecutively from the seed.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Intensity preprocessing, applied in flag order: HU, smoothing, gamma, equalization, z-score.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// HU rescale as `slope,intercept`.
        #[arg(long, value_parser = pair)]
        hu: Option<(f64, f64)>,
        /// In-plane Gaussian sigma in voxels.
        #[arg(long)]
        smooth: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        /// Gamma window as `lo,hi`.
        #[arg(long, value_parser = pair, default_value = "0,1")]
        window: (f64, f64),
        /// Histogram-equalize with this many bins (needs --mask).
        #[arg(long)]
        equalize: Option<usize>,
        /// Z-score every channel inside the mask (needs --mask).
        #[arg(long)]
        zscore: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the five perfusion maps from a CTP volume.
    Pm {
        #[arg(long)]
        ctp: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervoxels of a volume; writes labels and `<out>.stats.csv`.
    Supervoxel {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Supervoxel params JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample episodes and export each into `<out>/episode_NNNNN/`.
    Episodes {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// When given, channels are z-scored inside the mask and zeroed outside.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Episode config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short = 'n', long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the head on exported episodes; writes params.json and loss.csv.
    Train {
        /// Pipeline config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        arm: Option<Arm>,
        #[arg(long)]
        seed: Option<u64>,
        /// Episode directories, or directories containing them.
        #[arg(long, required = true, num_args = 1..)]
        episodes: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a query study from a support study's lesion slice.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        arm: Option<Arm>,
        #[arg(long)]
        params: PathBuf,
        /// Support study directory (ctp, brain_mask, lesion_mask).
        #[arg(long)]
        support: PathBuf,
        /// Support slice; the middle slice when omitted.
        #[arg(long)]
        support_slice: Option<usize>,
        /// Query study directory (ctp, brain_mask).
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against ground truth; writes runs.csv and summary.csv.
    Eval {
        /// Directory of `<id>.vh.json` prediction masks.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of `<id>.vh.json` ground-truth masks, or of study directories.
        #[arg(long)]
        gt: PathBuf,
        /// CSV with columns `id,group`.
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rho sensitivity sweep over a cohort; writes a CSV.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        arm: Option<Arm>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated rho values.
        #[arg(long, value_delimiter = ',', required = true)]
        rho: Vec<f64>,
        /// Directory of study directories; phantoms are generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Phantoms to generate when --data is omitted.
        #[arg(long, default_value_t = 20)]
        phantoms: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected two comma-separated numbers")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((p(a)?, p(b)?))
}

fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(serde_json::from_slice(&text)?)
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json_file)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn pipeline_config(path: Option<&Path>, arm: Option<Arm>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        None => PipelineConfig::default(),
        Some(p) => PipelineConfig::from_json(&fs::read(p).map_err(|e| Error::Io {
            path: p.into(),
            source: e,
        })?)?,
    };
    if let Some(a) = arm {
        if a != cfg.arm {
            cfg.arm = a;
            cfg.supervoxel_source = None;
            cfg.model_input = None;
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.effective()
}

fn episode_dirs(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for r in roots {
        if r.join(MANIFEST_FILE).exists() {
            out.push(r.clone());
            continue;
        }
        let mut sub: Vec<PathBuf> = fs::read_dir(r)
            .map_err(|e| Error::Io {
                path: r.clone(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(MANIFEST_FILE).exists())
            .collect();
        sub.sort();
        out.extend(sub);
    }
    if out.is_empty() {
        return Err(Error::InvalidParam("no episode directories found".into()));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            config,
            seed,
            count,
            out,
        } => {
            let mut spec: PhantomSpec = read_json(config.as_deref())?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            spec.validate()?;
            if count == 1 {
                save_study(&phantom_study(&spec)?, &out)?;
            } else {
                for s in phantom_cohort(&spec, count)? {
                    save_study(&s, &out.join(&s.id))?;
                }
            }
            write_file(&out.join("spec.json"), &serde_json::to_vec_pretty(&spec)?)?;
        }
        Command::Preprocess {
            input,
            mask,
            hu,
            smooth,
            gamma,
            window,
            equalize,
            zscore,
            out,
        } => {
            let mut v = load_volume(&input)?;
            let mask = mask.map(|m| load_mask(&m)).transpose()?.map(|m| m.0);
            let need_mask = || mask.as_ref().ok_or(Error::InvalidParam("this step needs --mask".into()));
            if let Some((slope, intercept)) = hu {
                v = preproc::hu_rescale(&v, slope, intercept)?;
            }
            if let Some(s) = smooth {
                v = preproc::gaussian_smooth(&v, s, 0.0)?;
            }
            if let Some(g) = gamma {
                v = preproc::gamma_correct(&v, g, window.0, window.1)?;
            }
            if let Some(bins) = equalize {
                v = preproc::hist_equalize(&v, need_mask()?, bins)?;
            }
            if zscore {
                v = preproc::zscore_channels(&v, need_mask()?)?;
            }
            save_volume(&v, &out)?;
        }
        Command::Pm { ctp, mask, out } => {
            let v = load_volume(&ctp)?;
            let (m, _) = load_mask(&mask)?;
            save_volume(&compute_pms(&v, &m)?, &out)?;
        }
        Command::Supervoxel {
            input,
            mask,
            config,
            rho,
            out,
        } => {
            let mut params: SupervoxelParams = read_json(config.as_deref())?;
            if let Some(r) = rho {
                params.rho = r;
            }
            let v = load_volume(&input)?;
            let (m, _) = load_mask(&mask)?;
            let labels = felzenszwalb_4d(&v, &params, &m)?;
            save_labels(&labels, &out)?;
            let mut buf = Vec::new();
            write_stats_csv(&segment_stats(&labels), &mut buf)?;
            let stem = pmseg::volgrid::file_pair(&out).1.with_extension("");
            write_file(&stem.with_extension("stats.csv"), &buf)?;
        }
        Command::Episodes {
            input,
            labels,
            mask,
            config,
            count,
            seed,
            out,
        } => {
            let ecfg: EpisodeConfig = read_json(config.as_deref())?;
            let mut v = load_volume(&input)?;
            if let Some(m) = mask {
                v = normalize_input(&v, &load_mask(&m)?.0)?;
            }
            let labels = load_labels(&labels)?;
            let cfg = PipelineConfig {
                episodes: ecfg,
                seed,
                ..Default::default()
            };
            let id = input
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            for ep in sample_episodes(&v, &labels, &cfg, &id, 0, count)? {
                export_episode(&ep, &v, &out.join(format!("episode_{:05}", ep.index)))?;
            }
        }
        Command::Train {
            config,
            arm,
            seed,
            episodes,
            out,
        } => {
            let cfg = pipeline_config(config.as_deref(), arm, seed)?;
            let eps = episode_dirs(&episodes)?
                .iter()
                .map(|d| import_episode(d))
                .collect::<Result<Vec<_>>>()?;
            let (head, losses) = train_head(&eps, &cfg)?;
            write_file(&out.join("params.json"), &serde_json::to_vec_pretty(&head)?)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            write_file(&out.join("loss.csv"), csv.as_bytes())?;
            write_file(&out.join("config.json"), &serde_json::to_vec_pretty(&cfg)?)?;
        }
        Command::Infer {
            config,
            arm,
            params,
            support,
            support_slice,
            query,
            out,
        } => {
            let cfg = pipeline_config(config.as_deref(), arm, None)?;
            let head: HeadParams = read_json_file(&params)?;
            let input_of = |s: &Study| -> Result<_> {
                let p = prepare_study(s, &cfg)?;
                let v = normalize_input(p.channels(cfg.model_input.expect("effective")), &p.brain_mask)?;
                Ok((p, v))
            };
            let s = load_study(&support, "")?;
            let lesion = s
                .lesion_mask
                .clone()
                .ok_or(Error::InvalidParam("support study has no lesion_mask".into()))?;
            let (_, s_in) = input_of(&s)?;
            let (img, lbl) = support_pair(&s_in, &lesion, support_slice)?;
            let q = load_study(&query, "")?;
            let (qp, q_in) = input_of(&q)?;
            let pred = segment((&img, &lbl), &q_in, &qp.brain_mask, &head)?;
            save_mask(&pred, q.ctp.spacing(), &out)?;
        }
        Command::Eval {
            pred,
            gt,
            groups,
            out,
        } => {
            let groups: BTreeMap<String, String> = match groups {
                None => BTreeMap::new(),
                Some(p) => {
                    let bytes = fs::read(&p).map_err(|e| Error::Io {
                        path: p.clone(),
                        source: e,
                    })?;
                    let mut r = csv::Reader::from_reader(&bytes[..]);
                    r.deserialize::<(String, String)>().collect::<std::result::Result<_, _>>()?
                }
            };
            let mut ids: Vec<String> = fs::read_dir(&pred)
                .map_err(|e| Error::Io {
                    path: pred.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    e.file_name()
                        .to_string_lossy()
                        .strip_suffix(".vh.json")
                        .map(str::to_string)
                })
                .collect();
            ids.sort();
            if ids.is_empty() {
                return Err(Error::InvalidParam(format!("no masks in {}", pred.display())));
            }
            let mut runs = Vec::new();
            for id in &ids {
                let (p, spacing): (_, Spacing) = load_mask(&pred.join(id))?;
                let flat = gt.join(id);
                let g_base = if pmseg::volgrid::file_pair(&flat).0.exists() {
                    flat
                } else {
                    gt.join(id).join(pmseg::pipeline::LESION_FILE)
                };
                let (g, _) = load_mask(&g_base)?;
                let group = groups.get(id).cloned().unwrap_or_else(|| "all".into());
                runs.push(RunMetrics::evaluate(id.clone(), group, &p, &g, spacing)?);
            }
            let mut buf = Vec::new();
            write_runs_csv(&runs, &mut buf)?;
            write_file(&out.join("runs.csv"), &buf)?;
            let mut buf = Vec::new();
            write_summary_csv(&aggregate(&runs)?, &mut buf)?;
            write_file(&out.join("summary.csv"), &buf)?;
        }
        Command::Sweep {
            config,
            arm,
            seed,
            rho,
            data,
            phantoms,
            out,
        } => {
            let cfg = pipeline_config(config.as_deref(), arm, seed)?;
            let studies = load_studies_or_synth(data.as_deref(), phantoms, cfg.seed)?;
            let support = pick_support(&studies).ok_or(Error::EmptyMask(
                "no study has a lesion on its middle slice",
            ))?;
            let rows = rho_sweep(&studies, support, &rho, &cfg)?;
            let mut buf = Vec::new();
            write_sweep_csv(&rows, &mut buf)?;
            write_file(&out, &buf)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
