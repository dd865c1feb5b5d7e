//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use urwkv::ablation;
use urwkv::checkpoint;
use urwkv::data::{gen_synthetic, load_dataset, write_dataset, SegSample, NOISE_STD};
use urwkv::erf::{erf_map, high_contribution_ratio, probe_inputs, ErfMap};
use urwkv::model::{FlopsReport, Model, ModelConfig};
use urwkv::nn::Module;
use urwkv::train::{evaluate, history_csv, train_with, EvalMetrics, Split};
use urwkv::{Error, Result};

use crate::config::{DataSource, RunConfig};

pub const MANIFEST: &str = "manifest.json";
pub const HISTORY: &str = "history.csv";
pub const BEST: &str = "best.urwk";
pub const LAST: &str = "last.urwk";
pub const ABLATION_CSV: &str = "ablation.csv";

pub fn gen_data(seed: u64, count: usize, size: usize, out: &Path) -> Result<()> {
    let samples = gen_synthetic(seed, count, size);
    write_dataset(out, &samples)?;
    let manifest = json!({
        "generator": "synthetic-ellipses",
        "seed": seed,
        "count": count,
        "size": size,
        "noise_std": NOISE_STD,
    });
    fs::write(
        out.join(MANIFEST),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    eprintln!("wrote {count} samples to {}", out.display());
    Ok(())
}

pub fn train(config: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let dir = cfg.output_dir(out)?;
    let data = cfg.data.load()?;
    cfg.write_resolved(&dir)?;
    let mut model = Model::<f32>::build(&cfg.model)?;
    eprintln!(
        "training {} parameters on {} samples from {} for {} epochs",
        model.param_count(),
        data.len(),
        cfg.data.describe(),
        cfg.train.epochs
    );
    let outcome = train_with(&mut model, &data, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val dice {:.4}  val iou {:.4}",
            r.epoch, r.loss, r.dice, r.iou
        );
    })?;
    fs::write(dir.join(HISTORY), history_csv(&outcome.history))?;
    let split_hash = outcome.split.hash();
    let last_epoch = outcome.history.last().map(|r| r.epoch);
    checkpoint::save(
        &model,
        &dir.join(LAST),
        &json!({"kind": "last", "epoch": last_epoch, "split_hash": split_hash}),
    )?;
    checkpoint::save(
        &outcome.best,
        &dir.join(BEST),
        &json!({"kind": "best", "epoch": outcome.best_epoch, "split_hash": split_hash}),
    )?;
    eprintln!("artifacts in {}", dir.display());
    Ok(())
}

/// Samples to evaluate: `--data`, else the run's data source; restricted to
/// the run's validation split when a run config is given.
fn eval_samples(data: Option<&Path>, run: Option<&RunConfig>) -> Result<Vec<SegSample>> {
    let samples = match (data, run) {
        (Some(dir), _) => load_dataset(dir)?,
        (None, Some(run)) => run.data.load()?,
        (None, None) => return Err(Error::Config("eval needs --data or a run --config".into())),
    };
    Ok(match run {
        Some(run) => {
            let split = Split::new(samples.len(), run.train.split, run.train.seed);
            let mut samples: Vec<Option<SegSample>> = samples.into_iter().map(Some).collect();
            split
                .val
                .iter()
                .filter_map(|&i| samples[i].take())
                .collect()
        }
        None => samples,
    })
}

pub fn eval(
    ckpt: &Path,
    data: Option<&Path>,
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<EvalMetrics> {
    let (model, _) = checkpoint::load::<f32>(ckpt)?;
    let run = config.map(RunConfig::from_file).transpose()?;
    let samples = eval_samples(data, run.as_ref())?;
    let refs: Vec<&SegSample> = samples.iter().collect();
    let metrics = evaluate(&model, &refs)?;
    let text = serde_json::to_string_pretty(&metrics)? + "\n";
    if let Some(path) = out {
        fs::write(path, &text)?;
    }
    print!("{text}");
    Ok(metrics)
}

pub struct ErfArgs<'a> {
    pub checkpoints: &'a [PathBuf],
    pub config: Option<&'a Path>,
    pub untrained: bool,
    pub thresholds: &'a [f64],
    pub probes: usize,
    pub probe_seed: u64,
    pub out: &'a Path,
}

fn erf_models(args: &ErfArgs) -> Result<Vec<Model<f32>>> {
    let mut models = Vec::new();
    for path in args.checkpoints {
        let (model, _) = checkpoint::load::<f32>(path)?;
        models.push(if args.untrained {
            Model::build(model.config())?
        } else {
            model
        });
    }
    if let Some(path) = args.config {
        if !args.untrained {
            return Err(Error::Config(
                "a run config has no weights; add --untrained or pass --checkpoint".into(),
            ));
        }
        models.push(Model::build(&RunConfig::from_file(path)?.model)?);
    }
    match models.len() {
        1 | 2 => Ok(models),
        0 => Err(Error::Config("erf needs --checkpoint or --config".into())),
        n => Err(Error::Config(format!(
            "erf compares at most 2 models, got {n}"
        ))),
    }
}

pub fn erf(args: &ErfArgs) -> Result<()> {
    if args.thresholds.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    let models = erf_models(args)?;
    let mut maps: Vec<ErfMap> = Vec::new();
    for model in &models {
        let mut map = erf_map(model, &probe_inputs(model, args.probes, args.probe_seed))?;
        map.thresholds = args.thresholds.to_vec();
        // Validate the grid before anything is written.
        for &t in args.thresholds {
            high_contribution_ratio(&map, t)?;
        }
        maps.push(map);
    }
    fs::create_dir_all(args.out)?;
    if let [map] = &maps[..] {
        map.save_png(&args.out.join("erf.png"))?;
        fs::write(args.out.join("erf_ratios.csv"), map.ratios_csv()?)?;
    } else {
        let mut csv = String::from("threshold,ratio_a,ratio_b\n");
        for &t in args.thresholds {
            csv.push_str(&format!(
                "{t},{},{}\n",
                high_contribution_ratio(&maps[0], t)?,
                high_contribution_ratio(&maps[1], t)?
            ));
        }
        fs::write(args.out.join("erf_ratios.csv"), csv)?;
        for (map, tag) in maps.iter().zip(["a", "b"]) {
            map.save_png(&args.out.join(format!("erf_{tag}.png")))?;
        }
    }
    let summary: Vec<_> = maps
        .iter()
        .map(|m| json!({"model_id": m.model_id, "samples": m.samples}))
        .collect();
    fs::write(
        args.out.join("erf.json"),
        serde_json::to_string_pretty(&json!({"untrained": args.untrained, "models": summary}))?
            + "\n",
    )?;
    print!("{}", fs::read_to_string(args.out.join("erf_ratios.csv"))?);
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Info {
    pub params: usize,
    pub input_shape: Vec<usize>,
    pub macs: u64,
    pub stages: Vec<urwkv::model::StageFlops>,
    pub model: ModelConfig,
}

pub fn info(config: Option<&Path>, ckpt: Option<&Path>) -> Result<Info> {
    let model = match (config, ckpt) {
        (Some(c), None) => Model::<f32>::build(&RunConfig::from_file(c)?.model)?,
        (None, Some(p)) => checkpoint::load::<f32>(p)?.0,
        _ => {
            return Err(Error::Config(
                "info needs exactly one of --config or --checkpoint".into(),
            ))
        }
    };
    let c = model.config();
    let input_shape = vec![1, c.input_channels, c.image_size, c.image_size];
    let FlopsReport { stages, total } = model.flops_estimate(&input_shape)?;
    Ok(Info {
        params: model.param_count(),
        input_shape,
        macs: total,
        stages,
        model: c.resolved(),
    })
}

pub fn info_text(info: &Info) -> String {
    let mut s = format!(
        "parameters  {}\ninput       {:?}\nMACs        {} ({:.4} G)\n\n{:<24} {:>10} {:>8} {:>14}\n",
        info.params,
        info.input_shape,
        info.macs,
        info.macs as f64 / 1e9,
        "stage",
        "resolution",
        "channels",
        "MACs"
    );
    for st in &info.stages {
        s.push_str(&format!(
            "{:<24} {:>10} {:>8} {:>14}\n",
            st.name, st.resolution, st.channels, st.macs
        ));
    }
    s
}

pub fn ablate(
    config: &Path,
    out: Option<&Path>,
    parallel: bool,
) -> Result<Vec<ablation::AblationResult>> {
    let cfg = RunConfig::from_file(config)?;
    let dir = cfg.output_dir(out)?;
    let data = cfg.data.load()?;
    cfg.write_resolved(&dir)?;
    let results = ablation::run_grid(&cfg.model, &cfg.train, &data, parallel, |r| {
        let score = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        eprintln!(
            "{:<16} params {:>8}  dice {}  iou {}  {}",
            r.row.name,
            r.params,
            score(r.dice),
            score(r.iou),
            r.status
        );
    })?;
    fs::write(dir.join(ABLATION_CSV), ablation::to_csv(&results))?;
    Ok(results)
}

impl DataSource {
    pub fn describe(&self) -> String {
        match self {
            Self::Path(p) => p.display().to_string(),
            Self::Synthetic(s) => format!(
                "synthetic(seed={}, count={}, size={})",
                s.seed, s.count, s.size
            ),
        }
    }
}
