use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use super::config::RunConfig;
use super::container::{load_model, save_model};
use crate::decoder::{attention_heatmap, LayerOrder};
use crate::error::{Error, Result};
use crate::harness::compare::{compare_models, fit_and_evaluate, make_splits};
use crate::harness::eval::{evaluate_model, EvalReport};
use crate::harness::model::CqlModel;
use crate::harness::train::{curve_csv, train};
use crate::losses::ImageLossKind;
use crate::numcore::Tensor;

pub const MODEL_FILE: &str = "model.cql";
pub const CURVE_FILE: &str = "loss_curve.csv";

#[derive(Debug, Parser)]
#[command(name = "cql", version, about = "Category query learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write it with its loss curve.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved model on the held-out scenes and write a JSON report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Data settings to evaluate on; defaults to the model's own configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Sweep one ablation axis on a shared dataset.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export cross-attention heatmaps of one held-out scene as PGM images.
    Attn {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scene: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Loss,
    Lambda,
    LayerOrder,
    Depth,
    Components,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Loss => "loss",
            Axis::Lambda => "lambda",
            Axis::LayerOrder => "layer-order",
            Axis::Depth => "depth",
            Axis::Components => "components",
        }
    }

    /// Values swept along this axis, in report order.
    pub fn settings(self) -> &'static [&'static str] {
        match self {
            Axis::Loss => &["focal", "asl"],
            Axis::Lambda => &["0", "0.5", "1.0", "1.5", "2.0"],
            Axis::LayerOrder => &["S,C,F", "C,S,F", "C,F"],
            Axis::Depth => &["1", "2", "3"],
            Axis::Components => &["a", "b", "c", "d"],
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: &str) -> Result<()> {
        match self {
            Axis::Loss => cfg.loss.kind = value.parse::<ImageLossKind>()?,
            Axis::Lambda => cfg.loss.lambda = value.parse().map_err(|_| Error::InvalidConfig(value.into()))?,
            Axis::LayerOrder => cfg.decoder.order = value.parse::<LayerOrder>()?,
            Axis::Depth => cfg.decoder.depth = value.parse().map_err(|_| Error::InvalidConfig(value.into()))?,
            Axis::Components => cfg.set(0, "components.variant", value)?,
        }
        cfg.validate()
    }
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on a runtime error, 2 on a usage error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = flag.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out } => cmd_train(config.as_deref(), out),
        Command::Eval { model, config, report } => cmd_eval(&model, config.as_deref(), &report),
        Command::Ablate { axis, config, out } => cmd_ablate(axis, config.as_deref(), out),
        Command::Attn { model, scene, out } => cmd_attn(&model, scene, &out),
    }
}

fn cmd_train(config: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let dir = out_dir(out, &cfg)?;
    let (train_set, _) = make_splits(&cfg)?;
    let mut model = CqlModel::new(cfg)?;
    let curve = train(&mut model, &train_set)?;
    save_model(&model, dir.join(MODEL_FILE))?;
    fs::write(dir.join(CURVE_FILE), curve_csv(&curve))?;
    match (curve.first(), curve.last()) {
        (Some(a), Some(b)) => println!("trained {} steps, loss {:.6} -> {:.6}", curve.len(), a.total, b.total),
        _ => println!("trained 0 steps"),
    }
    println!("wrote {}", dir.join(MODEL_FILE).display());
    Ok(())
}

fn cmd_eval(model_path: &Path, config: Option<&Path>, report_path: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let mut data_cfg = match config {
        Some(p) => RunConfig::from_file(p)?,
        None => model.config.clone(),
    };
    data_cfg.apply_env()?;
    let m = &model.config;
    if (data_cfg.k, data_cfg.d, data_cfg.h, data_cfg.w) != (m.k, m.d, m.h, m.w) {
        return Err(Error::InvalidConfig("evaluation data dimensions differ from the model's".into()));
    }
    let (_, test_set) = make_splits(&data_cfg)?;
    let report = evaluate_model(&model, &test_set)?;
    write_json(
        report_path,
        &json!({
            "config": data_cfg.to_json(),
            "model_config": model.config.to_json(),
            "report": report,
        }),
    )?;
    println!("mAP {:.6} over {} scenes", report.map, test_set.len());
    Ok(())
}

#[derive(Serialize)]
struct AblationRun {
    setting: String,
    map: f64,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    report: EvalReport,
}

fn cmd_ablate(axis: Axis, config: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let dir = out_dir(out, &cfg)?;
    let (train_set, test_set) = make_splits(&cfg)?;
    let path = dir.join(format!("ablate_{}.json", axis.name()));

    if axis == Axis::Components {
        let cmp = compare_models(&cfg, &train_set, &test_set)?;
        for v in &cmp.variants {
            println!("({}) mAP {:.6}", v.variant, v.map);
        }
        println!("(c) - (b) = {:+.6}", cmp.delta_c_minus_b);
        write_json(&path, &json!({"axis": axis.name(), "config": cfg.to_json(), "comparison": cmp}))?;
        return Ok(());
    }

    let mut runs = Vec::new();
    for &label in axis.settings() {
        let mut run_cfg = cfg.clone();
        axis.apply(&mut run_cfg, label)?;
        let fitted = fit_and_evaluate(&run_cfg, &train_set, &test_set)?;
        println!("{} = {label}: mAP {:.6}", axis.name(), fitted.report.map);
        runs.push(AblationRun {
            setting: label.to_string(),
            map: fitted.report.map,
            initial_loss: fitted.curve.first().map(|s| s.total),
            final_loss: fitted.curve.last().map(|s| s.total),
            report: fitted.report,
        });
    }
    write_json(&path, &json!({"axis": axis.name(), "config": cfg.to_json(), "runs": runs}))
}

/// Plain-text PGM scaled so the map's maximum becomes 255.
pub fn heatmap_pgm(map: &Tensor) -> Result<String> {
    let (h, w) = map.dims2("heatmap_pgm")?;
    let max = map.data().iter().copied().fold(0.0_f64, f64::max);
    let mut out = format!("P2\n{w} {h}\n255\n");
    for r in 0..h {
        let row: Vec<String> = (0..w)
            .map(|c| {
                let v = if max > 0.0 { (map.at(r, c).max(0.0) / max * 255.0).round() } else { 0.0 };
                (v as u8).to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}

fn cmd_attn(model_path: &Path, scene: usize, out: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let (_, test_set) = make_splits(&model.config)?;
    let sc = test_set.get(scene).ok_or(Error::IndexOutOfRange {
        index: scene,
        len: test_set.len(),
    })?;
    let maps = model
        .attention_maps(sc)?
        .ok_or_else(|| Error::InvalidConfig("this model variant has no decoder".into()))?;
    fs::create_dir_all(out)?;
    let mut written = 0;
    for (l, layer) in maps.layers.iter().enumerate() {
        if layer.is_none() {
            continue;
        }
        for k in 0..model.k() {
            let heat = attention_heatmap(&maps, l, k)?;
            fs::write(out.join(format!("attn_l{l}_k{k}.pgm")), heatmap_pgm(&heat)?)?;
            written += 1;
        }
    }
    println!("wrote {written} heatmaps to {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_is_max_normalized() {
        let t = Tensor::matrix(&[&[0.0, 0.5], &[0.25, 1.0]]).unwrap();
        assert_eq!(heatmap_pgm(&t).unwrap(), "P2\n2 2\n255\n0 128\n64 255\n");
        let z = Tensor::zeros(vec![1, 3]);
        assert_eq!(heatmap_pgm(&z).unwrap(), "P2\n3 1\n255\n0 0 0\n");
    }

    #[test]
    fn axes_cover_documented_settings() {
        assert_eq!(Axis::Depth.settings(), ["1", "2", "3"]);
        assert_eq!(Axis::LayerOrder.settings(), ["S,C,F", "C,S,F", "C,F"]);
        let mut cfg = RunConfig::default();
        for v in Axis::LayerOrder.settings() {
            Axis::LayerOrder.apply(&mut cfg, v).unwrap();
        }
        Axis::Components.apply(&mut cfg, "b").unwrap();
        assert!(cfg.components.image_branch && !cfg.components.adaptive_weights);
    }
}
