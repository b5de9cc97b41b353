//! Command implementations. Every command writes into the run directory
//! and records itself in `manifest.json` there.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use parkdiffusion::config::ModelConfig;
use parkdiffusion::diffusion::ParkDiffusion;
use parkdiffusion::evaluation::{
    ablate_mask, bucket_by_agents, config_hash, evaluate, save_plot, save_report, save_sweep_report, EkfPredictor, MetricsTable,
    ModelPredictor, OraclePredictor, Predictor, MASK_FRACTIONS,
};
use parkdiffusion::numerics::Scalar;
use parkdiffusion::scenario::{build_samples, load_scenes, save_scenes, synth_generate, EgoSample};
use parkdiffusion::training::{load_checkpoint, save_checkpoint, save_log, Stage, TimeWeights, TrainData, Trainer, WeightPreset};
use serde_json::json;

use crate::config::RunConfig;
use crate::{AblationKind, Cli, CliError, Command, Common, Precision, StageArg, WeightsArg};

type CliResult<T> = Result<T, CliError>;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Defaults, then the file, then flags.
pub fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = common.d {
        cfg.model.d = d;
    }
    if let Some(k) = common.k {
        cfg.model.k = k;
    }
    if let Some(t) = common.tau {
        cfg.model.schedule.tau = t;
    }
    if let Some(l) = common.lambda_ce {
        cfg.train.lambda_ce = l;
    }
    if let Some(w) = common.weights {
        cfg.train.weights = TimeWeights::Preset(match w {
            WeightsArg::Uniform => WeightPreset::Uniform,
            WeightsArg::Linear => WeightPreset::Linear,
        });
    }
    if let Some(v) = common.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = common.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = common.denoiser_iterations {
        cfg.train.denoiser_iterations = v;
    }
    if let Some(v) = common.initializer_iterations {
        cfg.train.initializer_iterations = v;
    }
    cfg.finalize()
}

struct Run {
    dir: PathBuf,
    config: RunConfig,
    outputs: Vec<String>,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn hash(&self) -> String {
        config_hash(&serde_json::to_string(&self.config).expect("config serializes"))
    }

    /// Merges this command's entry into the run manifest.
    fn finish(&self, command: &str, inputs: &[&Path]) -> CliResult<()> {
        let path = self.dir.join("manifest.json");
        let mut manifest = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_else(|_| json!({})),
            Err(_) => json!({}),
        };
        manifest["version"] = json!(env!("CARGO_PKG_VERSION"));
        manifest["commands"][command] = json!({
            "config": self.config,
            "config_hash": self.hash(),
            "inputs": inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "outputs": self.outputs,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
        std::fs::write(&path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let config = resolve(&cli.common)?;
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)?;
    }
    std::fs::create_dir_all(&cli.common.run_dir).map_err(|e| runtime(format!("{}: {e}", cli.common.run_dir.display())))?;
    let mut run = Run {
        dir: cli.common.run_dir.clone(),
        config,
        outputs: Vec::new(),
    };
    match cli.common.precision {
        Precision::F32 => dispatch::<f32>(&cli.command, &mut run),
        Precision::F64 => dispatch::<f64>(&cli.command, &mut run),
    }
}

fn dispatch<S: Scalar>(command: &Command, run: &mut Run) -> CliResult<()> {
    match command {
        Command::Synth { scenes, out } => synth(run, *scenes, out),
        Command::Train { stage, data, init } => train::<S>(run, *stage, data, init.as_deref()),
        Command::Predict { checkpoint, data } => predict::<S>(run, checkpoint, data),
        Command::Eval { checkpoint, data, oracle } => eval::<S>(run, checkpoint.as_deref(), data, *oracle),
        Command::Ablate { kind, checkpoint, data, train_data } => ablate::<S>(run, *kind, checkpoint.as_deref(), data, train_data.as_deref()),
        Command::Plot { checkpoint, data, sample } => plot::<S>(run, checkpoint, data, *sample),
    }
}

fn synth(run: &mut Run, scenes: Option<usize>, out: &str) -> CliResult<()> {
    if let Some(n) = scenes {
        run.config.synth.scenes = n;
    }
    run.config.synth.validate()?;
    let generated = synth_generate(&run.config.synth, run.config.seed)?;
    let path = run.path(out);
    save_scenes(&generated, &path)?;
    println!("wrote {} scenes to {}", generated.len(), path.display());
    run.finish("synth", &[])
}

fn samples(run: &Run, data: &Path) -> CliResult<Vec<EgoSample>> {
    let scenes = load_scenes(data)?;
    Ok(build_samples(&scenes, &run.config.dataset)?)
}

fn load_model<S: Scalar>(run: &mut Run, path: &Path) -> CliResult<ParkDiffusion<S>> {
    let model = load_checkpoint::<S>(path)?.model;
    run.config.model = model.config.clone();
    Ok(model)
}

fn save_logs<S: Scalar>(run: &mut Run, trainer: &Trainer<S>) -> CliResult<()> {
    for stage in [Stage::Denoiser, Stage::Initializer] {
        let rows: Vec<_> = trainer.log.iter().filter(|r| r.stage == stage.number()).cloned().collect();
        if !rows.is_empty() {
            let path = run.path(&format!("train_log_stage{}.csv", stage.number()));
            save_log(&rows, &path)?;
        }
    }
    Ok(())
}

fn train<S: Scalar>(run: &mut Run, stage: StageArg, data: &Path, init: Option<&Path>) -> CliResult<()> {
    let samples = samples(run, data)?;
    if samples.is_empty() {
        return Err(CliError::Config(format!("{} yields no training samples", data.display())));
    }
    let data_set = TrainData::<S>::new(samples);
    let mut trainer = match init {
        Some(p) => {
            let t = load_checkpoint::<S>(p)?.into_trainer(run.config.train.clone())?;
            run.config.model = t.model.config.clone();
            t
        }
        None => Trainer::new(ParkDiffusion::<S>::new(run.config.model.clone(), run.config.seed)?, run.config.train.clone())?,
    };
    let progress = |t: &Trainer<S>| {
        if let Some(r) = t.log.last() {
            if r.iteration % 100 == 0 {
                eprintln!("stage {} iteration {} loss {:.5}", r.stage, r.iteration, r.loss);
            }
        }
    };
    let step_all = |t: &mut Trainer<S>| -> CliResult<()> {
        while !t.stage_done() {
            t.step(&data_set)?;
            progress(t);
        }
        Ok(())
    };
    if stage == StageArg::One && trainer.stage != Stage::Denoiser {
        return Err(CliError::Config("the initial checkpoint has already finished stage 1".into()));
    }
    if stage == StageArg::Two && trainer.stage == Stage::Denoiser && init.is_none() {
        return Err(CliError::Config("stage 2 alone needs --init with a stage-1 checkpoint".into()));
    }
    if trainer.stage == Stage::Denoiser && stage != StageArg::Two {
        step_all(&mut trainer)?;
        let path = run.path("stage1.pkdf");
        save_checkpoint(&trainer.model, Some(&trainer), &path)?;
    }
    if stage != StageArg::One {
        if trainer.stage == Stage::Denoiser {
            trainer.config = run.config.train.clone();
            trainer.begin_initializer_stage();
        }
        step_all(&mut trainer)?;
        let path = run.path("model.pkdf");
        save_checkpoint(&trainer.model, Some(&trainer), &path)?;
    }
    save_logs(run, &trainer)?;
    let mut inputs = vec![data];
    inputs.extend(init);
    run.finish("train", &inputs)
}

fn predictor_for<'a, S: Scalar>(which: &str, model: &'a Option<ParkDiffusion<S>>, seed: u64) -> Box<dyn Predictor + 'a> {
    match (which, model) {
        ("ekf", _) => Box::new(EkfPredictor),
        ("oracle", _) => Box::new(OraclePredictor),
        (_, Some(m)) => Box::new(ModelPredictor { model: m, seed }),
        (_, None) => unreachable!("checkpoints are loaded before choosing a predictor"),
    }
}

fn predict<S: Scalar>(run: &mut Run, checkpoint: &Path, data: &Path) -> CliResult<()> {
    let model = load_model::<S>(run, checkpoint)?;
    let samples = samples(run, data)?;
    let p = ModelPredictor { model: &model, seed: run.config.seed };
    let path = run.path("predictions.jsonl");
    let f = File::create(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(f);
    for (i, s) in samples.iter().enumerate() {
        let set = p.predict(s, i)?;
        let agents: Vec<_> = (0..set.num_agents())
            .map(|a| {
                json!({
                    "id": set.agent_ids[a],
                    "type": set.agent_types[a].as_str(),
                    "candidates": set.candidates(a).chunks(2 * set.t_future).map(|c| c.chunks(2).map(|p| [p[0], p[1]]).collect::<Vec<_>>()).collect::<Vec<_>>(),
                    "probabilities": set.probabilities_of(a),
                    "fallback": &set.fallback[a * set.k..(a + 1) * set.k],
                })
            })
            .collect();
        let line = json!({"sample": i, "scene": s.scene_index, "t0": s.t0, "ego": s.ego_id, "agents": agents});
        writeln!(w, "{line}").map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    println!("wrote predictions for {} samples to {}", samples.len(), path.display());
    run.finish("predict", &[checkpoint, data])
}

fn print_table(label: &str, t: &MetricsTable) {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    println!("{label}");
    println!("  {:<11} {:>8} {:>8} {:>8} {:>7}", "class", "minADE", "minFDE", "MR%", "agents");
    for (class, m) in t.rows() {
        println!("  {:<11} {:>8} {:>8} {:>8} {:>7}", class, f(m.min_ade), f(m.min_fde), f(m.miss_rate), m.count);
    }
}

fn eval<S: Scalar>(run: &mut Run, checkpoint: Option<&str>, data: &Path, oracle: bool) -> CliResult<()> {
    let which = if oracle { "oracle" } else { checkpoint.unwrap_or("ekf") };
    let model = match which {
        "ekf" | "oracle" => None,
        path => Some(load_model::<S>(run, Path::new(path))?),
    };
    let samples = samples(run, data)?;
    let predictor = predictor_for(which, &model, run.config.seed);
    let table = evaluate(&samples, predictor.as_ref(), run.config.eval.miss_rate)?;
    print_table(which, &table);
    let hash = run.hash();
    let path = run.path("report.csv");
    save_report(&table, &hash, &path)?;
    let path = run.path("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&table).map_err(runtime)?).map_err(runtime)?;
    run.finish("eval", &[data])
}

fn ablate<S: Scalar>(run: &mut Run, kind: AblationKind, checkpoint: Option<&Path>, data: &Path, train_data: Option<&Path>) -> CliResult<()> {
    let samples = samples(run, data)?;
    let mode = run.config.eval.miss_rate;
    let mut tables = Vec::new();
    match kind {
        AblationKind::Mask | AblationKind::Buckets => {
            let ckpt = checkpoint.ok_or_else(|| CliError::Config(format!("--checkpoint is required for {kind:?} ablations")))?;
            let model = load_model::<S>(run, ckpt)?;
            let p = ModelPredictor { model: &model, seed: run.config.seed };
            if kind == AblationKind::Mask {
                for f in MASK_FRACTIONS {
                    let t = ablate_mask(&samples, &p, f, run.config.seed, mode)?;
                    print_table(&format!("mask {:.0}%", 100.0 * f), &t);
                    tables.push((format!("mask_{:.0}", 100.0 * f), t));
                }
            } else {
                for b in bucket_by_agents(&samples) {
                    let subset: Vec<EgoSample> = b.samples.iter().map(|&i| samples[i].clone()).collect();
                    let t = evaluate(&subset, &p, mode)?;
                    print_table(&format!("agents {} ({:.1}% of samples)", b.label, b.ratio), &t);
                    tables.push((b.label.clone(), t));
                }
            }
        }
        AblationKind::Components => {
            let train_path = train_data.ok_or_else(|| CliError::Config("--train-data is required for component ablations".into()))?;
            let data_set = TrainData::<S>::new(self::samples(run, train_path)?);
            let variants: [(&str, fn(&mut ModelConfig)); 4] = [
                ("full", |_| {}),
                ("no_map", |m| m.use_map = false),
                ("no_type", |m| m.use_type = false),
                ("no_kinematics", |m| m.use_kinematics = false),
            ];
            for (name, toggle) in variants {
                let mut cfg = run.config.model.clone();
                toggle(&mut cfg);
                let mut trainer = Trainer::new(ParkDiffusion::<S>::new(cfg, run.config.seed)?, run.config.train.clone())?;
                eprintln!("training variant {name}");
                trainer.run(&data_set)?;
                let path = run.path(&format!("{name}.pkdf"));
                save_checkpoint(&trainer.model, None, &path)?;
                let p = ModelPredictor { model: &trainer.model, seed: run.config.seed };
                let t = evaluate(&samples, &p, mode)?;
                print_table(name, &t);
                tables.push((name.to_string(), t));
            }
        }
    }
    let name = match kind {
        AblationKind::Mask => "ablate_mask.csv",
        AblationKind::Buckets => "ablate_buckets.csv",
        AblationKind::Components => "ablate_components.csv",
    };
    let hash = run.hash();
    let path = run.path(name);
    save_sweep_report(&tables, &hash, &path)?;
    let mut inputs = vec![data];
    inputs.extend(checkpoint);
    inputs.extend(train_data);
    run.finish("ablate", &inputs)
}

fn plot<S: Scalar>(run: &mut Run, checkpoint: &str, data: &Path, index: usize) -> CliResult<()> {
    let model = match checkpoint {
        "ekf" | "oracle" => None,
        path => Some(load_model::<S>(run, Path::new(path))?),
    };
    let samples = samples(run, data)?;
    let sample = samples
        .get(index)
        .ok_or_else(|| CliError::Config(format!("--sample {index} out of range ({} samples)", samples.len())))?;
    let set = predictor_for(checkpoint, &model, run.config.seed).predict(sample, index)?;
    let path = run.path(&format!("plot_{index}.svg"));
    save_plot(sample, &set, &path)?;
    println!("wrote {}", path.display());
    run.finish("plot", &[data])
}
