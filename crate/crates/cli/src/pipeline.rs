//! The phases of a run and the artifacts they pass along.

use std::path::{Path, PathBuf};

use depthcut_core::seed::split_seed;
use depthcut_core::Container;
use depthcut_he::{compile, CompileOptions, Compiled, OpCounts, RuntimeConfig};
use depthcut_model::data::DATASET_KIND;
use depthcut_model::distill::{distill_train, replace_relu, replace_with_mask, TeacherKind};
use depthcut_model::linearize::linearize_train;
use depthcut_model::net::accuracy;
use depthcut_model::train::{evaluate, train_teacher, EVAL_BATCH};
use depthcut_model::{synth_dataset, ActivationPlan, Checkpoint, Dataset, Mask, Stgcn, StgcnConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::log::EventLog;
use crate::report::{self, FinalReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum Phase {
    SynthData,
    TrainTeacher,
    Linearize,
    Distill,
    Compile,
    Simulate,
    Report,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::SynthData,
        Phase::TrainTeacher,
        Phase::Linearize,
        Phase::Distill,
        Phase::Compile,
        Phase::Simulate,
        Phase::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::SynthData => "synth-data",
            Phase::TrainTeacher => "train-teacher",
            Phase::Linearize => "linearize",
            Phase::Distill => "distill",
            Phase::Compile => "compile",
            Phase::Simulate => "simulate",
            Phase::Report => "report",
        }
    }
}

/// Artifact files relative to the output directory, with the phase that
/// writes each.
pub mod artifact {
    pub const TRAIN_DATA: &str = "data/train.bin";
    pub const EVAL_DATA: &str = "data/eval.bin";
    pub const TEACHER: &str = "teacher.ckpt";
    pub const LINEARIZED: &str = "linearized.ckpt";
    pub const STUDENT: &str = "student.ckpt";
    pub const BASELINE: &str = "baseline.ckpt";
    pub const STUDENT_CIRCUIT: &str = "student.circuit";
    pub const BASELINE_CIRCUIT: &str = "baseline.circuit";
    pub const SIMULATION: &str = "simulation.bin";
    pub const CONFIG: &str = "config.toml";

    pub fn producer(name: &str) -> &'static str {
        match name {
            TRAIN_DATA | EVAL_DATA => "synth-data",
            TEACHER => "train-teacher",
            LINEARIZED => "linearize",
            STUDENT | BASELINE => "distill",
            STUDENT_CIRCUIT | BASELINE_CIRCUIT => "compile",
            SIMULATION => "simulate",
            _ => "report",
        }
    }
}

pub const SIMULATION_KIND: &str = "simulation";

/// Encrypted-versus-plaintext comparison written by the simulate phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub samples: usize,
    pub encrypted_acc: f64,
    pub plaintext_acc: f64,
    pub max_abs_err: f64,
    pub argmax_agreement: f64,
    pub groups: usize,
    /// Whole-run counts observed by the simulator.
    pub counts: OpCounts,
    pub level_mismatches: usize,
    pub wall_seconds: f64,
}

pub struct Run {
    pub cfg: RunConfig,
    pub model_cfg: StgcnConfig,
    pub log: EventLog,
}

fn meta_f64(ck: &Checkpoint, key: &str) -> Option<f64> {
    ck.meta.get(key).and_then(Value::as_f64)
}

fn meta_map(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

impl Run {
    pub fn new(cfg: RunConfig, quiet: bool) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = cfg.model_config()?;
        Ok(Run {
            cfg,
            model_cfg,
            log: EventLog::new(quiet),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.cfg.output_dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir().join(name)
    }

    pub fn seed(&self, label: &str) -> u64 {
        split_seed(self.cfg.seed, label)
    }

    /// Path of an artifact that must already exist.
    pub fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact {
                name: name.to_string(),
                path: p,
                producer: artifact::producer(name),
            })
        }
    }

    fn prepare(&self, phase: &'static str, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(phase, parent, e))?;
        }
        Ok(p)
    }

    fn save_config(&self, phase: &'static str) -> Result<()> {
        let p = self.prepare(phase, artifact::CONFIG)?;
        std::fs::write(&p, self.cfg.to_toml()).map_err(|e| CliError::io(phase, &p, e))
    }

    fn model(&self, phase: &'static str) -> Result<Stgcn> {
        Stgcn::new(self.model_cfg.clone()).map_err(|e| CliError::from_model(phase, e))
    }

    fn load_data(&self, phase: &'static str, name: &str) -> Result<Dataset> {
        let p = self.require(name)?;
        let c = Container::load(&p, Some(DATASET_KIND)).map_err(|e| CliError::io(phase, &p, e))?;
        Dataset::from_container(&c).map_err(|e| CliError::io(phase, &p, e))
    }

    pub fn load_checkpoint(&self, phase: &'static str, name: &str) -> Result<Checkpoint> {
        let p = self.require(name)?;
        let ck = Checkpoint::load(&p).map_err(|e| CliError::io(phase, &p, e))?;
        if ck.config != self.model_cfg {
            return Err(CliError::phase(
                phase,
                format!("{} was written for a different model than {}", p.display(), self.cfg.model),
            ));
        }
        Ok(ck)
    }

    pub fn load_circuit(&self, phase: &'static str, name: &str) -> Result<Compiled> {
        let p = self.require(name)?;
        Compiled::load(&p).map_err(|e| CliError::io(phase, &p, e))
    }

    pub fn load_simulation(&self, phase: &'static str) -> Result<SimulationSummary> {
        let p = self.require(artifact::SIMULATION)?;
        let c = Container::load(&p, Some(SIMULATION_KIND)).map_err(|e| CliError::io(phase, &p, e))?;
        serde_json::from_value(c.meta_field("summary").map_err(|e| CliError::io(phase, &p, e))?.clone())
            .map_err(|e| CliError::io(phase, &p, e))
    }

    fn save_checkpoint(&self, phase: &'static str, name: &str, ck: &Checkpoint) -> Result<()> {
        let p = self.prepare(phase, name)?;
        ck.save(&p).map_err(|e| CliError::io(phase, &p, e))?;
        self.log.info(phase, "artifact", json!({ "path": p.display().to_string() }));
        Ok(())
    }

    pub fn run_phase(&self, phase: Phase) -> Result<()> {
        self.log.info(phase.name(), "start", json!({ "seed": self.cfg.seed }));
        self.save_config(phase.name())?;
        match phase {
            Phase::SynthData => self.synth_data(),
            Phase::TrainTeacher => self.train_teacher(),
            Phase::Linearize => self.linearize(),
            Phase::Distill => self.distill(),
            Phase::Compile => self.compile(),
            Phase::Simulate => self.simulate(),
            Phase::Report => self.report().map(|_| ()),
        }?;
        self.log.info(phase.name(), "done", json!({}));
        Ok(())
    }

    /// Runs every phase from `from` (the first one by default) in order.
    pub fn e2e(&self, from: Option<Phase>) -> Result<FinalReport> {
        let from = from.unwrap_or(Phase::SynthData);
        for p in Phase::ALL.into_iter().filter(|&p| p >= from && p != Phase::Report) {
            self.run_phase(p)?;
        }
        self.log.info("report", "start", json!({}));
        let r = self.report()?;
        self.log.info("report", "done", json!({}));
        Ok(r)
    }

    fn synth_data(&self) -> Result<()> {
        const PHASE: &str = "synth-data";
        let spec = self.cfg.synth_spec()?;
        for (name, n, label) in [
            (artifact::TRAIN_DATA, self.cfg.data.train_samples, "data.train"),
            (artifact::EVAL_DATA, self.cfg.data.eval_samples, "data.eval"),
        ] {
            let ds = synth_dataset(&spec, n, self.seed(label)).map_err(|e| CliError::from_model(PHASE, e))?;
            let p = self.prepare(PHASE, name)?;
            ds.to_container().save(&p).map_err(|e| CliError::io(PHASE, &p, e))?;
            self.log
                .info(PHASE, "artifact", json!({ "path": p.display().to_string(), "samples": ds.len() }));
        }
        Ok(())
    }

    fn train_teacher(&self) -> Result<()> {
        const PHASE: &str = "train-teacher";
        let train = self.load_data(PHASE, artifact::TRAIN_DATA)?;
        let eval = self.load_data(PHASE, artifact::EVAL_DATA)?;
        let model = self.model(PHASE)?;
        let out = train_teacher(&model, &train, &eval, &self.cfg.teacher, self.seed("teacher"))
            .map_err(|e| CliError::from_model(PHASE, e))?;
        for l in &out.log {
            self.log.info(PHASE, "epoch", json!({ "epoch": l.epoch, "loss": l.train_loss, "eval_acc": l.eval_acc }));
        }
        let mut ck = Checkpoint::new(self.model_cfg.clone(), out.params, ActivationPlan::AllRelu);
        ck.meta = meta_map(json!({ "eval_acc": out.best_acc, "best_epoch": out.best_epoch }));
        self.save_checkpoint(PHASE, artifact::TEACHER, &ck)
    }

    fn linearize(&self) -> Result<()> {
        const PHASE: &str = "linearize";
        let train = self.load_data(PHASE, artifact::TRAIN_DATA)?;
        let eval = self.load_data(PHASE, artifact::EVAL_DATA)?;
        let teacher = self.load_checkpoint(PHASE, artifact::TEACHER)?;
        let model = self.model(PHASE)?;
        let out = linearize_train(&model, &teacher.params, &train, &eval, &self.cfg.linearize, self.seed("linearize"))
            .map_err(|e| CliError::from_model(PHASE, e))?;
        for l in &out.log {
            self.log.info(
                PHASE,
                "epoch",
                json!({ "epoch": l.epoch, "loss": l.train_loss, "effective": l.effective, "eval_acc": l.eval_acc }),
            );
        }
        let mask = out.indicator.mask.clone();
        if !mask.is_structural() {
            return Err(CliError::invariant(PHASE, "frozen mask is not structural"));
        }
        if let Some(t) = self.cfg.linearize.target_effective {
            if mask.effective() != t {
                self.emit_warning(PHASE, format!("effective count {} missed target {t}", mask.effective()));
            }
        }
        let plan = ActivationPlan::MaskedRelu { mask: mask.clone() };
        let acc = evaluate(&model, &out.params, &plan, &eval).map_err(|e| CliError::from_model(PHASE, e))?;
        let mut ck = Checkpoint::new(self.model_cfg.clone(), out.params, plan);
        ck.indicator = Some(out.indicator);
        ck.meta = meta_map(json!({
            "eval_acc": acc,
            "effective": mask.effective(),
            "layer_counts": mask.layer_counts(),
            "steps": out.steps,
        }));
        self.save_checkpoint(PHASE, artifact::LINEARIZED, &ck)
    }

    fn emit_warning(&self, phase: &str, msg: String) {
        self.log.emit("warn", phase, "warning", json!({ "msg": msg }));
    }

    fn distill(&self) -> Result<()> {
        const PHASE: &str = "distill";
        let train = self.load_data(PHASE, artifact::TRAIN_DATA)?;
        let eval = self.load_data(PHASE, artifact::EVAL_DATA)?;
        let teacher = self.load_checkpoint(PHASE, artifact::TEACHER)?;
        let lin = self.load_checkpoint(PHASE, artifact::LINEARIZED)?;
        let ind = lin
            .indicator
            .as_ref()
            .ok_or_else(|| CliError::phase(PHASE, "linearized checkpoint carries no indicator"))?;
        let model = self.model(PHASE)?;
        let dcfg = &self.cfg.distill;
        let (params, plan) = replace_relu(&lin.params, ind, dcfg.c).map_err(|e| CliError::from_model(PHASE, e))?;
        let teacher_params = match dcfg.teacher {
            TeacherKind::AllRelu => &teacher.params,
            TeacherKind::Masked => &lin.params,
        };
        let out = distill_train(
            &model,
            &params,
            &plan,
            teacher_params,
            Some(&ind.mask),
            &train,
            &eval,
            dcfg,
            self.seed("distill"),
        )
        .map_err(|e| CliError::from_model(PHASE, e))?;
        self.log_epochs(PHASE, "student", &out.log);
        let mut ck = Checkpoint::new(self.model_cfg.clone(), out.params, out.plan);
        ck.indicator = lin.indicator.clone();
        ck.meta = meta_map(json!({
            "eval_acc": out.best_acc,
            "best_epoch": out.best_epoch,
            "effective": ind.mask.effective(),
        }));
        self.save_checkpoint(PHASE, artifact::STUDENT, &ck)?;

        if self.cfg.baseline {
            let m = &self.model_cfg;
            let full = Mask::filled(m.sites(), m.v, true);
            let (bp, bplan) = replace_with_mask(&teacher.params, &full, dcfg.c);
            let bcfg = depthcut_model::distill::DistillConfig {
                teacher: TeacherKind::AllRelu,
                ..dcfg.clone()
            };
            let out = distill_train(
                &model,
                &bp,
                &bplan,
                &teacher.params,
                None,
                &train,
                &eval,
                &bcfg,
                self.seed("distill.baseline"),
            )
            .map_err(|e| CliError::from_model(PHASE, e))?;
            self.log_epochs(PHASE, "baseline", &out.log);
            let mut ck = Checkpoint::new(self.model_cfg.clone(), out.params, out.plan);
            ck.meta = meta_map(json!({
                "eval_acc": out.best_acc,
                "best_epoch": out.best_epoch,
                "effective": full.effective(),
            }));
            self.save_checkpoint(PHASE, artifact::BASELINE, &ck)?;
        }
        Ok(())
    }

    fn log_epochs(&self, phase: &str, which: &str, log: &[depthcut_model::train::EpochLog]) {
        for l in log {
            self.log.info(
                phase,
                "epoch",
                json!({ "model": which, "epoch": l.epoch, "loss": l.train_loss, "eval_acc": l.eval_acc }),
            );
        }
    }

    pub fn compile_options(&self) -> CompileOptions {
        CompileOptions {
            batch: self.cfg.simulate.samples * self.model_cfg.persons,
            fuse: self.cfg.compile.fuse,
            auto_align: self.cfg.compile.auto_align,
            profile: None,
            scale_bits: self.cfg.compile.scale_bits,
        }
    }

    fn compile(&self) -> Result<()> {
        const PHASE: &str = "compile";
        let mut jobs = vec![(artifact::STUDENT, artifact::STUDENT_CIRCUIT)];
        if self.cfg.baseline {
            jobs.push((artifact::BASELINE, artifact::BASELINE_CIRCUIT));
        }
        // Check every input before doing any work.
        for (ck, _) in &jobs {
            self.require(ck)?;
        }
        let opts = self.compile_options();
        for (ck_name, out_name) in jobs {
            let ck = self.load_checkpoint(PHASE, ck_name)?;
            let c = compile(&ck, &opts).map_err(|e| CliError::from_he(PHASE, e))?;
            if let Some(expected) = c.closed_form {
                if expected != c.levels() {
                    return Err(CliError::invariant(
                        PHASE,
                        format!("{ck_name}: circuit uses {} levels, the mask predicts {expected}", c.levels()),
                    ));
                }
            }
            let p = self.prepare(PHASE, out_name)?;
            c.save(&p).map_err(|e| CliError::io(PHASE, &p, e))?;
            let counts = c.circuit.counts();
            self.log.info(
                PHASE,
                "artifact",
                json!({
                    "path": p.display().to_string(),
                    "levels": c.levels(),
                    "n": c.profile.n,
                    "q_bits": c.profile.q_bits,
                    "groups": c.groups(),
                    "counts": counts,
                    "aligned_ops": c.align.aligned_ops,
                }),
            );
        }
        Ok(())
    }

    fn simulate(&self) -> Result<()> {
        const PHASE: &str = "simulate";
        let compiled = self.load_circuit(PHASE, artifact::STUDENT_CIRCUIT)?;
        let ck = self.load_checkpoint(PHASE, artifact::STUDENT)?;
        let eval = self.load_data(PHASE, artifact::EVAL_DATA)?.head(self.cfg.simulate.samples);
        let model = self.model(PHASE)?;
        let rt = RuntimeConfig {
            scale_bits: self.cfg.compile.scale_bits,
            noise: self.cfg.simulate.noise,
            seed: self.seed("simulate"),
        };
        let (enc, traces) = compiled.infer(&eval.x, &rt).map_err(|e| CliError::from_he(PHASE, e))?;
        let plain = model
            .infer(&ck.params, &ck.plan, &eval.x, EVAL_BATCH)
            .map_err(|e| CliError::from_model(PHASE, e))?;
        let summary = summarize(&enc, &plain, &eval.labels, &traces, &compiled);
        self.log.info(PHASE, "summary", serde_json::to_value(&summary).expect("summary serializes"));
        if summary.level_mismatches > 0 {
            return Err(CliError::invariant(
                PHASE,
                format!("{} node levels differ from the compiled annotation", summary.level_mismatches),
            ));
        }
        let p = self.prepare(PHASE, artifact::SIMULATION)?;
        let c = Container::new(SIMULATION_KIND).with_meta(json!({ "summary": summary }));
        c.save(&p).map_err(|e| CliError::io(PHASE, &p, e))
    }

    pub fn report(&self) -> Result<FinalReport> {
        const PHASE: &str = "report";
        let mut needed = vec![
            artifact::TEACHER,
            artifact::STUDENT,
            artifact::STUDENT_CIRCUIT,
            artifact::SIMULATION,
        ];
        if self.cfg.baseline {
            needed.extend([artifact::BASELINE, artifact::BASELINE_CIRCUIT]);
        }
        let missing: Vec<String> = needed
            .iter()
            .filter_map(|n| self.require(n).err())
            .map(|e| e.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(CliError::phase(PHASE, missing.join("; ")));
        }
        let cost_model = match &self.cfg.cost_table {
            Some(p) => depthcut_he::CostModel::load(p).map_err(|e| CliError::from_he(PHASE, e))?,
            None => depthcut_he::CostModel::default(),
        };
        let teacher = self.load_checkpoint(PHASE, artifact::TEACHER)?;
        let student = self.load_checkpoint(PHASE, artifact::STUDENT)?;
        let circuit = self.load_circuit(PHASE, artifact::STUDENT_CIRCUIT)?;
        let sim = self.load_simulation(PHASE)?;
        let mut models = Vec::new();
        if self.cfg.baseline {
            let ck = self.load_checkpoint(PHASE, artifact::BASELINE)?;
            let c = self.load_circuit(PHASE, artifact::BASELINE_CIRCUIT)?;
            models.push(report::ModelEntry::new("full-poly", &ck, c, &cost_model)?);
        }
        models.push(report::ModelEntry::new("student", &student, circuit, &cost_model)?);
        let teacher_acc = meta_f64(&teacher, "eval_acc").unwrap_or(f64::NAN);
        let out = report::build(&self.cfg, teacher_acc, &models, &sim)?;
        let dir = self.prepare(PHASE, "report/report.json")?;
        let dir = dir.parent().expect("report directory");
        report::write_all(dir, &models, &out).map_err(|e| CliError::io(PHASE, dir, e))?;
        self.log
            .info(PHASE, "artifact", json!({ "path": dir.display().to_string(), "levels": out.levels }));
        Ok(out)
    }
}

/// Compares encrypted and plaintext logits on the same samples.
pub fn summarize(
    enc: &depthcut_core::Tensor,
    plain: &depthcut_core::Tensor,
    labels: &[usize],
    traces: &[depthcut_he::Trace],
    compiled: &Compiled,
) -> SimulationSummary {
    let k = plain.shape()[1];
    let n = plain.shape()[0];
    let max_abs_err = enc
        .data()
        .iter()
        .zip(plain.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let argmax = |row: &[f64]| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    let agree = (0..n)
        .filter(|&i| argmax(&enc.data()[i * k..(i + 1) * k]) == argmax(&plain.data()[i * k..(i + 1) * k]))
        .count();
    let mut counts = OpCounts::default();
    for t in traces {
        counts.rot += t.counts.rot;
        counts.pmult += t.counts.pmult;
        counts.add += t.counts.add;
        counts.cmult += t.counts.cmult;
        counts.rescale += t.counts.rescale;
    }
    SimulationSummary {
        samples: n,
        encrypted_acc: accuracy(enc, labels),
        plaintext_acc: accuracy(plain, labels),
        max_abs_err,
        argmax_agreement: agree as f64 / n.max(1) as f64,
        groups: traces.len(),
        counts,
        level_mismatches: traces.iter().map(|t| t.level_mismatches(&compiled.circuit).len()).sum(),
        wall_seconds: traces.iter().map(|t| t.wall_seconds).sum(),
    }
}
