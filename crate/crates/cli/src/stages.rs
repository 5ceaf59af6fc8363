//! The pipeline stages. Each one reads its inputs from the run directory
//! and writes its outputs back there, so any stage can be resumed alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use amp_core::data::{load_image_dir, sample_prune_set, synth_dataset_with, DatasetManifest};
use amp_core::eval::{evaluate, paired_throughput, Throughput};
use amp_core::importance::{compute_importance, rank};
use amp_core::pruner::{adaptive_prune, apply_surgery, entropy_curve};
use amp_core::teacher::train_supervised;
use amp_core::{
    distill, io, load_checkpoint, save_checkpoint, Dataset, EvalReport, ImportanceTable, NeuronRanking, PruneReport,
    VitModel,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{CriterionChoice, DataSection, RunConfig};
use crate::error::CliError;
use crate::manifest::{fingerprint, RunManifest, StageRecord};

pub const TEACHER: &str = "teacher";

pub fn stage_key(stage: &str, crit: CriterionChoice) -> String {
    format!("{stage}:{}", crit.short())
}

/// Shared state for one CLI invocation.
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub force: bool,
    pub criterion: CriterionChoice,
}

/// Train and held-out splits described by the config.
pub fn load_data(config: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let size = config.model.image_size;
    match &config.data {
        DataSection::Synthetic {
            num_classes,
            train_per_class,
            test_per_class,
            train_seed,
            test_seed,
            style,
        } => Ok((
            synth_dataset_with(*num_classes, *train_per_class, size, *train_seed, style)?,
            synth_dataset_with(*num_classes, *test_per_class, size, *test_seed, style)?,
        )),
        DataSection::ImageDir { train_dir, test_dir } => {
            let train = load_image_dir(train_dir, size)?;
            let test = load_image_dir(test_dir, size)?;
            if train.class_names != test.class_names {
                return Err(CliError::Config(format!(
                    "train classes {:?} differ from test classes {:?}",
                    train.class_names, test.class_names
                )));
            }
            Ok((train.dataset, test.dataset))
        }
    }
}

impl Run {
    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn require(&self, stage: &str, command: &str) -> Result<&StageRecord, CliError> {
        self.manifest
            .completed(&self.dir, stage)
            .ok_or_else(|| CliError::MissingStage {
                stage: stage.to_string(),
                command: command.to_string(),
                run_dir: self.dir.display().to_string(),
            })
    }

    /// Whether `stage` must (re)run. A finished stage with the same
    /// fingerprint is skipped; one with different settings is only replaced
    /// under `--force`.
    fn should_run(&self, stage: &str, fp: &str) -> Result<bool, CliError> {
        match self.manifest.completed(&self.dir, stage) {
            Some(rec) if self.force => {
                log::info!("{stage}: recomputing over existing outputs ({})", rec.fingerprint);
                Ok(true)
            }
            Some(rec) if rec.fingerprint == fp => {
                log::info!(
                    "{stage}: already complete in {}, nothing to do (pass --force to recompute)",
                    self.dir.display()
                );
                Ok(false)
            }
            Some(rec) => Err(CliError::Config(format!(
                "{stage}: {} holds outputs from different settings ({} vs {fp}); pass --force to overwrite",
                self.dir.display(),
                rec.fingerprint
            ))),
            None => Ok(true),
        }
    }

    fn finish(&mut self, stage: &str, fp: String, artifacts: &[(&str, String)]) -> Result<(), CliError> {
        let artifacts: BTreeMap<String, String> = artifacts.iter().map(|(r, f)| (r.to_string(), f.clone())).collect();
        self.manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                fingerprint: fp,
                artifacts,
            },
        );
        self.manifest.save(&self.dir)
    }

    fn teacher_fp(&self) -> String {
        let c = &self.config;
        fingerprint(&json!({"model": c.model, "data": c.data, "teacher": c.teacher, "seeds": c.seeds}))
    }

    fn score_fp(&self, teacher_fp: &str) -> String {
        let c = &self.config.criterion;
        fingerprint(&json!({
            "teacher": teacher_fp, "kind": self.criterion, "tau": c.tau, "n": c.prune_set_size,
            "batch": c.batch_size, "aggregation": c.aggregation, "seed": self.config.seeds.prune_sample(),
        }))
    }

    fn prune_fp(&self, score_fp: &str) -> String {
        let c = &self.config.criterion;
        fingerprint(&json!({"score": score_fp, "delta_e": c.delta_e, "t_max": c.t_max, "eval": self.config.eval}))
    }

    fn load_model(&self, stage: &str, role: &str) -> Result<VitModel, CliError> {
        let file = self
            .manifest
            .artifact(stage, role)
            .expect("required stage lists its artifacts");
        Ok(load_checkpoint(self.path(file))?)
    }

    pub fn teacher(&mut self) -> Result<(), CliError> {
        let fp = self.teacher_fp();
        if !self.should_run(TEACHER, &fp)? {
            return Ok(());
        }
        let (train, test) = load_data(&self.config)?;
        let tc = &self.config.teacher;
        let mut artifacts = vec![("checkpoint", "teacher.ckpt".to_string())];
        let model = match &tc.checkpoint {
            Some(path) => {
                let m = load_checkpoint(path)?;
                if m.config.image_size != self.config.model.image_size {
                    return Err(CliError::Config(format!(
                        "teacher checkpoint expects {}px images, config has {}px",
                        m.config.image_size, self.config.model.image_size
                    )));
                }
                log::info!("teacher: loaded {}", path.display());
                m
            }
            None => {
                let cfg = self.config.model.model_config(train.num_classes);
                let init = VitModel::init_random(cfg, self.config.seeds.init())?;
                log::info!("teacher: training {}", init.config.summary());
                let (model, log) = train_supervised(&init, &train, &tc.train, &tc.objective)?;
                distill::write_loss_csv(self.path("teacher_loss.csv"), &log)?;
                artifacts.push(("loss_curve", "teacher_loss.csv".into()));
                model
            }
        };
        save_checkpoint(&model, self.path("teacher.ckpt"))?;
        let report = self.eval_report("teacher", &model, &train, &test)?;
        log::info!(
            "teacher: kNN top-1 {:.2}% on {} held-out images",
            report.knn_top1,
            test.len()
        );
        report.save(self.path("eval_teacher.json"))?;
        io::write_json(self.path("data_train.json"), &train.manifest(&[]))?;
        artifacts.push(("eval", "eval_teacher.json".into()));
        artifacts.push(("data_manifest", "data_train.json".into()));
        self.finish(TEACHER, fp, &artifacts)
    }

    pub fn score(&mut self) -> Result<(), CliError> {
        let teacher_fp = self.require(TEACHER, "teacher")?.fingerprint.clone();
        let key = stage_key("score", self.criterion);
        let fp = self.score_fp(&teacher_fp);
        if !self.should_run(&key, &fp)? {
            return Ok(());
        }
        let teacher = self.load_model(TEACHER, "checkpoint")?;
        let (train, _) = load_data(&self.config)?;
        let c = &self.config.criterion;
        let prune_set = sample_prune_set(&train, c.prune_set_size, self.config.seeds.prune_sample())?;
        let set_file = format!("prune_set_{}.json", self.criterion.short());
        io::write_json(self.path(&set_file), &prune_set.manifest(&[]))?;
        let crit = crate::config::CriterionSection {
            kind: self.criterion,
            ..c.clone()
        }
        .criterion();
        let table = compute_importance(&teacher, &prune_set, &crit, c.batch_size, c.aggregation)?;
        let table_file = format!("importance_{}.json", self.criterion.short());
        table.save(self.path(&table_file))?;
        log::info!(
            "score: {} over {} batches of {}",
            table.criterion_tag,
            table.batches_accumulated,
            c.batch_size
        );
        self.finish(&key, fp, &[("importance", table_file), ("prune_set", set_file)])
    }

    fn prune_inputs(&self) -> Result<(VitModel, NeuronRanking, Dataset, Dataset, Dataset, String), CliError> {
        let key = stage_key("score", self.criterion);
        let score_fp = self
            .require(&key, &format!("score --criterion {}", self.criterion.short()))?
            .fingerprint
            .clone();
        let teacher = self.load_model(TEACHER, "checkpoint")?;
        let table = ImportanceTable::load(self.path(self.manifest.artifact(&key, "importance").expect("listed")))?;
        let ranking = rank(&table)?;
        let set: DatasetManifest =
            io::read_json(self.path(self.manifest.artifact(&key, "prune_set").expect("listed")))?;
        let (train, test) = load_data(&self.config)?;
        if set.checksum != train.subset(&set.ordering, "check").checksum() {
            return Err(amp_core::AmpError::Data("pruning set no longer matches the training data".into()).into());
        }
        let prune_set = train.subset(&set.ordering, set.source_tag.clone());
        Ok((teacher, ranking, prune_set, train, test, score_fp))
    }

    pub fn prune(&mut self) -> Result<(), CliError> {
        let (teacher, ranking, prune_set, train, test, score_fp) = self.prune_inputs()?;
        let key = stage_key("prune", self.criterion);
        let fp = self.prune_fp(&score_fp);
        if !self.should_run(&key, &fp)? {
            return Ok(());
        }
        let c = &self.config.criterion;
        let (plan, report) = adaptive_prune(&teacher, &ranking, &prune_set, c.tau, c.batch_size, c.delta_e, c.t_max)?;
        let pruned = apply_surgery(&teacher, &plan)?;
        let s = self.criterion.short();
        let files = [
            format!("plan_{s}.json"),
            format!("prune_report_{s}.json"),
            format!("entropy_trace_{s}.csv"),
            format!("pruned_{s}.ckpt"),
            format!("eval_pruned_{s}.json"),
        ];
        plan.save(self.path(&files[0]))?;
        report.save(self.path(&files[1]))?;
        write_trace_csv(&self.path(&files[2]), &report)?;
        save_checkpoint(&pruned, self.path(&files[3]))?;
        let eval = self.eval_report("pruned", &pruned, &train, &test)?;
        eval.save(self.path(&files[4]))?;
        log::info!(
            "prune: hidden {:?} -> {:?}, MLP params {} -> {}, kNN {:.2}%",
            report.hidden_before,
            report.hidden_after,
            teacher.count_mlp_params(),
            pruned.count_mlp_params(),
            eval.knn_top1
        );
        let [a, b, c, d, e] = files;
        self.finish(
            &key,
            fp,
            &[("plan", a), ("report", b), ("trace", c), ("checkpoint", d), ("eval", e)],
        )
    }

    /// Prunes once per threshold in `sweep.delta_e` and records cost and
    /// un-finetuned accuracy.
    pub fn sweep(&mut self) -> Result<(), CliError> {
        let (teacher, ranking, prune_set, train, test, score_fp) = self.prune_inputs()?;
        let key = stage_key("sweep", self.criterion);
        let fp = fingerprint(&json!({
            "score": score_fp, "delta_e": self.config.sweep.delta_e, "t_max": self.config.criterion.t_max,
            "eval": self.config.eval,
        }));
        if !self.should_run(&key, &fp)? {
            return Ok(());
        }
        let c = &self.config.criterion;
        let mut rows = Vec::new();
        for &de in &self.config.sweep.delta_e {
            let (plan, report) = adaptive_prune(&teacher, &ranking, &prune_set, c.tau, c.batch_size, de, c.t_max)?;
            let pruned = apply_surgery(&teacher, &plan)?;
            let eval = self.eval_report("sweep", &pruned, &train, &test)?;
            log::info!(
                "sweep: delta_e {de:e} -> hidden {:?}, kNN {:.2}%",
                plan.sizes(),
                eval.knn_top1
            );
            rows.push(SweepRow {
                delta_e: de,
                hidden_sizes: plan.sizes(),
                params: pruned.count_params(),
                mlp_params: pruned.count_mlp_params(),
                flops: pruned.count_flops(pruned.config.image_size),
                final_entropy: report.final_entropy,
                knn_top1: eval.knn_top1,
            });
        }
        let s = self.criterion.short();
        let (jf, cf) = (format!("sweep_{s}.json"), format!("sweep_{s}.csv"));
        io::write_json(self.path(&jf), &rows)?;
        write_sweep_csv(&self.path(&cf), &rows)?;
        self.finish(&key, fp, &[("rows", jf), ("csv", cf)])
    }

    pub fn distill(&mut self) -> Result<(), CliError> {
        let pkey = stage_key("prune", self.criterion);
        let prune_fp = self
            .require(&pkey, &format!("prune --criterion {}", self.criterion.short()))?
            .fingerprint
            .clone();
        let key = stage_key("distill", self.criterion);
        let fp = fingerprint(&json!({"prune": prune_fp, "distill": self.config.distill}));
        if !self.should_run(&key, &fp)? {
            return Ok(());
        }
        let teacher = self.load_model(TEACHER, "checkpoint")?;
        let pruned = self.load_model(&pkey, "checkpoint")?;
        let (train, _) = load_data(&self.config)?;
        let (student, log) = distill::train(&pruned, &teacher, &train, &self.config.distill)?;
        let s = self.criterion.short();
        let (ck, lc) = (format!("student_{s}.ckpt"), format!("distill_loss_{s}.csv"));
        save_checkpoint(&student, self.path(&ck))?;
        distill::write_loss_csv(self.path(&lc), &log)?;
        if let (Some(first), Some(last)) = (log.first(), log.last()) {
            log::info!(
                "distill: loss {:.4e} -> {:.4e} over {} steps",
                first.loss,
                last.loss,
                log.len()
            );
        }
        self.finish(&key, fp, &[("checkpoint", ck), ("loss_curve", lc)])
    }

    pub fn eval(&mut self) -> Result<(), CliError> {
        let dkey = stage_key("distill", self.criterion);
        let distill_fp = self
            .require(&dkey, &format!("distill --criterion {}", self.criterion.short()))?
            .fingerprint
            .clone();
        let key = stage_key("eval", self.criterion);
        let fp = fingerprint(&json!({"distill": distill_fp, "eval": self.config.eval}));
        if !self.should_run(&key, &fp)? {
            return Ok(());
        }
        let teacher = self.load_model(TEACHER, "checkpoint")?;
        let student = self.load_model(&dkey, "checkpoint")?;
        let (train, test) = load_data(&self.config)?;
        let t = self.eval_report("teacher", &teacher, &train, &test)?;
        let s = self.eval_report("student", &student, &train, &test)?;
        let n = self.config.eval.throughput_batch.min(test.len());
        let images = test.gather(&(0..n).collect::<Vec<_>>());
        let (tt, ts) = paired_throughput(&teacher, &student, &images, self.config.eval.throughput_trials)?;
        let c = self.criterion.short();
        let files = [
            format!("eval_teacher_{c}.json"),
            format!("eval_student_{c}.json"),
            format!("per_class_teacher_{c}.csv"),
            format!("per_class_student_{c}.csv"),
            format!("throughput_{c}.json"),
        ];
        t.save(self.path(&files[0]))?;
        s.save(self.path(&files[1]))?;
        t.write_per_class_csv(self.path(&files[2]))?;
        s.write_per_class_csv(self.path(&files[3]))?;
        io::write_json(
            self.path(&files[4]),
            &ThroughputPair {
                teacher: tt.clone(),
                student: ts.clone(),
            },
        )?;
        log::info!(
            "eval: kNN teacher {:.2}% student {:.2}%, throughput {:.1} vs {:.1} img/s",
            t.knn_top1,
            s.knn_top1,
            tt.images_per_second,
            ts.images_per_second
        );
        let [a, b, c2, d, e] = files;
        self.finish(
            &key,
            fp,
            &[
                ("teacher", a),
                ("student", b),
                ("teacher_per_class", c2),
                ("student_per_class", d),
                ("throughput", e),
            ],
        )
    }

    fn eval_report(
        &self,
        label: &str,
        model: &VitModel,
        train: &Dataset,
        test: &Dataset,
    ) -> Result<EvalReport, CliError> {
        let e = &self.config.eval;
        Ok(evaluate(label, model, train, test, e.k, e.temperature, e.batch_size)?)
    }

    /// Collects whatever the run has produced into `report/`. Missing stages
    /// become entries in `gaps` rather than errors.
    pub fn report(&mut self, dense: bool) -> Result<RunReport, CliError> {
        let out = self.path("report");
        std::fs::create_dir_all(&out).map_err(|e| amp_core::AmpError::Io {
            path: out.clone(),
            source: e,
        })?;
        let mut report = RunReport::default();
        if self.manifest.completed(&self.dir, TEACHER).is_none() {
            report.gaps.push("teacher: not run".into());
        }
        for crit in [CriterionChoice::Entropy, CriterionChoice::CrossEntropy] {
            if let Some(section) = self.criterion_report(crit, &out, &mut report.gaps)? {
                report.criteria.insert(crit.short().to_string(), section);
            }
        }
        if dense {
            match self.dense_curves(&out) {
                Ok(file) => report.dense_curve = Some(file),
                Err(CliError::MissingStage { stage, .. }) => {
                    report.gaps.push(format!("dense sweep: needs stage {stage}"));
                }
                Err(e) => return Err(e),
            }
        }
        io::write_json(out.join("report.json"), &report)?;
        for gap in &report.gaps {
            log::warn!("report gap: {gap}");
        }
        Ok(report)
    }

    fn criterion_report(
        &self,
        crit: CriterionChoice,
        out: &Path,
        gaps: &mut Vec<String>,
    ) -> Result<Option<CriterionReport>, CliError> {
        let s = crit.short();
        let done = |stage: &str| self.manifest.completed(&self.dir, &stage_key(stage, crit)).is_some();
        if !done("score") && !done("prune") {
            return Ok(None);
        }
        let mut section = CriterionReport::default();
        let prune_key = stage_key("prune", crit);
        if done("prune") {
            let pr = PruneReport::load(self.path(self.manifest.artifact(&prune_key, "report").expect("listed")))?;
            write_trace_csv(&out.join(format!("entropy_curves_{s}.csv")), &pr)?;
            section.hidden_before = pr.hidden_before.clone();
            section.hidden_after = pr.hidden_after.clone();
            section.delta_e = Some(pr.delta_e);
            let pruned = EvalReport::load(self.path(self.manifest.artifact(&prune_key, "eval").expect("listed")))?;
            section.pruned_knn_top1 = Some(pruned.knn_top1);
        } else {
            gaps.push(format!("prune:{s}: not run"));
        }
        let sweep_key = stage_key("sweep", crit);
        if done("sweep") {
            section.sweep = io::read_json(self.path(self.manifest.artifact(&sweep_key, "rows").expect("listed")))?;
        }
        if !done("distill") {
            gaps.push(format!("distill:{s}: not run"));
        }
        let eval_key = stage_key("eval", crit);
        if done("eval") {
            let t = EvalReport::load(self.path(self.manifest.artifact(&eval_key, "teacher").expect("listed")))?;
            let st = EvalReport::load(self.path(self.manifest.artifact(&eval_key, "student").expect("listed")))?;
            let tp: ThroughputPair =
                io::read_json(self.path(self.manifest.artifact(&eval_key, "throughput").expect("listed")))?;
            section.deltas = Some(Deltas {
                params: t.params as i64 - st.params as i64,
                mlp_params: t.mlp_params as i64 - st.mlp_params as i64,
                flops: t.flops as i64 - st.flops as i64,
                param_reduction: 1.0 - st.params as f64 / t.params as f64,
                mlp_param_reduction: 1.0 - st.mlp_params as f64 / t.mlp_params as f64,
                knn_top1_teacher: t.knn_top1,
                knn_top1_student: st.knn_top1,
                knn_top1_drop: t.knn_top1 - st.knn_top1,
                throughput_ratio: tp.student.images_per_second / tp.teacher.images_per_second,
            });
        } else {
            gaps.push(format!("eval:{s}: not run"));
        }
        Ok(Some(section))
    }

    fn dense_curves(&self, out: &Path) -> Result<String, CliError> {
        self.require(TEACHER, "teacher")?;
        let (teacher, ranking, prune_set, _, _, _) = self.prune_inputs()?;
        let c = &self.config.criterion;
        let mut rows = Vec::new();
        for block in 0..teacher.num_blocks() {
            for (m, e) in entropy_curve(
                &teacher,
                &ranking,
                &prune_set,
                c.tau,
                c.batch_size,
                block,
                &self.config.sweep.dense_grid,
            )? {
                rows.push(vec![block.to_string(), m.to_string(), format!("{e:.12e}")]);
            }
        }
        let file = format!("dense_curve_{}.csv", self.criterion.short());
        io::write_csv(out.join(&file), &["block", "hidden", "entropy"], &rows)?;
        Ok(file)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta_e: f64,
    pub hidden_sizes: Vec<usize>,
    pub params: usize,
    pub mlp_params: usize,
    pub flops: u64,
    pub final_entropy: f64,
    pub knn_top1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputPair {
    pub teacher: Throughput,
    pub student: Throughput,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub params: i64,
    pub mlp_params: i64,
    pub flops: i64,
    pub param_reduction: f64,
    pub mlp_param_reduction: f64,
    pub knn_top1_teacher: f64,
    pub knn_top1_student: f64,
    pub knn_top1_drop: f64,
    pub throughput_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub delta_e: Option<f64>,
    pub hidden_before: Vec<usize>,
    pub hidden_after: Vec<usize>,
    pub pruned_knn_top1: Option<f64>,
    pub deltas: Option<Deltas>,
    pub sweep: Vec<SweepRow>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub criteria: BTreeMap<String, CriterionReport>,
    pub dense_curve: Option<String>,
    pub gaps: Vec<String>,
}

fn write_trace_csv(path: &Path, report: &PruneReport) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for b in &report.blocks {
        rows.push(vec![
            b.block.to_string(),
            "0".into(),
            b.m0.to_string(),
            format!("{:.12e}", b.e0),
            "baseline".into(),
        ]);
        for r in &b.trace {
            rows.push(vec![
                b.block.to_string(),
                r.t.to_string(),
                r.m_t.to_string(),
                format!("{:.12e}", r.e_t),
                if r.accepted { "accept" } else { "reject" }.into(),
            ]);
        }
    }
    io::write_csv(path, &["block", "t", "hidden", "entropy", "decision"], &rows)?;
    Ok(())
}

fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{:e}", r.delta_e),
                r.params.to_string(),
                r.mlp_params.to_string(),
                r.flops.to_string(),
                format!("{:.12e}", r.final_entropy),
                format!("{:.4}", r.knn_top1),
                r.hidden_sizes
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(" "),
            ]
        })
        .collect();
    io::write_csv(
        path,
        &[
            "delta_e",
            "params",
            "mlp_params",
            "flops",
            "final_entropy",
            "knn_top1",
            "hidden",
        ],
        &rows,
    )?;
    Ok(())
}
