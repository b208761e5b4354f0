//! Subcommand implementations.
//!
//! Each command reads the files named by the [`RunConfig`], writes its
//! artifacts under `out_dir`, and returns a [`Report`] that the binary prints
//! as one JSON object. With `check` set, a command also evaluates its
//! invariant checks and lists them in the report.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use liprcp::attack::{evaluate_under_attack, AttackConfig};
use liprcp::audit::{
    certified_band, critical_epsilons, write_audit_csv, AuditSidecar, CertifiedBand,
};
use liprcp::conformal::{
    calibrate, empirical_coverage, mean_set_size, prediction_set, true_label_scores,
    CalibrationRecord, PredictionSet,
};
use liprcp::datasets::{self, make_gaussian_mixture, split, DatasetKind, LabeledDataset, Split};
use liprcp::lipnet::{train_toy, LipschitzClassifier, TrainConfig};
use liprcp::poison::{poison_robust_calibrate, quantile_shift, PoisonBudget};
use liprcp::robust::{conservative_set, restrictive_set, robust_calibrate};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Calibrate,
    Predict,
    RobustPredict,
    Audit,
    AttackEval,
    PoisonCertify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Calibrate => "calibrate",
            Command::Predict => "predict",
            Command::RobustPredict => "robust-predict",
            Command::Audit => "audit",
            Command::AttackEval => "attack-eval",
            Command::PoisonCertify => "poison-certify",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub command: &'static str,
    pub summary: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checks: Option<Vec<Check>>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().flatten().all(|c| c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct Checks {
    enabled: bool,
    list: Vec<Check>,
}

impl Checks {
    fn new(enabled: bool) -> Self {
        Self {
            enabled,
            list: Vec::new(),
        }
    }

    /// Record a check; `f` only runs when checks are enabled.
    fn add(&mut self, name: &str, f: impl FnOnce() -> Result<bool>) -> Result<()> {
        if self.enabled {
            self.list.push(Check {
                name: name.to_string(),
                passed: f()?,
            });
        }
        Ok(())
    }

    fn into_option(self) -> Option<Vec<Check>> {
        self.enabled.then_some(self.list)
    }
}

pub fn run(cmd: Command, cfg: &RunConfig, check: bool) -> Result<Report> {
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let mut checks = Checks::new(check);
    let summary = match cmd {
        Command::Synth => synth(cfg, &mut checks)?,
        Command::Train => train(cfg, &mut checks)?,
        Command::Calibrate => cmd_calibrate(cfg, &mut checks)?,
        Command::Predict => predict(cfg, &mut checks)?,
        Command::RobustPredict => robust_predict(cfg, &mut checks)?,
        Command::Audit => audit(cfg, &mut checks)?,
        Command::AttackEval => attack_eval(cfg, &mut checks)?,
        Command::PoisonCertify => poison_certify(cfg, &mut checks)?,
    };
    Ok(Report {
        command: cmd.name(),
        summary,
        checks: checks.into_option(),
    })
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_data(cfg: &RunConfig) -> Result<LabeledDataset> {
    let path = cfg.data_path();
    datasets::load_logits_csv(&path).with_context(|| format!("loading data {}", path.display()))
}

fn load_model(cfg: &RunConfig) -> Result<LipschitzClassifier> {
    let path = cfg.model_path();
    LipschitzClassifier::from_json(&read_text(&path)?)
        .with_context(|| format!("loading model {}", path.display()))
}

fn load_record(cfg: &RunConfig) -> Result<CalibrationRecord> {
    let path = cfg.record_path();
    CalibrationRecord::from_json(&read_text(&path)?)
        .with_context(|| format!("loading calibration record {}", path.display()))
}

/// Logits of every split part, plus the Lipschitz product that applies to
/// them. Raw inputs go through the model; precomputed logits are used as is
/// with the configured product.
struct Scored {
    split: Split,
    cal: Vec<Vec<f64>>,
    eval: Vec<Vec<f64>>,
    test: Vec<Vec<f64>>,
    lipschitz_product: f64,
    num_classes: usize,
    model: Option<LipschitzClassifier>,
}

fn scored_split(cfg: &RunConfig) -> Result<Scored> {
    let data = load_data(cfg)?;
    let split = split(&data, &cfg.split_plan())?;
    match data.kind() {
        DatasetKind::PrecomputedLogits => Ok(Scored {
            cal: split.cal.features().to_vec(),
            eval: split.eval.features().to_vec(),
            test: split.test.features().to_vec(),
            split,
            lipschitz_product: cfg.lipschitz_product,
            num_classes: data.num_classes(),
            model: None,
        }),
        DatasetKind::RawInputs => {
            let model = load_model(cfg)?;
            ensure!(
                model.input_dim() == data.feature_dim(),
                "model expects {} inputs, data has {}",
                model.input_dim(),
                data.feature_dim()
            );
            ensure!(
                model.num_classes() >= data.num_classes(),
                "model has {} outputs but data labels need {}",
                model.num_classes(),
                data.num_classes()
            );
            Ok(Scored {
                cal: model.forward_batch(split.cal.features())?,
                eval: model.forward_batch(split.eval.features())?,
                test: model.forward_batch(split.test.features())?,
                split,
                lipschitz_product: model.lipschitz_product(),
                num_classes: model.num_classes(),
                model: Some(model),
            })
        }
    }
}

fn synth(cfg: &RunConfig, checks: &mut Checks) -> Result<Value> {
    let s = &cfg.synth;
    let data = make_gaussian_mixture(s.n, s.d, s.classes, s.separation, cfg.seed)?;
    let path = cfg.data_path();
    datasets::save_csv(&data, &path).with_context(|| format!("writing {}", path.display()))?;
    let meta = data.metadata(Some(cfg.seed));
    write_text(
        &path.with_extension("json"),
        &serde_json::to_string_pretty(&meta)?,
    )?;
    checks.add("csv_round_trip_is_exact", || {
        Ok(datasets::load_logits_csv(&path)? == data)
    })?;
    Ok(json!({ "data": path, "metadata": meta }))
}

fn train(cfg: &RunConfig, checks: &mut Checks) -> Result<Value> {
    let data = load_data(cfg)?;
    ensure!(
        data.kind() == DatasetKind::RawInputs,
        "train needs raw input features, not precomputed logits"
    );
    let split = split(&data, &cfg.split_plan())?;
    ensure!(
        !split.rest.is_empty(),
        "split leaves no rows for training; lower the split fractions"
    );
    let widths = cfg.widths(data.feature_dim(), data.num_classes());
    let init = LipschitzClassifier::orthogonal(&widths, cfg.seed)
        .with_context(|| format!("building orthogonal network with widths {widths:?}"))?;
    let t = &cfg.train;
    let tc = TrainConfig {
        epochs: t.epochs,
        learning_rate: t.learning_rate,
        temperature: t.temperature,
        batch_size: t.batch_size,
        seed: cfg.seed,
    };
    let model = train_toy(&init, &split.rest, &tc)?;
    let path = cfg.model_path();
    let text = model.to_json()?;
    write_text(&path, &text)?;
    checks.add("orthogonality_residual_below_1e-9", || {
        Ok(model.orthogonality_residual() <= 1e-9)
    })?;
    checks.add("model_json_round_trip", || {
        Ok(LipschitzClassifier::from_json(&text)? == model)
    })?;
    Ok(json!({
        "model": path,
        "widths": widths,
        "train_rows": split.rest.len(),
        "train_accuracy": model.accuracy(&split.rest)?,
        "test_accuracy": if split.test.is_empty() { Value::Null } else { json!(model.accuracy(&split.test)?) },
        "lipschitz_product": model.lipschitz_product(),
        "orthogonality_residual": model.orthogonality_residual(),
    }))
}

fn cmd_calibrate(cfg: &RunConfig, checks: &mut Checks) -> Result<Value> {
    let sc = scored_split(cfg)?;
    let spec = cfg.score_spec()?;
    let scores = true_label_scores(&spec, &sc.cal, sc.split.cal.labels())?;
    let mut rec = if cfg.calibration_epsilon > 0.0 {
        robust_calibrate(
            &scores,
            cfg.alpha,
            cfg.calibration_epsilon,
            spec,
            sc.lipschitz_product,
        )?
    } else {
        calibrate(&scores, cfg.alpha, spec, sc.lipschitz_product)?
    };
    rec.num_classes = Some(sc.num_classes);
    let path = cfg.record_path();
    let text = rec.to_json()?;
    write_text(&path, &text)?;
    checks.add("in_sample_coverage_at_least_1_minus_alpha", || {
        let sets: Vec<_> = sc.cal.iter().map(|l| prediction_set(&rec, l)).collect();
        Ok(empirical_coverage(&sets, sc.split.cal.labels())? >= 1.0 - cfg.alpha)
    })?;
    checks.add("record_json_round_trip", || {
        Ok(CalibrationRecord::from_json(&text)? == rec)
    })?;
    Ok(json!({ "record": path, "calibration": rec }))
}

/// `id,label,set_size,members` with members joined by `;`.
fn write_sets(path: &Path, data: &LabeledDataset, sets: &[PredictionSet]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ));
    w.write_record(["id", "label", "set_size", "members"])?;
    for ((id, y), set) in data.ids().iter().zip(data.labels()).zip(sets) {
        let members: Vec<String> = set.members.iter().map(usize::to_string).collect();
        w.write_record([
            id.as_str(),
            &y.to_string(),
            &set.len().to_string(),
            &members.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Coverage and mean size recomputed from a sets CSV.
pub fn sets_csv_summary(path: &Path) -> Result<(f64, f64)> {
    let mut r = csv::Reader::from_path(path)?;
    let (mut n, mut hits, mut size) = (0usize, 0usize, 0usize);
    for row in r.records() {
        let row = row?;
        let label: usize = row[1].parse()?;
        let members: Vec<usize> = if row[3].is_empty() {
            Vec::new()
        } else {
            row[3]
                .split(';')
                .map(str::parse)
                .collect::<Result<_, _>>()?
        };
        ensure!(
            members.len() == row[2].parse::<usize>()?,
            "set_size disagrees with members"
        );
        n += 1;
        hits += usize::from(members.contains(&label));
        size += members.len();
    }
    ensure!(n > 0, "{} has no rows", path.display());
    Ok((hits as f64 / n as f64, size as f64 / n as f64))
}

fn record_for(cfg: &RunConfig, sc: &Scored) -> Result<CalibrationRecord> {
    let rec = load_record(cfg)?;
    rec.check_width(sc.num_classes)?;
    ensure!(
        rec.score_spec == cfg.score_spec()?,
        "calibration record was made with score settings {:?}, config has {:?}",
        rec.score_spec,
        cfg.score_spec()?
    );
    Ok(rec)
}

fn predict(cfg: &RunConfig, checks: &mut Checks) -> Result<Value> {
    let sc = scored_split(cfg)?;
    let rec = record_for(cfg, &sc)?;
    let test = &sc.split.test;
    ensure!(!test.is_empty(), "test split is empty");
    let sets: Vec<_> = sc
        .test
        .par_iter()
        .map(|l| prediction_set(&rec, l))
        .collect();
    let coverage = empirical_coverage(&sets, test.labels())?;
    let size = mean_set_size(&sets);
    let path = out(cfg, "sets.csv");
    write_sets(&path, test, &sets)?;
    checks.add("summary_matches_csv", || {
        Ok(sets_csv_summary(&path)? == (coverage, size))
    })?;
    Ok(json!({ "sets": path, "n": test.len(), "coverage": coverage, "mean_set_size": size }))
}

fn robust_predict(cfg: &RunConfig, checks: &mut Checks) -> Result<Value> {
    let sc = scored_split(cfg)?;
    let rec = record_for(cfg, &sc)?;
    if rec.epsilon_calibrated > 0.0 {
        bail!(
            "calibration record is already inflated for epsilon={}; robust prediction would inflate twice. \
             Use predict with this record, or recalibrate with calibration_epsilon=0",
            rec.epsilon_calibrated
        );
    }
    let test = &sc.split.test;
    ensure!(!test.is_empty(), "test split is empty");
    let (eps, method) = (cfg.epsilon, cfg.method);
    let pairs = sc
        .test
        .par_iter()
        .map(|l| {
            Ok((
                conservative_set(&rec, l, eps, method)?,
                restrictive_set(&rec, l, eps, method)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (cons, rest): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let cons_path = out(cfg, "robust_sets.csv");
    let rest_path = out(cfg, "restrictive_sets.csv");
    write_sets(&cons_path, test, &cons)?;
    write_sets(&rest_path, test, &rest)?;
    let summary = json!({
        "epsilon": eps,
        "method": method,
        "n": test.len(),
        "conservative": { "sets": cons_path, "coverage": empirical_coverage(&cons, test.labels())?, "mean_set_size": mean_set_size(&cons) },
        "restrictive": { "sets": rest_path, "coverage": empirical_coverage(&rest, test.labels())?, "mean_set_size": mean_set_size(&rest) },
    });
    checks.add("restrictive_within_vanilla_within_conservative", || {
        Ok(sc
            .test
            .iter()
            .zip(cons.iter().zip(&rest))
            .all(|(l, (c, r))| {
                let v = prediction_set(&rec, l);
                r.is_subset(&v) && v.is_subset(c)
            }))
    })?;
    checks.add("summary_matches_csv", || {
        let c = sets_csv_summary(&cons_path)?;
        Ok(json!(c.0) == summary["conservative"]["coverage"]
            && json!(c.1) == summary["conservative"]["mean_set_size"])
    })?;
    checks.add("mean_size_non_decreasing_in_epsilon", || {
        let mut grid: Vec<f64> = cfg.epsilons.iter().copied().chain([eps]).collect();
        grid.sort_by(f64::total_cmp);
        let sizes = grid
            .iter()
            .map(|&e| {
                let s = sc
                    .test
                    .iter()
                    .map(|l| conservative_set(&rec, l, e, method))
                    .collect::<liprcp::Result<Vec<_>>>()?;
                Ok(mean_set_size(&s))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(sizes.windows(2).all(|w| w[0] <= w[1]))
    })?;
    Ok(summary)
}

fn band_for(
    cfg: &RunConfig,
    sc: &Scored,
    rec: &CalibrationRecord,
) -> Result<(CertifiedBand, bool)> {
    let eval = &sc.split.eval;
    ensure!(
        eval.len() >= 2,
        "audit needs at least 2 evaluation points, the eval split has {}",
        eval.len()
    );
    let crit = critical_epsilons(rec, &sc.eval, eval.labels(), cfg.method)?;
    let fell_back = crit.fell_back;
    Ok((certified_band(&crit, cfg.delta, cfg.correction)?, fell_back))
}

fn audit(cfg: &RunConfig, checks: &mut Checks) -> Result<Value> {
    let sc = scored_split(cfg)?;
    let rec = record_for(cfg, &sc)?;
    let (band, fell_back) = band_for(cfg, &sc, &rec)?;
    let rows = band.rows();
    let csv_path = out(cfg, "audit.csv");
    let f =
        fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    write_audit_csv(&rows, BufWriter::new(f))?;
    let sidecar = AuditSidecar::new(&band, &rec);
    write_text(
        &out(cfg, "audit.json"),
        &serde_json::to_string_pretty(&sidecar)?,
    )?;
    checks.add("band_brackets_empirical_curves", || {
        Ok(rows.iter().all(|r| {
            r.covmin_minus <= r.covmin_emp
                && r.covmin_emp <= r.covmax_emp
                && r.covmax_emp <= r.covmax_plus
        }))
    })?;
    checks.add("vanilla_coverage_at_zero", || {
        Ok(band.curves.covmax.eval(0.0) == band.curves.covmin.eval(0.0))
    })?;
    Ok(json!({
        "audit": csv_path,
        "rows": rows.len(),
        "sidecar": sidecar,
        "method_used": band_method_name(cfg, fell_back),
        "fell_back_to_global": fell_back,
        "vanilla_coverage": band.curves.covmax.eval(0.0),
    }))
}

fn band_method_name(cfg: &RunConfig, fell_back: bool) -> Value {
    if fell_back {
        json!(liprcp::scores::BoundMethod::GlobalLipschitz)
    } else {
        json!(cfg.method)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub coverage_under_attack: f64,
    pub mean_set_size: f64,
    pub band_lower: f64,
    pub band_upper: f64,
    pub inside_band: bool,
}

fn attack_eval(cfg: &RunConfig, checks: &mut Checks) -> Result<Value> {
    let sc = scored_split(cfg)?;
    let model = sc
        .model
        .as_ref()
        .context("attack-eval needs raw input data and a model, not precomputed logits")?;
    let rec = record_for(cfg, &sc)?;
    ensure!(!sc.split.test.is_empty(), "test split is empty");
    let (band, fell_back) = band_for(cfg, &sc, &rec)?;
    let a = &cfg.attack;
    let mut rows = Vec::with_capacity(cfg.epsilons.len());
    for &eps in &cfg.epsilons {
        let ac = AttackConfig {
            epsilon: eps,
            steps: a.steps,
            step_size: eps * a.step_fraction,
            restarts: a.restarts,
            seed: cfg.seed,
            objective: a.objective,
        };
        let ev = evaluate_under_attack(model, &rec, &sc.split.test, &ac)?;
        rows.push(SweepRow {
            epsilon: eps,
            coverage_under_attack: ev.coverage,
            mean_set_size: ev.mean_set_size,
            band_lower: band.lower_at(eps),
            band_upper: band.upper_at(eps),
            inside_band: band.contains(eps, ev.coverage),
        });
    }
    let path = out(cfg, "attack_sweep.csv");
    let mut w = BufWriter::new(
        fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    );
    writeln!(
        w,
        "epsilon,coverage_under_attack,mean_set_size,band_lower,band_upper,inside_band"
    )?;
    for r in &rows {
        writeln!(
            w,
            "{:?},{:?},{:?},{:?},{:?},{}",
            r.epsilon,
            r.coverage_under_attack,
            r.mean_set_size,
            r.band_lower,
            r.band_upper,
            r.inside_band
        )?;
    }
    w.flush()?;
    let inside = rows.iter().filter(|r| r.inside_band).count();
    checks.add("one_band_row_per_grid_point", || {
        Ok(rows.len() == cfg.epsilons.len())
    })?;
    checks.add("attacked_coverage_inside_band", || Ok(inside == rows.len()))?;
    Ok(json!({
        "sweep": path,
        "n_test": sc.split.test.len(),
        "m_eval": band.m,
        "rows": rows,
        "inside_band": inside,
        "method_used": band_method_name(cfg, fell_back),
        "fell_back_to_global": fell_back,
    }))
}

fn poison_certify(cfg: &RunConfig, checks: &mut Checks) -> Result<Value> {
    let sc = scored_split(cfg)?;
    let spec = cfg.score_spec()?;
    let scores = true_label_scores(&spec, &sc.cal, sc.split.cal.labels())?;
    let p = &cfg.poison;
    ensure!(
        p.k <= scores.len(),
        "poison.k={} exceeds the {} calibration points",
        p.k,
        scores.len()
    );
    let budget = PoisonBudget::for_spec(p.k, p.epsilon, sc.lipschitz_product, &spec)?;
    let cert = quantile_shift(&scores, cfg.alpha, &budget, true)?;
    let mut rec = poison_robust_calibrate(&scores, cfg.alpha, &budget, spec, sc.lipschitz_product)?;
    rec.num_classes = Some(sc.num_classes);
    let cert_path = out(cfg, "poison_certificate.json");
    let rec_path = out(cfg, "poison_calibration.json");
    write_text(&cert_path, &serde_json::to_string_pretty(&cert)?)?;
    write_text(&rec_path, &rec.to_json()?)?;
    checks.add("q_min_le_nominal_le_q_max", || {
        Ok(cert.q_min <= cert.q_nominal && cert.q_nominal <= cert.q_max)
    })?;
    checks.add("no_budget_no_shift", || {
        let zero = PoisonBudget::for_spec(0, p.epsilon, sc.lipschitz_product, &spec)?;
        let c = quantile_shift(&scores, cfg.alpha, &zero, true)?;
        Ok(c.q_min == c.q_max)
    })?;
    Ok(json!({
        "certificate": cert_path,
        "record": rec_path,
        "q_nominal": cert.q_nominal,
        "q_min": cert.q_min,
        "q_max": cert.q_max,
        "q_robust": rec.q_alpha,
        "k": p.k,
        "epsilon": p.epsilon,
        "delta_score": budget.delta_score,
    }))
}
