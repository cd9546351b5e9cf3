use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};

use sbgc::classify::marginal_from_logps;
use sbgc::config::DataKind;
use sbgc::data::{gen_gmm_dataset, gen_toyimage_dataset, Dataset};
use sbgc::experiments::{interp_grid, interpolate_dataset, trace_convergence_experiment, trace_rows_csv, ReportWriter};
use sbgc::flow::{bits_per_dim, sample_probe_seed, LikelihoodRecord};
use sbgc::rng::derive_seed;
use sbgc::robust::{attack_dataset, corruption_eval, summarize_attacks};
use sbgc::score::{load_checkpoint, save_checkpoint, AnalyticGmmScore};
use sbgc::train::write_loss_csv;
use sbgc::{
    evaluate_accuracy, log_likelihood, train, Config, MlpArch, MlpScoreNet, Norm, ScoreModel, SdeKind, TraceMode,
};

use crate::{Command, EvalArgs, Global, NormArg, SdeArg, TraceArg};

const TRAIN_FILE: &str = "train.sbgc";
const TEST_FILE: &str = "test.sbgc";
const MODEL_FILE: &str = "model.sbgc";

/// The config file (or defaults) with command-line overrides applied. The
/// root seed is copied into the training and probe seeds.
pub fn resolve_config(g: &Global) -> Result<Config> {
    let mut c = match &g.config {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(k) = g.sde {
        c.sde.kind = match k {
            SdeArg::Vp => SdeKind::Vp,
            SdeArg::Subvp => SdeKind::SubVp,
        };
    }
    if let Some(t) = g.trace {
        c.trace.mode = match t {
            TraceArg::Exact => TraceMode::Exact,
            TraceArg::Hutchinson => TraceMode::Hutchinson,
        };
    }
    if let Some(n) = g.probes {
        c.trace.n_probes = n;
        c.attack.n_probes = n;
    }
    c.train.seed = c.seed;
    c.trace.seed = c.seed;
    c.validate()?;
    Ok(c)
}

pub fn run(g: &Global, cmd: &Command) -> Result<()> {
    let mut config = resolve_config(g)?;
    if let Command::Train { steps: Some(s), .. } = cmd {
        config.train.steps = *s;
    }
    let w = ReportWriter::new(&g.out_dir, &config)
        .with_context(|| format!("creating output directory {}", g.out_dir.display()))?;
    let ctx = Ctx { g, config, w };
    match cmd {
        Command::GenData => ctx.gen_data(),
        Command::Train { data, .. } => ctx.train(data.as_deref()),
        Command::Likelihood { eval, class } => ctx.likelihood(eval, class.as_deref()),
        Command::Classify { eval } => ctx.classify(eval),
        Command::Attack { eval, norm } => ctx.attack(eval, *norm),
        Command::CorruptEval { eval } => ctx.corrupt_eval(eval),
        Command::Interpolate { eval } => ctx.interpolate(eval),
        Command::TraceConvergence { eval } => ctx.trace_convergence(eval),
        Command::Report => ctx.report(),
    }
}

struct Ctx<'a> {
    g: &'a Global,
    config: Config,
    w: ReportWriter,
}

impl Ctx<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.g.out_dir.join(name)
    }

    fn note(&self, msg: impl AsRef<str>) {
        eprintln!("sbgc: {}", msg.as_ref());
    }

    fn wrote(&self, p: &Path) {
        self.note(format!("wrote {}", p.display()));
    }

    fn load_data(&self, path: Option<&Path>, default: &str, limit: Option<usize>) -> Result<Dataset> {
        let p = path.map_or_else(|| self.out(default), Path::to_path_buf);
        let d = Dataset::load(&p).with_context(|| format!("loading dataset {}", p.display()))?;
        Ok(match limit {
            Some(n) => d.head(n),
            None => d,
        })
    }

    fn eval_data(&self, e: &EvalArgs, default_limit: usize) -> Result<Dataset> {
        self.load_data(e.data.as_deref(), TEST_FILE, Some(e.limit.unwrap_or(default_limit)))
    }

    fn load_model(&self, e: &EvalArgs, data: &Dataset) -> Result<Box<dyn ScoreModel>> {
        let spec = e.model.clone().unwrap_or_else(|| self.out(MODEL_FILE).display().to_string());
        let model: Box<dyn ScoreModel> = if spec == "analytic" {
            if data.levels.is_some() {
                bail!("the analytic model covers the mixture datasets only");
            }
            Box::new(self.analytic()?)
        } else {
            let net = load_checkpoint(&spec).with_context(|| format!("loading model {spec}"))?;
            if net.sde_spec().kind != self.config.sde.kind {
                self.note(format!(
                    "model was trained with the {:?} SDE; using that instead of {:?}",
                    net.sde_spec().kind,
                    self.config.sde.kind
                ));
            }
            Box::new(net)
        };
        if model.dim() != data.dim() || model.num_classes() < data.num_classes {
            bail!(
                "model (D={}, K={}) does not fit the data (D={}, K={})",
                model.dim(),
                model.num_classes(),
                data.dim(),
                data.num_classes
            );
        }
        Ok(model)
    }

    fn analytic(&self) -> Result<AnalyticGmmScore> {
        Ok(self.config.data.gmm.analytic_model(self.config.sde)?)
    }

    /// Closed-form Bayes accuracy when the data come from the configured mixture.
    fn bayes_accuracy(&self, data: &Dataset) -> Option<f64> {
        let gmm = &self.config.data.gmm;
        if data.levels.is_some() || data.dim() != gmm.dim() || data.num_classes != gmm.num_classes() || data.is_empty()
        {
            return None;
        }
        let hits = (0..data.len())
            .filter(|&i| gmm.bayes_predict(&data.row(i)).ok() == Some(data.labels[i]))
            .count();
        Some(hits as f64 / data.len() as f64)
    }

    fn summary<T: Serialize>(&self, name: &str, v: &T) -> Result<()> {
        let p = self.w.write_json(&format!("{name}_summary.json"), v)?;
        self.wrote(&p);
        Ok(())
    }

    fn gen_data(&self) -> Result<()> {
        let c = &self.config;
        let (tr, te) = (derive_seed(c.seed, "data-train", &[]), derive_seed(c.seed, "data-test", &[]));
        let (train, test) = match c.data.kind {
            DataKind::Gmm => (
                gen_gmm_dataset(&c.data.gmm, c.data.n_train_per_class, tr)?,
                gen_gmm_dataset(&c.data.gmm, c.data.n_test_per_class, te)?,
            ),
            DataKind::ToyImage => (
                gen_toyimage_dataset(&c.data.toy_image, c.data.n_train_per_class, tr)?,
                gen_toyimage_dataset(&c.data.toy_image, c.data.n_test_per_class, te)?,
            ),
        };
        for (d, name) in [(&train, TRAIN_FILE), (&test, TEST_FILE)] {
            d.save(self.out(name))?;
            self.wrote(&self.out(name));
        }
        self.summary(
            "data",
            &json!({
                "kind": c.data.kind,
                "dim": train.dim(),
                "num_classes": train.num_classes,
                "n_train": train.len(),
                "n_test": test.len(),
                "levels": train.levels,
                "domain": train.domain,
                "bayes_accuracy_test": self.bayes_accuracy(&test),
            }),
        )
    }

    fn train(&self, data: Option<&Path>) -> Result<()> {
        let c = &self.config;
        let d = self.load_data(data, TRAIN_FILE, None)?;
        let mut arch = MlpArch::new(d.dim(), d.num_classes, c.model.hidden.clone());
        arch.activation = c.model.activation;
        arch.time_embed_dim = c.model.time_embed_dim;
        let net = MlpScoreNet::new(arch, c.sde, derive_seed(c.seed, "init", &[]))?;
        self.note(format!(
            "training {} parameters for {} steps on {} samples",
            net.num_params(),
            c.train.steps,
            d.len()
        ));
        let out = train(net, &d, &c.train)?;
        save_checkpoint(self.out(MODEL_FILE), &out.ema)?;
        self.wrote(&self.out(MODEL_FILE));
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &out.trace)?;
        self.wrote(&self.w.write_csv("loss.csv", &String::from_utf8(buf)?)?);
        let last = out.trace.last();
        self.summary(
            "train",
            &json!({
                "steps": c.train.steps,
                "num_params": out.ema.num_params(),
                "final_loss": last.map(|r| r.loss),
                "final_ema_loss": last.map(|r| r.ema_loss),
            }),
        )
    }

    fn likelihood(&self, e: &EvalArgs, class: Option<&str>) -> Result<()> {
        let c = &self.config;
        let data = self.eval_data(e, c.experiments.eval_samples)?;
        let model = self.load_model(e, &data)?;
        let classes: Vec<Option<usize>> = match class {
            None => (0..model.num_classes()).map(Some).collect(),
            Some("none") => vec![None],
            Some(s) => vec![Some(s.parse().context("--class takes a class index or `none`")?)],
        };
        let all_classes = classes.len() == model.num_classes() && classes.iter().all(Option::is_some);
        let per_sample: Vec<Vec<LikelihoodRecord>> = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let x = data.model_input(i, c.seed)?;
                let tcfg = c.trace.with_seed(sample_probe_seed(c.seed, i));
                classes
                    .iter()
                    .map(|&y| {
                        let out = log_likelihood(&*model, &x, &c.solver, &tcfg, y).map_err(|e| e.in_solve(i, y))?;
                        Ok(LikelihoodRecord::new(i, Some(data.labels[i]), y, &out, &tcfg, data.dim()))
                    })
                    .collect::<sbgc::Result<Vec<_>>>()
            })
            .collect::<sbgc::Result<_>>()?;
        let records: Vec<&LikelihoodRecord> = per_sample.iter().flatten().collect();
        self.wrote(&self.w.write_ndjson("likelihood.ndjson", &records)?);
        // density of each sample: marginal over classes, or the single requested solve
        let densities: Vec<f64> = per_sample
            .iter()
            .map(|rs| {
                let l: Vec<f64> = rs.iter().map(|r| r.logp).collect();
                if all_classes {
                    marginal_from_logps(&l, None)
                } else {
                    Ok(l[0])
                }
            })
            .collect::<sbgc::Result<_>>()?;
        let n = densities.len().max(1) as f64;
        let mean_logp = densities.iter().sum::<f64>() / n;
        let mut summary = json!({
            "n": densities.len(),
            "classes": classes,
            "density": if all_classes { "marginal" } else { "single" },
            "mean_logp": mean_logp,
            "mean_nfe": records.iter().map(|r| r.nfe as f64).sum::<f64>() / records.len().max(1) as f64,
        });
        if let Some(levels) = data.levels {
            let bpd = densities
                .iter()
                .map(|&l| bits_per_dim(l, data.dim(), levels))
                .collect::<sbgc::Result<Vec<_>>>()?;
            summary["mean_bits_per_dim"] = json!(bpd.iter().sum::<f64>() / n);
            summary["uniform_bits_per_dim"] = json!(bits_per_dim(0.0, data.dim(), levels)?);
        }
        self.summary("likelihood", &summary)
    }

    fn classify(&self, e: &EvalArgs) -> Result<()> {
        let c = &self.config;
        let data = self.eval_data(e, c.experiments.eval_samples)?;
        let model = self.load_model(e, &data)?;
        let rep = evaluate_accuracy(&*model, &data, &c.solver, &c.trace)?;
        self.wrote(&self.w.write_ndjson("classify.ndjson", &rep.records)?);
        self.note(format!("accuracy {:.4} on {} samples", rep.accuracy, rep.n));
        self.summary(
            "classify",
            &json!({
                "accuracy": rep.accuracy,
                "mean_margin": rep.mean_margin,
                "mean_nfe": rep.mean_nfe,
                "n": rep.n,
                "n_failed": rep.n_failed,
                "bayes_accuracy": self.bayes_accuracy(&data),
            }),
        )
    }

    fn attack(&self, e: &EvalArgs, norm: NormArg) -> Result<()> {
        let c = &self.config;
        let data = self.eval_data(e, c.attack.n_samples)?;
        let model = self.load_model(e, &data)?;
        let norms = match norm {
            NormArg::Linf => vec![Norm::Linf],
            NormArg::L2 => vec![Norm::L2],
            NormArg::Both => c.attack.norms.clone(),
        };
        let (lo, hi) = data.model_domain();
        let mut tcfg = c.trace.clone();
        tcfg.n_probes = c.attack.n_probes;
        let mut summaries = Vec::new();
        for n in norms {
            let acfg = c.attack.attack_cfg(n, hi - lo, derive_seed(c.seed, "attack", &[]));
            let name = match n {
                Norm::Linf => "linf",
                Norm::L2 => "l2",
            };
            let recs = attack_dataset(&*model, &data, &acfg, &c.solver, &tcfg)?;
            self.wrote(&self.w.write_ndjson(&format!("attack_{name}.ndjson"), &recs)?);
            let s = summarize_attacks(&recs, &acfg);
            self.note(format!(
                "{name}: clean {:.4}, adversarial {:.4} (eps {})",
                s.clean_accuracy, s.adversarial_accuracy, s.eps
            ));
            if !s.all_within_budget {
                bail!("an adversarial input left its budget ball");
            }
            summaries.push(s);
        }
        self.summary("attack", &summaries)
    }

    fn corrupt_eval(&self, e: &EvalArgs) -> Result<()> {
        let c = &self.config;
        let data = self.eval_data(e, c.corruption.n_samples)?;
        let model = self.load_model(e, &data)?;
        let mut grid = c.corruption.grid.clone();
        if data.sample_shape.len() != 2 {
            self.note("vector data: skipping the spatial corruptions");
            grid = grid.pointwise();
        }
        let clean = evaluate_accuracy(&*model, &data, &c.solver, &c.trace)?.accuracy;
        let m = corruption_eval(&*model, &data, &grid, derive_seed(c.seed, "corruption", &[]), &c.solver, &c.trace)?;
        self.wrote(&self.w.write_csv("corruption.csv", &m.to_csv())?);
        self.summary(
            "corruption",
            &json!({
                "clean_accuracy": clean,
                "mean_all": finite_or_null(m.mean_all),
                "mean_without_noise": finite_or_null(m.mean_without_noise),
                "kinds": grid.kinds,
                "severities": grid.severities,
                "tables": m.tables,
            }),
        )
    }

    fn interpolate(&self, e: &EvalArgs) -> Result<()> {
        let c = &self.config;
        let data = self.load_data(e.data.as_deref(), TEST_FILE, e.limit)?;
        let model = self.load_model(e, &data)?;
        let grid = interp_grid(c.experiments.interp_points)?;
        let res = interpolate_dataset(&*model, &data, c.experiments.interp_pairs, &grid, &c.solver, &c.trace)?;
        self.wrote(&self.w.write_csv("interp_curve.csv", &res.curve.to_csv())?);
        self.wrote(&self.w.write_ndjson("interp_pairs.ndjson", &res.pairs)?);
        let convexity = if res.curve.n_pairs > 0 {
            Some(res.curve.convexity()?)
        } else {
            None
        };
        self.summary(
            "interp",
            &json!({
                "n_pairs": res.curve.n_pairs,
                "n_failed": res.pairs.len() - res.curve.n_pairs,
                "grid_points": grid.len(),
                "convexity": convexity,
            }),
        )
    }

    fn trace_convergence(&self, e: &EvalArgs) -> Result<()> {
        let c = &self.config;
        let data = self.eval_data(e, c.experiments.trace_samples)?;
        let model = self.load_model(e, &data)?;
        let rows = trace_convergence_experiment(&*model, &data, &c.experiments.probe_grid, &c.solver, c.seed)?;
        self.wrote(&self.w.write_csv("trace_convergence.csv", &trace_rows_csv(&rows))?);
        self.summary("trace_convergence", &rows)
    }

    fn report(&self) -> Result<()> {
        let mut names: Vec<PathBuf> = std::fs::read_dir(&self.g.out_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_summary.json")))
            .collect();
        names.sort();
        let mut sections = Map::new();
        for p in names {
            let v: Value = serde_json::from_str(&std::fs::read_to_string(&p)?)
                .with_context(|| format!("parsing {}", p.display()))?;
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().trim_end_matches("_summary.json");
            if v["config_hash"] != self.w.config_hash() {
                self.note(format!("{name}: produced under a different config ({})", v["config_hash"]));
            }
            sections.insert(
                name.to_string(),
                json!({ "config_hash": v["config_hash"], "results": v["results"] }),
            );
        }
        let p = self.w.write_json("report.json", &Value::Object(sections))?;
        self.wrote(&p);
        Ok(())
    }
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}
