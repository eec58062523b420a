use std::path::{Path, PathBuf};

use crate::analysis::{
    correlation_study, effective_distance_study, generated_latent_usage, kendall_structure_study,
    latent_usage_distribution, pearson, posterior_latent_usage, rank_reversal_rate, reversal_bound_audit,
    sample_pairs_by_distance, transitivity_audit, PairSample, ProbMatrix, SimilarityMatrix, StudyReport,
};
use crate::catalog::{load_features, load_interactions, Catalog};
use crate::error::{Error, Result};
use crate::eval::{evaluate, leave_one_out, DecoderConfig, ModelRanker, Split, METRICS_CSV_HEADER};
use crate::model::{ScorerParams, Token};
use crate::pipeline::{build_forest, fit_model, sample_users, tokenize, user_histories, ModelSpec};
use crate::synth::{
    benchmark_spec, generate_world, make_intransitive_world, make_modality_world, make_reversal_pair_world,
    GroundTruth, Placement, World,
};
use crate::trie::{DecodingTrie, TrieForest, EXHAUSTIVE_AUDIT_LIMIT};

use super::config::{RunConfig, WorldKind};
use super::manifest::Manifest;

pub const STUDIES: &[&str] = &[
    "correlation",
    "kendall",
    "reversal",
    "reversal_audit",
    "transitivity",
    "latent_usage",
    "effective_distance",
    "census",
    "ultrametric",
];

const ULTRAMETRIC_TRIPLE_BUDGET: usize = 1_000_000;

pub(super) fn dispatch(name: &str, cfg: &RunConfig) -> Result<()> {
    match name {
        "synth" => synth(cfg),
        "tokenize" => tokenize_cmd(cfg),
        "train" => train(cfg),
        "eval" => eval(cfg),
        "analyze" => analyze(cfg),
        "report" => report(cfg),
        "all" => all(cfg),
        other => Err(Error::Config {
            key: "subcommand".into(),
            reason: format!("unknown subcommand {other}"),
        }),
    }
}

fn io_write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn record(cfg: &RunConfig, step: &str, inputs: &[PathBuf], artifacts: &[PathBuf]) -> Result<()> {
    let dir = cfg.run_dir();
    let mut m = Manifest::load_or_new(&dir, &cfg.run_id())?;
    m.record(&dir, step, cfg.resolved(), inputs, artifacts)?;
    m.save(&dir)?;
    for a in artifacts {
        println!("wrote {}", a.display());
    }
    Ok(())
}

fn build_world(cfg: &RunConfig, seed: u64) -> Result<World> {
    match cfg.world {
        WorldKind::Benchmark => generate_world(benchmark_spec(seed)),
        WorldKind::Reversal => Ok(make_reversal_pair_world(seed)?.0),
        WorldKind::Intransitive => Ok(make_intransitive_world(seed)?.0),
        WorldKind::Modality => {
            let w = cfg.predictiveness()?;
            if w.len() != cfg.m {
                return Err(Error::Config {
                    key: "predictiveness".into(),
                    reason: format!("{} weights given but m = {}", w.len(), cfg.m),
                });
            }
            make_modality_world(seed, cfg.m, &w)
        }
    }
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let world = build_world(cfg, seed)?;
    let dir = cfg.run_dir().join("world");
    world.write(&dir)?;
    let files = ["features.jsonl", "interactions.jsonl", "ground_truth.json", "placement.json"];
    record(cfg, "synth", &[], &files.map(|f| dir.join(f)))
}

fn tokenize_cmd(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let fpath = cfg.features_path();
    let features = load_features(&fpath)?;
    let ppath = cfg.placement_path();
    let (placement, mut inputs) = if ppath.exists() {
        (Placement::load(&ppath)?, vec![fpath.clone(), ppath])
    } else {
        (Placement::default(), vec![fpath.clone()])
    };
    let catalog = tokenize(&features, &placement, cfg.m, cfg.vocab, cfg.kmeans_iters, seed)?;
    let out = cfg.catalog_path();
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    catalog.save(&out)?;
    inputs.dedup();
    record(cfg, "tokenize", &inputs, &[out])
}

struct Data {
    catalog: Catalog,
    split: Split,
    inputs: Vec<PathBuf>,
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    let cpath = cfg.catalog_path();
    let catalog = Catalog::load(&cpath)?;
    if catalog.m != cfg.m || catalog.vocab != cfg.vocab {
        return Err(Error::Config {
            key: "m".into(),
            reason: format!(
                "catalog has m = {}, M = {} but the config says m = {}, M = {}",
                catalog.m, catalog.vocab, cfg.m, cfg.vocab
            ),
        });
    }
    let ipath = cfg.interactions_path();
    let dataset = load_interactions(&ipath, |id| catalog.index_of(id).is_some())?;
    let split = leave_one_out(&dataset, &catalog)?;
    Ok(Data {
        catalog,
        split,
        inputs: vec![cpath, ipath],
    })
}

fn train(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let spec = ModelSpec {
        scorer: cfg.scorer()?,
        bind: cfg.bind,
        train: cfg.train_config()?,
    };
    let fitted = fit_model(&data.catalog, &data.split, &spec)?;
    let ppath = cfg.params_path();
    if let Some(dir) = ppath.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fitted.params.save(&ppath)?;
    let curve = cfg.run_dir().join("loss_curve.csv");
    io_write(&curve, &fitted.outcome.curve_csv())?;
    println!(
        "best epoch {} of {}",
        fitted.outcome.best_epoch,
        fitted.outcome.curve.len()
    );
    record(cfg, "train", &data.inputs, &[ppath, curve])
}

struct Model {
    params: ScorerParams,
    forest: TrieForest,
}

fn load_model(cfg: &RunConfig, data: &mut Data) -> Result<Model> {
    let ppath = cfg.params_path();
    let params = ScorerParams::load(&ppath)?;
    let pc = params.config();
    if pc.m != data.catalog.m || pc.vocab != data.catalog.vocab {
        return Err(Error::Config {
            key: "params".into(),
            reason: "parameters were trained for a different SID shape".into(),
        });
    }
    let forest = build_forest(&data.catalog, pc.latent, cfg.bind)?;
    data.inputs.push(ppath);
    Ok(Model { params, forest })
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let mut data = load_data(cfg)?;
    let model = load_model(cfg, &mut data)?;
    let ranker = ModelRanker {
        params: &model.params,
        forest: &model.forest,
        catalog: &data.catalog,
        decoder: DecoderConfig {
            beam_size: cfg.beam_size,
            agg: cfg.agg,
            exhaustive: cfg.exhaustive,
        },
    };
    let tag = cfg.model_tag();
    let report = evaluate(&ranker, &data.split, &cfg.ks()?, &tag, seed)?;
    let out = cfg.run_dir().join("metrics.csv");
    io_write(&out, &format!("{METRICS_CSV_HEADER}{}", report.csv_rows()))?;
    print!("{}", report.csv_rows());
    record(cfg, "eval", &data.inputs, &[out])
}

fn study_names(cfg: &RunConfig) -> Result<Vec<String>> {
    let valid = STUDIES.join(", ");
    let Some(text) = &cfg.study else {
        return Err(Error::Config {
            key: "study".into(),
            reason: format!("no study named; valid studies: {valid}"),
        });
    };
    let names: Vec<String> = text.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(Error::Config {
            key: "study".into(),
            reason: format!("no study named; valid studies: {valid}"),
        });
    }
    if let Some(bad) = names.iter().find(|n| !STUDIES.contains(&n.as_str())) {
        return Err(Error::Config {
            key: "study".into(),
            reason: format!("unknown study {bad:?}; valid studies: {valid}"),
        });
    }
    Ok(names)
}

/// Lazily built inputs shared by the studies of one analyze call.
struct StudyContext<'a> {
    cfg: &'a RunConfig,
    seed: u64,
    data: Data,
    model: Option<Model>,
    users: Vec<usize>,
    histories: Vec<Vec<Token>>,
    probs: Option<ProbMatrix>,
    pairs: Option<PairSample>,
    trie: DecodingTrie,
}

impl<'a> StudyContext<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self> {
        let seed = cfg.seed()?;
        let data = load_data(cfg)?;
        let users = sample_users(&data.split, cfg.users, seed);
        let histories = user_histories(&data.catalog, &data.split, &users);
        let trie = DecodingTrie::from_catalog(&data.catalog)?;
        Ok(StudyContext {
            cfg,
            seed,
            data,
            model: None,
            users,
            histories,
            probs: None,
            pairs: None,
            trie,
        })
    }

    fn ensure_model(&mut self) -> Result<()> {
        if self.model.is_none() {
            self.model = Some(load_model(self.cfg, &mut self.data)?);
        }
        Ok(())
    }

    fn ensure_probs(&mut self) -> Result<()> {
        self.ensure_model()?;
        if self.probs.is_none() {
            let m = self.model.as_ref().expect("loaded");
            self.probs = Some(ProbMatrix::from_model(&m.params, &m.forest, &self.histories, self.cfg.agg)?);
        }
        Ok(())
    }

    fn ensure_pairs(&mut self) -> Result<()> {
        if self.pairs.is_none() {
            self.pairs = Some(sample_pairs_by_distance(&self.trie, &self.cfg.distances()?, self.cfg.pairs, self.seed));
        }
        Ok(())
    }

    fn item_indices(&self, need: usize) -> Result<Vec<usize>> {
        let ids = self.cfg.items().ok_or_else(|| Error::Config {
            key: "items".into(),
            reason: format!("this study needs at least {need} item ids"),
        })?;
        if ids.len() < need {
            return Err(Error::Config {
                key: "items".into(),
                reason: format!("this study needs at least {need} item ids, got {}", ids.len()),
            });
        }
        ids.iter()
            .map(|id| {
                self.data.catalog.index_of(id).ok_or_else(|| Error::Config {
                    key: "items".into(),
                    reason: format!("unknown item {id}"),
                })
            })
            .collect()
    }

    fn ground_truth(&self) -> Result<Option<GroundTruth>> {
        let p = self.cfg.run_dir().join("world/ground_truth.json");
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    fn run(&mut self, name: &str) -> Result<StudyReport> {
        let seed = self.seed;
        let source = self.cfg.prob_source;
        let mut report = match name {
            "correlation" | "kendall" | "reversal_audit" => {
                self.ensure_pairs()?;
                self.ensure_probs()?;
                let (probs, pairs) = (self.probs.as_ref().expect("built"), self.pairs.as_ref().expect("sampled"));
                match name {
                    "correlation" => correlation_study(probs, pairs, source, seed),
                    "kendall" => kendall_structure_study(probs, pairs, source, seed)?,
                    _ => {
                        let list: Vec<(usize, usize)> =
                            pairs.all_pairs().filter(|p| p.2 > 0).map(|p| (p.0, p.1)).collect();
                        reversal_bound_audit(probs, &list, seed)?
                    }
                }
            }
            "reversal" => self.reversal()?,
            "transitivity" => {
                let items = match self.cfg.items {
                    Some(_) => Some(self.item_indices(3)?),
                    None => None,
                };
                self.ensure_probs()?;
                let sim = SimilarityMatrix::from_probs(self.probs.as_ref().expect("built"), source);
                transitivity_audit(&sim, &self.trie, self.cfg.tau, self.cfg.delta, items.as_deref(), seed)
            }
            "latent_usage" => self.latent_usage()?,
            "effective_distance" => {
                self.ensure_pairs()?;
                self.ensure_model()?;
                let m = self.model.as_ref().expect("loaded");
                effective_distance_study(&m.params, &m.forest, self.pairs.as_ref().expect("sampled"), &self.histories, seed)?
            }
            "census" => self.census()?,
            "ultrametric" => self.ultrametric(),
            other => {
                return Err(Error::Config {
                    key: "study".into(),
                    reason: format!("unknown study {other:?}; valid studies: {}", STUDIES.join(", ")),
                })
            }
        };
        if report.study != name {
            report.config.insert("report".into(), serde_json::Value::String(report.study.clone()));
            report.study = name.to_string();
        }
        let tag = self.cfg.model_tag();
        Ok(report.config("model_tag", tag))
    }

    fn reversal(&mut self) -> Result<StudyReport> {
        let items = self.item_indices(2)?;
        let truth = self
            .ground_truth()?
            .map(|gt| ProbMatrix::from_rows(gt.item_rows()))
            .transpose()?;
        self.ensure_probs()?;
        let probs = self.probs.as_ref().expect("built");
        let mut report = StudyReport::new("reversal", self.seed).config("users", probs.n_users());
        report.columns = ["item_i", "item_j", "distance", "p", "rate", "greater", "less", "ties", "rho", "truth_rate"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for a in 0..items.len() {
            for b in a + 1..items.len() {
                let (i, j) = (items[a], items[b]);
                let r = rank_reversal_rate(probs, i, j)?;
                let rho = pearson(probs.row(i), probs.row(j)).map_or(f64::NAN, |x| x);
                let t = match &truth {
                    Some(t) => rank_reversal_rate(t, i, j)?.rate,
                    None => f64::NAN,
                };
                let d = self.trie.tree_distance(i, j)?;
                let (ii, jj) = (self.data.catalog.item_id(i), self.data.catalog.item_id(j));
                report.scalar(&format!("rate_{ii}_{jj}"), r.rate);
                if !t.is_nan() {
                    report.scalar(&format!("truth_rate_{ii}_{jj}"), t);
                }
                report.rows.push(vec![
                    ii.to_string(),
                    jj.to_string(),
                    d.to_string(),
                    r.p.to_string(),
                    r.rate.to_string(),
                    r.greater.to_string(),
                    r.less.to_string(),
                    r.ties.to_string(),
                    rho.to_string(),
                    t.to_string(),
                ]);
            }
        }
        Ok(report)
    }

    fn latent_usage(&mut self) -> Result<StudyReport> {
        let top_k = self.cfg.top_k;
        let targets: Vec<usize> = self.users.iter().map(|&u| self.data.split.users[u].test).collect();
        self.ensure_model()?;
        let m = self.model.as_ref().expect("loaded");
        let latent = m.params.config().latent;
        if latent == 0 {
            return Err(Error::Config {
                key: "latent".into(),
                reason: "latent_usage needs a model with latent tokens".into(),
            });
        }
        let mean = latent_usage_distribution(&m.params, &self.histories)?;
        let generated = generated_latent_usage(&m.params, &m.forest, &self.histories, top_k)?;
        let posterior = posterior_latent_usage(&m.params, &m.forest, &self.histories, &targets)?;
        let mut report = StudyReport::new("latent_usage", self.seed)
            .config("users", self.histories.len())
            .config("top_k", top_k);
        report.columns = ["latent", "permutation", "mean_prob", "generated_share", "posterior_share"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let argmax = |v: &[f64]| (0..v.len()).fold(0, |b, l| if v[l] > v[b] { l } else { b });
        for l in 0..latent {
            let perm = m.forest.permutation(Some(l as u32));
            let order: Vec<String> = perm.order().iter().map(usize::to_string).collect();
            report.rows.push(vec![
                l.to_string(),
                order.join("-"),
                mean[l].to_string(),
                generated[l].to_string(),
                posterior[l].to_string(),
            ]);
        }
        let uniform = 1.0 / latent as f64;
        report.scalar("max_abs_dev_from_uniform", mean.iter().map(|p| (p - uniform).abs()).fold(0.0, f64::max));
        report.scalar("top_latent", argmax(&mean) as f64);
        report.scalar("top_generated", argmax(&generated) as f64);
        report.scalar("top_posterior", argmax(&posterior) as f64);
        Ok(report)
    }

    fn census(&self) -> Result<StudyReport> {
        let targets: Vec<usize> = self.users.iter().map(|&u| self.data.split.users[u].test).collect();
        let census = self.trie.distance_census(&targets)?;
        let mut report = StudyReport::new("census", self.seed).config("targets", targets.len());
        let csv = census.to_csv(&self.data.catalog);
        let mut lines = csv.lines();
        report.columns = lines.next().unwrap_or_default().split(',').map(str::to_string).collect();
        report.rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        report.scalar("fraction_with_sibling", census.fraction_with_sibling());
        for k in 1..=census.m {
            report.scalar(&format!("mean_count_{}", 2 * k), census.mean_count(2 * k));
        }
        Ok(report)
    }

    fn ultrametric(&self) -> StudyReport {
        let audit = self.trie.ultrametric_audit(ULTRAMETRIC_TRIPLE_BUDGET, self.seed);
        let n = self.trie.len();
        let mut mismatches = 0usize;
        let mut checked = 0usize;
        if n <= EXHAUSTIVE_AUDIT_LIMIT {
            for i in 0..n {
                for j in 0..n {
                    checked += 1;
                    let a = self.trie.tree_distance(i, j).expect("in range");
                    let b = self.trie.path_edges(i, j).expect("in range");
                    mismatches += usize::from(a != b);
                }
            }
        }
        let mut report = StudyReport::new("ultrametric", self.seed).config("items", n);
        report.scalar("triples", audit.triples as f64);
        report.scalar("violations", audit.violations as f64);
        report.scalar("exhaustive", f64::from(u8::from(audit.exhaustive)));
        report.scalar("distance_pairs_checked", checked as f64);
        report.scalar("distance_mismatches", mismatches as f64);
        report
    }
}

fn analyze(cfg: &RunConfig) -> Result<()> {
    let names = study_names(cfg)?;
    let mut ctx = StudyContext::new(cfg)?;
    let dir = cfg.run_dir().join("studies");
    let mut written = Vec::new();
    for name in &names {
        let report = ctx.run(name)?;
        let (csv, json) = report.write(&dir)?;
        for (k, v) in &report.scalars {
            println!("{name}.{k} = {v}");
        }
        written.push(csv);
        written.push(json);
    }
    let inputs = ctx.data.inputs.clone();
    record(cfg, "analyze", &inputs, &written)
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn report(cfg: &RunConfig) -> Result<()> {
    let runs: Vec<String> = match &cfg.compare {
        Some(t) => t.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => vec![cfg.run_id()],
    };
    let out_dir = cfg.run_dir().join("report");
    let mut comparison = String::from("run_id,model_tag,seed,K,recall,ndcg,n_users\n");
    let mut scalars = String::from("run_id,study,key,value\n");
    let mut inputs = Vec::new();
    let mut written = Vec::new();
    for run in &runs {
        let rdir = cfg.out.join(run);
        if !rdir.exists() {
            return Err(Error::Config {
                key: "compare".into(),
                reason: format!("no run directory {}", rdir.display()),
            });
        }
        let metrics = rdir.join("metrics.csv");
        if metrics.exists() {
            let text = std::fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?;
            for line in text.lines().skip(1) {
                comparison.push_str(&format!("{run},{line}\n"));
            }
            inputs.push(metrics);
        }
        let sdir = rdir.join("studies");
        for json in sorted_files(&sdir, "json")? {
            let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
            let rep: StudyReport = serde_json::from_str(&text)?;
            for (k, v) in &rep.scalars {
                scalars.push_str(&format!("{run},{},{k},{v}\n", rep.study));
            }
            inputs.push(json);
        }
        for csv in sorted_files(&sdir, "csv")? {
            let dest = out_dir.join(run).join(csv.file_name().expect("file"));
            let text = std::fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
            io_write(&dest, &text)?;
            inputs.push(csv);
            written.push(dest);
        }
    }
    let cpath = out_dir.join("comparison.csv");
    io_write(&cpath, &comparison)?;
    let spath = out_dir.join("study_scalars.csv");
    io_write(&spath, &scalars)?;
    print!("{comparison}");
    written.insert(0, spath);
    written.insert(0, cpath);
    record(cfg, "report", &inputs, &written)
}

/// Studies run by `all` when none are named.
fn default_studies(cfg: &RunConfig) -> String {
    let mut s = vec!["correlation", "kendall", "transitivity", "census", "ultrametric"];
    if cfg.latent > 0 {
        s.extend(["latent_usage", "effective_distance"]);
    }
    if cfg.items().is_some_and(|i| i.len() >= 2) {
        s.push("reversal");
    }
    s.join(",")
}

fn all(cfg: &RunConfig) -> Result<()> {
    cfg.seed()?;
    synth(cfg)?;
    tokenize_cmd(cfg)?;
    train(cfg)?;
    eval(cfg)?;
    let mut c = cfg.clone();
    if c.study.is_none() {
        c.study = Some(default_studies(cfg));
    }
    analyze(&c)?;
    report(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Wrap {
        #[command(flatten)]
        cfg: RunConfig,
    }

    fn cfg(args: &[&str]) -> RunConfig {
        Wrap::try_parse_from(std::iter::once("x").chain(args.iter().copied())).unwrap().cfg
    }

    #[test]
    fn unknown_study_lists_valid_ones() {
        let c = cfg(&["--study", "correlation,bogus"]);
        let msg = study_names(&c).unwrap_err().to_string();
        assert!(msg.contains("bogus") && msg.contains("study"));
        for s in STUDIES {
            assert!(msg.contains(s), "{msg}");
        }
        assert!(study_names(&cfg(&[])).is_err());
        assert_eq!(study_names(&cfg(&["--study", "census, ultrametric"])).unwrap(), ["census", "ultrametric"]);
    }

    #[test]
    fn default_study_selection() {
        assert_eq!(default_studies(&cfg(&[])), "correlation,kendall,transitivity,census,ultrametric");
        let s = default_studies(&cfg(&["--latent", "4", "--world", "reversal"]));
        assert!(s.ends_with("latent_usage,effective_distance,reversal"), "{s}");
    }

    #[test]
    fn stochastic_commands_require_a_seed() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        for cmd in ["synth", "tokenize", "train", "eval", "analyze", "all"] {
            let c = cfg(&["--out", out, "--study", "census"]);
            let err = dispatch(cmd, &c).unwrap_err().to_string();
            assert!(err.contains("seed") || err.contains("catalog.json"), "{cmd}: {err}");
        }
    }

    #[test]
    fn modality_weights_must_match_m() {
        let c = cfg(&["--seed", "0", "--world", "modality", "--predictiveness", "1,1"]);
        let err = build_world(&c, 0).unwrap_err().to_string();
        assert!(err.contains("predictiveness"), "{err}");
    }
}
