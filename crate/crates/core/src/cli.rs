//! Reproducible runs: config parsing and the `gen`, `train`, `eval` and
//! `score` commands behind the `lir` binary.
//!
//! Every command writes into per-seed directories `seed_<n>/` under the
//! output directory, plus a `manifest.json` at the top.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{self, extract_energies, gen_task, SyntheticTask, TaskSpec};
use crate::detectors::{self, BhlResult, Detector, Orientation, VaeConfig, Verdict};
use crate::metrics::{self, ReportRow};
use crate::training::{self, LayerSet, Margins, REboConfig, Schedule, TrainLog, TrainSpec};
use crate::Net;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DetectorChoice {
    Ebo,
    Msp,
    Layers,
    Bhl,
    Md,
    Knn,
    Vae,
}

impl DetectorChoice {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ebo" => DetectorChoice::Ebo,
            "msp" => DetectorChoice::Msp,
            "layers" => DetectorChoice::Layers,
            "bhl" => DetectorChoice::Bhl,
            "md" => DetectorChoice::Md,
            "knn" => DetectorChoice::Knn,
            "vae" => DetectorChoice::Vae,
            other => bail!("unknown detector {other:?} (expected ebo, msp, layers, bhl, md, knn, vae)"),
        })
    }
}

/// Parsed `key = value` run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskSpec,
    /// Training spec; the schedule seed is replaced per run seed.
    pub train: TrainSpec,
    pub detectors: Vec<DetectorChoice>,
    /// `None` selects the default neighbour count.
    pub knn_k: Option<usize>,
    pub vae: VaeConfig,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub include_logits: bool,
    /// SHA-256 of the config text.
    pub hash: String,
}

const KEYS: &[&str] = &[
    "task.dim",
    "task.classes",
    "task.radius",
    "task.n_train",
    "task.n_eval",
    "task.n_seen_ood",
    "train.mode",
    "train.hidden",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.momentum",
    "rebo.lambda",
    "rebo.margins",
    "rebo.m_in",
    "rebo.m_out",
    "rebo.layers",
    "detectors",
    "knn.k",
    "vae.hidden",
    "vae.latent",
    "vae.kl_weight",
    "vae.epochs",
    "vae.batch_size",
    "vae.lr",
    "seeds",
    "out",
    "include_logits",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}"))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

impl RunConfig {
    /// Parse config text. Relative `out` paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                bail!("line {}: unknown key {k:?}", i + 1);
            }
            if kv.insert(k.to_string(), v.to_string()).is_some() {
                bail!("line {}: duplicate key {k:?}", i + 1);
            }
        }
        let get = |k: &str| kv.get(k).map(String::as_str);

        let mut task = TaskSpec::default();
        if let Some(v) = get("task.dim") {
            task.dim = parse_num("task.dim", v)?;
        }
        if let Some(v) = get("task.classes") {
            task.classes = parse_num("task.classes", v)?;
        }
        if let Some(v) = get("task.radius") {
            task.radius = parse_num("task.radius", v)?;
        }
        if let Some(v) = get("task.n_train") {
            task.n_train = parse_num("task.n_train", v)?;
        }
        if let Some(v) = get("task.n_eval") {
            task.n_eval = parse_num("task.n_eval", v)?;
        }
        if let Some(v) = get("task.n_seen_ood") {
            task.n_seen_ood = parse_num("task.n_seen_ood", v)?;
        }

        let mut sched = Schedule::default();
        if let Some(v) = get("train.hidden") {
            sched.hidden = parse_list("train.hidden", v)?;
        }
        if let Some(v) = get("train.epochs") {
            sched.epochs = parse_num("train.epochs", v)?;
        }
        if let Some(v) = get("train.batch_size") {
            sched.batch_size = parse_num("train.batch_size", v)?;
        }
        if let Some(v) = get("train.lr") {
            sched.lr = parse_num("train.lr", v)?;
        }
        if let Some(v) = get("train.momentum") {
            sched.momentum = parse_num("train.momentum", v)?;
        }
        let train = match get("train.mode").unwrap_or("ce") {
            "ce" => {
                if let Some(k) = kv.keys().find(|k| k.starts_with("rebo.")) {
                    bail!("{k} given but train.mode is ce");
                }
                TrainSpec::CrossEntropy(sched)
            }
            "rebo" => {
                let mut cfg = REboConfig::new(sched);
                if let Some(v) = get("rebo.lambda") {
                    cfg.lambda = parse_num("rebo.lambda", v)?;
                }
                let fixed = (get("rebo.m_in"), get("rebo.m_out"));
                cfg.margins = match get("rebo.margins").unwrap_or("reference") {
                    "reference" => Margins::REFERENCE,
                    "calibrated" => Margins::Calibrated,
                    "fixed" => match fixed {
                        (Some(a), Some(b)) => Margins::Fixed {
                            m_in: parse_num("rebo.m_in", a)?,
                            m_out: parse_num("rebo.m_out", b)?,
                        },
                        _ => bail!("rebo.margins = fixed needs rebo.m_in and rebo.m_out"),
                    },
                    other => bail!("rebo.margins: expected reference, calibrated or fixed, got {other:?}"),
                };
                if !matches!(cfg.margins, Margins::Fixed { .. } if get("rebo.margins") == Some("fixed"))
                    && (fixed.0.is_some() || fixed.1.is_some())
                {
                    bail!("rebo.m_in / rebo.m_out need rebo.margins = fixed");
                }
                if let Some(v) = get("rebo.layers") {
                    if v != "all" {
                        cfg.layers = Some(LayerSet::new(parse_list("rebo.layers", v)?)?);
                    }
                }
                TrainSpec::Rebo(cfg)
            }
            other => bail!("train.mode: expected ce or rebo, got {other:?}"),
        };

        let detectors = match get("detectors") {
            Some(v) => {
                let mut d = v.split(',').map(|s| DetectorChoice::parse(s.trim())).collect::<Result<Vec<_>>>()?;
                d.sort();
                d.dedup();
                d
            }
            None => vec![
                DetectorChoice::Ebo,
                DetectorChoice::Msp,
                DetectorChoice::Layers,
                DetectorChoice::Bhl,
                DetectorChoice::Md,
                DetectorChoice::Knn,
                DetectorChoice::Vae,
            ],
        };
        let knn_k = match get("knn.k") {
            None | Some("auto") => None,
            Some(v) => Some(parse_num("knn.k", v)?),
        };
        let mut vae = VaeConfig::default();
        if let Some(v) = get("vae.hidden") {
            vae.hidden = parse_num("vae.hidden", v)?;
        }
        if let Some(v) = get("vae.latent") {
            vae.latent = parse_num("vae.latent", v)?;
        }
        if let Some(v) = get("vae.kl_weight") {
            vae.kl_weight = parse_num("vae.kl_weight", v)?;
        }
        if let Some(v) = get("vae.epochs") {
            vae.epochs = parse_num("vae.epochs", v)?;
        }
        if let Some(v) = get("vae.batch_size") {
            vae.batch_size = parse_num("vae.batch_size", v)?;
        }
        if let Some(v) = get("vae.lr") {
            vae.lr = parse_num("vae.lr", v)?;
        }
        let seeds = match get("seeds") {
            Some(v) => parse_list("seeds", v)?,
            None => vec![0],
        };
        if seeds.is_empty() {
            bail!("seeds: need at least one seed");
        }
        let out = get("out").map(|p| base_dir.join(p));
        let include_logits = match get("include_logits") {
            None | Some("false") => false,
            Some("true") => true,
            Some(other) => bail!("include_logits: expected true or false, got {other:?}"),
        };
        let hash = Sha256::digest(text.as_bytes())
            .iter()
            .fold(String::new(), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            });
        Ok(RunConfig {
            task,
            train,
            detectors,
            knn_k,
            vae,
            seeds,
            out,
            include_logits,
            hash,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("config: reading {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base).with_context(|| format!("config: {}", path.display()))
    }

    /// Training spec for one seed.
    pub fn train_spec(&self, seed: u64) -> TrainSpec {
        let mut spec = self.train.clone();
        match &mut spec {
            TrainSpec::CrossEntropy(s) => s.seed = seed,
            TrainSpec::Rebo(c) => c.schedule.seed = seed,
        }
        spec
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .ok_or_else(|| anyhow!("config: no output directory (set `out` or pass --out)"))
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: &'a str,
    seeds: &'a [u64],
    formats: BTreeMap<&'static str, u16>,
    version: &'static str,
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let m = Manifest {
        command,
        config_sha256: &cfg.hash,
        seeds: &cfg.seeds,
        formats: [("LIRD", 1), ("LIRE", 1), ("LIRN", 1)].into_iter().collect(),
        version: env!("CARGO_PKG_VERSION"),
    };
    let path = out.join(format!("manifest_{command}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")
        .with_context(|| format!("manifest: writing {}", path.display()))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

/// Write the generated task of every seed as CSV files.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    for &seed in &cfg.seeds {
        let task = gen_task(&cfg.task, seed).context("gen: generating task")?;
        let dir = seed_dir(out, seed).join("task");
        create_dir(&dir)?;
        let mut files = vec![
            ("train_id.csv".to_string(), data::features_csv(&task.train_id.x, Some(&task.train_id.y))),
            ("seen_ood.csv".to_string(), data::features_csv(&task.seen_ood, None)),
            ("test_id.csv".to_string(), data::features_csv(&task.test_id.x, Some(&task.test_id.y))),
        ];
        for (name, x) in task.ood_splits() {
            files.push((format!("{name}.csv"), data::features_csv(x, None)));
        }
        for (name, body) in files {
            std::fs::write(dir.join(&name), body).with_context(|| format!("gen: writing {name}"))?;
        }
    }
    write_manifest(out, "gen", cfg)
}

/// Train one net per seed; returns the nets and logs in seed order.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Vec<(Net, TrainLog)>> {
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let task = gen_task(&cfg.task, seed).context("train: generating task")?;
        let (net, log) = training::train::<f64>(&task, &cfg.train_spec(seed))
            .with_context(|| format!("train: seed {seed}"))?;
        let dir = seed_dir(out, seed);
        create_dir(&dir)?;
        std::fs::write(dir.join("net.lirn"), net.to_bytes()).context("train: writing checkpoint")?;
        std::fs::write(dir.join("train_log.csv"), log.to_csv()).context("train: writing log")?;
        log::info!("seed {seed}: final train accuracy {:.4}", log.epochs.last().map_or(0.0, |e| e.train_acc));
        results.push((net, log));
    }
    write_manifest(out, "train", cfg)?;
    Ok(results)
}

/// Everything computed for one seed by [`cmd_eval`].
#[derive(Debug, Clone, Serialize)]
pub struct SeedEval {
    pub seed: u64,
    pub id_accuracy: f64,
    pub rows: Vec<ReportRow>,
    /// Oriented AUROC of every tap (logits last) per OoD split.
    pub profiles: Vec<(String, Vec<f64>)>,
    #[serde(skip)]
    pub bhl: Vec<(String, BhlResult)>,
}

fn layer_name(l: usize, n_layers: usize) -> String {
    if l + 1 == n_layers {
        "logits".into()
    } else {
        l.to_string()
    }
}

fn load_or_train(cfg: &RunConfig, task: &SyntheticTask, dir: &Path, seed: u64) -> Result<Net> {
    let ckpt = dir.join("net.lirn");
    if ckpt.exists() {
        let bytes = std::fs::read(&ckpt).with_context(|| format!("eval: reading {}", ckpt.display()))?;
        let net = Net::from_bytes(&bytes).with_context(|| format!("eval: loading {}", ckpt.display()))?;
        if net.input_dim() != task.spec.dim || net.output_dim() != task.spec.classes {
            bail!(
                "eval: checkpoint {} has dims {:?}, task needs {} inputs and {} classes",
                ckpt.display(),
                net.dims(),
                task.spec.dim,
                task.spec.classes
            );
        }
        return Ok(net);
    }
    let (net, log) =
        training::train::<f64>(task, &cfg.train_spec(seed)).with_context(|| format!("eval: training seed {seed}"))?;
    std::fs::write(&ckpt, net.to_bytes()).context("eval: writing checkpoint")?;
    std::fs::write(dir.join("train_log.csv"), log.to_csv()).context("eval: writing train log")?;
    Ok(net)
}

/// Evaluate one seed: energies, detectors, reports and the layer profile.
pub fn eval_seed(cfg: &RunConfig, out: &Path, seed: u64) -> Result<SeedEval> {
    let task = gen_task(&cfg.task, seed).context("eval: generating task")?;
    let dir = seed_dir(out, seed);
    create_dir(&dir)?;
    let net = load_or_train(cfg, &task, &dir, seed)?;
    let n_layers = net.tap_count();

    let energies = |x: &[Vec<f64>]| extract_energies(&net, x).context("eval: extracting energies");
    let train_e = energies(&task.train_id.x)?
        .with_class_labels(task.train_id.y.iter().map(|&c| c as i32).collect())?;
    let test_e = energies(&task.test_id.x)?;
    data::write_energy_file(&train_e, &dir.join("energies_train_id.lire"))?;
    data::write_energy_file(&test_e, &dir.join("energies_test_id.lire"))?;

    let test_logits = data::logits(&net, &task.test_id.x)?;
    let id_accuracy = metrics::accuracy(&test_logits, &task.test_id.y)?;
    let id_msp: Vec<f64> = test_logits
        .iter()
        .map(|y| Detector::msp().score_activations(y))
        .collect::<Result<_, _>>()?;

    let has = |d: DetectorChoice| cfg.detectors.contains(&d);
    let mut fitted: Vec<Detector> = Vec::new();
    if has(DetectorChoice::Md) {
        fitted.push(detectors::fit_md(&train_e).context("eval: fitting md")?);
    }
    if has(DetectorChoice::Knn) {
        let k = cfg.knn_k.unwrap_or_else(|| detectors::default_k(train_e.n()));
        fitted.push(detectors::fit_knn(&train_e, k).context("eval: fitting knn")?);
    }
    if has(DetectorChoice::Vae) {
        let vcfg = VaeConfig { seed, ..cfg.vae.clone() };
        fitted.push(detectors::fit_vae(&train_e, &vcfg).context("eval: fitting vae")?);
    }
    for d in &fitted {
        d.save(&dir.join(format!("detector_{}.lird", d.kind().name())))?;
    }
    Detector::ebo_logits(n_layers).save(&dir.join("detector_ebo.lird"))?;

    let mut rows = Vec::new();
    let mut profiles = Vec::new();
    let mut bhls = Vec::new();
    for (name, x) in task.ood_splits() {
        let ood_e = energies(x)?;
        data::write_energy_file(&ood_e, &dir.join(format!("energies_{name}.lire")))?;
        if has(DetectorChoice::Ebo) {
            let d = Detector::ebo_logits(n_layers);
            rows.push(ReportRow::evaluate("ebo", Some("logits".into()), name, &d.split(&test_e, &ood_e)?));
        }
        if has(DetectorChoice::Msp) {
            let ood_msp: Vec<f64> = data::logits(&net, x)?
                .iter()
                .map(|y| Detector::msp().score_activations(y))
                .collect::<Result<_, _>>()?;
            let split = metrics::ScoredSplit::new(id_msp.clone(), ood_msp)?;
            rows.push(ReportRow::evaluate("msp", None, name, &split));
        }
        if has(DetectorChoice::Layers) {
            for l in 0..n_layers - 1 {
                let d = Detector::layer_energy(l, n_layers, Orientation::HIGH_IS_ID)?;
                rows.push(ReportRow::evaluate(
                    "layer_energy",
                    Some(l.to_string()),
                    name,
                    &d.split(&test_e, &ood_e)?,
                ));
            }
        }
        if has(DetectorChoice::Bhl) && (n_layers > 1 || cfg.include_logits) {
            let r = detectors::bhl(&test_e, &ood_e, cfg.include_logits)?;
            let split = r.detector(n_layers)?.split(&test_e, &ood_e)?;
            let mut row = ReportRow::evaluate("bhl", Some(layer_name(r.best_layer, n_layers)), name, &split);
            row.auroc = r.oriented_auroc;
            rows.push(row);
            bhls.push((name.to_string(), r));
        }
        for d in &fitted {
            rows.push(ReportRow::evaluate(d.kind().name(), None, name, &d.split(&test_e, &ood_e)?));
        }
        let full = detectors::bhl(&test_e, &ood_e, true)?;
        profiles.push((
            name.to_string(),
            full.per_layer_auroc.iter().map(|&a| a.max(1.0 - a)).collect(),
        ));
    }

    std::fs::write(dir.join("eval_report.csv"), metrics::report_csv(&rows)).context("eval: writing report")?;
    let summary = SeedEval {
        seed,
        id_accuracy,
        rows,
        profiles,
        bhl: bhls,
    };
    std::fs::write(dir.join("eval_summary.json"), serde_json::to_string_pretty(&summary)? + "\n")
        .context("eval: writing summary")?;
    std::fs::write(dir.join("layer_profile.svg"), profile_svg(&summary.profiles, n_layers))
        .context("eval: writing profile")?;
    Ok(summary)
}

/// Run [`eval_seed`] for every configured seed.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<Vec<SeedEval>> {
    create_dir(out)?;
    let evals = cfg
        .seeds
        .iter()
        .map(|&s| eval_seed(cfg, out, s))
        .collect::<Result<Vec<_>>>()?;
    write_manifest(out, "eval", cfg)?;
    Ok(evals)
}

/// Stream `index,score,verdict` rows for every energy vector in a file.
pub fn cmd_score<W: Write>(detector: &Path, energies: &Path, threshold: Option<f64>, mut out: W) -> Result<()> {
    let d = Detector::load(detector).with_context(|| format!("score: loading detector {}", detector.display()))?;
    let m = data::read_energy_file(energies)
        .with_context(|| format!("score: loading energies {}", energies.display()))?;
    let threshold = threshold
        .or(d.threshold())
        .ok_or_else(|| anyhow!("score: no threshold given"))?;
    writeln!(out, "index,score,verdict")?;
    for (i, row) in m.rows().enumerate() {
        let s = d.score(row).with_context(|| format!("score: row {i}"))?;
        let v = match d.classify(s, threshold) {
            Verdict::Id => "ID",
            Verdict::Ood => "OOD",
        };
        writeln!(out, "{i},{s},{v}")?;
    }
    Ok(())
}

/// Line plot of oriented AUROC against tap index, one line per split.
pub fn profile_svg(profiles: &[(String, Vec<f64>)], n_layers: usize) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 9] = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf",
    ];
    let x_of = |l: usize| M + (W - 2.0 * M) * if n_layers > 1 { l as f64 / (n_layers - 1) as f64 } else { 0.5 };
    let y_of = |a: f64| H - M - (H - 2.0 * M) * ((a - 0.5) / 0.5).clamp(0.0, 1.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M},{M} V{} H{}" fill="none" stroke="black"/>"#,
        H - M,
        W - M
    );
    for t in [0.5, 0.6, 0.7, 0.8, 0.9, 1.0] {
        let y = y_of(t);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{t:.1}</text>"#, M - 6.0, y + 4.0);
        let _ = writeln!(s, r##"<line x1="{M}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/>"##, W - M);
    }
    for l in 0..n_layers {
        let label = layer_name(l, n_layers);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{label}</text>"#, x_of(l), H - M + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">layer</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">oriented AUROC</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (i, (name, vals)) in profiles.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .map(|(l, &a)| format!("{:.2},{:.2}", x_of(l), y_of(a)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let ly = M + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly:.2}" fill="{color}">{name}</text>"#,
            W - M - 110.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_defaults_and_keys() {
        let c = RunConfig::parse("", Path::new("/x")).unwrap();
        assert_eq!(c.seeds, vec![0]);
        assert!(matches!(c.train, TrainSpec::CrossEntropy(_)));
        assert!(c.out.is_none());

        let text = "# run\ntask.n_train = 100\ntrain.mode = rebo\nrebo.margins = calibrated\nseeds = 1, 2\nout = runs/a\ndetectors = ebo,bhl\ninclude_logits = true\n";
        let c = RunConfig::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(c.task.n_train, 100);
        assert_eq!(c.seeds, vec![1, 2]);
        assert_eq!(c.out, Some(PathBuf::from("/cfg/runs/a")));
        assert_eq!(c.detectors, vec![DetectorChoice::Ebo, DetectorChoice::Bhl]);
        assert!(c.include_logits);
        match c.train_spec(2) {
            TrainSpec::Rebo(r) => {
                assert_eq!(r.margins, Margins::Calibrated);
                assert_eq!(r.schedule.seed, 2);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn parse_rejects() {
        let base = Path::new(".");
        assert!(RunConfig::parse("bogus = 1", base).is_err());
        assert!(RunConfig::parse("seeds = 1\nseeds = 2", base).is_err());
        assert!(RunConfig::parse("no equals sign", base).is_err());
        assert!(RunConfig::parse("train.mode = sgd", base).is_err());
        assert!(RunConfig::parse("rebo.lambda = 1", base).is_err());
        assert!(RunConfig::parse("train.mode = rebo\nrebo.layers = 1,1", base).is_err());
        assert!(RunConfig::parse("train.mode = rebo\nrebo.margins = fixed", base).is_err());
        assert!(RunConfig::parse("train.mode = rebo\nrebo.m_in = 3", base).is_err());
        assert!(RunConfig::parse("detectors = ebo,foo", base).is_err());
        assert!(RunConfig::parse("task.dim = two", base).is_err());
        let ok = RunConfig::parse("train.mode = rebo\nrebo.margins = fixed\nrebo.m_in = -3\nrebo.m_out = -1", base);
        assert!(ok.is_ok());
    }

    #[test]
    fn hash_tracks_text() {
        let a = RunConfig::parse("seeds = 1", Path::new(".")).unwrap();
        let b = RunConfig::parse("seeds = 1 ", Path::new(".")).unwrap();
        assert_ne!(a.hash, b.hash);
        assert_eq!(a.hash.len(), 64);
    }

    #[test]
    fn svg_is_well_formed() {
        let svg = profile_svg(&[("far_ood".into(), vec![0.6, 0.9, 0.7])], 3);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains(">logits<"));
    }
}
