use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use hetseg_core::conversion::{group_sum_raster, random_gradcheck};
use hetseg_core::data_selection::{
    bic, fit_gmm, interleave_merge, load_counts_csv, rank_by_diversity, rank_by_similarity,
    FeatureTable, GmmModel, Ranking, DEFAULT_SAMPLE,
};
use hetseg_core::metrics::{
    impact, knowledgeability, miou_mpa, part_pq, pq, PartIouStats, PqStats, SegmentSet,
    DEFAULT_THRESHOLD_COUNT,
};
use hetseg_core::panoptic_uid::{decode, encode, validate_raster, PanopticSpec};
use hetseg_core::raster_io::{
    confusion_matrix, load_pgm16, load_prb, load_uir32, raster_info, save_prb, ConfusionMatrix,
};
use hetseg_core::taxonomy::{validate_atom_properties, validate_file, AtomTaxonomy, TaxonomyFile};
use hetseg_core::toy_trainer::{self, SyntheticScenario};
use hetseg_core::weak_supervision::{is_labeled, load_annotations, rasterize_votes, refine};
use hetseg_core::{Error, Result};

use crate::{Outcome, EXIT_NUMERIC, EXIT_VALIDATION};

#[derive(Debug, Parser)]
#[command(name = "hetseg", version, about = "Multi-dataset segmentation tooling")]
pub struct Cli {
    /// Print only the result payload, without the report envelope.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Taxonomy files.
    #[command(subcommand)]
    Taxonomy(TaxonomyCmd),
    /// Raster files.
    #[command(subcommand)]
    Raster(RasterCmd),
    /// Atom-to-label conversion.
    #[command(subcommand)]
    Convert(ConvertCmd),
    /// Check the logit gradient against central differences.
    Gradcheck(GradcheckArgs),
    /// Pseudo-labels from weak annotations.
    #[command(subcommand)]
    Pseudo(PseudoCmd),
    /// Evaluation metrics.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Panoptic-parts UID codec.
    #[command(subcommand)]
    Uid(UidCmd),
    /// GMM and heuristic data selection.
    #[command(subcommand)]
    Select(SelectCmd),
    /// Synthetic joint-training experiment.
    #[command(subcommand)]
    Toy(ToyCmd),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Taxonomy(TaxonomyCmd::Validate { .. }) => "taxonomy validate",
            Command::Raster(RasterCmd::Info { .. }) => "raster info",
            Command::Convert(ConvertCmd::Probs(_)) => "convert probs",
            Command::Gradcheck(_) => "gradcheck",
            Command::Pseudo(PseudoCmd::Gen(_)) => "pseudo gen",
            Command::Pseudo(PseudoCmd::Refine(_)) => "pseudo refine",
            Command::Eval(EvalCmd::Semseg(_)) => "eval semseg",
            Command::Eval(EvalCmd::Partpq(_)) => "eval partpq",
            Command::Eval(EvalCmd::Impact(_)) => "eval impact",
            Command::Uid(UidCmd::Encode { .. }) => "uid encode",
            Command::Uid(UidCmd::Decode { .. }) => "uid decode",
            Command::Uid(UidCmd::Validate { .. }) => "uid validate",
            Command::Select(SelectCmd::Fit(_)) => "select fit",
            Command::Select(SelectCmd::Rank(_)) => "select rank",
            Command::Select(SelectCmd::Score(_)) => "select score",
            Command::Select(SelectCmd::Merge(_)) => "select merge",
            Command::Toy(ToyCmd::Run { .. }) => "toy run",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum TaxonomyCmd {
    /// Check atoms, partitions and hierarchy; exits 2 on any violation.
    Validate { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum RasterCmd {
    /// Print format, dimensions and channel count.
    Info { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum ConvertCmd {
    /// Sum atom probabilities into a dataset's label probabilities.
    Probs(ConvertArgs),
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    dataset: String,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Largest atom count drawn per trial.
    #[arg(long, default_value_t = 32)]
    atoms: usize,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exit 4 when the worst deviation reaches this value.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

#[derive(Debug, Subcommand)]
pub enum PseudoCmd {
    /// Rasterize weak annotations into a pseudo-label raster.
    Gen(PseudoGenArgs),
    /// Drop pseudo-label pixels the model disagrees with.
    Refine(PseudoRefineArgs),
}

#[derive(Debug, Args)]
pub struct PseudoGenArgs {
    #[arg(long)]
    annots: PathBuf,
    /// Label count, including unlabeled class 0.
    #[arg(long)]
    labels: usize,
    /// Raster size as WxH.
    #[arg(long, value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PseudoRefineArgs {
    #[arg(long)]
    pseudo: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value_t = hetseg_core::weak_supervision::DEFAULT_REFINE_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// mIoU, mPA and Knowledgeability over directories of PGM rasters.
    Semseg(SemsegArgs),
    /// PQ and PartPQ over directories of UID rasters.
    Partpq(PartpqArgs),
    /// Relative degradation under a visual artifact.
    Impact(ImpactArgs),
}

#[derive(Debug, Args)]
pub struct SemsegArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Number of classes.
    #[arg(long)]
    labels: usize,
    /// Ground-truth classes to skip.
    #[arg(long, value_delimiter = ',')]
    ignore: Vec<u16>,
    /// Knowledgeability parameters as c=<budget>,nt=<thresholds>.
    #[arg(long, value_parser = parse_knowledgeability)]
    knowledgeability: Option<(Option<usize>, Option<usize>)>,
}

#[derive(Debug, Args)]
pub struct PartpqArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    spec: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImpactArgs {
    #[arg(long)]
    none: f64,
    #[arg(long)]
    low: f64,
    #[arg(long)]
    high: f64,
}

#[derive(Debug, Subcommand)]
pub enum UidCmd {
    /// Encode semantic, instance and part ids.
    Encode {
        semantic: u32,
        instance: Option<u32>,
        part: Option<u32>,
    },
    /// Decode a UID into its ids.
    Decode { uid: u32 },
    /// Check a UID raster against a panoptic spec; exits 2 on violations.
    Validate {
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        spec: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum SelectCmd {
    /// Fit a GMM to feature rows.
    Fit(FitArgs),
    /// Rank images by similarity to a fitted GMM.
    Rank(RankArgs),
    /// Rank images by weighted object counts.
    Score(ScoreArgs),
    /// Interleave two rankings without duplicates.
    Merge(MergeArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_SAMPLE)]
    sample: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Ranking CSV; printed in the result when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    counts: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    weights: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    n: usize,
    /// One id per line; printed in the result when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ToyCmd {
    /// Generate, train and evaluate one scenario.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Full report including the loss curve.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(w)?, parse(h)?))
}

fn parse_knowledgeability(s: &str) -> std::result::Result<(Option<usize>, Option<usize>), String> {
    let mut out = (None, None);
    for part in s.split(',').filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got `{part}`"))?;
        let value = value
            .trim()
            .parse::<usize>()
            .map_err(|e| format!("`{value}`: {e}"))?;
        match key.trim() {
            "c" => out.0 = Some(value),
            "nt" => out.1 = Some(value),
            other => return Err(format!("unknown key `{other}`")),
        }
    }
    Ok(out)
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

pub fn run(command: &Command) -> Result<Outcome> {
    match command {
        Command::Taxonomy(TaxonomyCmd::Validate { file }) => taxonomy_validate(file),
        Command::Raster(RasterCmd::Info { file }) => {
            Ok(Outcome::ok(to_value(&raster_info(file)?)?))
        }
        Command::Convert(ConvertCmd::Probs(a)) => convert_probs(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Pseudo(PseudoCmd::Gen(a)) => pseudo_gen(a),
        Command::Pseudo(PseudoCmd::Refine(a)) => pseudo_refine(a),
        Command::Eval(EvalCmd::Semseg(a)) => eval_semseg(a),
        Command::Eval(EvalCmd::Partpq(a)) => eval_partpq(a),
        Command::Eval(EvalCmd::Impact(a)) => Ok(Outcome::ok(
            json!({ "impact": impact(a.none, a.low, a.high)? }),
        )),
        Command::Uid(UidCmd::Encode {
            semantic,
            instance,
            part,
        }) => Ok(Outcome::ok(json!(encode(*semantic, *instance, *part)?))),
        Command::Uid(UidCmd::Decode { uid }) => Ok(Outcome::ok(to_value(&decode(*uid)?)?)),
        Command::Uid(UidCmd::Validate { raster, spec }) => uid_validate(raster, spec),
        Command::Select(SelectCmd::Fit(a)) => select_fit(a),
        Command::Select(SelectCmd::Rank(a)) => select_rank(a),
        Command::Select(SelectCmd::Score(a)) => select_score(a),
        Command::Select(SelectCmd::Merge(a)) => select_merge(a),
        Command::Toy(ToyCmd::Run { scenario, out }) => toy_run(scenario, out.as_deref()),
    }
}

fn taxonomy_validate(path: &Path) -> Result<Outcome> {
    let file: TaxonomyFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    let mut report = validate_file(&file);
    if report.is_valid() {
        let props = validate_atom_properties(&AtomTaxonomy::try_from(file)?);
        report.violations.extend(props.violations);
        report.warnings.extend(props.warnings);
    }
    let status = if report.is_valid() {
        0
    } else {
        EXIT_VALIDATION
    };
    Ok(Outcome {
        result: json!({ "valid": report.is_valid(), "violations": report.violations }),
        warnings: report.warnings,
        status,
    })
}

fn convert_probs(a: &ConvertArgs) -> Result<Outcome> {
    let tax = hetseg_core::taxonomy::load_taxonomy(&a.taxonomy)?;
    let space = tax.dataset(&a.dataset)?;
    let (sigma, load) = load_prb(&a.input)?;
    let labels = group_sum_raster(&sigma, space)?;
    save_prb(&labels, &a.out)?;
    Ok(Outcome::ok(json!({
        "width": labels.width(),
        "height": labels.height(),
        "atoms": sigma.channels(),
        "labels": labels.channels(),
        "out": a.out,
    }))
    .with_warnings(load.warnings))
}

fn gradcheck(a: &GradcheckArgs) -> Result<Outcome> {
    let summary = random_gradcheck(a.atoms, a.trials, a.eps, a.seed)?;
    let passed = summary.max_deviation < a.tolerance;
    let mut result = to_value(&summary)?;
    result["tolerance"] = json!(a.tolerance);
    result["passed"] = json!(passed);
    Ok(Outcome {
        result,
        warnings: Vec::new(),
        status: if passed { 0 } else { EXIT_NUMERIC },
    })
}

fn labeled_count(raster: &hetseg_core::raster_io::ProbRaster) -> usize {
    raster.pixels().filter(|p| is_labeled(p)).count()
}

fn pseudo_gen(a: &PseudoGenArgs) -> Result<Outcome> {
    let annots = load_annotations(&a.annots)?;
    let (w, h) = a.size;
    let pseudo = rasterize_votes(&annots, a.labels, w, h)?;
    save_prb(&pseudo, &a.out)?;
    Ok(Outcome::ok(json!({
        "width": w,
        "height": h,
        "labels": a.labels,
        "annotations": annots.len(),
        "labeled_pixels": labeled_count(&pseudo),
        "out": a.out,
    })))
}

fn pseudo_refine(a: &PseudoRefineArgs) -> Result<Outcome> {
    let (pseudo, w1) = load_prb(&a.pseudo)?;
    let (pred, w2) = load_prb(&a.pred)?;
    let refined = refine(&pseudo, &pred, a.threshold)?;
    save_prb(&refined, &a.out)?;
    Ok(Outcome::ok(json!({
        "threshold": a.threshold,
        "labeled_before": labeled_count(&pseudo),
        "labeled_after": labeled_count(&refined),
        "out": a.out,
    }))
    .with_warnings(w1.warnings.into_iter().chain(w2.warnings).collect()))
}

/// Files of `gt_dir` paired with same-named files of `pred_dir`, sorted by name.
fn paired_files(gt_dir: &Path, pred_dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(gt_dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            names.push(entry.file_name());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Format(format!("no rasters in {}", gt_dir.display())));
    }
    names
        .into_iter()
        .map(|n| {
            let pred = pred_dir.join(&n);
            if !pred.is_file() {
                return Err(Error::Format(format!(
                    "prediction {} is missing",
                    pred.display()
                )));
            }
            Ok((gt_dir.join(&n), pred))
        })
        .collect()
}

fn eval_semseg(a: &SemsegArgs) -> Result<Outcome> {
    let pairs = paired_files(&a.gt, &a.pred)?;
    let ignore: BTreeSet<u16> = a.ignore.iter().copied().collect();
    let matrices = pairs
        .par_iter()
        .map(|(g, p)| confusion_matrix(&load_pgm16(g)?, &load_pgm16(p)?, a.labels, &ignore))
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(a.labels);
    for m in &matrices {
        cm.merge(m)?;
    }
    let scores = miou_mpa(&cm);

    let counted = (0..a.labels)
        .filter(|c| !ignore.contains(&(*c as u16)))
        .count();
    let (budget, thresholds) = a.knowledgeability.unwrap_or((None, None));
    let budget = budget.unwrap_or(counted);
    let thresholds = thresholds.unwrap_or(DEFAULT_THRESHOLD_COUNT);
    let ious: Vec<f64> = scores
        .per_class_iou
        .iter()
        .enumerate()
        .filter(|(c, _)| !ignore.contains(&(*c as u16)))
        .filter_map(|(_, v)| *v)
        .collect();
    let k = knowledgeability(&ious, budget, thresholds)?;
    Ok(Outcome::ok(json!({
        "images": pairs.len(),
        "per_class_iou": scores.per_class_iou,
        "per_class_pa": scores.per_class_pa,
        "miou": scores.miou,
        "mpa": scores.mpa,
        "knowledgeability": { "value": k, "c": budget, "nt": thresholds },
    })))
}

fn eval_partpq(a: &PartpqArgs) -> Result<Outcome> {
    let spec = PanopticSpec::load(&a.spec)?;
    spec.check()?;
    let parts: BTreeMap<u16, u8> = spec
        .parts
        .iter()
        .map(|(&k, &v)| (u16::from(k), v))
        .collect();
    let pairs = paired_files(&a.gt, &a.pred)?;
    let per_image = pairs
        .par_iter()
        .map(|(g, p)| -> Result<_> {
            let (g, p) = (load_uir32(g)?, load_uir32(p)?);
            let gs = SegmentSet::from_uid_raster(&g, &spec)?;
            let ps = SegmentSet::from_uid_raster(&p, &spec)?;
            let mut piou = PartIouStats::default();
            piou.accumulate(&g, &p, &parts)?;
            Ok((pq(&gs, &ps)?, part_pq(&gs, &ps, &parts)?, piou))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut total_pq, mut total_ppq, mut total_piou) = (
        PqStats::default(),
        PqStats::default(),
        PartIouStats::default(),
    );
    for (s, ps, pi) in &per_image {
        total_pq.merge(s);
        total_ppq.merge(ps);
        total_piou.merge(pi);
    }
    let pq_by_class = total_pq.per_class_quality();
    let ppq_by_class = total_ppq.per_class_quality();
    let piou_by_class = total_piou.per_class();
    let mut per_class = serde_json::Map::new();
    for (class, stats) in &total_pq.per_class {
        per_class.insert(
            class.to_string(),
            json!({
                "pq": pq_by_class.get(class),
                "part_pq": ppq_by_class.get(class),
                "part_iou": piou_by_class.get(class),
                "tp": stats.tp,
                "fp": stats.fp,
                "fn": stats.fn_,
            }),
        );
    }
    Ok(Outcome::ok(json!({
        "images": pairs.len(),
        "pq": total_pq.quality(),
        "part_pq": total_ppq.quality(),
        "per_class": per_class,
    })))
}

fn uid_validate(raster: &Path, spec: &Path) -> Result<Outcome> {
    let spec = PanopticSpec::load(spec)?;
    spec.check()?;
    let report = validate_raster(&load_uir32(raster)?, &spec);
    let status = if report.is_valid() {
        0
    } else {
        EXIT_VALIDATION
    };
    Ok(Outcome {
        result: json!({ "valid": report.is_valid(), "violations": report.violations }),
        warnings: Vec::new(),
        status,
    })
}

fn select_fit(a: &FitArgs) -> Result<Outcome> {
    let table = FeatureTable::load_csv(&a.features)?;
    let fit = fit_gmm(&table, a.k, a.seed, Some(a.sample))?;
    let ll = fit.log_likelihood();
    let file = fit.model.to_file();
    fs::write(&a.out, serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(Outcome::ok(json!({
        "k": a.k,
        "d": table.dim(),
        "samples": fit.samples,
        "iterations": fit.trace.len(),
        "converged": fit.converged,
        "log_likelihood": ll,
        "bic": bic(&fit.model, fit.samples, ll)?,
        "out": a.out,
    }))
    .with_warnings(fit.warnings))
}

fn emit_ranking(ranking: &Ranking, out: Option<&Path>) -> Result<Value> {
    let mut result = json!({ "images": ranking.entries.len() });
    match out {
        Some(path) => {
            fs::write(path, ranking.to_csv())?;
            result["out"] = json!(path);
        }
        None => {
            result["ranking"] = ranking
                .entries
                .iter()
                .map(|(id, score)| json!({ "image_id": id, "score": score }))
                .collect();
        }
    }
    Ok(result)
}

fn select_rank(a: &RankArgs) -> Result<Outcome> {
    let model = GmmModel::load(&a.model)?;
    let table = FeatureTable::load_csv(&a.features)?;
    let ranking = rank_by_similarity(&model, &table)?;
    Ok(Outcome::ok(emit_ranking(&ranking, a.out.as_deref())?))
}

fn select_score(a: &ScoreArgs) -> Result<Outcome> {
    let counts = load_counts_csv(&a.counts)?;
    let ranking = rank_by_diversity(&counts, &a.weights)?;
    Ok(Outcome::ok(emit_ranking(&ranking, a.out.as_deref())?))
}

fn select_merge(a: &MergeArgs) -> Result<Outcome> {
    let (ra, rb) = (Ranking::load_csv(&a.a)?, Ranking::load_csv(&a.b)?);
    let merged = interleave_merge(&ra.ids(), &rb.ids(), a.n);
    let mut warnings = Vec::new();
    if merged.len() < a.n {
        warnings.push(format!(
            "only {} distinct ids available for n = {}",
            merged.len(),
            a.n
        ));
    }
    let mut result = json!({ "selected": merged.len() });
    match &a.out {
        Some(path) => {
            let mut text = merged.join("\n");
            text.push('\n');
            fs::write(path, text)?;
            result["out"] = json!(path);
        }
        None => result["ids"] = json!(merged),
    }
    Ok(Outcome::ok(result).with_warnings(warnings))
}

fn toy_run(scenario: &Path, out: Option<&Path>) -> Result<Outcome> {
    let sc = SyntheticScenario::load(scenario)?;
    let tax = sc.taxonomy()?;
    let warnings = validate_atom_properties(&tax).warnings;
    let (report, _) = toy_trainer::run(&sc)?;
    if let Some(path) = out {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(Outcome::ok(json!({
        "steps": report.loss_curve.len(),
        "initial_loss": report.loss_curve.first(),
        "final_loss": report.loss_curve.last(),
        "atom_accuracy": report.evaluation.atom_accuracy,
        "label_accuracy": report.evaluation.label_accuracy,
        "knowledgeability": report.evaluation.knowledgeability,
        "max_gradcheck_deviation": report.max_gradcheck_deviation,
        "out": out,
    }))
    .with_warnings(warnings))
}
