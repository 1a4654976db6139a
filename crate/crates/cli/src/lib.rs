//! Command implementations behind the `star-kit` binary.
//!
//! Every command returns an [`Output`] (the text for stdout and whether its
//! check passed) or a [`CliError`], which maps onto the process exit code.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use star_kit::gradients::{grad_check_seeds, GradReport};
use star_kit::losses::objective_from_heatmap;
use star_kit::metrics::{evaluate, Annotation, MetricReport};
use star_kit::moments::Moments;
use star_kit::synthetic::{
    anisotropy_experiment, history_csv, restriction_experiment, stability_experiment, train,
    AnisotropyReport, Dataset, RestrictionReport, StabilityRun,
};
use star_kit::{Covariance2, DiscreteHeatmap, Error, LossConfig, Point};

pub use config::{preset_normalizer, GradCheckConfig, MetricsConfig, RunConfig, SyntheticConfig};

/// Relative tolerance of the symmetry check on isotropic landmarks.
pub const ISOTROPY_TOLERANCE: f64 = 0.25;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Degenerate(String),
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Degenerate(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::DegenerateDistribution { .. } => CliError::Degenerate(e.to_string()),
            Error::NonFiniteLoss { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serializes") + "\n"
}

#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub text: String,
    pub passed: bool,
}

impl Output {
    fn ok(text: String) -> Self {
        Self { text, passed: true }
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

/// Sizes the global rayon pool from `STAR_KIT_THREADS`, if set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("STAR_KIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Input(format!("STAR_KIT_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Input(format!("thread pool: {e}")))
}

pub fn load_heatmap(path: &Path) -> Result<DiscreteHeatmap, CliError> {
    DiscreteHeatmap::from_csv(&read(path)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub mu: Point,
    pub sigma_unbiased: Covariance2,
    pub sigma_biased: Covariance2,
    pub lambda1: f64,
    pub lambda2: f64,
    pub v1: Point,
    pub v2: Point,
    /// `λ1/λ2`.
    pub anisotropy: f64,
    /// `V1 = Σ h`.
    pub weight_sum: f64,
    /// `V2 = Σ h²`.
    pub weight_square_sum: f64,
}

impl From<&Moments> for DecodeOutput {
    fn from(m: &Moments) -> Self {
        Self {
            mu: m.mu,
            sigma_unbiased: m.unbiased,
            sigma_biased: m.biased,
            lambda1: m.eig.lambda1,
            lambda2: m.eig.lambda2,
            v1: m.eig.v1,
            v2: m.eig.v2,
            anisotropy: m.anisotropy(),
            weight_sum: m.sums.v1_sum,
            weight_square_sum: m.sums.v2_sum,
        }
    }
}

pub fn cmd_decode(heatmap_csv: &Path) -> Result<Output, CliError> {
    let h = load_heatmap(heatmap_csv)?;
    let m = Moments::of(&h)?;
    Ok(Output::ok(to_json(&DecodeOutput::from(&m))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossOutput {
    pub star: f64,
    pub restriction: f64,
    pub dr: f64,
    pub total: f64,
}

pub fn cmd_loss(heatmap_csv: &Path, target: Point, cfg: &RunConfig) -> Result<Output, CliError> {
    if !target.is_finite() {
        return Err(CliError::Input(format!("target ({}, {}) is not finite", target.x, target.y)));
    }
    let h = load_heatmap(heatmap_csv)?;
    let parts = objective_from_heatmap(&h, target, &cfg.loss)?;
    Ok(Output::ok(to_json(&LossOutput {
        star: parts.star,
        restriction: parts.restriction,
        dr: parts.dr,
        total: parts.total(),
    })))
}

pub fn cmd_gradcheck(cfg: &RunConfig, seeds: usize, tolerance: f64) -> Result<Output, CliError> {
    if seeds == 0 {
        return Err(CliError::Input("--seeds must be >= 1".into()));
    }
    if !(tolerance >= 0.0) {
        return Err(CliError::Input(format!("tolerance must be >= 0, got {tolerance}")));
    }
    let list: Vec<u64> = (0..seeds as u64).map(|s| cfg.seed.wrapping_add(s)).collect();
    let report: GradReport =
        grad_check_seeds(&cfg.loss, cfg.gradcheck.grid, &list, tolerance, cfg.gradcheck.step)?;
    Ok(Output {
        passed: report.passed,
        text: to_json(&report),
    })
}

/// One image or a list of images.
#[derive(Deserialize)]
#[serde(untagged)]
enum AnnotationFile {
    One(Annotation),
    Many(Vec<Annotation>),
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>, CliError> {
    let parsed: AnnotationFile = serde_json::from_str(&read(path)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(match parsed {
        AnnotationFile::One(a) => vec![a],
        AnnotationFile::Many(v) => v,
    })
}

pub fn nme_csv(report: &MetricReport) -> String {
    let mut out = String::from("image,nme\n");
    for (i, e) in report.nme_per_image.iter().enumerate() {
        out.push_str(&format!("{i},{e}\n"));
    }
    out
}

pub fn ced_csv(report: &MetricReport) -> String {
    let mut out = String::from("threshold,fraction\n");
    for (t, f) in &report.ced {
        out.push_str(&format!("{t},{f}\n"));
    }
    out
}

/// Writes `metrics.json`, `nme.csv` and `ced.csv` to `out` when given.
pub fn cmd_metrics(
    pred_json: &Path,
    gt_json: &Path,
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<Output, CliError> {
    let preds = load_annotations(pred_json)?;
    let gts = load_annotations(gt_json)?;
    let m = &cfg.metrics;
    let report = evaluate(&preds, &gts, &m.normalizer, m.threshold, m.resolution)?;
    let text = to_json(&report);
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("metrics.json"), &text)?;
        write(&dir.join("nme.csv"), &nme_csv(&report))?;
        write(&dir.join("ced.csv"), &ced_csv(&report))?;
    }
    Ok(Output::ok(text))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    Ok(cfg.synthetic.dataset().generate(cfg.grid, cfg.seed)?)
}

/// Dumps the train and test splits as CSV.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<Output, CliError> {
    let (train_set, test_set) = datasets(cfg)?;
    create_dir(out)?;
    write(&out.join("config.json"), &cfg.to_json())?;
    write(&out.join("train.csv"), &train_set.to_csv())?;
    write(&out.join("test.csv"), &test_set.to_csv())?;
    Ok(Output::ok(format!(
        "wrote {} train and {} test images of {} landmarks to {}\n",
        train_set.n_images(),
        test_set.n_images(),
        train_set.n_landmarks(),
        out.display()
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExperimentKind {
    Stability,
    Anisotropy,
    Restriction,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Stability => "stability",
            ExperimentKind::Anisotropy => "anisotropy",
            ExperimentKind::Restriction => "restriction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Claim {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub seed: u64,
    pub values: BTreeMap<String, f64>,
    pub claims: Vec<Claim>,
    pub passed: bool,
}

impl Summary {
    fn new(kind: ExperimentKind, seed: u64, values: BTreeMap<String, f64>, claims: Vec<Claim>) -> Self {
        Self {
            experiment: kind.name().into(),
            seed,
            passed: claims.iter().all(|c| c.passed),
            values,
            claims,
        }
    }
}

/// `|a − b| / max(a, b)`.
pub fn relative_gap(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == 0.0 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

/// STAR ensemble, regression ensemble and the anisotropy of each STAR model.
pub struct StabilityOutcome {
    pub star: StabilityRun,
    pub baseline: StabilityRun,
    pub anisotropy: Vec<AnisotropyReport>,
    pub summary: Summary,
}

/// Pooled `λ1/λ2` of the ambiguous landmarks over that of the isotropic ones.
pub fn anisotropy_factor(reports: &[AnisotropyReport]) -> f64 {
    let n = reports.len() as f64;
    let amb: f64 = reports.iter().map(|r| r.ambiguous_mean_ratio).sum::<f64>() / n;
    let iso: f64 = reports.iter().map(|r| r.isotropic_mean_ratio).sum::<f64>() / n;
    amb / iso
}

pub fn run_stability(cfg: &RunConfig) -> Result<StabilityOutcome, CliError> {
    let n = cfg.synthetic.n_models;
    if n < 2 {
        return Err(CliError::Input(format!(
            "stability needs synthetic.n_models >= 2, got {n}"
        )));
    }
    let (train_set, test_set) = datasets(cfg)?;
    let opt = cfg.optimizer();
    let baseline_loss = LossConfig::regression(cfg.loss.distance);
    let star = stability_experiment(n, &train_set, &test_set, &cfg.loss, &opt)?;
    let baseline = stability_experiment(n, &train_set, &test_set, &baseline_loss, &opt)?;
    let anisotropy = star
        .models
        .iter()
        .map(|m| anisotropy_experiment(&m.model, &test_set))
        .collect::<star_kit::Result<Vec<_>>>()?;

    let s = &star.report;
    let b = &baseline.report;
    let reduction = 1.0 - s.ambiguous.median_tangential / b.ambiguous.median_tangential;
    let factor = anisotropy_factor(&anisotropy);
    let star_iso = relative_gap(s.isotropic.mean_tangential, s.isotropic.mean_normal);
    let base_iso = relative_gap(b.isotropic.mean_tangential, b.isotropic.mean_normal);
    let values = BTreeMap::from([
        ("star_ambiguous_median_tangential".into(), s.ambiguous.median_tangential),
        ("baseline_ambiguous_median_tangential".into(), b.ambiguous.median_tangential),
        ("tangential_reduction".into(), reduction),
        ("star_isotropic_relative_gap".into(), star_iso),
        ("baseline_isotropic_relative_gap".into(), base_iso),
        ("star_overall_mean_total".into(), s.overall_mean_total),
        ("baseline_overall_mean_total".into(), b.overall_mean_total),
        ("anisotropy_factor".into(), factor),
    ]);
    let claims = vec![
        Claim::new(
            "star_lower_tangential_variance",
            s.ambiguous.median_tangential < b.ambiguous.median_tangential,
            format!(
                "median tangential variance on ambiguous landmarks: {:.4} (star) vs {:.4} (regression), {:.1}% lower",
                s.ambiguous.median_tangential,
                b.ambiguous.median_tangential,
                100.0 * reduction
            ),
        ),
        Claim::new(
            "isotropic_landmarks_symmetric",
            star_iso <= ISOTROPY_TOLERANCE && base_iso <= ISOTROPY_TOLERANCE,
            format!(
                "tangential vs normal variance gap on isotropic landmarks: {:.1}% (star), {:.1}% (regression)",
                100.0 * star_iso,
                100.0 * base_iso
            ),
        ),
        Claim::new(
            "ambiguous_landmarks_more_anisotropic",
            factor > 1.0,
            format!("mean λ1/λ2 ambiguous over isotropic: {factor:.3}"),
        ),
    ];
    Ok(StabilityOutcome {
        summary: Summary::new(ExperimentKind::Stability, cfg.seed, values, claims),
        star,
        baseline,
        anisotropy,
    })
}

pub fn run_restriction(cfg: &RunConfig) -> Result<(RestrictionReport, Summary), CliError> {
    let (train_set, _) = datasets(cfg)?;
    let report = restriction_experiment(&train_set, &cfg.loss, &cfg.optimizer())?;
    let values = BTreeMap::from([
        ("final_mean_lambda1_value".into(), report.final_lambda1_value),
        ("final_mean_lambda1_none".into(), report.final_lambda1_none),
    ]);
    let claims = vec![Claim::new(
        "no_restriction_inflates_lambda1",
        report.none_inflates(),
        format!(
            "final mean λ1: {:.4} without restriction vs {:.4} with value restriction",
            report.final_lambda1_none, report.final_lambda1_value
        ),
    )];
    let summary = Summary::new(ExperimentKind::Restriction, cfg.seed, values, claims);
    Ok((report, summary))
}

/// Runs one experiment and writes its tables, `summary.json` and the
/// effective `config.json` into `out`. Fails the check if any claim fails.
pub fn cmd_experiment(kind: ExperimentKind, cfg: &RunConfig, out: &Path) -> Result<Output, CliError> {
    create_dir(out)?;
    write(&out.join("config.json"), &cfg.to_json())?;
    let summary = match kind {
        ExperimentKind::Stability => {
            let o = run_stability(cfg)?;
            write(&out.join("variance_star.csv"), &o.star.report.to_csv())?;
            write(&out.join("variance_baseline.csv"), &o.baseline.report.to_csv())?;
            for (run, tag) in [(&o.star, "star"), (&o.baseline, "baseline")] {
                for (model, seed) in run.models.iter().zip(&run.report.seeds) {
                    write(
                        &out.join(format!("history_{tag}_seed{seed}.csv")),
                        &history_csv(&model.history),
                    )?;
                }
            }
            for (report, seed) in o.anisotropy.iter().zip(&o.star.report.seeds) {
                write(&out.join(format!("anisotropy_seed{seed}.csv")), &report.to_csv())?;
            }
            o.summary
        }
        ExperimentKind::Anisotropy => {
            let (train_set, test_set) = datasets(cfg)?;
            let trained = train(&train_set, &cfg.loss, &cfg.optimizer())?;
            let report = anisotropy_experiment(&trained.model, &test_set)?;
            write(&out.join("history.csv"), &history_csv(&trained.history))?;
            write(&out.join("anisotropy.csv"), &report.to_csv())?;
            let factor = report.ambiguous_mean_ratio / report.isotropic_mean_ratio;
            let values = BTreeMap::from([
                ("ambiguous_mean_ratio".into(), report.ambiguous_mean_ratio),
                ("isotropic_mean_ratio".into(), report.isotropic_mean_ratio),
                ("anisotropy_factor".into(), factor),
            ]);
            let claims = vec![Claim::new(
                "ambiguous_landmarks_more_anisotropic",
                report.ambiguous_mean_ratio > report.isotropic_mean_ratio,
                format!(
                    "mean λ1/λ2: {:.3} (ambiguous) vs {:.3} (isotropic)",
                    report.ambiguous_mean_ratio, report.isotropic_mean_ratio
                ),
            )];
            Summary::new(kind, cfg.seed, values, claims)
        }
        ExperimentKind::Restriction => {
            let (report, summary) = run_restriction(cfg)?;
            write(&out.join("history_value.csv"), &history_csv(&report.value_history))?;
            write(&out.join("history_none.csv"), &history_csv(&report.none_history))?;
            summary
        }
    };
    let text = to_json(&summary);
    write(&out.join("summary.json"), &text)?;
    Ok(Output {
        passed: summary.passed,
        text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let d: CliError = Error::DegenerateDistribution {
            denominator: 0.0,
            threshold: 1e-8,
        }
        .into();
        assert_eq!(d.exit_code(), 3);
        assert_eq!(CliError::from(Error::NonFiniteLoss { epoch: 2 }).exit_code(), 4);
        assert_eq!(CliError::from(Error::ZeroNormalizer(0.0)).exit_code(), 2);
        assert_eq!(Output { text: String::new(), passed: false }.exit_code(), 1);
    }

    #[test]
    fn relative_gap_cases() {
        assert_eq!(relative_gap(0.0, 0.0), 0.0);
        assert_eq!(relative_gap(1.0, 0.75), 0.25);
        assert_eq!(relative_gap(0.75, 1.0), 0.25);
    }
}
