//! Redundancy and token-budget statistics, plus their CSV/JSON reports.
//!
//! "Redundant" means "dropped by the configured selector". All reports are
//! descriptive token accounting: there is no task-success axis, since that
//! needs a live model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::rts::RtsModel;
use crate::selectors::SelectorConfig;
use crate::sequence::{Episode, TokenCounter};
use crate::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Stated in every emitted report.
pub const SUCCESS_RATE_NOTE: &str =
    "descriptive token accounting only; no success-rate axis (requires a live model)";

/// Sum with pairwise reduction over the sorted values, so the result does not
/// depend on input order.
fn stable_sum(values: &[f64]) -> f64 {
    fn pairwise(v: &[f64]) -> f64 {
        if v.len() <= 8 {
            return v.iter().sum();
        }
        let (a, b) = v.split_at(v.len() / 2);
        pairwise(a) + pairwise(b)
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    pairwise(&v)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        stable_sum(values) / values.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    /// Position of the trajectory in the measured corpus.
    pub trajectory: usize,
    /// 1-based index of the later image of the pair.
    pub step: usize,
    pub redundant_count: usize,
    pub total_patches: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RedundancyAggregate {
    pub n_trajectories: usize,
    pub n_pairs: usize,
    pub avg_steps_per_task: f64,
    pub avg_patches_per_image: f64,
    pub avg_redundant_per_image: f64,
    pub avg_redundant_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub schema_version: u32,
    pub selector: SelectorConfig,
    pub per_pair: Vec<PairRow>,
    pub aggregate: RedundancyAggregate,
}

fn pair_rows(
    idx: usize,
    episode: &Episode,
    selector: &SelectorConfig,
    model: Option<&RtsModel>,
) -> Result<Vec<PairRow>> {
    (2..=episode.len())
        .map(|t| {
            let mask = selector.select(&episode.pair(t), model)?;
            let n = mask.len();
            let redundant = mask.dropped_count();
            Ok(PairRow {
                trajectory: idx,
                step: t,
                redundant_count: redundant,
                total_patches: n,
                fraction: if n == 0 { 0.0 } else { redundant as f64 / n as f64 },
            })
        })
        .collect()
}

/// Redundancy of every consecutive pair of one trajectory.
pub fn measure_redundancy(
    episode: &Episode,
    selector: &SelectorConfig,
    model: Option<&RtsModel>,
) -> Result<RedundancyReport> {
    measure_corpus(std::slice::from_ref(episode), selector, model)
}

/// Redundancy over a corpus. Aggregates are means over all pairs.
pub fn measure_corpus(
    corpus: &[Episode],
    selector: &SelectorConfig,
    model: Option<&RtsModel>,
) -> Result<RedundancyReport> {
    selector.validate()?;
    let mut per_pair = Vec::new();
    for (i, ep) in corpus.iter().enumerate() {
        per_pair.extend(pair_rows(i, ep, selector, model)?);
    }
    let col = |f: fn(&PairRow) -> f64| per_pair.iter().map(f).collect::<Vec<_>>();
    let steps: Vec<f64> = corpus.iter().map(|e| e.len() as f64).collect();
    let aggregate = RedundancyAggregate {
        n_trajectories: corpus.len(),
        n_pairs: per_pair.len(),
        avg_steps_per_task: mean(&steps),
        avg_patches_per_image: mean(&col(|r| r.total_patches as f64)),
        avg_redundant_per_image: mean(&col(|r| r.redundant_count as f64)),
        avg_redundant_fraction: mean(&col(|r| r.fraction)),
    };
    Ok(RedundancyReport {
        schema_version: REPORT_SCHEMA_VERSION,
        selector: *selector,
        per_pair,
        aggregate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub history_k: usize,
    pub avg_tokens_per_step: f64,
    pub avg_visual_tokens: f64,
    pub avg_text_tokens: f64,
    pub avg_visual_fraction: f64,
    pub within_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub schema_version: u32,
    pub selector: SelectorConfig,
    pub budget: u64,
    /// Steps averaged per k: those with a full window for the largest k, so
    /// that every k is measured on the same steps and the same text.
    pub measured_steps: usize,
    pub per_k: Vec<BudgetRow>,
    /// Largest listed k whose average fits the budget; 0 if none does.
    pub max_images_within_budget: usize,
}

/// Token totals per step for several history lengths.
///
/// Only steps `t ≥ max(ks)` are averaged: each of them has a full window for
/// every k. Per-pair masks do not depend on the window, so they are computed
/// once per step and reused; the result equals summing
/// [`crate::sequence::token_totals`] over assembled windows.
pub fn budget_report(
    corpus: &[Episode],
    selector: &SelectorConfig,
    ks: &[usize],
    budget: u64,
    model: Option<&RtsModel>,
    counter: &dyn TokenCounter,
) -> Result<BudgetReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidConfig("ks must be nonempty and each k >= 1".into()));
    }
    selector.validate()?;
    let k_max = *ks.iter().max().expect("ks is nonempty");

    let mut visual: Vec<Vec<f64>> = vec![Vec::new(); ks.len()];
    let mut text: Vec<f64> = Vec::new();
    let mut fractions: Vec<Vec<f64>> = vec![Vec::new(); ks.len()];
    for ep in corpus {
        if ep.len() < k_max {
            continue;
        }
        // full[t] = patches of image t; kept[t] = retained against t - 1.
        let full: Vec<usize> = (1..=ep.len()).map(|t| ep.observation(t).grid.len()).collect();
        let mut kept = vec![0usize; ep.len() + 1];
        for t in 2..=ep.len() {
            kept[t] = selector.select(&ep.pair(t), model)?.retained_count();
        }
        let traj = &ep.trajectory;
        let mut text_prefix = counter.count(&traj.task);
        for t in 1..=ep.len() {
            text_prefix += counter.count(&traj.steps[t - 1].text);
            if t < k_max {
                continue;
            }
            text.push(text_prefix as f64);
            for (i, &k) in ks.iter().enumerate() {
                let first = t + 1 - k;
                let v = full[first - 1] + (first + 1..=t).map(|s| kept[s]).sum::<usize>();
                let total = v + text_prefix;
                visual[i].push(v as f64);
                fractions[i].push(if total == 0 { 0.0 } else { v as f64 / total as f64 });
            }
        }
    }

    let avg_text = mean(&text);
    let mut per_k: Vec<BudgetRow> = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let avg_visual = mean(&visual[i]);
            let avg_total = avg_visual + avg_text;
            BudgetRow {
                history_k: k,
                avg_tokens_per_step: avg_total,
                avg_visual_tokens: avg_visual,
                avg_text_tokens: avg_text,
                avg_visual_fraction: mean(&fractions[i]),
                within_budget: !text.is_empty() && avg_total <= budget as f64,
            }
        })
        .collect();
    per_k.sort_by_key(|r| r.history_k);
    per_k.dedup_by_key(|r| r.history_k);
    let max_images_within_budget = per_k
        .iter()
        .filter(|r| r.within_budget)
        .map(|r| r.history_k)
        .max()
        .unwrap_or(0);
    Ok(BudgetReport {
        schema_version: REPORT_SCHEMA_VERSION,
        selector: *selector,
        budget,
        measured_steps: text.len(),
        per_k,
        max_images_within_budget,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

/// Key/value pairs written into report headers (resolved config, seeds, ...).
pub type Provenance = Vec<(String, String)>;

/// Formats `x` with 6 significant digits, shortest form.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{}", if x == 0.0 { 0.0 } else { x });
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("scientific float round-trips");
    format!("{rounded}")
}

fn comment_header(kind: &str, selector: &SelectorConfig, provenance: &Provenance) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "# report: {kind}");
    let _ = writeln!(s, "# schema_version: {REPORT_SCHEMA_VERSION}");
    let _ = writeln!(s, "# selector: {}", serde_json::to_string(selector)?);
    for (k, v) in provenance {
        let _ = writeln!(s, "# {k}: {}", v.replace('\n', " "));
    }
    let _ = writeln!(s, "# note: {SUCCESS_RATE_NOTE}");
    Ok(s)
}

fn finish_csv(header: String, w: csv::Writer<Vec<u8>>) -> Result<String> {
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(header + &String::from_utf8(body).expect("csv output is utf-8"))
}

#[derive(Serialize)]
struct JsonEnvelope<'a, T> {
    report: &'a str,
    note: &'a str,
    provenance: std::collections::BTreeMap<&'a str, &'a str>,
    #[serde(flatten)]
    body: &'a T,
}

fn to_json<T: Serialize>(kind: &str, body: &T, provenance: &Provenance) -> Result<String> {
    let env = JsonEnvelope {
        report: kind,
        note: SUCCESS_RATE_NOTE,
        provenance: provenance.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect(),
        body,
    };
    Ok(serde_json::to_string_pretty(&env)? + "\n")
}

impl RedundancyReport {
    /// One row per pair, then a `mean` row when there are pairs.
    pub fn to_csv(&self, provenance: &Provenance) -> Result<String> {
        let mut header = comment_header("redundancy", &self.selector, provenance)?;
        let a = &self.aggregate;
        let _ = writeln!(
            header,
            "# aggregate: n_trajectories={} n_pairs={} avg_steps_per_task={}",
            a.n_trajectories,
            a.n_pairs,
            fmt_sig6(a.avg_steps_per_task)
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["row", "trajectory", "step", "redundant_count", "total_patches", "fraction"])?;
        for r in &self.per_pair {
            w.write_record([
                "pair".to_string(),
                r.trajectory.to_string(),
                r.step.to_string(),
                r.redundant_count.to_string(),
                r.total_patches.to_string(),
                fmt_sig6(r.fraction),
            ])?;
        }
        if !self.per_pair.is_empty() {
            w.write_record([
                "mean".to_string(),
                String::new(),
                String::new(),
                fmt_sig6(a.avg_redundant_per_image),
                fmt_sig6(a.avg_patches_per_image),
                fmt_sig6(a.avg_redundant_fraction),
            ])?;
        }
        finish_csv(header, w)
    }

    pub fn to_json(&self, provenance: &Provenance) -> Result<String> {
        to_json("redundancy", self, provenance)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn emit(&self, format: ReportFormat, provenance: &Provenance) -> Result<String> {
        match format {
            ReportFormat::Csv => self.to_csv(provenance),
            ReportFormat::Json => self.to_json(provenance),
        }
    }
}

impl BudgetReport {
    pub fn to_csv(&self, provenance: &Provenance) -> Result<String> {
        let mut header = comment_header("budget", &self.selector, provenance)?;
        let _ = writeln!(
            header,
            "# budget: {} measured_steps: {}",
            self.budget, self.measured_steps
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "history_k",
            "avg_tokens_per_step",
            "avg_visual_tokens",
            "avg_text_tokens",
            "avg_visual_fraction",
            "within_budget",
            "max_images_within_budget",
        ])?;
        for r in &self.per_k {
            w.write_record([
                r.history_k.to_string(),
                fmt_sig6(r.avg_tokens_per_step),
                fmt_sig6(r.avg_visual_tokens),
                fmt_sig6(r.avg_text_tokens),
                fmt_sig6(r.avg_visual_fraction),
                r.within_budget.to_string(),
                self.max_images_within_budget.to_string(),
            ])?;
        }
        finish_csv(header, w)
    }

    pub fn to_json(&self, provenance: &Provenance) -> Result<String> {
        to_json("budget", self, provenance)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn emit(&self, format: ReportFormat, provenance: &Provenance) -> Result<String> {
        match format {
            ReportFormat::Csv => self.to_csv(provenance),
            ReportFormat::Json => self.to_json(provenance),
        }
    }
}

/// Long-format CSV for plotting: one row per (k, selector, metric).
pub fn plot_csv(reports: &[BudgetReport]) -> Result<String> {
    let mut header = String::new();
    let _ = writeln!(header, "# report: budget-plot");
    let _ = writeln!(header, "# schema_version: {REPORT_SCHEMA_VERSION}");
    let _ = writeln!(header, "# note: {SUCCESS_RATE_NOTE}");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["history_k", "selector", "metric", "value"])?;
    for rep in reports {
        for r in &rep.per_k {
            for (metric, value) in [
                ("avg_tokens_per_step", r.avg_tokens_per_step),
                ("avg_visual_tokens", r.avg_visual_tokens),
                ("avg_visual_fraction", r.avg_visual_fraction),
            ] {
                w.write_record([
                    r.history_k.to_string(),
                    rep.selector.kind().to_string(),
                    metric.to_string(),
                    fmt_sig6(value),
                ])?;
            }
        }
    }
    finish_csv(header, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureSpec;
    use crate::sequence::{assemble, build_window, token_totals, WhitespaceCounter};
    use crate::synthgen::{generate, RegionStyle, SynthSpec};
    use proptest::prelude::*;

    fn synth(change: f64, steps: usize, seed: u64) -> Episode {
        let spec = SynthSpec {
            width: 80,
            height: 80,
            patch_size: 10,
            n_steps: steps,
            change_fraction: change,
            region_style: RegionStyle::RectBlocks,
            seed,
            text_words: 3,
            ..SynthSpec::default()
        };
        generate(&spec).unwrap().episode(&FeatureSpec::PixelStats).unwrap()
    }

    const PIXEL0: SelectorConfig = SelectorConfig::Pixel { tolerance: 0 };

    #[test]
    fn identical_frames_are_fully_redundant() {
        let ep = synth(0.0, 5, 1);
        let rep = measure_redundancy(&ep, &PIXEL0, None).unwrap();
        assert_eq!(rep.per_pair.len(), 4);
        assert!(rep.per_pair.iter().all(|r| r.fraction == 1.0));
        assert_eq!(rep.aggregate.avg_redundant_fraction, 1.0);
        assert_eq!(rep.aggregate.avg_steps_per_task, 5.0);
    }

    #[test]
    fn quarter_change_gives_three_quarters_redundant() {
        let corpus: Vec<_> = (0..4).map(|s| synth(0.25, 6, s)).collect();
        let rep = measure_corpus(&corpus, &PIXEL0, None).unwrap();
        assert_eq!(rep.aggregate.avg_redundant_fraction, 0.75);
        assert_eq!(rep.aggregate.avg_redundant_per_image, 48.0);
        assert_eq!(rep.aggregate.n_pairs, 20);
    }

    #[test]
    fn single_step_has_no_pairs() {
        let rep = measure_redundancy(&synth(0.5, 1, 2), &PIXEL0, None).unwrap();
        assert!(rep.per_pair.is_empty());
        assert_eq!(rep.aggregate.avg_redundant_fraction, 0.0);
        let csv = rep.to_csv(&vec![]).unwrap();
        let data: Vec<_> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data, ["row,trajectory,step,redundant_count,total_patches,fraction"]);
    }

    #[test]
    fn csv_rows_and_header() {
        let rep = measure_redundancy(&synth(0.3, 4, 3), &PIXEL0, None).unwrap();
        let csv = rep.to_csv(&vec![("seed".into(), "3".into())]).unwrap();
        assert!(csv.contains("# seed: 3"));
        assert!(csv.contains(SUCCESS_RATE_NOTE));
        assert!(csv.contains("# schema_version: 1"));
        let data: Vec<_> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
        assert_eq!(data.len(), 4);
        assert!(data[3].starts_with("mean,"));
    }

    #[test]
    fn json_round_trip() {
        let corpus: Vec<_> = (0..3).map(|s| synth(0.37, 5, s)).collect();
        let rep = measure_corpus(&corpus, &SelectorConfig::Cosine { threshold: 0.99 }, None).unwrap();
        let back = RedundancyReport::from_json(&rep.to_json(&vec![]).unwrap()).unwrap();
        assert_eq!(back.per_pair.len(), rep.per_pair.len());
        for (a, b) in back.per_pair.iter().zip(&rep.per_pair) {
            assert!((a.fraction - b.fraction).abs() <= 1e-9);
        }
        assert!((back.aggregate.avg_redundant_fraction - rep.aggregate.avg_redundant_fraction).abs() <= 1e-9);

        let b = budget_report(&corpus, &PIXEL0, &[1, 3], 1000, None, &WhitespaceCounter).unwrap();
        let back = BudgetReport::from_json(&b.to_json(&vec![]).unwrap()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(1556.0), "1556");
        assert_eq!(fmt_sig6(0.562123456), "0.562123");
        assert_eq!(fmt_sig6(2.0 / 3.0), "0.666667");
        assert_eq!(fmt_sig6(1234567.0), "1234570");
    }

    #[test]
    fn budget_zero_fits_nothing() {
        let corpus = vec![synth(0.5, 6, 4)];
        for sel in [SelectorConfig::NoDrop, PIXEL0] {
            let r = budget_report(&corpus, &sel, &[1, 2, 3], 0, None, &WhitespaceCounter).unwrap();
            assert_eq!(r.max_images_within_budget, 0);
        }
    }

    #[test]
    fn no_drop_is_linear() {
        // No text: each image costs 64 tokens.
        let mut ep = synth(0.5, 8, 5);
        ep.trajectory.task.clear();
        for s in &mut ep.trajectory.steps {
            s.text.clear();
        }
        let ks: Vec<usize> = (1..=8).collect();
        for budget in [63u64, 64, 200, 320, 511, 512, 10_000] {
            let r = budget_report(std::slice::from_ref(&ep), &SelectorConfig::NoDrop, &ks, budget, None, &WhitespaceCounter)
                .unwrap();
            assert_eq!(r.max_images_within_budget, ((budget / 64) as usize).min(8), "budget {budget}");
        }
    }

    #[test]
    fn matches_assembled_windows() {
        let corpus: Vec<_> = (0..2).map(|s| synth(0.4, 7, s)).collect();
        let sel = SelectorConfig::Random { drop_fraction: 0.3, seed: 9 };
        let ks = [1, 2, 4];
        let r = budget_report(&corpus, &sel, &ks, 500, None, &WhitespaceCounter).unwrap();
        for (i, &k) in ks.iter().enumerate() {
            let mut totals = Vec::new();
            for ep in &corpus {
                for t in 4..=ep.len() {
                    let w = build_window(&ep.trajectory, t, k).unwrap();
                    let seq = assemble(ep, &w, &sel, None, &WhitespaceCounter).unwrap();
                    totals.push(token_totals(&seq).total as f64);
                }
            }
            let expect = totals.iter().sum::<f64>() / totals.len() as f64;
            assert!((r.per_k[i].avg_tokens_per_step - expect).abs() < 1e-9);
        }
        assert_eq!(r.measured_steps, 8);
    }

    #[test]
    fn short_trajectories_are_skipped() {
        let corpus = vec![synth(0.4, 2, 1)];
        let r = budget_report(&corpus, &PIXEL0, &[3], 10_000, None, &WhitespaceCounter).unwrap();
        assert_eq!(r.measured_steps, 0);
        assert_eq!(r.max_images_within_budget, 0);
        assert!(budget_report(&corpus, &PIXEL0, &[], 1, None, &WhitespaceCounter).is_err());
        assert!(budget_report(&corpus, &PIXEL0, &[0], 1, None, &WhitespaceCounter).is_err());
    }

    #[test]
    fn plot_csv_is_long_format() {
        let corpus = vec![synth(0.4, 5, 1)];
        let reps: Vec<_> = [SelectorConfig::NoDrop, PIXEL0]
            .iter()
            .map(|s| budget_report(&corpus, s, &[1, 2], 1000, None, &WhitespaceCounter).unwrap())
            .collect();
        let csv = plot_csv(&reps).unwrap();
        let data: Vec<_> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data[0], "history_k,selector,metric,value");
        assert_eq!(data.len(), 1 + 2 * 2 * 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fraction_is_one_minus_retained(change in 0.0f64..1.0, seed in 0u64..1000, tol in 0u8..40) {
            let ep = synth(change, 4, seed);
            let sel = SelectorConfig::Pixel { tolerance: tol };
            let rep = measure_redundancy(&ep, &sel, None).unwrap();
            for r in &rep.per_pair {
                let kept = sel.select(&ep.pair(r.step), None).unwrap().retained_count();
                prop_assert_eq!(r.fraction, 1.0 - kept as f64 / r.total_patches as f64);
                prop_assert!((0.0..=1.0).contains(&r.fraction));
            }
        }

        #[test]
        fn no_drop_is_upper_envelope(change in 0.0f64..1.0, seed in 0u64..1000, thr in 0.5f64..1.0) {
            let corpus = vec![synth(change, 6, seed), synth(change, 5, seed + 1)];
            let ks = [1, 2, 3, 5];
            let nd = budget_report(&corpus, &SelectorConfig::NoDrop, &ks, 0, None, &WhitespaceCounter).unwrap();
            for sel in [PIXEL0, SelectorConfig::Cosine { threshold: thr }, SelectorConfig::Spiral { drop_fraction: 0.5 }] {
                let r = budget_report(&corpus, &sel, &ks, 0, None, &WhitespaceCounter).unwrap();
                for (a, b) in nd.per_k.iter().zip(&r.per_k) {
                    prop_assert!(a.avg_tokens_per_step >= b.avg_tokens_per_step);
                }
                prop_assert!(r.per_k.windows(2).all(|w| w[0].avg_tokens_per_step <= w[1].avg_tokens_per_step));
            }
        }

        #[test]
        fn aggregates_ignore_trajectory_order(seeds in proptest::collection::vec(0u64..500, 2..5), change in 0.0f64..1.0) {
            let corpus: Vec<_> = seeds.iter().map(|&s| synth(change, 3, s)).collect();
            let mut rev = corpus.clone();
            rev.reverse();
            let a = measure_corpus(&corpus, &PIXEL0, None).unwrap().aggregate;
            let b = measure_corpus(&rev, &PIXEL0, None).unwrap().aggregate;
            prop_assert_eq!(a, b);
        }
    }
}
