//! CSV tables and JSON reports.
//!
//! Reports carry no timestamps or host details, so reruns with the same
//! config and seed are byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::protocols::{AreaPoint, ConfusionMatrix, CvOutcome, ImagesPoint, SourceRow};
use crate::wild::AblationCell;

/// A protocol result together with the exact config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport<C, R> {
    pub protocol: String,
    /// Input files, when the protocol ran on ingested data instead of a synthetic benchmark.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    pub config: C,
    pub results: R,
}

impl<C: Serialize, R: Serialize> ExperimentReport<C, R> {
    pub fn new(protocol: &str, config: C, results: R) -> Self {
        Self {
            protocol: protocol.to_string(),
            inputs: Vec::new(),
            config,
            results,
        }
    }

    pub fn with_inputs(mut self, inputs: Vec<String>) -> Self {
        self.inputs = inputs;
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_json())
    }
}

fn num(x: f64) -> String {
    x.to_string()
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), num)
}

fn table<W: Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sources_csv<W: Write>(rows: &[SourceRow], out: W) -> csv::Result<()> {
    table(
        out,
        &["source", "purify", "accuracy_mean", "accuracy_std"],
        rows.iter()
            .map(|r| vec![r.source.clone(), r.purify.to_string(), num(r.accuracy_mean), num(r.accuracy_std)]),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub purify: bool,
    pub outcome: CvOutcome,
}

pub fn write_filter_csv<W: Write>(rows: &[FilterRow], out: W) -> csv::Result<()> {
    table(
        out,
        &[
            "purify",
            "accuracy_mean",
            "accuracy_std",
            "accuracy_all_mean",
            "mean_test_excluded",
            "mean_classes_removed_fraction",
            "mean_images_removed_fraction",
        ],
        rows.iter().map(|r| {
            let runs = &r.outcome.runs;
            let n = runs.len() as f64;
            let avg = |f: &dyn Fn(&crate::protocols::CvRun) -> f64| runs.iter().map(f).sum::<f64>() / n;
            vec![
                r.purify.to_string(),
                num(r.outcome.accuracy_mean),
                num(r.outcome.accuracy_std),
                num(r.outcome.accuracy_all_mean),
                num(avg(&|x| x.n_test_excluded as f64)),
                num(avg(&|x| x.purify_stats.as_ref().map_or(0.0, |s| s.classes_removed_fraction))),
                num(avg(&|x| x.purify_stats.as_ref().map_or(0.0, |s| s.images_removed_fraction))),
            ]
        }),
    )
}

pub fn write_images_csv<W: Write>(points: &[ImagesPoint], out: W) -> csv::Result<()> {
    table(
        out,
        &["m", "accuracy_mean", "accuracy_std", "mean_train_size"],
        points.iter().map(|p| {
            vec![
                p.m.to_string(),
                num(p.accuracy_mean),
                num(p.accuracy_std),
                num(p.mean_train_size),
            ]
        }),
    )
}

pub fn write_area_csv<W: Write>(points: &[AreaPoint], out: W) -> csv::Result<()> {
    table(
        out,
        &[
            "region_size_m",
            "regions_total",
            "regions_evaluated",
            "regions_skipped_empty",
            "mean_sites_per_region",
            "accuracy_mean",
            "accuracy_std",
        ],
        points.iter().map(|p| {
            vec![
                num(p.region_size_m),
                p.regions_total.to_string(),
                p.regions_evaluated.to_string(),
                p.regions_skipped_empty.len().to_string(),
                num(p.mean_sites_per_region),
                num(p.accuracy_mean),
                num(p.accuracy_std),
            ]
        }),
    )
}

/// One row per true category: the predicted-category distribution, the top
/// three predicted categories and the same-category correctness rate.
pub fn write_confusion_csv<W: Write>(m: &ConfusionMatrix, out: W) -> csv::Result<()> {
    let mut header: Vec<String> = vec!["category".into(), "n_queries".into()];
    header.extend(m.categories.iter().map(|c| format!("p_{c}")));
    for k in 1..=3 {
        header.push(format!("top{k}"));
        header.push(format!("top{k}_p"));
    }
    header.push("p_correct_same_category".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    table(
        out,
        &header,
        m.rows.iter().map(|r| {
            let mut row = vec![r.category.clone(), r.n_queries.to_string()];
            row.extend(r.probabilities.iter().map(|&p| num(p)));
            for k in 0..3 {
                match r.top3.get(k) {
                    Some((c, p)) => row.extend([c.clone(), num(*p)]),
                    None => row.extend([String::new(), String::new()]),
                }
            }
            row.push(opt(r.p_correct_given_same_category));
            row
        }),
    )
}

pub fn write_context_csv<W: Write>(cells: &[AblationCell], out: W) -> csv::Result<()> {
    table(
        out,
        &[
            "location",
            "orientation",
            "attention",
            "n_queries",
            "correct",
            "no_candidate",
            "accuracy",
            "mean_candidates",
        ],
        cells.iter().map(|c| {
            vec![
                c.location.to_string(),
                c.orientation.to_string(),
                c.attention.to_string(),
                c.n_queries.to_string(),
                c.correct.to_string(),
                c.no_candidate.to_string(),
                opt(c.accuracy),
                num(c.mean_candidates),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::CategoryRow;

    #[test]
    fn not_applicable_cells_print_na() {
        let cell = AblationCell {
            location: true,
            orientation: false,
            attention: false,
            n_queries: 3,
            correct: 0,
            no_candidate: 3,
            accuracy: None,
            mean_candidates: 0.0,
        };
        let mut buf = Vec::new();
        write_context_csv(&[cell], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "location,orientation,attention,n_queries,correct,no_candidate,accuracy,mean_candidates\n\
             true,false,false,3,0,3,n/a,0\n"
        );
    }

    #[test]
    fn confusion_header_lists_categories_and_ranks() {
        let m = ConfusionMatrix {
            categories: vec!["a".into(), "b".into()],
            rows: vec![CategoryRow {
                category: "a".into(),
                n_queries: 4,
                probabilities: vec![0.75, 0.25],
                top3: vec![("a".into(), 0.75), ("b".into(), 0.25)],
                p_correct_given_same_category: Some(1.0),
            }],
        };
        let mut buf = Vec::new();
        write_confusion_csv(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "category,n_queries,p_a,p_b,top1,top1_p,top2,top2_p,top3,top3_p,p_correct_same_category"
        );
        assert_eq!(lines.next().unwrap(), "a,4,0.75,0.25,a,0.75,b,0.25,,,1");
    }

    #[test]
    fn report_round_trips_its_config() {
        let r = ExperimentReport::new("demo", crate::protocols::CvConfig::default(), vec![1.5f64]);
        let back: ExperimentReport<crate::protocols::CvConfig, Vec<f64>> = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
