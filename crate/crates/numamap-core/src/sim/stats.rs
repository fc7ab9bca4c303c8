//! Aggregation across repeats and comparison across algorithms: per-VM
//! mean performance, sample standard deviation, and the variability
//! ratio (std-dev over mean) the evaluation keys on.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::workload::{AnimalClass, VmId};

use super::{run_repeats, Algorithm, RunConfig, RunInputs, RunTrace, SimError, VmMeta};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VmStats {
    pub mean_p: f64,
    /// Sample standard deviation across repeats (zero for one repeat).
    pub stddev_p: f64,
    /// stddev / mean; only computed across at least two repeats.
    pub variability_ratio: Option<f64>,
}

/// Statistics of one experiment across its repeats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStats {
    pub algorithm: Algorithm,
    pub repeats: usize,
    pub per_vm: BTreeMap<VmId, VmStats>,
    pub vm_meta: BTreeMap<VmId, VmMeta>,
    /// Mean of the per-VM statistics, as a one-line summary.
    pub overall: VmStats,
}

/// Aggregates repeats of one experiment. Traces must share their
/// configuration modulo seed.
pub fn aggregate(traces: &[RunTrace]) -> Result<RunStats, SimError> {
    let first = traces.first().ok_or(SimError::NoTraces)?;
    for t in &traces[1..] {
        if !first.config.same_experiment(&t.config) {
            return Err(SimError::MismatchedConfigs(format!(
                "seed {} vs seed {}",
                first.config.seed, t.config.seed
            )));
        }
    }

    let mut per_vm = BTreeMap::new();
    let mut vm_meta = BTreeMap::new();
    for (vm, meta) in &first.summary.vm_meta {
        let mut values = Vec::with_capacity(traces.len());
        for t in traces {
            let Some(&p) = t.summary.mean_p.get(vm) else {
                return Err(SimError::MismatchedConfigs(format!(
                    "VM {vm} missing from a repeat (seed {})",
                    t.config.seed
                )));
            };
            values.push(p);
        }
        per_vm.insert(vm.clone(), vm_stats(&values));
        vm_meta.insert(vm.clone(), meta.clone());
    }

    let overall = {
        let means: Vec<f64> = per_vm.values().map(|s| s.mean_p).collect();
        let stddevs: Vec<f64> = per_vm.values().map(|s| s.stddev_p).collect();
        let ratios: Vec<f64> = per_vm
            .values()
            .filter_map(|s| s.variability_ratio)
            .collect();
        VmStats {
            mean_p: mean(&means),
            stddev_p: mean(&stddevs),
            variability_ratio: if ratios.is_empty() { None } else { Some(mean(&ratios)) },
        }
    };

    Ok(RunStats {
        algorithm: first.config.algorithm,
        repeats: traces.len(),
        per_vm,
        vm_meta,
        overall,
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
fn sample_stddev(xs: &[f64], mu: f64) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let ss: f64 = xs.iter().map(|x| (x - mu) * (x - mu)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

fn vm_stats(values: &[f64]) -> VmStats {
    let mu = mean(values);
    let sd = sample_stddev(values, mu);
    VmStats {
        mean_p: mu,
        stddev_p: sd,
        variability_ratio: if values.len() >= 2 { Some(sd / mu) } else { None },
    }
}

/// One line of the per-VM comparison report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub vm_id: VmId,
    pub vm_type: String,
    pub class: AnimalClass,
    pub algorithm: Algorithm,
    pub mean_p: f64,
    pub stddev_p: f64,
    pub variability_ratio: Option<f64>,
    /// mean p of this algorithm over mean p under vanilla, when a vanilla
    /// run is part of the comparison.
    pub rel_vs_vanilla: Option<f64>,
}

/// Aggregated factor per VM type or class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonGroupRow {
    pub group: String,
    pub algorithm: Algorithm,
    pub mean_p: f64,
    pub rel_vs_vanilla: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub by_type: Vec<ComparisonGroupRow>,
    pub by_class: Vec<ComparisonGroupRow>,
}

/// Runs each configuration (repeats included) and lines the algorithms
/// up per VM, per VM type, and per class. The configurations must differ
/// only in their algorithm; the first vanilla entry is the baseline for
/// relative factors.
pub fn compare(inputs: &RunInputs<'_>, cfgs: &[RunConfig]) -> Result<ComparisonReport, SimError> {
    if cfgs.len() < 2 {
        return Err(SimError::TooFewConfigs);
    }
    for c in &cfgs[1..] {
        if !cfgs[0].same_workload(c) {
            return Err(SimError::NotComparable(format!(
                "{} vs {}",
                cfgs[0].algorithm, c.algorithm
            )));
        }
    }

    let stats: Vec<RunStats> = cfgs
        .iter()
        .map(|cfg| aggregate(&run_repeats(inputs, cfg)))
        .collect::<Result<_, _>>()?;

    let baseline = stats
        .iter()
        .find(|s| s.algorithm == Algorithm::Vanilla)
        .map(|s| s.per_vm.clone());

    let mut rows = Vec::new();
    for s in &stats {
        for (vm, vs) in &s.per_vm {
            let meta = &s.vm_meta[vm];
            let rel = baseline
                .as_ref()
                .and_then(|b| b.get(vm))
                .map(|b| vs.mean_p / b.mean_p);
            rows.push(ComparisonRow {
                vm_id: vm.clone(),
                vm_type: meta.vm_type.clone(),
                class: meta.class,
                algorithm: s.algorithm,
                mean_p: vs.mean_p,
                stddev_p: vs.stddev_p,
                variability_ratio: vs.variability_ratio,
                rel_vs_vanilla: rel,
            });
        }
    }

    let by_type = group_rows(&rows, |r| r.vm_type.clone());
    let by_class = group_rows(&rows, |r| r.class.to_string());

    Ok(ComparisonReport {
        rows,
        by_type,
        by_class,
    })
}

fn group_rows(rows: &[ComparisonRow], key: impl Fn(&ComparisonRow) -> String) -> Vec<ComparisonGroupRow> {
    let mut acc: BTreeMap<(String, String), (Algorithm, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let e = acc
            .entry((key(r), r.algorithm.to_string()))
            .or_insert((r.algorithm, Vec::new(), Vec::new()));
        e.1.push(r.mean_p);
        if let Some(rel) = r.rel_vs_vanilla {
            e.2.push(rel);
        }
    }
    acc.into_iter()
        .map(|((group, _), (algorithm, means, rels))| ComparisonGroupRow {
            group,
            algorithm,
            mean_p: mean(&means),
            rel_vs_vanilla: if rels.is_empty() { None } else { Some(mean(&rels)) },
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV with one row per (VM, algorithm):
/// `vm_id,vm_type,class,algorithm,mean_p,stddev_p,variability_ratio,rel_vs_vanilla`.
pub fn to_csv(report: &ComparisonReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "vm_id",
        "vm_type",
        "class",
        "algorithm",
        "mean_p",
        "stddev_p",
        "variability_ratio",
        "rel_vs_vanilla",
    ])
    .expect("csv header");
    for r in &report.rows {
        w.write_record([
            r.vm_id.to_string(),
            r.vm_type.clone(),
            r.class.to_string(),
            r.algorithm.to_string(),
            format!("{:.6}", r.mean_p),
            format!("{:.6}", r.stddev_p),
            fmt_opt(r.variability_ratio),
            fmt_opt(r.rel_vs_vanilla),
        ])
        .expect("csv row");
    }
    String::from_utf8(w.into_inner().expect("csv flush")).expect("csv is utf-8")
}

/// Single-experiment stats in the same CSV shape (no relative column
/// values, since there is nothing to compare against).
pub fn stats_to_csv(stats: &RunStats) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "vm_id",
        "vm_type",
        "class",
        "algorithm",
        "mean_p",
        "stddev_p",
        "variability_ratio",
        "rel_vs_vanilla",
    ])
    .expect("csv header");
    for (vm, s) in &stats.per_vm {
        let meta = &stats.vm_meta[vm];
        w.write_record([
            vm.to_string(),
            meta.vm_type.clone(),
            meta.class.to_string(),
            stats.algorithm.to_string(),
            format!("{:.6}", s.mean_p),
            format!("{:.6}", s.stddev_p),
            fmt_opt(s.variability_ratio),
            String::new(),
        ])
        .expect("csv row");
    }
    String::from_utf8(w.into_inner().expect("csv flush")).expect("csv is utf-8")
}

/// Plain-text table of a single experiment.
pub fn render_stats_table(stats: &RunStats) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "algorithm: {}   repeats: {}\n",
        stats.algorithm, stats.repeats
    ));
    out.push_str(&format!(
        "{:<16} {:<8} {:<8} {:>10} {:>10} {:>12}\n",
        "vm", "type", "class", "mean_p", "stddev_p", "ratio"
    ));
    for (vm, s) in &stats.per_vm {
        let meta = &stats.vm_meta[vm];
        out.push_str(&format!(
            "{:<16} {:<8} {:<8} {:>10.4} {:>10.4} {:>12}\n",
            vm.to_string(),
            meta.vm_type,
            meta.class.to_string(),
            s.mean_p,
            s.stddev_p,
            fmt_opt_short(s.variability_ratio),
        ));
    }
    out.push_str(&format!(
        "{:<16} {:<8} {:<8} {:>10.4} {:>10.4} {:>12}\n",
        "(overall)",
        "",
        "",
        stats.overall.mean_p,
        stats.overall.stddev_p,
        fmt_opt_short(stats.overall.variability_ratio),
    ));
    out
}

/// Plain-text table of a comparison report.
pub fn render_comparison_table(report: &ComparisonReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:<8} {:<8} {:<9} {:>10} {:>10} {:>10} {:>12}\n",
        "vm", "type", "class", "algo", "mean_p", "stddev_p", "ratio", "vs_vanilla"
    ));
    for r in &report.rows {
        out.push_str(&format!(
            "{:<16} {:<8} {:<8} {:<9} {:>10.4} {:>10.4} {:>10} {:>12}\n",
            r.vm_id.to_string(),
            r.vm_type,
            r.class.to_string(),
            r.algorithm.to_string(),
            r.mean_p,
            r.stddev_p,
            fmt_opt_short(r.variability_ratio),
            fmt_opt_short(r.rel_vs_vanilla),
        ));
    }
    out.push_str("\nby VM type:\n");
    for g in &report.by_type {
        out.push_str(&format!(
            "{:<16} {:<9} {:>10.4} {:>12}\n",
            g.group,
            g.algorithm.to_string(),
            g.mean_p,
            fmt_opt_short(g.rel_vs_vanilla),
        ));
    }
    out.push_str("\nby class:\n");
    for g in &report.by_class {
        out.push_str(&format!(
            "{:<16} {:<9} {:>10.4} {:>12}\n",
            g.group,
            g.algorithm.to_string(),
            g.mean_p,
            fmt_opt_short(g.rel_vs_vanilla),
        ));
    }
    out
}

fn fmt_opt_short(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".to_string())
}
