use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use super::pipeline::{EvalReport, RunRecord, RunStatus};
use super::{write_atomic, HarnessError, Result};
use crate::discretize::Treatment;
use crate::metrics::{distribution_diff, ActionDistribution, Ci, CATEGORY_LABELS};
use crate::nnkit::CellKind;
use crate::reward::RewardSpec;
use crate::DOSE_BINS;

/// Writes one JSON record per line.
pub fn write_results(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).map_err(|e| HarnessError::Io(e.to_string()))?);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_results(path: &Path) -> Result<Vec<RunRecord>> {
    let f = std::fs::File::open(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| HarnessError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), f)
}

fn tr_name(t: Treatment) -> &'static str {
    match t {
        Treatment::IvFluid => "iv_fluid",
        Treatment::Vasopressor => "vasopressor",
    }
}

struct Csv(csv::Writer<Vec<u8>>);

impl Csv {
    fn new(header: &[&str]) -> Self {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).expect("in-memory write");
        Csv(w)
    }

    fn row<S: AsRef<str>>(&mut self, fields: &[S]) {
        self.0.write_record(fields.iter().map(|s| s.as_ref())).expect("in-memory write");
    }

    fn finish(self) -> String {
        String::from_utf8(self.0.into_inner().expect("flush")).expect("utf8")
    }
}

fn ci_fields(c: &Ci) -> [String; 3] {
    [f(c.point), f(c.lo), f(c.hi)]
}

fn selected_dist(e: &EvalReport) -> &ActionDistribution {
    &e.restarts[e.selected].distribution
}

fn cell_files(e: &EvalReport) -> Vec<(&'static str, String)> {
    let mut out = vec![
        ("heatmap_policy.csv", selected_dist(e).heatmap_csv()),
        ("heatmap_physician.csv", e.physician.heatmap_csv()),
    ];
    let mut m = Csv::new(&["treatment", "category", "policy", "policy_lo", "policy_hi", "physician", "physician_lo", "physician_hi", "diff_pp", "diff_lo", "diff_hi"]);
    for r in &e.marginals {
        let mut row = vec![tr_name(r.treatment).to_string(), r.category.clone()];
        row.extend(ci_fields(&r.policy));
        row.extend(ci_fields(&r.physician));
        row.extend(ci_fields(&r.difference));
        m.row(&row);
    }
    out.push(("marginals.csv", m.finish()));
    let mut rr = Csv::new(&["treatment", "category", "rr", "lo", "hi", "bootstrap_mean"]);
    for r in &e.relative_risks {
        let mut row = vec![tr_name(r.treatment).to_string(), r.category.clone()];
        match &r.rr {
            Some(c) => row.extend(ci_fields(c)),
            None => row.extend(["undefined".to_string(), "undefined".into(), "undefined".into()]),
        }
        row.push(opt(r.bootstrap_mean));
        rr.row(&row);
    }
    out.push(("relative_risk.csv", rr.finish()));
    let mut ir = Csv::new(&["treatment", "arm", "rate", "lo", "hi"]);
    for r in &e.initiation {
        for (arm, c) in [("policy", &r.policy), ("physician", &r.physician)] {
            let mut row = vec![tr_name(r.treatment).to_string(), arm.to_string()];
            match c {
                Some(c) => row.extend(ci_fields(c)),
                None => row.extend(["undefined".to_string(), "undefined".into(), "undefined".into()]),
            }
            ir.row(&row);
        }
    }
    out.push(("initiation.csv", ir.finish()));
    let mut rs = Csv::new(&["seed", "mean_max_q", "wdr", "wdr_ess", "mean_iv_bin", "mean_vaso_bin", "final_loss", "selected"]);
    for (i, r) in e.restarts.iter().enumerate() {
        rs.row(&[
            r.seed.to_string(),
            f(r.mean_max_q),
            f(r.wdr),
            f(r.wdr_ess),
            f(r.mean_iv_bin),
            f(r.mean_vaso_bin),
            f(r.final_loss),
            (i == e.selected).to_string(),
        ]);
    }
    out.push(("restarts.csv", rs.finish()));
    let mut sg = Csv::new(&["bucket", "arm", "person_times", "no_vaso", "vaso_ratio"]);
    for g in &e.subgroups {
        for (arm, d) in [("policy", &g.policy), ("physician", &g.physician)] {
            let (n, share) = d
                .as_ref()
                .map_or(("0".to_string(), "undefined".to_string()), |d| (d.total.to_string(), f(d.marginal(Treatment::Vasopressor)[0])));
            sg.row(&[g.label.clone(), arm.to_string(), n, share, opt(g.vaso_ratio)]);
        }
    }
    out.push(("subgroups.csv", sg.finish()));
    let mut cv = Csv::new(&["iv_bin", "vp_bin", "cv"]);
    for (a, v) in e.cv.iter().enumerate() {
        cv.row(&[(a / DOSE_BINS).to_string(), (a % DOSE_BINS).to_string(), opt(*v)]);
    }
    out.push(("cv.csv", cv.finish()));
    out
}

fn md_marginals(s: &mut String, e: &EvalReport) {
    for t in Treatment::ALL {
        let _ = writeln!(s, "\n{} distribution (policy vs physician, 95% CI):\n", tr_name(t));
        let _ = writeln!(s, "| category | policy | CI | physician | CI | difference (pp) | CI |\n|---|---|---|---|---|---|---|");
        for r in e.marginals.iter().filter(|r| r.treatment == t) {
            let _ = writeln!(
                s,
                "| {} | {:.4} | [{:.4}, {:.4}] | {:.4} | [{:.4}, {:.4}] | {:.2} | [{:.2}, {:.2}] |",
                r.category,
                r.policy.point,
                r.policy.lo,
                r.policy.hi,
                r.physician.point,
                r.physician.lo,
                r.physician.hi,
                r.difference.point,
                r.difference.lo,
                r.difference.hi
            );
        }
    }
}

fn md_cell(s: &mut String, r: &RunRecord) {
    let _ = writeln!(s, "\n## {}\n\nconfig hash `{}`", r.label, &r.config_hash[..16]);
    let e = match (&r.status, &r.eval) {
        (RunStatus::Failed { stage, error }, _) => {
            let _ = writeln!(s, "\n**missing: failed at stage `{stage}`**: {error}");
            return;
        }
        (RunStatus::Ok, None) => {
            let _ = writeln!(s, "\n**missing: not evaluated**");
            return;
        }
        (RunStatus::Ok, Some(e)) => e,
    };
    let _ = writeln!(
        s,
        "\n- test patients: {} ({} person-times)\n- embedding validation MSE: {:.4} -> {:.4}\n- mortality validation AUC: {}\n- clamped reward probabilities: {}\n- behavior top-1 accuracy: {:.4}\n- selection: {:?}, seed {}\n- restart Q spread: {:.4}",
        e.n_test_patients,
        e.n_test_bins,
        e.embed_val_mse_initial,
        e.embed_val_mse_best,
        opt(e.mortality_val_auc),
        e.rewards_clamped,
        e.behavior.top1_accuracy,
        e.selection_method,
        e.restarts[e.selected].seed,
        e.q_spread
    );
    let _ = writeln!(s, "\n| seed | mean max Q | WDR | ESS | mean IV bin | mean vaso bin |\n|---|---|---|---|---|---|");
    for x in &e.restarts {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.1} | {:.3} | {:.3} |",
            x.seed, x.mean_max_q, x.wdr, x.wdr_ess, x.mean_iv_bin, x.mean_vaso_bin
        );
    }
    md_marginals(s, e);
    let _ = writeln!(s, "\nRelative risk (policy / physician):\n\n| treatment | category | RR | CI |\n|---|---|---|---|");
    for x in &e.relative_risks {
        match &x.rr {
            Some(c) => {
                let _ = writeln!(s, "| {} | {} | {:.3} | [{:.3}, {:.3}] |", tr_name(x.treatment), x.category, c.point, c.lo, c.hi);
            }
            None => {
                let _ = writeln!(s, "| {} | {} | undefined | |", tr_name(x.treatment), x.category);
            }
        }
    }
    let _ = writeln!(s, "\nInitiation rate:\n\n| treatment | policy | physician |\n|---|---|---|");
    for x in &e.initiation {
        let show = |c: &Option<Ci>| c.map_or("undefined".to_string(), |c| format!("{:.4} [{:.4}, {:.4}]", c.point, c.lo, c.hi));
        let _ = writeln!(s, "| {} | {} | {} |", tr_name(x.treatment), show(&x.policy), show(&x.physician));
    }
    let _ = writeln!(s, "\nSOFA subgroups:\n\n| bucket | person-times | policy any-vaso / physician |\n|---|---|---|");
    for g in &e.subgroups {
        let n = g.physician.as_ref().map_or(0, |d| d.total);
        let _ = writeln!(s, "| {} | {} | {} |", g.label, n, if n == 0 { "empty".to_string() } else { opt(g.vaso_ratio) });
    }
    if let Some(gt) = &e.ground_truth {
        let _ = writeln!(
            s,
            "\nGround truth: policy {:.4} ± {:.4} (WDR {:.4} ± {:.4}); physician {:.4} ± {:.4} (logged return {:.4})",
            gt.policy.mean, gt.policy.se, gt.policy_wdr, gt.policy_wdr_se, gt.physician.mean, gt.physician.se, gt.physician_mean_return
        );
    }
}

fn ok_evals(records: &[RunRecord]) -> Vec<(&RunRecord, &EvalReport)> {
    records
        .iter()
        .filter_map(|r| match (&r.status, &r.eval) {
            (RunStatus::Ok, Some(e)) => Some((r, e)),
            _ => None,
        })
        .collect()
}

/// Key identifying a cell up to one axis.
fn key_without(r: &RunRecord, axis: &str) -> String {
    let c = &r.config;
    format!(
        "{}|{}|{:?}|{}",
        if axis == "bin" { "*".into() } else { c.bin_hours.to_string() },
        if axis == "hist" { "*".into() } else { c.include_history.to_string() },
        if axis == "emb" { None } else { Some(c.embedding) },
        if axis == "reward" { "*".into() } else { c.reward.label() }
    )
}

fn pairs<'a>(
    evals: &[(&'a RunRecord, &'a EvalReport)],
    axis: &str,
    left: impl Fn(&RunRecord) -> bool,
) -> Vec<((&'a RunRecord, &'a EvalReport), (&'a RunRecord, &'a EvalReport))> {
    let mut groups: BTreeMap<String, (Option<usize>, Option<usize>)> = BTreeMap::new();
    for (i, (r, _)) in evals.iter().enumerate() {
        let g = groups.entry(key_without(r, axis)).or_default();
        if left(r) {
            g.0 = Some(i);
        } else {
            g.1 = Some(i);
        }
    }
    groups
        .into_values()
        .filter_map(|(a, b)| Some((evals[a?], evals[b?])))
        .collect()
}

/// Writes `report.md` plus per-cell and cross-cell CSVs under `dir` and
/// returns the written paths. Output depends only on `records`.
pub fn write_report(records: &[RunRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(HarnessError::Config("no records to report".into()));
    }
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    let mut md = String::from("# Sensitivity report\n");
    let _ = writeln!(md, "\n| cell | status | selected seed |\n|---|---|---|");
    for r in records {
        let (status, sel) = match (&r.status, &r.eval) {
            (RunStatus::Ok, Some(e)) => ("ok".to_string(), e.restarts[e.selected].seed.to_string()),
            (RunStatus::Ok, None) => ("partial".to_string(), "-".to_string()),
            (RunStatus::Failed { stage, .. }, _) => (format!("missing ({stage})"), "-".to_string()),
        };
        let _ = writeln!(md, "| {} | {} | {} |", r.label, status, sel);
    }
    for r in records {
        md_cell(&mut md, r);
        if let (RunStatus::Ok, Some(e)) = (&r.status, &r.eval) {
            for (name, body) in cell_files(e) {
                files.push((PathBuf::from("cells").join(&r.label).join(name), body));
            }
        }
    }
    let evals = ok_evals(records);

    let hist = pairs(&evals, "hist", |r| r.config.include_history);
    if !hist.is_empty() {
        let _ = writeln!(md, "\n## Treatment history\n\nMean recommended vasopressor bin per restart (with history / without).\n\n| cell | seed | with | without |\n|---|---|---|---|");
        let mut c = Csv::new(&["cell", "seed", "with_history", "without_history"]);
        for ((r, a), (_, b)) in &hist {
            for (x, y) in a.restarts.iter().zip(&b.restarts) {
                let _ = writeln!(md, "| {} | {} | {:.4} | {:.4} |", key_without(r, "hist"), x.seed, x.mean_vaso_bin, y.mean_vaso_bin);
                c.row(&[key_without(r, "hist"), x.seed.to_string(), f(x.mean_vaso_bin), f(y.mean_vaso_bin)]);
            }
        }
        files.push(("history.csv".into(), c.finish()));
    }

    let bins = pairs(&evals, "bin", |r| r.config.bin_hours == 4.0);
    if !bins.is_empty() {
        let _ = writeln!(md, "\n## Bin width\n\nSelected-policy marginal differences, 4 h minus 1 h, in percentage points.\n\n| cell | treatment | {} |\n|---|---|---|---|---|---|---|", CATEGORY_LABELS.join(" | "));
        let mut c = Csv::new(&["cell", "treatment", "category", "diff_pp"]);
        for ((r, a), (_, b)) in &bins {
            for t in Treatment::ALL {
                let d = distribution_diff(&selected_dist(a).marginal(t), &selected_dist(b).marginal(t));
                let _ = writeln!(
                    md,
                    "| {} | {} | {} |",
                    key_without(r, "bin"),
                    tr_name(t),
                    d.iter().map(|v| format!("{v:+.2}")).collect::<Vec<_>>().join(" | ")
                );
                for (k, v) in d.iter().enumerate() {
                    c.row(&[key_without(r, "bin"), tr_name(t).to_string(), CATEGORY_LABELS[k].to_string(), f(*v)]);
                }
            }
        }
        files.push(("diff_4h_1h.csv".into(), c.finish()));
    }

    let long: Vec<_> = evals.iter().filter(|(r, _)| matches!(r.config.reward, RewardSpec::LongTerm { .. })).collect();
    if !long.is_empty() {
        let _ = writeln!(md, "\n## Long-term reward scale\n\n| cell | C | no vasopressor | no IV fluid |\n|---|---|---|---|");
        let mut c = Csv::new(&["cell", "c", "vaso_no_action", "iv_no_action"]);
        for (r, e) in &long {
            let RewardSpec::LongTerm { c: cc } = r.config.reward else { continue };
            let d = selected_dist(e);
            let (v0, i0) = (d.marginal(Treatment::Vasopressor)[0], d.marginal(Treatment::IvFluid)[0]);
            let _ = writeln!(md, "| {} | {} | {:.4} | {:.4} |", r.label, cc, v0, i0);
            c.row(&[r.label.clone(), cc.to_string(), f(v0), f(i0)]);
        }
        files.push(("c_sweep.csv".into(), c.finish()));
    }

    let emb = pairs(&evals, "emb", |r| r.config.embedding == CellKind::Lstm);
    if !emb.is_empty() {
        let _ = writeln!(md, "\n## Embedding architecture\n\nSelected-policy vasopressor marginals (LSTM / GRU).\n\n| cell | category | LSTM | GRU |\n|---|---|---|---|");
        let mut c = Csv::new(&["cell", "treatment", "category", "lstm", "gru"]);
        for ((r, a), (_, b)) in &emb {
            for t in Treatment::ALL {
                let (ma, mb) = (selected_dist(a).marginal(t), selected_dist(b).marginal(t));
                for k in 0..DOSE_BINS {
                    if t == Treatment::Vasopressor {
                        let _ = writeln!(md, "| {} | {} | {:.4} | {:.4} |", key_without(r, "emb"), CATEGORY_LABELS[k], ma[k], mb[k]);
                    }
                    c.row(&[key_without(r, "emb"), tr_name(t).to_string(), CATEGORY_LABELS[k].to_string(), f(ma[k]), f(mb[k])]);
                }
            }
        }
        files.push(("embedding.csv".into(), c.finish()));
    }

    let _ = writeln!(md, "\n## Restart variation\n\n| cell | reward | Q spread | max c_v | cells with c_v > 0.5 |\n|---|---|---|---|---|");
    let mut cvc = Csv::new(&["cell", "reward_kind", "q_spread", "max_cv", "cells_cv_gt_half"]);
    let mut kinds = std::collections::BTreeSet::new();
    for (r, e) in &evals {
        let defined: Vec<f64> = e.cv.iter().flatten().copied().collect();
        let max = defined.iter().cloned().fold(f64::NAN, f64::max);
        let over = defined.iter().filter(|&&v| v > 0.5).count();
        let kind = match r.config.reward {
            RewardSpec::ShortTerm => "short_term",
            RewardSpec::LongTerm { .. } => "long_term",
        };
        kinds.insert(kind);
        let _ = writeln!(md, "| {} | {} | {:.4} | {:.4} | {} |", r.label, kind, e.q_spread, max, over);
        cvc.row(&[r.label.clone(), kind.to_string(), f(e.q_spread), f(max), over.to_string()]);
    }
    if kinds.len() > 1 {
        let _ = writeln!(md, "\nc_v comparison across reward kinds (mean of per-cell max c_v):\n");
        for kind in &kinds {
            let v: Vec<f64> = evals
                .iter()
                .filter(|(r, _)| matches!((kind, r.config.reward), (&"short_term", RewardSpec::ShortTerm) | (&"long_term", RewardSpec::LongTerm { .. })))
                .map(|(_, e)| e.cv.iter().flatten().cloned().fold(f64::NAN, f64::max))
                .collect();
            let _ = writeln!(md, "- {kind}: {:.4}", crate::numeric::mean(&v));
        }
    }
    files.push(("restart_cv.csv".into(), cvc.finish()));

    let gts: Vec<_> = evals.iter().filter(|(_, e)| e.ground_truth.is_some()).collect();
    if !gts.is_empty() {
        let _ = writeln!(md, "\n## Policy values\n\n| cell | WDR | SE | ground truth | SE | physician | SE |\n|---|---|---|---|---|---|---|");
        let mut c = Csv::new(&["cell", "wdr", "wdr_se", "ground_truth", "ground_truth_se", "physician", "physician_se"]);
        for (r, e) in gts {
            let g = e.ground_truth.as_ref().expect("filtered");
            let _ = writeln!(
                md,
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
                r.label, g.policy_wdr, g.policy_wdr_se, g.policy.mean, g.policy.se, g.physician.mean, g.physician.se
            );
            c.row(&[r.label.clone(), f(g.policy_wdr), f(g.policy_wdr_se), f(g.policy.mean), f(g.policy.se), f(g.physician.mean), f(g.physician.se)]);
        }
        files.push(("values.csv".into(), c.finish()));
    }

    files.push(("report.md".into(), md));
    let mut written = Vec::new();
    for (rel, body) in files {
        let p = dir.join(rel);
        write_atomic(&p, body.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}
