use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bearing_core::bearingnet::Toggles;
use bearing_core::evalmetrics::NavigationSummary;
use clap::Args;
use serde::{Deserialize, Serialize};

use super::eval::EvalMetrics;
use super::navigate::NavMetrics;
use super::{read_json, write_json};
use crate::config::RunConfig;
use crate::error::{require, CliError, CliResult};

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Output directory of `bearing eval`.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Output directory of `bearing navigate`.
    #[arg(long)]
    nav: Option<PathBuf>,
    /// Directory holding one `bearing eval` output per ablation variant, in
    /// subdirectories full, no-gluf, no-rce, no-psg and no-ca.
    #[arg(long)]
    ablation: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub gluf: bool,
    pub rce: bool,
    pub psg: bool,
    pub ca: bool,
    pub recall_at_1: f64,
    pub lsr15: f64,
    pub hsr15: f64,
    pub mle: f64,
    pub medle: f64,
    pub mhe: f64,
    pub medhe: f64,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub localization: Option<EvalMetrics>,
    pub navigation: Option<NavMetrics>,
    pub ablation: Option<Vec<AblationRow>>,
}

fn ablation_rows(dir: &Path) -> CliResult<Vec<AblationRow>> {
    Toggles::ablation_grid()
        .into_iter()
        .map(|(name, toggles)| {
            let sub = dir.join(name);
            let m: EvalMetrics = read_json(&sub.join("metrics.json"), &format!("{name} metrics"), "bearing eval")?;
            let cfg_path = sub.join("config.toml");
            require(&cfg_path, &format!("{name} config"), "bearing eval")?;
            let cfg = RunConfig::load(&cfg_path)?;
            if cfg.model.toggles != toggles {
                return Err(CliError::Usage(format!(
                    "{} was evaluated with toggles {:?}, expected {:?}",
                    sub.display(),
                    cfg.model.toggles,
                    toggles
                )));
            }
            let s = m.summary;
            Ok(AblationRow {
                variant: name.into(),
                gluf: toggles.use_gluf,
                rce: toggles.use_rce,
                psg: toggles.use_psg,
                ca: toggles.use_ca,
                recall_at_1: s.recall_at_1,
                lsr15: s.lsr15,
                hsr15: s.hsr15,
                mle: s.mle,
                medle: s.medle,
                mhe: s.mhe,
                medhe: s.medhe,
            })
        })
        .collect()
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        ""
    }
}

/// Markdown rendering; depends only on `r`.
pub fn render_markdown(r: &Report) -> String {
    let mut md = String::from("# Results\n");
    if r.localization.is_some() || r.navigation.is_some() {
        md.push_str("\n## Localization and navigation\n\n");
        md.push_str("| Recall@1 (%) | LSR@15 (%) | HSR@15 (%) | MLE (m) | MedLE (m) | MHE (deg) | MedHE (deg) | SR@20 (%) | SPL | NE (m) |\n");
        md.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        let loc = match &r.localization {
            Some(m) => {
                let s = &m.summary;
                format!(
                    "| {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} ",
                    s.recall_at_1, s.lsr15, s.hsr15, s.mle, s.medle, s.mhe, s.medhe
                )
            }
            None => "| - | - | - | - | - | - | - ".into(),
        };
        let nav = match &r.navigation {
            Some(NavMetrics { overall: NavigationSummary { sr20, spl, ne, .. }, .. }) => {
                format!("| {sr20:.2} | {spl:.4} | {ne:.2} |\n")
            }
            None => "| - | - | - |\n".into(),
        };
        md.push_str(&loc);
        md.push_str(&nav);
        if let Some(m) = &r.localization {
            let _ = writeln!(
                md,
                "\nLocalization: {} {} samples, center-predictor MLE {:.2} m.",
                m.summary.count, m.split, m.center_baseline_mle
            );
        }
        if let Some(n) = &r.navigation {
            let _ = writeln!(md, "\nNavigation: {} episodes, {:?} estimator.", n.overall.episodes, n.estimator);
            md.push_str("\n| Route | City | Length (m) | SR@20 (%) | SPL | NE (m) |\n|---|---|---|---|---|---|\n");
            for rt in &n.routes {
                let _ = writeln!(
                    md,
                    "| {} | {} | {:.1} | {:.2} | {:.4} | {:.2} |",
                    rt.route_id, rt.city_seed, rt.length_m, rt.metrics.sr20, rt.metrics.spl, rt.metrics.ne
                );
            }
        }
    }
    if let Some(rows) = &r.ablation {
        md.push_str("\n## Ablation\n\n");
        md.push_str("| Variant | GLUF | RCE | PSG | CA | Recall@1 (%) | LSR@15 (%) | HSR@15 (%) | MLE (m) | MedLE (m) | MHE (deg) | MedHE (deg) |\n");
        md.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|\n");
        for a in rows {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
                a.variant,
                mark(a.gluf),
                mark(a.rce),
                mark(a.psg),
                mark(a.ca),
                a.recall_at_1,
                a.lsr15,
                a.hsr15,
                a.mle,
                a.medle,
                a.mhe,
                a.medhe
            );
        }
    }
    md
}

pub fn run(cfg: RunConfig, a: ReportArgs) -> CliResult<()> {
    if a.eval.is_none() && a.nav.is_none() && a.ablation.is_none() {
        return Err(CliError::Usage("pass at least one of --eval, --nav or --ablation".into()));
    }
    let localization = a
        .eval
        .as_ref()
        .map(|d| read_json::<EvalMetrics>(&d.join("metrics.json"), "evaluation metrics", "bearing eval"))
        .transpose()?;
    let navigation = a
        .nav
        .as_ref()
        .map(|d| read_json::<NavMetrics>(&d.join("nav_metrics.json"), "navigation metrics", "bearing navigate"))
        .transpose()?;
    let ablation = a.ablation.as_deref().map(ablation_rows).transpose()?;
    let report = Report { localization, navigation, ablation };
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    std::fs::write(a.out.join("report.md"), render_markdown(&report))?;
    cfg.write(&a.out)?;
    eprintln!("wrote {}", a.out.join("report.md").display());
    Ok(())
}
