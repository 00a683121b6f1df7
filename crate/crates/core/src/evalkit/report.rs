use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::collab::Method;
use crate::error::{Error, Result};
use crate::nn::param::hex_string;
use crate::training::checkpoint::write_atomic;
use crate::training::{AblationFlags, ExperimentConfig};

pub const REPORT_SCHEMA: &str = "commonspace-metrics/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    /// Participating agents joined by `+`; the first listed is not special.
    pub setting: String,
    pub method: Method,
    pub sigma: f64,
    pub ap_loose: f64,
    pub ap_strict: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweep {
    pub setting: String,
    pub method: Method,
    pub sigmas: Vec<f64>,
    pub ap_loose: Vec<f64>,
    pub ap_strict: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainGap {
    pub agent: String,
    /// `KL(P || U_m)`.
    pub kl_common: f64,
    /// `KL(protocol native || U_m)`.
    pub kl_protocol: f64,
}

/// One training setting of the ablation grid, over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub label: String,
    pub seeds: Vec<u64>,
    pub ap_loose: Vec<f64>,
    pub ap_strict: Vec<f64>,
}

impl AblationRow {
    pub fn mean_loose(&self) -> f64 {
        mean(&self.ap_loose)
    }

    pub fn mean_strict(&self) -> f64 {
        mean(&self.ap_strict)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    /// Short digest of the config hash and seed.
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub ablation: String,
    pub entries: Vec<ApEntry>,
    pub domain_gaps: Vec<DomainGap>,
    pub noise_sweeps: Vec<NoiseSweep>,
    pub ablations: Vec<AblationRow>,
}

impl MetricsReport {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let config_hash = cfg.hash();
        let digest = Sha256::digest(format!("{config_hash}:{}", cfg.seed).as_bytes());
        Self {
            schema: REPORT_SCHEMA.to_string(),
            run_id: hex_string(&digest)[..12].to_string(),
            config_hash,
            seed: cfg.seed,
            ablation: cfg.ablation.label(),
            entries: Vec::new(),
            domain_gaps: Vec::new(),
            noise_sweeps: Vec::new(),
            ablations: Vec::new(),
        }
    }

    pub fn entry(&self, setting: &str, method: Method) -> Option<&ApEntry> {
        self.entries.iter().find(|e| e.setting == setting && e.method == method)
    }

    pub fn sweep(&self, setting: &str, method: Method) -> Option<&NoiseSweep> {
        self.noise_sweeps.iter().find(|s| s.setting == setting && s.method == method)
    }

    /// Mean relative reduction of KL achieved by the negotiated space.
    pub fn mean_gap_ratio(&self) -> Option<f64> {
        if self.domain_gaps.is_empty() {
            return None;
        }
        let common = mean(&self.domain_gaps.iter().map(|g| g.kl_common).collect::<Vec<_>>());
        let protocol = mean(&self.domain_gaps.iter().map(|g| g.kl_protocol).collect::<Vec<_>>());
        Some(common / protocol)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Everything [`emit_report`] writes to `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema: String,
    pub reports: Vec<MetricsReport>,
    /// Groups of report indices that share a config hash.
    pub replicates: Vec<Vec<usize>>,
}

fn replicate_groups(reports: &[MetricsReport]) -> Vec<Vec<usize>> {
    let mut by_hash: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in reports.iter().enumerate() {
        by_hash.entry(&r.config_hash).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = by_hash.into_values().filter(|g| g.len() > 1).collect();
    groups.sort();
    groups
}

/// Writes `metrics.json`, `report.md` and SVG plots into `out_dir`.
pub fn emit_report(reports: &[MetricsReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Invalid("no reports to emit".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let bundle = ReportBundle { schema: REPORT_SCHEMA.to_string(), reports: reports.to_vec(), replicates: replicate_groups(reports) };
    let mut written = Vec::new();
    let json = out_dir.join("metrics.json");
    write_atomic(&json, serde_json::to_string_pretty(&bundle)?.as_bytes())?;
    written.push(json);
    let md = out_dir.join("report.md");
    write_atomic(&md, render_markdown(&bundle).as_bytes())?;
    written.push(md);
    for (k, r) in reports.iter().enumerate() {
        if !r.noise_sweeps.is_empty() {
            let p = out_dir.join(format!("noise_{k}_{}.svg", r.run_id));
            write_atomic(&p, noise_plot(r).as_bytes())?;
            written.push(p);
        }
        if !r.domain_gaps.is_empty() {
            let p = out_dir.join(format!("domain_gap_{k}_{}.svg", r.run_id));
            write_atomic(&p, gap_plot(r).as_bytes())?;
            written.push(p);
        }
        if !r.ablations.is_empty() {
            let p = out_dir.join(format!("ablation_{k}_{}.svg", r.run_id));
            write_atomic(&p, ablation_plot(r).as_bytes())?;
            written.push(p);
        }
    }
    Ok(written)
}

pub fn read_bundle(path: &Path) -> Result<ReportBundle> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bundle: ReportBundle = serde_json::from_str(&text)?;
    if bundle.schema != REPORT_SCHEMA {
        return Err(Error::Invalid(format!("unsupported report schema {}", bundle.schema)));
    }
    Ok(bundle)
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        ""
    }
}

pub fn render_markdown(bundle: &ReportBundle) -> String {
    let mut s = String::from("# Metrics\n");
    for (k, r) in bundle.reports.iter().enumerate() {
        let _ = writeln!(s, "\n## Run {} (`{}`)\n", k, r.run_id);
        let _ = writeln!(s, "- config: `{}`\n- seed: {}\n- training setting: {}", &r.config_hash[..16.min(r.config_hash.len())], r.seed, r.ablation);
        if let Some(g) = bundle.replicates.iter().find(|g| g.contains(&k)) {
            let others: Vec<String> = g.iter().filter(|&&i| i != k).map(|i| i.to_string()).collect();
            let _ = writeln!(s, "- replicate of run(s) {}", others.join(", "));
        }
        if !r.entries.is_empty() {
            s.push_str("\n### Collaboration\n\n| Agents | Sharing | AP@loose | AP@strict |\n|---|---|---|---|\n");
            for e in &r.entries {
                let _ = writeln!(s, "| {} | {} | {:.4} | {:.4} |", e.setting, e.method.name(), e.ap_loose, e.ap_strict);
            }
        }
        if !r.domain_gaps.is_empty() {
            s.push_str("\n### Domain gap\n\n| Agent | KL(common ‖ local) | KL(protocol ‖ local) | Ratio |\n|---|---|---|---|\n");
            for g in &r.domain_gaps {
                let _ = writeln!(s, "| {} | {:.4} | {:.4} | {:.3} |", g.agent, g.kl_common, g.kl_protocol, g.kl_common / g.kl_protocol);
            }
        }
        if !r.noise_sweeps.is_empty() {
            let sigmas = &r.noise_sweeps[0].sigmas;
            s.push_str("\n### Pose noise (AP@loose)\n\n| Agents | Sharing |");
            for sg in sigmas {
                let _ = write!(s, " σ={sg} |");
            }
            s.push_str("\n|---|---|");
            s.push_str(&"---|".repeat(sigmas.len()));
            s.push('\n');
            for w in &r.noise_sweeps {
                let _ = write!(s, "| {} | {} |", w.setting, w.method.name());
                for v in &w.ap_loose {
                    let _ = write!(s, " {v:.4} |");
                }
                s.push('\n');
            }
        }
        if !r.ablations.is_empty() {
            s.push_str("\n### Training setting\n\n| Negotiator | dis | stru | pragma | Local prompt | Seeds | AP@loose | AP@strict |\n");
            s.push_str("|---|---|---|---|---|---|---|---|\n");
            for a in &r.ablations {
                let f = a.flags;
                let _ = writeln!(
                    s,
                    "| {} | ✓ | {} | {} | {} | {} | {:.4} | {:.4} |",
                    mark(f.negotiator),
                    mark(f.structural),
                    mark(f.pragmatic),
                    mark(f.local_prompt),
                    a.seeds.len(),
                    a.mean_loose(),
                    a.mean_strict()
                );
            }
        }
    }
    s
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn svg_frame(title: &str, y_max: f64) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n",
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    );
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = H - PAD - (H - 2.0 * PAD) * k as f64 / 4.0;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>", PAD - 4.0, y + 4.0);
    }
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn noise_plot(r: &MetricsReport) -> String {
    let x_max = r.noise_sweeps.iter().flat_map(|w| w.sigmas.iter().copied()).fold(0.0, f64::max).max(1e-9);
    let mut s = svg_frame("AP@loose vs pose noise", 1.0);
    let px = |x: f64| PAD + (W - 2.0 * PAD) * x / x_max;
    let py = |y: f64| H - PAD - (H - 2.0 * PAD) * y.clamp(0.0, 1.0);
    for (k, w) in r.noise_sweeps.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = w.sigmas.iter().zip(&w.ap_loose).map(|(&x, &y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        for (&x, &y) in w.sigmas.iter().zip(&w.ap_loose) {
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", px(x), py(y));
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{} ({})</text>",
            W - PAD - 120.0,
            PAD + 14.0 * k as f64,
            escape(&w.setting),
            w.method.name()
        );
    }
    for sg in r.noise_sweeps[0].sigmas.iter() {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{sg}</text>", px(*sg), H - PAD + 14.0);
    }
    s.push_str("</svg>\n");
    s
}

fn bars(title: &str, groups: &[(String, Vec<f64>)], legend: &[&str]) -> String {
    let y_max = groups.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite()).fold(0.0, f64::max).max(1e-9);
    let mut s = svg_frame(title, y_max);
    let slot = (W - 2.0 * PAD) / groups.len().max(1) as f64;
    let per = groups.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(1) as f64;
    let bw = slot * 0.8 / per;
    for (g, (label, vals)) in groups.iter().enumerate() {
        let x0 = PAD + slot * g as f64 + slot * 0.1;
        for (k, v) in vals.iter().enumerate() {
            let h = (H - 2.0 * PAD) * (v / y_max).clamp(0.0, 1.0);
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                x0 + bw * k as f64,
                H - PAD - h,
                bw,
                h,
                COLORS[k % COLORS.len()]
            );
        }
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>", x0 + slot * 0.4, H - PAD + 14.0, escape(label));
    }
    for (k, name) in legend.iter().enumerate() {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{}\">{}</text>", W - PAD - 140.0, PAD + 14.0 * k as f64, COLORS[k], escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn gap_plot(r: &MetricsReport) -> String {
    let groups: Vec<(String, Vec<f64>)> = r.domain_gaps.iter().map(|g| (g.agent.clone(), vec![g.kl_common, g.kl_protocol])).collect();
    bars("KL divergence to local features", &groups, &["common", "protocol"])
}

fn ablation_plot(r: &MetricsReport) -> String {
    let groups: Vec<(String, Vec<f64>)> = r.ablations.iter().map(|a| (a.label.clone(), vec![a.mean_loose(), a.mean_strict()])).collect();
    bars("Training-setting ablation", &groups, &["AP@loose", "AP@strict"])
}
