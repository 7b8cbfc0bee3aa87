//! Comparison table (markdown) and gender-gap bar charts (SVG), emitted as
//! deterministic text so re-rendering the same inputs is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mbl_core::eval::{ProbeKind, ReportRow};
use mbl_core::models::Archetype;

use crate::config::ExperimentConfig;
use crate::{LabError, Result};

const SETTING_ORDER: [&str; 4] = ["raw", "text_only", "vision_only", "both"];

#[derive(Debug, Clone, Copy, Default)]
struct CellAgg {
    ra_m: f64,
    ra_f: f64,
    ra_avg: f64,
    gg: f64,
    n_m: usize,
    n_f: usize,
    rows: usize,
    inconsistent: bool,
}

impl CellAgg {
    fn push(&mut self, row: &ReportRow) {
        self.ra_m += row.cell.ra_m;
        self.ra_f += row.cell.ra_f;
        self.ra_avg += row.cell.ra_avg;
        self.gg += row.cell.gg;
        self.n_m += row.cell.n_m;
        self.n_f += row.cell.n_f;
        self.rows += 1;
        // Stored values are serialized with 4 decimals; anything beyond the
        // worst-case rounding slack means the row's own arithmetic is off.
        let mean = (row.cell.ra_m + row.cell.ra_f) / 2.0;
        let gap = (row.cell.ra_m - row.cell.ra_f).abs();
        if (mean - row.cell.ra_avg).abs() > 1.5e-4 || (gap - row.cell.gg).abs() > 1.5e-4 {
            self.inconsistent = true;
        }
    }

    fn mean(&self, v: f64) -> f64 {
        v / self.rows.max(1) as f64
    }
}

/// Order settings by the configured order, unknown names last.
fn setting_rank(setting: &str, order: &[String]) -> usize {
    order
        .iter()
        .position(|s| s == setting)
        .unwrap_or(usize::MAX)
}

/// Group rows into (method, setting) -> per-kind aggregate.
type Grouped = BTreeMap<String, BTreeMap<String, [CellAgg; 2]>>;

fn group(rows: &[ReportRow]) -> Grouped {
    let mut grouped: Grouped = BTreeMap::new();
    for row in rows {
        let entry = grouped
            .entry(row.method.clone())
            .or_default()
            .entry(row.setting.clone())
            .or_default();
        let slot = match row.kind {
            ProbeKind::OO => 0,
            ProbeKind::OP => 1,
        };
        entry[slot].push(row);
    }
    grouped
}

/// Markdown comparison table: one block per method, one body row per
/// setting, resolution accuracies and gaps for OO and OP side by side.
pub fn render_table(
    rows: &[ReportRow],
    method_order: &[String],
    setting_order: &[String],
    archetype: Option<Archetype>,
) -> String {
    let grouped = group(rows);
    let mut out = String::new();
    out.push_str("# Modality-targeted debiasing results\n");
    let mut any_inconsistent = false;
    let mut extrapolated = false;

    let mut methods: Vec<&String> = grouped.keys().collect();
    methods.sort_by_key(|m| {
        method_order
            .iter()
            .position(|x| x == *m)
            .unwrap_or(usize::MAX)
    });

    for method in methods {
        let settings_map = &grouped[method];
        out.push_str(&format!("\n## {method}\n\n"));
        out.push_str(
            "| Setting | RA_m (OO) | RA_f (OO) | RA_avg (OO) | GG (OO) | RA_m (OP) | RA_f (OP) | RA_avg (OP) | GG (OP) |\n",
        );
        out.push_str(
            "|---------|-----------|-----------|-------------|---------|-----------|-----------|-------------|---------|\n",
        );
        let mut settings: Vec<&String> = settings_map.keys().collect();
        settings.sort_by_key(|s| setting_rank(s, setting_order));
        for setting in settings {
            let cells = &settings_map[setting];
            let mut line = format!("| {setting} |");
            for agg in cells {
                if agg.rows == 0 {
                    line.push_str(" - | - | - | - |");
                    continue;
                }
                line.push_str(&format!(
                    " {:.4} | {:.4} | {:.4} | {:.4} |",
                    agg.mean(agg.ra_m),
                    agg.mean(agg.ra_f),
                    agg.mean(agg.ra_avg),
                    agg.mean(agg.gg)
                ));
                if agg.inconsistent {
                    any_inconsistent = true;
                }
            }
            out.push_str(&line);
            out.push('\n');
        }
        if archetype == Some(Archetype::CaptionScorer) && method == "task_vector" {
            extrapolated = true;
        }
    }

    if any_inconsistent || extrapolated {
        out.push('\n');
    }
    if any_inconsistent {
        out.push_str(
            "Note: at least one source row's stored RA_avg/GG disagrees with \
             recomputation from its RA_m/RA_f; the formulas here are exact, the \
             flagged values come from the input rows.\n",
        );
    }
    if extrapolated {
        out.push_str(
            "Note: task-vector results for the caption-scorer archetype are an \
             extrapolation beyond the reported method/model pairings.\n",
        );
    }
    out
}

/// Grouped bar chart of the gender gap for one (kind, method): one bar per
/// setting, heights proportional to GG on a fixed [0, 1] axis.
pub fn render_gg_chart(
    kind: ProbeKind,
    method: &str,
    entries: &[(String, f64)],
) -> String {
    const WIDTH: f64 = 640.0;
    const HEIGHT: f64 = 360.0;
    const LEFT: f64 = 56.0;
    const BOTTOM: f64 = 44.0;
    const TOP: f64 = 36.0;
    const RIGHT: f64 = 24.0;
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"22\" font-family=\"monospace\" font-size=\"15\" text-anchor=\"middle\">gender gap: {} ({})</text>\n",
        LEFT + plot_w / 2.0,
        method,
        kind.as_str()
    ));
    // Axis lines and y ticks.
    svg.push_str(&format!(
        "<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        TOP + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{LEFT}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        TOP + plot_h,
        LEFT + plot_w,
        TOP + plot_h
    ));
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let y = TOP + plot_h * (1.0 - frac);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{LEFT}\" y2=\"{y:.2}\" stroke=\"black\"/>\n",
            LEFT - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"end\">{frac:.2}</text>\n",
            LEFT - 9.0,
            y + 4.0
        ));
    }

    let n = entries.len().max(1) as f64;
    let slot = plot_w / n;
    let bar_w = slot * 0.6;
    for (i, (setting, gg)) in entries.iter().enumerate() {
        let gg = gg.clamp(0.0, 1.0);
        let bar_h = gg * plot_h;
        let x = LEFT + slot * i as f64 + (slot - bar_w) / 2.0;
        let y = TOP + plot_h - bar_h;
        svg.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bar_w:.2}\" height=\"{bar_h:.2}\" fill=\"#4878a8\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">{:.4}</text>\n",
            x + bar_w / 2.0,
            y - 5.0,
            gg
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">{setting}</text>\n",
            x + bar_w / 2.0,
            TOP + plot_h + 18.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Render the table and one chart per (kind, method) into a directory.
pub fn render_into(rows: &[ReportRow], config: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| LabError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let method_order: Vec<String> = std::iter::once("raw".to_string())
        .chain(config.methods.iter().map(|m| m.as_str().to_string()))
        .collect();
    let setting_order: Vec<String> = SETTING_ORDER.iter().map(|s| s.to_string()).collect();
    let table = render_table(rows, &method_order, &setting_order, Some(config.archetype));
    let path = dir.join("table.md");
    fs::write(&path, table).map_err(|source| LabError::Io { path, source })?;

    let grouped = group(rows);
    for (method, settings_map) in &grouped {
        for (slot, kind) in [(0usize, ProbeKind::OO), (1usize, ProbeKind::OP)] {
            let mut entries: Vec<(String, f64)> = settings_map
                .iter()
                .filter(|(_, cells)| cells[slot].rows > 0)
                .map(|(setting, cells)| (setting.clone(), cells[slot].mean(cells[slot].gg)))
                .collect();
            entries.sort_by_key(|(s, _)| setting_rank(s, &setting_order));
            if entries.is_empty() {
                continue;
            }
            let svg = render_gg_chart(kind, method, &entries);
            let path = dir.join(format!("gg_{}_{method}.svg", kind.as_str().to_lowercase()));
            fs::write(&path, svg).map_err(|source| LabError::Io { path, source })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mbl_core::eval::MetricsCell;

    fn row(setting: &str, method: &str, kind: ProbeKind, cm: usize, cf: usize) -> ReportRow {
        ReportRow {
            setting: setting.to_string(),
            method: method.to_string(),
            kind,
            cell: MetricsCell::from_counts(cm, 100, cf, 100).unwrap(),
        }
    }

    #[test]
    fn single_row_renders_one_body_row_and_one_bar() {
        let rows = vec![row("raw", "raw", ProbeKind::OO, 91, 97)];
        let table = render_table(&rows, &["raw".to_string()], &["raw".to_string()], None);
        let body_rows = table.lines().filter(|l| l.starts_with("| raw |")).count();
        assert_eq!(body_rows, 1);
        assert!(table.contains("0.9400"));
        assert!(table.contains("0.0600"));

        let svg = render_gg_chart(ProbeKind::OO, "raw", &[("raw".to_string(), 0.06)]);
        assert_eq!(svg.matches("<rect x=").count(), 1);
    }

    #[test]
    fn bar_heights_are_proportional_and_ordered() {
        let entries = vec![
            ("raw".to_string(), 0.06),
            ("text_only".to_string(), 0.00),
            ("vision_only".to_string(), 0.05),
        ];
        let svg = render_gg_chart(ProbeKind::OO, "cda", &entries);
        let heights: Vec<f64> = svg
            .lines()
            .filter(|l| l.starts_with("<rect x="))
            .map(|l| {
                let key = "height=\"";
                let start = l.find(key).unwrap() + key.len();
                let end = l[start..].find('"').unwrap() + start;
                l[start..end].parse().unwrap()
            })
            .collect();
        assert_eq!(heights.len(), 3);
        let plot_h = 360.0 - 36.0 - 44.0;
        assert!((heights[0] - 0.06 * plot_h).abs() < 0.01);
        assert_eq!(heights[1], 0.0);
        assert!((heights[2] - 0.05 * plot_h).abs() < 0.01);
        // Bars appear in the given order left to right.
        let xs: Vec<f64> = svg
            .lines()
            .filter(|l| l.starts_with("<rect x="))
            .map(|l| {
                let start = l.find("x=\"").unwrap() + 3;
                let end = l[start..].find('"').unwrap() + start;
                l[start..end].parse().unwrap()
            })
            .collect();
        assert!(xs[0] < xs[1] && xs[1] < xs[2]);
    }

    #[test]
    fn rerendering_is_bitwise_identical() {
        let entries = vec![("raw".to_string(), 0.30), ("both".to_string(), 0.07)];
        let a = render_gg_chart(ProbeKind::OP, "cda", &entries);
        let b = render_gg_chart(ProbeKind::OP, "cda", &entries);
        assert_eq!(a, b);
    }

    #[test]
    fn inconsistent_source_rows_are_footnoted() {
        // Published numbers whose mean/gap do not match their own ra_m/ra_f.
        let mut r = row("raw", "raw", ProbeKind::OP, 41, 65);
        r.cell.ra_avg = 0.56;
        r.cell.gg = 0.30;
        let table = render_table(
            &[r],
            &["raw".to_string()],
            &["raw".to_string()],
            None,
        );
        assert!(table.contains("disagrees with"));

        let clean = row("raw", "raw", ProbeKind::OP, 41, 65);
        let table = render_table(
            &[clean],
            &["raw".to_string()],
            &["raw".to_string()],
            None,
        );
        assert!(!table.contains("disagrees with"));
    }
}
