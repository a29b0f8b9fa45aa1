//! Routing traces, switch analysis, and the text rendering of both.
//!
//! A trace records, for every token position, the routing decision of every
//! adapter site, plus the token's dominant adapter: the adapter with the
//! greatest summed weight across all sites. The switch report aggregates a
//! trace over labelled segments: per-segment dominance and how many tokens
//! past each segment boundary the dominant adapter takes to follow.

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One site's routing for one token position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRouting {
    pub block: usize,
    pub site: String,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// One token position in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTrace {
    pub step: usize,
    pub token: usize,
    pub per_site: Vec<SiteRouting>,
    /// Adapter with the greatest summed weight across sites.
    pub dominant: usize,
}

/// Full trace of a generation or evaluation run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingTrace {
    pub tokens: Vec<TokenTrace>,
    pub adapter_names: Vec<String>,
}

/// Dominant adapter: argmax over adapters of the weight summed across all
/// sites; ties break toward the lowest adapter id.
pub fn dominant_adapter(per_site: &[SiteRouting], n_adapters: usize) -> usize {
    let mut sums = vec![0.0f64; n_adapters];
    for site in per_site {
        for (&idx, &w) in site.indices.iter().zip(&site.weights) {
            sums[idx] += w;
        }
    }
    crate::tensor::topk_slice(&sums, 1).map_or(0, |v| v[0])
}

impl RoutingTrace {
    /// Mean Shannon entropy (nats) of the per-site weight vectors; grows
    /// with routing temperature.
    pub fn mean_weight_entropy(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for tok in &self.tokens {
            for site in &tok.per_site {
                total += site
                    .weights
                    .iter()
                    .filter(|&&w| w > 0.0)
                    .map(|&w| -w * w.ln())
                    .sum::<f64>();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    pub fn dominant_sequence(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.dominant).collect()
    }

    /// Serialize as JSON lines: one object per token position with fields
    /// {step, token, per_site: [{block, site, indices, weights}], dominant}.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(
                &serde_json::to_string(tok)
                    .map_err(|e| crate::error::Error::Format(e.to_string()))?,
            );
            out.push('\n');
        }
        Ok(out)
    }
}

/// A labelled span of the token sequence: positions [start, end) belong to
/// the task with id `task`.
#[derive(Debug, Clone, Serialize)]
pub struct Segment {
    pub task: usize,
    pub name: String,
    pub start: usize,
    pub end: usize,
}

/// Per-segment dominance and boundary switching behaviour.
#[derive(Debug, Clone, Serialize)]
pub struct SwitchReport {
    pub segments: Vec<SegmentReport>,
    /// One entry per boundary where the task actually changes: tokens
    /// between the boundary and the first position routed to the new task.
    pub boundary_offsets: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SegmentReport {
    pub task: usize,
    pub name: String,
    pub start: usize,
    pub end: usize,
    /// Fraction of the segment's tokens whose dominant adapter is the
    /// segment's task.
    pub dominance: f64,
}

impl SwitchReport {
    pub fn from_trace(trace: &RoutingTrace, segments: &[Segment]) -> SwitchReport {
        let dominant = trace.dominant_sequence();
        let reports: Vec<SegmentReport> = segments
            .iter()
            .map(|seg| {
                let span = &dominant[seg.start..seg.end.min(dominant.len())];
                let hits = span.iter().filter(|&&d| d == seg.task).count();
                SegmentReport {
                    task: seg.task,
                    name: seg.name.clone(),
                    start: seg.start,
                    end: seg.end,
                    dominance: if span.is_empty() {
                        0.0
                    } else {
                        hits as f64 / span.len() as f64
                    },
                }
            })
            .collect();

        let mut boundary_offsets = Vec::new();
        for pair in segments.windows(2) {
            let (prev, next) = (&pair[0], &pair[1]);
            if prev.task == next.task {
                continue;
            }
            let span = &dominant[next.start..next.end.min(dominant.len())];
            let offset = span
                .iter()
                .position(|&d| d == next.task)
                .unwrap_or(span.len());
            boundary_offsets.push(offset);
        }
        SwitchReport {
            segments: reports,
            boundary_offsets,
        }
    }

    pub fn min_dominance(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.dominance)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_boundary_offset(&self) -> usize {
        self.boundary_offsets.iter().copied().max().unwrap_or(0)
    }
}

/// Five intensity glyphs for the dominant adapter's weight share.
const GLYPHS: [char; 5] = [' ', '\u{2591}', '\u{2592}', '\u{2593}', '\u{2588}'];

fn intensity_glyph(share: f64) -> char {
    let bin = (share.clamp(0.0, 1.0) * 5.0).floor() as usize;
    GLYPHS[bin.min(4)]
}

/// Text rendering of a trace: each token annotated with its dominant
/// adapter and a 5-level intensity glyph for that adapter's weight share.
pub fn render_heatmap(trace: &RoutingTrace, tokens_per_line: usize) -> String {
    let mut out = String::new();
    for (i, tok) in trace.tokens.iter().enumerate() {
        let total: f64 = tok
            .per_site
            .iter()
            .flat_map(|s| s.weights.iter())
            .sum::<f64>()
            .max(1e-12);
        let dom_sum: f64 = tok
            .per_site
            .iter()
            .flat_map(|s| s.indices.iter().zip(&s.weights))
            .filter(|(&idx, _)| idx == tok.dominant)
            .map(|(_, &w)| w)
            .sum();
        let share = dom_sum / total;
        let name = trace
            .adapter_names
            .get(tok.dominant)
            .map(|s| s.as_str())
            .unwrap_or("?");
        let initial = name.chars().next().unwrap_or('?').to_ascii_uppercase();
        out.push_str(&format!(
            "t{:<3}[{}{}]",
            tok.token,
            initial,
            intensity_glyph(share)
        ));
        if (i + 1) % tokens_per_line == 0 {
            out.push('\n');
        } else {
            out.push(' ');
        }
    }
    if !out.ends_with('\n') {
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site(indices: Vec<usize>, weights: Vec<f64>) -> SiteRouting {
        SiteRouting {
            block: 0,
            site: "q".into(),
            indices,
            weights,
        }
    }

    #[test]
    fn dominant_sums_weights_across_sites() {
        let sites = vec![
            site(vec![0, 1], vec![0.6, 0.4]),
            site(vec![1, 0], vec![0.9, 0.1]),
        ];
        // adapter 0: 0.7, adapter 1: 1.3
        assert_eq!(dominant_adapter(&sites, 3), 1);
    }

    #[test]
    fn switch_report_measures_dominance_and_offsets() {
        let mk = |dominant: usize, step: usize| TokenTrace {
            step,
            token: 0,
            per_site: vec![site(vec![dominant], vec![1.0])],
            dominant,
        };
        let trace = RoutingTrace {
            tokens: (0..4)
                .map(|i| mk(0, i))
                .chain((4..8).map(|i| mk(if i == 4 { 0 } else { 1 }, i)))
                .collect(),
            adapter_names: vec!["copy".into(), "reverse".into()],
        };
        let segments = vec![
            Segment {
                task: 0,
                name: "copy".into(),
                start: 0,
                end: 4,
            },
            Segment {
                task: 1,
                name: "reverse".into(),
                start: 4,
                end: 8,
            },
        ];
        let report = SwitchReport::from_trace(&trace, &segments);
        assert_eq!(report.segments[0].dominance, 1.0);
        assert_eq!(report.segments[1].dominance, 0.75);
        // Position 4 still routes to task 0, switch lands at position 5.
        assert_eq!(report.boundary_offsets, vec![1]);

        // Same-task adjacency contributes no boundary.
        let same = vec![
            Segment {
                task: 0,
                name: "copy".into(),
                start: 0,
                end: 2,
            },
            Segment {
                task: 0,
                name: "copy".into(),
                start: 2,
                end: 4,
            },
        ];
        let report = SwitchReport::from_trace(&trace, &same);
        assert!(report.boundary_offsets.is_empty());
    }

    #[test]
    fn jsonl_has_expected_fields() {
        let trace = RoutingTrace {
            tokens: vec![TokenTrace {
                step: 0,
                token: 12,
                per_site: vec![site(vec![1, 0], vec![0.7, 0.3])],
                dominant: 1,
            }],
            adapter_names: vec!["a".into(), "b".into()],
        };
        let line = trace.to_jsonl().unwrap();
        let parsed: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(parsed["step"], 0);
        assert_eq!(parsed["token"], 12);
        assert_eq!(parsed["dominant"], 1);
        assert_eq!(parsed["per_site"][0]["site"], "q");
        assert_eq!(parsed["per_site"][0]["indices"][0], 1);
    }

    #[test]
    fn heatmap_uses_five_levels() {
        assert_eq!(intensity_glyph(0.05), ' ');
        assert_eq!(intensity_glyph(0.3), '\u{2591}');
        assert_eq!(intensity_glyph(0.5), '\u{2592}');
        assert_eq!(intensity_glyph(0.7), '\u{2593}');
        assert_eq!(intensity_glyph(0.95), '\u{2588}');
    }
}
