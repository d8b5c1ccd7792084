//! Artifact writing and plain-text summaries.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use dime::dime::DimeReport;
use dime::disentangle::Side;

/// Pretty JSON with a trailing newline. Field order is fixed by the types,
/// so equal values give byte-identical files.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn logits_line(s: &mut String, name: &str, v: &[f64]) {
    let _ = write!(s, "  {name:<5}");
    for x in v {
        let _ = write!(s, " {x:>10.4}");
    }
    s.push('\n');
}

/// Per-feature weight tables for both modalities.
pub fn explain_summary(r: &DimeReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "point {} (sample {}), class {}", r.point, r.sample_id, r.class);
    let _ = writeln!(s, "logits:");
    logits_line(&mut s, "full", r.logits.full.values());
    logits_line(&mut s, "UC", r.logits.uc.values());
    logits_line(&mut s, "MI", r.logits.mi.values());
    for side in Side::BOTH {
        let n = side.number();
        let features = match side {
            Side::First => &r.features1,
            Side::Second => &r.features2,
        };
        let (uc, mi, lime) = (r.uc(side), r.mi(side), r.lime(side));
        let _ = writeln!(
            s,
            "\nmodality {n} ({}; R² UC {:.3}, MI {:.3}, LIME {:.3})",
            features.kind, uc.r2, mi.r2, lime.r2
        );
        let _ = writeln!(s, "  {:<20} {:>10} {:>10} {:>10}", "feature", format!("UC{n}"), format!("MI{n}"), format!("LIME{n}"));
        for (i, f) in features.features.iter().enumerate() {
            let _ = writeln!(
                s,
                "  {:<20} {:>10.4} {:>10.4} {:>10.4}",
                f.to_string(),
                uc.weights[i],
                mi.weights[i],
                lime.weights[i]
            );
        }
        let _ = writeln!(
            s,
            "  {:<20} {:>10.4} {:>10.4} {:>10.4}",
            "(intercept)", uc.intercept, mi.intercept, lime.intercept
        );
    }
    s
}
