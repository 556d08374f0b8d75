//! Plot inputs derived from a run directory: one CSV per scalar metric and
//! one SVG adjacency heatmap per snapshot (white cell = edge).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use commformer_core::trainer::AlphaSnapshot;
use serde_json::Value;

use crate::run::{METRICS_FILE, SNAPSHOTS_FILE};
use crate::{HarnessError, Result};

const CELL: usize = 24;

const SCALARS: [&str; 6] = [
    "mean_return",
    "success_rate",
    "mean_steps_taken",
    "encoder_loss",
    "decoder_loss",
    "gate_open_fraction",
];

fn read_jsonl(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).map_err(HarnessError::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(HarnessError::json(path)))
        .collect()
}

fn cell(v: Option<&Value>) -> String {
    match v.and_then(Value::as_f64) {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Columns `iteration,env_steps,value` per metric; missing values are
/// left empty. Keyed by file stem.
pub fn metric_tables(records: &[Value]) -> BTreeMap<String, String> {
    let mut tables: BTreeMap<String, String> = BTreeMap::new();
    let header = "iteration,env_steps,value\n";
    for r in records {
        let prefix = format!("{},{}", cell(r.get("iteration")), cell(r.get("env_steps")));
        for name in SCALARS {
            let t = tables
                .entry(name.to_string())
                .or_insert_with(|| header.to_string());
            let _ = writeln!(t, "{prefix},{}", cell(r.get(name)));
        }
        if let Some(Value::Object(norms)) = r.get("grad_norms") {
            for (k, v) in norms {
                let t = tables
                    .entry(format!("grad_norm_{k}"))
                    .or_insert_with(|| header.to_string());
                let _ = writeln!(t, "{prefix},{}", cell(Some(v)));
            }
        }
    }
    tables
}

/// Square heatmap of a 0/1 matrix, row `i` top to bottom.
pub fn adjacency_svg(graph: &[Vec<u8>], caption: &str) -> String {
    let n = graph.len();
    let side = n * CELL;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{side}" height="{h}" viewBox="0 0 {side} {h}">"#,
        h = side + CELL
    );
    for (i, row) in graph.iter().enumerate() {
        for (j, &e) in row.iter().enumerate() {
            let fill = if e == 1 { "#ffffff" } else { "#000000" };
            let _ = writeln!(
                s,
                r##"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="#808080" stroke-width="1"/>"##,
                j * CELL,
                i * CELL
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="2" y="{}" font-family="monospace" font-size="12">{caption}</text>"#,
        side + CELL - 6
    );
    s.push_str("</svg>\n");
    s
}

/// Writes `<out>/<metric>.csv` and `<out>/adjacency/it_<iteration>.svg`.
/// Returns the written paths in order.
pub fn export(run_dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let records = read_jsonl(&run_dir.join(METRICS_FILE))?;
    let frames_dir = out.join("adjacency");
    fs::create_dir_all(&frames_dir).map_err(HarnessError::io(&frames_dir))?;
    let mut written = Vec::new();
    for (name, table) in metric_tables(&records) {
        let p = out.join(format!("{name}.csv"));
        fs::write(&p, table).map_err(HarnessError::io(&p))?;
        written.push(p);
    }
    let snaps_path = run_dir.join(SNAPSHOTS_FILE);
    for raw in read_jsonl(&snaps_path)? {
        let snap: AlphaSnapshot =
            serde_json::from_value(raw).map_err(HarnessError::json(&snaps_path))?;
        let p = frames_dir.join(format!("it_{:06}.svg", snap.iteration));
        let caption = format!("stage {} it {}", snap.stage, snap.iteration);
        fs::write(&p, adjacency_svg(&snap.graph, &caption)).map_err(HarnessError::io(&p))?;
        written.push(p);
    }
    Ok(written)
}
