//! Writers for the output directory. JSON files carry `schema_version`;
//! floats are printed with round-trip precision everywhere.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::SCHEMA_VERSION;

#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    schema_version: u32,
    #[serde(flatten)]
    body: &'a T,
}

pub fn write_json<T: Serialize>(path: &Path, body: &T) -> Result<()> {
    let v = Versioned {
        schema_version: SCHEMA_VERSION,
        body,
    };
    let mut text = serde_json::to_string_pretty(&v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Rows are written as given; every row must match the header length.
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn num(x: f64) -> String {
    // No negative zero in tables.
    format!("{}", if x == 0.0 { 0.0 } else { x })
}

pub fn list(v: &[f64]) -> String {
    v.iter().map(|x| num(*x)).collect::<Vec<_>>().join(";")
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub const PLOT_SIMULATION: &str = r#"import csv
import sys
import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "trajectory.csv"
with open(path) as f:
    rows = list(csv.DictReader(f))
t = [float(r["t"]) for r in rows]

fig, (a, b) = plt.subplots(2, 1, sharex=True, figsize=(7, 6))
for key in ("l2", "h1", "state_norm"):
    a.semilogy(t, [max(float(r[key]), 1e-300) for r in rows], label=key)
a.set_ylabel("norm")
a.legend()
b.plot(t, [float(r["u"]) for r in rows], label="u")
b.plot(t, [float(r["u_phi"]) for r in rows], label="phi(u)")
b.set_xlabel("t")
b.legend()
fig.tight_layout()
fig.savefig(path.rsplit(".", 1)[0] + ".png", dpi=150)
"#;

pub const PLOT_SWEEP: &str = r#"import csv
import sys
import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "sweep.csv"
with open(path) as f:
    rows = list(csv.DictReader(f))
if "q_tilde" in rows[0]:
    x = [float(r["q_tilde"]) for r in rows]
    y = [float(r["dk_max"]) for r in rows]
    plt.plot(x, y, "o-")
    plt.xlabel("q_tilde")
    plt.ylabel("largest certified dk_phi")
else:
    x = [int(r["n"]) for r in rows]
    y = [float(r["best_margin"]) for r in rows]
    plt.plot(x, y, "o-")
    plt.axhline(0.0, color="k", lw=0.5)
    plt.xlabel("N")
    plt.ylabel("search margin")
plt.tight_layout()
plt.savefig(path.rsplit(".", 1)[0] + ".png", dpi=150)
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_is_versioned() {
        #[derive(Serialize)]
        struct Body {
            x: f64,
        }
        let dir = std::env::temp_dir().join(format!("rdctl-out-{}", std::process::id()));
        ensure_dir(&dir).unwrap();
        let p = dir.join("a.json");
        write_json(&p, &Body { x: 0.1 + 0.2 }).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(v["schema_version"], SCHEMA_VERSION);
        assert_eq!(v["x"].as_f64().unwrap(), 0.1 + 0.2);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn numbers_round_trip() {
        let x = 1.0 / 3.0;
        assert_eq!(num(x).parse::<f64>().unwrap(), x);
        assert_eq!(list(&[1.5, -2.0]), "1.5;-2");
        assert_eq!(num(-0.0), "0");
    }
}
