//! Ablation grids: components, `β`, and the heavy (two-layer MLP) variants.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate_model, load_checkpoint, load_reference, reference_domain, resolve_seed, AblateArgs, CliError, EvalConfig, RunConfig};
use crate::adapt::{run_recipe, AdaptConfig, Recipe};
use crate::domains::Domain;
use crate::engine::Tensor;
use crate::io::{write_file, write_json};
use crate::metrics::MetricsReport;
use crate::nets::{AdaptorKind, ClassifierKind, Mode};
use crate::pretrain::{pretrain, Checkpoint};

pub const BETA_GRID: [f64; 4] = [0.5, 0.7, 0.9, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub grid: &'static str,
    pub name: String,
    pub recipe: Recipe,
    pub config: AdaptConfig,
}

/// baseline (FreezeD), +AA, +AA+AC, +AA+AC+DC.
pub fn component_grid(base: &AdaptConfig) -> Vec<Cell> {
    let cell = |name: &str, recipe| Cell {
        grid: "components",
        name: name.into(),
        recipe,
        config: base.clone(),
    };
    vec![
        cell(
            "baseline",
            Recipe::Adversarial {
                partition: Mode::FreezeD,
                adaptor_only: false,
            },
        ),
        cell(
            "+AA",
            Recipe::Adversarial {
                partition: Mode::FreezeD,
                adaptor_only: true,
            },
        ),
        cell("+AA+AC", Recipe::Genda { truncate: false }),
        cell("+AA+AC+DC", Recipe::Genda { truncate: true }),
    ]
}

pub fn beta_grid(base: &AdaptConfig) -> Vec<Cell> {
    BETA_GRID
        .iter()
        .map(|&beta| Cell {
            grid: "beta",
            name: format!("beta={beta}"),
            recipe: Recipe::Genda { truncate: true },
            config: AdaptConfig { beta, ..base.clone() },
        })
        .collect()
}

pub fn architecture_grid(base: &AdaptConfig) -> Vec<Cell> {
    let cell = |name: &str, adaptor, classifier| Cell {
        grid: "architecture",
        name: name.into(),
        recipe: Recipe::Genda { truncate: true },
        config: AdaptConfig {
            adaptor,
            classifier,
            ..base.clone()
        },
    };
    vec![
        cell("light", AdaptorKind::Light, ClassifierKind::Light),
        cell("heavy_adaptor", AdaptorKind::Heavy, ClassifierKind::Light),
        cell("heavy_classifier", AdaptorKind::Light, ClassifierKind::Heavy),
    ]
}

pub fn all_cells(base: &AdaptConfig) -> Vec<Cell> {
    let mut cells = component_grid(base);
    cells.extend(beta_grid(base));
    cells.extend(architecture_grid(base));
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub grid: String,
    pub cell: String,
    pub recipe: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Adapts with the cell's recipe and evaluates against `domain`.
pub fn run_cell(
    ck: &Checkpoint,
    refs: &[Tensor<f32>],
    cell: &Cell,
    domain: &Domain,
    eval: &EvalConfig,
    seed: u64,
) -> CellResult {
    let outcome = run_recipe(ck, refs, &cell.config, seed, cell.recipe)
        .map_err(CliError::from)
        .and_then(|(art, _)| evaluate_model(ck, Some(&art), domain, eval, seed));
    let (report, error) = match outcome {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    CellResult {
        grid: cell.grid.into(),
        cell: cell.name.clone(),
        recipe: cell.recipe.label(),
        report,
        error,
    }
}

/// One row per cell: `grid,cell,frechet,precision,recall,status`.
pub fn summary_csv(results: &[CellResult]) -> String {
    let mut s = String::from("grid,cell,frechet,precision,recall,status\n");
    for r in results {
        match &r.report {
            Some(m) => writeln!(s, "{},{},{},{},{},ok", r.grid, r.cell, m.frechet, m.precision, m.recall),
            None => writeln!(s, "{},{},,,,failed", r.grid, r.cell),
        }
        .expect("string write");
    }
    s
}

fn cell_file(out_dir: &Path, r: &CellResult) -> std::path::PathBuf {
    let name: String = r
        .cell
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    out_dir.join(&r.grid).join(format!("{name}.json"))
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<(), CliError> {
    let config = RunConfig::load(&args.config)?;
    config.validate()?;
    let seed = resolve_seed(args.seed, config.seed)?;
    let reference = args
        .reference
        .clone()
        .or_else(|| config.adapt.references.first().cloned())
        .ok_or_else(|| CliError::Config("adapt.references: the ablation needs a reference".into()))?;

    let ck = match &args.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => {
            let (ck, log) = pretrain(&config.pretrain, seed)?;
            ck.save(&args.out_dir.join("source.gdac"))?;
            write_json(&args.out_dir.join("source.log.json"), &log)?;
            ck
        }
    };
    let refs = vec![load_reference(&reference, ck.resolution())?];
    let domain = reference_domain(&reference).unwrap_or(Domain::by_name("shapes")?);
    let cells = all_cells(&config.adapt);

    let results: Vec<CellResult> = if args.parallel {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        let mut slots: Vec<Option<CellResult>> = vec![None; cells.len()];
        std::thread::scope(|scope| {
            for (chunk_cells, chunk_slots) in cells
                .chunks(cells.len().div_ceil(workers))
                .zip(slots.chunks_mut(cells.len().div_ceil(workers)))
            {
                let (ck, refs, domain, eval) = (&ck, &refs, &domain, &config.eval);
                scope.spawn(move || {
                    for (c, slot) in chunk_cells.iter().zip(chunk_slots) {
                        *slot = Some(run_cell(ck, refs, c, domain, eval, seed));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every cell ran")).collect()
    } else {
        cells
            .iter()
            .map(|c| {
                log::info!("ablation cell {}/{}", c.grid, c.name);
                run_cell(&ck, &refs, c, &domain, &config.eval, seed)
            })
            .collect()
    };

    for r in &results {
        write_json(&cell_file(&args.out_dir, r), r)?;
    }
    write_file(&args.out_dir.join("summary.csv"), summary_csv(&results).as_bytes())?;
    match results.iter().find(|r| r.report.is_some()) {
        Some(_) => Ok(()),
        None => Err(CliError::Diverged(format!(
            "every ablation cell failed; first error: {}",
            results.first().and_then(|r| r.error.clone()).unwrap_or_default()
        ))),
    }
}
