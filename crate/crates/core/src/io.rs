//! Return functions as CSV rows and JSON documents.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::csv_err;
use crate::error::{Error, Result};
use crate::grid::{AtomGrid, ReturnFunction};

pub const MEASURE_SCHEMA: &str = "# schema: distq.return_function v1";
pub const MEASURE_HEADER: &str = "state,action,atom_index,atom,mass";

#[derive(Serialize, Deserialize)]
struct Row {
    state: usize,
    action: usize,
    atom_index: usize,
    atom: f64,
    mass: f64,
}

pub fn write_return_function_csv<W: Write>(mut out: W, eta: &ReturnFunction) -> Result<()> {
    writeln!(out, "{MEASURE_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    let atoms = eta.grid().atoms();
    for x in 0..eta.n_states() {
        for a in 0..eta.n_actions() {
            for (i, &mass) in eta.entry(x, a).iter().enumerate() {
                w.serialize(Row {
                    state: x,
                    action: a,
                    atom_index: i,
                    atom: atoms[i],
                    mass,
                })
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads rows in any order; every `(state, action, atom_index)` must appear once.
pub fn read_return_function_csv<R: Read>(input: R) -> Result<ReturnFunction> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let rows: Vec<Row> = rdr.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)?;
    if rows.is_empty() {
        return Err(Error::Parse("no rows".into()));
    }
    let ns = rows.iter().map(|r| r.state).max().unwrap_or(0) + 1;
    let na = rows.iter().map(|r| r.action).max().unwrap_or(0) + 1;
    let m = rows.iter().map(|r| r.atom_index).max().unwrap_or(0) + 1;
    if rows.len() != ns * na * m {
        return Err(Error::Parse(format!("{} rows for a {ns}x{na}x{m} table", rows.len())));
    }
    let mut atoms = vec![f64::NAN; m];
    let mut masses = vec![f64::NAN; ns * na * m];
    for r in &rows {
        let slot = &mut atoms[r.atom_index];
        if slot.is_nan() {
            *slot = r.atom;
        } else if *slot != r.atom {
            return Err(Error::Parse(format!("atom {} given as {} and {}", r.atom_index, slot, r.atom)));
        }
        let k = (r.state * na + r.action) * m + r.atom_index;
        if !masses[k].is_nan() {
            return Err(Error::Parse(format!(
                "duplicate row ({}, {}, {})",
                r.state, r.action, r.atom_index
            )));
        }
        masses[k] = r.mass;
    }
    let grid = Arc::new(AtomGrid::from_atoms(atoms)?);
    ReturnFunction::new(grid, ns, na, masses)
}

#[derive(Serialize, Deserialize)]
struct ReturnFunctionDoc {
    atoms: Vec<f64>,
    n_states: usize,
    n_actions: usize,
    /// `[x][a][i]`
    masses: Vec<Vec<Vec<f64>>>,
}

pub fn return_function_to_json(eta: &ReturnFunction) -> Result<String> {
    let masses = (0..eta.n_states())
        .map(|x| (0..eta.n_actions()).map(|a| eta.entry(x, a).to_vec()).collect())
        .collect();
    let doc = ReturnFunctionDoc {
        atoms: eta.grid().atoms().to_vec(),
        n_states: eta.n_states(),
        n_actions: eta.n_actions(),
        masses,
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn return_function_from_json(text: &str) -> Result<ReturnFunction> {
    let doc: ReturnFunctionDoc = serde_json::from_str(text)?;
    if doc.masses.len() != doc.n_states || doc.masses.iter().any(|r| r.len() != doc.n_actions) {
        return Err(Error::ShapeMismatch("masses do not match n_states x n_actions".into()));
    }
    let grid = Arc::new(AtomGrid::from_atoms(doc.atoms)?);
    let flat = doc.masses.into_iter().flatten().flatten().collect();
    ReturnFunction::new(grid, doc.n_states, doc.n_actions, flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::random_signed_return_function;
    use crate::mdp::seeded_rng;

    fn sample() -> ReturnFunction {
        let grid = Arc::new(AtomGrid::uniform(-3.7, 11.3, 13).unwrap());
        random_signed_return_function(&grid, 3, 4, &mut seeded_rng(5))
    }

    fn bits(eta: &ReturnFunction) -> Vec<u64> {
        eta.masses().iter().chain(eta.grid().atoms()).map(|v| v.to_bits()).collect()
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let eta = sample();
        let mut buf = Vec::new();
        write_return_function_csv(&mut buf, &eta).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(MEASURE_SCHEMA));
        assert_eq!(lines.next(), Some(MEASURE_HEADER));
        let back = read_return_function_csv(&buf[..]).unwrap();
        assert_eq!(bits(&eta), bits(&back));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let eta = sample();
        let back = return_function_from_json(&return_function_to_json(&eta).unwrap()).unwrap();
        assert_eq!(bits(&eta), bits(&back));
    }

    #[test]
    fn csv_rejects_missing_rows() {
        let text = format!("{MEASURE_HEADER}\n0,0,0,0.0,0.5\n0,0,1,1.0,0.5\n0,1,0,0.0,1.0\n");
        assert!(read_return_function_csv(text.as_bytes()).is_err());
    }
}
