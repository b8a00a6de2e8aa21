//! Abstraction JSON/DOT, value grids and trajectory CSVs.

use std::fmt::Write as _;
use std::io::Write;

use anyhow::{Context, Result};
use ellabs_core::abstraction::{value_function, AbstractTransition, Abstraction, ValueTable};
use ellabs_core::geometry::{Ellipsoid, Hyperrectangle};
use ellabs_core::runtime::{ConcreteController, Trajectory};
use ellabs_core::synthesis::AffineController;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>], ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r.len(), ncols, |i, j| r[i][j])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub id: usize,
    pub center: Vec<f64>,
    pub shape: Vec<Vec<f64>>,
    /// `None` when the state cannot reach the root.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub source: usize,
    pub target: usize,
    pub gain: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub center: Vec<f64>,
    pub cost: f64,
}

/// On-disk form of an abstraction with its value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractionRecord {
    pub n_x: usize,
    pub n_u: usize,
    pub root: usize,
    pub states: Vec<StateRecord>,
    pub transitions: Vec<TransitionRecord>,
}

impl AbstractionRecord {
    pub fn new(abs: &Abstraction, values: &ValueTable) -> Self {
        let n_x = abs.states()[0].cell.dim();
        let n_u = abs
            .transitions()
            .first()
            .map_or(0, |t| t.controller.offset.len());
        Self {
            n_x,
            n_u,
            root: abs.root(),
            states: abs
                .states()
                .iter()
                .map(|s| {
                    let v = values.value(s.id);
                    StateRecord {
                        id: s.id,
                        center: s.cell.center().iter().copied().collect(),
                        shape: rows(s.cell.shape()),
                        value: v.is_finite().then_some(v),
                    }
                })
                .collect(),
            transitions: abs
                .transitions()
                .iter()
                .map(|t| TransitionRecord {
                    source: t.source,
                    target: t.target,
                    gain: rows(&t.controller.gain),
                    offset: t.controller.offset.iter().copied().collect(),
                    center: t.controller.center.iter().copied().collect(),
                    cost: t.cost,
                })
                .collect(),
        }
    }

    /// Rebuilds and revalidates the abstraction; values are recomputed.
    pub fn to_abstraction(&self) -> Result<(Abstraction, ValueTable)> {
        let mut cells = Vec::with_capacity(self.states.len());
        for (i, s) in self.states.iter().enumerate() {
            anyhow::ensure!(s.id == i, "state {i} has id {}", s.id);
            anyhow::ensure!(
                s.center.len() == self.n_x && s.shape.len() == self.n_x && s.shape.iter().all(|r| r.len() == self.n_x),
                "state {i}: dimension mismatch"
            );
            let e = Ellipsoid::new(DVector::from_vec(s.center.clone()), from_rows(&s.shape, self.n_x))
                .with_context(|| format!("state {i}"))?;
            cells.push(e);
        }
        let transitions = self
            .transitions
            .iter()
            .enumerate()
            .map(|(k, t)| {
                anyhow::ensure!(
                    t.gain.len() == self.n_u && t.gain.iter().all(|r| r.len() == self.n_x),
                    "transition {k}: gain dimension mismatch"
                );
                Ok(AbstractTransition {
                    source: t.source,
                    target: t.target,
                    controller: AffineController {
                        gain: from_rows(&t.gain, self.n_x),
                        offset: DVector::from_vec(t.offset.clone()),
                        center: DVector::from_vec(t.center.clone()),
                    },
                    cost: t.cost,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let abs = Abstraction::from_parts(cells, transitions, self.root)?;
        let values = value_function(&abs)?;
        Ok((abs, values))
    }
}

pub fn write_json<T: Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Graphviz digraph; edges carry the transition cost and the edge used by
/// the value table is drawn bold.
pub fn to_dot(abs: &Abstraction, values: &ValueTable) -> String {
    let mut s = String::from("digraph abstraction {\n  rankdir=LR;\n");
    for st in abs.states() {
        let v = values.value(st.id);
        let shape = if st.id == abs.root() { "doublecircle" } else { "circle" };
        let _ = writeln!(s, "  s{} [shape={shape}, label=\"{}\\nv={:.3}\"];", st.id, st.id, v);
    }
    for (k, t) in abs.transitions().iter().enumerate() {
        let best = values.best_transition(t.source) == Some(k);
        let style = if best { ", style=bold" } else { "" };
        let _ = writeln!(s, "  s{} -> s{} [label=\"{:.3}\"{style}];", t.source, t.target, t.cost);
    }
    s.push_str("}\n");
    s
}

/// Regular grid over `bounds` with `res` points per axis; each row is the
/// point followed by `v(x)` or `uncovered`.
pub fn write_value_grid<W: std::io::Write>(
    out: W,
    controller: &ConcreteController,
    bounds: &Hyperrectangle,
    res: usize,
) -> Result<()> {
    let n = bounds.dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..n).map(|i| format!("x{}", i + 1)).collect();
    header.push("v".into());
    w.write_record(&header)?;
    let (lo, hi) = (bounds.lower(), bounds.upper());
    let total = res.checked_pow(n as u32).context("value grid too large")?;
    let mut idx = vec![0usize; n];
    for _ in 0..total {
        let x = DVector::from_fn(n, |i, _| lo[i] + (hi[i] - lo[i]) * idx[i] as f64 / (res - 1) as f64);
        let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        rec.push(match controller.refine_value(&x) {
            Ok(v) => v.to_string(),
            Err(_) => "uncovered".into(),
        });
        w.write_record(&rec)?;
        for d in idx.iter_mut() {
            *d += 1;
            if *d < res {
                break;
            }
            *d = 0;
        }
    }
    w.flush()?;
    Ok(())
}

/// Columns `step, x1.., u1.., cell_id, stage_cost, cum_cost, v`. The last
/// row holds the final state with empty input and cost fields.
pub fn write_trajectory<W: std::io::Write>(out: W, t: &Trajectory) -> Result<()> {
    let n_x = t.states[0].len();
    let n_u = t.inputs.first().map_or(0, |u| u.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string()];
    header.extend((0..n_x).map(|i| format!("x{}", i + 1)));
    header.extend((0..n_u).map(|i| format!("u{}", i + 1)));
    header.extend(["cell_id", "stage_cost", "cum_cost", "v"].map(String::from));
    w.write_record(&header)?;
    let cum = t.cumulative_costs();
    for k in 0..=t.steps() {
        let mut rec = vec![k.to_string()];
        rec.extend(t.states[k].iter().map(|v| v.to_string()));
        if k < t.steps() {
            rec.extend(t.inputs[k].iter().map(|v| v.to_string()));
            rec.push(t.cells[k].to_string());
            rec.push(t.stage_costs[k].to_string());
            rec.push(cum[k].to_string());
        } else {
            rec.extend(std::iter::repeat_n(String::new(), n_u + 2));
            rec.push(cum.last().copied().unwrap_or(0.0).to_string());
        }
        rec.push(t.values.get(k).map_or(String::new(), |v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
