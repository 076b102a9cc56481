//! Trajectory tables, CSV input/output and the per-run figure.

use std::fmt::Write as _;
use std::path::Path;

use riphs::diagnostics::{distance_series, output_distance_series};
use riphs::equilibria::EquilibriumSet;
use riphs::model::{RiphsModel, Vector};
use riphs::ocp::{cumulative_cost, OcpSpec};
use riphs::trajectory::{SolverMetadata, TrajectorySolution};

use crate::error::{io_err, CliError};
use crate::svg::{self, Panel, Series};

/// Node-wise columns of a solved trajectory. Missing cells are `None`.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
    pub n: usize,
    pub m: usize,
    pub brackets: usize,
}

impl Table {
    pub fn build(
        spec: &OcpSpec,
        set: &EquilibriumSet,
        traj: &TrajectorySolution,
    ) -> Result<Table, CliError> {
        let model = &spec.model;
        let (n, m, nb) = (
            model.state_dim(),
            model.input_dim(),
            model.num_irreversible(),
        );
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|j| format!("x{j}")));
        header.extend((1..=n).map(|j| format!("co_energy{j}")));
        header.extend((1..=m).map(|j| format!("u{j}")));
        header.extend((1..=nb).map(|k| format!("bracket{k}")));
        header.extend(["sigma", "dist_T", "dist_output", "cum_cost"].map(String::from));

        let solver = |e: &dyn std::fmt::Display| CliError::Solver(e.to_string());
        let (dist, _) = distance_series(model, traj, set).map_err(|e| solver(&e))?;
        let dist_out = spec
            .output
            .as_ref()
            .map(|o| output_distance_series(o, traj));
        let cum = cumulative_cost(spec, traj).map_err(|e| solver(&e))?;

        let mut rows = Vec::with_capacity(traj.states.len());
        for (i, x) in traj.states.iter().enumerate() {
            let ev = model.evaluate(x).map_err(|e| solver(&e))?;
            let mut row = Vec::with_capacity(header.len());
            row.push(Some(traj.time[i]));
            row.extend(x.iter().map(|v| Some(*v)));
            row.extend(ev.co_energy.iter().map(|v| Some(*v)));
            match traj.controls.get(i) {
                Some(u) => row.extend(u.iter().map(|v| Some(*v))),
                None => row.extend(std::iter::repeat_n(None, m)),
            }
            row.extend(ev.brackets.iter().map(|v| Some(*v)));
            row.push(Some(traj.entropy_production[i]));
            row.push(Some(dist[i]));
            row.push(dist_out.as_ref().map(|d| d[i]));
            row.push(Some(cum[i]));
            rows.push(row);
        }
        Ok(Table {
            header,
            rows,
            n,
            m,
            brackets: nb,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for row in &self.rows {
            for (j, cell) in row.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                if let Some(v) = cell {
                    let _ = write!(s, "{v:.16e}");
                }
            }
            s.push('\n');
        }
        s
    }

    fn column(&self, name: &str) -> Vec<(f64, f64)> {
        let j = self
            .header
            .iter()
            .position(|h| h == name)
            .expect("known column");
        self.rows
            .iter()
            .filter_map(|r| Some((r[0]?, r[j]?)))
            .collect()
    }

    fn panel(&self, title: &str, prefix: &str, count: usize, label: &str, steps: bool) -> Panel {
        Panel {
            title: title.into(),
            series: (1..=count)
                .map(|j| Series {
                    label: format!("{label}{j}"),
                    points: self.column(&format!("{prefix}{j}")),
                })
                .collect(),
            steps,
        }
    }

    /// States, co-energy variables, brackets and controls over time.
    pub fn figure(&self, title: &str) -> String {
        let mut panels = vec![
            self.panel("states", "x", self.n, "x", false),
            self.panel("co-energy variables", "co_energy", self.n, "∂H/∂x", false),
        ];
        if self.brackets > 0 {
            panels.push(self.panel("brackets {S,H}", "bracket", self.brackets, "{S,H}_", false));
        }
        let mut control = self.panel("control", "u", self.m, "u", true);
        // Repeat the last control so the hold reaches t_f.
        for se in &mut control.series {
            if let (Some(&(_, y)), Some(t)) =
                (se.points.last(), self.rows.last().and_then(|r| r[0]))
            {
                se.points.push((t, y));
            }
        }
        panels.push(control);
        svg::render(title, "t", &panels)
    }
}

pub fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(io_err(path))
}

/// Read the `t`, `x*` and `u*` columns of a CSV written by [`Table::to_csv`].
pub fn read_trajectory(model: &RiphsModel, path: &Path) -> Result<TrajectorySolution, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .split(',')
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| bad(format!("missing column {name}")))
    };
    let (n, m) = (model.state_dim(), model.input_dim());
    let t_col = col("t")?;
    let x_cols = (1..=n)
        .map(|j| col(&format!("x{j}")))
        .collect::<Result<Vec<_>, _>>()?;
    let u_cols = (1..=m)
        .map(|j| col(&format!("u{j}")))
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<Vec<&str>> = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').collect())
        .collect();
    if rows.len() < 2 {
        return Err(bad("need at least two rows".into()));
    }
    let num = |row: &[&str], j: usize| -> Result<f64, CliError> {
        row.get(j)
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| bad(format!("bad number in column {}", header[j])))
    };
    let mut time = Vec::with_capacity(rows.len());
    let mut states = Vec::with_capacity(rows.len());
    let mut controls = Vec::with_capacity(rows.len() - 1);
    for (i, row) in rows.iter().enumerate() {
        time.push(num(row, t_col)?);
        let x: Vec<f64> = x_cols
            .iter()
            .map(|&j| num(row, j))
            .collect::<Result<_, _>>()?;
        states.push(Vector::from_vec(x));
        if i + 1 < rows.len() {
            let u: Vec<f64> = u_cols
                .iter()
                .map(|&j| num(row, j))
                .collect::<Result<_, _>>()?;
            controls.push(Vector::from_vec(u));
        }
    }
    TrajectorySolution::assemble(model, time, states, controls, SolverMetadata::default())
        .map_err(|e| bad(e.to_string()))
}
