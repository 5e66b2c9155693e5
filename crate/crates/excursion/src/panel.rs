//! Long-format panel data model for clustered micro-randomized trials.
//!
//! A dataset is a collection of per-decision-point records, one row per
//! (cluster, individual, decision point). Rows are grouped by cluster, then
//! individual, and sorted by decision point, so construction is insensitive
//! to input row order. Within a cluster every individual must cover the same
//! decision-point grid; non-participation at a decision point is encoded by
//! `available = 0`, never by a missing row.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Column bindings for the long CSV layout.
///
/// Identifier columns are read as opaque strings. `moderators` and `controls`
/// name the raw state columns copied into each row (a column may appear in
/// both lists). `available` is optional; when unbound every row is treated as
/// available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub cluster_id: String,
    pub individual_id: String,
    pub t: String,
    #[serde(default)]
    pub available: Option<String>,
    pub treatment: String,
    pub rand_prob: String,
    #[serde(default)]
    pub moderators: Vec<String>,
    #[serde(default)]
    pub controls: Vec<String>,
    pub outcome: String,
    /// Lag Δ of the proximal outcome stored in `outcome`.
    #[serde(default = "default_delta")]
    pub delta: u32,
}

fn default_delta() -> u32 {
    1
}

impl Schema {
    /// Schema used by the simulation generator: a single state column `s`
    /// bound as both moderator and control.
    pub fn simulation(delta: u32) -> Self {
        Schema {
            cluster_id: "cluster_id".into(),
            individual_id: "individual_id".into(),
            t: "decision_point".into(),
            available: Some("available".into()),
            treatment: "treatment".into(),
            rand_prob: "rand_prob".into(),
            moderators: vec!["s".into()],
            controls: vec!["s".into()],
            outcome: "y".into(),
            delta,
        }
    }

    /// Index of a named moderator column, if bound.
    pub fn moderator_index(&self, name: &str) -> Option<usize> {
        self.moderators.iter().position(|c| c == name)
    }

    /// Index of a named control column, if bound.
    pub fn control_index(&self, name: &str) -> Option<usize> {
        self.controls.iter().position(|c| c == name)
    }
}

/// One per-decision-point record.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRow {
    pub cluster_id: String,
    pub individual_id: String,
    /// Decision point index, 1-based.
    pub t: u32,
    /// Availability indicator; unavailable rows contribute zero to every
    /// estimating-equation summand but are retained in the panel.
    pub available: u8,
    pub treatment: u8,
    /// Randomization probability of treatment 1 given the history.
    pub rand_prob: f64,
    /// Raw moderator column values, in schema order.
    pub moderators: Vec<f64>,
    /// Raw control column values, in schema order.
    pub controls: Vec<f64>,
    /// Proximal outcome over the lag-Δ window starting at `t`.
    pub outcome: f64,
}

/// Rows of one individual, sorted by decision point.
#[derive(Debug, Clone)]
pub struct Individual {
    pub id: String,
    pub rows: Vec<ObservationRow>,
}

/// One cluster: its members and the union of their decision-point grids.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub id: String,
    pub members: Vec<Individual>,
    /// Sorted union of decision points observed in this cluster.
    pub grid: Vec<u32>,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Position of decision point `t` in the cluster grid.
    pub fn grid_index(&self, t: u32) -> Option<usize> {
        self.grid.binary_search(&t).ok()
    }
}

/// Immutable clustered panel. Construct via [`MRTDataset::from_rows`] or
/// [`load_csv`]; safe for concurrent reads once built.
#[derive(Debug, Clone)]
pub struct MRTDataset {
    schema: Schema,
    clusters: Vec<Cluster>,
    t_max: u32,
}

impl MRTDataset {
    /// Group rows by cluster then individual and sort by decision point.
    ///
    /// No validation is performed; call [`validate`] (or use [`load_csv`],
    /// which rejects invalid files) before estimating. Clusters and members
    /// are ordered by identifier so the result is independent of input row
    /// order.
    pub fn from_rows(schema: Schema, rows: Vec<ObservationRow>) -> Self {
        let mut groups: BTreeMap<String, BTreeMap<String, Vec<ObservationRow>>> = BTreeMap::new();
        for row in rows {
            groups
                .entry(row.cluster_id.clone())
                .or_default()
                .entry(row.individual_id.clone())
                .or_default()
                .push(row);
        }
        let mut clusters = Vec::with_capacity(groups.len());
        let mut t_max = 0;
        for (cid, members) in groups {
            let mut cluster = Cluster { id: cid, members: Vec::new(), grid: Vec::new() };
            let mut grid: Vec<u32> = Vec::new();
            for (iid, mut rows) in members {
                rows.sort_by_key(|r| r.t);
                for r in &rows {
                    t_max = t_max.max(r.t);
                    if let Err(pos) = grid.binary_search(&r.t) {
                        grid.insert(pos, r.t);
                    }
                }
                cluster.members.push(Individual { id: iid, rows });
            }
            cluster.grid = grid;
            clusters.push(cluster);
        }
        MRTDataset { schema, clusters, t_max }
    }

    /// Assemble a dataset from pre-built clusters (used by the simulator and
    /// by tests that need structurally unusual inputs, e.g. empty clusters).
    pub fn from_clusters(schema: Schema, clusters: Vec<Cluster>) -> Self {
        let t_max = clusters
            .iter()
            .flat_map(|c| c.grid.iter().copied())
            .max()
            .unwrap_or(0);
        MRTDataset { schema, clusters, t_max }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    /// Number of clusters M.
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Cluster sizes G_m, in cluster order.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Cluster::size).collect()
    }

    pub fn n_individuals(&self) -> usize {
        self.clusters.iter().map(Cluster::size).sum()
    }

    pub fn n_rows(&self) -> usize {
        self.clusters
            .iter()
            .map(|c| c.members.iter().map(|m| m.rows.len()).sum::<usize>())
            .sum()
    }

    /// Largest decision point in the data.
    pub fn t_max(&self) -> u32 {
        self.t_max
    }

    /// Lag Δ of the stored proximal outcome.
    pub fn delta(&self) -> u32 {
        self.schema.delta
    }
}

/// A single invariant violation, with row coordinates where applicable.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub cluster_id: String,
    pub individual_id: Option<String>,
    pub t: Option<u32>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cluster {}", self.cluster_id)?;
        if let Some(ind) = &self.individual_id {
            write!(f, ", individual {ind}")?;
        }
        if let Some(t) = self.t {
            write!(f, ", t={t}")?;
        }
        write!(f, ": {}", self.message)
    }
}

/// Check every dataset invariant and return all violations in deterministic
/// order (clusters, members, and rows are already sorted by identifier).
/// An empty result means the dataset is valid.
pub fn validate(ds: &MRTDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    if ds.clusters.is_empty() {
        out.push(Violation {
            cluster_id: String::new(),
            individual_id: None,
            t: None,
            message: "empty dataset".into(),
        });
        return out;
    }
    for cluster in &ds.clusters {
        if cluster.members.is_empty() {
            out.push(Violation {
                cluster_id: cluster.id.clone(),
                individual_id: None,
                t: None,
                message: "empty cluster".into(),
            });
            continue;
        }
        for member in &cluster.members {
            let mut prev_t: Option<u32> = None;
            for row in &member.rows {
                let at = |message: String| Violation {
                    cluster_id: cluster.id.clone(),
                    individual_id: Some(member.id.clone()),
                    t: Some(row.t),
                    message,
                };
                if row.t == 0 {
                    out.push(at("decision point must be >= 1".into()));
                }
                if prev_t == Some(row.t) {
                    out.push(at("duplicate decision point".into()));
                }
                prev_t = Some(row.t);
                if !(row.rand_prob > 0.0 && row.rand_prob < 1.0) {
                    out.push(at(format!(
                        "positivity violated: rand_prob {} outside (0,1)",
                        row.rand_prob
                    )));
                }
                if row.treatment > 1 {
                    out.push(at(format!("treatment {} not in {{0,1}}", row.treatment)));
                }
                if row.available > 1 {
                    out.push(at(format!("available {} not in {{0,1}}", row.available)));
                }
                if !row.outcome.is_finite() {
                    out.push(at("outcome is not finite".into()));
                }
            }
            // Shared grid: gaps are only allowed through available=0 rows,
            // so every member must carry a row at every grid point.
            if member.rows.len() < cluster.grid.len() {
                let mut have = member.rows.iter().map(|r| r.t).peekable();
                for &t in &cluster.grid {
                    while have.peek().is_some_and(|&h| h < t) {
                        have.next();
                    }
                    if have.peek() == Some(&t) {
                        have.next();
                    } else {
                        out.push(Violation {
                            cluster_id: cluster.id.clone(),
                            individual_id: Some(member.id.clone()),
                            t: Some(t),
                            message: "missing decision point (cluster grid must be shared)".into(),
                        });
                    }
                }
            }
        }
    }
    out
}

/// Errors from CSV ingestion.
#[derive(Debug, Error)]
pub enum PanelError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("schema error: column `{0}` not found in header")]
    MissingColumn(String),
    #[error("parse error at data row {row}: column `{column}`: {message}")]
    Parse { row: usize, column: String, message: String },
    #[error("validation failed with {} violation(s):\n{}", .0.len(),
            .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
}

struct ColumnIndex {
    cluster: usize,
    individual: usize,
    t: usize,
    available: Option<usize>,
    treatment: usize,
    rand_prob: usize,
    moderators: Vec<usize>,
    controls: Vec<usize>,
    outcome: usize,
}

fn resolve_columns(header: &csv::StringRecord, schema: &Schema) -> Result<ColumnIndex, PanelError> {
    let find = |name: &str| -> Result<usize, PanelError> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PanelError::MissingColumn(name.to_string()))
    };
    Ok(ColumnIndex {
        cluster: find(&schema.cluster_id)?,
        individual: find(&schema.individual_id)?,
        t: find(&schema.t)?,
        available: schema.available.as_deref().map(find).transpose()?,
        treatment: find(&schema.treatment)?,
        rand_prob: find(&schema.rand_prob)?,
        moderators: schema.moderators.iter().map(|c| find(c)).collect::<Result<_, _>>()?,
        controls: schema.controls.iter().map(|c| find(c)).collect::<Result<_, _>>()?,
        outcome: find(&schema.outcome)?,
    })
}

fn parse_f64(record: &csv::StringRecord, idx: usize, column: &str, row: usize) -> Result<f64, PanelError> {
    let raw = record.get(idx).unwrap_or("");
    raw.trim().parse::<f64>().map_err(|_| PanelError::Parse {
        row,
        column: column.to_string(),
        message: format!("`{raw}` is not numeric"),
    })
}

fn parse_small_int(
    record: &csv::StringRecord,
    idx: usize,
    column: &str,
    row: usize,
) -> Result<u8, PanelError> {
    let v = parse_f64(record, idx, column, row)?;
    if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
        return Err(PanelError::Parse {
            row,
            column: column.to_string(),
            message: format!("`{v}` is not a small non-negative integer"),
        });
    }
    Ok(v as u8)
}

/// Load a long-format CSV (UTF-8, comma separated, header row required) and
/// validate it. Any invariant violation rejects the whole file, listing every
/// violation found.
pub fn load_csv<P: AsRef<Path>>(path: P, schema: &Schema) -> Result<MRTDataset, PanelError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.clone();
    let cols = resolve_columns(&header, schema)?;

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = i + 1; // 1-based data row, excluding header
        let t = {
            let v = parse_f64(&record, cols.t, &schema.t, row_no)?;
            if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
                return Err(PanelError::Parse {
                    row: row_no,
                    column: schema.t.clone(),
                    message: format!("`{v}` is not a non-negative integer decision point"),
                });
            }
            v as u32
        };
        let available = match cols.available {
            Some(idx) => parse_small_int(&record, idx, schema.available.as_ref().unwrap(), row_no)?,
            None => 1,
        };
        rows.push(ObservationRow {
            cluster_id: record.get(cols.cluster).unwrap_or("").to_string(),
            individual_id: record.get(cols.individual).unwrap_or("").to_string(),
            t,
            available,
            treatment: parse_small_int(&record, cols.treatment, &schema.treatment, row_no)?,
            rand_prob: parse_f64(&record, cols.rand_prob, &schema.rand_prob, row_no)?,
            moderators: cols
                .moderators
                .iter()
                .zip(&schema.moderators)
                .map(|(&idx, name)| parse_f64(&record, idx, name, row_no))
                .collect::<Result<_, _>>()?,
            controls: cols
                .controls
                .iter()
                .zip(&schema.controls)
                .map(|(&idx, name)| parse_f64(&record, idx, name, row_no))
                .collect::<Result<_, _>>()?,
            outcome: parse_f64(&record, cols.outcome, &schema.outcome, row_no)?,
        });
    }

    let ds = MRTDataset::from_rows(schema.clone(), rows);
    let violations = validate(&ds);
    if violations.is_empty() {
        Ok(ds)
    } else {
        Err(PanelError::Invalid(violations))
    }
}

/// Write a dataset back to CSV using its schema's column names. Numeric text
/// uses Rust's shortest round-trip float formatting, so `load_csv ∘ write_csv`
/// is the identity on every stored value.
pub fn write_csv<P: AsRef<Path>>(ds: &MRTDataset, path: P) -> Result<(), PanelError> {
    let mut writer = csv::Writer::from_path(path)?;
    write_csv_impl(ds, &mut writer)
}

/// Same as [`write_csv`] but into any writer (used for in-memory round trips).
pub fn write_csv_to<W: std::io::Write>(ds: &MRTDataset, w: W) -> Result<(), PanelError> {
    let mut writer = csv::Writer::from_writer(w);
    write_csv_impl(ds, &mut writer)
}

fn write_csv_impl<W: std::io::Write>(
    ds: &MRTDataset,
    writer: &mut csv::Writer<W>,
) -> Result<(), PanelError> {
    let schema = &ds.schema;
    // A column bound as both moderator and control is emitted once.
    let mut header: Vec<&str> = vec![&schema.cluster_id, &schema.individual_id, &schema.t];
    if let Some(a) = &schema.available {
        header.push(a);
    }
    header.push(&schema.treatment);
    header.push(&schema.rand_prob);
    for m in &schema.moderators {
        header.push(m);
    }
    let extra_controls: Vec<usize> = (0..schema.controls.len())
        .filter(|&i| !schema.moderators.contains(&schema.controls[i]))
        .collect();
    for &i in &extra_controls {
        header.push(&schema.controls[i]);
    }
    header.push(&schema.outcome);
    writer.write_record(&header)?;

    for cluster in &ds.clusters {
        for member in &cluster.members {
            for row in &member.rows {
                let mut record: Vec<String> = vec![
                    row.cluster_id.clone(),
                    row.individual_id.clone(),
                    row.t.to_string(),
                ];
                if schema.available.is_some() {
                    record.push(row.available.to_string());
                }
                record.push(row.treatment.to_string());
                record.push(row.rand_prob.to_string());
                for v in &row.moderators {
                    record.push(v.to_string());
                }
                for &i in &extra_controls {
                    record.push(row.controls[i].to_string());
                }
                record.push(row.outcome.to_string());
                writer.write_record(&record)?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_row(c: &str, i: &str, t: u32, a: u8, p: f64, s: f64, y: f64) -> ObservationRow {
        ObservationRow {
            cluster_id: c.into(),
            individual_id: i.into(),
            t,
            available: 1,
            treatment: a,
            rand_prob: p,
            moderators: vec![s],
            controls: vec![s],
            outcome: y,
        }
    }

    fn toy_rows() -> Vec<ObservationRow> {
        let mut rows = Vec::new();
        for (c, i) in [("c1", "i1"), ("c1", "i2"), ("c2", "i3"), ("c2", "i4")] {
            for t in 1..=3 {
                rows.push(toy_row(c, i, t, (t % 2) as u8, 0.5, 1.0, 0.1 * t as f64));
            }
        }
        rows
    }

    #[test]
    fn groups_toy_dataset() {
        let ds = MRTDataset::from_rows(Schema::simulation(1), toy_rows());
        assert_eq!(ds.n_clusters(), 2);
        assert_eq!(ds.cluster_sizes(), vec![2, 2]);
        assert_eq!(ds.t_max(), 3);
        assert!(validate(&ds).is_empty());
    }

    #[test]
    fn grouping_is_order_insensitive() {
        let mut shuffled = toy_rows();
        shuffled.reverse();
        shuffled.swap(0, 5);
        let a = MRTDataset::from_rows(Schema::simulation(1), toy_rows());
        let b = MRTDataset::from_rows(Schema::simulation(1), shuffled);
        for (ca, cb) in a.clusters().iter().zip(b.clusters()) {
            assert_eq!(ca.id, cb.id);
            assert_eq!(ca.grid, cb.grid);
            for (ma, mb) in ca.members.iter().zip(&cb.members) {
                assert_eq!(ma.id, mb.id);
                assert_eq!(ma.rows, mb.rows);
            }
        }
    }

    #[test]
    fn validate_flags_positivity() {
        let mut rows = toy_rows();
        rows[0].rand_prob = 1.0;
        let ds = MRTDataset::from_rows(Schema::simulation(1), rows);
        let violations = validate(&ds);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].message.contains("positivity violated"));
    }

    #[test]
    fn validate_flags_bad_treatment() {
        let mut rows = toy_rows();
        rows[3].treatment = 2;
        let ds = MRTDataset::from_rows(Schema::simulation(1), rows);
        let violations = validate(&ds);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].message.contains("treatment 2"));
    }

    #[test]
    fn validate_flags_duplicates_and_gaps() {
        let mut rows = toy_rows();
        rows.push(toy_row("c1", "i1", 2, 1, 0.5, 1.0, 0.0)); // duplicate (c1,i1,2)
        rows.retain(|r| !(r.cluster_id == "c2" && r.individual_id == "i3" && r.t == 2));
        let ds = MRTDataset::from_rows(Schema::simulation(1), rows);
        let violations = validate(&ds);
        assert!(violations.iter().any(|v| v.message.contains("duplicate decision point")));
        assert!(violations
            .iter()
            .any(|v| v.message.contains("missing decision point") && v.t == Some(2)));
    }

    #[test]
    fn validate_flags_empty_cluster() {
        let schema = Schema::simulation(1);
        let mut ds = MRTDataset::from_rows(schema.clone(), toy_rows());
        let mut clusters = ds.clusters().to_vec();
        clusters.push(Cluster { id: "c3".into(), members: vec![], grid: vec![] });
        ds = MRTDataset::from_clusters(schema, clusters);
        let violations = validate(&ds);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].message, "empty cluster");
    }

    #[test]
    fn csv_round_trip_is_identity() {
        let ds = MRTDataset::from_rows(Schema::simulation(1), {
            // Values that stress float formatting.
            let mut rows = toy_rows();
            rows[0].outcome = -1.234567890123456e-7;
            rows[1].rand_prob = 1.0 / 3.0;
            rows[2].moderators[0] = f64::MIN_POSITIVE;
            rows[2].controls[0] = f64::MIN_POSITIVE;
            rows
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path, ds.schema()).unwrap();
        assert_eq!(ds.n_rows(), back.n_rows());
        for (ca, cb) in ds.clusters().iter().zip(back.clusters()) {
            for (ma, mb) in ca.members.iter().zip(&cb.members) {
                assert_eq!(ma.rows, mb.rows);
            }
        }
    }

    #[test]
    fn load_reports_missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "cluster_id,individual_id,decision_point\n").unwrap();
        let err = load_csv(&path, &Schema::simulation(1)).unwrap_err();
        match err {
            PanelError::MissingColumn(c) => assert_eq!(c, "available"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_reports_parse_error_with_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "cluster_id,individual_id,decision_point,available,treatment,rand_prob,s,y\n\
             c1,i1,1,1,0,0.5,1.0,0.2\n\
             c1,i1,2,1,0,oops,1.0,0.2\n",
        )
        .unwrap();
        let err = load_csv(&path, &Schema::simulation(1)).unwrap_err();
        match err {
            PanelError::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "rand_prob");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_rejects_invalid_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "cluster_id,individual_id,decision_point,available,treatment,rand_prob,s,y\n\
             c1,i1,1,1,0,1.0,1.0,0.2\n",
        )
        .unwrap();
        let err = load_csv(&path, &Schema::simulation(1)).unwrap_err();
        assert!(err.to_string().contains("positivity violated"));
    }
}
