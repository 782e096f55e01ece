//! Individual-level records for a multi-site randomized trial, CSV ingestion,
//! and structural validation.
//!
//! A dataset is a flat list of [`IndividualRecord`]s plus an index from site id
//! to the records of that site. Sites keep the order in which they first
//! appear in the input so that every downstream report is deterministic.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("bad value {value:?} in row {row}, column `{column}`: {reason}")]
    BadValue {
        row: usize,
        column: String,
        value: String,
        reason: String,
    },
    #[error("dataset has no records")]
    EmptyDataset,
    #[error("record {row} has {got} covariates, expected {expected}")]
    CovariateLength {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DataError {
    /// Row and column of a `BadValue`, if this is one.
    pub fn bad_value_location(&self) -> Option<(usize, &str)> {
        match self {
            DataError::BadValue { row, column, .. } => Some((*row, column.as_str())),
            _ => None,
        }
    }
}

/// Randomized assignment: offered the intervention or not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Control = 0,
    Treatment = 1,
}

impl Arm {
    pub const ALL: [Arm; 2] = [Arm::Control, Arm::Treatment];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Control => f.write_str("control"),
            Arm::Treatment => f.write_str("treatment"),
        }
    }
}

/// Observed destination: the intervention school or one of the two
/// alternatives ranked by quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Destination {
    Echs = 0,
    LowQuality = 1,
    HighQuality = 2,
}

impl Destination {
    pub const ALL: [Destination; 3] = [
        Destination::Echs,
        Destination::LowQuality,
        Destination::HighQuality,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// The five principal strata left after ruling out defiers and
/// flip-floppers. The four excluded cells have no representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    EchsAlwaysTaker = 0,
    LowQualityAlwaysTaker = 1,
    HighQualityAlwaysTaker = 2,
    LowQualityComplier = 3,
    HighQualityComplier = 4,
}

impl Stratum {
    pub const ALL: [Stratum; 5] = [
        Stratum::EchsAlwaysTaker,
        Stratum::LowQualityAlwaysTaker,
        Stratum::HighQualityAlwaysTaker,
        Stratum::LowQualityComplier,
        Stratum::HighQualityComplier,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Stratum::EchsAlwaysTaker => "eat",
            Stratum::LowQualityAlwaysTaker => "lat",
            Stratum::HighQualityAlwaysTaker => "hat",
            Stratum::LowQualityComplier => "lc",
            Stratum::HighQualityComplier => "hc",
        }
    }

    pub fn is_complier(self) -> bool {
        matches!(
            self,
            Stratum::LowQualityComplier | Stratum::HighQualityComplier
        )
    }

    /// Destination an individual of this stratum attends under `arm`.
    pub fn destination(self, arm: Arm) -> Destination {
        match (self, arm) {
            (Stratum::EchsAlwaysTaker, _) => Destination::Echs,
            (Stratum::LowQualityAlwaysTaker, _) => Destination::LowQuality,
            (Stratum::HighQualityAlwaysTaker, _) => Destination::HighQuality,
            (Stratum::LowQualityComplier, Arm::Treatment) => Destination::Echs,
            (Stratum::LowQualityComplier, Arm::Control) => Destination::LowQuality,
            (Stratum::HighQualityComplier, Arm::Treatment) => Destination::Echs,
            (Stratum::HighQualityComplier, Arm::Control) => Destination::HighQuality,
        }
    }

    /// Inverse of [`Stratum::destination`] over both arms. `None` for the
    /// four excluded combinations.
    pub fn from_destinations(treated: Destination, control: Destination) -> Option<Stratum> {
        use Destination::*;
        match (treated, control) {
            (Echs, Echs) => Some(Stratum::EchsAlwaysTaker),
            (Echs, LowQuality) => Some(Stratum::LowQualityComplier),
            (Echs, HighQuality) => Some(Stratum::HighQualityComplier),
            (LowQuality, LowQuality) => Some(Stratum::LowQualityAlwaysTaker),
            (HighQuality, HighQuality) => Some(Stratum::HighQualityAlwaysTaker),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub site_id: String,
    pub arm: Arm,
    pub destination: Destination,
    pub outcome: bool,
    pub weight: f64,
    pub covariates: Vec<f64>,
}

impl IndividualRecord {
    pub fn y(&self) -> f64 {
        if self.outcome {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyDataset {
    records: Vec<IndividualRecord>,
    covariate_names: Vec<String>,
    site_index: IndexMap<String, Vec<usize>>,
}

impl StudyDataset {
    pub fn new(
        records: Vec<IndividualRecord>,
        covariate_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if records.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let mut site_index: IndexMap<String, Vec<usize>> = IndexMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.covariates.len() != covariate_names.len() {
                return Err(DataError::CovariateLength {
                    row: i + 1,
                    got: r.covariates.len(),
                    expected: covariate_names.len(),
                });
            }
            if !(r.weight.is_finite() && r.weight >= 0.0) {
                return Err(DataError::BadValue {
                    row: i + 1,
                    column: "weight".into(),
                    value: r.weight.to_string(),
                    reason: "weights must be finite and nonnegative".into(),
                });
            }
            site_index.entry(r.site_id.clone()).or_default().push(i);
        }
        Ok(Self {
            records,
            covariate_names,
            site_index,
        })
    }

    pub fn records(&self) -> &[IndividualRecord] {
        &self.records
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn site_index(&self) -> &IndexMap<String, Vec<usize>> {
        &self.site_index
    }

    pub fn site_ids(&self) -> impl Iterator<Item = &str> {
        self.site_index.keys().map(String::as_str)
    }

    pub fn num_sites(&self) -> usize {
        self.site_index.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of one site, in input order.
    pub fn site_records(&self, site_id: &str) -> Option<Vec<&IndividualRecord>> {
        self.site_index
            .get(site_id)
            .map(|idx| idx.iter().map(|&i| &self.records[i]).collect())
    }

    pub fn total_weight(&self) -> f64 {
        self.records.iter().map(|r| r.weight).sum()
    }
}

/// Labels used for the three destinations in the input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DestinationLabels {
    pub echs: String,
    pub high_quality: String,
    pub low_quality: String,
}

impl Default for DestinationLabels {
    fn default() -> Self {
        Self {
            echs: "e".into(),
            high_quality: "hq".into(),
            low_quality: "lq".into(),
        }
    }
}

impl DestinationLabels {
    pub fn parse(&self, raw: &str) -> Option<Destination> {
        let raw = raw.trim();
        if raw == self.echs {
            Some(Destination::Echs)
        } else if raw == self.high_quality {
            Some(Destination::HighQuality)
        } else if raw == self.low_quality {
            Some(Destination::LowQuality)
        } else {
            None
        }
    }

    pub fn label(&self, d: Destination) -> &str {
        match d {
            Destination::Echs => &self.echs,
            Destination::HighQuality => &self.high_quality,
            Destination::LowQuality => &self.low_quality,
        }
    }
}

/// Mapping from logical fields to CSV header names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub site: String,
    pub arm: String,
    pub destination: String,
    pub outcome: String,
    /// When absent every record gets weight 1.
    pub weight: Option<String>,
    pub covariates: Vec<String>,
    pub labels: DestinationLabels,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            site: "site".into(),
            arm: "z".into(),
            destination: "d".into(),
            outcome: "y".into(),
            weight: None,
            covariates: Vec::new(),
            labels: DestinationLabels::default(),
        }
    }
}

pub fn ingest_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<StudyDataset, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, schema)
}

/// Parses CSV from any reader. Row numbers in errors count data rows from 1,
/// excluding the header.
pub fn read_csv<R: Read>(reader: R, schema: &ColumnSchema) -> Result<StudyDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let site_col = find(&schema.site)?;
    let arm_col = find(&schema.arm)?;
    let dest_col = find(&schema.destination)?;
    let outcome_col = find(&schema.outcome)?;
    let weight_col = schema.weight.as_deref().map(find).transpose()?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>, _>>()?;

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let row_no = i + 1;
        let field = |col: usize, name: &str| -> Result<&str, DataError> {
            match row.get(col) {
                Some(v) if !v.is_empty() => Ok(v),
                other => Err(DataError::BadValue {
                    row: row_no,
                    column: name.to_string(),
                    value: other.unwrap_or("").to_string(),
                    reason: "missing value".into(),
                }),
            }
        };
        let bad = |name: &str, value: &str, reason: &str| DataError::BadValue {
            row: row_no,
            column: name.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };

        let site_id = field(site_col, &schema.site)?.to_string();
        let raw_arm = field(arm_col, &schema.arm)?;
        let arm = match parse_binary(raw_arm) {
            Some(false) => Arm::Control,
            Some(true) => Arm::Treatment,
            None => return Err(bad(&schema.arm, raw_arm, "arm must be 0 or 1")),
        };
        let raw_dest = field(dest_col, &schema.destination)?;
        let destination = schema.labels.parse(raw_dest).ok_or_else(|| {
            bad(
                &schema.destination,
                raw_dest,
                "destination does not match any configured label",
            )
        })?;
        let raw_y = field(outcome_col, &schema.outcome)?;
        let outcome = parse_binary(raw_y)
            .ok_or_else(|| bad(&schema.outcome, raw_y, "outcome must be 0 or 1"))?;
        let weight = match (weight_col, schema.weight.as_deref()) {
            (Some(col), Some(name)) => {
                let raw = field(col, name)?;
                match raw.parse::<f64>() {
                    Ok(w) if w.is_finite() && w >= 0.0 => w,
                    _ => return Err(bad(name, raw, "weight must be a nonnegative number")),
                }
            }
            _ => 1.0,
        };
        let mut covariates = Vec::with_capacity(cov_cols.len());
        for (&col, name) in cov_cols.iter().zip(&schema.covariates) {
            let raw = field(col, name)?;
            match raw.parse::<f64>() {
                Ok(x) if x.is_finite() => covariates.push(x),
                _ => return Err(bad(name, raw, "covariate must be a finite number")),
            }
        }
        records.push(IndividualRecord {
            site_id,
            arm,
            destination,
            outcome,
            weight,
            covariates,
        });
    }
    StudyDataset::new(records, schema.covariates.clone())
}

fn parse_binary(raw: &str) -> Option<bool> {
    match raw.trim() {
        "0" => Some(false),
        "1" => Some(true),
        other => match other.parse::<f64>() {
            Ok(v) if v == 0.0 => Some(false),
            Ok(v) if v == 1.0 => Some(true),
            _ => None,
        },
    }
}

/// Writes the dataset with the headers named in `schema`. Covariates are
/// written under the schema's covariate names, which must match the dataset
/// in count. A weight column is written only if the schema names one.
pub fn write_csv<W: Write>(
    dataset: &StudyDataset,
    schema: &ColumnSchema,
    writer: W,
) -> Result<(), DataError> {
    if schema.covariates.len() != dataset.covariate_names().len() {
        return Err(DataError::CovariateLength {
            row: 0,
            got: schema.covariates.len(),
            expected: dataset.covariate_names().len(),
        });
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        schema.site.clone(),
        schema.arm.clone(),
        schema.destination.clone(),
        schema.outcome.clone(),
    ];
    if let Some(wc) = &schema.weight {
        header.push(wc.clone());
    }
    header.extend(schema.covariates.iter().cloned());
    w.write_record(&header)?;
    for r in dataset.records() {
        let mut row = vec![
            r.site_id.clone(),
            r.arm.code().to_string(),
            schema.labels.label(r.destination).to_string(),
            u8::from(r.outcome).to_string(),
        ];
        if schema.weight.is_some() {
            row.push(r.weight.to_string());
        }
        row.extend(r.covariates.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiagnosticKind {
    MissingArm { arm: Arm },
    ZeroWeightSite,
    NoOutcomeVariability,
    TooFewSites { sites: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub site_id: Option<String>,
    #[serde(flatten)]
    pub kind: DiagnosticKind,
    pub message: String,
}

/// Structural warnings. Never fails; an empty list means the dataset is
/// usable as is.
pub fn validate(dataset: &StudyDataset) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if dataset.num_sites() < 2 {
        out.push(Diagnostic {
            site_id: None,
            kind: DiagnosticKind::TooFewSites {
                sites: dataset.num_sites(),
            },
            message: format!(
                "{} site(s); site-level regression needs at least 2",
                dataset.num_sites()
            ),
        });
    }
    for (site, idx) in dataset.site_index() {
        let recs: Vec<_> = idx.iter().map(|&i| &dataset.records()[i]).collect();
        for arm in Arm::ALL {
            if !recs.iter().any(|r| r.arm == arm) {
                out.push(Diagnostic {
                    site_id: Some(site.clone()),
                    kind: DiagnosticKind::MissingArm { arm },
                    message: format!("site {site} has no {arm} records"),
                });
            }
        }
        if recs.iter().all(|r| r.weight == 0.0) {
            out.push(Diagnostic {
                site_id: Some(site.clone()),
                kind: DiagnosticKind::ZeroWeightSite,
                message: format!("site {site} has zero total weight"),
            });
        }
        let first = recs[0].outcome;
        if recs.iter().all(|r| r.outcome == first) {
            out.push(Diagnostic {
                site_id: Some(site.clone()),
                kind: DiagnosticKind::NoOutcomeVariability,
                message: format!("site {site} has no outcome variability (all y = {})", u8::from(first)),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const FOUR_ROWS: &str = "site,z,d,y,w\nA,1,e,1,1.0\nA,0,lq,0,2.0\nB,1,e,0,1.5\nB,0,hq,1,1\n";

    fn schema_with_weight() -> ColumnSchema {
        ColumnSchema {
            weight: Some("w".into()),
            ..ColumnSchema::default()
        }
    }

    #[test]
    fn ingests_four_rows() {
        let ds = read_csv(FOUR_ROWS.as_bytes(), &schema_with_weight()).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.num_sites(), 2);
        assert_eq!(ds.records()[1].weight, 2.0);
        assert_eq!(ds.records()[3].destination, Destination::HighQuality);
    }

    #[test]
    fn bad_arm_reports_row_and_column() {
        let mut csv = String::from("site,z,d,y\n");
        for i in 0..6 {
            csv.push_str(&format!("S,{},e,1\n", i % 2));
        }
        csv.push_str("S,2,e,1\n");
        let err = read_csv(csv.as_bytes(), &ColumnSchema::default()).unwrap_err();
        assert_eq!(err.bad_value_location(), Some((7, "z")));
    }

    #[test]
    fn missing_column_and_empty() {
        let err = read_csv("site,z,d\nA,1,e\n".as_bytes(), &ColumnSchema::default()).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(c) if c == "y"));
        let err = read_csv("site,z,d,y\n".as_bytes(), &ColumnSchema::default()).unwrap_err();
        assert!(matches!(err, DataError::EmptyDataset));
    }

    #[test]
    fn missing_field_rejected() {
        let err = read_csv("site,z,d,y\nA,1,,1\n".as_bytes(), &ColumnSchema::default()).unwrap_err();
        assert_eq!(err.bad_value_location(), Some((1, "d")));
    }

    #[test]
    fn custom_labels() {
        let schema = ColumnSchema {
            labels: DestinationLabels {
                echs: "E".into(),
                high_quality: "good".into(),
                low_quality: "poor".into(),
            },
            ..ColumnSchema::default()
        };
        let ds = read_csv("site,z,d,y\nA,1,E,1\nA,0,poor,0\n".as_bytes(), &schema).unwrap();
        assert_eq!(ds.records()[1].destination, Destination::LowQuality);
    }

    #[test]
    fn site_index_partitions_records() {
        let ds = read_csv(FOUR_ROWS.as_bytes(), &schema_with_weight()).unwrap();
        let total: usize = ds.site_index().values().map(Vec::len).sum();
        assert_eq!(total, ds.len());
        assert_eq!(ds.site_ids().collect::<Vec<_>>(), vec!["A", "B"]);
    }

    #[test]
    fn strata_destination_mapping_is_bijective() {
        for s in Stratum::ALL {
            let t = s.destination(Arm::Treatment);
            let c = s.destination(Arm::Control);
            assert_eq!(Stratum::from_destinations(t, c), Some(s));
        }
        assert_eq!(
            Stratum::from_destinations(Destination::LowQuality, Destination::Echs),
            None
        );
        assert_eq!(
            Stratum::from_destinations(Destination::HighQuality, Destination::LowQuality),
            None
        );
    }

    #[test]
    fn validate_flags_constant_outcome_and_missing_arm() {
        let csv = "site,z,d,y\nA,1,e,1\nA,0,lq,1\nB,1,e,1\nB,0,lq,0\nC,1,e,0\nC,1,e,1\n";
        let ds = read_csv(csv.as_bytes(), &ColumnSchema::default()).unwrap();
        let diags = validate(&ds);
        assert!(diags.iter().any(|d| d.site_id.as_deref() == Some("A")
            && d.kind == DiagnosticKind::NoOutcomeVariability
            && d.message.contains("no outcome variability")));
        assert!(diags.iter().any(|d| d.site_id.as_deref() == Some("C")
            && d.kind == DiagnosticKind::MissingArm { arm: Arm::Control }));
        assert!(!diags.iter().any(|d| d.site_id.as_deref() == Some("B")));
    }

    #[test]
    fn balanced_sites_have_no_warnings() {
        let csv = "site,z,d,y\nA,1,e,1\nA,0,lq,0\nB,1,e,0\nB,0,lq,1\n";
        let ds = read_csv(csv.as_bytes(), &ColumnSchema::default()).unwrap();
        assert!(validate(&ds).is_empty());
    }

    #[test]
    fn zero_weight_site_flagged() {
        let csv = "site,z,d,y,w\nA,1,e,1,0\nA,0,lq,0,0\nB,1,e,0,1\nB,0,lq,1,1\n";
        let ds = read_csv(csv.as_bytes(), &schema_with_weight()).unwrap();
        assert!(validate(&ds)
            .iter()
            .any(|d| d.kind == DiagnosticKind::ZeroWeightSite));
    }
}
