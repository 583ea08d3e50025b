//! CSV tables. Column orders are fixed; missing values are empty cells.

use std::path::Path;

use serde::Serialize;
use vct_core::anatomy::{ClassConsistency, ConsistencyTable};
use vct_core::composition::CompositionReport;
use vct_core::trial::{AttributionBlock, TrialReport};
use vct_core::volume::structure;

use crate::error::{self, Result};

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Rows to CSV bytes.
pub fn to_csv(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Serializable records to CSV bytes.
pub fn records_to_csv<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    error::write(path, &to_csv(header, rows))
}

pub const COHORT_COLUMNS: [&str; 7] = [
    "subject_id",
    "body_mass_kg",
    "fat_pct",
    "muscle_pct",
    "bone_density_hu",
    "body_volume_l",
    "height_mm",
];

pub fn cohort_rows<'a>(reports: impl IntoIterator<Item = (&'a str, &'a CompositionReport)>) -> Vec<Vec<String>> {
    reports
        .into_iter()
        .map(|(id, r)| {
            vec![
                id.to_string(),
                r.body_mass_kg.to_string(),
                r.fat_pct.to_string(),
                r.muscle_pct.to_string(),
                num(r.bone_density_hu),
                r.body_volume_l.to_string(),
                num(r.height.as_ref().map(|h| h.total_mm)),
            ]
        })
        .collect()
}

pub const Z_SCORE_COLUMNS: [&str; 12] = [
    "population",
    "attr_dist",
    "sample_type",
    "n",
    "mae",
    "mae_ci_low",
    "mae_ci_high",
    "z_vs_real",
    "z_ci_low",
    "z_ci_high",
    "p_value",
    "verdict",
];

pub fn z_score_rows(report: &TrialReport) -> Vec<Vec<String>> {
    report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.population.label().to_string(),
                r.attr_dist.label().to_string(),
                r.sample_type.label().to_string(),
                r.n.to_string(),
                r.mae.to_string(),
                r.mae_ci.lo.to_string(),
                r.mae_ci.hi.to_string(),
                num(r.z_vs_real),
                num(r.z_ci.map(|c| c.lo)),
                num(r.z_ci.map(|c| c.hi)),
                num(r.p_value),
                r.verdict.label().to_string(),
            ]
        })
        .collect()
}

/// Error–attribute correlations: one column per sample type, then the
/// p-value of each non-reference column against the first.
pub fn bias_corr_table(block: &AttributionBlock) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["attribute".to_string()];
    header.extend(block.samples.iter().map(|s| s.sample_type.clone()));
    header.extend(block.samples.iter().skip(1).map(|s| format!("p_{}", s.sample_type)));
    let rows = block
        .features
        .iter()
        .enumerate()
        .map(|(f, name)| {
            let mut row = vec![name.clone()];
            row.extend(block.samples.iter().map(|s| num(s.correlations[f])));
            row.extend(block.samples.iter().skip(1).map(|s| num(s.correlation_p[f])));
            row
        })
        .collect();
    (header, rows)
}

/// Importances per sample type, followed by each column's importance
/// correlation with the first and the error regressor's holdout MAE.
pub fn feat_import_table(block: &AttributionBlock) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["feature".to_string()];
    header.extend(block.samples.iter().map(|s| s.sample_type.clone()));
    let mut rows: Vec<Vec<String>> = block
        .features
        .iter()
        .enumerate()
        .map(|(f, name)| {
            let mut row = vec![name.clone()];
            row.extend(block.samples.iter().map(|s| s.importance[f].to_string()));
            row
        })
        .collect();
    if let Some(first) = block.samples.first() {
        let mut corr = vec![format!("importance_corr_vs_{}", first.sample_type)];
        corr.extend(
            block
                .samples
                .iter()
                .map(|s| num(block.importance_correlation(&first.sample_type, &s.sample_type))),
        );
        rows.push(corr);
    }
    let mut mae = vec!["regressor_mae".to_string()];
    mae.extend(block.samples.iter().map(|s| s.regression_mae.to_string()));
    rows.push(mae);
    (header, rows)
}

pub const CONSISTENCY_COLUMNS: [&str; 7] = [
    "class",
    "dice_mean",
    "dice_std",
    "volume_corr",
    "centroid_R",
    "centroid_A",
    "centroid_S",
];

pub fn consistency_rows(table: &ConsistencyTable) -> Vec<Vec<String>> {
    let row = |name: String, c: &ClassConsistency| {
        vec![
            name,
            num(c.dice_mean),
            num(c.dice_std),
            num(c.volume_corr),
            num(c.centroid_r),
            num(c.centroid_a),
            num(c.centroid_s),
        ]
    };
    let mut rows: Vec<Vec<String>> = table
        .per_class
        .iter()
        .map(|(id, c)| row(structure::name(*id).map_or_else(|| id.to_string(), str::to_string), c))
        .collect();
    rows.push(row("Average".into(), &table.average));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_values_are_empty_cells() {
        let bytes = to_csv(&["a", "b"], &[vec![num(None), num(Some(0.5))]]);
        assert_eq!(String::from_utf8(bytes).unwrap(), "a,b\n,0.5\n");
    }

    #[test]
    fn consistency_has_average_row() {
        let mut t = ConsistencyTable::default();
        t.per_class.insert(
            structure::BRAIN,
            ClassConsistency {
                dice_mean: Some(1.0),
                ..Default::default()
            },
        );
        let rows = consistency_rows(&t);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0][0], "brain");
        assert_eq!(rows[1][0], "Average");
    }
}
