use std::collections::BTreeMap;
use std::fs;

use popgraph::csvio::{load_csv, write_csv, CsvSchema, DatasetMetadata};
use popgraph::Error;
use popgraph_core::dataio::{generate_synthetic, ColumnKind, SyntheticConfig};

fn kinds(pairs: &[(&str, ColumnKind)]) -> BTreeMap<String, ColumnKind> {
    pairs.iter().map(|&(n, k)| (n.to_owned(), k)).collect()
}

fn small_schema(path: &std::path::Path) -> CsvSchema {
    CsvSchema::new(
        path,
        kinds(&[
            ("sex", ColumnKind::NonImaging),
            ("bmi", ColumnKind::NonImaging),
            ("vol", ColumnKind::Imaging),
            ("thick", ColumnKind::Feature),
        ]),
    )
}

#[test]
fn missing_cell_drops_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    fs::write(
        &path,
        "id,sex,bmi,vol,thick,age\n\
         a,0,22.5,1.1,3.0,50\n\
         b,1,,1.2,3.1,61\n\
         c,1,24.0,1.3,3.2,70\n\
         d,0,25.5,1.4,3.3,55\n\
         e,1,21.0,1.5,3.4,66\n",
    )
    .unwrap();
    let (ds, report) = load_csv(&small_schema(&path)).unwrap();
    assert_eq!(ds.n(), 4);
    assert_eq!(report.dropped, vec![2]);
    assert_eq!(report.to_string(), "read 5 rows, kept 4, dropped 1");
    assert_eq!((ds.q(), ds.s(), ds.m()), (2, 1, 2));
    assert_eq!(ds.labels(), &[50.0, 70.0, 55.0, 66.0]);
    // header order within each block
    assert_eq!(ds.non_imaging_info()[1].name, "bmi");
    assert_eq!(ds.non_imaging().row_slice(1), &[1.0, 24.0]);
    assert_eq!(ds.features().row_slice(3), &[1.5, 3.4]);
}

#[test]
fn missing_label_also_drops() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    fs::write(&path, "id,sex,bmi,vol,thick,age\na,0,1,1,1,\nb,1,2,2,2,60\n").unwrap();
    let (ds, report) = load_csv(&small_schema(&path)).unwrap();
    assert_eq!((ds.n(), report.dropped.clone()), (1, vec![1]));
}

#[test]
fn bad_cell_names_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    fs::write(&path, "id,sex,bmi,vol,thick,age\na,0,1,1,1,50\nb,1,heavy,2,2,60\n").unwrap();
    let err = load_csv(&small_schema(&path)).unwrap_err();
    match &err {
        Error::Cell { row, column, value, .. } => {
            assert_eq!((*row, column.as_str(), value.as_str()), (2, "bmi", "heavy"));
        }
        other => panic!("unexpected {other:?}"),
    }
    let msg = err.to_string();
    assert!(msg.contains("row 2") && msg.contains("'bmi'"), "{msg}");
}

#[test]
fn unknown_kind_column_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    fs::write(&path, "id,sex,age\na,0,50\n").unwrap();
    let schema = CsvSchema::new(
        &path,
        kinds(&[("sex", ColumnKind::NonImaging), ("iq", ColumnKind::NonImaging)]),
    );
    let msg = load_csv(&schema).unwrap_err().to_string();
    assert!(msg.contains("'iq'"), "{msg}");
}

#[test]
fn no_usable_rows_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    fs::write(&path, "id,sex,bmi,vol,thick,age\na,,1,1,1,50\n").unwrap();
    assert!(load_csv(&small_schema(&path)).is_err());
}

#[test]
fn unmapped_columns_are_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    fs::write(&path, "id,site,sex,vol,age\na,x,0,1.5,50\nb,,1,2.5,60\n").unwrap();
    let schema = CsvSchema::new(
        &path,
        kinds(&[("sex", ColumnKind::NonImaging), ("vol", ColumnKind::Imaging)]),
    );
    let (ds, report) = load_csv(&schema).unwrap();
    assert_eq!((ds.n(), report.dropped.len()), (2, 0));
}

#[test]
fn synthetic_round_trip_is_exact() {
    let cfg = SyntheticConfig {
        n: 50,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic(&cfg, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    let meta = dir.path().join("m.json");
    write_csv(&ds, &csv, Some("abc")).unwrap();
    DatasetMetadata::of(&ds, Some("abc")).write(&meta).unwrap();
    assert!(fs::read_to_string(&csv).unwrap().starts_with("# config_hash=abc\n"));

    let schema = CsvSchema {
        metadata: Some(meta),
        ..CsvSchema::new(&csv, BTreeMap::new())
    };
    let (back, report) = load_csv(&schema).unwrap();
    assert!(report.dropped.is_empty());
    assert_eq!(back.non_imaging(), ds.non_imaging());
    assert_eq!(back.features(), ds.features());
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(back.phenotype_info(), ds.phenotype_info());
    assert_eq!(back.feature_info(), ds.feature_info());
}

#[test]
fn kind_map_and_metadata_are_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    fs::write(&path, "id,sex,age\na,0,50\n").unwrap();
    let schema = CsvSchema {
        metadata: Some(dir.path().join("m.json")),
        ..CsvSchema::new(&path, kinds(&[("sex", ColumnKind::NonImaging)]))
    };
    assert!(matches!(load_csv(&schema), Err(Error::Config(_))));
}
