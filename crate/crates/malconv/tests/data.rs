//! Dataset loading, token streaming, and the synthetic corpus generator's
//! guarantees (determinism, label derivability, motif-baseline cap).

mod common;

use malconv::data::{
    best_motif_baseline_accuracy, generate_synthetic, load_index, task_b_label, SyntheticSpec,
    SyntheticTask, TokenSource, EOF_TOKEN, PAD_TOKEN,
};
use malconv::Error;

#[test]
fn index_rows_report_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("labels.csv");
    std::fs::write(dir.path().join("a.bin"), [0u8; 4]).unwrap();
    std::fs::write(&csv, "path,label\na.bin,1\nb.bin,7\n").unwrap();
    match load_index(&csv) {
        Err(Error::DataRow { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected row error, got {other:?}"),
    }

    std::fs::write(&csv, "nope\n").unwrap();
    assert!(load_index(&csv).is_err(), "missing header accepted");
}

#[test]
fn index_paths_resolve_relative_to_csv() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.bin"), [0u8; 8]).unwrap();
    let csv = dir.path().join("labels.csv");
    std::fs::write(&csv, "path,label\nx.bin,0\n").unwrap();
    let index = load_index(&csv).unwrap();
    assert_eq!(index.records.len(), 1);
    assert!(index.records[0].path.is_absolute() || index.records[0].path.exists());
    assert!(index.records[0].path.exists());
}

#[test]
fn token_stream_appends_eof_then_pad() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.bin");
    std::fs::write(&path, [10u8, 20, 30]).unwrap();
    let src = TokenSource::open(&path, 8).unwrap();
    assert_eq!(src.len(), 8);
    let tokens = src.materialize().unwrap();
    assert_eq!(
        tokens,
        vec![10, 20, 30, EOF_TOKEN, PAD_TOKEN, PAD_TOKEN, PAD_TOKEN, PAD_TOKEN]
    );
    // Windowed reads across the EOF boundary agree with materialization.
    let mut window = vec![0u16; 4];
    src.read_into(2, &mut window).unwrap();
    assert_eq!(window, tokens[2..6]);
}

#[test]
fn synthetic_generation_is_deterministic() {
    let spec = SyntheticSpec {
        task: SyntheticTask::B,
        n_samples: 16,
        len_min: 4096,
        len_max: 8192,
        seed: 31,
        motifs: Vec::new(),
        sep_min: 512,
        key_window: 256,
        copies: 1,
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let i1 = generate_synthetic(&spec, d1.path()).unwrap();
    let i2 = generate_synthetic(&spec, d2.path()).unwrap();
    assert_eq!(i1.records.len(), 16);
    for (a, b) in i1.records.iter().zip(&i2.records) {
        assert_eq!(a.label, b.label);
        assert_eq!(std::fs::read(&a.path).unwrap(), std::fs::read(&b.path).unwrap());
    }
}

#[test]
fn task_b_labels_derive_from_bytes_and_motif_baseline_is_capped() {
    let spec = SyntheticSpec {
        task: SyntheticTask::B,
        n_samples: 32,
        len_min: 8192,
        len_max: 16384,
        seed: 13,
        motifs: Vec::new(),
        sep_min: 1024,
        key_window: 512,
        copies: 1,
    };
    let dir = tempfile::tempdir().unwrap();
    let index = generate_synthetic(&spec, dir.path()).unwrap();
    let motifs = spec.decoded_motifs().unwrap();
    let (k, m1, m2) = (&motifs[0], &motifs[1], &motifs[2]);

    let find = |hay: &[u8], needle: &[u8]| hay.windows(needle.len()).any(|w| w == needle);
    let mut has_m1 = Vec::new();
    let mut has_m2 = Vec::new();
    let mut labels = Vec::new();
    for rec in &index.records {
        let bytes = std::fs::read(&rec.path).unwrap();
        let derived = task_b_label(&bytes, k, m1, m2, spec.sep_min, spec.key_window);
        assert_eq!(derived, rec.label, "{}", rec.path.display());
        has_m1.push(find(&bytes, m1));
        has_m2.push(find(&bytes, m2));
        labels.push(rec.label);
    }
    // No boolean function of the two motif-presence bits beats 75%: the
    // label depends on the context key, which motif grepping cannot see.
    let baseline = best_motif_baseline_accuracy(&has_m1, &has_m2, &labels);
    assert!(
        baseline <= 0.75 + 1e-9,
        "motif-only baseline {baseline} exceeds the construction cap"
    );
}

#[test]
fn both_label_classes_are_balanced() {
    let spec = SyntheticSpec {
        task: SyntheticTask::A,
        n_samples: 24,
        len_min: 1024,
        len_max: 2048,
        seed: 3,
        motifs: Vec::new(),
        sep_min: 64,
        key_window: 64,
        copies: 1,
    };
    let dir = tempfile::tempdir().unwrap();
    let index = generate_synthetic(&spec, dir.path()).unwrap();
    let pos = index.records.iter().filter(|r| r.label == 1).count();
    assert_eq!(pos, 12);
}
