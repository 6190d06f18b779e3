use ndarray::Array2;
use proptest::prelude::*;

use otlid::data::{load_dataset, write_dataset, DataFormat, Dataset, DomainTag};

fn dataset_strategy() -> impl Strategy<Value = (Array2<f32>, Option<Vec<usize>>, usize)> {
    (1usize..12, 1usize..6, 1usize..5, any::<bool>()).prop_flat_map(|(n, d, classes, labeled)| {
        (
            proptest::collection::vec(
                prop_oneof![any::<f32>().prop_filter("finite", |v| v.is_finite()), -1e3f32..1e3],
                n * d,
            ),
            proptest::collection::vec(0..classes, n),
        )
            .prop_map(move |(values, labels)| {
                (
                    Array2::from_shape_vec((n, d), values).unwrap(),
                    labeled.then_some(labels),
                    classes,
                )
            })
    })
}

fn bits(ds: &Dataset) -> Vec<u32> {
    ds.embeddings().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #[test]
    fn write_then_load_is_bit_exact((x, labels, classes) in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(x, labels.clone(), DomainTag::Source, classes).unwrap();
        for (name, format) in [("d.csv", DataFormat::Csv), ("d.f32", DataFormat::RawF32)] {
            let path = dir.path().join(name);
            write_dataset(&path, &ds, format).unwrap();
            let back = load_dataset(&path, format, DomainTag::Source, Some(classes)).unwrap();
            prop_assert_eq!(bits(&back), bits(&ds));
            prop_assert_eq!(back.embeddings().dim(), ds.embeddings().dim());
            prop_assert_eq!(back.labels().map(|l| l.to_vec()), labels.clone());
            prop_assert_eq!(back.class_count(), classes);
        }
    }
}
