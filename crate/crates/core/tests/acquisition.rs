mod common;

use std::path::Path;

use xovd_core::acquisition::{
    build_gallery, filter_web, retrieve_in_house, retrieve_web, DatasetIndex, FetchOutcome, FixtureWebClient,
    GalleryOptions, ManifestObject, ManifestRecord, Provenance, WebImageClient,
};
use xovd_core::backends::stub::ForegroundFilter;
use xovd_core::backends::{BBox, BackendBundle};
use xovd_core::material::{build_material_db, fallback_material_db, MaterialOptions};

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn web_fixtures_drop_undecodable_and_blank_hits() {
    let micro = common::Micro::generate();
    // 12 photos + 2 blanks + 2 corrupt files per class
    let (payloads, outcome) = micro.web.search("lemon", 100).unwrap();
    assert_eq!((payloads.len(), outcome), (16, FetchOutcome::Hit));
    let decoded = retrieve_web("lemon", &micro.web, 100).unwrap();
    assert_eq!(decoded.len(), 14);
    let kept = filter_web(decoded, &ForegroundFilter::default(), "lemon", 0.5).unwrap();
    assert_eq!(kept.len(), 12);

    let first = retrieve_web("lemon", &micro.web, 3).unwrap();
    assert!(first.len() <= 3);
    assert!(first.windows(2).all(|w| w[0].source_id < w[1].source_id));

    let (none, miss) = micro.web.search("unicorn", 5).unwrap();
    assert!(none.is_empty());
    assert_eq!(miss, FetchOutcome::FixtureMiss);
}

#[test]
fn in_house_retrieval_is_ordered_and_case_insensitive() {
    let micro = common::Micro::generate();
    let opts = GalleryOptions::default();
    let first = retrieve_in_house("knife", &micro.in_house, 5, &opts.crop);
    let ids: Vec<&str> = first.iter().map(|s| s.source_id.as_str()).collect();
    assert_eq!(ids, ["train-knife-000", "train-knife-001", "train-knife-002", "train-knife-003", "train-knife-004"]);
    let shouty = retrieve_in_house("  KNIFE ", &micro.in_house, 5, &opts.crop);
    assert_eq!(shouty.iter().map(|s| &s.source_id).collect::<Vec<_>>(), first.iter().map(|s| &s.source_id).collect::<Vec<_>>());
    assert!(retrieve_in_house("knives", &micro.in_house, 5, &opts.crop).is_empty());
    // cropped to box + margin, so smaller than the 96x96 source
    assert!(first.iter().all(|s| s.image.height() < 96 && s.provenance == Provenance::InHouse));
}

#[test]
fn invisible_objects_are_not_retrievable() {
    let b = BBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
    let rec = |id: &str, visible: bool| ManifestRecord {
        image_id: Some(id.into()),
        image_path: format!("{id}.png"),
        classes: vec![],
        split: Some("train".into()),
        objects: vec![ManifestObject { class_name: "Gun".into(), bbox: Some(b), visible }],
    };
    let index = DatasetIndex::from_records(vec![rec("a", false), rec("b", true)], Path::new("/data"), None);
    assert_eq!(index.entries().len(), 1);
    assert_eq!(index.entries()[0].image_id, "b");
    assert!(index.contains_class("gun"));
    let hidden_only = DatasetIndex::from_records(vec![rec("a", false)], Path::new("/data"), None);
    assert!(hidden_only.is_empty());
}

#[test]
fn gallery_rejects_bad_vocabularies() {
    let micro = common::Micro::generate();
    let backends = BackendBundle::stub();
    let db = fallback_material_db();
    let opts = GalleryOptions::default();
    assert!(build_gallery(&[], &micro.in_house, None, &backends, &db, &opts).is_err());
    assert!(build_gallery(&names(&["knife", "Knife"]), &micro.in_house, None, &backends, &db, &opts).is_err());
    let zero_k = GalleryOptions { k: 0, ..opts };
    assert!(build_gallery(&names(&["knife"]), &micro.in_house, None, &backends, &db, &zero_k).is_err());
}

#[test]
fn gallery_is_independent_of_thread_count() {
    let micro = common::Micro::generate();
    let backends = BackendBundle::stub();
    let db = build_material_db(&micro.in_house.restrict_to(&["knife"]), &backends, &MaterialOptions::default()).unwrap();
    let vocab = names(&["knife", "laptop", "lemon"]);
    let index = micro.in_house.restrict_to(&["knife"]);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| build_gallery(&vocab, &index, Some(&micro.web), &backends, &db, &GalleryOptions::default()).unwrap())
    };
    let (one, four) = (run(1), run(4));
    assert_eq!(one.provenance_summary(), four.provenance_summary());
    for class in &vocab {
        let a: Vec<_> = one.samples(class).iter().map(|s| (&s.source_id, &s.image)).collect();
        let b: Vec<_> = four.samples(class).iter().map(|s| (&s.source_id, &s.image)).collect();
        assert_eq!(a, b);
    }
    assert_eq!(one.samples("laptop")[0].provenance, Provenance::WebSynthetic);
}

#[test]
fn without_a_web_client_unindexed_classes_are_missing() {
    let micro = common::Micro::generate();
    let backends = BackendBundle::stub();
    let index = micro.in_house.restrict_to(&["laptop"]);
    let g = build_gallery(&names(&["laptop", "lemon"]), &index, None, &backends, &fallback_material_db(), &GalleryOptions::default())
        .unwrap();
    assert_eq!(g.missing_classes(), names(&["lemon"]));
    assert_eq!(g.samples("laptop").len(), 30);
    let web: &dyn WebImageClient = &FixtureWebClient::new(micro.root().join("nowhere"));
    let g = build_gallery(&names(&["lemon"]), &index, Some(web), &backends, &fallback_material_db(), &GalleryOptions::default())
        .unwrap();
    assert_eq!(g.missing_classes(), names(&["lemon"]));
}
