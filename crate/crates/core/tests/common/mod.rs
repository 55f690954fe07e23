#![allow(dead_code)]

use std::path::Path;

use xovd_core::acquisition::{DatasetIndex, FixtureWebClient};
use xovd_core::eval::{CmteInputs, EvalDataset};
use xovd_core::synth::{generate_micro_dataset, SynthLayout, SynthSpec};

pub struct Micro {
    pub dir: tempfile::TempDir,
    pub layout: SynthLayout,
    pub in_house: DatasetIndex,
    pub test: EvalDataset,
    pub web: FixtureWebClient,
}

impl Micro {
    pub fn generate() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let layout = generate_micro_dataset(dir.path(), &SynthSpec::default()).unwrap();
        let in_house = DatasetIndex::load(&layout.train_manifest, None).unwrap();
        let test = EvalDataset::load(&layout.test_manifest, None).unwrap();
        let web = FixtureWebClient::new(&layout.web_dir);
        Self { dir, layout, in_house, test, web }
    }

    pub fn inputs(&self) -> CmteInputs<'_> {
        CmteInputs { vocabulary: &self.layout.vocabulary, in_house: &self.in_house, test: &self.test, web: Some(&self.web) }
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }
}
