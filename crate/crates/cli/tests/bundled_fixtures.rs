//! The CSVs under tests/fixtures are generated; `UPDATE_FIXTURES=1` rewrites them.

mod common;

use common::{bundled, fixture, updating};

#[test]
fn bundled_fixtures_match_generator() {
    for b in bundled() {
        let data = b.fixture.generate();
        let train = b.fixture.train_rows;
        let mut files = vec![(format!("{}_train.csv", b.name), data.csv(0..train))];
        if b.fixture.holdout_rows > 0 {
            files.push((format!("{}_holdout.csv", b.name), data.csv(train..data.targets.len())));
        }
        for (file, text) in files {
            let path = fixture(&file);
            if updating() {
                std::fs::write(&path, &text).unwrap();
                continue;
            }
            let bundled = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{file}: {e}"));
            assert!(bundled == text, "{file} differs from its generator; rerun with UPDATE_FIXTURES=1");
        }
    }
}
