//! Regenerate the committed FIX-A fixture file and its golden values from
//! the enumeration oracle. Golden numbers are never typed by hand; rerun
//! this binary if the fixture tables change.
//!
//!     cargo run -p piwo-cli --bin gen-golden [out_dir]

use std::path::PathBuf;

use piwo_cli::formats::{golden_to_string, save_tabular, write_atomic};
use piwo_cli::verify::fixture_golden_values;
use piwo_core::tabular::TabularModel;

fn main() {
    let out_dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("crates/cli/tests/fixtures"));
    std::fs::create_dir_all(&out_dir).expect("create fixture directory");

    let model = TabularModel::fix_a();
    let tab_path = out_dir.join("fix_a.tab");
    save_tabular(&tab_path, &model).expect("write fixture");
    println!("wrote {}", tab_path.display());

    let golden = fixture_golden_values(&model);
    let golden_path = out_dir.join("fix_a.golden");
    write_atomic(&golden_path, golden_to_string(&golden).as_bytes()).expect("write golden");
    println!("wrote {} ({} values)", golden_path.display(), golden.len());
}
