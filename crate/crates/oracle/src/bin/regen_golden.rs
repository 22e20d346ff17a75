//! Regenerate the frozen golden-case file. Run explicitly:
//!
//!     cargo run -p crossalign-oracle --bin regen-golden -- <output-path>
//!
//! The default output is `crates/core/tests/golden/cases.json` relative to
//! the workspace root.

use crossalign_oracle::generate_golden;

fn main() {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "crates/core/tests/golden/cases.json".into());
    let golden = generate_golden(20260809, 4);
    let mut text = serde_json::to_string_pretty(&golden).expect("golden serializes");
    text.push('\n');
    if let Some(parent) = std::path::Path::new(&path).parent() {
        std::fs::create_dir_all(parent).expect("create output directory");
    }
    std::fs::write(&path, text).expect("write golden file");
    println!("wrote {} cases to {path}", golden.cases.len());
}
