//! Training must stay simulation-free: nothing on the training path may
//! reach the reference integrator.

use std::path::Path;

fn code_lines(file: &str) -> Vec<(usize, String)> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("src").join(file);
    let text = std::fs::read_to_string(&path).unwrap();
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split("//").next().unwrap_or("").to_string()))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect()
}

#[test]
fn training_path_does_not_reference_the_integrator() {
    for file in ["train.rs", "operator.rs", "newton.rs", "dae.rs", "linalg.rs"] {
        for (n, line) in code_lines(file) {
            let hit = line.contains("integrate::") || line.contains("crate::integrate") || line.contains("integrate,") || line.contains("{integrate");
            assert!(!hit, "{file}:{n} references the integrator: {line}");
        }
    }
}
