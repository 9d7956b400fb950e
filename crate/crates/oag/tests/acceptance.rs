// Placeholder; the acceptance checks are added with the CLI.
#[test]
fn placeholder() {}
