//! Compare analytic gradients with central finite differences for every op
//! and for the gates of both architectures.
//!
//! cargo run --release --example gradcheck

use wfnet::diagnostics::{gradcheck_suite, write_gradcheck_table};

fn main() -> wfnet::Result<()> {
    let rows = gradcheck_suite()?;
    write_gradcheck_table(std::io::stdout().lock(), &rows)?;
    if rows.iter().any(|r| !r.pass) {
        std::process::exit(1);
    }
    Ok(())
}
