//! The numerical property suite, also available as `prompt-ot verify`.

use prompt_ot::checks::{run_suite, SuiteConfig};

fn main() -> prompt_ot::Result<()> {
    let report = run_suite(&SuiteConfig { seeds: 3, ..SuiteConfig::default() })?;
    for c in &report {
        println!("{}", c.line());
    }
    Ok(())
}
