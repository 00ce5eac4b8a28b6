//! The randomized invariant suite, with and without an injected fault.

use capalloc::validate::{validate, Fault, ValidateOptions};

fn main() {
    for fault in [Fault::None, Fault::PerturbOrthonormality] {
        let report = validate(&ValidateOptions {
            seed: 3,
            instances: 50,
            fault,
        });
        println!("fault {fault:?}: passed {}", report.passed);
        for c in report.checks {
            println!("  {:<40} {} worst {:.1e}", c.name, if c.passed { "ok  " } else { "FAIL" }, c.worst);
        }
    }
}
