//! Run a config through the experiment runner and list the files it wrote.
//!
//! `cargo run --example run_experiment -- configs/ar1_fc.toml /tmp/ar1`

use std::path::PathBuf;

use capalloc::experiment::{run_file, Overrides};

fn main() {
    let mut args = std::env::args().skip(1);
    let config = PathBuf::from(args.next().unwrap_or_else(|| "configs/ar1_fc.toml".into()));
    let overrides = Overrides {
        out_dir: args.next().map(PathBuf::from),
        ..Overrides::default()
    };
    match run_file(&config, &overrides) {
        Ok(m) => {
            for o in &m.outputs {
                println!("{:<32} {:.2}s", o.file, o.seconds);
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
}
