//! Regenerates the bundled synthetic datasets in `data/`.

use std::path::Path;

use odefuse_cli::synth::{hourly_csv, monthly_csv};

pub const MONTHLY_ROWS: usize = 600;
pub const HOURLY_ROWS: usize = 2880;

fn main() -> std::io::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("monthly_synthetic.csv"), monthly_csv(MONTHLY_ROWS, 0.05, 7))?;
    std::fs::write(dir.join("hourly_synthetic.csv"), hourly_csv(HOURLY_ROWS, 7))?;
    Ok(())
}
