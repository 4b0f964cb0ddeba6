//! Regenerates assets/calibration.toml from seeded renders and prints the
//! measured separations behind each threshold.

fn main() -> anyhow::Result<()> {
    let tax = vat_core::taxonomy::Taxonomy::load_default()?;
    let report = vat_core::synth::calib::calibrate(&tax, 32, 40, 0x0CA11B)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    let out = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/calibration.toml");
    report.constants.save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
