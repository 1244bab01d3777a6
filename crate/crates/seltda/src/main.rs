//! Command-line entry point. Subcommands are wired up alongside the
//! pipeline stages they drive.

fn main() -> anyhow::Result<()> {
    Ok(())
}
