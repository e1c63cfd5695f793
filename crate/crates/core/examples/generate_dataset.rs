//! Render a small synthetic crack dataset and write it as PGM pairs.
//!
//! `cargo run --example generate_dataset -- /tmp/cracks`

use fluxamba::data::{generate, load_split, split_sizes, write_dataset, GenSpec, Split};

fn main() -> fluxamba::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic".into());
    let spec = GenSpec { count: 20, size: 64, ..GenSpec::default() };
    let samples = generate(&spec)?;
    write_dataset(&out, &samples)?;

    let (tr, va, te) = split_sizes(samples.len());
    println!("wrote {} samples to {out}: train {tr}, val {va}, test {te}", samples.len());
    for s in samples.iter().take(3) {
        let fg = s.mask.data().iter().filter(|&&v| v == 1.0).count();
        println!("  {}: {} of {} pixels are crack", s.id, fg, s.mask.numel());
    }
    let back = load_split(&out, Split::Train)?;
    println!("reloaded train split: {} samples, identical to memory: {}", back.len(), back[0].image == samples[0].image);
    Ok(())
}
