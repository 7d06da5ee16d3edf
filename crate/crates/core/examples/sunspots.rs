//! Causal diffusion components of the monthly sunspot number.
//!
//! Reads the semicolon-separated SILSO monthly file (`year; month; decimal
//! date; mean; ...`, missing months as `-1`), embeds with 22-year past and
//! future windows, and writes the leading coordinates next to the solar-cycle
//! phase.
//!
//! ```text
//! cargo run --release --example sunspots -- SN_m_tot_V2.0.csv [out.csv]
//! ```

use std::error::Error;
use std::fs;

use causal_diffusion::diffmap::DiffusionConfig;
use causal_diffusion::embed::EmbeddingConfig;
use causal_diffusion::kernels::KernelSpec;
use causal_diffusion::pipeline::embed_series;
use causal_diffusion::series::{LibraryConfig, MultiSeries};
use causal_diffusion::systems::{cycle_phase, mean_cycle_amplitude};
use causal_diffusion::Series;

/// 22 years of months.
const WINDOW: usize = 264;
/// Smoothing used to locate cycle extrema.
const SMOOTHING: usize = 61;

fn read_silso(path: &str) -> Result<(Vec<f64>, Vec<f64>), Box<dyn Error>> {
    let text = fs::read_to_string(path)?;
    let (mut dates, mut values) = (Vec::new(), Vec::new());
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(';').map(str::trim).collect();
        if fields.len() < 4 {
            return Err(format!("malformed line {line:?}").into());
        }
        dates.push(fields[2].parse()?);
        let v: f64 = fields[3].parse()?;
        values.push(if v < 0.0 { f64::NAN } else { v });
    }
    Ok((dates, values))
}

fn main() -> Result<(), Box<dyn Error>> {
    let args: Vec<String> = std::env::args().collect();
    let input = args.get(1).ok_or("usage: sunspots <SN_m_tot.csv> [out.csv]")?;
    let output = args.get(2).map_or("sunspots-coordinates.csv", String::as_str);

    let (dates, values) = read_silso(input)?;
    let filled: Vec<f64> = values.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect();
    let phase = cycle_phase(&filled, SMOOTHING)?;
    // the amplitude is a per-month scale; the product kernel sums over the whole window
    let amplitude = mean_cycle_amplitude(&filled, SMOOTHING)?;
    let bandwidth = amplitude * (WINDOW as f64).sqrt();
    eprintln!(
        "{} months, {} minima, cycle amplitude {amplitude:.1}, bandwidth {bandwidth:.1}",
        values.len(),
        phase.minima.len()
    );

    let series: Series = MultiSeries::from_scalar_columns(&["sunspots"], vec![values])?;
    let run = embed_series(
        &series,
        &LibraryConfig::uniform(WINDOW, WINDOW),
        &KernelSpec::gaussian(bandwidth),
        &EmbeddingConfig::default(),
        &DiffusionConfig::gap(),
        1,
    )?;
    let emb = &run.embedding;
    eprintln!(
        "{} states, {} components, eigenvalues {:?}",
        run.library.len(),
        emb.n_components,
        emb.eigenvalues
            .iter()
            .take(6)
            .map(|l| (l * 1e4).round() / 1e4)
            .collect::<Vec<_>>()
    );

    let mut out = csv::Writer::from_path(output)?;
    let mut header = vec!["date".to_string(), "cycle_phase".to_string()];
    header.extend((1..=emb.n_components).map(|j| format!("psi_{j}")));
    out.write_record(&header)?;
    for (i, anchor) in run.library.anchors().iter().enumerate() {
        let t = anchor.time;
        let mut row = vec![dates[t].to_string(), phase.phase[t].to_string()];
        row.extend((1..=emb.n_components).map(|j| emb.psi[(i, j)].to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    eprintln!("wrote {output}");
    Ok(())
}
