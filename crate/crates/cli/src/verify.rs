//! `molcomm verify`: oracle checks on small systems, one line per check.

use anyhow::Result;
use molcomm::chem::{complex_name, make_ligand_receptor_network, SpeciesId};
use molcomm::filtergen::{generate_filter_spec_with, FilterOptions};
use molcomm::oracle::{
    brute_force_filter_check, empirical_vs_exact, master_equation_transient, sample_states, single_voxel_system, small_two_site_system,
    BinChoice, StateCap,
};

fn line(ok: bool, name: &str, detail: String) -> bool {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

pub fn run(quick: bool, seed: u64) -> Result<bool> {
    let scale = if quick { 4 } else { 1 };
    let mut all = true;

    let birth = single_voxel_system(make_ligand_receptor_network(1, &[1.0], &[1.0])?, 0, vec![10.0], 0.0)?;
    let n = 10_000 / scale;
    let s = birth.species_id("S")?;
    let counts = sample_states(&birth, 0, 1.0, n, seed)?;
    let mean = counts.iter().map(|c| c[s.0] as f64).sum::<f64>() / n as f64;
    let sigma = (10.0 / n as f64).sqrt();
    all &= line((mean - 10.0).abs() <= 3.0 * sigma, "emission-mean", format!("mean={mean:.4} target=10 3sigma={:.4}", 3.0 * sigma));

    let exact = master_equation_transient(&birth, 0, 1.0, StateCap { max_count: 80, max_states: 1000 })?;
    let mut worst: f64 = 0.0;
    let mut ln_fact = 0.0;
    for (k, p) in exact.marginal(|st| st[s.0]) {
        if k > 0 {
            ln_fact += (k as f64).ln();
        }
        worst = worst.max((p - (-10.0 + k as f64 * 10f64.ln() - ln_fact).exp()).abs());
    }
    all &= line(worst < 1e-8, "uniformization-poisson", format!("max_error={worst:.3e}"));

    let sys = small_two_site_system(2)?;
    let cap = StateCap {
        max_count: 30,
        max_states: 100_000,
    };
    let tv = empirical_vs_exact(&sys, 0, 1.0, 50_000 / scale, seed, cap)?;
    all &= line(tv.tv <= 0.02 * if quick { 2.0 } else { 1.0 }, "ssa-vs-exact", tv.to_string());

    let sys = small_two_site_system(3)?;
    let net = sys.network().clone();
    let closed: Vec<String> = (0..=2).map(complex_name).collect();
    let spec = generate_filter_spec_with(&net, &["C1", "C2"], &FilterOptions { closed })?.bind_totals(|sp: SpeciesId| {
        if sp.0 == 1 {
            3
        } else {
            0
        }
    });
    let report = brute_force_filter_check(
        &sys,
        &spec,
        0,
        1.0,
        &[0.04, 0.02, 0.01],
        200_000 / scale,
        seed,
        &BinChoice::MostPopulatedWithAtLeast(vec![1, 1]),
    )?;
    print!("{report}");
    let finest = report.windows.last().unwrap();
    all &= line(
        finest.deltas.iter().all(|d| d.agrees()),
        "filter-terms",
        format!("bin_size={} dt={}", report.bin_size, finest.dt),
    );
    Ok(all)
}
