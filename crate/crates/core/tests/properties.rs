use proptest::prelude::*;

use molcomm::chem::{complex_name, make_ligand_receptor_network, Reaction, ReactionNetwork, SpeciesId};
use molcomm::filtergen::{generate_filter_spec_with, FilterOptions, FilterSpec};
use molcomm::oracle::small_two_site_system;
use molcomm::stats::{wilson_interval, Z95};

fn network_strategy() -> impl Strategy<Value = ReactionNetwork> {
    (1usize..=5)
        .prop_flat_map(|n| {
            let side = proptest::collection::vec(0u32..=2, n);
            (Just(n), proptest::collection::vec((side.clone(), side, 0.01f64..20.0), 1..=6))
        })
        .prop_filter_map("empty reaction", |(n, rows)| {
            let reactions = rows
                .into_iter()
                .map(|(r, p, k)| {
                    let side = |v: Vec<u32>| v.into_iter().enumerate().filter(|&(_, c)| c > 0).map(|(s, c)| (SpeciesId(s), c)).collect::<Vec<_>>();
                    Reaction::new(side(r), side(p), k)
                })
                .collect::<Result<Vec<_>, _>>()
                .ok()?;
            ReactionNetwork::new((0..n).map(|i| format!("X{i}")).collect(), reactions).ok()
        })
}

/// Spec with labels dropped and laws sorted by species, so two specs that
/// differ only in naming and law order compare equal.
fn canonical(mut spec: FilterSpec) -> FilterSpec {
    let mut order: Vec<usize> = (0..spec.laws.len()).collect();
    order.sort_by_key(|&l| spec.laws[l].species);
    let mut rank = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    spec.laws = order.iter().map(|&l| spec.laws[l].clone()).collect();
    for c in &mut spec.channels {
        c.label.clear();
        for d in &mut c.determined {
            d.0 = rank[d.0];
        }
        c.determined.sort();
    }
    spec.channels.sort_by_key(|c| c.reaction);
    spec
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn q_n_complements_every_channel(
        net in network_strategy(),
        pick in proptest::collection::vec(any::<bool>(), 5),
        counts in proptest::collection::vec(0u64..30, 5),
        moment in 0.0f64..10.0,
        frac in 0.0f64..1.0,
    ) {
        let n = net.n_species();
        let mut measured: Vec<&str> = (0..n).filter(|&i| pick[i]).map(|i| net.species()[i].as_str()).collect();
        if measured.is_empty() {
            measured.push(net.species()[0].as_str());
        }
        let spec = generate_filter_spec_with(&net, &measured, &FilterOptions::default()).unwrap();
        let observed: Vec<u64> = spec.measured.iter().map(|s| counts[s.0]).collect();
        let moments = vec![moment; spec.channels.len()];
        let rate: f64 = (0..spec.channels.len()).map(|i| spec.observed_factor(i, &observed).unwrap() * moment).sum();
        let dt = if rate > 0.0 { frac / rate } else { frac };
        let p = spec.step_probabilities(&observed, &moments, dt).unwrap();
        prop_assert!(p.channels.iter().all(|&q| q >= 0.0));
        prop_assert!(p.no_reaction >= -1e-12);
        prop_assert!((p.no_reaction + p.channels.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn relabelling_commutes_with_generation(
        net in network_strategy(),
        shuffle in proptest::collection::vec(any::<u64>(), 5),
        pick in proptest::collection::vec(any::<bool>(), 5),
    ) {
        let n = net.n_species();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by_key(|&i| (shuffle[i], i));
        // perm[old] = new
        let names: Vec<String> = (0..n).map(|i| format!("Y{i}")).collect();
        let by_old: Vec<String> = (0..n).map(|old| names[perm[old]].clone()).collect();
        let relabelled = net.relabel(&perm, &by_old).unwrap();
        let mut measured: Vec<usize> = (0..n).filter(|&i| pick[i]).collect();
        if measured.is_empty() {
            measured.push(0);
        }
        let closed: Vec<String> = net.species().to_vec();
        let closed_new: Vec<String> = (0..n).map(|old| by_old[old].clone()).collect();
        let old_names: Vec<&str> = measured.iter().map(|&i| net.species()[i].as_str()).collect();
        let new_names: Vec<&str> = measured.iter().map(|&i| by_old[i].as_str()).collect();
        let a = generate_filter_spec_with(&net, &old_names, &FilterOptions { closed }).unwrap().relabel(&perm, &names);
        let b = generate_filter_spec_with(&relabelled, &new_names, &FilterOptions { closed: closed_new }).unwrap();
        prop_assert_eq!(canonical(a), canonical(b));
    }

    #[test]
    fn ssa_keeps_counts_non_negative_and_receptors_conserved(seed in any::<u64>(), receptors in 0u64..6) {
        let sys = small_two_site_system(receptors).unwrap();
        let traj = sys.simulate(0, 1.0, seed).unwrap();
        let rx = sys.rx_voxel();
        let family: Vec<SpeciesId> = (0..=2).map(|k| sys.species_id(&complex_name(k)).unwrap()).collect();
        let mut conserved = true;
        let valid = traj.replay(|_, st| {
            conserved &= family.iter().map(|&s| st.count(rx, s)).sum::<u64>() == receptors;
        });
        prop_assert!(valid);
        prop_assert!(conserved);
        prop_assert!(traj.events.windows(2).all(|w| w[0].time <= w[1].time));
        prop_assert!(traj.events.iter().all(|e| e.time <= 1.0));
    }

    #[test]
    fn wilson_interval_brackets_the_estimate(trials in 1u64..5000, frac in 0.0f64..=1.0) {
        let k = (frac * trials as f64).round() as u64;
        let iv = wilson_interval(k, trials, Z95);
        let p = k as f64 / trials as f64;
        prop_assert!(0.0 <= iv.lo && iv.lo <= iv.hi && iv.hi <= 1.0);
        prop_assert!(iv.lo <= p + 1e-12 && p - 1e-12 <= iv.hi);
    }
}

#[test]
fn receptor_filter_generation_is_deterministic() {
    let net = make_ligand_receptor_network(3, &[1.0, 0.5, 1.0], &[1.0, 1.0, 1.0]).unwrap();
    let closed = FilterOptions::closed(&(0..=3).map(complex_name).collect::<Vec<_>>());
    let a = generate_filter_spec_with(&net, &["C1", "C2", "C3"], &closed).unwrap();
    let b = generate_filter_spec_with(&net, &["C1", "C2", "C3"], &closed).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.laws.len(), 1);
}
