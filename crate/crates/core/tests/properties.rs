//! Property tests for the invariants of the metric, augmentation,
//! batching and statistics code.

use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use biasaudit::analysis::{
    aggregate_seeds, convergence, gender_share, paired_t_test, LearningCurve, PairedSamples, SeedRun,
};
use biasaudit::cda::SwapLexicon;
use biasaudit::metrics::{log_ratio, malor, ProbabilityRecord};
use biasaudit::pretrain::{
    lr_at, mask_batch, MaskDecision, MaskPolicy, TokenizedSequence, TrainSchedule, VocabInfo,
};
use biasaudit::templates::{Assets, Experiment};

fn prob() -> impl Strategy<Value = f64> {
    (-10.0f64..0.0).prop_map(|e| 10f64.powf(e))
}

fn grid() -> impl Strategy<Value = Vec<Vec<(f64, f64)>>> {
    (1usize..8, 1usize..8).prop_flat_map(|(m, n)| {
        prop::collection::vec(prop::collection::vec((prob(), prob()), n), m)
    })
}

fn records(grid: &[Vec<(f64, f64)>]) -> Vec<ProbabilityRecord> {
    let mut out = Vec::new();
    for (o, row) in grid.iter().enumerate() {
        for (t, &(pm, pf)) in row.iter().enumerate() {
            out.push(ProbabilityRecord {
                template_id: format!("t{t}"),
                occupation: format!("o{o}"),
                p_male_term: pm,
                p_female_term: pf,
            });
        }
    }
    out
}

proptest! {
    #[test]
    fn log_ratio_is_antisymmetric_and_scale_free(a in prob(), b in prob(), k in 0.01f64..100.0) {
        let ab = log_ratio(a, b).unwrap();
        prop_assert!((ab + log_ratio(b, a).unwrap()).abs() <= 1e-12 * ab.abs().max(1.0));
        prop_assert!((log_ratio(a * k, b * k).unwrap() - ab).abs() < 1e-9);
    }

    #[test]
    fn malor_matches_direct_formula(g in grid()) {
        let r = malor("m", Experiment::HeShe, &records(&g)).unwrap();
        let direct: f64 = g.iter()
            .map(|row| (row.iter().map(|&(pm, pf)| (pm / pf).log2()).sum::<f64>() / row.len() as f64).abs())
            .sum::<f64>() / g.len() as f64;
        prop_assert!((r.malor - direct).abs() < 1e-12);
        prop_assert!(r.malor >= 0.0);
    }

    #[test]
    fn malor_ignores_record_order(g in grid(), seed in any::<u64>()) {
        let recs = records(&g);
        let mut shuffled = recs.clone();
        let mut state = seed;
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        let a = malor("m", Experiment::HeShe, &recs).unwrap();
        let b = malor("m", Experiment::HeShe, &shuffled).unwrap();
        prop_assert_eq!(a.malor.to_bits(), b.malor.to_bits());
        prop_assert_eq!(a.per_occupation_mean_log_ratio, b.per_occupation_mean_log_ratio);
    }

    #[test]
    fn swapping_genders_negates_means_but_keeps_malor(g in grid()) {
        let flipped: Vec<Vec<(f64, f64)>> = g.iter().map(|row| row.iter().map(|&(m, f)| (f, m)).collect()).collect();
        let a = malor("m", Experiment::HeShe, &records(&g)).unwrap();
        let b = malor("m", Experiment::HeShe, &records(&flipped)).unwrap();
        prop_assert!((a.malor - b.malor).abs() < 1e-12);
        for (occ, v) in &a.per_occupation_mean_log_ratio {
            prop_assert!((v + b.per_occupation_mean_log_ratio[occ]).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_probabilities_give_zero(ps in prop::collection::vec(prob(), 1..20)) {
        let g = vec![ps.iter().map(|&p| (p, p)).collect::<Vec<_>>()];
        prop_assert_eq!(malor("m", Experiment::HeShe, &records(&g)).unwrap().malor, 0.0);
    }
}

const SUBJECTS: &[&str] = &["He", "She", "The boy", "The girl", "My father", "My mother", "Michael", "Jennifer", "Mr. Lee", "Mrs. Lee"];
const OBJECTS: &[&str] = &["him", "her", "his brother", "her sister", "the gentlemen", "the ladies", "Robert", "Linda"];
const DETERMINERS: &[&str] = &["his", "her"];
const NOUNS: &[&str] = &["car", "desk", "wife", "husband", "sons", "daughters", "results"];
const OCCUPATIONS: &[&str] = &["nurse", "pilot", "lawyer", "teacher", "engineer"];

fn sentence() -> impl Strategy<Value = String> {
    (
        prop::sample::select(SUBJECTS),
        prop::sample::select(OBJECTS),
        prop::sample::select(DETERMINERS),
        prop::sample::select(NOUNS),
        prop::sample::select(OCCUPATIONS),
        0usize..5,
    )
        .prop_map(|(s, o, d, n, occ, shape)| match shape {
            0 => format!("{s} told {o} about {d} {n}."),
            1 => format!("{s} said the {occ} found {d} {n} and called {o}."),
            2 => format!("The {occ} thanked {o}, and {s} smiled."),
            3 => format!("{s} handed {o} {d} {n} at the {occ}'s office."),
            _ => format!("Was the {n} {}? {s} asked the {occ}.", if d == "his" { "his" } else { "hers" }),
        })
}

proptest! {
    #[test]
    fn swap_is_an_involution(s in sentence()) {
        let lex = SwapLexicon::new(&Assets::shipped().name_pairs);
        let once = lex.swap(&s);
        prop_assert_ne!(&once, &s);
        prop_assert_eq!(lex.swap(&once), s);
    }

    #[test]
    fn swap_exchanges_gender_counts(s in sentence()) {
        let lex = SwapLexicon::new(&Assets::shipped().name_pairs);
        let (m, f) = lex.gender_counts(&s);
        let (m2, f2) = lex.gender_counts(&lex.swap(&s));
        prop_assert_eq!((m, f), (f2, m2));
    }
}

fn vocab() -> VocabInfo {
    VocabInfo {
        size: 500,
        pad_id: 0,
        mask_id: 4,
        special_ids: (0..5).collect(),
    }
}

fn sequences() -> impl Strategy<Value = Vec<TokenizedSequence>> {
    prop::collection::vec(prop::collection::vec(5u32..500, 0..40), 1..10).prop_map(|bodies| {
        bodies.iter().map(|b| TokenizedSequence::with_markers(b, 2, 3)).collect()
    })
}

proptest! {
    #[test]
    fn collator_invariants(seqs in sequences(), seed in any::<u64>(), select in 0.0f64..=1.0) {
        let policy = MaskPolicy { select, ..MaskPolicy::default() };
        let b = mask_batch(&seqs, seed, &policy, &vocab()).unwrap();
        let longest = seqs.iter().map(|s| s.len()).max().unwrap();
        prop_assert!(b.seq_len.is_power_of_two() && b.seq_len >= longest && b.seq_len / 2 < longest);
        for (row, seq) in seqs.iter().enumerate() {
            for pos in 0..b.seq_len {
                let original = seq.ids.get(pos).copied().unwrap_or(0);
                prop_assert_eq!(b.labels[row][pos], original);
                prop_assert_eq!(b.attention[row][pos], pos < seq.len());
                let d = b.decisions[row][pos];
                if pos >= seq.len() || seq.special_positions.contains(&pos) {
                    prop_assert_eq!(d, MaskDecision::Keep);
                }
                match d {
                    MaskDecision::Keep | MaskDecision::Unchanged => prop_assert_eq!(b.input_ids[row][pos], original),
                    MaskDecision::Masked => prop_assert_eq!(b.input_ids[row][pos], 4),
                    MaskDecision::Random => prop_assert!(b.input_ids[row][pos] >= 5),
                }
            }
        }
        prop_assert_eq!(&b, &mask_batch(&seqs, seed, &policy, &vocab()).unwrap());
    }

    #[test]
    fn learning_rate_decays_linearly(examples in 1usize..5000, epochs in 1u32..50, frac in 0.0f64..=1.0) {
        let s = TrainSchedule::new(epochs, 2e-5, 32, examples).unwrap();
        let step = (frac * s.total_steps as f64) as u64;
        let lr = lr_at(step, &s).unwrap();
        prop_assert!((0.0..=2e-5).contains(&lr));
        prop_assert!((lr - 2e-5 * (1.0 - step as f64 / s.total_steps as f64)).abs() < 1e-18);
        if step < s.total_steps {
            prop_assert!(lr_at(step + 1, &s).unwrap() < lr);
        }
    }
}

proptest! {
    #[test]
    fn gender_share_is_complementary(a in prob(), b in prob()) {
        let s = gender_share(a, b).unwrap() + gender_share(b, a).unwrap();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_ignores_order(values in prop::collection::vec(-5.0f64..5.0, 2..12), rot in 0usize..12) {
        let runs: Vec<SeedRun> = values.iter().enumerate().map(|(i, &value)| SeedRun { seed: i as u64, value }).collect();
        let mut rotated = runs.clone();
        rotated.rotate_left(rot % runs.len());
        rotated.reverse();
        let a = aggregate_seeds(&runs).unwrap();
        let b = aggregate_seeds(&rotated).unwrap();
        prop_assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        prop_assert_eq!(a.std.to_bits(), b.std.to_bits());
        let all_equal = values.iter().all(|&v| v == values[0]);
        prop_assert_eq!(a.std == 0.0, all_equal);
    }

    #[test]
    fn t_test_matches_students_t_and_flips_sign(
        pairs in prop::collection::vec((0.8f64..1.0, -0.02f64..0.02), 2..25),
    ) {
        let before: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let after: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
        let fwd = paired_t_test(&PairedSamples::new(before.clone(), after.clone()).unwrap());
        let rev = paired_t_test(&PairedSamples::new(after, before.clone()).unwrap());
        if let (Ok(f), Ok(r)) = (fwd, rev) {
            prop_assert!((f.t + r.t).abs() < 1e-9 * f.t.abs().max(1.0));
            prop_assert!((f.p_two_sided - r.p_two_sided).abs() < 1e-12);
            let dist = StudentsT::new(0.0, 1.0, f.df as f64).unwrap();
            let oracle = 2.0 * (1.0 - dist.cdf(f.t.abs()));
            prop_assert!((f.p_two_sided - oracle).abs() < 1e-8, "p {} vs {}", f.p_two_sided, oracle);
        }
        let same = paired_t_test(&PairedSamples::new(before.clone(), before).unwrap()).unwrap();
        prop_assert_eq!((same.t, same.p_two_sided), (0.0, 1.0));
    }

    #[test]
    fn full_window_convergence_is_tail_mean_rule(values in prop::collection::vec(0.0f64..3.0, 1..30)) {
        let curve = LearningCurve::from_values(&values).unwrap();
        let r = convergence(&curve, values.len());
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let first = values.iter().position(|&v| v <= 1.1 * min).map(|i| i as u32);
        prop_assert_eq!(r.first_epoch_within_10pct, first);
        let last = convergence(&curve, 1);
        prop_assert_eq!(last.converged, *values.last().unwrap() <= 1.1 * min);
    }
}
