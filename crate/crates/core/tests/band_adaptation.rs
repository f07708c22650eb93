use proptest::prelude::*;
use specialist_ensemble::bands::{apply_rule, AdaptationRule, BandSpec, Branch, RuleRegistry, IDENTITY_RULE};
use specialist_ensemble::Tensor;

fn spec(family: &str, n: usize) -> BandSpec {
    BandSpec::new((0..n).map(|i| format!("{family}/b{i}").parse().unwrap()).collect()).unwrap()
}

fn labeled(c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[c, h, w], |i| (i / (h * w)) as f64)
}

#[test]
fn sensor_rules_gather_exact_channels() {
    let reg = RuleRegistry::standard();
    let s2 = apply_rule(&labeled(13, 4, 4), reg.get("s2_rgb").unwrap()).unwrap();
    assert_eq!(s2, Tensor::from_fn(&[3, 4, 4], |i| [3.0, 2.0, 1.0][i / 16]));
    let irrg = apply_rule(&labeled(13, 4, 4), reg.get("s2_irrg_rgb").unwrap()).unwrap();
    assert_eq!(irrg, Tensor::from_fn(&[3, 4, 4], |i| [7.0, 3.0, 2.0][i / 16]));
    let sar = Tensor::from_fn(&[2, 4, 4], |i| if i < 16 { 0.5 } else { -0.2 });
    let out = apply_rule(&sar, reg.get("s1_rgb").unwrap()).unwrap();
    assert_eq!(out, Tensor::from_fn(&[3, 4, 4], |i| [0.5, -0.2, -0.2][i / 16]));
}

#[test]
fn identity_is_bit_exact_and_idempotent() {
    let img = Tensor::from_fn(&[5, 3, 2], |i| (i as f64 * 0.37).sin());
    let id = AdaptationRule::identity(&spec("X", 5));
    let once = apply_rule(&img, &id).unwrap();
    assert_eq!(once, img);
    assert_eq!(apply_rule(&once, &id).unwrap(), once);
    assert!(apply_rule(&labeled(4, 2, 2), &id).is_err());
}

#[test]
fn branch_enumeration_matches_brute_force() {
    let reg = RuleRegistry::standard();
    let (s2, rgb, s1, irrg) = (
        BandSpec::sentinel2(),
        BandSpec::rgb(),
        BandSpec::sentinel1(),
        BandSpec::irrg(),
    );
    let encoders = [("rgb-enc", &rgb), ("s2-enc", &s2), ("sar-enc", &s1)];
    let got = reg.enumerate_branches(&s2, encoders.iter().map(|(id, s)| (*id, *s)));
    let want: Vec<Branch> = [("rgb-enc", "s2_rgb"), ("rgb-enc", "s2_irrg_rgb"), ("s2-enc", IDENTITY_RULE)]
        .iter()
        .map(|(e, r)| Branch {
            encoder_id: e.to_string(),
            rule_id: r.to_string(),
        })
        .collect();
    assert_eq!(got, want);

    // Exhaustive oracle: every (encoder, rule or identity) pair whose specs line up.
    for input in [&s2, &rgb, &s1, &irrg, &BandSpec::sentinel2_sentinel1()] {
        let all = [("rgb", &rgb), ("s2", &s2), ("s1", &s1), ("irrg", &irrg)];
        let mut oracle = Vec::new();
        for (id, required) in all {
            if input == required {
                oracle.push((id.to_string(), IDENTITY_RULE.to_string()));
            }
            for r in reg.rules() {
                if &r.available == input && &r.required == required {
                    oracle.push((id.to_string(), r.rule_id.clone()));
                }
            }
        }
        let got: Vec<(String, String)> = reg
            .enumerate_branches(input, all.iter().map(|(id, s)| (*id, *s)))
            .into_iter()
            .map(|b| (b.encoder_id, b.rule_id))
            .collect();
        assert_eq!(got, oracle, "input {input}");
        let count: usize = all.iter().map(|(_, r)| reg.applicable_rules(input, r).len()).sum();
        assert_eq!(got.len(), count);
    }
    assert!(reg
        .enumerate_branches(&spec("Z", 4), [("rgb", &rgb)])
        .is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn random_rules_gather_listed_channels(
        available in 1usize..16,
        raw in proptest::collection::vec(any::<usize>(), 1..9),
        h in 1usize..5,
        w in 1usize..5,
    ) {
        let indices: Vec<usize> = raw.iter().map(|i| i % available).collect();
        let rule = AdaptationRule::new("r", spec("A", available), spec("B", indices.len()), indices.clone()).unwrap();
        let img = Tensor::from_fn(&[available, h, w], |i| i as f64 * 0.5 - 3.0);
        let out = apply_rule(&img, &rule).unwrap();
        prop_assert_eq!(out.shape(), &[indices.len(), h, w][..]);
        let hw = h * w;
        for (j, &src) in indices.iter().enumerate() {
            prop_assert_eq!(&out.data()[j * hw..(j + 1) * hw], &img.data()[src * hw..(src + 1) * hw]);
        }
        let mut reg = RuleRegistry::new();
        reg.register(rule.clone()).unwrap();
        prop_assert_eq!(RuleRegistry::parse(&reg.to_text()).unwrap(), reg);
    }
}
