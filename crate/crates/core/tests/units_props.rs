use cclg::units::{convert, parse_unit, strings_equivalent, unit_equivalent, UnitError};
use proptest::prelude::*;

const BASES: [&str; 7] = ["m", "g", "s", "W", "J", "Pa", "K"];
const PREFIXES: [&str; 4] = ["", "k", "c", "m"];

#[derive(Debug, Clone)]
struct Factor {
    base: usize,
    exp: i8,
    denominator: bool,
}

fn factors() -> impl Strategy<Value = Vec<Factor>> {
    prop::collection::vec((0..BASES.len(), 1i8..=3, any::<bool>()), 1..5).prop_map(|v| {
        let mut fs: Vec<Factor> = v.into_iter().map(|(base, exp, denominator)| Factor { base, exp, denominator }).collect();
        // a numerator is required
        fs[0].denominator = false;
        fs
    })
}

fn render(fs: &[Factor], prefixes: &[usize]) -> String {
    let term = |f: &Factor, p: usize| {
        let prefix = if BASES[f.base] == "K" { "" } else { PREFIXES[p] };
        let mut s = format!("{prefix}{}", BASES[f.base]);
        if f.exp != 1 {
            s.push_str(&format!("^{}", f.exp));
        }
        s
    };
    let num: Vec<String> = fs.iter().zip(prefixes).filter(|(f, _)| !f.denominator).map(|(f, &p)| term(f, p)).collect();
    let den: Vec<String> = fs.iter().zip(prefixes).filter(|(f, _)| f.denominator).map(|(f, &p)| term(f, p)).collect();
    let mut s = num.join("·");
    if !den.is_empty() {
        s.push_str(&format!("/({})", den.join("·")));
    }
    s
}

/// Three spellings of the same dimensions that differ only in prefixes.
fn equivalent_triple() -> impl Strategy<Value = (String, String, String)> {
    factors().prop_flat_map(|fs| {
        let n = fs.len();
        let pre = prop::collection::vec(0..PREFIXES.len(), n);
        (Just(fs), pre.clone(), pre.clone(), pre)
            .prop_map(|(fs, a, b, c)| (render(&fs, &a), render(&fs, &b), render(&fs, &c)))
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

proptest! {
    #[test]
    fn round_trip_restores_value((a, b, _) in equivalent_triple(), x in -1e6f64..1e6) {
        let (ua, ub) = (parse_unit(&a).unwrap(), parse_unit(&b).unwrap());
        let there = convert(x, &ua, &ub).unwrap();
        let back = convert(there, &ub, &ua).unwrap();
        prop_assert!(close(back, x), "{a} -> {b}: {x} came back as {back}");
    }

    #[test]
    fn parsing_is_deterministic((a, _, _) in equivalent_triple()) {
        let first = parse_unit(&a).unwrap();
        let owned = a.clone();
        prop_assert_eq!(first, parse_unit(&owned).unwrap());
    }

    #[test]
    fn equivalence_relation_and_reciprocal_ratio((a, b, c) in equivalent_triple()) {
        let (ua, ub, uc) = (parse_unit(&a).unwrap(), parse_unit(&b).unwrap(), parse_unit(&c).unwrap());
        let aa = unit_equivalent(&ua, &ua);
        prop_assert!(aa.equivalent);
        prop_assert_eq!(aa.scale_ratio, Some(1.0));
        let ab = unit_equivalent(&ua, &ub);
        let ba = unit_equivalent(&ub, &ua);
        prop_assert!(ab.equivalent && ba.equivalent);
        prop_assert!(unit_equivalent(&ub, &uc).equivalent && unit_equivalent(&ua, &uc).equivalent);
        let product = ab.scale_ratio.unwrap() * ba.scale_ratio.unwrap();
        prop_assert!(close(product, 1.0), "ratio product {product}");
    }

    #[test]
    fn differing_dimensions_never_equivalent((a, _, _) in equivalent_triple(), extra in 0..6usize) {
        let other = format!("{a}·{}", ["m", "s", "g", "W", "J", "Pa"][extra]);
        let (ua, uo) = (parse_unit(&a).unwrap(), parse_unit(&other).unwrap());
        let r = unit_equivalent(&ua, &uo);
        prop_assert!(!r.equivalent);
        prop_assert_eq!(r.scale_ratio, None);
        let is_incompatible = matches!(convert(1.0, &ua, &uo), Err(UnitError::IncompatibleUnits { .. }));
        prop_assert!(is_incompatible);
    }

    #[test]
    fn celsius_spellings_agree(x in -273.15f64..5000.0) {
        let (c, alias, k) = (parse_unit("degC").unwrap(), parse_unit("Celsius").unwrap(), parse_unit("K").unwrap());
        prop_assert_eq!(&c, &alias);
        let kelvin = convert(x, &c, &k).unwrap();
        prop_assert!((kelvin - (x + 273.15)).abs() < 1e-9);
        prop_assert!((convert(kelvin, &k, &alias).unwrap() - x).abs() < 1e-9);
    }
}

#[test]
fn celsius_alias_is_flagged() {
    let r = strings_equivalent("degC", "Celsius").unwrap();
    assert!(r.equivalent && r.alias_matched);
    assert_eq!(r.scale_ratio, Some(1.0));
}

#[test]
fn per_centimetre_conductivity_is_a_hundredfold() {
    let r = strings_equivalent("W/(cm·K)", "W/(m·K)").unwrap();
    assert!(r.equivalent);
    assert!((r.scale_ratio.unwrap() - 100.0).abs() < 1e-9);
    let slash = strings_equivalent("W/cm·K", "W/(m·K)").unwrap();
    assert_eq!(slash, r);
    let v = convert(21.5, &parse_unit("W/(m·K)").unwrap(), &parse_unit("W/(cm·K)").unwrap()).unwrap();
    assert!((v - 0.215).abs() < 1e-12);
}
