mod common;

use std::path::Path;

use common::{check_located, fuzz_corpus};
use proptest::prelude::*;
use qsmp::families::ExponentialUtility;
use qsmp::model::Coefficients;
use qsmp_cli::config::parse_config;
use qsmp_cli::expr::{parse_expression, BinOp, Env, Expr, Func, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn fuzz_corpus_parses_or_reports_a_location() {
    let corpus = fuzz_corpus(1000, 2024);
    let (x, z, u) = ([0.3, -0.7], [0.1, 2.0], [0.5, -0.5]);
    let env = Env { t: 0.25, x: &x, y: 0.4, z: &z, u: &u };
    let mut parsed = 0;
    for s in &corpus {
        match parse_expression(s, 2, 2, 2) {
            Ok(e) => {
                parsed += 1;
                let _ = e.evaluate(&env);
                let printed = e.to_string();
                assert_eq!(parse_expression(&printed, 2, 2, 2).unwrap(), e, "{s:?} -> {printed:?}");
            }
            Err(e) => {
                let (line, column) = e.location();
                check_located(s, line, column);
            }
        }
    }
    assert!(parsed > 0, "the corpus should contain some valid expressions");
}

fn var() -> impl Strategy<Value = Expr> {
    prop_oneof![
        Just(Expr::Var(Var::T)),
        Just(Expr::Var(Var::Y)),
        (0usize..2).prop_map(|i| Expr::Var(Var::X(i))),
        (0usize..2).prop_map(|i| Expr::Var(Var::Z(i))),
        (0usize..2).prop_map(|i| Expr::Var(Var::U(i))),
        (0.0f64..1e6).prop_map(Expr::Num),
        (1u32..100).prop_map(|v| Expr::Num(v as f64)),
    ]
}

fn ast() -> impl Strategy<Value = Expr> {
    var().prop_recursive(6, 64, 3, |inner| {
        let op = prop_oneof![Just(BinOp::Add), Just(BinOp::Sub), Just(BinOp::Mul), Just(BinOp::Div), Just(BinOp::Pow)];
        let unary = prop_oneof![
            Just(Func::Exp),
            Just(Func::Log),
            Just(Func::Sqrt),
            Just(Func::Abs),
            Just(Func::Tanh),
            Just(Func::Sign)
        ];
        prop_oneof![
            inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
            (op, inner.clone(), inner.clone()).prop_map(|(o, a, b)| Expr::Bin(o, Box::new(a), Box::new(b))),
            (unary, inner.clone()).prop_map(|(f, a)| Expr::Call(f, vec![a])),
            (prop::bool::ANY, inner.clone(), inner.clone())
                .prop_map(|(m, a, b)| Expr::Call(if m { Func::Min } else { Func::Max }, vec![a, b])),
        ]
    })
}

proptest! {
    #[test]
    fn printed_trees_reparse_identically(e in ast()) {
        let printed = e.to_string();
        let back = parse_expression(&printed, 2, 2, 2).unwrap();
        prop_assert_eq!(back, e);
    }

    #[test]
    fn evaluation_is_deterministic(e in ast(), x in -3.0f64..3.0) {
        let xs = [x, 1.0 - x];
        let env = Env { t: 0.5, x: &xs, y: 0.1, z: &[0.2, 0.3], u: &[x, -x] };
        prop_assert_eq!(e.evaluate(&env), e.evaluate(&env));
    }
}

fn configs_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_parse_and_their_expressions_round_trip() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap();
        parse_config(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let doc: toml::Table = text.parse().unwrap();
        let problem = doc["problem"].as_table().unwrap();
        let dim = |k: &str| problem.get(k).and_then(|v| v.as_integer()).unwrap_or(1) as usize;
        let (n, d, k) = (dim("n"), dim("d"), dim("k"));
        let mut sources = Vec::new();
        for key in ["drift", "diffusion", "generator", "terminal"] {
            if let Some(s) = problem.get(key).and_then(|v| v.as_str()) {
                sources.push(s.to_string());
            }
        }
        for section in ["control", "direction"] {
            if let Some(s) = doc.get(section).and_then(|t| t.get("u")).and_then(|v| v.as_str()) {
                sources.push(s.to_string());
            }
        }
        for s in sources {
            let e = parse_expression(&s, n, d, k).unwrap();
            assert_eq!(parse_expression(&e.to_string(), n, d, k).unwrap(), e, "{}: {s}", path.display());
            seen += 1;
        }
    }
    assert!(seen >= 4, "expected inline expressions among the shipped configs");
}

#[test]
fn inline_exponential_utility_matches_the_native_family() {
    let text = std::fs::read_to_string(configs_dir().join("exponential-utility-inline.toml")).unwrap();
    let cfg = parse_config(&text).unwrap();
    let inline = cfg.spec.coeffs.as_ref();
    let native = ExponentialUtility { gamma: 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + b.abs());
    for _ in 0..1000 {
        let t = rng.random_range(0.0..1.0);
        let x = [rng.random_range(-10.0..10.0)];
        let y = rng.random_range(-10.0..10.0);
        let z = [rng.random_range(-10.0..10.0)];
        let u = [rng.random_range(-1.0..1.0)];
        assert!(close(inline.generator(t, &x, y, &z, &u), native.generator(t, &x, y, &z, &u)));
        assert!(close(inline.terminal(&x), native.terminal(&x)));
        let (mut a, mut b) = ([0.0], [0.0]);
        inline.drift(t, &x, &u, &mut a);
        native.drift(t, &x, &u, &mut b);
        assert!(close(a[0], b[0]));
        inline.diffusion(t, &x, &u, &mut a);
        native.diffusion(t, &x, &u, &mut b);
        assert!(close(a[0], b[0]));
        inline.generator_z(t, &x, y, &z, &u, &mut a);
        native.generator_z(t, &x, y, &z, &u, &mut b);
        assert!(close(a[0], b[0]));
        inline.terminal_x(&x, &mut a);
        native.terminal_x(&x, &mut b);
        assert!(close(a[0], b[0]), "{} vs {}", a[0], b[0]);
        inline.drift_u(t, &x, &u, &mut a);
        native.drift_u(t, &x, &u, &mut b);
        assert!(close(a[0], b[0]));
        assert!(close(inline.generator_y(t, &x, y, &z, &u), 0.0));
    }
}

#[test]
fn mutated_configs_are_rejected_with_a_location() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rejected = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let chars: Vec<char> = text.chars().collect();
        for _ in 0..150 {
            let mutated: String = match rng.random_range(0..4) {
                0 => chars[..rng.random_range(0..chars.len())].iter().collect(),
                1 => {
                    let at = rng.random_range(0..chars.len());
                    let junk = ["=", "[", "\"", "]]", "x", "-1", "{", "nan", "é"][rng.random_range(0..9)];
                    let mut s: String = chars[..at].iter().collect();
                    s.push_str(junk);
                    s.extend(&chars[at..]);
                    s
                }
                2 => {
                    let lines: Vec<&str> = text.lines().collect();
                    let drop = rng.random_range(0..lines.len());
                    lines.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, l)| *l).collect::<Vec<_>>().join("\n")
                }
                _ => {
                    let lines: Vec<&str> = text.lines().collect();
                    let pick = rng.random_range(0..lines.len());
                    let mut out: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
                    if let Some((k, _)) = lines[pick].split_once('=') {
                        let bad = ["\"oops\"", "-3", "1e400", "[]", "{}", "\"x1*(\"", "0"][rng.random_range(0..7)];
                        out[pick] = format!("{k}= {bad}");
                    }
                    out.join("\n")
                }
            };
            if let Err(e) = parse_config(&mutated) {
                rejected += 1;
                let shown = e.to_string();
                assert!(shown.starts_with("line ") || shown.starts_with('`'), "unlocated: {shown}");
            }
        }
    }
    assert!(rejected > 100);
}
