use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PIECES: [&str; 40] = [
    "x1", "x2", "x3", "u1", "z1", "z2", "y", "t", "exp", "log", "sqrt", "abs", "tanh", "min", "max", "sign", "(", ")",
    "[", "]", ",", "+", "-", "*", "/", "^", "1", "0.5", "2e3", "1e999", ".", "e", "$", " ", "\n", "foo", "x0", "x99",
    "3.", "\t",
];

/// Fuzz corpus: token soup, random characters, and deep nesting.
pub fn fuzz_corpus(count: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let s = match i % 4 {
            0 | 1 => {
                let len = rng.random_range(1..40);
                (0..len).map(|_| PIECES[rng.random_range(0..PIECES.len())]).collect::<String>()
            }
            2 => {
                let len = rng.random_range(0..30);
                (0..len)
                    .map(|_| {
                        let c = rng.random_range(0x20u32..0x7f);
                        if rng.random_bool(0.05) {
                            'é'
                        } else {
                            char::from_u32(c).unwrap()
                        }
                    })
                    .collect()
            }
            _ => {
                let depth = rng.random_range(1..120);
                let open = if rng.random_bool(0.5) { "(" } else { "-(" };
                let close = if rng.random_bool(0.8) { depth } else { rng.random_range(0..depth) };
                format!("{}x1{}", open.repeat(depth), ")".repeat(close))
            }
        };
        out.push(s);
    }
    out
}

pub fn check_located(s: &str, line: usize, column: usize) {
    let lines: Vec<&str> = s.split('\n').collect();
    assert!(line >= 1 && line <= lines.len(), "line {line} outside {s:?}");
    assert!(column >= 1 && column <= lines[line - 1].chars().count() + 1, "column {column} outside {s:?}");
}
