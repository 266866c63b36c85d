//! Sample-size reference values from an independent 50-digit evaluation of
//! the two bounds (mpmath), frozen here.

pub const MS: [u64; 5] = [1, 2, 4, 10, 50];

/// (ρ, β, K̃ for each m in `MS`).
pub const SINGLE: [(f64, f64, [u64; 5]); 15] = [
    (0.01, 0.01, [1983, 3045, 5168, 11538, 54005]),
    (0.01, 0.05, [1661, 2723, 4846, 11216, 53683]),
    (0.01, 0.1, [1523, 2584, 4708, 11078, 53544]),
    (0.05, 0.01, [334, 484, 783, 1680, 7662]),
    (0.05, 0.05, [270, 419, 719, 1616, 7598]),
    (0.05, 0.1, [242, 392, 691, 1588, 7570]),
    (0.1, 0.01, [155, 216, 340, 712, 3188]),
    (0.1, 0.05, [122, 184, 308, 680, 3156]),
    (0.1, 0.1, [108, 170, 294, 666, 3142]),
    (0.2, 0.01, [72, 97, 147, 297, 1298]),
    (0.2, 0.05, [55, 81, 131, 281, 1282]),
    (0.2, 0.1, [49, 74, 124, 274, 1275]),
    (0.5, 0.01, [26, 34, 49, 94, 396]),
    (0.5, 0.05, [20, 28, 43, 88, 390]),
    (0.5, 0.1, [17, 25, 40, 85, 387]),
];

pub const LINE_PHASES: [u64; 3] = [1, 2, 129];
pub const DGS: [u64; 3] = [0, 1, 7];

/// (ρ, β, K̃ indexed by [dg][line_phases]).
pub const MR3: [(f64, f64, [[u64; 3]; 3]); 4] = [
    (
        0.01,
        0.05,
        [
            [2723, 4846, 274509],
            [4846, 6970, 276632],
            [17586, 19710, 289372],
        ],
    ),
    (
        0.01,
        0.1,
        [
            [2584, 4708, 274370],
            [4708, 6831, 276494],
            [17448, 19571, 289233],
        ],
    ),
    (
        0.1,
        0.05,
        [[184, 308, 16034], [308, 432, 16158], [1051, 1175, 16901]],
    ),
    (
        0.1,
        0.1,
        [[170, 294, 16021], [294, 418, 16144], [1037, 1161, 16887]],
    ),
];

/// Mismatches against the implementation, as readable lines.
pub fn mismatches() -> Vec<String> {
    use microgrid_reconfig::scenario::{min_sample_size, min_sample_size_mr3};
    let mut bad = Vec::new();
    for (rho, beta, ks) in SINGLE {
        for (m, k) in MS.iter().zip(ks) {
            let got = min_sample_size(rho, beta, *m).unwrap();
            if got != k {
                bad.push(format!("single ({rho},{beta},{m}): {got} != {k}"));
            }
        }
    }
    for (rho, beta, grid) in MR3 {
        for (g, row) in DGS.iter().zip(grid) {
            for (l, k) in LINE_PHASES.iter().zip(row) {
                let got = min_sample_size_mr3(rho, beta, *g, *l).unwrap();
                if got != k {
                    bad.push(format!("mr3 ({rho},{beta},{g},{l}): {got} != {k}"));
                }
            }
        }
    }
    bad
}
