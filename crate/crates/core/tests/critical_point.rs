use iicperc::config::PcSettings;
use iicperc::experiments::estimate_pc;
use iicperc::lattice::ModelSpec;

// Square-lattice bond percolation has p_c = 1/2 exactly.
#[test]
fn square_lattice_bisection_brackets_one_half() {
    let s = PcSettings {
        samples: 100_000,
        window: [3, 9],
        width: 0.01,
        overflow_abort: 1.0,
        ..PcSettings::default()
    };
    let m = ModelSpec::nearest_neighbour(2, 0.5).unwrap();
    let e = estimate_pc(&m, &s, 11, None).unwrap();
    assert!((e.p_hat - 0.5).abs() <= 0.01, "{e:?}");
    assert!(e.interval.0 <= e.p_hat && e.p_hat <= e.interval.1);
    assert!(e.interval.1 - e.interval.0 <= 0.01 + 1e-12);
}
