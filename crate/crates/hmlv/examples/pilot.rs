use hmlv::black::{black_vega, implied_vol, mc_price, OptionKind};
use hmlv::fourier::{rough_heston_smile, QuadConfig};
use hmlv::kernel::{build_lift, scales_for_gamma_range};
use hmlv::params::ModelParams;
use hmlv::sim::{simulate_hmlv, uniform_grid, SimConfig};
use hmlv::surface::{calibrate_local_vol, CalibConfig, QuoteLattice};

fn main() {
    let start = std::time::Instant::now();
    let params = ModelParams::new(0.02, 0.02, 0.3, 0.3, -0.7, 0.1).unwrap();
    let quad = QuadConfig::default();

    let maturities = [1.0 / 12.0, 0.25, 0.5, 0.75, 1.25, 2.25];
    let strikes: [[f64; 5]; 6] = [
        [0.97, 0.99, 1.00, 1.01, 1.02],
        [0.94, 0.97, 1.00, 1.02, 1.04],
        [0.92, 0.97, 1.00, 1.03, 1.06],
        [0.90, 0.96, 1.00, 1.03, 1.07],
        [0.87, 0.94, 1.00, 1.05, 1.10],
        [0.85, 0.93, 1.00, 1.07, 1.13],
    ];

    let mut csv = String::from("maturity,strike,implied_vol\n");
    for (i, &t) in maturities.iter().enumerate() {
        let prices = rough_heston_smile(t, &strikes[i], &params, &quad).unwrap();
        for (j, &k) in strikes[i].iter().enumerate() {
            let iv = implied_vol(prices[j], t, k, OptionKind::Call).unwrap();
            csv.push_str(&format!("{t:.16e},{k:.16e},{iv:.16e}\n"));
        }
    }
    println!("quotes built      {:.1}s", start.elapsed().as_secs_f64());

    let quotes = QuoteLattice::from_csv_str(&csv, "synthetic").unwrap();
    let calib = CalibConfig::default();
    let (surface, report) = calibrate_local_vol(&quotes, params.h, 1e-3, &calib).unwrap();
    let max_bp = report
        .residuals
        .iter()
        .flatten()
        .fold(0.0f64, |a, r| a.max(r.abs() * 1e4));
    println!(
        "calibrated        {:.1}s  iters {}  max PDE err {:.3} bp",
        start.elapsed().as_secs_f64(),
        report.iterations,
        max_bp
    );

    let (horizon, short) = scales_for_gamma_range(params.h, 20, 1.76e-4, 6.42e3).unwrap();
    let lift = build_lift(params.h, 20, horizon, short).unwrap();

    for seed in [11u64, 12, 13] {
        let mut grid = uniform_grid(2.25, 821);
        for &t in &maturities {
            grid.push(t);
        }
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        grid.dedup_by(|n, p| (*n - *p).abs() < 1e-9 * *n);
        let mut sim = SimConfig::new(10_000, grid, seed, true);
        sim.record_times = Some(maturities.to_vec());
        let (batch, _rec) = simulate_hmlv(&params, &lift, &surface, &sim).unwrap();

        let mut max_err = 0.0f64;
        let mut max_se = 0.0f64;
        for (i, &t) in maturities.iter().enumerate() {
            for (j, &k) in strikes[i].iter().enumerate() {
                let quote = quotes.implied_vols()[i][j];
                let (price, se) = mc_price(&batch, t, k, OptionKind::Call).unwrap();
                let iv = implied_vol(price, t, k, OptionKind::Call).unwrap();
                let vega = black_vega(t, k, iv).max(1e-300);
                let err_bp = (iv - quote) * 1e4;
                let se_bp = se / vega * 1e4;
                max_err = max_err.max(err_bp.abs());
                max_se = max_se.max(se_bp);
                if err_bp.abs() > 8.0 {
                    println!("  t {t:.3} k {k:.2}  err {err_bp:6.1} bp  se {se_bp:4.1} bp");
                }
            }
        }
        println!(
            "seed {seed}: max |err| {max_err:.1} bp  max se {max_se:.1} bp  ({:.1}s)",
            start.elapsed().as_secs_f64()
        );
    }
}
