//! Times the frequency-domain map against the direct map on random cubes.
//!
//! cargo run --release --example bench [sizes, e.g. 8,16,32]

use csngf::eval::{bench_oracle, DEFAULT_DIRECT_CAP};

fn main() -> csngf::Result<()> {
    let sizes: Vec<usize> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').filter_map(|n| n.trim().parse().ok()).collect())
        .unwrap_or_else(|| vec![8, 16, 24, 32]);
    println!("{:>6} {:>12} {:>12} {:>9}", "size", "direct (s)", "fft (s)", "ratio");
    for row in bench_oracle(&sizes, 3, DEFAULT_DIRECT_CAP, 0)? {
        println!(
            "{:>6} {:>12.5} {:>12.5} {:>9.1}",
            row.size, row.t_direct_s, row.t_fft_s, row.ratio
        );
    }
    Ok(())
}
