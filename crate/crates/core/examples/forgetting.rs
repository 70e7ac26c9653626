//! Runs the FT-vs-RAT forgetting experiment and prints one line per seed.
//!
//! `cargo run --release --example forgetting -- [n_seeds]`

use ratlab::curriculum::ForgettingProtocol;

fn main() -> ratlab::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let proto = ForgettingProtocol::default();
    let started = std::time::Instant::now();
    let base = proto.pretrain_base()?;
    println!("pretrained base in {:.1}s", started.elapsed().as_secs_f64());
    let mut seeds = Vec::new();
    for seed in 0..n {
        let (o, _, _) = proto.run_seed(&base, seed)?;
        println!(
            "seed {seed}: A {:.3} -> FT {:.3} / RAT {:.3}   B FT {:.3} / RAT {:.3} (ratio {:.3})   [{:.0}s]",
            o.a_before,
            o.a_after_full,
            o.a_after_rat,
            o.b_after_full,
            o.b_after_rat,
            o.b_ratio(),
            started.elapsed().as_secs_f64()
        );
        seeds.push(o);
    }
    let out = ratlab::curriculum::ProtocolOutcome { seeds };
    println!(
        "RAT forgets no more than FT on {}/{} seeds; worst B ratio {:.3}",
        out.rat_forgets_less(),
        n,
        out.worst_b_ratio()
    );
    print!("{}", out.table()?.markdown);
    Ok(())
}
